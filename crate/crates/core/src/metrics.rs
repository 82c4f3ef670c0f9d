//! PSNR, SSIM and an external VMAF hook.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "psnr: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    ensure!(!a.is_empty(), Shape, "psnr: empty input");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..n).map(|j| g[j] * x[y * w + xx + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..n).map(|i| g[i] * rows[(y + i) * ow + xx]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over the valid region of an 11×11 Gaussian window (σ = 1.5),
/// averaged over channels.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "ssim: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    let (c, h, w) = a.chw();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Invalid,
        "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let g = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for k in 0..c {
        let x: Vec<f64> = a.data()[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, _, _) = filter_valid(&x, h, w, &g);
        let (my, _, _) = filter_valid(&y, h, w, &g);
        let (sxx, _, _) = filter_valid(&prod(&x, &x), h, w, &g);
        let (syy, _, _) = filter_valid(&prod(&y, &y), h, w, &g);
        let (sxy, oh, ow) = filter_valid(&prod(&x, &y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    let value = total / c as f64;
    // identical inputs are exactly 1 regardless of rounding in the local statistics
    Ok(if a.data() == b.data() { 1.0 } else { value })
}

/// Runs an external VMAF tool. The template's `{reference}` and `{distorted}`
/// placeholders receive frame directories. The score is read from a JSON
/// report (`pooled_metrics.vmaf.mean` or a top-level `vmaf`) or from the last
/// line of stdout as a bare number. Any failure yields `None` with a warning.
pub fn vmaf_external(reference_dir: &Path, distorted_dir: &Path, tool_cmd: Option<&str>) -> Option<f64> {
    let template = tool_cmd?;
    let cmd = template
        .replace("{reference}", &reference_dir.display().to_string())
        .replace("{distorted}", &distorted_dir.display().to_string());
    let out = match Command::new("sh").arg("-c").arg(&cmd).output() {
        Ok(o) => o,
        Err(e) => {
            log::warn!("vmaf tool could not be started: {e}");
            return None;
        }
    };
    if !out.status.success() {
        log::warn!("vmaf tool exited with {}", out.status);
        return None;
    }
    let parsed = parse_vmaf_output(&String::from_utf8_lossy(&out.stdout));
    if parsed.is_none() {
        log::warn!("could not parse a VMAF score from the tool output");
    }
    parsed
}

pub fn parse_vmaf_output(text: &str) -> Option<f64> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text.trim()) {
        let score = v
            .pointer("/pooled_metrics/vmaf/mean")
            .or_else(|| v.get("vmaf"))
            .and_then(|s| s.as_f64());
        if score.is_some() {
            return score.filter(|s| s.is_finite());
        }
    }
    text.lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sequence: String,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vmaf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub sequence: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vmaf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub rows: Vec<MetricRow>,
    pub sequences: Vec<SequenceSummary>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_vmaf: Option<f64>,
}

impl Report {
    /// Builds per-sequence and overall means; `vmaf` holds one optional score per sequence.
    pub fn from_rows(rows: Vec<MetricRow>, vmaf: &[(String, Option<f64>)]) -> Self {
        let mut sequences: Vec<SequenceSummary> = Vec::new();
        for r in &rows {
            match sequences.iter_mut().find(|s| s.sequence == r.sequence) {
                Some(s) => {
                    s.frames += 1;
                    s.psnr += r.psnr;
                    s.ssim += r.ssim;
                }
                None => sequences.push(SequenceSummary {
                    sequence: r.sequence.clone(),
                    frames: 1,
                    psnr: r.psnr,
                    ssim: r.ssim,
                    vmaf: None,
                }),
            }
        }
        for s in &mut sequences {
            s.psnr /= s.frames as f64;
            s.ssim /= s.frames as f64;
            s.vmaf = vmaf.iter().find(|(n, _)| *n == s.sequence).and_then(|(_, v)| *v);
        }
        let n = rows.len().max(1) as f64;
        let scores: Vec<f64> = sequences.iter().filter_map(|s| s.vmaf).collect();
        Self {
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_vmaf: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            rows,
            sequences,
        }
    }
}
