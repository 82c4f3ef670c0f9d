//! Training objectives: Charbonnier spatial loss and the contrastive loss over
//! Haar subbands of the SR, HR and bilinear-upsampled frames.
//!
//! Contrastive groups per sample:
//!
//! | set | members |
//! |-----|---------|
//! | first positives | HR-HH, HR-HL, HR-LH |
//! | second positives | HR-LL, UP-LL |
//! | negatives | UP-HH, UP-HL, UP-LH |
//! | first anchors | SR-HH, SR-HL, SR-LH |
//! | second anchor | SR-LL |
//!
//! Each high-band anchor is paired with the HR band of the same orientation;
//! the LL anchor is paired with both second positives. Every pair is scored
//! against all three negatives with InfoNCE under `s(x, y) = -mean|x - y|`.

use crate::autograd::{Graph, Var};
use crate::config::{GroupReduction, LossConfig};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

/// Per-sample loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub spatial: f64,
    /// High-band contrastive term before the `alpha` weight.
    pub l1: f64,
    /// Low-band contrastive term before the `alpha` weight.
    pub l2: f64,
    /// `l1 + l2` (with the enabled terms only).
    pub fc: f64,
    /// `spatial + alpha * fc`.
    pub total: f64,
}

pub struct LossVars<'g, T: Real> {
    pub total: Var<'g, T>,
    pub spatial: Var<'g, T>,
    pub fc: Option<FcVars<'g, T>>,
}

pub struct FcVars<'g, T: Real> {
    pub total: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub l2: Var<'g, T>,
}

impl<T: Real> LossVars<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        let (l1, l2, fc) = match &self.fc {
            Some(f) => (f.l1.item().as_f64(), f.l2.item().as_f64(), f.total.item().as_f64()),
            None => (0.0, 0.0, 0.0),
        };
        LossBreakdown {
            spatial: self.spatial.item().as_f64(),
            l1,
            l2,
            fc,
            total: self.total.item().as_f64(),
        }
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    ensure!(a == b, Shape, "{what}: shape mismatch {a:?} vs {b:?}");
    Ok(())
}

/// Subbands LL, LH, HL, HH of a (padded) frame, as graph nodes.
fn subbands<'g, T: Real>(x: Var<'g, T>) -> [Var<'g, T>; 4] {
    let bands = x.pad_to_even().haar();
    let c = bands.chw().0 / 4;
    [0, 1, 2, 3].map(|b| bands.channels(b * c, c))
}

pub fn charbonnier_var<'g, T: Real>(sr: Var<'g, T>, hr: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    same_shape(&sr.shape(), &hr.shape(), "charbonnier")?;
    Ok(sr.charbonnier(hr, T::from_f64c(eps)))
}

/// Contrastive loss on the graph. `hr` and `up` are normally constants.
pub fn fc_loss_var<'g, T: Real>(
    sr: Var<'g, T>,
    hr: Var<'g, T>,
    up: Var<'g, T>,
    cfg: &LossConfig,
) -> Result<FcVars<'g, T>> {
    same_shape(&sr.shape(), &hr.shape(), "fc_loss")?;
    same_shape(&sr.shape(), &up.shape(), "fc_loss")?;
    let tau = T::from_f64c(cfg.tau);
    let [sr_ll, sr_lh, sr_hl, sr_hh] = subbands(sr);
    let [hr_ll, hr_lh, hr_hl, hr_hh] = subbands(hr);
    let [up_ll, up_lh, up_hl, up_hh] = subbands(up);
    let negatives = [up_hh, up_hl, up_lh];
    let term = |anchor: Var<'g, T>, positive: Var<'g, T>| {
        let negs: Vec<_> = negatives.iter().map(|n| anchor.neg_l1_similarity(*n)).collect();
        Var::info_nce(anchor.neg_l1_similarity(positive), &negs, tau)
    };
    let reduce = |terms: Vec<Var<'g, T>>| {
        let n = terms.len();
        let sum = Var::add_all(&terms);
        match cfg.group_reduction {
            GroupReduction::Sum => sum,
            GroupReduction::Mean => sum.scale(T::from_f64c(1.0 / n as f64)),
        }
    };
    let l1 = reduce(vec![term(sr_hh, hr_hh), term(sr_hl, hr_hl), term(sr_lh, hr_lh)]);
    let l2 = reduce(vec![term(sr_ll, hr_ll), term(sr_ll, up_ll)]);
    let total = match (cfg.use_l1_term, cfg.use_l2_term) {
        (true, true) => l1 + l2,
        (true, false) => l1,
        (false, true) => l2,
        (false, false) => l1.scale(T::zero()),
    };
    Ok(FcVars { total, l1, l2 })
}

/// `charbonnier + alpha * fc_loss`; the contrastive branch is skipped when `alpha = 0`.
pub fn total_loss_var<'g, T: Real>(
    sr: Var<'g, T>,
    hr: Var<'g, T>,
    up: Var<'g, T>,
    cfg: &LossConfig,
) -> Result<LossVars<'g, T>> {
    cfg.validate()?;
    let spatial = charbonnier_var(sr, hr, cfg.eps)?;
    if cfg.alpha == 0.0 {
        return Ok(LossVars {
            total: spatial,
            spatial,
            fc: None,
        });
    }
    let fc = fc_loss_var(sr, hr, up, cfg)?;
    let total = spatial + fc.total.scale(T::from_f64c(cfg.alpha));
    Ok(LossVars {
        total,
        spatial,
        fc: Some(fc),
    })
}

pub fn charbonnier<T: Real>(sr: &Tensor<T>, hr: &Tensor<T>, eps: f64) -> Result<f64> {
    let g = Graph::inference();
    Ok(charbonnier_var(g.constant(sr.clone()), g.constant(hr.clone()), eps)?
        .item()
        .as_f64())
}

pub fn fc_loss<T: Real>(sr: &Tensor<T>, hr: &Tensor<T>, up: &Tensor<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let g = Graph::inference();
    let f = fc_loss_var(g.constant(sr.clone()), g.constant(hr.clone()), g.constant(up.clone()), cfg)?;
    let fc = f.total.item().as_f64();
    Ok(LossBreakdown {
        l1: f.l1.item().as_f64(),
        l2: f.l2.item().as_f64(),
        fc,
        total: fc,
        spatial: 0.0,
    })
}

pub fn total_loss<T: Real>(sr: &Tensor<T>, hr: &Tensor<T>, up: &Tensor<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let g = Graph::inference();
    let v = total_loss_var(g.constant(sr.clone()), g.constant(hr.clone()), g.constant(up.clone()), cfg)?;
    Ok(v.breakdown())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, random_tensor};

    /// Direct evaluation of the grouped InfoNCE terms from hand-split subbands.
    fn oracle(sr: &Tensor<f64>, hr: &Tensor<f64>, up: &Tensor<f64>, tau: f64) -> (f64, f64) {
        let (c, h, w) = sr.chw();
        let band = |x: &Tensor<f64>, b: usize| -> Vec<f64> {
            let mut out = Vec::new();
            for k in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let at = |di: usize, dj: usize| x.data()[(k * h + 2 * i + di) * w + 2 * j + dj];
                        let (p, q, r, s) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                        out.push(match b {
                            0 => p + q + r + s,
                            1 => p + q - r - s,
                            2 => p - q + r - s,
                            _ => p - q - r + s,
                        } / 2.0);
                    }
                }
            }
            out
        };
        let sim = |a: &[f64], b: &[f64]| -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let negs: Vec<_> = [3, 2, 1].iter().map(|&b| band(up, b)).collect();
        let nce = |a: &[f64], p: &[f64]| {
            let pos = (sim(a, p) / tau).exp();
            let den = pos + negs.iter().map(|n| (sim(a, n) / tau).exp()).sum::<f64>();
            -(pos / den).ln()
        };
        let l1 = [3, 2, 1].iter().map(|&b| nce(&band(sr, b), &band(hr, b))).sum();
        let sr_ll = band(sr, 0);
        let l2 = nce(&sr_ll, &band(hr, 0)) + nce(&sr_ll, &band(up, 0));
        (l1, l2)
    }

    #[test]
    fn charbonnier_constants() {
        let x = random_tensor(&[3, 4, 4], 1);
        assert_eq!(charbonnier(&x, &x, 1e-4).unwrap(), 1e-4);
        let y = x.map(|v| v + 3e-4);
        assert!((charbonnier(&y, &x, 1e-4).unwrap() - 3.16228e-4).abs() < 1e-9);
        let z = random_tensor(&[3, 4, 4], 2);
        let brute = x
            .data()
            .iter()
            .zip(z.data())
            .map(|(a, b)| ((a - b).powi(2) + 1e-8).sqrt())
            .sum::<f64>()
            / 48.0;
        assert!((charbonnier(&x, &z, 1e-4).unwrap() - brute).abs() < 1e-7);
        assert!(charbonnier(&x, &random_tensor(&[3, 4, 2], 0), 1e-4).is_err());
    }

    /// Frame whose four Haar subbands coincide: only the top-left pixel of
    /// every 2×2 block is non-zero.
    fn coincident_subbands(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let r = random_tensor(&[c, h, w], seed);
        Tensor::from_fn(&[c, h, w], |i| {
            let (y, x) = ((i / w) % h, i % w);
            if y % 2 == 0 && x % 2 == 0 {
                r.data()[i]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn coincident_subbands_give_five_log_four() {
        let x = coincident_subbands(3, 8, 8, 3);
        let cfg = LossConfig::default();
        let f = fc_loss(&x, &x, &x, &cfg).unwrap();
        let log4 = 4f64.ln();
        assert!((f.l1 - 3.0 * log4).abs() < 1e-12);
        assert!((f.l2 - 2.0 * log4).abs() < 1e-12);
        let t = total_loss(&x, &x, &x, &cfg).unwrap();
        assert!((t.total - (1e-4 + 5.0 * log4)).abs() < 1e-6);
        let zero = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!((total_loss(&zero, &zero, &zero, &cfg).unwrap().total - (1e-4 + 5.0 * log4)).abs() < 1e-12);
        let mean = LossConfig {
            group_reduction: GroupReduction::Mean,
            ..cfg.clone()
        };
        assert!((fc_loss(&x, &x, &x, &mean).unwrap().fc - 2.0 * log4).abs() < 1e-12);
        let no_fc = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss(&x, &x, &x, &no_fc).unwrap().total, 1e-4);
    }

    /// With sr = hr = up every positive similarity is 0 and every negative one
    /// is at most 0, so the loss cannot exceed the coincident-subband value.
    #[test]
    fn identical_inputs_bounded_by_five_log_four() {
        for seed in 0..10 {
            let x = random_tensor(&[2, 8, 8], 100 + seed);
            let f = fc_loss(&x, &x, &x, &LossConfig::default()).unwrap();
            assert!(f.fc > 0.0 && f.fc <= 5.0 * 4f64.ln() + 1e-12);
        }
    }

    #[test]
    fn matches_direct_evaluation() {
        for seed in 0..5 {
            let sr = random_tensor(&[2, 6, 8], 10 * seed);
            let hr = random_tensor(&[2, 6, 8], 10 * seed + 1);
            let up = random_tensor(&[2, 6, 8], 10 * seed + 2);
            let cfg = LossConfig {
                tau: 0.5,
                ..LossConfig::default()
            };
            let f = fc_loss(&sr, &hr, &up, &cfg).unwrap();
            let (l1, l2) = oracle(&sr, &hr, &up, 0.5);
            assert!((f.l1 - l1).abs() < 1e-12 && (f.l2 - l2).abs() < 1e-12);
        }
    }

    #[test]
    fn term_toggles() {
        let sr = random_tensor(&[1, 4, 4], 7);
        let hr = random_tensor(&[1, 4, 4], 8);
        let up = random_tensor(&[1, 4, 4], 9);
        let full = fc_loss(&sr, &hr, &up, &LossConfig::default()).unwrap();
        let only_l1 = LossConfig {
            use_l2_term: false,
            ..LossConfig::default()
        };
        let only_l2 = LossConfig {
            use_l1_term: false,
            ..LossConfig::default()
        };
        assert!((fc_loss(&sr, &hr, &up, &only_l1).unwrap().fc - full.l1).abs() < 1e-15);
        assert!((fc_loss(&sr, &hr, &up, &only_l2).unwrap().fc - full.l2).abs() < 1e-15);
    }

    #[test]
    fn odd_sizes_are_padded() {
        let sr = random_tensor(&[1, 5, 7], 4);
        let hr = random_tensor(&[1, 5, 7], 5);
        let pad = |x: &Tensor<f64>| crate::frequency::pad_to_even(x).0;
        let odd = fc_loss(&sr, &hr, &hr, &LossConfig::default()).unwrap();
        let even = fc_loss(&pad(&sr), &pad(&hr), &pad(&hr), &LossConfig::default()).unwrap();
        assert_eq!(odd, even);
    }

    #[test]
    fn total_loss_gradient() {
        let sr = random_tensor(&[2, 8, 8], 20);
        let hr = random_tensor(&[2, 8, 8], 21);
        let up = random_tensor(&[2, 8, 8], 22);
        let cfg = LossConfig::default();
        check_gradients(&[sr], |g, v| {
            total_loss_var(v[0], g.constant(hr.clone()), g.constant(up.clone()), &cfg)
                .unwrap()
                .total
        });
    }
}
