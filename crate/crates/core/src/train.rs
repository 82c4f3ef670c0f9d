//! Training loop, ablation variants, evaluation and inference drivers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::RunConfig;
use crate::data::{crop_and_augment, sample_window, SampleKey, Sequence, TrainSample};
use crate::error::{ensure, Error, Result};
use crate::frequency::MaskVariant;
use crate::image_io::{load_frame, save_frame};
use crate::losses::total_loss_var;
use crate::metrics::{psnr, ssim, vmaf_external, MetricRow, Report};
use crate::model::Fcvsr;
use crate::tensor::Tensor;

/// Table V style ablations plus the mask, Q and alpha sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Baseline,
    NoMgaa,
    NoMe,
    NoMffr,
    NoFbe,
    NoFfe,
    NoFcLoss,
    NoL1Term,
    NoL2Term,
    Mask(MaskVariant),
    QSweep(usize),
    AlphaSweep(f64),
}

pub const Q_SWEEP: [usize; 6] = [1, 2, 4, 8, 16, 32];

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown variant '{s}'"));
        if let Some((kind, arg)) = lower.split_once(':').or_else(|| lower.split_once('=')) {
            return match kind {
                "mask" | "mask-variant" => Ok(Self::Mask(arg.parse()?)),
                "q-sweep" | "q" => {
                    let q: usize = arg.parse().map_err(|_| bad())?;
                    ensure!(Q_SWEEP.contains(&q), Config, "Q sweep accepts {Q_SWEEP:?}, got {q}");
                    Ok(Self::QSweep(q))
                }
                "alpha-sweep" | "alpha" => {
                    let a: f64 = arg.parse().map_err(|_| bad())?;
                    ensure!(a.is_finite() && a >= 0.0, Config, "alpha must be >= 0, got {a}");
                    Ok(Self::AlphaSweep(a))
                }
                _ => Err(bad()),
            };
        }
        Ok(match lower.as_str() {
            "baseline" | "full" | "" => Self::Baseline,
            "no-mgaa" => Self::NoMgaa,
            "no-me" => Self::NoMe,
            "no-mffr" => Self::NoMffr,
            "no-fbe" => Self::NoFbe,
            "no-ffe" => Self::NoFfe,
            "no-fc-loss" => Self::NoFcLoss,
            "no-l1-term" => Self::NoL1Term,
            "no-l2-term" => Self::NoL2Term,
            _ => return Err(bad()),
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Baseline => write!(f, "baseline"),
            Self::NoMgaa => write!(f, "no-mgaa"),
            Self::NoMe => write!(f, "no-me"),
            Self::NoMffr => write!(f, "no-mffr"),
            Self::NoFbe => write!(f, "no-fbe"),
            Self::NoFfe => write!(f, "no-ffe"),
            Self::NoFcLoss => write!(f, "no-fc-loss"),
            Self::NoL1Term => write!(f, "no-l1-term"),
            Self::NoL2Term => write!(f, "no-l2-term"),
            Self::Mask(m) => write!(f, "mask:{m}"),
            Self::QSweep(q) => write!(f, "q-sweep:{q}"),
            Self::AlphaSweep(a) => write!(f, "alpha-sweep:{a}"),
        }
    }
}

impl Variant {
    pub fn all_table_v() -> Vec<Variant> {
        vec![
            Self::NoMgaa,
            Self::NoMe,
            Self::NoMffr,
            Self::NoFbe,
            Self::NoFfe,
            Self::NoFcLoss,
            Self::NoL1Term,
            Self::NoL2Term,
        ]
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let (m, l) = (&mut cfg.model, &mut cfg.loss);
        match *self {
            Self::Baseline => {}
            Self::NoMgaa => m.use_mgaa = false,
            Self::NoMe => m.use_motion = false,
            Self::NoMffr => m.use_mffr = false,
            Self::NoFbe => m.use_fbe = false,
            Self::NoFfe => m.use_ffe = false,
            Self::NoFcLoss => l.alpha = 0.0,
            Self::NoL1Term => l.use_l1_term = false,
            Self::NoL2Term => l.use_l2_term = false,
            Self::Mask(v) => m.mask_variant = v,
            Self::QSweep(q) => m.q_bands = q,
            Self::AlphaSweep(a) => l.alpha = a,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub state: OptimizerState,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, cfg: &RunConfig) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (n, v) in params.iter() {
                s.insert(n, Tensor::zeros(v.shape()));
            }
            s
        };
        Self {
            state: OptimizerState {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            eps: cfg.train.adam_eps,
        }
    }

    /// `grads` are aligned with the store order; `None` leaves a parameter untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.state.m.value_mut(i);
            let v = self.state.v.value_mut(i);
            let p = params.value_mut(i);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gv = gv as f64;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_spa: f64,
    pub l_fc: f64,
    pub l_all: f64,
    pub lr: f64,
    /// PSNR (dB) of the batch predictions against their targets.
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DumpEntry {
    sequence: String,
    t: usize,
    key: (u64, u64, u64),
}

pub struct Trainer {
    pub model: Fcvsr,
    pub config: RunConfig,
    pub variant: String,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Optimizer steps completed.
    pub step: u64,
    data: Vec<Sequence>,
}

impl Trainer {
    pub fn new(config: RunConfig, variant: &Variant, data: Vec<Sequence>) -> Result<Self> {
        let mut config = config;
        variant.apply(&mut config);
        config.validate()?;
        ensure!(!data.is_empty(), Data, "no training sequences");
        let model = Fcvsr::new(&config.model)?;
        for s in &data {
            ensure!(
                s.lr[0].chw().0 == config.model.image_channels && s.scale == config.model.scale,
                Data,
                "sequence {} does not match the model's channels/scale",
                s.name
            );
        }
        let params = model.init_params::<f32>(config.train.seed);
        let adam = Adam::new(&params, &config);
        Ok(Self {
            model,
            config,
            variant: variant.to_string(),
            params,
            adam,
            step: 0,
            data,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, data: Vec<Sequence>) -> Result<Self> {
        ck.config.validate()?;
        ensure!(!data.is_empty(), Data, "no training sequences");
        let model = Fcvsr::new(&ck.config.model)?;
        model.check_params(&ck.params)?;
        let mut adam = Adam::new(&ck.params, &ck.config);
        if let Some(state) = ck.optimizer {
            model.check_params(&state.m)?;
            model.check_params(&state.v)?;
            adam.state = state;
        }
        Ok(Self {
            model,
            config: ck.config,
            variant: ck.variant,
            params: ck.params,
            adam,
            step: ck.step,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            variant: self.variant.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.adam.state.clone()),
        }
    }

    pub fn data(&self) -> &[Sequence] {
        &self.data
    }

    fn sample(&self, step: u64, slot: usize) -> Result<(DumpEntry, TrainSample)> {
        let tc = &self.config.train;
        let key = SampleKey {
            seed: tc.seed,
            epoch: step / tc.steps_per_epoch,
            index: step * tc.batch as u64 + slot as u64,
        };
        let mut rng = key.rng();
        let si = rng.random_range(0..self.data.len());
        let seq = &self.data[si];
        let t = rng.random_range(0..seq.len());
        let crop_key = SampleKey {
            seed: tc.seed ^ 0x5eed_c409,
            ..key
        };
        let sample = crop_and_augment(&seq.sample(t), tc.patch, seq.scale, tc.augment, crop_key)?;
        let entry = DumpEntry {
            sequence: seq.name.clone(),
            t,
            key: (key.seed, key.epoch, key.index),
        };
        Ok((entry, sample))
    }

    /// One optimizer step over a batch; gradients are averaged over samples.
    pub fn train_step(&mut self, dump_dir: Option<&Path>) -> Result<LogRow> {
        let batch = self.config.train.batch;
        let lr = self.config.train.lr_at_step(self.step);
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.params.len()];
        let (mut l_spa, mut l_fc, mut l_all, mut mse) = (0.0, 0.0, 0.0, 0.0);
        let mut entries = Vec::with_capacity(batch);
        for slot in 0..batch {
            let (entry, sample) = self.sample(self.step, slot)?;
            let g = Graph::new();
            let p = self.params.bind(&g);
            let frames: Vec<_> = sample.lr.iter().map(|f| g.constant(f.clone())).collect();
            let out = self.model.forward(&p, &frames)?;
            let hr = g.constant(sample.hr.clone());
            let up = g.constant(sample.up.clone());
            let loss = total_loss_var(out.sr, hr, up, &self.config.loss)?;
            let b = loss.breakdown();
            if !b.total.is_finite() {
                entries.push(entry);
                if let Some(dir) = dump_dir {
                    self.dump(dir, &entries, &sample, b.total)?;
                }
                return Err(Error::Diverged {
                    step: self.step,
                    reason: format!("non-finite loss {} on sample {}", b.total, slot),
                });
            }
            l_spa += b.spatial;
            l_fc += b.fc;
            l_all += b.total;
            let sr = out.sr.value();
            mse += sr
                .data()
                .iter()
                .zip(sample.hr.data())
                .map(|(a, b)| ((a.clamp(0.0, 1.0) - b) as f64).powi(2))
                .sum::<f64>()
                / sr.len() as f64;
            let mut grads = g.backward(loss.total);
            for (a, gr) in acc.iter_mut().zip(p.collect(&mut grads)) {
                match (a.as_mut(), gr) {
                    (Some(a), Some(gr)) => a.add_assign(&gr),
                    (None, Some(gr)) => *a = Some(gr),
                    _ => {}
                }
            }
            entries.push(entry);
        }
        let inv = 1.0 / batch as f32;
        for g in acc.iter_mut().flatten() {
            *g = g.scale(inv);
            if !g.all_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    reason: "non-finite gradient".into(),
                });
            }
        }
        self.adam.step(&mut self.params, &acc, lr);
        let n = batch as f64;
        let row = LogRow {
            step: self.step,
            l_spa: l_spa / n,
            l_fc: l_fc / n,
            l_all: l_all / n,
            lr,
            psnr: if mse == 0.0 { 100.0 } else { (10.0 * (n / mse).log10()).min(100.0) },
        };
        self.step += 1;
        Ok(row)
    }

    fn dump(&self, dir: &Path, entries: &[DumpEntry], sample: &TrainSample, loss: f64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = serde_json::json!({
            "step": self.step,
            "variant": self.variant,
            "loss": loss.to_string(),
            "samples": entries,
        });
        let path = dir.join("batch.json");
        fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
        for (i, f) in sample.lr.iter().enumerate() {
            save_frame(&dir.join(format!("lr_{i}.png")), f)?;
        }
        save_frame(&dir.join("hr.png"), &sample.hr)
    }

    /// Mean PSNR over every frame of every training sequence (whole frames, no augmentation).
    pub fn training_psnr(&self) -> Result<f64> {
        let report = evaluate(&self.model, &self.params, &self.data, None)?;
        Ok(report.mean_psnr)
    }

    /// Trains until the configured number of steps, writing `train_log.jsonl`
    /// and `checkpoint/` under `out_dir`. `stop` is consulted after every step.
    pub fn run_with(
        &mut self,
        out_dir: &Path,
        mut stop: impl FnMut(&Trainer, &LogRow) -> Result<bool>,
    ) -> Result<Vec<LogRow>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let total = self.config.train.total_steps();
        let ck_dir = out_dir.join("checkpoint");
        let mut rows = Vec::new();
        while self.step < total {
            let row = self.train_step(Some(&out_dir.join("divergence")))?;
            writeln!(log, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {} l_all {:.5} l_spa {:.5} l_fc {:.4} psnr {:.2} lr {:.2e}",
                row.step,
                row.l_all,
                row.l_spa,
                row.l_fc,
                row.psnr,
                row.lr
            );
            let done = stop(self, &row)?;
            rows.push(row);
            if self.step % self.config.train.checkpoint_every == 0 || done || self.step == total {
                self.checkpoint().save(&ck_dir)?;
            }
            if done {
                break;
            }
        }
        Ok(rows)
    }

    /// [`Trainer::run_with`] stopping early once the whole-clip PSNR reaches
    /// `target_psnr` (checked when the batch PSNR first gets there).
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<LogRow>> {
        let target = self.config.train.target_psnr;
        self.run_with(out_dir, |tr, row| match target {
            Some(t) if row.psnr >= t => Ok(tr.training_psnr()? >= t),
            _ => Ok(false),
        })
    }
}

/// Super-resolves every frame of every sequence and scores it against HR.
/// With a VMAF command, SR and HR frames are written to temporary directories
/// and the tool is run once per sequence.
pub fn evaluate(model: &Fcvsr, params: &ParamStore<f32>, data: &[Sequence], vmaf_cmd: Option<&str>) -> Result<Report> {
    model.check_params(params)?;
    let mut rows = Vec::new();
    let mut vmaf = Vec::new();
    for seq in data {
        let tmp = match vmaf_cmd {
            Some(_) => Some(tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?),
            None => None,
        };
        for t in 0..seq.len() {
            let sr = super_resolve(model, params, &seq.lr, t)?;
            rows.push(MetricRow {
                sequence: seq.name.clone(),
                frame: t,
                psnr: psnr(&sr, &seq.hr[t], 1.0)?,
                ssim: ssim(&sr, &seq.hr[t], 1.0)?,
                vmaf: None,
            });
            if let Some(dir) = &tmp {
                save_frame(&dir.path().join("ref").join(format!("{t:06}.png")), &seq.hr[t])?;
                save_frame(&dir.path().join("dist").join(format!("{t:06}.png")), &sr)?;
            }
        }
        if let Some(dir) = &tmp {
            vmaf.push((seq.name.clone(), vmaf_external(&dir.path().join("ref"), &dir.path().join("dist"), vmaf_cmd)));
        }
    }
    Ok(Report::from_rows(rows, &vmaf))
}

/// SR output for frame `t` from its reflected 7-frame window.
pub fn super_resolve(model: &Fcvsr, params: &ParamStore<f32>, lr: &[Tensor<f32>], t: usize) -> Result<Tensor<f32>> {
    let window: Vec<_> = sample_window(lr.len(), t).iter().map(|&i| lr[i].clone()).collect();
    model.infer(params, &window)
}

/// Writes one SR PNG per input PNG of `frames_dir` (same file names) into `out_dir`.
pub fn infer_dir(model: &Fcvsr, params: &ParamStore<f32>, frames_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    model.check_params(params)?;
    let mut files: Vec<PathBuf> = fs::read_dir(frames_dir)
        .map_err(|e| Error::io(frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), Data, "no PNG frames in {}", frames_dir.display());
    let c = model.config().image_channels;
    let lr = files.iter().map(|p| load_frame(p, c)).collect::<Result<Vec<_>>>()?;
    let mut written = Vec::with_capacity(files.len());
    for (t, f) in files.iter().enumerate() {
        let sr = super_resolve(model, params, &lr, t)?;
        let path = out_dir.join(f.file_name().expect("file name"));
        save_frame(&path, &sr)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn variant_round_trip() {
        for s in [
            "baseline",
            "no-mgaa",
            "no-me",
            "no-mffr",
            "no-fbe",
            "no-ffe",
            "no-fc-loss",
            "no-l1-term",
            "no-l2-term",
            "mask:ideal",
            "q-sweep:16",
            "alpha-sweep:0.5",
        ] {
            let v: Variant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert_eq!("No-L1-Term".parse::<Variant>().unwrap(), Variant::NoL1Term);
        assert!("q-sweep:3".parse::<Variant>().is_err());
        assert!("no-such".parse::<Variant>().is_err());
        let mut cfg = RunConfig::default();
        Variant::NoFcLoss.apply(&mut cfg);
        assert_eq!(cfg.loss.alpha, 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap());
        let mut adam = Adam::new(&params, &RunConfig::default());
        adam.step(&mut params, &[Some(Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap())], 0.1);
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    fn tiny_data() -> Vec<Sequence> {
        let lr: Vec<_> = (0..3)
            .map(|k| Tensor::from_fn(&[3, 8, 8], |i| (((i + 5 * k) % 11) as f32) / 11.0))
            .collect();
        let hr: Vec<_> = lr.iter().map(|f| crate::model::bilinear_upsample(f, 4)).collect();
        vec![Sequence::new("s".into(), lr, hr, 4).unwrap()]
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            n_align: 1,
            q_bands: 2,
            r_groups: 1,
            kernel_size: 3,
            channels: 4,
            ..ModelConfig::fcvsr_s()
        };
        cfg.train.batch = 2;
        cfg.train.patch = 16;
        cfg.train.lr0 = 1e-3;
        cfg
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let mut a = Trainer::new(tiny_config(), &Variant::Baseline, tiny_data()).unwrap();
        a.train_step(None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.checkpoint().save(dir.path()).unwrap();
        let next = a.train_step(None).unwrap();
        let mut b = Trainer::from_checkpoint(Checkpoint::load(dir.path()).unwrap(), tiny_data()).unwrap();
        let resumed = b.train_step(None).unwrap();
        assert_eq!(next.l_all.to_bits(), resumed.l_all.to_bits());
        assert_eq!(next, resumed);
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let a = Trainer::new(tiny_config(), &Variant::Baseline, tiny_data()).unwrap();
        let mut ck = a.checkpoint();
        ck.config.model.r_groups = 2;
        assert!(Trainer::from_checkpoint(ck, tiny_data()).is_err());
    }
}
