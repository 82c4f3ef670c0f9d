//! Full network: shared per-frame embedding, a three-node alignment tree over
//! the 7-frame window, subband refinement, and a reconstruction head whose
//! pixel-shuffled residual is added to the bilinearly upsampled centre frame.

use std::collections::BTreeMap;

use crate::autograd::{kernels, Bound, Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::layers::{init_params, param_count as count_specs, Conv2d, ParamSpec};
use crate::mffr::Mffr;
use crate::mgaa::Mgaa;
use crate::tensor::{Real, Tensor};

pub const WINDOW: usize = 7;

/// Scale-wise convolution block: full- and half-resolution 3×3 paths summed
/// under a ReLU, plus an identity skip.
#[derive(Debug, Clone)]
struct Scb {
    full: Conv2d,
    half: Conv2d,
}

impl Scb {
    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (_, h, w) = x.chw();
        let low = self.half.forward(p, x.resize(h.div_ceil(2), w.div_ceil(2))).resize(h, w);
        x + (self.full.forward(p, x) + low).relu()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    groups: Vec<Vec<Scb>>,
    body: Conv2d,
    pub tail: Conv2d,
    scale: usize,
}

pub const SCB_PER_GROUP: usize = 3;
/// Init gain of the block convs; keeps the residual chain near identity at init.
const SCB_GAIN: f64 = 0.1;

impl Reconstruction {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let groups = (0..cfg.r_groups)
            .map(|g| {
                (0..SCB_PER_GROUP)
                    .map(|b| Scb {
                        full: Conv2d::new(format!("{name}.group{g}.scb{b}.full"), c, c, 3).with_gain(SCB_GAIN),
                        half: Conv2d::new(format!("{name}.group{g}.scb{b}.half"), c, c, 3).with_gain(SCB_GAIN),
                    })
                    .collect()
            })
            .collect();
        Self {
            groups,
            body: Conv2d::new(format!("{name}.body"), c, c, 3),
            tail: Conv2d::new(format!("{name}.tail"), c, cfg.image_channels * cfg.scale * cfg.scale, 3).with_gain(0.01),
            scale: cfg.scale,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for g in &self.groups {
            for b in g {
                b.full.specs(out);
                b.half.specs(out);
            }
        }
        self.body.specs(out);
        self.tail.specs(out);
    }

    /// `[c,h,w]` feature to a `[c_I, scale*h, scale*w]` residual image.
    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut y = x;
        for b in self.groups.iter().flatten() {
            y = b.forward(p, y);
        }
        let feat = x + self.body.forward(p, y);
        self.tail.forward(p, feat).pixel_shuffle(self.scale)
    }
}

/// Bilinear (half-pixel centre) upsampling of a `[c,h,w]` frame by `scale`.
pub fn bilinear_upsample<T: Real>(frame: &Tensor<T>, scale: usize) -> Tensor<T> {
    let (c, h, w) = frame.chw();
    Tensor::from_vec(
        &[c, h * scale, w * scale],
        kernels::resize_forward(frame.data(), c, h, w, h * scale, w * scale),
    )
    .expect("resize shape")
}

pub struct ForwardOutput<'g, T: Real> {
    pub residual: Var<'g, T>,
    /// Residual plus the upsampled centre frame, unclamped.
    pub sr: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Fcvsr {
    cfg: ModelConfig,
    embed: Conv2d,
    align: Vec<Mgaa>,
    concat_fusion: Conv2d,
    mffr: Mffr,
    pub rec: Reconstruction,
}

impl Fcvsr {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let count = if cfg.share_alignment { 1 } else { 3 };
        let align = (0..count)
            .map(|i| {
                let name = if cfg.share_alignment { "mgaa".to_string() } else { format!("mgaa{i}") };
                Mgaa::new(&name, c, cfg.n_align, cfg.kernel_size, cfg.use_motion)
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed: Conv2d::new("embed", cfg.image_channels, c, 3),
            align,
            concat_fusion: Conv2d::new("concat_fusion", WINDOW * c, c, 3),
            mffr: Mffr::new("mffr", cfg),
            rec: Reconstruction::new("rec", cfg),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mffr(&self) -> &Mffr {
        &self.mffr
    }

    pub fn alignment(&self, i: usize) -> &Mgaa {
        &self.align[i.min(self.align.len() - 1)]
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.embed.specs(&mut out);
        if self.cfg.use_mgaa {
            for a in &self.align {
                a.specs(&mut out);
            }
        } else {
            self.concat_fusion.specs(&mut out);
        }
        if self.cfg.use_mffr {
            self.mffr.specs(&mut out);
        }
        self.rec.specs(&mut out);
        out
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        init_params(&self.specs(), seed)
    }

    /// Checks that a parameter store has exactly this model's layout.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = self.specs();
        ensure!(
            specs.len() == store.len(),
            Checkpoint,
            "model expects {} parameter tensors, store has {}",
            specs.len(),
            store.len()
        );
        for s in &specs {
            match store.get(&s.name) {
                Some(t) => ensure!(
                    t.shape() == s.shape.as_slice(),
                    Checkpoint,
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                ),
                None => return Err(crate::Error::Checkpoint(format!("missing parameter {}", s.name))),
            }
        }
        Ok(())
    }

    pub fn embed<'g, T: Real>(&self, p: &Bound<'g, T>, frames: &[Var<'g, T>]) -> Vec<Var<'g, T>> {
        frames.iter().map(|f| self.embed.forward(p, *f)).collect()
    }

    /// Aligned centre feature from the seven embedded features.
    pub fn align<'g, T: Real>(&self, p: &Bound<'g, T>, f: &[Var<'g, T>]) -> Var<'g, T> {
        if !self.cfg.use_mgaa {
            return self.concat_fusion.forward(p, Var::concat(f));
        }
        let before = self.alignment(0).forward(p, f[0], f[1], f[2]);
        let after = self.alignment(1).forward(p, f[4], f[5], f[6]);
        self.alignment(2).forward(p, before, f[3], after)
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, frames: &[Var<'g, T>]) -> Result<ForwardOutput<'g, T>> {
        ensure!(frames.len() == WINDOW, Invalid, "expected {WINDOW} frames, got {}", frames.len());
        let shape = frames[0].shape();
        ensure!(
            shape.len() == 3 && shape[0] == self.cfg.image_channels,
            Shape,
            "frames must be [{},h,w], got {:?}",
            self.cfg.image_channels,
            shape
        );
        ensure!(shape[1] >= 2 && shape[2] >= 2, Shape, "frames must be at least 2x2");
        for f in frames {
            ensure!(f.shape() == shape, Shape, "frames in a window must share one shape");
        }
        let feats = self.embed(p, frames);
        let aligned = self.align(p, &feats);
        let refined = if self.cfg.use_mffr {
            self.mffr.forward(p, aligned)?
        } else {
            aligned
        };
        let residual = self.rec.forward(p, refined);
        let s = self.cfg.scale;
        let up = frames[WINDOW / 2].resize(shape[1] * s, shape[2] * s);
        Ok(ForwardOutput {
            residual,
            sr: residual + up,
        })
    }

    /// Inference on a 7-frame window; output clamped to [0, 1].
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        for f in frames {
            f.ensure_finite("input frame")?;
        }
        let g = Graph::inference();
        let p = store.bind(&g);
        let vars: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let out = self.forward(&p, &vars)?;
        let sr = out.sr.value();
        Ok(sr.map(|v| v.max(T::zero()).min(T::one())))
    }
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(count_specs(&Fcvsr::new(cfg)?.specs()))
}

/// Parameter counts grouped by top-level module (`embed`, `mgaa`, `mffr`, `rec`, ...).
pub fn param_breakdown(cfg: &ModelConfig) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for s in Fcvsr::new(cfg)?.specs() {
        let mut parts = s.name.split('.');
        let top = parts.next().unwrap_or_default();
        let key = match top {
            t if t.starts_with("mgaa") => format!("{t}.{}", parts.next().unwrap_or_default()),
            t => t.to_string(),
        };
        *out.entry(key).or_insert(0) += s.numel();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_tensor_in;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_align: 2,
            q_bands: 2,
            r_groups: 1,
            kernel_size: 3,
            channels: 4,
            ..ModelConfig::fcvsr_s()
        }
    }

    fn frames(c: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f64>> {
        (0..7).map(|i| random_tensor_in(&[c, h, w], seed + i, 0.0, 1.0)).collect()
    }

    #[test]
    fn output_is_scale_times_input() {
        let m = Fcvsr::new(&tiny()).unwrap();
        let store = m.init_params::<f64>(1);
        let out = m.infer(&store, &frames(3, 8, 6, 10)).unwrap();
        assert_eq!(out.shape(), &[3, 32, 24]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_window_rejected() {
        let m = Fcvsr::new(&tiny()).unwrap();
        let store = m.init_params::<f64>(1);
        assert!(m.infer(&store, &frames(3, 8, 8, 0)[..5]).is_err());
        assert!(m.infer(&store, &frames(1, 8, 8, 0)).is_err());
    }

    #[test]
    fn zero_tail_gives_bilinear_output() {
        let m = Fcvsr::new(&tiny()).unwrap();
        let mut store = m.init_params::<f64>(2);
        for s in ["weight", "bias"] {
            store.get_mut(&format!("rec.tail.{s}")).unwrap().data_mut().fill(0.0);
        }
        let fr = frames(3, 8, 8, 20);
        let out = m.infer(&store, &fr).unwrap();
        let up = bilinear_upsample(&fr[3], 4);
        assert!(out.max_abs_diff(&up) < 1e-12);
    }

    #[test]
    fn pixel_shuffle_of_constant_channels_is_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[48, 3, 3], 0.25));
        let y = x.pixel_shuffle(4).value();
        assert_eq!(y.shape(), &[3, 12, 12]);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn embedding_is_shared_across_frames() {
        let m = Fcvsr::new(&tiny()).unwrap();
        let store = m.init_params::<f64>(3);
        let g = Graph::new();
        let p = store.bind(&g);
        let fr = frames(3, 6, 6, 30);
        let a: Vec<_> = fr.iter().map(|f| g.constant(f.clone())).collect();
        let mut b = a.clone();
        b.reverse();
        let ea = m.embed(&p, &a);
        let eb = m.embed(&p, &b);
        for i in 0..7 {
            assert_eq!(*ea[i].value(), *eb[6 - i].value());
        }
        let zero = g.constant(Tensor::zeros(&[3, 6, 6]));
        let mut zstore = store.clone();
        zstore.get_mut("embed.bias").unwrap().data_mut().fill(0.0);
        let zp = zstore.bind(&g);
        assert!(m.embed(&zp, &[zero])[0].value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_scales_with_groups() {
        let base = ModelConfig::fcvsr_s().with_channels(16);
        let more = ModelConfig { r_groups: 6, ..base.clone() };
        let c = 16;
        let per_group = SCB_PER_GROUP * 2 * (c * c * 9 + c);
        assert_eq!(param_count(&more).unwrap() - param_count(&base).unwrap(), 3 * per_group);
        let bd = param_breakdown(&base).unwrap();
        assert_eq!(bd.values().sum::<usize>(), param_count(&base).unwrap());
    }

    /// Finite differences on sampled coordinates of every parameter tensor.
    #[test]
    fn end_to_end_parameter_gradients() {
        let cfg = ModelConfig { share_alignment: false, ..tiny() };
        let m = Fcvsr::new(&cfg).unwrap();
        let store = m.init_params::<f64>(4);
        let fr = frames(3, 8, 8, 40);
        let weights = random_tensor_in(&[3, 32, 32], 99, -1.0, 1.0);
        let loss = |store: &ParamStore<f64>, g: &Graph<f64>| -> f64 {
            let p = store.bind(g);
            let vars: Vec<_> = fr.iter().map(|f| g.constant(f.clone())).collect();
            let sr = m.forward(&p, &vars).unwrap().sr;
            sr.mul(g.constant(weights.clone())).sum().item()
        };
        let g = Graph::new();
        let p = store.bind(&g);
        let vars: Vec<_> = fr.iter().map(|f| g.constant(f.clone())).collect();
        let out = m.forward(&p, &vars).unwrap().sr.mul(g.constant(weights.clone())).sum();
        let mut grads = g.backward(out);
        let analytic = p.collect(&mut grads);
        // small step: the bilinear warp is piecewise linear in its offsets
        let step = 1e-7;
        for (i, name) in store.names().iter().enumerate() {
            let a = analytic[i].as_ref().unwrap_or_else(|| panic!("{name} received no gradient"));
            let n = store.value(i).len();
            let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for j in [0, n / 2, n - 1] {
                let mut probe = store.clone();
                let orig = probe.value(i).data()[j];
                probe.value_mut(i).data_mut()[j] = orig + step;
                let up = loss(&probe, &Graph::inference());
                probe.value_mut(i).data_mut()[j] = orig - step;
                let down = loss(&probe, &Graph::inference());
                let num = (up - down) / (2.0 * step);
                d2 += (a.data()[j] - num).powi(2);
                a2 += a.data()[j].powi(2);
                n2 += num * num;
            }
            // absolute floor covers round-off in the differenced loss
            let tol = 1e-3 * a2.sqrt().max(n2.sqrt()) + 1e-6;
            assert!(d2.sqrt() < tol, "{name}: |analytic - numeric| = {:.2e} > {tol:.2e}", d2.sqrt());
        }
    }
}
