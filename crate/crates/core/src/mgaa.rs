//! Motion-guided adaptive alignment.
//!
//! A frequency-domain motion estimator predicts `N` offset fields between a
//! reference and a source feature, a kernel predictor produces `N` per-pixel
//! separable kernel pairs from the reference, and the source is aligned by a
//! cascade of `warp -> separable filter` steps. The alignment runs in both
//! temporal directions and the two results are fused by a 3×3 convolution.
//!
//! Offset fields are `[2,h,w]` with the x (column) displacement in channel 0
//! and the y (row) displacement in channel 1. Kernel tensors are `[c*k,h,w]`
//! with the `k` taps of channel `ch` at channels `ch*k..ch*k+k`.

use crate::autograd::{kernels, Bound, Graph, ParamStore, Var};
use crate::error::{ensure, Result};
use crate::layers::{ChannelAttention, Conv2d, Init, ParamSpec};
use crate::tensor::{Real, Tensor};

/// Init gain of the motion branch output convolutions; keeps initial offsets near zero.
const MOTION_HEAD_GAIN: f64 = 0.01;
/// Init gain of the kernel head around its centre-tap bias.
const KERNEL_HEAD_GAIN: f64 = 0.1;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct OffsetSet<T> {
    pub offsets: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct KernelSet<T> {
    pub vertical: Vec<Tensor<T>>,
    pub horizontal: Vec<Tensor<T>>,
    pub k: usize,
}

impl<T: Real> KernelSet<T> {
    pub fn len(&self) -> usize {
        self.vertical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertical.is_empty()
    }

    /// Length of the per-pixel kernel vector, `2 * N * c * k`.
    pub fn per_pixel_len(&self) -> usize {
        self.vertical.iter().chain(&self.horizontal).map(|t| t.shape()[0]).sum()
    }
}

fn check_feature<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    ensure!(x.shape().len() == 3, Shape, "{what}: expected [c,h,w], got {:?}", x.shape());
    x.ensure_finite(what)?;
    Ok(x.chw())
}

/// Bilinear sampling of `feature` at `p + offset(p)`, clamp-to-edge.
pub fn warp_sample<T: Real>(feature: &Tensor<T>, offset: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_feature(feature, "warp feature")?;
    ensure!(offset.shape() == [2, h, w], Shape, "offset must be [2,{h},{w}], got {:?}", offset.shape());
    offset.ensure_finite("offset")?;
    Tensor::from_vec(&[c, h, w], kernels::warp_forward(feature.data(), offset.data(), c, h, w))
}

/// Per-pixel separable filtering (horizontal taps then vertical taps) with reflect padding.
pub fn adaptive_separable_conv<T: Real>(
    feature: &Tensor<T>,
    vertical: &Tensor<T>,
    horizontal: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    ensure!(k % 2 == 1, Invalid, "adaptive kernel size must be odd, got {k}");
    let (c, h, w) = check_feature(feature, "sepconv feature")?;
    for (name, t) in [("vertical", vertical), ("horizontal", horizontal)] {
        ensure!(
            t.shape() == [c * k, h, w],
            Shape,
            "{name} kernels must be [{},{h},{w}], got {:?}",
            c * k,
            t.shape()
        );
    }
    Tensor::from_vec(
        &[c, h, w],
        kernels::sepconv_forward(feature.data(), vertical.data(), horizontal.data(), c, h, w, k),
    )
}

/// `a_n = sepconv(warp(a_{n-1}, o_n), K_n)` for n = 1..N; returns `a_N`.
pub fn mgac_align<T: Real>(src: &Tensor<T>, offsets: &OffsetSet<T>, kernels: &KernelSet<T>) -> Result<Tensor<T>> {
    ensure!(
        offsets.offsets.len() == kernels.len(),
        Invalid,
        "{} offsets vs {} kernel pairs",
        offsets.offsets.len(),
        kernels.len()
    );
    let mut a = src.clone();
    for (n, off) in offsets.offsets.iter().enumerate() {
        a = warp_sample(&a, off)?;
        a = adaptive_separable_conv(&a, &kernels.vertical[n], &kernels.horizontal[n], kernels.k)?;
    }
    Ok(a)
}

/// Graph form of one cascade; `offsets` may be empty to skip warping.
pub fn mgac_var<'g, T: Real>(
    src: Var<'g, T>,
    offsets: &[Var<'g, T>],
    kernels: &[(Var<'g, T>, Var<'g, T>)],
    k: usize,
) -> Var<'g, T> {
    let mut a = src;
    for (n, (kv, kh)) in kernels.iter().enumerate() {
        if let Some(off) = offsets.get(n) {
            a = a.warp(*off);
        }
        a = a.sepconv(*kv, *kh, k);
    }
    a
}

#[derive(Debug, Clone)]
struct MotionBranch {
    conv1: Conv2d,
    slope: String,
    conv2: Conv2d,
    ca: ChannelAttention,
}

/// Frequency-domain motion estimator producing `N` offset fields.
#[derive(Debug, Clone)]
pub struct MotionEstimator {
    cb1: [Conv2d; 2],
    cb2: [Conv2d; 2],
    branches: Vec<MotionBranch>,
}

impl MotionEstimator {
    pub fn new(name: &str, c: usize, n: usize) -> Self {
        let branches = (1..=n)
            .map(|i| {
                let ks = 2 * i + 1;
                let b = format!("{name}.branch{i}");
                MotionBranch {
                    conv1: Conv2d::new(format!("{b}.conv1"), 2 * c, 2 * c, ks),
                    slope: format!("{b}.prelu"),
                    conv2: Conv2d::new(format!("{b}.conv2"), 2 * c, 4, ks).with_gain(MOTION_HEAD_GAIN),
                    ca: ChannelAttention::new(&format!("{b}.ca"), 4),
                }
            })
            .collect();
        Self {
            cb1: [
                Conv2d::new(format!("{name}.cb1.0"), 4 * c, 4 * c, 3),
                Conv2d::new(format!("{name}.cb1.1"), 4 * c, 2 * c, 3),
            ],
            cb2: [
                Conv2d::new(format!("{name}.cb2.0"), 2 * c, 2 * c, 3),
                Conv2d::new(format!("{name}.cb2.1"), 2 * c, 4, 3),
            ],
            branches,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for conv in self.cb1.iter().chain(&self.cb2) {
            conv.specs(out);
        }
        for b in &self.branches {
            b.conv1.specs(out);
            out.push(ParamSpec {
                name: b.slope.clone(),
                shape: vec![1],
                init: Init::Const(PRELU_INIT),
            });
            b.conv2.specs(out);
            b.ca.specs(out);
        }
    }

    /// Offsets aligning `source` to `reference`, each `[2,h,w]`.
    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, reference: Var<'g, T>, source: Var<'g, T>) -> Vec<Var<'g, T>> {
        let fr = reference.fft2c();
        let fs = source.fft2c();
        let joint = Var::concat(&[fr, fs]);
        let cb1 = self.cb1[1].forward(p, self.cb1[0].forward(p, joint).relu());
        let diff = fr - fs + cb1;
        let guide = self.cb2[1].forward(p, self.cb2[0].forward(p, fr).relu());
        self.branches
            .iter()
            .map(|b| {
                let h = b.conv1.forward(p, diff).prelu(p.get(&b.slope));
                let spectral = b.ca.forward(p, b.conv2.forward(p, h)) * guide;
                // [re_x, re_y, im_x, im_y] is a 2-channel complex spectrum
                spectral.ifft2c_real()
            })
            .collect()
    }
}

/// Predicts `N` (vertical, horizontal) per-pixel kernel pairs from the reference feature.
#[derive(Debug, Clone)]
pub struct KernelPredictor {
    conv: Conv2d,
    head: Conv2d,
    c: usize,
    n: usize,
    k: usize,
}

impl KernelPredictor {
    pub fn new(name: &str, c: usize, n: usize, k: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), c, c, 3),
            head: Conv2d::new(format!("{name}.head"), c, 2 * n * c * k, 1)
                .with_gain(KERNEL_HEAD_GAIN)
                .with_bias_init(Init::CenterTap { k }),
            c,
            n,
            k,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        self.head.specs(out);
    }

    pub fn output_channels(&self) -> usize {
        2 * self.n * self.c * self.k
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, reference: Var<'g, T>) -> Vec<(Var<'g, T>, Var<'g, T>)> {
        let all = self.head.forward(p, self.conv.forward(p, reference).relu());
        let block = self.c * self.k;
        (0..self.n)
            .map(|i| (all.channels(2 * i * block, block), all.channels((2 * i + 1) * block, block)))
            .collect()
    }
}

/// Bidirectional alignment of `left` and `right` onto `center`.
#[derive(Debug, Clone)]
pub struct Mgaa {
    pub motion: MotionEstimator,
    pub kernels: KernelPredictor,
    pub fuse: Conv2d,
    pub k: usize,
    pub use_motion: bool,
}

impl Mgaa {
    pub fn new(name: &str, c: usize, n: usize, k: usize, use_motion: bool) -> Self {
        Self {
            motion: MotionEstimator::new(&format!("{name}.me"), c, n),
            kernels: KernelPredictor::new(&format!("{name}.kp"), c, n, k),
            fuse: Conv2d::new(format!("{name}.fuse"), 2 * c, c, 3),
            k,
            use_motion,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        if self.use_motion {
            self.motion.specs(out);
        }
        self.kernels.specs(out);
        self.fuse.specs(out);
    }

    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        left: Var<'g, T>,
        center: Var<'g, T>,
        right: Var<'g, T>,
    ) -> Var<'g, T> {
        let kernels = self.kernels.forward(p, center);
        let align = |src: Var<'g, T>| {
            let offsets = if self.use_motion {
                self.motion.forward(p, center, src)
            } else {
                Vec::new()
            };
            mgac_var(src, &offsets, &kernels, self.k)
        };
        let forward = align(left);
        let backward = align(right);
        self.fuse.forward(p, Var::concat(&[forward, backward]))
    }

    /// Offsets for a fixed parameter set, evaluated without recording gradients.
    pub fn estimate_offsets<T: Real>(
        &self,
        store: &ParamStore<T>,
        reference: &Tensor<T>,
        source: &Tensor<T>,
    ) -> Result<OffsetSet<T>> {
        check_feature(reference, "reference")?;
        check_feature(source, "source")?;
        ensure!(reference.shape() == source.shape(), Shape, "reference/source shape mismatch");
        let g = Graph::inference();
        let p = store.bind(&g);
        let offs = self.motion.forward(&p, g.constant(reference.clone()), g.constant(source.clone()));
        Ok(OffsetSet {
            offsets: offs.iter().map(|o| (*o.value()).clone()).collect(),
        })
    }

    pub fn predict_kernels<T: Real>(&self, store: &ParamStore<T>, reference: &Tensor<T>) -> Result<KernelSet<T>> {
        check_feature(reference, "reference")?;
        let g = Graph::inference();
        let p = store.bind(&g);
        let pairs = self.kernels.forward(&p, g.constant(reference.clone()));
        Ok(KernelSet {
            vertical: pairs.iter().map(|(v, _)| (*v.value()).clone()).collect(),
            horizontal: pairs.iter().map(|(_, h)| (*h.value()).clone()).collect(),
            k: self.k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_params;
    use crate::testing::{check_gradients, random_tensor};

    fn delta_kernels(c: usize, h: usize, w: usize, k: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c * k, h, w], |i| if (i / (h * w)) % k == k / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_offset_warp_is_identity() {
        let x = random_tensor(&[3, 6, 5], 1);
        let y = warp_sample(&x, &Tensor::zeros(&[2, 6, 5])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn integer_offset_matches_manual_shift() {
        let x = random_tensor(&[2, 6, 7], 2);
        let off = Tensor::from_fn(&[2, 6, 7], |i| if i < 42 { 1.0 } else { 0.0 });
        let y = warp_sample(&x, &off).unwrap();
        for ch in 0..2 {
            for r in 0..6 {
                for col in 0..6 {
                    assert_eq!(y.data()[(ch * 6 + r) * 7 + col], x.data()[(ch * 6 + r) * 7 + col + 1]);
                }
            }
        }
        let manual = kernels::shift_clamped(x.data(), 2, 6, 7, 1, 0);
        assert_eq!(y.data(), manual.as_slice());
    }

    #[test]
    fn half_pixel_offset_on_ramp_gives_midpoints() {
        let x = Tensor::from_fn(&[1, 3, 6], |i| 2.0 * (i % 6) as f64);
        let off = Tensor::from_fn(&[2, 3, 6], |i| if i < 18 { 0.5 } else { 0.0 });
        let y = warp_sample(&x, &off).unwrap();
        for r in 0..3 {
            for col in 0..5 {
                assert!((y.data()[r * 6 + col] - (2.0 * col as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_offsets_rejected() {
        let x = random_tensor(&[1, 4, 4], 3);
        let mut off = Tensor::zeros(&[2, 4, 4]);
        off.data_mut()[0] = f64::INFINITY;
        assert!(warp_sample(&x, &off).is_err());
    }

    #[test]
    fn delta_kernels_are_identity() {
        let x = random_tensor(&[2, 5, 6], 4);
        let d = delta_kernels(2, 5, 6, 5);
        assert_eq!(adaptive_separable_conv(&x, &d, &d, 5).unwrap(), x);
        assert!(adaptive_separable_conv(&x, &d, &d, 4).is_err());
        let bad = Tensor::zeros(&[8, 5, 6]);
        assert!(adaptive_separable_conv(&x, &bad, &d, 5).is_err());
    }

    #[test]
    fn uniform_kernels_summing_to_one_keep_constants() {
        let x = Tensor::full(&[2, 5, 5], 0.37);
        let taps = [0.2, 0.5, 0.3];
        let kv = Tensor::from_fn(&[6, 5, 5], |i| taps[(i / 25) % 3]);
        let kh = Tensor::from_fn(&[6, 5, 5], |i| taps[2 - (i / 25) % 3]);
        let y = adaptive_separable_conv(&x, &kv, &kh, 3).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn single_step_cascade_is_warp_then_sepconv() {
        let x = random_tensor(&[2, 6, 6], 5);
        let off = random_tensor(&[2, 6, 6], 6);
        let kv = random_tensor(&[6, 6, 6], 7);
        let kh = random_tensor(&[6, 6, 6], 8);
        let ks = KernelSet {
            vertical: vec![kv.clone()],
            horizontal: vec![kh.clone()],
            k: 3,
        };
        let out = mgac_align(&x, &OffsetSet { offsets: vec![off.clone()] }, &ks).unwrap();
        let manual = adaptive_separable_conv(&warp_sample(&x, &off).unwrap(), &kv, &kh, 3).unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn empty_cascade_returns_source() {
        let x = random_tensor(&[1, 4, 4], 9);
        let ks = KernelSet::<f64> {
            vertical: vec![],
            horizontal: vec![],
            k: 3,
        };
        assert_eq!(mgac_align(&x, &OffsetSet { offsets: vec![] }, &ks).unwrap(), x);
        let bad = OffsetSet {
            offsets: vec![Tensor::zeros(&[2, 4, 4])],
        };
        assert!(mgac_align(&x, &bad, &ks).is_err());
    }

    #[test]
    fn cascade_gradient_wrt_source() {
        let x = random_tensor(&[2, 6, 6], 10);
        let offs: Vec<_> = (0..2).map(|i| random_tensor(&[2, 6, 6], 20 + i).scale(0.7)).collect();
        let ks: Vec<_> = (0..2).map(|i| random_tensor(&[6, 6, 6], 30 + i)).collect();
        check_gradients(&[x], move |g, v| {
            let o: Vec<_> = offs.iter().map(|t| g.constant(t.clone())).collect();
            let k: Vec<_> = ks.iter().map(|t| (g.constant(t.clone()), g.constant(t.scale(0.5)))).collect();
            mgac_var(v[0], &o, &k, 3).mul(g.constant(random_tensor(&[2, 6, 6], 40))).sum()
        });
    }

    fn small_mgaa() -> (Mgaa, ParamStore<f64>) {
        let m = Mgaa::new("mgaa", 8, 6, 5, true);
        let mut specs = Vec::new();
        m.specs(&mut specs);
        (m, init_params(&specs, 11))
    }

    #[test]
    fn offset_and_kernel_shapes() {
        let (m, store) = small_mgaa();
        let r = random_tensor(&[8, 16, 16], 1);
        let s = random_tensor(&[8, 16, 16], 2);
        let offs = m.estimate_offsets(&store, &r, &s).unwrap();
        assert_eq!(offs.offsets.len(), 6);
        assert!(offs.offsets.iter().all(|o| o.shape() == [2, 16, 16] && o.all_finite()));
        let again = m.estimate_offsets(&store, &r, &s).unwrap();
        for (a, b) in offs.offsets.iter().zip(&again.offsets) {
            assert_eq!(a, b);
        }
        let ks = m.predict_kernels(&store, &r).unwrap();
        assert_eq!(ks.per_pixel_len(), 480);
        assert!(ks.vertical.iter().chain(&ks.horizontal).all(|t| t.shape() == [40, 16, 16]));
        assert!(m.estimate_offsets(&store, &r, &random_tensor(&[8, 8, 16], 3)).is_err());
    }

    #[test]
    fn spectral_concat_doubles_channels() {
        let g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[8, 4, 4], 0));
        assert_eq!(x.fft2c().shape(), vec![16, 4, 4]);
    }

    #[test]
    fn degenerate_heads_reduce_to_fused_center() {
        let (m, mut store) = small_mgaa();
        for i in 1..=6 {
            for s in ["weight", "bias"] {
                let t = store.get_mut(&format!("mgaa.me.branch{i}.conv2.{s}")).unwrap();
                t.data_mut().fill(0.0);
            }
        }
        store.get_mut("mgaa.kp.head.weight").unwrap().data_mut().fill(0.0);
        let x = random_tensor(&[8, 8, 8], 5);
        let g = Graph::new();
        let p = store.bind(&g);
        let v = g.constant(x.clone());
        let out = m.forward(&p, v, v, v).value();
        let expect = m.fuse.forward(&p, Var::concat(&[v, v])).value();
        assert!(out.max_abs_diff(&expect) < 1e-12);
        assert_eq!(out.shape(), &[8, 8, 8]);
    }
}
