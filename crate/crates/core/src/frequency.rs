//! Frequency-domain primitives: centered 2D FFT, band-pass mask construction,
//! spectral decomposition, single-level Haar DWT and box filtering.
//!
//! All transforms use the orthonormal DFT (`1/sqrt(hw)` both ways) and store
//! spectra centered, with the DC bin at `(h/2, w/2)` (integer division), so the
//! radial mask coordinates `(u - h/2, v - w/2)` index the stored array directly.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{reflect, Real, Tensor};

/// Relative tolerance for the imaginary residue dropped by [`ifft2`].
pub const IMAG_RESIDUE_TOL: f64 = 1e-4;

thread_local! {
    static PLANS: RefCell<HashMap<(TypeId, usize, bool), Box<dyn Any>>> = RefCell::new(HashMap::new());
}

fn plan<T: Real>(len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    PLANS.with(|plans| {
        let mut plans = plans.borrow_mut();
        let entry = plans
            .entry((TypeId::of::<T>(), len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::<T>::new();
                let fft = if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                };
                Box::new(fft)
            });
        entry
            .downcast_ref::<Arc<dyn Fft<T>>>()
            .expect("plan cache type")
            .clone()
    })
}

/// In-place unnormalized 2D transform of one `h×w` plane.
fn fft_plane<T: Real>(buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>, h: usize, w: usize, inverse: bool) {
    plan::<T>(w, inverse).process(buf);
    scratch.clear();
    scratch.resize(h * w, Complex::new(T::zero(), T::zero()));
    for y in 0..h {
        for x in 0..w {
            scratch[x * h + y] = buf[y * w + x];
        }
    }
    plan::<T>(h, inverse).process(scratch);
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = scratch[x * h + y];
        }
    }
}

/// Forward centered orthonormal FFT of every channel; output `[2c,h,w]`
/// holding real parts in the first `c` channels and imaginary parts after.
pub(crate) fn fft2c_raw<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let norm = T::one() / T::from_usize(plane).unwrap().sqrt();
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![T::zero(); 2 * c * plane];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
    let mut scratch = Vec::new();
    for k in 0..c {
        for (b, &v) in buf.iter_mut().zip(&data[k * plane..(k + 1) * plane]) {
            *b = Complex::new(v, T::zero());
        }
        fft_plane(&mut buf, &mut scratch, h, w, false);
        let (re, rest) = out[k * plane..].split_at_mut(plane);
        let im = &mut rest[(c - 1) * plane..c * plane];
        for u in 0..h {
            let su = (u + ch) % h;
            for v in 0..w {
                let sv = (v + cw) % w;
                let z = buf[u * w + v] * norm;
                re[su * w + sv] = z.re;
                im[su * w + sv] = z.im;
            }
        }
    }
    out
}

/// Inverse of [`fft2c_raw`]: takes `[2c,h,w]` (real block, imaginary block) and
/// returns the complex spatial result as separate real and imaginary planes.
pub(crate) fn ifft2c_raw<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let norm = T::one() / T::from_usize(plane).unwrap().sqrt();
    let (ch, cw) = (h / 2, w / 2);
    let mut re_out = vec![T::zero(); c * plane];
    let mut im_out = vec![T::zero(); c * plane];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
    let mut scratch = Vec::new();
    for k in 0..c {
        let re = &data[k * plane..(k + 1) * plane];
        let im = &data[(c + k) * plane..(c + k + 1) * plane];
        for u in 0..h {
            let su = (u + ch) % h;
            for v in 0..w {
                let sv = (v + cw) % w;
                buf[u * w + v] = Complex::new(re[su * w + sv], im[su * w + sv]);
            }
        }
        fft_plane(&mut buf, &mut scratch, h, w, true);
        for (i, z) in buf.iter().enumerate() {
            re_out[k * plane + i] = z.re * norm;
            im_out[k * plane + i] = z.im * norm;
        }
    }
    (re_out, im_out)
}

/// Spectrum of a `[c,h,w]` feature: `[2c,h,w]`, real parts then imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFeature<T> {
    data: Tensor<T>,
}

impl<T: Real> FrequencyFeature<T> {
    pub fn from_concat(data: Tensor<T>) -> Result<Self> {
        ensure!(
            data.shape().len() == 3 && data.shape()[0] % 2 == 0,
            Shape,
            "frequency feature must be [2c,h,w], got {:?}",
            data.shape()
        );
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0] / 2
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn concat(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn real(&self) -> Tensor<T> {
        self.data.channels(0, self.channels())
    }

    pub fn imag(&self) -> Tensor<T> {
        self.data.channels(self.channels(), self.channels())
    }

    /// Squared magnitude `re² + im²`, shape `[c,h,w]`.
    pub fn power(&self) -> Tensor<T> {
        let re = self.real();
        let im = self.imag();
        re.zip_map(&im, |a, b| a * a + b * b)
    }
}

fn check_feature<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    ensure!(x.shape().len() == 3, Shape, "{what}: expected [c,h,w], got {:?}", x.shape());
    let (c, h, w) = x.chw();
    ensure!(h >= 2 && w >= 2, Shape, "{what}: spatial size {h}x{w} below 2x2");
    x.ensure_finite(what)?;
    Ok((c, h, w))
}

pub fn fft2<T: Real>(feature: &Tensor<T>) -> Result<FrequencyFeature<T>> {
    let (c, h, w) = check_feature(feature, "fft2")?;
    let data = Tensor::from_vec(&[2 * c, h, w], fft2c_raw(feature.data(), c, h, w))?;
    Ok(FrequencyFeature { data })
}

/// Inverse transform keeping the real part. Fails if the discarded imaginary
/// part exceeds [`IMAG_RESIDUE_TOL`] relative to the real part, i.e. if the
/// spectrum was not (close to) that of a real signal.
pub fn ifft2<T: Real>(freq: &FrequencyFeature<T>) -> Result<Tensor<T>> {
    let (re, im) = ifft2_complex(freq)?;
    let re_norm = re.sum_sq().as_f64().sqrt();
    let im_norm = im.sum_sq().as_f64().sqrt();
    if im_norm > IMAG_RESIDUE_TOL * re_norm.max(f64::MIN_POSITIVE) && im_norm > 1e-12 {
        return Err(Error::Invalid(format!(
            "ifft2: imaginary residue {im_norm:.3e} exceeds {IMAG_RESIDUE_TOL} x real norm {re_norm:.3e}"
        )));
    }
    Ok(re)
}

/// Inverse transform returning both real and imaginary spatial parts.
pub fn ifft2_complex<T: Real>(freq: &FrequencyFeature<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    freq.data.ensure_finite("ifft2")?;
    let c = freq.channels();
    let (h, w) = freq.hw();
    let (re, im) = ifft2c_raw(freq.data.data(), c, h, w);
    Ok((
        Tensor::from_vec(&[c, h, w], re)?,
        Tensor::from_vec(&[c, h, w], im)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    /// `M_j = G(d_j) - G(d_{j-1})`, telescoping to `G(d_Q)`.
    #[default]
    ConsecutiveDifference,
    /// `M_j = G(d_j) - sum_{l<j} G(d_l)`, taken literally.
    LiteralPaper,
    /// Hard radial bands `d_{j-1} <= r < d_j` (last band closed).
    Ideal,
    /// Differences of second-order Butterworth low-pass responses.
    Butterworth,
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consecutive-difference" | "consecutive" | "gaussian" => Ok(Self::ConsecutiveDifference),
            "literal-paper" | "literal" => Ok(Self::LiteralPaper),
            "ideal" => Ok(Self::Ideal),
            "butterworth" => Ok(Self::Butterworth),
            other => Err(Error::Invalid(format!("unknown mask variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ConsecutiveDifference => "consecutive-difference",
            Self::LiteralPaper => "literal-paper",
            Self::Ideal => "ideal",
            Self::Butterworth => "butterworth",
        })
    }
}

const BUTTERWORTH_ORDER: i32 = 2;

/// Q real band-pass masks over the centered `h×w` spectrum.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub masks: Vec<Tensor<f64>>,
    pub cutoffs: Vec<f64>,
    pub variant: MaskVariant,
    pub h: usize,
    pub w: usize,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Squared radial distance of bin `(u,v)` from the spectrum center.
    pub fn radius_sq(&self, u: usize, v: usize) -> f64 {
        radius_sq(self.h, self.w, u, v)
    }
}

fn radius_sq(h: usize, w: usize, u: usize, v: usize) -> f64 {
    let du = u as f64 - (h / 2) as f64;
    let dv = v as f64 - (w / 2) as f64;
    du * du + dv * dv
}

/// Truncation frequencies `d_j = j * sqrt((h/2)^2 + (w/2)^2) / Q`, j = 1..=Q.
pub fn truncation_frequencies(h: usize, w: usize, q: usize) -> Vec<f64> {
    let radius = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    (1..=q).map(|j| j as f64 * radius / q as f64).collect()
}

pub fn gaussian_lowpass(r2: f64, d: f64) -> f64 {
    (-r2 / (2.0 * d * d)).exp()
}

fn butterworth_lowpass(r2: f64, d: f64) -> f64 {
    1.0 / (1.0 + (r2 / (d * d)).powi(BUTTERWORTH_ORDER))
}

pub fn gaussian_bandpass_masks(h: usize, w: usize, q: usize, variant: MaskVariant) -> Result<MaskSet> {
    ensure!(q >= 1, Invalid, "mask count Q must be >= 1");
    ensure!(h >= 2 && w >= 2, Invalid, "mask size {h}x{w} below 2x2");
    if q > h.min(w) {
        log::warn!("Q={q} exceeds min(h,w)={}: bands are thinner than one frequency bin", h.min(w));
    }
    let cutoffs = truncation_frequencies(h, w, q);
    let masks = (0..q)
        .map(|j| {
            Tensor::from_fn(&[h, w], |i| {
                let r2 = radius_sq(h, w, i / w, i % w);
                match variant {
                    MaskVariant::ConsecutiveDifference => {
                        let prev = if j == 0 { 0.0 } else { gaussian_lowpass(r2, cutoffs[j - 1]) };
                        gaussian_lowpass(r2, cutoffs[j]) - prev
                    }
                    MaskVariant::LiteralPaper => {
                        gaussian_lowpass(r2, cutoffs[j])
                            - cutoffs[..j].iter().map(|&d| gaussian_lowpass(r2, d)).sum::<f64>()
                    }
                    MaskVariant::Ideal => {
                        let r = r2.sqrt();
                        let lo = if j == 0 { 0.0 } else { cutoffs[j - 1] };
                        let inside = if j + 1 == q { r <= cutoffs[j] + 1e-9 } else { r < cutoffs[j] };
                        if r >= lo && inside {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    MaskVariant::Butterworth => {
                        let prev = if j == 0 { 0.0 } else { butterworth_lowpass(r2, cutoffs[j - 1]) };
                        butterworth_lowpass(r2, cutoffs[j]) - prev
                    }
                }
            })
        })
        .collect();
    Ok(MaskSet {
        masks,
        cutoffs,
        variant,
        h,
        w,
    })
}

/// `S_j = ifft2(M_j ⊙ fft2(feature))` for every mask.
pub fn decompose<T: Real>(feature: &Tensor<T>, masks: &MaskSet) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = check_feature(feature, "decompose")?;
    ensure!(
        (h, w) == (masks.h, masks.w),
        Shape,
        "decompose: feature {h}x{w} vs masks {}x{}",
        masks.h,
        masks.w
    );
    let spectrum = fft2c_raw(feature.data(), c, h, w);
    let plane = h * w;
    masks
        .masks
        .iter()
        .map(|m| {
            let mut filtered = spectrum.clone();
            for (i, v) in filtered.iter_mut().enumerate() {
                *v *= T::from_f64c(m.data()[i % plane]);
            }
            let freq = FrequencyFeature::from_concat(Tensor::from_vec(&[2 * c, h, w], filtered)?)?;
            ifft2(&freq)
        })
        .collect()
}

/// Single-level orthonormal Haar subbands. The first letter names the filter
/// along the width (x), the second along the height (y): `HL` is high-pass in
/// x and responds to vertical structure, `LH` to horizontal structure.
#[derive(Debug, Clone)]
pub struct WaveletSubbands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    /// Rows and columns appended by reflection to make the input even.
    pub padding: (usize, usize),
}

/// Pads the bottom/right edge by reflection to even height and width.
pub fn pad_to_even<T: Real>(x: &Tensor<T>) -> (Tensor<T>, (usize, usize)) {
    let (c, h, w) = x.chw();
    let (ph, pw) = (h % 2, w % 2);
    if ph == 0 && pw == 0 {
        return (x.clone(), (0, 0));
    }
    let (nh, nw) = (h + ph, w + pw);
    let out = Tensor::from_fn(&[c, nh, nw], |i| {
        let k = i / (nh * nw);
        let y = reflect(((i / nw) % nh) as isize, h);
        let xx = reflect((i % nw) as isize, w);
        x.data()[(k * h + y) * w + xx]
    });
    (out, (ph, pw))
}

pub(crate) fn haar_forward<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let half = T::from_f64c(0.5);
    let mut out = vec![T::zero(); 4 * c * q];
    for k in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = k * h * w;
                let a = data[base + 2 * i * w + 2 * j];
                let b = data[base + 2 * i * w + 2 * j + 1];
                let cc = data[base + (2 * i + 1) * w + 2 * j];
                let d = data[base + (2 * i + 1) * w + 2 * j + 1];
                let o = k * q + i * w2 + j;
                out[o] = (a + b + cc + d) * half;
                out[c * q + o] = (a + b - cc - d) * half;
                out[2 * c * q + o] = (a - b + cc - d) * half;
                out[3 * c * q + o] = (a - b - cc + d) * half;
            }
        }
    }
    out
}

pub(crate) fn haar_inverse<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let half = T::from_f64c(0.5);
    let mut out = vec![T::zero(); c * h * w];
    for k in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let o = k * q + i * w2 + j;
                let ll = data[o];
                let lh = data[c * q + o];
                let hl = data[2 * c * q + o];
                let hh = data[3 * c * q + o];
                let base = k * h * w;
                out[base + 2 * i * w + 2 * j] = (ll + lh + hl + hh) * half;
                out[base + 2 * i * w + 2 * j + 1] = (ll + lh - hl - hh) * half;
                out[base + (2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) * half;
                out[base + (2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) * half;
            }
        }
    }
    out
}

pub fn dwt2<T: Real>(image: &Tensor<T>) -> Result<WaveletSubbands<T>> {
    ensure!(image.shape().len() == 3, Shape, "dwt2: expected [c,h,w], got {:?}", image.shape());
    let (padded, padding) = pad_to_even(image);
    let (c, h, w) = padded.chw();
    let bands = haar_forward(padded.data(), c, h, w);
    let q = (h / 2) * (w / 2);
    let band = |b: usize| Tensor::from_vec(&[c, h / 2, w / 2], bands[b * c * q..(b + 1) * c * q].to_vec());
    Ok(WaveletSubbands {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
        padding,
    })
}

/// Synthesis; crops any padding recorded by [`dwt2`].
pub fn idwt2<T: Real>(bands: &WaveletSubbands<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape().to_vec();
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        ensure!(b.shape() == shape.as_slice(), Shape, "idwt2: subband shapes differ");
    }
    let (c, h2, w2) = bands.ll.chw();
    let (h, w) = (2 * h2, 2 * w2);
    let mut packed = Vec::with_capacity(4 * c * h2 * w2);
    for b in [&bands.ll, &bands.lh, &bands.hl, &bands.hh] {
        packed.extend_from_slice(b.data());
    }
    let full = haar_inverse(&packed, c, h, w);
    let (ph, pw) = bands.padding;
    let (oh, ow) = (h - ph, w - pw);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let k = i / (oh * ow);
        let y = (i / ow) % oh;
        let x = i % ow;
        full[(k * h + y) * w + x]
    }))
}

pub(crate) fn box_filter_raw<T: Real>(data: &[T], c: usize, h: usize, w: usize, size: usize) -> Vec<T> {
    let r = (size / 2) as isize;
    let inv = T::one() / T::from_usize(size * size).unwrap();
    let mut out = vec![T::zero(); data.len()];
    for k in 0..c {
        let plane = &data[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += plane[yy * w + reflect(x as isize + dx, w)];
                    }
                }
                out[k * h * w + y * w + x] = acc * inv;
            }
        }
    }
    out
}

/// Per-channel `size×size` box average with reflect padding.
pub fn mean_filter<T: Real>(feature: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    ensure!(size % 2 == 1, Invalid, "mean filter size must be odd, got {size}");
    ensure!(feature.shape().len() == 3, Shape, "mean_filter: expected [c,h,w]");
    let (c, h, w) = feature.chw();
    Tensor::from_vec(feature.shape(), box_filter_raw(feature.data(), c, h, w, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct O(n^4) centered orthonormal DFT.
    fn brute_dft(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let (c, h, w) = x.chw();
        let mut re = vec![0.0; c * h * w];
        let mut im = vec![0.0; c * h * w];
        let norm = 1.0 / ((h * w) as f64).sqrt();
        for k in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for xx in 0..w {
                            let ph = -2.0
                                * std::f64::consts::PI
                                * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                            let val = x.data()[(k * h + y) * w + xx];
                            sr += val * ph.cos();
                            si += val * ph.sin();
                        }
                    }
                    let su = (u + h / 2) % h;
                    let sv = (v + w / 2) % w;
                    re[(k * h + su) * w + sv] = sr * norm;
                    im[(k * h + su) * w + sv] = si * norm;
                }
            }
        }
        (re, im)
    }

    #[test]
    fn fft_matches_brute_force_dft() {
        let x = random(&[2, 4, 6], 3);
        let f = fft2(&x).unwrap();
        let (re, im) = brute_dft(&x);
        for (a, b) in f.real().data().iter().zip(&re) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in f.imag().data().iter().zip(&im) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_puts_all_energy_at_dc() {
        let x = Tensor::<f64>::full(&[1, 8, 8], 0.7);
        let p = fft2(&x).unwrap().power();
        let dc = 4 * 8 + 4;
        assert!((p.data()[dc] - (0.7 * 8.0f64).powi(2)).abs() < 1e-10);
        for (i, v) in p.data().iter().enumerate() {
            if i != dc {
                assert!(v.abs() < 1e-20);
            }
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Tensor::<f64>::zeros(&[1, 4, 4]);
        x.data_mut()[5] = 1.0;
        let (re, im) = brute_dft(&x);
        let p = fft2(&x).unwrap().power();
        for i in 0..16 {
            let brute = re[i] * re[i] + im[i] * im[i];
            assert!((brute - 1.0 / 16.0).abs() < 1e-12);
            assert!((p.data()[i] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_round_trip() {
        let x = random(&[3, 8, 8], 1);
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        let x = random(&[2, 5, 7], 2);
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut x = Tensor::<f64>::zeros(&[1, 4, 4]);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(fft2(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ifft_rejects_non_hermitian_spectrum() {
        let mut spec = Tensor::<f64>::zeros(&[2, 4, 4]);
        spec.data_mut()[16 + 1] = 1.0;
        let freq = FrequencyFeature::from_concat(spec).unwrap();
        assert!(ifft2(&freq).is_err());
    }

    #[test]
    fn truncation_frequencies_closed_form() {
        let d = truncation_frequencies(16, 16, 4);
        let step = 128f64.sqrt() / 4.0;
        for (j, dj) in d.iter().enumerate() {
            assert!((dj - (j + 1) as f64 * step).abs() < 1e-12);
        }
        assert!((d[0] - 2.8284).abs() < 1e-4 && (d[1] - 5.6569).abs() < 1e-4);
    }

    #[test]
    fn mask_center_values() {
        let m = gaussian_bandpass_masks(16, 16, 4, MaskVariant::ConsecutiveDifference).unwrap();
        let center = 8 * 16 + 8;
        assert_eq!(m.masks[0].data()[center], 1.0);
        assert_eq!(m.masks[1].data()[center], 0.0);
        let lit = gaussian_bandpass_masks(16, 16, 4, MaskVariant::LiteralPaper).unwrap();
        assert_eq!(lit.masks[2].data()[center], -1.0);
        assert_eq!(lit.masks[3].data()[center], -2.0);
    }

    #[test]
    fn ideal_masks_partition_unity() {
        let m = gaussian_bandpass_masks(12, 10, 5, MaskVariant::Ideal).unwrap();
        for i in 0..120 {
            let s: f64 = m.masks.iter().map(|t| t.data()[i]).sum();
            assert_eq!(s, 1.0, "bin {i}");
        }
    }

    #[test]
    fn butterworth_telescopes_to_last_lowpass() {
        let m = gaussian_bandpass_masks(8, 8, 3, MaskVariant::Butterworth).unwrap();
        for i in 0..64 {
            let s: f64 = m.masks.iter().map(|t| t.data()[i]).sum();
            let r2 = m.radius_sq(i / 8, i % 8);
            assert!((s - butterworth_lowpass(r2, m.cutoffs[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_mask_arguments() {
        assert!(gaussian_bandpass_masks(8, 8, 0, MaskVariant::Ideal).is_err());
        assert!(gaussian_bandpass_masks(1, 8, 2, MaskVariant::Ideal).is_err());
        assert!(gaussian_bandpass_masks(4, 4, 9, MaskVariant::Ideal).is_ok());
    }

    #[test]
    fn decompose_rejects_shape_mismatch() {
        let m = gaussian_bandpass_masks(8, 8, 2, MaskVariant::ConsecutiveDifference).unwrap();
        assert!(decompose(&random(&[1, 8, 6], 0), &m).is_err());
    }

    #[test]
    fn decompose_is_linear() {
        let m = gaussian_bandpass_masks(8, 8, 3, MaskVariant::ConsecutiveDifference).unwrap();
        let x = random(&[2, 8, 8], 4);
        let y = random(&[2, 8, 8], 5);
        let mix = x.zip_map(&y, |a, b| 2.0 * a - b);
        let dx = decompose(&x, &m).unwrap();
        let dy = decompose(&y, &m).unwrap();
        for (j, s) in decompose(&mix, &m).unwrap().iter().enumerate() {
            let expect = dx[j].zip_map(&dy[j], |a, b| 2.0 * a - b);
            assert!(s.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn haar_constant_image() {
        let x = Tensor::<f64>::full(&[1, 4, 6], 0.3);
        let b = dwt2(&x).unwrap();
        assert!(b.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data().iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn haar_step_along_width_lands_in_hl() {
        // 4x4 by hand: column 0 is 0, columns 1..3 are 1; the step sits inside the
        // first 2x2 block column, so a-b = -1 there and c-d = -1.
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| if i % 4 == 0 { 0.0 } else { 1.0 });
        let b = dwt2(&x).unwrap();
        assert_eq!(b.hl.data(), &[-1.0, 0.0, -1.0, 0.0]);
        assert_eq!(b.ll.data(), &[1.0, 2.0, 1.0, 2.0]);
        assert!(b.lh.data().iter().all(|&v| v == 0.0));
        assert!(b.hh.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn haar_odd_input_is_padded_and_cropped() {
        let x = random(&[2, 5, 7], 9);
        let b = dwt2(&x).unwrap();
        assert_eq!(b.padding, (1, 1));
        assert_eq!(b.ll.shape(), &[2, 3, 4]);
        assert!(idwt2(&b).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn mean_filter_cases() {
        let x = random(&[2, 5, 5], 7);
        assert_eq!(mean_filter(&x, 1).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 5, 5], 2.5);
        assert!(mean_filter(&c, 3).unwrap().max_abs_diff(&c) < 1e-15);
        let mut imp = Tensor::<f64>::zeros(&[1, 7, 7]);
        imp.data_mut()[3 * 7 + 3] = 1.0;
        let f = mean_filter(&imp, 3).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let expect = if (2..=4).contains(&y) && (2..=4).contains(&x) { 1.0 / 9.0 } else { 0.0 };
                assert!((f.data()[y * 7 + x] - expect).abs() < 1e-15);
            }
        }
        assert!(mean_filter(&x, 2).is_err());
    }
}
