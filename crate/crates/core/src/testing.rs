//! Test utilities: seeded random tensors and a central finite-difference
//! gradient checker. Shared by unit tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_tensor_in(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Per-input relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// over the checked coordinates.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` with central differences (step 1e-6).
/// When `max_coords` is set, only that many seeded-random coordinates per input
/// are perturbed.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], max_coords: Option<usize>, f: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<_> = probe.iter().map(|t| g.leaf(t.clone())).collect();
        f(&g, &vars).item()
    };
    let step = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut rel_errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => (0..m).map(|_| rng.random_range(0..input.len())).collect(),
            _ => (0..input.len()).collect(),
        };
        let mut probe = inputs.to_vec();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale });
    }
    GradCheck { rel_errors }
}

/// Asserts every input's gradient agrees with finite differences to 1e-3 relative.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let report = gradient_check(inputs, None, f);
    for (i, e) in report.rel_errors.iter().enumerate() {
        assert!(*e <= 1e-3, "input {i}: gradient relative error {e:.3e}");
    }
}
