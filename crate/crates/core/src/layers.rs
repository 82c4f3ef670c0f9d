//! Parameter declarations, initialisation and the small reusable blocks
//! (convolution, channel attention) the model is assembled from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, ParamStore, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// `U(-g/sqrt(fan_in), g/sqrt(fan_in))` with gain `g`.
    Uniform { fan_in: usize, gain: f64 },
    Const(f64),
    /// Bias of a kernel-predictor head: 1 at the centre tap of every `k`-tap kernel.
    CenterTap { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Deterministically initialises every declared parameter from `seed`.
pub fn init_params<T: Real>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n = spec.numel();
        let data: Vec<T> = match &spec.init {
            Init::Uniform { fan_in, gain } => {
                let bound = gain / (*fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64c(rng.random_range(-1.0..=1.0) * bound)).collect()
            }
            Init::Const(v) => vec![T::from_f64c(*v); n],
            Init::CenterTap { k } => (0..n)
                .map(|i| if i % k == k / 2 { T::one() } else { T::zero() })
                .collect(),
        };
        store.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data).expect("spec shape"));
    }
    store
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// Multiplier on the default init bound of the weight.
    pub gain: f64,
    pub bias_init: Option<Init>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            gain: 1.0,
            bias_init: None,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn with_bias_init(mut self, init: Init) -> Self {
        self.bias_init = Some(init);
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.cin * self.k * self.k;
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: vec![self.cout, self.cin, self.k, self.k],
            init: Init::Uniform { fan_in, gain: self.gain },
        });
        out.push(ParamSpec {
            name: format!("{}.bias", self.name),
            shape: vec![self.cout],
            init: self.bias_init.clone().unwrap_or(Init::Uniform { fan_in, gain: self.gain }),
        });
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = p.get(&format!("{}.weight", self.name));
        let b = p.get(&format!("{}.bias", self.name));
        x.conv2d(w, Some(b))
    }
}

/// Pooled two-layer gate: `x * sigmoid(conv(relu(conv(avgpool(x)))))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            squeeze: Conv2d::new(format!("{name}.squeeze"), c, c, 1),
            excite: Conv2d::new(format!("{name}.excite"), c, c, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.squeeze.specs(out);
        self.excite.specs(out);
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let pooled = x.global_avg_pool();
        let gate = self.excite.forward(p, self.squeeze.forward(p, pooled).relu()).sigmoid();
        x.mul_channels(gate)
    }
}

pub fn param_count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}
