//! Multi-frequency feature refinement: split a feature into `Q` radial
//! subbands, enhance them from the lowest band upwards with feed-forward and
//! feedback branches, then merge the enhanced bands under channel attention.

use std::sync::Arc;

use crate::autograd::{Bound, Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::frequency::{gaussian_bandpass_masks, MaskVariant};
use crate::layers::{ChannelAttention, Conv2d, ParamSpec};
use crate::tensor::{Real, Tensor};

/// Ordered subband features, index 0 is the lowest band.
pub type SubbandSet<T> = Vec<Tensor<T>>;

/// `x + gamma * CA(sigmoid(conv3x3(x)))`.
#[derive(Debug, Clone)]
pub struct EnhanceBlock {
    conv: Conv2d,
    ca: ChannelAttention,
}

impl EnhanceBlock {
    fn new(name: &str, c: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), c, c, 3),
            ca: ChannelAttention::new(&format!("{name}.ca"), c),
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        self.ca.specs(out);
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, gamma: T) -> Var<'g, T> {
        x + self.ca.forward(p, self.conv.forward(p, x).sigmoid()).scale(gamma)
    }
}

#[derive(Debug, Clone)]
pub struct Mffr {
    feedforward: Vec<EnhanceBlock>,
    feedback: Vec<EnhanceBlock>,
    aggregate_ca: ChannelAttention,
    q: usize,
    gamma: f64,
    mask_variant: MaskVariant,
    mean_size: usize,
    identity_hooks: bool,
    use_ffe: bool,
    use_fbe: bool,
}

impl Mffr {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        Self {
            feedforward: (1..=cfg.q_bands)
                .map(|q| EnhanceBlock::new(&format!("{name}.ffe{q}"), c))
                .collect(),
            feedback: (2..=cfg.q_bands)
                .map(|q| EnhanceBlock::new(&format!("{name}.fbe{q}"), c))
                .collect(),
            aggregate_ca: ChannelAttention::new(&format!("{name}.aggregate"), c),
            q: cfg.q_bands,
            gamma: cfg.gamma,
            mask_variant: cfg.mask_variant,
            mean_size: cfg.mean_filter_size,
            identity_hooks: cfg.identity_hooks,
            use_ffe: cfg.use_ffe,
            use_fbe: cfg.use_fbe,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        if self.identity_hooks {
            return;
        }
        for (q, b) in self.feedforward.iter().enumerate() {
            // band 1 always runs its feed-forward block
            if self.use_ffe || q == 0 {
                b.specs(out);
            }
        }
        if self.use_fbe {
            for b in &self.feedback {
                b.specs(out);
            }
        }
        self.aggregate_ca.specs(out);
    }

    pub fn bands(&self) -> usize {
        self.q
    }

    fn block<'g, T: Real>(&self, block: &EnhanceBlock, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        if self.identity_hooks {
            x
        } else {
            block.forward(p, x, T::from_f64c(self.gamma))
        }
    }

    /// Band-pass decomposition `S_j = ifft2(M_j ⊙ fft2(x))` on the graph.
    pub fn decompose<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let (_, h, w) = x.chw();
        let masks = gaussian_bandpass_masks(h, w, self.q, self.mask_variant)?;
        let spectrum = x.fft2c();
        Ok(masks
            .masks
            .iter()
            .map(|m| spectrum.mul_plane(Arc::new(m.cast::<T>())).ifft2c_real())
            .collect())
    }

    /// Enhanced feature `E_q` (1-based `q`) from `S_1..S_q` and `E_1..E_{q-1}`.
    pub fn enhance<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        q: usize,
        s: &[Var<'g, T>],
        e: &[Var<'g, T>],
    ) -> Result<Var<'g, T>> {
        ensure!(q >= 1 && q <= self.q, Invalid, "band index {q} outside 1..={}", self.q);
        ensure!(s.len() >= q, Invalid, "band {q} needs {q} decomposed features, got {}", s.len());
        ensure!(e.len() == q - 1, Invalid, "band {q} needs {} enhanced features, got {}", q - 1, e.len());
        if q == 1 {
            let smoothed = s[0].box_filter(self.mean_size);
            return Ok(self.block(&self.feedforward[0], p, smoothed));
        }
        let current = s[q - 1];
        let lower = Var::add_all(&s[..q - 1]);
        let feedback_in = Var::add_all(e);
        let high = current - lower;
        let forward = self.use_ffe.then(|| self.block(&self.feedforward[q - 1], p, high + feedback_in));
        let backward = self.use_fbe.then(|| self.block(&self.feedback[q - 2], p, feedback_in));
        Ok(match (forward, backward) {
            (Some(f), Some(b)) => f + b,
            (Some(f), None) => f,
            (None, Some(b)) => b + current,
            (None, None) => current,
        })
    }

    pub fn aggregate<'g, T: Real>(&self, p: &Bound<'g, T>, e: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        ensure!(!e.is_empty(), Invalid, "aggregate needs at least one enhanced feature");
        let sum = Var::add_all(e);
        Ok(if self.identity_hooks {
            sum
        } else {
            self.aggregate_ca.forward(p, sum)
        })
    }

    /// Runs decompose, enhancement for q = 1..Q and aggregation.
    pub fn forward_traced<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>, Vec<Var<'g, T>>)> {
        let s = self.decompose(x)?;
        let mut e = Vec::with_capacity(self.q);
        for q in 1..=self.q {
            let eq = self.enhance(p, q, &s, &e)?;
            e.push(eq);
        }
        let out = self.aggregate(p, &e)?;
        Ok((out, s, e))
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_traced(p, x)?.0)
    }

    /// Decomposed and enhanced subbands of `x` for inspection.
    pub fn trace<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(SubbandSet<T>, SubbandSet<T>)> {
        let g = Graph::inference();
        let p = store.bind(&g);
        let (_, s, e) = self.forward_traced(&p, g.constant(x.clone()))?;
        let take = |v: &[Var<'_, T>]| v.iter().map(|v| (*v.value()).clone()).collect();
        Ok((take(&s), take(&e)))
    }
}
