use alloc::format;

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.truncated_normal(std)))
}

pub(crate) fn fan_in_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = libm::sqrt(2.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| T::of(rng.normal() * std))
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(&[inputs, outputs], std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add_broadcast(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm::with_gain(store, name, dim, 1.0)
    }

    pub fn with_gain<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, gain: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::of(gain)));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, INIT_STD, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, out, true, INIT_STD, rng);
        Mlp { fc1, fc2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head self-attention over `[B, T, d]` without masking.
#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), dim, dim, true, INIT_STD, rng);
        SelfAttention { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads }
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, b: usize, t: usize, d: usize) -> Result<Var> {
        let h = self.heads;
        let x = g.reshape(x, &[b, t, h, d / h])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, t, d / h])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let &[b, t, d] = g.shape(x) else { unreachable!("attention input is [B, T, d]") };
        let h = self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let q = self.split_heads(g, q, b, t, d)?;
        let k = self.split_heads(g, k, b, t, d)?;
        let v = self.split_heads(g, v, b, t, d)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt((d / h) as f64));
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, d / h])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.o.forward(g, ctx)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    attn: SelfAttention,
    ln2: Norm,
    mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}
