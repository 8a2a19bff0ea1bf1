use rand::Rng;

use super::params::{Binding, ParamId, ParamStore};
use crate::error::Result;
use crate::ndtensor::{Element, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.push(format!("{name}.w"), Tensor::trunc_normal(vec![fan_in, fan_out], INIT_STD, rng)),
            b: store.push(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.push(format!("{name}.g"), Tensor::ones(vec![dim])),
            bias: store.push(format!("{name}.b"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::init(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::init(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::init(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::init(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    /// `x` queries attend over `mem`; both packed as `groups` equal runs.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var, mem: Var, heads: usize, groups: usize) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, mem)?;
        let v = self.v.forward(g, p, mem)?;
        let a = g.attention(q, k, v, heads, groups)?;
        self.out.forward(g, p, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::init(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Pre-LN transformer block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: Attention::init(store, &format!("{name}.attn"), dim, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var, heads: usize, groups: usize) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, h, heads, groups)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Decoder block: self-attention over the queries, cross-attention into the
/// visible memory, then an MLP. The memory is read, never written.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        CrossBlock {
            ln_self: LayerNorm::init(store, &format!("{name}.ln_self"), dim),
            self_attn: Attention::init(store, &format!("{name}.self_attn"), dim, rng),
            ln_q: LayerNorm::init(store, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::init(store, &format!("{name}.ln_kv"), dim),
            cross_attn: Attention::init(store, &format!("{name}.cross_attn"), dim, rng),
            ln_mlp: LayerNorm::init(store, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::init(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    /// Returns the updated queries and the cross-attention output (for
    /// probing).
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        q: Var,
        mem: Var,
        heads: usize,
        groups: usize,
    ) -> Result<(Var, Var)> {
        let h = self.ln_self.forward(g, p, q)?;
        let h = self.self_attn.forward(g, p, h, h, heads, groups)?;
        let q = g.add(q, h)?;
        let hq = self.ln_q.forward(g, p, q)?;
        let hm = self.ln_kv.forward(g, p, mem)?;
        let cross = self.cross_attn.forward(g, p, hq, hm, heads, groups)?;
        let q = g.add(q, cross)?;
        let h = self.ln_mlp.forward(g, p, q)?;
        let h = self.mlp.forward(g, p, h)?;
        Ok((g.add(q, h)?, cross))
    }
}

/// Three affine maps with LayerNorm and GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    pub fc1: Linear,
    pub ln1: LayerNorm,
    pub fc2: Linear,
    pub ln2: LayerNorm,
    pub fc3: Linear,
}

impl Projector {
    pub fn init<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Projector {
            fc1: Linear::init(store, &format!("{name}.fc1"), dim, hidden, rng),
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), hidden),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, hidden, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), hidden),
            fc3: Linear::init(store, &format!("{name}.fc3"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = self.ln1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let h = self.ln2.forward(g, p, h)?;
        let h = g.gelu(h)?;
        self.fc3.forward(g, p, h)
    }
}
