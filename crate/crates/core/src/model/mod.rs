//! Online encoder, target encoder strategies, projector and the two decoder
//! families.

mod layers;
mod params;

use rand::Rng;

pub use layers::{Attention, Block, CrossBlock, LayerNorm, Linear, Mlp, Projector, INIT_STD, LN_EPS};
pub use params::{Binding, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::ndtensor::{kernels, Element, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    SelfAttention,
    CrossAttention,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::SelfAttention => "self_attention",
            DecoderKind::CrossAttention => "cross_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self_attention" => Some(DecoderKind::SelfAttention),
            "cross_attention" => Some(DecoderKind::CrossAttention),
            _ => None,
        }
    }
}

/// How the target latents `Z_T` are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetStrategy {
    /// Separately initialised encoder, never updated.
    Standalone,
    /// Online weights, gradient stopped.
    SharedStopGrad,
    /// Exponential moving average of the online weights.
    Momentum,
    /// Online weights with gradients flowing through the target path too.
    SharedJoint,
}

impl TargetStrategy {
    pub const ALL: [TargetStrategy; 4] = [
        TargetStrategy::Standalone,
        TargetStrategy::SharedStopGrad,
        TargetStrategy::Momentum,
        TargetStrategy::SharedJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetStrategy::Standalone => "standalone",
            TargetStrategy::SharedStopGrad => "shared_stopgrad",
            TargetStrategy::Momentum => "momentum",
            TargetStrategy::SharedJoint => "shared_joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_kind: DecoderKind,
    pub decoder_depth: usize,
    pub visual_cues: bool,
    pub projector: bool,
    pub projector_hidden: usize,
}

impl ModelConfig {
    /// The desk-scale default: d=64, 4 blocks, 4 heads, 8-pixel patches.
    pub fn vit_tiny_lab() -> Self {
        ModelConfig {
            patch_size: 8,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_kind: DecoderKind::SelfAttention,
            decoder_depth: 3,
            visual_cues: false,
            projector: false,
            projector_hidden: 256,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::InvalidKey {
                key: key.into(),
                reason,
            })
        };
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad("dim", format!("must be a positive multiple of 4, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", format!("must divide dim {}, got {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth", "encoder needs at least one block".into());
        }
        if self.decoder_depth == 0 {
            return bad("decoder_depth", "decoder needs at least one block".into());
        }
        if self.patch_size == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("patch_size", "patch size, channels and mlp ratio must be positive".into());
        }
        if self.projector && self.projector_hidden == 0 {
            return bad("projector_hidden", "must be positive".into());
        }
        if self.visual_cues && self.decoder_kind != DecoderKind::CrossAttention {
            return bad("visual_cues", "visual cues need the cross-attention decoder".into());
        }
        Ok(())
    }
}

/// Exact parameter count of a configuration.
///
/// encoder: `pd*d + d + depth*(12d^2 + 13d)`;
/// self-attention decoder: `d + dd*(12d^2 + 13d) + d^2 + d`;
/// cross-attention decoder: `d + dd*(16d^2 + 21d) + d^2 + d`;
/// projector: `2dh + h^2 + 6h + d`
/// (all with `mlp_ratio = 4`; the general form replaces `8d^2 + 5d` in the
/// block MLP by `2rd^2 + (r+1)d`).
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, r) = (cfg.dim, cfg.mlp_ratio);
    let attn = 4 * (d * d + d);
    let mlp = 2 * r * d * d + (r + 1) * d;
    let block = attn + mlp + 4 * d;
    let cross = 2 * attn + mlp + 8 * d;
    let encoder = cfg.patch_dim() * d + d + cfg.depth * block;
    let per = match cfg.decoder_kind {
        DecoderKind::SelfAttention => block,
        DecoderKind::CrossAttention => cross,
    };
    let decoder = d + cfg.decoder_depth * per + d * d + d;
    let h = cfg.projector_hidden;
    let projector = if cfg.projector { 2 * d * h + h * h + 6 * h + d } else { 0 };
    encoder + decoder + projector
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
}

impl Encoder {
    fn init<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let patch_embed = Linear::init(store, "enc.patch_embed", cfg.patch_dim(), cfg.dim, rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::init(store, &format!("enc.block{i}"), cfg.dim, cfg.mlp_ratio, rng))
            .collect();
        Encoder { patch_embed, blocks }
    }
}

#[derive(Debug, Clone)]
pub enum DecoderBlocks {
    SelfAttention(Vec<Block>),
    CrossAttention(Vec<CrossBlock>),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub mask_token: ParamId,
    pub blocks: DecoderBlocks,
    pub head: Linear,
}

/// Batch of images reduced to patch rows. Every image contributes the same
/// number of visible and target rows, stored image after image.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub groups: usize,
    pub visible: Tensor<T>,
    pub target: Tensor<T>,
    pub pos_v: Tensor<T>,
    pub pos_t: Tensor<T>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z_v: Var,
    pub z_hat: Var,
    pub z_t: Var,
    /// Cross-attention output of every decoder layer (empty for the
    /// self-attention decoder).
    pub cross: Vec<Var>,
    pub params: Binding,
}

/// Target encoder: strategy, depth, and its own weights when the strategy
/// keeps any (shared strategies alias the online weights).
#[derive(Debug, Clone)]
pub struct TargetEncoderState<T> {
    pub strategy: TargetStrategy,
    pub depth: usize,
    pub momentum: f64,
    pub params: Option<ParamStore<T>>,
}

impl<T: Element> TargetEncoderState<T> {
    /// Blends `θ̄ <- μ θ̄ + (1-μ) θ` over the encoder tensors.
    pub fn ema_update(&mut self, online: &ParamStore<T>, mu: f64) -> Result<()> {
        if self.strategy != TargetStrategy::Momentum {
            return Err(Error::contract(format!(
                "ema_update needs the momentum strategy, target is {}",
                self.strategy.as_str()
            )));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::contract(format!("momentum must lie in [0, 1], got {mu}")));
        }
        let target = self.params.as_mut().expect("momentum target owns its weights");
        for (tb, t) in target.tensors_mut().iter_mut().zip(online.tensors()) {
            if tb.shape() != t.shape() {
                return Err(Error::shape("ema_update", tb.shape(), t.shape()));
            }
            if mu == 1.0 {
                continue;
            }
            if mu == 0.0 {
                *tb = t.clone();
                continue;
            }
            let (m, n) = (T::lit(mu), T::lit(1.0 - mu));
            for (a, &b) in tb.data_mut().iter_mut().zip(t.data()) {
                *a = m * *a + n * b;
            }
        }
        Ok(())
    }
}

/// Online encoder, decoder and optional projector with their weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub projector: Option<Projector>,
    pub params: ParamStore<T>,
    encoder_len: usize,
}

impl<T: Element> Model<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, cfg, rng);
        let encoder_len = store.len();
        let mask_token = store.push("dec.mask_token", Tensor::trunc_normal(vec![cfg.dim], INIT_STD, rng));
        let blocks = match cfg.decoder_kind {
            DecoderKind::SelfAttention => DecoderBlocks::SelfAttention(
                (0..cfg.decoder_depth)
                    .map(|i| Block::init(&mut store, &format!("dec.block{i}"), cfg.dim, cfg.mlp_ratio, rng))
                    .collect(),
            ),
            DecoderKind::CrossAttention => DecoderBlocks::CrossAttention(
                (0..cfg.decoder_depth)
                    .map(|i| CrossBlock::init(&mut store, &format!("dec.block{i}"), cfg.dim, cfg.mlp_ratio, rng))
                    .collect(),
            ),
        };
        let head = Linear::init(&mut store, "dec.head", cfg.dim, cfg.dim, rng);
        let projector = cfg
            .projector
            .then(|| Projector::init(&mut store, "proj", cfg.dim, cfg.projector_hidden, rng));
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            decoder: Decoder {
                mask_token,
                blocks,
                head,
            },
            projector,
            params: store,
            encoder_len,
        })
    }

    /// Number of leading tensors in `params` that belong to the encoder.
    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn encoder_params(&self) -> ParamStore<T> {
        self.params.prefix(self.encoder_len)
    }

    pub fn new_target(&self, strategy: TargetStrategy, depth: usize, momentum: f64, rng: &mut impl Rng) -> Result<TargetEncoderState<T>> {
        if depth > self.cfg.depth {
            return Err(Error::InvalidKey {
                key: "target_depth".into(),
                reason: format!("{depth} exceeds encoder depth {}", self.cfg.depth),
            });
        }
        let params = match strategy {
            TargetStrategy::Standalone => {
                let mut store = ParamStore::new();
                Encoder::init(&mut store, &self.cfg, rng);
                Some(store)
            }
            TargetStrategy::Momentum => Some(self.encoder_params()),
            TargetStrategy::SharedStopGrad | TargetStrategy::SharedJoint => None,
        };
        Ok(TargetEncoderState {
            strategy,
            depth,
            momentum,
            params,
        })
    }

    /// Patch embedding plus position, then the first `depth` blocks. With
    /// `depth == 0` only the bare patch embedding is returned.
    pub fn encode(&self, g: &mut Graph<T>, p: &Binding, x: Var, pos: Var, groups: usize, depth: usize) -> Result<Var> {
        let (_, w) = g.value(x).dims2("encode")?;
        if w != self.cfg.patch_dim() {
            return Err(Error::shape("encode", g.shape(x), &[self.cfg.patch_dim()]));
        }
        let mut h = self.encoder.patch_embed.forward(g, p, x)?;
        if depth == 0 {
            return Ok(h);
        }
        h = g.add(h, pos)?;
        for block in &self.encoder.blocks[..depth.min(self.encoder.blocks.len())] {
            h = block.forward(g, p, h, self.cfg.heads, groups)?;
        }
        Ok(h)
    }

    /// Target latents for `x`. Every strategy except the joint one runs on
    /// a private tape and returns a constant, so no gradient edge can reach a
    /// parameter through this path.
    pub fn target_encode(
        &self,
        g: &mut Graph<T>,
        target: &TargetEncoderState<T>,
        online: &Binding,
        x: &Tensor<T>,
        pos: &Tensor<T>,
        groups: usize,
    ) -> Result<Var> {
        if target.depth > self.cfg.depth {
            return Err(Error::InvalidKey {
                key: "target_depth".into(),
                reason: format!("{} exceeds encoder depth {}", target.depth, self.cfg.depth),
            });
        }
        if target.strategy == TargetStrategy::SharedJoint {
            let xv = g.constant(x.clone());
            let pv = g.constant(pos.clone());
            return self.encode(g, online, xv, pv, groups, target.depth);
        }
        let mut scratch = Graph::new();
        let bind = match &target.params {
            Some(store) => store.bind(&mut scratch, false),
            None => self.encoder_params().bind(&mut scratch, false),
        };
        let xv = scratch.constant(x.clone());
        let pv = scratch.constant(pos.clone());
        let out = self.encode(&mut scratch, &bind, xv, pv, groups, target.depth)?;
        Ok(g.constant(scratch.value(out).clone()))
    }

    /// Row-wise projector MLP.
    pub fn project(&self, g: &mut Graph<T>, p: &Binding, z: Var) -> Result<Var> {
        match &self.projector {
            Some(proj) => proj.forward(g, p, z),
            None => Err(Error::contract("model was built without a projector")),
        }
    }

    fn visible_stream(&self, g: &mut Graph<T>, p: &Binding, z_v: Var) -> Result<Var> {
        match &self.projector {
            Some(proj) => proj.forward(g, p, z_v),
            None => Ok(z_v),
        }
    }

    /// Self-attention decoder over `[Z_V + P_V ; m + P_T]` per image.
    pub fn decode_self_attn(&self, g: &mut Graph<T>, p: &Binding, z_v: Var, pos_v: Var, pos_t: Var, groups: usize) -> Result<Var> {
        let DecoderBlocks::SelfAttention(blocks) = &self.decoder.blocks else {
            return Err(Error::contract("decode_self_attn called on a cross-attention decoder"));
        };
        let (rv, _) = g.value(z_v).dims2("decode")?;
        let (rt, _) = g.value(pos_t).dims2("decode")?;
        if groups == 0 || rv % groups != 0 || rt % groups != 0 {
            return Err(Error::shape("decode", g.shape(z_v), g.shape(pos_t)));
        }
        let (nv, nt) = (rv / groups, rt / groups);
        let vis = self.visible_stream(g, p, z_v)?;
        let vis = g.add(vis, pos_v)?;
        let queries = g.add_row(pos_t, p.var(self.decoder.mask_token))?;
        let both = g.concat_rows(vis, queries)?;
        // regroup so each image's visible and query rows are contiguous
        let mut order = Vec::with_capacity(rv + rt);
        for b in 0..groups {
            order.extend(b * nv..(b + 1) * nv);
            order.extend(rv + b * nt..rv + (b + 1) * nt);
        }
        let mut h = g.gather_rows(both, &order)?;
        for block in blocks {
            h = block.forward(g, p, h, self.cfg.heads, groups)?;
        }
        let picks: Vec<usize> = (0..groups).flat_map(|b| (0..nt).map(move |j| b * (nv + nt) + nv + j)).collect();
        let h = g.gather_rows(h, &picks)?;
        self.decoder.head.forward(g, p, h)
    }

    /// Cross-attention decoder. Returns the predictions and every layer's
    /// cross-attention output.
    pub fn decode_cross_attn(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        z_v: Var,
        pos_v: Var,
        pos_t: Var,
        groups: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let DecoderBlocks::CrossAttention(blocks) = &self.decoder.blocks else {
            return Err(Error::contract("decode_cross_attn called on a self-attention decoder"));
        };
        let latents = self.visible_stream(g, p, z_v)?;
        let mut q = if self.cfg.visual_cues {
            init_mask_tokens(g, p.var(self.decoder.mask_token), pos_t, pos_v, latents, groups)?
        } else {
            g.add_row(pos_t, p.var(self.decoder.mask_token))?
        };
        let mem = g.add(latents, pos_v)?;
        let mut cross = Vec::with_capacity(blocks.len());
        for block in blocks {
            let (next, c) = block.forward(g, p, q, mem, self.cfg.heads, groups)?;
            q = next;
            cross.push(c);
        }
        Ok((self.decoder.head.forward(g, p, q)?, cross))
    }

    pub fn decode(&self, g: &mut Graph<T>, p: &Binding, z_v: Var, pos_v: Var, pos_t: Var, groups: usize) -> Result<(Var, Vec<Var>)> {
        match self.cfg.decoder_kind {
            DecoderKind::SelfAttention => Ok((self.decode_self_attn(g, p, z_v, pos_v, pos_t, groups)?, Vec::new())),
            DecoderKind::CrossAttention => self.decode_cross_attn(g, p, z_v, pos_v, pos_t, groups),
        }
    }

    /// Online encode of the visible rows, target encode of the target rows,
    /// then decode.
    pub fn forward(&self, g: &mut Graph<T>, target: &TargetEncoderState<T>, batch: &Batch<T>) -> Result<Forward> {
        let params = self.params.bind(g, true);
        let xv = g.constant(batch.visible.clone());
        let pos_v = g.constant(batch.pos_v.clone());
        let pos_t = g.constant(batch.pos_t.clone());
        let z_v = self.encode(g, &params, xv, pos_v, batch.groups, self.cfg.depth)?;
        let z_t = self.target_encode(g, target, &params, &batch.target, &batch.pos_t, batch.groups)?;
        let (z_hat, cross) = self.decode(g, &params, z_v, pos_v, pos_t, batch.groups)?;
        Ok(Forward {
            z_v,
            z_hat,
            z_t,
            cross,
            params,
        })
    }

    /// Full-depth latents of every patch, no tape kept.
    pub fn encode_features(&self, patches: &Tensor<T>, pos: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.encoder_params().bind(&mut g, false);
        let x = g.constant(patches.clone());
        let pv = g.constant(pos.clone());
        let z = self.encode(&mut g, &p, x, pv, groups, self.cfg.depth)?;
        Ok(g.value(z).clone())
    }
}

/// Visual-cue mask tokens `m + p_t + softmax_V(P_T P_V^T / sqrt(d)) Z_V`,
/// per image.
pub fn init_mask_tokens<T: Element>(g: &mut Graph<T>, m: Var, pos_t: Var, pos_v: Var, z_v: Var, groups: usize) -> Result<Var> {
    if g.shape(pos_v)[0] == 0 || g.shape(z_v)[0] == 0 {
        return Err(Error::config("visual cues need at least one visible patch"));
    }
    let blend = g.attention(pos_t, pos_v, z_v, 1, groups)?;
    let base = g.add_row(pos_t, m)?;
    g.add(base, blend)
}

/// Blend weights used by [`init_mask_tokens`] for one image: rows index
/// targets, columns visible patches.
pub fn visual_cue_weights<T: Element>(pos_t: &Tensor<T>, pos_v: &Tensor<T>) -> Result<Tensor<T>> {
    let (nv, d) = pos_v.dims2("visual_cue_weights")?;
    if nv == 0 {
        return Err(Error::config("visual cues need at least one visible patch"));
    }
    let s = kernels::matmul(pos_t, pos_v, true)?.map(|v| v * T::lit(1.0 / (d as f64).sqrt()));
    kernels::softmax(&s, 1)
}
