//! Latent reconstruction objectives and the inter-patch similarity
//! regularizer. Everything operates on packed batches: `groups` images, each
//! owning an equal, contiguous run of rows, and never mixes rows across
//! images.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L2,
    L1,
    Huber,
    PatchDisc,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::L2, LossKind::L1, LossKind::Huber, LossKind::PatchDisc];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
            LossKind::Huber => "huber",
            LossKind::PatchDisc => "patch_disc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub delta: f64,
    pub tau: f64,
    pub lambda_r: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    /// Use `exp(+sim/tau)` in the patch-discrimination softmax instead of
    /// the default `exp(-sim/tau)`.
    pub infonce_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::PatchDisc,
            delta: 1.0,
            tau: 0.1,
            lambda_r: 0.1,
            gamma_start: 0.75,
            gamma_end: 0.25,
            infonce_sign: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::InvalidKey {
                key: key.into(),
                reason,
            })
        };
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.delta > 0.0) {
            return bad("huber_delta", format!("must be positive, got {}", self.delta));
        }
        if !(self.lambda_r >= 0.0) {
            return bad("lambda_r", format!("must be non-negative, got {}", self.lambda_r));
        }
        for (key, v) in [("gamma_start", self.gamma_start), ("gamma_end", self.gamma_end)] {
            if !(-1.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [-1, 1], got {v}"));
            }
        }
        Ok(())
    }
}

fn group_rows<T: Element>(g: &Graph<T>, x: Var, groups: usize, op: &'static str) -> Result<usize> {
    let (r, _) = g.value(x).dims2(op)?;
    if groups == 0 || r % groups != 0 {
        return Err(Error::shape(op, g.shape(x), &[groups]));
    }
    Ok(r / groups)
}

/// Mean over target rows of the per-row L2 (squared), L1 or Huber distance.
pub fn recon_direct<T: Element>(g: &mut Graph<T>, z_hat: Var, z: Var, kind: LossKind, delta: f64) -> Result<Var> {
    if g.shape(z_hat) != g.shape(z) {
        return Err(Error::shape("recon_direct", g.shape(z_hat), g.shape(z)));
    }
    let diff = g.sub(z_hat, z)?;
    let per_row = match kind {
        LossKind::L2 => {
            let sq = g.square(diff)?;
            g.sum_rows(sq)?
        }
        LossKind::L1 => {
            let ab = g.abs(diff)?;
            g.sum_rows(ab)?
        }
        LossKind::Huber => {
            let sq = g.square(diff)?;
            let l2 = g.sum_rows(sq)?;
            let ab = g.abs(diff)?;
            let l1 = g.sum_rows(ab)?;
            let quad = g.scale(l2, T::lit(0.5))?;
            let lin = g.scale(l1, T::lit(delta))?;
            let lin = g.add_scalar(lin, T::lit(-0.5 * delta * delta))?;
            let dd = T::lit(delta * delta);
            let mask = g.value(l2).data().iter().map(|&v| v < dd).collect();
            g.select(mask, quad, lin)?
        }
        LossKind::PatchDisc => {
            return Err(Error::contract("recon_direct handles l2, l1 and huber only"));
        }
    };
    g.mean_all(per_row)
}

/// Per-image patch discrimination: each prediction is scored against every
/// target latent of its own image, averaged over targets then images.
pub fn patch_disc<T: Element>(g: &mut Graph<T>, z_hat: Var, z: Var, tau: f64, groups: usize, infonce_sign: bool) -> Result<Var> {
    if g.shape(z_hat) != g.shape(z) {
        return Err(Error::shape("patch_disc", g.shape(z_hat), g.shape(z)));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidKey {
            key: "tau".into(),
            reason: format!("must be positive, got {tau}"),
        });
    }
    let n = group_rows(g, z_hat, groups, "patch_disc")?;
    if n < 2 {
        return Err(Error::config(format!("patch discrimination needs at least 2 targets per image, got {n}")));
    }
    let sign = if infonce_sign { 1.0 } else { -1.0 };
    let zh = g.normalize_rows(z_hat)?;
    let zt = g.normalize_rows(z)?;
    let mut total: Option<Var> = None;
    for b in 0..groups {
        let a = g.slice_rows(zh, b * n, (b + 1) * n)?;
        let t = g.slice_rows(zt, b * n, (b + 1) * n)?;
        let sim = g.matmul_nt(a, t)?;
        let logits = g.scale(sim, T::lit(sign / tau))?;
        let ls = g.log_softmax(logits)?;
        let pos = g.diag(ls)?;
        let term = g.mean_all(pos)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    g.scale(total.expect("groups > 0"), T::lit(-tau / groups as f64))
}

/// Mean cosine similarity over ordered pairs `i != j` of each image's rows,
/// one value per image summed into a `[groups]`-long list of scalars.
fn mean_pair_cos_groups<T: Element>(g: &mut Graph<T>, x: Var, groups: usize, op: &'static str) -> Result<Vec<Var>> {
    let n = group_rows(g, x, groups, op)?;
    if n < 2 {
        return Err(Error::config(format!("{op} needs at least 2 rows per image, got {n}")));
    }
    let xn = g.normalize_rows(x)?;
    let ones = g.constant(Tensor::ones(vec![1, n]));
    let nf = n as f64;
    let mut out = Vec::with_capacity(groups);
    for b in 0..groups {
        let rows = g.slice_rows(xn, b * n, (b + 1) * n)?;
        // sum_{i,j} x_i . x_j = |sum_i x_i|^2, and the n diagonal terms are 1
        let s = g.matmul(ones, rows)?;
        let sq = g.square(s)?;
        let ss = g.sum_all(sq)?;
        let scaled = g.scale(ss, T::lit(1.0 / (nf * (nf - 1.0))))?;
        out.push(g.add_scalar(scaled, T::lit(-1.0 / (nf - 1.0)))?);
    }
    Ok(out)
}

/// Mean pairwise cosine of the rows of each image, averaged over images.
pub fn mean_pair_cos<T: Element>(g: &mut Graph<T>, x: Var, groups: usize) -> Result<Var> {
    let per = mean_pair_cos_groups(g, x, groups, "mean_pair_cos")?;
    let mut acc = per[0];
    for &v in &per[1..] {
        acc = g.add(acc, v)?;
    }
    g.scale(acc, T::lit(1.0 / groups as f64))
}

/// `(γ - meanPairCos(Ẑ_T))² + (γ - meanPairCos(Z_V))²`, averaged over
/// images.
pub fn sim_regularizer<T: Element>(g: &mut Graph<T>, z_v: Var, z_hat: Var, gamma: f64, groups: usize) -> Result<Var> {
    let a = mean_pair_cos_groups(g, z_hat, groups, "sim_regularizer")?;
    let b = mean_pair_cos_groups(g, z_v, groups, "sim_regularizer")?;
    let mut acc: Option<Var> = None;
    for v in a.into_iter().chain(b) {
        let dev = g.add_scalar(v, T::lit(-gamma))?;
        let sq = g.square(dev)?;
        acc = Some(match acc {
            Some(s) => g.add(s, sq)?,
            None => sq,
        });
    }
    g.scale(acc.expect("non-empty"), T::lit(1.0 / groups as f64))
}

/// Cosine schedule from `start` at step 0 to `end` at `total`.
pub fn gamma_schedule(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let t = step.min(total) as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * t).cos())
}

/// Handles to the parts of the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub reg: Option<Var>,
    pub gamma: f64,
}

/// Reconstruction term plus `λ_R` times the similarity regularizer at the
/// scheduled `γ`. The regularizer is skipped when `λ_R = 0`.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    z_hat: Var,
    z_t: Var,
    z_v: Var,
    cfg: &LossConfig,
    step: usize,
    total_steps: usize,
    groups: usize,
) -> Result<LossTerms> {
    cfg.validate()?;
    let recon = match cfg.kind {
        LossKind::PatchDisc => patch_disc(g, z_hat, z_t, cfg.tau, groups, cfg.infonce_sign)?,
        kind => recon_direct(g, z_hat, z_t, kind, cfg.delta)?,
    };
    let gamma = gamma_schedule(step, total_steps, cfg.gamma_start, cfg.gamma_end);
    if cfg.lambda_r == 0.0 {
        return Ok(LossTerms {
            total: recon,
            recon,
            reg: None,
            gamma,
        });
    }
    let reg = sim_regularizer(g, z_v, z_hat, gamma, groups)?;
    let weighted = g.scale(reg, T::lit(cfg.lambda_r))?;
    Ok(LossTerms {
        total: g.add(recon, weighted)?,
        recon,
        reg: Some(reg),
        gamma,
    })
}
