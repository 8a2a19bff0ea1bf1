use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Disjoint visible/target split of `0..L`. Both sets are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub target: Vec<usize>,
    pub ratio_permille: u32,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.visible.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_permille as f64 / 1000.0
    }
}

/// Number of masked (target) locations: `round(ratio * L)`, halves rounded up.
pub fn target_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64 + 0.5).floor() as usize
}

/// Visible/target counts for a mask ratio, validating that neither set is
/// empty.
pub fn split_sizes(len: usize, ratio: f64) -> Result<(usize, usize)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidKey {
            key: "mask_ratio".into(),
            reason: format!("must lie strictly between 0 and 1, got {ratio}"),
        });
    }
    if len < 2 {
        return Err(Error::config(format!("need at least 2 patches to mask, got {len}")));
    }
    let t = target_count(len, ratio);
    if t == 0 || t >= len {
        return Err(Error::InvalidKey {
            key: "mask_ratio".into(),
            reason: format!("ratio {ratio} leaves an empty visible or target set for {len} patches"),
        });
    }
    Ok((len - t, t))
}

/// Uniformly random partition of `0..len` into visible and target sets.
pub fn sample_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    let (_, t) = split_sizes(len, ratio)?;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut target = order[..t].to_vec();
    let mut visible = order[t..].to_vec();
    target.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        visible,
        target,
        ratio_permille: (ratio * 1000.0).round() as u32,
    })
}
