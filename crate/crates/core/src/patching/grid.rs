use rand::Rng;

use super::ImageTensor;
use crate::error::{Error, Result};

/// Pixel normalisation applied when patches become model input.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Grid cell coordinate `(row, col)`.
pub type GridPos = (usize, usize);

/// Patches of one image plus their grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `L x (P*P*C)` flattened patches, row-major inside each patch with
    /// interleaved channels.
    pub patches: Vec<f32>,
    pub positions: Vec<GridPos>,
    /// Pixel coordinate of every patch's top-left corner.
    pub origins: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub gap: usize,
    pub channels: usize,
    pub grid: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let w = self.patch_dim();
        &self.patches[i * w..(i + 1) * w]
    }

    /// Appends patch `i`, normalised, to a row buffer.
    pub fn push_normalized(&self, i: usize, out: &mut Vec<f32>) {
        out.extend(self.patch(i).iter().map(|&v| (v - PIXEL_MEAN) / PIXEL_STD));
    }

    /// Row-major cell index of every patch.
    pub fn cell_indices(&self) -> Vec<usize> {
        self.positions.iter().map(|&(r, c)| r * self.grid + c).collect()
    }

    /// Reassembles a contiguous grid into the image it came from.
    pub fn tile(&self) -> Result<ImageTensor> {
        if self.gap != 0 {
            return Err(Error::contract("only contiguous grids tile back into an image"));
        }
        let (p, c) = (self.patch_size, self.channels);
        let side = self.grid * p;
        let mut values = vec![0.0f32; side * side * c];
        for (i, &(top, left)) in self.origins.iter().enumerate() {
            let src = self.patch(i);
            for y in 0..p {
                let dst = ((top + y) * side + left) * c;
                values[dst..dst + p * c].copy_from_slice(&src[y * p * c..(y + 1) * p * c]);
            }
        }
        ImageTensor::new(side, c, values)
    }
}

fn copy_patch(img: &ImageTensor, top: usize, left: usize, p: usize, out: &mut Vec<f32>) {
    let (s, c) = (img.side(), img.channels());
    for y in 0..p {
        let start = ((top + y) * s + left) * c;
        out.extend_from_slice(&img.values()[start..start + p * c]);
    }
}

/// Regular grid of `P x P` patches in row-major order.
pub fn extract_contiguous_grid(img: &ImageTensor, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 || img.side() % patch_size != 0 {
        return Err(Error::config(format!(
            "image side {} is not divisible by patch size {patch_size}",
            img.side()
        )));
    }
    let grid = img.side() / patch_size;
    let mut patches = Vec::with_capacity(img.values().len());
    let mut positions = Vec::with_capacity(grid * grid);
    let mut origins = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let (top, left) = (r * patch_size, c * patch_size);
            copy_patch(img, top, left, patch_size, &mut patches);
            positions.push((r, c));
            origins.push((top, left));
        }
    }
    Ok(PatchSet {
        patches,
        positions,
        origins,
        patch_size,
        gap: 0,
        channels: img.channels(),
        grid,
    })
}

/// Stochastic non-contiguous grid: the image is split into `(P+G) x (P+G)`
/// cells and one `P x P` patch is cut from each cell at a uniformly random
/// offset in `{0..=G}` per axis. Positions are cell coordinates.
pub fn extract_noncontiguous_grid(img: &ImageTensor, patch_size: usize, gap: usize, rng: &mut impl Rng) -> Result<PatchSet> {
    let cell = patch_size + gap;
    if patch_size == 0 || img.side() % cell != 0 {
        return Err(Error::config(format!(
            "image side {} is not divisible by patch size + gap = {cell}",
            img.side()
        )));
    }
    if gap == 0 {
        return extract_contiguous_grid(img, patch_size);
    }
    let grid = img.side() / cell;
    let mut patches = Vec::with_capacity(grid * grid * patch_size * patch_size * img.channels());
    let mut positions = Vec::with_capacity(grid * grid);
    let mut origins = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let dy = rng.random_range(0..=gap);
            let dx = rng.random_range(0..=gap);
            let (top, left) = (r * cell + dy, c * cell + dx);
            copy_patch(img, top, left, patch_size, &mut patches);
            positions.push((r, c));
            origins.push((top, left));
        }
    }
    Ok(PatchSet {
        patches,
        positions,
        origins,
        patch_size,
        gap,
        channels: img.channels(),
        grid,
    })
}

/// Deterministic variant of the gap grid: every patch sits at offset
/// `G/2` inside its cell. Used to encode whole images for evaluation.
pub fn extract_centered_grid(img: &ImageTensor, patch_size: usize, gap: usize) -> Result<PatchSet> {
    let cell = patch_size + gap;
    if patch_size == 0 || img.side() % cell != 0 {
        return Err(Error::config(format!(
            "image side {} is not divisible by patch size + gap = {cell}",
            img.side()
        )));
    }
    let grid = img.side() / cell;
    let mut patches = Vec::with_capacity(grid * grid * patch_size * patch_size * img.channels());
    let mut positions = Vec::with_capacity(grid * grid);
    let mut origins = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let (top, left) = (r * cell + gap / 2, c * cell + gap / 2);
            copy_patch(img, top, left, patch_size, &mut patches);
            positions.push((r, c));
            origins.push((top, left));
        }
    }
    Ok(PatchSet {
        patches,
        positions,
        origins,
        patch_size,
        gap,
        channels: img.channels(),
        grid,
    })
}
