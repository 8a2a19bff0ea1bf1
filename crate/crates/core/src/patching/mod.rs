//! Images to patch sequences: grids, visible/target splits and position
//! embeddings.

mod grid;
mod image;
mod mask;
mod posembed;

pub use grid::{extract_centered_grid, extract_contiguous_grid, extract_noncontiguous_grid, GridPos, PatchSet, PIXEL_MEAN, PIXEL_STD};
pub use image::{augment, ImageTensor};
pub use mask::{sample_mask, split_sizes, target_count, MaskPlan};
pub use posembed::{grid_pos_table, sincos_pos_embed};
