use super::GridPos;
use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tensor};

/// Fixed 2-D sine-cosine embedding.
///
/// The first half of each row encodes the grid row, the second half the
/// grid column; each half is `[sin(pos * w_k) ..., cos(pos * w_k) ...]` with
/// `w_k = 10000^(-k / (dim/4))`.
pub fn sincos_pos_embed<T: Element>(positions: &[GridPos], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::InvalidKey {
            key: "dim".into(),
            reason: format!("sin-cos embedding width must be a positive multiple of 4, got {dim}"),
        });
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &(r, c) in positions {
        for pos in [r as f64, c as f64] {
            data.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
            data.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

/// Embeddings of every cell of a `grid x grid` layout, row-major.
pub fn grid_pos_table<T: Element>(grid: usize, dim: usize) -> Result<Tensor<T>> {
    let pos: Vec<GridPos> = (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).collect();
    sincos_pos_embed(&pos, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_zero_sine_unit_cosine() {
        let e = sincos_pos_embed::<f64>(&[(0, 0)], 16).unwrap();
        let row = e.row(0);
        for half in 0..2 {
            let base = half * 8;
            assert!(row[base..base + 4].iter().all(|&v| v == 0.0));
            assert!(row[base + 4..base + 8].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn deterministic_and_distinct_on_14x14() {
        let pos: Vec<GridPos> = (0..14).flat_map(|r| (0..14).map(move |c| (r, c))).collect();
        let a = sincos_pos_embed::<f64>(&pos, 64).unwrap();
        let b = sincos_pos_embed::<f64>(&pos, 64).unwrap();
        assert_eq!(a, b);
        let mut min_d = f64::INFINITY;
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                let d: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                min_d = min_d.min(d.sqrt());
            }
        }
        assert!(min_d > 0.0, "{min_d}");
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        assert!(sincos_pos_embed::<f32>(&[(0, 0)], 6).is_err());
    }
}
