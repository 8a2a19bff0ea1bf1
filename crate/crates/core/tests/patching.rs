use lmim::patching::{extract_contiguous_grid, extract_noncontiguous_grid, sample_mask, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn noise(side: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(side, 3, v).unwrap()
}

#[test]
fn offsets_are_uniform_per_axis() {
    // single 20x20 cell with P=16, G=4 so every draw yields one offset pair
    let img = noise(20, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rows = [0u32; 5];
    let mut cols = [0u32; 5];
    let draws = 10_000;
    for _ in 0..draws {
        let ps = extract_noncontiguous_grid(&img, 16, 4, &mut rng).unwrap();
        let (top, left) = ps.origins[0];
        rows[top] += 1;
        cols[left] += 1;
    }
    let expected = draws as f64 / 5.0;
    let chi2 = ChiSquared::new(4.0).unwrap();
    for counts in [rows, cols] {
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - chi2.cdf(stat);
        assert!(p > 0.01, "counts {counts:?}, chi2 {stat}, p {p}");
    }
}

#[test]
fn neighbour_gap_is_bounded() {
    let (p, g) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let ps = extract_noncontiguous_grid(&noise(80, seed), p, g, &mut rng).unwrap();
        for r in 0..ps.grid {
            for c in 0..ps.grid - 1 {
                let a = ps.origins[r * ps.grid + c];
                let b = ps.origins[r * ps.grid + c + 1];
                assert!((p..=p + 2 * g).contains(&(b.1 - a.1)));
                let a = ps.origins[c * ps.grid + r];
                let b = ps.origins[(c + 1) * ps.grid + r];
                assert!((p..=p + 2 * g).contains(&(b.0 - a.0)));
            }
        }
    }
}

#[test]
fn seeded_grids_and_masks_reproduce() {
    let img = noise(80, 3);
    let a = extract_noncontiguous_grid(&img, 8, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = extract_noncontiguous_grid(&img, 8, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    let m1 = sample_mask(a.len(), 0.9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m2 = sample_mask(b.len(), 0.9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn patch_contents_match_source_pixels() {
    let img = noise(80, 4);
    let ps = extract_noncontiguous_grid(&img, 8, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for i in [0, 17, 63] {
        let (top, left) = ps.origins[i];
        let patch = ps.patch(i);
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    assert_eq!(patch[(y * 8 + x) * 3 + ch], img.at(top + y, left + x, ch));
                }
            }
        }
    }
    assert_eq!(extract_contiguous_grid(&img, 8).unwrap().len(), 100);
}
