//! Pooling, nearest neighbour, probe, collapse similarity, segmentation.

use lmim::eval::*;
use lmim::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn bank(rows: &[Vec<f64>], labels: &[usize]) -> FeatureBank {
    let d = rows[0].len();
    let data = rows.concat();
    FeatureBank::new(Tensor::new(vec![rows.len(), d], data).unwrap(), labels.to_vec(), Pooling::Mean).unwrap()
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

#[test]
fn nn_hand_cases_and_lowest_index_ties() {
    let train = bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]], &[0, 1, 2]);
    let test = bank(&[vec![3.0, 0.1], vec![0.1, 5.0]], &[0, 1]);
    // rows 1 and 2 of train are the same direction; the tie goes to row 1
    assert_eq!(nn_accuracy(&train, &test).unwrap(), 1.0);
    let test = bank(&[vec![0.0, 1.0]], &[2]);
    assert_eq!(nn_accuracy(&train, &test).unwrap(), 0.0);
}

#[test]
fn nn_ignores_per_vector_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tr = gaussian(60, 5, &mut rng);
    let te = gaussian(30, 5, &mut rng);
    let lt: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let le: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let base = nn_accuracy(&bank(&tr, &lt), &bank(&te, &le)).unwrap();
    let scaled: Vec<Vec<f64>> = tr
        .iter()
        .map(|r| {
            let s = rng.random_range(0.1..10.0);
            r.iter().map(|v| v * s).collect()
        })
        .collect();
    assert_eq!(nn_accuracy(&bank(&scaled, &lt), &bank(&te, &le)).unwrap(), base);
}

#[test]
fn random_labels_give_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tr = gaussian(2000, 16, &mut rng);
    let te = gaussian(1000, 16, &mut rng);
    let lt: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let le: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let acc = nn_accuracy(&bank(&tr, &lt), &bank(&te, &le)).unwrap();
    assert!((acc - 0.1).abs() <= 0.05, "{acc}");
}

#[test]
fn pairwise_cosine_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = gaussian(9, 4, &mut rng);
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..9 {
        for j in 0..9 {
            if i != j {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let na: f64 = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = rows[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                s += dot / (na * nb);
                n += 1;
            }
        }
    }
    let t = Tensor::new(vec![9, 4], rows.concat()).unwrap();
    assert!((pairwise_mean_cosine(&t).unwrap() - s / n as f64).abs() < 1e-12);
    let same = Tensor::new(vec![3, 2], vec![1.0, 2.0, 2.0, 4.0, 0.5, 1.0]).unwrap();
    assert!((pairwise_mean_cosine(&same).unwrap() - 1.0).abs() < 1e-12);
    let ortho = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
    assert_eq!(pairwise_mean_cosine(&ortho).unwrap(), 0.0);
    assert!(pairwise_mean_cosine(&Tensor::<f64>::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap()).is_err());
}

#[test]
fn probe_separates_separable_data_deterministically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = gaussian(3, 6, &mut rng);
    let mk = |n: usize, rng: &mut ChaCha8Rng| {
        let noise = gaussian(n, 6, rng);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| centers[i % 3].iter().zip(&noise[i]).map(|(c, e)| 4.0 * c + 0.3 * e).collect())
            .collect();
        bank(&rows, &(0..n).map(|i| i % 3).collect::<Vec<_>>())
    };
    let (tr, te) = (mk(90, &mut rng), mk(30, &mut rng));
    let cfg = ProbeConfig {
        epochs: 30,
        ..ProbeConfig::default()
    };
    let a = linear_probe(&tr, &te, &cfg).unwrap();
    assert_eq!(a, 1.0);
    assert_eq!(linear_probe(&tr, &te, &cfg).unwrap(), a);
    let one = bank(&[vec![1.0], vec![2.0]], &[0, 0]);
    assert!(linear_probe(&one, &one, &cfg).is_err());
}

#[test]
fn bank_rejects_bad_input() {
    let t = Tensor::new(vec![2, 1], vec![1.0, f64::NAN]).unwrap();
    assert!(FeatureBank::new(t, vec![0, 1], Pooling::Mean).is_err());
    let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
    assert!(FeatureBank::new(t, vec![0], Pooling::Mean).is_err());
}

#[test]
fn pooling_degenerate_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::new(vec![7, 3], gaussian(7, 3, &mut rng).concat()).unwrap();
    assert_eq!(pool_features(&z, Pooling::TopK(7)).unwrap(), pool_features(&z, Pooling::Mean).unwrap());
    let max: Vec<f64> = (0..3)
        .map(|j| (0..7).map(|i| z.data()[i * 3 + j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    assert_eq!(pool_features(&z, Pooling::TopK(1)).unwrap(), max);
}

proptest! {
    #[test]
    fn topk_is_monotone(vals in prop::collection::vec(-5.0f64..5.0, 12), k in 1usize..=6, i in 0usize..12, bump in 0.0f64..3.0) {
        let z = Tensor::new(vec![6, 2], vals.clone()).unwrap();
        let mut raised = vals;
        raised[i] += bump;
        let z2 = Tensor::new(vec![6, 2], raised).unwrap();
        let (a, b) = (pool_features(&z, Pooling::TopK(k)).unwrap(), pool_features(&z2, Pooling::TopK(k)).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
        }
    }
}

/// Pair-counting form of the adjusted Rand index.
fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    2.0 * (ss * dd - sd * ds) / ((ss + sd) * (sd + dd) + (ss + ds) * (ds + dd))
}

proptest! {
    #[test]
    fn ari_matches_pair_counting(a in prop::collection::vec(0usize..3, 20), b in prop::collection::vec(0usize..4, 20)) {
        let fast = adjusted_rand_index(&a, &b).unwrap();
        let slow = ari_pairs(&a, &b);
        if slow.is_finite() {
            prop_assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }
    }
}

#[test]
fn ari_is_label_permutation_invariant() {
    let a = [0, 0, 1, 1, 2, 2, 2];
    let b = [2, 2, 0, 0, 1, 1, 1];
    assert_eq!(adjusted_rand_index(&a, &b).unwrap(), 1.0);
    assert!(adjusted_rand_index(&a, &[0, 1]).is_err());
}

fn two_blobs(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<usize>) {
    let truth: Vec<usize> = (0..16).map(|i| (i % 5 < 2) as usize).collect();
    let data: Vec<f64> = truth
        .iter()
        .flat_map(|&t| {
            let base = if t == 1 { [1.0, 0.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0, 0.0] };
            base.into_iter().map(|b| b + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()
        })
        .collect();
    (Tensor::new(vec![16, 4], data).unwrap(), truth)
}

#[test]
fn segmentation_recovers_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (z, truth) = two_blobs(&mut rng);
    let seg = segment_image(&z, 2).unwrap();
    assert_eq!(seg.labels.len(), 16);
    assert!(seg.labels.iter().all(|&l| l < 2));
    assert_eq!(seg.labels[0], 0);
    assert_eq!(adjusted_rand_index(&seg.labels, &truth).unwrap(), 1.0);
    assert_eq!(segment_image(&z, 2).unwrap(), seg);
    assert!(segment_image(&z, 1).is_err());
    assert!(segment_image(&z, 17).is_err());
}

#[test]
fn segmentation_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 6;
    let z = Tensor::new(vec![20, d], gaussian(20, d, &mut rng).concat()).unwrap();
    // random orthogonal matrix by Gram-Schmidt
    let mut q: Vec<Vec<f64>> = Vec::new();
    for v in gaussian(d, d, &mut rng) {
        let mut u = v.clone();
        for w in &q {
            let p: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(w).for_each(|(x, y)| *x -= p * y);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(u.into_iter().map(|x| x / n).collect());
    }
    let q = Tensor::new(vec![d, d], q.concat()).unwrap();
    let rotated = z.matmul(&q).unwrap();
    for k in [2, 3, 5] {
        assert_eq!(segment_image(&z, k).unwrap(), segment_image(&rotated, k).unwrap());
    }
}
