//! Representation diagnostics: pooling, nearest-neighbour accuracy, linear
//! probe, collapse similarity and per-image segmentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndtensor::{Element, Tensor};
use crate::patching::{extract_centered_grid, grid_pos_table, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    TopK(usize),
}

/// Pooled per-image features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub pooling: Pooling,
}

impl FeatureBank {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, pooling: Pooling) -> Result<Self> {
        let (n, _) = features.dims2("feature_bank")?;
        if n != labels.len() {
            return Err(Error::config(format!("{n} feature rows but {} labels", labels.len())));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "feature_bank" });
        }
        Ok(FeatureBank { features, labels, pooling })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Collapses `[L, d]` patch latents to one `d`-vector. Top-k averages the k
/// largest values of every dimension independently.
pub fn pool_features<T: Element>(z: &Tensor<T>, method: Pooling) -> Result<Vec<f64>> {
    let (l, d) = z.dims2("pool_features")?;
    if l == 0 {
        return Err(Error::config("cannot pool an empty patch set"));
    }
    let k = match method {
        Pooling::Mean => l,
        Pooling::TopK(k) if k >= 1 && k <= l => k,
        Pooling::TopK(k) => return Err(Error::config(format!("top-k pooling needs 1 <= k <= {l}, got {k}"))),
    };
    let mut col = vec![0.0f64; l];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        for (i, c) in col.iter_mut().enumerate() {
            *c = z.data()[i * d + j].as_f64();
        }
        if k < l {
            col.sort_unstable_by(|a, b| b.total_cmp(a));
        }
        out.push(col[..k].iter().sum::<f64>() / k as f64);
    }
    Ok(out)
}

fn unit_rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = x.shape()[1];
    x.data()
        .chunks(d.max(1))
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of test rows whose cosine nearest neighbour in `train` shares
/// their label. Ties go to the lowest train index.
pub fn nn_accuracy(train: &FeatureBank, test: &FeatureBank) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("nearest-neighbour evaluation needs non-empty banks"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("nn_accuracy", train.features.shape(), test.features.shape()));
    }
    let (a, b) = (unit_rows(&train.features), unit_rows(&test.features));
    let mut hits = 0usize;
    for (q, &label) in b.iter().zip(&test.labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, r) in a.iter().enumerate() {
            let s = dot(q, r);
            if s > best.0 {
                best = (s, i);
            }
        }
        hits += (train.labels[best.1] == label) as usize;
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Mean cosine similarity over unordered pairs of rows.
pub fn pairwise_mean_cosine(features: &Tensor<f64>) -> Result<f64> {
    let (n, _) = features.dims2("pairwise_mean_cosine")?;
    if n < 2 {
        return Err(Error::config(format!("pairwise cosine needs at least 2 rows, got {n}")));
    }
    let rows = unit_rows(features);
    if rows.iter().any(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateVector { op: "pairwise_mean_cosine" });
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dot(&rows[i], &rows[j]);
        }
    }
    Ok(s / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardised frozen features, trained
/// with minibatch SGD plus momentum; returns top-1 test accuracy.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    let classes = train.labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut l = train.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::config("linear probe needs at least two classes"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_probe", train.features.shape(), test.features.shape()));
    }
    let (n, d) = (train.len(), train.dim());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for r in train.features.data().chunks(d) {
        r.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    for r in train.features.data().chunks(d) {
        r.iter().zip(&mean).zip(&mut std).for_each(|((v, m), s)| *s += (v - m).powi(2) / n as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let standardise = |bank: &FeatureBank| -> Vec<Vec<f64>> {
        bank.features
            .data()
            .chunks(d)
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    let (xtr, xte) = (standardise(train), standardise(test));

    let mut w = vec![0.0f64; (d + 1) * classes];
    let mut vel = vec![0.0f64; w.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0; classes];
    let logits_of = |w: &[f64], x: &[f64], out: &mut [f64]| {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
            *o = row[d] + dot(&row[..d], x);
        }
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0f64; w.len()];
            for &i in chunk {
                logits_of(&w, &xtr[i], &mut logits);
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for c in 0..classes {
                    let p = (logits[c] - mx).exp() / z - (train.labels[i] == c) as u8 as f64;
                    let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    row[..d].iter_mut().zip(&xtr[i]).for_each(|(g, x)| *g += p * x);
                    row[d] += p;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((wi, vi), gi) in w.iter_mut().zip(&mut vel).zip(&grad) {
                *vi = cfg.momentum * *vi + gi * scale;
                *wi -= cfg.lr * *vi;
            }
        }
    }
    let mut hits = 0usize;
    for (x, &label) in xte.iter().zip(&test.labels) {
        logits_of(&w, x, &mut logits);
        let mut best = 0;
        for c in 1..classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        hits += (best == label) as usize;
    }
    Ok(hits as f64 / test.len().max(1) as f64)
}

/// Per-patch cluster labels on the encoder grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub labels: Vec<usize>,
    pub clusters: usize,
}

/// Average-linkage agglomerative clustering under cosine distance, stopped
/// at `clusters` groups. Among equally close pairs the one with the smallest
/// cluster ids merges first; labels are numbered by first appearance.
pub fn segment_image<T: Element>(z: &Tensor<T>, clusters: usize) -> Result<SegmentationMap> {
    let (l, _) = z.dims2("segment_image")?;
    if clusters < 2 || clusters > l {
        return Err(Error::config(format!("cluster count must lie in 2..={l}, got {clusters}")));
    }
    let rows = unit_rows(&z.cast::<f64>());
    // distances between active clusters, indexed by their lowest member
    let mut dist = vec![vec![0.0f64; l]; l];
    for i in 0..l {
        for j in i + 1..l {
            let d = 1.0 - dot(&rows[i], &rows[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; l];
    let mut owner: Vec<usize> = (0..l).collect();
    let mut active: Vec<usize> = (0..l).collect();
    while active.len() > clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                if dist[a][b] < best.0 {
                    best = (dist[a][b], a, b);
                }
            }
        }
        let (_, a, b) = best;
        // a < b because `active` stays sorted
        for &c in &active {
            if c != a && c != b {
                let merged = (dist[a][c] * size[a] as f64 + dist[b][c] * size[b] as f64) / (size[a] + size[b]) as f64;
                dist[a][c] = merged;
                dist[c][a] = merged;
            }
        }
        size[a] += size[b];
        owner.iter_mut().filter(|o| **o == b).for_each(|o| *o = a);
        active.retain(|&c| c != b);
    }
    let mut relabel = vec![usize::MAX; l];
    let mut next = 0;
    let labels = owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect();
    Ok(SegmentationMap { labels, clusters })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Encodes whole images on the training canvas with centred patches.
/// Returns one `[L, d]` latent matrix per image.
pub fn encode_images(model: &Model<f32>, images: &[ImageTensor], grid: usize, gap: usize) -> Result<Vec<Tensor<f32>>> {
    let p = model.cfg.patch_size;
    let side = grid * (p + gap);
    let d = model.cfg.dim;
    let table = grid_pos_table::<f32>(grid, d)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for img in chunk {
            let ps = extract_centered_grid(&img.resize(side), p, gap)?;
            for i in 0..ps.len() {
                ps.push_normalized(i, &mut rows);
            }
            cells.extend(ps.cell_indices());
        }
        let l = grid * grid;
        let x = Tensor::new(vec![chunk.len() * l, model.cfg.patch_dim()], rows)?;
        let pos = table.gather_rows(&cells)?;
        let z = model.encode_features(&x, &pos, chunk.len())?;
        for b in 0..chunk.len() {
            out.push(Tensor::new(vec![l, d], z.data()[b * l * d..(b + 1) * l * d].to_vec())?);
        }
    }
    Ok(out)
}

/// Pooled feature bank of `images`.
pub fn feature_bank(latents: &[Tensor<f32>], labels: &[usize], pooling: Pooling) -> Result<FeatureBank> {
    let mut data = Vec::new();
    let mut d = 0;
    for z in latents {
        let v = pool_features(z, pooling)?;
        d = v.len();
        data.extend(v);
    }
    FeatureBank::new(Tensor::new(vec![latents.len(), d], data)?, labels.to_vec(), pooling)
}

/// Majority foreground label of every centred patch of a 1-channel mask.
pub fn patch_mask_labels(mask: &ImageTensor, patch: usize, grid: usize, gap: usize) -> Result<Vec<usize>> {
    let side = grid * (patch + gap);
    let ps = extract_centered_grid(&mask.resize(side), patch, gap)?;
    Ok((0..ps.len())
        .map(|i| {
            let p = ps.patch(i);
            (p.iter().sum::<f32>() / p.len() as f32 >= 0.5) as usize
        })
        .collect())
}

/// Renders a segmentation as a grey-level image, one `scale x scale` block
/// per patch, clusters spread evenly over `[0, 1]`.
pub fn label_image(map: &SegmentationMap, grid: usize, scale: usize) -> Result<ImageTensor> {
    if map.labels.len() != grid * grid {
        return Err(Error::shape("label_image", &[map.labels.len()], &[grid * grid]));
    }
    let side = grid * scale;
    let top = (map.clusters - 1).max(1) as f32;
    let values = (0..side * side)
        .map(|i| map.labels[(i / side / scale) * grid + (i % side) / scale] as f32 / top)
        .collect();
    ImageTensor::new(side, 1, values)
}

/// Segments every image and scores it against its mask. Returns the maps
/// and the mean adjusted Rand index when masks are available.
pub fn segment_images(
    model: &Model<f32>,
    images: &[ImageTensor],
    masks: Option<&[ImageTensor]>,
    grid: usize,
    gap: usize,
    clusters: usize,
) -> Result<(Vec<SegmentationMap>, Option<f64>)> {
    let latents = encode_images(model, images, grid, gap)?;
    let maps = latents.iter().map(|z| segment_image(z, clusters)).collect::<Result<Vec<_>>>()?;
    let ari = match masks {
        Some(masks) => {
            let mut total = 0.0;
            for (map, mask) in maps.iter().zip(masks) {
                let truth = patch_mask_labels(mask, model.cfg.patch_size, grid, gap)?;
                total += adjusted_rand_index(&map.labels, &truth)?;
            }
            Some(total / maps.len().max(1) as f64)
        }
        None => None,
    };
    Ok((maps, ari))
}
