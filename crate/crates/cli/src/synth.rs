//! Synthetic benchmark generator: orthonormal class prototypes embedded in
//! noise, with text embeddings produced by a fixed linear map of the
//! prototypes so that video-text alignment is linearly learnable by
//! construction.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use ovtad_core::tensor::Tensor;
use ovtad_core::{FeatureSequence64, Segment64, Tensor64, TextEmbeddingSet64};

use crate::data::Dataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    /// Frames per video.
    pub frames: usize,
    /// Raw feature dimension.
    pub feature_dim: usize,
    /// Text embedding dimension (must equal the model width at train time).
    pub text_dim: usize,
    pub n_classes: usize,
    /// Inclusive range of actions per video.
    pub actions_per_video: [usize; 2],
    /// Inclusive action-length buckets in frames; short and long buckets land
    /// on different pyramid levels.
    pub length_buckets: Vec<[usize; 2]>,
    pub noise_std: f64,
    /// Noise added to the mapped text embeddings.
    pub text_noise_std: f64,
    pub text_map_seed: u64,
    pub frame_rate_hint: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 8,
            frames: 128,
            feature_dim: 16,
            text_dim: 32,
            n_classes: 4,
            actions_per_video: [3, 3],
            length_buckets: vec![[4, 8], [12, 24], [40, 80]],
            noise_std: 0.1,
            text_noise_std: 0.01,
            text_map_seed: 7,
            frame_rate_hint: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames == 0 || self.n_classes == 0 {
            bail!("synthetic spec: counts must be positive");
        }
        if self.n_classes > self.feature_dim {
            bail!(
                "synthetic spec: cannot draw {} orthonormal prototypes in dimension {}",
                self.n_classes,
                self.feature_dim
            );
        }
        if self.length_buckets.is_empty()
            || self.length_buckets.iter().any(|b| b[0] == 0 || b[0] > b[1])
        {
            bail!("synthetic spec: malformed length buckets");
        }
        let max_len = self.length_buckets.iter().map(|b| b[1]).max().unwrap();
        if max_len >= self.frames {
            bail!(
                "synthetic spec: longest bucket {max_len} does not fit into {} frames",
                self.frames
            );
        }
        if self.actions_per_video[0] > self.actions_per_video[1] || self.actions_per_video[1] == 0 {
            bail!("synthetic spec: malformed actions_per_video range");
        }
        if self.noise_std < 0.0 || self.text_noise_std < 0.0 {
            bail!("synthetic spec: noise must be nonnegative");
        }
        Ok(())
    }
}

/// Orthonormalize gaussian draws into `count` prototype columns of dimension
/// `dim` (Gram-Schmidt with re-draw on near-collinearity).
fn orthonormal_prototypes(dim: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> =
            (0..dim).map(|_| ovtad_core::tensor::gaussian_sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Map a prototype into text space: canonical embedding (copy the first
/// `min(D, D')` coordinates) plus seeded noise. Keeping the map canonical
/// makes alignment for classes never seen in training attainable: the
/// identity-initialized projection starts out consistent with it.
fn text_embedding(proto: &[f64], text_dim: usize, noise_std: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut out = vec![0.0f64; text_dim];
    for i in 0..proto.len().min(text_dim) {
        out[i] = proto[i];
    }
    for v in out.iter_mut() {
        *v += noise_std * ovtad_core::tensor::gaussian_sample(rng);
    }
    out
}

fn round_f32(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Deterministically generate a dataset and its text embeddings.
///
/// Segments within a video never overlap and keep at least two background
/// frames between them; classes are assigned round-robin across the dataset
/// so every class occurs.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, TextEmbeddingSet64)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let prototypes = orthonormal_prototypes(spec.feature_dim, spec.n_classes, &mut rng);

    let class_names: Vec<String> = (0..spec.n_classes).map(|c| format!("action_{c:02}")).collect();
    let mut text_rng = ChaCha12Rng::seed_from_u64(spec.text_map_seed);
    let mut text_data = Vec::with_capacity(spec.n_classes * spec.text_dim);
    for proto in &prototypes {
        text_data.extend(text_embedding(proto, spec.text_dim, spec.text_noise_std, &mut text_rng));
    }
    round_f32(&mut text_data);
    let text = TextEmbeddingSet64::new(
        class_names.clone(),
        Tensor64::from_vec(vec![spec.n_classes, spec.text_dim], text_data)?,
        format!("synthetic:seed={}:map={}", seed, spec.text_map_seed),
    )?;

    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut annotations: BTreeMap<String, Vec<Segment64>> = BTreeMap::new();
    let mut class_cursor = 0usize;
    for v in 0..spec.n_videos {
        let video_id = format!("video_{v:03}");
        let n_actions = rng.gen_range(spec.actions_per_video[0]..=spec.actions_per_video[1]);

        let lengths: Vec<usize> = (0..n_actions)
            .map(|_| {
                let bucket = spec.length_buckets[rng.gen_range(0..spec.length_buckets.len())];
                rng.gen_range(bucket[0]..=bucket[1])
            })
            .collect();
        let classes: Vec<usize> = (0..n_actions)
            .map(|_| {
                let c = class_cursor % spec.n_classes;
                class_cursor += 1;
                c
            })
            .collect();

        let placements = place_segments(spec.frames, &lengths, &mut rng).with_context(|| {
            format!("{video_id}: cannot pack {n_actions} actions into {} frames", spec.frames)
        })?;

        let mut data: Vec<f64> = (0..spec.frames * spec.feature_dim)
            .map(|_| spec.noise_std * ovtad_core::tensor::gaussian_sample(&mut rng))
            .collect();
        let mut segments = Vec::with_capacity(n_actions);
        for ((start, end), &class) in placements.iter().zip(&classes) {
            let proto = &prototypes[class];
            for frame in *start..*end {
                for (i, &p) in proto.iter().enumerate() {
                    data[frame * spec.feature_dim + i] += p;
                }
            }
            segments.push(Segment64::new(
                video_id.clone(),
                *start as f64,
                *end as f64,
                Some(class_names[class].clone()),
                1.0,
            )?);
        }
        round_f32(&mut data);
        videos.push(FeatureSequence64::new(
            video_id.clone(),
            Tensor::from_vec(vec![spec.frames, spec.feature_dim], data)?,
            spec.frame_rate_hint,
        )?);
        annotations.insert(video_id, segments);
    }

    let dataset = Dataset { videos, annotations, class_names };
    dataset.validate()?;
    Ok((dataset, text))
}

/// Place `lengths` non-overlapping intervals into `[0, frames)` with at
/// least two frames between consecutive actions, distributing leftover space
/// by seeded random weights.
fn place_segments(
    frames: usize,
    lengths: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(usize, usize)>> {
    let n = lengths.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let inner_gap = 2usize;
    let needed: usize = lengths.iter().sum::<usize>() + inner_gap * (n - 1);
    if needed > frames {
        bail!("actions need {needed} frames, video has {frames}");
    }
    let extra = frames - needed;
    let weights: Vec<f64> = (0..=n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut allocations: Vec<usize> =
        weights.iter().map(|w| ((w / total) * extra as f64).floor() as usize).collect();
    let assigned: usize = allocations.iter().sum();
    allocations[n] += extra - assigned;

    let mut out = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += allocations[i];
        if i > 0 {
            cursor += inner_gap;
        }
        out.push((cursor, cursor + len));
        cursor += len;
    }
    debug_assert!(cursor + allocations[n] == frames);
    Ok(out)
}

/// Least-squares learnability probe: fit a ridge-regularized linear map from
/// pooled ground-truth action features (raw `X` space) to the text
/// embeddings and report the mean cosine between mapped features and their
/// targets. High values mean alignment is linearly learnable.
pub fn linear_probe_mean_cosine(dataset: &Dataset, text: &TextEmbeddingSet64) -> Result<f64> {
    let d = dataset.videos[0].feature_dim();
    let dt = text.dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<&[f64]> = Vec::new();
    for video in &dataset.videos {
        for seg in dataset.segments(&video.video_id) {
            let (s, e) = (seg.start as usize, (seg.end as usize).min(video.num_frames()));
            let mut pooled = vec![0.0f64; d];
            for frame in s..e {
                for (acc, &v) in pooled.iter_mut().zip(video.features.row(frame)) {
                    *acc += v;
                }
            }
            pooled.iter_mut().for_each(|v| *v /= (e - s) as f64);
            let label = seg.label.as_deref().context("unlabeled synthetic segment")?;
            let class = text
                .index_of(label)
                .with_context(|| format!("class {label} missing from text set"))?;
            rows.push(pooled);
            targets.push(text.embeddings.row(class));
        }
    }
    let n = rows.len();
    if n == 0 {
        bail!("no actions to probe");
    }

    // normal equations with ridge: (F^T F + eps I) W = F^T A
    let mut ftf = vec![0.0f64; d * d];
    let mut fta = vec![0.0f64; d * dt];
    for (row, target) in rows.iter().zip(&targets) {
        for i in 0..d {
            for j in 0..d {
                ftf[i * d + j] += row[i] * row[j];
            }
            for j in 0..dt {
                fta[i * dt + j] += row[i] * target[j];
            }
        }
    }
    for i in 0..d {
        ftf[i * d + i] += 1e-8;
    }
    let w = solve_multi(&mut ftf, &mut fta, d, dt)?;

    let mut cosine_sum = 0.0f64;
    for (row, target) in rows.iter().zip(&targets) {
        let mut mapped = vec![0.0f64; dt];
        for i in 0..d {
            for j in 0..dt {
                mapped[j] += row[i] * w[i * dt + j];
            }
        }
        let dot: f64 = mapped.iter().zip(*target).map(|(a, b)| a * b).sum();
        let na: f64 = mapped.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = target.iter().map(|b| b * b).sum::<f64>().sqrt();
        cosine_sum += dot / (na * nb).max(1e-12);
    }
    Ok(cosine_sum / n as f64)
}

/// Gaussian elimination with partial pivoting solving `A X = B` for X
/// (`A: d x d`, `B: d x k`, both overwritten).
fn solve_multi(a: &mut [f64], b: &mut [f64], d: usize, k: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().partial_cmp(&a[j * d + col].abs()).unwrap())
            .unwrap();
        if a[pivot * d + col].abs() < 1e-12 {
            bail!("singular normal matrix in linear probe");
        }
        if pivot != col {
            for j in 0..d {
                a.swap(col * d + j, pivot * d + j);
            }
            for j in 0..k {
                b.swap(col * k + j, pivot * k + j);
            }
        }
        let diag = a[col * d + col];
        for row in col + 1..d {
            let factor = a[row * d + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                a[row * d + j] -= factor * a[col * d + j];
            }
            for j in 0..k {
                b[row * k + j] -= factor * b[col * k + j];
            }
        }
    }
    let mut x = vec![0.0f64; d * k];
    for row in (0..d).rev() {
        for j in 0..k {
            let mut acc = b[row * k + j];
            for col in row + 1..d {
                acc -= a[row * d + col] * x[col * k + j];
            }
            x[row * k + j] = acc / a[row * d + row];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::default();
        let (a, _) = generate_synthetic(&spec, 11).unwrap();
        let (b, _) = generate_synthetic(&spec, 11).unwrap();
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.video_id, vb.video_id);
            let bits_a: Vec<u64> = va.features.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = vb.features.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(a.annotations, b.annotations);
        let (c, _) = generate_synthetic(&spec, 12).unwrap();
        assert_ne!(
            a.videos[0].features.data()[0].to_bits(),
            c.videos[0].features.data()[0].to_bits()
        );
    }

    #[test]
    fn segments_are_disjoint_in_bounds_and_cover_all_classes() {
        let spec = SyntheticSpec { n_videos: 16, ..Default::default() };
        let (dataset, _) = generate_synthetic(&spec, 3).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for video in &dataset.videos {
            let mut segs = dataset.segments(&video.video_id).to_vec();
            segs.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
            for w in segs.windows(2) {
                assert!(w[0].end < w[1].start, "segments overlap or touch");
            }
            for s in &segs {
                assert!(s.start >= 0.0 && s.end <= spec.frames as f64);
                seen.insert(s.label.clone().unwrap());
            }
        }
        assert_eq!(seen.len(), spec.n_classes);
    }

    #[test]
    fn infeasible_packing_is_an_error() {
        let spec = SyntheticSpec {
            frames: 32,
            actions_per_video: [4, 4],
            length_buckets: vec![[10, 12]],
            ..Default::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn linear_probe_validates_learnability() {
        let spec = SyntheticSpec { n_videos: 16, n_classes: 8, ..Default::default() };
        let (dataset, text) = generate_synthetic(&spec, 5).unwrap();
        let cosine = linear_probe_mean_cosine(&dataset, &text).unwrap();
        assert!(cosine >= 0.9, "mean cosine {cosine} below learnability bar");
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let protos = orthonormal_prototypes(16, 8, &mut rng);
        for (i, a) in protos.iter().enumerate() {
            for (j, b) in protos.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
    }
}
