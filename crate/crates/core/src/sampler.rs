//! Random frame-skip sampling.
//!
//! A video of `l` frames is reduced to `n` frames by laying an evenly spaced
//! baseline over it and jittering each position forward by a random offset in
//! `[1, z]`, where `z` is the average gap. Indices are 1-based.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::keypoints::FeatureSequence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("video has {frames} frames, fewer than the {wanted} requested")]
    TooFewFrames { frames: usize, wanted: usize },
    #[error("sample count must be at least {min}, got {got}")]
    BadCount { min: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n: usize,
    pub seed: u64,
}

/// Evenly spaced starting positions for the random draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Baseline {
    /// Average gap between sampled frames.
    pub gap: usize,
    /// Offset of the first position.
    pub start: usize,
    pub positions: Vec<usize>,
}

pub fn baseline_sequence(l: usize, n: usize) -> Result<Baseline, SamplerError> {
    if n < 2 {
        return Err(SamplerError::BadCount { min: 2, got: n });
    }
    if l < n {
        return Err(SamplerError::TooFewFrames {
            frames: l,
            wanted: n,
        });
    }
    let gap = l / (n - 1);
    let start = (l - gap * (n - 1)) / 2;
    let positions = (0..n).map(|i| start + i * gap).collect();
    Ok(Baseline {
        gap,
        start,
        positions,
    })
}

/// Draws the per-position offsets, each uniform on `[1, gap]`.
pub fn draw_offsets<R: Rng + ?Sized>(gap: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=gap)).collect()
}

/// Baseline plus random offsets, clipped to `[1, l]`.
pub fn sample_indices<R: Rng + ?Sized>(
    l: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SamplerError> {
    let base = baseline_sequence(l, n)?;
    let offsets = draw_offsets(base.gap, n, rng);
    Ok(base
        .positions
        .iter()
        .zip(offsets)
        .map(|(y, r)| (y + r).min(l))
        .collect())
}

/// Deterministic evaluation-time indices: every offset fixed at the middle of `[1, z]`.
/// Falls back to [`stretch_indices`] when the video is shorter than `n`.
pub fn center_indices(l: usize, n: usize) -> Vec<usize> {
    match baseline_sequence(l, n) {
        Ok(base) => {
            let r = base.gap.div_ceil(2);
            base.positions.iter().map(|y| (y + r).min(l)).collect()
        }
        Err(_) => stretch_indices(l, n),
    }
}

/// Linear spacing over `[1, l]` with ties rounded to even; repeats frames when `l < n`.
pub fn stretch_indices(l: usize, n: usize) -> Vec<usize> {
    assert!(l >= 1, "video must have at least one frame");
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![((1 + l) as f64 / 2.0).round_ties_even() as usize];
    }
    (0..n)
        .map(|i| (1.0 + (i * (l - 1)) as f64 / (n - 1) as f64).round_ties_even() as usize)
        .collect()
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based seed derivation, so every draw is reproducible on its own.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Index sequences for `factor` augmented copies of a video with `l` frames.
/// Draw `k` of video `video_key` is seeded from `(master_seed, video_key, k)`.
pub fn augment_indices(
    l: usize,
    n: usize,
    factor: usize,
    master_seed: u64,
    video_key: u64,
) -> Result<Vec<Vec<usize>>, SamplerError> {
    if factor == 0 {
        return Err(SamplerError::BadCount { min: 1, got: 0 });
    }
    (0..factor)
        .map(|k| {
            if n < 2 || l < n {
                Ok(stretch_indices(l, n))
            } else {
                sample_indices(l, n, &mut rng_for(master_seed, &[video_key, k as u64]))
            }
        })
        .collect()
}

/// `factor` independently sampled copies of `video`.
pub fn augment(
    video: &FeatureSequence,
    factor: usize,
    n: usize,
    master_seed: u64,
    video_key: u64,
) -> Result<Vec<FeatureSequence>, SamplerError> {
    Ok(
        augment_indices(video.len(), n, factor, master_seed, video_key)?
            .iter()
            .map(|idx| video.select(idx))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{FeatureFrame, NormalizationMode, PartMask};

    #[test]
    fn baseline_examples() {
        let b = baseline_sequence(100, 10).unwrap();
        assert_eq!((b.gap, b.start), (11, 0));
        assert_eq!(b.positions, (0..10).map(|i| 11 * i).collect::<Vec<_>>());
        assert_eq!(*b.positions.last().unwrap(), 99);

        let b = baseline_sequence(5, 5).unwrap();
        assert_eq!((b.gap, b.start, b.positions), (1, 0, vec![0, 1, 2, 3, 4]));

        let b = baseline_sequence(7, 3).unwrap();
        assert_eq!((b.gap, b.start, b.positions), (3, 0, vec![0, 3, 6]));

        assert_eq!(
            baseline_sequence(4, 5),
            Err(SamplerError::TooFewFrames {
                frames: 4,
                wanted: 5
            })
        );
    }

    #[test]
    fn unit_gap_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_indices(5, 5, &mut rng).unwrap(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn seeded_draws_repeat() {
        let a = sample_indices(100, 10, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_indices(100, 10, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|&i| (1..=100).contains(&i)));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn stretch_examples() {
        assert_eq!(stretch_indices(3, 5), vec![1, 2, 2, 2, 3]);
        assert_eq!(stretch_indices(1, 4), vec![1, 1, 1, 1]);
        assert_eq!(stretch_indices(3, 3), vec![1, 2, 3]);
    }

    #[test]
    fn center_indices_stay_in_range() {
        assert_eq!(center_indices(5, 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(
            center_indices(30, 10),
            vec![3, 6, 9, 12, 15, 18, 21, 24, 27, 30]
        );
        assert_eq!(center_indices(3, 5), vec![1, 2, 2, 2, 3]);
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[4, 2]), derive_seed(9, &[4, 2]));
    }

    fn toy_video(l: usize) -> FeatureSequence {
        FeatureSequence {
            frames: (0..l)
                .map(|i| FeatureFrame {
                    values: vec![i as f64 + 1.0],
                })
                .collect(),
            mask: PartMask::FULL,
            mode: NormalizationMode::Object2D,
        }
    }

    #[test]
    fn augment_counts_and_determinism() {
        let video = toy_video(40);
        assert_eq!(augment(&video, 1, 10, 5, 0).unwrap().len(), 1);
        let a = augment(&video, 6, 10, 5, 3).unwrap();
        let b = augment(&video, 6, 10, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        // Frame values equal their 1-based index here.
        for s in &a {
            let idx: Vec<usize> = s.frames.iter().map(|f| f.values[0] as usize).collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(augment(&video, 0, 10, 5, 3).is_err());
        let short = augment(&toy_video(3), 2, 5, 5, 0).unwrap();
        assert_eq!(short[0].len(), 5);
    }

    #[test]
    fn full_scale_sample_count() {
        // 9,432 training videos at factor 100.
        assert_eq!(9_432 * 100, 943_200);
    }

    #[test]
    fn offsets_are_uniform() {
        // Chi-square critical value for 10 degrees of freedom at p = 0.001.
        const CRITICAL: f64 = 29.588;
        let base = baseline_sequence(100, 10).unwrap();
        let mut counts = vec![[0usize; 11]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..10_000 {
            for (pos, r) in draw_offsets(base.gap, 10, &mut rng).into_iter().enumerate() {
                counts[pos][r - 1] += 1;
            }
        }
        let expected = 10_000.0 / 11.0;
        for row in &counts {
            assert!(row.iter().all(|&c| c > 0));
            let chi2: f64 = row
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < CRITICAL, "chi2 {chi2}");
        }
    }

    proptest::proptest! {
        #[test]
        fn sampled_indices_respect_bounds(l in 2usize..300, n in 2usize..60, seed: u64) {
            proptest::prop_assume!(l >= n);
            let base = baseline_sequence(l, n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offsets = draw_offsets(base.gap, n, &mut rng);
            let raw: Vec<usize> = base.positions.iter().zip(&offsets).map(|(y, r)| y + r).collect();
            let clipped: Vec<usize> = raw.iter().map(|&i| i.min(l)).collect();
            proptest::prop_assert!(clipped[0] > base.start);
            proptest::prop_assert!(clipped.iter().all(|&i| i >= 1 && i <= l));
            for w in raw.windows(2) {
                let d = w[1] - w[0];
                proptest::prop_assert!(d >= 1 && d < 2 * base.gap);
            }
            proptest::prop_assert!(clipped.windows(2).all(|w| w[0] <= w[1]));
            // Only the final position can overflow.
            proptest::prop_assert!(raw[..n - 1].iter().all(|&i| i <= l));
        }
    }
}
