//! Synthetic multi-subject feature sets with a controllable subject shift.
//!
//! Every subject shares one set of class prototypes. A sample is its class
//! prototype plus isotropic noise, after which the subject's own affine
//! distortion `x ↦ (I + s·E)x + s·o` is applied, with `s` the shift strength.
//! At `s = 0` all subjects are identically distributed.

use face_diffcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{FaceError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub num_subjects: usize,
    pub samples_per_class: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub bands: usize,
    pub shift_strength: f64,
    pub seed: u64,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
    /// Spectral scale of the subject mixing matrix `E`.
    pub mixing_scale: f64,
    /// Standard deviation of the subject offset `o`.
    pub offset_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_subjects: 6,
            samples_per_class: 200,
            num_classes: 3,
            channels: 62,
            bands: 5,
            shift_strength: 1.0,
            seed: 0,
            prototype_scale: 0.4,
            noise: 1.0,
            mixing_scale: 0.3,
            offset_scale: 1.5,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates `num_subjects` subjects named `S01, S02, ...`.
pub fn synth_generate(p: &SynthParams) -> Result<Vec<FeatureSet>> {
    if p.num_subjects == 0
        || p.samples_per_class == 0
        || p.num_classes == 0
        || p.channels == 0
        || p.bands == 0
    {
        return Err(FaceError::Precondition(
            "synthetic counts must all be positive".into(),
        ));
    }
    if !(p.shift_strength >= 0.0) {
        return Err(FaceError::Precondition(format!(
            "shift strength must be non-negative, got {}",
            p.shift_strength
        )));
    }
    let d = p.channels * p.bands;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let prototypes: Vec<Vec<f64>> = (0..p.num_classes)
        .map(|_| (0..d).map(|_| normal(&mut rng) * p.prototype_scale).collect())
        .collect();

    let mut subjects = Vec::with_capacity(p.num_subjects);
    for s in 0..p.num_subjects {
        // Subject streams are independent of the shift strength, so the same
        // seed yields the same noise at every strength.
        let mut srng = ChaCha8Rng::seed_from_u64(p.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(s as u64 + 1)));
        let mix_sd = p.mixing_scale / (d as f64).sqrt();
        let mixing: Vec<f64> = (0..d * d).map(|_| normal(&mut srng) * mix_sd).collect();
        let offset: Vec<f64> = (0..d).map(|_| normal(&mut srng) * p.offset_scale).collect();

        let n = p.samples_per_class * p.num_classes;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut order: Vec<usize> = (0..n).map(|i| i % p.num_classes).collect();
        // interleave classes in a random order
        for i in (1..order.len()).rev() {
            let j = srng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut clean = vec![0.0; d];
        for &class in &order {
            for (c, v) in clean.iter_mut().enumerate() {
                *v = prototypes[class][c] + normal(&mut srng) * p.noise;
            }
            for r in 0..d {
                let row = &mixing[r * d..(r + 1) * d];
                let mixed: f64 = row.iter().zip(&clean).map(|(a, b)| a * b).sum();
                let v = clean[r] + p.shift_strength * (mixed + offset[r]);
                data.push(v as f32);
            }
            labels.push(class);
        }
        let features = Tensor::new(vec![n, p.channels, p.bands], data)?;
        subjects.push(FeatureSet::new(
            format!("S{:02}", s + 1),
            p.num_classes,
            features,
            labels,
        )?);
    }
    Ok(subjects)
}

/// Mean feature vector of a subject.
pub fn subject_mean(fs: &FeatureSet) -> Vec<f64> {
    let d = fs.channels() * fs.bands();
    let mut m = vec![0.0; d];
    for i in 0..fs.len() {
        for (a, &v) in m.iter_mut().zip(fs.sample(i)) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= fs.len() as f64);
    m
}

/// Mean pairwise Euclidean distance between subject feature means.
pub fn mean_intersubject_distance(subjects: &[FeatureSet]) -> f64 {
    let means: Vec<Vec<f64>> = subjects.iter().map(subject_mean).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: f64, seed: u64) -> SynthParams {
        SynthParams {
            num_subjects: 3,
            samples_per_class: 50,
            num_classes: 3,
            channels: 4,
            bands: 2,
            shift_strength: shift,
            seed,
            ..SynthParams::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(synth_generate(&small(1.0, 3)).unwrap(), synth_generate(&small(1.0, 3)).unwrap());
        assert_ne!(synth_generate(&small(1.0, 3)).unwrap(), synth_generate(&small(1.0, 4)).unwrap());
    }

    #[test]
    fn shapes_and_balance() {
        let s = synth_generate(&small(0.5, 1)).unwrap();
        assert_eq!(s.len(), 3);
        for fs in &s {
            assert_eq!((fs.len(), fs.channels(), fs.bands()), (150, 4, 2));
            assert!(fs.class_indices().iter().all(|c| c.len() == 50));
        }
    }

    #[test]
    fn zero_shift_means_agree_within_three_sigma() {
        let p = SynthParams {
            samples_per_class: 200,
            ..small(0.0, 9)
        };
        let s = synth_generate(&p).unwrap();
        let means: Vec<Vec<f64>> = s.iter().map(subject_mean).collect();
        // Per-feature sd of a subject mean: noise / sqrt(n), plus the
        // sampling spread of class mixing, bounded by the prototype scale.
        let n = (p.samples_per_class * p.num_classes) as f64;
        let sigma = (p.noise.powi(2) / n).sqrt() * 2f64.sqrt();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                for (a, b) in means[i].iter().zip(&means[j]) {
                    assert!((a - b).abs() < 3.0 * sigma + 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_generate(&SynthParams {
            num_subjects: 0,
            ..small(1.0, 0)
        })
        .is_err());
        assert!(synth_generate(&small(-1.0, 0)).is_err());
    }
}
