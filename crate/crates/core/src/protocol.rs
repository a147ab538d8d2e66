//! Reference experiments on synthetic data: the latent-clustering probe and
//! the heart-rate regression task.

use rayon::prelude::*;

use crate::autodiff::Scalar;
use crate::dataset::LabeledExample;
use crate::error::Result;
use crate::eval::{embedding_std, nn1_accuracy};
use crate::model::ModelBundle;
use crate::pairing::{build_pairs, sort_curriculum, PairingRules, QualityPair, SegmentIndexEntry};
use crate::seed::{derive_indexed, derive_seed};
use crate::signal::Segment;
use crate::synth::{build_synthetic_corpus, synth_segment, CorpusSpec, NoiseSpec, PpgSimParams};
use crate::train::embed_samples;

pub const PROBE_HEART_RATES: [f64; 5] = [60.0, 75.0, 90.0, 105.0, 120.0];
pub const PROBE_LEVELS: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Drift,
    Motion,
    Powerline,
}

pub const NOISE_KINDS: [NoiseKind; 3] = [NoiseKind::Drift, NoiseKind::Motion, NoiseKind::Powerline];

/// Segments at a few fixed heart rates under one noise type at a time,
/// labelled by heart-rate class.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub segments: Vec<Segment>,
    pub hr_class: Vec<usize>,
}

/// Every combination of [`PROBE_HEART_RATES`], [`NOISE_KINDS`] and
/// [`PROBE_LEVELS`]: 120 segments of 30 s at 40 Hz.
pub fn clustering_probe_set(seed: u64) -> Result<ProbeSet> {
    let mut segments = Vec::new();
    let mut hr_class = Vec::new();
    let mut k = 0u64;
    for (class, &hr) in PROBE_HEART_RATES.iter().enumerate() {
        for kind in NOISE_KINDS {
            for &level in &PROBE_LEVELS {
                let s = derive_indexed(seed, "probe", k);
                let mut noise = NoiseSpec::clean(s ^ 0x5a5a);
                match kind {
                    NoiseKind::Drift => noise.drift_level = level,
                    NoiseKind::Motion => noise.motion_level = level,
                    NoiseKind::Powerline => noise.powerline_level = level,
                }
                let params = PpgSimParams {
                    hr_bpm: hr,
                    duration_s: 30.0,
                    sample_rate_hz: 40,
                    seed: s,
                };
                segments.push(synth_segment(
                    format!("probe_{k:03}"),
                    format!("hr{hr}"),
                    0.0,
                    &params,
                    &noise,
                )?);
                hr_class.push(class);
                k += 1;
            }
        }
    }
    Ok(ProbeSet { segments, hr_class })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringScore {
    /// Leave-one-out 1-NN heart-rate class accuracy in embedding space.
    pub nn1_accuracy: f64,
    /// Smallest per-dimension standard deviation of the embeddings.
    pub min_dim_std: f64,
}

pub fn clustering_score<T: Scalar>(model: &ModelBundle<T>, probe: &ProbeSet) -> Result<ClusteringScore> {
    let rows: Vec<&[f32]> = probe.segments.iter().map(|s| s.samples.as_slice()).collect();
    let h = embed_samples(model, &rows)?;
    Ok(ClusteringScore {
        nn1_accuracy: nn1_accuracy(&h, &probe.hr_class)?,
        min_dim_std: embedding_std(&h)?.into_iter().fold(f64::INFINITY, f64::min),
    })
}

/// A synthetic pretraining corpus with its difficulty-sorted quality pairs.
pub fn pretraining_data(
    n_patients: usize,
    segments_per_patient: usize,
    seed: u64,
) -> Result<(Vec<Segment>, Vec<QualityPair>)> {
    let spec = CorpusSpec::new(n_patients, segments_per_patient, derive_seed(seed, "corpus"));
    let segments: Vec<Segment> = build_synthetic_corpus(&spec)?.into_iter().map(|s| s.segment).collect();
    let index: Vec<SegmentIndexEntry> = segments.iter().map(SegmentIndexEntry::from).collect();
    let pairs = sort_curriculum(build_pairs(&index, &PairingRules::default())?);
    Ok((segments, pairs))
}

/// Heart-rate regression data from disjoint patient groups: a mixed-quality
/// training set and a test set holding only corrupted segments.
pub fn hr_task_sets(
    n_train_patients: usize,
    n_test_patients: usize,
    segments_per_patient: usize,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let make = |n: usize, name: &str| -> Result<Vec<LabeledExample>> {
        let spec = CorpusSpec::new(n, segments_per_patient, derive_seed(seed, name));
        Ok(build_synthetic_corpus(&spec)?
            .into_par_iter()
            .map(|s| LabeledExample {
                segment_id: format!("{name}_{}", s.segment.segment_id),
                label: s.hr_bpm,
                quality_y: s.segment.quality_y,
                samples: s.segment.samples,
            })
            .collect())
    };
    let train = make(n_train_patients, "hr.train")?;
    let test = make(n_test_patients, "hr.test")?
        .into_iter()
        .filter(|e| e.quality_y > 0.0)
        .collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_set_layout() {
        let p = clustering_probe_set(1).unwrap();
        assert_eq!(p.segments.len(), 120);
        for c in 0..5 {
            assert_eq!(p.hr_class.iter().filter(|&&k| k == c).count(), 24);
        }
        assert!(p.segments.iter().all(|s| s.samples.len() == 1200));
        assert!(p.segments.iter().any(|s| s.quality_y > 0.5));
    }

    #[test]
    fn hr_test_set_is_noisy_and_disjoint() {
        let (train, test) = hr_task_sets(3, 3, 10, 2).unwrap();
        assert_eq!(train.len(), 30);
        assert!(!test.is_empty() && test.iter().all(|e| e.quality_y > 0.0));
        assert!(train.iter().all(|a| test.iter().all(|b| a.segment_id != b.segment_id)));
    }
}
