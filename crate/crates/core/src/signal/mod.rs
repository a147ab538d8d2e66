//! Canonical signal representation and the preprocessing chain applied to
//! every recording: fixed-length segmentation, block-mean downsampling and
//! min-max normalization.

pub mod io;

use crate::error::{Error, Result};

/// A raw, uniformly sampled waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl SampleSeries {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidParameter("sample_rate_hz must be >= 1".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// One fixed-duration window of a recording, with its artifact label.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub segment_id: String,
    pub patient_id: String,
    pub t_start_s: f64,
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    /// Fraction of artifact-corrupted samples, in `[0, 1]`.
    pub quality_y: f64,
    pub artifact_mask: Option<Vec<bool>>,
}

impl Segment {
    /// Builds a segment whose label is derived from a ground-truth mask.
    pub fn with_mask(
        segment_id: impl Into<String>,
        patient_id: impl Into<String>,
        t_start_s: f64,
        samples: Vec<f32>,
        sample_rate_hz: u32,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if mask.len() != samples.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != sample length {}",
                mask.len(),
                samples.len()
            )));
        }
        let quality_y = crate::quality::artifact_fraction(&mask)?.value();
        Ok(Self {
            segment_id: segment_id.into(),
            patient_id: patient_id.into(),
            t_start_s,
            samples,
            sample_rate_hz,
            quality_y,
            artifact_mask: Some(mask),
        })
    }

    /// Checks the label range and mask/label consistency.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality_y) {
            return Err(Error::InvalidData(format!(
                "segment {}: quality_y {} outside [0, 1]",
                self.segment_id, self.quality_y
            )));
        }
        if !(self.t_start_s.is_finite() && self.t_start_s >= 0.0) {
            return Err(Error::InvalidData(format!(
                "segment {}: bad t_start_s {}",
                self.segment_id, self.t_start_s
            )));
        }
        if let Some(mask) = &self.artifact_mask {
            if mask.len() != self.samples.len() {
                return Err(Error::InvalidData(format!(
                    "segment {}: mask length mismatch",
                    self.segment_id
                )));
            }
            let y = crate::quality::artifact_fraction(mask)?.value();
            if (y - self.quality_y).abs() > 1e-9 {
                return Err(Error::InvalidData(format!(
                    "segment {}: quality_y {} disagrees with mask fraction {}",
                    self.segment_id, self.quality_y, y
                )));
            }
        }
        Ok(())
    }
}

/// Cuts a recording into consecutive non-overlapping windows of `duration_s`.
///
/// The trailing partial window is dropped. Segment ids are
/// `<patient_id>_<window index>`.
pub fn segment_recording(series: &SampleSeries, patient_id: &str, duration_s: f64) -> Result<Vec<Segment>> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "segment duration must be positive, got {duration_s}"
        )));
    }
    let window = (duration_s * series.sample_rate_hz as f64).round() as usize;
    if window == 0 {
        return Err(Error::InvalidParameter(
            "segment duration shorter than one sample".into(),
        ));
    }
    if series.len() < window {
        return Err(Error::RecordingTooShort {
            have: series.len(),
            need: window,
        });
    }
    Ok(series
        .samples
        .chunks_exact(window)
        .enumerate()
        .map(|(k, chunk)| Segment {
            segment_id: format!("{patient_id}_{k}"),
            patient_id: patient_id.to_string(),
            t_start_s: k as f64 * duration_s,
            samples: chunk.to_vec(),
            sample_rate_hz: series.sample_rate_hz,
            quality_y: 0.0,
            artifact_mask: None,
        })
        .collect())
}

/// Box-filter decimation: each output sample is the mean of one block of
/// `rate / target_hz` consecutive input samples.
pub fn downsample(series: &SampleSeries, target_hz: u32) -> Result<SampleSeries> {
    if target_hz == 0 || !series.sample_rate_hz.is_multiple_of(target_hz) {
        return Err(Error::UnsupportedResampleRatio {
            from: series.sample_rate_hz,
            to: target_hz,
        });
    }
    let factor = (series.sample_rate_hz / target_hz) as usize;
    if factor == 1 {
        return Ok(series.clone());
    }
    let samples = series
        .samples
        .chunks_exact(factor)
        .map(|block| {
            let sum: f64 = block.iter().map(|&v| v as f64).sum();
            (sum / factor as f64) as f32
        })
        .collect();
    Ok(SampleSeries {
        samples,
        sample_rate_hz: target_hz,
    })
}

/// Block-mean decimation of an artifact mask: an output sample is flagged
/// when any sample of its block is.
pub fn downsample_mask(mask: &[bool], factor: usize) -> Vec<bool> {
    mask.chunks_exact(factor.max(1))
        .map(|block| block.iter().any(|&m| m))
        .collect()
}

/// Maps samples to `(s - min) / (max - min)`; constant input maps to zeros.
pub fn normalize_samples(samples: &mut [f32]) {
    let (lo, hi) = samples.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    if samples.is_empty() || range.is_nan() || range <= 0.0 {
        samples.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in samples.iter_mut() {
        *v = ((*v as f64 - lo) / range).clamp(0.0, 1.0) as f32;
    }
}

pub fn minmax_normalize(segment: &Segment) -> Segment {
    let mut out = segment.clone();
    normalize_samples(&mut out.samples);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, rate: u32) -> SampleSeries {
        SampleSeries::new((0..n).map(|i| i as f32).collect(), rate).unwrap()
    }

    #[test]
    fn ninety_seconds_gives_three_windows() {
        let segs = segment_recording(&series(90 * 40, 40), "p", 30.0).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.samples.len() == 1200));
        assert_eq!(segs[2].t_start_s, 60.0);
    }

    #[test]
    fn exact_single_window() {
        let segs = segment_recording(&series(30 * 40, 40), "p", 30.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].t_start_s, 0.0);
    }

    #[test]
    fn trailing_partial_window_dropped() {
        let segs = segment_recording(&series(89 * 40, 40), "p", 30.0).unwrap();
        assert_eq!(segs.len(), 2);
    }

    #[test]
    fn short_recording_rejected() {
        let err = segment_recording(&series(100, 40), "p", 30.0).unwrap_err();
        assert!(matches!(err, Error::RecordingTooShort { .. }));
        assert!(err.to_string().contains("recording too short"));
    }

    #[test]
    fn downsample_240_to_40() {
        let out = downsample(&series(7200, 240), 40).unwrap();
        assert_eq!(out.len(), 1200);
        assert_eq!(out.sample_rate_hz, 40);
    }

    #[test]
    fn downsample_block_mean() {
        let s = SampleSeries::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6).unwrap();
        assert_eq!(downsample(&s, 1).unwrap().samples, vec![3.5]);
    }

    #[test]
    fn downsample_constant() {
        let s = SampleSeries::new(vec![0.7; 60], 12).unwrap();
        let out = downsample(&s, 4).unwrap();
        assert_eq!(out.samples, vec![0.7; 20]);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let err = downsample(&series(100, 250), 40).unwrap_err();
        assert!(err.to_string().contains("unsupported resample ratio"));
    }

    fn seg(samples: Vec<f32>) -> Segment {
        Segment {
            segment_id: "s".into(),
            patient_id: "p".into(),
            t_start_s: 0.0,
            samples,
            sample_rate_hz: 1,
            quality_y: 0.0,
            artifact_mask: None,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(minmax_normalize(&seg(vec![2.0, 4.0, 6.0])).samples, vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&seg(vec![5.0, 5.0, 5.0])).samples, vec![0.0; 3]);
        assert_eq!(
            minmax_normalize(&seg(vec![-1.0, 0.0, 3.0])).samples,
            vec![0.0, 0.25, 1.0]
        );
    }

    #[test]
    fn mask_label_consistency_checked() {
        let mut s = Segment::with_mask("a", "p", 0.0, vec![0.0; 4], 1, vec![true, false, false, false]).unwrap();
        assert_eq!(s.quality_y, 0.25);
        s.validate().unwrap();
        s.quality_y = 0.5;
        assert!(s.validate().is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn windows_tile_prefix(n in 40usize..400, rate in 1u32..8, dur in 1u32..10) {
            let s = SampleSeries::new((0..n).map(|i| i as f32).collect(), rate).unwrap();
            let window = (dur * rate) as usize;
            match segment_recording(&s, "p", dur as f64) {
                Ok(segs) => {
                    let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples.clone()).collect();
                    prop_assert_eq!(segs.len(), n / window);
                    prop_assert_eq!(&joined[..], &s.samples[..segs.len() * window]);
                    for (k, seg) in segs.iter().enumerate() {
                        prop_assert_eq!(seg.t_start_s, k as f64 * dur as f64);
                    }
                }
                Err(_) => prop_assert!(n < window),
            }
        }

        #[test]
        fn normalize_downsample_scale_invariant(
            xs in prop::collection::vec(-10.0f32..10.0, 12..120),
            a in 0.01f32..50.0,
        ) {
            let n = xs.len() / 4 * 4;
            let lo = xs[..n].iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = xs[..n].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assume!(hi - lo > 8.0);
            let base = SampleSeries::new(xs[..n].to_vec(), 4).unwrap();
            let scaled = SampleSeries::new(xs[..n].iter().map(|v| v * a).collect(), 4).unwrap();
            let mut u = downsample(&base, 1).unwrap().samples;
            let mut v = downsample(&scaled, 1).unwrap().samples;
            normalize_samples(&mut u);
            normalize_samples(&mut v);
            for (p, q) in u.iter().zip(&v) {
                prop_assert!((p - q).abs() <= 1e-6, "{} vs {}", p, q);
            }
        }

        #[test]
        fn normalize_idempotent(xs in prop::collection::vec(-10.0f32..10.0, 2..100)) {
            let mut once = xs.clone();
            normalize_samples(&mut once);
            let mut twice = once.clone();
            normalize_samples(&mut twice);
            for (p, q) in once.iter().zip(&twice) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }

        #[test]
        fn normalized_range_is_exactly_unit(xs in prop::collection::vec(-1e4f32..1e4, 2..100)) {
            prop_assume!(xs.iter().any(|&v| v != xs[0]));
            let mut once = xs.clone();
            normalize_samples(&mut once);
            let lo = once.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = once.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!((lo, hi), (0.0, 1.0));
            let mut twice = once.clone();
            normalize_samples(&mut twice);
            prop_assert_eq!(once, twice);
        }
    }
}
