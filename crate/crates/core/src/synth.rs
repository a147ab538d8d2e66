//! Synthetic PPG: clean quasi-periodic waveforms, artifact injection with
//! ground-truth masks, and whole labelled corpora.

use std::f64::consts::TAU;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{derive_indexed, derive_seed, rng};
use crate::signal::{normalize_samples, SampleSeries, Segment};

pub const HR_RANGE_BPM: (f64, f64) = (30.0, 220.0);
pub const MAX_NOISE_LEVEL: f64 = 0.7;
/// Powerline amplitude above which the whole segment is flagged.
pub const POWERLINE_FLAG_LEVEL: f64 = 0.05;
const POWERLINE_HZ: f64 = 50.0;
const BEAT_JITTER: f64 = 0.02;
/// Pole of the AR(1) process that colours motion bursts.
const AR_COEF: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpgSimParams {
    pub hr_bpm: f64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl PpgSimParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = HR_RANGE_BPM;
        if !(lo..=hi).contains(&self.hr_bpm) {
            return Err(Error::InvalidParameter(format!(
                "hr_bpm {} outside [{lo}, {hi}]",
                self.hr_bpm
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidParameter("duration_s must be positive".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidParameter("sample_rate_hz must be >= 1".into()));
        }
        let period = 60.0 * self.sample_rate_hz as f64 / self.hr_bpm;
        if period <= 4.0 {
            return Err(Error::InvalidParameter(format!(
                "beat period of {period:.2} samples is too short; raise the sample rate"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    pub drift_level: f64,
    pub motion_level: f64,
    pub powerline_level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("drift_level", self.drift_level),
            ("motion_level", self.motion_level),
            ("powerline_level", self.powerline_level),
        ] {
            if !(0.0..=MAX_NOISE_LEVEL).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} {v} outside [0, {MAX_NOISE_LEVEL}]"
                )));
            }
        }
        Ok(())
    }
}

fn gaussian(x: f64, centre: f64, width: f64) -> f64 {
    let d = (x - centre) / width;
    (-0.5 * d * d).exp()
}

/// Clean PPG: each beat is a systolic Gaussian bump plus a smaller, later
/// dicrotic bump, with seeded per-beat period jitter. Output is scaled to
/// `[0, 1]`.
pub fn simulate_clean(params: &PpgSimParams) -> Result<SampleSeries> {
    params.validate()?;
    let fs = params.sample_rate_hz as f64;
    let n = (params.duration_s * fs).round() as usize;
    let nominal = 60.0 / params.hr_bpm;
    let mut rng = rng(params.seed);

    let mut onsets = Vec::new();
    let mut t = -rng.gen_range(0.0..nominal) - nominal;
    while t < params.duration_s + nominal {
        let period = nominal * (1.0 + rng.gen_range(-BEAT_JITTER..=BEAT_JITTER));
        onsets.push((t, period));
        t += period;
    }

    let mut samples = vec![0.0f64; n];
    for &(onset, period) in &onsets {
        let lo = (((onset - 0.5 * period) * fs).floor().max(0.0)) as usize;
        let hi = (((onset + 2.0 * period) * fs).ceil().max(0.0) as usize).min(n);
        for (i, v) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let ts = i as f64 / fs;
            *v += gaussian(ts, onset + 0.20 * period, 0.07 * period)
                + 0.45 * gaussian(ts, onset + 0.48 * period, 0.10 * period);
        }
    }
    let mut out: Vec<f32> = samples.iter().map(|&v| v as f32).collect();
    normalize_samples(&mut out);
    SampleSeries::new(out, params.sample_rate_hz)
}

/// Adds drift, powerline and motion artifacts. Returns the noisy series and
/// the per-sample artifact mask.
///
/// Drift never sets the mask. Powerline sets it everywhere once its amplitude
/// exceeds [`POWERLINE_FLAG_LEVEL`]. Motion bursts replace the signal with
/// coloured noise over exactly `round(motion_level * n)` samples, all flagged.
pub fn inject_noise(series: &SampleSeries, spec: &NoiseSpec) -> Result<(SampleSeries, Vec<bool>)> {
    spec.validate()?;
    let n = series.len();
    let fs = series.sample_rate_hz as f64;
    let mut samples = series.samples.clone();
    let mut mask = vec![false; n];

    if spec.drift_level > 0.0 {
        let mut r = rng(derive_seed(spec.seed, "drift"));
        let period = r.gen_range(10.0..20.0);
        let phase = r.gen_range(0.0..TAU);
        for (i, v) in samples.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v += (spec.drift_level * (TAU * t / period + phase).sin()) as f32;
        }
    }

    if spec.powerline_level > 0.0 {
        let mut r = rng(derive_seed(spec.seed, "powerline"));
        let phase = r.gen_range(0.0..TAU);
        for (i, v) in samples.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v += (spec.powerline_level * (TAU * POWERLINE_HZ * t + phase).sin()) as f32;
        }
        if spec.powerline_level > POWERLINE_FLAG_LEVEL {
            mask.iter_mut().for_each(|m| *m = true);
        }
    }

    let burst_total = ((spec.motion_level * n as f64).round() as usize).min(n);
    if burst_total > 0 {
        let mut r = rng(derive_seed(spec.seed, "motion"));
        // Scales the AR(1) state, driven by U(-1, 1), to unit stationary variance.
        let ar_unit = (3.0 * (1.0 - AR_COEF * AR_COEF)).sqrt();
        let min_len = fs.round().max(1.0) as usize;
        let max_len = (4.0 * fs).round().max(1.0) as usize;
        let mut lengths = Vec::new();
        let mut remaining = burst_total;
        while remaining > 0 {
            let len = r.gen_range(min_len..=max_len).min(remaining);
            lengths.push(len);
            remaining -= len;
        }
        // Split the free samples into len+1 gaps at uniform cut points.
        let free = n - burst_total;
        let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| r.gen_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut pos = 0;
        let mut prev_cut = 0;
        for (len, cut) in lengths.iter().zip(&cuts) {
            pos += cut - prev_cut;
            prev_cut = *cut;
            let offset = r.gen_range(-0.5..0.5);
            let scale = r.gen_range(0.3..0.6);
            let mut state = 0.0f64;
            for i in pos..pos + len {
                let white: f64 = r.gen_range(-1.0..1.0);
                state = AR_COEF * state + white;
                samples[i] = (offset + scale * state * ar_unit) as f32;
                mask[i] = true;
            }
            pos += len;
        }
    }

    Ok((SampleSeries::new(samples, series.sample_rate_hz)?, mask))
}

/// How noise is laid over each patient's timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoisePolicy {
    /// No artifacts at all; every label is 0.
    Clean,
    /// Runs of `clean_run` clean segments followed by `noisy_run` corrupted ones.
    Alternating { clean_run: usize, noisy_run: usize },
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy::Alternating {
            clean_run: 3,
            noisy_run: 2,
        }
    }
}

impl std::str::FromStr for NoisePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(NoisePolicy::Clean),
            "default" | "alternating" => Ok(NoisePolicy::default()),
            other => Err(Error::InvalidParameter(format!("unknown noise policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_patients: usize,
    pub segments_per_patient: usize,
    pub hr_range: (f64, f64),
    pub policy: NoisePolicy,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
}

impl CorpusSpec {
    pub fn new(n_patients: usize, segments_per_patient: usize, seed: u64) -> Self {
        Self {
            n_patients,
            segments_per_patient,
            hr_range: (50.0, 130.0),
            policy: NoisePolicy::default(),
            seed,
            duration_s: 30.0,
            sample_rate_hz: 40,
        }
    }
}

/// A generated segment with its ground-truth heart rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSegment {
    pub segment: Segment,
    pub hr_bpm: f64,
}

/// Builds one clean-or-noisy, normalized segment with its ground-truth mask.
pub fn synth_segment(
    segment_id: String,
    patient_id: String,
    t_start_s: f64,
    params: &PpgSimParams,
    noise: &NoiseSpec,
) -> Result<Segment> {
    let clean = simulate_clean(params)?;
    let (mut noisy, mask) = inject_noise(&clean, noise)?;
    normalize_samples(&mut noisy.samples);
    Segment::with_mask(
        segment_id,
        patient_id,
        t_start_s,
        noisy.samples,
        noisy.sample_rate_hz,
        mask,
    )
}

fn patient_timeline(spec: &CorpusSpec, patient: usize) -> Result<Vec<SyntheticSegment>> {
    let mut r = rng(derive_indexed(spec.seed, "corpus.patient", patient as u64));
    let (hr_lo, hr_hi) = spec.hr_range;
    let mut hr = r.gen_range(hr_lo..=hr_hi);
    let patient_id = format!("p{patient:04}");
    let cycle_offset = match spec.policy {
        NoisePolicy::Alternating { clean_run, noisy_run } => r.gen_range(0..(clean_run + noisy_run).max(1)),
        NoisePolicy::Clean => 0,
    };
    let mut out = Vec::with_capacity(spec.segments_per_patient);
    for k in 0..spec.segments_per_patient {
        hr = (hr + r.gen_range(-1.5..=1.5)).clamp(hr_lo, hr_hi);
        let seg_seed = r.gen::<u64>();
        let noisy = match spec.policy {
            NoisePolicy::Clean => false,
            NoisePolicy::Alternating { clean_run, noisy_run } => {
                (k + cycle_offset) % (clean_run + noisy_run) >= clean_run
            }
        };
        let noise = if noisy {
            let powerline_level = if r.gen_bool(0.2) {
                r.gen_range(0.1..=MAX_NOISE_LEVEL)
            } else {
                0.0
            };
            NoiseSpec {
                drift_level: r.gen_range(0.0..=MAX_NOISE_LEVEL),
                motion_level: r.gen_range(0.25..=MAX_NOISE_LEVEL),
                powerline_level,
                seed: seg_seed ^ 0x5a5a,
            }
        } else if spec.policy == NoisePolicy::Clean {
            NoiseSpec::clean(seg_seed)
        } else {
            NoiseSpec {
                drift_level: r.gen_range(0.0..=0.15),
                ..NoiseSpec::clean(seg_seed ^ 0x5a5a)
            }
        };
        let params = PpgSimParams {
            hr_bpm: hr,
            duration_s: spec.duration_s,
            sample_rate_hz: spec.sample_rate_hz,
            seed: seg_seed,
        };
        let segment = synth_segment(
            format!("{patient_id}_{k:05}"),
            patient_id.clone(),
            k as f64 * spec.duration_s,
            &params,
            &noise,
        )?;
        out.push(SyntheticSegment { segment, hr_bpm: hr });
    }
    Ok(out)
}

/// Generates a whole corpus: per patient, a contiguous timeline of
/// fixed-length segments whose labels come from the ground-truth masks.
/// Patients are generated in parallel from independent derived seeds.
pub fn build_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticSegment>> {
    if spec.n_patients == 0 || spec.segments_per_patient == 0 {
        return Err(Error::InvalidParameter("corpus counts must be positive".into()));
    }
    let (lo, hi) = spec.hr_range;
    if !(HR_RANGE_BPM.0 <= lo && lo <= hi && hi <= HR_RANGE_BPM.1) {
        return Err(Error::InvalidParameter(format!("bad heart-rate range {lo}..{hi}")));
    }
    if let NoisePolicy::Alternating { clean_run, noisy_run } = spec.policy {
        if clean_run == 0 || noisy_run == 0 {
            return Err(Error::InvalidParameter("alternating runs must be positive".into()));
        }
    }
    let per_patient: Vec<Vec<SyntheticSegment>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|p| patient_timeline(spec, p))
        .collect::<Result<_>>()?;
    Ok(per_patient.into_iter().flatten().collect())
}
