//! Quality pairing of clean anchors with noisy temporal neighbours, and the
//! difficulty-ordered curriculum built on top of the pairs.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::signal::Segment;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentIndexEntry {
    pub segment_id: String,
    pub patient_id: String,
    pub t_start_s: f64,
    pub y: f64,
}

impl From<&Segment> for SegmentIndexEntry {
    fn from(s: &Segment) -> Self {
        Self {
            segment_id: s.segment_id.clone(),
            patient_id: s.patient_id.clone(),
            t_start_s: s.t_start_s,
            y: s.quality_y,
        }
    }
}

/// A clean anchor, its noisy partner, and the pair's difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityPair {
    pub anchor_id: String,
    pub partner_id: String,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingRules {
    /// Candidates must satisfy `|dt| < window_s`.
    pub window_s: f64,
    /// Candidates must satisfy `y > bad_threshold`.
    pub bad_threshold: f64,
    /// Anchors must satisfy `y <= good_epsilon`.
    pub good_epsilon: f64,
}

impl Default for PairingRules {
    fn default() -> Self {
        Self {
            window_s: 300.0,
            bad_threshold: 0.2,
            good_epsilon: 0.0,
        }
    }
}

/// Difficulty of a pair given both labels: `|y_a - y_b|`.
pub fn difficulty(y_a: f64, y_b: f64) -> f64 {
    (y_a - y_b).abs()
}

/// Whether `cand` beats `best` as the partner for an anchor at `t_anchor`:
/// larger `|dt|`, then later time, then smaller segment id.
fn better(cand: &SegmentIndexEntry, best: &SegmentIndexEntry, t_anchor: f64) -> bool {
    let dc = (cand.t_start_s - t_anchor).abs();
    let db = (best.t_start_s - t_anchor).abs();
    dc.total_cmp(&db)
        .then(cand.t_start_s.total_cmp(&best.t_start_s))
        .then(best.segment_id.cmp(&cand.segment_id))
        .is_gt()
}

/// Pairs every anchor with the farthest same-patient noisy segment inside
/// the window. Output is sorted by anchor id, so it does not depend on the
/// order of `index`.
pub fn build_pairs(index: &[SegmentIndexEntry], rules: &PairingRules) -> Result<Vec<QualityPair>> {
    let mut seen = HashSet::with_capacity(index.len());
    for e in index {
        if !seen.insert(e.segment_id.as_str()) {
            return Err(Error::CorruptIndex(e.segment_id.clone()));
        }
        if !e.t_start_s.is_finite() || !(0.0..=1.0).contains(&e.y) {
            return Err(Error::InvalidData(format!(
                "index entry {} has t={} y={}",
                e.segment_id, e.t_start_s, e.y
            )));
        }
    }

    let mut by_patient: BTreeMap<&str, Vec<&SegmentIndexEntry>> = BTreeMap::new();
    for e in index {
        by_patient.entry(&e.patient_id).or_default().push(e);
    }

    let mut pairs = Vec::new();
    for entries in by_patient.values() {
        let mut candidates: Vec<&SegmentIndexEntry> =
            entries.iter().copied().filter(|e| e.y > rules.bad_threshold).collect();
        candidates.sort_by(|a, b| a.t_start_s.total_cmp(&b.t_start_s));
        for anchor in entries.iter().filter(|e| e.y <= rules.good_epsilon) {
            let t = anchor.t_start_s;
            // Candidates with t - w < t_k < t + w form one contiguous run.
            let lo = candidates.partition_point(|c| c.t_start_s <= t - rules.window_s);
            let hi = candidates.partition_point(|c| c.t_start_s < t + rules.window_s);
            let best = candidates[lo..hi]
                .iter()
                .filter(|c| c.segment_id != anchor.segment_id && (c.t_start_s - t).abs() < rules.window_s)
                .fold(None::<&SegmentIndexEntry>, |best, c| match best {
                    Some(b) if !better(c, b, t) => Some(b),
                    _ => Some(c),
                });
            if let Some(partner) = best {
                pairs.push(QualityPair {
                    anchor_id: anchor.segment_id.clone(),
                    partner_id: partner.segment_id.clone(),
                    c: partner.y - anchor.y,
                });
            }
        }
    }
    pairs.sort_by(|a, b| a.anchor_id.cmp(&b.anchor_id));
    Ok(pairs)
}

/// Orders pairs by non-decreasing difficulty; ties by anchor id, then partner id.
pub fn sort_curriculum(mut pairs: Vec<QualityPair>) -> Vec<QualityPair> {
    pairs.sort_by(|a, b| {
        a.c.total_cmp(&b.c)
            .then_with(|| a.anchor_id.cmp(&b.anchor_id))
            .then_with(|| a.partner_id.cmp(&b.partner_id))
    });
    pairs
}

/// Cumulative curriculum stages over a difficulty-sorted pair list.
///
/// Stage `s` holds row indices of blocks `0..=s`; blocks are contiguous
/// quantiles of the sorted order, larger blocks first when the split is
/// uneven.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub stages: Vec<Vec<usize>>,
    pub epochs_per_stage: usize,
}

pub fn make_schedule(n_pairs: usize, n_stages: usize, epochs_per_stage: usize) -> Result<CurriculumSchedule> {
    if n_stages == 0 {
        return Err(Error::InvalidParameter("n_stages must be >= 1".into()));
    }
    if n_stages > n_pairs {
        return Err(Error::InvalidParameter(format!(
            "{n_stages} curriculum stages requested for only {n_pairs} pairs"
        )));
    }
    let base = n_pairs / n_stages;
    let extra = n_pairs % n_stages;
    let mut end = 0;
    let stages = (0..n_stages)
        .map(|s| {
            end += base + usize::from(s < extra);
            (0..end).collect()
        })
        .collect();
    Ok(CurriculumSchedule {
        stages,
        epochs_per_stage,
    })
}

impl CurriculumSchedule {
    /// Row indices of stage `stage`, shuffled for one epoch.
    pub fn shuffled_stage(&self, stage: usize, rng: &mut Rng) -> Vec<usize> {
        let mut rows = self.stages[stage].clone();
        rows.shuffle(rng);
        rows
    }

    /// Checks nesting and that every row index is below `n_pairs`.
    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidData("schedule has no stages".into()));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(&bad) = stage.iter().find(|&&r| r >= n_pairs) {
                return Err(Error::InvalidData(format!("stage {s} references pair row {bad}")));
            }
            if s > 0 {
                let prev: HashSet<_> = self.stages[s - 1].iter().collect();
                let cur: HashSet<_> = stage.iter().collect();
                if !prev.is_subset(&cur) {
                    return Err(Error::InvalidData(format!(
                        "stage {s} does not contain stage {}",
                        s - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[QualityPair]) -> Result<()> {
    crate::csvio::write_csv(path, &["anchor_id", "partner_id", "c"], pairs)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<QualityPair>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["anchor_id", "partner_id", "c"] {
        return Err(Error::InvalidData(
            "pair manifest header must be `anchor_id,partner_id,c`".into(),
        ));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize, Deserialize)]
struct ScheduleRow {
    stage: usize,
    pair_row_index: usize,
}

pub fn write_schedule(path: impl AsRef<Path>, schedule: &CurriculumSchedule) -> Result<()> {
    let rows = schedule.stages.iter().enumerate().flat_map(|(stage, rows)| {
        rows.iter()
            .map(move |&pair_row_index| ScheduleRow { stage, pair_row_index })
    });
    crate::csvio::write_csv(path, &["stage", "pair_row_index"], rows)
}

pub fn read_schedule(path: impl AsRef<Path>, epochs_per_stage: usize) -> Result<CurriculumSchedule> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["stage", "pair_row_index"] {
        return Err(Error::InvalidData(
            "schedule header must be `stage,pair_row_index`".into(),
        ));
    }
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for row in r.deserialize::<ScheduleRow>() {
        let row = row?;
        if row.stage > stages.len() {
            return Err(Error::InvalidData(format!("schedule skips to stage {}", row.stage)));
        }
        if row.stage == stages.len() {
            stages.push(Vec::new());
        }
        stages[row.stage].push(row.pair_row_index);
    }
    Ok(CurriculumSchedule {
        stages,
        epochs_per_stage,
    })
}
