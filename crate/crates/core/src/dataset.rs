//! In-memory segment lookup and the task label file used for fine-tuning.
//!
//! Labels CSV header: `segment_id,label,split`, where `split` is `train` or
//! `test`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Segment;

/// Preprocessed samples keyed by segment id.
#[derive(Debug, Clone, Default)]
pub struct SegmentStore {
    samples: HashMap<String, Vec<f32>>,
}

impl SegmentStore {
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Self {
        Self {
            samples: segments
                .into_iter()
                .map(|s| (s.segment_id.clone(), s.samples.clone()))
                .collect(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, samples: Vec<f32>) {
        self.samples.insert(id.into(), samples);
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.samples
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSegment(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub segment_id: String,
    pub label: f64,
    pub split: String,
}

pub fn write_labels(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    crate::csvio::write_csv(path, &["segment_id", "label", "split"], rows)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["segment_id", "label", "split"] {
        return Err(Error::InvalidData(
            "labels header must be `segment_id,label,split`".into(),
        ));
    }
    let rows: Vec<LabelRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.split != "train" && r.split != "test") {
        return Err(Error::InvalidData(format!(
            "segment {}: unknown split {:?}",
            bad.segment_id, bad.split
        )));
    }
    Ok(rows)
}

/// A segment with a task target, ready for fine-tuning or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub segment_id: String,
    pub samples: Vec<f32>,
    pub label: f64,
    pub quality_y: f64,
}

/// Joins label rows of one split with their segments.
pub fn labeled_examples(segments: &[Segment], labels: &[LabelRow], split: &str) -> Result<Vec<LabeledExample>> {
    let by_id: HashMap<&str, &Segment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    labels
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let seg = by_id
                .get(r.segment_id.as_str())
                .ok_or_else(|| Error::UnknownSegment(r.segment_id.clone()))?;
            Ok(LabeledExample {
                segment_id: r.segment_id.clone(),
                samples: seg.samples.clone(),
                label: r.label,
                quality_y: seg.quality_y,
            })
        })
        .collect()
}
