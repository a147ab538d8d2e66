//! Task metrics, artifact-tolerance curves, and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::LabeledExample;
use crate::error::{Error, Result};

/// One evaluated segment. Class labels are stored as `0.0` / `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub segment_id: String,
    pub quality_y: f64,
    pub target: f64,
    pub prediction: f64,
}

/// Zips examples with their predictions.
pub fn records(examples: &[LabeledExample], predictions: &[f64]) -> Vec<EvalRecord> {
    examples
        .iter()
        .zip(predictions)
        .map(|(e, &p)| EvalRecord {
            segment_id: e.segment_id.clone(),
            quality_y: e.quality_y,
            target: e.label,
            prediction: p,
        })
        .collect()
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    crate::csvio::write_csv(path, &["segment_id", "quality_y", "target", "prediction"], records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records for MAE"));
    }
    let sum: f64 = records.iter().map(|r| (r.prediction - r.target).abs()).sum();
    Ok(sum / records.len() as f64)
}

/// F1 for `positive_class`; 0 when precision and recall are both 0.
pub fn f1(records: &[EvalRecord], positive_class: u8) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records for F1"));
    }
    let pos = positive_class as f64;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for r in records {
        match (r.prediction == pos, r.target == pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mae,
    /// F1 with class 1 as the positive class.
    F1,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mae => "mae",
            MetricKind::F1 => "f1",
        }
    }

    pub fn compute(self, records: &[EvalRecord]) -> Result<f64> {
        match self {
            MetricKind::Mae => mae(records),
            MetricKind::F1 => f1(records, 1),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(MetricKind::Mae),
            "f1" => Ok(MetricKind::F1),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtCurve {
    pub metric: MetricKind,
    /// `u_b = b / n_bins` for `b = 1..=n_bins`.
    pub upper: Vec<f64>,
    /// Records with quality in `((b-1)/n, b/n]`; quality 0 falls in bin 1.
    pub counts: Vec<usize>,
    pub cumulative_counts: Vec<usize>,
    /// Metric over `{quality_y <= u_b}`; `None` for an empty subgroup.
    pub values: Vec<Option<f64>>,
}

/// Artifact-tolerance curve over cumulative quality subgroups.
///
/// Subgroups keep the input order, so the last value is computed over
/// exactly the same sequence as the whole-set metric.
pub fn at_curve(records: &[EvalRecord], n_bins: usize, metric: MetricKind) -> Result<AtCurve> {
    if n_bins == 0 {
        return Err(Error::InvalidParameter("n_bins must be >= 1".into()));
    }
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.quality_y)) {
        return Err(Error::InvalidData(format!(
            "segment {}: quality_y {} outside [0, 1]",
            r.segment_id, r.quality_y
        )));
    }
    let upper: Vec<f64> = (1..=n_bins).map(|b| b as f64 / n_bins as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for r in records {
        let bin = upper.iter().position(|&u| r.quality_y <= u).expect("quality_y <= 1");
        counts[bin] += 1;
    }
    let cumulative_counts = counts
        .iter()
        .scan(0, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    let values = upper
        .iter()
        .map(|&u| {
            let sub: Vec<EvalRecord> = records.iter().filter(|r| r.quality_y <= u).cloned().collect();
            if sub.is_empty() {
                Ok(None)
            } else {
                metric.compute(&sub).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(AtCurve {
        metric,
        upper,
        counts,
        cumulative_counts,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    u: f64,
    count: usize,
    cumulative_count: usize,
    metric: Option<f64>,
}

/// Writes `<stem>.csv` (`u,count,cumulative_count,metric`, empty metric when
/// absent) and `<stem>.svg`. Returns both paths.
pub fn render_report(curve: &AtCurve, stem: impl AsRef<Path>) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let stem = stem.as_ref();
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    let rows = (0..curve.upper.len()).map(|i| ReportRow {
        u: curve.upper[i],
        count: curve.counts[i],
        cumulative_count: curve.cumulative_counts[i],
        metric: curve.values[i],
    });
    crate::csvio::write_csv(&csv_path, &["u", "count", "cumulative_count", "metric"], rows)?;
    std::fs::write(&svg_path, render_svg(curve))?;
    Ok((csv_path, svg_path))
}

/// Reads a report CSV back into a curve.
pub fn read_report(path: impl AsRef<Path>, metric: MetricKind) -> Result<AtCurve> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<ReportRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(AtCurve {
        metric,
        upper: rows.iter().map(|r| r.u).collect(),
        counts: rows.iter().map(|r| r.count).collect(),
        cumulative_counts: rows.iter().map(|r| r.cumulative_count).collect(),
        values: rows.iter().map(|r| r.metric).collect(),
    })
}

fn render_svg(curve: &AtCurve) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let n = curve.upper.len().max(1) as f64;
    let max_count = curve.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let present: Vec<f64> = curve.values.iter().flatten().copied().collect();
    let (lo, hi) = present.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if present.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let slot = pw / n;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#,
        y = M + ph,
        x = M + pw
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{y}" stroke="black"/>"#,
        y = M + ph
    );
    for (i, &c) in curve.counts.iter().enumerate() {
        let bh = ph * c as f64 / max_count;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue" fill-opacity="0.5"><title>{c}</title></rect>"#,
            M + slot * i as f64 + slot * 0.1,
            M + ph - bh,
            slot * 0.8,
            bh
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{:.2}</text>"#,
            M + slot * (i as f64 + 0.5),
            M + ph + 14.0,
            curve.upper[i]
        );
    }
    let points: Vec<String> = curve
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            v.map(|v| {
                format!(
                    "{:.2},{:.2}",
                    M + slot * (i as f64 + 0.5),
                    M + ph - ph * (v - lo) / (hi - lo)
                )
            })
        })
        .collect();
    if !points.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="darkred" stroke-width="2"/>"#,
            points.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">quality upper limit</text>"#,
        M + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{M}" y="{:.2}" font-size="12">{} (line, {lo:.3} to {hi:.3}); count (bars, max {max_count})</text>"#,
        M - 12.0,
        curve.metric.name()
    );
    s.push_str("</svg>\n");
    s
}

/// Metadata carried alongside an embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMeta {
    pub segment_id: String,
    pub patient_id: String,
    pub quality_y: f64,
}

/// Writes `segment_id,patient_id,quality_y,h0..h{d-1}`.
pub fn export_embeddings<T: Scalar>(path: impl AsRef<Path>, meta: &[EmbeddingMeta], h: &Tensor<T>) -> Result<()> {
    let [n, d] = *h.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "embeddings must be 2-D, got {:?}",
            h.shape()
        )));
    };
    if n != meta.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} metadata rows for {n} embeddings",
            meta.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["segment_id".to_string(), "patient_id".into(), "quality_y".into()];
    header.extend((0..d).map(|j| format!("h{j}")));
    w.write_record(&header)?;
    for (i, m) in meta.iter().enumerate() {
        let mut row = vec![m.segment_id.clone(), m.patient_id.clone(), m.quality_y.to_string()];
        row.extend(h.row(i).iter().map(|v| v.as_f64().to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Leave-one-out 1-nearest-neighbour accuracy under Euclidean distance.
/// Ties go to the lowest index.
pub fn nn1_accuracy<T: Scalar>(h: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let [n, _] = *h.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "embeddings must be 2-D, got {:?}",
            h.shape()
        )));
    };
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::EmptyInput("at least two embeddings for 1-NN"));
    }
    let dist = |i: usize, j: usize| -> f64 {
        h.row(i)
            .iter()
            .zip(h.row(j))
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum()
    };
    let correct = (0..n)
        .filter(|&i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let d = dist(i, j);
                if d < best.0 {
                    best = (d, j);
                }
            }
            labels[best.1] == labels[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Per-dimension standard deviation of a `[n, d]` embedding matrix.
pub fn embedding_std<T: Scalar>(h: &Tensor<T>) -> Result<Vec<f64>> {
    let [n, d] = *h.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "embeddings must be 2-D, got {:?}",
            h.shape()
        )));
    };
    if n == 0 {
        return Err(Error::EmptyInput("embeddings"));
    }
    Ok((0..d)
        .map(|j| {
            let col = (0..n).map(|i| h.row(i)[j].as_f64());
            let mean = col.clone().sum::<f64>() / n as f64;
            (col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(y: f64, target: f64, prediction: f64) -> EvalRecord {
        EvalRecord {
            segment_id: format!("s{y}"),
            quality_y: y,
            target,
            prediction,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[rec(0.0, 1.0, 1.0), rec(0.0, 2.0, 2.0)]).unwrap(), 0.0);
        let r = [rec(0.0, 2.0, 0.0), rec(0.0, 2.0, 4.0)];
        assert_eq!(mae(&r).unwrap(), 2.0);
        let flipped: Vec<_> = r
            .iter()
            .map(|r| rec(0.0, r.target, 2.0 * r.target - r.prediction))
            .collect();
        assert_eq!(mae(&flipped).unwrap(), 2.0);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn f1_examples() {
        let perfect = [rec(0.0, 1.0, 1.0), rec(0.0, 0.0, 0.0)];
        assert_eq!(f1(&perfect, 1).unwrap(), 1.0);
        let mixed = [
            rec(0.0, 1.0, 1.0),
            rec(0.0, 0.0, 1.0),
            rec(0.0, 1.0, 0.0),
            rec(0.0, 0.0, 0.0),
        ];
        assert_eq!(f1(&mixed, 1).unwrap(), 0.5);
        assert_eq!(f1(&[rec(0.0, 0.0, 0.0)], 1).unwrap(), 0.0);
        assert!(f1(&[], 1).is_err());
    }

    #[test]
    fn all_clean_curve_is_flat() {
        let r: Vec<_> = (0..7).map(|k| rec(0.0, k as f64, (k * k) as f64 / 3.0)).collect();
        let c = at_curve(&r, 10, MetricKind::Mae).unwrap();
        let global = mae(&r).unwrap();
        assert_eq!(c.counts[0], 7);
        assert!(c.counts[1..].iter().all(|&n| n == 0));
        assert!(c.values.iter().all(|v| *v == Some(global)));
    }

    #[test]
    fn boundaries_and_absent_values() {
        let r = [rec(0.2, 1.0, 0.0), rec(0.25, 1.0, 3.0), rec(1.0, 0.0, 0.0)];
        let c = at_curve(&r, 4, MetricKind::Mae).unwrap();
        assert_eq!(c.upper, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.counts, vec![2, 0, 0, 1]);
        assert_eq!(c.cumulative_counts, vec![2, 2, 2, 3]);
        assert_eq!(c.values[0], Some(1.5));
        let c = at_curve(&[rec(0.9, 0.0, 0.0)], 4, MetricKind::Mae).unwrap();
        assert_eq!(c.values, vec![None, None, None, Some(0.0)]);
        assert!(at_curve(&[rec(1.5, 0.0, 0.0)], 4, MetricKind::Mae).is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r: Vec<_> = (0..30)
            .map(|k| rec(((k * 7) % 11) as f64 / 20.0, (k % 2) as f64, ((k / 2) % 2) as f64))
            .collect();
        let c = at_curve(&r, 10, MetricKind::F1).unwrap();
        let (csv_path, svg_path) = render_report(&c, dir.path().join("report")).unwrap();
        let back = read_report(&csv_path, MetricKind::F1).unwrap();
        assert_eq!(back, c);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("u,count,cumulative_count,metric\n"));
        let svg = std::fs::read_to_string(svg_path).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 11);
    }

    #[test]
    fn nn1_on_separated_clusters() {
        let h = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.0, 5.1]).unwrap();
        assert_eq!(nn1_accuracy(&h, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(nn1_accuracy(&h, &[0, 1, 0, 1]).unwrap(), 0.0);
        let sd = embedding_std(&h).unwrap();
        assert!(sd.iter().all(|&s| s > 2.0));
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let h = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let meta: Vec<_> = (0..2)
            .map(|k| EmbeddingMeta {
                segment_id: format!("s{k}"),
                patient_id: "p".into(),
                quality_y: 0.5,
            })
            .collect();
        export_embeddings(&path, &meta, &h).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "segment_id,patient_id,quality_y,h0,h1,h2");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split_once(',').unwrap().1, lines[2].split_once(',').unwrap().1);
    }
}
