//! "PPGS v1" waveform files and the segment manifest CSV.
//!
//! PPGS layout (little-endian throughout):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `PPGS` |
//! | 2     | version (u16) = 1 |
//! | 4     | sample rate in Hz (u32) |
//! | 8     | sample count (u64) |
//! | 4·n   | samples (binary32) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SampleSeries, Segment};
use crate::error::{Error, Result};

pub const PPGS_MAGIC: [u8; 4] = *b"PPGS";
pub const PPGS_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

pub fn encode_ppgs(series: &SampleSeries) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * series.len());
    buf.extend_from_slice(&PPGS_MAGIC);
    buf.extend_from_slice(&PPGS_VERSION.to_le_bytes());
    buf.extend_from_slice(&series.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&(series.len() as u64).to_le_bytes());
    for v in &series.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_ppgs(bytes: &[u8]) -> Result<SampleSeries> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::InvalidData("PPGS file truncated in header".into()));
    }
    if bytes[..4] != PPGS_MAGIC {
        return Err(Error::InvalidData("not a PPGS file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PPGS_VERSION {
        return Err(Error::InvalidData(format!("unsupported PPGS version {version}")));
    }
    let rate = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidData("PPGS sample count overflows".into()))?;
    if body.len() != expected {
        return Err(Error::InvalidData(format!(
            "PPGS body has {} bytes, header promises {}",
            body.len(),
            expected
        )));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SampleSeries::new(samples, rate).map_err(|_| Error::InvalidData("PPGS sample rate is zero".into()))
}

pub fn write_ppgs(path: impl AsRef<Path>, series: &SampleSeries) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_ppgs(series))?;
    w.flush()?;
    Ok(())
}

pub fn read_ppgs(path: impl AsRef<Path>) -> Result<SampleSeries> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_ppgs(&bytes)
}

/// One row of the segment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub segment_id: String,
    pub patient_id: String,
    pub t_start_s: f64,
    pub quality_y: f64,
    /// PPGS file, relative to the manifest's directory unless absolute.
    pub file: String,
    pub offset_samples: u64,
    pub n_samples: u64,
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    crate::csvio::write_csv(
        path,
        &[
            "segment_id",
            "patient_id",
            "t_start_s",
            "quality_y",
            "file",
            "offset_samples",
            "n_samples",
        ],
        rows,
    )
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = [
        "segment_id",
        "patient_id",
        "t_start_s",
        "quality_y",
        "file",
        "offset_samples",
        "n_samples",
    ];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidData(format!(
            "manifest header must be `{}`",
            expected.join(",")
        )));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// Resolves a manifest `file` entry against the manifest's directory.
pub fn resolve_file(manifest_path: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every segment referenced by a manifest.
///
/// Each PPGS file is read once. Rows are checked for range, label validity
/// and duplicate ids.
pub fn load_segments(manifest_path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let manifest_path = manifest_path.as_ref();
    let rows = read_manifest(manifest_path)?;
    let mut cache: std::collections::HashMap<PathBuf, SampleSeries> = Default::default();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if !seen.insert(row.segment_id.clone()) {
            return Err(Error::CorruptIndex(row.segment_id));
        }
        let path = resolve_file(manifest_path, &row.file);
        if !cache.contains_key(&path) {
            let series = read_ppgs(&path).map_err(|e| match e {
                Error::Io(io) => Error::InvalidData(format!("{}: {io}", path.display())),
                other => other,
            })?;
            cache.insert(path.clone(), series);
        }
        let series = &cache[&path];
        let start = row.offset_samples as usize;
        let end = start
            .checked_add(row.n_samples as usize)
            .filter(|&e| e <= series.len())
            .ok_or_else(|| {
                Error::InvalidData(format!(
                    "segment {}: samples [{}, +{}) outside {} ({} samples)",
                    row.segment_id,
                    row.offset_samples,
                    row.n_samples,
                    path.display(),
                    series.len()
                ))
            })?;
        if row.n_samples == 0 {
            return Err(Error::InvalidData(format!("segment {}: empty", row.segment_id)));
        }
        let seg = Segment {
            segment_id: row.segment_id,
            patient_id: row.patient_id,
            t_start_s: row.t_start_s,
            samples: series.samples[start..end].to_vec(),
            sample_rate_hz: series.sample_rate_hz,
            quality_y: row.quality_y,
            artifact_mask: None,
        };
        seg.validate()?;
        out.push(seg);
    }
    Ok(out)
}

/// Writes segments grouped per patient into one PPGS file each, plus the
/// manifest `manifest.csv`, under `dir`. Returns the manifest path.
pub fn write_segments(dir: impl AsRef<Path>, segments: &[Segment]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut patients: Vec<&str> = Vec::new();
    for s in segments {
        if !patients.contains(&s.patient_id.as_str()) {
            patients.push(&s.patient_id);
        }
    }
    let mut rows = Vec::with_capacity(segments.len());
    for patient in patients {
        let file = format!("{patient}.ppgs");
        let mut samples = Vec::new();
        let mut rate = None;
        for s in segments.iter().filter(|s| s.patient_id == patient) {
            if *rate.get_or_insert(s.sample_rate_hz) != s.sample_rate_hz {
                return Err(Error::InvalidData(format!("patient {patient}: mixed sample rates")));
            }
            rows.push(ManifestRow {
                segment_id: s.segment_id.clone(),
                patient_id: s.patient_id.clone(),
                t_start_s: s.t_start_s,
                quality_y: s.quality_y,
                file: file.clone(),
                offset_samples: samples.len() as u64,
                n_samples: s.samples.len() as u64,
            });
            samples.extend_from_slice(&s.samples);
        }
        write_ppgs(dir.join(&file), &SampleSeries::new(samples, rate.unwrap_or(1))?)?;
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppgs_header_layout() {
        let s = SampleSeries::new(vec![1.0, -2.5], 40).unwrap();
        let bytes = encode_ppgs(&s);
        assert_eq!(
            &bytes[..18],
            &[0x50, 0x50, 0x47, 0x53, 1, 0, 40, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
        assert_eq!(decode_ppgs(&bytes).unwrap(), s);
    }

    #[test]
    fn ppgs_rejects_truncation_and_bad_magic() {
        let bytes = encode_ppgs(&SampleSeries::new(vec![0.5; 8], 40).unwrap());
        assert!(decode_ppgs(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppgs(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_ppgs(&bad).is_err());
    }

    #[test]
    fn segments_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let segs: Vec<Segment> = (0..3)
            .map(|k| Segment {
                segment_id: format!("p{}_{}", k % 2, k),
                patient_id: format!("p{}", k % 2),
                t_start_s: 30.0 * k as f64,
                samples: vec![k as f32 * 0.1; 5],
                sample_rate_hz: 40,
                quality_y: 0.25 * k as f64,
                artifact_mask: None,
            })
            .collect();
        let manifest = write_segments(dir.path(), &segs).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.starts_with("segment_id,patient_id,t_start_s,quality_y,file,offset_samples,n_samples\n"));
        let mut back = load_segments(&manifest).unwrap();
        back.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
        let mut want = segs.clone();
        want.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
        assert_eq!(back, want);
    }

    #[test]
    fn manifest_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_ppgs(dir.path().join("a.ppgs"), &SampleSeries::new(vec![0.0; 10], 1).unwrap()).unwrap();
        let rows = vec![ManifestRow {
            segment_id: "x".into(),
            patient_id: "p".into(),
            t_start_s: 0.0,
            quality_y: 0.0,
            file: "a.ppgs".into(),
            offset_samples: 5,
            n_samples: 6,
        }];
        let m = dir.path().join("m.csv");
        write_manifest(&m, &rows).unwrap();
        assert!(matches!(load_segments(&m), Err(Error::InvalidData(_))));
    }
}
