use std::path::{Path, PathBuf};

use log::info;
use siamquality::autodiff::Scalar;
use siamquality::dataset::{labeled_examples, read_labels, write_labels, LabelRow, SegmentStore};
use siamquality::diagnostics::gradcheck_suite;
use siamquality::eval::{self, at_curve, export_embeddings, render_report, EmbeddingMeta, MetricKind};
use siamquality::model::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, EncoderConfig, HeadKind, ModelBundle, ModelConfig,
};
use siamquality::pairing::{
    build_pairs, make_schedule, read_pairs, read_schedule, sort_curriculum, write_pairs, write_schedule, PairingRules,
    SegmentIndexEntry,
};
use siamquality::quality::artifact_fraction;
use siamquality::seed::derive_seed;
use siamquality::signal::io::{load_segments, read_ppgs, write_segments};
use siamquality::signal::{downsample, downsample_mask, normalize_samples, segment_recording, SampleSeries, Segment};
use siamquality::synth::{build_synthetic_corpus, CorpusSpec};
use siamquality::train::{
    self, finetune, predict, pretrain, FineTuneConfig, FineTuneMode, InDomainPretrain, Precision, TrainConfig,
};
use siamquality::Error;

use crate::config::RunConfig;
use crate::error::CliError;

type CliResult<T = ()> = Result<T, CliError>;

/// Logs the resolved configuration and the derived random streams.
pub fn log_config(cfg: &RunConfig) -> CliResult {
    let seed: u64 = cfg.get("seed")?;
    info!("resolved config:\n{cfg}");
    info!(
        "derived seeds: corpus={} shuffle={} init={} finetune.shuffle={}",
        derive_seed(seed, "corpus"),
        derive_seed(seed, "shuffle"),
        derive_seed(seed, "init"),
        derive_seed(seed, "finetune.shuffle"),
    );
    Ok(())
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult {
    let seed: u64 = cfg.get("seed")?;
    let mut spec = CorpusSpec::new(
        cfg.get("synth.n_patients")?,
        cfg.get("synth.segments_per_patient")?,
        derive_seed(seed, "corpus"),
    );
    spec.hr_range = (cfg.get("synth.hr_min")?, cfg.get("synth.hr_max")?);
    spec.policy = cfg.get("synth.policy")?;
    spec.duration_s = cfg.get("synth.duration_s")?;
    spec.sample_rate_hz = cfg.get("synth.sample_rate_hz")?;
    let test_fraction: f64 = cfg.get("synth.test_fraction")?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CliError::Usage("synth.test_fraction must lie in [0, 1)".into()));
    }

    let corpus = build_synthetic_corpus(&spec)?;
    let segments: Vec<Segment> = corpus.iter().map(|s| s.segment.clone()).collect();
    let manifest = write_segments(out, &segments)?;

    // The last patients form the test split.
    let n_test = ((spec.n_patients as f64 * test_fraction).ceil() as usize).min(spec.n_patients - 1);
    let first_test = spec.n_patients - n_test;
    let labels: Vec<LabelRow> = corpus
        .iter()
        .map(|s| {
            let patient: usize = s.segment.patient_id.trim_start_matches('p').parse().unwrap_or(0);
            LabelRow {
                segment_id: s.segment.segment_id.clone(),
                label: s.hr_bpm,
                split: if patient >= first_test { "test" } else { "train" }.into(),
            }
        })
        .collect();
    write_labels(out.join("labels.csv"), &labels)?;
    info!(
        "wrote {} segments from {} patients ({} test) to {}",
        segments.len(),
        spec.n_patients,
        n_test,
        manifest.display()
    );
    Ok(())
}

/// A recording read from PPGS or from a CSV with a `sample` column and an
/// optional 0/1 `artifact` column.
fn read_recording(path: &Path, csv_rate: u32) -> CliResult<(SampleSeries, Option<Vec<bool>>)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return Ok((read_ppgs(path)?, None));
    }
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = r.headers().map_err(Error::from)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let sample_col =
        col("sample").ok_or_else(|| Error::InvalidData(format!("{}: missing `sample` column", path.display())))?;
    let artifact_col = col("artifact");
    let mut samples = Vec::new();
    let mut mask = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let bad = |what: &str| Error::InvalidData(format!("{} row {}: bad {what}", path.display(), i + 1));
        let v: f32 = field(sample_col).parse().map_err(|_| bad("sample"))?;
        if !v.is_finite() {
            return Err(bad("sample").into());
        }
        samples.push(v);
        if let Some(c) = artifact_col {
            mask.push(match field(c) {
                "0" => false,
                "1" => true,
                _ => return Err(bad("artifact flag").into()),
            });
        }
    }
    let series = SampleSeries::new(samples, csv_rate)?;
    Ok((series, artifact_col.map(|_| mask)))
}

fn resample(series: &SampleSeries, target_hz: u32) -> CliResult<SampleSeries> {
    Ok(downsample(series, target_hz)?)
}

pub fn ingest(cfg: &RunConfig, recordings: &[PathBuf], manifest: Option<&Path>, out: &Path) -> CliResult {
    let target_hz: u32 = cfg.get("ingest.target_hz")?;
    let duration_s: f64 = cfg.get("ingest.duration_s")?;
    let mut segments = Vec::new();

    if let Some(m) = manifest {
        for mut seg in load_segments(m)? {
            let series = resample(&SampleSeries::new(seg.samples, seg.sample_rate_hz)?, target_hz)?;
            seg.samples = series.samples;
            seg.sample_rate_hz = target_hz;
            normalize_samples(&mut seg.samples);
            segments.push(seg);
        }
    }
    for path in recordings {
        let (series, mask) = read_recording(path, cfg.get("ingest.sample_rate_hz")?)?;
        let factor = (series.sample_rate_hz / target_hz.max(1)) as usize;
        let series = resample(&series, target_hz)?;
        let mask = mask.map(|m| downsample_mask(&m, factor));
        let patient = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidData(format!("{}: no usable file name", path.display())))?;
        let window = (duration_s * target_hz as f64).round() as usize;
        for (k, mut seg) in segment_recording(&series, patient, duration_s)?.into_iter().enumerate() {
            if let Some(m) = &mask {
                seg.quality_y = artifact_fraction(&m[k * window..(k + 1) * window])?.value();
            }
            normalize_samples(&mut seg.samples);
            segments.push(seg);
        }
    }
    if segments.is_empty() {
        return Err(CliError::Usage(
            "ingest needs --manifest or at least one recording".into(),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &segments {
        s.validate()?;
        if !seen.insert(s.segment_id.as_str()) {
            return Err(Error::CorruptIndex(s.segment_id.clone()).into());
        }
    }
    let path = write_segments(out, &segments)?;
    info!("ingested {} segments into {}", segments.len(), path.display());
    Ok(())
}

pub fn pair(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult {
    let rules = PairingRules {
        window_s: cfg.get("pair.window_s")?,
        bad_threshold: cfg.get("pair.bad_threshold")?,
        good_epsilon: cfg.get("pair.good_epsilon")?,
    };
    let segments = load_segments(manifest)?;
    let index: Vec<SegmentIndexEntry> = segments.iter().map(SegmentIndexEntry::from).collect();
    let pairs = sort_curriculum(build_pairs(&index, &rules)?);
    let schedule = make_schedule(
        pairs.len(),
        cfg.get("pair.n_stages")?,
        cfg.get("train.epochs_per_stage")?,
    )?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_pairs(out.join("pairs.csv"), &pairs)?;
    write_schedule(out.join("schedule.csv"), &schedule)?;
    info!(
        "{} pairs from {} segments, {} curriculum stages",
        pairs.len(),
        segments.len(),
        schedule.stages.len()
    );
    Ok(())
}

fn model_config(cfg: &RunConfig) -> CliResult<ModelConfig> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            n_blocks: cfg.get("model.n_blocks")?,
            base_channels: cfg.get("model.base_channels")?,
            embedding_dim: cfg.get("model.embedding_dim")?,
            input_length: cfg.get("model.input_length")?,
        },
        z_dim: cfg.get("model.z_dim")?,
        head: None,
    };
    config.validate()?;
    Ok(config)
}

fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let t = TrainConfig {
        batch_size: cfg.get("train.batch_size")?,
        learning_rate: cfg.get("train.learning_rate")?,
        momentum: cfg.get("train.momentum")?,
        weight_decay: cfg.get("train.weight_decay")?,
        epochs_per_stage: cfg.get("train.epochs_per_stage")?,
        seed: cfg.get("seed")?,
        precision: cfg.get("train.precision")?,
    };
    t.validate()?;
    Ok(t)
}

pub struct PretrainArgs<'a> {
    pub manifest: &'a Path,
    pub pairs: &'a Path,
    pub schedule: &'a Path,
    pub init: Option<&'a Path>,
    pub out: &'a Path,
    pub loss_log: &'a Path,
}

fn pretrain_in<T: Scalar>(
    start: &ModelBundle<f32>,
    pairs: &[siamquality::pairing::QualityPair],
    schedule: &siamquality::pairing::CurriculumSchedule,
    store: &SegmentStore,
    tc: &TrainConfig,
) -> CliResult<(ModelBundle<f32>, Vec<train::LossLogEntry>)> {
    let mut model: ModelBundle<T> = start.cast();
    let log = pretrain(&mut model, pairs, schedule, store, tc)?;
    Ok((model.cast(), log))
}

pub fn pretrain_cmd(cfg: &RunConfig, a: PretrainArgs<'_>) -> CliResult {
    let tc = train_config(cfg)?;
    let model_cfg = model_config(cfg)?;
    let start: ModelBundle<f32> = match a.init {
        Some(p) => load_checkpoint_for(p, &model_cfg.encoder)?,
        None => ModelBundle::init(model_cfg, derive_seed(tc.seed, "init"))?,
    };
    let segments = load_segments(a.manifest)?;
    let store = SegmentStore::from_segments(&segments);
    let pairs = read_pairs(a.pairs)?;
    let schedule = read_schedule(a.schedule, tc.epochs_per_stage)?;
    let (model, log) = match tc.precision {
        Precision::F32 => pretrain_in::<f32>(&start, &pairs, &schedule, &store, &tc)?,
        Precision::F64 => pretrain_in::<f64>(&start, &pairs, &schedule, &store, &tc)?,
    };
    create_parent(a.out)?;
    create_parent(a.loss_log)?;
    save_checkpoint(&model, a.out)?;
    train::write_loss_log(a.loss_log, &log)?;
    info!("wrote {} and {}", a.out.display(), a.loss_log.display());
    Ok(())
}

pub struct FinetuneArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub labels: &'a Path,
    pub pairs: Option<&'a Path>,
    pub schedule: Option<&'a Path>,
    pub out: &'a Path,
    pub metric_log: &'a Path,
}

pub fn finetune_cmd(cfg: &RunConfig, a: FinetuneArgs<'_>) -> CliResult {
    let mode: FineTuneMode = cfg.get("finetune.mode")?;
    let task: HeadKind = cfg.get("finetune.task")?;
    let ft = FineTuneConfig {
        batch_size: cfg.get("finetune.batch_size")?,
        learning_rate: cfg.get("finetune.learning_rate")?,
        momentum: cfg.get("finetune.momentum")?,
        weight_decay: cfg.get("finetune.weight_decay")?,
        epochs: cfg.get("finetune.epochs")?,
        seed: cfg.get("seed")?,
    };
    let bundle: ModelBundle<f32> = load_checkpoint(a.checkpoint)?;
    let segments = load_segments(a.manifest)?;
    let labels = read_labels(a.labels)?;
    let train_set = labeled_examples(&segments, &labels, "train")?;
    let val_set = labeled_examples(&segments, &labels, "test")?;

    let in_domain_data = match (a.pairs, a.schedule) {
        (Some(p), Some(s)) => {
            let tc = train_config(cfg)?;
            Some((
                read_pairs(p)?,
                read_schedule(s, tc.epochs_per_stage)?,
                SegmentStore::from_segments(&segments),
                tc,
            ))
        }
        (None, None) => None,
        _ => return Err(CliError::Usage("--pairs and --schedule go together".into())),
    };
    let in_domain = in_domain_data
        .as_ref()
        .map(|(pairs, schedule, store, tc)| InDomainPretrain {
            pairs,
            schedule,
            store,
            config: *tc,
        });
    let validation = (!val_set.is_empty()).then_some(val_set.as_slice());
    let (tuned, log) = finetune(&bundle, &train_set, validation, mode, task, &ft, in_domain)?;
    create_parent(a.out)?;
    create_parent(a.metric_log)?;
    save_checkpoint(&tuned, a.out)?;
    train::write_metric_log(a.metric_log, &log)?;
    info!("fine-tuned on {} examples; wrote {}", train_set.len(), a.out.display());
    Ok(())
}

fn task_metric(kind: HeadKind) -> MetricKind {
    match kind {
        HeadKind::Regression => MetricKind::Mae,
        HeadKind::BinaryClassification => MetricKind::F1,
    }
}

pub fn eval_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    labels: &Path,
    records_out: &Path,
    metrics_out: &Path,
) -> CliResult {
    let model: ModelBundle<f32> = load_checkpoint(checkpoint)?;
    let head = model
        .config()
        .head
        .ok_or_else(|| Error::IncompatibleCheckpoint("checkpoint has no task head".into()))?;
    let split: String = cfg.get("eval.split")?;
    let segments = load_segments(manifest)?;
    let examples = labeled_examples(&segments, &read_labels(labels)?, &split)?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation split").into());
    }
    let records = eval::records(&examples, &predict(&model, &examples, head.kind)?);
    let metric = task_metric(head.kind);
    let value = metric.compute(&records)?;
    create_parent(records_out)?;
    create_parent(metrics_out)?;
    eval::write_records(records_out, &records)?;
    let mut w = csv::Writer::from_path(metrics_out).map_err(Error::from)?;
    w.write_record(["metric", "value"]).map_err(Error::from)?;
    w.write_record(["n", &records.len().to_string()]).map_err(Error::from)?;
    w.write_record([metric.name(), &value.to_string()])
        .map_err(Error::from)?;
    w.flush().map_err(Error::from)?;
    info!("{split}: {} = {value} over {} records", metric.name(), records.len());
    Ok(())
}

pub fn atcurve_cmd(cfg: &RunConfig, records: &Path, out_stem: &Path) -> CliResult {
    let metric: MetricKind = cfg.get("atcurve.metric")?;
    let records = eval::read_records(records)?;
    let curve = at_curve(&records, cfg.get("atcurve.n_bins")?, metric)?;
    create_parent(out_stem)?;
    let (csv, svg) = render_report(&curve, out_stem)?;
    info!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

pub fn embed_cmd(checkpoint: &Path, manifest: &Path, out: &Path) -> CliResult {
    let model: ModelBundle<f32> = load_checkpoint(checkpoint)?;
    let segments = load_segments(manifest)?;
    let rows: Vec<&[f32]> = segments.iter().map(|s| s.samples.as_slice()).collect();
    let h = train::embed_samples(&model, &rows)?;
    let meta: Vec<EmbeddingMeta> = segments
        .iter()
        .map(|s| EmbeddingMeta {
            segment_id: s.segment_id.clone(),
            patient_id: s.patient_id.clone(),
            quality_y: s.quality_y,
        })
        .collect();
    create_parent(out)?;
    export_embeddings(out, &meta, &h)?;
    info!("wrote {} embeddings to {}", segments.len(), out.display());
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> CliResult {
    let cases: usize = cfg.get("gradcheck.cases")?;
    let tolerance: f64 = cfg.get("gradcheck.tolerance")?;
    let checks = gradcheck_suite(cases, cfg.get("seed")?)?;
    let mut worst: f64 = 0.0;
    println!("op,cases,redrawn,max_rel_error,max_abs_error");
    for c in &checks {
        println!(
            "{},{},{},{:.3e},{:.3e}",
            c.op, c.cases, c.redrawn, c.report.max_rel_error, c.report.max_abs_error
        );
        worst = worst.max(c.report.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {tolerance:.0e})");
    if worst.is_nan() || worst >= tolerance {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {tolerance:.0e}"
        )));
    }
    Ok(())
}
