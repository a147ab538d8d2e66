//! Stop-gradient cosine objective, curriculum pretraining, and the three
//! fine-tuning configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dataset::{LabeledExample, SegmentStore};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{HeadConfig, HeadKind, ModelBundle, Param, ParamGroup};
use crate::pairing::{CurriculumSchedule, QualityPair};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::InvalidParameter(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_per_stage: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs_per_stage: 1,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(
                "pretraining batch_size must be >= 2 (the projector normalizes over the batch)".into(),
            ));
        }
        validate_optim(self.batch_size, self.learning_rate, self.momentum, self.weight_decay)
    }
}

/// Splits `rows` into batches of `size`, folding a trailing single row into
/// the previous batch so every batch has batch statistics.
fn pair_batches(rows: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = rows.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = rows.len() - 1 - out.last().map_or(0, |b| b.len());
        *out.last_mut().unwrap() = &rows[start..];
    }
    out
}

fn validate_optim(batch_size: usize, lr: f64, momentum: f64, wd: f64) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidParameter(format!("learning_rate {lr} must be positive")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidParameter(format!("momentum {momentum} outside [0, 1)")));
    }
    if !(wd.is_finite() && wd >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "weight_decay {wd} must be non-negative"
        )));
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay:
/// `v <- mu v + g + wd theta`, `theta <- theta - lr v`.
///
/// Parameters without a gradient are left untouched.
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>]) {
        if self.velocity.len() != params.len() {
            self.velocity = (0..params.len()).map(|_| None).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let v = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((theta, &gv), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = mu * *vel + gv + wd * *theta;
                *theta -= lr * *vel;
            }
        }
    }
}

/// Symmetric stop-gradient cosine loss
/// `-(mean cos(p1, sg(z2)) + mean cos(p2, sg(z1))) / 2`, in `[-1, 1]`.
pub fn pair_loss_graph<T: Scalar>(g: &mut Graph<T>, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    let t2 = g.stop_gradient(z2);
    let t1 = g.stop_gradient(z1);
    let c1 = g.cosine_similarity(p1, t2)?;
    let c2 = g.cosine_similarity(p2, t1)?;
    let m1 = g.mean(c1);
    let m2 = g.mean(c2);
    let s = g.add(m1, m2)?;
    Ok(g.scale(s, -0.5))
}

/// [`pair_loss_graph`] for one pair of vectors.
pub fn pair_loss<T: Scalar>(p1: &[T], z1: &[T], p2: &[T], z2: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let mut leaf = |v: &[T]| -> Result<Var> { Ok(g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?)) };
    let (a, b, c, d) = (leaf(p1)?, leaf(z1)?, leaf(p2)?, leaf(z2)?);
    let l = pair_loss_graph(&mut g, a, b, c, d)?;
    g.value(l).item()
}

fn collect_grads<T: Scalar>(g: &Graph<T>, loss: Var, vars: &[Var]) -> Result<Vec<Option<Tensor<T>>>> {
    let mut grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

/// Fails when any parameter has left the finite range.
fn check_finite<T: Scalar>(bundle: &ModelBundle<T>) -> Result<()> {
    match bundle
        .params()
        .iter()
        .find(|p| p.value.data().iter().any(|v| !v.as_f64().is_finite()))
    {
        Some(p) => Err(Error::Numeric(format!(
            "parameter {} diverged to a non-finite value",
            p.name
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossLogEntry]) -> Result<()> {
    crate::csvio::write_csv(path, &["stage", "epoch", "mean_loss"], log)
}

/// One optimization step on a batch of (anchor, partner) sample pairs.
/// Returns the batch loss.
fn pretrain_step<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Sgd<T>,
    anchors: &[&[f32]],
    partners: &[&[f32]],
) -> Result<f64> {
    let x1 = bundle.batch_input(anchors)?;
    let x2 = bundle.batch_input(partners)?;
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, |grp| grp != ParamGroup::Head);
    let (x1, x2) = (g.constant(x1), g.constant(x2));
    let h1 = bundle.encode_graph(&mut g, &b, x1)?;
    let h2 = bundle.encode_graph(&mut g, &b, x2)?;
    let z1 = bundle.project_graph(&mut g, &b, h1)?;
    let z2 = bundle.project_graph(&mut g, &b, h2)?;
    let p1 = bundle.predict_graph(&mut g, &b, z1)?;
    let p2 = bundle.predict_graph(&mut g, &b, z2)?;
    let loss = pair_loss_graph(&mut g, p1, z1, p2, z2)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite pretraining loss {value}")));
    }
    let grads = collect_grads(&g, loss, b.vars())?;
    opt.step(bundle.params_mut(), &grads);
    Ok(value)
}

/// Curriculum pretraining: for each stage in order, `epochs_per_stage`
/// epochs over the stage's pairs, shuffled per epoch from the config seed.
///
/// Every pair's segments are resolved before the first step. Returns the
/// per-epoch mean losses.
pub fn pretrain<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    pairs: &[QualityPair],
    schedule: &CurriculumSchedule,
    store: &SegmentStore,
    cfg: &TrainConfig,
) -> Result<Vec<LossLogEntry>> {
    cfg.validate()?;
    schedule.validate(pairs.len())?;
    if let Some(s) = schedule.stages.iter().position(|s| s.len() < 2) {
        return Err(Error::InvalidParameter(format!(
            "curriculum stage {s} has fewer than two pairs"
        )));
    }
    let resolved: Vec<(&[f32], &[f32])> = pairs
        .iter()
        .map(|p| Ok((store.get(&p.anchor_id)?, store.get(&p.partner_id)?)))
        .collect::<Result<_>>()?;
    let len = bundle.config().encoder.input_length;
    if let Some((a, _)) = resolved.iter().find(|(a, b)| a.len() != len || b.len() != len) {
        return Err(Error::ShapeMismatch(format!(
            "pair segment has {} samples, model expects {len}",
            a.len()
        )));
    }

    let mut shuffle = rng(derive_seed(cfg.seed, "shuffle"));
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    for stage in 0..schedule.stages.len() {
        for epoch in 0..schedule.epochs_per_stage {
            let order = schedule.shuffled_stage(stage, &mut shuffle);
            let mut total = 0.0;
            for batch in pair_batches(&order, cfg.batch_size) {
                let anchors: Vec<&[f32]> = batch.iter().map(|&i| resolved[i].0).collect();
                let partners: Vec<&[f32]> = batch.iter().map(|&i| resolved[i].1).collect();
                let loss = pretrain_step(bundle, &mut opt, &anchors, &partners).map_err(|e| match e {
                    Error::DegenerateVector => {
                        Error::Numeric(format!("stage {stage} epoch {epoch}: network output collapsed to zero"))
                    }
                    e => e,
                })?;
                total += loss * batch.len() as f64;
            }
            check_finite(bundle)?;
            let mean_loss = total / order.len().max(1) as f64;
            log::info!("pretrain stage {stage} epoch {epoch}: mean loss {mean_loss:.5}");
            log.push(LossLogEntry {
                stage,
                epoch,
                mean_loss,
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    FineTuneAll,
    FineTuneLast,
    InDomainPretrainThenLast,
}

impl std::str::FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FineTuneMode::FineTuneAll),
            "last" => Ok(FineTuneMode::FineTuneLast),
            "indomain_last" | "in_domain_last" => Ok(FineTuneMode::InDomainPretrainThenLast),
            other => Err(Error::InvalidParameter(format!("unknown fine-tune mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 5,
            seed: 0,
        }
    }
}

/// Self-supervised pretraining on the target dataset's own quality pairs,
/// run before the head is trained in [`FineTuneMode::InDomainPretrainThenLast`].
pub struct InDomainPretrain<'a> {
    pub pairs: &'a [QualityPair],
    pub schedule: &'a CurriculumSchedule,
    pub store: &'a SegmentStore,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLogEntry {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metric_log(path: impl AsRef<Path>, log: &[MetricLogEntry]) -> Result<()> {
    crate::csvio::write_csv(path, &["epoch", "split", "metric", "value"], log)
}

fn check_labels(examples: &[LabeledExample], task: HeadKind) -> Result<()> {
    for e in examples {
        let ok = match task {
            HeadKind::Regression => e.label.is_finite(),
            HeadKind::BinaryClassification => e.label == 0.0 || e.label == 1.0,
        };
        if !ok {
            return Err(Error::InvalidData(format!(
                "segment {}: label {} does not fit a {task:?} task",
                e.segment_id, e.label
            )));
        }
    }
    Ok(())
}

fn head_for(examples: &[LabeledExample], task: HeadKind) -> HeadConfig {
    match task {
        HeadKind::BinaryClassification => HeadConfig::new(task),
        HeadKind::Regression => {
            let n = examples.len() as f64;
            let mean = examples.iter().map(|e| e.label).sum::<f64>() / n;
            let var = examples.iter().map(|e| (e.label - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            HeadConfig {
                kind: task,
                target_offset: mean,
                target_scale: if sd > 1e-12 { sd } else { 1.0 },
            }
        }
    }
}

/// Batch loss of the task head given precomputed or live embeddings.
fn task_loss<T: Scalar>(g: &mut Graph<T>, out: Var, labels: &[f64], head: &HeadConfig) -> Result<Var> {
    match head.kind {
        HeadKind::Regression => {
            let targets: Vec<T> = labels
                .iter()
                .map(|&y| T::lit((y - head.target_offset) / head.target_scale))
                .collect();
            g.mse(out, &targets)
        }
        HeadKind::BinaryClassification => {
            let classes: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            g.softmax_cross_entropy(out, &classes)
        }
    }
}

/// Per-feature standardization of embeddings used while the head trains.
///
/// Embeddings carry a large shared offset and very uneven feature scales,
/// which makes plain SGD on the head slow and oscillatory. The head is
/// trained on standardized features and the scaling is folded back into its
/// weights afterwards, so the stored head stays an affine map on raw `h`.
struct FeatureScaling<T> {
    shift: Vec<T>,
    inv_scale: Vec<T>,
}

impl<T: Scalar> FeatureScaling<T> {
    fn fit(h: &Tensor<T>) -> Self {
        let (n, d) = (h.shape()[0], h.shape()[1]);
        let mut shift = Vec::with_capacity(d);
        let mut inv_scale = Vec::with_capacity(d);
        for j in 0..d {
            let col = (0..n).map(|i| h.row(i)[j].as_f64());
            let mean = col.clone().sum::<f64>() / n as f64;
            let sd = (col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            shift.push(T::lit(mean));
            inv_scale.push(T::lit(if sd > 1e-8 { 1.0 / sd } else { 1.0 }));
        }
        Self { shift, inv_scale }
    }

    fn apply(&self, g: &mut Graph<T>, h: Var, rows: usize) -> Result<Var> {
        let d = self.shift.len();
        let neg = g.constant(Tensor::from_fn(&[rows, d], |i| T::zero() - self.shift[i % d]));
        let scale = g.constant(Tensor::from_fn(&[rows, d], |i| self.inv_scale[i % d]));
        let centered = g.add(h, neg)?;
        g.mul(centered, scale)
    }

    /// Copy of `model` whose head acts on raw embeddings.
    fn fold(&self, model: &ModelBundle<T>) -> ModelBundle<T> {
        let mut out = model.clone();
        let d = self.shift.len();
        let params = out.params_mut();
        let w_idx = params.iter().position(|p| p.name == "head.w").expect("head present");
        let b_idx = params.iter().position(|p| p.name == "head.b").expect("head present");
        let outputs = params[w_idx].value.shape()[0];
        let mut offsets = vec![T::zero(); outputs];
        for (o, offset) in offsets.iter_mut().enumerate() {
            let row = &mut params[w_idx].value.data_mut()[o * d..(o + 1) * d];
            for ((w, &inv), &shift) in row.iter_mut().zip(&self.inv_scale).zip(&self.shift) {
                *w *= inv;
                *offset += *w * shift;
            }
        }
        for (b, off) in params[b_idx].value.data_mut().iter_mut().zip(offsets) {
            *b -= off;
        }
        out
    }
}

/// Trains a zero-initialized task head, and with
/// [`FineTuneMode::FineTuneAll`] the encoder as well.
///
/// Returns the tuned bundle and a metric log with the per-epoch training
/// loss, plus the task metric on `validation` when given.
pub fn finetune<T: Scalar>(
    bundle: &ModelBundle<T>,
    train: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    mode: FineTuneMode,
    task: HeadKind,
    cfg: &FineTuneConfig,
    in_domain: Option<InDomainPretrain<'_>>,
) -> Result<(ModelBundle<T>, Vec<MetricLogEntry>)> {
    validate_optim(cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("fine-tuning dataset"));
    }
    check_labels(train, task)?;
    if let Some(v) = validation {
        check_labels(v, task)?;
    }

    let mut base = bundle.clone();
    match (mode, in_domain) {
        (FineTuneMode::InDomainPretrainThenLast, Some(d)) => {
            pretrain(&mut base, d.pairs, d.schedule, d.store, &d.config)?;
        }
        (FineTuneMode::InDomainPretrainThenLast, None) => {
            return Err(Error::InvalidParameter(
                "in-domain fine-tuning needs in-domain pairs".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::InvalidParameter(
                "in-domain pairs given for a mode that does not use them".into(),
            ))
        }
        (_, None) => {}
    }

    let head = head_for(train, task);
    let mut model = base.with_new_head(head)?;
    let train_encoder = mode == FineTuneMode::FineTuneAll;

    let start_h = embed_examples(&model, train)?;
    let scaling = FeatureScaling::fit(&start_h);
    // With a frozen encoder the embeddings never change, so keep them.
    let frozen_h = if train_encoder { None } else { Some(start_h) };

    let mut shuffle = rng(derive_seed(cfg.seed, "finetune.shuffle"));
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<f64> = batch.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let b = model.bind(&mut g, |grp| {
                grp == ParamGroup::Head || (train_encoder && grp == ParamGroup::Encoder)
            });
            let h = match &frozen_h {
                Some(h) => {
                    let width = h.shape()[1];
                    let rows: Vec<T> = batch.iter().flat_map(|&i| h.row(i).iter().copied()).collect();
                    g.constant(Tensor::new(vec![batch.len(), width], rows)?)
                }
                None => {
                    let rows: Vec<&[f32]> = batch.iter().map(|&i| train[i].samples.as_slice()).collect();
                    let x = g.constant(model.batch_input(&rows)?);
                    model.encode_graph(&mut g, &b, x)?
                }
            };
            let h = scaling.apply(&mut g, h, batch.len())?;
            let out = model.head_graph(&mut g, &b, h, task)?;
            let loss = task_loss(&mut g, out, &labels, &head)?;
            let value = g.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss {value}")));
            }
            total += value * batch.len() as f64;
            let grads = collect_grads(&g, loss, b.vars())?;
            opt.step(model.params_mut(), &grads);
        }
        check_finite(&model)?;
        let mean = total / train.len() as f64;
        log.push(MetricLogEntry {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: mean,
        });
        if let Some(val) = validation.filter(|v| !v.is_empty()) {
            let records = eval::records(val, &predict(&scaling.fold(&model), val, task)?);
            let (metric, value) = match task {
                HeadKind::Regression => ("mae", eval::mae(&records)?),
                HeadKind::BinaryClassification => ("f1", eval::f1(&records, 1)?),
            };
            log.push(MetricLogEntry {
                epoch,
                split: "val".into(),
                metric: metric.into(),
                value,
            });
        }
    }
    Ok((scaling.fold(&model), log))
}

const INFERENCE_BATCH: usize = 64;

/// Encoder embeddings `[n, embedding_dim]` for a list of examples.
pub fn embed_examples<T: Scalar>(model: &ModelBundle<T>, examples: &[LabeledExample]) -> Result<Tensor<T>> {
    let rows: Vec<&[f32]> = examples.iter().map(|e| e.samples.as_slice()).collect();
    embed_samples(model, &rows)
}

pub fn embed_samples<T: Scalar>(model: &ModelBundle<T>, rows: &[&[f32]]) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("segments to embed"));
    }
    let mut data = Vec::new();
    for chunk in rows.chunks(INFERENCE_BATCH) {
        data.extend_from_slice(model.encode(&model.batch_input(chunk)?)?.data());
    }
    let width = model.config().encoder.embedding_dim;
    Tensor::new(vec![rows.len(), width], data)
}

/// Task predictions: de-standardized values for regression, the argmax class
/// (as 0.0 / 1.0) for classification.
pub fn predict<T: Scalar>(model: &ModelBundle<T>, examples: &[LabeledExample], task: HeadKind) -> Result<Vec<f64>> {
    let h = embed_examples(model, examples)?;
    let out = model.head_forward(&h, task)?;
    Ok(match task {
        HeadKind::Regression => out.data().iter().map(|v| v.as_f64()).collect(),
        HeadKind::BinaryClassification => out
            .data()
            .chunks_exact(2)
            .map(|l| if l[1] > l[0] { 1.0 } else { 0.0 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, FD_STEP};
    use crate::model::{EncoderConfig, ModelConfig};
    use crate::pairing::make_schedule;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn loss_extremes() {
        let a = unit(&[1.0, 2.0, -0.5]);
        let b = unit(&[-0.3, 0.1, 0.8]);
        let l = pair_loss(&a, &b, &b, &a).unwrap();
        assert!((l + 1.0).abs() < 1e-7, "{l}");
        let l = pair_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(matches!(
            pair_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn loss_gradient_only_through_predictions() {
        let inputs: Vec<Tensor<f64>> = (0..4)
            .map(|k| Tensor::from_fn(&[3, 5], |i| ((i * (k + 3) % 7) as f64 - 3.0) / 2.0 + 0.1 * k as f64))
            .collect();
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = pair_loss_graph(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(v[1]).is_none() && grads.get(v[3]).is_none());
        assert!(grads.get(v[0]).is_some() && grads.get(v[2]).is_some());

        let z1 = inputs[1].clone();
        let z2 = inputs[3].clone();
        let report = check_gradients(&[inputs[0].clone(), inputs[2].clone()], FD_STEP, |g, v| {
            let (z1, z2) = (g.constant(z1.clone()), g.constant(z2.clone()));
            pair_loss_graph(g, v[0], z1, v[1], z2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let cfg = ModelConfig::default();
        let mut m = ModelBundle::<f32>::init(cfg, 1).unwrap();
        let before = m.clone();
        let grads: Vec<_> = m
            .params()
            .iter()
            .map(|p| Some(p.value.map(|v| v * 3.0 + 1.0)))
            .collect();
        let mut opt = Sgd::new(0.0, 0.9, 1e-4);
        opt.step(m.params_mut(), &grads);
        opt.step(m.params_mut(), &grads);
        assert_eq!(m, before);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_blocks: 2,
                base_channels: 4,
                embedding_dim: 8,
                input_length: 64,
            },
            z_dim: 16,
            head: None,
        }
    }

    fn wave(phase: f32, period: f32) -> Vec<f32> {
        (0..64)
            .map(|i| ((i as f32 * std::f32::consts::TAU / period + phase).sin() + 1.0) / 2.0)
            .collect()
    }

    fn identical_pairs(n: usize) -> (Vec<QualityPair>, SegmentStore) {
        let mut store = SegmentStore::default();
        let pairs = (0..n)
            .map(|k| {
                let id = format!("s{k}");
                store.insert(id.clone(), wave(k as f32 * 0.7, 8.0 + (k % 5) as f32 * 3.0));
                QualityPair {
                    anchor_id: id.clone(),
                    partner_id: id,
                    c: 0.0,
                }
            })
            .collect();
        (pairs, store)
    }

    #[test]
    fn batches_never_end_in_a_single_row() {
        let rows: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = pair_batches(&rows, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = pair_batches(&rows, 3).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);
        let flat: Vec<usize> = pair_batches(&rows, 2).concat();
        assert_eq!(flat, rows);
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let (pairs, store) = identical_pairs(4);
        let sched = make_schedule(4, 1, 0).unwrap();
        let init = ModelBundle::<f32>::init(tiny(), 5).unwrap();
        let mut m = init.clone();
        let log = pretrain(&mut m, &pairs, &sched, &store, &TrainConfig::default()).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, init);
    }

    #[test]
    fn unknown_segment_fails_before_training() {
        let (mut pairs, store) = identical_pairs(4);
        pairs[3].partner_id = "missing".into();
        let sched = make_schedule(4, 1, 1).unwrap();
        let init = ModelBundle::<f32>::init(tiny(), 5).unwrap();
        let mut m = init.clone();
        let err = pretrain(&mut m, &pairs, &sched, &store, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownSegment(_)));
        assert_eq!(m, init);
    }

    #[test]
    fn identical_views_align() {
        let (pairs, store) = identical_pairs(16);
        let sched = make_schedule(16, 1, 1000).unwrap();
        // A wider z gives the predictor bottleneck room to approximate the identity.
        let config = ModelConfig { z_dim: 64, ..tiny() };
        let mut m = ModelBundle::<f32>::init(config, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let log = pretrain(&mut m, &pairs, &sched, &store, &cfg).unwrap();
        // One full batch per epoch, so epochs count optimizer steps.
        let reached = log.iter().position(|e| e.mean_loss < -0.99);
        assert!(reached.is_some(), "final loss {}", log.last().unwrap().mean_loss);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (pairs, store) = identical_pairs(12);
        let sched = make_schedule(12, 3, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ModelBundle::<f32>::init(tiny(), 2).unwrap();
            let log = pretrain(&mut m, &pairs, &sched, &store, &cfg).unwrap();
            (m, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_a_numeric_error() {
        let (pairs, store) = identical_pairs(12);
        let sched = make_schedule(12, 1, 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        let mut m = ModelBundle::<f32>::init(tiny(), 2).unwrap();
        let err = pretrain(&mut m, &pairs, &sched, &store, &cfg).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    fn labeled(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|k| {
                let period = 8.0 + (k % 4) as f32 * 4.0;
                LabeledExample {
                    segment_id: format!("e{k}"),
                    samples: wave(k as f32 * 0.3, period),
                    label: 60.0 * 40.0 / period as f64,
                    quality_y: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn finetune_last_freezes_encoder() {
        let m = ModelBundle::<f32>::init(tiny(), 4).unwrap();
        let data = labeled(12);
        let cfg = FineTuneConfig {
            epochs: 3,
            ..FineTuneConfig::default()
        };
        let (tuned, log) = finetune(
            &m,
            &data,
            Some(&data),
            FineTuneMode::FineTuneLast,
            HeadKind::Regression,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(
            tuned.group_bytes(ParamGroup::Encoder),
            m.group_bytes(ParamGroup::Encoder)
        );
        assert_eq!(
            tuned.group_bytes(ParamGroup::Projector),
            m.group_bytes(ParamGroup::Projector)
        );
        assert_eq!(log.iter().filter(|e| e.split == "val").count(), 3);

        let (all, _) = finetune(
            &m,
            &data,
            None,
            FineTuneMode::FineTuneAll,
            HeadKind::Regression,
            &cfg,
            None,
        )
        .unwrap();
        assert_ne!(all.group_bytes(ParamGroup::Encoder), m.group_bytes(ParamGroup::Encoder));
    }

    #[test]
    fn in_domain_with_zero_epochs_equals_last() {
        let m = ModelBundle::<f32>::init(tiny(), 4).unwrap();
        let data = labeled(8);
        let (pairs, store) = identical_pairs(4);
        let sched = make_schedule(4, 2, 0).unwrap();
        let cfg = FineTuneConfig {
            epochs: 2,
            ..FineTuneConfig::default()
        };
        let (last, log_last) = finetune(
            &m,
            &data,
            None,
            FineTuneMode::FineTuneLast,
            HeadKind::Regression,
            &cfg,
            None,
        )
        .unwrap();
        let in_domain = InDomainPretrain {
            pairs: &pairs,
            schedule: &sched,
            store: &store,
            config: TrainConfig::default(),
        };
        let (idl, log_idl) = finetune(
            &m,
            &data,
            None,
            FineTuneMode::InDomainPretrainThenLast,
            HeadKind::Regression,
            &cfg,
            Some(in_domain),
        )
        .unwrap();
        assert_eq!(last, idl);
        assert_eq!(log_last, log_idl);
    }

    #[test]
    fn finetune_all_memorizes_one_example() {
        let m = ModelBundle::<f32>::init(tiny(), 4).unwrap();
        let data = labeled(1);
        let cfg = FineTuneConfig {
            epochs: 200,
            batch_size: 1,
            ..FineTuneConfig::default()
        };
        let (_, log) = finetune(
            &m,
            &data,
            None,
            FineTuneMode::FineTuneAll,
            HeadKind::Regression,
            &cfg,
            None,
        )
        .unwrap();
        assert!(log.last().unwrap().value < 1e-3, "{:?}", log.last());
    }

    #[test]
    fn finetune_rejects_bad_inputs() {
        let m = ModelBundle::<f32>::init(tiny(), 4).unwrap();
        let cfg = FineTuneConfig::default();
        assert!(matches!(
            finetune(
                &m,
                &[],
                None,
                FineTuneMode::FineTuneAll,
                HeadKind::Regression,
                &cfg,
                None
            ),
            Err(Error::EmptyInput(_))
        ));
        let data = labeled(3);
        assert!(finetune(
            &m,
            &data,
            None,
            FineTuneMode::FineTuneAll,
            HeadKind::BinaryClassification,
            &cfg,
            None
        )
        .is_err());
        assert!(finetune(
            &m,
            &data,
            None,
            FineTuneMode::InDomainPretrainThenLast,
            HeadKind::Regression,
            &cfg,
            None
        )
        .is_err());
    }

    #[test]
    fn binary_finetune_learns_separable_task() {
        let m = ModelBundle::<f32>::init(tiny(), 4).unwrap();
        let mut data = labeled(16);
        for e in &mut data {
            e.label = if e.label > 200.0 { 1.0 } else { 0.0 };
        }
        let cfg = FineTuneConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 0.01,
            ..FineTuneConfig::default()
        };
        let (tuned, _) = finetune(
            &m,
            &data,
            None,
            FineTuneMode::FineTuneAll,
            HeadKind::BinaryClassification,
            &cfg,
            None,
        )
        .unwrap();
        let records = eval::records(&data, &predict(&tuned, &data, HeadKind::BinaryClassification).unwrap());
        assert!(eval::f1(&records, 1).unwrap() > 0.9);
    }
}
