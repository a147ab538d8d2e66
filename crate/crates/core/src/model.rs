//! Mini 1D residual encoder with SimSiam projector and predictor, optional
//! task head, and the "SQCK v1" checkpoint format.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::rng;

pub const STEM_KERNEL: usize = 7;
pub const BLOCK_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub input_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            base_channels: 8,
            embedding_dim: 64,
            input_length: 1200,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.n_blocks) {
            return Err(Error::InvalidParameter(format!(
                "n_blocks {} outside 2..=8",
                self.n_blocks
            )));
        }
        if self.base_channels == 0 || self.input_length == 0 {
            return Err(Error::InvalidParameter(
                "base_channels and input_length must be positive".into(),
            ));
        }
        if self.embedding_dim < 8 {
            return Err(Error::InvalidParameter(format!(
                "embedding_dim {} < 8",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Output channels of residual block `i`; doubles every two blocks.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << (i / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Regression,
    BinaryClassification,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::BinaryClassification => 2,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::BinaryClassification => "binary",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(HeadKind::Regression),
            "binary" | "binary_classification" => Ok(HeadKind::BinaryClassification),
            other => Err(Error::InvalidParameter(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Task head on top of `h`. Regression outputs are de-standardized with
/// `prediction = offset + scale * raw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub target_offset: f64,
    pub target_scale: f64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            target_offset: 0.0,
            target_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub z_dim: usize,
    pub head: Option<HeadConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            z_dim: 128,
            head: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.z_dim < 4 {
            return Err(Error::InvalidParameter(format!("z_dim {} < 4", self.z_dim)));
        }
        Ok(())
    }

    pub fn predictor_hidden(&self) -> usize {
        self.z_dim / 4
    }

    /// `key=value` lines stored in checkpoints.
    pub fn to_blob(&self) -> String {
        let e = &self.encoder;
        let mut s = format!(
            "n_blocks={}\nbase_channels={}\nembedding_dim={}\ninput_length={}\nz_dim={}\n",
            e.n_blocks, e.base_channels, e.embedding_dim, e.input_length, self.z_dim
        );
        match &self.head {
            None => s.push_str("head=none\n"),
            Some(h) => s.push_str(&format!(
                "head={}\nhead.target_offset={}\nhead.target_scale={}\n",
                h.kind.as_str(),
                h.target_offset,
                h.target_scale
            )),
        }
        s
    }

    pub fn from_blob(blob: &str) -> Result<Self> {
        let bad = |m: String| Error::IncompatibleCheckpoint(m);
        let mut kv = HashMap::new();
        for line in blob.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad config line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("config missing {k}")));
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let head = match get("head")? {
            "none" => None,
            kind => Some(HeadConfig {
                kind: kind.parse().map_err(|_| bad(format!("bad head {kind}")))?,
                target_offset: float("head.target_offset")?,
                target_scale: float("head.target_scale")?,
            }),
        };
        let cfg = Self {
            encoder: EncoderConfig {
                n_blocks: int("n_blocks")?,
                base_channels: int("base_channels")?,
                embedding_dim: int("embedding_dim")?,
                input_length: int("input_length")?,
            },
            z_dim: int("z_dim")?,
            head,
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Projector,
    Predictor,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("enc") => ParamGroup::Encoder,
            Some("proj") => ParamGroup::Projector,
            Some("pred") => ParamGroup::Predictor,
            _ => ParamGroup::Head,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Fan(usize),
    Zeros,
    Ones,
}

/// Canonical parameter list (name, shape, initializer) for a config.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let e = &cfg.encoder;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: &str, c_out: usize, c_in: usize, k: usize| {
        out.push((format!("{name}.w"), vec![c_out, c_in, k], Init::Fan(c_in * k)));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize| {
        out.push((format!("{name}.g"), vec![c], Init::Ones));
        out.push((format!("{name}.b"), vec![c], Init::Zeros));
    };
    let fc = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d_out: usize, d_in: usize| {
        out.push((format!("{name}.w"), vec![d_out, d_in], Init::Fan(d_in)));
        out.push((format!("{name}.b"), vec![d_out], Init::Zeros));
    };

    conv(&mut out, "enc.stem.conv", e.base_channels, 1, STEM_KERNEL);
    norm(&mut out, "enc.stem.norm", e.base_channels);
    let mut c_in = e.base_channels;
    for i in 0..e.n_blocks {
        let c_out = e.block_channels(i);
        conv(&mut out, &format!("enc.b{i}.conv1"), c_out, c_in, BLOCK_KERNEL);
        norm(&mut out, &format!("enc.b{i}.norm1"), c_out);
        conv(&mut out, &format!("enc.b{i}.conv2"), c_out, c_out, BLOCK_KERNEL);
        norm(&mut out, &format!("enc.b{i}.norm2"), c_out);
        conv(&mut out, &format!("enc.b{i}.down"), c_out, c_in, 1);
        norm(&mut out, &format!("enc.b{i}.down_norm"), c_out);
        c_in = c_out;
    }
    fc(&mut out, "enc.fc", e.embedding_dim, c_in);
    fc(&mut out, "proj.fc1", cfg.z_dim, e.embedding_dim);
    norm(&mut out, "proj.norm", cfg.z_dim);
    fc(&mut out, "proj.fc2", cfg.z_dim, cfg.z_dim);
    fc(&mut out, "pred.fc1", cfg.predictor_hidden(), cfg.z_dim);
    fc(&mut out, "pred.fc2", cfg.z_dim, cfg.predictor_hidden());
    if let Some(h) = &cfg.head {
        fc(&mut out, "head", h.kind.outputs(), e.embedding_dim);
    }
    out
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> Param<T> {
    pub fn group(&self) -> ParamGroup {
        ParamGroup::of(&self.name)
    }
}

/// Encoder, projector, predictor and optional head parameters.
#[derive(Clone, PartialEq)]
pub struct ModelBundle<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> fmt::Debug for ModelBundle<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelBundle")
            .field("config", &self.config)
            .field("n_params", &self.param_count(None))
            .finish()
    }
}

/// Graph leaves for every parameter of a bundle.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Leaves in the bundle's parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes another leaf for the named parameter.
    pub fn rebind(&mut self, name: &str, var: Var) {
        let i = self.index[name];
        self.vars[i] = var;
    }
}

fn build_index<T>(params: &[Param<T>]) -> HashMap<String, usize> {
    params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect()
}

impl<T: Scalar> ModelBundle<T> {
    /// Seeded initialization; parameters are drawn in layout order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let params: Vec<Param<T>> = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, T::one()),
                    Init::Fan(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(&shape, |_| T::lit(r.gen_range(-bound..bound)))
                    }
                };
                Param { name, value }
            })
            .collect();
        let index = build_index(&params);
        Ok(Self { config, params, index })
    }

    /// Builds a bundle from explicit parameters, checking them against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        let index = build_index(&params);
        Ok(Self { config, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn param_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group() == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Little-endian bytes of every parameter in `group`, in layout order.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.group() == group)
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.as_f64().to_le_bytes()))
            .collect()
    }

    /// Replaces the head with a zero-initialized one of the given config.
    pub fn with_new_head(&self, head: HeadConfig) -> Result<Self> {
        let config = ModelConfig {
            head: Some(head),
            ..self.config
        };
        let mut params: Vec<Param<T>> = self
            .params
            .iter()
            .filter(|p| p.group() != ParamGroup::Head)
            .cloned()
            .collect();
        for (name, shape, _) in layout(&config)
            .into_iter()
            .filter(|(n, _, _)| ParamGroup::of(n) == ParamGroup::Head)
        {
            params.push(Param {
                name,
                value: Tensor::zeros(&shape),
            });
        }
        Self::from_params(config, params)
    }

    pub fn set_head_config(&mut self, head: HeadConfig) -> Result<()> {
        match &self.config.head {
            Some(h) if h.kind == head.kind => {
                self.config.head = Some(head);
                Ok(())
            }
            _ => Err(Error::InvalidParameter("head kind mismatch".into())),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a graph leaf; `trainable` decides which
    /// leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.group()) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    fn conv_norm(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        conv: &str,
        norm: &str,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let c = g.conv1d(x, b.var(&format!("{conv}.w")), stride, pad)?;
        g.channel_norm(c, b.var(&format!("{norm}.g")), b.var(&format!("{norm}.b")))
    }

    fn fc(&self, g: &mut Graph<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        g.linear(x, b.var(&format!("{name}.w")), b.var(&format!("{name}.b")))
    }

    /// `x: [batch, 1, input_length] -> h: [batch, embedding_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let e = &self.config.encoder;
        match *g.shape(x) {
            [_, 1, len] if len == e.input_length => {}
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "encoder expects [batch, 1, {}], got {s:?}",
                    e.input_length
                )))
            }
        }
        let s = self.conv_norm(g, b, x, "enc.stem.conv", "enc.stem.norm", 2, STEM_KERNEL / 2)?;
        let mut h = g.relu(s);
        for i in 0..e.n_blocks {
            let p = format!("enc.b{i}");
            let a = self.conv_norm(g, b, h, &format!("{p}.conv1"), &format!("{p}.norm1"), 2, 1)?;
            let a = g.relu(a);
            let a = self.conv_norm(g, b, a, &format!("{p}.conv2"), &format!("{p}.norm2"), 1, 1)?;
            let skip = self.conv_norm(g, b, h, &format!("{p}.down"), &format!("{p}.down_norm"), 2, 0)?;
            let sum = g.add(a, skip)?;
            h = g.relu(sum);
        }
        let pooled = g.global_avg_pool(h)?;
        self.fc(g, b, pooled, "enc.fc")
    }

    /// `h -> z`: affine, batch norm, relu, affine, batch norm without affine.
    ///
    /// The projector normalizes over the batch, so `z` for one row depends on
    /// the rest of the batch. It is only used by the pretraining objective;
    /// the encoder and heads stay batch-independent.
    pub fn project_graph(&self, g: &mut Graph<T>, b: &Bound, h: Var) -> Result<Var> {
        self.check_width(g, h, self.config.encoder.embedding_dim, "projector")?;
        let a = self.fc(g, b, h, "proj.fc1")?;
        let a = g.batch_norm(a, b.var("proj.norm.g"), b.var("proj.norm.b"))?;
        let a = g.relu(a);
        let z = self.fc(g, b, a, "proj.fc2")?;
        let n = self.config.z_dim;
        let one = g.constant(Tensor::full(&[n], T::one()));
        let zero = g.constant(Tensor::zeros(&[n]));
        g.batch_norm(z, one, zero)
    }

    /// `z -> p`: bottleneck affine, relu, affine.
    pub fn predict_graph(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
        self.check_width(g, z, self.config.z_dim, "predictor")?;
        let a = self.fc(g, b, z, "pred.fc1")?;
        let a = g.relu(a);
        self.fc(g, b, a, "pred.fc2")
    }

    /// Raw head outputs: `[batch, 1]` for regression, `[batch, 2]` logits.
    pub fn head_graph(&self, g: &mut Graph<T>, b: &Bound, h: Var, kind: HeadKind) -> Result<Var> {
        match &self.config.head {
            Some(head) if head.kind == kind => {}
            Some(head) => {
                return Err(Error::InvalidParameter(format!(
                    "head is {:?}, requested {kind:?}",
                    head.kind
                )))
            }
            None => return Err(Error::InvalidParameter("model has no task head".into())),
        }
        self.check_width(g, h, self.config.encoder.embedding_dim, "head")?;
        self.fc(g, b, h, "head")
    }

    fn check_width(&self, g: &Graph<T>, v: Var, width: usize, what: &str) -> Result<()> {
        match *g.shape(v) {
            [_, w] if w == width => Ok(()),
            ref s => Err(Error::ShapeMismatch(format!(
                "{what} expects [batch, {width}], got {s:?}"
            ))),
        }
    }

    fn run(
        &self,
        x: &Tensor<T>,
        f: impl FnOnce(&Self, &mut Graph<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = f(self, &mut g, &b, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, |m, g, b, x| m.encode_graph(g, b, x))
    }

    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(h, |m, g, b, h| m.project_graph(g, b, h))
    }

    pub fn predict(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(z, |m, g, b, z| m.predict_graph(g, b, z))
    }

    /// Task predictions from `h`: de-standardized values for regression,
    /// logits for classification.
    pub fn head_forward(&self, h: &Tensor<T>, kind: HeadKind) -> Result<Tensor<T>> {
        let raw = self.run(h, |m, g, b, h| m.head_graph(g, b, h, kind))?;
        match (kind, &self.config.head) {
            (HeadKind::Regression, Some(hc)) => {
                let (off, sc) = (T::lit(hc.target_offset), T::lit(hc.target_scale));
                Ok(raw.map(|v| off + sc * v))
            }
            _ => Ok(raw),
        }
    }

    /// Stacks equal-length sample vectors into a `[batch, 1, len]` tensor.
    pub fn batch_input(&self, rows: &[&[f32]]) -> Result<Tensor<T>> {
        let len = self.config.encoder.input_length;
        if rows.is_empty() {
            return Err(Error::EmptyInput("input batch"));
        }
        let mut data = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "segment has {} samples, model expects {len}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![rows.len(), 1, len], data)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SQCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes a bundle; parameters are stored as binary32.
pub fn encode_checkpoint<T: Scalar>(bundle: &ModelBundle<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blob = bundle.config.to_blob();
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(blob.as_bytes());
    buf.extend_from_slice(&(bundle.params.len() as u32).to_le_bytes());
    for p in &bundle.params {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidParameter(format!("parameter name too long: {}", p.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::IncompatibleCheckpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelBundle<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::IncompatibleCheckpoint("bad magic".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("unsupported version {version}")));
    }
    let blob_len = c.u32()? as usize;
    let blob = std::str::from_utf8(c.take(blob_len)?)
        .map_err(|_| Error::IncompatibleCheckpoint("config blob is not UTF-8".into()))?;
    let config = ModelConfig::from_blob(blob)?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::IncompatibleCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::IncompatibleCheckpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        params.push(Param { name, value });
    }
    if c.pos != bytes.len() {
        return Err(Error::IncompatibleCheckpoint("trailing bytes after last tensor".into()));
    }
    ModelBundle::from_params(config, params)
}

pub fn save_checkpoint<T: Scalar>(bundle: &ModelBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelBundle<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires its encoder to match `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<ModelBundle<T>> {
    let bundle = load_checkpoint(path)?;
    if bundle.config.encoder != *expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint encoder {:?} does not match configured {:?}",
            bundle.config.encoder, expected
        )));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, FD_STEP};

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_blocks: 2,
                base_channels: 4,
                embedding_dim: 8,
                input_length: 32,
            },
            z_dim: 8,
            head: None,
        }
    }

    fn wave(len: usize, phase: f32) -> Vec<f32> {
        (0..len).map(|i| ((i as f32 * 0.4 + phase).sin() + 1.0) / 2.0).collect()
    }

    #[test]
    fn encode_shape_and_no_batch_coupling() {
        let m = ModelBundle::<f32>::init(ModelConfig::default(), 1).unwrap();
        let a = wave(1200, 0.0);
        let b = wave(1200, 1.0);
        let x = m.batch_input(&[&a, &b, &a, &b]).unwrap();
        let h = m.encode(&x).unwrap();
        assert_eq!(h.shape(), &[4, 64]);
        assert_eq!(h.row(0), h.row(2));
        assert_eq!(h.row(1), h.row(3));
        assert!(h.all_finite());

        let z = m.project(&h).unwrap();
        assert_eq!(z.shape(), &[4, 128]);
        assert_eq!(m.predict(&z).unwrap().shape(), &[4, 128]);
        assert!(m
            .encode(
                &m.batch_input(&[&a[..1199]])
                    .unwrap_or_else(|_| Tensor::zeros(&[1, 1, 5]))
            )
            .is_err());
    }

    #[test]
    fn encoder_param_count_closed_form() {
        // Closed form for n_blocks=2, base=8, emb=64 evaluated by hand:
        // stem 7*8 + 2*8 = 72; each 8->8 block 3*64 + 16 + 3*64 + 16 + 64 + 16 = 496;
        // fc 8*64 + 64 = 576.
        let m = ModelBundle::<f32>::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(Some(ParamGroup::Encoder)), 72 + 496 + 496 + 576);
    }

    #[test]
    fn param_count_grows_with_depth() {
        let counts: Vec<usize> = (2..=8)
            .map(|n| {
                let mut cfg = ModelConfig::default();
                cfg.encoder.n_blocks = n;
                ModelBundle::<f32>::init(cfg, 0).unwrap().param_count(None)
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn zero_h_projects_to_finite_values() {
        let m = ModelBundle::<f32>::init(ModelConfig::default(), 3).unwrap();
        let z = m.project(&Tensor::zeros(&[2, 64])).unwrap();
        assert!(z.all_finite());
        assert!(m.project(&Tensor::zeros(&[2, 63])).is_err());
    }

    #[test]
    fn head_kind_checked() {
        let m = ModelBundle::<f64>::init(small(), 0).unwrap();
        let h = Tensor::zeros(&[3, 8]);
        assert!(m.head_forward(&h, HeadKind::Regression).is_err());
        let m = m.with_new_head(HeadConfig::new(HeadKind::Regression)).unwrap();
        assert_eq!(m.head_forward(&h, HeadKind::Regression).unwrap().shape(), &[3, 1]);
        assert!(m.head_forward(&h, HeadKind::BinaryClassification).is_err());
        let m = m
            .with_new_head(HeadConfig::new(HeadKind::BinaryClassification))
            .unwrap();
        assert_eq!(
            m.head_forward(&h, HeadKind::BinaryClassification).unwrap().shape(),
            &[3, 2]
        );
    }

    #[test]
    fn project_predict_head_gradients() {
        let mut cfg = small();
        cfg.z_dim = 16;
        cfg.head = Some(HeadConfig::new(HeadKind::BinaryClassification));
        let m = ModelBundle::<f64>::init(cfg, 9).unwrap();
        let names: Vec<String> = m
            .params()
            .iter()
            .filter(|p| p.group() != ParamGroup::Encoder)
            .map(|p| p.name.clone())
            .collect();
        // Non-zero biases keep every ReLU unit away from its kink.
        let mut inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t = m.param(n).unwrap();
                if n.ends_with(".b") {
                    Tensor::from_fn(t.shape(), |i| 0.1 + 0.05 * (i % 3) as f64)
                } else {
                    t.clone()
                }
            })
            .collect();
        inputs.push(Tensor::from_fn(&[3, 8], |i| ((i * 13 % 17) as f64 - 8.0) / 6.0));
        let report = check_gradients(&inputs, FD_STEP, |g, v| {
            let mut b = m.bind(g, |_| false);
            for (i, n) in names.iter().enumerate() {
                b.vars[b.index[n]] = v[i];
            }
            let h = v[names.len()];
            let z = m.project_graph(g, &b, h)?;
            let p = m.predict_graph(g, &b, z)?;
            let c = m.head_graph(g, &b, h, HeadKind::BinaryClassification)?;
            let ce = g.softmax_cross_entropy(c, &[0, 1, 1])?;
            let cos = g.cosine_similarity(p, z)?;
            let s = g.sum(cos);
            g.add(s, ce)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            head: Some(HeadConfig {
                kind: HeadKind::Regression,
                target_offset: 91.25,
                target_scale: 17.0 / 3.0,
            }),
            ..ModelConfig::default()
        };
        let m = ModelBundle::<f32>::init(cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sqck");
        save_checkpoint(&m, &path).unwrap();
        let back: ModelBundle<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_header_layout() {
        let bytes = encode_checkpoint(&ModelBundle::<f32>::init(small(), 0).unwrap()).unwrap();
        assert_eq!(&bytes[..6], &[0x53, 0x51, 0x43, 0x4B, 1, 0]);
        let blob_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert!(std::str::from_utf8(&bytes[10..10 + blob_len])
            .unwrap()
            .starts_with("n_blocks=2\n"));
    }

    #[test]
    fn bad_checkpoints_rejected() {
        let bytes = encode_checkpoint(&ModelBundle::<f32>::init(small(), 0).unwrap()).unwrap();
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint::<f32>(&bytes[..cut]),
                Err(Error::IncompatibleCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[4] = 2;
        let err = decode_checkpoint::<f32>(&bad).unwrap_err();
        assert!(err.to_string().contains("incompatible checkpoint"));
        bad = bytes.clone();
        bad[0] = 0;
        assert!(decode_checkpoint::<f32>(&bad).is_err());
    }

    #[test]
    fn larger_checkpoint_rejected_by_smaller_config() {
        let mut big = small();
        big.encoder.n_blocks = 4;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.sqck");
        save_checkpoint(&ModelBundle::<f32>::init(big, 0).unwrap(), &path).unwrap();
        assert!(load_checkpoint_for::<f32>(&path, &small().encoder).is_err());
        assert!(load_checkpoint_for::<f32>(&path, &big.encoder).is_ok());
    }
}
