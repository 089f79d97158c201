//! Dense tanh classifiers with an optional lp projection on the
//! penultimate representation.
//!
//! Layout: `input → [dense + tanh]* → (lp-norm) → dense → logits`. The
//! penultimate representation is the output of the last hidden layer, or the
//! raw input when there are no hidden layers.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, NodeId, Tape, Tensor};
use crate::data::Classify;
use crate::error::{Error, Result};
use crate::lpnorm::{self, LpNormLayer, NormOrder, RadiusParam};
use crate::{fsutil, seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub norm: Option<LpNormLayer>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ClassifierSpec {
    /// Width of the representation fed to the output layer.
    pub fn penultimate_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        let dense: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        dense + self.norm.map_or(0, |n| n.trainable_count())
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub state: OptimizerState,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Self {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            state: OptimizerState {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn accumulate(&mut self, g: &[f64]) {
        self.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Representations produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub penultimate: Tensor,
    /// Equal to `penultimate` when the lp layer is disabled.
    pub normalized: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    params: Vec<Parameter>,
    p_raw: Option<usize>,
    alpha_raw: Option<usize>,
}

/// Node ids of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub params: Vec<NodeId>,
    pub penultimate: NodeId,
    pub normalized: NodeId,
    pub logits: NodeId,
}

const INFERENCE_CHUNK: usize = 4096;

impl Classifier {
    /// Builds a classifier with Glorot-uniform weights and zero biases.
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.init_seed);
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.num_classes);
        let layers = widths.len() - 1;

        let mut params = Vec::with_capacity(2 * layers + 2);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let prefix = if i + 1 == layers {
                "output".to_string()
            } else {
                format!("dense.{i}")
            };
            params.push(Parameter::new(
                format!("{prefix}.weight"),
                Tensor::matrix(fan_in, fan_out, values)?,
            ));
            params.push(Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])));
        }

        let mut p_raw = None;
        let mut alpha_raw = None;
        if let Some(layer) = &spec.norm {
            if let NormOrder::Learnable { raw } = layer.order {
                p_raw = Some(params.len());
                params.push(Parameter::new("lpnorm.p_raw", Tensor::scalar(raw)));
            }
            if let RadiusParam::Learnable { raw } = layer.radius {
                alpha_raw = Some(params.len());
                params.push(Parameter::new("lpnorm.alpha_raw", Tensor::scalar(raw)));
            }
        }
        Ok(Self {
            spec,
            params,
            p_raw,
            alpha_raw,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn dense_layers(&self) -> usize {
        self.spec.hidden.len()
    }

    fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer].value
    }

    fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1].value
    }

    fn output_index(&self) -> usize {
        self.dense_layers()
    }

    /// The lp layer with learnable scalars read from the current parameters.
    pub fn norm_layer(&self) -> Option<LpNormLayer> {
        let mut layer = self.spec.norm?;
        if let Some(i) = self.p_raw {
            layer.order = layer.order.with_raw(self.params[i].value.values()[0]);
        }
        if let Some(i) = self.alpha_raw {
            layer.radius = layer.radius.with_raw(self.params[i].value.values()[0]);
        }
        Some(layer)
    }

    /// Decoded norm order, if the lp layer is enabled.
    pub fn decoded_p(&self) -> Option<f64> {
        self.norm_layer().map(|l| l.p())
    }

    pub fn decoded_alpha(&self) -> Option<f64> {
        self.norm_layer().map(|l| l.alpha())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.cols() != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                left: batch.shape().to_vec(),
                right: vec![self.spec.input_dim],
            });
        }
        Ok(())
    }

    /// Records the forward pass of `batch` on `tape`. Parameters enter as
    /// differentiable leaves in `params()` order.
    pub fn record(&self, tape: &mut Tape, batch: &Tensor) -> Result<Recorded> {
        self.check_input(batch)?;
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut h = tape.constant(batch.clone())?;
        for layer in 0..self.dense_layers() {
            let z = tape.matmul(h, ids[2 * layer])?;
            let z = tape.add_bias(z, ids[2 * layer + 1])?;
            h = tape.tanh(z)?;
        }
        let penultimate = h;
        let normalized = match &self.spec.norm {
            Some(layer) => tape.lp_normalize(
                h,
                layer,
                self.p_raw.map(|i| ids[i]),
                self.alpha_raw.map(|i| ids[i]),
            )?,
            None => h,
        };
        let out = self.output_index();
        let z = tape.matmul(normalized, ids[2 * out])?;
        let logits = tape.add_bias(z, ids[2 * out + 1])?;
        Ok(Recorded {
            params: ids,
            penultimate,
            normalized,
            logits,
        })
    }

    /// Mean cross-entropy on a batch; parameter gradients are added into
    /// each `Parameter::grad`.
    pub fn loss_and_accumulate(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, batch)?;
        let loss = tape.softmax_cross_entropy(rec.logits, labels)?;
        tape.backward(loss)?;
        for (param, id) in self.params.iter_mut().zip(&rec.params) {
            if let Some(g) = tape.grad(*id) {
                param.accumulate(g);
            }
        }
        Ok(tape.value(loss).values()[0])
    }

    /// Tape-free forward pass. Bitwise identical to [`Classifier::record`].
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let m = batch.rows();
        let mut h = batch.clone();
        for layer in 0..self.dense_layers() {
            let w = self.weight(layer);
            let z = kernels::matmul(h.values(), w.values(), m, w.rows(), w.cols());
            let z = kernels::add_bias(&z, self.bias(layer).values());
            h = Tensor::matrix(m, w.cols(), kernels::tanh(&z))?;
        }
        let normalized = self.normalize(&h);
        let logits = self.output_logits(&normalized)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(ForwardOutput {
            logits,
            penultimate: h,
            normalized,
        })
    }

    fn normalize(&self, h: &Tensor) -> Tensor {
        match self.norm_layer() {
            Some(layer) => {
                let values = h
                    .row_iter()
                    .flat_map(|row| lpnorm::normalize_forward(row, &layer))
                    .collect();
                Tensor::new(h.shape().to_vec(), values).expect("shape preserved")
            }
            None => h.clone(),
        }
    }

    fn output_logits(&self, rep: &Tensor) -> Result<Tensor> {
        let out = self.output_index();
        let w = self.weight(out);
        if rep.cols() != w.rows() {
            return Err(Error::Dimension {
                op: "output",
                left: rep.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let m = rep.rows();
        let z = kernels::matmul(rep.values(), w.values(), m, w.rows(), w.cols());
        Tensor::matrix(m, w.cols(), kernels::add_bias(&z, self.bias(out).values()))
    }

    /// Logits computed from an externally supplied penultimate
    /// representation (lp layer + output layer only).
    pub fn head_logits(&self, penultimate: &Tensor) -> Result<Tensor> {
        self.output_logits(&self.normalize(penultimate))
    }

    /// Row-wise argmax of the logits, ties to the lowest class.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.check_input(batch)?;
        let mut out = Vec::with_capacity(batch.rows());
        let mut start = 0;
        while start < batch.rows() {
            let end = (start + INFERENCE_CHUNK).min(batch.rows());
            out.extend(self.forward(&batch.slice_rows(start, end))?.logits.argmax_rows());
            start = end;
        }
        Ok(out)
    }

    /// Writes the parameters and lp-layer settings in the `LPN1` format.
    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &checkpoint::encode(&self.checkpoint_tensors()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = checkpoint::decode(&fsutil::read(path)?).map_err(|m| Error::format(path, m))?;
        Self::from_checkpoint_tensors(tensors).map_err(|m| Error::format(path, m))
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        if let Some(layer) = &self.spec.norm {
            if !layer.order.is_learnable() {
                out.push(("lpnorm.p".into(), Tensor::scalar(layer.p())));
            }
            if let RadiusParam::Fixed(a) = layer.radius {
                out.push(("lpnorm.alpha".into(), Tensor::scalar(a)));
            }
            out.push(("lpnorm.epsilon".into(), Tensor::scalar(layer.epsilon)));
        }
        out
    }

    fn from_checkpoint_tensors(tensors: Vec<(String, Tensor)>) -> std::result::Result<Self, String> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let scalar = |name: &str| find(name).and_then(|t| t.item());

        let mut hidden = Vec::new();
        let mut dense = Vec::new();
        while let Some(w) = find(&format!("dense.{}.weight", hidden.len())) {
            let b = find(&format!("dense.{}.bias", hidden.len()))
                .ok_or_else(|| format!("missing dense.{}.bias", hidden.len()))?;
            hidden.push(w.cols());
            dense.push((w, b));
        }
        let out_w = find("output.weight").ok_or("missing output.weight")?;
        let out_b = find("output.bias").ok_or("missing output.bias")?;
        let input_dim = dense.first().map_or(out_w.rows(), |(w, _)| w.rows());

        let norm = if let Some(eps) = scalar("lpnorm.epsilon") {
            let order = match (scalar("lpnorm.p"), scalar("lpnorm.p_raw")) {
                (Some(p), _) => NormOrder::fixed(p).map_err(|e| e.to_string())?,
                (None, Some(raw)) => NormOrder::Learnable { raw },
                (None, None) => return Err("lp layer without an order".into()),
            };
            let radius = match (scalar("lpnorm.alpha"), scalar("lpnorm.alpha_raw")) {
                (Some(a), _) => RadiusParam::fixed(a).map_err(|e| e.to_string())?,
                (None, Some(raw)) => RadiusParam::Learnable { raw },
                (None, None) => return Err("lp layer without a radius".into()),
            };
            Some(LpNormLayer {
                order,
                radius,
                epsilon: eps,
            })
        } else {
            None
        };

        let spec = ClassifierSpec {
            input_dim,
            hidden,
            activation: Activation::Tanh,
            norm,
            num_classes: out_w.cols(),
            init_seed: 0,
        };
        let mut model = Classifier::new(spec).map_err(|e| e.to_string())?;
        let mut sources: Vec<Tensor> = Vec::new();
        for (w, b) in dense {
            sources.push(w);
            sources.push(b);
        }
        sources.push(out_w);
        sources.push(out_b);
        if model.p_raw.is_some() {
            sources.push(find("lpnorm.p_raw").expect("checked above"));
        }
        if model.alpha_raw.is_some() {
            sources.push(find("lpnorm.alpha_raw").expect("checked above"));
        }
        for (param, src) in model.params.iter_mut().zip(sources) {
            if param.value.shape() != src.shape() {
                return Err(format!(
                    "{}: shape {:?} does not fit {:?}",
                    param.name,
                    src.shape(),
                    param.value.shape()
                ));
            }
            param.value = src;
        }
        Ok(model)
    }
}

impl Classify for Classifier {
    fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        self.predict(points)
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.spec.input_dim)
    }
}

/// Width of the first hidden layer of the proof-of-concept network.
pub const POC_HIDDEN: usize = 128;

/// `2 → 128 (tanh) → d (tanh) → [lp] → 2`.
pub fn build_poc(penultimate: usize, norm: Option<LpNormLayer>, seed: u64) -> Result<Classifier> {
    Classifier::new(ClassifierSpec {
        input_dim: 2,
        hidden: vec![POC_HIDDEN, penultimate],
        activation: Activation::Tanh,
        norm,
        num_classes: 2,
        init_seed: seed,
    })
}

/// `encoder → [hidden (tanh)] → lp → K`; `hidden = 0` puts the lp layer
/// directly on the encoder output under a linear head.
pub fn build_probe(
    hidden: usize,
    encoder_dim: usize,
    norm: Option<LpNormLayer>,
    num_classes: usize,
    seed: u64,
) -> Result<Classifier> {
    Classifier::new(ClassifierSpec {
        input_dim: encoder_dim,
        hidden: if hidden == 0 { vec![] } else { vec![hidden] },
        activation: Activation::Tanh,
        norm,
        num_classes,
        init_seed: seed,
    })
}

/// Flat binary tensor container.
///
/// `LPN1`, u32 tensor count, then per tensor: u32 name length, UTF-8 name,
/// u32 rank, u32 dims, f64 payload. All integers and floats little-endian.
pub mod checkpoint {
    use crate::autodiff::Tensor;

    pub const MAGIC: &[u8; 4] = b"LPN1";

    pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
            let end = end.ok_or_else(|| format!("truncated checkpoint at byte {}", self.pos))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<usize, String> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }

        fn f64(&mut self) -> Result<f64, String> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, String> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err("bad magic, expected LPN1".into());
        }
        let count = c.u32()?;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = c.u32()?;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = c.u32()?;
            let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            if numel > bytes.len() / 8 {
                return Err(format!("{name}: payload larger than file"));
            }
            let values = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
            out.push((name, Tensor::new(shape, values).map_err(|e| e.to_string())?));
        }
        if c.pos != bytes.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(out)
    }
}
