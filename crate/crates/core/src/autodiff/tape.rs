use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::lpnorm::{self, LpNormLayer, NormOrder, RadiusParam};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LpNormalize {
        input: NodeId,
        layer: LpNormLayer,
        p_raw: Option<NodeId>,
        alpha_raw: Option<NodeId>,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
/// [`Tape::backward`] adds `d loss / d node` into each node's gradient
/// buffer; buffers keep accumulating across calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, kernels::matmul(ta.values(), tb.values(), m, k, n))?;
        let needs = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), needs, "matmul")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.cols() != tb.numel() || tx.rank() != 2 {
            return Err(Error::Dimension {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(tx.shape().to_vec(), kernels::add_bias(tx.values(), tb.values()))?;
        let needs = self.needs(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), needs, "add_bias")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), kernels::tanh(tx.values()))?;
        let needs = self.needs(&[x]);
        self.push(out, Op::Tanh(x), needs, "tanh")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).values().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs, "sum")
    }

    /// Mean cross-entropy of the row-wise softmax of `logits` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let k = t.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: k,
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(t.values(), labels, k);
        let needs = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            "softmax_cross_entropy",
        )
    }

    /// Row-wise lp projection of a matrix.
    ///
    /// `p_raw` / `alpha_raw`, when given, are one-element nodes holding the
    /// raw learnable scalars; they override the raw values stored in `layer`
    /// and receive gradients. A node passed for a fixed mode is a contract
    /// error.
    pub fn lp_normalize(
        &mut self,
        x: NodeId,
        layer: &LpNormLayer,
        p_raw: Option<NodeId>,
        alpha_raw: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut layer = *layer;
        if let Some(id) = p_raw {
            if !layer.order.is_learnable() {
                return Err(Error::Contract("p_raw node given for a fixed norm order".into()));
            }
            layer.order = layer.order.with_raw(self.scalar_of(id, "p_raw")?);
        }
        if let Some(id) = alpha_raw {
            if !layer.radius.is_learnable() {
                return Err(Error::Contract("alpha_raw node given for a fixed radius".into()));
            }
            layer.radius = layer.radius.with_raw(self.scalar_of(id, "alpha_raw")?);
        }
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dimension {
                op: "lp_normalize",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let p = layer.p();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.row_iter() {
            norms.push(lpnorm::norm_unchecked(row, p));
            out.extend(lpnorm::normalize_forward(row, &layer));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(p_raw);
        inputs.extend(alpha_raw);
        let needs = self.needs(&inputs);
        self.push(
            out,
            Op::LpNormalize {
                input: x,
                layer,
                p_raw,
                alpha_raw,
                norms,
            },
            needs,
            "lp_normalize",
        )
    }

    fn scalar_of(&self, id: NodeId, what: &str) -> Result<f64> {
        self.value(id)
            .item()
            .ok_or_else(|| Error::Contract(format!("{what} must be a one-element tensor")))
    }

    /// Back-propagates from a one-element node, adding into every node's
    /// gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward seed must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut adjoint);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    let da = slot(adjoint, *a, ta.numel());
                    kernels::matmul_grad_a(g, tb.values(), da, m, k, n);
                }
                if self.nodes[b.0].needs_grad {
                    let db = slot(adjoint, *b, tb.numel());
                    kernels::matmul_grad_b(ta.values(), g, db, m, k, n);
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[x.0].needs_grad {
                    let dx = slot(adjoint, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if self.nodes[bias.0].needs_grad {
                    let n = self.value(*bias).numel();
                    let db = slot(adjoint, *bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.nodes[x.0].needs_grad {
                    let y = node.value.values();
                    let dx = slot(adjoint, *x, g.len());
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sum(x) => {
                if self.nodes[x.0].needs_grad {
                    let n = self.value(*x).numel();
                    slot(adjoint, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let m = labels.len();
                    let k = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let dz = slot(adjoint, *logits, probs.len());
                    for (i, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dz[i * k + c] += scale * (probs[i * k + c] - onehot);
                        }
                    }
                }
            }
            Op::LpNormalize {
                input,
                layer,
                p_raw,
                alpha_raw,
                norms,
            } => self.lp_backward(*input, layer, *p_raw, *alpha_raw, norms, g, adjoint),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lp_backward(
        &self,
        input: NodeId,
        layer: &LpNormLayer,
        p_raw: Option<NodeId>,
        alpha_raw: Option<NodeId>,
        norms: &[f64],
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let d = x.cols();
        let (p, alpha, eps) = (layer.p(), layer.alpha(), layer.epsilon);

        if self.nodes[input.0].needs_grad {
            let dx = slot(adjoint, input, x.numel());
            for (i, (row, &norm)) in x.row_iter().zip(norms).enumerate() {
                let up = &g[i * d..(i + 1) * d];
                let v = lpnorm::input_vjp(row, p, alpha, norm, eps, up);
                dx[i * d..(i + 1) * d].iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
        }
        if let (Some(id), NormOrder::Learnable { raw }) = (p_raw, layer.order) {
            if self.nodes[id.0].needs_grad {
                let total: f64 = x
                    .row_iter()
                    .zip(norms)
                    .enumerate()
                    .map(|(i, (row, &norm))| {
                        lpnorm::order_vjp(row, p, alpha, norm, eps, &g[i * d..(i + 1) * d])
                    })
                    .sum();
                slot(adjoint, id, 1)[0] += total * lpnorm::sigmoid(raw);
            }
        }
        if let (Some(id), RadiusParam::Learnable { raw }) = (alpha_raw, layer.radius) {
            if self.nodes[id.0].needs_grad {
                let total: f64 = x
                    .row_iter()
                    .zip(norms)
                    .enumerate()
                    .map(|(i, (row, &norm))| lpnorm::radius_vjp(row, norm, eps, &g[i * d..(i + 1) * d]))
                    .sum();
                slot(adjoint, id, 1)[0] += total * lpnorm::sigmoid(raw);
            }
        }
    }
}

fn slot(adjoint: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    adjoint[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let v = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap()).unwrap();
        let out = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.value(out).values(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let dot = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(dot).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_bias_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::vector(vec![10.0, 20.0])).unwrap();
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).values(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);

        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let row = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let y = tape.add_bias(row, zero).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);

        let bad = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(tape.add_bias(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tanh_saturates_without_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 50.0])).unwrap();
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).values()[0], 0.0);
        assert!((tape.value(y).values()[1] - 1.0).abs() < 1e-12);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 1.0);
        assert!(g[1].abs() < 1e-12 && g[1].is_finite());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).values()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.leaf(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap()).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert_eq!(tape.value(l).values()[0], 0.0);

        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn backward_sum_and_inner_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(1, 3, vec![0.5, 1.5, -1.0]).unwrap()).unwrap();
        let x = tape.constant(Tensor::matrix(3, 1, vec![2.0, 3.0, 4.0]).unwrap()).unwrap();
        let inner = tape.matmul(w, x).unwrap();
        tape.backward(inner).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 3.0, 4.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let x = tape.constant(Tensor::matrix(2, 1, vec![3.0, -1.0]).unwrap()).unwrap();
        let y = tape.matmul(w, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0, -2.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::vector(vec![f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let a = tape.leaf(Tensor::matrix(1, 1, vec![1e200]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::matrix(1, 1, vec![1e200]).unwrap()).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::NonFinite { op: "matmul" })));
    }

    #[test]
    fn raw_node_for_fixed_mode_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let raw = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let layer = LpNormLayer::new(NormOrder::Two, RadiusParam::Fixed(1.0));
        assert!(matches!(
            tape.lp_normalize(x, &layer, Some(raw), None),
            Err(Error::Contract(_))
        ));
    }
}
