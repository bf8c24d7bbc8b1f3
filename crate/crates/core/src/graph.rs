//! Tape-based reverse-mode differentiation over tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass in
//! construction order. [`Graph::backward`] walks the record in exact reverse
//! order, accumulating gradients for the leaves flagged as parameters. The
//! graph is deterministic: no fusion, no reordering, so a seeded run is
//! bit-reproducible.
//!
//! The primitive set is fixed to what the attention blocks, the classifier
//! heads and the denoising loss compose from: matmul, elementwise add/mul,
//! scalar scale, exp, ln, tanh, row softmax, mean over an axis, sum, element
//! pick, column concat and transpose.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    /// Constant input; no gradient flows further.
    Input,
    /// Named trainable leaf; the name association lives in the params map.
    Param,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    /// Softmax over each row of a 2-D tensor.
    SoftmaxRows(usize),
    /// Mean over one axis of a 2-D tensor (0 = rows collapse, 1 = cols).
    MeanAxis(usize, usize),
    /// Sum of all entries, producing a scalar node.
    SumAll(usize),
    /// Single element `[r, c]` of a 2-D tensor, producing a scalar node.
    Pick(usize, usize, usize),
    ConcatCols(Vec<usize>),
    Transpose(usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// A record of primitive operations with named trainable parameters.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, usize>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    by_name: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a parameter name; zero tensors are materialized for
    /// parameters the loss never touched.
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.by_name.iter()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a constant input.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Registers a named trainable parameter. Names must be unique per graph.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        let id = self.push(value, Op::Param);
        self.params.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Matmul(a.0, b.0)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let v = self.nodes[a.0].value.scale(c)?;
        Ok(self.push(v, Op::Scale(a.0, c)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| v.exp()).collect();
        let v = Tensor::new(src.shape().to_vec(), data).map_err(|_| Error::NonFinite("exp"))?;
        Ok(self.push(v, Op::Exp(a.0)))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::contract("ln requires strictly positive entries"));
        }
        let data = src.data().iter().map(|&v| v.ln()).collect();
        let v = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Ln(a.0)))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| v.tanh()).collect();
        let v = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Tanh(a.0)))
    }

    /// Softmax over each row, with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.rank() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: src.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src.data()[i * c..(i + 1) * c];
            data.extend(crate::tensor::softmax_slice(row));
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::SoftmaxRows(a.0)))
    }

    /// Mean over `axis` of a 2-D tensor. Axis 0 averages rows away giving
    /// `[1, cols]`; axis 1 gives `[rows, 1]`.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.rank() != 2 || axis > 1 {
            return Err(Error::Dimension {
                op: "mean_axis",
                lhs: src.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (r, c) = (src.rows(), src.cols());
        let v = if axis == 0 {
            let inv = S::from_f64_lossy(1.0 / r as f64);
            let mut out = vec![S::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src.get2(i, j);
                }
            }
            Tensor::new(vec![1, c], out.into_iter().map(|v| v * inv).collect())?
        } else {
            let inv = S::from_f64_lossy(1.0 / c as f64);
            let mut out = vec![S::zero(); r];
            for i in 0..r {
                for j in 0..c {
                    out[i] += src.get2(i, j);
                }
            }
            Tensor::new(vec![r, 1], out.into_iter().map(|v| v * inv).collect())?
        };
        Ok(self.push(v, Op::MeanAxis(a.0, axis)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.nodes[a.0].value.sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("sum"));
        }
        Ok(self.push(Tensor::scalar(total), Op::SumAll(a.0)))
    }

    /// Element `[r, c]` of a 2-D node as a scalar node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.rank() != 2 || r >= src.rows() || c >= src.cols() {
            return Err(Error::contract(format!(
                "pick ({r},{c}) out of bounds for shape {:?}",
                src.shape()
            )));
        }
        let v = Tensor::scalar(src.get2(r, c));
        Ok(self.push(v, Op::Pick(a.0, r, c)))
    }

    /// Concatenates 2-D nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one input"));
        }
        let r = self.nodes[parts[0].0].value.rows();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 2 || t.rows() != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total_cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(r * total_cols);
        for i in 0..r {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![r, total_cols], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.transpose()?;
        Ok(self.push(v, Op::Transpose(a.0)))
    }

    /// Backpropagates from a scalar loss node, returning gradients for every
    /// parameter. Nodes are visited in exact reverse construction order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Matmul(a, b) => {
                    let bt = self.nodes[*b].value.transpose()?;
                    let at = self.nodes[*a].value.transpose()?;
                    let ga = g.matmul(&bt)?;
                    let gb = at.matmul(&g)?;
                    accumulate(&mut grads[*a], ga)?;
                    accumulate(&mut grads[*b], gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone())?;
                    accumulate(&mut grads[*b], g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul_elem(&self.nodes[*b].value)?;
                    let gb = g.mul_elem(&self.nodes[*a].value)?;
                    accumulate(&mut grads[*a], ga)?;
                    accumulate(&mut grads[*b], gb)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[*a], g.scale(*c)?)?;
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    accumulate(&mut grads[*a], g.mul_elem(out)?)?;
                }
                Op::Ln(a) => {
                    let src = &self.nodes[*a].value;
                    let data: Vec<S> = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(&gv, &xv)| gv / xv)
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(src.shape().to_vec(), data)?)?;
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let data: Vec<S> = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape().to_vec(), data)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let out = &self.nodes[idx].value;
                    let (r, c) = (out.rows(), out.cols());
                    let mut data = vec![S::zero(); r * c];
                    for i in 0..r {
                        let y = &out.data()[i * c..(i + 1) * c];
                        let gy = &g.data()[i * c..(i + 1) * c];
                        let inner = y
                            .iter()
                            .zip(gy)
                            .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..c {
                            data[i * c + j] = y[j] * (gy[j] - inner);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(vec![r, c], data)?)?;
                }
                Op::MeanAxis(a, axis) => {
                    let src = &self.nodes[*a].value;
                    let (r, c) = (src.rows(), src.cols());
                    let mut data = vec![S::zero(); r * c];
                    if *axis == 0 {
                        let inv = S::from_f64_lossy(1.0 / r as f64);
                        for i in 0..r {
                            for j in 0..c {
                                data[i * c + j] = g.data()[j] * inv;
                            }
                        }
                    } else {
                        let inv = S::from_f64_lossy(1.0 / c as f64);
                        for i in 0..r {
                            for j in 0..c {
                                data[i * c + j] = g.data()[i] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(vec![r, c], data)?)?;
                }
                Op::SumAll(a) => {
                    let src = &self.nodes[*a].value;
                    let fill = g.data()[0];
                    accumulate(&mut grads[*a], Tensor::filled(src.shape().to_vec(), fill))?;
                }
                Op::Pick(a, r, c) => {
                    let src = &self.nodes[*a].value;
                    let mut t = Tensor::zeros(src.shape().to_vec());
                    t.set2(*r, *c, g.data()[0]);
                    accumulate(&mut grads[*a], t)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[idx].value.rows();
                    let total_cols = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let t = &self.nodes[*p].value;
                        let c = t.cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            let base = i * total_cols + offset;
                            data.extend_from_slice(&g.data()[base..base + c]);
                        }
                        accumulate(&mut grads[*p], Tensor::new(vec![rows, c], data)?)?;
                        offset += c;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[*a], g.transpose()?)?;
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, &idx) in &self.params {
            let shape = self.nodes[idx].value.shape().to_vec();
            let grad = grads[idx].take().unwrap_or_else(|| Tensor::zeros(shape));
            debug_assert_eq!(grad.shape(), self.nodes[idx].value.shape());
            by_name.insert(name.clone(), grad);
        }
        Ok(Gradients { by_name })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        None => *slot = Some(g),
    }
    Ok(())
}

/// Named trainable tensors persisted across training steps.
///
/// The store is ordered by name so checkpoints and update sweeps are
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    values: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inserts every stored tensor into a graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.values {
            ids.insert(name.clone(), graph.param(name, value.clone())?);
        }
        Ok(ids)
    }

    /// Plain stochastic gradient step with a fixed learning rate.
    pub fn sgd_step(&mut self, grads: &Gradients<S>, lr: S) -> Result<()> {
        for (name, value) in self.values.iter_mut() {
            if let Some(g) = grads.get(name) {
                *value = value.sub(&g.scale(lr)?)?;
            }
        }
        Ok(())
    }
}
