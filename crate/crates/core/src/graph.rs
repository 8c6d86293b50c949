//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape of nodes; [`Var`] is a cheap handle into it. The
//! graph is rebuilt every step and discarded after [`Graph::backward`], which
//! walks the tape in reverse creation order (children always have larger ids
//! than their parents, so no explicit topological sort is needed).
//!
//! Reductions that cross the row/token axis fold their addends in a canonical
//! order (see [`ordered_sum`]), so permutation equivariance of attention and
//! the contrastive loss holds bit-exactly, not just approximately.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, ordered_sum, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Minimum { a: usize, b: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    ScalarMul { x: usize, c: f64 },
    ScalarAdd { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Tanh { x: usize },
    Gelu { x: usize },
    SoftmaxLast { x: usize },
    LogSoftmaxLast { x: usize },
    LayerNormLast { x: usize, gain: usize, bias: usize },
    ConcatLast { parts: Vec<usize> },
    SliceLast { x: usize, start: usize },
    NarrowRows { x: usize, start: usize },
    Reshape { x: usize },
    Transpose { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize },
    GatherLast { x: usize, idx: Vec<usize> },
    AttnMix { a: usize, v: usize },
}

struct NodeData {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

type Nodes = Rc<RefCell<Vec<NodeData>>>;

/// Tape of computation nodes. Single-threaded by construction.
#[derive(Clone)]
pub struct Graph {
    nodes: Nodes,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Non-differentiable input: participates in forward only.
    pub fn constant(&self, value: Tensor) -> Var {
        push(&self.nodes, value, Op::Leaf, false)
    }

    /// Differentiable input: receives a gradient from [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        push(&self.nodes, value, Op::Leaf, true)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Reverse sweep from a scalar output. Returns the gradients of every
    /// differentiable leaf on the path; calling it again reproduces the same
    /// gradients because each call starts from a fresh accumulator.
    pub fn backward(&self, out: &Var) -> Result<GradStore> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[out.id];
        if !out_node.value.is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: out_node.value.shape().to_vec(),
            });
        }
        if !out_node.value.data()[0].is_finite() {
            return Err(Error::NonFinite {
                context: "backward output".into(),
            });
        }
        if !out_node.requires_grad {
            return Err(Error::NoGradPath);
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out.id + 1);
        grads.resize_with(out.id + 1, || None);
        grads[out.id] = Some(Tensor::full(out_node.value.shape(), 1.0));
        let mut leaves: HashMap<usize, Tensor> = HashMap::new();

        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                }
                Op::StopGrad => {}
                op => backprop_one(op, &node.value, &g, &nodes, &mut grads),
            }
        }

        Ok(GradStore { grads: leaves })
    }
}

/// Gradients of the differentiable leaves after one backward sweep.
pub struct GradStore {
    grads: HashMap<usize, Tensor>,
}

impl GradStore {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }
}

/// Handle to one node of a [`Graph`]. Cloning is cheap; all operations build
/// new nodes on the same tape.
#[derive(Clone)]
pub struct Var {
    nodes: Nodes,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn push(nodes: &Nodes, value: Tensor, op: Op, requires_grad: bool) -> Var {
    let mut n = nodes.borrow_mut();
    let id = n.len();
    n.push(NodeData {
        value,
        op,
        requires_grad,
    });
    Var {
        nodes: nodes.clone(),
        id,
    }
}

/// How two elementwise operand shapes line up: identical, or one is a
/// trailing suffix of the other and repeats across the leading axes.
enum Align {
    Same,
    LhsWide,
    RhsWide,
}

fn align(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Align> {
    if lhs == rhs {
        return Ok(Align::Same);
    }
    let suffix = |big: &[usize], small: &[usize]| small == &big[big.len() - small.len()..];
    if lhs.len() > rhs.len() && suffix(lhs, rhs) {
        Ok(Align::LhsWide)
    } else if rhs.len() > lhs.len() && suffix(rhs, lhs) {
        Ok(Align::RhsWide)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Elementwise combine where `small` cycles with period `small.len()`.
fn ew_cycle(big: &[f64], small: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let period = small.len();
    big.iter()
        .enumerate()
        .map(|(i, &b)| f(b, small[i % period]))
        .collect()
}

/// Sum a wide gradient down to the suffix shape of the small operand.
fn reduce_to_suffix(wide: &[f64], small_shape: &[usize]) -> Tensor {
    let small_numel: usize = small_shape.iter().product();
    let mut out = vec![0.0; small_numel];
    for (i, &g) in wide.iter().enumerate() {
        out[i % small_numel] += g;
    }
    Tensor::from_vec(small_shape.to_vec(), out).expect("suffix shape")
}

fn gelu_forward(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = k * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Handle to the tape this variable lives on.
    pub fn graph(&self) -> Graph {
        Graph {
            nodes: self.nodes.clone(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.nodes.borrow()[self.id].requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn same_graph(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn check_graph(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.same_graph(other) {
            Ok(())
        } else {
            Err(Error::GraphMismatch { op })
        }
    }

    fn rg2(&self, other: &Var) -> bool {
        let n = self.nodes.borrow();
        n[self.id].requires_grad || n[other.id].requires_grad
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.check_graph(rhs, "matmul")?;
        let value = {
            let n = self.nodes.borrow();
            let (a, b) = (&n[self.id].value, &n[rhs.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, nn) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_vec(vec![m, nn], mm_nn(a.data(), b.data(), m, k, nn))?
        };
        let rg = self.rg2(rhs);
        Ok(push(
            &self.nodes,
            value,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
            rg,
        ))
    }

    fn elementwise(
        &self,
        rhs: &Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        self.check_graph(rhs, name)?;
        let value = {
            let n = self.nodes.borrow();
            let (a, b) = (&n[self.id].value, &n[rhs.id].value);
            match align(name, a.shape(), b.shape())? {
                Align::Same => Tensor::from_vec(
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                )?,
                Align::LhsWide => {
                    Tensor::from_vec(a.shape().to_vec(), ew_cycle(a.data(), b.data(), f))?
                }
                Align::RhsWide => Tensor::from_vec(
                    b.shape().to_vec(),
                    ew_cycle(b.data(), a.data(), |y, x| f(x, y)),
                )?,
            }
        };
        let rg = self.rg2(rhs);
        Ok(push(&self.nodes, value, op(self.id, rhs.id), rg))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.elementwise(rhs, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.elementwise(rhs, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.elementwise(rhs, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        self.elementwise(rhs, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// Elementwise minimum; the tie at `a == b` routes the gradient to `a`.
    pub fn minimum(&self, rhs: &Var) -> Result<Var> {
        self.check_graph(rhs, "minimum")?;
        {
            let n = self.nodes.borrow();
            let (a, b) = (&n[self.id].value, &n[rhs.id].value);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "minimum",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        self.elementwise(rhs, "minimum", f64::min, |a, b| Op::Minimum { a, b })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArg {
                op: "clamp",
                why: format!("lo {lo} must not exceed hi {hi}"),
            });
        }
        self.unary(
            |x| x.clamp(lo, hi),
            |id| Op::Clamp { x: id, lo, hi },
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            (n[self.id].value.map(&f), n[self.id].requires_grad)
        };
        Ok(push(&self.nodes, value, op(self.id), rg))
    }

    pub fn smul(&self, c: f64) -> Result<Var> {
        self.unary(|x| x * c, |id| Op::ScalarMul { x: id, c })
    }

    pub fn sadd(&self, c: f64) -> Result<Var> {
        self.unary(|x| x + c, |id| Op::ScalarAdd { x: id })
    }

    pub fn neg(&self) -> Result<Var> {
        self.smul(-1.0)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(f64::exp, |id| Op::Exp { x: id })
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(f64::ln, |id| Op::Log { x: id })
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(f64::tanh, |id| Op::Tanh { x: id })
    }

    pub fn gelu(&self) -> Result<Var> {
        self.unary(gelu_forward, |id| Op::Gelu { x: id })
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_last(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            let d = x.last_dim();
            let mut out = x.clone();
            let mut scratch = vec![0.0; d];
            for r in 0..x.rows_folded() {
                let row = out.row_mut(r);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                }
                scratch.copy_from_slice(row);
                let denom = ordered_sum(&mut scratch);
                for v in row.iter_mut() {
                    *v /= denom;
                }
            }
            (out, n[self.id].requires_grad)
        };
        Ok(push(&self.nodes, value, Op::SoftmaxLast { x: self.id }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            let d = x.last_dim();
            let mut out = x.clone();
            let mut scratch = vec![0.0; d];
            for r in 0..x.rows_folded() {
                let row = out.row_mut(r);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                for (s, &v) in scratch.iter_mut().zip(row.iter()) {
                    *s = (v - m).exp();
                }
                let lse = m + ordered_sum(&mut scratch).ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            (out, n[self.id].requires_grad)
        };
        Ok(push(
            &self.nodes,
            value,
            Op::LogSoftmaxLast { x: self.id },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Var, bias: &Var) -> Result<Var> {
        self.check_graph(gain, "layer_norm")?;
        self.check_graph(bias, "layer_norm")?;
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            let g = &n[gain.id].value;
            let b = &n[bias.id].value;
            let d = x.last_dim();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for r in 0..x.rows_folded() {
                let row = out.row_mut(r);
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g.data()[j] * ((*v - mu) * inv) + b.data()[j];
                }
            }
            let rg = n[self.id].requires_grad
                || n[gain.id].requires_grad
                || n[bias.id].requires_grad;
            (out, rg)
        };
        Ok(push(
            &self.nodes,
            value,
            Op::LayerNormLast {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            let d = x.last_dim();
            if len == 0 || start + len > d {
                return Err(Error::InvalidArg {
                    op: "slice_last",
                    why: format!("range {start}..{} out of width {d}", start + len),
                });
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            let mut data = Vec::with_capacity(x.rows_folded() * len);
            for r in 0..x.rows_folded() {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            (Tensor::from_vec(shape, data)?, n[self.id].requires_grad)
        };
        Ok(push(
            &self.nodes,
            value,
            Op::SliceLast {
                x: self.id,
                start,
            },
            rg,
        ))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            if x.rank() == 0 {
                return Err(Error::InvalidShape {
                    op: "narrow_rows",
                    shape: x.shape().to_vec(),
                    why: "expected rank >= 1".into(),
                });
            }
            let rows = x.shape()[0];
            if len == 0 || start + len > rows {
                return Err(Error::InvalidArg {
                    op: "narrow_rows",
                    why: format!("range {start}..{} out of {rows} rows", start + len),
                });
            }
            let width = x.numel() / rows;
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            let data = x.data()[start * width..(start + len) * width].to_vec();
            (Tensor::from_vec(shape, data)?, n[self.id].requires_grad)
        };
        Ok(push(
            &self.nodes,
            value,
            Op::NarrowRows {
                x: self.id,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            (
                n[self.id].value.reshaped(shape.to_vec())?,
                n[self.id].requires_grad,
            )
        };
        Ok(push(&self.nodes, value, Op::Reshape { x: self.id }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            (n[self.id].value.transposed()?, n[self.id].requires_grad)
        };
        Ok(push(&self.nodes, value, Op::Transpose { x: self.id }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let mut scratch = n[self.id].value.data().to_vec();
            (
                Tensor::scalar(ordered_sum(&mut scratch)),
                n[self.id].requires_grad,
            )
        };
        Ok(push(&self.nodes, value, Op::Sum { x: self.id }, rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            let mut scratch = x.data().to_vec();
            (
                Tensor::scalar(ordered_sum(&mut scratch) / x.numel() as f64),
                n[self.id].requires_grad,
            )
        };
        Ok(push(&self.nodes, value, Op::Mean { x: self.id }, rg))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            if x.rank() == 0 {
                return Err(Error::InvalidShape {
                    op: "sum_last",
                    shape: x.shape().to_vec(),
                    why: "expected rank >= 1".into(),
                });
            }
            let d = x.last_dim();
            let mut shape = x.shape().to_vec();
            shape.pop();
            let mut scratch = vec![0.0; d];
            let data: Vec<f64> = (0..x.rows_folded())
                .map(|r| {
                    scratch.copy_from_slice(x.row(r));
                    ordered_sum(&mut scratch)
                })
                .collect();
            (Tensor::from_vec(shape, data)?, n[self.id].requires_grad)
        };
        Ok(push(&self.nodes, value, Op::SumLast { x: self.id }, rg))
    }

    /// One element per row of a 2-D tensor: `out[i] = x[i, idx[i]]`.
    pub fn gather_last(&self, idx: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let n = self.nodes.borrow();
            let x = &n[self.id].value;
            if x.rank() != 2 {
                return Err(Error::InvalidShape {
                    op: "gather_last",
                    shape: x.shape().to_vec(),
                    why: "expected rank 2".into(),
                });
            }
            let (m, d) = (x.shape()[0], x.shape()[1]);
            if idx.len() != m || idx.iter().any(|&j| j >= d) {
                return Err(Error::InvalidArg {
                    op: "gather_last",
                    why: format!("need {m} indices all below {d}"),
                });
            }
            let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x.row(i)[j]).collect();
            (Tensor::from_vec(vec![m], data)?, n[self.id].requires_grad)
        };
        Ok(push(
            &self.nodes,
            value,
            Op::GatherLast {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Attention mixing `A · V` for row-stochastic `A: [n,n]`, `V: [n,d]`,
    /// with the token-axis reduction in canonical order so the result is
    /// exactly equivariant under token permutation.
    pub fn attn_mix(&self, v: &Var) -> Result<Var> {
        self.check_graph(v, "attn_mix")?;
        let value = {
            let n = self.nodes.borrow();
            let (a, vv) = (&n[self.id].value, &n[v.id].value);
            if a.rank() != 2 || vv.rank() != 2 || a.shape()[0] != a.shape()[1]
                || a.shape()[1] != vv.shape()[0]
            {
                return Err(Error::ShapeMismatch {
                    op: "attn_mix",
                    lhs: a.shape().to_vec(),
                    rhs: vv.shape().to_vec(),
                });
            }
            let (nn, d) = (a.shape()[0], vv.shape()[1]);
            let mut out = vec![0.0; nn * d];
            let mut scratch = vec![0.0; nn];
            for i in 0..nn {
                for c in 0..d {
                    for (s, j) in scratch.iter_mut().zip(0..nn) {
                        *s = a.data()[i * nn + j] * vv.data()[j * d + c];
                    }
                    out[i * d + c] = ordered_sum(&mut scratch);
                }
            }
            Tensor::from_vec(vec![nn, d], out)?
        };
        let rg = self.rg2(v);
        Ok(push(
            &self.nodes,
            value,
            Op::AttnMix {
                a: self.id,
                v: v.id,
            },
            rg,
        ))
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&self) -> Var {
        let value = self.nodes.borrow()[self.id].value.clone();
        push(&self.nodes, value, Op::StopGrad, false)
    }
}

/// Concatenate along the last axis. All parts must share leading dimensions.
pub fn concat_last(parts: &[&Var]) -> Result<Var> {
    let first = parts.first().ok_or(Error::InvalidArg {
        op: "concat_last",
        why: "need at least one part".into(),
    })?;
    for p in parts.iter().skip(1) {
        first.check_graph(p, "concat_last")?;
    }
    let (value, rg) = {
        let n = first.nodes.borrow();
        let lead: Vec<usize> = {
            let s = n[first.id].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0usize;
        for p in parts {
            let s = n[p.id].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: n[first.id].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += *s.last().unwrap();
        }
        let rows = n[first.id].value.rows_folded();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(n[p.id].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| n[p.id].requires_grad);
        (Tensor::from_vec(shape, data)?, rg)
    };
    Ok(push(
        &first.nodes,
        value,
        Op::ConcatLast {
            parts: parts.iter().map(|p| p.id).collect(),
        },
        rg,
    ))
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }
}

/// Deposit a gradient on a parent if (and only if) the parent participates
/// in differentiation.
fn deposit(nodes: &[NodeData], grads: &mut [Option<Tensor>], pid: usize, g: Tensor) {
    if nodes[pid].requires_grad {
        accumulate(&mut grads[pid], g);
    }
}

fn backprop_one(
    op: &Op,
    out_value: &Tensor,
    g: &Tensor,
    nodes: &[NodeData],
    grads: &mut [Option<Tensor>],
) {
    match op {
        Op::Leaf | Op::StopGrad => unreachable!("handled by the sweep"),
        Op::Matmul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let da = mm_nt(g.data(), bv.data(), m, n, k);
                deposit(nodes, grads, *a, Tensor::from_vec(vec![m, k], da).unwrap());
            }
            if nodes[*b].requires_grad {
                let db = mm_tn(av.data(), g.data(), m, k, n);
                deposit(nodes, grads, *b, Tensor::from_vec(vec![k, n], db).unwrap());
            }
        }
        Op::Add { a, b } => {
            for &pid in [a, b] {
                if nodes[pid].requires_grad {
                    let ps = nodes[pid].value.shape();
                    let grad = if ps == g.shape() {
                        g.clone()
                    } else {
                        reduce_to_suffix(g.data(), ps)
                    };
                    deposit(nodes, grads, pid, grad);
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].requires_grad {
                let ps = nodes[*a].value.shape();
                let grad = if ps == g.shape() {
                    g.clone()
                } else {
                    reduce_to_suffix(g.data(), ps)
                };
                deposit(nodes, grads, *a, grad);
            }
            if nodes[*b].requires_grad {
                let neg: Vec<f64> = g.data().iter().map(|&x| -x).collect();
                let ps = nodes[*b].value.shape();
                let grad = if ps == g.shape() {
                    Tensor::from_vec(ps.to_vec(), neg).unwrap()
                } else {
                    reduce_to_suffix(&neg, ps)
                };
                deposit(nodes, grads, *b, grad);
            }
        }
        Op::Mul { a, b } | Op::Div { a, b } => {
            let is_div = matches!(op, Op::Div { .. });
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            // Expand both operands to the wide shape, form the local
            // derivative there, then reduce back to each parent's shape.
            let wide = g.numel();
            let fetch = |t: &Tensor, i: usize| t.data()[i % t.numel()];
            if nodes[*a].requires_grad {
                let da: Vec<f64> = (0..wide)
                    .map(|i| {
                        let gb = g.data()[i];
                        if is_div {
                            gb / fetch(bv, i)
                        } else {
                            gb * fetch(bv, i)
                        }
                    })
                    .collect();
                let ps = av.shape();
                let grad = if ps.iter().product::<usize>() == wide {
                    Tensor::from_vec(ps.to_vec(), da).unwrap()
                } else {
                    reduce_to_suffix(&da, ps)
                };
                deposit(nodes, grads, *a, grad);
            }
            if nodes[*b].requires_grad {
                let db: Vec<f64> = (0..wide)
                    .map(|i| {
                        let gb = g.data()[i];
                        if is_div {
                            let bb = fetch(bv, i);
                            -gb * fetch(av, i) / (bb * bb)
                        } else {
                            gb * fetch(av, i)
                        }
                    })
                    .collect();
                let ps = bv.shape();
                let grad = if ps.iter().product::<usize>() == wide {
                    Tensor::from_vec(ps.to_vec(), db).unwrap()
                } else {
                    reduce_to_suffix(&db, ps)
                };
                deposit(nodes, grads, *b, grad);
            }
        }
        Op::Minimum { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&gh, (&x, &y))| if x <= y { gh } else { 0.0 })
                    .collect();
                deposit(
                    nodes,
                    grads,
                    *a,
                    Tensor::from_vec(av.shape().to_vec(), da).unwrap(),
                );
            }
            if nodes[*b].requires_grad {
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&gh, (&x, &y))| if x > y { gh } else { 0.0 })
                    .collect();
                deposit(
                    nodes,
                    grads,
                    *b,
                    Tensor::from_vec(bv.shape().to_vec(), db).unwrap(),
                );
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = &nodes[*x].value;
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gh, &v)| if v >= *lo && v <= *hi { gh } else { 0.0 })
                .collect();
            deposit(
                nodes,
                grads,
                *x,
                Tensor::from_vec(xv.shape().to_vec(), dx).unwrap(),
            );
        }
        Op::ScalarMul { x, c } => {
            deposit(nodes, grads, *x, g.map(|v| v * c));
        }
        Op::ScalarAdd { x } => {
            deposit(nodes, grads, *x, g.clone());
        }
        Op::Exp { x } => {
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(out_value.data())
                .map(|(&gh, &y)| gh * y)
                .collect();
            deposit(
                nodes,
                grads,
                *x,
                Tensor::from_vec(out_value.shape().to_vec(), dx).unwrap(),
            );
        }
        Op::Log { x } => {
            let xv = &nodes[*x].value;
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gh, &v)| gh / v)
                .collect();
            deposit(
                nodes,
                grads,
                *x,
                Tensor::from_vec(xv.shape().to_vec(), dx).unwrap(),
            );
        }
        Op::Tanh { x } => {
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(out_value.data())
                .map(|(&gh, &y)| gh * (1.0 - y * y))
                .collect();
            deposit(
                nodes,
                grads,
                *x,
                Tensor::from_vec(out_value.shape().to_vec(), dx).unwrap(),
            );
        }
        Op::Gelu { x } => {
            let xv = &nodes[*x].value;
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gh, &v)| gh * gelu_derivative(v))
                .collect();
            deposit(
                nodes,
                grads,
                *x,
                Tensor::from_vec(xv.shape().to_vec(), dx).unwrap(),
            );
        }
        Op::SoftmaxLast { x } => {
            let y = out_value;
            let d = y.last_dim();
            let mut dx = y.clone();
            let mut scratch = vec![0.0; d];
            for r in 0..y.rows_folded() {
                let yr = y.row(r);
                let gr = g.row(r);
                for ((s, &yv), &gv) in scratch.iter_mut().zip(yr).zip(gr) {
                    *s = yv * gv;
                }
                let dot = ordered_sum(&mut scratch);
                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                    *v = yr[j] * (gr[j] - dot);
                }
            }
            deposit(nodes, grads, *x, dx);
        }
        Op::LogSoftmaxLast { x } => {
            let y = out_value;
            let d = y.last_dim();
            let mut dx = y.clone();
            let mut scratch = vec![0.0; d];
            for r in 0..y.rows_folded() {
                let gr = g.row(r);
                scratch.copy_from_slice(gr);
                let total = ordered_sum(&mut scratch);
                let yr = y.row(r);
                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                    *v = gr[j] - yr[j].exp() * total;
                }
            }
            deposit(nodes, grads, *x, dx);
        }
        Op::LayerNormLast { x, gain, bias } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let d = xv.last_dim();
            let rows = xv.rows_folded();
            let need_x = nodes[*x].requires_grad;
            let need_g = nodes[*gain].requires_grad;
            let need_b = nodes[*bias].requires_grad;
            let mut dx = if need_x { Some(Tensor::zeros(xv.shape())) } else { None };
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let xr = xv.row(r);
                let gr = g.row(r);
                let mu = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                if need_g || need_b {
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * inv;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                }
                if let Some(dxt) = dx.as_mut() {
                    // dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dxhat = gr[j] * gv.data()[j];
                        let xhat = (xr[j] - mu) * inv;
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                    s1 /= d as f64;
                    s2 /= d as f64;
                    for (j, v) in dxt.row_mut(r).iter_mut().enumerate() {
                        let dxhat = gr[j] * gv.data()[j];
                        let xhat = (xr[j] - mu) * inv;
                        *v = inv * (dxhat - s1 - xhat * s2);
                    }
                }
            }
            if let Some(dxt) = dx {
                deposit(nodes, grads, *x, dxt);
            }
            if need_g {
                deposit(nodes, grads, *gain, Tensor::from_vec(vec![d], dgain).unwrap());
            }
            if need_b {
                deposit(nodes, grads, *bias, Tensor::from_vec(vec![d], dbias).unwrap());
            }
        }
        Op::ConcatLast { parts } => {
            let rows = out_value.rows_folded();
            let mut offset = 0usize;
            for &pid in parts {
                let pv = &nodes[pid].value;
                let w = pv.last_dim();
                if nodes[pid].requires_grad {
                    let mut dp = Tensor::zeros(pv.shape());
                    for r in 0..rows {
                        dp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    deposit(nodes, grads, pid, dp);
                }
                offset += w;
            }
        }
        Op::SliceLast { x, start } => {
            let xv = &nodes[*x].value;
            let len = out_value.last_dim();
            let mut dx = Tensor::zeros(xv.shape());
            for r in 0..xv.rows_folded() {
                dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
            }
            deposit(nodes, grads, *x, dx);
        }
        Op::NarrowRows { x, start } => {
            let xv = &nodes[*x].value;
            let rows = xv.shape()[0];
            let width = xv.numel() / rows;
            let len = out_value.shape()[0];
            let mut dx = Tensor::zeros(xv.shape());
            dx.data_mut()[start * width..(start + len) * width].copy_from_slice(g.data());
            deposit(nodes, grads, *x, dx);
        }
        Op::Reshape { x } => {
            let ps = nodes[*x].value.shape().to_vec();
            deposit(nodes, grads, *x, g.reshaped(ps).unwrap());
        }
        Op::Transpose { x } => {
            deposit(nodes, grads, *x, g.transposed().unwrap());
        }
        Op::Sum { x } => {
            let xv = &nodes[*x].value;
            deposit(nodes, grads, *x, Tensor::full(xv.shape(), g.data()[0]));
        }
        Op::Mean { x } => {
            let xv = &nodes[*x].value;
            deposit(
                nodes,
                grads,
                *x,
                Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f64),
            );
        }
        Op::SumLast { x } => {
            let xv = &nodes[*x].value;
            let mut dx = Tensor::zeros(xv.shape());
            for r in 0..xv.rows_folded() {
                let gr = g.data()[r];
                for v in dx.row_mut(r).iter_mut() {
                    *v = gr;
                }
            }
            deposit(nodes, grads, *x, dx);
        }
        Op::GatherLast { x, idx } => {
            let xv = &nodes[*x].value;
            let mut dx = Tensor::zeros(xv.shape());
            for (i, &j) in idx.iter().enumerate() {
                dx.row_mut(i)[j] += g.data()[i];
            }
            deposit(nodes, grads, *x, dx);
        }
        Op::AttnMix { a, v } => {
            let av = &nodes[*a].value;
            let vv = &nodes[*v].value;
            let n = av.shape()[0];
            let d = vv.shape()[1];
            if nodes[*a].requires_grad {
                // dA[i,j] = <g[i,:], V[j,:]> — reduction over features, order fixed.
                let da = mm_nt(g.data(), vv.data(), n, d, n);
                deposit(nodes, grads, *a, Tensor::from_vec(vec![n, n], da).unwrap());
            }
            if nodes[*v].requires_grad {
                // dV[j,c] = sum_i A[i,j]·g[i,c] — token-axis reduction, canonical order.
                let mut dv = vec![0.0; n * d];
                let mut scratch = vec![0.0; n];
                for j in 0..n {
                    for c in 0..d {
                        for (s, i) in scratch.iter_mut().zip(0..n) {
                            *s = av.data()[i * n + j] * g.data()[i * d + c];
                        }
                        dv[j * d + c] = ordered_sum(&mut scratch);
                    }
                }
                deposit(nodes, grads, *v, Tensor::from_vec(vec![n, d], dv).unwrap());
            }
        }
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference, per coordinate:
/// `|analytic − central| / max(1e-8, |analytic| + |central|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArg {
            op: "grad_check",
            why: "eps must be positive".into(),
        });
    }
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&g, &xv)?;
    let y0 = y.item()?;
    if !y0.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check forward".into(),
        });
    }
    let grads = g.backward(&y)?;
    let analytic = grads
        .get(&xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(pt.clone());
        let out = f(&g, &v)?.item()?;
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                context: "grad_check perturbed forward".into(),
            })
        }
    };

    let mut probe = x.clone();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
