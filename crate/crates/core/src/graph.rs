//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Node
//! ids are handed out in creation order, so the tape is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients of leaves accumulate across `backward` calls until
//! [`Graph::zero_grad`]; gradients of interior nodes are per call.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance estimates of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Batch-norm constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Extreme {
        input: Var,
        arg: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Select {
        input: Var,
        indices: Vec<usize>,
    },
    PairwiseSqDist(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        arg: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | PairwiseSqDist(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Relu(a)
            | Sigmoid(a)
            | Tanh(a)
            | Softplus(a)
            | Transpose(a)
            | Reshape(a)
            | Sum(a)
            | SumAxis(a, _)
            | Softmax(a)
            | LogSoftmax(a) => vec![*a],
            Extreme { input, .. } | Narrow { input, .. } | Select { input, .. } | MaxPool { input, .. } => {
                vec![*input]
            }
            Concat { inputs, .. } => inputs.clone(),
            Conv2d { input, weight, .. } => vec![*input, *weight],
            BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Linear { input, weight, bias } => vec![*input, *weight, *bias],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The differentiation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast operand.
fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if out == input {
        return (0..numel).collect();
    }
    let rank = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0; rank];
    for i in 0..input.len() {
        let axis = rank - input.len() + i;
        eff[axis] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let mut idx = vec![0; rank];
    let mut offsets = Vec::with_capacity(numel);
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    offsets
}

fn reduce_into<T: Real>(grad: &[T], offsets: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&g, &o) in grad.iter().zip(offsets) {
        out[o] = out[o] + g;
    }
    out
}

fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - m).exp();
            s = s + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / s;
        }
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `[m,k]·[k,n]` with optional transposition of either operand, via gemm.
#[allow(clippy::too_many_arguments)]
fn matmul_into<T: Real>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
) -> Vec<T> {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let n = if trans_b { b_rows } else { b_cols };
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if trans_a {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    // SAFETY: strides describe the dense row-major buffers a, b and out.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Input handles of a recorded node, in argument order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(op, format!("cannot broadcast {:?} with {:?}", sa, sb)))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        // x·x keeps a single code path for the gradient.
        self.mul(a, a).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln(),
            Op::Softplus(a),
        )
    }

    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Collapses all trailing axes: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    fn expect_rank(&self, op: &'static str, a: Var, rank: usize) -> Result<()> {
        let shape = self.shape(a);
        if shape.len() != rank {
            return Err(shape_err(op, format!("expected rank {}, got {:?}", rank, shape)));
        }
        Ok(())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("transpose", a, 2)?;
        let src = self.value(a);
        let (r, c) = (src.shape()[0], src.shape()[1]);
        let d = src.data();
        let value = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {} out of range for {:?}", axis, base),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", base, s, axis)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("{}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Narrow { input: a, axis, start }))
    }

    /// Gathers leading-axis slices; indices may repeat.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let extent = self.shape(a).first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(shape_err("select", format!("index {} out of {}", bad, extent)));
        }
        let value = self.value(a).select(indices);
        Ok(self.push(
            value,
            Op::Select {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    fn axis_geometry(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(shape_err(op, format!("axis {} out of range for {:?}", axis, shape)));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn keepdim_shape(&self, a: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(a).to_vec();
        s[axis] = 1;
        s
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_geometry("sum_axis", a, axis)?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let value = Tensor::new(&self.keepdim_shape(a, axis), data)?;
        Ok(self.push(value, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::lit(len as f64)))
    }

    fn extreme_axis(&mut self, a: Var, axis: usize, take_max: bool) -> Result<Var> {
        let (outer, len, inner) = self.axis_geometry("extreme_axis", a, axis)?;
        if len == 0 {
            return Err(shape_err("extreme_axis", "empty axis".into()));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let cand = (o * len + l) * inner + i;
                    let better = if take_max {
                        src[cand] > src[best]
                    } else {
                        src[cand] < src[best]
                    };
                    if better {
                        best = cand;
                    }
                }
                data.push(src[best]);
                arg.push(best);
            }
        }
        let value = Tensor::new(&self.keepdim_shape(a, axis), data)?;
        Ok(self.push(value, Op::Extreme { input: a, arg }))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.extreme_axis(a, axis, true)
    }

    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.extreme_axis(a, axis, false)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = *self
            .shape(a)
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let value = Tensor::new(self.shape(a), softmax_rows(self.value(a).data(), cols))?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = *self
            .shape(a)
            .last()
            .ok_or_else(|| shape_err("log_softmax", "scalar input".into()))?;
        let mut data = Vec::with_capacity(self.value(a).numel());
        for row in self.value(a).data().chunks(cols) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::LogSoftmax(a)))
    }

    // ---- linear algebra --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let data = matmul_into(
            self.value(a).data(),
            sa[0],
            sa[1],
            false,
            self.value(b).data(),
            sb[0],
            sb[1],
            false,
        );
        let value = Tensor::new(&[sa[0], sb[1]], data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Squared Euclidean distance between every row of `a` `[P,M]` and of `b` `[Q,M]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("pairwise_sq_dist", a, 2)?;
        self.expect_rank("pairwise_sq_dist", b, 2)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[1] != sb[1] {
            return Err(shape_err(
                "pairwise_sq_dist",
                format!("feature dims differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let m = sa[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sa[0] * sb[0]);
        for i in 0..sa[0] {
            let ra = &va[i * m..(i + 1) * m];
            for j in 0..sb[0] {
                let rb = &vb[j * m..(j + 1) * m];
                data.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::new(&[sa[0], sb[0]], data)?;
        Ok(self.push(value, Op::PairwiseSqDist(a, b)))
    }

    /// `x·Wᵀ + b` for `x: [N,I]`, `W: [O,I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.expect_rank("linear", x, 2)?;
        self.expect_rank("linear", weight, 2)?;
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", sx, sw, sb),
            ));
        }
        let mut data = matmul_into(
            self.value(x).data(),
            sx[0],
            sx[1],
            false,
            self.value(weight).data(),
            sw[0],
            sw[1],
            true,
        );
        let bv = self.value(bias).data();
        for row in data.chunks_mut(sw[0]) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(&[sx[0], sw[0]], data)?;
        Ok(self.push(value, Op::Linear { input: x, weight, bias }))
    }

    // ---- convolutional stack -----------------------------------------------------

    /// Stride-1 cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, padding: usize) -> Result<Var> {
        self.expect_rank("conv2d", input, 4)?;
        self.expect_rank("conv2d", weight, 4)?;
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, filters expect {}", si[1], sw[1]),
            ));
        }
        let (ph, pw) = (si[2] + 2 * padding, si[3] + 2 * padding);
        if ph < sw[2] || pw < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "{}x{} input (padding {}) smaller than {}x{} kernel",
                    si[2], si[3], padding, sw[2], sw[3]
                ),
            ));
        }
        let geom = ConvGeom {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            f: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad: padding,
            oh: ph - sw[2] + 1,
            ow: pw - sw[3] + 1,
        };
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(&[geom.n, geom.f, geom.oh, geom.ow], data)?;
        Ok(self.push(value, Op::Conv2d { input, weight, geom }))
    }

    /// 2×2 stride-2 max pooling (floor). Ties send the gradient to the first
    /// row-major maximum.
    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        self.expect_rank("max_pool2x2", input, 4)?;
        let s = self.shape(input).to_vec();
        if s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2x2", format!("spatial extent too small: {:?}", s)));
        }
        let (data, arg) = kernels::max_pool2x2(self.value(input).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], data)?;
        Ok(self.push(value, Op::MaxPool { input, arg }))
    }

    /// Per-channel batch normalization of `[N,F,H,W]`.
    ///
    /// In [`BnMode::Train`] the batch statistics normalize the input and the
    /// returned running estimates are the momentum update of `running`; the
    /// caller decides whether to keep them. [`BnMode::Eval`] normalizes with
    /// `running` and returns `None`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BnMode,
        config: BatchNormConfig,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        self.expect_rank("batch_norm", input, 4)?;
        let s = self.shape(input).to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "{} channels but gamma {:?}, beta {:?}",
                    c,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::lit(config.eps);
        let x = self.value(input).data();
        let (mean, var, updated) = match mode {
            BnMode::Train => {
                let (mean, var) = kernels::channel_moments(x, n, c, plane);
                let m = T::lit(config.momentum);
                let count = n * plane;
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let updated = RunningStats {
                    mean: running
                        .mean
                        .iter()
                        .zip(&mean)
                        .map(|(&r, &b)| (T::one() - m) * r + m * b)
                        .collect(),
                    var: running
                        .var
                        .iter()
                        .zip(&var)
                        .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                        .collect(),
                };
                (mean, var, Some(updated))
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let keep = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let mut xhat = if keep { vec![T::zero(); x.len()] } else { Vec::new() };
        let mut out = vec![T::zero(); x.len()];
        for (i, (src, dst)) in x.chunks(plane.max(1)).zip(out.chunks_mut(plane.max(1))).enumerate() {
            let ch = i % c;
            let (m, k, gg, bb) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            if keep {
                let hs = &mut xhat[i * plane..(i + 1) * plane];
                for ((&v, h), o) in src.iter().zip(hs).zip(dst) {
                    *h = (v - m) * k;
                    *o = gg * *h + bb;
                }
            } else {
                for (&v, o) in src.iter().zip(dst) {
                    *o = gg * ((v - m) * k) + bb;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        );
        Ok((var_out, updated))
    }

    // ---- backward ------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, adding into the gradients of every
    /// leaf that requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let shape = self.nodes[id].value.shape().to_vec();
                match &mut self.leaf_grads[id] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + v;
                        }
                    }
                    slot => *slot = Some(Tensor::new(&shape, g)?),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(&contrib) {
                            *a = *a + v;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.needs(*a) {
                    let oa = broadcast_offsets(out_shape, shp(*a));
                    res.push((*a, reduce_into(g, &oa, val(*a).len())));
                }
                if self.needs(*b) {
                    let ob = broadcast_offsets(out_shape, shp(*b));
                    let gs: Vec<T> = g.iter().map(|&x| x * sign).collect();
                    res.push((*b, reduce_into(&gs, &ob, val(*b).len())));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let oa = broadcast_offsets(out_shape, shp(*a));
                let ob = broadcast_offsets(out_shape, shp(*b));
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(&ob)
                        .map(|(&x, &j)| if is_div { x / vb[j] } else { x * vb[j] })
                        .collect();
                    res.push((*a, reduce_into(&ga, &oa, va.len())));
                }
                if self.needs(*b) {
                    let gb: Vec<T> = g
                        .iter()
                        .zip(oa.iter().zip(&ob))
                        .map(|(&x, (&i, &j))| {
                            if is_div {
                                -x * va[i] / (vb[j] * vb[j])
                            } else {
                                x * va[i]
                            }
                        })
                        .collect();
                    res.push((*b, reduce_into(&gb, &ob, vb.len())));
                }
            }
            Op::Scale(a, k) => res.push((*a, g.iter().map(|&x| x * *k).collect())),
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(&x, &y)| x * y).collect())),
            Op::Ln(a) => res.push((*a, g.iter().zip(val(*a)).map(|(&x, &v)| x / v).collect())),
            Op::Sqrt(a) => res.push((*a, g.iter().zip(out).map(|(&x, &y)| x * T::lit(0.5) / y).collect())),
            Op::Relu(a) => res.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect(),
            )),
            Op::Sigmoid(a) => res.push((*a, g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)).collect())),
            Op::Tanh(a) => res.push((*a, g.iter().zip(out).map(|(&x, &y)| x * (T::one() - y * y)).collect())),
            Op::Softplus(a) => res.push((*a, g.iter().zip(val(*a)).map(|(&x, &v)| x * sigmoid(v)).collect())),
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                // g is [c, r]; input grad is its transpose.
                res.push((*a, (0..r * c).map(|i| g[(i % c) * r + i / c]).collect()));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::SumAxis(a, axis) => {
                let s = shp(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut ga = Vec::with_capacity(val(*a).len());
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((*a, ga));
            }
            Op::Extreme { input, arg } => {
                let mut ga = vec![T::zero(); val(*input).len()];
                for (&x, &i) in g.iter().zip(arg) {
                    ga[i] = ga[i] + x;
                }
                res.push((*input, ga));
            }
            Op::Softmax(a) => {
                let cols = *out_shape.last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                res.push((*a, ga));
            }
            Op::LogSoftmax(a) => {
                let cols = *out_shape.last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.chunks(cols)) {
                    let total: T = gr.iter().copied().sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| x - y.exp() * total));
                }
                res.push((*a, ga));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = shp(*v)[*axis];
                    if self.needs(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((*v, gv));
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = shp(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut ga = vec![T::zero(); val(*input).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*input, ga));
            }
            Op::Select { input, indices } => {
                let inner: usize = shp(*input)[1..].iter().product();
                let mut ga = vec![T::zero(); val(*input).len()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &x) in ga[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                    {
                        *d = *d + x;
                    }
                }
                res.push((*input, ga));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                if self.needs(*a) {
                    // dA = G·Bᵀ
                    res.push((*a, matmul_into(g, sa[0], sb[1], false, val(*b), sb[0], sb[1], true)));
                }
                if self.needs(*b) {
                    // dB = Aᵀ·G
                    res.push((*b, matmul_into(val(*a), sa[0], sa[1], true, g, sa[0], sb[1], false)));
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (p, q, m) = (sa[0], sb[0], sa[1]);
                let (va, vb) = (val(*a), val(*b));
                let two = T::lit(2.0);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); p * m];
                    for i in 0..p {
                        for j in 0..q {
                            let w = g[i * q + j] * two;
                            for k in 0..m {
                                ga[i * m + k] = ga[i * m + k] + w * (va[i * m + k] - vb[j * m + k]);
                            }
                        }
                    }
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); q * m];
                    for i in 0..p {
                        for j in 0..q {
                            let w = g[i * q + j] * two;
                            for k in 0..m {
                                gb[j * m + k] = gb[j * m + k] - w * (va[i * m + k] - vb[j * m + k]);
                            }
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (sx, sw) = (shp(*input), shp(*weight));
                let (n, i_dim, o_dim) = (sx[0], sx[1], sw[0]);
                if self.needs(*input) {
                    res.push((
                        *input,
                        matmul_into(g, n, o_dim, false, val(*weight), o_dim, i_dim, false),
                    ));
                }
                if self.needs(*weight) {
                    res.push((*weight, matmul_into(g, n, o_dim, true, val(*input), n, i_dim, false)));
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); o_dim];
                    for row in g.chunks(o_dim) {
                        for (d, &x) in gb.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    geom,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                if let Some(dw) = dw {
                    res.push((*weight, dw));
                }
            }
            Op::MaxPool { input, arg } => {
                let mut ga = vec![T::zero(); val(*input).len()];
                for (&x, &i) in g.iter().zip(arg) {
                    ga[i] = ga[i] + x;
                }
                res.push((*input, ga));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = shp(*input);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                let p = plane.max(1);
                for (i, (gs, hs)) in g.chunks(p).zip(xhat.chunks(p)).enumerate() {
                    let ch = i % c;
                    sum_g[ch] = sum_g[ch] + kernels::lane_sum(gs);
                    sum_gx[ch] = sum_gx[ch] + kernels::lane_dot(gs, hs);
                }
                if self.needs(*input) {
                    let mut gx = vec![T::zero(); g.len()];
                    let count = T::lit((n * plane) as f64);
                    for (i, ((gs, hs), dst)) in g.chunks(p).zip(xhat.chunks(p)).zip(gx.chunks_mut(p)).enumerate() {
                        let ch = i % c;
                        let k0 = gv[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                            for ((&gk, &hk), d) in gs.iter().zip(hs).zip(dst) {
                                *d = k0 * (gk - mg - hk * mgx);
                            }
                        } else {
                            for (&gk, d) in gs.iter().zip(dst) {
                                *d = k0 * gk;
                            }
                        }
                    }
                    res.push((*input, gx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    res.push((*beta, sum_g));
                }
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0f64));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0f64));
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constant_loss_leaves_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let zero = g.scale(x, 0.0);
        let s = g.add(zero, c).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcasting_follows_trailing_alignment() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col = g.constant(t(&[2, 1], &[10.0, 20.0]));
        let row = g.constant(t(&[3], &[1.0, 0.0, -1.0]));
        let x = g.add(a, col).unwrap();
        let y = g.mul(x, row).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 0.0, -13.0, 24.0, 0.0, -26.0]);
        let bad = g.constant(t(&[2], &[1.0, 1.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn relu_and_softmax_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-3.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::zeros(&[1, 5]));
        let s = g.softmax(z).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn pool_picks_maximum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
    }

    #[test]
    fn three_four_five() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let b = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let d = g.pairwise_sq_dist(a, b).unwrap();
        assert_eq!(g.value(d).item(), 25.0);
        let c = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(g.pairwise_sq_dist(a, c).is_err());
    }

    #[test]
    fn conv_of_ones_and_identity_filter() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);

        let patch = g.constant(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut center = Tensor::zeros(&[1, 1, 3, 3]);
        center.data_mut()[4] = 1.0;
        let w = g.constant(center);
        let y = g.conv2d(patch, w, 0).unwrap();
        assert_eq!(g.value(y).item(), 5.0);

        let wrong = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, wrong, 0).is_err());
    }

    #[test]
    fn batch_norm_constant_and_affine_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 7.0));
        let one = g.constant(Tensor::ones(&[1]));
        let zero = g.constant(Tensor::zeros(&[1]));
        let stats = RunningStats::new(1);
        let (y, upd) = g
            .batch_norm(x, one, zero, &stats, BnMode::Train, BatchNormConfig::default())
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let upd = upd.unwrap();
        assert!((upd.mean[0] - 0.7f64).abs() < 1e-12);

        let xr = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let gz = g.constant(Tensor::zeros(&[1]));
        let five = g.constant(Tensor::full(&[1], 5.0));
        let (y, _) = g
            .batch_norm(xr, gz, five, &stats, BnMode::Train, BatchNormConfig::default())
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.exp(a);
        let c = g.mul(a, b).unwrap();
        let d = g.sum(c);
        for id in 0..g.len() {
            for input in g.inputs_of(Var(id)) {
                assert!(input.index() < id);
            }
        }
        g.backward(d).unwrap();
        // d/da (a e^a) = e^a (1 + a)
        let ga = g.grad(a).unwrap().data();
        assert!((ga[0] - 1f64.exp() * 2.0).abs() < 1e-12);
        assert!((ga[1] - 2f64.exp() * 3.0).abs() < 1e-12);
    }
}
