//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] replays the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because a node can only reference nodes recorded before it.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

/// Forward mode; only dropout distinguishes the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Ln(Var),
    Pow {
        x: Var,
        p: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softplus(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRowsGrouped {
        x: Var,
        groups: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        n: usize,
        l: usize,
        h: usize,
    },
    MergeHeads {
        x: Var,
        n: usize,
        l: usize,
        h: usize,
    },
    RepeatGroups {
        x: Var,
        times: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros when `v` is off the loss path.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance between the input of any relu or clamp node on a
    /// gradient path and that node's kink; infinite when there is none.
    /// Finite differences with a step well below this margin never cross
    /// a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in self.nodes.iter().filter(|n| n.requires_grad) {
            match n.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => {
                    for v in self.nodes[x.0].value.data() {
                        m = m.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in self.nodes[x.0].value.data() {
                        m = m.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {}
            }
        }
        m
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let t = Tensor::new([m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched product over the leading axis: `a[B×m×k] · b[B×k×n]`
    /// (or `b[B×n×k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("bmm", av, bv));
        }
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != kb {
            return Err(shape_err("bmm", av, bv));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new([bs, m, n], out)?;
        self.push("bmm", t, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a vector along the trailing axis (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.numel() != d || bv.rank() > 1 {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_const", x, |v| v + c, Op::AddConst { x })
    }

    /// `x · s` for a single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        self.unary("mul_scalar", x, |v| v * sv, Op::MulScalar { x, s })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
        };
        self.unary("activation", x, f, Op::Act { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Natural logarithm; non-positive inputs are a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary("powf", x, |v| v.powf(p), Op::Pow { x, p })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(TensorError::Invalid("softmax over an empty axis".into()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = xv.sum() / xv.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column sums of a 2-D tensor: `[n×c] → [c]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "sum_rows",
                expected: 2,
                got: xv.shape().to_vec(),
            });
        }
        let c = xv.shape()[1];
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push("sum_rows", Tensor::new([c], out)?, Op::SumRows(x), &[x])
    }

    /// Averages consecutive row blocks: `[g·r×c] → [g×c]`.
    pub fn mean_rows_grouped(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || groups == 0 || !xv.shape()[0].is_multiple_of(groups) {
            return Err(TensorError::Invalid(format!(
                "mean_rows_grouped: cannot split {:?} into {groups} groups",
                xv.shape()
            )));
        }
        let (rows, c) = (xv.shape()[0], xv.shape()[1]);
        let per = rows / groups;
        let mut out = vec![0.0; groups * c];
        for (i, row) in xv.data().chunks(c.max(1)).enumerate() {
            let g = i / per;
            for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= per as f64);
        let t = Tensor::new([groups, c], out)?;
        self.push("mean_rows_grouped", t, Op::MeanRowsGrouped { x, groups }, &[x])
    }

    /// Concatenates two 2-D tensors along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("concat_last", av, bv));
        }
        let (n, da, db) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv.data()[i * db..(i + 1) * db]);
        }
        let t = Tensor::new([n, da + db], out)?;
        self.push("concat_last", t, Op::Concat { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", xv, self.value(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layer_norm", t, op, &[x, gain, bias])
    }

    /// Row lookup `table[idx[i]]`: `[v×d] → [n×d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "gather_rows",
                expected: 2,
                got: tv.shape().to_vec(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(TensorError::Index { index: i, extent: v });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new([idx.len(), d], out)?;
        let op = Op::GatherRows {
            table,
            idx: idx.to_vec(),
        };
        self.push("gather_rows", t, op, &[table])
    }

    /// `[n·l × h·e] → [n·h × l × e]`: splits feature columns into heads.
    pub fn split_heads(&mut self, x: Var, n: usize, l: usize, h: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != n * l || h == 0 || !xv.shape()[1].is_multiple_of(h) {
            return Err(TensorError::Invalid(format!(
                "split_heads: shape {:?} incompatible with n={n} l={l} h={h}",
                xv.shape()
            )));
        }
        let e = xv.shape()[1] / h;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..l {
                for hh in 0..h {
                    let s = (b * l + p) * h * e + hh * e;
                    let t = ((b * h + hh) * l + p) * e;
                    out[t..t + e].copy_from_slice(&src[s..s + e]);
                }
            }
        }
        let t = Tensor::new([n * h, l, e], out)?;
        self.push("split_heads", t, Op::SplitHeads { x, n, l, h }, &[x])
    }

    /// Inverse of [`Tape::split_heads`]: `[n·h × l × e] → [n·l × h·e]`.
    pub fn merge_heads(&mut self, x: Var, n: usize, l: usize, h: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != n * h || xv.shape()[1] != l {
            return Err(TensorError::Invalid(format!(
                "merge_heads: shape {:?} incompatible with n={n} l={l} h={h}",
                xv.shape()
            )));
        }
        let e = xv.shape()[2];
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..l {
                for hh in 0..h {
                    let s = ((b * h + hh) * l + p) * e;
                    let t = (b * l + p) * h * e + hh * e;
                    out[t..t + e].copy_from_slice(&src[s..s + e]);
                }
            }
        }
        let t = Tensor::new([n * l, h * e], out)?;
        self.push("merge_heads", t, Op::MergeHeads { x, n, l, h }, &[x])
    }

    /// Repeats each leading-axis block `times` times consecutively.
    pub fn repeat_groups(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || times == 0 {
            return Err(TensorError::Invalid("repeat_groups needs rank ≥ 1".into()));
        }
        let n = xv.shape()[0];
        let block = xv.numel() / n.max(1);
        let mut out = Vec::with_capacity(xv.numel() * times);
        for b in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&xv.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] *= times;
        let t = Tensor::new(shape, out)?;
        self.push("repeat_groups", t, Op::RepeatGroups { x, times }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                // dA = dC · op(B)ᵀ
                acc(*a, &mut |da| gemm(m, n, k, g, false, val(*b), !trans_b, da, true));
                if *trans_b {
                    // B is n×k: dB = dCᵀ · A
                    acc(*b, &mut |db| gemm(n, m, k, g, true, val(*a), false, db, true));
                } else {
                    // B is k×n: dB = Aᵀ · dC
                    acc(*b, &mut |db| gemm(k, m, n, val(*a), true, g, false, db, true));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = node.value.shape()[2];
                let (sa, sb, sc) = (m * k, k * n, m * n);
                acc(*a, &mut |da| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * sc..(i + 1) * sc],
                            false,
                            &val(*b)[i * sb..(i + 1) * sb],
                            !trans_b,
                            &mut da[i * sa..(i + 1) * sa],
                            true,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..bs {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ai = &val(*a)[i * sa..(i + 1) * sa];
                        let dbi = &mut db[i * sb..(i + 1) * sb];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*bias, &mut |d| {
                    let c = d.len();
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
            }
            Op::AddConst { x } | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv));
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::Act { x, kind } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let local = match kind {
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        d[i] += g[i] * local;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Pow { x, p } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * p * xv[i].powf(p - 1.0);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                acc(*x, &mut |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::SumRows(x) => {
                acc(*x, &mut |d| {
                    let c = g.len();
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MeanRowsGrouped { x, groups } => {
                let c = node.value.last_dim();
                acc(*x, &mut |d| {
                    let per = d.len() / c / groups;
                    for (i, row) in d.chunks_mut(c).enumerate() {
                        let gg = &g[(i / per) * c..(i / per + 1) * c];
                        row.iter_mut().zip(gg).for_each(|(d, g)| *d += g / per as f64);
                    }
                });
            }
            Op::Concat { a, b } => {
                let da_n = self.shape(*a)[1];
                let db_n = self.shape(*b)[1];
                let w = da_n + db_n;
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(da_n.max(1)).zip(g.chunks(w)) {
                        drow.iter_mut().zip(&grow[..da_n]).for_each(|(d, g)| *d += g);
                    }
                });
                acc(*b, &mut |d| {
                    for (drow, grow) in d.chunks_mut(db_n.max(1)).zip(g.chunks(w)) {
                        drow.iter_mut().zip(&grow[da_n..]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gv = val(*gain);
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            d[r * c + j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(c) {
                        d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let c = node.value.last_dim();
                acc(*table, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::SplitHeads { x, n, l, h } => {
                let e = node.value.shape()[2];
                acc(*x, &mut |d| {
                    for b in 0..*n {
                        for p in 0..*l {
                            for hh in 0..*h {
                                let s = (b * l + p) * h * e + hh * e;
                                let t = ((b * h + hh) * l + p) * e;
                                for k in 0..e {
                                    d[s + k] += g[t + k];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, n, l, h } => {
                let e = self.shape(*x)[2];
                acc(*x, &mut |d| {
                    for b in 0..*n {
                        for p in 0..*l {
                            for hh in 0..*h {
                                let s = ((b * h + hh) * l + p) * e;
                                let t = (b * l + p) * h * e + hh * e;
                                for k in 0..e {
                                    d[s + k] += g[t + k];
                                }
                            }
                        }
                    }
                });
            }
            Op::RepeatGroups { x, times } => {
                acc(*x, &mut |d| {
                    let n = self.shape(*x)[0];
                    let block = d.len() / n.max(1);
                    for b in 0..n {
                        for t in 0..*times {
                            let src = &g[(b * times + t) * block..(b * times + t + 1) * block];
                            d[b * block..(b + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let col = tape.constant(t2(&[vec![5.0], vec![6.0]]));
        let out = tape.matmul(m, col).unwrap();
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);

        let z = tape.constant(Tensor::zeros([2, 2]));
        let out = tape.matmul(z, m).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([3], vec![0.0, -3.5, 2.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let big = tape.constant(Tensor::new([2], vec![800.0, -800.0]).unwrap());
        let sb = tape.sigmoid(big).unwrap();
        let v = tape.value(sb).data();
        assert!(v[0] <= 1.0 && v[1] >= 0.0);
    }

    #[test]
    fn softmax_reference_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let other = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(other).is_none());
        assert_eq!(grads.wrt(&tape, other).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1], vec![0.0]).unwrap());
        assert!(matches!(tape.ln(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn dropout_identities_and_rate_check() {
        let mut rng = crate::rng::stream(7, crate::rng::Stream::Dropout);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([5], |i| i as f64 + 0.5));
        let e = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert!(tape.value(e).bit_eq(tape.value(x)));
        let z = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(z).bit_eq(tape.value(x)));
        assert!(matches!(
            tape.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(TensorError::DropoutRate(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = crate::rng::stream(11, crate::rng::Stream::Dropout);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([10_000]));
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([6, 4], |i| i as f64));
        let s = tape.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(tape.value(s).shape(), &[4, 3, 2]);
        // head 1 of batch 0, position 2 holds columns 2..4 of row 2
        assert_eq!(&tape.value(s).data()[(3 + 2) * 2..(3 + 2) * 2 + 2], &[10.0, 11.0]);
        let m = tape.merge_heads(s, 2, 3, 2).unwrap();
        assert!(tape.value(m).bit_eq(tape.value(x)));
    }
}
