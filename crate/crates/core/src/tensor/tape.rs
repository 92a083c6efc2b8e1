use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm, gemm_nt, gemm_tn};
use super::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    Relu,
    Gelu,
}

/// Which operand of a binary op (if any) repeats across the output.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// The left operand has `n` elements and repeats every `n` outputs.
    Left(usize),
    /// The right operand has `n` elements and repeats every `n` outputs.
    Right(usize),
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<TensorId>,
    },
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    MeanAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    Narrow {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        width: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    GatherRows {
        a: Var,
        indices: Vec<usize>,
        row_len: usize,
    },
    ScaleRows {
        a: Var,
        s: Var,
        row_len: usize,
    },
    CausalMask {
        a: Var,
        len: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        dim: usize,
        norms: Vec<(f64, f64)>,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Norms below this are treated as zero by [`Tape::cosine_rows`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Append-only record of a forward computation. Node order is a valid
/// topological order; `backward` walks it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_tensor: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.by_tensor.get(&id).map(Vec::as_slice)
    }

    pub fn of(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.get(tensor.id())
    }

    pub fn len(&self) -> usize {
        self.by_tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tensor.is_empty()
    }

    /// Accumulate into the `grad` slot of each tensor that has an entry.
    pub fn populate<'a>(&self, tensors: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for t in tensors {
            if let Some(g) = self.get(t.id()) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(&delta) {
                *x += d;
            }
        }
        None => *slot = Some(delta),
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor as a leaf. Gradients flow back to it iff it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let param = t.requires_grad().then(|| t.id());
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param },
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "constant data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf { param: None }, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf { param: None }, false)
    }

    // ---- element-wise ---------------------------------------------------

    fn broadcast(&self, a: Var, b: Var) -> Result<(Vec<usize>, Broadcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), Broadcast::Same));
        }
        let na = numel(sa);
        let nb = numel(sb);
        let suffix = |small: &[usize], big: &[usize]| {
            small.len() <= big.len() && big[big.len() - small.len()..] == *small
        };
        if nb == 1 || (nb <= na && suffix(sb, sa)) {
            Ok((sa.to_vec(), Broadcast::Right(nb)))
        } else if na == 1 || (na <= nb && suffix(sa, sb)) {
            Ok((sb.to_vec(), Broadcast::Left(na)))
        } else {
            Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                sa, sb
            )))
        }
    }

    /// Element-wise binary op. The smaller operand may be a scalar or match
    /// the trailing dimensions of the larger one.
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (shape, bcast) = self.broadcast(a, b)?;
        let n = numel(&shape);
        let va = self.value(a);
        let vb = self.value(b);
        let f = match kind {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let value = (0..n)
            .map(|i| {
                let (ia, ib) = bcast.index(i);
                f(va[ia], vb[ib])
            })
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Neg => |x| -x,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Square => |x| x * x,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu => |x| x.max(0.0),
            UnaryOp::Gelu => gelu,
        };
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(shape, value, Op::Unary { kind, a }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(shape, value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(shape, value, Op::AddScalar { a }, rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a (…×m×k) · b (k×n) → (…×m×n)`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} · {:?}", sa, sb)));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa[..sa.len() - 1]);
        let mut value = vec![0.0; rows * n];
        gemm(self.value(a), self.value(b), &mut value, rows, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::MatMul { a, b, rows, k, n }, rg))
    }

    /// `a (B×m×k) · b (B×k×n) → (B×m×n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batch_matmul {:?} · {:?}", sa, sb)));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut value = vec![0.0; batch * m * n];
        {
            let va = self.value(a);
            let vb = self.value(b);
            for i in 0..batch {
                gemm(
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    &mut value[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![batch, m, n],
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("transpose needs rank ≥ 2"));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let value = transpose_blocks(self.value(a), r, c);
        let mut shape = sa.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.needs(a);
        Ok(self.push(shape, value, Op::TransposeLast2 { a }, rg))
    }

    // ---- normalisation --------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} on {:?}", shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut value = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    value[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    value[idx(j)] /= total;
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            shape,
            value,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalise the last dimension to zero mean / unit (population) variance,
    /// then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = numel(&shape) / d.max(1);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                value[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.needs(a);
        self.push(Vec::new(), vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("mean axis {axis} on {:?}", shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    value[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let denom = len.max(1) as f64;
        value.iter_mut().for_each(|v| *v /= denom);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.needs(a);
        Ok(self.push(
            out_shape,
            value,
            Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.needs(a);
        Ok(self.push(shape, value, Op::Reshape { a }, rg))
    }

    /// Slice `[start, start+width)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + width > shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} [{start}, {}) on {:?}",
                start + width,
                shape
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut value = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            value.extend_from_slice(&x[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let rg = self.needs(a);
        Ok(self.push(
            out_shape,
            value,
            Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                width,
            },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on {:?}", base)));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    base, s
                )));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                value.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.needs(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Select rows (first-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("gather on scalar"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row index {bad} out of {rows}")));
        }
        let row_len = numel(&shape[1..]);
        let x = self.value(a);
        let mut value = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            value.extend_from_slice(&x[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.needs(a);
        Ok(self.push(
            out_shape,
            value,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
                row_len,
            },
            rg,
        ))
    }

    /// `out[b, …] = a[b, …] · s[b]` for a 1-d `s` matching the first axis.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = shape.first().copied().unwrap_or(0);
        if self.shape(s) != [rows] {
            return Err(Error::shape(format!(
                "scale_rows: {:?} by {:?}",
                shape,
                self.shape(s)
            )));
        }
        let row_len = numel(&shape[1..]);
        let x = self.value(a);
        let sv = self.value(s);
        let value = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / row_len.max(1)])
            .collect();
        let rg = self.needs(a) || self.needs(s);
        Ok(self.push(shape, value, Op::ScaleRows { a, s, row_len }, rg))
    }

    /// Set entries above the diagonal of the trailing `L×L` blocks to −∞.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape(format!("causal mask on {:?}", shape)));
        }
        let len = shape[r - 1];
        let mut value = self.value(a).to_vec();
        for (idx, v) in value.iter_mut().enumerate() {
            let col = idx % len;
            let row = (idx / len) % len;
            if col > row {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(shape, value, Op::CausalMask { a, len }, rg))
    }

    /// Row-wise cosine similarity of two `n×D` matrices, giving `n` values.
    /// Rows where either norm is below [`COSINE_NORM_FLOOR`] score 0 and pass
    /// no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || self.shape(b) != sa.as_slice() {
            return Err(Error::shape(format!(
                "cosine_rows {:?} vs {:?}",
                sa,
                self.shape(b)
            )));
        }
        let (n, dim) = (sa[0], sa[1]);
        let va = self.value(a);
        let vb = self.value(b);
        let mut norms = Vec::with_capacity(n);
        let mut value = Vec::with_capacity(n);
        for r in 0..n {
            let ra = &va[r * dim..(r + 1) * dim];
            let rb = &vb[r * dim..(r + 1) * dim];
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push((na, nb));
            if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                value.push(0.0);
            } else {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                value.push(dot / (na * nb));
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n], value, Op::CosineRows { a, b, dim, norms }, rg))
    }

    /// `(B, L, H·d) → (B·H, L, d)`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape(format!("split {heads} heads from {:?}", s)));
        }
        let (batch, len, width) = (s[0], s[1], s[2]);
        let head_dim = width / heads;
        let x = self.value(a);
        let mut value = vec![0.0; x.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let src = (b * len + l) * width + h * head_dim;
                    let dst = ((b * heads + h) * len + l) * head_dim;
                    value[dst..dst + head_dim].copy_from_slice(&x[src..src + head_dim]);
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            vec![batch * heads, len, head_dim],
            value,
            Op::SplitHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// `(B·H, L, d) → (B, L, H·d)`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape(format!("merge {heads} heads from {:?}", s)));
        }
        let (batch, len, head_dim) = (s[0] / heads, s[1], s[2]);
        let width = heads * head_dim;
        let x = self.value(a);
        let mut value = vec![0.0; x.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let dst = (b * len + l) * width + h * head_dim;
                    let src = ((b * heads + h) * len + l) * head_dim;
                    value[dst..dst + head_dim].copy_from_slice(&x[src..src + head_dim]);
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            vec![batch, len, width],
            value,
            Op::MergeHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.needs(v) {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    match out.by_tensor.get_mut(id) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(x, d)| *x += d),
                        None => {
                            out.by_tensor.insert(*id, g);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = bcast.index(i);
                    let (x, y) = (va[ia], vb[ib]);
                    let (da, db) = match kind {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                }
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let y = &node.value;
                let d: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        gi * match kind {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => 1.0 / x[i],
                            UnaryOp::Sqrt => 0.5 / y[i],
                            UnaryOp::Square => 2.0 * x[i],
                            UnaryOp::Tanh => 1.0 - y[i] * y[i],
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(x[i]),
                        }
                    })
                    .collect();
                self.send(grads, *a, d);
            }
            Op::Scale { a, c } => {
                self.send(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::AddScalar { a } => self.send(grads, *a, g),
            Op::MatMul { a, b, rows, k, n } => {
                if self.needs(*a) {
                    let mut ga = vec![0.0; rows * k];
                    gemm_nt(&g, self.value(*b), &mut ga, *rows, *n, *k);
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(*a), &g, &mut gb, *rows, *k, *n);
                    self.send(grads, *b, gb);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::TransposeLast2 { a } => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.send(grads, *a, transpose_blocks(&g, r, c));
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let dim = self.value(*gain).len();
                let gv = self.value(*gain);
                let rows = inv_std.len();
                let mut dgain = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let hr = &xhat[r * dim..(r + 1) * dim];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..dim {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dim as f64;
                    mean_dh_h /= dim as f64;
                    for j in 0..dim {
                        let dh = gr[j] * gv[j];
                        dx[r * dim + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.send(grads, *x, dx);
                self.send(grads, *gain, dgain);
                self.send(grads, *bias, dbias);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            } => {
                let mut d = vec![0.0; outer * len * inner];
                let denom = (*len).max(1) as f64;
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i] / denom;
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Reshape { a } => self.send(grads, *a, g),
            Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                width,
            } => {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                self.send(grads, *a, d);
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + w * inner]);
                        }
                        self.send(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows {
                a,
                indices,
                row_len,
            } => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g[k * row_len..(k + 1) * row_len];
                    for (x, s) in d[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                        *x += s;
                    }
                }
                self.send(grads, *a, d);
            }
            Op::ScaleRows { a, s, row_len } => {
                let x = self.value(*a);
                let sv = self.value(*s);
                let rl = (*row_len).max(1);
                if self.needs(*a) {
                    let da = g.iter().enumerate().map(|(i, gi)| gi * sv[i / rl]).collect();
                    self.send(grads, *a, da);
                }
                if self.needs(*s) {
                    let mut ds = vec![0.0; sv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        ds[i / rl] += gi * x[i];
                    }
                    self.send(grads, *s, ds);
                }
            }
            Op::CausalMask { a, len } => {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(idx, gi)| {
                        let col = idx % len;
                        let row = (idx / len) % len;
                        if col > row {
                            0.0
                        } else {
                            *gi
                        }
                    })
                    .collect();
                self.send(grads, *a, d);
            }
            Op::CosineRows { a, b, dim, norms } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let cos = node.value[r];
                    let ra = &va[r * dim..(r + 1) * dim];
                    let rb = &vb[r * dim..(r + 1) * dim];
                    for j in 0..*dim {
                        da[r * dim + j] = g[r] * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        db[r * dim + j] = g[r] * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::SplitHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let mut d = vec![0.0; g.len()];
                for b in 0..*batch {
                    for l in 0..*len {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * len + l) * head_dim;
                            let dst = (b * len + l) * width + h * head_dim;
                            d[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::MergeHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let mut d = vec![0.0; g.len()];
                for b in 0..*batch {
                    for l in 0..*len {
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * len + l) * head_dim;
                            let src = (b * len + l) * width + h * head_dim;
                            d[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                self.send(grads, *a, d);
            }
        }
    }
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::Right(n) => (i, i % n),
            Broadcast::Left(n) => (i % n, i),
        }
    }
}

fn transpose_blocks(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let block = r * c;
    let mut out = vec![0.0; x.len()];
    if block == 0 {
        return out;
    }
    for (bi, chunk) in x.chunks(block).enumerate() {
        let dst = &mut out[bi * block..(bi + 1) * block];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = chunk[i * c + j];
            }
        }
    }
    out
}
