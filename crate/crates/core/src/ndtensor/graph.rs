use super::gemm::{gemm, MatMut, MatRef};
use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: usize, probs: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumRows { x: Var },
    Square { x: Var },
    Abs { x: Var },
    ConcatRows { a: Var, b: Var },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Diag { x: Var },
    Select { mask: Vec<bool>, a: Var, b: Var },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is
/// therefore a topological order; backward walks it in reverse.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf check. Only the gradient-check harness
    /// turns this off.
    pub fn without_finite_check(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Numeric copy of `x` with no gradient edge back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), false)?;
        self.push("matmul", out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), true)?;
        self.push("matmul", out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    /// Adds a `[n]` vector to every row of an `[r, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, n) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![r, n], out)?;
        self.push("add_row", out, Op::AddRow { x, bias }, &[x, bias])
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x));
        self.push("gelu", out, Op::Gelu { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push("log_softmax", out, Op::LogSoftmax { x }, &[x])
    }

    /// Per-row normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q: [groups*nq, d]`, `k, v: [groups*nk, d]`; rows of group `g` attend
    /// only to keys of group `g`. Heads split the feature axis evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (rq, d) = self.dims2(q, "attention")?;
        let (rk, dk) = self.dims2(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if d != dk || heads == 0 || d % heads != 0 || groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let (nq, nk, dh) = (rq / groups, rk / groups, d / heads);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); groups * heads * nq * nk];
        let mut out = vec![T::zero(); rq * d];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * nq * nk;
                let p = &mut probs[p_off..p_off + nq * nk];
                gemm(
                    scale,
                    head_view(qd, g * nq, nq, h * dh, dh, d),
                    head_view(kd, g * nk, nk, h * dh, dh, d).t(),
                    T::zero(),
                    MatMut::dense(p, nq, nk),
                );
                for row in p.chunks_exact_mut(nk) {
                    kernels::softmax_row(row);
                }
                gemm(
                    T::one(),
                    MatRef::dense(p, nq, nk),
                    head_view(vd, g * nk, nk, h * dh, dh, d),
                    T::zero(),
                    MatMut {
                        data: &mut out,
                        offset: g * nq * d + h * dh,
                        rows: nq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        let out = Tensor::new(vec![rq, d], out)?;
        self.push("attention", out, Op::Attention { q, k, v, heads, groups, probs }, &[q, k, v])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_exact_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(Error::DegenerateVector { op: "normalize_rows" });
            }
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.numel().max(1) as f64));
        self.push("mean", out, Op::MeanAll { x }, &[x])
    }

    /// Reduces the last axis of a matrix: `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "sum_rows")?;
        let data = self.value(x).data().chunks_exact(c.max(1)).map(|row| row.iter().copied().sum()).collect();
        let out = Tensor::new(vec![r], data)?;
        self.push("sum_rows", out, Op::SumRows { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs { x }, &[x])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ra + rb, ca], data)?;
        self.push("concat_rows", out, Op::ConcatRows { a, b }, &[a, b])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(vec![end - start, c], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "diag")?;
        if r != c {
            return Err(Error::shape("diag", self.shape(x), &[r, r]));
        }
        let src = self.value(x).data();
        let out = Tensor::new(vec![r], (0..r).map(|i| src[i * c + i]).collect())?;
        self.push("diag", out, Op::Diag { x }, &[x])
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "select")?;
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("select", self.shape(a), &[mask.len()]));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let data = mask.iter().enumerate().map(|(i, &m)| if m { ta[i] } else { tb[i] }).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("select", out, Op::Select { mask, a, b }, &[a, b])
    }
}

/// Column block `[col, col+width)` of rows `[row, row+rows)` in a row-major
/// matrix with `stride` columns.
pub(crate) fn head_view<T>(data: &[T], row: usize, rows: usize, col: usize, width: usize, stride: usize) -> MatRef<'_, T> {
    MatRef {
        data,
        offset: row * stride + col,
        rows,
        cols: width,
        rs: stride,
        cs: 1,
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
    pub(crate) shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root with respect to `v`; zeros when `v` is not
    /// reachable from the root.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
