//! Untracked forward kernels shared by the tape and by evaluation code.

use super::gemm::{gemm, MatMut, MatRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// `a * b` or, with `trans_b`, `a * b^T`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let bref = MatRef::dense(b.data(), br, bc);
    gemm(
        T::one(),
        MatRef::dense(a.data(), m, k),
        if trans_b { bref.t() } else { bref },
        T::zero(),
        MatMut::dense(&mut out, m, n),
    );
    Tensor::new(vec![m, n], out)
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", x.shape(), &[axis]));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place softmax over a contiguous row.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 * pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact GELU, `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
