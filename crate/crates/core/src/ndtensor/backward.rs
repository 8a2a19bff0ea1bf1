use super::gemm::{gemm, MatMut, MatRef};
use super::graph::{head_view, Gradients, Graph, Op, Var};
use super::kernels::{self, axis_split};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Accumulates `src` into the gradient slot of `v`, allocating on first use.
fn acc<'a, T: Element>(slots: &'a mut [Option<Vec<T>>], len: usize, v: Var) -> &'a mut Vec<T> {
    slots[v.index()].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Element> Graph<T> {
    /// Gradients of the scalar `root` with respect to every node.
    ///
    /// Nodes are visited in strict reverse insertion order. Leaves that the
    /// root does not depend on report zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<T>>> = vec![None; n];
        slots[root.index()] = Some(vec![T::one()]);

        for i in (0..=root.index()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots)?;
            slots[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = slots
            .into_iter()
            .zip(self.nodes.iter())
            .map(|(slot, node)| slot.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.index()].value.numel()
    }

    fn propagate(&self, i: usize, g: &[T], slots: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = ta.dims2("matmul")?;
                let (br, bc) = tb.dims2("matmul")?;
                let n = if trans_b { br } else { bc };
                let gm = MatRef::dense(g, m, n);
                let bref = MatRef::dense(tb.data(), br, bc);
                if self.wants(a) {
                    // dA = G B^T  (or G B when b was used transposed)
                    let da = acc(slots, m * k, a);
                    let rhs = if trans_b { bref } else { bref.t() };
                    gemm(T::one(), gm, rhs, T::one(), MatMut::dense(da, m, k));
                }
                if self.wants(b) {
                    let aref = MatRef::dense(ta.data(), m, k);
                    let db = acc(slots, br * bc, b);
                    if trans_b {
                        // dB = G^T A : [n, k]
                        gemm(T::one(), gm.t(), aref, T::one(), MatMut::dense(db, br, bc));
                    } else {
                        // dB = A^T G : [k, n]
                        gemm(T::one(), aref.t(), gm, T::one(), MatMut::dense(db, br, bc));
                    }
                }
            }
            &Op::Add { a, b } => {
                for (v, sign) in [(a, T::one()), (b, T::one())] {
                    if self.wants(v) {
                        let d = acc(slots, g.len(), v);
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (v, sign) in [(a, T::one()), (b, -T::one())] {
                    if self.wants(v) {
                        let d = acc(slots, g.len(), v);
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let d = acc(slots, g.len(), a);
                    for j in 0..g.len() {
                        d[j] += g[j] * vb[j];
                    }
                }
                if self.wants(b) {
                    let d = acc(slots, g.len(), b);
                    for j in 0..g.len() {
                        d[j] += g[j] * va[j];
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if self.wants(x) {
                    let d = acc(slots, g.len(), x);
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if self.wants(bias) {
                    let n = self.numel(bias);
                    let d = acc(slots, n, bias);
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            &Op::Scale { x, c } => {
                let d = acc(slots, g.len(), x);
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv);
            }
            &Op::AddScalar { x } => {
                let d = acc(slots, g.len(), x);
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let d = acc(slots, g.len(), x);
                for j in 0..g.len() {
                    d[j] += g[j] * kernels::gelu_grad_scalar(xv[j]);
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let d = acc(slots, g.len(), x);
                for o in 0..outer {
                    for s in 0..inner {
                        let base = o * n * inner + s;
                        let dot: T = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            d[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x } => {
                let c = *node.value.shape().last().expect("rank 2");
                let d = acc(slots, g.len(), x);
                for (r, (grow, yrow)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                    let total: T = grow.iter().copied().sum();
                    for j in 0..c {
                        d[r * c + j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.numel(*gamma);
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let d = acc(slots, c, *gamma);
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let d = acc(slots, c, *beta);
                    for grow in g.chunks_exact(c) {
                        d.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                    }
                }
                if self.wants(*x) {
                    let nf = T::lit(c as f64);
                    let d = acc(slots, g.len(), *x);
                    let mut dh = vec![T::zero(); c];
                    for (r, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            dh[j] = grow[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for j in 0..c {
                            d[r * c + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *groups, probs, slots)?;
            }
            Op::NormalizeRows { x, norms } => {
                let c = *node.value.shape().last().expect("rank 2");
                let d = acc(slots, g.len(), *x);
                for (r, (grow, yrow)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    let inv = T::one() / norms[r];
                    for j in 0..c {
                        d[r * c + j] += (grow[j] - yrow[j] * dot) * inv;
                    }
                }
            }
            &Op::SumAll { x } => {
                let n = self.numel(x);
                let d = acc(slots, n, x);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::MeanAll { x } => {
                let n = self.numel(x);
                let share = g[0] / T::lit(n.max(1) as f64);
                let d = acc(slots, n, x);
                d.iter_mut().for_each(|d| *d += share);
            }
            &Op::SumRows { x } => {
                let n = self.numel(x);
                let c = n / g.len().max(1);
                let d = acc(slots, n, x);
                for (r, drow) in d.chunks_exact_mut(c.max(1)).enumerate() {
                    drow.iter_mut().for_each(|d| *d += g[r]);
                }
            }
            &Op::Square { x } => {
                let xv = self.value(x).data();
                let d = acc(slots, g.len(), x);
                for j in 0..g.len() {
                    d[j] += T::lit(2.0) * xv[j] * g[j];
                }
            }
            &Op::Abs { x } => {
                let xv = self.value(x).data();
                let d = acc(slots, g.len(), x);
                for j in 0..g.len() {
                    let s = if xv[j] > T::zero() {
                        T::one()
                    } else if xv[j] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d[j] += s * g[j];
                }
            }
            &Op::ConcatRows { a, b } => {
                let na = self.numel(a);
                if self.wants(a) {
                    let d = acc(slots, na, a);
                    d.iter_mut().zip(&g[..na]).for_each(|(d, &gv)| *d += gv);
                }
                if self.wants(b) {
                    let d = acc(slots, g.len() - na, b);
                    d.iter_mut().zip(&g[na..]).for_each(|(d, &gv)| *d += gv);
                }
            }
            &Op::SliceRows { x, start } => {
                let n = self.numel(x);
                let c = *node.value.shape().last().expect("rank 2");
                let d = acc(slots, n, x);
                d[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            Op::GatherRows { x, idx } => {
                let n = self.numel(*x);
                let c = *node.value.shape().last().expect("rank 2");
                let d = acc(slots, n, *x);
                for (r, &src) in idx.iter().enumerate() {
                    d[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
            &Op::Diag { x } => {
                let r = g.len();
                let d = acc(slots, r * r, x);
                for j in 0..r {
                    d[j * r + j] += g[j];
                }
            }
            Op::Select { mask, a, b } => {
                if self.wants(*a) {
                    let d = acc(slots, g.len(), *a);
                    for j in 0..g.len() {
                        if mask[j] {
                            d[j] += g[j];
                        }
                    }
                }
                if self.wants(*b) {
                    let d = acc(slots, g.len(), *b);
                    for j in 0..g.len() {
                        if !mask[j] {
                            d[j] += g[j];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: &[T],
        slots: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (rq, d) = self.value(q).dims2("attention")?;
        let (rk, _) = self.value(k).dims2("attention")?;
        let (nq, nk, dh) = (rq / groups, rk / groups, d / heads);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rq * d];
        let mut dk = vec![T::zero(); rk * d];
        let mut dv = vec![T::zero(); rk * d];
        let mut dp = vec![T::zero(); nq * nk];
        for grp in 0..groups {
            for h in 0..heads {
                let p_off = (grp * heads + h) * nq * nk;
                let p = &probs[p_off..p_off + nq * nk];
                let go = head_view(g, grp * nq, nq, h * dh, dh, d);
                // dV = P^T dO
                gemm(
                    T::one(),
                    MatRef::dense(p, nq, nk).t(),
                    go,
                    T::zero(),
                    head_mut(&mut dv, grp * nk, nk, h * dh, dh, d),
                );
                // dP = dO V^T
                gemm(
                    T::one(),
                    go,
                    head_view(vd, grp * nk, nk, h * dh, dh, d).t(),
                    T::zero(),
                    MatMut::dense(&mut dp, nq, nk),
                );
                // dS = P * (dP - rowsum(dP * P)), scaled by the logit scale
                for (prow, drow) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ = dS K ; dK = dS^T Q
                gemm(
                    T::one(),
                    MatRef::dense(&dp, nq, nk),
                    head_view(kd, grp * nk, nk, h * dh, dh, d),
                    T::zero(),
                    head_mut(&mut dq, grp * nq, nq, h * dh, dh, d),
                );
                gemm(
                    T::one(),
                    MatRef::dense(&dp, nq, nk).t(),
                    head_view(qd, grp * nq, nq, h * dh, dh, d),
                    T::zero(),
                    head_mut(&mut dk, grp * nk, nk, h * dh, dh, d),
                );
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                let slot = acc(slots, local.len(), var);
                slot.iter_mut().zip(&local).for_each(|(d, &x)| *d += x);
            }
        }
        Ok(())
    }
}

fn head_mut<T>(data: &mut [T], row: usize, rows: usize, col: usize, width: usize, stride: usize) -> MatMut<'_, T> {
    MatMut {
        data,
        offset: row * stride + col,
        rows,
        cols: width,
        rs: stride,
        cs: 1,
    }
}
