//! Differentiable tensor operations.
//!
//! Every op computes its forward result eagerly and, when any input is a
//! tracked leaf or derives from one, pushes a backward closure onto the
//! thread-local tape. Closures only read finished buffers and accumulate
//! into gradient slots, so they never touch the tape themselves.

use super::{Scalar, Tensor, TensorError};

// Raw kernels, shared with the optimizer and benchmarks. The ikj loop order
// keeps the inner loop contiguous in both operands so it autovectorizes.

/// out[m,n] += a[m,k] . b[k,n]
pub(crate) fn matmul_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] . transpose(b) where b is [k,n]
fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let dot: S = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            out[i * k + l] += dot;
        }
    }
}

/// out[k,n] += transpose(a) . b where a is [m,k], b is [m,n]
fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// Debug-mode finiteness gate: a finite-input op must not produce NaN/Inf.
/// Inputs that are already non-finite propagate, so error states injected
/// upstream still surface at the loss check instead of here.
#[cfg(debug_assertions)]
fn check_finite<S: Scalar>(op: &'static str, out: &[S], inputs: &[&[S]]) {
    if out.iter().all(|v| v.is_finite()) {
        return;
    }
    let inputs_finite = inputs.iter().all(|x| x.iter().all(|v| v.is_finite()));
    assert!(!inputs_finite, "{op}: non-finite output from finite inputs");
}

#[cfg(not(debug_assertions))]
fn check_finite<S: Scalar>(_op: &'static str, _out: &[S], _inputs: &[&[S]]) {}

fn push_backward<S: Scalar>(f: impl FnOnce() + 'static) {
    S::with_tape(|t| t.push(Box::new(f)));
}

/// Elementwise unary op with local derivative `dfdx(x_i, y_i)`.
fn unary<S, F, D>(x: &Tensor<S>, op: &'static str, f: F, dfdx: D) -> Tensor<S>
where
    S: Scalar,
    F: Fn(S) -> S,
    D: Fn(S, S) -> S + 'static,
{
    let data: Vec<S> = x.data().iter().map(|&v| f(v)).collect();
    check_finite(op, &data, &[x.data()]);
    let track = x.tracked();
    let out = Tensor::new_internal(x.shape().to_vec(), data, track);
    if track {
        let x = x.clone();
        let o = out.clone();
        push_backward::<S>(move || {
            let Some(g) = o.grad() else { return };
            let delta: Vec<S> = x
                .data()
                .iter()
                .zip(o.data())
                .zip(&g)
                .map(|((&xv, &yv), &gv)| gv * dfdx(xv, yv))
                .collect();
            x.accumulate_grad(&delta);
        });
    }
    out
}

/// Elementwise binary op over equal shapes; `da`/`db` map
/// `(a_i, b_i, g_i)` to each side's gradient contribution.
fn binary<S, F, DA, DB>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &'static str,
    f: F,
    da: DA,
    db: DB,
) -> Result<Tensor<S>, TensorError>
where
    S: Scalar,
    F: Fn(S, S) -> S,
    DA: Fn(S, S, S) -> S + 'static,
    DB: Fn(S, S, S) -> S + 'static,
{
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&av, &bv)| f(av, bv))
        .collect();
    check_finite(op, &data, &[a.data(), b.data()]);
    let track = a.tracked() || b.tracked();
    let out = Tensor::new_internal(a.shape().to_vec(), data, track);
    if track {
        let a = a.clone();
        let b = b.clone();
        let o = out.clone();
        push_backward::<S>(move || {
            let Some(g) = o.grad() else { return };
            if a.requires_grad() {
                let delta: Vec<S> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .zip(&g)
                    .map(|((&av, &bv), &gv)| da(av, bv, gv))
                    .collect();
                a.accumulate_grad(&delta);
            }
            if b.requires_grad() {
                let delta: Vec<S> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .zip(&g)
                    .map(|((&av, &bv), &gv)| db(av, bv, gv))
                    .collect();
                b.accumulate_grad(&delta);
            }
        });
    }
    Ok(out)
}

/// Splits `shape` at `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tensor<S> {
    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mismatch = || TensorError::DimensionMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (self.shape(), rhs.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut data = vec![S::ZERO; m * n];
        matmul_acc(self.data(), rhs.data(), m, k, n, &mut data);
        check_finite("matmul", &data, &[self.data(), rhs.data()]);
        let track = self.tracked() || rhs.tracked();
        let out = Tensor::new_internal(vec![m, n], data, track);
        if track {
            let a = self.clone();
            let b = rhs.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    let mut da = vec![S::ZERO; m * k];
                    matmul_nt_acc(&g, b.data(), m, n, k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![S::ZERO; k * n];
                    matmul_tn_acc(a.data(), &g, m, k, n, &mut db);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        binary(self, rhs, "add", |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        binary(self, rhs, "sub", |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        binary(self, rhs, "mul", |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        unary(self, "add_scalar", |x| x + c, |_, _| S::ONE)
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        unary(self, "mul_scalar", |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.mul_scalar(-S::ONE)
    }

    pub fn relu(&self) -> Tensor<S> {
        unary(
            self,
            "relu",
            |x| x.max_v(S::ZERO),
            |x, _| if x > S::ZERO { S::ONE } else { S::ZERO },
        )
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&self) -> Tensor<S> {
        unary(
            self,
            "sigmoid",
            |x| {
                if x >= S::ZERO {
                    S::ONE / (S::ONE + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::ONE + e)
                }
            },
            |_, y| y * (S::ONE - y),
        )
    }

    /// Natural logarithm. Non-positive inputs are a caller bug; the debug
    /// finiteness gate traps them.
    pub fn ln(&self) -> Tensor<S> {
        unary(self, "ln", |x| x.ln(), |x, _| S::ONE / x)
    }

    pub fn exp(&self) -> Tensor<S> {
        unary(self, "exp", |x| x.exp(), |_, y| y)
    }

    /// Elementwise `x^e`. Gradient is `e * x^(e-1)`, taken as 0 when `e` is 0.
    pub fn powf(&self, e: S) -> Tensor<S> {
        unary(
            self,
            "powf",
            move |x| x.powf(e),
            move |x, _| {
                if e == S::ZERO {
                    S::ZERO
                } else {
                    e * x.powf(e - S::ONE)
                }
            },
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        unary(
            self,
            "clamp",
            move |x| x.max_v(lo).min_v(hi),
            move |x, _| {
                if x > lo && x < hi {
                    S::ONE
                } else {
                    S::ZERO
                }
            },
        )
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<S>, TensorError> {
        let &[m, n] = self.shape() else {
            return Err(TensorError::DimensionMismatch {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        };
        let x = self.data();
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let track = self.tracked();
        let out = Tensor::new_internal(vec![n, m], data, track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let mut da = vec![S::ZERO; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::DimensionMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let track = self.tracked();
        let out = Tensor::new_internal(shape.to_vec(), self.data().to_vec(), track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                a.accumulate_grad(&g);
            });
        }
        Ok(out)
    }

    /// Concatenates tensors along `axis`; all other extents must match.
    pub fn concat(axis: usize, parts: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::EmptyInput { op: "concat" });
        };
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        for p in &parts[1..] {
            let compatible = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(TensorError::DimensionMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total_extent: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total_extent;
        let mut data = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let track = parts.iter().any(|p| p.tracked());
        let out = Tensor::new_internal(shape, data, track);
        if track {
            let parts: Vec<Tensor<S>> = parts.iter().map(|&p| p.clone()).collect();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let out_block = total_extent * inner;
                let mut offset = 0;
                for p in &parts {
                    let block = p.shape()[axis] * inner;
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(outer * block);
                        for o_idx in 0..outer {
                            let start = o_idx * out_block + offset;
                            dp.extend_from_slice(&g[start..start + block]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += block;
                }
            });
        }
        Ok(out)
    }

    /// Copies the `start..end` range of `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let extent = self.shape()[axis];
        if start >= end || end > extent {
            return Err(TensorError::InvalidRange {
                op: "slice",
                start,
                end,
                extent,
            });
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let width = end - start;
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        let src_block = extent * inner;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&self.data()[base..base + width * inner]);
        }
        let track = self.tracked();
        let out = Tensor::new_internal(shape, data, track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let mut da = vec![S::ZERO; outer * src_block];
                let dst_block = width * inner;
                for o_idx in 0..outer {
                    let base = o_idx * src_block + start * inner;
                    da[base..base + dst_block]
                        .copy_from_slice(&g[o_idx * dst_block..(o_idx + 1) * dst_block]);
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let track = self.tracked();
        let out = Tensor::new_internal(Vec::new(), vec![total], track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                a.accumulate_grad(&vec![g[0]; a.numel()]);
            });
        }
        out
    }

    /// Arithmetic mean of all elements as a rank-0 tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        let total: S = self.data().iter().copied().sum();
        let track = self.tracked();
        let out = Tensor::new_internal(Vec::new(), vec![total / n], track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                a.accumulate_grad(&vec![g[0] / n; a.numel()]);
            });
        }
        out
    }

    /// Sums out one axis; the result drops that axis from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>, TensorError> {
        if axis >= self.shape().len() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                let src = &self.data()[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let track = self.tracked();
        let out = Tensor::new_internal(shape, data, track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let mut da = vec![S::ZERO; outer * extent * inner];
                for o_idx in 0..outer {
                    for j in 0..extent {
                        let dst = &mut da[(o_idx * extent + j) * inner..(o_idx * extent + j + 1) * inner];
                        dst.copy_from_slice(&g[o_idx * inner..(o_idx + 1) * inner]);
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_rowwise(&self, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (&[n, d], &[bd]) = (self.shape(), bias.shape()) else {
            return Err(TensorError::DimensionMismatch {
                op: "add_rowwise",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        };
        if d != bd {
            return Err(TensorError::DimensionMismatch {
                op: "add_rowwise",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        check_finite("add_rowwise", &data, &[self.data(), bias.data()]);
        let track = self.tracked() || bias.tracked();
        let out = Tensor::new_internal(vec![n, d], data, track);
        if track {
            let a = self.clone();
            let b = bias.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let mut db = vec![S::ZERO; d];
                    for row in g.chunks(d) {
                        for (dbj, &gj) in db.iter_mut().zip(row) {
                            *dbj += gj;
                        }
                    }
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>, TensorError> {
        if axis >= self.shape().len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![S::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * extent + j) * inner + i;
                let mut m = x[idx(0)];
                for j in 1..extent {
                    m = m.max_v(x[idx(j)]);
                }
                let mut denom = S::ZERO;
                for j in 0..extent {
                    let e = (x[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    denom += e;
                }
                for j in 0..extent {
                    data[idx(j)] = data[idx(j)] / denom;
                }
            }
        }
        check_finite("softmax", &data, &[x]);
        let track = self.tracked();
        let out = Tensor::new_internal(self.shape().to_vec(), data, track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let y = o.data();
                let mut da = vec![S::ZERO; y.len()];
                for o_idx in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o_idx * extent + j) * inner + i;
                        let mut dot = S::ZERO;
                        for j in 0..extent {
                            dot += g[idx(j)] * y[idx(j)];
                        }
                        for j in 0..extent {
                            da[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance
    /// (population variance plus `eps`), then applies `gain` and `bias`.
    pub fn layer_norm(
        &self,
        gain: &Tensor<S>,
        bias: &Tensor<S>,
        eps: S,
    ) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let d = self.shape()[rank - 1];
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: if gain.shape() != [d] {
                    gain.shape().to_vec()
                } else {
                    bias.shape().to_vec()
                },
            });
        }
        let rows = self.numel() / d;
        let dn = S::from_f64(d as f64);
        let x = self.data();
        let mut xhat = vec![S::ZERO; x.len()];
        let mut invstd = vec![S::ZERO; rows];
        let mut data = vec![S::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean: S = row.iter().copied().sum::<S>() / dn;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let istd = S::ONE / (var + eps).sqrt();
            invstd[r] = istd;
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[r * d + j] = xh;
                data[r * d + j] = gain.data()[j] * xh + bias.data()[j];
            }
        }
        check_finite("layer_norm", &data, &[x, gain.data(), bias.data()]);
        let track = self.tracked() || gain.tracked() || bias.tracked();
        let out = Tensor::new_internal(self.shape().to_vec(), data, track);
        if track {
            let a = self.clone();
            let gn = gain.clone();
            let bs = bias.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                if gn.requires_grad() {
                    let mut dg = vec![S::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gn.accumulate_grad(&dg);
                }
                if bs.requires_grad() {
                    let mut db = vec![S::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    bs.accumulate_grad(&db);
                }
                if a.requires_grad() {
                    let mut da = vec![S::ZERO; rows * d];
                    for r in 0..rows {
                        let mut mean_dxhat = S::ZERO;
                        let mut mean_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gn.data()[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gn.data()[j];
                            da[r * d + j] =
                                invstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            });
        }
        Ok(out)
    }

    /// Unfolds a [h, w, c] image into rows of kh*kw*c patch values, one row
    /// per output location, scanning (dy, dx, channel) within the patch.
    /// Out-of-bounds taps under zero padding contribute zeros. This is the
    /// matmul-ready form of a strided convolution input.
    pub fn extract_patches(
        &self,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let &[h, w, c] = self.shape() else {
            return Err(TensorError::DimensionMismatch {
                op: "extract_patches",
                lhs: self.shape().to_vec(),
                rhs: vec![kh, kw],
            });
        };
        assert!(kh > 0 && kw > 0 && stride > 0, "extract_patches: degenerate geometry");
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::DimensionMismatch {
                op: "extract_patches",
                lhs: vec![h, w, c],
                rhs: vec![kh, kw],
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let cols = kh * kw * c;
        let x = self.data();
        let mut data = vec![S::ZERO; oh * ow * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * cols;
                for dy in 0..kh {
                    let sy = oy * stride + dy;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for dx in 0..kw {
                        let sx = ox * stride + dx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        let sx = sx - pad;
                        let dst = row + (dy * kw + dx) * c;
                        let src = (sy * w + sx) * c;
                        data[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        let track = self.tracked();
        let out = Tensor::new_internal(vec![oh * ow, cols], data, track);
        if track {
            let a = self.clone();
            let o = out.clone();
            push_backward::<S>(move || {
                let Some(g) = o.grad() else { return };
                let mut da = vec![S::ZERO; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = (oy * ow + ox) * cols;
                        for dy in 0..kh {
                            let sy = oy * stride + dy;
                            if sy < pad || sy >= h + pad {
                                continue;
                            }
                            let sy = sy - pad;
                            for dx in 0..kw {
                                let sx = ox * stride + dx;
                                if sx < pad || sx >= w + pad {
                                    continue;
                                }
                                let sx = sx - pad;
                                let src = row + (dy * kw + dx) * c;
                                let dst = (sy * w + sx) * c;
                                for ch in 0..c {
                                    da[dst + ch] += g[src + ch];
                                }
                            }
                        }
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::no_grad;
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let m = t2([2, 2], &[3.0, -1.0, 2.5, 7.0]);
        let eye = t2([2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
        assert_eq!(m.matmul(&eye).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_hand_product() {
        let a = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t2([2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extents() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "got: {msg}");
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        let a = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]).trainable();
        let b = t2([2, 2], &[1.0, 0.0, 0.0, 1.0]).trainable();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        // dA = G . B^T with G all ones; dB = A^T . G.
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_is_deterministic() {
        let a = t2([2, 3], &[0.1, -0.2, 0.3, 0.7, 1.1, -0.5]);
        let b = t2([3, 2], &[1.0, 2.0, -0.3, 0.4, 0.9, -1.7]);
        let r1 = a.matmul(&b).unwrap();
        let r2 = a.matmul(&b).unwrap();
        let bits =
            |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r1), bits(&r2));
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        let y = t2([1, 3], &[0.0, 0.0, 0.0]).softmax(1).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let y = t2([1, 2], &[0.0, 2.0f64.ln()]).softmax(1).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = t2([1, 4], &[0.3, -1.2, 2.0, 0.0]);
        let shifted = x.add_scalar(0.37);
        let a = x.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_unit_interval() {
        let x = t2([2, 3], &[5.0, -3.0, 0.5, 100.0, 100.0, -100.0]);
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t2([2, 2], &[0.0, 1.0, 0.0, 3.0]);
        let y = x.softmax(0).unwrap();
        // Columns normalize independently.
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 0.5).abs() < 1e-12);
        let c1 = 1.0 / (1.0 + (2.0f64).exp());
        assert!((y.data()[1] - c1).abs() < 1e-12);
        assert!((y.data()[3] - (1.0 - c1)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t2([1, 2], &[1.0, 3.0]);
        let gain = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let y = x.layer_norm(&gain, &bias, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let x = t2([1, 3], &[7.0, 7.0, 7.0]);
        let gain = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.25; 3]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_rows_have_zero_mean() {
        let x = t2([3, 4], &[0.3, -1.0, 2.2, 5.0, -0.7, 0.0, 0.1, 9.0, 1.0, 2.0, 3.0, 4.0]);
        let gain = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-9).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![0.5; 6]).unwrap().trainable();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().trainable();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let x = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap().trainable();
        x.add(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap().trainable();
        let y = x.relu();
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap().trainable();
        let y = x.sigmoid();
        assert_eq!(y.data(), &[0.5]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn sigmoid_is_stable_at_large_magnitudes() {
        let x = Tensor::from_vec(&[2], vec![500.0f64, -500.0]).unwrap();
        let y = x.sigmoid();
        assert!(y.data()[0] > 0.999_999 && y.data()[0] <= 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-6);
    }

    #[test]
    fn ln_and_exp_invert() {
        let x = Tensor::from_vec(&[1], vec![std::f64::consts::E]).unwrap().trainable();
        let y = x.ln();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        y.sum_all().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 1.0 / std::f64::consts::E).abs() < 1e-12);
        let z = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        assert!((z.ln().exp().data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_gradient_is_strict_interior() {
        let x = Tensor::from_vec(&[3], vec![-0.5, 0.5, 1.0]).unwrap().trainable();
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn powf_values_and_gradients() {
        let x = Tensor::from_vec(&[1], vec![4.0]).unwrap().trainable();
        let y = x.powf(0.5);
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
        y.sum_all().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);

        let z = Tensor::from_vec(&[1], vec![3.0]).unwrap().trainable();
        let w = z.powf(0.0);
        assert_eq!(w.data(), &[1.0]);
        w.sum_all().backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn transpose_roundtrip_and_gradient() {
        let x = t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).trainable();
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose().unwrap().data(), x.data());
        let w = t2([3, 2], &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        y.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reshape_checks_element_count() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(x.reshape(&[3, 2]).is_ok());
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn reshape_routes_gradient_flat() {
        let x = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]).trainable();
        let y = x.reshape(&[4]).unwrap();
        let mask = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        y.mul(&mask).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_along_both_axes() {
        let a = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t2([2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let rows = Tensor::concat(0, &[&a, &b]).unwrap();
        assert_eq!(rows.shape(), &[4, 2]);
        assert_eq!(rows.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(rows.slice(0, 2, 4).unwrap().data(), b.data());

        let cols = Tensor::concat(1, &[&a, &b]).unwrap();
        assert_eq!(cols.shape(), &[2, 4]);
        assert_eq!(cols.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(cols.slice(1, 2, 4).unwrap().data(), b.data());
    }

    #[test]
    fn concat_rejects_mismatched_off_axis_extents() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(Tensor::concat(0, &[&a, &b]).is_err());
        assert!(Tensor::concat(1, &[&a, &b]).is_ok());
        assert!(Tensor::<f32>::concat(0, &[]).is_err());
    }

    #[test]
    fn concat_routes_gradients_to_each_part() {
        let a = t2([1, 2], &[1.0, 2.0]).trainable();
        let b = t2([1, 2], &[3.0, 4.0]).trainable();
        let y = Tensor::concat(1, &[&a, &b]).unwrap();
        let mask = t2([1, 4], &[1.0, 10.0, 100.0, 1000.0]);
        y.mul(&mask).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 10.0]);
        assert_eq!(b.grad().unwrap(), vec![100.0, 1000.0]);
    }

    #[test]
    fn slice_scatter_gradient() {
        let x = t2([1, 4], &[1.0, 2.0, 3.0, 4.0]).trainable();
        x.slice(1, 1, 3).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert!(x.slice(1, 3, 3).is_err());
        assert!(x.slice(1, 0, 5).is_err());
        assert!(x.slice(2, 0, 1).is_err());
    }

    #[test]
    fn sum_axis_hand_values_and_gradient() {
        let x = t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).trainable();
        let rows = x.sum_axis(1).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = x.sum_axis(0).unwrap();
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
        let mask = Tensor::from_vec(&[2], vec![1.0, 10.0]).unwrap();
        rows.mul(&mask).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn mean_all_gradient_is_uniform() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap().trainable();
        let m = x.mean_all();
        assert_eq!(m.item(), 2.5);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn add_rowwise_values_and_bias_gradient() {
        let x = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]).trainable();
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap().trainable();
        let y = x.add_rowwise(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
        assert!(x.add_rowwise(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn extract_patches_unit_kernel_is_pixel_list() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = x.extract_patches(1, 1, 1, 0).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn extract_patches_full_kernel_flattens_in_scan_order() {
        let x = Tensor::from_vec(&[2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let p = x.extract_patches(2, 2, 1, 0).unwrap();
        assert_eq!(p.shape(), &[1, 8]);
        // (dy, dx, channel) scan order matches the row-major input here.
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn extract_patches_zero_pads_the_border() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let p = x.extract_patches(3, 3, 1, 1).unwrap();
        assert_eq!(p.shape(), &[1, 9]);
        let expect = [0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(p.data(), &expect);
    }

    #[test]
    fn extract_patches_gradient_counts_tap_multiplicity() {
        let x = Tensor::from_vec(&[3, 3, 1], vec![1.0; 9]).unwrap().trainable();
        // 3x3 kernel, stride 1, pad 1: the center pixel is read by all 9 patches.
        let p = x.extract_patches(3, 3, 1, 1).unwrap();
        p.sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[4], 9.0);
        assert_eq!(g[0], 4.0);
        assert_eq!(g[1], 6.0);
    }

    #[test]
    fn no_grad_suppresses_taping() {
        super::super::tape::with_tape_f64(|t| t.clear());
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().trainable();
        let y = no_grad(|| x.mul(&x).unwrap().sum_all());
        assert!(!y.requires_grad());
        assert!(super::super::tape::with_tape_f64(|t| t.is_empty()));
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn untracked_inputs_do_not_tape() {
        super::super::tape::with_tape_f32(|t| t.clear());
        let x = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let _ = x.mul(&x).unwrap().sum_all();
        assert!(super::super::tape::with_tape_f32(|t| t.is_empty()));
    }

    #[test]
    fn unused_branch_receives_no_gradient() {
        let x = Tensor::from_vec(&[1], vec![2.0]).unwrap().trainable();
        let y = Tensor::from_vec(&[1], vec![3.0]).unwrap().trainable();
        let _orphan = y.mul_scalar(5.0);
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert_eq!(y.grad(), None);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "non-finite output from finite inputs")]
    fn finite_inputs_must_not_produce_nan() {
        let x = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let _ = x.ln();
    }

    #[test]
    fn nonfinite_inputs_propagate_for_loss_side_detection() {
        let x = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let y = x.add_scalar(1.0);
        assert!(y.data()[0].is_nan());
    }
}
