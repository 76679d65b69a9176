//! Differentiable primitives over [`Tensor`].
//!
//! Each op validates shapes, computes the forward value eagerly, and attaches
//! a closure that pushes the upstream gradient into its parents. The set is
//! exactly what a small decoder-only transformer consumes.

use crate::error::{NumericError, Result};
use crate::kernels;
use crate::tensor::Tensor;

fn shape_err(context: &'static str, expected: &[usize], got: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        context,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// (outer, dim, inner) factorization of `shape` around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_cols(shape: &[usize], context: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(shape_err(context, &[0, 0], shape));
    }
    Ok((shape[0], shape[1]))
}

// ── Elementwise and broadcast arithmetic ──────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, _own| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g);
            }
        })),
    ))
}

/// x[r,c] + b[c] broadcast over rows.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "add_bias input")?;
    if bias.shape() != [c] {
        return Err(shape_err("add_bias bias", &[c], bias.shape()));
    }
    let mut data = x.to_vec();
    {
        let bd = bias.data();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bd.iter()) {
                *v += b;
            }
        }
    }
    let (px, pb) = (x.clone(), bias.clone());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone(), bias.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                px.accumulate_grad(g);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

pub fn scale(x: &Tensor, s: f64) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| v * s).collect();
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let dg: Vec<f64> = g.iter().map(|v| v * s).collect();
                px.accumulate_grad(&dg);
            }
        })),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, _own| {
            if pa.requires_grad() {
                let da: Vec<f64> = g.iter().zip(pb.data().iter()).map(|(gi, y)| gi * y).collect();
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let db: Vec<f64> = g.iter().zip(pa.data().iter()).map(|(gi, x)| gi * x).collect();
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

/// Row i of x[r,c] scaled by w[i].
pub fn scale_rows(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "scale_rows input")?;
    if w.shape() != [r] {
        return Err(shape_err("scale_rows weights", &[r], w.shape()));
    }
    let mut data = x.to_vec();
    {
        let wd = w.data();
        for (row, wi) in data.chunks_mut(c).zip(wd.iter()) {
            for v in row {
                *v *= wi;
            }
        }
    }
    let (px, pw) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone(), w.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let wd = pw.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let wi = wd[i];
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] * wi;
                    }
                }
                drop(wd);
                px.accumulate_grad(&dx);
            }
            if pw.requires_grad() {
                let xd = px.data();
                let mut dw = vec![0.0; r];
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g[i * c + j] * xd[i * c + j];
                    }
                    dw[i] = s;
                }
                drop(xd);
                pw.accumulate_grad(&dw);
            }
        })),
    ))
}

/// Row i of x[r,c] divided by d[i].
pub fn div_rows(x: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "div_rows input")?;
    if d.shape() != [r] {
        return Err(shape_err("div_rows divisor", &[r], d.shape()));
    }
    let mut data = x.to_vec();
    {
        let dd = d.data();
        for (row, di) in data.chunks_mut(c).zip(dd.iter()) {
            for v in row {
                *v /= di;
            }
        }
    }
    let (px, pd) = (x.clone(), d.clone());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone(), d.clone()],
        Some(Box::new(move |g, _own| {
            let dd = pd.data().clone();
            if px.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] / dd[i];
                    }
                }
                px.accumulate_grad(&dx);
            }
            if pd.requires_grad() {
                let xd = px.data();
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g[i * c + j] * xd[i * c + j];
                    }
                    dv[i] = -s / (dd[i] * dd[i]);
                }
                drop(xd);
                pd.accumulate_grad(&dv);
            }
        })),
    ))
}

/// Sums each row of x[r,c] into a length-r vector.
pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "row_sum input")?;
    let data: Vec<f64> = x.data().chunks(c).map(|row| row.iter().sum()).collect();
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        vec![r],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c..(i + 1) * c].fill(g[i]);
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

/// Extracts column j of x[r,c] as a length-r vector.
pub fn col(x: &Tensor, j: usize) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "col input")?;
    if j >= c {
        return Err(NumericError::IndexOutOfRange { context: "col", index: j, bound: c });
    }
    let xd = x.data();
    let data: Vec<f64> = (0..r).map(|i| xd[i * c + j]).collect();
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        vec![r],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + j] = g[i];
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

// ── Matrix products ───────────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rows_cols(a.shape(), "matmul lhs")?;
    let (k2, n) = rows_cols(b.shape(), "matmul rhs")?;
    if k != k2 {
        return Err(shape_err("matmul contraction", &[k], &[k2]));
    }
    let mut data = vec![0.0; m * n];
    kernels::matmul_nn(&a.data(), &b.data(), m, k, n, &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, _own| {
            if pa.requires_grad() {
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(g, &pb.data(), m, n, k, &mut da);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn(&pa.data(), g, k, m, n, &mut db);
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

fn batch_dims(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(shape_err(context, &[0, 0, 0], shape));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Batched matmul: a[batch,m,k] @ b[batch,k,n].
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k) = batch_dims(a.shape(), "bmm lhs")?;
    let (batch2, k2, n) = batch_dims(b.shape(), "bmm rhs")?;
    if batch != batch2 || k != k2 {
        return Err(shape_err("bmm", a.shape(), b.shape()));
    }
    let mut data = vec![0.0; batch * m * n];
    kernels::bmm(&a.data(), &b.data(), batch, m, k, n, false, &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        vec![batch, m, n],
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, _own| {
            if pa.requires_grad() {
                let bd = pb.data();
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    kernels::matmul_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
                drop(bd);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let ad = pa.data();
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    kernels::matmul_tn(
                        &ad[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
                drop(ad);
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

/// Batched matmul with transposed rhs: a[batch,m,k] @ b[batch,n,k]^T.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k) = batch_dims(a.shape(), "bmm_nt lhs")?;
    let (batch2, n, k2) = batch_dims(b.shape(), "bmm_nt rhs")?;
    if batch != batch2 || k != k2 {
        return Err(shape_err("bmm_nt", a.shape(), b.shape()));
    }
    let mut data = vec![0.0; batch * m * n];
    kernels::bmm(&a.data(), &b.data(), batch, m, k, n, true, &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        vec![batch, m, n],
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, _own| {
            if pa.requires_grad() {
                // da = g @ b
                let bd = pb.data();
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    kernels::matmul_nn(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[bi * n * k..(bi + 1) * n * k],
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
                drop(bd);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                // db = g^T @ a
                let ad = pa.data();
                let mut db = vec![0.0; batch * n * k];
                for bi in 0..batch {
                    kernels::matmul_tn(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &ad[bi * m * k..(bi + 1) * m * k],
                        n,
                        m,
                        k,
                        &mut db[bi * n * k..(bi + 1) * n * k],
                    );
                }
                drop(ad);
                pb.accumulate_grad(&db);
            }
        })),
    ))
}

// ── Shape manipulation ────────────────────────────────────────────────────

pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(shape_err("reshape", x.shape(), &shape));
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        x.to_vec(),
        shape,
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                px.accumulate_grad(g);
            }
        })),
    ))
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_copy(src: &[f64], shape: &[usize], axes: &[usize], dst: &mut [f64]) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let nd = shape.len();
    // When the innermost axis is preserved, whole rows stay contiguous and
    // can be block-copied.
    if nd >= 1 && axes[nd - 1] == nd - 1 {
        let run = shape[nd - 1];
        let mut idx = vec![0usize; nd - 1];
        let rows = dst.len() / run;
        for r in 0..rows {
            let mut src_off = 0;
            for d in 0..nd - 1 {
                src_off += idx[d] * in_strides[axes[d]];
            }
            dst[r * run..(r + 1) * run].copy_from_slice(&src[src_off..src_off + run]);
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        return;
    }
    let mut idx = vec![0usize; nd];
    for v in dst.iter_mut() {
        let mut src_off = 0;
        for d in 0..nd {
            src_off += idx[d] * in_strides[axes[d]];
        }
        *v = src[src_off];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// General axis permutation (n-dimensional transpose).
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = x.shape().len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(NumericError::InvalidArgument(format!(
            "permute axes {axes:?} invalid for rank {nd}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mut data = vec![0.0; x.numel()];
    permute_copy(&x.data(), x.shape(), axes, &mut data);
    let px = x.clone();
    let axes_owned = axes.to_vec();
    let in_shape = x.shape().to_vec();
    Ok(Tensor::from_op(
        data,
        out_shape.clone(),
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                // Invert the permutation on the gradient.
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                let mut dx = vec![0.0; g.len()];
                let g_shape: Vec<usize> = axes_owned.iter().map(|&a| in_shape[a]).collect();
                permute_copy(g, &g_shape, &inverse, &mut dx);
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

/// Transpose of a 2-D matrix; `permute` specialized for the common case.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(shape_err("transpose", &[0, 0], x.shape()));
    }
    permute(x, &[1, 0])
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(NumericError::InvalidArgument("concat of zero tensors".into()));
    }
    let first = parts[0].shape().to_vec();
    if axis >= first.len() {
        return Err(NumericError::IndexOutOfRange { context: "concat axis", index: axis, bound: first.len() });
    }
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(shape_err("concat", &first, s));
        }
    }
    let dim_sum: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.clone();
    out_shape[axis] = dim_sum;
    let (outer, _, inner) = around_axis(&out_shape, axis);
    let mut data = vec![0.0; outer * dim_sum * inner];
    let mut offset = 0;
    for p in parts {
        let d = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let dst = (o * dim_sum + offset) * inner;
            let src = o * d * inner;
            data[dst..dst + d * inner].copy_from_slice(&pd[src..src + d * inner]);
        }
        offset += d;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let closure_parents = owned.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        owned,
        Some(Box::new(move |g, _own| {
            let mut offset = 0;
            for (p, &d) in closure_parents.iter().zip(&dims) {
                if p.requires_grad() {
                    let mut dp = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        let src = (o * dim_sum + offset) * inner;
                        let dst = o * d * inner;
                        dp[dst..dst + d * inner].copy_from_slice(&g[src..src + d * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += d;
            }
        })),
    ))
}

/// Contiguous slice `start..start+len` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(NumericError::IndexOutOfRange { context: "slice axis", index: axis, bound: shape.len() });
    }
    if len == 0 || start + len > shape[axis] {
        return Err(NumericError::IndexOutOfRange {
            context: "slice range",
            index: start + len,
            bound: shape[axis],
        });
    }
    let (outer, dim, inner) = around_axis(&shape, axis);
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    {
        let xd = x.data();
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

// ── Gather / scatter ──────────────────────────────────────────────────────

/// out[t,:] = x[idx[t],:]. Serves as the embedding gather and the MoE
/// dispatch; indices may repeat.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "gather_rows table")?;
    for &i in idx {
        if i >= r {
            return Err(NumericError::IndexOutOfRange { context: "gather_rows", index: i, bound: r });
        }
    }
    let xd = x.data();
    let mut data = vec![0.0; idx.len() * c];
    for (t, &i) in idx.iter().enumerate() {
        data[t * c..(t + 1) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
    }
    drop(xd);
    let px = x.clone();
    let idx_owned = idx.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![idx.len(), c],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for (t, &i) in idx_owned.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[t * c + j];
                    }
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

/// out[idx[t],:] = x[t,:] over `out_rows` rows, zeros elsewhere. Indices must
/// be unique: this is the inverse of a dispatch gather.
pub fn scatter_rows(x: &Tensor, idx: &[usize], out_rows: usize) -> Result<Tensor> {
    let (s, c) = rows_cols(x.shape(), "scatter_rows input")?;
    if idx.len() != s {
        return Err(NumericError::InvalidArgument(format!(
            "scatter_rows: {} indices for {} rows",
            idx.len(),
            s
        )));
    }
    let mut filled = vec![false; out_rows];
    for &i in idx {
        if i >= out_rows {
            return Err(NumericError::IndexOutOfRange { context: "scatter_rows", index: i, bound: out_rows });
        }
        if std::mem::replace(&mut filled[i], true) {
            return Err(NumericError::InvalidArgument(format!(
                "scatter_rows: duplicate index {i}"
            )));
        }
    }
    let xd = x.data();
    let mut data = vec![0.0; out_rows * c];
    for (t, &i) in idx.iter().enumerate() {
        data[i * c..(i + 1) * c].copy_from_slice(&xd[t * c..(t + 1) * c]);
    }
    drop(xd);
    let px = x.clone();
    let idx_owned = idx.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![out_rows, c],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; s * c];
                for (t, &i) in idx_owned.iter().enumerate() {
                    dx[t * c..(t + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

// ── Nonlinear blocks ──────────────────────────────────────────────────────

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.is_empty() {
        return Err(shape_err("softmax", &[0], &shape));
    }
    let c = *shape.last().unwrap();
    let mut data = x.to_vec();
    for row in data.chunks_mut(c) {
        softmax_row(row);
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Some(Box::new(move |g, own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; g.len()];
                for (i, (grow, yrow)) in g.chunks(c).zip(own.chunks(c)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                px.accumulate_grad_owned(dx);
            }
        })),
    ))
}

/// Softmax over the last axis where row i of each trailing [s,s] block only
/// attends to columns <= i; masked entries are exactly zero.
pub fn causal_softmax(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != shape[nd - 2] {
        return Err(shape_err("causal_softmax", &shape, &shape));
    }
    let s = shape[nd - 1];
    let mut data = x.to_vec();
    for block in data.chunks_mut(s * s) {
        for i in 0..s {
            let row = &mut block[i * s..i * s + s];
            let (visible, hidden) = row.split_at_mut(i + 1);
            softmax_row(visible);
            hidden.fill(0.0);
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Some(Box::new(move |g, own| {
            if px.requires_grad() {
                let mut dx = vec![0.0; g.len()];
                for (b, (gb, yb)) in g.chunks(s * s).zip(own.chunks(s * s)).enumerate() {
                    for i in 0..s {
                        let off = i * s;
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += gb[off + j] * yb[off + j];
                        }
                        for j in 0..=i {
                            dx[b * s * s + off + j] = yb[off + j] * (gb[off + j] - dot);
                        }
                    }
                }
                px.accumulate_grad_owned(dx);
            }
        })),
    ))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis of x[r,c] with learned gain/bias.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (r, c) = rows_cols(x.shape(), "layer_norm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("layer_norm params", &[c], gamma.shape()));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..c {
            let xh = (row[j] - mean) * istd;
            xhat[i * c + j] = xh;
            data[i * c + j] = gd[j] * xh + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone(), gamma.clone(), beta.clone()],
        Some(Box::new(move |g, _own| {
            if pg.requires_grad() {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
                pg.accumulate_grad(&dg);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                pb.accumulate_grad(&db);
            }
            if px.requires_grad() {
                let gd = pg.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gd[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i * c + j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gd[j];
                        dx[i * c + j] =
                            inv_std[i] * (dxh - mean_dxhat - xhat[i * c + j] * mean_dxhat_xhat);
                    }
                }
                drop(gd);
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact (erf-based) GELU. Forward caches the Gaussian CDF values so the
/// backward pass only pays for the density term.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let needs_grad = x.requires_grad();
    let xd = x.data();
    let mut cdf_cache = if needs_grad { Vec::with_capacity(xd.len()) } else { Vec::new() };
    let mut data = Vec::with_capacity(xd.len());
    for &v in xd.iter() {
        let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
        if needs_grad {
            cdf_cache.push(cdf);
        }
        data.push(v * cdf);
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let xd = px.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .zip(&cdf_cache)
                    .map(|((gi, &v), &cdf)| {
                        let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                        gi * (cdf + v * pdf)
                    })
                    .collect();
                drop(xd);
                px.accumulate_grad_owned(dx);
            }
        })),
    ))
}

/// Mean over rows of -log softmax(logits)[t, target_t].
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (t, v) = rows_cols(logits.shape(), "cross_entropy logits")?;
    if targets.len() != t || t == 0 {
        return Err(NumericError::InvalidArgument(format!(
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            t
        )));
    }
    for &y in targets {
        if y >= v {
            return Err(NumericError::IndexOutOfRange { context: "cross_entropy target", index: y, bound: v });
        }
    }
    let ld = logits.data();
    let mut probs = vec![0.0; t * v];
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = &ld[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs[i * v + j] = e;
            sum += e;
        }
        for p in &mut probs[i * v..(i + 1) * v] {
            *p /= sum;
        }
        loss += max + sum.ln() - row[y];
    }
    drop(ld);
    loss /= t as f64;
    let px = logits.clone();
    let targets_owned = targets.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                let scale = g[0] / t as f64;
                let mut dx = probs.clone();
                for (i, &y) in targets_owned.iter().enumerate() {
                    dx[i * v + y] -= 1.0;
                }
                for d in dx.iter_mut() {
                    *d *= scale;
                }
                px.accumulate_grad(&dx);
            }
        })),
    ))
}

// ── Reductions ────────────────────────────────────────────────────────────

pub fn sum(x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    let px = x.clone();
    let n = x.numel();
    Ok(Tensor::from_op(
        vec![total],
        vec![1],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                px.accumulate_grad(&vec![g[0]; n]);
            }
        })),
    ))
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let total: f64 = x.data().iter().sum::<f64>() / n as f64;
    let px = x.clone();
    Ok(Tensor::from_op(
        vec![total],
        vec![1],
        vec![x.clone()],
        Some(Box::new(move |g, _own| {
            if px.requires_grad() {
                px.accumulate_grad(&vec![g[0] / n as f64; n]);
            }
        })),
    ))
}
