//! Forward ops and their backward rules.

use super::{IdMatrix, Mask, Tape, Tensor};
use crate::error::{Error, Result};

/// C[m,n] += A[m,k] * B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Index of the maximum value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs == [1] || lhs == rhs || (rhs.len() <= lhs.len() && lhs.ends_with(rhs)) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "cannot broadcast {:?} onto {:?}",
            rhs, lhs
        )))
    }
}

/// Sum a full-size gradient down to a suffix-broadcast (or scalar) shape.
fn reduce_to(grad: &[f64], rhs_numel: usize) -> Vec<f64> {
    if rhs_numel == 1 {
        vec![grad.iter().sum()]
    } else {
        let mut out = vec![0.0; rhs_numel];
        for (i, g) in grad.iter().enumerate() {
            out[i % rhs_numel] += g;
        }
        out
    }
}

impl Tape {
    fn binary_elementwise(
        &self,
        a: &Tensor,
        b: &Tensor,
        fwd: impl Fn(f64, f64) -> f64,
        // (out_grad_elem, a_elem, b_elem) -> (da, db)
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        check_suffix_broadcast(&sa, &sb)?;
        let (av, bv) = (a.values(), b.values());
        let nb = bv.len();
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| fwd(x, bv[if nb == 1 { 0 } else { i % nb }]))
            .collect();
        drop(av);
        drop(bv);
        Ok(self.record(
            &[a, b],
            sa,
            out,
            Box::new(move |g, inputs| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (av, bv) = (a.values(), b.values());
                let nb = bv.len();
                let mut da = vec![0.0; av.len()];
                let mut db_full = vec![0.0; av.len()];
                for i in 0..av.len() {
                    let bx = bv[if nb == 1 { 0 } else { i % nb }];
                    let (ga, gb) = bwd(g[i], av[i], bx);
                    da[i] = ga;
                    db_full[i] = gb;
                }
                drop(av);
                drop(bv);
                a.accumulate_grad(&da);
                if b.requires_grad() {
                    b.accumulate_grad(&reduce_to(&db_full, nb));
                }
            }),
        ))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.values().iter().map(|&x| x * c).collect();
        Ok(self.record(
            &[a],
            a.shape(),
            out,
            Box::new(move |g, inputs| {
                let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&x| x.sqrt()).collect();
        let saved = out.clone();
        Ok(self.record(
            &[a],
            a.shape(),
            out,
            Box::new(move |g, inputs| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&saved)
                    .map(|(&gi, &y)| if y > 0.0 { gi * 0.5 / y } else { 0.0 })
                    .collect();
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.values().iter().map(|&x| x.abs()).collect();
        Ok(self.record(
            &[a],
            a.shape(),
            out,
            Box::new(move |g, inputs| {
                let av = inputs[0].values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &x)| gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                drop(av);
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    pub fn reshape(&self, a: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != a.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                a.shape(),
                new_shape
            )));
        }
        Ok(self.record(
            &[a],
            new_shape,
            a.to_vec(),
            Box::new(|g, inputs| inputs[0].accumulate_grad(g)),
        ))
    }

    pub fn permute(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = a.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::InvalidAxis {
                axis: axes.iter().copied().max().unwrap_or(0),
                rank,
            });
        }
        let new_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let fwd_map = permutation_index_map(&shape, axes);
        let av = a.values();
        let mut out = vec![0.0; av.len()];
        for (dst, &src) in fwd_map.iter().enumerate() {
            out[dst] = av[src];
        }
        drop(av);
        Ok(self.record(
            &[a],
            new_shape,
            out,
            Box::new(move |g, inputs| {
                let mut da = vec![0.0; g.len()];
                for (dst, &src) in fwd_map.iter().enumerate() {
                    da[src] = g[dst];
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let rank = a.shape().len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        let rank = first.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != rank
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat shapes {:?} vs {:?} on axis {}",
                    s, first, axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let pv = p.values();
                let mid = p.shape()[axis];
                out.extend_from_slice(&pv[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mids: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(self.record(
            parts,
            out_shape,
            out,
            Box::new(move |g, inputs| {
                let mut offset_rows = 0;
                for (idx, input) in inputs.iter().enumerate() {
                    let mid = mids[idx];
                    let mut da = vec![0.0; input.numel()];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset_rows) * inner;
                        let dst_start = o * mid * inner;
                        da[dst_start..dst_start + mid * inner]
                            .copy_from_slice(&g[src_start..src_start + mid * inner]);
                    }
                    input.accumulate_grad(&da);
                    offset_rows += mid;
                }
            }),
        ))
    }

    pub fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis(a, axis, false)
    }

    pub fn variance_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&self, a: &Tensor, axis: usize, variance: bool) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let av = a.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..mid {
                    s += av[(o * mid + j) * inner + i];
                }
                let mu = s / mid as f64;
                out[o * inner + i] = if variance {
                    let mut v = 0.0;
                    for j in 0..mid {
                        let d = av[(o * mid + j) * inner + i] - mu;
                        v += d * d;
                    }
                    v / mid as f64
                } else {
                    mu
                };
            }
        }
        drop(av);
        Ok(self.record(
            &[a],
            out_shape,
            out,
            Box::new(move |g, inputs| {
                let av = inputs[0].values();
                let mut da = vec![0.0; av.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        if variance {
                            let mut s = 0.0;
                            for j in 0..mid {
                                s += av[(o * mid + j) * inner + i];
                            }
                            let mu = s / mid as f64;
                            for j in 0..mid {
                                let idx = (o * mid + j) * inner + i;
                                da[idx] += gi * 2.0 * (av[idx] - mu) / mid as f64;
                            }
                        } else {
                            for j in 0..mid {
                                da[(o * mid + j) * inner + i] += gi / mid as f64;
                            }
                        }
                    }
                }
                drop(av);
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Max along an axis; gradient routes to the argmax, lowest index on ties.
    pub fn max_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let av = a.values();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..mid {
                    if av[(o * mid + j) * inner + i] > av[(o * mid + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = av[(o * mid + best) * inner + i];
                arg[o * inner + i] = (o * mid + best) * inner + i;
            }
        }
        drop(av);
        Ok(self.record(
            &[a],
            out_shape,
            out,
            Box::new(move |g, inputs| {
                let mut da = vec![0.0; inputs[0].numel()];
                for (gi, &src) in g.iter().zip(&arg) {
                    da[src] += gi;
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.values().iter().sum();
        Ok(self.record(
            &[a],
            vec![1],
            vec![s],
            Box::new(|g, inputs| {
                inputs[0].accumulate_grad(&vec![g[0]; inputs[0].numel()]);
            }),
        ))
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / n)
    }

    /// `out[i] = keep[i] ? x[i] : fill`; gradient is zeroed where filled.
    pub fn masked_fill(&self, a: &Tensor, keep: &[bool], fill: f64) -> Result<Tensor> {
        if keep.len() != a.numel() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs tensor numel {}",
                keep.len(),
                a.numel()
            )));
        }
        let out = a
            .values()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let keep = keep.to_vec();
        Ok(self.record(
            &[a],
            a.shape(),
            out,
            Box::new(move |g, inputs| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&keep)
                    .map(|(&gi, &k)| if k { gi } else { 0.0 })
                    .collect();
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Gather rows of `table` [V,D] by id, output [rows, cols, D].
    /// Backward scatter-adds into the looked-up rows.
    pub fn embedding_lookup(&self, table: &Tensor, ids: &IdMatrix) -> Result<Tensor> {
        let ts = table.shape();
        if ts.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "embedding table must be rank 2, got {:?}",
                ts
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        for &id in &ids.data {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let tv = table.values();
        let mut out = Vec::with_capacity(ids.data.len() * d);
        for &id in &ids.data {
            let r = id as usize;
            out.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        drop(tv);
        let ids = ids.clone();
        Ok(self.record(
            &[table],
            vec![ids.rows, ids.cols, d],
            out,
            Box::new(move |g, inputs| {
                let mut da = vec![0.0; inputs[0].numel()];
                for (pos, &id) in ids.data.iter().enumerate() {
                    let r = id as usize;
                    for j in 0..d {
                        da[r * d + j] += g[pos * d + j];
                    }
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Numerically stable softmax along `axis`. Lanes that are entirely
    /// -inf (fully masked) produce zeros; callers guard against that case.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let av = a.values();
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..mid {
                    mx = mx.max(av[(o * mid + j) * inner + i]);
                }
                if mx == f64::NEG_INFINITY {
                    continue; // fully masked lane -> zeros
                }
                let mut z = 0.0;
                for j in 0..mid {
                    let e = (av[(o * mid + j) * inner + i] - mx).exp();
                    out[(o * mid + j) * inner + i] = e;
                    z += e;
                }
                for j in 0..mid {
                    out[(o * mid + j) * inner + i] /= z;
                }
            }
        }
        drop(av);
        let saved = out.clone();
        Ok(self.record(
            &[a],
            shape,
            out,
            Box::new(move |g, inputs| {
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for j in 0..mid {
                            let idx = (o * mid + j) * inner + i;
                            dot += g[idx] * saved[idx];
                        }
                        for j in 0..mid {
                            let idx = (o * mid + j) * inner + i;
                            da[idx] = saved[idx] * (g[idx] - dot);
                        }
                    }
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Standardize the last axis, then apply elementwise gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = x.shape();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch("layer_norm on rank-0".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm gain/bias must be [{}]",
                d
            )));
        }
        let rows = x.numel() / d;
        let xv = x.values();
        let gv = gain.values();
        let bv = bias.values();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        Ok(self.record(
            &[x, gain, bias],
            shape,
            out,
            Box::new(move |g, inputs| {
                let gv = inputs[1].values();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let mut m1 = 0.0; // mean of dy*gain
                    let mut m2 = 0.0; // mean of dy*gain*xhat
                    for j in 0..d {
                        let idx = r * d + j;
                        let dxh = g[idx] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[idx];
                        dgain[j] += g[idx] * xhat[idx];
                        dbias[j] += g[idx];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let idx = r * d + j;
                        let dxh = g[idx] * gv[j];
                        dx[idx] = inv_std[r] * (dxh - m1 - xhat[idx] * m2);
                    }
                }
                drop(gv);
                inputs[0].accumulate_grad(&dx);
                inputs[1].accumulate_grad(&dgain);
                inputs[2].accumulate_grad(&dbias);
            }),
        ))
    }

    /// Mean negative log-likelihood over non-pad positions.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &IdMatrix, pad_id: u32) -> Result<Tensor> {
        let shape = logits.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy expects [B,T,V] logits, got {:?}",
                shape
            )));
        }
        let (b, t, v) = (shape[0], shape[1], shape[2]);
        if targets.rows != b || targets.cols != t {
            return Err(Error::ShapeMismatch(format!(
                "targets {}x{} vs logits batch {}x{}",
                targets.rows, targets.cols, b, t
            )));
        }
        for &id in &targets.data {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let non_pad: Vec<usize> = targets
            .data
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != pad_id)
            .map(|(i, _)| i)
            .collect();
        if non_pad.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let count = non_pad.len() as f64;
        let lv = logits.values();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for &pos in &non_pad {
            let row = &lv[pos * v..(pos + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[pos * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[pos * v + j] /= z;
            }
            let tgt = targets.data[pos] as usize;
            loss += z.ln() + mx - row[tgt];
        }
        loss /= count;
        drop(lv);
        let targets = targets.clone();
        Ok(self.record(
            &[logits],
            vec![1],
            vec![loss],
            Box::new(move |g, inputs| {
                let scale = g[0] / count;
                let mut da = vec![0.0; inputs[0].numel()];
                for &pos in &non_pad {
                    let tgt = targets.data[pos] as usize;
                    for j in 0..v {
                        let mut d = probs[pos * v + j];
                        if j == tgt {
                            d -= 1.0;
                        }
                        da[pos * v + j] = d * scale;
                    }
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }

    /// Matrix product. Supported forms: 2D x 2D, batched x batched with equal
    /// leading extents, and batched x 2D (the 2D operand broadcasts).
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "inner extents differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let broadcast_b = sb.len() == 2;
        if !broadcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::ShapeMismatch(format!(
                "batch extents differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let av = a.values();
        let bv = b.values();
        let mut out = vec![0.0; batch_a * m * n];
        if broadcast_b {
            mm_nn(&av, &bv, batch_a * m, k, n, &mut out);
        } else {
            for q in 0..batch_a {
                mm_nn(
                    &av[q * m * k..(q + 1) * m * k],
                    &bv[q * k * n..(q + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[q * m * n..(q + 1) * m * n],
                );
            }
        }
        drop(av);
        drop(bv);
        let _ = batch_b;
        Ok(self.record(
            &[a, b],
            out_shape,
            out,
            Box::new(move |g, inputs| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let av = a.to_vec();
                let bv = b.to_vec();
                if broadcast_b {
                    // dA = dC * B^T ; dB = A^T * dC (summed over batch rows)
                    if a.requires_grad() {
                        let mut da = vec![0.0; av.len()];
                        mm_nt(g, &bv, batch_a * m, n, k, &mut da);
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![0.0; bv.len()];
                        mm_tn(&av, g, k, batch_a * m, n, &mut db);
                        b.accumulate_grad(&db);
                    }
                } else {
                    if a.requires_grad() {
                        let mut da = vec![0.0; av.len()];
                        for q in 0..batch_a {
                            mm_nt(
                                &g[q * m * n..(q + 1) * m * n],
                                &bv[q * k * n..(q + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[q * m * k..(q + 1) * m * k],
                            );
                        }
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![0.0; bv.len()];
                        for q in 0..batch_a {
                            mm_tn(
                                &av[q * m * k..(q + 1) * m * k],
                                &g[q * m * n..(q + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut db[q * k * n..(q + 1) * k * n],
                            );
                        }
                        b.accumulate_grad(&db);
                    }
                }
            }),
        ))
    }

    /// Mean over non-pad time positions: [B,T,D] -> [B,D].
    pub fn masked_mean_time(&self, x: &Tensor, mask: &Mask) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "masked_mean_time expects [B,T,D], got {:?}",
                shape
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if mask.rows != b || mask.cols != t {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs input {}x{}",
                mask.rows, mask.cols, b, t
            )));
        }
        let mut counts = vec![0usize; b];
        for r in 0..b {
            counts[r] = mask.row(r).iter().filter(|&&k| k).count();
            if counts[r] == 0 {
                return Err(Error::EmptyRow(r));
            }
        }
        let xv = x.values();
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..t {
                if mask.get(r, j) {
                    for c in 0..d {
                        out[r * d + c] += xv[(r * t + j) * d + c];
                    }
                }
            }
            for c in 0..d {
                out[r * d + c] /= counts[r] as f64;
            }
        }
        drop(xv);
        let mask = mask.clone();
        Ok(self.record(
            &[x],
            vec![b, d],
            out,
            Box::new(move |g, inputs| {
                let mut da = vec![0.0; inputs[0].numel()];
                for r in 0..b {
                    let inv = 1.0 / counts[r] as f64;
                    for j in 0..t {
                        if mask.get(r, j) {
                            for c in 0..d {
                                da[(r * t + j) * d + c] = g[r * d + c] * inv;
                            }
                        }
                    }
                }
                inputs[0].accumulate_grad(&da);
            }),
        ))
    }
}

/// For each output position (in permuted layout) the source index.
fn permutation_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let numel: usize = shape.iter().product();
    let mut map = vec![0usize; numel];
    let mut idx = vec![0usize; rank];
    for dst in 0..numel {
        let mut src = 0;
        for (pos, &ax) in axes.iter().enumerate() {
            src += idx[pos] * strides[ax];
        }
        map[dst] = src;
        // odometer increment over new_shape
        for pos in (0..rank).rev() {
            idx[pos] += 1;
            if idx[pos] < new_shape[pos] {
                break;
            }
            idx[pos] = 0;
        }
    }
    map
}

/// Copy a tensor out of the graph: same values, no tape linkage, no grads.
pub fn detach(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.to_vec())
}
