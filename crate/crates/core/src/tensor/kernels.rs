// Numeric kernels behind the tape ops. Each forward kernel adds the number of
// floating point operations it performs to `flops`; the counts are taken in
// the loops themselves so they can be checked against the analytic cost model.
//
// FLOP convention: one multiply-add is 2 FLOPs; every other arithmetic
// operation (add, compare-free max excluded, exp, div, sqrt) is 1 FLOP.

/// `a (m,k) @ b (k,n)`.
pub(super) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, flops: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
            *flops += 2 * n as u64;
        }
    }
    out
}

/// Gradients of `a @ b` given the output gradient `g (m,n)`.
pub(super) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let da = need_a.then(|| {
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let db_row = &mut db[p * n..(p + 1) * n];
                for (d, &gv) in db_row.iter_mut().zip(g_row) {
                    *d += av * gv;
                }
            }
        }
        db
    });
    (da, db)
}

/// `x (rows,in) @ w (in,out) + b (out)` with the bias added row by row.
pub(super) fn linear(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
    flops: &mut u64,
) -> Vec<f64> {
    let mut out = matmul(x, w, rows, d_in, d_out, flops);
    for row in out.chunks_mut(d_out) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
        *flops += d_out as u64;
    }
    out
}

/// Column sums of a `(rows, cols)` matrix.
pub(super) fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks(cols) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Input row/col for an output position and kernel tap, `None` when it lands in padding.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// HWC convolution. Padded taps count as multiply-adds against zero.
pub(super) fn conv2d(x: &[f64], k: &[f64], b: &[f64], g: &ConvGeom, flops: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; g.h_out * g.w_out * g.c_out];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let o = &mut out[(oy * g.w_out + ox) * g.c_out..(oy * g.w_out + ox + 1) * g.c_out];
            o.copy_from_slice(b);
            *flops += g.c_out as u64;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    *flops += 2 * (g.c_in * g.c_out) as u64;
                    let (Some(iy), Some(ix)) = (g.src(oy, ky, g.h), g.src(ox, kx, g.w)) else {
                        continue;
                    };
                    let xin = &x[(iy * g.w + ix) * g.c_in..(iy * g.w + ix + 1) * g.c_in];
                    let kbase = (ky * g.kw + kx) * g.c_in * g.c_out;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &k[kbase + ci * g.c_out..kbase + (ci + 1) * g.c_out];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.c_out];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let go = &gout[(oy * g.w_out + ox) * g.c_out..(oy * g.w_out + ox + 1) * g.c_out];
            for (d, &v) in db.iter_mut().zip(go) {
                *d += v;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (Some(iy), Some(ix)) = (g.src(oy, ky, g.h), g.src(ox, kx, g.w)) else {
                        continue;
                    };
                    let xbase = (iy * g.w + ix) * g.c_in;
                    let kbase = (ky * g.kw + kx) * g.c_in * g.c_out;
                    for ci in 0..g.c_in {
                        let krow = &k[kbase + ci * g.c_out..kbase + (ci + 1) * g.c_out];
                        dx[xbase + ci] += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        let xv = x[xbase + ci];
                        let dkrow = &mut dk[kbase + ci * g.c_out..kbase + (ci + 1) * g.c_out];
                        for (d, &gv) in dkrow.iter_mut().zip(go) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Softmax along an axis described by (outer, len, inner) strides.
pub(super) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize, flops: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
            // sub, exp, accumulate, divide
            *flops += 4 * len as u64;
        }
    }
    out
}

pub(super) fn softmax_backward(y: &[f64], g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

pub(super) const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis. Returns (output, normalized input, 1/std per row).
pub(super) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
    flops: &mut u64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
        // mean: d adds + 1 div; var: 3d + 1 div; rstd: add, sqrt, div;
        // normalize: 2d; affine: 2d
        *flops += 8 * d as u64 + 5;
    }
    (out, xhat, rstd)
}

pub(super) fn layer_norm_backward(
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = g.len() / d;
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            let dh = gr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Multi-head scaled dot-product self-attention over `(n, c)` projections.
/// Returns the concatenated head outputs and the attention probabilities
/// laid out as `(heads, n, n)`.
pub(super) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    flops: &mut u64,
) -> (Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * c];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * c + off..i * c + off + dh];
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let kj = &k[j * c + off..j * c + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let oi = &mut out[i * c + off..i * c + off + dh];
            for j in 0..n {
                let pij = row[j];
                let vj = &v[j * c + off..j * c + off + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        let nn = (n * n) as u64;
        // scores, scaling, softmax, weighted values
        *flops += 2 * nn * dh as u64 + nn + 4 * nn + 2 * nn * dh as u64;
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; n * c];
    let mut dv = vec![0.0; n * c];
    let mut ds = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let gi = &g[i * c + off..i * c + off + dh];
            let pi = &p[i * n..(i + 1) * n];
            // dP_ij = g_i . v_j ; dV_j += P_ij g_i
            let mut dot = 0.0;
            for j in 0..n {
                let vj = &v[j * c + off..j * c + off + dh];
                let dp = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                ds[j] = dp;
                dot += dp * pi[j];
                let dvj = &mut dv[j * c + off..j * c + off + dh];
                for (d, &gv) in dvj.iter_mut().zip(gi) {
                    *d += pi[j] * gv;
                }
            }
            let qi = &q[i * c + off..i * c + off + dh];
            for j in 0..n {
                let dsij = pi[j] * (ds[j] - dot) * scale;
                if dsij == 0.0 {
                    continue;
                }
                let kj = &k[j * c + off..j * c + off + dh];
                let dqi = &mut dq[i * c + off..i * c + off + dh];
                for (d, &kv) in dqi.iter_mut().zip(kj) {
                    *d += dsij * kv;
                }
                let dkj = &mut dk[j * c + off..j * c + off + dh];
                for (d, &qv) in dkj.iter_mut().zip(qi) {
                    *d += dsij * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
