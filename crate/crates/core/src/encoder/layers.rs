//! Forward and backward kernels. Backward functions accumulate parameter
//! gradients into the provided slices and return the input gradient.

use crate::tensor::{dot, gemm, Mat};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        self.h_in.div_ceil(2)
    }

    pub fn w_out(&self) -> usize {
        self.w_in.div_ceil(2)
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out() * self.w_out()
    }
}

/// Patch matrix: one row of `c_in · 9` taps per output position.
fn im2col(input: &[f64], s: ConvShape) -> Vec<f64> {
    let (ho, wo) = (s.h_out(), s.w_out());
    let kk = s.c_in * 9;
    let mut col = vec![0.0; ho * wo * kk];
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut col[(i * wo + j) * kk..(i * wo + j + 1) * kk];
            for ci in 0..s.c_in {
                for di in 0..3 {
                    let r = (2 * i + di) as isize - 1;
                    if r < 0 || r as usize >= s.h_in {
                        continue;
                    }
                    for dj in 0..3 {
                        let c = (2 * j + dj) as isize - 1;
                        if c < 0 || c as usize >= s.w_in {
                            continue;
                        }
                        row[ci * 9 + di * 3 + dj] = input[(ci * s.h_in + r as usize) * s.w_in + c as usize];
                    }
                }
            }
        }
    }
    col
}

/// 3×3 convolution, stride 2 on both axes, zero padding 1. Layout `[c][h][w]`.
pub fn conv2d_s2(input: &[f64], s: ConvShape, w: &[f64], b: &[f64]) -> Vec<f64> {
    let npos = s.h_out() * s.w_out();
    let kk = s.c_in * 9;
    let col = im2col(input, s);
    let mut out = vec![0.0; s.out_len()];
    for (co, o) in out.chunks_exact_mut(npos).enumerate() {
        o.fill(b[co]);
    }
    gemm(s.c_out, kk, npos, w, (kk, 1), &col, (1, kk), 1.0, &mut out, (npos, 1));
    out
}

/// Backward of [`conv2d_s2`]. The input gradient is only formed when
/// `want_input_grad` is set; otherwise an empty vector is returned.
pub fn conv2d_s2_backward(
    input: &[f64],
    s: ConvShape,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let npos = s.h_out() * s.w_out();
    let kk = s.c_in * 9;
    let col = im2col(input, s);
    for (co, g) in dout.chunks_exact(npos).enumerate() {
        db[co] += g.iter().sum::<f64>();
    }
    gemm(s.c_out, npos, kk, dout, (npos, 1), &col, (kk, 1), 1.0, dw, (kk, 1));
    if !want_input_grad {
        return Vec::new();
    }
    let mut dcol = vec![0.0; npos * kk];
    gemm(npos, s.c_out, kk, dout, (1, npos), w, (kk, 1), 0.0, &mut dcol, (kk, 1));
    let (ho, wo) = (s.h_out(), s.w_out());
    let mut din = vec![0.0; input.len()];
    for i in 0..ho {
        for j in 0..wo {
            let row = &dcol[(i * wo + j) * kk..(i * wo + j + 1) * kk];
            for ci in 0..s.c_in {
                for di in 0..3 {
                    let r = (2 * i + di) as isize - 1;
                    if r < 0 || r as usize >= s.h_in {
                        continue;
                    }
                    for dj in 0..3 {
                        let c = (2 * j + dj) as isize - 1;
                        if c < 0 || c as usize >= s.w_in {
                            continue;
                        }
                        din[(ci * s.h_in + r as usize) * s.w_in + c as usize] += row[ci * 9 + di * 3 + dj];
                    }
                }
            }
        }
    }
    din
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy ⊙ silu'(x)`.
pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub struct NormCache {
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, NormCache) {
    let d = x.cols();
    let mut y = Mat::zeros(x.rows(), d);
    let mut xhat = Mat::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(t);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let yr = y.row_mut(t);
        for k in 0..d {
            yr[k] = gain[k] * xh[k] + bias[k];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dy: &Mat,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let d = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for t in 0..dy.rows() {
        let g = dy.row(t);
        let xh = cache.xhat.row(t);
        for k in 0..d {
            dgain[k] += g[k] * xh[k];
            dbias[k] += g[k];
            dxhat[k] = g[k] * gain[k];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let r = cache.rstd[t];
        for (k, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = r * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
    dx
}

/// Chunk boundaries `[start, end)` for block-diagonal attention.
pub fn chunks(n: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(chunk.max(1)).map(move |s| (s, (s + chunk).min(n)))
}

/// Softmax attention probabilities, one `len × len` matrix per (chunk, head).
pub struct AttnCache {
    pub probs: Vec<Vec<f64>>,
}

/// Multi-head attention where frame `i` only sees frames of chunk `⌊i/chunk⌋`.
pub fn chunked_attention(q: &Mat, k: &Mat, v: &Mat, n_heads: usize, chunk: usize) -> (Mat, AttnCache) {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros(n, d);
    let mut probs = Vec::new();
    for (s, e) in chunks(n, chunk) {
        let len = e - s;
        for h in 0..n_heads {
            let off = s * d + h * dh;
            let mut p = vec![0.0; len * len];
            gemm(len, dh, len, &q.data()[off..], (d, 1), &k.data()[off..], (1, d), 0.0, &mut p, (len, 1));
            for pr in p.chunks_exact_mut(len) {
                let mut mx = f64::NEG_INFINITY;
                for pj in pr.iter_mut() {
                    *pj *= scale;
                    mx = mx.max(*pj);
                }
                let mut z = 0.0;
                for pj in pr.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in pr.iter_mut() {
                    *pj /= z;
                }
            }
            gemm(len, len, dh, &p, (len, 1), &v.data()[off..], (d, 1), 0.0, &mut ctx.data_mut()[off..], (d, 1));
            probs.push(p);
        }
    }
    (ctx, AttnCache { probs })
}

pub fn chunked_attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    cache: &AttnCache,
    dctx: &Mat,
    n_heads: usize,
    chunk: usize,
) -> (Mat, Mat, Mat) {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut idx = 0;
    for (s, e) in chunks(n, chunk) {
        let len = e - s;
        for h in 0..n_heads {
            let off = s * d + h * dh;
            let p = &cache.probs[idx];
            idx += 1;
            // dP = dctx · vᵀ, dv = Pᵀ · dctx
            let mut ds = vec![0.0; len * len];
            gemm(len, dh, len, &dctx.data()[off..], (d, 1), &v.data()[off..], (1, d), 0.0, &mut ds, (len, 1));
            gemm(len, len, dh, p, (1, len), &dctx.data()[off..], (d, 1), 0.0, &mut dv.data_mut()[off..], (d, 1));
            for (dr, pr) in ds.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                let inner = dot(dr, pr);
                for (g, &pj) in dr.iter_mut().zip(pr) {
                    *g = pj * (*g - inner) * scale;
                }
            }
            // dq = dS · k, dk = dSᵀ · q
            gemm(len, len, dh, &ds, (len, 1), &k.data()[off..], (d, 1), 0.0, &mut dq.data_mut()[off..], (d, 1));
            gemm(len, len, dh, &ds, (1, len), &q.data()[off..], (d, 1), 0.0, &mut dk.data_mut()[off..], (d, 1));
        }
    }
    (dq, dk, dv)
}

pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        let lse = crate::tensor::log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Gradient wrt logits given the gradient wrt log-probabilities.
pub fn log_softmax_backward(logp: &Mat, dlogp: &Mat) -> Mat {
    let mut out = Mat::zeros(logp.rows(), logp.cols());
    for t in 0..logp.rows() {
        let g = dlogp.row(t);
        let total: f64 = g.iter().sum();
        for ((o, &gv), &lp) in out.row_mut(t).iter_mut().zip(g).zip(logp.row(t)) {
            *o = gv - lp.exp() * total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = sub_rng(seed, 99);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        Mat::from_vec(r, c, rand_vec(r * c, seed))
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn conv_output_size_is_ceil_half() {
        let s = ConvShape { c_in: 1, h_in: 5, w_in: 7, c_out: 2 };
        assert_eq!((s.h_out(), s.w_out()), (3, 4));
    }

    #[test]
    fn conv_gradients_match_fd() {
        let s = ConvShape { c_in: 2, h_in: 5, w_in: 6, c_out: 3 };
        let x = rand_vec(2 * 5 * 6, 1);
        let w = rand_vec(3 * 2 * 9, 2);
        let b = rand_vec(3, 3);
        let r = rand_vec(s.out_len(), 4);
        let loss = |x: &[f64], w: &[f64]| dot(&conv2d_s2(x, s, w, &b), &r);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv2d_s2_backward(&x, s, &w, &r, &mut dw, &mut db, true);
        let h = 1e-5;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            assert!(close(dw[i], (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h)));
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            assert!(close(dx[i], (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h)));
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let x = rand_mat(4, 6, 5);
        let g = rand_vec(6, 6);
        let b = rand_vec(6, 7);
        let r = rand_mat(4, 6, 8);
        let loss = |x: &Mat| dot(layer_norm(x, &g, &b).0.data(), r.data());
        let (_, cache) = layer_norm(&x, &g, &b);
        let (mut dg, mut db) = (vec![0.0; 6], vec![0.0; 6]);
        let dx = layer_norm_backward(&cache, &g, &r, &mut dg, &mut db);
        for i in 0..x.data().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += 1e-5;
            xm.data_mut()[i] -= 1e-5;
            let fd = (loss(&xp) - loss(&xm)) / 2e-5;
            assert!(close(dx.data()[i], fd), "{} vs {fd}", dx.data()[i]);
        }
    }

    #[test]
    fn attention_gradient_matches_fd() {
        let (n, d, heads, chunk) = (7, 4, 2, 3);
        let q = rand_mat(n, d, 10);
        let k = rand_mat(n, d, 11);
        let v = rand_mat(n, d, 12);
        let r = rand_mat(n, d, 13);
        let loss = |q: &Mat, k: &Mat, v: &Mat| dot(chunked_attention(q, k, v, heads, chunk).0.data(), r.data());
        let (_, cache) = chunked_attention(&q, &k, &v, heads, chunk);
        let (dq, dk, dv) = chunked_attention_backward(&q, &k, &v, &cache, &r, heads, chunk);
        for i in 0..n * d {
            let fd = |which: usize| {
                let mut m = [q.clone(), k.clone(), v.clone()];
                let mut p = m.clone();
                m[which].data_mut()[i] += 1e-5;
                p[which].data_mut()[i] -= 1e-5;
                (loss(&m[0], &m[1], &m[2]) - loss(&p[0], &p[1], &p[2])) / 2e-5
            };
            assert!(close(dq.data()[i], fd(0)));
            assert!(close(dk.data()[i], fd(1)));
            assert!(close(dv.data()[i], fd(2)));
        }
    }

    #[test]
    fn silu_derivative_matches_fd() {
        let x = rand_vec(20, 3).iter().map(|v| v * 5.0).collect::<Vec<_>>();
        let ones = vec![1.0; 20];
        let d = silu_backward(&x, &ones);
        for (i, &xi) in x.iter().enumerate() {
            let fd = (silu(&[xi + 1e-6])[0] - silu(&[xi - 1e-6])[0]) / 2e-6;
            assert!(close(d[i], fd));
        }
    }
}
