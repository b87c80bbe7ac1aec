use super::layers::{self, AttnCache, ConvShape, NormCache};
use super::params::names;
use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{linear, linear_backward, Mat};

/// Cached activations of the strided convolutions.
pub struct ConvCache {
    input: Vec<f64>,
    shapes: [ConvShape; 2],
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
}

pub struct BlockCache {
    norm1: NormCache,
    n1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: AttnCache,
    ctx: Mat,
    norm2: NormCache,
    n2: Mat,
    u: Mat,
    s: Mat,
}

/// Everything the backward pass needs from one forward pass.
pub struct Forward {
    conv: ConvCache,
    /// `[feature-encoder frame ; one-hot language]`
    joined: Mat,
    blocks: Vec<BlockCache>,
    pub hidden: Mat,
}

/// Read-only view of a model: configuration plus parameters.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Parameters,
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Parameters) -> Self {
        Self { cfg, params }
    }

    fn p(&self, name: &str) -> &'a [f64] {
        self.params.data(name)
    }

    /// Two strided 3×3 convolutions with SiLU; returns `T' × (C2·F')` frames.
    pub fn feature_encoder(&self, x: &Mat) -> Result<(Mat, ConvCache)> {
        let (t, d) = (x.rows(), x.cols());
        if t < 4 {
            return Err(Error::TooFewFrames(t));
        }
        if d != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.input_dim,
                got: d,
            });
        }
        let [c1, c2] = self.cfg.conv_channels;
        let s1 = ConvShape { c_in: 1, h_in: t, w_in: d, c_out: c1 };
        let s2 = ConvShape { c_in: c1, h_in: s1.h_out(), w_in: s1.w_out(), c_out: c2 };
        let input = x.data().to_vec();
        let pre1 = layers::conv2d_s2(&input, s1, self.p(names::CONV1_W), self.p(names::CONV1_B));
        let act1 = layers::silu(&pre1);
        let pre2 = layers::conv2d_s2(&act1, s2, self.p(names::CONV2_W), self.p(names::CONV2_B));
        let act2 = layers::silu(&pre2);
        let (h2, w2) = (s2.h_out(), s2.w_out());
        let mut out = Mat::zeros(h2, c2 * w2);
        for c in 0..c2 {
            for i in 0..h2 {
                let src = &act2[(c * h2 + i) * w2..(c * h2 + i + 1) * w2];
                out.row_mut(i)[c * w2..(c + 1) * w2].copy_from_slice(src);
            }
        }
        Ok((
            out,
            ConvCache {
                input,
                shapes: [s1, s2],
                pre1,
                act1,
                pre2,
            },
        ))
    }

    fn feature_encoder_backward(&self, cache: &ConvCache, dout: &Mat, grads: &mut Parameters) {
        let [s1, s2] = cache.shapes;
        let (h2, w2) = (s2.h_out(), s2.w_out());
        let mut dact2 = vec![0.0; s2.out_len()];
        for c in 0..s2.c_out {
            for i in 0..h2 {
                dact2[(c * h2 + i) * w2..(c * h2 + i + 1) * w2]
                    .copy_from_slice(&dout.row(i)[c * w2..(c + 1) * w2]);
            }
        }
        let dpre2 = layers::silu_backward(&cache.pre2, &dact2);
        let (mut dw2, mut db2) = take2(grads, names::CONV2_W, names::CONV2_B);
        let dact1 = layers::conv2d_s2_backward(&cache.act1, s2, self.p(names::CONV2_W), &dpre2, &mut dw2, &mut db2, true);
        put2(grads, names::CONV2_W, names::CONV2_B, dw2, db2);
        let dpre1 = layers::silu_backward(&cache.pre1, &dact1);
        let (mut dw1, mut db1) = take2(grads, names::CONV1_W, names::CONV1_B);
        layers::conv2d_s2_backward(&cache.input, s1, self.p(names::CONV1_W), &dpre1, &mut dw1, &mut db1, false);
        put2(grads, names::CONV1_W, names::CONV1_B, dw1, db1);
    }

    /// `[h ; one_hot(language)]`, the input of the projection.
    pub fn join_language(&self, hidden: &Mat, language_id: usize) -> Result<Mat> {
        let l = self.cfg.n_languages;
        if language_id >= l {
            return Err(Error::LanguageOutOfRange { id: language_id, n: l });
        }
        let dh = hidden.cols();
        let mut joined = Mat::zeros(hidden.rows(), dh + l);
        for t in 0..hidden.rows() {
            let row = joined.row_mut(t);
            row[..dh].copy_from_slice(hidden.row(t));
            row[dh + language_id] = 1.0;
        }
        Ok(joined)
    }

    /// One-hot language concatenation followed by the input projection.
    pub fn attach_language(&self, hidden: &Mat, language_id: usize) -> Result<Mat> {
        let joined = self.join_language(hidden, language_id)?;
        if joined.cols() != self.cfg.feature_encoder_dim() + self.cfg.n_languages {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.feature_encoder_dim(),
                got: hidden.cols(),
            });
        }
        Ok(linear(&joined, self.p(names::PROJ_W), self.p(names::PROJ_B), self.cfg.model_dim))
    }

    fn block_forward(&self, l: usize, x: &Mat, chunk: usize) -> (Mat, BlockCache) {
        let cfg = self.cfg;
        let d = cfg.model_dim;
        let w = |t: &str| self.p(&names::layer(l, t));
        let (n1, norm1) = layers::layer_norm(x, w("attn_norm.gain"), w("attn_norm.bias"));
        let q = linear(&n1, w("attn.q.weight"), w("attn.q.bias"), d);
        let k = linear(&n1, w("attn.k.weight"), w("attn.k.bias"), d);
        let v = linear(&n1, w("attn.v.weight"), w("attn.v.bias"), d);
        let (ctx, attn) = layers::chunked_attention(&q, &k, &v, cfg.n_heads, chunk);
        let mut x1 = linear(&ctx, w("attn.o.weight"), w("attn.o.bias"), d);
        x1.add_assign(x);
        let (n2, norm2) = layers::layer_norm(&x1, w("ff_norm.gain"), w("ff_norm.bias"));
        let u = linear(&n2, w("ff.w1.weight"), w("ff.w1.bias"), cfg.ff_dim());
        let s = Mat::from_vec(u.rows(), u.cols(), layers::silu(u.data()));
        let mut out = linear(&s, w("ff.w2.weight"), w("ff.w2.bias"), d);
        out.add_assign(&x1);
        let cache = BlockCache {
            norm1,
            n1,
            q,
            k,
            v,
            attn,
            ctx,
            norm2,
            n2,
            u,
            s,
        };
        (out, cache)
    }

    fn block_backward(&self, l: usize, c: &BlockCache, dout: &Mat, chunk: usize, grads: &mut Parameters) -> Mat {
        let cfg = self.cfg;
        let name = |t: &str| names::layer(l, t);
        let w = |t: &str| self.p(&name(t));
        let lin = |x: &Mat, t: &str, dy: &Mat, grads: &mut Parameters| {
            let (wn, bn) = (name(&format!("{t}.weight")), name(&format!("{t}.bias")));
            let (mut dw, mut db) = take2(grads, &wn, &bn);
            let dx = linear_backward(x, self.p(&wn), dy, &mut dw, &mut db);
            put2(grads, &wn, &bn, dw, db);
            dx
        };
        // Feed-forward residual branch.
        let ds = lin(&c.s, "ff.w2", dout, grads);
        let du = Mat::from_vec(ds.rows(), ds.cols(), layers::silu_backward(c.u.data(), ds.data()));
        let dn2 = lin(&c.n2, "ff.w1", &du, grads);
        let (mut dg, mut db) = take2(grads, &name("ff_norm.gain"), &name("ff_norm.bias"));
        let mut dx1 = layers::layer_norm_backward(&c.norm2, w("ff_norm.gain"), &dn2, &mut dg, &mut db);
        put2(grads, &name("ff_norm.gain"), &name("ff_norm.bias"), dg, db);
        dx1.add_assign(dout);
        // Attention residual branch.
        let dctx = lin(&c.ctx, "attn.o", &dx1, grads);
        let (dq, dk, dv) =
            layers::chunked_attention_backward(&c.q, &c.k, &c.v, &c.attn, &dctx, cfg.n_heads, chunk);
        let mut dn1 = lin(&c.n1, "attn.q", &dq, grads);
        dn1.add_assign(&lin(&c.n1, "attn.k", &dk, grads));
        dn1.add_assign(&lin(&c.n1, "attn.v", &dv, grads));
        let (mut dg, mut db) = take2(grads, &name("attn_norm.gain"), &name("attn_norm.bias"));
        let mut dx = layers::layer_norm_backward(&c.norm1, w("attn_norm.gain"), &dn1, &mut dg, &mut db);
        put2(grads, &name("attn_norm.gain"), &name("attn_norm.bias"), dg, db);
        dx.add_assign(&dx1);
        dx
    }

    /// The stack of chunk-masked attention blocks.
    pub fn encoder_forward(&self, frames: &Mat, chunk_frames: usize) -> Mat {
        let mut x = frames.clone();
        for l in 0..self.cfg.n_layers {
            x = self.block_forward(l, &x, chunk_frames).0;
        }
        x
    }

    /// Full forward pass on (normalized) features, keeping caches for backward.
    pub fn forward(&self, features: &Mat, language_id: usize) -> Result<Forward> {
        let (h, conv) = self.feature_encoder(features)?;
        let joined = self.join_language(&h, language_id)?;
        let mut x = linear(&joined, self.p(names::PROJ_W), self.p(names::PROJ_B), self.cfg.model_dim);
        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let (y, cache) = self.block_forward(l, &x, self.cfg.chunk_frames);
            blocks.push(cache);
            x = y;
        }
        Ok(Forward {
            conv,
            joined,
            blocks,
            hidden: x,
        })
    }

    /// Encoder output only, without caches.
    pub fn encode(&self, features: &Mat, language_id: usize) -> Result<Mat> {
        let (h, _) = self.feature_encoder(features)?;
        let x = self.attach_language(&h, language_id)?;
        Ok(self.encoder_forward(&x, self.cfg.chunk_frames))
    }

    /// Accumulate gradients of all encoder tensors given `d hidden`.
    pub fn backward(&self, fwd: &Forward, d_hidden: &Mat, grads: &mut Parameters) {
        let mut dx = d_hidden.clone();
        for l in (0..self.cfg.n_layers).rev() {
            dx = self.block_backward(l, &fwd.blocks[l], &dx, self.cfg.chunk_frames, grads);
        }
        let (mut dw, mut db) = take2(grads, names::PROJ_W, names::PROJ_B);
        let djoined = linear_backward(&fwd.joined, self.p(names::PROJ_W), &dx, &mut dw, &mut db);
        put2(grads, names::PROJ_W, names::PROJ_B, dw, db);
        let fe = self.cfg.feature_encoder_dim();
        let mut dh = Mat::zeros(djoined.rows(), fe);
        for t in 0..djoined.rows() {
            dh.row_mut(t).copy_from_slice(&djoined.row(t)[..fe]);
        }
        self.feature_encoder_backward(&fwd.conv, &dh, grads);
    }

    /// Logits of the linear head stored under `prefix` (e.g. `decoder`).
    pub fn head_logits(&self, prefix: &str, hidden: &Mat) -> Mat {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        linear(hidden, w, b, b.len())
    }

    /// Accumulate head gradients; returns the gradient wrt `hidden`.
    pub fn head_backward(&self, prefix: &str, hidden: &Mat, dlogits: &Mat, grads: &mut Parameters) -> Mat {
        let (wn, bn) = (format!("{prefix}.weight"), format!("{prefix}.bias"));
        let (mut dw, mut db) = take2(grads, &wn, &bn);
        let dx = linear_backward(hidden, self.p(&wn), dlogits, &mut dw, &mut db);
        put2(grads, &wn, &bn, dw, db);
        dx
    }

    /// Linear map to vocabulary logits, then per-frame log-softmax.
    pub fn decoder_projection(&self, hidden: &Mat) -> Mat {
        layers::log_softmax_rows(&self.head_logits("decoder", hidden))
    }
}

fn take2(g: &mut Parameters, a: &str, b: &str) -> (Vec<f64>, Vec<f64>) {
    (
        std::mem::take(&mut g.get_mut(a).data),
        std::mem::take(&mut g.get_mut(b).data),
    )
}

fn put2(g: &mut Parameters, a: &str, b: &str, da: Vec<f64>, db: Vec<f64>) {
    g.get_mut(a).data = da;
    g.get_mut(b).data = db;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::sub_rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            n_languages: 2,
            conv_channels: [2, 3],
            model_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 12,
            chunk_frames: 3,
            vocab_size: 5,
            seed: 11,
        }
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = sub_rng(seed, 1);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Scalar probe `sum(R ∘ hidden)`.
    fn probe(cfg: &ModelConfig, p: &Parameters, x: &Mat, r: &Mat) -> f64 {
        let h = Encoder::new(cfg, p).encode(x, 1).unwrap();
        h.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny();
        let params = Parameters::init(&cfg).unwrap();
        let x = random_mat(22, cfg.input_dim, 2);
        let enc = Encoder::new(&cfg, &params);
        let fwd = enc.forward(&x, 1).unwrap();
        let r = random_mat(fwd.hidden.rows(), fwd.hidden.cols(), 3);
        let mut grads = params.zeros_like();
        enc.backward(&fwd, &r, &mut grads);

        let mut rng = sub_rng(4, 2);
        let names: Vec<String> = params.names().filter(|n| !n.starts_with("decoder")).map(str::to_owned).collect();
        let h = 1e-5;
        for _ in 0..120 {
            let name = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..params.get(name).len());
            let mut p = params.clone();
            p.data_mut(name)[i] += h;
            let up = probe(&cfg, &p, &x, &r);
            p.data_mut(name)[i] -= 2.0 * h;
            let down = probe(&cfg, &p, &x, &r);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data(name)[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn chunks_do_not_see_each_other() {
        let cfg = tiny();
        let params = Parameters::init(&cfg).unwrap();
        let enc = Encoder::new(&cfg, &params);
        let frames = random_mat(10, cfg.model_dim, 5);
        let base = enc.encoder_forward(&frames, 3);
        let mut other = frames.clone();
        for t in (0..3).chain(6..10) {
            for v in other.row_mut(t) {
                *v += 3.0;
            }
        }
        let out = enc.encoder_forward(&other, 3);
        for t in 3..6 {
            assert_eq!(base.row(t), out.row(t));
        }
        assert_ne!(base.row(0), out.row(0));
    }
}
