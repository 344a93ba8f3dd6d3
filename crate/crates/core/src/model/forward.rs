//! Packed-batch causal transformer forward pass and its reverse-mode gradient.
//!
//! Sequences in a batch are concatenated row-wise; linear layers run over
//! all rows at once and attention runs per sequence. Rows are addressed by
//! their packed index (`start of sequence + position`).

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, Params};
use crate::tensor::{matmul, matmul_at, matmul_bt, s, softmax_in_place, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Activation-level interventions applied during a forward pass.
pub struct Intervention<'a, T> {
    /// Vectors added to the input embeddings of specific packed rows.
    pub embed_noise: Vec<(usize, Vec<T>)>,
    /// Replace the FFN output (value) of specific rows at one layer.
    pub value_patch: Option<(usize, Vec<(usize, Vec<T>)>)>,
    /// Use this matrix instead of a layer's `w_out`.
    pub w_out_override: Option<(usize, &'a Tensor<T>)>,
}

impl<T> Default for Intervention<'_, T> {
    fn default() -> Self {
        Intervention {
            embed_noise: Vec::new(),
            value_patch: None,
            w_out_override: None,
        }
    }
}

impl<'a, T> Intervention<'a, T> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_w_out(layer: usize, w: &'a Tensor<T>) -> Self {
        Intervention {
            w_out_override: Some((layer, w)),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Packing {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub rows: usize,
}

impl Packing {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for sq in seqs {
            starts.push(rows);
            lens.push(sq.as_ref().len());
            rows += sq.as_ref().len();
        }
        Packing { starts, lens, rows }
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    /// Attention probabilities, per sequence then per head, `T×T` each.
    att: Vec<Vec<T>>,
    attn_cat: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    pre: Vec<T>,
    key: Vec<T>,
    value: Vec<T>,
}

/// Everything recorded by [`forward`]; consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub packing: Packing,
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    /// `rows × vocab` logits.
    pub logits: Vec<T>,
    pub vocab: usize,
    patched_layer: Option<(usize, Vec<usize>)>,
    w_out_layer: Option<usize>,
}

/// Per-layer FFN keys (inner activations) and values (FFN outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    /// `keys[layer]` is `rows × d_ffn`.
    pub keys: Vec<Tensor<T>>,
    /// `values[layer]` is `rows × d_model`.
    pub values: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn logits_row(&self, row: usize) -> &[T] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    pub fn key_row(&self, layer: usize, row: usize) -> &[T] {
        let f = self.layers[layer].key.len() / self.packing.rows.max(1);
        &self.layers[layer].key[row * f..(row + 1) * f]
    }

    pub fn value_row(&self, layer: usize, row: usize) -> &[T] {
        let d = self.layers[layer].value.len() / self.packing.rows.max(1);
        &self.layers[layer].value[row * d..(row + 1) * d]
    }

    /// Final-layer residual stream (pre final layer norm), `rows × d_model`.
    pub fn hidden(&self) -> &[T] {
        &self.x_final
    }

    pub fn trace(&self) -> ActivationTrace<T> {
        let n = self.packing.rows;
        ActivationTrace {
            keys: self
                .layers
                .iter()
                .map(|l| Tensor::from_vec(&[n, l.key.len() / n.max(1)], l.key.clone()))
                .collect(),
            values: self
                .layers
                .iter()
                .map(|l| Tensor::from_vec(&[n, l.value.len() / n.max(1)], l.value.clone()))
                .collect(),
        }
    }
}

fn layer_norm<T: Scalar>(
    x: &[T],
    g: &[T],
    b: &[T],
    n: usize,
    d: usize,
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let dn = s::<T>(d as f64);
    let eps = s::<T>(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let m = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        mean[i] = m;
        rstd[i] = r;
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - m) * r * g[j] + b[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    n: usize,
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let dn = s::<T>(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let (m, r) = (mean[i], rstd[i]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - m) * r;
            dg[j] = dg[j] + dyr[j] * xhat;
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum_dxhat = sum_dxhat + dxhat[j];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat;
        }
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - m) * r;
            dxr[j] = dxr[j] + r * (dxhat[j] - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
        }
    }
}

/// `tanh` through `exp`, which is markedly cheaper than libm's `tanhf`.
#[inline]
fn tanh<T: Scalar>(u: T) -> T {
    let two = s::<T>(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = s::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = s::<T>(0.044715);
    let half = s::<T>(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = s::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = s::<T>(0.044715);
    let half = s::<T>(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + s::<T>(3.0) * a * x * x)
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize) {
    let d = bias.len();
    for i in 0..n {
        for (o, b) in out[i * d..(i + 1) * d].iter_mut().zip(bias) {
            *o = *o + *b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], db: &mut [T], n: usize) {
    let d = db.len();
    for i in 0..n {
        for (g, v) in db.iter_mut().zip(&dy[i * d..(i + 1) * d]) {
            *g = *g + *v;
        }
    }
}

pub fn check_lengths<S: AsRef<[u32]>>(cfg: &ModelConfig, seqs: &[S]) -> Result<()> {
    for sq in seqs {
        let len = sq.as_ref().len();
        if len > cfg.context_len {
            return Err(Error::Length {
                len,
                max: cfg.context_len,
            });
        }
    }
    Ok(())
}

/// Run the transformer over a batch of token sequences.
pub fn forward<T: Scalar, S: AsRef<[u32]>>(
    cfg: &ModelConfig,
    params: &Params<T>,
    seqs: &[S],
    iv: &Intervention<'_, T>,
) -> Result<ForwardCache<T>> {
    check_lengths(cfg, seqs)?;
    let packing = Packing::new(seqs);
    let n = packing.rows;
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let vocab = params.tok_emb.rows();
    let tokens: Vec<u32> = seqs.iter().flat_map(|sq| sq.as_ref().iter().copied()).collect();

    let mut x = vec![T::zero(); n * d];
    for (si, sq) in seqs.iter().enumerate() {
        for (pos, &tok) in sq.as_ref().iter().enumerate() {
            let row = packing.starts[si] + pos;
            let xr = &mut x[row * d..(row + 1) * d];
            let te = params.tok_emb.row(tok as usize);
            let pe = params.pos_emb.row(pos);
            for j in 0..d {
                xr[j] = te[j] + pe[j];
            }
        }
    }
    for (row, noise) in &iv.embed_noise {
        for (a, b) in x[row * d..(row + 1) * d].iter_mut().zip(noise) {
            *a = *a + *b;
        }
    }

    let scale = s::<T>(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let x_in = x.clone();
        let mut ln1 = vec![T::zero(); n * d];
        let mut ln1_mean = vec![T::zero(); n];
        let mut ln1_rstd = vec![T::zero(); n];
        layer_norm(&x_in, &lp.ln1_g.data, &lp.ln1_b.data, n, d, &mut ln1, &mut ln1_mean, &mut ln1_rstd);

        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul_bt(&ln1, &lp.w_qkv.data, &mut qkv, n, d, 3 * d, false);
        add_bias(&mut qkv, &lp.b_qkv.data, n);

        let mut attn_cat = vec![T::zero(); n * d];
        let mut att = Vec::with_capacity(packing.lens.len() * h);
        for (&start, &len) in packing.starts.iter().zip(&packing.lens) {
            for hd in 0..h {
                let mut p = vec![T::zero(); len * len];
                if len > 0 {
                    let q = &qkv[start * 3 * d + hd * dh..];
                    let k = &qkv[start * 3 * d + d + hd * dh..];
                    let v = &qkv[start * 3 * d + 2 * d + hd * dh..];
                    T::gemm(len, dh, len, scale, q, 3 * d as isize, 1, k, 1, 3 * d as isize, T::zero(), &mut p, len as isize, 1);
                    for i in 0..len {
                        let row = &mut p[i * len..(i + 1) * len];
                        for x in row[i + 1..].iter_mut() {
                            *x = T::neg_infinity();
                        }
                        softmax_in_place(&mut row[..]);
                    }
                    let out = &mut attn_cat[start * d + hd * dh..];
                    T::gemm(len, len, dh, T::one(), &p, len as isize, 1, v, 3 * d as isize, 1, T::zero(), out, d as isize, 1);
                }
                att.push(p);
            }
        }

        let mut x_mid = x_in.clone();
        let mut proj = vec![T::zero(); n * d];
        matmul_bt(&attn_cat, &lp.w_o.data, &mut proj, n, d, d, false);
        add_bias(&mut proj, &lp.b_o.data, n);
        for (a, b) in x_mid.iter_mut().zip(&proj) {
            *a = *a + *b;
        }

        let mut ln2 = vec![T::zero(); n * d];
        let mut ln2_mean = vec![T::zero(); n];
        let mut ln2_rstd = vec![T::zero(); n];
        layer_norm(&x_mid, &lp.ln2_g.data, &lp.ln2_b.data, n, d, &mut ln2, &mut ln2_mean, &mut ln2_rstd);

        let mut pre = vec![T::zero(); n * f];
        matmul_bt(&ln2, &lp.w_in.data, &mut pre, n, d, f, false);
        add_bias(&mut pre, &lp.b_in.data, n);
        let key: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();

        let w_out = match iv.w_out_override {
            Some((l, w)) if l == li => w,
            _ => &lp.w_out,
        };
        let mut value = vec![T::zero(); n * d];
        matmul_bt(&key, &w_out.data, &mut value, n, f, d, false);
        if let Some((l, patches)) = &iv.value_patch {
            if *l == li {
                for (row, v) in patches {
                    value[row * d..(row + 1) * d].copy_from_slice(v);
                }
            }
        }
        x = x_mid.clone();
        for (a, b) in x.iter_mut().zip(&value) {
            *a = *a + *b;
        }

        layers.push(LayerCache {
            x_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            qkv,
            att,
            attn_cat,
            x_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            pre,
            key,
            value,
        });
    }

    let mut lnf = vec![T::zero(); n * d];
    let mut lnf_mean = vec![T::zero(); n];
    let mut lnf_rstd = vec![T::zero(); n];
    layer_norm(&x, &params.lnf_g.data, &params.lnf_b.data, n, d, &mut lnf, &mut lnf_mean, &mut lnf_rstd);
    let mut logits = vec![T::zero(); n * vocab];
    matmul_bt(&lnf, &params.head.data, &mut logits, n, d, vocab, false);

    Ok(ForwardCache {
        packing,
        tokens,
        layers,
        x_final: x,
        lnf,
        lnf_mean,
        lnf_rstd,
        logits,
        vocab,
        patched_layer: iv
            .value_patch
            .as_ref()
            .map(|(l, p)| (*l, p.iter().map(|(r, _)| *r).collect())),
        w_out_layer: iv.w_out_override.map(|(l, _)| l),
    })
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Params<T>,
    /// Gradient with respect to each patched value row, in patch order.
    pub value_patch: Vec<Vec<T>>,
}

/// Reverse-mode pass from `dlogits` (`rows × vocab`) back to every
/// parameter. When the forward used a `w_out` override, the gradient for that
/// layer's `w_out` slot is the gradient of the override matrix.
pub fn backward<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    w_out_override: Option<&Tensor<T>>,
) -> Gradients<T> {
    let n = cache.packing.rows;
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let vocab = cache.vocab;
    let mut g = params.zeros_like();
    let mut patch_grads = Vec::new();

    matmul_at(dlogits, &cache.lnf, &mut g.head.data, vocab, n, d, true);
    let mut dlnf = vec![T::zero(); n * d];
    matmul(dlogits, &params.head.data, &mut dlnf, n, vocab, d, false);
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(
        &dlnf,
        &cache.x_final,
        &cache.lnf_mean,
        &cache.lnf_rstd,
        &params.lnf_g.data,
        n,
        d,
        &mut dx,
        &mut g.lnf_g.data,
        &mut g.lnf_b.data,
    );

    let scale = s::<T>(1.0 / (dh as f64).sqrt());
    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut g.layers[li];

        // FFN: x_out = x_mid + key · w_outᵀ
        let mut dvalue = dx.clone();
        if let Some((pl, rows)) = &cache.patched_layer {
            if *pl == li {
                for &row in rows {
                    let slot = &mut dvalue[row * d..(row + 1) * d];
                    patch_grads.push(slot.to_vec());
                    slot.iter_mut().for_each(|x| *x = T::zero());
                }
            }
        }
        let w_out = match (cache.w_out_layer, w_out_override) {
            (Some(l), Some(w)) if l == li => w,
            _ => &lp.w_out,
        };
        matmul_at(&dvalue, &lc.key, &mut gl.w_out.data, d, n, f, true);
        let mut dkey = vec![T::zero(); n * f];
        matmul(&dvalue, &w_out.data, &mut dkey, n, d, f, false);
        for (dk, &p) in dkey.iter_mut().zip(&lc.pre) {
            *dk = *dk * gelu_grad(p);
        }
        matmul_at(&dkey, &lc.ln2, &mut gl.w_in.data, f, n, d, true);
        bias_grad(&dkey, &mut gl.b_in.data, n);
        let mut dln2 = vec![T::zero(); n * d];
        matmul(&dkey, &lp.w_in.data, &mut dln2, n, f, d, false);
        let mut dx_mid = dx;
        layer_norm_backward(
            &dln2,
            &lc.x_mid,
            &lc.ln2_mean,
            &lc.ln2_rstd,
            &lp.ln2_g.data,
            n,
            d,
            &mut dx_mid,
            &mut gl.ln2_g.data,
            &mut gl.ln2_b.data,
        );

        // Attention: x_mid = x_in + attn_cat · w_oᵀ + b_o
        matmul_at(&dx_mid, &lc.attn_cat, &mut gl.w_o.data, d, n, d, true);
        bias_grad(&dx_mid, &mut gl.b_o.data, n);
        let mut dcat = vec![T::zero(); n * d];
        matmul(&dx_mid, &lp.w_o.data, &mut dcat, n, d, d, false);

        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut ai = 0;
        for (&start, &len) in cache.packing.starts.iter().zip(&cache.packing.lens) {
            for hd in 0..h {
                let p = &lc.att[ai];
                ai += 1;
                if len == 0 {
                    continue;
                }
                let qoff = start * 3 * d + hd * dh;
                let koff = qoff + d;
                let voff = qoff + 2 * d;
                let dout = &dcat[start * d + hd * dh..];
                // dP = dO · Vᵀ
                let mut dp = vec![T::zero(); len * len];
                T::gemm(len, dh, len, T::one(), dout, d as isize, 1, &lc.qkv[voff..], 1, 3 * d as isize, T::zero(), &mut dp, len as isize, 1);
                // dV = Pᵀ · dO
                T::gemm(len, len, dh, T::one(), p, 1, len as isize, dout, d as isize, 1, T::one(), &mut dqkv[voff..], 3 * d as isize, 1);
                // softmax backward, then the score scale
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dotp: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for j in 0..len {
                        dr[j] = pr[j] * (dr[j] - dotp) * scale;
                    }
                }
                // dQ = dS · K ; dK = dSᵀ · Q
                T::gemm(len, len, dh, T::one(), &dp, len as isize, 1, &lc.qkv[koff..], 3 * d as isize, 1, T::one(), &mut dqkv[qoff..], 3 * d as isize, 1);
                T::gemm(len, len, dh, T::one(), &dp, 1, len as isize, &lc.qkv[qoff..], 3 * d as isize, 1, T::one(), &mut dqkv[koff..], 3 * d as isize, 1);
            }
        }
        matmul_at(&dqkv, &lc.ln1, &mut gl.w_qkv.data, 3 * d, n, d, true);
        bias_grad(&dqkv, &mut gl.b_qkv.data, n);
        let mut dln1 = vec![T::zero(); n * d];
        matmul(&dqkv, &lp.w_qkv.data, &mut dln1, n, 3 * d, d, false);
        let mut dx_in = dx_mid;
        layer_norm_backward(
            &dln1,
            &lc.x_in,
            &lc.ln1_mean,
            &lc.ln1_rstd,
            &lp.ln1_g.data,
            n,
            d,
            &mut dx_in,
            &mut gl.ln1_g.data,
            &mut gl.ln1_b.data,
        );
        dx = dx_in;
    }

    for (si, &start) in cache.packing.starts.iter().enumerate() {
        for pos in 0..cache.packing.lens[si] {
            let row = start + pos;
            let tok = cache.tokens[row] as usize;
            let dr = &dx[row * d..(row + 1) * d];
            for (a, b) in g.tok_emb.row_mut(tok).iter_mut().zip(dr) {
                *a = *a + *b;
            }
            for (a, b) in g.pos_emb.row_mut(pos).iter_mut().zip(dr) {
                *a = *a + *b;
            }
        }
    }
    Gradients {
        params: g,
        value_patch: patch_grads,
    }
}
