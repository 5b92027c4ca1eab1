//! Forward and reverse-mode passes of the causal transformer.
//!
//! A batch of `B` windows of length `I` is processed as `B·I` rows of width
//! `W = 4d`. Linear maps run on all rows at once; attention runs per window
//! and head with a causal mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::*;
use crate::corpus::WindowedSample;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Scalar};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `B·I` feature rows (day, slot, location, event), window-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBatch {
    pub seq_len: usize,
    pub rows: Vec<[u32; 4]>,
}

impl FeatureBatch {
    pub fn single(window: &[[u32; 4]]) -> Self {
        Self {
            seq_len: window.len(),
            rows: window.to_vec(),
        }
    }

    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [[u32; 4]]>) -> Self {
        let mut rows = Vec::new();
        let mut seq_len = None;
        for w in windows {
            let len = *seq_len.get_or_insert(w.len());
            assert_eq!(len, w.len(), "windows in a batch must share a length");
            rows.extend_from_slice(w);
        }
        Self {
            seq_len: seq_len.unwrap_or(0),
            rows,
        }
    }

    pub fn from_samples(samples: &[WindowedSample]) -> Self {
        Self::from_windows(samples.iter().map(|s| s.features.as_slice()))
    }

    pub fn batch_size(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.rows.len() / self.seq_len
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Keep the activations needed by [`backward`].
    pub cache: bool,
    pub dropout: Option<Dropout>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training(dropout: Option<Dropout>) -> Self {
        Self { cache: true, dropout }
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// B×H×I×I attention probabilities (upper triangle zero)
    p: Vec<T>,
    att: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    m: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    rows: Vec<[u32; 4]>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    head_u: Vec<T>,
    head_g: Vec<T>,
}

/// Output of a forward pass: logits (`B·I × N_B`), the final hidden states
/// `H_t` (`B·I × 4d`) and, optionally, the caches for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub logits: Vec<T>,
    pub hidden: Vec<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn logits_row(&self, r: usize) -> &[T] {
        &self.logits[r * self.n_classes..(r + 1) * self.n_classes]
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Row-wise softmax of the logits, in f64.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.len());
        for r in 0..self.rows() {
            out.extend(softmax_f64(self.logits_row(r)));
        }
        out
    }
}

pub(crate) fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let hi = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - hi).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let three_a = T::from_f64_lossy(3.0 * GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three_a * x * x)
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], width: usize, out: &mut [T]) -> LnCache<T> {
    let rows = x.len() / width;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::from_usize(width).unwrap();
    let eps = T::from_f64_lossy(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (xr[j] - mean) * rs;
            xhat[r * width + j] = h;
            out[r * width + j] = h * gain[j] + bias[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates gain/bias grads and adds the input gradient into `dx`.
fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    width: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let rows = dout.len() / width;
    let n = T::from_usize(width).unwrap();
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let o = r * width;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..width {
            let g = dout[o + j];
            let h = cache.xhat[o + j];
            dgain[j] += g * h;
            dbias[j] += g;
            let d = g * gain[j];
            dxhat[j] = d;
            mean_d += d;
            mean_dx += d * h;
        }
        mean_d /= n;
        mean_dx /= n;
        let rs = cache.rstd[r];
        for j in 0..width {
            dx[o + j] += rs * (dxhat[j] - mean_d - cache.xhat[o + j] * mean_dx);
        }
    }
}

fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    let w = bias.len();
    for row in x.chunks_mut(w) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn col_sum_acc<T: Scalar>(x: &[T], out: &mut [T]) {
    let w = out.len();
    for row in x.chunks(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn check_finite<T: Scalar>(x: &[T], layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Row `j` of the output is concat(E_l[loc], E_w[day], E_t[slot], E_e[event]) + E_pos[j].
pub fn embed_features<T: Scalar>(params: &Parameters<T>, batch: &FeatureBatch) -> Result<Vec<T>> {
    let cfg = &params.config;
    let v = &cfg.vocab;
    if batch.seq_len > cfg.max_len {
        return Err(Error::IndexOutOfRange(format!(
            "window length {} exceeds max_len {}",
            batch.seq_len, cfg.max_len
        )));
    }
    if batch.seq_len == 0 || batch.rows.len() % batch.seq_len != 0 {
        return Err(Error::IndexOutOfRange("empty or ragged batch".into()));
    }
    let d = cfg.d;
    let w = cfg.width();
    let tables = [
        (params.get(EMB_LOC), 2usize, v.n_l, "loc"),
        (params.get(EMB_DAY), 0, v.n_d, "day"),
        (params.get(EMB_SLOT), 1, v.n_t, "slot"),
        (params.get(EMB_EVENT), 3, v.n_e, "event"),
    ];
    let pos = params.get(EMB_POS);
    let mut x = vec![T::zero(); batch.rows.len() * w];
    for (r, feat) in batch.rows.iter().enumerate() {
        let out = &mut x[r * w..(r + 1) * w];
        for (s, (table, col, size, name)) in tables.iter().enumerate() {
            let idx = feat[*col] as usize;
            if idx >= *size {
                return Err(Error::IndexOutOfRange(format!("{name} index {idx} >= {size}")));
            }
            out[s * d..(s + 1) * d].copy_from_slice(table.row(idx));
        }
        let p = pos.row(r % batch.seq_len);
        for (o, pv) in out.iter_mut().zip(p) {
            *o += *pv;
        }
    }
    Ok(x)
}

struct LayerRefs<'a, T> {
    ln1_g: &'a [T],
    ln1_b: &'a [T],
    wq: &'a [T],
    wk: &'a [T],
    wv: &'a [T],
    wo: &'a [T],
    ln2_g: &'a [T],
    ln2_b: &'a [T],
    w_in: &'a [T],
    b_in: &'a [T],
    w_out: &'a [T],
    b_out: &'a [T],
}

fn layer_refs<T: Scalar>(params: &Parameters<T>, l: usize) -> LayerRefs<'_, T> {
    let g = |leaf: &str| params.get(&layer_name(l, leaf)).data.as_slice();
    LayerRefs {
        ln1_g: g("ln1.gain"),
        ln1_b: g("ln1.bias"),
        wq: g("attn.w_q"),
        wk: g("attn.w_k"),
        wv: g("attn.w_v"),
        wo: g("attn.w_o"),
        ln2_g: g("ln2.gain"),
        ln2_b: g("ln2.bias"),
        w_in: g("ffn.w_in"),
        b_in: g("ffn.b_in"),
        w_out: g("ffn.w_out"),
        b_out: g("ffn.b_out"),
    }
}

/// Causal multi-head attention core: returns (concat head outputs, probs).
fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], batch: usize, seq: usize, heads: usize, width: usize) -> (Vec<T>, Vec<T>) {
    let hd = width / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut att = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * width + h * hd..][..hd];
                let mut hi = T::neg_infinity();
                for j in 0..=i {
                    let kj = &k[(b * seq + j) * width + h * hd..][..hd];
                    let s = qi.iter().zip(kj).map(|(a, c)| *a * *c).sum::<T>() * scale;
                    scores[j] = s;
                    if s > hi {
                        hi = s;
                    }
                }
                let mut z = T::zero();
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - hi).exp();
                    z += *s;
                }
                let out = &mut att[(b * seq + i) * width + h * hd..][..hd];
                for j in 0..=i {
                    let pij = scores[j] / z;
                    probs[pbase + i * seq + j] = pij;
                    let vj = &v[(b * seq + j) * width + h * hd..][..hd];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pij * *vv;
                    }
                }
            }
        }
    }
    (att, probs)
}

pub fn forward<T: Scalar>(params: &Parameters<T>, batch: &FeatureBatch, opts: ForwardOptions) -> Result<ForwardTrace<T>> {
    let cfg = params.config;
    let w = cfg.width();
    let f = cfg.ffn_hidden();
    let seq = batch.seq_len;
    let mut x = embed_features(params, batch)?;
    let rows = batch.rows.len();
    let bsz = rows / seq;

    let mut rng = opts.dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
    let rate = opts.dropout.map_or(0.0, |d| d.rate);
    let use_dropout = rate > 0.0 && rng.is_some();

    let emb_mask = if use_dropout {
        let m = dropout_mask::<T>(rng.as_mut().unwrap(), x.len(), rate);
        for (v, s) in x.iter_mut().zip(&m) {
            *v *= *s;
        }
        Some(m)
    } else {
        None
    };

    let mut layer_caches = Vec::with_capacity(if opts.cache { cfg.n_layers } else { 0 });
    for l in 0..cfg.n_layers {
        let p = layer_refs(params, l);
        let mut a = vec![T::zero(); rows * w];
        let ln1 = layer_norm(&x, p.ln1_g, p.ln1_b, w, &mut a);
        let mut q = vec![T::zero(); rows * w];
        let mut k = vec![T::zero(); rows * w];
        let mut v = vec![T::zero(); rows * w];
        matmul(&a, p.wq, &mut q, rows, w, w);
        matmul(&a, p.wk, &mut k, rows, w, w);
        matmul(&a, p.wv, &mut v, rows, w, w);
        let (att, probs) = attention(&q, &k, &v, bsz, seq, cfg.n_heads, w);
        let mut y = vec![T::zero(); rows * w];
        matmul(&att, p.wo, &mut y, rows, w, w);
        let attn_mask = if use_dropout {
            let m = dropout_mask::<T>(rng.as_mut().unwrap(), y.len(), rate);
            for (v, s) in y.iter_mut().zip(&m) {
                *v *= *s;
            }
            Some(m)
        } else {
            None
        };
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += *yv;
        }

        let mut m = vec![T::zero(); rows * w];
        let ln2 = layer_norm(&x, p.ln2_g, p.ln2_b, w, &mut m);
        let mut u = vec![T::zero(); rows * f];
        matmul(&m, p.w_in, &mut u, rows, w, f);
        add_bias(&mut u, p.b_in);
        let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        let mut z = vec![T::zero(); rows * w];
        matmul(&g, p.w_out, &mut z, rows, f, w);
        add_bias(&mut z, p.b_out);
        let ffn_mask = if use_dropout {
            let mk = dropout_mask::<T>(rng.as_mut().unwrap(), z.len(), rate);
            for (v, s) in z.iter_mut().zip(&mk) {
                *v *= *s;
            }
            Some(mk)
        } else {
            None
        };
        for (xv, zv) in x.iter_mut().zip(&z) {
            *xv += *zv;
        }
        check_finite(&x, l)?;

        if opts.cache {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                p: probs,
                att,
                attn_mask,
                ln2,
                m,
                u,
                g,
                ffn_mask,
            });
        }
    }

    let nb = cfg.vocab.n_b;
    let mut logits = vec![T::zero(); rows * nb];
    let (head_u, head_g) = if cfg.head_hidden > 0 {
        let kh = cfg.head_hidden;
        let mut u = vec![T::zero(); rows * kh];
        matmul(&x, &params.get(HEAD_W1).data, &mut u, rows, w, kh);
        add_bias(&mut u, &params.get(HEAD_B1).data);
        let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        matmul(&g, &params.get(HEAD_W2).data, &mut logits, rows, kh, nb);
        (u, g)
    } else {
        matmul(&x, &params.get(HEAD_W2).data, &mut logits, rows, w, nb);
        (Vec::new(), Vec::new())
    };
    add_bias(&mut logits, &params.get(HEAD_B2).data);
    check_finite(&logits, cfg.n_layers)?;

    let cache = opts.cache.then(|| Cache {
        rows: batch.rows.clone(),
        emb_mask,
        layers: layer_caches,
        head_u,
        head_g,
    });
    Ok(ForwardTrace {
        batch: bsz,
        seq_len: seq,
        n_classes: nb,
        logits,
        hidden: x,
        cache,
    })
}

/// Accumulates exact gradients of `Σ dlogits ⊙ logits` into `grads`.
pub fn backward_into<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &Parameters<T>,
    dlogits: &[T],
    grads: &mut Parameters<T>,
) -> Result<()> {
    let cache = trace.cache.as_ref().ok_or(Error::MissingCache)?;
    let cfg = params.config;
    let w = cfg.width();
    let f = cfg.ffn_hidden();
    let rows = trace.rows();
    let seq = trace.seq_len;
    let nb = cfg.vocab.n_b;
    assert_eq!(dlogits.len(), rows * nb, "dlogits shape");

    col_sum_acc(dlogits, &mut grads.get_mut(HEAD_B2).data);
    let mut dx = vec![T::zero(); rows * w];
    if cfg.head_hidden > 0 {
        let kh = cfg.head_hidden;
        matmul_at_b_acc(&cache.head_g, dlogits, &mut grads.get_mut(HEAD_W2).data, rows, kh, nb);
        let mut dg = vec![T::zero(); rows * kh];
        matmul_a_bt(dlogits, &params.get(HEAD_W2).data, &mut dg, rows, nb, kh);
        for (d, u) in dg.iter_mut().zip(&cache.head_u) {
            *d *= gelu_grad(*u);
        }
        col_sum_acc(&dg, &mut grads.get_mut(HEAD_B1).data);
        matmul_at_b_acc(&trace.hidden, &dg, &mut grads.get_mut(HEAD_W1).data, rows, w, kh);
        matmul_a_bt(&dg, &params.get(HEAD_W1).data, &mut dx, rows, kh, w);
    } else {
        matmul_at_b_acc(&trace.hidden, dlogits, &mut grads.get_mut(HEAD_W2).data, rows, w, nb);
        matmul_a_bt(dlogits, &params.get(HEAD_W2).data, &mut dx, rows, nb, w);
    }

    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let bsz = trace.batch;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

    for l in (0..cfg.n_layers).rev() {
        let c = &cache.layers[l];
        let p = layer_refs(params, l);
        let name = |leaf: &str| layer_name(l, leaf);

        // FFN branch
        let mut dz = dx.clone();
        if let Some(mask) = &c.ffn_mask {
            for (d, s) in dz.iter_mut().zip(mask) {
                *d *= *s;
            }
        }
        col_sum_acc(&dz, &mut grads.get_mut(&name("ffn.b_out")).data);
        matmul_at_b_acc(&c.g, &dz, &mut grads.get_mut(&name("ffn.w_out")).data, rows, f, w);
        let mut du = vec![T::zero(); rows * f];
        matmul_a_bt(&dz, p.w_out, &mut du, rows, w, f);
        for (d, u) in du.iter_mut().zip(&c.u) {
            *d *= gelu_grad(*u);
        }
        col_sum_acc(&du, &mut grads.get_mut(&name("ffn.b_in")).data);
        matmul_at_b_acc(&c.m, &du, &mut grads.get_mut(&name("ffn.w_in")).data, rows, w, f);
        let mut dm = vec![T::zero(); rows * w];
        matmul_a_bt(&du, p.w_in, &mut dm, rows, f, w);
        {
            let mut dgain = std::mem::take(&mut grads.get_mut(&name("ln2.gain")).data);
            let mut dbias = std::mem::take(&mut grads.get_mut(&name("ln2.bias")).data);
            layer_norm_backward(&dm, &c.ln2, p.ln2_g, w, &mut dgain, &mut dbias, &mut dx);
            grads.get_mut(&name("ln2.gain")).data = dgain;
            grads.get_mut(&name("ln2.bias")).data = dbias;
        }

        // attention branch
        let mut dy = dx.clone();
        if let Some(mask) = &c.attn_mask {
            for (d, s) in dy.iter_mut().zip(mask) {
                *d *= *s;
            }
        }
        matmul_at_b_acc(&c.att, &dy, &mut grads.get_mut(&name("attn.w_o")).data, rows, w, w);
        let mut datt = vec![T::zero(); rows * w];
        matmul_a_bt(&dy, p.wo, &mut datt, rows, w, w);

        let mut dq = vec![T::zero(); rows * w];
        let mut dk = vec![T::zero(); rows * w];
        let mut dv = vec![T::zero(); rows * w];
        let mut dp = vec![T::zero(); seq];
        for b in 0..bsz {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let oi = (b * seq + i) * w + h * hd;
                    let dout = &datt[oi..oi + hd];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let oj = (b * seq + j) * w + h * hd;
                        let pij = c.p[pbase + i * seq + j];
                        let vj = &c.v[oj..oj + hd];
                        dp[j] = dout.iter().zip(vj).map(|(a, v)| *a * *v).sum();
                        dot += pij * dp[j];
                        for (dvv, dd) in dv[oj..oj + hd].iter_mut().zip(dout) {
                            *dvv += pij * *dd;
                        }
                    }
                    for j in 0..=i {
                        let oj = (b * seq + j) * w + h * hd;
                        let ds = c.p[pbase + i * seq + j] * (dp[j] - dot) * scale;
                        for t in 0..hd {
                            dq[oi + t] += ds * c.k[oj + t];
                            dk[oj + t] += ds * c.q[oi + t];
                        }
                    }
                }
            }
        }
        matmul_at_b_acc(&c.a, &dq, &mut grads.get_mut(&name("attn.w_q")).data, rows, w, w);
        matmul_at_b_acc(&c.a, &dk, &mut grads.get_mut(&name("attn.w_k")).data, rows, w, w);
        matmul_at_b_acc(&c.a, &dv, &mut grads.get_mut(&name("attn.w_v")).data, rows, w, w);
        let mut da = vec![T::zero(); rows * w];
        let mut tmp = vec![T::zero(); rows * w];
        matmul_a_bt(&dq, p.wq, &mut da, rows, w, w);
        matmul_a_bt(&dk, p.wk, &mut tmp, rows, w, w);
        for (a, t) in da.iter_mut().zip(&tmp) {
            *a += *t;
        }
        matmul_a_bt(&dv, p.wv, &mut tmp, rows, w, w);
        for (a, t) in da.iter_mut().zip(&tmp) {
            *a += *t;
        }
        {
            let mut dgain = std::mem::take(&mut grads.get_mut(&name("ln1.gain")).data);
            let mut dbias = std::mem::take(&mut grads.get_mut(&name("ln1.bias")).data);
            layer_norm_backward(&da, &c.ln1, p.ln1_g, w, &mut dgain, &mut dbias, &mut dx);
            grads.get_mut(&name("ln1.gain")).data = dgain;
            grads.get_mut(&name("ln1.bias")).data = dbias;
        }
    }

    if let Some(mask) = &cache.emb_mask {
        for (d, s) in dx.iter_mut().zip(mask) {
            *d *= *s;
        }
    }
    let d = cfg.d;
    for (r, feat) in cache.rows.iter().enumerate() {
        let g = &dx[r * w..(r + 1) * w];
        let pos = grads.get_mut(EMB_POS).row_mut(r % seq);
        for (o, v) in pos.iter_mut().zip(g) {
            *o += *v;
        }
        for (s, (name, col)) in [(EMB_LOC, 2usize), (EMB_DAY, 0), (EMB_SLOT, 1), (EMB_EVENT, 3)]
            .into_iter()
            .enumerate()
        {
            let row = grads.get_mut(name).row_mut(feat[col] as usize);
            for (o, v) in row.iter_mut().zip(&g[s * d..(s + 1) * d]) {
                *o += *v;
            }
        }
    }
    Ok(())
}

pub fn backward<T: Scalar>(trace: &ForwardTrace<T>, params: &Parameters<T>, dlogits: &[T]) -> Result<Parameters<T>> {
    let mut grads = params.zeros_like();
    backward_into(trace, params, dlogits, &mut grads)?;
    Ok(grads)
}

/// Per-position top-`k` behaviors with probabilities, descending; ties go to
/// the lower behavior index.
pub fn predict_topk<T: Scalar>(trace: &ForwardTrace<T>, k: usize) -> Result<Vec<Vec<(u32, f64)>>> {
    if k == 0 || k > trace.n_classes {
        return Err(Error::InvalidConfig(format!(
            "k = {k} outside [1, {}]",
            trace.n_classes
        )));
    }
    Ok((0..trace.rows())
        .map(|r| {
            let probs = softmax_f64(trace.logits_row(r));
            let logits = trace.logits_row(r);
            let mut order: Vec<u32> = (0..trace.n_classes as u32).collect();
            order.sort_by(|&a, &b| {
                logits[b as usize]
                    .partial_cmp(&logits[a as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order.truncate(k);
            order.into_iter().map(|b| (b, probs[b as usize])).collect()
        })
        .collect())
}

/// Index of the largest logit per row, lower index on ties.
pub fn argmax_rows<T: Scalar>(trace: &ForwardTrace<T>) -> Vec<u32> {
    (0..trace.rows())
        .map(|r| {
            let row = trace.logits_row(r);
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabSizes;
    use crate::net::{init_model, ModelConfig};
    use crate::tensor::Precision;
    use rand::Rng;

    fn tiny(d: usize, layers: usize, heads: usize, head_hidden: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_layers: layers,
            n_heads: heads,
            max_len: 5,
            head_hidden,
            ffn_mult: 2,
            vocab: VocabSizes { n_d: 7, n_t: 6, n_l: 4, n_e: 9, n_b: 5 },
            dropout: 0.0,
            precision: Precision::Double,
        }
    }

    /// Scales the init so that attention and GELU are far from linear.
    fn params(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
        let mut p = init_model::<f64>(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        for t in p.tensors.values_mut() {
            for v in t.data.iter_mut() {
                *v = *v * 25.0 + rng.random_range(-0.1..0.1);
            }
        }
        p
    }

    fn window(rng: &mut ChaCha8Rng, len: usize) -> Vec<[u32; 4]> {
        (0..len)
            .map(|_| [rng.random_range(0..7), rng.random_range(0..6), rng.random_range(0..4), rng.random_range(0..9)])
            .collect()
    }

    // --- straight-line reference implementation over nested Vecs ---
    type M = Vec<Vec<f64>>;

    fn mat(p: &Parameters<f64>, name: &str) -> M {
        let t = p.get(name);
        if t.shape.len() == 1 {
            return vec![t.data.clone()];
        }
        t.data.chunks(t.shape[1]).map(|c| c.to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| (0..row.len()).map(|k| row[k] * b[k][j]).sum()).collect())
            .collect()
    }

    fn ln(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
            })
            .collect()
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn reference_forward(p: &Parameters<f64>, w: &[[u32; 4]]) -> M {
        let cfg = p.config;
        let (el, ew, et, ee, ep) = (
            mat(p, "embed.loc"),
            mat(p, "embed.day"),
            mat(p, "embed.slot"),
            mat(p, "embed.event"),
            mat(p, "embed.pos"),
        );
        let mut x: M = w
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let mut row = el[f[2] as usize].clone();
                row.extend(&ew[f[0] as usize]);
                row.extend(&et[f[1] as usize]);
                row.extend(&ee[f[3] as usize]);
                row.iter().zip(&ep[j]).map(|(a, b)| a + b).collect()
            })
            .collect();
        for l in 0..cfg.n_layers {
            let g = |s: &str| mat(p, &format!("layer.{l}.{s}"));
            let a = ln(&x, &g("ln1.gain")[0], &g("ln1.bias")[0]);
            let (q, k, v) = (mm(&a, &g("attn.w_q")), mm(&a, &g("attn.w_k")), mm(&a, &g("attn.w_v")));
            let hd = cfg.head_dim();
            let mut att = vec![vec![0.0; cfg.width()]; w.len()];
            for h in 0..cfg.n_heads {
                for i in 0..w.len() {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| (0..hd).map(|t| q[i][h * hd + t] * k[j][h * hd + t]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..=i {
                        let pij = (s[j] - mx).exp() / z;
                        for t in 0..hd {
                            att[i][h * hd + t] += pij * v[j][h * hd + t];
                        }
                    }
                }
            }
            let y = mm(&att, &g("attn.w_o"));
            for (xr, yr) in x.iter_mut().zip(&y) {
                for (a, b) in xr.iter_mut().zip(yr) {
                    *a += b;
                }
            }
            let m = ln(&x, &g("ln2.gain")[0], &g("ln2.bias")[0]);
            let bin = g("ffn.b_in")[0].clone();
            let u: M = mm(&m, &g("ffn.w_in"))
                .into_iter()
                .map(|r| r.iter().zip(&bin).map(|(a, b)| gelu_ref(a + b)).collect())
                .collect();
            let bout = g("ffn.b_out")[0].clone();
            let z = mm(&u, &g("ffn.w_out"));
            for (xr, zr) in x.iter_mut().zip(&z) {
                for ((a, b), c) in xr.iter_mut().zip(zr).zip(&bout) {
                    *a += b + c;
                }
            }
        }
        let hidden = if cfg.head_hidden > 0 {
            let b1 = mat(p, "head.b1")[0].clone();
            mm(&x, &mat(p, "head.w1"))
                .into_iter()
                .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu_ref(a + b)).collect())
                .collect()
        } else {
            x
        };
        let b2 = mat(p, "head.b2")[0].clone();
        mm(&hidden, &mat(p, "head.w2"))
            .into_iter()
            .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
            .collect()
    }

    #[test]
    fn matches_reference_forward() {
        for (layers, heads, hh) in [(1, 1, 6), (2, 2, 0)] {
            let cfg = tiny(4, layers, heads, hh);
            let p = params(&cfg, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let w = window(&mut rng, 3);
            let t = forward(&p, &FeatureBatch::single(&w), ForwardOptions::inference()).unwrap();
            let r = reference_forward(&p, &w);
            for i in 0..3 {
                for b in 0..5 {
                    assert!((t.logits_row(i)[b] - r[i][b]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn embedding_layout_and_locality() {
        let cfg = tiny(8, 1, 2, 6);
        let p = params(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = window(&mut rng, 3);
        let e = embed_features(&p, &FeatureBatch::single(&w)).unwrap();
        assert_eq!(e.len(), 3 * 32);
        // first block of row 1 is the location embedding plus position
        let loc = p.get(EMB_LOC).row(w[1][2] as usize);
        let pos = p.get(EMB_POS).row(1);
        for j in 0..8 {
            assert_eq!(e[32 + j], loc[j] + pos[j]);
        }
        let mut w2 = w.clone();
        w2[2][3] = (w2[2][3] + 1) % 9;
        let e2 = embed_features(&p, &FeatureBatch::single(&w2)).unwrap();
        assert_eq!(e[..64], e2[..64]);
        assert_ne!(e[64..], e2[64..]);
    }

    #[test]
    fn identical_rows_without_position() {
        let cfg = tiny(4, 0, 1, 0);
        let mut p = params(&cfg, 2);
        p.get_mut(EMB_POS).data.iter_mut().for_each(|v| *v = 0.0);
        let w = vec![[1, 2, 3, 4]; 3];
        let e = embed_features(&p, &FeatureBatch::single(&w)).unwrap();
        assert_eq!(e[..16], e[16..32]);
        assert_eq!(e[..16], e[32..]);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let p = params(&tiny(4, 1, 1, 0), 0);
        let err = forward(&p, &FeatureBatch::single(&[[0, 0, 4, 0]]), ForwardOptions::inference()).unwrap_err();
        assert!(err.to_string().contains("loc"));
        let long = vec![[0, 0, 0, 0]; 6];
        assert!(forward(&p, &FeatureBatch::single(&long), ForwardOptions::inference()).is_err());
    }

    #[test]
    fn causal_under_random_perturbations() {
        let cfg = tiny(4, 2, 2, 6);
        let p = params(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let w = window(&mut rng, 5);
            let j = rng.random_range(0..5);
            let mut w2 = w.clone();
            w2[j] = window(&mut rng, 1)[0];
            let a = forward(&p, &FeatureBatch::single(&w), ForwardOptions::inference()).unwrap();
            let b = forward(&p, &FeatureBatch::single(&w2), ForwardOptions::inference()).unwrap();
            for i in 0..j {
                assert_eq!(a.logits_row(i), b.logits_row(i));
            }
        }
    }

    #[test]
    fn zero_depth_is_positionwise() {
        let cfg = tiny(4, 0, 1, 6);
        let p = params(&cfg, 1);
        let w = vec![[1, 1, 1, 1], [2, 3, 1, 5], [0, 0, 0, 0]];
        let mut w2 = w.clone();
        w2[0] = [6, 5, 3, 8];
        w2[2] = [4, 4, 2, 2];
        let a = forward(&p, &FeatureBatch::single(&w), ForwardOptions::inference()).unwrap();
        let b = forward(&p, &FeatureBatch::single(&w2), ForwardOptions::inference()).unwrap();
        assert_eq!(a.logits_row(1), b.logits_row(1));
    }

    #[test]
    fn batching_matches_single_windows() {
        let cfg = tiny(4, 2, 2, 6);
        let p = params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ws: Vec<_> = (0..3).map(|_| window(&mut rng, 4)).collect();
        let batch = FeatureBatch::from_windows(ws.iter().map(|w| w.as_slice()));
        let all = forward(&p, &batch, ForwardOptions::inference()).unwrap();
        for (b, w) in ws.iter().enumerate() {
            let one = forward(&p, &FeatureBatch::single(w), ForwardOptions::inference()).unwrap();
            for i in 0..4 {
                for (x, y) in one.logits_row(i).iter().zip(all.logits_row(b * 4 + i)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let p = init_model::<f32>(&tiny(8, 2, 2, 6), 3).unwrap();
        let t = forward(&p, &FeatureBatch::single(&[[1, 2, 3, 4], [0, 0, 0, 0]]), ForwardOptions::inference()).unwrap();
        for r in t.probabilities().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn objective(p: &Parameters<f64>, batch: &FeatureBatch, c: &[f64], drop: Option<Dropout>) -> f64 {
        let t = forward(p, batch, ForwardOptions { cache: false, dropout: drop }).unwrap();
        t.logits.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(cfg: ModelConfig, drop: Option<Dropout>) {
        let p = params(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ws: Vec<_> = (0..2).map(|_| window(&mut rng, 4)).collect();
        let batch = FeatureBatch::from_windows(ws.iter().map(|w| w.as_slice()));
        let c: Vec<f64> = (0..8 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = forward(&p, &batch, ForwardOptions { cache: true, dropout: drop }).unwrap();
        let g = backward(&t, &p, &c).unwrap();
        let h = 1e-5;
        for (name, tensor) in &p.tensors {
            let mut worst: f64 = 0.0;
            for i in 0..tensor.len() {
                let mut plus = p.clone();
                plus.get_mut(name).data[i] += h;
                let mut minus = p.clone();
                minus.get_mut(name).data[i] -= h;
                let fd = (objective(&plus, &batch, &c, drop) - objective(&minus, &batch, &c, drop)) / (2.0 * h);
                let an = g.get(name).data[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{name}: relative error {worst}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny(4, 2, 2, 6), None);
        check_gradients(tiny(4, 1, 1, 0), None);
    }

    #[test]
    fn gradients_with_dropout_masks() {
        check_gradients(tiny(4, 1, 2, 6), Some(Dropout { rate: 0.3, seed: 5 }));
    }

    #[test]
    fn zero_upstream_and_unused_rows() {
        let cfg = tiny(4, 1, 2, 6);
        let p = params(&cfg, 1);
        let w = vec![[0, 1, 2, 3], [1, 1, 2, 4]];
        let t = forward(&p, &FeatureBatch::single(&w), ForwardOptions::training(None)).unwrap();
        let g = backward(&t, &p, &vec![0.0; 10]).unwrap();
        assert_eq!(g.global_norm(), 0.0);
        let g = backward(&t, &p, &vec![1.0; 10]).unwrap();
        let ev = g.get(EMB_EVENT);
        for e in [0, 1, 2, 5, 6, 7, 8] {
            assert!(ev.row(e).iter().all(|&v| v == 0.0));
        }
        assert!(ev.row(3).iter().any(|&v| v != 0.0));
        assert!(g.get(EMB_POS).row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_cache() {
        let p = params(&tiny(4, 1, 1, 0), 1);
        let t = forward(&p, &FeatureBatch::single(&[[0, 0, 0, 0]]), ForwardOptions::inference()).unwrap();
        assert!(matches!(backward(&t, &p, &[0.0; 5]), Err(Error::MissingCache)));
    }

    #[test]
    fn topk_ordering_and_ties() {
        let trace = ForwardTrace::<f64> {
            batch: 1,
            seq_len: 2,
            n_classes: 3,
            logits: vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0],
            hidden: vec![],
            cache: None,
        };
        let top = predict_topk(&trace, 2).unwrap();
        assert_eq!(top[0].iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 0]);
        let all = predict_topk(&trace, 3).unwrap();
        assert_eq!(all[1].iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(predict_topk(&trace, 0).is_err());
        assert!(predict_topk(&trace, 4).is_err());
        assert_eq!(argmax_rows(&trace), vec![1, 0]);
    }

    #[test]
    fn nonfinite_reports_layer() {
        let cfg = tiny(4, 2, 1, 0);
        let mut p = params(&cfg, 1);
        p.get_mut("layer.1.ffn.b_out").data[0] = f64::INFINITY;
        let err = forward(&p, &FeatureBatch::single(&[[0, 0, 0, 0]]), ForwardOptions::inference()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1 }));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let p = init_model::<f32>(&tiny(8, 2, 2, 6), 3).unwrap();
        let b = FeatureBatch::single(&[[1, 2, 3, 4], [0, 5, 1, 8], [6, 0, 0, 2]]);
        let d = Some(Dropout { rate: 0.2, seed: 4 });
        let x = forward(&p, &b, ForwardOptions::training(d)).unwrap();
        let y = forward(&p, &b, ForwardOptions::training(d)).unwrap();
        assert!(x.logits.iter().zip(&y.logits).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
