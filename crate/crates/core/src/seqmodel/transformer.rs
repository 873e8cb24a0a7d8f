//! Decoder-only transformer trained from scratch.
//!
//! Causal self-attention with learned positional embeddings, RMSNorm,
//! SiLU feed-forward blocks, and a zero-initialized output projection so an
//! untrained model emits uniform logits. Parameters live in one flat vector
//! addressed through a layout table, which keeps the optimizer, checkpoints
//! and finite-difference checks straightforward.
//!
//! Incremental decoding ([`DecodeState`]) performs bit-identical arithmetic
//! to the training forward pass for the positions it computes: every
//! position-local op is shared, and attention accumulates over earlier
//! positions in the same order.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: std::ops::Range<usize>,
    pos_emb: std::ops::Range<usize>,
    layers: Vec<LayerLayout>,
    lnf_g: std::ops::Range<usize>,
    w_out: std::ops::Range<usize>,
    b_out: std::ops::Range<usize>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    ln1_g: std::ops::Range<usize>,
    wq: std::ops::Range<usize>,
    wk: std::ops::Range<usize>,
    wv: std::ops::Range<usize>,
    wo: std::ops::Range<usize>,
    ln2_g: std::ops::Range<usize>,
    w_up: std::ops::Range<usize>,
    w_down: std::ops::Range<usize>,
}

fn build_layout(cfg: &TransformerConfig) -> Layout {
    let d = cfg.d_model;
    let mut at = 0usize;
    let mut take = |n: usize| {
        let r = at..at + n;
        at += n;
        r
    };
    let tok_emb = take(cfg.vocab * d);
    let pos_emb = take(cfg.max_seq * d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerLayout {
            ln1_g: take(d),
            wq: take(d * d),
            wk: take(d * d),
            wv: take(d * d),
            wo: take(d * d),
            ln2_g: take(d),
            w_up: take(4 * d * d),
            w_down: take(d * 4 * d),
        });
    }
    let lnf_g = take(d);
    let w_out = take(cfg.vocab * d);
    let b_out = take(cfg.vocab);
    Layout {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        w_out,
        b_out,
        total: at,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl Transformer {
    /// Seeded init. Embeddings and attention weights are small Gaussians;
    /// output projections of each residual branch and the vocabulary head
    /// start at zero, so the untrained model computes uniform logits.
    pub fn seeded(cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = build_layout(&cfg);
        let mut params = vec![0.0; layout.total];
        let d = cfg.d_model;
        {
            let mut fill = |range: std::ops::Range<usize>, std: f64| {
                for i in range {
                    let g: f64 = StandardNormal.sample(rng);
                    params[i] = g * std;
                }
            };
            fill(layout.tok_emb.clone(), 0.02);
            fill(layout.pos_emb.clone(), 0.02);
            let w_std = 1.0 / (d as f64).sqrt();
            for l in &layout.layers {
                fill(l.wq.clone(), w_std);
                fill(l.wk.clone(), w_std);
                fill(l.wv.clone(), w_std);
                // wo, w_down stay zero: residual stream starts as embeddings
                fill(l.w_up.clone(), w_std);
            }
            // w_out, b_out stay zero: uniform logits at init
        }
        for l in &layout.layers {
            params[l.ln1_g.clone()].iter_mut().for_each(|v| *v = 1.0);
            params[l.ln2_g.clone()].iter_mut().for_each(|v| *v = 1.0);
        }
        params[layout.lnf_g.clone()].iter_mut().for_each(|v| *v = 1.0);
        Ok(Transformer { cfg, params, layout })
    }

    /// Rebuild from a flat parameter vector (checkpoint load).
    pub fn from_params(cfg: TransformerConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = build_layout(&cfg);
        if params.len() != layout.total {
            return Err(Error::Schema(format!(
                "parameter blob has {} values, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Transformer { cfg, params, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }
}

// ---------------------------------------------------------------------------
// shared position-local primitives
// ---------------------------------------------------------------------------

/// y = W x with W stored row-major [out x in].
fn matvec_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (o, yo) in out.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *yo = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// RMSNorm with gain; returns 1/rms for the backward pass.
fn rmsnorm_into(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(gain) {
        *o = gi * xi * ri;
    }
    ri
}

#[inline]
fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

#[inline]
fn silu_deriv(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

/// Compute the residual-stream vector after all layers at one position,
/// given cached keys/values for positions `< t` and this position's token.
/// Appends this position's k/v to the caches. Shared by prefill and step so
/// incremental decoding is arithmetic-identical to the batch forward.
#[allow(clippy::too_many_arguments)]
fn advance_position(
    model: &Transformer,
    token: usize,
    t: usize,
    k_cache: &mut [Vec<f64>],
    v_cache: &mut [Vec<f64>],
) -> Vec<f64> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let tok = &model.p(&model.layout.tok_emb)[token * d..(token + 1) * d];
    let pos = &model.p(&model.layout.pos_emb)[t * d..(t + 1) * d];
    let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();

    let mut xn = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut attn = vec![0.0; d];
    let mut ctx = vec![0.0; d];
    for (l, lay) in model.layout.layers.iter().enumerate() {
        rmsnorm_into(&x, model.p(&lay.ln1_g), &mut xn);
        matvec_into(model.p(&lay.wq), &xn, &mut q);
        let kv_at = k_cache[l].len();
        debug_assert_eq!(kv_at, t * d);
        k_cache[l].resize(kv_at + d, 0.0);
        v_cache[l].resize(kv_at + d, 0.0);
        {
            let (k_new, v_new) = (&mut k_cache[l][kv_at..], &mut v_cache[l][kv_at..]);
            matvec_into(model.p(&lay.wk), &xn, k_new);
            matvec_into(model.p(&lay.wv), &xn, v_new);
        }

        ctx.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..heads {
            let hr = h * hd..(h + 1) * hd;
            let qh = &q[hr.clone()];
            // scores over positions 0..=t in ascending order
            let mut scores = Vec::with_capacity(t + 1);
            let mut max_s = f64::NEG_INFINITY;
            for j in 0..=t {
                let kj = &k_cache[l][j * d..][hr.clone()];
                let s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                if s > max_s {
                    max_s = s;
                }
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_s).exp();
                denom += *s;
            }
            let ctx_h = &mut ctx[hr.clone()];
            for (j, &w) in scores.iter().enumerate() {
                let alpha = w / denom;
                let vj = &v_cache[l][j * d..][h * hd..(h + 1) * hd];
                for (c, &vv) in ctx_h.iter_mut().zip(vj) {
                    *c += alpha * vv;
                }
            }
        }
        matvec_into(model.p(&lay.wo), &ctx, &mut attn);
        for (xi, &a) in x.iter_mut().zip(&attn) {
            *xi += a;
        }

        rmsnorm_into(&x, model.p(&lay.ln2_g), &mut xn);
        let mut u = vec![0.0; 4 * d];
        matvec_into(model.p(&lay.w_up), &xn, &mut u);
        u.iter_mut().for_each(|v| *v = silu(*v));
        let mut mlp = vec![0.0; d];
        matvec_into(model.p(&lay.w_down), &u, &mut mlp);
        for (xi, &m) in x.iter_mut().zip(&mlp) {
            *xi += m;
        }
    }
    x
}

fn logits_at(model: &Transformer, x: &[f64]) -> Vec<f64> {
    let d = model.cfg.d_model;
    let mut xn = vec![0.0; d];
    rmsnorm_into(x, model.p(&model.layout.lnf_g), &mut xn);
    let mut logits = vec![0.0; model.cfg.vocab];
    matvec_into(model.p(&model.layout.w_out), &xn, &mut logits);
    for (lo, &b) in logits.iter_mut().zip(model.p(&model.layout.b_out)) {
        *lo += b;
    }
    logits
}

// ---------------------------------------------------------------------------
// incremental decoding
// ---------------------------------------------------------------------------

/// Keys/values of already-processed positions, one pair of growing buffers
/// per layer. Cloning a state forks a decoding branch.
#[derive(Debug, Clone)]
pub struct DecodeState {
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Transformer {
    pub fn new_state(&self) -> DecodeState {
        DecodeState {
            k_cache: vec![Vec::new(); self.cfg.layers],
            v_cache: vec![Vec::new(); self.cfg.layers],
            len: 0,
        }
    }

    /// Process one token at the next position; returns the logits that
    /// predict the following token.
    pub fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if token >= self.cfg.vocab {
            return Err(Error::OutOfRange {
                what: "token",
                got: token,
                limit: self.cfg.vocab,
            });
        }
        if state.len >= self.cfg.max_seq {
            return Err(Error::OutOfRange {
                what: "sequence position",
                got: state.len,
                limit: self.cfg.max_seq,
            });
        }
        let x = advance_position(self, token, state.len, &mut state.k_cache, &mut state.v_cache);
        state.len += 1;
        Ok(logits_at(self, &x))
    }

    /// Feed a whole prefix; returns the state and the final-position logits.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(DecodeState, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(Error::Empty("prefill tokens"));
        }
        let mut state = self.new_state();
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.step(&mut state, t)?;
        }
        Ok((state, logits))
    }
}

// ---------------------------------------------------------------------------
// training forward/backward
// ---------------------------------------------------------------------------

struct LayerCache {
    x_in: Vec<f64>,    // T x d
    ln1_ri: Vec<f64>,  // T
    xn1: Vec<f64>,     // T x d
    q: Vec<f64>,       // T x d
    k: Vec<f64>,       // T x d
    v: Vec<f64>,       // T x d
    att: Vec<f64>,     // heads x T x T (row t holds weights over j <= t)
    ctx: Vec<f64>,     // T x d
    x_mid: Vec<f64>,   // T x d (after attention residual)
    ln2_ri: Vec<f64>,  // T
    xn2: Vec<f64>,     // T x d
    u_pre: Vec<f64>,   // T x 4d (pre-activation)
    u_act: Vec<f64>,   // T x 4d
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>, // T x d
    lnf_ri: Vec<f64>,  // T
    xnf: Vec<f64>,     // T x d
    logits: Vec<f64>,  // T x V
}

impl Transformer {
    fn forward_cached(&self, tokens: &[usize]) -> Result<ForwardCache> {
        let cfg = &self.cfg;
        let (d, heads, hd) = (cfg.d_model, cfg.heads, cfg.head_dim());
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if t_len > cfg.max_seq {
            return Err(Error::OutOfRange {
                what: "sequence length",
                got: t_len,
                limit: cfg.max_seq,
            });
        }
        for &tok in tokens {
            if tok >= cfg.vocab {
                return Err(Error::OutOfRange {
                    what: "token",
                    got: tok,
                    limit: cfg.vocab,
                });
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = &self.p(&self.layout.tok_emb)[tok * d..(tok + 1) * d];
            let pe = &self.p(&self.layout.pos_emb)[t * d..(t + 1) * d];
            for i in 0..d {
                x[t * d + i] = te[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for lay in &self.layout.layers {
            let x_in = x.clone();
            let mut ln1_ri = vec![0.0; t_len];
            let mut xn1 = vec![0.0; t_len * d];
            for t in 0..t_len {
                ln1_ri[t] = rmsnorm_into(
                    &x_in[t * d..(t + 1) * d],
                    self.p(&lay.ln1_g),
                    &mut xn1[t * d..(t + 1) * d],
                );
            }
            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            for t in 0..t_len {
                let xt = &xn1[t * d..(t + 1) * d];
                matvec_into(self.p(&lay.wq), xt, &mut q[t * d..(t + 1) * d]);
                matvec_into(self.p(&lay.wk), xt, &mut k[t * d..(t + 1) * d]);
                matvec_into(self.p(&lay.wv), xt, &mut v[t * d..(t + 1) * d]);
            }

            let mut att = vec![0.0; heads * t_len * t_len];
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..heads {
                let hr = h * hd..(h + 1) * hd;
                for t in 0..t_len {
                    let qh = &q[t * d..][hr.clone()];
                    let mut max_s = f64::NEG_INFINITY;
                    let mut scores = Vec::with_capacity(t + 1);
                    for j in 0..=t {
                        let kj = &k[j * d..][hr.clone()];
                        let s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        if s > max_s {
                            max_s = s;
                        }
                        scores.push(s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max_s).exp();
                        denom += *s;
                    }
                    let ctx_h = &mut ctx[t * d..][hr.clone()];
                    for (j, &w) in scores.iter().enumerate() {
                        let alpha = w / denom;
                        att[(h * t_len + t) * t_len + j] = alpha;
                        let vj = &v[j * d..][hr.clone()];
                        for (c, &vv) in ctx_h.iter_mut().zip(vj) {
                            *c += alpha * vv;
                        }
                    }
                }
            }

            let mut x_mid = x_in.clone();
            let mut attn_t = vec![0.0; d];
            for t in 0..t_len {
                matvec_into(self.p(&lay.wo), &ctx[t * d..(t + 1) * d], &mut attn_t);
                for i in 0..d {
                    x_mid[t * d + i] += attn_t[i];
                }
            }

            let mut ln2_ri = vec![0.0; t_len];
            let mut xn2 = vec![0.0; t_len * d];
            for t in 0..t_len {
                ln2_ri[t] = rmsnorm_into(
                    &x_mid[t * d..(t + 1) * d],
                    self.p(&lay.ln2_g),
                    &mut xn2[t * d..(t + 1) * d],
                );
            }
            let mut u_pre = vec![0.0; t_len * 4 * d];
            let mut u_act = vec![0.0; t_len * 4 * d];
            for t in 0..t_len {
                matvec_into(
                    self.p(&lay.w_up),
                    &xn2[t * d..(t + 1) * d],
                    &mut u_pre[t * 4 * d..(t + 1) * 4 * d],
                );
                for i in 0..4 * d {
                    u_act[t * 4 * d + i] = silu(u_pre[t * 4 * d + i]);
                }
            }
            let mut x_out = x_mid.clone();
            let mut mlp_t = vec![0.0; d];
            for t in 0..t_len {
                matvec_into(
                    self.p(&lay.w_down),
                    &u_act[t * 4 * d..(t + 1) * 4 * d],
                    &mut mlp_t,
                );
                for i in 0..d {
                    x_out[t * d + i] += mlp_t[i];
                }
            }

            layers.push(LayerCache {
                x_in,
                ln1_ri,
                xn1,
                q,
                k,
                v,
                att,
                ctx,
                x_mid,
                ln2_ri,
                xn2,
                u_pre,
                u_act,
            });
            x = x_out;
        }

        let x_final = x;
        let mut lnf_ri = vec![0.0; t_len];
        let mut xnf = vec![0.0; t_len * d];
        for t in 0..t_len {
            lnf_ri[t] = rmsnorm_into(
                &x_final[t * d..(t + 1) * d],
                self.p(&self.layout.lnf_g),
                &mut xnf[t * d..(t + 1) * d],
            );
        }
        let vocab = cfg.vocab;
        let mut logits = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            matvec_into(
                self.p(&self.layout.w_out),
                &xnf[t * d..(t + 1) * d],
                &mut logits[t * vocab..(t + 1) * vocab],
            );
            for (lo, &b) in logits[t * vocab..(t + 1) * vocab]
                .iter_mut()
                .zip(self.p(&self.layout.b_out))
            {
                *lo += b;
            }
        }

        Ok(ForwardCache {
            layers,
            x_final,
            lnf_ri,
            xnf,
            logits,
        })
    }

    /// Logits for every position (training path; no KV reuse).
    pub fn full_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(tokens)?;
        let v = self.cfg.vocab;
        Ok((0..tokens.len())
            .map(|t| cache.logits[t * v..(t + 1) * v].to_vec())
            .collect())
    }

    /// Summed next-token cross-entropy of `tokens` (position t predicts
    /// token t+1) and its gradient over all parameters.
    /// Returns (sum_ce, prediction_count, grad).
    pub fn loss_and_grad(&self, tokens: &[usize]) -> Result<(f64, usize, Vec<f64>)> {
        let cache = self.forward_cached(tokens)?;
        let cfg = &self.cfg;
        let (d, heads, hd, vocab) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.vocab);
        let t_len = tokens.len();
        let n_pred = t_len - 1;
        if n_pred == 0 {
            return Err(Error::Precondition(
                "sequence needs at least 2 tokens to form a prediction".into(),
            ));
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut grad = vec![0.0; self.layout.total];

        // cross-entropy and dlogits
        let mut sum_ce = 0.0;
        let mut dlogits = vec![0.0; t_len * vocab];
        for t in 0..n_pred {
            let target = tokens[t + 1];
            let row = &cache.logits[t * vocab..(t + 1) * vocab];
            let max_l = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&l| (l - max_l).exp()).sum();
            sum_ce += -(row[target] - max_l - denom.ln());
            let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
            for (i, &l) in row.iter().enumerate() {
                drow[i] = (l - max_l).exp() / denom;
            }
            drow[target] -= 1.0;
        }

        // output head
        let mut dx = vec![0.0; t_len * d]; // grad wrt x_final
        {
            let w_out = self.p(&self.layout.w_out);
            let lnf_g = self.p(&self.layout.lnf_g);
            for t in 0..n_pred {
                let drow = &dlogits[t * vocab..(t + 1) * vocab];
                let xnf_t = &cache.xnf[t * d..(t + 1) * d];
                // dW_out, db_out, dxnf
                let mut dxnf = vec![0.0; d];
                for (o, &dy) in drow.iter().enumerate() {
                    if dy != 0.0 {
                        let wrow = &w_out[o * d..(o + 1) * d];
                        let grow = &mut grad[self.layout.w_out.clone()][o * d..(o + 1) * d];
                        for i in 0..d {
                            grow[i] += dy * xnf_t[i];
                            dxnf[i] += dy * wrow[i];
                        }
                    }
                    grad[self.layout.b_out.clone()][o] += dy;
                }
                // rmsnorm backward (final)
                let x_t = &cache.x_final[t * d..(t + 1) * d];
                let ri = cache.lnf_ri[t];
                let mut dot = 0.0;
                for i in 0..d {
                    grad[self.layout.lnf_g.clone()][i] += dxnf[i] * x_t[i] * ri;
                    dot += dxnf[i] * lnf_g[i] * x_t[i];
                }
                let c = ri * ri * ri * dot / d as f64;
                let dx_t = &mut dx[t * d..(t + 1) * d];
                for i in 0..d {
                    dx_t[i] += dxnf[i] * lnf_g[i] * ri - c * x_t[i];
                }
            }
        }

        // layers in reverse
        for (l_idx, lay) in self.layout.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l_idx];

            // ---- MLP block ----
            let mut dx_mid = dx.clone(); // residual path
            let mut dxn2 = vec![0.0; t_len * d];
            {
                let w_down = self.p(&lay.w_down);
                let w_up = self.p(&lay.w_up);
                for t in 0..t_len {
                    let dy_t = &dx[t * d..(t + 1) * d];
                    let u_act_t = &lc.u_act[t * 4 * d..(t + 1) * 4 * d];
                    let mut du = vec![0.0; 4 * d];
                    for (o, &dy) in dy_t.iter().enumerate() {
                        if dy != 0.0 {
                            let wrow = &w_down[o * 4 * d..(o + 1) * 4 * d];
                            let grow =
                                &mut grad[lay.w_down.clone()][o * 4 * d..(o + 1) * 4 * d];
                            for i in 0..4 * d {
                                grow[i] += dy * u_act_t[i];
                                du[i] += dy * wrow[i];
                            }
                        }
                    }
                    let u_pre_t = &lc.u_pre[t * 4 * d..(t + 1) * 4 * d];
                    for i in 0..4 * d {
                        du[i] *= silu_deriv(u_pre_t[i]);
                    }
                    let xn2_t = &lc.xn2[t * d..(t + 1) * d];
                    let dxn2_t = &mut dxn2[t * d..(t + 1) * d];
                    for (o, &duo) in du.iter().enumerate() {
                        if duo != 0.0 {
                            let wrow = &w_up[o * d..(o + 1) * d];
                            let grow = &mut grad[lay.w_up.clone()][o * d..(o + 1) * d];
                            for i in 0..d {
                                grow[i] += duo * xn2_t[i];
                                dxn2_t[i] += duo * wrow[i];
                            }
                        }
                    }
                }
            }
            // rmsnorm2 backward into dx_mid
            {
                let g = self.p(&lay.ln2_g);
                for t in 0..t_len {
                    let x_t = &lc.x_mid[t * d..(t + 1) * d];
                    let ri = lc.ln2_ri[t];
                    let dxn_t = &dxn2[t * d..(t + 1) * d];
                    let mut dot = 0.0;
                    for i in 0..d {
                        grad[lay.ln2_g.clone()][i] += dxn_t[i] * x_t[i] * ri;
                        dot += dxn_t[i] * g[i] * x_t[i];
                    }
                    let c = ri * ri * ri * dot / d as f64;
                    let dm = &mut dx_mid[t * d..(t + 1) * d];
                    for i in 0..d {
                        dm[i] += dxn_t[i] * g[i] * ri - c * x_t[i];
                    }
                }
            }

            // ---- attention block ----
            let mut dx_in = dx_mid.clone(); // residual path
            let mut dctx = vec![0.0; t_len * d];
            {
                let wo = self.p(&lay.wo);
                for t in 0..t_len {
                    let dy_t = &dx_mid[t * d..(t + 1) * d];
                    let ctx_t = &lc.ctx[t * d..(t + 1) * d];
                    let dctx_t = &mut dctx[t * d..(t + 1) * d];
                    for (o, &dy) in dy_t.iter().enumerate() {
                        if dy != 0.0 {
                            let wrow = &wo[o * d..(o + 1) * d];
                            let grow = &mut grad[lay.wo.clone()][o * d..(o + 1) * d];
                            for i in 0..d {
                                grow[i] += dy * ctx_t[i];
                                dctx_t[i] += dy * wrow[i];
                            }
                        }
                    }
                }
            }

            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            for h in 0..heads {
                let hr = h * hd..(h + 1) * hd;
                for t in 0..t_len {
                    let dctx_h = &dctx[t * d..][hr.clone()];
                    let att_row = &lc.att[(h * t_len + t) * t_len..][..=t];
                    // dalpha and dv
                    let mut dalpha = vec![0.0; t + 1];
                    for j in 0..=t {
                        let vj = &lc.v[j * d..][hr.clone()];
                        dalpha[j] = dctx_h.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let alpha = att_row[j];
                        if alpha != 0.0 {
                            let dvj = &mut dv[j * d..][hr.clone()];
                            for (dvv, &c) in dvj.iter_mut().zip(dctx_h) {
                                *dvv += alpha * c;
                            }
                        }
                    }
                    // softmax backward
                    let inner: f64 = (0..=t).map(|j| att_row[j] * dalpha[j]).sum();
                    // dscore -> dq, dk
                    let qh: Vec<f64> = lc.q[t * d..][hr.clone()].to_vec();
                    let dqh = &mut dq[t * d..][hr.clone()];
                    for j in 0..=t {
                        let dscore = att_row[j] * (dalpha[j] - inner) * scale;
                        if dscore != 0.0 {
                            let kj = &lc.k[j * d..][hr.clone()];
                            for (dqv, &kv) in dqh.iter_mut().zip(kj) {
                                *dqv += dscore * kv;
                            }
                            let dkj = &mut dk[j * d..][hr.clone()];
                            for (dkv, &qv) in dkj.iter_mut().zip(&qh) {
                                *dkv += dscore * qv;
                            }
                        }
                    }
                }
            }

            // project q/k/v grads back to xn1 and weights
            let mut dxn1 = vec![0.0; t_len * d];
            {
                let wq = self.p(&lay.wq);
                let wk = self.p(&lay.wk);
                let wv = self.p(&lay.wv);
                for t in 0..t_len {
                    let xn_t = &lc.xn1[t * d..(t + 1) * d];
                    let dxn_t = &mut dxn1[t * d..(t + 1) * d];
                    for (dvec, w, range) in [
                        (&dq, wq, &lay.wq),
                        (&dk, wk, &lay.wk),
                        (&dv, wv, &lay.wv),
                    ] {
                        let dy_t = &dvec[t * d..(t + 1) * d];
                        for (o, &dy) in dy_t.iter().enumerate() {
                            if dy != 0.0 {
                                let wrow = &w[o * d..(o + 1) * d];
                                let grow = &mut grad[range.clone()][o * d..(o + 1) * d];
                                for i in 0..d {
                                    grow[i] += dy * xn_t[i];
                                    dxn_t[i] += dy * wrow[i];
                                }
                            }
                        }
                    }
                }
            }
            // rmsnorm1 backward into dx_in
            {
                let g = self.p(&lay.ln1_g);
                for t in 0..t_len {
                    let x_t = &lc.x_in[t * d..(t + 1) * d];
                    let ri = lc.ln1_ri[t];
                    let dxn_t = &dxn1[t * d..(t + 1) * d];
                    let mut dot = 0.0;
                    for i in 0..d {
                        grad[lay.ln1_g.clone()][i] += dxn_t[i] * x_t[i] * ri;
                        dot += dxn_t[i] * g[i] * x_t[i];
                    }
                    let c = ri * ri * ri * dot / d as f64;
                    let dxin_t = &mut dx_in[t * d..(t + 1) * d];
                    for i in 0..d {
                        dxin_t[i] += dxn_t[i] * g[i] * ri - c * x_t[i];
                    }
                }
            }
            dx = dx_in;
        }

        // embeddings
        for (t, &tok) in tokens.iter().enumerate() {
            let dx_t = &dx[t * d..(t + 1) * d];
            let te = &mut grad[self.layout.tok_emb.clone()][tok * d..(tok + 1) * d];
            for i in 0..d {
                te[i] += dx_t[i];
            }
            let pe = &mut grad[self.layout.pos_emb.clone()][t * d..(t + 1) * d];
            for i in 0..d {
                pe[i] += dx_t[i];
            }
        }

        Ok((sum_ce, n_pred, grad))
    }

    /// Summed next-token cross-entropy without gradients.
    pub fn loss_only(&self, tokens: &[usize]) -> Result<(f64, usize)> {
        let cache = self.forward_cached(tokens)?;
        let vocab = self.cfg.vocab;
        let n_pred = tokens.len() - 1;
        let mut sum_ce = 0.0;
        for t in 0..n_pred {
            let target = tokens[t + 1];
            let row = &cache.logits[t * vocab..(t + 1) * vocab];
            let max_l = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&l| (l - max_l).exp()).sum();
            sum_ce += -(row[target] - max_l - denom.ln());
        }
        Ok((sum_ce, n_pred))
    }
}
