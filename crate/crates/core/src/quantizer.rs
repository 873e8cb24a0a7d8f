//! Per-aspect vector quantization.
//!
//! Each aspect space gets an encoder/decoder MLP pair and a learnable
//! codebook. Encoder outputs are snapped to their nearest code; gradients
//! cross the quantization step with the straight-through estimator, the
//! codebook moves under the codebook-loss gradient, and the commitment term
//! keeps encoder outputs near their codes. All three loss terms use plain
//! (unsquared) L2 norms.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{Adam, Mlp, MlpGrads};
use crate::rng::{seed_rng, shuffle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqConfig {
    pub codebook_size: usize,
    /// Latent code dimension d_e; encoder/decoder hidden width is 2 * d_e.
    pub code_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            codebook_size: 64,
            code_dim: 32,
            beta: 0.25,
            epochs: 60,
            learning_rate: 2e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VqTrainLog {
    /// Mean reconstruction loss per epoch.
    pub epoch_reconstruction: Vec<f64>,
    pub dead_code_reinits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqQuantizer {
    pub aspect: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `codebook_size x code_dim`, one code vector per row.
    pub codebook: Matrix,
    pub beta: f64,
    pub train_log: VqTrainLog,
}

/// Per-article discrete representation: one code index per aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleCodes {
    pub article_id: String,
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Index of the nearest codebook row to `h`, lowest index on ties.
pub fn nearest_code(h: &[f64], codebook: &Matrix) -> Result<usize> {
    if codebook.rows == 0 {
        return Err(Error::Empty("codebook"));
    }
    if h.len() != codebook.cols {
        return Err(Error::DimensionMismatch {
            expected: codebook.cols,
            got: h.len(),
        });
    }
    if h.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in encoder output".into()));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (j, code) in codebook.iter_rows().enumerate() {
        let d: f64 = h
            .iter()
            .zip(code)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok(best)
}

impl VqQuantizer {
    pub fn codebook_size(&self) -> usize {
        self.codebook.rows
    }

    pub fn code_dim(&self) -> usize {
        self.codebook.cols
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim
    }

    /// Encode and snap one aspect embedding to its code index.
    pub fn quantize(&self, z: &[f64]) -> Result<usize> {
        let h = self.encoder.infer(z);
        nearest_code(&h, &self.codebook)
    }
}

/// The three-term loss at a single input, with plain L2 norms:
/// `|z - D(e)| + |sg[E(z)] - e| + beta |E(z) - sg[e]|`.
pub fn vqvae_loss(z: &[f64], q: &VqQuantizer) -> Result<VqLossParts> {
    if z.len() != q.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: q.input_dim(),
            got: z.len(),
        });
    }
    let h = q.encoder.infer(z);
    let idx = nearest_code(&h, &q.codebook)?;
    let e = q.codebook.row(idx);
    let decoded = q.decoder.infer(e);
    let reconstruction = linalg::l2_distance(z, &decoded);
    let quant_gap = linalg::l2_distance(&h, e);
    let codebook = quant_gap;
    let commitment = q.beta * quant_gap;
    Ok(VqLossParts {
        total: reconstruction + codebook + commitment,
        reconstruction,
        codebook,
        commitment,
    })
}

struct VqGrads {
    encoder: MlpGrads,
    decoder: MlpGrads,
    codebook: Vec<f64>,
}

/// Analytic gradients of the three-term loss at one input.
///
/// Reconstruction reaches the encoder through the straight-through
/// estimator (the gradient at the decoder input is copied onto the encoder
/// output), the codebook term moves only the selected code, and the
/// commitment term moves only the encoder.
fn vq_backward(q: &VqQuantizer, z: &[f64], grads: &mut VqGrads, include_commit: bool) -> VqLossParts {
    let (h, enc_cache) = q.encoder.forward(z);
    let idx = nearest_code(&h, &q.codebook).expect("validated input");
    let e = q.codebook.row(idx);
    let (decoded, dec_cache) = q.decoder.forward(e);

    let diff: Vec<f64> = z.iter().zip(&decoded).map(|(a, b)| a - b).collect();
    let recon_norm = linalg::norm(&diff);
    let quant_diff: Vec<f64> = h.iter().zip(e).map(|(a, b)| a - b).collect();
    let quant_norm = linalg::norm(&quant_diff);

    // d recon / d decoded = -(z - decoded)/|z - decoded|
    let mut dh = vec![0.0; h.len()];
    if recon_norm > 1e-12 {
        let d_decoded: Vec<f64> = diff.iter().map(|v| -v / recon_norm).collect();
        let d_dec_input = q.decoder.backward(e, &dec_cache, &d_decoded, &mut grads.decoder);
        // straight-through: copy the decoder-input gradient onto h
        dh.copy_from_slice(&d_dec_input);
    }
    if quant_norm > 1e-12 {
        // codebook term: d|h_sg - e|/d e = -(h - e)/|h - e|
        let row = &mut grads.codebook[idx * q.codebook.cols..(idx + 1) * q.codebook.cols];
        for (g, &d) in row.iter_mut().zip(&quant_diff) {
            *g += -d / quant_norm;
        }
        if include_commit {
            // commitment: d beta |h - e_sg| / d h = beta (h - e)/|h - e|
            for (dhi, &d) in dh.iter_mut().zip(&quant_diff) {
                *dhi += q.beta * d / quant_norm;
            }
        }
    }
    q.encoder.backward(z, &enc_cache, &dh, &mut grads.encoder);

    VqLossParts {
        total: recon_norm + quant_norm + q.beta * quant_norm,
        reconstruction: recon_norm,
        codebook: quant_norm,
        commitment: q.beta * quant_norm,
    }
}

/// Train a quantizer on one aspect's embedding matrix. Deterministic under
/// `cfg.seed`; codes unused for a full epoch are re-seeded from a random
/// encoder output (except after the final epoch).
pub fn train_vqvae(embeddings: &Matrix, aspect: usize, cfg: &VqConfig) -> Result<VqQuantizer> {
    let n = embeddings.rows;
    let d = embeddings.cols;
    if n == 0 {
        return Err(Error::Empty("embedding matrix"));
    }
    if cfg.codebook_size < 2 {
        return Err(Error::Config("codebook needs at least 2 entries".into()));
    }
    if cfg.codebook_size > n {
        log::warn!(
            "aspect {aspect}: codebook size {} exceeds article count {n}; codebook cannot be fully utilized",
            cfg.codebook_size
        );
    }

    let hidden = 2 * cfg.code_dim;
    let mut rng = seed_rng(cfg.seed);
    let encoder = Mlp::seeded(d, hidden, cfg.code_dim, &mut rng);
    let decoder = Mlp::seeded(cfg.code_dim, hidden, d, &mut rng);

    // init codes from encoder outputs of shuffled articles, with jitter so
    // duplicates split
    let mut init_order: Vec<usize> = (0..n).collect();
    shuffle(&mut init_order, &mut rng);
    let mut codebook = Matrix::zeros(cfg.codebook_size, cfg.code_dim);
    for j in 0..cfg.codebook_size {
        let row_idx = init_order[j % n];
        let h = encoder.infer(embeddings.row(row_idx));
        let dst = codebook.row_mut(j);
        for (dv, hv) in dst.iter_mut().zip(&h) {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            *dv = hv + 1e-3 * jitter;
        }
    }

    let mut q = VqQuantizer {
        aspect,
        encoder,
        decoder,
        codebook,
        beta: cfg.beta,
        train_log: VqTrainLog::default(),
    };
    if cfg.epochs == 0 {
        return Ok(q);
    }

    let sizes = [
        q.encoder.w1.data.len(),
        q.encoder.b1.len(),
        q.encoder.w2.data.len(),
        q.encoder.b2.len(),
        q.decoder.w1.data.len(),
        q.decoder.b1.len(),
        q.decoder.w2.data.len(),
        q.decoder.b2.len(),
        q.codebook.data.len(),
    ];
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let batch = cfg.batch_size.max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut used = vec![false; cfg.codebook_size];
        for chunk in order.chunks(batch) {
            let mut grads = VqGrads {
                encoder: q.encoder.zero_grads(),
                decoder: q.decoder.zero_grads(),
                codebook: vec![0.0; q.codebook.data.len()],
            };
            for &i in chunk {
                let z = embeddings.row(i);
                used[q.quantize(z)?] = true;
                vq_backward(&q, z, &mut grads, true);
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads
                .encoder
                .w1
                .iter_mut()
                .chain(grads.encoder.b1.iter_mut())
                .chain(grads.encoder.w2.iter_mut())
                .chain(grads.encoder.b2.iter_mut())
                .chain(grads.decoder.w1.iter_mut())
                .chain(grads.decoder.b1.iter_mut())
                .chain(grads.decoder.w2.iter_mut())
                .chain(grads.decoder.b2.iter_mut())
                .chain(grads.codebook.iter_mut())
            {
                *g *= inv;
            }
            adam.step(
                &mut [
                    &mut q.encoder.w1.data,
                    &mut q.encoder.b1,
                    &mut q.encoder.w2.data,
                    &mut q.encoder.b2,
                    &mut q.decoder.w1.data,
                    &mut q.decoder.b1,
                    &mut q.decoder.w2.data,
                    &mut q.decoder.b2,
                    &mut q.codebook.data,
                ],
                &[
                    &grads.encoder.w1,
                    &grads.encoder.b1,
                    &grads.encoder.w2,
                    &grads.encoder.b2,
                    &grads.decoder.w1,
                    &grads.decoder.b1,
                    &grads.decoder.w2,
                    &grads.decoder.b2,
                    &grads.codebook,
                ],
            );
        }
        // checkpoint evaluation on the full data; also collect per-article
        // quantization gaps for dead-code restarts
        let mut checkpoint_recon = 0.0;
        let mut quant_gap = vec![0.0; n];
        for i in 0..n {
            let parts = vqvae_loss(embeddings.row(i), &q)?;
            checkpoint_recon += parts.reconstruction;
            quant_gap[i] = parts.codebook * parts.codebook;
        }
        q.train_log.epoch_reconstruction.push(checkpoint_recon / n as f64);

        // Revive dead codes at the encoder output of a random article,
        // weighted by quantization error so the restart claims points that
        // were poorly served. The final epoch's result is left untouched.
        if epoch + 1 < cfg.epochs {
            for j in 0..cfg.codebook_size {
                if !used[j] {
                    let total: f64 = quant_gap.iter().sum();
                    let pick = if total > 0.0 {
                        let mut dart = rng.gen::<f64>() * total;
                        let mut chosen = n - 1;
                        for (i, &w) in quant_gap.iter().enumerate() {
                            dart -= w;
                            if dart <= 0.0 {
                                chosen = i;
                                break;
                            }
                        }
                        chosen
                    } else {
                        rng.gen_range(0..n)
                    };
                    let h = q.encoder.infer(embeddings.row(pick));
                    q.codebook.row_mut(j).copy_from_slice(&h);
                    // the revived code now serves this article exactly
                    quant_gap[pick] = 0.0;
                    q.train_log.dead_code_reinits += 1;
                }
            }
        }
    }
    Ok(q)
}

/// Map one article (its base embedding row) to its K-aspect code bundle.
pub fn quantize_article(
    article_id: &str,
    base_row: &[f64],
    encoders: &[crate::aspect::AspectEncoder],
    quantizers: &[VqQuantizer],
) -> Result<ArticleCodes> {
    if encoders.len() != quantizers.len() {
        return Err(Error::Precondition(format!(
            "{} encoders vs {} quantizers",
            encoders.len(),
            quantizers.len()
        )));
    }
    let mut codes = Vec::with_capacity(encoders.len());
    for (enc, q) in encoders.iter().zip(quantizers) {
        let z = crate::aspect::embed_aspect(enc, base_row)?;
        codes.push(q.quantize(&z)?);
    }
    Ok(ArticleCodes {
        article_id: article_id.to_string(),
        codes,
    })
}

/// Decode a code index back into its aspect-space vector.
pub fn decode_code(q: &VqQuantizer, index: usize) -> Result<Vec<f64>> {
    if index >= q.codebook_size() {
        return Err(Error::OutOfRange {
            what: "code index",
            got: index,
            limit: q.codebook_size(),
        });
    }
    let decoded = q.decoder.infer(q.codebook.row(index));
    if decoded.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("decode of code {index} is not finite")));
    }
    Ok(decoded)
}

/// Perplexity of the code usage distribution (natural-log entropy).
pub fn codebook_perplexity(codes: &[usize], codebook_size: usize) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; codebook_size];
    for &c in codes {
        counts[c] += 1;
    }
    let total = codes.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[derive(Debug, Serialize, Deserialize)]
struct VqManifest {
    aspect: usize,
    input_dim: usize,
    code_dim: usize,
    hidden: usize,
    codebook_size: usize,
    beta: f64,
    train_log: VqTrainLog,
    params: usize,
    payload: String,
}

impl VqQuantizer {
    /// Checkpoint: JSON manifest plus an f32le parameter blob
    /// (encoder, decoder, codebook in fixed order).
    pub fn write_checkpoint(&self, manifest_path: &Path) -> Result<()> {
        let mut params = self.encoder.flatten();
        params.extend(self.decoder.flatten());
        params.extend_from_slice(&self.codebook.data);
        let payload_path = manifest_path.with_extension("bin");
        let manifest = VqManifest {
            aspect: self.aspect,
            input_dim: self.encoder.in_dim,
            code_dim: self.codebook.cols,
            hidden: self.encoder.hidden,
            codebook_size: self.codebook.rows,
            beta: self.beta,
            train_log: self.train_log.clone(),
            params: params.len(),
            payload: payload_path.file_name().unwrap().to_string_lossy().into_owned(),
        };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        blob::write_f32_payload(&payload_path, &params)
    }

    pub fn read_checkpoint(manifest_path: &Path) -> Result<Self> {
        let json = fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let m: VqManifest = serde_json::from_str(&json)?;
        let payload_path = manifest_path
            .parent()
            .map(|p| p.join(&m.payload))
            .unwrap_or_else(|| Path::new(&m.payload).to_path_buf());
        let params = blob::read_f32_payload(&payload_path, m.params)?;

        let enc_len = m.hidden * m.input_dim + m.hidden + m.code_dim * m.hidden + m.code_dim;
        let dec_len = m.hidden * m.code_dim + m.hidden + m.input_dim * m.hidden + m.input_dim;
        let cb_len = m.codebook_size * m.code_dim;
        if params.len() != enc_len + dec_len + cb_len {
            return Err(Error::Schema("parameter blob length mismatch".into()));
        }
        let encoder = mlp_from_flat(m.input_dim, m.hidden, m.code_dim, &params[..enc_len]);
        let decoder = mlp_from_flat(m.code_dim, m.hidden, m.input_dim, &params[enc_len..enc_len + dec_len]);
        let codebook = Matrix {
            rows: m.codebook_size,
            cols: m.code_dim,
            data: params[enc_len + dec_len..].to_vec(),
        };
        Ok(VqQuantizer {
            aspect: m.aspect,
            encoder,
            decoder,
            codebook,
            beta: m.beta,
            train_log: m.train_log,
        })
    }
}

fn mlp_from_flat(in_dim: usize, hidden: usize, out_dim: usize, flat: &[f64]) -> Mlp {
    let w1_len = hidden * in_dim;
    let w2_len = out_dim * hidden;
    let mut offset = 0;
    let w1 = Matrix {
        rows: hidden,
        cols: in_dim,
        data: flat[offset..offset + w1_len].to_vec(),
    };
    offset += w1_len;
    let b1 = flat[offset..offset + hidden].to_vec();
    offset += hidden;
    let w2 = Matrix {
        rows: out_dim,
        cols: hidden,
        data: flat[offset..offset + w2_len].to_vec(),
    };
    offset += w2_len;
    let b2 = flat[offset..offset + out_dim].to_vec();
    Mlp {
        in_dim,
        hidden,
        out_dim,
        w1,
        b1,
        w2,
        b2,
    }
}

/// Write the per-article codes table: `article_id \t i_1 .. i_K`.
pub fn write_codes_tsv(path: &Path, codes: &[ArticleCodes]) -> Result<()> {
    let mut out = String::new();
    for c in codes {
        out.push_str(&c.article_id);
        for &i in &c.codes {
            out.push('\t');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_codes_tsv(path: &Path) -> Result<Vec<ArticleCodes>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default();
        let codes: std::result::Result<Vec<usize>, _> = cols.map(str::parse).collect();
        let codes = codes.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad code index: {e}"),
        })?;
        out.push(ArticleCodes {
            article_id: id.to_string(),
            codes,
        });
    }
    Ok(out)
}
