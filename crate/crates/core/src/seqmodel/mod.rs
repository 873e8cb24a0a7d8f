//! Next-article code prediction.
//!
//! User histories are flattened into single token streams — a BoS token
//! followed by each article's K aspect codes, offset so every (aspect, code)
//! pair owns a unique token id. A decoder-only transformer is trained with
//! next-token cross-entropy; inference runs K constrained decoding steps in
//! which only the current aspect's sub-vocabulary is eligible.

mod transformer;

pub use transformer::{DecodeState, Transformer, TransformerConfig};

use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::quantizer::ArticleCodes;
use crate::rng::{seed_rng, shuffle};

/// Token id layout: token 0 is BoS; aspect k's codes occupy a contiguous
/// range starting at `offsets[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

pub const BOS: usize = 0;

impl TokenVocabulary {
    pub fn new(codebook_sizes: &[usize]) -> Result<Self> {
        if codebook_sizes.is_empty() {
            return Err(Error::Config("vocabulary needs at least one aspect".into()));
        }
        if codebook_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("aspect sub-vocabulary cannot be empty".into()));
        }
        let mut offsets = Vec::with_capacity(codebook_sizes.len());
        let mut at = 1usize;
        for &s in codebook_sizes {
            offsets.push(at);
            at += s;
        }
        Ok(TokenVocabulary {
            sizes: codebook_sizes.to_vec(),
            offsets,
            total: at,
        })
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn codebook_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Token id for (aspect, code).
    pub fn encode(&self, aspect: usize, code: usize) -> Result<usize> {
        if aspect >= self.k() {
            return Err(Error::OutOfRange {
                what: "aspect",
                got: aspect,
                limit: self.k(),
            });
        }
        if code >= self.sizes[aspect] {
            return Err(Error::OutOfRange {
                what: "code",
                got: code,
                limit: self.sizes[aspect],
            });
        }
        Ok(self.offsets[aspect] + code)
    }

    /// Inverse of [`encode`]; `None` for BoS.
    pub fn decode(&self, token: usize) -> Option<(usize, usize)> {
        if token == BOS || token >= self.total {
            return None;
        }
        for (k, &off) in self.offsets.iter().enumerate() {
            if token >= off && token < off + self.sizes[k] {
                return Some((k, token - off));
            }
        }
        None
    }

    /// Token range of aspect k's sub-vocabulary.
    pub fn aspect_range(&self, aspect: usize) -> Range<usize> {
        self.offsets[aspect]..self.offsets[aspect] + self.sizes[aspect]
    }

    /// Number of distinct code bundles (saturating).
    pub fn bundle_count(&self) -> usize {
        self.sizes
            .iter()
            .fold(1usize, |acc, &s| acc.saturating_mul(s))
    }
}

/// Flatten one history (oldest first) into `[BoS, codes of article 1, ...]`,
/// keeping only the most recent `context / K` articles.
pub fn tokenize_history(
    history: &[ArticleCodes],
    vocab: &TokenVocabulary,
    context: usize,
) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(Error::Precondition("history must contain at least one article".into()));
    }
    let k = vocab.k();
    let max_articles = (context / k).max(1);
    let start = history.len().saturating_sub(max_articles);
    let mut seq = Vec::with_capacity(1 + k * (history.len() - start));
    seq.push(BOS);
    for article in &history[start..] {
        if article.codes.len() != k {
            return Err(Error::Precondition(format!(
                "article {} has {} codes, vocabulary has {} aspects",
                article.article_id,
                article.codes.len(),
                k
            )));
        }
        for (aspect, &code) in article.codes.iter().enumerate() {
            seq.push(vocab.encode(aspect, code)?);
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context budget in tokens; histories are truncated to
    /// `context / K` most recent articles.
    pub context: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of sequences held out for the validation loss; 0 evaluates
    /// validation on the training set.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            context: 512,
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 16,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeqTrainLog {
    pub epoch_train_ce: Vec<f64>,
    pub epoch_val_ce: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub transformer: Transformer,
    pub vocab: TokenVocabulary,
    pub context: usize,
    pub train_log: SeqTrainLog,
}

/// One constrained-decoding hypothesis: a full K-aspect code bundle and its
/// exact sum of per-step masked log-softmax values.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamPrediction {
    pub codes: Vec<usize>,
    pub log_probability: f64,
}

/// Train the sequence model on flattened token sequences. Per-sequence
/// gradients inside a batch may be computed in parallel; the reduction
/// order is fixed, so results are deterministic under `cfg.seed`.
pub fn train_seq_model(
    sequences: &[Vec<usize>],
    vocab: &TokenVocabulary,
    cfg: &SeqConfig,
) -> Result<SeqModel> {
    if sequences.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    for seq in sequences {
        for &t in seq {
            if t >= vocab.total() {
                return Err(Error::OutOfRange {
                    what: "token",
                    got: t,
                    limit: vocab.total(),
                });
            }
        }
    }
    let max_seq = 1 + vocab.k() * (cfg.context / vocab.k()).max(1);
    let longest = sequences.iter().map(Vec::len).max().unwrap_or(0);
    if longest > max_seq {
        return Err(Error::Precondition(format!(
            "sequence of {longest} tokens exceeds the context allocation {max_seq}"
        )));
    }

    let mut rng = seed_rng(cfg.seed);
    let tcfg = TransformerConfig {
        vocab: vocab.total(),
        d_model: cfg.d_model,
        layers: cfg.layers,
        heads: cfg.heads,
        max_seq,
    };
    let mut transformer = Transformer::seeded(tcfg, &mut rng)?;
    let mut log = SeqTrainLog::default();

    if cfg.epochs > 0 {
        // deterministic split
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        shuffle(&mut order, &mut rng);
        let val_count = ((sequences.len() as f64) * cfg.val_fraction).floor() as usize;
        let (val_idx, train_idx) = order.split_at(val_count);
        let train_idx: Vec<usize> = train_idx.to_vec();
        let val_idx: Vec<usize> = if val_idx.is_empty() {
            train_idx.clone()
        } else {
            val_idx.to_vec()
        };
        if train_idx.is_empty() {
            return Err(Error::Precondition("no sequences left for training".into()));
        }

        let mut adam = Adam::new(cfg.learning_rate, &[transformer.param_count()]);
        let batch = cfg.batch_size.max(1);
        let mut epoch_order = train_idx.clone();

        for _ in 0..cfg.epochs {
            shuffle(&mut epoch_order, &mut rng);
            let mut train_ce = 0.0;
            let mut train_preds = 0usize;
            for chunk in epoch_order.chunks(batch) {
                // parallel map, sequential fixed-order reduce
                let parts: Vec<(f64, usize, Vec<f64>)> = chunk
                    .par_iter()
                    .map(|&i| transformer.loss_and_grad(&sequences[i]))
                    .collect::<Result<Vec<_>>>()?;
                let mut grad = vec![0.0; transformer.param_count()];
                let mut preds = 0usize;
                for (ce, n, g) in &parts {
                    train_ce += ce;
                    preds += n;
                    for (acc, gv) in grad.iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
                train_preds += preds;
                if preds == 0 {
                    continue;
                }
                let inv = 1.0 / preds as f64;
                grad.iter_mut().for_each(|g| *g *= inv);
                adam.step(&mut [&mut transformer.params], &[&grad]);
            }
            log.epoch_train_ce.push(train_ce / train_preds.max(1) as f64);

            let (val_ce, val_preds) = evaluate_ce_indices(&transformer, sequences, &val_idx)?;
            log.epoch_val_ce.push(val_ce / val_preds.max(1) as f64);
        }
    }

    Ok(SeqModel {
        transformer,
        vocab: vocab.clone(),
        context: cfg.context,
        train_log: log,
    })
}

fn evaluate_ce_indices(
    model: &Transformer,
    sequences: &[Vec<usize>],
    indices: &[usize],
) -> Result<(f64, usize)> {
    let parts: Vec<(f64, usize)> = indices
        .par_iter()
        .map(|&i| model.loss_only(&sequences[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .iter()
        .fold((0.0, 0), |(ce, n), &(c, m)| (ce + c, n + m)))
}

/// Mean next-token cross-entropy over whole sequences (natural log).
pub fn evaluate_ce(model: &SeqModel, sequences: &[Vec<usize>]) -> Result<f64> {
    let idx: Vec<usize> = (0..sequences.len()).collect();
    let (ce, n) = evaluate_ce_indices(&model.transformer, sequences, &idx)?;
    Ok(ce / n.max(1) as f64)
}

/// Fraction of positions whose argmax logit equals the actual next token.
pub fn next_token_accuracy(model: &SeqModel, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in sequences {
        let logits = model.transformer.full_logits(seq)?;
        for t in 0..seq.len() - 1 {
            let row = &logits[t];
            let mut best = 0usize;
            for (i, &l) in row.iter().enumerate() {
                if l > row[best] {
                    best = i;
                }
            }
            if best == seq[t + 1] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Masked log-softmax over one aspect's sub-vocabulary.
fn masked_log_softmax(logits: &[f64], range: Range<usize>) -> Vec<f64> {
    let slice = &logits[range];
    let max_l = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = slice.iter().map(|&l| (l - max_l).exp()).sum();
    let lse = max_l + denom.ln();
    slice.iter().map(|&l| l - lse).collect()
}

/// Predict the next article's K codes with constrained beam search: at step
/// j only aspect j's sub-vocabulary is eligible. Beams are returned sorted
/// by descending total log-probability; duplicates are kept.
pub fn next_codes_beam(
    model: &SeqModel,
    history_tokens: &[usize],
    beam_width: usize,
    vocab: &TokenVocabulary,
) -> Result<Vec<BeamPrediction>> {
    if beam_width == 0 {
        return Err(Error::Precondition("beam width must be at least 1".into()));
    }
    let mut width = beam_width;
    let reachable = vocab.bundle_count();
    if width > reachable {
        log::warn!("beam width {width} exceeds the {reachable} reachable bundles; clamping");
        width = reachable;
    }

    struct Beam {
        state: DecodeState,
        last_logits: Vec<f64>,
        codes: Vec<usize>,
        logp: f64,
    }

    let (state, last_logits) = model.transformer.prefill(history_tokens)?;
    let mut beams = vec![Beam {
        state,
        last_logits,
        codes: Vec::new(),
        logp: 0.0,
    }];

    for aspect in 0..vocab.k() {
        let range = vocab.aspect_range(aspect);
        // (total logp, parent beam, code)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let logps = masked_log_softmax(&beam.last_logits, range.clone());
            for (code, &lp) in logps.iter().enumerate() {
                candidates.push((beam.logp + lp, b, code));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(width);

        let mut next = Vec::with_capacity(candidates.len());
        for (logp, parent, code) in candidates {
            let mut state = beams[parent].state.clone();
            let token = vocab.encode(aspect, code)?;
            let last_logits = model.transformer.step(&mut state, token)?;
            let mut codes = beams[parent].codes.clone();
            codes.push(code);
            next.push(Beam {
                state,
                last_logits,
                codes,
                logp,
            });
        }
        beams = next;
    }

    Ok(beams
        .into_iter()
        .map(|b| BeamPrediction {
            codes: b.codes,
            log_probability: b.logp,
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct SeqManifest {
    vocab_sizes: Vec<usize>,
    d_model: usize,
    layers: usize,
    heads: usize,
    max_seq: usize,
    context: usize,
    train_log: SeqTrainLog,
    params: usize,
    payload: String,
}

impl SeqModel {
    /// Checkpoint: JSON manifest (dims + vocabulary layout) and an f32le
    /// parameter blob.
    pub fn write_checkpoint(&self, manifest_path: &Path) -> Result<()> {
        let payload_path = manifest_path.with_extension("bin");
        let manifest = SeqManifest {
            vocab_sizes: self.vocab.sizes.clone(),
            d_model: self.transformer.cfg.d_model,
            layers: self.transformer.cfg.layers,
            heads: self.transformer.cfg.heads,
            max_seq: self.transformer.cfg.max_seq,
            context: self.context,
            train_log: self.train_log.clone(),
            params: self.transformer.params.len(),
            payload: payload_path.file_name().unwrap().to_string_lossy().into_owned(),
        };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        blob::write_f32_payload(&payload_path, &self.transformer.params)
    }

    pub fn read_checkpoint(manifest_path: &Path) -> Result<Self> {
        let json = fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let m: SeqManifest = serde_json::from_str(&json)?;
        let payload_path = manifest_path
            .parent()
            .map(|p| p.join(&m.payload))
            .unwrap_or_else(|| Path::new(&m.payload).to_path_buf());
        let params = blob::read_f32_payload(&payload_path, m.params)?;
        let vocab = TokenVocabulary::new(&m.vocab_sizes)?;
        let cfg = TransformerConfig {
            vocab: vocab.total(),
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            max_seq: m.max_seq,
        };
        Ok(SeqModel {
            transformer: Transformer::from_params(cfg, params)?,
            vocab,
            context: m.context,
            train_log: m.train_log,
        })
    }
}
