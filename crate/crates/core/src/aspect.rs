//! Per-aspect embedding spaces.
//!
//! The content aspect uses the base embedding directly; each labeled aspect
//! gets a residual projection head trained with a supervised contrastive
//! objective, plus a fitted SVD reducer used by retrieval.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::Mlp;
use crate::rng::{seed_rng, shuffle, Rng};

/// Article-indexed base content embeddings, rows L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEmbeddingMatrix {
    pub dim: usize,
    pub rows: Matrix,
}

impl BaseEmbeddingMatrix {
    /// Wrap a row-major matrix, normalizing every row.
    pub fn new(mut rows: Matrix) -> Result<Self> {
        if rows.rows == 0 || rows.cols == 0 {
            return Err(Error::Empty("embedding matrix"));
        }
        let dim = rows.cols;
        for i in 0..rows.rows {
            let row = rows.row_mut(i);
            let n = linalg::norm(row);
            if n < 1e-12 {
                return Err(Error::Numeric(format!("embedding row {i} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Ok(BaseEmbeddingMatrix { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        blob::write_matrix(manifest_path, self.rows.rows, self.dim, &self.rows.data)
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        let (manifest, data) = blob::read_matrix(manifest_path)?;
        BaseEmbeddingMatrix::new(Matrix {
            rows: manifest.rows,
            cols: manifest.dim,
            data,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            batch_size: 128,
            epochs: 5,
            learning_rate: 1e-3,
            hidden: 256,
            seed: 0,
        }
    }
}

/// Contrastive loss over a batch of unit vectors. Positives of anchor `i`
/// are the other batch members sharing its label; the comparison set is the
/// whole batch minus `i`. Anchors without positives are skipped; if no
/// anchor has a positive the batch is degenerate.
///
/// Returns the summed loss over contributing anchors.
pub fn supcon_loss(embeddings: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    supcon_loss_and_grad(embeddings, labels, tau, false).map(|(l, _)| l)
}

/// As [`supcon_loss`] but also returns d loss / d embedding for each batch
/// member when `with_grad` is set.
pub fn supcon_loss_and_grad(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Precondition("contrastive batch needs >= 2 items".into()));
    }
    if labels.len() != n {
        return Err(Error::Precondition("labels length mismatch".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let dim = embeddings[0].len();

    // s[i][j] = z_i . z_j / tau
    let mut sims = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = linalg::dot(&embeddings[i], &embeddings[j]) / tau;
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }

    let mut total = 0.0;
    let mut grads = if with_grad { vec![vec![0.0; dim]; n] } else { Vec::new() };
    let mut any_anchor = false;

    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        any_anchor = true;
        let comparisons: Vec<usize> = (0..n).filter(|&j| j != i).collect();

        // log-sum-exp over the comparison set
        let max_s = comparisons
            .iter()
            .map(|&a| sims[i][a])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = comparisons.iter().map(|&a| (sims[i][a] - max_s).exp()).sum();
        let lse = max_s + sum_exp.ln();

        let p_count = positives.len() as f64;
        let mean_pos: f64 = positives.iter().map(|&p| sims[i][p]).sum::<f64>() / p_count;
        total += lse - mean_pos;

        if with_grad {
            // dL_i/ds_ia = softmax_ia - [a in P(i)]/|P(i)| ; s in tau units
            for &a in &comparisons {
                let soft = (sims[i][a] - max_s).exp() / sum_exp;
                let mut coef = soft;
                if labels[a] == labels[i] {
                    coef -= 1.0 / p_count;
                }
                let coef = coef / tau;
                if coef != 0.0 {
                    linalg::axpy(&mut grads[i], coef, &embeddings[a]);
                    let zi = embeddings[i].clone();
                    linalg::axpy(&mut grads[a], coef, &zi);
                }
            }
        }
    }

    if !any_anchor {
        return Err(Error::DegenerateBatch(
            "no anchor in the batch has a positive".into(),
        ));
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    pub epochs: usize,
    pub first_epoch_loss: Option<f64>,
    pub final_epoch_loss: Option<f64>,
}

/// Aspect-specific embedding function: `z = normalize(x + head(x))`, or the
/// normalized base row when the aspect is unlabeled (content).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectEncoder {
    pub aspect: usize,
    pub dim: usize,
    pub head: Option<Mlp>,
    pub meta: TrainMeta,
}

impl AspectEncoder {
    /// The identity encoder used for the content aspect.
    pub fn identity(aspect: usize, dim: usize) -> Self {
        AspectEncoder {
            aspect,
            dim,
            head: None,
            meta: TrainMeta::default(),
        }
    }

    /// Untrained residual head: seeded hidden layer, zeroed output layer,
    /// so the initial function is the identity.
    pub fn init(aspect: usize, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut head = Mlp::seeded(dim, hidden, dim, rng);
        head.zero_output();
        AspectEncoder {
            aspect,
            dim,
            head: Some(head),
            meta: TrainMeta::default(),
        }
    }
}

/// Embed one base row into the aspect space; output is unit-norm.
pub fn embed_aspect(encoder: &AspectEncoder, base_row: &[f64]) -> Result<Vec<f64>> {
    if base_row.len() != encoder.dim {
        return Err(Error::DimensionMismatch {
            expected: encoder.dim,
            got: base_row.len(),
        });
    }
    let mut z = match &encoder.head {
        None => base_row.to_vec(),
        Some(head) => {
            let mut y = head.infer(base_row);
            for (yi, &xi) in y.iter_mut().zip(base_row) {
                *yi += xi;
            }
            y
        }
    };
    linalg::normalize(&mut z);
    Ok(z)
}

/// Embed every row of the base matrix.
pub fn embed_all(encoder: &AspectEncoder, base: &BaseEmbeddingMatrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(base.len(), encoder.dim);
    for i in 0..base.len() {
        let z = embed_aspect(encoder, base.row(i))?;
        out.row_mut(i).copy_from_slice(&z);
    }
    Ok(out)
}

/// Train a residual projection head for one labeled aspect with the
/// contrastive objective. Deterministic under (base, labels, cfg.seed).
pub fn train_aspect_projection(
    base: &BaseEmbeddingMatrix,
    labels: &[usize],
    aspect: usize,
    cfg: &ContrastiveConfig,
) -> Result<AspectEncoder> {
    if labels.len() != base.len() {
        return Err(Error::Precondition("labels length != article count".into()));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateBatch(
            "contrastive objective undefined on a single-label corpus".into(),
        ));
    }

    let mut rng = seed_rng(cfg.seed);
    let mut encoder = AspectEncoder::init(aspect, base.dim, cfg.hidden, &mut rng);
    if cfg.epochs == 0 {
        return Ok(encoder);
    }

    let head_sizes = {
        let head = encoder.head.as_ref().unwrap();
        [head.w1.data.len(), head.b1.len(), head.w2.data.len(), head.b2.len()]
    };
    let mut adam = crate::nn::Adam::new(cfg.learning_rate, &head_sizes);

    let n = base.len();
    let batch = cfg.batch_size.max(2).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut first_epoch_loss = None;
    let mut last_epoch_loss = 0.0;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut anchors = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let head = encoder.head.as_ref().unwrap();
            // forward: y = x + mlp(x), z = y/|y|
            let mut caches = Vec::with_capacity(chunk.len());
            let mut raw = Vec::with_capacity(chunk.len());
            let mut zs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = base.row(i);
                let (mut y, cache) = head.forward(x);
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi += xi;
                }
                let norm = linalg::norm(&y);
                let z: Vec<f64> = y.iter().map(|v| v / norm).collect();
                caches.push(cache);
                raw.push((y, norm));
                zs.push(z);
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, dz) = match supcon_loss_and_grad(&zs, &batch_labels, cfg.tau, true) {
                Ok(v) => v,
                Err(Error::DegenerateBatch(_)) => continue,
                Err(e) => return Err(e),
            };
            epoch_loss += loss;
            anchors += chunk.len();

            let mut grads = head.zero_grads();
            for (b, &i) in chunk.iter().enumerate() {
                // through normalization: dy = (dz - (z . dz) z) / |y|
                let (_, norm) = &raw[b];
                let z = &zs[b];
                let zdot = linalg::dot(z, &dz[b]);
                let dy: Vec<f64> = dz[b]
                    .iter()
                    .zip(z)
                    .map(|(d, zi)| (d - zdot * zi) / norm)
                    .collect();
                // residual: y = x + mlp(x); x gradient unused (base frozen)
                head.backward(base.row(i), &caches[b], &dy, &mut grads);
            }
            let head = encoder.head.as_mut().unwrap();
            adam.step(
                &mut [
                    &mut head.w1.data,
                    &mut head.b1,
                    &mut head.w2.data,
                    &mut head.b2,
                ],
                &[&grads.w1, &grads.b1, &grads.w2, &grads.b2],
            );
        }
        let mean = if anchors > 0 { epoch_loss / anchors as f64 } else { 0.0 };
        if epoch == 0 {
            first_epoch_loss = Some(mean);
        }
        last_epoch_loss = mean;
    }

    encoder.meta = TrainMeta {
        epochs: cfg.epochs,
        first_epoch_loss,
        final_epoch_loss: Some(last_epoch_loss),
    };
    Ok(encoder)
}

/// Mean-centered orthonormal projection fitted per aspect.
///
/// `components` holds the top-`r` principal directions as rows
/// (`r x d`); applying the transform computes `components * (v - mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdTransform {
    pub aspect: usize,
    pub mean: Vec<f64>,
    pub components: Matrix,
    pub singular_values: Vec<f64>,
    /// Number of non-degenerate components; rows beyond this are zero pads.
    pub rank: usize,
}

impl SvdTransform {
    pub fn out_dim(&self) -> usize {
        self.components.rows
    }

    pub fn reconstruct(&self, reduced: &[f64]) -> Vec<f64> {
        let mut v = self.components.matvec_t(reduced);
        for (vi, &mi) in v.iter_mut().zip(&self.mean) {
            *vi += mi;
        }
        v
    }
}

/// Fit the top-`r` principal directions of `data` (rows are observations).
pub fn fit_svd(data: &Matrix, r: usize, aspect: usize) -> Result<SvdTransform> {
    let (n, d) = (data.rows, data.cols);
    if n == 0 {
        return Err(Error::Empty("svd input"));
    }
    if r > n.min(d) {
        return Err(Error::Config(format!(
            "r = {r} exceeds min(rows, dim) = {}",
            n.min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for row in data.iter_rows() {
        linalg::axpy(&mut mean, 1.0, row);
    }
    linalg::scale(&mut mean, 1.0 / n as f64);

    // Gram matrix of the centered data; eigenvectors are the principal axes.
    let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in data.iter_rows() {
        let c = linalg::sub(row, &mean);
        for i in 0..d {
            if c[i] != 0.0 {
                for j in i..d {
                    gram[(i, j)] += c[i] * c[j];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let eigen = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let max_eig = eigen.eigenvalues[order[0]].max(0.0);
    let tol = (max_eig * 1e-10).max(1e-12);
    let rank = order
        .iter()
        .take(r)
        .filter(|&&i| eigen.eigenvalues[i] > tol)
        .count();
    if rank < r {
        log::warn!(
            "aspect {aspect}: requested {r} components but data rank is {rank}; zero-padding"
        );
    }

    let mut components = Matrix::zeros(r, d);
    let mut singular_values = vec![0.0; r];
    for (out_row, &col) in order.iter().take(rank).enumerate() {
        let v = eigen.eigenvectors.column(col);
        let row = components.row_mut(out_row);
        for (rv, &vv) in row.iter_mut().zip(v.iter()) {
            *rv = vv;
        }
        // deterministic sign: largest-magnitude entry positive
        let (mut best, mut best_abs) = (0usize, 0.0f64);
        for (i, &x) in row.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if row[best] < 0.0 {
            for x in row.iter_mut() {
                *x = -*x;
            }
        }
        singular_values[out_row] = eigen.eigenvalues[col].max(0.0).sqrt();
    }

    Ok(SvdTransform {
        aspect,
        mean,
        components,
        singular_values,
        rank,
    })
}

/// Project `v` into the reduced space: `components * (v - mean)`.
pub fn apply_svd(t: &SvdTransform, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != t.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: t.mean.len(),
            got: v.len(),
        });
    }
    let centered = linalg::sub(v, &t.mean);
    Ok(t.components.matvec(&centered))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthEmbedConfig {
    pub dim: usize,
    /// Gaussian noise scale around the label-determined cluster center.
    pub spread: f64,
    /// Scale of each labeled aspect's contribution to the center.
    pub aspect_strength: f64,
}

impl Default for SynthEmbedConfig {
    fn default() -> Self {
        SynthEmbedConfig {
            dim: 768,
            spread: 0.1,
            aspect_strength: 1.0,
        }
    }
}

/// Synthesize label-consistent base embeddings: each labeled aspect value
/// gets a random direction, an article's center is the sum of its label
/// directions, and `spread` controls per-article noise around the center.
/// Deterministic under (corpus, cfg, seed).
pub fn synthesize_base_embeddings(
    corpus: &Corpus,
    cfg: &SynthEmbedConfig,
    seed: u64,
) -> Result<BaseEmbeddingMatrix> {
    let schema = &corpus.aspect_schema;
    if cfg.dim < 2 * schema.k() {
        return Err(Error::Config(format!(
            "embedding dim {} too small for {} aspects",
            cfg.dim,
            schema.k()
        )));
    }
    let mut rng = seed_rng(seed);
    let gauss_vec = |rng: &mut Rng| -> Vec<f64> {
        (0..cfg.dim).map(|_| StandardNormal.sample(rng)).collect()
    };

    // One direction per (labeled aspect, label), drawn in schema order.
    let labeled: Vec<usize> = schema.labeled_aspects().collect();
    let mut directions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(labeled.len());
    for &k in &labeled {
        let mut per_label = Vec::with_capacity(schema.labels(k).len());
        for _ in schema.labels(k) {
            per_label.push(linalg::normalized(gauss_vec(&mut rng)));
        }
        directions.push(per_label);
    }

    let mut rows = Matrix::zeros(corpus.articles.len(), cfg.dim);
    for (i, article) in corpus.articles.iter().enumerate() {
        let mut v = vec![0.0; cfg.dim];
        for (ki, &k) in labeled.iter().enumerate() {
            let name = &schema.aspects[k].name;
            let label = article.aspect_label(name).ok_or_else(|| {
                Error::Schema(format!("article {} lacks {} label", article.id, name))
            })?;
            let li = schema
                .labels(k)
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Schema(format!("label {label:?} not in {name} set")))?;
            linalg::axpy(&mut v, cfg.aspect_strength, &directions[ki][li]);
        }
        if cfg.spread > 0.0 {
            let noise = gauss_vec(&mut rng);
            linalg::axpy(&mut v, cfg.spread, &noise);
        }
        rows.row_mut(i).copy_from_slice(&v);
    }
    BaseEmbeddingMatrix::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        linalg::normalized(v)
    }

    #[test]
    fn supcon_closed_form_single_positive_single_negative() {
        // anchor has dot 1.0 with its positive and 0.0 with the negative;
        // only the anchor contributes (the other two have no positive each..
        // the positive shares the anchor's label so it also anchors).
        // Build it so ONLY one anchor has a positive by checking the pair
        // loss directly: batch {anchor, positive, negative}.
        let z_anchor = vec![1.0, 0.0];
        let z_pos = vec![1.0, 0.0];
        let z_neg = vec![0.0, 1.0];
        let (loss, _) = supcon_loss_and_grad(
            &[z_anchor, z_pos, z_neg],
            &[0, 0, 1],
            0.1,
            false,
        )
        .unwrap();
        // Each of the two label-0 members is an anchor with one positive at
        // dot 1.0 and one negative at dot 0.0:
        // L_i = log(1 + e^{-10}) for each anchor.
        let expected_single = (-10.0f64).exp().ln_1p();
        let expected = 2.0 * expected_single;
        assert_relative_eq!(loss, expected, epsilon = 1e-12);
        assert_relative_eq!(loss / 2.0, 4.5398e-5, max_relative = 1e-3);
    }

    #[test]
    fn supcon_two_identical_vectors_is_zero() {
        let z = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        let loss = supcon_loss(&z, &[3, 3], 0.1).unwrap();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn supcon_true_labels_beat_shuffled_labels() {
        // well-separated 2-class batch of 8
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let class = i % 2;
            let base = if class == 0 { vec![1.0, 0.05 * i as f64] } else { vec![-1.0, 0.05 * i as f64] };
            batch.push(unit(base));
            labels.push(class);
        }
        let true_loss = supcon_loss(&batch, &labels, 0.1).unwrap();
        let shuffled = vec![0, 0, 1, 1, 0, 1, 1, 0];
        let shuf_loss = supcon_loss(&batch, &shuffled, 0.1).unwrap();
        assert!(
            true_loss < shuf_loss,
            "true {true_loss} should be below shuffled {shuf_loss}"
        );
    }

    #[test]
    fn supcon_all_anchors_positive_less_is_degenerate() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        match supcon_loss(&z, &[0, 1], 0.1) {
            Err(Error::DegenerateBatch(_)) => {}
            other => panic!("expected degenerate batch, got {other:?}"),
        }
    }

    #[test]
    fn supcon_is_permutation_invariant() {
        let mut rng = seed_rng(5);
        let batch: Vec<Vec<f64>> = (0..6)
            .map(|_| unit((0..4).map(|_| rng.gen::<f64>() - 0.5).collect()))
            .collect();
        let labels = [0, 1, 0, 2, 1, 0];
        let base = supcon_loss(&batch, &labels, 0.2).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let batch_p: Vec<Vec<f64>> = perm.iter().map(|&i| batch[i].clone()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = supcon_loss(&batch_p, &labels_p, 0.2).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-10);
    }

    #[test]
    fn supcon_is_rotation_invariant() {
        // Householder reflection preserves dot products.
        let mut rng = seed_rng(9);
        let dim = 5;
        let h = unit((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect());
        let reflect = |v: &[f64]| -> Vec<f64> {
            let d = 2.0 * linalg::dot(v, &h);
            v.iter().zip(&h).map(|(x, hh)| x - d * hh).collect()
        };
        let batch: Vec<Vec<f64>> = (0..6)
            .map(|_| unit((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()))
            .collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let base = supcon_loss(&batch, &labels, 0.1).unwrap();
        let rotated: Vec<Vec<f64>> = batch.iter().map(|v| reflect(v)).collect();
        let rot = supcon_loss(&rotated, &labels, 0.1).unwrap();
        assert_relative_eq!(base, rot, epsilon = 1e-9);
    }

    #[test]
    fn supcon_grad_matches_finite_differences() {
        let mut rng = seed_rng(17);
        let batch: Vec<Vec<f64>> = (0..5)
            .map(|_| unit((0..3).map(|_| rng.gen::<f64>() - 0.5).collect()))
            .collect();
        let labels = [0, 0, 1, 1, 1];
        let (_, grads) = supcon_loss_and_grad(&batch, &labels, 0.3, true).unwrap();
        for i in 0..batch.len() {
            for d in 0..3 {
                let fd = crate::nn::central_diff(batch[i][d], 1e-6, |v| {
                    let mut b = batch.clone();
                    b[i][d] = v;
                    supcon_loss(&b, &labels, 0.3).unwrap()
                });
                assert_relative_eq!(grads[i][d], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    fn three_cluster_base(n: usize, seed: u64) -> (BaseEmbeddingMatrix, Vec<usize>) {
        let mut rng = seed_rng(seed);
        let dim = 16;
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|_| unit((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()))
            .collect();
        let mut rows = Matrix::zeros(n, dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            labels.push(c);
            let noise: Vec<f64> = (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * 0.8).collect();
            let mut v = centers[c].clone();
            linalg::axpy(&mut v, 1.0, &noise);
            rows.row_mut(i).copy_from_slice(&v);
        }
        (BaseEmbeddingMatrix::new(rows).unwrap(), labels)
    }

    fn mean_cosines(encoder: &AspectEncoder, base: &BaseEmbeddingMatrix, labels: &[usize]) -> (f64, f64) {
        let zs: Vec<Vec<f64>> = (0..base.len())
            .map(|i| embed_aspect(encoder, base.row(i)).unwrap())
            .collect();
        let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..zs.len() {
            for j in (i + 1)..zs.len() {
                let c = linalg::dot(&zs[i], &zs[j]);
                if labels[i] == labels[j] {
                    within = (within.0 + c, within.1 + 1);
                } else {
                    cross = (cross.0 + c, cross.1 + 1);
                }
            }
        }
        (within.0 / within.1 as f64, cross.0 / cross.1 as f64)
    }

    #[test]
    fn training_separates_three_planted_clusters() {
        let (base, labels) = three_cluster_base(200, 23);
        let cfg = ContrastiveConfig {
            epochs: 6,
            batch_size: 50,
            seed: 1,
            ..ContrastiveConfig::default()
        };
        let encoder = train_aspect_projection(&base, &labels, 1, &cfg).unwrap();
        let (within, cross) = mean_cosines(&encoder, &base, &labels);
        assert!(
            within > cross,
            "within {within} should exceed cross {cross}"
        );
        let meta = &encoder.meta;
        assert!(meta.final_epoch_loss.unwrap() <= meta.first_epoch_loss.unwrap());
    }

    #[test]
    fn zero_epochs_yields_seeded_init_without_metadata() {
        let (base, labels) = three_cluster_base(30, 2);
        let cfg = ContrastiveConfig {
            epochs: 0,
            seed: 5,
            ..ContrastiveConfig::default()
        };
        let enc = train_aspect_projection(&base, &labels, 1, &cfg).unwrap();
        assert!(enc.meta.first_epoch_loss.is_none());
        assert!(enc.meta.final_epoch_loss.is_none());
        // identity at init: output equals normalized input
        let z = embed_aspect(&enc, base.row(0)).unwrap();
        let expected = linalg::normalized(base.row(0).to_vec());
        for (a, b) in z.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (base, labels) = three_cluster_base(60, 3);
        let cfg = ContrastiveConfig {
            epochs: 2,
            batch_size: 20,
            seed: 77,
            ..ContrastiveConfig::default()
        };
        let a = train_aspect_projection(&base, &labels, 1, &cfg).unwrap();
        let b = train_aspect_projection(&base, &labels, 1, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_label_corpus_is_rejected() {
        let (base, _) = three_cluster_base(10, 4);
        let labels = vec![0; 10];
        assert!(train_aspect_projection(&base, &labels, 1, &ContrastiveConfig::default()).is_err());
    }

    #[test]
    fn embed_is_unit_norm_and_batch_equals_loop() {
        let (base, labels) = three_cluster_base(100, 6);
        let cfg = ContrastiveConfig {
            epochs: 2,
            seed: 3,
            ..ContrastiveConfig::default()
        };
        let enc = train_aspect_projection(&base, &labels, 2, &cfg).unwrap();
        let batch = embed_all(&enc, &base).unwrap();
        for i in 0..base.len() {
            let single = embed_aspect(&enc, base.row(i)).unwrap();
            assert_relative_eq!(linalg::norm(&single), 1.0, epsilon = 1e-6);
            assert_eq!(batch.row(i), single.as_slice());
        }
    }

    #[test]
    fn embed_dimension_mismatch_is_fatal() {
        let enc = AspectEncoder::identity(0, 4);
        assert!(embed_aspect(&enc, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn svd_exact_subspace_reconstruction() {
        // data in a 2-dim subspace of R^5
        let mut rng = seed_rng(8);
        let b1 = unit((0..5).map(|_| rng.gen::<f64>() - 0.5).collect());
        let b2 = unit((0..5).map(|_| rng.gen::<f64>() - 0.5).collect());
        let mut rows = Vec::new();
        for _ in 0..40 {
            let (a, b): (f64, f64) = (rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
            let mut v = vec![0.0; 5];
            linalg::axpy(&mut v, a, &b1);
            linalg::axpy(&mut v, b, &b2);
            rows.push(v);
        }
        let data = Matrix::from_rows(rows);
        let t = fit_svd(&data, 2, 0).unwrap();
        for i in 0..data.rows {
            let reduced = apply_svd(&t, data.row(i)).unwrap();
            let recon = t.reconstruct(&reduced);
            assert!(linalg::l2_distance(&recon, data.row(i)) <= 1e-6);
        }
    }

    #[test]
    fn svd_full_rank_preserves_pairwise_distances() {
        let mut rng = seed_rng(12);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let data = Matrix::from_rows(rows);
        let t = fit_svd(&data, 4, 0).unwrap();
        for i in 0..data.rows {
            for j in (i + 1)..data.rows {
                let d_orig = linalg::l2_distance(data.row(i), data.row(j));
                let yi = apply_svd(&t, data.row(i)).unwrap();
                let yj = apply_svd(&t, data.row(j)).unwrap();
                let d_red = linalg::l2_distance(&yi, &yj);
                assert_relative_eq!(d_orig, d_red, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn svd_matches_closed_form_eigen_on_planted_2d() {
        // brute-force eigendecomposition of the 2x2 covariance
        let mut rng = seed_rng(15);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let t: f64 = StandardNormal.sample(&mut rng);
                let s: f64 = StandardNormal.sample(&mut rng);
                // dominant direction (3, 1)/sqrt(10), minor orthogonal
                vec![
                    3.0 * t / 10f64.sqrt() + 0.2 * s / 10f64.sqrt(),
                    1.0 * t / 10f64.sqrt() - 0.6 * s / 10f64.sqrt(),
                ]
            })
            .collect();
        let data = Matrix::from_rows(rows);

        // closed-form top eigenvalue of the scatter matrix
        let n = data.rows as f64;
        let mean: Vec<f64> = {
            let mut m = vec![0.0; 2];
            for r in data.iter_rows() {
                linalg::axpy(&mut m, 1.0, r);
            }
            linalg::scale(&mut m, 1.0 / n);
            m
        };
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for r in data.iter_rows() {
            let (x, y) = (r[0] - mean[0], r[1] - mean[1]);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
        }
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let top_eig = (tr + (tr * tr - 4.0 * det).sqrt()) / 2.0;

        let t = fit_svd(&data, 1, 0).unwrap();
        // variance captured by the single component = top eigenvalue
        let captured: f64 = data
            .iter_rows()
            .map(|r| {
                let y = apply_svd(&t, r).unwrap();
                y[0] * y[0]
            })
            .sum();
        assert_relative_eq!(captured, top_eig, max_relative = 1e-9);
        assert_relative_eq!(t.singular_values[0], top_eig.sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn svd_rank_deficit_pads_with_zeros() {
        // rank-1 data, ask for 3 components
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 2.0 * i as f64, -i as f64])
            .collect();
        let data = Matrix::from_rows(rows);
        let t = fit_svd(&data, 3, 0).unwrap();
        assert_eq!(t.rank, 1);
        assert!(t.components.row(1).iter().all(|&v| v == 0.0));
        assert!(t.components.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn svd_components_are_orthonormal() {
        let mut rng = seed_rng(21);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let data = Matrix::from_rows(rows);
        let t = fit_svd(&data, 4, 0).unwrap();
        for i in 0..4 {
            for j in i..4 {
                let d = linalg::dot(t.components.row(i), t.components.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(d, expect, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn apply_svd_is_linear_on_centered_inputs() {
        let mut rng = seed_rng(30);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..5).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let data = Matrix::from_rows(rows);
        let t = fit_svd(&data, 3, 0).unwrap();
        // on centered inputs (mean already removed) the map is linear
        let mut t0 = t.clone();
        t0.mean = vec![0.0; 5];
        let v: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = apply_svd(&t0, &combo).unwrap();
        let pv = apply_svd(&t0, &v).unwrap();
        let pw = apply_svd(&t0, &w).unwrap();
        for i in 0..3 {
            assert_relative_eq!(lhs[i], a * pv[i] + b * pw[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn synth_embeddings_deterministic_and_label_consistent() {
        let cfg = SynthConfig {
            articles: 60,
            users: 5,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, 2).unwrap();
        let ecfg = SynthEmbedConfig {
            dim: 32,
            spread: 0.05,
            aspect_strength: 1.0,
        };
        let a = synthesize_base_embeddings(&corpus, &ecfg, 9).unwrap();
        let b = synthesize_base_embeddings(&corpus, &ecfg, 9).unwrap();
        assert_eq!(a, b);

        // small spread: within-category cosine exceeds cross-category on average
        let (mut within, mut wn, mut cross, mut cn) = (0.0, 0usize, 0.0, 0usize);
        let articles: Vec<_> = corpus.articles.iter().collect();
        for i in 0..articles.len() {
            for j in (i + 1)..articles.len() {
                let c = linalg::dot(a.row(i), a.row(j));
                if articles[i].category == articles[j].category {
                    within += c;
                    wn += 1;
                } else {
                    cross += c;
                    cn += 1;
                }
            }
        }
        assert!(within / wn as f64 > cross / cn as f64);
    }

    #[test]
    fn synth_embeddings_zero_spread_shares_vectors_per_label_tuple() {
        // one-hot sentiment/leaning/frame priors so label tuples collide
        let mut cfg = SynthConfig {
            articles: 80,
            users: 2,
            ..SynthConfig::default()
        };
        cfg.sentiment_prior = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        cfg.leaning_prior = vec![0.0, 0.0, 0.0, 0.0, 1.0];
        cfg.frame_prior = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let corpus = generate_synthetic_corpus(&cfg, 4).unwrap();
        let ecfg = SynthEmbedConfig {
            dim: 24,
            spread: 0.0,
            aspect_strength: 1.0,
        };
        let emb = synthesize_base_embeddings(&corpus, &ecfg, 1).unwrap();
        let articles: Vec<_> = corpus.articles.iter().collect();
        let mut found_pair = false;
        for i in 0..articles.len() {
            for j in (i + 1)..articles.len() {
                let same_tuple = articles[i].category == articles[j].category
                    && articles[i].sentiment == articles[j].sentiment
                    && articles[i].leaning == articles[j].leaning
                    && articles[i].frame == articles[j].frame;
                if same_tuple {
                    found_pair = true;
                    assert_eq!(emb.row(i), emb.row(j), "articles {i} and {j} share labels");
                }
            }
        }
        assert!(found_pair, "fixture should contain at least one shared label tuple");
    }

    #[test]
    fn synth_embeddings_dim_too_small_is_fatal() {
        let cfg = SynthConfig {
            articles: 5,
            users: 1,
            history_len: (1, 2),
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, 1).unwrap();
        let ecfg = SynthEmbedConfig {
            dim: 6,
            spread: 0.1,
            aspect_strength: 1.0,
        };
        assert!(synthesize_base_embeddings(&corpus, &ecfg, 1).is_err());
    }
}
