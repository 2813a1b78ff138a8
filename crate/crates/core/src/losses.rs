//! Training objectives for the fusion stage: supervised contrastive loss over
//! the fused embeddings, focal loss over classification-head logits, and
//! their weighted sum.
//!
//! Each loss returns its value together with the analytic gradient w.r.t. its
//! input matrix so it can be spliced into an [`autodiff::Graph`] as a fused
//! scalar node.
//!
//! [`autodiff::Graph`]: crate::autodiff::Graph

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, Mat, NodeId};
use crate::error::{EmoqError, Result};
use crate::init;

/// How far a row norm may drift from 1 before SCL refuses the batch.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Per-class focal weights; `None` derives them from training counts.
    pub alpha: Option<Vec<f64>>,
    /// Weight of the focal term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            gamma: 2.0,
            alpha: None,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(EmoqError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(EmoqError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(EmoqError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                return Err(EmoqError::Config("alpha entries must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Unit-norm embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingBatch {
    embeddings: Mat,
    labels: Vec<usize>,
}

impl LabeledEmbeddingBatch {
    pub fn new(embeddings: Mat, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(EmoqError::shape(
                "labeled batch",
                format!("{} labels", embeddings.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A scalar loss and its gradient w.r.t. the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclOutput {
    pub value: f64,
    /// Gradient w.r.t. the embedding matrix.
    pub grad: Mat,
    /// Anchors that had at least one positive and entered the average.
    pub anchors: usize,
}

/// Supervised contrastive loss.
///
/// For anchor `i` with positives `P(i)` (same label, `j != i`) and
/// candidates `A(i)` (all `k != i`):
/// `l_i = -1/|P(i)| Σ_{j∈P(i)} [s_ij - log Σ_{k∈A(i)} exp(s_ik)]`, with
/// `s = e_i·e_k / tau`. The loss is the mean of `l_i` over anchors with a
/// non-empty `P(i)`; when no anchor has a positive the loss is 0.
pub fn supervised_contrastive_loss(batch: &LabeledEmbeddingBatch, tau: f64) -> Result<SclOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(EmoqError::InvalidArgument(format!(
            "supervised contrastive loss needs at least 2 samples, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(EmoqError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let e = batch.embeddings();
    for (i, row) in e.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmoqError::InvalidArgument(format!(
                "embedding {i} has norm {norm}; inputs must be L2-normalized"
            )));
        }
    }
    let labels = batch.labels();
    let sim = e.dot(&e.t()) / tau;
    let mut grad_sim = Mat::zeros((n, n));
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let others = (0..n).filter(|&k| k != i).map(|k| sim[[i, k]]);
        let lse = log_sum_exp(others);
        let p = positives.len() as f64;
        let mean_pos = positives.iter().map(|&j| sim[[i, j]]).sum::<f64>() / p;
        total += lse - mean_pos;
        for k in (0..n).filter(|&k| k != i) {
            grad_sim[[i, k]] += (sim[[i, k]] - lse).exp();
        }
        for &j in &positives {
            grad_sim[[i, j]] -= 1.0 / p;
        }
    }
    if anchors == 0 {
        log::warn!("supervised contrastive loss: no positive pairs in batch of {n}");
        return Ok(SclOutput {
            value: 0.0,
            grad: Mat::zeros(e.dim()),
            anchors,
        });
    }
    let scale = 1.0 / anchors as f64;
    // d s_ik / d e_i = e_k / tau and d s_ik / d e_k = e_i / tau.
    let sym = &grad_sim + &grad_sim.t();
    let grad = sym.dot(e) * (scale / tau);
    Ok(SclOutput {
        value: total * scale,
        grad,
        anchors,
    })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(EmoqError::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Focal loss `-1/N Σ α_y (1 - p_y)^γ log p_y` over softmax probabilities,
/// evaluated through log-softmax.
pub fn focal_loss(logits: &Mat, labels: &[usize], alpha: &[f64], gamma: f64) -> Result<LossGrad> {
    let (n, c) = logits.dim();
    if n == 0 {
        return Err(EmoqError::InvalidArgument("focal loss on empty batch".into()));
    }
    if labels.len() != n {
        return Err(EmoqError::shape("focal labels", n.to_string(), labels.len().to_string()));
    }
    if alpha.len() != c {
        return Err(EmoqError::shape("focal alpha", c.to_string(), alpha.len().to_string()));
    }
    check_labels(labels, c)?;
    let mut total = 0.0;
    let mut grad = Mat::zeros((n, c));
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let log_p = row[y] - lse;
        let p = log_p.exp();
        let one_minus = 1.0 - p;
        let modulator = one_minus.powf(gamma);
        total += -alpha[y] * modulator * log_p;
        // dL/dlog_p, then chain through log-softmax.
        let d_mod = if gamma == 0.0 || one_minus <= 0.0 {
            0.0
        } else {
            gamma * one_minus.powf(gamma - 1.0) * p
        };
        let d_logp = -alpha[y] * (modulator - d_mod * log_p);
        for k in 0..c {
            let softmax_k = (row[k] - lse).exp();
            let indicator = if k == y { 1.0 } else { 0.0 };
            grad[[i, k]] = d_logp * (indicator - softmax_k);
        }
    }
    let inv_n = 1.0 / n as f64;
    Ok(LossGrad {
        value: total * inv_n,
        grad: grad * inv_n,
    })
}

/// Inverse-frequency class weights rescaled to mean 1.
pub fn compute_class_weights(label_counts: &[usize]) -> Result<Vec<f64>> {
    if label_counts.is_empty() {
        return Err(EmoqError::Data("no classes to weight".into()));
    }
    if let Some(c) = label_counts.iter().position(|&n| n == 0) {
        return Err(EmoqError::Data(format!("class {c} has no training samples")));
    }
    let inv: Vec<f64> = label_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Count labels into `classes` bins.
pub fn label_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    check_labels(labels, classes)?;
    let mut counts = vec![0; classes];
    for &y in labels {
        counts[y] += 1;
    }
    Ok(counts)
}

/// Affine classification head `d_h → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl ClassificationHead {
    pub fn new(weight: Mat, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(EmoqError::shape(
                "classification head bias",
                weight.ncols().to_string(),
                bias.len().to_string(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn random<R: Rng>(d_h: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: init::fan_in(rng, d_h, classes),
            bias: Array1::zeros(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Logits for each row of `embeddings`.
    pub fn forward(&self, embeddings: &Mat) -> Result<Mat> {
        if embeddings.ncols() != self.weight.nrows() {
            return Err(EmoqError::shape(
                "classification head input",
                format!("width {}", self.weight.nrows()),
                format!("width {}", embeddings.ncols()),
            ));
        }
        Ok(embeddings.dot(&self.weight) + &self.bias)
    }
}

pub fn classification_head_forward(embeddings: &Mat, head: &ClassificationHead) -> Result<Mat> {
    head.forward(embeddings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalOutput {
    pub total: f64,
    pub scl: f64,
    pub focal: f64,
}

/// `L_SCL + λ·L_focal`.
pub fn mal_loss(batch: &LabeledEmbeddingBatch, logits: &Mat, config: &LossConfig) -> Result<MalOutput> {
    if logits.nrows() != batch.len() {
        return Err(EmoqError::shape(
            "mal logits",
            format!("{} rows", batch.len()),
            format!("{} rows", logits.nrows()),
        ));
    }
    let alpha = resolve_alpha(config, batch.labels(), logits.ncols())?;
    let scl = supervised_contrastive_loss(batch, config.tau)?.value;
    let focal = focal_loss(logits, batch.labels(), &alpha, config.gamma)?.value;
    Ok(MalOutput {
        total: scl + config.lambda * focal,
        scl,
        focal,
    })
}

fn resolve_alpha(config: &LossConfig, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    match &config.alpha {
        Some(a) => Ok(a.clone()),
        None => compute_class_weights(&label_counts(labels, classes)?),
    }
}

/// Splice SCL over the `N × d` node `embeddings` into `g`.
pub fn graph_scl(g: &mut Graph, embeddings: NodeId, labels: &[usize], tau: f64) -> Result<(NodeId, SclOutput)> {
    let batch = LabeledEmbeddingBatch::new(g.value(embeddings).clone(), labels.to_vec())?;
    let out = supervised_contrastive_loss(&batch, tau)?;
    let node = g.fused_scalar(out.value, vec![(embeddings, out.grad.clone())])?;
    Ok((node, out))
}

/// Splice focal loss over the `N × C` node `logits` into `g`.
pub fn graph_focal(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    alpha: &[f64],
    gamma: f64,
) -> Result<(NodeId, f64)> {
    let out = focal_loss(g.value(logits), labels, alpha, gamma)?;
    let node = g.fused_scalar(out.value, vec![(logits, out.grad)])?;
    Ok((node, out.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(deg: f64) -> [f64; 2] {
        let r = deg.to_radians();
        [r.cos(), r.sin()]
    }

    /// Literal double loop over the contrastive definition.
    fn naive_scl(e: &Mat, labels: &[usize], tau: f64) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (e.row(i).dot(&e.row(k)) / tau).exp();
                }
            }
            let mut s = 0.0;
            for &j in &pos {
                s += ((e.row(i).dot(&e.row(j)) / tau).exp() / denom).ln();
            }
            total += -s / pos.len() as f64;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    #[test]
    fn scl_identical_pair_is_zero() {
        let batch = LabeledEmbeddingBatch::new(array![[0.6, 0.8], [0.6, 0.8]], vec![1, 1]).unwrap();
        assert_eq!(supervised_contrastive_loss(&batch, 0.07).unwrap().value, 0.0);
    }

    #[test]
    fn scl_distinct_labels_is_zero() {
        let batch = LabeledEmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![0, 1, 2]).unwrap();
        let out = supervised_contrastive_loss(&batch, 0.07).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.anchors, 0);
    }

    #[test]
    fn scl_four_angles_matches_double_loop() {
        let rows: Vec<[f64; 2]> = [0.0, 10.0, 90.0, 100.0].iter().map(|&d| unit(d)).collect();
        let e = Mat::from_shape_fn((4, 2), |(i, j)| rows[i][j]);
        let labels = vec![0, 0, 1, 1];
        let batch = LabeledEmbeddingBatch::new(e.clone(), labels.clone()).unwrap();
        let fast = supervised_contrastive_loss(&batch, 0.07).unwrap().value;
        let slow = naive_scl(&e, &labels, 0.07);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        // Frozen from an independent numpy evaluation of the same sum.
        assert!((fast - 5.447_193_041_024_315_5e-6).abs() < 1e-15, "{fast}");
    }

    #[test]
    fn scl_errors() {
        let one = LabeledEmbeddingBatch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert!(supervised_contrastive_loss(&one, 0.07).is_err());
        let unnormalized = LabeledEmbeddingBatch::new(array![[2.0, 0.0], [1.0, 0.0]], vec![0, 0]).unwrap();
        assert!(supervised_contrastive_loss(&unnormalized, 0.07).is_err());
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let out = focal_loss(&array![[0.3, 0.3]], &[1], &[1.0, 1.0], 0.0).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
        assert!((out.value - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn focal_saturated_is_zero() {
        let out = focal_loss(&array![[800.0, -800.0]], &[0], &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn focal_scalar_case() {
        // p = (0.9, 0.1): logits (ln 0.9, ln 0.1), y = 1.
        let logits = array![[0.9f64.ln(), 0.1f64.ln()]];
        let out = focal_loss(&logits, &[1], &[1.0, 1.0], 2.0).unwrap();
        let expected = -(0.9f64 * 0.9) * 0.1f64.ln();
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_errors() {
        assert!(focal_loss(&Mat::zeros((0, 2)), &[], &[1.0, 1.0], 2.0).is_err());
        assert!(focal_loss(&Mat::zeros((1, 2)), &[2], &[1.0, 1.0], 2.0).is_err());
        assert!(focal_loss(&Mat::zeros((1, 2)), &[0], &[1.0], 2.0).is_err());
    }

    #[test]
    fn class_weights() {
        assert_eq!(compute_class_weights(&[7, 7, 7]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = compute_class_weights(&[30, 10]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12);
        assert!(matches!(compute_class_weights(&[3, 0]), Err(EmoqError::Data(_))));
    }

    #[test]
    fn head_forward() {
        let head = ClassificationHead::new(Mat::zeros((2, 3)), array![1.0, -2.0, 0.5]).unwrap();
        let logits = head.forward(&array![[0.6, 0.8], [1.0, 0.0]]).unwrap();
        assert_eq!(logits, array![[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]]);

        let head = ClassificationHead::new(array![[1.0, 0.0], [0.0, 2.0]], array![0.0, 0.0]).unwrap();
        assert_eq!(head.forward(&array![[0.6, 0.8]]).unwrap(), array![[0.6, 1.6]]);
        assert!(head.forward(&array![[1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn mal_is_linear_in_lambda() {
        let rows: Vec<[f64; 2]> = [5.0, 40.0, 130.0, 200.0].iter().map(|&d| unit(d)).collect();
        let e = Mat::from_shape_fn((4, 2), |(i, j)| rows[i][j]);
        let labels = vec![0, 1, 0, 1];
        let logits = array![[0.2, -0.1], [1.0, 0.3], [-0.5, 0.5], [0.0, 2.0]];
        let batch = LabeledEmbeddingBatch::new(e, labels.clone()).unwrap();
        let alpha = vec![1.0, 1.0];
        let cfg = |lambda| LossConfig {
            alpha: Some(alpha.clone()),
            lambda,
            ..LossConfig::default()
        };
        let scl = supervised_contrastive_loss(&batch, 0.07).unwrap().value;
        let focal = focal_loss(&logits, &labels, &alpha, 2.0).unwrap().value;
        assert_eq!(mal_loss(&batch, &logits, &cfg(0.0)).unwrap().total, scl);
        let two = mal_loss(&batch, &logits, &cfg(2.0)).unwrap().total;
        assert!((two - (scl + 2.0 * focal)).abs() < 1e-12);
        assert_eq!(LossConfig::default().lambda, 1.0);
    }

    #[test]
    fn loss_config_defaults_and_validation() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.tau, cfg.gamma, cfg.lambda), (0.07, 2.0, 1.0));
        assert!(LossConfig { tau: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..cfg }.validate().is_err());
    }
}
