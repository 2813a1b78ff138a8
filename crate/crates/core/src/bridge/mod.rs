//! Bridge from fused embeddings into an autoregressive decoder: projection,
//! prompt rendering, soft-prompt injection, token-weighted loss, LoRA and
//! constrained emotion decoding.

pub mod decoder;
pub mod lora;
pub mod prompt;

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::autodiff::{log_sum_exp, softmax, Graph, Mat, NodeId, ParamStore};
use crate::error::{EmoqError, Result};
use crate::init;

pub use decoder::{DecoderAdapter, TinyDecoder, TinyDecoderConfig};
pub use lora::{lora_forward, LoraAdapter, LoraConfig, LoraContext};
pub use prompt::{assign_token_weights, render_prompt, EmotionVocabulary, PromptInstance, PromptTemplate};

pub const PROJECTOR_W: &str = "projector.w";
pub const PROJECTOR_B: &str = "projector.b";

/// Affine map from the fusion width `d_h` to the decoder width `d_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_h × d_l`
    pub weight: Mat,
    /// `1 × d_l`
    pub bias: Mat,
}

impl Projector {
    pub fn new(weight: Mat, bias: Array1<f64>) -> Result<Self> {
        if bias.len() != weight.ncols() {
            return Err(EmoqError::shape(
                "projector bias",
                format!("{}", weight.ncols()),
                format!("{}", bias.len()),
            ));
        }
        let bias = bias.insert_axis(Axis(0));
        Ok(Self { weight, bias })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let weight = store.value(PROJECTOR_W)?.clone();
        let bias = store.value(PROJECTOR_B)?.row(0).to_owned();
        Self::new(weight, bias)
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Trainable projector parameters under `projector.*`.
pub fn init_projector<R: Rng>(d_h: usize, d_l: usize, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(PROJECTOR_W, init::fan_in(rng, d_h, d_l), true);
    store.insert(PROJECTOR_B, init::zeros(1, d_l), true);
    store
}

/// `e_h = e'_q · W + b`.
pub fn project_to_decoder(fused: &Array1<f64>, proj: &Projector) -> Result<Array1<f64>> {
    if fused.len() != proj.d_in() {
        return Err(EmoqError::shape(
            "project_to_decoder",
            format!("width {}", proj.d_in()),
            format!("width {}", fused.len()),
        ));
    }
    Ok(fused.dot(&proj.weight) + proj.bias.row(0))
}

/// Copy of `token_embeddings` with row `placeholder_pos` replaced by `e_h`.
pub fn inject_soft_prompt(token_embeddings: &Mat, placeholder_pos: usize, e_h: &Array1<f64>) -> Result<Mat> {
    if placeholder_pos >= token_embeddings.nrows() {
        return Err(EmoqError::InvalidArgument(format!(
            "placeholder position {placeholder_pos} outside {} rows",
            token_embeddings.nrows()
        )));
    }
    if e_h.len() != token_embeddings.ncols() {
        return Err(EmoqError::shape(
            "inject_soft_prompt",
            format!("width {}", token_embeddings.ncols()),
            format!("width {}", e_h.len()),
        ));
    }
    let mut out = token_embeddings.clone();
    out.row_mut(placeholder_pos).assign(e_h);
    Ok(out)
}

/// Token-weighted negative log-likelihood, averaged over sequences.
///
/// `log_probs[i]` holds one normalized log-distribution per answer position
/// of sequence `i` (rows), aligned with `targets[i]` and `weights[i]`.
pub fn weighted_ce_loss(log_probs: &[Mat], targets: &[Vec<usize>], weights: &[Vec<f64>]) -> Result<f64> {
    if log_probs.len() != targets.len() || targets.len() != weights.len() {
        return Err(EmoqError::shape(
            "weighted_ce_loss",
            format!("{} sequences", log_probs.len()),
            format!("{} targets, {} weight vectors", targets.len(), weights.len()),
        ));
    }
    if log_probs.is_empty() {
        return Err(EmoqError::InvalidArgument("weighted_ce_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    for ((lp, t), w) in log_probs.iter().zip(targets).zip(weights) {
        if lp.nrows() != t.len() || t.len() != w.len() {
            return Err(EmoqError::shape(
                "weighted_ce_loss sequence",
                format!("{} positions", lp.nrows()),
                format!("{} targets, {} weights", t.len(), w.len()),
            ));
        }
        for (j, (&tok, &wj)) in t.iter().zip(w).enumerate() {
            if tok >= lp.ncols() {
                return Err(EmoqError::InvalidArgument(format!(
                    "target {tok} outside vocabulary of {}",
                    lp.ncols()
                )));
            }
            total -= wj * lp[[j, tok]];
        }
    }
    Ok(total / log_probs.len() as f64)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// One sequence's contribution to the weighted CE on a graph.
///
/// `logits` is the `T × |V|` decoder output; target `j` sits at absolute
/// input position `answer_start + j` and is scored by logits row
/// `answer_start + j - 1`. The node value is the sequence's weighted NLL
/// divided by `batch_size`.
pub fn graph_weighted_ce(
    g: &mut Graph,
    logits: NodeId,
    answer_start: usize,
    targets: &[usize],
    weights: &[f64],
    batch_size: usize,
) -> Result<(NodeId, f64)> {
    let (rows, vocab) = g.shape(logits);
    if targets.len() != weights.len() || answer_start == 0 || answer_start + targets.len() > rows {
        return Err(EmoqError::shape(
            "graph_weighted_ce",
            format!("answer within {rows} positions"),
            format!("start {answer_start}, {} targets, {} weights", targets.len(), weights.len()),
        ));
    }
    let values = g.value(logits);
    let n = batch_size as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros((rows, vocab));
    for (j, (&tok, &w)) in targets.iter().zip(weights).enumerate() {
        if tok >= vocab {
            return Err(EmoqError::InvalidArgument(format!("target {tok} outside vocabulary of {vocab}")));
        }
        let row = answer_start + j - 1;
        let lv = values.row(row);
        let lse = log_sum_exp(lv.iter().copied());
        loss -= w * (lv[tok] - lse);
        for (v, &l) in lv.iter().enumerate() {
            let p = (l - lse).exp();
            grad[[row, v]] += w / n * (p - if v == tok { 1.0 } else { 0.0 });
        }
    }
    let value = loss / n;
    Ok((g.fused_scalar(value, vec![(logits, grad)])?, value))
}

/// Softmax over the emotion-word logits of `h_T · W_o`.
pub fn extract_emotion_posteriors(
    h_t: &Array1<f64>,
    decoder: &dyn DecoderAdapter,
    vocab: &EmotionVocabulary,
) -> Result<Vec<f64>> {
    let w_o = decoder.output_matrix();
    if h_t.len() != w_o.nrows() {
        return Err(EmoqError::shape(
            "extract_emotion_posteriors",
            format!("width {}", w_o.nrows()),
            format!("width {}", h_t.len()),
        ));
    }
    let selected = selected_logits(&h_t.dot(w_o), vocab.token_index())?;
    Ok(softmax(&selected))
}

/// Pick `logits[k_c]` for every class.
pub fn selected_logits(logits: &Array1<f64>, token_index: &[usize]) -> Result<Vec<f64>> {
    token_index
        .iter()
        .map(|&k| {
            logits.get(k).copied().ok_or_else(|| {
                EmoqError::InvalidArgument(format!("emotion token {k} outside vocabulary of {}", logits.len()))
            })
        })
        .collect()
}

/// Arg-max; ties go to the lowest index.
pub fn predict_label(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}
