use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{AdamW, AdamWConfig};
use super::{check_finite, labels_of, Example};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{EmoqError, Result};
use crate::fusion::{graph_forward, FusionConfig, TextInput};
use crate::harness::config::RunConfig;
use crate::harness::metrics::compute_metrics;
use crate::init;
use crate::losses::{compute_class_weights, graph_focal, graph_scl, label_counts, LossConfig};

pub const AUX_HIDDEN_W: &str = "aux.hidden.w";
pub const AUX_HIDDEN_B: &str = "aux.hidden.b";
pub const AUX_OUT_W: &str = "aux.out.w";
pub const AUX_OUT_B: &str = "aux.out.b";
pub const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub use_scl: bool,
    /// With focal off the classification term is plain cross-entropy.
    pub use_focal: bool,
    pub aux_hidden: usize,
    pub aux_dropout: f64,
    pub seed: u64,
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(EmoqError::Config(format!(
                "stage-1 batch size must be >= 2 for the contrastive term, got {}",
                self.batch_size
            )));
        }
        if self.aux_hidden == 0 || !(0.0..1.0).contains(&self.aux_dropout) {
            return Err(EmoqError::Config("aux head needs width >= 1 and dropout in [0, 1)".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Result of stage 1. The checkpoint holds fusion weights only; the
/// auxiliary head is returned separately for inspection and then dropped.
#[derive(Debug, Clone)]
pub struct StageOneOutcome {
    pub checkpoint: Checkpoint,
    pub aux_head: ParamStore,
    pub epoch_losses: Vec<f64>,
    /// Aux-head accuracy on the training set with the selected weights.
    pub train_accuracy: f64,
    /// Best validation WA, when a validation set was given.
    pub best_validation_wa: Option<f64>,
}

fn init_aux<R: rand::Rng>(d_h: usize, hidden: usize, classes: usize, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(AUX_HIDDEN_W, init::fan_in(rng, d_h, hidden), true);
    store.insert(AUX_HIDDEN_B, init::zeros(1, hidden), true);
    store.insert(AUX_OUT_W, init::fan_in(rng, hidden, classes), true);
    store.insert(AUX_OUT_B, init::zeros(1, classes), true);
    store
}

/// Fused embeddings (`N × d_h`) for a batch, on `g`.
pub(crate) fn fused_batch(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    batch: &[&Example],
) -> Result<NodeId> {
    let rows = batch
        .iter()
        .map(|ex| {
            graph_forward(g, cfg, store, &ex.audio, TextInput::Tokens(&ex.text_tokens)).map(|n| n.fused)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

fn aux_logits(
    g: &mut Graph,
    store: &ParamStore,
    embeddings: NodeId,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let w1 = g.param(store, AUX_HIDDEN_W)?;
    let b1 = g.param(store, AUX_HIDDEN_B)?;
    let w2 = g.param(store, AUX_OUT_W)?;
    let b2 = g.param(store, AUX_OUT_B)?;
    let h = g.affine(embeddings, w1, b1)?;
    let h = g.gelu(h);
    let h = g.dropout(h, dropout, rng)?;
    g.affine(h, w2, b2)
}

/// Aux-head predictions in eval mode.
pub fn aux_predict(cfg: &FusionConfig, store: &ParamStore, examples: &[Example]) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let mut g = Graph::new();
        let refs: Vec<&Example> = chunk.iter().collect();
        let emb = fused_batch(&mut g, cfg, store, &refs)?;
        let logits = aux_logits(&mut g, store, emb, 0.0, &mut rng)?;
        for row in g.value(logits).rows() {
            out.push(crate::bridge::predict_label(row.as_slice().expect("standard layout")));
        }
    }
    Ok(out)
}

/// Pre-train the fusion block with the auxiliary head under MAL.
pub fn train_stage1(
    train: &[Example],
    validation: Option<&[Example]>,
    labels: &[String],
    run: &RunConfig,
) -> Result<StageOneOutcome> {
    let cfg = run.stage_one();
    cfg.validate()?;
    let fusion_cfg = run.fusion_config();
    fusion_cfg.validate()?;
    let classes = labels.len();
    let train_labels = labels_of(train)?;
    if train.len() < 2 {
        return Err(EmoqError::Data("stage 1 needs at least two labeled utterances".into()));
    }
    let alpha = match (&cfg.loss.alpha, cfg.use_focal) {
        (_, false) => vec![1.0; classes],
        (Some(a), true) if a.len() == classes => a.clone(),
        (Some(a), true) => {
            return Err(EmoqError::Config(format!("alpha has {} entries for {classes} classes", a.len())))
        }
        (None, true) => compute_class_weights(&label_counts(&train_labels, classes)?)?,
    };
    let gamma = if cfg.use_focal { cfg.loss.gamma } else { 0.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = crate::fusion::init_params(&fusion_cfg, &mut rng);
    store.merge(init_aux(fusion_cfg.d_h, cfg.aux_hidden, classes, &mut rng));
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && cfg.use_scl {
                log::warn!("epoch {epoch}: skipping a single-sample batch (contrastive term undefined)");
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let emb = fused_batch(&mut g, &fusion_cfg, &store, &batch)?;
            let logits = aux_logits(&mut g, &store, emb, cfg.aux_dropout, &mut rng)?;
            let (focal, _) = graph_focal(&mut g, logits, &y, &alpha, gamma)?;
            let cls = g.scale(focal, cfg.loss.lambda);
            let loss = if cfg.use_scl {
                let (scl, _) = graph_scl(&mut g, emb, &y, cfg.loss.tau)?;
                g.add(scl, cls)?
            } else {
                cls
            };
            let value = g.scalar(loss);
            check_finite(value, "stage-1")?;
            let grads = g.backward(loss)?.by_name();
            opt.step(&mut store, &grads)?;
            total += value;
            batches += 1;
        }
        let mean = if batches == 0 { f64::NAN } else { total / batches as f64 };
        log::debug!("stage 1 epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        if let Some(valid) = validation.filter(|v| !v.is_empty()) {
            let pred = aux_predict(&fusion_cfg, &store, valid)?;
            let wa = compute_metrics(&pred, &labels_of(valid)?, classes)?.wa;
            if best.as_ref().is_none_or(|(b, _)| wa > *b) {
                best = Some((wa, store.clone()));
            }
        }
    }

    let best_validation_wa = best.as_ref().map(|(wa, _)| *wa);
    if let Some((_, selected)) = best {
        store = selected;
    }
    let train_accuracy = {
        let pred = aux_predict(&fusion_cfg, &store, train)?;
        compute_metrics(&pred, &train_labels, classes)?.wa
    };
    let mut metrics = BTreeMap::from([("train_accuracy".to_string(), train_accuracy)]);
    if let Some(&last) = epoch_losses.last() {
        metrics.insert("final_loss".into(), last);
    }
    if let Some(wa) = best_validation_wa {
        metrics.insert("validation_wa".into(), wa);
    }
    let aux_head = store.filter_prefix(AUX_PREFIX);
    let fusion = store.filter_prefix("fusion.");
    Ok(StageOneOutcome {
        checkpoint: Checkpoint::new("stage1", labels.to_vec(), run.clone(), metrics, &fusion),
        aux_head,
        epoch_losses,
        train_accuracy,
        best_validation_wa,
    })
}
