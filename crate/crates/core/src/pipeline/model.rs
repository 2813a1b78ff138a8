use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{AdamW, AdamWConfig};
use super::{check_finite, labels_of, Example, Modality};
use crate::autodiff::{Graph, Mat, NodeId, ParamStore};
use crate::bridge::lora::{init_lora_params, LoraConfig, LoraContext};
use crate::bridge::{
    extract_emotion_posteriors, graph_weighted_ce, init_projector, predict_label, render_prompt, DecoderAdapter,
    EmotionVocabulary, PromptInstance, PromptTemplate, PROJECTOR_B, PROJECTOR_W,
};
use crate::encoders::TokenizerAdapter;
use crate::error::{EmoqError, Result};
use crate::fusion::{graph_forward, graph_mean_audio, init_params, parameter_shapes, FusionConfig, TextInput};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{compute_metrics, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lora: LoraConfig,
    pub emotion_weight: f64,
    pub modality: Modality,
    pub seed: u64,
}

impl StageTwoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EmoqError::Config("stage-2 batch size must be >= 1".into()));
        }
        if !(self.emotion_weight >= 1.0) {
            return Err(EmoqError::Config(format!(
                "emotion_weight must be >= 1, got {}",
                self.emotion_weight
            )));
        }
        self.optimizer.validate()?;
        self.lora.validate()
    }
}

/// Fusion block, projector and LoRA adapters around a frozen decoder.
pub struct EmoqModel {
    pub config: RunConfig,
    pub modality: Modality,
    pub labels: Vec<String>,
    /// Trainable weights: `fusion.*`, `projector.*` and `lora.*`.
    pub params: ParamStore,
    fusion_cfg: FusionConfig,
    lora_cfg: LoraConfig,
    decoder: Box<dyn DecoderAdapter>,
    tokenizer: Box<dyn TokenizerAdapter>,
    vocab: EmotionVocabulary,
}

impl std::fmt::Debug for EmoqModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmoqModel")
            .field("modality", &self.modality)
            .field("labels", &self.labels)
            .field("params", &self.params.len())
            .finish_non_exhaustive()
    }
}

const MODEL_STREAM: u64 = 0x5eed_0002;

impl EmoqModel {
    /// Fresh stage-2 model. Fusion weights come from `stage1` when given;
    /// projector and adapters always start from their initializers.
    pub fn new(
        run: &RunConfig,
        labels: &[String],
        decoder: Box<dyn DecoderAdapter>,
        tokenizer: Box<dyn TokenizerAdapter>,
        stage1: Option<&Checkpoint>,
    ) -> Result<Self> {
        run.validate()?;
        let fusion_cfg = run.fusion_config();
        let lora_cfg = run.lora_config();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ MODEL_STREAM);
        let mut params = init_params(&fusion_cfg, &mut rng);
        if let Some(ck) = stage1 {
            ck.check_shapes(&parameter_shapes(&fusion_cfg))?;
            for (name, p) in ck.params.iter().filter(|(n, _)| n.starts_with("fusion.")) {
                params.get_mut(name)?.value = p.value.clone();
            }
        }
        params.merge(init_projector(fusion_cfg.d_h, decoder.width(), &mut rng));
        params.merge(init_lora_params(&lora_cfg, decoder.num_layers(), decoder.width(), &mut rng));
        Self::assemble(run, labels, params, decoder, tokenizer)
    }

    /// Rebuild a trained model from a stage-2 checkpoint.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        decoder: Box<dyn DecoderAdapter>,
        tokenizer: Box<dyn TokenizerAdapter>,
    ) -> Result<Self> {
        if ck.stage != "stage2" {
            return Err(EmoqError::Checkpoint(format!("expected a stage2 checkpoint, got {}", ck.stage)));
        }
        let reference = Self::new(&ck.config, &ck.labels, decoder, tokenizer, None)?;
        let expected: Vec<(String, (usize, usize))> = reference
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.dim()))
            .collect();
        ck.check_shapes(&expected)?;
        if ck.params.len() != expected.len() {
            return Err(EmoqError::Checkpoint("checkpoint has tensors this model does not use".into()));
        }
        let mut model = reference;
        model.params = ck.params.clone();
        Ok(model)
    }

    fn assemble(
        run: &RunConfig,
        labels: &[String],
        params: ParamStore,
        decoder: Box<dyn DecoderAdapter>,
        tokenizer: Box<dyn TokenizerAdapter>,
    ) -> Result<Self> {
        if tokenizer.vocab_size() > decoder.vocab_size() {
            return Err(EmoqError::Config(format!(
                "tokenizer vocabulary {} exceeds decoder vocabulary {}",
                tokenizer.vocab_size(),
                decoder.vocab_size()
            )));
        }
        let vocab = EmotionVocabulary::new(labels, tokenizer.as_ref())?;
        Ok(Self {
            config: run.clone(),
            modality: run.modality,
            labels: labels.to_vec(),
            params,
            fusion_cfg: run.fusion_config(),
            lora_cfg: run.lora_config(),
            decoder,
            tokenizer,
            vocab,
        })
    }

    pub fn decoder(&self) -> &dyn DecoderAdapter {
        self.decoder.as_ref()
    }

    pub fn vocab(&self) -> &EmotionVocabulary {
        &self.vocab
    }

    pub fn checkpoint(&self, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint::new("stage2", self.labels.clone(), self.config.clone(), metrics, &self.params)
    }

    fn template(&self) -> PromptTemplate {
        match self.modality {
            Modality::AudioOnly => PromptTemplate::audio_only(),
            Modality::TextOnly => PromptTemplate::text_only(),
            Modality::ConcatNoFusion | Modality::Full => PromptTemplate::default(),
        }
    }

    /// Render the prompt for `ex`; the answer is included only when labeled.
    pub fn prompt(&self, ex: &Example) -> Result<PromptInstance> {
        render_prompt(
            &ex.record,
            &self.template(),
            &self.vocab,
            self.tokenizer.as_ref(),
            self.config.emotion_weight,
        )
    }

    /// Decoder input embeddings with the soft prompt injected.
    fn input_embeddings(&self, g: &mut Graph, ex: &Example, tokens: &[usize], placeholder: Option<usize>) -> Result<NodeId> {
        if tokens.len() > self.decoder.max_len() {
            return Err(EmoqError::Data(format!(
                "utterance {}: {} prompt tokens exceed decoder length {}",
                ex.record.id,
                tokens.len(),
                self.decoder.max_len()
            )));
        }
        let base = g.constant(self.decoder.embed(tokens)?);
        let Some(pos) = placeholder else {
            return Ok(base);
        };
        let soft = match self.modality {
            Modality::Full => {
                graph_forward(g, &self.fusion_cfg, &self.params, &ex.audio, TextInput::Tokens(&ex.text_tokens))?.fused
            }
            Modality::AudioOnly | Modality::ConcatNoFusion => {
                graph_mean_audio(g, &self.fusion_cfg, &self.params, &ex.audio)?
            }
            Modality::TextOnly => return Ok(base),
        };
        let w = g.param(&self.params, PROJECTOR_W)?;
        let b = g.param(&self.params, PROJECTOR_B)?;
        let e_h = g.affine(soft, w, b)?;
        g.replace_row(base, pos, e_h)
    }

    fn hidden(
        &self,
        g: &mut Graph,
        ex: &Example,
        tokens: &[usize],
        placeholder: Option<usize>,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let emb = self.input_embeddings(g, ex, tokens, placeholder)?;
        let mut ctx = LoraContext {
            config: &self.lora_cfg,
            store: &self.params,
            train,
            rng,
        };
        self.decoder.forward_hidden(g, emb, Some(&mut ctx))
    }

    /// Prompt plus answer tokens and the absolute index of the first answer token.
    fn training_tokens(&self, ex: &Example) -> Result<(PromptInstance, Vec<usize>, usize)> {
        let prompt = self.prompt(ex)?;
        if prompt.target_tokens.is_empty() {
            return Err(EmoqError::Data(format!("utterance {} has no label", ex.record.id)));
        }
        let start = prompt.input_tokens.len();
        let mut tokens = prompt.input_tokens.clone();
        tokens.extend(&prompt.target_tokens);
        Ok((prompt, tokens, start))
    }

    /// Decoder input for inference: the prompt followed by `Emotion:`.
    fn inference_tokens(&self, ex: &Example) -> Result<(PromptInstance, Vec<usize>)> {
        let mut unlabeled = ex.clone();
        unlabeled.record.label = None;
        let prompt = self.prompt(&unlabeled)?;
        let mut tokens = prompt.input_tokens.clone();
        tokens.extend(self.vocab.answer_prefix());
        Ok((prompt, tokens))
    }

    /// One optimizer step of weighted CE over `batch`; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&Example], opt: &mut AdamW, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        for ex in batch {
            let (prompt, tokens, start) = self.training_tokens(ex)?;
            let hidden = self.hidden(&mut g, ex, &tokens, prompt.placeholder_pos, true, rng)?;
            let logits = self.decoder.forward_logits(&mut g, hidden)?;
            let (loss, _) = graph_weighted_ce(
                &mut g,
                logits,
                start,
                &prompt.target_tokens,
                &prompt.token_weights,
                batch.len(),
            )?;
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.ok_or_else(|| EmoqError::InvalidArgument("empty stage-2 batch".into()))?;
        let value = g.scalar(total);
        check_finite(value, "stage-2")?;
        let grads = g.backward(total)?.by_name();
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Final hidden state at the `Emotion:` position.
    pub fn answer_state(&self, ex: &Example) -> Result<Array1<f64>> {
        let (prompt, tokens) = self.inference_tokens(ex)?;
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hidden = self.hidden(&mut g, ex, &tokens, prompt.placeholder_pos, false, &mut rng)?;
        let h = g.value(hidden);
        Ok(h.row(h.nrows() - 1).to_owned())
    }

    /// Posterior over the emotion classes.
    pub fn posteriors(&self, ex: &Example) -> Result<Vec<f64>> {
        let h_t = self.answer_state(ex)?;
        extract_emotion_posteriors(&h_t, self.decoder.as_ref(), &self.vocab)
    }

    pub fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        examples.iter().map(|ex| self.posteriors(ex).map(|q| predict_label(&q))).collect()
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<MetricsReport> {
        compute_metrics(&self.predict(examples)?, &labels_of(examples)?, self.labels.len())
    }

    /// Fraction of answer tokens that are the full-vocabulary arg-max under
    /// teacher forcing.
    pub fn answer_token_accuracy(&self, examples: &[Example]) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for ex in examples {
            let (prompt, tokens, start) = self.training_tokens(ex)?;
            let mut g = Graph::new();
            let hidden = self.hidden(&mut g, ex, &tokens, prompt.placeholder_pos, false, &mut rng)?;
            let logits = self.decoder.forward_logits(&mut g, hidden)?;
            let values = g.value(logits);
            for (j, &target) in prompt.target_tokens.iter().enumerate() {
                let row = values.row(start + j - 1);
                hits += usize::from(predict_label(row.as_slice().expect("standard layout")) == target);
                total += 1;
            }
        }
        if total == 0 {
            return Err(EmoqError::InvalidArgument("no answer tokens to score".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    /// Decoder logits for the inference input of `ex`, with or without the
    /// LoRA adapters.
    pub fn decoder_logits(&self, ex: &Example, with_lora: bool) -> Result<Mat> {
        let (prompt, tokens) = self.inference_tokens(ex)?;
        let mut g = Graph::new();
        let emb = self.input_embeddings(&mut g, ex, &tokens, prompt.placeholder_pos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LoraContext {
            config: &self.lora_cfg,
            store: &self.params,
            train: false,
            rng: &mut rng,
        };
        let hidden = self.decoder.forward_hidden(&mut g, emb, with_lora.then_some(&mut ctx))?;
        let logits = self.decoder.forward_logits(&mut g, hidden)?;
        Ok(g.value(logits).clone())
    }
}

#[derive(Debug)]
pub struct StageTwoOutcome {
    pub model: EmoqModel,
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Instruction-tune fusion, projector and LoRA with the decoder frozen.
pub fn train_stage2(
    train: &[Example],
    labels: &[String],
    run: &RunConfig,
    stage1: Option<&Checkpoint>,
    decoder: Box<dyn DecoderAdapter>,
    tokenizer: Box<dyn TokenizerAdapter>,
) -> Result<StageTwoOutcome> {
    let cfg = run.stage_two();
    cfg.validate()?;
    if train.is_empty() {
        return Err(EmoqError::Data("stage 2 needs at least one labeled utterance".into()));
    }
    labels_of(train)?;
    let mut model = EmoqModel::new(run, labels, decoder, tokenizer, stage1)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            total += model.train_step(&batch, &mut opt, &mut rng)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("stage 2 epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let mut metrics = BTreeMap::new();
    if let Some(&last) = epoch_losses.last() {
        metrics.insert("final_loss".to_string(), last);
    }
    let checkpoint = model.checkpoint(metrics);
    // Continue from the stored (f32-rounded) weights so the returned model
    // and a reloaded checkpoint behave identically.
    model.params = checkpoint.params.clone();
    Ok(StageTwoOutcome {
        model,
        checkpoint,
        epoch_losses,
        steps: opt.steps(),
    })
}
