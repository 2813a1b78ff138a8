//! Flat run configuration. Every key is optional in the file; unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{LoraConfig, TinyDecoderConfig};
use crate::encoders::{StubAudioEncoder, STUB_VOCAB};
use crate::error::{EmoqError, Result};
use crate::fusion::FusionConfig;
use crate::losses::LossConfig;
use crate::pipeline::{AdamWConfig, Modality, StageOneConfig, StageTwoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Audio encoder stub.
    pub d_a: usize,
    pub frame_hop: f64,
    pub encoder_seed: u64,

    // Fusion block.
    pub d_h: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_queries: usize,
    pub pooling_heads: usize,
    pub ffn_mult: usize,

    // Stage-1 objective.
    pub tau: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    pub lambda: f64,
    pub use_scl: bool,
    pub use_focal: bool,

    // Stage 1.
    pub stage1_epochs: usize,
    pub stage1_batch_size: usize,
    pub stage1_lr: f64,
    /// Auxiliary head width; `0` means `d_h`.
    pub aux_hidden: usize,
    pub aux_dropout: f64,

    // Stage 2.
    pub stage2_epochs: usize,
    pub stage2_batch_size: usize,
    pub stage2_lr: f64,
    pub emotion_weight: f64,
    pub modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_checkpoint: Option<PathBuf>,

    // LoRA.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub lora_targets: Vec<String>,

    // Optimizer.
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    // Decoder.
    pub decoder: String,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_mult: usize,
    pub decoder_max_len: usize,
    pub decoder_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        let loss = LossConfig::default();
        let lora = LoraConfig::default();
        let dec = TinyDecoderConfig::default();
        let enc = StubAudioEncoder::default();
        let opt = AdamWConfig::default();
        Self {
            seed: 0,
            d_a: fusion.d_a,
            frame_hop: enc.frame_hop,
            encoder_seed: enc.seed,
            d_h: fusion.d_h,
            num_layers: fusion.num_layers,
            num_heads: fusion.num_heads,
            num_queries: fusion.num_queries,
            pooling_heads: fusion.pooling_heads,
            ffn_mult: fusion.ffn_mult,
            tau: loss.tau,
            gamma: loss.gamma,
            alpha: loss.alpha,
            lambda: loss.lambda,
            use_scl: true,
            use_focal: true,
            stage1_epochs: 10,
            stage1_batch_size: 8,
            stage1_lr: 1e-5,
            aux_hidden: 0,
            aux_dropout: 0.1,
            stage2_epochs: 3,
            stage2_batch_size: 8,
            stage2_lr: 1e-5,
            emotion_weight: 5.0,
            modality: Modality::Full,
            stage1_checkpoint: None,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_dropout: lora.dropout,
            lora_targets: lora.targets,
            weight_decay: opt.weight_decay,
            grad_clip: opt.grad_clip,
            adam_beta1: opt.beta1,
            adam_beta2: opt.beta2,
            adam_eps: opt.eps,
            decoder: "tiny".into(),
            decoder_width: dec.width,
            decoder_layers: dec.layers,
            decoder_heads: dec.heads,
            decoder_ffn_mult: dec.ffn_mult,
            decoder_max_len: dec.max_len,
            decoder_seed: dec.seed,
        }
    }
}

impl RunConfig {
    /// Small widths and larger learning rates for runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            d_a: 16,
            d_h: 8,
            num_layers: 1,
            num_heads: 2,
            num_queries: 4,
            pooling_heads: 2,
            stage1_epochs: 60,
            stage1_lr: 3e-3,
            stage2_epochs: 12,
            stage2_lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::default().overlay_toml(text)
    }

    /// Keys in `text` replace the matching fields of `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| EmoqError::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(self).map_err(|e| EmoqError::Config(e.to_string()))?;
        table.extend(overlay);
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| EmoqError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides, values in TOML syntax; bare words are
    /// taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut text = String::new();
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| EmoqError::Config(format!("override `{item}` is not key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let literal = if toml::from_str::<toml::Table>(&format!("v = {value}")).is_ok() {
                value.to_string()
            } else {
                toml::Value::String(value.to_string()).to_string()
            };
            text.push_str(&format!("{key} = {literal}\n"));
        }
        self.overlay_toml(&text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EmoqError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| EmoqError::Config(format!("{}: {e}", path.display())))
    }

    /// As [`RunConfig::load`], overlaying the file onto `self`.
    pub fn load_over(&self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EmoqError::Config(format!("{}: {e}", path.display())))?;
        self.overlay_toml(&text).map_err(|e| EmoqError::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical text form: fixed key order, shortest round-trip floats.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion_config().validate()?;
        self.loss_config().validate()?;
        self.lora_config().validate()?;
        self.decoder_config().validate()?;
        self.stage_one().validate()?;
        self.stage_two().validate()?;
        if !(self.frame_hop > 0.0) {
            return Err(EmoqError::Config(format!("frame_hop must be > 0, got {}", self.frame_hop)));
        }
        if self.decoder != "tiny" {
            return Err(EmoqError::Config(format!(
                "decoder `{}` has no built-in adapter; attach external decoders through the library",
                self.decoder
            )));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            d_a: self.d_a,
            d_h: self.d_h,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            num_queries: self.num_queries,
            pooling_heads: self.pooling_heads,
            ffn_mult: self.ffn_mult,
            text_vocab: STUB_VOCAB,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            gamma: self.gamma,
            alpha: self.alpha.clone(),
            lambda: self.lambda,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            targets: self.lora_targets.clone(),
        }
    }

    pub fn decoder_config(&self) -> TinyDecoderConfig {
        TinyDecoderConfig {
            vocab_size: STUB_VOCAB,
            width: self.decoder_width,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ffn_mult: self.decoder_ffn_mult,
            max_len: self.decoder_max_len,
            seed: self.decoder_seed,
        }
    }

    pub fn encoder(&self) -> StubAudioEncoder {
        StubAudioEncoder::new(self.d_a, self.frame_hop, self.encoder_seed)
    }

    pub fn optimizer(&self, learning_rate: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn stage_one(&self) -> StageOneConfig {
        StageOneConfig {
            epochs: self.stage1_epochs,
            batch_size: self.stage1_batch_size,
            optimizer: self.optimizer(self.stage1_lr),
            loss: self.loss_config(),
            use_scl: self.use_scl,
            use_focal: self.use_focal,
            aux_hidden: if self.aux_hidden == 0 { self.d_h } else { self.aux_hidden },
            aux_dropout: self.aux_dropout,
            seed: self.seed,
        }
    }

    pub fn stage_two(&self) -> StageTwoConfig {
        StageTwoConfig {
            epochs: self.stage2_epochs,
            batch_size: self.stage2_batch_size,
            optimizer: self.optimizer(self.stage2_lr),
            lora: self.lora_config(),
            emotion_weight: self.emotion_weight,
            modality: self.modality,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.tau, c.gamma, c.lambda), (0.07, 2.0, 1.0));
        assert_eq!((c.lora_rank, c.lora_dropout), (16, 0.1));
        assert_eq!((c.stage1_lr, c.stage1_batch_size), (1e-5, 8));
        assert_eq!((c.d_a, c.d_h), (1024, 768));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig {
            alpha: Some(vec![0.5, 1.5]),
            stage1_checkpoint: Some("ck/stage1.emqc".into()),
            ..RunConfig::desk()
        };
        let text = c.canonical_text();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_text(), text);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn partial_files_and_errors() {
        let c = RunConfig::from_toml("d_h = 16\nnum_heads = 4\n").unwrap();
        assert_eq!(c.d_h, 16);
        assert_eq!(c.tau, 0.07);
        let unknown = RunConfig::from_toml("d_hh = 16\n").unwrap_err();
        assert_eq!(unknown.exit_code(), 2);
        assert!(RunConfig::from_toml("d_h = 10\nnum_heads = 4\n").is_err());
        assert!(RunConfig::from_toml("stage1_batch_size = 1\n").is_err());
        assert!(RunConfig::from_toml("decoder = \"qwen\"\n").is_err());
        assert!(RunConfig::from_toml("modality = \"video\"\n").is_err());
    }

    #[test]
    fn overlay_and_overrides() {
        let desk = RunConfig::desk();
        let c = desk.overlay_toml("stage1_epochs = 5\n").unwrap();
        assert_eq!((c.stage1_epochs, c.d_h), (5, 8));
        let c = desk
            .with_overrides(&["lora_rank=4".into(), "modality=text_only".into(), "lora_targets=[\"q\",\"k\"]".into()])
            .unwrap();
        assert_eq!(c.lora_rank, 4);
        assert_eq!(c.modality, Modality::TextOnly);
        assert_eq!(c.lora_targets, vec!["q", "k"]);
        assert_eq!(desk.with_overrides(&["nope=1".into()]).unwrap_err().exit_code(), 2);
        assert!(desk.with_overrides(&["d_h".into()]).is_err());
    }
}
