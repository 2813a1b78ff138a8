//! Two-stage training: fusion pre-training under MAL with an auxiliary head,
//! then instruction tuning of fusion + projector + LoRA through a frozen
//! decoder.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod stage1;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{AudioEncoderAdapter, TokenizerAdapter};
use crate::error::{EmoqError, Result};
use crate::fusion::EmbeddingSequence;
use crate::harness::manifest::{DatasetManifest, UtteranceRecord};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{train_stage2, EmoqModel, StageTwoConfig, StageTwoOutcome};
pub use optim::{AdamW, AdamWConfig};
pub use stage1::{train_stage1, StageOneConfig, StageOneOutcome};

/// How audio and text reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Mean-pooled projected audio as the soft prompt; no transcript line.
    AudioOnly,
    /// Transcript only; no `<AUDIO>` line.
    TextOnly,
    /// Mean-pooled projected audio as the soft prompt plus the transcript.
    ConcatNoFusion,
    /// Fused embedding as the soft prompt plus the transcript.
    Full,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::AudioOnly,
        Modality::TextOnly,
        Modality::ConcatNoFusion,
        Modality::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::AudioOnly => "audio_only",
            Modality::TextOnly => "text_only",
            Modality::ConcatNoFusion => "concat_no_fusion",
            Modality::Full => "full",
        }
    }

    pub fn uses_fusion(self) -> bool {
        self == Modality::Full
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EmoqError::Config(format!("unknown modality `{s}`")))
    }
}

/// An utterance with its audio encoded and transcript tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record: UtteranceRecord,
    pub audio: EmbeddingSequence,
    pub text_tokens: Vec<usize>,
}

impl Example {
    pub fn label(&self) -> Result<usize> {
        self.record
            .label
            .ok_or_else(|| EmoqError::Data(format!("utterance {} has no label", self.record.id)))
    }
}

/// Encode every record of `manifest`. The audio encoder is frozen and runs
/// once here, never inside a training step.
pub fn encode_dataset(
    manifest: &DatasetManifest,
    encoder: &dyn AudioEncoderAdapter,
    tokenizer: &dyn TokenizerAdapter,
) -> Result<Vec<Example>> {
    (0..manifest.records.len())
        .map(|i| {
            let record = manifest.records[i].clone();
            let audio = encoder.encode(&manifest.audio_ref(i))?;
            let text_tokens = tokenizer.tokenize(&record.transcript);
            Ok(Example {
                record,
                audio,
                text_tokens,
            })
        })
        .collect()
}

/// Labels of `examples`, erroring on any unlabeled record.
pub fn labels_of(examples: &[Example]) -> Result<Vec<usize>> {
    examples.iter().map(Example::label).collect()
}

pub(crate) fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(EmoqError::Numeric(format!("{what} loss is {loss}")))
    }
}
