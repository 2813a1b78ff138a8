use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::{TokenizerAdapter, ANSWER_PREFIX, AUDIO_SENTINEL};
use crate::error::{EmoqError, Result};
use crate::harness::manifest::UtteranceRecord;

/// Class names and their decoder vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionVocabulary {
    classes: Vec<String>,
    /// First token of each class name.
    token_index: Vec<usize>,
    /// Every token of every class name.
    emotion_tokens: BTreeSet<usize>,
    answer_prefix: Vec<usize>,
}

impl EmotionVocabulary {
    pub fn new(classes: &[String], tokenizer: &dyn TokenizerAdapter) -> Result<Self> {
        if classes.is_empty() {
            return Err(EmoqError::Config("emotion vocabulary needs at least one class".into()));
        }
        let mut token_index = Vec::with_capacity(classes.len());
        let mut emotion_tokens = BTreeSet::new();
        for name in classes {
            let ids = tokenizer.tokenize(name);
            let first = *ids
                .first()
                .ok_or_else(|| EmoqError::Config(format!("class name `{name}` produced no tokens")))?;
            if token_index.contains(&first) {
                return Err(EmoqError::Config(format!(
                    "class `{name}` shares its first token {first} with another class"
                )));
            }
            token_index.push(first);
            emotion_tokens.extend(ids);
        }
        Ok(Self {
            classes: classes.to_vec(),
            token_index,
            emotion_tokens,
            answer_prefix: tokenizer.tokenize(ANSWER_PREFIX),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Decoder id `k_c` for class `c`.
    pub fn token_index(&self) -> &[usize] {
        &self.token_index
    }

    pub fn answer_prefix(&self) -> &[usize] {
        &self.answer_prefix
    }

    pub fn is_emotion_token(&self, id: usize) -> bool {
        self.emotion_tokens.contains(&id)
    }
}

/// Line-oriented prompt layout. `{classes}`, `{speaker}` and `{transcript}`
/// are substituted; a line whose field is absent is dropped entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_line: String,
    pub speaker_line: Option<String>,
    pub transcript_line: Option<String>,
    pub audio_line: Option<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_line: "You are an emotion recognition system. Classify the emotion as one of: {classes}."
                .into(),
            speaker_line: Some("Speaker: {speaker}".into()),
            transcript_line: Some("Transcript: {transcript}".into()),
            audio_line: Some(format!("Audio: {AUDIO_SENTINEL}")),
        }
    }
}

impl PromptTemplate {
    /// Template without the audio line.
    pub fn text_only() -> Self {
        Self {
            audio_line: None,
            ..Self::default()
        }
    }

    /// Template without the transcript line.
    pub fn audio_only() -> Self {
        Self {
            transcript_line: None,
            ..Self::default()
        }
    }

    pub fn has_audio(&self) -> bool {
        self.audio_line.is_some()
    }

    fn validate(&self) -> Result<()> {
        if let Some(line) = &self.audio_line {
            if line.matches(AUDIO_SENTINEL).count() != 1 {
                return Err(EmoqError::Config(format!(
                    "audio line `{line}` must contain exactly one {AUDIO_SENTINEL}"
                )));
            }
        }
        let others = [Some(&self.system_line), self.speaker_line.as_ref(), self.transcript_line.as_ref()];
        if others.into_iter().flatten().any(|l| l.contains(AUDIO_SENTINEL)) {
            return Err(EmoqError::Config(format!(
                "{AUDIO_SENTINEL} may only appear in the audio line"
            )));
        }
        Ok(())
    }
}

/// A rendered, tokenized prompt plus its answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    /// Prompt text, one line per template line.
    pub text: String,
    /// Prompt tokens; lines are separated (and terminated) by the newline id.
    pub input_tokens: Vec<usize>,
    /// Position of the `<AUDIO>` sentinel in `input_tokens`, if any.
    pub placeholder_pos: Option<usize>,
    /// Answer text, e.g. `Emotion: neutral`. Empty when the label is unknown.
    pub answer_text: String,
    /// Answer tokens `Emotion:` + class tokens.
    pub target_tokens: Vec<usize>,
    pub token_weights: Vec<f64>,
    pub speaker: Option<String>,
    pub transcript: String,
}

/// Fill the template for one utterance.
pub fn render_prompt(
    record: &UtteranceRecord,
    template: &PromptTemplate,
    vocab: &EmotionVocabulary,
    tokenizer: &dyn TokenizerAdapter,
    emotion_weight: f64,
) -> Result<PromptInstance> {
    template.validate()?;
    if record.transcript.split_whitespace().any(|w| w == AUDIO_SENTINEL) {
        return Err(EmoqError::Data(format!(
            "utterance {}: transcript contains the reserved {AUDIO_SENTINEL} token",
            record.id
        )));
    }
    let mut lines = vec![template
        .system_line
        .replace("{classes}", &vocab.classes().join(", "))];
    if let (Some(line), Some(speaker)) = (&template.speaker_line, &record.speaker) {
        lines.push(line.replace("{speaker}", speaker));
    }
    if let Some(line) = &template.transcript_line {
        lines.push(line.replace("{transcript}", &record.transcript));
    }
    if let Some(line) = &template.audio_line {
        lines.push(line.clone());
    }

    let mut input_tokens = Vec::new();
    for line in &lines {
        input_tokens.extend(tokenizer.tokenize(line));
        input_tokens.push(tokenizer.newline_token());
    }
    let audio_id = tokenizer.audio_token();
    let placeholders: Vec<usize> = input_tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == audio_id)
        .map(|(i, _)| i)
        .collect();
    let placeholder_pos = match (template.has_audio(), placeholders.as_slice()) {
        (true, [pos]) => Some(*pos),
        (false, []) => None,
        _ => {
            return Err(EmoqError::Data(format!(
                "utterance {}: expected {} audio placeholder(s), found {}",
                record.id,
                usize::from(template.has_audio()),
                placeholders.len()
            )))
        }
    };

    let (answer_text, target_tokens) = match record.label {
        Some(label) => {
            let name = vocab.classes().get(label).ok_or_else(|| {
                EmoqError::Data(format!("utterance {}: unknown label index {label}", record.id))
            })?;
            let text = format!("{ANSWER_PREFIX} {name}");
            let tokens = tokenizer.tokenize(&text);
            (text, tokens)
        }
        None => (String::new(), Vec::new()),
    };
    let token_weights = assign_token_weights(&target_tokens, vocab, emotion_weight)?;
    Ok(PromptInstance {
        text: lines.join("\n"),
        input_tokens,
        placeholder_pos,
        answer_text,
        target_tokens,
        token_weights,
        speaker: record.speaker.clone(),
        transcript: record.transcript.clone(),
    })
}

/// `emotion_weight` on emotion-word tokens, 1 elsewhere.
pub fn assign_token_weights(
    target_tokens: &[usize],
    vocab: &EmotionVocabulary,
    emotion_weight: f64,
) -> Result<Vec<f64>> {
    if !(emotion_weight >= 1.0) {
        return Err(EmoqError::Config(format!(
            "emotion_weight must be >= 1, got {emotion_weight}"
        )));
    }
    Ok(target_tokens
        .iter()
        .map(|&t| if vocab.is_emotion_token(t) { emotion_weight } else { 1.0 })
        .collect())
}
