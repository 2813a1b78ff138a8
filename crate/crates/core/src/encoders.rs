//! Audio feature extraction and tokenization seams.
//!
//! Pretrained encoders are never run in-process. Externally computed features
//! enter through [`FeatureFileEncoder`]. [`StubAudioEncoder`] produces
//! deterministic pseudo-features for synthetic descriptors and raw files, so
//! every test runs offline. Tokenization is a whitespace word-hash into a
//! 256-id vocabulary with reserved ids for the prompt machinery.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{EmoqError, Result};
use crate::fusion::{DimRole, EmbeddingSequence};

/// Audio feature extractor. Implementations are frozen: nothing they own is
/// ever handed to an optimizer.
pub trait AudioEncoderAdapter {
    fn d_a(&self) -> usize;
    fn encode(&self, audio: &AudioRef) -> Result<EmbeddingSequence>;
}

/// Where an utterance's audio comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioRef {
    Synthetic(SyntheticAudio),
    File(PathBuf),
}

impl AudioRef {
    /// Resolve relative file paths against `base`.
    pub fn resolved(&self, base: Option<&Path>) -> AudioRef {
        match (self, base) {
            (AudioRef::File(p), Some(dir)) if p.is_relative() => AudioRef::File(dir.join(p)),
            _ => self.clone(),
        }
    }
}

const SYNTHETIC_PREFIX: &str = "synthetic:";

impl FromStr for AudioRef {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix(SYNTHETIC_PREFIX) {
            Some(rest) => rest.parse().map(AudioRef::Synthetic),
            None if s.is_empty() => Err(EmoqError::Data("empty audio reference".into())),
            None => Ok(AudioRef::File(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioRef::Synthetic(s) => write!(f, "{SYNTHETIC_PREFIX}{s}"),
            AudioRef::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Descriptor of a synthetic utterance: seeded noise frames, optionally
/// shifted by `shift` on the feature dimensions `j` with `j % levels == cue`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAudio {
    pub seed: u64,
    pub duration_ms: u64,
    pub cue: Option<usize>,
    pub levels: usize,
    pub shift: f64,
}

impl fmt::Display for SyntheticAudio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seed={};duration_ms={}", self.seed, self.duration_ms)?;
        if let Some(cue) = self.cue {
            write!(f, ";cue={cue};levels={};shift={}", self.levels, self.shift)?;
        }
        Ok(())
    }
}

impl FromStr for SyntheticAudio {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = SyntheticAudio {
            seed: 0,
            duration_ms: 0,
            cue: None,
            levels: 1,
            shift: 0.0,
        };
        let bad = |what: &str| EmoqError::Data(format!("bad synthetic descriptor `{s}`: {what}"));
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match key {
                "seed" => out.seed = value.parse().map_err(|_| bad("seed"))?,
                "duration_ms" => out.duration_ms = value.parse().map_err(|_| bad("duration_ms"))?,
                "cue" => out.cue = Some(value.parse().map_err(|_| bad("cue"))?),
                "levels" => out.levels = value.parse().map_err(|_| bad("levels"))?,
                "shift" => out.shift = value.parse().map_err(|_| bad("shift"))?,
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        if out.duration_ms == 0 {
            return Err(bad("duration_ms must be > 0"));
        }
        if out.levels == 0 {
            return Err(bad("levels must be > 0"));
        }
        Ok(out)
    }
}

/// Frame count for a duration, `ceil(duration / hop)`, computed on integer
/// microseconds.
pub fn frame_count(duration_s: f64, frame_hop_s: f64) -> usize {
    let dur = (duration_s * 1e6).round() as u64;
    let hop = ((frame_hop_s * 1e6).round() as u64).max(1);
    dur.div_ceil(hop).max(1) as usize
}

/// Deterministic pseudo-feature generator.
#[derive(Debug, Clone, PartialEq)]
pub struct StubAudioEncoder {
    pub d_a: usize,
    /// Seconds per frame.
    pub frame_hop: f64,
    pub seed: u64,
}

impl Default for StubAudioEncoder {
    fn default() -> Self {
        Self {
            d_a: 1024,
            frame_hop: 0.02,
            seed: 0,
        }
    }
}

/// Raw files are treated as 16 kHz, 16-bit mono PCM.
const RAW_BYTES_PER_SECOND: f64 = 32_000.0;

impl StubAudioEncoder {
    pub fn new(d_a: usize, frame_hop: f64, seed: u64) -> Self {
        Self { d_a, frame_hop, seed }
    }

    fn noise_frames(&self, seed: u64, frames: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.seed.rotate_left(17));
        // Integer draws mapped exactly onto [-1, 1).
        Mat::from_shape_fn((frames, self.d_a), |_| {
            let u = rng.next_u32();
            f64::from(u) / 2_147_483_648.0 - 1.0
        })
    }

    /// Encode a synthetic descriptor: `ceil(duration / hop)` rows.
    pub fn encode_synthetic(&self, desc: &SyntheticAudio) -> Result<EmbeddingSequence> {
        let frames = frame_count(desc.duration_ms as f64 / 1000.0, self.frame_hop);
        let mut data = self.noise_frames(desc.seed, frames);
        if let Some(cue) = desc.cue {
            if cue >= desc.levels {
                return Err(EmoqError::Data(format!(
                    "cue {cue} out of range for {} levels",
                    desc.levels
                )));
            }
            for j in (cue..self.d_a).step_by(desc.levels) {
                data.column_mut(j).mapv_inplace(|v| v + desc.shift);
            }
        }
        EmbeddingSequence::full(data, DimRole::AudioRaw)
    }

    /// Encode arbitrary file bytes, seeding from their SHA-256.
    pub fn encode_file(&self, path: &Path) -> Result<EmbeddingSequence> {
        let bytes = fs::read(path).map_err(|e| EmoqError::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        let frames = frame_count(bytes.len() as f64 / RAW_BYTES_PER_SECOND, self.frame_hop);
        EmbeddingSequence::full(self.noise_frames(u64::from_le_bytes(seed), frames), DimRole::AudioRaw)
    }
}

impl AudioEncoderAdapter for StubAudioEncoder {
    fn d_a(&self) -> usize {
        self.d_a
    }

    fn encode(&self, audio: &AudioRef) -> Result<EmbeddingSequence> {
        match audio {
            AudioRef::Synthetic(desc) => self.encode_synthetic(desc),
            AudioRef::File(path) if is_feature_file(path) => {
                let rec = read_feature_file(path)?;
                if rec.features.ncols() != self.d_a {
                    return Err(EmoqError::Data(format!(
                        "{}: feature width {} but encoder expects {}",
                        path.display(),
                        rec.features.ncols(),
                        self.d_a
                    )));
                }
                EmbeddingSequence::full(rec.features, DimRole::AudioRaw)
            }
            AudioRef::File(path) => self.encode_file(path),
        }
    }
}

/// Adapter over precomputed per-utterance feature files.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFileEncoder {
    pub d_a: usize,
}

impl AudioEncoderAdapter for FeatureFileEncoder {
    fn d_a(&self) -> usize {
        self.d_a
    }

    fn encode(&self, audio: &AudioRef) -> Result<EmbeddingSequence> {
        let AudioRef::File(path) = audio else {
            return Err(EmoqError::Data(format!("{audio} is not a feature file")));
        };
        let rec = read_feature_file(path)?;
        if rec.features.ncols() != self.d_a {
            return Err(EmoqError::Data(format!(
                "{}: feature width {} but adapter expects {}",
                path.display(),
                rec.features.ncols(),
                self.d_a
            )));
        }
        EmbeddingSequence::full(rec.features, DimRole::AudioRaw)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"EMQF";
const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One utterance's feature matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub features: Mat,
}

/// Serialize: magic `EMQF`, version, id length + UTF-8 id, `L_a`, `d_a`,
/// dtype byte (0 = f32), then the row-major little-endian f32 matrix.
pub fn encode_feature_record(rec: &FeatureRecord) -> Vec<u8> {
    let (rows, cols) = rec.features.dim();
    let mut out = Vec::with_capacity(21 + rec.utterance_id.len() + rows * cols * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.utterance_id.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.utterance_id.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.push(DTYPE_F32);
    for v in rec.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EmoqError::Data("truncated feature record".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_feature_record(bytes: &[u8]) -> Result<FeatureRecord> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(EmoqError::Data("not a feature record (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(EmoqError::Data(format!("unsupported feature record version {version}")));
    }
    let id_len = r.u32()? as usize;
    let utterance_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| EmoqError::Data("feature record id is not UTF-8".into()))?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(EmoqError::Data(format!("unsupported feature dtype {dtype}")));
    }
    let raw = r.take(rows * cols * 4)?;
    if r.pos != bytes.len() {
        return Err(EmoqError::Data("trailing bytes after feature matrix".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let features = Mat::from_shape_vec((rows, cols), values).expect("sized from header");
    Ok(FeatureRecord { utterance_id, features })
}

pub fn write_feature_file(path: &Path, rec: &FeatureRecord) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| EmoqError::io(path, e))?;
    f.write_all(&encode_feature_record(rec)).map_err(|e| EmoqError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| EmoqError::io(path, e))?;
    decode_feature_record(&bytes).map_err(|e| EmoqError::Data(format!("{}: {e}", path.display())))
}

fn is_feature_file(path: &Path) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == FEATURE_MAGIC)
        .unwrap_or(false)
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

pub const AUDIO_SENTINEL: &str = "<AUDIO>";
pub const ANSWER_PREFIX: &str = "Emotion:";

/// Text tokenizer used by both the fusion block and the decoder.
pub trait TokenizerAdapter {
    fn tokenize(&self, text: &str) -> Vec<usize>;
    fn vocab_size(&self) -> usize;
    /// Id of the `<AUDIO>` placeholder.
    fn audio_token(&self) -> usize;
    /// Id separating prompt lines.
    fn newline_token(&self) -> usize;
}

pub const PAD_ID: usize = 0;
pub const NEWLINE_ID: usize = 1;
pub const AUDIO_ID: usize = 2;
pub const ANSWER_PREFIX_ID: usize = 3;
const FIRST_CLASS_ID: usize = 4;
const FIRST_HASHED_ID: usize = 16;
pub const STUB_VOCAB: usize = 256;
pub const MAX_STUB_CLASSES: usize = FIRST_HASHED_ID - FIRST_CLASS_ID;

/// Whitespace word-hash tokenizer over 256 ids.
///
/// Ids 0..16 are reserved: padding, newline, `<AUDIO>`, `Emotion:`, then
/// one id per class name. Every other word hashes (FNV-1a) into 16..256.
#[derive(Debug, Clone, PartialEq)]
pub struct StubTokenizer {
    class_names: Vec<String>,
}

impl StubTokenizer {
    pub fn new(class_names: &[String]) -> Result<Self> {
        if class_names.len() > MAX_STUB_CLASSES {
            return Err(EmoqError::Config(format!(
                "stub tokenizer reserves at most {MAX_STUB_CLASSES} class names, got {}",
                class_names.len()
            )));
        }
        Ok(Self {
            class_names: class_names.to_vec(),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn word_id(&self, word: &str) -> usize {
        if word == AUDIO_SENTINEL {
            return AUDIO_ID;
        }
        if word == ANSWER_PREFIX {
            return ANSWER_PREFIX_ID;
        }
        if let Some(c) = self.class_names.iter().position(|n| n == word) {
            return FIRST_CLASS_ID + c;
        }
        FIRST_HASHED_ID + (fnv1a(word.as_bytes()) % (STUB_VOCAB - FIRST_HASHED_ID) as u64) as usize
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TokenizerAdapter for StubTokenizer {
    fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    fn vocab_size(&self) -> usize {
        STUB_VOCAB
    }

    fn audio_token(&self) -> usize {
        AUDIO_ID
    }

    fn newline_token(&self) -> usize {
        NEWLINE_ID
    }
}

/// `stub_tokenize` with the given class names reserved.
pub fn stub_tokenize(text: &str, class_names: &[String]) -> Result<Vec<usize>> {
    Ok(StubTokenizer::new(class_names)?.tokenize(text))
}
