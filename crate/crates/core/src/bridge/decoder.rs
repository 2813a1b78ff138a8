use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{down_name, graph_lora_delta, up_name, LoraContext};
use crate::autodiff::{AttnMask, Graph, Mat, NodeId, ParamStore};
use crate::error::{EmoqError, Result};
use crate::fusion::multi_head_attention;
use crate::init;

/// An autoregressive decoder that soft prompts can be injected into.
///
/// The base weights are frozen; the only trainable path through a decoder is
/// the optional LoRA context handed to [`DecoderAdapter::forward_hidden`].
pub trait DecoderAdapter {
    /// Embedding width `d_l`.
    fn width(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn num_layers(&self) -> usize;
    /// Frozen base parameters.
    fn params(&self) -> &ParamStore;
    /// Token embedding rows (`T × d_l`).
    fn embed(&self, tokens: &[usize]) -> Result<Mat>;
    /// Output vocabulary projection `W_o` (`d_l × |V|`).
    fn output_matrix(&self) -> &Mat;
    /// Final hidden states (`T × d_l`) for the embedded input sequence.
    fn forward_hidden(
        &self,
        g: &mut Graph,
        embeddings: NodeId,
        lora: Option<&mut LoraContext<'_>>,
    ) -> Result<NodeId>;

    /// Vocabulary logits `hidden · W_o`.
    fn forward_logits(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        let w_o = g.constant(self.output_matrix().clone());
        g.matmul(hidden, w_o)
    }

    /// Eval-mode forward of plain embeddings: `(hidden, logits)`.
    fn forward(&self, embeddings: &Mat, lora: Option<&mut LoraContext<'_>>) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let hidden = self.forward_hidden(&mut g, x, lora)?;
        let logits = self.forward_logits(&mut g, hidden)?;
        Ok((g.value(hidden).clone(), g.value(logits).clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyDecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TinyDecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            width: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_len: 128,
            seed: 0,
        }
    }
}

impl TinyDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.width, self.layers, self.heads, self.ffn_mult, self.max_len].contains(&0) {
            return Err(EmoqError::Config("decoder dimensions must all be >= 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(EmoqError::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

pub const EMBED: &str = "decoder.embed";
pub const POSITIONS: &str = "decoder.pos";
pub const FINAL_LN_G: &str = "decoder.final_ln_g";
pub const FINAL_LN_B: &str = "decoder.final_ln_b";
pub const LM_HEAD: &str = "decoder.lm_head";

fn layer_param(layer: usize, name: &str) -> String {
    format!("decoder.layer{layer}.{name}")
}

/// Built-in causal transformer decoder, randomly initialized from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDecoder {
    config: TinyDecoderConfig,
    store: ParamStore,
}

impl TinyDecoder {
    pub fn new(config: TinyDecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width;
        let ffn = config.ffn_mult * d;
        let mut store = ParamStore::new();
        store.insert(EMBED, init::normal(&mut rng, config.vocab_size, d, 1.0), false);
        store.insert(POSITIONS, init::normal(&mut rng, config.max_len, d, 0.1), false);
        for layer in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                store.insert(layer_param(layer, &format!("{ln}_g")), init::ones(1, d), false);
                store.insert(layer_param(layer, &format!("{ln}_b")), init::zeros(1, d), false);
            }
            for p in ["wq", "wk", "wv", "wo"] {
                store.insert(layer_param(layer, p), init::fan_in(&mut rng, d, d), false);
            }
            for p in ["bq", "bk", "bv", "bo"] {
                store.insert(layer_param(layer, p), init::zeros(1, d), false);
            }
            store.insert(layer_param(layer, "w1"), init::fan_in(&mut rng, d, ffn), false);
            store.insert(layer_param(layer, "b1"), init::zeros(1, ffn), false);
            store.insert(layer_param(layer, "w2"), init::fan_in(&mut rng, ffn, d), false);
            store.insert(layer_param(layer, "b2"), init::zeros(1, d), false);
        }
        store.insert(FINAL_LN_G, init::ones(1, d), false);
        store.insert(FINAL_LN_B, init::zeros(1, d), false);
        store.insert(LM_HEAD, init::fan_in(&mut rng, d, config.vocab_size), false);
        Ok(Self { config, store })
    }

    /// Rebuild from stored weights (e.g. a checkpoint), checking every shape.
    pub fn from_store(config: TinyDecoderConfig, mut store: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for (name, p) in reference.store.iter() {
            let got = store.value(name)?.dim();
            if got != p.value.dim() {
                return Err(EmoqError::shape(
                    "decoder parameter",
                    format!("{name} {:?}", p.value.dim()),
                    format!("{got:?}"),
                ));
            }
        }
        store.set_trainable("decoder.", false);
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &TinyDecoderConfig {
        &self.config
    }

    fn projection(
        &self,
        g: &mut Graph,
        layer: usize,
        target: &str,
        h: NodeId,
        lora: &mut Option<&mut LoraContext<'_>>,
    ) -> Result<NodeId> {
        let w = g.param(&self.store, &layer_param(layer, &format!("w{target}")))?;
        let b = g.param(&self.store, &layer_param(layer, &format!("b{target}")))?;
        let base = g.affine(h, w, b)?;
        match lora {
            Some(ctx) if ctx.config.targets_projection(target) => {
                let down = g.param(ctx.store, &down_name(layer, target))?;
                let up = g.param(ctx.store, &up_name(layer, target))?;
                let rate = if ctx.train { ctx.config.dropout } else { 0.0 };
                graph_lora_delta(g, h, base, down, up, ctx.config.scaling(), rate, ctx.rng)
            }
            _ => Ok(base),
        }
    }
}

impl DecoderAdapter for TinyDecoder {
    fn width(&self) -> usize {
        self.config.width
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn num_layers(&self) -> usize {
        self.config.layers
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn embed(&self, tokens: &[usize]) -> Result<Mat> {
        let table = self.store.value(EMBED)?;
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(EmoqError::InvalidArgument(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(table.select(Axis(0), tokens))
    }

    fn output_matrix(&self) -> &Mat {
        self.store.value(LM_HEAD).expect("built with lm head")
    }

    fn forward_hidden(
        &self,
        g: &mut Graph,
        embeddings: NodeId,
        mut lora: Option<&mut LoraContext<'_>>,
    ) -> Result<NodeId> {
        let (len, width) = g.shape(embeddings);
        if width != self.config.width {
            return Err(EmoqError::shape(
                "decoder input",
                format!("width {}", self.config.width),
                format!("width {width}"),
            ));
        }
        if len == 0 || len > self.config.max_len {
            return Err(EmoqError::InvalidArgument(format!(
                "decoder input length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        let pos_table = g.param(&self.store, POSITIONS)?;
        let pos = g.slice_rows(pos_table, 0, len)?;
        let mut x = g.add(embeddings, pos)?;
        for layer in 0..self.config.layers {
            let g1 = g.param(&self.store, &layer_param(layer, "ln1_g"))?;
            let b1 = g.param(&self.store, &layer_param(layer, "ln1_b"))?;
            let h = g.layer_norm(x, g1, b1)?;
            let q = self.projection(g, layer, "q", h, &mut lora)?;
            let k = self.projection(g, layer, "k", h, &mut lora)?;
            let v = self.projection(g, layer, "v", h, &mut lora)?;
            let (heads, _) = multi_head_attention(g, q, k, v, self.config.heads, Some(&AttnMask::Causal))?;
            let attn = self.projection(g, layer, "o", heads, &mut lora)?;
            x = g.add(x, attn)?;

            let g2 = g.param(&self.store, &layer_param(layer, "ln2_g"))?;
            let b2 = g.param(&self.store, &layer_param(layer, "ln2_b"))?;
            let h = g.layer_norm(x, g2, b2)?;
            let w1 = g.param(&self.store, &layer_param(layer, "w1"))?;
            let bias1 = g.param(&self.store, &layer_param(layer, "b1"))?;
            let w2 = g.param(&self.store, &layer_param(layer, "w2"))?;
            let bias2 = g.param(&self.store, &layer_param(layer, "b2"))?;
            let inner = g.affine(h, w1, bias1)?;
            let act = g.gelu(inner);
            let out = g.affine(act, w2, bias2)?;
            x = g.add(x, out)?;
        }
        let fg = g.param(&self.store, FINAL_LN_G)?;
        let fb = g.param(&self.store, FINAL_LN_B)?;
        g.layer_norm(x, fg, fb)
    }

    fn forward_logits(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        let w_o = g.param(&self.store, LM_HEAD)?;
        g.matmul(hidden, w_o)
    }
}
