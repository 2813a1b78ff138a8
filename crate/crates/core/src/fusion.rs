//! Query-based audio/text fusion block.
//!
//! A bank of learnable query vectors is concatenated with the transcript's
//! token embeddings and run through self-attention, so the queries pick up
//! text semantics. The query rows then cross-attend over the projected audio
//! frames (padding masked out), pass through a position-wise FFN, and are
//! reduced to a single vector by multi-head attentive pooling followed by L2
//! normalization.
//!
//! Every block is pre-norm residual: `x + f(LN(x))`. With `num_layers > 1`
//! the text rows are carried through self-attention at every layer while only
//! the query rows receive cross-attention and FFN updates.
//!
//! Parameter names follow `fusion.layer{i}.{self,cross,ffn}.<name>`; see
//! [`parameter_shapes`] for the full schema.

use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Graph, Mat, NodeId, ParamStore, L2_EPS};
use crate::error::{EmoqError, Result};
use crate::init;

/// Threshold under which a pre-normalization vector is reported as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimRole {
    AudioRaw,
    AudioProjected,
    Text,
}

/// Frame or token embeddings with a validity length. Rows at or beyond
/// `valid_length` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    data: Mat,
    valid_length: usize,
    role: DimRole,
}

impl EmbeddingSequence {
    pub fn new(data: Mat, valid_length: usize, role: DimRole) -> Result<Self> {
        let len = data.nrows();
        let empty_text = role == DimRole::Text && len == 0 && valid_length == 0;
        if !empty_text && (valid_length == 0 || valid_length > len) {
            return Err(EmoqError::InvalidArgument(format!(
                "valid_length {valid_length} outside 1..={len}"
            )));
        }
        Ok(Self {
            data,
            valid_length,
            role,
        })
    }

    /// Sequence with no padding.
    pub fn full(data: Mat, role: DimRole) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, n, role)
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Mat {
        &mut self.data
    }

    pub fn valid_length(&self) -> usize {
        self.valid_length
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn role(&self) -> DimRole {
        self.role
    }

    /// Zero-pad to `len` rows, keeping `valid_length`.
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        if len < self.len() {
            return Err(EmoqError::InvalidArgument(format!(
                "cannot pad {} rows down to {len}",
                self.len()
            )));
        }
        let mut data = Mat::zeros((len, self.dim()));
        data.slice_mut(ndarray::s![..self.len(), ..]).assign(&self.data);
        Ok(Self {
            data,
            valid_length: self.valid_length,
            role: self.role,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank(pub Mat);

impl QueryBank {
    pub fn num_queries(&self) -> usize {
        self.0.nrows()
    }
}

/// Binary `N_q × L_a` mask; every row is identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioAttentionMask {
    mask: Array2<u8>,
}

impl AudioAttentionMask {
    pub fn matrix(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn num_queries(&self) -> usize {
        self.mask.nrows()
    }

    pub fn audio_len(&self) -> usize {
        self.mask.ncols()
    }

    pub fn to_attn_mask(&self) -> AttnMask {
        let cols = self.mask.row(0).iter().map(|&m| m == 1).collect();
        AttnMask::Columns(Rc::new(cols))
    }
}

/// Architecture hyperparameters of the fusion block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Raw audio feature width.
    pub d_a: usize,
    /// Hidden width of queries and text embeddings.
    pub d_h: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_queries: usize,
    pub pooling_heads: usize,
    /// FFN inner width as a multiple of `d_h`.
    pub ffn_mult: usize,
    /// Size of the text token embedding table.
    pub text_vocab: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_a: 1024,
            d_h: 768,
            num_layers: 2,
            num_heads: 12,
            num_queries: 32,
            pooling_heads: 4,
            ffn_mult: 4,
            text_vocab: 256,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_a", self.d_a),
            ("d_h", self.d_h),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_queries", self.num_queries),
            ("pooling_heads", self.pooling_heads),
            ("ffn_mult", self.ffn_mult),
            ("text_vocab", self.text_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EmoqError::Config(format!("fusion {name} must be >= 1")));
        }
        if self.d_h % self.num_heads != 0 {
            return Err(EmoqError::Config(format!(
                "d_h {} not divisible by num_heads {}",
                self.d_h, self.num_heads
            )));
        }
        if self.d_h % self.pooling_heads != 0 {
            return Err(EmoqError::Config(format!(
                "d_h {} not divisible by pooling_heads {}",
                self.d_h, self.pooling_heads
            )));
        }
        Ok(())
    }

    /// Per-head key width.
    pub fn d_k(&self) -> usize {
        self.d_h / self.num_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_h
    }
}

pub const AUDIO_PROJ_W: &str = "fusion.audio_proj.w";
pub const AUDIO_PROJ_B: &str = "fusion.audio_proj.b";
pub const QUERIES: &str = "fusion.queries";
pub const TEXT_EMBED: &str = "fusion.text_embed";
pub const POOL_SCORE: &str = "fusion.pool.score";
pub const POOL_PROJ_W: &str = "fusion.pool.proj.w";
pub const POOL_PROJ_B: &str = "fusion.pool.proj.b";

fn layer_name(layer: usize, block: &str, name: &str) -> String {
    format!("fusion.layer{layer}.{block}.{name}")
}

/// Canonical name and shape of every fusion parameter.
pub fn parameter_shapes(cfg: &FusionConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_h;
    let mut out = vec![
        (AUDIO_PROJ_W.to_string(), (cfg.d_a, d)),
        (AUDIO_PROJ_B.to_string(), (1, d)),
        (QUERIES.to_string(), (cfg.num_queries, d)),
        (TEXT_EMBED.to_string(), (cfg.text_vocab, d)),
        (POOL_SCORE.to_string(), (cfg.pooling_heads, d / cfg.pooling_heads)),
        (POOL_PROJ_W.to_string(), (d, d)),
        (POOL_PROJ_B.to_string(), (1, d)),
    ];
    for layer in 0..cfg.num_layers {
        for block in ["self", "cross"] {
            out.push((layer_name(layer, block, "ln_g"), (1, d)));
            out.push((layer_name(layer, block, "ln_b"), (1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((layer_name(layer, block, w), (d, d)));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                out.push((layer_name(layer, block, b), (1, d)));
            }
        }
        out.push((layer_name(layer, "ffn", "ln_g"), (1, d)));
        out.push((layer_name(layer, "ffn", "ln_b"), (1, d)));
        out.push((layer_name(layer, "ffn", "w1"), (d, cfg.ffn_width())));
        out.push((layer_name(layer, "ffn", "b1"), (1, cfg.ffn_width())));
        out.push((layer_name(layer, "ffn", "w2"), (cfg.ffn_width(), d)));
        out.push((layer_name(layer, "ffn", "b2"), (1, d)));
    }
    out
}

/// Fresh, randomly initialized fusion parameters (all trainable).
pub fn init_params<R: Rng>(cfg: &FusionConfig, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, (r, c)) in parameter_shapes(cfg) {
        let value = if name == QUERIES {
            init::normal(rng, r, c, 0.02)
        } else if name == TEXT_EMBED {
            init::normal(rng, r, c, 1.0)
        } else if name == POOL_SCORE {
            init::normal(rng, r, c, 0.02)
        } else if name.ends_with("ln_g") {
            init::ones(r, c)
        } else if r == 1 {
            init::zeros(r, c)
        } else {
            init::fan_in(rng, r, c)
        };
        store.insert(name, value, true);
    }
    store
}

/// Check that `store` holds every fusion parameter with the expected shape.
pub fn check_shapes(cfg: &FusionConfig, store: &ParamStore) -> Result<()> {
    for (name, shape) in parameter_shapes(cfg) {
        let actual = store.value(&name)?.dim();
        if actual != shape {
            return Err(EmoqError::shape(
                "fusion parameter",
                format!("{name} {}x{}", shape.0, shape.1),
                format!("{}x{}", actual.0, actual.1),
            ));
        }
    }
    Ok(())
}

/// Fusion hyperparameters bundled with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub store: ParamStore,
}

impl FusionParams {
    pub fn new<R: Rng>(config: FusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let store = init_params(&config, rng);
        Ok(Self { config, store })
    }

    pub fn from_store(config: FusionConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &store)?;
        Ok(Self { config, store })
    }

    pub fn queries(&self) -> QueryBank {
        QueryBank(self.store.value(QUERIES).expect("validated").clone())
    }
}

/// Unit-norm fused embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    vector: Array1<f64>,
    pre_norm: f64,
}

impl FusedEmbedding {
    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn into_vector(self) -> Array1<f64> {
        self.vector
    }

    /// Euclidean norm of the vector before normalization.
    pub fn pre_norm(&self) -> f64 {
        self.pre_norm
    }

    /// True when the input was too small to normalize meaningfully.
    pub fn is_degenerate(&self) -> bool {
        self.pre_norm <= DEGENERATE_NORM
    }

    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }
}

/// Text side of the fusion input.
#[derive(Debug, Clone, Copy)]
pub enum TextInput<'a> {
    /// Token ids looked up in the trainable embedding table.
    Tokens(&'a [usize]),
    /// Already-embedded sequence of width `d_h`.
    Embedded(&'a EmbeddingSequence),
}

// ---------------------------------------------------------------------------
// Graph-level building blocks
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over already-projected `q`, `k`, `v`.
///
/// Heads are contiguous column slices of width `d / heads`; outputs are
/// concatenated in head order. Returns the concatenated output and the
/// per-head probability maps.
pub fn multi_head_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = g.shape(q).1;
    if g.shape(k).1 != d || g.shape(v).1 != d || g.shape(k).0 != g.shape(v).0 {
        return Err(EmoqError::shape(
            "multi_head_attention",
            format!("q/k/v width {d}"),
            format!("k {:?}, v {:?}", g.shape(k), g.shape(v)),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(EmoqError::InvalidArgument(format!("{heads} heads for width {d}")));
    }
    if let Some(AttnMask::Columns(cols)) = mask {
        if cols.len() != g.shape(k).0 {
            return Err(EmoqError::shape(
                "attention mask",
                format!("{} columns", g.shape(k).0),
                format!("{} columns", cols.len()),
            ));
        }
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, mask);
        outs.push(g.matmul(probs, vh)?);
        maps.push(probs);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((out, maps))
}

fn layer_params(
    g: &mut Graph,
    store: &ParamStore,
    layer: usize,
    block: &str,
    names: &[&str],
) -> Result<Vec<NodeId>> {
    names
        .iter()
        .map(|n| g.param(store, &layer_name(layer, block, n)))
        .collect()
}

/// Raw multi-head attention with the Q/K/V/output projections of one block,
/// no normalization or residual.
pub fn graph_attention(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    layer: usize,
    block: &str,
    queries_in: NodeId,
    keys_in: NodeId,
    mask: Option<&AttnMask>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let p = layer_params(
        g,
        store,
        layer,
        block,
        &["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"],
    )?;
    let q = g.affine(queries_in, p[0], p[1])?;
    let k = g.affine(keys_in, p[2], p[3])?;
    let v = g.affine(keys_in, p[4], p[5])?;
    let (heads, maps) = multi_head_attention(g, q, k, v, cfg.num_heads, mask)?;
    Ok((g.affine(heads, p[6], p[7])?, maps))
}

fn pre_norm(g: &mut Graph, store: &ParamStore, layer: usize, block: &str, x: NodeId) -> Result<NodeId> {
    let p = layer_params(g, store, layer, block, &["ln_g", "ln_b"])?;
    g.layer_norm(x, p[0], p[1])
}

/// `X + SelfAttn(LN(X))` with full (unmasked) attention.
pub fn graph_self_attention(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    layer: usize,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let normed = pre_norm(g, store, layer, "self", x)?;
    let (attn, maps) = graph_attention(g, cfg, store, layer, "self", normed, normed, None)?;
    Ok((g.add(x, attn)?, maps))
}

/// `Q' + CrossAttn(LN(Q'), E'_a)` with padded audio frames masked out.
pub fn graph_cross_attention(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    layer: usize,
    queries: NodeId,
    audio: NodeId,
    mask: &AttnMask,
) -> Result<(NodeId, Vec<NodeId>)> {
    let normed = pre_norm(g, store, layer, "cross", queries)?;
    let (attn, maps) = graph_attention(g, cfg, store, layer, "cross", normed, audio, Some(mask))?;
    Ok((g.add(queries, attn)?, maps))
}

/// `H + W2·GELU(W1·LN(H) + b1) + b2`, applied row by row.
pub fn graph_feed_forward(
    g: &mut Graph,
    store: &ParamStore,
    layer: usize,
    h: NodeId,
) -> Result<NodeId> {
    let normed = pre_norm(g, store, layer, "ffn", h)?;
    let p = layer_params(g, store, layer, "ffn", &["w1", "b1", "w2", "b2"])?;
    let inner = g.affine(normed, p[0], p[1])?;
    let act = g.gelu(inner);
    let out = g.affine(act, p[2], p[3])?;
    g.add(h, out)
}

/// Multi-head attentive pooling of `N_q × d_h` rows into `1 × d_h`.
///
/// Head `h` scores each row by the dot product of its head slice with a
/// learned vector, softmaxes the scores over rows, and takes the weighted sum
/// of the head slices. Head outputs are concatenated and passed through an
/// affine map. Returns the pooled vector and the per-head weight rows.
pub fn graph_attentive_pool(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    h: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let score = g.param(store, POOL_SCORE)?;
    let proj_w = g.param(store, POOL_PROJ_W)?;
    let proj_b = g.param(store, POOL_PROJ_B)?;
    let hd = cfg.d_h / cfg.pooling_heads;
    let mut outs = Vec::with_capacity(cfg.pooling_heads);
    let mut weights = Vec::with_capacity(cfg.pooling_heads);
    for head in 0..cfg.pooling_heads {
        let slice = g.slice_cols(h, head * hd, (head + 1) * hd)?;
        let w = g.slice_rows(score, head, head + 1)?;
        let scores = g.matmul_nt(w, slice)?; // 1 × N_q
        let probs = g.softmax_rows(scores, None);
        outs.push(g.matmul(probs, slice)?);
        weights.push(probs);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((g.affine(cat, proj_w, proj_b)?, weights))
}

/// Nodes produced by one fusion forward pass.
#[derive(Debug, Clone)]
pub struct FusionNodes {
    /// `1 × d_h` pooled vector before normalization.
    pub pooled: NodeId,
    /// `1 × d_h` unit-norm fused embedding.
    pub fused: NodeId,
    /// Every softmax map (self, cross, pooling) in creation order.
    pub attention_maps: Vec<NodeId>,
}

/// Projected audio rows (`L_a × d_h`). Already-projected input passes through.
pub fn graph_project_audio(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    audio: &EmbeddingSequence,
) -> Result<NodeId> {
    match audio.role() {
        DimRole::AudioRaw => {
            if audio.dim() != cfg.d_a {
                return Err(EmoqError::shape(
                    "project_audio",
                    format!("width {}", cfg.d_a),
                    format!("width {}", audio.dim()),
                ));
            }
            let x = g.constant(valid_rows_only(audio));
            let w = g.param(store, AUDIO_PROJ_W)?;
            let b = g.param(store, AUDIO_PROJ_B)?;
            g.affine(x, w, b)
        }
        DimRole::AudioProjected => {
            if audio.dim() != cfg.d_h {
                return Err(EmoqError::shape(
                    "projected audio",
                    format!("width {}", cfg.d_h),
                    format!("width {}", audio.dim()),
                ));
            }
            Ok(g.constant(valid_rows_only(audio)))
        }
        DimRole::Text => Err(EmoqError::InvalidArgument(
            "text sequence passed where audio was expected".into(),
        )),
    }
}

/// Copy of the audio rows with padding zeroed, so even non-finite padding
/// cannot reach the masked attention through `0 * NaN`.
fn valid_rows_only(audio: &EmbeddingSequence) -> Mat {
    let mut data = audio.data().clone();
    data.slice_mut(ndarray::s![audio.valid_length().., ..]).fill(0.0);
    data
}

/// Mean of the valid projected audio rows (`1 × d_h`).
pub fn graph_mean_audio(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    audio: &EmbeddingSequence,
) -> Result<NodeId> {
    let projected = graph_project_audio(g, cfg, store, audio)?;
    g.mean_rows(projected, audio.valid_length())
}

fn graph_text(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    text: TextInput<'_>,
) -> Result<Option<NodeId>> {
    match text {
        TextInput::Tokens([]) => Ok(None),
        TextInput::Tokens(ids) => {
            let table = g.param(store, TEXT_EMBED)?;
            Ok(Some(g.gather_rows(table, ids)?))
        }
        TextInput::Embedded(seq) => {
            if seq.role() != DimRole::Text {
                return Err(EmoqError::InvalidArgument("expected a text sequence".into()));
            }
            if seq.is_empty() {
                return Ok(None);
            }
            if seq.dim() != cfg.d_h {
                return Err(EmoqError::shape(
                    "text embeddings",
                    format!("width {}", cfg.d_h),
                    format!("width {}", seq.dim()),
                ));
            }
            // Text padding is dropped: only valid rows enter self-attention.
            let valid = seq.data().slice(ndarray::s![..seq.valid_length(), ..]).to_owned();
            Ok(Some(g.constant(valid)))
        }
    }
}

/// Full fusion forward pass on a graph.
pub fn graph_forward(
    g: &mut Graph,
    cfg: &FusionConfig,
    store: &ParamStore,
    audio: &EmbeddingSequence,
    text: TextInput<'_>,
) -> Result<FusionNodes> {
    let projected = graph_project_audio(g, cfg, store, audio)?;
    let mask = build_audio_mask(audio.valid_length(), audio.len(), cfg.num_queries)?.to_attn_mask();
    let text_rows = graph_text(g, cfg, store, text)?;
    let n_q = cfg.num_queries;
    let mut queries = g.param(store, QUERIES)?;
    let mut text_state = text_rows;
    let mut maps = Vec::new();
    for layer in 0..cfg.num_layers {
        let joint = match text_state {
            Some(t) => g.concat_rows(&[queries, t])?,
            None => queries,
        };
        let (attended, m) = graph_self_attention(g, cfg, store, layer, joint)?;
        maps.extend(m);
        let total = g.shape(attended).0;
        let q_part = g.slice_rows(attended, 0, n_q)?;
        if text_state.is_some() {
            text_state = Some(g.slice_rows(attended, n_q, total)?);
        }
        let (crossed, m) = graph_cross_attention(g, cfg, store, layer, q_part, projected, &mask)?;
        maps.extend(m);
        queries = graph_feed_forward(g, store, layer, crossed)?;
    }
    let (pooled, m) = graph_attentive_pool(g, cfg, store, queries)?;
    maps.extend(m);
    let fused = g.l2_normalize_rows(pooled);
    Ok(FusionNodes {
        pooled,
        fused,
        attention_maps: maps,
    })
}

// ---------------------------------------------------------------------------
// Array-level operations
// ---------------------------------------------------------------------------

/// Affine map of every audio row from `d_a` to `d_h`.
pub fn project_audio(raw: &EmbeddingSequence, params: &FusionParams) -> Result<EmbeddingSequence> {
    if raw.role() != DimRole::AudioRaw {
        return Err(EmoqError::InvalidArgument("project_audio expects raw audio".into()));
    }
    let mut g = Graph::new();
    let out = graph_project_audio(&mut g, &params.config, &params.store, raw)?;
    EmbeddingSequence::new(g.value(out).clone(), raw.valid_length(), DimRole::AudioProjected)
}

/// `[Q; E_t]`: query rows first, then the valid text rows.
pub fn concat_queries(queries: &QueryBank, text: &EmbeddingSequence) -> Result<Mat> {
    if text.is_empty() {
        return Ok(queries.0.clone());
    }
    if queries.0.ncols() != text.dim() {
        return Err(EmoqError::shape(
            "concat_queries",
            format!("width {}", queries.0.ncols()),
            format!("width {}", text.dim()),
        ));
    }
    let valid = text.data().slice(ndarray::s![..text.valid_length(), ..]);
    Ok(ndarray::concatenate(ndarray::Axis(0), &[queries.0.view(), valid]).expect("widths checked"))
}

/// One pre-norm self-attention block over the joint sequence.
pub fn self_attention(x: &Mat, params: &FusionParams, layer: usize) -> Result<Mat> {
    if x.nrows() == 0 {
        return Err(EmoqError::InvalidArgument("self_attention on empty sequence".into()));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let (out, _) = graph_self_attention(&mut g, &params.config, &params.store, layer, xi)?;
    Ok(g.value(out).clone())
}

/// Rows `0..n_q` of the self-attended joint sequence.
pub fn slice_query_part(a_self: &Mat, n_q: usize) -> Result<Mat> {
    if n_q > a_self.nrows() {
        return Err(EmoqError::InvalidArgument(format!(
            "N_q = {n_q} exceeds {} rows",
            a_self.nrows()
        )));
    }
    Ok(a_self.slice(ndarray::s![..n_q, ..]).to_owned())
}

/// Mask with `mask[i][j] = 1` iff `j < valid_length`.
pub fn build_audio_mask(valid_length: usize, audio_len: usize, n_q: usize) -> Result<AudioAttentionMask> {
    if valid_length == 0 || valid_length > audio_len {
        return Err(EmoqError::InvalidArgument(format!(
            "audio valid_length {valid_length} outside 1..={audio_len}"
        )));
    }
    let mask = Array2::from_shape_fn((n_q, audio_len), |(_, j)| u8::from(j < valid_length));
    Ok(AudioAttentionMask { mask })
}

/// One pre-norm cross-attention block of the query rows over projected audio.
pub fn masked_cross_attention(
    queries: &Mat,
    audio: &EmbeddingSequence,
    mask: &AudioAttentionMask,
    params: &FusionParams,
    layer: usize,
) -> Result<Mat> {
    if audio.role() != DimRole::AudioProjected {
        return Err(EmoqError::InvalidArgument("cross-attention expects projected audio".into()));
    }
    if mask.audio_len() != audio.len() || mask.num_queries() != queries.nrows() {
        return Err(EmoqError::shape(
            "audio mask",
            format!("{}x{}", queries.nrows(), audio.len()),
            format!("{}x{}", mask.num_queries(), mask.audio_len()),
        ));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let a = g.constant(valid_rows_only(audio));
    let (out, _) = graph_cross_attention(
        &mut g,
        &params.config,
        &params.store,
        layer,
        q,
        a,
        &mask.to_attn_mask(),
    )?;
    Ok(g.value(out).clone())
}

/// One pre-norm position-wise FFN block.
pub fn feed_forward(h: &Mat, params: &FusionParams, layer: usize) -> Result<Mat> {
    let mut g = Graph::new();
    let hi = g.constant(h.clone());
    let out = graph_feed_forward(&mut g, &params.store, layer, hi)?;
    Ok(g.value(out).clone())
}

/// Multi-head attentive pooling of `N_q × d_h` rows into one `d_h` vector.
pub fn attentive_pool(h: &Mat, params: &FusionParams) -> Result<Array1<f64>> {
    if h.nrows() == 0 {
        return Err(EmoqError::InvalidArgument("attentive_pool needs at least one row".into()));
    }
    let mut g = Graph::new();
    let hi = g.constant(h.clone());
    let (out, _) = graph_attentive_pool(&mut g, &params.config, &params.store, hi)?;
    Ok(g.value(out).row(0).to_owned())
}

/// `v / max(‖v‖, 1e-12)`. Near-zero inputs are logged and flagged.
pub fn l2_normalize(e_q: &Array1<f64>) -> FusedEmbedding {
    let norm = e_q.dot(e_q).sqrt();
    if norm <= DEGENERATE_NORM {
        log::warn!("fused embedding norm {norm:e} is degenerate; output is not unit length");
    }
    FusedEmbedding {
        vector: e_q / norm.max(L2_EPS),
        pre_norm: norm,
    }
}

/// Project audio, fuse with text through `num_layers` blocks, pool, normalize.
pub fn emoq_former_forward(
    audio: &EmbeddingSequence,
    text: &EmbeddingSequence,
    params: &FusionParams,
) -> Result<FusedEmbedding> {
    forward_with(audio, TextInput::Embedded(text), params)
}

/// As [`emoq_former_forward`], with either token ids or embedded text.
pub fn forward_with(
    audio: &EmbeddingSequence,
    text: TextInput<'_>,
    params: &FusionParams,
) -> Result<FusedEmbedding> {
    let mut g = Graph::new();
    let nodes = graph_forward(&mut g, &params.config, &params.store, audio, text)?;
    let pooled = g.value(nodes.pooled).row(0).to_owned();
    Ok(l2_normalize(&pooled))
}
