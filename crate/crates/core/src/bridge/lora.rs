use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, NodeId, ParamStore};
use crate::error::{EmoqError, Result};
use crate::init;

/// Which decoder projections receive adapters and how they are shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the update is multiplied by `alpha / rank`.
    pub alpha: f64,
    pub dropout: f64,
    /// Attention projections to adapt, from `q`, `k`, `v`, `o`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec!["q".into(), "v".into()],
        }
    }
}

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(EmoqError::Config("lora rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EmoqError::Config(format!("lora dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(bad) = self.targets.iter().find(|t| !LORA_TARGETS.contains(&t.as_str())) {
            return Err(EmoqError::Config(format!("unknown lora target `{bad}`")));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets_projection(&self, name: &str) -> bool {
        self.targets.iter().any(|t| t == name)
    }
}

pub fn down_name(layer: usize, target: &str) -> String {
    format!("lora.layer{layer}.{target}.down")
}

pub fn up_name(layer: usize, target: &str) -> String {
    format!("lora.layer{layer}.{target}.up")
}

/// Adapter parameters for a decoder with `layers` layers of width `width`.
/// `up` starts at zero so the adapted decoder equals the base at init.
pub fn init_lora_params<R: Rng>(cfg: &LoraConfig, layers: usize, width: usize, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for layer in 0..layers {
        for target in LORA_TARGETS.iter().filter(|t| cfg.targets_projection(t)) {
            store.insert(down_name(layer, target), init::fan_in(rng, width, cfg.rank), true);
            store.insert(up_name(layer, target), init::zeros(cfg.rank, width), true);
        }
    }
    store
}

/// A single low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scaling: f64,
    /// `d_in × r`
    pub down: Mat,
    /// `r × d_out`
    pub up: Mat,
    pub dropout_rate: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rank: cfg.rank,
            scaling: cfg.scaling(),
            down: init::fan_in(rng, d_in, cfg.rank),
            up: init::zeros(cfg.rank, d_out),
            dropout_rate: cfg.dropout,
        })
    }
}

/// `base_output + scaling · dropout(x) · down · up`; dropout only when
/// `train` is set.
pub fn lora_forward(
    x: &Mat,
    base_output: &Mat,
    adapter: &LoraAdapter,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Mat> {
    if x.ncols() != adapter.down.nrows()
        || adapter.down.ncols() != adapter.up.nrows()
        || base_output.dim() != (x.nrows(), adapter.up.ncols())
    {
        return Err(EmoqError::shape(
            "lora_forward",
            format!("x: n x {}, base: n x {}", adapter.down.nrows(), adapter.up.ncols()),
            format!("x: {:?}, base: {:?}", x.dim(), base_output.dim()),
        ));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let base = g.constant(base_output.clone());
    let down = g.constant(adapter.down.clone());
    let up = g.constant(adapter.up.clone());
    let rate = if train { adapter.dropout_rate } else { 0.0 };
    let out = graph_lora_delta(&mut g, xi, base, down, up, adapter.scaling, rate, rng)?;
    Ok(g.value(out).clone())
}

/// Graph form of [`lora_forward`].
#[allow(clippy::too_many_arguments)]
pub fn graph_lora_delta(
    g: &mut Graph,
    x: NodeId,
    base: NodeId,
    down: NodeId,
    up: NodeId,
    scaling: f64,
    dropout: f64,
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    let dropped = g.dropout(x, dropout, rng)?;
    let low = g.matmul(dropped, down)?;
    let delta = g.matmul(low, up)?;
    let delta = g.scale(delta, scaling);
    g.add(base, delta)
}

/// Adapter parameters plus the mode they are applied in.
pub struct LoraContext<'a> {
    pub config: &'a LoraConfig,
    pub store: &'a ParamStore,
    pub train: bool,
    pub rng: &'a mut dyn RngCore,
}
