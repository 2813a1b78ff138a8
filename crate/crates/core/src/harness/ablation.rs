use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::DatasetManifest;
use super::metrics::MetricsReport;
use crate::bridge::{TinyDecoder, TinyDecoderConfig};
use crate::encoders::StubTokenizer;
use crate::error::{EmoqError, Result};
use crate::pipeline::{encode_dataset, train_stage1, train_stage2, Checkpoint, Example, Modality};

/// One ablation setting. The name is the modality followed by any of
/// `-scl`, `-focal`, `-stage1` to switch that component off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub modality: Modality,
    pub scl: bool,
    pub focal: bool,
    pub stage1: bool,
}

impl AblationCell {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            scl: true,
            focal: true,
            stage1: true,
        }
    }
}

impl fmt::Display for AblationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.modality.name())?;
        for (on, tag) in [(self.scl, "-scl"), (self.focal, "-focal"), (self.stage1, "-stage1")] {
            if !on {
                f.write_str(tag)?;
            }
        }
        Ok(())
    }
}

impl FromStr for AblationCell {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || EmoqError::Config(format!("unknown ablation cell `{s}`"));
        let mut parts = s.split('-');
        let modality: Modality = parts.next().unwrap_or_default().parse().map_err(|_| unknown())?;
        let mut cell = AblationCell::new(modality);
        for part in parts {
            let flag = match part {
                "scl" => &mut cell.scl,
                "focal" => &mut cell.focal,
                "stage1" => &mut cell.stage1,
                _ => return Err(unknown()),
            };
            if !*flag {
                return Err(unknown());
            }
            *flag = false;
        }
        Ok(cell)
    }
}

/// Named grids mirroring the modality, loss and two-stage ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Input modality and alignment module.
    Table4,
    /// Contrastive and focal terms.
    Table5,
    /// Stage-1 pre-training on or off.
    Table6,
    /// Any explicit list of cells.
    Custom,
}

impl Grid {
    pub fn cells(self) -> Vec<AblationCell> {
        let full = AblationCell::new(Modality::Full);
        match self {
            Grid::Table4 => Modality::ALL.into_iter().map(AblationCell::new).collect(),
            Grid::Table5 => vec![
                AblationCell { scl: false, focal: false, ..full },
                AblationCell { focal: false, ..full },
                AblationCell { scl: false, ..full },
                full,
            ],
            Grid::Table6 => vec![AblationCell { stage1: false, ..full }, full],
            Grid::Custom => Vec::new(),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Grid::Table4 => "Effect of input modality and alignment",
            Grid::Table5 => "Effect of the stage-1 objective",
            Grid::Table6 => "Effect of stage-1 pre-training",
            Grid::Custom => "Ablation results",
        }
    }
}

impl FromStr for Grid {
    type Err = EmoqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table4" => Ok(Grid::Table4),
            "table5" => Ok(Grid::Table5),
            "table6" => Ok(Grid::Table6),
            "custom" => Ok(Grid::Custom),
            _ => Err(EmoqError::Config(format!("unknown grid `{s}` (table4, table5, table6)"))),
        }
    }
}

/// Metrics of one executed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub modality: Modality,
    pub scl: bool,
    pub focal: bool,
    pub stage1: bool,
    pub metrics: MetricsReport,
}

/// Train and evaluate every cell on the manifest's `train` and `test`
/// splits with the same seed and data. Cells with stage 1 on share one
/// stage-1 run per loss setting.
pub fn run_ablation_grid(cells: &[AblationCell], manifest: &DatasetManifest, run: &RunConfig) -> Result<Vec<CellResult>> {
    run.validate()?;
    let tokenizer = StubTokenizer::new(&manifest.labels)?;
    let encoder = run.encoder();
    let train = encode_dataset(&manifest.split_manifest("train"), &encoder, &tokenizer)?;
    let test = encode_dataset(&manifest.split_manifest("test"), &encoder, &tokenizer)?;
    if train.is_empty() || test.is_empty() {
        return Err(EmoqError::Data(format!(
            "ablation needs `train` and `test` splits, found {} and {} records",
            train.len(),
            test.len()
        )));
    }
    let decoder_cfg = run.decoder_config();
    let mut stage1_cache: BTreeMap<(bool, bool), Checkpoint> = BTreeMap::new();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("ablation cell {cell}");
        let result = run_cell(cell, &train, &test, manifest, run, &decoder_cfg, &tokenizer, &mut stage1_cache)?;
        results.push(result);
    }
    Ok(results)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cell: &AblationCell,
    train: &[Example],
    test: &[Example],
    manifest: &DatasetManifest,
    run: &RunConfig,
    decoder_cfg: &TinyDecoderConfig,
    tokenizer: &StubTokenizer,
    cache: &mut BTreeMap<(bool, bool), Checkpoint>,
) -> Result<CellResult> {
    let cell_run = RunConfig {
        modality: cell.modality,
        use_scl: cell.scl,
        use_focal: cell.focal,
        stage1_checkpoint: None,
        ..run.clone()
    };
    let stage1 = if cell.stage1 {
        let key = (cell.scl, cell.focal);
        if !cache.contains_key(&key) {
            let outcome = train_stage1(train, None, &manifest.labels, &cell_run)?;
            cache.insert(key, outcome.checkpoint);
        }
        cache.get(&key)
    } else {
        None
    };
    let outcome = train_stage2(
        train,
        &manifest.labels,
        &cell_run,
        stage1,
        Box::new(TinyDecoder::new(decoder_cfg.clone())?),
        Box::new(tokenizer.clone()),
    )?;
    let metrics = outcome.model.evaluate(test)?;
    Ok(CellResult {
        cell: cell.to_string(),
        modality: cell.modality,
        scl: cell.scl,
        focal: cell.focal,
        stage1: cell.stage1,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_names_round_trip() {
        for name in ["full", "audio_only", "full-scl", "full-scl-focal", "concat_no_fusion-stage1"] {
            assert_eq!(name.parse::<AblationCell>().unwrap().to_string(), name);
        }
        for bad in ["fusion", "full-scl-scl", "full-lora", ""] {
            assert!(bad.parse::<AblationCell>().is_err(), "{bad}");
        }
    }

    #[test]
    fn grid_layouts() {
        assert_eq!(Grid::Table4.cells().len(), 4);
        assert_eq!(Grid::Table5.cells().len(), 4);
        assert_eq!(Grid::Table6.cells().len(), 2);
        let names: Vec<String> = Grid::Table5.cells().iter().map(|c| c.to_string()).collect();
        assert_eq!(names, ["full-scl-focal", "full-focal", "full-scl", "full"]);
        assert!("table7".parse::<Grid>().is_err());
    }
}
