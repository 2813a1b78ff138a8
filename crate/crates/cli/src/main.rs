//! `emoq`: data preparation, two-stage training, evaluation and ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emoq_core::bridge::TinyDecoder;
use emoq_core::encoders::StubTokenizer;
use emoq_core::harness::fixture::materialize_features;
use emoq_core::harness::manifest::MELD_SPLIT_SIZES;
use emoq_core::harness::{
    compute_metrics, emit_report, load_manifest, make_fixture, make_iemocap_folds, render_text, run_ablation_grid,
    validate_meld_splits, AblationCell, CellResult, DatasetKind, DatasetManifest, FixtureSpec, Grid, Report,
    ReportFormat, RunConfig,
};
use emoq_core::pipeline::{
    encode_dataset, labels_of, load_checkpoint, save_checkpoint, train_stage1, train_stage2, EmoqModel, Example,
};
use emoq_core::{EmoqError, Result};

#[derive(Parser, Debug)]
#[command(name = "emoq", version, about = "Multimodal speech emotion recognition toolkit")]
struct Cli {
    /// Configuration file; its keys overlay the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration before the file and overrides apply.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Override any configuration key, e.g. `--set stage1_epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for fixtures, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact the command writes.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Small widths suited to synthetic data on a laptop.
    Desk,
    /// Full-size widths and learning rates.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Use speaker-independent fold `k` (0-4) as the train/test split.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and write speaker-independent folds.
    Prepare {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a synthetic manifest whose label needs both modalities.
    Fixture {
        /// Number of classes: 2, 4 or 7.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        /// Per-class train counts, overriding `--train-per-class`.
        #[arg(long, value_delimiter = ',')]
        train_counts: Vec<usize>,
        /// Per-class test counts, overriding `--test-per-class`.
        #[arg(long, value_delimiter = ',')]
        test_counts: Vec<usize>,
        /// Also encode every utterance into a feature file.
        #[arg(long)]
        features: bool,
    },
    /// Pre-train the fusion block with the auxiliary head.
    TrainStage1 {
        #[command(flatten)]
        data: DataArgs,
        /// Validation split used for checkpoint selection.
        #[arg(long, default_value = "dev")]
        valid_split: String,
    },
    /// Instruction-tune fusion, projector and adapters.
    TrainStage2 {
        #[command(flatten)]
        data: DataArgs,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Score a stage-2 checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run an ablation grid and write its report.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Named grid: table4 (modality), table5 (objective), table6 (stage 1).
        #[arg(long, conflicts_with = "cells")]
        grid: Option<String>,
        /// Explicit cells, e.g. `full,full-scl,text_only`.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Re-render a machine-readable report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Full => RunConfig::default(),
    };
    let base = match &cli.config {
        Some(path) => base.load_over(path)?,
        None => base,
    };
    let mut run = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    let run = resolve_config(&cli)?;
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| EmoqError::io(out, e))?;
    log::info!("config {}", run.config_hash());
    match cli.command {
        Command::Prepare { data } => prepare(&data, out),
        Command::Fixture {
            classes,
            train_per_class,
            test_per_class,
            train_counts,
            test_counts,
            features,
        } => {
            let mut spec = FixtureSpec::split(train_per_class, test_per_class, classes, run.seed);
            if !train_counts.is_empty() {
                spec.train_counts = train_counts;
            }
            if !test_counts.is_empty() {
                spec.test_counts = test_counts;
            }
            fixture(&spec, features, &run, out)
        }
        Command::TrainStage1 { data, valid_split } => stage1(&data, &valid_split, &run, out),
        Command::TrainStage2 { data, stage1 } => stage2(&data, stage1.as_deref(), &run, out),
        Command::Evaluate { data, checkpoint, split } => evaluate(&data, &checkpoint, &split, out),
        Command::Ablate { data, grid, cells } => ablate(&data, grid.as_deref(), &cells, &run, out),
        Command::Report { input, format, output } => report(&input, format, output.as_deref()),
    }
}

/// Load a manifest, re-tagging splits from fold `k` when asked.
fn load_data(data: &DataArgs) -> Result<DatasetManifest> {
    let mut manifest = load_manifest(&data.manifest)?;
    if let Some(k) = data.fold {
        let folds = make_iemocap_folds(&manifest)?;
        let fold = folds
            .get(k)
            .ok_or_else(|| EmoqError::Config(format!("fold {k} out of range 0..{}", folds.len())))?;
        for &i in &fold.train {
            manifest.records[i].split = Some("train".into());
        }
        for &i in &fold.test {
            manifest.records[i].split = Some("test".into());
        }
    }
    Ok(manifest)
}

/// Records of `split`, or all records when the manifest carries no split tags.
fn split_or_all(manifest: &DatasetManifest, split: &str) -> DatasetManifest {
    if manifest.records.iter().all(|r| r.split.is_none()) {
        manifest.clone()
    } else {
        manifest.split_manifest(split)
    }
}

fn encode(manifest: &DatasetManifest, run: &RunConfig) -> Result<Vec<Example>> {
    let tokenizer = StubTokenizer::new(&manifest.labels)?;
    encode_dataset(manifest, &run.encoder(), &tokenizer)
}

fn prepare(data: &DataArgs, out: &Path) -> Result<()> {
    let manifest = load_data(data)?;
    println!("kind: {}", manifest.kind);
    println!("records: {}", manifest.records.len());
    let mut splits: Vec<(String, usize)> = Vec::new();
    for r in &manifest.records {
        let tag = r.split.clone().unwrap_or_else(|| "-".into());
        match splits.iter_mut().find(|(s, _)| *s == tag) {
            Some((_, n)) => *n += 1,
            None => splits.push((tag, 1)),
        }
    }
    for (split, n) in &splits {
        println!("split {split}: {n}");
    }
    let labels: Vec<usize> = manifest.records.iter().filter_map(|r| r.label).collect();
    if !labels.is_empty() {
        let mut counts = vec![0usize; manifest.labels.len()];
        for y in labels {
            counts[y] += 1;
        }
        for (name, n) in manifest.labels.iter().zip(counts) {
            println!("label {name}: {n}");
        }
    }
    if manifest.kind == DatasetKind::Meld7 {
        validate_meld_splits(&manifest)?;
        let sizes: Vec<String> = MELD_SPLIT_SIZES.iter().map(|(s, n)| format!("{s}={n}")).collect();
        println!("meld splits ok ({})", sizes.join(", "));
    }
    if manifest.kind == DatasetKind::Iemocap4 || manifest.records.iter().all(|r| r.speaker.is_some()) {
        let folds = make_iemocap_folds(&manifest)?;
        let path = out.join("folds.json");
        let body = serde_json::to_string_pretty(&folds).map_err(|e| EmoqError::Data(format!("folds: {e}")))?;
        fs::write(&path, body + "\n").map_err(|e| EmoqError::io(&path, e))?;
        for (k, f) in folds.iter().enumerate() {
            println!("fold {k}: test speakers {} ({} records)", f.test_speakers.join(" "), f.test.len());
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fixture(spec: &FixtureSpec, features: bool, run: &RunConfig, out: &Path) -> Result<()> {
    let mut manifest = make_fixture(spec)?;
    if features {
        manifest = materialize_features(&manifest, &run.encoder(), out)?;
    }
    let path = out.join("manifest.jsonl");
    manifest.write(&path)?;
    println!("wrote {} ({} records)", path.display(), manifest.records.len());
    Ok(())
}

fn stage1(data: &DataArgs, valid_split: &str, run: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_data(data)?;
    let train = encode(&split_or_all(&manifest, "train"), run)?;
    let valid = encode(&manifest.split_manifest(valid_split), run)?;
    let outcome = train_stage1(&train, Some(&valid), &manifest.labels, run)?;
    let path = out.join("stage1.emqc");
    save_checkpoint(&outcome.checkpoint, &path)?;
    if let Some(loss) = outcome.epoch_losses.last() {
        println!("final loss: {loss:.6}");
    }
    println!("aux train accuracy: {:.1}", 100.0 * outcome.train_accuracy);
    if let Some(wa) = outcome.best_validation_wa {
        println!("best {valid_split} WA: {:.1}", 100.0 * wa);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn stage2(data: &DataArgs, stage1: Option<&Path>, run: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_data(data)?;
    let train = encode(&split_or_all(&manifest, "train"), run)?;
    let mut run = run.clone();
    if let Some(path) = stage1 {
        run.stage1_checkpoint = Some(path.to_path_buf());
    }
    let stage1 = run.stage1_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &stage1 {
        if ck.stage != "stage1" {
            return Err(EmoqError::Checkpoint(format!("expected a stage1 checkpoint, got {}", ck.stage)));
        }
    }
    let outcome = train_stage2(
        &train,
        &manifest.labels,
        &run,
        stage1.as_ref(),
        Box::new(TinyDecoder::new(run.decoder_config())?),
        Box::new(StubTokenizer::new(&manifest.labels)?),
    )?;
    let path = out.join("stage2.emqc");
    save_checkpoint(&outcome.checkpoint, &path)?;
    if let Some(loss) = outcome.epoch_losses.last() {
        println!("final loss: {loss:.6}");
    }
    println!("steps: {}", outcome.steps);
    println!("wrote {}", path.display());
    Ok(())
}

fn evaluate(data: &DataArgs, checkpoint: &Path, split: &str, out: &Path) -> Result<()> {
    let manifest = load_data(data)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.labels != manifest.labels {
        return Err(EmoqError::Data(format!(
            "checkpoint labels {:?} differ from manifest labels {:?}",
            ck.labels, manifest.labels
        )));
    }
    let run = ck.config.clone();
    let examples = encode(&split_or_all(&manifest, split), &run)?;
    if examples.is_empty() {
        return Err(EmoqError::Data(format!("no records in split `{split}`")));
    }
    let model = EmoqModel::from_checkpoint(
        &ck,
        Box::new(TinyDecoder::new(run.decoder_config())?),
        Box::new(StubTokenizer::new(&ck.labels)?),
    )?;
    let metrics = compute_metrics(&model.predict(&examples)?, &labels_of(&examples)?, ck.labels.len())?;
    let cell = AblationCell {
        modality: run.modality,
        scl: run.use_scl,
        focal: run.use_focal,
        stage1: run.stage1_checkpoint.is_some(),
    };
    let row = CellResult {
        cell: run.modality.name().to_string(),
        modality: cell.modality,
        scl: cell.scl,
        focal: cell.focal,
        stage1: cell.stage1,
        metrics,
    };
    let mut report = Report::new(Grid::Custom, &run, &ck.labels, vec![row]);
    report.title = format!("Evaluation on `{split}`");
    write_reports(&report, out, "evaluation")
}

fn ablate(data: &DataArgs, grid: Option<&str>, cells: &[String], run: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_data(data)?;
    let (grid, cells) = match (grid, cells.is_empty()) {
        (Some(name), _) => {
            let g: Grid = name.parse()?;
            (g, g.cells())
        }
        (None, false) => (Grid::Custom, cells.iter().map(|c| c.parse()).collect::<Result<Vec<_>>>()?),
        (None, true) => return Err(EmoqError::Config("ablate needs --grid or --cells".into())),
    };
    if cells.is_empty() {
        return Err(EmoqError::Config("the grid has no cells".into()));
    }
    let rows = run_ablation_grid(&cells, &manifest, run)?;
    let report = Report::new(grid, run, &manifest.labels, rows);
    let stem = match grid {
        Grid::Table4 => "ablation_table4",
        Grid::Table5 => "ablation_table5",
        Grid::Table6 => "ablation_table6",
        Grid::Custom => "ablation",
    };
    write_reports(&report, out, stem)
}

fn write_reports(report: &Report, out: &Path, stem: &str) -> Result<()> {
    let text = out.join(format!("{stem}.txt"));
    let json = out.join(format!("{stem}.json"));
    emit_report(report, &text, ReportFormat::Text)?;
    emit_report(report, &json, ReportFormat::Json)?;
    print!("{}", render_text(report));
    println!("wrote {} and {}", text.display(), json.display());
    Ok(())
}

fn report(input: &Path, format: Format, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| EmoqError::io(input, e))?;
    let report = Report::from_json(&text)?;
    match output {
        Some(path) => emit_report(&report, path, format.into()),
        None => {
            match format {
                Format::Text => print!("{}", render_text(&report)),
                Format::Json => print!("{}", report.to_json()?),
            }
            Ok(())
        }
    }
}
