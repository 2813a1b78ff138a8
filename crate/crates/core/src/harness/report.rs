use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::{CellResult, Grid};
use super::config::RunConfig;
use crate::error::{EmoqError, Result};
use crate::pipeline::Modality;

/// A titled table of results plus the provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub grid: Grid,
    pub seed: u64,
    pub config_hash: String,
    pub labels: Vec<String>,
    pub rows: Vec<CellResult>,
}

impl Report {
    pub fn new(grid: Grid, run: &RunConfig, labels: &[String], rows: Vec<CellResult>) -> Self {
        Self {
            title: grid.title().to_string(),
            grid,
            seed: run.seed,
            config_hash: run.config_hash(),
            labels: labels.to_vec(),
            rows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| EmoqError::Data(format!("report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EmoqError::Data(format!("report: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

/// Percent with one decimal, e.g. `74.4`.
pub fn percent(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn mark(on: bool) -> String {
    if on { "yes" } else { "no" }.to_string()
}

fn modality_label(m: Modality) -> &'static str {
    match m {
        Modality::AudioOnly => "audio",
        Modality::TextOnly => "text",
        Modality::ConcatNoFusion | Modality::Full => "audio+text",
    }
}

/// Leading descriptive columns for a grid.
fn descriptive_columns(grid: Grid) -> Vec<(&'static str, fn(&CellResult) -> String)> {
    match grid {
        Grid::Table4 => vec![
            ("Modality", |r| modality_label(r.modality).to_string()),
            ("Fusion", |r| mark(r.modality.uses_fusion())),
        ],
        Grid::Table5 => vec![("SCL", |r| mark(r.scl)), ("Focal", |r| mark(r.focal))],
        Grid::Table6 => vec![("Stage-1", |r| mark(r.stage1))],
        Grid::Custom => Vec::new(),
    }
}

/// Aligned text table; identical inputs give identical bytes.
pub fn render_text(report: &Report) -> String {
    let mut header: Vec<String> = vec!["Cell".into()];
    header.extend(descriptive_columns(report.grid).iter().map(|(h, _)| h.to_string()));
    let numeric_from = header.len();
    header.extend(["WA", "UA", "WF1"].map(String::from));

    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.cell.clone()];
            row.extend(descriptive_columns(report.grid).iter().map(|(_, f)| f(r)));
            row.extend([percent(r.metrics.wa), percent(r.metrics.ua), percent(r.metrics.wf1)]);
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c >= numeric_from {
                    format!("{v:>w$}", w = widths[c])
                } else {
                    format!("{v:<w$}", w = widths[c])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = format!("{}\n", report.title);
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out.push_str(&format!("seed: {}\nconfig: {}\n", report.seed, report.config_hash));
    out
}

/// Parse the rows of a text table back into `(cell, [WA, UA, WF1])`.
pub fn parse_text_rows(text: &str) -> Vec<(String, [String; 3])> {
    text.lines()
        .skip(3)
        .take_while(|l| !l.starts_with("seed: "))
        .filter_map(|l| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            let n = fields.len();
            (n >= 4).then(|| {
                (
                    fields[0].to_string(),
                    [fields[n - 3].to_string(), fields[n - 2].to_string(), fields[n - 1].to_string()],
                )
            })
        })
        .collect()
}

pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Json => report.to_json()?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EmoqError::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| EmoqError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ablation::AblationCell;
    use crate::harness::metrics::compute_metrics;

    fn row(name: &str, pred: &[usize], truth: &[usize]) -> CellResult {
        let cell: AblationCell = name.parse().unwrap();
        CellResult {
            cell: name.into(),
            modality: cell.modality,
            scl: cell.scl,
            focal: cell.focal,
            stage1: cell.stage1,
            metrics: compute_metrics(pred, truth, 2).unwrap(),
        }
    }

    fn report(rows: Vec<CellResult>) -> Report {
        Report::new(Grid::Table5, &RunConfig::desk(), &["a".into(), "b".into()], rows)
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = render_text(&report(Vec::new()));
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().starts_with("Cell"));
        assert!(parse_text_rows(&text).is_empty());
    }

    #[test]
    fn text_and_json_agree() {
        let r = report(vec![
            row("full-scl-focal", &[0, 0, 1], &[0, 1, 1]),
            row("full", &[0, 1, 1], &[0, 1, 1]),
        ]);
        let text = render_text(&r);
        assert_eq!(text, render_text(&r));
        assert!(text.contains("66.7"));
        assert!(text.contains("100.0"));
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let parsed = parse_text_rows(&text);
        assert_eq!(parsed.len(), 2);
        for ((name, cols), row) in parsed.iter().zip(&back.rows) {
            assert_eq!(name, &row.cell);
            assert_eq!(cols[0], percent(row.metrics.wa));
            assert_eq!(cols[1], percent(row.metrics.ua));
            assert_eq!(cols[2], percent(row.metrics.wf1));
        }
    }

    #[test]
    fn percent_format() {
        assert_eq!(percent(0.744), "74.4");
        assert_eq!(percent(1.0), "100.0");
    }
}
