//! Comparison table over one or more run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cpcontrol::scenario::REFERENCE_SCENARIO_COUNT;

use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, Timing, TIMING_FILE};

pub const REPORT_CSV_HEADER: [&str; 10] = [
    "method",
    "error_region",
    "input_region",
    "objective",
    "state_rate",
    "input_rate",
    "joint_rate",
    "n_trials",
    "wall_clock_s",
    "manifest",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub error_region: String,
    pub input_region: String,
    pub objective: f64,
    pub state_rate: f64,
    pub input_rate: f64,
    pub joint_rate: f64,
    pub n_trials: usize,
    /// From the `timing.json` next to the manifest, when present.
    pub wall_clock_s: Option<f64>,
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

/// Accepts a manifest file or a run directory containing `manifest.json`.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(crate::manifest::MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn build_report(paths: &[PathBuf]) -> CliResult<Report> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one manifest".into()));
    }
    let mut rows = Vec::with_capacity(paths.len());
    let mut notes = Vec::new();
    for path in paths {
        let path = manifest_path(path);
        let m = Manifest::load(&path)?;
        let timing_path = path.with_file_name(TIMING_FILE);
        let wall_clock_s = if timing_path.is_file() {
            Some(Timing::load(&timing_path)?.total_seconds)
        } else {
            None
        };
        if let Some(b) = &m.baseline {
            notes.push(b.note.clone());
        }
        rows.push(ReportRow {
            method: m.method.name().to_string(),
            error_region: m.error_region.as_ref().map_or_else(|| "-".into(), |r| r.summary()),
            input_region: m.input_region.as_ref().map_or_else(|| "-".into(), |r| r.summary()),
            objective: m.objective,
            state_rate: m.validation.state.rate,
            input_rate: m.validation.input.rate,
            joint_rate: m.validation.joint.rate,
            n_trials: m.validation.n_trials,
            wall_clock_s,
            manifest: path.display().to_string(),
        });
    }
    if notes.is_empty() {
        notes.push(format!(
            "reference figure for the benchmark scenario program: {} scenarios",
            group_thousands(REFERENCE_SCENARIO_COUNT)
        ));
    }
    Ok(Report { rows, notes })
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl Report {
    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let err = |e: csv::Error| CliError::Internal(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.error_region.clone(),
                r.input_region.clone(),
                r.objective.to_string(),
                r.state_rate.to_string(),
                r.input_rate.to_string(),
                r.joint_rate.to_string(),
                r.n_trials.to_string(),
                r.wall_clock_s.map_or_else(String::new, |s| format!("{s:.3}")),
                r.manifest.clone(),
            ])
            .map_err(err)?;
        }
        w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let header = [
            "method",
            "error region",
            "input region",
            "objective",
            "state",
            "input",
            "joint",
            "trials",
            "time [s]",
        ];
        let cells: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.error_region.clone(),
                    r.input_region.clone(),
                    format!("{:.4}", r.objective),
                    format!("{:.4}", r.state_rate),
                    format!("{:.4}", r.input_rate),
                    format!("{:.4}", r.joint_rate),
                    r.n_trials.to_string(),
                    r.wall_clock_s.map_or_else(|| "-".into(), |s| format!("{s:.2}")),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let mut out = String::new();
        writeln!(out, "{}", pad_row(&header, &widths)).unwrap();
        writeln!(out, "{}", pad_row(&rule, &widths)).unwrap();
        for c in &cells {
            writeln!(out, "{}", pad_row(c, &widths)).unwrap();
        }
        out.push('\n');
        for note in &self.notes {
            writeln!(out, "note: {note}").unwrap();
        }
        out
    }
}

fn pad_row<S: AsRef<str>>(fields: &[S], widths: &[usize]) -> String {
    let padded: Vec<String> = fields
        .iter()
        .zip(widths)
        .map(|(f, w)| format!("{:<w$}", f.as_ref()))
        .collect();
    padded.join("  ").trim_end().to_string()
}
