//! Markdown report assembly: aggregate tables, WER decompositions with a
//! consistency check, and distribution summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::TaskTag;
use crate::analysis::{BimodalitySummary, Discontinuity};
use crate::metrics::Aggregate;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// One row of the aggregate table. Rates in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub mode: TaskTag,
    pub wer: f64,
    pub bleu: f64,
    #[serde(default)]
    pub comet: Option<f64>,
    pub p_en: f64,
}

impl From<&Aggregate> for TableRow {
    fn from(a: &Aggregate) -> Self {
        Self {
            label: a.label.clone(),
            mode: a.mode,
            wer: a.wer,
            bleu: a.bleu,
            comet: a.comet,
            p_en: 100.0 * a.p_en,
        }
    }
}

/// Insertion, deletion and substitution rates with the overall WER, all
/// in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub label: String,
    pub ins: f64,
    pub del: f64,
    pub sub: f64,
    pub wer: f64,
}

impl From<&Aggregate> for DecompositionRow {
    fn from(a: &Aggregate) -> Self {
        Self {
            label: a.label.clone(),
            ins: a.ins,
            del: a.del,
            sub: a.sub,
            wer: a.wer,
        }
    }
}

/// Largest discrepancy explained by rounding four values to one decimal.
pub const ONE_DECIMAL_TOLERANCE: f64 = 0.2 + 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    pub label: String,
    pub sum: f64,
    pub wer: f64,
    pub difference: f64,
    pub consistent: bool,
}

/// Checks `ins + del + sub == wer` within `tolerance` for each row.
pub fn check_decomposition(rows: &[DecompositionRow], tolerance: f64) -> Vec<ConsistencyCheck> {
    rows.iter()
        .map(|r| {
            let sum = r.ins + r.del + r.sub;
            let difference = sum - r.wer;
            ConsistencyCheck {
                label: r.label.clone(),
                sum,
                wer: r.wer,
                difference,
                consistent: difference.abs() <= tolerance,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSection {
    pub label: String,
    pub summary: BimodalitySummary,
    pub success_jump: Option<Discontinuity>,
    pub fail_jump: Option<Discontinuity>,
}

/// Everything a report shows. Also the on-disk fixture format for
/// published reference numbers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportInput {
    pub title: String,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub table: Vec<TableRow>,
    #[serde(default)]
    pub decomposition: Vec<DecompositionRow>,
    /// Tolerance for the decomposition check; rounding-aware default.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub distributions: Vec<DistributionSection>,
}

fn default_tolerance() -> f64 {
    ONE_DECIMAL_TOLERANCE
}

impl ReportInput {
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ReportError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn checks(&self) -> Vec<ConsistencyCheck> {
        check_decomposition(&self.decomposition, self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}\n", self.title);
        for n in &self.notes {
            let _ = writeln!(out, "{n}\n");
        }
        if !self.table.is_empty() {
            out.push_str("## Aggregate metrics\n\n");
            out.push_str("| | Mode | WER | BLEU | COMET | P(en) |\n|---|---|---|---|---|---|\n");
            for r in &self.table {
                let comet = r
                    .comet
                    .map(|c| format!("{c:.1}"))
                    .unwrap_or_else(|| "n/a".into());
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.1} | {:.2} | {} | {:.1} |",
                    r.label, r.mode, r.wer, r.bleu, comet, r.p_en
                );
            }
            out.push('\n');
        }
        if !self.decomposition.is_empty() {
            out.push_str("## WER decomposition\n\n");
            out.push_str("| | ins | del | sub | WER | ins+del+sub | check |\n|---|---|---|---|---|---|---|\n");
            for (r, c) in self.decomposition.iter().zip(self.checks()) {
                let verdict = if c.consistent {
                    "ok".to_string()
                } else {
                    format!("MISMATCH ({:+.2})", c.difference)
                };
                let _ = writeln!(
                    out,
                    "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
                    r.label, r.ins, r.del, r.sub, r.wer, c.sum, verdict
                );
            }
            let _ = writeln!(
                out,
                "\nTolerance: {:.2} percentage points.\n",
                self.tolerance
            );
        }
        for d in &self.distributions {
            let s = &d.summary;
            let _ = writeln!(out, "## P(en) distribution: {}\n", d.label);
            let _ = writeln!(
                out,
                "n = {}, mean P(en) = {:.3}, mass_low (<= 0.1) = {:.3}, mass_mid = {:.3}, mass_high (>= 0.9) = {:.3}\n",
                s.n, s.mean, s.mass_low, s.mass_mid, s.mass_high
            );
            out.push_str("| bin | count | fraction |\n|---|---|---|\n");
            for b in &s.histogram {
                let _ = writeln!(
                    out,
                    "| {:.1}-{:.1} | {} | {:.3} |",
                    b.lo, b.hi, b.count, b.fraction
                );
            }
            out.push('\n');
            for (name, j) in [("success", &d.success_jump), ("fail", &d.fail_jump)] {
                if let Some(j) = j {
                    let _ = writeln!(
                        out,
                        "Largest {name}-recall jump: {:.1}% recalled, between tau = {:.2} and {:.2}.",
                        100.0 * j.level,
                        j.tau_before,
                        j.tau_after
                    );
                }
            }
            out.push('\n');
        }
        out
    }
}
