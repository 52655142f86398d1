//! The five-row component ablation: each row trains and evaluates the
//! same way with a different set of modules switched on.

use hrvvs_core::config::ModuleSwitches;
use hrvvs_core::metrics::{Scores, METRIC_COLUMNS};
use hrvvs_core::{Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::LoadedVideo;
use crate::evaluate::evaluate;
use crate::train::train;

/// Row names with their VAR / MSIM / DWFM switches.
pub const ABLATION_ROWS: [(&str, ModuleSwitches); 5] = [
    ("basic", switches(false, false, false)),
    ("M1", switches(true, true, false)),
    ("M2", switches(true, false, true)),
    ("M3", switches(false, true, true)),
    ("Ours", switches(true, true, true)),
];

const fn switches(var: bool, msim: bool, dwfm: bool) -> ModuleSwitches {
    ModuleSwitches { var, msim, dwfm }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub modules: ModuleSwitches,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,VAR,MSIM,DWFM,{}\n", METRIC_COLUMNS.join(","));
        for r in &self.rows {
            let m = r.modules;
            let vals: Vec<String> = r.scores.values().iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{},{},{},{},{}\n", r.name, m.var as u8, m.msim as u8, m.dwfm as u8, vals.join(",")));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| Model | VAR | MSIM | DWFM | {} |\n", METRIC_COLUMNS.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(4 + METRIC_COLUMNS.len())));
        for r in &self.rows {
            let m = r.modules;
            let vals: Vec<String> = r.scores.values().iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!("| {} | {} | {} | {} | {} |\n", r.name, mark(m.var), mark(m.msim), mark(m.dwfm), vals.join(" | ")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation report serializes")
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Train on `train_videos` and score on `eval_videos` for every row,
/// reporting progress through `on_row`.
pub fn ablate(
    base: &RunConfig,
    train_videos: &[LoadedVideo],
    eval_videos: &[LoadedVideo],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (name, modules) in ABLATION_ROWS {
        let cfg = base.clone().with_modules(modules);
        let outcome = train(&cfg, train_videos, None)?;
        let model = Model::new(cfg.model.clone())?;
        let report = evaluate(&model, &outcome.checkpoint.params, eval_videos, cfg.data.eval_mode, None)?;
        let row = AblationRow {
            name: name.to_string(),
            modules,
            scores: report.mean,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationReport { rows })
}
