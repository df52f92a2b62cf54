use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ccdet::config::RunConfig;
use ccdet::evalmetrics::EvalReport;
use ccdet::render::{curve_csv, curve_svg, write_text};
use serde::Serialize;

use crate::ConfigArgs;

pub const CONFIG_FILE: &str = "config.json";

/// Creates `<parent>/run-YYYYMMDD-HHMMSS`, adding a counter if that exists,
/// and stores the resolved configuration in it.
pub fn run_dir(parent: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("cannot create output directory {}", parent.display()))?;
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    let mut dir = parent.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

/// Config file (explicit, or found next to the model), then overrides.
pub fn resolve_config(args: &ConfigArgs, model: Option<&Path>) -> Result<RunConfig> {
    let found = args.config.clone().or_else(|| {
        let dir = model?.parent()?;
        // round directories sit one level below the run directory
        [dir.join(CONFIG_FILE), dir.parent()?.join(CONFIG_FILE)].into_iter().find(|p| p.is_file())
    });
    let mut cfg = match &found {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_text(path, &text)?;
    Ok(())
}

/// Report JSON plus ROC and PR curves as CSV and SVG. Returns the ROC
/// diagnostic when the curves could not be computed.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<Option<String>> {
    write_json(&dir.join("eval_report.json"), report)?;
    if let Some(e) = &report.roc_error {
        return Ok(Some(e.clone()));
    }
    write_text(&dir.join("roc.csv"), &curve_csv(("fpr", "tpr"), &report.roc))?;
    write_text(&dir.join("roc.svg"), &curve_svg("ROC", ("false positive rate", "true positive rate"), &report.roc, true))?;
    write_text(&dir.join("pr.csv"), &curve_csv(("recall", "precision"), &report.pr))?;
    write_text(&dir.join("pr.svg"), &curve_svg("Precision-recall", ("recall", "precision"), &report.pr, false))?;
    Ok(None)
}
