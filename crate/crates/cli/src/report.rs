use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use autoprune::pipeline::parse_metrics_csv;

use crate::plot;
use crate::run::{RunManifest, SEARCH_METRICS};
use crate::BadInput;

pub const SUMMARY: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "model,method,top1,accuracy_drop,fpr";

/// Renders every report file in memory first, so a failure leaves no
/// partial output behind.
pub fn render(dir: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let manifest = RunManifest::load(dir)?.ok_or_else(|| BadInput(format!("{} has no run manifest", dir.display())))?;
    let metrics_path = dir.join(SEARCH_METRICS);
    if !metrics_path.exists() {
        bail!(BadInput(format!(
            "{} not found; run `autoprune search` first",
            metrics_path.display()
        )));
    }
    let text = fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let rows = parse_metrics_csv(&text, &metrics_path).map_err(|e| BadInput(e.to_string()))?;

    let m = &manifest.metrics;
    let model = &manifest.config.model;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut summary = format!("{SUMMARY_HEADER}\n");
    if let Some(b) = m.baseline_top1 {
        summary.push_str(&format!("{model},baseline,{},0.00,0.00\n", pct(b)));
    }
    if let (Some(top1), Some(fpr)) = (m.top1, m.fpr) {
        let drop = m.accuracy_drop.map(pct).unwrap_or_default();
        summary.push_str(&format!("{model},autoprune,{},{drop},{}\n", pct(top1), pct(fpr)));
    }

    let it: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
    let accuracy = plot::lines(
        "Validation-batch accuracy during search",
        "iteration",
        "accuracy",
        &[("val_acc", it.iter().zip(&rows).map(|(&x, r)| (x, r.val_acc)).collect())],
    );
    let cost = plot::lines(
        "FLOPs cost during search",
        "iteration",
        "value",
        &[
            ("Cost(R)", it.iter().zip(&rows).map(|(&x, r)| (x, r.cost)).collect()),
            (
                "exact FPR",
                it.iter().zip(&rows).map(|(&x, r)| (x, r.exact_fpr)).collect(),
            ),
        ],
    );
    let layers = rows[0].ratios.len();
    let bands: Vec<(String, Vec<f64>)> = (0..layers)
        .map(|j| (format!("R_{j}"), rows.iter().map(|r| r.ratios[j]).collect()))
        .collect();
    let ratios = plot::heatlines("Remaining ratio per layer", "iteration", &it, &bands);

    Ok(vec![
        (SUMMARY.into(), summary),
        ("accuracy.svg".into(), accuracy),
        ("cost.svg".into(), cost),
        ("ratios.svg".into(), ratios),
    ])
}

pub fn report(dir: &Path) -> anyhow::Result<()> {
    for (name, body) in render(dir)? {
        let path = dir.join(&name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
