//! Interpretability suite: gate-based feature selection, ablation
//! importance, elasticity, and cross-feature normalization.
//!
//! Ablation scores a counterfactual forward with one gate forced to zero,
//! under standardization statistics computed once over the entire series.
//! Elasticity applies a multiplicative shock to one standardized column and
//! reuses the ordinary per-anchor standardization.

use crate::data::{build_window, global_stats, impute_series, PanelSeries, WindowBatch, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::model::{predict, predict_with_zero_gate, ModelState};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Anchors whose baseline squared error falls below this are skipped in
/// ablation averaging (the relative change is undefined).
pub const SE_FLOOR: f64 = 1e-12;
/// Denominator guard in the elasticity ratio.
pub const ELAS_EPS: f64 = 1e-8;
/// Default shock size (+10%).
pub const DEFAULT_DELTA: f64 = 0.10;
/// Default selection quantile (top 10% of positively gated features).
pub const DEFAULT_RHO: f64 = 0.10;

/// Top-rho selection over strictly positive gates: keep the
/// ceil(rho * #positive) largest, ties broken by larger gate then lower
/// feature index.
pub fn select_features(gates: &[f64], rho: f64) -> Result<Vec<usize>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho {rho} outside (0, 1]")));
    }
    let mut positive: Vec<usize> = (0..gates.len()).filter(|&j| gates[j] > 0.0).collect();
    if positive.is_empty() {
        return Ok(Vec::new());
    }
    positive.sort_by(|&a, &b| {
        gates[b]
            .partial_cmp(&gates[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let keep = ((rho * positive.len() as f64).ceil() as usize).clamp(1, positive.len());
    let mut selected = positive[..keep].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Like [`build_window`] but standardized with statistics computed once over
/// the whole series (the ablation convention). Leaks by construction; only
/// for diagnostics.
pub fn build_window_fixed_stats(
    series: &PanelSeries,
    t: i64,
    s_len: usize,
    horizons: usize,
) -> Result<WindowBatch> {
    let idx = series
        .month_index(t)
        .ok_or_else(|| Error::Data(format!("anchor {t} outside series {}", series.unit_id)))?;
    if idx + 1 < s_len {
        return Err(Error::Data(format!(
            "unit {}: anchor {t} lacks {s_len} months of history",
            series.unit_id
        )));
    }
    let f = series.n_features();
    let mut values = vec![0.0; s_len * f];
    let mut stats = Vec::with_capacity(f);
    for j in 0..f {
        let filled = impute_series(&series.column_prefix(j, series.len()));
        let (mu, sigma) = global_stats(series, j);
        stats.push((mu, sigma));
        let degenerate = sigma <= SIGMA_FLOOR;
        for s in 0..s_len {
            let v = filled[idx + 1 - s_len + s];
            values[s * f + j] = if degenerate { 0.0 } else { (v - mu) / sigma };
        }
    }
    let mut targets = Vec::with_capacity(horizons);
    for h in 1..=horizons as i64 {
        targets.push(series.month_index(t + h).and_then(|i| series.y[i]));
    }
    Ok(WindowBatch {
        anchor: t,
        s: s_len,
        f,
        values,
        targets,
        stats,
    })
}

/// Ablation importance of feature `j`: per horizon, the mean over usable
/// anchors of (SE_without_j - SE) / SE, where SE is the baseline squared
/// error against the observed target. `None` marks horizons where every
/// anchor was degenerate (SE below [`SE_FLOOR`]) or unobserved.
pub fn ablation_importance(
    state: &ModelState,
    series: &PanelSeries,
    j: usize,
    anchors: &[i64],
) -> Result<Vec<Option<f64>>> {
    if anchors.is_empty() {
        return Err(Error::Config("ablation needs at least one anchor".into()));
    }
    let cfg = &state.config;
    let mut sums = vec![0.0; cfg.horizons];
    let mut counts = vec![0usize; cfg.horizons];
    for &t in anchors {
        let w = build_window_fixed_stats(series, t, cfg.s, cfg.horizons)?;
        let base = predict(state, &w.values)?;
        let ablated = predict_with_zero_gate(state, &w.values, Some(j))?;
        for h in 0..cfg.horizons {
            let Some(y) = w.targets[h] else { continue };
            let se = (base[h].expected_count() - y).powi(2);
            if se < SE_FLOOR {
                continue;
            }
            let se_ablated = (ablated[h].expected_count() - y).powi(2);
            sums[h] += (se_ablated - se) / se;
            counts[h] += 1;
        }
    }
    Ok((0..cfg.horizons)
        .map(|h| (counts[h] > 0).then(|| sums[h] / counts[h] as f64))
        .collect())
}

/// Elasticity of feature `j`: per horizon, the mean over anchors of
/// (yhat_shocked - yhat) / (|yhat| + eps) after multiplying the
/// standardized column j by (1 + delta).
pub fn elasticity(
    state: &ModelState,
    series: &PanelSeries,
    j: usize,
    anchors: &[i64],
    delta: f64,
) -> Result<Vec<f64>> {
    if anchors.is_empty() {
        return Err(Error::Config("elasticity needs at least one anchor".into()));
    }
    if delta < 0.0 {
        return Err(Error::Config("shock delta must be non-negative".into()));
    }
    let cfg = &state.config;
    let mut sums = vec![0.0; cfg.horizons];
    for &t in anchors {
        let w = build_window(series, t, cfg.s, cfg.horizons)?;
        let base = predict(state, &w.values)?;
        let mut shocked = w.values.clone();
        for s in 0..cfg.s {
            shocked[s * cfg.f + j] *= 1.0 + delta;
        }
        let pert = predict(state, &shocked)?;
        for h in 0..cfg.horizons {
            let y0 = base[h].expected_count();
            let y1 = pert[h].expected_count();
            sums[h] += (y1 - y0) / (y0.abs() + ELAS_EPS);
        }
    }
    Ok(sums.iter().map(|s| s / anchors.len() as f64).collect())
}

/// Horizon-average each feature's row, then divide by the maximum absolute
/// value across features; an all-zero set maps to zeros. `None` horizon
/// entries are excluded from the average (an all-`None` row contributes 0).
pub fn normalize_report(rows: &[Vec<Option<f64>>]) -> Vec<f64> {
    let averaged: Vec<f64> = rows
        .iter()
        .map(|row| {
            let defined: Vec<f64> = row.iter().filter_map(|v| *v).collect();
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        })
        .collect();
    let max_abs = averaged.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        averaged.iter().map(|v| v / max_abs).collect()
    } else {
        vec![0.0; averaged.len()]
    }
}

/// Per-feature diagnostic rows for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: usize,
    pub name: String,
    /// Per-horizon values; `None` marks an undefined (all-degenerate) cell.
    pub per_horizon: Vec<Option<f64>>,
}

/// Full interpretability report for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub unit_id: String,
    pub anchors: Vec<i64>,
    pub rho: f64,
    pub delta: f64,
    pub gates: Vec<f64>,
    pub selected: Vec<usize>,
    pub ablation: Vec<FeatureRow>,
    pub elasticity: Vec<FeatureRow>,
    /// Normalized horizon-averaged ablation, aligned with `selected`.
    pub ablation_normalized: Vec<f64>,
    /// Normalized horizon-averaged elasticity, aligned with `selected`.
    pub elasticity_normalized: Vec<f64>,
}

/// Compute the full report: selection, ablation, elasticity, normalization.
pub fn compute_report(
    state: &ModelState,
    series: &PanelSeries,
    anchors: &[i64],
    rho: f64,
    delta: f64,
) -> Result<DiagnosticsReport> {
    let gates = state.gates();
    let selected = select_features(&gates, rho)?;
    let mut ablation = Vec::with_capacity(selected.len());
    let mut elas = Vec::with_capacity(selected.len());
    for &j in &selected {
        let name = series
            .feature_names
            .get(j)
            .cloned()
            .unwrap_or_else(|| format!("x{j}"));
        ablation.push(FeatureRow {
            feature: j,
            name: name.clone(),
            per_horizon: ablation_importance(state, series, j, anchors)?,
        });
        elas.push(FeatureRow {
            feature: j,
            name,
            per_horizon: elasticity(state, series, j, anchors, delta)?
                .into_iter()
                .map(Some)
                .collect(),
        });
    }
    let ablation_normalized = normalize_report(
        &ablation.iter().map(|r| r.per_horizon.clone()).collect::<Vec<_>>(),
    );
    let elasticity_normalized = normalize_report(
        &elas.iter().map(|r| r.per_horizon.clone()).collect::<Vec<_>>(),
    );
    Ok(DiagnosticsReport {
        unit_id: series.unit_id.clone(),
        anchors: anchors.to_vec(),
        rho,
        delta,
        gates,
        selected,
        ablation,
        elasticity: elas,
        ablation_normalized,
        elasticity_normalized,
    })
}

pub fn save_report_json(path: &Path, report: &DiagnosticsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("serialize report: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Flat CSV view: `unit,measure,feature,name,horizon,value`. Gate rows and
/// normalized rows carry an empty horizon column; undefined cells an empty
/// value.
pub fn report_to_csv(report: &DiagnosticsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["unit", "measure", "feature", "name", "horizon", "value"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    let mut row = |measure: &str, feature: usize, name: &str, horizon: Option<usize>, value: Option<f64>| {
        w.write_record([
            report.unit_id.as_str(),
            measure,
            &feature.to_string(),
            name,
            &horizon.map(|h| h.to_string()).unwrap_or_default(),
            &value.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::Data(format!("csv: {e}")))
    };
    for (j, g) in report.gates.iter().enumerate() {
        row("gate", j, "", None, Some(*g))?;
    }
    for measure in ["ablation", "elasticity"] {
        let rows = if measure == "ablation" {
            &report.ablation
        } else {
            &report.elasticity
        };
        for fr in rows {
            for (h, v) in fr.per_horizon.iter().enumerate() {
                row(measure, fr.feature, &fr.name, Some(h + 1), *v)?;
            }
        }
    }
    for (i, &j) in report.selected.iter().enumerate() {
        row(
            "ablation_norm",
            j,
            &report.ablation[i].name,
            None,
            Some(report.ablation_normalized[i]),
        )?;
        row(
            "elasticity_norm",
            j,
            &report.elasticity[i].name,
            None,
            Some(report.elasticity_normalized[i]),
        )?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv utf8: {e}")))
}
