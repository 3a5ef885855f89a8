//! Rolling-origin evaluation: per-horizon RMSE and squared-correlation R²,
//! a persistence baseline, and a seeded synthetic ZINB panel generator used
//! as ground truth in recovery tests.

use crate::data::PanelSeries;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One forecast record. `yhat = None` marks a model that produced no
/// prediction for this row (scored per the missing-value mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub unit: String,
    pub anchor: i64,
    pub h: usize,
    pub yhat: Option<f64>,
    /// P(Y >= tau) aligned with the table's tau list.
    pub pr: Vec<f64>,
    pub model: String,
    pub y_obs: Option<f64>,
}

/// Forecast rows with a shared threshold set; at most one row per
/// (unit, anchor, horizon, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTable {
    pub taus: Vec<f64>,
    pub rows: Vec<ForecastRow>,
}

impl ForecastTable {
    pub fn new(taus: Vec<f64>) -> Self {
        ForecastTable { taus, rows: Vec::new() }
    }

    pub fn push(&mut self, row: ForecastRow) -> Result<()> {
        if row.pr.len() != self.taus.len() {
            return Err(Error::Shape(format!(
                "row has {} exceedance entries, table has {} thresholds",
                row.pr.len(),
                self.taus.len()
            )));
        }
        if self
            .rows
            .iter()
            .any(|r| r.unit == row.unit && r.anchor == row.anchor && r.h == row.h && r.model == row.model)
        {
            return Err(Error::Data(format!(
                "duplicate forecast row ({}, {}, {}, {})",
                row.unit, row.anchor, row.h, row.model
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV with header `unit,anchor,h,yhat,pr_tau_<tau>...,model,y_obs`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["unit".to_string(), "anchor".into(), "h".into(), "yhat".into()];
        for tau in &self.taus {
            header.push(format!("pr_tau_{tau}"));
        }
        header.push("model".into());
        header.push("y_obs".into());
        w.write_record(&header).map_err(|e| Error::Data(format!("csv: {e}")))?;
        for r in &self.rows {
            let mut rec = vec![
                r.unit.clone(),
                r.anchor.to_string(),
                r.h.to_string(),
                r.yhat.map(|v| v.to_string()).unwrap_or_default(),
            ];
            for p in &r.pr {
                rec.push(p.to_string());
            }
            rec.push(r.model.clone());
            rec.push(r.y_obs.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv utf8: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<ForecastTable> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("csv: {e}")))?
            .clone();
        let mut taus = Vec::new();
        for hname in headers.iter() {
            if let Some(t) = hname.strip_prefix("pr_tau_") {
                taus.push(
                    t.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad threshold column {hname}")))?,
                );
            }
        }
        let mut table = ForecastTable::new(taus);
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Data(format!("bad number {s}")))
            }
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Data(format!("csv: {e}")))?;
            let get = |name: &str| -> Result<&str> {
                headers
                    .iter()
                    .position(|h| h == name)
                    .and_then(|i| rec.get(i))
                    .ok_or_else(|| Error::Data(format!("missing column {name}")))
            };
            let mut pr = Vec::with_capacity(table.taus.len());
            for tau in &table.taus.clone() {
                let v = get(&format!("pr_tau_{tau}"))?;
                pr.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad exceedance {v}")))?,
                );
            }
            table.push(ForecastRow {
                unit: get("unit")?.to_string(),
                anchor: get("anchor")?
                    .parse()
                    .map_err(|_| Error::Data("bad anchor".into()))?,
                h: get("h")?.parse().map_err(|_| Error::Data("bad horizon".into()))?,
                yhat: parse_opt(get("yhat")?)?,
                pr,
                model: get("model")?.to_string(),
                y_obs: parse_opt(get("y_obs")?)?,
            })?;
        }
        Ok(table)
    }
}

/// How rows with a missing prediction are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMode {
    /// Missing predictions count as 0; non-finite predictions are kept as-is
    /// (an infinite prediction makes the cell's RMSE infinite).
    Zero,
    /// Missing predictions are excluded; the valid count is reported.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseCell {
    pub rmse: f64,
    pub n_valid: usize,
}

/// RMSE per (model, horizon). Only rows with an observed target are
/// scorable; drop mode errors if a cell retains no rows.
pub fn rmse_per_horizon(
    table: &ForecastTable,
    mode: MissingMode,
) -> Result<BTreeMap<(String, usize), RmseCell>> {
    if table.rows.is_empty() {
        return Err(Error::Data("empty forecast table".into()));
    }
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    let mut seen: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for r in &table.rows {
        let Some(y) = r.y_obs else { continue };
        let key = (r.model.clone(), r.h);
        *seen.entry(key.clone()).or_default() += 1;
        let yhat = match (mode, r.yhat) {
            (MissingMode::Zero, None) => 0.0,
            (MissingMode::Zero, Some(v)) => v,
            (MissingMode::Drop, None) => continue,
            (MissingMode::Drop, Some(v)) => v,
        };
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += (yhat - y) * (yhat - y);
        e.1 += 1;
    }
    let mut out = BTreeMap::new();
    for (key, n_rows) in seen {
        match acc.get(&key) {
            Some(&(sum, n)) if n > 0 => {
                debug_assert!(mode == MissingMode::Drop || n == n_rows);
                out.insert(
                    key,
                    RmseCell {
                        rmse: (sum / n as f64).sqrt(),
                        n_valid: n,
                    },
                );
            }
            _ => {
                return Err(Error::Data(format!(
                    "model {} horizon {}: no valid predictions in drop mode",
                    key.0, key.1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no scorable rows (no observed targets)".into()));
    }
    Ok(out)
}

/// Squared Pearson correlation between predictions and observations on the
/// original scale, per (model, horizon). `None` marks degenerate cells
/// (fewer than two rows, zero variance, or non-finite inputs).
pub fn r2_per_horizon(table: &ForecastTable) -> BTreeMap<(String, usize), Option<f64>> {
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        let (Some(y), Some(yhat)) = (r.y_obs, r.yhat) else { continue };
        if !y.is_finite() || !yhat.is_finite() {
            continue;
        }
        groups
            .entry((r.model.clone(), r.h))
            .or_default()
            .push((yhat, y));
    }
    groups
        .into_iter()
        .map(|(key, pairs)| {
            let n = pairs.len() as f64;
            if pairs.len() < 2 {
                return (key, None);
            }
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for (x, y) in &pairs {
                sxx += (x - mx) * (x - mx);
                syy += (y - my) * (y - my);
                sxy += (x - mx) * (y - my);
            }
            if sxx <= 0.0 || syy <= 0.0 {
                return (key, None);
            }
            let r = sxy / (sxx * syy).sqrt();
            (key, Some(r * r))
        })
        .collect()
}

/// Persistence baseline: yhat_{t,h} = y_t for every horizon; exceedance is
/// the empirical frequency of y >= tau over the trailing `s_len` observed
/// months ending at the anchor.
pub fn persistence_baseline(
    series: &PanelSeries,
    anchor: i64,
    horizons: usize,
    s_len: usize,
    taus: &[f64],
) -> Result<Vec<ForecastRow>> {
    let idx = series
        .month_index(anchor)
        .ok_or_else(|| Error::Data(format!("anchor {anchor} outside series {}", series.unit_id)))?;
    let y_t = series.y[idx]
        .ok_or_else(|| Error::Data(format!("anchor {anchor} unobserved for {}", series.unit_id)))?;
    let lo = idx.saturating_sub(s_len - 1);
    let trailing: Vec<f64> = series.y[lo..=idx].iter().filter_map(|v| *v).collect();
    let pr: Vec<f64> = taus
        .iter()
        .map(|&tau| {
            if trailing.is_empty() {
                0.0
            } else {
                trailing.iter().filter(|&&y| y >= tau).count() as f64 / trailing.len() as f64
            }
        })
        .collect();
    Ok((1..=horizons)
        .map(|h| ForecastRow {
            unit: series.unit_id.clone(),
            anchor,
            h,
            yhat: Some(y_t),
            pr: pr.clone(),
            model: "persistence".into(),
            y_obs: series
                .month_index(anchor + h as i64)
                .and_then(|i| series.y[i]),
        })
        .collect())
}

fn default_ar() -> f64 {
    0.8
}
fn default_lag() -> usize {
    1
}
fn default_intercept() -> f64 {
    0.5
}

/// Specification of a synthetic ZINB panel with hidden truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub units: usize,
    /// Months per unit.
    pub t_len: usize,
    /// Feature count.
    pub f: usize,
    /// Indices of informative features.
    pub informative: Vec<usize>,
    /// Effect sizes aligned with `informative`.
    pub effects: Vec<f64>,
    /// Baseline of log mu.
    #[serde(default = "default_intercept")]
    pub intercept: f64,
    /// Structural zero-inflation probability.
    pub pi: f64,
    /// NB dispersion.
    pub theta: f64,
    /// AR(1) coefficient of the feature processes.
    #[serde(default = "default_ar")]
    pub ar_coef: f64,
    /// Lag at which informative features act on log mu.
    #[serde(default = "default_lag")]
    pub lag: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.t_len == 0 || self.f == 0 {
            return Err(Error::Config("units, t_len, f must be positive".into()));
        }
        if self.informative.len() != self.effects.len() {
            return Err(Error::Config("informative and effects lengths differ".into()));
        }
        if self.informative.iter().any(|&j| j >= self.f) {
            return Err(Error::Config("informative index out of range".into()));
        }
        if !(0.0..1.0).contains(&self.pi) || !(self.theta > 0.0) {
            return Err(Error::Config("need pi in [0,1) and theta > 0".into()));
        }
        if self.ar_coef.abs() >= 1.0 {
            return Err(Error::Config("ar_coef must be inside (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Generated panels plus the latent mean paths used to score recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthPanel {
    pub spec: SynthSpec,
    pub series: Vec<PanelSeries>,
    /// Per unit, per month, the true ZINB mu.
    pub mu: Vec<Vec<f64>>,
}

/// One ZINB draw via the gamma-Poisson mixture with a structural-zero coin.
pub fn sample_zinb<R: Rng + ?Sized>(rng: &mut R, mu: f64, theta: f64, pi: f64) -> u64 {
    if rng.random::<f64>() < pi {
        return 0;
    }
    let gamma = Gamma::new(theta, mu / theta).expect("valid gamma");
    let lambda: f64 = gamma.sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    let pois = Poisson::new(lambda).expect("valid poisson");
    let y: f64 = pois.sample(rng);
    y as u64
}

/// Generate the synthetic panel deterministically from the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthPanel> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let stationary_sd = 1.0 / (1.0 - spec.ar_coef * spec.ar_coef).sqrt();
    let mut series = Vec::with_capacity(spec.units);
    let mut mu_paths = Vec::with_capacity(spec.units);
    for u in 0..spec.units {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add((u as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        // AR(1) features, stationary start
        let mut x = vec![0.0; spec.t_len * spec.f];
        for j in 0..spec.f {
            let mut prev = normal.sample(&mut rng) * stationary_sd;
            x[j] = prev;
            for t in 1..spec.t_len {
                prev = spec.ar_coef * prev + normal.sample(&mut rng);
                x[t * spec.f + j] = prev;
            }
        }
        let mut y = Vec::with_capacity(spec.t_len);
        let mut mu_path = Vec::with_capacity(spec.t_len);
        for t in 0..spec.t_len {
            let mut log_mu = spec.intercept;
            if t >= spec.lag {
                for (k, &j) in spec.informative.iter().enumerate() {
                    log_mu += spec.effects[k] * x[(t - spec.lag) * spec.f + j];
                }
            }
            let mu = log_mu.clamp(-30.0, 13.0).exp();
            mu_path.push(mu);
            y.push(Some(sample_zinb(&mut rng, mu, spec.theta, spec.pi) as f64));
        }
        let names = (0..spec.f).map(|j| format!("x{j}")).collect();
        series.push(PanelSeries::new(
            format!("u{u:03}"),
            0,
            y,
            x.into_iter().map(Some).collect(),
            names,
        )?);
        mu_paths.push(mu_path);
    }
    Ok(SynthPanel {
        spec: spec.clone(),
        series,
        mu: mu_paths,
    })
}

/// Metrics keyed by model/horizon/mode, exportable as JSON or CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub model: String,
    pub h: usize,
    pub mode: String,
    pub rmse: f64,
    pub n_valid: usize,
    pub r2: Option<f64>,
}

/// Score a table under both missing-value modes.
pub fn compute_metrics(table: &ForecastTable) -> Result<Vec<MetricsEntry>> {
    let r2 = r2_per_horizon(table);
    let mut out = Vec::new();
    for (mode, tag) in [(MissingMode::Zero, "zero"), (MissingMode::Drop, "drop")] {
        for ((model, h), cell) in rmse_per_horizon(table, mode)? {
            let r2v = r2.get(&(model.clone(), h)).copied().flatten();
            out.push(MetricsEntry {
                model,
                h,
                mode: tag.into(),
                rmse: cell.rmse,
                n_valid: cell.n_valid,
                r2: r2v,
            });
        }
    }
    Ok(out)
}

pub fn metrics_to_csv(entries: &[MetricsEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "h", "mode", "rmse", "n_valid", "r2"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for e in entries {
        w.write_record([
            e.model.clone(),
            e.h.to_string(),
            e.mode.clone(),
            e.rmse.to_string(),
            e.n_valid.to_string(),
            e.r2.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|er| Error::Data(format!("csv: {er}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv utf8: {e}")))
}
