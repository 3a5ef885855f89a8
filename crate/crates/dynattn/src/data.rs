//! Panel ingestion, imputation, anchored windowing, and leakage-free
//! standardization.
//!
//! A month is addressed by the integer index `year * 12 + month`. Every
//! [`PanelSeries`] holds a contiguous month range; gaps in the source data
//! become rows with all predictors and the target marked missing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Standard deviations below this floor are treated as degenerate: the
/// feature carries no information at that anchor and standardizes to 0.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// One spatial unit's aligned monthly targets and raw predictor series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSeries {
    pub unit_id: String,
    /// Month index of the first row; months run contiguously from here.
    pub first_month: i64,
    /// Target counts; `None` where unobserved (gap rows).
    pub y: Vec<Option<f64>>,
    /// Row-major T x F raw predictors with explicit missing marker.
    pub x: Vec<Option<f64>>,
    pub feature_names: Vec<String>,
}

impl PanelSeries {
    pub fn new(
        unit_id: String,
        first_month: i64,
        y: Vec<Option<f64>>,
        x: Vec<Option<f64>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let t = y.len();
        let f = feature_names.len();
        if x.len() != t * f {
            return Err(Error::Data(format!(
                "unit {unit_id}: predictor matrix has {} entries, expected {}x{}",
                x.len(),
                t,
                f
            )));
        }
        for (i, v) in y.iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::Data(format!(
                        "unit {unit_id}: target at month {} is {v}",
                        first_month + i as i64
                    )));
                }
            }
        }
        Ok(PanelSeries {
            unit_id,
            first_month,
            y,
            x,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn last_month(&self) -> i64 {
        self.first_month + self.len() as i64 - 1
    }

    /// Row index for a month, if within range.
    pub fn month_index(&self, month: i64) -> Option<usize> {
        if month < self.first_month || month > self.last_month() {
            None
        } else {
            Some((month - self.first_month) as usize)
        }
    }

    /// Raw (possibly missing) value of feature `j` at row `i`.
    pub fn raw(&self, i: usize, j: usize) -> Option<f64> {
        self.x[i * self.n_features() + j]
    }

    /// Feature column `j` restricted to the first `len` rows.
    pub fn column_prefix(&self, j: usize, len: usize) -> Vec<Option<f64>> {
        (0..len).map(|i| self.raw(i, j)).collect()
    }
}

/// Two-pass fill: carry forward from the nearest previous observation, then
/// carry backward for leading gaps; anything still unfilled becomes 0.
/// Non-finite observed values are treated as missing.
pub fn impute_series(raw: &[Option<f64>]) -> Vec<f64> {
    let mut out = vec![f64::NAN; raw.len()];
    let mut last = f64::NAN;
    for (i, v) in raw.iter().enumerate() {
        if let Some(v) = v {
            if v.is_finite() {
                last = *v;
            }
        }
        out[i] = last;
    }
    let mut next = f64::NAN;
    for i in (0..out.len()).rev() {
        if out[i].is_finite() {
            next = out[i];
        } else {
            out[i] = next;
        }
    }
    for v in &mut out {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    out
}

/// Mean and population standard deviation of feature `j` over imputed values
/// at months `<= t`. The returned sigma is floored at [`SIGMA_FLOOR`].
pub fn anchor_stats(series: &PanelSeries, t: i64, j: usize) -> Result<(f64, f64)> {
    let idx = series.month_index(t).ok_or_else(|| {
        Error::Data(format!(
            "anchor {t} outside series range [{}, {}]",
            series.first_month,
            series.last_month()
        ))
    })?;
    let filled = impute_series(&series.column_prefix(j, idx + 1));
    Ok(mean_pop_std(&filled))
}

fn mean_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(SIGMA_FLOOR))
}

/// Mean and population std of feature `j` over the whole imputed series.
/// Used only by diagnostics that deliberately fix standardization.
pub fn global_stats(series: &PanelSeries, j: usize) -> (f64, f64) {
    let filled = impute_series(&series.column_prefix(j, series.len()));
    mean_pop_std(&filled)
}

/// A standardized, imputed S x F predictor window anchored at month `anchor`,
/// plus targets for horizons 1..=H.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowBatch {
    pub anchor: i64,
    pub s: usize,
    pub f: usize,
    /// Row-major S x F standardized values; all finite.
    pub values: Vec<f64>,
    /// Targets for horizons 1..=H; `None` where unavailable.
    pub targets: Vec<Option<f64>>,
    /// Per-feature (mu, sigma) used for standardization at this anchor.
    pub stats: Vec<(f64, f64)>,
}

impl WindowBatch {
    pub fn value(&self, s: usize, j: usize) -> f64 {
        self.values[s * self.f + j]
    }
}

/// Build the window anchored at month `t`. Requires `S` full months of
/// history; standardization uses only months `<= t`.
pub fn build_window(series: &PanelSeries, t: i64, s_len: usize, horizons: usize) -> Result<WindowBatch> {
    let idx = series.month_index(t).ok_or_else(|| {
        Error::Data(format!("anchor {t} outside series for unit {}", series.unit_id))
    })?;
    if idx + 1 < s_len {
        return Err(Error::Data(format!(
            "unit {}: anchor {t} has only {} months of history, window needs {s_len}",
            series.unit_id,
            idx + 1
        )));
    }
    let f = series.n_features();
    let mut values = vec![0.0; s_len * f];
    let mut stats = Vec::with_capacity(f);
    for j in 0..f {
        let filled = impute_series(&series.column_prefix(j, idx + 1));
        let (mu, sigma) = mean_pop_std(&filled);
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

/// Column mapping for delimited ingestion. With `feature_cols` unset, every
/// column other than unit/month/target becomes a feature, in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSchema {
    pub unit_col: String,
    pub month_col: String,
    pub target_col: String,
    #[serde(default)]
    pub feature_cols: Option<Vec<String>>,
}

impl Default for IngestSchema {
    fn default() -> Self {
        IngestSchema {
            unit_col: "unit_id".into(),
            month_col: "month".into(),
            target_col: "target".into(),
            feature_cols: None,
        }
    }
}

/// Parse `YYYY-MM` (or a plain integer index) to `year * 12 + month`.
pub fn parse_month(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    let (year, month) = s
        .split_once('-')
        .ok_or_else(|| Error::Data(format!("unparseable month '{s}'")))?;
    let year: i64 = year
        .parse()
        .map_err(|_| Error::Data(format!("unparseable month '{s}'")))?;
    let month: i64 = month
        .parse()
        .map_err(|_| Error::Data(format!("unparseable month '{s}'")))?;
    if !(1..=12).contains(&month) {
        return Err(Error::Data(format!("month out of range in '{s}'")));
    }
    Ok(year * 12 + month)
}

/// Render a month index back to `YYYY-MM`.
pub fn format_month(m: i64) -> String {
    let year = (m - 1).div_euclid(12);
    let month = (m - 1).rem_euclid(12) + 1;
    format!("{year:04}-{month:02}")
}

fn parse_cell(cell: &str, what: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "NA" {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Data(format!("non-numeric {what} '{cell}'")))
}

struct RowAccum {
    // month -> (target, features)
    rows: BTreeMap<i64, (Option<f64>, Vec<Option<f64>>)>,
}

fn assemble(
    units: BTreeMap<String, RowAccum>,
    feature_names: Vec<String>,
) -> Result<Vec<PanelSeries>> {
    let f = feature_names.len();
    let mut out = Vec::with_capacity(units.len());
    for (unit_id, acc) in units {
        let first = *acc.rows.keys().next().unwrap();
        let last = *acc.rows.keys().next_back().unwrap();
        let t = (last - first + 1) as usize;
        let mut y = vec![None; t];
        let mut x = vec![None; t * f];
        for (month, (target, feats)) in acc.rows {
            let i = (month - first) as usize;
            y[i] = target;
            x[i * f..(i + 1) * f].copy_from_slice(&feats);
        }
        out.push(PanelSeries::new(unit_id, first, y, x, feature_names.clone())?);
    }
    Ok(out)
}

/// Ingest a CSV panel: one row per (unit, month), columns per the schema.
/// Missing cells are empty or the literal `NA`. Month gaps become fully
/// missing rows; units come back in lexicographic order.
pub fn ingest_panel_csv(path: &Path, schema: &IngestSchema) -> Result<Vec<PanelSeries>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    };
    let unit_i = col(&schema.unit_col)?;
    let month_i = col(&schema.month_col)?;
    let target_i = col(&schema.target_col)?;
    let feature_names: Vec<String> = match &schema.feature_cols {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != unit_i && *i != month_i && *i != target_i)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let feature_idx: Vec<usize> = feature_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;

    let mut units: BTreeMap<String, RowAccum> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        let unit = record
            .get(unit_i)
            .ok_or_else(|| Error::Data(format!("row {}: short record", line + 2)))?
            .trim()
            .to_string();
        let month = parse_month(record.get(month_i).unwrap_or(""))?;
        let target = parse_cell(record.get(target_i).unwrap_or(""), "target")?;
        let feats: Vec<Option<f64>> = feature_idx
            .iter()
            .map(|&i| parse_cell(record.get(i).unwrap_or(""), "feature"))
            .collect::<Result<_>>()?;
        let acc = units.entry(unit.clone()).or_insert_with(|| RowAccum {
            rows: BTreeMap::new(),
        });
        if acc.rows.insert(month, (target, feats)).is_some() {
            return Err(Error::Data(format!(
                "duplicate row for unit '{unit}' month {}",
                format_month(month)
            )));
        }
    }
    assemble(units, feature_names)
}

/// Ingest line-delimited JSON: one object per (unit, month) with the same
/// keys as the CSV schema; features read from the remaining numeric keys or
/// from `feature_cols` when given. Missing = absent key or null.
pub fn ingest_panel_jsonl(path: &Path, schema: &IngestSchema) -> Result<Vec<PanelSeries>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut units: BTreeMap<String, RowAccum> = BTreeMap::new();
    let mut feature_names: Option<Vec<String>> = schema.feature_cols.clone();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: {e}", line_no + 1)))?;
        if feature_names.is_none() {
            let mut names: Vec<String> = obj
                .keys()
                .filter(|k| {
                    **k != schema.unit_col && **k != schema.month_col && **k != schema.target_col
                })
                .cloned()
                .collect();
            names.sort();
            feature_names = Some(names);
        }
        let names = feature_names.as_ref().unwrap();
        let unit = obj
            .get(&schema.unit_col)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Data(format!("line {}: missing unit", line_no + 1)))?
            .to_string();
        let month = match obj.get(&schema.month_col) {
            Some(serde_json::Value::String(s)) => parse_month(s)?,
            Some(serde_json::Value::Number(n)) => n
                .as_i64()
                .ok_or_else(|| Error::Data(format!("line {}: bad month", line_no + 1)))?,
            _ => return Err(Error::Data(format!("line {}: missing month", line_no + 1))),
        };
        let numeric = |v: &serde_json::Value, what: &str| -> Result<Option<f64>> {
            match v {
                serde_json::Value::Null => Ok(None),
                serde_json::Value::Number(n) => Ok(n.as_f64()),
                serde_json::Value::String(s) if s == "NA" || s.is_empty() => Ok(None),
                other => Err(Error::Data(format!("non-numeric {what} '{other}'"))),
            }
        };
        let target = match obj.get(&schema.target_col) {
            Some(v) => numeric(v, "target")?,
            None => None,
        };
        let feats: Vec<Option<f64>> = names
            .iter()
            .map(|n| match obj.get(n) {
                Some(v) => numeric(v, "feature"),
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        let acc = units.entry(unit.clone()).or_insert_with(|| RowAccum {
            rows: BTreeMap::new(),
        });
        if acc.rows.insert(month, (target, feats)).is_some() {
            return Err(Error::Data(format!(
                "duplicate row for unit '{unit}' month {}",
                format_month(month)
            )));
        }
    }
    assemble(units, feature_names.unwrap_or_default())
}

/// Serialize a panel store to pretty JSON (the `ingest` command output).
pub fn save_panels(path: &Path, panels: &[PanelSeries]) -> Result<()> {
    let text = serde_json::to_string_pretty(panels)
        .map_err(|e| Error::Data(format!("serialize panels: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_panels(path: &Path) -> Result<Vec<PanelSeries>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse panels: {e}")))
}
