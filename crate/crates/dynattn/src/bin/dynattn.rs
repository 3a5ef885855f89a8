//! Command-line front end: ingestion, synthetic generation, rolling
//! training, forecasting, diagnostics, evaluation, and the parameter-count
//! calculator, driven by a JSON run config with flag overrides.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
//! All artifacts live under a run directory with a fixed layout
//! (`checkpoints/`, `forecasts/`, `diagnostics/`, `metrics/`,
//! `manifest.json`); timestamps appear only in manifests.

use clap::{Args, Parser, Subcommand};
use dynattn::data::{
    ingest_panel_csv, ingest_panel_jsonl, load_panels, save_panels, IngestSchema, PanelSeries,
};
use dynattn::diagnostics::{compute_report, report_to_csv, save_report_json, DEFAULT_DELTA, DEFAULT_RHO};
use dynattn::eval::{
    compute_metrics, metrics_to_csv, persistence_baseline, synth_generate, ForecastRow,
    ForecastTable, SynthSpec,
};
use dynattn::model::{
    count_parameters, load_checkpoint, save_checkpoint, HyperConfig, ModelState,
};
use dynattn::train::{
    forecast, rolling_fit, save_manifest, TrainConfig, TrainingManifest,
};
use dynattn::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dynattn", version, about = "Rolling multi-horizon forecaster for sparse count panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a delimited panel file into the internal panel store.
    Ingest(IngestArgs),
    /// Generate a synthetic panel with hidden truth.
    Synth(SynthArgs),
    /// Fit one model per unit with rolling anchors.
    Train(TrainArgs),
    /// Produce multi-horizon forecasts from saved checkpoints.
    Forecast(ForecastArgs),
    /// Gate selection, ablation, and elasticity reports.
    Diagnose(DiagnoseArgs),
    /// Score a forecast table (RMSE and R² per horizon).
    Evaluate(EvaluateArgs),
    /// Print the closed-form trainable-parameter count.
    Paramcount(ParamcountArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// CSV or JSONL input.
    #[arg(long)]
    input: PathBuf,
    /// Output panel store (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "unit_id")]
    unit_col: String,
    #[arg(long, default_value = "month")]
    month_col: String,
    #[arg(long, default_value = "target")]
    target_col: String,
    /// Comma-separated feature columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthSpec JSON file.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Panel store produced by `ingest` or `synth`.
    #[arg(long)]
    panels: PathBuf,
    /// Run config JSON (model + training blocks).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Work-pool size; defaults to available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps_per_anchor: Option<usize>,
    #[arg(long)]
    k_cap: Option<usize>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    panels: PathBuf,
    /// Run directory holding `checkpoints/`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Anchor month; defaults to each unit's last month.
    #[arg(long)]
    anchor: Option<i64>,
    /// Exceedance thresholds (comma-separated).
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Picks the default threshold set: country -> {25}, grid -> {1}.
    #[arg(long, default_value = "country")]
    granularity: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    panels: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Evaluation anchors (comma-separated); defaults to the last 12
    /// months with a full window.
    #[arg(long, value_delimiter = ',')]
    anchors: Option<Vec<i64>>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Forecast table CSV.
    #[arg(long)]
    forecasts: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ParamcountArgs {
    /// Feature count F.
    #[arg(long)]
    f: usize,
    #[arg(long, default_value_t = 256)]
    d: usize,
    #[arg(long, default_value_t = 128)]
    head_width: usize,
}

/// Declarative run configuration; flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: HyperConfig,
    train: TrainConfig,
    #[serde(default)]
    taus: Option<Vec<f64>>,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn echo_config<T: Serialize>(label: &str, value: &T) {
    // resolved-config echo for auditability
    let text = serde_json::to_string_pretty(value).unwrap_or_else(|_| "{}".into());
    println!("[{label}] resolved config:\n{text}");
}

fn ensure_run_dirs(run_dir: &Path) -> Result<()> {
    for sub in ["checkpoints", "forecasts", "diagnostics", "metrics"] {
        std::fs::create_dir_all(run_dir.join(sub))?;
    }
    Ok(())
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Anchors for a unit when the config leaves the list empty: every month
/// that supports a full window, excluding the final month (which has no
/// target).
fn auto_anchors(series: &PanelSeries, s: usize) -> Vec<i64> {
    let first = series.first_month + s as i64 - 1;
    let last = series.last_month() - 1;
    (first..=last).collect()
}

fn default_taus(granularity: &str) -> Result<Vec<f64>> {
    match granularity {
        "country" => Ok(vec![25.0]),
        "grid" => Ok(vec![1.0]),
        other => Err(Error::Config(format!(
            "granularity must be country or grid, got {other}"
        ))),
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let schema = IngestSchema {
        unit_col: args.unit_col.clone(),
        month_col: args.month_col.clone(),
        target_col: args.target_col.clone(),
        feature_cols: args.features.clone(),
    };
    echo_config("ingest", &schema);
    let ext = args
        .input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let panels = if ext == "jsonl" || ext == "ndjson" {
        ingest_panel_jsonl(&args.input, &schema)?
    } else {
        ingest_panel_csv(&args.input, &schema)?
    };
    save_panels(&args.out, &panels)?;
    println!(
        "ingested {} units -> {}",
        panels.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    echo_config("synth", &spec);
    let panel = synth_generate(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_panels(&args.out_dir.join("panels.json"), &panel.series)?;
    let truth = serde_json::to_string_pretty(&panel)
        .map_err(|e| Error::Data(format!("serialize truth: {e}")))?;
    std::fs::write(args.out_dir.join("truth.json"), truth)?;
    println!(
        "generated {} units x {} months -> {}",
        spec.units,
        spec.t_len,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(steps) = args.steps_per_anchor {
        cfg.train.steps_per_anchor = steps;
    }
    if let Some(k) = args.k_cap {
        cfg.train.k_cap = Some(k);
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    echo_config("train", &cfg);

    let panels = load_panels(&args.panels)?;
    if panels.is_empty() {
        return Err(Error::Data("panel store is empty".into()));
    }
    for p in &panels {
        if p.n_features() != cfg.model.f {
            return Err(Error::Config(format!(
                "unit {} has {} features, model expects {}",
                p.unit_id,
                p.n_features(),
                cfg.model.f
            )));
        }
    }
    ensure_run_dirs(&args.out_dir)?;

    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let out_dir = args.out_dir.clone();
    let run_cfg = cfg.clone();
    let results: Vec<Result<(String, Vec<i64>, Vec<f64>)>> = pool.install(|| {
        panels
            .par_iter()
            .enumerate()
            .map(|(i, series)| {
                let mut train_cfg = run_cfg.train.clone();
                if train_cfg.anchors.is_empty() {
                    train_cfg.anchors = auto_anchors(series, run_cfg.model.s);
                }
                // per-unit seed offset keeps unit fits independent
                let unit_seed = train_cfg.seed.wrapping_add(i as u64);
                let state = ModelState::init(run_cfg.model.clone(), unit_seed)?;
                let fit = rolling_fit(series, state, &train_cfg)?;
                let ck_path = out_dir
                    .join("checkpoints")
                    .join(format!("{}.json", series.unit_id));
                save_checkpoint(&ck_path, &fit.state)?;
                let manifest = TrainingManifest {
                    unit_id: series.unit_id.clone(),
                    model_config: run_cfg.model.clone(),
                    train_config: train_cfg,
                    anchors_used: fit.anchors_used.clone(),
                    loss_trace: fit.loss_trace.clone(),
                    checkpoint_path: ck_path.display().to_string(),
                    created_unix: now_unix(),
                };
                save_manifest(
                    &out_dir
                        .join("checkpoints")
                        .join(format!("{}.manifest.json", series.unit_id)),
                    &manifest,
                )?;
                Ok((series.unit_id.clone(), fit.anchors_used, fit.loss_trace))
            })
            .collect()
    });

    let mut summaries = Vec::new();
    for r in results {
        let (unit, anchors, trace) = r?;
        println!(
            "unit {unit}: {} anchors, final loss {:.6}",
            anchors.len(),
            trace.last().copied().unwrap_or(f64::NAN)
        );
        summaries.push(serde_json::json!({
            "unit": unit,
            "n_anchors": anchors.len(),
            "final_loss": trace.last(),
        }));
    }
    let manifest = serde_json::json!({
        "command": "train",
        "config": cfg,
        "units": summaries,
        "created_unix": now_unix(),
    });
    std::fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let taus = match &args.taus {
        Some(t) if !t.is_empty() => t.clone(),
        _ => default_taus(&args.granularity)?,
    };
    echo_config(
        "forecast",
        &serde_json::json!({ "taus": taus, "anchor": args.anchor, "granularity": args.granularity }),
    );
    let panels = load_panels(&args.panels)?;
    ensure_run_dirs(&args.run_dir)?;
    let mut table = ForecastTable::new(taus.clone());
    for series in &panels {
        let ck_path = args
            .run_dir
            .join("checkpoints")
            .join(format!("{}.json", series.unit_id));
        let state = load_checkpoint(&ck_path)?;
        let anchor = args.anchor.unwrap_or_else(|| series.last_month());
        let horizon_fcs = forecast(series, &state, anchor, &taus)?;
        for hf in &horizon_fcs {
            table.push(ForecastRow {
                unit: series.unit_id.clone(),
                anchor,
                h: hf.h,
                yhat: Some(hf.yhat),
                pr: hf.exceedance.iter().map(|(_, p)| *p).collect(),
                model: "dynattn".into(),
                y_obs: series
                    .month_index(anchor + hf.h as i64)
                    .and_then(|i| series.y[i]),
            })?;
        }
        for row in persistence_baseline(series, anchor, state.config.horizons, state.config.s, &taus)? {
            table.push(row)?;
        }
    }
    let out = args.run_dir.join("forecasts").join("forecasts.csv");
    table.save_csv(&out)?;
    println!("wrote {} rows -> {}", table.rows.len(), out.display());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let rho = args.rho.unwrap_or(DEFAULT_RHO);
    let delta = args.delta.unwrap_or(DEFAULT_DELTA);
    echo_config(
        "diagnose",
        &serde_json::json!({ "rho": rho, "delta": delta, "anchors": args.anchors }),
    );
    let panels = load_panels(&args.panels)?;
    ensure_run_dirs(&args.run_dir)?;
    for series in &panels {
        let ck_path = args
            .run_dir
            .join("checkpoints")
            .join(format!("{}.json", series.unit_id));
        let state = load_checkpoint(&ck_path)?;
        let anchors: Vec<i64> = match &args.anchors {
            Some(a) if !a.is_empty() => a.clone(),
            _ => {
                // last 12 anchors with a full window and a next-month target
                let all = auto_anchors(series, state.config.s);
                all.into_iter().rev().take(12).rev().collect()
            }
        };
        if anchors.is_empty() {
            return Err(Error::Data(format!(
                "unit {}: no usable diagnostics anchors",
                series.unit_id
            )));
        }
        let report = compute_report(&state, series, &anchors, rho, delta)?;
        let base = args.run_dir.join("diagnostics");
        save_report_json(&base.join(format!("{}.json", series.unit_id)), &report)?;
        std::fs::write(
            base.join(format!("{}.csv", series.unit_id)),
            report_to_csv(&report)?,
        )?;
        println!(
            "unit {}: {} features selected of {}",
            series.unit_id,
            report.selected.len(),
            report.gates.len()
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    echo_config(
        "evaluate",
        &serde_json::json!({ "forecasts": args.forecasts.display().to_string() }),
    );
    let table = ForecastTable::load_csv(&args.forecasts)?;
    let metrics = compute_metrics(&table)?;
    std::fs::create_dir_all(args.out_dir.join("metrics"))?;
    let json_path = args.out_dir.join("metrics").join("metrics.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Data(format!("serialize metrics: {e}")))?,
    )?;
    let csv_path = args.out_dir.join("metrics").join("metrics.csv");
    std::fs::write(&csv_path, metrics_to_csv(&metrics)?)?;
    for e in &metrics {
        println!(
            "model={} h={} mode={} rmse={:.4} n={}{}",
            e.model,
            e.h,
            e.mode,
            e.rmse,
            e.n_valid,
            e.r2.map(|v| format!(" r2={v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_paramcount(args: ParamcountArgs) -> Result<()> {
    println!("{}", count_parameters(args.f, args.d, args.head_width));
    Ok(())
}

fn error_kind(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Data(_) | Error::Shape(_) | Error::Io(_) => ("data", 3),
        Error::Numeric(_) => ("numeric", 4),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Paramcount(a) => cmd_paramcount(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version itself
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    serde_json::json!({ "kind": "config", "error": e.to_string() })
                );
                std::process::exit(2);
            }
            e.exit();
        }
    };
    if let Err(e) = run(cli) {
        let (kind, code) = error_kind(&e);
        eprintln!(
            "{}",
            serde_json::json!({ "kind": kind, "error": e.to_string() })
        );
        std::process::exit(code);
    }
}
