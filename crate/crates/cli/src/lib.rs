//! Subcommands of the `xsrank` binary.
//!
//! Each command reads a flat TOML config, applies command-line overrides,
//! writes its outputs under `--out` and records the resolved config there
//! as `resolved_config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xsrank::backtest::{self, ExecutionConfig};
use xsrank::features::{augment_lf, compute_factors, write_factors_csv};
use xsrank::marketdata::{
    apply_normalizer_all, filter_tradable, fit_normalizer, generate_synthetic_market, load_market,
    write_csv, CrossSection, MarketData, NormalizationState, SyntheticConfig, LOOKBACK_DAYS,
};
use xsrank::metrics::{ic_summary, spearman, write_daily_csv, write_summary_csv, DailyEvaluation};
use xsrank::model::{forward, read_checkpoint, write_checkpoint, ScoreVector};
use xsrank::train::{train, write_log_csv, TrainConfig};

pub const SNAPSHOT: &str = "resolved_config.toml";

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// `key=value` pairs; values parse as TOML and fall back to strings.
    pub overrides: Vec<String>,
    pub no_timestamp: bool,
}

/// One-line JSON error report with a category from the core error when
/// there is one.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<xsrank::Error>())
        .map_or("cli", |e| e.kind());
    let message = err
        .chain()
        .map(|e| e.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(": ");
    serde_json::json!({ "error": message, "kind": kind }).to_string()
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// TOML dates become ISO strings so chrono can read them.
fn normalize_dates(table: &mut toml::Table) {
    for (_, v) in table.iter_mut() {
        if let toml::Value::Datetime(d) = v {
            *v = toml::Value::String(d.to_string());
        }
    }
}

fn load_table(opts: &RunOptions) -> Result<toml::Table> {
    let mut table = match &opts.config {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .parse::<toml::Table>()
            .with_context(|| format!("parsing {}", path.display()))?,
        None => toml::Table::new(),
    };
    for o in &opts.overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    if let Some(seed) = opts.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    normalize_dates(&mut table);
    Ok(table)
}

fn field_names<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Splits a flat table into the command's own keys `R` and the module
/// config `M`; unknown keys are rejected by `M`.
fn split<R, M>(mut table: toml::Table) -> Result<(R, M)>
where
    R: DeserializeOwned + Serialize + Default,
    M: DeserializeOwned,
{
    let mut own = toml::Table::new();
    for key in field_names::<R>() {
        if let Some(v) = table.remove(&key) {
            own.insert(key, v);
        }
    }
    let run: R = toml::Value::Table(own).try_into().context("invalid command settings")?;
    let module: M = toml::Value::Table(table).try_into().context("invalid module settings")?;
    Ok((run, module))
}

fn write_snapshot(opts: &RunOptions, command: &str, parts: &[toml::Value]) -> Result<()> {
    let mut table = toml::Table::new();
    for part in parts {
        if let toml::Value::Table(t) = part {
            table.extend(t.clone());
        }
    }
    let mut text = format!("# xsrank {command}\n");
    if !opts.no_timestamp {
        text.push_str(&format!("# generated {}\n", chrono::Utc::now().to_rfc3339()));
    }
    text.push_str(&toml::to_string(&table)?);
    fs::write(opts.out.join(SNAPSHOT), text)?;
    Ok(())
}

fn prepare_out(opts: &RunOptions) -> Result<()> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))
}

/// Dataset location and date window shared by data-consuming commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub data: Option<PathBuf>,
    pub lookback_days: usize,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    /// Append the intraday factors to the low-frequency fields.
    pub use_factors: bool,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            data: None,
            lookback_days: LOOKBACK_DAYS,
            start: None,
            end: None,
            use_factors: false,
            seed: 0,
        }
    }
}

fn in_range(date: NaiveDate, start: Option<NaiveDate>, end: Option<NaiveDate>) -> bool {
    start.is_none_or(|s| date >= s) && end.is_none_or(|e| date <= e)
}

fn load_data(path: &Option<PathBuf>, lookback: usize) -> Result<MarketData> {
    let dir = path.as_ref().ok_or_else(|| anyhow!("no dataset given; set `data`"))?;
    Ok(load_market(dir, lookback).with_context(|| format!("loading {}", dir.display()))?)
}

/// Tradable cross-sections, with factors appended when requested.
fn prepared_sections(market: &MarketData, use_factors: bool) -> Result<Vec<CrossSection>> {
    market
        .cross_sections()?
        .iter()
        .map(|cs| {
            let cs = if use_factors { augment_lf(cs)? } else { cs.clone() };
            Ok(filter_tradable(&cs)?)
        })
        .collect()
}

fn window(sections: Vec<CrossSection>, start: Option<NaiveDate>, end: Option<NaiveDate>) -> Result<Vec<CrossSection>> {
    let out: Vec<_> = sections.into_iter().filter(|c| in_range(c.date, start, end)).collect();
    if out.is_empty() {
        bail!("no cross-sections in the requested date range");
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateSettings {
    seed: u64,
}

/// Writes a synthetic market plus its planted latent scores.
pub fn cmd_generate(opts: &RunOptions) -> Result<PathBuf> {
    let (run, cfg): (GenerateSettings, SyntheticConfig) = split(load_table(opts)?)?;
    prepare_out(opts)?;
    let market = generate_synthetic_market(&cfg, run.seed)?;
    write_csv(&market.data, &opts.out)?;
    let path = opts.out.join("latent.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["date", "stock_id", "latent"])?;
    for (d, date) in market.data.dates.iter().enumerate() {
        for (s, stock) in market.data.stocks.iter().enumerate() {
            if let Some(v) = market.latent[s][d] {
                w.write_record([date.to_string(), stock.stock_id.clone(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    write_snapshot(
        opts,
        "generate",
        &[toml::Value::try_from(&run)?, toml::Value::try_from(&cfg)?],
    )?;
    log::info!("wrote {} stocks over {} dates to {}", cfg.stocks, market.data.dates.len(), opts.out.display());
    Ok(opts.out.clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    data: Option<PathBuf>,
    lookback_days: usize,
    train_start: Option<NaiveDate>,
    train_end: Option<NaiveDate>,
    valid_start: Option<NaiveDate>,
    valid_end: Option<NaiveDate>,
    use_factors: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: None,
            lookback_days: LOOKBACK_DAYS,
            train_start: None,
            train_end: None,
            valid_start: None,
            valid_end: None,
            use_factors: false,
        }
    }
}

/// Trains on the training window, selects a checkpoint on the validation
/// window and writes `model.ckpt`, `train_log.csv` and `epochs.csv`.
///
/// Without explicit dates the first 80% of cross-sections train and the
/// rest validate.
pub fn cmd_train(opts: &RunOptions) -> Result<PathBuf> {
    let (run, cfg): (TrainSettings, TrainConfig) = split(load_table(opts)?)?;
    cfg.validate()?;
    prepare_out(opts)?;
    let market = load_data(&run.data, run.lookback_days)?;
    let sections = prepared_sections(&market, run.use_factors)?;
    if sections.len() < 2 {
        bail!("need at least two cross-sections to train and validate");
    }
    let default_cut = sections[(sections.len() * 4 / 5).clamp(1, sections.len() - 1) - 1].date;
    let train_end = run.train_end.unwrap_or(default_cut);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for cs in sections {
        if in_range(cs.date, run.train_start, Some(train_end)) {
            tr.push(cs);
        } else if cs.date > train_end && in_range(cs.date, run.valid_start, run.valid_end) {
            va.push(cs);
        }
    }
    if tr.is_empty() || va.is_empty() {
        bail!("empty training ({}) or validation ({}) window", tr.len(), va.len());
    }
    let state = fit_normalizer(&tr)?;
    let tr = apply_normalizer_all(&state, &tr)?;
    let va = apply_normalizer_all(&state, &va)?;
    log::info!("training on {} days, validating on {} days", tr.len(), va.len());
    let outcome = train(&tr, &va, &cfg, Some(&state), |row| {
        log::debug!("step {} lr {:e} loss {}", row.step, row.lr, row.loss)
    })?;
    write_checkpoint(&opts.out.join("model.ckpt"), &outcome.selected)?;
    write_log_csv(&opts.out.join("train_log.csv"), &outcome.log)?;
    let mut w = csv::Writer::from_path(opts.out.join("epochs.csv"))?;
    w.write_record(["epoch", "step", "val_rankic", "selected"])?;
    for (i, c) in outcome.epochs.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            c.step.to_string(),
            c.val_rankic.map(|v| v.to_string()).unwrap_or_default(),
            (c.step == outcome.selected.step).to_string(),
        ])?;
    }
    w.flush()?;
    write_snapshot(
        opts,
        "train",
        &[toml::Value::try_from(&run)?, toml::Value::try_from(&cfg)?],
    )?;
    Ok(opts.out.join("model.ckpt"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSettings {
    checkpoint: Option<PathBuf>,
}

type Scored = (Vec<DailyEvaluation>, Vec<(NaiveDate, ScoreVector)>, MarketData);

/// Scores every cross-section in the window with a checkpoint.
fn score_window(data: &DataSettings, checkpoint: &Path) -> Result<Scored> {
    let ckpt = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let state: &NormalizationState = ckpt
        .normalizer
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint carries no normalization state"))?;
    let market = load_data(&data.data, data.lookback_days)?;
    let sections = window(prepared_sections(&market, data.use_factors)?, data.start, data.end)?;
    let sections = apply_normalizer_all(state, &sections)?;
    let scores = sections
        .iter()
        .map(|cs| Ok((cs.date, forward(&ckpt.params, cs)?)))
        .collect::<Result<Vec<_>>>()?;
    let daily = scores
        .iter()
        .zip(&sections)
        .map(|((date, s), cs)| {
            Ok(DailyEvaluation {
                date: *date,
                rank_ic: spearman(&s.scores, &cs.returns)?,
                n_stocks: cs.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((daily, scores, market))
}

/// Writes `daily_ic.csv`, `ic_summary.csv` and `scores.csv`.
pub fn cmd_evaluate(opts: &RunOptions) -> Result<PathBuf> {
    let (model, data): (ModelSettings, DataSettings) = split(load_table(opts)?)?;
    let checkpoint = model.checkpoint.clone().ok_or_else(|| anyhow!("no checkpoint given; set `checkpoint`"))?;
    prepare_out(opts)?;
    let (daily, scores, _) = score_window(&data, &checkpoint)?;
    write_daily_csv(&opts.out.join("daily_ic.csv"), &daily)?;
    write_summary_csv(&opts.out.join("ic_summary.csv"), &ic_summary(&daily))?;
    backtest::write_scores_csv(&opts.out.join("scores.csv"), &scores)?;
    write_snapshot(
        opts,
        "evaluate",
        &[toml::Value::try_from(&model)?, toml::Value::try_from(&data)?],
    )?;
    Ok(opts.out.join("daily_ic.csv"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BacktestSettings {
    checkpoint: Option<PathBuf>,
    scores: Option<PathBuf>,
    data: Option<PathBuf>,
    lookback_days: Option<usize>,
    start: Option<NaiveDate>,
    end: Option<NaiveDate>,
    use_factors: bool,
    seed: u64,
}

/// Runs the sorted-portfolio backtest from a scores file or a checkpoint
/// and writes `equity.csv`, `fills.csv`, `returns.csv` and `summary.csv`.
pub fn cmd_backtest(opts: &RunOptions) -> Result<PathBuf> {
    let (run, exec): (BacktestSettings, ExecutionConfig) = split(load_table(opts)?)?;
    exec.validate()?;
    prepare_out(opts)?;
    let data = DataSettings {
        data: run.data.clone(),
        lookback_days: run.lookback_days.unwrap_or(LOOKBACK_DAYS),
        start: run.start,
        end: run.end,
        use_factors: run.use_factors,
        seed: run.seed,
    };
    let (scores, market) = match (&run.scores, &run.checkpoint) {
        (Some(path), None) => {
            let all = backtest::read_scores_csv(path)?;
            let scores: Vec<_> = all.into_iter().filter(|(d, _)| in_range(*d, run.start, run.end)).collect();
            (scores, load_data(&run.data, data.lookback_days)?)
        }
        (None, Some(ckpt)) => {
            let (_, scores, market) = score_window(&data, ckpt)?;
            (scores, market)
        }
        _ => bail!("set exactly one of `scores` and `checkpoint`"),
    };
    let result = backtest::run_backtest(&scores, &market, &exec)?;
    for w in &result.ledger.warnings {
        log::warn!("{w}");
    }
    backtest::write_equity_csv(&opts.out.join("equity.csv"), &result.ledger)?;
    backtest::write_fills_csv(&opts.out.join("fills.csv"), &result.ledger)?;
    backtest::write_summary_csv(&opts.out.join("summary.csv"), &result.summary)?;
    let mut w = csv::Writer::from_path(opts.out.join("returns.csv"))?;
    w.write_record(["date", "portfolio", "benchmark"])?;
    for ((p, r), b) in result.ledger.equity.iter().skip(1).zip(&result.returns).zip(&result.benchmark) {
        w.write_record([p.date.to_string(), r.to_string(), b.to_string()])?;
    }
    w.flush()?;
    write_snapshot(
        opts,
        "backtest",
        &[toml::Value::try_from(&run)?, toml::Value::try_from(&exec)?],
    )?;
    Ok(opts.out.join("summary.csv"))
}

/// Writes `factors.csv` for every cross-section in the window.
pub fn cmd_features(opts: &RunOptions) -> Result<PathBuf> {
    let (data, ()): (DataSettings, ()) = split_only(load_table(opts)?)?;
    prepare_out(opts)?;
    let market = load_data(&data.data, data.lookback_days)?;
    let sections = window(market.cross_sections()?, data.start, data.end)?;
    let mut rows = Vec::new();
    for cs in &sections {
        rows.extend(compute_factors(cs)?);
    }
    let path = opts.out.join("factors.csv");
    write_factors_csv(&path, &rows)?;
    write_snapshot(opts, "features", &[toml::Value::try_from(&data)?])?;
    Ok(path)
}

/// Like [`split`] for commands without a module config.
fn split_only<R>(table: toml::Table) -> Result<(R, ())>
where
    R: DeserializeOwned,
{
    let run: R = toml::Value::Table(table).try_into().context("invalid command settings")?;
    Ok((run, ()))
}
