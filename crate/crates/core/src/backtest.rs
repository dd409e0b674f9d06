//! Sorted-portfolio backtest with next-open execution.
//!
//! Scores formed at the close of day `T` become target weights that are
//! traded at the open of `T+1`. Orders are capped at a fraction of the
//! opening bar's volume, pay quadratic price impact on the capped share
//! and a commission. Unfilled remainders are dropped. Equity is marked at
//! each open before trading, plus one final mark after the last holding
//! period.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{MarketData, OpenBar};
use crate::metrics;
use crate::model::ScoreVector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LongOnly,
    #[default]
    LongShort,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommissionModel {
    /// `rate * |notional|`.
    #[default]
    Proportional,
    /// `rate * |shares|`.
    PerShare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub commission_rate: f64,
    pub commission_model: CommissionModel,
    /// Fraction of bar volume one order may take; `None` is unlimited,
    /// spelled `"unlimited"` in config files.
    #[serde(with = "volume_limit_serde")]
    pub volume_limit: Option<f64>,
    pub impact_coeff: f64,
    pub initial_capital: f64,
    pub mode: Mode,
    /// Fraction of the cross-section in each leg.
    pub decile: f64,
    /// Size the long leg on equity plus short-sale proceeds.
    pub reinvest_short_proceeds: bool,
}

mod volume_limit_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    const UNLIMITED: &str = "unlimited";

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str(UNLIMITED),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Word(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(Some(x)),
            Repr::Word(w) if w == UNLIMITED => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "volume_limit: expected a number or \"{UNLIMITED}\", got \"{w}\""
            ))),
        }
    }
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            commission_rate: 0.0002,
            commission_model: CommissionModel::Proportional,
            volume_limit: Some(0.0025),
            impact_coeff: 0.01,
            initial_capital: 1_000_000.0,
            mode: Mode::LongShort,
            decile: 0.10,
            reinvest_short_proceeds: false,
        }
    }
}

impl ExecutionConfig {
    /// No commission, no impact, unlimited volume.
    pub fn frictionless(initial_capital: f64, mode: Mode) -> Self {
        Self {
            commission_rate: 0.0,
            volume_limit: None,
            impact_coeff: 0.0,
            initial_capital,
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("backtest: {name} must be in [0, 1]")))
            }
        };
        unit("commission_rate", self.commission_rate)?;
        unit("impact_coeff", self.impact_coeff)?;
        unit("decile", self.decile)?;
        if let Some(v) = self.volume_limit {
            unit("volume_limit", v)?;
            if v == 0.0 {
                return Err(Error::Config("backtest: volume_limit must be positive".into()));
            }
        }
        if !(self.initial_capital > 0.0 && self.initial_capital.is_finite()) {
            return Err(Error::Config("backtest: initial_capital must be positive".into()));
        }
        Ok(())
    }
}

/// Target weights for one day.
#[derive(Clone, Debug, PartialEq)]
pub struct Portfolio {
    /// `(stock_id, weight)`; longs positive, shorts negative.
    pub weights: Vec<(String, f64)>,
    /// A leg boundary fell inside a run of equal scores.
    pub tie_at_boundary: bool,
}

/// Equal-weight top (and bottom) `max(1, floor(N * decile))` stocks by
/// score, ties broken by ascending stock id.
pub fn build_portfolio(scores: &ScoreVector, config: &ExecutionConfig) -> Result<Portfolio> {
    let n = scores.scores.len();
    if n != scores.stock_ids.len() {
        return Err(Error::InvalidArgument("build_portfolio: ids and scores differ in length".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("build_portfolio: need at least 2 stocks".into()));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("build_portfolio: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then_with(|| scores.stock_ids[a].cmp(&scores.stock_ids[b]))
    });
    let leg = ((n as f64 * config.decile).floor() as usize).clamp(1, n / 2);
    let s = |rank: usize| scores.scores[order[rank]];
    let mut tie = s(leg - 1) == s(leg);
    let mut weights: Vec<(String, f64)> = Vec::with_capacity(2 * leg);
    let short_gross = if config.mode == Mode::LongShort { 1.0 } else { 0.0 };
    let long_gross = 1.0 + if config.reinvest_short_proceeds { short_gross } else { 0.0 };
    for &i in &order[..leg] {
        weights.push((scores.stock_ids[i].clone(), long_gross / leg as f64));
    }
    if config.mode == Mode::LongShort {
        tie |= s(n - leg) == s(n - leg - 1);
        for &i in &order[n - leg..] {
            weights.push((scores.stock_ids[i].clone(), -short_gross / leg as f64));
        }
    }
    Ok(Portfolio {
        weights,
        tie_at_boundary: tie,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub date: NaiveDate,
    pub stock_id: String,
    /// Signed shares executed.
    pub shares: f64,
    /// Signed shares wanted.
    pub requested: f64,
    pub price: f64,
    pub fee: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub date: NaiveDate,
    pub equity: f64,
    pub cash: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BacktestLedger {
    pub cash: f64,
    pub holdings: BTreeMap<String, f64>,
    pub last_price: BTreeMap<String, f64>,
    pub fills: Vec<Fill>,
    pub equity: Vec<EquityPoint>,
    /// Per execution date: traded notional over pre-trade equity.
    pub turnover: Vec<f64>,
    pub warnings: Vec<String>,
}

impl BacktestLedger {
    pub fn new(initial_capital: f64) -> Self {
        Self {
            cash: initial_capital,
            ..Default::default()
        }
    }

    /// Cash plus positions at the latest known prices, after updating
    /// those prices from `bars`.
    pub fn mark(&mut self, bars: &HashMap<String, OpenBar>) -> f64 {
        for (id, bar) in bars {
            if bar.open > 0.0 && bar.open.is_finite() {
                self.last_price.insert(id.clone(), bar.open);
            }
        }
        self.cash
            + self
                .holdings
                .iter()
                .map(|(id, q)| q * self.last_price.get(id).copied().unwrap_or(0.0))
                .sum::<f64>()
    }
}

/// Records the pre-trade equity point for `date` and trades toward
/// `weights` at the open.
pub fn execute_day(
    ledger: &mut BacktestLedger,
    date: NaiveDate,
    weights: &[(String, f64)],
    bars: &HashMap<String, OpenBar>,
    config: &ExecutionConfig,
) -> Result<()> {
    let equity = ledger.mark(bars);
    ledger.equity.push(EquityPoint {
        date,
        equity,
        cash: ledger.cash,
    });

    let mut targets: BTreeMap<String, f64> =
        ledger.holdings.keys().map(|k| (k.clone(), 0.0)).collect();
    for (id, w) in weights {
        targets.insert(id.clone(), *w);
    }
    let mut traded = 0.0;
    let mut new_fills = Vec::new();
    for (id, w) in &targets {
        let (id, w) = (id.as_str(), *w);
        let held = ledger.holdings.get(id).copied().unwrap_or(0.0);
        let Some(bar) = bars.get(id).filter(|b| b.open > 0.0 && b.open.is_finite()) else {
            let msg = format!("{date}: no opening bar for {id}; position kept at last price");
            log::warn!("{msg}");
            ledger.warnings.push(msg);
            continue;
        };
        let target = w * equity / bar.open;
        let wanted = target - held;
        if wanted == 0.0 {
            continue;
        }
        let cap = config.volume_limit.map(|v| v * bar.volume);
        let size = match cap {
            Some(c) => wanted.abs().min(c),
            None => wanted.abs(),
        };
        if size < wanted.abs() {
            let msg = format!(
                "{date}: {id} order of {wanted} shares capped at {size}, remainder dropped"
            );
            log::debug!("{msg}");
        }
        if size == 0.0 {
            continue;
        }
        let side = wanted.signum();
        let ratio = cap.map_or(0.0, |c| size / c);
        let price = bar.open * (1.0 + side * config.impact_coeff * ratio * ratio);
        let shares = side * size;
        let fee = match config.commission_model {
            CommissionModel::Proportional => config.commission_rate * (shares * price).abs(),
            CommissionModel::PerShare => config.commission_rate * size,
        };
        ledger.cash -= shares * price + fee;
        traded += (shares * price).abs();
        let now = held + shares;
        if now == 0.0 {
            ledger.holdings.remove(id);
        } else {
            ledger.holdings.insert(id.to_string(), now);
        }
        new_fills.push(Fill {
            date,
            stock_id: id.to_string(),
            shares,
            requested: wanted,
            price,
            fee,
        });
    }
    ledger.fills.extend(new_fills);
    ledger.turnover.push(if equity > 0.0 { traded / equity } else { 0.0 });
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub accumulated_return_pct: f64,
    pub information_ratio: Option<f64>,
    pub max_drawdown_pct: f64,
    pub max_drawdown_abs: f64,
    /// Mean traded notional over pre-trade equity per execution day.
    pub turnover: f64,
    pub periods: usize,
    pub tie_days: usize,
}

#[derive(Clone, Debug)]
pub struct BacktestResult {
    pub ledger: BacktestLedger,
    pub summary: BacktestSummary,
    /// Per-period portfolio returns between consecutive equity points.
    pub returns: Vec<f64>,
    /// Equal-weight open-to-open return of all stocks over the same periods.
    pub benchmark: Vec<f64>,
}

fn open_map(market: &MarketData, date_idx: usize) -> HashMap<String, OpenBar> {
    market.open_bars(date_idx).into_iter().collect()
}

/// Runs the strategy over `scores_by_day`, one entry per formation date.
pub fn run_backtest(
    scores_by_day: &[(NaiveDate, ScoreVector)],
    market: &MarketData,
    config: &ExecutionConfig,
) -> Result<BacktestResult> {
    config.validate()?;
    if scores_by_day.is_empty() {
        return Err(Error::InvalidArgument("run_backtest: no score days".into()));
    }
    let mut days: Vec<(usize, &ScoreVector)> = Vec::with_capacity(scores_by_day.len());
    for (date, s) in scores_by_day {
        let d = market
            .date_index(*date)
            .ok_or_else(|| Error::Data(format!("run_backtest: {date} is not in the market calendar")))?;
        if d + 1 >= market.dates.len() {
            return Err(Error::Data(format!("run_backtest: no trading day after {date}")));
        }
        days.push((d, s));
    }
    days.sort_by_key(|(d, _)| *d);
    if days.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument("run_backtest: duplicate score date".into()));
    }

    let mut ledger = BacktestLedger::new(config.initial_capital);
    let mut exec_idx = Vec::with_capacity(days.len() + 1);
    let mut tie_days = 0;
    for (d, scores) in &days {
        let portfolio = build_portfolio(scores, config)?;
        if portfolio.tie_at_boundary {
            tie_days += 1;
            ledger
                .warnings
                .push(format!("{}: score tie at a leg boundary", market.dates[*d]));
        }
        let e = d + 1;
        execute_day(&mut ledger, market.dates[e], &portfolio.weights, &open_map(market, e), config)?;
        exec_idx.push(e);
    }
    let last = *exec_idx.last().expect("non-empty");
    if last + 1 < market.dates.len() {
        let equity = ledger.mark(&open_map(market, last + 1));
        ledger.equity.push(EquityPoint {
            date: market.dates[last + 1],
            equity,
            cash: ledger.cash,
        });
        exec_idx.push(last + 1);
    }

    let curve: Vec<f64> = ledger.equity.iter().map(|p| p.equity).collect();
    let returns = metrics::period_returns(&curve);
    let benchmark: Vec<f64> = exec_idx
        .windows(2)
        .map(|w| {
            let (a, b) = (market.open_bars(w[0]), market.open_bars(w[1]));
            let rs: Vec<f64> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x.1.open > 0.0 && y.1.open > 0.0 && x.1.volume > 0.0)
                .map(|(x, y)| y.1.open / x.1.open - 1.0)
                .collect();
            if rs.is_empty() {
                0.0
            } else {
                metrics::mean(&rs)
            }
        })
        .collect();
    let dd = metrics::max_drawdown(&curve)?;
    let information_ratio = if returns.len() >= 2 {
        metrics::information_ratio(&returns, &benchmark)?
    } else {
        None
    };
    let summary = BacktestSummary {
        accumulated_return_pct: metrics::accumulated_return(&curve)?,
        information_ratio,
        max_drawdown_pct: dd.relative_pct,
        max_drawdown_abs: dd.absolute,
        turnover: metrics::mean(&ledger.turnover),
        periods: returns.len(),
        tie_days,
    };
    Ok(BacktestResult {
        ledger,
        summary,
        returns,
        benchmark,
    })
}

/// Writes `date,equity,cash`.
pub fn write_equity_csv(path: &Path, ledger: &BacktestLedger) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "equity", "cash"])?;
    for p in &ledger.equity {
        w.write_record([p.date.to_string(), p.equity.to_string(), p.cash.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `date,stock_id,shares,requested,price,fee`.
pub fn write_fills_csv(path: &Path, ledger: &BacktestLedger) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in &ledger.fills {
        w.serialize(f)?;
    }
    if ledger.fills.is_empty() {
        w.write_record(["date", "stock_id", "shares", "requested", "price", "fee"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, s: &BacktestSummary) -> Result<()> {
    metrics::write_summary_csv(
        path,
        &[
            ("accumulated_return_pct", Some(s.accumulated_return_pct)),
            ("information_ratio", s.information_ratio),
            ("max_drawdown_pct", Some(s.max_drawdown_pct)),
            ("max_drawdown_abs", Some(s.max_drawdown_abs)),
            ("turnover", Some(s.turnover)),
            ("periods", Some(s.periods as f64)),
            ("tie_days", Some(s.tie_days as f64)),
        ],
    )
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    date: NaiveDate,
    stock_id: String,
    score: f64,
}

/// Reads `date,stock_id,score` into per-date score vectors, dates ascending.
pub fn read_scores_csv(path: &Path) -> Result<Vec<(NaiveDate, ScoreVector)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut by_date: BTreeMap<NaiveDate, ScoreVector> = BTreeMap::new();
    for (i, row) in r.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            message: e.to_string(),
        })?;
        let sv = by_date.entry(row.date).or_insert_with(|| ScoreVector {
            stock_ids: Vec::new(),
            scores: Vec::new(),
        });
        sv.stock_ids.push(row.stock_id);
        sv.scores.push(row.score);
    }
    Ok(by_date.into_iter().collect())
}

pub fn write_scores_csv(path: &Path, scores: &[(NaiveDate, ScoreVector)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "stock_id", "score"])?;
    for (date, sv) in scores {
        for (id, s) in sv.stock_ids.iter().zip(&sv.scores) {
            w.write_record([date.to_string(), id.clone(), s.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
