//! Ranking and portfolio evaluation metrics.
//!
//! Undefined results (constant inputs, zero dispersion) are reported as
//! `None` rather than NaN so callers can exclude them from aggregates.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RankIC of one cross-section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyEvaluation {
    pub date: NaiveDate,
    pub rank_ic: Option<f64>,
    pub n_stocks: usize,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// 1-based ranks, ties receive the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: length mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!("{what}: need at least 2 values")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y, "pearson")?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y, "spearman")?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Mean daily RankIC over its sample standard deviation. Days without a
/// defined RankIC are skipped.
pub fn rank_icir(daily: &[DailyEvaluation]) -> Option<f64> {
    let ics: Vec<f64> = daily.iter().filter_map(|d| d.rank_ic).collect();
    ratio_of_mean_to_std(&ics)
}

pub fn mean_rank_ic(daily: &[DailyEvaluation]) -> Option<f64> {
    let ics: Vec<f64> = daily.iter().filter_map(|d| d.rank_ic).collect();
    (!ics.is_empty()).then(|| mean(&ics))
}

fn ratio_of_mean_to_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let sd = sample_std(values);
    (sd > 0.0).then(|| mean(values) / sd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drawdown {
    /// Largest running-peak minus value, in equity units.
    pub absolute: f64,
    /// Largest drop relative to its running peak, in percent.
    pub relative_pct: f64,
}

pub fn max_drawdown(equity: &[f64]) -> Result<Drawdown> {
    if equity.is_empty() {
        return Err(Error::InvalidArgument("max_drawdown: empty series".into()));
    }
    let mut peak = equity[0];
    let mut absolute: f64 = 0.0;
    let mut relative: f64 = 0.0;
    for &p in equity {
        peak = peak.max(p);
        let drop = peak - p;
        absolute = absolute.max(drop);
        if peak > 0.0 {
            relative = relative.max(drop / peak);
        }
    }
    Ok(Drawdown {
        absolute,
        relative_pct: relative * 100.0,
    })
}

/// Mean excess return over its sample standard deviation.
pub fn information_ratio(portfolio: &[f64], benchmark: &[f64]) -> Result<Option<f64>> {
    check_pair(portfolio, benchmark, "information_ratio")?;
    let excess: Vec<f64> = portfolio.iter().zip(benchmark).map(|(p, b)| p - b).collect();
    Ok(ratio_of_mean_to_std(&excess))
}

/// `(final / initial - 1) * 100`.
pub fn accumulated_return(equity: &[f64]) -> Result<f64> {
    match (equity.first(), equity.last()) {
        (Some(&first), Some(&last)) if first > 0.0 => Ok((last / first - 1.0) * 100.0),
        (Some(_), _) => Err(Error::InvalidArgument(
            "accumulated_return: initial equity must be positive".into(),
        )),
        _ => Err(Error::InvalidArgument("accumulated_return: empty series".into())),
    }
}

/// Simple returns between consecutive points.
pub fn period_returns(equity: &[f64]) -> Vec<f64> {
    equity.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `date,rank_ic,n_stocks`; undefined ICs are left empty.
pub fn write_daily_csv(path: &Path, daily: &[DailyEvaluation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "rank_ic", "n_stocks"])?;
    for d in daily {
        w.write_record([
            d.date.to_string(),
            fmt_opt(d.rank_ic),
            d.n_stocks.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metric,value` rows.
pub fn write_summary_csv(path: &Path, rows: &[(&str, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (name, value) in rows {
        w.write_record([name.to_string(), fmt_opt(*value)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregate row set for a list of daily evaluations.
pub fn ic_summary(daily: &[DailyEvaluation]) -> Vec<(&'static str, Option<f64>)> {
    let ics: Vec<f64> = daily.iter().filter_map(|d| d.rank_ic).collect();
    vec![
        ("days", Some(daily.len() as f64)),
        ("valid_days", Some(ics.len() as f64)),
        ("mean_rank_ic", mean_rank_ic(daily)),
        ("rank_ic_std", (ics.len() >= 2).then(|| sample_std(&ics))),
        ("rank_icir", rank_icir(daily)),
    ]
}
