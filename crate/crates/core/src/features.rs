//! Classic intraday factors computed from the last day of each panel.
//!
//! Interval returns are close-to-close between consecutive bars of that
//! day. Undefined values (zero denominators, too few bars) are `None`.

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{CrossSection, FieldSchema};
use crate::metrics::fmt_opt;

/// `sum r^2`.
pub fn realized_variance(returns: &[f64]) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("realized_variance: no returns".into()));
    }
    Ok(returns.iter().map(|r| r * r).sum())
}

/// `sqrt(N) sum r^3 / RVar^1.5`.
pub fn realized_skewness(returns: &[f64]) -> Option<f64> {
    let rvar = realized_variance(returns).ok().filter(|v| *v > 0.0)?;
    let n = returns.len() as f64;
    Some(n.sqrt() * returns.iter().map(|r| r.powi(3)).sum::<f64>() / rvar.powf(1.5))
}

/// `N sum r^4 / RVar^2`.
pub fn realized_kurtosis(returns: &[f64]) -> Option<f64> {
    let rvar = realized_variance(returns).ok().filter(|v| *v > 0.0)?;
    let n = returns.len() as f64;
    Some(n * returns.iter().map(|r| r.powi(4)).sum::<f64>() / (rvar * rvar))
}

/// Share of realized variance from negative intervals.
pub fn downside_beta(returns: &[f64]) -> Option<f64> {
    let rvar = realized_variance(returns).ok().filter(|v| *v > 0.0)?;
    let down: f64 = returns.iter().filter(|r| **r < 0.0).map(|r| r * r).sum();
    Some(down / rvar)
}

/// Net move over path length, `(P_n - P_1) / sum |P_i - P_{i-1}|`.
pub fn trend_strength(prices: &[f64]) -> Option<f64> {
    if prices.len() < 2 {
        return None;
    }
    let path: f64 = prices.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    (path > 0.0).then(|| (prices[prices.len() - 1] - prices[0]) / path)
}

/// Price-weighted flow over the day.
///
/// ```text
/// sum_{j>=2} V_j C_j |C_j - C_{j-1}| / A
/// --------------------------------------
///      sum_{j>=2} |OI_j - OI_{j-1}| C_j
/// ```
///
/// with `A` the day's traded amount. Without an open-interest series the
/// denominator uses `|V_j - V_{j-1}|`; the second return value says
/// whether that substitution happened.
pub fn flow_in_ratio(
    volume: &[f64],
    close: &[f64],
    amount: f64,
    open_interest: Option<&[f64]>,
) -> Result<(Option<f64>, bool)> {
    if volume.len() != close.len() || open_interest.is_some_and(|oi| oi.len() != close.len()) {
        return Err(Error::InvalidArgument("flow_in_ratio: series lengths differ".into()));
    }
    let substituted = open_interest.is_none();
    let oi = open_interest.unwrap_or(volume);
    if close.len() < 2 || amount <= 0.0 {
        return Ok((None, substituted));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 1..close.len() {
        num += volume[j] * close[j] * (close[j] - close[j - 1]).abs();
        den += (oi[j] - oi[j - 1]).abs() * close[j];
    }
    let value = (den > 0.0).then(|| num / amount / den);
    Ok((value, substituted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub date: NaiveDate,
    pub stock_id: String,
    pub rvar: Option<f64>,
    pub rskew: Option<f64>,
    pub rkurt: Option<f64>,
    pub downside_beta: Option<f64>,
    pub flow_in_ratio: Option<f64>,
    pub trend_strength: Option<f64>,
    /// Volume deltas stood in for open interest.
    pub oi_substituted: bool,
}

pub const FACTOR_NAMES: [&str; 6] = [
    "rvar",
    "rskew",
    "rkurt",
    "downside_beta",
    "flow_in_ratio",
    "trend_strength",
];

impl FactorRow {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.rvar,
            self.rskew,
            self.rkurt,
            self.downside_beta,
            self.flow_in_ratio,
            self.trend_strength,
        ]
    }
}

/// Factors of every stock in `cs` from the last day of its panel.
pub fn compute_factors(cs: &CrossSection) -> Result<Vec<FactorRow>> {
    let schema = &cs.schema;
    let col = |name: &str| {
        schema
            .hf_index(name)
            .ok_or_else(|| Error::Data(format!("features: schema lacks hf field {name}")))
    };
    let (close_c, vol_c, vwap_c) = (col("close")?, col("volume")?, col("vwap")?);
    let oi_c = schema.hf_index("open_interest").or_else(|| schema.hf_index("oi"));
    let bpd = schema.bars_per_day;
    cs.panels
        .iter()
        .map(|p| {
            let rows = p.hf.rows();
            if rows < bpd || bpd == 0 {
                return Err(Error::Data(format!(
                    "features: {} has fewer than one day of bars",
                    p.stock_id
                )));
            }
            let day: Vec<&[f64]> = (rows - bpd..rows).map(|r| p.hf.row(r)).collect();
            let close: Vec<f64> = day.iter().map(|b| b[close_c]).collect();
            let volume: Vec<f64> = day.iter().map(|b| b[vol_c]).collect();
            let amount: f64 = day.iter().map(|b| b[vol_c] * b[vwap_c]).sum();
            let oi: Option<Vec<f64>> = oi_c.map(|c| day.iter().map(|b| b[c]).collect());
            let returns: Vec<f64> = close
                .windows(2)
                .filter(|w| w[0] > 0.0)
                .map(|w| w[1] / w[0] - 1.0)
                .collect();
            let (fir, substituted) = flow_in_ratio(&volume, &close, amount, oi.as_deref())?;
            Ok(FactorRow {
                date: cs.date,
                stock_id: p.stock_id.clone(),
                rvar: realized_variance(&returns).ok(),
                rskew: realized_skewness(&returns),
                rkurt: realized_kurtosis(&returns),
                downside_beta: downside_beta(&returns),
                flow_in_ratio: fir,
                trend_strength: trend_strength(&close),
                oi_substituted: substituted,
            })
        })
        .collect()
}

/// Appends the factors to each panel's low-frequency fields as
/// `factor_<name>`, with undefined values set to 0.
pub fn augment_lf(cs: &CrossSection) -> Result<CrossSection> {
    let rows = compute_factors(cs)?;
    let mut schema = FieldSchema::clone(&cs.schema);
    schema
        .lf
        .extend(FACTOR_NAMES.iter().map(|n| format!("factor_{n}")));
    let mut out = cs.clone();
    out.schema = Arc::new(schema);
    for (p, row) in out.panels.iter_mut().zip(&rows) {
        p.lf.extend(row.values().iter().map(|v| v.unwrap_or(0.0)));
    }
    out.validate()?;
    Ok(out)
}

/// Writes one row per stock and date; undefined values are empty.
pub fn write_factors_csv(path: &Path, rows: &[FactorRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date", "stock_id"];
    header.extend(FACTOR_NAMES);
    header.push("oi_substituted");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.date.to_string(), r.stock_id.clone()];
        rec.extend(r.values().iter().map(|v| fmt_opt(*v)));
        rec.push(r.oi_substituted.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        assert_eq!(realized_variance(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((realized_variance(&[0.01, -0.01]).unwrap() - 0.0002).abs() < 1e-18);
        assert!(realized_variance(&[]).is_err());
    }

    #[test]
    fn moment_examples() {
        assert_eq!(realized_skewness(&[0.02, -0.02]), Some(0.0));
        assert!((realized_skewness(&[0.03]).unwrap() - 1.0).abs() < 1e-12);
        assert!((realized_kurtosis(&[0.03]).unwrap() - 1.0).abs() < 1e-12);
        assert!((realized_kurtosis(&[0.03, 0.03]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(realized_skewness(&[0.0]), None);
        assert_eq!(realized_kurtosis(&[0.0, 0.0]), None);
    }

    #[test]
    fn downside_examples() {
        assert_eq!(downside_beta(&[-0.1, -0.2]), Some(1.0));
        assert_eq!(downside_beta(&[0.1, 0.2]), Some(0.0));
        assert_eq!(downside_beta(&[0.0]), None);
    }

    #[test]
    fn trend_examples() {
        assert_eq!(trend_strength(&[1.0, 2.0, 5.0]), Some(1.0));
        assert_eq!(trend_strength(&[1.0, 2.0, 1.0]), Some(0.0));
        assert!((trend_strength(&[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(trend_strength(&[2.0, 2.0]), None);
    }

    #[test]
    fn flow_in_ratio_substitution() {
        let (v, sub) = flow_in_ratio(&[10.0, 20.0], &[1.0, 2.0], 30.0, None).unwrap();
        // 20 * 2 * 1 / 30 over |20 - 10| * 2
        assert!((v.unwrap() - (40.0 / 30.0) / 20.0).abs() < 1e-15);
        assert!(sub);
        let (v, sub) = flow_in_ratio(&[10.0, 20.0], &[1.0, 2.0], 30.0, Some(&[5.0, 5.0])).unwrap();
        assert_eq!(v, None);
        assert!(!sub);
    }
}
