use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CrossSection, FieldSchema, HfWindow, MultiFreqPanel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    HighFrequency,
    LowFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedField {
    pub kind: FieldKind,
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics fitted on a training window.
///
/// High-frequency fields are standardized per stock with the sample (n-1)
/// standard deviation; low-frequency fields are min-max scaled with global
/// per-field bounds and clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub input_schema: FieldSchema,
    pub hf_keep: Vec<usize>,
    pub lf_keep: Vec<usize>,
    /// Per stock, one entry per retained hf field.
    pub hf_stats: BTreeMap<String, Vec<FieldStats>>,
    pub lf_min: Vec<f64>,
    pub lf_max: Vec<f64>,
    pub dropped: Vec<DroppedField>,
    /// `stock:field` pairs that were constant for that stock; they are
    /// centered but not rescaled.
    pub degenerate: Vec<String>,
    pub fitted_on: (NaiveDate, NaiveDate),
}

impl NormalizationState {
    pub fn output_schema(&self) -> FieldSchema {
        FieldSchema {
            hf: self.hf_keep.iter().map(|&i| self.input_schema.hf[i].clone()).collect(),
            lf: self.lf_keep.iter().map(|&i| self.input_schema.lf[i].clone()).collect(),
            bars_per_day: self.input_schema.bars_per_day,
        }
    }
}

/// Distinct bar rows of each stock across overlapping panel windows.
fn unique_rows<'a>(train: &'a [CrossSection]) -> BTreeMap<&'a str, Vec<(&'a Arc<Vec<f64>>, Vec<(usize, usize)>)>> {
    let mut by_stock: BTreeMap<&str, HashMap<usize, (&Arc<Vec<f64>>, Vec<(usize, usize)>)>> =
        BTreeMap::new();
    for cs in train {
        for p in &cs.panels {
            let key = Arc::as_ptr(p.hf.series()) as usize;
            let entry = by_stock
                .entry(p.stock_id.as_str())
                .or_default()
                .entry(key)
                .or_insert_with(|| (p.hf.series(), Vec::new()));
            entry.1.push((p.hf.start_row(), p.hf.start_row() + p.hf.rows()));
        }
    }
    by_stock
        .into_iter()
        .map(|(stock, series)| {
            let mut merged: Vec<_> = series
                .into_values()
                .map(|(arc, mut ranges)| {
                    ranges.sort_unstable();
                    let mut out: Vec<(usize, usize)> = Vec::new();
                    for (s, e) in ranges {
                        match out.last_mut() {
                            Some(last) if s <= last.1 => last.1 = last.1.max(e),
                            _ => out.push((s, e)),
                        }
                    }
                    (arc, out)
                })
                .collect();
            merged.sort_by_key(|(arc, _)| Arc::as_ptr(arc) as usize);
            (stock, merged)
        })
        .collect()
}

pub fn fit_normalizer(train: &[CrossSection]) -> Result<NormalizationState> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("fit_normalizer: empty training set".into()))?;
    let schema = first.schema.as_ref().clone();
    if train.iter().any(|cs| *cs.schema != schema) {
        return Err(Error::Data("fit_normalizer: cross-sections disagree on fields".into()));
    }
    let a = schema.hf.len();
    let b = schema.lf.len();
    let rows_by_stock = unique_rows(train);

    // Per stock, per field: (count, mean, sum of squared deviations).
    let mut per_stock: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    let mut global_min = vec![f64::INFINITY; a];
    let mut global_max = vec![f64::NEG_INFINITY; a];
    for (stock, series) in &rows_by_stock {
        let rows = || {
            series.iter().flat_map(|(arc, ranges)| {
                ranges
                    .iter()
                    .flat_map(move |&(s, e)| (s..e).map(move |r| &arc[r * a..(r + 1) * a]))
            })
        };
        let mut count = 0.0;
        let mut sums = vec![0.0; a];
        for row in rows() {
            count += 1.0;
            for (c, &v) in row.iter().enumerate() {
                sums[c] += v;
                global_min[c] = global_min[c].min(v);
                global_max[c] = global_max[c].max(v);
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let mut ss = vec![0.0; a];
        for row in rows() {
            for (c, &v) in row.iter().enumerate() {
                ss[c] += (v - means[c]) * (v - means[c]);
            }
        }
        per_stock.insert(
            stock.to_string(),
            (0..a).map(|c| (count, means[c], ss[c])).collect(),
        );
    }

    let mut dropped = Vec::new();
    let mut hf_keep = Vec::new();
    for c in 0..a {
        if global_min[c] < global_max[c] {
            hf_keep.push(c);
        } else {
            log::warn!("dropping constant high-frequency field {}", schema.hf[c]);
            dropped.push(DroppedField {
                kind: FieldKind::HighFrequency,
                name: schema.hf[c].clone(),
                reason: "constant across the training window".into(),
            });
        }
    }
    if hf_keep.is_empty() {
        return Err(Error::Data("every high-frequency field is constant".into()));
    }

    let mut degenerate = Vec::new();
    let hf_stats = per_stock
        .into_iter()
        .map(|(stock, fields)| {
            let stats = hf_keep
                .iter()
                .map(|&c| {
                    let (n, mean, ss) = fields[c];
                    let std = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
                    if std > 0.0 {
                        FieldStats { mean, std }
                    } else {
                        degenerate.push(format!("{stock}:{}", schema.hf[c]));
                        FieldStats { mean, std: 1.0 }
                    }
                })
                .collect();
            (stock, stats)
        })
        .collect();

    let mut lf_min = vec![f64::INFINITY; b];
    let mut lf_max = vec![f64::NEG_INFINITY; b];
    for p in train.iter().flat_map(|cs| &cs.panels) {
        for (j, &v) in p.lf.iter().enumerate() {
            lf_min[j] = lf_min[j].min(v);
            lf_max[j] = lf_max[j].max(v);
        }
    }
    let mut lf_keep = Vec::new();
    for j in 0..b {
        if lf_min[j] < lf_max[j] {
            lf_keep.push(j);
        } else {
            log::warn!("dropping constant low-frequency field {}", schema.lf[j]);
            dropped.push(DroppedField {
                kind: FieldKind::LowFrequency,
                name: schema.lf[j].clone(),
                reason: "constant across the training window".into(),
            });
        }
    }

    let dates = train.iter().map(|cs| cs.date);
    let fitted_on = (
        dates.clone().min().expect("non-empty"),
        dates.max().expect("non-empty"),
    );
    Ok(NormalizationState {
        lf_min: lf_keep.iter().map(|&j| lf_min[j]).collect(),
        lf_max: lf_keep.iter().map(|&j| lf_max[j]).collect(),
        input_schema: schema,
        hf_keep,
        lf_keep,
        hf_stats,
        dropped,
        degenerate,
        fitted_on,
    })
}

fn check_schema(state: &NormalizationState, schema: &FieldSchema) -> Result<()> {
    let expected = &state.input_schema;
    for name in schema.hf.iter() {
        if !expected.hf.contains(name) {
            return Err(Error::Data(format!("unknown high-frequency field {name}")));
        }
    }
    for name in schema.lf.iter() {
        if !expected.lf.contains(name) {
            return Err(Error::Data(format!("unknown low-frequency field {name}")));
        }
    }
    if schema != expected {
        return Err(Error::Data(
            "field layout differs from the one the normalizer was fitted on".into(),
        ));
    }
    Ok(())
}

fn standardize(rows: &[f64], a: usize, keep: &[usize], stats: &[FieldStats]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() / a * keep.len());
    for row in rows.chunks_exact(a) {
        for (&c, st) in keep.iter().zip(stats) {
            out.push((row[c] - st.mean) / st.std);
        }
    }
    out
}

fn window_stats(p: &MultiFreqPanel, keep: &[usize]) -> Vec<FieldStats> {
    keep.iter()
        .map(|&c| {
            let vals: Vec<f64> = p.hf.column(c).collect();
            let mean = crate::metrics::mean(&vals);
            let std = crate::metrics::sample_std(&vals);
            FieldStats {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            }
        })
        .collect()
}

/// Normalizes a batch of cross-sections, transforming each shared bar
/// series once.
///
/// Stocks absent from the training window are standardized with the
/// statistics of their own panel window.
pub fn apply_normalizer_all(
    state: &NormalizationState,
    sections: &[CrossSection],
) -> Result<Vec<CrossSection>> {
    let out_schema = Arc::new(state.output_schema());
    let a = state.input_schema.hf.len();
    let kept = state.hf_keep.len();
    let mut cache: HashMap<(usize, String), Arc<Vec<f64>>> = HashMap::new();
    let mut out = Vec::with_capacity(sections.len());
    for cs in sections {
        check_schema(state, &cs.schema)?;
        let mut panels = Vec::with_capacity(cs.panels.len());
        for p in &cs.panels {
            let hf = match state.hf_stats.get(&p.stock_id) {
                Some(stats) => {
                    let key = (Arc::as_ptr(p.hf.series()) as usize, p.stock_id.clone());
                    let series = cache
                        .entry(key)
                        .or_insert_with(|| {
                            Arc::new(standardize(p.hf.series(), a, &state.hf_keep, stats))
                        })
                        .clone();
                    p.hf.with_series(series, kept)
                }
                None => {
                    log::debug!("{}: no training statistics, using window statistics", p.stock_id);
                    let stats = window_stats(p, &state.hf_keep);
                    let data = standardize(p.hf.data(), a, &state.hf_keep, &stats);
                    HfWindow::from_matrix(p.hf.rows(), kept, data)?
                }
            };
            let lf = state
                .lf_keep
                .iter()
                .enumerate()
                .map(|(k, &j)| {
                    let (lo, hi) = (state.lf_min[k], state.lf_max[k]);
                    ((p.lf[j] - lo) / (hi - lo)).clamp(0.0, 1.0)
                })
                .collect();
            panels.push(MultiFreqPanel {
                stock_id: p.stock_id.clone(),
                hf,
                lf,
                as_of: p.as_of,
            });
        }
        out.push(CrossSection::new(cs.date, out_schema.clone(), panels, cs.returns.clone())?);
    }
    Ok(out)
}

pub fn apply_normalizer(state: &NormalizationState, cs: &CrossSection) -> Result<CrossSection> {
    Ok(apply_normalizer_all(state, std::slice::from_ref(cs))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn panel_with_close(id: &str, closes: &[f64], lf: Vec<f64>) -> MultiFreqPanel {
        let mut data = Vec::new();
        for (i, &c) in closes.iter().enumerate() {
            data.extend([c, c + 1.0, c - 1.0, c, 100.0 + i as f64, c]);
        }
        MultiFreqPanel {
            stock_id: id.into(),
            hf: HfWindow::from_matrix(closes.len(), 6, data).unwrap(),
            lf,
            as_of: date(2),
        }
    }

    fn train_set() -> Vec<CrossSection> {
        vec![
            CrossSection::new(
                date(2),
                schema(2),
                vec![
                    panel_with_close("A", &[1.0, 2.0, 3.0], vec![5.0, 7.0]),
                    panel_with_close("B", &[10.0, 20.0, 60.0], vec![15.0, 7.0]),
                ],
                vec![0.0, 0.1],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn fits_sample_std_and_minmax() {
        let state = fit_normalizer(&train_set()).unwrap();
        let close = state.output_schema().hf_index("close").unwrap();
        let st = state.hf_stats["A"][close];
        assert_eq!(st.mean, 2.0);
        assert_eq!(st.std, 1.0);
        assert_eq!(state.lf_min, vec![5.0]);
        assert_eq!(state.lf_max, vec![15.0]);
        // second lf field is constant
        assert_eq!(state.output_schema().lf, vec!["f0"]);
        assert_eq!(state.dropped.len(), 1);
    }

    #[test]
    fn applies_minmax_with_clamp() {
        let train = train_set();
        let state = fit_normalizer(&train).unwrap();
        let mut cs = train[0].clone();
        cs.panels[0].lf = vec![10.0, 7.0];
        cs.panels[1].lf = vec![25.0, 7.0];
        let out = apply_normalizer(&state, &cs).unwrap();
        assert_eq!(out.panels[0].lf, vec![0.5]);
        assert_eq!(out.panels[1].lf, vec![1.0]);
        let out = apply_normalizer(&state, &train[0]).unwrap();
        assert_eq!(out.panels[0].lf, vec![0.0]);
    }

    #[test]
    fn standardized_training_window_has_unit_moments() {
        let train = train_set();
        let state = fit_normalizer(&train).unwrap();
        let out = apply_normalizer(&state, &train[0]).unwrap();
        for p in &out.panels {
            for c in 0..p.hf.cols() {
                let v: Vec<f64> = p.hf.column(c).collect();
                assert!(crate::metrics::mean(&v).abs() < 1e-9);
                assert!((crate::metrics::sample_std(&v) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let train = train_set();
        let state = fit_normalizer(&train).unwrap();
        let mut cs = train[0].clone();
        let mut s = (*cs.schema).clone();
        s.lf[1] = "mystery".into();
        cs.schema = Arc::new(s);
        assert!(apply_normalizer(&state, &cs).is_err());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(fit_normalizer(&[]).is_err());
    }
}
