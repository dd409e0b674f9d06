//! Multi-frequency market data: panels, cross-sections, normalization,
//! tradability filtering, synthetic generation and CSV ingestion.

mod csv_io;
mod normalize;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use csv_io::{load_csv, load_market, write_csv};
pub use normalize::{
    apply_normalizer, apply_normalizer_all, fit_normalizer, DroppedField, FieldKind,
    NormalizationState,
};
pub use synthetic::{generate_synthetic_market, ReturnHorizon, SyntheticConfig, SyntheticMarket};

/// Default high-frequency bar fields, in column order.
pub const HF_FIELDS: [&str; 6] = ["open", "high", "low", "close", "volume", "vwap"];

/// Trading days of bars in one panel.
pub const LOOKBACK_DAYS: usize = 10;

/// Column layout shared by every panel of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub hf: Vec<String>,
    pub lf: Vec<String>,
    pub bars_per_day: usize,
}

impl FieldSchema {
    pub fn hf_index(&self, name: &str) -> Option<usize> {
        self.hf.iter().position(|f| f == name)
    }

    pub fn lf_index(&self, name: &str) -> Option<usize> {
        self.lf.iter().position(|f| f == name)
    }
}

/// A `rows x cols` window into a row-major bar matrix.
///
/// Panels of consecutive dates overlap by all but one day, so they share
/// the underlying series instead of copying it.
#[derive(Clone)]
pub struct HfWindow {
    series: Arc<Vec<f64>>,
    cols: usize,
    start_row: usize,
    rows: usize,
}

impl HfWindow {
    pub fn new(series: Arc<Vec<f64>>, cols: usize, start_row: usize, rows: usize) -> Result<Self> {
        if cols == 0 || rows == 0 || (start_row + rows) * cols > series.len() {
            return Err(Error::InvalidArgument(format!(
                "window rows {start_row}..{} x {cols} out of bounds for series of {}",
                start_row + rows,
                series.len()
            )));
        }
        Ok(Self {
            series,
            cols,
            start_row,
            rows,
        })
    }

    /// An owned window over a freshly allocated matrix.
    pub fn from_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "hf_window",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Self::new(Arc::new(data), cols, 0, rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.series[self.start_row * self.cols..(self.start_row + self.rows) * self.cols]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data()[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data().chunks_exact(self.cols).map(move |row| row[c])
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.rows, self.cols, self.data().to_vec())
    }

    pub(crate) fn series(&self) -> &Arc<Vec<f64>> {
        &self.series
    }

    pub(crate) fn start_row(&self) -> usize {
        self.start_row
    }

    pub(crate) fn with_series(&self, series: Arc<Vec<f64>>, cols: usize) -> Self {
        Self {
            series,
            cols,
            start_row: self.start_row,
            rows: self.rows,
        }
    }
}

impl PartialEq for HfWindow {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data() == other.data()
    }
}

impl fmt::Debug for HfWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HfWindow")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("start_row", &self.start_row)
            .finish()
    }
}

/// Raw inputs of one stock on one date.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiFreqPanel {
    pub stock_id: String,
    /// `T x a` bars, oldest first.
    pub hf: HfWindow,
    /// `b` daily fields.
    pub lf: Vec<f64>,
    pub as_of: NaiveDate,
}

impl MultiFreqPanel {
    /// Checks the raw-bar invariants: finite values, `high >= max(open,
    /// close) >= min(open, close) >= low` and non-negative volume.
    pub fn validate_raw(&self, schema: &FieldSchema) -> Result<()> {
        if self.hf.data().iter().chain(&self.lf).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite value", self.stock_id)));
        }
        let idx = |name| {
            schema
                .hf_index(name)
                .ok_or_else(|| Error::Data(format!("schema lacks hf field {name}")))
        };
        let (o, h, l, c, v) = (idx("open")?, idx("high")?, idx("low")?, idx("close")?, idx("volume")?);
        for r in 0..self.hf.rows() {
            let bar = self.hf.row(r);
            let (hi, lo) = (bar[o].max(bar[c]), bar[o].min(bar[c]));
            if bar[h] < hi || lo < bar[l] || bar[v] < 0.0 {
                return Err(Error::Data(format!(
                    "{} on {}: bar {r} violates price/volume bounds",
                    self.stock_id, self.as_of
                )));
            }
        }
        Ok(())
    }
}

/// One trading day's tradable universe with aligned forward returns.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSection {
    pub date: NaiveDate,
    pub schema: Arc<FieldSchema>,
    pub panels: Vec<MultiFreqPanel>,
    pub returns: Vec<f64>,
}

impl CrossSection {
    pub fn new(
        date: NaiveDate,
        schema: Arc<FieldSchema>,
        panels: Vec<MultiFreqPanel>,
        returns: Vec<f64>,
    ) -> Result<Self> {
        let cs = Self {
            date,
            schema,
            panels,
            returns,
        };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.panels.len() != self.returns.len() {
            return Err(Error::Data(format!(
                "{}: {} panels but {} returns",
                self.date,
                self.panels.len(),
                self.returns.len()
            )));
        }
        if self.panels.len() < 2 {
            return Err(Error::Data(format!(
                "{}: cross-section needs at least 2 stocks, has {}",
                self.date,
                self.panels.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.panels.len());
        for p in &self.panels {
            if !seen.insert(p.stock_id.as_str()) {
                return Err(Error::Data(format!(
                    "{}: duplicate stock id {}",
                    self.date, p.stock_id
                )));
            }
            if p.hf.cols() != self.schema.hf.len() || p.lf.len() != self.schema.lf.len() {
                return Err(Error::Data(format!(
                    "{}: panel {} does not match the field schema",
                    self.date, p.stock_id
                )));
            }
        }
        if self.returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite forward return", self.date)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn stock_ids(&self) -> Vec<String> {
        self.panels.iter().map(|p| p.stock_id.clone()).collect()
    }

    /// The sub-cross-section made of `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let panels = indices.iter().map(|&i| self.panels[i].clone()).collect();
        let returns = indices.iter().map(|&i| self.returns[i]).collect();
        Self::new(self.date, self.schema.clone(), panels, returns)
    }
}

/// Removes stocks without any traded volume over their panel window.
pub fn filter_tradable(cs: &CrossSection) -> Result<CrossSection> {
    let vol = cs
        .schema
        .hf_index("volume")
        .ok_or_else(|| Error::Data("schema lacks a volume field".into()))?;
    let keep: Vec<usize> = cs
        .panels
        .iter()
        .enumerate()
        .filter(|(_, p)| p.hf.column(vol).sum::<f64>() > 0.0)
        .map(|(i, _)| i)
        .collect();
    if keep.len() < 2 {
        return Err(Error::Data(format!(
            "{}: only {} tradable stocks remain",
            cs.date,
            keep.len()
        )));
    }
    cs.select(&keep)
}

/// Per-stock history over the full calendar of a [`MarketData`].
#[derive(Clone, Debug, PartialEq)]
pub struct StockHistory {
    pub stock_id: String,
    /// `(dates * bars_per_day) x a`, row-major.
    pub bars: Arc<Vec<f64>>,
    /// Daily low-frequency fields, one vector per date.
    pub lf: Vec<Vec<f64>>,
    /// Forward return attributed to each date, when known.
    pub forward_returns: Vec<Option<f64>>,
}

/// Opening auction proxy for execution: the first bar of a day.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpenBar {
    pub open: f64,
    pub volume: f64,
}

/// A complete dataset on a common calendar and bar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketData {
    pub schema: Arc<FieldSchema>,
    pub dates: Vec<NaiveDate>,
    pub bar_times: Vec<NaiveTime>,
    pub lookback_days: usize,
    pub stocks: Vec<StockHistory>,
}

impl MarketData {
    pub fn bars_per_day(&self) -> usize {
        self.schema.bars_per_day
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Panels for `date_idx` of every stock with a known forward return.
    pub fn cross_section_at(&self, date_idx: usize) -> Result<Option<CrossSection>> {
        if date_idx + 1 < self.lookback_days || date_idx >= self.dates.len() {
            return Ok(None);
        }
        let bpd = self.bars_per_day();
        let a = self.schema.hf.len();
        let start_row = (date_idx + 1 - self.lookback_days) * bpd;
        let rows = self.lookback_days * bpd;
        let date = self.dates[date_idx];
        let mut panels = Vec::new();
        let mut returns = Vec::new();
        for s in &self.stocks {
            let Some(ret) = s.forward_returns[date_idx] else { continue };
            panels.push(MultiFreqPanel {
                stock_id: s.stock_id.clone(),
                hf: HfWindow::new(s.bars.clone(), a, start_row, rows)?,
                lf: s.lf[date_idx].clone(),
                as_of: date,
            });
            returns.push(ret);
        }
        if panels.len() < 2 {
            return Ok(None);
        }
        CrossSection::new(date, self.schema.clone(), panels, returns).map(Some)
    }

    /// Every date with a full lookback window and at least two known
    /// forward returns, in calendar order.
    pub fn cross_sections(&self) -> Result<Vec<CrossSection>> {
        let mut out = Vec::new();
        for d in 0..self.dates.len() {
            if let Some(cs) = self.cross_section_at(d)? {
                out.push(cs);
            }
        }
        Ok(out)
    }

    /// First bar of `date_idx` for every stock.
    pub fn open_bars(&self, date_idx: usize) -> Vec<(String, OpenBar)> {
        let a = self.schema.hf.len();
        let row = date_idx * self.bars_per_day();
        let (o, v) = (
            self.schema.hf_index("open").unwrap_or(0),
            self.schema.hf_index("volume").unwrap_or(4),
        );
        self.stocks
            .iter()
            .map(|s| {
                let bar = &s.bars[row * a..(row + 1) * a];
                (
                    s.stock_id.clone(),
                    OpenBar {
                        open: bar[o],
                        volume: bar[v],
                    },
                )
            })
            .collect()
    }
}
