//! Directory-of-CSV storage.
//!
//! ```text
//! hf/<date>/<stock_id>.csv   timestamp,open,high,low,close,volume,vwap[,extra...]
//! lf/<date>.csv              stock_id,<field>,...
//! returns/<date>.csv         stock_id,forward_return
//! ```
//!
//! Loading aligns everything to the union of dates, stocks and bar times.
//! A missing bar repeats the previous close in every price column with zero
//! volume (zeros before a stock's first bar), and a missing fundamental row
//! repeats the stock's previous row.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};

use super::{CrossSection, FieldSchema, MarketData, StockHistory, HF_FIELDS, LOOKBACK_DAYS};
use crate::error::{Error, Result};

const PRICE_FIELDS: [&str; 5] = ["open", "high", "low", "close", "vwap"];

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn flush<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `data` under `dir`. Forward returns are only written for dates
/// where they are known.
pub fn write_csv(data: &MarketData, dir: &Path) -> Result<()> {
    let bpd = data.bars_per_day();
    let a = data.schema.hf.len();
    for (d, date) in data.dates.iter().enumerate() {
        let day_dir = dir.join("hf").join(date.to_string());
        create_dir(&day_dir)?;
        for s in &data.stocks {
            let path = day_dir.join(format!("{}.csv", s.stock_id));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["timestamp".to_string()];
            header.extend(data.schema.hf.iter().cloned());
            w.write_record(&header)?;
            for (b, time) in data.bar_times.iter().enumerate() {
                let row = (d * bpd + b) * a;
                let mut rec = vec![date.and_time(*time).format("%Y-%m-%dT%H:%M:%S").to_string()];
                rec.extend(s.bars[row..row + a].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            flush(w, &path)?;
        }
    }

    let lf_dir = dir.join("lf");
    create_dir(&lf_dir)?;
    let ret_dir = dir.join("returns");
    create_dir(&ret_dir)?;
    for (d, date) in data.dates.iter().enumerate() {
        let path = lf_dir.join(format!("{date}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["stock_id".to_string()];
        header.extend(data.schema.lf.iter().cloned());
        w.write_record(&header)?;
        for s in &data.stocks {
            let mut rec = vec![s.stock_id.clone()];
            rec.extend(s.lf[d].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        flush(w, &path)?;

        if data.stocks.iter().all(|s| s.forward_returns[d].is_none()) {
            continue;
        }
        let path = ret_dir.join(format!("{date}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["stock_id", "forward_return"])?;
        for s in &data.stocks {
            if let Some(r) = s.forward_returns[d] {
                w.write_record([s.stock_id.clone(), r.to_string()])?;
            }
        }
        flush(w, &path)?;
    }
    Ok(())
}

/// Loads `dir` and returns every cross-section with a full default
/// lookback window.
pub fn load_csv(dir: &Path) -> Result<Vec<CrossSection>> {
    load_market(dir, LOOKBACK_DAYS)?.cross_sections()
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line_of(rec), format!("bad value {raw:?} in column {name}")))
}

fn parse_date_stem(path: &Path) -> Result<NaiveDate> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| parse_err(path, 0, "unreadable file name"))?;
    NaiveDate::parse_from_str(stem, "%Y-%m-%d")
        .map_err(|_| parse_err(path, 0, format!("{stem:?} is not an ISO date")))
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(entry.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn headers(path: &Path, reader: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    Ok(reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect())
}

fn records(
    path: &Path,
    reader: &mut csv::Reader<fs::File>,
) -> Result<Vec<csv::StringRecord>> {
    reader
        .records()
        .map(|r| {
            r.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                parse_err(path, line, e.to_string())
            })
        })
        .collect()
}

type DayBars = BTreeMap<NaiveTime, Vec<f64>>;

struct HfFile {
    date: NaiveDate,
    stock: String,
    bars: DayBars,
}

fn read_hf_file(path: &Path, date: NaiveDate, hf_fields: &mut Option<Vec<String>>) -> Result<HfFile> {
    let stock = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| parse_err(path, 0, "unreadable file name"))?
        .to_string();
    let mut reader = open_reader(path)?;
    let header = headers(path, &mut reader)?;
    if header.first().map(String::as_str) != Some("timestamp") {
        return Err(parse_err(path, 1, "first column must be timestamp"));
    }
    let fields = hf_fields.get_or_insert_with(|| header[1..].to_vec());
    for required in HF_FIELDS {
        if !fields.iter().any(|f| f == required) {
            return Err(parse_err(path, 1, format!("missing column {required}")));
        }
    }
    let cols: Vec<usize> = fields
        .iter()
        .map(|f| {
            header
                .iter()
                .position(|h| h == f)
                .ok_or_else(|| parse_err(path, 1, format!("missing column {f}")))
        })
        .collect::<Result<_>>()?;

    let mut bars = DayBars::new();
    for rec in records(path, &mut reader)? {
        let raw = rec.get(0).unwrap_or("").trim();
        let ts = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
            .map_err(|_| parse_err(path, line_of(&rec), format!("bad timestamp {raw:?}")))?;
        if ts.date() != date {
            return Err(parse_err(
                path,
                line_of(&rec),
                format!("timestamp {raw} is not on {date}"),
            ));
        }
        let values = cols
            .iter()
            .zip(fields.iter())
            .map(|(&c, name)| parse_f64(path, &rec, c, name))
            .collect::<Result<Vec<_>>>()?;
        if bars.insert(ts.time(), values).is_some() {
            return Err(parse_err(path, line_of(&rec), format!("duplicate timestamp {raw}")));
        }
    }
    Ok(HfFile { date, stock, bars })
}

type KeyedRows = BTreeMap<NaiveDate, HashMap<String, Vec<f64>>>;

fn read_keyed(
    path: &Path,
    expected: Option<&[String]>,
) -> Result<(Vec<String>, HashMap<String, Vec<f64>>)> {
    let mut reader = open_reader(path)?;
    let header = headers(path, &mut reader)?;
    if header.first().map(String::as_str) != Some("stock_id") {
        return Err(parse_err(path, 1, "first column must be stock_id"));
    }
    let fields = header[1..].to_vec();
    if let Some(exp) = expected {
        if exp != fields.as_slice() {
            return Err(parse_err(path, 1, "columns differ from other files"));
        }
    }
    let mut rows = HashMap::new();
    for rec in records(path, &mut reader)? {
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(parse_err(path, line_of(&rec), "empty stock_id"));
        }
        let values = (1..header.len())
            .map(|c| parse_f64(path, &rec, c, &header[c]))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(id.clone(), values).is_some() {
            return Err(parse_err(path, line_of(&rec), format!("duplicate stock {id}")));
        }
    }
    Ok((fields, rows))
}

/// Loads `dir` into a dataset whose panels span `lookback_days` days.
pub fn load_market(dir: &Path, lookback_days: usize) -> Result<MarketData> {
    if lookback_days == 0 {
        return Err(Error::InvalidArgument("lookback_days must be positive".into()));
    }
    let mut hf_fields = None;
    let mut hf_files = Vec::new();
    for day_dir in list_dir(&dir.join("hf"))? {
        let date = parse_date_stem(&day_dir)?;
        for path in list_dir(&day_dir)? {
            if path.extension().and_then(|e| e.to_str()) == Some("csv") {
                hf_files.push(read_hf_file(&path, date, &mut hf_fields)?);
            }
        }
    }
    let hf_fields =
        hf_fields.ok_or_else(|| Error::Data(format!("{}: no bar files found", dir.display())))?;

    let mut lf_fields: Option<Vec<String>> = None;
    let mut lf_rows = KeyedRows::new();
    for path in list_dir(&dir.join("lf"))? {
        let date = parse_date_stem(&path)?;
        let (fields, rows) = read_keyed(&path, lf_fields.as_deref())?;
        lf_fields.get_or_insert(fields);
        lf_rows.insert(date, rows);
    }
    let lf_fields = lf_fields.unwrap_or_default();

    let ret_field = ["forward_return".to_string()];
    let mut returns = KeyedRows::new();
    for path in list_dir(&dir.join("returns"))? {
        let date = parse_date_stem(&path)?;
        returns.insert(date, read_keyed(&path, Some(&ret_field))?.1);
    }

    let mut dates = BTreeSet::new();
    let mut stocks = BTreeSet::new();
    let mut times = BTreeSet::new();
    for f in &hf_files {
        dates.insert(f.date);
        stocks.insert(f.stock.clone());
        times.extend(f.bars.keys().copied());
    }
    for (date, rows) in lf_rows.iter().chain(&returns) {
        dates.insert(*date);
        stocks.extend(rows.keys().cloned());
    }
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let bar_times: Vec<NaiveTime> = times.into_iter().collect();
    let date_pos: HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let mut by_stock: HashMap<String, Vec<Option<DayBars>>> = HashMap::new();
    for f in hf_files {
        by_stock
            .entry(f.stock)
            .or_insert_with(|| vec![None; dates.len()])[date_pos[&f.date]] = Some(f.bars);
    }

    let a = hf_fields.len();
    let is_price: Vec<bool> = hf_fields
        .iter()
        .map(|f| PRICE_FIELDS.contains(&f.as_str()))
        .collect();
    let vol = hf_fields.iter().position(|f| f == "volume").expect("checked");
    let close = hf_fields.iter().position(|f| f == "close").expect("checked");

    let mut histories = Vec::with_capacity(stocks.len());
    for id in stocks {
        let days = by_stock.remove(&id).unwrap_or_else(|| vec![None; dates.len()]);
        let mut bars = Vec::with_capacity(dates.len() * bar_times.len() * a);
        let mut last: Vec<f64> = vec![0.0; a];
        for day in &days {
            for t in &bar_times {
                match day.as_ref().and_then(|b| b.get(t)) {
                    Some(values) => {
                        last.clone_from(values);
                        bars.extend_from_slice(values);
                    }
                    None => {
                        let carried: Vec<f64> = (0..a)
                            .map(|c| match c {
                                c if c == vol => 0.0,
                                c if is_price[c] => last[close],
                                c => last[c],
                            })
                            .collect();
                        bars.extend_from_slice(&carried);
                    }
                }
            }
        }

        let mut lf = Vec::with_capacity(dates.len());
        let mut prev = vec![0.0; lf_fields.len()];
        for date in &dates {
            if let Some(row) = lf_rows.get(date).and_then(|r| r.get(&id)) {
                prev.clone_from(row);
            }
            lf.push(prev.clone());
        }
        let forward_returns = dates
            .iter()
            .map(|d| returns.get(d).and_then(|r| r.get(&id)).map(|v| v[0]))
            .collect();
        histories.push(StockHistory {
            stock_id: id,
            bars: Arc::new(bars),
            lf,
            forward_returns,
        });
    }

    Ok(MarketData {
        schema: Arc::new(FieldSchema {
            hf: hf_fields,
            lf: lf_fields,
            bars_per_day: bar_times.len(),
        }),
        dates,
        bar_times,
        lookback_days,
        stocks: histories,
    })
}
