//! Synthetic multi-frequency markets with planted, recoverable signal.
//!
//! Each stock carries persistent latent features. Some are published as
//! daily fundamental fields; one more drives the stock's daily volume
//! level and is recoverable as the standardized mean volume multiplier
//! over the panel window. The forward return of each date is a linear
//! (hence monotone) function of the combined latent score plus Gaussian
//! noise, written into the price path so that realized prices reproduce it.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, NaiveTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CrossSection, FieldSchema, MarketData, StockHistory, HF_FIELDS};
use crate::error::{Error, Result};

/// Which realized return a cross-section date is labelled with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnHorizon {
    /// Open of day T+1 to open of day T+2: the holding period of a
    /// portfolio formed at the close of T and traded at the next open.
    #[default]
    NextOpenToOpen,
    /// Close of day T to close of day T+1.
    CloseToNextClose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub stocks: usize,
    /// Number of labelled cross-section dates.
    pub days: usize,
    pub bar_minutes: u32,
    pub lookback_days: usize,
    pub start_date: NaiveDate,
    /// Latent features published as fundamental fields.
    pub lf_signal_fields: usize,
    /// Fundamental fields unrelated to returns.
    pub lf_noise_fields: usize,
    /// Whether one latent feature drives daily volume levels.
    pub volume_signal: bool,
    /// Weights of the latent features, lf signals first; empty means equal.
    pub signal_weights: Vec<f64>,
    /// Noise-to-signal ratio of forward returns; 0 makes returns an exact
    /// monotone function of the latent score.
    pub noise: f64,
    pub daily_vol: f64,
    /// Day-to-day autocorrelation of the fundamental latents.
    pub persistence: f64,
    /// Log-volume response to the daily volume shock.
    pub volume_sensitivity: f64,
    /// Fraction of stocks that never trade.
    pub halted_fraction: f64,
    pub return_horizon: ReturnHorizon,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            stocks: 200,
            days: 120,
            bar_minutes: 30,
            lookback_days: super::LOOKBACK_DAYS,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 2).expect("valid date"),
            lf_signal_fields: 2,
            lf_noise_fields: 2,
            volume_signal: true,
            signal_weights: Vec::new(),
            noise: 1.65,
            daily_vol: 0.02,
            persistence: 0.9,
            volume_sensitivity: 0.5,
            halted_fraction: 0.0,
            return_horizon: ReturnHorizon::NextOpenToOpen,
        }
    }
}

const SESSION_MINUTES: u32 = 390;

impl SyntheticConfig {
    pub fn latent_count(&self) -> usize {
        self.lf_signal_fields + usize::from(self.volume_signal)
    }

    pub fn bars_per_day(&self) -> usize {
        (SESSION_MINUTES / self.bar_minutes) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic market: {m}")));
        if self.stocks < 2 {
            return fail("need at least 2 stocks");
        }
        if self.days == 0 || self.lookback_days == 0 {
            return fail("days and lookback_days must be positive");
        }
        if self.bar_minutes == 0 || SESSION_MINUTES % self.bar_minutes != 0 {
            return fail("bar_minutes must divide the 390-minute session");
        }
        if self.latent_count() == 0 {
            return fail("at least one latent feature is required");
        }
        if !self.signal_weights.is_empty() && self.signal_weights.len() != self.latent_count() {
            return fail("signal_weights must have one entry per latent feature");
        }
        if !self.signal_weights.is_empty() && self.signal_weights.iter().all(|w| *w == 0.0) {
            return fail("signal_weights are all zero");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be a finite non-negative number");
        }
        if !(self.daily_vol > 0.0 && self.daily_vol <= 0.2) {
            return fail("daily_vol must be in (0, 0.2]");
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return fail("persistence must be in [0, 1)");
        }
        if self.volume_signal && !(self.volume_sensitivity > 0.0 && self.volume_sensitivity < 3.0) {
            return fail("volume_sensitivity must be in (0, 3)");
        }
        if !(0.0..1.0).contains(&self.halted_fraction) {
            return fail("halted_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// A generated dataset plus the planted ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticMarket {
    pub config: SyntheticConfig,
    pub data: MarketData,
    /// `latent[stock][date]`, defined on labelled dates only.
    pub latent: Vec<Vec<Option<f64>>>,
    index: HashMap<String, usize>,
}

impl SyntheticMarket {
    pub fn cross_sections(&self) -> Result<Vec<CrossSection>> {
        self.data.cross_sections()
    }

    /// Ground-truth latent scores aligned with the panels of `cs`.
    pub fn latent_for(&self, cs: &CrossSection) -> Result<Vec<f64>> {
        let d = self
            .data
            .date_index(cs.date)
            .ok_or_else(|| Error::Data(format!("{} is not in the generated calendar", cs.date)))?;
        cs.panels
            .iter()
            .map(|p| {
                self.index
                    .get(&p.stock_id)
                    .and_then(|&i| self.latent[i][d])
                    .ok_or_else(|| Error::Data(format!("no latent score for {}", p.stock_id)))
            })
            .collect()
    }
}

fn trading_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct StockPlan {
    halted: bool,
    price0: f64,
    volume_level: f64,
    /// `[feature][day]`
    lf_values: Vec<Vec<f64>>,
    volume_shock: Vec<f64>,
}

pub fn generate_synthetic_market(config: &SyntheticConfig, seed: u64) -> Result<SyntheticMarket> {
    config.validate()?;
    let bpd = config.bars_per_day();
    let lookback = config.lookback_days;
    let total_days = lookback + config.days + 1;
    let first_label = lookback - 1;
    let labelled = first_label..first_label + config.days;
    let dates = trading_calendar(config.start_date, total_days);
    let open_time = NaiveTime::from_hms_opt(9, 30, 0).expect("valid time");
    let bar_times = (0..bpd)
        .map(|b| open_time + Duration::minutes(i64::from(config.bar_minutes) * b as i64))
        .collect();

    let n_lf = config.lf_signal_fields + config.lf_noise_fields;
    let schema = Arc::new(FieldSchema {
        hf: HF_FIELDS.iter().map(|s| s.to_string()).collect(),
        lf: (0..n_lf).map(|j| format!("fundamental_{j}")).collect(),
        bars_per_day: bpd,
    });

    let weights: Vec<f64> = if config.signal_weights.is_empty() {
        vec![1.0; config.latent_count()]
    } else {
        config.signal_weights.clone()
    };
    let weight_norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let halted_count = (config.halted_fraction * config.stocks as f64).floor() as usize;
    let halted: Vec<usize> =
        rand::seq::index::sample(&mut master, config.stocks, halted_count).into_vec();

    let gamma = config.volume_sensitivity;
    // Moments of exp(gamma * u), u ~ N(0, 1).
    let shock_mean = (gamma * gamma / 2.0).exp();
    let shock_sd = (((gamma * gamma).exp() - 1.0) * (gamma * gamma).exp()).sqrt();
    let ar_innovation = (1.0 - config.persistence * config.persistence).sqrt();
    let noise_scale = (1.0 + config.noise * config.noise).sqrt();
    let bar_sigma = config.daily_vol / (bpd as f64).sqrt();

    let mut stocks = Vec::with_capacity(config.stocks);
    let mut latent = Vec::with_capacity(config.stocks);
    for i in 0..config.stocks {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let mut lf_values = Vec::with_capacity(n_lf);
        for _ in 0..n_lf {
            let mut z = normal(&mut rng);
            let mut path = Vec::with_capacity(total_days);
            for _ in 0..total_days {
                path.push(z);
                z = config.persistence * z + ar_innovation * normal(&mut rng);
            }
            lf_values.push(path);
        }
        let plan = StockPlan {
            halted: halted.contains(&i),
            price0: (50f64.ln() + 0.5 * normal(&mut rng)).exp(),
            volume_level: (2.0e5f64.ln() + 0.7 * normal(&mut rng)).exp() / bpd as f64,
            volume_shock: (0..total_days).map(|_| normal(&mut rng)).collect(),
            lf_values,
        };

        let mut scores = vec![None; total_days];
        let mut targets = vec![None; total_days];
        for d in labelled.clone() {
            let mut s = 0.0;
            for j in 0..config.lf_signal_fields {
                s += weights[j] * plan.lf_values[j][d];
            }
            if config.volume_signal {
                let window = &plan.volume_shock[d + 1 - lookback..=d];
                let avg = window.iter().map(|u| (gamma * u).exp()).sum::<f64>() / lookback as f64;
                let h = (avg - shock_mean) / (shock_sd / (lookback as f64).sqrt());
                s += weights[config.lf_signal_fields] * h;
            }
            s /= weight_norm;
            scores[d] = Some(s);
            let y = config.daily_vol * (s + config.noise * normal(&mut rng)) / noise_scale;
            targets[d] = Some(y.max(-0.9));
        }

        let history = simulate_stock(
            config, &schema, &plan, &targets, &mut rng, bpd, bar_sigma, gamma,
        );
        let mut history = history;
        history.stock_id = format!("S{i:05}");
        for d in 0..total_days {
            history.forward_returns[d] = if labelled.contains(&d) {
                Some(realized_return(config.return_horizon, &history.bars, d, bpd, 6))
            } else {
                None
            };
        }
        if plan.halted {
            // Halted stocks have flat prices; their labels carry no signal.
            for d in labelled.clone() {
                scores[d] = None;
            }
        }
        latent.push(scores);
        stocks.push(history);
    }

    let index = stocks
        .iter()
        .enumerate()
        .map(|(i, s)| (s.stock_id.clone(), i))
        .collect();
    Ok(SyntheticMarket {
        config: config.clone(),
        data: MarketData {
            schema,
            dates,
            bar_times,
            lookback_days: lookback,
            stocks,
        },
        latent,
        index,
    })
}

fn realized_return(horizon: ReturnHorizon, bars: &[f64], d: usize, bpd: usize, a: usize) -> f64 {
    let (open, close) = (0, 3);
    let first_bar = |day: usize| &bars[day * bpd * a..(day * bpd + 1) * a];
    let last_bar = |day: usize| &bars[((day + 1) * bpd - 1) * a..(day + 1) * bpd * a];
    match horizon {
        ReturnHorizon::NextOpenToOpen => first_bar(d + 2)[open] / first_bar(d + 1)[open] - 1.0,
        ReturnHorizon::CloseToNextClose => last_bar(d + 1)[close] / last_bar(d)[close] - 1.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_stock(
    config: &SyntheticConfig,
    schema: &FieldSchema,
    plan: &StockPlan,
    targets: &[Option<f64>],
    rng: &mut ChaCha8Rng,
    bpd: usize,
    bar_sigma: f64,
    gamma: f64,
) -> StockHistory {
    let total_days = targets.len();
    let a = HF_FIELDS.len();
    let mut bars = Vec::with_capacity(total_days * bpd * a);
    let mut lf = Vec::with_capacity(total_days);
    let mut opens: Vec<f64> = Vec::with_capacity(total_days);
    let mut closes: Vec<f64> = Vec::with_capacity(total_days);

    for t in 0..total_days {
        let day_lf: Vec<f64> = (0..schema.lf.len())
            .map(|j| 10.0 + 2.0 * plan.lf_values[j][t])
            .collect();
        lf.push(day_lf);

        if plan.halted {
            for _ in 0..bpd {
                bars.extend([plan.price0, plan.price0, plan.price0, plan.price0, 0.0, plan.price0]);
            }
            opens.push(plan.price0);
            closes.push(plan.price0);
            continue;
        }

        let gap_open = |rng: &mut ChaCha8Rng, prev_close: f64| {
            prev_close * (0.3 * config.daily_vol * normal(rng)).exp()
        };
        let open = match (t, config.return_horizon) {
            (0, _) => plan.price0,
            (t, ReturnHorizon::NextOpenToOpen) if t >= 2 => match targets[t - 2] {
                Some(y) => opens[t - 1] * (1.0 + y),
                None => gap_open(rng, closes[t - 1]),
            },
            (t, _) => gap_open(rng, closes[t - 1]),
        };

        let mut incs: Vec<f64> = (0..bpd).map(|_| bar_sigma * normal(rng)).collect();
        if let (ReturnHorizon::CloseToNextClose, true) = (config.return_horizon, t >= 1) {
            if let Some(y) = targets[t - 1] {
                let want = (closes[t - 1] * (1.0 + y) / open).ln();
                let shift = (want - incs.iter().sum::<f64>()) / bpd as f64;
                incs.iter_mut().for_each(|v| *v += shift);
            }
        }

        let day_volume = plan.volume_level * (gamma * plan.volume_shock[t]).exp();
        let mut o = open;
        for (b, inc) in incs.iter().enumerate() {
            let c = o * inc.exp();
            let h = o.max(c) * (0.5 * bar_sigma * normal(rng).abs()).exp();
            let l = o.min(c) * (-0.5 * bar_sigma * normal(rng).abs()).exp();
            let vwap = (o + h + l + c) / 4.0;
            let mid = (bpd as f64 - 1.0) / 2.0;
            let profile = if bpd > 1 {
                1.0 + 0.5 * ((b as f64 - mid) / mid).powi(2)
            } else {
                1.0
            };
            let v = (day_volume * profile * (0.1 * normal(rng)).exp()).round().max(1.0);
            bars.extend([o, h, l, c, v, vwap]);
            o = c;
        }
        if let (ReturnHorizon::CloseToNextClose, true, Some(y)) = (
            config.return_horizon,
            t >= 1,
            t.checked_sub(1).and_then(|p| targets[p]),
        ) {
            // Pin the close exactly so realized returns match the plan.
            let pinned = closes[t - 1] * (1.0 + y);
            let last = bars.len() - a;
            bars[last + 3] = pinned;
            bars[last + 1] = bars[last + 1].max(pinned);
            bars[last + 2] = bars[last + 2].min(pinned);
            bars[last + 5] = (bars[last] + bars[last + 1] + bars[last + 2] + pinned) / 4.0;
            o = pinned;
        }
        opens.push(open);
        closes.push(o);
    }

    StockHistory {
        stock_id: String::new(),
        bars: Arc::new(bars),
        lf,
        forward_returns: vec![None; total_days],
    }
}
