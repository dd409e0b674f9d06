//! Mini-batch training with AdamW, a Noam schedule and validation-based
//! checkpoint selection.

mod optim;

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::marketdata::{CrossSection, NormalizationState};
use crate::metrics::{fmt_opt, mean, spearman, DailyEvaluation};
use crate::model::{forward, forward_on_tape, Checkpoint, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::sampler::{draw_minibatch, ShortDayPolicy, SubSampleSpec};

pub use optim::{clip_global_norm, noam_lr, noam_scale_for_peak, AdamW};

/// Which validation-ranked checkpoint `train` returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Best,
    SecondBest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stocks per sub-sampled cross-section.
    pub k: usize,
    /// Days per mini-batch.
    pub m: usize,
    pub epochs: usize,
    /// Peak learning rate; used to derive `scale` when that is unset.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Noam numerator; `None` means `lr * sqrt(model_size * warmup_steps)`.
    pub scale: Option<f64>,
    pub seed: u64,
    pub objective: Objective,
    pub selection: Selection,
    pub short_day_policy: ShortDayPolicy,
    pub d_model: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    /// Iterations per epoch; `None` means `ceil(days / m)`.
    pub iterations_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            m: 6,
            epochs: 80,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
            clip_norm: 0.5,
            warmup_steps: 4000,
            scale: None,
            seed: 0,
            objective: Objective::Monlr,
            selection: Selection::Best,
            short_day_policy: ShortDayPolicy::Error,
            d_model: 32,
            conv_layers: 2,
            conv_kernel: 3,
            iterations_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.k < 2 || self.m == 0 || self.epochs == 0 || self.d_model == 0 {
            return fail("k >= 2 and positive m, epochs, d_model are required");
        }
        if self.warmup_steps == 0 || self.conv_kernel == 0 {
            return fail("warmup_steps and conv_kernel must be positive");
        }
        for (name, v) in [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(&format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return fail("weight_decay must be in [0, 1)");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(&format!("{name} must be in (0, 1)"));
            }
        }
        if matches!(self.scale, Some(s) if !(s > 0.0 && s.is_finite())) {
            return fail("scale must be positive");
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self, hf_fields: usize, lf_fields: usize) -> ModelConfig {
        ModelConfig {
            conv_layers: self.conv_layers,
            conv_kernel: self.conv_kernel,
            ..ModelConfig::new(hf_fields, lf_fields, self.d_model, self.seed)
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Set on the last iteration of each epoch.
    pub val_rankic: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint chosen by the configured [`Selection`].
    pub selected: Checkpoint,
    /// Every end-of-epoch checkpoint, in order.
    pub epochs: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    pub rejected_steps: Vec<u64>,
}

/// Daily RankIC of the model's scores on each cross-section.
pub fn evaluate(params: &ModelParams, sections: &[CrossSection]) -> Result<Vec<DailyEvaluation>> {
    sections
        .iter()
        .map(|cs| {
            let s = forward(params, cs)?;
            Ok(DailyEvaluation {
                date: cs.date,
                rank_ic: spearman(&s.scores, &cs.returns)?,
                n_stocks: cs.len(),
            })
        })
        .collect()
}

fn mean_ic(daily: &[DailyEvaluation]) -> Option<f64> {
    let ics: Vec<f64> = daily.iter().filter_map(|d| d.rank_ic).collect();
    (!ics.is_empty()).then(|| mean(&ics))
}

/// Seed of the mini-batch drawn at `step`.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn diverged(step: u64, seed: u64, reason: impl Into<String>) -> Error {
    Error::Diverged {
        step: step as usize,
        batch_seed: seed,
        reason: reason.into(),
    }
}

/// Mean loss and gradients of a batch.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[CrossSection],
    objective: Objective,
) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for cs in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let scores = forward_on_tape(&tape, &bound, cs)?;
        let loss = objective.record(&tape, scores, &cs.returns)?;
        total += tape.item(loss);
        let mut g = tape.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
            acc.axpy(w, &g.take(v))?;
        }
    }
    Ok((total * w, grads))
}

/// Trains a freshly initialized model on `train` and selects a checkpoint
/// by mean RankIC on `validation`.
pub fn train(
    train: &[CrossSection],
    validation: &[CrossSection],
    config: &TrainConfig,
    normalizer: Option<&NormalizationState>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Data("train: no training cross-sections".into()))?;
    if validation.is_empty() {
        return Err(Error::Data("train: no validation cross-sections".into()));
    }
    let train_dates: HashSet<_> = train.iter().map(|c| c.date).collect();
    if let Some(cs) = validation.iter().find(|c| train_dates.contains(&c.date)) {
        return Err(Error::Data(format!(
            "train: {} is in both the training and validation ranges",
            cs.date
        )));
    }

    let model_config = config.model_config(first.schema.hf.len(), first.schema.lf.len());
    let mut params = ModelParams::init(&model_config)?;
    let size = params.size();
    let scale = config
        .scale
        .unwrap_or_else(|| noam_scale_for_peak(config.lr, config.warmup_steps, size));
    let shapes: Vec<&[usize]> = params.tensors().iter().map(Tensor::shape).collect();
    let mut opt = AdamW::new(
        &shapes,
        config.beta1,
        config.beta2,
        config.eps,
        config.weight_decay,
    );
    let spec = SubSampleSpec {
        m: config.m,
        k: config.k,
        seed: config.seed,
    };
    let per_epoch = config
        .iterations_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.m)) as u64;
    let total = per_epoch * config.epochs as u64;
    let config_hash = config.hash();

    let mut log = Vec::with_capacity(total as usize);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut rejected_steps = Vec::new();
    for step in 1..=total {
        let seed = batch_seed(config.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = draw_minibatch(train, &spec, config.short_day_policy, &mut rng)?;
        let (loss, mut grads) = match batch_gradients(&params, &batch, config.objective) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(step, seed, format!("non-finite value in {op}")))
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(step, seed, "non-finite loss"));
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = noam_lr(step, config.warmup_steps, size, scale)?;
        match opt.step(params.tensors_mut(), &grads, lr) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => {
                log::warn!("step {step}: non-finite gradient (batch seed {seed}), update skipped");
                rejected_steps.push(step);
            }
            Err(e) => return Err(e),
        }

        let mut row = LogRow {
            step,
            lr,
            loss,
            val_rankic: None,
        };
        if step % per_epoch == 0 {
            let ic = mean_ic(&evaluate(&params, validation)?);
            row.val_rankic = ic;
            log::info!(
                "epoch {}: step {step} loss {loss:.6} val RankIC {}",
                step / per_epoch,
                fmt_opt(ic)
            );
            epochs.push(Checkpoint {
                params: params.clone(),
                step,
                val_rankic: ic,
                config_hash: config_hash.clone(),
                normalizer: normalizer.cloned(),
            });
        }
        on_step(&row);
        log.push(row);
    }

    let selected = select(&epochs, config.selection).clone();
    Ok(TrainOutcome {
        selected,
        epochs,
        log,
        rejected_steps,
    })
}

/// Best or second-best epoch by validation RankIC. Undefined scores rank
/// last; ties keep the earlier epoch. With a single epoch both policies
/// return it.
pub fn select(epochs: &[Checkpoint], policy: Selection) -> &Checkpoint {
    let mut order: Vec<usize> = (0..epochs.len()).collect();
    let key = |i: usize| epochs[i].val_rankic.unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let rank = match policy {
        Selection::Best => 0,
        Selection::SecondBest => 1.min(order.len() - 1),
    };
    &epochs[order[rank]]
}

/// Writes `step,lr,loss,val_rankic`.
pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "loss", "val_rankic"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            fmt_opt(r.val_rankic),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(ic: Option<f64>, step: u64) -> Checkpoint {
        Checkpoint {
            params: ModelParams::init(&ModelConfig::new(6, 1, 2, 0)).unwrap(),
            step,
            val_rankic: ic,
            config_hash: String::new(),
            normalizer: None,
        }
    }

    #[test]
    fn selection_policies() {
        let e = vec![ckpt(Some(0.1), 1), ckpt(None, 2), ckpt(Some(0.3), 3), ckpt(Some(0.2), 4)];
        assert_eq!(select(&e, Selection::Best).step, 3);
        assert_eq!(select(&e, Selection::SecondBest).step, 4);
        assert_eq!(select(&e[..1], Selection::SecondBest).step, 1);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            k: 100,
            scale: Some(2.0),
            objective: Objective::Mse,
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn batch_seeds_differ() {
        assert_ne!(batch_seed(1, 1), batch_seed(1, 2));
        assert_ne!(batch_seed(1, 1), batch_seed(2, 1));
    }
}
