//! Pairwise monotonic logistic loss and the regression baseline.
//!
//! For scores `f` and realized returns `y` the loss averages, over every
//! ordered pair `i != j`,
//!
//! ```text
//! log(1 + exp(-tanh(f_i - f_j) * tanh(y_i - y_j)))
//! ```
//!
//! Both smoothed signs sit inside the exponent. Some typeset variants of
//! this objective place `tanh(y_i - y_j)` outside the `exp`; that reading
//! does not define a likelihood and is not used here. Diagonal pairs are
//! excluded since each contributes the constant `log 2` with no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softplus, Tape, Tensor, Var};

/// Training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Monotonic logistic regression over score/return pairs.
    #[default]
    Monlr,
    /// Mean squared error against raw returns.
    Mse,
}

impl Objective {
    /// Records the loss of an `n x 1` (or `1 x n`) score node on `tape`.
    pub fn record(self, tape: &Tape, scores: Var, returns: &[f64]) -> Result<Var> {
        match self {
            Objective::Monlr => monlr_on_tape(tape, scores, returns),
            Objective::Mse => mse_on_tape(tape, scores, returns),
        }
    }
}

/// Loss contributed by one ordered pair.
pub fn pair_term(score_diff: f64, return_diff: f64) -> f64 {
    softplus(-(score_diff.tanh() * return_diff.tanh()))
}

fn validate(n_scores: usize, returns: &[f64]) -> Result<()> {
    if n_scores != returns.len() {
        return Err(Error::InvalidArgument(format!(
            "loss: {n_scores} scores but {} returns",
            returns.len()
        )));
    }
    if n_scores < 2 {
        return Err(Error::InvalidArgument("loss: need at least 2 stocks".into()));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("loss: non-finite return".into()));
    }
    Ok(())
}

fn check_scores(tape: &Tape, scores: Var, returns: &[f64]) -> Result<()> {
    let value = tape.value(scores);
    validate(value.len(), returns)?;
    if !value.is_finite() {
        return Err(Error::InvalidArgument("loss: non-finite score".into()));
    }
    Ok(())
}

/// Records the monotonic logistic loss on `tape`.
pub fn monlr_on_tape(tape: &Tape, scores: Var, returns: &[f64]) -> Result<Var> {
    check_scores(tape, scores, returns)?;
    let n = returns.len();
    let mut return_signs = Vec::with_capacity(n * n);
    for &yi in returns {
        return_signs.extend(returns.iter().map(|&yj| -(yi - yj).tanh()));
    }
    let neg_return_signs = tape.leaf(Tensor::matrix(n, n, return_signs)?);
    let score_diff = tape.pairwise_diff(scores)?;
    let score_signs = tape.tanh(score_diff)?;
    let margins = tape.mul(score_signs, neg_return_signs)?;
    let terms = tape.softplus(margins)?;
    tape.off_diagonal_mean(terms)
}

/// Records mean squared error on `tape`.
pub fn mse_on_tape(tape: &Tape, scores: Var, returns: &[f64]) -> Result<Var> {
    check_scores(tape, scores, returns)?;
    let target = tape.leaf(Tensor::new(tape.shape(scores), returns.to_vec())?);
    let diff = tape.sub(scores, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

fn eval_with_grad(
    scores: &[f64],
    returns: &[f64],
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    validate(scores.len(), returns)?;
    let tape = Tape::new();
    let s = tape.leaf(Tensor::column(scores)?);
    let loss = objective.record(&tape, s, returns)?;
    let value = tape.item(loss);
    let grad = tape.backward(loss)?.take(s).into_data();
    Ok((value, grad))
}

/// Monotonic logistic loss of free scores against returns.
pub fn monlr_loss(scores: &[f64], returns: &[f64]) -> Result<f64> {
    Ok(eval_with_grad(scores, returns, Objective::Monlr)?.0)
}

/// Gradient of [`monlr_loss`] with respect to the scores.
pub fn monlr_gradient(scores: &[f64], returns: &[f64]) -> Result<Vec<f64>> {
    Ok(eval_with_grad(scores, returns, Objective::Monlr)?.1)
}

pub fn baseline_mse(scores: &[f64], returns: &[f64]) -> Result<f64> {
    Ok(eval_with_grad(scores, returns, Objective::Mse)?.0)
}

pub fn mse_gradient(scores: &[f64], returns: &[f64]) -> Result<Vec<f64>> {
    Ok(eval_with_grad(scores, returns, Objective::Mse)?.1)
}
