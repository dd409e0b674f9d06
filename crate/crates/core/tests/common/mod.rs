#![allow(dead_code)]

use std::sync::Arc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsrank::marketdata::{CrossSection, FieldSchema, HfWindow, MultiFreqPanel, HF_FIELDS};
use xsrank::numerics::{Tape, Tensor, Var};
use xsrank::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `|a - b| / max(|a|, |b|)`, or the absolute difference when both are
/// below `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error between tape gradients and central differences
/// of the scalar `loss(inputs)` over every input element.
pub fn max_gradient_error(
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    loss: impl Fn(&Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |values: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = loss(&tape, &vars).unwrap();
        tape.item(out)
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = loss(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for e in 0..inputs[i].len() {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + step;
            let up = eval(&values);
            values[i].data_mut()[e] = orig - step;
            let down = eval(&values);
            values[i].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(g.data()[e], fd, floor));
        }
    }
    worst
}

/// Naive evaluation of the pairwise monotonic logistic loss.
pub fn monlr_oracle(scores: &[f64], returns: &[f64]) -> f64 {
    let n = scores.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let z = (scores[i] - scores[j]).tanh() * (returns[i] - returns[j]).tanh();
                total += (1.0 + (-z).exp()).ln();
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Five stocks with eight bars each.
pub fn toy_cross_section(seed: u64) -> CrossSection {
    random_cross_section(seed, 5)
}

/// `n` stocks with eight random bars of six fields and three lf fields.
pub fn random_cross_section(seed: u64, n: usize) -> CrossSection {
    let mut r = rng(seed);
    let schema = Arc::new(FieldSchema {
        hf: HF_FIELDS.iter().map(|s| s.to_string()).collect(),
        lf: vec!["f0".into(), "f1".into(), "f2".into()],
        bars_per_day: 8,
    });
    let panels = (0..n)
        .map(|i| MultiFreqPanel {
            stock_id: format!("S{i}"),
            hf: HfWindow::from_matrix(8, 6, (0..48).map(|_| r.random_range(-1.5..1.5)).collect())
                .unwrap(),
            lf: (0..3).map(|_| r.random_range(0.0..1.0)).collect(),
            as_of: NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(),
        })
        .collect();
    let returns = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    CrossSection::new(NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(), schema, panels, returns).unwrap()
}
