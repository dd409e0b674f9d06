//! The ranking network.
//!
//! Per stock, the bar matrix passes through a small convolution stack and a
//! linear projection to `e_hf` (`T' x D`), while the daily fields project to
//! a single query row `e_lf` (`1 x D`). One cross-attention step fuses them:
//!
//! ```text
//! o_i = softmax(e_lf Wq (e_hf Wk)^T / sqrt(D)) e_hf Wv
//! ```
//!
//! Stacking the `o_i` gives `O` (`N x D`); one self-attention step across
//! stocks gives `R = softmax(O Wq' (O Wk')^T / sqrt(D)) O Wv'`, and a
//! two-layer perceptron maps each row of `R` to a score. There are no
//! residual connections, normalization layers or positional encodings, so
//! the network is permutation equivariant in the stocks.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{CrossSection, MultiFreqPanel};
use crate::numerics::{Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Bar fields per row of the high-frequency input.
    pub hf_fields: usize,
    /// Daily fields of the low-frequency input.
    pub lf_fields: usize,
    /// Shared embedding width `D`.
    pub d_model: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub mlp_hidden: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Two kernel-3 convolutions of width `D` and a `2D` hidden scorer.
    pub fn new(hf_fields: usize, lf_fields: usize, d_model: usize, init_seed: u64) -> Self {
        Self {
            hf_fields,
            lf_fields,
            d_model,
            conv_layers: 2,
            conv_kernel: 3,
            conv_stride: 1,
            mlp_hidden: 2 * d_model,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hf_fields", self.hf_fields),
            ("lf_fields", self.lf_fields),
            ("d_model", self.d_model),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model: {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Rows left after the convolution stack for an input of `t` bars.
    pub fn conv_output_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for _ in 0..self.conv_layers {
            len = len.checked_sub(self.conv_kernel)? / self.conv_stride + 1;
        }
        Some(len)
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = Vec::new();
        let mut channels = self.hf_fields;
        for l in 0..self.conv_layers {
            out.push((format!("conv{l}.kernel"), vec![self.conv_kernel * channels, d]));
            out.push((format!("conv{l}.bias"), vec![1, d]));
            channels = d;
        }
        out.push(("hf_proj.weight".into(), vec![channels, d]));
        out.push(("hf_proj.bias".into(), vec![1, d]));
        out.push(("lf_proj.weight".into(), vec![self.lf_fields, d]));
        out.push(("lf_proj.bias".into(), vec![1, d]));
        for block in ["stock", "inter"] {
            for w in ["wq", "wk", "wv"] {
                out.push((format!("{block}.{w}"), vec![d, d]));
            }
        }
        out.push(("mlp0.weight".into(), vec![d, self.mlp_hidden]));
        out.push(("mlp0.bias".into(), vec![1, self.mlp_hidden]));
        out.push(("mlp1.weight".into(), vec![self.mlp_hidden, 1]));
        out.push(("mlp1.bias".into(), vec![1, 1]));
        out
    }
}

/// Learnable tensors, stored in [`ModelConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in config.layout() {
            let value = if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = if name.ends_with("kernel") {
                    (shape[0], config.conv_kernel * shape[1])
                } else {
                    (shape[0], shape[1])
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                Tensor::new(shape, data)?
            };
            names.push(name);
            values.push(value);
        }
        Ok(Self {
            config: config.clone(),
            names,
            values,
        })
    }

    /// Builds parameters from tensors given in layout order.
    pub fn from_tensors(config: &ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                values.len()
            )));
        }
        for ((name, shape), v) in layout.iter().zip(&values) {
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model_params",
                    left: shape.clone(),
                    right: v.shape().to_vec(),
                });
            }
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self {
            config: config.clone(),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            values,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            config: self.config.clone(),
            names: self.names.clone(),
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    config: ModelConfig,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}

/// Scores aligned with the stock ids they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub stock_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// `softmax(q k^T / sqrt(D)) v` for `q = query Wq`, `k = keys Wk`,
/// `v = keys Wv`. Returns the output and the attention matrix.
pub fn attention_on_tape(
    tape: &Tape,
    query: Var,
    keys: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var)> {
    let d = tape.shape(wq)[1];
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(keys, wk)?;
    let v = tape.matmul(keys, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// Fusion embedding `o_i` (`1 x D`) and its attention row (`1 x T'`).
pub fn fuse_on_tape(tape: &Tape, p: &BoundParams, hf: Var, lf: Var) -> Result<(Var, Var)> {
    let cfg = &p.config;
    let mut h = hf;
    for l in 0..cfg.conv_layers {
        if l > 0 {
            h = tape.relu(h)?;
        }
        h = tape.conv1d(h, p.var(&format!("conv{l}.kernel")), cfg.conv_stride)?;
        h = tape.add_row(h, p.var(&format!("conv{l}.bias")))?;
    }
    let e_hf = tape.linear(h, p.var("hf_proj.weight"), p.var("hf_proj.bias"))?;
    let e_lf = tape.linear(lf, p.var("lf_proj.weight"), p.var("lf_proj.bias"))?;
    attention_on_tape(
        tape,
        e_lf,
        e_hf,
        p.var("stock.wq"),
        p.var("stock.wk"),
        p.var("stock.wv"),
    )
}

/// Inter-stock self-attention over the stacked embeddings `O` (`N x D`).
pub fn interstock_on_tape(tape: &Tape, p: &BoundParams, o: Var) -> Result<Var> {
    let (r, _) = attention_on_tape(
        tape,
        o,
        o,
        p.var("inter.wq"),
        p.var("inter.wk"),
        p.var("inter.wv"),
    )?;
    Ok(r)
}

/// Row-wise scorer, `N x D` to `N x 1`.
pub fn score_on_tape(tape: &Tape, p: &BoundParams, r: Var) -> Result<Var> {
    let h = tape.linear(r, p.var("mlp0.weight"), p.var("mlp0.bias"))?;
    let h = tape.relu(h)?;
    tape.linear(h, p.var("mlp1.weight"), p.var("mlp1.bias"))
}

fn check_panel(cfg: &ModelConfig, panel: &MultiFreqPanel) -> Result<()> {
    if panel.hf.cols() != cfg.hf_fields || panel.lf.len() != cfg.lf_fields {
        return Err(Error::Shape {
            op: "model_input",
            left: vec![cfg.hf_fields, cfg.lf_fields],
            right: vec![panel.hf.cols(), panel.lf.len()],
        });
    }
    match cfg.conv_output_len(panel.hf.rows()) {
        Some(n) if n > 0 => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "model_input: {} bars are too few for the convolution stack",
            panel.hf.rows()
        ))),
    }
}

/// Records the full network on `tape` and returns the `N x 1` score node.
pub fn forward_on_tape(tape: &Tape, p: &BoundParams, cs: &CrossSection) -> Result<Var> {
    let mut fused = Vec::with_capacity(cs.len());
    for panel in &cs.panels {
        check_panel(&p.config, panel)?;
        let hf = tape.leaf(panel.hf.to_tensor()?);
        let lf = tape.leaf(Tensor::row(&panel.lf)?);
        fused.push(fuse_on_tape(tape, p, hf, lf)?.0);
    }
    let o = tape.concat_rows(&fused)?;
    let r = interstock_on_tape(tape, p, o)?;
    score_on_tape(tape, p, r)
}

/// Scores one cross-section.
pub fn forward(params: &ModelParams, cs: &CrossSection) -> Result<ScoreVector> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let scores = forward_on_tape(&tape, &bound, cs)?;
    Ok(ScoreVector {
        stock_ids: cs.stock_ids(),
        scores: tape.value(scores).into_data(),
    })
}

/// Fusion embedding of one stock and its attention weights over the bars.
pub fn fuse_stock(params: &ModelParams, hf: &Tensor, lf: &[f64]) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (o, w) = fuse_on_tape(&tape, &bound, tape.leaf(hf.clone()), tape.leaf(Tensor::row(lf)?))?;
    Ok((tape.value(o), tape.value(w)))
}

pub fn interstock_forward(params: &ModelParams, o: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let r = interstock_on_tape(&tape, &bound, tape.leaf(o.clone()))?;
    Ok(tape.value(r))
}

pub fn score(params: &ModelParams, r: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let s = score_on_tape(&tape, &bound, tape.leaf(r.clone()))?;
    Ok(tape.value(s).into_data())
}
