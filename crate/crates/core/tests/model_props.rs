mod common;

use common::{random_cross_section, rng};
use proptest::prelude::*;
use rand::Rng;
use xsrank::marketdata::CrossSection;
use xsrank::model::{forward, fuse_stock, interstock_forward, score, ModelConfig, ModelParams};
use xsrank::numerics::Tensor;

type Mat = Vec<Vec<f64>>;

/// Parameters with every bias drawn away from zero.
fn params(seed: u64, d: usize) -> ModelParams {
    let mut p = ModelParams::init(&ModelConfig::new(6, 3, d, seed)).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in p.names().to_vec().iter().zip(p.tensors_mut()) {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
    p
}

fn mat(p: &ModelParams, name: &str) -> Mat {
    let t = p.get(name).unwrap();
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len())
        .map(|o| x.iter().enumerate().map(|(i, xi)| xi * w[i][o]).sum())
        .collect()
}

fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    vec_mat(x, w).iter().zip(b).map(|(a, c)| a + c).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Single-query attention of `query` over `keys`, scalar by scalar.
fn attend(query: &[f64], keys: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> (Vec<f64>, Vec<f64>) {
    let d = wq[0].len() as f64;
    let q = vec_mat(query, wq);
    let logits: Vec<f64> = keys.iter().map(|k| dot(&q, &vec_mat(k, wk)) / d.sqrt()).collect();
    let w = softmax(&logits);
    let mut out = vec![0.0; wv[0].len()];
    for (key, wt) in keys.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(vec_mat(key, wv)) {
            *o += wt * v;
        }
    }
    (out, w)
}

fn fuse_oracle(p: &ModelParams, hf: &Mat, lf: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = hf.clone();
    for l in 0..p.config.conv_layers {
        if l > 0 {
            h = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        }
        let k = mat(p, &format!("conv{l}.kernel"));
        let b = &mat(p, &format!("conv{l}.bias"))[0];
        let taps = p.config.conv_kernel;
        let c = h[0].len();
        h = (0..=h.len() - taps)
            .map(|t| {
                (0..b.len())
                    .map(|o| {
                        let mut acc = b[o];
                        for tap in 0..taps {
                            for ch in 0..c {
                                acc += h[t + tap][ch] * k[tap * c + ch][o];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
    }
    let (pw, pb) = (mat(p, "hf_proj.weight"), mat(p, "hf_proj.bias"));
    let e_hf: Mat = h.iter().map(|r| affine(r, &pw, &pb[0])).collect();
    let e_lf = affine(lf, &mat(p, "lf_proj.weight"), &mat(p, "lf_proj.bias")[0]);
    attend(&e_lf, &e_hf, &mat(p, "stock.wq"), &mat(p, "stock.wk"), &mat(p, "stock.wv"))
}

fn interstock_oracle(p: &ModelParams, o: &Mat) -> Mat {
    let (wq, wk, wv) = (mat(p, "inter.wq"), mat(p, "inter.wk"), mat(p, "inter.wv"));
    o.iter().map(|row| attend(row, o, &wq, &wk, &wv).0).collect()
}

fn score_oracle(p: &ModelParams, r: &Mat) -> Vec<f64> {
    let (w0, b0) = (mat(p, "mlp0.weight"), mat(p, "mlp0.bias"));
    let (w1, b1) = (mat(p, "mlp1.weight"), mat(p, "mlp1.bias"));
    r.iter()
        .map(|row| {
            let h: Vec<f64> = affine(row, &w0, &b0[0]).iter().map(|v| v.max(0.0)).collect();
            affine(&h, &w1, &b1[0])[0]
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn fusion_matches_scalar_oracle() {
    for seed in 0..10 {
        let p = params(seed, 4);
        let cs = random_cross_section(seed, 2);
        let panel = &cs.panels[0];
        let hf = panel.hf.to_tensor().unwrap();
        let (o, w) = fuse_stock(&p, &hf, &panel.lf).unwrap();
        let (want_o, want_w) = fuse_oracle(&p, &to_mat(&hf), &panel.lf);
        assert!(close(o.data(), &want_o, 1e-12), "{:?} vs {want_o:?}", o.data());
        assert!(close(w.data(), &want_w, 1e-12));
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identical_bars_give_the_value_projection() {
    let p = params(3, 4);
    let bar = [0.3, -0.2, 0.9, 0.1, 1.2, -0.4];
    let hf = Tensor::matrix(8, 6, bar.iter().cycle().take(48).cloned().collect()).unwrap();
    let mut outputs = Vec::new();
    for lf in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]] {
        let (o, w) = fuse_stock(&p, &hf, &lf).unwrap();
        assert!(close(o.data(), &fuse_oracle(&p, &to_mat(&hf), &lf).0, 1e-12));
        // Eight bars through two kernel-3 layers leave four identical rows.
        assert!(w.data().iter().all(|v| *v == 0.25));
        outputs.push(o);
    }
    assert!(close(outputs[0].data(), outputs[1].data(), 1e-15));
}

#[test]
fn interstock_matches_scalar_oracle() {
    for seed in 0..10 {
        let p = params(seed, 4);
        let mut r = rng(seed + 50);
        let o: Mat = (0..3).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let got = interstock_forward(&p, &Tensor::from_rows(&o).unwrap()).unwrap();
        let want = interstock_oracle(&p, &o);
        assert!(close(got.data(), &want.concat(), 1e-12));
    }
}

#[test]
fn single_row_attends_to_itself() {
    let p = params(1, 4);
    let o = vec![vec![0.5, -1.0, 2.0, 0.25]];
    let got = interstock_forward(&p, &Tensor::from_rows(&o).unwrap()).unwrap();
    let want = vec_mat(&o[0], &mat(&p, "inter.wv"));
    assert!(close(got.data(), &want, 1e-15));
}

#[test]
fn scorer_matches_oracle_and_is_row_wise() {
    let p = params(2, 4);
    let mut r = rng(9);
    let mut rows: Mat = (0..6).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let before = score(&p, &Tensor::from_rows(&rows).unwrap()).unwrap();
    assert!(close(&before, &score_oracle(&p, &rows), 1e-12));
    rows[3] = vec![9.0, -9.0, 9.0, -9.0];
    let after = score(&p, &Tensor::from_rows(&rows).unwrap()).unwrap();
    for i in (0..6).filter(|&i| i != 3) {
        assert_eq!(before[i], after[i]);
    }
}

#[test]
fn zero_weights_score_the_bias() {
    let mut p = params(4, 4);
    for name in ["mlp0.weight", "mlp1.weight"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let bias = p.get("mlp1.bias").unwrap().item();
    let s = forward(&p, &random_cross_section(0, 5)).unwrap();
    assert!(s.scores.iter().all(|v| *v == bias));
}

#[test]
fn forward_is_deterministic_and_rejects_bad_shapes() {
    let p = params(5, 4);
    let cs = random_cross_section(5, 4);
    assert_eq!(forward(&p, &cs).unwrap(), forward(&p, &cs).unwrap());
    let other = ModelParams::init(&ModelConfig::new(6, 2, 4, 0)).unwrap();
    assert!(forward(&other, &cs).is_err());
}

fn permuted(cs: &CrossSection, idx: &[usize]) -> CrossSection {
    cs.select(idx).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_has_one_score_per_stock(n in 2usize..20, seed in any::<u64>()) {
        let p = params(7, 4);
        let s = forward(&p, &random_cross_section(seed, n)).unwrap();
        prop_assert_eq!(s.scores.len(), n);
        prop_assert!(s.scores.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permutation_equivariance(n in 2usize..12, seed in any::<u64>()) {
        let p = params(seed % 17, 4);
        let cs = random_cross_section(seed, n);
        let mut r = rng(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let base = forward(&p, &cs).unwrap();
        let moved = forward(&p, &permuted(&cs, &idx)).unwrap();
        for (pos, &i) in idx.iter().enumerate() {
            prop_assert_eq!(&moved.stock_ids[pos], &base.stock_ids[i]);
            prop_assert!((moved.scores[pos] - base.scores[i]).abs() < 1e-12);
        }
    }
}
