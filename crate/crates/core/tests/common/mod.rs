//! Independent oracles and helpers shared by the integration tests and the
//! acceptance runner. Nothing here calls the code it is used to check.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use plast::autodiff::{Graph, Var};
use plast::{Activation, Result, Tensor};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn read_fixture(name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

pub fn f64_vec(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

pub fn naive_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Scalar-by-scalar gated FFN: `[silu(h·Wg) ⊗ (h·Wu)]·Wd`.
pub fn naive_ffn(h: &[Vec<f64>], wg: &[Vec<f64>], wu: &[Vec<f64>], wd: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d_model = wg.len();
    let d_inter = wg[0].len();
    let d_out = wd[0].len();
    let mut out = vec![vec![0.0; d_out]; h.len()];
    for (p, row) in h.iter().enumerate() {
        let mut hidden = vec![0.0; d_inter];
        for j in 0..d_inter {
            let mut g = 0.0;
            let mut u = 0.0;
            for k in 0..d_model {
                g += row[k] * wg[k][j];
                u += row[k] * wu[k][j];
            }
            hidden[j] = naive_silu(g) * u;
        }
        for m in 0..d_out {
            let mut s = 0.0;
            for j in 0..d_inter {
                s += hidden[j] * wd[j][m];
            }
            out[p][m] = s;
        }
    }
    out
}

/// Outcome of the brute-force selection oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSelection {
    pub boundary: usize,
    pub k: BTreeSet<usize>,
    pub theta: f64,
    pub selected: BTreeSet<usize>,
}

/// Direct transcription of the selection rule. `r` is languages × layers.
/// `None` when the rule yields no layers.
pub fn oracle_selection(avg: &[f64], r: &[Vec<f64>]) -> Option<OracleSelection> {
    let mut boundary = 1;
    let mut best = avg[0];
    for (i, &v) in avg.iter().enumerate() {
        if v > best {
            best = v;
            boundary = i + 1;
        }
    }
    let k: BTreeSet<usize> = (1..boundary).collect();
    if k.is_empty() {
        return None;
    }
    let n_lang = r.len() as f64;
    let mut msd = Vec::new();
    for &layer in &k {
        let mut mean = 0.0;
        for row in r {
            mean += row[layer - 1];
        }
        mean /= n_lang;
        let mut var = 0.0;
        for row in r {
            let d = row[layer - 1] - mean;
            var += d * d;
        }
        msd.push((layer, var / n_lang));
    }
    let theta = msd.iter().map(|(_, v)| v).sum::<f64>() / msd.len() as f64;
    let selected: BTreeSet<usize> = msd.iter().filter(|(_, v)| *v > theta).map(|(l, _)| *l).collect();
    if selected.is_empty() {
        return None;
    }
    Some(OracleSelection {
        boundary,
        k,
        theta,
        selected,
    })
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference check of `build` against reverse mode. The
/// output is contracted with fixed random weights so every entry matters.
/// Returns the worst relative error over `probes` random input coordinates.
pub fn check_op<R: Rng>(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
    probes: usize,
    rng: &mut R,
) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::randn(&out_shape, 1.0, rng);
    let eval = |ins: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let wv = g.input(weights.clone(), false).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if want_grads {
            let gr = g.backward(loss).unwrap();
            grads = vars
                .iter()
                .zip(ins)
                .map(|(v, t)| gr.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
        }
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..inputs.len());
        let j = rng.gen_range(0..inputs[i].numel());
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= FD_STEP;
        let (fp, _) = eval(&plus, false);
        let (fm, _) = eval(&minus, false);
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[i].data()[j], numeric));
    }
    worst
}

/// Every differentiable graph op with random inputs: `(name, inputs, build)`.
pub type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>,
);

pub fn op_cases<R: Rng>(rng: &mut R) -> Vec<OpCase> {
    let m = |r: usize, c: usize, rng: &mut R| Tensor::randn(&[r, c], 1.0, rng);
    let mut cases: Vec<OpCase> = vec![
        ("matmul", vec![m(3, 4, rng), m(4, 5, rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_nt", vec![m(3, 4, rng), m(5, 4, rng)], Box::new(|g, v| g.matmul_nt(v[0], v[1]))),
        ("add", vec![m(3, 4, rng), m(3, 4, rng)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_row", vec![m(3, 4, rng), m(1, 4, rng)], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("mul", vec![m(3, 4, rng), m(3, 4, rng)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![m(3, 4, rng)], Box::new(|g, v| g.scale(v[0], -1.7))),
        (
            "layer_norm",
            vec![m(4, 6, rng), m(1, 6, rng), m(1, 6, rng)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("causal_softmax", vec![m(5, 5, rng)], Box::new(|g, v| g.causal_softmax(v[0]))),
        ("slice_cols", vec![m(3, 6, rng)], Box::new(|g, v| g.slice_cols(v[0], 2, 3))),
        (
            "concat_cols",
            vec![m(3, 2, rng), m(3, 4, rng)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "concat_rows",
            vec![m(2, 3, rng), m(4, 3, rng)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        (
            "gather_rows",
            vec![m(6, 3, rng)],
            Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        ),
        (
            "cross_entropy_sum",
            vec![m(4, 7, rng)],
            Box::new(|g, v| g.cross_entropy_sum(v[0], &[Some(3), None, Some(0), Some(6)])),
        ),
        ("sum", vec![m(3, 4, rng)], Box::new(|g, v| g.sum(v[0]))),
    ];
    for act in [Activation::Silu, Activation::Gelu, Activation::Relu] {
        let name = match act {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        // Keep ReLU inputs away from the kink.
        let mut x = m(3, 4, rng);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        cases.push((name, vec![x], Box::new(move |g, v| g.activation(v[0], act))));
    }
    cases
}
