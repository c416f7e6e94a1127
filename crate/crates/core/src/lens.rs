//! Logit lens and attention-to-vision mass.
//!
//! `lens.json`:
//! ```text
//! { "n_layers", "seq_len", "n_vision", "vocab_size", "k",
//!   "layers": [ { "layer": 1,
//!                 "positions": [ { "position": 0, "entropy": nats,
//!                                  "top": [ { "token": id, "prob": p } ] } ] } ] }
//! ```
//! `attn.json`:
//! ```text
//! { "n_vision", "seq_len", "layers": [ { "layer": 1, "vision_mass": f } ] }
//! ```
//! Attention mass is the raw post-softmax weight on vision keys, not a
//! gradient-weighted class activation map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardCapture, ToyLvlm};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: u32,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    pub position: usize,
    pub entropy: f64,
    pub top: Vec<TokenProb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLayer {
    pub layer: usize,
    pub positions: Vec<LensCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensGrid {
    pub n_layers: usize,
    pub seq_len: usize,
    pub n_vision: usize,
    pub vocab_size: usize,
    pub k: usize,
    pub layers: Vec<LensLayer>,
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (rows, cols) = logits.expect_matrix("softmax_rows")?;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.push(exps.into_iter().map(|e| e / z).collect());
    }
    Ok(out)
}

/// Entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    h.max(0.0)
}

fn top_k(p: &[f64], k: usize) -> Vec<TokenProb> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter()
        .map(|i| TokenProb {
            token: i as u32,
            prob: p[i],
        })
        .collect()
}

/// Final norm and LM head applied to every layer's residual stream.
pub fn logit_lens(model: &ToyLvlm, capture: &ForwardCapture, k: usize) -> Result<LensGrid> {
    if capture.layers.is_empty() {
        return Err(Error::Empty("forward capture"));
    }
    let vocab = model.config().vocab_size;
    let k = k.min(vocab);
    let mut layers = Vec::with_capacity(capture.layers.len());
    for (i, lc) in capture.layers.iter().enumerate() {
        let probs = softmax_rows(&model.project_to_vocab(&lc.hidden)?)?;
        let positions = probs
            .iter()
            .enumerate()
            .map(|(pos, p)| LensCell {
                position: pos,
                entropy: entropy(p),
                top: top_k(p, k),
            })
            .collect();
        layers.push(LensLayer {
            layer: i + 1,
            positions,
        });
    }
    Ok(LensGrid {
        n_layers: capture.layers.len(),
        seq_len: capture.seq_len(),
        n_vision: capture.n_vision,
        vocab_size: vocab,
        k,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub layer: usize,
    pub vision_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub n_vision: usize,
    pub seq_len: usize,
    pub layers: Vec<AttentionLayer>,
}

/// Per layer, the attention weight text-token queries place on vision keys,
/// averaged over heads and query positions.
pub fn vision_attention_mass(capture: &ForwardCapture) -> Result<AttentionReport> {
    let nv = capture.n_vision;
    if nv == 0 {
        return Err(Error::Empty("vision tokens"));
    }
    let t = capture.seq_len();
    if t <= nv {
        return Err(Error::Empty("question tokens"));
    }
    let mut layers = Vec::with_capacity(capture.layers.len());
    for (i, lc) in capture.layers.iter().enumerate() {
        if lc.attention.is_empty() {
            return Err(Error::Empty("attention capture"));
        }
        let mut total = 0.0;
        for head in &lc.attention {
            for q in nv..t {
                let row = &head.data()[q * t..(q + 1) * t];
                total += row[..nv].iter().sum::<f64>();
            }
        }
        let mass = total / (lc.attention.len() * (t - nv)) as f64;
        layers.push(AttentionLayer {
            layer: i + 1,
            vision_mass: mass.clamp(0.0, 1.0),
        });
    }
    Ok(AttentionReport {
        n_vision: nv,
        seq_len: t,
        layers,
    })
}
