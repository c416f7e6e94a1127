//! Activation masks, activation ratios and English overlap per language and layer.
//!
//! A neuron fires at a position when `f(gate pre-activation) > 0` (strict).
//! Positions of one sample are combined into a single mask according to
//! [`PositionAggregation`]; the default is OR over positions. A language's
//! activation ratio at a layer is the mean of the per-sample ratios, and its
//! activated-neuron set is the union over samples.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::bitset::NeuronMask;
use crate::error::{Error, Result};
use crate::model::{ForwardCapture, ToyLvlm};
use crate::tensor::Tensor;
use crate::trace::TraceFile;

pub const ENGLISH: &str = "en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionAggregation {
    /// Fires if it fires at any position.
    #[default]
    Any,
    /// Fires if the mean of `f(x)` over positions is positive.
    Mean,
    /// Only the last position counts.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    pub activation: Activation,
    pub aggregation: PositionAggregation,
    /// Count vision-token positions too (default on).
    pub include_vision: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            activation: Activation::Silu,
            aggregation: PositionAggregation::Any,
            include_vision: true,
        }
    }
}

/// OR-over-positions mask of `f(preact) > 0` for a `[positions × d_inter]` matrix.
pub fn activation_mask(gate_preact: &Tensor, activation: Activation) -> Result<NeuronMask> {
    activation_mask_with(gate_preact, activation, PositionAggregation::Any)
}

pub fn activation_mask_with(
    gate_preact: &Tensor,
    activation: Activation,
    aggregation: PositionAggregation,
) -> Result<NeuronMask> {
    let (rows, cols) = gate_preact.expect_matrix("activation_mask")?;
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("pre-activation matrix"));
    }
    if !gate_preact.is_finite() {
        return Err(Error::NonFinite("activation_mask input"));
    }
    let mut mask = NeuronMask::new(cols);
    match aggregation {
        PositionAggregation::Any => {
            for r in 0..rows {
                for (j, &x) in gate_preact.row(r).iter().enumerate() {
                    if activation.apply(x) > 0.0 {
                        mask.insert(j);
                    }
                }
            }
        }
        PositionAggregation::Mean => {
            for j in 0..cols {
                let s: f64 = (0..rows).map(|r| activation.apply(gate_preact.get(r, j))).sum();
                if s / rows as f64 > 0.0 {
                    mask.insert(j);
                }
            }
        }
        PositionAggregation::Last => {
            for (j, &x) in gate_preact.row(rows - 1).iter().enumerate() {
                if activation.apply(x) > 0.0 {
                    mask.insert(j);
                }
            }
        }
    }
    Ok(mask)
}

/// One mask per layer from a capturing forward.
pub fn masks_from_capture(capture: &ForwardCapture, opts: &MaskOptions) -> Result<Vec<NeuronMask>> {
    capture
        .layers
        .iter()
        .map(|layer| {
            if opts.include_vision || capture.n_vision == 0 {
                return activation_mask_with(&layer.gate_preact, opts.activation, opts.aggregation);
            }
            let (rows, cols) = layer.gate_preact.expect_matrix("masks_from_capture")?;
            let text = &layer.gate_preact.data()[capture.n_vision * cols..];
            let t = Tensor::from_vec(vec![rows - capture.n_vision, cols], text.to_vec())?;
            activation_mask_with(&t, opts.activation, opts.aggregation)
        })
        .collect()
}

/// Runs a capturing forward per question and packs the masks into one trace.
pub fn capture_trace(
    model: &ToyLvlm,
    language: &str,
    questions: &[(Option<u32>, Vec<u32>)],
    opts: &MaskOptions,
) -> Result<TraceFile> {
    if questions.is_empty() {
        return Err(Error::Empty("question list"));
    }
    let masks = questions
        .par_iter()
        .map(|(image, tokens)| {
            let (_, cap) = model.forward(tokens, *image, true)?;
            masks_from_capture(&cap.expect("capture requested"), opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config();
    TraceFile::from_masks(language, cfg.n_layers, cfg.d_inter, &masks)
}

/// Fraction of `d_inter` neurons set in `mask`.
pub fn activation_ratio(mask: &NeuronMask, d_inter: usize) -> f64 {
    debug_assert!(mask.width() <= d_inter);
    if d_inter == 0 {
        return 0.0;
    }
    mask.count() as f64 / d_inter as f64
}

/// `|n_l ∩ n_eng| / |n_eng|`.
pub fn overlap_ratio(n_l: &NeuronMask, n_eng: &NeuronMask) -> Result<f64> {
    let denom = n_eng.count();
    if denom == 0 {
        return Err(Error::UndefinedOverlap(String::new()));
    }
    Ok(n_l.intersection_count(n_eng) as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    /// 1-based.
    pub layer: usize,
    /// Mean activation ratio over samples.
    pub ratio: f64,
    /// Size of the union of activated neurons over samples.
    pub n_activated: usize,
    /// Overlap with English; `null` for English itself.
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangLayerStats {
    pub language: String,
    pub n_samples: usize,
    pub layers: Vec<LayerStat>,
    /// Union of activated neurons per layer; not serialized.
    #[serde(skip)]
    pub neurons: Vec<NeuronMask>,
}

impl LangLayerStats {
    pub fn ratios(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.ratio).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSeries {
    pub per_language: BTreeMap<String, Vec<f64>>,
    /// Mean over non-English languages at each layer.
    pub avg: Vec<f64>,
}

/// Contents of `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub english: String,
    pub n_layers: usize,
    pub d_inter: usize,
    /// Sorted by language tag.
    pub languages: Vec<LangLayerStats>,
    pub overlap: OverlapSeries,
}

impl StatsReport {
    pub fn language(&self, tag: &str) -> Option<&LangLayerStats> {
        self.languages.iter().find(|l| l.language == tag)
    }

    /// Activation-ratio matrix `[languages × layers]` and its row labels.
    pub fn ratio_matrix(&self, include_english: bool) -> (Vec<String>, Vec<Vec<f64>>) {
        self.languages
            .iter()
            .filter(|l| include_english || l.language != self.english)
            .map(|l| (l.language.clone(), l.ratios()))
            .unzip()
    }

    pub fn avg_overlap(&self) -> &[f64] {
        &self.overlap.avg
    }
}

fn language_stats(trace: &TraceFile) -> Result<LangLayerStats> {
    let n_layers = trace.n_layers as usize;
    let d_inter = trace.d_inter as usize;
    let n = trace.n_samples as usize;
    let mut layers = Vec::with_capacity(n_layers);
    let mut neurons = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let mut union = NeuronMask::new(d_inter);
        let mut fired: u64 = 0;
        for s in 0..n {
            let m = trace.mask(s, layer)?;
            fired += m.count() as u64;
            union.union_with(&m);
        }
        // Integer total first, so the mean is independent of sample order.
        let ratio = fired as f64 / (n as f64 * d_inter as f64);
        layers.push(LayerStat {
            layer,
            ratio,
            n_activated: union.count(),
            overlap: None,
        });
        neurons.push(union);
    }
    Ok(LangLayerStats {
        language: trace.language.clone(),
        n_samples: n,
        layers,
        neurons,
    })
}

/// Per-language statistics and English overlap from one trace per language.
pub fn aggregate(traces: &[TraceFile], english: &str) -> Result<StatsReport> {
    let first = traces.first().ok_or(Error::Empty("trace list"))?;
    let (n_layers, d_inter) = (first.n_layers, first.d_inter);
    let mut seen = std::collections::BTreeSet::new();
    for t in traces {
        if t.n_layers != n_layers || t.d_inter != d_inter {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} layers × {} neurons vs {} × {}",
                t.language, t.n_layers, t.d_inter, n_layers, d_inter
            )));
        }
        if let Some(v) = t.validate().first() {
            return Err(Error::Format(format!("trace {:?}: {v}", t.language)));
        }
        if !seen.insert(t.language.as_str()) {
            return Err(Error::DimensionMismatch(format!(
                "language {:?} appears twice",
                t.language
            )));
        }
    }
    if !seen.contains(english) {
        return Err(Error::MissingEnglish(english.to_string()));
    }
    if seen.len() < 2 {
        return Err(Error::Empty("non-English traces"));
    }

    let mut languages: Vec<LangLayerStats> =
        traces.par_iter().map(language_stats).collect::<Result<_>>()?;
    languages.sort_by(|a, b| a.language.cmp(&b.language));

    let eng = languages
        .iter()
        .find(|l| l.language == english)
        .expect("checked above")
        .neurons
        .clone();
    let mut per_language = BTreeMap::new();
    for lang in languages.iter_mut().filter(|l| l.language != english) {
        let mut series = Vec::with_capacity(n_layers as usize);
        for (i, stat) in lang.layers.iter_mut().enumerate() {
            let o = overlap_ratio(&lang.neurons[i], &eng[i]).map_err(|_| {
                Error::UndefinedOverlap(format!(" at layer {}", i + 1))
            })?;
            stat.overlap = Some(o);
            series.push(o);
        }
        per_language.insert(lang.language.clone(), series);
    }
    let k = per_language.len() as f64;
    let avg = (0..n_layers as usize)
        .map(|i| per_language.values().map(|s| s[i]).sum::<f64>() / k)
        .collect();

    Ok(StatsReport {
        english: english.to_string(),
        n_layers: n_layers as usize,
        d_inter: d_inter as usize,
        languages,
        overlap: OverlapSeries { per_language, avg },
    })
}
