//! Language-specific layer boundary and MSD-threshold layer selection.
//!
//! The language-specific layers `K` are those strictly before the layer where
//! the average non-English/English overlap peaks. Within `K`, each layer's
//! MSD is the population variance of the activation ratio across languages;
//! the threshold θ is the mean MSD over `K`, and layers whose MSD strictly
//! exceeds θ are selected.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::StatsReport;

/// Contents of `selection.json`. Layer indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub boundary_layer: usize,
    #[serde(rename = "K")]
    pub k: BTreeSet<usize>,
    pub msd: BTreeMap<usize, f64>,
    pub theta: f64,
    pub selected: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionOptions {
    /// Include English among the languages whose ratios define MSD.
    pub include_english: bool,
    /// Keep at most this many selected layers (highest MSD first).
    pub max_layers: Option<usize>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            include_english: true,
            max_layers: None,
        }
    }
}

/// 1-based index of the maximum; ties go to the earliest layer.
pub fn find_boundary(avg_overlap: &[f64]) -> Result<usize> {
    if avg_overlap.len() < 2 {
        return Err(Error::Empty("overlap series (need at least two layers)"));
    }
    if avg_overlap.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("overlap series"));
    }
    let mut best = 0;
    for (i, &v) in avg_overlap.iter().enumerate() {
        if v > avg_overlap[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Layers preceding the boundary.
pub fn language_specific_layers(boundary_layer: usize) -> BTreeSet<usize> {
    (1..boundary_layer).collect()
}

/// Population variance across rows (languages) for each layer in `k`.
pub fn msd_per_layer(r: &[Vec<f64>], k: &BTreeSet<usize>) -> Result<BTreeMap<usize, f64>> {
    if r.len() < 2 {
        return Err(Error::TooFewLanguages(r.len()));
    }
    let n_layers = r[0].len();
    if r.iter().any(|row| row.len() != n_layers) {
        return Err(Error::DimensionMismatch("ragged activation-ratio matrix".into()));
    }
    let mut out = BTreeMap::new();
    for &layer in k {
        if layer == 0 || layer > n_layers {
            return Err(Error::LayerIndex { index: layer, n_layers });
        }
        // Sorting the column makes the result independent of language order.
        let mut col: Vec<f64> = r.iter().map(|row| row[layer - 1]).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation ratio"));
        }
        col.sort_by(f64::total_cmp);
        let n = col.len() as f64;
        let mu = col.iter().sum::<f64>() / n;
        let msd = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        out.insert(layer, msd);
    }
    Ok(out)
}

/// θ = mean MSD over `k`; selects layers with MSD strictly above θ.
pub fn select_layers(msd: &BTreeMap<usize, f64>, k: &BTreeSet<usize>) -> Result<LayerSelection> {
    select_layers_with(msd, k, None)
}

pub fn select_layers_with(
    msd: &BTreeMap<usize, f64>,
    k: &BTreeSet<usize>,
    max_layers: Option<usize>,
) -> Result<LayerSelection> {
    if k.is_empty() {
        return Err(Error::Empty("language-specific layer set K"));
    }
    let mut values = Vec::with_capacity(k.len());
    for layer in k {
        let v = msd.get(layer).ok_or_else(|| {
            Error::DimensionMismatch(format!("no MSD for layer {layer} of K"))
        })?;
        values.push((*layer, *v));
    }
    let theta = values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64;
    let mut selected: Vec<(usize, f64)> = values.iter().copied().filter(|&(_, v)| v > theta).collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection { theta });
    }
    if let Some(cap) = max_layers {
        selected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        selected.truncate(cap.max(1));
    }
    Ok(LayerSelection {
        boundary_layer: k.iter().next_back().map_or(1, |m| m + 1),
        k: k.clone(),
        msd: values.into_iter().collect(),
        theta,
        selected: selected.into_iter().map(|(l, _)| l).collect(),
    })
}

/// Boundary, then MSD over `K`, then θ-selection, from an aggregated stats report.
pub fn run_selection(stats: &StatsReport, opts: &SelectionOptions) -> Result<LayerSelection> {
    let boundary = find_boundary(stats.avg_overlap())?;
    let k = language_specific_layers(boundary);
    if k.is_empty() {
        return Err(Error::Empty("language-specific layer set K (overlap peaks at layer 1)"));
    }
    let (_, r) = stats.ratio_matrix(opts.include_english);
    let msd = msd_per_layer(&r, &k)?;
    let mut sel = select_layers_with(&msd, &k, opts.max_layers)?;
    sel.boundary_layer = boundary;
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_increasing_series_is_last() {
        assert_eq!(find_boundary(&[0.1, 0.2, 0.3, 0.4]).unwrap(), 4);
    }

    #[test]
    fn boundary_tie_goes_to_earliest() {
        assert_eq!(find_boundary(&[0.5, 0.9, 0.9]).unwrap(), 2);
    }

    #[test]
    fn boundary_needs_two_layers() {
        assert!(find_boundary(&[]).is_err());
        assert!(find_boundary(&[0.3]).is_err());
    }

    #[test]
    fn msd_of_equal_ratios_is_zero() {
        let r = vec![vec![0.3, 0.5], vec![0.3, 0.1]];
        let msd = msd_per_layer(&r, &[1].into()).unwrap();
        assert_eq!(msd[&1], 0.0);
    }

    #[test]
    fn msd_two_languages() {
        let r = vec![vec![0.2], vec![0.4]];
        let msd = msd_per_layer(&r, &[1].into()).unwrap();
        assert!((msd[&1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn msd_needs_two_languages() {
        assert!(matches!(
            msd_per_layer(&[vec![0.1]], &[1].into()),
            Err(Error::TooFewLanguages(1))
        ));
    }

    #[test]
    fn select_hand_example() {
        let msd: BTreeMap<usize, f64> = [(1, 4.0), (2, 2.0), (3, 2.0), (4, 2.0)].into();
        let k: BTreeSet<usize> = (1..=4).collect();
        let sel = select_layers(&msd, &k).unwrap();
        assert_eq!(sel.theta, 2.5);
        assert_eq!(sel.selected, [1].into());
        assert_eq!(sel.boundary_layer, 5);
    }

    #[test]
    fn constant_msd_has_empty_selection() {
        let msd: BTreeMap<usize, f64> = [(1, 0.3), (2, 0.3), (3, 0.3)].into();
        assert!(matches!(
            select_layers(&msd, &(1..=3).collect()),
            Err(Error::EmptySelection { .. })
        ));
    }

    #[test]
    fn empty_k_is_an_error() {
        assert!(matches!(
            select_layers(&BTreeMap::new(), &BTreeSet::new()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn cap_keeps_highest_msd() {
        let msd: BTreeMap<usize, f64> = [(1, 5.0), (2, 9.0), (3, 7.0), (4, 0.0), (5, 0.0)].into();
        let sel = select_layers_with(&msd, &(1..=5).collect(), Some(2)).unwrap();
        assert_eq!(sel.selected, [2, 3].into());
    }

    #[test]
    fn json_schema_keys() {
        let msd: BTreeMap<usize, f64> = [(1, 4.0), (2, 2.0)].into();
        let sel = select_layers(&msd, &(1..=2).collect()).unwrap();
        let v = serde_json::to_value(&sel).unwrap();
        assert_eq!(v["K"], serde_json::json!([1, 2]));
        assert_eq!(v["msd"]["1"], serde_json::json!(4.0));
        assert_eq!(v["selected"], serde_json::json!([1]));
        assert_eq!(v["theta"], serde_json::json!(3.0));
        assert_eq!(v["boundary_layer"], serde_json::json!(3));
    }
}
