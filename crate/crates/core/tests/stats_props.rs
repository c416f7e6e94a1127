mod common;

use std::collections::BTreeMap;

use plast::bitset::NeuronMask;
use plast::stats::{aggregate, overlap_ratio, StatsReport};
use plast::trace::TraceFile;
use plast::Error;
use proptest::prelude::*;

fn toy_traces() -> Vec<TraceFile> {
    let v = common::read_fixture("toy_traces.json");
    let d = v["d_inter"].as_u64().unwrap() as usize;
    let n_layers = v["n_layers"].as_u64().unwrap() as usize;
    v["masks"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(lang, samples)| {
            let masks: Vec<Vec<NeuronMask>> = samples
                .as_array()
                .unwrap()
                .iter()
                .map(|layers| {
                    layers
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|idx| {
                            NeuronMask::from_indices(
                                d,
                                idx.as_array().unwrap().iter().map(|i| i.as_u64().unwrap() as usize),
                            )
                        })
                        .collect()
                })
                .collect();
            TraceFile::from_masks(lang.clone(), n_layers, d, &masks).unwrap()
        })
        .collect()
}

#[test]
fn toy_fixture_matches_hand_table() {
    let report = aggregate(&toy_traces(), "en").unwrap();
    let exp = common::read_fixture("toy_stats_expected.json");
    for lang in &report.languages {
        let ratios = common::f64_vec(&exp["ratio"][&lang.language]);
        for (stat, want) in lang.layers.iter().zip(ratios) {
            assert_eq!(stat.ratio, want, "{} layer {}", lang.language, stat.layer);
        }
        let counts = exp["n_activated"][&lang.language].as_array().unwrap();
        for (stat, want) in lang.layers.iter().zip(counts) {
            assert_eq!(stat.n_activated as u64, want.as_u64().unwrap());
        }
    }
    for (lang, series) in &report.overlap.per_language {
        assert_eq!(series, &common::f64_vec(&exp["overlap"][lang]));
    }
    let avg = common::f64_vec(&exp["avg"]);
    for (a, b) in report.avg_overlap().iter().zip(avg) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn errors_are_explicit() {
    let traces = toy_traces();
    let no_en: Vec<_> = traces.iter().filter(|t| t.language != "en").cloned().collect();
    assert!(matches!(aggregate(&no_en, "en"), Err(Error::MissingEnglish(_))));
    assert!(matches!(aggregate(&[], "en"), Err(Error::Empty(_))));
    let mut wide = traces.clone();
    wide[1] = TraceFile::from_masks("x-l1", 4, 9, &[vec![NeuronMask::new(9); 4]]).unwrap();
    assert!(matches!(aggregate(&wide, "en"), Err(Error::DimensionMismatch(_))));
    let mut silent = traces;
    let en = silent.iter().position(|t| t.language == "en").unwrap();
    silent[en] = TraceFile::from_masks("en", 4, 8, &[vec![NeuronMask::new(8); 4]]).unwrap();
    assert!(matches!(aggregate(&silent, "en"), Err(Error::UndefinedOverlap(_))));
    assert!(matches!(
        overlap_ratio(&NeuronMask::full(4), &NeuronMask::new(4)),
        Err(Error::UndefinedOverlap(_))
    ));
}

#[test]
fn set_examples() {
    let a = NeuronMask::from_indices(8, [1, 2, 3]);
    let e = NeuronMask::from_indices(8, [2, 3, 4, 5]);
    assert_eq!(overlap_ratio(&a, &e).unwrap(), 0.5);
    assert_eq!(overlap_ratio(&e, &e).unwrap(), 1.0);
    assert_eq!(overlap_ratio(&NeuronMask::from_indices(8, [0, 7]), &e).unwrap(), 0.0);
}

/// Random per-language masks with English guaranteed to fire somewhere.
fn languages_strategy() -> impl Strategy<Value = (usize, usize, Vec<Vec<Vec<Vec<bool>>>>)> {
    (1usize..5, 1usize..90, 2usize..5, 1usize..5).prop_flat_map(|(n_layers, d, n_lang, n_samples)| {
        let mask = prop::collection::vec(any::<bool>(), d);
        let sample = prop::collection::vec(mask, n_layers);
        let lang = prop::collection::vec(sample, n_samples);
        (Just(n_layers), Just(d), prop::collection::vec(lang, n_lang))
    })
}

fn build(n_layers: usize, d: usize, langs: &[Vec<Vec<Vec<bool>>>]) -> Vec<TraceFile> {
    langs
        .iter()
        .enumerate()
        .map(|(i, samples)| {
            let masks: Vec<Vec<NeuronMask>> = samples
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|bits| {
                            let mut m = NeuronMask::from_indices(
                                d,
                                bits.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j),
                            );
                            if i == 0 {
                                m.insert(0);
                            }
                            m
                        })
                        .collect()
                })
                .collect();
            let tag = if i == 0 { "en".to_string() } else { format!("x-l{i}") };
            TraceFile::from_masks(tag, n_layers, d, &masks).unwrap()
        })
        .collect()
}

fn summary(r: &StatsReport) -> (Vec<(String, Vec<f64>)>, BTreeMap<String, Vec<f64>>, Vec<f64>) {
    let (names, m) = r.ratio_matrix(true);
    (names.into_iter().zip(m).collect(), r.overlap.per_language.clone(), r.overlap.avg.clone())
}

proptest! {
    #[test]
    fn bounds_and_average((n_layers, d, langs) in languages_strategy()) {
        let r = aggregate(&build(n_layers, d, &langs), "en").unwrap();
        for l in &r.languages {
            for s in &l.layers {
                prop_assert!((0.0..=1.0).contains(&s.ratio));
                prop_assert!(s.n_activated <= d);
                if let Some(o) = s.overlap {
                    prop_assert!((0.0..=1.0).contains(&o));
                }
            }
        }
        for i in 0..n_layers {
            let vals: Vec<f64> = r.overlap.per_language.values().map(|s| s[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert_eq!(r.overlap.avg[i], mean);
        }
    }

    #[test]
    fn english_copy_overlaps_fully((n_layers, d, langs) in languages_strategy()) {
        let mut traces = build(n_layers, d, &langs);
        let mut copy = traces[0].clone();
        copy.language = "x-copy".into();
        traces.push(copy);
        let r = aggregate(&traces, "en").unwrap();
        prop_assert!(r.overlap.per_language["x-copy"].iter().all(|&o| o == 1.0));
    }

    #[test]
    fn order_independent((n_layers, d, mut langs) in languages_strategy(), rot in 0usize..7) {
        let a = aggregate(&build(n_layers, d, &langs), "en").unwrap();
        // Permute samples within every language, and the language list itself.
        for l in langs.iter_mut() {
            let k = rot % l.len();
            l.rotate_left(k);
        }
        let mut traces = build(n_layers, d, &langs);
        let k = rot % traces.len();
        traces.rotate_left(k);
        let b = aggregate(&traces, "en").unwrap();
        prop_assert_eq!(summary(&a), summary(&b));
    }

    #[test]
    fn single_sample_ratio_is_exact((n_layers, d, langs) in languages_strategy()) {
        let one: Vec<_> = langs.iter().map(|l| vec![l[0].clone()]).collect();
        let traces = build(n_layers, d, &one);
        let r = aggregate(&traces, "en").unwrap();
        for t in &traces {
            let stats = r.language(&t.language).unwrap();
            for layer in 1..=n_layers {
                let m = t.mask(0, layer).unwrap();
                prop_assert_eq!(stats.layers[layer - 1].ratio, m.count() as f64 / d as f64);
            }
        }
    }

    #[test]
    fn adding_a_sample_never_lowers_overlap((n_layers, d, langs) in languages_strategy(), extra in any::<u64>()) {
        let base = build(n_layers, d, &langs);
        let a = aggregate(&base, "en").unwrap();
        let mut more = langs.clone();
        let sample: Vec<Vec<bool>> = (0..n_layers)
            .map(|l| (0..d).map(|j| (extra.rotate_left((l * 7 + j) as u32) & 1) == 1).collect())
            .collect();
        more[1].push(sample);
        let b = aggregate(&build(n_layers, d, &more), "en").unwrap();
        let tag = "x-l1";
        for i in 0..n_layers {
            prop_assert!(b.overlap.per_language[tag][i] >= a.overlap.per_language[tag][i]);
            prop_assert!(a.language(tag).unwrap().neurons[i].is_subset(&b.language(tag).unwrap().neurons[i]));
        }
    }
}
