mod common;

use plast::model::{ModelConfig, ToyLvlm};
use plast::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(model: &mut ToyLvlm, id: plast::ParamId, rows: &[Vec<f64>]) {
    model.params_mut().get_mut(id).value = Tensor::from_rows(rows);
}

fn tiny() -> ToyLvlm {
    ToyLvlm::new(ModelConfig {
        n_layers: 2,
        d_model: 2,
        d_inter: 3,
        n_heads: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_gate_weights_give_zero_output() {
    let mut model = tiny();
    let layer = model.layer(1).unwrap().clone();
    set(&mut model, layer.ffn_gate, &[vec![0.0; 3], vec![0.0; 3]]);
    let h = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]);
    let (out, _) = model.ffn_forward(1, &h, false).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hand_worked_example() {
    let mut model = tiny();
    let layer = model.layer(2).unwrap().clone();
    set(&mut model, layer.ffn_gate, &[vec![0.5, -1.0, 2.0], vec![0.25, 0.5, -1.0]]);
    set(&mut model, layer.ffn_up, &[vec![1.0, 2.0, -1.0], vec![0.0, 1.0, 3.0]]);
    set(&mut model, layer.ffn_down, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]);
    let h = Tensor::from_rows(&[vec![1.0, -2.0]]);
    let (out, gate) = model.ffn_forward(2, &h, true).unwrap();
    // gate = [0, -2, 4], up = [1, 0, -7]; only neuron 2 contributes: silu(4)·(-7).
    assert_eq!(gate.unwrap().data(), &[0.0, -2.0, 4.0]);
    let expected = [-54.992772242122875, 27.496386121061438];
    for (a, b) in out.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn random_configs_match_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let d_model = [2, 4, 6, 8][rng.gen_range(0..4)];
        let d_inter = rng.gen_range(1..40);
        let mut model = ToyLvlm::new(ModelConfig {
            n_layers: 2,
            d_model,
            d_inter,
            n_heads: 2,
            init_std: 0.5,
            seed: rng.gen(),
            ..ModelConfig::default()
        })
        .unwrap();
        let index = rng.gen_range(1..=2);
        let layer = model.layer(index).unwrap().clone();
        let wg = Tensor::randn(&[d_model, d_inter], 1.0, &mut rng);
        model.params_mut().get_mut(layer.ffn_gate).value = wg;
        let h = Tensor::randn(&[rng.gen_range(1..6), d_model], 1.5, &mut rng);
        let (out, gate) = model.ffn_forward(index, &h, true).unwrap();
        let p = model.params();
        let rows = |id| common::rows_of(&p.get(id).value);
        let oracle = common::naive_ffn(
            &common::rows_of(&h),
            &rows(layer.ffn_gate),
            &rows(layer.ffn_up),
            &rows(layer.ffn_down),
        );
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.get(i, j) - v).abs() < 1e-12);
            }
        }
        let g = common::naive_matmul(&common::rows_of(&h), &rows(layer.ffn_gate));
        assert_eq!(common::rows_of(&gate.unwrap()), g);
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let model = tiny();
    assert!(model.ffn_forward(1, &Tensor::zeros(&[1, 3]), false).is_err());
    assert!(model.ffn_forward(3, &Tensor::zeros(&[1, 2]), false).is_err());
}
