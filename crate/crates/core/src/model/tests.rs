use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::activations::{sigmoid_exact, tanh_exact};
use crate::opcount;

fn arch(layers: usize, l: usize, c: usize, n: usize) -> Architecture {
    Architecture::new(layers, l, c, n, 3).unwrap()
}

/// Random model with non-trivial biases and normalization.
fn random_model(a: Architecture, seed: u64) -> GruMlp<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GruMlp::<f64>::zeros(a);
    for t in m.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    m.norm_mean = (0..a.input_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    m.norm_inv_std = (0..a.input_dim()).map(|_| rng.random_range(0.5..2.0)).collect();
    m
}

fn random_window(a: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..a.sequence_length() * a.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Scalar-loop evaluation of the GRU-MLP equations, written without any of
/// the vectorized helpers.
fn oracle_forward(m: &GruMlp<f64>, window: &[f64]) -> Vec<f64> {
    let a = m.arch;
    let l = a.hidden_size();
    let d = a.input_dim();
    let mut h = vec![vec![0.0; l]; a.num_gru_layers()];
    for t in 0..a.sequence_length() {
        let mut x: Vec<f64> = (0..d).map(|k| (window[t * d + k] - m.norm_mean[k]) * m.norm_inv_std[k]).collect();
        for (k, g) in m.params.layers.iter().enumerate() {
            let inp = x.len();
            let mv = |w: &Matrix<f64>, v: &[f64], i: usize| -> f64 {
                let mut s = 0.0;
                for j in 0..v.len() {
                    s += w.data()[i * v.len() + j] * v[j];
                }
                s
            };
            let mut hn = vec![0.0; l];
            for i in 0..l {
                let r = sigmoid_exact(mv(&g.w_ar, &x, i) + g.b_ar[i] + mv(&g.w_hr, &h[k], i) + g.b_hr[i]);
                let z = sigmoid_exact(mv(&g.w_az, &x, i) + g.b_az[i] + mv(&g.w_hz, &h[k], i) + g.b_hz[i]);
                let n = tanh_exact(mv(&g.w_an, &x, i) + g.b_an[i] + r * (mv(&g.w_hn, &h[k], i) + g.b_hn[i]));
                hn[i] = (1.0 - z) * n + z * h[k][i];
            }
            assert_eq!(inp, g.input_size());
            h[k] = hn.clone();
            x = hn;
        }
    }
    let top = h.last().unwrap();
    let mlp = &m.params.mlp;
    let hidden: Vec<f64> = (0..a.mlp_hidden())
        .map(|i| {
            let s: f64 = (0..l).map(|j| mlp.w1.data()[i * l + j] * top[j]).sum::<f64>() + mlp.b1[i];
            s.max(0.0)
        })
        .collect();
    (0..a.num_classes())
        .map(|i| (0..hidden.len()).map(|j| mlp.w2.data()[i * hidden.len() + j] * hidden[j]).sum::<f64>() + mlp.b2[i])
        .collect()
}

#[test]
fn normalize_examples() {
    let mut m = GruMlp::<f64>::zeros(arch(1, 2, 2, 1));
    let mut out = vec![0.0; 3];
    m.norm_mean = vec![1.0, 1.0, 1.0];
    m.norm_inv_std = vec![0.5, 0.5, 0.5];
    m.normalize(&[2.0, 4.0, 6.0], &mut out);
    assert_eq!(out, vec![0.5, 1.5, 2.5]);
    m.normalize(&[1.0, 1.0, 1.0], &mut out);
    assert_eq!(out, vec![0.0; 3]);
    m.norm_mean = vec![0.0; 3];
    m.norm_inv_std = vec![1.0; 3];
    m.normalize(&[0.3, -7.0, 2.5], &mut out);
    assert_eq!(out, vec![0.3, -7.0, 2.5]);
}

#[test]
fn zero_cell_halves_state() {
    let g = GruLayer::<f64>::zeros(2, 3);
    let mut s = StepScratch::new(2);
    let mut h = vec![0.0; 2];
    g.step(&[0.4, -1.0, 3.0], &[0.8, -0.6], Activation::Exact, &mut s, &mut h);
    assert_eq!(s.r, vec![0.5, 0.5]);
    assert_eq!(s.z, vec![0.5, 0.5]);
    assert_eq!(s.n, vec![0.0, 0.0]);
    assert_eq!(h, vec![0.4, -0.3]);
    g.step(&[1.0, 2.0, 3.0], &[0.0, 0.0], Activation::Exact, &mut s, &mut h);
    assert_eq!(h, vec![0.0, 0.0]);
}

#[test]
fn zero_model_outputs_b2() {
    let a = arch(2, 4, 3, 5);
    let mut m = GruMlp::<f32>::zeros(a);
    m.params.mlp.b2 = vec![0.1, -0.4, 0.25];
    let w: Vec<f32> = random_window(&a, 1).iter().map(|&v| v as f32).collect();
    assert_eq!(m.forward(&w).unwrap(), vec![0.1, -0.4, 0.25]);
    assert_eq!(m.predict(&w).unwrap(), 2);
}

#[test]
fn single_step_is_cell_plus_head() {
    let a = arch(1, 3, 2, 1);
    let m = random_model(a, 3);
    let w = random_window(&a, 4);
    let mut x = vec![0.0; 3];
    m.normalize(&w, &mut x);
    let mut h = vec![0.0; 3];
    let mut s = StepScratch::new(3);
    m.params.layers[0].step(&x, &[0.0; 3], Activation::Exact, &mut s, &mut h);
    let mut hidden = vec![0.0; a.mlp_hidden()];
    assert_eq!(m.forward(&w).unwrap(), m.params.mlp.forward(&h, &mut hidden));
}

#[test]
fn forward_matches_scalar_oracle() {
    for (seed, layers) in [(10u64, 1usize), (11, 2), (12, 1), (13, 2)] {
        let a = arch(layers, 3, 2, 4);
        let m = random_model(a, seed);
        let w = random_window(&a, seed + 100);
        let got = m.forward(&w).unwrap();
        let want = oracle_forward(&m, &w);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0), "{got:?} vs {want:?}");
        }
        assert_eq!(m.predict(&w).unwrap(), argmax(&want));
    }
}

#[test]
fn predict_tie_and_order() {
    assert_eq!(argmax(&[0.1, 0.9, 0.2]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[-1.0f32]), 0);
}

#[test]
fn window_length_checked() {
    let m = GruMlp::<f32>::zeros(arch(1, 2, 2, 4));
    assert!(matches!(m.forward(&[0.0; 11]), Err(Error::Shape(_))));
}

#[test]
fn float_forward_mult_count_matches_formula() {
    for (layers, l, n) in [(1, 32, 256), (2, 8, 16), (1, 5, 3)] {
        let a = arch(layers, l, 3, n);
        let m = GruMlp::<f32>::init(a, 7);
        let w = vec![0.25f32; n * 3];
        let (_, counts) = opcount::measure(|| m.forward(&w).unwrap());
        assert_eq!(counts.float_mults(), a.count_mults());
        assert_eq!(counts.int_mults(), 0);
    }
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = arch(2, 16, 3, 8);
    let m1 = GruMlp::<f32>::init(a, 42);
    let m2 = GruMlp::<f32>::init(a, 42);
    let m3 = GruMlp::<f32>::init(a, 43);
    assert_eq!(m1, m2);
    assert_ne!(m1, m3);
    let bound = 1.0 / 4.0;
    let names = Params::<f32>::tensor_names(2);
    for (name, t) in names.iter().zip(m1.params.tensors()) {
        if name.contains(".b") {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
        } else {
            assert!(t.iter().all(|&v| v.abs() < bound), "{name}");
        }
    }
}

#[test]
fn json_round_trip_is_lossless() {
    let a = arch(2, 5, 3, 6);
    let mut m = random_model(a, 5).cast::<f32>();
    m.metadata.insert("training".into(), "kd".into());
    let text = m.to_json_string(TensorEncoding::Base64F32le).unwrap();
    assert_eq!(GruMlpModel::from_json_str(&text).unwrap(), m);
    let nested = m.to_json_string(TensorEncoding::Nested).unwrap();
    assert!(nested.contains("\"format_version\": 1"));
    assert_eq!(GruMlpModel::from_json_str(&nested).unwrap(), m);
}

#[test]
fn json_rejects_wrong_shapes() {
    let a = arch(1, 3, 2, 2);
    let m = GruMlp::<f32>::init(a, 1);
    let mut doc = m.to_document(TensorEncoding::Nested);
    doc.tensors.insert("mlp.b2".into(), serde_json::json!([1.0, 2.0, 3.0]));
    assert!(GruMlpModel::from_document(&doc).is_err());
    let mut doc = m.to_document(TensorEncoding::Base64F32le);
    doc.tensors.remove("gru0.w_hn");
    assert!(GruMlpModel::from_document(&doc).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hidden_state_stays_in_unit_interval(seed in any::<u64>(), layers in 1usize..=2) {
        let a = arch(layers, 4, 3, 24);
        let mut m = random_model(a, seed);
        // stretch the weights to push gates towards saturation
        for t in m.params.tensors_mut() {
            for v in t.iter_mut() {
                *v *= 3.0;
            }
        }
        let w = random_window(&a, seed ^ 0x55);
        let traj = m.hidden_trajectory(&w, Activation::Exact).unwrap();
        // f32 tanh rounds to exactly +-1 once saturated
        for h in traj {
            for v in h {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let a = arch(1, 4, 3, 8);
        let m = random_model(a, seed).cast::<f32>();
        let w: Vec<f32> = random_window(&a, seed).iter().map(|&v| v as f32).collect();
        let x = m.forward(&w).unwrap();
        let y = m.forward(&w).unwrap();
        prop_assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn oracle_equivalence_random(seed in any::<u64>(), n in 1usize..=8, l in 1usize..=4, layers in 1usize..=2) {
        let a = arch(layers, l, 3, n);
        let m = random_model(a, seed);
        let w = random_window(&a, seed.wrapping_add(1));
        let got = m.forward(&w).unwrap();
        let want = oracle_forward(&m, &w);
        for (g, e) in got.iter().zip(&want) {
            prop_assert!((g - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    #[test]
    fn argmax_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..6), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        // exact shifts can merge near-ties; only check well-separated maxima
        let best = argmax(&v);
        let margin = v.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, x)| v[best] - x).fold(f64::INFINITY, f64::min);
        if margin > 1e-9 {
            prop_assert_eq!(argmax(&shifted), best);
        }
    }
}
