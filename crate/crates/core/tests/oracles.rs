mod common;

use adaptermix_core::adapters::{MixtureOfAdapters, ResidualAdapter};
use adaptermix_core::evaluation::{cosine_similarity, mcd};
use adaptermix_core::model::{AdaptationStrategy, BackboneModel, ModelConfig, Teacher};
use adaptermix_core::rng::Rng;
use adaptermix_core::{ParamId, ParamStore, Session, Tensor};
use common::*;
use proptest::prelude::*;

fn random_mixture(seed: u64, d: usize, r: usize, n_adapters: usize, capacity: f64) -> (ParamStore, MixtureOfAdapters) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let moa = MixtureOfAdapters::init(&mut store, "moa", d, r, n_adapters, capacity, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.7);
    (store, moa)
}

fn run_moa(store: &ParamStore, moa: &MixtureOfAdapters, h: &Tensor) -> Vec<f64> {
    let mut s = Session::inference(store);
    let hv = s.graph_mut().constant(h.clone());
    let out = moa.forward(&mut s, hv).unwrap();
    s.graph().value(out).data().to_vec()
}

#[test]
fn moa_matches_one_hot_dispatch() {
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        for n in 0..=5 {
            for big_n in 1..=3 {
                for &c in &[0.5, 1.0, 2.0] {
                    let (store, moa) = random_mixture(1000 + trial, 6, 3, big_n, c);
                    let mut rng = Rng::new(trial * 31 + n as u64);
                    let h = random_tensor(&mut rng, &[n, 6], 1.0);
                    let got = run_moa(&store, &moa, &h);
                    let want = flatten(&dense_moa(&store, &moa, &to_mat(&h)));
                    worst = worst.max(max_abs_diff(&got, &want));
                }
            }
        }
    }
    assert!(worst <= 1e-10, "max abs deviation {worst:e}");
}

#[test]
fn single_adapter_mixture_is_residual_adapter() {
    for trial in 0..20u64 {
        let (store, moa) = random_mixture(50 + trial, 5, 2, 1, 1.0);
        let mut rng = Rng::new(trial);
        let h = random_tensor(&mut rng, &[1 + trial as usize % 6, 5], 1.5);
        let got = run_moa(&store, &moa, &h);

        let mut s = Session::inference(&store);
        let hv = s.graph_mut().constant(h.clone());
        let plain = moa.adapters[0].forward(&mut s, hv).unwrap();
        let plain = s.graph().value(plain).data().to_vec();

        // single-adapter routing gates are exactly one
        assert_eq!(got, plain);
        let oracle = flatten(&residual_adapter(&store, &moa.adapters[0], &to_mat(&h)));
        assert!(max_abs_diff(&got, &oracle) <= 1e-12);
    }
}

#[test]
fn adapter_core_gradients() {
    let mut rng = Rng::new(9);
    let mut store = ParamStore::new();
    let a = ResidualAdapter::init(&mut store, "a", 6, 3, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let h = random_tensor(&mut rng, &[4, 6], 1.0);
    let target = random_tensor(&mut rng, &[4, 6], 1.0);
    let err = store_gradcheck(&store, &a.param_ids(), 1e-5, 64, 1e-8, |s| {
        let hv = s.graph_mut().constant(h.clone());
        let y = a.forward(s, hv).unwrap();
        let t = s.graph_mut().constant(target.clone());
        s.graph_mut().mse_loss(y, t).unwrap()
    });
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn moa_gradients_with_fixed_routing() {
    for (seed, n, big_n, c) in [(1u64, 5usize, 3usize, 1.0), (2, 4, 2, 1.5), (3, 3, 1, 1.0)] {
        let (store, moa) = random_mixture(seed, 6, 3, big_n, c);
        let mut rng = Rng::new(seed + 100);
        let h = random_tensor(&mut rng, &[n, 6], 1.0);
        let target = random_tensor(&mut rng, &[n, 6], 1.0);
        let plan = moa.route(&store, &h).unwrap();
        let err = store_gradcheck(&store, &moa.param_ids(), 1e-5, 64, 1e-8, |s| {
            let hv = s.graph_mut().constant(h.clone());
            let y = moa.forward_routed(s, hv, &plan.indices).unwrap();
            let t = s.graph_mut().constant(target.clone());
            s.graph_mut().mse_loss(y, t).unwrap()
        });
        assert!(err < 1e-4, "seed {seed}: worst relative error {err:e}");
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        vocab_size: 6,
        n_speakers: 3,
        mel_dim: 4,
        max_duration: 4,
    }
}

#[test]
fn full_model_loss_gradients() {
    let mut model = BackboneModel::new(tiny_config(), 5).unwrap();
    model
        .insert_adapters(&AdaptationStrategy::adapter_mix(4, 2, 2, 1.0), 6)
        .unwrap();
    let mut rng = Rng::new(77);
    let adapter_ids: Vec<ParamId> = model
        .store()
        .iter()
        .filter(|(_, name, _)| name.contains("moa") || name.contains("adapter"))
        .map(|(id, _, _)| id)
        .collect();
    for &id in &adapter_ids {
        let n = model.store().get(id).numel();
        let gain = model.store().name(id).ends_with("gain");
        let data: Vec<f64> = (0..n)
            .map(|_| if gain { 1.0 } else { 0.0 } + 0.5 * rng.normal())
            .collect();
        model.store_mut().set_data(id, &data).unwrap();
    }
    let tokens = [2usize, 5];
    let durations = [2usize, 1];
    let pitch = [0.3, -0.4];
    let target = random_tensor(&mut rng, &[3, 4], 1.0);
    let ids: Vec<ParamId> = model.store().ids().collect();
    // attention key biases have identically zero gradient; central
    // differences there are pure roundoff (~1e-11), hence the 1e-6 floor
    let err = store_gradcheck(model.store(), &ids, 1e-5, 16, 1e-6, |s| {
        let teacher = Teacher {
            durations: &durations,
            pitch: &pitch,
        };
        model.loss(s, &tokens, 1, teacher, &target).unwrap()
    });
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn metric_oracles_on_random_pairs() {
    let mut rng = Rng::new(4);
    for i in 0..100 {
        let na = 1 + i % 7;
        let nb = 1 + (i * 3) % 5;
        let a = random_tensor(&mut rng, &[na, 5], 2.0);
        let b = random_tensor(&mut rng, &[nb, 5], 2.0);
        let want = mcd_oracle(&to_mat(&a), &to_mat(&b));
        assert!((mcd(&a, &b).unwrap() - want).abs() <= 1e-9);

        let u = random_tensor(&mut rng, &[8], 1.0);
        let v = random_tensor(&mut rng, &[8], 1.0);
        let want = cosine_oracle(u.data(), v.data());
        assert!((cosine_similarity(u.data(), v.data()).unwrap() - want).abs() <= 1e-9);
    }
}

fn frames(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn mcd_is_a_symmetric_nonnegative_distance(a in frames(4, 3), b in frames(4, 3)) {
        let ab = mcd(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mcd(&b, &a).unwrap());
        prop_assert_eq!(mcd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mcd_frame_term_is_linear_in_the_difference(a in frames(1, 4), b in frames(1, 4)) {
        let doubled: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| y + 2.0 * (x - y)).collect();
        let doubled = Tensor::new(vec![1, 4], doubled).unwrap();
        let once = mcd(&a, &b).unwrap();
        prop_assert!((mcd(&doubled, &b).unwrap() - 2.0 * once).abs() <= 1e-9 * once.max(1.0));
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        k in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0));
        let scaled: Vec<f64> = a.iter().map(|x| k * x).collect();
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - c).abs() <= 1e-12);
    }

    #[test]
    fn routing_gates_come_from_affinities(seed in 0u64..500, n in 1usize..7, big_n in 1usize..4) {
        let (store, moa) = random_mixture(seed, 4, 2, big_n, 1.0);
        let h = random_tensor(&mut Rng::new(seed ^ 0xabc), &[n, 4], 1.0);
        let plan = moa.route(&store, &h).unwrap();
        for i in 0..big_n {
            prop_assert_eq!(plan.indices[i].len(), plan.k);
            for (j, &t) in plan.indices[i].iter().enumerate() {
                prop_assert_eq!(plan.gates[i][j], plan.affinity.at(t, i));
            }
        }
        for t in 0..n {
            let s: f64 = plan.affinity.row(t).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
