use econvnext::arch::presets::{e_convnext_narrow, e_convnext_tiny, random_small};
use econvnext::arch::preset;
use econvnext::cost::{fold_bn_graph, model_cost_at};
use econvnext::net::Network;
use econvnext::ops::Mode;
use econvnext::{Dims, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::randn([n, 3, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A few train-mode passes so running statistics move away from their init.
fn warm(net: &mut Network, size: usize) {
    for s in 0..3 {
        net.forward(&input(4, size, 100 + s), Mode::Train).unwrap();
    }
}

#[test]
fn tiny_maps_an_image_to_1000_logits() {
    let net = Network::new(&e_convnext_tiny(), 0).unwrap();
    let y = net.infer(&Tensor::zeros([1, 3, 224, 224])).unwrap();
    assert_eq!(y.dims(), Dims::new(1, 1000, 1, 1));
    assert!(y.all_finite());
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let mut net = Network::new(&e_convnext_narrow(4, 64), 1).unwrap();
    warm(&mut net, 64);
    let x = input(3, 64, 7);
    let a = net.infer(&x).unwrap();
    let b = net.infer(&x).unwrap();
    assert_eq!(a.data(), b.data());
    let c = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.data(), c.data());
}

#[test]
fn doubled_batch_slices_match_single_runs() {
    let mut net = Network::new(&e_convnext_narrow(4, 64), 2).unwrap();
    warm(&mut net, 64);
    let x = input(2, 64, 8);
    let doubled = Tensor::stack_batch(&[&x, &input(2, 64, 9)]).unwrap();
    let a = net.infer(&x).unwrap();
    let b = net.infer(&doubled).unwrap().slice_batch(0, 2).unwrap();
    assert!(a.max_rel_diff(&b) <= 1e-6);
}

#[test]
fn concurrent_inference_matches_serial() {
    let mut net = Network::new(&e_convnext_narrow(4, 32), 3).unwrap();
    warm(&mut net, 32);
    let xs: Vec<Tensor> = (0..4).map(|s| input(1, 32, s)).collect();
    let serial: Vec<Tensor> = xs.iter().map(|x| net.infer(x).unwrap()).collect();
    let net = &net;
    let parallel: Vec<Tensor> = std::thread::scope(|s| {
        let hs: Vec<_> = xs.iter().map(|x| s.spawn(move || net.infer(x).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (a, b) in serial.iter().zip(&parallel) {
        assert!(a.max_rel_diff(b) <= 1e-6);
    }
}

#[test]
fn input_must_be_rgb_multiple_of_32() {
    let net = Network::new(&e_convnext_narrow(4, 64), 0).unwrap();
    assert!(net.infer(&Tensor::zeros([1, 3, 48, 48])).is_err());
    assert!(net.infer(&Tensor::zeros([1, 1, 64, 64])).is_err());
}

#[test]
fn folded_network_matches_and_matches_folded_cost() {
    let mut net = Network::new(&e_convnext_narrow(4, 64), 4).unwrap();
    warm(&mut net, 64);
    let folded = net.fold_bn().unwrap();
    let x = input(2, 64, 10);
    let a = net.infer(&x).unwrap();
    let b = folded.infer(&x).unwrap();
    assert!(a.max_rel_diff(&b) <= 1e-6, "{}", a.max_rel_diff(&b));
    let (g, _) = fold_bn_graph(&net.graph);
    let cost = model_cost_at(&g, g.input_dims(1), false).unwrap();
    assert_eq!(folded.param_count() as u64, cost.total_params);
    assert!(folded.param_count() < net.param_count());
}

#[test]
fn save_then_load_restores_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Network::new(&e_convnext_narrow(4, 32), 5).unwrap();
    warm(&mut net, 32);
    net.save(dir.path()).unwrap();
    let mut other = Network::new(&e_convnext_narrow(4, 32), 99).unwrap();
    let x = input(2, 32, 11);
    assert_ne!(other.infer(&x).unwrap().data(), net.infer(&x).unwrap().data());
    other.load(dir.path()).unwrap();
    assert_eq!(other.infer(&x).unwrap().data(), net.infer(&x).unwrap().data());
    assert_eq!(other.state(), net.state());
}

#[test]
fn loading_into_a_different_shape_fails() {
    let dir = tempfile::tempdir().unwrap();
    Network::new(&e_convnext_narrow(4, 32), 0).unwrap().save(dir.path()).unwrap();
    let mut wide = Network::new(&e_convnext_narrow(7, 32), 0).unwrap();
    assert!(wide.load(dir.path()).is_err());
}

#[test]
fn preset_networks_have_the_analytic_parameter_count() {
    for name in ["e_convnext_tiny", "convnext_tiny_ref", "csp_chmid"] {
        let cfg = preset(name).unwrap();
        let net = Network::new(&cfg, 0).unwrap();
        let cost = model_cost_at(&net.graph, net.graph.input_dims(1), false).unwrap();
        assert_eq!(net.param_count() as u64, cost.total_params, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_networks_run_and_count_parameters_analytically(seed in any::<u64>()) {
        let cfg = random_small(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut net = Network::new(&cfg, seed).unwrap();
        let [h, _] = cfg.input_size;
        let y = net.forward(&input(2, h, seed), Mode::Train).unwrap();
        prop_assert_eq!(y.dims(), Dims::new(2, cfg.num_classes, 1, 1));
        let g = net.backward(&Tensor::ones(y.dims())).unwrap();
        prop_assert_eq!(g.dims(), Dims::new(2, 3, h, h));
        let cost = model_cost_at(&net.graph, net.graph.input_dims(1), false).unwrap();
        prop_assert_eq!(net.param_count() as u64, cost.total_params);
    }
}
