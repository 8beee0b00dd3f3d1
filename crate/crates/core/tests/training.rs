use std::collections::BTreeMap;

use econvnext::arch::presets::e_convnext_narrow;
use econvnext::etf::{self, Dtype};
use econvnext::net::Network;
use econvnext::train::*;
use econvnext::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(samples: usize, size: usize) -> (tempfile::TempDir, DatasetHandle) {
    let dir = tempfile::tempdir().unwrap();
    generate_blobs(dir.path(), samples, 4, size, 3).unwrap();
    let ds = DatasetHandle::load(dir.path()).unwrap();
    (dir, ds)
}

fn small_cfg() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::desk() }
}

fn params(net: &Network) -> BTreeMap<String, Vec<f64>> {
    let mut m = BTreeMap::new();
    net.visit_params(&mut |n, t| {
        m.insert(n.to_string(), t.data().to_vec());
    });
    m
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (_d, ds) = dataset(24, 32);
    let run = || {
        let mut net = Network::new(&e_convnext_narrow(4, 32), 11).unwrap();
        let h = train(&mut net, &ds, &small_cfg()).unwrap();
        (h, params(&net))
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(h1.to_csv(), h2.to_csv());
    assert_eq!(p1, p2);
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss_unchanged() {
    let (_d, ds) = dataset(20, 32);
    let mut net = Network::new(&e_convnext_narrow(4, 32), 1).unwrap();
    let before = params(&net);
    // one batch per epoch keeps the batch statistics, and so the loss, fixed
    let cfg = TrainConfig { base_lr: 0.0, epochs: 3, batch_size: 32, ..TrainConfig::desk() };
    let h = train(&mut net, &ds, &cfg).unwrap();
    assert_eq!(params(&net), before);
    let l0 = h.epochs[0].train_loss;
    assert!(h.epochs.iter().all(|e| (e.train_loss - l0).abs() <= 1e-12 * l0));
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let (_d, ds) = dataset(12, 32);
    let mut net = Network::new(&e_convnext_narrow(4, 32), 0).unwrap();
    net.visit_params_mut(&mut |n, t| {
        if n == "head.fc.weight" {
            t.data_mut()[0] = f64::NAN;
        }
    });
    match train(&mut net, &ds, &small_cfg()) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 0")),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn training_rejects_bad_configs() {
    let (_d, ds) = dataset(8, 32);
    let mut net = Network::new(&e_convnext_narrow(4, 32), 0).unwrap();
    for cfg in [
        TrainConfig { label_smoothing: 1.0, ..small_cfg() },
        TrainConfig { batch_size: 1, ..small_cfg() },
        TrainConfig { base_lr: -1.0, ..small_cfg() },
    ] {
        assert!(train(&mut net, &ds, &cfg).is_err());
    }
    let mut two_class = Network::new(&e_convnext_narrow(2, 32), 0).unwrap();
    assert!(train(&mut two_class, &ds, &small_cfg()).is_err());
}

#[test]
fn default_recipe_and_batch_scaling() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.base_lr, 1.25e-4);
    assert_eq!((cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.weight_decay), (0.9, 0.999, 0.05));
    assert_eq!(cfg.label_smoothing, 0.1);
    assert_eq!(cfg.lr_for_batch(), 1.25e-4);
    let doubled = TrainConfig { batch_size: 256, ..cfg.clone() };
    assert_eq!(doubled.lr_for_batch(), 2.5e-4);
}

#[test]
fn uniform_logits_give_log_k_for_any_smoothing() {
    for (k, s) in [(4, 0.1), (4, 0.0), (1000, 0.1), (1000, 0.5)] {
        let logits = Tensor::zeros([2, k, 1, 1]);
        let (loss, _) = smoothed_cross_entropy(&logits, &[0, k - 1], s).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn dataset_is_reproducible_and_labels_in_range() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_blobs(a.path(), 10, 4, 32, 9).unwrap();
    generate_blobs(b.path(), 10, 4, 32, 9).unwrap();
    let (da, db) = (DatasetHandle::load(a.path()).unwrap(), DatasetHandle::load(b.path()).unwrap());
    assert_eq!(da.labels, db.labels);
    assert!(da.samples.iter().zip(&db.samples).all(|(x, y)| x == y));
    assert!(da.labels.iter().all(|&l| l < da.classes));
    let manifest = std::fs::read_to_string(a.path().join(data::MANIFEST)).unwrap();
    let entries: Vec<data::ManifestEntry> = serde_json::from_str(&manifest).unwrap();
    assert_eq!(entries.len(), 10);
}

#[test]
fn history_csv_has_expected_header() {
    let (_d, ds) = dataset(12, 32);
    let mut net = Network::new(&e_convnext_narrow(4, 32), 0).unwrap();
    let csv = train(&mut net, &ds, &small_cfg()).unwrap().to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_loss,train_acc,val_acc"));
    assert_eq!(lines.count(), 2);
}

proptest! {
    #[test]
    fn schedule_endpoints_and_monotone_decay(base in 1e-5f64..1.0, warmup in 1usize..50, decay in 2usize..500) {
        let s = CosineSchedule { base, warmup, total: warmup + decay };
        prop_assert!((s.lr(0) - base / warmup as f64).abs() <= 1e-15 * base);
        prop_assert!((s.lr(warmup - 1) - base).abs() <= 1e-15 * base);
        prop_assert!(s.lr(s.total - 1) <= 1e-3 * base);
        for step in warmup..s.total - 1 {
            prop_assert!(s.lr(step + 1) <= s.lr(step));
        }
    }

    #[test]
    fn decoupled_decay_with_zero_gradient(lr in 1e-5f64..0.1, wd in 0.0f64..0.2, w in -5.0f64..5.0) {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..Default::default() });
        let mut p = [w];
        opt.update(lr, std::iter::once((&mut p[..], &[0.0][..])));
        prop_assert_eq!(p[0], w * (1.0 - lr * wd));
    }

    #[test]
    fn etf_round_trips(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let t = Tensor::randn([n, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut buf = Vec::new();
        etf::write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        prop_assert_eq!(&buf[..4], b"ETF1");
        prop_assert_eq!(buf.len(), 4 + 4 + 16 + 1 + 8 * t.numel());
        let (back, dtype) = etf::read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(back, t.clone());
        let mut buf32 = Vec::new();
        etf::write_tensor(&mut buf32, &t, Dtype::F32).unwrap();
        let (back32, _) = etf::read_tensor(&buf32[..]).unwrap();
        prop_assert!(back32.max_abs_diff(&t) <= 1e-6 * 8.0);
    }
}

#[test]
fn optimizer_descends_a_quadratic_bowl() {
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut w = vec![3.0, -2.0, 0.5];
    let loss = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
    let mut prev = loss(&w);
    for _ in 0..100 {
        let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        opt.update(0.01, std::iter::once((&mut w[..], &g[..])));
        let l = loss(&w);
        assert!(l < prev);
        prev = l;
    }
}
