//! Pipeline contracts: freeze semantics, divergence handling, fingerprint
//! rejection, dataset simulation invariants.

use bitmend_core::pipeline::{
    apply_checkpoint, build_cfc, build_dac, load_checkpoint, simulate_dataset, train_cfc,
    train_dac, RunConfig,
};
use bitmend_core::videodata::CorruptionKind;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.clips = 2;
    c.data.frames_per_clip = 6;
    c.data.n_local = 3;
    c.data.n_nonlocal = 2;
    c.model.channels = vec![8, 16, 32];
    c.model.content_channels = vec![8, 16, 32];
    c.model.token_dim = 32;
    c.model.global_dim = 16;
    c.model.decoder_dim = 16;
    c.model.cfc_d_model = 16;
    c.model.adapt_dim = 8;
    c.model.enhance_dim = 8;
    c.model.n_prompts = 4;
    c.model.cfc_n_prompts = 4;
    c.train_dac.steps = 4;
    c.train_dac.batch_clips = 1;
    c.train_dac.log_every = 0;
    c.train_cfc.steps = 4;
    c.train_cfc.batch_clips = 1;
    c
}

#[test]
fn frozen_recovery_head_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.train_cfc.freeze_recovery = true;
    // a 4-step detector keeps its logits near the corruption prior
    // (sigmoid ~0.25); thresholding below that guarantees nonempty masks,
    // so the completion stack sees real gradients
    config.model.mask_threshold = 0.2;
    let dataset = simulate_dataset(&config, 1, &dir.path().join("d")).unwrap();
    let dac = train_dac(&config, &dataset, 1, &dir.path().join("r"), None).unwrap();

    // snapshot the freshly initialized recovery parameters
    let (fresh_store, _) = build_cfc(&config, 1);
    let before: Vec<_> = fresh_store
        .iter()
        .filter(|(_, name, _)| name.starts_with("cfc.recovery"))
        .map(|(_, name, v)| (name.to_string(), v.clone()))
        .collect();
    assert!(!before.is_empty());

    let cfc = train_cfc(&config, &dataset, &dac.checkpoint, 1, &dir.path().join("r"), None).unwrap();
    let ckpt = load_checkpoint(&cfc.checkpoint).unwrap();
    for (name, value) in &before {
        let (_, stored) = ckpt
            .params
            .iter()
            .find(|(n, _)| n == name)
            .expect("recovery param in checkpoint");
        assert_eq!(stored, value, "{name} changed while frozen");
    }

    // unfrozen run must move them
    let mut cfg2 = config.clone();
    cfg2.train_cfc.freeze_recovery = false;
    let cfc2 = train_cfc(&cfg2, &dataset, &dac.checkpoint, 1, &dir.path().join("r2"), None).unwrap();
    let ckpt2 = load_checkpoint(&cfc2.checkpoint).unwrap();
    let mut any_moved = false;
    for (name, value) in &before {
        let (_, stored) = ckpt2.params.iter().find(|(n, _)| n == name).unwrap();
        if stored != value {
            any_moved = true;
        }
    }
    assert!(any_moved, "unfrozen recovery head never moved");
}

#[test]
fn fingerprint_mismatch_rejected_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let dataset = simulate_dataset(&config, 2, &dir.path().join("d")).unwrap();
    let out = train_dac(&config, &dataset, 2, &dir.path().join("r"), None).unwrap();

    let mut other = config.clone();
    other.model.n_experts = 3; // structural change
    let err = train_dac(&other, &dataset, 2, &dir.path().join("r2"), Some(&out.checkpoint));
    match err {
        Err(bitmend_core::Error::FingerprintMismatch { .. }) => {}
        other => panic!("expected fingerprint mismatch, got {other:?}"),
    }

    // stage tag mismatch: feeding the dac checkpoint to a cfc store
    let (mut cfc_store, _) = build_cfc(&config, 2);
    let ckpt = load_checkpoint(&out.checkpoint).unwrap();
    assert!(apply_checkpoint(&ckpt, &mut cfc_store, config.fingerprint(), "cfc").is_err());
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.train_dac.lr = 1e18; // guaranteed blow-up
    config.train_dac.warmup_steps = 0;
    config.train_dac.grad_clip = 0.0;
    config.train_dac.steps = 30;
    let dataset = simulate_dataset(&config, 3, &dir.path().join("d")).unwrap();
    let result = train_dac(&config, &dataset, 3, &dir.path().join("r"), None);
    match result {
        Err(bitmend_core::Error::Diverged(msg)) => {
            assert!(dir.path().join("r/diagnostics.txt").exists(), "{msg}");
        }
        Ok(_) => panic!("training should have diverged"),
        Err(other) => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn all_four_corruption_kinds_flow_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.data.kinds = vec![
        CorruptionKind::ColorStripe,
        CorruptionKind::BlockShift,
        CorruptionKind::FreezePropagate,
        CorruptionKind::TextureNoise,
    ];
    config.train_dac.steps = 2;
    let dataset = simulate_dataset(&config, 4, &dir.path().join("d")).unwrap();
    let out = train_dac(&config, &dataset, 4, &dir.path().join("r"), None).unwrap();
    assert_eq!(out.loss_curve.len(), 2);
    assert!(out.loss_curve.iter().all(|v| v.is_finite()));
}

#[test]
fn dac_cache_makes_stage2_masks_consistent() {
    // two cfc runs from the same dac checkpoint produce identical curves
    // (the cache is an optimization, not a semantic change)
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let dataset = simulate_dataset(&config, 5, &dir.path().join("d")).unwrap();
    let dac = train_dac(&config, &dataset, 5, &dir.path().join("r"), None).unwrap();
    let a = train_cfc(&config, &dataset, &dac.checkpoint, 5, &dir.path().join("a"), None).unwrap();
    let b = train_cfc(&config, &dataset, &dac.checkpoint, 5, &dir.path().join("b"), None).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn build_models_are_structurally_stable() {
    let config = tiny_config();
    let (store_a, _) = build_dac(&config, 9);
    let (store_b, _) = build_dac(&config, 9);
    assert_eq!(store_a.len(), store_b.len());
    for ((_, name_a, val_a), (_, name_b, val_b)) in store_a.iter().zip(store_b.iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(val_a, val_b);
    }
    // different seed: same structure, different values
    let (store_c, _) = build_dac(&config, 10);
    assert_eq!(store_a.len(), store_c.len());
    let same = store_a
        .iter()
        .zip(store_c.iter())
        .all(|((_, _, a), (_, _, c))| a == c);
    assert!(!same);
}

#[test]
fn shipped_configs_parse_and_match_presets() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let desk = RunConfig::load(&root.join("configs/desk.toml")).unwrap();
    assert_eq!(desk, RunConfig::desk());
    let paper = RunConfig::load(&root.join("configs/paper.toml")).unwrap();
    assert_eq!(paper.train_dac.lr, 5e-5);
    assert_eq!(paper.train_dac.optimizer, "adamw");
    assert_eq!(paper.train_cfc.lr, 1e-4);
    assert!(paper.train_cfc.freeze_recovery);
    assert_eq!(paper.model.input_w, 432);
    assert_eq!(paper.model.input_h, 240);
    assert_eq!(paper.train_cfc.steps, 100_000);
    assert_eq!(paper.data.kinds.len(), 4);
}
