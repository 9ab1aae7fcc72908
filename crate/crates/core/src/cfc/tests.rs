use super::*;
use crate::nn::ParamBuilder;
use crate::tensor::Tape;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

fn rand3(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut rng = crate::rng::stream(seed, "cfc-test");
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
}

fn rand_frame(seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut rng = crate::rng::stream(seed, "cfc-frame");
    Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
}

fn rand_mask(seed: u64, h: usize, w: usize) -> Array2<f64> {
    let mut rng = crate::rng::stream(seed, "cfc-mask");
    Array2::from_shape_fn((h, w), |_| if rng.random_range(0..3) == 0 { 1.0 } else { 0.0 })
}

#[test]
fn split_partition_identity() {
    let frame = rand_frame(1, 16, 16);
    let zeros = Array2::zeros((16, 16));
    let (i, c) = split_by_mask(&frame, &zeros).unwrap();
    assert_eq!(i, frame);
    assert!(c.iter().all(|&v| v == 0.0));

    let ones = Array2::ones((16, 16));
    let (i2, c2) = split_by_mask(&frame, &ones).unwrap();
    assert_eq!(c2, frame);
    assert!(i2.iter().all(|&v| v == 0.0));

    let m = rand_mask(2, 16, 16);
    let (i3, c3) = split_by_mask(&frame, &m).unwrap();
    for ((a, b), orig) in i3.iter().zip(c3.iter()).zip(frame.iter()) {
        assert_eq!(a + b, *orig);
    }

    let bad = Array2::zeros((8, 16));
    assert!(split_by_mask(&frame, &bad).is_err());
}

fn build_sca(seed: u64, c_corr: usize, c_found: usize) -> (ParamStore, ScaBlock) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init");
    let mut pb = ParamBuilder::new(&mut store, "t", &mut rng);
    let sca = ScaBlock::new(&mut pb, "sca", c_corr, c_found, c_corr / 2);
    (store, sca)
}

#[test]
fn sca_zero_mask_is_exactly_zero() {
    let (store, sca) = build_sca(3, 4, 6);
    let mut tape = Tape::new();
    let fc = tape.leaf(rand3(4, 4, 4, 4).into_dyn());
    let ff = tape.leaf(rand3(5, 6, 4, 4).into_dyn());
    let delta = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.7));
    let mask = Array2::zeros((4, 4));
    let out = sca.forward(&mut tape, &store, fc, ff, &mask, delta);
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn sca_single_token_context_broadcasts_its_value() {
    let (store, sca) = build_sca(6, 4, 6);
    let mut tape = Tape::new();
    let fc = tape.leaf(rand3(7, 4, 4, 4).into_dyn());
    let ff_data = rand3(8, 6, 1, 1);
    let ff = tape.leaf(ff_data.clone().into_dyn());
    let one = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let mask = Array2::ones((4, 4));
    let out = sca.forward(&mut tape, &store, fc, ff, &mask, one);
    // expected: V = proj_v of the single context token, at every position
    let ff_tok = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[1, 6]), ff_data.iter().copied().collect()).unwrap(),
    );
    let vw_id = store.id_of("t.sca.v.w").unwrap();
    let vw = tape.param(&store, vw_id);
    let wv = tape.matmul(ff_tok, vw);
    let v = tape.value(wv).clone();
    let o = tape.value(out).clone();
    for ch in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                let diff = (o[[ch, y, x]] - v[[0, ch]]).abs();
                assert!(diff < 1e-12, "ch {ch} ({y},{x}): {diff}");
            }
        }
    }
}

#[test]
fn sca_linear_in_delta() {
    let (store, sca) = build_sca(9, 4, 6);
    let fc_data = rand3(10, 4, 4, 4);
    let ff_data = rand3(11, 6, 4, 4);
    let mask = rand_mask(12, 4, 4);
    let run = |d: f64| {
        let mut tape = Tape::new();
        let fc = tape.leaf(fc_data.clone().into_dyn());
        let ff = tape.leaf(ff_data.clone().into_dyn());
        let delta = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), d));
        let out = sca.forward(&mut tape, &store, fc, ff, &mask, delta);
        tape.value(out).clone()
    };
    let d1 = run(1.0);
    let d2 = run(2.0);
    for (a, b) in d1.iter().zip(d2.iter()) {
        assert!((2.0 * a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn blend_contracts() {
    let f_data = rand3(13, 3, 4, 4);
    let run = |aug: Array3<f64>, base: Array3<f64>, lam: f64| {
        let mut tape = Tape::new();
        let a = tape.leaf(aug.into_dyn());
        let b = tape.leaf(base.into_dyn());
        let l = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), lam));
        let out = blend_residual(&mut tape, a, b, l);
        tape.value(out).clone()
    };
    // lambda -> 0 recovers the base
    let out0 = run(rand3(14, 3, 4, 4), f_data.clone(), 0.0);
    assert_eq!(out0, f_data.clone().into_dyn());
    // lambda = 0.5 with F' = 2F gives 1.5F
    let doubled = f_data.mapv(|v| 2.0 * v);
    let out_half = run(doubled, f_data.clone(), 0.5);
    for (o, f) in out_half.iter().zip(f_data.iter()) {
        assert!((o - 1.5 * f).abs() < 1e-12);
    }
    // lambda -> 1 with zero augmentation (zero-mask upstream) gives zero
    let out1 = run(Array3::zeros((3, 4, 4)), f_data.clone(), 1.0);
    assert!(out1.iter().all(|&v| v == 0.0));
}

fn build_ha(seed: u64) -> (ParamStore, HierAugment) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init");
    let mut pb = ParamBuilder::new(&mut store, "t", &mut rng);
    let ha = HierAugment::new(&mut pb, "ha", &[4, 8], &[6, 12]);
    (store, ha)
}

#[test]
fn ha_lambda_zero_bypasses_augmentation() {
    let (mut store, ha) = build_ha(15);
    // sigmoid(-1e9) underflows to exactly 0
    for j in 0..2 {
        let id = store.id_of(&format!("t.ha.blend.lambda{j}")).unwrap();
        store.value_mut(id)[[0]] = -1e9;
    }
    let corr1 = rand3(16, 4, 4, 4);
    let corr2 = rand3(17, 8, 2, 2);
    let run = |found1: Array3<f64>, found2: Array3<f64>, mask: Array2<f64>| {
        let mut tape = Tape::new();
        let c1 = tape.leaf(corr1.clone().into_dyn());
        let c2 = tape.leaf(corr2.clone().into_dyn());
        let f1 = tape.leaf(found1.into_dyn());
        let f2 = tape.leaf(found2.into_dyn());
        let out = ha.forward(&mut tape, &store, &[c1, c2], &[f1, f2], &mask);
        tape.value(out).clone()
    };
    // with the blend shut, the output ignores the foundational pyramid and mask
    let a = run(rand3(18, 6, 4, 4), rand3(19, 12, 2, 2), rand_mask(20, 4, 4));
    let b = run(rand3(21, 6, 4, 4), rand3(22, 12, 2, 2), Array2::ones((4, 4)));
    assert_eq!(a, b);
}

#[test]
fn ha_output_shape_is_finest_scale() {
    let (store, ha) = build_ha(23);
    let mut tape = Tape::new();
    let c1 = tape.leaf(rand3(24, 4, 4, 4).into_dyn());
    let c2 = tape.leaf(rand3(25, 8, 2, 2).into_dyn());
    let f1 = tape.leaf(rand3(26, 6, 4, 4).into_dyn());
    let f2 = tape.leaf(rand3(27, 12, 2, 2).into_dyn());
    let mask = rand_mask(28, 4, 4);
    let out = ha.forward(&mut tape, &store, &[c1, c2], &[f1, f2], &mask);
    assert_eq!(tape.shape(out), &[4, 4, 4]);
}

fn build_gate(seed: u64, n_experts: usize) -> (ParamStore, GlobalAdapter, VotingGate) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init");
    let mut pb = ParamBuilder::new(&mut store, "t", &mut rng);
    let adapter = GlobalAdapter::new(&mut pb, "adapter", 6, 4);
    let gate = VotingGate::new(&mut pb, "gate", 4, n_experts);
    (store, adapter, gate)
}

#[test]
fn adapter_is_deterministic_and_sized() {
    let (store, adapter, _) = build_gate(29, 2);
    let mut tape = Tape::new();
    let zero = tape.leaf(ArrayD::zeros(IxDyn(&[1, 6])));
    let a = adapter.forward(&mut tape, &store, zero);
    assert_eq!(tape.shape(a), &[1, 4]);
    let extreme = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), 1e4));
    let b = adapter.forward(&mut tape, &store, extreme);
    assert!(tape.value(b).iter().all(|v| v.is_finite()));
    let zero2 = tape.leaf(ArrayD::zeros(IxDyn(&[1, 6])));
    let a2 = adapter.forward(&mut tape, &store, zero2);
    assert_eq!(tape.value(a), tape.value(a2));
}

#[test]
fn gate_softmax_properties() {
    // equal logits -> uniform weights: drive the softmax directly
    let mut tape = Tape::new();
    let equal = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 4]), 2.5));
    let w = tape.softmax_rows(equal);
    for v in tape.value(w).iter() {
        assert!((v - 0.25).abs() < 1e-12);
    }
    // (10, -10) saturates
    let sharp = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![10.0, -10.0]).unwrap());
    let w2 = tape.softmax_rows(sharp);
    let v2 = tape.value(w2);
    assert!((v2[[0, 0]] - 1.0).abs() < 1e-4);
    assert!(v2[[0, 1]] < 1e-4);
    // shift invariance
    let shifted = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![110.0, 90.0]).unwrap());
    let base = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![20.0, 0.0]).unwrap());
    let ws = tape.softmax_rows(shifted);
    let wb = tape.softmax_rows(base);
    for (a, b) in tape.value(ws).iter().zip(tape.value(wb).iter()) {
        assert!((a - b).abs() < 1e-6);
    }
    // the full gate path sums to 1
    let (store, adapter, gate) = build_gate(30, 3);
    let mut rng = crate::rng::stream(31, "g");
    let g = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 6]), |_| {
        rng.random_range(-2.0..2.0)
    }));
    let a = adapter.forward(&mut tape, &store, g);
    let w3 = gate.forward(&mut tape, &store, a);
    let sum: f64 = tape.value(w3).iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

fn build_experts(seed: u64, n: usize, c1: usize, d: usize) -> (ParamStore, Vec<Expert>) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init");
    let mut pb = ParamBuilder::new(&mut store, "t", &mut rng);
    let experts = (0..n)
        .map(|i| Expert::new(&mut pb, &format!("expert{i}"), c1, d))
        .collect();
    (store, experts)
}

#[test]
fn expert_zero_value_projection_is_residual_only() {
    let (mut store, experts) = build_experts(32, 1, 4, 6);
    store
        .value_mut(store.id_of("t.expert0.v.w").unwrap())
        .fill(0.0);
    let mut tape = Tape::new();
    let f_b = tape.leaf(rand3(33, 4, 4, 4).into_dyn());
    let prompts = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 6]), |_| 0.7));
    let out = experts[0].forward(&mut tape, &store, f_b, prompts);
    assert_eq!(tape.value(out), tape.value(f_b));
}

#[test]
fn experts_preserve_shape_and_differ() {
    let (store, experts) = build_experts(34, 2, 4, 6);
    let mut tape = Tape::new();
    let f_b = tape.leaf(rand3(35, 4, 6, 3).into_dyn());
    let prompts = tape.leaf(rand3(36, 1, 2, 6).into_shape_with_order((2, 6)).unwrap().into_dyn());
    let e0 = experts[0].forward(&mut tape, &store, f_b, prompts);
    let e1 = experts[1].forward(&mut tape, &store, f_b, prompts);
    assert_eq!(tape.shape(e0), &[4, 6, 3]);
    let diff: f64 = tape
        .value(e0)
        .iter()
        .zip(tape.value(e1).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    assert!(diff > 0.0);
}

#[test]
fn more_forward_gate_algebra() {
    let (store, experts) = build_experts(37, 2, 4, 6);
    let f_b_data = rand3(38, 4, 4, 4);
    let prompts_data = rand3(39, 1, 2, 6).into_shape_with_order((2, 6)).unwrap();
    let run = |w: Vec<f64>, n: usize| {
        let mut tape = Tape::new();
        let f_b = tape.leaf(f_b_data.clone().into_dyn());
        let prompts = tape.leaf(prompts_data.clone().into_dyn());
        let gate = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, n]), w).unwrap());
        let out = more_forward(&mut tape, &experts[..n], &store, f_b, prompts, gate);
        let e: Vec<_> = experts[..n]
            .iter()
            .map(|ex| {
                let o = ex.forward(&mut tape, &store, f_b, prompts);
                tape.value(o).clone()
            })
            .collect();
        (tape.value(out).clone(), e)
    };
    // single expert: gate is irrelevant (softmax of one logit is exactly 1)
    let (out1, e1) = run(vec![1.0], 1);
    assert_eq!(out1, e1[0]);
    // w = (1, 0) picks expert 0 exactly
    let (out2, e2) = run(vec![1.0, 0.0], 2);
    assert_eq!(out2, e2[0]);
    // w = (0.5, 0.5) is the elementwise mean
    let (out3, e3) = run(vec![0.5, 0.5], 2);
    for ((o, a), b) in out3.iter().zip(e3[0].iter()).zip(e3[1].iter()) {
        assert!((o - 0.5 * (a + b)).abs() < 1e-12);
    }
}

#[test]
fn more_convexity_over_random_gates() {
    let (store, experts) = build_experts(40, 3, 4, 6);
    let mut rng = crate::rng::stream(41, "gate");
    for _ in 0..20 {
        let mut tape = Tape::new();
        let f_b = tape.leaf(rand3(rng.random_range(0..1000), 4, 3, 3).into_dyn());
        let prompts = tape.leaf(
            rand3(rng.random_range(0..1000), 1, 2, 6)
                .into_shape_with_order((2, 6))
                .unwrap()
                .into_dyn(),
        );
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits_t = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), logits).unwrap());
        let gate = tape.softmax_rows(logits_t);
        let out = more_forward(&mut tape, &experts, &store, f_b, prompts, gate);
        let es: Vec<_> = experts
            .iter()
            .map(|ex| {
                let o = ex.forward(&mut tape, &store, f_b, prompts);
                tape.value(o).clone()
            })
            .collect();
        for (i, o) in tape.value(out).iter().enumerate() {
            let lo = es.iter().map(|e| e.as_slice().unwrap()[i]).fold(f64::INFINITY, f64::min);
            let hi = es
                .iter()
                .map(|e| e.as_slice().unwrap()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(*o >= lo - 1e-9 && *o <= hi + 1e-9, "{o} outside [{lo}, {hi}]");
        }
    }
}

fn build_enhance(seed: u64, c: usize) -> (ParamStore, ChannelEnhance) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init");
    let mut pb = ParamBuilder::new(&mut store, "t", &mut rng);
    let e = ChannelEnhance::new(&mut pb, "enh", c, 6);
    (store, e)
}

#[test]
fn enhance_is_a_channel_contraction() {
    let (store, enh) = build_enhance(42, 5);
    let mut tape = Tape::new();
    let f = tape.leaf(rand3(43, 5, 4, 4).into_dyn());
    let adapted = tape.leaf(rand3(44, 1, 1, 6).into_shape_with_order((1, 6)).unwrap().into_dyn());
    let out = enh.forward(&mut tape, &store, f, adapted);
    for (o, i) in tape.value(out).iter().zip(tape.value(f).iter()) {
        if *i != 0.0 {
            assert!(o.abs() < i.abs(), "{o} vs {i}");
        } else {
            assert_eq!(*o, 0.0);
        }
    }
    // zero input stays zero
    let zero = tape.leaf(ArrayD::zeros(IxDyn(&[5, 4, 4])));
    let out_z = enh.forward(&mut tape, &store, zero, adapted);
    assert!(tape.value(out_z).iter().all(|&v| v == 0.0));
}

#[test]
fn enhance_saturated_bias_recovers_input() {
    let (mut store, enh) = build_enhance(45, 5);
    let bias_id = store.id_of("t.enh.mlp.fc2.b").unwrap();
    store.value_mut(bias_id).fill(20.0);
    let mut tape = Tape::new();
    let f_data = rand3(46, 5, 4, 4);
    let f = tape.leaf(f_data.clone().into_dyn());
    let adapted = tape.leaf(rand3(47, 1, 1, 6).into_shape_with_order((1, 6)).unwrap().into_dyn());
    let out = enh.forward(&mut tape, &store, f, adapted);
    for (o, i) in tape.value(out).iter().zip(f_data.iter()) {
        if *i != 0.0 {
            assert!(((o - i) / i).abs() < 1e-6, "{o} vs {i}");
        }
    }
}

fn tiny_cfc() -> (ParamStore, CfcModel) {
    let encoder_cfg = EncoderConfig {
        s_levels: 2,
        channels: vec![4, 8],
        stride0: 4,
        patch: 4,
        token_dim: 8,
        global_dim: 6,
        positional: true,
        token_grid: 4,
    };
    let config = CfcConfig {
        content_channels: vec![4, 8],
        d_model: 8,
        n_experts: 2,
        n_prompts: 2,
        adapt_dim: 6,
        enhance_dim: 6,
    };
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(48, "init");
    let mut pb = ParamBuilder::new(&mut store, "cfc", &mut rng);
    let model = CfcModel::new(&mut pb, &config, &encoder_cfg, &[4, 8], 8, 8);
    (store, model)
}

fn tiny_video(seed: u64, l: usize) -> VideoSequence {
    let mut rng = crate::rng::stream(seed, "vid");
    VideoSequence {
        frames: ndarray::Array4::from_shape_fn((l, 8, 8, 3), |_| rng.random_range(0.0..1.0)),
        fps: 24.0,
    }
}

/// Full completion forward at 8x8: finite-difference check over every
/// parameter group (groups over 128 entries are sampled).
#[test]
fn full_cfc_composition_gradients_match_finite_differences() {
    let (store, model) = tiny_cfc();
    let locals = tiny_video(49, 1);
    let nonlocals = tiny_video(50, 1);
    let mask_data = rand_mask(51, 8, 8);
    let masks = MaskSequence {
        masks: ndarray::Array3::from_shape_fn((1, 8, 8), |(_, y, x)| mask_data[[y, x]]),
        binary: true,
    };
    let clean = tiny_video(52, 1);
    let found1 = rand3(53, 4, 2, 2);
    let found2 = rand3(54, 8, 1, 1);

    let forward = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let frame = locals.frame(0);
        let mask = masks.frame(0);
        let (_, composite) = split_by_mask(&frame, &mask).unwrap();
        let (adapted, gate) = model.clip_gate(&mut tape, store, &composite);
        let context = model
            .clip_context(&mut tape, store, &locals, &masks, &nonlocals)
            .unwrap();
        let found = vec![
            tape.leaf(found1.clone().into_dyn()),
            tape.leaf(found2.clone().into_dyn()),
        ];
        let rec = model
            .forward_frame(&mut tape, store, &frame, &mask, &found, context, adapted, gate)
            .unwrap();
        // composited L1 to the clean frame: full-frame plus masked-region
        let clean_chw = tape.leaf(crate::encoders::hwc_to_chw(&clean.frame(0)).into_dyn());
        let mask_chw = {
            let mut m3 = Array3::<f64>::zeros((3, 8, 8));
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        m3[[c, y, x]] = mask[[y, x]];
                    }
                }
            }
            tape.leaf(m3.into_dyn())
        };
        let masked_rec = tape.mul(rec, mask_chw);
        let mc = tape.mul(clean_chw, mask_chw);
        let diff = tape.sub(masked_rec, mc);
        let l1 = tape.abs_t(diff);
        let full = tape.mean_all(l1);
        let masked_sum = tape.sum_all(l1);
        let denom = mask.sum() * 3.0;
        let masked = tape.scale(masked_sum, 1.0 / denom);
        let loss = tape.add(full, masked);
        tape.scalar(loss)
    };

    // analytic gradients at the base point
    let grads = {
        let mut tape = Tape::new();
        let frame = locals.frame(0);
        let mask = masks.frame(0);
        let (_, composite) = split_by_mask(&frame, &mask).unwrap();
        let (adapted, gate) = model.clip_gate(&mut tape, &store, &composite);
        let context = model
            .clip_context(&mut tape, &store, &locals, &masks, &nonlocals)
            .unwrap();
        let found = vec![
            tape.leaf(found1.clone().into_dyn()),
            tape.leaf(found2.clone().into_dyn()),
        ];
        let rec = model
            .forward_frame(&mut tape, &store, &frame, &mask, &found, context, adapted, gate)
            .unwrap();
        let clean_chw = tape.leaf(crate::encoders::hwc_to_chw(&clean.frame(0)).into_dyn());
        let mask_chw = {
            let mut m3 = Array3::<f64>::zeros((3, 8, 8));
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        m3[[c, y, x]] = mask[[y, x]];
                    }
                }
            }
            tape.leaf(m3.into_dyn())
        };
        let masked_rec = tape.mul(rec, mask_chw);
        let mc = tape.mul(clean_chw, mask_chw);
        let diff = tape.sub(masked_rec, mc);
        let l1 = tape.abs_t(diff);
        let full = tape.mean_all(l1);
        let masked_sum = tape.sum_all(l1);
        let denom = mask.sum() * 3.0;
        let masked = tape.scale(masked_sum, 1.0 / denom);
        let loss = tape.add(full, masked);
        tape.backward(loss)
    };

    let h = 1e-5;
    let mut rng = crate::rng::stream(55, "sample");
    for (id, name, value) in store.iter() {
        let n = value.len();
        let indices: Vec<usize> = if n <= 128 {
            (0..n).collect()
        } else {
            (0..128).map(|_| rng.random_range(0..n)).collect()
        };
        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let mut plus = store.clone();
            plus.value_mut(id).as_slice_mut().unwrap()[i] += h;
            let mut minus = store.clone();
            minus.value_mut(id).as_slice_mut().unwrap()[i] -= h;
            let fd = (forward(&plus) - forward(&minus)) / (2.0 * h);
            let an = grads.get(id).map(|g| g.as_slice().unwrap()[i]).unwrap_or(0.0);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "{name}: max rel err {max_rel}");
    }
}

#[test]
fn recover_with_zero_mask_is_identity() {
    let (dac_store, dac_model) = {
        let config = crate::dac::DacConfig {
            encoder: EncoderConfig {
                s_levels: 2,
                channels: vec![4, 8],
                stride0: 4,
                patch: 4,
                token_dim: 8,
                global_dim: 6,
                positional: true,
                token_grid: 4,
            },
            n_prompts: 2,
            decoder_dim: 8,
            input_h: 8,
            input_w: 8,
            cell_pool: 4,
            ..crate::dac::DacConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(56, "init");
        let mut pb = ParamBuilder::new(&mut store, "dac", &mut rng);
        let model = crate::dac::DacModel::new(&mut pb, &config);
        (store, model)
    };
    let (cfc_store, cfc_model) = tiny_cfc();
    let frames = tiny_video(57, 2);
    let nonlocals = tiny_video(58, 1);
    let masks = MaskSequence {
        masks: ndarray::Array3::zeros((2, 8, 8)),
        binary: true,
    };
    let sideinfo: Vec<SideInfo> = (0..2)
        .map(|_| crate::sideinfo::SideInfo::zero_with_block(2, 2, 4))
        .collect();
    let models = Models {
        dac: &dac_model,
        dac_store: &dac_store,
        cfc: &cfc_model,
        cfc_store: &cfc_store,
    };
    let (out, used) = recover(&frames, Some(&masks), &sideinfo, &nonlocals, &models).unwrap();
    assert_eq!(out.frames, frames.frames);
    assert!(used.masks.iter().all(|&v| v == 0.0));

    // determinism with a real mask
    let masks2 = MaskSequence {
        masks: ndarray::Array3::from_shape_fn((2, 8, 8), |(_, y, x)| {
            if y < 4 && x < 4 {
                1.0
            } else {
                0.0
            }
        }),
        binary: true,
    };
    let (a, _) = recover(&frames, Some(&masks2), &sideinfo, &nonlocals, &models).unwrap();
    let (b, _) = recover(&frames, Some(&masks2), &sideinfo, &nonlocals, &models).unwrap();
    assert_eq!(a.frames, b.frames);
    // unmasked pixels bit-identical to the input
    for fi in 0..2 {
        for y in 0..8 {
            for x in 0..8 {
                if masks2.masks[[fi, y, x]] == 0.0 {
                    for c in 0..3 {
                        assert_eq!(a.frames[[fi, y, x, c]], frames.frames[[fi, y, x, c]]);
                    }
                }
            }
        }
    }
}

#[test]
fn resize_mask_identity_and_range() {
    let m = rand_mask(59, 8, 8);
    let same = resize_mask_bilinear(&m, 8, 8);
    assert_eq!(same, m);
    let down = resize_mask_bilinear(&m, 2, 2);
    assert!(down.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
