//! Two-stage training drivers.
//!
//! Stage 1 trains the detector on (frame, sideinfo) -> mask supervision.
//! Stage 2 freezes the detector, feeds its masks and refined pyramids to
//! the completion stack, and trains against an L1 reconstruction loss
//! (full frame plus masked region).
//!
//! Every random choice derives from `(seed, purpose, step)`, so a resumed
//! run consumes exactly the data order of an uninterrupted one and ends
//! parameter-identical.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;

use super::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use crate::cfc::{split_by_mask, CfcModel};
use crate::dac::{
    dac_loss, detection_metrics, threshold_iou, DacModel, DetectionReport, TAU_MIN,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamBuilder, ParamStore};
use crate::tensor::{Tape, TensorRef};
use crate::videodata::{sample_clip, ClipSample, Dataset, MaskSequence};

#[derive(Debug)]
pub struct TrainOutput {
    pub loss_curve: Vec<f64>,
    pub reports: Vec<(u64, DetectionReport)>,
    pub checkpoint: PathBuf,
}

/// Build the detector and its parameter store for a config + seed.
pub fn build_dac(config: &RunConfig, seed: u64) -> (ParamStore, DacModel) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "dac-init");
    let mut pb = ParamBuilder::new(&mut store, "dac", &mut rng);
    let model = DacModel::new(&mut pb, &config.dac_config());
    (store, model)
}

/// Build the completion stack and its parameter store.
pub fn build_cfc(config: &RunConfig, seed: u64) -> (ParamStore, CfcModel) {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "cfc-init");
    let mut pb = ParamBuilder::new(&mut store, "cfc", &mut rng);
    let model = CfcModel::new(
        &mut pb,
        &config.cfc_config(),
        &config.encoder_config(),
        &config.model.channels,
        config.model.input_h,
        config.model.input_w,
    );
    (store, model)
}

fn make_optimizer(kind: &str, lr: f64, weight_decay: f64) -> AdamConfig {
    match kind {
        "adamw" => AdamConfig::adamw(lr, weight_decay),
        _ => AdamConfig::adam(lr),
    }
}

/// Linear warmup then cosine decay to 10% of the base rate.
fn scheduled_lr(base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (0.1 + 0.9 * cos)
}

fn nan_abort(out_dir: &Path, stage: &str, step: u64, loss: f64, store: &ParamStore) -> Error {
    let mut norms = Vec::new();
    for (_, name, value) in store.iter() {
        let max_abs = value.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        norms.push(format!("  {name}: max|w| = {max_abs:e}"));
    }
    let body = format!(
        "stage: {stage}\nstep: {step}\nloss: {loss}\nparameter norms:\n{}\n",
        norms.join("\n")
    );
    let _ = std::fs::write(out_dir.join("diagnostics.txt"), &body);
    Error::Diverged(format!(
        "{stage} loss became {loss} at step {step}; diagnostics written to {}",
        out_dir.join("diagnostics.txt").display()
    ))
}

fn clamp_tau(store: &mut ParamStore) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, name, _)| name.ends_with(".tau"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let v = store.value_mut(id);
        v.mapv_inplace(|x| x.max(TAU_MIN));
    }
}

/// Draw the clips and sampling seeds for one step, purely from
/// `(seed, stage, step)`.
fn step_batch(seed: u64, stage: &str, step: u64, n_clips: usize, batch: usize) -> Vec<(usize, u64)> {
    let mut rng = crate::rng::stream_indexed(seed, stage, step);
    (0..batch)
        .map(|_| (rng.random_range(0..n_clips), rng.random::<u64>()))
        .collect()
}

/// Stage 1: train the detector. Resumable; emits the per-step loss curve
/// and periodic detection reports on the training batches.
pub fn train_dac(
    config: &RunConfig,
    dataset: &Dataset,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::MissingData("dataset has no clips".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let (mut store, model) = build_dac(config, seed);
    let tc = &config.train_dac;
    let mut opt = Adam::new(
        make_optimizer(&tc.optimizer, tc.lr, tc.weight_decay),
        &store,
    );
    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        apply_checkpoint(&ckpt, &mut store, config.fingerprint(), "dac")?;
        if let Some((t, m, v)) = ckpt.opt {
            opt.restore(t, m, v);
        }
        start_step = ckpt.step;
    }

    let mut loss_curve = Vec::new();
    let mut reports = Vec::new();
    for step in start_step..tc.steps {
        let batch = step_batch(seed, "dac-data", step, dataset.len(), tc.batch_clips);
        let mut tape = Tape::new();
        let mut frame_losses: Vec<TensorRef> = Vec::new();
        let mut samples: Vec<ClipSample> = Vec::new();
        for (clip_idx, sample_seed) in &batch {
            let sample = sample_clip(
                &dataset.clips[*clip_idx],
                config.data.n_local,
                config.data.n_nonlocal,
                *sample_seed,
            )?;
            let mut prev: Option<TensorRef> = None;
            for fi in 0..sample.local_frames.len() {
                let frame = sample.local_frames.frame(fi);
                let gt = sample.gt_masks.frame(fi);
                let out = model.forward_frame(
                    &mut tape,
                    &store,
                    &frame,
                    &sample.sideinfo[fi],
                    prev,
                )?;
                if model.config.temporal_ema > 0.0 {
                    prev = Some(out.refined_levels[0]);
                }
                let logits_val = tape
                    .value(out.logits)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let iou_target = threshold_iou(&logits_val, &gt, model.config.mask_threshold);
                let loss = dac_loss(
                    &mut tape,
                    out.logits,
                    &gt,
                    Some((out.iou_pred, iou_target)),
                    &model.config.loss,
                )?;
                frame_losses.push(loss);
            }
            samples.push(sample);
        }
        let summed = frame_losses
            .iter()
            .copied()
            .reduce(|a, b| tape.add(a, b))
            .expect("non-empty batch");
        let total = tape.scale(summed, 1.0 / frame_losses.len() as f64);
        let loss_val = tape.scalar(total);
        if !loss_val.is_finite() {
            return Err(nan_abort(out_dir, "dac", step, loss_val, &store));
        }
        loss_curve.push(loss_val);
        let mut grads = tape.backward(total);
        if tc.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if std::env::var("BITMEND_LOG_GRAD_NORM").is_ok() && step % 10 == 0 {
                eprintln!("step {step}: grad norm {norm:.3}");
            }
            if norm > tc.grad_clip {
                grads.scale(tc.grad_clip / norm);
            }
        }
        opt.set_lr(scheduled_lr(tc.lr, step, tc.steps, tc.warmup_steps));
        opt.step(&mut store, &grads);
        clamp_tau(&mut store);

        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            let report = batch_detection_report(&model, &store, &samples)?;
            reports.push((step + 1, report));
        }
    }

    let checkpoint = out_dir.join("dac.ckpt");
    save_checkpoint(
        &checkpoint,
        &store,
        config.fingerprint(),
        "dac",
        tc.steps,
        Some(&opt),
    )?;
    write_loss_curve(&out_dir.join("dac_loss.txt"), &loss_curve)?;
    Ok(TrainOutput {
        loss_curve,
        reports,
        checkpoint,
    })
}

fn batch_detection_report(
    model: &DacModel,
    store: &ParamStore,
    samples: &[ClipSample],
) -> Result<DetectionReport> {
    let mut iou = 0.0;
    let mut dice = 0.0;
    let mut acc = 0.0;
    let mut recall = 0.0;
    let mut n = 0.0;
    for sample in samples {
        let pred = model.predict_binary_masks(store, &sample.local_frames, &sample.sideinfo)?;
        let r = detection_metrics(&pred, &sample.gt_masks)?;
        iou += r.mean_iou;
        dice += r.mean_dice;
        acc += r.mean_acc;
        recall += r.mean_recall;
        n += 1.0;
    }
    Ok(DetectionReport {
        mean_iou: iou / n,
        mean_dice: dice / n,
        mean_acc: acc / n,
        mean_recall: recall / n,
    })
}

fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let body: String = curve.iter().map(|v| format!("{v:.17e}\n")).collect();
    std::fs::write(path, body)?;
    Ok(())
}

/// Cached per-window detector outputs for stage 2 (the detector is frozen,
/// so they never change).
struct DacCache {
    entries: HashMap<(usize, usize), CachedDac>,
}

struct CachedDac {
    masks: MaskSequence,
    pyramids: Vec<Vec<ArrayD<f64>>>,
}

impl DacCache {
    fn new() -> Self {
        DacCache {
            entries: HashMap::new(),
        }
    }

    fn get(
        &mut self,
        key: (usize, usize),
        model: &DacModel,
        store: &ParamStore,
        sample: &ClipSample,
    ) -> Result<&CachedDac> {
        if !self.entries.contains_key(&key) {
            let mut pyramids = Vec::new();
            let mut mask_data =
                Array3::<f64>::zeros((sample.local_frames.len(), sample.local_frames.height(), sample.local_frames.width()));
            for fi in 0..sample.local_frames.len() {
                let frame = sample.local_frames.frame(fi);
                let mut tape = Tape::new();
                let out =
                    model.forward_frame(&mut tape, store, &frame, &sample.sideinfo[fi], None)?;
                let logits = tape.value(out.logits);
                for y in 0..sample.local_frames.height() {
                    for x in 0..sample.local_frames.width() {
                        let p = crate::tensor::sigmoid_scalar(logits[[y, x]]);
                        mask_data[[fi, y, x]] =
                            if p > model.config.mask_threshold { 1.0 } else { 0.0 };
                    }
                }
                pyramids.push(
                    out.refined_levels
                        .iter()
                        .map(|&l| tape.value(l).clone())
                        .collect(),
                );
            }
            let masks = MaskSequence {
                masks: mask_data,
                binary: true,
            };
            self.entries.insert(key, CachedDac { masks, pyramids });
        }
        Ok(self.entries.get(&key).unwrap())
    }
}

/// Stage 2: train the completion stack under a frozen detector.
pub fn train_cfc(
    config: &RunConfig,
    dataset: &Dataset,
    dac_checkpoint: &Path,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::MissingData("dataset has no clips".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    // frozen detector
    let (mut dac_store, dac_model) = build_dac(config, seed);
    let dac_ckpt = load_checkpoint(dac_checkpoint)?;
    apply_checkpoint(&dac_ckpt, &mut dac_store, config.fingerprint(), "dac")?;

    let (mut store, model) = build_cfc(config, seed);
    let tc = &config.train_cfc;
    let mut opt_config = make_optimizer(&tc.optimizer, tc.lr, 0.0)
        .with_group("cfc.content_enc", tc.completion_lr_scale)
        .with_group("cfc.completion", tc.completion_lr_scale);
    if tc.freeze_recovery {
        opt_config = opt_config.with_group("cfc.recovery", 0.0);
    }
    let mut opt = Adam::new(opt_config, &store);
    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        apply_checkpoint(&ckpt, &mut store, config.fingerprint(), "cfc")?;
        if let Some((t, m, v)) = ckpt.opt {
            opt.restore(t, m, v);
        }
        start_step = ckpt.step;
    }

    let mut cache = DacCache::new();
    let mut loss_curve = Vec::new();
    for step in start_step..tc.steps {
        let batch = step_batch(seed, "cfc-data", step, dataset.len(), tc.batch_clips);
        let mut tape = Tape::new();
        let mut clip_losses: Vec<TensorRef> = Vec::new();
        for (clip_idx, sample_seed) in &batch {
            let sample = sample_clip(
                &dataset.clips[*clip_idx],
                config.data.n_local,
                config.data.n_nonlocal,
                *sample_seed,
            )?;
            let key = (*clip_idx, sample.local_indices[0]);
            let cached = cache.get(key, &dac_model, &dac_store, &sample)?;
            let loss = clip_reconstruction_loss(&mut tape, &model, &store, &sample, cached)?;
            clip_losses.push(loss);
        }
        let summed = clip_losses
            .iter()
            .copied()
            .reduce(|a, b| tape.add(a, b))
            .expect("non-empty batch");
        let total = tape.scale(summed, 1.0 / clip_losses.len() as f64);
        let loss_val = tape.scalar(total);
        if !loss_val.is_finite() {
            return Err(nan_abort(out_dir, "cfc", step, loss_val, &store));
        }
        loss_curve.push(loss_val);
        let mut grads = tape.backward(total);
        if tc.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > tc.grad_clip {
                grads.scale(tc.grad_clip / norm);
            }
        }
        opt.set_lr(scheduled_lr(tc.lr, step, tc.steps, tc.warmup_steps));
        opt.step(&mut store, &grads);
    }

    let checkpoint = out_dir.join("cfc.ckpt");
    save_checkpoint(
        &checkpoint,
        &store,
        config.fingerprint(),
        "cfc",
        tc.steps,
        Some(&opt),
    )?;
    write_loss_curve(&out_dir.join("cfc_loss.txt"), &loss_curve)?;
    Ok(TrainOutput {
        loss_curve,
        reports: Vec::new(),
        checkpoint,
    })
}

/// Reconstruction loss for one clip: composited output against the clean
/// frames, L1 over the full frame plus L1 over the masked region.
fn clip_reconstruction_loss(
    tape: &mut Tape,
    model: &CfcModel,
    store: &ParamStore,
    sample: &ClipSample,
    cached: &CachedDac,
) -> Result<TensorRef> {
    let (h, w) = (sample.local_frames.height(), sample.local_frames.width());
    let mid = sample.local_frames.len() / 2;
    let mid_frame = sample.local_frames.frame(mid);
    let mid_mask = cached.masks.frame(mid);
    let (_, composite) = split_by_mask(&mid_frame, &mid_mask)?;
    let (adapted, gate) = model.clip_gate(tape, store, &composite);
    let context = model.clip_context(
        tape,
        store,
        &sample.local_frames,
        &cached.masks,
        &sample.nonlocal_frames,
    )?;

    let mut terms: Vec<TensorRef> = Vec::new();
    for fi in 0..sample.local_frames.len() {
        let frame = sample.local_frames.frame(fi);
        let mask = cached.masks.frame(fi);
        let found: Vec<TensorRef> = cached.pyramids[fi]
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect();
        let recovered =
            model.forward_frame(tape, store, &frame, &mask, &found, context, adapted, gate)?;

        // composite on the tape: x*(1-m) + y_hat*m
        let mask3 = mask_to_chw(&mask);
        let m_t = tape.leaf(mask3.clone().into_dyn());
        let one_minus_m = tape.leaf(mask3.mapv(|v| 1.0 - v).into_dyn());
        let frame_t = tape.leaf(crate::encoders::hwc_to_chw(&frame).into_dyn());
        let keep = tape.mul(frame_t, one_minus_m);
        let fill = tape.mul(recovered, m_t);
        let out = tape.add(keep, fill);

        let clean_t = tape.leaf(crate::encoders::hwc_to_chw(&sample.clean_frames.frame(fi)).into_dyn());
        let diff = tape.sub(out, clean_t);
        let abs = tape.abs_t(diff);
        let full = tape.mean_all(abs);
        terms.push(full);
        let mask_count = mask.sum();
        if mask_count > 0.0 {
            let masked_abs = tape.mul(abs, m_t);
            let masked_sum = tape.sum_all(masked_abs);
            let masked = tape.scale(masked_sum, 1.0 / (mask_count * 3.0));
            terms.push(masked);
        }
    }
    let _ = (h, w);
    let summed = terms
        .iter()
        .copied()
        .reduce(|a, b| tape.add(a, b))
        .expect("at least one term");
    Ok(tape.scale(summed, 1.0 / sample.local_frames.len() as f64))
}

fn mask_to_chw(mask: &Array2<f64>) -> Array3<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = mask[[y, x]];
            }
        }
    }
    out
}
