// scratch hyperparameter probe; not part of the deliverable
use bitmend_core::pipeline::*;
use bitmend_core::dac::detection_metrics;

fn stage2(cfc_lr: f64, steps: u64) {
    use bitmend_core::pipeline::*;
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::desk();
    if let Ok(b) = std::env::var("BATCH") {
        config.train_dac.batch_clips = b.parse().unwrap();
    }
    config.train_cfc.lr = cfc_lr;
    config.train_cfc.steps = steps;
    let t0 = std::time::Instant::now();
    let dataset = simulate_dataset(&config, 0, &dir.path().join("d")).unwrap();
    let dac = train_dac(&config, &dataset, 0, &dir.path().join("r"), None).unwrap();
    println!("dac trained in {:.0}s", t0.elapsed().as_secs_f64());
    let t1 = std::time::Instant::now();
    let cfc = train_cfc(&config, &dataset, &dac.checkpoint, 0, &dir.path().join("r"), None).unwrap();
    println!("cfc {} steps in {:.0}s, loss {:.4} -> {:.4}", steps, t1.elapsed().as_secs_f64(),
        cfc.loss_curve[0], cfc.loss_curve.last().unwrap());
    let (mut ds, dm) = build_dac(&config, 0);
    apply_checkpoint(&load_checkpoint(&dac.checkpoint).unwrap(), &mut ds, config.fingerprint(), "dac").unwrap();
    let (mut cs, cm) = build_cfc(&config, 0);
    apply_checkpoint(&load_checkpoint(&cfc.checkpoint).unwrap(), &mut cs, config.fingerprint(), "cfc").unwrap();
    let out = evaluate(&config, &dataset, (&dm, &ds), Some((&cm, &cs)), EvalMode::Both, RecoveryKind::Model).unwrap();
    for s in &out.summaries {
        println!("{}: psnr {:.2} masked {:.2} iou {:?}", s.mode, s.mean_psnr, s.mean_masked_psnr, s.mean_iou);
    }
    let base: f64 = out.records.iter().filter(|r| r.mode == "oracle").map(|r| r.baseline_masked_psnr).sum::<f64>()
        / out.records.iter().filter(|r| r.mode == "oracle").count() as f64;
    println!("baseline masked psnr {:.2}", base);
}

fn main() {
    if std::env::var("DUMP_CONFIGS").is_ok() {
        use bitmend_core::pipeline::RunConfig;
        use bitmend_core::videodata::CorruptionKind;
        RunConfig::desk().save(std::path::Path::new("configs/desk.toml")).unwrap();
        let mut paper = RunConfig::default();
        paper.model.input_h = 240;
        paper.model.input_w = 432;
        paper.data.kinds = vec![
            CorruptionKind::ColorStripe,
            CorruptionKind::BlockShift,
            CorruptionKind::FreezePropagate,
            CorruptionKind::TextureNoise,
        ];
        paper.train_dac.steps = 50_000;
        paper.train_cfc.steps = 100_000;
        paper.save(std::path::Path::new("configs/paper.toml")).unwrap();
        println!("configs written");
        return;
    }
    if std::env::var("STAGE2").is_ok() {
        let args: Vec<String> = std::env::args().collect();
        let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
        let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
        stage2(lr, steps);
        return;
    }
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let alpha: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.75);
    let gamma: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let kind: Option<String> = args.get(6).cloned();
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::desk();
    config.train_dac.lr = lr;
    config.train_dac.steps = steps;
    config.train_dac.batch_clips = batch;
    config.train_dac.log_every = 10;
    config.model.loss.focal_alpha = alpha;
    config.model.loss.focal_gamma = gamma;
    config.model.loss.dice = std::env::var("DICE").map(|v| v.parse().unwrap()).unwrap_or(1.0);
    config.train_dac.warmup_steps = 20;
    config.train_dac.grad_clip = 5.0;
    use bitmend_core::videodata::CorruptionKind::*;
    if let Some(k) = &kind {
        config.data.kinds = match k.as_str() {
            "stripe" => vec![ColorStripe],
            "shift" => vec![BlockShift],
            "freeze" => vec![FreezePropagate],
            "noise" => vec![TextureNoise],
            "sns" => vec![ColorStripe, TextureNoise, BlockShift],
            "sn" => vec![ColorStripe, TextureNoise],
            _ => config.data.kinds.clone(),
        };
    }
    let t0 = std::time::Instant::now();
    let dataset = simulate_dataset(&config, 0, &dir.path().join("d")).unwrap();
    println!("simulate: {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = std::time::Instant::now();
    let out = train_dac(&config, &dataset, 0, &dir.path().join("r"), None).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    println!("train {} steps in {:.1}s ({:.2}s/step)", steps, dt, dt / steps as f64);
    println!("loss: first {:.4} last {:.4}", out.loss_curve[0], out.loss_curve.last().unwrap());
    for (s, r) in &out.reports {
        println!("  step {s}: iou {:.3} dice {:.3} acc {:.3} recall {:.3}", r.mean_iou, r.mean_dice, r.mean_acc, r.mean_recall);
    }
    // full-dataset eval
    let (mut dac_store, dac_model) = build_dac(&config, 0);
    let ck = load_checkpoint(&out.checkpoint).unwrap();
    apply_checkpoint(&ck, &mut dac_store, config.fingerprint(), "dac").unwrap();
    let mut iou = 0.0;
    let mut per_frame = vec![0.0; 5];
    for clip in &dataset.clips {
        let idx: Vec<usize> = (0..5).collect();
        let locals = clip.frames.select_frames(&idx);
        let gt = clip.gt_masks.select_frames(&idx);
        let si: Vec<_> = idx.iter().map(|&i| clip.sideinfo[i].clone()).collect();
        let pred = dac_model.predict_binary_masks(&dac_store, &locals, &si).unwrap();
        iou += detection_metrics(&pred, &gt).unwrap().mean_iou;
        for fi in 0..5 {
            let p1 = pred.select_frames(&[fi]);
            let g1 = gt.select_frames(&[fi]);
            per_frame[fi] += detection_metrics(&p1, &g1).unwrap().mean_iou / dataset.clips.len() as f64;
        }
    }
    println!("eval mean IoU: {:.3}", iou / dataset.clips.len() as f64);
    println!("per-frame IoU: {:?}", per_frame.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    // visualize one frame: predicted soft mask (cell means) vs gt (cell means)
    let clip = &dataset.clips[0];
    let idx = vec![2usize];
    let locals = clip.frames.select_frames(&idx);
    let gt = clip.gt_masks.select_frames(&idx);
    let si: Vec<_> = idx.iter().map(|&i| clip.sideinfo[i].clone()).collect();
    let soft = dac_model.predict_masks(&dac_store, &locals, &si).unwrap();
    println!("clip000 frame2: soft-mask cell means (rows) | gt cell means");
    for cy in 0..4 {
        let mut left = String::new();
        let mut right = String::new();
        for cx in 0..4 {
            let mut sp = 0.0;
            let mut sg = 0.0;
            for py in 0..16 { for px in 0..16 {
                sp += soft.masks[[0, cy*16+py, cx*16+px]];
                sg += gt.masks[[0, cy*16+py, cx*16+px]];
            }}
            left.push_str(&format!("{:5.2} ", sp / 256.0));
            right.push_str(&format!("{:4.1} ", sg / 256.0));
        }
        println!("  {left} | {right}");
    }

}
