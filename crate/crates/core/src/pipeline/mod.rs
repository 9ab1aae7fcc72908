//! Configuration, two-stage training drivers, evaluation harness, and
//! checkpoint lifecycle.

mod checkpoint;
mod config;
mod evaluate;
mod train;

pub use checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{
    DataSection, EvalMode, EvaluateSection, LossSection, ModelSection, RecoveryKind, RunConfig,
    Stage, TrainCfcSection, TrainDacSection, CONFIG_VERSION,
};
pub use evaluate::{evaluate, render_table, write_reports, ClipEvalRecord, EvalOutput, EvalSummary};
pub use train::{build_cfc, build_dac, train_cfc, train_dac, TrainOutput};

use std::path::Path;

use crate::error::Result;
use crate::videodata::{
    simulate_corruption, simulate_sideinfo, synthesize_clean_clip, CorruptionSpec, Dataset,
    DatasetClip,
};

/// Generate the synthetic dataset described by the config's data section:
/// procedurally clean clips, seeded corruption, codec side information.
/// Byte-identical directory contents for a fixed `(config, seed)`.
pub fn simulate_dataset(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    let d = &config.data;
    let mut clips = Vec::with_capacity(d.clips);
    for c in 0..d.clips {
        let clip_seed = crate::rng::derive_seed_indexed(seed, "clip", c as u64);
        let clean = synthesize_clean_clip(
            clip_seed,
            d.frames_per_clip,
            config.model.input_h,
            config.model.input_w,
        );
        let spec = CorruptionSpec {
            seed: clip_seed,
            kinds: d.kinds.clone(),
            area_fraction: d.area_fraction,
            residual_retention: d.residual_retention,
        };
        let (corrupted, gt) = simulate_corruption(&clean, &spec)?;
        let sideinfo = simulate_sideinfo(&clean, &gt, clip_seed, 0);
        clips.push(DatasetClip {
            id: format!("clip{c:03}"),
            frames: corrupted,
            gt_masks: gt,
            clean,
            sideinfo,
        });
    }
    let dataset = Dataset { clips };
    dataset.save(out_dir)?;
    Ok(dataset)
}
