//! Evaluation harness: blind (detector masks) and oracle (ground-truth
//! masks) recovery over a dataset, with per-clip and aggregate reports.
//!
//! The evaluation window of each clip is deterministic: the first
//! `n_local` frames are recovered, the last `n_nonlocal` frames serve as
//! references. Masked-region quality is always measured over the
//! ground-truth mask so blind and oracle rows are directly comparable.

use std::path::Path;

use super::config::{EvalMode, RecoveryKind, RunConfig};
use crate::cfc::{recover, CfcModel, Models};
use crate::dac::{detection_metrics, DacModel, DetectionReport};
use crate::error::{Error, Result};
use crate::metrics::{masked_region_metrics, sequence_quality, QualityReport};
use crate::nn::ParamStore;
use crate::videodata::{Dataset, DatasetClip, VideoSequence};

/// One evaluated clip in one mode.
#[derive(Debug, serde::Serialize)]
pub struct ClipEvalRecord {
    pub clip: String,
    pub mode: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub masked_psnr: f64,
    pub masked_ssim: Option<f64>,
    /// Corrupted-input-vs-clean PSNR over the same masked region.
    pub baseline_masked_psnr: f64,
    pub detection: Option<DetectionReport>,
}

#[derive(Debug, serde::Serialize)]
pub struct EvalSummary {
    pub mode: String,
    pub mean_psnr: f64,
    pub mean_masked_psnr: f64,
    pub mean_iou: Option<f64>,
}

#[derive(Debug, serde::Serialize)]
pub struct EvalOutput {
    pub records: Vec<ClipEvalRecord>,
    pub summaries: Vec<EvalSummary>,
}

/// Evaluate a dataset in the configured mode(s).
pub fn evaluate(
    config: &RunConfig,
    dataset: &Dataset,
    dac: (&DacModel, &ParamStore),
    cfc: Option<(&CfcModel, &ParamStore)>,
    mode: EvalMode,
    recovery: RecoveryKind,
) -> Result<EvalOutput> {
    if dataset.is_empty() {
        return Err(Error::MissingData("dataset has no clips".into()));
    }
    if recovery == RecoveryKind::Model && cfc.is_none() {
        return Err(Error::MissingCheckpoint(
            "model recovery requires a cfc checkpoint".into(),
        ));
    }
    let modes: Vec<&str> = match mode {
        EvalMode::Blind => vec!["blind"],
        EvalMode::Oracle => vec!["oracle"],
        EvalMode::Both => vec!["blind", "oracle"],
    };
    let mut records = Vec::new();
    for clip in &dataset.clips {
        for m in &modes {
            records.push(evaluate_clip(config, clip, dac, cfc, m, recovery)?);
        }
    }
    let summaries = modes
        .iter()
        .map(|m| summarize(&records, m))
        .collect();
    Ok(EvalOutput { records, summaries })
}

fn evaluate_clip(
    config: &RunConfig,
    clip: &DatasetClip,
    (dac_model, dac_store): (&DacModel, &ParamStore),
    cfc: Option<(&CfcModel, &ParamStore)>,
    mode: &str,
    recovery: RecoveryKind,
) -> Result<ClipEvalRecord> {
    let n_l = config.data.n_local;
    let n_nl = config.data.n_nonlocal;
    let total = clip.frames.len();
    if total < n_l + n_nl {
        return Err(Error::MissingData(format!(
            "clip {} too short for the evaluation window",
            clip.id
        )));
    }
    let local_idx: Vec<usize> = (0..n_l).collect();
    let nonlocal_idx: Vec<usize> = (total - n_nl..total).collect();
    let locals = clip.frames.select_frames(&local_idx);
    let nonlocals = clip.frames.select_frames(&nonlocal_idx);
    let clean = clip.clean.select_frames(&local_idx);
    let gt = clip.gt_masks.select_frames(&local_idx);
    let sideinfo: Vec<_> = local_idx.iter().map(|&i| clip.sideinfo[i].clone()).collect();

    // detection masks (blind) or oracle masks
    let (used_masks, detection) = if mode == "blind" {
        let pred = dac_model.predict_binary_masks(dac_store, &locals, &sideinfo)?;
        let report = detection_metrics(&pred, &gt)?;
        (pred, Some(report))
    } else {
        (gt.clone(), None)
    };

    let recovered: VideoSequence = match recovery {
        RecoveryKind::Identity => locals.clone(),
        RecoveryKind::Model => {
            let (cfc_model, cfc_store) = cfc.expect("checked in evaluate");
            let models = Models {
                dac: dac_model,
                dac_store,
                cfc: cfc_model,
                cfc_store,
            };
            let (out, _) = recover(&locals, Some(&used_masks), &sideinfo, &nonlocals, &models)?;
            out
        }
    };

    let quality = sequence_quality(&recovered, &clean)?;
    let masked = masked_region_metrics(&recovered, &clean, &gt)?;
    let baseline = masked_region_metrics(&locals, &clean, &gt)?;
    Ok(ClipEvalRecord {
        clip: clip.id.clone(),
        mode: mode.to_string(),
        psnr: quality.psnr_db,
        ssim: quality.ssim,
        masked_psnr: masked_psnr_or_nan(&masked),
        masked_ssim: masked.ssim,
        baseline_masked_psnr: masked_psnr_or_nan(&baseline),
        detection,
    })
}

fn masked_psnr_or_nan(r: &QualityReport) -> f64 {
    if r.empty_region {
        f64::NAN
    } else {
        r.psnr_db
    }
}

fn summarize(records: &[ClipEvalRecord], mode: &str) -> EvalSummary {
    let rows: Vec<_> = records.iter().filter(|r| r.mode == mode).collect();
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_masked = rows
        .iter()
        .map(|r| r.masked_psnr)
        .filter(|v| v.is_finite())
        .sum::<f64>()
        / rows.iter().filter(|r| r.masked_psnr.is_finite()).count().max(1) as f64;
    let ious: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.detection.as_ref().map(|d| d.mean_iou))
        .collect();
    EvalSummary {
        mode: mode.to_string(),
        mean_psnr,
        mean_masked_psnr: mean_masked,
        mean_iou: if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        },
    }
}

/// Render the aligned-column text table, one row per (clip, mode), with a
/// blind-vs-oracle delta column when both modes are present.
pub fn render_table(output: &EvalOutput) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:<7} {:>8} {:>8} {:>9} {:>9} {:>10} {:>7} {:>7}\n",
        "clip", "mode", "psnr", "ssim", "m-psnr", "m-ssim", "base-psnr", "iou", "recall"
    ));
    for r in &output.records {
        s.push_str(&format!(
            "{:<10} {:<7} {:>8.3} {:>8} {:>9.3} {:>9} {:>10.3} {:>7} {:>7}\n",
            r.clip,
            r.mode,
            r.psnr,
            r.ssim.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.masked_psnr,
            r.masked_ssim
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
            r.baseline_masked_psnr,
            r.detection
                .map(|d| format!("{:.3}", d.mean_iou))
                .unwrap_or_else(|| "-".into()),
            r.detection
                .map(|d| format!("{:.3}", d.mean_recall))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    s.push('\n');
    for summary in &output.summaries {
        s.push_str(&format!(
            "mean[{}]: psnr {:.3}  masked-psnr {:.3}{}\n",
            summary.mode,
            summary.mean_psnr,
            summary.mean_masked_psnr,
            summary
                .mean_iou
                .map(|v| format!("  iou {v:.3}"))
                .unwrap_or_default(),
        ));
    }
    // blind-vs-oracle delta per clip when both rows exist
    let blind: Vec<_> = output.records.iter().filter(|r| r.mode == "blind").collect();
    let oracle: Vec<_> = output.records.iter().filter(|r| r.mode == "oracle").collect();
    if !blind.is_empty() && !oracle.is_empty() {
        s.push('\n');
        s.push_str(&format!("{:<10} {:>16}\n", "clip", "blind-oracle dB"));
        for b in &blind {
            if let Some(o) = oracle.iter().find(|o| o.clip == b.clip) {
                s.push_str(&format!(
                    "{:<10} {:>16.3}\n",
                    b.clip,
                    b.masked_psnr - o.masked_psnr
                ));
            }
        }
    }
    s
}

/// Write the JSON-lines record file next to the text table.
pub fn write_reports(output: &EvalOutput, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut jsonl = String::new();
    for r in &output.records {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        jsonl.push('\n');
    }
    for summary in &output.summaries {
        jsonl
            .push_str(&serde_json::to_string(summary).map_err(|e| Error::Parse(e.to_string()))?);
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join("report.jsonl"), jsonl)?;
    std::fs::write(out_dir.join("report.txt"), render_table(output))?;
    Ok(())
}
