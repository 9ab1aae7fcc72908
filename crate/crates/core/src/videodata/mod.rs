//! Core video data types, synthetic corruption, and dataset I/O.

mod io;
mod sim;
mod synth;

pub use io::{load_mask_sequence, load_video, save_mask_sequence, save_video, Dataset, DatasetClip};
pub use sim::{simulate_corruption, simulate_sideinfo};
pub use synth::synthesize_clean_clip;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::sideinfo::SideInfo;

/// Spatial coding unit; corruption regions and motion vectors align to it.
pub const MACROBLOCK: usize = 16;

/// An ordered frame sequence with float intensities in `[0, 1]`,
/// stored `[L, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Array4<f64>,
    pub fps: f64,
}

impl VideoSequence {
    pub fn new(frames: Array4<f64>, fps: f64) -> Result<Self> {
        let v = VideoSequence { frames, fps };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.frames.shape();
        if sh.len() != 4 || sh[3] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "video frames must be [L,H,W,3], got {sh:?}"
            )));
        }
        if sh[0] < 1 {
            return Err(Error::InvalidArgument("video must have at least 1 frame".into()));
        }
        if sh[1] % MACROBLOCK != 0 || sh[2] % MACROBLOCK != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dims {}x{} not divisible by macroblock size {MACROBLOCK}",
                sh[1], sh[2]
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        for &v in self.frames.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "pixel value {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Single frame as an owned `[H, W, 3]` array.
    pub fn frame(&self, i: usize) -> Array3<f64> {
        self.frames.index_axis(ndarray::Axis(0), i).to_owned()
    }

    /// Sub-sequence with the given frame indices, in order.
    pub fn select_frames(&self, indices: &[usize]) -> VideoSequence {
        let views: Vec<_> = indices
            .iter()
            .map(|&i| self.frames.index_axis(ndarray::Axis(0), i))
            .collect();
        let frames = ndarray::stack(ndarray::Axis(0), &views).unwrap();
        VideoSequence { frames, fps: self.fps }
    }
}

/// Per-frame corruption indicator, `[L, H, W]`. `binary` marks masks that
/// contain only {0, 1}; raw detector outputs in `[0, 1]` carry `binary: false`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    pub masks: Array3<f64>,
    pub binary: bool,
}

impl MaskSequence {
    pub fn new_binary(masks: Array3<f64>) -> Result<Self> {
        for &v in masks.iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "binary mask contains non-binary value {v}"
                )));
            }
        }
        Ok(MaskSequence { masks, binary: true })
    }

    pub fn new_soft(masks: Array3<f64>) -> Result<Self> {
        for &v in masks.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "soft mask value {v} outside [0,1]"
                )));
            }
        }
        Ok(MaskSequence { masks, binary: false })
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Threshold a soft mask into a binary one.
    pub fn threshold(&self, thr: f64) -> MaskSequence {
        MaskSequence {
            masks: self.masks.mapv(|v| if v > thr { 1.0 } else { 0.0 }),
            binary: true,
        }
    }

    pub fn frame(&self, i: usize) -> ndarray::Array2<f64> {
        self.masks.index_axis(ndarray::Axis(0), i).to_owned()
    }

    pub fn select_frames(&self, indices: &[usize]) -> MaskSequence {
        let views: Vec<_> = indices
            .iter()
            .map(|&i| self.masks.index_axis(ndarray::Axis(0), i))
            .collect();
        MaskSequence {
            masks: ndarray::stack(ndarray::Axis(0), &views).unwrap(),
            binary: self.binary,
        }
    }

    /// Check spatial/temporal agreement with a paired video.
    pub fn matches(&self, video: &VideoSequence) -> bool {
        let m = self.masks.shape();
        let f = video.frames.shape();
        m[0] == f[0] && m[1] == f[1] && m[2] == f[2]
    }
}

/// Corruption artifact families produced by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Saturated horizontal color bands, the classic slice-loss look.
    ColorStripe,
    /// Content copied from a spatially shifted location (misaligned structure).
    BlockShift,
    /// Co-located content propagated from the previous corrupted frame.
    FreezePropagate,
    /// Seeded uniform noise.
    TextureNoise,
}

/// Parameters of the synthetic corruption generator.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub seed: u64,
    pub kinds: Vec<CorruptionKind>,
    /// Target fraction of each frame covered by corruption, in (0, 1).
    pub area_fraction: f64,
    /// How much clean signal survives inside corrupted regions, in [0, 1].
    pub residual_retention: f64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument(
                "corruption spec must select at least one kind".into(),
            ));
        }
        if !(self.area_fraction > 0.0 && self.area_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "area_fraction {} outside (0,1)",
                self.area_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.residual_retention) {
            return Err(Error::InvalidArgument(format!(
                "residual_retention {} outside [0,1]",
                self.residual_retention
            )));
        }
        Ok(())
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            seed: 0,
            kinds: vec![
                CorruptionKind::ColorStripe,
                CorruptionKind::BlockShift,
                CorruptionKind::FreezePropagate,
                CorruptionKind::TextureNoise,
            ],
            area_fraction: 0.25,
            residual_retention: 0.3,
        }
    }
}

/// One training/evaluation sample: consecutive local frames to restore
/// plus non-local reference frames from the rest of the clip.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub local_frames: VideoSequence,
    pub nonlocal_frames: VideoSequence,
    pub gt_masks: MaskSequence,
    pub sideinfo: Vec<SideInfo>,
    pub clean_frames: VideoSequence,
    /// Frame indices of the local window in the source clip.
    pub local_indices: Vec<usize>,
    /// Frame indices of the non-local references in the source clip.
    pub nonlocal_indices: Vec<usize>,
}

impl ClipSample {
    pub fn validate(&self) -> Result<()> {
        let n_l = self.local_frames.len();
        if self.gt_masks.len() != n_l {
            return Err(Error::ShapeMismatch(format!(
                "gt_masks length {} != local frame count {n_l}",
                self.gt_masks.len()
            )));
        }
        if self.sideinfo.len() != n_l {
            return Err(Error::ShapeMismatch(format!(
                "sideinfo length {} != local frame count {n_l}",
                self.sideinfo.len()
            )));
        }
        if self.clean_frames.len() != n_l {
            return Err(Error::ShapeMismatch(format!(
                "clean_frames length {} != local frame count {n_l}",
                self.clean_frames.len()
            )));
        }
        Ok(())
    }
}

/// Draw a local window of `n_local` consecutive frames plus `n_nonlocal`
/// reference frames sampled without replacement from the remainder.
pub fn sample_clip(
    clip: &DatasetClip,
    n_local: usize,
    n_nonlocal: usize,
    seed: u64,
) -> Result<ClipSample> {
    use rand::Rng;
    let total = clip.frames.len();
    if total < n_local + n_nonlocal {
        return Err(Error::InvalidArgument(format!(
            "clip length {total} shorter than N_l + N_nl = {}",
            n_local + n_nonlocal
        )));
    }
    let mut rng = crate::rng::stream(seed, "sample_clip");
    let start = rng.random_range(0..=total - n_local);
    let local_indices: Vec<usize> = (start..start + n_local).collect();
    let mut rest: Vec<usize> = (0..total).filter(|i| !local_indices.contains(i)).collect();
    // partial Fisher-Yates for the non-local draw
    let mut nonlocal_indices = Vec::with_capacity(n_nonlocal);
    for _ in 0..n_nonlocal {
        let j = rng.random_range(0..rest.len());
        nonlocal_indices.push(rest.swap_remove(j));
    }

    let sample = ClipSample {
        local_frames: clip.frames.select_frames(&local_indices),
        nonlocal_frames: clip.frames.select_frames(&nonlocal_indices),
        gt_masks: clip.gt_masks.select_frames(&local_indices),
        sideinfo: local_indices.iter().map(|&i| clip.sideinfo[i].clone()).collect(),
        clean_frames: clip.clean.select_frames(&local_indices),
        local_indices,
        nonlocal_indices,
    };
    sample.validate()?;
    Ok(sample)
}
