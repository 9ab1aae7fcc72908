//! Bitstream-derived side information: motion-vector maps and
//! prediction-mode embeddings.
//!
//! Motion vectors live on the macroblock grid. Their direction is mapped to
//! HSV hue, magnitude to HSV value (capped at `v_max`; an infinite `v_max`
//! gives direction-only rendering with a constant value channel), and the
//! result is blended with the frame at ratio `eta`.
//!
//! Side information is ingested from a JSON sidecar any codec tool can
//! emit: `{"version":1, "grid":[gh,gw], "frames":[{"mode":"P","mv":[[dx,dy],..]},..]}`
//! with `mv` row-major over the grid and omitted for intra frames.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videodata::MACROBLOCK;

/// Frame coding type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredMode {
    I,
    P,
    B,
}

impl PredMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredMode::I => "I",
            PredMode::P => "P",
            PredMode::B => "B",
        }
    }

    pub fn from_str(s: &str) -> Option<PredMode> {
        match s {
            "I" => Some(PredMode::I),
            "P" => Some(PredMode::P),
            "B" => Some(PredMode::B),
            _ => None,
        }
    }
}

/// Per-frame side information: a macroblock motion-vector field `(dx, dy)`
/// in pixels plus the frame's prediction mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SideInfo {
    /// `[gh, gw, 2]` with `gh = H/block`, `gw = W/block`.
    pub mv_field: Array3<f64>,
    pub pred_mode: PredMode,
    /// Macroblock size B of the grid; 16 for real codecs, smaller grids
    /// appear only in reduced test fixtures.
    pub block: usize,
}

impl SideInfo {
    pub fn zero(gh: usize, gw: usize) -> Self {
        Self::zero_with_block(gh, gw, MACROBLOCK)
    }

    pub fn zero_with_block(gh: usize, gw: usize, block: usize) -> Self {
        SideInfo {
            mv_field: Array3::zeros((gh, gw, 2)),
            pred_mode: PredMode::I,
            block,
        }
    }

    pub fn validate_for_frame(&self, h: usize, w: usize) -> Result<()> {
        let sh = self.mv_field.shape();
        let b = self.block;
        if b == 0 || h % b != 0 || w % b != 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame {h}x{w} not divisible by macroblock {b}"
            )));
        }
        if sh[0] != h / b || sh[1] != w / b || sh[2] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "mv grid {:?} inconsistent with {h}x{w} frame at macroblock {b}",
                sh
            )));
        }
        if self.mv_field.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mv_field contains non-finite values".into()));
        }
        Ok(())
    }
}

/// HSV rendering of a motion-vector field, blended with its frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionVectorMap {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Array3<f64>,
}

/// Render the motion-vector HSV map for one frame and blend it in.
///
/// Per macroblock: hue = atan2(dy, dx) wrapped to [0,1), saturation = 1,
/// value = min(1, |mv|/v_max). Zero-magnitude blocks render black.
/// Output = `eta * mv_rgb + (1 - eta) * frame`.
pub fn render_mv_map(
    sideinfo: &SideInfo,
    frame: &Array3<f64>,
    eta: f64,
    v_max: f64,
) -> Result<MotionVectorMap> {
    let sh = frame.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "frame must be [H,W,3], got {sh:?}"
        )));
    }
    let (h, w) = (sh[0], sh[1]);
    sideinfo.validate_for_frame(h, w)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {eta} outside [0,1]")));
    }
    let b = sideinfo.block;
    let (gh, gw) = (h / b, w / b);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for cy in 0..gh {
        for cx in 0..gw {
            let dx = sideinfo.mv_field[[cy, cx, 0]];
            let dy = sideinfo.mv_field[[cy, cx, 1]];
            let mag = (dx * dx + dy * dy).sqrt();
            let rgb = if mag == 0.0 {
                [0.0, 0.0, 0.0]
            } else {
                let hue = (dy.atan2(dx) / std::f64::consts::TAU).rem_euclid(1.0);
                let value = if v_max.is_finite() {
                    (mag / v_max).min(1.0)
                } else {
                    1.0
                };
                hsv_to_rgb(hue, 1.0, value)
            };
            for py in 0..b {
                for px in 0..b {
                    let (y, x) = (cy * b + py, cx * b + px);
                    for c in 0..3 {
                        out[[y, x, c]] = eta * rgb[c] + (1.0 - eta) * frame[[y, x, c]];
                    }
                }
            }
        }
    }
    Ok(MotionVectorMap { image: out })
}

/// Standard sextant HSV to RGB conversion, `h` in [0,1).
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i64;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One-hot encoding of the prediction mode, order fixed as (I, P, B).
pub fn encode_pred_mode(mode: PredMode) -> [f64; 3] {
    match mode {
        PredMode::I => [1.0, 0.0, 0.0],
        PredMode::P => [0.0, 1.0, 0.0],
        PredMode::B => [0.0, 0.0, 1.0],
    }
}

fn default_block() -> usize {
    MACROBLOCK
}

#[derive(Serialize, Deserialize)]
struct SidecarFile {
    version: u32,
    /// `[gh, gw]`
    grid: [usize; 2],
    #[serde(default = "default_block")]
    block: usize,
    frames: Vec<SidecarFrame>,
}

#[derive(Serialize, Deserialize)]
struct SidecarFrame {
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mv: Option<Vec<[f64; 2]>>,
}

/// Parse a sidecar file into per-frame [`SideInfo`] records.
///
/// Intra frames may omit the `mv` array and get a zero-filled grid; inter
/// frames must carry exactly `gh*gw` row-major vectors. Schema violations
/// report the offending frame and field.
pub fn parse_sidecar(path: &Path) -> Result<Vec<SideInfo>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    let file: SidecarFile = serde_json::from_str(&text).map_err(|e| {
        Error::Parse(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    if file.version != 1 {
        return Err(Error::Parse(format!(
            "{}: unsupported sidecar version {}",
            path.display(),
            file.version
        )));
    }
    let [gh, gw] = file.grid;
    if gh == 0 || gw == 0 {
        return Err(Error::Parse(format!(
            "{}: grid dims must be positive, got {gh}x{gw}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(file.frames.len());
    for (fi, frame) in file.frames.iter().enumerate() {
        let mode = PredMode::from_str(&frame.mode).ok_or_else(|| {
            Error::Parse(format!(
                "{}: frame {fi}: unknown prediction mode {:?}",
                path.display(),
                frame.mode
            ))
        })?;
        let mv_field = match (&frame.mv, mode) {
            (None, PredMode::I) => Array3::zeros((gh, gw, 2)),
            (None, _) => {
                return Err(Error::Parse(format!(
                    "{}: frame {fi}: inter frame ({}) is missing its mv array",
                    path.display(),
                    mode.as_str()
                )))
            }
            (Some(mv), _) => {
                if mv.len() != gh * gw {
                    return Err(Error::Parse(format!(
                        "{}: frame {fi}: mv has {} entries, grid needs {}",
                        path.display(),
                        mv.len(),
                        gh * gw
                    )));
                }
                let mut field = Array3::zeros((gh, gw, 2));
                for (k, v) in mv.iter().enumerate() {
                    if !v[0].is_finite() || !v[1].is_finite() {
                        return Err(Error::Parse(format!(
                            "{}: frame {fi}: mv[{k}] is not finite",
                            path.display()
                        )));
                    }
                    field[[k / gw, k % gw, 0]] = v[0];
                    field[[k / gw, k % gw, 1]] = v[1];
                }
                field
            }
        };
        out.push(SideInfo {
            mv_field,
            pred_mode: mode,
            block: file.block,
        });
    }
    Ok(out)
}

/// Write side information in the sidecar schema read by [`parse_sidecar`].
pub fn write_sidecar(path: &Path, infos: &[SideInfo]) -> Result<()> {
    if infos.is_empty() {
        return Err(Error::InvalidArgument("cannot write empty sidecar".into()));
    }
    let sh = infos[0].mv_field.shape();
    let (gh, gw) = (sh[0], sh[1]);
    let frames: Vec<SidecarFrame> = infos
        .iter()
        .map(|si| {
            let is_zero = si.mv_field.iter().all(|&v| v == 0.0);
            let mv = if si.pred_mode == PredMode::I && is_zero {
                None
            } else {
                let mut v = Vec::with_capacity(gh * gw);
                for cy in 0..gh {
                    for cx in 0..gw {
                        v.push([si.mv_field[[cy, cx, 0]], si.mv_field[[cy, cx, 1]]]);
                    }
                }
                Some(v)
            };
            SidecarFrame {
                mode: si.pred_mode.as_str().to_string(),
                mv,
            }
        })
        .collect();
    let file = SidecarFile {
        version: 1,
        grid: [gh, gw],
        block: infos[0].block,
        frames,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Parse(format!("sidecar serialization: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}
