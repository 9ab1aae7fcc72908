//! Seeded synthetic bitstream-style corruption with ground-truth masks.
//!
//! Corruption regions are unions of macroblock-aligned rectangles plus
//! full-width stripe rows, mirroring how slice loss decodes into
//! block/row-structured damage. Artifact content per region comes from one
//! of the [`CorruptionKind`] families; a `residual_retention` fraction of
//! the clean signal is linearly mixed back in, so residual texture and
//! color survive inside corrupted regions.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{CorruptionKind, CorruptionSpec, MaskSequence, VideoSequence, MACROBLOCK};
use crate::error::Result;
use crate::sideinfo::{PredMode, SideInfo};

/// Apply `spec` to a clean sequence. Returns the corrupted sequence and the
/// exact ground-truth mask. Bit-identical for a fixed `(clean, spec)`.
pub fn simulate_corruption(
    clean: &VideoSequence,
    spec: &CorruptionSpec,
) -> Result<(VideoSequence, MaskSequence)> {
    clean.validate()?;
    spec.validate()?;

    let (l, h, w) = (clean.len(), clean.height(), clean.width());
    let (gh, gw) = (h / MACROBLOCK, w / MACROBLOCK);
    let mut rng = crate::rng::stream(spec.seed, "simulate");

    let mut corrupted = clean.frames.clone();
    let mut masks = Array3::<f64>::zeros((l, h, w));

    for fi in 0..l {
        let cells = select_cells(&mut rng, gh, gw, spec.area_fraction);
        let mut regions = cells_to_regions(&cells, gh, gw);
        prepare_regions(&mut rng, &mut regions);
        for region in &regions {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            for &(cy, cx) in &region.cells {
                for py in 0..MACROBLOCK {
                    for px in 0..MACROBLOCK {
                        let (y, x) = (cy * MACROBLOCK + py, cx * MACROBLOCK + px);
                        masks[[fi, y, x]] = 1.0;
                        for ch in 0..3 {
                            let clean_v = clean.frames[[fi, y, x, ch]];
                            let artifact = artifact_value(
                                kind, &mut rng, clean, &corrupted, fi, y, x, ch, region,
                            );
                            let r = spec.residual_retention;
                            let v = (1.0 - r) * artifact + r * clean_v;
                            corrupted[[fi, y, x, ch]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }

    let video = VideoSequence {
        frames: corrupted,
        fps: clean.fps,
    };
    let gt = MaskSequence {
        masks,
        binary: true,
    };
    Ok((video, gt))
}

struct Region {
    cells: Vec<(usize, usize)>,
    /// Per-region randomized parameters, drawn once so a region is coherent.
    stripe_colors: [[f64; 3]; 4],
    shift: (isize, isize),
}

/// Pick macroblock cells covering as close to `area_fraction` of the frame
/// as the grid granularity allows: the target cell count is the rounded
/// fraction of the grid, clamped to at least one cell.
fn select_cells(rng: &mut ChaCha20Rng, gh: usize, gw: usize, area_fraction: f64) -> Array2<bool> {
    let total = gh * gw;
    let target = ((area_fraction * total as f64).round() as usize).clamp(1, total - 1);
    let mut covered = Array2::<bool>::from_elem((gh, gw), false);
    let mut n_covered = 0usize;
    while n_covered < target {
        let remaining = target - n_covered;
        // stripes (full-width rows) and rectangles, both macroblock-aligned
        let stripe = gw <= remaining && rng.random_range(0..4) == 0;
        let (y0, x0, rh, rw) = if stripe {
            (rng.random_range(0..gh), 0, 1, gw)
        } else {
            let rh = rng.random_range(1..=gh.min(3));
            let rw = rng.random_range(1..=gw.min(4));
            (
                rng.random_range(0..=gh - rh),
                rng.random_range(0..=gw - rw),
                rh,
                rw,
            )
        };
        // commit new cells row-major, truncated to the remaining budget
        let mut added = 0usize;
        'outer: for cy in y0..y0 + rh {
            for cx in x0..x0 + rw {
                if !covered[[cy, cx]] {
                    covered[[cy, cx]] = true;
                    n_covered += 1;
                    added += 1;
                    if added == remaining {
                        break 'outer;
                    }
                }
            }
        }
    }
    covered
}

/// Group covered cells into 4-connected regions so each gets one coherent
/// artifact kind and parameter draw.
fn cells_to_regions(covered: &Array2<bool>, gh: usize, gw: usize) -> Vec<Region> {
    let mut seen = Array2::<bool>::from_elem((gh, gw), false);
    let mut regions = Vec::new();
    for sy in 0..gh {
        for sx in 0..gw {
            if !covered[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let mut cells = Vec::new();
            let mut stack = vec![(sy, sx)];
            seen[[sy, sx]] = true;
            while let Some((cy, cx)) = stack.pop() {
                cells.push((cy, cx));
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < gh && nx < gw && covered[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            cells.sort_unstable();
            regions.push(Region {
                cells,
                stripe_colors: [[0.0; 3]; 4],
                shift: (0, 0),
            });
        }
    }
    regions
}

#[allow(clippy::too_many_arguments)]
fn artifact_value(
    kind: CorruptionKind,
    rng: &mut ChaCha20Rng,
    clean: &VideoSequence,
    corrupted: &ndarray::Array4<f64>,
    fi: usize,
    y: usize,
    x: usize,
    ch: usize,
    region: &Region,
) -> f64 {
    match kind {
        CorruptionKind::ColorStripe => {
            // saturated bands, 4 pixels tall, cycling through region colors
            let band = (y / 4) % 4;
            region.stripe_colors[band][ch]
        }
        CorruptionKind::BlockShift => {
            let (h, w) = (clean.height() as isize, clean.width() as isize);
            let sy = (y as isize + region.shift.0).rem_euclid(h) as usize;
            let sx = (x as isize + region.shift.1).rem_euclid(w) as usize;
            clean.frames[[fi, sy, sx, ch]]
        }
        CorruptionKind::FreezePropagate => {
            if fi == 0 {
                // nothing to propagate on the first frame: mid-gray
                0.5
            } else {
                corrupted[[fi - 1, y, x, ch]]
            }
        }
        CorruptionKind::TextureNoise => rng.random_range(0.0..1.0),
    }
}

/// Draw the per-region parameters before painting. Called by
/// [`simulate_corruption`] through [`fill_region_params`].
fn fill_region_params(rng: &mut ChaCha20Rng, region: &mut Region) {
    for band in region.stripe_colors.iter_mut() {
        // saturated primaries/secondaries: each channel snaps to 0 or 1
        for c in band.iter_mut() {
            *c = if rng.random_range(0..2) == 0 { 0.0 } else { 1.0 };
        }
    }
    let choices: [isize; 4] = [-2, -1, 1, 2];
    region.shift = (
        choices[rng.random_range(0..4)] * MACROBLOCK as isize,
        choices[rng.random_range(0..4)] * MACROBLOCK as isize,
    );
}

/// Synthesize per-frame codec side information for a (clean, mask) pair.
///
/// Motion vectors come from exhaustive block matching against the previous
/// clean frame; inside corrupted cells the vectors are degraded the way a
/// damaged bitstream degrades them (zeroed or aberrant), which is exactly
/// the signal the detector's bitstream prompts feed on. Frame 0 and every
/// `gop`-th frame are intra (zero field, mode I).
pub fn simulate_sideinfo(
    clean: &VideoSequence,
    gt: &MaskSequence,
    seed: u64,
    gop: usize,
) -> Vec<SideInfo> {
    let (l, h, w) = (clean.len(), clean.height(), clean.width());
    let (gh, gw) = (h / MACROBLOCK, w / MACROBLOCK);
    let mut rng = crate::rng::stream(seed, "sideinfo");
    let mut out = Vec::with_capacity(l);
    for fi in 0..l {
        let intra = fi == 0 || (gop > 0 && fi % gop == 0);
        let mode = if intra {
            PredMode::I
        } else if fi % 3 == 2 {
            PredMode::B
        } else {
            PredMode::P
        };
        let mut mv = Array3::<f64>::zeros((gh, gw, 2));
        if !intra {
            for cy in 0..gh {
                for cx in 0..gw {
                    let (dx, dy) = block_match(clean, fi, cy, cx);
                    mv[[cy, cx, 0]] = dx;
                    mv[[cy, cx, 1]] = dy;
                }
            }
        }
        // bitstream damage: corrupted inter macroblocks carry junk vectors
        // (intra frames have no vectors to corrupt)
        if !intra {
            for cy in 0..gh {
                for cx in 0..gw {
                    let y = cy * MACROBLOCK;
                    let x = cx * MACROBLOCK;
                    if gt.masks[[fi, y, x]] == 1.0 {
                        if rng.random_range(0..2) == 0 {
                            mv[[cy, cx, 0]] = 0.0;
                            mv[[cy, cx, 1]] = 0.0;
                        } else {
                            mv[[cy, cx, 0]] = rng.random_range(-16.0..16.0);
                            mv[[cy, cx, 1]] = rng.random_range(-16.0..16.0);
                        }
                    }
                }
            }
        }
        out.push(SideInfo {
            mv_field: mv,
            pred_mode: mode,
            block: MACROBLOCK,
        });
    }
    out
}

/// Exhaustive +-4 px SAD search on the green channel.
fn block_match(clean: &VideoSequence, fi: usize, cy: usize, cx: usize) -> (f64, f64) {
    let (h, w) = (clean.height() as isize, clean.width() as isize);
    let (y0, x0) = ((cy * MACROBLOCK) as isize, (cx * MACROBLOCK) as isize);
    let mut best = (0isize, 0isize);
    let mut best_sad = f64::INFINITY;
    for dy in -4isize..=4 {
        for dx in -4isize..=4 {
            let mut sad = 0.0;
            for py in 0..MACROBLOCK as isize {
                for px in 0..MACROBLOCK as isize {
                    let (y, x) = (y0 + py, x0 + px);
                    let (ry, rx) = ((y + dy).clamp(0, h - 1), (x + dx).clamp(0, w - 1));
                    let cur = clean.frames[[fi, y as usize, x as usize, 1]];
                    let prev = clean.frames[[fi - 1, ry as usize, rx as usize, 1]];
                    sad += (cur - prev).abs();
                }
            }
            if sad < best_sad {
                best_sad = sad;
                best = (dx, dy);
            }
        }
    }
    (best.0 as f64, best.1 as f64)
}

fn prepare_regions(rng: &mut ChaCha20Rng, regions: &mut [Region]) {
    for r in regions.iter_mut() {
        fill_region_params(rng, r);
    }
}
