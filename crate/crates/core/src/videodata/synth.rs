//! Procedural clean clips for desk-scale training and tests.
//!
//! Each clip is a smooth gradient background with drifting colored
//! rectangles and a moving soft disc. The content translates coherently
//! frame to frame, so block matching finds real motion.

use ndarray::Array4;
use rand::Rng;

use super::VideoSequence;

pub fn synthesize_clean_clip(seed: u64, frames: usize, h: usize, w: usize) -> VideoSequence {
    let mut rng = crate::rng::stream(seed, "synth");
    let bg_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let bg_freq: f64 = rng.random_range(1.0..3.0);

    struct Blob {
        x: f64,
        y: f64,
        vx: f64,
        vy: f64,
        w: f64,
        h: f64,
        color: [f64; 3],
        round: bool,
    }
    let n_blobs = rng.random_range(3..6);
    let mut blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            x: rng.random_range(0.0..w as f64),
            y: rng.random_range(0.0..h as f64),
            vx: rng.random_range(-3.0..3.0),
            vy: rng.random_range(-3.0..3.0),
            w: rng.random_range(0.15..0.4) * w as f64,
            h: rng.random_range(0.15..0.4) * h as f64,
            color: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
            round: rng.random_range(0..3) == 0,
        })
        .collect();

    let mut data = Array4::<f64>::zeros((frames, h, w, 3));
    for fi in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                let base = 0.5 + 0.25 * (bg_freq * std::f64::consts::TAU * u + bg_phase).sin()
                    + 0.15 * (bg_freq * std::f64::consts::TAU * v).cos();
                data[[fi, y, x, 0]] = base.clamp(0.0, 1.0) * 0.8;
                data[[fi, y, x, 1]] = (base * 0.7 + 0.1 * v).clamp(0.0, 1.0);
                data[[fi, y, x, 2]] = (0.9 - base * 0.5).clamp(0.0, 1.0);
            }
        }
        for b in &blobs {
            let (bx, by) = (b.x, b.y);
            let y0 = (by - b.h / 2.0).max(0.0) as usize;
            let y1 = ((by + b.h / 2.0) as usize).min(h);
            let x0 = (bx - b.w / 2.0).max(0.0) as usize;
            let x1 = ((bx + b.w / 2.0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let inside = if b.round {
                        let dx = (x as f64 - bx) / (b.w / 2.0);
                        let dy = (y as f64 - by) / (b.h / 2.0);
                        dx * dx + dy * dy <= 1.0
                    } else {
                        true
                    };
                    if inside {
                        for c in 0..3 {
                            data[[fi, y, x, c]] = b.color[c];
                        }
                    }
                }
            }
        }
        for b in blobs.iter_mut() {
            b.x += b.vx;
            b.y += b.vy;
            // bounce off the frame edges
            if b.x < 0.0 || b.x > w as f64 {
                b.vx = -b.vx;
                b.x = b.x.clamp(0.0, w as f64);
            }
            if b.y < 0.0 || b.y > h as f64 {
                b.vy = -b.vy;
                b.y = b.y.clamp(0.0, h as f64);
            }
        }
    }
    VideoSequence {
        frames: data,
        fps: 24.0,
    }
}
