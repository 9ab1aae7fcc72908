//! Detection quality metrics over binary mask sequences.

use crate::error::{Error, Result};
use crate::videodata::MaskSequence;

/// Frame-averaged detection metrics, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct DetectionReport {
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub mean_acc: f64,
    pub mean_recall: f64,
}

/// Per-frame IoU / Dice / pixel accuracy / recall, averaged over frames.
///
/// Empty-set conventions: IoU and Dice are 1 when prediction and truth are
/// both empty; recall is 1 when the truth is empty.
pub fn detection_metrics(pred: &MaskSequence, gt: &MaskSequence) -> Result<DetectionReport> {
    if !pred.binary || !gt.binary {
        return Err(Error::InvalidArgument(
            "detection_metrics requires binary masks".into(),
        ));
    }
    if pred.masks.shape() != gt.masks.shape() {
        return Err(Error::ShapeMismatch(format!(
            "detection_metrics: {:?} vs {:?}",
            pred.masks.shape(),
            gt.masks.shape()
        )));
    }
    let sh = pred.masks.shape().to_vec();
    let (l, h, w) = (sh[0], sh[1], sh[2]);
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut recall_sum = 0.0;
    for fi in 0..l {
        let mut inter = 0u64;
        let mut p_count = 0u64;
        let mut g_count = 0u64;
        let mut correct = 0u64;
        for y in 0..h {
            for x in 0..w {
                let p = pred.masks[[fi, y, x]] == 1.0;
                let g = gt.masks[[fi, y, x]] == 1.0;
                if p {
                    p_count += 1;
                }
                if g {
                    g_count += 1;
                }
                if p && g {
                    inter += 1;
                }
                if p == g {
                    correct += 1;
                }
            }
        }
        let union = p_count + g_count - inter;
        iou_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        dice_sum += if p_count + g_count == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (p_count + g_count) as f64
        };
        acc_sum += correct as f64 / (h * w) as f64;
        recall_sum += if g_count == 0 {
            1.0
        } else {
            inter as f64 / g_count as f64
        };
    }
    let n = l as f64;
    Ok(DetectionReport {
        mean_iou: iou_sum / n,
        mean_dice: dice_sum / n,
        mean_acc: acc_sum / n,
        mean_recall: recall_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn mask_from(data: Array3<f64>) -> MaskSequence {
        MaskSequence::new_binary(data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let m = mask_from(Array3::from_shape_fn((2, 8, 8), |(_, y, x)| {
            if y * x % 3 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let r = detection_metrics(&m, &m).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_acc, 1.0);
        assert_eq!(r.mean_recall, 1.0);
    }

    #[test]
    fn disjoint_nonempty_scores_zero() {
        let pred = mask_from(Array3::from_shape_fn((1, 4, 4), |(_, y, _)| {
            if y < 2 {
                1.0
            } else {
                0.0
            }
        }));
        let gt = mask_from(Array3::from_shape_fn((1, 4, 4), |(_, y, _)| {
            if y >= 2 {
                1.0
            } else {
                0.0
            }
        }));
        let r = detection_metrics(&pred, &gt).unwrap();
        assert_eq!(r.mean_iou, 0.0);
        assert_eq!(r.mean_dice, 0.0);
        assert_eq!(r.mean_recall, 0.0);
        assert_eq!(r.mean_acc, 0.0);
    }

    #[test]
    fn both_empty_conventions() {
        let empty = mask_from(Array3::zeros((1, 4, 4)));
        let r = detection_metrics(&empty, &empty).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_recall, 1.0);
        assert_eq!(r.mean_acc, 1.0);
    }

    /// Independent oracle: re-derive every metric from raw pixel counts in
    /// a separate pass, then demand exact equality.
    #[test]
    fn matches_pixel_counting_oracle_exactly() {
        let mut rng = crate::rng::stream(0, "masks");
        for _ in 0..200 {
            let pred = mask_from(Array3::from_shape_fn((1, 8, 8), |_| {
                if rng.random_range(0..2) == 0 {
                    1.0
                } else {
                    0.0
                }
            }));
            let gt = mask_from(Array3::from_shape_fn((1, 8, 8), |_| {
                if rng.random_range(0..2) == 0 {
                    1.0
                } else {
                    0.0
                }
            }));
            let r = detection_metrics(&pred, &gt).unwrap();

            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            let mut tn = 0u64;
            for y in 0..8 {
                for x in 0..8 {
                    match (pred.masks[[0, y, x]] == 1.0, gt.masks[[0, y, x]] == 1.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            let iou = if tp + fp + fn_ == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp + fn_) as f64
            };
            let dice = if 2 * tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            let acc = (tp + tn) as f64 / 64.0;
            let recall = if tp + fn_ == 0 {
                1.0
            } else {
                tp as f64 / (tp + fn_) as f64
            };
            assert_eq!(r.mean_iou, iou);
            assert_eq!(r.mean_dice, dice);
            assert_eq!(r.mean_acc, acc);
            assert_eq!(r.mean_recall, recall);
        }
    }

    #[test]
    fn soft_masks_rejected() {
        let soft = MaskSequence::new_soft(Array3::from_elem((1, 4, 4), 0.3)).unwrap();
        let hard = mask_from(Array3::zeros((1, 4, 4)));
        assert!(detection_metrics(&soft, &hard).is_err());
    }
}
