//! Detection loss: weighted focal + dice + L1(IoU) + cross-entropy.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// Loss term weights. The default 20:1:1:1 split follows the segmentation
/// convention of weighting focal high relative to dice/CE.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DacLossWeights {
    pub focal: f64,
    pub dice: f64,
    pub l1: f64,
    pub ce: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for DacLossWeights {
    fn default() -> Self {
        DacLossWeights {
            focal: 20.0,
            dice: 1.0,
            l1: 1.0,
            ce: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Combined detection loss for one frame.
///
/// `logits` is the `[H, W]` pre-sigmoid mask prediction; `gt` must be
/// strictly binary. `iou` optionally supervises an auxiliary IoU
/// prediction: `(iou_pred in (0,1) on the tape, target value)`; when absent
/// the L1 term is skipped.
pub fn dac_loss(
    tape: &mut Tape,
    logits: TensorRef,
    gt: &Array2<f64>,
    iou: Option<(TensorRef, f64)>,
    weights: &DacLossWeights,
) -> Result<TensorRef> {
    let lsh = tape.shape(logits).to_vec();
    if lsh != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dac_loss: logits {:?} vs gt {:?}",
            lsh,
            gt.shape()
        )));
    }
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(
            "dac_loss: gt mask must be binary".into(),
        ));
    }
    let n = gt.len() as f64;
    let g = tape.leaf(gt.clone().into_dyn());
    let one_minus_g = tape.leaf(gt.mapv(|v| 1.0 - v).into_dyn());

    let p = tape.sigmoid(logits);
    let neg_logits = tape.neg(logits);

    // focal: alpha (1-p)^gamma softplus(-x) on positives,
    //        (1-alpha) p^gamma softplus(x) on negatives
    let one = tape.leaf(ArrayD::ones(IxDyn(&lsh)));
    let one_minus_p = tape.sub(one, p);
    let pos_mod = tape.powf_const(one_minus_p, weights.focal_gamma);
    let neg_mod = tape.powf_const(p, weights.focal_gamma);
    let nll_pos = tape.softplus(neg_logits);
    let nll_neg = tape.softplus(logits);
    let f_pos0 = tape.mul(pos_mod, nll_pos);
    let f_pos1 = tape.mul(f_pos0, g);
    let f_pos = tape.scale(f_pos1, weights.focal_alpha);
    let f_neg0 = tape.mul(neg_mod, nll_neg);
    let f_neg1 = tape.mul(f_neg0, one_minus_g);
    let f_neg = tape.scale(f_neg1, 1.0 - weights.focal_alpha);
    let focal_map = tape.add(f_pos, f_neg);
    let focal = tape.mean_all(focal_map);

    // soft dice: 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)
    let eps = 1e-7;
    let pg = tape.mul(p, g);
    let inter = tape.sum_all(pg);
    let num0 = tape.scale(inter, 2.0);
    let num = tape.shift(num0, eps);
    let sum_p = tape.sum_all(p);
    let sum_g_val = gt.sum();
    let den0 = tape.shift(sum_p, sum_g_val + eps);
    let den_inv = tape.recip(den0);
    let ratio = tape.mul(num, den_inv);
    let neg_ratio = tape.neg(ratio);
    let dice = tape.shift(neg_ratio, 1.0);

    // binary cross-entropy with logits: softplus(x) - x*g, averaged
    let sp = tape.softplus(logits);
    let xg = tape.mul(logits, g);
    let ce_map = tape.sub(sp, xg);
    let ce = tape.mean_all(ce_map);

    let focal_w = tape.scale(focal, weights.focal);
    let dice_w = tape.scale(dice, weights.dice);
    let ce_w = tape.scale(ce, weights.ce);
    let mut total = tape.add(focal_w, dice_w);
    total = tape.add(total, ce_w);

    if let Some((iou_pred, iou_target)) = iou {
        let target = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), iou_target));
        let diff = tape.sub(iou_pred, target);
        let l1 = tape.abs_t(diff);
        let l1_sum = tape.sum_all(l1);
        let l1_w = tape.scale(l1_sum, weights.l1);
        total = tape.add(total, l1_w);
    }
    let _ = n;
    Ok(total)
}

/// IoU between a thresholded prediction and the binary ground truth,
/// computed outside the tape (constant for the L1 target).
pub fn threshold_iou(logits: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (l, g) in logits.iter().zip(gt.iter()) {
        let p = crate::tensor::sigmoid_scalar(*l) > threshold;
        let t = *g == 1.0;
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_loss(logits: &Array2<f64>, gt: &Array2<f64>, iou: Option<f64>) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone().into_dyn());
        let iou_arg = iou.map(|target| {
            let raw = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0));
            let pred = tape.sigmoid(raw); // 0.5
            (pred, target)
        });
        let loss = dac_loss(&mut tape, l, gt, iou_arg, &DacLossWeights::default()).unwrap();
        tape.scalar(loss)
    }

    #[test]
    fn saturated_correct_prediction_is_near_zero() {
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| if (y + x) % 3 == 0 { 1.0 } else { 0.0 });
        let logits = gt.mapv(|v| if v == 1.0 { 20.0 } else { -20.0 });
        let loss = run_loss(&logits, &gt, None);
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn dice_term_matches_hand_computation() {
        // gt all ones, logits 0 -> p = 0.5 everywhere:
        // dice = 1 - (2*0.5*N)/(0.5*N + N) = 1/3
        let gt = Array2::ones((8, 8));
        let logits = Array2::zeros((8, 8));
        let weights = DacLossWeights {
            focal: 0.0,
            dice: 1.0,
            l1: 0.0,
            ce: 0.0,
            ..DacLossWeights::default()
        };
        let mut tape = Tape::new();
        let l = tape.leaf(logits.into_dyn());
        let loss = dac_loss(&mut tape, l, &gt, None, &weights).unwrap();
        let v = tape.scalar(loss);
        assert!((v - 1.0 / 3.0).abs() < 1e-6, "dice {v}");
    }

    #[test]
    fn non_binary_gt_rejected() {
        let gt = Array2::from_elem((4, 4), 0.5);
        let logits = Array2::zeros((4, 4));
        let mut tape = Tape::new();
        let l = tape.leaf(logits.into_dyn());
        assert!(dac_loss(&mut tape, l, &gt, None, &DacLossWeights::default()).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let gt = Array2::zeros((4, 4));
        let logits = Array2::zeros((4, 5));
        let mut tape = Tape::new();
        let l = tape.leaf(logits.into_dyn());
        assert!(dac_loss(&mut tape, l, &gt, None, &DacLossWeights::default()).is_err());
    }

    #[test]
    fn iou_l1_term_contributes() {
        let gt = Array2::ones((4, 4));
        let logits = Array2::from_elem((4, 4), 20.0);
        let without = run_loss(&logits, &gt, None);
        let with = run_loss(&logits, &gt, Some(1.0)); // pred 0.5, target 1 -> +0.5
        assert!((with - without - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gradient_descent_decreases_loss() {
        // optimize raw logits directly for 50 steps of plain gradient descent
        let gt = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 1.0 } else { 0.0 });
        let mut store = crate::nn::ParamStore::new();
        let mut rng = crate::rng::stream(0, "init");
        let mut pb = crate::nn::ParamBuilder::new(&mut store, "t", &mut rng);
        let logits_id = pb.uniform("logits", &[8, 8], 64);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let l = tape.param(&store, logits_id);
            let loss = dac_loss(&mut tape, l, &gt, None, &DacLossWeights::default()).unwrap();
            losses.push(tape.scalar(loss));
            let grads = tape.backward(loss);
            let g = grads.get(logits_id).unwrap().clone();
            store
                .value_mut(logits_id)
                .zip_mut_with(&g, |x, &d| *x -= 0.5 * d);
        }
        let mut non_monotone = 0;
        for w in losses.windows(2) {
            if w[1] >= w[0] {
                non_monotone += 1;
            }
        }
        assert!(non_monotone <= 5, "{non_monotone} non-monotone steps");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn threshold_iou_conventions() {
        let gt = Array2::zeros((4, 4));
        let logits = Array2::from_elem((4, 4), -20.0);
        assert_eq!(threshold_iou(&logits, &gt, 0.5), 1.0); // both empty
        let gt2 = Array2::ones((4, 4));
        assert_eq!(threshold_iou(&logits, &gt2, 0.5), 0.0); // disjoint
    }
}
