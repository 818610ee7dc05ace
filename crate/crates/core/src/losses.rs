//! Training losses over matched prediction/ground-truth pairs.
//!
//! The box and IoU formulas rebuild `crate::boxes` on tensors with the same
//! operation order, so the differentiable path and the plain-value path
//! agree bitwise wherever both are defined; tests enforce this. The
//! classification loss is a sigmoid focal loss written in softplus form,
//! which stays finite for any logit.

use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxcywh;
use crate::decoder::LevelOutput;
use crate::error::{Error, Result};
use crate::matching::{
    distance_constraint, gt_distance, Assignment, DistanceType, GroundTruthHoi, MatchStrategy,
    MatchWeights,
};
use crate::numcore::{Tape, Tensor};
use crate::semantics::ClassSet;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Floor for IoU denominators. Well-formed boxes never reach it, so the
/// clamp changes nothing bitwise on the paths the tests compare; it only
/// keeps fully degenerate boxes finite.
const DENOM_FLOOR: f64 = 1e-12;

/// Per-component loss values for one step, serialized into the training
/// log. `total` always equals the weighted component sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "box")]
    pub box_: f64,
    pub iou: f64,
    pub cls: f64,
    pub d: f64,
    pub total: f64,
    pub matched: usize,
}

fn scalar(tape: &Tape, v: f64) -> Tensor {
    tape.constant(vec![v], &[1]).expect("scalar constant")
}

/// Mean absolute coordinate difference between a predicted box tensor (any
/// shape holding 4 values, cxcywh) and a ground-truth box.
pub fn l1_box_loss(pred: &Tensor, gt: &BoxCxcywh) -> Result<Tensor> {
    if pred.numel() != 4 {
        return Err(Error::InvalidShape {
            op: "l1_box_loss",
            expected: "4 box coordinates",
            got: pred.shape().to_vec(),
        });
    }
    let flat = pred.reshape(&[4])?;
    let target = flat.owner().constant(gt.to_vec(), &[4])?;
    Ok(flat.sub(&target)?.abs().sum().scale(0.25))
}

/// Split a 4-value cxcywh tensor into corner scalars `[x1, y1, x2, y2]`.
fn corner_tensors(b: &Tensor) -> Result<[Tensor; 4]> {
    let flat = b.reshape(&[4])?;
    let cx = flat.slice(0, 0, 1)?;
    let cy = flat.slice(0, 1, 1)?;
    let w = flat.slice(0, 2, 1)?;
    let h = flat.slice(0, 3, 1)?;
    let hw = w.scale(0.5);
    let hh = h.scale(0.5);
    Ok([cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?])
}

/// GIoU penalty `1 - GIoU(pred, gt)` as a differentiable scalar.
pub fn giou_loss(pred: &Tensor, gt: &BoxCxcywh) -> Result<Tensor> {
    if pred.numel() != 4 {
        return Err(Error::InvalidShape {
            op: "giou_loss",
            expected: "4 box coordinates",
            got: pred.shape().to_vec(),
        });
    }
    let tape = pred.owner();
    let [ax1, ay1, ax2, ay2] = corner_tensors(pred)?;
    let g = crate::boxes::to_corners(gt);
    let [bx1, by1, bx2, by2] = [
        scalar(&tape, g[0]),
        scalar(&tape, g[1]),
        scalar(&tape, g[2]),
        scalar(&tape, g[3]),
    ];
    let zero = scalar(&tape, 0.0);
    let area = |x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor| -> Result<Tensor> {
        let w = x2.sub(x1)?.maximum(&zero)?;
        let h = y2.sub(y1)?.maximum(&zero)?;
        w.mul(&h)
    };
    let iw = ax2.minimum(&bx2)?.sub(&ax1.maximum(&bx1)?)?;
    let ih = ay2.minimum(&by2)?.sub(&ay1.maximum(&by1)?)?;
    let inter = iw.maximum(&zero)?.mul(&ih.maximum(&zero)?)?;
    let union = area(&ax1, &ay1, &ax2, &ay2)?
        .add(&area(&bx1, &by1, &bx2, &by2)?)?
        .sub(&inter)?;
    let ew = ax2.maximum(&bx2)?.sub(&ax1.minimum(&bx1)?)?;
    let eh = ay2.maximum(&by2)?.sub(&ay1.minimum(&by1)?)?;
    let enclosing = ew.mul(&eh)?;
    let floor = scalar(&tape, DENOM_FLOOR);
    let iou = inter.div(&union.maximum(&floor)?)?;
    let enc_safe = enclosing.maximum(&floor)?;
    let giou = iou.sub(&enclosing.sub(&union)?.div(&enc_safe)?)?;
    Ok(giou.neg().add_scalar(1.0))
}

/// Sigmoid focal term for one positive class inside a logit row: the
/// target entry contributes the positive branch, every other entry the
/// negative branch. `logits` holds N values in any shape.
pub fn focal_loss(logits: &Tensor, target: usize, gamma: f64, alpha: f64) -> Result<Tensor> {
    let n = logits.numel();
    if target >= n {
        return Err(Error::InteractionOutOfRange(target, n));
    }
    let flat = logits.reshape(&[n])?;
    let tape = flat.owner();
    let mut pos_mask = vec![0.0; n];
    pos_mask[target] = 1.0;
    let neg_mask: Vec<f64> = pos_mask.iter().map(|&v| 1.0 - v).collect();
    let pos_mask = tape.constant(pos_mask, &[n])?;
    let neg_mask = tape.constant(neg_mask, &[n])?;
    let pos = focal_positive_vec(&flat, gamma, alpha)?.mul(&pos_mask)?.sum();
    let neg = focal_negative_vec(&flat, gamma, alpha)?.mul(&neg_mask)?.sum();
    pos.add(&neg)
}

/// Elementwise positive-branch focal values: alpha * (1-p)^gamma * -log p,
/// written as alpha * sigmoid(-x)^gamma * softplus(-x).
fn focal_positive_vec(logits: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    let neg_x = logits.neg();
    Ok(neg_x.sigmoid().powf(gamma).mul(&neg_x.softplus())?.scale(alpha))
}

/// Elementwise negative-branch focal values: (1-alpha) * p^gamma * -log(1-p).
fn focal_negative_vec(logits: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    Ok(logits
        .sigmoid()
        .powf(gamma)
        .mul(&logits.softplus())?
        .scale(1.0 - alpha))
}

/// Everything the loss assembly needs for one image.
pub struct LossInputs<'a> {
    pub outputs: &'a [LevelOutput],
    /// Fused classification logits per level, each `[M, N]`.
    pub logits: &'a [Tensor],
    pub gts: &'a [GroundTruthHoi],
    pub assignment: &'a Assignment,
    pub classes: &'a ClassSet,
    pub weights: &'a MatchWeights,
    pub distance: DistanceType,
    pub strategy: MatchStrategy,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

/// Assemble the full training objective for one image. Matched pairs
/// contribute box, IoU, and full focal terms averaged over the match
/// count; unmatched predictions contribute all-negative focal terms
/// averaged over the prediction count. The level-distance component is
/// reported and added through a constant, so it never carries gradient:
/// both of its inputs (the level index and the ground-truth distance) are
/// fixed for a given assignment.
pub fn total_loss(tape: &Tape, inputs: &LossInputs) -> Result<(Tensor, LossReport)> {
    let m = inputs
        .outputs
        .first()
        .map(|o| o.boxes.shape()[0])
        .unwrap_or(0);
    let num_levels = inputs.outputs.len();
    let rows = num_levels * m;
    let k = inputs.assignment.pairs.len();

    let mut matched_rows = vec![None; rows];
    for &(row, col) in &inputs.assignment.pairs {
        if row >= rows || col >= inputs.gts.len() {
            return Err(Error::StaleAssignment {
                row,
                col,
                rows,
                cols: inputs.gts.len(),
            });
        }
        matched_rows[row] = Some(col);
    }

    let mut box_sum = scalar(tape, 0.0);
    let mut iou_sum = scalar(tape, 0.0);
    let mut cls_matched = scalar(tape, 0.0);
    let mut d_sum = 0.0;
    for &(row, col) in &inputs.assignment.pairs {
        let level_pos = row / m;
        let query = row % m;
        let out = &inputs.outputs[level_pos];
        let gt = &inputs.gts[col];
        let pred_row = out.boxes.slice(0, query, 1)?;
        let human = pred_row.slice(1, 1, 4)?;
        let object = pred_row.slice(1, 5, 4)?;
        box_sum = box_sum
            .add(&l1_box_loss(&human, &gt.human_box)?)?
            .add(&l1_box_loss(&object, &gt.object_box)?)?;
        iou_sum = iou_sum
            .add(&giou_loss(&human, &gt.human_box)?)?
            .add(&giou_loss(&object, &gt.object_box)?)?;
        let target = inputs
            .classes
            .position(gt.interaction)
            .ok_or(Error::InteractionOutOfRange(gt.interaction, inputs.classes.len()))?;
        let logit_row = inputs.logits[level_pos].slice(0, query, 1)?;
        cls_matched = cls_matched.add(&focal_loss(
            &logit_row,
            target,
            inputs.focal_gamma,
            inputs.focal_alpha,
        )?)?;
        d_sum += distance_constraint(out.lv, gt_distance(gt, inputs.distance), inputs.strategy);
    }

    // all-negative focal over unmatched prediction slots
    let mut cls_unmatched = scalar(tape, 0.0);
    for (level_pos, logits) in inputs.logits.iter().enumerate() {
        let n = logits.shape()[1];
        let mask: Vec<f64> = (0..m)
            .flat_map(|q| {
                let w = if matched_rows[level_pos * m + q].is_some() {
                    0.0
                } else {
                    1.0
                };
                std::iter::repeat(w).take(n)
            })
            .collect();
        let mask = tape.constant(mask, &[m, n])?;
        let neg = focal_negative_vec(logits, inputs.focal_gamma, inputs.focal_alpha)?;
        cls_unmatched = cls_unmatched.add(&neg.mul(&mask)?.sum())?;
    }

    let (box_avg, iou_avg, cls_m_avg, d_avg) = if k > 0 {
        let inv = 1.0 / k as f64;
        (
            box_sum.scale(inv),
            iou_sum.scale(inv),
            cls_matched.scale(inv),
            d_sum / k as f64,
        )
    } else {
        (box_sum, iou_sum, cls_matched, 0.0)
    };
    let cls = cls_m_avg.add(&cls_unmatched.scale(1.0 / rows.max(1) as f64))?;
    let d_const = scalar(tape, d_avg);

    let w = inputs.weights;
    let total = box_avg
        .scale(w.lambda_box)
        .add(&iou_avg.scale(w.lambda_iou))?
        .add(&cls.scale(w.lambda_cls))?
        .add(&d_const.scale(w.lambda_d))?;
    let report = LossReport {
        box_: box_avg.item()?,
        iou: iou_avg.item()?,
        cls: cls.item()?,
        d: d_avg,
        total: total.item()?,
        matched: k,
    };
    Ok((total, report))
}
