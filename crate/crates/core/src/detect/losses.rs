//! Proposal-to-gt matching and the RoI-head detection loss
//! (cross-entropy over K+1 classes plus smooth-L1 on matched-class deltas).

use ndarray::Array2;

use super::boxes::{encode_deltas, iou, BoxF};
use crate::nn::ops;

/// Matching of proposals against ground truth at an IoU threshold.
#[derive(Debug, Clone)]
pub struct ProposalTargets {
    /// 0 = background, `c + 1` = object class `c`.
    pub labels: Vec<usize>,
    /// Index of the matched gt for positive proposals.
    pub matched_gt: Vec<Option<usize>>,
}

pub fn match_proposals(
    proposals: &[BoxF],
    gt_boxes: &[BoxF],
    gt_classes: &[usize],
    pos_iou: f64,
) -> ProposalTargets {
    let mut labels = Vec::with_capacity(proposals.len());
    let mut matched = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut best = 0.0;
        let mut best_idx = None;
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(p, g);
            if v > best {
                best = v;
                best_idx = Some(gi);
            }
        }
        if best >= pos_iou {
            let gi = best_idx.expect("positive without match");
            labels.push(gt_classes[gi] + 1);
            matched.push(Some(gi));
        } else {
            labels.push(0);
            matched.push(None);
        }
    }
    ProposalTargets {
        labels,
        matched_gt: matched,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetLossParts {
    pub l_cls: f64,
    pub l_loc: f64,
}

/// Classification + localization loss over matched proposals.
/// Returns the parts and the gradients w.r.t. the two head outputs.
pub fn detection_loss(
    cls_logits: &Array2<f64>,
    box_deltas: &Array2<f64>,
    proposals: &[BoxF],
    targets: &ProposalTargets,
    gt_boxes: &[BoxF],
) -> (DetLossParts, Array2<f64>, Array2<f64>) {
    let n = proposals.len();
    assert_eq!(cls_logits.nrows(), n);
    assert!(n > 0, "detection loss over zero proposals");

    let (l_cls, gcls) = ops::cross_entropy_mean(cls_logits, &targets.labels);

    let mut greg = Array2::zeros(box_deltas.raw_dim());
    let positives: Vec<usize> = (0..n).filter(|&i| targets.labels[i] > 0).collect();
    let mut l_loc = 0.0;
    if !positives.is_empty() {
        let inv_p = 1.0 / positives.len() as f64;
        for &i in &positives {
            let gi = targets.matched_gt[i].expect("positive has a match");
            let slot = (targets.labels[i] - 1) * 4;
            let t = encode_deltas(&proposals[i], &gt_boxes[gi]);
            for k in 0..4 {
                let (l, g) = ops::smooth_l1(box_deltas[[i, slot + k]] - t[k]);
                l_loc += l * inv_p;
                greg[[i, slot + k]] = g * inv_p;
            }
        }
    }

    (DetLossParts { l_cls, l_loc }, gcls, greg)
}
