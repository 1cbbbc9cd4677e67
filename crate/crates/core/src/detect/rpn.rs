//! Region proposal network: 1x1 objectness and box-delta heads over the
//! domain-invariant feature map, plus the anchor labeling/sampling loss.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::boxes::{decode_deltas, encode_deltas, iou, nms, BoxF};
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Conv2dCache, Param};

pub const ANCHOR_SIZES: [f64; 3] = [16.0, 32.0, 64.0];

#[derive(Debug, Clone)]
pub struct RpnConfig {
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_iou: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub sample_pos: usize,
    pub sample_total: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 256,
            post_nms_top: 64,
            nms_iou: 0.7,
            pos_iou: 0.5,
            neg_iou: 0.3,
            sample_pos: 32,
            sample_total: 64,
        }
    }
}

/// Per-anchor assignment against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched; carries the index of the best-IoU ground-truth box.
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-threshold labeling: positive at `>= pos_iou` against any gt (matched
/// to the argmax gt, ties to the lower index), negative below `neg_iou`,
/// ignored in between.
pub fn label_anchors(
    anchors: &[BoxF],
    gts: &[BoxF],
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let mut best = 0.0;
            let mut best_idx = None;
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(a, g);
                if v > best {
                    best = v;
                    best_idx = Some(gi);
                }
            }
            if best >= pos_iou {
                AnchorLabel::Positive(best_idx.expect("positive without match"))
            } else if best < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RpnLossParts {
    pub total: f64,
    pub objectness_bce: f64,
    pub box_reg: f64,
}

pub struct RpnOutput {
    pub proposals: Vec<BoxF>,
    /// Objectness logits of the kept proposals, nonincreasing.
    pub scores: Vec<f64>,
    pub loss: Option<RpnLossParts>,
    obj_cache: Conv2dCache,
    delta_cache: Conv2dCache,
    grad_obj: Option<Array3<f64>>,
    grad_delta: Option<Array3<f64>>,
}

#[derive(Debug, Clone)]
pub struct Rpn {
    pub obj: Conv2d,
    pub delta: Conv2d,
}

impl Rpn {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = ANCHOR_SIZES.len();
        Self {
            obj: Conv2d::new("rpn.obj", in_channels, a, 1, 1, 0, rng),
            delta: Conv2d::new("rpn.delta", in_channels, 4 * a, 1, 1, 0, rng),
        }
    }

    /// Runs the heads over `f`, decodes proposals, and (for labeled source
    /// images) computes the sampled objectness/regression loss.
    pub fn forward(
        &self,
        f: &Array3<f64>,
        anchors: &[BoxF],
        image_hw: (f64, f64),
        gt_boxes: Option<&[BoxF]>,
        want_loss: bool,
        cfg: &RpnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<RpnOutput> {
        if want_loss && gt_boxes.is_none() {
            return Err(Error::InvalidInput(
                "rpn loss requested without ground-truth boxes".into(),
            ));
        }
        let (_, fh, fw) = f.dim();
        let n_sizes = ANCHOR_SIZES.len();
        debug_assert_eq!(anchors.len(), fh * fw * n_sizes);

        let (obj_map, obj_cache) = self.obj.forward(f)?;
        let (delta_map, delta_cache) = self.delta.forward(f)?;

        let logit = |a_idx: usize| {
            let s = a_idx % n_sizes;
            let cell = a_idx / n_sizes;
            obj_map[[s, cell / fw, cell % fw]]
        };
        let deltas_at = |a_idx: usize| -> [f64; 4] {
            let s = a_idx % n_sizes;
            let cell = a_idx / n_sizes;
            let (y, x) = (cell / fw, cell % fw);
            [
                delta_map[[s * 4, y, x]],
                delta_map[[s * 4 + 1, y, x]],
                delta_map[[s * 4 + 2, y, x]],
                delta_map[[s * 4 + 3, y, x]],
            ]
        };

        // top pre_nms_top anchors by objectness, ties to the lower index
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| {
            logit(b)
                .partial_cmp(&logit(a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(cfg.pre_nms_top);

        let mut cand_boxes = Vec::with_capacity(order.len());
        let mut cand_scores = Vec::with_capacity(order.len());
        for &ai in &order {
            let b = decode_deltas(&anchors[ai], &deltas_at(ai)).clip(image_hw.1, image_hw.0);
            if b.width() > 1e-3 && b.height() > 1e-3 {
                cand_boxes.push(b);
                cand_scores.push(logit(ai));
            }
        }
        let kept = nms(&cand_boxes, &cand_scores, cfg.nms_iou);
        let kept = &kept[..kept.len().min(cfg.post_nms_top)];
        let proposals: Vec<BoxF> = kept.iter().map(|&i| cand_boxes[i]).collect();
        let scores: Vec<f64> = kept.iter().map(|&i| cand_scores[i]).collect();

        let mut loss = None;
        let mut grad_obj = None;
        let mut grad_delta = None;
        if want_loss {
            let gts = gt_boxes.expect("checked above");
            let labels = label_anchors(anchors, gts, cfg.pos_iou, cfg.neg_iou);
            let mut pos: Vec<usize> = Vec::new();
            let mut neg: Vec<usize> = Vec::new();
            for (i, l) in labels.iter().enumerate() {
                match l {
                    AnchorLabel::Positive(_) => pos.push(i),
                    AnchorLabel::Negative => neg.push(i),
                    AnchorLabel::Ignore => {}
                }
            }
            pos.shuffle(rng);
            neg.shuffle(rng);
            pos.truncate(cfg.sample_pos);
            let n_neg = (cfg.sample_total - pos.len()).min(neg.len());
            neg.truncate(n_neg);
            let n_sampled = pos.len() + neg.len();

            let mut g_obj = Array3::zeros(obj_map.dim());
            let mut g_delta = Array3::zeros(delta_map.dim());
            let mut bce_sum = 0.0;
            let inv_n = 1.0 / n_sampled.max(1) as f64;
            for (&ai, target) in pos
                .iter()
                .map(|i| (i, 1.0))
                .chain(neg.iter().map(|i| (i, 0.0)))
                .map(|(i, t)| (i, t))
            {
                let s = ai % n_sizes;
                let cell = ai / n_sizes;
                let (y, x) = (cell / fw, cell % fw);
                let (l, g) = ops::bce_with_logit(obj_map[[s, y, x]], target);
                bce_sum += l;
                g_obj[[s, y, x]] += g * inv_n;
            }
            let objectness_bce = bce_sum * inv_n;

            let mut reg_sum = 0.0;
            if !pos.is_empty() {
                let inv_p = 1.0 / pos.len() as f64;
                for &ai in &pos {
                    let gt_idx = match labels[ai] {
                        AnchorLabel::Positive(gi) => gi,
                        _ => unreachable!(),
                    };
                    let target = encode_deltas(&anchors[ai], &gts[gt_idx]);
                    let pred = deltas_at(ai);
                    let s = ai % n_sizes;
                    let cell = ai / n_sizes;
                    let (y, x) = (cell / fw, cell % fw);
                    for k in 0..4 {
                        let (l, g) = ops::smooth_l1(pred[k] - target[k]);
                        reg_sum += l * inv_p;
                        g_delta[[s * 4 + k, y, x]] += g * inv_p;
                    }
                }
            }

            loss = Some(RpnLossParts {
                total: objectness_bce + reg_sum,
                objectness_bce,
                box_reg: reg_sum,
            });
            grad_obj = Some(g_obj);
            grad_delta = Some(g_delta);
        }

        Ok(RpnOutput {
            proposals,
            scores,
            loss,
            obj_cache,
            delta_cache,
            grad_obj,
            grad_delta,
        })
    }

    /// Backward of the RPN loss into the feature map. Returns `None` when the
    /// forward pass carried no loss (proposal decoding is detached).
    pub fn backward(&mut self, out: &RpnOutput) -> Option<Array3<f64>> {
        let (g_obj, g_delta) = match (&out.grad_obj, &out.grad_delta) {
            (Some(a), Some(b)) => (a, b),
            _ => return None,
        };
        let mut gf = self.obj.backward(&out.obj_cache, g_obj);
        gf += &self.delta.backward(&out.delta_cache, g_delta);
        Some(gf)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.obj.w, &self.obj.b, &self.delta.w, &self.delta.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.obj.w,
            &mut self.obj.b,
            &mut self.delta.w,
            &mut self.delta.b,
        ]
    }
}
