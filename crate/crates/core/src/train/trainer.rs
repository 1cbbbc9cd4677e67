use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LogRecord, LossReport, Schedule, StepKind, TrainConfig};
use crate::detect::losses::{detection_loss, match_proposals};
use crate::detect::{roi_align, roi_align_backward, Backbone, BoxF, RoiHeadCache, RpnOutput};
use crate::disentangle::{
    domain_loss, domain_loss_grad, orthogonal_loss, pool_proposals_backward,
    DomainClassifierCache, DomainPrediction, OrthoMode, PooledPair,
};
use crate::error::{Error, Result};
use crate::model::{
    Detector, Method, ModelConfig, GROUP_DIR, GROUP_DOMAIN, GROUP_ROI_CLS, GROUP_ROI_REG,
    ROI_SIZE,
};
use crate::nn::SgdMomentum;
use crate::rng::{labeled_seed, rng_from_seed};
use crate::synth::{load_split, open_manifest, LoadedSample};

const FEATURE_SCALE: f64 = 1.0 / Backbone::STRIDE as f64;

/// Groups updated by the orthogonalization step; backbone and RPN stay
/// frozen (they run forward only).
const STEP2_GROUPS: [&str; 4] = [GROUP_DIR, GROUP_DOMAIN, GROUP_ROI_CLS, GROUP_ROI_REG];

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Detector,
    opt: SgdMomentum,
    source: Vec<LoadedSample>,
    target: Vec<LoadedSample>,
    rng: ChaCha8Rng,
    iteration: usize,
}

/// Detection branch of one source image: RPN loss plus (when proposals
/// exist) the RoI-head loss, with everything needed for backward.
struct DetBranch {
    rpn_out: RpnOutput,
    head: Option<HeadBranch>,
    l_rpn: f64,
}

struct HeadBranch {
    proposals: Vec<BoxF>,
    head_cache: RoiHeadCache,
    gcls: Array2<f64>,
    greg: Array2<f64>,
    l_cls: f64,
    l_loc: f64,
}

/// Orthogonal-loss branch of one image.
struct OrthBranch {
    proposals: Vec<BoxF>,
    gp_di: Array2<f64>,
    gp_ds: Array2<f64>,
    hw: (usize, usize),
    l_perp: f64,
}

struct DomainBranch {
    pred: DomainPrediction,
    cache: DomainClassifierCache,
    l_dom: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus_root: &Path) -> Result<Self> {
        cfg.validate()?;
        let manifest = open_manifest(corpus_root)?;
        let source = load_split(corpus_root, "annotations/source_train.jsonl")?;
        let target = load_split(corpus_root, "annotations/target_train.jsonl")?;
        if source.is_empty() {
            return Err(Error::Corpus("corpus has no source-domain images".into()));
        }
        if target.is_empty() {
            return Err(Error::Corpus("corpus has no target-domain images".into()));
        }
        let model_cfg = ModelConfig {
            image_size: manifest.config.image_size,
            num_classes: crate::synth::NUM_CLASSES,
            method: cfg.method,
            grl_lambda: cfg.grl_enabled.then_some(cfg.grl_lambda),
            seed: labeled_seed(cfg.seed, "model_init"),
        };
        let model = Detector::new(model_cfg)?;
        let opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
        let rng = rng_from_seed(labeled_seed(cfg.seed, "train_loop"));
        Ok(Self {
            cfg,
            model,
            opt,
            source,
            target,
            rng,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn ortho_mode(&self) -> OrthoMode {
        if self.cfg.eq6_literal {
            OrthoMode::LiteralSquare
        } else {
            OrthoMode::NormalizedCosine
        }
    }

    fn check_pair(src: &LoadedSample, tgt: &LoadedSample) -> Result<()> {
        if src.domain != 0 || src.boxes.is_empty() {
            return Err(Error::InvalidInput(
                "source sample must be labeled domain-0".into(),
            ));
        }
        if tgt.domain != 1 || !tgt.boxes.is_empty() {
            return Err(Error::InvalidInput(
                "target sample must be unlabeled domain-1".into(),
            ));
        }
        Ok(())
    }

    fn det_branch(
        &mut self,
        f_inv: &Array3<f64>,
        sample: &LoadedSample,
        image_hw: (f64, f64),
    ) -> Result<DetBranch> {
        let rpn_out = self.model.rpn.forward(
            f_inv,
            self.model.anchors(),
            image_hw,
            Some(&sample.boxes),
            true,
            &self.model.rpn_cfg,
            &mut self.rng,
        )?;
        let l_rpn = rpn_out.loss.as_ref().expect("loss requested").total;
        let head = if rpn_out.proposals.is_empty() {
            None
        } else {
            let pooled = roi_align(f_inv, &rpn_out.proposals, ROI_SIZE, FEATURE_SCALE);
            let (cls_logits, box_deltas, head_cache) = self.model.head.forward(&pooled);
            let targets =
                match_proposals(&rpn_out.proposals, &sample.boxes, &sample.class_ids, 0.5);
            let (parts, gcls, greg) = detection_loss(
                &cls_logits,
                &box_deltas,
                &rpn_out.proposals,
                &targets,
                &sample.boxes,
            );
            Some(HeadBranch {
                proposals: rpn_out.proposals.clone(),
                head_cache,
                gcls,
                greg,
                l_cls: parts.l_cls,
                l_loc: parts.l_loc,
            })
        };
        Ok(DetBranch { rpn_out, head, l_rpn })
    }

    /// Backward of the detection branch; returns the gradient w.r.t. the
    /// feature map the branch ran on.
    fn det_branch_backward(&mut self, branch: &DetBranch, f_dims: (usize, usize, usize)) -> Array3<f64> {
        let mut g_f = Array3::zeros(f_dims);
        if let Some(h) = &branch.head {
            let g_pooled = self.model.head.backward(&h.head_cache, &h.gcls, &h.greg);
            g_f += &roi_align_backward(f_dims, &h.proposals, ROI_SIZE, FEATURE_SCALE, &g_pooled);
        }
        if let Some(g) = self.model.rpn.backward(&branch.rpn_out) {
            g_f += &g;
        }
        g_f
    }

    fn orth_branch(
        &self,
        f_di: &Array3<f64>,
        f_ds: &Array3<f64>,
        proposals: &[BoxF],
    ) -> Result<Option<OrthBranch>> {
        if proposals.is_empty() {
            return Ok(None);
        }
        let a_di = roi_align(f_di, proposals, ROI_SIZE, FEATURE_SCALE);
        let a_ds = roi_align(f_ds, proposals, ROI_SIZE, FEATURE_SCALE);
        let pair = PooledPair::new(a_di, a_ds)?;
        let (l_perp, gp_di, gp_ds) =
            orthogonal_loss(&pair.p_di, &pair.p_ds, self.ortho_mode())?;
        Ok(Some(OrthBranch {
            proposals: proposals.to_vec(),
            gp_di,
            gp_ds,
            hw: (ROI_SIZE, ROI_SIZE),
            l_perp,
        }))
    }

    /// Backward of the orthogonal branch into `(g_f_di, g_f_ds)`.
    fn orth_branch_backward(
        &self,
        branch: &OrthBranch,
        f_dims: (usize, usize, usize),
    ) -> (Array3<f64>, Array3<f64>) {
        let ga_di: Array4<f64> = pool_proposals_backward(&branch.gp_di, branch.hw);
        let ga_ds: Array4<f64> = pool_proposals_backward(&branch.gp_ds, branch.hw);
        let g_di = roi_align_backward(f_dims, &branch.proposals, ROI_SIZE, FEATURE_SCALE, &ga_di);
        let g_ds = roi_align_backward(f_dims, &branch.proposals, ROI_SIZE, FEATURE_SCALE, &ga_ds);
        (g_di, g_ds)
    }

    fn domain_branch(&self, f_ds: &Array3<f64>, domain: u8) -> DomainBranch {
        let clf = self.model.domain_clf.as_ref().expect("vdd model");
        let (pred, cache) = clf.forward(f_ds, domain);
        DomainBranch {
            pred,
            cache,
            l_dom: domain_loss(&pred),
        }
    }

    fn domain_branch_backward(&mut self, branch: &DomainBranch) -> Array3<f64> {
        let clf = self.model.domain_clf.as_mut().expect("vdd model");
        clf.backward(&branch.cache, domain_loss_grad(&branch.pred))
    }

    fn apply_updates(&mut self, lr: f64, groups: &[&str]) {
        let opt = &mut self.opt;
        for (g, p) in self.model.params_mut() {
            if groups.contains(&g) {
                opt.update(lr, p);
            }
        }
    }

    fn finish_report(&self, iteration: usize, step: &'static str, report: LossReport) -> Result<LossReport> {
        if !report.all_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                step,
                report: serde_json::to_string(&report).unwrap_or_default(),
            });
        }
        Ok(report)
    }

    /// Feature-decomposition step: detection loss on the source image plus
    /// domain losses on both images; one SGD update over all groups.
    pub fn step_decomposition(
        &mut self,
        src: &LoadedSample,
        tgt: &LoadedSample,
        lr: f64,
    ) -> Result<LossReport> {
        Self::check_pair(src, tgt)?;
        self.model.zero_grads();
        let mut report = LossReport::new(StepKind::Decomposition);

        // ---- source forward ----
        let img_s = src.to_image();
        let hw = (img_s.dim().1 as f64, img_s.dim().2 as f64);
        let (f_b_s, bb_cache_s) = self.model.backbone.forward(&img_s)?;
        let (f_di_s, dir_cache_s) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_s)?
        };
        let f_ds_s = &f_b_s - &f_di_s;
        let det = self.det_branch(&f_di_s, src, hw)?;
        report.l_rpn = Some(det.l_rpn);
        if let Some(h) = &det.head {
            report.l_cls = Some(h.l_cls);
            report.l_loc = Some(h.l_loc);
        }
        let dom_s = self.domain_branch(&f_ds_s, 0);
        report.l_dom_src = Some(dom_s.l_dom);

        // ---- target forward ----
        let img_t = tgt.to_image();
        let (f_b_t, bb_cache_t) = self.model.backbone.forward(&img_t)?;
        let (f_di_t, dir_cache_t) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_t)?
        };
        let f_ds_t = &f_b_t - &f_di_t;
        let dom_t = self.domain_branch(&f_ds_t, 1);
        report.l_dom_tgt = Some(dom_t.l_dom);

        // ---- source backward ----
        let f_dims = f_di_s.dim();
        let mut g_f_di_s = self.det_branch_backward(&det, f_dims);
        let g_f_ds_s = self.domain_branch_backward(&dom_s);
        // difference decomposition: +g to F_b, -g to F_di
        let mut g_f_b_s = g_f_ds_s.clone();
        g_f_di_s -= &g_f_ds_s;
        g_f_b_s += &self
            .model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_s, &g_f_di_s);
        self.model.backbone.backward(&bb_cache_s, &g_f_b_s);

        // ---- target backward ----
        let g_f_ds_t = self.domain_branch_backward(&dom_t);
        let g_f_di_t = -&g_f_ds_t;
        let mut g_f_b_t = g_f_ds_t;
        g_f_b_t += &self
            .model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_t, &g_f_di_t);
        self.model.backbone.backward(&bb_cache_t, &g_f_b_t);

        let groups = self.model.group_names();
        self.apply_updates(lr, &groups);
        self.finish_report(self.iteration, "decomposition", report.finalize())
    }

    /// Feature-orthogonalization step: detection + domain + orthogonal
    /// losses; backbone and RPN run forward only and receive no update.
    pub fn step_orthogonalization(
        &mut self,
        src: &LoadedSample,
        tgt: &LoadedSample,
        lr: f64,
    ) -> Result<LossReport> {
        Self::check_pair(src, tgt)?;
        self.model.zero_grads();
        let mut report = LossReport::new(StepKind::Orthogonalization);

        // ---- source forward ----
        let img_s = src.to_image();
        let hw = (img_s.dim().1 as f64, img_s.dim().2 as f64);
        let (f_b_s, _) = self.model.backbone.forward(&img_s)?;
        let (f_di_s, dir_cache_s) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_s)?
        };
        let f_ds_s = &f_b_s - &f_di_s;
        let det = self.det_branch(&f_di_s, src, hw)?;
        report.l_rpn = Some(det.l_rpn);
        if let Some(h) = &det.head {
            report.l_cls = Some(h.l_cls);
            report.l_loc = Some(h.l_loc);
        }
        let dom_s = self.domain_branch(&f_ds_s, 0);
        report.l_dom_src = Some(dom_s.l_dom);
        let orth_s = if self.cfg.no_ortho {
            None
        } else {
            self.orth_branch(&f_di_s, &f_ds_s, &det.rpn_out.proposals)?
        };
        if let Some(o) = &orth_s {
            report.l_perp_src = Some(o.l_perp);
        }

        // ---- target forward ----
        let img_t = tgt.to_image();
        let hw_t = (img_t.dim().1 as f64, img_t.dim().2 as f64);
        let (f_b_t, _) = self.model.backbone.forward(&img_t)?;
        let (f_di_t, dir_cache_t) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_t)?
        };
        let f_ds_t = &f_b_t - &f_di_t;
        let tgt_props = self
            .model
            .rpn
            .forward(
                &f_di_t,
                self.model.anchors(),
                hw_t,
                None,
                false,
                &self.model.rpn_cfg,
                &mut self.rng,
            )?
            .proposals;
        let dom_t = self.domain_branch(&f_ds_t, 1);
        report.l_dom_tgt = Some(dom_t.l_dom);
        let orth_t = if self.cfg.no_ortho {
            None
        } else {
            self.orth_branch(&f_di_t, &f_ds_t, &tgt_props)?
        };
        if let Some(o) = &orth_t {
            report.l_perp_tgt = Some(o.l_perp);
        }

        // ---- source backward (stops at F_b: backbone frozen) ----
        let f_dims = f_di_s.dim();
        let mut g_f_di_s = self.det_branch_backward(&det, f_dims);
        let mut g_f_ds_s = self.domain_branch_backward(&dom_s);
        if let Some(o) = &orth_s {
            let (g_di, g_ds) = self.orth_branch_backward(o, f_dims);
            g_f_di_s += &g_di;
            g_f_ds_s += &g_ds;
        }
        g_f_di_s -= &g_f_ds_s;
        self.model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_s, &g_f_di_s);

        // ---- target backward ----
        let f_dims_t = f_di_t.dim();
        let mut g_f_di_t = Array3::zeros(f_dims_t);
        let mut g_f_ds_t = self.domain_branch_backward(&dom_t);
        if let Some(o) = &orth_t {
            let (g_di, g_ds) = self.orth_branch_backward(o, f_dims_t);
            g_f_di_t += &g_di;
            g_f_ds_t += &g_ds;
        }
        g_f_di_t -= &g_f_ds_t;
        self.model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_t, &g_f_di_t);

        self.apply_updates(lr, &STEP2_GROUPS);
        self.finish_report(self.iteration, "orthogonalization", report.finalize())
    }

    /// One-step ablation: every loss in a single update over all groups.
    pub fn step_combined(
        &mut self,
        src: &LoadedSample,
        tgt: &LoadedSample,
        lr: f64,
    ) -> Result<LossReport> {
        Self::check_pair(src, tgt)?;
        self.model.zero_grads();
        let mut report = LossReport::new(StepKind::Combined);

        let img_s = src.to_image();
        let hw = (img_s.dim().1 as f64, img_s.dim().2 as f64);
        let (f_b_s, bb_cache_s) = self.model.backbone.forward(&img_s)?;
        let (f_di_s, dir_cache_s) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_s)?
        };
        let f_ds_s = &f_b_s - &f_di_s;
        let det = self.det_branch(&f_di_s, src, hw)?;
        report.l_rpn = Some(det.l_rpn);
        if let Some(h) = &det.head {
            report.l_cls = Some(h.l_cls);
            report.l_loc = Some(h.l_loc);
        }
        let dom_s = self.domain_branch(&f_ds_s, 0);
        report.l_dom_src = Some(dom_s.l_dom);
        let orth_s = if self.cfg.no_ortho {
            None
        } else {
            self.orth_branch(&f_di_s, &f_ds_s, &det.rpn_out.proposals)?
        };
        if let Some(o) = &orth_s {
            report.l_perp_src = Some(o.l_perp);
        }

        let img_t = tgt.to_image();
        let hw_t = (img_t.dim().1 as f64, img_t.dim().2 as f64);
        let (f_b_t, bb_cache_t) = self.model.backbone.forward(&img_t)?;
        let (f_di_t, dir_cache_t) = {
            let dir = self.model.dir.as_ref().expect("vdd model");
            dir.forward(&f_b_t)?
        };
        let f_ds_t = &f_b_t - &f_di_t;
        let tgt_props = self
            .model
            .rpn
            .forward(
                &f_di_t,
                self.model.anchors(),
                hw_t,
                None,
                false,
                &self.model.rpn_cfg,
                &mut self.rng,
            )?
            .proposals;
        let dom_t = self.domain_branch(&f_ds_t, 1);
        report.l_dom_tgt = Some(dom_t.l_dom);
        let orth_t = if self.cfg.no_ortho {
            None
        } else {
            self.orth_branch(&f_di_t, &f_ds_t, &tgt_props)?
        };
        if let Some(o) = &orth_t {
            report.l_perp_tgt = Some(o.l_perp);
        }

        // ---- source backward ----
        let f_dims = f_di_s.dim();
        let mut g_f_di_s = self.det_branch_backward(&det, f_dims);
        let mut g_f_ds_s = self.domain_branch_backward(&dom_s);
        if let Some(o) = &orth_s {
            let (g_di, g_ds) = self.orth_branch_backward(o, f_dims);
            g_f_di_s += &g_di;
            g_f_ds_s += &g_ds;
        }
        let mut g_f_b_s = g_f_ds_s.clone();
        g_f_di_s -= &g_f_ds_s;
        g_f_b_s += &self
            .model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_s, &g_f_di_s);
        self.model.backbone.backward(&bb_cache_s, &g_f_b_s);

        // ---- target backward ----
        let f_dims_t = f_di_t.dim();
        let mut g_f_di_t = Array3::zeros(f_dims_t);
        let mut g_f_ds_t = self.domain_branch_backward(&dom_t);
        if let Some(o) = &orth_t {
            let (g_di, g_ds) = self.orth_branch_backward(o, f_dims_t);
            g_f_di_t += &g_di;
            g_f_ds_t += &g_ds;
        }
        let mut g_f_b_t = g_f_ds_t.clone();
        g_f_di_t -= &g_f_ds_t;
        g_f_b_t += &self
            .model
            .dir
            .as_mut()
            .expect("vdd model")
            .backward(&dir_cache_t, &g_f_di_t);
        self.model.backbone.backward(&bb_cache_t, &g_f_b_t);

        let groups = self.model.group_names();
        self.apply_updates(lr, &groups);
        self.finish_report(self.iteration, "combined", report.finalize())
    }

    /// Source-only baseline: plain detection loss on the source image, RPN
    /// and head over the backbone output.
    pub fn step_source_only(&mut self, src: &LoadedSample, lr: f64) -> Result<LossReport> {
        if src.domain != 0 || src.boxes.is_empty() {
            return Err(Error::InvalidInput(
                "source sample must be labeled domain-0".into(),
            ));
        }
        self.model.zero_grads();
        let mut report = LossReport::new(StepKind::Combined);

        let img = src.to_image();
        let hw = (img.dim().1 as f64, img.dim().2 as f64);
        let (f_b, bb_cache) = self.model.backbone.forward(&img)?;
        let det = self.det_branch(&f_b, src, hw)?;
        report.l_rpn = Some(det.l_rpn);
        if let Some(h) = &det.head {
            report.l_cls = Some(h.l_cls);
            report.l_loc = Some(h.l_loc);
        }
        let g_f_b = self.det_branch_backward(&det, f_b.dim());
        self.model.backbone.backward(&bb_cache, &g_f_b);

        let groups = self.model.group_names();
        self.apply_updates(lr, &groups);
        self.finish_report(self.iteration, "source_only", report.finalize())
    }

    fn sample_indices(&mut self) -> (usize, usize) {
        let si = self.rng.gen_range(0..self.source.len());
        let ti = self.rng.gen_range(0..self.target.len());
        (si, ti)
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    pub fn sample_pair(&mut self) -> (LoadedSample, LoadedSample) {
        let (si, ti) = self.sample_indices();
        (self.source[si].clone(), self.target[ti].clone())
    }

    /// Full training loop: per-iteration steps, JSONL loss log, periodic
    /// checkpoints and `ckpt_final.bin` at exit. Returns the final
    /// checkpoint path.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("loss_log.jsonl");
        let mut log = std::io::BufWriter::new(
            std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
        );
        self.model
            .save_checkpoint(&out_dir.join("ckpt_init.bin"))?;

        let total = self.cfg.total_iterations();
        for iter in 0..total {
            self.iteration = iter;
            let lr = self.cfg.lr_at(iter);
            let (src, tgt) = self.sample_pair();

            let mut reports: Vec<LossReport> = Vec::with_capacity(2);
            match (self.cfg.method, self.cfg.one_step, self.cfg.schedule) {
                (Method::SourceOnly, _, _) => {
                    reports.push(self.step_source_only(&src, lr)?);
                }
                (Method::Vdd, true, _) => {
                    reports.push(self.step_combined(&src, &tgt, lr)?);
                }
                (Method::Vdd, false, Schedule::Alternating) => {
                    reports.push(self.step_decomposition(&src, &tgt, lr)?);
                    reports.push(self.step_orthogonalization(&src, &tgt, lr)?);
                }
                (Method::Vdd, false, Schedule::Blockwise) => {
                    if iter < self.cfg.iterations_phase1 {
                        reports.push(self.step_decomposition(&src, &tgt, lr)?);
                    } else {
                        reports.push(self.step_orthogonalization(&src, &tgt, lr)?);
                    }
                }
            }
            for report in reports {
                let line = serde_json::to_string(&LogRecord {
                    iteration: iter,
                    lr,
                    report,
                })?;
                log.write_all(line.as_bytes())
                    .and_then(|_| log.write_all(b"\n"))
                    .map_err(|e| Error::io(&log_path, e))?;
            }
            if (iter + 1) % self.cfg.checkpoint_every == 0 {
                self.model
                    .save_checkpoint(&out_dir.join(format!("ckpt_{:06}.bin", iter + 1)))?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let final_path = out_dir.join("ckpt_final.bin");
        self.model.save_checkpoint(&final_path)?;
        Ok(final_path)
    }
}

/// Build a trainer from a corpus and run it to completion.
pub fn train(cfg: TrainConfig, corpus_root: &Path, out_dir: &Path) -> Result<PathBuf> {
    let mut trainer = Trainer::new(cfg, corpus_root)?;
    trainer.run(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GROUP_BACKBONE, GROUP_RPN};
    use crate::synth::{build_corpus, CorpusConfig, ShiftKind};
    use tempfile::TempDir;

    fn tiny_corpus() -> (TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            master_seed: 11,
            image_size: 64,
            max_objects: 2,
            n_source_train: 6,
            n_target_train: 4,
            n_target_eval: 2,
            target_kind: ShiftKind::Night,
            severity: 0.8,
        };
        build_corpus(&cfg, dir.path()).unwrap();
        let p = dir.path().to_path_buf();
        (dir, p)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            iterations_phase1: 2,
            iterations_phase2: 1,
            checkpoint_every: 100,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn decomposition_step_updates_every_group() {
        let (_tmp, root) = tiny_corpus();
        let mut t = Trainer::new(tiny_train_cfg(), &root).unwrap();
        let before: Vec<(String, String)> = t
            .model
            .group_names()
            .iter()
            .map(|g| (g.to_string(), t.model.group_hash(g)))
            .collect();
        let (src, tgt) = t.sample_pair();
        let report = t.step_decomposition(&src, &tgt, 1e-3).unwrap();
        assert!(report.all_finite());
        assert!(report.l_perp_src.is_none() && report.l_perp_tgt.is_none());
        for (g, h) in before {
            assert_ne!(t.model.group_hash(&g), h, "group {g} unchanged");
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let (_tmp, root) = tiny_corpus();
        let mut t = Trainer::new(tiny_train_cfg(), &root).unwrap();
        let before: Vec<String> = t
            .model
            .group_names()
            .iter()
            .map(|g| t.model.group_hash(g))
            .collect();
        let (src, tgt) = t.sample_pair();
        let r1 = t.step_decomposition(&src, &tgt, 0.0).unwrap();
        let r2 = t.step_orthogonalization(&src, &tgt, 0.0).unwrap();
        assert!(r1.all_finite() && r2.all_finite());
        assert!(r1.total > 0.0);
        let after: Vec<String> = t
            .model
            .group_names()
            .iter()
            .map(|g| t.model.group_hash(g))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn orthogonalization_freezes_backbone_and_rpn() {
        let (_tmp, root) = tiny_corpus();
        let mut t = Trainer::new(tiny_train_cfg(), &root).unwrap();
        let (src, tgt) = t.sample_pair();
        // move things first so gradients are nontrivial
        t.step_decomposition(&src, &tgt, 1e-3).unwrap();

        let bb = t.model.group_hash(GROUP_BACKBONE);
        let rpn = t.model.group_hash(GROUP_RPN);
        let dir = t.model.group_hash(GROUP_DIR);
        let report = t.step_orthogonalization(&src, &tgt, 1e-3).unwrap();
        assert_eq!(t.model.group_hash(GROUP_BACKBONE), bb);
        assert_eq!(t.model.group_hash(GROUP_RPN), rpn);
        assert_ne!(t.model.group_hash(GROUP_DIR), dir);
        assert!(report.l_perp_src.is_some() || report.l_perp_tgt.is_some());
    }

    #[test]
    fn reported_totals_match_recomputed_sums() {
        let (_tmp, root) = tiny_corpus();
        let mut t = Trainer::new(tiny_train_cfg(), &root).unwrap();
        let (src, tgt) = t.sample_pair();
        for report in [
            t.step_decomposition(&src, &tgt, 1e-3).unwrap(),
            t.step_orthogonalization(&src, &tgt, 1e-3).unwrap(),
            t.step_combined(&src, &tgt, 1e-3).unwrap(),
        ] {
            assert!((report.total - report.sum_parts()).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_swapped_domains() {
        let (_tmp, root) = tiny_corpus();
        let mut t = Trainer::new(tiny_train_cfg(), &root).unwrap();
        let (src, tgt) = t.sample_pair();
        assert!(t.step_decomposition(&tgt, &src, 1e-3).is_err());
        assert!(t.step_orthogonalization(&tgt, &src, 1e-3).is_err());
    }

    #[test]
    fn run_writes_log_and_checkpoints_deterministically() {
        let (_tmp, root) = tiny_corpus();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        train(tiny_train_cfg(), &root, out1.path()).unwrap();
        train(tiny_train_cfg(), &root, out2.path()).unwrap();
        let l1 = std::fs::read(out1.path().join("loss_log.jsonl")).unwrap();
        let l2 = std::fs::read(out2.path().join("loss_log.jsonl")).unwrap();
        assert!(!l1.is_empty());
        assert_eq!(l1, l2);
        let c1 = std::fs::read(out1.path().join("ckpt_final.bin")).unwrap();
        let c2 = std::fs::read(out2.path().join("ckpt_final.bin")).unwrap();
        assert_eq!(c1, c2);

        // one decomposition and one orthogonalization record per iteration
        let text = String::from_utf8(l1).unwrap();
        let mut per_iter = std::collections::BTreeMap::new();
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).unwrap();
            let e = per_iter.entry(rec.iteration).or_insert((0, 0));
            match rec.report.step {
                StepKind::Decomposition => e.0 += 1,
                StepKind::Orthogonalization => e.1 += 1,
                StepKind::Combined => {}
            }
        }
        assert_eq!(per_iter.len(), 3);
        assert!(per_iter.values().all(|&(d, o)| d == 1 && o == 1));
    }

    #[test]
    fn zero_lr_training_ends_at_initialization() {
        let (_tmp, root) = tiny_corpus();
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr_phase1: 0.0,
            lr_phase2: 0.0,
            iterations_phase1: 3,
            iterations_phase2: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let final_path = train(cfg, &root, out.path()).unwrap();
        let init = std::fs::read(out.path().join("ckpt_init.bin")).unwrap();
        let fin = std::fs::read(final_path).unwrap();
        assert_eq!(init, fin);
    }

    #[test]
    fn source_only_updates_only_detection_groups() {
        let (_tmp, root) = tiny_corpus();
        let cfg = TrainConfig {
            method: Method::SourceOnly,
            ..tiny_train_cfg()
        };
        let mut t = Trainer::new(cfg, &root).unwrap();
        assert!(!t.model.group_names().contains(&GROUP_DIR));
        let (src, _tgt) = t.sample_pair();
        let before = t.model.group_hash(GROUP_BACKBONE);
        let report = t.step_source_only(&src, 1e-3).unwrap();
        assert!(report.l_dom_src.is_none());
        assert_ne!(t.model.group_hash(GROUP_BACKBONE), before);
    }
}
