//! Training loop, iterative inference with proposal renewal, and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{self, iou_3d, Box3D, NormalizedResidual7};
use crate::diffusion::{self, ddim_step, make_timestep_sequence, q_sample, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{self, decode_prediction, LossConfig, RegressionSample};
use crate::network::{HamConfig, NetConfig, NetInput, NetOutput, RefineNet};
use crate::params::{Adam, AdamConfig, Gradients};
use crate::scene::{
    derive_seed, generate_proposals, grid_side, rng_for, roi_raw_features, standard_normal,
    ProposalBatch, ProposalSpec, Scene, SceneSpec,
};

const INIT_STREAM: u64 = 0x494e_4954;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const PROPOSAL_STREAM: u64 = 0x5052_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    /// Learning rate reached at the end of a full run (cosine decay).
    pub lr_min: f64,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub loss: LossConfig,
    pub ham: HamConfig,
    pub enable_ham: bool,
    pub enable_diffusion: bool,
    pub enable_tt: bool,
    pub proposals: ProposalSpec,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_scenes: 4,
            lr: 1e-3,
            lr_min: 1e-5,
            seed: 0,
            diffusion: DiffusionConfig::default(),
            loss: LossConfig::default(),
            ham: HamConfig::default(),
            enable_ham: true,
            enable_diffusion: true,
            enable_tt: true,
            proposals: ProposalSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!(
                "lr_min must lie in [0, lr], got {}",
                self.lr_min
            )));
        }
        if self.proposals.jitter.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("proposals.jitter must be non-negative".into()));
        }
        self.diffusion.validate()?;
        self.loss.validate()?;
        self.ham.validate()?;
        self.scene.validate()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            ham: self.ham,
            enable_ham: self.enable_ham,
            enable_tt: self.enable_tt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ensemble {
    None,
    Mean,
    Nms,
}

impl Ensemble {
    pub const ALL: [Ensemble; 3] = [Ensemble::None, Ensemble::Mean, Ensemble::Nms];
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ensemble::None => "none",
            Ensemble::Mean => "mean",
            Ensemble::Nms => "nms",
        })
    }
}

impl FromStr for Ensemble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ensemble::None),
            "mean" => Ok(Ensemble::Mean),
            "nms" => Ok(Ensemble::Nms),
            _ => Err(Error::Config(format!(
                "unknown ensemble `{s}` (expected none, mean or nms)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub steps: usize,
    pub ensemble: Ensemble,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            steps: 3,
            ensemble: Ensemble::Mean,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        make_timestep_sequence(timesteps, self.steps).map(|_| ())
    }
}

/// A network together with the diffusion process it was trained under.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: RefineNet,
    pub diffusion: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub enable_diffusion: bool,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = RefineNet::new(cfg.net_config(), derive_seed(cfg.seed, INIT_STREAM))?;
        Model::from_parts(net, cfg.diffusion, cfg.enable_diffusion)
    }

    pub fn from_parts(net: RefineNet, diffusion: DiffusionConfig, enable_diffusion: bool) -> Result<Self> {
        diffusion.validate()?;
        let schedule = NoiseSchedule::from_config(&diffusion)?;
        Ok(Model {
            net,
            diffusion,
            schedule,
            enable_diffusion,
        })
    }

    fn side(&self) -> Result<usize> {
        grid_side(self.net.tokens())
    }

    /// Clamped `eps / snr` with fresh standard normals.
    fn pure_noise(&self, rng: &mut ChaCha8Rng) -> NormalizedResidual7 {
        let snr = self.diffusion.snr;
        NormalizedResidual7(std::array::from_fn(|_| standard_normal(rng) / snr))
            .clamp(self.diffusion.clamp_bound)
    }
}

fn normal7(rng: &mut ChaCha8Rng) -> [f64; 7] {
    std::array::from_fn(|_| standard_normal(rng))
}

/// Everything needed to evaluate the network and losses on one proposal.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub proposal: Box3D,
    pub target_box: Box3D,
    pub x0: NormalizedResidual7,
    pub iou: f64,
    pub t: usize,
    pub x_t: NormalizedResidual7,
    pub hypothesis: Box3D,
    pub raw_proposal: Vec<f64>,
    pub raw_hypothesis: Vec<f64>,
}

/// Builds one training sample per proposal: a single hypothesis each, drawn
/// by forward diffusion of the ground-truth residual (or from pure noise when
/// diffusion is disabled). Unmatched proposals regress toward themselves and
/// are masked out of the regression loss by their zero IoU.
pub fn prepare_samples(
    model: &Model,
    scene: &Scene,
    batch: &ProposalBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    let side = model.side()?;
    let t_max = model.schedule.timesteps;
    let mut out = Vec::with_capacity(batch.len());
    for (i, p) in batch.proposals.iter().enumerate() {
        let (target_box, iou) = match batch.matched_gt_index[i] {
            Some(g) => (scene.gt_boxes[g], batch.ious[i]),
            None => (*p, 0.0),
        };
        let x0 = boxes::normalize(&boxes::encode(p, &target_box)?, p);
        let t = rng.gen_range(1..=t_max);
        let eps = normal7(rng);
        let x_t = if model.enable_diffusion {
            q_sample(&x0, t, &eps, &model.schedule, &model.diffusion)?
        } else {
            let snr = model.diffusion.snr;
            NormalizedResidual7(eps.map(|e| e / snr)).clamp(model.diffusion.clamp_bound)
        };
        let (hypothesis, _) = decode_prediction(p, &x_t)?;
        out.push(TrainSample {
            proposal: *p,
            target_box,
            x0,
            iou,
            t,
            x_t,
            hypothesis,
            raw_proposal: roi_raw_features(&scene.points, p, side),
            raw_hypothesis: roi_raw_features(&scene.points, &hypothesis, side),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchLoss {
    pub reg: f64,
    pub cls: f64,
    pub samples: usize,
    /// Samples whose IoU passes the regression gate.
    pub positives: usize,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.reg + self.cls
    }
}

/// Total loss over a set of samples and its gradient with respect to every
/// network parameter.
pub fn batch_loss_and_grads(
    net: &RefineNet,
    samples: &[TrainSample],
    loss_cfg: &LossConfig,
) -> Result<(BatchLoss, Gradients)> {
    let mut outputs = Vec::with_capacity(samples.len());
    let mut caches = Vec::with_capacity(samples.len());
    for s in samples {
        let (out, cache) = net.forward(&NetInput {
            raw_proposal: &s.raw_proposal,
            raw_hypothesis: &s.raw_hypothesis,
            x_t: s.x_t,
            t: s.t,
            yaw: s.proposal.theta,
        })?;
        outputs.push(out);
        caches.push(cache);
    }
    let reg_samples: Vec<RegressionSample> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| RegressionSample {
            pred: o.x0_hat,
            target: s.x0,
            proposal: s.proposal,
            target_box: s.target_box,
            iou: s.iou,
        })
        .collect();
    let reg = losses::regression_loss(&reg_samples, loss_cfg)?;
    let logits: Vec<f64> = outputs.iter().map(|o| o.logit).collect();
    let ious: Vec<f64> = samples.iter().map(|s| s.iou).collect();
    let (cls, dlogit) = losses::classification_loss_logits(&logits, &ious, loss_cfg)?;
    let mut grads = net.params.zeros_like_grads();
    for (i, cache) in caches.iter().enumerate() {
        net.backward(cache, &reg.grad[i], dlogit[i], &mut grads);
    }
    let positives = samples.iter().filter(|s| s.iou >= loss_cfg.theta_reg).count();
    Ok((
        BatchLoss {
            reg: reg.value,
            cls,
            samples: samples.len(),
            positives,
        },
        grads,
    ))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub reg: f64,
    pub cls: f64,
    pub samples: usize,
    pub positives: usize,
}

/// Stateful optimizer loop around a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    adam: Adam,
    /// Length of the cosine decay; zero keeps the learning rate constant.
    planned_steps: u64,
    /// Steps taken on batches without a single regression positive.
    pub classification_only_steps: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let adam = Adam::new(
            &model.net.params,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam,
            planned_steps: 0,
            classification_only_steps: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        let (hi, lo) = (self.cfg.lr, self.cfg.lr_min);
        if self.planned_steps <= 1 {
            return hi;
        }
        let frac = (self.steps_taken() as f64 / (self.planned_steps - 1) as f64).min(1.0);
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Computes the batch loss and applies one optimizer update.
    pub fn train_step(&mut self, samples: &[TrainSample]) -> Result<BatchLoss> {
        let (loss, grads) = batch_loss_and_grads(&self.model.net, samples, &self.cfg.loss)?;
        if !loss.total().is_finite() {
            return Err(Error::Config(format!(
                "non-finite loss at step {}",
                self.steps_taken()
            )));
        }
        if loss.positives == 0 {
            self.classification_only_steps += 1;
        }
        self.adam.cfg.lr = self.current_lr();
        let ps = &mut self.model.net.params;
        ps.zero_grad();
        ps.accumulate(&grads);
        self.adam.step(ps);
        Ok(loss)
    }

    /// Training proposals for a scene in a given epoch. Jitter is redrawn
    /// every epoch.
    pub fn proposals_for(&self, scene: &Scene, epoch: usize) -> Result<ProposalBatch> {
        generate_proposals(
            scene,
            derive_seed(self.cfg.seed ^ PROPOSAL_STREAM, epoch as u64),
            &self.cfg.proposals,
            &self.cfg.scene,
        )
    }

    /// Runs one epoch over `scenes` in a seeded shuffled order.
    pub fn run_epoch(
        &mut self,
        scenes: &[Scene],
        epoch: usize,
        mut log: impl FnMut(&TrainLogRow),
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        let mut rng = rng_for(self.cfg.seed ^ NOISE_STREAM, epoch as u64);
        for chunk in order.chunks(self.cfg.batch_scenes) {
            let mut samples = Vec::new();
            for &i in chunk {
                let batch = self.proposals_for(&scenes[i], epoch)?;
                samples.extend(prepare_samples(&self.model, &scenes[i], &batch, &mut rng)?);
            }
            if samples.is_empty() {
                continue;
            }
            let loss = self.train_step(&samples)?;
            log(&TrainLogRow {
                step: self.steps_taken(),
                epoch,
                reg: loss.reg,
                cls: loss.cls,
                samples: loss.samples,
                positives: loss.positives,
            });
        }
        Ok(())
    }

    pub fn fit(&mut self, scenes: &[Scene], mut log: impl FnMut(&TrainLogRow)) -> Result<()> {
        let per_epoch = scenes.len().div_ceil(self.cfg.batch_scenes) as u64;
        self.planned_steps = per_epoch * self.cfg.epochs as u64;
        for epoch in 0..self.cfg.epochs {
            self.run_epoch(scenes, epoch, &mut log)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `scenes` for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, scenes: &[Scene], log: impl FnMut(&TrainLogRow)) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(scenes, log)?;
    Ok(trainer)
}

/// One sampling step for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub proposal: Box3D,
    pub hypothesis: Box3D,
    pub prediction: Box3D,
    /// Ensemble of predictions up to and including this step.
    pub ensembled: Box3D,
    pub confidence: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTrace {
    pub initial: Box3D,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub scene_id: u64,
    pub proposals: ProposalBatch,
    pub boxes: Vec<Box3D>,
    pub confidences: Vec<f64>,
    pub traces: Vec<ProposalTrace>,
    /// DDIM updates whose direction coefficient had to be clamped.
    pub clamped_updates: usize,
}

/// Component mean of box parameters; yaw is averaged on the circle.
pub fn mean_box(boxes_in: &[Box3D]) -> Result<Box3D> {
    match boxes_in {
        [] => Err(Error::Config("mean of zero boxes".into())),
        [b] => Ok(*b),
        _ => {
            let n = boxes_in.len() as f64;
            let mut acc = [0.0; 6];
            let (mut s, mut c) = (0.0, 0.0);
            for b in boxes_in {
                let a = b.to_array();
                for k in 0..6 {
                    acc[k] += a[k];
                }
                s += b.theta.sin();
                c += b.theta.cos();
            }
            let m = acc.map(|v| v / n);
            Box3D::new(m[0], m[1], m[2], m[3], m[4], m[5], s.atan2(c))
        }
    }
}

fn ensemble_of(mode: Ensemble, preds: &[Box3D], confs: &[f64]) -> Result<Box3D> {
    match mode {
        Ensemble::None => preds
            .last()
            .copied()
            .ok_or_else(|| Error::Config("ensemble of zero steps".into())),
        Ensemble::Mean => mean_box(preds),
        Ensemble::Nms => {
            let mut best = 0;
            for (k, c) in confs.iter().enumerate() {
                if *c > confs[best] {
                    best = k;
                }
            }
            preds
                .get(best)
                .copied()
                .ok_or_else(|| Error::Config("ensemble of zero steps".into()))
        }
    }
}

/// Re-expresses a DDIM state given relative to `old` as the same hypothesis
/// box relative to `new`.
pub fn reexpress(
    x: &NormalizedResidual7,
    old: &Box3D,
    new: &Box3D,
) -> Result<NormalizedResidual7> {
    let (hyp, _) = decode_prediction(old, x)?;
    Ok(boxes::normalize(&boxes::encode(new, &hyp)?, new))
}

/// Iterative refinement of every proposal of a scene.
pub fn infer(
    model: &Model,
    scene: &Scene,
    proposals: &ProposalBatch,
    cfg: &InferConfig,
) -> Result<ScenePrediction> {
    let seq = make_timestep_sequence(model.schedule.timesteps, cfg.steps)?;
    let pairs = diffusion::step_pairs(&seq);
    let side = model.side()?;
    let bound = model.diffusion.clamp_bound;
    let scene_seed = derive_seed(cfg.seed, scene.scene_id);
    let mut out = ScenePrediction {
        scene_id: scene.scene_id,
        proposals: proposals.clone(),
        boxes: Vec::with_capacity(proposals.len()),
        confidences: Vec::with_capacity(proposals.len()),
        traces: Vec::with_capacity(proposals.len()),
        clamped_updates: 0,
    };
    for (i, p0) in proposals.proposals.iter().enumerate() {
        let mut rng = rng_for(scene_seed, i as u64);
        let mut x = model.pure_noise(&mut rng);
        let mut proposal = *p0;
        let raw_p0 = roi_raw_features(&scene.points, p0, side);
        let mut raw_p = raw_p0;
        let mut preds = Vec::with_capacity(pairs.len());
        let mut confs = Vec::with_capacity(pairs.len());
        let mut steps = Vec::with_capacity(pairs.len());
        for (k, &(t, t_prev)) in pairs.iter().enumerate() {
            if k > 0 {
                raw_p = roi_raw_features(&scene.points, &proposal, side);
            }
            // the carried state is not clamped so renewal stays exact; the
            // network sees it within the training range
            let x_in = x.clamp(bound);
            let (hypothesis, _) = decode_prediction(&proposal, &x_in)?;
            let raw_h = roi_raw_features(&scene.points, &hypothesis, side);
            let (NetOutput { x0_hat, c_hat, .. }, _) = model.net.forward(&NetInput {
                raw_proposal: &raw_p,
                raw_hypothesis: &raw_h,
                x_t: x_in,
                t,
                yaw: proposal.theta,
            })?;
            let (prediction, _) = decode_prediction(&proposal, &x0_hat)?;
            let eps_new = normal7(&mut rng);
            let (x_next, sigma) = if model.enable_diffusion {
                let step = ddim_step(&x_in, &x0_hat, t, t_prev, &eps_new, &model.schedule)?;
                out.clamped_updates += step.clamped as usize;
                (step.next, step.sigma)
            } else {
                (model.pure_noise(&mut rng), 0.0)
            };
            x = reexpress(&x_next, &proposal, &prediction)?;
            preds.push(prediction);
            confs.push(c_hat);
            steps.push(StepRecord {
                t,
                proposal,
                hypothesis,
                prediction,
                ensembled: ensemble_of(cfg.ensemble, &preds, &confs)?,
                confidence: c_hat,
                sigma,
            });
            proposal = prediction;
        }
        let last = steps.last().ok_or_else(|| Error::Config("zero sampling steps".into()))?;
        out.boxes.push(last.ensembled);
        out.confidences.push(last.confidence);
        out.traces.push(ProposalTrace {
            initial: *p0,
            steps,
        });
    }
    Ok(out)
}

/// Thresholds for [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalThresholds {
    pub ap_iou: f64,
    pub recall_ious: Vec<f64>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            ap_iou: 0.5,
            recall_ious: vec![0.3, 0.5, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean IoU of each assigned proposal with its ground truth.
    pub mean_iou_proposals: f64,
    /// Mean IoU of the refined box with the same ground truth.
    pub mean_iou_predictions: f64,
    /// Fraction of ground truths covered by some prediction, keyed by the
    /// IoU threshold formatted with two decimals.
    pub recall_at: BTreeMap<String, f64>,
    /// `None` when there is no ground truth.
    pub ap_r40: Option<f64>,
    pub per_step_mean_iou: Vec<f64>,
    pub latency_ms_per_scene: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub num_matched_proposals: usize,
}

pub fn recall_key(thr: f64) -> String {
    format!("{thr:.2}")
}

/// Average precision interpolated at 40 recall positions from
/// confidence-ranked true/false-positive flags.
pub fn ap_r40(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut prec = Vec::with_capacity(ranked_tp.len());
    let mut rec = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    let mut sum = 0.0;
    for j in 1..=40 {
        let r = j as f64 / 40.0;
        let p = rec
            .iter()
            .zip(&prec)
            .filter(|(rc, _)| **rc >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 40.0)
}

/// Greedy confidence-ordered matching within each scene. Returns the
/// `(confidence, is_true_positive)` pairs of every prediction.
fn match_predictions(pred: &ScenePrediction, gt: &[Box3D], thr: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..pred.boxes.len()).collect();
    order.sort_by(|&a, &b| pred.confidences[b].total_cmp(&pred.confidences[a]).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = iou_3d(&pred.boxes[i], gb);
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push((pred.confidences[i], best.is_some()));
    }
    out
}

/// Aggregates predictions over scenes (in the given order). Latency is left
/// at zero for the caller to fill in.
pub fn evaluate(
    predictions: &[ScenePrediction],
    scenes: &[Scene],
    thresholds: &EvalThresholds,
) -> Result<EvalReport> {
    if predictions.len() != scenes.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    let steps = predictions
        .iter()
        .flat_map(|p| p.traces.first())
        .map(|t| t.steps.len())
        .next()
        .unwrap_or(0);
    let mut iou_prop = 0.0;
    let mut iou_pred = 0.0;
    let mut per_step = vec![0.0; steps];
    let mut matched = 0usize;
    let mut num_gt = 0usize;
    let mut num_pred = 0usize;
    let mut covered = vec![0usize; thresholds.recall_ious.len()];
    let mut ranked = Vec::new();
    for (pred, scene) in predictions.iter().zip(scenes) {
        if pred.scene_id != scene.scene_id {
            return Err(Error::Config(format!(
                "prediction for scene {} paired with scene {}",
                pred.scene_id, scene.scene_id
            )));
        }
        num_gt += scene.gt_boxes.len();
        num_pred += pred.boxes.len();
        for (i, g) in pred.proposals.matched_gt_index.iter().enumerate() {
            let Some(g) = *g else { continue };
            let gt = &scene.gt_boxes[g];
            matched += 1;
            iou_prop += iou_3d(&pred.proposals.proposals[i], gt);
            iou_pred += iou_3d(&pred.boxes[i], gt);
            if let Some(trace) = pred.traces.get(i) {
                for (k, s) in trace.steps.iter().enumerate().take(steps) {
                    per_step[k] += iou_3d(&s.ensembled, gt);
                }
            }
        }
        for gt in &scene.gt_boxes {
            let best = pred.boxes.iter().map(|b| iou_3d(b, gt)).fold(0.0, f64::max);
            for (c, thr) in covered.iter_mut().zip(&thresholds.recall_ious) {
                *c += (best >= *thr) as usize;
            }
        }
        ranked.extend(match_predictions(pred, &scene.gt_boxes, thresholds.ap_iou));
    }
    // stable sort keeps scene order among ties
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    let mean = |s: f64| if matched > 0 { s / matched as f64 } else { 0.0 };
    let recall_at = thresholds
        .recall_ious
        .iter()
        .zip(&covered)
        .map(|(thr, c)| {
            let r = if num_gt > 0 { *c as f64 / num_gt as f64 } else { 0.0 };
            (recall_key(*thr), r)
        })
        .collect();
    Ok(EvalReport {
        mean_iou_proposals: mean(iou_prop),
        mean_iou_predictions: mean(iou_pred),
        recall_at,
        ap_r40: ap_r40(&flags, num_gt),
        per_step_mean_iou: per_step.into_iter().map(mean).collect(),
        latency_ms_per_scene: 0.0,
        num_gt,
        num_predictions: num_pred,
        num_matched_proposals: matched,
    })
}

/// Evaluation proposals for a scene: a fixed jitter draw per seed.
pub fn eval_proposals(
    scene: &Scene,
    seed: u64,
    proposals: &ProposalSpec,
    scene_spec: &SceneSpec,
) -> Result<ProposalBatch> {
    generate_proposals(scene, seed, proposals, scene_spec)
}

/// Norm of the temporal scale factor at each requested timestep.
pub fn export_tt_norms(model: &Model, timesteps: &[usize]) -> Result<Vec<(usize, f64)>> {
    timesteps
        .iter()
        .map(|&t| {
            if t > model.schedule.timesteps {
                return Err(Error::Timestep {
                    t,
                    max: model.schedule.timesteps,
                });
            }
            Ok((t, model.net.tt_scale_norm(t)?))
        })
        .collect()
}
