//! A small trainable detection head and its training loop.
//!
//! Every decoder stage owns three two-layer perceptrons (tanh hidden layer):
//! class logits with a trailing background class, six face distances plus a
//! heading, and a centerness logit. Losses are cross-entropy (or focal) over
//! all proposals, smooth-L1 on the regression over positives and binary
//! cross-entropy on centerness over positives. Gradients are computed by
//! hand; they do not flow between stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_targets, Assignment, CpaSchedule};
use crate::cascade::{
    append_denoising, proposals_from_scores, run_cascade, selection_score, Prediction, Predictor,
    Proposal,
};
use crate::error::{Error, Result};
use crate::geometry::Deltas;
use crate::pipeline::PipelineConfig;
use crate::synth::{candidate_points, SyntheticScene};
use crate::voting::FeatureVec;

/// Regression outputs: six face distances then the heading.
pub const REG_DIM: usize = 7;

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense two-layer perceptron, row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let a1 = (6.0 / (in_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + out_dim) as f64).sqrt();
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: (0..in_dim * hidden)
                .map(|_| rng.random_range(-a1..a1))
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden * out_dim)
                .map(|_| rng.random_range(-a2..a2))
                .collect(),
            b2: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            ..*self
        }
    }

    /// Returns `(hidden activations, outputs)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = self
            .w1
            .chunks_exact(self.in_dim)
            .zip(&self.b1)
            .map(|(row, b)| (b + dot(row, x)).tanh())
            .collect();
        let y = self
            .w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| b + dot(row, &h))
            .collect();
        (h, y)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` into `grad`.
    fn backward(&self, x: &[f64], h: &[f64], dy: &[f64], grad: &mut Mlp) {
        if dy.iter().all(|&g| g == 0.0) {
            return;
        }
        let mut dh = vec![0.0; self.hidden];
        for (k, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[k] += g;
            let rows = k * self.hidden..(k + 1) * self.hidden;
            let gw = &mut grad.w2[rows.clone()];
            for (((gw, dh), w), hj) in gw.iter_mut().zip(&mut dh).zip(&self.w2[rows]).zip(h) {
                *gw += g * hj;
                *dh += g * w;
            }
        }
        for (j, (dh, hj)) in dh.iter().zip(h).enumerate() {
            let dz = dh * (1.0 - hj * hj);
            if dz == 0.0 {
                continue;
            }
            grad.b1[j] += dz;
            let row = &mut grad.w1[j * self.in_dim..(j + 1) * self.in_dim];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw += dz * xi;
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHead {
    pub cls: Mlp,
    pub reg: Mlp,
    pub ctr: Mlp,
}

impl StageHead {
    fn zeros_like(&self) -> Self {
        Self {
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
            ctr: self.ctr.zeros_like(),
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.cls
            .params_mut()
            .chain(self.reg.params_mut())
            .chain(self.ctr.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.cls
            .params()
            .chain(self.reg.params())
            .chain(self.ctr.params())
    }

    pub fn forward(&self, x: &[f64]) -> HeadOutput {
        let (hc, cls_logits) = self.cls.forward(x);
        let (hr, reg) = self.reg.forward(x);
        let (hz, ctr) = self.ctr.forward(x);
        HeadOutput {
            cls_logits,
            reg,
            ctr_logit: ctr[0],
            hidden: [hc, hr, hz],
        }
    }

    fn backward(&self, x: &[f64], out: &HeadOutput, g: &OutputGrad, grad: &mut StageHead) {
        self.cls
            .backward(x, &out.hidden[0], &g.cls_logits, &mut grad.cls);
        self.reg.backward(x, &out.hidden[1], &g.reg, &mut grad.reg);
        self.ctr
            .backward(x, &out.hidden[2], &[g.ctr_logit], &mut grad.ctr);
    }
}

/// Trainable parameters of all stage heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub feature_dim: usize,
    pub num_classes: u32,
    pub hidden: usize,
    pub stages: Vec<StageHead>,
}

impl HeadParams {
    pub fn init(
        feature_dim: usize,
        num_classes: u32,
        hidden: usize,
        num_stages: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..num_stages)
            .map(|_| StageHead {
                cls: Mlp::new(feature_dim, hidden, num_classes as usize + 1, &mut rng),
                reg: Mlp::new(feature_dim, hidden, REG_DIM, &mut rng),
                ctr: Mlp::new(feature_dim, hidden, 1, &mut rng),
            })
            .collect();
        Self {
            feature_dim,
            num_classes,
            hidden,
            stages,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(StageHead::zeros_like).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.params().all(|v| v.is_finite()))
    }

    /// Head used for 1-based `stage`; stages past the end reuse the last head.
    pub fn head(&self, stage: usize) -> &StageHead {
        &self.stages[stage.clamp(1, self.stages.len()) - 1]
    }
}

/// Raw head outputs for one proposal, with the hidden activations needed by
/// backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub cls_logits: Vec<f64>,
    pub reg: Vec<f64>,
    pub ctr_logit: f64,
    hidden: [Vec<f64>; 3],
}

/// Loss gradient with respect to one proposal's raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub cls_logits: Vec<f64>,
    pub reg: Vec<f64>,
    pub ctr_logit: f64,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl HeadOutput {
    pub fn to_prediction(&self) -> Prediction {
        let mut d = [0.0; 6];
        d.copy_from_slice(&self.reg[..6]);
        Prediction {
            class_probs: softmax(&self.cls_logits),
            deltas: Deltas::new(d, self.reg[6]),
            centerness: sigmoid(self.ctr_logit),
        }
    }
}

/// Predictor backed by trained heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadPredictor<'a>(pub &'a HeadParams);

impl Predictor for HeadPredictor<'_> {
    fn predict(&self, proposal: &Proposal, stage: usize) -> Prediction {
        self.0
            .head(stage)
            .forward(proposal.feature.as_slice())
            .to_prediction()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub ctr_weight: f64,
    pub focal: bool,
    pub focal_gamma: f64,
    /// Transition point of the smooth-L1 loss.
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            reg_weight: 1.0,
            ctr_weight: 1.0,
            focal: false,
            focal_gamma: 2.0,
            smooth_l1_beta: 0.1,
        }
    }
}

/// Losses of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLoss {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub total: f64,
    /// Positives among regular proposals (denoising proposals excluded).
    pub positives: usize,
}

/// Per-stage losses at one training step (averaged over the batch; positive
/// counts summed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stages: Vec<StageLoss>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.total).sum()
    }
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Cross-entropy or focal loss and its gradient with respect to the logits.
fn class_loss(logits: &[f64], target: usize, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let pt = p[target].max(1e-300);
    let onehot = |k: usize| if k == target { 1.0 } else { 0.0 };
    if !cfg.focal {
        let loss = -pt.ln();
        return (loss, (0..p.len()).map(|k| p[k] - onehot(k)).collect());
    }
    let g = cfg.focal_gamma;
    let q = 1.0 - pt;
    let loss = -q.powf(g) * pt.ln();
    // dL/dpt, then chain through dpt/dz_k = pt (onehot_k - p_k).
    let dl_dpt = if g == 0.0 {
        -1.0 / pt
    } else {
        g * q.powf(g - 1.0) * pt.ln() - q.powf(g) / pt
    };
    (
        loss,
        (0..p.len())
            .map(|k| dl_dpt * pt * (onehot(k) - p[k]))
            .collect(),
    )
}

/// Losses of one stage's outputs against its assignment, and the gradient of
/// the weighted total with respect to every output.
pub fn compute_losses(
    outputs: &[HeadOutput],
    assignment: &Assignment,
    num_classes: u32,
    cfg: &LossConfig,
) -> Result<(StageLoss, Vec<OutputGrad>)> {
    if outputs.len() != assignment.targets.len() {
        return Err(Error::Misaligned {
            what: "head outputs vs assignment",
            left: outputs.len(),
            right: assignment.targets.len(),
        });
    }
    let n = outputs.len();
    let background = num_classes as usize;
    let num_pos = assignment
        .targets
        .iter()
        .filter(|t| t.is_positive())
        .count();
    // Classification is summed over all proposals and normalized by the
    // positive count (at least one), so sparse positives are not drowned out.
    let cls_norm = num_pos.max(1) as f64;
    let mut report = StageLoss {
        positives: assignment.regular_positive_count(),
        ..StageLoss::default()
    };
    let mut grads = Vec::with_capacity(n);

    for (out, target) in outputs.iter().zip(&assignment.targets) {
        if out.cls_logits.len() != background + 1 || out.reg.len() != REG_DIM {
            return Err(Error::DimensionMismatch {
                expected: background + 1,
                got: out.cls_logits.len(),
            });
        }
        let cls_target = target
            .matched
            .map_or(background, |m| m.class_id.unwrap_or(0) as usize);
        let (l, mut g_cls) = class_loss(&out.cls_logits, cls_target, cfg);
        report.cls += l / cls_norm;
        for g in &mut g_cls {
            *g *= cfg.cls_weight / cls_norm;
        }

        let mut g_reg = vec![0.0; REG_DIM];
        let mut g_ctr = 0.0;
        if let Some(m) = target.matched {
            let scale = 1.0 / num_pos as f64;
            let goal: Vec<f64> = m
                .deltas
                .d
                .iter()
                .copied()
                .chain([m.deltas.heading])
                .collect();
            for k in 0..REG_DIM {
                let (l, g) = smooth_l1(out.reg[k] - goal[k], cfg.smooth_l1_beta);
                report.reg += l * scale;
                g_reg[k] = g * scale * cfg.reg_weight;
            }
            let z = out.ctr_logit;
            let t = m.centerness;
            report.ctr += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) * scale;
            g_ctr = (sigmoid(z) - t) * scale * cfg.ctr_weight;
        }
        grads.push(OutputGrad {
            cls_logits: g_cls,
            reg: g_reg,
            ctr_logit: g_ctr,
        });
    }
    report.total =
        cfg.cls_weight * report.cls + cfg.reg_weight * report.reg + cfg.ctr_weight * report.ctr;
    Ok((report, grads))
}

/// Forward pass, losses and accumulated parameter gradients of one stage head.
pub fn stage_loss_and_grad(
    head: &StageHead,
    features: &[FeatureVec],
    assignment: &Assignment,
    num_classes: u32,
    cfg: &LossConfig,
    grad: &mut StageHead,
) -> Result<StageLoss> {
    let outputs: Vec<HeadOutput> = features
        .iter()
        .map(|f| head.forward(f.as_slice()))
        .collect();
    backprop(
        head,
        features.iter(),
        &outputs,
        assignment,
        num_classes,
        cfg,
        grad,
    )
}

/// Losses and gradients from outputs already computed by `head` on `features`.
fn backprop<'a>(
    head: &StageHead,
    features: impl Iterator<Item = &'a FeatureVec>,
    outputs: &[HeadOutput],
    assignment: &Assignment,
    num_classes: u32,
    cfg: &LossConfig,
    grad: &mut StageHead,
) -> Result<StageLoss> {
    let (report, grads) = compute_losses(outputs, assignment, num_classes, cfg)?;
    for ((f, out), g) in features.zip(outputs).zip(&grads) {
        head.backward(f.as_slice(), out, g, grad);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub num_classes: u32,
    pub denoising: bool,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            batch_size: 4,
            hidden: 32,
            num_classes: 4,
            denoising: true,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

/// Trains one head per stage with stochastic gradient descent. Stage `l` is
/// supervised at that stage's assignment threshold; denoising proposals keep
/// their fixed targets. The first head is supervised on every candidate,
/// later heads on the proposals carried through the cascade. Reported
/// positive counts are over the carried regular proposals. Returns the
/// parameters and one report per step.
pub fn train_cascade(
    scenes: &[SyntheticScene],
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<(HeadParams, Vec<LossReport>)> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "steps and batch_size must be >= 1".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no training scenes"));
    }
    pipeline.validate()?;
    let sched: &CpaSchedule = &pipeline.schedule;
    let candidates: Vec<_> = scenes
        .iter()
        .map(|s| candidate_points(s, pipeline.voxel_size))
        .collect::<Result<_>>()?;
    let feature_dim = candidates
        .iter()
        .flat_map(|(_, f)| f.first())
        .map(FeatureVec::dim)
        .next()
        .ok_or(Error::EmptyInput("scenes have no points"))?;

    let mut params = HeadParams::init(
        feature_dim,
        cfg.num_classes,
        cfg.hidden,
        sched.num_stages,
        cfg.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut grad = params.zeros_like();
        let mut stage_losses = vec![StageLoss::default(); sched.num_stages];
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..scenes.len());
            let (points, features) = &candidates[k];
            let predictor = HeadPredictor(&params);
            // One dense stage-1 pass serves both ranking and the first head's loss.
            let dense: Vec<HeadOutput> = features
                .iter()
                .map(|f| params.stages[0].forward(f.as_slice()))
                .collect();
            let scores: Vec<f64> = dense
                .iter()
                .map(|o| selection_score(&o.to_prediction()))
                .collect();
            let mut proposals =
                proposals_from_scores(points, features, &scores, pipeline.num_proposals)?;
            if cfg.denoising {
                append_denoising(&mut proposals, points, features, &scenes[k].gt_boxes)?;
            }
            let trace = run_cascade(
                proposals,
                &predictor,
                sched,
                pipeline.weighting,
                Some(&scenes[k].gt_boxes),
            )
            .map_err(|e| match e {
                Error::PredictorOutput(_) => Error::Diverged { step },
                other => other,
            })?;
            for (l, rec) in trace.stages.iter().enumerate() {
                let assignment = rec.assignment.as_ref().expect("ground truth supplied");
                let head = &params.stages[l];
                let mut s = if l == 0 {
                    // The first head also ranks candidates, so it sees all of them.
                    let mut targets = assign_targets(points, &scenes[k].gt_boxes, assignment.mu);
                    let mut outputs = dense.clone();
                    let mut extra = Vec::new();
                    for (p, t) in rec.proposals.iter().zip(&assignment.targets) {
                        if p.is_denoising {
                            outputs.push(head.forward(p.feature.as_slice()));
                            targets.targets.push(*t);
                            extra.push(&p.feature);
                        }
                    }
                    let feats = features.iter().chain(extra);
                    backprop(
                        head,
                        feats,
                        &outputs,
                        &targets,
                        cfg.num_classes,
                        &cfg.loss,
                        &mut grad.stages[l],
                    )?
                } else {
                    let feats: Vec<FeatureVec> =
                        rec.proposals.iter().map(|p| p.feature.clone()).collect();
                    stage_loss_and_grad(
                        head,
                        &feats,
                        assignment,
                        cfg.num_classes,
                        &cfg.loss,
                        &mut grad.stages[l],
                    )?
                };
                s.positives = assignment.regular_positive_count();
                let acc = &mut stage_losses[l];
                let inv = 1.0 / cfg.batch_size as f64;
                acc.cls += s.cls * inv;
                acc.reg += s.reg * inv;
                acc.ctr += s.ctr * inv;
                acc.total += s.total * inv;
                acc.positives += s.positives;
            }
        }
        let report = LossReport {
            step,
            stages: stage_losses,
        };
        if !report.total().is_finite() {
            return Err(Error::Diverged { step });
        }
        let scale = cfg.lr / cfg.batch_size as f64;
        for (p, g) in params.stages.iter_mut().zip(&grad.stages) {
            for (w, dw) in p.params_mut().zip(g.params()) {
                *w -= scale * dw;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(report);
    }
    Ok((params, history))
}
