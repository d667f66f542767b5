//! Supervised, preference and group-relative optimization, and the pipeline
//! that chains them: SFT, reference snapshot, error collection, DPO, GRPO.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::forge::{collect_errors, Corpus, ErrorCase, ErrorConfig, TrainingSequence};
use crate::metrics::{eval_set, evaluate, EvalConfig, EvalReport};
use crate::policy::{
    rollout, DecodeConfig, FeatureSpec, InstanceFeatures, PolicyParams, ReferenceSnapshot,
};
use crate::rewards::{
    group_advantages, score, CausalStage, GroupStats, RewardBreakdown, RewardWeights,
};
use crate::rng::Streams;
use crate::scm::{CausalWorld, GroundedInstance};
use crate::trajectory::{stage_similarity, TokenId, Vocabulary};

/// Fixed work-unit size for parallel gradient accumulation. Partial sums are
/// reduced in chunk order, so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Cosine-anneal to zero over the stage's total steps after warmup.
    pub cosine: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            weight_decay: 0.0,
            clip_norm: 1.0,
            warmup_steps: 0,
            cosine: false,
        }
    }
}

impl OptimConfig {
    /// The large-model settings (AdamW, η = 1e-6, 500 warmup steps, cosine).
    /// Far too small to move a desk-scale policy; kept for reference.
    pub fn large_model() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-6,
            weight_decay: 5e-5,
            clip_norm: 1.0,
            warmup_steps: 500,
            cosine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "optimizer needs lr > 0, clip > 0, weight decay ≥ 0 (got {}, {}, {})",
                self.lr, self.clip_norm, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        // Plain descent needs far more than 3 epochs to move a cold start off uniform.
        Self {
            epochs: 3,
            batch_size: 32,
            optim: OptimConfig {
                kind: OptimizerKind::Adam,
                lr: 0.05,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub errors: ErrorConfig,
    /// Contrast whole sequences instead of continuations after the shared prefix.
    pub whole_sequence: bool,
    /// Sampler used to collect the policy's erroneous trajectories.
    pub decode: DecodeConfig,
    pub optim: OptimConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            epochs: 2,
            batch_size: 16,
            errors: ErrorConfig::default(),
            whole_sequence: false,
            decode: DecodeConfig::eval(),
            optim: OptimConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta {} must be > 0",
                self.beta
            )));
        }
        let tau = self.errors.tau;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside (0,1)")));
        }
        self.decode.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub steps: usize,
    pub group_size: usize,
    pub eps: f64,
    pub inputs_per_step: usize,
    pub weights: RewardWeights,
    pub causal_stage: CausalStage,
    pub decode: DecodeConfig,
    pub optim: OptimConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            group_size: 8,
            eps: 1e-8,
            inputs_per_step: 8,
            weights: RewardWeights::balanced(),
            causal_stage: CausalStage::VerifyWithFallback,
            decode: DecodeConfig::rollout(),
            optim: OptimConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.eps > 0.0) || self.inputs_per_step == 0 {
            return Err(Error::InvalidConfig(
                "GRPO needs eps > 0 and ≥ 1 input per step".into(),
            ));
        }
        self.decode.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    pub total_steps: usize,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Scale `grad` in place so its norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, n_params: usize, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Ok(Self {
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
            m,
            v,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        if c.cosine {
            let span = self.total_steps.saturating_sub(c.warmup_steps).max(1) as f64;
            let t = ((step - c.warmup_steps) as f64 / span).min(1.0);
            return c.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        c.lr
    }

    /// Clip, then update. Returns `(pre-clip norm, learning rate used)`.
    pub fn apply(&mut self, params: &mut PolicyParams, grad: &mut [f64]) -> Result<(f64, f64)> {
        if grad.len() != params.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: params.weights.len(),
                got: grad.len(),
            });
        }
        let norm = clip_grad(grad, self.cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let wd = self.cfg.weight_decay;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.weights.iter_mut().zip(grad.iter()) {
                    *w -= lr * (g + wd * *w);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let t = self.step as i32;
                let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
                for i in 0..grad.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let w = &mut params.weights[i];
                    *w -= lr * (self.m[i] / c1 / ((self.v[i] / c2).sqrt() + eps) + wd * *w);
                }
            }
        }
        params.version += 1;
        Ok((norm, lr))
    }
}

/// Run `f` over `items` in fixed-size chunks (in parallel) and reduce the
/// per-chunk losses and gradients in chunk order.
fn accumulate<T, F>(items: &[T], n_params: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let parts: Result<Vec<(f64, Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            for item in chunk {
                loss += f(item, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in parts? {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

/// One teacher-forced example: features of its instance and the full token list.
pub struct SftExample<'a> {
    pub feats: &'a InstanceFeatures,
    pub tokens: &'a [TokenId],
}

/// Mean negative log-likelihood over the batch, and its gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    batch: &[SftExample],
    vocab: &Vocabulary,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty SFT batch".into()));
    }
    let n = batch.len() as f64;
    let (sum, grad) =
        accumulate(batch, params.weights.len(), |ex, g| {
            Ok(-params.continuation_logprob_grad(
                ex.feats,
                &[],
                ex.tokens,
                vocab,
                -1.0 / n,
                Some(g),
            )?)
        })?;
    Ok((finite(sum / n, "sft")?, grad))
}

/// A preference pair: both continuations are scored after the same prefix.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub feats: InstanceFeatures,
    pub prefix: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferencePair {
    pub fn from_case(case: &ErrorCase, feats: InstanceFeatures, whole_sequence: bool) -> Self {
        if whole_sequence {
            Self {
                feats,
                prefix: Vec::new(),
                chosen: case.corr_trajectory.clone(),
                rejected: case.err_trajectory.clone(),
            }
        } else {
            Self {
                feats,
                prefix: case.split.prefix.clone(),
                chosen: case.split.corr_continuation.clone(),
                rejected: case.split.err_continuation.clone(),
            }
        }
    }
}

/// `−log σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−log σ(β[(log π_θ(w) − log π_ref(w)) − (log π_θ(l) − log π_ref(l))])`.
pub fn dpo_loss_and_grad(
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    pairs: &[PreferencePair],
    beta: f64,
    vocab: &Vocabulary,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta {beta} must be > 0")));
    }
    let r = reference.params();
    let n = pairs.len() as f64;
    let (sum, grad) = accumulate(pairs, params.weights.len(), |p, g| {
        let lw = params.continuation_logprob(&p.feats, &p.prefix, &p.chosen, vocab)?;
        let ll = params.continuation_logprob(&p.feats, &p.prefix, &p.rejected, vocab)?;
        let rw = r.continuation_logprob(&p.feats, &p.prefix, &p.chosen, vocab)?;
        let rl = r.continuation_logprob(&p.feats, &p.prefix, &p.rejected, vocab)?;
        let z = beta * ((lw - rw) - (ll - rl));
        // d/dz −log σ(z) = −σ(−z)
        let c = -sigmoid(-z) * beta / n;
        params.continuation_logprob_grad(&p.feats, &p.prefix, &p.chosen, vocab, c, Some(g))?;
        params.continuation_logprob_grad(&p.feats, &p.prefix, &p.rejected, vocab, -c, Some(g))?;
        Ok(neg_log_sigmoid(z))
    })?;
    Ok((finite(sum / n, "dpo")?, grad))
}

/// A frozen rollout group: sampled token lists with their (constant) advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub feats: InstanceFeatures,
    pub tokens: Vec<Vec<TokenId>>,
    pub advantages: Vec<f64>,
}

/// `−mean_inputs (1/G) Σ_g A_g · log π_θ(τ_g)` with advantages held constant.
pub fn grpo_surrogate_loss_and_grad(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    vocab: &Vocabulary,
) -> Result<(f64, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("empty GRPO batch".into()));
    }
    let n = groups.len() as f64;
    let (sum, grad) = accumulate(groups, params.weights.len(), |grp, g| {
        if grp.tokens.len() != grp.advantages.len() {
            return Err(Error::DimensionMismatch {
                expected: grp.tokens.len(),
                got: grp.advantages.len(),
            });
        }
        let gs = grp.tokens.len() as f64;
        let mut obj = 0.0;
        for (toks, &a) in grp.tokens.iter().zip(&grp.advantages) {
            if a == 0.0 {
                // contributes neither loss nor gradient
                continue;
            }
            obj += a * params.continuation_logprob_grad(
                &grp.feats,
                &[],
                toks,
                vocab,
                -a / (gs * n),
                Some(g),
            )?;
        }
        Ok(-obj / gs)
    })?;
    Ok((finite(sum / n, "grpo")?, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub instance_key: String,
    pub group: usize,
    pub member: usize,
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

pub struct GrpoStepOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub groups: Vec<GroupStats>,
    pub rollouts: Vec<RolloutRecord>,
}

/// Sample `G` rollouts per input, score them, and form the surrogate loss.
/// Rollout `g` of input `i` draws from stream `rollout/(i·G + g)` of `streams`.
pub fn grpo_step(
    params: &PolicyParams,
    inputs: &[(&GroundedInstance, &InstanceFeatures)],
    cfg: &GrpoConfig,
    world: &CausalWorld,
    vocab: &Vocabulary,
    streams: &Streams,
) -> Result<GrpoStepOutput> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("GRPO step without inputs".into()));
    }
    let g_size = cfg.group_size;
    let sampled: Result<Vec<(RolloutGroup, GroupStats, Vec<RolloutRecord>)>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (inst, feats))| {
            let mut tokens = Vec::with_capacity(g_size);
            let mut rewards = Vec::with_capacity(g_size);
            let mut breakdowns = Vec::with_capacity(g_size);
            let mut logprobs = Vec::with_capacity(g_size);
            for g in 0..g_size {
                let mut rng = streams.stream("rollout", (i * g_size + g) as u64);
                let r = rollout(params, feats, vocab, &cfg.decode, &mut rng)?;
                let b = score(
                    &r.trajectory,
                    inst.gt_diag,
                    world,
                    vocab,
                    cfg.weights,
                    cfg.causal_stage,
                );
                rewards.push(b.total);
                breakdowns.push(b);
                logprobs.push(r.logprob());
                tokens.push(r.trajectory.tokens);
            }
            let stats = group_advantages(&rewards, cfg.eps)?;
            let records = (0..g_size)
                .map(|g| RolloutRecord {
                    instance_key: inst.key.clone(),
                    group: i,
                    member: g,
                    tokens: tokens[g].clone(),
                    logprob: logprobs[g],
                    reward: breakdowns[g],
                    advantage: stats.advantages[g],
                })
                .collect();
            let group = RolloutGroup {
                feats: (*feats).clone(),
                tokens,
                advantages: stats.advantages.clone(),
            };
            Ok((group, stats, records))
        })
        .collect();
    let mut groups = Vec::new();
    let mut stats = Vec::new();
    let mut rollouts = Vec::new();
    for (g, s, r) in sampled? {
        groups.push(g);
        stats.push(s);
        rollouts.extend(r);
    }
    let (loss, grad) = grpo_surrogate_loss_and_grad(params, &groups, vocab)?;
    Ok(GrpoStepOutput {
        loss,
        grad,
        groups: stats,
        rollouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Sft,
    Dpo,
    Grpo,
}

impl StageName {
    pub fn name(self) -> &'static str {
        match self {
            StageName::Sft => "sft",
            StageName::Dpo => "dpo",
            StageName::Grpo => "grpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Skip the off-policy preference stage.
    pub skip_dpo: bool,
    /// Run GRPO before DPO.
    pub reverse_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Context window of the policy features (1 or 2).
    pub context_window: usize,
    pub box_candidates: bool,
    pub answer_head: bool,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
    /// Evaluate after every stage, not only at the end.
    pub eval_each_stage: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            context_window: 2,
            box_candidates: true,
            answer_head: true,
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
            ablation: Ablation::default(),
            eval_each_stage: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sft.batch_size == 0 || self.dpo.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be ≥ 1".into()));
        }
        self.sft.optim.validate()?;
        self.dpo.validate()?;
        self.grpo.validate()?;
        self.eval.decode.validate()
    }

    pub fn feature_spec(&self, world: &CausalWorld, vocab: &Vocabulary) -> FeatureSpec {
        FeatureSpec {
            window: self.context_window,
            box_candidates: self.box_candidates,
            answer_head: self.answer_head,
            ..FeatureSpec::new(world, vocab)
        }
    }

    /// Post-reference stages in execution order.
    pub fn stage_order(&self) -> Vec<StageName> {
        let mut order = vec![StageName::Dpo, StageName::Grpo];
        if self.ablation.reverse_order {
            order.reverse();
        }
        if self.ablation.skip_dpo {
            order.retain(|s| *s != StageName::Dpo);
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causal_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub config_hash: String,
    pub causal_stage: CausalStage,
    /// Variant families GRPO inputs are drawn from.
    pub grpo_families: Vec<String>,
    pub stage_order: Vec<StageName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub stage: StageName,
    pub params: PolicyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub params: PolicyParams,
    pub header: TraceHeader,
    pub snapshots: Vec<StageSnapshot>,
    pub trace: Vec<TraceRecord>,
    pub reports: Vec<StageReport>,
    pub error_cases: usize,
}

impl PipelineOutput {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.reports.last().map(|r| &r.report)
    }

    fn grpo_tail(&self, f: impl Fn(&TraceRecord) -> Option<f64>) -> Option<f64> {
        let r: Vec<f64> = self
            .trace
            .iter()
            .filter(|t| t.stage == "grpo")
            .filter_map(f)
            .collect();
        if r.is_empty() {
            return None;
        }
        let tail = &r[r.len() - r.len().div_ceil(4)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Mean total reward over the last quarter of GRPO steps.
    pub fn final_grpo_reward(&self) -> Option<f64> {
        self.grpo_tail(|t| t.reward_mean)
    }

    /// Mean causal reward over the last quarter of GRPO steps.
    pub fn final_causal_reward(&self) -> Option<f64> {
        self.grpo_tail(|t| t.causal_mean)
    }
}

fn abort(stage: StageName) -> impl FnOnce(Error) -> Error {
    move |e| Error::StageAborted {
        stage: stage.name().into(),
        source: Box::new(e),
    }
}

/// Corpus instances with their precomputed features and training sequences.
pub struct TrainData<'a> {
    pub instances: Vec<&'a GroundedInstance>,
    pub feats: Vec<InstanceFeatures>,
    pub sequences: Vec<TrainingSequence>,
}

impl<'a> TrainData<'a> {
    pub fn new(corpus: &'a Corpus, spec: &FeatureSpec, vocab: &Vocabulary) -> Result<Self> {
        let sequences = corpus.sequences(vocab)?;
        let instances: Vec<&GroundedInstance> =
            corpus.variants.iter().map(|v| &v.instance).collect();
        let feats = instances
            .par_iter()
            .map(|i| InstanceFeatures::new(spec, vocab, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instances,
            feats,
            sequences,
        })
    }
}

pub fn run_sft(
    params: &mut PolicyParams,
    cfg: &SftConfig,
    feats: &[InstanceFeatures],
    sequences: &[TrainingSequence],
    vocab: &Vocabulary,
    streams: &Streams,
    trace: &mut Vec<TraceRecord>,
) -> Result<()> {
    let n = sequences.len();
    if n == 0 || cfg.epochs == 0 {
        return Ok(());
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg.optim, params.weights.len(), per_epoch * cfg.epochs)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.stream("sft-shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<SftExample> = batch
                .iter()
                .map(|&i| SftExample {
                    feats: &feats[i],
                    tokens: &sequences[i].tokens,
                })
                .collect();
            let (loss, mut grad) = sft_loss_and_grad(params, &examples, vocab)?;
            let (grad_norm, lr) = opt.apply(params, &mut grad)?;
            trace.push(TraceRecord {
                stage: "sft".into(),
                step: opt.step,
                loss,
                grad_norm,
                lr,
                ..Default::default()
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run_dpo(
    params: &mut PolicyParams,
    reference: &ReferenceSnapshot,
    cfg: &DpoConfig,
    data: &TrainData,
    world: &CausalWorld,
    vocab: &Vocabulary,
    streams: &Streams,
    trace: &mut Vec<TraceRecord>,
) -> Result<usize> {
    let inputs: Vec<(&GroundedInstance, &TrainingSequence)> = data
        .instances
        .iter()
        .copied()
        .zip(data.sequences.iter())
        .collect();
    let decoded = |i: usize, _: &GroundedInstance| -> Vec<TokenId> {
        let mut rng = streams.stream("dpo-decode", i as u64);
        rollout(params, &data.feats[i], vocab, &cfg.decode, &mut rng)
            .map(|r| r.trajectory.tokens)
            .unwrap_or_default()
    };
    let cases = collect_errors(
        decoded,
        &inputs,
        stage_similarity,
        world,
        vocab,
        &cfg.errors,
    );
    let index: std::collections::BTreeMap<&str, usize> = data
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.key.as_str(), i))
        .collect();
    let pairs: Vec<PreferencePair> = cases
        .iter()
        .map(|c| {
            PreferencePair::from_case(
                c,
                data.feats[index[c.instance_key.as_str()]].clone(),
                cfg.whole_sequence,
            )
        })
        .collect();
    if pairs.is_empty() {
        trace.push(TraceRecord {
            stage: "dpo".into(),
            n_pairs: Some(0),
            ..Default::default()
        });
        return Ok(0);
    }
    let per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg.optim, params.weights.len(), per_epoch * cfg.epochs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.stream("dpo-shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let b: Vec<PreferencePair> = batch.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, mut grad) = dpo_loss_and_grad(params, reference, &b, cfg.beta, vocab)?;
            let (grad_norm, lr) = opt.apply(params, &mut grad)?;
            trace.push(TraceRecord {
                stage: "dpo".into(),
                step: opt.step,
                loss,
                grad_norm,
                lr,
                n_pairs: Some(pairs.len()),
                ..Default::default()
            });
        }
    }
    Ok(pairs.len())
}

pub fn run_grpo(
    params: &mut PolicyParams,
    cfg: &GrpoConfig,
    data: &TrainData,
    world: &CausalWorld,
    vocab: &Vocabulary,
    streams: &Streams,
    trace: &mut Vec<TraceRecord>,
) -> Result<()> {
    if cfg.steps == 0 {
        return Ok(());
    }
    let mut opt = Optimizer::new(cfg.optim, params.weights.len(), cfg.steps)?;
    let n = data.instances.len();
    for step in 0..cfg.steps {
        let mut pick = streams.stream("grpo-inputs", step as u64);
        let chosen: Vec<usize> = (0..cfg.inputs_per_step)
            .map(|_| pick.gen_range(0..n))
            .collect();
        let inputs: Vec<(&GroundedInstance, &InstanceFeatures)> = chosen
            .iter()
            .map(|&i| (data.instances[i], &data.feats[i]))
            .collect();
        let out = grpo_step(
            params,
            &inputs,
            cfg,
            world,
            vocab,
            &streams.derive("grpo-step", step as u64),
        )?;
        let m = out.rollouts.len() as f64;
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| {
            out.rollouts.iter().map(|r| f(&r.reward)).sum::<f64>() / m
        };
        let record = TraceRecord {
            stage: "grpo".into(),
            step: step + 1,
            loss: out.loss,
            reward_mean: Some(mean(&|r| r.total)),
            acc_mean: Some(mean(&|r| r.r_acc)),
            format_mean: Some(mean(&|r| r.r_format)),
            causal_mean: Some(mean(&|r| r.r_causal)),
            ..Default::default()
        };
        let mut grad = out.grad;
        let (grad_norm, lr) = opt.apply(params, &mut grad)?;
        trace.push(TraceRecord {
            grad_norm,
            lr,
            ..record
        });
    }
    Ok(())
}

/// SFT → reference snapshot → (DPO, GRPO in configured order) with per-stage
/// snapshots and held-out evaluation on observational and interventional splits.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    world: &CausalWorld,
    corpus: &Corpus,
    vocab: &Vocabulary,
    streams: &Streams,
    config_hash: &str,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let spec = cfg.feature_spec(world, vocab);
    let data = TrainData::new(corpus, &spec, vocab)?;

    let eval_instances = eval_set(world, &cfg.eval, &streams.derive("eval-set", 0))?;
    let train_keys: BTreeSet<String> = corpus.instance_keys().into_iter().collect();
    let eval_streams = streams.derive("eval", 0);
    let run_eval = |p: &PolicyParams| {
        evaluate(
            p,
            &eval_instances,
            &train_keys,
            world,
            vocab,
            &cfg.eval,
            &eval_streams,
            config_hash,
        )
    };

    let mut families: Vec<String> = corpus
        .variants
        .iter()
        .map(|v| v.tag.name().to_string())
        .collect();
    families.dedup();
    let header = TraceHeader {
        kind: "trace".into(),
        config_hash: config_hash.into(),
        causal_stage: cfg.grpo.causal_stage,
        grpo_families: families,
        stage_order: std::iter::once(StageName::Sft)
            .chain(cfg.stage_order())
            .collect(),
    };

    let mut params = PolicyParams::zeros(spec)?;
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut reports = Vec::new();

    run_sft(
        &mut params,
        &cfg.sft,
        &data.feats,
        &data.sequences,
        vocab,
        &streams.derive("sft", 0),
        &mut trace,
    )
    .map_err(abort(StageName::Sft))?;
    snapshots.push(StageSnapshot {
        stage: StageName::Sft,
        params: params.clone(),
    });
    let reference = ReferenceSnapshot::new(&params);
    let order = cfg.stage_order();
    if cfg.eval_each_stage || order.is_empty() {
        reports.push(StageReport {
            stage: StageName::Sft,
            report: run_eval(&params)?,
        });
    }

    let mut error_cases = 0;
    for (k, &stage) in order.iter().enumerate() {
        let stage_streams = streams.derive(stage.name(), 0);
        match stage {
            StageName::Dpo => {
                error_cases = run_dpo(
                    &mut params,
                    &reference,
                    &cfg.dpo,
                    &data,
                    world,
                    vocab,
                    &stage_streams,
                    &mut trace,
                )
                .map_err(abort(stage))?;
            }
            StageName::Grpo => {
                run_grpo(
                    &mut params,
                    &cfg.grpo,
                    &data,
                    world,
                    vocab,
                    &stage_streams,
                    &mut trace,
                )
                .map_err(abort(stage))?;
            }
            StageName::Sft => unreachable!("SFT runs first"),
        }
        params.check().map_err(abort(stage))?;
        snapshots.push(StageSnapshot {
            stage,
            params: params.clone(),
        });
        if cfg.eval_each_stage || k + 1 == order.len() {
            reports.push(StageReport {
                stage,
                report: run_eval(&params)?,
            });
        }
    }
    Ok(PipelineOutput {
        params,
        header,
        snapshots,
        trace,
        reports,
        error_cases,
    })
}
