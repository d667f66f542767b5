//! Log-linear autoregressive policy over the trajectory vocabulary.
//!
//! The next-token logit of token `v` is
//!
//! ```text
//! logit_v = Σ_f θ[f, v] · φ_f(context) + [v is BOX] · u_stage · g(v)
//! ```
//!
//! where `φ` is a sparse context vector (pooled image, region of the last
//! emitted box, query, last token, kind of the token before it, stage flags,
//! bias) and `g(v)` are candidate features of box `v` read from the image.
//! Both blocks are linear in the parameters, so per-token log-probabilities
//! have exact gradients `f(w) − E_p[f]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::StreamRng;
use crate::scm::{CausalWorld, GroundedInstance};
use crate::trajectory::{parse, Grammar, TokenId, TokenKind, Trajectory, Vocabulary};
use crate::util::sha256_bytes;

/// Number of stage flags: pre-causal, causal, verify.
pub const N_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Cell feature channels `d`.
    pub channels: usize,
    pub n_query: usize,
    pub vocab_size: usize,
    /// 1 = last token only. 2 also encodes the kind of the token before it.
    pub window: usize,
    /// Candidate-conditioned box features (2d per stage).
    pub box_candidates: bool,
    /// Cell area the coverage candidate features are normalized by.
    pub ref_area: usize,
    /// After `<ANSWER>`, image features feed a separate block instead of the
    /// shared one, so the answer can read the image differently from the chain.
    pub answer_head: bool,
}

impl FeatureSpec {
    pub fn new(world: &CausalWorld, vocab: &Vocabulary) -> Self {
        Self {
            channels: world.channels(),
            n_query: world.n_query,
            vocab_size: vocab.len(),
            window: 2,
            box_candidates: true,
            ref_area: world.lesion_h * world.lesion_w,
            answer_head: true,
        }
    }

    /// The plain order-1 context without candidate features.
    pub fn order1(world: &CausalWorld, vocab: &Vocabulary) -> Self {
        Self {
            window: 1,
            box_candidates: false,
            answer_head: false,
            ..Self::new(world, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.window) {
            return Err(Error::InvalidConfig(format!(
                "context window {} not in 1..=2",
                self.window
            )));
        }
        if self.channels == 0 || self.vocab_size == 0 || self.ref_area == 0 {
            return Err(Error::InvalidConfig("empty feature spec".into()));
        }
        Ok(())
    }

    fn off_region(&self) -> usize {
        self.channels
    }
    fn off_query(&self) -> usize {
        2 * self.channels
    }
    fn off_last(&self) -> usize {
        self.off_query() + self.n_query
    }
    fn off_prev_kind(&self) -> usize {
        self.off_last() + self.vocab_size
    }
    fn off_stage(&self) -> usize {
        self.off_prev_kind()
            + if self.window >= 2 {
                TokenKind::COUNT
            } else {
                0
            }
    }
    fn off_bias(&self) -> usize {
        self.off_stage() + N_STAGES
    }

    fn off_answer(&self) -> usize {
        self.off_bias() + 1
    }

    /// Context feature dimension `F`.
    pub fn dim(&self) -> usize {
        self.off_answer()
            + if self.answer_head {
                2 * self.channels
            } else {
                0
            }
    }

    /// Candidate feature dimension per stage.
    pub fn candidate_dim(&self) -> usize {
        if self.box_candidates {
            2 * self.channels
        } else {
            0
        }
    }

    /// Total parameter count: `F × |V|` context weights plus candidate weights.
    pub fn n_params(&self) -> usize {
        self.dim() * self.vocab_size + N_STAGES * self.candidate_dim()
    }
}

/// Per-instance image features, computed once and reused at every position.
#[derive(Debug, Clone)]
pub struct InstanceFeatures {
    pub pooled: Vec<f64>,
    pub query: usize,
    /// `n_boxes × 2d` candidate features: region mean, then coverage.
    box_feats: Vec<f64>,
    channels: usize,
}

impl InstanceFeatures {
    pub fn new(spec: &FeatureSpec, vocab: &Vocabulary, inst: &GroundedInstance) -> Result<Self> {
        let img = &inst.image;
        if img.channels != spec.channels {
            return Err(Error::DimensionMismatch {
                expected: spec.channels,
                got: img.channels,
            });
        }
        if inst.query >= spec.n_query {
            return Err(Error::DimensionMismatch {
                expected: spec.n_query,
                got: inst.query + 1,
            });
        }
        let d = img.channels;
        // summed-area table, (h+1) × (w+1) × d
        let (h, w) = (img.h, img.w);
        let mut sat = vec![0.0; (h + 1) * (w + 1) * d];
        let at = |y: usize, x: usize, c: usize| (y * (w + 1) + x) * d + c;
        for y in 0..h {
            for x in 0..w {
                let cell = img.cell(x, y);
                for c in 0..d {
                    sat[at(y + 1, x + 1, c)] =
                        cell[c] + sat[at(y, x + 1, c)] + sat[at(y + 1, x, c)] - sat[at(y, x, c)];
                }
            }
        }
        let ref_area = spec.ref_area as f64;
        let mut box_feats = Vec::with_capacity(vocab.n_boxes() * 2 * d);
        for b in vocab.boxes() {
            let (x0, y0, x1, y1) = clip(b, w, h);
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            let sums: Vec<f64> = (0..d)
                .map(|c| {
                    sat[at(y1, x1, c)] - sat[at(y0, x1, c)] - sat[at(y1, x0, c)]
                        + sat[at(y0, x0, c)]
                })
                .collect();
            box_feats.extend(sums.iter().map(|s| if area > 0.0 { s / area } else { 0.0 }));
            box_feats.extend(sums.iter().map(|s| s / ref_area));
        }
        Ok(Self {
            pooled: img.mean_pool(),
            query: inst.query,
            box_feats,
            channels: d,
        })
    }

    /// Region mean of vocabulary box `i`.
    pub fn box_mean(&self, i: usize) -> &[f64] {
        let c = 2 * self.channels;
        &self.box_feats[i * c..i * c + self.channels]
    }

    /// Full candidate vector of vocabulary box `i`.
    pub fn box_candidate(&self, i: usize) -> &[f64] {
        let c = 2 * self.channels;
        &self.box_feats[i * c..(i + 1) * c]
    }
}

fn clip(b: &BBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let c = |v: i32, hi: usize| (v.max(0) as usize).min(hi);
    let (x0, y0) = (c(b.x_min, w), c(b.y_min, h));
    let (x1, y1) = (c(b.x_max, w).max(x0), c(b.y_max, h).max(y0));
    (x0, y0, x1, y1)
}

/// Decoding context carried across positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Context {
    pub last: Option<TokenId>,
    pub prev_kind: Option<TokenKind>,
    /// 0 before `<CAUSAL>`, 1 inside the causal stage, 2 after `<VERIFY>`.
    pub stage: usize,
    /// Vocabulary box index of the most recently emitted BOX token.
    pub last_box: Option<usize>,
    /// An `<ANSWER>` marker has been emitted.
    pub answering: bool,
}

impl Context {
    pub fn after(prefix: &[TokenId], vocab: &Vocabulary) -> Self {
        let mut ctx = Context::default();
        for &t in prefix {
            ctx.push(t, vocab);
        }
        ctx
    }

    pub fn push(&mut self, t: TokenId, vocab: &Vocabulary) {
        self.prev_kind = self.last.and_then(|l| vocab.kind(l));
        self.last = Some(t);
        match t {
            Vocabulary::CAUSAL if self.stage == 0 => self.stage = 1,
            Vocabulary::VERIFY => self.stage = 2,
            Vocabulary::ANSWER => self.answering = true,
            _ => {}
        }
        if vocab.box_range().contains(&(t as usize)) {
            self.last_box = Some(t as usize - vocab.box_range().start);
        }
    }
}

/// Sparse context features as `(index, value)` pairs.
pub fn sparse_features(
    spec: &FeatureSpec,
    inst: &InstanceFeatures,
    ctx: &Context,
) -> Vec<(usize, f64)> {
    let d = spec.channels;
    let mut phi = Vec::with_capacity(2 * d + 6);
    let (pool_off, region_off) = if spec.answer_head && ctx.answering {
        (spec.off_answer(), spec.off_answer() + d)
    } else {
        (0, spec.off_region())
    };
    phi.extend(
        inst.pooled
            .iter()
            .enumerate()
            .map(|(c, &v)| (pool_off + c, v)),
    );
    if let Some(b) = ctx.last_box {
        phi.extend(
            inst.box_mean(b)
                .iter()
                .enumerate()
                .map(|(c, &v)| (region_off + c, v)),
        );
    }
    phi.push((spec.off_query() + inst.query, 1.0));
    if let Some(t) = ctx.last {
        phi.push((spec.off_last() + t as usize, 1.0));
    }
    if spec.window >= 2 {
        if let Some(k) = ctx.prev_kind {
            phi.push((spec.off_prev_kind() + k.index(), 1.0));
        }
    }
    phi.push((spec.off_stage() + ctx.stage, 1.0));
    phi.push((spec.off_bias(), 1.0));
    phi.retain(|&(_, v)| v != 0.0);
    phi
}

/// Dense context feature vector of length `F` for an emitted prefix.
pub fn build_features(
    spec: &FeatureSpec,
    inst: &InstanceFeatures,
    prefix: &[TokenId],
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    check_tokens(prefix, spec.vocab_size)?;
    let mut dense = vec![0.0; spec.dim()];
    for (i, v) in sparse_features(spec, inst, &Context::after(prefix, vocab)) {
        dense[i] = v;
    }
    Ok(dense)
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&t) => Err(Error::TokenOutOfRange(t)),
        None => Ok(()),
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: FeatureSpec,
    /// Feature-major context weights (`θ[f, v]` at `f·|V| + v`), then
    /// `N_STAGES × candidate_dim` candidate weights.
    pub weights: Vec<f64>,
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    format: String,
    layout: String,
    shape: [usize; 2],
    candidate_shape: [usize; 2],
    spec: FeatureSpec,
    version: u64,
    weights: Vec<f64>,
}

const PARAMS_FORMAT: &str = "reflect-policy/1";
const PARAMS_LAYOUT: &str = "feature-major";

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weights: vec![0.0; spec.n_params()],
            version: 0,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        if self.weights.len() != self.spec.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.n_params(),
                got: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(())
    }

    fn candidate_offset(&self) -> usize {
        self.spec.dim() * self.spec.vocab_size
    }

    /// Raw next-token logits.
    pub fn logits(&self, inst: &InstanceFeatures, ctx: &Context, vocab: &Vocabulary) -> Vec<f64> {
        let v = self.spec.vocab_size;
        let mut logits = vec![0.0; v];
        for (f, x) in sparse_features(&self.spec, inst, ctx) {
            let row = &self.weights[f * v..(f + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += x * w;
            }
        }
        let cd = self.spec.candidate_dim();
        if cd > 0 {
            let off = self.candidate_offset() + ctx.stage * cd;
            let u = &self.weights[off..off + cd];
            let start = vocab.box_range().start;
            for b in 0..vocab.n_boxes() {
                let g = inst.box_candidate(b);
                logits[start + b] += u.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        logits
    }

    pub fn token_logprobs(
        &self,
        inst: &InstanceFeatures,
        ctx: &Context,
        vocab: &Vocabulary,
    ) -> Result<Vec<f64>> {
        let lp = log_softmax(&self.logits(inst, ctx, vocab));
        if lp.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token log-probabilities".into()));
        }
        Ok(lp)
    }

    /// `log π(continuation | prefix)` under teacher forcing.
    pub fn continuation_logprob(
        &self,
        inst: &InstanceFeatures,
        prefix: &[TokenId],
        continuation: &[TokenId],
        vocab: &Vocabulary,
    ) -> Result<f64> {
        self.continuation_logprob_grad(inst, prefix, continuation, vocab, 0.0, None)
    }

    pub fn sequence_logprob(
        &self,
        inst: &InstanceFeatures,
        tokens: &[TokenId],
        vocab: &Vocabulary,
    ) -> Result<f64> {
        self.continuation_logprob(inst, &[], tokens, vocab)
    }

    /// Log-probability of `continuation` given `prefix`; when `grad` is given,
    /// adds `coef · ∇ log π` into it.
    pub fn continuation_logprob_grad(
        &self,
        inst: &InstanceFeatures,
        prefix: &[TokenId],
        continuation: &[TokenId],
        vocab: &Vocabulary,
        coef: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let v = self.spec.vocab_size;
        check_tokens(prefix, v)?;
        check_tokens(continuation, v)?;
        if let Some(g) = grad.as_deref() {
            if g.len() != self.weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.weights.len(),
                    got: g.len(),
                });
            }
        }
        let mut ctx = Context::after(prefix, vocab);
        let mut total = 0.0;
        for &w in continuation {
            let phi = sparse_features(&self.spec, inst, &ctx);
            let logits = self.logits(inst, &ctx, vocab);
            let cd = self.spec.candidate_dim();
            let box_start = vocab.box_range().start;
            let cand_off = self.candidate_offset() + ctx.stage * cd;
            let lp = log_softmax(&logits);
            let lw = lp[w as usize];
            if !lw.is_finite() {
                return Err(Error::NonFinite("sequence log-probability".into()));
            }
            total += lw;
            if let Some(g) = grad.as_deref_mut() {
                if coef != 0.0 {
                    // residual r_v = δ_vw − p_v
                    let mut resid: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
                    resid[w as usize] += 1.0;
                    for &(f, x) in &phi {
                        let s = coef * x;
                        for (gv, r) in g[f * v..(f + 1) * v].iter_mut().zip(&resid) {
                            *gv += s * r;
                        }
                    }
                    if cd > 0 {
                        let gu = &mut g[cand_off..cand_off + cd];
                        for b in 0..vocab.n_boxes() {
                            let r = resid[box_start + b];
                            if r != 0.0 {
                                for (gj, c) in gu.iter_mut().zip(inst.box_candidate(b)) {
                                    *gj += coef * r * c;
                                }
                            }
                        }
                    }
                }
            }
            ctx.push(w, vocab);
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            layout: PARAMS_LAYOUT.into(),
            shape: [self.spec.dim(), self.spec.vocab_size],
            candidate_shape: [N_STAGES, self.spec.candidate_dim()],
            spec: self.spec,
            version: self.version,
            weights: self.weights.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ParamsFile = serde_json::from_slice(bytes)?;
        if file.format != PARAMS_FORMAT || file.layout != PARAMS_LAYOUT {
            return Err(Error::Schema(format!(
                "unsupported parameter file {} / {}",
                file.format, file.layout
            )));
        }
        if file.shape != [file.spec.dim(), file.spec.vocab_size]
            || file.candidate_shape != [N_STAGES, file.spec.candidate_dim()]
        {
            return Err(Error::Schema(
                "parameter shape header disagrees with feature spec".into(),
            ));
        }
        let p = Self {
            spec: file.spec,
            weights: file.weights,
            version: file.version,
        };
        p.check()?;
        Ok(p)
    }
}

/// Frozen copy of the policy taken at the end of supervised training.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    params: Arc<PolicyParams>,
}

impl ReferenceSnapshot {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            params: Arc::new(params.clone()),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

/// Hash of the exact log-probabilities `params` assigns to a probe set.
pub fn probe_hash(
    params: &PolicyParams,
    probes: &[(InstanceFeatures, Vec<TokenId>)],
    vocab: &Vocabulary,
) -> Result<String> {
    let mut bytes = Vec::with_capacity(probes.len() * 8);
    for (inst, tokens) in probes {
        bytes.extend(
            params
                .sequence_logprob(inst, tokens, vocab)?
                .to_bits()
                .to_le_bytes(),
        );
    }
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    /// Argmax decoding; temperature and nucleus are ignored.
    pub greedy: bool,
    /// Mask tokens the grammar automaton rejects at the current position.
    pub constrained: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::rollout()
    }
}

impl DecodeConfig {
    /// Untempered sampling used for policy-gradient rollouts.
    pub fn rollout() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 64,
            greedy: false,
            constrained: false,
        }
    }

    /// Inference-time sampling.
    pub fn eval() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            ..Self::rollout()
        }
    }

    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::rollout()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nucleus p {} outside (0,1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Per-token log-probabilities under the untempered, unmasked policy.
    pub token_logprobs: Vec<f64>,
}

impl Rollout {
    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// Index of the largest value; ties resolve to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(
    logits: &[f64],
    allowed: &[bool],
    cfg: &DecodeConfig,
    rng: &mut StreamRng,
) -> usize {
    let scaled: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(l, &ok)| {
            if ok {
                l / cfg.temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if cfg.top_p < 1.0 {
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        let mut keep = 0;
        for &i in &order {
            acc += weights[i] / total;
            keep += 1;
            if acc >= cfg.top_p {
                break;
            }
        }
        order.truncate(keep);
    }
    let mass: f64 = order.iter().map(|&i| weights[i]).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &i in &order {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    *order
        .last()
        .expect("at least the maximal token has positive weight")
}

/// Autoregressive decoding until `<EOS>` or `max_tokens`.
pub fn rollout(
    params: &PolicyParams,
    inst: &InstanceFeatures,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<Rollout> {
    cfg.validate()?;
    let mut ctx = Context::default();
    let mut grammar = Grammar::new();
    let mut tokens = Vec::new();
    let mut token_logprobs = Vec::new();
    let mut allowed = vec![true; vocab.len()];
    while tokens.len() < cfg.max_tokens {
        let logits = params.logits(inst, &ctx, vocab);
        if cfg.constrained {
            let expected = grammar.expected();
            for (t, a) in allowed.iter_mut().enumerate() {
                *a = expected.is_some() && vocab.kind(t as TokenId) == expected;
            }
        }
        let pick = if cfg.greedy {
            let masked: Vec<f64> = logits
                .iter()
                .zip(&allowed)
                .map(|(&l, &ok)| if ok { l } else { f64::NEG_INFINITY })
                .collect();
            argmax(&masked)
        } else {
            sample_index(&logits, &allowed, cfg, rng)
        };
        let lp = log_softmax(&logits)[pick];
        if !lp.is_finite() {
            return Err(Error::NonFinite("rollout log-probability".into()));
        }
        let t = pick as TokenId;
        tokens.push(t);
        token_logprobs.push(lp);
        grammar.feed(vocab.kind(t));
        ctx.push(t, vocab);
        if t == Vocabulary::EOS {
            break;
        }
    }
    Ok(Rollout {
        trajectory: parse(&tokens, vocab),
        token_logprobs,
    })
}
