//! Counterfactual corpus construction.
//!
//! Three variant families are built from world instances:
//!
//! - `causal`: observational instance, gold chain
//! - `shortcut`: anatomy-intervened instance whose chain locates a jittered box
//! - `partial`: pathology-intervened instance whose chain mischaracterizes the
//!   pathology while concluding from the true one
//!
//! Each variant becomes a reflective training sequence
//! `<CAUSAL> biased-chain <VERIFY> gold-chain ANSWER y <EOS>`. Error localization
//! for preference pairs also lives here.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rewards::{causal_reward, format_reward, CausalStage};
use crate::rng::{StreamRng, Streams};
use crate::scm::{oracle_consistent, CausalWorld, GroundedInstance, Regime, Step};
use crate::trajectory::{
    parse, shared_prefix_split, PrefixSplit, Stage, TokenId, Trajectory, Vocabulary,
};
use crate::util::sha256_json;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Uniform shift in `-shift..=shift` cells on each axis.
    pub shift: i32,
    /// Per-axis scale factor range; scaled sides are rounded to whole cells.
    pub scale: (f64, f64),
    /// Accept only candidates with IoU strictly above this gate.
    pub iou_gate: f64,
    pub max_attempts: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            shift: 1,
            scale: (0.8, 1.2),
            iou_gate: 0.7,
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub n_causal: usize,
    pub n_shortcut: usize,
    pub n_partial: usize,
    pub perturb: PerturbConfig,
    /// Regime for instances feeding shortcut variants.
    pub shortcut_regime: String,
    /// Regime for instances feeding partial variants.
    pub partial_regime: String,
    /// Record the spurious code as the shortcut chain's appeal metadata.
    pub record_spurious_appeal: bool,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            n_causal: 1000,
            n_shortcut: 1000,
            n_partial: 1000,
            perturb: PerturbConfig::default(),
            shortcut_regime: "do_a".into(),
            partial_regime: "do_p".into(),
            record_spurious_appeal: true,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.perturb;
        if !(p.iou_gate > 0.0 && p.iou_gate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "iou_gate {} outside (0,1)",
                p.iou_gate
            )));
        }
        if p.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be ≥ 1".into()));
        }
        if p.shift < 0 || !(p.scale.0 > 0.0 && p.scale.0 <= p.scale.1) {
            return Err(Error::InvalidConfig("invalid shift or scale range".into()));
        }
        self.shortcut_regime.parse::<Regime>()?;
        self.partial_regime.parse::<Regime>()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Causal,
    Shortcut,
    Partial,
}

impl VariantTag {
    pub fn name(self) -> &'static str {
        match self {
            VariantTag::Causal => "causal",
            VariantTag::Shortcut => "shortcut",
            VariantTag::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetVariant {
    pub tag: VariantTag,
    pub instance: GroundedInstance,
    pub perturbed_box: Option<BBox>,
    pub perturbed_path: Option<usize>,
    pub chain: Vec<Step>,
    /// Spurious-channel code the shortcut chain appeals to, when recorded.
    pub spurious_appeal: Option<usize>,
}

/// Jitter `b` by a uniform shift and per-axis scale until its IoU with `b`
/// exceeds the gate. Never returns `b` itself.
pub fn perturb_box(
    b: &BBox,
    grid_w: usize,
    grid_h: usize,
    cfg: &PerturbConfig,
    rng: &mut StreamRng,
) -> Result<BBox> {
    if !b.fits(grid_w, grid_h) {
        return Err(Error::InvalidBox(b.to_string()));
    }
    let (w, h) = (b.width(), b.height());
    let side = |len: i32, rng: &mut StreamRng| {
        let s = if cfg.scale.0 < cfg.scale.1 {
            rng.gen_range(cfg.scale.0..=cfg.scale.1)
        } else {
            cfg.scale.0
        };
        ((len as f64 * s).round() as i32).max(1)
    };
    for _ in 0..cfg.max_attempts {
        let dx = rng.gen_range(-cfg.shift..=cfg.shift);
        let dy = rng.gen_range(-cfg.shift..=cfg.shift);
        let nw = side(w, rng);
        let nh = side(h, rng);
        // scale about the center, rounding the corner down
        let x0 = b.x_min + (w - nw).div_euclid(2) + dx;
        let y0 = b.y_min + (h - nh).div_euclid(2) + dy;
        let cand = BBox::new(x0, y0, x0 + nw, y0 + nh);
        if cand == *b || !cand.fits(grid_w, grid_h) {
            continue;
        }
        if iou(&cand, b)? > cfg.iou_gate {
            return Ok(cand);
        }
    }
    Err(Error::GateUnsatisfiable {
        gate: cfg.iou_gate,
        attempts: cfg.max_attempts,
    })
}

pub fn build_variant(
    instance: &GroundedInstance,
    tag: VariantTag,
    world: &CausalWorld,
    cfg: &ForgeConfig,
    rng: &mut StreamRng,
) -> Result<DatasetVariant> {
    let gold = &instance.gt_chain;
    let mut variant = DatasetVariant {
        tag,
        instance: instance.clone(),
        perturbed_box: None,
        perturbed_path: None,
        chain: gold.clone(),
        spurious_appeal: None,
    };
    match tag {
        VariantTag::Causal => {
            if instance.regime != Regime::Observational {
                return Err(Error::VariantPrecondition(format!(
                    "causal variant needs an observational instance, got {}",
                    instance.regime
                )));
            }
        }
        VariantTag::Shortcut => {
            let moved = perturb_box(
                &instance.gt_box,
                world.grid_w,
                world.grid_h,
                &cfg.perturb,
                rng,
            )?;
            variant.perturbed_box = Some(moved);
            variant.chain[0] = Step::Locate(moved);
            if cfg.record_spurious_appeal {
                variant.spurious_appeal = Some(instance.confounder.code);
            }
        }
        VariantTag::Partial => {
            let p = instance.gt_path;
            let locate = Step::Locate(instance.gt_box);
            let conclude = Step::Conclude(world.diag_table[p]);
            let flawed: Vec<usize> = (0..world.n_path)
                .filter(|&q| q != p)
                .filter(|&q| {
                    let c = Step::Characterize(q);
                    !oracle_consistent(world, &locate, &c)
                        || !oracle_consistent(world, &c, &conclude)
                })
                .collect();
            if flawed.is_empty() {
                return Err(Error::VariantPrecondition(format!(
                    "no pathology other than {p} yields an inconsistent chain"
                )));
            }
            let q = flawed[rng.gen_range(0..flawed.len())];
            variant.perturbed_path = Some(q);
            variant.chain = vec![locate, Step::Characterize(q), conclude];
        }
    }
    Ok(variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasedSource {
    Shortcut,
    Partial,
    /// Degenerate: the preliminary chain equals the gold chain.
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub instance_key: String,
    pub tokens: Vec<TokenId>,
    pub biased_source: BiasedSource,
}

/// `<CAUSAL> biased <VERIFY> gold ANSWER(y) <EOS>`. A causal-tagged variant
/// produces the degenerate sequence whose two stages coincide.
pub fn assemble_sequence(
    instance: &GroundedInstance,
    biased: &DatasetVariant,
    vocab: &Vocabulary,
) -> Result<TrainingSequence> {
    let biased_source = match biased.tag {
        VariantTag::Shortcut => BiasedSource::Shortcut,
        VariantTag::Partial => BiasedSource::Partial,
        VariantTag::Causal => BiasedSource::Gold,
    };
    let mut tokens = vec![Vocabulary::CAUSAL];
    tokens.extend(vocab.encode_chain(&biased.chain)?);
    tokens.push(Vocabulary::VERIFY);
    tokens.extend(vocab.encode_chain(&instance.gt_chain)?);
    tokens.push(Vocabulary::ANSWER);
    tokens.push(vocab.encode(&crate::trajectory::Token::Diag(instance.gt_diag))?);
    tokens.push(Vocabulary::EOS);
    Ok(TrainingSequence {
        instance_key: instance.key.clone(),
        tokens,
        biased_source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub kind: String,
    pub world_hash: String,
    pub forge: ForgeConfig,
    pub config_hash: String,
    pub n_variants: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub variants: Vec<DatasetVariant>,
}

impl Corpus {
    pub fn sequences(&self, vocab: &Vocabulary) -> Result<Vec<TrainingSequence>> {
        self.variants
            .iter()
            .map(|v| assemble_sequence(&v.instance, v, vocab))
            .collect()
    }

    pub fn instance_keys(&self) -> Vec<String> {
        self.variants
            .iter()
            .map(|v| v.instance.key.clone())
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header)?;
        out.push(b'\n');
        for v in &self.variants {
            serde_json::to_writer(&mut out, v)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Corpus> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: CorpusHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Schema("empty corpus file".into()))?,
        )?;
        if header.kind != "corpus" {
            return Err(Error::Schema(format!(
                "expected corpus header, found `{}`",
                header.kind
            )));
        }
        let variants = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if variants.len() != header.n_variants {
            return Err(Error::Schema(format!(
                "header announces {} variants, file holds {}",
                header.n_variants,
                variants.len()
            )));
        }
        Ok(Corpus { header, variants })
    }
}

/// Build the three variant families. Instance `i` of family `f` draws from
/// streams `forge-<f>/i` and `forge-<f>-variant/i`, so the output does not
/// depend on thread count.
pub fn forge_corpus(world: &CausalWorld, cfg: &ForgeConfig, streams: &Streams) -> Result<Corpus> {
    world.validate()?;
    cfg.validate()?;
    let shortcut_regime: Regime = cfg.shortcut_regime.parse()?;
    let partial_regime: Regime = cfg.partial_regime.parse()?;
    let plan = [
        (VariantTag::Causal, Regime::Observational, cfg.n_causal),
        (VariantTag::Shortcut, shortcut_regime, cfg.n_shortcut),
        (VariantTag::Partial, partial_regime, cfg.n_partial),
    ];
    let mut variants = Vec::with_capacity(cfg.n_causal + cfg.n_shortcut + cfg.n_partial);
    for (tag, regime, n) in plan {
        let purpose = format!("forge-{}", tag.name());
        let variant_purpose = format!("{purpose}-variant");
        let built: Result<Vec<DatasetVariant>> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let inst = world.sample_keyed(regime, streams, &purpose, i)?;
                let mut rng = streams.stream(&variant_purpose, i);
                build_variant(&inst, tag, world, cfg, &mut rng)
            })
            .collect();
        variants.extend(built?);
    }
    Ok(Corpus {
        header: CorpusHeader {
            kind: "corpus".into(),
            world_hash: world.hash(),
            forge: cfg.clone(),
            config_hash: sha256_json(cfg),
            n_variants: variants.len(),
        },
        variants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorConfig {
    /// Similarity threshold τ below which a stage counts as diverged.
    pub tau: f64,
    /// Trajectories with a format reward below this floor count as errors.
    pub format_floor: f64,
    /// Trajectories with a causal reward below this floor count as errors.
    pub causal_floor: f64,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            format_floor: 1.0,
            causal_floor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub instance_key: String,
    pub err_trajectory: Vec<TokenId>,
    pub corr_trajectory: Vec<TokenId>,
    pub step_similarities: Vec<f64>,
    pub t_fail: usize,
    pub split: PrefixSplit,
    /// Set when the erroneous trajectory lacks the marker of stage `t_fail`
    /// and the pair falls back to contrasting whole sequences.
    pub whole_sequence: bool,
}

/// First stage (1-based) whose similarity falls below `tau`; 2 when none does.
pub fn locate_failure(similarities: &[f64], tau: f64) -> usize {
    similarities
        .iter()
        .position(|&s| s < tau)
        .map_or(similarities.len().max(1), |i| i + 1)
}

pub fn is_error(
    traj: &Trajectory,
    gold_y: usize,
    world: &CausalWorld,
    vocab: &Vocabulary,
    cfg: &ErrorConfig,
) -> bool {
    traj.answer_pred != Some(gold_y)
        || format_reward(traj, vocab) < cfg.format_floor
        || causal_reward(traj, world, CausalStage::VerifyWithFallback) < cfg.causal_floor
}

/// Build an error case from a decoded trajectory and its gold sequence.
pub fn localize_error<S>(
    instance_key: &str,
    err: &Trajectory,
    corr: &Trajectory,
    similarity: S,
    tau: f64,
) -> ErrorCase
where
    S: Fn(&[TokenId], &[TokenId]) -> f64,
{
    let step_similarities: Vec<f64> = [Stage::Causal, Stage::Verify]
        .iter()
        .map(|&s| similarity(err.stage_tokens(s), corr.stage_tokens(s)))
        .collect();
    let t_fail = locate_failure(&step_similarities, tau);
    let (split, whole_sequence) = match shared_prefix_split(err, corr, t_fail) {
        Ok(split) => (split, false),
        Err(_) => (
            PrefixSplit {
                prefix: Vec::new(),
                err_continuation: err.tokens.clone(),
                corr_continuation: corr.tokens.clone(),
            },
            true,
        ),
    };
    ErrorCase {
        instance_key: instance_key.to_string(),
        err_trajectory: err.tokens.clone(),
        corr_trajectory: corr.tokens.clone(),
        step_similarities,
        t_fail,
        split,
        whole_sequence,
    }
}

/// Decode each input, keep the wrong ones, and localize their first failing stage.
/// `decode` receives the input index and instance; output order follows input order.
pub fn collect_errors<D, S>(
    decode: D,
    inputs: &[(&GroundedInstance, &TrainingSequence)],
    similarity: S,
    world: &CausalWorld,
    vocab: &Vocabulary,
    cfg: &ErrorConfig,
) -> Vec<ErrorCase>
where
    D: Fn(usize, &GroundedInstance) -> Vec<TokenId> + Sync,
    S: Fn(&[TokenId], &[TokenId]) -> f64 + Sync,
{
    inputs
        .par_iter()
        .enumerate()
        .filter_map(|(i, (inst, gold))| {
            let err = parse(&decode(i, inst), vocab);
            if !is_error(&err, inst.gt_diag, world, vocab, cfg) {
                return None;
            }
            let corr = parse(&gold.tokens, vocab);
            Some(localize_error(&inst.key, &err, &corr, &similarity, cfg.tau))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::stage_similarity;

    fn rng(i: u64) -> StreamRng {
        Streams::new(5).stream("t", i)
    }

    #[test]
    fn perturb_six_by_six_passes_gate() {
        let b = BBox::new(3, 3, 9, 9);
        let cfg = PerturbConfig::default();
        for i in 0..200 {
            let p = perturb_box(&b, 12, 12, &cfg, &mut rng(i)).unwrap();
            assert_ne!(p, b);
            assert!(iou(&p, &b).unwrap() > 0.7);
            assert!(p.fits(12, 12));
        }
    }

    #[test]
    fn perturb_small_box_unsatisfiable() {
        // a unit shift of a 3×3 box leaves IoU 6/12; growing one side gives 9/12
        let b = BBox::new(3, 3, 6, 6);
        let cfg = PerturbConfig {
            scale: (1.0, 1.0),
            ..Default::default()
        };
        assert!(matches!(
            perturb_box(&b, 12, 12, &cfg, &mut rng(0)),
            Err(Error::GateUnsatisfiable { .. })
        ));
        let cfg = PerturbConfig {
            iou_gate: 0.8,
            ..Default::default()
        };
        assert!(matches!(
            perturb_box(&b, 12, 12, &cfg, &mut rng(0)),
            Err(Error::GateUnsatisfiable { .. })
        ));
    }

    #[test]
    fn perturb_never_returns_identity() {
        // Only the zero shift at unit scale clears a gate of 0.99, and it is forbidden.
        let b = BBox::new(3, 3, 9, 9);
        let cfg = PerturbConfig {
            shift: 0,
            scale: (1.0, 1.0),
            iou_gate: 0.5,
            max_attempts: 20,
        };
        assert!(perturb_box(&b, 12, 12, &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn locate_failure_fixtures() {
        assert_eq!(locate_failure(&[0.9, 0.4], 0.7), 2);
        assert_eq!(locate_failure(&[0.2, 0.9], 0.7), 1);
        assert_eq!(locate_failure(&[0.95, 0.95], 0.7), 2);
    }

    #[test]
    fn variants_respect_contracts() {
        let world = CausalWorld::default();
        let cfg = ForgeConfig {
            n_causal: 30,
            n_shortcut: 30,
            n_partial: 30,
            ..Default::default()
        };
        let corpus = forge_corpus(&world, &cfg, &Streams::new(3)).unwrap();
        assert_eq!(corpus.variants.len(), 90);
        for v in &corpus.variants {
            let pairs = [(v.chain[0], v.chain[1]), (v.chain[1], v.chain[2])];
            let inconsistent = pairs
                .iter()
                .filter(|(a, b)| !oracle_consistent(&world, a, b))
                .count();
            match v.tag {
                VariantTag::Causal => {
                    assert!(v.perturbed_box.is_none() && v.perturbed_path.is_none());
                    assert_eq!(inconsistent, 0);
                }
                VariantTag::Shortcut => {
                    let moved = v.perturbed_box.unwrap();
                    assert!(iou(&moved, &v.instance.gt_box).unwrap() > 0.7);
                    assert_eq!(v.chain[0], Step::Locate(moved));
                    assert_ne!(v.chain[0], v.instance.gt_chain[0]);
                }
                VariantTag::Partial => {
                    assert_ne!(v.perturbed_path, Some(v.instance.gt_path));
                    assert_eq!(v.chain[0], v.instance.gt_chain[0]);
                    assert!(inconsistent >= 1);
                }
            }
        }
    }

    #[test]
    fn causal_variant_requires_observational() {
        let world = CausalWorld::default();
        let inst = world
            .sample_keyed(Regime::DoA(None), &Streams::new(1), "x", 0)
            .unwrap();
        let err = build_variant(
            &inst,
            VariantTag::Causal,
            &world,
            &ForgeConfig::default(),
            &mut rng(0),
        );
        assert!(matches!(err, Err(Error::VariantPrecondition(_))));
    }

    #[test]
    fn sequences_have_template_length() {
        let world = CausalWorld::default();
        let vocab = Vocabulary::for_world(&world);
        let cfg = ForgeConfig {
            n_causal: 5,
            n_shortcut: 5,
            n_partial: 5,
            ..Default::default()
        };
        let corpus = forge_corpus(&world, &cfg, &Streams::new(3)).unwrap();
        for seq in corpus.sequences(&vocab).unwrap() {
            assert_eq!(
                seq.tokens.len(),
                crate::trajectory::TEMPLATE_OVERHEAD + 2 * 5
            );
            let t = parse(&seq.tokens, &vocab);
            assert!(t.well_formed);
        }
    }

    #[test]
    fn degenerate_sequence_repeats_gold() {
        let world = CausalWorld::default();
        let vocab = Vocabulary::for_world(&world);
        let inst = world
            .sample_keyed(Regime::Observational, &Streams::new(1), "x", 0)
            .unwrap();
        let v = build_variant(
            &inst,
            VariantTag::Causal,
            &world,
            &ForgeConfig::default(),
            &mut rng(0),
        )
        .unwrap();
        let seq = assemble_sequence(&inst, &v, &vocab).unwrap();
        assert_eq!(seq.biased_source, BiasedSource::Gold);
        let t = parse(&seq.tokens, &vocab);
        assert_eq!(t.stage_tokens(Stage::Causal), t.stage_tokens(Stage::Verify));
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let world = CausalWorld::default();
        let cfg = ForgeConfig {
            n_causal: 3,
            n_shortcut: 3,
            n_partial: 3,
            ..Default::default()
        };
        let corpus = forge_corpus(&world, &cfg, &Streams::new(3)).unwrap();
        let text = String::from_utf8(corpus.to_jsonl().unwrap()).unwrap();
        assert_eq!(Corpus::from_jsonl(&text).unwrap(), corpus);
    }

    #[test]
    fn collect_errors_keeps_only_failures() {
        let world = CausalWorld::default();
        let vocab = Vocabulary::for_world(&world);
        let cfg = ForgeConfig {
            n_causal: 4,
            n_shortcut: 4,
            n_partial: 4,
            ..Default::default()
        };
        let corpus = forge_corpus(&world, &cfg, &Streams::new(3)).unwrap();
        let seqs = corpus.sequences(&vocab).unwrap();
        let inputs: Vec<_> = corpus
            .variants
            .iter()
            .map(|v| &v.instance)
            .zip(seqs.iter())
            .collect();

        // A decoder that reproduces gold sequences yields no errors.
        let perfect = collect_errors(
            |i, _| seqs[i].tokens.clone(),
            &inputs,
            stage_similarity,
            &world,
            &vocab,
            &ErrorConfig::default(),
        );
        assert!(perfect.is_empty());

        // Wrong final answers are collected with t_fail = 2 and a shared prefix.
        let wrong = collect_errors(
            |i, inst| {
                let mut t = seqs[i].tokens.clone();
                t[13] = vocab.diag_id((inst.gt_diag + 1) % world.n_diag);
                t
            },
            &inputs,
            stage_similarity,
            &world,
            &vocab,
            &ErrorConfig::default(),
        );
        assert_eq!(wrong.len(), inputs.len());
        for case in &wrong {
            assert_eq!(case.t_fail, 2);
            assert_eq!(case.step_similarities, vec![1.0, 1.0]);
            assert_eq!(case.split.prefix.len(), 7);
            assert!(!case.whole_sequence);
        }
    }
}
