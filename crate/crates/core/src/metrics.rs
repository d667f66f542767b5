//! Grounding, answer, consistency and hallucination metrics.
//!
//! Object, region and alignment F1 are this crate's own definitions:
//!
//! - object: multiset F1 over labels, boxes ignored
//! - region: one-to-one box matches at `IoU ≥ iou_match`, labels ignored
//! - align: one-to-one matches needing both label equality and the IoU threshold
//!
//! Matches are maximum-cardinality (optimal), so `align ≤ min(object, region)`
//! holds on every input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;
use crate::policy::{rollout, DecodeConfig, InstanceFeatures, PolicyParams};
use crate::rng::Streams;
use crate::scm::{implied_diagnosis, CausalWorld, GroundedInstance, Step};
use crate::trajectory::{Stage, Trajectory, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionF1 {
    pub object_f1: f64,
    pub region_f1: f64,
    pub align_f1: f64,
}

fn f1(matches: usize, n_pred: usize, n_gold: usize) -> f64 {
    if n_pred + n_gold == 0 {
        1.0
    } else {
        2.0 * matches as f64 / (n_pred + n_gold) as f64
    }
}

/// Size of a maximum bipartite matching (augmenting paths).
pub fn max_matching(n_left: usize, n_right: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    let adj: Vec<Vec<usize>> = (0..n_left)
        .map(|i| (0..n_right).filter(|&j| edge(i, j)).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; n_right];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].map_or(true, |k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    (0..n_left)
        .filter(|&i| augment(i, &adj, &mut vec![false; n_right], &mut owner))
        .count()
}

pub fn detection_f1s(
    pred: &[(usize, BBox)],
    gold: &[(usize, BBox)],
    iou_match: f64,
) -> DetectionF1 {
    // degenerate boxes never match
    let overlap =
        |i: usize, j: usize| iou(&pred[i].1, &gold[j].1).map_or(false, |v| v >= iou_match);
    let region = max_matching(pred.len(), gold.len(), overlap);
    let align = max_matching(pred.len(), gold.len(), |i, j| {
        pred[i].0 == gold[j].0 && overlap(i, j)
    });
    let mut gold_labels: Vec<usize> = gold.iter().map(|g| g.0).collect();
    let mut labels = 0;
    for (l, _) in pred {
        if let Some(k) = gold_labels.iter().position(|g| g == l) {
            gold_labels.swap_remove(k);
            labels += 1;
        }
    }
    let (np, ng) = (pred.len(), gold.len());
    DetectionF1 {
        object_f1: f1(labels, np, ng),
        region_f1: f1(region, np, ng),
        align_f1: f1(align, np, ng),
    }
}

fn verify_locate_characterize(traj: &Trajectory) -> (Option<BBox>, Option<usize>) {
    let steps = traj.steps(Stage::Verify);
    let b = steps.iter().find_map(|s| match s {
        Step::Locate(b) => Some(*b),
        _ => None,
    });
    let p = steps.iter().find_map(|s| match s {
        Step::Characterize(p) => Some(*p),
        _ => None,
    });
    (b, p)
}

/// 1 iff the answer equals the diagnosis implied by the verify stage's own box and pathology.
pub fn diag_consistency(traj: &Trajectory, world: &CausalWorld) -> f64 {
    let (Some(b), Some(p)) = verify_locate_characterize(traj) else {
        return 0.0;
    };
    match (traj.answer_pred, implied_diagnosis(world, &b, p)) {
        (Some(y), Ok(d)) if y == d => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HallucinationConfig {
    pub iou_match: f64,
    /// Count only pathology and diagnosis entities, not boxes.
    pub classes_only: bool,
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        Self {
            iou_match: 0.5,
            classes_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Entity {
    Box(i32, i32, i32, i32),
    Path(usize),
    Diag(usize),
}

/// Pathology channels lit in at least half a lesion's worth of cells.
fn visible_pathologies(inst: &GroundedInstance, world: &CausalWorld) -> Vec<usize> {
    let need = (world.lesion_h * world.lesion_w).div_ceil(2);
    (0..world.n_path)
        .filter(|&k| {
            let c = world.path_channel(k);
            inst.image
                .data
                .chunks_exact(inst.image.channels)
                .filter(|cell| cell[c] >= 0.5)
                .count()
                >= need
        })
        .collect()
}

/// Fraction of distinct BOX/PATH/DIAG entities across both stages that are
/// supported neither by the rendered image nor by the gold annotation.
pub fn hallucination_rate(
    traj: &Trajectory,
    inst: &GroundedInstance,
    world: &CausalWorld,
    cfg: &HallucinationConfig,
) -> f64 {
    let mut entities = BTreeSet::new();
    for stage in [Stage::Causal, Stage::Verify] {
        for s in traj.steps(stage) {
            let e = match *s {
                Step::Locate(b) => Entity::Box(b.x_min, b.y_min, b.x_max, b.y_max),
                Step::Characterize(p) => Entity::Path(p),
                Step::Conclude(d) => Entity::Diag(d),
            };
            if !(cfg.classes_only && matches!(e, Entity::Box(..))) {
                entities.insert(e);
            }
        }
    }
    if entities.is_empty() {
        return 0.0;
    }
    let visible = visible_pathologies(inst, world);
    let region = world.region_of(&inst.gt_box);
    let hallucinated = entities
        .iter()
        .filter(|e| match **e {
            Entity::Box(x0, y0, x1, y1) => {
                let b = BBox::new(x0, y0, x1, y1);
                let gold = iou(&b, &inst.gt_box).map_or(false, |v| v >= cfg.iou_match);
                // image support: at least half the box's cells show a lit pathology channel
                let lit = {
                    let (mut n, mut hit) = (0usize, 0usize);
                    for y in b.y_min.max(0)..b.y_max.min(world.grid_h as i32) {
                        for x in b.x_min.max(0)..b.x_max.min(world.grid_w as i32) {
                            n += 1;
                            let cell = inst.image.cell(x as usize, y as usize);
                            if (0..world.n_path).any(|k| cell[world.path_channel(k)] >= 0.5) {
                                hit += 1;
                            }
                        }
                    }
                    n > 0 && 2 * hit >= n
                };
                !(gold || lit)
            }
            Entity::Path(p) => p != inst.gt_path && !visible.contains(&p),
            Entity::Diag(d) => {
                d != inst.gt_diag && !visible.iter().any(|&k| world.diag_of(region, k) == d)
            }
        })
        .count();
    hallucinated as f64 / entities.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub iou_match: f64,
    pub hallucination: HallucinationConfig,
    pub n_observational: usize,
    pub n_interventional: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::eval(),
            iou_match: 0.5,
            hallucination: HallucinationConfig::default(),
            n_observational: 500,
            n_interventional: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub accuracy: f64,
    pub diag_c: f64,
    pub hallucination_rate: f64,
    pub iou: f64,
    pub object_f1: f64,
    pub region_f1: f64,
    pub align_f1: f64,
    pub answerable: bool,
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    pub diag_c: f64,
    pub hallucination_rate: f64,
    pub iou_mean: f64,
    pub object_f1: f64,
    pub region_f1: f64,
    pub align_f1: f64,
    pub answerable_rate: f64,
    pub well_formed_rate: f64,
}

impl SplitReport {
    fn aggregate(split: &str, rows: &[SampleMetrics]) -> Self {
        let n = rows.len();
        // fixed left-to-right order
        let avg = |f: &dyn Fn(&SampleMetrics) -> f64| {
            if n == 0 {
                return 0.0;
            }
            let mut s = 0.0;
            for r in rows {
                s += f(r);
            }
            s / n as f64
        };
        Self {
            split: split.into(),
            n,
            accuracy: avg(&|r| r.accuracy),
            diag_c: avg(&|r| r.diag_c),
            hallucination_rate: avg(&|r| r.hallucination_rate),
            iou_mean: avg(&|r| r.iou),
            object_f1: avg(&|r| r.object_f1),
            region_f1: avg(&|r| r.region_f1),
            align_f1: avg(&|r| r.align_f1),
            answerable_rate: avg(&|r| f64::from(u8::from(r.answerable))),
            well_formed_rate: avg(&|r| f64::from(u8::from(r.well_formed))),
        }
    }

    fn metrics(&self) -> [(&'static str, f64); 9] {
        [
            ("accuracy", self.accuracy),
            ("diag_c", self.diag_c),
            ("hallucination_rate", self.hallucination_rate),
            ("iou_mean", self.iou_mean),
            ("object_f1", self.object_f1),
            ("region_f1", self.region_f1),
            ("align_f1", self.align_f1),
            ("answerable_rate", self.answerable_rate),
            ("well_formed_rate", self.well_formed_rate),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub world_hash: String,
    pub overall: SplitReport,
    pub observational: SplitReport,
    pub interventional: SplitReport,
}

impl EvalReport {
    /// Accuracy on the interventional split, in [0,1].
    pub fn interventional_accuracy(&self) -> f64 {
        self.interventional.accuracy
    }

    /// One row per split × metric; rates scaled to [0,100].
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\nsplit,metric,value\n", self.config_hash);
        for s in [&self.overall, &self.observational, &self.interventional] {
            out.push_str(&format!("{},n,{}\n", s.split, s.n));
            for (name, v) in s.metrics() {
                out.push_str(&format!("{},{},{:.6}\n", s.split, name, 100.0 * v));
            }
        }
        out
    }
}

pub fn score_sample(
    traj: &Trajectory,
    inst: &GroundedInstance,
    world: &CausalWorld,
    cfg: &EvalConfig,
) -> SampleMetrics {
    let (b, p) = verify_locate_characterize(traj);
    let pred: Vec<(usize, BBox)> = match (b, p) {
        (Some(b), Some(p)) => vec![(p, b)],
        _ => vec![],
    };
    let det = detection_f1s(&pred, &[(inst.gt_path, inst.gt_box)], cfg.iou_match);
    SampleMetrics {
        accuracy: f64::from(u8::from(traj.answer_pred == Some(inst.gt_diag))),
        diag_c: diag_consistency(traj, world),
        hallucination_rate: hallucination_rate(traj, inst, world, &cfg.hallucination),
        iou: b.and_then(|b| iou(&b, &inst.gt_box).ok()).unwrap_or(0.0),
        object_f1: det.object_f1,
        region_f1: det.region_f1,
        align_f1: det.align_f1,
        answerable: traj.answer_pred.is_some(),
        well_formed: traj.well_formed,
    }
}

/// Aggregate per-sample rows into an overall report plus the two regime splits.
pub fn build_report(
    rows: &[SampleMetrics],
    instances: &[GroundedInstance],
    world: &CausalWorld,
    config_hash: &str,
) -> EvalReport {
    let pick = |interventional: bool| -> Vec<SampleMetrics> {
        rows.iter()
            .zip(instances)
            .filter(|(_, i)| i.regime.is_interventional() == interventional)
            .map(|(r, _)| *r)
            .collect()
    };
    EvalReport {
        config_hash: config_hash.into(),
        world_hash: world.hash(),
        overall: SplitReport::aggregate("overall", rows),
        observational: SplitReport::aggregate("observational", &pick(false)),
        interventional: SplitReport::aggregate("interventional", &pick(true)),
    }
}

/// Decode every instance and aggregate. Instance `i` samples from stream
/// `eval-decode/i`, so the report does not depend on scheduling.
/// `train_keys` must be disjoint from the evaluation keys.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &PolicyParams,
    eval_set: &[GroundedInstance],
    train_keys: &BTreeSet<String>,
    world: &CausalWorld,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
    streams: &Streams,
    config_hash: &str,
) -> Result<EvalReport> {
    let overlap = eval_set
        .iter()
        .filter(|i| train_keys.contains(&i.key))
        .count();
    if overlap > 0 {
        return Err(Error::EvalOverlap(overlap));
    }
    cfg.decode.validate()?;
    let rows: Result<Vec<SampleMetrics>> = eval_set
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let feats = InstanceFeatures::new(&params.spec, vocab, inst)?;
            let mut rng = streams.stream("eval-decode", i as u64);
            let r = rollout(params, &feats, vocab, &cfg.decode, &mut rng)?;
            Ok(score_sample(&r.trajectory, inst, world, cfg))
        })
        .collect();
    Ok(build_report(&rows?, eval_set, world, config_hash))
}

/// Held-out observational and interventional instances from the `eval-*` streams.
pub fn eval_set(
    world: &CausalWorld,
    cfg: &EvalConfig,
    streams: &Streams,
) -> Result<Vec<GroundedInstance>> {
    let mut out = Vec::with_capacity(cfg.n_observational + cfg.n_interventional);
    for i in 0..cfg.n_observational as u64 {
        out.push(world.sample_keyed(crate::scm::Regime::Observational, streams, "eval-obs", i)?);
    }
    for i in 0..cfg.n_interventional as u64 {
        // alternate the two intervention families
        let regime = if i % 2 == 0 {
            crate::scm::Regime::DoA(None)
        } else {
            crate::scm::Regime::DoP(None)
        };
        out.push(world.sample_keyed(regime, streams, "eval-int", i)?);
    }
    Ok(out)
}
