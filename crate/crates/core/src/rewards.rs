//! Composite trajectory reward and group-relative advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::{oracle_consistent, CausalWorld};
use crate::trajectory::{positional_validity, Stage, Trajectory, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub acc: f64,
    pub format: f64,
    pub causal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::balanced()
    }
}

impl RewardWeights {
    /// Unweighted sum of the three components.
    pub fn balanced() -> Self {
        Self {
            acc: 1.0,
            format: 1.0,
            causal: 1.0,
        }
    }

    /// `λ_acc/λ_causal = 0.5/0.5`, the best row of the reward-weight ablation.
    pub fn selected() -> Self {
        Self {
            acc: 0.5,
            format: 1.0,
            causal: 0.5,
        }
    }

    pub fn acc_only() -> Self {
        Self {
            acc: 1.0,
            format: 1.0,
            causal: 0.0,
        }
    }

    pub fn causal_only() -> Self {
        Self {
            acc: 0.0,
            format: 1.0,
            causal: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            acc: 0.0,
            format: 0.0,
            causal: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "balanced" => Ok(Self::balanced()),
            "selected" => Ok(Self::selected()),
            "acc-only" | "acc_only" => Ok(Self::acc_only()),
            "causal-only" | "causal_only" => Ok(Self::causal_only()),
            "zero" => Ok(Self::zero()),
            other => Err(Error::InvalidConfig(format!(
                "unknown reward preset `{other}`"
            ))),
        }
    }

    pub fn max_total(&self) -> f64 {
        self.acc + self.format + self.causal
    }
}

/// Which stage `R_causal` reads its reasoning steps from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalStage {
    /// Verify stage; the causal stage when no `<VERIFY>` marker was emitted.
    #[default]
    VerifyWithFallback,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_format: f64,
    pub r_causal: f64,
    pub weights: RewardWeights,
    pub total: f64,
}

pub fn accuracy_reward(traj: &Trajectory, gold_y: usize) -> f64 {
    match traj.answer_pred {
        Some(y) if y == gold_y => 1.0,
        _ => 0.0,
    }
}

/// Fraction of positionally valid tokens. A list that does not end in `<EOS>`
/// is charged one extra invalid position, so only well-formed trajectories
/// reach 1 and the empty list scores 0.
pub fn format_reward(traj: &Trajectory, vocab: &Vocabulary) -> f64 {
    let (valid, terminated) = positional_validity(&traj.tokens, vocab);
    let denom = traj.len() + usize::from(!terminated);
    valid as f64 / denom as f64
}

pub fn causal_reward(traj: &Trajectory, world: &CausalWorld, stage: CausalStage) -> f64 {
    let steps = match stage {
        CausalStage::VerifyWithFallback if traj.verify_marker.is_some() => {
            traj.steps(Stage::Verify)
        }
        CausalStage::VerifyWithFallback | CausalStage::Causal => traj.steps(Stage::Causal),
    };
    if steps.len() < 2 {
        return 0.0;
    }
    let consistent = steps
        .windows(2)
        .filter(|w| oracle_consistent(world, &w[0], &w[1]))
        .count();
    consistent as f64 / (steps.len() - 1) as f64
}

pub fn score(
    traj: &Trajectory,
    gold_y: usize,
    world: &CausalWorld,
    vocab: &Vocabulary,
    weights: RewardWeights,
    stage: CausalStage,
) -> RewardBreakdown {
    let r_acc = accuracy_reward(traj, gold_y);
    let r_format = format_reward(traj, vocab);
    let r_causal = causal_reward(traj, world, stage);
    RewardBreakdown {
        r_acc,
        r_format,
        r_causal,
        weights,
        total: weights.acc * r_acc + weights.format * r_format + weights.causal * r_causal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group_size: usize,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    pub advantages: Vec<f64>,
}

/// `A_g = (R_g − mean) / (std + ε)` with population statistics, summed left to right.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<GroupStats> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "stability constant {eps} must be > 0"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group rewards".into()));
    }
    // Deviations are formed as `G·R_g − ΣR`, which is exact (and exactly
    // shift-invariant) whenever the rewards lie on a coarse dyadic grid.
    let n = g as f64;
    let mut sum = 0.0;
    for r in rewards {
        sum += r;
    }
    let scaled: Vec<f64> = rewards.iter().map(|r| n * r - sum).collect();
    let mut sq = 0.0;
    for d in &scaled {
        sq += d * d;
    }
    let mean = sum / n;
    let std = sq.sqrt() / (n * n.sqrt());
    let advantages = scaled.iter().map(|d| (d / n) / (std + eps)).collect();
    Ok(GroupStats {
        group_size: g,
        rewards: rewards.to_vec(),
        mean,
        std,
        eps,
        advantages,
    })
}
