//! Group-relative advantages and the KL penalty handed to an external trainer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid grpo config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// mean(exp(ref - pol) - (ref - pol) - 1), never negative.
    #[default]
    K3,
    /// mean(pol - ref).
    Plain,
}

/// Where the trainer applies the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPlacement {
    #[default]
    InLoss,
    InReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coeff: f64,
    pub std_floor: f64,
    pub estimator: KlEstimator,
    pub placement: KlPlacement,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coeff: 5e-3,
            std_floor: 1e-6,
            estimator: KlEstimator::K3,
            placement: KlPlacement::InLoss,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return Err(GrpoError::InvalidConfig(format!("kl_coeff {}", self.kl_coeff)));
        }
        if !(self.std_floor >= 0.0) || !self.std_floor.is_finite() {
            return Err(GrpoError::InvalidConfig(format!("std_floor {}", self.std_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub raw: String,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(sample_id: impl Into<String>, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rollouts.len()));
        }
        Ok(Self { sample_id: sample_id.into(), rollouts })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.total).collect()
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(GrpoError::NonFinite(i)),
        None => Ok(()),
    }
}

/// (r_i - mean) / std with the population std; all zeros below the floor.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if rewards.len() != cfg.group_size {
        return Err(GrpoError::LengthMismatch { expected: cfg.group_size, got: rewards.len() });
    }
    check_finite(rewards)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < cfg.std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token KL estimate between policy and reference log-probabilities.
pub fn kl_penalty(policy_logprobs: &[f64], ref_logprobs: &[f64]) -> Result<f64> {
    kl_penalty_with(policy_logprobs, ref_logprobs, KlEstimator::K3)
}

pub fn kl_penalty_with(policy_logprobs: &[f64], ref_logprobs: &[f64], est: KlEstimator) -> Result<f64> {
    if policy_logprobs.len() != ref_logprobs.len() {
        return Err(GrpoError::LengthMismatch { expected: policy_logprobs.len(), got: ref_logprobs.len() });
    }
    check_finite(policy_logprobs)?;
    check_finite(ref_logprobs)?;
    if policy_logprobs.is_empty() {
        return Ok(0.0);
    }
    let n = policy_logprobs.len() as f64;
    let sum: f64 = policy_logprobs
        .iter()
        .zip(ref_logprobs)
        .map(|(p, r)| match est {
            KlEstimator::K3 => {
                let d = r - p;
                // exp_m1 keeps precision when d is tiny; clamp kills -0 rounding.
                (d.exp_m1() - d).max(0.0)
            }
            KlEstimator::Plain => p - r,
        })
        .sum();
    Ok(sum / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub policy_term: f64,
    pub kl_term: f64,
}

/// Bookkeeping for the trainer: mean of weighted advantages and the scaled
/// KL. `weights` defaults to 1 per rollout; the trainer passes its
/// importance ratios here.
pub fn objective_terms(
    group: &RolloutGroup,
    advantages: &[f64],
    weights: Option<&[f64]>,
    kl: f64,
    cfg: &GrpoConfig,
) -> Result<ObjectiveTerms> {
    let n = group.rollouts.len();
    if advantages.len() != n {
        return Err(GrpoError::LengthMismatch { expected: n, got: advantages.len() });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(GrpoError::LengthMismatch { expected: n, got: w.len() });
        }
    }
    let policy_term =
        advantages.iter().enumerate().map(|(i, a)| a * weights.map_or(1.0, |w| w[i])).sum::<f64>() / n as f64;
    let kl_term = match cfg.placement {
        KlPlacement::InLoss => cfg.kl_coeff * kl,
        KlPlacement::InReward => 0.0,
    };
    Ok(ObjectiveTerms { policy_term, kl_term })
}

/// Subtracts per-rollout KL from rewards when the penalty lives in the reward.
pub fn shaped_rewards(rewards: &[f64], kls: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if rewards.len() != kls.len() {
        return Err(GrpoError::LengthMismatch { expected: rewards.len(), got: kls.len() });
    }
    Ok(match cfg.placement {
        KlPlacement::InLoss => rewards.to_vec(),
        KlPlacement::InReward => rewards.iter().zip(kls).map(|(r, k)| r - cfg.kl_coeff * k).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> GrpoConfig {
        GrpoConfig { group_size: n, ..GrpoConfig::default() }
    }

    #[test]
    fn constant_group_is_zero() {
        assert_eq!(group_advantages(&[1.0; 4], &cfg(4)).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn two_values() {
        assert_eq!(group_advantages(&[0.0, 2.0], &cfg(2)).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn length_checked() {
        assert!(matches!(
            group_advantages(&[0.0, 1.0], &cfg(8)),
            Err(GrpoError::LengthMismatch { expected: 8, got: 2 })
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let r = [-0.5, -1.5, -3.0];
        let p: Vec<f64> = r.iter().map(|x| x - std::f64::consts::LN_2).collect();
        let want = 2.0 - std::f64::consts::LN_2 - 1.0;
        assert!((kl_penalty(&p, &r).unwrap() - want).abs() < 1e-12);
        assert!((kl_penalty_with(&p, &r, KlEstimator::Plain).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_penalty(&[f64::NAN], &[0.0]).is_err());
        assert!(kl_penalty(&[0.0], &[]).is_err());
    }

    #[test]
    fn objective_examples() {
        let g =
            RolloutGroup::new("s", (0..2).map(|i| Rollout { raw: String::new(), total: i as f64 }).collect()).unwrap();
        let c = GrpoConfig::default();
        let t = objective_terms(&g, &[0.0, 0.0], None, 0.3, &c).unwrap();
        assert_eq!(t.policy_term, 0.0);
        assert!((t.kl_term - 1.5e-3).abs() < 1e-15);
        let c10 = GrpoConfig { kl_coeff: 5e-2, ..c };
        let t10 = objective_terms(&g, &[0.0, 0.0], None, 0.3, &c10).unwrap();
        assert!((t10.kl_term - 10.0 * t.kl_term).abs() < 1e-15);
    }

    #[test]
    fn in_reward_placement() {
        let c = GrpoConfig { placement: KlPlacement::InReward, group_size: 2, ..GrpoConfig::default() };
        assert_eq!(shaped_rewards(&[1.0, 2.0], &[0.0, 200.0], &c).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn tiny_groups_rejected() {
        assert!(RolloutGroup::new("s", vec![]).is_err());
        assert!(GrpoConfig { group_size: 1, ..GrpoConfig::default() }.validate().is_err());
    }
}
