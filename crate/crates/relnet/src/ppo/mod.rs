//! Goal-conditioned actor-critic training with PPO.
//!
//! The policy and value heads share one tokenizer + encoder trunk. Rollouts
//! sample a diagonal Gaussian over effector velocities; updates run the
//! clipped surrogate objective with generalized advantage estimation.

pub mod model;
pub mod rollout;
pub mod trainer;
pub mod update;

pub use model::{ActionSample, PolicyError, PolicyModel};
pub use rollout::{collect_rollouts, EnvTrajectory, EpisodeStat, RolloutError, TrajectoryBatch, Transition};
pub use trainer::{Trainer, TrainerSettings};
pub use update::{ppo_update, UpdateError, UpdateStats};

use serde::{Deserialize, Serialize};

/// PPO hyperparameters. Defaults follow the training scheme this artifact
/// reproduces: discount 0.98, GAE lambda 0.95, entropy coefficient 0.01,
/// value coefficient 0.5, learning rate 2.5e-4 with linear decay, gradient
/// clip 0.5, 40 minibatches, 4 epochs, ratio clip 0.5, Adam.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub discount: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub linear_lr_decay: bool,
    pub grad_clip: f64,
    pub minibatches: usize,
    pub epochs: usize,
    /// Surrogate ratio clip. The source setting names a single "clip ratio
    /// 0.5"; it is applied here, with a separate optional value clip knob.
    pub clip_ratio: f64,
    pub value_clip: Option<f64>,
    pub rollout_steps: usize,
    pub n_envs: usize,
    pub advantage_norm: bool,
    pub init_log_std: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            discount: 0.98,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 2.5e-4,
            linear_lr_decay: true,
            grad_clip: 0.5,
            minibatches: 40,
            epochs: 4,
            clip_ratio: 0.5,
            value_clip: None,
            rollout_steps: 2048,
            n_envs: 8,
            advantage_norm: true,
            init_log_std: 0.0,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(format!("ppo.discount = {} outside [0, 1]", self.discount));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("ppo.gae_lambda = {} outside [0, 1]", self.gae_lambda));
        }
        if self.learning_rate < 0.0 {
            return Err("ppo.learning_rate must be >= 0".into());
        }
        if self.grad_clip <= 0.0 {
            return Err("ppo.grad_clip must be > 0".into());
        }
        if self.minibatches == 0 || self.epochs == 0 {
            return Err("ppo.minibatches and ppo.epochs must be >= 1".into());
        }
        if self.clip_ratio <= 0.0 {
            return Err("ppo.clip_ratio must be > 0".into());
        }
        if self.rollout_steps == 0 || self.n_envs == 0 {
            return Err("ppo.rollout_steps and ppo.n_envs must be >= 1".into());
        }
        Ok(())
    }
}

/// Linearly decayed learning rate, floored at zero.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    lr0 * frac.max(0.0)
}

/// Generalized advantage estimation over one contiguous env sequence with
/// episode-boundary resets. Returns (advantages, returns) where
/// returns = advantages + values.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n, "values length mismatch");
    assert_eq!(dones.len(), n, "dones length mismatch");
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        acc = delta + gamma * lambda * not_done * acc;
        advantages[t] = acc;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: explicit double loop over the delta terms.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        let delta = |t: usize| {
            let next = if dones[t] {
                0.0
            } else if t + 1 < n {
                values[t + 1]
            } else {
                bootstrap
            };
            rewards[t] + gamma * next - values[t]
        };
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut weight = 1.0;
                for l in t..n {
                    sum += weight * delta(l);
                    if dones[l] {
                        break;
                    }
                    weight *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn single_terminal_step() {
        let (adv, ret) = gae(&[1.0], &[0.0], &[true], 5.0, 0.98, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn lambda_zero_gives_td_residuals() {
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, 1.5, 2.5];
        let dones = [false, false, false];
        let (adv, _) = gae(&rewards, &values, &dones, 4.0, 0.9, 0.0);
        for t in 0..3 {
            let next = if t + 1 < 3 { values[t + 1] } else { 4.0 };
            let td = rewards[t] + 0.9 * next - values[t];
            assert!((adv[t] - td).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_gamma_one_zero_values_gives_reward_to_go() {
        let rewards: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let values = vec![0.0; 10];
        let mut dones = vec![false; 10];
        dones[9] = true;
        let (adv, _) = gae(&rewards, &values, &dones, 0.0, 1.0, 1.0);
        for t in 0..10 {
            let to_go: f64 = rewards[t..].iter().sum();
            assert!((adv[t] - to_go).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = rng.random_range(1..=20);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut dones: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.2).collect();
            if rng.random_range(0.0..1.0) < 0.5 {
                dones[n - 1] = true;
            }
            let bootstrap = rng.random_range(-2.0..2.0);
            let gamma = rng.random_range(0.8..1.0);
            let lambda = rng.random_range(0.0..1.0);
            let (adv, ret) = gae(&rewards, &values, &dones, bootstrap, gamma, lambda);
            let oracle = gae_oracle(&rewards, &values, &dones, bootstrap, gamma, lambda);
            for t in 0..n {
                assert!(
                    (adv[t] - oracle[t]).abs() <= 1e-6,
                    "t={t}: {} vs oracle {}",
                    adv[t],
                    oracle[t]
                );
                assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 2.5e-4), 2.5e-4);
        assert_eq!(lr_schedule(100, 100, 2.5e-4), 0.0);
        assert!((lr_schedule(50, 100, 2.5e-4) - 1.25e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(150, 100, 2.5e-4), 0.0, "floored at zero");
    }

    #[test]
    fn hyper_validation_rejects_out_of_range_discount() {
        let bad = PpoHyper {
            discount: 1.5,
            ..PpoHyper::default()
        };
        let msg = bad.validate().unwrap_err();
        assert!(msg.contains("discount"), "{msg}");
        assert!(msg.contains("1.5"), "{msg}");
    }
}
