//! Training loop state: model, optimizer, environments, random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffmath::AdamState;
use crate::encoders::{EncodeError, EncoderConfig};
use crate::env::{Env, EnvConfig, EnvError, RewardConfig};

use super::model::PolicyModel;
use super::rollout::{collect_rollouts, RolloutError};
use super::update::{ppo_update, UpdateError, UpdateStats};
use super::{lr_schedule, PpoHyper};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Update(#[from] UpdateError),
}

/// Run-level settings that are not PPO hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainerSettings {
    pub total_steps: u64,
    pub seed: u64,
}

/// One update's outcome, including rollout episode statistics.
#[derive(Debug, Clone, Copy)]
pub struct TrainUpdate {
    pub stats: UpdateStats,
    pub lr: f64,
    pub steps_collected: u64,
    pub episodes: usize,
    pub mean_episode_reward: f64,
    /// Mean fractional success over episodes finished in this rollout.
    pub mean_final_rho: f64,
}

/// Owns everything one training run mutates. Rollouts read the model;
/// updates are the only writer, strictly after collection.
pub struct Trainer {
    pub model: PolicyModel<f32>,
    pub adam: AdamState<f32>,
    pub envs: Vec<Env>,
    pub hyper: PpoHyper,
    pub total_steps: u64,
    pub global_step: u64,
    pub update_index: u64,
    pub action_rng: ChaCha8Rng,
    pub shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    /// Seed derivation: model at `seed`, action stream at `seed + 1`,
    /// minibatch shuffling at `seed + 2`, env `e` at `seed + 10 + e`.
    pub fn new(
        env_cfg: EnvConfig,
        reward_cfg: RewardConfig,
        encoder_cfg: EncoderConfig,
        hyper: PpoHyper,
        settings: TrainerSettings,
    ) -> Result<Self, TrainError> {
        let model = PolicyModel::new(
            encoder_cfg,
            env_cfg.action_dim(),
            hyper.init_log_std,
            settings.seed,
        )?;
        let adam = AdamState::new(&model.store);
        let mut envs = Vec::with_capacity(hyper.n_envs);
        for e in 0..hyper.n_envs {
            envs.push(Env::new(
                env_cfg.clone(),
                reward_cfg.clone(),
                settings.seed + 10 + e as u64,
            )?);
        }
        Ok(Trainer {
            model,
            adam,
            envs,
            hyper,
            total_steps: settings.total_steps,
            global_step: 0,
            update_index: 0,
            action_rng: ChaCha8Rng::seed_from_u64(settings.seed + 1),
            shuffle_rng: ChaCha8Rng::seed_from_u64(settings.seed + 2),
        })
    }

    /// Learning rate for the next update under the configured schedule.
    pub fn current_lr(&self) -> f64 {
        if self.hyper.linear_lr_decay {
            lr_schedule(self.global_step, self.total_steps, self.hyper.learning_rate)
        } else {
            self.hyper.learning_rate
        }
    }

    pub fn done(&self) -> bool {
        self.global_step >= self.total_steps
    }

    /// One rollout + PPO update cycle.
    pub fn update(&mut self) -> Result<TrainUpdate, TrainError> {
        let batch = collect_rollouts(
            &self.model,
            &mut self.envs,
            self.hyper.rollout_steps,
            &mut self.action_rng,
        )?;
        let lr = self.current_lr();
        let stats = ppo_update(
            &mut self.model,
            &batch,
            &self.hyper,
            &mut self.adam,
            lr,
            &mut self.shuffle_rng,
        )?;
        let steps = batch.transitions() as u64;
        self.global_step += steps;
        self.update_index += 1;

        let episodes = batch.episodes.len();
        let (mut reward_sum, mut rho_sum) = (0.0, 0.0);
        for ep in &batch.episodes {
            reward_sum += ep.total_reward;
            rho_sum += ep.final_rho;
        }
        let denom = episodes.max(1) as f64;
        Ok(TrainUpdate {
            stats,
            lr,
            steps_collected: steps,
            episodes,
            mean_episode_reward: reward_sum / denom,
            mean_final_rho: rho_sum / denom,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trainer(seed: u64) -> Trainer {
        let env_cfg = EnvConfig {
            n_cubes: 1,
            horizon: 10,
            ..EnvConfig::default()
        };
        let enc_cfg = EncoderConfig {
            d: 8,
            d_z: 6,
            g_hidden: 8,
            tokenizer_hidden: 8,
            ..EncoderConfig::default()
        };
        let hyper = PpoHyper {
            rollout_steps: 20,
            n_envs: 2,
            minibatches: 4,
            epochs: 2,
            ..PpoHyper::default()
        };
        Trainer::new(
            env_cfg,
            RewardConfig::default(),
            enc_cfg,
            hyper,
            TrainerSettings {
                total_steps: 400,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn update_advances_counters_and_collects_episodes() {
        let mut t = tiny_trainer(0);
        let u = t.update().unwrap();
        assert_eq!(u.steps_collected, 40);
        assert_eq!(t.global_step, 40);
        assert_eq!(t.update_index, 1);
        assert_eq!(u.episodes, 4, "2 envs x 20 steps / horizon 10");
        assert_eq!(u.lr, t.hyper.learning_rate, "first update at lr0");
    }

    #[test]
    fn training_is_bit_identical_across_runs() {
        let run = || {
            let mut t = tiny_trainer(42);
            for _ in 0..3 {
                t.update().unwrap();
            }
            t.model
                .store
                .values()
                .iter()
                .flat_map(|a| a.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learning_rate_decays_linearly_with_steps() {
        let mut t = tiny_trainer(1);
        let lr0 = t.current_lr();
        t.update().unwrap();
        let lr1 = t.current_lr();
        assert!((lr0 - t.hyper.learning_rate).abs() < 1e-18);
        let expect = t.hyper.learning_rate * (1.0 - 40.0 / 400.0);
        assert!((lr1 - expect).abs() < 1e-18);
    }
}
