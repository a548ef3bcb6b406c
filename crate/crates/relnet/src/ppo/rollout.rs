//! Rollout collection into trajectory batches.

use rand::Rng;
use thiserror::Error;

use crate::diffmath::Scalar;
use crate::env::{Env, EnvError, ObjectFeatures};

use super::model::{PolicyError, PolicyModel};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("environment {index}: {source}")]
    Env {
        index: usize,
        #[source]
        source: EnvError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One recorded transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: ObjectFeatures,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// A finished episode's summary.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStat {
    pub total_reward: f64,
    pub length: u32,
    /// Fractional target-goal overlap at the final step.
    pub final_rho: f64,
}

/// Per-env contiguous step sequence plus the bootstrap value of the state
/// after the last step.
#[derive(Debug, Clone)]
pub struct EnvTrajectory {
    pub steps: Vec<Transition>,
    pub bootstrap: f64,
}

/// Rollout storage across parallel environments.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub envs: Vec<EnvTrajectory>,
    pub episodes: Vec<EpisodeStat>,
}

impl TrajectoryBatch {
    pub fn transitions(&self) -> usize {
        self.envs.iter().map(|e| e.steps.len()).sum()
    }
}

/// Roll every environment forward `steps_per_env` steps under the stochastic
/// policy, auto-resetting on episode end. Behavior log-probabilities are
/// recorded at sampling time; every finished episode contributes a success
/// record.
pub fn collect_rollouts<T: Scalar, R: Rng + ?Sized>(
    model: &PolicyModel<T>,
    envs: &mut [Env],
    steps_per_env: usize,
    rng: &mut R,
) -> Result<TrajectoryBatch, RolloutError> {
    let mut batch = TrajectoryBatch::default();
    for (index, env) in envs.iter_mut().enumerate() {
        let wrap = |source: EnvError| RolloutError::Env { index, source };
        let mut steps = Vec::with_capacity(steps_per_env);
        let mut episode_reward = 0.0;
        let mut episode_len = 0u32;
        for _ in 0..steps_per_env {
            let obs = env.observe();
            let sample = model.act(&obs, rng)?;
            let clamped: Vec<f64> = sample.action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            let out = env.step(&clamped).map_err(wrap)?;
            episode_reward += out.reward;
            episode_len += 1;
            steps.push(Transition {
                obs,
                action: sample.action,
                log_prob: sample.log_prob,
                reward: out.reward,
                value: sample.value,
                done: out.done,
            });
            if out.done {
                batch.episodes.push(EpisodeStat {
                    total_reward: episode_reward,
                    length: episode_len,
                    final_rho: env.success().map_err(wrap)?,
                });
                episode_reward = 0.0;
                episode_len = 0;
                env.reset().map_err(wrap)?;
            }
        }
        let bootstrap = model.act_deterministic(&env.observe())?.value;
        batch.envs.push(EnvTrajectory { steps, bootstrap });
    }
    Ok(batch)
}
