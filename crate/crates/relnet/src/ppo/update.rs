//! The clipped-surrogate PPO update.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::diffmath::{clip_global_norm, AdamState, Scalar, Tape, Var};

use super::model::{PolicyError, PolicyModel};
use super::rollout::{TrajectoryBatch, Transition};
use super::{gae, PpoHyper};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("non-finite loss during PPO update; diagnostics: {diagnostics}")]
    NonFiniteLoss { diagnostics: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("empty trajectory batch")]
    EmptyBatch,
}

/// Mean optimization diagnostics over one update's minibatches.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

struct FlatSample<'a> {
    transition: &'a Transition,
    advantage: f64,
    ret: f64,
}

/// Flatten a batch into per-transition (advantage, return) samples, with
/// advantages optionally normalized over the whole update batch.
fn flatten<'a>(batch: &'a TrajectoryBatch, hyper: &PpoHyper) -> Vec<FlatSample<'a>> {
    let mut flat = Vec::with_capacity(batch.transitions());
    for env in &batch.envs {
        let rewards: Vec<f64> = env.steps.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = env.steps.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = env.steps.iter().map(|t| t.done).collect();
        let (adv, ret) = gae(
            &rewards,
            &values,
            &dones,
            env.bootstrap,
            hyper.discount,
            hyper.gae_lambda,
        );
        for (i, t) in env.steps.iter().enumerate() {
            flat.push(FlatSample {
                transition: t,
                advantage: adv[i],
                ret: ret[i],
            });
        }
    }
    if hyper.advantage_norm && !flat.is_empty() {
        let n = flat.len() as f64;
        let mean = flat.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = flat
            .iter()
            .map(|s| (s.advantage - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt() + 1e-8;
        for s in flat.iter_mut() {
            s.advantage = (s.advantage - mean) / std;
        }
    }
    flat
}

struct MinibatchEval {
    loss: Var,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    clipped: usize,
    kl_sum: f64,
}

/// Build the PPO loss for one minibatch on `tape`. Returns the scalar loss
/// node; the caller runs backward and steps the optimizer.
fn minibatch_loss<T: Scalar>(
    model: &PolicyModel<T>,
    tape: &mut Tape<T>,
    samples: &[&FlatSample<'_>],
    hyper: &PpoHyper,
) -> Result<(MinibatchEval, crate::diffmath::Bound), UpdateError> {
    let bound = tape.bind(&model.store);
    let a_dim = model.action_dim() as f64;
    let log_std = model.log_std_var(tape, &bound);
    let neg_log_std = tape.neg(log_std);
    let inv_std = tape.exp(neg_log_std);
    let sum_log_std = tape.sum_all(log_std);
    let entropy = tape.add_scalar(sum_log_std, T::from_f64(a_dim * 0.5 * (1.0 + LN_2PI)));

    let mut surr_sum: Option<Var> = None;
    let mut vloss_sum: Option<Var> = None;
    let mut clipped = 0usize;
    let mut kl_sum = 0.0;
    let clip = hyper.clip_ratio;

    for sample in samples {
        let t = sample.transition;
        let out = model.forward(tape, &bound, &t.obs)?;

        // log-probability of the behavior action under current parameters
        let action = tape.leaf(crate::diffmath::Array::from_vec(
            vec![1, t.action.len()],
            t.action.iter().map(|&a| T::from_f64(a)).collect(),
        ));
        let diff = tape.sub(action, out.mean);
        let z = tape.mul(diff, inv_std);
        let zsq = tape.mul(z, z);
        let ssq = tape.sum_all(zsq);
        let half = tape.scale(ssq, T::from_f64(-0.5));
        let partial = tape.sub(half, sum_log_std);
        let log_prob = tape.add_scalar(partial, T::from_f64(-0.5 * a_dim * LN_2PI));

        // clipped surrogate
        let shifted = tape.add_scalar(log_prob, T::from_f64(-t.log_prob));
        let ratio = tape.exp(shifted);
        let adv = T::from_f64(sample.advantage);
        let surr1 = tape.scale(ratio, adv);
        let ratio_clipped = tape.clamp(ratio, T::from_f64(1.0 - clip), T::from_f64(1.0 + clip));
        let surr2 = tape.scale(ratio_clipped, adv);
        let surr = tape.minimum(surr1, surr2);
        surr_sum = Some(match surr_sum {
            Some(acc) => tape.add(acc, surr),
            None => surr,
        });

        // value loss, optionally clipped around the behavior value
        let vterm = match hyper.value_clip {
            None => {
                let verr = tape.add_scalar(out.value, T::from_f64(-sample.ret));
                tape.mul(verr, verr)
            }
            Some(vclip) => {
                let verr = tape.add_scalar(out.value, T::from_f64(-sample.ret));
                let unclipped = tape.mul(verr, verr);
                let vdiff = tape.add_scalar(out.value, T::from_f64(-t.value));
                let vdiff_c = tape.clamp(vdiff, T::from_f64(-vclip), T::from_f64(vclip));
                let vc = tape.add_scalar(vdiff_c, T::from_f64(t.value));
                let verr_c = tape.add_scalar(vc, T::from_f64(-sample.ret));
                let clipped_sq = tape.mul(verr_c, verr_c);
                // max(a, b) = -min(-a, -b)
                let na = tape.neg(unclipped);
                let nb = tape.neg(clipped_sq);
                let mn = tape.minimum(na, nb);
                tape.neg(mn)
            }
        };
        vloss_sum = Some(match vloss_sum {
            Some(acc) => tape.add(acc, vterm),
            None => vterm,
        });

        let ratio_val = Scalar::to_f64(tape.value(ratio).item());
        if (ratio_val - 1.0).abs() > clip {
            clipped += 1;
        }
        kl_sum += t.log_prob - Scalar::to_f64(tape.value(log_prob).item());
    }

    let inv_b = T::from_f64(1.0 / samples.len() as f64);
    let surr_sum = surr_sum.ok_or(UpdateError::EmptyBatch)?;
    let vloss_sum = vloss_sum.unwrap();
    let neg_inv_b = tape.scale(surr_sum, inv_b);
    let policy_loss = tape.neg(neg_inv_b);
    let value_loss = tape.scale(vloss_sum, inv_b);
    let value_scaled = tape.scale(value_loss, T::from_f64(hyper.value_coef));
    let ent_scaled = tape.scale(entropy, T::from_f64(-hyper.entropy_coef));
    let pv = tape.add(policy_loss, value_scaled);
    let loss = tape.add(pv, ent_scaled);

    let eval = MinibatchEval {
        loss,
        policy_loss: Scalar::to_f64(tape.value(policy_loss).item()),
        value_loss: Scalar::to_f64(tape.value(value_loss).item()),
        entropy: Scalar::to_f64(tape.value(entropy).item()),
        clipped,
        kl_sum,
    };
    Ok((eval, bound))
}

/// Run the full PPO update: `epochs` passes over the batch, each split into
/// `minibatches` shuffled minibatches; per minibatch the clipped-surrogate
/// loss is backpropagated, gradients are clipped at the global norm, and one
/// Adam step is taken at the given learning rate.
pub fn ppo_update<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    batch: &TrajectoryBatch,
    hyper: &PpoHyper,
    adam: &mut AdamState<T>,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats, UpdateError> {
    let flat = flatten(batch, hyper);
    if flat.is_empty() {
        return Err(UpdateError::EmptyBatch);
    }
    let mut indices: Vec<usize> = (0..flat.len()).collect();
    let mut stats = UpdateStats::default();
    let mut sample_count = 0usize;
    let mut tape = Tape::new();

    for _epoch in 0..hyper.epochs {
        indices.shuffle(rng);
        for part in split_minibatches(&indices, hyper.minibatches) {
            let samples: Vec<&FlatSample> = part.iter().map(|&i| &flat[i]).collect();
            tape.reset();
            let (eval, bound) = minibatch_loss(model, &mut tape, &samples, hyper)?;
            let loss_val = Scalar::to_f64(tape.value(eval.loss).item());
            if !loss_val.is_finite() {
                return Err(UpdateError::NonFiniteLoss {
                    diagnostics: format!(
                        "loss={loss_val} policy={} value={} entropy={} minibatch_size={} lr={lr}",
                        eval.policy_loss,
                        eval.value_loss,
                        eval.entropy,
                        samples.len()
                    ),
                });
            }
            tape.backward(eval.loss);
            let mut grads = tape.param_grads(&bound);
            let norm = clip_global_norm(&mut grads, T::from_f64(hyper.grad_clip));
            adam.step(&mut model.store, &grads, T::from_f64(lr));

            stats.policy_loss += eval.policy_loss;
            stats.value_loss += eval.value_loss;
            stats.entropy += eval.entropy;
            stats.grad_norm += Scalar::to_f64(norm);
            stats.clip_fraction += eval.clipped as f64;
            stats.approx_kl += eval.kl_sum;
            stats.minibatches += 1;
            sample_count += samples.len();
        }
    }

    let m = stats.minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.grad_norm /= m;
    stats.clip_fraction /= sample_count as f64;
    stats.approx_kl /= sample_count as f64;
    Ok(stats)
}

/// Split indices into at most `parts` chunks of near-equal size (no empties).
fn split_minibatches(indices: &[usize], parts: usize) -> Vec<&[usize]> {
    let n = indices.len();
    let parts = parts.min(n).max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&indices[start..start + len]);
        start += len;
    }
    out
}
