//! The agent model: shared tokenizer + encoder trunk with a Gaussian policy
//! head and a value head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::diffmath::{Array, Bound, Mlp, ParamId, ParamStore, Scalar, Tape, Var};
use crate::encoders::{EncodeError, Encoder, EncoderConfig, Representation};
use crate::env::ObjectFeatures;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("non-finite {what} in policy forward pass")]
    NonFinite { what: &'static str },
}

/// One sampled (or deterministic) action with its behavior statistics.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub mean: Vec<f64>,
}

/// Forward-pass handles for loss construction.
pub struct PolicyOutput {
    pub mean: Var,
    pub value: Var,
    pub repr: Representation,
}

/// Policy + value model over one parameter store.
///
/// The struct holds parameter indices only; it can run against the `f32`
/// training store or an `f64` cast of it (gradient checks) interchangeably.
pub struct PolicyModel<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pi_head: Mlp,
    vf_head: Mlp,
    log_std: ParamId,
    action_dim: usize,
}

impl<T: Scalar> PolicyModel<T> {
    /// Heads are 2-layer MLPs with hidden width 128 and tanh.
    pub fn new(
        encoder_cfg: EncoderConfig,
        action_dim: usize,
        init_log_std: f64,
        seed: u64,
    ) -> Result<Self, EncodeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(encoder_cfg.clone(), &mut store, &mut rng)?;
        let pi_head = Mlp::new(&mut store, "pi", &[encoder_cfg.d_z, 128, action_dim], &mut rng);
        let vf_head = Mlp::new(&mut store, "vf", &[encoder_cfg.d_z, 128, 1], &mut rng);
        let log_std = store.add(
            "pi.log_std",
            Array::from_vec(vec![action_dim], vec![T::from_f64(init_log_std); action_dim]),
        );
        Ok(PolicyModel {
            store,
            encoder,
            pi_head,
            vf_head,
            log_std,
            action_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Clamped log-std leaf on the given tape.
    pub fn log_std_var(&self, tape: &mut Tape<T>, bound: &Bound) -> Var {
        tape.clamp(
            bound.var(self.log_std),
            T::from_f64(LOG_STD_MIN),
            T::from_f64(LOG_STD_MAX),
        )
    }

    /// Current clamped log-std values.
    pub fn log_std_values(&self) -> Vec<f64> {
        self.store
            .get(self.log_std)
            .data()
            .iter()
            .map(|&v| Scalar::to_f64(v).clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    /// Policy entropy: sum_k(log_std_k) + A/2 * (1 + ln(2 pi)).
    pub fn entropy(&self) -> f64 {
        let sum: f64 = self.log_std_values().iter().sum();
        sum + self.action_dim as f64 * 0.5 * (1.0 + LN_2PI)
    }

    /// Full differentiable forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        obs: &ObjectFeatures,
    ) -> Result<PolicyOutput, PolicyError> {
        let repr = self.encoder.forward(tape, bound, obs)?;
        let mean = self.pi_head.forward(tape, bound, repr.z);
        let value = self.vf_head.forward(tape, bound, repr.z);
        if !tape.value(mean).all_finite() {
            return Err(PolicyError::NonFinite { what: "action mean" });
        }
        if !tape.value(value).all_finite() {
            return Err(PolicyError::NonFinite { what: "value" });
        }
        Ok(PolicyOutput { mean, value, repr })
    }

    /// Sample an action from the diagonal Gaussian. The log-probability is
    /// computed before any clamping by the environment.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &ObjectFeatures,
        rng: &mut R,
    ) -> Result<ActionSample, PolicyError> {
        self.act_inner(obs, Some(rng))
    }

    /// Deterministic mode: the Gaussian mean.
    pub fn act_deterministic(&self, obs: &ObjectFeatures) -> Result<ActionSample, PolicyError> {
        self.act_inner::<ChaCha8Rng>(obs, None)
    }

    fn act_inner<R: Rng + ?Sized>(
        &self,
        obs: &ObjectFeatures,
        rng: Option<&mut R>,
    ) -> Result<ActionSample, PolicyError> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.store);
        let out = self.forward(&mut tape, &bound, obs)?;
        let mean: Vec<f64> = tape
            .value(out.mean)
            .data()
            .iter()
            .map(|&v| Scalar::to_f64(v))
            .collect();
        let value = Scalar::to_f64(tape.value(out.value).item());
        let log_std = self.log_std_values();

        let action: Vec<f64> = match rng {
            Some(rng) => mean
                .iter()
                .zip(&log_std)
                .map(|(&m, &ls)| m + ls.exp() * Scalar::to_f64(f64::standard_normal(rng)))
                .collect(),
            None => mean.clone(),
        };
        let log_prob = gaussian_log_prob(&action, &mean, &log_std);
        if !log_prob.is_finite() {
            return Err(PolicyError::NonFinite { what: "log-probability" });
        }
        Ok(ActionSample {
            action,
            log_prob,
            value,
            mean,
        })
    }

    /// Lift the model into another precision (for gradient checks).
    /// Parameter ids are store indices and stay valid because the cast
    /// preserves order.
    pub fn cast<U: Scalar>(&self) -> PolicyModel<U> {
        PolicyModel {
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            pi_head: self.pi_head.clone(),
            vf_head: self.vf_head.clone(),
            log_std: self.log_std,
            action_dim: self.action_dim,
        }
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((a, m), ls) in action.iter().zip(mean).zip(log_std) {
        let z = (a - m) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
    }
    lp
}
