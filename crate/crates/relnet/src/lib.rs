//! Object-set encoders with relational inductive bias, trained with PPO on a
//! planar multi-object transport task.
//!
//! The library is organized around six subsystems:
//!
//! - [`diffmath`] — dense arrays, reverse-mode differentiation, Adam.
//! - [`encoders`] — tokenizers and the LRN / RN / ATTN / no-relation
//!   set encoders producing a fixed-size representation from variable-size
//!   object sets.
//! - [`env`] — the planar transport environment: disc effectors push square
//!   objects; one episode-specific object must reach a goal pose.
//! - [`ppo`] — goal-conditioned actor-critic training.
//! - [`harness`] — evaluation, zero-shot object-count sweeps, ablation
//!   enumeration, diagnostics export, and the relation-scaling benchmark.
//! - [`cli`] — experiment configs, checkpoints, metrics, and the `relnet`
//!   command-line entry points.
//!
//! See the crate examples for one runnable program per capability.

pub mod diffmath;
pub mod encoders;
pub mod env;
pub mod ppo;
