//! Object-set encoders.
//!
//! A scene observation is tokenized by object-type-specific MLPs into
//! fixed-width tokens, one per entity, plus a distinguished goal token. An
//! encoder then reduces the variable-size token set to a fixed-size
//! representation `z`:
//!
//! - `LRN`: one relation per object, against the goal token only —
//!   `z = LayerNorm(f(sum_i g([o_i; o_g])))`, K relation evaluations.
//! - `RN`: all pairs over the K+1 elements (objects plus goal, self-pairs
//!   included) — (K+1)^2 evaluations.
//! - `ATTN`: one multi-head dot-product attention pass over the K+1 tokens,
//!   then the same sum / f / LayerNorm reduction — (K+1)^2 scored pairs.
//! - `NO_RELATION`: the single-object ablation, `g(o_i)` over the K+1
//!   elements with the goal fed through as an ordinary set element.
//!
//! All variants are permutation invariant in the object tokens because the
//! only cross-token reduction is a sum. Relation evaluations are counted on
//! an instrumented counter so complexity claims can be asserted exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{Array, Bound, Linear, Mlp, ParamStore, Scalar, Tape, Var};
use crate::env::{FeatureRole, ObjectFeatures, CUBE_FEATURES, EFFECTOR_FEATURES, GOAL_FEATURES};

/// Epsilon inside the representation layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which object-reasoning encoder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "LRN")]
    Lrn,
    #[serde(rename = "RN")]
    Rn,
    #[serde(rename = "ATTN")]
    Attn,
    #[serde(rename = "NO_RELATION")]
    NoRelation,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::Lrn,
        EncoderKind::Rn,
        EncoderKind::Attn,
        EncoderKind::NoRelation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Lrn => "LRN",
            EncoderKind::Rn => "RN",
            EncoderKind::Attn => "ATTN",
            EncoderKind::NoRelation => "NO_RELATION",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EncodeError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LRN" => Ok(EncoderKind::Lrn),
            "RN" => Ok(EncoderKind::Rn),
            "ATTN" => Ok(EncoderKind::Attn),
            "NO_RELATION" | "NORELATION" => Ok(EncoderKind::NoRelation),
            other => Err(EncodeError::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

/// How relations are reduced to the representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `LayerNorm(f(sum))` — keeps z's statistics independent of K.
    #[default]
    LayerNormSum,
    /// `f(mean)` with no normalization (ablation).
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Token width d.
    pub d: usize,
    /// Representation width d_z.
    pub d_z: usize,
    /// Hidden width of the relation MLP g.
    pub g_hidden: usize,
    /// Total layer count of g (4 = three hidden layers plus output).
    pub g_layers: usize,
    /// Hidden width of the per-type tokenizer MLPs (2 layers).
    pub tokenizer_hidden: usize,
    /// Attention heads (ATTN only); must divide d.
    pub heads: usize,
    pub aggregation: Aggregation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Lrn,
            d: 64,
            d_z: 25,
            g_hidden: 64,
            g_layers: 4,
            tokenizer_hidden: 64,
            heads: 2,
            aggregation: Aggregation::LayerNormSum,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.d_z == 0 {
            return Err("encoder.d and encoder.d_z must be >= 1".into());
        }
        if self.g_layers < 1 {
            return Err("encoder.g_layers must be >= 1".into());
        }
        if self.kind == EncoderKind::Attn {
            if self.heads == 0 {
                return Err("encoder.heads must be >= 1".into());
            }
            if self.d % self.heads != 0 {
                return Err(format!(
                    "encoder.d = {} is not divisible by encoder.heads = {}",
                    self.d, self.heads
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("{role} feature vector has {got} values, expected {want}")]
    FeatureWidth {
        role: &'static str,
        got: usize,
        want: usize,
    },
    #[error("observation contains no goal entry")]
    MissingGoal,
    #[error("observation contains {0} goal entries, expected exactly 1")]
    MultipleGoals(usize),
    #[error("observation contains no object entries (K must be >= 1)")]
    NoObjects,
    #[error("encoder configuration error: {0}")]
    Config(String),
}

/// Role tag of one object token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Cube { target: bool },
    Effector { index: usize },
}

/// Role tag of one relation embedding, for diagnostics.
///
/// RN pairs are classified by their first element; pairs whose first element
/// is the goal are classified by the second, and the goal-goal self-pair
/// counts as a target relation (the goal token carries the target's
/// identifier). This assigns every relation exactly one of the three roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationRole {
    TargetGoal,
    DistractorGoal,
    EffectorGoal(usize),
}

impl RelationRole {
    fn of_token(role: TokenRole) -> Self {
        match role {
            TokenRole::Cube { target: true } => RelationRole::TargetGoal,
            TokenRole::Cube { target: false } => RelationRole::DistractorGoal,
            TokenRole::Effector { index } => RelationRole::EffectorGoal(index),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RelationRole::TargetGoal => "target".into(),
            RelationRole::DistractorGoal => "distractor".into(),
            RelationRole::EffectorGoal(i) => format!("effector{i}"),
        }
    }
}

/// Tokenized observation: K object tokens plus one goal token, all width d.
#[derive(Debug)]
pub struct TokenSet {
    /// K x d matrix of object tokens.
    pub tokens: Var,
    /// 1 x d goal token.
    pub goal: Var,
    pub roles: Vec<TokenRole>,
}

impl TokenSet {
    /// Wrap pre-built token arrays (benchmarks, direct encoder tests).
    pub fn from_arrays<T: Scalar>(
        tape: &mut Tape<T>,
        tokens: Array<T>,
        goal: Array<T>,
        roles: Vec<TokenRole>,
    ) -> Self {
        assert_eq!(tokens.rows(), roles.len(), "one role per token row");
        TokenSet {
            tokens: tape.leaf(tokens),
            goal: tape.leaf(goal),
            roles,
        }
    }

    pub fn k(&self) -> usize {
        self.roles.len()
    }
}

/// Encoder output: the representation plus optional diagnostics.
pub struct Representation {
    /// z, width d_z. With layer-norm aggregation its mean is 0.
    pub z: Var,
    /// Relation embeddings, one row per relation (LRN / RN / NO_RELATION).
    pub relations: Option<Var>,
    /// Role tag per relation row.
    pub relation_roles: Vec<RelationRole>,
    /// The attention output node (ATTN); weights via [`Tape::mhdpa_weights`].
    pub attention: Option<Var>,
}

/// Tokenizers plus one object-reasoning encoder.
///
/// Holds parameter indices only, so the same encoder drives an `f32` store
/// for training and an `f64` cast of it for gradient checking. Forward passes
/// are pure functions of (store, input); the evaluation counter is the only
/// interior state.
pub struct Encoder {
    cfg: EncoderConfig,
    tok_cube: Mlp,
    tok_goal: Mlp,
    tok_effector: Mlp,
    g: Option<Mlp>,
    attn: Option<AttnProjections>,
    f: Linear,
    evals: AtomicU64,
}

#[derive(Clone)]
struct AttnProjections {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl Clone for Encoder {
    /// Structural clone: same parameter indices, fresh evaluation counter.
    fn clone(&self) -> Self {
        Encoder {
            cfg: self.cfg.clone(),
            tok_cube: self.tok_cube.clone(),
            tok_goal: self.tok_goal.clone(),
            tok_effector: self.tok_effector.clone(),
            g: self.g.clone(),
            attn: self.attn.clone(),
            f: self.f.clone(),
            evals: AtomicU64::new(0),
        }
    }
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, EncodeError> {
        cfg.validate().map_err(EncodeError::Config)?;
        let th = cfg.tokenizer_hidden;
        let tok_cube = Mlp::new(store, "tok.cube", &[CUBE_FEATURES, th, cfg.d], rng);
        let tok_goal = Mlp::new(store, "tok.goal", &[GOAL_FEATURES, th, cfg.d], rng);
        let tok_effector = Mlp::new(store, "tok.effector", &[EFFECTOR_FEATURES, th, cfg.d], rng);

        let mut g = None;
        let mut attn = None;
        match cfg.kind {
            EncoderKind::Lrn | EncoderKind::Rn => {
                g = Some(Self::relation_mlp(&cfg, 2 * cfg.d, store, rng));
            }
            EncoderKind::NoRelation => {
                g = Some(Self::relation_mlp(&cfg, cfg.d, store, rng));
            }
            EncoderKind::Attn => {
                attn = Some(AttnProjections {
                    q: Linear::new(store, "attn.q", cfg.d, cfg.d, rng),
                    k: Linear::new(store, "attn.k", cfg.d, cfg.d, rng),
                    v: Linear::new(store, "attn.v", cfg.d, cfg.d, rng),
                });
            }
        }
        let f = Linear::new(store, "f", cfg.d, cfg.d_z, rng);
        Ok(Encoder {
            cfg,
            tok_cube,
            tok_goal,
            tok_effector,
            g,
            attn,
            f,
            evals: AtomicU64::new(0),
        })
    }

    fn relation_mlp<T: Scalar, R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        in_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Mlp {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.g_hidden).take(cfg.g_layers - 1));
        dims.push(cfg.d);
        Mlp::new(store, "g", &dims, rng)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Relation (or attention-score) evaluations since the last reset.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// How many relation evaluations (or scored pairs) `kind` performs on a
    /// K-object set.
    pub fn relation_count(kind: EncoderKind, k: usize) -> u64 {
        let k = k as u64;
        match kind {
            EncoderKind::Lrn => k,
            EncoderKind::NoRelation => k + 1,
            EncoderKind::Rn | EncoderKind::Attn => (k + 1) * (k + 1),
        }
    }

    /// Tokenize an observation set: one token per entity, width d. The same
    /// entity features always map to the same token.
    pub fn tokenize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        obs: &ObjectFeatures,
    ) -> Result<TokenSet, EncodeError> {
        let mut cube_rows: Vec<f64> = Vec::new();
        let mut cube_roles: Vec<TokenRole> = Vec::new();
        let mut eff_rows: Vec<f64> = Vec::new();
        let mut eff_roles: Vec<TokenRole> = Vec::new();
        let mut goal_row: Option<Vec<f64>> = None;
        let mut goal_count = 0usize;

        for item in &obs.items {
            match item.role {
                FeatureRole::Cube { target } => {
                    check_width("cube", &item.values, CUBE_FEATURES)?;
                    cube_rows.extend_from_slice(&item.values);
                    cube_roles.push(TokenRole::Cube { target });
                }
                FeatureRole::Effector { index } => {
                    check_width("effector", &item.values, EFFECTOR_FEATURES)?;
                    eff_rows.extend_from_slice(&item.values);
                    eff_roles.push(TokenRole::Effector { index });
                }
                FeatureRole::Goal => {
                    check_width("goal", &item.values, GOAL_FEATURES)?;
                    goal_count += 1;
                    goal_row = Some(item.values.clone());
                }
            }
        }
        if goal_count == 0 {
            return Err(EncodeError::MissingGoal);
        }
        if goal_count > 1 {
            return Err(EncodeError::MultipleGoals(goal_count));
        }
        if cube_roles.is_empty() && eff_roles.is_empty() {
            return Err(EncodeError::NoObjects);
        }

        let mut parts: Vec<Var> = Vec::new();
        let mut roles: Vec<TokenRole> = Vec::new();
        if !cube_roles.is_empty() {
            let x = tape.leaf(to_matrix(cube_roles.len(), CUBE_FEATURES, &cube_rows));
            parts.push(self.tok_cube.forward(tape, bound, x));
            roles.extend(cube_roles);
        }
        if !eff_roles.is_empty() {
            let x = tape.leaf(to_matrix(eff_roles.len(), EFFECTOR_FEATURES, &eff_rows));
            parts.push(self.tok_effector.forward(tape, bound, x));
            roles.extend(eff_roles);
        }
        let tokens = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let gx = tape.leaf(to_matrix(1, GOAL_FEATURES, goal_row.as_ref().unwrap()));
        let goal = self.tok_goal.forward(tape, bound, gx);
        Ok(TokenSet { tokens, goal, roles })
    }

    /// Encode a token set to a representation, per the configured kind.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        ts: &TokenSet,
    ) -> Representation {
        let k = ts.k();
        assert!(k >= 1, "encode requires K >= 1");
        match self.cfg.kind {
            EncoderKind::Lrn => {
                let goal_rep = tape.repeat_row(ts.goal, k);
                let rel_in = tape.concat_cols(ts.tokens, goal_rep);
                let relations = self.g.as_ref().unwrap().forward(tape, bound, rel_in);
                self.evals.fetch_add(k as u64, Ordering::Relaxed);
                let roles = ts.roles.iter().map(|&r| RelationRole::of_token(r)).collect();
                Representation {
                    z: self.aggregate(tape, bound, relations),
                    relations: Some(relations),
                    relation_roles: roles,
                    attention: None,
                }
            }
            EncoderKind::NoRelation => {
                let all = tape.concat_rows(&[ts.tokens, ts.goal]);
                let relations = self.g.as_ref().unwrap().forward(tape, bound, all);
                self.evals.fetch_add(k as u64 + 1, Ordering::Relaxed);
                let mut roles: Vec<RelationRole> =
                    ts.roles.iter().map(|&r| RelationRole::of_token(r)).collect();
                roles.push(RelationRole::TargetGoal); // the goal element itself
                Representation {
                    z: self.aggregate(tape, bound, relations),
                    relations: Some(relations),
                    relation_roles: roles,
                    attention: None,
                }
            }
            EncoderKind::Rn => {
                let all = tape.concat_rows(&[ts.tokens, ts.goal]);
                let n = k + 1;
                let left = tape.repeat_rows_each(all, n);
                let right = tape.tile_rows(all, n);
                let rel_in = tape.concat_cols(left, right);
                let relations = self.g.as_ref().unwrap().forward(tape, bound, rel_in);
                self.evals.fetch_add((n * n) as u64, Ordering::Relaxed);
                let elem_role = |idx: usize| -> Option<RelationRole> {
                    if idx < k {
                        Some(RelationRole::of_token(ts.roles[idx]))
                    } else {
                        None // the goal element
                    }
                };
                let mut roles = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let role = elem_role(i)
                            .or_else(|| elem_role(j))
                            .unwrap_or(RelationRole::TargetGoal);
                        roles.push(role);
                    }
                }
                Representation {
                    z: self.aggregate(tape, bound, relations),
                    relations: Some(relations),
                    relation_roles: roles,
                    attention: None,
                }
            }
            EncoderKind::Attn => {
                let proj = self.attn.as_ref().unwrap();
                let all = tape.concat_rows(&[ts.tokens, ts.goal]);
                let q = proj.q.forward(tape, bound, all);
                let key = proj.k.forward(tape, bound, all);
                let v = proj.v.forward(tape, bound, all);
                let attended = tape.mhdpa(q, key, v, self.cfg.heads);
                let n = (k + 1) as u64;
                self.evals.fetch_add(n * n, Ordering::Relaxed);
                Representation {
                    z: self.aggregate(tape, bound, attended),
                    relations: None,
                    relation_roles: Vec::new(),
                    attention: Some(attended),
                }
            }
        }
    }

    /// Tokenize then encode.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        obs: &ObjectFeatures,
    ) -> Result<Representation, EncodeError> {
        let ts = self.tokenize(tape, bound, obs)?;
        Ok(self.encode(tape, bound, &ts))
    }

    /// Reduce a K x d relation matrix to z under the configured aggregation.
    pub fn aggregate<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, relations: Var) -> Var {
        match self.cfg.aggregation {
            Aggregation::LayerNormSum => {
                let summed = tape.sum_rows(relations);
                let projected = self.f.forward(tape, bound, summed);
                tape.layer_norm(projected, T::from_f64(LAYER_NORM_EPS))
            }
            Aggregation::Mean => {
                let mean = tape.mean_rows(relations);
                self.f.forward(tape, bound, mean)
            }
        }
    }
}

fn check_width(role: &'static str, values: &[f64], want: usize) -> Result<(), EncodeError> {
    if values.len() != want {
        return Err(EncodeError::FeatureWidth {
            role,
            got: values.len(),
            want,
        });
    }
    Ok(())
}

fn to_matrix<T: Scalar>(rows: usize, cols: usize, data: &[f64]) -> Array<T> {
    Array::from_vec(
        vec![rows, cols],
        data.iter().map(|&v| T::from_f64(v)).collect(),
    )
}
