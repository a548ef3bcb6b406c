//! Planar multi-object transport environment.
//!
//! A square arena holds `n_cubes` axis-aligned square objects and a set of
//! disc effectors driven by velocity commands. One episode-specific cube must
//! be pushed onto a goal square; the remaining cubes are distractors. The
//! observation is a set of per-entity feature vectors (cube 18, goal 12,
//! effector 10 values) with planar fields degenerate: third position
//! coordinate 0, orientation the identity quaternion, angular velocity 0.
//!
//! Cubes do not rotate. Contact is resolved kinematically: effectors push
//! cubes out along the contact normal, cube pairs separate along the axis of
//! minimum overlap, walls clamp positions.

pub mod replay;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feature widths from the per-object state layout.
pub const CUBE_FEATURES: usize = 18;
pub const GOAL_FEATURES: usize = 12;
pub const EFFECTOR_FEATURES: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(
        "failed to place {n_cubes} cubes of side {cube_side} in a {arena_size}x{arena_size} arena after {attempts} attempts"
    )]
    Placement {
        n_cubes: usize,
        cube_side: f64,
        arena_size: f64,
        attempts: u32,
    },
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("success() requires a terminal state (step {step} of {horizon})")]
    NotTerminal { step: u32, horizon: u32 },
}

/// Geometry and episode parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Total cube count N_o (distractors = N_o - 1).
    pub n_cubes: usize,
    /// Episode length in steps.
    pub horizon: u32,
    /// Arena side length; positions live in [0, arena_size]^2.
    pub arena_size: f64,
    pub cube_side: f64,
    pub effector_radius: f64,
    pub n_effectors: usize,
    /// Maximum effector displacement per step; actions scale into this.
    pub action_scale: f64,
    /// Contact-resolution substeps per step.
    pub substeps: u32,
    /// Rejection-sampling budget per cube at reset.
    pub max_place_attempts: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_cubes: 3,
            horizon: 300,
            arena_size: 1.0,
            cube_side: 0.16,
            effector_radius: 0.05,
            n_effectors: 3,
            action_scale: 0.08,
            substeps: 4,
            max_place_attempts: 1000,
        }
    }
}

impl EnvConfig {
    pub fn action_dim(&self) -> usize {
        2 * self.n_effectors
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_cubes < 1 {
            return Err("env.n_cubes must be >= 1".into());
        }
        if self.horizon < 1 {
            return Err("env.horizon must be >= 1".into());
        }
        if self.n_effectors < 1 {
            return Err("env.n_effectors must be >= 1".into());
        }
        if !(self.cube_side > 0.0 && self.cube_side < self.arena_size) {
            return Err("env.cube_side must be in (0, arena_size)".into());
        }
        if self.substeps < 1 {
            return Err("env.substeps must be >= 1".into());
        }
        if !(self.action_scale > 0.0) {
            return Err("env.action_scale must be positive".into());
        }
        Ok(())
    }
}

/// Which sign convention the distance reward term uses.
///
/// The composite reward's printed distance term rewards moving *away* from
/// the goal, contradicting the accompanying description; the default follows
/// the description and rewards decreasing distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSign {
    #[default]
    RewardDecrease,
    PaperPrinted,
}

/// Composite reward weights and term switches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta: f64,
    pub sparse: bool,
    pub distance: bool,
    pub curiosity: bool,
    pub distance_sign: DistanceSign,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha1: 100.0,
            alpha2: 250.0,
            alpha3: 10.0,
            beta: 0.05,
            sparse: true,
            distance: true,
            curiosity: true,
            distance_sign: DistanceSign::RewardDecrease,
        }
    }
}

/// Value of each reward term for one transition (before the enable flags
/// zero them out of the total).
#[derive(Debug, Clone, Copy, Default)]
pub struct RewardTerms {
    pub sparse: f64,
    pub distance: f64,
    pub curiosity: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Body {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

/// Full simulator state. Positions are centers in arena units.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub cubes: Vec<Body>,
    pub effectors: Vec<Body>,
    pub goal: [f64; 2],
    pub target: usize,
    pub cube_ids: Vec<f64>,
    pub cube_side: f64,
    pub step: u32,
}

/// Role of one entry in an observation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Cube { target: bool },
    Goal,
    Effector { index: usize },
}

/// One per-entity feature vector with its role tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeature {
    pub role: FeatureRole,
    pub values: Vec<f64>,
}

/// Observation: an unordered set of per-entity feature vectors containing
/// exactly one goal entry. Callers must not rely on element order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatures {
    pub items: Vec<ObjectFeature>,
}

impl ObjectFeatures {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of non-goal entities (the object count K fed to encoders).
    pub fn object_count(&self) -> usize {
        self.items
            .iter()
            .filter(|f| f.role != FeatureRole::Goal)
            .count()
    }

    /// Shuffle the set in place (for permutation-invariance tests).
    pub fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        use rand::seq::SliceRandom;
        self.items.shuffle(rng);
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub terms: RewardTerms,
    pub done: bool,
    /// Fractional overlap of the target cube with the goal after the step.
    pub rho: f64,
}

/// Intersection area of two axis-aligned squares of side `side`, divided by
/// the square area. Symmetric, in [0, 1].
pub fn fractional_overlap(a: [f64; 2], b: [f64; 2], side: f64) -> f64 {
    let ox = (side - (a[0] - b[0]).abs()).max(0.0);
    let oy = (side - (a[1] - b[1]).abs()).max(0.0);
    (ox * oy) / (side * side)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Composite reward over one transition. Terms are always computed; the
/// enable flags zero out disabled ones, and the total is the fixed-order
/// fold sparse + distance + curiosity so that decomposition is exact.
pub fn reward(prev: &WorldState, cur: &WorldState, cfg: &RewardConfig) -> (f64, RewardTerms) {
    let o_prev = prev.cubes[prev.target].pos;
    let o_cur = cur.cubes[cur.target].pos;
    let goal = cur.goal;
    let rho = fractional_overlap(o_cur, goal, cur.cube_side);

    let sparse = cfg.alpha1 * rho;
    let delta = match cfg.distance_sign {
        DistanceSign::RewardDecrease => dist(o_prev, goal) - dist(o_cur, goal),
        DistanceSign::PaperPrinted => dist(o_cur, goal) - dist(o_prev, goal),
    };
    let distance = cfg.alpha2 * delta;
    let curiosity = cfg.alpha3 * (1.0 - rho).powf(cfg.beta) * (dist(o_cur, o_prev) + 1e-5).ln();

    let terms = RewardTerms {
        sparse,
        distance,
        curiosity,
        rho,
    };
    let total = if cfg.sparse { sparse } else { 0.0 }
        + if cfg.distance { distance } else { 0.0 }
        + if cfg.curiosity { curiosity } else { 0.0 };
    (total, terms)
}

/// The environment: config, reward, seeded random stream, current state.
#[derive(Debug)]
pub struct Env {
    cfg: EnvConfig,
    reward_cfg: RewardConfig,
    rng: ChaCha8Rng,
    state: WorldState,
}

impl Env {
    /// Build and reset an environment with its own random stream.
    pub fn new(cfg: EnvConfig, reward_cfg: RewardConfig, seed: u64) -> Result<Self, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = sample_initial_state(&cfg, &mut rng)?;
        Ok(Env {
            cfg,
            reward_cfg,
            rng,
            state,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward_cfg
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Restore a saved state and random stream (checkpoint resume).
    pub fn restore(&mut self, state: WorldState, rng_seed: [u8; 32], rng_word_pos: u128) {
        self.state = state;
        self.rng = ChaCha8Rng::from_seed(rng_seed);
        self.rng.set_word_pos(rng_word_pos);
    }

    pub fn rng_state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    /// Sample a fresh episode: cubes placed without overlap, goal and target
    /// uniform, identifiers resampled, effectors at their home positions.
    pub fn reset(&mut self) -> Result<&WorldState, EnvError> {
        self.state = sample_initial_state(&self.cfg, &mut self.rng)?;
        Ok(&self.state)
    }

    /// Advance one step under a 2-per-effector velocity action in [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        assert_eq!(
            action.len(),
            self.cfg.action_dim(),
            "action has {} components, expected {}",
            action.len(),
            self.cfg.action_dim()
        );
        if !action.iter().all(|a| a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let prev = self.state.clone();
        integrate(&mut self.state, &self.cfg, action);
        self.state.step += 1;

        let (reward, terms) = reward(&prev, &self.state, &self.reward_cfg);
        let done = self.state.step >= self.cfg.horizon;
        Ok(StepOutcome {
            reward,
            terms,
            done,
            rho: terms.rho,
        })
    }

    /// Fractional overlap of the target cube with the goal at the final step.
    pub fn success(&self) -> Result<f64, EnvError> {
        if self.state.step < self.cfg.horizon {
            return Err(EnvError::NotTerminal {
                step: self.state.step,
                horizon: self.cfg.horizon,
            });
        }
        Ok(self.rho())
    }

    /// Current target-goal overlap (any step).
    pub fn rho(&self) -> f64 {
        fractional_overlap(
            self.state.cubes[self.state.target].pos,
            self.state.goal,
            self.state.cube_side,
        )
    }

    /// Build the observation set: one feature vector per entity.
    pub fn observe(&self) -> ObjectFeatures {
        observe(&self.state)
    }
}

/// Home position of effector `j` of `m`: spread along the lower edge.
fn effector_home(j: usize, m: usize, cfg: &EnvConfig) -> [f64; 2] {
    let x = (j + 1) as f64 / (m + 1) as f64 * cfg.arena_size;
    [x, 0.1 * cfg.arena_size]
}

/// Fixed per-effector identifier in [-1, 1].
fn effector_id(j: usize, m: usize) -> f64 {
    2.0 * (j + 1) as f64 / (m + 1) as f64 - 1.0
}

fn sample_initial_state(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> Result<WorldState, EnvError> {
    let half = cfg.cube_side / 2.0;
    let lo = half;
    let hi = cfg.arena_size - half;
    let homes: Vec<[f64; 2]> = (0..cfg.n_effectors)
        .map(|j| effector_home(j, cfg.n_effectors, cfg))
        .collect();

    // Distinct identifiers, uniform in [-1, 1]: redraw any id that lands
    // within 1e-3 of an earlier one.
    let mut ids: Vec<f64> = Vec::with_capacity(cfg.n_cubes);
    for _ in 0..cfg.n_cubes {
        let mut id = rng.random_range(-1.0..1.0);
        for _ in 0..1000 {
            if ids.iter().all(|b| (id - b).abs() >= 1e-3) {
                break;
            }
            id = rng.random_range(-1.0..1.0);
        }
        ids.push(id);
    }

    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(cfg.n_cubes);
    for _ in 0..cfg.n_cubes {
        let mut placed = false;
        for _ in 0..cfg.max_place_attempts {
            let p = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            let clear_of_cubes = positions.iter().all(|q| {
                (p[0] - q[0]).abs().max((p[1] - q[1]).abs()) > cfg.cube_side
            });
            let clear_of_effectors = homes.iter().all(|h| {
                let cx = h[0].clamp(p[0] - half, p[0] + half);
                let cy = h[1].clamp(p[1] - half, p[1] + half);
                dist([cx, cy], *h) > cfg.effector_radius
            });
            if clear_of_cubes && clear_of_effectors {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(EnvError::Placement {
                n_cubes: cfg.n_cubes,
                cube_side: cfg.cube_side,
                arena_size: cfg.arena_size,
                attempts: cfg.max_place_attempts,
            });
        }
    }

    let goal = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
    let target = rng.random_range(0..cfg.n_cubes);

    Ok(WorldState {
        cubes: positions
            .into_iter()
            .map(|pos| Body { pos, vel: [0.0; 2] })
            .collect(),
        effectors: homes
            .into_iter()
            .map(|pos| Body { pos, vel: [0.0; 2] })
            .collect(),
        goal,
        target,
        cube_ids: ids,
        cube_side: cfg.cube_side,
        step: 0,
    })
}

/// Kinematic integration of one step with contact resolution per substep.
fn integrate(state: &mut WorldState, cfg: &EnvConfig, action: &[f64]) {
    let half = cfg.cube_side / 2.0;
    let r = cfg.effector_radius;
    let dt = 1.0 / cfg.substeps as f64;
    let start_cubes: Vec<[f64; 2]> = state.cubes.iter().map(|c| c.pos).collect();
    let start_effectors: Vec<[f64; 2]> = state.effectors.iter().map(|e| e.pos).collect();

    for _ in 0..cfg.substeps {
        // Effectors move kinematically and stop at the walls.
        for (j, e) in state.effectors.iter_mut().enumerate() {
            let vx = action[2 * j].clamp(-1.0, 1.0) * cfg.action_scale;
            let vy = action[2 * j + 1].clamp(-1.0, 1.0) * cfg.action_scale;
            e.pos[0] = (e.pos[0] + vx * dt).clamp(r, cfg.arena_size - r);
            e.pos[1] = (e.pos[1] + vy * dt).clamp(r, cfg.arena_size - r);
        }

        // Effector-cube: push each penetrated cube out along the contact normal.
        for j in 0..state.effectors.len() {
            let ep = state.effectors[j].pos;
            for i in 0..state.cubes.len() {
                let cp = state.cubes[i].pos;
                let closest = [
                    ep[0].clamp(cp[0] - half, cp[0] + half),
                    ep[1].clamp(cp[1] - half, cp[1] + half),
                ];
                let dx = ep[0] - closest[0];
                let dy = ep[1] - closest[1];
                let d2 = dx * dx + dy * dy;
                if d2 >= r * r {
                    continue;
                }
                if d2 > 1e-12 {
                    let d = d2.sqrt();
                    let depth = r - d;
                    state.cubes[i].pos[0] -= dx / d * depth;
                    state.cubes[i].pos[1] -= dy / d * depth;
                } else {
                    // Effector center inside the cube: exit along the axis of
                    // minimum penetration, away from the effector.
                    let pen_x = half + r - (ep[0] - cp[0]).abs();
                    let pen_y = half + r - (ep[1] - cp[1]).abs();
                    if pen_x <= pen_y {
                        let s = if cp[0] >= ep[0] { 1.0 } else { -1.0 };
                        state.cubes[i].pos[0] += s * pen_x;
                    } else {
                        let s = if cp[1] >= ep[1] { 1.0 } else { -1.0 };
                        state.cubes[i].pos[1] += s * pen_y;
                    }
                }
            }
        }

        // Cube-cube separation and wall clamping, iterated until clean.
        for _ in 0..8 {
            let mut any = false;
            for i in 0..state.cubes.len() {
                for j in (i + 1)..state.cubes.len() {
                    let dx = state.cubes[j].pos[0] - state.cubes[i].pos[0];
                    let dy = state.cubes[j].pos[1] - state.cubes[i].pos[1];
                    let ox = cfg.cube_side - dx.abs();
                    let oy = cfg.cube_side - dy.abs();
                    if ox <= 1e-3 || oy <= 1e-3 {
                        continue;
                    }
                    any = true;
                    if ox <= oy {
                        let s = if dx >= 0.0 { 1.0 } else { -1.0 };
                        state.cubes[i].pos[0] -= s * ox / 2.0;
                        state.cubes[j].pos[0] += s * ox / 2.0;
                    } else {
                        let s = if dy >= 0.0 { 1.0 } else { -1.0 };
                        state.cubes[i].pos[1] -= s * oy / 2.0;
                        state.cubes[j].pos[1] += s * oy / 2.0;
                    }
                }
            }
            for c in state.cubes.iter_mut() {
                c.pos[0] = c.pos[0].clamp(half, cfg.arena_size - half);
                c.pos[1] = c.pos[1].clamp(half, cfg.arena_size - half);
            }
            if !any {
                break;
            }
        }
    }

    // Velocities are per-step displacements.
    for (c, s) in state.cubes.iter_mut().zip(&start_cubes) {
        c.vel = [c.pos[0] - s[0], c.pos[1] - s[1]];
    }
    for (e, s) in state.effectors.iter_mut().zip(&start_effectors) {
        e.vel = [e.pos[0] - s[0], e.pos[1] - s[1]];
    }
}

/// Per-entity feature vectors with planar degeneracy: position z = 0,
/// orientation (1,0,0,0), angular velocity 0. The goal carries the target
/// cube's identifier.
pub fn observe(state: &WorldState) -> ObjectFeatures {
    let s = state.cube_side;
    let mut items = Vec::with_capacity(state.cubes.len() + state.effectors.len() + 1);
    for (i, c) in state.cubes.iter().enumerate() {
        let v = vec![
            1.0, // type
            s,
            s,
            s, // size
            c.pos[0],
            c.pos[1],
            0.0, // position
            1.0,
            0.0,
            0.0,
            0.0, // orientation
            c.vel[0],
            c.vel[1],
            0.0, // linear velocity
            0.0,
            0.0,
            0.0, // angular velocity
            state.cube_ids[i],
        ];
        debug_assert_eq!(v.len(), CUBE_FEATURES);
        items.push(ObjectFeature {
            role: FeatureRole::Cube {
                target: i == state.target,
            },
            values: v,
        });
    }
    let m = state.effectors.len();
    for (j, e) in state.effectors.iter().enumerate() {
        let v = vec![
            e.pos[0],
            e.pos[1],
            0.0, // position
            e.vel[0],
            e.vel[1],
            0.0, // velocity
            effector_id(j, m),
            e.pos[0],
            e.pos[1],
            0.0, // end-effector position
        ];
        debug_assert_eq!(v.len(), EFFECTOR_FEATURES);
        items.push(ObjectFeature {
            role: FeatureRole::Effector { index: j },
            values: v,
        });
    }
    let g = vec![
        1.0, // type
        s,
        s,
        s, // size
        state.goal[0],
        state.goal[1],
        0.0, // position
        1.0,
        0.0,
        0.0,
        0.0, // orientation
        state.cube_ids[state.target],
    ];
    debug_assert_eq!(g.len(), GOAL_FEATURES);
    items.push(ObjectFeature {
        role: FeatureRole::Goal,
        values: g,
    });
    ObjectFeatures { items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn env_with(n_cubes: usize, seed: u64) -> Env {
        let cfg = EnvConfig {
            n_cubes,
            ..EnvConfig::default()
        };
        Env::new(cfg, RewardConfig::default(), seed).unwrap()
    }

    #[test]
    fn reset_places_cubes_without_overlap() {
        let env = env_with(3, 42);
        let s = env.state();
        assert_eq!(s.cubes.len(), 3);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let d = dist(s.cubes[i].pos, s.cubes[j].pos);
                assert!(d > s.cube_side, "center distance {d} <= side");
                assert_eq!(
                    fractional_overlap(s.cubes[i].pos, s.cubes[j].pos, s.cube_side),
                    0.0
                );
            }
        }
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let a = env_with(4, 7);
        let b = env_with(4, 7);
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn single_cube_is_always_target() {
        for seed in 0..20 {
            let env = env_with(1, seed);
            assert_eq!(env.state().target, 0);
        }
    }

    #[test]
    fn crowded_arena_reports_placement_failure() {
        let cfg = EnvConfig {
            n_cubes: 200,
            max_place_attempts: 50,
            ..EnvConfig::default()
        };
        let err = Env::new(cfg, RewardConfig::default(), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("200"), "{msg}");
        assert!(msg.contains("arena"), "{msg}");
    }

    #[test]
    fn identifiers_distinct_and_goal_matches_target() {
        let env = env_with(6, 3);
        let s = env.state();
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert!((s.cube_ids[i] - s.cube_ids[j]).abs() >= 1e-3);
            }
        }
        let obs = env.observe();
        let goal = obs
            .items
            .iter()
            .find(|f| f.role == FeatureRole::Goal)
            .unwrap();
        assert_eq!(goal.values[GOAL_FEATURES - 1], s.cube_ids[s.target]);
    }

    #[test]
    fn zero_action_changes_only_step_counter() {
        let mut env = env_with(3, 11);
        let before = env.state().clone();
        let out = env.step(&vec![0.0; 6]).unwrap();
        let after = env.state();
        assert_eq!(after.step, before.step + 1);
        for (a, b) in after.cubes.iter().zip(&before.cubes) {
            assert_eq!(a.pos, b.pos);
        }
        for (a, b) in after.effectors.iter().zip(&before.effectors) {
            assert_eq!(a.pos, b.pos);
        }
        assert!(!out.done);
    }

    #[test]
    fn non_finite_action_rejected() {
        let mut env = env_with(1, 0);
        let err = env.step(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, EnvError::NonFiniteAction));
    }

    #[test]
    fn done_exactly_at_horizon() {
        let cfg = EnvConfig {
            n_cubes: 1,
            horizon: 5,
            ..EnvConfig::default()
        };
        let mut env = Env::new(cfg, RewardConfig::default(), 1).unwrap();
        assert!(env.success().is_err());
        for t in 1..=5 {
            let out = env.step(&vec![0.0; 6]).unwrap();
            assert_eq!(out.done, t == 5);
        }
        assert!(env.success().is_ok());
    }

    #[test]
    fn effector_pushes_cube_along_contact_normal() {
        // Place the effector just left of a cube and drive it right: the cube
        // must move right, and only along x.
        let mut env = env_with(1, 2);
        let cube = env.state.cubes[0].pos;
        let r = env.cfg.effector_radius;
        let half = env.cfg.cube_side / 2.0;
        env.state.effectors[0].pos = [cube[0] - half - r - 1e-4, cube[1]];
        let mut act = vec![0.0; 6];
        act[0] = 1.0;
        for _ in 0..3 {
            env.step(&act).unwrap();
        }
        let after = env.state.cubes[0].pos;
        assert!(after[0] > cube[0], "cube did not move along push direction");
        assert!((after[1] - cube[1]).abs() < 1e-9, "cube moved off-axis");
    }

    #[test]
    fn trajectory_fully_determined_by_seed_and_actions() {
        let run = || {
            let mut env = env_with(3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut log = Vec::new();
            for _ in 0..50 {
                let act: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = env.step(&act).unwrap();
                log.push((env.state().clone(), out.reward.to_bits()));
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cubes_never_exit_arena_and_never_interpenetrate() {
        let mut env = env_with(5, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let half = env.cfg.cube_side / 2.0;
        for t in 0..400 {
            let act: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = env.step(&act).unwrap();
            if out.done {
                env.reset().unwrap();
                continue;
            }
            let s = env.state();
            for c in &s.cubes {
                assert!(c.pos[0] >= half - 1e-9 && c.pos[0] <= 1.0 - half + 1e-9, "t={t}");
                assert!(c.pos[1] >= half - 1e-9 && c.pos[1] <= 1.0 - half + 1e-9, "t={t}");
            }
            for i in 0..s.cubes.len() {
                for j in (i + 1)..s.cubes.len() {
                    let dx = (s.cubes[i].pos[0] - s.cubes[j].pos[0]).abs();
                    let dy = (s.cubes[i].pos[1] - s.cubes[j].pos[1]).abs();
                    let pen = (s.cube_side - dx).min(s.cube_side - dy);
                    assert!(pen <= 1e-3 + 1e-9, "interpenetration {pen} at t={t}");
                }
            }
        }
    }

    #[test]
    fn cube_speed_bounded_by_effector_speed() {
        // Single effector so pushes cannot stack: per-step cube displacement
        // is bounded by the per-step effector displacement budget.
        let cfg = EnvConfig {
            n_cubes: 1,
            n_effectors: 1,
            ..EnvConfig::default()
        };
        let mut env = Env::new(cfg, RewardConfig::default(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let act: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let before = env.state().cubes[0].pos;
            let out = env.step(&act).unwrap();
            let after = env.state().cubes[0].pos;
            let moved = dist(before, after);
            assert!(
                moved <= env.config().action_scale + 1e-9,
                "cube moved {moved} in one step"
            );
            if out.done {
                env.reset().unwrap();
            }
        }
    }

    #[test]
    fn overlap_trivial_cases() {
        let side = 0.2;
        assert_eq!(fractional_overlap([0.5, 0.5], [0.5, 0.5], side), 1.0);
        assert_eq!(fractional_overlap([0.3, 0.5], [0.5, 0.5], side), 0.0);
        let half_off = fractional_overlap([0.5, 0.5], [0.5 + side / 2.0, 0.5], side);
        assert!((half_off - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let b = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let r1 = fractional_overlap(a, b, 0.16);
            let r2 = fractional_overlap(b, a, 0.16);
            assert_eq!(r1, r2);
            assert!((0.0..=1.0).contains(&r1));
        }
    }

    #[test]
    fn overlap_matches_monte_carlo_oracle() {
        // Independent oracle: sample points in square A, count those in B.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let side = 0.16;
        for case in 0..8 {
            let a = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let off = [
                rng.random_range(-1.2 * side..1.2 * side),
                rng.random_range(-1.2 * side..1.2 * side),
            ];
            let b = [a[0] + off[0], a[1] + off[1]];
            let n = 100_000;
            let mut hits = 0u32;
            for _ in 0..n {
                let p: [f64; 2] = [
                    rng.random_range(a[0] - side / 2.0..a[0] + side / 2.0),
                    rng.random_range(a[1] - side / 2.0..a[1] + side / 2.0),
                ];
                if (p[0] - b[0]).abs() <= side / 2.0 && (p[1] - b[1]).abs() <= side / 2.0 {
                    hits += 1;
                }
            }
            let mc = hits as f64 / n as f64;
            let exact = fractional_overlap(a, b, side);
            assert!(
                (mc - exact).abs() <= 0.01,
                "case {case}: mc {mc} vs exact {exact}"
            );
        }
    }

    #[test]
    fn reward_full_overlap_stationary_target() {
        let env = env_with(1, 0);
        let mut prev = env.state().clone();
        prev.cubes[0].pos = prev.goal;
        let cur = prev.clone();
        let (r, terms) = reward(&prev, &cur, &RewardConfig::default());
        assert_eq!(terms.rho, 1.0);
        assert_eq!(terms.distance, 0.0);
        assert_eq!(terms.curiosity, 0.0, "(1 - rho)^beta must kill the log");
        assert!((r - 100.0).abs() < 1e-12);
    }

    #[test]
    fn reward_distance_and_curiosity_hand_case() {
        // rho = 0, target moves from distance 0.5 to 0.4 (displacement 0.1):
        // R = 250 * 0.1 + 10 * ln(0.10001) ~= 1.975
        let env = env_with(1, 1);
        let mut prev = env.state().clone();
        prev.goal = [0.5, 0.5];
        prev.cubes[0].pos = [0.0, 0.5];
        let mut cur = prev.clone();
        cur.cubes[0].pos = [0.1, 0.5];
        let (r, terms) = reward(&prev, &cur, &RewardConfig::default());
        assert_eq!(terms.rho, 0.0);
        let expect = 250.0 * 0.1 + 10.0 * (0.1f64 + 1e-5).ln();
        assert!((r - expect).abs() < 1e-9);
        assert!((r - 1.97).abs() < 0.01, "r = {r}");
    }

    #[test]
    fn reward_all_terms_disabled_is_zero() {
        let env = env_with(2, 2);
        let prev = env.state().clone();
        let cur = prev.clone();
        let cfg = RewardConfig {
            sparse: false,
            distance: false,
            curiosity: false,
            ..RewardConfig::default()
        };
        assert_eq!(reward(&prev, &cur, &cfg).0, 0.0);
    }

    #[test]
    fn reward_decomposes_exactly() {
        let mut env = env_with(3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut prev = env.state().clone();
        for _ in 0..50 {
            let act: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            env.step(&act).unwrap();
            let cur = env.state().clone();
            let base = RewardConfig::default();
            let all = reward(&prev, &cur, &base).0;
            let only = |s: bool, d: bool, c: bool| {
                reward(
                    &prev,
                    &cur,
                    &RewardConfig {
                        sparse: s,
                        distance: d,
                        curiosity: c,
                        ..base.clone()
                    },
                )
                .0
            };
            let sum = only(true, false, false) + only(false, true, false) + only(false, false, true);
            assert_eq!(all.to_bits(), sum.to_bits(), "decomposition not exact");
            prev = cur;
        }
    }

    #[test]
    fn printed_distance_sign_flips_term() {
        let env = env_with(1, 4);
        let mut prev = env.state().clone();
        prev.goal = [0.8, 0.8];
        prev.cubes[0].pos = [0.2, 0.2];
        let mut cur = prev.clone();
        cur.cubes[0].pos = [0.3, 0.3];
        let d = RewardConfig {
            sparse: false,
            curiosity: false,
            ..RewardConfig::default()
        };
        let printed = RewardConfig {
            distance_sign: DistanceSign::PaperPrinted,
            ..d.clone()
        };
        let a = reward(&prev, &cur, &d).0;
        let b = reward(&prev, &cur, &printed).0;
        assert!(a > 0.0, "moving closer must be rewarded under the default");
        assert_eq!(a, -b);
    }

    #[test]
    fn observation_counts_and_planar_fields() {
        let env = env_with(3, 6);
        let obs = env.observe();
        assert_eq!(obs.len(), 3 + 3 + 1);
        assert_eq!(obs.object_count(), 6);
        let mut cubes = 0;
        let mut effectors = 0;
        let mut goals = 0;
        for f in &obs.items {
            match f.role {
                FeatureRole::Cube { .. } => {
                    cubes += 1;
                    assert_eq!(f.values.len(), CUBE_FEATURES);
                    assert_eq!(&f.values[7..11], &[1.0, 0.0, 0.0, 0.0], "orientation");
                    assert_eq!(f.values[6], 0.0, "position z");
                    assert_eq!(&f.values[14..17], &[0.0, 0.0, 0.0], "angular velocity");
                }
                FeatureRole::Goal => {
                    goals += 1;
                    assert_eq!(f.values.len(), GOAL_FEATURES);
                }
                FeatureRole::Effector { .. } => {
                    effectors += 1;
                    assert_eq!(f.values.len(), EFFECTOR_FEATURES);
                }
            }
        }
        assert_eq!((cubes, effectors, goals), (3, 3, 1));
    }

    #[test]
    fn observation_count_is_conserved_within_episode() {
        let mut env = env_with(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let act: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            env.step(&act).unwrap();
            assert_eq!(env.observe().len(), 4 + 3 + 1);
        }
    }
}
