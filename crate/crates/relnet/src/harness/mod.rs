//! Experiment harness: deterministic evaluation, zero-shot object-count
//! sweeps, ablation-run enumeration, diagnostics export, and the
//! relation-scaling benchmark.

pub mod bench;
pub mod export;

pub use bench::{fit_loglog_slope, scaling_bench, BenchPoint, BenchProfile, BenchResult};
pub use export::{export_diagnostics, ExportSummary};

use thiserror::Error;

use crate::cli::config::ExperimentConfig;
use crate::diffmath::Scalar;
use crate::encoders::{Aggregation, EncodeError, EncoderKind};
use crate::env::{Env, EnvConfig, EnvError, RewardConfig};
use crate::ppo::{PolicyError, PolicyModel};

/// Fractional success at or above this counts an episode as solved.
pub const SOLVED_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Success statistics over deterministic-policy evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub episodes: u32,
    /// Mean fractional success at the last timestep.
    pub mean_rho: f64,
    pub std_rho: f64,
    /// Fraction of episodes with final rho >= [`SOLVED_THRESHOLD`].
    pub solved_fraction: f64,
}

/// Run `episodes` deterministic-mode episodes and report final-step success.
/// The only stochasticity is the env reset stream seeded by `seed`.
pub fn evaluate<T: Scalar>(
    model: &PolicyModel<T>,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    episodes: u32,
    seed: u64,
) -> Result<EvalStats, HarnessError> {
    if episodes < 1 {
        return Err(HarnessError::Invalid("episodes must be >= 1".into()));
    }
    let mut env = Env::new(env_cfg.clone(), reward_cfg.clone(), seed)?;
    let mut finals = Vec::with_capacity(episodes as usize);
    for ep in 0..episodes {
        if ep > 0 {
            env.reset()?;
        }
        loop {
            let obs = env.observe();
            let sample = model.act_deterministic(&obs)?;
            let clamped: Vec<f64> = sample.action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            let out = env.step(&clamped)?;
            if out.done {
                break;
            }
        }
        finals.push(env.success()?);
    }
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let solved = finals.iter().filter(|&&r| r >= SOLVED_THRESHOLD).count() as f64 / n;
    Ok(EvalStats {
        episodes,
        mean_rho: mean,
        std_rho: var.sqrt(),
        solved_fraction: solved,
    })
}

/// One sweep point: evaluation at a fixed distractor count, or the reason it
/// could not run (arena-crowding placement failures are reported, never
/// silently skipped).
#[derive(Debug, Clone)]
pub enum SweepEntry {
    Ok(SweepRow),
    Failed { distractors: usize, message: String },
}

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub distractors: usize,
    /// Mean of per-seed mean success.
    pub mean: f64,
    /// Population standard deviation across seed means.
    pub std_across_seeds: f64,
    pub episodes: u32,
    pub solved_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn row(&self, distractors: usize) -> Option<&SweepRow> {
        self.entries.iter().find_map(|e| match e {
            SweepEntry::Ok(r) if r.distractors == distractors => Some(r),
            _ => None,
        })
    }
}

/// Evaluate a trained model across environments with `n_list` distractors
/// (total cubes = distractors + 1), `episodes` per seed, once per seed.
pub fn generalization_sweep<T: Scalar>(
    model: &PolicyModel<T>,
    base_env: &EnvConfig,
    reward_cfg: &RewardConfig,
    n_list: &[usize],
    episodes: u32,
    seeds: &[u64],
) -> Result<SweepResult, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Invalid("at least one seed required".into()));
    }
    let mut entries = Vec::with_capacity(n_list.len());
    for &distractors in n_list {
        let mut env_cfg = base_env.clone();
        env_cfg.n_cubes = distractors + 1;
        let mut means = Vec::with_capacity(seeds.len());
        let mut solved = Vec::with_capacity(seeds.len());
        let mut failure: Option<String> = None;
        for &seed in seeds {
            match evaluate(model, &env_cfg, reward_cfg, episodes, seed) {
                Ok(stats) => {
                    means.push(stats.mean_rho);
                    solved.push(stats.solved_fraction);
                }
                Err(HarnessError::Env(e @ EnvError::Placement { .. })) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        entries.push(match failure {
            Some(message) => SweepEntry::Failed {
                distractors,
                message,
            },
            None => {
                let n = means.len() as f64;
                let mean = means.iter().sum::<f64>() / n;
                let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
                SweepEntry::Ok(SweepRow {
                    distractors,
                    mean,
                    std_across_seeds: var.sqrt(),
                    episodes: episodes * seeds.len() as u32,
                    solved_fraction: solved.iter().sum::<f64>() / n,
                })
            }
        });
    }
    Ok(SweepResult { entries })
}

/// Write a sweep as a tab-separated table with a header line.
pub fn write_sweep_table<W: std::io::Write>(
    w: &mut W,
    sweep: &SweepResult,
) -> std::io::Result<()> {
    writeln!(
        w,
        "distractors\tmean_success\tstd_across_seeds\tepisodes\tsolved_fraction\tstatus"
    )?;
    for entry in &sweep.entries {
        match entry {
            SweepEntry::Ok(r) => writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\tok",
                r.distractors, r.mean, r.std_across_seeds, r.episodes, r.solved_fraction
            )?,
            SweepEntry::Failed {
                distractors,
                message,
            } => writeln!(
                w,
                "{distractors}\tnan\tnan\t0\tnan\terror: {}",
                message.replace(['\t', '\n'], " ")
            )?,
        }
    }
    Ok(())
}

/// One enumerated ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub group: String,
    pub variant: String,
    pub config: ExperimentConfig,
}

impl AblationRun {
    pub fn name(&self) -> String {
        format!(
            "{}-{}-seed{}",
            self.group, self.variant, self.config.run.seed
        )
    }
}

const ABLATION_SEEDS: u64 = 5;

/// Enumerate the ablation grid around a base config: encoder kinds,
/// aggregation modes, representation widths, reward-term removals, and
/// training distractor counts — each variant with five distinct seeds.
pub fn ablation_matrix(base: &ExperimentConfig) -> Vec<AblationRun> {
    let mut runs = Vec::new();
    let mut push = |group: &str, variant: String, mutate: &dyn Fn(&mut ExperimentConfig)| {
        for s in 0..ABLATION_SEEDS {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            cfg.run.seed = base.run.seed + s;
            cfg.run.name = format!("{group}-{variant}-seed{}", cfg.run.seed);
            cfg.run.out_dir = format!("{}/{}", base.run.out_dir, cfg.run.name);
            runs.push(AblationRun {
                group: group.to_string(),
                variant: variant.clone(),
                config: cfg,
            });
        }
    };

    for kind in EncoderKind::ALL {
        push("encoder", kind.name().to_string(), &|c| {
            c.encoder.kind = kind;
        });
    }
    for agg in [Aggregation::LayerNormSum, Aggregation::Mean] {
        let name = match agg {
            Aggregation::LayerNormSum => "layernorm_sum",
            Aggregation::Mean => "mean",
        };
        push("aggregation", name.to_string(), &|c| {
            c.encoder.aggregation = agg;
        });
    }
    for d_z in [10usize, 25, 50, 100] {
        push("d_z", d_z.to_string(), &|c| {
            c.encoder.d_z = d_z;
        });
    }
    let reward_variants: [(&str, fn(&mut RewardConfig)); 4] = [
        ("all", |_| {}),
        ("no_distance", |r| r.distance = false),
        ("no_sparse", |r| r.sparse = false),
        ("no_curiosity", |r| r.curiosity = false),
    ];
    for (name, mutate) in reward_variants {
        push("reward", name.to_string(), &|c| mutate(&mut c.reward));
    }
    for distractors in 0usize..=3 {
        push("train_distractors", distractors.to_string(), &|c| {
            c.env.n_cubes = distractors + 1;
        });
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn small_model(seed: u64) -> PolicyModel<f32> {
        let cfg = EncoderConfig {
            d: 8,
            d_z: 6,
            g_hidden: 8,
            tokenizer_hidden: 8,
            ..EncoderConfig::default()
        };
        PolicyModel::new(cfg, 6, 0.0, seed).unwrap()
    }

    fn short_env() -> EnvConfig {
        EnvConfig {
            n_cubes: 3,
            horizon: 20,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn untrained_policy_scores_near_zero() {
        let model = small_model(0);
        let stats = evaluate(&model, &short_env(), &RewardConfig::default(), 30, 7).unwrap();
        assert!(
            stats.mean_rho < 0.1,
            "random-weight policy scored {}",
            stats.mean_rho
        );
        assert!((0.0..=1.0).contains(&stats.solved_fraction));
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let model = small_model(1);
        let a = evaluate(&model, &short_env(), &RewardConfig::default(), 10, 3).unwrap();
        let b = evaluate(&model, &short_env(), &RewardConfig::default(), 10, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_with_single_train_n_reduces_to_evaluate() {
        let model = small_model(2);
        let env = short_env();
        let reward = RewardConfig::default();
        let sweep =
            generalization_sweep(&model, &env, &reward, &[2], 10, &[3]).unwrap();
        let row = sweep.row(2).expect("row present");
        let direct = evaluate(&model, &env, &reward, 10, 3).unwrap();
        assert!((row.mean - direct.mean_rho).abs() < 1e-12);
        assert_eq!(row.episodes, 10);
    }

    #[test]
    fn sweep_reports_placement_failures_instead_of_skipping() {
        let model = small_model(3);
        let env = EnvConfig {
            horizon: 10,
            max_place_attempts: 20,
            ..EnvConfig::default()
        };
        let sweep = generalization_sweep(
            &model,
            &env,
            &RewardConfig::default(),
            &[0, 200],
            2,
            &[1],
        )
        .unwrap();
        assert_eq!(sweep.entries.len(), 2);
        assert!(sweep.row(0).is_some());
        match &sweep.entries[1] {
            SweepEntry::Failed {
                distractors,
                message,
            } => {
                assert_eq!(*distractors, 200);
                assert!(message.contains("201"), "{message}");
            }
            other => panic!("expected failure entry, got {other:?}"),
        }
    }

    #[test]
    fn sweep_determinism() {
        let model = small_model(4);
        let env = short_env();
        let reward = RewardConfig::default();
        let run = || {
            let s =
                generalization_sweep(&model, &env, &reward, &[0, 1, 2], 5, &[1, 2]).unwrap();
            s.entries
                .iter()
                .map(|e| match e {
                    SweepEntry::Ok(r) => (r.mean.to_bits(), r.std_across_seeds.to_bits()),
                    SweepEntry::Failed { .. } => (0, 0),
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablation_matrix_covers_the_grid_with_five_seeds_each() {
        let base = ExperimentConfig::default();
        let runs = ablation_matrix(&base);

        let in_group = |g: &str| runs.iter().filter(|r| r.group == g).collect::<Vec<_>>();
        assert_eq!(in_group("encoder").len(), 4 * 5);
        assert_eq!(in_group("aggregation").len(), 2 * 5);
        assert_eq!(in_group("d_z").len(), 4 * 5);
        assert_eq!(in_group("reward").len(), 4 * 5);
        assert_eq!(in_group("train_distractors").len(), 4 * 5);

        let dz_variants: std::collections::BTreeSet<usize> = in_group("d_z")
            .iter()
            .map(|r| r.config.encoder.d_z)
            .collect();
        assert_eq!(dz_variants, [10, 25, 50, 100].into_iter().collect());

        let reward_variants: std::collections::BTreeSet<String> = in_group("reward")
            .iter()
            .map(|r| r.variant.clone())
            .collect();
        assert_eq!(reward_variants.len(), 4);

        for variant in ["LRN", "RN", "ATTN", "NO_RELATION"] {
            let seeds: std::collections::BTreeSet<u64> = runs
                .iter()
                .filter(|r| r.group == "encoder" && r.variant == variant)
                .map(|r| r.config.run.seed)
                .collect();
            assert_eq!(seeds.len(), 5, "5 distinct seeds per variant");
        }

        // distinct output directories everywhere
        let dirs: std::collections::BTreeSet<String> =
            runs.iter().map(|r| r.config.run.out_dir.clone()).collect();
        assert_eq!(dirs.len(), runs.len());
    }

    #[test]
    fn sweep_table_has_header_and_one_line_per_entry() {
        let model = small_model(5);
        let sweep = generalization_sweep(
            &model,
            &short_env(),
            &RewardConfig::default(),
            &[0, 1],
            2,
            &[1],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_sweep_table(&mut buf, &sweep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("distractors\t"));
    }
}
