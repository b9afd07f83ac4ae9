//! Approximate NashConv: how far a policy is from a best response.
//!
//! For a game with N agents and a frozen shared policy, a representative
//! agent's NashConv is the gap between the value of an (approximately)
//! best-responding policy and the value of just playing the shared policy.
//! The best response is trained with the same PPO machinery, opponents
//! frozen; values are Monte-Carlo estimates with reported standard errors,
//! so rows can come out slightly negative when the gap is within noise.

use crate::checkpoint::model_checksum;
use crate::env::{GameConfig, JointState};
use crate::error::{Error, Result};
use crate::nets::{ActorCritic, ArchKind, EpisodePolicy};
use crate::rng::{derive_seed, tags};
use crate::trainer::{mean_return, ActionPolicy, Opponents, TrainConfig, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Populations to evaluate.
    pub eval_set: Vec<usize>,
    /// Episodes of best-response training per population.
    pub br_episodes: u64,
    /// Monte-Carlo rollouts per value estimate.
    pub mc_rollouts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_set: default_eval_set(),
            br_episodes: 1_000_000,
            mc_rollouts: 100,
            seed: 0,
        }
    }
}

/// The in-distribution evaluation grid {10, 20, ..., 200}.
pub fn default_eval_set() -> Vec<usize> {
    (1..=20).map(|k| k * 10).collect()
}

/// The out-of-distribution grid {220, 240, ..., 400}.
pub fn unseen_eval_set() -> Vec<usize> {
    (11..=20).map(|k| k * 20).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_rollouts < 1 {
            return Err(Error::Config("mc_rollouts must be >= 1".into()));
        }
        if self.eval_set.iter().any(|&n| n < 2) {
            return Err(Error::Config("eval populations must be >= 2".into()));
        }
        Ok(())
    }
}

/// One evaluated population size.
#[derive(Clone, Debug)]
pub struct NashConvRow {
    pub n: usize,
    pub value_current: f64,
    pub se_current: f64,
    pub value_br: f64,
    pub se_br: f64,
    /// `value_br - value_current`, reported raw (may be negative noise).
    pub nashconv: f64,
    /// Combined standard error of the gap.
    pub se: f64,
    pub br_episodes: u64,
    /// Return-vs-episode slope over the last tenth of BR training.
    pub br_slope: f64,
}

/// Best-response training output.
pub struct BrOutcome {
    pub policy: EpisodePolicy,
    /// (episode, return) pairs for convergence inspection.
    pub curve: Vec<(u64, f64)>,
    pub slope: f64,
}

/// Monte-Carlo estimate of agent 1's episode return (undiscounted) while
/// agents 2..N play `shared`. Returns (mean, standard error).
pub fn evaluate_value(
    agent1: &dyn ActionPolicy,
    shared: &dyn ActionPolicy,
    n: usize,
    env: &GameConfig,
    rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    mean_return(env, n, agent1, shared, rollouts, seed, 0, None)
}

/// As [`evaluate_value`] but from a fixed initial joint state; used by
/// closed-form checks that need agents parked on chosen cells.
pub fn evaluate_value_from(
    agent1: &dyn ActionPolicy,
    shared: &dyn ActionPolicy,
    env: &GameConfig,
    initial: &JointState,
    rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    mean_return(
        env,
        initial.n_agents(),
        agent1,
        shared,
        rollouts,
        seed,
        1,
        Some(initial),
    )
}

fn last_window_slope(curve: &[(u64, f64)]) -> f64 {
    let w = (curve.len() / 10).max(2.min(curve.len()));
    let tail = &curve[curve.len() - w..];
    let n = tail.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean_x = tail.iter().map(|(e, _)| *e as f64).sum::<f64>() / n;
    let mean_y = tail.iter().map(|(_, r)| r).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, r) in tail {
        let dx = *e as f64 - mean_x;
        num += dx * (r - mean_y);
        den += dx * dx;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Train an approximate best response for agent 1 against a frozen shared
/// policy: single-agent PPO on the one-game set {n}.
pub fn train_best_response(
    frozen: &dyn ActionPolicy,
    env: &GameConfig,
    n: usize,
    br_episodes: u64,
    base_cfg: &TrainConfig,
    seed: u64,
) -> Result<BrOutcome> {
    let model = ActorCritic::build(
        ArchKind::Ppo,
        env,
        crate::encoding::EncodingKind::Be,
        12,
        derive_seed(seed, &[tags::BEST_RESPONSE, n as u64, 1]),
    );
    let cfg = TrainConfig {
        n_min: n,
        n_max: n,
        episodes: br_episodes,
        seed: derive_seed(seed, &[tags::BEST_RESPONSE, n as u64, 2]),
        ..base_cfg.clone()
    };
    let mut trainer = Trainer::new(model, env.clone(), cfg)?;
    let mut curve = Vec::with_capacity(br_episodes as usize);
    trainer.run(
        br_episodes,
        &Opponents::Frozen(frozen),
        |row| {
            curve.push((row.episode, row.episode_return));
            Ok(())
        },
        |_| Ok(()),
    )?;
    let slope = last_window_slope(&curve);
    let policy = trainer.model.instantiate(n)?;
    Ok(BrOutcome {
        policy,
        curve,
        slope,
    })
}

/// NashConv of a frozen shared policy in the N-agent game: train a best
/// response, then report the value gap with Monte-Carlo standard errors.
pub fn nashconv(
    shared: &dyn ActionPolicy,
    env: &GameConfig,
    n: usize,
    eval: &EvalConfig,
    base_cfg: &TrainConfig,
) -> Result<(NashConvRow, BrOutcome)> {
    let seed = derive_seed(eval.seed, &[tags::EVAL, n as u64]);
    let (value_current, se_current) =
        evaluate_value(shared, shared, n, env, eval.mc_rollouts, seed)?;
    let br = train_best_response(shared, env, n, eval.br_episodes, base_cfg, seed)?;
    let (value_br, se_br) = mean_return(
        env,
        n,
        &br.policy,
        shared,
        eval.mc_rollouts,
        seed,
        2,
        None,
    )?;
    let row = NashConvRow {
        n,
        value_current,
        se_current,
        value_br,
        se_br,
        nashconv: value_br - value_current,
        se: (se_current * se_current + se_br * se_br).sqrt(),
        br_episodes: eval.br_episodes,
        br_slope: br.slope,
    };
    Ok((row, br))
}

/// What is being evaluated across the grid.
pub enum EvalSubject<'a> {
    /// Instantiate the model for each evaluated population size.
    Model(&'a ActorCritic),
    /// Instantiate once at the given size and apply everywhere (the naive
    /// transfer protocol).
    NaiveFrom(&'a ActorCritic, usize),
}

impl EvalSubject<'_> {
    fn policy_for(&self, n: usize) -> Result<EpisodePolicy> {
        match self {
            EvalSubject::Model(m) => m.instantiate(n),
            EvalSubject::NaiveFrom(m, n0) => m.instantiate(*n0),
        }
    }

    fn model(&self) -> &ActorCritic {
        match self {
            EvalSubject::Model(m) | EvalSubject::NaiveFrom(m, _) => m,
        }
    }
}

/// Evaluate a subject over the whole grid; per-population jobs run
/// concurrently, each deterministic under its derived seed. The frozen
/// subject is checksummed before and after to guarantee immutability.
pub fn nashconv_report(
    subject: &EvalSubject,
    env: &GameConfig,
    eval: &EvalConfig,
    base_cfg: &TrainConfig,
) -> Result<Vec<(NashConvRow, BrOutcome)>> {
    eval.validate()?;
    let before = model_checksum(subject.model());
    let results: Vec<Result<(NashConvRow, BrOutcome)>> = eval
        .eval_set
        .par_iter()
        .map(|&n| {
            let shared = subject.policy_for(n)?;
            nashconv(&shared, env, n, eval, base_cfg)
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    assert_eq!(
        before,
        model_checksum(subject.model()),
        "frozen policy mutated during evaluation"
    );
    Ok(rows)
}

/// CSV with the stable column contract; the first line names the manifest.
pub fn write_report_csv(
    path: &Path,
    run_id: &str,
    method: &str,
    rows: &[NashConvRow],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# manifest_id={run_id}")?;
    writeln!(
        f,
        "method,n,value_current,value_br,nashconv,se,br_episodes"
    )?;
    for r in rows {
        writeln!(
            f,
            "{method},{},{},{},{},{},{}",
            r.n, r.value_current, r.value_br, r.nashconv, r.se, r.br_episodes
        )?;
    }
    Ok(())
}

/// Per-population BR training curve, one file per N.
pub fn write_br_curve_csv(
    path: &Path,
    run_id: &str,
    n: usize,
    outcome: &BrOutcome,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# manifest_id={run_id}")?;
    writeln!(f, "# n={n} last_window_slope={}", outcome.slope)?;
    writeln!(f, "episode,episode_return")?;
    for (e, r) in &outcome.curve {
        writeln!(f, "{e},{r}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingKind;
    use crate::env::{AgentState, Move};
    use crate::nets::resolve_spec;
    use crate::trainer::UniformPolicy;

    /// Always plays "stay".
    struct StayPolicy;

    impl ActionPolicy for StayPolicy {
        fn probs(&self, env: &GameConfig, _s: &AgentState) -> Vec<f64> {
            let stay = (0..env.action_count())
                .find(|&a| {
                    matches!(
                        env.move_of(crate::env::Action(a)),
                        Ok(Move::Stay)
                    )
                })
                .unwrap();
            let mut p = vec![0.0; env.action_count()];
            p[stay] = 1.0;
            p
        }
    }

    #[test]
    fn parked_agents_earn_closed_form_value() {
        // N = |S| agents frozen at distinct cells via forced stay: each step
        // pays -log(1/N), so the episode value is T·log N exactly.
        let n = 9;
        let env = GameConfig::exploration(3).with_agents(n).with_horizon(20);
        let joint = JointState {
            cells: (0..n).collect(),
            t: 0,
        };
        let (mean, se) =
            evaluate_value_from(&StayPolicy, &StayPolicy, &env, &joint, 50, 4).unwrap();
        assert!((mean - 20.0 * (n as f64).ln()).abs() < 1e-9);
        assert!(se < 1e-12, "identical returns should have ~zero se, got {se}");
    }

    #[test]
    fn standard_error_scales_inverse_sqrt_rollouts() {
        let env = GameConfig::exploration(4).with_horizon(10);
        let (_, se1) = evaluate_value(&UniformPolicy, &UniformPolicy, 4, &env, 200, 9).unwrap();
        let (_, se2) = evaluate_value(&UniformPolicy, &UniformPolicy, 4, &env, 800, 9).unwrap();
        let ratio = se2 / se1;
        assert!(
            ratio > 0.3 && ratio < 0.8,
            "se ratio {ratio} far from 1/sqrt(4)"
        );
    }

    #[test]
    fn self_play_identity_is_deterministic() {
        let env = GameConfig::crowd(8).with_horizon(6);
        let a = evaluate_value(&UniformPolicy, &UniformPolicy, 3, &env, 64, 11).unwrap();
        let b = evaluate_value(&UniformPolicy, &UniformPolicy, 3, &env, 64, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_response_beats_uniform_against_uniform() {
        // In a tiny game a briefly trained BR must earn at least the uniform
        // policy's self-play value.
        let env = GameConfig::exploration_strip(2).with_horizon(2);
        let cfg = TrainConfig {
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            ..TrainConfig::default()
        };
        let br = train_best_response(&UniformPolicy, &env, 2, 600, &cfg, 5).unwrap();
        let (v_uniform, se_u) =
            evaluate_value(&UniformPolicy, &UniformPolicy, 2, &env, 2000, 6).unwrap();
        let (v_br, se_b) = evaluate_value(&br.policy, &UniformPolicy, 2, &env, 2000, 7).unwrap();
        assert!(
            v_br >= v_uniform - 2.0 * (se_u + se_b),
            "BR value {v_br} below uniform self-play {v_uniform}"
        );
    }

    #[test]
    fn identical_seeds_give_identical_br_curves() {
        let env = GameConfig::exploration_strip(2).with_horizon(2);
        let cfg = TrainConfig::default();
        let a = train_best_response(&UniformPolicy, &env, 2, 40, &cfg, 12).unwrap();
        let b = train_best_response(&UniformPolicy, &env, 2, 40, &cfg, 12).unwrap();
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn report_subject_stays_frozen() {
        let env = GameConfig::exploration_strip(2).with_horizon(2);
        let spec = resolve_spec(
            ArchKind::AugPpo,
            env.obs_dim(),
            env.action_count(),
            EncodingKind::Be,
            12,
            8,
            [6, 6],
            [8, 8],
        );
        let model = ActorCritic::from_spec(spec, 2);
        let eval = EvalConfig {
            eval_set: vec![2, 3],
            br_episodes: 300,
            mc_rollouts: 200,
            seed: 3,
        };
        let sum_before = model_checksum(&model);
        let rows = nashconv_report(
            &EvalSubject::Model(&model),
            &env,
            &eval,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(sum_before, model_checksum(&model));
        // Gap can be noisy but the BR should not be badly dominated.
        for (row, _) in &rows {
            assert!(
                row.value_br >= row.value_current - 3.0 * row.se,
                "n={}: br {} << current {} (se {})",
                row.n,
                row.value_br,
                row.value_current,
                row.se
            );
        }
    }

    #[test]
    fn eval_sets_match_the_documented_grids() {
        assert_eq!(default_eval_set().first(), Some(&10));
        assert_eq!(default_eval_set().last(), Some(&200));
        assert_eq!(default_eval_set().len(), 20);
        assert_eq!(unseen_eval_set().first(), Some(&220));
        assert_eq!(unseen_eval_set().last(), Some(&400));
        assert_eq!(unseen_eval_set().len(), 10);
    }
}
