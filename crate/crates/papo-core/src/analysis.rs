//! How generated policies evolve with population size: per-layer CKA
//! similarity on a shared probe batch, scaling-law fits, a KL-to-uniform
//! initialization diagnostic, reward-distribution statistics under random
//! play, and raw activation export for external embedding tools.

use crate::env::{encode_observation, step, Action, AgentState, GameConfig};
use crate::error::{Error, Result};
use crate::fit::{fit_scaling_law, FitForm, FitResult};
use crate::nets::{mlp_forward_with_taps, softmax, ActorCritic, EpisodePolicy};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Default probe batch size for similarity comparisons.
pub const DEFAULT_CKA_BATCH: usize = 1000;

/// Linear centered kernel alignment between two activation matrices sharing
/// their rows (same probe inputs): `‖Yᶜᵀ·Xᶜ‖²_F / (‖Xᶜᵀ·Xᶜ‖_F·‖Yᶜᵀ·Yᶜ‖_F)`.
/// Invariant to orthogonal transforms and isotropic scaling of either side.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "cka needs equal row counts, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let var = |t: &Tensor| t.iter().map(|v| v * v).sum::<f64>();
    if var(&xc) < 1e-24 || var(&yc) < 1e-24 {
        return Err(Error::Degenerate(
            "constant activation matrix has no similarity signal".into(),
        ));
    }
    let cross = gram_cross(&yc, &xc); // [q, p]
    let xx = gram_cross(&xc, &xc);
    let yy = gram_cross(&yc, &yc);
    let f2 = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>();
    Ok(f2(&cross) / (f2(&xx).sqrt() * f2(&yy).sqrt()))
}

fn center_columns(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut means = vec![0.0; n];
    for i in 0..m {
        for (mean, v) in means.iter_mut().zip(t.row_slice(i)) {
            *mean += v;
        }
    }
    for mean in means.iter_mut() {
        *mean /= m as f64;
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for (v, mean) in t.row_slice(i).iter().zip(means.iter()) {
            data.push(v - mean);
        }
    }
    Tensor::from_vec(m, n, data)
}

/// `Aᵀ·B` for two row-aligned matrices.
fn gram_cross(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, p) = (a.rows(), a.cols());
    let q = b.cols();
    let mut out = vec![0.0; p * q];
    crate::graph::mat_mul_at(a.data(), b.data(), &mut out, m, p, q);
    out
}

/// A probe batch of observation vectors over уniform (cell, time) pairs.
pub fn probe_batch(env: &GameConfig, m: usize, seed: u64) -> Tensor {
    let mut rng = Rng::derive(seed, &[tags::PROBE]);
    let mut data = Vec::with_capacity(m * env.obs_dim());
    for _ in 0..m {
        let cell = rng.below(env.state_count());
        let t = rng.below(env.horizon + 1);
        data.extend(encode_observation(env, &AgentState { cell, t }));
    }
    Tensor::from_vec(m, env.obs_dim(), data)
}

/// Stable digest of a probe batch; comparisons must reuse identical bytes.
pub fn probe_checksum(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.iter() {
        for b in v.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

/// One comparison row: similarity of the policies for `n` and `n + step`,
/// per layer. `None` marks a degenerate (constant-activation) layer rather
/// than a silent zero.
#[derive(Clone, Debug)]
pub struct CkaRow {
    pub n: usize,
    pub n_next: usize,
    pub input: Option<f64>,
    pub hidden: Option<f64>,
    pub output: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CkaCurve {
    pub rows: Vec<CkaRow>,
    pub probe_checksum: u64,
    pub batch_size: usize,
}

impl CkaCurve {
    /// (N, ρ) points for one layer index (0 = input, 1 = hidden, 2 = output),
    /// skipping degenerate rows.
    pub fn layer_points(&self, layer: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| {
                let v = match layer {
                    0 => r.input,
                    1 => r.hidden,
                    _ => r.output,
                };
                v.map(|rho| (r.n as f64, rho))
            })
            .collect()
    }
}

fn actor_taps(pol: &EpisodePolicy, probe: &Tensor) -> Result<Vec<Tensor>> {
    let input = pol.actor_input(probe);
    Ok(mlp_forward_with_taps(&pol.actor, &input)?.1)
}

/// Per-layer CKA between the policies generated for each `n` and `n + step`,
/// all evaluated on one shared probe batch.
pub fn cka_curve(
    model: &ActorCritic,
    env: &GameConfig,
    n_values: &[usize],
    s
tep: usize,
    m: usize,
    seed: u64,
) -> Result<CkaCurve> {
    if !model.spec.kind.is_population_aware() {
        return Err(Error::Contract(
            "similarity curves need population-conditioned policies (or per-N checkpoints)".into(),
        ));
    }
    let probe = probe_batch(env, m, seed);
    let checksum = probe_checksum(&probe);
    let rows: Vec<Result<CkaRow>> = n_values
        .par_iter()
        .map(|&n| {
            let a = model.instantiate(n)?;
            let b = model.instantiate(n + step)?;
            let taps_a = actor_taps(&a, &probe)?;
            let taps_b = actor_taps(&b, &probe)?;
            let mut vals = [None, None, None];
            for l in 0..3 {
                match linear_cka(&taps_a[l], &taps_b[l]) {
                    Ok(v) => vals[l] = Some(v),
                    Err(Error::Degenerate(_)) => vals[l] = None,
                    Err(e) => return Err(e),
                }
            }
            Ok(CkaRow {
                n,
                n_next: n + step,
                input: vals[0],
                hidden: vals[1],
                output: vals[2],
            })
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        out.push(r?);
    }
    Ok(CkaCurve {
        rows: out,
        probe_checksum: checksum,
        batch_size: m,
    })
}

/// Fit the scaling law to each layer's curve.
pub fn fit_curve(curve: &CkaCurve, form: FitForm) -> Vec<(&'static str, Result<FitResult>)> {
    let layers = ["input", "hidden", "output"];
    (0..3)
        .map(|l| {
            let pts = curve.layer_points(l);
            (layers[l], fit_scaling_law(&pts, form))
        })
        .collect()
}

/// Mean KL divergence from the policy to the uniform policy over probe
/// states: `κ(N) = E_s[Σ_a π(a|s)·ln(π(a|s)·|A|)]`. Zero iff uniform.
pub fn kl_to_uniform(
    model: &ActorCritic,
    env: &GameConfig,
    n_values: &[usize],
    probe: &Tensor,
) -> Result<Vec<(usize, f64)>> {
    let a_count = model.spec.n_actions as f64;
    n_values
        .iter()
        .map(|&n| {
            let pol = model.instantiate(n)?;
            let input = pol.actor_input(probe);
            let logits = crate::nets::mlp_forward(&pol.actor, &input)?;
            let mut total = 0.0;
            for i in 0..logits.rows() {
                let probs = softmax(logits.row_slice(i));
                let kl: f64 = probs
                    .iter()
                    .map(|&p| if p > 0.0 { p * (p * a_count).ln() } else { 0.0 })
                    .sum();
                total += kl;
            }
            Ok((n, total / logits.rows() as f64))
        })
        .collect()
}

/// Reward statistics under uniform-random play.
#[derive(Clone, Debug)]
pub struct RewardDistribution {
    pub n: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Every per-step reward of the representative agent, in sample order.
    pub samples: Vec<f64>,
    /// A few example cell paths of the representative agent.
    pub sample_trajectories: Vec<Vec<usize>>,
}

/// Sample `n_trajectories` episodes under the uniform-random policy and
/// histogram the representative agent's per-step rewards.
pub fn reward_distribution(
    env_template: &GameConfig,
    n: usize,
    n_trajectories: usize,
    bins: usize,
    seed: u64,
) -> Result<RewardDistribution> {
    assert!(bins >= 1);
    let env = env_template.for_population(n);
    let a_count = env.action_count();
    let per_episode: Vec<Result<(Vec<f64>, Vec<usize>)>> = (0..n_trajectories)
        .into_par_iter()
        .map(|e| {
            let mut rng = Rng::derive(seed, &[tags::ANALYSIS, n as u64, e as u64]);
            let mut joint = env.initial_joint_state();
            let mut rewards = Vec::with_capacity(env.horizon);
            let mut path = Vec::with_capacity(env.horizon + 1);
            path.push(joint.cells[0]);
            for _ in 0..env.horizon {
                let actions: Vec<Action> =
                    (0..n).map(|_| Action(rng.below(a_count))).collect();
                let (next, r) = step(&env, &joint, &actions)?;
                rewards.push(r[0]);
                path.push(next.cells[0]);
                joint = next;
            }
            Ok((rewards, path))
        })
        .collect();
    let mut samples = Vec::with_capacity(n_trajectories * env.horizon);
    let mut sample_trajectories = Vec::new();
    for r in per_episode {
        let (rewards, path) = r?;
        samples.extend(rewards);
        if sample_trajectories.len() < 5 {
            sample_trajectories.push(path);
        }
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0u64; bins];
    for &s in &samples {
        let idx = (((s - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let bin_edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(RewardDistribution {
        n,
        bin_edges,
        counts,
        samples,
        sample_trajectories,
    })
}

/// Wasserstein-1 distance between two empirical distributions given by
/// samples (the area between their CDFs).
pub fn wasserstein1(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty());
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // Walk the merged support accumulating |F_a - F_b| * dx.
    let (mut i, mut j) = (0usize, 0usize);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut prev = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        prev = next;
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
    }
    dist
}

/// CSV export of per-layer activations on probe states, for external
/// dimensionality-reduction tools. One row per (population, state, layer);
/// the activation vector is semicolon-joined in the last column.
pub fn export_activations(
    model: &ActorCritic,
    env: &GameConfig,
    probe: &Tensor,
    n_values: &[usize],
    path: &Path,
    run_id: &str,
) -> Result<usize> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# manifest_id={run_id}")?;
    writeln!(f, "n,state_id,layer,activations")?;
    let mut rows_written = 0usize;
    for &n in n_values {
        let pol = model.instantiate(n)?;
        let taps = actor_taps(&pol, probe)?;
        for (layer, tap) in taps.iter().enumerate() {
            for sid in 0..tap.rows() {
                let joined = tap
                    .row_slice(sid)
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(";");
                writeln!(f, "{n},{sid},{layer},{joined}")?;
                rows_written += 1;
            }
        }
    }
    Ok(rows_written)
}
