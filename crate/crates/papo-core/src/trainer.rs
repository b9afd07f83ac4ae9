//! Clipped-surrogate PPO with truncated GAE, trained across a set of games
//! that differ only in population size.
//!
//! Each episode samples a population size N uniformly from the game set,
//! instantiates the policy for that N (a hypernetwork generation for the
//! hyper architectures), rolls out all N agents under the shared policy, and
//! stores only the representative agent's transitions. Every `update_every`
//! episodes the collected `E·T` transitions are consumed by `epochs` Adam
//! steps on the combined loss `-(L1 - c1·L2 + c2·H)`: clipped ratio
//! surrogate, squared error against the within-episode return, and policy
//! entropy. Separate optimizers carry the actor and critic learning rates.
//!
//! Episodes between two updates run concurrently; each draws from an RNG
//! stream derived from its global episode index, so logs and checkpoints are
//! bitwise reproducible regardless of thread schedule.

use crate::adam::Adam;
use crate::encoding::EncodingKind;
use crate::env::{
    empirical_distribution, encode_observation, reward, step, Action, AgentState, GameConfig,
    JointState,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nets::{tower_forward_groups, ActorCritic, EpisodePolicy, ModelNodes};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Smallest game in the training set G.
    pub n_min: usize,
    /// Largest game in the training set G (inclusive).
    pub n_max: usize,
    pub episodes: u64,
    /// E: update every this many episodes.
    pub update_every: usize,
    /// K: optimization epochs per update.
    pub epochs: usize,
    /// Clip radius for the probability ratio.
    pub clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Critic loss coefficient.
    pub c1: f64,
    /// Entropy coefficient.
    pub c2: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Zero-mean unit-std advantage normalization per update batch.
    pub normalize_advantages: bool,
    /// Use the undiscounted within-episode return as the critic target.
    pub undiscounted_value_target: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_min: 2,
            n_max: 200,
            episodes: 100_000,
            update_every: 5,
            epochs: 5,
            clip: 0.2,
            actor_lr: 3e-5,
            critic_lr: 3e-4,
            c1: 0.5,
            c2: 0.01,
            gamma: 0.99,
            lambda: 0.95,
            normalize_advantages: true,
            undiscounted_value_target: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_min >= 2
            && self.n_max >= self.n_min
            && self.update_every >= 1
            && self.epochs >= 1
            && self.clip > 0.0
            && self.clip < 1.0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.c1 >= 0.0
            && self.c2 >= 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.lambda > 0.0
            && self.lambda <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("train config out of range".into()))
        }
    }
}

/// A policy an opponent (or evaluation subject) plays; must be cheap to query.
pub trait ActionPolicy: Sync {
    fn probs(&self, env: &GameConfig, state: &AgentState) -> Vec<f64>;
}

impl ActionPolicy for EpisodePolicy {
    fn probs(&self, env: &GameConfig, state: &AgentState) -> Vec<f64> {
        self.action_probs(&encode_observation(env, state))
            .expect("policy built for a different environment")
    }
}

/// Uniform-random play.
pub struct UniformPolicy;

impl ActionPolicy for UniformPolicy {
    fn probs(&self, env: &GameConfig, _state: &AgentState) -> Vec<f64> {
        vec![1.0 / env.action_count() as f64; env.action_count()]
    }
}

/// Who the other N-1 agents are.
pub enum Opponents<'a> {
    /// Homogeneous self-play: everyone shares the learner's policy.
    Learner,
    /// Best-response training: agents 2..N play a frozen policy.
    Frozen(&'a dyn ActionPolicy),
}

/// One stored experience tuple of the representative agent.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub log_prob_old: f64,
    pub value_old: f64,
    pub t: usize,
    pub n: usize,
}

/// A full episode of representative-agent experience.
#[derive(Clone, Debug)]
pub struct EpisodeData {
    pub n: usize,
    pub transitions: Vec<Transition>,
    pub episode_return: f64,
}

/// Update-ready batch: transitions plus per-transition advantages and value
/// targets, computed episode by episode (no cross-episode bootstrapping).
pub struct TransitionBatch {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Truncated generalized advantage estimation by backward recursion
/// `A_t = δ_t + γλ·A_{t+1}` with `δ_t = r_t + γ·V(s_{t+1}) - V(s_t)`.
/// `values` carries one entry per reward plus the terminal bootstrap
/// (0 at the horizon).
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Contract(format!(
            "gae needs |values| = |rewards| + 1, got {} and {}",
            values.len(),
            rewards.len()
        )));
    }
    let mut advantages = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    Ok(advantages)
}

/// Within-episode return `G_t = Σ_{t'>=t} γ^(t'-t)·r_t'`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Roll out one episode with all agents acting under the shared policy (or
/// frozen opponents), storing agent 1's transitions.
pub fn rollout_episode(
    env_template: &GameConfig,
    n: usize,
    learner: &EpisodePolicy,
    opponents: &Opponents,
    rng: &mut Rng,
) -> Result<EpisodeData> {
    let env = env_template.for_population(n);
    let mut joint = env.initial_joint_state();
    let mut transitions = Vec::with_capacity(env.horizon);
    let mut episode_return = 0.0;
    for _ in 0..env.horizon {
        let obs1 = encode_observation(&env, &joint.agent(0));
        let probs1 = learner.action_probs(&obs1)?;
        let a1 = rng.categorical(&probs1);
        let log_prob = probs1[a1].max(f64::MIN_POSITIVE).ln();
        let value = learner.value(&obs1)?;
        let mut actions = Vec::with_capacity(n);
        actions.push(Action(a1));
        for i in 1..n {
            let state = joint.agent(i);
            let probs = match opponents {
                Opponents::Learner => learner.action_probs(&encode_observation(&env, &state))?,
                Opponents::Frozen(p) => p.probs(&env, &state),
            };
            actions.push(Action(rng.categorical(&probs)));
        }
        let (next, rewards) = step(&env, &joint, &actions)?;
        let r1 = rewards[0];
        episode_return += r1;
        transitions.push(Transition {
            obs: obs1,
            action: a1,
            reward: r1,
            next_obs: encode_observation(&env, &next.agent(0)),
            log_prob_old: log_prob,
            value_old: value,
            t: joint.t,
            n,
        });
        joint = next;
    }
    Ok(EpisodeData {
        n,
        transitions,
        episode_return,
    })
}

/// Assemble an update batch: per-episode GAE advantages and value targets,
/// then optional batch-level advantage normalization.
pub fn assemble_batch(episodes: Vec<EpisodeData>, cfg: &TrainConfig) -> Result<TransitionBatch> {
    let mut transitions = Vec::new();
    let mut advantages = Vec::new();
    let mut returns = Vec::new();
    for ep in episodes {
        let rewards: Vec<f64> = ep.transitions.iter().map(|tr| tr.reward).collect();
        let mut values: Vec<f64> = ep.transitions.iter().map(|tr| tr.value_old).collect();
        values.push(0.0); // terminal bootstrap at the horizon
        let adv = compute_gae(&rewards, &values, cfg.gamma, cfg.lambda)?;
        let target_gamma = if cfg.undiscounted_value_target {
            1.0
        } else {
            cfg.gamma
        };
        let ret = returns_to_go(&rewards, target_gamma);
        transitions.extend(ep.transitions);
        advantages.extend(adv);
        returns.extend(ret);
    }
    if cfg.normalize_advantages && advantages.len() > 1 {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for a in advantages.iter_mut() {
            *a = (*a - mean) / std;
        }
    }
    Ok(TransitionBatch {
        transitions,
        advantages,
        returns,
    })
}

/// Graph handles for the loss terms plus grouping metadata.
pub struct LossNodes {
    pub total: NodeId,
    pub l1: NodeId,
    pub l2: NodeId,
    pub entropy: NodeId,
    /// Distinct population sizes, in the group order used by the forward.
    pub group_ns: Vec<usize>,
    pub ratio_mean: f64,
}

/// Evaluated loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub entropy: f64,
    pub ratio_mean: f64,
}

/// Build the full loss over the graph. Transitions are grouped by their own
/// population size; each group runs through parameters generated (or
/// augmented) for that size, so mixed-N batches train correctly.
pub fn build_ppo_loss(
    g: &mut Graph,
    model: &ActorCritic,
    nodes: &ModelNodes,
    batch: &TransitionBatch,
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    let m_total = batch.transitions.len();
    if m_total == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let aware = model.spec.kind.is_population_aware();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, tr) in batch.transitions.iter().enumerate() {
        let key = if aware { tr.n } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let group_ns: Vec<usize> = groups.keys().copied().collect();
    let index_groups: Vec<Vec<usize>> = groups.into_values().collect();

    // Population-encoding rows, one per group.
    let enc_width = if aware { model.spec.encoder_width() } else { 1 };
    let mut enc_data = Vec::with_capacity(group_ns.len() * enc_width);
    for &n in &group_ns {
        if aware {
            enc_data.extend(model.encode_population(n)?);
        } else {
            enc_data.push(0.0);
        }
    }
    let enc_rows = Tensor::from_vec(group_ns.len(), enc_width, enc_data);

    let obs_dim = model.spec.obs_dim;
    let group_rows: Vec<Tensor> = index_groups
        .iter()
        .map(|idxs| {
            let mut data = Vec::with_capacity(idxs.len() * obs_dim);
            for &i in idxs {
                data.extend_from_slice(&batch.transitions[i].obs);
            }
            Tensor::from_vec(idxs.len(), obs_dim, data)
        })
        .collect();

    let actor_outs = tower_forward_groups(g, &nodes.actor, &enc_rows, &group_rows);
    let critic_outs = tower_forward_groups(g, &nodes.critic, &enc_rows, &group_rows);

    let mut l1_sums = Vec::new();
    let mut l2_sums = Vec::new();
    let mut ent_sums = Vec::new();
    let mut ratio_total = 0.0;
    for (gi, idxs) in index_groups.iter().enumerate() {
        let m = idxs.len();
        let actions: Vec<usize> = idxs.iter().map(|&i| batch.transitions[i].action).collect();
        let old_lp = Tensor::from_vec(
            m,
            1,
            idxs.iter()
                .map(|&i| batch.transitions[i].log_prob_old)
                .collect(),
        );
        let adv = Tensor::from_vec(m, 1, idxs.iter().map(|&i| batch.advantages[i]).collect());
        let ret = Tensor::from_vec(m, 1, idxs.iter().map(|&i| batch.returns[i]).collect());

        let log_probs = g.log_softmax(actor_outs[gi]);
        let picked = g.pick(log_probs, &actions);
        let old_node = g.leaf(&old_lp);
        let diff = g.sub(picked, old_node);
        let ratio = g.exp(diff);
        ratio_total += g.value(ratio).iter().sum::<f64>();
        let adv_node = g.leaf(&adv);
        let surr = g.mul(ratio, adv_node);
        let clipped = g.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr_clip = g.mul(clipped, adv_node);
        let surr_min = g.min2(surr, surr_clip);
        l1_sums.push(g.sum(surr_min));

        let probs = g.exp(log_probs);
        let plogp = g.mul(probs, log_probs);
        let plogp_sum = g.sum(plogp);
        ent_sums.push(g.scale(plogp_sum, -1.0));

        let ret_node = g.leaf(&ret);
        let vdiff = g.sub(critic_outs[gi], ret_node);
        let vsq = g.mul(vdiff, vdiff);
        l2_sums.push(g.sum(vsq));
    }

    fn add_all(g: &mut Graph, mut ids: Vec<NodeId>) -> NodeId {
        let mut acc = ids.pop().expect("nonempty");
        for id in ids {
            acc = g.add(acc, id);
        }
        acc
    }
    let inv_m = 1.0 / m_total as f64;
    let l1_sum = add_all(g, l1_sums);
    let l1 = g.scale(l1_sum, inv_m);
    let l2_sum = add_all(g, l2_sums);
    let l2 = g.scale(l2_sum, inv_m);
    let ent_sum = add_all(g, ent_sums);
    let entropy = g.scale(ent_sum, inv_m);

    // total = -(L1 - c1·L2 + c2·H), minimized.
    let l2_scaled = g.scale(l2, cfg.c1);
    let ent_scaled = g.scale(entropy, cfg.c2);
    let a = g.sub(l1, l2_scaled);
    let b = g.add(a, ent_scaled);
    let total = g.scale(b, -1.0);

    Ok(LossNodes {
        total,
        l1,
        l2,
        entropy,
        group_ns,
        ratio_mean: ratio_total / m_total as f64,
    })
}

/// Evaluate the loss for the current parameters (no gradient step); errors
/// with a diagnostic dump if any term is non-finite.
pub fn ppo_loss(
    batch: &TransitionBatch,
    model: &ActorCritic,
    cfg: &TrainConfig,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let nodes = model.insert_leaves(&mut g);
    let loss = build_ppo_loss(&mut g, model, &nodes, batch, cfg)?;
    let values = LossValues {
        total: g.scalar_value(loss.total),
        l1: g.scalar_value(loss.l1),
        l2: g.scalar_value(loss.l2),
        entropy: g.scalar_value(loss.entropy),
        ratio_mean: loss.ratio_mean,
    };
    check_loss_finite(&values, batch)?;
    Ok(values)
}

fn check_loss_finite(values: &LossValues, batch: &TransitionBatch) -> Result<()> {
    if values.total.is_finite()
        && values.l1.is_finite()
        && values.l2.is_finite()
        && values.entropy.is_finite()
    {
        return Ok(());
    }
    let adv_max = batch.advantages.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let ret_max = batch.returns.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Err(Error::TrainingFault(format!(
        "non-finite loss: total={} l1={} l2={} entropy={} (batch {} transitions, max|adv|={adv_max}, max|ret|={ret_max})",
        values.total,
        values.l1,
        values.l2,
        values.entropy,
        batch.transitions.len(),
    )))
}

/// Per-episode log record. Loss terms repeat the most recent update's values
/// and are empty until the first update.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub episode: u64,
    pub n: usize,
    pub episode_return: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub entropy: Option<f64>,
}

/// Summary returned by a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub episodes: u64,
    pub updates: u64,
    pub last_loss: Option<LossValues>,
}

pub struct Trainer {
    pub model: ActorCritic,
    pub env: GameConfig,
    pub cfg: TrainConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    episode_count: u64,
    update_count: u64,
    last_loss: Option<LossValues>,
}

impl Trainer {
    pub fn new(model: ActorCritic, env: GameConfig, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        if model.spec.kind.is_population_aware() && model.spec.encoding == EncodingKind::Be {
            let max_encodable = (1usize << model.spec.encoding_bits) - 1;
            if cfg.n_max > max_encodable {
                return Err(Error::EncodingOverflow {
                    n: cfg.n_max as u64,
                    bits: model.spec.encoding_bits,
                });
            }
        }
        let split = model.actor_leaf_count();
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
        let actor_opt = Adam::new(cfg.actor_lr, &sizes[..split]);
        let critic_opt = Adam::new(cfg.critic_lr, &sizes[split..]);
        Ok(Trainer {
            model,
            env,
            cfg,
            actor_opt,
            critic_opt,
            episode_count: 0,
            update_count: 0,
            last_loss: None,
        })
    }

    pub fn episode_count(&self) -> u64 {
        self.episode_count
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.actor_opt, &self.critic_opt)
    }

    pub fn optimizers_mut(&mut self) -> (&mut Adam, &mut Adam) {
        (&mut self.actor_opt, &mut self.critic_opt)
    }

    pub fn restore_counters(&mut self, episodes: u64, updates: u64) {
        self.episode_count = episodes;
        self.update_count = updates;
    }

    /// Train for `episodes` more episodes against the given opponents,
    /// invoking `on_row` once per episode and `on_update` after each
    /// parameter update (checkpoint cadence lives in the caller).
    pub fn run(
        &mut self,
        episodes: u64,
        opponents: &Opponents,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
        mut on_update: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<TrainSummary> {
        let target = self.episode_count + episodes;
        let e = self.cfg.update_every;
        while self.episode_count < target {
            let count = (target - self.episode_count).min(e as u64) as usize;
            let base = self.episode_count;
            let seed = self.cfg.seed;
            let (n_min, n_max) = (self.cfg.n_min, self.cfg.n_max);
            let model = &self.model;
            let env = &self.env;
            let results: Vec<Result<EpisodeData>> = (0..count)
                .into_par_iter()
                .map(|k| {
                    let mut rng = Rng::derive(seed, &[tags::EPISODE, base + k as u64]);
                    let n = rng.int_range(n_min, n_max);
                    let policy = model.instantiate(n)?;
                    rollout_episode(env, n, &policy, opponents, &mut rng)
                })
                .collect();
            let mut batch_eps = Vec::with_capacity(count);
            for r in results {
                batch_eps.push(r?);
            }
            self.episode_count += count as u64;

            let row_data: Vec<(usize, f64)> = batch_eps
                .iter()
                .map(|ep| (ep.n, ep.episode_return))
                .collect();
            // Partial trailing batches are dropped, never trained on: every
            // update consumes exactly E fresh episodes.
            if count == e {
                self.update(batch_eps)?;
                on_update(self)?;
            }
            for (k, (n, ret)) in row_data.into_iter().enumerate() {
                on_row(&LogRow {
                    episode: base + k as u64 + 1,
                    n,
                    episode_return: ret,
                    l1: self.last_loss.map(|l| l.l1),
                    l2: self.last_loss.map(|l| l.l2),
                    entropy: self.last_loss.map(|l| l.entropy),
                })?;
            }
        }
        Ok(TrainSummary {
            episodes: self.episode_count,
            updates: self.update_count,
            last_loss: self.last_loss,
        })
    }

    fn update(&mut self, episodes: Vec<EpisodeData>) -> Result<()> {
        let expected = self.cfg.update_every * self.env.horizon;
        let batch = assemble_batch(episodes, &self.cfg)?;
        assert_eq!(
            batch.transitions.len(),
            expected,
            "update must consume exactly E*T transitions"
        );
        for _epoch in 0..self.cfg.epochs {
            let mut g = Graph::new();
            let nodes = self.model.insert_leaves(&mut g);
            let loss = build_ppo_loss(&mut g, &self.model, &nodes, &batch, &self.cfg)?;
            let values = LossValues {
                total: g.scalar_value(loss.total),
                l1: g.scalar_value(loss.l1),
                l2: g.scalar_value(loss.l2),
                entropy: g.scalar_value(loss.entropy),
                ratio_mean: loss.ratio_mean,
            };
            check_loss_finite(&values, &batch)?;
            let mut grads = g.backward(loss.total);
            let leaf_grads: Vec<Vec<f64>> = nodes
                .leaf_ids
                .iter()
                .map(|&id| grads.take(&g, id))
                .collect();
            for (gi, lg) in leaf_grads.iter().enumerate() {
                if !lg.iter().all(|v| v.is_finite()) {
                    return Err(Error::TrainingFault(format!(
                        "non-finite gradient in parameter {gi} at update {}",
                        self.update_count
                    )));
                }
            }
            // Release graph leaves so the optimizer mutates storage in place.
            drop(grads);
            drop(g);
            let split = self.model.actor_leaf_count();
            self.actor_opt.begin_step();
            self.critic_opt.begin_step();
            let (actor_opt, critic_opt) = (&mut self.actor_opt, &mut self.critic_opt);
            let mut slot = 0usize;
            self.model.for_each_param_mut(&mut |_, t| {
                let grad = &leaf_grads[slot];
                if slot < split {
                    actor_opt.apply_param(slot, t, grad);
                } else {
                    critic_opt.apply_param(slot - split, t, grad);
                }
                slot += 1;
            });
            self.last_loss = Some(values);
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Monte-Carlo mean return (and its standard error) of agent 1 over complete
/// episodes, with agents 2..N following `others`.
#[allow(clippy::too_many_arguments)]
pub fn mean_return(
    env_template: &GameConfig,
    n: usize,
    agent1: &dyn ActionPolicy,
    others: &dyn ActionPolicy,
    rollouts: usize,
    seed: u64,
    stream: u64,
    initial: Option<&JointState>,
) -> Result<(f64, f64)> {
    assert!(rollouts >= 1);
    let env = env_template.for_population(n);
    let returns: Vec<Result<f64>> = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = Rng::derive(seed, &[tags::EVAL, stream, r as u64]);
            let mut joint = match initial {
                Some(j) => j.clone(),
                None => env.initial_joint_state(),
            };
            let mut total = 0.0;
            for _ in 0..env.horizon {
                let mut actions = Vec::with_capacity(n);
                for i in 0..n {
                    let state = joint.agent(i);
                    let probs = if i == 0 {
                        agent1.probs(&env, &state)
                    } else {
                        others.probs(&env, &state)
                    };
                    actions.push(Action(rng.categorical(&probs)));
                }
                let (next, rewards) = step(&env, &joint, &actions)?;
                total += rewards[0];
                joint = next;
            }
            Ok(total)
        })
        .collect();
    let mut vals = Vec::with_capacity(rollouts);
    for r in returns {
        vals.push(r?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let se = if vals.len() > 1 {
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        (var / vals.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Return of agent 1 when every agent holds still for a full episode;
/// closed-form check scaffolding.
pub fn stationary_agent1_return(env: &GameConfig, joint: &JointState) -> Result<f64> {
    let dist = empirical_distribution(joint, env.state_count())?;
    let mut total = 0.0;
    for t in 1..=env.horizon {
        total += reward(
            env,
            &AgentState {
                cell: joint.cells[0],
                t,
            },
            &dist,
        )?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{resolve_spec, ArchKind};

    fn tiny_model(kind: ArchKind, env: &GameConfig, seed: u64) -> ActorCritic {
        let spec = resolve_spec(
            kind,
            env.obs_dim(),
            env.action_count(),
            EncodingKind::Be,
            12,
            16,
            [12, 12],
            [16, 16],
        );
        ActorCritic::from_spec(spec, seed)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_min: 2,
            n_max: 6,
            episodes: 20,
            update_every: 2,
            epochs: 2,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gae_with_unit_discounts_is_reward_to_go() {
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.0, 0.0, 0.0, 0.0];
        let adv = compute_gae(&rewards, &values, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn gae_single_step() {
        let adv = compute_gae(&[1.0], &[0.5, 0.0], 0.99, 0.95).unwrap();
        assert!((adv[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gae_rejects_length_mismatch() {
        assert!(matches!(
            compute_gae(&[1.0, 2.0], &[0.0, 0.0], 0.9, 0.9),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gae_recursion_equals_double_sum_on_random_episodes() {
        for trial in 0..1000u64 {
            let mut rng = Rng::derive(trial, &[tags::EPISODE]);
            let t_len = 1 + rng.below(20);
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let mut values: Vec<f64> = (0..t_len).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            values.push(0.0);
            let gamma = rng.range_f64(0.5, 1.0);
            let lambda = rng.range_f64(0.5, 1.0);
            let fast = compute_gae(&rewards, &values, gamma, lambda).unwrap();
            for t in 0..t_len {
                let mut acc = 0.0;
                for l in 0..(t_len - t) {
                    let tt = t + l;
                    let delta = rewards[tt] + gamma * values[tt + 1] - values[tt];
                    acc += (gamma * lambda).powi(l as i32) * delta;
                }
                assert!(
                    (fast[t] - acc).abs() < 1e-10,
                    "trial {trial} t={t}: {} vs {acc}",
                    fast[t]
                );
            }
        }
    }

    #[test]
    fn fresh_batch_has_unit_ratios_and_l1_mean_advantage() {
        let env = GameConfig::exploration(3).with_horizon(4);
        let model = tiny_model(ArchKind::AugPpo, &env, 3);
        let mut cfg = tiny_cfg();
        cfg.normalize_advantages = false;
        let mut rng = Rng::derive(9, &[tags::EPISODE, 0]);
        let pol = model.instantiate(3).unwrap();
        let ep = rollout_episode(&env, 3, &pol, &Opponents::Learner, &mut rng).unwrap();
        let batch = assemble_batch(vec![ep], &cfg).unwrap();
        let mean_adv = batch.advantages.iter().sum::<f64>() / batch.advantages.len() as f64;
        let vals = ppo_loss(&batch, &model, &cfg).unwrap();
        assert!((vals.ratio_mean - 1.0).abs() < 1e-12);
        assert!((vals.l1 - mean_adv).abs() < 1e-9);
    }

    #[test]
    fn ratio_one_gradient_equals_vanilla_policy_gradient() {
        // With new == old policy and no clipping active, dL1/dθ must equal
        // the gradient of E[A·logπ(a|s)].
        let env = GameConfig::exploration(3).with_horizon(4);
        let model = tiny_model(ArchKind::Ppo, &env, 8);
        let mut cfg = tiny_cfg();
        cfg.normalize_advantages = false;
        cfg.c1 = 0.0;
        cfg.c2 = 0.0;
        let pol = model.instantiate(2).unwrap();
        let mut rng = Rng::derive(11, &[tags::EPISODE, 0]);
        let ep = rollout_episode(&env, 2, &pol, &Opponents::Learner, &mut rng).unwrap();
        let batch = assemble_batch(vec![ep], &cfg).unwrap();

        let mut g1 = Graph::new();
        let nodes1 = model.insert_leaves(&mut g1);
        let loss1 = build_ppo_loss(&mut g1, &model, &nodes1, &batch, &cfg).unwrap();
        let grads1 = g1.backward(loss1.total);

        // Vanilla policy gradient of -E[A·logπ].
        let mut g2 = Graph::new();
        let nodes2 = model.insert_leaves(&mut g2);
        let m = batch.transitions.len();
        let obs = Tensor::from_vec(
            m,
            env.obs_dim(),
            batch
                .transitions
                .iter()
                .flat_map(|tr| tr.obs.clone())
                .collect(),
        );
        let outs = tower_forward_groups(&mut g2, &nodes2.actor, &Tensor::zeros(1, 1), &[obs]);
        let lsm = g2.log_softmax(outs[0]);
        let actions: Vec<usize> = batch.transitions.iter().map(|tr| tr.action).collect();
        let picked = g2.pick(lsm, &actions);
        let adv = Tensor::from_vec(m, 1, batch.advantages.clone());
        let advn = g2.leaf(&adv);
        let weighted = g2.mul(picked, advn);
        let mean = g2.mean(weighted);
        let neg = g2.scale(mean, -1.0);
        let grads2 = g2.backward(neg);

        for (i, id) in nodes1.leaf_ids.iter().enumerate() {
            let a = grads1.get(&g1, *id);
            let b = grads2.get(&g2, nodes2.leaf_ids[i]);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10, "leaf {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn saturated_clip_contributes_zero_gradient() {
        let env = GameConfig::exploration(3).with_horizon(1);
        let model = tiny_model(ArchKind::Ppo, &env, 2);
        let mut cfg = tiny_cfg();
        cfg.normalize_advantages = false;
        cfg.c1 = 0.0;
        cfg.c2 = 0.0;
        // One transition with positive advantage and an old log-prob far
        // below the current one: ratio >> 1+eps.
        let obs = vec![0.0; env.obs_dim()];
        let batch = TransitionBatch {
            transitions: vec![Transition {
                obs: obs.clone(),
                action: 0,
                reward: 1.0,
                next_obs: obs,
                log_prob_old: -9.0,
                value_old: 0.0,
                t: 0,
                n: 2,
            }],
            advantages: vec![2.0],
            returns: vec![1.0],
        };
        let mut g = Graph::new();
        let nodes = model.insert_leaves(&mut g);
        let loss = build_ppo_loss(&mut g, &model, &nodes, &batch, &cfg).unwrap();
        let grads = g.backward(loss.total);
        for id in &nodes.leaf_ids {
            for v in grads.get(&g, *id) {
                assert_eq!(v, 0.0, "clipped sample leaked gradient");
            }
        }
    }

    #[test]
    fn uniform_policy_entropy_is_log_action_count() {
        let env = GameConfig::exploration(3).with_horizon(2);
        let mut model = tiny_model(ArchKind::Ppo, &env, 2);
        model.for_each_param_mut(&mut |_, t| t.data_mut().fill(0.0));
        let cfg = tiny_cfg();
        let pol = model.instantiate(2).unwrap();
        let mut rng = Rng::derive(1, &[tags::EPISODE, 0]);
        let ep = rollout_episode(&env, 2, &pol, &Opponents::Learner, &mut rng).unwrap();
        let batch = assemble_batch(vec![ep], &cfg).unwrap();
        let vals = ppo_loss(&batch, &model, &cfg).unwrap();
        assert!((vals.entropy - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mixed_population_batch_groups_by_n() {
        let env = GameConfig::exploration(3).with_horizon(2);
        let model = tiny_model(ArchKind::Papo, &env, 4);
        let cfg = tiny_cfg();
        let mut eps = Vec::new();
        for (i, n) in [2usize, 5, 2].iter().enumerate() {
            let mut rng = Rng::derive(20 + i as u64, &[tags::EPISODE, i as u64]);
            let pol = model.instantiate(*n).unwrap();
            eps.push(rollout_episode(&env, *n, &pol, &Opponents::Learner, &mut rng).unwrap());
        }
        let batch = assemble_batch(eps, &cfg).unwrap();
        let mut g = Graph::new();
        let nodes = model.insert_leaves(&mut g);
        let loss = build_ppo_loss(&mut g, &model, &nodes, &batch, &cfg).unwrap();
        assert_eq!(loss.group_ns, vec![2, 5]);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let env = GameConfig::exploration(3).with_horizon(5);
        let run = || {
            let model = tiny_model(ArchKind::Papo, &env, 7);
            let mut trainer = Trainer::new(model, env.clone(), tiny_cfg()).unwrap();
            let mut rows = Vec::new();
            trainer
                .run(
                    10,
                    &Opponents::Learner,
                    |row| {
                        rows.push(format!(
                            "{},{},{:?},{:?}",
                            row.episode, row.n, row.episode_return, row.l1
                        ));
                        Ok(())
                    },
                    |_| Ok(()),
                )
                .unwrap();
            let params: Vec<f64> = trainer
                .model
                .named_params()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect();
            (rows, params)
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn update_consumes_exactly_full_batches() {
        let env = GameConfig::exploration(3).with_horizon(4);
        let model = tiny_model(ArchKind::Ppo, &env, 7);
        let mut cfg = tiny_cfg();
        cfg.update_every = 3;
        let mut trainer = Trainer::new(model, env, cfg).unwrap();
        // 7 episodes = 2 full batches of 3 plus one leftover that must not train.
        trainer
            .run(7, &Opponents::Learner, |_| Ok(()), |_| Ok(()))
            .unwrap();
        assert_eq!(trainer.update_count(), 2);
        assert_eq!(trainer.episode_count(), 7);
    }

    #[test]
    fn learning_rates_are_separate_for_actor_and_critic() {
        let env = GameConfig::exploration(3).with_horizon(4);
        let model = tiny_model(ArchKind::Ppo, &env, 3);
        let before: Vec<Vec<f64>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let mut cfg = tiny_cfg();
        cfg.actor_lr = 1e-12; // actor effectively frozen
        cfg.critic_lr = 1e-2;
        let split = model.actor_leaf_count();
        let mut trainer = Trainer::new(model, env, cfg).unwrap();
        trainer
            .run(2, &Opponents::Learner, |_| Ok(()), |_| Ok(()))
            .unwrap();
        let after: Vec<Vec<f64>> = trainer
            .model
            .named_params()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let actor_shift: f64 = (0..split)
            .map(|i| {
                before[i]
                    .iter()
                    .zip(after[i].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        let critic_shift: f64 = (split..before.len())
            .map(|i| {
                before[i]
                    .iter()
                    .zip(after[i].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!(actor_shift < 1e-6, "actor moved {actor_shift}");
        assert!(critic_shift > 1e-4, "critic moved only {critic_shift}");
    }

    #[test]
    fn stationary_return_matches_closed_form() {
        // N agents parked on distinct cells: each step pays -log(1/N).
        let n = 9;
        let env = GameConfig::exploration(3).with_agents(n).with_horizon(20);
        let joint = JointState {
            cells: (0..n).collect(),
            t: 0,
        };
        let total = stationary_agent1_return(&env, &joint).unwrap();
        let expect = 20.0 * (n as f64).ln();
        assert!((total - expect).abs() < 1e-9);
    }
}
