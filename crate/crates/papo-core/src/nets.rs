//! The six actor-critic architectures.
//!
//! All policies and critics are three-layer networks with per-layer weights,
//! biases, and scaling factors; a layer computes
//! `x' = relu(x·w ⊙ (1 + g) + b)` with no activation after the last layer.
//! The variants differ in where the population size enters:
//!
//! - `ppo` / `ppo-large`: no population input at all.
//! - `aug-ppo` / `aug-ppo-large`: the population embedding is concatenated to
//!   the observation.
//! - `hyper-ppo`: a hypernetwork maps the embedding to the entire parameter
//!   set of an otherwise plain policy.
//! - `papo`: hypernetwork-generated parameters *and* the embedding
//!   concatenated to the generated network's input.
//!
//! Large/hyper widths are solved at build time so every population-aware
//! variant lands within a few percent of the same learnable-parameter budget.

use crate::encoding::EncodingKind;
use crate::env::GameConfig;
use crate::error::{Error, Result};
use crate::graph::{mat_mul, Graph, NodeId};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Embedding layer output width.
pub const EMBEDDING_DIM: usize = 128;
/// Default hidden widths of the three-layer policy network.
pub const POLICY_WIDTHS: [usize; 2] = [128, 128];
/// Default hypernetwork trunk widths.
pub const TRUNK_WIDTHS: [usize; 2] = [128, 128];
/// Init scale for hypernetwork head output layers; near zero so freshly
/// generated policies are near-uniform for every population size.
pub const HEAD_INIT_SCALE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Ppo,
    PpoLarge,
    AugPpo,
    AugPpoLarge,
    HyperPpo,
    Papo,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::Ppo,
        ArchKind::PpoLarge,
        ArchKind::AugPpo,
        ArchKind::AugPpoLarge,
        ArchKind::HyperPpo,
        ArchKind::Papo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Ppo => "ppo",
            ArchKind::PpoLarge => "ppo-large",
            ArchKind::AugPpo => "aug-ppo",
            ArchKind::AugPpoLarge => "aug-ppo-large",
            ArchKind::HyperPpo => "hyper-ppo",
            ArchKind::Papo => "papo",
        }
    }

    pub fn parse(s: &str) -> Result<ArchKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }

    /// Parameters are emitted by a hypernetwork.
    pub fn is_hyper(self) -> bool {
        matches!(self, ArchKind::HyperPpo | ArchKind::Papo)
    }

    /// The population embedding is concatenated to the policy input.
    pub fn is_augmented(self) -> bool {
        matches!(self, ArchKind::AugPpo | ArchKind::AugPpoLarge | ArchKind::Papo)
    }

    /// The architecture conditions on the population size at all.
    pub fn is_population_aware(self) -> bool {
        !matches!(self, ArchKind::Ppo | ArchKind::PpoLarge)
    }
}

/// Fully resolved dimensions for one build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: ArchKind,
    pub encoding: EncodingKind,
    pub encoding_bits: u32,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub emb_dim: usize,
    pub policy_widths: [usize; 2],
    pub trunk_widths: [usize; 2],
}

impl NetSpec {
    pub fn encoder_width(&self) -> usize {
        self.encoding.width(self.encoding_bits)
    }

    /// Input width of the (possibly generated) policy network.
    pub fn net_in_dim(&self) -> usize {
        if self.kind.is_augmented() {
            self.obs_dim + self.emb_dim
        } else {
            self.obs_dim
        }
    }

    fn layer_dims(&self, out: usize) -> [(usize, usize); 3] {
        let [h1, h2] = self.policy_widths;
        [(self.net_in_dim(), h1), (h1, h2), (h2, out)]
    }
}

/// One layer's weights `[in, out]`, biases `[1, out]`, scaling factors `[1, out]`.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
    pub g: Tensor,
}

impl LayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> LayerParams {
        LayerParams {
            w: Tensor::zeros(in_dim, out_dim),
            b: Tensor::zeros(1, out_dim),
            g: Tensor::zeros(1, out_dim),
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> LayerParams {
        LayerParams {
            w: Tensor::fan_in_uniform(in_dim, out_dim, in_dim, rng),
            b: Tensor::zeros(1, out_dim),
            g: Tensor::zeros(1, out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + self.g.len()
    }
}

/// A three-layer network's parameters, trained directly or generated.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros(dims: &[(usize, usize)]) -> ParamSet {
        ParamSet {
            layers: dims.iter().map(|&(i, o)| LayerParams::zeros(i, o)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Total scalar count of (w, b, g) across the given layer dims; the
    /// combined hypernetwork head output width.
    pub fn flat_dim(dims: &[(usize, usize)]) -> usize {
        dims.iter().map(|&(i, o)| i * o + 2 * o).sum()
    }
}

/// Modulated forward pass: per layer `x' = relu(x·w ⊙ (1+g) + b)`, no
/// activation after the final layer.
pub fn mlp_forward(params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    Ok(mlp_forward_with_taps(params, input)?.0)
}

/// Forward pass that also returns each layer's output (post-activation for
/// the hidden layers; raw logits for the last).
pub fn mlp_forward_with_taps(params: &ParamSet, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    if input.cols() != params.in_dim() {
        return Err(Error::Dimension(format!(
            "input width {} does not match layer-1 in_dim {}",
            input.cols(),
            params.in_dim()
        )));
    }
    let m = input.rows();
    let mut x = input.clone();
    let mut taps = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let (in_dim, out_dim) = (layer.w.rows(), layer.w.cols());
        let mut out = vec![0.0; m * out_dim];
        mat_mul(x.data(), layer.w.data(), &mut out, m, in_dim, out_dim, false);
        let last = li + 1 == params.layers.len();
        for row in out.chunks_mut(out_dim) {
            for ((v, &g), &b) in row.iter_mut().zip(layer.g.iter()).zip(layer.b.iter()) {
                *v = *v * (1.0 + g) + b;
                if !last {
                    *v = v.max(0.0);
                }
            }
        }
        x = Tensor::from_vec(m, out_dim, out);
        taps.push(x.clone());
    }
    Ok((x, taps))
}

/// Linear map from a population-size encoding to the embedding space.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl EmbeddingLayer {
    fn init(in_dim: usize, emb_dim: usize, rng: &mut Rng) -> EmbeddingLayer {
        EmbeddingLayer {
            w: Tensor::fan_in_uniform(in_dim, emb_dim, in_dim, rng),
            b: Tensor::zeros(1, emb_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn embed(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.w.rows(), "encoding width mismatch");
        let mut out = self.b.data().to_vec();
        mat_mul(features, self.w.data(), &mut out, 1, self.w.rows(), self.w.cols(), true);
        out
    }
}

/// One hypernetwork head: three linear maps from the trunk output to a target
/// layer's weights, biases, and scaling factors.
#[derive(Clone, Debug)]
pub struct Head {
    pub w_map: (Tensor, Tensor),
    pub b_map: (Tensor, Tensor),
    pub g_map: (Tensor, Tensor),
}

impl Head {
    fn init(trunk_out: usize, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Head {
        let lin = |cols: usize, rng: &mut Rng| {
            (
                Tensor::small_uniform(trunk_out, cols, HEAD_INIT_SCALE, rng),
                Tensor::zeros(1, cols),
            )
        };
        Head {
            w_map: lin(in_dim * out_dim, rng),
            b_map: lin(out_dim, rng),
            g_map: lin(out_dim, rng),
        }
    }
}

/// Trunk plus three independent heads, one per generated layer.
#[derive(Clone, Debug)]
pub struct Hypernetwork {
    pub trunk1: (Tensor, Tensor),
    pub trunk2: (Tensor, Tensor),
    pub heads: Vec<Head>,
    /// (in, out) of each generated layer.
    pub target_dims: Vec<(usize, usize)>,
}

impl Hypernetwork {
    fn init(
        emb_dim: usize,
        trunk_widths: [usize; 2],
        target_dims: &[(usize, usize)],
        rng: &mut Rng,
    ) -> Hypernetwork {
        let [t1, t2] = trunk_widths;
        Hypernetwork {
            trunk1: (
                Tensor::fan_in_uniform(emb_dim, t1, emb_dim, rng),
                Tensor::zeros(1, t1),
            ),
            trunk2: (Tensor::fan_in_uniform(t1, t2, t1, rng), Tensor::zeros(1, t2)),
            heads: target_dims
                .iter()
                .map(|&(i, o)| Head::init(t2, i, o, rng))
                .collect(),
            target_dims: target_dims.to_vec(),
        }
    }

    fn trunk_out(&self, emb: &[f64]) -> Vec<f64> {
        let linear = |x: &[f64], (w, b): &(Tensor, Tensor)| -> Vec<f64> {
            let mut out = b.data().to_vec();
            mat_mul(x, w.data(), &mut out, 1, w.rows(), w.cols(), true);
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
            out
        };
        let h1 = linear(emb, &self.trunk1);
        linear(&h1, &self.trunk2)
    }
}

/// Deterministic parameter generation: identical embeddings yield bitwise
/// identical parameter sets.
pub fn generate_params(hyper: &Hypernetwork, emb: &[f64]) -> ParamSet {
    assert_eq!(emb.len(), hyper.trunk1.0.rows(), "embedding width mismatch");
    let z = hyper.trunk_out(emb);
    let apply = |(w, b): &(Tensor, Tensor)| -> Vec<f64> {
        let mut out = b.data().to_vec();
        mat_mul(&z, w.data(), &mut out, 1, w.rows(), w.cols(), true);
        out
    };
    let layers = hyper
        .heads
        .iter()
        .zip(hyper.target_dims.iter())
        .map(|(head, &(i, o))| LayerParams {
            w: Tensor::from_vec(i, o, apply(&head.w_map)),
            b: Tensor::from_vec(1, o, apply(&head.b_map)),
            g: Tensor::from_vec(1, o, apply(&head.g_map)),
        })
        .collect();
    ParamSet { layers }
}

/// One side (actor or critic) of an architecture.
#[derive(Clone, Debug)]
pub enum Tower {
    Direct(ParamSet),
    Augmented {
        embed: EmbeddingLayer,
        net: ParamSet,
    },
    Hyper {
        embed: EmbeddingLayer,
        hyper: Hypernetwork,
        augment: bool,
    },
}

impl Tower {
    fn init(spec: &NetSpec, out: usize, rng: &mut Rng) -> Tower {
        let dims = spec.layer_dims(out);
        match spec.kind {
            ArchKind::Ppo | ArchKind::PpoLarge => Tower::Direct(ParamSet {
                layers: dims.iter().map(|&(i, o)| LayerParams::init(i, o, rng)).collect(),
            }),
            ArchKind::AugPpo | ArchKind::AugPpoLarge => Tower::Augmented {
                embed: EmbeddingLayer::init(spec.encoder_width(), spec.emb_dim, rng),
                net: ParamSet {
                    layers: dims.iter().map(|&(i, o)| LayerParams::init(i, o, rng)).collect(),
                },
            },
            ArchKind::HyperPpo | ArchKind::Papo => Tower::Hyper {
                embed: EmbeddingLayer::init(spec.encoder_width(), spec.emb_dim, rng),
                hyper: Hypernetwork::init(spec.emb_dim, spec.trunk_widths, &dims, rng),
                augment: spec.kind == ArchKind::Papo,
            },
        }
    }

    /// Concrete network for population features `enc`, plus the input
    /// augmentation row when the architecture concatenates the embedding.
    fn concrete(&self, enc: Option<&[f64]>) -> Result<(ParamSet, Option<Vec<f64>>)> {
        match self {
            Tower::Direct(ps) => Ok((ps.clone(), None)),
            Tower::Augmented { embed, net } => {
                let enc = enc.ok_or_else(|| {
                    Error::Dimension("population encoding required for this architecture".into())
                })?;
                Ok((net.clone(), Some(embed.embed(enc))))
            }
            Tower::Hyper { embed, hyper, augment } => {
                let enc = enc.ok_or_else(|| {
                    Error::Dimension("population encoding required for this architecture".into())
                })?;
                let emb = embed.embed(enc);
                let ps = generate_params(hyper, &emb);
                Ok((ps, augment.then_some(emb)))
            }
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Tower::Direct(ps) => visit_param_set(ps, prefix, f),
            Tower::Augmented { embed, net } => {
                f(format!("{prefix}.embed.w"), &embed.w);
                f(format!("{prefix}.embed.b"), &embed.b);
                visit_param_set(net, prefix, f);
            }
            Tower::Hyper { embed, hyper, .. } => {
                f(format!("{prefix}.embed.w"), &embed.w);
                f(format!("{prefix}.embed.b"), &embed.b);
                f(format!("{prefix}.trunk1.w"), &hyper.trunk1.0);
                f(format!("{prefix}.trunk1.b"), &hyper.trunk1.1);
                f(format!("{prefix}.trunk2.w"), &hyper.trunk2.0);
                f(format!("{prefix}.trunk2.b"), &hyper.trunk2.1);
                for (i, head) in hyper.heads.iter().enumerate() {
                    let l = i + 1;
                    f(format!("{prefix}.head{l}.w_map.w"), &head.w_map.0);
                    f(format!("{prefix}.head{l}.w_map.b"), &head.w_map.1);
                    f(format!("{prefix}.head{l}.b_map.w"), &head.b_map.0);
                    f(format!("{prefix}.head{l}.b_map.b"), &head.b_map.1);
                    f(format!("{prefix}.head{l}.g_map.w"), &head.g_map.0);
                    f(format!("{prefix}.head{l}.g_map.b"), &head.g_map.1);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Tower::Direct(ps) => visit_param_set_mut(ps, prefix, f),
            Tower::Augmented { embed, net } => {
                f(format!("{prefix}.embed.w"), &mut embed.w);
                f(format!("{prefix}.embed.b"), &mut embed.b);
                visit_param_set_mut(net, prefix, f);
            }
            Tower::Hyper { embed, hyper, .. } => {
                f(format!("{prefix}.embed.w"), &mut embed.w);
                f(format!("{prefix}.embed.b"), &mut embed.b);
                f(format!("{prefix}.trunk1.w"), &mut hyper.trunk1.0);
                f(format!("{prefix}.trunk1.b"), &mut hyper.trunk1.1);
                f(format!("{prefix}.trunk2.w"), &mut hyper.trunk2.0);
                f(format!("{prefix}.trunk2.b"), &mut hyper.trunk2.1);
                for (i, head) in hyper.heads.iter_mut().enumerate() {
                    let l = i + 1;
                    f(format!("{prefix}.head{l}.w_map.w"), &mut head.w_map.0);
                    f(format!("{prefix}.head{l}.w_map.b"), &mut head.w_map.1);
                    f(format!("{prefix}.head{l}.b_map.w"), &mut head.b_map.0);
                    f(format!("{prefix}.head{l}.b_map.b"), &mut head.b_map.1);
                    f(format!("{prefix}.head{l}.g_map.w"), &mut head.g_map.0);
                    f(format!("{prefix}.head{l}.g_map.b"), &mut head.g_map.1);
                }
            }
        }
    }
}

fn visit_param_set<'a>(ps: &'a ParamSet, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
    for (i, layer) in ps.layers.iter().enumerate() {
        let l = i + 1;
        f(format!("{prefix}.l{l}.w"), &layer.w);
        f(format!("{prefix}.l{l}.b"), &layer.b);
        f(format!("{prefix}.l{l}.g"), &layer.g);
    }
}

fn visit_param_set_mut(ps: &mut ParamSet, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
    for (i, layer) in ps.layers.iter_mut().enumerate() {
        let l = i + 1;
        f(format!("{prefix}.l{l}.w"), &mut layer.w);
        f(format!("{prefix}.l{l}.b"), &mut layer.b);
        f(format!("{prefix}.l{l}.g"), &mut layer.g);
    }
}

/// Actor plus critic for one architecture.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub spec: NetSpec,
    pub actor: Tower,
    pub critic: Tower,
}

/// A concrete per-population policy/value pair, cheap to evaluate per step.
#[derive(Clone, Debug)]
pub struct EpisodePolicy {
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub actor_aug: Option<Vec<f64>>,
    pub critic_aug: Option<Vec<f64>>,
}

impl EpisodePolicy {
    fn full_input(obs: &[f64], aug: &Option<Vec<f64>>) -> Tensor {
        match aug {
            Some(emb) => {
                let mut v = Vec::with_capacity(obs.len() + emb.len());
                v.extend_from_slice(obs);
                v.extend_from_slice(emb);
                Tensor::from_vec(1, v.len(), v)
            }
            None => Tensor::row(obs),
        }
    }

    /// Observation rows with the augmentation row appended to each, matching
    /// the actor's input width.
    pub fn actor_input(&self, obs_rows: &Tensor) -> Tensor {
        match &self.actor_aug {
            Some(emb) => {
                let m = obs_rows.rows();
                let mut data = Vec::with_capacity(m * (obs_rows.cols() + emb.len()));
                for i in 0..m {
                    data.extend_from_slice(obs_rows.row_slice(i));
                    data.extend_from_slice(emb);
                }
                Tensor::from_vec(m, obs_rows.cols() + emb.len(), data)
            }
            None => obs_rows.clone(),
        }
    }

    pub fn logits(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let x = Self::full_input(obs, &self.actor_aug);
        Ok(mlp_forward(&self.actor, &x)?.data().to_vec())
    }

    pub fn action_probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(obs)?))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        let x = Self::full_input(obs, &self.critic_aug);
        Ok(mlp_forward(&self.critic, &x)?.get(0, 0))
    }

    /// Sample an action; returns `(action_id, log_prob, value)`.
    pub fn act(&self, obs: &[f64], rng: &mut Rng) -> Result<(usize, f64, f64)> {
        let probs = self.action_probs(obs)?;
        let a = rng.categorical(&probs);
        let log_prob = probs[a].max(f64::MIN_POSITIVE).ln();
        Ok((a, log_prob, self.value(obs)?))
    }

    /// Sample an action without evaluating the critic.
    pub fn act_no_value(&self, obs: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
        let probs = self.action_probs(obs)?;
        let a = rng.categorical(&probs);
        Ok((a, probs[a].max(f64::MIN_POSITIVE).ln()))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}

impl ActorCritic {
    /// Build an architecture for an environment, sizing large/hyper variants
    /// for parameter parity with the unified architecture's budget.
    pub fn build(
        kind: ArchKind,
        env: &GameConfig,
        encoding: EncodingKind,
        bits: u32,
        seed: u64,
    ) -> ActorCritic {
        let spec = resolve_spec(
            kind,
            env.obs_dim(),
            env.action_count(),
            encoding,
            bits,
            EMBEDDING_DIM,
            POLICY_WIDTHS,
            TRUNK_WIDTHS,
        );
        ActorCritic::from_spec(spec, seed)
    }

    pub fn from_spec(spec: NetSpec, seed: u64) -> ActorCritic {
        let mut rng = Rng::derive(seed, &[tags::INIT]);
        let actor = Tower::init(&spec, spec.n_actions, &mut rng);
        let critic = Tower::init(&spec, 1, &mut rng);
        ActorCritic { spec, actor, critic }
    }

    /// Population features for the configured encoding.
    pub fn encode_population(&self, n: usize) -> Result<Vec<f64>> {
        self.spec.encoding.features(n, self.spec.encoding_bits)
    }

    /// Concrete policy/value networks for a population size.
    pub fn instantiate(&self, n: usize) -> Result<EpisodePolicy> {
        let enc = if self.spec.kind.is_population_aware() {
            Some(self.encode_population(n)?)
        } else {
            None
        };
        self.instantiate_from_features(enc.as_deref())
    }

    pub fn instantiate_from_features(&self, enc: Option<&[f64]>) -> Result<EpisodePolicy> {
        if self.spec.kind.is_population_aware() {
            match enc {
                Some(e) if e.len() == self.spec.encoder_width() => {}
                Some(e) => {
                    return Err(Error::Dimension(format!(
                        "population features width {} != encoder width {}",
                        e.len(),
                        self.spec.encoder_width()
                    )))
                }
                None => {
                    return Err(Error::Dimension(
                        "population encoding required for this architecture".into(),
                    ))
                }
            }
        }
        let (actor, actor_aug) = self.actor.concrete(enc)?;
        let (critic, critic_aug) = self.critic.concrete(enc)?;
        Ok(EpisodePolicy {
            actor,
            critic,
            actor_aug,
            critic_aug,
        })
    }

    /// Single-call interface: sample an action for one observation.
    /// `pop_features` is the raw population encoding; required exactly when
    /// the architecture is population-aware.
    pub fn act(
        &self,
        obs: &[f64],
        pop_features: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(usize, f64, f64)> {
        if obs.len() != self.spec.obs_dim {
            return Err(Error::Dimension(format!(
                "observation width {} != expected {}",
                obs.len(),
                self.spec.obs_dim
            )));
        }
        self.instantiate_from_features(pop_features)?.act(obs, rng)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.actor.visit("actor", &mut |n, t| out.push((n, t)));
        self.critic.visit("critic", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.actor.visit_mut("actor", f);
        self.critic.visit_mut("critic", f);
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn actor_param_count(&self) -> usize {
        let mut n = 0;
        self.actor.visit("actor", &mut |_, t| n += t.len());
        n
    }

    /// Leaf count belonging to the actor; leaves `[count..]` are the critic's.
    pub fn actor_leaf_count(&self) -> usize {
        let mut n = 0;
        self.actor.visit("actor", &mut |_, _| n += 1);
        n
    }

    /// Insert every trainable tensor as a graph leaf, canonical order.
    pub fn insert_leaves(&self, g: &mut Graph) -> ModelNodes {
        let mut ids = Vec::new();
        let actor = TowerNodes::insert(&self.actor, g, &mut ids);
        let critic = TowerNodes::insert(&self.critic, g, &mut ids);
        ModelNodes {
            leaf_ids: ids,
            actor,
            critic,
        }
    }
}

/// Graph-side handles to one tower's leaves, mirroring [`Tower`].
pub enum TowerNodes {
    Direct(Vec<(NodeId, NodeId, NodeId)>),
    Augmented {
        embed: (NodeId, NodeId),
        net: Vec<(NodeId, NodeId, NodeId)>,
    },
    Hyper {
        embed: (NodeId, NodeId),
        trunk1: (NodeId, NodeId),
        trunk2: (NodeId, NodeId),
        heads: Vec<[(NodeId, NodeId); 3]>,
        target_dims: Vec<(usize, usize)>,
        augment: bool,
    },
}

impl TowerNodes {
    fn insert(tower: &Tower, g: &mut Graph, ids: &mut Vec<NodeId>) -> TowerNodes {
        fn leaf(t: &Tensor, g: &mut Graph, ids: &mut Vec<NodeId>) -> NodeId {
            let id = g.leaf(t);
            ids.push(id);
            id
        }
        match tower {
            Tower::Direct(ps) => TowerNodes::Direct(
                ps.layers
                    .iter()
                    .map(|l| (leaf(&l.w, g, ids), leaf(&l.b, g, ids), leaf(&l.g, g, ids)))
                    .collect(),
            ),
            Tower::Augmented { embed, net } => TowerNodes::Augmented {
                embed: (leaf(&embed.w, g, ids), leaf(&embed.b, g, ids)),
                net: net
                    .layers
                    .iter()
                    .map(|l| (leaf(&l.w, g, ids), leaf(&l.b, g, ids), leaf(&l.g, g, ids)))
                    .collect(),
            },
            Tower::Hyper { embed, hyper, augment } => TowerNodes::Hyper {
                embed: (leaf(&embed.w, g, ids), leaf(&embed.b, g, ids)),
                trunk1: (leaf(&hyper.trunk1.0, g, ids), leaf(&hyper.trunk1.1, g, ids)),
                trunk2: (leaf(&hyper.trunk2.0, g, ids), leaf(&hyper.trunk2.1, g, ids)),
                heads: hyper
                    .heads
                    .iter()
                    .map(|h| {
                        [
                            (leaf(&h.w_map.0, g, ids), leaf(&h.w_map.1, g, ids)),
                            (leaf(&h.b_map.0, g, ids), leaf(&h.b_map.1, g, ids)),
                            (leaf(&h.g_map.0, g, ids), leaf(&h.g_map.1, g, ids)),
                        ]
                    })
                    .collect(),
                target_dims: hyper.target_dims.clone(),
                augment: *augment,
            },
        }
    }
}

/// Graph handles for a whole model; `leaf_ids` pairs with
/// [`ActorCritic::named_params`] order.
pub struct ModelNodes {
    pub leaf_ids: Vec<NodeId>,
    pub actor: TowerNodes,
    pub critic: TowerNodes,
}

/// Modulated three-layer forward over graph nodes. Returns `(output, taps)`.
pub fn mlp_nodes(
    g: &mut Graph,
    layers: &[(NodeId, NodeId, NodeId)],
    x: NodeId,
) -> (NodeId, Vec<NodeId>) {
    let mut cur = x;
    let mut taps = Vec::with_capacity(layers.len());
    for (li, &(w, b, gain)) in layers.iter().enumerate() {
        let z = g.matmul(cur, w);
        let one_plus = g.add_scalar(gain, 1.0);
        let modulated = g.mul_row(z, one_plus);
        let pre = g.add_row(modulated, b);
        cur = if li + 1 == layers.len() { pre } else { g.relu(pre) };
        taps.push(cur);
    }
    (cur, taps)
}

/// Batched tower evaluation for the update phase.
///
/// `enc_rows` holds one population-encoding row per *group* (distinct N in
/// the batch); `group_rows[gi]` is the observation matrix for group `gi`.
/// Returns one output node per group, aligned with `group_rows`. Hypernetwork
/// head weights are read once per call regardless of group count.
pub fn tower_forward_groups(
    g: &mut Graph,
    tower: &TowerNodes,
    enc_rows: &Tensor,
    group_rows: &[Tensor],
) -> Vec<NodeId> {
    let n_groups = group_rows.len();
    assert!(n_groups > 0);
    match tower {
        TowerNodes::Direct(layers) => group_rows
            .iter()
            .map(|rows| {
                let x = g.leaf(rows);
                mlp_nodes(g, layers, x).0
            })
            .collect(),
        TowerNodes::Augmented { embed, net } => {
            assert_eq!(enc_rows.rows(), n_groups);
            let enc = g.leaf(enc_rows);
            let emb_w = g.matmul(enc, embed.0);
            let emb = g.add_row(emb_w, embed.1);
            (0..n_groups)
                .map(|gi| {
                    let rows = &group_rows[gi];
                    let x = g.leaf(rows);
                    let erow = g.slice_rows(emb, gi, gi + 1);
                    let rep = g.repeat_row(erow, rows.rows());
                    let xin = g.concat_cols(x, rep);
                    mlp_nodes(g, net, xin).0
                })
                .collect()
        }
        TowerNodes::Hyper {
            embed,
            trunk1,
            trunk2,
            heads,
            target_dims,
            augment,
        } => {
            assert_eq!(enc_rows.rows(), n_groups);
            let enc = g.leaf(enc_rows);
            let emb_w = g.matmul(enc, embed.0);
            let emb = g.add_row(emb_w, embed.1);
            let h1w = g.matmul(emb, trunk1.0);
            let h1b = g.add_row(h1w, trunk1.1);
            let h1 = g.relu(h1b);
            let h2w = g.matmul(h1, trunk2.0);
            let h2b = g.add_row(h2w, trunk2.1);
            let z = g.relu(h2b);
            let theta: Vec<[NodeId; 3]> = heads
                .iter()
                .map(|maps| {
                    let mk = |g: &mut Graph, (w, b): (NodeId, NodeId)| {
                        let zw = g.matmul(z, w);
                        g.add_row(zw, b)
                    };
                    [mk(g, maps[0]), mk(g, maps[1]), mk(g, maps[2])]
                })
                .collect();
            (0..n_groups)
                .map(|gi| {
                    let layers: Vec<(NodeId, NodeId, NodeId)> = theta
                        .iter()
                        .zip(target_dims.iter())
                        .map(|(maps, &(i, o))| {
                            let wrow = g.slice_rows(maps[0], gi, gi + 1);
                            let w = g.reshape(wrow, i, o);
                            let b = g.slice_rows(maps[1], gi, gi + 1);
                            let gg = g.slice_rows(maps[2], gi, gi + 1);
                            (w, b, gg)
                        })
                        .collect();
                    let rows = &group_rows[gi];
                    let x = g.leaf(rows);
                    let xin = if *augment {
                        let erow = g.slice_rows(emb, gi, gi + 1);
                        let rep = g.repeat_row(erow, rows.rows());
                        g.concat_cols(x, rep)
                    } else {
                        x
                    };
                    mlp_nodes(g, &layers, xin).0
                })
                .collect()
        }
    }
}

fn direct_count(in_dim: usize, h1: usize, h2: usize, out: usize) -> usize {
    ParamSet::flat_dim(&[(in_dim, h1), (h1, h2), (h2, out)])
}

fn embed_count(enc_width: usize, emb_dim: usize) -> usize {
    enc_width * emb_dim + emb_dim
}

fn hyper_count(emb_dim: usize, t1: usize, t2: usize, theta: usize) -> usize {
    (emb_dim * t1 + t1) + (t1 * t2 + t2) + (t2 + 1) * theta
}

/// Learnable-parameter count of a spec without building it.
pub fn count_for_spec(spec: &NetSpec) -> usize {
    let [h1, h2] = spec.policy_widths;
    let [t1, t2] = spec.trunk_widths;
    let towers = direct_count(spec.net_in_dim(), h1, h2, spec.n_actions)
        + direct_count(spec.net_in_dim(), h1, h2, 1);
    match spec.kind {
        ArchKind::Ppo | ArchKind::PpoLarge => towers,
        ArchKind::AugPpo | ArchKind::AugPpoLarge => {
            towers + 2 * embed_count(spec.encoder_width(), spec.emb_dim)
        }
        ArchKind::HyperPpo | ArchKind::Papo => {
            let theta_a = direct_count(spec.net_in_dim(), h1, h2, spec.n_actions);
            let theta_c = direct_count(spec.net_in_dim(), h1, h2, 1);
            2 * embed_count(spec.encoder_width(), spec.emb_dim)
                + hyper_count(spec.emb_dim, t1, t2, theta_a)
                + hyper_count(spec.emb_dim, t1, t2, theta_c)
        }
    }
}

/// Resolve all widths for a build. The unified architecture with the given
/// base widths sets the parameter budget; large and hyper-only variants are
/// solved to match it.
#[allow(clippy::too_many_arguments)]
pub fn resolve_spec(
    kind: ArchKind,
    obs_dim: usize,
    n_actions: usize,
    encoding: EncodingKind,
    bits: u32,
    emb_dim: usize,
    policy_widths: [usize; 2],
    trunk_widths: [usize; 2],
) -> NetSpec {
    let base = |k: ArchKind| NetSpec {
        kind: k,
        encoding,
        encoding_bits: bits,
        obs_dim,
        n_actions,
        emb_dim,
        policy_widths,
        trunk_widths,
    };
    match kind {
        ArchKind::Ppo | ArchKind::AugPpo | ArchKind::Papo => base(kind),
        ArchKind::HyperPpo => {
            let target = count_for_spec(&base(ArchKind::Papo));
            let mut spec = base(ArchKind::HyperPpo);
            let mut best = (usize::MAX, trunk_widths[1]);
            for t2 in 1..=16384 {
                spec.trunk_widths[1] = t2;
                let c = count_for_spec(&spec);
                let diff = c.abs_diff(target);
                if diff < best.0 {
                    best = (diff, t2);
                }
                if c > target * 2 {
                    break;
                }
            }
            spec.trunk_widths[1] = best.1;
            spec
        }
        ArchKind::PpoLarge | ArchKind::AugPpoLarge => {
            let target = count_for_spec(&base(ArchKind::Papo));
            let mut spec = base(kind);
            let mut best = (usize::MAX, policy_widths[0]);
            for h in 1..=16384 {
                spec.policy_widths = [h, h];
                let c = count_for_spec(&spec);
                let diff = c.abs_diff(target);
                if diff < best.0 {
                    best = (diff, h);
                }
                if c > target * 2 {
                    break;
                }
            }
            spec.policy_widths = [best.1, best.1];
            spec
        }
    }
}
