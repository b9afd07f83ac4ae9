//! N-agent grid and circle games.
//!
//! Three environments share one mechanic: agents move deterministically on a
//! small state space and earn rewards that depend on the empirical
//! distribution of the whole population, so the crowd is the game. Moves that
//! would cross a grid boundary leave the agent in place; circle moves wrap.
//! Rewards are evaluated on the post-move distribution.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Floor inside reward logs; an agent's own cell always carries mass >= 1/N,
/// so this only guards the (rejected) impossible-state path.
const REWARD_LOG_FLOOR: f64 = 1e-12;

/// Reward bonus for standing on the point of interest in the circle game.
pub const POI_BONUS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Exploration,
    TaxiMatching,
    CrowdInCircle,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Exploration => "exploration",
            EnvKind::TaxiMatching => "taxi",
            EnvKind::CrowdInCircle => "crowd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Left,
    Right,
    Up,
    Down,
    Stay,
}

/// An action id, valid within its environment's action count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action(pub usize);

/// One agent's state: a cell index plus the episode clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentState {
    pub cell: usize,
    pub t: usize,
}

/// Positions of all agents at one timestep; the clock is shared.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointState {
    pub cells: Vec<usize>,
    pub t: usize,
}

impl JointState {
    pub fn n_agents(&self) -> usize {
        self.cells.len()
    }

    pub fn agent(&self, i: usize) -> AgentState {
        AgentState {
            cell: self.cells[i],
            t: self.t,
        }
    }
}

/// Occupancy fractions over the state space; every entry is a multiple of 1/N.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    probs: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, cell: usize) -> f64 {
        self.probs[cell]
    }
}

/// Fraction of agents in each state: `probs[s] = |{i : cell_i = s}| / N`.
pub fn empirical_distribution(joint: &JointState, n_states: usize) -> Result<EmpiricalDistribution> {
    let n = joint.n_agents();
    let mut counts = vec![0usize; n_states];
    for &cell in &joint.cells {
        if cell >= n_states {
            return Err(Error::InvalidState {
                index: cell,
                count: n_states,
            });
        }
        counts[cell] += 1;
    }
    let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(EmpiricalDistribution { probs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameConfig {
    pub kind: EnvKind,
    /// Grid side length for the 2-D games; state count for the circle.
    pub grid: usize,
    /// Rows of the 2-D state space; equals `grid` except in degenerate
    /// strip instances used by exact-enumeration oracles.
    pub rows: usize,
    /// Episode length (steps per episode).
    pub horizon: usize,
    pub n_agents: usize,
    /// Shared initial cell; `None` resolves to the map center (2-D) or 0.
    pub start_state: Option<usize>,
    /// Taxi: total order mass spread over the map.
    pub total_order_mass: f64,
    /// Taxi: std of the order Gaussian; `None` resolves to M/4.
    pub gaussian_sigma: Option<f64>,
    /// Circle: point of interest for the first half of the episode.
    pub poi_first: usize,
    /// Circle: point of interest for the second half.
    pub poi_second: usize,
    #[serde(skip)]
    order_cache: Option<Vec<f64>>,
}

impl GameConfig {
    pub fn exploration(m: usize) -> GameConfig {
        GameConfig::new(EnvKind::Exploration, m, m)
    }

    /// Degenerate 1 x `cells` exploration grid. Standard configs keep
    /// |S| = M^2; this constructor exists for exact-enumeration oracles on
    /// tiny instances (e.g. the two-cell game).
    pub fn exploration_strip(cells: usize) -> GameConfig {
        GameConfig::new(EnvKind::Exploration, cells, 1)
    }

    pub fn taxi(m: usize) -> GameConfig {
        GameConfig::new(EnvKind::TaxiMatching, m, m)
    }

    pub fn crowd(states: usize) -> GameConfig {
        GameConfig::new(EnvKind::CrowdInCircle, states, 1)
    }

    fn new(kind: EnvKind, grid: usize, rows: usize) -> GameConfig {
        assert!(grid >= 1, "state space must be non-empty");
        let mut cfg = GameConfig {
            kind,
            grid,
            rows,
            horizon: 20,
            n_agents: 2,
            start_state: None,
            total_order_mass: 100.0,
            gaussian_sigma: None,
            poi_first: 5,
            poi_second: 15,
            order_cache: None,
        };
        if kind == EnvKind::TaxiMatching {
            cfg.order_cache = Some(order_field(&cfg));
        }
        cfg
    }

    pub fn with_horizon(mut self, t: usize) -> GameConfig {
        assert!(t >= 1);
        self.horizon = t;
        self
    }

    pub fn with_agents(mut self, n: usize) -> GameConfig {
        assert!(n >= 2, "games need at least two agents");
        self.n_agents = n;
        self
    }

    /// Cheap per-episode clone for a different population size.
    pub fn for_population(&self, n: usize) -> GameConfig {
        assert!(n >= 2);
        let mut c = self.clone();
        c.n_agents = n;
        c
    }

    pub fn with_start_state(mut self, s0: usize) -> GameConfig {
        assert!(s0 < self.state_count());
        self.start_state = Some(s0);
        self
    }

    pub fn with_poi(mut self, first: usize, second: usize) -> GameConfig {
        assert!(first < self.state_count() && second < self.state_count());
        self.poi_first = first;
        self.poi_second = second;
        self
    }

    pub fn with_order_mass(mut self, mass: f64) -> GameConfig {
        assert!(mass > 0.0);
        self.total_order_mass = mass;
        self.refresh_order_cache();
        self
    }

    pub fn with_gaussian_sigma(mut self, sigma: f64) -> GameConfig {
        assert!(sigma > 0.0);
        self.gaussian_sigma = Some(sigma);
        self.refresh_order_cache();
        self
    }

    /// Recompute caches after deserialization or param edits.
    pub fn refresh_order_cache(&mut self) {
        if self.kind == EnvKind::TaxiMatching {
            self.order_cache = Some(order_field(self));
        }
    }

    pub fn is_circle(&self) -> bool {
        self.kind == EnvKind::CrowdInCircle
    }

    pub fn cols(&self) -> usize {
        self.grid
    }

    pub fn state_count(&self) -> usize {
        if self.is_circle() {
            self.grid
        } else {
            self.grid * self.rows
        }
    }

    pub fn action_count(&self) -> usize {
        if self.is_circle() {
            3
        } else {
            5
        }
    }

    /// Width of [`encode_observation`]'s output.
    pub fn obs_dim(&self) -> usize {
        self.state_count() + 1
    }

    pub fn resolved_sigma(&self) -> f64 {
        self.gaussian_sigma.unwrap_or(self.grid as f64 / 4.0)
    }

    pub fn resolved_start(&self) -> usize {
        match self.start_state {
            Some(s) => s,
            None if self.is_circle() => 0,
            None => {
                let (x, y) = (self.grid / 2, self.rows / 2);
                y * self.grid + x
            }
        }
    }

    pub fn move_of(&self, a: Action) -> Result<Move> {
        let moves: &[Move] = if self.is_circle() {
            &[Move::Left, Move::Right, Move::Stay]
        } else {
            &[Move::Left, Move::Right, Move::Up, Move::Down, Move::Stay]
        };
        moves.get(a.0).copied().ok_or_else(|| {
            Error::Contract(format!(
                "action id {} out of range for {} actions",
                a.0,
                self.action_count()
            ))
        })
    }

    pub fn apply_move(&self, cell: usize, mv: Move) -> usize {
        if self.is_circle() {
            let n = self.grid;
            match mv {
                Move::Left => (cell + n - 1) % n,
                Move::Right => (cell + 1) % n,
                _ => cell,
            }
        } else {
            let (w, h) = (self.grid, self.rows);
            let (x, y) = (cell % w, cell / w);
            let (nx, ny) = match mv {
                Move::Left => (x.saturating_sub(1), y),
                Move::Right => ((x + 1).min(w - 1), y),
                Move::Up => (x, y.saturating_sub(1)),
                Move::Down => (x, (y + 1).min(h - 1)),
                Move::Stay => (x, y),
            };
            ny * w + nx
        }
    }

    /// Point of interest at time `t` (circle only).
    pub fn poi_at(&self, t: usize) -> usize {
        if 2 * t <= self.horizon {
            self.poi_first
        } else {
            self.poi_second
        }
    }

    pub fn order(&self, cell: usize) -> f64 {
        self.order_cache
            .as_ref()
            .expect("order field requested on a non-taxi config")[cell]
    }

    pub fn initial_joint_state(&self) -> JointState {
        JointState {
            cells: vec![self.resolved_start(); self.n_agents],
            t: 0,
        }
    }
}

/// Expected order mass per cell: a discretized isotropic Gaussian centered on
/// the map, normalized so the field sums to `total_order_mass`. Deterministic
/// in the config.
pub fn order_field(config: &GameConfig) -> Vec<f64> {
    let (w, h) = (config.grid, config.rows);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sigma = config.resolved_sigma();
    let mut field: Vec<f64> = (0..w * h)
        .map(|cell| {
            let (x, y) = ((cell % w) as f64, (cell / w) as f64);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = field.iter().sum();
    for v in field.iter_mut() {
        *v *= config.total_order_mass / z;
    }
    field
}

/// Per-agent reward given the agent's (post-move) state and the population
/// distribution at the same timestep.
pub fn reward(config: &GameConfig, state: &AgentState, dist: &EmpiricalDistribution) -> Result<f64> {
    let occupancy = dist.prob(state.cell);
    if occupancy <= 0.0 {
        return Err(Error::ImpossibleState { cell: state.cell });
    }
    let crowding = -occupancy.max(REWARD_LOG_FLOOR).ln();
    Ok(match config.kind {
        EnvKind::Exploration => crowding,
        EnvKind::TaxiMatching => config.order(state.cell) * crowding,
        EnvKind::CrowdInCircle => {
            let bonus = if state.cell == config.poi_at(state.t) {
                POI_BONUS
            } else {
                0.0
            };
            crowding + bonus
        }
    })
}

/// Advance all agents one step. Returns the post-move joint state and the
/// per-agent rewards computed from the post-move empirical distribution.
pub fn step(
    config: &GameConfig,
    joint: &JointState,
    actions: &[Action],
) -> Result<(JointState, Vec<f64>)> {
    if joint.t >= config.horizon {
        return Err(Error::EpisodeFinished {
            t: joint.t,
            horizon: config.horizon,
        });
    }
    if actions.len() != joint.n_agents() {
        return Err(Error::Contract(format!(
            "{} actions for {} agents",
            actions.len(),
            joint.n_agents()
        )));
    }
    let mut cells = Vec::with_capacity(joint.n_agents());
    for (&cell, &a) in joint.cells.iter().zip(actions.iter()) {
        if cell >= config.state_count() {
            return Err(Error::InvalidState {
                index: cell,
                count: config.state_count(),
            });
        }
        cells.push(config.apply_move(cell, config.move_of(a)?));
    }
    let next = JointState {
        cells,
        t: joint.t + 1,
    };
    let dist = empirical_distribution(&next, config.state_count())?;
    let rewards = next
        .cells
        .iter()
        .map(|&cell| {
            reward(
                config,
                &AgentState { cell, t: next.t },
                &dist,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((next, rewards))
}

/// One-hot cell indicator concatenated with the normalized clock `t/T`.
pub fn encode_observation(config: &GameConfig, state: &AgentState) -> Vec<f64> {
    let n = config.state_count();
    let mut obs = vec![0.0; n + 1];
    obs[state.cell] = 1.0;
    obs[n] = state.t as f64 / config.horizon as f64;
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn joint(cells: &[usize], t: usize) -> JointState {
        JointState {
            cells: cells.to_vec(),
            t,
        }
    }

    #[test]
    fn distribution_all_mass_on_one_cell() {
        let d = empirical_distribution(&joint(&[0, 0], 0), 4).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn distribution_uniform_spread() {
        let d = empirical_distribution(&joint(&[0, 1, 2, 3], 0), 4).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn distribution_direct_count() {
        let d = empirical_distribution(&joint(&[0, 0, 2], 0), 4).unwrap();
        assert!((d.prob(0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.prob(1), 0.0);
        assert!((d.prob(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distribution_rejects_out_of_range_cells() {
        assert!(matches!(
            empirical_distribution(&joint(&[4], 0), 4),
            Err(Error::InvalidState { index: 4, count: 4 })
        ));
    }

    #[test]
    fn wall_clamp_on_left_edge() {
        let cfg = GameConfig::exploration(10);
        // (0, 0) is cell 0.
        assert_eq!(cfg.apply_move(0, Move::Left), 0);
        assert_eq!(cfg.apply_move(0, Move::Up), 0);
    }

    #[test]
    fn deterministic_move_right() {
        let cfg = GameConfig::exploration(10);
        let cell = 4 * 10 + 3; // (x=3, y=4)
        assert_eq!(cfg.apply_move(cell, Move::Right), 4 * 10 + 4);
    }

    #[test]
    fn circle_wraps() {
        let cfg = GameConfig::crowd(20);
        assert_eq!(cfg.apply_move(0, Move::Left), 19);
        assert_eq!(cfg.apply_move(19, Move::Right), 0);
    }

    #[test]
    fn step_increments_clock_and_errors_at_horizon() {
        let cfg = GameConfig::exploration(3).with_horizon(2);
        let s0 = cfg.initial_joint_state();
        let (s1, _) = step(&cfg, &s0, &[Action(4), Action(4)]).unwrap();
        assert_eq!(s1.t, 1);
        let (s2, _) = step(&cfg, &s1, &[Action(4), Action(4)]).unwrap();
        assert!(matches!(
            step(&cfg, &s2, &[Action(4), Action(4)]),
            Err(Error::EpisodeFinished { t: 2, horizon: 2 })
        ));
    }

    #[test]
    fn exploration_reward_is_neg_log_occupancy() {
        let cfg = GameConfig::exploration(10);
        let dist = EmpiricalDistribution {
            probs: {
                let mut p = vec![0.0; 100];
                p[7] = 0.01;
                p[0] = 0.99;
                p
            },
        };
        let r = reward(&cfg, &AgentState { cell: 7, t: 0 }, &dist).unwrap();
        assert!((r - 4.605170185988091).abs() < 1e-12);
    }

    #[test]
    fn taxi_reward_scales_by_order_mass() {
        let cfg = GameConfig::taxi(1); // single cell: the whole mass sits on it
        let dist = EmpiricalDistribution { probs: vec![0.5] };
        // o_s = 100 here; check against o_s * (-log 0.5).
        let r = reward(&cfg, &AgentState { cell: 0, t: 0 }, &dist).unwrap();
        assert!((r - 100.0 * 0.6931471805599453).abs() < 1e-9);
    }

    #[test]
    fn crowd_reward_adds_bonus_on_poi() {
        let cfg = GameConfig::crowd(20); // PoI at 5 for the first half
        let dist = EmpiricalDistribution {
            probs: {
                let mut p = vec![0.0; 20];
                p[5] = 0.1;
                p[6] = 0.9;
                p
            },
        };
        let on = reward(&cfg, &AgentState { cell: 5, t: 0 }, &dist).unwrap();
        assert!((on - (0.1f64.ln().abs() + 5.0)).abs() < 1e-12);
        let dist2 = EmpiricalDistribution {
            probs: {
                let mut p = vec![0.0; 20];
                p[6] = 0.1;
                p[5] = 0.9;
                p
            },
        };
        let off = reward(&cfg, &AgentState { cell: 6, t: 0 }, &dist2).unwrap();
        assert!((on - off - POI_BONUS).abs() < 1e-12);
    }

    #[test]
    fn poi_switches_at_half_horizon() {
        let cfg = GameConfig::crowd(20).with_horizon(20);
        assert_eq!(cfg.poi_at(10), 5);
        assert_eq!(cfg.poi_at(11), 15);
    }

    #[test]
    fn zero_occupancy_is_impossible_state() {
        let cfg = GameConfig::exploration(2);
        let dist = EmpiricalDistribution {
            probs: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!(matches!(
            reward(&cfg, &AgentState { cell: 3, t: 0 }, &dist),
            Err(Error::ImpossibleState { cell: 3 })
        ));
    }

    #[test]
    fn order_field_sums_to_total_mass() {
        let cfg = GameConfig::taxi(10);
        let field = order_field(&cfg);
        let sum: f64 = field.iter().sum();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn order_field_peaks_at_center() {
        let cfg = GameConfig::taxi(9);
        let field = order_field(&cfg);
        let center = field[4 * 9 + 4];
        for &corner in &[0, 8, 72, 80] {
            assert!(center >= field[corner]);
        }
    }

    #[test]
    fn order_field_degenerate_grid() {
        let cfg = GameConfig::taxi(1);
        assert_eq!(order_field(&cfg), vec![100.0]);
    }

    #[test]
    fn observation_is_one_hot_plus_clock() {
        let cfg = GameConfig::exploration(2).with_horizon(20);
        let obs = encode_observation(&cfg, &AgentState { cell: 2, t: 0 });
        assert_eq!(obs, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let obs = encode_observation(&cfg, &AgentState { cell: 0, t: 20 });
        assert_eq!(obs, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn strip_config_has_flat_topology() {
        let cfg = GameConfig::exploration_strip(2);
        assert_eq!(cfg.state_count(), 2);
        assert_eq!(cfg.apply_move(0, Move::Left), 0);
        assert_eq!(cfg.apply_move(0, Move::Right), 1);
        assert_eq!(cfg.apply_move(0, Move::Up), 0);
        assert_eq!(cfg.apply_move(0, Move::Down), 0);
        assert_eq!(cfg.apply_move(1, Move::Right), 1);
    }

    #[test]
    fn step_is_deterministic() {
        let cfg = GameConfig::taxi(5).with_agents(3);
        let s = joint(&[0, 7, 12], 2);
        let a = [Action(1), Action(0), Action(4)];
        let (s1, r1) = step(&cfg, &s, &a).unwrap();
        let (s2, r2) = step(&cfg, &s, &a).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn rewards_equal_for_cohabiting_agents() {
        let cfg = GameConfig::exploration(4).with_agents(4);
        let s = joint(&[5, 5, 9, 2], 0);
        let (_, r) = step(&cfg, &s, &[Action(4); 4]).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn exploration_reward_decreases_with_occupancy() {
        // r(1/N) > r(2/N) for fixed N.
        let cfg = GameConfig::exploration(3);
        let n = 8.0;
        let lo = EmpiricalDistribution {
            probs: vec![1.0 / n, (n - 1.0) / n, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let hi = EmpiricalDistribution {
            probs: vec![2.0 / n, (n - 2.0) / n, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let s = AgentState { cell: 0, t: 0 };
        assert!(reward(&cfg, &s, &lo).unwrap() > reward(&cfg, &s, &hi).unwrap());
    }

    #[test]
    fn circle_full_loop_returns_home() {
        let cfg = GameConfig::crowd(20);
        let mut cell = 13;
        for _ in 0..20 {
            cell = cfg.apply_move(cell, Move::Left);
        }
        assert_eq!(cell, 13);
    }

    proptest! {
        #[test]
        fn distribution_entries_are_multiples_of_one_over_n(
            cells in proptest::collection::vec(0usize..9, 2..20)
        ) {
            let n = cells.len();
            let d = empirical_distribution(&joint(&cells, 0), 9).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for &p in d.probs() {
                let k = p * n as f64;
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
        }

        #[test]
        fn permuting_other_agents_preserves_distribution_and_reward(
            mut cells in proptest::collection::vec(0usize..25, 3..12),
            swap in any::<(usize, usize)>()
        ) {
            let cfg = GameConfig::exploration(5).with_agents(cells.len());
            let d1 = empirical_distribution(&joint(&cells, 1), 25).unwrap();
            let r1 = reward(&cfg, &AgentState { cell: cells[0], t: 1 }, &d1).unwrap();
            // Permute agents 2..N only.
            let (i, j) = (1 + swap.0 % (cells.len() - 1), 1 + swap.1 % (cells.len() - 1));
            cells.swap(i, j);
            let d2 = empirical_distribution(&joint(&cells, 1), 25).unwrap();
            let r2 = reward(&cfg, &AgentState { cell: cells[0], t: 1 }, &d2).unwrap();
            prop_assert_eq!(d1, d2);
            prop_assert_eq!(r1, r2);
        }
    }
}
