//! Single-subgoal value functions, softmax/optimal policies, and
//! hierarchical path generation.
//!
//! Each local MDP is deterministic with action cost 2, no discounting, and
//! a terminal reward of 100 at the subgoal, so the value of a state is
//! `100 - 2 * shortest_path_distance`. States that cannot reach the goal
//! (there is no Down move) are absent from the table.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gridworld::{Action, GridMap, State};
use crate::likelihood::{StateSequence, SubgoalSequence};

pub const GOAL_REWARD: f64 = 100.0;
pub const STEP_COST: f64 = 2.0;

/// Tolerance for treating two Q-values as tied.
const Q_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ValueTable {
    pub goal: State,
    values: HashMap<State, f64>,
}

impl ValueTable {
    pub fn value(&self, s: State) -> Option<f64> {
        self.values.get(&s).copied()
    }

    pub fn reachable_states(&self) -> impl Iterator<Item = (&State, &f64)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fixed point of the Bellman backup for a single goal cell. On a
/// deterministic grid this is a reverse breadth-first search.
pub fn plan_values(map: &GridMap, goal: State) -> ValueTable {
    let mut dist: HashMap<State, u32> = HashMap::new();
    let mut queue = VecDeque::new();
    if map.is_open(goal) {
        dist.insert(goal, 0);
        queue.push_back(goal);
    }
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        for a in Action::ALL {
            let (dx, dy) = a.delta();
            let pred = State::new(s.x - dx, s.y - dy);
            if map.is_open(pred) && !dist.contains_key(&pred) {
                dist.insert(pred, d + 1);
                queue.push_back(pred);
            }
        }
    }
    let values = dist
        .into_iter()
        .map(|(s, d)| (s, GOAL_REWARD - STEP_COST * d as f64))
        .collect();
    ValueTable { goal, values }
}

/// Read-shared memo of value tables keyed by goal cell. One cache serves
/// one map.
#[derive(Debug, Default)]
pub struct ValueCache {
    inner: RwLock<HashMap<State, Arc<ValueTable>>>,
}

impl ValueCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, map: &GridMap, goal: State) -> Arc<ValueTable> {
        if let Some(v) = self.inner.read().unwrap().get(&goal) {
            return Arc::clone(v);
        }
        let table = Arc::new(plan_values(map, goal));
        let mut w = self.inner.write().unwrap();
        Arc::clone(w.entry(goal).or_insert(table))
    }
}

/// Q-values over the admissible actions in `s`: those whose successor can
/// still reach the goal. Dead-end actions are excluded from the support.
pub fn q_values(map: &GridMap, table: &ValueTable, s: State) -> Vec<(Action, f64)> {
    map.available_actions(s)
        .into_iter()
        .filter_map(|a| {
            let next = map.transition(s, a).ok()?;
            let v = table.value(next)?;
            Some((a, v - STEP_COST))
        })
        .collect()
}

/// Softmax (Boltzmann) distribution over admissible actions,
/// `P(a) ∝ exp(beta * Q(s, a))`, computed with max-subtraction.
pub fn softmax_policy(
    map: &GridMap,
    table: &ValueTable,
    s: State,
    beta: f64,
) -> Result<Vec<(Action, f64)>> {
    let qs = q_values(map, table, s);
    if qs.is_empty() {
        return Err(CoreError::GoalUnreachable);
    }
    let qmax = qs.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(Action, f64)> = qs
        .iter()
        .map(|&(a, q)| (a, (beta * (q - qmax)).exp()))
        .collect();
    let z: f64 = probs.iter().map(|&(_, p)| p).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    Ok(probs)
}

/// Log-probability of one specific admissible action under the softmax
/// policy, or `None` if the action is outside the support.
pub fn action_log_prob(
    map: &GridMap,
    table: &ValueTable,
    s: State,
    a: Action,
    beta: f64,
) -> Option<f64> {
    let qs = q_values(map, table, s);
    let q_a = qs.iter().find(|&&(act, _)| act == a).map(|&(_, q)| q)?;
    let qmax = qs.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
    let log_z = qs
        .iter()
        .map(|&(_, q)| (beta * (q - qmax)).exp())
        .sum::<f64>()
        .ln();
    Some(beta * (q_a - qmax) - log_z)
}

/// The argmax-Q action set (ties within `Q_TIE_EPS`).
pub fn optimal_actions(map: &GridMap, table: &ValueTable, s: State) -> Vec<Action> {
    let qs = q_values(map, table, s);
    let qmax = qs.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
    qs.into_iter()
        .filter(|&(_, q)| q >= qmax - Q_TIE_EPS)
        .map(|(a, _)| a)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    Softmax,
    Optimal,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub beta: f64,
    pub mode: PolicyMode,
    pub seed: u64,
}

impl PlannerConfig {
    pub fn optimal(seed: u64) -> Self {
        PlannerConfig {
            beta: 0.0,
            mode: PolicyMode::Optimal,
            seed,
        }
    }

    pub fn softmax(beta: f64, seed: u64) -> Self {
        PlannerConfig {
            beta,
            mode: PolicyMode::Softmax,
            seed,
        }
    }
}

/// Tracks progress through a subgoal sequence during execution.
#[derive(Debug, Clone)]
pub struct ExecutionState {
    goals: Vec<State>,
    pub current_index: usize,
}

impl ExecutionState {
    pub fn new(goals: Vec<State>) -> Self {
        ExecutionState {
            goals,
            current_index: 0,
        }
    }

    pub fn current(&self) -> Option<State> {
        self.goals.get(self.current_index).copied()
    }

    pub fn pending(&self) -> &[State] {
        &self.goals[self.current_index.min(self.goals.len())..]
    }

    /// Advances past every goal equal to `s`; returns true if anything advanced.
    pub fn advance_at(&mut self, s: State) -> bool {
        let mut advanced = false;
        while self.current() == Some(s) {
            self.current_index += 1;
            advanced = true;
        }
        advanced
    }

    pub fn done(&self) -> bool {
        self.current_index >= self.goals.len()
    }
}

const MAX_PATH_STEPS: usize = 100_000;

/// Generates a path from `start` that achieves `gseq` (items in row order,
/// then the destination) under the configured policy.
pub fn generate_path(
    map: &GridMap,
    cache: &ValueCache,
    gseq: &SubgoalSequence,
    start: State,
    cfg: &PlannerConfig,
) -> Result<StateSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_path_with_rng(map, cache, gseq, start, cfg, &mut rng)
}

/// As [`generate_path`] but sampling from a caller-owned RNG stream.
pub fn generate_path_with_rng<R: Rng>(
    map: &GridMap,
    cache: &ValueCache,
    gseq: &SubgoalSequence,
    start: State,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<StateSequence> {
    let goals = gseq.goal_cells(map)?;
    let mut exec = ExecutionState::new(goals);
    let mut states = vec![start];
    let mut cur = start;
    exec.advance_at(cur);
    while !exec.done() {
        if states.len() > MAX_PATH_STEPS {
            return Err(CoreError::Unachievable);
        }
        let goal = exec.current().unwrap();
        let table = cache.get(map, goal);
        if table.value(cur).is_none() {
            return Err(CoreError::Unachievable);
        }
        let a = match cfg.mode {
            PolicyMode::Optimal => {
                let opts = optimal_actions(map, &table, cur);
                if opts.is_empty() {
                    return Err(CoreError::Unachievable);
                }
                opts[rng.random_range(0..opts.len())]
            }
            PolicyMode::Softmax => {
                let probs = softmax_policy(map, &table, cur, cfg.beta)?;
                let mut u: f64 = rng.random();
                let mut chosen = probs[probs.len() - 1].0;
                for &(a, p) in &probs {
                    if u < p {
                        chosen = a;
                        break;
                    }
                    u -= p;
                }
                chosen
            }
        };
        cur = map.transition(cur, a)?;
        states.push(cur);
        exec.advance_at(cur);
    }
    Ok(StateSequence::new(states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Dest;

    fn bfs_distance(map: &GridMap, from: State, to: State) -> Option<u32> {
        let mut dist = HashMap::new();
        let mut q = VecDeque::new();
        dist.insert(from, 0u32);
        q.push_back(from);
        while let Some(s) = q.pop_front() {
            if s == to {
                return Some(dist[&s]);
            }
            let d = dist[&s];
            for a in map.available_actions(s) {
                let n = map.transition(s, a).unwrap();
                dist.entry(n).or_insert_with(|| {
                    q.push_back(n);
                    d + 1
                });
            }
        }
        None
    }

    #[test]
    fn values_match_bfs_oracle() {
        let map = GridMap::canonical();
        let goal = State::new(5, 6);
        let table = plan_values(&map, goal);
        assert_eq!(table.value(goal), Some(100.0));
        assert_eq!(table.value(State::new(5, 0)), Some(88.0));
        assert_eq!(table.value(State::new(5, 9)), None);
        for (&s, &v) in table.reachable_states() {
            let d = bfs_distance(&map, s, goal).unwrap();
            assert_eq!(v, 100.0 - 2.0 * d as f64);
        }
    }

    #[test]
    fn bellman_consistency() {
        let map = GridMap::canonical();
        let table = plan_values(&map, State::new(9, 12));
        for (&s, &v) in table.reachable_states() {
            if s == table.goal {
                continue;
            }
            let best = q_values(&map, &table, s)
                .into_iter()
                .map(|(_, q)| q)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(v, best);
        }
    }

    #[test]
    fn softmax_uniform_at_beta_zero() {
        let map = GridMap::canonical();
        let table = plan_values(&map, State::new(5, 6));
        let probs = softmax_policy(&map, &table, State::new(5, 3), 0.0).unwrap();
        for &(_, p) in &probs {
            assert!((p - 1.0 / probs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_explicit_value() {
        let map = GridMap::canonical();
        let table = plan_values(&map, State::new(5, 6));
        let s = State::new(5, 0);
        let probs = softmax_policy(&map, &table, s, 6.0).unwrap();
        let get = |a: Action| probs.iter().find(|&&(x, _)| x == a).unwrap().1;
        assert!((get(Action::Left) - get(Action::Right)).abs() < 1e-15);
        // Q(Up)=88, Q(Left)=Q(Right)=84, so
        // P(Up) = e^{6*88} / (e^{6*88} + 2 e^{6*84}) = 1 / (1 + 2 e^{-24}).
        let expected = 1.0 / (1.0 + 2.0 * (-6.0f64 * 4.0).exp());
        assert!((get(Action::Up) - expected).abs() < 1e-12);
        let total: f64 = probs.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_beta_matches_optimal_argmax() {
        let map = GridMap::canonical();
        let table = plan_values(&map, State::new(9, 12));
        for s in [State::new(0, 0), State::new(5, 4), State::new(9, 11)] {
            let probs = softmax_policy(&map, &table, s, 100.0).unwrap();
            let pmax = probs.iter().map(|&(_, p)| p).fold(f64::NEG_INFINITY, f64::max);
            let mut soft_argmax: Vec<Action> = probs
                .iter()
                .filter(|&&(_, p)| p >= pmax - 1e-9)
                .map(|&(a, _)| a)
                .collect();
            let mut opt = optimal_actions(&map, &table, s);
            soft_argmax.sort_by_key(|a| *a as u8);
            opt.sort_by_key(|a| *a as u8);
            assert_eq!(soft_argmax, opt);
        }
    }

    #[test]
    fn optimal_path_length_matches_bfs_sum() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let gseq = SubgoalSequence::new(vec![8], Dest::B).unwrap();
        let start = State::new(5, 0);
        let cfg = PlannerConfig::optimal(7);
        let path = generate_path(&map, &cache, &gseq, start, &cfg).unwrap();
        assert_eq!(path.len(), 13); // 12 steps
        let d1 = bfs_distance(&map, start, State::new(5, 9)).unwrap();
        let d2 = bfs_distance(&map, State::new(5, 9), State::new(5, 12)).unwrap();
        assert_eq!(path.len() - 1, (d1 + d2) as usize);
    }

    #[test]
    fn softmax_path_is_deterministic_under_seed() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let gseq = SubgoalSequence::new(vec![2, 8], Dest::B).unwrap();
        let cfg = PlannerConfig::softmax(6.0, 42);
        let p1 = generate_path(&map, &cache, &gseq, State::new(3, 0), &cfg).unwrap();
        let p2 = generate_path(&map, &cache, &gseq, State::new(3, 0), &cfg).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn unachievable_sequence_errors() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        // Start above row 1 makes a row-1 item unreachable.
        let gseq = SubgoalSequence::new(vec![2], Dest::B).unwrap();
        let cfg = PlannerConfig::optimal(0);
        let res = generate_path(&map, &cache, &gseq, State::new(5, 5), &cfg);
        assert!(res.is_err());
    }
}
