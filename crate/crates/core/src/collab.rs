//! Worker-Helper collaboration simulation.
//!
//! A Worker executes a randomly drawn job (item list + destination) with
//! an optimal planner. A Helper watches the Worker's path prefix, keeps a
//! posterior-weighted marginal over the target row-3 item, and once some
//! item's marginal exceeds a threshold it commits, fetches that item, and
//! delivers it to its inferred destination. The score counts Worker steps
//! only.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gridworld::{Dest, GridMap, State};
use crate::inference::{
    copy_model, gibbs_infer, independent_model, logical_possibility_model, GibbsConfig,
    PosteriorTable,
};
use crate::likelihood::{StateSequence, SubgoalSequence};
use crate::planner::{action_log_prob, generate_path_with_rng, optimal_actions, PlannerConfig, ValueCache};

/// A job's item lists per destination (the ground truth of one simulated
/// warehouse).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalStructure {
    lists: BTreeMap<Dest, Vec<SubgoalSequence>>,
}

impl SubgoalStructure {
    pub fn new(lists: BTreeMap<Dest, Vec<SubgoalSequence>>) -> Result<Self> {
        for d in Dest::ALL {
            let ls = lists
                .get(&d)
                .ok_or_else(|| CoreError::InvalidConfig(format!("no lists for {d}")))?;
            if ls.is_empty() {
                return Err(CoreError::InvalidConfig(format!("empty list set for {d}")));
            }
            for g in ls {
                if g.dest() != d {
                    return Err(CoreError::InvalidConfig(format!(
                        "list {g} filed under destination {d}"
                    )));
                }
            }
        }
        Ok(SubgoalStructure { lists })
    }

    pub fn lists(&self, dest: Dest) -> &[SubgoalSequence] {
        &self.lists[&dest]
    }

    /// Samples one structure for an Experiment 2 setting:
    /// 1 — one single-row-3-item list per destination;
    /// 2 — one [row-2, row-3] list per destination;
    /// 3 — two distinct single-row-3-item lists per destination.
    pub fn sample(map: &GridMap, setting: u8, rng: &mut impl Rng) -> Result<Self> {
        let row2 = map.row_items(2);
        let row3 = map.row_items(3);
        if row3.is_empty() || (setting == 2 && row2.is_empty()) {
            return Err(CoreError::InvalidConfig("map lacks required item rows".into()));
        }
        let mut lists = BTreeMap::new();
        for d in Dest::ALL {
            let ls = match setting {
                1 => {
                    let i3 = row3[rng.random_range(0..row3.len())];
                    vec![SubgoalSequence::new(vec![i3], d)?]
                }
                2 => {
                    let i2 = row2[rng.random_range(0..row2.len())];
                    let i3 = row3[rng.random_range(0..row3.len())];
                    vec![SubgoalSequence::new(vec![i2, i3], d)?]
                }
                3 => {
                    let a = rng.random_range(0..row3.len());
                    let mut b = rng.random_range(0..row3.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    vec![
                        SubgoalSequence::new(vec![row3[a]], d)?,
                        SubgoalSequence::new(vec![row3[b]], d)?,
                    ]
                }
                s => {
                    return Err(CoreError::InvalidConfig(format!("unknown setting {s}")));
                }
            };
            lists.insert(d, ls);
        }
        SubgoalStructure::new(lists)
    }
}

/// Which posterior drives the Helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSource {
    Crp,
    Independent,
    Logical,
    Copy,
    GroundTruth,
    /// The Helper never commits (No Helper baseline).
    None,
}

impl PosteriorSource {
    pub const ALL: [PosteriorSource; 6] = [
        PosteriorSource::Crp,
        PosteriorSource::Independent,
        PosteriorSource::Logical,
        PosteriorSource::Copy,
        PosteriorSource::GroundTruth,
        PosteriorSource::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosteriorSource::Crp => "crp",
            PosteriorSource::Independent => "independent",
            PosteriorSource::Logical => "logical",
            PosteriorSource::Copy => "copy",
            PosteriorSource::GroundTruth => "ground_truth",
            PosteriorSource::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PosteriorSource::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown model '{s}'")))
    }
}

impl fmt::Display for PosteriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HelperConfig {
    /// Decision probability threshold for committing to a target item.
    pub threshold: f64,
    /// Softmax parameter of the Helper's Worker model.
    pub beta_helper: f64,
    pub source: PosteriorSource,
}

impl Default for HelperConfig {
    fn default() -> Self {
        HelperConfig {
            threshold: 0.5,
            beta_helper: 2.0,
            source: PosteriorSource::Crp,
        }
    }
}

impl HelperConfig {
    pub fn with_source(source: PosteriorSource) -> Self {
        HelperConfig {
            source,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(CoreError::InvalidConfig("threshold must be in (0, 1]".into()));
        }
        if self.beta_helper <= 0.0 {
            return Err(CoreError::InvalidConfig("beta_helper must be > 0".into()));
        }
        Ok(())
    }
}

/// One logged agent step in an episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepEvent {
    pub t: usize,
    pub agent: String,
    pub state: State,
}

/// Outcome of one Worker-Helper episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub worker_steps: usize,
    pub score: f64,
    pub helper_target: Option<u8>,
    pub target_correct: bool,
    pub destination_correct: bool,
    /// Worker step index at which the Helper committed (0 = before the
    /// first move).
    pub decision_time: Option<usize>,
    pub helper_dest: Option<Dest>,
    /// Helper locomotion steps (logged, never scored).
    pub helper_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<StepEvent>,
}

/// Target-item marginal: probabilities per item id plus the probability
/// that the underlying sequence carries no row-3 item. Because every
/// sequence has at most one item per row, `none` plus the row-3 item
/// entries sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMarginal {
    pub items: BTreeMap<u8, f64>,
    pub none: f64,
}

impl TargetMarginal {
    /// The row-3 item with the largest marginal, if any.
    pub fn best_row3(&self, map: &GridMap) -> Option<(u8, f64)> {
        self.items
            .iter()
            .filter(|(&id, _)| GridMap::item_row(id) == 3)
            .map(|(&id, &p)| (id, p))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
            .filter(|_| !map.row_items(3).is_empty())
    }
}

/// One Helper hypothesis: a (destination, sequence) pair with its
/// posterior log-weight and an incrementally updated partial path
/// log-likelihood.
#[derive(Debug, Clone)]
struct Hypothesis {
    gseq: SubgoalSequence,
    log_post: f64,
    goals: Vec<State>,
    /// Index of the current subgoal.
    gi: usize,
    log_lik: f64,
}

/// Incremental evaluator of the Helper's marginals along a Worker path.
pub struct HelperBelief<'a> {
    map: &'a GridMap,
    cache: &'a ValueCache,
    beta: f64,
    hyps: Vec<Hypothesis>,
}

impl<'a> HelperBelief<'a> {
    /// Builds hypotheses from per-destination posteriors (zero-weight
    /// entries are dropped) and conditions on the starting state.
    pub fn new(
        map: &'a GridMap,
        cache: &'a ValueCache,
        posteriors: &BTreeMap<Dest, PosteriorTable>,
        beta: f64,
        start: State,
    ) -> Result<Self> {
        let mut hyps = Vec::new();
        for d in Dest::ALL {
            let table = posteriors
                .get(&d)
                .ok_or_else(|| CoreError::InvalidConfig(format!("no posterior for {d}")))?;
            for (g, p) in table.iter() {
                if p <= 0.0 {
                    continue;
                }
                let goals = g.goal_cells(map)?;
                let mut h = Hypothesis {
                    gseq: g.clone(),
                    log_post: p.ln(),
                    goals,
                    gi: 0,
                    log_lik: 0.0,
                };
                while h.gi < h.goals.len() && h.goals[h.gi] == start {
                    h.gi += 1;
                }
                hyps.push(h);
            }
        }
        Ok(HelperBelief {
            map,
            cache,
            beta,
            hyps,
        })
    }

    /// Conditions every hypothesis on one observed Worker move.
    pub fn observe(&mut self, from: State, to: State) {
        for h in &mut self.hyps {
            if h.log_lik.is_infinite() {
                continue;
            }
            if h.gi >= h.goals.len() {
                // Moves after the hypothesis' destination are unexplainable.
                h.log_lik = f64::NEG_INFINITY;
                continue;
            }
            let table = self.cache.get(self.map, h.goals[h.gi]);
            let lp = self
                .map
                .action_between(from, to)
                .and_then(|a| action_log_prob(self.map, &table, from, a, self.beta));
            match lp {
                Some(lp) => h.log_lik += lp,
                None => {
                    h.log_lik = f64::NEG_INFINITY;
                    continue;
                }
            }
            while h.gi < h.goals.len() && h.goals[h.gi] == to {
                h.gi += 1;
            }
        }
    }

    /// Normalized weights over hypotheses; falls back to the posterior
    /// mixture alone when every partial likelihood is zero.
    fn weights(&self) -> Vec<f64> {
        for use_lik in [true, false] {
            let logw: Vec<f64> = self
                .hyps
                .iter()
                .map(|h| h.log_post + if use_lik { h.log_lik } else { 0.0 })
                .collect();
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m.is_infinite() {
                continue;
            }
            let w: Vec<f64> = logw.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            return w.into_iter().map(|x| x / z).collect();
        }
        // No informative posterior at all: uniform over hypotheses.
        vec![1.0 / self.hyps.len().max(1) as f64; self.hyps.len()]
    }

    pub fn target_item_marginal(&self) -> TargetMarginal {
        let w = self.weights();
        let mut items: BTreeMap<u8, f64> = self.map.items.keys().map(|&id| (id, 0.0)).collect();
        let mut none = 0.0;
        for (h, &wi) in self.hyps.iter().zip(&w) {
            for &id in h.gseq.items() {
                *items.entry(id).or_insert(0.0) += wi;
            }
            if h.gseq.item_in_row(3).is_none() {
                none += wi;
            }
        }
        TargetMarginal { items, none }
    }

    pub fn destination_marginal(&self) -> BTreeMap<Dest, f64> {
        let w = self.weights();
        let mut out: BTreeMap<Dest, f64> = Dest::ALL.into_iter().map(|d| (d, 0.0)).collect();
        let mut any = false;
        for (h, &wi) in self.hyps.iter().zip(&w) {
            *out.get_mut(&h.gseq.dest()).unwrap() += wi;
            any = true;
        }
        if !any {
            for v in out.values_mut() {
                *v = 1.0 / 3.0;
            }
        }
        out
    }
}

/// Marginal over the target item given a Worker path prefix.
pub fn target_item_marginal(
    map: &GridMap,
    cache: &ValueCache,
    prefix: &StateSequence,
    posteriors: &BTreeMap<Dest, PosteriorTable>,
    beta_helper: f64,
) -> Result<TargetMarginal> {
    let start = prefix.first().ok_or(CoreError::EmptyObservations)?;
    let mut belief = HelperBelief::new(map, cache, posteriors, beta_helper, start)?;
    for w in prefix.states().windows(2) {
        belief.observe(w[0], w[1]);
    }
    Ok(belief.target_item_marginal())
}

/// Marginal over destinations given a Worker path prefix.
pub fn destination_marginal(
    map: &GridMap,
    cache: &ValueCache,
    prefix: &StateSequence,
    posteriors: &BTreeMap<Dest, PosteriorTable>,
    beta_helper: f64,
) -> Result<BTreeMap<Dest, f64>> {
    let start = prefix.first().ok_or(CoreError::EmptyObservations)?;
    let mut belief = HelperBelief::new(map, cache, posteriors, beta_helper, start)?;
    for w in prefix.states().windows(2) {
        belief.observe(w[0], w[1]);
    }
    Ok(belief.destination_marginal())
}

/// Greedy optimal move toward `goal` with seeded tie-breaking.
fn optimal_step(
    map: &GridMap,
    cache: &ValueCache,
    cur: State,
    goal: State,
    rng: &mut impl Rng,
) -> Result<State> {
    let table = cache.get(map, goal);
    if table.value(cur).is_none() {
        return Err(CoreError::Unachievable);
    }
    let opts = optimal_actions(map, &table, cur);
    if opts.is_empty() {
        return Err(CoreError::Unachievable);
    }
    let a = opts[rng.random_range(0..opts.len())];
    Ok(map.transition(cur, a)?)
}

/// Runs one Worker-Helper episode. `posteriors` may be `None` for the
/// `ground_truth` and `none` sources, which do not consult marginals.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    map: &GridMap,
    cache: &ValueCache,
    structure: &SubgoalStructure,
    posteriors: Option<&BTreeMap<Dest, PosteriorTable>>,
    worker_start: State,
    worker_dest: Dest,
    worker_list: &SubgoalSequence,
    cfg: &HelperConfig,
    seed: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    if worker_list.dest() != worker_dest || !structure.lists(worker_dest).contains(worker_list) {
        return Err(CoreError::InvalidTrial(format!(
            "list {worker_list} is not a job for destination {worker_dest}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let true_target = worker_list.item_in_row(3);
    let mut remaining: Vec<State> = worker_list.goal_cells(map)?;
    let mut cur = worker_start;
    while remaining.first() == Some(&cur) {
        remaining.remove(0);
    }

    let mut belief = match (cfg.source, posteriors) {
        (PosteriorSource::GroundTruth | PosteriorSource::None, _) => None,
        (_, Some(p)) => Some(HelperBelief::new(
            map,
            cache,
            p,
            cfg.beta_helper,
            worker_start,
        )?),
        (_, None) => {
            return Err(CoreError::InvalidTrial(format!(
                "source {} requires posteriors",
                cfg.source
            )));
        }
    };

    let mut events = vec![StepEvent {
        t: 0,
        agent: "worker".into(),
        state: cur,
    }];
    let mut committed: Option<u8> = None;
    let mut decision_time: Option<usize> = None;
    let mut helper_pos = map.helper_start;
    let mut helper_steps = 0usize;
    let mut helper_dest: Option<Dest> = None;
    let mut worker_steps = 0usize;

    let commit = |item: u8,
                      t: usize,
                      remaining: &mut Vec<State>,
                      committed: &mut Option<u8>,
                      decision_time: &mut Option<usize>| {
        *committed = Some(item);
        *decision_time = Some(t);
        // The Worker drops the item only when it still owns it.
        if worker_list.contains(item) {
            if let Some(cell) = map.item_cell(item) {
                remaining.retain(|&c| c != cell);
            }
        }
    };

    // Decision check before the first move (t = 0).
    if cfg.source == PosteriorSource::GroundTruth {
        if let Some(item) = true_target {
            commit(item, 0, &mut remaining, &mut committed, &mut decision_time);
            helper_dest = Some(worker_dest);
        }
    } else if let Some(b) = belief.as_ref() {
        if let Some((item, p)) = b.target_item_marginal().best_row3(map) {
            if p > cfg.threshold {
                commit(item, 0, &mut remaining, &mut committed, &mut decision_time);
            }
        }
    }

    let max_steps = (map.width * map.height * 8) as usize;
    while !remaining.is_empty() {
        if worker_steps > max_steps {
            return Err(CoreError::Unachievable);
        }
        let next = optimal_step(map, cache, cur, remaining[0], &mut rng)?;
        worker_steps += 1;
        if let Some(b) = belief.as_mut() {
            b.observe(cur, next);
        }
        cur = next;
        events.push(StepEvent {
            t: worker_steps,
            agent: "worker".into(),
            state: cur,
        });
        while remaining.first() == Some(&cur) {
            remaining.remove(0);
        }

        if committed.is_none() {
            if let Some(b) = belief.as_ref() {
                if let Some((item, p)) = b.target_item_marginal().best_row3(map) {
                    if p > cfg.threshold {
                        commit(
                            item,
                            worker_steps,
                            &mut remaining,
                            &mut committed,
                            &mut decision_time,
                        );
                    }
                }
            }
        }

        // Helper locomotion: one move per Worker step once committed.
        if let Some(item) = committed {
            let target = map.item_cell(item).unwrap();
            if helper_pos != target {
                helper_pos = optimal_step(map, cache, helper_pos, target, &mut rng)?;
                helper_steps += 1;
                events.push(StepEvent {
                    t: worker_steps,
                    agent: "helper".into(),
                    state: helper_pos,
                });
                if helper_pos == target && helper_dest.is_none() {
                    // Latest-evidence destination decision at pickup.
                    if let Some(b) = belief.as_ref() {
                        helper_dest = b
                            .destination_marginal()
                            .into_iter()
                            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                            .map(|(d, _)| d);
                    }
                }
            }
        }
    }

    // The Worker is done; finish the Helper's walk for the logs.
    if let Some(item) = committed {
        let target = map.item_cell(item).unwrap();
        while helper_pos != target {
            helper_pos = optimal_step(map, cache, helper_pos, target, &mut rng)?;
            helper_steps += 1;
            events.push(StepEvent {
                t: worker_steps,
                agent: "helper".into(),
                state: helper_pos,
            });
        }
        if helper_dest.is_none() {
            if let Some(b) = belief.as_ref() {
                helper_dest = b
                    .destination_marginal()
                    .into_iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .map(|(d, _)| d);
            }
        }
    }

    let score = 100.0 - 2.0 * worker_steps as f64;
    Ok(TrialResult {
        worker_steps,
        score,
        helper_target: committed,
        target_correct: committed == true_target && committed.is_some(),
        destination_correct: helper_dest == Some(worker_dest),
        decision_time,
        helper_dest,
        helper_steps,
        events,
    })
}

/// Experiment 2 sweep configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Experiment2Config {
    pub settings: Vec<u8>,
    pub n_structures: usize,
    pub repeats: usize,
    /// Observation counts to sweep; training paths are shared prefixes,
    /// so posteriors for n use the first n of the largest batch.
    pub n_observations: Vec<usize>,
    pub models: Vec<PosteriorSource>,
    pub threshold: f64,
    pub beta_helper: f64,
    pub gibbs: GibbsConfig,
    pub trials: usize,
    pub seed: u64,
    /// Collect per-step episode events in trial results.
    pub log_events: bool,
}

impl Default for Experiment2Config {
    fn default() -> Self {
        Experiment2Config {
            settings: vec![1, 2, 3],
            n_structures: 10,
            repeats: 5,
            n_observations: (1..=8).collect(),
            models: PosteriorSource::ALL.to_vec(),
            threshold: 0.5,
            beta_helper: 2.0,
            gibbs: GibbsConfig::default(),
            trials: 99,
            seed: 0,
            log_events: false,
        }
    }
}

/// One aggregate report row: statistics over `repeats` repetitions of the
/// per-repeat mean over all trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp2Row {
    pub setting: u8,
    pub structure_id: usize,
    pub model: String,
    pub n_observations: usize,
    /// Number of repetitions aggregated into this row.
    pub repeat: usize,
    pub mean_score: f64,
    /// Variance of the per-repeat mean scores.
    pub variance: f64,
    pub mean_decision_time: Option<f64>,
    pub target_accuracy: f64,
    pub dest_accuracy: f64,
}

pub fn write_exp2_csv<W: Write>(rows: &[Exp2Row], w: &mut W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(CoreError::Io)?;
    Ok(())
}

fn mix_seed(parts: &[u64]) -> u64 {
    // SplitMix64-style mixing so nearby indices give unrelated streams.
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Training observations: `n` optimal-Worker paths per destination from
/// seeded random starts, the list drawn uniformly per path.
pub fn generate_training_paths(
    map: &GridMap,
    cache: &ValueCache,
    structure: &SubgoalStructure,
    n: usize,
    seed: u64,
) -> Result<BTreeMap<Dest, Vec<StateSequence>>> {
    let mut out = BTreeMap::new();
    for d in Dest::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, d as u64]));
        let lists = structure.lists(d);
        let mut paths = Vec::with_capacity(n);
        for _ in 0..n {
            let list = &lists[rng.random_range(0..lists.len())];
            let start = map.starts[rng.random_range(0..map.starts.len())];
            let cfg = PlannerConfig::optimal(0);
            paths.push(generate_path_with_rng(map, cache, list, start, &cfg, &mut rng)?);
        }
        out.insert(d, paths);
    }
    Ok(out)
}

/// Fits one model's per-destination posteriors from training paths.
pub fn fit_posteriors(
    map: &GridMap,
    cache: &ValueCache,
    model: PosteriorSource,
    training: &BTreeMap<Dest, Vec<StateSequence>>,
    gibbs: &GibbsConfig,
) -> Result<Option<BTreeMap<Dest, PosteriorTable>>> {
    let mut out = BTreeMap::new();
    for d in Dest::ALL {
        let paths = &training[&d];
        let table = match model {
            PosteriorSource::Crp => {
                let cfg = GibbsConfig {
                    seed: mix_seed(&[gibbs.seed, d as u64]),
                    ..*gibbs
                };
                gibbs_infer(map, cache, paths, d, &cfg)?.posterior
            }
            PosteriorSource::Independent => independent_model(map, cache, paths, d, gibbs.beta)?,
            PosteriorSource::Logical => logical_possibility_model(map, paths, d)?,
            PosteriorSource::Copy => copy_model(map, cache, paths, d, gibbs.beta)?,
            PosteriorSource::GroundTruth | PosteriorSource::None => return Ok(None),
        };
        out.insert(d, table);
    }
    Ok(Some(out))
}

/// Runs the full Experiment 2 sweep and returns aggregate rows (and the
/// raw per-trial results when `log_events` is set).
pub fn run_experiment2(map: &GridMap, cfg: &Experiment2Config) -> Result<Vec<Exp2Row>> {
    let max_n = cfg.n_observations.iter().copied().max().unwrap_or(0);
    if max_n == 0 || cfg.repeats == 0 || cfg.trials == 0 {
        return Err(CoreError::InvalidConfig("empty experiment 2 sweep".into()));
    }
    let mut tasks = Vec::new();
    for &setting in &cfg.settings {
        for structure_id in 0..cfg.n_structures {
            tasks.push((setting, structure_id));
        }
    }
    let rows: Result<Vec<Vec<Exp2Row>>> = tasks
        .par_iter()
        .map(|&(setting, structure_id)| {
            run_structure(map, cfg, setting, structure_id, max_n)
        })
        .collect();
    let mut flat: Vec<Exp2Row> = rows?.into_iter().flatten().collect();
    flat.sort_by(|a, b| {
        (a.setting, a.structure_id, a.model.clone(), a.n_observations).cmp(&(
            b.setting,
            b.structure_id,
            b.model.clone(),
            b.n_observations,
        ))
    });
    Ok(flat)
}

struct RepeatStats {
    mean_score: f64,
    decision_times: Vec<f64>,
    target_hits: usize,
    dest_hits: usize,
    trials: usize,
}

fn run_structure(
    map: &GridMap,
    cfg: &Experiment2Config,
    setting: u8,
    structure_id: usize,
    max_n: usize,
) -> Result<Vec<Exp2Row>> {
    let cache = ValueCache::new();
    let mut srng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, setting as u64, structure_id as u64]));
    let structure = SubgoalStructure::sample(map, setting, &mut srng)?;
    let helper_cfg_base = HelperConfig {
        threshold: cfg.threshold,
        beta_helper: cfg.beta_helper,
        source: PosteriorSource::None,
    };

    // stats[model][n] -> per-repeat statistics.
    let mut stats: BTreeMap<(PosteriorSource, usize), Vec<RepeatStats>> = BTreeMap::new();

    for repeat in 0..cfg.repeats {
        // Shared-prefix training batch for this repeat.
        let train_seed = mix_seed(&[cfg.seed, 1, setting as u64, structure_id as u64, repeat as u64]);
        let full_training = generate_training_paths(map, &cache, &structure, max_n, train_seed)?;

        for &n in &cfg.n_observations {
            let training: BTreeMap<Dest, Vec<StateSequence>> = full_training
                .iter()
                .map(|(&d, paths)| (d, paths[..n].to_vec()))
                .collect();
            for &model in &cfg.models {
                let gibbs = GibbsConfig {
                    seed: mix_seed(&[
                        cfg.seed,
                        2,
                        setting as u64,
                        structure_id as u64,
                        repeat as u64,
                        n as u64,
                    ]),
                    ..cfg.gibbs
                };
                let posteriors = fit_posteriors(map, &cache, model, &training, &gibbs)?;
                let helper_cfg = HelperConfig {
                    source: model,
                    ..helper_cfg_base
                };

                let mut score_sum = 0.0;
                let mut decision_times = Vec::new();
                let mut target_hits = 0;
                let mut dest_hits = 0;
                for trial in 0..cfg.trials {
                    // Trial draws depend only on (setting, structure,
                    // trial): models and repeats see matched jobs, and the
                    // posterior-free baselines are exactly repeatable.
                    let trial_seed = mix_seed(&[
                        cfg.seed,
                        3,
                        setting as u64,
                        structure_id as u64,
                        trial as u64,
                    ]);
                    let mut trng = ChaCha8Rng::seed_from_u64(trial_seed);
                    let start = map.starts[trial % map.starts.len()];
                    let dest = Dest::ALL[trng.random_range(0..Dest::ALL.len())];
                    let lists = structure.lists(dest);
                    let list = lists[trng.random_range(0..lists.len())].clone();
                    let mut result = run_trial(
                        map,
                        &cache,
                        &structure,
                        posteriors.as_ref(),
                        start,
                        dest,
                        &list,
                        &helper_cfg,
                        mix_seed(&[trial_seed, 4]),
                    )?;
                    if !cfg.log_events {
                        result.events.clear();
                    }
                    score_sum += result.score;
                    if let Some(t) = result.decision_time {
                        decision_times.push(t as f64);
                    }
                    if result.target_correct {
                        target_hits += 1;
                    }
                    if result.destination_correct {
                        dest_hits += 1;
                    }
                }
                stats.entry((model, n)).or_default().push(RepeatStats {
                    mean_score: score_sum / cfg.trials as f64,
                    decision_times,
                    target_hits,
                    dest_hits,
                    trials: cfg.trials,
                });
            }
        }
    }

    let mut rows = Vec::new();
    for ((model, n), reps) in stats {
        let r = reps.len() as f64;
        let mean: f64 = reps.iter().map(|s| s.mean_score).sum::<f64>() / r;
        // Identical repeats must report exactly zero, not fp residue from
        // the mean rounding.
        let variance: f64 = if reps.iter().all(|s| s.mean_score == reps[0].mean_score) {
            0.0
        } else {
            reps.iter()
                .map(|s| (s.mean_score - mean).powi(2))
                .sum::<f64>()
                / r
        };
        let all_times: Vec<f64> = reps.iter().flat_map(|s| s.decision_times.clone()).collect();
        let mean_decision_time = if all_times.is_empty() {
            None
        } else {
            Some(all_times.iter().sum::<f64>() / all_times.len() as f64)
        };
        let total_trials: usize = reps.iter().map(|s| s.trials).sum();
        rows.push(Exp2Row {
            setting,
            structure_id,
            model: model.name().to_string(),
            n_observations: n,
            repeat: reps.len(),
            mean_score: mean,
            variance,
            mean_decision_time,
            target_accuracy: reps.iter().map(|s| s.target_hits).sum::<usize>() as f64
                / total_trials as f64,
            dest_accuracy: reps.iter().map(|s| s.dest_hits).sum::<usize>() as f64
                / total_trials as f64,
        });
    }
    Ok(rows)
}
