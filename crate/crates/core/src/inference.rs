//! Dirichlet-process mixture inference over subgoal sequences via CRP
//! Gibbs sampling, plus the Independent, Logical-Possibility, and Copy
//! baseline models.
//!
//! The prior over sequences is uniform on the enumerated candidate set,
//! and the non-conjugate new-table integral is computed by exact
//! enumeration over that support. All weight accumulation happens in log
//! space with max-subtraction; products of many softmax factors underflow
//! otherwise.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gridworld::{Dest, GridMap};
use crate::likelihood::{
    enumerate_candidates, log_sequence_likelihood, satisfies, StateSequence, SubgoalSequence,
};
use crate::planner::ValueCache;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// DP concentration parameter.
    pub alpha: f64,
    /// Total Gibbs sweeps.
    pub iterations: usize,
    /// Sweeps discarded before counting.
    pub burn_in: usize,
    /// Softmax parameter used in path likelihoods.
    pub beta: f64,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            alpha: 0.015,
            iterations: 5000,
            burn_in: 1000,
            beta: 6.0,
            seed: 0,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(CoreError::InvalidConfig("alpha must be > 0".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(CoreError::InvalidConfig(
                "burn_in must be < iterations".into(),
            ));
        }
        Ok(())
    }
}

/// Marginal probabilities `P(g in g_{1:K} | s_{1:N})` per candidate
/// sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, f64>", try_from = "BTreeMap<String, f64>")]
pub struct PosteriorTable {
    entries: BTreeMap<SubgoalSequence, f64>,
}

impl PosteriorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: BTreeMap<SubgoalSequence, f64>) -> Self {
        PosteriorTable { entries }
    }

    pub fn set(&mut self, g: SubgoalSequence, p: f64) {
        self.entries.insert(g, p);
    }

    pub fn get(&self, g: &SubgoalSequence) -> f64 {
        self.entries.get(g).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubgoalSequence, f64)> {
        self.entries.iter().map(|(g, &p)| (g, p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by probability (descending), then by key.
    pub fn ranked(&self) -> Vec<(&SubgoalSequence, f64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Half L1 distance between the entry vectors over the key union.
    pub fn half_l1_distance(&self, other: &PosteriorTable) -> f64 {
        let mut keys: Vec<&SubgoalSequence> = self.entries.keys().collect();
        for k in other.entries.keys() {
            if !self.entries.contains_key(k) {
                keys.push(k);
            }
        }
        0.5 * keys
            .into_iter()
            .map(|k| (self.get(k) - other.get(k)).abs())
            .sum::<f64>()
    }

    /// CSV rows with columns `dest,items,probability,model`.
    pub fn write_csv<W: Write>(&self, w: &mut W, model: &str, header: bool) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if header {
            wtr.write_record(["dest", "items", "probability", "model"])?;
        }
        for (g, p) in self.ranked() {
            let items: Vec<String> = g.items().iter().map(|i| i.to_string()).collect();
            wtr.write_record([
                g.dest().to_string(),
                items.join(","),
                format!("{p}"),
                model.to_string(),
            ])?;
        }
        wtr.flush().map_err(CoreError::Io)?;
        Ok(())
    }
}

impl From<PosteriorTable> for BTreeMap<String, f64> {
    fn from(t: PosteriorTable) -> Self {
        t.entries.into_iter().map(|(g, p)| (g.key(), p)).collect()
    }
}

impl TryFrom<BTreeMap<String, f64>> for PosteriorTable {
    type Error = CoreError;
    fn try_from(m: BTreeMap<String, f64>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, p) in m {
            entries.insert(SubgoalSequence::parse_key(&k)?, p);
        }
        Ok(PosteriorTable { entries })
    }
}

/// Cached log-likelihoods of every observation under every candidate.
pub struct LikelihoodMatrix {
    pub candidates: Vec<SubgoalSequence>,
    /// `log_lik[path][candidate]`.
    pub log_lik: Vec<Vec<f64>>,
}

impl LikelihoodMatrix {
    pub fn build(
        map: &GridMap,
        cache: &ValueCache,
        paths: &[StateSequence],
        dest: Dest,
        beta: f64,
    ) -> Result<Self> {
        if paths.is_empty() {
            return Err(CoreError::EmptyObservations);
        }
        let candidates = enumerate_candidates(map, dest);
        let mut log_lik = Vec::with_capacity(paths.len());
        for (i, path) in paths.iter().enumerate() {
            let row: Vec<f64> = candidates
                .iter()
                .map(|g| log_sequence_likelihood(map, cache, path, g, beta))
                .collect();
            if row.iter().all(|l| l.is_infinite()) {
                return Err(CoreError::InconsistentObservation(i));
            }
            log_lik.push(row);
        }
        Ok(LikelihoodMatrix {
            candidates,
            log_lik,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.log_lik.len()
    }

    fn log_prior(&self) -> f64 {
        -(self.candidates.len() as f64).ln()
    }

    /// log of the new-table integral for one path:
    /// `Σ_g P(s|g) P0(g)` computed by exact enumeration.
    pub fn log_marginal(&self, path_idx: usize) -> f64 {
        logsumexp(&self.log_lik[path_idx]) + self.log_prior()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Samples an index from unnormalized log-weights with max-subtraction.
pub fn sample_log_weights<R: Rng>(rng: &mut R, logw: &[f64]) -> Option<usize> {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return None;
    }
    let weights: Vec<f64> = logw.iter().map(|&w| (w - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    Some(weights.len() - 1)
}

/// One CRP table: a candidate parameter index and its occupancy.
#[derive(Debug, Clone)]
pub struct Table {
    pub param: usize,
    pub occupancy: usize,
}

/// Mutable state of one Gibbs chain.
#[derive(Debug, Clone)]
pub struct CrpState {
    /// Table index per observation; `None` while an observation is
    /// detached during re-assignment.
    pub assignments: Vec<Option<usize>>,
    pub tables: Vec<Table>,
}

impl CrpState {
    fn occupancy_total(&self) -> usize {
        self.tables.iter().map(|t| t.occupancy).sum()
    }

    fn detach(&mut self, i: usize) {
        if let Some(k) = self.assignments[i].take() {
            self.tables[k].occupancy -= 1;
            if self.tables[k].occupancy == 0 {
                self.tables.swap_remove(k);
                if k < self.tables.len() {
                    // Fix assignments pointing at the moved table.
                    let moved = self.tables.len();
                    for a in self.assignments.iter_mut() {
                        if *a == Some(moved) {
                            *a = Some(k);
                        }
                    }
                }
            }
        }
    }

    fn attach(&mut self, i: usize, table: usize) {
        self.tables[table].occupancy += 1;
        self.assignments[i] = Some(table);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableChoice {
    Existing(usize),
    New,
}

/// Unnormalized log-weights for re-seating one detached observation:
/// occupied table `k` gets `n_k * P(s_i | g_k)`, a new table gets
/// `alpha * Σ_g P(s_i | g) P0(g)`. The common `1/(N-1+alpha)` factor is
/// dropped.
pub fn table_assignment_logweights(
    crp: &CrpState,
    matrix: &LikelihoodMatrix,
    path_idx: usize,
    alpha: f64,
) -> Vec<(TableChoice, f64)> {
    let row = &matrix.log_lik[path_idx];
    let mut out: Vec<(TableChoice, f64)> = crp
        .tables
        .iter()
        .enumerate()
        .map(|(k, t)| {
            (
                TableChoice::Existing(k),
                (t.occupancy as f64).ln() + row[t.param],
            )
        })
        .collect();
    out.push((TableChoice::New, alpha.ln() + matrix.log_marginal(path_idx)));
    out
}

/// Samples a table parameter from `P0(g) * Π_i P(s_i | g)` over the
/// enumerated candidates; `None` when every product is zero (the sampler
/// never seats such a combination together).
pub fn sample_table_param<R: Rng>(
    rng: &mut R,
    matrix: &LikelihoodMatrix,
    members: &[usize],
) -> Option<usize> {
    let logw: Vec<f64> = (0..matrix.candidates.len())
        .map(|c| members.iter().map(|&i| matrix.log_lik[i][c]).sum::<f64>())
        .collect();
    sample_log_weights(rng, &logw)
}

/// Standalone parameter re-assignment draw for a set of paths sharing a
/// table.
pub fn resample_table_params(
    map: &GridMap,
    cache: &ValueCache,
    paths: &[StateSequence],
    dest: Dest,
    cfg: &GibbsConfig,
) -> Result<SubgoalSequence> {
    let matrix = LikelihoodMatrix::build(map, cache, paths, dest, cfg.beta)?;
    let members: Vec<usize> = (0..paths.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let idx = sample_table_param(&mut rng, &matrix, &members)
        .ok_or_else(|| CoreError::InvalidConfig("all-zero likelihood products".into()))?;
    Ok(matrix.candidates[idx].clone())
}

/// Full output of one Gibbs run.
#[derive(Debug, Clone)]
pub struct GibbsResult {
    /// Fraction of post-burn-in sweeps in which each sequence
    /// parameterizes at least one table (the reported marginal).
    pub posterior: PosteriorTable,
    /// Mean per-sweep table count per sequence; exceeds the clamped
    /// marginal when one sequence parameterizes several tables.
    pub raw: PosteriorTable,
    /// Mean number of occupied tables per counted sweep.
    pub mean_tables: f64,
}

/// Runs CRP Gibbs sampling (initialize; then table re-assignment and
/// parameter re-assignment sweeps; count per-sweep table parameters after
/// burn-in).
pub fn gibbs_infer(
    map: &GridMap,
    cache: &ValueCache,
    paths: &[StateSequence],
    dest: Dest,
    cfg: &GibbsConfig,
) -> Result<GibbsResult> {
    cfg.validate()?;
    let matrix = LikelihoodMatrix::build(map, cache, paths, dest, cfg.beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = matrix.n_paths();

    // Initialization: one table per observation, parameter drawn from the
    // single-path posterior.
    let mut crp = CrpState {
        assignments: (0..n).map(Some).collect(),
        tables: Vec::with_capacity(n),
    };
    for i in 0..n {
        let param = sample_table_param(&mut rng, &matrix, &[i])
            .expect("matrix guarantees a positive-likelihood candidate per path");
        crp.tables.push(Table {
            param,
            occupancy: 1,
        });
    }

    let counted = cfg.iterations - cfg.burn_in;
    let mut clamped = vec![0u64; matrix.candidates.len()];
    let mut raw = vec![0u64; matrix.candidates.len()];
    let mut table_count_sum = 0usize;

    let mut members_buf: Vec<Vec<usize>> = Vec::new();
    for sweep in 0..cfg.iterations {
        // Table re-assignment.
        for i in 0..n {
            crp.detach(i);
            let weights = table_assignment_logweights(&crp, &matrix, i, cfg.alpha);
            let logw: Vec<f64> = weights.iter().map(|&(_, w)| w).collect();
            let pick = sample_log_weights(&mut rng, &logw)
                .expect("new-table weight is always finite");
            match weights[pick].0 {
                TableChoice::Existing(k) => crp.attach(i, k),
                TableChoice::New => {
                    let param = sample_table_param(&mut rng, &matrix, &[i]).unwrap();
                    crp.tables.push(Table {
                        param,
                        occupancy: 0,
                    });
                    let k = crp.tables.len() - 1;
                    crp.attach(i, k);
                }
            }
        }

        // Parameter re-assignment.
        members_buf.clear();
        members_buf.resize(crp.tables.len(), Vec::new());
        for (i, a) in crp.assignments.iter().enumerate() {
            members_buf[a.unwrap()].push(i);
        }
        for (k, members) in members_buf.iter().enumerate() {
            let param = sample_table_param(&mut rng, &matrix, members)
                .expect("seated tables have a satisfying candidate");
            crp.tables[k].param = param;
        }

        debug_assert_eq!(crp.occupancy_total(), n);

        if sweep >= cfg.burn_in {
            table_count_sum += crp.tables.len();
            let mut seen = vec![false; matrix.candidates.len()];
            for t in &crp.tables {
                raw[t.param] += 1;
                if !seen[t.param] {
                    seen[t.param] = true;
                    clamped[t.param] += 1;
                }
            }
        }
    }

    let mut posterior = PosteriorTable::new();
    let mut raw_table = PosteriorTable::new();
    for (c, g) in matrix.candidates.iter().enumerate() {
        posterior.set(g.clone(), clamped[c] as f64 / counted as f64);
        raw_table.set(g.clone(), raw[c] as f64 / counted as f64);
    }
    Ok(GibbsResult {
        posterior,
        raw: raw_table,
        mean_tables: table_count_sum as f64 / counted as f64,
    })
}

/// Per-path independent posteriors combined as the probability that each
/// sequence appears in at least one independent draw.
pub fn independent_model(
    map: &GridMap,
    cache: &ValueCache,
    paths: &[StateSequence],
    dest: Dest,
    beta: f64,
) -> Result<PosteriorTable> {
    let matrix = LikelihoodMatrix::build(map, cache, paths, dest, beta)?;
    let mut out = PosteriorTable::new();
    for (c, g) in matrix.candidates.iter().enumerate() {
        let mut log_none = 0.0f64;
        for row in &matrix.log_lik {
            let z = logsumexp(row);
            let p = (row[c] - z).exp();
            log_none += (1.0 - p).max(0.0).ln();
        }
        out.set(g.clone(), 1.0 - log_none.exp());
    }
    Ok(out)
}

/// Proportion of observations in which each sequence is present
/// (computed over all candidates plus the destination-only sequence).
pub fn logical_possibility_model(
    map: &GridMap,
    paths: &[StateSequence],
    dest: Dest,
) -> Result<PosteriorTable> {
    if paths.is_empty() {
        return Err(CoreError::EmptyObservations);
    }
    let mut candidates = enumerate_candidates(map, dest);
    candidates.push(SubgoalSequence::empty(dest));
    let n = paths.len() as f64;
    let mut out = PosteriorTable::new();
    for g in candidates {
        let count = paths.iter().filter(|p| satisfies(map, p, &g)).count();
        out.set(g, count as f64 / n);
    }
    Ok(out)
}

/// The maximum-likelihood sequence included in a single path, ties broken
/// by longer item list then lexicographic item order.
pub fn max_subgoal(
    map: &GridMap,
    cache: &ValueCache,
    path: &StateSequence,
    dest: Dest,
    beta: f64,
) -> SubgoalSequence {
    let mut candidates = enumerate_candidates(map, dest);
    candidates.push(SubgoalSequence::empty(dest));
    let logs: Vec<f64> = candidates
        .iter()
        .map(|g| log_sequence_likelihood(map, cache, path, g, beta))
        .collect();
    let best = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&SubgoalSequence> = candidates
        .iter()
        .zip(&logs)
        .filter(|&(_, &l)| l >= best - 1e-9)
        .map(|(g, _)| g)
        .collect();
    tied.sort_by(|a, b| {
        b.items()
            .len()
            .cmp(&a.items().len())
            .then_with(|| a.items().cmp(b.items()))
    });
    tied[0].clone()
}

/// Assigns probability 1 to `MaxSubgoal(s_i)` for each observation, 0 to
/// everything else.
pub fn copy_model(
    map: &GridMap,
    cache: &ValueCache,
    paths: &[StateSequence],
    dest: Dest,
    beta: f64,
) -> Result<PosteriorTable> {
    if paths.is_empty() {
        return Err(CoreError::EmptyObservations);
    }
    let mut candidates = enumerate_candidates(map, dest);
    candidates.push(SubgoalSequence::empty(dest));
    let mut out = PosteriorTable::new();
    for g in candidates {
        out.set(g, 0.0);
    }
    for path in paths {
        out.set(max_subgoal(map, cache, path, dest, beta), 1.0);
    }
    Ok(out)
}
