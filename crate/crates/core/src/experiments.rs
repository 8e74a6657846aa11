//! Experiment 1: stimulus generation over a fixed 22-job taxonomy, model
//! comparison, and Pearson correlation against external judgment data.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collab::PosteriorSource;
use crate::error::{CoreError, Result};
use crate::gridworld::{Dest, GridMap, State};
use crate::inference::{
    copy_model, gibbs_infer, independent_model, logical_possibility_model, GibbsConfig,
    PosteriorTable,
};
use crate::likelihood::{StateSequence, SubgoalSequence};
use crate::planner::{generate_path_with_rng, PlannerConfig, ValueCache};

/// How a job's paths relate to the shortest start-destination path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStyle {
    /// Starts for which the list lies on some shortest path.
    NoDetour,
    /// Starts for which collecting the list costs extra steps.
    Detour,
    /// Alternating path-by-path (or realized across the two lists).
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: usize,
    pub dest: Dest,
    pub lists: Vec<SubgoalSequence>,
    pub path_style: PathStyle,
    pub n_paths: usize,
}

/// One stimulus: a job plus its generated observation paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    #[serde(flatten)]
    pub spec: JobSpec,
    pub paths: Vec<StateSequence>,
}

/// External human-judgment rows (not shipped; loaded from CSV).
#[derive(Debug, Clone, Default)]
pub struct JudgmentTable {
    pub rows: Vec<(usize, SubgoalSequence, f64)>,
}

impl JudgmentTable {
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for record in rdr.records() {
            let rec = record?;
            if rec.len() < 4 {
                return Err(CoreError::InvalidConfig(
                    "judgment rows need (job_id, items, dest, proportion)".into(),
                ));
            }
            let job_id: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| CoreError::InvalidConfig(format!("bad job_id '{}'", &rec[0])))?;
            let g = SubgoalSequence::parse_key(&format!("{}|{}", rec[1].trim(), rec[2].trim()))?;
            let proportion: f64 = rec[3]
                .trim()
                .parse()
                .map_err(|_| CoreError::InvalidConfig(format!("bad proportion '{}'", &rec[3])))?;
            if !(0.0..=1.0).contains(&proportion) {
                return Err(CoreError::InvalidConfig(format!(
                    "proportion {proportion} outside [0, 1]"
                )));
            }
            rows.push((job_id, g, proportion));
        }
        Ok(JudgmentTable { rows })
    }
}

/// Steps of the shortest path that visits the list in order then the
/// destination, or `None` when unreachable.
fn steps_via_list(
    map: &GridMap,
    cache: &ValueCache,
    start: State,
    list: &SubgoalSequence,
) -> Option<usize> {
    let mut total = 0.0;
    let mut cur = start;
    for goal in list.goal_cells(map).ok()? {
        let v = cache.get(map, goal).value(cur)?;
        total += (crate::planner::GOAL_REWARD - v) / crate::planner::STEP_COST;
        cur = goal;
    }
    Some(total as usize)
}

fn direct_steps(map: &GridMap, cache: &ValueCache, start: State, dest: Dest) -> Option<usize> {
    let v = cache.get(map, map.dest_cell(dest)).value(start)?;
    Some(((crate::planner::GOAL_REWARD - v) / crate::planner::STEP_COST) as usize)
}

/// Starts from which the list adds no steps (`detour = false`) or strictly
/// costs extra (`detour = true`).
fn eligible_starts(
    map: &GridMap,
    cache: &ValueCache,
    list: &SubgoalSequence,
    detour: bool,
) -> Vec<State> {
    map.starts
        .iter()
        .copied()
        .filter(|&s| {
            match (
                steps_via_list(map, cache, s, list),
                direct_steps(map, cache, s, list.dest()),
            ) {
                (Some(via), Some(direct)) => {
                    if detour {
                        via > direct
                    } else {
                        via == direct
                    }
                }
                _ => false,
            }
        })
        .collect()
}

fn job_table() -> Vec<(Dest, Vec<Vec<u8>>, PathStyle)> {
    use Dest::*;
    use PathStyle::*;
    vec![
        (B, vec![vec![8]], NoDetour),             // 1
        (C, vec![vec![5]], Detour),               // 2 (Fig. 4(a) analog)
        (A, vec![vec![7]], Detour),               // 3
        (B, vec![vec![3]], NoDetour),             // 4
        (B, vec![vec![2, 8]], NoDetour),          // 5
        (C, vec![vec![4, 9]], Detour),            // 6
        (A, vec![vec![5, 7]], Detour),            // 7
        (B, vec![vec![2, 5, 8]], NoDetour),       // 8
        (B, vec![vec![1], vec![3]], NoDetour),    // 9 (Fig. 4(b) analog)
        (C, vec![vec![1, 6, 8]], Detour),         // 10
        (A, vec![vec![3, 4, 8]], Detour),         // 11
        (C, vec![vec![7], vec![9]], Detour),      // 12
        (A, vec![vec![2], vec![5]], Mixed),       // 13
        (B, vec![vec![4], vec![6]], Detour),      // 14
        (B, vec![vec![2, 8], vec![1, 9]], Mixed), // 15
        (C, vec![vec![4, 7], vec![6, 9]], Detour), // 16
        (A, vec![vec![1, 5], vec![3, 5]], Detour), // 17
        (B, vec![vec![1, 5, 9], vec![3, 5, 7]], Detour), // 18
        (C, vec![vec![2, 4, 9], vec![2, 6, 7]], Detour), // 19
        (B, vec![vec![8], vec![1, 5, 9]], Mixed), // 20
        (A, vec![vec![5], vec![3, 4, 8]], Detour), // 21
        (C, vec![vec![9], vec![2, 6, 7]], Detour), // 22
    ]
}

pub const EXP1_N_PATHS: usize = 8;

/// Seed of the frozen stimulus suite shipped with the crate.
pub const GOLDEN_STIMULI_SEED: u64 = 123;

/// The frozen 22-job stimulus suite (JSON, generated at
/// [`GOLDEN_STIMULI_SEED`]).
pub const GOLDEN_STIMULI_JSON: &str = include_str!("../data/exp1_stimuli.json");

pub fn golden_stimuli() -> Result<Vec<Job>> {
    Ok(serde_json::from_str(GOLDEN_STIMULI_JSON)?)
}

/// Generates the frozen 22-job stimulus suite: optimal-Worker paths from
/// seeded starts drawn among the style-eligible start cells, the list
/// chosen uniformly per path for two-list jobs.
pub fn generate_exp1_stimuli(map: &GridMap, seed: u64) -> Result<Vec<Job>> {
    let cache = ValueCache::new();
    let mut jobs = Vec::new();
    for (idx, (dest, raw_lists, style)) in job_table().into_iter().enumerate() {
        let job_id = idx + 1;
        let lists: Vec<SubgoalSequence> = raw_lists
            .into_iter()
            .map(|items| SubgoalSequence::new(items, dest))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(job_id as u64 * 0x9e37));
        let mut paths = Vec::with_capacity(EXP1_N_PATHS);
        for p in 0..EXP1_N_PATHS {
            let list = &lists[rng.random_range(0..lists.len())];
            let want_detour = match style {
                PathStyle::Detour => true,
                PathStyle::NoDetour => false,
                PathStyle::Mixed => p % 2 == 1,
            };
            let mut starts = eligible_starts(map, &cache, list, want_detour);
            if starts.is_empty() {
                // A list may admit only one style (e.g. an on-column list
                // is never a detour); fall back to the other.
                starts = eligible_starts(map, &cache, list, !want_detour);
            }
            if starts.is_empty() {
                return Err(CoreError::Unachievable);
            }
            let start = starts[rng.random_range(0..starts.len())];
            let cfg = PlannerConfig::optimal(0);
            paths.push(generate_path_with_rng(map, &cache, list, start, &cfg, &mut rng)?);
        }
        jobs.push(Job {
            spec: JobSpec {
                job_id,
                dest,
                lists,
                path_style: style,
                n_paths: EXP1_N_PATHS,
            },
            paths,
        });
    }
    Ok(jobs)
}

/// One model prediction for one candidate sequence of one job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub job_id: usize,
    pub model: String,
    pub items: String,
    pub dest: Dest,
    pub probability: f64,
}

/// Runs the selected models over every job and returns the prediction
/// table (CRP entries use the clamped at-least-one-table statistic).
pub fn run_exp1(
    map: &GridMap,
    jobs: &[Job],
    models: &[PosteriorSource],
    gibbs: &GibbsConfig,
) -> Result<Vec<PredictionRow>> {
    use rayon::prelude::*;
    let tables: Result<Vec<Vec<PredictionRow>>> = jobs
        .par_iter()
        .map(|job| {
            let cache = ValueCache::new();
            let dest = job.spec.dest;
            let mut rows = Vec::new();
            for &model in models {
                let table: PosteriorTable = match model {
                    PosteriorSource::Crp => {
                        let cfg = GibbsConfig {
                            seed: gibbs.seed.wrapping_add(job.spec.job_id as u64),
                            ..*gibbs
                        };
                        gibbs_infer(map, &cache, &job.paths, dest, &cfg)?.posterior
                    }
                    PosteriorSource::Independent => {
                        independent_model(map, &cache, &job.paths, dest, gibbs.beta)?
                    }
                    PosteriorSource::Logical => logical_possibility_model(map, &job.paths, dest)?,
                    PosteriorSource::Copy => copy_model(map, &cache, &job.paths, dest, gibbs.beta)?,
                    other => {
                        return Err(CoreError::InvalidConfig(format!(
                            "model {other} has no Experiment 1 predictions"
                        )));
                    }
                };
                for (g, p) in table.ranked() {
                    rows.push(PredictionRow {
                        job_id: job.spec.job_id,
                        model: model.name().to_string(),
                        items: g
                            .items()
                            .iter()
                            .map(|i| i.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                        dest: g.dest(),
                        probability: p,
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    Ok(tables?.into_iter().flatten().collect())
}

pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], w: &mut W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(CoreError::Io)?;
    Ok(())
}

/// Pearson correlation between one model's predictions and external
/// judgments over aligned (job, sequence) keys.
pub fn correlate(
    predictions: &[PredictionRow],
    model: &str,
    judgments: &JudgmentTable,
) -> Result<f64> {
    let index: BTreeMap<(usize, String), f64> = predictions
        .iter()
        .filter(|r| r.model == model)
        .map(|r| ((r.job_id, format!("{}|{}", r.items, r.dest)), r.probability))
        .collect();
    let mut pairs = Vec::new();
    for (job_id, g, proportion) in &judgments.rows {
        if let Some(&p) = index.get(&(*job_id, g.key())) {
            pairs.push((p, *proportion));
        }
    }
    pearson(&pairs)
}

/// Pearson correlation coefficient over (x, y) pairs.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(CoreError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::InvalidConfig(
            "zero variance in correlation input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
