//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use std::sync::OnceLock;
use std::time::Instant;

use subgoals_core::collab::{self, Experiment2Config, Exp2Row, HelperConfig, PosteriorSource};
use subgoals_core::experiments::{golden_stimuli, run_exp1, Job};
use subgoals_core::gridworld::{load_map, Dest, GridMap, State};
use subgoals_core::inference::{
    copy_model, gibbs_infer, logical_possibility_model, logsumexp, GibbsConfig, LikelihoodMatrix,
    PosteriorTable,
};
use subgoals_core::likelihood::{
    enumerate_candidates, sequence_likelihood, StateSequence, SubgoalSequence,
};
use subgoals_core::planner::{
    generate_path, plan_values, softmax_policy, PlannerConfig, ValueCache,
};

const SMALL_MAP: &str = "A.B.C\n.....\n.4.5.\nH....\n.1.2.\nSSSSS\n";

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// All set partitions of {0, .., n-1} as lists of blocks.
fn partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for i in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for b in 0..p.len() {
                let mut q = p.clone();
                q[b].push(i);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![i]);
            next.push(q);
        }
        out = next;
    }
    out
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact DP posterior over candidate parameters by summing the CRP prior
/// over all partitions of the observations.
fn exact_partition_posterior(matrix: &LikelihoodMatrix, alpha: f64) -> PosteriorTable {
    let n = matrix.n_paths();
    let n_cands = matrix.candidates.len();
    let log_p0 = -(n_cands as f64).ln();
    let mut partition_logw = Vec::new();
    let mut partition_block_probs: Vec<Vec<Vec<f64>>> = Vec::new();
    for p in partitions(n) {
        let mut logw = p.len() as f64 * alpha.ln();
        let mut block_probs = Vec::new();
        for block in &p {
            let logs: Vec<f64> = (0..n_cands)
                .map(|c| log_p0 + block.iter().map(|&i| matrix.log_lik[i][c]).sum::<f64>())
                .collect();
            let z = logsumexp(&logs);
            logw += ln_factorial(block.len() - 1) + z;
            block_probs.push(logs.iter().map(|&l| (l - z).exp()).collect());
        }
        partition_logw.push(logw);
        partition_block_probs.push(block_probs);
    }
    let z = logsumexp(&partition_logw);
    let mut marginal = vec![0.0f64; n_cands];
    for (logw, blocks) in partition_logw.iter().zip(&partition_block_probs) {
        let pw = (logw - z).exp();
        for (c, m) in marginal.iter_mut().enumerate() {
            let p_absent: f64 = blocks.iter().map(|probs| 1.0 - probs[c]).product();
            *m += pw * (1.0 - p_absent);
        }
    }
    let mut out = PosteriorTable::new();
    for (c, g) in matrix.candidates.iter().enumerate() {
        out.set(g.clone(), marginal[c]);
    }
    out
}

#[test]
fn criterion_1_exact_posterior_oracle() {
    let start = Instant::now();
    let map = load_map(SMALL_MAP).unwrap();
    let cache = ValueCache::new();
    let dest = Dest::B;
    let lists = [vec![1u8], vec![2, 5], vec![1]];
    let paths: Vec<StateSequence> = lists
        .iter()
        .enumerate()
        .map(|(i, items)| {
            let g = SubgoalSequence::new(items.clone(), dest).unwrap();
            let start = State::new((i * 2) as i32, 0);
            generate_path(&map, &cache, &g, start, &PlannerConfig::softmax(2.0, i as u64)).unwrap()
        })
        .collect();
    let matrix = LikelihoodMatrix::build(&map, &cache, &paths, dest, 6.0).unwrap();
    assert_eq!(matrix.candidates.len(), 8);
    let exact = exact_partition_posterior(&matrix, 0.015);

    let mut worst = 0.0f64;
    for seed in [1u64, 2, 3] {
        let cfg = GibbsConfig {
            seed,
            ..Default::default()
        };
        let result = gibbs_infer(&map, &cache, &paths, dest, &cfg).unwrap();
        let tv = result.posterior.half_l1_distance(&exact);
        worst = worst.max(tv);
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        worst <= 0.05 && elapsed.as_secs() < 60,
        &format!("worst TV {worst:.4} over 3 seeds in {elapsed:.2?} (budget 0.05, 60 s)"),
    );
}

/// Independent stepwise softmax-product oracle.
fn product_oracle(
    map: &GridMap,
    cache: &ValueCache,
    path: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
) -> f64 {
    let goals = match gseq.goal_cells(map) {
        Ok(g) => g,
        Err(_) => return 0.0,
    };
    let states = path.states();
    let mut gi = 0;
    while gi < goals.len() && states[0] == goals[gi] {
        gi += 1;
    }
    let mut prod = 1.0;
    for t in 0..states.len() - 1 {
        if gi >= goals.len() {
            return 0.0;
        }
        let table = cache.get(map, goals[gi]);
        let probs = match softmax_policy(map, &table, states[t], beta) {
            Ok(p) => p,
            Err(_) => return 0.0,
        };
        let a = match map.action_between(states[t], states[t + 1]) {
            Some(a) => a,
            None => return 0.0,
        };
        match probs.iter().find(|&&(x, _)| x == a) {
            Some(&(_, p)) => prod *= p,
            None => return 0.0,
        }
        while gi < goals.len() && states[t + 1] == goals[gi] {
            gi += 1;
        }
    }
    if gi < goals.len() {
        return 0.0;
    }
    prod
}

#[test]
fn criterion_2_likelihood_oracle() {
    let small_maps = [SMALL_MAP, "B.A.C\n#....\n.5.6.\nH....\n.2.3.\nSSSSS\n"];
    let mut checked = 0usize;
    let mut worst_rel = 0.0f64;
    for (mi, text) in small_maps.iter().enumerate() {
        let map = load_map(text).unwrap();
        let cache = ValueCache::new();
        for dest in Dest::ALL {
            let cands = enumerate_candidates(&map, dest);
            for (ci, gen) in cands.iter().enumerate() {
                let seed = (mi * 1000 + ci) as u64;
                let start = map.starts[ci % map.starts.len()];
                let path =
                    generate_path(&map, &cache, gen, start, &PlannerConfig::softmax(1.5, seed))
                        .unwrap();
                // Score under every candidate, matched or not.
                for cand in &cands {
                    let got = sequence_likelihood(&map, &cache, &path, cand, 2.5);
                    let want = product_oracle(&map, &cache, &path, cand, 2.5);
                    let rel = if want == 0.0 {
                        if got == 0.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        (got - want).abs() / want
                    };
                    worst_rel = worst_rel.max(rel);
                    checked += 1;
                }
            }
        }
    }
    verdict(
        2,
        checked >= 100 && worst_rel <= 1e-12,
        &format!("{checked} pairs, worst relative error {worst_rel:.2e} (budget 1e-12)"),
    );
}

#[test]
fn criterion_3_value_function_oracle() {
    let map = GridMap::canonical();
    let goals: Vec<State> = map
        .items
        .values()
        .copied()
        .chain(map.destinations.values().copied())
        .collect();
    assert_eq!(goals.len(), 12);
    let mut states_checked = 0usize;
    let mut ok = true;
    for goal in goals {
        let table = plan_values(&map, goal);
        // Forward BFS from every open cell is wasteful; BFS once from the
        // goal over reversed edges mirrors the planner, so instead check
        // against an independent forward search per state.
        for (&s, &v) in table.reachable_states() {
            let d = forward_bfs(&map, s, goal).expect("state listed as reachable");
            if v != 100.0 - 2.0 * d as f64 {
                ok = false;
            }
            states_checked += 1;
        }
        // And no value exists for states the forward search cannot route.
        for x in 0..map.width {
            for y in 0..map.height {
                let s = State::new(x, y);
                if map.is_open(s) && table.value(s).is_none() {
                    assert!(forward_bfs(&map, s, goal).is_none());
                }
            }
        }
    }
    verdict(
        3,
        ok && states_checked > 0,
        &format!("{states_checked} (state, goal) values equal 100 - 2*BFS exactly"),
    );
}

fn forward_bfs(map: &GridMap, from: State, to: State) -> Option<u32> {
    use std::collections::{HashMap, VecDeque};
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

fn golden_jobs() -> &'static Vec<Job> {
    static JOBS: OnceLock<Vec<Job>> = OnceLock::new();
    JOBS.get_or_init(|| golden_stimuli().unwrap())
}

#[test]
fn criterion_4_fig4a_analog() {
    let start = Instant::now();
    let map = GridMap::canonical();
    let cache = ValueCache::new();
    let job2 = &golden_jobs()[1];
    let g5 = SubgoalSequence::new(vec![5], job2.spec.dest).unwrap();
    assert_eq!(job2.spec.lists, vec![g5.clone()]);

    let cfg = GibbsConfig::default();
    let crp = gibbs_infer(&map, &cache, &job2.paths, job2.spec.dest, &cfg)
        .unwrap()
        .posterior;
    let ranked = crp.ranked();
    let crp_ok = *ranked[0].0 == g5 && ranked[0].1 > 0.7;

    let copy = copy_model(&map, &cache, &job2.paths, job2.spec.dest, cfg.beta).unwrap();
    let copy_ok = copy.iter().any(|(g, p)| p == 1.0 && g.items().len() > 1);

    let lp = logical_possibility_model(&map, &job2.paths, job2.spec.dest).unwrap();
    let lp5 = lp.get(&g5);
    let lp_super = lp
        .iter()
        .filter(|(g, _)| g.is_superset_of(&g5) && **g != g5)
        .map(|(_, p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let lp_ok = lp_super >= lp5;

    let elapsed = start.elapsed();
    verdict(
        4,
        crp_ok && copy_ok && lp_ok && elapsed.as_secs() < 300,
        &format!(
            "CRP top {}:{:.3} (want [5] > 0.7: {crp_ok}); copy has longer certain sequence: \
             {copy_ok}; LP superset max {lp_super:.3} vs LP([5]) {lp5:.3} (want >=: {lp_ok}); \
             {elapsed:.2?}",
            ranked[0].0, ranked[0].1
        ),
    );
}

#[test]
fn criterion_5_fig4b_analog() {
    let map = GridMap::canonical();
    let cache = ValueCache::new();
    let job9 = &golden_jobs()[8];
    let cfg = GibbsConfig::default();
    let crp = gibbs_infer(&map, &cache, &job9.paths, job9.spec.dest, &cfg)
        .unwrap()
        .posterior;
    let ranked = crp.ranked();
    let mut top2: Vec<String> = ranked[..2].iter().map(|(g, _)| g.key()).collect();
    top2.sort();
    let ok = top2 == ["1|B", "3|B"];
    verdict(
        5,
        ok,
        &format!(
            "CRP top-2 {:?} with marginals {:.3}, {:.3} (want {{[1], [3]}})",
            top2, ranked[0].1, ranked[1].1
        ),
    );
}

fn exp2_rows() -> &'static (Vec<Exp2Row>, std::time::Duration) {
    static ROWS: OnceLock<(Vec<Exp2Row>, std::time::Duration)> = OnceLock::new();
    ROWS.get_or_init(|| {
        let start = Instant::now();
        let map = GridMap::canonical();
        let cfg = Experiment2Config {
            seed: 20260823,
            ..Default::default()
        };
        let rows = collab::run_experiment2(&map, &cfg).unwrap();
        (rows, start.elapsed())
    })
}

fn setting_mean(rows: &[Exp2Row], setting: u8, model: &str, n: usize) -> f64 {
    let sel: Vec<&Exp2Row> = rows
        .iter()
        .filter(|r| r.setting == setting && r.model == model && r.n_observations == n)
        .collect();
    sel.iter().map(|r| r.mean_score).sum::<f64>() / sel.len() as f64
}

#[test]
fn criterion_6_experiment2_orderings() {
    let (rows, elapsed) = exp2_rows();
    let baselines = ["independent", "logical", "copy"];
    let mut ok = true;
    let mut notes = Vec::new();
    for setting in [1u8, 2, 3] {
        for n in 4..=8usize {
            let gt = setting_mean(rows, setting, "ground_truth", n);
            let crp = setting_mean(rows, setting, "crp", n);
            let none = setting_mean(rows, setting, "none", n);
            if gt < crp {
                ok = false;
                notes.push(format!("s{setting} n{n}: gt {gt:.2} < crp {crp:.2}"));
            }
            for b in baselines {
                let bm = setting_mean(rows, setting, b, n);
                if crp < bm {
                    ok = false;
                    notes.push(format!("s{setting} n{n}: crp {crp:.2} < {b} {bm:.2}"));
                }
                if bm < none {
                    ok = false;
                    notes.push(format!("s{setting} n{n}: {b} {bm:.2} < none {none:.2}"));
                }
            }
        }
    }
    let gap = setting_mean(rows, 1, "ground_truth", 8) - setting_mean(rows, 1, "crp", 8);
    if gap > 5.0 {
        ok = false;
        notes.push(format!("setting 1 n=8 gap {gap:.2} > 5"));
    }
    let in_budget = elapsed.as_secs() < 1800;
    verdict(
        6,
        ok && in_budget,
        &format!(
            "orderings for n in 4..=8 across 3 settings; GT-CRP gap {gap:.2} at n=8 setting 1; \
             sweep took {elapsed:.1?}{}",
            if notes.is_empty() {
                String::new()
            } else {
                format!("; violations: {notes:?}")
            }
        ),
    );
}

#[test]
fn criterion_7_experiment2_stability() {
    let (rows, _) = exp2_rows();
    let exact_zero = rows
        .iter()
        .filter(|r| r.model == "ground_truth" || r.model == "none")
        .all(|r| r.variance == 0.0);

    let mean_var = |setting: u8, model: &str| -> f64 {
        let sel: Vec<&Exp2Row> = rows
            .iter()
            .filter(|r| r.setting == setting && r.model == model && r.n_observations >= 2)
            .collect();
        sel.iter().map(|r| r.variance).sum::<f64>() / sel.len() as f64
    };
    let mut settings_ok = 0;
    let mut details = Vec::new();
    for setting in [1u8, 2, 3] {
        let crp = mean_var(setting, "crp");
        let ok = ["independent", "logical", "copy"]
            .iter()
            .all(|b| crp <= mean_var(setting, b));
        if ok {
            settings_ok += 1;
        }
        details.push(format!(
            "s{setting}: crp {:.3} vs ind {:.3} log {:.3} copy {:.3}",
            crp,
            mean_var(setting, "independent"),
            mean_var(setting, "logical"),
            mean_var(setting, "copy")
        ));
    }
    verdict(
        7,
        exact_zero && settings_ok >= 2,
        &format!(
            "GT/NoHelper variance exactly 0: {exact_zero}; CRP variance <= every baseline (n >= 2) \
             in {settings_ok}/3 settings [{}]",
            details.join("; ")
        ),
    );
}

#[test]
fn criterion_8_property_suites() {
    let map = GridMap::canonical();
    let cache = ValueCache::new();

    // Softmax normalization within 1e-12 everywhere.
    let mut norm_ok = true;
    let table = cache.get(&map, map.dest_cell(Dest::B));
    for (&s, _) in table.reachable_states() {
        for beta in [0.0, 2.0, 6.0, 50.0] {
            let probs = softmax_policy(&map, &table, s, beta).unwrap();
            let total: f64 = probs.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 {
                norm_ok = false;
            }
        }
    }

    // Exchangeability: the posterior ignores observation order.
    let g = SubgoalSequence::new(vec![5], Dest::C).unwrap();
    let paths: Vec<StateSequence> = (0..4)
        .map(|i| {
            generate_path(
                &map,
                &cache,
                &g,
                State::new(6 + i, 0),
                &PlannerConfig::optimal(400 + i as u64),
            )
            .unwrap()
        })
        .collect();
    let mut reversed = paths.clone();
    reversed.reverse();
    let cfg = GibbsConfig {
        seed: 9,
        ..Default::default()
    };
    let fwd = gibbs_infer(&map, &cache, &paths, Dest::C, &cfg).unwrap();
    let rev = gibbs_infer(&map, &cache, &reversed, Dest::C, &cfg).unwrap();
    let tv = fwd.posterior.half_l1_distance(&rev.posterior);
    let exch_ok = tv <= 0.03;

    // Helper never hurts on a seeded batch of trials.
    let mut hnh_ok = true;
    {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for setting in [1u8, 2, 3] {
            let structure = collab::SubgoalStructure::sample(&map, setting, &mut rng).unwrap();
            let training =
                collab::generate_training_paths(&map, &cache, &structure, 4, 31).unwrap();
            for model in [
                PosteriorSource::Crp,
                PosteriorSource::Independent,
                PosteriorSource::Logical,
                PosteriorSource::Copy,
            ] {
                let posts =
                    collab::fit_posteriors(&map, &cache, model, &training, &GibbsConfig::default())
                        .unwrap()
                        .unwrap();
                for trial in 0..4 {
                    let start = map.starts[(trial * 3) % map.starts.len()];
                    let dest = Dest::ALL[trial % 3];
                    let lists = structure.lists(dest);
                    let list = lists[trial % lists.len()].clone();
                    let r = collab::run_trial(
                        &map,
                        &cache,
                        &structure,
                        Some(&posts),
                        start,
                        dest,
                        &list,
                        &HelperConfig::with_source(model),
                        3,
                    )
                    .unwrap();
                    let r0 = collab::run_trial(
                        &map,
                        &cache,
                        &structure,
                        None,
                        start,
                        dest,
                        &list,
                        &HelperConfig::with_source(PosteriorSource::None),
                        3,
                    )
                    .unwrap();
                    if r.score < r0.score {
                        hnh_ok = false;
                    }
                }
            }
        }
    }

    // Candidate-count formula on the canonical map.
    let count_ok = Dest::ALL
        .into_iter()
        .all(|d| enumerate_candidates(&map, d).len() == 63);

    // Determinism under seed across the main entry points.
    let again = gibbs_infer(&map, &cache, &paths, Dest::C, &cfg).unwrap();
    let det_ok = again.posterior == fwd.posterior
        && run_exp1(
            &map,
            &golden_jobs()[..1],
            &[PosteriorSource::Logical],
            &GibbsConfig::default(),
        )
        .unwrap()
        .iter()
        .zip(
            run_exp1(
                &map,
                &golden_jobs()[..1],
                &[PosteriorSource::Logical],
                &GibbsConfig::default(),
            )
            .unwrap()
            .iter(),
        )
        .all(|(a, b)| a.probability == b.probability);

    verdict(
        8,
        norm_ok && exch_ok && hnh_ok && count_ok && det_ok,
        &format!(
            "softmax normalization {norm_ok}; exchangeability TV {tv:.4} <= 0.03 {exch_ok}; \
             helper-never-hurts {hnh_ok}; 63 candidates {count_ok}; determinism {det_ok}"
        ),
    );
}

/// Shared report sanity: row schema produced by the sweep used above.
#[test]
fn exp2_report_schema() {
    let (rows, _) = exp2_rows();
    assert_eq!(rows.len(), 3 * 10 * 6 * 8);
    let mut csv_bytes = Vec::new();
    collab::write_exp2_csv(rows, &mut csv_bytes).unwrap();
    let header = String::from_utf8(csv_bytes).unwrap();
    assert!(header.starts_with(
        "setting,structure_id,model,n_observations,repeat,mean_score,variance,\
         mean_decision_time,target_accuracy,dest_accuracy"
    ));
}
