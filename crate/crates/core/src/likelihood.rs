//! Subgoal-sequence likelihood of observed paths, boundary segmentation,
//! and enumeration of the candidate sequence space.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gridworld::{Dest, GridMap, State};
use crate::planner::{action_log_prob, ValueCache};

/// An ordered item list plus its terminal destination. The destination is
/// always the final goal. Items hold at most one per warehouse row, in
/// strictly increasing row order (paths cannot move down, so any other
/// order has likelihood zero).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SubgoalSequenceRepr", into = "SubgoalSequenceRepr")]
pub struct SubgoalSequence {
    items: Vec<u8>,
    dest: Dest,
}

#[derive(Serialize, Deserialize)]
struct SubgoalSequenceRepr {
    items: Vec<u8>,
    dest: Dest,
}

impl From<SubgoalSequence> for SubgoalSequenceRepr {
    fn from(g: SubgoalSequence) -> Self {
        SubgoalSequenceRepr {
            items: g.items,
            dest: g.dest,
        }
    }
}

impl TryFrom<SubgoalSequenceRepr> for SubgoalSequence {
    type Error = CoreError;
    fn try_from(r: SubgoalSequenceRepr) -> Result<Self> {
        SubgoalSequence::new(r.items, r.dest)
    }
}

impl SubgoalSequence {
    pub fn new(items: Vec<u8>, dest: Dest) -> Result<Self> {
        if items.len() > 3 {
            return Err(CoreError::InvalidSequence(format!(
                "at most 3 items, got {}",
                items.len()
            )));
        }
        for w in items.windows(2) {
            let (a, b) = (w[0], w[1]);
            if GridMap::item_row(a) >= GridMap::item_row(b) {
                return Err(CoreError::InvalidSequence(format!(
                    "items {a},{b} violate strict row order"
                )));
            }
        }
        for &id in &items {
            if !(1..=9).contains(&id) {
                return Err(CoreError::InvalidSequence(format!("invalid item id {id}")));
            }
        }
        Ok(SubgoalSequence { items, dest })
    }

    /// The destination-only sequence (legal likelihood argument, excluded
    /// from the enumeration prior).
    pub fn empty(dest: Dest) -> Self {
        SubgoalSequence {
            items: Vec::new(),
            dest,
        }
    }

    pub fn items(&self) -> &[u8] {
        &self.items
    }

    pub fn dest(&self) -> Dest {
        self.dest
    }

    pub fn contains(&self, item: u8) -> bool {
        self.items.contains(&item)
    }

    /// True when `other`'s items are a subset of ours (same destination).
    pub fn is_superset_of(&self, other: &SubgoalSequence) -> bool {
        self.dest == other.dest && other.items.iter().all(|i| self.items.contains(i))
    }

    /// The item in warehouse row `row`, if any (rows hold at most one).
    pub fn item_in_row(&self, row: u8) -> Option<u8> {
        self.items
            .iter()
            .copied()
            .find(|&i| GridMap::item_row(i) == row)
    }

    /// Item cells in order, destination cell last.
    pub fn goal_cells(&self, map: &GridMap) -> Result<Vec<State>> {
        let mut cells = Vec::with_capacity(self.items.len() + 1);
        for &id in &self.items {
            let cell = map
                .item_cell(id)
                .ok_or_else(|| CoreError::InvalidSequence(format!("item {id} not on map")))?;
            cells.push(cell);
        }
        cells.push(map.dest_cell(self.dest));
        Ok(cells)
    }

    /// A sequence with one item removed (used when the Helper takes it).
    pub fn without_item(&self, item: u8) -> SubgoalSequence {
        SubgoalSequence {
            items: self.items.iter().copied().filter(|&i| i != item).collect(),
            dest: self.dest,
        }
    }

    /// Canonical string key, e.g. `"2,8|B"`; empty items give `"|B"`.
    pub fn key(&self) -> String {
        let items: Vec<String> = self.items.iter().map(|i| i.to_string()).collect();
        format!("{}|{}", items.join(","), self.dest)
    }

    pub fn parse_key(key: &str) -> Result<Self> {
        let (items_part, dest_part) = key
            .split_once('|')
            .ok_or_else(|| CoreError::InvalidSequence(format!("bad key '{key}'")))?;
        let dest: Dest = dest_part
            .parse()
            .map_err(CoreError::InvalidSequence)?;
        let items = if items_part.is_empty() {
            Vec::new()
        } else {
            items_part
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<u8>()
                        .map_err(|_| CoreError::InvalidSequence(format!("bad item '{t}'")))
                })
                .collect::<Result<Vec<u8>>>()?
        };
        SubgoalSequence::new(items, dest)
    }
}

impl fmt::Display for SubgoalSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// An observed path: ordered states connected by single legal moves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateSequence(pub Vec<State>);

impl StateSequence {
    pub fn new(states: Vec<State>) -> Self {
        StateSequence(states)
    }

    pub fn states(&self) -> &[State] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<State> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<State> {
        self.0.last().copied()
    }

    pub fn prefix(&self, n: usize) -> StateSequence {
        StateSequence(self.0[..n.min(self.0.len())].to_vec())
    }

    /// Checks every consecutive pair is one legal move on `map`.
    pub fn is_valid(&self, map: &GridMap) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|&s| map.is_open(s))
            && self
                .0
                .windows(2)
                .all(|w| map.action_between(w[0], w[1]).is_some())
    }
}

/// One observation record in the path JSON schema:
/// `{"dest": "B", "states": [[x,y],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub dest: Dest,
    pub states: StateSequence,
}

/// Boundary timesteps (1-based) at which each goal of the sequence is
/// first achieved. `b[0] = 1`; success means `b.len() == goals + 1`.
pub fn segment_boundaries(
    map: &GridMap,
    path: &StateSequence,
    gseq: &SubgoalSequence,
) -> Option<Vec<usize>> {
    let goals = gseq.goal_cells(map).ok()?;
    let states = path.states();
    if states.is_empty() {
        return None;
    }
    let mut b = vec![1usize];
    // b_m = min { t | s_{t-1} = g_m  and  t > b_{m-1} }.
    let mut search_from = 0usize; // 0-based state index
    for &goal in &goals {
        let idx = (search_from..states.len()).find(|&i| states[i] == goal)?;
        b.push(idx + 2); // state index i (0-based) achieves at time t = i + 2
        search_from = idx + 1;
    }
    Some(b)
}

/// True iff the path achieves every subgoal in order and ends at the
/// sequence's destination cell.
pub fn satisfies(map: &GridMap, path: &StateSequence, gseq: &SubgoalSequence) -> bool {
    path.last() == Some(map.dest_cell(gseq.dest()))
        && segment_boundaries(map, path, gseq).is_some()
}

fn walk_log_likelihood(
    map: &GridMap,
    cache: &ValueCache,
    path: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
    require_complete: bool,
) -> f64 {
    let goals = match gseq.goal_cells(map) {
        Ok(g) => g,
        Err(_) => return f64::NEG_INFINITY,
    };
    let states = path.states();
    if states.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut gi = 0usize;
    while gi < goals.len() && states[0] == goals[gi] {
        gi += 1;
    }
    let mut log_p = 0.0;
    for t in 0..states.len() - 1 {
        if gi >= goals.len() {
            // Moves after the destination are unexplainable.
            return f64::NEG_INFINITY;
        }
        let table = cache.get(map, goals[gi]);
        let a = match map.action_between(states[t], states[t + 1]) {
            Some(a) => a,
            None => return f64::NEG_INFINITY,
        };
        match action_log_prob(map, &table, states[t], a, beta) {
            Some(lp) => log_p += lp,
            None => return f64::NEG_INFINITY,
        }
        while gi < goals.len() && states[t + 1] == goals[gi] {
            gi += 1;
        }
    }
    if require_complete && gi < goals.len() {
        return f64::NEG_INFINITY;
    }
    log_p
}

/// Log-likelihood that a hierarchical softmax agent following `gseq`
/// produced the complete path; `NEG_INFINITY` when the path does not
/// satisfy the sequence.
pub fn log_sequence_likelihood(
    map: &GridMap,
    cache: &ValueCache,
    path: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
) -> f64 {
    walk_log_likelihood(map, cache, path, gseq, beta, true)
}

pub fn sequence_likelihood(
    map: &GridMap,
    cache: &ValueCache,
    path: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
) -> f64 {
    log_sequence_likelihood(map, cache, path, gseq, beta).exp()
}

/// Likelihood of a path prefix: the same product without the completion
/// constraint; incomplete final segments contribute their partial product.
pub fn log_partial_sequence_likelihood(
    map: &GridMap,
    cache: &ValueCache,
    prefix: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
) -> f64 {
    walk_log_likelihood(map, cache, prefix, gseq, beta, false)
}

pub fn partial_sequence_likelihood(
    map: &GridMap,
    cache: &ValueCache,
    prefix: &StateSequence,
    gseq: &SubgoalSequence,
    beta: f64,
) -> f64 {
    log_partial_sequence_likelihood(map, cache, prefix, gseq, beta).exp()
}

/// All row-ordered sequences with 1..=3 items, at most one per row, ending
/// at `dest`. This is the support of the uniform prior.
pub fn enumerate_candidates(map: &GridMap, dest: Dest) -> Vec<SubgoalSequence> {
    let rows: Vec<Vec<u8>> = (1..=3u8)
        .map(|r| map.row_items(r))
        .filter(|ids| !ids.is_empty())
        .collect();
    let mut out = Vec::new();
    let n = rows.len();
    for mask in 1u32..(1 << n) {
        let chosen: Vec<&Vec<u8>> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &rows[i]).collect();
        let mut picks = vec![0usize; chosen.len()];
        loop {
            let items: Vec<u8> = chosen.iter().zip(&picks).map(|(row, &p)| row[p]).collect();
            out.push(SubgoalSequence::new(items, dest).expect("row-ordered by construction"));
            // Odometer increment over item choices.
            let mut i = 0;
            loop {
                if i == picks.len() {
                    break;
                }
                picks[i] += 1;
                if picks[i] < chosen[i].len() {
                    break;
                }
                picks[i] = 0;
                i += 1;
            }
            if i == picks.len() {
                break;
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{generate_path, softmax_policy, PlannerConfig};

    const TWO_ROW_MAP: &str = "A.B.C\n.....\n.4.5.\nH....\n.1.2.\nSSSSS\n";

    fn straight_column_path() -> StateSequence {
        StateSequence::new((0..=12).map(|y| State::new(5, y)).collect())
    }

    #[test]
    fn boundaries_on_straight_path() {
        let map = GridMap::canonical();
        let path = straight_column_path();
        let gseq = SubgoalSequence::new(vec![5], Dest::B).unwrap();
        assert_eq!(segment_boundaries(&map, &path, &gseq), Some(vec![1, 8, 14]));
        let empty = SubgoalSequence::empty(Dest::B);
        assert_eq!(segment_boundaries(&map, &path, &empty), Some(vec![1, 14]));
        let missing = SubgoalSequence::new(vec![7], Dest::B).unwrap();
        assert_eq!(segment_boundaries(&map, &path, &missing), None);
    }

    #[test]
    fn row_order_is_enforced_at_construction() {
        assert!(SubgoalSequence::new(vec![8, 2], Dest::B).is_err());
        assert!(SubgoalSequence::new(vec![1, 2], Dest::B).is_err()); // two row-1 items
        assert!(SubgoalSequence::new(vec![2, 5], Dest::B).is_ok()); // rows 1 then 2
    }

    #[test]
    fn satisfies_subsequences() {
        let map = GridMap::canonical();
        let path = straight_column_path();
        for items in [vec![2, 8], vec![2], vec![8], vec![2, 5, 8], vec![]] {
            let gseq = SubgoalSequence::new(items, Dest::B).unwrap();
            assert!(satisfies(&map, &path, &gseq));
        }
        let other_dest = SubgoalSequence::new(vec![2], Dest::C).unwrap();
        assert!(!satisfies(&map, &path, &other_dest));
    }

    #[test]
    fn zero_when_subgoal_unmet() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let path = straight_column_path();
        let gseq = SubgoalSequence::new(vec![7], Dest::B).unwrap();
        assert_eq!(sequence_likelihood(&map, &cache, &path, &gseq, 6.0), 0.0);
    }

    #[test]
    fn near_one_at_large_beta_on_unique_shortest_path() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let path = straight_column_path();
        let gseq = SubgoalSequence::new(vec![2, 5, 8], Dest::B).unwrap();
        let l = sequence_likelihood(&map, &cache, &path, &gseq, 100.0);
        assert!((l - 1.0).abs() < 1e-6, "likelihood {l}");
    }

    /// Independent oracle: multiply per-step softmax probabilities while
    /// tracking the current subgoal by hand.
    fn product_oracle(
        map: &GridMap,
        cache: &ValueCache,
        path: &StateSequence,
        gseq: &SubgoalSequence,
        beta: f64,
    ) -> f64 {
        let goals = gseq.goal_cells(map).unwrap();
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
            let a = map.action_between(states[t], states[t + 1]).unwrap();
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
    fn likelihood_matches_stepwise_product_oracle() {
        let map = crate::gridworld::load_map(TWO_ROW_MAP).unwrap();
        let cache = ValueCache::new();
        let candidates = enumerate_candidates(&map, Dest::B);
        for (i, gseq) in candidates.iter().enumerate() {
            let cfg = PlannerConfig::softmax(2.0, i as u64 + 1);
            let path = generate_path(&map, &cache, gseq, State::new(2, 0), &cfg).unwrap();
            for cand in &candidates {
                let got = sequence_likelihood(&map, &cache, &path, cand, 2.0);
                let want = product_oracle(&map, &cache, &path, cand, 2.0);
                assert!(
                    (got - want).abs() <= 1e-12 * want.max(1e-300),
                    "cand {cand}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn partial_likelihood_basics() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let gseq = SubgoalSequence::new(vec![2, 8], Dest::B).unwrap();
        let single = StateSequence::new(vec![State::new(5, 0)]);
        assert_eq!(partial_sequence_likelihood(&map, &cache, &single, &gseq, 6.0), 1.0);
        let full = straight_column_path();
        let l_full = sequence_likelihood(&map, &cache, &full, &gseq, 6.0);
        let l_partial = partial_sequence_likelihood(&map, &cache, &full, &gseq, 6.0);
        assert!((l_full - l_partial).abs() < 1e-15);
        // Non-increasing in prefix length.
        let mut prev = 1.0;
        for n in 1..=full.len() {
            let p = partial_sequence_likelihood(&map, &cache, &full.prefix(n), &gseq, 6.0);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn partial_likelihood_prefers_on_column_subgoal() {
        let map = GridMap::canonical();
        let cache = ValueCache::new();
        let prefix = StateSequence::new((0..=8).map(|y| State::new(2, y)).collect());
        let g7 = SubgoalSequence::new(vec![7], Dest::C).unwrap();
        let g9 = SubgoalSequence::new(vec![9], Dest::C).unwrap();
        let l7 = partial_sequence_likelihood(&map, &cache, &prefix, &g7, 2.0);
        let l9 = partial_sequence_likelihood(&map, &cache, &prefix, &g9, 2.0);
        assert!(l7 > l9, "{l7} vs {l9}");
    }

    #[test]
    fn candidate_counts() {
        let map = GridMap::canonical();
        for dest in Dest::ALL {
            let cands = enumerate_candidates(&map, dest);
            assert_eq!(cands.len(), 63);
            assert!(cands.iter().all(|g| !g.items().is_empty()));
        }
        let small = crate::gridworld::load_map(TWO_ROW_MAP).unwrap();
        assert_eq!(enumerate_candidates(&small, Dest::A).len(), 8);
    }

    #[test]
    fn key_roundtrip() {
        let g = SubgoalSequence::new(vec![2, 8], Dest::B).unwrap();
        assert_eq!(g.key(), "2,8|B");
        assert_eq!(SubgoalSequence::parse_key("2,8|B").unwrap(), g);
        let e = SubgoalSequence::empty(Dest::C);
        assert_eq!(SubgoalSequence::parse_key("|C").unwrap(), e);
    }
}
