//! Budgeted beam search and its stochastic relaxation.
//!
//! Cost is tracked in integer "coordinate units": one full-dimensional
//! distance computation (1 DCS) costs `D` units and one routing scoring in a
//! `d`-dimensional space costs `d` units. This keeps budget accounting exact
//! for every compression rate.

use std::collections::HashSet;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::l2;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerMode {
    /// Negative Euclidean distance on the original vectors.
    Original,
    /// Inner product of learned vertex and query representations.
    Learned,
    /// Negative Euclidean distance on PCA-truncated vectors.
    Truncated,
}

impl ScorerMode {
    pub fn label(self) -> &'static str {
        match self {
            ScorerMode::Original => "original",
            ScorerMode::Learned => "learned",
            ScorerMode::Truncated => "truncated",
        }
    }
}

impl std::str::FromStr for ScorerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(ScorerMode::Original),
            "learned" => Ok(ScorerMode::Learned),
            "truncated" | "pca" => Ok(ScorerMode::Truncated),
            _ => Err(Error::argument(format!("unknown scorer mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Total budget in full-distance equivalents.
    pub dcs_budget: usize,
    /// Candidates kept for the final rerank; each costs one full distance.
    pub k: usize,
    pub tau: f64,
    pub mode: ScorerMode,
    /// Original dimensionality `D`.
    pub full_dim: usize,
    /// Routing dimensionality `d`.
    pub routing_dim: usize,
    pub stochastic: bool,
    pub rng_seed: u64,
    /// Optional cap on the candidate heap (classical beam width).
    pub beam_width: Option<usize>,
    /// Keep per-step heap snapshots (needed for training only).
    pub record_heaps: bool,
}

impl SearchConfig {
    pub fn original(dcs_budget: usize, dim: usize) -> Self {
        Self {
            dcs_budget,
            k: 0,
            tau: 1.0,
            mode: ScorerMode::Original,
            full_dim: dim,
            routing_dim: dim,
            stochastic: false,
            rng_seed: 0,
            beam_width: None,
            record_heaps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dcs_budget == 0 {
            return Err(Error::argument("DCS budget must be positive"));
        }
        if self.k > self.dcs_budget {
            return Err(Error::argument(format!(
                "k={} exceeds the DCS budget {}",
                self.k, self.dcs_budget
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::argument("temperature must be positive"));
        }
        if self.full_dim == 0 || self.routing_dim == 0 || self.routing_dim > self.full_dim {
            return Err(Error::argument(format!(
                "routing dim {} must be in 1..={}",
                self.routing_dim, self.full_dim
            )));
        }
        if self.mode == ScorerMode::Original && self.routing_dim != self.full_dim {
            return Err(Error::argument("original scoring routes in the full dimension"));
        }
        if self.beam_width == Some(0) {
            return Err(Error::argument("beam width must be positive"));
        }
        let reserve = (self.k * self.full_dim) as u64 + self.projection_units();
        if reserve > (self.dcs_budget * self.full_dim) as u64 {
            return Err(Error::argument(format!(
                "rerank ({}) plus query projection ({}) exceed the DCS budget {}",
                self.k,
                self.projection_units() as f64 / self.full_dim as f64,
                self.dcs_budget
            )));
        }
        Ok(())
    }

    /// Cost units of the query projection (charged only when `d < D`).
    pub fn projection_units(&self) -> u64 {
        if self.mode != ScorerMode::Original && self.routing_dim < self.full_dim {
            (self.routing_dim * self.full_dim) as u64
        } else {
            0
        }
    }

    /// Cost units available to routing after the rerank and projection reserve.
    pub fn routing_units(&self) -> u64 {
        let total = (self.dcs_budget * self.full_dim) as u64;
        let reserve = (self.k * self.full_dim) as u64 + self.projection_units();
        total.saturating_sub(reserve)
    }

    pub fn unit_cost(&self) -> f64 {
        self.routing_dim as f64 / self.full_dim as f64
    }
}

/// Number of routing scorings the budget allows (rDCS).
///
/// `DCS − k` without compression, `C · (DCS − k − d)` with `C = D / d`.
pub fn routing_budget(config: &SearchConfig) -> usize {
    (config.routing_units() / config.routing_dim as u64) as usize
}

/// Something that can score a vertex against a prepared query.
pub trait VertexScorer: Sync {
    fn num_vertices(&self) -> usize;
    /// Coordinates touched by one scoring (`d`).
    fn routing_dim(&self) -> usize;
    /// Full dimensionality `D`.
    fn full_dim(&self) -> usize;
    /// Higher is better.
    fn score(&self, v: u32, query: &[f32]) -> f64;

    fn unit_cost(&self) -> f64 {
        self.routing_dim() as f64 / self.full_dim() as f64
    }
}

/// Table-backed scorer for the three routing modes.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    mode: ScorerMode,
    table: ArrayView2<'a, f32>,
    tau: f64,
    full_dim: usize,
}

impl<'a> Scorer<'a> {
    pub fn original(base: ArrayView2<'a, f32>, tau: f64) -> Self {
        Self {
            mode: ScorerMode::Original,
            table: base,
            tau,
            full_dim: base.ncols(),
        }
    }

    /// Inner product with precomputed vertex representations. The query
    /// handed to [`VertexScorer::score`] must already be `g(q)`.
    pub fn learned(representations: ArrayView2<'a, f32>, full_dim: usize) -> Self {
        Self {
            mode: ScorerMode::Learned,
            table: representations,
            tau: 1.0,
            full_dim,
        }
    }

    /// Distance on truncated vectors; the query must be truncated as well.
    pub fn truncated(truncated_base: ArrayView2<'a, f32>, full_dim: usize, tau: f64) -> Self {
        Self {
            mode: ScorerMode::Truncated,
            table: truncated_base,
            tau,
            full_dim,
        }
    }

    pub fn mode(&self) -> ScorerMode {
        self.mode
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Scores `v` and charges the meter; fails once the budget is spent.
    pub fn score_charged(&self, meter: &mut BudgetMeter, v: u32, query: &[f32]) -> Result<f64> {
        meter.charge(self.routing_dim() as u64)?;
        Ok(self.score(v, query))
    }
}

impl VertexScorer for Scorer<'_> {
    fn num_vertices(&self) -> usize {
        self.table.nrows()
    }

    fn routing_dim(&self) -> usize {
        self.table.ncols()
    }

    fn full_dim(&self) -> usize {
        self.full_dim
    }

    #[inline]
    fn score(&self, v: u32, query: &[f32]) -> f64 {
        let row = self.table.row(v as usize);
        let row = row.to_slice().expect("standard layout");
        match self.mode {
            ScorerMode::Original | ScorerMode::Truncated => -(l2(row, query) as f64) / self.tau,
            ScorerMode::Learned => dot(row, query),
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail) as f64
}

/// Per-search cost counter in coordinate units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetMeter {
    pub used: u64,
    pub limit: u64,
}

impl BudgetMeter {
    pub fn new(limit: u64) -> Self {
        Self { used: 0, limit }
    }

    pub fn can_afford(&self, units: u64) -> bool {
        self.used + units <= self.limit
    }

    pub fn charge(&mut self, units: u64) -> Result<()> {
        if !self.can_afford(units) {
            return Err(Error::BudgetExhausted);
        }
        self.used += units;
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn heap_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Draws an index from `softmax(scores)`.
pub fn sample_softmax<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> usize {
    let p = heap_softmax(scores);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass; fall back to the last positive entry
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchStep {
    pub expanded: u32,
    /// Heap members (sorted ids) at the moment `expanded` was selected.
    pub heap: Vec<u32>,
    /// Length of the visited list after this expansion.
    pub visited_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrajectory {
    pub steps: Vec<SearchStep>,
    /// Visited vertices in scoring order; the entry vertex comes first.
    pub visited: Vec<u32>,
    /// Routing score of each visited vertex (`-inf` for an unscored entry).
    pub scores: Vec<f64>,
    /// Number of routing scorings performed.
    pub scorings: usize,
    /// Routing plus projection cost in coordinate units.
    pub cost_units: u64,
    /// Routing plus projection cost in DCS units (rerank excluded).
    pub dcs_used: f64,
    /// Top-k visited ids by routing score (all of V when `k = 0`).
    pub result_candidates: Vec<u32>,
}

impl SearchTrajectory {
    pub fn contains(&self, v: u32) -> bool {
        self.visited.contains(&v)
    }

    pub fn expansions(&self) -> usize {
        self.steps.len()
    }
}

/// Deterministic budgeted beam search.
pub fn beam_search<S: VertexScorer + ?Sized>(
    graph: &SimilarityGraph,
    scorer: &S,
    query: &[f32],
    config: &SearchConfig,
) -> SearchTrajectory {
    run_search_with(graph, scorer, query, config, |heap| Some(best_index(heap)))
}

/// Beam search whose expanded vertex is sampled from the heap softmax.
pub fn stochastic_search<S: VertexScorer + ?Sized, R: Rng + ?Sized>(
    graph: &SimilarityGraph,
    scorer: &S,
    query: &[f32],
    config: &SearchConfig,
    rng: &mut R,
) -> SearchTrajectory {
    let mut scratch = Vec::new();
    run_search_with(graph, scorer, query, config, |heap| {
        scratch.clear();
        scratch.extend(heap.iter().map(|&(_, s)| s));
        Some(sample_softmax(&scratch, rng))
    })
}

/// Dispatches on `config.stochastic`, seeding from `config.rng_seed`.
pub fn search<S: VertexScorer + ?Sized>(
    graph: &SimilarityGraph,
    scorer: &S,
    query: &[f32],
    config: &SearchConfig,
) -> SearchTrajectory {
    if config.stochastic {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        stochastic_search(graph, scorer, query, config, &mut rng)
    } else {
        beam_search(graph, scorer, query, config)
    }
}

fn best_index(heap: &[(u32, f64)]) -> usize {
    let mut best = 0;
    for (i, &(v, s)) in heap.iter().enumerate().skip(1) {
        let (bv, bs) = heap[best];
        if s > bs || (s == bs && v < bv) {
            best = i;
        }
    }
    best
}

fn worst_index(heap: &[(u32, f64)]) -> usize {
    let mut worst = 0;
    for (i, &(v, s)) in heap.iter().enumerate().skip(1) {
        let (wv, ws) = heap[worst];
        if s < ws || (s == ws && v > wv) {
            worst = i;
        }
    }
    worst
}

/// Budgeted search with a caller-supplied expansion rule. `select` sees the
/// heap as `(id, score)` pairs and returns the index to expand, or `None` to
/// stop.
pub fn run_search_with<S: VertexScorer + ?Sized>(
    graph: &SimilarityGraph,
    scorer: &S,
    query: &[f32],
    config: &SearchConfig,
    mut select: impl FnMut(&[(u32, f64)]) -> Option<usize>,
) -> SearchTrajectory {
    debug_assert_eq!(scorer.num_vertices(), graph.num_vertices());
    let cost = scorer.routing_dim() as u64;
    let projection = config.projection_units();
    let full = config.full_dim as f64;
    let mut meter = BudgetMeter::new(config.routing_units());
    let entry = graph.entry();

    let mut visited = vec![entry];
    let mut scores = Vec::new();
    let mut steps = Vec::new();

    if meter.charge(cost).is_err() {
        scores.push(f64::NEG_INFINITY);
        return SearchTrajectory {
            steps,
            visited,
            scores,
            scorings: 0,
            cost_units: projection,
            dcs_used: projection as f64 / full,
            result_candidates: vec![entry],
        };
    }
    let s0 = scorer.score(entry, query);
    scores.push(s0);
    let mut seen: HashSet<u32> = HashSet::with_capacity(64);
    seen.insert(entry);
    let mut heap: Vec<(u32, f64)> = vec![(entry, s0)];

    'outer: while !heap.is_empty() && meter.can_afford(cost) {
        let snapshot = if config.record_heaps {
            let mut ids: Vec<u32> = heap.iter().map(|&(v, _)| v).collect();
            ids.sort_unstable();
            ids
        } else {
            Vec::new()
        };
        let Some(pick) = select(&heap) else {
            break;
        };
        let (v, _) = heap.swap_remove(pick);
        let mut exhausted = false;
        for &u in graph.out(v) {
            if seen.contains(&u) {
                continue;
            }
            if meter.charge(cost).is_err() {
                exhausted = true;
                break;
            }
            seen.insert(u);
            let s = scorer.score(u, query);
            visited.push(u);
            scores.push(s);
            heap.push((u, s));
            if let Some(width) = config.beam_width {
                if heap.len() > width {
                    let w = worst_index(&heap);
                    heap.swap_remove(w);
                }
            }
        }
        steps.push(SearchStep {
            expanded: v,
            heap: snapshot,
            visited_after: visited.len(),
        });
        if exhausted {
            break 'outer;
        }
    }

    let result_candidates = top_by_score(&visited, &scores, config.k);
    let cost_units = meter.used + projection;
    SearchTrajectory {
        steps,
        scorings: visited.len(),
        visited,
        scores,
        cost_units,
        dcs_used: cost_units as f64 / full,
        result_candidates,
    }
}

/// Ids ordered by descending score (ties by id), truncated to `k` when `k > 0`.
pub fn top_by_score(ids: &[u32], scores: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    if k > 0 {
        order.truncate(k);
    }
    order.into_iter().map(|i| ids[i]).collect()
}

/// Picks `k` of the visited vertices: the top-k by score, or `k` draws
/// without replacement from the iteratively renormalized softmax.
pub fn select_topk_visited<R: Rng + ?Sized>(
    ids: &[u32],
    scores: &[f64],
    k: usize,
    stochastic: bool,
    rng: &mut R,
) -> Vec<u32> {
    if k >= ids.len() {
        return if stochastic {
            ids.to_vec()
        } else {
            top_by_score(ids, scores, 0)
        };
    }
    if !stochastic {
        return top_by_score(ids, scores, k);
    }
    let mut pool: Vec<(u32, f64)> = ids.iter().cloned().zip(scores.iter().cloned()).collect();
    let mut out = Vec::with_capacity(k);
    let mut buf = Vec::with_capacity(pool.len());
    for _ in 0..k {
        buf.clear();
        buf.extend(pool.iter().map(|&(_, s)| s));
        let i = sample_softmax(&buf, rng);
        out.push(pool.remove(i).0);
    }
    out
}

/// Orders candidates by true Euclidean distance to `query`, ties by id.
pub fn rerank(candidates: &[u32], query: &[f32], base: ArrayView2<f32>) -> Vec<u32> {
    let mut scored: Vec<(f32, u32)> = candidates
        .iter()
        .map(|&v| (l2(base.row(v as usize).to_slice().expect("standard layout"), query), v))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, v)| v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn cfg(dcs: usize, k: usize, mode: ScorerMode, full: usize, routing: usize) -> SearchConfig {
        SearchConfig {
            dcs_budget: dcs,
            k,
            tau: 1.0,
            mode,
            full_dim: full,
            routing_dim: routing,
            stochastic: false,
            rng_seed: 0,
            beam_width: None,
            record_heaps: true,
        }
    }

    #[test]
    fn routing_budget_table_values() {
        assert_eq!(routing_budget(&cfg(128, 8, ScorerMode::Learned, 128, 128)), 120);
        assert_eq!(routing_budget(&cfg(128, 16, ScorerMode::Truncated, 128, 32)), 320);
        assert_eq!(routing_budget(&cfg(256, 32, ScorerMode::Learned, 128, 32)), 768);
        assert_eq!(routing_budget(&cfg(128, 0, ScorerMode::Original, 128, 128)), 128);
    }

    #[test]
    fn projection_must_fit_the_budget() {
        assert!(cfg(8, 0, ScorerMode::Learned, 16, 8).validate().is_ok());
        assert!(cfg(8, 1, ScorerMode::Learned, 16, 8).validate().is_err());
        assert!(cfg(4, 0, ScorerMode::Truncated, 16, 8).validate().is_err());
        assert!(cfg(4, 4, ScorerMode::Original, 16, 16).validate().is_ok());
    }

    #[test]
    fn scorer_values_and_costs() {
        let base = array![[1.0f32, 0.0], [3.0, 4.0]];
        let s = Scorer::original(base.view(), 1.0);
        assert_eq!(s.score(0, &[1.0, 0.0]), 0.0);
        assert_eq!(s.score(1, &[0.0, 0.0]), -5.0);
        let reps = array![[1.0f32, 0.0]];
        let l = Scorer::learned(reps.view(), 2);
        assert_eq!(l.score(0, &[1.0, 0.0]), 1.0);
        let t = Array2::<f32>::zeros((3, 32));
        assert_eq!(Scorer::truncated(t.view(), 128, 1.0).unit_cost(), 0.25);
        assert_eq!(s.unit_cost(), 1.0);

        let mut meter = BudgetMeter::new(2);
        assert!(s.score_charged(&mut meter, 0, &[0.0, 0.0]).is_ok());
        assert!(matches!(s.score_charged(&mut meter, 0, &[0.0, 0.0]), Err(Error::BudgetExhausted)));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(heap_softmax(&[3.0]), vec![1.0]);
        let p = heap_softmax(&[-1.0, -2.0]);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let tau = 1e-9;
        let p = heap_softmax(&[-1.0 / tau, -1.5 / tau, -3.0 / tau]);
        assert!(p[0] > 1.0 - 1e-6);
        let p = heap_softmax(&[1e308, -1e308, 5e307]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn path_graph(n: usize) -> (SimilarityGraph, Array2<f32>) {
        let base = Array2::from_shape_fn((n, 1), |(i, _)| i as f32);
        let g = crate::graph::build_nsw(
            base.view(),
            crate::graph::BuildParams {
                max_degree: 2,
                ef_construction: 10,
                seed: 0,
            },
        )
        .unwrap();
        (g, base)
    }

    #[test]
    fn budget_of_one_scoring_visits_only_entry() {
        let (g, base) = path_graph(10);
        let s = Scorer::original(base.view(), 1.0);
        let t = beam_search(&g, &s, &[5.0], &cfg(1, 0, ScorerMode::Original, 1, 1));
        assert_eq!(t.visited, vec![0]);
        assert!(t.steps.is_empty());
        assert_eq!(t.dcs_used, 1.0);
        // rerank reserve leaves nothing for routing
        let t = beam_search(&g, &s, &[5.0], &cfg(1, 1, ScorerMode::Original, 1, 1));
        assert_eq!(t.visited, vec![0]);
        assert_eq!(t.scorings, 0);
        assert_eq!(t.result_candidates, vec![0]);
    }

    #[test]
    fn ample_budget_finds_true_neighbor_on_path() {
        let (g, base) = path_graph(10);
        let s = Scorer::original(base.view(), 1.0);
        let queries = Array2::from_shape_fn((19, 1), |(i, _)| i as f32 * 0.5 - 0.2);
        let gt = crate::data::exact_knn(base.view(), queries.view(), 1).unwrap();
        for qi in 0..queries.nrows() {
            let q = queries.row(qi).to_vec();
            let t = beam_search(&g, &s, &q, &cfg(100, 0, ScorerMode::Original, 1, 1));
            assert_eq!(t.result_candidates[0], gt.nearest(qi), "query {q:?}");
            for w in t.steps.windows(1) {
                assert!(w[0].heap.contains(&w[0].expanded));
            }
        }
    }

    #[test]
    fn topk_and_rerank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = [5u32, 2, 9];
        let scores = [0.1, 0.7, 0.7];
        assert_eq!(select_topk_visited(&ids, &scores, 2, false, &mut rng), vec![2, 9]);
        assert_eq!(select_topk_visited(&ids, &scores, 5, false, &mut rng).len(), 3);
        let mut all = select_topk_visited(&ids, &scores, 3, true, &mut rng);
        all.sort_unstable();
        assert_eq!(all, vec![2, 5, 9]);

        let base = array![[0.0f32], [1.0], [2.0], [3.0]];
        assert_eq!(rerank(&[3], &[0.0], base.view()), vec![3]);
        assert_eq!(rerank(&[3, 1, 2], &[1.5], base.view()), vec![1, 2, 3]);
    }
}
