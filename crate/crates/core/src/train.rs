//! Training objectives and the training loop.
//!
//! Each trajectory contributes
//! `Σ_i −log P(v_i ∈ Ref(H_i))  −  log P(v* ∈ TopK)`, with the routing
//! probabilities given by a softmax of learned scores `⟨f(v), g(q)⟩` over
//! the heap. Imitation collects trajectories with the current model;
//! teacher forcing follows the oracle. Gradients are taken through the
//! explicit log-probability terms only; sampled trajectories and the top-k
//! Monte-Carlo sample are treated as constants.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::VectorDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, recall_at_r_ids, Routing};
use crate::graph::SimilarityGraph;
use crate::model::{
    adam_step, normalized_adjacency, one_cycle_lr, AdamState, ForwardCache, ModelConfig,
    NormalizedAdjacency, Params, RoutingModel,
};
use crate::oracle::{ref_set, HopCache, HopCacheEntry};
use crate::search::{
    run_search_with, select_topk_visited, stochastic_search, ScorerMode, SearchConfig,
    SearchStep, SearchTrajectory, Scorer, VertexScorer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Imitation,
    TeacherForcing,
    TopkOnly,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "imitation" => Ok(Objective::Imitation),
            "teacher_forcing" | "teacher" => Ok(Objective::TeacherForcing),
            "topk_only" | "topk" => Ok(Objective::TopkOnly),
            _ => Err(Error::argument(format!("unknown objective '{s}'"))),
        }
    }
}

impl Objective {
    pub fn label(self) -> &'static str {
        match self {
            Objective::Imitation => "imitation",
            Objective::TeacherForcing => "teacher_forcing",
            Objective::TopkOnly => "topk_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub dcs_budget: usize,
    pub k: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub max_lr: f64,
    pub seed: u64,
    /// Evaluate on the validation queries every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Cached training queries held out for checkpoint selection.
    pub validation_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Imitation,
            dcs_budget: 128,
            k: 8,
            batch_size: 32,
            total_steps: 2000,
            max_lr: 1e-3,
            seed: 0,
            eval_every: 200,
            validation_queries: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.dcs_budget {
            return Err(Error::argument(format!(
                "training needs 1 <= k <= DCS, got k={} DCS={}",
                self.k, self.dcs_budget
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch size must be positive"));
        }
        if !(self.max_lr > 0.0) {
            return Err(Error::argument("max learning rate must be positive"));
        }
        Ok(())
    }

    pub fn search_config(&self, model: &ModelConfig, stochastic: bool) -> SearchConfig {
        SearchConfig {
            dcs_budget: self.dcs_budget,
            k: self.k,
            tau: 1.0,
            mode: ScorerMode::Learned,
            full_dim: model.input_dim,
            routing_dim: model.out_dim,
            stochastic,
            rng_seed: 0,
            beam_width: None,
            record_heaps: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean `−log P(v_i ∈ Ref(H_i))` over counted routing steps.
    pub routing_term: f64,
    /// Mean `−log P(v* ∈ TopK)` over trajectories that visited `v*`.
    pub topk_term: f64,
    /// Batch objective that was differentiated (sum of terms / batch size).
    pub objective: f64,
    pub routing_steps: usize,
    /// Steps whose heap had no cached vertex.
    pub skipped_steps: usize,
    /// Trajectories that never visited `v*` (no top-k term).
    pub excluded_queries: usize,
    pub trajectories: usize,
}

/// Value and score-gradients of one loss term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    /// `(vertex, dL/d score)`; a vertex may appear more than once.
    pub grads: Vec<(u32, f64)>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingLoss {
    pub loss: ScoreLoss,
    pub counted_steps: usize,
    pub skipped_steps: usize,
}

/// `Σ_i −log Σ_{v ∈ Ref(H_i)} softmax_{H_i}(v)` over the recorded heaps.
pub fn routing_loss(steps: &[SearchStep], entry: &HopCacheEntry, score: impl Fn(u32) -> f64) -> RoutingLoss {
    let mut out = RoutingLoss::default();
    for step in steps {
        let refs = ref_set(entry, &step.heap);
        if refs.is_empty() {
            out.skipped_steps += 1;
            continue;
        }
        out.counted_steps += 1;
        if refs.len() == step.heap.len() {
            continue;
        }
        let heap_scores: Vec<f64> = step.heap.iter().map(|&v| score(v)).collect();
        let lse_h = log_sum_exp(heap_scores.iter().cloned());
        let ref_scores: Vec<f64> = refs.iter().map(|&v| score(v)).collect();
        let lse_r = log_sum_exp(ref_scores.iter().cloned());
        out.loss.value += lse_h - lse_r;
        for (&v, &s) in step.heap.iter().zip(&heap_scores) {
            out.loss.grads.push((v, (s - lse_h).exp()));
        }
        for (&v, &s) in refs.iter().zip(&ref_scores) {
            out.loss.grads.push((v, -(s - lse_r).exp()));
        }
    }
    out
}

/// Draws the `k − 1` competitors of the top-k approximation from
/// `softmax(V ∖ {v*})` without replacement.
pub fn sample_topk_competitors<R: Rng + ?Sized>(
    visited: &[u32],
    v_star: u32,
    k: usize,
    score: impl Fn(u32) -> f64,
    rng: &mut R,
) -> Vec<u32> {
    let others: Vec<u32> = visited.iter().cloned().filter(|&v| v != v_star).collect();
    let scores: Vec<f64> = others.iter().map(|&v| score(v)).collect();
    select_topk_visited(&others, &scores, k.saturating_sub(1), true, rng)
}

/// `−log P(v* | V ∖ competitors)` and its score gradients.
pub fn topk_loss_given(
    visited: &[u32],
    v_star: u32,
    competitors: &[u32],
    score: impl Fn(u32) -> f64,
) -> ScoreLoss {
    let rest: Vec<u32> = visited
        .iter()
        .cloned()
        .filter(|v| !competitors.contains(v))
        .collect();
    if rest.len() <= 1 {
        return ScoreLoss::default();
    }
    let scores: Vec<f64> = rest.iter().map(|&v| score(v)).collect();
    let lse = log_sum_exp(scores.iter().cloned());
    let mut grads: Vec<(u32, f64)> = rest
        .iter()
        .zip(&scores)
        .map(|(&v, &s)| (v, (s - lse).exp()))
        .collect();
    grads.push((v_star, -1.0));
    ScoreLoss {
        value: lse - score(v_star),
        grads,
    }
}

/// Top-k membership term with a fresh Monte-Carlo sample. `None` when `v*`
/// was never visited.
pub fn topk_loss<R: Rng + ?Sized>(
    visited: &[u32],
    v_star: u32,
    k: usize,
    score: impl Fn(u32) -> f64 + Copy,
    rng: &mut R,
) -> Option<(ScoreLoss, Vec<u32>)> {
    if !visited.contains(&v_star) {
        return None;
    }
    let competitors = sample_topk_competitors(visited, v_star, k, score, rng);
    Some((topk_loss_given(visited, v_star, &competitors, score), competitors))
}

/// Scorer that ignores vertex content; used where trajectories must not
/// depend on model parameters.
struct BlindScorer {
    n: usize,
    routing_dim: usize,
    full_dim: usize,
}

impl VertexScorer for BlindScorer {
    fn num_vertices(&self) -> usize {
        self.n
    }
    fn routing_dim(&self) -> usize {
        self.routing_dim
    }
    fn full_dim(&self) -> usize {
        self.full_dim
    }
    fn score(&self, _v: u32, _query: &[f32]) -> f64 {
        0.0
    }
}

/// Follows the oracle: each step expands a uniform draw from `Ref(H)`,
/// stopping once `v*` has been expanded or the budget runs out.
pub fn teacher_trajectory<R: Rng + ?Sized>(
    graph: &SimilarityGraph,
    entry: &HopCacheEntry,
    config: &SearchConfig,
    rng: &mut R,
) -> SearchTrajectory {
    let scorer = BlindScorer {
        n: graph.num_vertices(),
        routing_dim: config.routing_dim,
        full_dim: config.full_dim,
    };
    let mut done = false;
    let mut ids = Vec::new();
    run_search_with(graph, &scorer, &[], config, |heap| {
        if done {
            return None;
        }
        ids.clear();
        ids.extend(heap.iter().map(|&(v, _)| v));
        let refs = ref_set(entry, &ids);
        let pick = if refs.is_empty() {
            return None;
        } else {
            refs[rng.random_range(0..refs.len())]
        };
        done = pick == entry.v_star;
        ids.iter().position(|&v| v == pick)
    })
}

/// Runs the stochastic learned-score search for one query.
pub fn imitation_trajectory<R: Rng + ?Sized>(
    graph: &SimilarityGraph,
    representations: ArrayView2<f32>,
    query_repr: &[f32],
    config: &SearchConfig,
    rng: &mut R,
) -> SearchTrajectory {
    let scorer = Scorer::learned(representations, config.full_dim);
    stochastic_search(graph, &scorer, query_repr, config, rng)
}

/// One trajectory with every random choice fixed, ready for loss assembly.
#[derive(Debug, Clone)]
pub struct FrozenSample {
    pub query: Vec<f64>,
    pub entry: HopCacheEntry,
    pub trajectory: SearchTrajectory,
    /// Competitors drawn for the top-k term; `None` if `v*` was not visited.
    pub competitors: Option<Vec<u32>>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

/// Collects trajectories for a batch of cached queries and freezes the top-k
/// samples under the current scores.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch(
    objective: Objective,
    graph: &SimilarityGraph,
    model: &RoutingModel,
    forward: &ForwardCache,
    queries: ArrayView2<f32>,
    batch: &[&HopCacheEntry],
    search: &SearchConfig,
    k: usize,
    seed: u64,
) -> Result<Vec<FrozenSample>> {
    let reps = forward.output.mapv(|v| v as f32);
    batch
        .par_iter()
        .enumerate()
        .map(|(i, &entry)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, entry.query_id as u64));
            let q: Vec<f64> = queries
                .row(entry.query_id as usize)
                .iter()
                .map(|&v| v as f64)
                .collect();
            let gq = model.query_forward(&q)?;
            let trajectory = match objective {
                Objective::TeacherForcing => teacher_trajectory(graph, entry, search, &mut rng),
                Objective::Imitation | Objective::TopkOnly => {
                    let gq32: Vec<f32> = gq.iter().map(|&v| v as f32).collect();
                    imitation_trajectory(graph, reps.view(), &gq32, search, &mut rng)
                }
            };
            let score = |v: u32| dot64(forward.output.row(v as usize).as_slice().unwrap(), &gq);
            let competitors = topk_loss(&trajectory.visited, entry.v_star, k, score, &mut rng).map(|(_, c)| c);
            Ok(FrozenSample {
                query: q,
                entry: entry.clone(),
                trajectory,
                competitors,
            })
        })
        .collect()
}

#[inline]
fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batch objective and the gradient of `f`'s output and `g`'s weights.
pub fn batch_loss(
    objective: Objective,
    model: &RoutingModel,
    forward: &ForwardCache,
    samples: &[FrozenSample],
) -> Result<(LossBreakdown, Array2<f64>, Params)> {
    let out = &forward.output;
    let mut d_out = Array2::<f64>::zeros(out.dim());
    let mut q_grads = Params::zeros(&model.config);
    let mut br = LossBreakdown {
        trajectories: samples.len(),
        ..Default::default()
    };
    let mut routing_sum = 0.0;
    let mut topk_sum = 0.0;
    let mut topk_count = 0usize;
    let scale = 1.0 / samples.len().max(1) as f64;

    for s in samples {
        let gq = model.query_forward(&s.query)?;
        let score = |v: u32| dot64(out.row(v as usize).as_slice().unwrap(), &gq);
        let mut d_scores: HashMap<u32, f64> = HashMap::new();

        if objective != Objective::TopkOnly {
            let r = routing_loss(&s.trajectory.steps, &s.entry, score);
            br.routing_steps += r.counted_steps;
            br.skipped_steps += r.skipped_steps;
            routing_sum += r.loss.value;
            for (v, g) in r.loss.grads {
                *d_scores.entry(v).or_default() += g;
            }
        }
        match &s.competitors {
            Some(c) => {
                let t = topk_loss_given(&s.trajectory.visited, s.entry.v_star, c, score);
                topk_sum += t.value;
                topk_count += 1;
                for (v, g) in t.grads {
                    *d_scores.entry(v).or_default() += g;
                }
            }
            None => br.excluded_queries += 1,
        }

        let mut d_g = vec![0.0; gq.len()];
        let mut touched: Vec<(u32, f64)> = d_scores.into_iter().collect();
        touched.sort_unstable_by_key(|&(v, _)| v);
        for (v, ds) in touched {
            if ds == 0.0 {
                continue;
            }
            let ds = ds * scale;
            let mut row = d_out.row_mut(v as usize);
            for (o, &gqi) in row.iter_mut().zip(&gq) {
                *o += ds * gqi;
            }
            for (dg, &f) in d_g.iter_mut().zip(out.row(v as usize)) {
                *dg += ds * f;
            }
        }
        model.query_backward(&mut q_grads, &s.query, &d_g);
    }

    br.routing_term = if br.routing_steps > 0 {
        routing_sum / br.routing_steps as f64
    } else {
        0.0
    };
    br.topk_term = if topk_count > 0 {
        topk_sum / topk_count as f64
    } else {
        0.0
    };
    br.objective = (routing_sum + topk_sum) * scale;
    if !br.objective.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((br, d_out, q_grads))
}

/// Full parameter gradient of the batch objective for frozen samples.
pub fn batch_gradients(
    objective: Objective,
    model: &RoutingModel,
    adj: &NormalizedAdjacency,
    features: ArrayView2<f64>,
    samples: &[FrozenSample],
) -> Result<(LossBreakdown, Params)> {
    let forward = model.forward(adj, features)?;
    let (br, d_out, q_grads) = batch_loss(objective, model, &forward, samples)?;
    let mut grads = model.backward(adj, &forward, d_out.view())?;
    grads.add_scaled(1.0, &q_grads);
    if !grads.all_finite() {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    Ok((br, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub routing_term: f64,
    pub topk_term: f64,
    pub recall_at_1: f64,
    pub dcs: usize,
}

pub const METRICS_HEADER: &str = "step,lr,routing_term,topk_term,recall_at_1,dcs";

pub fn write_metrics_csv<W: std::io::Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6e},{:.6},{:.6},{:.6},{}",
            r.step, r.lr, r.routing_term, r.topk_term, r.recall_at_1, r.dcs
        )?;
    }
    Ok(())
}

/// Training state for one model on one graph.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: RoutingModel,
    pub adam: AdamState,
    pub graph: &'a SimilarityGraph,
    pub adjacency: NormalizedAdjacency,
    features: Array2<f64>,
    base: ArrayView2<'a, f32>,
    queries: ArrayView2<'a, f32>,
    train_entries: Vec<&'a HopCacheEntry>,
    val_entries: Vec<&'a HopCacheEntry>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    /// `queries` are the training queries the cache was built for.
    pub fn new(
        model: RoutingModel,
        graph: &'a SimilarityGraph,
        base: ArrayView2<'a, f32>,
        queries: ArrayView2<'a, f32>,
        cache: &'a HopCache,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if base.ncols() != model.config.input_dim {
            return Err(Error::Dimension {
                expected: model.config.input_dim,
                got: base.ncols(),
            });
        }
        if base.nrows() != graph.num_vertices() {
            return Err(Error::Dimension {
                expected: graph.num_vertices(),
                got: base.nrows(),
            });
        }
        if let Some(e) = cache.entries.iter().find(|e| e.query_id as usize >= queries.nrows()) {
            return Err(Error::OutOfRange {
                id: e.query_id as usize,
                len: queries.nrows(),
            });
        }
        let entries: Vec<&HopCacheEntry> = cache.entries.iter().collect();
        let n_val = config.validation_queries.min(entries.len() / 2);
        let (train_entries, val_entries) = entries.split_at(entries.len() - n_val);
        if train_entries.is_empty() {
            return Err(Error::argument("no training queries in the hop cache"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            adam: AdamState::new(&model.config),
            adjacency: normalized_adjacency(&graph.symmetrize()),
            features: base.mapv(|v| v as f64),
            model,
            graph,
            base,
            queries,
            train_entries: train_entries.to_vec(),
            val_entries: val_entries.to_vec(),
            order,
            cursor: 0,
            rng,
            step: 0,
            config,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    fn next_batch(&mut self) -> Vec<&'a HopCacheEntry> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.train_entries[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }

    /// Collects a batch under the current parameters and applies one Adam step.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch();
        let forward = self.model.forward(&self.adjacency, self.features.view())?;
        let search = self.config.search_config(&self.model.config, true);
        let seed = mix_seed(self.config.seed, self.step as u64 + 1, 0x5eed);
        let samples = collect_batch(
            self.config.objective,
            self.graph,
            &self.model,
            &forward,
            self.queries,
            &batch,
            &search,
            self.config.k,
            seed,
        )?;
        let (br, d_out, q_grads) = batch_loss(self.config.objective, &self.model, &forward, &samples)?;
        let mut grads = self.model.backward(&self.adjacency, &forward, d_out.view())?;
        grads.add_scaled(1.0, &q_grads);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradients at step {}", self.step)));
        }
        let lr = one_cycle_lr(self.step, self.config.total_steps, self.config.max_lr);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr);
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
        }
        self.step += 1;
        Ok(br)
    }

    /// Recall@1 of deterministic learned-score search (with rerank) on the
    /// held-out validation queries. Falls back to the training queries when
    /// no validation split exists.
    pub fn validation_recall(&self) -> Result<f64> {
        let entries = if self.val_entries.is_empty() {
            &self.train_entries
        } else {
            &self.val_entries
        };
        let reps = self.model.vertex_representations(&self.adjacency, self.base)?;
        let ids: Vec<usize> = entries.iter().map(|e| e.query_id as usize).collect();
        let qs = self.queries.select(Axis(0), &ids);
        let truth: Vec<u32> = entries.iter().map(|e| e.v_star).collect();
        let cfg = self.config.search_config(&self.model.config, false);
        let cfg = SearchConfig {
            record_heaps: false,
            ..cfg
        };
        let results = evaluate_queries(
            self.graph,
            self.base,
            qs.view(),
            &cfg,
            Routing::Learned {
                model: &self.model,
                reps: &reps,
            },
        )?;
        let ranked: Vec<Vec<u32>> = results.into_iter().map(|r| r.ranked).collect();
        Ok(recall_at_r_ids(&ranked, &truth, 1))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint by validation recall.
    pub model: RoutingModel,
    pub final_model: RoutingModel,
    pub best_recall: f64,
    pub metrics: Vec<MetricsRow>,
}

/// Trains for `config.total_steps`, evaluating every `eval_every` steps and
/// keeping the best validation checkpoint.
pub fn train_loop(
    dataset: &VectorDataset,
    graph: &SimilarityGraph,
    cache: &HopCache,
    model: RoutingModel,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(
        model,
        graph,
        dataset.base.view(),
        dataset.train_queries.view(),
        cache,
        config.clone(),
    )?;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, RoutingModel)> = None;
    let mut window = LossBreakdown::default();
    let mut window_n = 0usize;

    let mut record = |trainer: &Trainer, window: &LossBreakdown, n: usize, best: &mut Option<(f64, RoutingModel)>| -> Result<()> {
        let recall = trainer.validation_recall()?;
        let n = n.max(1) as f64;
        metrics.push(MetricsRow {
            step: trainer.step,
            lr: one_cycle_lr(trainer.step.saturating_sub(1), config.total_steps, config.max_lr),
            routing_term: window.routing_term / n,
            topk_term: window.topk_term / n,
            recall_at_1: recall,
            dcs: config.dcs_budget,
        });
        log::info!(
            "step {} routing {:.4} topk {:.4} val R@1 {:.4}",
            trainer.step,
            window.routing_term / n,
            window.topk_term / n,
            recall
        );
        if best.as_ref().is_none_or(|(r, _)| recall > *r) {
            *best = Some((recall, trainer.model.clone()));
        }
        Ok(())
    };

    record(&trainer, &window, 0, &mut best)?;
    for _ in 0..config.total_steps {
        let br = trainer.train_step()?;
        window.routing_term += br.routing_term;
        window.topk_term += br.topk_term;
        window_n += 1;
        let at_eval = config.eval_every > 0 && trainer.step % config.eval_every == 0;
        if at_eval || trainer.step == config.total_steps {
            record(&trainer, &window, window_n, &mut best)?;
            window = LossBreakdown::default();
            window_n = 0;
        }
    }
    let (best_recall, model) = best.expect("evaluated at least once");
    Ok(TrainOutcome {
        model,
        final_model: trainer.model,
        best_recall,
        metrics,
    })
}
