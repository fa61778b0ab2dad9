//! A tiny 2-D instance where greedy routing on raw distances gets stuck and
//! a learned feed-forward scorer does not.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{exact_knn, l2};
use crate::error::{Error, Result};
use crate::graph::{build_nsw, BuildParams, SimilarityGraph};
use crate::model::{normalized_adjacency, ModelConfig, QueryMode, RoutingModel};
use crate::oracle::precompute_cache;
use crate::train::{Objective, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub points: usize,
    pub max_degree: usize,
    pub train_queries: usize,
    pub probes: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub dcs_budget: usize,
    pub attempts: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            points: 33,
            max_degree: 3,
            train_queries: 2000,
            probes: 400,
            hidden: 128,
            steps: 300,
            batch_size: 64,
            max_lr: 1e-2,
            dcs_budget: 16,
            attempts: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    /// Instance seed that produced the example.
    pub seed: u64,
    pub points: Array2<f32>,
    pub graph: SimilarityGraph,
    pub model: RoutingModel,
    pub probe: [f32; 2],
    pub v_star: u32,
    pub original_route: Vec<u32>,
    pub learned_route: Vec<u32>,
    /// Probes where only the learned route reaches `v*`.
    pub escapes: usize,
    /// Probes where only the distance route reaches `v*`.
    pub regressions: usize,
}

/// Moves to the best-scoring out-neighbor while that improves the current
/// score. Ties go to the smaller id.
pub fn greedy_route(graph: &SimilarityGraph, score: impl Fn(u32) -> f64) -> Vec<u32> {
    let mut cur = graph.entry();
    let mut cur_score = score(cur);
    let mut route = vec![cur];
    loop {
        let mut best: Option<(u32, f64)> = None;
        for &u in graph.adjacency()[cur as usize].iter() {
            let s = score(u);
            if best.is_none_or(|(bv, bs)| s > bs || (s == bs && u < bv)) {
                best = Some((u, s));
            }
        }
        match best {
            Some((u, s)) if s > cur_score => {
                cur = u;
                cur_score = s;
                route.push(u);
            }
            _ => return route,
        }
    }
}

/// Uniform points in the unit square, lifted onto the plane z = 1. Distances
/// are unchanged, but the constant coordinate gives `<f(v), q>` a per-vertex
/// offset.
fn uniform_points(n: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut p = Array2::from_shape_simple_fn((n, 3), || rng.random::<f32>());
    p.column_mut(2).fill(1.0);
    p
}

struct Attempt {
    outcome: Option<ToyOutcome>,
}

fn attempt(config: &ToyConfig, seed: u64) -> Result<Attempt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = uniform_points(config.points, &mut rng);
    let graph = build_nsw(
        points.view(),
        BuildParams {
            max_degree: config.max_degree,
            ef_construction: config.points,
            seed,
        },
    )?;
    if !graph.is_connected_from_entry() {
        return Ok(Attempt { outcome: None });
    }
    let queries = uniform_points(config.train_queries, &mut rng);
    let probes = uniform_points(config.probes, &mut rng);
    let gt = exact_knn(points.view(), queries.view(), 1)?;
    let cache = precompute_cache(&graph, &gt, 5, 1)?.cache;

    let model_config = ModelConfig {
        input_dim: 3,
        out_dim: 3,
        conv_blocks: 0,
        conv_filters: 0,
        ffn_hidden: config.hidden,
        query_mode: QueryMode::Identity,
    };
    let model = RoutingModel::init(model_config, seed)?;
    let train = TrainConfig {
        objective: Objective::Imitation,
        dcs_budget: config.dcs_budget,
        k: 1,
        batch_size: config.batch_size,
        total_steps: config.steps,
        max_lr: config.max_lr,
        seed,
        eval_every: 0,
        validation_queries: 0,
    };
    let mut trainer = Trainer::new(model, &graph, points.view(), queries.view(), &cache, train)?;
    for _ in 0..config.steps {
        trainer.train_step()?;
    }
    let model = trainer.model;
    let adj = normalized_adjacency(&graph.symmetrize());
    let reps = model.forward(&adj, points.mapv(|v| v as f64).view())?.output;

    let probe_gt = exact_knn(points.view(), probes.view(), 1)?;
    let mut escapes = Vec::new();
    let mut regressions = 0;
    for (i, q) in probes.outer_iter().enumerate() {
        let v_star = probe_gt.nearest(i);
        let (orig, learned) = routes(&graph, &points, &reps, &model, q)?;
        let orig_hit = orig.last() == Some(&v_star);
        let learned_hit = learned.contains(&v_star);
        if learned_hit && !orig_hit {
            escapes.push((i, v_star, orig, learned));
        } else if orig_hit && !learned_hit {
            regressions += 1;
        }
    }
    let count = escapes.len();
    // shortest learned route makes the clearest printout
    let best = escapes.into_iter().min_by_key(|e| (e.3.len(), e.0));
    Ok(Attempt {
        outcome: best.map(|(i, v_star, original_route, learned_route)| ToyOutcome {
            seed,
            probe: [probes[[i, 0]], probes[[i, 1]]],
            points: points.clone(),
            graph: graph.clone(),
            model: model.clone(),
            v_star,
            original_route,
            learned_route,
            escapes: count,
            regressions,
        }),
    })
}

fn routes(
    graph: &SimilarityGraph,
    points: &Array2<f32>,
    reps: &Array2<f64>,
    model: &RoutingModel,
    q: ArrayView1<f32>,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let q: Vec<f32> = q.to_vec();
    let orig = greedy_route(graph, |v| {
        -(l2(points.row(v as usize).as_slice().expect("standard layout"), &q) as f64)
    });
    let gq = model.query_forward(&q.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
    let learned = greedy_route(graph, |v| {
        reps.row(v as usize).iter().zip(&gq).map(|(a, b)| a * b).sum()
    });
    Ok((orig, learned))
}

/// Tries instance seeds `seed, seed+1, …` until one shows a probe whose
/// distance-greedy route stops short of `v*` while the learned route reaches it.
pub fn run_toy(config: &ToyConfig, seed: u64) -> Result<ToyOutcome> {
    for s in seed..seed + config.attempts {
        if let Some(out) = attempt(config, s)?.outcome {
            return Ok(out);
        }
        log::info!("toy seed {s}: no escaping probe");
    }
    Err(Error::Runtime(format!(
        "no local-minimum escape found in {} instance seeds starting at {seed}",
        config.attempts
    )))
}

pub fn describe(out: &ToyOutcome) -> String {
    let fmt_route = |r: &[u32]| {
        r.iter()
            .map(|&v| {
                let p = out.points.row(v as usize);
                format!("{v}({:.3},{:.3})", p[0], p[1])
            })
            .collect::<Vec<_>>()
            .join(" -> ")
    };
    let mut s = String::new();
    s.push_str(&format!(
        "instance seed {}: {} points, MaxM {}\n",
        out.seed,
        out.points.nrows(),
        out.graph.max_degree()
    ));
    s.push_str(&format!(
        "probe ({:.3},{:.3}), nearest neighbor {}\n",
        out.probe[0], out.probe[1], out.v_star
    ));
    s.push_str(&format!(
        "original greedy: {} [stuck at {}]\n",
        fmt_route(&out.original_route),
        out.original_route.last().expect("route starts at entry")
    ));
    s.push_str(&format!("learned greedy:  {} [reaches {}]\n", fmt_route(&out.learned_route), out.v_star));
    s.push_str(&format!(
        "probes escaped by learned routing: {}, lost by it: {}\n",
        out.escapes, out.regressions
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_stops_at_local_optimum() {
        // 0 -> 1 -> 2 with scores rising then falling, and a dead end at 3
        let g = SimilarityGraph::from_adjacency(vec![vec![1, 3], vec![2], vec![], vec![]], 2, 0).unwrap();
        let scores = [0.0, 1.0, 0.5, 0.2];
        assert_eq!(greedy_route(&g, |v| scores[v as usize]), vec![0, 1]);
        let scores = [0.0, 1.0, 2.0, 0.2];
        assert_eq!(greedy_route(&g, |v| scores[v as usize]), vec![0, 1, 2]);
    }
}
