#![allow(dead_code)]

use learnroute::graph::SimilarityGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random directed graph with out-degree at most `max_degree`, no self
/// loops and no duplicate edges. Entry is vertex 0.
pub fn random_graph(n: usize, max_degree: usize, seed: u64) -> SimilarityGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adjacency = (0..n)
        .map(|v| {
            let deg = rng.random_range(0..=max_degree.min(n - 1));
            let mut out: Vec<u32> = Vec::with_capacity(deg);
            while out.len() < deg {
                let u = rng.random_range(0..n as u32);
                if u as usize != v && !out.contains(&u) {
                    out.push(u);
                }
            }
            out
        })
        .collect();
    SimilarityGraph::from_adjacency(adjacency, max_degree, 0).unwrap()
}

/// All-pairs hop counts, `u32::MAX` when unreachable.
pub fn floyd_warshall(g: &SimilarityGraph) -> Vec<Vec<u32>> {
    let n = g.num_vertices();
    let inf = u64::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = 0;
        for &u in &g.adjacency()[v] {
            row[u as usize] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|x| if x >= inf { u32::MAX } else { x as u32 }).collect())
        .collect()
}

/// Every vertex lying on some simple `from → to` path of at most `limit` edges.
pub fn vertices_on_short_paths(g: &SimilarityGraph, from: u32, to: u32, limit: u32) -> Vec<bool> {
    fn walk(g: &SimilarityGraph, v: u32, to: u32, left: u32, path: &mut Vec<u32>, hit: &mut [bool]) {
        if v == to {
            for &p in path.iter() {
                hit[p as usize] = true;
            }
            return;
        }
        if left == 0 {
            return;
        }
        for &u in &g.adjacency()[v as usize] {
            if !path.contains(&u) {
                path.push(u);
                walk(g, u, to, left - 1, path, hit);
                path.pop();
            }
        }
    }
    let mut hit = vec![false; g.num_vertices()];
    walk(g, from, to, limit, &mut vec![from], &mut hit);
    hit
}

pub fn gaussian_points(n: usize, d: usize, seed: u64) -> ndarray::Array2<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ndarray::Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}
