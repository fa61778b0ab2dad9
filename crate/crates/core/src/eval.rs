//! Recall metrics, routing-success curves and the scorer comparison grid.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pca_fit, pca_transform, GroundTruth, PcaModel};
use crate::error::{Error, Result};
use crate::graph::{build_nsw, BuildParams, SimilarityGraph};
use crate::model::{RoutingModel, VertexRepresentations};
use crate::search::{
    rerank, routing_budget, search, ScorerMode, SearchConfig, SearchTrajectory, Scorer,
    VertexScorer,
};

pub const REPORT_VERSION: u32 = 1;
/// Cut-offs reported next to Recall@1.
pub const REPORT_R_VALUES: [usize; 3] = [1, 10, 100];
pub const REPORT_CSV_HEADER: &str =
    "dataset,dcs,scorer,k,d,rdcs,recall_at_1,recall_at_10,recall_at_100,mean_hops,mean_dcs_used,max_dcs_used";

/// How routing scores are produced for an evaluation run.
#[derive(Clone, Copy)]
pub enum Routing<'a> {
    Original,
    Learned {
        model: &'a RoutingModel,
        reps: &'a VertexRepresentations,
    },
    /// `table` holds the projected base vectors the graph was built on.
    Truncated {
        pca: &'a PcaModel,
        table: ArrayView2<'a, f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Returned ids, best first.
    pub ranked: Vec<u32>,
    pub trajectory: SearchTrajectory,
    /// Routing, projection and rerank cost in DCS units.
    pub dcs_used: f64,
}

/// Runs `config` over every query row. Results are in query order.
pub fn evaluate_queries(
    graph: &SimilarityGraph,
    base: ArrayView2<f32>,
    queries: ArrayView2<f32>,
    config: &SearchConfig,
    routing: Routing<'_>,
) -> Result<Vec<QueryResult>> {
    config.validate()?;
    if queries.ncols() != base.ncols() {
        return Err(Error::Dimension {
            expected: base.ncols(),
            got: queries.ncols(),
        });
    }
    let (scorer, prepared): (Scorer<'_>, Array2<f32>) = match routing {
        Routing::Original => (Scorer::original(base, config.tau), queries.to_owned()),
        Routing::Learned { model, reps } => {
            if reps.fingerprint != model.fingerprint() {
                return Err(Error::argument("vertex representations do not match the model"));
            }
            let d = model.config.out_dim;
            let mut g = Array2::<f32>::zeros((queries.nrows(), d));
            for (q, mut out) in queries.outer_iter().zip(g.outer_iter_mut()) {
                let gq = model.query_forward_f32(q.as_slice().expect("standard layout"))?;
                out.assign(&ndarray::ArrayView1::from(&gq));
            }
            (Scorer::learned(reps.reps.view(), base.ncols()), g)
        }
        Routing::Truncated { pca, table } => (
            Scorer::truncated(table, base.ncols(), config.tau),
            pca_transform(pca, queries)?,
        ),
    };
    if scorer.num_vertices() != graph.num_vertices() {
        return Err(Error::Dimension {
            expected: graph.num_vertices(),
            got: scorer.num_vertices(),
        });
    }
    let results = (0..queries.nrows())
        .into_par_iter()
        .map(|i| {
            let q = prepared.row(i);
            let trajectory = search(graph, &scorer, q.as_slice().expect("standard layout"), config);
            let (ranked, rerank_cost) = if config.k == 0 {
                (trajectory.result_candidates.clone(), 0)
            } else {
                let full = queries.row(i);
                let c = &trajectory.result_candidates;
                (rerank(c, full.as_slice().expect("standard layout"), base), c.len())
            };
            let dcs_used = trajectory.dcs_used + rerank_cost as f64;
            QueryResult {
                ranked,
                trajectory,
                dcs_used,
            }
        })
        .collect();
    Ok(results)
}

/// Fraction of queries whose true nearest neighbor is within the first `r`
/// returned ids.
pub fn recall_at_r_ids(ranked: &[Vec<u32>], truth: &[u32], r: usize) -> f64 {
    assert_eq!(ranked.len(), truth.len(), "one result list per query");
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(truth)
        .filter(|(list, t)| list.iter().take(r).any(|v| v == *t))
        .count();
    hits as f64 / ranked.len() as f64
}

pub fn recall_at_r(ranked: &[Vec<u32>], ground_truth: &GroundTruth, r: usize) -> f64 {
    let truth: Vec<u32> = (0..ground_truth.num_queries()).map(|q| ground_truth.nearest(q)).collect();
    recall_at_r_ids(ranked, &truth, r)
}

/// Success rate as a function of expansions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    /// `v*` was expanded within the first `h` expansions.
    pub expanded: Vec<f64>,
    /// `v*` was scored (visited) within the first `h` expansions.
    pub visited: Vec<f64>,
}

pub fn routing_success_vs_hops(
    trajectories: &[SearchTrajectory],
    truth: &[u32],
    max_hops: usize,
) -> SuccessCurve {
    assert_eq!(trajectories.len(), truth.len(), "one trajectory per query");
    let mut expanded = vec![0usize; max_hops + 1];
    let mut visited = vec![0usize; max_hops + 1];
    for (t, &v_star) in trajectories.iter().zip(truth) {
        if let Some(i) = t.steps.iter().position(|s| s.expanded == v_star) {
            for c in expanded.iter_mut().skip(i + 1) {
                *c += 1;
            }
        }
        if let Some(pos) = t.visited.iter().position(|&v| v == v_star) {
            // first h such that v* is among the vertices visited after h expansions
            let h = if pos == 0 {
                0
            } else {
                t.steps
                    .iter()
                    .position(|s| s.visited_after > pos)
                    .map(|i| i + 1)
                    .unwrap_or(usize::MAX)
            };
            for c in visited.iter_mut().skip(h) {
                *c += 1;
            }
        }
    }
    let n = trajectories.len().max(1) as f64;
    SuccessCurve {
        expanded: expanded.into_iter().map(|c| c as f64 / n).collect(),
        visited: visited.into_iter().map(|c| c as f64 / n).collect(),
    }
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &SuccessCurve) -> Result<()> {
    writeln!(w, "hops,expanded,visited")?;
    for (h, (e, v)) in curve.expanded.iter().zip(&curve.visited).enumerate() {
        writeln!(w, "{h},{e:.6},{v:.6}")?;
    }
    Ok(())
}

/// One operating point of the comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRow {
    pub dcs: usize,
    pub mode: ScorerMode,
    pub k: usize,
    /// Routing dimension; ignored for the original scorer.
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub dcs: usize,
    pub scorer: String,
    pub k: usize,
    pub d: usize,
    pub rdcs: usize,
    /// Recall at each of [`REPORT_R_VALUES`].
    pub recall: Vec<f64>,
    pub mean_hops: f64,
    pub mean_dcs_used: f64,
    pub max_dcs_used: f64,
}

impl ReportRow {
    pub fn recall_at_1(&self) -> f64 {
        self.recall[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub r_values: Vec<usize>,
    /// Run configuration echoed for provenance.
    pub provenance: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(provenance: BTreeMap<String, String>) -> Self {
        Self {
            version: REPORT_VERSION,
            r_values: REPORT_R_VALUES.to_vec(),
            provenance,
            rows: Vec::new(),
        }
    }
}

pub struct ComparisonInputs<'a> {
    pub dataset_name: String,
    pub base: ArrayView2<'a, f32>,
    pub queries: ArrayView2<'a, f32>,
    /// Nearest neighbor of each query row.
    pub truth: Vec<u32>,
    pub graph: &'a SimilarityGraph,
    pub learned: Option<(&'a RoutingModel, &'a VertexRepresentations)>,
    /// Construction parameters for the graphs built on truncated vectors.
    pub build: BuildParams,
    pub tau: f64,
    pub provenance: BTreeMap<String, String>,
}

fn summarize(
    name: &str,
    config: &SearchConfig,
    results: &[QueryResult],
    truth: &[u32],
) -> ReportRow {
    let ranked: Vec<Vec<u32>> = results.iter().map(|r| r.ranked.clone()).collect();
    let n = results.len().max(1) as f64;
    ReportRow {
        dataset: name.to_string(),
        dcs: config.dcs_budget,
        scorer: config.mode.label().to_string(),
        k: config.k,
        d: config.routing_dim,
        rdcs: routing_budget(config),
        recall: REPORT_R_VALUES
            .iter()
            .map(|&r| recall_at_r_ids(&ranked, truth, r))
            .collect(),
        mean_hops: results.iter().map(|r| r.trajectory.expansions() as f64).sum::<f64>() / n,
        mean_dcs_used: results.iter().map(|r| r.dcs_used).sum::<f64>() / n,
        max_dcs_used: results.iter().map(|r| r.dcs_used).fold(0.0, f64::max),
    }
}

/// Evaluates every grid row with deterministic search plus rerank.
pub fn run_comparison(inputs: &ComparisonInputs<'_>, grid: &[GridRow]) -> Result<EvalReport> {
    let dim = inputs.base.ncols();
    if inputs.truth.len() != inputs.queries.nrows() {
        return Err(Error::Dimension {
            expected: inputs.queries.nrows(),
            got: inputs.truth.len(),
        });
    }
    let mut truncated: HashMap<usize, (PcaModel, Array2<f32>, SimilarityGraph)> = HashMap::new();
    let mut report = EvalReport::new(inputs.provenance.clone());
    for row in grid {
        let d = if row.mode == ScorerMode::Original { dim } else { row.d };
        let config = SearchConfig {
            dcs_budget: row.dcs,
            k: row.k,
            tau: inputs.tau,
            mode: row.mode,
            full_dim: dim,
            routing_dim: d,
            stochastic: false,
            rng_seed: 0,
            beam_width: None,
            record_heaps: false,
        };
        config.validate()?;
        let results = match row.mode {
            ScorerMode::Original => {
                evaluate_queries(inputs.graph, inputs.base, inputs.queries, &config, Routing::Original)?
            }
            ScorerMode::Learned => {
                let (model, reps) = inputs
                    .learned
                    .ok_or_else(|| Error::argument("learned row requested without a model"))?;
                if model.config.out_dim != d {
                    return Err(Error::argument(format!(
                        "learned row asks for d={d} but the model outputs {}",
                        model.config.out_dim
                    )));
                }
                evaluate_queries(
                    inputs.graph,
                    inputs.base,
                    inputs.queries,
                    &config,
                    Routing::Learned { model, reps },
                )?
            }
            ScorerMode::Truncated => {
                if !truncated.contains_key(&d) {
                    let pca = pca_fit(inputs.base, d)?;
                    let table = pca_transform(&pca, inputs.base)?;
                    let graph = build_nsw(table.view(), inputs.build)?;
                    truncated.insert(d, (pca, table, graph));
                }
                let (pca, table, graph) = &truncated[&d];
                evaluate_queries(
                    graph,
                    inputs.base,
                    inputs.queries,
                    &config,
                    Routing::Truncated {
                        pca,
                        table: table.view(),
                    },
                )?
            }
        };
        let summary = summarize(&inputs.dataset_name, &config, &results, &inputs.truth);
        log::info!(
            "{} dcs={} k={} d={} rdcs={} R@1={:.4}",
            summary.scorer,
            summary.dcs,
            summary.k,
            summary.d,
            summary.rdcs,
            summary.recall_at_1()
        );
        report.rows.push(summary);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::argument(format!("unknown report format '{s}'"))),
        }
    }
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}\n",
            r.dataset,
            r.dcs,
            r.scorer,
            r.k,
            r.d,
            r.rdcs,
            r.recall[0],
            r.recall[1],
            r.recall[2],
            r.mean_hops,
            r.mean_dcs_used,
            r.max_dcs_used
        ));
    }
    s
}

pub fn write_report<P: AsRef<Path>>(report: &EvalReport, path: P, format: ReportFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    match format {
        ReportFormat::Csv => w.write_all(report_to_csv(report).as_bytes())?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report).map_err(|e| Error::format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_json_report<P: AsRef<Path>>(path: P) -> Result<EvalReport> {
    let f = File::open(path.as_ref())?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::SearchStep;

    fn traj(expanded: &[u32], visited: &[u32], after: &[usize]) -> SearchTrajectory {
        SearchTrajectory {
            steps: expanded
                .iter()
                .zip(after)
                .map(|(&e, &a)| SearchStep {
                    expanded: e,
                    heap: vec![],
                    visited_after: a,
                })
                .collect(),
            visited: visited.to_vec(),
            scores: vec![0.0; visited.len()],
            scorings: visited.len(),
            cost_units: 0,
            dcs_used: 0.0,
            result_candidates: vec![],
        }
    }

    #[test]
    fn recall_counts() {
        let ranked = vec![vec![3, 1], vec![2, 5], vec![]];
        let truth = [1, 2, 4];
        assert!((recall_at_r_ids(&ranked, &truth, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_r_ids(&ranked, &truth, 2) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_r_ids(&[vec![1]], &[1], 1), 1.0);
    }

    #[test]
    fn hand_built_success_curve() {
        // query 0: v*=7 scored by the first expansion, expanded second
        // query 1: v*=9 never seen
        let a = traj(&[0, 7, 2], &[0, 7, 2, 5], &[3, 3, 4]);
        let b = traj(&[0, 1], &[0, 1, 3], &[2, 3]);
        let c = routing_success_vs_hops(&[a, b], &[7, 9], 4);
        assert_eq!(c.expanded, vec![0.0, 0.0, 0.5, 0.5, 0.5]);
        assert_eq!(c.visited, vec![0.0, 0.5, 0.5, 0.5, 0.5]);
        let entry_hit = traj(&[], &[4], &[]);
        let c = routing_success_vs_hops(&[entry_hit], &[4], 2);
        assert_eq!(c.visited, vec![1.0, 1.0, 1.0]);
        assert_eq!(c.expanded, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report(&EvalReport::new(BTreeMap::new()), &p, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{REPORT_CSV_HEADER}\n"));
    }
}
