//! Command-line front end.
//!
//! Every command works inside a directory (`--dir`) holding artifacts under
//! fixed names. Settings come from built-in defaults, then an optional flat
//! `key = value` file (`--config`), then command-line flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use crate::data::{
    exact_knn, generate_synthetic_labeled, l2, load_fvecs, sample_mixture, GroundTruth,
    VectorDataset,
};
use crate::error::{Error, Result};
use crate::eval::{run_comparison, write_report, ComparisonInputs, GridRow, ReportFormat, Routing};
use crate::graph::{build_nsw, BuildParams, SimilarityGraph};
use crate::model::{normalized_adjacency, ModelConfig, QueryMode, RoutingModel};
use crate::oracle::{precompute_cache, HopCache};
use crate::search::{ScorerMode, SearchConfig};
use crate::toy::{describe, run_toy, ToyConfig};
use crate::train::{train_loop, write_metrics_csv, Objective, TrainConfig};

pub const GRAPH_FILE: &str = "graph.bin";
pub const CACHE_FILE: &str = "hopcache.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GT_TRAIN_FILE: &str = "gt_train.ivecs";
pub const GT_TEST_FILE: &str = "gt_test.ivecs";
pub const REPORT_FILE: &str = "report.csv";

/// Resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dir: PathBuf,
    pub n: usize,
    pub synth_dim: usize,
    pub clusters: usize,
    pub extra_train: usize,
    pub seed: u64,
    pub max_m: usize,
    pub ef_construction: usize,
    pub slack: u32,
    pub workers: usize,
    pub depth: usize,
    pub dcs: Vec<usize>,
    pub k: usize,
    pub tau: f64,
    pub mode: ScorerMode,
    /// Routing dimension; `None` means the data dimension.
    pub d: Option<usize>,
    pub objective: Objective,
    pub steps: usize,
    pub batch: usize,
    pub max_lr: f64,
    pub eval_every: usize,
    pub validation: usize,
    pub conv_blocks: usize,
    pub conv_filters: usize,
    pub ffn_hidden: usize,
    pub query_mode: QueryMode,
    pub report: Option<PathBuf>,
    pub format: ReportFormat,
    pub top: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("."),
            n: 10_000,
            synth_dim: 32,
            clusters: 64,
            extra_train: 0,
            seed: 0,
            max_m: 16,
            ef_construction: 200,
            slack: 5,
            workers: 0,
            depth: 100,
            dcs: vec![128],
            k: 8,
            tau: 1.0,
            mode: ScorerMode::Original,
            d: None,
            objective: Objective::Imitation,
            steps: 2000,
            batch: 32,
            max_lr: 1e-3,
            eval_every: 200,
            validation: 100,
            conv_blocks: 3,
            conv_filters: 64,
            ffn_hidden: 256,
            query_mode: QueryMode::Identity,
            report: None,
            format: ReportFormat::Csv,
            top: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::argument(format!("bad value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "dir" => self.dir = PathBuf::from(v),
            "n" => self.n = parse(key, v)?,
            "synth_dim" => self.synth_dim = parse(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "extra_train" => self.extra_train = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_m" => self.max_m = parse(key, v)?,
            "ef_construction" => self.ef_construction = parse(key, v)?,
            "slack" | "m" => self.slack = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "dcs" => {
                self.dcs = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "k" => self.k = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "dim" | "d" => self.d = Some(parse(key, v)?),
            "objective" => self.objective = v.parse()?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "max_lr" => self.max_lr = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "validation" => self.validation = parse(key, v)?,
            "conv_blocks" => self.conv_blocks = parse(key, v)?,
            "conv_filters" => self.conv_filters = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "query_mode" => self.query_mode = v.parse()?,
            "report" => self.report = Some(PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "top" => self.top = parse(key, v)?,
            other => return Err(Error::argument(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Settings echoed into reports.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("n", self.n.to_string());
        put("synth_dim", self.synth_dim.to_string());
        put("clusters", self.clusters.to_string());
        put("extra_train", self.extra_train.to_string());
        put("seed", self.seed.to_string());
        put("max_m", self.max_m.to_string());
        put("ef_construction", self.ef_construction.to_string());
        put("slack", self.slack.to_string());
        put("depth", self.depth.to_string());
        put(
            "dcs",
            self.dcs.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        put("k", self.k.to_string());
        put("tau", self.tau.to_string());
        put("mode", self.mode.label().to_string());
        put("d", self.d.map(|d| d.to_string()).unwrap_or_else(|| "D".into()));
        put("objective", self.objective.label().to_string());
        put("steps", self.steps.to_string());
        put("batch", self.batch.to_string());
        put("max_lr", self.max_lr.to_string());
        put("eval_every", self.eval_every.to_string());
        put("validation", self.validation.to_string());
        put("conv_blocks", self.conv_blocks.to_string());
        put("conv_filters", self.conv_filters.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put(
            "query_mode",
            match self.query_mode {
                QueryMode::Identity => "identity".into(),
                QueryMode::Linear => "linear".into(),
            },
        );
        m
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn single_dcs(&self) -> Result<usize> {
        match self.dcs.as_slice() {
            [d] => Ok(*d),
            _ => Err(Error::argument("this command takes a single --dcs value")),
        }
    }

    fn model_config(&self, data_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim: data_dim,
            out_dim: self.d.unwrap_or(data_dim),
            conv_blocks: self.conv_blocks,
            conv_filters: self.conv_filters,
            ffn_hidden: self.ffn_hidden,
            query_mode: self.query_mode,
        }
    }

    fn build_params(&self) -> BuildParams {
        BuildParams {
            max_degree: self.max_m,
            ef_construction: self.ef_construction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "learnroute", version, about = "Budgeted graph search with learned routing")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Opts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Gaussian-mixture dataset (base/train/test fvecs)
    Synth,
    /// Copy fvecs base/train/test files into the work directory
    Ingest {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Exact nearest neighbors of the train and test queries
    GroundTruth,
    /// Build the NSW graph over the base vectors
    BuildGraph,
    /// Hop-distance cache for the training queries
    PrecomputeCache,
    /// Train routing representations
    Train,
    /// Answer queries from an fvecs file
    Search {
        /// Query file [default: the test split]
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Compare scorers on the test queries and write a report
    Eval,
    /// Small 2-D instance contrasting greedy routes
    DemoToy,
}

#[derive(Debug, Args)]
pub struct Opts {
    /// Work directory holding all artifacts [default: .]
    #[arg(long, global = true)]
    pub dir: Option<PathBuf>,
    /// Flat key = value settings file, overridden by flags [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed for data, graph and training [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Distance budget, comma-separated for eval [default: 128]
    #[arg(long, global = true)]
    pub dcs: Option<String>,
    /// Candidates reranked with exact distances [default: 8]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Routing scorer: original, learned or truncated [default: original]
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Routing dimension d [default: data dimension]
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Maximum out-degree of the graph [default: 16]
    #[arg(long, global = true)]
    pub max_m: Option<usize>,
    /// Beam width during graph construction [default: 200]
    #[arg(long, global = true)]
    pub ef_construction: Option<usize>,
    /// imitation, teacher_forcing or topk_only [default: imitation]
    #[arg(long, global = true)]
    pub objective: Option<String>,
    /// Training steps [default: 2000]
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Training batch size [default: 32]
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Peak learning rate of the one-cycle schedule [default: 0.001]
    #[arg(long, global = true)]
    pub max_lr: Option<f64>,
    /// Report path [default: <dir>/report.csv]
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Report format: csv or json [default: csv]
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Synthetic point count before the 8:1:1 split [default: 10000]
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Synthetic dimension [default: 32]
    #[arg(long, global = true)]
    pub synth_dim: Option<usize>,
    /// Synthetic cluster count [default: 64]
    #[arg(long, global = true)]
    pub clusters: Option<usize>,
    /// Extra synthetic training queries from the same mixture [default: 0]
    #[arg(long, global = true)]
    pub extra_train: Option<usize>,
    /// Hop slack m of the supervision cache [default: 5]
    #[arg(long, global = true)]
    pub slack: Option<u32>,
    /// Softmax temperature for distance scorers [default: 1]
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Query branch: identity or linear [default: identity]
    #[arg(long, global = true)]
    pub query_mode: Option<String>,
    /// Ground-truth neighbors kept per query [default: 100]
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Worker threads for cache precomputation, 0 for all cores [default: 0]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Steps between validation runs [default: 200]
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    /// Training queries held out for checkpoint selection [default: 100]
    #[arg(long, global = true)]
    pub validation: Option<usize>,
    /// Results printed per query by search [default: 10]
    #[arg(long, global = true)]
    pub top: Option<usize>,
}

impl Opts {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let mut flag = |k: &str, v: Option<String>| -> Result<()> {
            match v {
                Some(v) => c.set(k, &v),
                None => Ok(()),
            }
        };
        flag("dir", self.dir.as_ref().map(|p| p.display().to_string()))?;
        flag("seed", self.seed.map(|x| x.to_string()))?;
        flag("dcs", self.dcs.clone())?;
        flag("k", self.k.map(|x| x.to_string()))?;
        flag("mode", self.mode.clone())?;
        flag("dim", self.dim.map(|x| x.to_string()))?;
        flag("max_m", self.max_m.map(|x| x.to_string()))?;
        flag("ef_construction", self.ef_construction.map(|x| x.to_string()))?;
        flag("objective", self.objective.clone())?;
        flag("steps", self.steps.map(|x| x.to_string()))?;
        flag("batch", self.batch.map(|x| x.to_string()))?;
        flag("max_lr", self.max_lr.map(|x| x.to_string()))?;
        flag("report", self.report.as_ref().map(|p| p.display().to_string()))?;
        flag("format", self.format.clone())?;
        flag("n", self.n.map(|x| x.to_string()))?;
        flag("synth_dim", self.synth_dim.map(|x| x.to_string()))?;
        flag("clusters", self.clusters.map(|x| x.to_string()))?;
        flag("extra_train", self.extra_train.map(|x| x.to_string()))?;
        flag("slack", self.slack.map(|x| x.to_string()))?;
        flag("tau", self.tau.map(|x| x.to_string()))?;
        flag("query_mode", self.query_mode.clone())?;
        flag("depth", self.depth.map(|x| x.to_string()))?;
        flag("workers", self.workers.map(|x| x.to_string()))?;
        flag("eval_every", self.eval_every.map(|x| x.to_string()))?;
        flag("validation", self.validation.map(|x| x.to_string()))?;
        flag("top", self.top.map(|x| x.to_string()))?;
        Ok(c)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match cli.opts.resolve().and_then(|cfg| execute(&cli.command, &cfg, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<VectorDataset> {
    VectorDataset::load_from_dir(&cfg.dir)
}

fn load_graph(cfg: &RunConfig) -> Result<SimilarityGraph> {
    let p = cfg.path(GRAPH_FILE);
    require(&p)?;
    SimilarityGraph::load(p)
}

pub fn execute(command: &Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth => synth(cfg, out),
        Command::Ingest { base, train, test } => ingest(cfg, base, train, test, out),
        Command::GroundTruth => ground_truth(cfg, out),
        Command::BuildGraph => build_graph(cfg, out),
        Command::PrecomputeCache => precompute(cfg, out),
        Command::Train => train(cfg, out),
        Command::Search { queries } => search_cmd(cfg, queries.as_deref(), out),
        Command::Eval => eval_cmd(cfg, out),
        Command::DemoToy => {
            let outcome = run_toy(&ToyConfig::default(), cfg.seed)?;
            out.write_all(describe(&outcome).as_bytes())?;
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&cfg.dir)?;
    let lab = generate_synthetic_labeled(cfg.n, cfg.synth_dim, cfg.clusters, cfg.seed)?;
    let mut ds = lab.dataset;
    if cfg.extra_train > 0 {
        let extra = sample_mixture(lab.centers.view(), cfg.extra_train, cfg.seed ^ 0x7261_696e)?;
        let train = ndarray::concatenate(Axis(0), &[ds.train_queries.view(), extra.view()])
            .map_err(|e| Error::format(e.to_string()))?;
        ds = VectorDataset::new(ds.base, train, ds.test_queries)?;
    }
    ds.save_to_dir(&cfg.dir)?;
    writeln!(
        out,
        "wrote {} base, {} train, {} test vectors of dim {} to {}",
        ds.num_base(),
        ds.train_queries.nrows(),
        ds.test_queries.nrows(),
        ds.dim(),
        cfg.dir.display()
    )?;
    Ok(())
}

fn ingest(cfg: &RunConfig, base: &Path, train: &Path, test: &Path, out: &mut dyn Write) -> Result<()> {
    for p in [base, train, test] {
        require(p)?;
    }
    let ds = VectorDataset::new(load_fvecs(base)?, load_fvecs(train)?, load_fvecs(test)?)?;
    std::fs::create_dir_all(&cfg.dir)?;
    ds.save_to_dir(&cfg.dir)?;
    writeln!(out, "ingested {} base vectors of dim {}", ds.num_base(), ds.dim())?;
    Ok(())
}

fn ground_truth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let depth = cfg.depth.min(ds.num_base()).max(1);
    exact_knn(ds.base.view(), ds.train_queries.view(), depth)?.save(cfg.path(GT_TRAIN_FILE))?;
    exact_knn(ds.base.view(), ds.test_queries.view(), depth)?.save(cfg.path(GT_TEST_FILE))?;
    writeln!(out, "ground truth at depth {depth} written")?;
    Ok(())
}

fn build_graph(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let g = build_nsw(ds.base.view(), cfg.build_params())?;
    if !g.is_connected_from_entry() {
        log::warn!("some vertices are unreachable from the entry vertex");
    }
    g.save(cfg.path(GRAPH_FILE))?;
    writeln!(out, "graph: {} vertices, {} edges", g.num_vertices(), g.num_edges())?;
    Ok(())
}

fn precompute(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let g = load_graph(cfg)?;
    let gt_path = cfg.path(GT_TRAIN_FILE);
    require(&gt_path)?;
    let gt = GroundTruth::load(gt_path)?;
    let workers = if cfg.workers == 0 {
        rayon::current_num_threads()
    } else {
        cfg.workers
    };
    let summary = precompute_cache(&g, &gt, cfg.slack, workers)?;
    summary.cache.save(cfg.path(CACHE_FILE))?;
    writeln!(
        out,
        "cached {} queries (m = {}), excluded {}",
        summary.cache.len(),
        cfg.slack,
        summary.excluded.len()
    )?;
    Ok(())
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        objective: cfg.objective,
        dcs_budget: cfg.single_dcs()?,
        k: cfg.k,
        batch_size: cfg.batch,
        total_steps: cfg.steps,
        max_lr: cfg.max_lr,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        validation_queries: cfg.validation,
    })
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let g = load_graph(cfg)?;
    let cache_path = cfg.path(CACHE_FILE);
    require(&cache_path)?;
    let cache = HopCache::load(cache_path)?;
    let model = RoutingModel::init(cfg.model_config(ds.dim()), cfg.seed)?;
    let outcome = train_loop(&ds, &g, &cache, model, train_config(cfg)?)?;
    outcome.model.save(cfg.path(MODEL_FILE))?;
    let f = std::fs::File::create(cfg.path(METRICS_FILE))?;
    write_metrics_csv(std::io::BufWriter::new(f), &outcome.metrics)?;
    writeln!(
        out,
        "trained {} steps, best validation recall@1 {:.4}, model fingerprint {:016x}",
        cfg.steps,
        outcome.best_recall,
        outcome.model.fingerprint()
    )?;
    Ok(())
}

fn search_config(cfg: &RunConfig, dim: usize, routing_dim: usize) -> Result<SearchConfig> {
    let c = SearchConfig {
        dcs_budget: cfg.single_dcs()?,
        k: cfg.k,
        tau: cfg.tau,
        mode: cfg.mode,
        full_dim: dim,
        routing_dim,
        stochastic: false,
        rng_seed: cfg.seed,
        beam_width: None,
        record_heaps: false,
    };
    c.validate()?;
    Ok(c)
}

fn search_cmd(cfg: &RunConfig, queries: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let g = load_graph(cfg)?;
    let ds = load_dataset(cfg)?;
    let queries = match queries {
        Some(p) => {
            require(p)?;
            load_fvecs(p)?
        }
        None => ds.test_queries.clone(),
    };
    let dim = ds.dim();
    let results = match cfg.mode {
        ScorerMode::Original => {
            let sc = search_config(cfg, dim, dim)?;
            crate::eval::evaluate_queries(&g, ds.base.view(), queries.view(), &sc, Routing::Original)?
        }
        ScorerMode::Learned => {
            let p = cfg.path(MODEL_FILE);
            require(&p)?;
            let model = RoutingModel::load(p)?;
            let reps = model.vertex_representations(&normalized_adjacency(&g.symmetrize()), ds.base.view())?;
            let sc = search_config(cfg, dim, model.config.out_dim)?;
            crate::eval::evaluate_queries(
                &g,
                ds.base.view(),
                queries.view(),
                &sc,
                Routing::Learned {
                    model: &model,
                    reps: &reps,
                },
            )?
        }
        ScorerMode::Truncated => {
            let d = cfg.d.ok_or_else(|| Error::argument("truncated search needs --dim"))?;
            let pca = crate::data::pca_fit(ds.base.view(), d)?;
            let table = crate::data::pca_transform(&pca, ds.base.view())?;
            let pg = build_nsw(table.view(), cfg.build_params())?;
            let sc = search_config(cfg, dim, d)?;
            crate::eval::evaluate_queries(
                &pg,
                ds.base.view(),
                queries.view(),
                &sc,
                Routing::Truncated {
                    pca: &pca,
                    table: table.view(),
                },
            )?
        }
    };
    for (i, r) in results.iter().enumerate() {
        let q = queries.row(i);
        let q = q.as_slice().expect("standard layout");
        let hits: Vec<String> = r
            .ranked
            .iter()
            .take(cfg.top)
            .map(|&v| format!("{v}:{:.4}", l2(ds.base.row(v as usize).as_slice().expect("standard layout"), q)))
            .collect();
        writeln!(out, "{i}\t{}", hits.join(" "))?;
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let g = load_graph(cfg)?;
    let gt_path = cfg.path(GT_TEST_FILE);
    require(&gt_path)?;
    let gt = GroundTruth::load(gt_path)?;
    if gt.num_queries() != ds.test_queries.nrows() {
        return Err(Error::format("test ground truth does not match the test queries"));
    }
    let model_path = cfg.path(MODEL_FILE);
    let model = if model_path.exists() {
        Some(RoutingModel::load(&model_path)?)
    } else {
        None
    };
    let reps = match &model {
        Some(m) => Some(m.vertex_representations(&normalized_adjacency(&g.symmetrize()), ds.base.view())?),
        None => None,
    };
    let dim = ds.dim();
    let mut grid = Vec::new();
    for &dcs in &cfg.dcs {
        grid.push(GridRow {
            dcs,
            mode: ScorerMode::Original,
            k: 0,
            d: dim,
        });
        if let Some(m) = &model {
            grid.push(GridRow {
                dcs,
                mode: ScorerMode::Learned,
                k: cfg.k,
                d: m.config.out_dim,
            });
        }
        if let Some(d) = cfg.d.filter(|&d| d < dim) {
            grid.push(GridRow {
                dcs,
                mode: ScorerMode::Truncated,
                k: cfg.k,
                d,
            });
        }
    }
    let mut provenance = cfg.pairs();
    if let Some(m) = &model {
        provenance.insert("model_fingerprint".into(), format!("{:016x}", m.fingerprint()));
    }
    let inputs = ComparisonInputs {
        dataset_name: cfg
            .dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        base: ds.base.view(),
        queries: ds.test_queries.view(),
        truth: (0..gt.num_queries()).map(|q| gt.nearest(q)).collect(),
        graph: &g,
        learned: model.as_ref().zip(reps.as_ref()),
        build: cfg.build_params(),
        tau: cfg.tau,
        provenance,
    };
    let report = run_comparison(&inputs, &grid)?;
    let path = cfg.report.clone().unwrap_or_else(|| cfg.path(REPORT_FILE));
    write_report(&report, &path, cfg.format)?;
    for r in &report.rows {
        writeln!(
            out,
            "{:<10} dcs={:<5} k={:<3} d={:<4} rdcs={:<5} recall@1={:.4}",
            r.scorer,
            r.dcs,
            r.k,
            r.d,
            r.rdcs,
            r.recall_at_1()
        )?;
    }
    writeln!(out, "report written to {}", path.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nk = 4\ndcs = 64,128\nmode = learned\n").unwrap();
        let cli = Cli::try_parse_from(["learnroute", "--config", p.to_str().unwrap(), "--k", "2", "eval"]).unwrap();
        let c = cli.opts.resolve().unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.dcs, vec![64, 128]);
        assert_eq!(c.mode, ScorerMode::Learned);

        std::fs::write(&p, "nonsense = 1\n").unwrap();
        let cli = Cli::try_parse_from(["learnroute", "--config", p.to_str().unwrap(), "eval"]).unwrap();
        assert!(matches!(cli.opts.resolve(), Err(Error::Argument(_))));
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut buf = Vec::new();
        assert_eq!(run(["learnroute", "frobnicate"], &mut buf), 1);
        assert_eq!(run(["learnroute", "--k", "x", "eval"], &mut buf), 1);
        assert_eq!(run(["learnroute", "--help"], &mut buf), 0);
    }
}
