//! Learnable routing functions.
//!
//! The database branch `f` maps every vertex to a routing representation
//! with a stack of graph-convolution blocks followed by a two-layer
//! feed-forward head. The query branch `g` is the identity or a single
//! linear map. Gradients are derived by hand for this fixed architecture;
//! everything runs in `f64`.
//!
//! Conv block: `h = FC(ELU(Â·X·W))`, `X' = LayerNorm(X_res + h)` where
//! `X_res` is `X`, or `X·P` on the first block when the input width differs
//! from the filter width.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PcaModel;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"LRMD";
pub const MODEL_VERSION: u32 = 1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Identity,
    Linear,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(QueryMode::Identity),
            "linear" => Ok(QueryMode::Linear),
            _ => Err(Error::argument(format!("unknown query branch '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub out_dim: usize,
    pub conv_blocks: usize,
    pub conv_filters: usize,
    pub ffn_hidden: usize,
    pub query_mode: QueryMode,
}

impl ModelConfig {
    /// Three blocks of 256 filters and a 4096-wide head.
    pub fn full_width(input_dim: usize, out_dim: usize, query_mode: QueryMode) -> Self {
        Self {
            input_dim,
            out_dim,
            conv_blocks: 3,
            conv_filters: 256,
            ffn_hidden: 4096,
            query_mode,
        }
    }

    /// CPU-friendly widths (64 filters, 256 hidden units).
    pub fn desk(input_dim: usize, out_dim: usize, query_mode: QueryMode) -> Self {
        Self {
            conv_filters: 64,
            ffn_hidden: 256,
            ..Self::full_width(input_dim, out_dim, query_mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.out_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::argument("model widths must be positive"));
        }
        if self.conv_blocks > 0 && self.conv_filters == 0 {
            return Err(Error::argument("conv filters must be positive"));
        }
        if self.query_mode == QueryMode::Identity && self.out_dim != self.input_dim {
            return Err(Error::argument(format!(
                "identity query branch needs d = D, got d={} D={}",
                self.out_dim, self.input_dim
            )));
        }
        Ok(())
    }

    fn ffn_input(&self) -> usize {
        if self.conv_blocks > 0 {
            self.conv_filters
        } else {
            self.input_dim
        }
    }

    fn needs_input_projection(&self) -> bool {
        self.conv_blocks > 0 && self.input_dim != self.conv_filters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub w_conv: Array2<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

/// All learnable tensors. Also used as the gradient and optimizer-moment
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub input_proj: Option<Array2<f64>>,
    pub blocks: Vec<ConvBlock>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    pub query_w: Option<Array2<f64>>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let f = cfg.conv_filters;
        let blocks = (0..cfg.conv_blocks)
            .map(|i| {
                let fan_in = if i == 0 { cfg.input_dim } else { f };
                ConvBlock {
                    w_conv: Array2::zeros((fan_in, f)),
                    w_fc: Array2::zeros((f, f)),
                    b_fc: Array1::zeros(f),
                    ln_gain: Array1::zeros(f),
                    ln_bias: Array1::zeros(f),
                }
            })
            .collect();
        Self {
            input_proj: cfg
                .needs_input_projection()
                .then(|| Array2::zeros((cfg.input_dim, f))),
            blocks,
            ffn_w1: Array2::zeros((cfg.ffn_input(), cfg.ffn_hidden)),
            ffn_b1: Array1::zeros(cfg.ffn_hidden),
            ffn_w2: Array2::zeros((cfg.ffn_hidden, cfg.out_dim)),
            ffn_b2: Array1::zeros(cfg.out_dim),
            query_w: (cfg.query_mode == QueryMode::Linear)
                .then(|| Array2::zeros((cfg.out_dim, cfg.input_dim))),
        }
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(p) = &self.input_proj {
            out.push(p.as_slice().unwrap());
        }
        for b in &self.blocks {
            out.push(b.w_conv.as_slice().unwrap());
            out.push(b.w_fc.as_slice().unwrap());
            out.push(b.b_fc.as_slice().unwrap());
            out.push(b.ln_gain.as_slice().unwrap());
            out.push(b.ln_bias.as_slice().unwrap());
        }
        out.push(self.ffn_w1.as_slice().unwrap());
        out.push(self.ffn_b1.as_slice().unwrap());
        out.push(self.ffn_w2.as_slice().unwrap());
        out.push(self.ffn_b2.as_slice().unwrap());
        if let Some(w) = &self.query_w {
            out.push(w.as_slice().unwrap());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(p) = &mut self.input_proj {
            out.push(p.as_slice_mut().unwrap());
        }
        for b in &mut self.blocks {
            out.push(b.w_conv.as_slice_mut().unwrap());
            out.push(b.w_fc.as_slice_mut().unwrap());
            out.push(b.b_fc.as_slice_mut().unwrap());
            out.push(b.ln_gain.as_slice_mut().unwrap());
            out.push(b.ln_bias.as_slice_mut().unwrap());
        }
        out.push(self.ffn_w1.as_slice_mut().unwrap());
        out.push(self.ffn_b1.as_slice_mut().unwrap());
        out.push(self.ffn_w2.as_slice_mut().unwrap());
        out.push(self.ffn_b2.as_slice_mut().unwrap());
        if let Some(w) = &mut self.query_w {
            out.push(w.as_slice_mut().unwrap());
        }
        out
    }

    /// Human-readable names matching [`Params::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_proj.is_some() {
            out.push("input_proj".to_string());
        }
        for i in 0..self.blocks.len() {
            for n in ["w_conv", "w_fc", "b_fc", "ln_gain", "ln_bias"] {
                out.push(format!("block{i}.{n}"));
            }
        }
        out.extend(["ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"].map(String::from));
        if self.query_w.is_some() {
            out.push("query_w".to_string());
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }
}

/// Symmetric-normalized propagation operator `D^-1/2 (A + I) D^-1/2`,
/// stored in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_vertices(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_vertices();
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for p in self.indptr[i]..self.indptr[i + 1] {
                m[[i, self.indices[p] as usize]] = self.values[p];
            }
        }
        m
    }

    /// `Â · X`
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        assert_eq!(n, self.num_vertices());
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; n * c];
        for (i, row) in out.chunks_exact_mut(c.max(1)).enumerate().take(n) {
            for p in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[p] as usize;
                let w = self.values[p];
                for (o, v) in row.iter_mut().zip(&xs[j * c..(j + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        Array2::from_shape_vec((n, c), out).unwrap()
    }
}

/// Builds `Â` over an undirected adjacency (e.g. a symmetrized NSW graph).
pub fn normalized_adjacency(undirected: &[Vec<u32>]) -> NormalizedAdjacency {
    let n = undirected.len();
    let degree: Vec<f64> = undirected.iter().map(|l| (l.len() + 1) as f64).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for (i, list) in undirected.iter().enumerate() {
        let mut row: Vec<u32> = list.clone();
        row.push(i as u32);
        row.sort_unstable();
        row.dedup();
        for j in row {
            indices.push(j);
            values.push(1.0 / (degree[i] * degree[j as usize]).sqrt());
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        indptr,
        indices,
        values,
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Row-wise layer normalization without gain/bias. Returns the normalized
/// rows and each row's `1 / sqrt(var + eps)`.
pub fn layer_norm(z: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let c = z.ncols() as f64;
    let mut xhat = z.to_owned();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        *s = is;
    }
    (xhat, inv_std)
}

/// Gradient through [`layer_norm`] given the gradient w.r.t. its output.
pub fn layer_norm_backward(xhat: ArrayView2<f64>, inv_std: &Array1<f64>, d_xhat: ArrayView2<f64>) -> Array2<f64> {
    let c = xhat.ncols() as f64;
    let mut dz = Array2::zeros(xhat.dim());
    for (((mut out, xh), g), &is) in dz
        .axis_iter_mut(Axis(0))
        .zip(xhat.axis_iter(Axis(0)))
        .zip(d_xhat.axis_iter(Axis(0)))
        .zip(inv_std)
    {
        let mean_g = g.sum() / c;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dz
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    ax: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    ffn_input: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    /// `N × d` vertex representations.
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingModel {
    pub config: ModelConfig,
    pub params: Params,
}

/// Precomputed `f(v)` for every vertex plus the fingerprint of the model
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexRepresentations {
    pub reps: Array2<f32>,
    pub fingerprint: u64,
}

fn glorot<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-limit..limit))
}

impl RoutingModel {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(&config);
        if let Some(w) = &mut p.input_proj {
            *w = glorot(&mut rng, w.dim());
        }
        for b in &mut p.blocks {
            b.w_conv = glorot(&mut rng, b.w_conv.dim());
            b.w_fc = glorot(&mut rng, b.w_fc.dim());
            b.ln_gain.fill(1.0);
        }
        p.ffn_w1 = glorot(&mut rng, p.ffn_w1.dim());
        p.ffn_w2 = glorot(&mut rng, p.ffn_w2.dim());
        if let Some(w) = &mut p.query_w {
            *w = glorot(&mut rng, w.dim());
        }
        Ok(Self { config, params: p })
    }

    /// Sets the linear query branch to the top PCA directions.
    pub fn init_query_from_pca(&mut self, pca: &PcaModel) -> Result<()> {
        match &mut self.params.query_w {
            Some(w) if w.dim() == pca.components.dim() => {
                w.assign(&pca.components);
                Ok(())
            }
            Some(w) => Err(Error::Dimension {
                expected: w.nrows(),
                got: pca.components.nrows(),
            }),
            None => Err(Error::argument("identity query branch has no weights")),
        }
    }

    /// Whole-graph forward pass of `f`, keeping activations for backward.
    pub fn forward(&self, adj: &NormalizedAdjacency, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        if x.nrows() != adj.num_vertices() {
            return Err(Error::Dimension {
                expected: adj.num_vertices(),
                got: x.nrows(),
            });
        }
        let p = &self.params;
        let mut h = x.to_owned();
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for (i, b) in p.blocks.iter().enumerate() {
            let ax = adj.apply(h.view());
            let pre = ax.dot(&b.w_conv);
            let act = pre.mapv(elu);
            let mut z = act.dot(&b.w_fc) + &b.b_fc;
            match (&p.input_proj, i) {
                (Some(proj), 0) => z += &h.dot(proj),
                _ => z += &h,
            }
            let (xhat, inv_std) = layer_norm(z.view());
            let out = &xhat * &b.ln_gain + &b.ln_bias;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                ax,
                pre,
                act,
                xhat,
                inv_std,
            });
        }
        let ffn_pre = h.dot(&p.ffn_w1) + &p.ffn_b1;
        let ffn_act = ffn_pre.mapv(elu);
        let output = ffn_act.dot(&p.ffn_w2) + &p.ffn_b2;
        Ok(ForwardCache {
            blocks,
            ffn_input: h,
            ffn_pre,
            ffn_act,
            output,
        })
    }

    /// Parameter gradients of the `f` branch given `dL/d output`.
    pub fn backward(
        &self,
        adj: &NormalizedAdjacency,
        cache: &ForwardCache,
        d_out: ArrayView2<f64>,
    ) -> Result<Params> {
        if d_out.dim() != cache.output.dim() {
            return Err(Error::Dimension {
                expected: cache.output.ncols(),
                got: d_out.ncols(),
            });
        }
        let p = &self.params;
        let mut g = Params::zeros(&self.config);

        // rows with zero gradient contribute nothing to the head
        let active: Vec<usize> = d_out
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect();
        let d_out_a = d_out.select(Axis(0), &active);
        let act_a = cache.ffn_act.select(Axis(0), &active);
        let pre_a = cache.ffn_pre.select(Axis(0), &active);
        let in_a = cache.ffn_input.select(Axis(0), &active);

        g.ffn_w2 = act_a.t().dot(&d_out_a);
        g.ffn_b2 = d_out_a.sum_axis(Axis(0));
        let mut d_pre = d_out_a.dot(&p.ffn_w2.t());
        Zip::from(&mut d_pre).and(&pre_a).for_each(|d, &x| *d *= elu_grad(x));
        g.ffn_w1 = in_a.t().dot(&d_pre);
        g.ffn_b1 = d_pre.sum_axis(Axis(0));
        if p.blocks.is_empty() {
            return Ok(g);
        }
        let d_in_a = d_pre.dot(&p.ffn_w1.t());
        let mut dh = Array2::<f64>::zeros(cache.ffn_input.dim());
        for (row, &i) in d_in_a.axis_iter(Axis(0)).zip(&active) {
            dh.row_mut(i).assign(&row);
        }

        for (i, (b, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[i];
            gb.ln_gain = (&dh * &c.xhat).sum_axis(Axis(0));
            gb.ln_bias = dh.sum_axis(Axis(0));
            let d_xhat = &dh * &b.ln_gain;
            let dz = layer_norm_backward(c.xhat.view(), &c.inv_std, d_xhat.view());

            gb.w_fc = c.act.t().dot(&dz);
            gb.b_fc = dz.sum_axis(Axis(0));
            let mut d_act = dz.dot(&b.w_fc.t());
            Zip::from(&mut d_act).and(&c.pre).for_each(|d, &x| *d *= elu_grad(x));
            gb.w_conv = c.ax.t().dot(&d_act);

            if i == 0 {
                if let Some(gp) = &mut g.input_proj {
                    *gp = c.input.t().dot(&dz);
                }
                break;
            }
            let d_ax = d_act.dot(&b.w_conv.t());
            // Â is symmetric, so Âᵀ·G = Â·G
            let mut d_input = adj.apply(d_ax.view());
            d_input += &dz;
            dh = d_input;
        }
        Ok(g)
    }

    /// `f` for all vertices, converted to `f32` for search.
    pub fn vertex_representations(
        &self,
        adj: &NormalizedAdjacency,
        base: ArrayView2<f32>,
    ) -> Result<VertexRepresentations> {
        let cache = self.forward(adj, base.mapv(|v| v as f64).view())?;
        let reps = cache.output.mapv(|v| v as f32);
        if reps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vertex representations".into()));
        }
        Ok(VertexRepresentations {
            reps,
            fingerprint: self.fingerprint(),
        })
    }

    /// `g(q)`.
    pub fn query_forward(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: q.len(),
            });
        }
        Ok(match &self.params.query_w {
            None => q.to_vec(),
            Some(w) => w
                .axis_iter(Axis(0))
                .map(|row| row.iter().zip(q).map(|(a, b)| a * b).sum())
                .collect(),
        })
    }

    /// `g(q)` in `f32`, ready for a learned scorer.
    pub fn query_forward_f32(&self, q: &[f32]) -> Result<Vec<f32>> {
        let q64: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        Ok(self.query_forward(&q64)?.into_iter().map(|v| v as f32).collect())
    }

    /// Accumulates `dL/dW += dg ⊗ q` for the linear query branch.
    pub fn query_backward(&self, grads: &mut Params, q: &[f64], d_g: &[f64]) {
        if let Some(gw) = &mut grads.query_w {
            for (mut row, &dg) in gw.axis_iter_mut(Axis(0)).zip(d_g) {
                if dg != 0.0 {
                    for (x, &qv) in row.iter_mut().zip(q) {
                        *x += dg * qv;
                    }
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(32 + 8 * self.params.num_values());
        out.extend_from_slice(&MODEL_MAGIC);
        let mode = match c.query_mode {
            QueryMode::Identity => 0u32,
            QueryMode::Linear => 1,
        };
        for x in [
            MODEL_VERSION,
            c.input_dim as u32,
            c.out_dim as u32,
            c.conv_blocks as u32,
            c.conv_filters as u32,
            c.ffn_hidden as u32,
            mode,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
            return Err(Error::format("bad model magic"));
        }
        let mut r = crate::graph::WordReader::new(bytes);
        r.pos = 4;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let mut next = || r.u32().map(|v| v as usize);
        let (input_dim, out_dim, conv_blocks, conv_filters, ffn_hidden) = (next()?, next()?, next()?, next()?, next()?);
        let query_mode = match r.u32()? {
            0 => QueryMode::Identity,
            1 => QueryMode::Linear,
            m => return Err(Error::format(format!("unknown query mode tag {m}"))),
        };
        let config = ModelConfig {
            input_dim,
            out_dim,
            conv_blocks,
            conv_filters,
            ffn_hidden,
            query_mode,
        };
        config.validate().map_err(|e| Error::format(e.to_string()))?;
        let mut params = Params::zeros(&config);
        let expected = params.num_values();
        if bytes.len() - r.pos != expected * 8 {
            return Err(Error::format(format!(
                "model payload has {} bytes, expected {}",
                bytes.len() - r.pos,
                expected * 8
            )));
        }
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_bits(r.u64()?);
            }
        }
        Ok(Self { config, params })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// 64-bit FNV-1a hash of the serialized model.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: Params::zeros(config),
            v: Params::zeros(config),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One-cycle schedule: linear warm-up from `0.04·max_lr` to `max_lr` over
/// the first 30% of steps, then linear decay back to `0.04·max_lr`.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let lo = 0.04 * max_lr;
    if total_steps == 0 {
        return max_lr;
    }
    let t = (step.min(total_steps)) as f64;
    let peak = 0.3 * total_steps as f64;
    if t <= peak {
        if peak == 0.0 {
            return max_lr;
        }
        lo + (max_lr - lo) * t / peak
    } else {
        max_lr - (max_lr - lo) * (t - peak) / (total_steps as f64 - peak)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adjacency_small_cases() {
        let one = normalized_adjacency(&[vec![]]);
        assert_eq!(one.to_dense(), array![[1.0]]);
        let two = normalized_adjacency(&[vec![1], vec![0]]);
        assert!(two.to_dense().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert!((elu(-1e3) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments_and_shift_invariance() {
        let z = array![[1.0, 2.0, 3.0, 10.0], [-4.0, 0.5, 0.25, 8.0]];
        let (xhat, _) = layer_norm(z.view());
        for row in xhat.axis_iter(Axis(0)) {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let shifted = &z + 123.5;
        let (xs, _) = layer_norm(shifted.view());
        for (a, b) in xs.iter().zip(xhat.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradient_of_constant_row() {
        let z = array![[2.0, 2.0, 2.0]];
        let (xhat, inv) = layer_norm(z.view());
        assert!(xhat.iter().all(|v| *v == 0.0));
        // a uniform upstream gradient moves nothing through the normalization
        let d = layer_norm_backward(xhat.view(), &inv, array![[1.0, 1.0, 1.0]].view());
        assert!(d.iter().all(|v| v.abs() < 1e-12));
        let d = layer_norm_backward(xhat.view(), &inv, array![[1.0, -3.0, 0.5]].view());
        assert!(d.sum().abs() < 1e-9);
    }

    #[test]
    fn identity_query_branch_is_exact() {
        let cfg = ModelConfig::desk(4, 4, QueryMode::Identity);
        let m = RoutingModel::init(cfg, 0).unwrap();
        let q = [0.1, -2.0, 3.5, 1e-7];
        assert_eq!(m.query_forward(&q).unwrap(), q.to_vec());
        assert!(RoutingModel::init(ModelConfig::desk(4, 2, QueryMode::Identity), 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::desk(6, 3, QueryMode::Linear);
        let a = RoutingModel::init(cfg, 1).unwrap();
        let b = RoutingModel::init(cfg, 1).unwrap();
        let c = RoutingModel::init(cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.blocks.iter().all(|b| b.ln_gain.iter().all(|&g| g == 1.0)));
        assert!(a.params.ffn_b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_zero_representations() {
        let cfg = ModelConfig {
            conv_filters: 8,
            ffn_hidden: 16,
            ..ModelConfig::desk(3, 2, QueryMode::Linear)
        };
        let mut m = RoutingModel::init(cfg, 3).unwrap();
        m.params.ffn_w2.fill(0.0);
        m.params.ffn_w2 *= 2.0;
        let adj = normalized_adjacency(&[vec![1], vec![0, 2], vec![1]]);
        let x = array![[1.0f32, 2.0, 3.0], [0.0, 1.0, 0.0], [-1.0, 0.5, 2.0]];
        let r = m.vertex_representations(&adj, x.view()).unwrap();
        assert_eq!(r.reps.dim(), (3, 2));
        assert!(r.reps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_properties() {
        let cfg = ModelConfig {
            input_dim: 1,
            out_dim: 1,
            conv_blocks: 0,
            conv_filters: 0,
            ffn_hidden: 1,
            query_mode: QueryMode::Identity,
        };
        let mut p = Params::zeros(&cfg);
        p.fill(0.5);
        let before = p.clone();
        let mut state = AdamState::new(&cfg);
        let zero = Params::zeros(&cfg);
        adam_step(&mut p, &zero, &mut state, 0.1);
        assert_eq!(p, before);

        let mut ones = Params::zeros(&cfg);
        ones.fill(1.0);
        let mut state = AdamState::new(&cfg);
        adam_step(&mut p, &ones, &mut state, 0.01);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            assert!((a[0] - (b[0] - 0.01)).abs() < 1e-8);
        }
    }

    #[test]
    fn one_cycle_shape() {
        assert!((one_cycle_lr(300, 1000, 1e-3) - 1e-3).abs() < 1e-15);
        assert!((one_cycle_lr(0, 1000, 1e-3) - 4e-5).abs() < 1e-15);
        assert!((one_cycle_lr(1000, 1000, 1e-3) - 4e-5).abs() < 1e-15);
        assert!(one_cycle_lr(150, 1000, 1.0) < one_cycle_lr(250, 1000, 1.0));
        assert!(one_cycle_lr(900, 1000, 1.0) < one_cycle_lr(500, 1000, 1.0));
    }

    #[test]
    fn serialization_rejects_bad_headers() {
        let m = RoutingModel::init(ModelConfig::desk(3, 3, QueryMode::Identity), 0).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(RoutingModel::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(RoutingModel::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(RoutingModel::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
