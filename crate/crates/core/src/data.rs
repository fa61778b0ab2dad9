//! Dataset ingestion, synthetic generation, exact ground truth and the PCA
//! baseline transform.
//!
//! Vector files use the `.fvecs` / `.ivecs` layout: every record is a
//! little-endian `i32` dimension followed by that many little-endian 4-byte
//! values. All records in one file share the same dimension.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-coordinate standard deviation of synthetic cluster centers. Points are
/// drawn with unit variance around their center.
pub const SYNTHETIC_CENTER_SPREAD: f32 = 1.0;

pub const BASE_FILE: &str = "base.fvecs";
pub const TRAIN_FILE: &str = "train.fvecs";
pub const TEST_FILE: &str = "test.fvecs";

/// Base vectors plus the train and test query sets drawn from the same
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    pub base: Array2<f32>,
    pub train_queries: Array2<f32>,
    pub test_queries: Array2<f32>,
}

impl VectorDataset {
    pub fn new(
        base: Array2<f32>,
        train_queries: Array2<f32>,
        test_queries: Array2<f32>,
    ) -> Result<Self> {
        if base.nrows() == 0 {
            return Err(Error::argument("dataset needs at least one base vector"));
        }
        let dim = base.ncols();
        for m in [&train_queries, &test_queries] {
            if m.nrows() > 0 && m.ncols() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: m.ncols(),
                });
            }
        }
        for m in [&base, &train_queries, &test_queries] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("dataset coordinates".into()));
            }
        }
        let fix = |m: Array2<f32>| {
            if m.nrows() == 0 {
                Array2::zeros((0, dim))
            } else {
                m
            }
        };
        Ok(Self {
            base,
            train_queries: fix(train_queries),
            test_queries: fix(test_queries),
        })
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn num_base(&self) -> usize {
        self.base.nrows()
    }

    pub fn save_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_fvecs(dir.join(BASE_FILE), self.base.view())?;
        write_fvecs(dir.join(TRAIN_FILE), self.train_queries.view())?;
        write_fvecs(dir.join(TEST_FILE), self.test_queries.view())?;
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<Self> {
        Self::new(
            load_fvecs(dir.join(BASE_FILE))?,
            load_fvecs(dir.join(TRAIN_FILE))?,
            load_fvecs(dir.join(TEST_FILE))?,
        )
    }
}

fn read_vecs<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<[u8; 4]>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Ok((0, 0, Vec::new()));
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    let mut pos = 0usize;
    let mut dim: Option<usize> = None;
    let mut rows = 0usize;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(Error::format(format!("truncated record header at byte {pos}")));
        }
        let d = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if d < 0 {
            return Err(Error::format(format!("negative dimension {d} at byte {pos}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::format(format!(
                    "record {rows} has dimension {d}, expected {prev}"
                )))
            }
            _ => {}
        }
        pos += 4;
        let end = pos + 4 * d;
        if end > bytes.len() {
            return Err(Error::format(format!("truncated record {rows}")));
        }
        out.extend(bytes[pos..end].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap()));
        pos = end;
        rows += 1;
    }
    Ok((rows, dim.unwrap_or(0), out))
}

fn write_vecs<P: AsRef<Path>>(path: P, rows: usize, cols: usize, values: impl Iterator<Item = [u8; 4]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let mut values = values;
    let header = (cols as i32).to_le_bytes();
    for _ in 0..rows {
        w.write_all(&header)?;
        for _ in 0..cols {
            w.write_all(&values.next().expect("matrix shape"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an `.fvecs` file into an `n × d` matrix. An empty file yields `0 × 0`.
pub fn load_fvecs<P: AsRef<Path>>(path: P) -> Result<Array2<f32>> {
    let (rows, cols, raw) = read_vecs(path)?;
    let data = raw.into_iter().map(f32::from_le_bytes).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked while reading"))
}

pub fn write_fvecs<P: AsRef<Path>>(path: P, m: ArrayView2<f32>) -> Result<()> {
    write_vecs(path, m.nrows(), m.ncols(), m.iter().map(|x| x.to_le_bytes()))
}

/// Reads an `.ivecs` file into an `n × d` integer matrix.
pub fn load_ivecs<P: AsRef<Path>>(path: P) -> Result<Array2<i32>> {
    let (rows, cols, raw) = read_vecs(path)?;
    let data = raw.into_iter().map(i32::from_le_bytes).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked while reading"))
}

pub fn write_ivecs<P: AsRef<Path>>(path: P, m: ArrayView2<i32>) -> Result<()> {
    write_vecs(path, m.nrows(), m.ncols(), m.iter().map(|x| x.to_le_bytes()))
}

/// Squared Euclidean distance with a fixed summation order.
#[inline]
pub fn l2_squared(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let t = x[i] - y[i];
            acc[i] += t * t;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        let t = x - y;
        tail += t * t;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
pub fn l2(a: &[f32], b: &[f32]) -> f32 {
    l2_squared(a, b).sqrt()
}

/// A dataset together with the generating cluster centers and per-row labels
/// (labels are given for base, train and test rows in that order).
#[derive(Debug, Clone)]
pub struct LabeledSynthetic {
    pub dataset: VectorDataset,
    pub centers: Array2<f32>,
    pub labels: Vec<usize>,
}

/// Gaussian-mixture dataset split 8:1:1 into base, train and test rows.
pub fn generate_synthetic(n: usize, d: usize, clusters: usize, seed: u64) -> Result<VectorDataset> {
    generate_synthetic_labeled(n, d, clusters, seed).map(|l| l.dataset)
}

pub fn generate_synthetic_labeled(
    n: usize,
    d: usize,
    clusters: usize,
    seed: u64,
) -> Result<LabeledSynthetic> {
    generate_synthetic_spread(n, d, clusters, seed, SYNTHETIC_CENTER_SPREAD)
}

/// Like [`generate_synthetic_labeled`] with an explicit center spread.
pub fn generate_synthetic_spread(
    n: usize,
    d: usize,
    clusters: usize,
    seed: u64,
    spread: f32,
) -> Result<LabeledSynthetic> {
    if n < 10 {
        return Err(Error::argument(format!("synthetic dataset needs n >= 10, got {n}")));
    }
    if clusters == 0 || clusters > n {
        return Err(Error::argument(format!(
            "need n >= clusters >= 1, got n={n}, clusters={clusters}"
        )));
    }
    if d == 0 {
        return Err(Error::argument("dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::<f32>::zeros((clusters, d));
    for x in centers.iter_mut() {
        let z: f32 = StandardNormal.sample(&mut rng);
        *x = z * spread;
    }
    let mut points = Array2::<f32>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in points.axis_iter_mut(Axis(0)) {
        let c = rng.random_range(0..clusters);
        labels.push(c);
        for (x, &m) in row.iter_mut().zip(centers.row(c)) {
            let z: f32 = StandardNormal.sample(&mut rng);
            *x = m + z;
        }
    }
    let n_base = n * 8 / 10;
    let n_train = n / 10;
    let base = points.slice(ndarray::s![..n_base, ..]).to_owned();
    let train = points.slice(ndarray::s![n_base..n_base + n_train, ..]).to_owned();
    let test = points.slice(ndarray::s![n_base + n_train.., ..]).to_owned();
    Ok(LabeledSynthetic {
        dataset: VectorDataset::new(base, train, test)?,
        centers,
        labels,
    })
}

/// Fresh points from the mixture behind a synthetic dataset: a uniformly
/// chosen center plus unit Gaussian noise. Used to enlarge a training-query
/// pool without touching the base or test rows.
pub fn sample_mixture(centers: ArrayView2<f32>, count: usize, seed: u64) -> Result<Array2<f32>> {
    if centers.nrows() == 0 {
        return Err(Error::argument("mixture needs at least one center"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::<f32>::zeros((count, centers.ncols()));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let c = rng.random_range(0..centers.nrows());
        for (x, &m) in row.iter_mut().zip(centers.row(c)) {
            let z: f32 = StandardNormal.sample(&mut rng);
            *x = m + z;
        }
    }
    Ok(out)
}

/// Exact nearest neighbors for a set of queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    /// `Q × R` neighbor ids, nearest first.
    pub neighbors: Array2<u32>,
}

impl GroundTruth {
    pub fn num_queries(&self) -> usize {
        self.neighbors.nrows()
    }

    pub fn depth(&self) -> usize {
        self.neighbors.ncols()
    }

    pub fn nearest(&self, q: usize) -> u32 {
        self.neighbors[[q, 0]]
    }

    pub fn top(&self, q: usize) -> ArrayView1<'_, u32> {
        self.neighbors.row(q)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let m = self.neighbors.mapv(|x| x as i32);
        write_ivecs(path, m.view())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let m = load_ivecs(path)?;
        if m.iter().any(|&x| x < 0) {
            return Err(Error::format("negative id in ground truth file"));
        }
        Ok(Self {
            neighbors: m.mapv(|x| x as u32),
        })
    }
}

/// Exhaustive Euclidean scan. Ties are broken by the smaller base id.
pub fn exact_knn(base: ArrayView2<f32>, queries: ArrayView2<f32>, r: usize) -> Result<GroundTruth> {
    let n = base.nrows();
    if r == 0 || r > n {
        return Err(Error::argument(format!("need 1 <= R <= N, got R={r}, N={n}")));
    }
    if queries.nrows() > 0 && queries.ncols() != base.ncols() {
        return Err(Error::Dimension {
            expected: base.ncols(),
            got: queries.ncols(),
        });
    }
    let rows: Vec<Vec<u32>> = (0..queries.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let q = q.as_slice().expect("standard layout");
            let mut scored: Vec<(f32, u32)> = base
                .axis_iter(Axis(0))
                .enumerate()
                .map(|(i, v)| (l2_squared(v.as_slice().expect("standard layout"), q), i as u32))
                .collect();
            let cmp = |a: &(f32, u32), b: &(f32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if r < scored.len() {
                scored.select_nth_unstable_by(r - 1, cmp);
                scored.truncate(r);
            }
            scored.sort_unstable_by(cmp);
            scored.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    let flat: Vec<u32> = rows.into_iter().flatten().collect();
    Ok(GroundTruth {
        neighbors: Array2::from_shape_vec((queries.nrows(), r), flat).expect("row length is R"),
    })
}

/// Principal-component projection fitted on the base set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `d × D`, orthonormal rows, descending explained variance.
    pub components: Array2<f64>,
    /// Variance along each kept component.
    pub explained_variance: Vec<f64>,
    /// Set when the data spans fewer than `d` directions; the trailing rows
    /// are then an arbitrary orthonormal completion.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn compression_rate(&self) -> f64 {
        self.input_dim() as f64 / self.out_dim() as f64
    }

    /// Maps projected rows back to the input space.
    pub fn inverse_transform(&self, y: ArrayView2<f32>) -> Array2<f32> {
        let y = y.mapv(|v| v as f64);
        let mut x = y.dot(&self.components);
        x += &self.mean;
        x.mapv(|v| v as f32)
    }
}

pub fn pca_fit(base: ArrayView2<f32>, d: usize) -> Result<PcaModel> {
    let (n, dim) = base.dim();
    if d == 0 || d > dim {
        return Err(Error::argument(format!("PCA output dim must be in 1..={dim}, got {d}")));
    }
    if n < d {
        return Err(Error::argument(format!("PCA needs at least {d} rows, got {n}")));
    }
    let x = base.mapv(|v| v as f64);
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64);
    let cov = DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-10 * top.max(1e-300);
    let mut components = Array2::<f64>::zeros((d, dim));
    let mut explained_variance = Vec::with_capacity(d);
    let mut rank_deficient = false;
    for (row, &k) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol {
            rank_deficient = true;
        }
        explained_variance.push(lambda.max(0.0));
        let col = eig.eigenvectors.column(k);
        let pivot = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, v)| *v)
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            components[[row, j]] = sign * col[j];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        rank_deficient,
    })
}

/// `(X − mean) · componentsᵀ`
pub fn pca_transform(model: &PcaModel, x: ArrayView2<f32>) -> Result<Array2<f32>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: x.ncols(),
        });
    }
    let centered = x.mapv(|v| v as f64) - &model.mean;
    Ok(centered.dot(&model.components.t()).mapv(|v| v as f32))
}
