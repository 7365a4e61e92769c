//! Offline phase (ii): compress an activation cache into M inducing inputs
//! and fix kernel hyperparameters from activation statistics.
//!
//! Hyperparameters are never optimized: the lengthscale is the empirical
//! median pairwise distance (shared across a layer's neurons), per-neuron
//! amplitudes are clamped sample variances, and the jitter is relative to
//! each neuron's amplitude so one correlation Cholesky serves every neuron.

use crate::cache::ActivationCache;
use crate::error::{GapaError, Result};
use crate::fileio::*;
use crate::tensor::{dist2, Matrix, Vector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GAPAINDC";
const VERSION: u16 = 1;

/// Fixed RBF-kernel hyperparameters for one layer.
///
/// `jitter` is relative: the conditioning system for neuron `i` is
/// `K_i + (jitter · c_i²) I`, i.e. `c_i² (R + jitter·I)` with `R` the shared
/// correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    lengthscale: f64,
    signal_var: Vector,
    jitter: f64,
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_var: Vector, jitter: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(GapaError::InvalidParameter {
                what: format!("lengthscale must be > 0, got {lengthscale}"),
            });
        }
        if !(jitter > 0.0) {
            return Err(GapaError::InvalidParameter {
                what: format!("jitter must be > 0, got {jitter}"),
            });
        }
        if let Some(v) = signal_var.iter().find(|v| **v < 1e-12) {
            return Err(GapaError::InvalidParameter {
                what: format!("signal variance {v} below the 1e-12 floor"),
            });
        }
        Ok(Self {
            lengthscale,
            signal_var,
            jitter,
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn signal_var(&self) -> &Vector {
        &self.signal_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Correlation between two points at squared distance `d2`:
    /// `exp(−d² / (2ℓ²))`. Multiply by `c_i²` for the neuron-`i` kernel.
    #[inline]
    pub fn correlation(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// How the inducing inputs were selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingMethod {
    KMeansPp,
    FarthestPoint,
}

impl InducingMethod {
    fn tag(self) -> u8 {
        match self {
            Self::KMeansPp => 0,
            Self::FarthestPoint => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::KMeansPp),
            1 => Ok(Self::FarthestPoint),
            other => Err(GapaError::CorruptFile {
                reason: format!("unknown inducing method tag {other}"),
            }),
        }
    }
}

/// Compressed inducing inputs plus kernel hyperparameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    layer_index: usize,
    z: Matrix,
    params: KernelParams,
    method: InducingMethod,
    fingerprint: [u8; 32],
}

impl InducingSet {
    pub fn new(
        layer_index: usize,
        z: Matrix,
        params: KernelParams,
        method: InducingMethod,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        if z.rows() == 0 {
            return Err(GapaError::InvalidParameter {
                what: "inducing set must have at least one row".into(),
            });
        }
        if params.signal_var().len() != z.cols() {
            return Err(GapaError::DimensionMismatch {
                context: "signal_var length vs inducing width",
                expected: z.cols(),
                got: params.signal_var().len(),
            });
        }
        Ok(Self {
            layer_index,
            z,
            params,
            method,
            fingerprint,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    /// M × d inducing inputs.
    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn m(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn method(&self) -> InducingMethod {
        self.method
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }
}

/// Parameters for [`build_inducing_set`].
#[derive(Debug, Clone)]
pub struct InducingConfig {
    pub m: usize,
    pub method: InducingMethod,
    pub seed: u64,
    pub max_iters: usize,
    pub pair_budget: usize,
    pub jitter: f64,
}

impl InducingConfig {
    pub fn new(m: usize, method: InducingMethod, seed: u64) -> Self {
        Self {
            m,
            method,
            seed,
            max_iters: 25,
            pair_budget: 1_000_000,
            jitter: 1e-6,
        }
    }
}

fn nearest_centroid(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = dist2(row, centroids.row(c));
        // Exact-double comparison with lower-index tie-breaking keeps
        // assignments independent of evaluation order.
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(rows: &Matrix, centroids: &Matrix) -> Vec<(usize, f64)> {
    (0..rows.rows())
        .into_par_iter()
        .map(|r| nearest_centroid(rows.row(r), centroids))
        .collect()
}

fn kmeans_pp_seed(rows: &Matrix, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = rows.rows();
    let d = rows.cols();
    let mut centroids = Matrix::zeros(m, d);
    let first = rng.gen_range(0..n);
    for c in 0..d {
        centroids.set(0, c, rows.get(first, c));
    }
    let mut min_d2: Vec<f64> = (0..n)
        .map(|r| dist2(rows.row(r), centroids.row(0)))
        .collect();
    for k in 1..m {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            // Weighted by squared distance to the closest chosen center.
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in min_d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every row coincides with a chosen center; any row will do.
            rng.gen_range(0..n)
        };
        for c in 0..d {
            centroids.set(k, c, rows.get(pick, c));
        }
        for r in 0..n {
            let dnew = dist2(rows.row(r), centroids.row(k));
            if dnew < min_d2[r] {
                min_d2[r] = dnew;
            }
        }
    }
    centroids
}

/// One Lloyd update. Returns the new centroids; empty clusters are reseeded
/// to the row currently farthest from its assigned centroid.
fn lloyd_update(rows: &Matrix, assignment: &[(usize, f64)], m: usize) -> Matrix {
    let d = rows.cols();
    let mut sums = vec![0.0f64; m * d];
    let mut counts = vec![0usize; m];
    for (r, (a, _)) in assignment.iter().enumerate() {
        counts[*a] += 1;
        let row = rows.row(r);
        for c in 0..d {
            sums[a * d + c] += row[c];
        }
    }
    let empties: Vec<usize> = (0..m).filter(|k| counts[*k] == 0).collect();
    if !empties.is_empty() {
        // Worst-fit rows, farthest first, ties to the lower index.
        let mut order: Vec<usize> = (0..rows.rows()).collect();
        order.sort_by(|&a, &b| {
            assignment[b]
                .1
                .partial_cmp(&assignment[a].1)
                .unwrap()
                .then(a.cmp(&b))
        });
        for (k, steal) in empties.iter().zip(order) {
            counts[*k] = 1;
            let row = rows.row(steal);
            for c in 0..d {
                sums[k * d + c] = row[c];
            }
        }
    }
    let mut centroids = Matrix::zeros(m, d);
    for k in 0..m {
        for c in 0..d {
            centroids.set(k, c, sums[k * d + c] / counts[k] as f64);
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations to an assignment fixpoint
/// (or `max_iters`), over arbitrary in-memory rows.
pub fn kmeans_pp_rows(rows: &Matrix, m: usize, max_iters: usize, seed: u64) -> Result<Matrix> {
    kmeans_pp_traced(rows, m, max_iters, seed).map(|(c, _)| c)
}

pub(crate) fn kmeans_pp_traced(
    rows: &Matrix,
    m: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Matrix, Vec<f64>)> {
    if rows.rows() == 0 {
        return Err(GapaError::EmptyCache);
    }
    if m == 0 || m > rows.rows() {
        return Err(GapaError::InvalidParameter {
            what: format!("k-means M={m} must be in 1..={}", rows.rows()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(rows, m, &mut rng);
    let mut assignment = assign_all(rows, &centroids);
    let mut objectives = vec![assignment.iter().map(|(_, d)| d).sum::<f64>()];
    for _ in 0..max_iters {
        centroids = lloyd_update(rows, &assignment, m);
        let next = assign_all(rows, &centroids);
        objectives.push(next.iter().map(|(_, d)| d).sum::<f64>());
        let fixpoint = next
            .iter()
            .zip(&assignment)
            .all(|((a, _), (b, _))| a == b);
        assignment = next;
        if fixpoint {
            break;
        }
    }
    Ok((centroids, objectives))
}

/// k-means++ over the cached pre-activations of one layer.
pub fn kmeans_pp(
    cache: &ActivationCache,
    m: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Matrix> {
    kmeans_pp_rows(&cache.load_matrix()?, m, max_iters, seed)
}

/// Greedy farthest-first traversal over in-memory rows; every output row is
/// an exact input row.
pub fn farthest_point_rows(rows: &Matrix, m: usize, seed: u64) -> Result<Matrix> {
    let n = rows.rows();
    if n == 0 {
        return Err(GapaError::EmptyCache);
    }
    if m == 0 || m > n {
        return Err(GapaError::InvalidParameter {
            what: format!("farthest-point M={m} must be in 1..={n}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rows.cols();
    let mut out = Matrix::zeros(m, d);
    let first = rng.gen_range(0..n);
    for c in 0..d {
        out.set(0, c, rows.get(first, c));
    }
    let mut min_d2: Vec<f64> = (0..n)
        .map(|r| dist2(rows.row(r), out.row(0)))
        .collect();
    for k in 1..m {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (r, d2v) in min_d2.iter().enumerate() {
            if *d2v > best.1 {
                best = (r, *d2v);
            }
        }
        let pick = best.0;
        for c in 0..d {
            out.set(k, c, rows.get(pick, c));
        }
        for r in 0..n {
            let dnew = dist2(rows.row(r), out.row(k));
            if dnew < min_d2[r] {
                min_d2[r] = dnew;
            }
        }
    }
    Ok(out)
}

pub fn farthest_point(cache: &ActivationCache, m: usize, seed: u64) -> Result<Matrix> {
    farthest_point_rows(&cache.load_matrix()?, m, seed)
}

/// Median pairwise Euclidean distance over at most `pair_budget` row pairs.
///
/// When all `n(n−1)/2` pairs fit in the budget they are enumerated exactly
/// (making the estimate permutation-invariant); otherwise pairs are sampled
/// uniformly with replacement.
pub fn estimate_lengthscale_rows(rows: &Matrix, pair_budget: usize, seed: u64) -> Result<f64> {
    let n = rows.rows();
    if n < 2 {
        return Err(GapaError::EmptyCache);
    }
    let all_pairs = n * (n - 1) / 2;
    let mut dists: Vec<f64> = if all_pairs <= pair_budget {
        let mut v = Vec::with_capacity(all_pairs);
        for i in 0..n {
            for j in i + 1..n {
                v.push(dist2(rows.row(i), rows.row(j)).sqrt());
            }
        }
        v
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pair_budget)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                dist2(rows.row(i), rows.row(j)).sqrt()
            })
            .collect()
    };
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median == 0.0 {
        return Err(GapaError::DegenerateScale);
    }
    Ok(median)
}

pub fn estimate_lengthscale(
    cache: &ActivationCache,
    pair_budget: usize,
    seed: u64,
) -> Result<f64> {
    estimate_lengthscale_rows(&cache.load_matrix()?, pair_budget, seed)
}

/// Per-neuron signal variance `c_i²`: the squared sample standard deviation
/// (n−1 denominator, Welford accumulation) with the std clamped at 1e-6.
pub fn estimate_signal_var(cache: &ActivationCache) -> Result<Vector> {
    if cache.rows() < 2 {
        return Err(GapaError::EmptyCache);
    }
    let width = cache.width();
    let mut count = 0usize;
    let mut mean = vec![0.0f64; width];
    let mut m2 = vec![0.0f64; width];
    for block in cache.stream_rows(8192)? {
        let block = block?;
        for r in 0..block.rows() {
            count += 1;
            let row = block.row(r);
            for c in 0..width {
                let delta = row[c] - mean[c];
                mean[c] += delta / count as f64;
                m2[c] += delta * (row[c] - mean[c]);
            }
        }
    }
    let vars: Vec<f64> = m2
        .into_iter()
        .map(|m2c| {
            let std = (m2c / (count as f64 - 1.0)).sqrt().max(1e-6);
            std * std
        })
        .collect();
    Vector::from_vec(vars)
}

/// Composes selection and hyperparameter estimation into an [`InducingSet`].
pub fn build_inducing_set(cache: &ActivationCache, cfg: &InducingConfig) -> Result<InducingSet> {
    if cache.rows() == 0 {
        return Err(GapaError::EmptyCache);
    }
    if cfg.m > cache.rows() {
        return Err(GapaError::InvalidParameter {
            what: format!("M={} exceeds cache rows {}", cfg.m, cache.rows()),
        });
    }
    let rows = cache.load_matrix()?;
    let z = match cfg.method {
        InducingMethod::KMeansPp => kmeans_pp_rows(&rows, cfg.m, cfg.max_iters, cfg.seed)?,
        InducingMethod::FarthestPoint => farthest_point_rows(&rows, cfg.m, cfg.seed)?,
    };
    let lengthscale = estimate_lengthscale_rows(&rows, cfg.pair_budget, cfg.seed)?;
    let signal_var = estimate_signal_var(cache)?;
    let params = KernelParams::new(lengthscale, signal_var, cfg.jitter)?;
    InducingSet::new(
        cache.layer_index(),
        z,
        params,
        cfg.method,
        *cache.fingerprint(),
    )
}

/// Writes the inducing-set file. An index section may be appended afterwards
/// by the neighbor module.
pub fn save_inducing_set(set: &InducingSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u16(&mut w, VERSION)?;
    write_u32(&mut w, set.layer_index as u32)?;
    write_u64(&mut w, set.m() as u64)?;
    write_u32(&mut w, set.dim() as u32)?;
    w.write_all(&[set.method.tag()])?;
    write_f64(&mut w, set.params.lengthscale)?;
    write_f64(&mut w, set.params.jitter)?;
    write_f64_slice(&mut w, set.params.signal_var.data())?;
    write_f64_slice(&mut w, set.z.data())?;
    w.write_all(&set.fingerprint)?;
    w.flush()?;
    Ok(())
}

/// Reads an inducing-set file, leaving the reader positioned at any appended
/// index section.
pub(crate) fn read_inducing_set<R: Read>(r: &mut R) -> Result<InducingSet> {
    read_magic(r, MAGIC)?;
    let version = read_u16(r, "inducing version")?;
    if version > VERSION {
        return Err(GapaError::SchemaVersionUnsupported {
            found: version as u32,
            supported: VERSION as u32,
        });
    }
    let layer_index = read_u32(r, "layer index")? as usize;
    let m = read_u64(r, "M")? as usize;
    let d = read_u32(r, "d")? as usize;
    let method = InducingMethod::from_tag(read_u8(r, "method tag")?)?;
    let lengthscale = read_f64(r, "lengthscale")?;
    let jitter = read_f64(r, "jitter")?;
    let signal_var = Vector::from_vec(read_f64_vec(r, d, "signal_var")?)?;
    let z = Matrix::from_vec(m, d, read_f64_vec(r, m * d, "Z")?)?;
    let fp: [u8; 32] = read_bytes(r, 32, "fingerprint")?
        .try_into()
        .expect("32 bytes requested");
    let params = KernelParams::new(lengthscale, signal_var, jitter)?;
    InducingSet::new(layer_index, z, params, method, fp)
}

pub fn load_inducing_set(path: &Path) -> Result<InducingSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_inducing_set(&mut r)
}
