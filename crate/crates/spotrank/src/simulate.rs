//! Ground-truth spot covariance paths and discrete observation sampling.
//!
//! A `CovariancePath` is a map t in [0,1] -> PSD matrix, optionally with a
//! closed-form interval integral. Observations X(i/n) are generated with
//! exact Gaussian increments N(0, int_{(i-1)/n}^{i/n} Sigma_Y(t) dt) whenever
//! the integral is available, and with a 10x-refined Euler scheme otherwise.
//! Here Sigma_Y = Sigma_X + eps^2 I accounts for an independent idiosyncratic
//! Brownian component scaled by `idio_level`.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::specmat::{psd_sqrt, sym_eigen, SymMatrix};
use crate::{Error, Result};

/// Family tag for a covariance path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    RotatingRankR,
    Wishart,
    Constant,
    PiecewiseConstant,
    Custom,
}

/// Compound-Poisson jump overlay: `rate` events per unit time, each jump an
/// isotropic normal vector with entrywise standard deviation `size_sd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub rate: f64,
    pub size_sd: f64,
}

/// Model parameters retained for provenance and reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PathParams {
    Constant {
        sigma: SymMatrix,
    },
    Rotating {
        dim: usize,
        base_eigenvalue: f64,
        smoothness: f64,
        rotation_scale: f64,
        weight: f64,
    },
    Wishart {
        dim: usize,
        rank: usize,
        b0: Vec<Vec<f64>>,
        n_steps: usize,
        seed: u64,
    },
    PiecewiseConstant {
        dim: usize,
        n_cells: usize,
    },
    Scaled {
        factor: f64,
        base: Box<PathParams>,
    },
    Custom {
        dim: usize,
        label: String,
    },
}

/// Piecewise-constant cell storage on the uniform partition of [0,1] into
/// `n_cells` cells, with Kahan-compensated prefix integrals for exact
/// interval integration. Matrices are stored flat, row-major, d*d per cell.
pub struct PiecewiseCells {
    pub dim: usize,
    pub n_cells: usize,
    values: Vec<f64>,
    prefix: Vec<f64>,
}

impl PiecewiseCells {
    fn new(dim: usize, n_cells: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || n_cells == 0 {
            return Err(Error::input("piecewise path needs dim >= 1 and at least one cell"));
        }
        if values.len() != n_cells * dim * dim {
            return Err(Error::input(format!(
                "piecewise path expects {} values, got {}",
                n_cells * dim * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("piecewise path values must be finite"));
        }
        let entries = dim * dim;
        let width = 1.0 / n_cells as f64;
        let mut prefix = vec![0.0; (n_cells + 1) * entries];
        let mut carry = vec![0.0; entries];
        for j in 0..n_cells {
            for e in 0..entries {
                // Kahan step keeps the 1e6-cell prefixes accurate
                let term = values[j * entries + e] * width - carry[e];
                let sum = prefix[j * entries + e] + term;
                carry[e] = (sum - prefix[j * entries + e]) - term;
                prefix[(j + 1) * entries + e] = sum;
            }
        }
        Ok(Self { dim, n_cells, values, prefix })
    }

    pub fn cell_of(&self, t: f64) -> usize {
        let j = (t * self.n_cells as f64).floor();
        (j.max(0.0) as usize).min(self.n_cells - 1)
    }

    pub fn value_at(&self, cell: usize) -> SymMatrix {
        let entries = self.dim * self.dim;
        SymMatrix::from_raw_symmetric(
            self.dim,
            self.values[cell * entries..(cell + 1) * entries].to_vec(),
        )
    }

    fn value_entry(&self, cell: usize, e: usize) -> f64 {
        self.values[cell * self.dim * self.dim + e]
    }

    /// Exact integral over [a, b] within [0, 1].
    pub fn integral(&self, a: f64, b: f64) -> SymMatrix {
        let entries = self.dim * self.dim;
        let a = a.clamp(0.0, 1.0);
        let b = b.clamp(0.0, 1.0);
        if b <= a {
            return SymMatrix::zeros(self.dim);
        }
        let m = self.n_cells as f64;
        let ja = self.cell_of(a);
        // last cell with positive overlap: ceil(b*m) - 1, so an exact cell
        // boundary at b does not drag in an empty cell
        let jb = (((b * m).ceil() as usize).max(1) - 1).clamp(ja, self.n_cells - 1);
        let mut out = vec![0.0; entries];
        if ja == jb {
            for e in 0..entries {
                out[e] = (b - a) * self.value_entry(ja, e);
            }
        } else {
            let ja_end = (ja + 1) as f64 / m;
            let jb_start = jb as f64 / m;
            for e in 0..entries {
                out[e] = (ja_end - a) * self.value_entry(ja, e)
                    + (self.prefix[jb * entries + e] - self.prefix[(ja + 1) * entries + e])
                    + (b - jb_start) * self.value_entry(jb, e);
            }
        }
        SymMatrix::from_raw_symmetric(self.dim, out)
    }
}

type Evaluator = Arc<dyn Fn(f64) -> SymMatrix + Send + Sync>;
type IntegralEvaluator = Arc<dyn Fn(f64, f64) -> SymMatrix + Send + Sync>;

/// Spot covariance path on [0,1].
#[derive(Clone)]
pub struct CovariancePath {
    pub kind: PathKind,
    pub params: PathParams,
    dim: usize,
    evaluator: Evaluator,
    integral: Option<IntegralEvaluator>,
    cells: Option<Arc<PiecewiseCells>>,
}

impl fmt::Debug for CovariancePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CovariancePath")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .field("has_integral", &self.integral.is_some())
            .finish()
    }
}

impl CovariancePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Spot covariance at time t.
    pub fn evaluate(&self, t: f64) -> SymMatrix {
        (self.evaluator)(t)
    }

    pub fn has_exact_integral(&self) -> bool {
        self.integral.is_some()
    }

    /// int_a^b Sigma(t) dt when a closed form is available.
    pub fn integral_over(&self, a: f64, b: f64) -> Option<SymMatrix> {
        self.integral.as_ref().map(|f| f(a, b))
    }

    /// (b-a)^{-1} int_a^b Sigma(t) dt when a closed form is available.
    pub fn average(&self, a: f64, b: f64) -> Option<SymMatrix> {
        if b <= a {
            return None;
        }
        self.integral_over(a, b).map(|m| m.scale(1.0 / (b - a)))
    }

    pub fn cells(&self) -> Option<&PiecewiseCells> {
        self.cells.as_deref()
    }

    /// Constant path Sigma(t) = sigma.
    pub fn constant(sigma: SymMatrix) -> Result<Self> {
        let spec = sym_eigen(&sigma);
        if *spec.eigenvalues.last().unwrap() < -1e-10 {
            return Err(Error::input("constant path matrix is not positive semi-definite"));
        }
        let dim = sigma.dim();
        let params = PathParams::Constant { sigma: sigma.clone() };
        let eval_sigma = sigma.clone();
        let int_sigma = sigma;
        Ok(Self {
            kind: PathKind::Constant,
            params,
            dim,
            evaluator: Arc::new(move |_t| eval_sigma.clone()),
            integral: Some(Arc::new(move |a, b| int_sigma.scale(b - a))),
            cells: None,
        })
    }

    /// Piecewise-constant path on the uniform partition of [0,1].
    pub fn piecewise_constant(values: Vec<SymMatrix>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("piecewise path needs at least one cell"));
        }
        let dim = values[0].dim();
        if values.iter().any(|v| v.dim() != dim) {
            return Err(Error::input("piecewise path cells must share one dimension"));
        }
        let mut flat = Vec::with_capacity(values.len() * dim * dim);
        for v in &values {
            flat.extend_from_slice(v.entries());
        }
        Self::piecewise_constant_flat(dim, values.len(), flat)
    }

    /// Piecewise-constant path from flat row-major storage (d*d per cell).
    pub fn piecewise_constant_flat(dim: usize, n_cells: usize, values: Vec<f64>) -> Result<Self> {
        let cells = Arc::new(PiecewiseCells::new(dim, n_cells, values)?);
        Ok(Self::from_cells(
            PathKind::PiecewiseConstant,
            PathParams::PiecewiseConstant { dim, n_cells },
            cells,
        ))
    }

    fn from_cells(kind: PathKind, params: PathParams, cells: Arc<PiecewiseCells>) -> Self {
        let dim = cells.dim;
        let eval_cells = Arc::clone(&cells);
        let int_cells = Arc::clone(&cells);
        Self {
            kind,
            params,
            dim,
            evaluator: Arc::new(move |t| eval_cells.value_at(eval_cells.cell_of(t))),
            integral: Some(Arc::new(move |a, b| int_cells.integral(a, b))),
            cells: Some(cells),
        }
    }

    /// Rank-deficient rotating model: Sigma(t) = v1(t) v1(t)' + weight * v2(t) v2(t)'
    /// with v1(t) = (sqrt(lambda1), amp * sin(2 pi t / h_rot)) embedded in the
    /// leading 2x2 block, v2 its orthogonal companion, and
    /// amp = h_rot^smoothness / sqrt(lambda1). The closed-form interval
    /// integral is supplied.
    pub fn rotating_model(
        base_eigenvalue: f64,
        smoothness: f64,
        rotation_scale: f64,
        weight: f64,
        dim: usize,
    ) -> Result<Self> {
        let lambda1 = base_eigenvalue;
        let beta = smoothness;
        let h_rot = rotation_scale;
        if !(lambda1 > 0.0 && lambda1.is_finite()) {
            return Err(Error::input("rotating model needs a positive base eigenvalue"));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::input("rotating model smoothness must lie in (0, 1]"));
        }
        if !(h_rot > 0.0 && h_rot <= 1.0) {
            return Err(Error::input("rotating model rotation scale must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::input("rotating model weight must lie in [0, 1]"));
        }
        if dim < 2 {
            return Err(Error::input("rotating model needs dimension at least 2"));
        }
        if lambda1 < h_rot.powf(beta) / 2.0_f64.sqrt() {
            return Err(Error::input(
                "rotating model needs base eigenvalue >= rotation_scale^smoothness / sqrt(2)",
            ));
        }
        let hb = h_rot.powf(beta);
        let amp2 = hb * hb / lambda1;
        let off_coef = (1.0 - weight) * hb;
        let params = PathParams::Rotating {
            dim,
            base_eigenvalue: lambda1,
            smoothness: beta,
            rotation_scale: h_rot,
            weight,
        };
        let evaluator: Evaluator = Arc::new(move |t| {
            let s = (2.0 * std::f64::consts::PI * t / h_rot).sin();
            let s2 = s * s;
            SymMatrix::from_fn(dim, |i, j| match (i, j) {
                (0, 0) => lambda1 + weight * amp2 * s2,
                (0, 1) | (1, 0) => off_coef * s,
                (1, 1) => amp2 * s2 + weight * lambda1,
                _ => 0.0,
            })
            .expect("rotating spot matrix entries are finite")
        });
        let integral: IntegralEvaluator = Arc::new(move |a, b| {
            let two_pi = 2.0 * std::f64::consts::PI;
            let dt = b - a;
            // int sin(2 pi t / h) dt and int sin^2(2 pi t / h) dt in closed form
            let i_s = -(h_rot / two_pi) * ((two_pi * b / h_rot).cos() - (two_pi * a / h_rot).cos());
            let i_s2 = 0.5 * dt
                - (h_rot / (4.0 * two_pi)) * ((2.0 * two_pi * b / h_rot).sin() - (2.0 * two_pi * a / h_rot).sin());
            SymMatrix::from_fn(dim, |i, j| match (i, j) {
                (0, 0) => lambda1 * dt + weight * amp2 * i_s2,
                (0, 1) | (1, 0) => off_coef * i_s,
                (1, 1) => amp2 * i_s2 + weight * lambda1 * dt,
                _ => 0.0,
            })
            .expect("rotating integral entries are finite")
        });
        Ok(Self {
            kind: PathKind::RotatingRankR,
            params,
            dim,
            evaluator,
            integral: Some(integral),
            cells: None,
        })
    }

    /// Gram path Sigma(t) = B(t)' B(t) with B(t) = b0 + W(t) for an r x d
    /// Brownian matrix W sampled on an `n_steps` grid and held constant on
    /// each cell (left endpoint). Every Sigma(t) has rank <= r by construction.
    pub fn wishart_path(
        dim: usize,
        rank: usize,
        b0: &[Vec<f64>],
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::input("wishart path needs 1 <= rank < dim"));
        }
        if n_steps == 0 {
            return Err(Error::input("wishart path needs at least one grid step"));
        }
        if b0.len() != rank || b0.iter().any(|row| row.len() != dim) {
            return Err(Error::input(format!("wishart path b0 must be {rank} x {dim}")));
        }
        if b0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("wishart path b0 entries must be finite"));
        }
        // b0 must have full row rank r: check the r x r Gram of its rows
        let row_gram = SymMatrix::from_fn(rank, |i, j| {
            (0..dim).map(|k| b0[i][k] * b0[j][k]).sum()
        })?;
        let gram_spec = sym_eigen(&row_gram);
        let top = gram_spec.eigenvalues[0].max(1.0);
        if *gram_spec.eigenvalues.last().unwrap() <= 1e-12 * top {
            return Err(Error::input("wishart path b0 rows must be linearly independent"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step_sd = (1.0 / n_steps as f64).sqrt();
        let mut b: Vec<f64> = b0.iter().flatten().copied().collect();
        let entries = dim * dim;
        let mut values = vec![0.0; n_steps * entries];
        for cell in 0..n_steps {
            if cell > 0 {
                for v in b.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += step_sd * z;
                }
            }
            for i in 0..dim {
                for j in i..dim {
                    let g: f64 = (0..rank).map(|k| b[k * dim + i] * b[k * dim + j]).sum();
                    values[cell * entries + i * dim + j] = g;
                    values[cell * entries + j * dim + i] = g;
                }
            }
        }
        let cells = Arc::new(PiecewiseCells::new(dim, n_steps, values)?);
        let params = PathParams::Wishart {
            dim,
            rank,
            b0: b0.to_vec(),
            n_steps,
            seed,
        };
        Ok(Self::from_cells(PathKind::Wishart, params, cells))
    }

    /// Arbitrary user-supplied path, optionally with a closed-form integral.
    pub fn custom(
        dim: usize,
        label: &str,
        evaluator: impl Fn(f64) -> SymMatrix + Send + Sync + 'static,
        integral: Option<IntegralEvaluator>,
    ) -> Self {
        Self {
            kind: PathKind::Custom,
            params: PathParams::Custom { dim, label: label.to_string() },
            dim,
            evaluator: Arc::new(evaluator),
            integral,
            cells: None,
        }
    }

    /// Path scaled by a positive factor c: t -> c * Sigma(t).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::input("path scaling factor must be positive"));
        }
        let base_eval = Arc::clone(&self.evaluator);
        let evaluator: Evaluator = Arc::new(move |t| base_eval(t).scale(factor));
        let integral = self.integral.as_ref().map(|base| {
            let base = Arc::clone(base);
            let f: IntegralEvaluator = Arc::new(move |a, b| base(a, b).scale(factor));
            f
        });
        let cells = self.cells.as_ref().map(|c| {
            Arc::new(PiecewiseCells {
                dim: c.dim,
                n_cells: c.n_cells,
                values: c.values.iter().map(|v| v * factor).collect(),
                prefix: c.prefix.iter().map(|v| v * factor).collect(),
            })
        });
        Ok(Self {
            kind: self.kind,
            params: PathParams::Scaled {
                factor,
                base: Box::new(self.params.clone()),
            },
            dim: self.dim,
            evaluator,
            integral,
            cells,
        })
    }
}

/// A path pair whose block integrals on the 1/n grid coincide exactly:
/// the rotating model with rotation scale 1/n (rank 1 everywhere) and the
/// constant full-rank path diag(lambda1, n^{-2 beta} / (2 lambda1)).
/// Any test decision based on the n observed increments therefore cannot
/// separate them. `holder_radius` only names the smoothness class and must
/// be positive.
pub fn lower_bound_pair(
    n: usize,
    smoothness: f64,
    holder_radius: f64,
    base_eigenvalue: f64,
) -> Result<(CovariancePath, CovariancePath)> {
    if n == 0 {
        return Err(Error::input("lower bound pair needs n >= 1"));
    }
    if !(holder_radius > 0.0) {
        return Err(Error::input("holder radius must be positive"));
    }
    let h_rot = 1.0 / n as f64;
    if base_eigenvalue < h_rot.powf(smoothness) / 2.0_f64.sqrt() {
        return Err(Error::input(
            "lower bound pair needs base eigenvalue >= n^{-smoothness} / sqrt(2)",
        ));
    }
    let rotating = CovariancePath::rotating_model(base_eigenvalue, smoothness, h_rot, 0.0, 2)?;
    let second = h_rot.powf(2.0 * smoothness) / (2.0 * base_eigenvalue);
    let constant = CovariancePath::constant(SymMatrix::diag(&[base_eigenvalue, second])?)?;
    Ok((rotating, constant))
}

/// Everything needed to draw one observation set.
#[derive(Clone)]
pub struct SimulationSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub path: CovariancePath,
    pub idio_level: f64,
    pub drift: Option<Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>>,
    pub jumps: Option<JumpSpec>,
}

impl fmt::Debug for SimulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulationSpec")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("seed", &self.seed)
            .field("path", &self.path)
            .field("idio_level", &self.idio_level)
            .field("has_drift", &self.drift.is_some())
            .field("jumps", &self.jumps)
            .finish()
    }
}

impl SimulationSpec {
    pub fn new(n: usize, seed: u64, path: CovariancePath) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("simulation needs n >= 1"));
        }
        Ok(Self {
            d: path.dim(),
            n,
            seed,
            path,
            idio_level: 0.0,
            drift: None,
            jumps: None,
        })
    }

    pub fn with_idio(mut self, idio_level: f64) -> Result<Self> {
        if !(idio_level >= 0.0 && idio_level.is_finite()) {
            return Err(Error::input("idiosyncratic level must be >= 0"));
        }
        self.idio_level = idio_level;
        Ok(self)
    }

    pub fn with_drift(mut self, drift: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(drift));
        self
    }

    pub fn with_jumps(mut self, jumps: JumpSpec) -> Result<Self> {
        if !(jumps.rate >= 0.0 && jumps.rate.is_finite()) || !(jumps.size_sd >= 0.0) {
            return Err(Error::input("jump rate and size must be >= 0"));
        }
        self.jumps = Some(jumps);
        Ok(self)
    }

    fn meta(&self) -> SimulationMeta {
        SimulationMeta {
            n: self.n,
            d: self.d,
            seed: self.seed,
            idio_level: self.idio_level,
            path: self.path.params.clone(),
            has_drift: self.drift.is_some(),
            jumps: self.jumps,
        }
    }
}

/// Provenance record kept by simulated observation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationMeta {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub idio_level: f64,
    pub path: PathParams,
    pub has_drift: bool,
    pub jumps: Option<JumpSpec>,
}

/// Where an observation set came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Simulated(SimulationMeta),
    Ingested { source: String },
    Derived { operation: String },
}

/// Observations X(i/n), i = 0..n, on the uniform grid, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    n: usize,
    d: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    pub meta: Provenance,
}

impl ObservationSet {
    /// Wrap (n+1) x d values laid out row-major; times are set to i/n.
    pub fn from_values(d: usize, values: Vec<f64>, meta: Provenance) -> Result<Self> {
        if d == 0 || values.len() < 2 * d || values.len() % d != 0 {
            return Err(Error::input("observation values must form an (n+1) x d array with n >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("observation values must be finite"));
        }
        let n = values.len() / d - 1;
        let times = (0..=n).map(|i| i as f64 / n as f64).collect();
        Ok(Self { n, d, times, values, meta })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Increment X(i/n) - X((i-1)/n) for i in 1..=n.
    pub fn increment(&self, i: usize) -> Vec<f64> {
        let prev = self.row(i - 1);
        self.row(i).iter().zip(prev).map(|(a, b)| a - b).collect()
    }

    /// Write as CSV with header `time,asset_1,...,asset_d` at full precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = std::iter::once("time".to_string())
            .chain((1..=self.d).map(|j| format!("asset_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..=self.n {
            let mut fields = Vec::with_capacity(self.d + 1);
            fields.push(format!("{:.16e}", self.times[i]));
            for v in self.row(i) {
                fields.push(format!("{v:.16e}"));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a CSV written by `write_csv` (or any file matching its layout);
    /// the time column must be the uniform grid i/n.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::input("observation csv is empty"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols[0] != "time" {
            return Err(Error::input("observation csv header must be time,asset_1,..."));
        }
        let d = cols.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::input(format!(
                    "observation csv row {} has {} fields, expected {}",
                    row + 2,
                    fields.len(),
                    d + 1
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::input(format!("bad number {s:?} in observation csv")))
            };
            times.push(parse(fields[0])?);
            for f in &fields[1..] {
                let v = parse(f)?;
                if !v.is_finite() {
                    return Err(Error::input("observation csv values must be finite"));
                }
                values.push(v);
            }
        }
        if times.len() < 2 {
            return Err(Error::input("observation csv needs at least two rows"));
        }
        let n = times.len() - 1;
        for (i, &t) in times.iter().enumerate() {
            let want = i as f64 / n as f64;
            if (t - want).abs() > 1e-9 {
                return Err(Error::input(format!(
                    "observation csv time {t} at row {i} is not on the uniform grid i/{n}"
                )));
            }
        }
        Ok(Self {
            n,
            d,
            times,
            values,
            meta: Provenance::Ingested { source: path.display().to_string() },
        })
    }
}

/// Square-root factors for the per-increment Gaussian laws, cached when the
/// path structure makes increments share a law.
enum FactorPlan {
    /// one factor per increment, computed on the fly
    Direct,
    /// factors repeat with period p (time-periodic path aligned to the grid)
    Periodic { factors: Vec<SymMatrix> },
    /// one factor per path cell, n_cells divides n
    PerCell { factors: Vec<SymMatrix>, per_cell: usize },
}

fn increment_factor(spec: &SimulationSpec, i: usize) -> Result<SymMatrix> {
    let n = spec.n as f64;
    let a = (i - 1) as f64 / n;
    let b = i as f64 / n;
    let mut block = spec
        .path
        .integral_over(a, b)
        .expect("direct factors require a closed-form integral");
    if spec.idio_level > 0.0 {
        let eps2 = spec.idio_level * spec.idio_level / n;
        block = block.add(&SymMatrix::identity(spec.d).scale(eps2));
    }
    psd_sqrt(&block)
}

fn build_factor_plan(spec: &SimulationSpec) -> Result<FactorPlan> {
    if let Some(cells) = spec.path.cells() {
        if cells.n_cells <= spec.n && spec.n % cells.n_cells == 0 {
            let scale = 1.0 / spec.n as f64;
            let eps2 = spec.idio_level * spec.idio_level;
            let mut factors = Vec::with_capacity(cells.n_cells);
            for j in 0..cells.n_cells {
                let mut block = cells.value_at(j);
                if eps2 > 0.0 {
                    block = block.add(&SymMatrix::identity(spec.d).scale(eps2));
                }
                factors.push(psd_sqrt(&block.scale(scale))?);
            }
            return Ok(FactorPlan::PerCell { factors, per_cell: spec.n / cells.n_cells });
        }
    }
    if let PathParams::Rotating { rotation_scale, .. } = spec.path.params {
        let p = rotation_scale * spec.n as f64;
        let rounded = p.round();
        if rounded >= 1.0 && (p - rounded).abs() < 1e-9 && rounded <= 65536.0 {
            let p = rounded as usize;
            let mut factors = Vec::with_capacity(p);
            for i in 1..=p {
                factors.push(increment_factor(spec, i)?);
            }
            return Ok(FactorPlan::Periodic { factors });
        }
    }
    Ok(FactorPlan::Direct)
}

/// Draw observations X(i/n) for i = 0..n.
///
/// Increments are exact Gaussian draws N(0, int Sigma_Y) whenever the path
/// carries a closed-form integral, and Euler steps on a 10x finer grid
/// otherwise. Drift is added by the midpoint rule; jumps come from an
/// independent stream of the same seed so that overlaying jumps never
/// perturbs the diffusion draws.
pub fn sample_observations(spec: &SimulationSpec) -> Result<ObservationSet> {
    let n = spec.n;
    let d = spec.d;
    if d != spec.path.dim() {
        return Err(Error::input("simulation dimension must match the path dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = vec![0.0; (n + 1) * d];
    let mut z = vec![0.0; d];
    let nf = n as f64;

    let exact = spec.path.has_exact_integral();
    let plan = if exact { build_factor_plan(spec)? } else { FactorPlan::Direct };
    let substeps = 10;
    let sub_sd = (1.0 / (substeps as f64 * nf)).sqrt();
    let eps2 = spec.idio_level * spec.idio_level;

    for i in 1..=n {
        let (prev, cur) = values.split_at_mut(i * d);
        let prev = &prev[(i - 1) * d..];
        let cur = &mut cur[..d];
        cur.copy_from_slice(prev);

        if exact {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let factor_owned;
            let factor = match &plan {
                FactorPlan::Direct => {
                    factor_owned = increment_factor(spec, i)?;
                    &factor_owned
                }
                FactorPlan::Periodic { factors } => &factors[(i - 1) % factors.len()],
                FactorPlan::PerCell { factors, per_cell } => &factors[(i - 1) / per_cell],
            };
            let dx = factor.matvec(&z);
            for (c, v) in cur.iter_mut().zip(&dx) {
                *c += v;
            }
        } else {
            for u in 0..substeps {
                let t = ((i - 1) as f64 + u as f64 / substeps as f64) / nf;
                let mut sigma = spec.path.evaluate(t);
                if eps2 > 0.0 {
                    sigma = sigma.add(&SymMatrix::identity(d).scale(eps2));
                }
                let factor = psd_sqrt(&sigma)?;
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                let dx = factor.matvec(&z);
                for (c, v) in cur.iter_mut().zip(&dx) {
                    *c += sub_sd * v;
                }
            }
        }

        if let Some(drift) = &spec.drift {
            let t_mid = (i as f64 - 0.5) / nf;
            let b = drift(t_mid);
            if b.len() != d {
                return Err(Error::input("drift must return one value per coordinate"));
            }
            for (c, v) in cur.iter_mut().zip(&b) {
                *c += v / nf;
            }
        }
    }

    if let Some(jumps) = spec.jumps {
        if jumps.rate > 0.0 && jumps.size_sd > 0.0 {
            let mut jump_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            jump_rng.set_stream(1);
            let poisson = Poisson::new(jumps.rate / nf)
                .map_err(|e| Error::input(format!("bad jump rate: {e}")))?;
            let mut shift = vec![0.0; d];
            for i in 1..=n {
                let count = jump_rng.sample(poisson) as u64;
                for _ in 0..count {
                    for s in shift.iter_mut().take(d) {
                        let g: f64 = jump_rng.sample(StandardNormal);
                        *s += jumps.size_sd * g;
                    }
                }
                for (c, s) in values[i * d..(i + 1) * d].iter_mut().zip(&shift) {
                    *c += s;
                }
            }
        }
    }

    ObservationSet::from_values(d, values, Provenance::Simulated(spec.meta()))
}
