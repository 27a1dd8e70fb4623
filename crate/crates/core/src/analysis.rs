//! Critical exponents from cross-level covariances, and magnetization with a
//! symmetry-breaking boundary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, eval_basis_on, BasisFunction, BasisSet, CoefficientVector};
use crate::error::{Error, Result};
use crate::lattice::{Boundary, Parity, SpinGrid};
use crate::projection::{solve_regularized, Ridge};
use crate::sampler::{check_cascade, run_chains, swendsen_run, ChainConfig, LevelStream, Visitor};
use crate::stats::{estimate_chains, Estimate};

/// Length rescaling of one decimation: squared distances halve.
pub const SCALE_PER_LEVEL: f64 = std::f64::consts::SQRT_2;

/// Bootstrap replicas for exponent error bars.
const BOOTSTRAP_REPLICAS: usize = 200;
/// Contiguous blocks the samples are cut into before resampling.
const BOOTSTRAP_BLOCKS: usize = 50;

/// `T_c = 2 / ln(1 + sqrt 2)`.
pub fn critical_temperature() -> f64 {
    2.0 / (1.0 + std::f64::consts::SQRT_2).ln()
}

/// Spontaneous magnetization of the infinite square lattice.
pub fn onsager_magnetization(temperature: f64) -> f64 {
    if temperature <= 0.0 {
        return 1.0;
    }
    if temperature >= critical_temperature() {
        return 0.0;
    }
    let s = (2.0 / temperature).sinh();
    (1.0 - s.powi(-4)).max(0.0).powf(0.125)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentResult {
    /// Functions the linearization is expressed in.
    pub functions: Vec<String>,
    /// `A[c][b] = d alpha_c^(n+1) / d alpha_b^(n)`.
    pub matrix: Vec<Vec<f64>>,
    /// `(re, im)` pairs sorted by decreasing modulus.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Length rescaling between the two levels.
    pub scale_factor: f64,
    /// Real part of the leading eigenvalue, when it exceeds 1.
    pub thermal_eigenvalue: Option<f64>,
    pub thermal_stderr: f64,
    /// Imaginary part of the leading eigenvalue and its bootstrap error.
    pub leading_imag: f64,
    pub leading_imag_stderr: f64,
    pub y_thermal: Option<f64>,
    pub nu: Option<f64>,
    pub nu_stderr: f64,
    pub n_samples: usize,
    pub warning: Option<String>,
}

/// Sample covariance `cov(a_i, b_j)` over the rows in `idx`.
fn covariance(a: &[Vec<f64>], b: &[Vec<f64>], idx: &[usize]) -> DMatrix<f64> {
    let (p, q) = (a[0].len(), b[0].len());
    let n = idx.len() as f64;
    let mut ma = vec![0.0; p];
    let mut mb = vec![0.0; q];
    for &s in idx {
        ma.iter_mut().zip(&a[s]).for_each(|(m, v)| *m += v / n);
        mb.iter_mut().zip(&b[s]).for_each(|(m, v)| *m += v / n);
    }
    let mut out = DMatrix::zeros(p, q);
    for &s in idx {
        for i in 0..p {
            let da = a[s][i] - ma[i];
            for j in 0..q {
                out[(i, j)] += da * (b[s][j] - mb[j]);
            }
        }
    }
    out / (n - 1.0)
}

/// `A` with `C A = D`, `D = cov(phi^(n+1), phi^(n))`, `C = cov(phi^(n+1), phi^(n+1))`.
fn linearization(fine: &[Vec<f64>], coarse: &[Vec<f64>], idx: &[usize]) -> Result<DMatrix<f64>> {
    let d = covariance(coarse, fine, idx);
    let c = covariance(coarse, coarse, idx);
    let k = c.nrows();
    let mut a = DMatrix::zeros(k, d.ncols());
    for col in 0..d.ncols() {
        let x = solve_regularized(&c, &d.column(col).into_owned(), Ridge::default())?;
        a.set_column(col, &DVector::from_vec(x));
    }
    Ok(a)
}

fn sorted_eigenvalues(a: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let mut ev: Vec<(f64, f64)> = a.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    ev.sort_by(|x, y| (y.0.hypot(y.1)).total_cmp(&x.0.hypot(x.1)));
    ev
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Exponents from per-sample function values of two index-aligned levels.
///
/// `fine[s]` and `coarse[s]` hold the (extensive) lattice sums on sample `s`;
/// `scale_factor` is the length rescaling between the levels. Samples are in
/// chain order, so bootstrap blocks are contiguous runs.
pub fn exponents_from_samples(
    functions: &[BasisFunction],
    fine: &[Vec<f64>],
    coarse: &[Vec<f64>],
    scale_factor: f64,
    seed: u64,
) -> Result<ExponentResult> {
    if fine.len() != coarse.len() {
        return Err(Error::config(format!("misaligned streams: {} vs {} samples", fine.len(), coarse.len())));
    }
    let n = fine.len();
    if n < 2 * BOOTSTRAP_BLOCKS {
        return Err(Error::InsufficientSamples(format!("exponent estimate needs at least {} samples, got {n}", 2 * BOOTSTRAP_BLOCKS)));
    }
    if !(scale_factor > 1.0) {
        return Err(Error::config("scale factor must exceed 1"));
    }
    let all: Vec<usize> = (0..n).collect();
    let a = linearization(fine, coarse, &all)?;
    let eigenvalues = sorted_eigenvalues(&a);
    let (lead_re, lead_im) = eigenvalues[0];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_len = n / BOOTSTRAP_BLOCKS;
    let mut lambdas = Vec::with_capacity(BOOTSTRAP_REPLICAS);
    let mut imags = Vec::with_capacity(BOOTSTRAP_REPLICAS);
    for _ in 0..BOOTSTRAP_REPLICAS {
        let idx: Vec<usize> = (0..BOOTSTRAP_BLOCKS)
            .flat_map(|_| {
                let b = rng.random_range(0..BOOTSTRAP_BLOCKS);
                b * block_len..(b + 1) * block_len
            })
            .collect();
        let ev = sorted_eigenvalues(&linearization(fine, coarse, &idx)?);
        lambdas.push(ev[0].0);
        imags.push(ev[0].1.abs());
    }
    let thermal_stderr = std_dev(&lambdas);
    let ln_b = scale_factor.ln();
    let (thermal, y, nu, nu_stderr, warning) = if lead_re > 1.0 {
        let y = lead_re.ln() / ln_b;
        let nus: Vec<f64> = lambdas.iter().filter(|&&l| l > 1.0).map(|l| ln_b / l.ln()).collect();
        let nu_err = if nus.len() > 1 { std_dev(&nus) } else { f64::INFINITY };
        (Some(lead_re), Some(y), Some(1.0 / y), nu_err, None)
    } else {
        (None, None, None, 0.0, Some(format!("no eigenvalue above 1 (leading {lead_re:.4})")))
    };
    Ok(ExponentResult {
        functions: functions.iter().map(|f| f.to_string()).collect(),
        matrix: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
        eigenvalues,
        scale_factor,
        thermal_eigenvalue: thermal,
        thermal_stderr,
        leading_imag: lead_im,
        leading_imag_stderr: std_dev(&imags),
        y_thermal: y,
        nu,
        nu_stderr,
        n_samples: n,
        warning,
    })
}

/// Functions of `basis` that are not constant on Ising configurations.
pub fn varying_functions(basis: &BasisSet) -> Vec<BasisFunction> {
    basis
        .functions()
        .iter()
        .copied()
        .filter(|f| !matches!(f, BasisFunction::Quadratic(k) if k.get() == 1))
        .collect()
}

fn lattice_sums(grid: &SpinGrid, functions: &[BasisFunction]) -> Vec<f64> {
    functions.iter().map(|f| eval_basis(grid, f)).collect()
}

/// Next-level sums of `functions` over the whole decimated lattice, read off the
/// finer grid: each function's even-closed preimage summed over even centers.
/// The stored coarse grid is a window holding half of the retained sites, so
/// summing on it would not be the quantity the next Hamiltonian couples to.
fn coarse_sums(grid: &SpinGrid, preimages: &[BasisFunction]) -> Vec<f64> {
    preimages.iter().map(|f| eval_basis_on(grid, f, Parity::Even)).collect()
}

fn preimages(functions: &[BasisFunction]) -> Result<Vec<BasisFunction>> {
    functions.iter().map(|f| f.preimage()).collect()
}

/// Exponents between `stream_n` and the next level `stream_n1`.
///
/// Both streams must come from one cascade. The coarse sums are taken on the
/// full decimated lattice (see `coarse_sums`), so `stream_n1` serves only as
/// the alignment check.
pub fn exponent_matrices(stream_n: &LevelStream, stream_n1: &LevelStream, basis: &BasisSet) -> Result<ExponentResult> {
    if stream_n1.level != stream_n.level + 1 {
        return Err(Error::config(format!(
            "exponents need adjacent levels, got {} and {}",
            stream_n.level, stream_n1.level
        )));
    }
    if stream_n.chain_lengths != stream_n1.chain_lengths {
        return Err(Error::config("streams are not index-aligned"));
    }
    let functions = varying_functions(basis);
    let pre = preimages(&functions)?;
    let fine: Vec<Vec<f64>> = stream_n.samples.iter().map(|g| lattice_sums(g, &functions)).collect();
    let coarse: Vec<Vec<f64>> = stream_n.samples.iter().map(|g| coarse_sums(g, &pre)).collect();
    exponents_from_samples(&functions, &fine, &coarse, SCALE_PER_LEVEL, 0)
}

/// Streamed exponent run: bare chains at `temperature`, sums taken on level
/// `fine_level` and on the full lattice one decimation further.
pub fn exponent_run(
    temperature: f64,
    size: usize,
    fine_level: usize,
    basis: &BasisSet,
    cfg: &ChainConfig,
) -> Result<ExponentResult> {
    if fine_level == 0 {
        return Err(Error::config("levels are numbered from 1"));
    }
    let functions = varying_functions(basis);
    let pre = preimages(&functions)?;
    struct Sums<'a> {
        functions: &'a [BasisFunction],
        pre: &'a [BasisFunction],
        fine: Vec<Vec<f64>>,
        coarse: Vec<Vec<f64>>,
    }
    impl Visitor for Sums<'_> {
        fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
            let grid = levels.last().expect("cascade has at least one level");
            self.fine.push(lattice_sums(grid, self.functions));
            self.coarse.push(coarse_sums(grid, self.pre));
            Ok(())
        }
    }
    // the fine level must still decimate to a grid of at least 4x4
    check_cascade(size, fine_level + 1, 4)?;
    let chains = swendsen_run(temperature, size, fine_level, cfg, |_| {
        Ok(Sums { functions: &functions, pre: &pre, fine: Vec::new(), coarse: Vec::new() })
    })?;
    let fine: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.fine.iter().cloned()).collect();
    let coarse: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.coarse.iter().cloned()).collect();
    exponents_from_samples(&functions, &fine, &coarse, SCALE_PER_LEVEL, cfg.seed)
}

/// Which Hamiltonian a magnetization curve was sampled with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HamiltonianSource {
    Bare,
    /// Row `iteration` of a flow table.
    Renormalized { iteration: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationPoint {
    pub temperature: f64,
    pub m: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationCurve {
    pub size: usize,
    pub source: HamiltonianSource,
    pub points: Vec<MagnetizationPoint>,
}

impl MagnetizationCurve {
    /// `T,m,stderr,onsager`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "T,m,stderr,onsager")?;
        for p in &self.points {
            writeln!(out, "{:?},{:?},{:?},{:?}", p.temperature, p.m, p.stderr, onsager_magnetization(p.temperature))?;
        }
        Ok(())
    }
}

struct MagnetizationSeries(Vec<f64>);

impl Visitor for MagnetizationSeries {
    fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
        self.0.push(levels[0].magnetization());
        Ok(())
    }
}

/// Mean interior spin under `exp(+K)` on an `L x L` array whose outer ring is frozen at `+1`.
pub fn magnetization_run(alpha: &CoefficientVector, size: usize, boundary: Boundary, cfg: &ChainConfig) -> Result<Estimate> {
    if boundary != Boundary::FixedPlusOne {
        return Err(Error::config("magnetization needs the fixed +1 boundary; a periodic lattice never breaks the symmetry"));
    }
    let initial = SpinGrid::new(size, boundary)?;
    let chains = run_chains(&initial, alpha, cfg, |_| Ok(MagnetizationSeries(Vec::with_capacity(cfg.measurements_per_chain()))))?;
    let series: Vec<Vec<f64>> = chains.into_iter().map(|c| c.0).collect();
    estimate_chains(&series)
}
