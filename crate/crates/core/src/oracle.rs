//! Exact reference values by enumerating every state of a tiny system.
//!
//! States are indexed by bit masks: bit `j` set means spin `j` is `-1`. Grid
//! spin `(i, j)` is bit `i * L + j`. All sums run over log-weights shifted by
//! their maximum and use compensated accumulation, so results do not depend
//! on evaluation order beyond rounding of individual terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, eval_basis_on, site_derivative, BasisFunction, BasisSet, CoefficientVector};
use crate::error::{Error, Result};
use crate::lattice::{parity, Boundary, Parity, Site, SpinGrid};
use crate::projection::{build_target_basis, renormalize_from_moments, solve_regularized, MomentLayout, Ridge, TargetBasis};

/// Largest number of free spins the oracle will enumerate.
pub const MAX_SPINS: usize = 20;

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn spins_of(state: usize, n: usize) -> Vec<i8> {
    (0..n).map(|j| if state >> j & 1 == 1 { -1 } else { 1 }).collect()
}

/// What the enumerated spins are arranged as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemShape {
    /// Periodic `L x L` grid.
    Grid(usize),
    /// Open chain.
    Chain(usize),
    Other(usize),
}

/// Exact weights `exp(K(x))` of every state.
#[derive(Clone, Debug)]
pub struct EnumerationTable {
    shape: SystemShape,
    n_spins: usize,
    log_weights: Vec<f64>,
    shift: f64,
    log_z: f64,
    probs: Vec<f64>,
}

impl EnumerationTable {
    /// Enumerate `n_spins` spins with log-weight `log_weight(spins)`.
    pub fn from_log_weight<F>(n_spins: usize, log_weight: F) -> Result<Self>
    where
        F: Fn(&[i8]) -> f64 + Sync,
    {
        Self::build(SystemShape::Other(n_spins), n_spins, log_weight)
    }

    fn build<F>(shape: SystemShape, n_spins: usize, log_weight: F) -> Result<Self>
    where
        F: Fn(&[i8]) -> f64 + Sync,
    {
        if n_spins > MAX_SPINS {
            return Err(Error::config(format!("{n_spins} spins exceed the enumeration limit of {MAX_SPINS}")));
        }
        let log_weights: Vec<f64> = (0..1usize << n_spins).into_par_iter().map(|s| log_weight(&spins_of(s, n_spins))).collect();
        if let Some(bad) = log_weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::numerical(format!("non-finite log-weight for state {bad}")));
        }
        let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = Kahan::default();
        for w in &log_weights {
            z.add((w - shift).exp());
        }
        let z = z.value();
        let probs = log_weights.iter().map(|w| (w - shift).exp() / z).collect();
        Ok(EnumerationTable { shape, n_spins, log_weights, shift, log_z: shift + z.ln(), probs })
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn n_states(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn log_weight(&self, state: usize) -> f64 {
        self.log_weights[state]
    }

    pub fn probability(&self, state: usize) -> f64 {
        self.probs[state]
    }

    pub fn spins(&self, state: usize) -> Vec<i8> {
        spins_of(state, self.n_spins)
    }

    /// The state as a periodic grid (grid tables only).
    pub fn grid(&self, state: usize) -> Result<SpinGrid> {
        match self.shape {
            SystemShape::Grid(l) => SpinGrid::from_spins(l, Boundary::Periodic, self.spins(state)),
            other => Err(Error::Unsupported(format!("{other:?} is not a grid"))),
        }
    }

    /// `E[g]` with `g` given per state index.
    pub fn expect<G: Fn(usize) -> f64 + Sync>(&self, g: G) -> f64 {
        let terms: Vec<f64> = (0..self.n_states()).into_par_iter().map(|s| self.probs[s] * g(s)).collect();
        let mut acc = Kahan::default();
        terms.iter().for_each(|&t| acc.add(t));
        acc.value()
    }

    /// `E[g]` for a function of the grid.
    pub fn expect_grid<G: Fn(&SpinGrid) -> f64 + Sync>(&self, g: G) -> Result<f64> {
        let grids = self.grids()?;
        Ok(self.expect(|s| g(&grids[s])))
    }

    fn grids(&self) -> Result<Vec<SpinGrid>> {
        (0..self.n_states()).into_par_iter().map(|s| self.grid(s)).collect()
    }

    /// Marginal over the spins in `keep`, summing out the rest.
    pub fn marginal(&self, keep: &[usize]) -> Result<MarginalTable> {
        if keep.iter().any(|&k| k >= self.n_spins) {
            return Err(Error::config("kept spin index out of range"));
        }
        let n_keep = keep.len();
        let mut shift = vec![f64::NEG_INFINITY; 1 << n_keep];
        let key = |s: usize| keep.iter().enumerate().fold(0usize, |acc, (b, &k)| acc | ((s >> k & 1) << b));
        for s in 0..self.n_states() {
            let k = key(s);
            shift[k] = shift[k].max(self.log_weights[s]);
        }
        let mut acc = vec![Kahan::default(); 1 << n_keep];
        for s in 0..self.n_states() {
            let k = key(s);
            acc[k].add((self.log_weights[s] - shift[k]).exp());
        }
        let log_marginal: Vec<f64> = acc.iter().zip(&shift).map(|(a, m)| m + a.value().ln()).collect();
        let probs = log_marginal.iter().map(|lm| (lm - self.log_z).exp()).collect();
        Ok(MarginalTable { n_spins: self.n_spins, keep: keep.to_vec(), log_marginal, probs })
    }

    /// `E[g | kept spins]` for every state of the kept spins.
    pub fn conditional<G: Fn(usize) -> f64 + Sync>(&self, keep: &[usize], g: G) -> Vec<f64> {
        let key = |s: usize| keep.iter().enumerate().fold(0usize, |acc, (b, &k)| acc | ((s >> k & 1) << b));
        let values: Vec<f64> = (0..self.n_states()).into_par_iter().map(&g).collect();
        let mut num = vec![Kahan::default(); 1 << keep.len()];
        let mut den = vec![Kahan::default(); 1 << keep.len()];
        for s in 0..self.n_states() {
            let w = (self.log_weights[s] - self.shift).exp();
            num[key(s)].add(w * values[s]);
            den[key(s)].add(w);
        }
        num.iter().zip(&den).map(|(a, b)| a.value() / b.value()).collect()
    }
}

/// Enumerate the periodic `L x L` grid under `exp(K)`.
pub fn enumerate(alpha: &CoefficientVector, size: usize) -> Result<EnumerationTable> {
    if size * size > MAX_SPINS {
        return Err(Error::config(format!("{size}x{size} grid has 2^{} states, above the limit 2^{MAX_SPINS}", size * size)));
    }
    EnumerationTable::build(SystemShape::Grid(size), size * size, |spins| {
        let grid = SpinGrid::from_spins(size, Boundary::Periodic, spins.to_vec()).expect("valid spins");
        alpha.energy(&grid)
    })
}

/// Enumerate the open chain `K = sum_i couplings[i] x_i x_{i+1}`.
pub fn enumerate_chain(couplings: &[f64]) -> Result<EnumerationTable> {
    let n = couplings.len() + 1;
    let c = couplings.to_vec();
    EnumerationTable::build(SystemShape::Chain(n), n, move |x| {
        c.iter().enumerate().map(|(i, k)| k * (x[i] as f64) * (x[i + 1] as f64)).sum()
    })
}

/// Exact `K_hat(x_hat) = log sum over dropped spins of exp(K)`.
#[derive(Clone, Debug)]
pub struct MarginalTable {
    n_spins: usize,
    keep: Vec<usize>,
    log_marginal: Vec<f64>,
    probs: Vec<f64>,
}

impl MarginalTable {
    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn n_states(&self) -> usize {
        self.log_marginal.len()
    }

    pub fn log_marginal(&self) -> &[f64] {
        &self.log_marginal
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Full spin vector with the kept spins set from `key` and every other spin `+1`.
    pub fn representative(&self, key: usize) -> Vec<i8> {
        let mut spins = vec![1i8; self.n_spins];
        for (b, &k) in self.keep.iter().enumerate() {
            if key >> b & 1 == 1 {
                spins[k] = -1;
            }
        }
        spins
    }

    /// Kept spins of marginal state `key`, in `keep` order.
    pub fn kept_spins(&self, key: usize) -> Vec<i8> {
        (0..self.keep.len()).map(|b| if key >> b & 1 == 1 { -1 } else { 1 }).collect()
    }
}

fn even_sites(size: usize) -> Vec<usize> {
    (0..size * size).filter(|&k| (k / size + k % size) % 2 == 0).collect()
}

/// Marginal of the even sublattice of the periodic `L x L` grid.
pub fn exact_marginal(alpha: &CoefficientVector, size: usize) -> Result<MarginalTable> {
    enumerate(alpha, size)?.marginal(&even_sites(size))
}

/// `E[dK/dx_I | even spins]` for every even-sublattice state.
pub fn exact_condexp_derivative(alpha: &CoefficientVector, size: usize, site: Site) -> Result<Vec<f64>> {
    if parity(site) != Parity::Even || site.i >= size || site.j >= size {
        return Err(Error::config(format!("site ({}, {}) is not an even site of the grid", site.i, site.j)));
    }
    let table = enumerate(alpha, size)?;
    let grids = table.grids()?;
    Ok(table.conditional(&even_sites(size), |s| {
        alpha.terms().map(|(f, a)| a * site_derivative(&grids[s], &f, site)).sum()
    }))
}

/// Weighted least-squares fit of a marginal onto feature functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub constant: f64,
    pub coefficients: Vec<f64>,
    /// `sqrt(E[(K_hat - fit)^2])` under the marginal probabilities.
    pub residual_norm: f64,
}

/// Fit `K_hat ~ constant + sum_t c_t g_t` with weights `p(x_hat)`.
///
/// `features[t][key]` is `g_t` at marginal state `key`. Features are centered
/// under the weights; a nearly singular design falls back to the ridge used by
/// the projection solver.
pub fn fit_coefficients(marginal: &MarginalTable, features: &[Vec<f64>]) -> Result<Fit> {
    let p = marginal.probabilities();
    let y = marginal.log_marginal();
    let n = features.len();
    if features.iter().any(|g| g.len() != y.len()) {
        return Err(Error::config("feature length does not match the marginal table"));
    }
    let wmean = |v: &[f64]| -> f64 {
        let mut acc = Kahan::default();
        v.iter().zip(p).for_each(|(a, w)| acc.add(a * w));
        acc.value()
    };
    let means: Vec<f64> = features.iter().map(|g| wmean(g)).collect();
    let ymean = wmean(y);
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| -> f64 {
        let mut acc = Kahan::default();
        for ((x, z), w) in a.iter().zip(b).zip(p) {
            acc.add(w * (x - ma) * (z - mb));
        }
        acc.value()
    };
    let gram = DMatrix::from_fn(n, n, |i, j| cov(&features[i], means[i], &features[j], means[j]));
    let rhs = DVector::from_fn(n, |i, _| cov(&features[i], means[i], y, ymean));
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e.abs())));
    let c = if n > 0 && lo > 1e-12 * hi {
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs).iter().copied().collect(),
            None => solve_regularized(&gram, &rhs, Ridge::default())?,
        }
    } else {
        solve_regularized(&gram, &rhs, Ridge::default())?
    };
    let constant = ymean - c.iter().zip(&means).map(|(a, m)| a * m).sum::<f64>();
    let mut ss = Kahan::default();
    for key in 0..y.len() {
        let fit = constant + (0..n).map(|t| c[t] * features[t][key]).sum::<f64>();
        ss.add(p[key] * (y[key] - fit).powi(2));
    }
    Ok(Fit { constant, coefficients: c, residual_norm: ss.value().max(0.0).sqrt() })
}

/// Exact `E[phi_k]` for every function of `basis`.
pub fn exact_expectations(table: &EnumerationTable, basis: &BasisSet) -> Result<Vec<f64>> {
    let grids = table.grids()?;
    Ok(basis.functions().iter().map(|f| table.expect(|s| eval_basis(&grids[s], f))).collect())
}

/// Exact site-averaged Gram moments, evaluated with [`site_derivative`] one site at a time.
///
/// Same layout as [`crate::projection::MomentEvaluator`], computed without it.
pub fn exact_moments(table: &EnumerationTable, targets: &[BasisFunction], sources: &[BasisFunction]) -> Result<Vec<f64>> {
    let grids = table.grids()?;
    let layout = MomentLayout { n_targets: targets.len(), n_sources: sources.len() };
    let size = grids[0].size();
    let centres: Vec<Site> = even_sites(size).into_iter().map(|k| Site::new(k / size, k % size)).collect();
    let per_state: Vec<Vec<f64>> = grids
        .par_iter()
        .map(|g| {
            let mut m = vec![0.0; layout.len()];
            for &c in &centres {
                let psi: Vec<f64> = targets.iter().map(|f| site_derivative(g, f, c)).collect();
                let src: Vec<f64> = sources.iter().map(|f| site_derivative(g, f, c)).collect();
                for t in 0..psi.len() {
                    for s in t..psi.len() {
                        m[layout.pair(t, s)] += psi[t] * psi[s];
                    }
                    for (k, d) in src.iter().enumerate() {
                        m[layout.cross(k, t)] += d * psi[t];
                    }
                }
            }
            m.iter().map(|v| v / centres.len() as f64).collect()
        })
        .collect();
    Ok((0..layout.len()).map(|i| table.expect(|s| per_state[s][i])).collect())
}

/// Projection with exact inner products set against a direct fit of the exact marginal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyObservation {
    /// Coefficients of the extended target functions from the projection.
    pub projected: Vec<f64>,
    /// Weighted fit of the marginal onto the same functions.
    pub fit: Fit,
    /// `sqrt(Var_p[sum_t (projected_t - fit_t) g_t])`: distance between the two
    /// coarse Hamiltonians as functions, blind to the additive constant and to
    /// coefficients of functions that coincide on the small grid.
    pub distance: f64,
}

/// Compare both routes to the coarse Hamiltonian on the periodic `L x L` grid.
///
/// `target` fixes the functions of the retained spins; the source functions are
/// those of `alpha`.
pub fn key_observation(alpha: &CoefficientVector, size: usize, target: &TargetBasis) -> Result<KeyObservation> {
    let table = enumerate(alpha, size)?;
    let moments = exact_moments(&table, target.extended(), alpha.basis().functions())?;
    let projected = renormalize_from_moments(alpha, target, &moments, Ridge::default())?.values().to_vec();
    let marginal = table.marginal(&even_sites(size))?;
    let features = even_features(&marginal, size, target.extended())?;
    let fit = fit_coefficients(&marginal, &features)?;
    let p = marginal.probabilities();
    let diff: Vec<f64> = (0..marginal.n_states())
        .map(|key| features.iter().enumerate().map(|(t, g)| (projected[t] - fit.coefficients[t]) * g[key]).sum())
        .collect();
    let mean: f64 = diff.iter().zip(p).map(|(d, w)| d * w).sum();
    let var: f64 = diff.iter().zip(p).map(|(d, w)| w * (d - mean).powi(2)).sum();
    Ok(KeyObservation { projected, fit, distance: var.max(0.0).sqrt() })
}

/// Even-centered lattice sums of `functions` at every even-sublattice state.
pub fn even_features(marginal: &MarginalTable, size: usize, functions: &[BasisFunction]) -> Result<Vec<Vec<f64>>> {
    let grids: Vec<SpinGrid> = (0..marginal.n_states())
        .map(|key| SpinGrid::from_spins(size, Boundary::Periodic, marginal.representative(key)))
        .collect::<Result<_>>()?;
    Ok(functions.iter().map(|f| grids.iter().map(|g| eval_basis_on(g, f, Parity::Even)).collect()).collect())
}

/// Renormalized coupling between the ends of an open chain, from its exact marginal.
///
/// `K' = (K_hat(++) + K_hat(--) - K_hat(+-) - K_hat(-+)) / 4`.
pub fn chain_end_coupling(couplings: &[f64]) -> Result<f64> {
    let table = enumerate_chain(couplings)?;
    let last = table.n_spins() - 1;
    let m = table.marginal(&[0, last])?;
    let k = m.log_marginal();
    Ok((k[0b00] + k[0b11] - k[0b01] - k[0b10]) / 4.0)
}

/// Golden values for a small periodic grid at the bare coupling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fixtures {
    pub size: usize,
    pub temperature: f64,
    pub basis: Vec<String>,
    pub log_z: f64,
    /// `E[phi_k]` of the bare measure.
    pub expectations: Vec<f64>,
    pub gram: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    /// Next-level coefficients from the projection with exact inner products.
    pub projected: Vec<f64>,
    /// Coefficients of the weighted fit of the exact marginal.
    pub fit: Fit,
    pub distance: f64,
}

pub fn fixtures(size: usize, temperature: f64, basis: &BasisSet) -> Result<Fixtures> {
    let alpha = crate::basis::bare_hamiltonian(temperature, basis)?;
    let table = enumerate(&alpha, size)?;
    let target = build_target_basis(basis)?;
    let moments = exact_moments(&table, target.extended(), basis.functions())?;
    let layout = MomentLayout { n_targets: target.len(), n_sources: basis.len() };
    let gram = layout.gram(&moments);
    let rhs = layout.rhs(&moments, alpha.values());
    let key = key_observation(&alpha, size, &target)?;
    Ok(Fixtures {
        size,
        temperature,
        basis: basis.functions().iter().map(|f| f.to_string()).collect(),
        log_z: table.log_z(),
        expectations: exact_expectations(&table, basis)?,
        gram: gram.row_iter().map(|r| r.iter().copied().collect()).collect(),
        rhs: rhs.iter().copied().collect(),
        projected: key.projected,
        fit: key.fit,
        distance: key.distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::bare_hamiltonian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_measure() {
        let t = enumerate(&CoefficientVector::zeros(BasisSet::full()), 2).unwrap();
        assert!((t.log_z() - 16f64.ln()).abs() < 1e-14);
        assert!(t.expect(|s| t.spins(s)[0] as f64).abs() < 1e-15);
    }

    #[test]
    fn two_spin_closed_form() {
        let a = 0.7;
        let t = enumerate_chain(&[a]).unwrap();
        let z = 2.0 * a.exp() + 2.0 * (-a).exp();
        assert!((t.log_z() - z.ln()).abs() < 1e-14);
        let corr = t.expect(|s| {
            let x = t.spins(s);
            (x[0] * x[1]) as f64
        });
        assert!((corr - a.tanh()).abs() < 1e-14);
    }

    #[test]
    fn too_many_spins() {
        assert!(enumerate(&CoefficientVector::zeros(BasisSet::full()), 5).is_err());
        assert!(enumerate_chain(&[0.1; 20]).is_err());
        assert!(enumerate_chain(&[0.1; 19]).is_ok());
    }

    #[test]
    fn zero_coupling_marginal_is_flat() {
        let m = exact_marginal(&CoefficientVector::zeros(BasisSet::full()), 4).unwrap();
        assert_eq!(m.n_states(), 256);
        let first = m.log_marginal()[0];
        assert!(m.log_marginal().iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn marginal_sums_to_partition_function() {
        let alpha = bare_hamiltonian(2.27, &BasisSet::full()).unwrap();
        let t = enumerate(&alpha, 4).unwrap();
        let m = t.marginal(&even_sites(4)).unwrap();
        let shift = m.log_marginal().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = m.log_marginal().iter().map(|v| (v - shift).exp()).sum();
        assert!(((shift + z.ln()) - t.log_z()).abs() / t.log_z().abs() < 1e-10);
        assert!((m.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_decimation_identity() {
        let k: f64 = 0.5;
        let want = (k.tanh() * k.tanh()).atanh();
        assert!((chain_end_coupling(&[k, k]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.5 * 1f64.cosh().ln()).abs() < 1e-15);
        // a single bond leaves nothing behind
        let t = enumerate_chain(&[0.8]).unwrap();
        let m = t.marginal(&[0]).unwrap();
        assert!((m.log_marginal()[0] - m.log_marginal()[1]).abs() < 1e-14);
    }

    #[test]
    fn chain_fit_recovers_end_coupling() {
        let t = enumerate_chain(&[0.5, 0.5]).unwrap();
        let m = t.marginal(&[0, 2]).unwrap();
        let ends: Vec<f64> = (0..4).map(|k| m.kept_spins(k).iter().map(|&x| x as f64).product()).collect();
        let fit = fit_coefficients(&m, &[ends]).unwrap();
        assert!((fit.coefficients[0] - 0.5 * 1f64.cosh().ln()).abs() < 1e-12);
        assert!(fit.residual_norm < 1e-12);
    }

    #[test]
    fn condexp_of_retained_function_is_itself() {
        // quad(3) couples even spins only, so conditioning on them is the identity
        let basis: BasisSet = "quad(3) quart(4)".parse().unwrap();
        let alpha = CoefficientVector::new(basis, vec![0.4, -0.3]).unwrap();
        let site = Site::new(0, 0);
        let cond = exact_condexp_derivative(&alpha, 4, site).unwrap();
        let m = exact_marginal(&alpha, 4).unwrap();
        for key in 0..m.n_states() {
            let g = SpinGrid::from_spins(4, Boundary::Periodic, m.representative(key)).unwrap();
            let direct: f64 = alpha.terms().map(|(f, a)| a * site_derivative(&g, &f, site)).sum();
            assert!((cond[key] - direct).abs() < 1e-12);
        }
        assert!(exact_condexp_derivative(&alpha, 4, Site::new(0, 1)).is_err());
        let zero = exact_condexp_derivative(&CoefficientVector::zeros(BasisSet::full()), 4, site).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exact_fit_of_representable_marginal() {
        let basis: BasisSet = "quad(3) quad(4)".parse().unwrap();
        let alpha = CoefficientVector::new(basis.clone(), vec![0.3, 0.2]).unwrap();
        let m = exact_marginal(&alpha, 4).unwrap();
        let feats = even_features(&m, 4, basis.functions()).unwrap();
        let fit = fit_coefficients(&m, &feats).unwrap();
        assert!(fit.residual_norm < 1e-10);
        assert!((fit.coefficients[0] - 0.3).abs() < 1e-9);
        assert!((fit.coefficients[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn exact_moments_agree_with_evaluator() {
        let alpha = bare_hamiltonian(2.27, &BasisSet::full()).unwrap();
        let table = enumerate(&alpha, 4).unwrap();
        let target = build_target_basis(&BasisSet::full()).unwrap();
        let exact = exact_moments(&table, target.extended(), BasisSet::full().functions()).unwrap();
        let mut eval = crate::projection::MomentEvaluator::new(target.extended(), BasisSet::full().functions());
        let grids = table.grids().unwrap();
        let per: Vec<Vec<f64>> = grids
            .iter()
            .map(|g| {
                let mut m = vec![0.0; exact.len()];
                eval.evaluate(g, &mut m).unwrap();
                m
            })
            .collect();
        for i in 0..exact.len() {
            let v = table.expect(|s| per[s][i]);
            assert!((v - exact[i]).abs() < 1e-11, "{i}: {v} vs {}", exact[i]);
        }
    }

    #[test]
    fn fixtures_are_deterministic() {
        let a = serde_json::to_string(&fixtures(4, 2.27, &BasisSet::small()).unwrap()).unwrap();
        let b = serde_json::to_string(&fixtures(4, 2.27, &BasisSet::small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// No function of the kept spins beats the conditional expectation in mean square.
        #[test]
        fn conditional_expectation_is_optimal(
            k1 in -1.0f64..1.0, k2 in -1.0f64..1.0, k3 in -1.0f64..1.0, seed in 0u64..1000
        ) {
            let t = enumerate_chain(&[k1, k2, k3]).unwrap();
            let keep = [0usize, 2];
            let f = |s: usize| { let x = t.spins(s); (x[1] as f64) * (1.0 + x[3] as f64) + x[0] as f64 };
            let cond = t.conditional(&keep, f);
            let key = |s: usize| (s & 1) | ((s >> 2 & 1) << 1);
            let best = t.expect(|s| (f(s) - cond[key(s)]).powi(2));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..4).map(|i| cond[i] + rng.random_range(-0.5..0.5)).collect();
            let other = t.expect(|s| (f(s) - h[key(s)]).powi(2));
            prop_assert!(best <= other + 1e-12);
        }
    }
}
