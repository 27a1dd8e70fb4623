//! Distance shells, collective variables and the translation-invariant basis.
//!
//! Around a site `I` the other sites are grouped by squared distance into
//! shells. The collective variable `X_{k,I}` is the mean spin on shell `k`.
//! Basis functions are lattice sums of even polynomials in these averages:
//!
//! * `Quadratic(k) = sum_J x_J X_{k,J}`
//! * `Quartic(k)   = sum_J X_{k,J}^4`
//! * `Mixed(k, m)  = sum_J X_{k,J}^2 X_{m,J}^2`
//!
//! A Hamiltonian is a [`CoefficientVector`] over a [`BasisSet`]; configurations
//! are weighted by `exp(+K)` with `K = sum_k alpha_k phi_k`, so a positive
//! `Quadratic(2)` coefficient is ferromagnetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Boundary, Parity, Site, SpinGrid};

pub struct Shell {
    pub index: usize,
    pub offsets: &'static [(i32, i32)],
    pub d2: u32,
    pub parity: Parity,
}

const S1: &[(i32, i32)] = &[(0, 0)];
const S2: &[(i32, i32)] = &[(1, 0), (-1, 0), (0, 1), (0, -1)];
const S3: &[(i32, i32)] = &[(1, 1), (1, -1), (-1, 1), (-1, -1)];
const S4: &[(i32, i32)] = &[(2, 0), (-2, 0), (0, 2), (0, -2)];
const S5: &[(i32, i32)] = &[(2, 1), (2, -1), (-2, 1), (-2, -1), (1, 2), (1, -2), (-1, 2), (-1, -2)];
const S6: &[(i32, i32)] = &[(2, 2), (2, -2), (-2, 2), (-2, -2)];
const S7: &[(i32, i32)] = &[(3, 0), (-3, 0), (0, 3), (0, -3)];
const S8: &[(i32, i32)] = &[(3, 1), (3, -1), (-3, 1), (-3, -1), (1, 3), (1, -3), (-1, 3), (-1, -3)];
const S9: &[(i32, i32)] = &[(3, 2), (3, -2), (-3, 2), (-3, -2), (2, 3), (2, -3), (-2, 3), (-2, -3)];
const S10: &[(i32, i32)] = &[(4, 0), (-4, 0), (0, 4), (0, -4)];

/// The supported shells, indexed `1..=10`.
pub static SHELLS: [Shell; 10] = [
    Shell { index: 1, offsets: S1, d2: 0, parity: Parity::Even },
    Shell { index: 2, offsets: S2, d2: 1, parity: Parity::Odd },
    Shell { index: 3, offsets: S3, d2: 2, parity: Parity::Even },
    Shell { index: 4, offsets: S4, d2: 4, parity: Parity::Even },
    Shell { index: 5, offsets: S5, d2: 5, parity: Parity::Odd },
    Shell { index: 6, offsets: S6, d2: 8, parity: Parity::Even },
    Shell { index: 7, offsets: S7, d2: 9, parity: Parity::Odd },
    Shell { index: 8, offsets: S8, d2: 10, parity: Parity::Even },
    Shell { index: 9, offsets: S9, d2: 13, parity: Parity::Odd },
    Shell { index: 10, offsets: S10, d2: 16, parity: Parity::Even },
];

/// Largest coordinate offset appearing in any shell.
pub const MAX_REACH: i64 = 4;

/// 1-based index into [`SHELLS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ShellIndex(u8);

impl ShellIndex {
    pub fn new(k: usize) -> Result<Self> {
        if (1..=SHELLS.len()).contains(&k) {
            Ok(ShellIndex(k as u8))
        } else {
            Err(Error::config(format!("shell index {k} outside the supported table 1..={}", SHELLS.len())))
        }
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn shell(self) -> &'static Shell {
        &SHELLS[self.0 as usize - 1]
    }

    #[inline]
    pub fn offsets(self) -> &'static [(i32, i32)] {
        self.shell().offsets
    }

    #[inline]
    pub fn n(self) -> usize {
        self.shell().offsets.len()
    }

    #[inline]
    pub fn d2(self) -> u32 {
        self.shell().d2
    }

    #[inline]
    pub fn parity(self) -> Parity {
        self.shell().parity
    }

    fn by_d2(d2: u32) -> Option<ShellIndex> {
        SHELLS.iter().find(|s| s.d2 == d2).map(|s| ShellIndex(s.index as u8))
    }
}

impl TryFrom<usize> for ShellIndex {
    type Error = Error;
    fn try_from(k: usize) -> Result<Self> {
        ShellIndex::new(k)
    }
}

impl From<ShellIndex> for usize {
    fn from(k: ShellIndex) -> usize {
        k.get()
    }
}

/// Shell index after decimation + relabeling: squared distances halve.
///
/// Only even-parity shells survive; odd shells connect to eliminated sites.
pub fn relabel_index(k: ShellIndex) -> Result<ShellIndex> {
    if k.parity() != Parity::Even {
        return Err(Error::config(format!("shell {} has odd parity and vanishes under decimation", k.get())));
    }
    ShellIndex::by_d2(k.d2() / 2)
        .ok_or_else(|| Error::config(format!("no shell with squared distance {}", k.d2() / 2)))
}

/// The even shell that relabels onto `k`.
pub fn relabel_preimage(k: ShellIndex) -> Result<ShellIndex> {
    ShellIndex::by_d2(2 * k.d2())
        .filter(|s| s.parity() == Parity::Even)
        .ok_or_else(|| {
            Error::config(format!(
                "relabel preimage of shell {} needs a shell with squared distance {}, missing from the table",
                k.get(),
                2 * k.d2()
            ))
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisFunction {
    Quadratic(ShellIndex),
    Quartic(ShellIndex),
    Mixed(ShellIndex, ShellIndex),
}

impl BasisFunction {
    pub fn quadratic(k: usize) -> Result<Self> {
        Ok(BasisFunction::Quadratic(ShellIndex::new(k)?))
    }

    pub fn quartic(k: usize) -> Result<Self> {
        Ok(BasisFunction::Quartic(ShellIndex::new(k)?))
    }

    pub fn mixed(k: usize, m: usize) -> Result<Self> {
        if k == m {
            return Err(Error::config(format!("mixed({k},{m}) repeats a shell; use quartic({k})")));
        }
        Ok(BasisFunction::Mixed(ShellIndex::new(k)?, ShellIndex::new(m)?))
    }

    pub fn shells(&self) -> Vec<ShellIndex> {
        match *self {
            BasisFunction::Quadratic(k) | BasisFunction::Quartic(k) => vec![k],
            BasisFunction::Mixed(k, m) => vec![k, m],
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, BasisFunction::Quadratic(_))
    }

    /// All shells even: the site derivative at an even site reads only even spins.
    pub fn is_even_closed(&self) -> bool {
        self.shells().iter().all(|k| k.parity() == Parity::Even)
    }

    /// Same function with every shell mapped through [`relabel_index`].
    pub fn relabeled(&self) -> Result<Self> {
        Ok(match *self {
            BasisFunction::Quadratic(k) => BasisFunction::Quadratic(relabel_index(k)?),
            BasisFunction::Quartic(k) => BasisFunction::Quartic(relabel_index(k)?),
            BasisFunction::Mixed(k, m) => BasisFunction::Mixed(relabel_index(k)?, relabel_index(m)?),
        })
    }

    /// The even-closed function that relabels onto `self`.
    pub fn preimage(&self) -> Result<Self> {
        Ok(match *self {
            BasisFunction::Quadratic(k) => BasisFunction::Quadratic(relabel_preimage(k)?),
            BasisFunction::Quartic(k) => BasisFunction::Quartic(relabel_preimage(k)?),
            BasisFunction::Mixed(k, m) => BasisFunction::Mixed(relabel_preimage(k)?, relabel_preimage(m)?),
        })
    }

    fn canonical(&self) -> Self {
        match *self {
            BasisFunction::Mixed(k, m) if m < k => BasisFunction::Mixed(m, k),
            other => other,
        }
    }
}

impl fmt::Display for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisFunction::Quadratic(k) => write!(f, "quad({})", k.get()),
            BasisFunction::Quartic(k) => write!(f, "quart({})", k.get()),
            BasisFunction::Mixed(k, m) => write!(f, "mixed({};{})", k.get(), m.get()),
        }
    }
}

impl FromStr for BasisFunction {
    type Err = Error;

    /// `quad(k)`, `quart(k)`, `mixed(k;m)` (a comma also separates the mixed pair).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("cannot parse basis function '{s}'"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = &s[..open];
        let args: Vec<usize> = s[open + 1..s.len() - 1]
            .split([',', ';'])
            .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (name, args.as_slice()) {
            ("quad", [k]) => BasisFunction::quadratic(*k),
            ("quart", [k]) => BasisFunction::quartic(*k),
            ("mixed", [k, m]) => BasisFunction::mixed(*k, *m),
            _ => Err(bad()),
        }
    }
}

/// An ordered list of basis functions; the order fixes coefficient positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSet {
    name: String,
    functions: Vec<BasisFunction>,
}

impl BasisSet {
    pub fn new(name: impl Into<String>, functions: Vec<BasisFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::config("basis set is empty"));
        }
        for (a, f) in functions.iter().enumerate() {
            if functions[..a].iter().any(|g| g.canonical() == f.canonical()) {
                return Err(Error::config(format!("basis function {f} listed twice")));
            }
        }
        Ok(BasisSet { name: name.into(), functions })
    }

    /// `phi_1..phi_4` and the quartics of shells 2 and 3: four quadratic plus two quartic terms.
    pub fn small() -> Self {
        let q = |k| BasisFunction::Quadratic(ShellIndex(k));
        let p = |k| BasisFunction::Quartic(ShellIndex(k));
        BasisSet { name: "small6".into(), functions: vec![q(1), q(2), q(3), q(4), p(2), p(3)] }
    }

    /// `phi_1..phi_10`: quadratics on shells 1-6, quartics on shells 2-4, mixed (2, 3).
    pub fn full() -> Self {
        let q = |k| BasisFunction::Quadratic(ShellIndex(k));
        let p = |k| BasisFunction::Quartic(ShellIndex(k));
        let mut functions: Vec<_> = (1..=6).map(q).collect();
        functions.extend((2..=4).map(p));
        functions.push(BasisFunction::Mixed(ShellIndex(2), ShellIndex(3)));
        BasisSet { name: "full10".into(), functions }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn position(&self, f: &BasisFunction) -> Option<usize> {
        self.functions.iter().position(|g| g.canonical() == f.canonical())
    }
}

impl FromStr for BasisSet {
    type Err = Error;

    /// A preset name (`small6`, `full10`) or a space/`+`-separated function list,
    /// e.g. `quad(2) quad(3) quart(2)`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "small6" | "small" => Ok(BasisSet::small()),
            "full10" | "full" => Ok(BasisSet::full()),
            list => {
                let functions = list
                    .split(|c: char| c.is_whitespace() || c == '+')
                    .filter(|t| !t.is_empty())
                    .map(BasisFunction::from_str)
                    .collect::<Result<Vec<_>>>()?;
                BasisSet::new("custom", functions)
            }
        }
    }
}

/// Coefficients `alpha_k` of `K = sum_k alpha_k phi_k` over a basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    basis: BasisSet,
    values: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(basis: BasisSet, values: Vec<f64>) -> Result<Self> {
        if values.len() != basis.len() {
            return Err(Error::config(format!(
                "{} coefficients for a basis of {} functions",
                values.len(),
                basis.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite coefficient {v}")));
        }
        Ok(CoefficientVector { basis, values })
    }

    pub fn zeros(basis: BasisSet) -> Self {
        let n = basis.len();
        CoefficientVector { basis, values: vec![0.0; n] }
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coefficient of `f`, zero when `f` is not in the basis.
    pub fn coefficient(&self, f: &BasisFunction) -> f64 {
        self.basis.position(f).map_or(0.0, |p| self.values[p])
    }

    /// Nonzero `(function, coefficient)` pairs.
    pub fn terms(&self) -> impl Iterator<Item = (BasisFunction, f64)> + '_ {
        self.basis.functions.iter().copied().zip(self.values.iter().copied()).filter(|&(_, a)| a != 0.0)
    }

    /// `K(x) = sum_k alpha_k phi_k(x)`.
    pub fn energy(&self, grid: &SpinGrid) -> f64 {
        self.terms().map(|(f, a)| a * eval_basis(grid, &f)).sum()
    }
}

/// Nearest-neighbour Ising at temperature `T` under weight `exp(+K)`.
///
/// `sum_bonds x_I x_J = 2 phi_2` because every bond is seen from both ends and
/// `X_2` carries a `1/4`, so `beta sum_bonds` is `alpha_2 = 2 / T`.
pub fn bare_hamiltonian(temperature: f64, basis: &BasisSet) -> Result<CoefficientVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let nn = BasisFunction::Quadratic(ShellIndex(2));
    let pos = basis
        .position(&nn)
        .ok_or_else(|| Error::config("basis has no quad(2) term to carry the bare coupling"))?;
    let mut values = vec![0.0; basis.len()];
    values[pos] = 2.0 / temperature;
    CoefficientVector::new(basis.clone(), values)
}

#[inline]
pub(crate) fn collective_with<F: Fn(i64, i64) -> i8>(read: &F, k: ShellIndex, i: i64, j: i64) -> f64 {
    let offsets = k.offsets();
    let sum: i32 = offsets.iter().map(|&(di, dj)| read(i + di as i64, j + dj as i64) as i32).sum();
    sum as f64 / offsets.len() as f64
}

#[inline]
pub(crate) fn term_with<F: Fn(i64, i64) -> i8>(read: &F, f: &BasisFunction, i: i64, j: i64) -> f64 {
    match *f {
        BasisFunction::Quadratic(k) => read(i, j) as f64 * collective_with(read, k, i, j),
        BasisFunction::Quartic(k) => collective_with(read, k, i, j).powi(4),
        BasisFunction::Mixed(k, m) => {
            let (a, b) = (collective_with(read, k, i, j), collective_with(read, m, i, j));
            a * a * b * b
        }
    }
}

/// `X_{k,I}`: mean spin on shell `k` around `site`.
pub fn collective(grid: &SpinGrid, shell: ShellIndex, site: Site) -> f64 {
    collective_with(&|i, j| grid.spin_at_coord(i, j), shell, site.i as i64, site.j as i64)
}

/// Summation positions of the lattice sums.
///
/// Periodic: every site. Fixed boundary: every position within [`MAX_REACH`]
/// of the array, so each term touching an interior spin is included and the
/// frozen `+1` environment couples at full strength.
fn summation_range(grid: &SpinGrid) -> (i64, i64) {
    match grid.boundary() {
        Boundary::Periodic => (0, grid.size() as i64),
        Boundary::FixedPlusOne => (-MAX_REACH, grid.size() as i64 + MAX_REACH),
    }
}

/// Value of the lattice sum `f` on `grid`.
pub fn eval_basis(grid: &SpinGrid, f: &BasisFunction) -> f64 {
    let read = |i, j| grid.spin_at_coord(i, j);
    let (lo, hi) = summation_range(grid);
    let mut total = 0.0;
    for i in lo..hi {
        for j in lo..hi {
            total += term_with(&read, f, i, j);
        }
    }
    total
}

/// Lattice sum restricted to centers `J` of one parity (periodic grids).
///
/// For an even-closed `f` summed over even centers this is a function of the
/// even sublattice alone.
pub fn eval_basis_on(grid: &SpinGrid, f: &BasisFunction, centers: Parity) -> f64 {
    let read = |i, j| grid.spin_at_coord(i, j);
    (0..grid.n_sites())
        .map(|k| grid.site(k))
        .filter(|&s| crate::lattice::parity(s) == centers)
        .map(|s| term_with(&read, f, s.i as i64, s.j as i64))
        .sum()
}

/// Polynomial partial derivative `d phi / d x_I` by the chain rule.
///
/// * `Quadratic(k)` -> `2 X_{k,I}`
/// * `Quartic(k)`   -> `(4 / n_k) sum_{J in shell k of I} X_{k,J}^3`
/// * `Mixed(k, m)`  -> `(2 / n_k) sum_{J in shell k} X_k X_m^2 + (2 / n_m) sum_{J in shell m} X_m X_k^2`
pub fn site_derivative(grid: &SpinGrid, f: &BasisFunction, site: Site) -> f64 {
    let read = |i, j| grid.spin_at_coord(i, j);
    site_derivative_at(&read, f, site.i as i64, site.j as i64)
}

#[inline]
pub(crate) fn site_derivative_at<F: Fn(i64, i64) -> i8>(read: &F, f: &BasisFunction, i: i64, j: i64) -> f64 {
    match *f {
        BasisFunction::Quadratic(k) => 2.0 * collective_with(read, k, i, j),
        BasisFunction::Quartic(k) => {
            let s: f64 = k
                .offsets()
                .iter()
                .map(|&(di, dj)| collective_with(read, k, i + di as i64, j + dj as i64).powi(3))
                .sum();
            4.0 * s / k.n() as f64
        }
        BasisFunction::Mixed(k, m) => {
            let part = |a: ShellIndex, b: ShellIndex| -> f64 {
                let s: f64 = a
                    .offsets()
                    .iter()
                    .map(|&(di, dj)| {
                        let (pi, pj) = (i + di as i64, j + dj as i64);
                        let xb = collective_with(read, b, pi, pj);
                        collective_with(read, a, pi, pj) * xb * xb
                    })
                    .sum();
                2.0 * s / a.n() as f64
            };
            part(k, m) + part(m, k)
        }
    }
}

/// Positions `J` whose term in `f` can depend on the spin at `(i, j)`.
fn affected_centers(grid: &SpinGrid, f: &BasisFunction, i: i64, j: i64, out: &mut Vec<(i64, i64)>) {
    out.clear();
    let l = grid.size() as i64;
    let canon = |a: i64, b: i64| match grid.boundary() {
        Boundary::Periodic => (a.rem_euclid(l), b.rem_euclid(l)),
        Boundary::FixedPlusOne => (a, b),
    };
    out.push(canon(i, j));
    for k in f.shells() {
        for &(di, dj) in k.offsets() {
            let p = canon(i + di as i64, j + dj as i64);
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
}

/// `K(x') - K(x)` where `x'` is `x` with the spin at `site` reversed.
///
/// Only the terms that contain the site are re-evaluated; the result equals
/// the difference of full evaluations exactly up to rounding.
pub fn local_delta(grid: &SpinGrid, alpha: &CoefficientVector, site: Site) -> Result<f64> {
    if !grid.is_flippable(site) {
        return Err(Error::config(format!("site ({}, {}) is frozen by the boundary", site.i, site.j)));
    }
    let (si, sj) = (site.i as i64, site.j as i64);
    let old = |i, j| grid.spin_at_coord(i, j);
    let flipped_value = -grid.get(site);
    let l = grid.size() as i64;
    let periodic = grid.boundary() == Boundary::Periodic;
    let new = |i: i64, j: i64| {
        let hit = if periodic { i.rem_euclid(l) == si && j.rem_euclid(l) == sj } else { i == si && j == sj };
        if hit {
            flipped_value
        } else {
            grid.spin_at_coord(i, j)
        }
    };
    let mut centers = Vec::with_capacity(32);
    let mut delta = 0.0;
    for (f, a) in alpha.terms() {
        affected_centers(grid, &f, si, sj, &mut centers);
        let d: f64 = centers.iter().map(|&(i, j)| term_with(&new, &f, i, j) - term_with(&old, &f, i, j)).sum();
        delta += a * d;
    }
    Ok(delta)
}
