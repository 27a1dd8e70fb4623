//! One renormalization step by projection of site derivatives.
//!
//! At every even site `I` the derivative `f = dK/dx_I` is projected onto the
//! derivatives `psi_t = d phi_t^ext / dx_I` of even-closed functions, which
//! depend on the retained spins only. The coefficients solve the Gram system
//! `Phi c = r`; relabeling turns each `phi_t^ext` into a basis function of the
//! coarse lattice, so `c_t` becomes the new coefficient of that function.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFunction, BasisSet, CoefficientVector, ShellIndex};
use crate::error::{Error, Result};
use crate::lattice::{Boundary, SpinGrid};
use crate::stats::Estimate;

/// Even-closed functions paired with the basis function they relabel onto.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBasis {
    destination: BasisSet,
    extended: Vec<BasisFunction>,
}

impl TargetBasis {
    /// The basis of the coarse lattice, in target order.
    pub fn destination(&self) -> &BasisSet {
        &self.destination
    }

    /// Functions of the retained spins on the fine lattice, in target order.
    pub fn extended(&self) -> &[BasisFunction] {
        &self.extended
    }

    pub fn len(&self) -> usize {
        self.extended.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extended.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (BasisFunction, BasisFunction)> + '_ {
        self.extended.iter().copied().zip(self.destination.functions().iter().copied())
    }
}

/// Preimage of every function in `basis` under the relabel map.
pub fn build_target_basis(basis: &BasisSet) -> Result<TargetBasis> {
    let extended = basis
        .functions()
        .iter()
        .map(|f| f.preimage())
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetBasis { destination: basis.clone(), extended })
}

/// Ridge `lambda = max(min_abs, rel * trace / dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub min_abs: f64,
    pub rel: f64,
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge { min_abs: 1e-10, rel: 1e-8 }
    }
}

impl Ridge {
    pub fn lambda(&self, phi: &DMatrix<f64>) -> f64 {
        let n = phi.nrows().max(1) as f64;
        self.min_abs.max(self.rel * phi.trace() / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramSystem {
    pub phi: Vec<Vec<Estimate>>,
    pub r: Vec<Estimate>,
    pub ridge: Ridge,
}

impl GramSystem {
    /// System with exactly known entries.
    pub fn exact(phi: &DMatrix<f64>, r: &DVector<f64>) -> Self {
        let n = phi.nrows();
        GramSystem {
            phi: (0..n).map(|i| (0..n).map(|j| Estimate::exact(phi[(i, j)])).collect()).collect(),
            r: r.iter().map(|&v| Estimate::exact(v)).collect(),
            ridge: Ridge::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.phi[i][j].mean)
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.r.iter().map(|e| e.mean))
    }

    /// `||Phi c - r||`.
    pub fn residual(&self, c: &[f64]) -> f64 {
        (self.matrix() * DVector::from_column_slice(c) - self.rhs()).norm()
    }

    /// CSV dump: one row per entry with `kind,row,col,mean,stderr`.
    pub fn write_csv<W: Write>(&self, out: &mut W, labels: &[String]) -> Result<()> {
        writeln!(out, "kind,row,col,mean,stderr")?;
        let label = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        for (i, row) in self.phi.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                writeln!(out, "phi,{},{},{:.17e},{:.17e}", label(i), label(j), e.mean, e.stderr)?;
            }
        }
        for (i, e) in self.r.iter().enumerate() {
            writeln!(out, "r,{},,{:.17e},{:.17e}", label(i), e.mean, e.stderr)?;
        }
        Ok(())
    }
}

/// `c = (Phi + lambda I)^{-1} r` by Cholesky.
pub fn solve_gram(system: &GramSystem) -> Result<Vec<f64>> {
    solve_regularized(&system.matrix(), &system.rhs(), system.ridge)
}

pub(crate) fn solve_regularized(phi: &DMatrix<f64>, r: &DVector<f64>, ridge: Ridge) -> Result<Vec<f64>> {
    if phi.iter().chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("Gram system has non-finite entries"));
    }
    let lambda = ridge.lambda(phi);
    let n = phi.nrows();
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (phi[(i, j)] + phi[(j, i)]));
    let regularized = &sym + DMatrix::identity(n, n) * lambda;
    match regularized.clone().cholesky() {
        Some(ch) => Ok(ch.solve(r).iter().copied().collect()),
        None => {
            let eig = sym.symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
            Err(Error::numerical(format!(
                "Gram matrix not positive definite after ridge {lambda:.3e}: eigenvalues in [{lo:.3e}, {hi:.3e}]"
            )))
        }
    }
}

/// Index layout of the per-configuration moment vector.
///
/// The first block holds `psi_t psi_s` for `t <= s`; the second holds
/// `d phi_k / dx_I * psi_t` for each source function `k`. All entries are
/// averaged over even centers `I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomentLayout {
    pub n_targets: usize,
    pub n_sources: usize,
}

impl MomentLayout {
    pub fn len(&self) -> usize {
        self.n_pairs() + self.n_sources * self.n_targets
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_pairs(&self) -> usize {
        self.n_targets * (self.n_targets + 1) / 2
    }

    pub fn pair(&self, t: usize, s: usize) -> usize {
        let (a, b) = if t <= s { (t, s) } else { (s, t) };
        a * self.n_targets - a * (a + 1) / 2 + b
    }

    pub fn cross(&self, k: usize, t: usize) -> usize {
        self.n_pairs() + k * self.n_targets + t
    }

    pub fn gram(&self, m: &[f64]) -> DMatrix<f64> {
        let n = self.n_targets;
        DMatrix::from_fn(n, n, |t, s| m[self.pair(t, s)])
    }

    /// `r_t = sum_k alpha_k <d phi_k, psi_t>`.
    pub fn rhs(&self, m: &[f64], alpha: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n_targets, |t, _| {
            alpha.iter().enumerate().map(|(k, a)| a * m[self.cross(k, t)]).sum()
        })
    }
}

/// How to read one derivative off the precomputed fields.
#[derive(Clone, Debug)]
enum Plan {
    /// `2 X_k[I]`.
    Centre { field: usize },
    /// `sum over parts of scale * sum_{o in shell} field[I + o]`.
    Ring { parts: Vec<RingPart> },
}

#[derive(Clone, Copy, Debug)]
struct RingPart {
    shell: usize,
    n: usize,
    field: usize,
    scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Field {
    Collective(usize),
    Cube(usize),
    /// `X_a X_b^2`.
    Product(usize, usize),
}

/// Site-averaged Gram moments of one configuration, computed from shell fields.
#[derive(Clone, Debug)]
pub struct MomentEvaluator {
    layout: MomentLayout,
    shells: Vec<ShellIndex>,
    fields: Vec<Field>,
    targets: Vec<Plan>,
    sources: Vec<Plan>,
    geometries: Vec<Geometry>,
}

/// Neighbour tables and field storage for one lattice size.
#[derive(Clone, Debug)]
struct Geometry {
    size: usize,
    neighbours: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

impl MomentEvaluator {
    pub fn new(targets: &[BasisFunction], sources: &[BasisFunction]) -> Self {
        let mut shell_set = BTreeSet::new();
        for f in targets.iter().chain(sources) {
            shell_set.extend(f.shells());
        }
        let shells: Vec<ShellIndex> = shell_set.into_iter().collect();
        let slot = |k: ShellIndex| shells.iter().position(|&s| s == k).expect("collected above");
        let mut fields: Vec<Field> = shells.iter().map(|&k| Field::Collective(slot(k))).collect();
        let field_id = |f: Field, fields: &mut Vec<Field>| -> usize {
            match fields.iter().position(|g| *g == f) {
                Some(p) => p,
                None => {
                    fields.push(f);
                    fields.len() - 1
                }
            }
        };
        let plan = |f: &BasisFunction, fields: &mut Vec<Field>| match *f {
            BasisFunction::Quadratic(k) => Plan::Centre { field: slot(k) },
            BasisFunction::Quartic(k) => {
                let cube = field_id(Field::Cube(slot(k)), fields);
                Plan::Ring { parts: vec![RingPart { shell: slot(k), n: k.n(), field: cube, scale: 4.0 / k.n() as f64 }] }
            }
            BasisFunction::Mixed(k, m) => {
                let km = field_id(Field::Product(slot(k), slot(m)), fields);
                let mk = field_id(Field::Product(slot(m), slot(k)), fields);
                Plan::Ring {
                    parts: vec![
                        RingPart { shell: slot(k), n: k.n(), field: km, scale: 2.0 / k.n() as f64 },
                        RingPart { shell: slot(m), n: m.n(), field: mk, scale: 2.0 / m.n() as f64 },
                    ],
                }
            }
        };
        let target_plans = targets.iter().map(|f| plan(f, &mut fields)).collect();
        let source_plans = sources.iter().map(|f| plan(f, &mut fields)).collect();
        MomentEvaluator {
            layout: MomentLayout { n_targets: targets.len(), n_sources: sources.len() },
            shells,
            targets: target_plans,
            sources: source_plans,
            fields,
            geometries: Vec::new(),
        }
    }

    pub fn layout(&self) -> MomentLayout {
        self.layout
    }

    fn geometry(&mut self, size: usize) -> usize {
        if let Some(p) = self.geometries.iter().position(|g| g.size == size) {
            return p;
        }
        let l = size as i64;
        let neighbours = self
            .shells
            .iter()
            .map(|k| {
                let mut table = Vec::with_capacity(size * size * k.n());
                for i in 0..l {
                    for j in 0..l {
                        for &(di, dj) in k.offsets() {
                            let a = (i + di as i64).rem_euclid(l);
                            let b = (j + dj as i64).rem_euclid(l);
                            table.push((a * l + b) as u32);
                        }
                    }
                }
                table
            })
            .collect();
        let values = vec![vec![0.0; size * size]; self.fields.len()];
        self.geometries.push(Geometry { size, neighbours, values });
        self.geometries.len() - 1
    }

    /// Moments of `grid`, written to `out` (length `layout().len()`).
    pub fn evaluate(&mut self, grid: &SpinGrid, out: &mut [f64]) -> Result<()> {
        if grid.boundary() != Boundary::Periodic {
            return Err(Error::Unsupported("moment evaluation needs a periodic grid".into()));
        }
        if out.len() != self.layout.len() {
            return Err(Error::config("moment buffer has the wrong length"));
        }
        let l = grid.size();
        let gid = self.geometry(l);
        let Geometry { neighbours, values, .. } = &mut self.geometries[gid];
        let spins = grid.spins();
        for (fid, field) in self.fields.iter().enumerate() {
            let (head, tail) = values.split_at_mut(fid);
            let dst = &mut tail[0];
            match *field {
                Field::Collective(s) => {
                    let nk = self.shells[s].n();
                    let w = 1.0 / nk as f64;
                    for (d, ring) in dst.iter_mut().zip(neighbours[s].chunks_exact(nk)) {
                        let sum: i32 = ring.iter().map(|&m| spins[m as usize] as i32).sum();
                        *d = sum as f64 * w;
                    }
                }
                Field::Cube(s) => {
                    for (d, x) in dst.iter_mut().zip(&head[s]) {
                        *d = x * x * x;
                    }
                }
                Field::Product(a, b) => {
                    for ((d, xa), xb) in dst.iter_mut().zip(&head[a]).zip(&head[b]) {
                        *d = xa * xb * xb;
                    }
                }
            }
        }
        let nt = self.layout.n_targets;
        let n_pairs = self.layout.n_pairs();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut psi = vec![0.0; nt];
        let mut src = vec![0.0; self.layout.n_sources];
        let mut centres = 0usize;
        let read = |plan: &Plan, site: usize| -> f64 {
            match plan {
                Plan::Centre { field } => 2.0 * values[*field][site],
                Plan::Ring { parts } => parts
                    .iter()
                    .map(|p| {
                        let ring = &neighbours[p.shell][site * p.n..(site + 1) * p.n];
                        let field = &values[p.field];
                        p.scale * ring.iter().map(|&m| field[m as usize]).sum::<f64>()
                    })
                    .sum(),
            }
        };
        for i in 0..l {
            for j in ((i % 2)..l).step_by(2) {
                let site = i * l + j;
                for (p, plan) in psi.iter_mut().zip(&self.targets) {
                    *p = read(plan, site);
                }
                for (p, plan) in src.iter_mut().zip(&self.sources) {
                    *p = read(plan, site);
                }
                let (pairs, cross) = out.split_at_mut(n_pairs);
                let mut rest = pairs;
                for t in 0..nt {
                    let (row, tail) = rest.split_at_mut(nt - t);
                    let pt = psi[t];
                    for (o, ps) in row.iter_mut().zip(&psi[t..]) {
                        *o += pt * ps;
                    }
                    rest = tail;
                }
                for (row, &sk) in cross.chunks_exact_mut(nt).zip(&src) {
                    for (o, pt) in row.iter_mut().zip(&psi) {
                        *o += sk * pt;
                    }
                }
                centres += 1;
            }
        }
        let w = 1.0 / centres as f64;
        out.iter_mut().for_each(|v| *v *= w);
        Ok(())
    }
}

/// Solve the Gram system built from averaged moments and relabel.
///
/// `moments` must follow the layout of a [`MomentEvaluator`] whose targets are
/// `target.extended()` and whose sources are the functions of `alpha.basis()`.
pub fn renormalize_from_moments(
    alpha: &CoefficientVector,
    target: &TargetBasis,
    moments: &[f64],
    ridge: Ridge,
) -> Result<CoefficientVector> {
    let layout = MomentLayout { n_targets: target.len(), n_sources: alpha.basis().len() };
    if moments.len() != layout.len() {
        return Err(Error::config(format!("moment vector has {} entries, layout needs {}", moments.len(), layout.len())));
    }
    let c = solve_regularized(&layout.gram(moments), &layout.rhs(moments, alpha.values()), ridge)?;
    CoefficientVector::new(target.destination().clone(), c)
}

/// One renormalization step from a sampled ensemble of the current measure.
pub fn renormalize_step(alpha: &CoefficientVector, samples: &[SpinGrid]) -> Result<CoefficientVector> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples(format!("renormalize_step needs at least 2 samples, got {}", samples.len())));
    }
    let target = build_target_basis(alpha.basis())?;
    let mut eval = MomentEvaluator::new(target.extended(), alpha.basis().functions());
    let len = eval.layout().len();
    let mut sum = vec![0.0; len];
    let mut buf = vec![0.0; len];
    for grid in samples {
        eval.evaluate(grid, &mut buf)?;
        for (s, b) in sum.iter_mut().zip(&buf) {
            *s += b;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / samples.len() as f64).collect();
    renormalize_from_moments(alpha, &target, &mean, Ridge::default())
}
