//! Single-spin Metropolis sampling of `exp(+K)` and the decimation cascade.
//!
//! Each chain owns a ChaCha8 stream derived from `(seed, chain index)` and
//! sweeps sites in raster order, so a run is reproducible for any thread count.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bare_hamiltonian, collective, local_delta, BasisFunction, BasisSet, CoefficientVector, ShellIndex};
use crate::error::{Error, Result};
use crate::lattice::{decimate_relabel, parity, Boundary, Parity, Site, SpinGrid};
use crate::projection::{GramSystem, Ridge};
use crate::stats::{estimate_chains, Estimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub seed: u64,
    pub burn_in_sweeps: usize,
    pub measure_sweeps: usize,
    /// Sweeps between recorded configurations.
    pub thinning: usize,
    pub n_chains: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { seed: 0, burn_in_sweeps: 1000, measure_sweeps: 10_000, thinning: 1, n_chains: 1 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::config("thinning must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(Error::config("n_chains must be at least 1"));
        }
        if self.measurements_per_chain() < 2 {
            return Err(Error::config(format!(
                "measure_sweeps / thinning = {} / {} leaves fewer than 2 samples per chain",
                self.measure_sweeps, self.thinning
            )));
        }
        Ok(())
    }

    pub fn measurements_per_chain(&self) -> usize {
        self.measure_sweeps / self.thinning.max(1)
    }
}

/// Generator for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Metropolis acceptance `min(1, exp(delta))` for a proposal changing `K` by `delta`.
#[inline]
pub fn acceptance_probability(delta: f64) -> f64 {
    if delta >= 0.0 {
        1.0
    } else {
        delta.exp()
    }
}

enum Kernel {
    /// Only `quad(2)` (plus the constant `quad(1)`): `dK = -alpha x_I S_I` with `S_I` the neighbour sum.
    NearestNeighbour { coupling: f64, accept: [f64; 5], neighbours: Option<Vec<[u32; 4]>> },
    /// Quadratic terms through `dK = -4 x_I sum_k alpha_k X_{k,I}`, everything else re-evaluated locally.
    General { linear: Vec<(ShellIndex, f64)>, rest: Option<CoefficientVector> },
}

/// A self-wrapping shell (offset congruent to zero) makes `quad(k)` nonlinear in a single spin.
fn shells_wrap(grid: &SpinGrid) -> bool {
    grid.boundary() == Boundary::Periodic && grid.size() <= crate::basis::MAX_REACH as usize
}

impl Kernel {
    fn build(grid: &SpinGrid, alpha: &CoefficientVector) -> Result<Kernel> {
        if alpha.values().iter().any(|a| !a.is_finite()) {
            return Err(Error::numerical("non-finite coupling"));
        }
        let nn = ShellIndex::new(2)?;
        let constant = BasisFunction::Quadratic(ShellIndex::new(1)?);
        let terms: Vec<(BasisFunction, f64)> = alpha.terms().filter(|(f, _)| *f != constant).collect();
        if shells_wrap(grid) {
            let rest = CoefficientVector::new(alpha.basis().clone(), alpha.values().to_vec())?;
            return Ok(Kernel::General { linear: Vec::new(), rest: Some(rest) });
        }
        if terms.iter().all(|(f, _)| *f == BasisFunction::Quadratic(nn)) {
            let a = terms.first().map_or(0.0, |t| t.1);
            let mut accept = [0.0; 5];
            for (slot, p) in accept.iter_mut().enumerate() {
                let xs = 2.0 * slot as f64 - 4.0;
                *p = acceptance_probability(-a * xs);
            }
            let neighbours = (grid.boundary() == Boundary::Periodic).then(|| {
                let l = grid.size();
                (0..grid.n_sites())
                    .map(|k| {
                        let (i, j) = (k / l, k % l);
                        [
                            (((i + l - 1) % l) * l + j) as u32,
                            (((i + 1) % l) * l + j) as u32,
                            (i * l + (j + l - 1) % l) as u32,
                            (i * l + (j + 1) % l) as u32,
                        ]
                    })
                    .collect()
            });
            return Ok(Kernel::NearestNeighbour { coupling: a, accept, neighbours });
        }
        let mut linear = Vec::new();
        let mut rest_values = vec![0.0; alpha.basis().len()];
        for (f, a) in &terms {
            match *f {
                BasisFunction::Quadratic(k) => linear.push((k, *a)),
                _ => rest_values[alpha.basis().position(f).expect("term from this basis")] = *a,
            }
        }
        let rest = rest_values
            .iter()
            .any(|&a| a != 0.0)
            .then(|| CoefficientVector::new(alpha.basis().clone(), rest_values))
            .transpose()?;
        Ok(Kernel::General { linear, rest })
    }
}

/// One Metropolis chain.
pub struct Metropolis {
    grid: SpinGrid,
    sites: Vec<Site>,
    kernel: Kernel,
    rng: ChaCha8Rng,
    proposed: u64,
    accepted: u64,
}

impl Metropolis {
    pub fn new(initial: SpinGrid, alpha: &CoefficientVector, rng: ChaCha8Rng) -> Result<Self> {
        let kernel = Kernel::build(&initial, alpha)?;
        let sites = initial.flippable_sites().collect();
        Ok(Metropolis { grid: initial, sites, kernel, rng, proposed: 0, accepted: 0 })
    }

    pub fn grid(&self) -> &SpinGrid {
        &self.grid
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.proposed.max(1) as f64
    }

    /// `K(x with site flipped) - K(x)` as computed by this chain's kernel.
    pub fn delta(&self, site: Site) -> Result<f64> {
        match &self.kernel {
            Kernel::NearestNeighbour { coupling, .. } => {
                let (i, j) = (site.i as i64, site.j as i64);
                let s: i32 = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                    .iter()
                    .map(|&(a, b)| self.grid.spin_at_coord(a, b) as i32)
                    .sum();
                Ok(-coupling * (self.grid.get(site) as i32 * s) as f64)
            }
            Kernel::General { linear, rest } => general_delta(&self.grid, linear, rest.as_ref(), site),
        }
    }

    /// One proposal per flippable site, raster order.
    pub fn sweep(&mut self) -> Result<()> {
        let Metropolis { grid, sites, kernel, rng, proposed, accepted } = self;
        let n = sites.len();
        match kernel {
            Kernel::NearestNeighbour { accept, neighbours, .. } => {
                let l = grid.size();
                for idx in 0..n {
                    let site = sites[idx];
                    let k = site.i * l + site.j;
                    let x = grid.spins()[k] as i32;
                    let s: i32 = match neighbours {
                        Some(nb) => nb[k].iter().map(|&m| grid.spins()[m as usize] as i32).sum(),
                        None => {
                            let (i, j) = (site.i as i64, site.j as i64);
                            [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                                .iter()
                                .map(|&(a, b)| grid.spin_at_coord(a, b) as i32)
                                .sum()
                        }
                    };
                    let p = accept[((x * s + 4) / 2) as usize];
                    if p >= 1.0 || rng.random::<f64>() < p {
                        grid.flip_unchecked(site);
                        *accepted += 1;
                    }
                }
            }
            Kernel::General { linear, rest } => {
                for idx in 0..n {
                    let site = sites[idx];
                    let delta = general_delta(grid, linear, rest.as_ref(), site)?;
                    if !delta.is_finite() {
                        return Err(Error::numerical(format!("non-finite energy change at ({}, {})", site.i, site.j)));
                    }
                    if delta >= 0.0 || rng.random::<f64>() < delta.exp() {
                        grid.flip_unchecked(site);
                        *accepted += 1;
                    }
                }
            }
        }
        *proposed += n as u64;
        Ok(())
    }
}

fn general_delta(
    grid: &SpinGrid,
    linear: &[(ShellIndex, f64)],
    rest: Option<&CoefficientVector>,
    site: Site,
) -> Result<f64> {
    let field: f64 = linear.iter().map(|&(k, a)| a * collective(grid, k, site)).sum();
    let mut delta = -4.0 * grid.get(site) as f64 * field;
    if let Some(rest) = rest {
        delta += local_delta(grid, rest, site)?;
    }
    Ok(delta)
}

/// Receives every recorded configuration of one chain.
///
/// `levels[0]` is the sampled grid; Swendsen runs append its successive
/// decimations.
pub trait Visitor: Send {
    fn visit(&mut self, levels: &[SpinGrid]) -> Result<()>;
}

impl<F: FnMut(&[SpinGrid]) -> Result<()> + Send> Visitor for F {
    fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
        self(levels)
    }
}

fn drive_chain<V: Visitor>(
    chain: &mut Metropolis,
    cfg: &ChainConfig,
    n_levels: usize,
    visitor: &mut V,
) -> Result<()> {
    for _ in 0..cfg.burn_in_sweeps {
        chain.sweep()?;
    }
    let mut levels: Vec<SpinGrid> = Vec::with_capacity(n_levels);
    for _ in 0..cfg.measurements_per_chain() {
        for _ in 0..cfg.thinning {
            chain.sweep()?;
        }
        levels.clear();
        levels.push(chain.grid().clone());
        for _ in 1..n_levels {
            let next = decimate_relabel(levels.last().expect("nonempty"))?;
            levels.push(next);
        }
        visitor.visit(&levels)?;
    }
    Ok(())
}

/// Run `cfg.n_chains` independent chains of `exp(+K)` in parallel, each
/// started from `initial`, handing every record to a per-chain visitor.
///
/// Visitors come back in chain order.
pub fn run_chains<V, F>(initial: &SpinGrid, alpha: &CoefficientVector, cfg: &ChainConfig, make: F) -> Result<Vec<V>>
where
    V: Visitor,
    F: Fn(usize) -> Result<V> + Sync,
{
    run_cascade(initial, alpha, 1, cfg, make)
}

fn run_cascade<V, F>(
    initial: &SpinGrid,
    alpha: &CoefficientVector,
    n_levels: usize,
    cfg: &ChainConfig,
    make: F,
) -> Result<Vec<V>>
where
    V: Visitor,
    F: Fn(usize) -> Result<V> + Sync,
{
    cfg.validate()?;
    (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut visitor = make(c)?;
            let mut chain = Metropolis::new(initial.clone(), alpha, chain_rng(cfg.seed, c))?;
            drive_chain(&mut chain, cfg, n_levels, &mut visitor)?;
            Ok(visitor)
        })
        .collect()
}

/// A scalar function of a configuration.
pub type Observable<'a> = &'a (dyn Fn(&SpinGrid) -> f64 + Sync);

pub struct MetropolisRun {
    /// Recorded configurations, one vector per chain.
    pub samples: Vec<Vec<SpinGrid>>,
    /// One pooled estimate per observable.
    pub estimates: Vec<Estimate>,
}

/// Stored-sample Metropolis run for small systems.
pub fn metropolis_run(
    initial: &SpinGrid,
    alpha: &CoefficientVector,
    cfg: &ChainConfig,
    observables: &[Observable<'_>],
) -> Result<MetropolisRun> {
    struct Store {
        grids: Vec<SpinGrid>,
    }
    impl Visitor for Store {
        fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
            self.grids.push(levels[0].clone());
            Ok(())
        }
    }
    let stores = run_chains(initial, alpha, cfg, |_| Ok(Store { grids: Vec::new() }))?;
    let samples: Vec<Vec<SpinGrid>> = stores.into_iter().map(|s| s.grids).collect();
    let estimates = observables
        .iter()
        .map(|obs| {
            let series: Vec<Vec<f64>> = samples.iter().map(|c| c.iter().map(|g| obs(g)).collect()).collect();
            estimate_chains(&series)
        })
        .collect::<Result<_>>()?;
    Ok(MetropolisRun { samples, estimates })
}

/// Check that `size` survives `n_levels - 1` decimations with at least `min_final` sites per side.
pub fn check_cascade(size: usize, n_levels: usize, min_final: usize) -> Result<usize> {
    if n_levels == 0 {
        return Err(Error::config("need at least one level"));
    }
    let factor = 1usize << (n_levels - 1);
    if size % factor != 0 || size / factor < min_final {
        return Err(Error::config(format!(
            "lattice size {size} does not survive {} decimations (needs a multiple of {factor} with at least {min_final} sites per side left)",
            n_levels - 1
        )));
    }
    Ok(size / factor)
}

/// Nearest-neighbour Ising chains at `temperature`, decimated `n_levels - 1`
/// times at every record. Chains start fully ordered.
pub fn swendsen_run<V, F>(temperature: f64, size: usize, n_levels: usize, cfg: &ChainConfig, make: F) -> Result<Vec<V>>
where
    V: Visitor,
    F: Fn(usize) -> Result<V> + Sync,
{
    check_cascade(size, n_levels, 2)?;
    let alpha = bare_hamiltonian(temperature, &BasisSet::full())?;
    let initial = SpinGrid::new(size, Boundary::Periodic)?;
    run_cascade(&initial, &alpha, n_levels, cfg, make)
}

/// Recorded configurations of one cascade level, concatenated over chains.
#[derive(Clone, Debug)]
pub struct LevelStream {
    /// 1 for the sampled lattice.
    pub level: usize,
    pub size: usize,
    pub samples: Vec<SpinGrid>,
    pub chain_lengths: Vec<usize>,
}

impl LevelStream {
    /// Samples of chain `c`.
    pub fn chain(&self, c: usize) -> &[SpinGrid] {
        let start: usize = self.chain_lengths[..c].iter().sum();
        &self.samples[start..start + self.chain_lengths[c]]
    }
}

/// Stored-sample Swendsen cascade for small systems.
pub fn swendsen_ensemble(temperature: f64, size: usize, n_levels: usize, cfg: &ChainConfig) -> Result<Vec<LevelStream>> {
    struct Store(Vec<Vec<SpinGrid>>);
    impl Visitor for Store {
        fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
            for (store, grid) in self.0.iter_mut().zip(levels) {
                store.push(grid.clone());
            }
            Ok(())
        }
    }
    let chains = swendsen_run(temperature, size, n_levels, cfg, |_| Ok(Store(vec![Vec::new(); n_levels])))?;
    Ok((0..n_levels)
        .map(|n| LevelStream {
            level: n + 1,
            size: size >> n,
            chain_lengths: chains.iter().map(|c| c.0[n].len()).collect(),
            samples: chains.iter().flat_map(|c| c.0[n].iter().cloned()).collect(),
        })
        .collect())
}

/// A real function of a configuration and a center site.
pub type SiteFn<'a> = &'a (dyn Fn(&SpinGrid, Site) -> f64 + Sync);

/// Gram entries `<psi_t psi_s>` and `<f psi_t>` averaged over configurations
/// and over every center of parity `centers`, with binned errors per entry.
///
/// This is the direct route; the flow itself uses the faster
/// [`crate::projection::MomentEvaluator`], and the two are checked against each other.
pub fn estimate_inner_products(
    stream: &LevelStream,
    psi: &[SiteFn<'_>],
    f: SiteFn<'_>,
    centers: Parity,
) -> Result<GramSystem> {
    if stream.samples.len() < 2 {
        return Err(Error::InsufficientSamples(format!("inner products need at least 2 samples, got {}", stream.samples.len())));
    }
    let n = psi.len();
    let width = n * n + n;
    // series[c][entry][sample]
    let per_chain: Vec<Vec<Vec<f64>>> = (0..stream.chain_lengths.len())
        .into_par_iter()
        .map(|c| {
            let grids = stream.chain(c);
            let mut series = vec![Vec::with_capacity(grids.len()); width];
            let mut vals = vec![0.0; n];
            for grid in grids {
                let mut acc = vec![0.0; width];
                let mut count = 0usize;
                for k in 0..grid.n_sites() {
                    let site = grid.site(k);
                    if parity(site) != centers {
                        continue;
                    }
                    count += 1;
                    for (v, p) in vals.iter_mut().zip(psi) {
                        *v = p(grid, site);
                    }
                    let fv = f(grid, site);
                    for t in 0..n {
                        for u in 0..n {
                            acc[t * n + u] += vals[t] * vals[u];
                        }
                        acc[n * n + t] += fv * vals[t];
                    }
                }
                for (s, a) in series.iter_mut().zip(&acc) {
                    s.push(a / count.max(1) as f64);
                }
            }
            series
        })
        .collect();
    let entry = |e: usize| -> Result<Estimate> {
        let chains: Vec<Vec<f64>> = per_chain.iter().map(|c| c[e].clone()).collect();
        estimate_chains(&chains)
    };
    let phi = (0..n).map(|t| (0..n).map(|u| entry(t * n + u)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    let r = (0..n).map(|t| entry(n * n + t)).collect::<Result<Vec<_>>>()?;
    Ok(GramSystem { phi, r, ridge: Ridge::default() })
}

/// One line of a configuration dump.
#[derive(Serialize, Deserialize)]
struct StreamRecord {
    level: usize,
    chain: usize,
    index: usize,
    seed: u64,
    size: usize,
    spins: String,
}

fn encode(grid: &SpinGrid) -> String {
    grid.spins().iter().map(|&s| if s > 0 { '+' } else { '-' }).collect()
}

/// Write level streams as JSON lines, one configuration per line.
pub fn write_config_stream<W: Write>(out: &mut W, streams: &[LevelStream], seed: u64) -> Result<()> {
    for stream in streams {
        for c in 0..stream.chain_lengths.len() {
            for (index, grid) in stream.chain(c).iter().enumerate() {
                let rec = StreamRecord { level: stream.level, chain: c, index, seed, size: grid.size(), spins: encode(grid) };
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Read back a dump written by [`write_config_stream`].
pub fn read_config_stream<R: BufRead>(input: R) -> Result<Vec<LevelStream>> {
    let mut streams: Vec<LevelStream> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord = serde_json::from_str(&line)?;
        let spins = rec
            .spins
            .chars()
            .map(|c| match c {
                '+' => Ok(1),
                '-' => Ok(-1),
                other => Err(Error::config(format!("bad spin character {other:?}"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        let grid = SpinGrid::from_spins(rec.size, Boundary::Periodic, spins)?;
        let pos = match streams.iter().position(|s| s.level == rec.level) {
            Some(p) => p,
            None => {
                streams.push(LevelStream { level: rec.level, size: rec.size, samples: Vec::new(), chain_lengths: Vec::new() });
                streams.len() - 1
            }
        };
        let s = &mut streams[pos];
        if s.chain_lengths.len() <= rec.chain {
            s.chain_lengths.resize(rec.chain + 1, 0);
        }
        s.chain_lengths[rec.chain] += 1;
        s.samples.push(grid);
    }
    streams.sort_by_key(|s| s.level);
    Ok(streams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{site_derivative, BasisSet};
    use crate::projection::{build_target_basis, MomentEvaluator};

    fn mixed_alpha() -> CoefficientVector {
        let basis = BasisSet::full();
        let values = vec![0.1, 0.45, 0.2, 0.05, 0.07, -0.02, -0.08, 0.04, -0.01, -0.1];
        CoefficientVector::new(basis, values).unwrap()
    }

    fn short(seed: u64, sweeps: usize, chains: usize) -> ChainConfig {
        ChainConfig { seed, burn_in_sweeps: 20, measure_sweeps: sweeps, thinning: 1, n_chains: chains }
    }

    #[test]
    fn acceptance_is_min_one_exp() {
        assert_eq!(acceptance_probability(0.0), 1.0);
        assert_eq!(acceptance_probability(3.0), 1.0);
        assert!((acceptance_probability(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn detailed_balance_per_site() {
        // pi(x) P(x -> x') = pi(x') P(x' -> x) with pi from full energies
        let mut rng = chain_rng(9, 0);
        for (alpha, size) in [(mixed_alpha(), 8), (mixed_alpha(), 4), (bare_hamiltonian(2.27, &BasisSet::full()).unwrap(), 8)] {
            for boundary in [Boundary::Periodic, Boundary::FixedPlusOne] {
                let grid = SpinGrid::random(size, boundary, &mut rng).unwrap();
                let chain = Metropolis::new(grid.clone(), &alpha, chain_rng(1, 0)).unwrap();
                for site in grid.flippable_sites() {
                    let d = chain.delta(site).unwrap();
                    let dk = alpha.energy(&grid.flipped(site).unwrap()) - alpha.energy(&grid);
                    assert!((d - dk).abs() < 1e-9, "{site:?}: {d} vs {dk}");
                    let forward = acceptance_probability(d);
                    let backward = acceptance_probability(-d);
                    assert!((forward - backward * dk.exp()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let initial = SpinGrid::new(8, Boundary::Periodic).unwrap();
        let run = |seed| metropolis_run(&initial, &mixed_alpha(), &short(seed, 50, 3), &[]).unwrap().samples;
        let a = run(4);
        let b = run(4);
        let encode_all = |s: &Vec<Vec<SpinGrid>>| s.iter().flatten().map(encode).collect::<Vec<_>>().join("\n");
        assert_eq!(encode_all(&a), encode_all(&b));
        assert_ne!(encode_all(&a), encode_all(&run(5)));
        // chains are independent of the thread pool
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| run(4));
        assert_eq!(encode_all(&a), encode_all(&c));
    }

    #[test]
    fn zero_coupling_accepts_everything() {
        let basis = BasisSet::full();
        let initial = SpinGrid::new(6, Boundary::Periodic).unwrap();
        let mut chain = Metropolis::new(initial, &CoefficientVector::zeros(basis), chain_rng(0, 0)).unwrap();
        for _ in 0..10 {
            chain.sweep().unwrap();
        }
        assert_eq!(chain.acceptance_rate(), 1.0);
    }

    #[test]
    fn cold_chain_stays_ordered() {
        let alpha = bare_hamiltonian(1.0, &BasisSet::full()).unwrap();
        let initial = SpinGrid::new(16, Boundary::Periodic).unwrap();
        let run = metropolis_run(&initial, &alpha, &short(2, 500, 2), &[&|g: &SpinGrid| g.magnetization().abs()]).unwrap();
        assert!(run.estimates[0].mean > 0.99, "{:?}", run.estimates[0]);
    }

    #[test]
    fn non_finite_energy_change_aborts() {
        let basis = BasisSet::full();
        let mut v = vec![0.0; basis.len()];
        v[2] = 1e308;
        let alpha = CoefficientVector::new(basis, v).unwrap();
        let initial = SpinGrid::new(8, Boundary::Periodic).unwrap();
        let err = run_chains(&initial, &alpha, &short(0, 5, 1), |_| Ok(|_: &[SpinGrid]| Ok(()))).err().unwrap();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn cascade_sizes_and_alignment() {
        let streams = swendsen_ensemble(2.5, 16, 4, &short(3, 40, 2)).unwrap();
        assert_eq!(streams.iter().map(|s| s.size).collect::<Vec<_>>(), vec![16, 8, 4, 2]);
        assert_eq!(streams.iter().map(|s| s.level).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for pair in streams.windows(2) {
            assert_eq!(pair[0].chain_lengths, pair[1].chain_lengths);
            for (fine, coarse) in pair[0].samples.iter().zip(&pair[1].samples) {
                assert_eq!(&decimate_relabel(fine).unwrap(), coarse);
            }
        }
        assert_eq!(streams[0].chain(1).len(), 40);
    }

    #[test]
    fn single_level_cascade_is_plain_metropolis() {
        let streams = swendsen_ensemble(2.27, 8, 1, &short(6, 30, 1)).unwrap();
        assert_eq!(streams.len(), 1);
        let alpha = bare_hamiltonian(2.27, &BasisSet::full()).unwrap();
        let plain = metropolis_run(&SpinGrid::new(8, Boundary::Periodic).unwrap(), &alpha, &short(6, 30, 1), &[]).unwrap();
        assert_eq!(streams[0].samples, plain.samples[0]);
    }

    #[test]
    fn indivisible_size_fails_before_sampling() {
        assert!(swendsen_ensemble(2.27, 12, 4, &short(0, 10, 1)).is_err());
        assert!(swendsen_ensemble(2.27, 7, 2, &short(0, 10, 1)).is_err());
        assert_eq!(check_cascade(64, 5, 4).unwrap(), 4);
        assert!(check_cascade(32, 5, 4).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let streams = swendsen_ensemble(2.3, 8, 2, &short(8, 12, 2)).unwrap();
        let mut buf = Vec::new();
        write_config_stream(&mut buf, &streams, 8).unwrap();
        let back = read_config_stream(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in streams.iter().zip(&back) {
            assert_eq!((a.level, a.size, &a.chain_lengths, &a.samples), (b.level, b.size, &b.chain_lengths, &b.samples));
        }
        assert!(read_config_stream("{\"level\":1,\"chain\":0,\"index\":0,\"seed\":0,\"size\":1,\"spins\":\"x\"}".as_bytes()).is_err());
    }

    #[test]
    fn direct_inner_products_match_moment_evaluator() {
        let alpha = mixed_alpha();
        let streams = swendsen_ensemble(2.27, 8, 1, &short(12, 60, 2)).unwrap();
        let target = build_target_basis(alpha.basis()).unwrap();
        let ext = target.extended().to_vec();
        let psi_fns: Vec<Box<dyn Fn(&SpinGrid, Site) -> f64 + Sync>> =
            ext.iter().map(|&t| Box::new(move |g: &SpinGrid, s: Site| site_derivative(g, &t, s)) as Box<_>).collect();
        let psi: Vec<SiteFn<'_>> = psi_fns.iter().map(|b| b.as_ref() as SiteFn<'_>).collect();
        let a2 = alpha.clone();
        let f = move |g: &SpinGrid, s: Site| a2.terms().map(|(fun, a)| a * site_derivative(g, &fun, s)).sum::<f64>();
        let direct = estimate_inner_products(&streams[0], &psi, &f, Parity::Even).unwrap();

        let mut eval = MomentEvaluator::new(&ext, alpha.basis().functions());
        let layout = eval.layout();
        let mut sum = vec![0.0; layout.len()];
        let mut buf = vec![0.0; layout.len()];
        for g in &streams[0].samples {
            eval.evaluate(g, &mut buf).unwrap();
            sum.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / streams[0].samples.len() as f64).collect();
        let phi = layout.gram(&mean);
        let r = layout.rhs(&mean, alpha.values());
        for t in 0..ext.len() {
            for u in 0..ext.len() {
                assert!((direct.phi[t][u].mean - phi[(t, u)]).abs() < 1e-10);
            }
            assert!((direct.r[t].mean - r[t]).abs() < 1e-10);
            assert!(direct.r[t].stderr.is_finite());
        }
        let one = LevelStream { level: 1, size: 8, samples: streams[0].samples[..1].to_vec(), chain_lengths: vec![1] };
        assert!(estimate_inner_products(&one, &psi, &f, Parity::Even).is_err());
    }
}
