//! Parameter flow from the bare coupling and the temperature scan built on it.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bare_hamiltonian, BasisFunction, BasisSet, CoefficientVector};
use crate::error::{Error, Result};
use crate::lattice::SpinGrid;
use crate::projection::{build_target_basis, renormalize_from_moments, MomentEvaluator, Ridge, TargetBasis};
use crate::sampler::{check_cascade, swendsen_run, ChainConfig, Visitor};
use crate::stats::{jackknife, VectorSeries};

/// Stored bins per chain before neighbouring bins merge.
const SERIES_CAPACITY: usize = 1024;
/// Jackknife blocks across all chains.
const JACKKNIFE_BLOCKS: usize = 32;

/// `M_2 = sum over quadratic k >= 2 of d_k^2 alpha_k`.
pub fn second_moment(alpha: &CoefficientVector) -> f64 {
    alpha
        .terms()
        .filter_map(|(f, a)| match f {
            BasisFunction::Quadratic(k) if k.get() >= 2 => Some(k.d2() as f64 * a),
            _ => None,
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub iteration: usize,
    pub alpha: Vec<f64>,
    pub stderr: Vec<f64>,
    pub m2: f64,
    pub m2_stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTable {
    pub temperature: f64,
    pub basis: BasisSet,
    pub rows: Vec<FlowRow>,
}

impl FlowTable {
    /// Coefficients of iteration `n` (1-based).
    pub fn coefficients(&self, n: usize) -> Result<CoefficientVector> {
        let row = self
            .rows
            .iter()
            .find(|r| r.iteration == n)
            .ok_or_else(|| Error::config(format!("flow has no iteration {n}")))?;
        CoefficientVector::new(self.basis.clone(), row.alpha.clone())
    }

    /// `iteration,T,alpha_1..alpha_l,M2,stderr_1..stderr_l,stderr_M2`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let l = self.basis.len();
        let mut header = vec!["iteration".to_string(), "T".to_string()];
        header.extend((1..=l).map(|k| format!("alpha_{k}")));
        header.push("M2".into());
        header.extend((1..=l).map(|k| format!("stderr_{k}")));
        header.push("stderr_M2".into());
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![row.iteration.to_string(), fmt_num(self.temperature)];
            cells.extend(row.alpha.iter().map(|&v| fmt_num(v)));
            cells.push(fmt_num(row.m2));
            cells.extend(row.stderr.iter().map(|&v| fmt_num(v)));
            cells.push(fmt_num(row.m2_stderr));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Parse a single table written by [`FlowTable::write_csv`].
    pub fn read_csv(text: &str, basis: &BasisSet) -> Result<FlowTable> {
        let mut tables = FlowTable::read_csv_all(text, basis)?;
        match tables.len() {
            1 => Ok(tables.remove(0)),
            0 => Err(Error::config("flow CSV has no rows")),
            n => Err(Error::config(format!("flow CSV holds {n} flows; expected one"))),
        }
    }

    /// Parse every flow in a CSV; a new flow starts at iteration 1 or when `T` changes.
    pub fn read_csv_all(text: &str, basis: &BasisSet) -> Result<Vec<FlowTable>> {
        let l = basis.len();
        let width = 2 * l + 4;
        let mut lines = text.lines().filter(|s| !s.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("empty flow CSV"))?;
        if header.split(',').count() != width {
            return Err(Error::config(format!("flow CSV header does not match a basis of {l} functions")));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::config(format!("bad number {s:?}: {e}")));
        let mut tables: Vec<FlowTable> = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::config(format!("flow CSV row has {} cells, expected {width}", cells.len())));
            }
            let iteration = cells[0].trim().parse::<usize>().map_err(|e| Error::config(format!("bad iteration: {e}")))?;
            let temperature = num(cells[1])?;
            let alpha = cells[2..2 + l].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let m2 = num(cells[2 + l])?;
            let stderr = cells[3 + l..3 + 2 * l].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let m2_stderr = num(cells[3 + 2 * l])?;
            let fresh = match tables.last() {
                Some(t) => iteration == 1 || t.temperature != temperature,
                None => true,
            };
            if fresh {
                tables.push(FlowTable { temperature, basis: basis.clone(), rows: Vec::new() });
            }
            tables.last_mut().expect("table pushed above").rows.push(FlowRow { iteration, alpha, stderr, m2, m2_stderr });
        }
        Ok(tables)
    }
}

/// Shortest round-trip decimal; byte-stable for identical values.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

/// Per-chain moment accumulator for every renormalization level.
struct LevelMoments {
    evaluator: MomentEvaluator,
    n_levels: usize,
    width: usize,
    buf: Vec<f64>,
    series: VectorSeries,
}

impl Visitor for LevelMoments {
    fn visit(&mut self, levels: &[SpinGrid]) -> Result<()> {
        for n in 0..self.n_levels {
            let slot = &mut self.buf[n * self.width..(n + 1) * self.width];
            self.evaluator.evaluate(&levels[n], slot)?;
        }
        self.series.push(&self.buf);
        Ok(())
    }
}

/// Flow from concatenated per-level moment means.
fn flow_from_moments(bare: &CoefficientVector, target: &TargetBasis, width: usize, means: &[f64]) -> Result<Vec<CoefficientVector>> {
    let mut alphas = vec![bare.clone()];
    for chunk in means.chunks_exact(width) {
        let next = renormalize_from_moments(alphas.last().expect("nonempty"), target, chunk, Ridge::default())?;
        alphas.push(next);
    }
    Ok(alphas)
}

/// Check that `L0` supports `n_iters` iterations: every level of the cascade, the last included, keeps at least 4 sites per side.
pub fn check_flow_size(size: usize, n_iters: usize) -> Result<()> {
    check_cascade(size, n_iters, 4).map(|_| ())
}

/// `n_iters` rows of coefficients starting from the bare coupling at `temperature`.
///
/// All levels come from one cascade of decimations of bare samples; error bars
/// are delete-one-block jackknife over the whole chain of solves.
pub fn run_flow(temperature: f64, basis: &BasisSet, n_iters: usize, size: usize, cfg: &ChainConfig) -> Result<FlowTable> {
    Ok(flow_with_trend(temperature, basis, n_iters, size, cfg)?.0)
}

/// The flow table and the jackknife error of [`trend_statistic`] (zero below 3 iterations).
fn flow_with_trend(
    temperature: f64,
    basis: &BasisSet,
    n_iters: usize,
    size: usize,
    cfg: &ChainConfig,
) -> Result<(FlowTable, f64)> {
    let bare = bare_hamiltonian(temperature, basis)?;
    check_flow_size(size, n_iters)?;
    cfg.validate()?;
    let target = build_target_basis(basis)?;
    let l = basis.len();
    let row = |iteration: usize, a: &CoefficientVector, stderr: Vec<f64>, m2_stderr: f64| FlowRow {
        iteration,
        alpha: a.values().to_vec(),
        stderr,
        m2: second_moment(a),
        m2_stderr,
    };
    let mut rows = vec![row(1, &bare, vec![0.0; l], 0.0)];
    if n_iters == 1 {
        return Ok((FlowTable { temperature, basis: basis.clone(), rows }, 0.0));
    }
    let steps = n_iters - 1;
    let template = MomentEvaluator::new(target.extended(), basis.functions());
    let width = template.layout().len();
    let chains = swendsen_run(temperature, size, n_iters, cfg, |_| {
        Ok(LevelMoments {
            evaluator: template.clone(),
            n_levels: steps,
            width,
            buf: vec![0.0; steps * width],
            series: VectorSeries::new(steps * width, SERIES_CAPACITY),
        })
    })?;
    let total: usize = chains.iter().map(|c| c.series.count()).sum();
    let mut means = vec![0.0; steps * width];
    for c in &chains {
        let w = c.series.count() as f64 / total as f64;
        for (m, v) in means.iter_mut().zip(c.series.mean()) {
            *m += w * v;
        }
    }
    let alphas = flow_from_moments(&bare, &target, width, &means)?;
    let per_chain = JACKKNIFE_BLOCKS.div_ceil(chains.len());
    let blocks: Vec<(Vec<f64>, usize)> = chains.iter().flat_map(|c| c.series.blocks(per_chain)).collect();
    let errors = jackknife(&blocks, |m| {
        let a = flow_from_moments(&bare, &target, width, m)?;
        let m2: Vec<f64> = a.iter().map(second_moment).collect();
        let mut out: Vec<f64> = a[1..].iter().flat_map(|v| v.values().iter().copied().chain(std::iter::once(second_moment(v)))).collect();
        out.push(trend_statistic(&m2).unwrap_or(0.0));
        Ok(out)
    })?;
    for (n, a) in alphas.iter().enumerate().skip(1) {
        let e = &errors[(n - 1) * (l + 1)..n * (l + 1)];
        rows.push(row(n + 1, a, e[..l].to_vec(), e[l]));
    }
    let trend_error = *errors.last().expect("trend entry");
    Ok((FlowTable { temperature, basis: basis.clone(), rows }, trend_error))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Growing,
    Decaying,
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub temperature: f64,
    pub m2: Vec<f64>,
    pub m2_stderr: Vec<f64>,
    pub trend: Trend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcScanResult {
    pub points: Vec<ScanPoint>,
    /// Last growing temperature and the first decaying one above it.
    pub bracket: Option<(f64, f64)>,
    pub warning: Option<String>,
}

impl TcScanResult {
    pub fn midpoint(&self) -> Option<f64> {
        self.bracket.map(|(a, b)| 0.5 * (a + b))
    }

    /// `T,trend,M2_1..M2_n,stderr_1..stderr_n`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.points.first().map_or(0, |p| p.m2.len());
        let mut header = vec!["T".to_string(), "trend".to_string()];
        header.extend((1..=n).map(|k| format!("M2_{k}")));
        header.extend((1..=n).map(|k| format!("stderr_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for p in &self.points {
            let mut cells = vec![fmt_num(p.temperature), format!("{:?}", p.trend)];
            cells.extend(p.m2.iter().map(|&v| fmt_num(v)));
            cells.extend(p.m2_stderr.iter().map(|&v| fmt_num(v)));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Change of `M_2` over the last iteration, `M_2^(N) - M_2^(N-1)`.
///
/// The first step from the bare coupling always raises `M_2` (the bare
/// Hamiltonian has only nearest-neighbour terms), so trends are read off
/// renormalized iterations only; `None` below 3 iterations.
pub fn trend_statistic(m2: &[f64]) -> Option<f64> {
    let n = m2.len();
    (n >= 3).then(|| m2[n - 1] - m2[n - 2])
}

/// Growing or decaying when [`trend_statistic`] exceeds twice its standard error.
pub fn classify(m2: &[f64], stat_stderr: f64) -> Trend {
    match trend_statistic(m2) {
        Some(d) if d > 2.0 * stat_stderr => Trend::Growing,
        Some(d) if d < -2.0 * stat_stderr => Trend::Decaying,
        _ => Trend::Flat,
    }
}

/// Run a flow at every temperature and bracket the critical point.
pub fn tc_scan(temperatures: &[f64], basis: &BasisSet, n_iters: usize, size: usize, cfg: &ChainConfig) -> Result<TcScanResult> {
    if temperatures.is_empty() {
        return Err(Error::config("a scan needs at least one temperature"));
    }
    if temperatures.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("scan temperatures must be strictly increasing"));
    }
    if n_iters < 3 {
        return Err(Error::config("a scan needs at least 3 iterations to see a trend"));
    }
    check_flow_size(size, n_iters)?;
    let points = temperatures
        .par_iter()
        .map(|&t| scan_point(t, basis, n_iters, size, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(bracket(points))
}

fn bracket(points: Vec<ScanPoint>) -> TcScanResult {
    let last_growing = points.iter().rposition(|p| p.trend == Trend::Growing);
    let bracket = last_growing.and_then(|i| {
        points[i + 1..].iter().find(|p| p.trend == Trend::Decaying).map(|p| (points[i].temperature, p.temperature))
    });
    let warning = match (bracket, last_growing) {
        (None, _) => Some("no growing-to-decaying change across the scanned temperatures".to_string()),
        (Some((_, hi)), Some(i)) if points[i + 1].temperature != hi => {
            let flat = points[i + 1..].iter().take_while(|p| p.temperature < hi).count();
            Some(format!("{flat} temperature(s) inside the bracket show no significant trend"))
        }
        _ => None,
    };
    TcScanResult { points, bracket, warning }
}

fn scan_point(temperature: f64, basis: &BasisSet, n_iters: usize, size: usize, cfg: &ChainConfig) -> Result<ScanPoint> {
    let (table, stat_stderr) = flow_with_trend(temperature, basis, n_iters, size, cfg)?;
    let m2: Vec<f64> = table.rows.iter().map(|r| r.m2).collect();
    let m2_stderr = table.rows.iter().map(|r| r.m2_stderr).collect();
    let trend = classify(&m2, stat_stderr);
    Ok(ScanPoint { temperature, m2, m2_stderr, trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(seed: u64, sweeps: usize) -> ChainConfig {
        ChainConfig { seed, burn_in_sweeps: 100, measure_sweeps: sweeps, thinning: 1, n_chains: 2 }
    }

    fn point(t: f64, trend: Trend) -> ScanPoint {
        ScanPoint { temperature: t, m2: vec![], m2_stderr: vec![], trend }
    }

    #[test]
    fn second_moment_examples() {
        let full = BasisSet::full();
        assert!((second_moment(&bare_hamiltonian(2.26, &full).unwrap()) - 2.0 / 2.26).abs() < 1e-15);
        // quadratic part of the printed second iteration at T = 2.26
        let row = vec![0.26, 0.47, 0.32, 0.04, 0.07, -0.01, -0.08, 0.04, -0.00, -0.12];
        let a = CoefficientVector::new(full.clone(), row).unwrap();
        assert!((second_moment(&a) - 1.54).abs() < 1e-12);
        assert_eq!(second_moment(&CoefficientVector::zeros(full)), 0.0);
    }

    proptest! {
        #[test]
        fn second_moment_is_linear(a in prop::collection::vec(-2.0f64..2.0, 10), b in prop::collection::vec(-2.0f64..2.0, 10), s in -3.0f64..3.0) {
            let full = BasisSet::full();
            let va = CoefficientVector::new(full.clone(), a.clone()).unwrap();
            let vb = CoefficientVector::new(full.clone(), b.clone()).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let vs = CoefficientVector::new(full, sum).unwrap();
            prop_assert!((second_moment(&vs) - second_moment(&va) - s * second_moment(&vb)).abs() < 1e-9);
        }
    }

    #[test]
    fn single_iteration_is_the_bare_row() {
        let t = run_flow(2.27, &BasisSet::full(), 1, 8, &cfg(0, 10)).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].alpha[1], 2.0 / 2.27);
        assert!(t.rows[0].alpha.iter().enumerate().all(|(k, &a)| k == 1 || a == 0.0));
    }

    #[test]
    fn lattice_too_small_is_rejected() {
        assert!(run_flow(2.27, &BasisSet::full(), 5, 32, &cfg(0, 10)).is_err());
        assert!(run_flow(2.27, &BasisSet::full(), 3, 12, &cfg(0, 10)).is_err());
        assert!(check_flow_size(64, 5).is_ok());
        assert!(run_flow(0.0, &BasisSet::full(), 2, 8, &cfg(0, 10)).is_err());
    }

    #[test]
    fn hot_flow_stays_near_zero() {
        let t = run_flow(20.0, &BasisSet::full(), 3, 16, &cfg(1, 400)).unwrap();
        assert_eq!(t.rows[0].alpha[1], 0.1);
        for row in &t.rows[1..] {
            assert!(row.alpha[1..].iter().all(|a| a.abs() < 0.05), "{row:?}");
            assert!(row.m2.abs() < 0.05);
        }
        let m2: Vec<f64> = t.rows.iter().map(|r| r.m2).collect();
        assert!(m2[2] < m2[0]);
    }

    #[test]
    fn csv_round_trip() {
        let t = run_flow(2.3, &BasisSet::full(), 2, 8, &cfg(2, 200)).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = FlowTable::read_csv(std::str::from_utf8(&buf).unwrap(), &BasisSet::full()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn flows_are_reproducible() {
        let a = run_flow(2.27, &BasisSet::small(), 2, 8, &cfg(7, 100)).unwrap();
        let b = run_flow(2.27, &BasisSet::small(), 2, 8, &cfg(7, 100)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_temperature_scan_warns() {
        let r = tc_scan(&[2.27], &BasisSet::full(), 3, 16, &cfg(0, 100)).unwrap();
        assert_eq!(r.points.len(), 1);
        assert!(r.bracket.is_none() && r.warning.is_some());
    }

    #[test]
    fn several_flows_in_one_csv() {
        let mut buf = Vec::new();
        let a = run_flow(2.2, &BasisSet::small(), 2, 8, &cfg(1, 50)).unwrap();
        let b = run_flow(2.3, &BasisSet::small(), 2, 8, &cfg(1, 50)).unwrap();
        a.write_csv(&mut buf).unwrap();
        let mut tail = Vec::new();
        b.write_csv(&mut tail).unwrap();
        let text = String::from_utf8(buf).unwrap() + String::from_utf8(tail).unwrap().split_once('\n').unwrap().1;
        let back = FlowTable::read_csv_all(&text, &BasisSet::small()).unwrap();
        assert_eq!(back, vec![a, b]);
        assert!(FlowTable::read_csv(&text, &BasisSet::small()).is_err());
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&[1.0, 1.5], 0.0), Trend::Flat);
        assert_eq!(classify(&[0.9, 1.5, 1.7], 0.05), Trend::Growing);
        assert_eq!(classify(&[0.9, 1.5, 1.3], 0.05), Trend::Decaying);
        assert_eq!(classify(&[0.9, 1.5, 1.55], 0.05), Trend::Flat);
        assert_eq!(trend_statistic(&[0.9, 1.5, 1.7]), Some(1.7 - 1.5));
    }

    #[test]
    fn bracket_takes_last_growing_and_next_decaying() {
        use Trend::*;
        let r = bracket(vec![point(2.1, Growing), point(2.2, Growing), point(2.3, Decaying), point(2.4, Decaying)]);
        assert_eq!(r.bracket, Some((2.2, 2.3)));
        assert!(r.warning.is_none());
        assert!((r.midpoint().unwrap() - 2.25).abs() < 1e-12);
        let r = bracket(vec![point(2.1, Growing), point(2.2, Flat), point(2.3, Decaying)]);
        assert_eq!(r.bracket, Some((2.1, 2.3)));
        assert!(r.warning.unwrap().starts_with('1'));
        let r = bracket(vec![point(2.1, Decaying), point(2.2, Growing)]);
        assert_eq!(r.bracket, None);
        assert!(r.warning.is_some());
    }

    #[test]
    fn scan_arguments_validated() {
        let b = BasisSet::full();
        assert!(tc_scan(&[], &b, 3, 16, &cfg(0, 10)).is_err());
        assert!(tc_scan(&[2.3, 2.2], &b, 3, 16, &cfg(0, 10)).is_err());
        assert!(tc_scan(&[2.2, 2.3], &b, 2, 16, &cfg(0, 10)).is_err());
    }

    #[test]
    fn scan_separates_cold_from_hot() {
        let r = tc_scan(&[1.5, 4.0], &BasisSet::full(), 3, 16, &cfg(3, 600)).unwrap();
        assert_eq!(r.points[0].trend, Trend::Growing, "{:?}", r.points[0]);
        assert_eq!(r.points[1].trend, Trend::Decaying, "{:?}", r.points[1]);
        assert_eq!(r.bracket, Some((1.5, 4.0)));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
