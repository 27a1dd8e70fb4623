//! Error bars for correlated Monte-Carlo series.
//!
//! Scalar series get a binning analysis: bin size doubles until the standard
//! error stops growing. Vector-valued series are stored in bins of a fixed
//! capacity so that arbitrary (possibly nonlinear) functions of their means can
//! be given jackknife errors later.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binning stops once fewer than this many bins remain.
const MIN_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Binning reached a plateau, so `stderr` accounts for autocorrelation.
    pub converged: bool,
}

impl Estimate {
    /// An exactly known value.
    pub fn exact(mean: f64) -> Self {
        Estimate { mean, stderr: 0.0, n_samples: 1, converged: true }
    }

    /// `|mean - value| <= k * stderr + slack`.
    pub fn agrees_with(&self, value: f64, k: f64, slack: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr + slack
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Binning analysis of one correlated series.
pub fn binning(series: &[f64]) -> Result<Estimate> {
    if series.len() < 2 {
        return Err(Error::InsufficientSamples(format!("binning needs at least 2 values, got {}", series.len())));
    }
    let (mean, var) = mean_var(series);
    let mut best = var / series.len() as f64;
    let mut upper = best * (1.0 + (2.0 / (series.len() as f64 - 1.0)).sqrt());
    let mut converged = best == 0.0;
    let mut bins = series.to_vec();
    while !converged && bins.len() / 2 >= MIN_BINS {
        bins = bins.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let n = bins.len() as f64;
        let s2 = mean_var(&bins).1 / n;
        if s2 > upper {
            best = s2;
            upper = s2 * (1.0 + (2.0 / (n - 1.0)).sqrt());
        } else {
            converged = true;
        }
    }
    Ok(Estimate { mean, stderr: best.sqrt(), n_samples: series.len(), converged })
}

/// Pool per-chain estimates of equal sample count into one.
pub fn pool(per_chain: &[Estimate]) -> Result<Estimate> {
    if per_chain.is_empty() {
        return Err(Error::InsufficientSamples("no chains to pool".into()));
    }
    let c = per_chain.len() as f64;
    let n: usize = per_chain.iter().map(|e| e.n_samples).sum();
    let mean = per_chain.iter().map(|e| e.mean * e.n_samples as f64).sum::<f64>() / n as f64;
    let var: f64 = per_chain.iter().map(|e| e.stderr * e.stderr).sum::<f64>() / (c * c);
    Ok(Estimate { mean, stderr: var.sqrt(), n_samples: n, converged: per_chain.iter().all(|e| e.converged) })
}

/// Estimate from one series per chain.
pub fn estimate_chains(chains: &[Vec<f64>]) -> Result<Estimate> {
    let per: Vec<Estimate> = chains.iter().map(|s| binning(s)).collect::<Result<_>>()?;
    pool(&per)
}

/// Fixed-capacity binned storage for a vector-valued series.
///
/// Raw samples are averaged into bins of `bin_size`; when `capacity` bins are
/// full, neighbouring bins merge and `bin_size` doubles. The running total is
/// kept separately so the mean includes any partially filled bin.
#[derive(Clone, Debug)]
pub struct VectorSeries {
    dim: usize,
    capacity: usize,
    bin_size: usize,
    bins: Vec<f64>,
    pending: Vec<f64>,
    pending_count: usize,
    total: Vec<f64>,
    count: usize,
}

impl VectorSeries {
    pub fn new(dim: usize, capacity: usize) -> Self {
        let capacity = capacity.max(2) & !1;
        VectorSeries {
            dim,
            capacity,
            bin_size: 1,
            bins: Vec::new(),
            pending: vec![0.0; dim],
            pending_count: 0,
            total: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bin_size(&self) -> usize {
        self.bin_size
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len() / self.dim.max(1)
    }

    pub fn push(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        for (acc, x) in self.pending.iter_mut().zip(v) {
            *acc += x;
        }
        for (acc, x) in self.total.iter_mut().zip(v) {
            *acc += x;
        }
        self.count += 1;
        self.pending_count += 1;
        if self.pending_count == self.bin_size {
            let w = 1.0 / self.bin_size as f64;
            self.bins.extend(self.pending.iter().map(|x| x * w));
            self.pending.iter_mut().for_each(|x| *x = 0.0);
            self.pending_count = 0;
            if self.n_bins() == self.capacity {
                self.merge_pairs();
            }
        }
    }

    fn merge_pairs(&mut self) {
        let d = self.dim;
        let merged: Vec<f64> = self
            .bins
            .chunks_exact(2 * d)
            .flat_map(|pair| (0..d).map(move |c| 0.5 * (pair[c] + pair[d + c])))
            .collect();
        self.bins = merged;
        self.bin_size *= 2;
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.total.iter().map(|x| x / n).collect()
    }

    pub fn bin(&self, b: usize) -> &[f64] {
        &self.bins[b * self.dim..(b + 1) * self.dim]
    }

    /// Series of `w . v` over the stored bins.
    pub fn contracted(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n_bins()).map(|b| self.bin(b).iter().zip(w).map(|(x, y)| x * y).sum()).collect()
    }

    /// Series of one component over the stored bins.
    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.n_bins()).map(|b| self.bin(b)[c]).collect()
    }

    /// Split the stored bins into `n_blocks` contiguous blocks and return block sums and counts.
    pub fn blocks(&self, n_blocks: usize) -> Vec<(Vec<f64>, usize)> {
        let nb = self.n_bins();
        let n_blocks = n_blocks.min(nb).max(1);
        (0..n_blocks)
            .map(|k| {
                let (lo, hi) = (k * nb / n_blocks, (k + 1) * nb / n_blocks);
                let mut sum = vec![0.0; self.dim];
                for b in lo..hi {
                    for (s, x) in sum.iter_mut().zip(self.bin(b)) {
                        *s += x * self.bin_size as f64;
                    }
                }
                (sum, (hi - lo) * self.bin_size)
            })
            .collect()
    }
}

/// Delete-one-block jackknife over block sums drawn from one or more series.
///
/// `f` maps a mean vector to any number of derived quantities; returns the
/// standard error of each.
pub fn jackknife<F>(blocks: &[(Vec<f64>, usize)], f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = blocks.len();
    if m < 2 {
        return Err(Error::InsufficientSamples(format!("jackknife needs at least 2 blocks, got {m}")));
    }
    let dim = blocks[0].0.len();
    let mut total = vec![0.0; dim];
    let mut count = 0usize;
    for (s, c) in blocks {
        for (t, x) in total.iter_mut().zip(s) {
            *t += x;
        }
        count += c;
    }
    let mut replicas = Vec::with_capacity(m);
    for (s, c) in blocks {
        let n = (count - c) as f64;
        let mean: Vec<f64> = total.iter().zip(s).map(|(t, x)| (t - x) / n).collect();
        replicas.push(f(&mean)?);
    }
    let k = replicas[0].len();
    let mut out = vec![0.0; k];
    for (q, slot) in out.iter_mut().enumerate() {
        let avg = replicas.iter().map(|r| r[q]).sum::<f64>() / m as f64;
        let ss: f64 = replicas.iter().map(|r| (r[q] - avg).powi(2)).sum();
        *slot = ((m as f64 - 1.0) / m as f64 * ss).sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_series_has_zero_error() {
        let e = binning(&[2.5; 100]).unwrap();
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.stderr, 0.0);
        assert!(e.converged);
        assert!(binning(&[1.0]).is_err());
    }

    #[test]
    fn white_noise_error_is_naive() {
        let n = 1 << 14;
        let e = binning(&white(n, 1)).unwrap();
        let naive = (1.0 / 3.0 / n as f64).sqrt();
        assert!((e.stderr / naive - 1.0).abs() < 0.15, "{} vs {}", e.stderr, naive);
    }

    #[test]
    fn correlated_series_error_grows() {
        // AR(1) with rho = 0.9: tau_int = (1 + rho) / (1 - rho) = 19
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1 << 16;
        let mut x = 0.0;
        let series: Vec<f64> = (0..n)
            .map(|_| {
                x = 0.9 * x + rng.random_range(-1.0..1.0);
                x
            })
            .collect();
        let e = binning(&series).unwrap();
        let var = mean_var(&series).1;
        let naive = (var / n as f64).sqrt();
        let ratio = e.stderr / naive;
        assert!(ratio > 3.5 && ratio < 5.2, "ratio {ratio}, expected about sqrt(19)");
    }

    #[test]
    fn pooled_error_scales_with_total_samples() {
        let chains: Vec<Vec<f64>> = (0..4).map(|c| white(4096, 10 + c)).collect();
        let one = estimate_chains(&chains[..1]).unwrap();
        let four = estimate_chains(&chains).unwrap();
        let pooled: Vec<f64> = chains.concat();
        assert!((four.mean - pooled.iter().sum::<f64>() / pooled.len() as f64).abs() < 1e-14);
        assert!((four.stderr / one.stderr - 0.5).abs() < 0.1);
        assert_eq!(four.n_samples, 4 * 4096);
    }

    #[test]
    fn vector_series_merges_and_keeps_mean() {
        let mut s = VectorSeries::new(2, 8);
        let xs = white(1001, 3);
        for &x in &xs {
            s.push(&[x, 2.0 * x]);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((s.mean()[0] - mean).abs() < 1e-14);
        assert!((s.mean()[1] - 2.0 * mean).abs() < 1e-14);
        assert!(s.n_bins() < 8);
        let covered = s.bin_size() * s.n_bins();
        assert!(covered <= 1001 && 1001 - covered < s.bin_size());
    }

    #[test]
    fn jackknife_of_mean_matches_naive() {
        let mut s = VectorSeries::new(1, 64);
        let xs = white(64 * 50, 4);
        for &x in &xs {
            s.push(&[x]);
        }
        let err = jackknife(&s.blocks(64), |m| Ok(vec![m[0]])).unwrap()[0];
        let naive = (mean_var(&xs).1 / xs.len() as f64).sqrt();
        assert!((err / naive - 1.0).abs() < 0.3, "{err} vs {naive}");
    }
}
