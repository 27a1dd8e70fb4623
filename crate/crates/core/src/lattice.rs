//! Square-lattice spin geometry.
//!
//! Sites are addressed by `(row, column)`. A [`SpinGrid`] owns an `L x L`
//! array of `+1 / -1` spins together with its boundary condition:
//!
//! * [`Boundary::Periodic`] wraps every coordinate modulo `L`.
//! * [`Boundary::FixedPlusOne`] freezes the outermost ring at `+1` and reads
//!   every coordinate outside the array as `+1` as well.
//!
//! The decimation map keeps the even sublattice (`i + j` even) and relabels it
//! onto a square window of half the linear size, rotated by 45 degrees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::ShellIndex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Boundary {
    Periodic,
    FixedPlusOne,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "periodic" => Ok(Boundary::Periodic),
            "fixed" | "fixed+1" | "fixedplusone" | "fixed-plus-one" => Ok(Boundary::FixedPlusOne),
            other => Err(Error::config(format!("unknown boundary condition '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub i: usize,
    pub j: usize,
}

impl Site {
    pub const fn new(i: usize, j: usize) -> Self {
        Site { i, j }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
}

/// Even sites form the retained set under decimation, odd sites are summed out.
pub fn parity(site: Site) -> Parity {
    if (site.i + site.j) % 2 == 0 {
        Parity::Even
    } else {
        Parity::Odd
    }
}

/// An `L x L` configuration of Ising spins.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpinGrid {
    size: usize,
    boundary: Boundary,
    spins: Vec<i8>,
}

impl SpinGrid {
    /// All spins up.
    pub fn new(size: usize, boundary: Boundary) -> Result<Self> {
        Self::check_size(size, boundary)?;
        Ok(SpinGrid { size, boundary, spins: vec![1; size * size] })
    }

    pub fn from_spins(size: usize, boundary: Boundary, spins: Vec<i8>) -> Result<Self> {
        Self::check_size(size, boundary)?;
        if spins.len() != size * size {
            return Err(Error::config(format!(
                "expected {} spins for a {size}x{size} grid, got {}",
                size * size,
                spins.len()
            )));
        }
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::config(format!("spin value {bad} is not +1 or -1")));
        }
        let grid = SpinGrid { size, boundary, spins };
        if boundary == Boundary::FixedPlusOne {
            let frozen_down = (0..size * size)
                .map(|k| grid.site(k))
                .any(|s| !grid.is_flippable(s) && grid.get(s) != 1);
            if frozen_down {
                return Err(Error::config("fixed boundary ring must be all +1"));
            }
        }
        Ok(grid)
    }

    pub fn from_fn(size: usize, boundary: Boundary, mut f: impl FnMut(Site) -> i8) -> Result<Self> {
        let spins = (0..size * size).map(|k| f(Site::new(k / size, k % size))).collect();
        Self::from_spins(size, boundary, spins)
    }

    /// `x(i, j) = (-1)^(i + j)`, periodic.
    pub fn checkerboard(size: usize) -> Result<Self> {
        Self::from_fn(size, Boundary::Periodic, |s| if (s.i + s.j) % 2 == 0 { 1 } else { -1 })
    }

    /// Independent fair coin per flippable site; frozen sites stay `+1`.
    pub fn random<R: Rng + ?Sized>(size: usize, boundary: Boundary, rng: &mut R) -> Result<Self> {
        let mut grid = Self::new(size, boundary)?;
        for k in 0..size * size {
            let s = grid.site(k);
            if grid.is_flippable(s) && rng.random_bool(0.5) {
                grid.spins[k] = -1;
            }
        }
        Ok(grid)
    }

    fn check_size(size: usize, boundary: Boundary) -> Result<()> {
        if size < 2 {
            return Err(Error::config(format!("lattice size must be at least 2, got {size}")));
        }
        if boundary == Boundary::FixedPlusOne && size < 3 {
            return Err(Error::config("a fixed-boundary grid needs L >= 3 to have an interior"));
        }
        Ok(())
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    #[inline]
    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    #[inline]
    pub fn n_sites(&self) -> usize {
        self.size * self.size
    }

    #[inline]
    pub fn index(&self, site: Site) -> usize {
        site.i * self.size + site.j
    }

    #[inline]
    pub fn site(&self, index: usize) -> Site {
        Site::new(index / self.size, index % self.size)
    }

    #[inline]
    pub fn get(&self, site: Site) -> i8 {
        self.spins[site.i * self.size + site.j]
    }

    /// Spin at integer coordinates, wrapped (periodic) or `+1` outside the array (fixed).
    #[inline]
    pub fn spin_at_coord(&self, i: i64, j: i64) -> i8 {
        let l = self.size as i64;
        match self.boundary {
            Boundary::Periodic => {
                let (a, b) = (i.rem_euclid(l) as usize, j.rem_euclid(l) as usize);
                self.spins[a * self.size + b]
            }
            Boundary::FixedPlusOne => {
                if i < 0 || j < 0 || i >= l || j >= l {
                    1
                } else {
                    self.spins[i as usize * self.size + j as usize]
                }
            }
        }
    }

    /// Whether a Metropolis sweep may propose flipping this site.
    #[inline]
    pub fn is_flippable(&self, site: Site) -> bool {
        match self.boundary {
            Boundary::Periodic => true,
            Boundary::FixedPlusOne => {
                site.i > 0 && site.j > 0 && site.i + 1 < self.size && site.j + 1 < self.size
            }
        }
    }

    /// Flippable sites in raster order.
    pub fn flippable_sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.n_sites()).map(|k| self.site(k)).filter(|&s| self.is_flippable(s))
    }

    pub fn n_flippable(&self) -> usize {
        match self.boundary {
            Boundary::Periodic => self.n_sites(),
            Boundary::FixedPlusOne => (self.size - 2) * (self.size - 2),
        }
    }

    /// Copy with one spin negated.
    pub fn flipped(&self, site: Site) -> Result<SpinGrid> {
        if !self.is_flippable(site) {
            return Err(Error::config(format!("site ({}, {}) is frozen", site.i, site.j)));
        }
        let mut out = self.clone();
        out.flip_unchecked(site);
        Ok(out)
    }

    #[inline]
    pub(crate) fn flip_unchecked(&mut self, site: Site) {
        let k = self.index(site);
        self.spins[k] = -self.spins[k];
    }

    /// Mean spin over the flippable sites.
    pub fn magnetization(&self) -> f64 {
        let total: i64 = self.flippable_sites().map(|s| self.get(s) as i64).sum();
        total as f64 / self.n_flippable() as f64
    }

    /// Cyclic translation `x'(i, j) = x(i - di, j - dj)`; periodic grids only.
    pub fn shifted(&self, di: i64, dj: i64) -> Result<SpinGrid> {
        if self.boundary != Boundary::Periodic {
            return Err(Error::Unsupported("cyclic shift of a fixed-boundary grid".into()));
        }
        let spins = (0..self.n_sites())
            .map(|k| {
                let s = self.site(k);
                self.spin_at_coord(s.i as i64 - di, s.j as i64 - dj)
            })
            .collect();
        Ok(SpinGrid { size: self.size, boundary: self.boundary, spins })
    }

    /// Global spin reversal `x -> -x`; periodic grids only (the frozen ring would break).
    pub fn reversed(&self) -> Result<SpinGrid> {
        if self.boundary != Boundary::Periodic {
            return Err(Error::Unsupported("global flip of a fixed-boundary grid".into()));
        }
        let spins = self.spins.iter().map(|&s| -s).collect();
        Ok(SpinGrid { size: self.size, boundary: self.boundary, spins })
    }
}

/// Sites on distance shell `shell` around `center`, in offset-table order.
///
/// Periodic grids wrap. On a fixed-boundary grid an offset that leaves the
/// array yields `None`; such positions always read `+1`.
pub fn shell_sites(grid: &SpinGrid, center: Site, shell: ShellIndex) -> Vec<Option<Site>> {
    let l = grid.size() as i64;
    shell
        .offsets()
        .iter()
        .map(|&(di, dj)| {
            let (i, j) = (center.i as i64 + di as i64, center.j as i64 + dj as i64);
            match grid.boundary() {
                Boundary::Periodic => Some(Site::new(i.rem_euclid(l) as usize, j.rem_euclid(l) as usize)),
                Boundary::FixedPlusOne => {
                    (i >= 0 && j >= 0 && i < l && j < l).then(|| Site::new(i as usize, j as usize))
                }
            }
        })
        .collect()
}

/// Old-lattice coordinates read by the decimated site `(u, v)`.
#[inline]
pub fn relabel_source(size: usize, u: usize, v: usize) -> Site {
    let l = size as i64;
    let (u, v) = (u as i64, v as i64);
    Site::new((u - v).rem_euclid(l) as usize, (u + v).rem_euclid(l) as usize)
}

/// Keep the even sublattice and relabel it onto an `(L/2) x (L/2)` window:
/// `x'(u, v) = x((u - v) mod L, (u + v) mod L)`.
pub fn decimate_relabel(grid: &SpinGrid) -> Result<SpinGrid> {
    if grid.boundary() != Boundary::Periodic {
        return Err(Error::Unsupported("decimation is defined for periodic grids only".into()));
    }
    let l = grid.size();
    if l % 2 != 0 {
        return Err(Error::config(format!("decimation needs an even lattice size, got {l}")));
    }
    let half = l / 2;
    if half < 2 {
        return Err(Error::config(format!("decimating a {l}x{l} grid leaves fewer than 2x2 sites")));
    }
    let mut spins = Vec::with_capacity(half * half);
    for u in 0..half {
        for v in 0..half {
            spins.push(grid.get(relabel_source(l, u, v)));
        }
    }
    Ok(SpinGrid { size: half, boundary: Boundary::Periodic, spins })
}

/// Replace each 2x2 block by the sign of its sum; ties are broken by a fair coin from `rng`.
pub fn block_majority<R: Rng + ?Sized>(grid: &SpinGrid, rng: &mut R) -> Result<SpinGrid> {
    if grid.boundary() != Boundary::Periodic {
        return Err(Error::Unsupported("block majority is defined for periodic grids only".into()));
    }
    let l = grid.size();
    if l % 2 != 0 || l < 4 {
        return Err(Error::config(format!("2x2 blocking needs an even size >= 4, got {l}")));
    }
    let half = l / 2;
    let mut spins = Vec::with_capacity(half * half);
    for u in 0..half {
        for v in 0..half {
            let sum: i32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, b)| grid.get(Site::new(2 * u + a, 2 * v + b)) as i32)
                .sum();
            let s = match sum.signum() {
                1 => 1,
                -1 => -1,
                _ => {
                    if rng.random_bool(0.5) {
                        1
                    } else {
                        -1
                    }
                }
            };
            spins.push(s);
        }
    }
    Ok(SpinGrid { size: half, boundary: Boundary::Periodic, spins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shell(k: usize) -> ShellIndex {
        ShellIndex::new(k).unwrap()
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity(Site::new(0, 0)), Parity::Even);
        assert_eq!(parity(Site::new(1, 2)), Parity::Odd);
        assert_eq!(parity(Site::new(3, 3)), Parity::Even);
    }

    #[test]
    fn parity_partition_is_balanced() {
        for l in [2usize, 4, 6, 10] {
            let even = (0..l * l).filter(|k| parity(Site::new(k / l, k % l)) == Parity::Even).count();
            assert_eq!(even, l * l / 2);
        }
    }

    #[test]
    fn shell_sites_examples() {
        let g4 = SpinGrid::new(4, Boundary::Periodic).unwrap();
        let got: Vec<Site> = shell_sites(&g4, Site::new(0, 0), shell(2)).into_iter().flatten().collect();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        let mut want = vec![Site::new(1, 0), Site::new(3, 0), Site::new(0, 1), Site::new(0, 3)];
        want.sort();
        assert_eq!(got_sorted, want);

        let g8 = SpinGrid::new(8, Boundary::Periodic).unwrap();
        let mut got: Vec<Site> = shell_sites(&g8, Site::new(2, 2), shell(3)).into_iter().flatten().collect();
        got.sort();
        assert_eq!(got, vec![Site::new(1, 1), Site::new(1, 3), Site::new(3, 1), Site::new(3, 3)]);

        let c = Site::new(5, 1);
        assert_eq!(shell_sites(&g8, c, shell(1)), vec![Some(c)]);
    }

    #[test]
    fn fixed_boundary_shell_clips() {
        let g = SpinGrid::new(5, Boundary::FixedPlusOne).unwrap();
        let sites = shell_sites(&g, Site::new(1, 1), shell(4));
        // (-1, 1) and (1, -1) leave the array
        assert_eq!(sites.iter().filter(|s| s.is_none()).count(), 2);
        assert_eq!(g.spin_at_coord(-3, 2), 1);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(SpinGrid::new(1, Boundary::Periodic).is_err());
        assert!(SpinGrid::from_spins(2, Boundary::Periodic, vec![1, 0, 1, 1]).is_err());
        let mut spins = vec![1i8; 9];
        spins[0] = -1;
        assert!(SpinGrid::from_spins(3, Boundary::FixedPlusOne, spins).is_err());
        let g = SpinGrid::new(4, Boundary::FixedPlusOne).unwrap();
        assert!(g.flipped(Site::new(0, 2)).is_err());
        assert!(g.flipped(Site::new(1, 2)).is_ok());
    }

    #[test]
    fn decimate_examples() {
        let up = SpinGrid::new(4, Boundary::Periodic).unwrap();
        assert_eq!(decimate_relabel(&up).unwrap(), SpinGrid::new(2, Boundary::Periodic).unwrap());
        assert_eq!(relabel_source(4, 0, 1), Site::new(3, 1));
        let cb = SpinGrid::checkerboard(4).unwrap();
        assert_eq!(decimate_relabel(&cb).unwrap(), SpinGrid::new(2, Boundary::Periodic).unwrap());
    }

    #[test]
    fn decimate_errors() {
        let odd = SpinGrid::new(5, Boundary::Periodic).unwrap();
        assert!(matches!(decimate_relabel(&odd), Err(Error::Config(_))));
        let fixed = SpinGrid::new(6, Boundary::FixedPlusOne).unwrap();
        assert!(matches!(decimate_relabel(&fixed), Err(Error::Unsupported(_))));
    }

    #[test]
    fn decimation_reads_even_sites_injectively() {
        for l in [4usize, 6, 8, 16] {
            let mut seen = std::collections::HashSet::new();
            for u in 0..l / 2 {
                for v in 0..l / 2 {
                    let s = relabel_source(l, u, v);
                    assert_eq!(parity(s), Parity::Even);
                    assert!(seen.insert(s), "relabel map is not injective at L={l}");
                }
            }
        }
    }

    #[test]
    fn two_decimations_take_one_spin_in_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SpinGrid::random(16, Boundary::Periodic, &mut rng).unwrap();
        let g2 = decimate_relabel(&decimate_relabel(&g).unwrap()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for a in 0..4 {
            for b in 0..4 {
                let mid = relabel_source(8, a, b);
                let src = relabel_source(16, mid.i, mid.j);
                assert!(src.i % 2 == 0 && src.j % 2 == 0, "{src:?} is not on the 2x sublattice");
                assert!(seen.insert(src));
                assert_eq!(g2.get(Site::new(a, b)), g.get(src));
            }
        }
    }

    #[test]
    fn block_majority_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = SpinGrid::new(4, Boundary::Periodic).unwrap();
        assert_eq!(block_majority(&up, &mut rng).unwrap(), SpinGrid::new(2, Boundary::Periodic).unwrap());

        let g = SpinGrid::from_spins(4, Boundary::Periodic, vec![
            1, 1, -1, -1, //
            1, -1, -1, -1, //
            1, 1, 1, 1, //
            1, 1, 1, 1,
        ])
        .unwrap();
        let b = block_majority(&g, &mut rng).unwrap();
        assert_eq!(b.get(Site::new(0, 0)), 1);
        assert_eq!(b.get(Site::new(0, 1)), -1);
        assert!(block_majority(&SpinGrid::new(5, Boundary::Periodic).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn block_majority_tie_is_fair() {
        // a single tied block {+1, +1, -1, -1}; the empirical mean over seeds must be
        // within 3 sigma of zero, sigma = 1 / sqrt(n) for a fair +-1 coin
        let g = SpinGrid::from_spins(4, Boundary::Periodic, vec![
            1, 1, 1, 1, //
            -1, -1, 1, 1, //
            1, 1, 1, 1, //
            1, 1, 1, 1,
        ])
        .unwrap();
        let n = 4000;
        let total: i64 = (0..n)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                block_majority(&g, &mut rng).unwrap().get(Site::new(0, 0)) as i64
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "tie-break mean {mean}");
    }

    #[test]
    fn block_majority_unanimous_for_every_seed() {
        let mut base = ChaCha8Rng::seed_from_u64(11);
        let coarse = SpinGrid::random(4, Boundary::Periodic, &mut base).unwrap();
        let fine = SpinGrid::from_fn(8, Boundary::Periodic, |s| coarse.get(Site::new(s.i / 2, s.j / 2))).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(block_majority(&fine, &mut rng).unwrap(), coarse);
        }
    }
}
