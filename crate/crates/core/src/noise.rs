//! Space-time white noise on `[0, T] x U`, sampled cell by cell from a
//! counter-based generator so that every cell value is a pure function of
//! `(seed, replicate, step, cell)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::Grid;

/// Uniform partition of the mark interval `[lo, hi]` into `n` cells, with
/// Lebesgue intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl MarkGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid("marks", "bounds must be finite"));
        }
        if n == 0 || hi <= lo {
            return Err(invalid(
                "marks",
                format!("cells must have positive measure (lo={lo}, hi={hi}, n={n})"),
            ));
        }
        Ok(Self { lo, hi, n })
    }

    /// Measure `lambda` of each cell.
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn edge(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.width()
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        self.lo + (j as f64 + 0.5) * self.width()
    }

    pub fn total(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Cell integrals `W([t_k, t_{k+1}] x [a_j, a_{j+1}])`, row-major `(nt, na)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    nt: usize,
    na: usize,
    increments: Vec<f64>,
}

impl NoiseRealization {
    pub fn from_increments(nt: usize, na: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != nt * na {
            return Err(LabError::ShapeMismatch(format!(
                "noise has {} entries, expected {nt} x {na}",
                increments.len()
            )));
        }
        Ok(Self { nt, na, increments })
    }

    pub fn zeros(nt: usize, na: usize) -> Self {
        Self {
            nt,
            na,
            increments: vec![0.0; nt * na],
        }
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.increments[k * self.na..(k + 1) * self.na]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    // splitmix64 expansion of the user seed into a 256-bit key
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    key
}

/// Counter-based standard normal source. Values for time step `k` start at
/// ChaCha word position `k * 2^32` on stream `replicate`.
#[derive(Debug, Clone)]
pub struct CounterNormals {
    key: [u8; 32],
    replicate: u64,
}

impl CounterNormals {
    pub fn new(seed: u64, replicate: u64) -> Self {
        Self {
            key: key_from_seed(seed),
            replicate,
        }
    }

    /// Fill `out` with the standard normals of time step `step`.
    pub fn fill_step(&self, step: usize, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.replicate);
        rng.set_word_pos((step as u128) << 32);
        let scale = 1.0 / (1u64 << 53) as f64;
        for pair in out.chunks_mut(2) {
            let u1 = ((rng.next_u64() >> 11) + 1) as f64 * scale;
            let u2 = (rng.next_u64() >> 11) as f64 * scale;
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            pair[0] = r * c;
            if pair.len() > 1 {
                pair[1] = r * s;
            }
        }
    }

    /// Noise increments of step `step`: normals scaled by `sqrt(dt * lambda)`.
    pub fn fill_increments(&self, step: usize, dt: f64, marks: &MarkGrid, out: &mut [f64]) {
        self.fill_step(step, out);
        let sd = (dt * marks.width()).sqrt();
        out.iter_mut().for_each(|z| *z *= sd);
    }
}

/// Materialize the white-noise cell integrals for one replicate.
pub fn sample_white_noise(grid: &Grid, marks: &MarkGrid, seed: u64, replicate: u64) -> Result<NoiseRealization> {
    if !(marks.width() > 0.0) {
        return Err(invalid("marks", "zero-measure mark cell"));
    }
    let src = CounterNormals::new(seed, replicate);
    let na = marks.n;
    let mut increments = vec![0.0; grid.nt * na];
    for (k, row) in increments.chunks_mut(na).enumerate() {
        src.fill_increments(k, grid.dt(), marks, row);
    }
    Ok(NoiseRealization {
        nt: grid.nt,
        na,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn variance_matches_cell_measure() {
        let grid = Grid::new(1.0, 4, 1.0, 400).unwrap();
        let marks = MarkGrid::new(0.0, 2.0, 250).unwrap();
        let w = sample_white_noise(&grid, &marks, 7, 0).unwrap();
        assert_eq!(w.increments().len(), 100_000);
        let (m, v) = mean_var(w.increments());
        let target = grid.dt() * marks.width();
        assert!(m.abs() < 4.0 * (target / 1e5).sqrt());
        assert!((v / target - 1.0).abs() < 0.03, "ratio {}", v / target);
    }

    #[test]
    fn deterministic_and_independent_replicates() {
        let grid = Grid::new(1.0, 4, 1.0, 400).unwrap();
        let marks = MarkGrid::new(0.0, 1.0, 250).unwrap();
        let a = sample_white_noise(&grid, &marks, 11, 3).unwrap();
        let b = sample_white_noise(&grid, &marks, 11, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_white_noise(&grid, &marks, 11, 4).unwrap();
        let (ma, va) = mean_var(a.increments());
        let (mc, vc) = mean_var(c.increments());
        let cov: f64 = a
            .increments()
            .iter()
            .zip(c.increments())
            .map(|(x, y)| (x - ma) * (y - mc))
            .sum::<f64>()
            / (a.increments().len() as f64 - 1.0);
        assert!((cov / (va * vc).sqrt()).abs() < 0.02);
    }

    #[test]
    fn streaming_matches_materialized() {
        let grid = Grid::new(1.0, 4, 1.0, 10).unwrap();
        let marks = MarkGrid::new(-1.0, 1.0, 7).unwrap();
        let w = sample_white_noise(&grid, &marks, 5, 9).unwrap();
        let src = CounterNormals::new(5, 9);
        let mut row = vec![0.0; 7];
        src.fill_increments(6, grid.dt(), &marks, &mut row);
        assert_eq!(row.as_slice(), w.step(6));
    }

    #[test]
    fn intensity_scaling() {
        let grid = Grid::new(1.0, 4, 1.0, 200).unwrap();
        let a = sample_white_noise(&grid, &MarkGrid::new(0.0, 1.0, 100).unwrap(), 1, 0).unwrap();
        let b = sample_white_noise(&grid, &MarkGrid::new(0.0, 4.0, 100).unwrap(), 1, 0).unwrap();
        for (x, y) in a.increments().iter().zip(b.increments()) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_measure_rejected() {
        assert!(MarkGrid::new(1.0, 1.0, 4).is_err());
        assert!(MarkGrid::new(0.0, 1.0, 0).is_err());
    }
}
