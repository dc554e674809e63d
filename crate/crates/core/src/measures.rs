//! Signed measures stored as grid densities, the distributional derivative
//! `xi(v) = dv` taking distribution functions to measures, pairings, and
//! the weighted bounded-Lipschitz distance.
//!
//! A frame has `nx + 1` entries; entry `i < nx` is the density on the cell
//! `[y_i, y_{i+1})` and the last entry is always zero, so that frames line
//! up with grid nodes.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{Field, FieldPath, Grid};
use crate::models::Anchor;

/// Density of a signed measure with respect to Lebesgue measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureFrame(Vec<f64>);

impl MeasureFrame {
    pub fn new(mut density: Vec<f64>) -> Self {
        if let Some(last) = density.last_mut() {
            *last = 0.0;
        }
        Self(density)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Unit mass on the cell starting at node `i`.
    pub fn cell_mass(grid: &Grid, i: usize, mass: f64) -> Self {
        let mut d = vec![0.0; grid.len()];
        d[i] = mass / grid.dx();
        Self::new(d)
    }

    pub fn density(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_mass(&self, grid: &Grid) -> f64 {
        self.0.iter().sum::<f64>() * grid.dx()
    }

    /// `int e^{-beta |y|} |w(y)| dy`.
    pub fn weighted_tv(&self, grid: &Grid, beta: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, w)| (-beta * grid.node(i).abs()).exp() * w.abs())
            .sum::<f64>()
            * grid.dx()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|w| c * w).collect())
    }
}

/// `xi(v)`: forward difference of `v` over `dx`.
pub fn field_to_measure(v: &Field, grid: &Grid) -> Result<MeasureFrame> {
    grid.check_field(v.len(), "field")?;
    let dx = grid.dx();
    let mut d: Vec<f64> = v.values().windows(2).map(|w| (w[1] - w[0]) / dx).collect();
    d.push(0.0);
    Ok(MeasureFrame(d))
}

/// Cumulative integral of a density starting from `left` at `y_0`.
pub fn cumulative_field(mu: &MeasureFrame, grid: &Grid, left: f64) -> Result<Field> {
    grid.check_field(mu.len(), "measure")?;
    let dx = grid.dx();
    let mut out = Vec::with_capacity(mu.len());
    let mut acc = left;
    out.push(acc);
    for w in &mu.0[..mu.len() - 1] {
        acc += w * dx;
        out.push(acc);
    }
    Field::new(out)
}

/// Distribution function of `mu` under the anchor convention: `mu((0, y])`
/// (zero at the node nearest the origin) or `mu((-inf, y])` with no mass
/// left of the window.
pub fn anchored_field(mu: &MeasureFrame, grid: &Grid, anchor: Anchor) -> Result<Field> {
    let f = cumulative_field(mu, grid, 0.0)?;
    match anchor {
        Anchor::MinusInfinity => Ok(f),
        Anchor::Origin => {
            let i0 = ((grid.half_width / grid.dx()).round() as usize).min(grid.nx);
            let c = f[i0];
            Field::new(f.values().iter().map(|v| v - c).collect())
        }
    }
}

/// `<mu, f> = sum f w dx`.
pub fn pair(mu: &MeasureFrame, f: &Field, grid: &Grid) -> Result<f64> {
    if mu.len() != f.len() {
        return Err(LabError::ShapeMismatch(format!(
            "measure has {} entries, test function {}",
            mu.len(),
            f.len()
        )));
    }
    Ok(mu.0.iter().zip(f.values()).map(|(w, g)| w * g).sum::<f64>() * grid.dx())
}

/// A path of measure frames, frame `k` at `t_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedMeasurePath {
    pub frames: Vec<MeasureFrame>,
    pub beta: f64,
}

impl SignedMeasurePath {
    pub fn frame(&self, k: usize) -> &MeasureFrame {
        &self.frames[k]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Node-major density matrix used for serialization.
    pub fn to_field_path(&self) -> Result<FieldPath> {
        FieldPath::new(self.frames.iter().map(|m| Field::new(m.0.clone())).collect::<Result<_>>()?)
    }
}

/// `eta(v)_t = xi(v_t)`.
pub fn path_to_measure_path(v: &FieldPath, grid: &Grid, beta: f64) -> Result<SignedMeasurePath> {
    let frames = v
        .frames()
        .iter()
        .map(|f| field_to_measure(f, grid))
        .collect::<Result<_>>()?;
    Ok(SignedMeasurePath { frames, beta })
}

/// Concave piecewise-linear function on `[-1, 1]` given by breakpoints.
struct Concave {
    xs: Vec<f64>,
    vs: Vec<f64>,
}

impl Concave {
    fn linear(c: f64) -> Self {
        Self {
            xs: vec![-1.0, 1.0],
            vs: vec![-c, c],
        }
    }

    fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.vs.len() {
            if self.vs[i] > self.vs[best] {
                best = i;
            }
        }
        best
    }

    /// `g -> max_{|f - g| <= r, |f| <= 1} V(f)`, then restricted to `[-1, 1]`.
    fn dilate(&mut self, r: f64) {
        let m = self.argmax();
        let mut xs = Vec::with_capacity(self.xs.len() + 2);
        let mut vs = Vec::with_capacity(self.xs.len() + 2);
        for i in 0..=m {
            xs.push(self.xs[i] - r);
            vs.push(self.vs[i]);
        }
        for i in m..self.xs.len() {
            xs.push(self.xs[i] + r);
            vs.push(self.vs[i]);
        }
        self.xs = xs;
        self.vs = vs;
        self.clip();
    }

    fn clip(&mut self) {
        let at = |xs: &[f64], vs: &[f64], x: f64| -> f64 {
            let j = xs.partition_point(|&p| p <= x).clamp(1, xs.len() - 1);
            let (x0, x1) = (xs[j - 1], xs[j]);
            if x1 == x0 {
                return vs[j].max(vs[j - 1]);
            }
            vs[j - 1] + (vs[j] - vs[j - 1]) * (x - x0) / (x1 - x0)
        };
        let lo = at(&self.xs, &self.vs, -1.0);
        let hi = at(&self.xs, &self.vs, 1.0);
        let mut xs = vec![-1.0];
        let mut vs = vec![lo];
        for (x, v) in self.xs.iter().zip(&self.vs) {
            if *x > -1.0 && *x < 1.0 {
                xs.push(*x);
                vs.push(*v);
            }
        }
        xs.push(1.0);
        vs.push(hi);
        self.xs = xs;
        self.vs = vs;
    }

    fn add_linear(&mut self, c: f64) {
        for (x, v) in self.xs.iter().zip(self.vs.iter_mut()) {
            *v += c * x;
        }
    }

    fn max(&self) -> f64 {
        self.vs[self.argmax()]
    }
}

/// `max sum_i c_i f_i` over `|f_i| <= 1`, `|f_{i+1} - f_i| <= step`, by
/// dynamic programming over concave value functions.
pub(crate) fn lipschitz_box_sup(c: &[f64], step: f64) -> f64 {
    let Some((&c0, rest)) = c.split_first() else {
        return 0.0;
    };
    let mut v = Concave::linear(c0);
    for &ci in rest {
        v.dilate(step);
        v.add_linear(ci);
    }
    v.max()
}

/// Weighted bounded-Lipschitz distance
/// `sup { |int f e^{-beta|y|} d(mu - nu)| : |f| <= 1, |f'| <= 1 }` on the
/// grid. The program is solved exactly.
pub fn rho_beta(mu: &MeasureFrame, nu: &MeasureFrame, grid: &Grid, beta: f64) -> Result<f64> {
    grid.check_field(mu.len(), "measure")?;
    grid.check_field(nu.len(), "measure")?;
    let dx = grid.dx();
    let c: Vec<f64> = mu
        .0
        .iter()
        .zip(&nu.0)
        .enumerate()
        .map(|(i, (a, b))| (-beta * grid.node(i).abs()).exp() * (a - b) * dx)
        .collect();
    Ok(lipschitz_box_sup(&c, dx).max(0.0))
}

/// `max_k rho_beta(xi u_k, xi v_k) / max |u - v|`: empirical Lipschitz
/// constant of `eta` at a pair of paths.
pub fn eta_lipschitz_ratio(u: &FieldPath, v: &FieldPath, grid: &Grid, beta: f64) -> Result<f64> {
    let h = u.max_abs_diff(v);
    if h == 0.0 {
        return Ok(0.0);
    }
    let mut worst = 0.0_f64;
    for (a, b) in u.frames().iter().zip(v.frames()) {
        worst = worst.max(rho_beta(&field_to_measure(a, grid)?, &field_to_measure(b, grid)?, grid, beta)?);
    }
    Ok(worst / h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force DP over `f` restricted to multiples of `dx` (exact when
    /// `1/dx` is an integer, since the program's vertices lie on that lattice).
    fn lattice_oracle(c: &[f64], m: usize) -> f64 {
        let states = 2 * m + 1;
        let f = |s: usize| s as f64 / m as f64 - 1.0;
        let mut val: Vec<f64> = (0..states).map(|s| c[0] * f(s)).collect();
        for &ci in &c[1..] {
            let next: Vec<f64> = (0..states)
                .map(|s| {
                    let lo = s.saturating_sub(1);
                    let hi = (s + 1).min(states - 1);
                    val[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max) + ci * f(s)
                })
                .collect();
            val = next;
        }
        val.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    fn grid() -> Grid {
        Grid::new(2.0, 16, 1.0, 4).unwrap()
    }

    #[test]
    fn xi_examples() {
        let g = grid();
        let c = Field::from_fn(&g, |_| 3.0).unwrap();
        assert!(field_to_measure(&c, &g).unwrap().density().iter().all(|w| *w == 0.0));
        let lin = Field::from_fn(&g, |y| y).unwrap();
        let m = field_to_measure(&lin, &g).unwrap();
        assert!(m.density()[..g.nx].iter().all(|w| (w - 1.0).abs() < 1e-12));
        let step = Field::from_fn(&g, |y| if y >= 0.5 { 1.0 } else { 0.0 }).unwrap();
        let m = field_to_measure(&step, &g).unwrap();
        let i0 = g.node_index(0.5).unwrap();
        assert!((m.density()[i0 - 1] - 1.0 / g.dx()).abs() < 1e-12);
        assert!((m.total_mass(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_examples() {
        let g = grid();
        let i0 = g.node_index(0.0).unwrap();
        let delta = MeasureFrame::cell_mass(&g, i0, 1.0);
        let zero = MeasureFrame::zeros(g.len());
        for beta in [0.0, 0.5, 3.0] {
            assert!((rho_beta(&delta, &zero, &g, beta).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(rho_beta(&delta, &delta, &g, 1.0).unwrap(), 0.0);
        // a dipole pays only the Lipschitz difference: f = (1, 1 - dx)
        let mut d = vec![0.0; g.len()];
        d[i0] = 1.0 / g.dx();
        d[i0 + 1] = -1.0 / g.dx();
        let dip = MeasureFrame::new(d);
        let w1 = (-g.node(i0 + 1).abs()).exp();
        let expect = (1.0 - w1 * (1.0 - g.dx())).max(w1 + g.dx() - 1.0);
        assert!((rho_beta(&dip, &zero, &g, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_pairing() {
        let g = grid();
        let v = Field::from_fn(&g, |y| (2.0 * y).sin() + y * y).unwrap();
        let mu = field_to_measure(&v, &g).unwrap();
        let back = cumulative_field(&mu, &g, v[0]).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-12);
        let f = Field::from_fn(&g, |y| (-y * y).exp()).unwrap();
        // summation by parts: sum f_i (v_{i+1} - v_i) = -sum v_i (f_i - f_{i-1}) + boundary
        let lhs = pair(&mu, &f, &g).unwrap();
        let n = g.nx;
        let by_parts: f64 = -(1..n).map(|i| v[i] * (f[i] - f[i - 1])).sum::<f64>() + f[n - 1] * v[n] - f[0] * v[0];
        assert!((lhs - by_parts).abs() < 1e-12);
        assert!((pair(&mu, &f, &g).unwrap() * 2.0 - pair(&mu.scaled(2.0), &f, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn origin_anchor() {
        let g = grid();
        let v = Field::from_fn(&g, |y| y * 0.5).unwrap();
        let mu = field_to_measure(&v, &g).unwrap();
        let back = anchored_field(&mu, &g, Anchor::Origin).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn eta_continuity_proxy() {
        let g = Grid::new(3.0, 60, 1.0, 2).unwrap();
        let base = Field::from_fn(&g, |y| 0.5 * (1.0 + (y).tanh())).unwrap();
        let base_path = FieldPath::new(vec![base.clone(); 3]).unwrap();
        let mut prev = f64::INFINITY;
        for h in [1e-1, 1e-2, 1e-3] {
            let bumped = Field::from_fn(&g, |y| 0.5 * (1.0 + y.tanh()) + h * (-y * y).exp() * (3.0 * y).sin()).unwrap();
            let p = FieldPath::new(vec![bumped; 3]).unwrap();
            let ratio = eta_lipschitz_ratio(&p, &base_path, &g, 1.0).unwrap();
            let dist = ratio * p.max_abs_diff(&base_path);
            assert!(dist < prev);
            assert!(ratio < 2.0 + 2.0 * g.half_width * 2.0);
            prev = dist;
        }
    }

    proptest! {
        #[test]
        fn dp_matches_lattice_oracle(c in proptest::collection::vec(-1.0f64..1.0, 1..30), m in 1usize..8) {
            let exact = lipschitz_box_sup(&c, 1.0 / m as f64);
            let oracle = lattice_oracle(&c, m);
            prop_assert!((exact - oracle).abs() < 1e-10, "{exact} vs {oracle}");
        }

        #[test]
        fn rho_is_a_metric(a in proptest::collection::vec(-2.0f64..2.0, 17),
                           b in proptest::collection::vec(-2.0f64..2.0, 17),
                           c in proptest::collection::vec(-2.0f64..2.0, 17)) {
            let g = grid();
            let (a, b, c) = (MeasureFrame::new(a), MeasureFrame::new(b), MeasureFrame::new(c));
            let ab = rho_beta(&a, &b, &g, 0.5).unwrap();
            let ba = rho_beta(&b, &a, &g, 0.5).unwrap();
            let bc = rho_beta(&b, &c, &g, 0.5).unwrap();
            let ac = rho_beta(&a, &c, &g, 0.5).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn xi_ignores_constants(v in proptest::collection::vec(-5.0f64..5.0, 17), c in -3.0f64..3.0) {
            let g = grid();
            let f = Field::new(v.clone()).unwrap();
            let fc = Field::new(v.iter().map(|x| x + c).collect()).unwrap();
            let a = field_to_measure(&f, &g).unwrap();
            let b = field_to_measure(&fc, &g).unwrap();
            for (x, y) in a.density().iter().zip(b.density()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
