//! Coefficient data `(G, U, lambda, F)` of the small-noise SPDE
//! `u = F + sqrt(eps) int int G(a, y, u) W(ds da) + int 1/2 Delta u ds`,
//! with the super-Brownian and Fleming-Viot instances.
//!
//! Mark-space integrals are discretized with the cell average of `G` over
//! each mark cell. For the two population models this is exact: the
//! indicator `G` integrates in closed form over a cell, so
//! `sum_j Gbar_j z_j` is the integral of `G` against the piecewise-constant
//! density `z_j / lambda_j`.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::{Field, FieldPath, Grid, HeatPropagator, Padding, WeightParams};
use crate::noise::MarkGrid;

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sbm,
    Fvp,
    Custom,
}

/// Where the distribution function is anchored: `F(y) = mu((0, y])` for
/// super-Brownian motion, `F(y) = mu((-inf, y])` for Fleming-Viot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    Origin,
    MinusInfinity,
}

pub type CoefficientFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type AmplitudeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// The noise coefficient `G(a, y, u)`.
#[derive(Clone)]
pub enum Coefficient {
    /// `1_{0 <= a <= u} + 1_{u <= a <= 0}` on `U = [-A, A]`.
    Sbm,
    /// `1_{a < u} - u` on `U = [0, 1]`.
    Fvp,
    /// A user function, integrated by the midpoint rule on mark cells.
    Function(CoefficientFn),
    /// `amplitude(y, u)` times a unit point mass at `a = y`: marks are
    /// spatial positions and the noise is white in space and time.
    SpatialWhite(AmplitudeFn),
    Zero,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Sbm => write!(f, "Sbm"),
            Coefficient::Fvp => write!(f, "Fvp"),
            Coefficient::Function(_) => write!(f, "Function(..)"),
            Coefficient::SpatialWhite(_) => write!(f, "SpatialWhite(..)"),
            Coefficient::Zero => write!(f, "Zero"),
        }
    }
}

/// Named initial distribution functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPreset {
    LebesgueCdf,
    GaussianCdf,
    PointMassCdf,
    Uniform01Cdf,
}

impl InitialPreset {
    pub fn field(self, grid: &Grid, anchor: Anchor) -> Result<Field> {
        let f: Box<dyn Fn(f64) -> f64> = match (self, anchor) {
            (InitialPreset::LebesgueCdf, Anchor::Origin) => Box::new(|y| y),
            (InitialPreset::LebesgueCdf, Anchor::MinusInfinity) => {
                return Err(invalid(
                    "initial",
                    "Lebesgue measure has no distribution function anchored at -infinity",
                ))
            }
            (InitialPreset::GaussianCdf, Anchor::Origin) => Box::new(|y| normal_cdf(y) - 0.5),
            (InitialPreset::GaussianCdf, Anchor::MinusInfinity) => Box::new(normal_cdf),
            (InitialPreset::PointMassCdf, _) => Box::new(|y| if y >= 0.0 { 1.0 } else { 0.0 }),
            (InitialPreset::Uniform01Cdf, _) => Box::new(|y: f64| y.clamp(0.0, 1.0)),
        };
        Field::from_fn(grid, f)
    }
}

/// A population model: coefficient, mark space, initial condition and
/// noise scaling `eps`, `a(eps) = eps^kappa`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub coefficient: Coefficient,
    /// Mark interval `U`; ignored for [`Coefficient::SpatialWhite`].
    pub marks: (f64, f64),
    pub initial: Field,
    pub epsilon: f64,
    pub kappa: f64,
    pub anchor: Anchor,
    /// Exponent in the growth bound `K(1 + v^2 + e^{2 beta0 |y|})`.
    pub beta0: f64,
    /// Declared constant `K` of the modulus and growth conditions.
    pub declared_k: f64,
}

/// Extra room in the super-Brownian mark interval beyond `2 max |F|`.
pub const SBM_MARK_MARGIN: f64 = 0.0;

impl ModelSpec {
    pub fn sbm(grid: &Grid, preset: InitialPreset, epsilon: f64, kappa: f64) -> Result<Self> {
        Self::sbm_with_initial(preset.field(grid, Anchor::Origin)?, epsilon, kappa)
    }

    /// Super-Brownian model for a given distribution function anchored at
    /// the origin.
    pub fn sbm_with_initial(initial: Field, epsilon: f64, kappa: f64) -> Result<Self> {
        let reach = initial.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let a = 2.0 * reach + SBM_MARK_MARGIN;
        Self::build(ModelKind::Sbm, Coefficient::Sbm, (-a, a), initial, epsilon, kappa, Anchor::Origin)
    }

    pub fn fvp(grid: &Grid, preset: InitialPreset, epsilon: f64, kappa: f64) -> Result<Self> {
        Self::fvp_with_initial(preset.field(grid, Anchor::MinusInfinity)?, epsilon, kappa)
    }

    pub fn fvp_with_initial(initial: Field, epsilon: f64, kappa: f64) -> Result<Self> {
        Self::build(
            ModelKind::Fvp,
            Coefficient::Fvp,
            (0.0, 1.0),
            initial,
            epsilon,
            kappa,
            Anchor::MinusInfinity,
        )
    }

    pub fn custom(
        coefficient: Coefficient,
        marks: (f64, f64),
        initial: Field,
        epsilon: f64,
        kappa: f64,
    ) -> Result<Self> {
        Self::build(
            ModelKind::Custom,
            coefficient,
            marks,
            initial,
            epsilon,
            kappa,
            Anchor::MinusInfinity,
        )
    }

    fn build(
        kind: ModelKind,
        coefficient: Coefficient,
        marks: (f64, f64),
        initial: Field,
        epsilon: f64,
        kappa: f64,
        anchor: Anchor,
    ) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be >= 0, got {epsilon}")));
        }
        if !(kappa > 0.0 && kappa < 0.5) {
            return Err(invalid("kappa", format!("need 0 < kappa < 1/2, got {kappa}")));
        }
        if !(marks.1 > marks.0) {
            return Err(invalid("marks", "mark interval must have positive length"));
        }
        let spec = Self {
            kind,
            coefficient,
            marks,
            initial,
            epsilon,
            kappa,
            anchor,
            beta0: WeightParams::default().beta0,
            declared_k: 1.0,
        };
        spec.validate_initial()?;
        Ok(spec)
    }

    fn validate_initial(&self) -> Result<()> {
        let f = self.initial.values();
        let monotone = f.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        match self.kind {
            ModelKind::Fvp => {
                if !monotone || f.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
                    return Err(invalid("initial", "Fleming-Viot F must be a distribution function in [0, 1]"));
                }
            }
            ModelKind::Sbm => {
                if !monotone {
                    return Err(invalid("initial", "super-Brownian F must be non-decreasing"));
                }
            }
            ModelKind::Custom => {}
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut s = self.clone();
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be >= 0, got {epsilon}")));
        }
        s.epsilon = epsilon;
        Ok(s)
    }

    /// Moderate-deviation speed `a(eps) = eps^kappa`.
    pub fn a_eps(&self) -> f64 {
        self.epsilon.powf(self.kappa)
    }

    /// `sqrt(eps) / a(eps) = eps^{1/2 - kappa}`, the map from `v` back to
    /// the state perturbation.
    pub fn state_scale(&self) -> f64 {
        if self.epsilon == 0.0 {
            0.0
        } else {
            self.epsilon.powf(0.5 - self.kappa)
        }
    }

    /// Prefactor `a(eps) / sqrt(eps)` of the centered process.
    pub fn center_factor(&self) -> f64 {
        self.epsilon.powf(self.kappa - 0.5)
    }

    /// Discretization of `U` into `na` cells; for spatial white noise one
    /// cell per grid node.
    pub fn mark_grid(&self, grid: &Grid, na: usize) -> Result<MarkGrid> {
        match self.coefficient {
            Coefficient::SpatialWhite(_) => {
                let h = 0.5 * grid.dx();
                MarkGrid::new(-grid.half_width - h, grid.half_width + h, grid.len())
            }
            _ => MarkGrid::new(self.marks.0, self.marks.1, na),
        }
    }

    fn clamp_state(&self, u: f64) -> f64 {
        match self.kind {
            ModelKind::Fvp => u.clamp(0.0, 1.0),
            _ => u,
        }
    }

    /// Pointwise `G(a, y, u)`.
    pub fn evaluate_g(&self, a: f64, y: f64, u: f64) -> Result<f64> {
        if a < self.marks.0 || a > self.marks.1 {
            return Err(invalid("a", format!("mark {a} outside U = [{}, {}]", self.marks.0, self.marks.1)));
        }
        Ok(match &self.coefficient {
            Coefficient::Sbm => {
                if (0.0 <= a && a <= u) || (u <= a && a <= 0.0) {
                    1.0
                } else {
                    0.0
                }
            }
            Coefficient::Fvp => {
                let u = self.clamp_state(u);
                (if a < u { 1.0 } else { 0.0 }) - u
            }
            Coefficient::Function(g) => g(a, y, u),
            Coefficient::SpatialWhite(_) => {
                return Err(invalid("coefficient", "spatial white noise has no pointwise G"))
            }
            Coefficient::Zero => 0.0,
        })
    }

    /// Cell-averaged coefficient `Gbar_j` at node `i` (position `y`) and
    /// state `u`.
    pub fn cell_coefficient(&self, marks: &MarkGrid, j: usize, i: usize, y: f64, u: f64) -> f64 {
        let lam = marks.width();
        let (lo, hi) = (marks.edge(j), marks.edge(j + 1));
        let overlap = |a: f64, b: f64| (hi.min(b) - lo.max(a)).max(0.0);
        match &self.coefficient {
            Coefficient::Sbm => overlap(u.min(0.0), u.max(0.0)) / lam,
            Coefficient::Fvp => {
                let u = self.clamp_state(u);
                overlap(marks.lo, u) / lam - u
            }
            Coefficient::Function(g) => g(marks.midpoint(j), y, u),
            Coefficient::SpatialWhite(amp) => {
                if i == j {
                    amp(y, u) / (hi - lo)
                } else {
                    0.0
                }
            }
            Coefficient::Zero => 0.0,
        }
    }

    /// `out_i = sum_j Gbar_j(y_i, u_i) z_j` for per-cell weights `z`.
    pub fn apply_cells(&self, grid: &Grid, marks: &MarkGrid, states: &[f64], z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), marks.n);
        match &self.coefficient {
            Coefficient::Sbm => {
                let b = CumulativeMarks::new(marks, z);
                let b0 = b.at(0.0);
                for (o, &u) in out.iter_mut().zip(states) {
                    *o = if u < 0.0 { b0 - b.at(u) } else { b.at(u) - b0 };
                }
            }
            Coefficient::Fvp => {
                let b = CumulativeMarks::new(marks, z);
                let total = b.at(marks.hi);
                for (o, &u) in out.iter_mut().zip(states) {
                    let u = u.clamp(0.0, 1.0);
                    *o = b.at(u) - u * total;
                }
            }
            Coefficient::Function(g) => {
                for (i, (o, &u)) in out.iter_mut().zip(states).enumerate() {
                    let y = grid.node(i);
                    *o = z
                        .iter()
                        .enumerate()
                        .map(|(j, zj)| g(marks.midpoint(j), y, u) * zj)
                        .sum();
                }
            }
            Coefficient::SpatialWhite(amp) => {
                let lam = marks.width();
                for (i, (o, &u)) in out.iter_mut().zip(states).enumerate() {
                    *o = amp(grid.node(i), u) / lam * z[i];
                }
            }
            Coefficient::Zero => out.fill(0.0),
        }
    }

    /// Transpose of [`apply_cells`](Self::apply_cells):
    /// `out_j = sum_i Gbar_j(y_i, u_i) g_i`.
    pub fn apply_cells_transpose(&self, grid: &Grid, marks: &MarkGrid, states: &[f64], g: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match &self.coefficient {
            Coefficient::SpatialWhite(amp) => {
                let lam = marks.width();
                for (i, &u) in states.iter().enumerate() {
                    out[i] = amp(grid.node(i), u) / lam * g[i];
                }
            }
            Coefficient::Zero => {}
            _ => {
                for (i, (&u, &gi)) in states.iter().zip(g).enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let y = grid.node(i);
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += self.cell_coefficient(marks, j, i, y, u) * gi;
                    }
                }
            }
        }
    }

    /// `int_U |G(a, y, u1) - G(a, y, u2)|^2 lambda(da)`.
    pub fn g_l2_modulus(&self, y: f64, u1: f64, u2: f64) -> Result<f64> {
        match &self.coefficient {
            Coefficient::Sbm => {
                self.check_truncation(u1)?;
                self.check_truncation(u2)?;
                Ok((u1 - u2).abs())
            }
            Coefficient::Fvp => {
                let d = self.clamp_state(u1) - self.clamp_state(u2);
                Ok(d.abs() - d * d)
            }
            Coefficient::Zero => Ok(0.0),
            Coefficient::SpatialWhite(_) => Err(invalid("coefficient", "spatial white noise is not square integrable in a")),
            Coefficient::Function(g) => Ok(self.midpoint_quadrature(|a| {
                let d = g(a, y, u1) - g(a, y, u2);
                d * d
            })),
        }
    }

    /// `int_U |G(a, y, u)|^2 lambda(da)`.
    pub fn g_l2_bound(&self, y: f64, u: f64) -> Result<f64> {
        match &self.coefficient {
            Coefficient::Sbm => {
                self.check_truncation(u)?;
                Ok(u.abs())
            }
            Coefficient::Fvp => {
                let u = self.clamp_state(u);
                Ok(u * (1.0 - u))
            }
            Coefficient::Zero => Ok(0.0),
            Coefficient::SpatialWhite(_) => Err(invalid("coefficient", "spatial white noise is not square integrable in a")),
            Coefficient::Function(g) => Ok(self.midpoint_quadrature(|a| {
                let v = g(a, y, u);
                v * v
            })),
        }
    }

    fn midpoint_quadrature(&self, f: impl Fn(f64) -> f64) -> f64 {
        let marks = MarkGrid::new(self.marks.0, self.marks.1, DEFAULT_CUSTOM_MARKS).expect("validated marks");
        (0..marks.n).map(|j| f(marks.midpoint(j))).sum::<f64>() * marks.width()
    }

    fn check_truncation(&self, u: f64) -> Result<()> {
        let bound = self.marks.1.min(-self.marks.0);
        if u.abs() > bound {
            return Err(LabError::TruncationBreach { value: u.abs(), bound });
        }
        Ok(())
    }

    /// Sampling range of states for condition sweeps.
    fn state_range(&self) -> (f64, f64) {
        match self.kind {
            ModelKind::Fvp => (0.0, 1.0),
            ModelKind::Sbm => {
                let a = self.marks.1.min(-self.marks.0);
                (-a, a)
            }
            ModelKind::Custom => (-1.0, 1.0),
        }
    }
}

/// Mark cells used for quadrature of custom coefficients.
pub const DEFAULT_CUSTOM_MARKS: usize = 256;

/// Piecewise-linear cumulative `B(a) = int_lo^a z(a') da'` of cell weights.
struct CumulativeMarks<'a> {
    marks: &'a MarkGrid,
    prefix: Vec<f64>,
    z: &'a [f64],
}

impl<'a> CumulativeMarks<'a> {
    fn new(marks: &'a MarkGrid, z: &'a [f64]) -> Self {
        let mut prefix = Vec::with_capacity(z.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for v in z {
            acc += v;
            prefix.push(acc);
        }
        Self { marks, prefix, z }
    }

    fn at(&self, a: f64) -> f64 {
        let s = ((a - self.marks.lo) / self.marks.width()).clamp(0.0, self.marks.n as f64);
        let j = (s.floor() as usize).min(self.marks.n - 1);
        self.prefix[j] + (s - j as f64) * self.z[j]
    }
}

/// Heat flow of `F`: the `eps = 0` solution, frame `k` is `P^k F`.
pub fn deterministic_flow(model: &ModelSpec, grid: &Grid) -> Result<FieldPath> {
    grid.check_field(model.initial.len(), "initial condition")?;
    let p = HeatPropagator::for_grid(grid, Padding::Edge);
    let mut frames = Vec::with_capacity(grid.nt + 1);
    frames.push(model.initial.clone());
    for k in 0..grid.nt {
        let next = p.apply_vec(frames[k].values());
        frames.push(Field::from_vec_unchecked(next));
    }
    FieldPath::new(frames)
}

/// Worst observed ratios in the modulus and growth conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub max_modulus_ratio: f64,
    pub max_growth_ratio: f64,
    pub samples: usize,
    pub declared_k: f64,
    pub within_declared: bool,
}

/// Monte Carlo sweep of `(y, u1, u2)` over the window and the admissible
/// state range.
pub fn check_conditions(model: &ModelSpec, grid: &Grid, sample_count: usize, seed: u64) -> Result<ConditionReport> {
    if sample_count == 0 {
        return Err(invalid("sample_count", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let (lo, hi) = model.state_range();
    let mut modulus = 0.0_f64;
    let mut growth = 0.0_f64;
    for _ in 0..sample_count {
        let y = -grid.half_width + 2.0 * grid.half_width * unif();
        let u1 = lo + (hi - lo) * unif();
        let u2 = lo + (hi - lo) * unif();
        if u1 != u2 {
            modulus = modulus.max(model.g_l2_modulus(y, u1, u2)? / (u1 - u2).abs());
        }
        let bound = 1.0 + u1 * u1 + (2.0 * model.beta0 * y.abs()).exp();
        growth = growth.max(model.g_l2_bound(y, u1)? / bound);
    }
    Ok(ConditionReport {
        max_modulus_ratio: modulus,
        max_growth_ratio: growth,
        samples: sample_count,
        declared_k: model.declared_k,
        within_declared: modulus <= model.declared_k * (1.0 + 1e-12) && growth <= model.declared_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Grid {
        Grid::new(10.0, 200, 1.0, 100).unwrap()
    }

    #[test]
    fn evaluate_g_examples() {
        let g = grid();
        let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        assert_eq!(sbm.evaluate_g(0.5, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(sbm.evaluate_g(-0.5, 0.0, -1.0).unwrap(), 1.0);
        assert_eq!(sbm.evaluate_g(0.5, 0.0, -1.0).unwrap(), 0.0);
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        assert_eq!(fvp.evaluate_g(0.2, 0.0, 0.5).unwrap(), 0.5);
        assert!(fvp.evaluate_g(1.5, 0.0, 0.5).is_err());
    }

    #[test]
    fn modulus_and_bound_examples() {
        let g = grid();
        let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        assert!((sbm.g_l2_modulus(0.0, 0.3, 0.7).unwrap() - 0.4).abs() < 1e-15);
        assert!((fvp.g_l2_modulus(0.0, 0.3, 0.7).unwrap() - 0.24).abs() < 1e-15);
        assert_eq!(sbm.g_l2_modulus(0.0, 0.3, 0.3).unwrap(), 0.0);
        assert_eq!(fvp.g_l2_bound(0.0, 0.5).unwrap(), 0.25);
        assert_eq!(fvp.g_l2_bound(0.0, 0.0).unwrap(), 0.0);
        assert!(sbm.g_l2_bound(0.0, 5.0).is_err());
        let wide = ModelSpec::sbm(&g, InitialPreset::LebesgueCdf, 1e-3, 0.25).unwrap();
        assert_eq!(wide.g_l2_bound(0.0, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn custom_quadrature_matches_closed_form() {
        let g = grid();
        let fvp_like = ModelSpec::custom(
            Coefficient::Function(Arc::new(|a, _y, u| (if a < u { 1.0 } else { 0.0 }) - u)),
            (0.0, 1.0),
            Field::zeros(g.len()),
            1e-3,
            0.25,
        )
        .unwrap();
        let exact = 0.4 - 0.16;
        assert!((fvp_like.g_l2_modulus(0.0, 0.3, 0.7).unwrap() - exact).abs() < 2.0 / 256.0);
    }

    #[test]
    fn cell_coefficients_integrate_exactly() {
        let g = Grid::new(2.0, 8, 1.0, 4).unwrap();
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let marks = fvp.mark_grid(&g, 16).unwrap();
        for &u in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let sq: f64 = (0..16)
                .map(|j| fvp.cell_coefficient(&marks, j, 0, 0.0, u).powi(2) * marks.width())
                .sum();
            // cell averaging only loses the variance inside the one cell containing u
            assert!(sq <= u * (1.0 - u) + 1e-15);
            assert!(u * (1.0 - u) - sq <= marks.width() / 4.0 + 1e-15);
            let mean: f64 = (0..16).map(|j| fvp.cell_coefficient(&marks, j, 0, 0.0, u)).sum();
            assert!(mean.abs() < 1e-13);
        }
    }

    #[test]
    fn fast_apply_matches_cellwise_sum() {
        let g = Grid::new(3.0, 30, 1.0, 4).unwrap();
        let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        for model in [&sbm, &fvp] {
            let marks = model.mark_grid(&g, 13).unwrap();
            let z: Vec<f64> = (0..13).map(|j| ((j * 7919) % 11) as f64 / 5.0 - 1.0).collect();
            let states: Vec<f64> = (0..g.len()).map(|i| model.initial[i] * 1.1 - 0.02).collect();
            let mut fast = vec![0.0; g.len()];
            model.apply_cells(&g, &marks, &states, &z, &mut fast);
            for i in 0..g.len() {
                let slow: f64 = (0..13)
                    .map(|j| model.cell_coefficient(&marks, j, i, g.node(i), states[i]) * z[j])
                    .sum();
                assert!((fast[i] - slow).abs() < 1e-12, "node {i}: {} vs {slow}", fast[i]);
            }
            // transpose identity <A z, g> = <z, A^T g>
            let gvec: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut at = vec![0.0; 13];
            model.apply_cells_transpose(&g, &marks, &states, &gvec, &mut at);
            let lhs: f64 = fast.iter().zip(&gvec).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.iter().zip(&at).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-11);
        }
    }

    #[test]
    fn deterministic_flow_examples() {
        let g = grid();
        let zero = ModelSpec::custom(Coefficient::Zero, (0.0, 1.0), Field::zeros(g.len()), 0.0, 0.25).unwrap();
        let flow = deterministic_flow(&zero, &g).unwrap();
        assert!(flow.frames().iter().all(|f| f.values().iter().all(|v| *v == 0.0)));

        let leb = ModelSpec::sbm(&g, InitialPreset::LebesgueCdf, 0.0, 0.25).unwrap();
        let flow = deterministic_flow(&leb, &g).unwrap();
        assert_eq!(flow.frame(0), &leb.initial);
        for f in flow.frames() {
            for i in g.interior(4.0) {
                assert!((f[i] - g.node(i)).abs() < 1e-6);
            }
        }

        let pm = ModelSpec::fvp(&g, InitialPreset::PointMassCdf, 0.0, 0.25).unwrap();
        let flow = deterministic_flow(&pm, &g).unwrap();
        for k in [10, 50, 100] {
            let t = g.time(k);
            for i in g.interior(6.0) {
                // the node at 0 carries F(0) = 1, i.e. the cdf evaluated half a cell later
                let y = g.node(i) + 0.5 * g.dx();
                assert!((flow.value(k, i) - normal_cdf(y / t.sqrt())).abs() < g.dx());
            }
        }
        for f in flow.frames() {
            assert!(f.values().windows(2).all(|w| w[1] >= w[0] - 1e-15));
            assert!(f.values().iter().all(|v| (0.0..=1.0 + 1e-15).contains(v)));
        }
    }

    #[test]
    fn condition_sweeps() {
        let g = grid();
        let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let rep = check_conditions(&sbm, &g, 10_000, 1).unwrap();
        assert!((rep.max_modulus_ratio - 1.0).abs() < 1e-12);
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let rep = check_conditions(&fvp, &g, 10_000, 1).unwrap();
        assert!(rep.max_modulus_ratio <= 1.0);
        assert!(rep.within_declared);
        let lipschitz = ModelSpec::custom(
            Coefficient::Function(Arc::new(|a, _y, u| (a * u).sin())),
            (0.0, 1.0),
            Field::zeros(g.len()),
            1e-3,
            0.25,
        )
        .unwrap();
        let rep = check_conditions(&lipschitz, &g, 2_000, 3).unwrap();
        assert!(rep.max_growth_ratio.is_finite() && rep.max_growth_ratio > 0.0);
    }

    #[test]
    fn kappa_and_scales() {
        let g = grid();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-4, 0.25).unwrap();
        assert!((m.center_factor() - 10.0).abs() < 1e-9);
        assert!((m.state_scale() * m.center_factor() - 1.0).abs() < 1e-12);
        assert!(ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-4, 0.5).is_err());
        assert!(ModelSpec::fvp(&g, InitialPreset::LebesgueCdf, 1e-4, 0.25).is_err());
    }

    proptest! {
        #[test]
        fn sbm_modulus_identity(u1 in -0.95f64..0.95, u2 in -0.95f64..0.95) {
            let g = Grid::new(2.0, 8, 1.0, 4).unwrap();
            let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
            prop_assert!((sbm.g_l2_modulus(0.0, u1, u2).unwrap() - (u1 - u2).abs()).abs() < 1e-15);
        }

        #[test]
        fn fvp_bound_peaks_at_half(u in 0.0f64..1.0) {
            let g = Grid::new(2.0, 8, 1.0, 4).unwrap();
            let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
            prop_assert!(fvp.g_l2_bound(0.0, u).unwrap() <= 0.25);
        }
    }
}
