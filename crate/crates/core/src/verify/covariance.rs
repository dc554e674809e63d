//! Covariance of the Gaussian limit of the fluctuation field,
//! `Cov(t, y1, y2) = int_0^t ds int_U K_s(a, y1) K_s(a, y2) lambda(da)` with
//! `K_s(a, y) = int p_{t-s}(y - x) G(a, x, u0_s(x)) dx`,
//! by deterministic quadrature in the continuum.
//!
//! `u0_s` is the whole-line heat flow of the piecewise-linear interpolant of
//! the initial condition, continued by constants outside the window, and is
//! evaluated in closed form. For the two population models `G` is an
//! indicator of `{a < u0_s(x)}` and the mark integral is done exactly by the
//! substitution `a = u0_s(x)`.

use crate::error::{invalid, Result};
use crate::grid::Grid;
use crate::models::{normal_cdf, Coefficient, ModelSpec};

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `int_{-inf}^w Phi`.
fn psi(w: f64) -> f64 {
    w * normal_cdf(w) + normal_pdf(w)
}

/// Heat flow of a piecewise-linear, edge-continued initial condition.
#[derive(Debug, Clone)]
pub struct ContinuumFlow {
    lo: f64,
    dx: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

const REACH: f64 = 10.0;

impl ContinuumFlow {
    pub fn new(grid: &Grid, values: &[f64]) -> Self {
        let dx = grid.dx();
        Self {
            lo: -grid.half_width,
            dx,
            values: values.to_vec(),
            slopes: values.windows(2).map(|w| (w[1] - w[0]) / dx).collect(),
        }
    }

    fn cells_near(&self, x: f64, sigma: f64) -> (usize, usize) {
        let n = self.slopes.len() as isize;
        let a = ((x - REACH * sigma - self.lo) / self.dx).floor() as isize - 1;
        let b = ((x + REACH * sigma - self.lo) / self.dx).ceil() as isize + 1;
        (a.clamp(0, n) as usize, b.clamp(0, n) as usize)
    }

    fn edge(&self, c: usize) -> f64 {
        self.lo + c as f64 * self.dx
    }

    /// `u0_s(x)`.
    pub fn value(&self, s: f64, x: f64) -> f64 {
        if s <= 0.0 {
            let p = ((x - self.lo) / self.dx).clamp(0.0, self.slopes.len() as f64);
            let c = (p.floor() as usize).min(self.slopes.len() - 1);
            return self.values[c] + (p - c as f64) * (self.values[c + 1] - self.values[c]);
        }
        let sigma = s.sqrt();
        let (a, b) = self.cells_near(x, sigma);
        let mut u = self.values[a];
        for c in a..b {
            let w0 = (x - self.edge(c)) / sigma;
            let w1 = (x - self.edge(c + 1)) / sigma;
            u += self.slopes[c] * sigma * (psi(w0) - psi(w1));
        }
        u
    }

    /// `d/dx u0_s(x)`.
    pub fn density(&self, s: f64, x: f64) -> f64 {
        let sigma = s.sqrt();
        let (a, b) = self.cells_near(x, sigma);
        (a..b)
            .map(|c| {
                let w0 = (x - self.edge(c)) / sigma;
                let w1 = (x - self.edge(c + 1)) / sigma;
                self.slopes[c] * (normal_cdf(w0) - normal_cdf(w1))
            })
            .sum()
    }

    fn left(&self) -> f64 {
        self.values[0]
    }

    fn right(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// Resolution of the covariance quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceQuadrature {
    /// Uniform midpoint panels in `s`.
    pub time_panels: usize,
    /// Geometric slices the last panel is split into.
    pub geometric_slices: usize,
    /// Spatial step of the `x` integral.
    pub x_step: f64,
    /// Mark midpoints for generic coefficients.
    pub marks: usize,
}

impl Default for CovarianceQuadrature {
    fn default() -> Self {
        Self {
            time_panels: 64,
            geometric_slices: 8,
            x_step: 0.01,
            marks: 400,
        }
    }
}

/// Nodes and weights in `s` on `[0, t]`; the piece touching `s = t` is
/// integrated as `c (t - s)^{-1/2}`.
fn time_nodes(t: f64, q: &CovarianceQuadrature) -> Vec<(f64, f64)> {
    let h = t / q.time_panels as f64;
    let mut out: Vec<(f64, f64)> = (0..q.time_panels - 1).map(|k| ((k as f64 + 0.5) * h, h)).collect();
    let mut width = h;
    for _ in 0..q.geometric_slices {
        let lo = t - width;
        width *= 0.5;
        let hi = t - width;
        out.push((0.5 * (lo + hi), hi - lo));
    }
    out.push((t - 0.5 * width, width * std::f64::consts::SQRT_2));
    out
}

fn x_nodes(lo: f64, hi: f64, step: f64) -> (Vec<f64>, f64) {
    let n = ((hi - lo) / step).ceil().max(1.0) as usize;
    let h = (hi - lo) / n as f64;
    ((0..n).map(|i| lo + (i as f64 + 0.5) * h).collect(), h)
}

/// Limit covariance matrix `C[p][q] = Cov(t, ys[p], ys[q])`.
pub fn gaussian_limit_covariance_matrix(
    model: &ModelSpec,
    grid: &Grid,
    t: f64,
    ys: &[f64],
    q: &CovarianceQuadrature,
) -> Result<Vec<Vec<f64>>> {
    if !(t > 0.0 && t <= grid.horizon + 1e-12) {
        return Err(invalid("t", format!("need 0 < t <= T, got {t}")));
    }
    grid.check_field(model.initial.len(), "initial condition")?;
    let flow = ContinuumFlow::new(grid, model.initial.values());
    let np = ys.len();
    let mut cov = vec![vec![0.0; np]; np];
    if let Coefficient::Zero = model.coefficient {
        return Ok(cov);
    }
    let ut: Vec<f64> = ys.iter().map(|&y| flow.value(t, y)).collect();
    for (s, ds) in time_nodes(t, q) {
        let r = t - s;
        let sr = r.sqrt();
        let spread = REACH * (s.sqrt() + sr);
        match &model.coefficient {
            Coefficient::Sbm | Coefficient::Fvp => {
                let fvp = matches!(model.coefficient, Coefficient::Fvp);
                let (xs, h) = x_nodes(-grid.half_width - spread, grid.half_width + spread, q.x_step);
                let mut k = vec![0.0; np];
                for &x in &xs {
                    let m = flow.density(s, x);
                    if m == 0.0 {
                        continue;
                    }
                    let a = flow.value(s, x);
                    for (p, &y) in ys.iter().enumerate() {
                        let phi = normal_cdf((y - x) / sr);
                        k[p] = if fvp {
                            phi - ut[p]
                        } else if a > 0.0 {
                            phi
                        } else {
                            1.0 - phi
                        };
                    }
                    for p in 0..np {
                        for l in p..np {
                            cov[p][l] += ds * h * m * k[p] * k[l];
                        }
                    }
                }
                if fvp {
                    // marks outside the range of u0, where G does not depend on x
                    let below = flow.left().max(0.0);
                    let above = (1.0 - flow.right()).max(0.0);
                    for p in 0..np {
                        for l in p..np {
                            cov[p][l] += ds * (below * (1.0 - ut[p]) * (1.0 - ut[l]) + above * ut[p] * ut[l]);
                        }
                    }
                }
            }
            Coefficient::SpatialWhite(amp) => {
                // p_r(y1 - x) p_r(y2 - x) = p_{2r}(y1 - y2) p_{r/2}(x - (y1 + y2)/2)
                let half = (0.5 * r).sqrt();
                for p in 0..np {
                    for l in p..np {
                        let mid = 0.5 * (ys[p] + ys[l]);
                        let d = ys[p] - ys[l];
                        let outer = normal_pdf(d / (2.0 * r).sqrt()) / (2.0 * r).sqrt();
                        let (xs, h) = x_nodes(mid - REACH * half, mid + REACH * half, q.x_step.min(half / 4.0));
                        let inner: f64 = xs
                            .iter()
                            .map(|&x| {
                                let g = amp(x, flow.value(s, x));
                                let w = normal_cdf((x + 0.5 * h - mid) / half) - normal_cdf((x - 0.5 * h - mid) / half);
                                g * g * w
                            })
                            .sum();
                        cov[p][l] += ds * outer * inner;
                    }
                }
            }
            Coefficient::Function(g) => {
                let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min) - REACH * sr;
                let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + REACH * sr;
                let (xs, h) = x_nodes(lo, hi, q.x_step.min(sr / 4.0));
                let us: Vec<f64> = xs.iter().map(|&x| flow.value(s, x)).collect();
                let lam = (model.marks.1 - model.marks.0) / q.marks as f64;
                let weights: Vec<Vec<f64>> = ys
                    .iter()
                    .map(|&y| {
                        xs.iter()
                            .map(|&x| normal_cdf((x + 0.5 * h - y) / sr) - normal_cdf((x - 0.5 * h - y) / sr))
                            .collect()
                    })
                    .collect();
                for j in 0..q.marks {
                    let a = model.marks.0 + (j as f64 + 0.5) * lam;
                    let gv: Vec<f64> = xs.iter().zip(&us).map(|(&x, &u)| g(a, x, u)).collect();
                    let k: Vec<f64> = weights
                        .iter()
                        .map(|w| w.iter().zip(&gv).map(|(a, b)| a * b).sum())
                        .collect();
                    for p in 0..np {
                        for l in p..np {
                            cov[p][l] += ds * lam * k[p] * k[l];
                        }
                    }
                }
            }
            Coefficient::Zero => {}
        }
    }
    for p in 0..np {
        for l in 0..p {
            cov[p][l] = cov[l][p];
        }
    }
    Ok(cov)
}

/// `Cov(v_t(y1), v_t(y2))` of the Gaussian limit.
pub fn gaussian_limit_covariance(model: &ModelSpec, grid: &Grid, t: f64, y1: f64, y2: f64) -> Result<f64> {
    let c = gaussian_limit_covariance_matrix(model, grid, t, &[y1, y2], &CovarianceQuadrature::default())?;
    Ok(c[0][1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, Grid};
    use crate::models::InitialPreset;
    use std::sync::Arc;

    #[test]
    fn flow_matches_closed_forms() {
        let g = Grid::new(8.0, 400, 1.0, 10).unwrap();
        let lin = Field::from_fn(&g, |y| y).unwrap();
        let f = ContinuumFlow::new(&g, lin.values());
        for &x in &[-2.0, 0.0, 1.3] {
            assert!((f.value(0.5, x) - x).abs() < 1e-12);
            assert!((f.density(0.5, x) - 1.0).abs() < 1e-12);
        }
        let cdf = Field::from_fn(&g, normal_cdf).unwrap();
        let f = ContinuumFlow::new(&g, cdf.values());
        for &x in &[-1.0, 0.0, 0.7] {
            // Phi flows to the N(0, 1 + s) distribution function
            assert!((f.value(1.0, x) - normal_cdf(x / 2f64.sqrt())).abs() < 1e-4);
            assert!((f.density(1.0, x) - normal_pdf(x / 2f64.sqrt()) / 2f64.sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn white_toy_closed_form() {
        let g = Grid::new(8.0, 160, 1.0, 10).unwrap();
        let toy = ModelSpec::custom(
            Coefficient::SpatialWhite(Arc::new(|_, _| 0.5)),
            (0.0, 1.0),
            Field::zeros(g.len()),
            1e-4,
            0.25,
        )
        .unwrap();
        let v = gaussian_limit_covariance(&toy, &g, 1.0, 0.0, 0.0).unwrap();
        let exact = 1.0 / (4.0 * std::f64::consts::PI.sqrt());
        assert!((v / exact - 1.0).abs() < 0.005, "{v} vs {exact}");
    }

    #[test]
    fn zero_and_symmetry() {
        let g = Grid::new(6.0, 120, 1.0, 10).unwrap();
        let z = ModelSpec::custom(Coefficient::Zero, (0.0, 1.0), Field::zeros(g.len()), 1e-3, 0.25).unwrap();
        assert_eq!(gaussian_limit_covariance(&z, &g, 1.0, 0.0, 0.5).unwrap(), 0.0);
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let a = gaussian_limit_covariance(&m, &g, 1.0, -0.3, 0.8).unwrap();
        let b = gaussian_limit_covariance(&m, &g, 1.0, 0.8, -0.3).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn substitution_matches_generic_quadrature() {
        let g = Grid::new(6.0, 120, 1.0, 10).unwrap();
        let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let generic = ModelSpec::custom(
            Coefficient::Function(Arc::new(|a, _y, u: f64| {
                let u = u.clamp(0.0, 1.0);
                (if a < u { 1.0 } else { 0.0 }) - u
            })),
            (0.0, 1.0),
            fvp.initial.clone(),
            1e-3,
            0.25,
        )
        .unwrap();
        let q = CovarianceQuadrature::default();
        let ys = [-0.5, 0.0, 1.0];
        let a = gaussian_limit_covariance_matrix(&fvp, &g, 1.0, &ys, &q).unwrap();
        let b = gaussian_limit_covariance_matrix(&generic, &g, 1.0, &ys, &q).unwrap();
        for p in 0..3 {
            for l in 0..3 {
                assert!((a[p][l] - b[p][l]).abs() < 0.01 * a[p][p], "{p}{l}: {} vs {}", a[p][l], b[p][l]);
            }
        }
    }
}
