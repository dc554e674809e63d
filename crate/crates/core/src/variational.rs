//! The skeleton equation `v = gamma(h)` obtained by replacing the noise by
//! a control, the quadratic rate functional it induces, and the explicit
//! Radon-Nikodym form of that functional in the measure picture.
//!
//! On the grid `gamma` is the linear recursion
//! `v_{k+1} = P v_k + f_k`, `f_k(y_i) = dt sum_j Gbar_j(y_i, u0_{k+1}(y_i)) h_{k,j} lambda`
//! with `P` edge-padded. Differencing in space turns the edge padding into
//! zero padding, so the measure path `w = xi(v)` satisfies
//! `w_{k+1} = P w_k + xi(f_k)` exactly, which is what the default
//! Radon-Nikodym stencil inverts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::{Field, FieldPath, Grid, HeatPropagator, Padding};
use crate::measures::{lipschitz_box_sup, path_to_measure_path, SignedMeasurePath};
use crate::models::{deterministic_flow, ModelKind, ModelSpec};
use crate::noise::MarkGrid;

/// Relative attainment tolerance of the minimal-norm solve.
pub const DEFAULT_RATE_TOL: f64 = 1e-8;
/// Density floor relative to the frame maximum of `mu0`.
pub const DEFAULT_FLOOR_FRACTION: f64 = 1e-8;

/// `h(s, a)` on the time-by-mark lattice, row-major `(nt, na)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub marks: MarkGrid,
    pub nt: usize,
    pub values: Vec<f64>,
}

impl Control {
    pub fn new(marks: MarkGrid, nt: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nt * marks.n {
            return Err(LabError::ShapeMismatch(format!(
                "control has {} entries, expected {nt} x {}",
                values.len(),
                marks.n
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("control", "entries must be finite"));
        }
        Ok(Self { marks, nt, values })
    }

    pub fn zeros(marks: MarkGrid, nt: usize) -> Self {
        Self {
            marks,
            nt,
            values: vec![0.0; nt * marks.n],
        }
    }

    pub fn from_fn(marks: MarkGrid, grid: &Grid, h: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let dt = grid.dt();
        let mut values = Vec::with_capacity(grid.nt * marks.n);
        for k in 0..grid.nt {
            let s = (k as f64 + 0.5) * dt;
            for j in 0..marks.n {
                values.push(h(s, marks.midpoint(j)));
            }
        }
        Self::new(marks, grid.nt, values)
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k * self.marks.n..(k + 1) * self.marks.n]
    }

    /// `1/2 sum_k sum_j h^2 dt lambda`.
    pub fn energy(&self, dt: f64) -> f64 {
        0.5 * self.values.iter().map(|h| h * h).sum::<f64>() * dt * self.marks.width()
    }

    /// `h - int_U h lambda(da) / lambda(U)` per time step.
    pub fn centered(&self) -> Self {
        let na = self.marks.n;
        let mut values = self.values.clone();
        for row in values.chunks_mut(na) {
            let m = row.iter().sum::<f64>() / na as f64;
            row.iter_mut().for_each(|h| *h -= m);
        }
        Self { values, ..self.clone() }
    }
}

/// Linear map `x -> gamma(x / sqrt(dt lambda))` on scaled controls, so the
/// rate is `|x|^2 / 2`.
struct Skeleton<'a> {
    model: &'a ModelSpec,
    grid: &'a Grid,
    u0: &'a FieldPath,
    marks: MarkGrid,
    heat: HeatPropagator,
    scale: f64,
}

impl<'a> Skeleton<'a> {
    fn new(model: &'a ModelSpec, u0: &'a FieldPath, grid: &'a Grid, marks: MarkGrid) -> Result<Self> {
        u0.check_grid(grid, "deterministic flow")?;
        if let crate::models::Coefficient::SpatialWhite(_) = model.coefficient {
            if marks.n != grid.len() {
                return Err(LabError::ShapeMismatch("spatial white noise needs one mark cell per node".into()));
            }
        }
        Ok(Self {
            model,
            grid,
            u0,
            marks,
            heat: HeatPropagator::for_grid(grid, Padding::Edge),
            scale: (grid.dt() * marks.width()).sqrt(),
        })
    }

    fn rows(&self) -> usize {
        self.grid.nt * self.grid.len()
    }

    fn cols(&self) -> usize {
        self.grid.nt * self.marks.n
    }

    /// Frames `1..=nt` of `gamma`, concatenated.
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        let n = self.grid.len();
        let na = self.marks.n;
        let mut v = vec![0.0; n];
        let mut f = vec![0.0; n];
        for k in 0..self.grid.nt {
            let row = &mut out[k * n..(k + 1) * n];
            self.heat.apply(&v, row);
            self.model
                .apply_cells(self.grid, &self.marks, self.u0.frame(k + 1).values(), &x[k * na..(k + 1) * na], &mut f);
            for (r, fi) in row.iter_mut().zip(&f) {
                *r += self.scale * fi;
            }
            v.copy_from_slice(row);
        }
    }

    /// Increment injected at step `k` by the scaled control `x_k`.
    fn step_forward(&self, k: usize, xk: &[f64], out: &mut [f64]) {
        self.model.apply_cells(self.grid, &self.marks, self.u0.frame(k + 1).values(), xk, out);
        out.iter_mut().for_each(|z| *z *= self.scale);
    }

    fn step_adjoint(&self, k: usize, y: &[f64], out: &mut [f64]) {
        self.model.apply_cells_transpose(self.grid, &self.marks, self.u0.frame(k + 1).values(), y, out);
        out.iter_mut().for_each(|z| *z *= self.scale);
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let n = self.grid.len();
        let na = self.marks.n;
        let mut lam = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for k in (0..self.grid.nt).rev() {
            // lam holds the co-state of frame k + 1
            for (l, yi) in lam.iter_mut().zip(&y[k * n..(k + 1) * n]) {
                *l += yi;
            }
            let g = &mut out[k * na..(k + 1) * na];
            self.model
                .apply_cells_transpose(self.grid, &self.marks, self.u0.frame(k + 1).values(), &lam, g);
            g.iter_mut().for_each(|z| *z *= self.scale);
            self.heat.apply_transpose(&lam, &mut tmp);
            std::mem::swap(&mut lam, &mut tmp);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `gamma(h)`: the controlled heat equation driven by `G(u0) h`.
pub fn solve_controlled(h: &Control, model: &ModelSpec, u0: &FieldPath, grid: &Grid) -> Result<FieldPath> {
    if h.nt != grid.nt {
        return Err(LabError::ShapeMismatch(format!("control has {} steps, grid {}", h.nt, grid.nt)));
    }
    let sk = Skeleton::new(model, u0, grid, h.marks)?;
    let x: Vec<f64> = h.values.iter().map(|v| v * sk.scale).collect();
    let mut out = vec![0.0; sk.rows()];
    sk.forward(&x, &mut out);
    let n = grid.len();
    let mut frames = vec![Field::zeros(n)];
    frames.extend(out.chunks(n).map(|c| Field::from_vec_unchecked(c.to_vec())));
    FieldPath::new(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMethod {
    Variational,
    ClosedFormSbm,
    ClosedFormFvp,
    Hitting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub value: f64,
    /// The target is not attainable on the grid: the rate is `+inf`.
    pub infinite: bool,
    pub residual: f64,
    pub method: RateMethod,
    pub iterations: usize,
    /// Mass of `d omega - 1/2 Delta omega dt` where `mu0` is below the floor.
    pub defect: f64,
    /// Largest `|<mu0_t, rn_t>|` before centering (Fleming-Viot only).
    pub centering_defect: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimizer: Option<Control>,
}

/// Minimal-norm control for `gamma(h) = v`.
///
/// `v_{k+1} - P v_k` is the increment injected at step `k`, so the problem
/// splits into one minimal-norm solve per time step, each done by conjugate
/// gradients on the normal equations started from zero. The residual is
/// measured on the whole path.
pub fn rate_general(v: &FieldPath, model: &ModelSpec, u0: &FieldPath, grid: &Grid, marks: MarkGrid, tol: f64) -> Result<RateReport> {
    v.check_grid(grid, "target path")?;
    if v.frame(0).values().iter().any(|x| *x != 0.0) {
        return Err(invalid("v", "target path must start at zero"));
    }
    let sk = Skeleton::new(model, u0, grid, marks)?;
    let (n, na) = (grid.len(), marks.n);
    let b: Vec<f64> = v.frames()[1..].iter().flat_map(|f| f.values().iter().copied()).collect();
    let w = grid.dx() * grid.dt();
    let path_norm = |r: &[f64]| (dot(r, r) * w).sqrt();
    // relative criteria keep the solution homogeneous in `v`
    let target = tol * path_norm(&b);

    let mut x = vec![0.0; sk.cols()];
    let mut d = vec![0.0; n];
    let (mut r, mut s, mut p, mut q) = (vec![0.0; n], vec![0.0; na], vec![0.0; na], vec![0.0; n]);
    let mut it = 0;
    for k in 0..grid.nt {
        sk.heat.apply(v.frame(k).values(), &mut d);
        d.iter_mut().zip(v.frame(k + 1).values()).for_each(|(di, vi)| *di = vi - *di);
        let xk = &mut x[k * na..(k + 1) * na];
        r.copy_from_slice(&d);
        sk.step_adjoint(k, &r, &mut s);
        p.copy_from_slice(&s);
        let mut gamma = dot(&s, &s);
        let gamma0 = gamma;
        let d_norm = dot(&d, &d).sqrt();
        let mut j = 0;
        while (dot(&r, &r).sqrt() > tol * d_norm || gamma > 1e-8 * tol * tol * gamma0) && j < 10 * na && gamma > 1e-30 * gamma0 {
            sk.step_forward(k, &p, &mut q);
            let qq = dot(&q, &q);
            if qq == 0.0 {
                break;
            }
            let alpha = gamma / qq;
            xk.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
            r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
            sk.step_adjoint(k, &r, &mut s);
            let g_new = dot(&s, &s);
            let beta = g_new / gamma;
            gamma = g_new;
            p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
            j += 1;
        }
        it += j;
    }
    let mut r = vec![0.0; sk.rows()];
    sk.forward(&x, &mut r);
    r.iter_mut().zip(&b).for_each(|(ri, bi)| *ri = bi - *ri);
    let residual = path_norm(&r);
    let infinite = residual > target;
    let h: Vec<f64> = x.iter().map(|xi| xi / sk.scale).collect();
    let control = Control::new(marks, grid.nt, h)?;
    Ok(RateReport {
        value: if infinite { f64::INFINITY } else { 0.5 * dot(&x, &x) },
        infinite,
        residual,
        method: RateMethod::Variational,
        iterations: it,
        defect: 0.0,
        centering_defect: 0.0,
        minimizer: Some(control),
    })
}

/// `min { I(v) : v_T(y*) = delta }`, which is `delta^2 / (2 sigma^2)` with
/// `sigma^2 = |gamma^T e|^2` the discrete variance of the linearized field
/// at `(T, y*)`.
pub fn hitting_rate(model: &ModelSpec, u0: &FieldPath, grid: &Grid, marks: MarkGrid, node: usize, delta: f64) -> Result<(RateReport, f64)> {
    if node >= grid.len() {
        return Err(invalid("node", "outside the grid"));
    }
    let sk = Skeleton::new(model, u0, grid, marks)?;
    let mut e = vec![0.0; sk.rows()];
    e[(grid.nt - 1) * grid.len() + node] = 1.0;
    let mut a = vec![0.0; sk.cols()];
    sk.adjoint(&e, &mut a);
    let sigma2 = dot(&a, &a);
    if sigma2 == 0.0 {
        return Ok((
            RateReport {
                value: if delta == 0.0 { 0.0 } else { f64::INFINITY },
                infinite: delta != 0.0,
                residual: delta.abs(),
                method: RateMethod::Hitting,
                iterations: 0,
                defect: 0.0,
                centering_defect: 0.0,
                minimizer: None,
            },
            0.0,
        ));
    }
    let h: Vec<f64> = a.iter().map(|ai| delta * ai / sigma2 / sk.scale).collect();
    Ok((
        RateReport {
            value: delta * delta / (2.0 * sigma2),
            infinite: false,
            residual: 0.0,
            method: RateMethod::Hitting,
            iterations: 1,
            defect: 0.0,
            centering_defect: 0.0,
            minimizer: Some(Control::new(marks, grid.nt, h)?),
        },
        sigma2,
    ))
}

/// Time discretization of `omega-dot - 1/2 Delta* omega`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RnStencil {
    /// `(w_{k+1} - P w_k) / dt`: exact inverse of the grid skeleton.
    #[default]
    Exponential,
    /// `(w_{k+1} - w_k) / dt - 1/2 Delta_h w_k`, zero outside the window.
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnOptions {
    /// Absolute density floor; `None` uses `1e-8` times each frame maximum.
    pub floor: Option<f64>,
    pub stencil: RnStencil,
}

impl Default for RnOptions {
    fn default() -> Self {
        Self {
            floor: None,
            stencil: RnStencil::Exponential,
        }
    }
}

/// Radon-Nikodym derivative of `omega-dot - 1/2 Delta* omega` against
/// `mu0`, one row of `nx` cells per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnDerivative {
    /// Row `k` is the derivative over `[t_k, t_{k+1}]`, weighted by `mu0_{k+1}`.
    pub values: Vec<Vec<f64>>,
    pub defect: f64,
    pub masked: usize,
    /// Total mass `sum |num| dx dt`, the scale of the defect.
    pub mass: f64,
}

fn check_paths(omega: &SignedMeasurePath, mu0: &SignedMeasurePath, grid: &Grid) -> Result<()> {
    if omega.len() != grid.nt + 1 || mu0.len() != grid.nt + 1 {
        return Err(LabError::ShapeMismatch("measure paths must have nt + 1 frames".into()));
    }
    for f in omega.frames.iter().chain(&mu0.frames) {
        grid.check_field(f.len(), "measure frame")?;
    }
    Ok(())
}

pub fn rn_derivative(omega: &SignedMeasurePath, mu0: &SignedMeasurePath, grid: &Grid, opts: &RnOptions) -> Result<RnDerivative> {
    check_paths(omega, mu0, grid)?;
    let nx = grid.nx;
    let dt = grid.dt();
    let dx = grid.dx();
    let heat = HeatPropagator::for_grid(grid, Padding::Zero);
    let mut values = Vec::with_capacity(grid.nt);
    let mut defect = 0.0;
    let mut mass = 0.0;
    let mut masked = 0;
    let mut pw = vec![0.0; nx];
    for k in 0..grid.nt {
        let w0 = &omega.frame(k).density()[..nx];
        let w1 = &omega.frame(k + 1).density()[..nx];
        let m = &mu0.frame(k + 1).density()[..nx];
        let num: Vec<f64> = match opts.stencil {
            RnStencil::Exponential => {
                heat.apply(w0, &mut pw);
                w1.iter().zip(&pw).map(|(a, b)| (a - b) / dt).collect()
            }
            RnStencil::Central => (0..nx)
                .map(|i| {
                    let l = if i > 0 { w0[i - 1] } else { 0.0 };
                    let r = if i + 1 < nx { w0[i + 1] } else { 0.0 };
                    (w1[i] - w0[i]) / dt - 0.5 * (l - 2.0 * w0[i] + r) / (dx * dx)
                })
                .collect(),
        };
        let floor = opts
            .floor
            .unwrap_or_else(|| DEFAULT_FLOOR_FRACTION * m.iter().fold(0.0_f64, |a, b| a.max(b.abs())));
        let mut row = vec![0.0; nx];
        for i in 0..nx {
            mass += num[i].abs() * dx * dt;
            if m[i] > floor && m[i] > 0.0 {
                row[i] = num[i] / m[i];
            } else if num[i] != 0.0 {
                masked += 1;
                defect += num[i].abs() * dx * dt;
            }
        }
        values.push(row);
    }
    Ok(RnDerivative {
        values,
        defect,
        masked,
        mass,
    })
}

/// Defect (relative to the total mass) above which absolute continuity
/// with respect to `mu0` is declared to fail.
pub const DEFECT_TOL: f64 = 1e-6;

fn rn_energy(rn: &RnDerivative, mu0: &SignedMeasurePath, grid: &Grid, center: bool) -> (f64, f64) {
    let nx = grid.nx;
    let (dt, dx) = (grid.dt(), grid.dx());
    let mut energy = 0.0;
    let mut worst = 0.0_f64;
    for (k, row) in rn.values.iter().enumerate() {
        let m = &mu0.frame(k + 1).density()[..nx];
        let total: f64 = m.iter().sum::<f64>() * dx;
        let pairing: f64 = row.iter().zip(m).map(|(r, mi)| r * mi).sum::<f64>() * dx;
        worst = worst.max(pairing.abs());
        let shift = if center && total > 0.0 { pairing / total } else { 0.0 };
        energy += row.iter().zip(m).map(|(r, mi)| (r - shift).powi(2) * mi).sum::<f64>() * dx * dt;
    }
    (0.5 * energy, worst)
}

fn closed_form(
    omega: &SignedMeasurePath,
    mu0: &SignedMeasurePath,
    grid: &Grid,
    opts: &RnOptions,
    method: RateMethod,
) -> Result<RateReport> {
    if omega.frame(0).density().iter().any(|w| *w != 0.0) {
        return Err(invalid("omega", "path must start at the zero measure"));
    }
    let rn = rn_derivative(omega, mu0, grid, opts)?;
    let center = method == RateMethod::ClosedFormFvp;
    let (value, centering) = rn_energy(&rn, mu0, grid, center);
    let infinite = rn.defect > DEFECT_TOL * (rn.mass + f64::MIN_POSITIVE);
    Ok(RateReport {
        value: if infinite { f64::INFINITY } else { value },
        infinite,
        residual: 0.0,
        method,
        iterations: 0,
        defect: rn.defect,
        centering_defect: if center { centering } else { 0.0 },
        minimizer: None,
    })
}

/// `1/2 int int |d(omega-dot - 1/2 Delta* omega)/d mu0|^2 d mu0 dt`.
pub fn rate_sbm(omega: &SignedMeasurePath, mu0: &SignedMeasurePath, grid: &Grid, opts: &RnOptions) -> Result<RateReport> {
    closed_form(omega, mu0, grid, opts, RateMethod::ClosedFormSbm)
}

/// As [`rate_sbm`], with the derivative centered against `mu0` per frame.
pub fn rate_fvp(omega: &SignedMeasurePath, mu0: &SignedMeasurePath, grid: &Grid, opts: &RnOptions) -> Result<RateReport> {
    closed_form(omega, mu0, grid, opts, RateMethod::ClosedFormFvp)
}

/// Measure path `xi(u0)` of the deterministic flow.
pub fn mu0_path(model: &ModelSpec, grid: &Grid, beta: f64) -> Result<SignedMeasurePath> {
    path_to_measure_path(&deterministic_flow(model, grid)?, grid, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmReport {
    pub starts_at_zero: bool,
    pub abs_cont_time: bool,
    /// `max_k |omega_{k+1} - omega_k|_* / dt` in the dual Lipschitz norm.
    pub time_modulus: f64,
    pub abs_cont_measure: bool,
    pub defect: f64,
    pub energy: f64,
    pub energy_finite: bool,
    /// Fleming-Viot only: `<mu0_t, rn_t> = 0` for every frame.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centered: Option<bool>,
    pub centering_defect: f64,
}

impl CmReport {
    pub fn passes(&self) -> bool {
        self.starts_at_zero && self.abs_cont_time && self.abs_cont_measure && self.energy_finite && self.centered.unwrap_or(true)
    }
}

fn dual_norm(mu: &[f64], grid: &Grid, beta: f64) -> f64 {
    let dx = grid.dx();
    let c: Vec<f64> = mu
        .iter()
        .enumerate()
        .map(|(i, w)| (-beta * grid.node(i).abs()).exp() * w * dx)
        .collect();
    lipschitz_box_sup(&c, dx).max(0.0)
}

/// Discrete proxies for membership in the Cameron-Martin space.
///
/// Time continuity passes when every increment is at most
/// `4 sqrt(dt) max(1, max_k |omega_k|_*)` in dual norm; an order-one jump
/// fails this for small `dt` and keeps failing under refinement.
pub fn cameron_martin_check(
    omega: &SignedMeasurePath,
    mu0: &SignedMeasurePath,
    kind: ModelKind,
    grid: &Grid,
    opts: &RnOptions,
    tol: f64,
) -> Result<CmReport> {
    check_paths(omega, mu0, grid)?;
    let beta = omega.beta;
    let starts_at_zero = omega.frame(0).density().iter().all(|w| *w == 0.0);
    let mut max_norm = 0.0_f64;
    let mut max_inc = 0.0_f64;
    for k in 0..=grid.nt {
        max_norm = max_norm.max(dual_norm(omega.frame(k).density(), grid, beta));
        if k < grid.nt {
            let d: Vec<f64> = omega
                .frame(k + 1)
                .density()
                .iter()
                .zip(omega.frame(k).density())
                .map(|(a, b)| a - b)
                .collect();
            max_inc = max_inc.max(dual_norm(&d, grid, beta));
        }
    }
    let abs_cont_time = max_inc <= 4.0 * grid.dt().sqrt() * max_norm.max(1.0);
    let rn = rn_derivative(omega, mu0, grid, opts)?;
    let abs_cont_measure = rn.defect <= DEFECT_TOL * (rn.mass + f64::MIN_POSITIVE);
    let fvp = kind == ModelKind::Fvp;
    let (energy, centering) = rn_energy(&rn, mu0, grid, false);
    Ok(CmReport {
        starts_at_zero,
        abs_cont_time,
        time_modulus: max_inc / grid.dt(),
        abs_cont_measure,
        defect: rn.defect,
        energy,
        energy_finite: energy.is_finite(),
        centered: fvp.then_some(centering <= tol),
        centering_defect: centering,
    })
}

/// `|int_U h(a)^2 da - int_R h(u0(y))^2 m0(y) dy|`, both by the trapezoid
/// rule: the left side on the mark edges, the right side on the grid nodes
/// where `m0` is above the floor.
pub fn change_of_variables_check(h: impl Fn(f64) -> f64, marks: &MarkGrid, u0: &Field, m0: &Field, grid: &Grid) -> Result<f64> {
    grid.check_field(u0.len(), "u0")?;
    grid.check_field(m0.len(), "m0")?;
    let floor = DEFAULT_FLOOR_FRACTION * m0.values().iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let support: Vec<usize> = (0..grid.len()).filter(|&i| m0[i] > floor).collect();
    if let (Some(&a), Some(&b)) = (support.first(), support.last()) {
        if (a..b).any(|i| u0[i + 1] <= u0[i]) {
            return Err(LabError::NotMonotone("u0"));
        }
    }
    let left: Vec<f64> = (0..=marks.n).map(|j| h(marks.edge(j)).powi(2)).collect();
    let right: Vec<f64> = (0..grid.len()).map(|i| h(u0[i]).powi(2) * m0[i]).collect();
    Ok((crate::grid::trapezoid(&left, marks.width()) - crate::grid::trapezoid(&right, grid.dx())).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::MeasureFrame;
    use crate::models::InitialPreset;

    fn coarse() -> Grid {
        Grid::new(4.0, 32, 1.0, 8).unwrap()
    }

    fn random_control(marks: MarkGrid, nt: usize, seed: u64) -> Control {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let values = (0..nt * marks.n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Control::new(marks, nt, values).unwrap()
    }

    #[test]
    fn zero_control_zero_path_and_linearity() {
        let g = coarse();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = deterministic_flow(&m, &g).unwrap();
        let marks = m.mark_grid(&g, 8).unwrap();
        let z = solve_controlled(&Control::zeros(marks, g.nt), &m, &u0, &g).unwrap();
        assert!(z.frames().iter().all(|f| f.values().iter().all(|v| *v == 0.0)));
        let h1 = random_control(marks, g.nt, 1);
        let h2 = random_control(marks, g.nt, 2);
        let comb = Control::new(marks, g.nt, h1.values.iter().zip(&h2.values).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        let v1 = solve_controlled(&h1, &m, &u0, &g).unwrap();
        let v2 = solve_controlled(&h2, &m, &u0, &g).unwrap();
        let vc = solve_controlled(&comb, &m, &u0, &g).unwrap();
        for k in 0..=g.nt {
            for i in 0..g.len() {
                assert!((vc.value(k, i) - (2.0 * v1.value(k, i) - 0.5 * v2.value(k, i))).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fvp_constant_controls_are_invisible() {
        let g = coarse();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = deterministic_flow(&m, &g).unwrap();
        let marks = m.mark_grid(&g, 8).unwrap();
        let ones = Control::new(marks, g.nt, vec![1.0; g.nt * 8]).unwrap();
        let v = solve_controlled(&ones, &m, &u0, &g).unwrap();
        assert!(v.frames().iter().all(|f| f.values().iter().all(|x| x.abs() < 1e-14)));
    }

    #[test]
    fn adjoint_is_transpose() {
        let g = coarse();
        for m in [
            ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap(),
            ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap(),
        ] {
            let u0 = deterministic_flow(&m, &g).unwrap();
            let sk = Skeleton::new(&m, &u0, &g, m.mark_grid(&g, 8).unwrap()).unwrap();
            let x = random_control(sk.marks, g.nt, 5).values;
            let y: Vec<f64> = (0..sk.rows()).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
            let mut ax = vec![0.0; sk.rows()];
            let mut aty = vec![0.0; sk.cols()];
            sk.forward(&x, &mut ax);
            sk.adjoint(&y, &mut aty);
            assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10 * dot(&ax, &ax).sqrt().max(1.0) * 100.0);
        }
    }

    #[test]
    fn rate_general_examples() {
        let g = coarse();
        let m = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = deterministic_flow(&m, &g).unwrap();
        let marks = m.mark_grid(&g, 8).unwrap();
        let zero = FieldPath::zeros(&g);
        let r = rate_general(&zero, &m, &u0, &g, marks, DEFAULT_RATE_TOL).unwrap();
        assert_eq!(r.value, 0.0);
        for seed in 0..4 {
            let h = random_control(marks, g.nt, seed);
            let v = solve_controlled(&h, &m, &u0, &g).unwrap();
            let r = rate_general(&v, &m, &u0, &g, marks, DEFAULT_RATE_TOL).unwrap();
            assert!(!r.infinite, "residual {}", r.residual);
            assert!(r.value <= h.energy(g.dt()) + 1e-9);
            let r3 = rate_general(&v.scaled(3.0), &m, &u0, &g, marks, DEFAULT_RATE_TOL).unwrap();
            assert!((r3.value / (9.0 * r.value) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unattainable_target_is_infinite() {
        let g = coarse();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = deterministic_flow(&m, &g).unwrap();
        let marks = m.mark_grid(&g, 8).unwrap();
        // a constant shift far out in the tails cannot be produced: G vanishes where u0 is 0 or 1
        let mut frames = vec![Field::zeros(g.len())];
        for k in 1..=g.nt {
            frames.push(Field::from_fn(&g, |y| if y < -3.5 { 0.1 * k as f64 } else { 0.0 }).unwrap());
        }
        let v = FieldPath::new(frames).unwrap();
        let r = rate_general(&v, &m, &u0, &g, marks, DEFAULT_RATE_TOL).unwrap();
        assert!(r.infinite && r.value.is_infinite());
    }

    #[test]
    fn rn_lebesgue_example() {
        let g = Grid::new(8.0, 80, 0.5, 10).unwrap();
        let m = ModelSpec::sbm(&g, InitialPreset::LebesgueCdf, 1e-3, 0.25).unwrap();
        let mu0 = mu0_path(&m, &g, 1.0).unwrap();
        let omega = SignedMeasurePath {
            frames: (0..=g.nt).map(|k| mu0.frame(k).scaled(g.time(k))).collect(),
            beta: 1.0,
        };
        let rn = rn_derivative(&omega, &mu0, &g, &RnOptions::default()).unwrap();
        for row in &rn.values {
            assert!(row.iter().all(|r| (r - 1.0).abs() < 1e-9));
        }
        let central = rn_derivative(&omega, &mu0, &g, &RnOptions { floor: None, stencil: RnStencil::Central }).unwrap();
        for row in &central.values {
            // away from the boundary layer of m0
            for i in g.interior(3.0) {
                assert!((row[i] - 1.0).abs() < 1e-8);
            }
        }
        let cm = cameron_martin_check(&omega, &mu0, ModelKind::Sbm, &g, &RnOptions::default(), 1e-6).unwrap();
        assert!(cm.passes());
        let mass: f64 = mu0.frame(g.nt).density()[..g.nx].iter().sum::<f64>() * g.dx();
        assert!((cm.energy - 0.5 * g.horizon * mass).abs() < 0.05 * mass);
        let r2 = rate_sbm(&omega, &mu0, &g, &RnOptions::default()).unwrap();
        let omega2 = SignedMeasurePath {
            frames: omega.frames.iter().map(|f| f.scaled(2.0)).collect(),
            beta: 1.0,
        };
        let r4 = rate_sbm(&omega2, &mu0, &g, &RnOptions::default()).unwrap();
        assert!((r4.value - 4.0 * r2.value).abs() < 1e-10 * r4.value);
    }

    #[test]
    fn zero_omega_and_support_defect() {
        let g = coarse();
        let m = ModelSpec::fvp(&g, InitialPreset::Uniform01Cdf, 1e-3, 0.25).unwrap();
        let mu0 = mu0_path(&m, &g, 1.0).unwrap();
        let zero = SignedMeasurePath {
            frames: vec![MeasureFrame::zeros(g.len()); g.nt + 1],
            beta: 1.0,
        };
        let r = rate_fvp(&zero, &mu0, &g, &RnOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);
        let cm = cameron_martin_check(&zero, &mu0, ModelKind::Fvp, &g, &RnOptions::default(), 1e-9).unwrap();
        assert!(cm.passes() && cm.energy == 0.0);
        // mass at the left edge, where a point-supported flow has no density yet
        let pm = ModelSpec::fvp(&g, InitialPreset::PointMassCdf, 1e-3, 0.25).unwrap();
        let mu_pm = mu0_path(&pm, &g, 1.0).unwrap();
        let far = SignedMeasurePath {
            frames: (0..=g.nt).map(|k| MeasureFrame::cell_mass(&g, 0, 0.1 * g.time(k))).collect(),
            beta: 1.0,
        };
        let rn = rn_derivative(&far, &mu_pm, &g, &RnOptions::default()).unwrap();
        assert!(rn.defect > 0.0 && rn.masked > 0);
        assert!(rate_sbm(&far, &mu_pm, &g, &RnOptions::default()).unwrap().infinite);
    }

    #[test]
    fn jump_fails_time_continuity() {
        for nt in [50, 200] {
            let g = Grid::new(4.0, 32, 1.0, nt).unwrap();
            let m = ModelSpec::sbm(&g, InitialPreset::LebesgueCdf, 1e-3, 0.25).unwrap();
            let mu0 = mu0_path(&m, &g, 1.0).unwrap();
            let i0 = g.node_index(0.0).unwrap();
            let omega = SignedMeasurePath {
                frames: (0..=nt)
                    .map(|k| if k > nt / 2 { MeasureFrame::cell_mass(&g, i0, 1.0) } else { MeasureFrame::zeros(g.len()) })
                    .collect(),
                beta: 1.0,
            };
            let cm = cameron_martin_check(&omega, &mu0, ModelKind::Sbm, &g, &RnOptions::default(), 1e-6).unwrap();
            assert!(!cm.abs_cont_time);
            assert!(cm.time_modulus >= 0.9 / g.dt());
        }
    }

    #[test]
    fn fvp_centering_idempotent() {
        let g = coarse();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = deterministic_flow(&m, &g).unwrap();
        let marks = m.mark_grid(&g, 16).unwrap();
        let h = random_control(marks, g.nt, 9);
        let mu0 = mu0_path(&m, &g, 1.0).unwrap();
        let a = path_to_measure_path(&solve_controlled(&h, &m, &u0, &g).unwrap(), &g, 1.0).unwrap();
        let b = path_to_measure_path(&solve_controlled(&h.centered(), &m, &u0, &g).unwrap(), &g, 1.0).unwrap();
        let ra = rate_fvp(&a, &mu0, &g, &RnOptions::default()).unwrap();
        let rb = rate_fvp(&b, &mu0, &g, &RnOptions::default()).unwrap();
        assert!((ra.value - rb.value).abs() < 1e-12 * ra.value.max(1.0));
    }

    #[test]
    fn change_of_variables_examples() {
        let g = Grid::new(10.0, 2000, 1.0, 4).unwrap();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let u0 = m.initial.clone();
        let m0 = Field::from_fn(&g, |y| (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()).unwrap();
        let marks = MarkGrid::new(0.0, 1.0, 1000).unwrap();
        assert_eq!(change_of_variables_check(|_| 0.0, &marks, &u0, &m0, &g).unwrap(), 0.0);
        assert!(change_of_variables_check(|_| 1.0, &marks, &u0, &m0, &g).unwrap() <= 1e-4);
        assert!(change_of_variables_check(|a| a, &marks, &u0, &m0, &g).unwrap() <= 1e-4);

        let g = Grid::new(2.0, 400, 1.0, 4).unwrap();
        let u0 = Field::from_fn(&g, |y| y.clamp(0.0, 1.0)).unwrap();
        let m0 = Field::from_fn(&g, |y| if (0.0..=1.0).contains(&y) { 1.0 } else { 0.0 }).unwrap();
        assert!(change_of_variables_check(|a| a, &marks, &u0, &m0, &g).unwrap() <= 2.0 * g.dx());

        let bumpy = Field::from_fn(&g, |y| (3.0 * y).sin()).unwrap();
        let ones = Field::from_fn(&g, |_| 1.0).unwrap();
        assert!(change_of_variables_check(|a| a, &marks, &bumpy, &ones, &g).is_err());
    }
}
