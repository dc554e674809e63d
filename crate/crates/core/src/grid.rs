//! Space-time discretization, heat propagation and the weighted norms used
//! to measure fields.
//!
//! Fields live on the nodes `y_i = -L + i dx`, `i = 0..=nx`. Heat
//! propagation over a step `dt` is convolution with the lattice heat kernel
//! `e^{-tau} I_n(tau)`, `tau = dt / dx^2`, which is the exact semigroup
//! generated by `1/2` times the second central difference. It is a discrete
//! Gaussian: unconditionally stable, mass- and constant-preserving, and
//! `P_s P_s = P_{2s}` holds to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

/// Uniform space-time grid on `[-L, L] x [0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub half_width: f64,
    pub nx: usize,
    pub horizon: f64,
    pub nt: usize,
}

impl Grid {
    pub fn new(half_width: f64, nx: usize, horizon: f64, nt: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(invalid("L", format!("must be positive and finite, got {half_width}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("T", format!("must be positive and finite, got {horizon}")));
        }
        if nx < 2 {
            return Err(invalid("nx", format!("need at least 2 cells, got {nx}")));
        }
        if nt < 2 {
            return Err(invalid("nt", format!("need at least 2 steps, got {nt}")));
        }
        Ok(Self {
            half_width,
            nx,
            horizon,
            nt,
        })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    /// Number of nodes, `nx + 1`.
    pub fn len(&self) -> usize {
        self.nx + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Index of the node at `y`, if `y` sits on a node (to 1e-9 dx).
    pub fn node_index(&self, y: f64) -> Option<usize> {
        let s = (y + self.half_width) / self.dx();
        let r = s.round();
        if (s - r).abs() > 1e-9 || r < 0.0 || r > self.nx as f64 {
            None
        } else {
            Some(r as usize)
        }
    }

    /// Index of the time step at `t`, if `t` sits on the time lattice.
    pub fn step_index(&self, t: f64) -> Option<usize> {
        let s = t / self.dt();
        let r = s.round();
        if (s - r).abs() > 1e-9 || r < 0.0 || r > self.nt as f64 {
            None
        } else {
            Some(r as usize)
        }
    }

    /// Nodes with `|y| <= radius`.
    pub fn interior(&self, radius: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.node(i).abs() <= radius + 1e-12)
    }

    pub(crate) fn check_field(&self, len: usize, what: &str) -> Result<()> {
        if len != self.len() {
            return Err(LabError::ShapeMismatch(format!(
                "{what} has {len} nodes, grid has {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// A real field on the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field(Vec<f64>);

impl Field {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { frame: 0, node: i });
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid.nodes().into_iter().map(f).collect())
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Field {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A time-indexed sequence of fields, frame `k` at `t_k = k dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPath {
    frames: Vec<Field>,
}

impl FieldPath {
    pub fn new(frames: Vec<Field>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(LabError::ShapeMismatch("path has no frames".into()));
        };
        let n = first.len();
        if frames.iter().any(|f| f.len() != n) {
            return Err(LabError::ShapeMismatch("frames differ in length".into()));
        }
        Ok(Self { frames })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            frames: vec![Field::zeros(grid.len()); grid.nt + 1],
        }
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &Field {
        &self.frames[k]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.frames[k][i]
    }

    pub fn max_abs_diff(&self, other: &FieldPath) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> FieldPath {
        FieldPath {
            frames: self
                .frames
                .iter()
                .map(|f| Field(f.0.iter().map(|v| c * v).collect()))
                .collect(),
        }
    }

    pub(crate) fn check_grid(&self, grid: &Grid, what: &str) -> Result<()> {
        if self.frames.len() != grid.nt + 1 {
            return Err(LabError::ShapeMismatch(format!(
                "{what} has {} frames, grid expects {}",
                self.frames.len(),
                grid.nt + 1
            )));
        }
        grid.check_field(self.frames[0].len(), what)
    }
}

/// Exponents of the weighted function spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub beta: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub alpha: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            beta0: 0.25,
            beta1: 0.5,
            alpha: 0.4,
        }
    }
}

impl WeightParams {
    pub fn new(beta: f64, beta0: f64, beta1: f64, alpha: f64) -> Result<Self> {
        if !(0.0 < beta0 && beta0 < beta1 && beta1 < beta) {
            return Err(invalid(
                "beta",
                format!("need 0 < beta0 < beta1 < beta, got {beta0}, {beta1}, {beta}"),
            ));
        }
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(invalid("alpha", format!("need 0 < alpha < 1/2, got {alpha}")));
        }
        Ok(Self {
            beta,
            beta0,
            beta1,
            alpha,
        })
    }
}

/// Gaussian heat kernel `p_t(x) = exp(-x^2 / 2t) / sqrt(2 pi t)`.
pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t", format!("heat kernel needs t > 0, got {t}")));
    }
    Ok((-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt())
}

/// One-sided weights `w_n = e^{-tau} I_n(tau)`, `n = 0, 1, ...`, of the
/// lattice heat kernel; `w_0 + 2 sum w_n = 1`.
///
/// Computed with Miller's backward recurrence `I_{n-1} = (2n / tau) I_n +
/// I_{n+1}` normalized by the sum rule, so no Bessel evaluation is needed.
pub fn lattice_heat_weights(tau: f64) -> Vec<f64> {
    assert!(tau >= 0.0 && tau.is_finite(), "tau must be finite and >= 0");
    if tau == 0.0 {
        return vec![1.0];
    }
    let n_cut = ((84.0 * tau).sqrt() + 15.0).ceil() as usize;
    let start = n_cut + 30 + ((40 * n_cut) as f64).sqrt().ceil() as usize;
    let mut kept = vec![0.0; n_cut + 1];
    let mut next = 0.0_f64;
    let mut cur = 1e-280_f64;
    let mut tail_sum = 0.0_f64;
    for n in (1..=start).rev() {
        if n <= n_cut {
            kept[n] = cur;
        }
        tail_sum += cur;
        let prev = (2.0 * n as f64 / tau) * cur + next;
        next = cur;
        cur = prev;
        if cur > 1e250 {
            let s = 1e-250;
            cur *= s;
            next *= s;
            tail_sum *= s;
            for v in kept.iter_mut() {
                *v *= s;
            }
        }
    }
    kept[0] = cur;
    let total = cur + 2.0 * tail_sum;
    for v in kept.iter_mut() {
        *v /= total;
    }
    let w0 = kept[0];
    while kept.len() > 1 && *kept.last().unwrap() < 1e-18 * w0 {
        kept.pop();
    }
    let s: f64 = kept[0] + 2.0 * kept[1..].iter().sum::<f64>();
    kept.iter_mut().for_each(|v| *v /= s);
    kept
}

/// How a field is extended beyond `[-L, L]` before convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Padding {
    /// Zero outside the window: right for densities, mass leaks out.
    #[default]
    Zero,
    /// Constant continuation of the boundary values: right for
    /// distribution functions, keeps monotone fields monotone.
    Edge,
}

/// Cached lattice heat kernel for a fixed `(dt, dx)`.
#[derive(Debug, Clone)]
pub struct HeatPropagator {
    weights: Vec<f64>,
    padding: Padding,
}

impl HeatPropagator {
    pub fn new(dt: f64, dx: f64, padding: Padding) -> Self {
        assert!(dx > 0.0);
        Self {
            weights: lattice_heat_weights(dt / (dx * dx)),
            padding,
        }
    }

    pub fn for_grid(grid: &Grid, padding: Padding) -> Self {
        Self::new(grid.dt(), grid.dx(), padding)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// `out = P f`.
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        debug_assert_eq!(out.len(), n);
        let w = &self.weights;
        let half = w.len() - 1;
        let (lo, hi) = match self.padding {
            Padding::Zero => (0.0, 0.0),
            Padding::Edge => (f[0], f[n - 1]),
        };
        let mut ext = vec![0.0; n + 2 * half];
        ext[..half].fill(lo);
        ext[half..half + n].copy_from_slice(f);
        ext[half + n..].fill(hi);
        for (i, o) in out.iter_mut().enumerate() {
            let c = i + half;
            let mut acc = w[0] * ext[c];
            for (m, wm) in w.iter().enumerate().skip(1) {
                acc += wm * (ext[c - m] + ext[c + m]);
            }
            *o = acc;
        }
    }

    pub fn apply_vec(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.apply(f, &mut out);
        out
    }

    /// `out = P^T g`, the exact transpose of [`apply`](Self::apply).
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        match self.padding {
            Padding::Zero => self.apply(g, out),
            Padding::Edge => {
                let n = g.len();
                let last = (n - 1) as isize;
                out.fill(0.0);
                let w = &self.weights;
                for (i, gi) in g.iter().enumerate() {
                    if *gi == 0.0 {
                        continue;
                    }
                    out[i] += w[0] * gi;
                    for (m, wm) in w.iter().enumerate().skip(1) {
                        let l = (i as isize - m as isize).clamp(0, last) as usize;
                        let r = (i as isize + m as isize).clamp(0, last) as usize;
                        out[l] += wm * gi;
                        out[r] += wm * gi;
                    }
                }
            }
        }
    }
}

/// One step of the heat semigroup `e^{(dt/2) Delta}` with zero padding
/// beyond the window; `dt = 0` is the identity.
pub fn heat_propagate(f: &Field, dt: f64, grid: &Grid) -> Result<Field> {
    heat_propagate_padded(f, dt, grid, Padding::Zero)
}

pub fn heat_propagate_padded(f: &Field, dt: f64, grid: &Grid, padding: Padding) -> Result<Field> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be >= 0, got {dt}")));
    }
    grid.check_field(f.len(), "field")?;
    if dt == 0.0 {
        return Ok(f.clone());
    }
    let p = HeatPropagator::new(dt, grid.dx(), padding);
    Ok(Field(p.apply_vec(f.values())))
}

/// `sup_i e^{-beta |y_i|} |f(y_i)|`.
pub fn weighted_sup_norm(f: &Field, grid: &Grid, beta: f64) -> f64 {
    f.values()
        .iter()
        .enumerate()
        .map(|(i, v)| (-beta * grid.node(i).abs()).exp() * v.abs())
        .fold(0.0, f64::max)
}

/// Truncated Hölder-weighted metric
/// `sum_{m=1}^{m_max} 2^{-m} min(||u - v||_{m, alpha, beta}, 1)`.
///
/// The neglected tail is at most `2^{-m_max}`.
pub fn holder_metric(u: &Field, v: &Field, grid: &Grid, wp: &WeightParams, m_max: usize) -> Result<f64> {
    if m_max < 1 {
        return Err(invalid("m_max", "must be at least 1"));
    }
    grid.check_field(u.len(), "u")?;
    grid.check_field(v.len(), "v")?;
    if (m_max as f64) > grid.half_width + 1e-12 {
        return Err(invalid(
            "m_max",
            format!("grid half-width {} does not cover [-{m_max}, {m_max}]", grid.half_width),
        ));
    }
    let diff: Vec<f64> = u.values().iter().zip(v.values()).map(|(a, b)| a - b).collect();
    let sup = weighted_sup_norm(&Field(diff.clone()), grid, wp.beta);
    let mut total = 0.0;
    for m in 1..=m_max {
        let idx: Vec<usize> = grid.interior(m as f64).collect();
        let mut quotient = 0.0_f64;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let q = (diff[i] - diff[j]).abs() / (grid.node(j) - grid.node(i)).abs().powf(wp.alpha);
                quotient = quotient.max(q);
            }
        }
        let norm = sup + quotient * (-wp.beta * m as f64).exp();
        total += 0.5_f64.powi(m as i32) * norm.min(1.0);
    }
    Ok(total)
}

/// Trapezoid integral of nodal values.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}
