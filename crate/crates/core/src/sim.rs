//! Mild Euler scheme for the small-noise SPDE and for its centered,
//! rescaled fluctuation field, plus replicate ensembles.
//!
//! One step is `u_{k+1} = P u_k + sqrt(eps) sum_j Gbar_j(u_k) W_{k,j}` with
//! `P` the lattice heat semigroup over `dt`, edge-padded since the states
//! are distribution functions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::{Field, FieldPath, Grid, HeatPropagator, Padding};
use crate::models::{deterministic_flow, ModelKind, ModelSpec};
use crate::noise::{CounterNormals, MarkGrid, NoiseRealization};

/// Post-step correction applied to the state `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    None,
    /// Clamp to `[0, 1]`.
    Clamp01,
    /// Least-squares projection onto non-decreasing sequences.
    Monotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScheme {
    /// Number of mark cells.
    pub marks: usize,
    /// `None` picks the model default: clamp for Fleming-Viot, nothing
    /// otherwise.
    pub projection: Option<Projection>,
}

impl Default for SimScheme {
    fn default() -> Self {
        Self {
            marks: 256,
            projection: None,
        }
    }
}

impl SimScheme {
    pub fn projection_for(&self, model: &ModelSpec) -> Projection {
        self.projection.unwrap_or(match model.kind {
            ModelKind::Fvp => Projection::Clamp01,
            _ => Projection::None,
        })
    }
}

/// Things that went wrong without being fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimDiagnostics {
    /// Node-steps with `|u|` beyond the super-Brownian mark bound.
    pub truncation_breaches: usize,
    /// Frames in which `u` decreases somewhere by more than `1e-12`.
    pub monotonicity_breaches: usize,
    /// Node-steps changed by the projection.
    pub projected_nodes: usize,
}

impl SimDiagnostics {
    pub fn merge(&mut self, other: &SimDiagnostics) {
        self.truncation_breaches += other.truncation_breaches;
        self.monotonicity_breaches += other.monotonicity_breaches;
        self.projected_nodes += other.projected_nodes;
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub path: FieldPath,
    pub diagnostics: SimDiagnostics,
}

/// Source of per-step noise cell integrals.
pub trait NoiseSource {
    fn fill(&self, step: usize, out: &mut [f64]);
    fn cells(&self) -> usize;
}

impl NoiseSource for NoiseRealization {
    fn fill(&self, step: usize, out: &mut [f64]) {
        out.copy_from_slice(self.step(step));
    }

    fn cells(&self) -> usize {
        self.na()
    }
}

/// Noise generated on the fly from the counter-based stream.
#[derive(Debug, Clone)]
pub struct StreamNoise {
    normals: CounterNormals,
    dt: f64,
    marks: MarkGrid,
}

impl StreamNoise {
    pub fn new(grid: &Grid, marks: MarkGrid, seed: u64, replicate: u64) -> Self {
        Self {
            normals: CounterNormals::new(seed, replicate),
            dt: grid.dt(),
            marks,
        }
    }
}

impl NoiseSource for StreamNoise {
    fn fill(&self, step: usize, out: &mut [f64]) {
        self.normals.fill_increments(step, self.dt, &self.marks, out);
    }

    fn cells(&self) -> usize {
        self.marks.n
    }
}

/// Pool-adjacent-violators fit: the closest non-decreasing sequence in `l2`.
pub fn isotonic_projection(values: &mut [f64]) {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values.iter() {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    let mut i = 0;
    for (m, n) in blocks {
        values[i..i + n].fill(m);
        i += n;
    }
}

fn project(values: &mut [f64], projection: Projection) -> usize {
    match projection {
        Projection::None => 0,
        Projection::Clamp01 => {
            let mut n = 0;
            for v in values.iter_mut() {
                let c = v.clamp(0.0, 1.0);
                if c != *v {
                    n += 1;
                    *v = c;
                }
            }
            n
        }
        Projection::Monotone => {
            let before = values.to_vec();
            isotonic_projection(values);
            before.iter().zip(values.iter()).filter(|(a, b)| a != b).count()
        }
    }
}

struct Stepper {
    marks: MarkGrid,
    heat: HeatPropagator,
    projection: Projection,
    bound: f64,
}

impl Stepper {
    fn new(model: &ModelSpec, grid: &Grid, scheme: &SimScheme, cells: usize) -> Result<Self> {
        grid.check_field(model.initial.len(), "initial condition")?;
        let marks = model.mark_grid(grid, scheme.marks)?;
        if marks.n != cells {
            return Err(LabError::ShapeMismatch(format!(
                "noise has {cells} mark cells, model discretization needs {}",
                marks.n
            )));
        }
        let bound = match model.kind {
            ModelKind::Sbm => model.marks.1.min(-model.marks.0),
            _ => f64::INFINITY,
        };
        Ok(Self {
            marks,
            heat: HeatPropagator::for_grid(grid, Padding::Edge),
            projection: scheme.projection_for(model),
            bound,
        })
    }

    fn audit(&self, k: usize, u: &[f64], diag: &mut SimDiagnostics) -> Result<()> {
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { frame: k, node: i });
        }
        diag.truncation_breaches += u.iter().filter(|v| v.abs() > self.bound).count();
        if u.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            diag.monotonicity_breaches += 1;
        }
        Ok(())
    }
}

/// Simulate `u^eps` driven by the given noise.
pub fn simulate_u(model: &ModelSpec, grid: &Grid, scheme: &SimScheme, noise: &impl NoiseSource) -> Result<SimOutput> {
    let st = Stepper::new(model, grid, scheme, noise.cells())?;
    let amp = model.epsilon.sqrt();
    let n = grid.len();
    let mut w = vec![0.0; noise.cells()];
    let mut force = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut diag = SimDiagnostics::default();
    let mut frames = Vec::with_capacity(grid.nt + 1);
    let mut u = model.initial.values().to_vec();
    st.audit(0, &u, &mut diag)?;
    frames.push(model.initial.clone());
    for k in 0..grid.nt {
        st.heat.apply(&u, &mut next);
        if amp > 0.0 {
            noise.fill(k, &mut w);
            model.apply_cells(grid, &st.marks, &u, &w, &mut force);
            for (x, f) in next.iter_mut().zip(&force) {
                *x += amp * f;
            }
        }
        diag.projected_nodes += project(&mut next, st.projection);
        std::mem::swap(&mut u, &mut next);
        st.audit(k + 1, &u, &mut diag)?;
        frames.push(Field::from_vec_unchecked(u.clone()));
    }
    Ok(SimOutput {
        path: FieldPath::new(frames)?,
        diagnostics: diag,
    })
}

/// `v^eps = a(eps) / sqrt(eps) (u^eps - u^0)`.
pub fn center_rescale(u_path: &FieldPath, u0_path: &FieldPath, model: &ModelSpec) -> Result<FieldPath> {
    if model.epsilon <= 0.0 {
        return Err(invalid("epsilon", "centering needs eps > 0"));
    }
    if u_path.len() != u0_path.len() || u_path.frame(0).len() != u0_path.frame(0).len() {
        return Err(LabError::ShapeMismatch("paths differ in shape".into()));
    }
    let c = model.center_factor();
    let frames = u_path
        .frames()
        .iter()
        .zip(u0_path.frames())
        .map(|(u, u0)| {
            Field::from_vec_unchecked(u.values().iter().zip(u0.values()).map(|(a, b)| c * (a - b)).collect())
        })
        .collect();
    FieldPath::new(frames)
}

/// Simulate `v^eps` directly: `v_{k+1} = P v_k + a(eps) sum_j Gbar_j(u^0_k +
/// eps^{1/2-kappa} v_k) W_{k,j}`, with the projection applied to the
/// reconstructed state.
pub fn simulate_v(model: &ModelSpec, grid: &Grid, scheme: &SimScheme, noise: &impl NoiseSource) -> Result<SimOutput> {
    if model.epsilon <= 0.0 {
        return Err(invalid("epsilon", "the fluctuation field needs eps > 0"));
    }
    let u0 = deterministic_flow(model, grid)?;
    simulate_v_on(model, grid, scheme, noise, &u0)
}

pub(crate) fn simulate_v_on(
    model: &ModelSpec,
    grid: &Grid,
    scheme: &SimScheme,
    noise: &impl NoiseSource,
    u0: &FieldPath,
) -> Result<SimOutput> {
    let st = Stepper::new(model, grid, scheme, noise.cells())?;
    let a = model.a_eps();
    let s = model.state_scale();
    let n = grid.len();
    let mut w = vec![0.0; noise.cells()];
    let mut force = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut state = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut diag = SimDiagnostics::default();
    let mut frames = Vec::with_capacity(grid.nt + 1);
    frames.push(Field::zeros(n));
    st.audit(0, model.initial.values(), &mut diag)?;
    for k in 0..grid.nt {
        let base = u0.frame(k).values();
        for ((x, b), vi) in state.iter_mut().zip(base).zip(&v) {
            *x = b + s * vi;
        }
        st.heat.apply(&v, &mut next);
        noise.fill(k, &mut w);
        model.apply_cells(grid, &st.marks, &state, &w, &mut force);
        for (x, f) in next.iter_mut().zip(&force) {
            *x += a * f;
        }
        let base = u0.frame(k + 1).values();
        for ((x, b), vi) in state.iter_mut().zip(base).zip(&next) {
            *x = b + s * vi;
        }
        if st.projection != Projection::None {
            let changed = project(&mut state, st.projection);
            if changed > 0 {
                diag.projected_nodes += changed;
                for ((vi, x), b) in next.iter_mut().zip(&state).zip(base) {
                    *vi = (x - b) / s;
                }
            }
        }
        std::mem::swap(&mut v, &mut next);
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(LabError::NonFinite { frame: k + 1, node: i });
        }
        st.audit(k + 1, &state, &mut diag)?;
        frames.push(Field::from_vec_unchecked(v.clone()));
    }
    Ok(SimOutput {
        path: FieldPath::new(frames)?,
        diagnostics: diag,
    })
}

/// Mergeable first and second moments of a vector observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Co-moment matrix `sum (x - mean)(x - mean)^T`, row-major.
    comoment: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        assert_eq!(x.len(), d);
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[i * d + j] += after * delta[j];
            }
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Moments) {
        assert_eq!(self.dim(), other.dim());
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
    }

    /// Unbiased covariance entry; `None` with fewer than two samples.
    pub fn covariance(&self, i: usize, j: usize) -> Option<f64> {
        (self.count > 1).then(|| self.comoment[i * self.dim() + j] / (self.count - 1) as f64)
    }

    pub fn variance(&self) -> Option<Vec<f64>> {
        (self.count > 1).then(|| (0..self.dim()).map(|i| self.covariance(i, i).unwrap()).collect())
    }

    /// Standard error of the mean of component `i`.
    pub fn std_error(&self, i: usize) -> Option<f64> {
        self.covariance(i, i).map(|v| (v / self.count as f64).sqrt())
    }

    /// Standard error of the sample variance of component `i`, from the
    /// normal-theory formula `var * sqrt(2 / (n - 1))`.
    pub fn variance_std_error(&self, i: usize) -> Option<f64> {
        self.covariance(i, i).map(|v| v * (2.0 / (self.count - 1) as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub moments: Moments,
    pub diagnostics: SimDiagnostics,
}

/// Replicates per sequential block; blocks are merged in index order so the
/// result does not depend on the thread count.
const BLOCK: u64 = 32;

/// Run `observe(replicate)` for `0..replicates` in parallel and accumulate
/// the returned vectors.
pub fn run_ensemble<F>(replicates: u64, dim: usize, threads: Option<usize>, observe: F) -> Result<EnsembleStats>
where
    F: Fn(u64) -> Result<(Vec<f64>, SimDiagnostics)> + Sync,
{
    if replicates == 0 {
        return Err(invalid("replicates", "must be at least 1"));
    }
    let blocks = replicates.div_ceil(BLOCK);
    let work = || -> Result<Vec<EnsembleStats>> {
        (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut m = Moments::new(dim);
                let mut d = SimDiagnostics::default();
                for r in b * BLOCK..((b + 1) * BLOCK).min(replicates) {
                    let (x, diag) = observe(r)?;
                    if x.len() != dim {
                        return Err(LabError::ShapeMismatch(format!("observable has {} entries, expected {dim}", x.len())));
                    }
                    m.push(&x);
                    d.merge(&diag);
                }
                Ok(EnsembleStats {
                    moments: m,
                    diagnostics: d,
                })
            })
            .collect()
    };
    let parts = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| invalid("threads", e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let mut total = EnsembleStats {
        moments: Moments::new(dim),
        diagnostics: SimDiagnostics::default(),
    };
    for p in &parts {
        total.moments.merge(&p.moments);
        total.diagnostics.merge(&p.diagnostics);
    }
    Ok(total)
}

/// A point evaluation `(time step, node)` of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub step: usize,
    pub node: usize,
}

/// Which process an ensemble observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    U,
    V,
}

/// Ensemble of probe values of `u^eps` or `v^eps` with streamed noise.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_probes(
    model: &ModelSpec,
    grid: &Grid,
    scheme: &SimScheme,
    process: Process,
    probes: &[Probe],
    replicates: u64,
    seed: u64,
    threads: Option<usize>,
) -> Result<EnsembleStats> {
    for p in probes {
        if p.step > grid.nt || p.node >= grid.len() {
            return Err(invalid("probes", format!("probe {p:?} outside the grid")));
        }
    }
    let marks = model.mark_grid(grid, scheme.marks)?;
    let u0 = match process {
        Process::V if model.epsilon > 0.0 => Some(deterministic_flow(model, grid)?),
        _ => None,
    };
    run_ensemble(replicates, probes.len(), threads, |r| {
        let noise = StreamNoise::new(grid, marks, seed, r);
        let out = match (process, &u0) {
            (Process::V, Some(u0)) => simulate_v_on(model, grid, scheme, &noise, u0)?,
            (Process::V, None) => simulate_v(model, grid, scheme, &noise)?,
            (Process::U, _) => simulate_u(model, grid, scheme, &noise)?,
        };
        let x = probes.iter().map(|p| out.path.value(p.step, p.node)).collect();
        Ok((x, out.diagnostics))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Coefficient, InitialPreset};
    use crate::noise::sample_white_noise;
    use proptest::prelude::*;

    fn small() -> Grid {
        Grid::new(6.0, 96, 1.0, 50).unwrap()
    }

    #[test]
    fn zero_noise_gives_deterministic_flow() {
        let g = small();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 0.0, 0.25).unwrap();
        let marks = m.mark_grid(&g, 32).unwrap();
        let w = sample_white_noise(&g, &marks, 1, 0).unwrap();
        let scheme = SimScheme { marks: 32, projection: None };
        let out = simulate_u(&m, &g, &scheme, &w).unwrap();
        assert_eq!(out.path, deterministic_flow(&m, &g).unwrap());
    }

    #[test]
    fn zero_coefficient_leaves_flow_unchanged() {
        let g = small();
        let f = Field::from_fn(&g, crate::models::normal_cdf).unwrap();
        let m = ModelSpec::custom(Coefficient::Zero, (0.0, 1.0), f, 0.1, 0.25).unwrap();
        let marks = m.mark_grid(&g, 16).unwrap();
        let w = sample_white_noise(&g, &marks, 1, 0).unwrap();
        let scheme = SimScheme { marks: 16, projection: None };
        let out = simulate_u(&m, &g, &scheme, &w).unwrap();
        assert!(out.path.max_abs_diff(&deterministic_flow(&m, &g).unwrap()) < 1e-15);
        let v = simulate_v(&m, &g, &scheme, &w).unwrap();
        assert!(v.path.frames().iter().all(|f| f.values().iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn direct_v_matches_rescaled_u() {
        let g = small();
        for m in [
            ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap(),
            ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap(),
        ] {
            let scheme = SimScheme { marks: 64, projection: None };
            let marks = m.mark_grid(&g, 64).unwrap();
            let w = sample_white_noise(&g, &marks, 3, 1).unwrap();
            let u = simulate_u(&m, &g, &scheme, &w).unwrap();
            let v = simulate_v(&m, &g, &scheme, &w).unwrap();
            let u0 = deterministic_flow(&m, &g).unwrap();
            let vr = center_rescale(&u.path, &u0, &m).unwrap();
            assert!(vr.max_abs_diff(&v.path) < 1e-9, "{}", vr.max_abs_diff(&v.path));
        }
    }

    #[test]
    fn fvp_stays_in_unit_interval() {
        let g = small();
        let m = ModelSpec::fvp(&g, InitialPreset::PointMassCdf, 0.05, 0.25).unwrap();
        let scheme = SimScheme { marks: 64, projection: None };
        let out = simulate_u(&m, &g, &scheme, &StreamNoise::new(&g, m.mark_grid(&g, 64).unwrap(), 9, 0)).unwrap();
        for f in out.path.frames() {
            assert!(f.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // far tails stay pinned near 0 and 1
        let last = out.path.frame(g.nt);
        assert!(last[0].abs() < 1e-6 && (last[g.nx] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn isotonic_examples() {
        let mut x = vec![1.0, 3.0, 2.0, 4.0];
        isotonic_projection(&mut x);
        assert_eq!(x, vec![1.0, 2.5, 2.5, 4.0]);
        let mut y = vec![3.0, 2.0, 1.0];
        isotonic_projection(&mut y);
        assert_eq!(y, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn moments_merge_equals_sequential() {
        let xs: Vec<[f64; 2]> = (0..57).map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos() * i as f64]).collect();
        let mut all = Moments::new(2);
        xs.iter().for_each(|x| all.push(x));
        let mut a = Moments::new(2);
        let mut b = Moments::new(2);
        xs[..20].iter().for_each(|x| a.push(x));
        xs[20..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        for i in 0..2 {
            assert!((a.mean[i] - all.mean[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!((a.covariance(i, j).unwrap() - all.covariance(i, j).unwrap()).abs() < 1e-10);
            }
        }
        let mut one = Moments::new(1);
        one.push(&[2.0]);
        assert!(one.variance().is_none());
    }

    #[test]
    fn ensemble_is_thread_count_invariant() {
        let g = Grid::new(4.0, 32, 0.5, 10).unwrap();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-2, 0.25).unwrap();
        let probes = [Probe { step: 10, node: 16 }, Probe { step: 5, node: 12 }];
        let scheme = SimScheme { marks: 32, projection: None };
        let a = ensemble_probes(&m, &g, &scheme, Process::V, &probes, 70, 5, Some(1)).unwrap();
        let b = ensemble_probes(&m, &g, &scheme, Process::V, &probes, 70, 5, Some(4)).unwrap();
        assert_eq!(a.moments, b.moments);
        assert_eq!(a.moments.count, 70);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fvp_paths_bounded_and_monotone_preset(seed in 0u64..1000, eps in 1e-4f64..1e-1) {
            let g = Grid::new(4.0, 40, 0.5, 20).unwrap();
            let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, eps, 0.25).unwrap();
            let scheme = SimScheme { marks: 32, projection: None };
            let out = simulate_u(&m, &g, &scheme, &StreamNoise::new(&g, m.mark_grid(&g, 32).unwrap(), seed, 0)).unwrap();
            for f in out.path.frames() {
                prop_assert!(f.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn monotone_projection_is_monotone(v in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let mut x = v.clone();
            isotonic_projection(&mut x);
            prop_assert!(x.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            let s0: f64 = v.iter().sum();
            let s1: f64 = x.iter().sum();
            prop_assert!((s0 - s1).abs() < 1e-9);
        }
    }
}
