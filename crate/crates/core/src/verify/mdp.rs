//! Desk-scale consequences of the moderate deviation principle.
//!
//! The exponential tail statement itself concerns probabilities of order
//! `exp(-c / a(eps)^2)` and cannot be observed with desk-sized ensembles.
//! What can be checked is the quadratic form that pins the rate down:
//!
//! (a) the variance of `v^eps / a(eps)` does not depend on `eps` and equals
//!     the limit covariance;
//! (b) the cheapest control reaching `v_T(y*) = delta` costs
//!     `delta^2 / (2 sigma^2)`;
//! (c) moderate tail frequencies of `v^eps` follow the Gaussian tail with
//!     variance `a(eps)^2 sigma^2`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::Grid;
use crate::models::{deterministic_flow, normal_cdf, ModelSpec};
use crate::sim::{run_ensemble, simulate_v_on, Probe, SimDiagnostics, SimScheme, StreamNoise};
use crate::variational::hitting_rate;

use super::config::RunConfig;
use super::covariance::{gaussian_limit_covariance_matrix, CovarianceQuadrature};
use super::{share_runtime, CheckResult};

/// Fewest exceedances for a tail frequency to be used.
pub const MIN_TAIL_COUNT: f64 = 10.0;
/// Range of tail frequencies the tail check accepts.
pub const TAIL_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Probe statistics of `v^eps / a(eps)` from one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationEnsemble {
    pub epsilon: f64,
    pub count: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    /// `exceedance[p][z]`: frequency of `v / a > z sigma_p`.
    pub exceedance: Vec<Vec<f64>>,
    pub diagnostics: SimDiagnostics,
}

/// Limit variances `sigma^2(t_p, y_p)`, grouping probes by time.
pub fn limit_variances(model: &ModelSpec, grid: &Grid, probes: &[Probe]) -> Result<Vec<f64>> {
    let mut by_step: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in probes.iter().enumerate() {
        if p.step == 0 || p.step > grid.nt || p.node >= grid.len() {
            return Err(invalid("probes", format!("probe {p:?} must lie at t > 0 on the grid")));
        }
        by_step.entry(p.step).or_default().push(i);
    }
    let mut out = vec![0.0; probes.len()];
    for (step, idx) in by_step {
        let ys: Vec<f64> = idx.iter().map(|&i| grid.node(probes[i].node)).collect();
        let c = gaussian_limit_covariance_matrix(model, grid, grid.time(step), &ys, &CovarianceQuadrature::default())?;
        for (r, &i) in idx.iter().enumerate() {
            out[i] = c[r][r];
        }
    }
    Ok(out)
}

/// Ensemble of `v^eps / a(eps)` at the probes, with exceedance frequencies
/// of the levels `z sigma_p` for each `z` in `tail_z`.
#[allow(clippy::too_many_arguments)]
pub fn fluctuation_ensemble(
    model: &ModelSpec,
    grid: &Grid,
    scheme: &SimScheme,
    probes: &[Probe],
    sigma2: &[f64],
    tail_z: &[f64],
    replicates: u64,
    seed: u64,
    threads: Option<usize>,
) -> Result<FluctuationEnsemble> {
    if sigma2.len() != probes.len() {
        return Err(invalid("sigma2", "one limit variance per probe"));
    }
    if model.epsilon <= 0.0 {
        return Err(invalid("epsilon", "the fluctuation field needs eps > 0"));
    }
    for p in probes {
        if p.step > grid.nt || p.node >= grid.len() {
            return Err(invalid("probes", format!("probe {p:?} outside the grid")));
        }
    }
    let u0 = deterministic_flow(model, grid)?;
    let marks = model.mark_grid(grid, scheme.marks)?;
    let a = model.a_eps();
    let np = probes.len();
    let nz = tail_z.len();
    let levels: Vec<f64> = sigma2
        .iter()
        .flat_map(|s| tail_z.iter().map(move |z| z * s.max(0.0).sqrt()))
        .collect();
    let stats = run_ensemble(replicates, np * (1 + nz), threads, |r| {
        let noise = StreamNoise::new(grid, marks, seed, r);
        let out = simulate_v_on(model, grid, scheme, &noise, &u0)?;
        let x: Vec<f64> = probes.iter().map(|p| out.path.value(p.step, p.node) / a).collect();
        let mut obs = x.clone();
        for (p, xp) in x.iter().enumerate() {
            obs.extend(levels[p * nz..(p + 1) * nz].iter().map(|l| if *xp > *l { 1.0 } else { 0.0 }));
        }
        Ok((obs, out.diagnostics))
    })?;
    let m = &stats.moments;
    let variance = (0..np).map(|p| m.covariance(p, p).unwrap_or(f64::NAN)).collect();
    let variance_se = (0..np).map(|p| m.variance_std_error(p).unwrap_or(f64::NAN)).collect();
    let exceedance = (0..np).map(|p| m.mean[np + p * nz..np + (p + 1) * nz].to_vec()).collect();
    Ok(FluctuationEnsemble {
        epsilon: model.epsilon,
        count: m.count,
        mean: m.mean[..np].to_vec(),
        variance,
        variance_se,
        exceedance,
        diagnostics: stats.diagnostics,
    })
}

fn probe_label(grid: &Grid, p: &Probe) -> String {
    format!("t={},y={}", grid.time(p.step), grid.node(p.node))
}

/// Ensemble variances against the limit, within `se_mult` standard errors.
pub fn variance_match_checks(
    prefix: &str,
    grid: &Grid,
    probes: &[Probe],
    ens: &FluctuationEnsemble,
    sigma2: &[f64],
    se_mult: f64,
) -> Vec<CheckResult> {
    probes
        .iter()
        .enumerate()
        .map(|(p, probe)| {
            let se = ens.variance_se[p];
            CheckResult::within(
                format!("{prefix}.variance[eps={:e},{}]", ens.epsilon, probe_label(grid, probe)),
                ens.variance[p],
                sigma2[p],
                se_mult * se,
            )
            .with_se(se)
        })
        .collect()
}

/// Check (a): per probe, the relative spread of the variances across `eps`
/// and each variance's relative distance to the limit are within `rel_tol`.
pub fn scale_invariance_checks(
    prefix: &str,
    grid: &Grid,
    probes: &[Probe],
    ensembles: &[FluctuationEnsemble],
    sigma2: &[f64],
    rel_tol: f64,
) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (p, probe) in probes.iter().enumerate() {
        let label = probe_label(grid, probe);
        let vs: Vec<f64> = ensembles.iter().map(|e| e.variance[p]).collect();
        if sigma2[p] == 0.0 {
            let worst = vs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            out.push(CheckResult::within(format!("{prefix}.zero_variance[{label}]"), worst, 0.0, 1e-12));
            continue;
        }
        let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        out.push(
            CheckResult::within(format!("{prefix}.eps_spread[{label}]"), (hi - lo) / sigma2[p], 0.0, rel_tol)
                .with_detail(format!("variances {vs:.4?}")),
        );
        for e in ensembles {
            out.push(
                CheckResult::within(
                    format!("{prefix}.limit_ratio[eps={:e},{label}]", e.epsilon),
                    e.variance[p] / sigma2[p],
                    1.0,
                    rel_tol,
                )
                .with_se(e.variance_se[p] / sigma2[p]),
            );
        }
    }
    out
}

/// Check (b): the hitting rate from the adjoint of the discrete controlled
/// map against `delta^2 / (2 sigma^2)` from the continuum covariance.
#[allow(clippy::too_many_arguments)]
pub fn duality_check(
    prefix: &str,
    model: &ModelSpec,
    grid: &Grid,
    na: usize,
    node: usize,
    delta: f64,
    sigma2: f64,
    rel_tol: f64,
) -> Result<CheckResult> {
    let start = Instant::now();
    let u0 = deterministic_flow(model, grid)?;
    let marks = model.mark_grid(grid, na)?;
    let (rate, discrete_sigma2) = hitting_rate(model, &u0, grid, marks, node, delta)?;
    let label = format!("{prefix}.duality[delta={delta},y={}]", grid.node(node));
    if sigma2 <= 0.0 {
        return Ok(CheckResult::within(label, discrete_sigma2, 0.0, 1e-12)
            .with_detail("zero limit variance: the level is unreachable")
            .timed(start));
    }
    let predicted = delta * delta / (2.0 * sigma2);
    Ok(CheckResult::within(label, rate.value / predicted, 1.0, rel_tol)
        .with_detail(format!("rate {:.6e}, quadratic form {predicted:.6e}", rate.value))
        .timed(start))
}

/// Check (c): `-log` of the empirical exceedance frequency of `z sigma`
/// against `-log(1 - Phi(z))`, within `se_mult` standard errors on the log
/// scale. Frequencies outside [`TAIL_RANGE`] or with fewer than
/// [`MIN_TAIL_COUNT`] hits are inconclusive.
pub fn tail_checks(
    prefix: &str,
    grid: &Grid,
    probes: &[Probe],
    ens: &FluctuationEnsemble,
    tail_z: &[f64],
    se_mult: f64,
) -> Vec<CheckResult> {
    let n = ens.count as f64;
    let mut out = Vec::new();
    for (p, probe) in probes.iter().enumerate() {
        for (zi, &z) in tail_z.iter().enumerate() {
            let name = format!("{prefix}.tail[eps={:e},{},z={z}]", ens.epsilon, probe_label(grid, probe));
            let target = -(1.0 - normal_cdf(z)).ln();
            let ph = ens.exceedance[p][zi];
            if ph * n < MIN_TAIL_COUNT || ph < TAIL_RANGE.0 || ph > TAIL_RANGE.1 {
                out.push(CheckResult::inconclusive(
                    name,
                    if ph > 0.0 { -ph.ln() } else { f64::INFINITY },
                    target,
                    format!("{} exceedances in {}", (ph * n).round(), ens.count),
                ));
                continue;
            }
            let se = ((1.0 - ph) / (n * ph)).sqrt();
            out.push(CheckResult::within(name, -ph.ln(), target, se_mult * se).with_se(se));
        }
    }
    out
}

/// The three desk-scale checks (a), (b), (c) for every probe of a run
/// configuration. Check (b) is run for probes at the final time.
pub fn mdp_consistency_scan(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let eps = &cfg.model.epsilon;
    let mut distinct = eps.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid("epsilon", "the scan needs at least three distinct values of eps"));
    }
    let start = Instant::now();
    let grid = cfg.grid()?;
    let base = cfg.model_spec(&grid, eps[0])?;
    let probes = cfg.probes(&grid, &base)?;
    let scheme = cfg.scheme();
    let sigma2 = limit_variances(&base, &grid, &probes)?;
    let ck = &cfg.checks;
    let mut ensembles = Vec::with_capacity(eps.len());
    let mut tails = Vec::new();
    for (i, &e) in eps.iter().enumerate() {
        let model = base.with_epsilon(e)?;
        let seed = cfg.ensemble.seed.wrapping_add(i as u64);
        let ens = fluctuation_ensemble(&model, &grid, &scheme, &probes, &sigma2, &ck.tail_z, cfg.ensemble.replicates, seed, threads)?;
        tails.extend(tail_checks("mdp.c", &grid, &probes, &ens, &ck.tail_z, ck.tail_se));
        ensembles.push(ens);
    }
    let mut out = share_runtime(scale_invariance_checks("mdp.a", &grid, &probes, &ensembles, &sigma2, ck.variance_tol), start);
    for (p, probe) in probes.iter().enumerate() {
        if probe.step == grid.nt {
            out.push(duality_check("mdp.b", &base, &grid, scheme.marks, probe.node, ck.delta, sigma2[p], ck.duality_tol)?);
        }
    }
    out.extend(tails);
    Ok(out)
}
