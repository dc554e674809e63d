//! Reference verification suites on fixed configurations. The command line
//! (`check --suite ...`) and the acceptance test run the same functions.

use std::sync::Arc;
use std::time::Instant;

use crate::error::Result;
use crate::grid::{heat_propagate, heat_propagate_padded, Field, Grid, Padding};
use crate::measures::path_to_measure_path;
use crate::models::{deterministic_flow, normal_cdf, Coefficient, InitialPreset, ModelSpec};
use crate::noise::MarkGrid;
use crate::sim::{Probe, SimScheme};
use crate::variational::{
    change_of_variables_check, mu0_path, rate_fvp, rate_general, rate_sbm, solve_controlled, Control, RnOptions,
    DEFAULT_RATE_TOL,
};

use super::covariance::gaussian_limit_covariance;
use super::mdp::{duality_check, fluctuation_ensemble, limit_variances, scale_invariance_checks, variance_match_checks};
use super::qv::martingale_qv_check;
use super::scaling::{additive_increment_variance, moment_scaling_scan, ScanAxis};
use super::{share_runtime, weighted_slope, CheckResult};

/// Ensemble size of the Monte Carlo suites.
pub const REPLICATES: u64 = 2000;
pub const SEED: u64 = 42;

fn sweep(n: usize, seed: u64) -> impl Iterator<Item = (f64, f64)> {
    let mut s = seed | 1;
    let mut unif = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n).map(move |_| (unif(), unif()))
}

/// Closed-form moduli of the two population coefficients over a random
/// sweep of states, and the peak of the Fleming-Viot bound.
pub fn coefficient_identities() -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let g = Grid::new(10.0, 256, 1.0, 10)?;
    let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?;
    let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?;
    let a = sbm.marks.1;
    let mut e_sbm = 0.0_f64;
    let mut e_fvp = 0.0_f64;
    for (i, (x, y)) in sweep(10_000, 0x5EED).enumerate() {
        let yloc = g.node(i % g.len());
        let (u1, u2) = (a * (2.0 * x - 1.0), a * (2.0 * y - 1.0));
        e_sbm = e_sbm.max((sbm.g_l2_modulus(yloc, u1, u2)? - (u1 - u2).abs()).abs());
        let d = x - y;
        e_fvp = e_fvp.max((fvp.g_l2_modulus(yloc, x, y)? - (d.abs() - d * d)).abs());
    }
    let bound = fvp.g_l2_bound(0.0, 0.5)?;
    Ok(share_runtime(
        vec![
            CheckResult::within("identities.sbm_modulus", e_sbm, 0.0, 1e-12),
            CheckResult::within("identities.fvp_modulus", e_fvp, 0.0, 1e-12),
            CheckResult::within("identities.fvp_bound_half", bound, 0.25, 0.0),
        ],
        start,
    ))
}

/// Chapman-Kolmogorov for the lattice semigroup and preservation of
/// constants, on `nx = 256`, `L = 10`.
pub fn heat_semigroup_checks() -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let g = Grid::new(10.0, 256, 1.0, 10)?;
    let f = Field::from_fn(&g, |y| (-(y - 0.3) * (y - 0.3)).exp() * (1.0 + 0.5 * (2.0 * y).sin()))?;
    let mut ck = 0.0_f64;
    for (s, t) in [(0.05, 0.05), (0.1, 0.3), (0.25, 0.5)] {
        let two = heat_propagate(&heat_propagate(&f, s, &g)?, t, &g)?;
        let one = heat_propagate(&f, s + t, &g)?;
        for i in g.interior(g.half_width - 4.0) {
            ck = ck.max((two[i] - one[i]).abs());
        }
    }
    let c = Field::from_fn(&g, |_| 1.7)?;
    let mut cst = 0.0_f64;
    let edge = heat_propagate_padded(&c, 0.5, &g, Padding::Edge)?;
    cst = cst.max(edge.values().iter().map(|v| (v - 1.7).abs()).fold(0.0, f64::max));
    let zero = heat_propagate(&c, 0.5, &g)?;
    for i in g.interior(g.half_width - 4.0) {
        cst = cst.max((zero[i] - 1.7).abs());
    }
    Ok(share_runtime(
        vec![
            CheckResult::within("heat.chapman_kolmogorov", ck, 0.0, 1e-8),
            CheckResult::within("heat.constants", cst, 0.0, 1e-8),
        ],
        start,
    ))
}

fn hashed_control(marks: MarkGrid, nt: usize, seed: u64) -> Result<Control> {
    let values = sweep(nt * marks.n, seed).map(|(x, _)| 2.0 * x - 1.0).collect();
    Control::new(marks, nt, values)
}

/// Linearity of `gamma`, quadratic scaling of the rate, and invisibility of
/// constant-in-mark controls for Fleming-Viot.
pub fn controlled_map_checks() -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let g = Grid::new(6.0, 64, 1.0, 32)?;
    let mut out = Vec::new();
    let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?;
    let sbm = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?;
    for (name, m) in [("fvp", &fvp), ("sbm", &sbm)] {
        let u0 = deterministic_flow(m, &g)?;
        let marks = m.mark_grid(&g, 64)?;
        let h1 = hashed_control(marks, g.nt, 11)?;
        let h2 = hashed_control(marks, g.nt, 23)?;
        let comb = Control::new(marks, g.nt, h1.values.iter().zip(&h2.values).map(|(a, b)| 1.5 * a - 2.0 * b).collect())?;
        let v1 = solve_controlled(&h1, m, &u0, &g)?;
        let v2 = solve_controlled(&h2, m, &u0, &g)?;
        let vc = solve_controlled(&comb, m, &u0, &g)?;
        let mut err = 0.0_f64;
        let mut scale = 0.0_f64;
        for k in 0..=g.nt {
            for i in 0..g.len() {
                let lin = 1.5 * v1.value(k, i) - 2.0 * v2.value(k, i);
                err = err.max((vc.value(k, i) - lin).abs());
                scale = scale.max(lin.abs());
            }
        }
        out.push(CheckResult::within(format!("controlled.{name}.linearity"), err / scale.max(1.0), 0.0, 1e-12));
        let r1 = rate_general(&v1, m, &u0, &g, marks, DEFAULT_RATE_TOL)?;
        let r3 = rate_general(&v1.scaled(3.0), m, &u0, &g, marks, DEFAULT_RATE_TOL)?;
        out.push(
            CheckResult::within(format!("controlled.{name}.quadratic_scaling"), r3.value / (9.0 * r1.value), 1.0, 1e-6)
                .with_detail(format!("I(v) = {:.6e}, iterations {} and {}", r1.value, r1.iterations, r3.iterations)),
        );
    }
    let u0 = deterministic_flow(&fvp, &g)?;
    let marks = fvp.mark_grid(&g, 256)?;
    let h = Control::from_fn(marks, &g, |s, _| 1.0 + (3.0 * s).sin())?;
    let v = solve_controlled(&h, &fvp, &u0, &g)?;
    let sup = v
        .frames()
        .iter()
        .flat_map(|f| f.values().iter())
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    out.push(CheckResult::within("controlled.fvp.null_space", sup, 0.0, 1e-2));
    Ok(share_runtime(out, start))
}

fn smooth_witness(marks: MarkGrid, g: &Grid, seed: u64) -> Result<Control> {
    let c: Vec<f64> = sweep(6, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)).map(|(x, _)| 2.0 * x - 1.0).collect();
    let (lo, hi) = (marks.lo, marks.hi);
    let pi = std::f64::consts::PI;
    Control::from_fn(marks, g, |t, a| {
        let x = (a - lo) / (hi - lo);
        let mut v = 0.0;
        for p in 0..3 {
            for q in 0..2 {
                v += c[p * 2 + q] * (pi * p as f64 * t).cos() * (pi * q as f64 * x).cos();
            }
        }
        v
    })
}

/// Worst relative gap between the variational rate and the closed form
/// over five smooth witness controls.
fn witness_gap(kind: &str, level: usize) -> Result<f64> {
    let f = 1usize << level;
    let g = Grid::new(5.0, 32 * f, 1.0, 8 * f)?;
    let m = if kind == "sbm" {
        ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?
    } else {
        ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?
    };
    let marks = m.mark_grid(&g, 8 * f)?;
    let u0 = deterministic_flow(&m, &g)?;
    let mu0 = mu0_path(&m, &g, 1.0)?;
    let mut worst = 0.0_f64;
    for seed in 1..=5 {
        let h = smooth_witness(marks, &g, seed)?;
        let v = solve_controlled(&h, &m, &u0, &g)?;
        let rg = rate_general(&v, &m, &u0, &g, marks, DEFAULT_RATE_TOL)?;
        let om = path_to_measure_path(&v, &g, 1.0)?;
        let rc = if kind == "sbm" {
            rate_sbm(&om, &mu0, &g, &RnOptions::default())?
        } else {
            rate_fvp(&om, &mu0, &g, &RnOptions::default())?
        };
        worst = worst.max((rg.value - rc.value).abs() / rg.value.max(rc.value));
    }
    Ok(worst)
}

/// Variational rate against the explicit Radon-Nikodym form on
/// `(nt, na, nx) = (8, 8, 32)`, and monotone decrease of the gap over two
/// doublings.
pub fn rate_equivalence_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in ["sbm", "fvp"] {
        let start = Instant::now();
        let gaps = [witness_gap(kind, 0)?, witness_gap(kind, 1)?, witness_gap(kind, 2)?];
        let detail = format!("gaps {:.3e} {:.3e} {:.3e}", gaps[0], gaps[1], gaps[2]);
        let growth = (gaps[1] / gaps[0]).max(gaps[2] / gaps[1]);
        let checks = vec![
            CheckResult::within(format!("rate_equivalence.{kind}.coarse"), gaps[0], 0.0, 0.02).with_detail(detail.clone()),
            // ratio of successive gaps; the refinement is monotone iff it stays below one
            CheckResult::within(format!("rate_equivalence.{kind}.refinement"), growth.min(f64::MAX), 0.0, 1.0 - 1e-12)
                .with_detail(detail),
        ];
        out.extend(share_runtime(checks, start));
    }
    Ok(out)
}

/// `int_U h^2 da = int h(u0)^2 dmu0` for `u0` the Gaussian distribution
/// function, with `h = 1` and `h(a) = a`.
pub fn change_of_variables_checks() -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let g = Grid::new(10.0, 2000, 1.0, 4)?;
    let u0 = Field::from_fn(&g, normal_cdf)?;
    let m0 = Field::from_fn(&g, |y| (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt())?;
    let marks = MarkGrid::new(0.0, 1.0, 1000)?;
    let one = change_of_variables_check(|_| 1.0, &marks, &u0, &m0, &g)?;
    let id = change_of_variables_check(|a| a, &marks, &u0, &m0, &g)?;
    Ok(share_runtime(
        vec![
            CheckResult::within("change_of_variables.h_one", one, 0.0, 1e-4),
            CheckResult::within("change_of_variables.h_identity", id, 0.0, 1e-4),
        ],
        start,
    ))
}

fn population_grid() -> Result<Grid> {
    Grid::new(8.0, 128, 1.0, 200)
}

fn population_models(g: &Grid, eps: f64) -> Result<[(&'static str, ModelSpec); 2]> {
    Ok([
        ("fvp", ModelSpec::fvp(g, InitialPreset::GaussianCdf, eps, 0.25)?),
        ("sbm", ModelSpec::sbm(g, InitialPreset::GaussianCdf, eps, 0.25)?),
    ])
}

fn population_probes(g: &Grid) -> Vec<Probe> {
    [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|&y| Probe {
            step: g.nt,
            node: g.node_index(y).expect("probe on a node"),
        })
        .collect()
}

/// Realized quadratic variation of `<mu, f>` against its compensator for a
/// Gaussian bump, plus the degenerate `f = 1` Fleming-Viot case.
pub fn martingale_checks(threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let g = population_grid()?;
    let scheme = SimScheme::default();
    let bump = Field::from_fn(&g, |y| (-y * y).exp())?;
    let mut out = Vec::new();
    for (name, m) in population_models(&g, 1e-3)? {
        let mut r = martingale_qv_check(&m, &g, &scheme, &bump, REPLICATES, SEED, threads)?;
        r.name = format!("martingale_qv.{name}.bump");
        out.push(r);
    }
    let fvp = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25)?;
    let ones = Field::from_fn(&g, |_| 1.0)?;
    let mut r = martingale_qv_check(&fvp, &g, &scheme, &ones, 200, SEED, threads)?;
    r.name = "martingale_qv.fvp.constant".into();
    out.push(r);
    Ok(out)
}

/// The frozen-coefficient toy `G = 1/2` white noise has limit variance
/// `1 / (4 sqrt(pi))` at `(1, 0)`; the population models' ensemble
/// variances at `eps = 1e-4` match the limit covariance within 3 SE.
pub fn fluctuation_covariance_checks(threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let tg = Grid::new(8.0, 160, 1.0, 10)?;
    let toy = ModelSpec::custom(
        Coefficient::SpatialWhite(Arc::new(|_, _| 0.5)),
        (0.0, 1.0),
        Field::zeros(tg.len()),
        1e-4,
        0.25,
    )?;
    let exact = 1.0 / (4.0 * std::f64::consts::PI.sqrt());
    let v = gaussian_limit_covariance(&toy, &tg, 1.0, 0.0, 0.0)?;
    let mut out = vec![CheckResult::within("covariance.white_toy", v / exact, 1.0, 0.02)
        .with_detail(format!("quadrature {v:.6e}, closed form {exact:.6e}"))
        .timed(start)];
    let g = population_grid()?;
    let probes = population_probes(&g);
    for (name, m) in population_models(&g, 1e-4)? {
        let start = Instant::now();
        let s2 = limit_variances(&m, &g, &probes)?;
        let ens = fluctuation_ensemble(&m, &g, &SimScheme::default(), &probes, &s2, &[], REPLICATES, SEED, threads)?;
        out.extend(share_runtime(variance_match_checks(&format!("covariance.{name}"), &g, &probes, &ens, &s2, 3.0), start));
    }
    Ok(out)
}

/// Probe variances of `v^eps / a(eps)` for `eps` in `{1e-2, 1e-3, 1e-4}`
/// agree within 10% of one another and of the limit.
pub fn scale_invariance_suite(threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let g = population_grid()?;
    let probes = population_probes(&g);
    let mut out = Vec::new();
    for (name, base) in population_models(&g, 1e-2)? {
        let start = Instant::now();
        let s2 = limit_variances(&base, &g, &probes)?;
        let mut ens = Vec::new();
        for (i, eps) in [1e-2, 1e-3, 1e-4].into_iter().enumerate() {
            let m = base.with_epsilon(eps)?;
            ens.push(fluctuation_ensemble(&m, &g, &SimScheme::default(), &probes, &s2, &[], REPLICATES, SEED + i as u64, threads)?);
        }
        out.extend(share_runtime(scale_invariance_checks(&format!("scale_invariance.{name}"), &g, &probes, &ens, &s2, 0.10), start));
    }
    Ok(out)
}

/// `min { I : v_T(0) = 1 } = 1 / (2 sigma^2)` with the rate from the
/// adjoint of the discrete controlled map and `sigma^2` from the
/// continuum covariance quadrature.
pub fn duality_checks() -> Result<Vec<CheckResult>> {
    let g = Grid::new(6.0, 256, 1.0, 200)?;
    let node = g.node_index(0.0).expect("origin on a node");
    let mut out = Vec::new();
    for (name, m) in population_models(&g, 1e-3)? {
        let s2 = gaussian_limit_covariance(&m, &g, 1.0, 0.0, 0.0)?;
        out.push(duality_check(&format!("duality.{name}"), &m, &g, 256, node, 1.0, s2, 0.02)?);
    }
    Ok(out)
}

/// Space-time white noise of unit amplitude: log-log slope of the second
/// increment moment over separations `dx, 2dx, 4dx, 8dx` is `1 +- 0.15`.
pub fn moment_scaling_checks(threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    // tau = dt / dx^2 = 0.05 keeps the first-step bias of the scheme small
    let g = Grid::new(2.0, 80, 1.0, 8000)?;
    let m = ModelSpec::custom(
        Coefficient::SpatialWhite(Arc::new(|_, _| 1.0)),
        (0.0, 1.0),
        Field::zeros(g.len()),
        1e-2,
        0.25,
    )?;
    let base = Probe {
        step: g.nt,
        node: g.node_index(0.0).expect("origin on a node"),
    };
    let seps = [1, 2, 4, 8];
    let table = moment_scaling_scan(&m, &g, &SimScheme::default(), base, &seps, ScanAxis::Space, REPLICATES, SEED, threads)?;
    let exact = additive_increment_variance(&m, &g, base, &seps)?;
    let xs: Vec<f64> = seps.iter().map(|&s| (s as f64 * g.dx()).ln()).collect();
    let ys: Vec<f64> = exact.iter().map(|v| v.ln()).collect();
    let oracle = weighted_slope(&xs, &ys, &[1.0; 4]).map(|s| s.0).unwrap_or(f64::NAN);
    let fit2 = table.fit(2).cloned();
    let fit4 = table.fit(4).cloned();
    let (slope, se) = fit2.as_ref().map(|f| (f.slope, f.se)).unwrap_or((f64::NAN, f64::NAN));
    let detail = format!(
        "95% CI [{:.3}, {:.3}], exact discrete slope {oracle:.3}, fourth-moment slope {:.3}",
        fit2.as_ref().map_or(f64::NAN, |f| f.ci_low),
        fit2.as_ref().map_or(f64::NAN, |f| f.ci_high),
        fit4.as_ref().map_or(f64::NAN, |f| f.slope),
    );
    Ok(vec![CheckResult::within("moment_scaling.space.n2", slope, 1.0, 0.15)
        .with_se(se)
        .with_detail(detail)
        .timed(start)])
}

/// The fast analytic suite: coefficient identities, heat semigroup,
/// controlled-map algebra and change of variables.
pub fn identities_suite() -> Result<Vec<CheckResult>> {
    let mut out = coefficient_identities()?;
    out.extend(heat_semigroup_checks()?);
    out.extend(controlled_map_checks()?);
    out.extend(change_of_variables_checks()?);
    Ok(out)
}
