//! Martingale-problem check: the realized quadratic variation of
//! `<mu^eps, f>` against its predicted compensator.
//!
//! Per path, `M_k = <mu_k, f> - <mu_0, f> - sum_{l<k} <mu_l, Delta f / 2> dt`
//! and its realized quadratic variation `sum_k (dM_k)^2` is compared with
//! `eps sum_k q_k dt`, where `q = <mu, f^2>` (super-Brownian) or
//! `<mu, f^2> - <mu, f>^2` (Fleming-Viot). Ensemble means are compared.

use std::time::Instant;

use crate::error::{invalid, Result};
use crate::grid::{Field, Grid};
use crate::models::{ModelKind, ModelSpec};
use crate::sim::{run_ensemble, simulate_u, SimScheme, StreamNoise};

use super::CheckResult;

/// Relative tolerance on the ratio of ensemble means.
pub const QV_TOL: f64 = 0.05;
/// Both sides at most this fraction of `eps T sup f^2` count as the
/// degenerate `0 = 0` case; mass leaking through the window edges keeps
/// them slightly above zero.
pub const QV_ZERO: f64 = 1e-6;

/// `1/2` times the second difference of `f` with replicated end values, so
/// constants map to zero.
fn half_laplacian(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            let l = f[i.saturating_sub(1)];
            let r = f[(i + 1).min(n - 1)];
            0.5 * (l - 2.0 * f[i] + r) / (dx * dx)
        })
        .collect()
}

/// `<mu, g>` for the measure with distribution function `u`, i.e.
/// `sum_i g_i (u_{i+1} - u_i)`.
fn pairing(u: &[f64], g: &[f64]) -> f64 {
    u.windows(2).zip(g).map(|(w, gi)| gi * (w[1] - w[0])).sum()
}

/// Compare ensemble means of realized and predicted quadratic variation.
pub fn martingale_qv_check(
    model: &ModelSpec,
    grid: &Grid,
    scheme: &SimScheme,
    f: &Field,
    replicates: u64,
    seed: u64,
    threads: Option<usize>,
) -> Result<CheckResult> {
    let start = Instant::now();
    grid.check_field(f.len(), "test function")?;
    if model.kind == ModelKind::Custom {
        return Err(invalid("model", "the quadratic-variation check needs a super-Brownian or Fleming-Viot model"));
    }
    let fv = f.values();
    let constant = fv.iter().all(|v| *v == fv[0]);
    if !constant {
        let peak = fv.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let inner = grid.half_width - 4.0;
        if (0..grid.len()).any(|i| grid.node(i).abs() > inner && fv[i].abs() > 1e-6 * peak) {
            return Err(invalid("f", format!("test function must vanish outside |y| <= {inner}")));
        }
    }
    let lap = half_laplacian(fv, grid.dx());
    let f2: Vec<f64> = fv.iter().map(|v| v * v).collect();
    let marks = model.mark_grid(grid, scheme.marks)?;
    let dt = grid.dt();
    let fvp = model.kind == ModelKind::Fvp;
    let stats = run_ensemble(replicates, 2, threads, |r| {
        let noise = StreamNoise::new(grid, marks, seed, r);
        let out = simulate_u(model, grid, scheme, &noise)?;
        let mut qv = 0.0;
        let mut comp = 0.0;
        for k in 0..grid.nt {
            let u = out.path.frame(k).values();
            let u1 = out.path.frame(k + 1).values();
            let d = pairing(u1, fv) - pairing(u, fv) - pairing(u, &lap) * dt;
            qv += d * d;
            let mut q = pairing(u, &f2);
            if fvp {
                q -= pairing(u, fv).powi(2);
            }
            comp += q * dt;
        }
        Ok((vec![qv, model.epsilon * comp], out.diagnostics))
    })?;
    let m = &stats.moments;
    let (q, c) = (m.mean[0], m.mean[1]);
    let name = format!("martingale_qv.{}", if fvp { "fvp" } else { "sbm" });
    let scale = model.epsilon * grid.horizon * f2.iter().fold(0.0_f64, |m, v| m.max(*v));
    if q.abs() <= QV_ZERO * scale && c.abs() <= QV_ZERO * scale {
        let rel = if scale > 0.0 { q.abs().max(c.abs()) / scale } else { 0.0 };
        return Ok(CheckResult::within(name, rel, 0.0, QV_ZERO)
            .with_detail("degenerate case: both sides vanish")
            .timed(start));
    }
    let ratio = q / c;
    // delta method for a ratio of correlated means
    let n = m.count as f64;
    let (vq, vc, cqc) = (m.covariance(0, 0), m.covariance(1, 1), m.covariance(0, 1));
    let se = match (vq, vc, cqc) {
        (Some(vq), Some(vc), Some(cqc)) => {
            ratio.abs() * ((vq / (q * q) + vc / (c * c) - 2.0 * cqc / (q * c)) / n).max(0.0).sqrt()
        }
        _ => f64::NAN,
    };
    Ok(CheckResult::within(name, ratio, 1.0, QV_TOL)
        .with_se(se)
        .with_detail(format!("mean QV {q:.4e}, predicted {c:.4e}, N={}", m.count))
        .timed(start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Coefficient, InitialPreset};

    #[test]
    fn laplacian_kills_constants_and_pairs_exactly() {
        let lap = half_laplacian(&[2.0; 6], 0.3);
        assert!(lap.iter().all(|v| *v == 0.0));
        let u = [0.0, 0.1, 0.5, 0.9, 1.0];
        assert!((pairing(&u, &[1.0; 5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fvp_constant_test_function_is_degenerate() {
        let g = Grid::new(8.0, 64, 0.5, 20).unwrap();
        let m = ModelSpec::fvp(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let f = Field::from_fn(&g, |_| 1.0).unwrap();
        let r = martingale_qv_check(&m, &g, &SimScheme::default(), &f, 16, 3, Some(1)).unwrap();
        assert!(r.passed(), "{}", r.line());
        assert_eq!(r.target, 0.0);
    }

    #[test]
    fn rejects_wide_test_functions_and_custom_models() {
        let g = Grid::new(6.0, 48, 0.5, 10).unwrap();
        let m = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let wide = Field::from_fn(&g, |y| (-0.05 * y * y).exp()).unwrap();
        assert!(martingale_qv_check(&m, &g, &SimScheme::default(), &wide, 4, 1, None).is_err());
        let c = ModelSpec::custom(Coefficient::Zero, (0.0, 1.0), Field::zeros(g.len()), 1e-3, 0.25).unwrap();
        let f = Field::from_fn(&g, |y| (-y * y).exp()).unwrap();
        assert!(martingale_qv_check(&c, &g, &SimScheme::default(), &f, 4, 1, None).is_err());
    }

    #[test]
    fn sbm_small_ensemble_is_consistent() {
        let g = Grid::new(8.0, 64, 0.5, 50).unwrap();
        let m = ModelSpec::sbm(&g, InitialPreset::GaussianCdf, 1e-3, 0.25).unwrap();
        let f = Field::from_fn(&g, |y| (-y * y).exp()).unwrap();
        let r = martingale_qv_check(&m, &g, &SimScheme { marks: 64, projection: None }, &f, 200, 9, None).unwrap();
        let se = r.se.unwrap();
        assert!((r.observed - 1.0).abs() < 5.0 * se + 0.03, "{}", r.line());
    }
}
