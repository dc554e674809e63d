//! Increment-moment scans of the fluctuation field: `E|v(t, y1) - v(t, y2)|^n`
//! against `|y1 - y2|` (or `E|v(t1, y) - v(t2, y)|^n` against `|t1 - t2|`)
//! with log-log slope fits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::{Grid, HeatPropagator, Padding};
use crate::models::{deterministic_flow, Coefficient, ModelSpec};
use crate::sim::{run_ensemble, simulate_v_on, Probe, SimScheme, StreamNoise};

use super::weighted_slope;

/// Moment orders reported by the scan.
pub const ORDERS: [u32; 2] = [2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanAxis {
    Space,
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub order: u32,
    /// Physical separation `|y1 - y2|` or `|t1 - t2|`.
    pub separation: f64,
    /// `E|dv|^n / a(eps)^n`.
    pub mean: f64,
    pub se: f64,
}

/// Log-log slope of one moment order with a normal 95% interval. The
/// points share replicates, so the interval is indicative only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub order: u32,
    pub slope: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub axis: ScanAxis,
    pub rows: Vec<ScalingRow>,
    /// `None` for an order whose moments are not all positive.
    pub fits: Vec<Option<SlopeFit>>,
}

impl ScalingTable {
    pub fn fit(&self, order: u32) -> Option<&SlopeFit> {
        ORDERS.iter().position(|&o| o == order).and_then(|i| self.fits[i].as_ref())
    }
}

fn partner(grid: &Grid, base: Probe, axis: ScanAxis, s: usize) -> Result<Probe> {
    let p = match axis {
        ScanAxis::Space => Probe {
            step: base.step,
            node: base.node + s,
        },
        ScanAxis::Time => Probe {
            step: base.step.checked_sub(s).ok_or_else(|| invalid("separations", "time separation reaches below t = 0"))?,
            node: base.node,
        },
    };
    if p.node >= grid.len() || p.step > grid.nt {
        return Err(invalid("separations", format!("separation {s} leaves the grid")));
    }
    Ok(p)
}

fn check_separations(separations: &[usize]) -> Result<()> {
    if separations.is_empty() || separations.contains(&0) {
        return Err(invalid("separations", "need at least one positive separation"));
    }
    if separations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("separations", "separations must be increasing"));
    }
    Ok(())
}

/// Ensemble increment moments of `v^eps` from `base` to the points at the
/// given separations (in grid units), with slopes fitted by inverse-variance
/// weighted least squares on `log mean` against `log separation`.
#[allow(clippy::too_many_arguments)]
pub fn moment_scaling_scan(
    model: &ModelSpec,
    grid: &Grid,
    scheme: &SimScheme,
    base: Probe,
    separations: &[usize],
    axis: ScanAxis,
    replicates: u64,
    seed: u64,
    threads: Option<usize>,
) -> Result<ScalingTable> {
    check_separations(separations)?;
    if base.node >= grid.len() || base.step > grid.nt {
        return Err(invalid("base", format!("probe {base:?} outside the grid")));
    }
    let partners = separations
        .iter()
        .map(|&s| partner(grid, base, axis, s))
        .collect::<Result<Vec<_>>>()?;
    let marks = model.mark_grid(grid, scheme.marks)?;
    if model.epsilon <= 0.0 {
        return Err(invalid("epsilon", "the fluctuation field needs eps > 0"));
    }
    let u0 = deterministic_flow(model, grid)?;
    let a = model.a_eps();
    let no = ORDERS.len();
    let stats = run_ensemble(replicates, no * partners.len(), threads, |r| {
        let noise = StreamNoise::new(grid, marks, seed, r);
        let out = simulate_v_on(model, grid, scheme, &noise, &u0)?;
        let v0 = out.path.value(base.step, base.node);
        let mut x = Vec::with_capacity(no * partners.len());
        for p in &partners {
            let d = ((out.path.value(p.step, p.node) - v0) / a).abs();
            x.extend(ORDERS.iter().map(|&n| d.powi(n as i32)));
        }
        Ok((x, out.diagnostics))
    })?;
    let m = &stats.moments;
    let unit = match axis {
        ScanAxis::Space => grid.dx(),
        ScanAxis::Time => grid.dt(),
    };
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for (oi, &order) in ORDERS.iter().enumerate() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        let mut usable = true;
        for (si, &s) in separations.iter().enumerate() {
            let idx = si * no + oi;
            let mean = m.mean[idx];
            let se = m.std_error(idx).unwrap_or(f64::NAN);
            rows.push(ScalingRow {
                order,
                separation: s as f64 * unit,
                mean,
                se,
            });
            if mean > 0.0 && se > 0.0 {
                xs.push((s as f64 * unit).ln());
                ys.push(mean.ln());
                ws.push((mean / se).powi(2));
            } else {
                usable = false;
            }
        }
        let fit = if usable {
            weighted_slope(&xs, &ys, &ws).map(|(slope, se)| SlopeFit {
                order,
                slope,
                se,
                ci_low: slope - 1.96 * se,
                ci_high: slope + 1.96 * se,
            })
        } else {
            None
        };
        fits.push(fit);
    }
    Ok(ScalingTable { axis, rows, fits })
}

/// Exact variance of the discrete spatial increment
/// `(v_K(y_{i+s}) - v_K(y_i)) / a(eps)` for space-time white noise.
///
/// The scheme is linear in the noise, so the variance is
/// `sum_k dt/dx sum_x (lambda_k(x) amp(x, u0_k(x)))^2` with
/// `lambda_k = (P^T)^{K-1-k} (e_{i+s} - e_i)`. It is the exact law of the
/// simulated field when the amplitude does not depend on the state.
pub fn additive_increment_variance(model: &ModelSpec, grid: &Grid, base: Probe, separations: &[usize]) -> Result<Vec<f64>> {
    let Coefficient::SpatialWhite(amp) = &model.coefficient else {
        return Err(invalid("model", "the exact increment variance needs spatial white noise"));
    };
    check_separations(separations)?;
    if base.step == 0 || base.step > grid.nt {
        return Err(invalid("base", "base step must lie in 1..=nt"));
    }
    let u0 = deterministic_flow(model, grid)?;
    let heat = HeatPropagator::for_grid(grid, Padding::Edge);
    let n = grid.len();
    let (dt, dx) = (grid.dt(), grid.dx());
    separations
        .iter()
        .map(|&s| {
            let j = base.node + s;
            if j >= n {
                return Err(LabError::ShapeMismatch(format!("separation {s} leaves the grid")));
            }
            let mut lam = vec![0.0; n];
            lam[j] = 1.0;
            lam[base.node] -= 1.0;
            let mut tmp = vec![0.0; n];
            let mut var = 0.0;
            for k in (0..base.step).rev() {
                let state = u0.frame(k).values();
                var += (0..n)
                    .map(|x| (lam[x] * amp(grid.node(x), state[x])).powi(2))
                    .sum::<f64>()
                    * dt
                    / dx;
                heat.apply_transpose(&lam, &mut tmp);
                std::mem::swap(&mut lam, &mut tmp);
            }
            Ok(var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Field;
    use std::sync::Arc;

    fn white(g: &Grid) -> ModelSpec {
        ModelSpec::custom(
            Coefficient::SpatialWhite(Arc::new(|_, _| 1.0)),
            (0.0, 1.0),
            Field::zeros(g.len()),
            1e-2,
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficient_gives_zero_moments() {
        let g = Grid::new(3.0, 24, 0.5, 20).unwrap();
        let m = ModelSpec::custom(Coefficient::Zero, (0.0, 1.0), Field::zeros(g.len()), 1e-2, 0.25).unwrap();
        let base = Probe { step: 20, node: 12 };
        let t = moment_scaling_scan(&m, &g, &SimScheme::default(), base, &[1, 2, 4], ScanAxis::Space, 8, 1, None).unwrap();
        assert!(t.rows.iter().all(|r| r.mean == 0.0));
        assert!(t.fits.iter().all(|f| f.is_none()));
    }

    #[test]
    fn oracle_matches_monte_carlo_and_is_increasing() {
        let g = Grid::new(2.0, 32, 0.25, 64).unwrap();
        let m = white(&g);
        let base = Probe { step: 64, node: 16 };
        let seps = [1, 2, 4];
        let exact = additive_increment_variance(&m, &g, base, &seps).unwrap();
        assert!(exact.windows(2).all(|w| w[1] > w[0]));
        let t = moment_scaling_scan(&m, &g, &SimScheme::default(), base, &seps, ScanAxis::Space, 600, 4, None).unwrap();
        for (i, e) in exact.iter().enumerate() {
            let row = &t.rows[i];
            assert_eq!(row.order, 2);
            assert!((row.mean - e).abs() < 4.0 * row.se, "sep {}: {} vs {e}", seps[i], row.mean);
            // Gaussian increments: fourth moment is three times the squared variance
            let row4 = &t.rows[seps.len() + i];
            assert_eq!(row4.order, 4);
            assert!((row4.mean / (3.0 * e * e) - 1.0).abs() < 0.35);
        }
        let f2 = t.fit(2).unwrap();
        assert!(f2.slope > 0.0 && f2.ci_low < f2.ci_high);
    }

    #[test]
    fn time_scan_runs_backwards_from_base() {
        let g = Grid::new(2.0, 16, 0.25, 32).unwrap();
        let m = white(&g);
        let base = Probe { step: 32, node: 8 };
        let t = moment_scaling_scan(&m, &g, &SimScheme::default(), base, &[1, 2, 4, 8], ScanAxis::Time, 64, 2, None).unwrap();
        assert_eq!(t.rows.len(), 8);
        assert!((t.rows[1].separation - 2.0 * g.dt()).abs() < 1e-15);
        assert!(moment_scaling_scan(&m, &g, &SimScheme::default(), base, &[64], ScanAxis::Time, 4, 2, None).is_err());
        assert!(moment_scaling_scan(&m, &g, &SimScheme::default(), base, &[2, 1], ScanAxis::Time, 4, 2, None).is_err());
    }
}
