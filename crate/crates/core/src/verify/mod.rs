//! Verification drivers shared by the command line and the acceptance tests.

pub mod config;
pub mod covariance;
pub mod mdp;
pub mod qv;
pub mod scaling;
pub mod suite;

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{RunConfig, CONFIG_ENV_OUT};
pub use covariance::{gaussian_limit_covariance, gaussian_limit_covariance_matrix, ContinuumFlow, CovarianceQuadrature};
pub use mdp::{mdp_consistency_scan, FluctuationEnsemble};
pub use qv::martingale_qv_check;
pub use scaling::{additive_increment_variance, moment_scaling_scan, ScalingTable, ScanAxis, SlopeFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Not enough data to decide; never counts as a pass.
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// One verification outcome. A check passes iff
/// `|observed - target| <= tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub verdict: Verdict,
    pub observed: f64,
    pub target: f64,
    pub tol: f64,
    pub se: Option<f64>,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckResult {
    pub fn within(name: impl Into<String>, observed: f64, target: f64, tol: f64) -> Self {
        let ok = (observed - target).abs() <= tol;
        Self {
            name: name.into(),
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            observed,
            target,
            tol,
            se: None,
            runtime_s: 0.0,
            detail: String::new(),
        }
    }

    pub fn inconclusive(name: impl Into<String>, observed: f64, target: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            verdict: Verdict::Inconclusive,
            observed,
            target,
            tol: f64::NAN,
            se: None,
            runtime_s: 0.0,
            detail: detail.into(),
        }
    }

    /// Re-judge against another tolerance. Inconclusive results stay so.
    pub fn with_tol(mut self, tol: f64) -> Self {
        if self.verdict != Verdict::Inconclusive {
            let ok = (self.observed - self.target).abs() <= tol;
            self.verdict = if ok { Verdict::Pass } else { Verdict::Fail };
            self.tol = tol;
        }
        self
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.se = Some(se);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn timed(mut self, start: Instant) -> Self {
        self.runtime_s = start.elapsed().as_secs_f64();
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// `PASS name: observed=.. target=.. tol=..` for terminal reports.
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {}: observed={:.6e} target={:.6e} tol={:.3e}",
            self.verdict, self.name, self.observed, self.target, self.tol
        );
        if let Some(se) = self.se {
            s.push_str(&format!(" se={se:.3e}"));
        }
        s.push_str(&format!(" ({:.2}s)", self.runtime_s));
        if !self.detail.is_empty() {
            s.push_str(&format!(" [{}]", self.detail));
        }
        s
    }
}

/// Set the runtime of every result in `checks` to the time since `start`,
/// split evenly.
pub(crate) fn share_runtime(mut checks: Vec<CheckResult>, start: Instant) -> Vec<CheckResult> {
    let n = checks.len().max(1) as f64;
    let t = start.elapsed().as_secs_f64() / n;
    checks.iter_mut().for_each(|c| c.runtime_s = t);
    checks
}

/// `results.csv`: one row per check.
pub fn write_results_csv(out: impl Write, checks: &[CheckResult]) -> crate::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "name,pass,observed,target,tol,se,runtime_s")?;
    for c in checks {
        let pass = match c.verdict {
            Verdict::Pass => "true",
            Verdict::Fail => "false",
            Verdict::Inconclusive => "inconclusive",
        };
        let se = c.se.map(|s| format!("{s:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{pass},{:e},{:e},{:e},{se},{:.3}",
            c.name, c.observed, c.target, c.tol, c.runtime_s
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Weighted least-squares slope of `ys` on `xs`, with weights taken as
/// inverse variances, and its standard error.
pub(crate) fn weighted_slope(xs: &[f64], ys: &[f64], weights: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = weights.iter().sum();
    if xs.len() < 2 || !(sw > 0.0) {
        return None;
    }
    let mx = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(weights).map(|(x, w)| w * (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).zip(weights).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    Some((sxy / sxx, (1.0 / sxx).sqrt()))
}
