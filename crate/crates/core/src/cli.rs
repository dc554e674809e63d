//! Command-line driver. Every subcommand writes `manifest.json` to the
//! output directory; checking commands also write `results.csv`.
//!
//! Exit codes: 0 on success, 1 when a requested check fails or a run
//! errors, 2 for usage errors and malformed configurations.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::grid::{Field, FieldPath, Grid};
use crate::io::{self, Role};
use crate::measures::path_to_measure_path;
use crate::models::{deterministic_flow, ModelKind};
use crate::sim::{ensemble_probes, simulate_u, simulate_v, Probe, Process, StreamNoise};
use crate::variational::{hitting_rate, mu0_path, rate_fvp, rate_general, rate_sbm, solve_controlled, RnOptions, DEFAULT_RATE_TOL};
use crate::verify::config::{content_hash, Format, Suite};
use crate::verify::mdp::limit_variances;
use crate::verify::{
    martingale_qv_check, mdp_consistency_scan, moment_scaling_scan, suite, write_results_csv, CheckResult, RunConfig,
    ScalingTable, ScanAxis, Verdict, CONFIG_ENV_OUT,
};

const TAIL_NOTE: &str = "exponential tail asymptotics are not observable at desk scale; \
the checks verify the variance scale, the rate/covariance duality and moderate tail frequencies";

#[derive(Debug, Parser)]
#[command(name = "mdp-spde-lab", version, about = "Small-noise SPDE laboratory for super-Brownian and Fleming-Viot fluctuations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `ensemble.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensembles.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One replicate per eps: dumps of u, v and the measure density.
    Simulate(Common),
    /// Probe mean and variance of the fluctuation field per eps.
    Ensemble(Common),
    /// Hitting rates at the final-time probes, by three code paths.
    Rate(Common),
    /// Run a verification suite.
    Check {
        /// Suite to run; defaults to `checks.run` of the config.
        #[arg(long, value_enum)]
        suite: Option<Suite>,
        #[command(flatten)]
        common: Common,
    },
    /// Increment-moment scaling in space and time.
    Scan(Common),
    /// Parse and validate a configuration.
    ValidateConfig(Common),
}

struct Context {
    command: &'static str,
    config: Option<(RunConfig, String)>,
    out: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    start: Instant,
}

impl Context {
    fn new(command: &'static str, common: &Common, needs_config: bool) -> Result<Self> {
        let config = match &common.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
                let mut cfg = RunConfig::load(p).map_err(|e| match e {
                    LabError::Config(m) => LabError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?;
                if let Some(s) = common.seed {
                    cfg.ensemble.seed = s;
                }
                Some((cfg, content_hash(&bytes)))
            }
            None if needs_config => return Err(LabError::Config(format!("`{command}` needs --config <path>"))),
            None => None,
        };
        let out = match (&common.out, &config) {
            (Some(o), _) => o.clone(),
            (None, Some((cfg, _))) => cfg.output_dir(),
            (None, None) => std::env::var_os(CONFIG_ENV_OUT).map_or_else(|| PathBuf::from("out"), PathBuf::from),
        };
        Ok(Self {
            command,
            config,
            out,
            seed: common.seed,
            threads: common.threads,
            start: Instant::now(),
        })
    }

    fn cfg(&self) -> &RunConfig {
        &self.config.as_ref().expect("configuration loaded").0
    }

    fn formats(&self) -> Vec<Format> {
        self.config.as_ref().map_or_else(|| vec![Format::Csv, Format::Binary], |(c, _)| c.output.formats.clone())
    }

    fn dump(&self, stem: &str, path: &FieldPath, grid: &Grid, role: Role) -> Result<()> {
        for f in self.formats() {
            match f {
                Format::Csv => io::write_csv(File::create(self.out.join(format!("{stem}.csv")))?, path, grid, role)?,
                Format::Binary => io::write_binary(File::create(self.out.join(format!("{stem}.mdpf")))?, path, grid, role)?,
            }
        }
        Ok(())
    }

    fn manifest(&self, passed: Option<bool>, extra: Value) -> Result<()> {
        let (config, hash, seed) = match &self.config {
            Some((c, h)) => (serde_json::to_value(c)?, Value::from(h.clone()), Value::from(c.ensemble.seed)),
            None => (Value::Null, Value::Null, self.seed.map_or(Value::from(suite::SEED), Value::from)),
        };
        let mut m = json!({
            "command": self.command,
            "config_hash": hash,
            "seed": seed,
            "threads": self.threads.unwrap_or_else(rayon::current_num_threads),
            "versions": {
                "mdp-spde-lab": env!("CARGO_PKG_VERSION"),
                "field-format": io::VERSION,
                "platform": format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            },
            "wall_time_s": self.start.elapsed().as_secs_f64(),
            "config": config,
            "passed": passed,
            "note": TAIL_NOTE,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
            m.extend(e);
        }
        let mut f = File::create(self.out.join("manifest.json"))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

/// Parse `argv` (including the program name), run, and return the exit
/// code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ (LabError::Config(_) | LabError::InvalidParameter { .. } | LabError::Json(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::ValidateConfig(c) => {
            let ctx = Context::new("validate-config", &c, true)?;
            let cfg = ctx.cfg();
            let grid = cfg.grid()?;
            for &e in &cfg.model.epsilon {
                cfg.model_spec(&grid, e)?;
            }
            println!("ok: {} (sha256 {})", c.config.as_ref().expect("checked").display(), ctx.config.as_ref().expect("checked").1);
            Ok(true)
        }
        Command::Simulate(c) => simulate(Context::new("simulate", &c, true)?).map(|_| true),
        Command::Ensemble(c) => ensemble(Context::new("ensemble", &c, true)?).map(|_| true),
        Command::Rate(c) => rate(Context::new("rate", &c, true)?).map(|_| true),
        Command::Scan(c) => scan(Context::new("scan", &c, true)?).map(|_| true),
        Command::Check { suite, common } => check(Context::new("check", &common, false)?, suite),
    }
}

fn prepare(ctx: &Context) -> Result<()> {
    std::fs::create_dir_all(&ctx.out)?;
    Ok(())
}

fn simulate(ctx: Context) -> Result<()> {
    prepare(&ctx)?;
    let cfg = ctx.cfg();
    let grid = cfg.grid()?;
    let scheme = cfg.scheme();
    let mut runs = Vec::new();
    for (i, &e) in cfg.model.epsilon.iter().enumerate() {
        let model = cfg.model_spec(&grid, e)?;
        if i == 0 {
            ctx.dump("u0", &deterministic_flow(&model, &grid)?, &grid, Role::Field)?;
        }
        let marks = model.mark_grid(&grid, scheme.marks)?;
        let noise = StreamNoise::new(&grid, marks, cfg.ensemble.seed, 0);
        let u = simulate_u(&model, &grid, &scheme, &noise)?;
        let v = simulate_v(&model, &grid, &scheme, &noise)?;
        ctx.dump(&format!("u_eps{i}"), &u.path, &grid, Role::Field)?;
        ctx.dump(&format!("v_eps{i}"), &v.path, &grid, Role::Field)?;
        let mu = path_to_measure_path(&u.path, &grid, 1.0)?.to_field_path()?;
        ctx.dump(&format!("mu_eps{i}"), &mu, &grid, Role::MeasureDensity)?;
        runs.push(json!({ "epsilon": e, "stem": format!("eps{i}"), "diagnostics": u.diagnostics }));
    }
    ctx.manifest(None, json!({ "runs": runs }))
}

fn ensemble(ctx: Context) -> Result<()> {
    prepare(&ctx)?;
    let cfg = ctx.cfg();
    let grid = cfg.grid()?;
    let scheme = cfg.scheme();
    let base = cfg.model_spec(&grid, cfg.model.epsilon[0])?;
    let probes = cfg.probes(&grid, &base)?;
    let sigma2 = limit_variances(&base, &grid, &probes)?;
    let mut w = std::io::BufWriter::new(File::create(ctx.out.join("ensemble.csv"))?);
    writeln!(w, "epsilon,probe_t,probe_y,mean,var,se,limit_var,n")?;
    for (i, &e) in cfg.model.epsilon.iter().enumerate() {
        let model = base.with_epsilon(e)?;
        let seed = cfg.ensemble.seed.wrapping_add(i as u64);
        let stats = ensemble_probes(&model, &grid, &scheme, Process::V, &probes, cfg.ensemble.replicates, seed, ctx.threads)?;
        let m = &stats.moments;
        let a2 = model.a_eps().powi(2);
        for (j, p) in probes.iter().enumerate() {
            let var = m.covariance(j, j).map_or(f64::NAN, |v| v / a2);
            let se = m.std_error(j).unwrap_or(f64::NAN) / model.a_eps();
            writeln!(
                w,
                "{e:e},{},{},{:e},{var:e},{se:e},{:e},{}",
                p.step as f64 * grid.dt(),
                grid.node(p.node),
                m.mean[j] / model.a_eps(),
                sigma2[j],
                m.count
            )?;
        }
    }
    w.flush()?;
    ctx.manifest(None, json!({ "normalization": "values of v^eps / a(eps)" }))
}

fn rate(ctx: Context) -> Result<()> {
    prepare(&ctx)?;
    let cfg = ctx.cfg();
    let grid = cfg.grid()?;
    let model = cfg.model_spec(&grid, cfg.model.epsilon[0])?;
    let probes = cfg.probes(&grid, &model)?;
    let u0 = deterministic_flow(&model, &grid)?;
    let marks = model.mark_grid(&grid, cfg.scheme().marks)?;
    let mu0 = match model.kind {
        ModelKind::Custom => None,
        _ => Some(mu0_path(&model, &grid, 1.0)?),
    };
    let delta = cfg.checks.delta;
    let mut w = std::io::BufWriter::new(File::create(ctx.out.join("rates.csv"))?);
    writeln!(w, "probe_y,delta,sigma2,hitting_rate,variational_rate,closed_form_rate")?;
    let mut skipped = 0;
    for p in &probes {
        if p.step != grid.nt {
            skipped += 1;
            continue;
        }
        let (hit, sigma2) = hitting_rate(&model, &u0, &grid, marks, p.node, delta)?;
        let (general, closed) = match &hit.minimizer {
            Some(h) => {
                let v = solve_controlled(h, &model, &u0, &grid)?;
                let general = rate_general(&v, &model, &u0, &grid, marks, DEFAULT_RATE_TOL)?.value;
                let closed = match (&mu0, model.kind) {
                    (Some(mu0), ModelKind::Sbm) => rate_sbm(&path_to_measure_path(&v, &grid, 1.0)?, mu0, &grid, &RnOptions::default())?.value,
                    (Some(mu0), ModelKind::Fvp) => rate_fvp(&path_to_measure_path(&v, &grid, 1.0)?, mu0, &grid, &RnOptions::default())?.value,
                    _ => f64::NAN,
                };
                (general, closed)
            }
            None => (f64::INFINITY, f64::NAN),
        };
        writeln!(w, "{},{delta:e},{sigma2:e},{:e},{general:e},{closed:e}", grid.node(p.node), hit.value)?;
    }
    w.flush()?;
    ctx.manifest(None, json!({ "skipped_probes_before_T": skipped }))
}

/// Base probe of the moment scans: the node nearest the window centre at
/// `t = T`.
fn scan_base(grid: &Grid) -> Probe {
    Probe {
        step: grid.nt,
        node: grid.nx / 2,
    }
}

fn scan_tables(ctx: &Context) -> Result<Vec<ScalingTable>> {
    let cfg = ctx.cfg();
    let grid = cfg.grid()?;
    let model = cfg.model_spec(&grid, cfg.model.epsilon[0])?;
    let seps = &cfg.checks.separations;
    let base = scan_base(&grid);
    [ScanAxis::Space, ScanAxis::Time]
        .into_iter()
        .map(|axis| {
            moment_scaling_scan(
                &model,
                &grid,
                &cfg.scheme(),
                base,
                seps,
                axis,
                cfg.ensemble.replicates,
                cfg.ensemble.seed,
                ctx.threads,
            )
        })
        .collect()
}

fn scan(ctx: Context) -> Result<()> {
    prepare(&ctx)?;
    let tables = scan_tables(&ctx)?;
    let mut w = std::io::BufWriter::new(File::create(ctx.out.join("scaling.csv"))?);
    writeln!(w, "axis,order,separation,mean,se")?;
    for t in &tables {
        let axis = if t.axis == ScanAxis::Space { "space" } else { "time" };
        for r in &t.rows {
            writeln!(w, "{axis},{},{:e},{:e},{:e}", r.order, r.separation, r.mean, r.se)?;
        }
    }
    w.flush()?;
    let fits: Vec<_> = tables.iter().map(|t| json!({ "axis": t.axis, "fits": t.fits })).collect();
    ctx.manifest(None, json!({ "slopes": fits }))
}

/// Gaussian bump whose support (to `1e-6` of its peak) is `|y| <= L - 4`.
fn qv_test_function(grid: &Grid) -> Result<Field> {
    let inner = grid.half_width - 4.0;
    if inner <= 0.0 {
        return Err(LabError::Config("the quadratic-variation check needs L > 4".into()));
    }
    let width = (inner / 3.8).min(1.0);
    Field::from_fn(grid, |y| (-(y / width).powi(2)).exp())
}

fn config_suite(ctx: &Context, suite: Suite) -> Result<Vec<CheckResult>> {
    let cfg = ctx.cfg();
    let grid = cfg.grid()?;
    match suite {
        Suite::Identities => suite::identities_suite(),
        Suite::RateEquivalence => suite::rate_equivalence_checks(),
        Suite::Acceptance => acceptance(ctx.threads),
        Suite::Mdp => mdp_consistency_scan(cfg, ctx.threads),
        Suite::Qv => {
            let f = qv_test_function(&grid)?;
            let mut out = Vec::new();
            for (i, &e) in cfg.model.epsilon.iter().enumerate() {
                let model = cfg.model_spec(&grid, e)?;
                let mut r = martingale_qv_check(&model, &grid, &cfg.scheme(), &f, cfg.ensemble.replicates, cfg.ensemble.seed.wrapping_add(i as u64), ctx.threads)?
                    .with_tol(cfg.checks.qv_tol);
                r.name = format!("{}[eps={e:e}]", r.name);
                out.push(r);
            }
            Ok(out)
        }
        Suite::Scaling => {
            let start = Instant::now();
            let tables = scan_tables(ctx)?;
            let space = &tables[0];
            let fit = space.fit(2);
            let slope = fit.map_or(f64::NAN, |f| f.slope);
            let mut r = CheckResult::within("scaling.space.n2", slope, 1.0, cfg.checks.slope_tol).timed(start);
            if let Some(f) = fit {
                r = r.with_se(f.se).with_detail(format!("95% CI [{:.3}, {:.3}]", f.ci_low, f.ci_high));
            }
            Ok(vec![r])
        }
    }
}

fn builtin_suite(ctx: &Context, suite: Suite) -> Result<Vec<CheckResult>> {
    let t = ctx.threads;
    match suite {
        Suite::Identities => suite::identities_suite(),
        Suite::RateEquivalence => suite::rate_equivalence_checks(),
        Suite::Qv => suite::martingale_checks(t),
        Suite::Mdp => {
            let mut out = suite::fluctuation_covariance_checks(t)?;
            out.extend(suite::scale_invariance_suite(t)?);
            out.extend(suite::duality_checks()?);
            Ok(out)
        }
        Suite::Scaling => suite::moment_scaling_checks(t),
        Suite::Acceptance => acceptance(t),
    }
}

fn acceptance(threads: Option<usize>) -> Result<Vec<CheckResult>> {
    let mut out = suite::identities_suite()?;
    out.extend(suite::rate_equivalence_checks()?);
    out.extend(suite::martingale_checks(threads)?);
    out.extend(suite::fluctuation_covariance_checks(threads)?);
    out.extend(suite::scale_invariance_suite(threads)?);
    out.extend(suite::duality_checks()?);
    out.extend(suite::moment_scaling_checks(threads)?);
    Ok(out)
}

fn check(ctx: Context, suite: Option<Suite>) -> Result<bool> {
    let suites = match (suite, &ctx.config) {
        (Some(s), _) => vec![s],
        (None, Some((cfg, _))) if !cfg.checks.run.is_empty() => cfg.checks.run.clone(),
        _ => return Err(LabError::Config("no suite given: pass --suite or list `checks.run` in the config".into())),
    };
    prepare(&ctx)?;
    let mut checks = Vec::new();
    for s in &suites {
        let got = if ctx.config.is_some() { config_suite(&ctx, *s)? } else { builtin_suite(&ctx, *s)? };
        checks.extend(got);
    }
    for c in &checks {
        println!("{}", c.line());
    }
    // inconclusive results are reported but do not fail the run
    let passed = checks.iter().all(|c| c.verdict != Verdict::Fail);
    let inconclusive = checks.iter().filter(|c| c.verdict == Verdict::Inconclusive).count();
    write_results_csv(File::create(ctx.out.join("results.csv"))?, &checks)?;
    ctx.manifest(
        Some(passed),
        json!({ "suites": suites, "checks": checks.len(), "inconclusive": inconclusive }),
    )?;
    println!("{}: {} checks, {inconclusive} inconclusive", if passed { "PASS" } else { "FAIL" }, checks.len());
    Ok(passed)
}
