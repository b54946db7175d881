//! Command-line front end: `wentzell-wave <mode> --config PATH [--out DIR]
//! [--jobs N] [--seed S] [--allow-unchecked]`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 hypothesis violation,
//! 3 numerical failure (including failed checks in verify mode), 4 blow-up
//! reached in nonlinear mode.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;

use crate::config::{config_from_value, gate, load_config, set_path, LoadedConfig, Mode, RunConfig};
use crate::diagnostics::{convergence_order, run_battery, write_checks_csv, Battery, MmsProblem};
use crate::geometry::MeshKind;
use crate::error::{Error, Result};
use crate::evolution::{apriori_bound_check, estimate_m0, evolve_linear, kato_scan, System, TimeGrid, Trajectory, DENSE_CAP};
use crate::nonlinear::{continue_maximal, existence_time, lipschitz_estimate, picard_solve, probe_grid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_HYPOTHESIS: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BLOW_UP: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    LinearAuto,
    LinearNonauto,
    Nonlinear,
    Verify,
    Sweep,
}

impl ModeArg {
    /// Parses a kebab-case mode name such as `linear-nonauto`.
    pub fn parse(name: &str) -> Option<Self> {
        <Self as ValueEnum>::from_str(name, false).ok()
    }
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::LinearAuto => Mode::LinearAuto,
            ModeArg::LinearNonauto => Mode::LinearNonauto,
            ModeArg::Nonlinear => Mode::Nonlinear,
            ModeArg::Verify => Mode::Verify,
            ModeArg::Sweep => Mode::Sweep,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wentzell-wave", version, about = "Semilinear waves with dynamic Wentzell boundary conditions")]
pub struct Cli {
    #[arg(value_enum)]
    pub mode: ModeArg,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `out/<config stem>-<mode>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and checks.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides `solver.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Downgrade hypothesis violations to warnings.
    #[arg(long)]
    pub allow_unchecked: bool,
}

/// Outcome of one run: exit code, named scalar results and log lines.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub exit_code: i32,
    pub metrics: Vec<(String, f64)>,
    pub lines: Vec<String>,
    pub files: Vec<String>,
}

impl RunSummary {
    fn line(&mut self, s: impl Into<String>) {
        let s = s.into();
        eprintln!("{s}");
        self.lines.push(s);
    }

    fn metric(&mut self, name: &str, v: f64) {
        self.metrics.push((name.to_string(), v));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == name).map(|m| m.1)
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(summary) => summary.exit_code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<RunSummary> {
    let mode = Mode::from(cli.mode);
    let loaded = load_config(&cli.config, cli.allow_unchecked)?;
    for w in &loaded.warnings {
        eprintln!("warning: hypothesis not satisfied (--allow-unchecked): {w}");
    }
    if let Some(m) = loaded.config.mode {
        if m != mode {
            eprintln!("warning: config declares mode {}, running {}", m.name(), mode.name());
        }
    }
    let out = cli.out.clone().unwrap_or_else(|| {
        let stem = cli.config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("out").join(format!("{stem}-{}", mode.name()))
    });
    let seed = cli.seed.unwrap_or(loaded.config.solver.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        let summary = match mode {
            Mode::Sweep => run_sweep(&loaded, &out, seed, cli.allow_unchecked)?,
            _ => run_mode(mode, &loaded.config, &out, seed)?,
        };
        write_manifest(cli, mode, &loaded, &out, seed, &summary)?;
        Ok(summary)
    })
}

/// Runs one non-sweep mode, writing its outputs into `out`.
pub fn run_mode(mode: Mode, cfg: &RunConfig, out: &Path, seed: u64) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?)?;
    let mut s = RunSummary { files: vec!["config.toml".into()], ..Default::default() };
    s.line(format!("mode {} on {} dofs, horizon {}, dt {}", mode.name(), cfg.mesh()?.dof_count(), cfg.metric.horizon, cfg.solver.dt));
    match mode {
        Mode::LinearAuto | Mode::LinearNonauto => run_linear(mode, cfg, out, seed, &mut s)?,
        Mode::Nonlinear => run_nonlinear(cfg, out, seed, &mut s)?,
        Mode::Verify => run_verify(cfg, out, seed, &mut s)?,
        Mode::Sweep => return Err(Error::Config("sweep points cannot themselves be sweeps".into())),
    }
    fs::write(out.join("report.txt"), s.lines.join("\n") + "\n")?;
    s.files.push("report.txt".into());
    Ok(s)
}

fn write_snapshots(cfg: &RunConfig, sys: &System, traj: &Trajectory, out: &Path, s: &mut RunSummary) -> Result<()> {
    for &t in &cfg.solver.snapshots {
        let Some(k) = traj.times.iter().position(|&tk| (tk - t).abs() <= 0.5 * cfg.solver.dt) else { continue };
        let name = format!("snapshot_{k:06}.csv");
        traj.write_snapshot(sys.mesh(), k, &out.join(&name))?;
        s.files.push(name);
    }
    Ok(())
}

fn run_linear(mode: Mode, cfg: &RunConfig, out: &Path, seed: u64, s: &mut RunSummary) -> Result<()> {
    let mut sys = cfg.system()?;
    if mode == Mode::LinearAuto {
        sys = sys.frozen_at(0.0);
    }
    let grid = TimeGrid::new(0.0, cfg.metric.horizon, cfg.solver.dt)?;
    let x0 = cfg.initial_state(sys.mesh(), seed)?;
    let source = cfg.source_spec()?;
    let traj = evolve_linear(&sys, &x0, &source, &grid)?;
    traj.write_csv(&sys, &out.join("trajectory.csv"))?;
    s.files.push("trajectory.csv".into());
    write_snapshots(cfg, &sys, &traj, out, s)?;
    let rows = traj.diagnostics(&sys)?;
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    s.line(format!("energy {:.12e} -> {:.12e}", first.energy, last.energy));
    s.metric("energy_final", last.energy);
    s.metric("max_residual", traj.residuals.iter().copied().fold(0.0, f64::max));
    let m0 = estimate_m0(&sys, &probe_grid(&grid), &cfg.m0_options(seed))?;
    let bound = apriori_bound_check(&sys, &traj, m0.value, 1e-3)?;
    s.line(format!(
        "M0 = {:.9} (worst pair {:?}); a priori bound ratio {:.6} at t = {} ({})",
        m0.value,
        m0.worst_pair,
        bound.worst_ratio,
        bound.worst_time,
        if bound.pass { "holds" } else { "VIOLATED" }
    ));
    s.metric("m0", m0.value);
    s.metric("bound_ratio", bound.worst_ratio);
    if mode == Mode::LinearNonauto && sys.mesh().dof_count() <= DENSE_CAP {
        let scan = kato_scan(&sys, cfg.solver.kato_points)?;
        scan.write_csv(&out.join("kato.csv"))?;
        s.files.push("kato.csv".into());
        s.line(format!("Kato scan: max norm {:.6}, BV sum {:.6}, max |dB/dt| {:.6}", scan.max_norm, scan.bv_sum, scan.max_dbdt));
        s.metric("kato_max_norm", scan.max_norm);
    }
    if !bound.pass {
        s.exit_code = EXIT_NUMERICAL;
    }
    Ok(())
}

fn run_nonlinear(cfg: &RunConfig, out: &Path, seed: u64, s: &mut RunSummary) -> Result<()> {
    let sys = cfg.system()?;
    let spec = cfg.nonlinearity_spec()?;
    spec.check_exponents()?;
    let grid = TimeGrid::new(0.0, cfg.metric.horizon, cfg.solver.dt)?;
    let x0 = cfg.initial_state(sys.mesh(), seed)?;
    let rho = sys.operator(0.0)?.control_norm(&x0)?;
    let m0 = estimate_m0(&sys, &probe_grid(&grid), &cfg.m0_options(seed))?.value;
    let l = if rho > 0.0 {
        lipschitz_estimate(&sys, &spec, rho * (1.0 + m0), (0.0, grid.end()), cfg.lipschitz_mode(), &cfg.lipschitz_options(seed))?
    } else {
        0.0
    };
    let cert = existence_time(rho, m0, l, grid.end())?;
    fs::write(out.join("certificate.txt"), cert.to_string())?;
    s.files.push("certificate.txt".into());
    s.line(format!("certificate: rho {:.6e}, M0 {:.6}, L {:.6e}, tau {:.6e}", cert.rho, cert.m0, cert.lipschitz, cert.tau));
    s.metric("m0", m0);
    s.metric("lipschitz", l);
    s.metric("tau", cert.tau);
    let steps = (((cert.tau / grid.dt) * (1.0 + 1e-12)).floor() as usize).min(grid.steps);
    if steps > 0 {
        let window = TimeGrid::with_steps(0.0, grid.dt, steps);
        let (_, report) = picard_solve(&sys, &spec, &x0, &window, &cfg.source_spec()?, &cfg.picard_options())?;
        report.write_csv(&out.join("picard.csv"))?;
        s.files.push("picard.csv".into());
        s.line(format!(
            "Picard on [0, {}]: {} iterations, max ratio {:.4} (bound tau M0 L = {:.4})",
            window.end(),
            report.iterations.len(),
            report.max_ratio(1e3 * f64::EPSILON * rho.max(1.0)),
            cert.contraction_factor
        ));
    } else {
        s.line(format!("certified window {:.3e} is below dt; no Picard window", cert.tau));
    }
    if !cfg.solver.continuation {
        return Ok(());
    }
    if !cfg.source_spec()?.is_zero() {
        s.line("note: continuation ignores the linear source block");
    }
    let run = continue_maximal(&sys, &spec, &x0, grid.end(), &cfg.continuation_options(seed))?;
    run.trajectory.write_csv(&sys, &out.join("trajectory.csv"))?;
    run.write_windows_csv(&out.join("windows.csv"))?;
    s.files.extend(["trajectory.csv".into(), "windows.csv".into()]);
    write_snapshots(cfg, &sys, &run.trajectory, out, s)?;
    s.line(format!("continuation: {} windows, stopped at t = {} ({})", run.windows.len(), run.t_stop, run.reason));
    s.metric("t_stop", run.t_stop);
    s.metric("t_plus", run.t_plus);
    if run.blew_up() {
        s.line(format!("blow-up: t+ estimate {:.6}, error bar (last window length) {:.3e}", run.t_plus, run.error_bar));
        s.exit_code = EXIT_BLOW_UP;
    }
    Ok(())
}

fn run_verify(cfg: &RunConfig, out: &Path, seed: u64, s: &mut RunSummary) -> Result<()> {
    let sys = cfg.system()?;
    let spec = cfg.nonlinearity_spec()?;
    let source = cfg.source_spec()?;
    let x0 = cfg.initial_state(sys.mesh(), seed)?;
    let battery = Battery {
        sys: &sys,
        spec: &spec,
        source: &source,
        x0: &x0,
        dt: cfg.solver.dt,
        lambdas: &cfg.solver.lambdas,
        seed,
        dissipativity_states: cfg.solver.dissipativity_states,
        resolvent_rhs: cfg.solver.resolvent_rhs,
        kato_points: cfg.solver.kato_points,
        m0: cfg.m0_options(seed),
        lipschitz: cfg.lipschitz_options(seed),
        lipschitz_mode: cfg.lipschitz_mode(),
        picard: cfg.picard_options(),
        artifacts: Some(out),
    };
    let reports = run_battery(&battery)?;
    write_checks_csv(&reports, &out.join("checks.csv"))?;
    s.files.push("checks.csv".into());
    for f in ["kato.csv", "picard.csv"] {
        if out.join(f).exists() {
            s.files.push(f.into());
        }
    }

    // Plot inputs: the linear trajectory of the configured run and a
    // manufactured-solution convergence study on the same geometry kind.
    let grid = TimeGrid::new(0.0, cfg.metric.horizon, cfg.solver.dt)?;
    let traj = evolve_linear(&sys, &x0, &source, &grid)?;
    traj.write_csv(&sys, &out.join("trajectory.csv"))?;
    s.files.push("trajectory.csv".into());
    for k in [0, traj.len() - 1] {
        let name = format!("snapshot_{k:06}.csv");
        traj.write_snapshot(sys.mesh(), k, &out.join(&name))?;
        s.files.push(name);
    }
    let (problem, levels) = match sys.mesh().kind() {
        MeshKind::Interval => (MmsProblem::interval(1.0), [8, 16, 32]),
        MeshKind::Cylinder => (MmsProblem::cylinder(0.2, 0.1, 2.0, 1.0), [4, 8, 16]),
    };
    let study = convergence_order(&problem, &levels, 0.5)?;
    study.write_csv(&out.join("convergence.csv"))?;
    s.files.push("convergence.csv".into());
    s.line(format!("convergence ({}): levels {levels:?}, observed spatial order {:.3}", problem.name, study.slope));
    s.metric("convergence_slope", study.slope);
    let failed = reports.iter().filter(|r| !r.pass).count();
    for r in &reports {
        s.line(r.to_string());
        s.metric(&r.name, r.value);
    }
    s.line(format!("{} of {} checks passed", reports.len() - failed, reports.len()));
    if failed > 0 {
        s.exit_code = EXIT_NUMERICAL;
    }
    Ok(())
}

/// Cartesian product of the sweep axes, one subdirectory per point.
fn run_sweep(loaded: &LoadedConfig, out: &Path, seed: u64, allow_unchecked: bool) -> Result<RunSummary> {
    let sweep = loaded.config.sweep.clone().ok_or_else(|| Error::Config("sweep mode needs a [sweep] block".into()))?;
    let mut points: Vec<Vec<toml::Value>> = vec![Vec::new()];
    for axis in &sweep.axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    fs::create_dir_all(out)?;
    let results: Vec<(String, std::result::Result<RunSummary, Error>)> = points
        .par_iter()
        .enumerate()
        .map(|(i, values)| {
            let name = format!("point_{i:03}");
            let run = || -> Result<RunSummary> {
                let mut raw = loaded.raw.clone();
                if let Some(t) = raw.as_table_mut() {
                    t.remove("sweep");
                    t.remove("mode");
                }
                for (axis, v) in sweep.axes.iter().zip(values) {
                    set_path(&mut raw, &axis.path, v.clone())?;
                }
                let cfg = config_from_value(raw)?;
                gate(&cfg, allow_unchecked)?;
                run_mode(sweep.mode, &cfg, &out.join(&name), seed)
            };
            let r = run();
            (name, r)
        })
        .collect();

    let mut s = RunSummary::default();
    let mut keys: Vec<String> = Vec::new();
    for (_, r) in &results {
        if let Ok(r) = r {
            for (k, _) in &r.metrics {
                if !keys.contains(k) {
                    keys.push(k.clone());
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    let mut header = vec!["point".to_string()];
    header.extend(sweep.axes.iter().map(|a| a.path.clone()));
    header.push("exit_code".into());
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    let mut worst = EXIT_OK;
    for ((name, r), values) in results.iter().zip(&points) {
        let mut row = vec![name.clone()];
        row.extend(values.iter().map(|v| v.to_string()));
        let code = match r {
            Ok(r) => r.exit_code,
            Err(e) => e.exit_code(),
        };
        worst = worst.max(code);
        row.push(code.to_string());
        for k in &keys {
            row.push(match r {
                Ok(r) => r.get(k).map_or(String::new(), |v| format!("{v:.17e}")),
                Err(_) => String::new(),
            });
        }
        w.write_record(&row)?;
        match r {
            Ok(_) => s.line(format!("{name}: exit {code}")),
            Err(e) => s.line(format!("{name}: error: {e}")),
        }
        s.files.push(name.clone());
    }
    w.flush()?;
    s.files.push("sweep.csv".into());
    if sweep.axes.len() == 1 {
        let m0: Vec<f64> = results.iter().filter_map(|(_, r)| r.as_ref().ok().and_then(|r| r.get("m0"))).collect();
        if m0.len() == points.len() && m0.len() > 1 {
            let monotone = m0.windows(2).all(|p| p[1] >= p[0] * (1.0 - 1e-12));
            s.line(format!(
                "M0 along {}: {} ({})",
                sweep.axes[0].path,
                m0.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", "),
                if monotone { "non-decreasing" } else { "not monotone" }
            ));
        }
    }
    fs::write(out.join("report.txt"), s.lines.join("\n") + "\n")?;
    s.files.push("report.txt".into());
    s.exit_code = worst;
    Ok(s)
}

fn write_manifest(cli: &Cli, mode: Mode, loaded: &LoadedConfig, out: &Path, seed: u64, s: &RunSummary) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut m = String::new();
    let q = |v: &str| toml::Value::String(v.to_string()).to_string();
    let _ = writeln!(m, "[run]");
    let _ = writeln!(m, "program = {}", q(concat!("wentzell-wave ", env!("CARGO_PKG_VERSION"))));
    let _ = writeln!(m, "mode = {}", q(mode.name()));
    let _ = writeln!(m, "config = {}", q(&cli.config.display().to_string()));
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "allow_unchecked = {}", cli.allow_unchecked);
    let _ = writeln!(m, "exit_code = {}", s.exit_code);
    let _ = writeln!(m, "created_unix = {created}");
    let _ = writeln!(
        m,
        "rerun = {}",
        q(&format!(
            "wentzell-wave {} --config config.toml --seed {seed}{}",
            mode.name(),
            if cli.allow_unchecked { " --allow-unchecked" } else { "" }
        ))
    );
    let _ = writeln!(m, "\n[environment]");
    let _ = writeln!(m, "os = {}", q(std::env::consts::OS));
    let _ = writeln!(m, "arch = {}", q(std::env::consts::ARCH));
    let _ = writeln!(m, "threads = {}", rayon::current_num_threads());
    let _ = writeln!(m, "float = {}", q("IEEE 754 binary64, round-to-nearest, no fused contraction assumed"));
    let _ = writeln!(m, "\n[warnings]");
    let _ = writeln!(m, "hypotheses = [{}]", loaded.warnings.iter().map(|w| q(&w.to_string())).collect::<Vec<_>>().join(", "));
    let _ = writeln!(m, "\n[outputs]");
    let _ = writeln!(m, "files = [{}]", s.files.iter().map(|f| q(f)).collect::<Vec<_>>().join(", "));
    if mode == Mode::Sweep {
        fs::write(out.join("config.toml"), toml::to_string(&loaded.raw).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    fs::write(out.join("manifest.toml"), m)?;
    Ok(())
}
