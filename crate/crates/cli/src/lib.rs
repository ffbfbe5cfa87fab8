//! The `nsk` command line: simulations, parameter sweeps, the Picard study
//! and the operator check, each writing its reports into one run directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use nsk_core::dynamics::{cfl_dt, simulate, DtPolicy, SimulateOptions, System};
use nsk_core::experiments::{
    energy_report, fit_rate, max_principle_report, norm_tracker, order_parameter_error,
    sweep_alpha, sweep_kappa, ConvergenceTable, InvariantMonitor, SweepBase,
};
use nsk_core::io::{
    parse_config, prepare_run_dir, write_csv, write_field, write_json, write_manifest, RunConfig,
    RunManifest,
};
use nsk_core::nonlocal::check_operator_bounds;
use nsk_core::picard::{eta_consistency, picard_solve, PicardConfig};
use nsk_core::{Error, RelaxationParam};

/// Exit status for usage errors, matching clap.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when a run finishes but a check or the run itself fails.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "nsk",
    version,
    about = "Pseudo-spectral Navier-Stokes-Korteweg solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one system and write frames, energy and norm reports.
    Simulate(RunArgs),
    /// Relaxed runs at several alpha against the local-capillarity reference.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated alpha values (at least two).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Relaxed runs at several kappa against the Navier-Stokes reference.
    SweepKappa {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated kappa values (at least two).
        #[arg(long, value_delimiter = ',')]
        kappas: Option<Vec<f64>>,
    },
    /// Linearized fixed-point iteration and its contraction history.
    Picard {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Randomized check of the multiplier bounds of k_alpha.
    CheckOps {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 8.0)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `check_ops.json` and a manifest here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure of a subcommand, mapped to an exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns its exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Simulate(run) => cmd_simulate(&run),
        Command::SweepAlpha { run, alphas } => {
            let extra = alphas.map(|a| ("alphas", toml_list(&a)));
            cmd_sweep_alpha(&load_config(&run, extra.into_iter().collect())?)
        }
        Command::SweepKappa { run, kappas } => {
            let extra = kappas.map(|k| ("kappas", toml_list(&k)));
            cmd_sweep_kappa(&load_config(&run, extra.into_iter().collect())?)
        }
        Command::Picard {
            run,
            horizon,
            tol,
            max_iter,
        } => {
            let mut extra = Vec::new();
            if let Some(h) = horizon {
                extra.push(("picard_horizon", toml::Value::Float(h)));
            }
            if let Some(t) = tol {
                extra.push(("picard_tol", toml::Value::Float(t)));
            }
            if let Some(m) = max_iter {
                extra.push(("picard_max_iter", toml::Value::Integer(m as i64)));
            }
            cmd_picard(&load_config(&run, extra)?)
        }
        Command::CheckOps {
            n,
            alpha,
            trials,
            seed,
            output,
        } => cmd_check_ops(n, alpha, trials, seed, output.as_deref()),
    }
}

fn toml_list(values: &[f64]) -> toml::Value {
    toml::Value::Array(values.iter().map(|v| toml::Value::Float(*v)).collect())
}

/// Config file (if any) with command-line overrides applied, then validated.
fn load_config(
    run: &RunArgs,
    extra: Vec<(&str, toml::Value)>,
) -> std::result::Result<RunConfig, Failure> {
    let mut table = match &run.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::Run(Error::Config(e.message().to_string())))?
        }
        None => toml::Table::new(),
    };
    let mut set = |key: &str, v: toml::Value| {
        table.insert(key.to_string(), v);
    };
    if let Some(s) = &run.system {
        set("system", toml::Value::String(s.clone()));
    }
    if let Some(n) = run.n {
        set("n", toml::Value::Integer(n as i64));
    }
    if let Some(t) = run.t_end {
        set("t_end", toml::Value::Float(t));
    }
    if let Some(f) = run.frames {
        set("frames", toml::Value::Integer(f as i64));
    }
    if let Some(k) = run.kappa {
        set("kappa", toml::Value::Float(k));
    }
    if let Some(a) = run.alpha {
        set("alpha", toml::Value::Float(a));
    }
    if let Some(s) = run.seed {
        set("seed", toml::Value::Integer(s as i64));
    }
    if let Some(o) = &run.output {
        set(
            "output_dir",
            toml::Value::String(o.to_string_lossy().into_owned()),
        );
    }
    for (k, v) in extra {
        set(k, v);
    }
    // Without a config file the command line may omit the required keys.
    if run.config.is_none() {
        table
            .entry("system")
            .or_insert_with(|| toml::Value::String(System::RelaxedInsk.name().into()));
        table.entry("n").or_insert(toml::Value::Integer(128));
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    Ok(parse_config(&text)?)
}

/// Simulation options taken from the config.
fn options_for(config: &RunConfig) -> SimulateOptions {
    SimulateOptions {
        t_end: config.t_end,
        dt_policy: config.dt_policy,
        frames: config.frames,
        ..SimulateOptions::default()
    }
}

struct RunDir {
    dir: PathBuf,
    artifacts: Vec<String>,
    started: Instant,
}

impl RunDir {
    fn open(dir: &Path) -> std::result::Result<Self, Failure> {
        prepare_run_dir(dir)?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(
        self,
        command: &str,
        config: RunConfig,
        monitors: Map<String, Value>,
        exit_status: i32,
    ) -> Outcome {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            monitors,
            artifacts: self.artifacts,
            exit_status,
        };
        write_manifest(&self.dir, &manifest)?;
        Ok(exit_status)
    }
}

fn cmd_simulate(run: &RunArgs) -> Outcome {
    let config = load_config(run, Vec::new())?;
    let init = config.initial_state()?;
    let params = config.params()?;
    let mut out = RunDir::open(&config.output_dir)?;
    let mut invariants = InvariantMonitor::new();
    let traj = simulate(
        &init,
        &params,
        &options_for(&config),
        &mut [&mut invariants],
    )?;

    fs::create_dir_all(out.dir.join("frames")).map_err(|e| Error::Io {
        path: out.dir.join("frames"),
        source: e,
    })?;
    for (k, frame) in traj.frames.iter().enumerate() {
        write_field(&frame.rho, &out.path(&format!("frames/rho_{k:04}.nskf")))?;
        for (i, c) in frame.u.iter().enumerate() {
            write_field(c, &out.path(&format!("frames/u{i}_{k:04}.nskf")))?;
        }
    }
    let energy = energy_report(&traj, &params);
    let rows: Vec<Vec<Option<f64>>> = (0..energy.times.len())
        .map(|k| {
            vec![
                Some(energy.times[k]),
                Some(energy.energy[k]),
                Some(energy.dissipation[k]),
                Some(energy.residual[k]),
            ]
        })
        .collect();
    write_csv(
        &out.path("energy.csv"),
        &["time", "energy", "dissipation", "residual"],
        &rows,
    )?;
    let norms = norm_tracker(&traj);
    let rows: Vec<Vec<Option<f64>>> = norms
        .iter()
        .map(|s| {
            vec![
                Some(s.time),
                Some(s.rho_h4),
                Some(s.u_h3),
                Some(s.grad_u_h3_integral),
                Some(s.dtu_h2_integral),
                Some(s.m),
            ]
        })
        .collect();
    write_csv(
        &out.path("norms.csv"),
        &[
            "time",
            "rho_h4",
            "u_h3",
            "grad_u_h3_integral",
            "dtu_h2_integral",
            "m",
        ],
        &rows,
    )?;

    let mp = max_principle_report(&traj);
    let mut monitors = Map::new();
    monitors.insert("steps".into(), json!(traj.steps));
    monitors.insert(
        "energy".into(),
        json!({
            "initial": energy.energy[0],
            "final": energy.energy.last(),
            "max_abs_residual": energy.max_abs_residual(),
        }),
    );
    monitors.insert(
        "max_principle".into(),
        json!({"rho_m": mp.rho_m, "rho_M": mp.rho_big_m, "min": mp.min, "max": mp.max, "overshoot": mp.overshoot}),
    );
    monitors.insert(
        "invariants".into(),
        json!({
            "max_divergence": invariants.max_divergence,
            "relative_momentum_drift": invariants.relative_momentum_drift(),
        }),
    );
    if params.system == System::RelaxedInsk {
        let mut ops = Map::new();
        for l in [0u32, 1, 2] {
            let op = order_parameter_error(&traj, params.alpha.get(), l as f64)?;
            ops.insert(
                format!("l{l}"),
                json!({"error": op.error, "bound": op.bound, "worst_ratio": op.worst_ratio}),
            );
        }
        monitors.insert("order_parameter".into(), Value::Object(ops));
    }
    let status = match &traj.blow_up {
        Some(b) => {
            eprintln!("blow-up at t = {}: {}", b.time, b.reason);
            monitors.insert(
                "blow_up".into(),
                json!({"time": b.time, "reason": b.reason}),
            );
            EXIT_FAILURE
        }
        None => 0,
    };
    println!(
        "simulate: {} steps to t = {}, energy residual {:.3e}, overshoot {:.3e}",
        traj.steps,
        traj.last().time,
        energy.max_abs_residual(),
        mp.overshoot
    );
    out.finish("simulate", config, monitors, status)
}

fn sweep_base(config: &RunConfig) -> std::result::Result<SweepBase, Failure> {
    Ok(SweepBase {
        init: config.initial_state()?,
        kappa: config.kappa,
        alpha: config.alpha,
        rho_bar: config.rho_bar,
        t_end: config.t_end,
        frames: config.frames,
        dt_policy: config.dt_policy,
    })
}

fn write_sweep(command: &str, config: RunConfig, table: &ConvergenceTable) -> Outcome {
    let mut out = RunDir::open(&config.output_dir)?;
    let mut header = vec!["parameter"];
    header.extend(table.columns.iter().map(String::as_str));
    let rows: Vec<Vec<Option<f64>>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![Some(r.parameter)];
            row.extend(r.errors.iter().map(|e| Some(*e)));
            row
        })
        .collect();
    write_csv(&out.path("convergence.csv"), &header, &rows)?;

    let mut fits = Map::new();
    for column in &table.columns {
        let entry = match fit_rate(table, column) {
            Ok(fit) => {
                if !fit.dropped.is_empty() {
                    eprintln!(
                        "warning: {column}: dropped rows at {:?} (zero or invalid error)",
                        fit.dropped
                    );
                }
                println!(
                    "{column}: slope {:.4} (r^2 {:.6})",
                    fit.slope, fit.r_squared
                );
                serde_json::to_value(&fit).expect("fit serializes")
            }
            Err(e) => json!({"error": e.to_string()}),
        };
        fits.insert(column.clone(), entry);
    }
    let fit_doc = json!({
        "parameter": table.parameter.name(),
        "reference": table.reference,
        "dt": table.dt,
        "fits": fits,
    });
    write_json(&out.path("rate_fit.json"), &fit_doc)?;
    let mut monitors = Map::new();
    monitors.insert("dt".into(), json!(table.dt));
    monitors.insert(
        "invalid_rows".into(),
        json!(table
            .rows
            .iter()
            .filter(|r| !r.valid)
            .map(|r| r.parameter)
            .collect::<Vec<_>>()),
    );
    let status = if table.rows.iter().all(|r| r.valid) {
        0
    } else {
        EXIT_FAILURE
    };
    out.finish(command, config, monitors, status)
}

fn cmd_sweep_alpha(config: &RunConfig) -> Outcome {
    if config.alphas.len() < 2 {
        return Err(Failure::Usage(format!(
            "sweep-alpha needs at least two alpha values (got {})",
            config.alphas.len()
        )));
    }
    let table = sweep_alpha(&sweep_base(config)?, &config.alphas, &[0, 1, 2])?;
    write_sweep("sweep-alpha", config.clone(), &table)
}

fn cmd_sweep_kappa(config: &RunConfig) -> Outcome {
    if config.kappas.len() < 2 {
        return Err(Failure::Usage(format!(
            "sweep-kappa needs at least two kappa values (got {})",
            config.kappas.len()
        )));
    }
    let table = sweep_kappa(&sweep_base(config)?, &config.kappas)?;
    write_sweep("sweep-kappa", config.clone(), &table)
}

fn cmd_picard(config: &RunConfig) -> Outcome {
    let init = config.initial_state()?;
    let params = config.params()?;
    let dt = match config.dt_policy {
        DtPolicy::Fixed(dt) => dt,
        DtPolicy::Cfl { safety } => cfl_dt(&init, &params, safety)?,
    };
    let picard = PicardConfig {
        horizon: config.picard_horizon,
        dt,
        tol: config.picard_tol,
        max_iter: config.picard_max_iter,
    };
    let mut out = RunDir::open(&config.output_dir)?;
    let (fixed, report) = picard_solve(&init, &params, &picard)?;
    let rows: Vec<Vec<Option<f64>>> = report
        .x_sequence
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let ratio = i.checked_sub(1).map(|j| report.ratios[j]);
            vec![Some((i + 1) as f64), Some(*x), ratio]
        })
        .collect();
    write_csv(
        &out.path("contraction.csv"),
        &["iteration", "x_sup", "ratio"],
        &rows,
    )?;
    let consistency = eta_consistency(&fixed);
    for (i, x) in report.x_sequence.iter().enumerate() {
        println!("iteration {:>3}: sup_t X = {x:.6e}", i + 1);
    }
    let mut monitors = Map::new();
    monitors.insert("converged".into(), json!(report.converged));
    monitors.insert("non_contraction".into(), json!(report.non_contraction));
    monitors.insert("failure".into(), json!(report.failure));
    monitors.insert("eta_consistency".into(), json!(consistency));
    monitors.insert("dt".into(), json!(fixed.dt()));
    monitors.insert("steps".into(), json!(fixed.steps()));
    let status = if report.converged { 0 } else { EXIT_FAILURE };
    out.finish("picard", config.clone(), monitors, status)
}

fn cmd_check_ops(n: usize, alpha: f64, trials: usize, seed: u64, output: Option<&Path>) -> Outcome {
    let alpha = RelaxationParam::new(alpha).map_err(|e| Failure::Usage(e.to_string()))?;
    let report = check_operator_bounds(n, alpha, trials, seed)?;
    for c in &report.checks {
        println!(
            "{} {:<48} worst {:.3e} limit {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.limit
        );
    }
    let status = if report.all_passed() { 0 } else { EXIT_FAILURE };
    println!(
        "check-ops: {} of {} checks passed",
        report.checks.iter().filter(|c| c.passed).count(),
        report.checks.len()
    );
    if let Some(dir) = output {
        let mut out = RunDir::open(dir)?;
        write_json(&out.path("check_ops.json"), &report)?;
        let mut config = RunConfig::new(System::RelaxedInsk, n)?;
        config.alpha = alpha.get();
        config.seed = seed;
        config.output_dir = dir.to_path_buf();
        let mut monitors = Map::new();
        monitors.insert("all_passed".into(), json!(report.all_passed()));
        return out.finish("check-ops", config, monitors, status);
    }
    Ok(status)
}
