//! `dcmpc`: validate networks, compute optimal setpoints and run closed-loop
//! scenarios with the tracking and economic controllers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dcmpc_core::dynamics::{discretize, lyapunov_matrix, lyapunov_residual, max_step_size};
use dcmpc_core::mpc::ControllerKind;
use dcmpc_core::scenario::Scenario;
use dcmpc_core::setpoint::{solve_opt_ss, SetpointSettings};
use dcmpc_core::sim::{
    performance_increase, run_comparison, run_scenario, write_csv, PlantModel, SimConfig, SimReport,
};
use dcmpc_core::{Execution, Microgrid};

#[derive(Parser)]
#[command(name = "dcmpc", version, about = "DC microgrid secondary control with model predictive controllers")]
struct Cli {
    /// Network description; the built-in 11-bus grid when omitted.
    #[arg(long, global = true, env = "DCMPC_NETWORK")]
    network: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the primary-control gains, model stability and sampling step.
    Validate {
        /// Sampling step to check, seconds; the network's own when omitted.
        #[arg(long, env = "DCMPC_STEP")]
        step: Option<f64>,
    },
    /// Solve for the loss-optimal steady-state voltages.
    Setpoints {
        /// Load admittances in siemens, comma separated, one per node.
        #[arg(long, value_delimiter = ',', conflicts_with = "load_scale")]
        loads: Option<Vec<f64>>,
        /// Multiplies the nominal loads.
        #[arg(long)]
        load_scale: Option<f64>,
    },
    /// Simulate a scenario in closed loop.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Tracking,
    Economic,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Tracking => ControllerKind::Tracking,
            ControllerArg::Economic => ControllerKind::Economic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantArg {
    Full,
    Reduced,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario name, path to a scenario file, or `all`.
    #[arg(long, env = "DCMPC_SCENARIO", default_value = "nominal")]
    scenario: String,
    #[arg(long, value_enum, env = "DCMPC_CONTROLLER", default_value = "economic")]
    controller: ControllerArg,
    /// Run both controllers and report the loss comparison.
    #[arg(long, env = "DCMPC_COMPARE")]
    compare: bool,
    #[arg(long, env = "DCMPC_HORIZON")]
    horizon: Option<usize>,
    /// Sampling step, seconds.
    #[arg(long, env = "DCMPC_STEP")]
    step: Option<f64>,
    /// Input weight of the tracking controller.
    #[arg(long, env = "DCMPC_ETA")]
    eta: Option<f64>,
    /// Input-move weight of the economic controller.
    #[arg(long, env = "DCMPC_MOVE_WEIGHT")]
    move_weight: Option<f64>,
    /// Overrides the scenario's noise seed.
    #[arg(long, env = "DCMPC_SEED")]
    seed: Option<u64>,
    /// Output directory for trajectories and the summary.
    #[arg(long, env = "DCMPC_OUT", default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario duration, seconds.
    #[arg(long, env = "DCMPC_DURATION")]
    duration: Option<f64>,
    #[arg(long, value_enum, env = "DCMPC_PLANT", default_value = "full")]
    plant: PlantArg,
}

fn load_network(path: Option<&Path>) -> Result<Microgrid> {
    match path {
        Some(p) => Ok(Microgrid::load(p)?),
        None => Ok(Microgrid::default_network()),
    }
}

fn load_scenarios(spec: &str) -> Result<Vec<Scenario>> {
    if spec == "all" {
        return Ok(Scenario::builtin_names().map(|n| Scenario::builtin(n).expect("listed")).collect());
    }
    if let Some(s) = Scenario::builtin(spec) {
        return Ok(vec![s]);
    }
    Ok(vec![Scenario::load(Path::new(spec))?])
}

fn validate(grid: &Microgrid, step: Option<f64>) -> Result<String> {
    let mut out = String::new();
    let mut failures = Vec::new();
    writeln!(out, "network {} ({} buses, {} lines)", grid.name, grid.node_count(), grid.topology.line_count())?;
    writeln!(out, "passivity margins (bound - value):")?;
    for (i, report) in grid.passivity_reports().iter().enumerate() {
        let margins: Vec<String> = report.conditions.iter().map(|c| format!("{}: {:.4e}", c.name, c.margin)).collect();
        let verdict = if report.passed { "ok" } else { "FAIL" };
        writeln!(out, "  bus {:>2} {verdict:<4} {}", i + 1, margins.join(", "))?;
        for c in report.violated() {
            failures.push(format!("bus {} violates {}", i + 1, c.name));
        }
    }
    let model = grid.reduced_model(&grid.topology, &grid.nominal_loads)?;
    let eig = model.eigenvalues();
    let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let min_re = eig.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let max_im = eig.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    writeln!(
        out,
        "eigenvalues: {} in total, real parts in [{min_re:.4e}, {max_re:.4e}], |imag| <= {max_im:.4e}",
        eig.len()
    )?;
    let h = step.unwrap_or(grid.control.step);
    match max_step_size(&model) {
        Ok(h_max) => {
            let ok = h < h_max;
            writeln!(out, "h_max = {h_max:.6e} s, step h = {h} s: {}", if ok { "ok" } else { "FAIL" })?;
            if ok {
                let d = discretize(&model, h)?;
                let p = lyapunov_matrix(&d)?;
                writeln!(
                    out,
                    "spectral radius of A_k = {:.6}, Lyapunov residual = {:.3e}",
                    d.spectral_radius(),
                    lyapunov_residual(&d, &p)
                )?;
            } else {
                failures.push(format!("step {h} s is not below h_max = {h_max:.6e} s"));
            }
        }
        Err(e) => failures.push(e.to_string()),
    }
    if !failures.is_empty() {
        print!("{out}");
        bail!(ValidationFailed(failures.join("; ")));
    }
    writeln!(out, "result: pass")?;
    Ok(out)
}

#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "validation failed: {}", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn setpoints(grid: &Microgrid, loads: Option<Vec<f64>>, scale: Option<f64>) -> Result<String> {
    let n = grid.node_count();
    let y = match (loads, scale) {
        (Some(list), _) => {
            if list.len() != n {
                bail!(dcmpc_core::Error::Dimension(format!("{} loads given for {n} nodes", list.len())));
            }
            dcmpc_core::linalg::vector(list)
        }
        (None, Some(s)) => &grid.nominal_loads * s,
        (None, None) => grid.nominal_loads.clone(),
    };
    let sol = solve_opt_ss(&grid.topology, &grid.lines, &y, &grid.limits, &SetpointSettings::default())?;
    let mut out = String::new();
    writeln!(out, "{:>4}  {:>12}  {:>14}", "node", "v_V", "p_W")?;
    for i in 0..n {
        writeln!(out, "{:>4}  {:>12.6}  {:>14.4}", i + 1, sol.v[i], sol.p[i])?;
    }
    writeln!(out, "losses_W {:.6}", sol.objective)?;
    writeln!(out, "voltages {}", sol.v.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))?;
    Ok(out)
}

fn sim_config(grid: &Microgrid, args: &RunArgs) -> SimConfig {
    let mut cfg = SimConfig::from_grid(grid);
    if let Some(n) = args.horizon {
        cfg.mpc.horizon = n;
    }
    if let Some(h) = args.step {
        cfg.mpc.step = h;
    }
    if let Some(eta) = args.eta {
        cfg.mpc.eta = eta;
    }
    if let Some(w) = args.move_weight {
        cfg.mpc.move_weight = w;
    }
    cfg.duration = args.duration;
    cfg.plant = match args.plant {
        PlantArg::Full => PlantModel::Full,
        PlantArg::Reduced => PlantModel::Reduced,
    };
    cfg
}

fn write_report(dir: &Path, report: &SimReport) -> Result<PathBuf> {
    let path = dir.join(format!("{}_{}.csv", report.scenario, report.controller));
    let file = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    write_csv(report, std::io::BufWriter::new(file))?;
    Ok(path)
}

fn run(grid: &Microgrid, args: &RunArgs) -> Result<String> {
    let mut scenarios = load_scenarios(&args.scenario)?;
    if let Some(seed) = args.seed {
        for s in &mut scenarios {
            s.seed = seed;
        }
    }
    let cfg = sim_config(grid, args);
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    let mut losses = String::new();
    let mut comparison = String::new();
    writeln!(losses, "{:<16} {:<10} {:>16}", "scenario", "controller", "losses_J")?;
    writeln!(comparison, "{:<16} {:>16} {:>16} {:>10}", "scenario", "tracking_J", "economic_J", "increase")?;
    for scenario in &scenarios {
        log::info!("running scenario {}", scenario.name);
        let reports = if args.compare {
            let (t, e) = run_comparison(grid, scenario, &cfg, Execution::Parallel)
                .with_context(|| format!("scenario {}", scenario.name))?;
            let pct = performance_increase(&t, &e)?;
            writeln!(
                comparison,
                "{:<16} {:>16.6} {:>16.6} {:>+9.3} %",
                scenario.name,
                t.total_losses(),
                e.total_losses(),
                pct
            )?;
            vec![t, e]
        } else {
            vec![run_scenario(grid, args.controller.into(), scenario, &cfg)
                .with_context(|| format!("scenario {}", scenario.name))?]
        };
        for r in &reports {
            let path = write_report(&args.out, r)?;
            log::info!("wrote {}", path.display());
            writeln!(losses, "{:<16} {:<10} {:>16.6}", r.scenario, r.controller.to_string(), r.total_losses())?;
        }
    }
    let mut summary = String::from("# dcmpc-summary/1\n");
    summary += &losses;
    if args.compare {
        summary.push('\n');
        summary += &comparison;
    }
    let path = args.out.join("summary.txt");
    fs::write(&path, &summary).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(summary)
}

fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dcmpc_core::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<ValidationFailed>().is_some() {
            return "E_VALIDATION";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "E_IO";
        }
    }
    "E_CLI"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load_network(cli.network.as_deref()).and_then(|grid| match cli.command {
        Command::Validate { step } => validate(&grid, step),
        Command::Setpoints { loads, load_scale } => setpoints(&grid, loads, load_scale),
        Command::Run(args) => run(&grid, &args),
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error[{}]: {}", error_code(&err), format!("{err:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
