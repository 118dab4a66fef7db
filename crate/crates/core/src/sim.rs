//! Closed-loop simulation of plant and secondary controller.
//!
//! At every sampling instant `t_k = k·h` the runner applies scenario events,
//! hands the measured `(v, i_f, e)` to the controller and integrates the
//! plant over one step with RK4 while holding the reference. The plant is the
//! full model with line currents unless configured otherwise; the controllers
//! always predict with the reduced model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{discretize, integrate_rk4, rk4_substeps, ContinuousModel, DiscreteModel};
use crate::grid::{loss_matrix, GridTopology, LineId};
use crate::mpc::{ControllerKind, MpcConfig, MpcController, MpcStepResult, StepInputs};
use crate::network::Microgrid;
use crate::par::Execution;
use crate::qp::QpStatus;
use crate::scenario::{InitialState, Scenario};
use crate::setpoint::{solve_opt_ss, SetpointSettings};
use crate::{Error, Result};

/// Version tag written into the CSV header comment.
pub const CSV_SCHEMA: &str = "dcmpc-trajectory/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlantModel {
    /// Node states plus line currents.
    #[default]
    Full,
    /// Quasi-stationary lines, the controllers' prediction model.
    Reduced,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub mpc: MpcConfig,
    pub setpoint: SetpointSettings,
    pub plant: PlantModel,
    /// Minimum number of RK4 substeps per sampling step; raised when the
    /// plant spectrum requires it.
    pub substeps: usize,
    /// Overrides the scenario duration.
    pub duration: Option<f64>,
}

impl SimConfig {
    pub fn from_grid(grid: &Microgrid) -> Self {
        Self {
            mpc: MpcConfig::from_grid(grid),
            setpoint: SetpointSettings { execution: Execution::Sequential, ..SetpointSettings::default() },
            plant: PlantModel::Full,
            substeps: 100,
            duration: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
    pub relaxed_steps: usize,
    pub rebuilt: bool,
    pub fallback: bool,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub step: f64,
    pub horizon: usize,
    pub eta: f64,
    pub plant: PlantModel,
    pub times: Vec<f64>,
    pub voltages: Vec<DVector<f64>>,
    pub filter_currents: Vec<DVector<f64>>,
    /// Empty when the plant has no line states.
    pub line_currents: Vec<DVector<f64>>,
    pub references: Vec<DVector<f64>>,
    /// Setpoint in force at each step; empty for the economic controller.
    pub setpoints: Vec<DVector<f64>>,
    /// Watts.
    pub losses: Vec<f64>,
    /// Joules.
    pub cumulative: Vec<f64>,
    /// Line removed and the index of the first step without it.
    pub line_failure: Option<(LineId, usize)>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SimReport {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Total transmission losses in joules.
    pub fn total_losses(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Topology in force at step `k`.
    pub fn topology_at(&self, grid: &Microgrid, k: usize) -> Result<GridTopology> {
        match self.line_failure {
            Some((line, from)) if k >= from => grid.topology.remove_line(line),
            _ => Ok(grid.topology.clone()),
        }
    }
}

/// What an observer sees after each controller call.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub x0: &'a DVector<f64>,
    pub model: &'a DiscreteModel,
    pub v_star: Option<&'a DVector<f64>>,
    pub result: &'a MpcStepResult,
}

struct Models {
    prediction: DiscreteModel,
    plant: ContinuousModel,
    loss: DMatrix<f64>,
    substeps: usize,
}

fn build_models(grid: &Microgrid, topology: &GridTopology, loads: &DVector<f64>, config: &SimConfig) -> Result<Models> {
    let reduced = grid.reduced_model(topology, loads)?;
    let prediction = discretize(&reduced, config.mpc.step)?;
    let plant = match config.plant {
        PlantModel::Full => grid.full_model(topology, loads)?,
        PlantModel::Reduced => reduced,
    };
    let substeps = rk4_substeps(&plant, config.mpc.step, config.substeps.max(1));
    let loss = loss_matrix(topology, &grid.lines)?;
    Ok(Models { prediction, plant, loss, substeps })
}

pub fn run_scenario(
    grid: &Microgrid,
    kind: ControllerKind,
    scenario: &Scenario,
    config: &SimConfig,
) -> Result<SimReport> {
    run_scenario_observed(grid, kind, scenario, config, |_| {})
}

/// [`run_scenario`] with a callback after every controller call.
pub fn run_scenario_observed<F>(
    grid: &Microgrid,
    kind: ControllerKind,
    scenario: &Scenario,
    config: &SimConfig,
    mut observer: F,
) -> Result<SimReport>
where
    F: FnMut(&StepView<'_>),
{
    let n = grid.node_count();
    config.mpc.validate(n)?;
    scenario.validate(&grid.topology)?;
    let h = config.mpc.step;
    let duration = config.duration.unwrap_or(scenario.duration);
    if !(duration > 0.0) {
        return Err(Error::Config("simulation duration must be positive".into()));
    }
    let steps = (duration / h).round() as usize;
    let schedule = scenario.schedule(&grid.nominal_loads, h);
    let initial_topology = grid.topology.clone();
    let mut topology = grid.topology.clone();

    let setpoint_at =
        |t: f64| solve_opt_ss(&initial_topology, &grid.lines, &schedule.known(t), &grid.limits, &config.setpoint);
    let mut v_star = match (kind, scenario.initial) {
        (ControllerKind::Tracking, _) | (_, InitialState::Setpoint) => Some(setpoint_at(0.0)?.v),
        _ => None,
    };
    let v_init = match scenario.initial {
        InitialState::Setpoint => v_star.clone().expect("computed above"),
        InitialState::Flat(v) => DVector::from_element(n, v),
    };
    if kind == ControllerKind::Economic {
        v_star = None;
    }

    let mut loads = schedule.actual(0.0);
    let mut models = build_models(grid, &topology, &loads, config)?;
    let mut revision = 0u64;
    let mut state = models.plant.equilibrium(&v_init)?;
    let mut controller = MpcController::new(kind, config.mpc.clone());
    controller.set_previous_input(v_init);

    let mut report = SimReport {
        scenario: scenario.name.clone(),
        scenario_hash: scenario.hash().to_string(),
        controller: kind,
        seed: scenario.seed,
        step: h,
        horizon: config.mpc.horizon,
        eta: config.mpc.eta,
        plant: config.plant,
        times: Vec::with_capacity(steps),
        voltages: Vec::with_capacity(steps),
        filter_currents: Vec::with_capacity(steps),
        line_currents: Vec::new(),
        references: Vec::with_capacity(steps),
        setpoints: Vec::new(),
        losses: Vec::with_capacity(steps),
        cumulative: Vec::with_capacity(steps),
        line_failure: None,
        diagnostics: Vec::with_capacity(steps),
    };
    let mut period = 0u64;
    let mut total = 0.0;
    for k in 0..steps {
        let t = k as f64 * h;
        let mut changed = false;
        if let Some(failure) = &scenario.line_failure {
            if report.line_failure.is_none() && t >= failure.time {
                topology = topology.remove_line(failure.line)?;
                if config.plant == PlantModel::Full {
                    let idx = topology.line_index(failure.line).expect("validated");
                    state[3 * n + idx] = 0.0;
                }
                report.line_failure = Some((failure.line, k));
                changed = true;
                log::info!("line {} removed at t = {t} s", failure.line.0);
            }
        }
        let current = schedule.actual(t);
        if current != loads {
            loads = current;
            changed = true;
        }
        if changed {
            models = build_models(grid, &topology, &loads, config)?;
            revision += 1;
        }
        if kind == ControllerKind::Tracking {
            let this_period = ((t / scenario.setpoint_period) + 1e-9).floor() as u64;
            if this_period != period {
                period = this_period;
                match setpoint_at(t) {
                    Ok(sol) => v_star = Some(sol.v),
                    Err(e) => log::warn!("setpoint update at t = {t} s failed, keeping the previous one: {e}"),
                }
            }
        }

        let x0 = state.rows(0, 3 * n).into_owned();
        let result = controller.control_step(&StepInputs {
            model: &models.prediction,
            revision,
            x0: &x0,
            v_star: v_star.as_ref(),
            loss: &models.loss,
        })?;
        observer(&StepView { k, t, x0: &x0, model: &models.prediction, v_star: v_star.as_ref(), result: &result });

        let v = x0.rows(0, n).into_owned();
        let loss = v.dot(&(&models.loss * &v));
        total += loss * h;
        report.times.push(t);
        report.filter_currents.push(x0.rows(n, n).into_owned());
        if config.plant == PlantModel::Full {
            report.line_currents.push(state.rows(3 * n, state.len() - 3 * n).into_owned());
        }
        report.voltages.push(v);
        report.references.push(result.u_applied.clone());
        if let Some(vs) = &v_star {
            report.setpoints.push(vs.clone());
        }
        report.losses.push(loss);
        report.cumulative.push(total);
        report.diagnostics.push(StepDiagnostics {
            status: result.qp.status,
            iterations: result.qp.iterations,
            prim_res: result.qp.prim_res,
            dual_res: result.qp.dual_res,
            polished: result.qp.polished,
            relaxed_steps: result.qp.relaxed_steps,
            rebuilt: result.rebuilt,
            fallback: result.fallback,
            objective: result.objective,
        });

        state = integrate_rk4(&models.plant, &state, &result.u_applied, h / models.substeps as f64, models.substeps);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::PlantDiverged(t + h));
        }
    }
    Ok(report)
}

/// Runs both controllers on the same scenario; returns `(tracking, economic)`.
pub fn run_comparison(
    grid: &Microgrid,
    scenario: &Scenario,
    config: &SimConfig,
    execution: Execution,
) -> Result<(SimReport, SimReport)> {
    let mut runs = execution
        .map(vec![ControllerKind::Tracking, ControllerKind::Economic], |kind| {
            run_scenario(grid, kind, scenario, config)
        })
        .into_iter();
    let tracking = runs.next().expect("two runs")?;
    let economic = runs.next().expect("two runs")?;
    Ok((tracking, economic))
}

/// `Σ_k v(k)ᵀ Q_loss(k) v(k) · h`, recomputed from the logged voltages.
pub fn transmission_losses(report: &SimReport, grid: &Microgrid) -> Result<f64> {
    let before = loss_matrix(&report.topology_at(grid, 0)?, &grid.lines)?;
    let after = match report.line_failure {
        Some((_, from)) => loss_matrix(&report.topology_at(grid, from)?, &grid.lines)?,
        None => before.clone(),
    };
    let mut total = 0.0;
    for (k, v) in report.voltages.iter().enumerate() {
        let q = match report.line_failure {
            Some((_, from)) if k >= from => &after,
            _ => &before,
        };
        total += v.dot(&(q * v)) * report.step;
    }
    Ok(total)
}

/// Loss reduction of the economic controller relative to its own losses,
/// in percent: `100·(L_track − L_econ)/L_econ`.
pub fn performance_increase(tracking: &SimReport, economic: &SimReport) -> Result<f64> {
    if tracking.scenario_hash != economic.scenario_hash {
        return Err(Error::ScenarioMismatch(tracking.scenario.clone(), economic.scenario.clone()));
    }
    if tracking.seed != economic.seed || tracking.len() != economic.len() {
        return Err(Error::ScenarioMismatch(
            format!("{} (seed {}, {} steps)", tracking.scenario, tracking.seed, tracking.len()),
            format!("{} (seed {}, {} steps)", economic.scenario, economic.seed, economic.len()),
        ));
    }
    let (lt, le) = (tracking.total_losses(), economic.total_losses());
    if !(le > 0.0) {
        return Err(Error::InvalidParameter("economic losses are zero; the relative increase is undefined".into()));
    }
    Ok(100.0 * (lt - le) / le)
}

/// Writes one row per step: `t, v_1..v_n, u_1..u_n, loss_W, cumulative_J`,
/// preceded by a `#` comment naming the schema and the run.
pub fn write_csv<W: Write>(report: &SimReport, mut out: W) -> Result<()> {
    let n = report.voltages.first().map_or(0, |v| v.len());
    writeln!(
        out,
        "# {CSV_SCHEMA} scenario={} controller={} seed={} step={} horizon={} eta={} scenario_sha256={}",
        report.scenario, report.controller, report.seed, report.step, report.horizon, report.eta, report.scenario_hash
    )?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("v_{i}")));
    header.extend((1..=n).map(|i| format!("u_{i}")));
    header.push("loss_W".into());
    header.push("cumulative_J".into());
    w.write_record(&header)?;
    for k in 0..report.len() {
        let mut row = Vec::with_capacity(2 * n + 3);
        row.push(report.times[k].to_string());
        row.extend(report.voltages[k].iter().map(|x| x.to_string()));
        row.extend(report.references[k].iter().map(|x| x.to_string()));
        row.push(report.losses[k].to_string());
        row.push(report.cumulative[k].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_grid() -> Microgrid {
        let text = r#"
format = 1
name = "pair"
base_voltage = 400.0
[control]
step = 0.01
horizon = 10
eta = 0.01
[bus_defaults]
filter_resistance = 0.1
filter_inductance = 0.01
filter_capacitance = 0.2
gains = { k1 = -3.0, k2 = -0.5, k3 = 72.0 }
voltage = [380.0, 420.0]
power = [-20000.0, 0.0]
filter_current = [-10.0, 40.0]
reference = [360.0, 440.0]
[[bus]]
load = 0.03
voltage = [392.0, 420.0]
[[bus]]
load = 0.05
voltage = [380.0, 388.0]
[[line]]
id = 1
from = 1
to = 2
resistance = 0.5
inductance = 3.5e-5
"#;
        Microgrid::from_toml_str(text, "pair").unwrap()
    }

    fn short(name: &str, extra: &str) -> Scenario {
        Scenario::from_toml_str(&format!("name = \"{name}\"\nduration = 0.5\nseed = 3\n{extra}"), name).unwrap()
    }

    #[test]
    fn cumulative_is_riemann_sum_and_nondecreasing() {
        let g = two_node_grid();
        let s = short("a", "[[load_step]]\ntime = 0.2\nnodes = [1]\nfactor = 1.5\n");
        let r = run_scenario(&g, ControllerKind::Economic, &s, &SimConfig::from_grid(&g)).unwrap();
        assert_eq!(r.len(), 50);
        let mut sum = 0.0;
        for k in 0..r.len() {
            sum += r.losses[k] * r.step;
            assert!((r.cumulative[k] - sum).abs() <= 1e-12 * sum.max(1.0));
            assert!(r.losses[k] >= 0.0);
        }
        assert!((transmission_losses(&r, &g).unwrap() - r.total_losses()).abs() < 1e-9);
    }

    #[test]
    fn losses_of_fixed_voltages() {
        // v = (401, 400) for 1 s over R = 0.5 gives 2 J.
        let g = two_node_grid();
        let mut r = run_scenario(&g, ControllerKind::Economic, &short("b", ""), &SimConfig::from_grid(&g)).unwrap();
        r.step = 1.0;
        r.voltages = vec![DVector::from_vec(vec![401.0, 400.0])];
        assert!((transmission_losses(&r, &g).unwrap() - 2.0).abs() < 1e-9);
        let mut doubled = g.clone();
        doubled.lines[0].resistance = 1.0;
        assert!((transmission_losses(&r, &doubled).unwrap() - 1.0).abs() < 1e-9);
        r.voltages = vec![DVector::from_vec(vec![400.0, 400.0])];
        assert_eq!(transmission_losses(&r, &g).unwrap(), 0.0);
    }

    #[test]
    fn performance_metric() {
        let g = two_node_grid();
        let s = short("c", "");
        let r = run_scenario(&g, ControllerKind::Economic, &s, &SimConfig::from_grid(&g)).unwrap();
        assert_eq!(performance_increase(&r, &r).unwrap(), 0.0);
        let mut scaled = r.clone();
        for c in &mut scaled.cumulative {
            *c *= 1.093;
        }
        assert!((performance_increase(&scaled, &r).unwrap() - 9.3).abs() < 1e-9);
        assert!(performance_increase(&r, &scaled).unwrap() < 0.0);
        let other = run_scenario(&g, ControllerKind::Economic, &short("d", ""), &SimConfig::from_grid(&g)).unwrap();
        assert_eq!(performance_increase(&r, &other).unwrap_err().code(), "E_SCENARIO_MISMATCH");
    }

    #[test]
    fn tracking_holds_the_setpoint() {
        let g = two_node_grid();
        let r = run_scenario(&g, ControllerKind::Tracking, &short("e", ""), &SimConfig::from_grid(&g)).unwrap();
        let v_star = &r.setpoints[0];
        for v in &r.voltages {
            assert!((v - v_star).amax() < 1e-3, "{v} vs {v_star}");
        }
    }

    #[test]
    fn runs_are_deterministic_and_csv_is_well_formed() {
        let g = two_node_grid();
        let s = short("f", "[noise]\nnodes = \"all\"\namplitude = 0.2\nhold = 0.1\n");
        let cfg = SimConfig::from_grid(&g);
        let a = run_scenario(&g, ControllerKind::Economic, &s, &cfg).unwrap();
        let b = run_scenario(&g, ControllerKind::Economic, &s, &cfg).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# dcmpc-trajectory/1 scenario=f controller=economic seed=3"));
        assert_eq!(lines.next().unwrap(), "t,v_1,v_2,u_1,u_2,loss_W,cumulative_J");
        assert_eq!(lines.count(), a.len());
    }

    #[test]
    fn line_failure_is_applied() {
        let mut g = two_node_grid();
        // Close a loop so the network stays connected without line 1.
        g.topology = crate::grid::build_topology(2, &[(1, 0, 1), (2, 0, 1)]).unwrap();
        g.lines.push(g.lines[0]);
        let s = short("g", "[line_failure]\nline = 1\ntime = 0.25\n");
        let r = run_scenario(&g, ControllerKind::Economic, &s, &SimConfig::from_grid(&g)).unwrap();
        assert_eq!(r.line_failure, Some((LineId(1), 25)));
        assert_eq!(r.line_currents[25][0], 0.0);
        assert!(r.diagnostics[25].rebuilt && !r.diagnostics[26].rebuilt);
    }
}
