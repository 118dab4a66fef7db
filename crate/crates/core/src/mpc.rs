//! Setpoint-tracking and economic model predictive controllers.
//!
//! Both controllers predict with the forward-Euler model
//! `x(k) = A_k x(k−1) + B_k u(k)`, `x(0) = x0`, over `k = 1..N` and optimize
//! the stacked references `U = (u(1), …, u(N))`. The states are eliminated
//! (condensing), `X = X_free + Γ z` with `z = U − U_nom`, which leaves a dense
//! QP in `nN` variables. Rows of `Γ` that are identically zero (the first
//! two voltage predictions and the first current prediction do not depend on
//! `U`) carry no constraint and are left out.
//!
//! * tracking: `Σ_{k=1}^{N−1} ‖v(k) − v*‖² + η‖u(k) − v*‖²
//!   + (x(N) − x*)ᵀ P (x(N) − x*)`, with `U_nom = v*`;
//! * economic: `Σ_{k=1}^{N} v(k)ᵀ Q_loss v(k) + ε‖u(k) − u(k−1)‖²`, with
//!   `U_nom` and `u(0)` the previously applied reference. The move term is
//!   small; it makes the optimal inputs unique, since losses do not change
//!   under a common voltage shift and the last inputs barely reach `v`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{lyapunov_matrix, lyapunov_residual, DiscreteModel, StateLayout};
use crate::linalg::symmetrize;
use crate::network::Microgrid;
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::setpoint::Bounds;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControllerKind {
    Tracking,
    Economic,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Tracking => "tracking",
            ControllerKind::Economic => "economic",
        })
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracking" => Ok(ControllerKind::Tracking),
            "economic" => Ok(ControllerKind::Economic),
            other => Err(Error::Config(format!("unknown controller `{other}`"))),
        }
    }
}

/// What to do when a QP is not solved to tolerance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FallbackPolicy {
    #[default]
    Abort,
    /// Keep applying the previous reference.
    HoldPrevious,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub step: f64,
    /// Input weight of the tracking cost.
    pub eta: f64,
    /// Weight on reference changes in the economic cost.
    pub move_weight: f64,
    pub voltage: Bounds,
    pub filter_current: Bounds,
    pub reference: Bounds,
    pub qp: QpSettings,
    pub fallback: FallbackPolicy,
    /// Drop the state boxes of the first prediction steps when the fully
    /// constrained problem is infeasible.
    pub relax_state_constraints: bool,
}

/// Bound magnitude used for relaxed rows. Finite, so the row keeps its
/// inequality type and the factorization stays valid.
const RELAXED_BOUND: f64 = 1e6;

impl MpcConfig {
    pub fn from_grid(grid: &Microgrid) -> Self {
        Self {
            horizon: grid.control.horizon,
            step: grid.control.step,
            eta: grid.control.eta,
            move_weight: grid.control.move_weight,
            voltage: grid.limits.voltage.clone(),
            filter_current: grid.limits.filter_current.clone(),
            reference: grid.limits.reference.clone(),
            qp: QpSettings::default(),
            fallback: FallbackPolicy::Abort,
            relax_state_constraints: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.move_weight >= 0.0) {
            return Err(Error::Config(format!("move weight must be nonnegative, got {}", self.move_weight)));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        for (b, what) in
            [(&self.voltage, "voltage"), (&self.filter_current, "filter current"), (&self.reference, "reference")]
        {
            if b.len() != n {
                return Err(Error::Dimension(format!("{what} bounds have {} entries for {n} nodes", b.len())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    Input,
    Voltage,
    Current,
}

/// Origin of a constraint row: which quantity, at which prediction step
/// (1-based) and at which node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowTag {
    pub kind: RowKind,
    pub k: usize,
    pub node: usize,
}

enum Weights {
    Tracking { eta: f64, terminal: DMatrix<f64> },
    Economic { loss: DMatrix<f64>, moves: f64 },
}

/// Horizon-dependent data that only changes with the model.
struct Condensed {
    layout: StateLayout,
    horizon: usize,
    a_k: DMatrix<f64>,
    b_k: DMatrix<f64>,
    gamma: DMatrix<f64>,
    weights: Weights,
    hessian: DMatrix<f64>,
    constraint: DMatrix<f64>,
    rows: Vec<RowTag>,
    /// Row of `X` for every non-input constraint row.
    state_rows: Vec<usize>,
}

struct LinearTerms {
    f: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    constant: f64,
    x_free: DVector<f64>,
}

impl Condensed {
    fn new(model: &DiscreteModel, horizon: usize, weights: Weights) -> Result<Self> {
        let layout = model.layout();
        let n = layout.nodes;
        let nx = layout.dim();
        if layout.is_full() {
            return Err(Error::Dimension("predictive controllers use the reduced model".into()));
        }
        let (a_k, b_k) = (model.a_k().clone(), model.b_k().clone());
        let nu = n * horizon;

        // Markov blocks A^d B.
        let mut blocks = Vec::with_capacity(horizon);
        blocks.push(b_k.clone());
        for d in 1..horizon {
            let next = &a_k * &blocks[d - 1];
            blocks.push(next);
        }
        let mut gamma = DMatrix::zeros(nx * horizon, nu);
        for k in 1..=horizon {
            for j in 1..=k {
                gamma.view_mut(((k - 1) * nx, (j - 1) * n), (nx, n)).copy_from(&blocks[k - j]);
            }
        }

        let mut hessian = DMatrix::zeros(nu, nu);
        for k in 1..=horizon {
            let cols = k * n;
            let g = gamma.view(((k - 1) * nx, 0), (nx, cols));
            let mut block = hessian.view_mut((0, 0), (cols, cols));
            match &weights {
                Weights::Tracking { terminal, .. } if k == horizon => {
                    let pg = terminal * g;
                    block.gemm_tr(2.0, &g, &pg, 1.0);
                }
                Weights::Tracking { .. } => {
                    let gv = g.rows(0, n);
                    block.gemm_tr(2.0, &gv, &gv, 1.0);
                }
                Weights::Economic { loss, .. } => {
                    let gv = g.rows(0, n);
                    let qg = loss * gv;
                    block.gemm_tr(2.0, &gv, &qg, 1.0);
                }
            }
        }
        match &weights {
            Weights::Tracking { eta, .. } => {
                for i in 0..n * (horizon - 1) {
                    hessian[(i, i)] += 2.0 * eta;
                }
            }
            // Σ ε‖u(k) − u(k−1)‖² with u(0) the applied reference; in the
            // deviation variables this is ε(‖z_1‖² + Σ‖z_k − z_{k−1}‖²).
            Weights::Economic { moves, .. } => {
                for k in 0..horizon {
                    for i in 0..n {
                        let r = k * n + i;
                        hessian[(r, r)] += 2.0 * moves * if k + 1 < horizon { 2.0 } else { 1.0 };
                        if k > 0 {
                            hessian[(r, r - n)] -= 2.0 * moves;
                            hessian[(r - n, r)] -= 2.0 * moves;
                        }
                    }
                }
            }
        }
        symmetrize(&mut hessian);

        let mut rows = Vec::new();
        let mut state_rows = Vec::new();
        for k in 1..=horizon {
            for node in 0..n {
                rows.push(RowTag { kind: RowKind::Input, k, node });
            }
        }
        for (kind, offset) in [(RowKind::Voltage, 0), (RowKind::Current, n)] {
            for k in 1..=horizon {
                for node in 0..n {
                    let r = (k - 1) * nx + offset + node;
                    if gamma.row(r).iter().any(|x| *x != 0.0) {
                        rows.push(RowTag { kind, k, node });
                        state_rows.push(r);
                    }
                }
            }
        }
        let mut constraint = DMatrix::zeros(rows.len(), nu);
        for i in 0..nu {
            constraint[(i, i)] = 1.0;
        }
        for (c, &r) in state_rows.iter().enumerate() {
            constraint.row_mut(nu + c).copy_from(&gamma.row(r));
        }
        Ok(Self { layout, horizon, a_k, b_k, gamma, weights, hessian, constraint, rows, state_rows })
    }

    fn rollout(&self, x0: &DVector<f64>, inputs: &DVector<f64>) -> DVector<f64> {
        let n = self.layout.nodes;
        let nx = self.layout.dim();
        let mut out = DVector::zeros(nx * self.horizon);
        let mut x = x0.clone();
        for k in 0..self.horizon {
            let mut next = &self.a_k * &x;
            next.gemv(1.0, &self.b_k, &inputs.rows(k * n, n), 1.0);
            out.rows_mut(k * nx, nx).copy_from(&next);
            x = next;
        }
        out
    }

    /// Weighted deviation `W_k (x(k) − x_ref)` of one stage.
    fn weigh(&self, k: usize, dx: &DVector<f64>) -> DVector<f64> {
        let n = self.layout.nodes;
        let mut w = DVector::zeros(dx.len());
        match &self.weights {
            Weights::Tracking { terminal, .. } if k == self.horizon => w = terminal * dx,
            Weights::Tracking { .. } => w.rows_mut(0, n).copy_from(&dx.rows(0, n)),
            Weights::Economic { loss, .. } => w.rows_mut(0, n).copy_from(&(loss * dx.rows(0, n))),
        }
        w
    }

    fn linear_terms(
        &self,
        x0: &DVector<f64>,
        nominal: &DVector<f64>,
        x_ref: Option<&DVector<f64>>,
        config: &MpcConfig,
    ) -> LinearTerms {
        let n = self.layout.nodes;
        let nx = self.layout.dim();
        let nu = n * self.horizon;
        let x_free = self.rollout(x0, nominal);
        let mut weighted = DVector::zeros(nx * self.horizon);
        let mut constant = 0.0;
        for k in 1..=self.horizon {
            let mut dx = x_free.rows((k - 1) * nx, nx).into_owned();
            if let Some(r) = x_ref {
                dx -= r;
            }
            let w = self.weigh(k, &dx);
            constant += dx.dot(&w);
            weighted.rows_mut((k - 1) * nx, nx).copy_from(&w);
        }
        let mut f = DVector::zeros(nu);
        f.gemv_tr(2.0, &self.gamma, &weighted, 0.0);
        if let (Weights::Tracking { eta, .. }, Some(r)) = (&self.weights, x_ref) {
            for k in 0..self.horizon - 1 {
                for i in 0..n {
                    let du = nominal[k * n + i] - r[i];
                    f[k * n + i] += 2.0 * eta * du;
                    constant += eta * du * du;
                }
            }
        }
        let m = self.rows.len();
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (i, tag) in self.rows.iter().enumerate() {
            let (bounds, offset) = match tag.kind {
                RowKind::Input => (&config.reference, nominal[i]),
                RowKind::Voltage => (&config.voltage, x_free[self.state_rows[i - nu]]),
                RowKind::Current => (&config.filter_current, x_free[self.state_rows[i - nu]]),
            };
            l[i] = bounds.lower[tag.node] - offset;
            u[i] = bounds.upper[tag.node] - offset;
        }
        LinearTerms { f, l, u, constant, x_free }
    }
}

/// A condensed MPC problem together with the data needed to map a solution
/// back to inputs and predicted states.
pub struct CondensedQp {
    pub problem: QpProblem,
    /// Cost terms that do not depend on the decision variables.
    pub constant: f64,
    /// `U_nom`; the decision variables are `z = U − U_nom`.
    pub nominal: DVector<f64>,
    pub x_free: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub rows: Vec<RowTag>,
}

impl CondensedQp {
    pub fn inputs(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.nominal + z
    }

    pub fn predict(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = self.x_free.clone();
        x.gemv(1.0, &self.gamma, z, 1.0);
        x
    }

    /// True cost of a decision vector, constant terms included.
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        self.problem.objective(z) + self.constant
    }
}

fn check_state(model: &DiscreteModel, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != model.layout().dim() {
        return Err(Error::Dimension(format!(
            "state has {} entries, model expects {}",
            x0.len(),
            model.layout().dim()
        )));
    }
    Ok(())
}

fn stacked(v: &DVector<f64>, horizon: usize) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(n * horizon, |i, _| v[i % n])
}

/// `x*` with `x* = A_k x* + B_k v*`.
pub fn tracking_equilibrium(model: &DiscreteModel, v_star: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = model.layout().dim();
    let lhs = DMatrix::identity(dim, dim) - model.a_k();
    lhs.lu()
        .solve(&(model.b_k() * v_star))
        .ok_or_else(|| Error::InvalidParameter("discrete model has an eigenvalue at 1".into()))
}

fn assemble(condensed: Condensed, terms: LinearTerms, nominal: DVector<f64>) -> Result<CondensedQp> {
    let problem = QpProblem::new(condensed.hessian, terms.f, condensed.constraint, terms.l, terms.u)?;
    Ok(CondensedQp {
        problem,
        constant: terms.constant,
        nominal,
        x_free: terms.x_free,
        gamma: condensed.gamma,
        rows: condensed.rows,
    })
}

pub fn build_tracking_qp(
    model: &DiscreteModel,
    terminal: &DMatrix<f64>,
    v_star: &DVector<f64>,
    x0: &DVector<f64>,
    config: &MpcConfig,
) -> Result<CondensedQp> {
    config.validate(model.layout().nodes)?;
    check_state(model, x0)?;
    if terminal.nrows() != model.layout().dim() || terminal.ncols() != model.layout().dim() {
        return Err(Error::Dimension("terminal weight does not match the state dimension".into()));
    }
    let condensed =
        Condensed::new(model, config.horizon, Weights::Tracking { eta: config.eta, terminal: terminal.clone() })?;
    let x_star = tracking_equilibrium(model, v_star)?;
    let nominal = stacked(v_star, config.horizon);
    let terms = condensed.linear_terms(x0, &nominal, Some(&x_star), config);
    assemble(condensed, terms, nominal)
}

pub fn build_economic_qp(
    model: &DiscreteModel,
    loss: &DMatrix<f64>,
    x0: &DVector<f64>,
    previous_input: &DVector<f64>,
    config: &MpcConfig,
) -> Result<CondensedQp> {
    config.validate(model.layout().nodes)?;
    check_state(model, x0)?;
    let condensed =
        Condensed::new(model, config.horizon, Weights::Economic { loss: loss.clone(), moves: config.move_weight })?;
    let nominal = stacked(previous_input, config.horizon);
    let terms = condensed.linear_terms(x0, &nominal, None, config);
    assemble(condensed, terms, nominal)
}

/// Everything a controller sees at one sampling instant.
pub struct StepInputs<'a> {
    pub model: &'a DiscreteModel,
    /// Changes whenever the model does; cached QP data is keyed on it.
    pub revision: u64,
    /// Measured `(v, i_f, e)`.
    pub x0: &'a DVector<f64>,
    /// Setpoint for the tracking controller.
    pub v_star: Option<&'a DVector<f64>>,
    /// Loss matrix of the current topology, for the economic controller.
    pub loss: &'a DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
    /// Number of leading prediction steps whose state boxes were dropped to
    /// regain feasibility; zero when all constraints were enforced.
    pub relaxed_steps: usize,
}

#[derive(Clone, Debug)]
pub struct MpcStepResult {
    pub u_applied: DVector<f64>,
    /// Optimal stacked references `(u(1), …, u(N))`.
    pub inputs: DVector<f64>,
    /// Predicted stacked states `(x(1), …, x(N))`.
    pub predicted: DVector<f64>,
    /// Optimal cost including constant terms.
    pub objective: f64,
    pub qp: QpDiagnostics,
    pub rebuilt: bool,
    pub fallback: bool,
}

struct Cache {
    revision: u64,
    condensed: Condensed,
    solver: QpSolver,
    x_star: Option<(DVector<f64>, DVector<f64>)>,
}

struct Previous {
    inputs: DVector<f64>,
    duals: DVector<f64>,
    rows: Vec<RowTag>,
}

/// Receding-horizon controller that keeps its QP factorization and warm
/// start between calls.
pub struct MpcController {
    kind: ControllerKind,
    config: MpcConfig,
    cache: Option<Cache>,
    previous: Option<Previous>,
    last_applied: Option<DVector<f64>>,
}

impl MpcController {
    pub fn new(kind: ControllerKind, config: MpcConfig) -> Self {
        Self { kind, config, cache: None, previous: None, last_applied: None }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    /// Sets the reference applied before the first step; the economic
    /// controller linearizes its decision variables around it.
    pub fn set_previous_input(&mut self, u: DVector<f64>) {
        self.last_applied = Some(u);
    }

    fn build(&self, inputs: &StepInputs<'_>) -> Result<Cache> {
        let weights = match self.kind {
            ControllerKind::Tracking => {
                let terminal = lyapunov_matrix(inputs.model)?;
                let residual = lyapunov_residual(inputs.model, &terminal);
                if residual > 1e-8 {
                    log::warn!("terminal weight residual {residual:e}");
                }
                Weights::Tracking { eta: self.config.eta, terminal }
            }
            ControllerKind::Economic => Weights::Economic { loss: inputs.loss.clone(), moves: self.config.move_weight },
        };
        let condensed = Condensed::new(inputs.model, self.config.horizon, weights)?;
        let m = condensed.rows.len();
        let nu = condensed.hessian.nrows();
        let problem = QpProblem::new(
            condensed.hessian.clone(),
            DVector::zeros(nu),
            condensed.constraint.clone(),
            DVector::from_element(m, -1.0),
            DVector::from_element(m, 1.0),
        )?;
        let solver = QpSolver::new(problem, self.config.qp.clone())?;
        Ok(Cache { revision: inputs.revision, condensed, solver, x_star: None })
    }

    pub fn control_step(&mut self, inputs: &StepInputs<'_>) -> Result<MpcStepResult> {
        let n = inputs.model.layout().nodes;
        self.config.validate(n)?;
        check_state(inputs.model, inputs.x0)?;
        let rebuilt = self.cache.as_ref().is_none_or(|c| c.revision != inputs.revision);
        if rebuilt {
            self.cache = Some(self.build(inputs)?);
        }
        let horizon = self.config.horizon;
        let cache = self.cache.as_mut().expect("cache was just built");

        let (nominal, x_ref) = match self.kind {
            ControllerKind::Tracking => {
                let v_star =
                    inputs.v_star.ok_or_else(|| Error::Config("the tracking controller needs a setpoint".into()))?;
                let stale = cache.x_star.as_ref().is_none_or(|(v, _)| v != v_star);
                if stale {
                    let x_star = tracking_equilibrium(inputs.model, v_star)?;
                    cache.x_star = Some((v_star.clone(), x_star));
                }
                (stacked(v_star, horizon), cache.x_star.as_ref().map(|(_, x)| x.clone()))
            }
            ControllerKind::Economic => {
                let base = self.last_applied.clone().unwrap_or_else(|| inputs.x0.rows(0, n).into_owned());
                (stacked(&base, horizon), None)
            }
        };
        let terms = cache.condensed.linear_terms(inputs.x0, &nominal, x_ref.as_ref(), &self.config);
        cache.solver.update_linear_and_bounds(terms.f.clone(), terms.l.clone(), terms.u.clone())?;

        if self.config.qp.warm_start {
            if let Some(prev) = &self.previous {
                let (z, y) = shifted_warm_start(prev, &cache.condensed.rows, &nominal, n);
                cache.solver.warm_start(&z, &y)?;
            }
        }
        let mut sol = cache.solver.solve();
        let mut iterations = sol.iterations;
        let mut relaxed_steps = 0;
        if sol.status == QpStatus::PrimalInfeasible && self.config.relax_state_constraints {
            // The first predicted states react only weakly to the inputs, so a
            // disturbance can push them out of their boxes whatever the
            // inputs. Drop the state boxes over a growing initial window.
            let mut window = 4;
            while sol.status == QpStatus::PrimalInfeasible && relaxed_steps < horizon {
                relaxed_steps = window.min(horizon);
                let (mut l, mut u) = (terms.l.clone(), terms.u.clone());
                for (i, tag) in cache.condensed.rows.iter().enumerate() {
                    if tag.kind != RowKind::Input && tag.k <= relaxed_steps {
                        l[i] = -RELAXED_BOUND;
                        u[i] = RELAXED_BOUND;
                    }
                }
                cache.solver.update_linear_and_bounds(terms.f.clone(), l, u)?;
                sol = cache.solver.solve();
                iterations += sol.iterations;
                window *= 2;
            }
            log::debug!("state boxes relaxed over {relaxed_steps} steps, status {:?}", sol.status);
        }
        let qp = QpDiagnostics {
            status: sol.status,
            iterations,
            prim_res: sol.prim_res,
            dual_res: sol.dual_res,
            polished: sol.polished,
            relaxed_steps,
        };
        if !sol.is_solved() {
            return match (self.config.fallback, &self.last_applied) {
                (FallbackPolicy::HoldPrevious, Some(prev)) => {
                    log::warn!("QP not solved ({:?}); holding the previous reference", sol.status);
                    let held = prev.clone();
                    let inputs_stack = stacked(&held, horizon);
                    let z = &inputs_stack - &nominal;
                    let mut predicted = terms.x_free.clone();
                    predicted.gemv(1.0, &cache.condensed.gamma, &z, 1.0);
                    self.previous = None;
                    Ok(MpcStepResult {
                        u_applied: held,
                        inputs: inputs_stack,
                        predicted,
                        objective: f64::NAN,
                        qp,
                        rebuilt,
                        fallback: true,
                    })
                }
                _ => Err(Error::QpFailed { status: sol.status, prim_res: sol.prim_res, dual_res: sol.dual_res }),
            };
        }
        let stacked_inputs = &nominal + &sol.z;
        let mut predicted = terms.x_free.clone();
        predicted.gemv(1.0, &cache.condensed.gamma, &sol.z, 1.0);
        let u_applied = stacked_inputs.rows(0, n).into_owned();
        self.previous =
            Some(Previous { inputs: stacked_inputs.clone(), duals: sol.y.clone(), rows: cache.condensed.rows.clone() });
        self.last_applied = Some(u_applied.clone());
        Ok(MpcStepResult {
            u_applied,
            inputs: stacked_inputs,
            predicted,
            objective: sol.objective + terms.constant,
            qp,
            rebuilt,
            fallback: false,
        })
    }
}

/// Shifts the previous optimal inputs and multipliers one step forward,
/// repeating the last block.
fn shifted_warm_start(
    prev: &Previous,
    rows: &[RowTag],
    nominal: &DVector<f64>,
    n: usize,
) -> (DVector<f64>, DVector<f64>) {
    let nu = nominal.len();
    let horizon = nu / n;
    let mut z = DVector::zeros(nu);
    for i in 0..nu {
        let source = (i + n).min(nu - n + i % n);
        z[i] = prev.inputs[source] - nominal[i];
    }
    let index: HashMap<RowTag, usize> = prev.rows.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let y = DVector::from_fn(rows.len(), |i, _| {
        let t = rows[i];
        let source =
            index.get(&RowTag { k: t.k + 1, ..t }).or_else(|| (t.k == horizon).then(|| index.get(&t)).flatten());
        source.map_or(0.0, |&j| prev.duals[j])
    });
    (z, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::discretize;

    /// One bus without lines, loss-free.
    fn single_bus_model(h: f64) -> (DiscreteModel, Microgrid) {
        let text = r#"
format = 1
name = "one"
base_voltage = 400.0
[[bus]]
filter_resistance = 0.1
filter_inductance = 0.01
filter_capacitance = 0.2
load = 0.04
gains = { k1 = -3.0, k2 = -0.5, k3 = 72.0 }
voltage = [380.0, 420.0]
power = [-1e5, 0.0]
filter_current = [-50.0, 50.0]
reference = [300.0, 500.0]
"#;
        let g = Microgrid::from_toml_str(text, "one").unwrap();
        let m = g.reduced_model(&g.topology, &g.nominal_loads).unwrap();
        (discretize(&m, h).unwrap(), g)
    }

    fn config(g: &Microgrid, horizon: usize) -> MpcConfig {
        MpcConfig { horizon, ..MpcConfig::from_grid(g) }
    }

    #[test]
    fn tracking_at_equilibrium_is_idle() {
        let (d, g) = single_bus_model(0.01);
        let v_star = DVector::from_element(1, 400.0);
        let x0 = tracking_equilibrium(&d, &v_star).unwrap();
        let p = lyapunov_matrix(&d).unwrap();
        let qp = build_tracking_qp(&d, &p, &v_star, &x0, &config(&g, 10)).unwrap();
        assert!(qp.constant.abs() < 1e-12);
        assert!(qp.problem.f.amax() < 1e-9);
        let mut c = MpcController::new(ControllerKind::Tracking, config(&g, 10));
        let loss = DMatrix::zeros(1, 1);
        let r = c
            .control_step(&StepInputs { model: &d, revision: 0, x0: &x0, v_star: Some(&v_star), loss: &loss })
            .unwrap();
        assert!((r.u_applied[0] - 400.0).abs() < 1e-6);
        assert!(r.objective.abs() < 1e-6);
    }

    #[test]
    fn structurally_free_rows_are_dropped() {
        let (d, g) = single_bus_model(0.01);
        let x0 = DVector::from_vec(vec![400.0, 16.0, 0.0]);
        let qp = build_economic_qp(&d, &DMatrix::zeros(1, 1), &x0, &DVector::from_element(1, 400.0), &config(&g, 5))
            .unwrap();
        let voltage_steps: Vec<usize> = qp.rows.iter().filter(|t| t.kind == RowKind::Voltage).map(|t| t.k).collect();
        let current_steps: Vec<usize> = qp.rows.iter().filter(|t| t.kind == RowKind::Current).map(|t| t.k).collect();
        assert_eq!(voltage_steps, vec![3, 4, 5]);
        assert_eq!(current_steps, vec![2, 3, 4, 5]);
    }

    /// Direct evaluation of the tracking cost by simulating the model.
    fn rollout_cost(
        d: &DiscreteModel,
        p: &DMatrix<f64>,
        v_star: &DVector<f64>,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        eta: f64,
        horizon: usize,
    ) -> f64 {
        let n = v_star.len();
        let x_star = tracking_equilibrium(d, v_star).unwrap();
        let mut x = x0.clone();
        let mut cost = 0.0;
        for k in 1..=horizon {
            let uk = u.rows((k - 1) * n, n).into_owned();
            x = crate::dynamics::step(d, &x, &uk).unwrap();
            if k < horizon {
                cost += (x.rows(0, n) - v_star).norm_squared() + eta * (&uk - v_star).norm_squared();
            } else {
                let dx = &x - &x_star;
                cost += dx.dot(&(p * &dx));
            }
        }
        cost
    }

    #[test]
    fn condensed_cost_matches_rollout() {
        let (d, g) = single_bus_model(0.01);
        let cfg = config(&g, 6);
        let v_star = DVector::from_element(1, 402.0);
        let x0 = DVector::from_vec(vec![395.0, 15.0, 0.4]);
        let p = lyapunov_matrix(&d).unwrap();
        let qp = build_tracking_qp(&d, &p, &v_star, &x0, &cfg).unwrap();
        for s in 0..5 {
            let z = DVector::from_fn(6, |i, _| ((i * 7 + s * 3) % 11) as f64 - 5.0);
            let direct = rollout_cost(&d, &p, &v_star, &x0, &qp.inputs(&z), cfg.eta, 6);
            assert!((qp.cost(&z) - direct).abs() < 1e-8 * direct.max(1.0), "{} vs {direct}", qp.cost(&z));
        }
    }

    #[test]
    fn input_weight_limits_first_move() {
        let (d, g) = single_bus_model(0.01);
        let v_star = DVector::from_element(1, 400.0);
        let x0 = tracking_equilibrium(&d, &DVector::from_element(1, 390.0)).unwrap();
        let loss = DMatrix::zeros(1, 1);
        let first_move = |eta: f64| {
            let mut cfg = config(&g, 10);
            cfg.eta = eta;
            let mut c = MpcController::new(ControllerKind::Tracking, cfg);
            let r = c
                .control_step(&StepInputs { model: &d, revision: 0, x0: &x0, v_star: Some(&v_star), loss: &loss })
                .unwrap();
            (r.u_applied[0] - 400.0).abs()
        };
        let (light, heavy) = (first_move(1e-3), first_move(1e6));
        assert!(heavy < light, "{heavy} !< {light}");
        assert!(heavy < 0.5, "{heavy}");
    }

    #[test]
    fn loss_free_economic_objective_is_zero() {
        // Nothing to gain, so the reference stays put.
        let (d, g) = single_bus_model(0.01);
        let x0 = tracking_equilibrium(&d, &DVector::from_element(1, 400.0)).unwrap();
        let mut c = MpcController::new(ControllerKind::Economic, config(&g, 10));
        let loss = DMatrix::zeros(1, 1);
        let r = c.control_step(&StepInputs { model: &d, revision: 0, x0: &x0, v_star: None, loss: &loss }).unwrap();
        assert_eq!(r.objective, 0.0);
        assert!(g.limits.reference.contains(&r.u_applied, 1e-6));
    }

    #[test]
    fn rollout_reproduces_prediction() {
        let (d, g) = single_bus_model(0.01);
        let v_star = DVector::from_element(1, 405.0);
        let x0 = DVector::from_vec(vec![395.0, 15.0, 0.4]);
        let p = lyapunov_matrix(&d).unwrap();
        let qp = build_tracking_qp(&d, &p, &v_star, &x0, &config(&g, 20)).unwrap();
        let sol = crate::qp::solve_qp(&qp.problem, &QpSettings::default()).unwrap();
        let u = qp.inputs(&sol.z);
        let x = qp.predict(&sol.z);
        let mut state = x0.clone();
        for k in 0..20 {
            state = crate::dynamics::step(&d, &state, &u.rows(k, 1).into_owned()).unwrap();
            assert!((&state - x.rows(3 * k, 3)).amax() < 1e-10);
        }
    }

    #[test]
    fn infeasible_boxes_are_reported() {
        let (d, g) = single_bus_model(0.01);
        let mut cfg = config(&g, 10);
        cfg.relax_state_constraints = false;
        // References cannot leave [300, 301] but voltages must stay above 380.
        cfg.reference = Bounds::uniform(1, 300.0, 301.0);
        let x0 = DVector::from_vec(vec![300.0, 12.0, 0.0]);
        let mut c = MpcController::new(ControllerKind::Economic, cfg);
        let loss = DMatrix::zeros(1, 1);
        let err =
            c.control_step(&StepInputs { model: &d, revision: 0, x0: &x0, v_star: None, loss: &loss }).unwrap_err();
        assert_eq!(err.code(), "E_QP_INFEASIBLE");
    }
}
