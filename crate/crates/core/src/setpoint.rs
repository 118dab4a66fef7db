//! Loss-optimal steady-state voltages.
//!
//! ```text
//! minimize    vᵀ Q_loss v
//! subject to  p + (Y_ad v) ∘ v = 0,   v ∈ V,   p ∈ P
//! ```
//!
//! `p` is eliminated through the power balance, leaving a box-constrained
//! problem with the nonconvex constraint `p(v) = −(Y_ad v) ∘ v ∈ P`. With this
//! sign convention a bus whose converter feeds power into the grid has
//! `p < 0`.

use nalgebra::{DMatrix, DVector};

use crate::grid::{admittance_matrix, loss_matrix, GridTopology, LineParams};
use crate::par::Execution;
use crate::{Error, Result};

/// Per-node lower and upper bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        Self { lower: DVector::from_element(n, lower), upper: DVector::from_element(n, upper) }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// Largest amount by which `x` leaves the box.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (0..x.len()).fold(0.0, |m, i| m.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]))
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    fn validate(&self, n: usize, what: &str) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension(format!("{what} limits have {} entries for {n} nodes", self.lower.len())));
        }
        for i in 0..n {
            if self.lower[i].is_nan() || self.upper[i].is_nan() || self.lower[i] > self.upper[i] {
                return Err(Error::Config(format!(
                    "{what} limits of node {} are empty: [{}, {}]",
                    i + 1,
                    self.lower[i],
                    self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatingLimits {
    /// Volts.
    pub voltage: Bounds,
    /// Watts, in the `p = −(Y_ad v) ∘ v` convention.
    pub power: Bounds,
    /// Amps on the filter current; enforced by the predictive controllers.
    pub filter_current: Bounds,
    /// Volts on the voltage reference; enforced by the predictive controllers.
    pub reference: Bounds,
}

impl OperatingLimits {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.voltage.validate(n, "voltage")?;
        self.power.validate(n, "power")?;
        self.filter_current.validate(n, "filter current")?;
        self.reference.validate(n, "reference")?;
        if let Some(i) = (0..n).find(|&i| !(self.voltage.lower[i] > 0.0) || !self.voltage.upper[i].is_finite()) {
            return Err(Error::Config(format!("voltage limits of node {} must be positive and finite", i + 1)));
        }
        Ok(())
    }
}

/// `p + (Y_ad v) ∘ v`.
pub fn power_balance_residual(v: &DVector<f64>, p: &DVector<f64>, admittance: &DMatrix<f64>) -> DVector<f64> {
    p + (admittance * v).component_mul(v)
}

/// Power at every node implied by the voltages, `−(Y_ad v) ∘ v`.
pub fn implied_power(v: &DVector<f64>, admittance: &DMatrix<f64>) -> DVector<f64> {
    -(admittance * v).component_mul(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetpointSettings {
    pub starts: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Stationarity tolerance on the projected gradient, volts.
    pub tolerance: f64,
    /// Allowed power-box violation relative to the power scale.
    pub feasibility_tolerance: f64,
    pub execution: Execution,
}

impl Default for SetpointSettings {
    fn default() -> Self {
        Self {
            starts: 5,
            outer_iterations: 40,
            inner_iterations: 5000,
            tolerance: 1e-9,
            feasibility_tolerance: 1e-9,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetpointSolution {
    pub v: DVector<f64>,
    pub p: DVector<f64>,
    /// Line losses, watts.
    pub objective: f64,
    pub iterations: usize,
    /// Start that produced the result; `None` for the zero-loss shortcut and
    /// the brute-force search.
    pub start_index: Option<usize>,
    /// Projected-gradient norm of the Lagrangian at the returned point.
    pub kkt_residual: f64,
    /// Largest violation of the voltage and power boxes.
    pub max_violation: f64,
}

/// Independent re-check of a solution against its problem data.
#[derive(Clone, Debug, PartialEq)]
pub struct SetpointCheck {
    pub balance_residual: f64,
    pub voltage_violation: f64,
    pub power_violation: f64,
    pub objective: f64,
}

pub fn check_setpoint(
    topology: &GridTopology,
    lines: &[LineParams],
    loads: &DVector<f64>,
    limits: &OperatingLimits,
    solution: &SetpointSolution,
) -> Result<SetpointCheck> {
    let y_ad = admittance_matrix(topology, lines, loads)?;
    let q = loss_matrix(topology, lines)?;
    let residual = power_balance_residual(&solution.v, &solution.p, &y_ad);
    Ok(SetpointCheck {
        balance_residual: residual.amax(),
        voltage_violation: limits.voltage.violation(&solution.v),
        power_violation: limits.power.violation(&solution.p),
        objective: solution.v.dot(&(&q * &solution.v)),
    })
}

struct Problem {
    q: DMatrix<f64>,
    y: DMatrix<f64>,
    v_box: Bounds,
    p_box: Bounds,
    /// Normalization for the objective and the power constraints.
    scale: f64,
    feas_tol: f64,
}

impl Problem {
    fn new(
        topology: &GridTopology,
        lines: &[LineParams],
        loads: &DVector<f64>,
        limits: &OperatingLimits,
        feas_tol: f64,
    ) -> Result<Self> {
        let n = topology.node_count();
        limits.validate(n)?;
        let y = admittance_matrix(topology, lines, loads)?;
        let q = loss_matrix(topology, lines)?;
        let finite_max = limits
            .power
            .lower
            .iter()
            .chain(limits.power.upper.iter())
            .filter(|x| x.is_finite())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let v_max = limits.voltage.upper.amax();
        let natural = y.amax() * v_max * v_max;
        let scale = finite_max.max(natural).max(1.0);
        Ok(Self { q, y, v_box: limits.voltage.clone(), p_box: limits.power.clone(), scale, feas_tol: feas_tol * scale })
    }

    fn n(&self) -> usize {
        self.q.nrows()
    }

    fn objective(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.q * v))
    }

    fn power(&self, v: &DVector<f64>) -> DVector<f64> {
        implied_power(v, &self.y)
    }

    fn violation(&self, v: &DVector<f64>) -> f64 {
        self.p_box.violation(&self.power(v)).max(self.v_box.violation(v))
    }

    fn feasible(&self, v: &DVector<f64>) -> bool {
        self.p_box.violation(&self.power(v)) <= self.feas_tol && self.v_box.violation(v) <= 1e-12
    }

    fn solution(
        &self,
        v: DVector<f64>,
        iterations: usize,
        start_index: Option<usize>,
        kkt_residual: f64,
    ) -> SetpointSolution {
        let p = self.power(&v);
        SetpointSolution {
            objective: self.objective(&v),
            max_violation: self.violation(&v),
            p,
            v,
            iterations,
            start_index,
            kkt_residual,
        }
    }

    /// Normalized power constraints `c ≤ 0`: the first `n` entries are upper
    /// bounds, the last `n` lower bounds.
    fn constraints(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let p = self.power(v);
        DVector::from_fn(2 * n, |k, _| {
            if k < n {
                (p[k] - self.p_box.upper[k]) / self.scale
            } else {
                (self.p_box.lower[k - n] - p[k - n]) / self.scale
            }
        })
    }

    /// Jacobian of `p(v) = −(Y v) ∘ v`.
    fn power_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let yv = &self.y * v;
        let n = self.n();
        DMatrix::from_fn(n, n, |i, k| {
            let mut d = -self.y[(i, k)] * v[i];
            if i == k {
                d -= yv[i];
            }
            d
        })
    }

    /// Augmented Lagrangian (PHR form) value and gradient.
    fn lagrangian(&self, v: &DVector<f64>, lambda: &DVector<f64>, mu: f64) -> (f64, DVector<f64>) {
        let n = self.n();
        let qv = &self.q * v;
        let mut value = v.dot(&qv) / self.scale;
        let mut grad = qv * (2.0 / self.scale);
        let c = self.constraints(v);
        let mut weight = DVector::zeros(n);
        for k in 0..2 * n {
            if !c[k].is_finite() {
                continue;
            }
            let shifted = (lambda[k] + mu * c[k]).max(0.0);
            value += (shifted * shifted - lambda[k] * lambda[k]) / (2.0 * mu);
            // dc/dp is +1/scale for upper rows and −1/scale for lower rows.
            if k < n {
                weight[k] += shifted / self.scale;
            } else {
                weight[k - n] -= shifted / self.scale;
            }
        }
        if weight.iter().any(|w| *w != 0.0) {
            grad += self.power_jacobian(v).tr_mul(&weight);
        }
        (value, grad)
    }

    fn pg_norm(&self, v: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        (self.v_box.project(&(v - grad)) - v).amax()
    }

    /// Projected gradient with Barzilai–Borwein steps and Armijo
    /// backtracking on the augmented Lagrangian.
    fn minimize_inner(
        &self,
        mut v: DVector<f64>,
        lambda: &DVector<f64>,
        mu: f64,
        settings: &SetpointSettings,
    ) -> (DVector<f64>, usize) {
        let (mut value, mut grad) = self.lagrangian(&v, lambda, mu);
        let mut step = 1.0;
        for iter in 0..settings.inner_iterations {
            if self.pg_norm(&v, &grad) <= settings.tolerance * (1.0 + v.amax()) {
                return (v, iter);
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = self.v_box.project(&(&v - &grad * t));
                let d = &trial - &v;
                let (trial_value, trial_grad) = self.lagrangian(&trial, lambda, mu);
                if trial_value <= value + 1e-4 * grad.dot(&d) {
                    accepted = Some((trial, trial_value, trial_grad));
                    break;
                }
                t *= 0.5;
            }
            let Some((next, next_value, next_grad)) = accepted else {
                return (v, iter);
            };
            let s = &next - &v;
            let yk = &next_grad - &grad;
            let sy = s.dot(&yk);
            step = if sy > 0.0 { (s.dot(&s) / sy).clamp(1e-12, 1e12) } else { (t * 2.0).min(1e12) };
            let stalled = s.amax() <= 1e-15 * (1.0 + v.amax());
            v = next;
            value = next_value;
            grad = next_grad;
            if stalled {
                return (v, iter + 1);
            }
        }
        (v, settings.inner_iterations)
    }

    /// Pulls violated or active power constraints onto their bounds with
    /// Gauss–Newton steps on the coordinates that are not at a voltage
    /// bound.
    fn restore(&self, mut v: DVector<f64>) -> DVector<f64> {
        let n = self.n();
        for _ in 0..30 {
            let c = self.constraints(&v);
            let active: Vec<usize> = (0..2 * n).filter(|&k| c[k].is_finite() && c[k] > -1e-10).collect();
            let worst = active.iter().fold(0.0f64, |m, &k| m.max(c[k]));
            if worst * self.scale <= 0.1 * self.feas_tol {
                break;
            }
            let free: Vec<usize> =
                (0..n).filter(|&i| v[i] > self.v_box.lower[i] + 1e-12 && v[i] < self.v_box.upper[i] - 1e-12).collect();
            if free.is_empty() || active.len() > free.len() {
                break;
            }
            let jp = self.power_jacobian(&v);
            let mut jac = DMatrix::zeros(active.len(), free.len());
            let mut r = DVector::zeros(active.len());
            for (a, &k) in active.iter().enumerate() {
                let (node, sign) = if k < n { (k, 1.0) } else { (k - n, -1.0) };
                for (b, &i) in free.iter().enumerate() {
                    jac[(a, b)] = sign * jp[(node, i)] / self.scale;
                }
                r[a] = c[k];
            }
            let gram = &jac * jac.transpose();
            let Some(w) = gram.lu().solve(&r) else { break };
            let delta = jac.tr_mul(&w);
            for (b, &i) in free.iter().enumerate() {
                v[i] -= delta[b];
            }
            v = self.v_box.project(&v);
        }
        v
    }

    fn solve_from(&self, start: DVector<f64>, index: usize, settings: &SetpointSettings) -> SetpointSolution {
        let n = self.n();
        let mut v = self.v_box.project(&start);
        let mut lambda = DVector::zeros(2 * n);
        let mut mu = 10.0;
        let mut iterations = 0;
        let mut last_violation = f64::INFINITY;
        for _ in 0..settings.outer_iterations {
            let (next, inner) = self.minimize_inner(v, &lambda, mu, settings);
            v = next;
            iterations += inner;
            let c = self.constraints(&v);
            let violation = c.iter().filter(|x| x.is_finite()).fold(0.0f64, |m, x| m.max(*x));
            for k in 0..2 * n {
                if c[k].is_finite() {
                    lambda[k] = (lambda[k] + mu * c[k]).max(0.0);
                }
            }
            if violation * self.scale <= 0.1 * self.feas_tol && inner <= 1 {
                break;
            }
            if violation > 0.25 * last_violation {
                mu = (mu * 10.0).min(1e12);
            }
            last_violation = violation;
        }
        let v = self.restore(v);
        let (_, grad) = self.lagrangian(&v, &lambda, mu);
        let kkt = self.pg_norm(&v, &grad);
        self.solution(v, iterations, Some(index), kkt)
    }
}

fn starts(v_box: &Bounds, count: usize) -> Vec<DVector<f64>> {
    let n = v_box.len();
    let alternating = |first_low: bool| {
        DVector::from_fn(n, |i, _| if (i % 2 == 0) == first_low { v_box.lower[i] } else { v_box.upper[i] })
    };
    let mut all =
        vec![v_box.midpoint(), v_box.lower.clone(), v_box.upper.clone(), alternating(true), alternating(false)];
    // Further starts interpolate between the center and the corners.
    let mut k = 0;
    while all.len() < count {
        let corner = &all[1 + k % 4];
        let frac = 0.5 / (1 + k / 4) as f64;
        all.push(v_box.midpoint() * (1.0 - frac) + corner * frac);
        k += 1;
    }
    all.truncate(count.max(1));
    all
}

/// Constant voltage at the midpoint of the intersection of all voltage
/// boxes, if that intersection is nonempty.
fn uniform_candidate(v_box: &Bounds) -> Option<DVector<f64>> {
    let lo = v_box.lower.max();
    let hi = v_box.upper.min();
    (lo <= hi).then(|| DVector::from_element(v_box.len(), 0.5 * (lo + hi)))
}

/// Solves the steady-state problem by multistart augmented-Lagrangian
/// projected gradient.
///
/// A constant voltage profile has zero loss and is therefore optimal whenever
/// it is feasible; among those, the midpoint of the common voltage range is
/// returned.
pub fn solve_opt_ss(
    topology: &GridTopology,
    lines: &[LineParams],
    loads: &DVector<f64>,
    limits: &OperatingLimits,
    settings: &SetpointSettings,
) -> Result<SetpointSolution> {
    let problem = Problem::new(topology, lines, loads, limits, settings.feasibility_tolerance)?;
    if let Some(v) = uniform_candidate(&problem.v_box) {
        if problem.feasible(&v) {
            return Ok(problem.solution(v, 0, None, 0.0));
        }
    }
    let candidates: Vec<(usize, DVector<f64>)> =
        starts(&problem.v_box, settings.starts).into_iter().enumerate().collect();
    let results = settings.execution.map(candidates, |(i, start)| problem.solve_from(start, i, settings));
    let mut best: Option<SetpointSolution> = None;
    for r in &results {
        if !problem.feasible(&r.v) {
            continue;
        }
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r.clone());
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            let least = results.iter().map(|r| r.max_violation).fold(f64::INFINITY, f64::min);
            Err(Error::NoFeasibleSetpoint(least))
        }
    }
}

/// Minimizes a convex quadratic `a t² + b t` over a union of intervals;
/// exact ties go to the point nearest `mid`.
fn minimize_on_intervals(a: f64, b: f64, intervals: &[(f64, f64)], mid: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(lo, hi) in intervals {
        let t = if a > 0.0 {
            (-b / (2.0 * a)).clamp(lo, hi)
        } else if b > 0.0 {
            lo
        } else if b < 0.0 {
            hi
        } else {
            mid.clamp(lo, hi)
        };
        let val = a * t * t + b * t;
        let better = match best {
            None => true,
            Some((bt, bv)) => val < bv || (val == bv && (t - mid).abs() < (bt - mid).abs()),
        };
        if better {
            best = Some((t, val));
        }
    }
    best.map(|(t, _)| t)
}

/// Intersects the feasible set of `lo ≤ c t + d ≤ hi` with the intervals.
fn intersect_linear(intervals: Vec<(f64, f64)>, c: f64, d: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let (mut tl, mut th) = (f64::NEG_INFINITY, f64::INFINITY);
    if c == 0.0 {
        if d < lo || d > hi {
            return Vec::new();
        }
    } else {
        let (a, b) = ((lo - d) / c, (hi - d) / c);
        if c > 0.0 {
            tl = a;
            th = b;
        } else {
            tl = b;
            th = a;
        }
    }
    intervals
        .into_iter()
        .filter_map(|(l, h)| {
            let (l, h) = (l.max(tl), h.min(th));
            (l <= h).then_some((l, h))
        })
        .collect()
}

/// Sub-level set `{t : q(t) ≤ 0}` of a quadratic `q = a t² + b t + c`.
fn quadratic_nonpositive(a: f64, b: f64, c: f64) -> Vec<(f64, f64)> {
    const INF: f64 = f64::INFINITY;
    if a == 0.0 {
        return if b > 0.0 {
            vec![(-INF, -c / b)]
        } else if b < 0.0 {
            vec![(-c / b, INF)]
        } else if c <= 0.0 {
            vec![(-INF, INF)]
        } else {
            Vec::new()
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a < 0.0 { vec![(-INF, INF)] } else { Vec::new() };
    }
    let sq = disc.sqrt();
    // Numerically stable roots.
    let qq = -0.5 * (b + b.signum() * sq);
    let (mut r1, mut r2) = if qq != 0.0 { (qq / a, c / qq) } else { (0.0, 0.0) };
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if a > 0.0 {
        vec![(r1, r2)]
    } else {
        vec![(-INF, r1), (r2, INF)]
    }
}

fn intersect_sets(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(al, ah) in a {
        for &(bl, bh) in b {
            let (l, h) = (al.max(bl), ah.min(bh));
            if l <= h {
                out.push((l, h));
            }
        }
    }
    out
}

/// Exhaustive search for small grids. The first `n − 1` voltages run over a
/// uniform grid with spacing `resolution` times the box width; the last
/// voltage is optimized exactly over its feasible set, which is a union of
/// intervals because the power constraints are linear in it for the other
/// nodes and quadratic for its own node.
pub fn brute_force_opt_ss(
    topology: &GridTopology,
    lines: &[LineParams],
    loads: &DVector<f64>,
    limits: &OperatingLimits,
    resolution: f64,
    execution: Execution,
) -> Result<SetpointSolution> {
    let n = topology.node_count();
    if n > 4 {
        return Err(Error::TooLarge(n));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::InvalidParameter(format!("resolution must be in (0, 1], got {resolution}")));
    }
    let problem = Problem::new(topology, lines, loads, limits, 1e-9)?;
    let steps = (1.0 / resolution).round().max(1.0) as usize;
    let last = n - 1;
    let grid_value = |i: usize, k: usize| {
        let (lo, hi) = (problem.v_box.lower[i], problem.v_box.upper[i]);
        lo + (hi - lo) * k as f64 / steps as f64
    };
    let mid = problem.v_box.midpoint();
    let points_per_row = (steps + 1).pow(n.saturating_sub(2) as u32);
    let rows: Vec<usize> = if n >= 2 { (0..=steps).collect() } else { vec![0] };

    let evaluate = |prefix: &[f64]| -> Option<(f64, f64, DVector<f64>)> {
        // Constraint data as functions of t = v_last.
        let y = &problem.y;
        let mut feasible = vec![(problem.v_box.lower[last], problem.v_box.upper[last])];
        let tol = problem.feas_tol * 0.5;
        for i in 0..last {
            // p_i = −v_i (Σ_{j<last} Y_ij v_j + Y_i,last t)
            let base: f64 = (0..last).map(|j| y[(i, j)] * prefix[j]).sum();
            let c = -prefix[i] * y[(i, last)];
            let d = -prefix[i] * base;
            feasible = intersect_linear(feasible, c, d, problem.p_box.lower[i] - tol, problem.p_box.upper[i] + tol);
            if feasible.is_empty() {
                return None;
            }
        }
        // p_last = −t (Σ_{j<last} Y_last,j v_j + Y_last,last t)
        let s: f64 = (0..last).map(|j| y[(last, j)] * prefix[j]).sum();
        let a = -y[(last, last)];
        let (plo, phi) = (problem.p_box.lower[last] - tol, problem.p_box.upper[last] + tol);
        if phi.is_finite() {
            feasible = intersect_sets(&feasible, &quadratic_nonpositive(a, -s, -phi));
        }
        if plo.is_finite() {
            feasible = intersect_sets(&feasible, &quadratic_nonpositive(-a, s, plo));
        }
        let q = &problem.q;
        let qa = q[(last, last)];
        let qb = 2.0 * (0..last).map(|j| q[(last, j)] * prefix[j]).sum::<f64>();
        let t = minimize_on_intervals(qa, qb, &feasible, mid[last])?;
        let mut v = DVector::zeros(n);
        for j in 0..last {
            v[j] = prefix[j];
        }
        v[last] = t;
        if !problem.feasible(&v) {
            return None;
        }
        let dist = (&v - &mid).norm();
        Some((problem.objective(&v), dist, v))
    };

    let row_best = execution.map(rows, |row| {
        let mut best: Option<(f64, f64, DVector<f64>)> = None;
        let mut prefix = vec![0.0; last];
        for idx in 0..points_per_row.max(1) {
            if last > 0 {
                prefix[0] = grid_value(0, row);
                let mut rem = idx;
                for (j, slot) in prefix.iter_mut().enumerate().skip(1) {
                    *slot = grid_value(j, rem % (steps + 1));
                    rem /= steps + 1;
                }
            }
            if let Some(candidate) = evaluate(&prefix) {
                if improves(&candidate, &best) {
                    best = Some(candidate);
                }
            }
        }
        best
    });
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    for candidate in row_best.into_iter().flatten() {
        if improves(&candidate, &best) {
            best = Some(candidate);
        }
    }
    match best {
        Some((_, _, v)) => Ok(problem.solution(v, 0, None, f64::NAN)),
        None => Err(Error::NoFeasibleSetpoint(f64::NAN)),
    }
}

fn improves(candidate: &(f64, f64, DVector<f64>), best: &Option<(f64, f64, DVector<f64>)>) -> bool {
    match best {
        None => true,
        Some((obj, dist, _)) => {
            let tie = 1e-12 * (1.0 + obj.abs());
            candidate.0 < obj - tie || (candidate.0 <= obj + tie && candidate.1 < *dist)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_topology;

    fn limits(n: usize, v: (f64, f64), p: (f64, f64)) -> OperatingLimits {
        OperatingLimits {
            voltage: Bounds::uniform(n, v.0, v.1),
            power: Bounds::uniform(n, p.0, p.1),
            filter_current: Bounds::uniform(n, -50.0, 50.0),
            reference: Bounds::uniform(n, 0.0, 1000.0),
        }
    }

    #[test]
    fn balance_residual_examples() {
        let y = DMatrix::from_element(1, 1, 0.04);
        let r = power_balance_residual(&DVector::from_element(1, 100.0), &DVector::from_element(1, -400.0), &y);
        assert_eq!(r[0], 0.0);
        let r = power_balance_residual(&DVector::zeros(1), &DVector::from_element(1, 7.0), &y);
        assert_eq!(r[0], 7.0);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        let p = DVector::from_vec(vec![3.0, -1.0]);
        let r = power_balance_residual(&DVector::from_element(2, 400.0), &p, &q);
        assert!((r - p).amax() < 1e-9);
    }

    #[test]
    fn single_node_takes_midpoint() {
        let t = build_topology(1, &[]).unwrap();
        let loads = DVector::from_element(1, 0.04);
        let lim = limits(1, (370.0, 410.0), (-1e5, 1e5));
        let s = solve_opt_ss(&t, &[], &loads, &lim, &SetpointSettings::default()).unwrap();
        assert_eq!(s.v[0], 390.0);
        assert_eq!(s.objective, 0.0);
        let b = brute_force_opt_ss(&t, &[], &loads, &lim, 1e-3, Execution::Sequential).unwrap();
        assert!((b.v[0] - 390.0).abs() <= 40.0 * 1e-3);
    }

    #[test]
    fn two_node_power_limit_forces_flow() {
        // Node 1 has no load and cannot absorb power; node 2 has a load but
        // its converter is capped, so node 1 must export through the line.
        let t = build_topology(2, &[(1, 0, 1)]).unwrap();
        let lines = [LineParams::new(0.5, 1e-4).unwrap()];
        let loads = DVector::from_vec(vec![0.0, 0.05]);
        let mut lim = limits(2, (380.0, 420.0), (-1e5, 0.0));
        lim.power.lower[1] = -6000.0;
        let s = solve_opt_ss(&t, &lines, &loads, &lim, &SetpointSettings::default()).unwrap();
        let b = brute_force_opt_ss(&t, &lines, &loads, &lim, 1e-3, Execution::Sequential).unwrap();
        assert!(s.objective > 0.0);
        assert!(s.objective <= b.objective * (1.0 + 1e-2) + 1e-9, "{} vs {}", s.objective, b.objective);
        assert!((s.objective - b.objective).abs() <= 1e-2 * b.objective);
        let check = check_setpoint(&t, &lines, &loads, &lim, &s).unwrap();
        assert!(check.power_violation <= 1e-9 * 1e5);
        assert!(check.voltage_violation <= 1e-9);
        assert!(check.balance_residual <= 1e-8 * 1e4);
    }

    #[test]
    fn symmetric_two_node_is_uniform() {
        let t = build_topology(2, &[(1, 0, 1)]).unwrap();
        let lines = [LineParams::new(0.5, 1e-4).unwrap()];
        let loads = DVector::from_vec(vec![0.05, 0.05]);
        let lim = limits(2, (380.0, 420.0), (-1e5, 0.0));
        let s = solve_opt_ss(&t, &lines, &loads, &lim, &SetpointSettings::default()).unwrap();
        assert_eq!(s.objective, 0.0);
        assert_eq!(s.v[0], s.v[1]);
        let b = brute_force_opt_ss(&t, &lines, &loads, &lim, 1e-3, Execution::Sequential).unwrap();
        assert!((b.v[0] - b.v[1]).abs() <= 40.0 * 1e-3 + 1e-9);
    }

    #[test]
    fn disjoint_voltage_boxes_need_flow() {
        let t = build_topology(3, &[(1, 0, 1), (2, 1, 2)]).unwrap();
        let lines = [LineParams::new(0.4, 1e-4).unwrap(), LineParams::new(0.6, 1e-4).unwrap()];
        let loads = DVector::from_vec(vec![0.03, 0.06, 0.02]);
        let mut lim = limits(3, (380.0, 420.0), (-1e5, 0.0));
        lim.voltage.lower[0] = 402.0;
        lim.voltage.upper[2] = 398.0;
        let s = solve_opt_ss(&t, &lines, &loads, &lim, &SetpointSettings::default()).unwrap();
        assert!((s.v[0] - 402.0).abs() < 1e-9 && (s.v[2] - 398.0).abs() < 1e-9);
        // Middle node at the conductance-weighted mean.
        let expected = (402.0 / 0.4 + 398.0 / 0.6) / (1.0 / 0.4 + 1.0 / 0.6);
        assert!((s.v[1] - expected).abs() < 1e-6, "{}", s.v[1]);
        let b = brute_force_opt_ss(&t, &lines, &loads, &lim, 1e-3, Execution::Parallel).unwrap();
        assert!((s.objective - b.objective).abs() <= 1e-2 * b.objective);
    }

    #[test]
    fn infeasible_limits_are_reported() {
        let t = build_topology(1, &[]).unwrap();
        let loads = DVector::from_element(1, 0.04);
        // Needs p = −0.04 v² ≤ −5776 W but only −1000 W is allowed.
        let lim = limits(1, (380.0, 420.0), (-1000.0, 0.0));
        assert!(matches!(
            solve_opt_ss(&t, &[], &loads, &lim, &SetpointSettings::default()),
            Err(Error::NoFeasibleSetpoint(_))
        ));
    }

    #[test]
    fn quadratic_level_sets() {
        // t² − 1 ≤ 0
        assert_eq!(quadratic_nonpositive(1.0, 0.0, -1.0), vec![(-1.0, 1.0)]);
        // −t² + 1 ≤ 0
        let s = quadratic_nonpositive(-1.0, 0.0, 1.0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].1, -1.0);
        assert_eq!(s[1].0, 1.0);
        assert!(quadratic_nonpositive(1.0, 0.0, 1.0).is_empty());
    }

    #[test]
    fn brute_force_rejects_large_grids() {
        let edges: Vec<(usize, usize, usize)> = (0..4).map(|i| (i, i, i + 1)).collect();
        let t = build_topology(5, &edges).unwrap();
        let lines = vec![LineParams::new(1.0, 1e-4).unwrap(); 4];
        let loads = DVector::from_element(5, 0.01);
        let r =
            brute_force_opt_ss(&t, &lines, &loads, &limits(5, (380.0, 420.0), (-1e5, 0.0)), 0.1, Execution::Sequential);
        assert!(matches!(r, Err(Error::TooLarge(5))));
    }
}
