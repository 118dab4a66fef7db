//! Dense convex QP solver based on the alternating direction method of
//! multipliers, in the operator-splitting form
//!
//! ```text
//! minimize    ½ zᵀ H z + fᵀ z
//! subject to  l ≤ A z ≤ u
//! ```
//!
//! The data is equilibrated (Ruiz) before iterating. Each iteration solves
//! one linear system with the cached Cholesky factor of
//! `H + σI + Aᵀ diag(ρ) A`. Optional polishing solves the equality-constrained
//! KKT system on the detected active set; a warm-started solve first tries to
//! polish on the active set of the warm-start point and skips the iteration
//! entirely when that already satisfies the KKT conditions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::linalg::inf_norm;
use crate::{Error, Result};

/// Bounds at or beyond this magnitude are treated as infinite.
pub const INFINITY: f64 = 1e20;

/// Passes of the active-set correction tried after a warm start.
const ACTIVE_SET_ITERATIONS: usize = 25;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        let problem = Self { h, f, a, l, u };
        problem.validate()?;
        Ok(problem)
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h.nrows();
        let m = self.a.nrows();
        if self.h.ncols() != n || self.f.len() != n || self.a.ncols() != n || self.l.len() != m || self.u.len() != m {
            return Err(Error::Dimension(format!(
                "H {}x{}, f {}, A {}x{}, l {}, u {}",
                self.h.nrows(),
                self.h.ncols(),
                self.f.len(),
                self.a.nrows(),
                self.a.ncols(),
                self.l.len(),
                self.u.len()
            )));
        }
        if !self.h.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("QP Hessian"));
        }
        if !self.a.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("QP constraint matrix"));
        }
        self.validate_vectors(&self.f, &self.l, &self.u)?;
        let scale = self.h.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!("QP Hessian is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    fn validate_vectors(&self, f: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if !f.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("QP linear cost"));
        }
        if l.iter().chain(u.iter()).any(|x| x.is_nan()) {
            return Err(Error::NonFinite("QP bounds"));
        }
        if let Some(i) = (0..l.len()).find(|&i| l[i] > u[i]) {
            return Err(Error::InvalidParameter(format!("QP bound {i}: lower {} > upper {}", l[i], u[i])));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    pub max_iter: usize,
    /// Residuals are evaluated every `check_interval` iterations.
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    pub warm_start: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            sigma: 1e-8,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_prim_inf: 1e-5,
            eps_dual_inf: 1e-5,
            max_iter: 20_000,
            check_interval: 5,
            scaling_iters: 10,
            adaptive_rho: true,
            adaptive_rho_interval: 50,
            polish: true,
            polish_refine_iters: 3,
            warm_start: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub prim_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub objective: f64,
    pub polished: bool,
    pub rho_updates: usize,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    /// Largest distance of `Az` from `[l, u]`.
    pub primal: f64,
    /// `‖Hz + f + Aᵀy‖∞`.
    pub dual: f64,
    /// Largest `|y_i|·slack_i` over the bound that `y_i` points at.
    pub complementarity: f64,
}

/// Optimality residuals of a primal-dual pair, computed from the problem data
/// alone. The dual sign convention is `y_i > 0` on an active upper bound and
/// `y_i < 0` on an active lower bound.
pub fn kkt_residuals(problem: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let az = &problem.a * z;
    let mut primal: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..az.len() {
        primal = primal.max(problem.l[i] - az[i]).max(az[i] - problem.u[i]);
        if y[i] > 0.0 {
            complementarity = complementarity.max(y[i] * (problem.u[i] - az[i]).abs());
        } else if y[i] < 0.0 {
            complementarity = complementarity.max(-y[i] * (az[i] - problem.l[i]).abs());
        }
    }
    let mut stationarity = &problem.h * z + &problem.f;
    stationarity.gemv_tr(1.0, &problem.a, y, 1.0);
    KktResiduals { primal, dual: inf_norm(&stationarity), complementarity }
}

/// Lagrange dual function value at `(z, y)` when `z` minimizes the
/// Lagrangian: `−½ zᵀHz − Σ (u_i y_i⁺ + l_i y_i⁻)`.
pub fn dual_objective(problem: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut support = 0.0;
    for i in 0..y.len() {
        if y[i] > 0.0 {
            support += problem.u[i] * y[i];
        } else if y[i] < 0.0 {
            support += problem.l[i] * y[i];
        }
    }
    -0.5 * z.dot(&(&problem.h * z)) - support
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    let mut solver = QpSolver::new(problem.clone(), settings.clone())?;
    Ok(solver.solve())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Active {
    Inactive,
    Lower,
    Upper,
}

struct PolishFactor {
    active: Vec<Active>,
    rows: Vec<usize>,
    kkt: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

/// `H⁻¹A_Wᵀ` and the factored Schur complement for one working set.
struct SchurFactor {
    rows: Vec<usize>,
    g: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.prim <= self.eps_prim && self.dual <= self.eps_dual
    }
}

/// Reusable solver instance. Matrix data is fixed at construction; the
/// linear cost and the bounds can be updated between solves without
/// refactoring.
/// Primal iterate, constraint values, duals and their residuals.
type Candidate = (DVector<f64>, DVector<f64>, DVector<f64>, Residuals);

pub struct QpSolver {
    problem: QpProblem,
    settings: QpSettings,
    // Scaled data.
    h: DMatrix<f64>,
    a: DMatrix<f64>,
    f: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    // Penalty groups: inequality rows, equality rows, free rows.
    row_kind: Vec<u8>,
    gram: [DMatrix<f64>; 3],
    rho: f64,
    rho_vec: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    // Iterates, scaled.
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    warm: bool,
    polish_cache: Option<PolishFactor>,
    // Cholesky factor of the scaled Hessian, computed on first use; the
    // inner `None` records that the Hessian is singular.
    hessian_factor: Option<Option<Cholesky<f64, Dyn>>>,
    schur_cache: Option<SchurFactor>,
    // `H⁻¹aᵢ` for constraint rows seen by the active-set correction.
    inverse_columns: Vec<Option<DVector<f64>>>,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self> {
        problem.validate()?;
        let n = problem.num_vars();
        let m = problem.num_constraints();
        let mut h = problem.h.clone();
        let mut a = problem.a.clone();
        let mut f = problem.f.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut c = 1.0;
        for _ in 0..settings.scaling_iters {
            let mut row_max = vec![0.0f64; m];
            for col in a.column_iter() {
                for (r, v) in row_max.iter_mut().zip(col.iter()) {
                    *r = r.max(v.abs());
                }
            }
            let et = DVector::from_iterator(m, row_max.into_iter().map(scaling_factor));
            let dt = DVector::from_fn(n, |j, _| {
                let norm = h.column(j).amax().max(if m > 0 { a.column(j).amax() } else { 0.0 });
                scaling_factor(norm)
            });
            for (j, mut col) in h.column_iter_mut().enumerate() {
                col.zip_apply(&dt, |x, s| *x *= s * dt[j]);
            }
            for (j, mut col) in a.column_iter_mut().enumerate() {
                col.zip_apply(&et, |x, s| *x *= s * dt[j]);
            }
            f.component_mul_assign(&dt);
            d.component_mul_assign(&dt);
            e.component_mul_assign(&et);
            let mean_col = if n > 0 { h.column_iter().map(|c| c.amax()).sum::<f64>() / n as f64 } else { 0.0 };
            let ct = scaling_factor(mean_col.max(f.amax())).powi(2);
            h *= ct;
            f *= ct;
            c *= ct;
        }
        let l = problem.l.component_mul(&e).map(clip_infinity);
        let u = problem.u.component_mul(&e).map(clip_infinity);

        // PSD check on the scaled Hessian.
        let mut shifted = h.clone();
        for i in 0..n {
            shifted[(i, i)] += settings.sigma;
        }
        if Cholesky::new(shifted).is_none() {
            return Err(Error::NotPsd);
        }

        let row_kind: Vec<u8> = (0..m).map(|i| row_kind(l[i], u[i])).collect();
        let gram = [0u8, 1, 2].map(|kind| {
            let rows: Vec<usize> = (0..m).filter(|&i| row_kind[i] == kind).collect();
            if rows.is_empty() {
                DMatrix::zeros(n, n)
            } else {
                let sub = a.select_rows(rows.iter());
                sub.transpose() * &sub
            }
        });
        let rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let (rho_vec, factor) = factorize(&h, &gram, &row_kind, rho, settings.sigma)?;
        Ok(Self {
            problem,
            h,
            a,
            f,
            l,
            u,
            d,
            e,
            c,
            row_kind,
            gram,
            rho,
            rho_vec,
            factor,
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
            warm: false,
            polish_cache: None,
            hessian_factor: None,
            schur_cache: None,
            inverse_columns: vec![None; m],
            settings,
        })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// Replaces `f`, `l` and `u`, keeping the matrix factorizations.
    pub fn update_linear_and_bounds(&mut self, f: DVector<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<()> {
        if f.len() != self.problem.num_vars() || l.len() != self.problem.num_constraints() || u.len() != l.len() {
            return Err(Error::Dimension("QP update has wrong dimensions".into()));
        }
        self.problem.validate_vectors(&f, &l, &u)?;
        let rows_changed = (0..l.len()).any(|i| row_kind(l[i] * self.e[i], u[i] * self.e[i]) != self.row_kind[i]);
        self.f = f.component_mul(&self.d) * self.c;
        self.l = l.component_mul(&self.e).map(clip_infinity);
        self.u = u.component_mul(&self.e).map(clip_infinity);
        self.problem.f = f;
        self.problem.l = l;
        self.problem.u = u;
        if rows_changed {
            self.row_kind = (0..self.l.len()).map(|i| row_kind(self.l[i], self.u[i])).collect();
            let n = self.problem.num_vars();
            let m = self.problem.num_constraints();
            self.gram = [0u8, 1, 2].map(|kind| {
                let rows: Vec<usize> = (0..m).filter(|&i| self.row_kind[i] == kind).collect();
                if rows.is_empty() {
                    DMatrix::zeros(n, n)
                } else {
                    let sub = self.a.select_rows(rows.iter());
                    sub.transpose() * &sub
                }
            });
            self.refactor()?;
        }
        Ok(())
    }

    /// Starts the next solve from `(z, y)` given in unscaled units.
    pub fn warm_start(&mut self, z: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if z.len() != self.problem.num_vars() || y.len() != self.problem.num_constraints() {
            return Err(Error::Dimension("warm start has wrong dimensions".into()));
        }
        self.x = z.component_div(&self.d);
        self.y = y.component_div(&self.e) * self.c;
        let ax = &self.a * &self.x;
        self.z = DVector::from_fn(ax.len(), |i, _| ax[i].clamp(self.l[i], self.u[i]));
        self.warm = true;
        Ok(())
    }

    fn refactor(&mut self) -> Result<()> {
        let (rho_vec, factor) = factorize(&self.h, &self.gram, &self.row_kind, self.rho, self.settings.sigma)?;
        self.rho_vec = rho_vec;
        self.factor = factor;
        Ok(())
    }

    pub fn solve(&mut self) -> QpSolution {
        let n = self.problem.num_vars();
        let m = self.problem.num_constraints();
        let warm = self.warm && self.settings.warm_start;
        if !warm {
            self.x = DVector::zeros(n);
            self.z = DVector::zeros(m);
            self.y = DVector::zeros(m);
        }
        self.warm = false;

        if warm {
            let res = self.residuals(&self.x, &self.z, &self.y);
            if res.converged() && self.complementary(&self.x, &self.y, &res) {
                return self.finish(QpStatus::Solved, 0, 0, res, false);
            }
            if self.settings.polish {
                let found = self.refine_active_set(ACTIVE_SET_ITERATIONS).or_else(|| self.polish(true));
                if let Some((x, z, y, res)) = found {
                    self.x = x;
                    self.z = z;
                    self.y = y;
                    return self.finish(QpStatus::Solved, 0, 0, res, true);
                }
            }
        }

        let s = &self.settings;
        let (sigma, alpha) = (s.sigma, s.alpha);
        let mut rho_updates = 0;
        let mut x_tilde = DVector::zeros(n);
        let mut z_tilde = DVector::zeros(m);
        let mut rhs = DVector::zeros(n);
        let mut tmp = DVector::zeros(m);
        let mut x_prev = self.x.clone();
        let mut y_prev = self.y.clone();
        let mut status = QpStatus::MaxIterations;
        let mut iterations = self.settings.max_iter;
        for iter in 1..=self.settings.max_iter {
            x_prev.copy_from(&self.x);
            y_prev.copy_from(&self.y);

            // rhs = σx − f + Aᵀ(ρ∘z − y)
            for i in 0..m {
                tmp[i] = self.rho_vec[i] * self.z[i] - self.y[i];
            }
            rhs.copy_from(&self.x);
            rhs *= sigma;
            rhs -= &self.f;
            rhs.gemv_tr(1.0, &self.a, &tmp, 1.0);
            x_tilde.copy_from(&rhs);
            self.factor.solve_mut(&mut x_tilde);
            z_tilde.gemv(1.0, &self.a, &x_tilde, 0.0);

            self.x *= 1.0 - alpha;
            self.x.axpy(alpha, &x_tilde, 1.0);
            for i in 0..m {
                let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * self.z[i];
                let z_new = (relaxed + self.y[i] / self.rho_vec[i]).clamp(self.l[i], self.u[i]);
                self.y[i] += self.rho_vec[i] * (relaxed - z_new);
                self.z[i] = z_new;
            }

            if iter % self.settings.check_interval == 0 || iter == self.settings.max_iter {
                let res = self.residuals(&self.x, &self.z, &self.y);
                if res.converged() {
                    status = QpStatus::Solved;
                    iterations = iter;
                    break;
                }
                if self.primal_infeasible(&y_prev) {
                    status = QpStatus::PrimalInfeasible;
                    iterations = iter;
                    break;
                }
                if self.dual_infeasible(&x_prev) {
                    status = QpStatus::DualInfeasible;
                    iterations = iter;
                    break;
                }
                if self.settings.adaptive_rho && iter % self.settings.adaptive_rho_interval == 0 {
                    let new_rho = self.adapted_rho();
                    if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                        self.rho = new_rho;
                        if self.refactor().is_ok() {
                            rho_updates += 1;
                        }
                    }
                }
            }
        }

        match status {
            QpStatus::Solved | QpStatus::MaxIterations if self.settings.polish => {
                let admm = self.residuals(&self.x, &self.z, &self.y);
                if let Some((x, z, y, res)) = self.polish(status == QpStatus::MaxIterations) {
                    let better = (res.prim <= admm.prim.max(res.eps_prim) && res.dual <= admm.dual.max(res.eps_dual))
                        || res.converged();
                    if better {
                        self.x = x;
                        self.z = z;
                        self.y = y;
                        return self.finish(QpStatus::Solved, iterations, rho_updates, res, true);
                    }
                }
                if status == QpStatus::MaxIterations {
                    if let Some((x, z, y, res)) = self.refine_active_set(ACTIVE_SET_ITERATIONS) {
                        self.x = x;
                        self.z = z;
                        self.y = y;
                        return self.finish(QpStatus::Solved, iterations, rho_updates, res, true);
                    }
                }
                self.finish(status, iterations, rho_updates, admm, false)
            }
            _ => {
                let res = self.residuals(&self.x, &self.z, &self.y);
                self.finish(status, iterations, rho_updates, res, false)
            }
        }
    }

    fn finish(
        &self,
        status: QpStatus,
        iterations: usize,
        rho_updates: usize,
        res: Residuals,
        polished: bool,
    ) -> QpSolution {
        let z = self.x.component_mul(&self.d);
        let y = self.y.component_mul(&self.e) / self.c;
        let objective = self.problem.objective(&z);
        QpSolution {
            z,
            y,
            status,
            prim_res: res.prim,
            dual_res: res.dual,
            iterations,
            objective,
            polished,
            rho_updates,
        }
    }

    /// Unscaled residuals of a scaled iterate.
    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
        let ax = &self.a * x;
        let mut prim: f64 = 0.0;
        let mut ax_norm: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        for i in 0..ax.len() {
            let inv = 1.0 / self.e[i];
            prim = prim.max(((ax[i] - z[i]) * inv).abs());
            ax_norm = ax_norm.max((ax[i] * inv).abs());
            z_norm = z_norm.max((z[i] * inv).abs());
        }
        let hx = &self.h * x;
        let aty = self.a.tr_mul(y);
        let scale = 1.0 / self.c;
        let mut dual: f64 = 0.0;
        let (mut hx_norm, mut aty_norm, mut f_norm): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for j in 0..hx.len() {
            let inv = scale / self.d[j];
            dual = dual.max(((hx[j] + self.f[j] + aty[j]) * inv).abs());
            hx_norm = hx_norm.max((hx[j] * inv).abs());
            aty_norm = aty_norm.max((aty[j] * inv).abs());
            f_norm = f_norm.max((self.f[j] * inv).abs());
        }
        let s = &self.settings;
        Residuals {
            prim,
            dual,
            eps_prim: s.eps_abs + s.eps_rel * ax_norm.max(z_norm),
            eps_dual: s.eps_abs + s.eps_rel * hx_norm.max(aty_norm).max(f_norm),
        }
    }

    /// Multipliers may only be nonzero on rows at the matching bound. The
    /// residuals alone do not check this for a shifted warm start.
    fn complementary(&self, x: &DVector<f64>, y: &DVector<f64>, res: &Residuals) -> bool {
        let ax = &self.a * x;
        (0..ax.len()).all(|i| {
            let inv = 1.0 / self.e[i];
            let dual = y[i] * self.e[i] / self.c;
            let lower_slack = (ax[i] - self.l[i]) * inv;
            let upper_slack = (self.u[i] - ax[i]) * inv;
            (dual >= -res.eps_dual || lower_slack <= res.eps_prim)
                && (dual <= res.eps_dual || upper_slack <= res.eps_prim)
        })
    }

    fn adapted_rho(&self) -> f64 {
        let ax = &self.a * &self.x;
        let hx = &self.h * &self.x;
        let aty = self.a.tr_mul(&self.y);
        let prim = inf_norm(&(&ax - &self.z));
        let dual = inf_norm(&(&hx + &self.f + &aty));
        let prim_norm = inf_norm(&ax).max(inf_norm(&self.z)).max(1e-30);
        let dual_norm = inf_norm(&hx).max(inf_norm(&aty)).max(inf_norm(&self.f)).max(1e-30);
        let ratio = ((prim / prim_norm) / (dual / dual_norm + 1e-30)).sqrt();
        (self.rho * ratio).clamp(RHO_MIN, RHO_MAX)
    }

    fn primal_infeasible(&self, y_prev: &DVector<f64>) -> bool {
        let dy_scaled = &self.y - y_prev;
        let dy = dy_scaled.component_mul(&self.e);
        let norm = inf_norm(&dy);
        if norm < 1e-30 {
            return false;
        }
        let eps = self.settings.eps_prim_inf * norm;
        let mut support = 0.0;
        for i in 0..dy.len() {
            if dy_scaled[i] > 0.0 {
                support += self.u[i] * dy_scaled[i];
            } else if dy_scaled[i] < 0.0 {
                support += self.l[i] * dy_scaled[i];
            }
        }
        if !(support < -eps) {
            return false;
        }
        let at_dy = self.a.tr_mul(&dy_scaled).component_div(&self.d);
        inf_norm(&at_dy) <= eps
    }

    fn dual_infeasible(&self, x_prev: &DVector<f64>) -> bool {
        let dx_scaled = &self.x - x_prev;
        let dx = dx_scaled.component_mul(&self.d);
        let norm = inf_norm(&dx);
        if norm < 1e-30 {
            return false;
        }
        let eps = self.settings.eps_dual_inf * norm;
        if !(self.f.dot(&dx_scaled) / self.c < -eps) {
            return false;
        }
        let h_dx = (&self.h * &dx_scaled).component_div(&self.d) / self.c;
        if inf_norm(&h_dx) > eps {
            return false;
        }
        let a_dx = &self.a * &dx_scaled;
        (0..a_dx.len()).all(|i| {
            let v = a_dx[i] / self.e[i];
            (self.u[i] >= INFINITY || v <= eps) && (self.l[i] <= -INFINITY || v >= -eps)
        })
    }

    fn active_set(&self) -> Vec<Active> {
        (0..self.z.len())
            .map(|i| {
                if self.z[i] - self.l[i] < -self.y[i] {
                    Active::Lower
                } else if self.u[i] - self.z[i] < self.y[i] {
                    Active::Upper
                } else {
                    Active::Inactive
                }
            })
            .collect()
    }

    /// Primal-dual active-set correction starting from the active set of the
    /// current iterate. Each pass solves the equality-constrained problem on
    /// the working set through the Schur complement `A_W H⁻¹ A_Wᵀ`, then drops
    /// rows whose multipliers have the wrong sign and adds violated rows.
    /// Needs a positive definite Hessian; the result is accepted only if it
    /// meets the termination tolerances.
    fn refine_active_set(&mut self, max_passes: usize) -> Option<Candidate> {
        if self.hessian_factor.is_none() {
            self.hessian_factor = Some(Cholesky::new(self.h.clone()));
        }
        let chol = self.hessian_factor.as_ref()?.as_ref()?;
        let n = self.problem.num_vars();
        let m = self.problem.num_constraints();
        let unconstrained = chol.solve(&(-&self.f));
        let mut working: Vec<(usize, Active)> =
            self.active_set().into_iter().enumerate().filter(|(_, a)| *a != Active::Inactive).collect();
        let add_tol: Vec<f64> = (0..m).map(|i| 0.1 * self.settings.eps_abs * self.e[i]).collect();
        for _ in 0..max_passes {
            let k = working.len();
            let (x, y_w) = if k == 0 {
                (unconstrained.clone(), DVector::zeros(0))
            } else {
                let rows: Vec<usize> = working.iter().map(|w| w.0).collect();
                if self.schur_cache.as_ref().is_none_or(|c| c.rows != rows) {
                    for &i in &rows {
                        if self.inverse_columns[i].is_none() {
                            self.inverse_columns[i] = Some(chol.solve(&self.a.row(i).transpose()));
                        }
                    }
                    let g = DMatrix::from_fn(n, k, |j, r| self.inverse_columns[rows[r]].as_ref().map_or(0.0, |c| c[j]));
                    let a_w = self.a.select_rows(rows.iter());
                    let lu = (&a_w * &g).lu();
                    self.schur_cache = Some(SchurFactor { rows, g, lu });
                }
                let cache = self.schur_cache.as_ref()?;
                let rhs = DVector::from_fn(k, |r, _| {
                    let (i, side) = working[r];
                    let bound = if side == Active::Lower { self.l[i] } else { self.u[i] };
                    self.a.row(i).dot(&unconstrained.transpose()) - bound
                });
                let y_w = cache.lu.solve(&rhs)?;
                (&unconstrained - &cache.g * &y_w, y_w)
            };
            if !x.iter().chain(y_w.iter()).all(|v| v.is_finite()) {
                return None;
            }
            let y_scale = inf_norm(&y_w).max(1.0) * 1e-12;
            let mut next: Vec<(usize, Active)> = Vec::with_capacity(k);
            let mut in_set = vec![false; m];
            let mut changed = false;
            for (r, &(i, side)) in working.iter().enumerate() {
                let equality = self.l[i] == self.u[i];
                let wrong = match side {
                    Active::Lower => y_w[r] > y_scale,
                    _ => y_w[r] < -y_scale,
                };
                if wrong && !equality {
                    changed = true;
                } else {
                    next.push((i, side));
                    in_set[i] = true;
                }
            }
            let ax = &self.a * &x;
            for i in 0..m {
                if in_set[i] {
                    continue;
                }
                if ax[i] < self.l[i] - add_tol[i] {
                    next.push((i, Active::Lower));
                    changed = true;
                } else if ax[i] > self.u[i] + add_tol[i] {
                    next.push((i, Active::Upper));
                    changed = true;
                }
            }
            // More working rows than variables cannot be linearly independent;
            // this happens on infeasible problems and is left to ADMM.
            if next.len() > n {
                return None;
            }
            if !changed {
                let mut y = DVector::zeros(m);
                for (r, &(i, _)) in working.iter().enumerate() {
                    y[i] = y_w[r];
                }
                let z = DVector::from_fn(m, |i, _| ax[i].clamp(self.l[i], self.u[i]));
                let res = self.residuals(&x, &z, &y);
                return res.converged().then_some((x, z, y, res));
            }
            working = next;
        }
        None
    }

    /// Solves the KKT system on the active set of the current iterate. With
    /// `strict`, the result is only returned if it meets the termination
    /// tolerances and the multipliers have the signs the active set implies.
    fn polish(&mut self, strict: bool) -> Option<Candidate> {
        let n = self.problem.num_vars();
        let m = self.problem.num_constraints();
        let active = self.active_set();
        let cached = matches!(&self.polish_cache, Some(c) if c.active == active);
        if !cached {
            let rows: Vec<usize> = (0..m).filter(|&i| active[i] != Active::Inactive).collect();
            let k = rows.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = self.a[(i, j)];
                    kkt[(j, n + r)] = self.a[(i, j)];
                }
            }
            let delta = 1e-9;
            let mut regularized = kkt.clone();
            for j in 0..n {
                regularized[(j, j)] += delta;
            }
            for r in 0..k {
                regularized[(n + r, n + r)] -= delta;
            }
            let lu = regularized.lu();
            self.polish_cache = Some(PolishFactor { active: active.clone(), rows, kkt, lu });
        }
        let cache = self.polish_cache.as_ref()?;
        let k = cache.rows.len();
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&self.f));
        for (r, &i) in cache.rows.iter().enumerate() {
            rhs[n + r] = if active[i] == Active::Lower { self.l[i] } else { self.u[i] };
        }
        let mut sol = cache.lu.solve(&rhs)?;
        for _ in 0..self.settings.polish_refine_iters {
            let residual = &rhs - &cache.kkt * &sol;
            sol += cache.lu.solve(&residual)?;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let mut y = DVector::zeros(m);
        for (r, &i) in cache.rows.iter().enumerate() {
            y[i] = sol[n + r];
        }
        let ax = &self.a * &x;
        let z = DVector::from_fn(m, |i, _| ax[i].clamp(self.l[i], self.u[i]));
        let res = self.residuals(&x, &z, &y);
        if strict {
            if !res.converged() {
                return None;
            }
            let y_scale = inf_norm(&y).max(1.0) * 1e-9;
            let signs_ok = (0..m).all(|i| match active[i] {
                Active::Lower => self.l[i] == self.u[i] || y[i] <= y_scale,
                Active::Upper => self.l[i] == self.u[i] || y[i] >= -y_scale,
                Active::Inactive => true,
            });
            if !signs_ok {
                return None;
            }
        }
        Some((x, z, y, res))
    }
}

fn scaling_factor(norm: f64) -> f64 {
    if norm < MIN_SCALING {
        1.0
    } else {
        1.0 / norm.min(MAX_SCALING).sqrt()
    }
}

fn clip_infinity(v: f64) -> f64 {
    if v >= INFINITY {
        f64::INFINITY
    } else if v <= -INFINITY {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// 0 inequality, 1 equality, 2 unbounded.
fn row_kind(l: f64, u: f64) -> u8 {
    if l <= -INFINITY && u >= INFINITY {
        2
    } else if (u - l).abs() < 1e-12 * (1.0 + l.abs()) {
        1
    } else {
        0
    }
}

fn factorize(
    h: &DMatrix<f64>,
    gram: &[DMatrix<f64>; 3],
    row_kind: &[u8],
    rho: f64,
    sigma: f64,
) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
    let weights = [rho, (rho * RHO_EQ_FACTOR).min(RHO_MAX), RHO_MIN];
    let mut k = h.clone();
    for (g, w) in gram.iter().zip(weights) {
        k += g * w;
    }
    for i in 0..k.nrows() {
        k[(i, i)] += sigma;
    }
    let rho_vec = DVector::from_iterator(row_kind.len(), row_kind.iter().map(|&kind| weights[kind as usize]));
    let factor = Cholesky::new(k).ok_or(Error::NotPsd)?;
    Ok((rho_vec, factor))
}
