//! State-space models of the closed primary loop, their forward-Euler
//! discretization and the storage/Lyapunov instrumentation.
//!
//! State ordering is `(v, i_f, e)` for the reduced model, in which line
//! currents are quasi-stationary (`i_L = R⁻¹ Mᵀ v`), and `(v, i_f, e, i_L)`
//! for the full model with line inductances. The input is the voltage
//! reference `u` of every bus.

use std::ops::Range;

use nalgebra::{Complex, DMatrix, DVector};

use crate::grid::{check_loads, BusParams, GridTopology, LineParams, NetworkMatrices};
use crate::linalg;
use crate::primary::{DerivedGains, StorageMatrix};
use crate::{Error, Result};

/// Real parts at or above this value count as not strictly stable.
pub const STABILITY_TOLERANCE: f64 = -1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub nodes: usize,
    /// Zero for the reduced model.
    pub lines: usize,
}

impl StateLayout {
    pub fn reduced(nodes: usize) -> Self {
        Self { nodes, lines: 0 }
    }

    pub fn dim(&self) -> usize {
        3 * self.nodes + self.lines
    }

    pub fn v(&self) -> Range<usize> {
        0..self.nodes
    }

    pub fn i_f(&self) -> Range<usize> {
        self.nodes..2 * self.nodes
    }

    pub fn e(&self) -> Range<usize> {
        2 * self.nodes..3 * self.nodes
    }

    pub fn i_l(&self) -> Range<usize> {
        3 * self.nodes..self.dim()
    }

    pub fn is_full(&self) -> bool {
        self.lines > 0
    }
}

#[derive(Clone, Debug)]
pub struct ContinuousModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    layout: StateLayout,
    loads: DVector<f64>,
}

impl ContinuousModel {
    /// Wraps arbitrary matrices; used for synthetic systems in tests.
    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>, layout: StateLayout) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let loads = DVector::zeros(layout.nodes);
        Ok(Self { a, b, layout, loads })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn loads(&self) -> &DVector<f64> {
        &self.loads
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        linalg::eigenvalues(&self.a)
    }

    /// `ẋ = A x + B u`.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = &self.a * x;
        dx.gemv(1.0, &self.b, u, 1.0);
        dx
    }

    /// Equilibrium for a constant input, the solution of `A x = −B u`.
    pub fn equilibrium(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(&self.b, u)?;
        let rhs = -(&self.b * u);
        self.a.clone().lu().solve(&rhs).ok_or_else(|| Error::InvalidParameter("state matrix is singular".into()))
    }
}

fn check_input(b: &DMatrix<f64>, u: &DVector<f64>) -> Result<()> {
    if u.len() != b.ncols() {
        return Err(Error::Dimension(format!("input has {} entries, model expects {}", u.len(), b.ncols())));
    }
    Ok(())
}

fn check_bus_data(n: usize, buses: &[BusParams], gains: &[DerivedGains]) -> Result<()> {
    if buses.len() != n || gains.len() != n {
        return Err(Error::Dimension(format!(
            "{} bus parameter sets and {} gain sets for {n} nodes",
            buses.len(),
            gains.len()
        )));
    }
    Ok(())
}

/// Fills the `(v, i_f, e)` blocks shared by both models, with the given
/// nodal conductance matrix on the voltage rows.
fn fill_bus_blocks(
    a: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
    conductance: &DMatrix<f64>,
    buses: &[BusParams],
    gains: &[DerivedGains],
) {
    let n = buses.len();
    for i in 0..n {
        let c = buses[i].filter_capacitance;
        for j in 0..n {
            a[(i, j)] = -conductance[(i, j)] / c;
        }
        a[(i, n + i)] = 1.0 / c;
        a[(n + i, i)] = gains[i].alpha;
        a[(n + i, n + i)] = gains[i].beta;
        a[(n + i, 2 * n + i)] = gains[i].gamma;
        a[(2 * n + i, i)] = -1.0;
        b[(2 * n + i, i)] = 1.0;
    }
}

/// Model with quasi-stationary lines: `v̇ = C⁻¹(i_f − (diag(Y) + Q_loss) v)`,
/// `i̇_f = α v + β i_f + γ e`, `ė = u − v`.
pub fn assemble_reduced(
    topology: &GridTopology,
    matrices: &NetworkMatrices,
    buses: &[BusParams],
    gains: &[DerivedGains],
    loads: &DVector<f64>,
) -> Result<ContinuousModel> {
    let n = topology.node_count();
    check_bus_data(n, buses, gains)?;
    check_loads(n, loads)?;
    if matrices.loss.nrows() != n || matrices.loss.ncols() != n {
        return Err(Error::Dimension(format!(
            "loss matrix is {}x{} for {n} nodes",
            matrices.loss.nrows(),
            matrices.loss.ncols()
        )));
    }
    let layout = StateLayout::reduced(n);
    let mut a = DMatrix::zeros(3 * n, 3 * n);
    let mut b = DMatrix::zeros(3 * n, n);
    let conductance = &matrices.loss + DMatrix::from_diagonal(loads);
    fill_bus_blocks(&mut a, &mut b, &conductance, buses, gains);
    Ok(ContinuousModel { a, b, layout, loads: loads.clone() })
}

/// Model with line dynamics `L_l i̇_L = −R_l i_L + Mᵀ v`; the line currents
/// enter the voltage rows through `−C⁻¹ M i_L`.
pub fn assemble_full(
    topology: &GridTopology,
    buses: &[BusParams],
    lines: &[LineParams],
    gains: &[DerivedGains],
    loads: &DVector<f64>,
) -> Result<ContinuousModel> {
    let n = topology.node_count();
    let m = topology.line_count();
    check_bus_data(n, buses, gains)?;
    check_loads(n, loads)?;
    if lines.len() != m {
        return Err(Error::Dimension(format!("{} line parameter sets for {m} lines", lines.len())));
    }
    let layout = StateLayout { nodes: n, lines: m };
    let mut a = DMatrix::zeros(layout.dim(), layout.dim());
    let mut b = DMatrix::zeros(layout.dim(), n);
    fill_bus_blocks(&mut a, &mut b, &DMatrix::from_diagonal(loads), buses, gains);
    let incidence = topology.incidence();
    for j in 0..m {
        let row = 3 * n + j;
        a[(row, row)] = -lines[j].resistance / lines[j].inductance;
        for i in 0..n {
            let mij = incidence[(i, j)];
            if mij != 0.0 {
                a[(i, row)] = -mij / buses[i].filter_capacitance;
                a[(row, i)] = mij / lines[j].inductance;
            }
        }
    }
    Ok(ContinuousModel { a, b, layout, loads: loads.clone() })
}

/// `min −2a/(a² + b²)` over eigenvalues `a + jb`.
pub fn max_step_from_spectrum(spectrum: &[Complex<f64>]) -> Result<f64> {
    let mut h_max = f64::INFINITY;
    for l in spectrum {
        if !(l.re < STABILITY_TOLERANCE) {
            return Err(Error::Unstable(l.re));
        }
        h_max = h_max.min(-2.0 * l.re / l.norm_sqr());
    }
    Ok(h_max)
}

/// Largest forward-Euler step for which `I + hA` stays Schur stable.
pub fn max_step_size(model: &ContinuousModel) -> Result<f64> {
    max_step_from_spectrum(&model.eigenvalues())
}

#[derive(Clone, Debug)]
pub struct DiscreteModel {
    a_k: DMatrix<f64>,
    b_k: DMatrix<f64>,
    h: f64,
    layout: StateLayout,
}

/// `A_k = I + hA`, `B_k = hB`. Logs a warning when `h ≥ h_max`.
pub fn discretize(model: &ContinuousModel, h: f64) -> Result<DiscreteModel> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
    }
    let dim = model.a.nrows();
    let a_k = DMatrix::identity(dim, dim) + &model.a * h;
    let b_k = &model.b * h;
    match max_step_size(model) {
        Ok(h_max) if h >= h_max => log::warn!("step {h} s is not below h_max = {h_max} s"),
        Err(e) => log::warn!("discretizing a model that is not stable: {e}"),
        _ => {}
    }
    Ok(DiscreteModel { a_k, b_k, h, layout: model.layout })
}

impl DiscreteModel {
    pub fn a_k(&self) -> &DMatrix<f64> {
        &self.a_k
    }

    pub fn b_k(&self) -> &DMatrix<f64> {
        &self.b_k
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a_k)
    }
}

/// `x(k+1) = A_k x(k) + B_k u(k)`.
pub fn step(model: &DiscreteModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.a_k.nrows() {
        return Err(Error::Dimension(format!("state has {} entries, model expects {}", x.len(), model.a_k.nrows())));
    }
    check_input(&model.b_k, u)?;
    let mut next = &model.a_k * x;
    next.gemv(1.0, &model.b_k, u, 1.0);
    Ok(next)
}

/// Solves `A_kᵀ P A_k − P = −I` by a direct LU solve over the
/// `d(d+1)/2` unknowns of the symmetric `P`.
pub fn lyapunov_matrix(model: &DiscreteModel) -> Result<DMatrix<f64>> {
    let rho = model.spectral_radius();
    if !(rho < 1.0) {
        return Err(Error::SpectralRadius(rho));
    }
    let a = &model.a_k;
    let d = a.nrows();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let index = |i: usize, j: usize| -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // Row-major offset into the upper triangle.
        i * d - i * (i + 1) / 2 + j
    };
    let q = pairs.len();
    let mut system = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    // Equation (i, j): Σ_{k,l} A[k,i] P[k,l] A[l,j] − P[i,j] = −δ_ij.
    for (row, &(i, j)) in pairs.iter().enumerate() {
        for k in 0..d {
            let aki = a[(k, i)];
            let akj = a[(k, j)];
            if aki == 0.0 && akj == 0.0 {
                continue;
            }
            for l in k..d {
                let coeff = if k == l { aki * a[(l, j)] } else { aki * a[(l, j)] + a[(l, i)] * akj };
                if coeff != 0.0 {
                    system[(row, index(k, l))] += coeff;
                }
            }
        }
        system[(row, index(i, j))] -= 1.0;
        if i == j {
            rhs[row] = -1.0;
        }
    }
    let lu = system.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or_else(|| Error::InvalidParameter("Lyapunov system is singular".into()))?;
    // One step of iterative refinement.
    let residual = &rhs - &system * &sol;
    if let Some(correction) = lu.solve(&residual) {
        sol += correction;
    }
    let mut p = DMatrix::zeros(d, d);
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        p[(i, j)] = sol[idx];
        p[(j, i)] = sol[idx];
    }
    Ok(p)
}

/// `‖A_kᵀ P A_k − P + I‖_max / ‖P‖_max`.
pub fn lyapunov_residual(model: &DiscreteModel, p: &DMatrix<f64>) -> f64 {
    let a = &model.a_k;
    let d = a.nrows();
    let r = a.transpose() * p * a - p + DMatrix::identity(d, d);
    linalg::max_abs(&r) / linalg::max_abs(p).max(1.0)
}

/// `V(x̃) = Σ_i S_i(ṽ_i, ĩ_f,i, ẽ_i) + Σ_j L_l,j ĩ_L,j²`. Line terms are only
/// present for full-layout errors.
pub fn interconnected_storage(
    layout: StateLayout,
    error: &DVector<f64>,
    storage: &[StorageMatrix],
    lines: &[LineParams],
) -> Result<f64> {
    if error.len() != layout.dim() || storage.len() != layout.nodes || (layout.is_full() && lines.len() != layout.lines)
    {
        return Err(Error::Dimension("storage evaluation inputs do not match the state layout".into()));
    }
    let n = layout.nodes;
    let mut total = 0.0;
    for (i, s) in storage.iter().enumerate() {
        total += s.evaluate(error[i], error[n + i], error[2 * n + i]);
    }
    for (j, line) in layout.i_l().enumerate() {
        total += lines[j].inductance * error[line] * error[line];
    }
    Ok(total)
}

/// Fixed-step classical Runge–Kutta integration of `ẋ = A x + B u` with a
/// constant input over `substeps · dt`.
pub fn integrate_rk4(
    model: &ContinuousModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> DVector<f64> {
    let bu = &model.b * u;
    let f = |x: &DVector<f64>| -> DVector<f64> {
        let mut dx = bu.clone();
        dx.gemv(1.0, &model.a, x, 1.0);
        dx
    };
    let mut x = x.clone();
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (0.5 * dt)));
        let k3 = f(&(&x + &k2 * (0.5 * dt)));
        let k4 = f(&(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    x
}

/// Smallest substep count `≥ requested` for which RK4 with step
/// `h / substeps` is comfortably inside its stability region.
pub fn rk4_substeps(model: &ContinuousModel, h: f64, requested: usize) -> usize {
    let rho = linalg::spectral_radius(&model.a);
    let needed = (h * rho / 2.5).ceil() as usize;
    requested.max(needed).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_topology;
    use crate::primary::{derive_gains, storage_matrix, ControllerGains};

    fn bus() -> BusParams {
        BusParams::new(0.1, 0.01, 0.2).unwrap()
    }

    fn gains() -> DerivedGains {
        derive_gains(&ControllerGains { k1: -3.0, k2: -0.5, k3: 72.0 }, &bus())
    }

    fn single_bus(load: f64) -> ContinuousModel {
        let t = build_topology(1, &[]).unwrap();
        let loads = DVector::from_element(1, load);
        let nm = NetworkMatrices::assemble(&t, &[], &loads).unwrap();
        assemble_reduced(&t, &nm, &[bus()], &[gains()], &loads).unwrap()
    }

    fn two_node() -> (GridTopology, Vec<LineParams>, DVector<f64>) {
        let t = build_topology(2, &[(1, 0, 1)]).unwrap();
        (t, vec![LineParams::new(0.5, 5e-5).unwrap()], DVector::from_vec(vec![0.04, 0.05]))
    }

    #[test]
    fn single_bus_structure() {
        let m = single_bus(0.04);
        let g = gains();
        let expected =
            DMatrix::from_row_slice(3, 3, &[-0.04 / 0.2, 1.0 / 0.2, 0.0, g.alpha, g.beta, g.gamma, -1.0, 0.0, 0.0]);
        assert!((m.a() - expected).abs().max() < 1e-12);
        assert_eq!(m.b().column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert!(m.eigenvalues().iter().all(|l| l.re < STABILITY_TOLERANCE));
    }

    #[test]
    fn full_model_coupling() {
        let (t, lines, loads) = two_node();
        let m = assemble_full(&t, &[bus(), bus()], &lines, &[gains(), gains()], &loads).unwrap();
        let a = m.a();
        // M = [[-1], [1]]
        assert_eq!(a[(0, 6)], 1.0 / 0.2);
        assert_eq!(a[(1, 6)], -1.0 / 0.2);
        assert_eq!(a[(6, 0)], -1.0 / 5e-5);
        assert_eq!(a[(6, 1)], 1.0 / 5e-5);
        assert!(m.eigenvalues().iter().all(|l| l.re < STABILITY_TOLERANCE));
    }

    #[test]
    fn full_model_line_current_at_equilibrium() {
        let (t, lines, loads) = two_node();
        let m = assemble_full(&t, &[bus(), bus()], &lines, &[gains(), gains()], &loads).unwrap();
        let x = m.equilibrium(&DVector::from_vec(vec![401.0, 399.0])).unwrap();
        let l = m.layout();
        let dv = x[l.v().start + 1] - x[l.v().start];
        assert!((x[l.i_l().start] - dv / 0.5).abs() < 1e-9);
        // The integral action forces v = u.
        assert!((x[0] - 401.0).abs() < 1e-9);
    }

    #[test]
    fn step_size_formula() {
        let one = [Complex::new(-1.0, 0.0)];
        assert_eq!(max_step_from_spectrum(&one).unwrap(), 2.0);
        let three = [Complex::new(-1.0, 0.0), Complex::new(-2.0, 2.0), Complex::new(-2.0, -2.0)];
        assert!((max_step_from_spectrum(&three).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(max_step_from_spectrum(&[Complex::new(0.1, 0.0)]), Err(Error::Unstable(_))));
    }

    #[test]
    fn discretize_examples() {
        let layout = StateLayout::reduced(0);
        let m =
            ContinuousModel::from_matrices(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0), layout)
                .unwrap();
        let d = discretize(&m, 0.1).unwrap();
        assert!((d.a_k()[(0, 0)] - 0.9).abs() < 1e-15);
        assert_eq!(discretize(&m, 0.01).unwrap().b_k()[(0, 0)], 0.01);
        assert!(discretize(&m, 0.0).is_err());
        assert!(discretize(&m, -1.0).is_err());
    }

    #[test]
    fn lyapunov_scalar_and_zero() {
        let layout = StateLayout::reduced(0);
        let m =
            ContinuousModel::from_matrices(DMatrix::from_element(1, 1, -0.5), DMatrix::from_element(1, 1, 1.0), layout)
                .unwrap();
        let p = lyapunov_matrix(&discretize(&m, 1.0).unwrap()).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);

        let m = ContinuousModel::from_matrices(-DMatrix::identity(3, 3), DMatrix::zeros(3, 1), layout).unwrap();
        let p = lyapunov_matrix(&discretize(&m, 1.0).unwrap()).unwrap();
        assert!((p - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-14);

        let unstable =
            ContinuousModel::from_matrices(DMatrix::from_element(1, 1, -3.0), DMatrix::zeros(1, 1), layout).unwrap();
        assert!(matches!(lyapunov_matrix(&discretize(&unstable, 1.0).unwrap()), Err(Error::SpectralRadius(_))));
    }

    #[test]
    fn lyapunov_residual_on_bus_model() {
        let d = discretize(&single_bus(0.04), 0.01).unwrap();
        let p = lyapunov_matrix(&d).unwrap();
        assert!(lyapunov_residual(&d, &p) < 1e-10);
        assert!(linalg::min_symmetric_eigenvalue(&p) > 0.0);
    }

    #[test]
    fn step_examples() {
        let m = single_bus(0.04);
        let d = discretize(&m, 0.01).unwrap();
        let u = DVector::from_element(1, 400.0);
        let eq = m.equilibrium(&u).unwrap();
        let next = step(&d, &eq, &u).unwrap();
        assert!((next - &eq).amax() < 1e-9 * eq.amax());

        let zero = DVector::zeros(3);
        assert_eq!(step(&d, &zero, &DVector::zeros(1)).unwrap(), zero);
        let from_rest = step(&d, &zero, &u).unwrap();
        assert_eq!(from_rest[2], 0.01 * 400.0);
        assert!(step(&d, &DVector::zeros(2), &u).is_err());
    }

    #[test]
    fn storage_of_line_and_zero_error() {
        let layout = StateLayout { nodes: 1, lines: 1 };
        let s = storage_matrix(&gains(), &bus(), gains().dissipative_omega()).unwrap();
        let lines = [LineParams::new(1.0, 0.5).unwrap()];
        let zero = DVector::zeros(4);
        assert_eq!(interconnected_storage(layout, &zero, std::slice::from_ref(&s), &lines).unwrap(), 0.0);
        let e = DVector::from_vec(vec![0.0, 0.0, 0.0, 2.0]);
        assert_eq!(interconnected_storage(layout, &e, &[s], &lines).unwrap(), 2.0);
    }

    #[test]
    fn isolated_bus_storage_dissipates() {
        let m = single_bus(0.04);
        let g = gains();
        let s = storage_matrix(&g, &bus(), g.dissipative_omega()).unwrap();
        let u = DVector::from_element(1, 400.0);
        let eq = m.equilibrium(&u).unwrap();
        let mut x = &eq + DVector::from_vec(vec![5.0, -3.0, 0.2]);
        let dt = 1e-5;
        let storage = |x: &DVector<f64>| {
            let e = x - &eq;
            s.evaluate(e[0], e[1], e[2])
        };
        for _ in 0..20_000 {
            let e = &x - &eq;
            let de = m.derivative(&x, &u);
            // dS/dt = 2 x̃ᵀ S ẋ
            let sv = s.matrix() * nalgebra::Vector3::new(e[0], e[1], e[2]);
            let rate = 2.0 * (sv[0] * de[0] + sv[1] * de[1] + sv[2] * de[2]);
            assert!(rate <= 1e-8, "storage rate {rate}");
            x = integrate_rk4(&m, &x, &u, dt, 1);
        }
        assert!(storage(&x) < 1e-3 * storage(&(&eq + DVector::from_vec(vec![5.0, -3.0, 0.2]))));
    }
}
