use dcmpc_core::qp::{kkt_residuals, solve_qp, QpProblem, QpSettings, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Exact solution by enumerating every assignment of the constraints to
/// {free, lower, upper} and keeping the best KKT point with valid signs.
fn enumerate(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut sides = Vec::new();
        let mut c = code;
        for i in 0..m {
            match c % 3 {
                1 if p.l[i].is_finite() => sides.push((i, p.l[i], -1.0)),
                2 if p.u[i].is_finite() => sides.push((i, p.u[i], 1.0)),
                0 => {}
                _ => {
                    sides.clear();
                    sides.push((usize::MAX, 0.0, 0.0));
                    break;
                }
            }
            c /= 3;
        }
        if sides.first().is_some_and(|s| s.0 == usize::MAX) {
            continue;
        }
        let k = sides.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.f));
        for (r, &(i, bound, _)) in sides.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = p.a[(i, j)];
                kkt[(j, n + r)] = p.a[(i, j)];
            }
            rhs[n + r] = bound;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let az = &p.a * &z;
        let feasible = (0..m).all(|i| az[i] >= p.l[i] - 1e-9 && az[i] <= p.u[i] + 1e-9);
        let signs = sides.iter().enumerate().all(|(r, &(_, _, s))| sol[n + r] * s >= -1e-9);
        if feasible && signs {
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|b| obj < b.1) {
                best = Some((z, obj));
            }
        }
    }
    best
}

fn random_qp() -> impl Strategy<Value = QpProblem> {
    (1usize..=5).prop_flat_map(|n| {
        (0usize..=n.min(3)).prop_flat_map(move |m| {
            (
                prop::collection::vec(-1.0f64..1.0, n * n),
                prop::collection::vec(0.1f64..2.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-1.0f64..1.0, m * n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec((0.0f64..2.0, 0.0f64..2.0, 0u8..4), m),
            )
                .prop_map(move |(r, d, f, a, z0, widths)| {
                    let r = DMatrix::from_vec(n, n, r);
                    let h = &r * r.transpose() + DMatrix::from_diagonal(&DVector::from_vec(d));
                    let a = DMatrix::from_vec(m, n, a);
                    let az0 = &a * DVector::from_vec(z0);
                    let mut l = DVector::zeros(m);
                    let mut u = DVector::zeros(m);
                    for (i, &(lo, hi, kind)) in widths.iter().enumerate() {
                        l[i] = if kind == 1 { f64::NEG_INFINITY } else { az0[i] - lo };
                        u[i] = if kind == 2 {
                            f64::INFINITY
                        } else if kind == 3 {
                            l[i]
                        } else {
                            az0[i] + hi
                        };
                    }
                    QpProblem::new(h, DVector::from_vec(f), a, l, u).unwrap()
                })
        })
    })
}

fn tight() -> QpSettings {
    QpSettings { eps_abs: 1e-9, eps_rel: 1e-9, ..QpSettings::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn matches_enumeration(p in random_qp()) {
        let (z_ref, obj_ref) = enumerate(&p).expect("generated problems are feasible");
        let sol = solve_qp(&p, &tight()).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Solved);
        prop_assert!((sol.objective - obj_ref).abs() <= 1e-6 * obj_ref.abs().max(1.0), "{} vs {}", sol.objective, obj_ref);
        prop_assert!((&sol.z - &z_ref).amax() <= 1e-5);
        let kkt = kkt_residuals(&p, &sol.z, &sol.y);
        prop_assert!(kkt.primal <= 1e-7 && kkt.dual <= 1e-6 && kkt.complementarity <= 1e-6, "{:?}", kkt);
    }

    #[test]
    fn warm_start_reaches_the_same_point(p in random_qp(), shift in prop::collection::vec(-0.5f64..0.5, 5)) {
        let cold = solve_qp(&p, &tight()).unwrap();
        let mut solver = QpSolver::new(p.clone(), tight()).unwrap();
        let n = p.num_vars();
        let guess = &cold.z + DVector::from_iterator(n, shift.iter().copied().take(n));
        solver.warm_start(&guess, &DVector::zeros(p.num_constraints())).unwrap();
        let warm = solver.solve();
        prop_assert_eq!(warm.status, QpStatus::Solved);
        prop_assert!((warm.objective - cold.objective).abs() <= 1e-6 * cold.objective.abs().max(1.0));
    }
}

#[test]
fn infeasible_constraints_are_detected() {
    let h = DMatrix::identity(2, 2);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let p =
        QpProblem::new(h, DVector::zeros(2), a, DVector::from_vec(vec![1.0, -3.0]), DVector::from_vec(vec![2.0, -2.0]))
            .unwrap();
    let sol = solve_qp(&p, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::PrimalInfeasible);
}

#[test]
fn unbounded_direction_is_detected() {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let p = QpProblem::new(
        h,
        DVector::from_vec(vec![0.0, -1.0]),
        a,
        DVector::from_element(1, -1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let sol = solve_qp(&p, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::DualInfeasible);
}
