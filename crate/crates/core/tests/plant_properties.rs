use hocbf_gp::plant::{
    acc_dynamics, lqr_gain, rk4_step, road_profile, suspension_dynamics, AccModel, AccParams, ControlAffine,
    RoadProfile, SuspensionModel, SuspensionParams,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #[test]
    fn suspension_is_superposition_of_state_input_and_road(
        x in prop::collection::vec(-0.2f64..0.2, 4),
        y in prop::collection::vec(-0.2f64..0.2, 4),
        u in -500.0f64..500.0,
        d in -0.1f64..0.1,
        s in -3.0f64..3.0,
    ) {
        let p = SuspensionParams::NOMINAL;
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
        let lhs = suspension_dynamics(&sum, u, d, &p);
        let fx = suspension_dynamics(&x, 0.0, 0.0, &p);
        let fy = suspension_dynamics(&y, 0.0, 0.0, &p);
        let fu = suspension_dynamics(&[0.0; 4], u, 0.0, &p);
        let fd = suspension_dynamics(&[0.0; 4], 0.0, d, &p);
        for i in 0..4 {
            let rhs = fx[i] + s * fy[i] + fu[i] + fd[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn suspension_model_matches_its_linearization(x in prop::collection::vec(-0.2f64..0.2, 4), u in -500.0f64..500.0) {
        let p = SuspensionParams::TRUE;
        let (a, b) = p.linearization();
        let model = SuspensionModel { params: p, road: None };
        let lin = &a * DVector::from_column_slice(&x) + &b * u;
        let f = model.field(&x, &[u], 0.0);
        for i in 0..4 {
            prop_assert!((f[i] - lin[i]).abs() <= 1e-9 * (1.0 + lin[i].abs()));
        }
    }

    #[test]
    fn acc_model_is_control_affine(v in 0.0f64..40.0, z in 0.0f64..150.0, u in -3000.0f64..3000.0) {
        let p = AccParams::TRUE;
        let model = AccModel { params: p };
        let f = model.field(&[v, z], &[u], 0.0);
        let direct = acc_dynamics(&[v, z], u, &p);
        for i in 0..2 {
            prop_assert!((f[i] - direct[i]).abs() <= 1e-12 * (1.0 + direct[i].abs()));
        }
        prop_assert!((direct[1] - (p.v0 - v)).abs() <= 1e-12 * (1.0 + v));
    }

    #[test]
    fn road_bump_stays_in_its_window(t in -1.0f64..5.0, amplitude in 0.0f64..0.2, start in 0.0f64..2.0, width in 0.1f64..2.0) {
        let d = road_profile(t, &RoadProfile::Bump { amplitude, start, width });
        prop_assert!((0.0..=amplitude).contains(&d));
        if t < start || t > start + width {
            prop_assert_eq!(d, 0.0);
        }
    }
}

#[test]
fn rk4_error_is_fourth_order() {
    // x' = -x + u on [0, 1] with u held constant
    let field = |x: &[f64], u: &[f64], _t: f64| vec![-x[0] + u[0]];
    let exact = |x0: f64, u: f64, t: f64| u + (x0 - u) * (-t).exp();
    let error = |steps: usize| {
        let dt = 1.0 / steps as f64;
        let mut x = vec![2.0];
        for k in 0..steps {
            x = rk4_step(field, &x, &[0.5], k as f64 * dt, dt).unwrap();
        }
        (x[0] - exact(2.0, 0.5, 1.0)).abs()
    };
    let ratio = error(10) / error(20);
    assert!((ratio - 16.0).abs() < 1.0, "halving the step divided the error by {ratio}");
}

#[test]
fn rk4_integrates_time_varying_fields() {
    // x' = cos t
    let field = |_x: &[f64], _u: &[f64], t: f64| vec![t.cos()];
    let dt = 1e-2;
    let mut x = vec![0.0];
    for k in 0..200 {
        x = rk4_step(field, &x, &[], k as f64 * dt, dt).unwrap();
    }
    assert!((x[0] - 2.0f64.sin()).abs() < 1e-10);
    assert!(rk4_step(field, &x, &[], 0.0, 0.0).is_err());
}

#[test]
fn lqr_closed_loop_is_stable_and_solves_riccati() {
    for p in [SuspensionParams::NOMINAL, SuspensionParams::TRUE] {
        let (a, b) = p.linearization();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1e4, 1e2, 1.0, 1.0]));
        let r = DMatrix::from_element(1, 1, 1e-4);
        let (k, pm) = lqr_gain(&a, &b, &q, &r).unwrap();
        let closed = &a - &b * &k;
        let eig = closed.complex_eigenvalues();
        assert!(eig.iter().all(|z| z.re < 0.0), "unstable closed loop {eig:?}");
        let residual = a.transpose() * &pm + &pm * &a - &pm * &b * r.clone().try_inverse().unwrap() * b.transpose() * &pm + &q;
        assert!(residual.norm() <= 1e-7 * (1.0 + q.norm() + pm.norm() * a.norm()), "riccati residual {}", residual.norm());
        assert!((&pm - pm.transpose()).amax() <= 1e-9 * pm.amax());
        assert!(pm.clone().cholesky().is_some());
    }
}

#[test]
fn lqr_matches_the_scalar_closed_form() {
    // a' = a x + b u: p = (a + sqrt(a^2 + b^2 q / r)) r / b^2
    let (a, b, q, r) = (0.7, 2.0, 3.0, 0.5);
    let (k, _) = lqr_gain(
        &DMatrix::from_element(1, 1, a),
        &DMatrix::from_element(1, 1, b),
        &DMatrix::from_element(1, 1, q),
        &DMatrix::from_element(1, 1, r),
    )
    .unwrap();
    let p = (a + (a * a + b * b * q / r).sqrt()) * r / (b * b);
    assert!((k[(0, 0)] - b * p / r).abs() < 1e-10);
}
