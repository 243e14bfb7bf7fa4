use hocbf_gp::barrier::{gamma_vector, halfspace_qp_filter, CertificateTerms};
use hocbf_gp::filter::{
    assemble_safety_cone, build_program, feasibility_necessary, feasibility_sufficient, filter_step, s_matrix, solve,
    FilterStatus, SafetyConeData,
};
use hocbf_gp::socp::SolverSettings;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    cert: CertificateTerms,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    gamma: Vec<f64>,
    u_nom: Vec<f64>,
}

fn instance(seed: u64, r: usize, m: usize, noise: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..3.0)).collect();
    let gamma = gamma_vector(&gains).unwrap();
    let q = r + m;
    let root = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0)) * noise;
    let sigma = &root * root.transpose() + DMatrix::identity(q, q) * (0.01 * noise * noise + 1e-6);
    Instance {
        cert: CertificateTerms {
            zf: (0..r).map(|_| rng.random_range(-3.0..3.0)).collect(),
            zg: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
            constant: rng.random_range(-2.0..2.0),
        },
        mu: DVector::from_fn(q, |_, _| rng.random_range(-0.3..0.3)),
        sigma,
        gamma,
        u_nom: (0..m).map(|_| rng.random_range(-4.0..4.0)).collect(),
    }
}

fn cone(inst: &Instance, beta: f64) -> SafetyConeData {
    assemble_safety_cone(&inst.cert, &inst.mu, &inst.sigma, beta, &inst.gamma).unwrap()
}

/// Posterior mean and standard deviation of the certificate at `u`, computed from scratch.
fn chance_terms(inst: &Instance, u: &[f64]) -> (f64, f64) {
    let y = DVector::from_iterator(inst.gamma.len() + u.len(), inst.gamma.iter().chain(u).copied());
    let mean = inst.cert.evaluate(&inst.gamma, u) + inst.mu.dot(&y);
    let var = (y.transpose() * &inst.sigma * &y)[(0, 0)];
    (mean, var.max(0.0).sqrt())
}

fn settings() -> SolverSettings {
    SolverSettings::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimal_inputs_satisfy_the_chance_constraint(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, noise in 0.01f64..1.0, beta in 0.0f64..3.0,
    ) {
        let inst = instance(seed, r, m, noise);
        let safety = cone(&inst, beta);
        let out = filter_step(&inst.u_nom, &safety, &[], &settings()).unwrap();
        if out.status == FilterStatus::Optimal {
            let (mean, std) = chance_terms(&inst, &out.u);
            let scale = 1.0 + mean.abs() + beta * std;
            prop_assert!(mean - beta * std >= -1e-8 * scale, "chance form {} {}", mean, std);
            prop_assert!(safety.slack(&out.u) >= -1e-8 * scale);
        }
    }

    #[test]
    fn necessary_and_sufficient_conditions_agree_with_the_solver(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, noise in 0.05f64..2.0, beta in 0.1f64..4.0,
    ) {
        let inst = instance(seed, r, m, noise);
        let safety = cone(&inst, beta);
        let necessary = feasibility_necessary(&safety.phi(), &safety.sigma, beta).unwrap();
        let s = s_matrix(&safety);
        let (certified, _) = feasibility_sufficient(&s.view((r, r), (m, m)).into_owned());
        let out = solve(&build_program(&inst.u_nom, &safety, &[]), &settings()).unwrap();
        if necessary > 1e-9 {
            prop_assert_ne!(out.status, FilterStatus::Optimal);
        }
        if certified {
            prop_assert_eq!(out.status, FilterStatus::Optimal);
            prop_assert!(necessary <= 1e-9);
        }
    }

    #[test]
    fn s_quadratic_form_matches_the_cone(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, beta in 0.0f64..3.0,
        u in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let inst = instance(seed, r, m, 0.5);
        let safety = cone(&inst, beta);
        let u = &u[..m];
        let y = safety.regressor(u);
        let lhs = (y.transpose() * s_matrix(&safety) * &y)[(0, 0)];
        let uv = DVector::from_column_slice(u);
        let rhs = (&safety.a * &uv + &safety.b).norm_squared() - (safety.c.dot(&uv) + safety.d).powi(2);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs() + rhs.abs()));
    }

    #[test]
    fn deviation_grows_with_confidence(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, noise in 0.01f64..0.5,
        b1 in 0.0f64..2.0, db in 0.0f64..1.0,
    ) {
        let inst = instance(seed, r, m, noise);
        let lo = filter_step(&inst.u_nom, &cone(&inst, b1), &[], &settings()).unwrap();
        let hi = filter_step(&inst.u_nom, &cone(&inst, b1 + db), &[], &settings()).unwrap();
        if lo.status == FilterStatus::Optimal && hi.status == FilterStatus::Optimal {
            prop_assert!(hi.t >= lo.t - 1e-6 * (1.0 + lo.t), "{} < {}", hi.t, lo.t);
        }
    }

    #[test]
    fn zero_confidence_is_the_mean_projection(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, noise in 0.01f64..1.0,
    ) {
        let inst = instance(seed, r, m, noise);
        let safety = cone(&inst, 0.0);
        let out = filter_step(&inst.u_nom, &safety, &[], &settings()).unwrap();
        match halfspace_qp_filter(&inst.u_nom, safety.c.as_slice(), safety.d) {
            Ok(expected) => {
                prop_assert_eq!(out.status, FilterStatus::Optimal);
                for (a, b) in out.u.iter().zip(&expected) {
                    prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{} vs {}", a, b);
                }
            }
            Err(_) => prop_assert_ne!(out.status, FilterStatus::Optimal),
        }
    }

    #[test]
    fn epigraph_is_tight_at_the_solution(
        seed in any::<u64>(), r in 1usize..=3, m in 1usize..=2, noise in 0.01f64..1.0, beta in 0.0f64..2.0,
    ) {
        let inst = instance(seed, r, m, noise);
        let safety = cone(&inst, beta);
        let out = solve(&build_program(&inst.u_nom, &safety, &[]), &settings()).unwrap();
        if out.status == FilterStatus::Optimal {
            let dist = out.u.iter().zip(&inst.u_nom).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!((out.t - dist).abs() <= 1e-7 * (1.0 + dist), "t {} distance {}", out.t, dist);
        }
    }
}

#[test]
fn inactive_constraint_returns_the_nominal_input() {
    let inst = instance(3, 2, 1, 0.01);
    let mut inst = inst;
    inst.cert.constant = 100.0;
    let safety = cone(&inst, 1.0);
    assert!(safety.slack(&inst.u_nom) > 0.0);
    let out = filter_step(&inst.u_nom, &safety, &[], &settings()).unwrap();
    assert_eq!(out.u, inst.u_nom);
    assert_eq!(out.iterations, 0);
    assert_eq!(out.status, FilterStatus::Optimal);
}
