use std::sync::Arc;

use hocbf_gp::barrier::{elementary_symmetric, gamma_vector, halfspace_qp_filter, HocbfDesign};
use hocbf_gp::plant::{AccGapChain, AccModel, AccParams, ControlAffine};
use hocbf_gp::poly::{recursive_certificate, SyntheticPair};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Coefficients of `prod (s + k_i)`, highest power first, by repeated multiplication.
fn expand(gains: &[f64]) -> Vec<f64> {
    let mut p = vec![1.0];
    for &k in gains {
        let mut next = vec![0.0; p.len() + 1];
        for (i, c) in p.iter().enumerate() {
            next[i] += c;
            next[i + 1] += k * c;
        }
        p = next;
    }
    p
}

#[test]
fn vieta_matches_polynomial_expansion() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(1000));
    runner
        .run(&prop::collection::vec(0.01f64..20.0, 1..=5), |gains| {
            let e = elementary_symmetric(&gains).unwrap();
            let direct = expand(&gains);
            for (i, v) in e.iter().enumerate() {
                let d = direct[i + 1];
                prop_assert!((v - d).abs() <= 1e-10 * d.abs().max(1e-300), "e_{} {} vs {}", i + 1, v, d);
            }
            Ok(())
        })
        .unwrap();
}

proptest! {
    #[test]
    fn gamma_ends_in_one_and_reverses_coefficients(gains in prop::collection::vec(0.1f64..10.0, 1..=5)) {
        let g = gamma_vector(&gains).unwrap();
        let direct = expand(&gains);
        let r = gains.len();
        prop_assert_eq!(g[r - 1], 1.0);
        for i in 1..r {
            // gamma_i multiplies L_f^i h, whose coefficient in the expansion is e_{r-i}
            prop_assert!((g[i - 1] - direct[r - i]).abs() <= 1e-12 * direct[r - i].abs());
        }
    }

    #[test]
    fn decomposition_holds_on_synthetic_pairs(seed in any::<u64>(), r in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = SyntheticPair::random(r, &mut rng);
        let gains: Vec<f64> = (1..=r).map(|i| 0.5 + i as f64 * 0.7).collect();
        let design = HocbfDesign::new(Arc::new(pair.nominal_chain().unwrap()), gains.clone()).unwrap();
        let gamma = design.gamma().to_vec();
        for k in 0..10 {
            let x: Vec<f64> = (0..r).map(|i| ((seed as f64 + (k * r + i) as f64) * 0.37).sin()).collect();
            let u = [((seed % 97) as f64 / 97.0 - 0.5) * 4.0];
            let truth = recursive_certificate(&pair.truth, &pair.barrier, &gains, &x, &u);
            let nominal = design.certificate_terms(&x).unwrap().evaluate(&gamma, &u);
            let (df, dg) = pair.residuals(&x).unwrap();
            let delta: f64 = gamma.iter().zip(&df).map(|(g, d)| g * d).sum::<f64>() + dg[0] * u[0];
            prop_assert!((truth - nominal - delta).abs() <= 1e-8);
        }
    }

    #[test]
    fn certificate_terms_match_recursion(seed in any::<u64>(), r in 1usize..=4, u in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = SyntheticPair::random(r, &mut rng);
        let gains: Vec<f64> = (1..=r).map(|i| 0.3 * i as f64 + 0.2).collect();
        let design = HocbfDesign::new(Arc::new(pair.nominal_chain().unwrap()), gains.clone()).unwrap();
        let x: Vec<f64> = (0..r).map(|i| ((seed % 1000) as f64 * 0.01 + i as f64).cos()).collect();
        let terms = design.certificate_terms(&x).unwrap();
        let explicit = terms.zf.iter().zip(design.gamma()).map(|(a, b)| a * b).sum::<f64>()
            + terms.constant
            + terms.zg[0] * u;
        let recursive = recursive_certificate(&pair.nominal, &pair.barrier, &gains, &x, &[u]);
        prop_assert!((explicit - recursive).abs() <= 1e-10 * (1.0 + recursive.abs()));
        prop_assert_eq!(design.zeta_chain(&x)[0], pair.barrier.eval(&x));
    }

    #[test]
    fn halfspace_filter_is_grid_minimizer(u_nom in -5.0f64..5.0, a in -3.0f64..3.0, b in -5.0f64..5.0) {
        prop_assume!(a.abs() > 0.2);
        let u = halfspace_qp_filter(&[u_nom], &[a], b).unwrap()[0];
        prop_assert!(a * u + b >= 0.0);
        let step = 1e-3;
        let mut best: Option<f64> = None;
        for i in 0..=400_000 {
            let v = -200.0 + i as f64 * step;
            if a * v + b >= 0.0 && best.is_none_or(|w| (v - u_nom).abs() < (w - u_nom).abs()) {
                best = Some(v);
            }
        }
        prop_assert!((u - best.unwrap()).abs() <= step);
    }

    #[test]
    fn halfspace_filter_is_minimal_in_several_inputs(
        u_nom in prop::collection::vec(-5.0f64..5.0, 3),
        a in prop::collection::vec(-3.0f64..3.0, 3),
        b in -5.0f64..5.0,
        probe in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let u = halfspace_qp_filter(&u_nom, &a, b).unwrap();
        let dist = |v: &[f64]| v.iter().zip(&u_nom).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let feasible = |v: &[f64]| v.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() + b >= 0.0;
        prop_assert!(feasible(&u));
        if feasible(&probe) {
            prop_assert!(dist(&u) <= dist(&probe) + 1e-9);
        }
    }
}

#[test]
fn acc_zeta_chain_follows_its_recursion() {
    let p = AccParams::NOMINAL;
    let chain = AccGapChain { params: p, min_gap: 30.0 };
    let design = HocbfDesign::from_characteristic(Arc::new(chain), &[4.0, 3.75]).unwrap();
    let model = AccModel { params: p };
    let k1 = design.gains()[0];
    for (x, u) in [([20.0, 100.0], 0.0), ([25.0, 40.0], -500.0), ([10.0, 31.0], 300.0)] {
        // d/dt zeta_0 + k_1 zeta_0 = zeta_1 along the nominal flow
        let f = model.field(&x, &[u], 0.0);
        let eps = 1e-4;
        let plus: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a - eps * b).collect();
        let d0 = (design.zeta_chain(&plus)[0] - design.zeta_chain(&minus)[0]) / (2.0 * eps);
        let z = design.zeta_chain(&x);
        assert!((d0 + k1 * z[0] - z[1]).abs() < 1e-6 * (1.0 + z[1].abs()));
        // and the certificate is d/dt zeta_1 + k_2 zeta_1
        let d1 = (design.zeta_chain(&plus)[1] - design.zeta_chain(&minus)[1]) / (2.0 * eps);
        let k2 = design.gains()[1];
        let cert = design.certificate_terms(&x).unwrap().evaluate(design.gamma(), &[u]);
        assert!((d1 + k2 * z[1] - cert).abs() < 1e-5 * (1.0 + cert.abs()));
    }
}
