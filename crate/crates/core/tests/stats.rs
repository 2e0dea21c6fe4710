mod common;

use brainage::cohort::Gender;
use brainage::stats::*;
use common::stats::{orthogonal_covariate, planted, PLANTED};
use common::{rng, uniform};
use proptest::prelude::*;

#[test]
fn planted_coefficients_are_recovered() {
    let mut r = rng(100);
    let names = [TERM_INTERCEPT, TERM_AGE, TERM_AGE_DIFF, TERM_INTERACTION, TERM_GENDER];
    let mut hits = [0usize; 5];
    let reps = 100;
    for _ in 0..reps {
        let p = planted(&mut r, 600);
        let fit = ols_interaction(&p.score, &p.age, &p.age_diff, &p.gender).unwrap();
        assert_eq!(fit.dof, 595);
        for (i, name) in names.iter().enumerate() {
            let t = fit.term(name).unwrap();
            assert!((0.0..=1.0).contains(&t.p));
            if (t.beta - PLANTED[i]).abs() <= 3.0 * t.std_error {
                hits[i] += 1;
            }
        }
    }
    assert!(hits.iter().all(|&h| h >= 97), "{hits:?}");
}

#[test]
fn strong_effect_has_small_p() {
    let p = planted(&mut rng(7), 600);
    let fit = ols_interaction(&p.score, &p.age, &p.age_diff, &p.gender).unwrap();
    assert!(fit.term(TERM_AGE_DIFF).unwrap().p < 1e-6);
    assert!(fit.term(TERM_AGE).unwrap().t < 0.0);
}

#[test]
fn too_few_rows_is_rejected() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    let err = ols_interaction(&v, &v, &v, &[Gender::M; 5]).unwrap_err();
    assert!(matches!(err, StatsError::InsufficientData(_)));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn residuals_are_orthogonal_to_design(seed in any::<u64>(), n in 8usize..200) {
        let p = planted(&mut rng(seed), n);
        let fit = ols_interaction(&p.score, &p.age, &p.age_diff, &p.gender).unwrap();
        let inter: Vec<f64> = p.age.iter().zip(&p.age_diff).map(|(a, d)| a * d).collect();
        let g: Vec<f64> = p.gender.iter().map(|g| g.indicator()).collect();
        let ones = vec![1.0; n];
        let rnorm = fit.residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
        for col in [&ones, &p.age, &p.age_diff, &inter, &g] {
            let d: f64 = col.iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
            let cnorm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(d.abs() <= 1e-8 * cnorm * rnorm);
        }
    }

    #[test]
    fn partial_with_orthogonal_covariate_is_pearson(seed in any::<u64>(), n in 6usize..300) {
        let mut r = rng(seed);
        let x = uniform(&mut r, n, -1.0, 1.0);
        let y: Vec<f64> = x.iter().zip(uniform(&mut r, n, -1.0, 1.0)).map(|(a, b)| 0.5 * a + b).collect();
        let c = orthogonal_covariate(&uniform(&mut r, n, -1.0, 1.0), &x, &y);
        let pc = partial_correlation(&x, &y, &[&c]).unwrap();
        prop_assert!((pc.r - pearson(&x, &y).unwrap()).abs() <= 1e-10);
        prop_assert_eq!(pc.dof, n - 3);
    }

    #[test]
    fn t_cdf_is_monotone_and_symmetric(t in -50.0f64..50.0, dof in 1.0f64..500.0) {
        let f = student_t_cdf(t, dof);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f + student_t_cdf(-t, dof) - 1.0).abs() < 1e-12);
        prop_assert!(student_t_cdf(t + 0.1, dof) >= f);
    }
}
