mod common;

use prefdiff::denoiser::{ArchConfig, Condition, ConditionSpace};
use prefdiff::losses::NoiseDraw;
use prefdiff::toyworld::{CpoTriplet, DpoPair};
use prefdiff::trainer::TimePolicy;
use prefdiff::variancelab::*;
use prefdiff::{DenoiserParams, NoiseSchedule};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn model(seed: u64) -> DenoiserParams {
    let p = DenoiserParams::init(common::small_arch(8), seed).unwrap();
    common::perturbed(&p, 0.3, &mut common::rng(&format!("vl/model/{seed}")))
}

fn continuous_model(seed: u64) -> DenoiserParams {
    let arch = ArchConfig {
        condition: ConditionSpace::Continuous { dim: 2 },
        ..common::small_arch(8)
    };
    let p = DenoiserParams::init(arch, seed).unwrap();
    common::perturbed(&p, 0.3, &mut common::rng(&format!("vl/cmodel/{seed}")))
}

fn point(r: &mut prefdiff::rng::Rng) -> Vec<f64> {
    (0..2).map(|_| StandardNormal.sample(&mut *r)).collect()
}

fn cpo_examples(n: usize, r: &mut prefdiff::rng::Rng) -> Vec<PreferenceExample> {
    (0..n)
        .map(|_| {
            let a = r.random_range(0..8);
            let b = (a + r.random_range(1..8)) % 8;
            PreferenceExample::Cpo(CpoTriplet {
                x0: point(r),
                c_w: Condition::Discrete(a),
                c_l: Condition::Discrete(b),
            })
        })
        .collect()
}

fn dpo_examples(n: usize, r: &mut prefdiff::rng::Rng) -> Vec<PreferenceExample> {
    (0..n)
        .map(|_| {
            PreferenceExample::Dpo(DpoPair {
                x0_w: point(r),
                x0_l: point(r),
                c: Condition::Discrete(r.random_range(0..8)),
                score_w: 1.0,
                score_l: 0.0,
                quality_w: 0.0,
                quality_l: 0.0,
            })
        })
        .collect()
}

fn swapped(ex: &PreferenceExample) -> PreferenceExample {
    match ex {
        PreferenceExample::Cpo(t) => PreferenceExample::Cpo(CpoTriplet {
            x0: t.x0.clone(),
            c_w: t.c_l.clone(),
            c_l: t.c_w.clone(),
        }),
        PreferenceExample::Dpo(p) => PreferenceExample::Dpo(DpoPair {
            x0_w: p.x0_l.clone(),
            x0_l: p.x0_w.clone(),
            ..p.clone()
        }),
    }
}

fn oracle_score(theta: &DenoiserParams, s: &NoiseSchedule, x0: &[f64], c: &Condition, t: usize, eps: &[f64]) -> f64 {
    let a = s.alpha_bar(t);
    let x_t: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e).collect();
    let cb = prefdiff::denoiser::ConditionBatch::given(theta.arch(), std::slice::from_ref(c)).unwrap();
    let pred = theta
        .predict_eps(&prefdiff::Tensor::new(vec![1, 2], x_t).unwrap(), &[t], &cb)
        .unwrap();
    -pred.row(0).iter().zip(eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>()
}

#[test]
fn score_difference_matches_scalar_oracle() {
    let s = NoiseSchedule::default_linear();
    let mut r = common::rng("vl/oracle");
    for seed in 0..5 {
        let theta = model(seed);
        for ex in cpo_examples(10, &mut r).iter().chain(&dpo_examples(10, &mut r)) {
            let t = r.random_range(1..=1000);
            let eps = point(&mut r);
            let got = score_difference(&theta, &s, ex, t, &eps).unwrap();
            let want = match ex {
                PreferenceExample::Cpo(tr) => {
                    oracle_score(&theta, &s, &tr.x0, &tr.c_w, t, &eps) - oracle_score(&theta, &s, &tr.x0, &tr.c_l, t, &eps)
                }
                PreferenceExample::Dpo(p) => {
                    oracle_score(&theta, &s, &p.x0_w, &p.c, t, &eps) - oracle_score(&theta, &s, &p.x0_l, &p.c, t, &eps)
                }
            };
            assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }
}

#[test]
fn score_difference_is_antisymmetric_and_zero_on_identical_branches() {
    let s = NoiseSchedule::default_linear();
    let theta = model(1);
    let mut r = common::rng("vl/antisym");
    for ex in cpo_examples(20, &mut r).iter().chain(&dpo_examples(20, &mut r)) {
        let t = r.random_range(1..=1000);
        let eps = point(&mut r);
        let a = score_difference(&theta, &s, ex, t, &eps).unwrap();
        let b = score_difference(&theta, &s, &swapped(ex), t, &eps).unwrap();
        assert_eq!(a, -b);
    }
    let same_c = PreferenceExample::Cpo(CpoTriplet {
        x0: vec![0.3, -0.2],
        c_w: Condition::Discrete(4),
        c_l: Condition::Discrete(4),
    });
    let same_x = PreferenceExample::Dpo(DpoPair {
        x0_w: vec![0.3, -0.2],
        x0_l: vec![0.3, -0.2],
        c: Condition::Discrete(2),
        score_w: 0.0,
        score_l: 0.0,
        quality_w: 0.0,
        quality_l: 0.0,
    });
    for ex in [same_c, same_x] {
        assert_eq!(score_difference(&theta, &s, &ex, 321, &[0.5, 1.5]).unwrap(), 0.0);
    }
}

#[test]
fn mixed_batches_are_rejected() {
    let s = NoiseSchedule::default_linear();
    let theta = model(2);
    let mut r = common::rng("vl/mixed");
    let c = cpo_examples(1, &mut r);
    let d = dpo_examples(1, &mut r);
    let draw = NoiseDraw::sample(2, 2, 1000, &mut r);
    assert!(score_differences(&theta, &s, &[&c[0], &d[0]], &draw).is_err());
    let mut both = c.clone();
    both.extend(d);
    assert!(empirical_variance(&theta, &s, &both, TimePolicy::Uniform, 1000, 0).is_err());
}

#[test]
fn too_few_draws_states_the_minimum() {
    let s = NoiseSchedule::default_linear();
    let theta = model(3);
    let ex = cpo_examples(4, &mut common::rng("vl/few"));
    let err = empirical_variance(&theta, &s, &ex, TimePolicy::Uniform, 999, 0).unwrap_err();
    assert!(err.to_string().contains(&MIN_VARIANCE_DRAWS.to_string()), "{err}");
}

#[test]
fn variance_estimates_are_deterministic_and_non_negative() {
    let s = NoiseSchedule::default_linear();
    let theta = model(4);
    let ex = dpo_examples(16, &mut common::rng("vl/det"));
    let a = empirical_variance(&theta, &s, &ex, TimePolicy::Uniform, 2000, 9).unwrap();
    let b = empirical_variance(&theta, &s, &ex, TimePolicy::Uniform, 2000, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.pooled_var >= 0.0 && a.per_example_var >= 0.0 && a.conditional_var.unwrap() >= 0.0);
    assert_eq!((a.n_draws, a.n_examples), (2000, 16));
    let fixed = empirical_variance(&theta, &s, &ex, TimePolicy::Fixed(500), 2000, 9).unwrap();
    assert!(fixed.conditional_var.is_none());
}

#[test]
fn pooled_variance_matches_a_direct_recomputation() {
    let s = NoiseSchedule::default_linear();
    let theta = model(5);
    let ex = cpo_examples(7, &mut common::rng("vl/direct"));
    let est = empirical_variance(&theta, &s, &ex, TimePolicy::Fixed(250), 1000, 3).unwrap();
    let mut vals = Vec::new();
    for i in 0..1000 {
        let mut r = prefdiff::rng::item_stream("variance", 3, "draw", i);
        let eps = point(&mut r);
        vals.push(score_difference(&theta, &s, &ex[i % 7], 250, &eps).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / 1000.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
    assert!((est.mean - mean).abs() < 1e-12 * (1.0 + mean.abs()));
    assert!((est.pooled_var - var).abs() < 1e-10 * (1.0 + var));
}

#[test]
fn variance_estimate_converges_with_more_draws() {
    let s = NoiseSchedule::default_linear();
    let theta = model(6);
    let ex = dpo_examples(32, &mut common::rng("vl/conv"));
    let big = empirical_variance(&theta, &s, &ex, TimePolicy::Fixed(500), 40_000, 100).unwrap();
    for seed in 0..3 {
        let small = empirical_variance(&theta, &s, &ex, TimePolicy::Fixed(500), 4000, seed).unwrap();
        let tol = 4.0 * (small.pooled_stderr.powi(2) + big.pooled_stderr.powi(2)).sqrt();
        assert!((small.pooled_var - big.pooled_var).abs() < tol);
    }
    assert!(big.pooled_stderr < 0.5 * empirical_variance(&theta, &s, &ex, TimePolicy::Fixed(500), 4000, 0).unwrap().pooled_stderr);
}

#[test]
fn variance_report_round_trips_fields() {
    let s = NoiseSchedule::default_linear();
    let theta = model(7);
    let mut r = common::rng("vl/report");
    let c = cpo_examples(8, &mut r);
    let d = dpo_examples(8, &mut r);
    let rep = compare_variance(&theta, &s, &c, &d, TimePolicy::Fixed(100), 1000, 11).unwrap();
    assert_eq!(rep.n_samples, 1000);
    assert_eq!(rep.seed, 11);
    assert!(rep.var_cpo >= 0.0 && rep.var_dpo >= 0.0 && rep.gradient_norm_proxy > 0.0);
    assert_eq!(rep.cpo_lower(), rep.var_cpo < rep.var_dpo);
    let line = rep.to_record();
    assert!(line.contains("var_cpo") && line.contains("var_dpo"), "{line}");
}

fn baseline() -> Baseline {
    Baseline {
        x_t: vec![0.4, -0.7],
        c: vec![0.6, 0.8],
        t: 300,
        eps: vec![0.2, 0.9],
    }
}

#[test]
fn disabled_nuisance_leaves_only_the_control_term() {
    let theta = continuous_model(1);
    let f = ControlledFactors::gaussian(2, 2, 0.05, 0.0);
    let d = decomposition_estimate(&theta, &baseline(), &f, 5000, 1).unwrap();
    assert_eq!(d.v_nuis, 0.0);
    assert_eq!(d.v_cross, 0.0);
    assert!(d.v_ctrl > 0.0);
    assert!((d.joint - d.v_ctrl).abs() <= 1e-12 * d.v_ctrl);
    assert!((d.joint_exact - d.v_ctrl).abs() < 0.05 * d.v_ctrl);
}

#[test]
fn independent_factors_have_negligible_cross_term() {
    let theta = continuous_model(2);
    for seed in 0..5 {
        let f = ControlledFactors::gaussian(2, 2, 0.05, 0.05);
        let d = decomposition_estimate(&theta, &baseline(), &f, 4000, seed).unwrap();
        assert!(d.v_cross.abs() < 3.0 * d.stderr_cross, "{} vs {}", d.v_cross, d.stderr_cross);
        let parts = d.v_ctrl + d.v_nuis + 2.0 * d.v_cross;
        assert!((parts - d.joint).abs() < 1e-9 * d.joint);
    }
}

#[test]
fn doubling_nuisance_scale_quadruples_v_nuis() {
    let theta = continuous_model(3);
    let one = decomposition_estimate(&theta, &baseline(), &ControlledFactors::gaussian(2, 2, 0.05, 0.05), 3000, 4).unwrap();
    let two = decomposition_estimate(&theta, &baseline(), &ControlledFactors::gaussian(2, 2, 0.05, 0.10), 3000, 4).unwrap();
    // Same stream, so the draws are exact rescalings.
    assert!((two.v_nuis / one.v_nuis - 4.0).abs() < 1e-9);
    assert!((two.v_ctrl - one.v_ctrl).abs() < 1e-12 * one.v_ctrl);
}

#[test]
fn gradient_matches_the_exact_score_difference_for_small_deviations() {
    let theta = continuous_model(4);
    let f = ControlledFactors::gaussian(2, 2, 1e-3, 1e-3);
    let d = decomposition_estimate(&theta, &baseline(), &f, 2000, 5).unwrap();
    assert!((d.joint_exact / d.joint - 1.0).abs() < 1e-3);
}

#[test]
fn degenerate_factors_and_discrete_models_are_rejected() {
    let theta = continuous_model(5);
    let constant = ControlledFactors {
        ctrl: Some(Box::new(|_: &mut prefdiff::rng::Rng| vec![0.0, 0.0, 0.1, 0.1])),
        nuis: None,
    };
    assert!(decomposition_estimate(&theta, &baseline(), &constant, 100, 0).is_err());
    let f = ControlledFactors::gaussian(2, 2, 0.1, 0.1);
    assert!(decomposition_estimate(&model(0), &baseline(), &f, 100, 0).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
    #[test]
    fn antisymmetry_holds_exactly(
        x in proptest::array::uniform4(-3.0f64..3.0),
        e in proptest::array::uniform2(-3.0f64..3.0),
        a in 0usize..8, b in 0usize..8, t in 1usize..=1000, dpo: bool,
    ) {
        let s = NoiseSchedule::default_linear();
        let theta = model(8);
        let ex = if dpo {
            PreferenceExample::Dpo(DpoPair {
                x0_w: x[..2].to_vec(), x0_l: x[2..].to_vec(), c: Condition::Discrete(a),
                score_w: 0.0, score_l: 0.0, quality_w: 0.0, quality_l: 0.0,
            })
        } else {
            PreferenceExample::Cpo(CpoTriplet { x0: x[..2].to_vec(), c_w: Condition::Discrete(a), c_l: Condition::Discrete(b) })
        };
        let fwd = score_difference(&theta, &s, &ex, t, &e).unwrap();
        let back = score_difference(&theta, &s, &swapped(&ex), t, &e).unwrap();
        proptest::prop_assert_eq!(fwd, -back);
    }
}
