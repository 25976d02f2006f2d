use prefdiff::diffcore::Tensor;
use prefdiff::schedule::{MeanPrefactor, NoiseSchedule};
use prefdiff::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Sched = NoiseSchedule<f64>;

fn v(x: &[f64]) -> Tensor<f64> {
    Tensor::vector(x.to_vec()).unwrap()
}

#[test]
fn single_step_schedule() {
    let s = Sched::linear(1, 0.1, 0.1).unwrap();
    assert_eq!(s.alpha_bars(), &[0.9]);
    assert_eq!(s.alpha_bar(0), 1.0);
    // alpha_bar_0 = 1 makes the first posterior variance zero.
    assert_eq!(s.posterior_var(1), 0.0);
}

#[test]
fn default_schedule_endpoint() {
    // Oracle: direct product of (1 - beta) over the inclusive linspace.
    let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    let s = Sched::default_linear();
    assert!((s.alpha_bar(1000) - direct).abs() < 1e-18);
    assert!(s.alpha_bar(1000) < 5e-5);
    assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
}

#[test]
fn bad_bounds_rejected() {
    assert!(Sched::linear(10, 0.0, 0.02).is_err());
    assert!(Sched::linear(0, 1e-4, 0.02).is_err());
    assert!(Sched::linear(10, 0.03, 0.02).is_err());
    assert!(Sched::linear(10, 1e-4, 1.0).is_err());
}

#[test]
fn schedule_invariants() {
    let s = Sched::default_linear();
    for t in 1..=s.steps() {
        assert!(s.posterior_var(t) <= s.beta(t));
        if t > 1 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }
    assert!(s.alpha_bar(1000) < 0.05);
}

#[test]
fn q_sample_degenerate_inputs() {
    let s = Sched::default_linear();
    let zero = v(&[0.0, 0.0]);
    let x0 = v(&[0.3, -1.2]);
    let eps = v(&[1.5, 0.25]);
    let a = s.alpha_bar(300);
    let xt = s.q_sample(&zero, 300, &eps).unwrap();
    assert_eq!(xt.data(), &[(1.0 - a).sqrt() * 1.5, (1.0 - a).sqrt() * 0.25]);
    let xt = s.q_sample(&x0, 300, &zero).unwrap();
    assert_eq!(xt.data(), &[a.sqrt() * 0.3, a.sqrt() * -1.2]);
    assert!(matches!(s.q_sample(&x0, 0, &eps), Err(Error::TimestepOutOfRange { .. })));
    assert!(s.q_sample(&x0, 1001, &eps).is_err());
}

#[test]
fn tiny_beta_step_is_identity() {
    let s = Sched::from_betas(&[0.01, 1e-12]).unwrap();
    let xt = v(&[0.8, -0.4]);
    let eps = v(&[0.3, 0.9]);
    let prev = s.posterior_step(&xt, 2, &eps, None).unwrap();
    for (a, b) in prev.data().iter().zip(xt.data()) {
        assert!((a - b).abs() < 1e-9);
    }
    // The injected noise is bounded by sqrt(posterior_var) <= sqrt(beta).
    let noisy = s.posterior_step(&xt, 2, &eps, Some(&v(&[1.0, -1.0]))).unwrap();
    for (a, b) in noisy.data().iter().zip(xt.data()) {
        assert!((a - b).abs() <= 1e-6 + 1e-9);
    }
}

#[test]
fn true_eps_at_first_step_recovers_x0() {
    let s = Sched::default_linear();
    let x0 = v(&[0.6, -0.8]);
    let eps = v(&[-1.1, 0.4]);
    let x1 = s.q_sample(&x0, 1, &eps).unwrap();
    let noise = v(&[5.0, 5.0]);
    let back = s.posterior_step(&x1, 1, &eps, Some(&noise)).unwrap();
    for (a, b) in back.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn zero_noise_returns_mean() {
    let s = Sched::default_linear();
    let xt = v(&[0.2, 0.1]);
    let eh = v(&[0.5, -0.5]);
    let mean = s.posterior_mean(&xt, 500, &eh).unwrap();
    let stepped = s.posterior_step(&xt, 500, &eh, Some(&v(&[0.0, 0.0]))).unwrap();
    assert_eq!(mean, stepped);
    let b = s.beta(500);
    let a = s.alpha_bar(500);
    let expect = (0.2 - b / (1.0 - a).sqrt() * 0.5) / (1.0 - b).sqrt();
    assert_eq!(mean.data()[0], expect);
}

#[test]
fn printed_prefactor_differs() {
    let s = Sched::default_linear();
    let p = s.clone().with_prefactor(MeanPrefactor::Printed);
    let xt = v(&[1.0, 1.0]);
    let eh = v(&[0.0, 0.0]);
    let a = s.posterior_mean(&xt, 800, &eh).unwrap().data()[0];
    let b = p.posterior_mean(&xt, 800, &eh).unwrap().data()[0];
    assert!((a - 1.0 / (1.0 - s.beta(800)).sqrt()).abs() < 1e-15);
    assert!((b - 1.0 / (1.0 - s.beta(800))).abs() < 1e-15);
}

#[test]
fn snr_weight_values() {
    // alpha_bar = 0.5 after a single step with beta = 0.5.
    let s = Sched::from_betas(&[0.5]).unwrap();
    assert_eq!(s.snr_weight(1).unwrap(), (1.0, 0.5));
    let s = Sched::default_linear();
    let (l1, w) = s.snr_weight(1).unwrap();
    assert!(l1 > 1e3);
    assert_eq!(w, 0.5);
    assert!(s.snr_weight(0).is_err());
}

#[test]
fn ancestral_chain_with_oracle_denoiser() {
    let s = Sched::default_linear();
    let x0 = [0.7, -0.7];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = v(&[StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]);
    for t in (1..=s.steps()).rev() {
        let a = s.alpha_bar(t);
        let eps: Vec<f64> =
            x.data().iter().zip(x0).map(|(xt, x0)| (xt - a.sqrt() * x0) / (1.0 - a).sqrt()).collect();
        x = s.posterior_step(&x, t, &v(&eps), None).unwrap();
    }
    for (a, b) in x.data().iter().zip(x0) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn two_stage_marginal_matches_direct() {
    // x_t then the analytic transition t -> t': x_t' = sqrt(ab_t'/ab_t) x_t
    // + sqrt(1 - ab_t'/ab_t) z. Compare moments with direct x_t'.
    let s = Sched::default_linear();
    let (t, tp) = (200usize, 700usize);
    let x0 = 0.8f64;
    let ratio = s.alpha_bar(tp) / s.alpha_bar(t);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        let xt = s.q_sample(&v(&[x0]), t, &v(&[e])).unwrap().data()[0];
        let xtp = ratio.sqrt() * xt + (1.0 - ratio).sqrt() * z;
        sum += xtp;
        sq += xtp * xtp;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let target_var = 1.0 - s.alpha_bar(tp);
    let se_mean = (target_var / n as f64).sqrt();
    let se_var = target_var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((mean - s.alpha_bar(tp).sqrt() * x0).abs() < 3.0 * se_mean);
    assert!((var - target_var).abs() < 3.0 * se_var);
}

#[test]
fn q_sample_moments_match_the_forward_marginal() {
    let s = NoiseSchedule::<f64>::default_linear();
    let x0 = 0.7;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in [1usize, 500, 1000] {
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                s.q_sample(&v(&[x0]), t, &v(&[e])).unwrap().data()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let a = s.alpha_bar(t);
        let se_mean = ((1.0 - a) / n as f64).sqrt();
        let se_var = (1.0 - a) * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - a.sqrt() * x0).abs() < 3.0 * se_mean, "t={t}");
        assert!((var - (1.0 - a)).abs() < 3.0 * se_var, "t={t}");
    }
}

proptest::proptest! {
    #[test]
    fn linear_schedules_keep_their_invariants(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = Sched::linear(steps, lo, lo + span).unwrap();
        for t in 1..=steps {
            proptest::prop_assert!(s.posterior_var(t) <= s.beta(t));
            proptest::prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let (l, w) = s.snr_weight(t).unwrap();
            proptest::prop_assert_eq!(w, 0.5);
            proptest::prop_assert!((l - s.alpha_bar(t) / (1.0 - s.alpha_bar(t))).abs() <= 1e-12 * l.max(1.0));
        }
    }
}
