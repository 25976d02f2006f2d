mod common;

use prefdiff::denoiser::{ArchConfig, Condition, ConditionBatch, ConditionSpace};
use prefdiff::rng::{item_stream, Rng};
use prefdiff::sampling::*;
use prefdiff::schedule::NoiseSchedule;
use prefdiff::{denoiser, DenoiserParams, Tensor};
use rand_distr::{Distribution, StandardNormal};

fn model() -> DenoiserParams {
    let p = DenoiserParams::init(common::small_arch(8), 3).unwrap();
    common::perturbed(&p, 0.2, &mut common::rng("sampling/model"))
}

fn conds(n: usize) -> Vec<Condition> {
    (0..n).map(|i| Condition::Discrete(i % 8)).collect()
}

fn streams(n: usize, seed: u64) -> Vec<Rng> {
    (0..n).map(|i| item_stream("sampling", seed, "row", i)).collect()
}

#[test]
fn matches_a_hand_written_reverse_chain() {
    let s = NoiseSchedule::linear(6, 0.05, 0.3).unwrap();
    let p = model();
    let c = conds(3);
    let w = 1.5;
    let got = ancestral_sample(&p, &s, &c, &mut streams(3, 1), &SamplerConfig { guidance: w, workers: 1 }).unwrap();
    let mut rs = streams(3, 1);
    for (i, r) in rs.iter_mut().enumerate() {
        let mut x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut *r)).collect();
        for t in (1..=6).rev() {
            let xt = Tensor::new(vec![1, 2], x.clone()).unwrap();
            let ec = p.predict_eps(&xt, &[t], &ConditionBatch::given(p.arch(), &c[i..=i]).unwrap()).unwrap();
            let en = p.predict_eps(&xt, &[t], &ConditionBatch::null(p.arch(), 1).unwrap()).unwrap();
            let b = s.beta(t);
            let a = s.alpha_bar(t);
            let a_prev = s.alpha_bar(t - 1);
            let var = (1.0 - a_prev) / (1.0 - a) * b;
            let z: Vec<f64> = if t > 1 { (0..2).map(|_| StandardNormal.sample(&mut *r)).collect() } else { vec![0.0; 2] };
            for k in 0..2 {
                let e = en.data()[k] + w * (ec.data()[k] - en.data()[k]);
                x[k] = (x[k] - b / (1.0 - a).sqrt() * e) / (1.0 - b).sqrt() + var.sqrt() * z[k];
            }
        }
        for k in 0..2 {
            assert!((got.row(i)[k] - x[k]).abs() < 1e-12, "row {i}: {} vs {}", got.row(i)[k], x[k]);
        }
    }
}

#[test]
fn output_is_independent_of_workers_and_batch_composition() {
    let s = NoiseSchedule::linear(40, 1e-3, 0.2).unwrap();
    let p = model();
    let n = 2 * CHUNK_ROWS + 37;
    let c = conds(n);
    let one = ancestral_sample(&p, &s, &c, &mut streams(n, 2), &SamplerConfig { guidance: 2.0, workers: 1 }).unwrap();
    let four = ancestral_sample(&p, &s, &c, &mut streams(n, 2), &SamplerConfig { guidance: 2.0, workers: 4 }).unwrap();
    assert_eq!(one, four);
    // Row 300 alone, with its own stream, reproduces its batched value.
    let mut solo_stream = vec![item_stream("sampling", 2, "row", 300)];
    let solo = ancestral_sample(&p, &s, &c[300..301], &mut solo_stream, &SamplerConfig::default()).unwrap();
    assert_eq!(solo.row(0), one.row(300));
}

#[test]
fn rejects_mismatched_streams_and_negative_guidance() {
    let s = NoiseSchedule::linear(5, 1e-3, 0.2).unwrap();
    let p = model();
    assert!(ancestral_sample(&p, &s, &conds(3), &mut streams(2, 0), &SamplerConfig::default()).is_err());
    let cfg = SamplerConfig { guidance: -0.5, workers: 1 };
    assert!(ancestral_sample(&p, &s, &conds(3), &mut streams(3, 0), &cfg).is_err());
}

#[test]
fn generic_core_runs_in_single_precision() {
    let arch = ArchConfig {
        condition: ConditionSpace::Discrete { k: 8 },
        ..common::small_arch(8)
    };
    let p64 = DenoiserParams::init(arch, 4).unwrap();
    let p32 = denoiser::DenoiserParams::<f32>::init(arch, 4).unwrap();
    let s64 = NoiseSchedule::<f64>::linear(20, 1e-3, 0.2).unwrap();
    let s32 = NoiseSchedule::<f32>::linear(20, 1e-3, 0.2).unwrap();
    let c = conds(16);
    let a = ancestral_sample(&p64, &s64, &c, &mut streams(16, 5), &SamplerConfig::default()).unwrap();
    let b = ancestral_sample(&p32, &s32, &c, &mut streams(16, 5), &SamplerConfig::default()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-3, "{x} vs {y}");
    }
}
