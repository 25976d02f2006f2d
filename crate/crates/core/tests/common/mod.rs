#![allow(dead_code)]

use prefdiff::denoiser::{ArchConfig, Condition, ConditionSpace};
use prefdiff::losses::{CpoBatch, DpoBatch, NoiseDraw};
use prefdiff::rng::{self, Rng};
use prefdiff::{DenoiserParams, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn small_arch(k: usize) -> ArchConfig {
    ArchConfig {
        condition: ConditionSpace::Discrete { k },
        hidden: 12,
        depth: 2,
        time_features: 4,
        cond_embed: 4,
        ..ArchConfig::default()
    }
}

/// Copy of `p` with Gaussian noise of the given scale added to every weight.
pub fn perturbed(p: &DenoiserParams, scale: f64, r: &mut Rng) -> DenoiserParams {
    let mut q = p.clone();
    for i in 0..q.tensors().len() {
        for v in q.tensor_mut(i) {
            let z: f64 = StandardNormal.sample(r);
            *v += scale * z;
        }
    }
    q
}

pub fn random_points(n: usize, r: &mut Rng) -> Tensor {
    let d: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(vec![n, 2], d).unwrap()
}

pub fn distinct_bins(n: usize, k: usize, r: &mut Rng) -> (Vec<Condition>, Vec<Condition>) {
    let mut w = Vec::new();
    let mut l = Vec::new();
    for _ in 0..n {
        let a = r.random_range(0..k);
        let b = (a + r.random_range(1..k)) % k;
        w.push(Condition::Discrete(a));
        l.push(Condition::Discrete(b));
    }
    (w, l)
}

pub fn cpo_instance(p: &DenoiserParams, n: usize, steps: usize, r: &mut Rng) -> (CpoBatch<f64>, NoiseDraw<f64>) {
    let k = match p.arch().condition {
        ConditionSpace::Discrete { k } => k,
        _ => unreachable!(),
    };
    let (w, l) = distinct_bins(n, k, r);
    let batch = CpoBatch::new(p, random_points(n, r), &w, &l).unwrap();
    (batch, NoiseDraw::sample(n, 2, steps, r))
}

pub fn dpo_instance(p: &DenoiserParams, n: usize, steps: usize, r: &mut Rng) -> (DpoBatch<f64>, NoiseDraw<f64>) {
    let (c, _) = distinct_bins(n, 8, r);
    let batch = DpoBatch::new(p, random_points(n, r), random_points(n, r), &c).unwrap();
    (batch, NoiseDraw::sample(n, 2, steps, r))
}

pub fn rng(name: &str) -> Rng {
    rng::stream(name)
}
