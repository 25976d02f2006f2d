//! Ancestral sampling with classifier-free guidance.
//!
//! Each row owns its random stream, and rows are processed in fixed-size
//! chunks, so a sample depends only on its condition and its stream.

use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, DenoiserParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Rows per chunk. Fixed so results never depend on the worker count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub guidance: f64,
    /// Worker threads; a hint only.
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { guidance: 2.0, workers: 1 }
    }
}

/// Runs the full reverse chain `x_T -> x_0` for every condition. Row `i`
/// draws its initial noise and every step's noise from `streams[i]`.
///
/// Rows that diverge come back non-finite; callers decide what to do with them.
pub fn ancestral_sample<S: Scalar>(
    params: &DenoiserParams<S>,
    schedule: &NoiseSchedule<S>,
    conds: &[Condition],
    streams: &mut [Rng],
    cfg: &SamplerConfig,
) -> Result<Tensor<S>> {
    if conds.len() != streams.len() {
        return Err(Error::InvalidArgument(format!(
            "{} conditions but {} random streams",
            conds.len(),
            streams.len()
        )));
    }
    let dim = params.arch().data_dim;
    let chunks: Vec<(&[Condition], &mut [Rng])> = conds.chunks(CHUNK_ROWS).zip(streams.chunks_mut(CHUNK_ROWS)).collect();
    let workers = cfg.workers.max(1).min(chunks.len().max(1));
    let w = S::of(cfg.guidance);

    let mut outputs: Vec<Result<Vec<S>>> = Vec::with_capacity(chunks.len());
    if workers == 1 {
        for (c, r) in chunks {
            outputs.push(sample_chunk(params, schedule, c, r, w, dim));
        }
    } else {
        let mut slots: Vec<Option<Result<Vec<S>>>> = (0..chunks.len()).map(|_| None).collect();
        let mut work: Vec<(usize, (&[Condition], &mut [Rng]))> = chunks.into_iter().enumerate().collect();
        let per = work.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            while !work.is_empty() {
                let take = per.min(work.len());
                let batch: Vec<_> = work.drain(..take).collect();
                handles.push(scope.spawn(move || {
                    batch
                        .into_iter()
                        .map(|(i, (c, r))| (i, sample_chunk(params, schedule, c, r, w, dim)))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (i, out) in h.join().expect("sampler worker panicked") {
                    slots[i] = Some(out);
                }
            }
        });
        outputs.extend(slots.into_iter().map(|s| s.expect("every chunk sampled")));
    }

    let mut data = Vec::with_capacity(conds.len() * dim);
    for out in outputs {
        data.extend(out?);
    }
    Ok(Tensor::raw(vec![conds.len(), dim], data))
}

fn sample_chunk<S: Scalar>(
    params: &DenoiserParams<S>,
    schedule: &NoiseSchedule<S>,
    conds: &[Condition],
    streams: &mut [Rng],
    w: S,
    dim: usize,
) -> Result<Vec<S>> {
    let rows = conds.len();
    let normal = |streams: &mut [Rng]| -> Tensor<S> {
        let mut d = Vec::with_capacity(rows * dim);
        for r in streams.iter_mut() {
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(r);
                d.push(S::of(z));
            }
        }
        Tensor::raw(vec![rows, dim], d)
    };
    let mut x = normal(streams);
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; rows];
        let eps = params.guided_eps(&x, &ts, conds, w)?;
        let z = if t > 1 { Some(normal(streams)) } else { None };
        x = schedule.posterior_step(&x, t, &eps, z.as_ref())?;
    }
    Ok(x.into_data())
}
