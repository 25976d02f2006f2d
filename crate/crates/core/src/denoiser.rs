//! Conditional noise-prediction network.
//!
//! A fixed-width MLP reads `[x_t, time features, condition embedding]` and
//! predicts the noise that produced `x_t`. One extra embedding (the "null"
//! condition) stands in for "no condition" and enables classifier-free
//! guidance.

use std::io::{Read, Write};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// A control signal: a bin index or a real vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Condition {
    pub fn kind(&self) -> ConditionKind {
        match self {
            Condition::Discrete(_) => ConditionKind::Discrete,
            Condition::Continuous(_) => ConditionKind::Continuous,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Discrete,
    Continuous,
}

/// How conditions enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionSpace {
    /// `k` bins plus one reserved null row at index `k`.
    Discrete { k: usize },
    /// Real vectors of length `dim`, linearly embedded.
    Continuous { dim: usize },
}

impl ConditionSpace {
    pub fn kind(&self) -> ConditionKind {
        match self {
            ConditionSpace::Discrete { .. } => ConditionKind::Discrete,
            ConditionSpace::Continuous { .. } => ConditionKind::Continuous,
        }
    }

    pub fn validate(&self, c: &Condition) -> Result<()> {
        match (self, c) {
            (ConditionSpace::Discrete { k }, Condition::Discrete(b)) if b < k => Ok(()),
            (ConditionSpace::Discrete { k }, Condition::Discrete(b)) => Err(Error::InvalidCondition(format!(
                "bin {b} outside 0..{k}"
            ))),
            (ConditionSpace::Continuous { dim }, Condition::Continuous(v)) => {
                if v.len() != *dim {
                    Err(Error::InvalidCondition(format!("expected {dim} values, got {}", v.len())))
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(Error::InvalidCondition("non-finite condition vector".into()))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::InvalidCondition(format!(
                "{:?} condition given to a {:?} model",
                c.kind(),
                self.kind()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub data_dim: usize,
    pub condition: ConditionSpace,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Sinusoidal timestep features (even).
    pub time_features: usize,
    pub cond_embed: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            condition: ConditionSpace::Discrete { k: 8 },
            hidden: 128,
            depth: 3,
            time_features: 16,
            cond_embed: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let cond_size = match self.condition {
            ConditionSpace::Discrete { k } => k,
            ConditionSpace::Continuous { dim } => dim,
        };
        if self.data_dim == 0 || self.hidden == 0 || self.depth == 0 || self.cond_embed == 0 || cond_size == 0 {
            return Err(Error::InvalidArch(format!("all dimensions must be positive: {self:?}")));
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return Err(Error::InvalidArch("time_features must be a positive even number".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.data_dim + self.time_features + self.cond_embed
    }

    fn cond_tensor_count(&self) -> usize {
        match self.condition {
            ConditionSpace::Discrete { .. } => 1,
            ConditionSpace::Continuous { .. } => 3,
        }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = match self.condition {
            ConditionSpace::Discrete { k } => vec![vec![k + 1, self.cond_embed]],
            ConditionSpace::Continuous { dim } => {
                vec![vec![dim, self.cond_embed], vec![self.cond_embed], vec![self.cond_embed]]
            }
        };
        let mut width = self.input_width();
        for _ in 0..self.depth {
            shapes.push(vec![width, self.hidden]);
            shapes.push(vec![self.hidden]);
            width = self.hidden;
        }
        shapes.push(vec![width, self.data_dim]);
        shapes.push(vec![self.data_dim]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Sinusoidal features of integer timesteps, one row per entry of `ts`.
pub fn time_features<S: Scalar>(ts: &[usize], width: usize) -> Tensor<S> {
    let half = width / 2;
    let mut data = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push(S::of((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push(S::of((t as f64 * freq).cos()));
        }
    }
    Tensor::new(vec![ts.len(), width], data).expect("sinusoids are finite")
}

/// Conditions for a batch, already validated against an architecture.
/// `None` entries select the null condition.
#[derive(Clone, Debug)]
pub enum ConditionBatch<S> {
    Discrete(Vec<usize>),
    Continuous {
        values: Tensor<S>,
        /// `[batch, embed]` with 1 where a condition is given, 0 for null.
        given: Tensor<S>,
        any_null: bool,
    },
}

impl<S: Scalar> ConditionBatch<S> {
    pub fn new(arch: &ArchConfig, conds: &[Option<&Condition>]) -> Result<Self> {
        match arch.condition {
            ConditionSpace::Discrete { k } => {
                let mut idx = Vec::with_capacity(conds.len());
                for c in conds {
                    match c {
                        Some(c) => {
                            arch.condition.validate(c)?;
                            let Condition::Discrete(b) = c else { unreachable!() };
                            idx.push(*b);
                        }
                        None => idx.push(k),
                    }
                }
                Ok(ConditionBatch::Discrete(idx))
            }
            ConditionSpace::Continuous { dim } => {
                let mut values = Vec::with_capacity(conds.len() * dim);
                let mut given = Vec::with_capacity(conds.len() * arch.cond_embed);
                let mut any_null = false;
                for c in conds {
                    match c {
                        Some(c) => {
                            arch.condition.validate(c)?;
                            let Condition::Continuous(v) = c else { unreachable!() };
                            values.extend(v.iter().map(|&x| S::of(x)));
                            given.extend(std::iter::repeat_n(S::one(), arch.cond_embed));
                        }
                        None => {
                            any_null = true;
                            values.extend(std::iter::repeat_n(S::zero(), dim));
                            given.extend(std::iter::repeat_n(S::zero(), arch.cond_embed));
                        }
                    }
                }
                Ok(ConditionBatch::Continuous {
                    values: Tensor::new(vec![conds.len(), dim], values)?,
                    given: Tensor::new(vec![conds.len(), arch.cond_embed], given)?,
                    any_null,
                })
            }
        }
    }

    /// All rows conditioned (no nulls).
    pub fn given(arch: &ArchConfig, conds: &[Condition]) -> Result<Self> {
        let refs: Vec<_> = conds.iter().map(Some).collect();
        Self::new(arch, &refs)
    }

    pub fn null(arch: &ArchConfig, n: usize) -> Result<Self> {
        Self::new(arch, &vec![None; n])
    }

    pub fn len(&self) -> usize {
        match self {
            ConditionBatch::Discrete(i) => i.len(),
            ConditionBatch::Continuous { values, .. } => values.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights of the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<S> {
    arch: ArchConfig,
    seed: u64,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> DenoiserParams<S> {
    /// Deterministic initialization: weights and biases uniform in
    /// `±1/sqrt(fan_in)`, embedding rows uniform in `±1`.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(&format!("init/{seed}"));
        let n_cond = arch.cond_tensor_count();
        let mut out = Vec::new();
        let mut bound = 1.0;
        for (i, shape) in arch.shapes().into_iter().enumerate() {
            bound = match (i < n_cond, shape.as_slice()) {
                (true, [fan_in, _]) if arch.condition.kind() == ConditionKind::Continuous => {
                    1.0 / (*fan_in as f64).sqrt()
                }
                (true, _) => 1.0,
                (false, [fan_in, _]) => 1.0 / (*fan_in as f64).sqrt(),
                // Biases take the bound of the weight they follow.
                (false, _) => bound,
            };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| S::of(r.random_range(-bound..bound))).collect();
            out.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            arch,
            seed,
            tensors: out,
        })
    }

    pub fn from_tensors(arch: ArchConfig, seed: u64, tensors: Vec<Tensor<S>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::InvalidArch("parameter shapes do not match the architecture".into()));
        }
        Ok(Self { arch, seed, tensors })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    /// Mutable access for constructing special-purpose networks in tests
    /// and oracles.
    pub fn tensor_mut(&mut self, i: usize) -> &mut [S] {
        self.tensors[i].data_mut()
    }

    /// Index of the first MLP weight; the tensors before it are the
    /// condition embedding.
    pub fn first_layer_index(&self) -> usize {
        self.arch.cond_tensor_count()
    }

    /// Places every tensor on `g`, trainable or constant.
    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: bool) -> Vec<Var<'g, S>> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Differentiable noise prediction with parameters already bound to
    /// `x_t`'s graph.
    pub fn forward<'g>(
        &self,
        bound: &[Var<'g, S>],
        x_t: Var<'g, S>,
        ts: &[usize],
        conds: &ConditionBatch<S>,
    ) -> Result<Var<'g, S>> {
        let g = x_t.graph();
        let (rows, cols) = x_t.value().dims2("predict_eps")?;
        if cols != self.arch.data_dim || ts.len() != rows || conds.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "predict_eps",
                lhs: vec![rows, cols],
                rhs: vec![ts.len(), conds.len(), self.arch.data_dim],
            });
        }
        if bound.len() != self.tensors.len() {
            return Err(Error::InvalidArgument("bound parameter count mismatch".into()));
        }
        let emb = match conds {
            ConditionBatch::Discrete(idx) => bound[0].gather_rows(idx)?,
            ConditionBatch::Continuous { values, given, any_null } => {
                let lin = g.constant(values.clone()).matmul(bound[0])?.add_row(bound[1])?;
                if *any_null {
                    let mask = g.constant(given.clone());
                    let inv = g.constant(given.map(|m| S::one() - m));
                    let null = bound[2].broadcast_rows(rows)?;
                    lin.mul(mask)?.add(null.mul(inv)?)?
                } else {
                    lin
                }
            }
        };
        let tf = g.constant(time_features(ts, self.arch.time_features));
        let mut h = Var::concat(&[x_t, tf, emb])?;
        let layers = &bound[self.arch.cond_tensor_count()..];
        for l in 0..self.arch.depth {
            h = h.matmul(layers[2 * l])?.add_row(layers[2 * l + 1])?.silu()?;
        }
        let d = self.arch.depth;
        h.matmul(layers[2 * d])?.add_row(layers[2 * d + 1])
    }

    /// Non-differentiable prediction for a `[batch, data_dim]` input.
    /// Not screened: a non-finite row stays confined to its own output row.
    pub fn predict_eps(&self, x_t: &Tensor<S>, ts: &[usize], conds: &ConditionBatch<S>) -> Result<Tensor<S>> {
        let g = Graph::new().with_screening(false);
        let bound = self.bind(&g, false);
        let x = g.constant(x_t.clone());
        let out = self.forward(&bound, x, ts, conds)?;
        let v = out.value().clone();
        Ok(v)
    }

    /// Classifier-free guidance: `eps_null + w (eps_c - eps_null)`.
    pub fn guided_eps(&self, x_t: &Tensor<S>, ts: &[usize], conds: &[Condition], w: S) -> Result<Tensor<S>> {
        if !(w >= S::zero()) {
            return Err(Error::InvalidArgument("guidance scale must be non-negative".into()));
        }
        let (rows, cols) = x_t.dims2("guided_eps")?;
        if conds.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "guided_eps",
                lhs: vec![rows, cols],
                rhs: vec![conds.len()],
            });
        }
        // Conditional and null branches share one batched pass.
        let mut slots: Vec<Option<&Condition>> = conds.iter().map(Some).collect();
        slots.extend(std::iter::repeat_n(None, rows));
        let batch = ConditionBatch::new(&self.arch, &slots)?;
        let mut xx = x_t.data().to_vec();
        xx.extend_from_slice(x_t.data());
        let mut tt = ts.to_vec();
        tt.extend_from_slice(ts);
        let both = self.predict_eps(&Tensor::raw(vec![2 * rows, cols], xx), &tt, &batch)?;
        let (cond, null) = both.data().split_at(rows * cols);
        let out = cond.iter().zip(null).map(|(&c, &u)| u + w * (c - u)).collect();
        Ok(Tensor::raw(vec![rows, cols], out))
    }

    /// Frozen deep copy used as the reference model.
    pub fn clone_as_reference(&self) -> FrozenDenoiser<S> {
        FrozenDenoiser(self.clone())
    }

    /// SHA-256 of the weight bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// All weights as one flat vector in storage order.
    pub fn flat(&self) -> Vec<S> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Read-only reference network. It can be evaluated but never bound as
/// trainable, so no loss can route a gradient into it.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDenoiser<S>(DenoiserParams<S>);

impl<S: Scalar> FrozenDenoiser<S> {
    pub fn params(&self) -> &DenoiserParams<S> {
        &self.0
    }

    pub fn predict_eps(&self, x_t: &Tensor<S>, ts: &[usize], conds: &ConditionBatch<S>) -> Result<Tensor<S>> {
        self.0.predict_eps(x_t, ts, conds)
    }

    pub fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

const MAGIC: &[u8; 8] = b"PREFDIFF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, architecture header, then the
/// flat weights as little-endian `f64`.
pub fn write_checkpoint<S: Scalar>(params: &DenoiserParams<S>, mut w: impl Write) -> Result<()> {
    let a = &params.arch;
    let (kind, size) = match a.condition {
        ConditionSpace::Discrete { k } => (0u8, k),
        ConditionSpace::Continuous { dim } => (1u8, dim),
    };
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [a.data_dim, size, a.hidden, a.depth, a.time_features, a.cond_embed] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[kind])?;
    w.write_all(&params.seed.to_le_bytes())?;
    let flat = params.flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(mut r: impl Read) -> Result<DenoiserParams<S>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let seed = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let condition = match kind[0] {
        0 => ConditionSpace::Discrete { k: dims[1] },
        1 => ConditionSpace::Continuous { dim: dims[1] },
        other => return Err(Error::Checkpoint(format!("unknown condition kind {other}"))),
    };
    let arch = ArchConfig {
        data_dim: dims[0],
        condition,
        hidden: dims[2],
        depth: dims[3],
        time_features: dims[4],
        cond_embed: dims[5],
    };
    arch.validate()?;
    if count != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "weight count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let mut tensors = Vec::new();
    for shape in arch.shapes() {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            data.push(S::of(f64::from_le_bytes(u64buf)));
        }
        tensors.push(Tensor::new(shape, data).map_err(|_| Error::Checkpoint("non-finite weight".into()))?);
    }
    DenoiserParams::from_tensors(arch, seed, tensors)
}
