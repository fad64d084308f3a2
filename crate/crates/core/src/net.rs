//! The three parametric modules: fusion network, visual critic, and a small
//! per-pixel classification head, plus the named parameter sets they train.
//!
//! Networks are pure tape programs: parameters are bound onto a [`Tape`] as
//! leaves, `forward` wires the ops, and flat gradients come back in entry
//! order after `backward`. Architected for desk scale — the fusion trunk is
//! 16 channels with two dense residual blocks (dilations 1/2/3), well under
//! the 100k-parameter budget.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::SeedStream;
use crate::tensor::{Tape, Tensor, VarId};

/// Negative slope shared by every leaky ReLU in the three networks.
pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// Identity of a parameter collection; also its checkpoint name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamName {
    Omega,
    ThetaV,
    ThetaP,
}

impl ParamName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamName::Omega => "omega",
            ParamName::ThetaV => "theta_V",
            ParamName::ThetaP => "theta_P",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "omega" => Some(ParamName::Omega),
            "theta_V" => Some(ParamName::ThetaV),
            "theta_P" => Some(ParamName::ThetaP),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, uniquely named tensors for one network. Flattening concatenates
/// entries in order; `assign_flat` is its exact inverse.
#[derive(Debug, Clone)]
pub struct ParamSet {
    name: ParamName,
    entries: Vec<ParamEntry>,
    step_count: u64,
    seed: u64,
}

impl ParamSet {
    pub fn new(name: ParamName, seed: u64) -> Self {
        ParamSet {
            name,
            entries: Vec::new(),
            step_count: 0,
            seed,
        }
    }

    pub fn name(&self) -> ParamName {
        self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Usage(format!("duplicate parameter entry {name}")));
        }
        self.entries.push(ParamEntry {
            name: String::from(name),
            tensor,
        });
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("assign_flat", &[flat.len()], &[self.param_count()]));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// One SGD step: `w <- w - lr * dir`, bumping the step counter.
    pub fn apply_step(&mut self, dir: &[f64], lr: f64) -> Result<()> {
        if dir.len() != self.param_count() {
            return Err(Error::shape("apply_step", &[dir.len()], &[self.param_count()]));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            for (w, d) in e.tensor.data_mut().iter_mut().zip(&dir[off..off + n]) {
                *w -= lr * d;
            }
            off += n;
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Tape handles for one bound parameter set, in entry order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<VarId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

/// Register every entry of `params` on the tape.
pub fn bind(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Result<BoundParams> {
    let mut ids = Vec::with_capacity(params.entries.len());
    for e in &params.entries {
        ids.push(tape.leaf(e.tensor.clone(), requires_grad)?);
    }
    Ok(BoundParams { ids })
}

/// Like [`bind`] but entry `override_idx` takes an existing tape variable
/// instead of the stored tensor. Lets `grad_check` probe one entry.
pub fn bind_with_override(
    tape: &mut Tape,
    params: &ParamSet,
    override_idx: usize,
    var: VarId,
    requires_grad: bool,
) -> Result<BoundParams> {
    let mut ids = Vec::with_capacity(params.entries.len());
    for (i, e) in params.entries.iter().enumerate() {
        if i == override_idx {
            ids.push(var);
        } else {
            ids.push(tape.leaf(e.tensor.clone(), requires_grad)?);
        }
    }
    Ok(BoundParams { ids })
}

/// Flat gradient in entry order after a backward pass; entries the loss
/// never reached contribute zeros.
pub fn collect_flat_grad(tape: &Tape, bound: &BoundParams, params: &ParamSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.param_count());
    for (id, e) in bound.ids.iter().zip(&params.entries) {
        match tape.grad(*id) {
            Some(g) => out.extend_from_slice(g),
            None => out.resize(out.len() + e.tensor.numel(), 0.0),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// `(entry name, shape)` pairs in binding order.
pub type ParamSpecs = Vec<(String, Vec<usize>)>;

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => shape.iter().product(),
    }
}

/// Kaiming-style init: weights are fan-in scaled normals, biases zero.
/// Deterministic for a given `(name, seed)`.
pub fn init_params(name: ParamName, specs: &ParamSpecs, seed: u64) -> ParamSet {
    let mut rng = SeedStream::derive(seed, name.as_str());
    let mut set = ParamSet::new(name, seed);
    for (entry, shape) in specs {
        let n: usize = shape.iter().product();
        let tensor = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let std = math::sqrt(2.0 / fan_in(shape) as f64);
            let data: Vec<f64> = (0..n).map(|_| std * rng.normal()).collect();
            Tensor::new(shape, data).expect("spec shape consistent")
        };
        set.push(entry, tensor).expect("spec names unique");
    }
    set
}

pub fn zero_params(name: ParamName, specs: &ParamSpecs) -> ParamSet {
    let mut set = ParamSet::new(name, 0);
    for (entry, shape) in specs {
        set.push(entry, Tensor::zeros(shape)).expect("spec names unique");
    }
    set
}

struct Cursor<'a> {
    ids: &'a [VarId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bound: &'a BoundParams) -> Self {
        Cursor { ids: &bound.ids, pos: 0 }
    }

    fn next(&mut self) -> Result<VarId> {
        let id = self
            .ids
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Usage(String::from("parameter set does not match network layout")))?;
        self.pos += 1;
        Ok(id)
    }

    fn pair(&mut self) -> Result<(VarId, VarId)> {
        Ok((self.next()?, self.next()?))
    }
}

// ---------------------------------------------------------------------------
// Fusion network
// ---------------------------------------------------------------------------

/// Fusion network `u = F(x, y; omega)`: 3x3 stem to a 16-channel trunk, two
/// dense residual blocks with dilations 1/2/3 and a 1x1 projection back to
/// the trunk, then a 3x3 head squashed by a sigmoid into `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct FusionNet {
    pub trunk: usize,
    pub growth: usize,
}

impl Default for FusionNet {
    fn default() -> Self {
        FusionNet { trunk: 16, growth: 8 }
    }
}

impl FusionNet {
    pub fn param_specs(&self) -> ParamSpecs {
        let (t, g) = (self.trunk, self.growth);
        let mut specs: ParamSpecs = vec![
            (String::from("conv_in.w"), vec![t, 2, 3, 3]),
            (String::from("conv_in.b"), vec![t]),
        ];
        for blk in 1..=2 {
            specs.push((format!("drb{blk}.conv1.w"), vec![g, t, 3, 3]));
            specs.push((format!("drb{blk}.conv1.b"), vec![g]));
            specs.push((format!("drb{blk}.conv2.w"), vec![g, t + g, 3, 3]));
            specs.push((format!("drb{blk}.conv2.b"), vec![g]));
            specs.push((format!("drb{blk}.conv3.w"), vec![g, t + 2 * g, 3, 3]));
            specs.push((format!("drb{blk}.conv3.b"), vec![g]));
            specs.push((format!("drb{blk}.proj.w"), vec![t, t + 3 * g, 1, 1]));
            specs.push((format!("drb{blk}.proj.b"), vec![t]));
        }
        specs.push((String::from("conv_out.w"), vec![1, t, 3, 3]));
        specs.push((String::from("conv_out.b"), vec![1]));
        specs
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        init_params(ParamName::Omega, &self.param_specs(), seed)
    }

    pub fn init_zeros(&self) -> ParamSet {
        zero_params(ParamName::Omega, &self.param_specs())
    }

    fn dense_block(&self, tape: &mut Tape, trunk: VarId, cur: &mut Cursor) -> Result<VarId> {
        let (w1, b1) = cur.pair()?;
        let c1 = tape.conv2d(trunk, w1, Some(b1), 1, 1, 1)?;
        let c1 = tape.leaky_relu(c1, LEAKY_SLOPE)?;

        let (w2, b2) = cur.pair()?;
        let in2 = tape.concat_channels(&[trunk, c1])?;
        let c2 = tape.conv2d(in2, w2, Some(b2), 1, 2, 2)?;
        let c2 = tape.leaky_relu(c2, LEAKY_SLOPE)?;

        let (w3, b3) = cur.pair()?;
        let in3 = tape.concat_channels(&[trunk, c1, c2])?;
        let c3 = tape.conv2d(in3, w3, Some(b3), 1, 3, 3)?;
        let c3 = tape.leaky_relu(c3, LEAKY_SLOPE)?;

        let (wp, bp) = cur.pair()?;
        let cat = tape.concat_channels(&[trunk, c1, c2, c3])?;
        let proj = tape.conv2d(cat, wp, Some(bp), 1, 0, 1)?;
        tape.add(trunk, proj)
    }

    /// `x`, `y`: `[N, 1, H, W]` in `[0, 1]`. Returns `u`: `[N, 1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: VarId, y: VarId, params: &BoundParams) -> Result<VarId> {
        if tape.value(x).shape() != tape.value(y).shape() {
            return Err(Error::shape(
                "fusion_forward",
                tape.value(x).shape(),
                tape.value(y).shape(),
            ));
        }
        let mut cur = Cursor::new(params);
        let cat = tape.concat_channels(&[x, y])?;
        let (w_in, b_in) = cur.pair()?;
        let mut trunk = tape.conv2d(cat, w_in, Some(b_in), 1, 1, 1)?;
        trunk = tape.leaky_relu(trunk, LEAKY_SLOPE)?;
        trunk = self.dense_block(tape, trunk, &mut cur)?;
        trunk = self.dense_block(tape, trunk, &mut cur)?;
        let (w_out, b_out) = cur.pair()?;
        let pre = tape.conv2d(trunk, w_out, Some(b_out), 1, 1, 1)?;
        tape.sigmoid(pre)
    }
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

/// Anything that scores a batch of images, one scalar per sample.
/// Implemented by [`Discriminator`] and by tiny fixed critics in tests.
pub trait CriticNet {
    fn param_specs(&self) -> ParamSpecs;

    /// `u`: `[N, 1, H, W]`. Returns per-sample scores `[N]`.
    fn score(&self, tape: &mut Tape, u: VarId, params: &BoundParams) -> Result<VarId>;
}

/// Wasserstein critic: four stride-2 3x3 convs (16/32/64/64, leaky ReLU,
/// no normalization layers), global spatial mean, affine to a scalar.
#[derive(Debug, Clone, Copy, Default)]
pub struct Discriminator;

impl Discriminator {
    pub const CHANNELS: [usize; 4] = [16, 32, 64, 64];

    pub fn init(&self, seed: u64) -> ParamSet {
        init_params(ParamName::ThetaV, &self.param_specs(), seed)
    }

    pub fn init_zeros(&self) -> ParamSet {
        zero_params(ParamName::ThetaV, &self.param_specs())
    }
}

impl CriticNet for Discriminator {
    fn param_specs(&self) -> ParamSpecs {
        let mut specs = ParamSpecs::new();
        let mut c_in = 1;
        for (i, &c_out) in Self::CHANNELS.iter().enumerate() {
            specs.push((format!("conv{}.w", i + 1), vec![c_out, c_in, 3, 3]));
            specs.push((format!("conv{}.b", i + 1), vec![c_out]));
            c_in = c_out;
        }
        specs.push((String::from("head.w"), vec![c_in, 1]));
        specs.push((String::from("head.b"), vec![1]));
        specs
    }

    fn score(&self, tape: &mut Tape, u: VarId, params: &BoundParams) -> Result<VarId> {
        let sh = tape.value(u).shape().to_vec();
        if sh.len() != 4 || sh[1] != 1 {
            return Err(Error::shape("discriminator_forward", &sh, &[0, 1, 0, 0]));
        }
        if sh[2] < 16 || sh[3] < 16 {
            return Err(Error::Usage(format!(
                "discriminator_forward: spatial size must be >= 16 for four stride-2 stages, got {}x{}",
                sh[2], sh[3]
            )));
        }
        let mut cur = Cursor::new(params);
        let mut feat = u;
        for _ in Self::CHANNELS {
            let (w, b) = cur.pair()?;
            feat = tape.conv2d(feat, w, Some(b), 2, 1, 1)?;
            feat = tape.leaky_relu(feat, LEAKY_SLOPE)?;
        }
        let pooled = tape.mean_hw(feat)?;
        let (hw, hb) = cur.pair()?;
        let scores = tape.matmul(pooled, hw, Some(hb))?;
        tape.reshape(scores, &[sh[0]])
    }
}

// ---------------------------------------------------------------------------
// Task head
// ---------------------------------------------------------------------------

/// Dense-prediction head standing in for the perception network: three 3x3
/// convs (16/16/C) with leaky ReLU between, per-pixel class logits.
#[derive(Debug, Clone, Copy)]
pub struct TaskHead {
    pub classes: usize,
}

impl TaskHead {
    pub fn new(classes: usize) -> Self {
        TaskHead { classes }
    }

    pub fn param_specs(&self) -> ParamSpecs {
        vec![
            (String::from("conv1.w"), vec![16, 1, 3, 3]),
            (String::from("conv1.b"), vec![16]),
            (String::from("conv2.w"), vec![16, 16, 3, 3]),
            (String::from("conv2.b"), vec![16]),
            (String::from("conv3.w"), vec![self.classes, 16, 3, 3]),
            (String::from("conv3.b"), vec![self.classes]),
        ]
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        init_params(ParamName::ThetaP, &self.param_specs(), seed)
    }

    pub fn init_zeros(&self) -> ParamSet {
        zero_params(ParamName::ThetaP, &self.param_specs())
    }

    /// `u`: `[N, 1, H, W]`. Returns logits `[N, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, u: VarId, params: &BoundParams) -> Result<VarId> {
        let mut cur = Cursor::new(params);
        let (w1, b1) = cur.pair()?;
        let h1 = tape.conv2d(u, w1, Some(b1), 1, 1, 1)?;
        let h1 = tape.leaky_relu(h1, LEAKY_SLOPE)?;
        let (w2, b2) = cur.pair()?;
        let h2 = tape.conv2d(h1, w2, Some(b2), 1, 1, 1)?;
        let h2 = tape.leaky_relu(h2, LEAKY_SLOPE)?;
        let (w3, b3) = cur.pair()?;
        tape.conv2d(h2, w3, Some(b3), 1, 1, 1)
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Stack `[H, W]` grayscale images into a `[N, 1, H, W]` batch.
pub fn stack_images(imgs: &[&Tensor]) -> Result<Tensor> {
    if imgs.is_empty() {
        return Err(Error::Usage(String::from("stack_images: empty batch")));
    }
    let sh = imgs[0].shape();
    if sh.len() != 2 {
        return Err(Error::shape("stack_images", sh, &[0, 0]));
    }
    let (h, w) = (sh[0], sh[1]);
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.shape() != sh {
            return Err(Error::shape("stack_images", sh, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[imgs.len(), 1, h, w], data)
}

/// Vector-Jacobian product through the fusion network: the flat omega
/// gradient of `<F(x, y; omega), seed>`. Chains upstream image-space
/// gradients (e.g. from the critic loss) back onto the fusion parameters.
pub fn fusion_vjp(
    net: &FusionNet,
    omega: &ParamSet,
    x: &Tensor,
    y: &Tensor,
    seed: &Tensor,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let bound = bind(&mut tape, omega, true)?;
    let u = net.forward(&mut tape, xv, yv, &bound)?;
    if tape.value(u).shape() != seed.shape() {
        return Err(Error::shape("fusion_vjp", tape.value(u).shape(), seed.shape()));
    }
    let r = tape.constant(seed.clone())?;
    let prod = tape.mul(u, r)?;
    let s = tape.sum(prod)?;
    tape.backward(s)?;
    Ok(collect_flat_grad(&tape, &bound, omega))
}
