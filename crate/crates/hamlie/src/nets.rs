//! Feed-forward function approximators with exact derivatives, and the
//! structured parametrizations of the port-Hamiltonian terms M^{-1}(q), V(q),
//! D(q, p) and B(q).
//!
//! Everything is written over a scalar trait with two instantiations: plain
//! `f64`, and a forward-mode dual number. Running a reverse pass in dual
//! arithmetic yields the second-order quantities (Hessian-vector products and
//! parameter gradients of input gradients) that the Hamiltonian vector field
//! needs during training, without a general tape.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::GroupTag;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input length {got} does not match network input dimension {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scalar abstraction shared by values and forward-mode dual numbers.
pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    fn from_f64(x: f64) -> Self;
    /// Primal value.
    fn value(self) -> f64;
    /// Tangent component (zero for plain `f64`).
    fn dual(self) -> f64;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn dual(self) -> f64 {
        0.0
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `re + eps * du`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    #[inline]
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
    #[inline]
    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}
impl std::ops::Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}
impl std::ops::Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual { re: self.re * o.re, du: self.re * o.du + self.du * o.re }
    }
}
impl std::ops::Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual { re: -self.re, du: -self.du }
    }
}

impl Scalar for Dual {
    const ZERO: Self = Dual { re: 0.0, du: 0.0 };
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn dual(self) -> f64 {
        self.du
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, du: self.du * (1.0 - t * t) }
    }
}

/// Per-layer activation. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    Tanh,
    Linear,
}

/// A fully-connected network: tanh hidden layers (linear where a preset says
/// so), linear output. Parameters live in an external flat buffer starting at
/// `offset`, laid out per layer as row-major weights followed by biases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// Activation after each non-final layer (`dims.len() - 2` entries).
    pub acts: Vec<Act>,
    pub offset: usize,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, offset: usize) -> Self {
        let n_hidden = dims.len().saturating_sub(2);
        Self { dims, acts: vec![Act::Tanh; n_hidden], offset }
    }

    pub fn with_acts(dims: Vec<usize>, acts: Vec<Act>, offset: usize) -> Self {
        assert_eq!(acts.len(), dims.len() - 2);
        Self { dims, acts, offset }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_len(&self) -> usize {
        (0..self.n_layers()).map(|l| self.dims[l + 1] * (self.dims[l] + 1)).sum()
    }

    fn layer_param_offset(&self, layer: usize) -> usize {
        let mut off = self.offset;
        for l in 0..layer {
            off += self.dims[l + 1] * (self.dims[l] + 1);
        }
        off
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn init_params(&self, rng: &mut ChaCha12Rng, params: &mut [f64]) {
        for l in 0..self.n_layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let bound = 1.0 / (din as f64).sqrt();
            let off = self.layer_param_offset(l);
            for k in 0..dout * din {
                params[off + k] = rng.gen_range(-bound..bound);
            }
            for k in 0..dout {
                params[off + dout * din + k] = 0.0;
            }
        }
    }

    /// Multiplies the final layer (weights and biases) by `factor`. Since the
    /// output layer is linear this scales the network output exactly.
    pub fn scale_output(&self, params: &mut [f64], factor: f64) {
        let l = self.n_layers() - 1;
        let off = self.layer_param_offset(l);
        let n = self.dims[l + 1] * (self.dims[l] + 1);
        for k in 0..n {
            params[off + k] *= factor;
        }
    }

    /// Forward pass storing post-activation values for a later reverse pass.
    pub fn forward<S: Scalar>(&self, params: &[f64], x: &[S], cache: &mut MlpCache<S>) {
        assert_eq!(x.len(), self.input_dim());
        cache.prepare(&self.dims);
        cache.acts[..x.len()].copy_from_slice(x);
        let mut in_off = 0usize;
        let mut p_off = self.offset;
        for l in 0..self.n_layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let out_off = in_off + din;
            let w = &params[p_off..p_off + dout * din];
            let b = &params[p_off + dout * din..p_off + dout * (din + 1)];
            let (prev, rest) = cache.acts.split_at_mut(out_off);
            let xin = &prev[in_off..in_off + din];
            let act = if l < self.acts.len() { self.acts[l] } else { Act::Linear };
            for j in 0..dout {
                let mut acc = S::from_f64(b[j]);
                let wrow = &w[j * din..(j + 1) * din];
                for i in 0..din {
                    acc = acc + S::from_f64(wrow[i]) * xin[i];
                }
                rest[j] = if act == Act::Tanh { acc.tanh() } else { acc };
            }
            in_off = out_off;
            p_off += dout * (din + 1);
        }
    }

    /// Reverse pass. `out_bar` is the cotangent of the output; the input
    /// cotangent is accumulated into `x_bar` and parameter cotangents are
    /// streamed to `sink(global_param_index, value)`.
    pub fn backward<S: Scalar>(
        &self,
        params: &[f64],
        cache: &mut MlpCache<S>,
        out_bar: &[S],
        x_bar: &mut [S],
        mut sink: impl FnMut(usize, S),
    ) {
        assert_eq!(out_bar.len(), self.output_dim());
        let n_layers = self.n_layers();
        cache.delta.clear();
        cache.delta.extend_from_slice(out_bar);
        for l in (0..n_layers).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let p_off = self.layer_param_offset(l);
            let in_off = cache.layer_offset(l);
            let w = &params[p_off..p_off + dout * din];
            // Parameter cotangents: dW[j,i] = delta[j] * in[i], db[j] = delta[j].
            for j in 0..dout {
                let dj = cache.delta[j];
                let row = p_off + j * din;
                for i in 0..din {
                    sink(row + i, dj * cache.acts[in_off + i]);
                }
            }
            let b_off = p_off + dout * din;
            for j in 0..dout {
                sink(b_off + j, cache.delta[j]);
            }
            // Input cotangent of this layer.
            cache.delta2.clear();
            cache.delta2.resize(din, S::ZERO);
            for j in 0..dout {
                let dj = cache.delta[j];
                let wrow = &w[j * din..(j + 1) * din];
                for i in 0..din {
                    cache.delta2[i] = cache.delta2[i] + S::from_f64(wrow[i]) * dj;
                }
            }
            if l == 0 {
                for i in 0..din {
                    x_bar[i] = x_bar[i] + cache.delta2[i];
                }
            } else {
                // Chain through the activation of the previous layer using the
                // stored post-activation value (tanh' = 1 - y^2).
                let act = self.acts[l - 1];
                std::mem::swap(&mut cache.delta, &mut cache.delta2);
                if act == Act::Tanh {
                    for i in 0..din {
                        let y = cache.acts[in_off + i];
                        let one = S::from_f64(1.0);
                        cache.delta[i] = cache.delta[i] * (one - y * y);
                    }
                }
            }
        }
    }
}

/// Reusable forward-pass storage.
#[derive(Debug, Clone, Default)]
pub struct MlpCache<S> {
    acts: Vec<S>,
    offs: Vec<usize>,
    delta: Vec<S>,
    delta2: Vec<S>,
}

impl<S: Scalar> MlpCache<S> {
    pub fn new() -> Self {
        Self { acts: Vec::new(), offs: Vec::new(), delta: Vec::new(), delta2: Vec::new() }
    }

    fn prepare(&mut self, dims: &[usize]) {
        let total: usize = dims.iter().sum();
        self.acts.clear();
        self.acts.resize(total, S::ZERO);
        self.offs.clear();
        let mut off = 0;
        for d in dims {
            self.offs.push(off);
            off += d;
        }
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.offs[layer]
    }

    /// Output slice of the last forward pass.
    pub fn output(&self) -> &[S] {
        let last = *self.offs.last().unwrap();
        &self.acts[last..]
    }
}

/// Result of [`mlp_eval_with_derivatives`]: outputs, the full input Jacobian,
/// and a closure-style handle for parameter gradients of `w^T y`.
pub struct MlpEval {
    pub y: Vec<f64>,
    /// Row-major `m x k` Jacobian `dy/dx`.
    pub dy_dx: Vec<f64>,
    cache: MlpCache<f64>,
}

impl MlpEval {
    /// Accumulates `d(w^T y)/d params` into `grad` for an arbitrary cotangent
    /// `w` on the outputs.
    pub fn param_grad(&mut self, net: &Mlp, params: &[f64], w: &[f64], grad: &mut [f64]) {
        let mut x_bar = vec![0.0; net.input_dim()];
        net.backward(params, &mut self.cache, w, &mut x_bar, |idx, g| grad[idx] += g);
    }
}

/// Evaluates the network, its input Jacobian, and exposes parameter-gradient
/// accumulation for any output cotangent.
pub fn mlp_eval_with_derivatives(
    net: &Mlp,
    params: &[f64],
    x: &[f64],
) -> Result<MlpEval, NetError> {
    if x.len() != net.input_dim() {
        return Err(NetError::InputDim { got: x.len(), expected: net.input_dim() });
    }
    let mut cache = MlpCache::new();
    net.forward(params, x, &mut cache);
    let y = cache.output().to_vec();
    let (m, k) = (net.output_dim(), net.input_dim());
    let mut dy_dx = vec![0.0; m * k];
    let mut w = vec![0.0; m];
    for r in 0..m {
        w[r] = 1.0;
        let mut x_bar = vec![0.0; k];
        net.backward(params, &mut cache, &w, &mut x_bar, |_, _| {});
        dy_dx[r * k..(r + 1) * k].copy_from_slice(&x_bar);
        w[r] = 0.0;
    }
    Ok(MlpEval { y, dy_dx, cache })
}

/// Constant nominal Cholesky factor `L0`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum NominalFactor {
    Zero,
    Diag(Vec<f64>),
}

impl NominalFactor {
    fn scale(&mut self, factor: f64) {
        if let NominalFactor::Diag(d) = self {
            for x in d.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Network emitting the d(d+1)/2 entries of a lower-triangular factor `L`,
/// assembled as `(L0 + L)(L0 + L)^T + eps I`.
///
/// Triangle packing is row-major over the strict-plus-diagonal triangle, with
/// diagonal entries passed through unchanged: `eps` alone guarantees positive
/// definiteness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CholeskyFactorNet {
    pub mlp: Mlp,
    pub dim: usize,
    pub epsilon: f64,
    pub nominal: NominalFactor,
}

impl CholeskyFactorNet {
    pub fn tri_len(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    /// Writes `L0 + tril(outs)` into `a` (row-major `dim x dim`).
    pub fn factor_from_outputs<S: Scalar>(&self, outs: &[S], a: &mut [S]) {
        let d = self.dim;
        for x in a.iter_mut() {
            *x = S::ZERO;
        }
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                a[i * d + j] = outs[k];
                k += 1;
            }
        }
        if let NominalFactor::Diag(l0) = &self.nominal {
            for i in 0..d {
                a[i * d + i] = a[i * d + i] + S::from_f64(l0[i]);
            }
        }
    }

    /// Assembled matrix `(L0 + L)(L0 + L)^T + eps I` (row-major).
    pub fn matrix_from_factor<S: Scalar>(&self, a: &[S], m: &mut [S]) {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                let mut acc = S::ZERO;
                for k in 0..d {
                    acc = acc + a[i * d + k] * a[j * d + k];
                }
                if i == j {
                    acc = acc + S::from_f64(self.epsilon);
                }
                m[i * d + j] = acc;
            }
        }
    }

    /// Convenience evaluation for tests and inspection.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::new();
        self.mlp.forward(params, x, &mut cache);
        let mut a = vec![0.0; self.dim * self.dim];
        self.factor_from_outputs(cache.output(), &mut a);
        let mut m = vec![0.0; self.dim * self.dim];
        self.matrix_from_factor(&a, &mut m);
        m
    }
}

/// Which slice of the flattened coordinates a head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputEnc {
    /// Translation components only.
    Translation,
    /// Flattened rotation block only.
    RotationFlat,
    /// The full coordinate vector.
    FullCoord,
}

impl InputEnc {
    pub fn slice<'a, S>(&self, tag: GroupTag, coords: &'a [S]) -> &'a [S] {
        let t = tag.trans_dim();
        match self {
            InputEnc::Translation => &coords[..t],
            InputEnc::RotationFlat => &coords[t..],
            InputEnc::FullCoord => coords,
        }
    }

    pub fn dim(&self, tag: GroupTag) -> usize {
        match self {
            InputEnc::Translation => tag.trans_dim(),
            InputEnc::RotationFlat => tag.rot_dim() * tag.rot_dim(),
            InputEnc::FullCoord => tag.coord_dim(),
        }
    }

    /// Offset of the encoded slice inside the coordinate vector.
    pub fn offset(&self, tag: GroupTag) -> usize {
        match self {
            InputEnc::Translation | InputEnc::FullCoord => 0,
            InputEnc::RotationFlat => tag.trans_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassHead {
    pub chol: CholeskyFactorNet,
    pub enc: InputEnc,
}

/// Nominal potential offset `V0(q)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum NominalPotential {
    Zero,
    /// `coeff * z` with `z` the third translation coordinate.
    LinearZ { coeff: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialHead {
    pub mlp: Mlp,
    pub enc: InputEnc,
    pub nominal: NominalPotential,
}

/// Nominal input-matrix offset `B0(q)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum NominalMatrix {
    Zero,
    /// Constant row-major `d x m` matrix.
    Const(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputMatrixHead {
    pub mlp: Mlp,
    pub enc: InputEnc,
    pub nominal: NominalMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DissipationHeads {
    pub v: Option<MassHead>,
    pub w: MassHead,
}

/// The five parametric maps of a structured port-Hamiltonian model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeads {
    pub mass_v_inv: Option<MassHead>,
    pub mass_w_inv: MassHead,
    pub potential: PotentialHead,
    pub input_matrix: InputMatrixHead,
    pub dissipation: Option<DissipationHeads>,
}

/// Structured model: block-diagonal inverse mass, potential, dissipation and
/// input matrix, each with optional nominal offsets, over one parameter
/// buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortHamiltonianModel {
    pub group: GroupTag,
    pub control_dim: usize,
    pub heads: ModelHeads,
    pub params: Vec<f64>,
}

impl PortHamiltonianModel {
    /// Velocity degrees of freedom.
    pub fn dof(&self) -> usize {
        self.group.alg_dim()
    }

    /// Returns the model with every head scaled by `beta` in the invariance
    /// pattern `M -> beta M`, `V -> beta V`, `D -> beta D`, `B -> beta B`.
    ///
    /// The transformation acts on the parameters (final linear layers and
    /// nominal terms), so the scaled model is exact, not approximate.
    pub fn beta_scaled(&self, beta: f64) -> PortHamiltonianModel {
        let mut out = self.clone();
        let inv_sqrt = 1.0 / beta.sqrt();
        let sqrt = beta.sqrt();
        if let Some(h) = &mut out.heads.mass_v_inv {
            h.chol.mlp.scale_output(&mut out.params, inv_sqrt);
            h.chol.nominal.scale(inv_sqrt);
            h.chol.epsilon /= beta;
        }
        out.heads.mass_w_inv.chol.mlp.scale_output(&mut out.params, inv_sqrt);
        out.heads.mass_w_inv.chol.nominal.scale(inv_sqrt);
        out.heads.mass_w_inv.chol.epsilon /= beta;
        out.heads.potential.mlp.scale_output(&mut out.params, beta);
        if let NominalPotential::LinearZ { coeff } = &mut out.heads.potential.nominal {
            *coeff *= beta;
        }
        out.heads.input_matrix.mlp.scale_output(&mut out.params, beta);
        if let NominalMatrix::Const(c) = &mut out.heads.input_matrix.nominal {
            for x in c.iter_mut() {
                *x *= beta;
            }
        }
        if let Some(d) = &mut out.heads.dissipation {
            if let Some(v) = &mut d.v {
                v.chol.mlp.scale_output(&mut out.params, sqrt);
                v.chol.nominal.scale(sqrt);
            }
            d.w.chol.mlp.scale_output(&mut out.params, sqrt);
            d.w.chol.nominal.scale(sqrt);
        }
        out
    }
}

/// Baseline with a single network for the Hamiltonian over `(q, p)` plus a
/// learned input matrix, run through the same port-Hamiltonian flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnstructuredModel {
    pub group: GroupTag,
    pub control_dim: usize,
    pub hnet: Mlp,
    pub input_matrix: InputMatrixHead,
    pub params: Vec<f64>,
}

/// Baseline mapping `(q, zeta, u)` directly to the state derivative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlackBoxModel {
    pub group: GroupTag,
    pub control_dim: usize,
    pub net: Mlp,
    pub params: Vec<f64>,
}

/// All trainable architectures, as stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LearnedModel {
    Structured(PortHamiltonianModel),
    Unstructured(UnstructuredModel),
    BlackBox(BlackBoxModel),
}

impl LearnedModel {
    pub fn arch_name(&self) -> &'static str {
        match self {
            LearnedModel::Structured(_) => "structured",
            LearnedModel::Unstructured(_) => "unstructured",
            LearnedModel::BlackBox(_) => "blackbox",
        }
    }

    pub fn group(&self) -> GroupTag {
        match self {
            LearnedModel::Structured(m) => m.group,
            LearnedModel::Unstructured(m) => m.group,
            LearnedModel::BlackBox(m) => m.group,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            LearnedModel::Structured(m) => &m.params,
            LearnedModel::Unstructured(m) => &m.params,
            LearnedModel::BlackBox(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            LearnedModel::Structured(m) => &mut m.params,
            LearnedModel::Unstructured(m) => &mut m.params,
            LearnedModel::BlackBox(m) => &mut m.params,
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned on-disk model representation. JSON float serialization is
/// shortest-roundtrip, so parameters survive a save/load cycle bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub preset: String,
    pub model: LearnedModel,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), NetError> {
        let json = serde_json::to_string(self).map_err(|e| NetError::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NetError::Parse(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NetError::Version(ckpt.version));
        }
        Ok(ckpt)
    }
}

/// Shared scratch buffers for head evaluation. One per worker thread; model
/// evaluation itself is read-only and safe to run concurrently.
#[derive(Default)]
pub struct Workspace {
    pub c_mv: MlpCache<f64>,
    pub c_mw: MlpCache<f64>,
    pub c_v: MlpCache<f64>,
    pub c_b: MlpCache<f64>,
    pub c_dv: MlpCache<f64>,
    pub c_dw: MlpCache<f64>,
    pub c_h: MlpCache<f64>,
    pub c_dual: MlpCache<Dual>,
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub s4: Vec<f64>,
    pub d0: Vec<Dual>,
    pub d1: Vec<Dual>,
    pub d2: Vec<Dual>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }
}

struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    fn new() -> Self {
        Self { next: 0 }
    }
    fn mlp(&mut self, dims: Vec<usize>, acts: Vec<Act>) -> Mlp {
        let net = Mlp::with_acts(dims, acts, self.next);
        self.next += net.param_len();
        net
    }
}

fn tanh_chain(widths: &[usize], last_linear: bool) -> (Vec<usize>, Vec<Act>) {
    let dims = widths.to_vec();
    let n_hidden = dims.len() - 2;
    let mut acts = vec![Act::Tanh; n_hidden];
    if last_linear && n_hidden > 0 {
        acts[n_hidden - 1] = Act::Linear;
    }
    (dims, acts)
}

/// Named architecture presets. The `pendulum`, `quadrotor_sim` and
/// `quadrotor_real` presets follow the published layer tables; the `*_desk`
/// presets are narrow variants sized for CPU-scale runs.
pub fn structured_preset(name: &str, seed: u64) -> Result<PortHamiltonianModel, NetError> {
    let mut alloc = ParamAlloc::new();
    let (group, control_dim, heads) = match name {
        "pendulum" => {
            let (d, a) = tanh_chain(&[9, 300, 300, 300, 300, 6], true);
            let mw = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[9, 50, 50, 50, 1], true);
            let v = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[9, 300, 300, 300, 3], true);
            let b = alloc.mlp(d, a);
            let heads = ModelHeads {
                mass_v_inv: None,
                mass_w_inv: MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mw,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::RotationFlat,
                },
                potential: PotentialHead {
                    mlp: v,
                    enc: InputEnc::FullCoord,
                    nominal: NominalPotential::Zero,
                },
                input_matrix: InputMatrixHead {
                    mlp: b,
                    enc: InputEnc::FullCoord,
                    nominal: NominalMatrix::Zero,
                },
                dissipation: None,
            };
            (GroupTag::So3, 1, heads)
        }
        "pendulum_desk" => {
            let mw = alloc.mlp(vec![9, 32, 32, 6], vec![Act::Tanh, Act::Tanh]);
            let v = alloc.mlp(vec![9, 32, 32, 1], vec![Act::Tanh, Act::Tanh]);
            let b = alloc.mlp(vec![9, 32, 32, 3], vec![Act::Tanh, Act::Tanh]);
            let heads = ModelHeads {
                mass_v_inv: None,
                mass_w_inv: MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mw,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::RotationFlat,
                },
                potential: PotentialHead {
                    mlp: v,
                    enc: InputEnc::FullCoord,
                    nominal: NominalPotential::Zero,
                },
                input_matrix: InputMatrixHead {
                    mlp: b,
                    enc: InputEnc::FullCoord,
                    nominal: NominalMatrix::Zero,
                },
                dissipation: None,
            };
            (GroupTag::So3, 1, heads)
        }
        "se2_desk" => {
            let mv = alloc.mlp(vec![2, 24, 24, 3], vec![Act::Tanh, Act::Tanh]);
            let mw = alloc.mlp(vec![4, 24, 24, 1], vec![Act::Tanh, Act::Tanh]);
            let v = alloc.mlp(vec![6, 24, 24, 1], vec![Act::Tanh, Act::Tanh]);
            let b = alloc.mlp(vec![6, 24, 24, 9], vec![Act::Tanh, Act::Tanh]);
            let heads = ModelHeads {
                mass_v_inv: Some(MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mv,
                        dim: 2,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::Translation,
                }),
                mass_w_inv: MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mw,
                        dim: 1,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::RotationFlat,
                },
                potential: PotentialHead {
                    mlp: v,
                    enc: InputEnc::FullCoord,
                    nominal: NominalPotential::Zero,
                },
                input_matrix: InputMatrixHead {
                    mlp: b,
                    enc: InputEnc::FullCoord,
                    nominal: NominalMatrix::Zero,
                },
                dissipation: None,
            };
            (GroupTag::Se2, 3, heads)
        }
        "quadrotor_sim" | "quadrotor_desk" => {
            let w = if name == "quadrotor_sim" { 400 } else { 32 };
            let (mv, mw, v, b) = if name == "quadrotor_sim" {
                let (d, a) = tanh_chain(&[3, w, w, w, w, 6], true);
                let mv = alloc.mlp(d, a);
                let (d, a) = tanh_chain(&[9, w, w, w, w, 6], true);
                let mw = alloc.mlp(d, a);
                let (d, a) = tanh_chain(&[12, w, w, w, 1], true);
                let v = alloc.mlp(d, a);
                let (d, a) = tanh_chain(&[12, w, w, w, 24], true);
                let b = alloc.mlp(d, a);
                (mv, mw, v, b)
            } else {
                let mv = alloc.mlp(vec![3, w, w, 6], vec![Act::Tanh, Act::Tanh]);
                let mw = alloc.mlp(vec![9, w, w, 6], vec![Act::Tanh, Act::Tanh]);
                let v = alloc.mlp(vec![12, w, w, 1], vec![Act::Tanh, Act::Tanh]);
                let b = alloc.mlp(vec![12, w, w, 24], vec![Act::Tanh, Act::Tanh]);
                (mv, mw, v, b)
            };
            let heads = ModelHeads {
                mass_v_inv: Some(MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mv,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::Translation,
                }),
                mass_w_inv: MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mw,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Zero,
                    },
                    enc: InputEnc::RotationFlat,
                },
                potential: PotentialHead {
                    mlp: v,
                    enc: InputEnc::FullCoord,
                    nominal: NominalPotential::Zero,
                },
                input_matrix: InputMatrixHead {
                    mlp: b,
                    enc: InputEnc::FullCoord,
                    nominal: NominalMatrix::Zero,
                },
                dissipation: None,
            };
            (GroupTag::Se3, 4, heads)
        }
        "quadrotor_real" => {
            let (d, a) = tanh_chain(&[3, 20, 20, 20, 20, 6], true);
            let mv = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[9, 20, 20, 20, 20, 6], true);
            let mw = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[3, 20, 20, 20, 20, 6], true);
            let dv = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[9, 20, 20, 20, 20, 6], true);
            let dw = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[12, 20, 20, 1], true);
            let v = alloc.mlp(d, a);
            let (d, a) = tanh_chain(&[12, 20, 20, 24], true);
            let b = alloc.mlp(d, a);
            let heads = ModelHeads {
                mass_v_inv: Some(MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mv,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Diag(vec![1.0 / 1.3f64.sqrt(); 3]),
                    },
                    enc: InputEnc::Translation,
                }),
                mass_w_inv: MassHead {
                    chol: CholeskyFactorNet {
                        mlp: mw,
                        dim: 3,
                        epsilon: 0.01,
                        nominal: NominalFactor::Diag(vec![
                            (1.0f64 / 0.12).sqrt(),
                            (1.0f64 / 0.12).sqrt(),
                            (1.0f64 / 0.2).sqrt(),
                        ]),
                    },
                    enc: InputEnc::RotationFlat,
                },
                potential: PotentialHead {
                    mlp: v,
                    enc: InputEnc::FullCoord,
                    nominal: NominalPotential::Zero,
                },
                input_matrix: InputMatrixHead {
                    mlp: b,
                    enc: InputEnc::FullCoord,
                    nominal: NominalMatrix::Zero,
                },
                dissipation: Some(DissipationHeads {
                    v: Some(MassHead {
                        chol: CholeskyFactorNet {
                            mlp: dv,
                            dim: 3,
                            epsilon: 0.0,
                            nominal: NominalFactor::Zero,
                        },
                        enc: InputEnc::Translation,
                    }),
                    w: MassHead {
                        chol: CholeskyFactorNet {
                            mlp: dw,
                            dim: 3,
                            epsilon: 0.0,
                            nominal: NominalFactor::Zero,
                        },
                        enc: InputEnc::RotationFlat,
                    },
                }),
            };
            (GroupTag::Se3, 4, heads)
        }
        other => return Err(NetError::UnknownPreset(other.to_string())),
    };
    let mut params = vec![0.0; alloc.next];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    if let Some(h) = &heads.mass_v_inv {
        h.chol.mlp.init_params(&mut rng, &mut params);
    }
    heads.mass_w_inv.chol.mlp.init_params(&mut rng, &mut params);
    heads.potential.mlp.init_params(&mut rng, &mut params);
    heads.input_matrix.mlp.init_params(&mut rng, &mut params);
    if let Some(d) = &heads.dissipation {
        if let Some(v) = &d.v {
            v.chol.mlp.init_params(&mut rng, &mut params);
        }
        d.w.chol.mlp.init_params(&mut rng, &mut params);
    }
    Ok(PortHamiltonianModel { group, control_dim, heads, params })
}

/// Unstructured-Hamiltonian baseline matching a structured preset's group.
pub fn unstructured_preset(
    group: GroupTag,
    control_dim: usize,
    width: usize,
    seed: u64,
) -> UnstructuredModel {
    let mut alloc = ParamAlloc::new();
    let in_dim = group.coord_dim() + group.alg_dim();
    let hnet = alloc.mlp(vec![in_dim, width, width, 1], vec![Act::Tanh, Act::Tanh]);
    let bnet = alloc.mlp(
        vec![group.coord_dim(), width, width, group.alg_dim() * control_dim],
        vec![Act::Tanh, Act::Tanh],
    );
    let mut params = vec![0.0; alloc.next];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    hnet.init_params(&mut rng, &mut params);
    bnet.init_params(&mut rng, &mut params);
    UnstructuredModel {
        group,
        control_dim,
        hnet,
        input_matrix: InputMatrixHead {
            mlp: bnet,
            enc: InputEnc::FullCoord,
            nominal: NominalMatrix::Zero,
        },
        params,
    }
}

/// Black-box baseline: one network from `(q, zeta, u)` to the full state
/// derivative.
pub fn blackbox_preset(
    group: GroupTag,
    control_dim: usize,
    width: usize,
    seed: u64,
) -> BlackBoxModel {
    let mut alloc = ParamAlloc::new();
    let state = group.coord_dim() + group.alg_dim();
    let net =
        alloc.mlp(vec![state + control_dim, width, width, state], vec![Act::Tanh, Act::Tanh]);
    let mut params = vec![0.0; alloc.next];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    net.init_params(&mut rng, &mut params);
    BlackBoxModel { group, control_dim, net, params }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_net(dims: Vec<usize>, seed: u64) -> (Mlp, Vec<f64>) {
        let net = Mlp::new(dims, 0);
        let mut params = vec![0.0; net.param_len()];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        net.init_params(&mut rng, &mut params);
        (net, params)
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let net = Mlp::new(vec![3, 4, 2], 0);
        let mut params = vec![0.0; net.param_len()];
        // Set output biases to known values.
        let last_off = net.param_len() - 2;
        params[last_off] = 0.7;
        params[last_off + 1] = -0.2;
        let ev = mlp_eval_with_derivatives(&net, &params, &[1.0, 2.0, 3.0]).unwrap();
        assert!((ev.y[0] - 0.7).abs() < 1e-15);
        assert!((ev.y[1] + 0.2).abs() < 1e-15);
        assert!(ev.dy_dx.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn single_linear_layer_jacobian_is_weight_matrix() {
        let net = Mlp::new(vec![3, 2], 0);
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5];
        let ev = mlp_eval_with_derivatives(&net, &params, &[1.0, -1.0, 2.0]).unwrap();
        // y = Wx + b
        assert!((ev.y[0] - (1.0 - 2.0 + 6.0 + 0.5)).abs() < 1e-14);
        assert!((ev.y[1] - (4.0 - 5.0 + 12.0 - 0.5)).abs() < 1e-14);
        assert_eq!(&ev.dy_dx, &params[..6]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (net, params) = small_net(vec![4, 16, 16, 3], 99);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ev = mlp_eval_with_derivatives(&net, &params, &x).unwrap();
            let h = 1e-5;
            for i in 0..4 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let yp = mlp_eval_with_derivatives(&net, &params, &xp).unwrap().y;
                let ym = mlp_eval_with_derivatives(&net, &params, &xm).unwrap().y;
                for r in 0..3 {
                    let fd = (yp[r] - ym[r]) / (2.0 * h);
                    let an = ev.dy_dx[r * 4 + i];
                    let denom = fd.abs().max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-5,
                        "row {r} col {i}: fd {fd} vs an {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let (net, params) = small_net(vec![3, 8, 2], 7);
        let x = [0.3, -0.8, 0.5];
        let w = [0.7, -1.3];
        let mut grad = vec![0.0; net.param_len()];
        let mut ev = mlp_eval_with_derivatives(&net, &params, &x).unwrap();
        ev.param_grad(&net, &params, &w, &mut grad);
        let h = 1e-6;
        let scalar = |p: &[f64]| {
            let e = mlp_eval_with_derivatives(&net, p, &x).unwrap();
            w[0] * e.y[0] + w[1] * e.y[1]
        };
        for k in (0..net.param_len()).step_by(3) {
            let mut pp = params.clone();
            pp[k] += h;
            let mut pm = params.clone();
            pm[k] -= h;
            let fd = (scalar(&pp) - scalar(&pm)) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!((fd - grad[k]).abs() / denom < 1e-4, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn dual_forward_matches_directional_derivative() {
        let (net, params) = small_net(vec![3, 10, 2], 21);
        let x = [0.2, 0.4, -0.6];
        let dir = [1.0, -2.0, 0.5];
        let mut cache = MlpCache::<Dual>::new();
        let xd: Vec<Dual> = x.iter().zip(dir.iter()).map(|(&v, &d)| Dual::new(v, d)).collect();
        net.forward(&params, &xd, &mut cache);
        let y_dual: Vec<Dual> = cache.output().to_vec();
        // Compare against the Jacobian route.
        let ev = mlp_eval_with_derivatives(&net, &params, &x).unwrap();
        for r in 0..2 {
            let jv: f64 = (0..3).map(|i| ev.dy_dx[r * 3 + i] * dir[i]).sum();
            assert!((y_dual[r].du - jv).abs() < 1e-12);
            assert!((y_dual[r].re - ev.y[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_backward_gives_hessian_vector_product() {
        // Scalar output f(x); dual-mode reverse pass along direction c must
        // produce H c in the tangent slot. Oracle: finite differences of the
        // gradient.
        let (net, params) = small_net(vec![3, 12, 1], 13);
        let x = [0.1, -0.3, 0.7];
        let c = [0.5, 1.5, -1.0];
        let grad_at = |x: &[f64]| {
            let mut cache = MlpCache::<f64>::new();
            net.forward(&params, x, &mut cache);
            let mut xb = vec![0.0; 3];
            net.backward(&params, &mut cache, &[1.0], &mut xb, |_, _| {});
            xb
        };
        let mut cache = MlpCache::<Dual>::new();
        let xd: Vec<Dual> = x.iter().zip(c.iter()).map(|(&v, &d)| Dual::new(v, d)).collect();
        net.forward(&params, &xd, &mut cache);
        let mut xb = vec![Dual::ZERO; 3];
        net.backward(&params, &mut cache, &[Dual::constant(1.0)], &mut xb, |_, _| {});
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(c.iter()).map(|(&v, &d)| v + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(c.iter()).map(|(&v, &d)| v - h * d).collect();
        let gp = grad_at(&xp);
        let gm = grad_at(&xm);
        for i in 0..3 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!((xb[i].du - fd).abs() < 1e-6, "H c [{i}]: {} vs {fd}", xb[i].du);
        }
    }

    #[test]
    fn cholesky_assembly_is_psd_with_eps_floor() {
        let chol = CholeskyFactorNet {
            mlp: Mlp::new(vec![2, 8, 6], 0),
            dim: 3,
            epsilon: 0.01,
            nominal: NominalFactor::Zero,
        };
        let mut params = vec![0.0; chol.mlp.param_len()];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        chol.mlp.init_params(&mut rng, &mut params);
        let mut srng = StdRng::seed_from_u64(8);
        for _ in 0..1000 {
            let x = [srng.gen_range(-2.0..2.0), srng.gen_range(-2.0..2.0)];
            let m = chol.eval(&params, &x);
            let mat = nalgebra::DMatrix::from_row_slice(3, 3, &m);
            let eig = mat.clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&e| e >= 0.01 - 1e-12), "eigmin {:?}", eig);
            assert!((mat.clone() - mat.transpose()).norm() < 1e-13);
        }
    }

    #[test]
    fn cholesky_zero_net_with_identity_nominal() {
        let chol = CholeskyFactorNet {
            mlp: Mlp::new(vec![2, 4, 6], 0),
            dim: 3,
            epsilon: 0.01,
            nominal: NominalFactor::Diag(vec![1.0, 1.0, 1.0]),
        };
        let params = vec![0.0; chol.mlp.param_len()];
        let m = chol.eval(&params, &[0.3, -0.4]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.01 } else { 0.0 };
                assert!((m[i * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn beta_scaling_is_exact_on_head_values() {
        let model = structured_preset("se2_desk", 9).unwrap();
        let beta = 2.5;
        let scaled = model.beta_scaled(beta);
        let q = [0.3, -0.2, 0.9950041652780258, -0.09983341664682815, 0.09983341664682815, 0.9950041652780258];
        // M^{-1} scales by 1/beta.
        let mv = model.heads.mass_v_inv.as_ref().unwrap();
        let mv_s = scaled.heads.mass_v_inv.as_ref().unwrap();
        let m0 = mv.chol.eval(&model.params, &q[..2]);
        let m1 = mv_s.chol.eval(&scaled.params, &q[..2]);
        for (a, b) in m0.iter().zip(m1.iter()) {
            assert!((a / beta - b).abs() < 1e-12, "{a} {b}");
        }
        // V scales by beta.
        let mut cache = MlpCache::<f64>::new();
        model.heads.potential.mlp.forward(&model.params, &q, &mut cache);
        let v0 = cache.output()[0];
        scaled.heads.potential.mlp.forward(&scaled.params, &q, &mut cache);
        let v1 = cache.output()[0];
        assert!((beta * v0 - v1).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = structured_preset("pendulum_desk", 4).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            preset: "pendulum_desk".into(),
            model: LearnedModel::Structured(model),
        };
        let dir = std::env::temp_dir().join("hamlie_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.params(), ckpt.model.params());
    }

    #[test]
    fn preset_layer_tables() {
        let p = structured_preset("pendulum", 0).unwrap();
        assert_eq!(p.heads.mass_w_inv.chol.mlp.dims, vec![9, 300, 300, 300, 300, 6]);
        assert_eq!(p.heads.potential.mlp.dims, vec![9, 50, 50, 50, 1]);
        assert_eq!(p.heads.input_matrix.mlp.dims, vec![9, 300, 300, 300, 3]);
        assert!((p.heads.mass_w_inv.chol.epsilon - 0.01).abs() < 1e-15);
        let q = structured_preset("quadrotor_sim", 0).unwrap();
        assert_eq!(q.heads.mass_v_inv.as_ref().unwrap().chol.mlp.dims[0], 3);
        assert_eq!(q.heads.mass_w_inv.chol.mlp.dims[0], 9);
        assert_eq!(q.heads.input_matrix.mlp.output_dim(), 24);
    }
}
