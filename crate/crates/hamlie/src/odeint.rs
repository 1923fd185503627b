//! Fixed-step RK4 and adaptive Dormand-Prince integration with zero-order-hold
//! inputs, trajectory rollout, group-constraint metrics, and loss gradients of
//! ODE-constrained objectives (reverse pass through the solver steps by
//! default, continuous adjoint as an alternative).

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{FlowWorkspace, TrainableDynamics};
use crate::liegroup::GroupTag;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("non-finite state encountered; integration aborted")]
    NonFinite,
    #[error("adaptive step size underflow (h < {MIN_STEP:e} s); trajectory diverged")]
    StepUnderflow,
    #[error("step budget exhausted after {0} steps")]
    MaxSteps(usize),
    #[error("time grid must be strictly increasing")]
    BadGrid,
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

/// Smallest admissible adaptive step.
pub const MIN_STEP: f64 = 1e-10;
const MAX_STEPS: usize = 20_000_000;

/// Integration method selection.
#[derive(Debug, Clone, Copy)]
pub enum Method {
    /// Classic fourth-order Runge-Kutta with `substeps` equal subdivisions of
    /// each grid interval.
    Rk4 { substeps: usize },
    /// Dormand-Prince 5(4) with PI-free step control; samples land exactly on
    /// the grid by clamping the step.
    Dopri5 { rtol: f64, atol: f64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Dopri5 { rtol: 1e-8, atol: 1e-8 }
    }
}

/// One RK4 step of size `h` in place; `k` buffers must have state length.
pub fn rk4_step<F>(f: &mut F, x: &mut [f64], h: f64, scratch: &mut Rk4Scratch) -> Result<(), OdeError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let n = x.len();
    scratch.resize(n);
    let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
    f(x, k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    f(tmp, k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    f(tmp, k3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    f(tmp, k4)?;
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

#[derive(Default)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new() -> Self {
        Self::default()
    }
    fn resize(&mut self, n: usize) {
        self.k1.resize(n, 0.0);
        self.k2.resize(n, 0.0);
        self.k3.resize(n, 0.0);
        self.k4.resize(n, 0.0);
        self.tmp.resize(n, 0.0);
    }
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates from `x0` over `t_grid` (which includes the initial time) and
/// returns the state at every grid point. The control is expected to be baked
/// into `f` and held constant (zero-order hold).
pub fn integrate<F>(
    mut f: F,
    x0: &[f64],
    t_grid: &[f64],
    method: &Method,
) -> Result<Vec<Vec<f64>>, OdeError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), OdeError>,
{
    if t_grid.len() < 2 {
        return Err(OdeError::BadGrid);
    }
    for w in t_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(OdeError::BadGrid);
        }
    }
    let n = x0.len();
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(x0.to_vec());
    let mut x = x0.to_vec();
    match *method {
        Method::Rk4 { substeps } => {
            let substeps = substeps.max(1);
            let mut scratch = Rk4Scratch::new();
            for w in t_grid.windows(2) {
                let h = (w[1] - w[0]) / substeps as f64;
                for _ in 0..substeps {
                    rk4_step(&mut f, &mut x, h, &mut scratch)?;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite);
                }
                out.push(x.clone());
            }
        }
        Method::Dopri5 { rtol, atol } => {
            let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
            let mut tmp = vec![0.0; n];
            let mut x5 = vec![0.0; n];
            let mut steps = 0usize;
            let mut have_fsal = false;
            for w in t_grid.windows(2) {
                let mut t = w[0];
                let t_end = w[1];
                let mut h = (t_end - t).min((t_end - t) / 4.0).max(MIN_STEP * 10.0);
                while t < t_end {
                    if steps > MAX_STEPS {
                        return Err(OdeError::MaxSteps(steps));
                    }
                    h = h.min(t_end - t);
                    if h < MIN_STEP {
                        return Err(OdeError::StepUnderflow);
                    }
                    if !have_fsal {
                        f(&x, &mut k[0])?;
                    }
                    for s in 1..7 {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for j in 0..s.min(6) {
                                let a = if s < 7 { DP_A[s - 1][j] } else { 0.0 };
                                acc += a * k[j][i];
                            }
                            tmp[i] = x[i] + h * acc;
                        }
                        let _ = DP_C;
                        f(&tmp, &mut k[s])?;
                    }
                    let mut err = 0.0;
                    for i in 0..n {
                        let mut y5 = 0.0;
                        let mut e = 0.0;
                        for s in 0..7 {
                            y5 += DP_B5[s] * k[s][i];
                            e += DP_E[s] * k[s][i];
                        }
                        x5[i] = x[i] + h * y5;
                        let sc = atol + rtol * x[i].abs().max(x5[i].abs());
                        let r = h * e / sc;
                        err += r * r;
                    }
                    err = (err / n as f64).sqrt();
                    steps += 1;
                    if !err.is_finite() || x5.iter().any(|v| !v.is_finite()) {
                        return Err(OdeError::NonFinite);
                    }
                    if err <= 1.0 {
                        t += h;
                        x.copy_from_slice(&x5);
                        // FSAL: stage 7 was evaluated at (t + h, x5).
                        let (first, rest) = k.split_at_mut(1);
                        first[0].copy_from_slice(&rest[5]);
                        have_fsal = true;
                    } else {
                        have_fsal = false;
                    }
                    let fac = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
                    h *= fac.clamp(0.2, 5.0);
                }
                out.push(x.clone());
            }
        }
    }
    Ok(out)
}

/// `(|det R - 1|, ||R R^T - I||_F)` for a row-major 3x3 block.
pub fn constraint_metrics(r: &[f64]) -> (f64, f64) {
    constraint_metrics_dim(r, 3)
}

/// Same metrics for an `n x n` rotation block.
pub fn constraint_metrics_dim(r: &[f64], n: usize) -> (f64, f64) {
    let det = match n {
        2 => r[0] * r[3] - r[1] * r[2],
        3 => {
            r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
                + r[2] * (r[3] * r[7] - r[4] * r[6])
        }
        _ => panic!("unsupported rotation dimension {n}"),
    };
    let mut orth = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..n {
                acc += r[i * n + t] * r[j * n + t];
            }
            if i == j {
                acc -= 1.0;
            }
            orth += acc * acc;
        }
    }
    ((det - 1.0).abs(), orth.sqrt())
}

/// Per-sample rollout record: observable states plus diagnostics.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    /// Observable states `(coords, zeta)` at the sample times.
    pub states: Vec<Vec<f64>>,
    pub hamiltonian: Vec<f64>,
    pub det_err: Vec<f64>,
    pub orth_err: Vec<f64>,
}

impl RolloutResult {
    /// CSV with the fixed header
    /// `t, px, py, pz, r11..r33, vx, vy, vz, wx, wy, wz, H, det_err, orth_err`.
    /// SO(3) and SE(2) states are embedded into the SE(3) layout.
    pub fn write_csv<W: std::io::Write>(&self, tag: GroupTag, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,px,py,pz,r11,r12,r13,r21,r22,r23,r31,r32,r33,vx,vy,vz,wx,wy,wz,H,det_err,orth_err"
        )?;
        for (i, t) in self.times.iter().enumerate() {
            let s = &self.states[i];
            let (pos, rot, vel, omg) = embed_se3_layout(tag, s);
            write!(w, "{t}")?;
            for v in pos.iter().chain(rot.iter()).chain(vel.iter()).chain(omg.iter()) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{},{}", self.hamiltonian[i], self.det_err[i], self.orth_err[i])?;
        }
        Ok(())
    }
}

/// Embeds a group-specific observable state into the SE(3) CSV layout.
pub fn embed_se3_layout(tag: GroupTag, s: &[f64]) -> ([f64; 3], [f64; 9], [f64; 3], [f64; 3]) {
    let mut pos = [0.0; 3];
    let mut rot = [0.0; 9];
    let mut vel = [0.0; 3];
    let mut omg = [0.0; 3];
    match tag {
        GroupTag::Se3 => {
            pos.copy_from_slice(&s[0..3]);
            rot.copy_from_slice(&s[3..12]);
            vel.copy_from_slice(&s[12..15]);
            omg.copy_from_slice(&s[15..18]);
        }
        GroupTag::So3 => {
            rot.copy_from_slice(&s[0..9]);
            omg.copy_from_slice(&s[9..12]);
        }
        GroupTag::Se2 => {
            pos[0] = s[0];
            pos[1] = s[1];
            rot = [s[2], s[3], 0.0, s[4], s[5], 0.0, 0.0, 0.0, 1.0];
            vel[0] = s[6];
            vel[1] = s[7];
            omg[2] = s[8];
        }
        GroupTag::So2 => {
            rot = [s[0], s[1], 0.0, s[2], s[3], 0.0, 0.0, 0.0, 1.0];
            omg[2] = s[4];
        }
    }
    (pos, rot, vel, omg)
}

/// Rolls a learned model out from an observable initial condition under a
/// constant control, reporting observable states and constraint diagnostics.
/// `energy` maps an internal state to the model's Hamiltonian (or an external
/// energy oracle for the black-box baseline).
pub fn rollout_model<M: TrainableDynamics>(
    model: &M,
    obs0: &[f64],
    u: &[f64],
    t_grid: &[f64],
    method: &Method,
    energy: impl Fn(&mut FlowWorkspace, &[f64]) -> f64,
) -> Result<RolloutResult, OdeError> {
    let mut ws = FlowWorkspace::new();
    let n = model.state_dim();
    let mut x0 = vec![0.0; n];
    model.init_state(&mut ws, obs0, &mut x0);
    let states_internal = {
        let mut fws = FlowWorkspace::new();
        integrate(
            |x: &[f64], dx: &mut [f64]| {
                model.flow(&mut fws, x, u, dx);
                if dx.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite);
                }
                Ok(())
            },
            &x0,
            t_grid,
            method,
        )?
    };
    let tag = model.group();
    let rdim = tag.rot_dim();
    let roff = tag.trans_dim();
    let mut out = RolloutResult {
        times: t_grid.to_vec(),
        states: Vec::with_capacity(states_internal.len()),
        hamiltonian: Vec::with_capacity(states_internal.len()),
        det_err: Vec::with_capacity(states_internal.len()),
        orth_err: Vec::with_capacity(states_internal.len()),
    };
    let mut obs = vec![0.0; model.obs_dim()];
    for x in &states_internal {
        model.observe(&mut ws, x, &mut obs);
        let (d, o) = constraint_metrics_dim(&obs[roff..roff + rdim * rdim], rdim);
        out.states.push(obs.clone());
        out.hamiltonian.push(energy(&mut ws, x));
        out.det_err.push(d);
        out.orth_err.push(o);
    }
    Ok(out)
}

/// One trajectory segment: states sampled on a grid under a constant control.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub times: Vec<f64>,
    /// Observable samples `(coords, zeta)`, one per grid point.
    pub obs: Vec<Vec<f64>>,
    pub control: Vec<f64>,
}

/// Loss decomposition per the manifold loss terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub total: f64,
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub samples: usize,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.rot += o.rot;
        self.pos += o.pos;
        self.vel += o.vel;
        self.samples += o.samples;
    }
}

/// Pointwise loss between a predicted and a reference observation; writes the
/// gradient with respect to the prediction into `seed`.
pub trait SampleLoss: Sync {
    fn eval(&self, pred: &[f64], truth: &[f64], seed: &mut [f64]) -> LossTerms;
}

/// Gradient propagation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Reverse pass through the RK4 steps (exact gradient of the discrete
    /// rollout).
    BackpropSteps,
    /// Continuous adjoint ODE integrated backward alongside the state, with
    /// the adjoint reset at each sample time.
    Adjoint,
}

/// Adjoint state bundle for the continuous mode.
#[derive(Debug, Clone)]
pub struct AdjointState {
    /// dL/dx at the current integration time.
    pub a: Vec<f64>,
    /// Accumulated dL/dtheta.
    pub dtheta: Vec<f64>,
}

/// Loss and parameter gradient for a single segment.
#[allow(clippy::too_many_arguments)]
pub fn segment_loss_gradient<M: TrainableDynamics>(
    model: &M,
    ws: &mut FlowWorkspace,
    seg: &Segment,
    loss: &dyn SampleLoss,
    mode: GradMode,
    substeps: usize,
    grad: &mut [f64],
) -> Result<LossTerms, OdeError> {
    match mode {
        GradMode::BackpropSteps => backprop_segment(model, ws, seg, loss, substeps, grad),
        GradMode::Adjoint => adjoint_segment(model, ws, seg, loss, substeps, grad),
    }
}

fn backprop_segment<M: TrainableDynamics>(
    model: &M,
    ws: &mut FlowWorkspace,
    seg: &Segment,
    loss: &dyn SampleLoss,
    substeps: usize,
    grad: &mut [f64],
) -> Result<LossTerms, OdeError> {
    let n = model.state_dim();
    let substeps = substeps.max(1);
    let n_samples = seg.times.len();
    if n_samples < 2 || seg.obs.len() != n_samples {
        return Err(OdeError::BadGrid);
    }
    let u = &seg.control;
    let mut x = vec![0.0; n];
    model.init_state(ws, &seg.obs[0], &mut x);
    // Forward: store the state at every substep node.
    let total_nodes = (n_samples - 1) * substeps + 1;
    let mut nodes: Vec<f64> = Vec::with_capacity(total_nodes * n);
    nodes.extend_from_slice(&x);
    let mut scratch = Rk4Scratch::new();
    let mut terms = LossTerms::default();
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(n_samples - 1);
    let mut obs = vec![0.0; model.obs_dim()];
    for k in 0..n_samples - 1 {
        let h = (seg.times[k + 1] - seg.times[k]) / substeps as f64;
        if h <= 0.0 {
            return Err(OdeError::BadGrid);
        }
        for _ in 0..substeps {
            let mut fe: Result<(), OdeError> = Ok(());
            rk4_step(
                &mut |xs: &[f64], dxs: &mut [f64]| {
                    model.flow(ws, xs, u, dxs);
                    if dxs.iter().any(|v| !v.is_finite()) {
                        fe = Err(OdeError::NonFinite);
                        return Err(OdeError::NonFinite);
                    }
                    Ok(())
                },
                &mut x,
                h,
                &mut scratch,
            )?;
            nodes.extend_from_slice(&x);
        }
        model.observe(ws, &x, &mut obs);
        let mut seed = vec![0.0; model.obs_dim()];
        let t = loss.eval(&obs, &seg.obs[k + 1], &mut seed);
        terms.add(&t);
        seeds.push(seed);
    }
    // Backward sweep.
    let mut a = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    let mut s3 = vec![0.0; n];
    let mut s4 = vec![0.0; n];
    let mut kb = vec![0.0; n];
    let mut sb = vec![0.0; n];
    let mut node_idx = total_nodes - 1;
    for k in (0..n_samples - 1).rev() {
        let xk = &nodes[node_idx * n..(node_idx + 1) * n];
        model.observe_vjp(ws, xk, &seeds[k], &mut a, grad);
        let h = (seg.times[k + 1] - seg.times[k]) / substeps as f64;
        for _ in 0..substeps {
            node_idx -= 1;
            let x0 = nodes[node_idx * n..(node_idx + 1) * n].to_vec();
            // Recompute stage states.
            model.flow(ws, &x0, u, &mut k1);
            for i in 0..n {
                s2[i] = x0[i] + 0.5 * h * k1[i];
            }
            model.flow(ws, &s2, u, &mut k2);
            for i in 0..n {
                s3[i] = x0[i] + 0.5 * h * k2[i];
            }
            model.flow(ws, &s3, u, &mut k1); // k3 reuses the buffer
            for i in 0..n {
                s4[i] = x0[i] + h * k1[i];
            }
            // Reverse through the four stages.
            let mut x_bar = a.clone();
            // Stage 4.
            for i in 0..n {
                kb[i] = h / 6.0 * a[i];
            }
            sb.iter_mut().for_each(|v| *v = 0.0);
            model.flow_vjp(ws, &s4, u, &kb, &mut sb, grad);
            for i in 0..n {
                x_bar[i] += sb[i];
                kb[i] = h / 3.0 * a[i] + h * sb[i];
            }
            // Stage 3.
            sb.iter_mut().for_each(|v| *v = 0.0);
            model.flow_vjp(ws, &s3, u, &kb, &mut sb, grad);
            for i in 0..n {
                x_bar[i] += sb[i];
                kb[i] = h / 3.0 * a[i] + 0.5 * h * sb[i];
            }
            // Stage 2.
            sb.iter_mut().for_each(|v| *v = 0.0);
            model.flow_vjp(ws, &s2, u, &kb, &mut sb, grad);
            for i in 0..n {
                x_bar[i] += sb[i];
                kb[i] = h / 6.0 * a[i] + 0.5 * h * sb[i];
            }
            // Stage 1.
            sb.iter_mut().for_each(|v| *v = 0.0);
            model.flow_vjp(ws, &x0, u, &kb, &mut sb, grad);
            for i in 0..n {
                x_bar[i] += sb[i];
            }
            a.copy_from_slice(&x_bar);
        }
    }
    model.init_state_vjp(ws, &seg.obs[0], &a, grad);
    Ok(terms)
}

fn adjoint_segment<M: TrainableDynamics>(
    model: &M,
    ws: &mut FlowWorkspace,
    seg: &Segment,
    loss: &dyn SampleLoss,
    substeps: usize,
    grad: &mut [f64],
) -> Result<LossTerms, OdeError> {
    let n = model.state_dim();
    let np = model.param_len();
    let substeps = substeps.max(1);
    let n_samples = seg.times.len();
    if n_samples < 2 || seg.obs.len() != n_samples {
        return Err(OdeError::BadGrid);
    }
    let u = &seg.control;
    // Forward pass to collect predictions and loss seeds at the sample times.
    let mut x = vec![0.0; n];
    model.init_state(ws, &seg.obs[0], &mut x);
    let mut scratch = Rk4Scratch::new();
    let mut sample_states: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    sample_states.push(x.clone());
    let mut terms = LossTerms::default();
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(n_samples - 1);
    let mut obs = vec![0.0; model.obs_dim()];
    for k in 0..n_samples - 1 {
        let h = (seg.times[k + 1] - seg.times[k]) / substeps as f64;
        for _ in 0..substeps {
            rk4_step(
                &mut |xs: &[f64], dxs: &mut [f64]| {
                    model.flow(ws, xs, u, dxs);
                    Ok(())
                },
                &mut x,
                h,
                &mut scratch,
            )?;
        }
        sample_states.push(x.clone());
        model.observe(ws, &x, &mut obs);
        let mut seed = vec![0.0; model.obs_dim()];
        let t = loss.eval(&obs, &seg.obs[k + 1], &mut seed);
        terms.add(&t);
        seeds.push(seed);
    }
    // Backward: augmented state s = (x, a, dtheta), integrated in reverse.
    // The adjoint is reset (incremented) at each sample time.
    let mut adj = AdjointState { a: vec![0.0; n], dtheta: vec![0.0; np] };
    let mut s = vec![0.0; 2 * n + np];
    s[..n].copy_from_slice(&sample_states[n_samples - 1]);
    for k in (0..n_samples - 1).rev() {
        // Inject the loss gradient at t_{k+1}.
        adj.a.iter_mut().for_each(|v| *v = 0.0);
        model.observe_vjp(ws, &s[..n], &seeds[k], &mut adj.a, &mut adj.dtheta);
        for i in 0..n {
            s[n + i] += adj.a[i];
        }
        s[2 * n..].copy_from_slice(&adj.dtheta);
        let h = -(seg.times[k + 1] - seg.times[k]) / substeps as f64;
        for _ in 0..substeps {
            rk4_step(
                &mut |ss: &[f64], dss: &mut [f64]| {
                    // dx/dt = f; da/dt = -(df/dx)^T a; dtheta/dt = -(df/dtheta)^T a.
                    let (xs, rest) = ss.split_at(n);
                    let (a_s, _) = rest.split_at(n);
                    let (dx, drest) = dss.split_at_mut(n);
                    let (da, dth) = drest.split_at_mut(n);
                    model.flow(ws, xs, u, dx);
                    da.iter_mut().for_each(|v| *v = 0.0);
                    dth.iter_mut().for_each(|v| *v = 0.0);
                    model.flow_vjp(ws, xs, u, a_s, da, dth);
                    da.iter_mut().for_each(|v| *v = -*v);
                    dth.iter_mut().for_each(|v| *v = -*v);
                    Ok(())
                },
                &mut s,
                h,
                &mut scratch,
            )?;
        }
        adj.dtheta.copy_from_slice(&s[2 * n..]);
    }
    // Initial-state parameter dependence.
    let a0 = s[n..2 * n].to_vec();
    model.init_state_vjp(ws, &seg.obs[0], &a0, &mut adj.dtheta);
    for (g, d) in grad.iter_mut().zip(adj.dtheta.iter()) {
        *g += d;
    }
    Ok(terms)
}

/// Batched loss gradient, parallel over segments with a deterministic
/// chunk-ordered reduction. Returns the summed loss terms; `grad` receives
/// the summed gradient.
pub fn loss_gradient<M: TrainableDynamics>(
    model: &M,
    batch: &[&Segment],
    loss: &(dyn SampleLoss + Sync),
    mode: GradMode,
    substeps: usize,
    grad: &mut [f64],
) -> Result<LossTerms, OdeError> {
    let np = model.param_len();
    let n_chunk = rayon::current_num_threads().max(1) * 2;
    let chunk = batch.len().div_ceil(n_chunk).max(1);
    let results: Vec<Result<(LossTerms, Vec<f64>), OdeError>> = batch
        .par_chunks(chunk)
        .map(|segs| {
            let mut ws = FlowWorkspace::new();
            let mut g = vec![0.0; np];
            let mut t = LossTerms::default();
            for seg in segs {
                let lt = segment_loss_gradient(model, &mut ws, seg, loss, mode, substeps, &mut g)?;
                t.add(&lt);
            }
            Ok((t, g))
        })
        .collect();
    let mut terms = LossTerms::default();
    for r in results {
        let (t, g) = r?;
        terms.add(&t);
        for (acc, v) in grad.iter_mut().zip(g.iter()) {
            *acc += v;
        }
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FlowWorkspace;
    use crate::liegroup::GroupTag;

    #[test]
    fn constant_flow_stays_constant() {
        let states = integrate(
            |_x, dx| {
                dx.iter_mut().for_each(|v| *v = 0.0);
                Ok(())
            },
            &[1.0, -2.0],
            &[0.0, 0.5, 1.0],
            &Method::Rk4 { substeps: 4 },
        )
        .unwrap();
        assert_eq!(states[2], vec![1.0, -2.0]);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let states = integrate(
            |x, dx| {
                dx[0] = -x[0];
                Ok(())
            },
            &[1.0],
            &[0.0, 1.0],
            &Method::Dopri5 { rtol: 1e-8, atol: 1e-10 },
        )
        .unwrap();
        let got = states[1][0];
        assert!((got - (-1.0f64).exp()).abs() < 1e-8, "{got}");
    }

    #[test]
    fn dopri5_tolerance_scan_shows_fifth_order_controller() {
        // On x' = -x over [0, 2], the achieved error should scale roughly
        // linearly with the tolerance (exponent in a generous band).
        let err_at = |tol: f64| {
            let states = integrate(
                |x: &[f64], dx: &mut [f64]| {
                    dx[0] = -x[0];
                    Ok(())
                },
                &[1.0],
                &[0.0, 2.0],
                &Method::Dopri5 { rtol: tol, atol: tol * 1e-2 },
            )
            .unwrap();
            (states[1][0] - (-2.0f64).exp()).abs().max(1e-16)
        };
        let e1 = err_at(1e-5);
        let e2 = err_at(1e-8);
        assert!(e2 < e1, "{e1} vs {e2}");
        let slope = (e1 / e2).log10() / 3.0;
        assert!((0.5..=1.6).contains(&slope), "tolerance scaling exponent {slope}");
    }

    #[test]
    fn bad_grid_is_rejected() {
        let r = integrate(
            |_x, _dx| Ok(()),
            &[0.0],
            &[0.0, 0.0],
            &Method::Rk4 { substeps: 1 },
        );
        assert!(matches!(r, Err(OdeError::BadGrid)));
    }

    #[test]
    fn constraint_metrics_on_exact_rotation() {
        let r = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (d, o) = constraint_metrics(&r);
        assert_eq!((d, o), (0.0, 0.0));
    }

    #[test]
    fn constraint_metrics_on_doubled_identity() {
        let r = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        let (d, o) = constraint_metrics(&r);
        assert!((d - 7.0).abs() < 1e-14);
        assert!((o - 27f64.sqrt()).abs() < 1e-14);
    }

    /// Toy flow `xdot = theta * x` with one parameter, for analytic gradient
    /// checks of the solver reverse passes.
    #[derive(Clone)]
    struct ScalarLinear {
        theta: f64,
    }

    impl TrainableDynamics for ScalarLinear {
        fn group(&self) -> GroupTag {
            GroupTag::So2
        }
        fn control_dim(&self) -> usize {
            0
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn param_len(&self) -> usize {
            1
        }
        fn params(&self) -> &[f64] {
            std::slice::from_ref(&self.theta)
        }
        fn params_mut(&mut self) -> &mut [f64] {
            std::slice::from_mut(&mut self.theta)
        }
        fn flow(&self, _ws: &mut FlowWorkspace, x: &[f64], _u: &[f64], dx: &mut [f64]) {
            dx[0] = self.theta * x[0];
        }
        fn flow_vjp(
            &self,
            _ws: &mut FlowWorkspace,
            x: &[f64],
            _u: &[f64],
            cot: &[f64],
            x_bar: &mut [f64],
            grad: &mut [f64],
        ) {
            x_bar[0] += self.theta * cot[0];
            grad[0] += x[0] * cot[0];
        }
        fn init_state(&self, _ws: &mut FlowWorkspace, obs: &[f64], x0: &mut [f64]) {
            x0.copy_from_slice(obs);
        }
        fn init_state_vjp(&self, _w: &mut FlowWorkspace, _o: &[f64], _x: &[f64], _g: &mut [f64]) {}
        fn observe(&self, _ws: &mut FlowWorkspace, x: &[f64], obs: &mut [f64]) {
            obs.copy_from_slice(x);
        }
        fn observe_vjp(
            &self,
            _ws: &mut FlowWorkspace,
            _x: &[f64],
            obs_bar: &[f64],
            x_bar: &mut [f64],
            _grad: &mut [f64],
        ) {
            x_bar[0] += obs_bar[0];
        }
    }

    struct L2Loss;
    impl SampleLoss for L2Loss {
        fn eval(&self, pred: &[f64], truth: &[f64], seed: &mut [f64]) -> LossTerms {
            let mut t = LossTerms { samples: 1, ..Default::default() };
            for i in 0..pred.len() {
                let e = pred[i] - truth[i];
                t.total += e * e;
                seed[i] = 2.0 * e;
            }
            t
        }
    }

    #[test]
    fn scalar_linear_ode_gradient_matches_closed_form() {
        // x(t) = x0 e^{theta t}; L = (x(T) - y)^2
        // dL/dtheta = 2 (x(T) - y) * x0 T e^{theta T}.
        let model = ScalarLinear { theta: 0.37 };
        let x0 = 1.3;
        let t_end = 0.8;
        let y = 0.9;
        let seg = Segment {
            times: vec![0.0, t_end],
            obs: vec![vec![x0], vec![y]],
            control: vec![],
        };
        for mode in [GradMode::BackpropSteps, GradMode::Adjoint] {
            let mut ws = FlowWorkspace::new();
            let mut grad = vec![0.0];
            let terms =
                segment_loss_gradient(&model, &mut ws, &seg, &L2Loss, mode, 64, &mut grad)
                    .unwrap();
            let xt = x0 * (model.theta * t_end).exp();
            let want_loss = (xt - y) * (xt - y);
            let want_grad = 2.0 * (xt - y) * x0 * t_end * (model.theta * t_end).exp();
            assert!((terms.total - want_loss).abs() < 1e-8, "{mode:?} loss");
            assert!(
                (grad[0] - want_grad).abs() / want_grad.abs() < 1e-6,
                "{mode:?}: {} vs {want_grad}",
                grad[0]
            );
        }
    }

    #[test]
    fn loss_independent_of_params_gives_zero_gradient() {
        struct ZeroLoss;
        impl SampleLoss for ZeroLoss {
            fn eval(&self, _p: &[f64], _t: &[f64], _s: &mut [f64]) -> LossTerms {
                LossTerms { samples: 1, ..Default::default() }
            }
        }
        let model = ScalarLinear { theta: 0.5 };
        let seg = Segment {
            times: vec![0.0, 1.0],
            obs: vec![vec![1.0], vec![2.0]],
            control: vec![],
        };
        let mut ws = FlowWorkspace::new();
        let mut grad = vec![0.0];
        segment_loss_gradient(
            &model,
            &mut ws,
            &seg,
            &ZeroLoss,
            GradMode::BackpropSteps,
            8,
            &mut grad,
        )
        .unwrap();
        assert_eq!(grad[0], 0.0);
    }
}
