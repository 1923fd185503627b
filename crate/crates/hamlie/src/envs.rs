//! Ground-truth simulators and data-collection pipelines: a pendulum on
//! SO(3), an omnidirectional SE(2) vehicle, and a quadrotor on SE(3), plus
//! analytic reference trajectories for tracking experiments.
//!
//! Each simulator integrates its own minimal native state (angles where the
//! manifold allows it; the quadrotor re-orthonormalizes its rotation rows
//! after every internal step) and exports observations in the flattened
//! `(coords, zeta)` layout shared with the learned models.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::liegroup::GroupTag;
use crate::odeint::Segment;
use crate::training::TrajectoryDataset;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment parameter: {0}")]
    BadParam(String),
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
    #[error("unknown reference trajectory '{0}'")]
    UnknownReference(String),
    #[error("environment diverged during collection (non-finite state)")]
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EnvKind {
    Pendulum,
    Se2Vehicle,
    Quadrotor,
}

impl EnvKind {
    pub fn from_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "pendulum" => Ok(EnvKind::Pendulum),
            "se2" | "se2_vehicle" => Ok(EnvKind::Se2Vehicle),
            "quadrotor" | "quad" => Ok(EnvKind::Quadrotor),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

/// Pendulum with dynamics `phidot' = -g_c sin(phi) + gain u - damping phidot`.
/// The implied energy terms are `M = 1/gain`, `V = (g_c/gain)(1 - cos phi)`,
/// `D = damping/gain`, `B = 1`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PendulumParams {
    pub gravity_coeff: f64,
    pub input_gain: f64,
    pub damping: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { gravity_coeff: 15.0, input_gain: 3.0, damping: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Se2Params {
    pub mass: f64,
    pub inertia: f64,
}

impl Default for Se2Params {
    fn default() -> Self {
        Self { mass: 1.0, inertia: 0.05 }
    }
}

/// Crazyflie-class defaults. These are configuration values, not published
/// ground truth; comparisons against learned models always use the configured
/// numbers.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct QuadParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub gravity: f64,
    pub drag_v: f64,
    pub drag_w: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.027,
            inertia: [1.4e-5, 1.4e-5, 2.2e-5],
            gravity: 9.81,
            drag_v: 0.0,
            drag_w: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub enum EnvParams {
    Pendulum(PendulumParams),
    Se2Vehicle(Se2Params),
    Quadrotor(QuadParams),
}

/// A fully specified simulator: physical parameters, sampling interval and
/// symmetric control bounds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnvSpec {
    pub params: EnvParams,
    pub dt: f64,
    pub control_bounds: Vec<f64>,
}

impl EnvSpec {
    pub fn new(params: EnvParams, dt: f64, control_bounds: Vec<f64>) -> Result<Self, EnvError> {
        if dt <= 0.0 {
            return Err(EnvError::BadParam(format!("dt = {dt} must be positive")));
        }
        match &params {
            EnvParams::Pendulum(p) => {
                if p.input_gain <= 0.0 {
                    return Err(EnvError::BadParam("pendulum input gain must be positive".into()));
                }
            }
            EnvParams::Se2Vehicle(p) => {
                if p.mass <= 0.0 || p.inertia <= 0.0 {
                    return Err(EnvError::BadParam("SE(2) mass and inertia must be positive".into()));
                }
            }
            EnvParams::Quadrotor(p) => {
                if p.mass <= 0.0 || p.inertia.iter().any(|&j| j <= 0.0) {
                    return Err(EnvError::BadParam("quadrotor mass/inertia must be positive".into()));
                }
            }
        }
        Ok(Self { params, dt, control_bounds })
    }

    /// Pendulum sampled at 0.05 s with |u| <= 2.
    pub fn pendulum(damping: f64) -> Self {
        Self::new(
            EnvParams::Pendulum(PendulumParams { damping, ..Default::default() }),
            0.05,
            vec![2.0],
        )
        .expect("valid defaults")
    }

    /// Planar vehicle sampled at 1/240 s.
    pub fn se2_vehicle() -> Self {
        Self::new(
            EnvParams::Se2Vehicle(Se2Params::default()),
            1.0 / 240.0,
            vec![2.0, 2.0, 0.4],
        )
        .expect("valid defaults")
    }

    /// Quadrotor sampled at 1/120 s; thrust bound is 2x hover.
    pub fn quadrotor() -> Self {
        let p = QuadParams::default();
        let hover = p.mass * p.gravity;
        Self::new(
            EnvParams::Quadrotor(p),
            1.0 / 120.0,
            vec![2.0 * hover, 2e-3, 2e-3, 2e-3],
        )
        .expect("valid defaults")
    }

    pub fn kind(&self) -> EnvKind {
        match self.params {
            EnvParams::Pendulum(_) => EnvKind::Pendulum,
            EnvParams::Se2Vehicle(_) => EnvKind::Se2Vehicle,
            EnvParams::Quadrotor(_) => EnvKind::Quadrotor,
        }
    }

    pub fn group(&self) -> GroupTag {
        match self.kind() {
            EnvKind::Pendulum => GroupTag::So3,
            EnvKind::Se2Vehicle => GroupTag::Se2,
            EnvKind::Quadrotor => GroupTag::Se3,
        }
    }

    pub fn control_dim(&self) -> usize {
        self.control_bounds.len()
    }

    /// Native simulator state length.
    pub fn native_dim(&self) -> usize {
        match self.kind() {
            EnvKind::Pendulum => 2,
            EnvKind::Se2Vehicle => 6,
            EnvKind::Quadrotor => 18,
        }
    }

    /// Time derivative of the native state.
    pub fn derivative(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        match &self.params {
            EnvParams::Pendulum(p) => {
                let (dphi, ddphi) = pendulum_dynamics(x[0], x[1], u[0], p);
                dx[0] = dphi;
                dx[1] = ddphi;
            }
            EnvParams::Se2Vehicle(p) => se2_vehicle_dynamics(x, u, p, dx),
            EnvParams::Quadrotor(p) => quadrotor_dynamics(x, u, p, dx),
        }
    }

    /// Advances the native state by `dt` with dense internal RK4 substeps.
    /// The quadrotor's rotation rows are re-orthonormalized after each
    /// internal step, as a physics engine would do.
    pub fn step(&self, x: &mut [f64], u: &[f64], dt: f64) {
        let max_h = 1e-3;
        let n_sub = (dt / max_h).ceil().max(1.0) as usize;
        let h = dt / n_sub as f64;
        let n = x.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for _ in 0..n_sub {
            self.derivative(x, u, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            self.derivative(&tmp, u, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            self.derivative(&tmp, u, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            self.derivative(&tmp, u, &mut k4);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if matches!(self.kind(), EnvKind::Quadrotor) {
                orthonormalize_rows(&mut x[3..12]);
            }
        }
    }

    /// Exports the native state as the flattened observation `(coords, zeta)`.
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        match self.kind() {
            EnvKind::Pendulum => {
                let (c, s) = (x[0].cos(), x[0].sin());
                vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, x[1]]
            }
            EnvKind::Se2Vehicle => {
                let (c, s) = (x[2].cos(), x[2].sin());
                vec![x[0], x[1], c, -s, s, c, x[3], x[4], x[5]]
            }
            EnvKind::Quadrotor => x.to_vec(),
        }
    }

    /// Ground-truth total energy of a native state.
    pub fn energy(&self, x: &[f64]) -> f64 {
        match &self.params {
            EnvParams::Pendulum(p) => {
                let m = 1.0 / p.input_gain;
                0.5 * m * x[1] * x[1] + (p.gravity_coeff / p.input_gain) * (1.0 - x[0].cos())
            }
            EnvParams::Se2Vehicle(p) => {
                0.5 * p.mass * (x[3] * x[3] + x[4] * x[4]) + 0.5 * p.inertia * x[5] * x[5]
            }
            EnvParams::Quadrotor(p) => {
                let v = &x[12..15];
                let w = &x[15..18];
                let t = 0.5 * p.mass * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
                    + 0.5
                        * (p.inertia[0] * w[0] * w[0]
                            + p.inertia[1] * w[1] * w[1]
                            + p.inertia[2] * w[2] * w[2]);
                t + p.mass * p.gravity * x[2]
            }
        }
    }

    /// Random initial state for excitation.
    pub fn sample_state(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        match self.kind() {
            EnvKind::Pendulum => {
                vec![
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    rng.gen_range(-5.0..5.0),
                ]
            }
            EnvKind::Se2Vehicle => {
                vec![
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.8..0.8),
                ]
            }
            EnvKind::Quadrotor => {
                let mut x = vec![0.0; 18];
                for item in x.iter_mut().take(3) {
                    *item = rng.gen_range(-0.8..0.8);
                }
                let yaw = rng.gen_range(-0.5..0.5);
                let tilt_axis =
                    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
                let tilt = rng.gen_range(0.0..0.15);
                let axis = if tilt_axis.norm() < 1e-9 {
                    Vector3::x()
                } else {
                    tilt_axis.normalize()
                };
                let rot = rotation_z(yaw) * rodrigues(&(axis * tilt));
                for i in 0..3 {
                    for j in 0..3 {
                        x[3 + 3 * i + j] = rot[(i, j)];
                    }
                }
                for i in 0..3 {
                    x[12 + i] = rng.gen_range(-0.3..0.3);
                    x[15 + i] = rng.gen_range(-0.5..0.5);
                }
                x
            }
        }
    }

    pub fn sample_control(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        self.control_bounds.iter().map(|&b| rng.gen_range(-b..b)).collect()
    }

    fn clamp_control(&self, u: &mut [f64]) {
        for (v, &b) in u.iter_mut().zip(self.control_bounds.iter()) {
            *v = v.clamp(-b, b);
        }
        // Thrust is non-negative on the quadrotor.
        if matches!(self.kind(), EnvKind::Quadrotor) {
            u[0] = u[0].max(0.0);
        }
    }
}

/// `(phidot, phiddot)` for the pendulum.
pub fn pendulum_dynamics(phi: f64, phidot: f64, u: f64, p: &PendulumParams) -> (f64, f64) {
    (phidot, -p.gravity_coeff * phi.sin() + p.input_gain * u - p.damping * phidot)
}

/// Planar rigid body with body-frame forces `u = [f_x, f_y, tau]`.
/// State `[x, y, phi, v_x, v_y, omega]`.
pub fn se2_vehicle_dynamics(x: &[f64], u: &[f64], p: &Se2Params, dx: &mut [f64]) {
    let (c, s) = (x[2].cos(), x[2].sin());
    let (vx, vy, w) = (x[3], x[4], x[5]);
    dx[0] = c * vx - s * vy;
    dx[1] = s * vx + c * vy;
    dx[2] = w;
    // Body-frame Newton equations; the Coriolis terms come from expressing
    // the velocity in the rotating frame.
    dx[3] = vy * w + u[0] / p.mass;
    dx[4] = -vx * w + u[1] / p.mass;
    dx[5] = u[2] / p.inertia;
}

/// Newton-Euler quadrotor with thrust along body z and body torques,
/// `u = [f, tau_x, tau_y, tau_z]`. State `[p, rows of R, v, omega]`.
pub fn quadrotor_dynamics(x: &[f64], u: &[f64], p: &QuadParams, dx: &mut [f64]) {
    let r = &x[3..12];
    let v = Vector3::new(x[12], x[13], x[14]);
    let w = Vector3::new(x[15], x[16], x[17]);
    // dp = R v (rows r_i).
    for i in 0..3 {
        dx[i] = r[3 * i] * v[0] + r[3 * i + 1] * v[1] + r[3 * i + 2] * v[2];
    }
    // dr_i = r_i x w.
    for i in 0..3 {
        let ri = Vector3::new(r[3 * i], r[3 * i + 1], r[3 * i + 2]);
        let d = ri.cross(&w);
        dx[3 + 3 * i] = d[0];
        dx[4 + 3 * i] = d[1];
        dx[5 + 3 * i] = d[2];
    }
    // Body-frame accelerations: gravity enters through R^T e3, which with
    // row storage is the third row of R.
    let rte3 = Vector3::new(r[6], r[7], r[8]);
    let dv = v.cross(&w) + Vector3::new(0.0, 0.0, u[0] / p.mass)
        - p.gravity * rte3
        - (p.drag_v / p.mass) * v;
    let jw = Vector3::new(p.inertia[0] * w[0], p.inertia[1] * w[1], p.inertia[2] * w[2]);
    let torque = Vector3::new(u[1], u[2], u[3]);
    let jwxw = jw.cross(&w);
    let dw = Vector3::new(
        (jwxw[0] + torque[0] - p.drag_w * w[0]) / p.inertia[0],
        (jwxw[1] + torque[1] - p.drag_w * w[1]) / p.inertia[1],
        (jwxw[2] + torque[2] - p.drag_w * w[2]) / p.inertia[2],
    );
    for i in 0..3 {
        dx[12 + i] = dv[i];
        dx[15 + i] = dw[i];
    }
}

/// Gram-Schmidt on the three stored rows.
fn orthonormalize_rows(r: &mut [f64]) {
    let mut a = Vector3::new(r[0], r[1], r[2]);
    a /= a.norm();
    let mut b = Vector3::new(r[3], r[4], r[5]);
    b -= a * a.dot(&b);
    b /= b.norm();
    let c = a.cross(&b);
    r[0] = a[0];
    r[1] = a[1];
    r[2] = a[2];
    r[3] = b[0];
    r[4] = b[1];
    r[5] = b[2];
    r[6] = c[0];
    r[7] = c[1];
    r[8] = c[2];
}

pub(crate) fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity();
    }
    let k = w / theta;
    let kh = Matrix3::new(0.0, -k[2], k[1], k[2], 0.0, -k[0], -k[1], k[0], 0.0);
    Matrix3::identity() + theta.sin() * kh + (1.0 - theta.cos()) * kh * kh
}

pub(crate) fn rotation_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Excitation mode for data collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Excitation {
    /// Random constant control per segment from a random initial state.
    RandomConstant,
    /// Closed-loop waypoint runs under a PD controller whose output is held
    /// constant over each segment window.
    WaypointPd,
}

/// Shape of the collected dataset: `segments` segments of `steps` intervals.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CollectionPlan {
    pub excitation: Excitation,
    pub steps_per_segment: usize,
    pub segments: usize,
    pub seed: u64,
}

impl CollectionPlan {
    pub fn random_constant(steps: usize, segments: usize, seed: u64) -> Self {
        Self { excitation: Excitation::RandomConstant, steps_per_segment: steps, segments, seed }
    }

    pub fn waypoint_pd(steps: usize, segments: usize, seed: u64) -> Self {
        Self { excitation: Excitation::WaypointPd, steps_per_segment: steps, segments, seed }
    }
}

/// Simple PD loop used only to excite the waypoint environments.
fn pd_control(env: &EnvSpec, x: &[f64], target: &[f64], u: &mut [f64]) {
    match &env.params {
        EnvParams::Pendulum(_) => {
            u[0] = 0.0;
        }
        EnvParams::Se2Vehicle(p) => {
            let (c, s) = (x[2].cos(), x[2].sin());
            let ex = target[0] - x[0];
            let ey = target[1] - x[1];
            // Rotate the world-frame error into the body frame.
            let bx = c * ex + s * ey;
            let by = -s * ex + c * ey;
            u[0] = p.mass * (4.0 * bx - 2.5 * x[3]);
            u[1] = p.mass * (4.0 * by - 2.5 * x[4]);
            let mut ephi = target[2] - x[2];
            while ephi > std::f64::consts::PI {
                ephi -= 2.0 * std::f64::consts::PI;
            }
            while ephi < -std::f64::consts::PI {
                ephi += 2.0 * std::f64::consts::PI;
            }
            u[2] = p.inertia * (20.0 * ephi - 6.0 * x[5]);
        }
        EnvParams::Quadrotor(p) => {
            let rot = Matrix3::from_fn(|i, j| x[3 + 3 * i + j]);
            let v_world = rot * Vector3::new(x[12], x[13], x[14]);
            let pos = Vector3::new(x[0], x[1], x[2]);
            let tgt = Vector3::new(target[0], target[1], target[2]);
            let a_des = 4.0 * (tgt - pos) - 3.0 * v_world + Vector3::new(0.0, 0.0, p.gravity);
            let f_des = p.mass * a_des;
            let body_z = Vector3::new(rot[(0, 2)], rot[(1, 2)], rot[(2, 2)]);
            u[0] = f_des.dot(&body_z).max(0.05 * p.mass * p.gravity);
            // Desired attitude from thrust direction and target yaw.
            let z_des = if f_des.norm() > 1e-8 { f_des.normalize() } else { Vector3::z() };
            let yaw = target[3];
            let y_ref = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
            let x_des = y_ref.cross(&z_des);
            let x_des = if x_des.norm() > 1e-8 { x_des.normalize() } else { Vector3::x() };
            let y_des = z_des.cross(&x_des);
            let r_des = Matrix3::from_columns(&[x_des, y_des, z_des]);
            let e_mat = r_des.transpose() * rot - rot.transpose() * r_des;
            let e_r = 0.5 * Vector3::new(e_mat[(2, 1)], e_mat[(0, 2)], e_mat[(1, 0)]);
            let w = Vector3::new(x[15], x[16], x[17]);
            let jw = Vector3::new(p.inertia[0] * w[0], p.inertia[1] * w[1], p.inertia[2] * w[2]);
            let feedback = -250.0 * e_r - 40.0 * w;
            let tau = Vector3::new(
                p.inertia[0] * feedback[0],
                p.inertia[1] * feedback[1],
                p.inertia[2] * feedback[2],
            ) - w.cross(&jw);
            u[1] = tau[0];
            u[2] = tau[1];
            u[3] = tau[2];
        }
    }
    env.clamp_control(u);
}

fn sample_waypoint(env: &EnvSpec, rng: &mut ChaCha12Rng) -> Vec<f64> {
    match env.kind() {
        EnvKind::Pendulum => vec![0.0],
        EnvKind::Se2Vehicle => vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        ],
        EnvKind::Quadrotor => vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ],
    }
}

/// Collects a trajectory dataset with the constant-control-per-segment
/// structure: each segment holds `steps_per_segment + 1` samples under one
/// held control vector.
pub fn collect_dataset(env: &EnvSpec, plan: &CollectionPlan) -> Result<TrajectoryDataset, EnvError> {
    let mut rng = ChaCha12Rng::seed_from_u64(plan.seed);
    let n_steps = plan.steps_per_segment;
    let dt = env.dt;
    let mut segments = Vec::with_capacity(plan.segments);
    match plan.excitation {
        Excitation::RandomConstant => {
            for _ in 0..plan.segments {
                let mut x = env.sample_state(&mut rng);
                let u = env.sample_control(&mut rng);
                let mut times = Vec::with_capacity(n_steps + 1);
                let mut obs = Vec::with_capacity(n_steps + 1);
                times.push(0.0);
                obs.push(env.observe(&x));
                for k in 0..n_steps {
                    env.step(&mut x, &u, dt);
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(EnvError::Diverged);
                    }
                    times.push(dt * (k + 1) as f64);
                    obs.push(env.observe(&x));
                }
                segments.push(Segment { times, obs, control: u });
            }
        }
        Excitation::WaypointPd => {
            let mut u = vec![0.0; env.control_dim()];
            while segments.len() < plan.segments {
                let mut x = env.sample_state(&mut rng);
                let target = sample_waypoint(env, &mut rng);
                // One closed-loop run contributes several held-control windows.
                let windows_per_run = match env.kind() {
                    EnvKind::Se2Vehicle => 48,
                    EnvKind::Quadrotor => 60,
                    EnvKind::Pendulum => 8,
                };
                for _ in 0..windows_per_run {
                    if segments.len() >= plan.segments {
                        break;
                    }
                    pd_control(env, &x, &target, &mut u);
                    let mut times = Vec::with_capacity(n_steps + 1);
                    let mut obs = Vec::with_capacity(n_steps + 1);
                    times.push(0.0);
                    obs.push(env.observe(&x));
                    for k in 0..n_steps {
                        env.step(&mut x, &u, dt);
                        if x.iter().any(|v| !v.is_finite()) {
                            return Err(EnvError::Diverged);
                        }
                        times.push(dt * (k + 1) as f64);
                        obs.push(env.observe(&x));
                    }
                    segments.push(Segment { times, obs, control: u.clone() });
                }
            }
        }
    }
    Ok(TrajectoryDataset { group: env.group(), control_dim: env.control_dim(), dt, segments })
}

/// Analytic reference point with the derivatives the tracking controller
/// needs (position up to jerk, yaw up to acceleration).
#[derive(Debug, Clone, Copy, Default)]
pub struct RefPoint {
    pub p: [f64; 3],
    pub dp: [f64; 3],
    pub ddp: [f64; 3],
    pub dddp: [f64; 3],
    pub yaw: f64,
    pub dyaw: f64,
    pub ddyaw: f64,
}

#[derive(Debug, Clone)]
pub enum ReferenceTrajectory {
    VerticalCircle { radius: f64, period: f64, center: [f64; 3] },
    VerticalLemniscate { radius: f64, period: f64, center: [f64; 3] },
    HorizontalLemniscate { radius: f64, period: f64, center: [f64; 3] },
    PiecewiseLinear(PiecewiseLinear),
    Diamond(PiecewiseLinear),
}

impl ReferenceTrajectory {
    pub fn by_name(name: &str, scale: f64, period: f64) -> Result<Self, EnvError> {
        match name {
            "vertical_circle" => Ok(ReferenceTrajectory::VerticalCircle {
                radius: scale,
                period,
                center: [0.0, 0.0, 0.0],
            }),
            "vertical_lemniscate" => Ok(ReferenceTrajectory::VerticalLemniscate {
                radius: scale,
                period,
                center: [0.0, 0.0, 0.0],
            }),
            "horizontal_lemniscate" => Ok(ReferenceTrajectory::HorizontalLemniscate {
                radius: scale,
                period,
                center: [0.0, 0.0, 0.0],
            }),
            "piecewise_linear" => {
                let pts = vec![
                    [0.0, 0.0, 0.0],
                    [scale, 0.0, 0.5 * scale],
                    [scale, scale, 0.0],
                    [0.0, scale, 0.5 * scale],
                    [0.0, 0.0, 0.0],
                ];
                let speed = 4.0 * scale * (1.25f64).sqrt() / period;
                Ok(ReferenceTrajectory::PiecewiseLinear(PiecewiseLinear::new(pts, speed, 0.2)))
            }
            "diamond" => {
                let pts = vec![
                    [0.0, 0.0, 0.0],
                    [scale, 0.0, scale],
                    [2.0 * scale, 0.0, 0.0],
                    [scale, 0.0, -scale],
                    [0.0, 0.0, 0.0],
                ];
                let speed = 4.0 * scale * (2.0f64).sqrt() / period;
                Ok(ReferenceTrajectory::Diamond(PiecewiseLinear::new(pts, speed, 0.4)))
            }
            other => Err(EnvError::UnknownReference(other.to_string())),
        }
    }

    pub fn eval(&self, t: f64) -> RefPoint {
        match self {
            ReferenceTrajectory::VerticalCircle { radius, period, center } => {
                let a = 2.0 * std::f64::consts::PI / period;
                let (s, c) = (a * t).sin_cos();
                let r = *radius;
                RefPoint {
                    p: [center[0] + r * s, center[1], center[2] + r * (1.0 - c)],
                    dp: [r * a * c, 0.0, r * a * s],
                    ddp: [-r * a * a * s, 0.0, r * a * a * c],
                    dddp: [-r * a * a * a * c, 0.0, -r * a * a * a * s],
                    ..Default::default()
                }
            }
            ReferenceTrajectory::VerticalLemniscate { radius, period, center } => {
                lemniscate(*radius, *period, *center, t, true)
            }
            ReferenceTrajectory::HorizontalLemniscate { radius, period, center } => {
                lemniscate(*radius, *period, *center, t, false)
            }
            ReferenceTrajectory::PiecewiseLinear(pl) | ReferenceTrajectory::Diamond(pl) => {
                pl.eval(t)
            }
        }
    }

    /// Total duration for the piecewise shapes; periodic shapes report one
    /// period.
    pub fn duration(&self) -> f64 {
        match self {
            ReferenceTrajectory::VerticalCircle { period, .. }
            | ReferenceTrajectory::VerticalLemniscate { period, .. }
            | ReferenceTrajectory::HorizontalLemniscate { period, .. } => *period,
            ReferenceTrajectory::PiecewiseLinear(pl) | ReferenceTrajectory::Diamond(pl) => {
                pl.duration()
            }
        }
    }
}

fn lemniscate(radius: f64, period: f64, center: [f64; 3], t: f64, vertical: bool) -> RefPoint {
    let a = 2.0 * std::f64::consts::PI / period;
    let (s1, c1) = (a * t).sin_cos();
    let (s2, c2) = (2.0 * a * t).sin_cos();
    let r = radius;
    let (u, du, ddu, dddu) = (r * s1, r * a * c1, -r * a * a * s1, -r * a * a * a * c1);
    let h = 0.5 * r;
    let (v, dv, ddv, dddv) =
        (h * s2, 2.0 * h * a * c2, -4.0 * h * a * a * s2, -8.0 * h * a * a * a * c2);
    if vertical {
        RefPoint {
            p: [center[0] + u, center[1], center[2] + v],
            dp: [du, 0.0, dv],
            ddp: [ddu, 0.0, ddv],
            dddp: [dddu, 0.0, dddv],
            ..Default::default()
        }
    } else {
        RefPoint {
            p: [center[0] + u, center[1] + v, center[2]],
            dp: [du, dv, 0.0],
            ddp: [ddu, ddv, 0.0],
            dddp: [dddu, dddv, 0.0],
            ..Default::default()
        }
    }
}

/// Piecewise-linear waypoint path with quintic velocity blends at the corners
/// (and at the rest endpoints), so the position is C^2 and the jerk exists.
#[derive(Debug, Clone)]
pub struct PiecewiseLinear {
    start: [f64; 3],
    /// (center time, velocity change) per corner.
    corners: Vec<(f64, [f64; 3])>,
    blend: f64,
    total: f64,
}

impl PiecewiseLinear {
    pub fn new(points: Vec<[f64; 3]>, speed: f64, blend: f64) -> Self {
        assert!(points.len() >= 2);
        assert!(speed > 0.0);
        let mut segs = Vec::new();
        for w in points.windows(2) {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let dur = len / speed;
            let vel = [d[0] / dur, d[1] / dur, d[2] / dur];
            segs.push((dur, vel));
        }
        let min_dur = segs.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let blend = blend.min(0.9 * min_dur);
        // Corner centers: acceleration from rest, the interior corners, and
        // deceleration back to rest.
        let mut corners = Vec::new();
        let mut t = 0.5 * blend;
        let mut v_prev = [0.0; 3];
        for (dur, vel) in &segs {
            corners.push((t, [vel[0] - v_prev[0], vel[1] - v_prev[1], vel[2] - v_prev[2]]));
            t += dur;
            v_prev = *vel;
        }
        corners.push((t, [-v_prev[0], -v_prev[1], -v_prev[2]]));
        let total = t + 0.5 * blend;
        Self { start: points[0], corners, blend, total }
    }

    pub fn duration(&self) -> f64 {
        self.total
    }

    pub fn eval(&self, t: f64) -> RefPoint {
        let tau = self.blend;
        let mut out = RefPoint { p: self.start, ..Default::default() };
        for (tc, dv) in &self.corners {
            let alpha = ((t - tc) / tau + 0.5).clamp(0.0, 1.0);
            // Quintic smoothstep, its integral, and two derivatives.
            let s = alpha * alpha * alpha * (10.0 - 15.0 * alpha + 6.0 * alpha * alpha);
            let s_int = alpha.powi(4) * (2.5 - 3.0 * alpha + alpha * alpha);
            let sp = 30.0 * alpha * alpha * (1.0 - alpha) * (1.0 - alpha);
            let spp = 60.0 * alpha * (1.0 - alpha) * (1.0 - 2.0 * alpha);
            let in_blend = t > tc - 0.5 * tau && t < tc + 0.5 * tau;
            for i in 0..3 {
                let integral = if t <= tc - 0.5 * tau {
                    0.0
                } else if t >= tc + 0.5 * tau {
                    t - tc
                } else {
                    tau * s_int
                };
                out.p[i] += dv[i] * integral;
                out.dp[i] += dv[i] * s;
                if in_blend {
                    out.ddp[i] += dv[i] * sp / tau;
                    out.dddp[i] += dv[i] * spp / (tau * tau);
                }
            }
        }
        out
    }
}

/// Paired learned/truth head samples for the scale-factor estimate, gathered
/// over Halton-sampled states inside the training envelope.
pub fn scale_samples(
    env: &EnvSpec,
    model: &crate::nets::PortHamiltonianModel,
    n: usize,
) -> crate::training::ScaleSamples {
    use crate::training::{halton, ScaleKind, ScaleSamples};
    let mut out = ScaleSamples::default();
    for k in 0..n {
        let h1 = halton(k as u32 + 1, 2);
        let h2 = halton(k as u32 + 1, 3);
        let h3 = halton(k as u32 + 1, 5);
        let h4 = halton(k as u32 + 1, 7);
        match env.kind() {
            EnvKind::Pendulum => {
                let phi = (h1 - 0.5) * 2.0 * std::f64::consts::PI * 0.95;
                let native = [phi, 0.0];
                let obs = env.observe(&native);
                let q = crate::liegroup::GroupElement::from_coords(GroupTag::So3, &obs[..9])
                    .expect("valid rotation");
                let p = crate::liegroup::MomentumVector::zeros(GroupTag::So3);
                let hv = crate::dynamics::head_values(model, &q, &p);
                let pp = match &env.params {
                    EnvParams::Pendulum(pp) => pp,
                    _ => unreachable!(),
                };
                out.push(ScaleKind::MassInv, hv.minv_w[(2, 2)], pp.input_gain);
                out.push(ScaleKind::InputMatrix, hv.input_matrix[(2, 0)], 1.0);
                out.push(
                    ScaleKind::Potential,
                    hv.potential,
                    (pp.gravity_coeff / pp.input_gain) * (1.0 - phi.cos()),
                );
            }
            EnvKind::Se2Vehicle => {
                let native = [
                    (h1 - 0.5) * 2.0,
                    (h2 - 0.5) * 2.0,
                    (h3 - 0.5) * 2.0 * std::f64::consts::PI * 0.95,
                    0.0,
                    0.0,
                    0.0,
                ];
                let obs = env.observe(&native);
                let q = crate::liegroup::GroupElement::from_coords(GroupTag::Se2, &obs[..6])
                    .expect("valid pose");
                let p = crate::liegroup::MomentumVector::zeros(GroupTag::Se2);
                let hv = crate::dynamics::head_values(model, &q, &p);
                let pp = match &env.params {
                    EnvParams::Se2Vehicle(pp) => pp,
                    _ => unreachable!(),
                };
                let mv = hv.minv_v.as_ref().unwrap();
                for i in 0..2 {
                    for j in 0..2 {
                        let truth = if i == j { 1.0 / pp.mass } else { 0.0 };
                        out.push(ScaleKind::MassInv, mv[(i, j)], truth);
                    }
                }
                out.push(ScaleKind::MassInv, hv.minv_w[(0, 0)], 1.0 / pp.inertia);
                for i in 0..3 {
                    for j in 0..3 {
                        let truth = if i == j { 1.0 } else { 0.0 };
                        out.push(ScaleKind::InputMatrix, hv.input_matrix[(i, j)], truth);
                    }
                }
                out.push(ScaleKind::Potential, hv.potential, 0.0);
            }
            EnvKind::Quadrotor => {
                let mut native = vec![0.0; 18];
                native[0] = (h1 - 0.5) * 1.6;
                native[1] = (h2 - 0.5) * 1.6;
                native[2] = (h3 - 0.5) * 1.6;
                let rot = rotation_z((h4 - 0.5) * 1.0);
                for i in 0..3 {
                    for j in 0..3 {
                        native[3 + 3 * i + j] = rot[(i, j)];
                    }
                }
                let obs = env.observe(&native);
                let q = crate::liegroup::GroupElement::from_coords(GroupTag::Se3, &obs[..12])
                    .expect("valid pose");
                let p = crate::liegroup::MomentumVector::zeros(GroupTag::Se3);
                let hv = crate::dynamics::head_values(model, &q, &p);
                let pp = match &env.params {
                    EnvParams::Quadrotor(pp) => pp,
                    _ => unreachable!(),
                };
                let mv = hv.minv_v.as_ref().unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        let truth = if i == j { 1.0 / pp.mass } else { 0.0 };
                        out.push(ScaleKind::MassInv, mv[(i, j)], truth);
                        let truth_w = if i == j { 1.0 / pp.inertia[i] } else { 0.0 };
                        out.push(ScaleKind::MassInv, hv.minv_w[(i, j)], truth_w);
                    }
                }
                let mut b_true = DMatrix::zeros(6, 4);
                b_true[(2, 0)] = 1.0;
                b_true[(3, 1)] = 1.0;
                b_true[(4, 2)] = 1.0;
                b_true[(5, 3)] = 1.0;
                for i in 0..6 {
                    for j in 0..4 {
                        out.push(ScaleKind::InputMatrix, hv.input_matrix[(i, j)], b_true[(i, j)]);
                    }
                }
                out.push(ScaleKind::Potential, hv.potential, pp.mass * pp.gravity * native[2]);
            }
        }
    }
    out
}
