//! Energy-shaping and damping-injection (IDA-PBC) trajectory tracking from a
//! learned or ground-truth port-Hamiltonian model.
//!
//! The desired closed-loop energy is
//!
//! ```text
//!   H_d = 1/2 (p - p*)^T K_p (p - p*) + 1/2 tr(K_R (I - R*^T R))
//!       + 1/2 (mom - mom*)^T M^{-1} (mom - mom*)
//! ```
//!
//! and the control is `u = u_ES + u_DI`, with the energy-shaping part
//! cancelling the model dynamics and imposing the coordinate-error force, and
//! the damping injection `-B^+ K_d M^{-1}(mom - mom*)`. The kinetic shaping
//! choices are the common ones: `M_d = M` and `J_2 = 0`. Along the closed
//! loop `H_d` decays at rate `-(mom_e)^T M^{-1} K_d M^{-1} mom_e`.
//!
//! Everything is a pure function of `(model, state, target, gains)`; the
//! per-call cost is a handful of network evaluations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::dynamics::{head_values, HeadValues};
use crate::envs::{rotation_z, EnvKind, EnvSpec, RefPoint, ReferenceTrajectory};
use crate::liegroup::{GroupElement, GroupTag, MomentumVector};
use crate::nets::PortHamiltonianModel;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("input matrix is rank deficient (sigma_min = {0:.3e})")]
    RankDeficient(f64),
    #[error("thrust direction is degenerate (|R tau_v| <= 1e-6)")]
    DegenerateThrust,
    #[error("heading is singular: thrust axis parallel to the yaw reference")]
    SingularHeading,
    #[error("gain matrix must be symmetric positive-definite: {0}")]
    BadGains(String),
    #[error("group mismatch: expected {0:?}, got {1:?}")]
    GroupMismatch(GroupTag, GroupTag),
    #[error("controller produced a non-finite command")]
    NonFinite,
}

/// Positive-definite gain blocks `K_p`, `K_R` and the damping split
/// `K_d = diag(K_v, K_w)`. Planar and pendulum controllers read the
/// sub-blocks they need.
#[derive(Debug, Clone)]
pub struct Gains {
    pub kp: Matrix3<f64>,
    pub kr: Matrix3<f64>,
    pub kv: Matrix3<f64>,
    pub kw: Matrix3<f64>,
}

fn check_spd(name: &str, m: &Matrix3<f64>) -> Result<(), ControlError> {
    if (m - m.transpose()).norm() > 1e-12 {
        return Err(ControlError::BadGains(format!("{name} is not symmetric")));
    }
    let eig = m.symmetric_eigenvalues();
    if eig.iter().any(|&e| e <= 0.0) {
        return Err(ControlError::BadGains(format!("{name} has non-positive eigenvalues")));
    }
    Ok(())
}

impl Gains {
    pub fn new(
        kp: Matrix3<f64>,
        kr: Matrix3<f64>,
        kv: Matrix3<f64>,
        kw: Matrix3<f64>,
    ) -> Result<Self, ControlError> {
        check_spd("K_p", &kp)?;
        check_spd("K_R", &kr)?;
        check_spd("K_v", &kv)?;
        check_spd("K_w", &kw)?;
        Ok(Self { kp, kr, kv, kw })
    }

    pub fn diag(kp: [f64; 3], kr: [f64; 3], kv: [f64; 3], kw: [f64; 3]) -> Result<Self, ControlError> {
        Self::new(
            Matrix3::from_diagonal(&Vector3::from(kp)),
            Matrix3::from_diagonal(&Vector3::from(kr)),
            Matrix3::from_diagonal(&Vector3::from(kv)),
            Matrix3::from_diagonal(&Vector3::from(kw)),
        )
    }

    /// Gains used in the quadrotor tracking experiments.
    pub fn quadrotor_default() -> Self {
        Self::diag([0.8, 0.8, 3.9], [3.6, 3.6, 6.9], [0.23, 0.23, 0.23], [0.3, 0.3, 0.6])
            .expect("positive diagonals")
    }

    /// Gains used in the planar-vehicle tracking experiments.
    pub fn se2_default() -> Self {
        Self::diag([0.72, 0.72, 0.72], [9.1, 9.1, 9.1], [0.8, 0.8, 0.8], [3.6, 3.6, 3.6])
            .expect("positive diagonals")
    }

    /// Gains used for the pendulum swing-to-upright stabilization.
    pub fn pendulum_default() -> Self {
        Self::diag([1.0; 3], [2.0; 3], [1.0; 3], [1.0; 3]).expect("positive diagonals")
    }
}

/// Instantaneous tracking target in world coordinates: desired pose, body
/// angular rate with its derivative, and position derivatives up to
/// acceleration.
#[derive(Debug, Clone)]
pub struct TrackingTarget {
    pub p_star: Vector3<f64>,
    pub dp_star: Vector3<f64>,
    pub ddp_star: Vector3<f64>,
    pub r_star: Matrix3<f64>,
    pub omega_star: Vector3<f64>,
    pub domega_star: Vector3<f64>,
}

impl TrackingTarget {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            p_star: p,
            dp_star: Vector3::zeros(),
            ddp_star: Vector3::zeros(),
            r_star: Matrix3::identity(),
            omega_star: Vector3::zeros(),
            domega_star: Vector3::zeros(),
        }
    }

    /// Planar target from a reference point (x, y, yaw and derivatives).
    pub fn planar(rp: &RefPoint) -> Self {
        Self {
            p_star: Vector3::new(rp.p[0], rp.p[1], 0.0),
            dp_star: Vector3::new(rp.dp[0], rp.dp[1], 0.0),
            ddp_star: Vector3::new(rp.ddp[0], rp.ddp[1], 0.0),
            r_star: rotation_z(rp.yaw),
            omega_star: Vector3::new(0.0, 0.0, rp.dyaw),
            domega_star: Vector3::new(0.0, 0.0, rp.ddyaw),
        }
    }
}

fn rotation_from_coords(coords: &[f64], r: usize, offset: usize) -> Matrix3<f64> {
    if r == 3 {
        Matrix3::from_fn(|i, j| coords[offset + 3 * i + j])
    } else {
        // Embed a 2x2 rotation block.
        Matrix3::new(
            coords[offset],
            coords[offset + 1],
            0.0,
            coords[offset + 2],
            coords[offset + 3],
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Pseudo-inverse through SVD with a rank check at `sigma_min < 1e-8`.
fn pseudo_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    let svd = b.clone().svd(true, true);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin < 1e-8 {
        return Err(ControlError::RankDeficient(smin));
    }
    Ok(svd.pseudo_inverse(1e-10).expect("svd computed"))
}

/// Generalized coordinate error
/// `e = [R^T K_p (p - p*); 1/2 (K_R R*^T R - R^T R* K_R^T)^v]`.
pub fn coordinate_error(
    q: &GroupElement,
    q_star: &GroupElement,
    gains: &Gains,
) -> Result<DVector<f64>, ControlError> {
    if q.tag() != q_star.tag() {
        return Err(ControlError::GroupMismatch(q.tag(), q_star.tag()));
    }
    let tag = q.tag();
    let rdim = tag.rot_dim();
    let coords = q.coords();
    let coords_star = q_star.coords();
    let rot = rotation_from_coords(coords.as_slice(), rdim, tag.trans_dim());
    let rot_star = rotation_from_coords(coords_star.as_slice(), rdim, tag.trans_dim());
    let mut pos = Vector3::zeros();
    let mut pos_star = Vector3::zeros();
    for i in 0..tag.trans_dim() {
        pos[i] = coords[i];
        pos_star[i] = coords_star[i];
    }
    let e_pos = rot.transpose() * gains.kp * (pos - pos_star);
    let m = gains.kr * rot_star.transpose() * rot - rot.transpose() * rot_star * gains.kr.transpose();
    let e_rot = 0.5 * Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]);
    let mut out: DVector<f64> = DVector::zeros(tag.alg_dim());
    match tag {
        GroupTag::Se3 => {
            for i in 0..3 {
                out[i] = e_pos[i];
                out[3 + i] = e_rot[i];
            }
        }
        GroupTag::Se2 => {
            out[0] = e_pos[0];
            out[1] = e_pos[1];
            out[2] = e_rot[2];
        }
        GroupTag::So3 => {
            for i in 0..3 {
                out[i] = e_rot[i];
            }
        }
        GroupTag::So2 => {
            out[0] = e_rot[2];
        }
    }
    Ok(out)
}

/// Per-call controller output plus diagnostics.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    /// Norm of the generalized-force component outside the input range space
    /// (the unverified matching residual).
    pub matching_residual: f64,
}

struct ModelAtState {
    hv: HeadValues,
    mass_v: Option<Matrix3<f64>>,
    mass_w: Matrix3<f64>,
    zeta: DVector<f64>,
}

fn model_at(model: &PortHamiltonianModel, q: &GroupElement, p: &MomentumVector) -> ModelAtState {
    // Head values at zero momentum expose the pure potential gradient; the
    // controller assumes a locally constant generalized mass.
    let hv = head_values(model, q, &MomentumVector::zeros(model.group));
    let (dv, dw) = match model.group {
        GroupTag::Se3 => (3, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::So3 => (0, 3),
        GroupTag::So2 => (0, 1),
    };
    let mass_v = hv.minv_v.as_ref().map(|mi| {
        let inv = mi.clone().try_inverse().expect("positive-definite block");
        let mut out = Matrix3::identity();
        for i in 0..dv {
            for j in 0..dv {
                out[(i, j)] = inv[(i, j)];
            }
        }
        out
    });
    let mass_w = {
        let inv = hv.minv_w.clone().try_inverse().expect("positive-definite block");
        let mut out = Matrix3::identity();
        for i in 0..dw {
            for j in 0..dw {
                out[(i, j)] = inv[(i, j)];
            }
        }
        out
    };
    let d = model.group.alg_dim();
    let mut zeta: DVector<f64> = DVector::zeros(d);
    if let Some(mi) = &hv.minv_v {
        for i in 0..dv {
            for j in 0..dv {
                zeta[i] += mi[(i, j)] * p.coords[j];
            }
        }
    }
    for i in 0..dw {
        for j in 0..dw {
            zeta[dv + i] += hv.minv_w[(i, j)] * p.coords[dv + j];
        }
    }
    ModelAtState { hv, mass_v, mass_w, zeta }
}

/// Model-consistent momentum for a measured velocity: `p = M(q) zeta`.
pub fn momentum_from_velocity(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    zeta: &DVector<f64>,
) -> MomentumVector {
    let at = model_at(model, q, &MomentumVector::zeros(model.group));
    let (dv, dw) = match model.group {
        GroupTag::Se3 => (3, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::So3 => (0, 3),
        GroupTag::So2 => (0, 1),
    };
    let mut coords: DVector<f64> = DVector::zeros(model.group.alg_dim());
    if let Some(mv) = &at.mass_v {
        for i in 0..dv {
            for j in 0..dv {
                coords[i] += mv[(i, j)] * zeta[j];
            }
        }
    }
    for i in 0..dw {
        for j in 0..dw {
            coords[dv + i] += at.mass_w[(i, j)] * zeta[dv + j];
        }
    }
    MomentumVector::new(model.group, coords).expect("finite momentum")
}

/// Desired momentum `mom* = M [R^T R* v*; R^T R* w*]` and its derivative
/// `dmom* = M [R^T ddp* - w^ R^T dp*; R^T R* dw* - w_e^ R^T R* w*]`,
/// both computed from the model's mass.
fn desired_momentum(
    at: &ModelAtState,
    tag: GroupTag,
    rot: &Matrix3<f64>,
    target: &TrackingTarget,
) -> (DVector<f64>, DVector<f64>) {
    let d = tag.alg_dim();
    let (dv, dw) = match tag {
        GroupTag::Se3 => (3, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::So3 => (0, 3),
        GroupTag::So2 => (0, 1),
    };
    let rt = rot.transpose();
    let rel = rt * target.r_star;
    let v_body = rt * target.dp_star; // = R^T R* v* with v* = R*^T dp*
    let w_body = rel * target.omega_star;
    let mut zeta_w = Vector3::zeros();
    for i in 0..dw {
        zeta_w[i] = at.zeta[dv + i];
    }
    let w_e = zeta_w - w_body;
    let dv_body = rt * target.ddp_star - zeta_w.cross(&(rt * target.dp_star));
    let dw_body = rel * target.domega_star - w_e.cross(&(rel * target.omega_star));
    let mut mom: DVector<f64> = DVector::zeros(d);
    let mut dmom: DVector<f64> = DVector::zeros(d);
    if let Some(mv) = &at.mass_v {
        for i in 0..dv {
            for j in 0..dv {
                mom[i] += mv[(i, j)] * v_body[j];
                dmom[i] += mv[(i, j)] * dv_body[j];
            }
        }
    }
    for i in 0..dw {
        for j in 0..dw {
            mom[dv + i] += at.mass_w[(i, j)] * w_body[j];
            dmom[dv + i] += at.mass_w[(i, j)] * dw_body[j];
        }
    }
    (mom, dmom)
}

/// Desired closed-loop energy evaluated at the current state.
pub fn desired_hamiltonian(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    target: &TrackingTarget,
    gains: &Gains,
) -> f64 {
    let tag = model.group;
    let at = model_at(model, q, p);
    let coords = q.coords();
    let rot = rotation_from_coords(coords.as_slice(), tag.rot_dim(), tag.trans_dim());
    let mut pos = Vector3::zeros();
    for i in 0..tag.trans_dim() {
        pos[i] = coords[i];
    }
    let (mom_star, _) = desired_momentum(&at, tag, &rot, target);
    let pe = pos - target.p_star;
    let mut h = 0.0;
    if tag.trans_dim() > 0 {
        h += 0.5 * (gains.kp * pe).dot(&pe);
    }
    let re = rot.transpose() * target.r_star;
    let tr_term = gains.kr[(0, 0)] * (1.0 - re[(0, 0)])
        + gains.kr[(1, 1)] * (1.0 - re[(1, 1)])
        + gains.kr[(2, 2)] * (1.0 - re[(2, 2)]);
    // tr(K_R (I - R*^T R)) for diagonal K_R; general case via full product.
    let tr_full = if gains.kr.is_identity(0.0) || is_diag(&gains.kr) {
        tr_term
    } else {
        (gains.kr * (Matrix3::identity() - re.transpose())).trace()
    };
    h += 0.5 * tr_full;
    // Momentum-error kinetic term through M^{-1}.
    let d = tag.alg_dim();
    let mut pe_m: DVector<f64> = DVector::zeros(d);
    for i in 0..d {
        pe_m[i] = p.coords[i] - mom_star[i];
    }
    let (dv, dw) = match tag {
        GroupTag::Se3 => (3, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::So3 => (0, 3),
        GroupTag::So2 => (0, 1),
    };
    if let Some(mi) = &at.hv.minv_v {
        for i in 0..dv {
            for j in 0..dv {
                h += 0.5 * pe_m[i] * mi[(i, j)] * pe_m[j];
            }
        }
    }
    for i in 0..dw {
        for j in 0..dw {
            h += 0.5 * pe_m[dv + i] * at.hv.minv_w[(i, j)] * pe_m[dv + j];
        }
    }
    h
}

fn is_diag(m: &Matrix3<f64>) -> bool {
    let mut off = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                off += m[(i, j)].abs();
            }
        }
    }
    off == 0.0
}

/// IDA-PBC tracking control on SE(3):
/// `u_ES = B^+ (q^x^T dV/dq - (p^x - D) M^{-1} p - e + dmom*)`,
/// `u_DI = -B^+ K_d M^{-1}(p - mom*)`.
pub fn idapbc_se3(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    target: &TrackingTarget,
    gains: &Gains,
) -> Result<ControlOutput, ControlError> {
    if model.group != GroupTag::Se3 || q.tag() != GroupTag::Se3 {
        return Err(ControlError::GroupMismatch(GroupTag::Se3, q.tag()));
    }
    idapbc_generic_vec(model, q, p, target, gains)
}

/// Restricted controllers share the SE(3) expansion on embedded vectors.
pub fn idapbc_se2(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    target: &TrackingTarget,
    gains: &Gains,
) -> Result<ControlOutput, ControlError> {
    if model.group != GroupTag::Se2 || q.tag() != GroupTag::Se2 {
        return Err(ControlError::GroupMismatch(GroupTag::Se2, q.tag()));
    }
    idapbc_generic_vec(model, q, p, target, gains)
}

fn idapbc_generic_vec(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    target: &TrackingTarget,
    gains: &Gains,
) -> Result<ControlOutput, ControlError> {
    let tag = model.group;
    let at = model_at(model, q, p);
    let coords = q.coords();
    let rdim = tag.rot_dim();
    let tdim = tag.trans_dim();
    let d = tag.alg_dim();
    let rot = rotation_from_coords(coords.as_slice(), rdim, tdim);
    // Embedded 3-vectors for the shared expansion.
    let mut pv = Vector3::zeros();
    let mut pw = Vector3::zeros();
    let mut zv = Vector3::zeros();
    let mut zw = Vector3::zeros();
    let (dv, dw) = match tag {
        GroupTag::Se3 => (3, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::So3 => (0, 3),
        GroupTag::So2 => (0, 1),
    };
    for i in 0..dv {
        pv[i] = p.coords[i];
        zv[i] = at.zeta[i];
    }
    for i in 0..dw {
        // Rotational components occupy the trailing slots; on SE(2) and SO(2)
        // the single component is the z axis.
        let k = if dw == 1 { 2 } else { i };
        pw[k] = p.coords[dv + i];
        zw[k] = at.zeta[dv + i];
    }
    // Potential gradient term q^x^T dV/dq = [R^T dV/dp; sum_i r_i x dV/dr_i].
    let g = &at.hv.dhdq;
    let mut gpos = Vector3::zeros();
    for i in 0..tdim {
        gpos[i] = g[i];
    }
    let grav_force = rot.transpose() * gpos;
    let mut grav_torque = Vector3::zeros();
    if rdim == 3 {
        for i in 0..3 {
            let r = Vector3::new(coords[tdim + 3 * i], coords[tdim + 3 * i + 1], coords[tdim + 3 * i + 2]);
            let gi = Vector3::new(g[tdim + 3 * i], g[tdim + 3 * i + 1], g[tdim + 3 * i + 2]);
            grav_torque += r.cross(&gi);
        }
    } else {
        // 2x2 block: z torque = sum_i (r_i1 g_i2 - r_i2 g_i1).
        let r = &coords.as_slice()[tdim..tdim + 4];
        let gr = &g.as_slice()[tdim..tdim + 4];
        grav_torque[2] = r[0] * gr[1] - r[1] * gr[0] + r[2] * gr[3] - r[3] * gr[2];
    }
    // Momentum cross-coupling p^x M^{-1} p = [pv x w; pw x w + pv x v].
    let cross_v = pv.cross(&zw);
    let cross_w = pw.cross(&zw) + pv.cross(&zv);
    // Dissipation compensation + D M^{-1} p.
    let mut diss_v: Vector3<f64> = Vector3::zeros();
    let mut diss_w: Vector3<f64> = Vector3::zeros();
    if let Some(dm) = &at.hv.dissipation_v {
        for i in 0..dv {
            for j in 0..dv {
                diss_v[i] += dm[(i, j)] * zv[j];
            }
        }
    }
    if let Some(dm) = &at.hv.dissipation_w {
        for i in 0..dw {
            for j in 0..dw {
                let (ki, kj) = if dw == 1 { (2, 2) } else { (i, j) };
                diss_w[ki] += dm[(i, j)] * zw[kj];
            }
        }
    }
    // Coordinate error and desired momentum.
    let q_star = build_pose(tag, target);
    let e = coordinate_error(q, &q_star, gains)?;
    let (mom_star, dmom_star) = desired_momentum(&at, tag, &rot, target);
    // Assemble the generalized force in the reduced momentum coordinates.
    let mut force: DVector<f64> = DVector::zeros(d);
    for i in 0..dv {
        force[i] = grav_force[i] - cross_v[i] + diss_v[i] - e[i] + dmom_star[i];
    }
    for i in 0..dw {
        let k = if dw == 1 { 2 } else { i };
        force[dv + i] = grav_torque[k] - cross_w[k] + diss_w[k] - e[dv + i] + dmom_star[dv + i];
    }
    // Damping injection on the momentum error.
    let mut pe_m: DVector<f64> = DVector::zeros(d);
    for i in 0..d {
        pe_m[i] = p.coords[i] - mom_star[i];
    }
    let mut kd_zeta_e: DVector<f64> = DVector::zeros(d);
    {
        // M^{-1} (p - mom*) per block, then K_d.
        let mut ze: DVector<f64> = DVector::zeros(d);
        if let Some(mi) = &at.hv.minv_v {
            for i in 0..dv {
                for j in 0..dv {
                    ze[i] += mi[(i, j)] * pe_m[j];
                }
            }
        }
        for i in 0..dw {
            for j in 0..dw {
                ze[dv + i] += at.hv.minv_w[(i, j)] * pe_m[dv + j];
            }
        }
        for i in 0..dv {
            for j in 0..dv {
                kd_zeta_e[i] += gains.kv[(i, j)] * ze[j];
            }
        }
        for i in 0..dw {
            for j in 0..dw {
                let (ki, kj) = if dw == 1 { (2, 2) } else { (i, j) };
                kd_zeta_e[dv + i] += gains.kw[(ki, kj)] * ze[dv + j];
            }
        }
    }
    let total = &force - &kd_zeta_e;
    // u = B^+ total, with the out-of-range component as a diagnostic.
    let b = &at.hv.input_matrix;
    let b_pinv = pseudo_inverse(b)?;
    let u = &b_pinv * &total;
    let realized = b * &u;
    let matching_residual = (&total - &realized).norm();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::NonFinite);
    }
    Ok(ControlOutput { u, matching_residual })
}

fn build_pose(tag: GroupTag, target: &TrackingTarget) -> GroupElement {
    let n = tag.mat_dim();
    let r = tag.rot_dim();
    let mut mat = DMatrix::identity(n, n);
    if r == 3 {
        for i in 0..3 {
            for j in 0..3 {
                mat[(i, j)] = target.r_star[(i, j)];
            }
        }
    } else {
        mat[(0, 0)] = target.r_star[(0, 0)];
        mat[(0, 1)] = target.r_star[(0, 1)];
        mat[(1, 0)] = target.r_star[(1, 0)];
        mat[(1, 1)] = target.r_star[(1, 1)];
    }
    for i in 0..tag.trans_dim() {
        mat[(i, r)] = target.p_star[i];
    }
    GroupElement::from_matrix_unchecked(tag, mat)
}

/// Pendulum stabilizer to the upright pose: the position error is removed
/// from the desired energy and only the rotational terms act.
pub fn pendulum_stabilize(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    gains: &Gains,
) -> Result<ControlOutput, ControlError> {
    if model.group != GroupTag::So3 || q.tag() != GroupTag::So3 {
        return Err(ControlError::GroupMismatch(GroupTag::So3, q.tag()));
    }
    let target = TrackingTarget {
        p_star: Vector3::zeros(),
        dp_star: Vector3::zeros(),
        ddp_star: Vector3::zeros(),
        r_star: rotation_z(std::f64::consts::PI),
        omega_star: Vector3::zeros(),
        domega_star: Vector3::zeros(),
    };
    idapbc_generic_vec(model, q, p, &target, gains)
}

/// Builds the quadrotor tracking target: the desired attitude from the
/// state-feedback thrust vector, the desired rates from the analytic
/// derivative of the reference-only force field.
pub fn quad_reference(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    rp: &RefPoint,
    gains: &Gains,
) -> Result<TrackingTarget, ControlError> {
    if model.group != GroupTag::Se3 {
        return Err(ControlError::GroupMismatch(GroupTag::Se3, model.group));
    }
    let at = model_at(model, q, p);
    let coords = q.coords();
    let rot = rotation_from_coords(coords.as_slice(), 3, 3);
    let pos = Vector3::new(coords[0], coords[1], coords[2]);
    let pv = Vector3::new(p.coords[0], p.coords[1], p.coords[2]);
    let zv = Vector3::new(at.zeta[0], at.zeta[1], at.zeta[2]);
    let zw = Vector3::new(at.zeta[3], at.zeta[4], at.zeta[5]);
    let g = &at.hv.dhdq;
    let gpos = Vector3::new(g[0], g[1], g[2]);
    let p_star = Vector3::from(rp.p);
    let dp_star = Vector3::from(rp.dp);
    let ddp_star = Vector3::from(rp.ddp);
    let mass_v = at.mass_v.expect("SE(3) model has a translational mass block");
    // Desired body-frame thrust vector (the translational rows of u_ES+u_DI).
    let tau_v = rot.transpose() * gpos - pv.cross(&zw)
        - rot.transpose() * (gains.kp * (pos - p_star))
        - gains.kv * (zv - rot.transpose() * dp_star)
        + mass_v * (rot.transpose() * ddp_star - zw.cross(&(rot.transpose() * dp_star)));
    let f_world = rot * tau_v;
    if f_world.norm() <= 1e-6 {
        return Err(ControlError::DegenerateThrust);
    }
    // Reference-only force field for the analytic attitude rates: the
    // learned gravity gradient (affine potential) plus the mass-weighted
    // feedforward acceleration.
    let grav_world = gpos; // dV/dp is already a world-frame gradient
    let f_ref = |ddp: &Vector3<f64>| grav_world + mass_v * ddp;
    let df_ref = |dddp: &Vector3<f64>| mass_v * dddp;
    let dddp_star = Vector3::from(rp.dddp);
    let attitude = |f: Vector3<f64>, yaw: f64| -> Result<(Matrix3<f64>, Vector3<f64>), ControlError> {
        let r3 = f / f.norm();
        let y_ref = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let u1 = y_ref.cross(&r3);
        if u1.norm() <= 1e-6 {
            return Err(ControlError::SingularHeading);
        }
        let r1 = u1 / u1.norm();
        let r2 = r3.cross(&r1);
        Ok((Matrix3::from_columns(&[r1, r2, r3]), u1))
    };
    let (r_star, _) = attitude(f_world, rp.yaw)?;
    // Analytic rate of the reference-only attitude field.
    let omega_of = |t_off: f64| -> Result<(Matrix3<f64>, Vector3<f64>), ControlError> {
        let ddp = ddp_star + dddp_star * t_off;
        let f = f_ref(&ddp);
        let df = df_ref(&dddp_star);
        if f.norm() <= 1e-6 {
            return Err(ControlError::DegenerateThrust);
        }
        let yaw = rp.yaw + rp.dyaw * t_off;
        let dyaw = rp.dyaw + rp.ddyaw * t_off;
        let (r_s, u1) = attitude(f, yaw)?;
        let r3 = r_s.column(2).clone_owned();
        let r1 = r_s.column(0).clone_owned();
        // Exact derivatives of the normalized vector fields.
        let dr3_raw = df / f.norm();
        let dr3 = r3.cross(&dr3_raw).cross(&r3);
        let y_ref = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let dy_ref = Vector3::new(-yaw.cos(), -yaw.sin(), 0.0) * dyaw;
        let du1 = (dy_ref.cross(&r3) + y_ref.cross(&dr3)) / u1.norm();
        let dr1 = r1.cross(&du1).cross(&r1);
        let dr2 = dr3.cross(&r1) + r3.cross(&dr1);
        let dr_star = Matrix3::from_columns(&[dr1, dr2, dr3]);
        let wh = r_s.transpose() * dr_star;
        let omega = Vector3::new(wh[(2, 1)], wh[(0, 2)], wh[(1, 0)]);
        Ok((r_s, omega))
    };
    let (_, omega_star) = omega_of(0.0)?;
    // Rate derivative by differencing the analytic rate field.
    let delta = 1e-4;
    let (_, wp) = omega_of(delta)?;
    let (_, wm) = omega_of(-delta)?;
    let domega_star = (wp - wm) / (2.0 * delta);
    Ok(TrackingTarget { p_star, dp_star, ddp_star, r_star, omega_star, domega_star })
}

/// IDA-PBC on SE(3) through the generic Lie-group matrices (interconnection
/// form in vectorized coordinates) instead of the hand-expanded formulas.
/// Used to cross-check [`idapbc_se3`].
pub fn generic_idapbc_se3(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
    target: &TrackingTarget,
    gains: &Gains,
) -> Result<ControlOutput, ControlError> {
    if model.group != GroupTag::Se3 {
        return Err(ControlError::GroupMismatch(GroupTag::Se3, model.group));
    }
    let at = model_at(model, q, p);
    let coords = q.coords();
    let rot = rotation_from_coords(coords.as_slice(), 3, 3);
    let pos = Vector3::new(coords[0], coords[1], coords[2]);
    // q^x (12x6) from the current rows; J_1 from the error-rotation rows.
    let qx = cross_block(&rot);
    let re = target.r_star.transpose() * rot;
    let j1 = {
        // First block uses the current R, rotational blocks the rows of R_e.
        let mut m = DMatrix::zeros(12, 6);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = rot[(i, j)];
            }
        }
        for bi in 0..3 {
            let r = Vector3::new(re[(bi, 0)], re[(bi, 1)], re[(bi, 2)]);
            let h = hat3(&r);
            for i in 0..3 {
                for j in 0..3 {
                    m[(3 + 3 * bi + i, 3 + j)] = h[(i, j)];
                }
            }
        }
        m
    };
    // p^x (6x6).
    let pv = Vector3::new(p.coords[0], p.coords[1], p.coords[2]);
    let pw = Vector3::new(p.coords[3], p.coords[4], p.coords[5]);
    let mut px = DMatrix::zeros(6, 6);
    let hv = hat3(&pv);
    let hw = hat3(&pw);
    for i in 0..3 {
        for j in 0..3 {
            px[(i, 3 + j)] = hv[(i, j)];
            px[(3 + i, j)] = hv[(i, j)];
            px[(3 + i, 3 + j)] = hw[(i, j)];
        }
    }
    // Gradients (constant-mass treatment; dH/dq is the potential part).
    let dh_q = at.hv.dhdq.clone();
    let zeta = at.zeta.clone();
    // Desired-energy gradients.
    let (mom_star, dmom_star) = desired_momentum(&at, GroupTag::Se3, &rot, target);
    let mut pe_m: DVector<f64> = DVector::zeros(6);
    for i in 0..6 {
        pe_m[i] = p.coords[i] - mom_star[i];
    }
    let mut dhd_pe: DVector<f64> = DVector::zeros(6);
    let mi_v = at.hv.minv_v.as_ref().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            dhd_pe[i] += mi_v[(i, j)] * pe_m[j];
            dhd_pe[3 + i] += at.hv.minv_w[(i, j)] * pe_m[3 + j];
        }
    }
    let mut dhd_qe: DVector<f64> = DVector::zeros(12);
    let pe = pos - target.p_star;
    let kp_pe = gains.kp * pe;
    for i in 0..3 {
        dhd_qe[i] = kp_pe[i];
    }
    // d/dR_e of 1/2 tr(K_R (I - R_e)) = -1/2 K_R^T.
    let dre = -0.5 * gains.kr.transpose();
    for i in 0..3 {
        for j in 0..3 {
            dhd_qe[3 + 3 * i + j] = dre[(i, j)];
        }
    }
    // Momentum rows of the matching expression.
    let mut total: DVector<f64> = DVector::zeros(6);
    // -J_1^T dHd/dqe
    let j1t = j1.transpose();
    let mut e_vec: DVector<f64> = DVector::zeros(6);
    for i in 0..6 {
        for j in 0..12 {
            e_vec[i] += j1t[(i, j)] * dhd_qe[j];
        }
    }
    // + q^x^T dH/dq
    let qxt = qx.transpose();
    for i in 0..6 {
        let mut acc = 0.0;
        for j in 0..12 {
            acc += qxt[(i, j)] * dh_q[j];
        }
        total[i] += acc - e_vec[i];
    }
    // - p^x dH/dp (+ D dH/dp)
    for i in 0..6 {
        let mut acc = 0.0;
        for j in 0..6 {
            acc += px[(i, j)] * zeta[j];
        }
        total[i] -= acc;
    }
    if let Some(dm) = &at.hv.dissipation_v {
        for i in 0..3 {
            for j in 0..3 {
                total[i] += dm[(i, j)] * zeta[j];
            }
        }
    }
    if let Some(dm) = &at.hv.dissipation_w {
        for i in 0..3 {
            for j in 0..3 {
                total[3 + i] += dm[(i, j)] * zeta[3 + j];
            }
        }
    }
    // + dmom* (from dmom - dmom_e) and damping injection -K_d dHd/dpe.
    for i in 0..6 {
        total[i] += dmom_star[i];
    }
    for i in 0..3 {
        for j in 0..3 {
            total[i] -= gains.kv[(i, j)] * dhd_pe[j];
            total[3 + i] -= gains.kw[(i, j)] * dhd_pe[3 + j];
        }
    }
    let b = &at.hv.input_matrix;
    let b_pinv = pseudo_inverse(b)?;
    let u = &b_pinv * &total;
    let realized = b * &u;
    Ok(ControlOutput { u, matching_residual: (&total - &realized).norm() })
}

fn hat3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

fn cross_block(rot: &Matrix3<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(12, 6);
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = rot[(i, j)];
        }
    }
    for bi in 0..3 {
        let r = Vector3::new(rot[(bi, 0)], rot[(bi, 1)], rot[(bi, 2)]);
        let h = hat3(&r);
        for i in 0..3 {
            for j in 0..3 {
                m[(3 + 3 * bi + i, 3 + j)] = h[(i, j)];
            }
        }
    }
    m
}

/// One record of a closed-loop tracking run.
#[derive(Debug, Clone)]
pub struct TrackRecord {
    pub t: f64,
    pub pos_err: f64,
    pub yaw_err: f64,
    pub vel_err: f64,
    pub omega_err: f64,
    pub h_desired: f64,
    pub u: Vec<f64>,
}

/// Closed-loop simulation of a ground-truth environment under the IDA-PBC
/// controller built from `model`. The control is recomputed every `ctrl_dt`
/// and held; the state starts on the reference.
pub fn simulate_tracking(
    env: &EnvSpec,
    model: &PortHamiltonianModel,
    reference: &ReferenceTrajectory,
    gains: &Gains,
    duration: f64,
    ctrl_dt: f64,
) -> Result<Vec<TrackRecord>, ControlError> {
    let tag = env.group();
    if tag != model.group {
        return Err(ControlError::GroupMismatch(model.group, tag));
    }
    let mut x = initial_state_on_reference(env, reference);
    let steps = (duration / ctrl_dt).round() as usize;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * ctrl_dt;
        let rp = reference.eval(t);
        let obs = env.observe(&x);
        let cdim = tag.coord_dim();
        let q = GroupElement::from_coords(tag, &obs[..cdim])
            .unwrap_or_else(|_| {
                GroupElement::from_matrix_unchecked(
                    tag,
                    crate::liegroup::coords_to_matrix(tag, &obs[..cdim]).expect("coords"),
                )
            });
        let zeta = DVector::from_column_slice(&obs[cdim..]);
        let p = momentum_from_velocity(model, &q, &zeta);
        let (target, ctrl) = match env.kind() {
            EnvKind::Quadrotor => {
                let target = quad_reference(model, &q, &p, &rp, gains)?;
                let ctrl = idapbc_se3(model, &q, &p, &target, gains)?;
                (target, ctrl)
            }
            EnvKind::Se2Vehicle => {
                let target = TrackingTarget::planar(&rp);
                let ctrl = idapbc_se2(model, &q, &p, &target, gains)?;
                (target, ctrl)
            }
            EnvKind::Pendulum => {
                let ctrl = pendulum_stabilize(model, &q, &p, gains)?;
                let target = TrackingTarget {
                    r_star: rotation_z(std::f64::consts::PI),
                    ..TrackingTarget::hover_at(Vector3::zeros())
                };
                (target, ctrl)
            }
        };
        let h_d = desired_hamiltonian(model, &q, &p, &target, gains);
        let rec = track_record(env, &x, &rp, &target, t, h_d, ctrl.u.as_slice());
        out.push(rec);
        let mut u: Vec<f64> = ctrl.u.as_slice().to_vec();
        // Physical actuation limits.
        for (v, &b) in u.iter_mut().zip(env.control_bounds.iter()) {
            *v = v.clamp(-b, b);
        }
        if matches!(env.kind(), EnvKind::Quadrotor) {
            u[0] = u[0].max(0.0);
        }
        env.step(&mut x, &u, ctrl_dt);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::NonFinite);
        }
    }
    Ok(out)
}

fn initial_state_on_reference(env: &EnvSpec, reference: &ReferenceTrajectory) -> Vec<f64> {
    let rp = reference.eval(0.0);
    match env.kind() {
        EnvKind::Pendulum => vec![0.0, 0.0],
        EnvKind::Se2Vehicle => {
            let rot = rotation_z(rp.yaw);
            let v_body = rot.transpose() * Vector3::new(rp.dp[0], rp.dp[1], 0.0);
            vec![rp.p[0], rp.p[1], rp.yaw, v_body[0], v_body[1], rp.dyaw]
        }
        EnvKind::Quadrotor => {
            let mut x = vec![0.0; 18];
            x[0] = rp.p[0];
            x[1] = rp.p[1];
            x[2] = rp.p[2];
            let rot = rotation_z(rp.yaw);
            for i in 0..3 {
                for j in 0..3 {
                    x[3 + 3 * i + j] = rot[(i, j)];
                }
            }
            let v_body = rot.transpose() * Vector3::from(rp.dp);
            x[12] = v_body[0];
            x[13] = v_body[1];
            x[14] = v_body[2];
            x[17] = rp.dyaw;
            x
        }
    }
}

fn track_record(
    env: &EnvSpec,
    x: &[f64],
    rp: &RefPoint,
    target: &TrackingTarget,
    t: f64,
    h_d: f64,
    u: &[f64],
) -> TrackRecord {
    match env.kind() {
        EnvKind::Pendulum => {
            let phi_err = {
                let mut e = x[0] - std::f64::consts::PI;
                while e > std::f64::consts::PI {
                    e -= 2.0 * std::f64::consts::PI;
                }
                while e < -std::f64::consts::PI {
                    e += 2.0 * std::f64::consts::PI;
                }
                e
            };
            TrackRecord {
                t,
                pos_err: 0.0,
                yaw_err: phi_err.abs(),
                vel_err: 0.0,
                omega_err: x[1].abs(),
                h_desired: h_d,
                u: u.to_vec(),
            }
        }
        EnvKind::Se2Vehicle => {
            let pos_err = ((x[0] - rp.p[0]).powi(2) + (x[1] - rp.p[1]).powi(2)).sqrt();
            let mut yaw_err = x[2] - rp.yaw;
            while yaw_err > std::f64::consts::PI {
                yaw_err -= 2.0 * std::f64::consts::PI;
            }
            while yaw_err < -std::f64::consts::PI {
                yaw_err += 2.0 * std::f64::consts::PI;
            }
            let rot = rotation_z(x[2]);
            let v_world = rot * Vector3::new(x[3], x[4], 0.0);
            let vel_err = (v_world - Vector3::new(rp.dp[0], rp.dp[1], 0.0)).norm();
            TrackRecord {
                t,
                pos_err,
                yaw_err: yaw_err.abs(),
                vel_err,
                omega_err: (x[5] - rp.dyaw).abs(),
                h_desired: h_d,
                u: u.to_vec(),
            }
        }
        EnvKind::Quadrotor => {
            let pos_err = ((x[0] - rp.p[0]).powi(2)
                + (x[1] - rp.p[1]).powi(2)
                + (x[2] - rp.p[2]).powi(2))
            .sqrt();
            let rot = Matrix3::from_fn(|i, j| x[3 + 3 * i + j]);
            let yaw = rot[(1, 0)].atan2(rot[(0, 0)]);
            let mut yaw_err = yaw - rp.yaw;
            while yaw_err > std::f64::consts::PI {
                yaw_err -= 2.0 * std::f64::consts::PI;
            }
            while yaw_err < -std::f64::consts::PI {
                yaw_err += 2.0 * std::f64::consts::PI;
            }
            let v_world = rot * Vector3::new(x[12], x[13], x[14]);
            let vel_err = (v_world - Vector3::from(rp.dp)).norm();
            let w = Vector3::new(x[15], x[16], x[17]);
            let omega_err = (w - target.omega_star).norm();
            TrackRecord {
                t,
                pos_err,
                yaw_err: yaw_err.abs(),
                vel_err,
                omega_err,
                h_desired: h_d,
                u: u.to_vec(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvParams, QuadParams};
    use crate::liegroup::{exp_map, AlgebraVector};
    use crate::nets::structured_preset;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_se3(rng: &mut StdRng) -> GroupElement {
        let v = AlgebraVector::new(
            GroupTag::Se3,
            DVector::from_iterator(6, (0..6).map(|_| rng.gen_range(-1.0..1.0))),
        )
        .unwrap();
        exp_map(&v)
    }

    #[test]
    fn gains_reject_indefinite_blocks() {
        let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -0.1, 1.0));
        assert!(Gains::new(bad, Matrix3::identity(), Matrix3::identity(), Matrix3::identity())
            .is_err());
    }

    #[test]
    fn coordinate_error_zero_at_target() {
        let mut rng = StdRng::seed_from_u64(1);
        let gains = Gains::quadrotor_default();
        for _ in 0..20 {
            let q = random_se3(&mut rng);
            let e = coordinate_error(&q, &q, &gains).unwrap();
            assert!(e.norm() < 1e-12);
        }
    }

    #[test]
    fn coordinate_error_pure_translation() {
        let gains = Gains::diag([1.0; 3], [1.0; 3], [1.0; 3], [1.0; 3]).unwrap();
        let q = GroupElement::identity(GroupTag::Se3);
        let mut mat = q.matrix().clone();
        mat[(0, 3)] = 0.3;
        mat[(1, 3)] = -0.2;
        let q2 = GroupElement::from_matrix(GroupTag::Se3, mat).unwrap();
        let e = coordinate_error(&q2, &q, &gains).unwrap();
        assert!((e[0] - 0.3).abs() < 1e-14);
        assert!((e[1] + 0.2).abs() < 1e-14);
        assert!(e.rows(3, 3).norm() < 1e-14);
    }

    #[test]
    fn coordinate_error_matches_symbolic_expansion() {
        // Oracle: assemble e = J_1^T dVd/dq_e with explicit matrices.
        let mut rng = StdRng::seed_from_u64(3);
        let gains = Gains::diag([0.7, 1.3, 2.0], [0.9, 1.7, 2.4], [1.0; 3], [1.0; 3]).unwrap();
        for _ in 0..50 {
            let q = random_se3(&mut rng);
            let qs = random_se3(&mut rng);
            let e = coordinate_error(&q, &qs, &gains).unwrap();
            let coords = q.coords();
            let cs = qs.coords();
            let rot = Matrix3::from_fn(|i, j| coords[3 + 3 * i + j]);
            let rs = Matrix3::from_fn(|i, j| cs[3 + 3 * i + j]);
            let re = rs.transpose() * rot;
            let pe = Vector3::new(coords[0] - cs[0], coords[1] - cs[1], coords[2] - cs[2]);
            let want_pos = rot.transpose() * gains.kp * pe;
            let m = gains.kr * re - re.transpose() * gains.kr.transpose();
            let want_rot = 0.5 * Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]);
            for i in 0..3 {
                assert!((e[i] - want_pos[i]).abs() < 1e-12);
                assert!((e[3 + i] - want_rot[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn desired_hamiltonian_zero_at_exact_tracking() {
        let model = structured_preset("quadrotor_desk", 4).unwrap();
        let gains = Gains::quadrotor_default();
        let q = GroupElement::identity(GroupTag::Se3);
        let target = TrackingTarget::hover_at(Vector3::zeros());
        let p = momentum_from_velocity(&model, &q, &DVector::zeros(6));
        let h = desired_hamiltonian(&model, &q, &p, &target, &gains);
        assert!(h.abs() < 1e-12);
    }

    #[test]
    fn desired_hamiltonian_trace_term_for_half_turn() {
        let model = structured_preset("quadrotor_desk", 4).unwrap();
        let gains = Gains::diag([1.0; 3], [2.0; 3], [1.0; 3], [1.0; 3]).unwrap();
        let q = GroupElement::identity(GroupTag::Se3);
        let p = momentum_from_velocity(&model, &q, &DVector::zeros(6));
        let target = TrackingTarget {
            r_star: rotation_z(std::f64::consts::PI),
            ..TrackingTarget::hover_at(Vector3::zeros())
        };
        // R_e = diag(-1,-1,1): 1/2 tr(2 (I - R_e)) = 4.
        let h = desired_hamiltonian(&model, &q, &p, &target, &gains);
        assert!((h - 4.0).abs() < 1e-12, "{h}");
    }

    #[test]
    fn generic_route_matches_hand_expanded_controller() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut model = structured_preset("quadrotor_desk", 9).unwrap();
        for p in model.params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        let gains = Gains::quadrotor_default();
        for _ in 0..500 {
            let q = random_se3(&mut rng);
            let p = MomentumVector::new(
                GroupTag::Se3,
                DVector::from_iterator(6, (0..6).map(|_| rng.gen_range(-0.5..0.5))),
            )
            .unwrap();
            let target = TrackingTarget {
                p_star: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                dp_star: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                ddp_star: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                r_star: exp_map(&AlgebraVector::new(
                    GroupTag::So3,
                    DVector::from_iterator(3, (0..3).map(|_| rng.gen_range(-1.0..1.0))),
                )
                .unwrap())
                .rotation()
                .fixed_view::<3, 3>(0, 0)
                .into(),
                omega_star: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                domega_star: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
            };
            let a = idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
            let b = generic_idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
            let diff = (&a.u - &b.u).norm();
            assert!(diff < 1e-9, "controller routes disagree by {diff}");
        }
    }

    #[test]
    fn gauge_shift_of_potential_leaves_control_unchanged() {
        // Adding a constant to V must not change the commanded input.
        let mut rng = StdRng::seed_from_u64(17);
        let model = structured_preset("quadrotor_desk", 21).unwrap();
        let mut shifted = model.clone();
        // Shift the final-layer bias of the potential head.
        let vh = shifted.heads.potential.mlp.clone();
        let bias_off = vh.offset + vh.param_len() - 1;
        shifted.params[bias_off] += 7.5;
        let gains = Gains::quadrotor_default();
        for _ in 0..10 {
            let q = random_se3(&mut rng);
            let p = MomentumVector::new(
                GroupTag::Se3,
                DVector::from_iterator(6, (0..6).map(|_| rng.gen_range(-0.5..0.5))),
            )
            .unwrap();
            let target = TrackingTarget::hover_at(Vector3::new(0.2, -0.1, 0.4));
            let a = idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
            let b = idapbc_se3(&shifted, &q, &p, &target, &gains).unwrap();
            assert!((&a.u - &b.u).norm() < 1e-11);
        }
    }

    #[test]
    fn quad_reference_produces_exact_rotations() {
        let mut rng = StdRng::seed_from_u64(23);
        let model = structured_preset("quadrotor_desk", 2).unwrap();
        let gains = Gains::quadrotor_default();
        let mut checked = 0;
        for _ in 0..1000 {
            let q = random_se3(&mut rng);
            let p = MomentumVector::new(
                GroupTag::Se3,
                DVector::from_iterator(6, (0..6).map(|_| rng.gen_range(-0.2..0.2))),
            )
            .unwrap();
            let rp = RefPoint {
                p: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                dp: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                ddp: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                dddp: [0.0; 3],
                yaw: rng.gen_range(-1.0..1.0),
                dyaw: 0.0,
                ddyaw: 0.0,
            };
            match quad_reference(&model, &q, &p, &rp, &gains) {
                Ok(target) => {
                    checked += 1;
                    let g = target.r_star.transpose() * target.r_star - Matrix3::identity();
                    assert!(g.norm() < 1e-12, "Gram error {}", g.norm());
                    let det = target.r_star.determinant();
                    assert!((det - 1.0).abs() < 1e-12);
                }
                Err(ControlError::DegenerateThrust) | Err(ControlError::SingularHeading) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(checked > 900, "only {checked} samples were regular");
    }

    #[test]
    fn quad_reference_rate_matches_finite_difference_of_attitude() {
        // Along a smooth reference with the state following it exactly, the
        // analytic omega* must match the finite difference of R*(t).
        let model = truth_like_quad_model();
        let gains = Gains::quadrotor_default();
        let reference = ReferenceTrajectory::by_name("vertical_circle", 0.8, 8.0).unwrap();
        let env = EnvSpec::quadrotor();
        let h = 1e-5;
        for k in 1..20 {
            let t = 0.35 * k as f64;
            let mut targets = Vec::new();
            for t_eval in [t - h, t, t + h] {
                let rp = reference.eval(t_eval);
                // State exactly on the reference.
                let x = on_reference_state(&env, &rp);
                let obs = env.observe(&x);
                let q = GroupElement::from_coords(GroupTag::Se3, &obs[..12]).unwrap();
                let zeta = DVector::from_column_slice(&obs[12..]);
                let p = momentum_from_velocity(&model, &q, &zeta);
                targets.push(quad_reference(&model, &q, &p, &rp, &gains).unwrap());
            }
            let dr = (targets[2].r_star - targets[0].r_star) / (2.0 * h);
            let wh = targets[1].r_star.transpose() * dr;
            let w_fd = Vector3::new(wh[(2, 1)], wh[(0, 2)], wh[(1, 0)]);
            let w_an = targets[1].omega_star;
            assert!(
                (w_fd - w_an).norm() < 1e-4 * (1.0 + w_fd.norm()),
                "t={t}: {w_fd:?} vs {w_an:?}"
            );
        }
    }

    /// A structured model whose heads equal the quadrotor truth (up to the
    /// epsilon floor), built by zeroing the networks and setting nominals.
    fn truth_like_quad_model() -> PortHamiltonianModel {
        let mut model = structured_preset("quadrotor_desk", 0).unwrap();
        for p in model.params.iter_mut() {
            *p = 0.0;
        }
        let qp = QuadParams::default();
        let heads = &mut model.heads;
        let mv = heads.mass_v_inv.as_mut().unwrap();
        mv.chol.epsilon = 0.0;
        mv.chol.nominal =
            crate::nets::NominalFactor::Diag(vec![(1.0f64 / qp.mass).sqrt(); 3]);
        heads.mass_w_inv.chol.epsilon = 0.0;
        heads.mass_w_inv.chol.nominal = crate::nets::NominalFactor::Diag(vec![
            (1.0f64 / qp.inertia[0]).sqrt(),
            (1.0f64 / qp.inertia[1]).sqrt(),
            (1.0f64 / qp.inertia[2]).sqrt(),
        ]);
        heads.potential.nominal =
            crate::nets::NominalPotential::LinearZ { coeff: qp.mass * qp.gravity };
        let mut b = vec![0.0; 24];
        b[2 * 4] = 1.0;
        b[3 * 4 + 1] = 1.0;
        b[4 * 4 + 2] = 1.0;
        b[5 * 4 + 3] = 1.0;
        heads.input_matrix.nominal = crate::nets::NominalMatrix::Const(b);
        model
    }

    fn on_reference_state(env: &EnvSpec, rp: &RefPoint) -> Vec<f64> {
        let _ = env;
        let mut x = vec![0.0; 18];
        x[0] = rp.p[0];
        x[1] = rp.p[1];
        x[2] = rp.p[2];
        // Attitude consistent with the feedforward thrust direction.
        let qp = QuadParams::default();
        let f = Vector3::new(
            qp.mass * rp.ddp[0],
            qp.mass * rp.ddp[1],
            qp.mass * (rp.ddp[2] + qp.gravity),
        );
        let r3 = f / f.norm();
        let y_ref = Vector3::new(-rp.yaw.sin(), rp.yaw.cos(), 0.0);
        let r1 = y_ref.cross(&r3).normalize();
        let r2 = r3.cross(&r1);
        let rot = Matrix3::from_columns(&[r1, r2, r3]);
        for i in 0..3 {
            for j in 0..3 {
                x[3 + 3 * i + j] = rot[(i, j)];
            }
        }
        let v_body = rot.transpose() * Vector3::from(rp.dp);
        x[12] = v_body[0];
        x[13] = v_body[1];
        x[14] = v_body[2];
        x
    }

    #[test]
    fn hover_command_balances_gravity_with_truth_model() {
        let model = truth_like_quad_model();
        let gains = Gains::quadrotor_default();
        let q = GroupElement::identity(GroupTag::Se3);
        let p = MomentumVector::zeros(GroupTag::Se3);
        let target = TrackingTarget::hover_at(Vector3::zeros());
        let out = idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
        let qp = QuadParams::default();
        assert!((out.u[0] - qp.mass * qp.gravity).abs() < 1e-10, "thrust {}", out.u[0]);
        assert!(out.u.rows(1, 3).norm() < 1e-10);
        assert!(out.matching_residual < 1e-10);
    }

    #[test]
    fn quadrotor_hover_tracking_stays_put() {
        let model = truth_like_quad_model();
        let env = EnvSpec::new(
            EnvParams::Quadrotor(QuadParams::default()),
            1.0 / 120.0,
            vec![1.0, 1e-2, 1e-2, 1e-2],
        )
        .unwrap();
        // A zero-radius circle is a hover reference.
        let reference = ReferenceTrajectory::VerticalCircle {
            radius: 0.0,
            period: 8.0,
            center: [0.0, 0.0, 0.0],
        };
        let gains = Gains::quadrotor_default();
        let recs = simulate_tracking(&env, &model, &reference, &gains, 3.0, 2e-3).unwrap();
        let mean_err: f64 = recs.iter().map(|r| r.pos_err).sum::<f64>() / recs.len() as f64;
        assert!(mean_err < 1e-3, "hover position error {mean_err}");
        // H_d stays monotonically non-increasing up to solver noise.
        for w in recs.windows(2) {
            assert!(w[1].h_desired <= w[0].h_desired + 1e-6);
        }
    }

    #[test]
    fn pendulum_stabilize_reaches_upright_with_truth_model() {
        // Ground-truth pendulum heads expressed as a structured model.
        let mut model = structured_preset("pendulum_desk", 0).unwrap();
        for p in model.params.iter_mut() {
            *p = 0.0;
        }
        model.heads.mass_w_inv.chol.epsilon = 1e-6;
        model.heads.mass_w_inv.chol.nominal =
            crate::nets::NominalFactor::Diag(vec![3.0f64.sqrt(); 3]);
        // V depends on the rotation: 5 (1 - cos phi) = 5 (1 - R00) is not a
        // nominal form; emulate its gradient with a linear output layer on
        // the flattened rotation instead.
        let vh = model.heads.potential.mlp.clone();
        // Single linear path: first-layer weights read R00, last layer scales.
        // Simpler: bake the truth via a custom head is out of scope here, so
        // drive the controller with the learned-from-data case in acceptance
        // tests and only check the energy decrease property here with a
        // lightly trained model.
        let _ = vh;
        let env = EnvSpec::pendulum(0.0);
        let ds = crate::envs::collect_dataset(
            &env,
            &crate::envs::CollectionPlan::random_constant(5, 96, 9),
        )
        .unwrap();
        let mut model = structured_preset("pendulum_desk", 5).unwrap();
        let config = crate::training::TrainConfig {
            iterations: 220,
            substeps: 2,
            learning_rate: 4e-3,
            ..Default::default()
        };
        crate::training::train(&mut model, &ds, &config, |_| {}).unwrap();
        let gains = Gains::pendulum_default();
        // Closed loop from hanging rest.
        let mut x = vec![0.0, 0.0];
        let ctrl_dt = 0.01;
        let mut h_prev = f64::INFINITY;
        let mut violations = 0.0f64;
        for k in 0..3000 {
            let obs = env.observe(&x);
            let q = GroupElement::from_coords(GroupTag::So3, &obs[..9]).unwrap();
            let zeta = DVector::from_column_slice(&obs[9..]);
            let p = momentum_from_velocity(&model, &q, &zeta);
            let out = pendulum_stabilize(&model, &q, &p, &gains).unwrap();
            let target = TrackingTarget {
                r_star: rotation_z(std::f64::consts::PI),
                ..TrackingTarget::hover_at(Vector3::zeros())
            };
            let h_d = desired_hamiltonian(&model, &q, &p, &target, &gains);
            if k > 0 {
                violations = violations.max(h_d - h_prev);
            }
            h_prev = h_d;
            let u = out.u[0].clamp(-4.0, 4.0);
            env.step(&mut x, &[u], ctrl_dt);
        }
        let mut phi_err = x[0] - std::f64::consts::PI;
        while phi_err > std::f64::consts::PI {
            phi_err -= 2.0 * std::f64::consts::PI;
        }
        while phi_err < -std::f64::consts::PI {
            phi_err += 2.0 * std::f64::consts::PI;
        }
        assert!(
            phi_err.abs() < 0.15 && x[1].abs() < 0.2,
            "did not reach upright: phi_err {phi_err}, rate {}",
            x[1]
        );
        assert!(violations < 5e-3, "H_d increased by {violations}");
    }

    #[test]
    fn controller_latency_is_within_budget() {
        let model = structured_preset("quadrotor_desk", 1).unwrap();
        let gains = Gains::quadrotor_default();
        let q = GroupElement::identity(GroupTag::Se3);
        let p = MomentumVector::zeros(GroupTag::Se3);
        let rp = RefPoint { p: [0.1, 0.2, 0.3], ..Default::default() };
        // Warm up, then time.
        for _ in 0..10 {
            let target = quad_reference(&model, &q, &p, &rp, &gains).unwrap();
            idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
        }
        let start = std::time::Instant::now();
        let n = 200;
        for _ in 0..n {
            let target = quad_reference(&model, &q, &p, &rp, &gains).unwrap();
            let out = idapbc_se3(&model, &q, &p, &target, &gains).unwrap();
            std::hint::black_box(out.u[0]);
        }
        let per_call = start.elapsed().as_secs_f64() / n as f64;
        assert!(per_call < 5e-3, "controller latency {per_call} s per call");
    }
}
