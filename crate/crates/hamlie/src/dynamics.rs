//! Hamiltonian evaluation and continuous-time vector fields.
//!
//! The structured flow implements the port-Hamiltonian equations of motion in
//! vectorized coordinates `q = [p; r1; r2; r3]` (rows of the rotation matrix)
//! with internal momentum state:
//!
//! ```text
//!   dp/dt   = R dH/dp_v
//!   dr_i/dt = r_i x dH/dp_w
//!   dp_v/dt = p_v x dH/dp_w - R^T dH/dp - D_v dH/dp_v + b_v u
//!   dp_w/dt = p_w x dH/dp_w + p_v x dH/dp_v + sum_i r_i x dH/dr_i
//!             - D_w dH/dp_w + b_w u
//! ```
//!
//! SO(3) keeps the rotational rows only, SE(2) the planar restriction. Two
//! baselines share the integration interface: a black-box network mapping
//! `(q, zeta, u)` to the state derivative, and an unstructured variant that
//! runs the same flow with the Hamiltonian given by a single network.
//!
//! Every flow carries a hand-derived reverse pass (`flow_vjp`) so that losses
//! can be back-propagated through an ODE solver. Second-order terms (the flow
//! contains gradients of the networks) are obtained by running the network
//! reverse pass in dual-number arithmetic.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::liegroup::{
    self, coords_to_matrix, GroupElement, GroupTag, MomentumVector,
};
use crate::nets::{
    BlackBoxModel, Dual, MassHead, MlpCache, NominalMatrix, NominalPotential,
    PortHamiltonianModel, Scalar, UnstructuredModel,
};

#[derive(Debug, Error)]
pub enum DynError {
    #[error("group mismatch: model is {0:?}, state is {1:?}")]
    GroupMismatch(GroupTag, GroupTag),
    #[error("flow is only defined on SO(3), SE(2) and SE(3), got {0:?}")]
    UnsupportedGroup(GroupTag),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("non-finite derivative; integrator must abort")]
    NonFinite,
}

/// Internal integration state: a group element plus its conjugate momentum.
#[derive(Debug, Clone)]
pub struct PhState {
    pub q: GroupElement,
    pub p: MomentumVector,
}

impl PhState {
    pub fn new(q: GroupElement, p: MomentumVector) -> Result<Self, DynError> {
        if q.tag() != p.tag {
            return Err(DynError::GroupMismatch(q.tag(), p.tag));
        }
        Ok(Self { q, p })
    }

    /// Generalized velocity `zeta = M^{-1}(q) p` under a structured model.
    pub fn zeta(&self, model: &PortHamiltonianModel) -> DVector<f64> {
        let mut ws = FlowWorkspace::new();
        let coords = self.q.coords();
        eval_mass_heads(model, &mut ws, coords.as_slice());
        let d = model.group.alg_dim();
        let mut zeta = vec![0.0; d];
        apply_mass_inverse(model, &ws, self.p.coords.as_slice(), &mut zeta);
        DVector::from_vec(zeta)
    }
}

/// Flattened SE(3) coordinates `[p; r1; r2; r3]` with the rotation block
/// validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QVec(pub [f64; 12]);

impl QVec {
    pub fn new(coords: [f64; 12]) -> Result<Self, liegroup::GroupError> {
        GroupElement::from_coords(GroupTag::Se3, &coords)?;
        Ok(QVec(coords))
    }

    pub fn from_element(q: &GroupElement) -> Result<Self, DynError> {
        if q.tag() != GroupTag::Se3 {
            return Err(DynError::GroupMismatch(GroupTag::Se3, q.tag()));
        }
        let c = q.coords();
        let mut out = [0.0; 12];
        out.copy_from_slice(c.as_slice());
        Ok(QVec(out))
    }
}

#[inline]
fn cross_add(a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] += a[1] * b[2] - a[2] * b[1];
    out[1] += a[2] * b[0] - a[0] * b[2];
    out[2] += a[0] * b[1] - a[1] * b[0];
}

/// Scratch buffers for flow and reverse-pass evaluation. One per worker.
pub struct FlowWorkspace {
    pub nets: crate::nets::Workspace,
    minv_v: Vec<f64>,
    minv_w: Vec<f64>,
    a_v: Vec<f64>,
    a_w: Vec<f64>,
    zeta: Vec<f64>,
    g: Vec<f64>,
    bmat: Vec<f64>,
    dmat_v: Vec<f64>,
    dmat_w: Vec<f64>,
    zeta_bar: Vec<f64>,
    g_bar: Vec<f64>,
    mat_bar: Vec<f64>,
    out_bar: Vec<f64>,
    enc_bar: Vec<f64>,
    dual_in: Vec<Dual>,
    dual_xbar: Vec<Dual>,
    dual_a: Vec<Dual>,
    dual_s: Vec<Dual>,
    dual_abar: Vec<Dual>,
    dual_out: Vec<Dual>,
    hgrad: Vec<f64>,
    obs_sc: Vec<f64>,
}

impl FlowWorkspace {
    pub fn new() -> Self {
        Self {
            nets: crate::nets::Workspace::new(),
            minv_v: Vec::new(),
            minv_w: Vec::new(),
            a_v: Vec::new(),
            a_w: Vec::new(),
            zeta: Vec::new(),
            g: Vec::new(),
            bmat: Vec::new(),
            dmat_v: Vec::new(),
            dmat_w: Vec::new(),
            zeta_bar: Vec::new(),
            g_bar: Vec::new(),
            mat_bar: Vec::new(),
            out_bar: Vec::new(),
            enc_bar: Vec::new(),
            dual_in: Vec::new(),
            dual_xbar: Vec::new(),
            dual_a: Vec::new(),
            dual_s: Vec::new(),
            dual_abar: Vec::new(),
            dual_out: Vec::new(),
            hgrad: Vec::new(),
            obs_sc: Vec::new(),
        }
    }
}

impl Default for FlowWorkspace {
    fn default() -> Self {
        Self::new()
    }
}

fn mass_block_dims(tag: GroupTag) -> (usize, usize) {
    // (translational dof, rotational dof)
    match tag {
        GroupTag::So3 => (0, 3),
        GroupTag::Se2 => (2, 1),
        GroupTag::Se3 => (3, 3),
        GroupTag::So2 => (0, 1),
    }
}

/// Evaluates the inverse-mass factors and matrices, leaving forward caches
/// alive in the workspace for later reverse passes.
fn eval_mass_heads(model: &PortHamiltonianModel, ws: &mut FlowWorkspace, coords: &[f64]) {
    let tag = model.group;
    let (dv, dw) = mass_block_dims(tag);
    if let Some(head) = &model.heads.mass_v_inv {
        let x = head.enc.slice(tag, coords);
        head.chol.mlp.forward(&model.params, x, &mut ws.nets.c_mv);
        ws.a_v.resize(dv * dv, 0.0);
        head.chol.factor_from_outputs(ws.nets.c_mv.output(), &mut ws.a_v);
        ws.minv_v.resize(dv * dv, 0.0);
        head.chol.matrix_from_factor(&ws.a_v, &mut ws.minv_v);
    } else {
        ws.a_v.clear();
        ws.minv_v.clear();
    }
    let head = &model.heads.mass_w_inv;
    let x = head.enc.slice(tag, coords);
    head.chol.mlp.forward(&model.params, x, &mut ws.nets.c_mw);
    ws.a_w.resize(dw * dw, 0.0);
    head.chol.factor_from_outputs(ws.nets.c_mw.output(), &mut ws.a_w);
    ws.minv_w.resize(dw * dw, 0.0);
    head.chol.matrix_from_factor(&ws.a_w, &mut ws.minv_w);
}

fn apply_mass_inverse(model: &PortHamiltonianModel, ws: &FlowWorkspace, p: &[f64], zeta: &mut [f64]) {
    let (dv, dw) = mass_block_dims(model.group);
    for i in 0..dv {
        let mut acc = 0.0;
        for j in 0..dv {
            acc += ws.minv_v[i * dv + j] * p[j];
        }
        zeta[i] = acc;
    }
    for i in 0..dw {
        let mut acc = 0.0;
        for j in 0..dw {
            acc += ws.minv_w[i * dw + j] * p[dv + j];
        }
        zeta[dv + i] = acc;
    }
}

/// Kinetic energy of one block through its factor: `T = 0.5 ||A^T p||^2 +
/// 0.5 eps ||p||^2`.
fn block_kinetic(a: &[f64], eps: f64, p: &[f64]) -> f64 {
    let d = p.len();
    let mut t = 0.0;
    for k in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += a[i * d + k] * p[i];
        }
        t += s * s;
    }
    0.5 * t + 0.5 * eps * p.iter().map(|x| x * x).sum::<f64>()
}

/// Adds the kinetic-curvature gradient `d(0.5 p^T M^{-1}(q) p)/d q_enc` for
/// one mass block into `g_enc` by a reverse pass through the factor network.
fn add_kinetic_gradient(
    head: &MassHead,
    params: &[f64],
    cache: &mut MlpCache<f64>,
    a: &[f64],
    p: &[f64],
    out_bar: &mut Vec<f64>,
    g_enc: &mut [f64],
) {
    let d = head.chol.dim;
    // dT/dA = p (A^T p)^T.
    let mut s = vec![0.0; d];
    for k in 0..d {
        for i in 0..d {
            s[k] += a[i * d + k] * p[i];
        }
    }
    out_bar.clear();
    out_bar.resize(head.chol.mlp.output_dim(), 0.0);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            out_bar[idx] = p[i] * s[j];
            idx += 1;
        }
    }
    head.chol.mlp.backward(params, cache, out_bar, g_enc, |_, _| {});
}

/// Evaluates `zeta`, `dH/dq`, `B(q)`, and the dissipation blocks. Forward
/// caches stay alive in `ws` for reverse passes.
fn eval_structured_heads(
    model: &PortHamiltonianModel,
    ws: &mut FlowWorkspace,
    coords: &[f64],
    p: &[f64],
) {
    let tag = model.group;
    let (dv, dw) = mass_block_dims(tag);
    let d = dv + dw;
    eval_mass_heads(model, ws, coords);
    ws.zeta.resize(d, 0.0);
    let mut zeta = std::mem::take(&mut ws.zeta);
    apply_mass_inverse(model, ws, p, &mut zeta);
    ws.zeta = zeta;
    // Potential gradient.
    ws.g.clear();
    ws.g.resize(tag.coord_dim(), 0.0);
    let vh = &model.heads.potential;
    let x = vh.enc.slice(tag, coords);
    vh.mlp.forward(&model.params, x, &mut ws.nets.c_v);
    let off = vh.enc.offset(tag);
    let dim = vh.enc.dim(tag);
    vh.mlp.backward(
        &model.params,
        &mut ws.nets.c_v,
        &[1.0],
        &mut ws.g[off..off + dim],
        |_, _| {},
    );
    if let NominalPotential::LinearZ { coeff } = vh.nominal {
        ws.g[2] += coeff;
    }
    // Kinetic curvature terms.
    if let Some(head) = &model.heads.mass_v_inv {
        let off = head.enc.offset(tag);
        let dim = head.enc.dim(tag);
        let (a_v, out_bar) = (&ws.a_v, &mut ws.out_bar);
        let mut tmp = std::mem::take(out_bar);
        add_kinetic_gradient(
            head,
            &model.params,
            &mut ws.nets.c_mv,
            a_v,
            &p[..dv],
            &mut tmp,
            &mut ws.g[off..off + dim],
        );
        ws.out_bar = tmp;
    }
    {
        let head = &model.heads.mass_w_inv;
        let off = head.enc.offset(tag);
        let dim = head.enc.dim(tag);
        let a_w = std::mem::take(&mut ws.a_w);
        let mut tmp = std::mem::take(&mut ws.out_bar);
        add_kinetic_gradient(
            head,
            &model.params,
            &mut ws.nets.c_mw,
            &a_w,
            &p[dv..dv + dw],
            &mut tmp,
            &mut ws.g[off..off + dim],
        );
        ws.a_w = a_w;
        ws.out_bar = tmp;
    }
    // Input matrix.
    let bh = &model.heads.input_matrix;
    let m = model.control_dim;
    ws.bmat.resize(d * m, 0.0);
    let x = bh.enc.slice(tag, coords);
    bh.mlp.forward(&model.params, x, &mut ws.nets.c_b);
    ws.bmat.copy_from_slice(ws.nets.c_b.output());
    if let NominalMatrix::Const(c) = &bh.nominal {
        for (o, v) in ws.bmat.iter_mut().zip(c.iter()) {
            *o += v;
        }
    }
    // Dissipation.
    ws.dmat_v.clear();
    ws.dmat_w.clear();
    if let Some(dh) = &model.heads.dissipation {
        if let Some(vhead) = &dh.v {
            let x = vhead.enc.slice(tag, coords);
            vhead.chol.mlp.forward(&model.params, x, &mut ws.nets.c_dv);
            let mut a = vec![0.0; dv * dv];
            vhead.chol.factor_from_outputs(ws.nets.c_dv.output(), &mut a);
            ws.dmat_v.resize(dv * dv, 0.0);
            vhead.chol.matrix_from_factor(&a, &mut ws.dmat_v);
        }
        let x = dh.w.enc.slice(tag, coords);
        dh.w.chol.mlp.forward(&model.params, x, &mut ws.nets.c_dw);
        let mut a = vec![0.0; dw * dw];
        dh.w.chol.factor_from_outputs(ws.nets.c_dw.output(), &mut a);
        ws.dmat_w.resize(dw * dw, 0.0);
        dh.w.chol.matrix_from_factor(&a, &mut ws.dmat_w);
    }
}

/// Port-Hamiltonian flow assembly shared by the structured and unstructured
/// models. `zeta = dH/dp`, `g = dH/dq` in flattened coordinates.
#[allow(clippy::too_many_arguments)]
fn assemble_flow(
    tag: GroupTag,
    coords: &[f64],
    p: &[f64],
    zeta: &[f64],
    g: &[f64],
    dmat_v: &[f64],
    dmat_w: &[f64],
    b: &[f64],
    u: &[f64],
    dx: &mut [f64],
) {
    let m = u.len();
    let d = tag.alg_dim();
    for v in dx.iter_mut() {
        *v = 0.0;
    }
    let cdim = tag.coord_dim();
    match tag {
        GroupTag::So3 => {
            let (pw, zw) = (p, zeta);
            for i in 0..3 {
                let r = &coords[3 * i..3 * i + 3];
                cross_add(r, zw, &mut dx[3 * i..3 * i + 3]);
            }
            let dpw = &mut dx[9..12];
            cross_add(pw, zw, dpw);
            for i in 0..3 {
                let r = &coords[3 * i..3 * i + 3];
                cross_add(r, &g[3 * i..3 * i + 3], dpw);
            }
            if !dmat_w.is_empty() {
                for i in 0..3 {
                    for j in 0..3 {
                        dx[9 + i] -= dmat_w[i * 3 + j] * zw[j];
                    }
                }
            }
            for i in 0..3 {
                for k in 0..m {
                    dx[9 + i] += b[i * m + k] * u[k];
                }
            }
        }
        GroupTag::Se2 => {
            let (pv, pw) = (&p[0..2], p[2]);
            let (zv, zw) = (&zeta[0..2], zeta[2]);
            let r = &coords[2..6]; // row-major 2x2
            dx[0] = r[0] * zv[0] + r[1] * zv[1];
            dx[1] = r[2] * zv[0] + r[3] * zv[1];
            // R * hat(zw): row i -> (r_i2 w, -r_i1 w)
            dx[2] = r[1] * zw;
            dx[3] = -r[0] * zw;
            dx[4] = r[3] * zw;
            dx[5] = -r[2] * zw;
            // dp_v
            dx[6] = pv[1] * zw;
            dx[7] = -pv[0] * zw;
            dx[6] -= r[0] * g[0] + r[2] * g[1];
            dx[7] -= r[1] * g[0] + r[3] * g[1];
            if !dmat_v.is_empty() {
                dx[6] -= dmat_v[0] * zv[0] + dmat_v[1] * zv[1];
                dx[7] -= dmat_v[2] * zv[0] + dmat_v[3] * zv[1];
            }
            // dp_w
            dx[8] = pv[0] * zv[1] - pv[1] * zv[0];
            let gr = &g[2..6];
            dx[8] += r[0] * gr[1] - r[1] * gr[0] + r[2] * gr[3] - r[3] * gr[2];
            if !dmat_w.is_empty() {
                dx[8] -= dmat_w[0] * zw;
            }
            let _ = pw;
            for i in 0..d {
                for k in 0..m {
                    dx[cdim + i] += b[i * m + k] * u[k];
                }
            }
        }
        GroupTag::Se3 => {
            let (pv, pw) = (&p[0..3], &p[3..6]);
            let (zv, zw) = (&zeta[0..3], &zeta[3..6]);
            // dp = R zv (rows r_i).
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                dx[i] = r[0] * zv[0] + r[1] * zv[1] + r[2] * zv[2];
            }
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                cross_add(r, zw, &mut dx[3 + 3 * i..6 + 3 * i]);
            }
            // dp_v
            {
                let (head, tail) = dx.split_at_mut(15);
                let dpv = &mut head[12..15];
                cross_add(pv, zw, dpv);
                for i in 0..3 {
                    let r = &coords[3 + 3 * i..6 + 3 * i];
                    for j in 0..3 {
                        dpv[j] -= r[j] * g[i];
                    }
                }
                if !dmat_v.is_empty() {
                    for i in 0..3 {
                        for j in 0..3 {
                            dpv[i] -= dmat_v[i * 3 + j] * zv[j];
                        }
                    }
                }
                // dp_w
                let dpw = tail;
                cross_add(pw, zw, dpw);
                cross_add(pv, zv, dpw);
                for i in 0..3 {
                    let r = &coords[3 + 3 * i..6 + 3 * i];
                    cross_add(r, &g[3 + 3 * i..6 + 3 * i], dpw);
                }
                if !dmat_w.is_empty() {
                    for i in 0..3 {
                        for j in 0..3 {
                            dpw[i] -= dmat_w[i * 3 + j] * zw[j];
                        }
                    }
                }
            }
            for i in 0..d {
                for k in 0..m {
                    dx[cdim + i] += b[i * m + k] * u[k];
                }
            }
        }
        GroupTag::So2 => unreachable!("flow is not defined on SO(2)"),
    }
}

/// Reverse pass of [`assemble_flow`]: given the output cotangent, accumulates
/// cotangents on the state, `zeta`, `g`, `B`, and the dissipation blocks.
#[allow(clippy::too_many_arguments)]
fn assemble_flow_vjp(
    tag: GroupTag,
    coords: &[f64],
    p: &[f64],
    zeta: &[f64],
    g: &[f64],
    dmat_v: &[f64],
    dmat_w: &[f64],
    _b: &[f64],
    u: &[f64],
    cot: &[f64],
    coords_bar: &mut [f64],
    p_bar: &mut [f64],
    zeta_bar: &mut [f64],
    g_bar: &mut [f64],
    b_bar: &mut [f64],
    dv_bar: &mut [f64],
    dw_bar: &mut [f64],
) {
    let m = u.len();
    let d = tag.alg_dim();
    let cdim = tag.coord_dim();
    // Input-channel term: shared across groups.
    for i in 0..d {
        let a = cot[cdim + i];
        for k in 0..m {
            b_bar[i * m + k] += a * u[k];
        }
    }
    match tag {
        GroupTag::So3 => {
            let (pw, zw) = (p, zeta);
            for i in 0..3 {
                let r = &coords[3 * i..3 * i + 3];
                let a = &cot[3 * i..3 * i + 3];
                // dr_i = r_i x zw
                cross_add(zw, a, &mut coords_bar[3 * i..3 * i + 3]);
                cross_add(a, r, zeta_bar);
            }
            let bb = &cot[9..12];
            cross_add(zw, bb, p_bar);
            cross_add(bb, pw, zeta_bar);
            for i in 0..3 {
                let r = &coords[3 * i..3 * i + 3];
                let gi = &g[3 * i..3 * i + 3];
                cross_add(gi, bb, &mut coords_bar[3 * i..3 * i + 3]);
                cross_add(bb, r, &mut g_bar[3 * i..3 * i + 3]);
            }
            if !dmat_w.is_empty() {
                for i in 0..3 {
                    for j in 0..3 {
                        dw_bar[i * 3 + j] -= bb[i] * zw[j];
                        zeta_bar[j] -= dmat_w[i * 3 + j] * bb[i];
                    }
                }
            }
        }
        GroupTag::Se2 => {
            let (pv, _pw) = (&p[0..2], p[2]);
            let (zv, zw) = (&zeta[0..2], zeta[2]);
            let r = &coords[2..6];
            let rb = &mut coords_bar[2..6];
            // dxy = R zv
            let (axy0, axy1) = (cot[0], cot[1]);
            zeta_bar[0] += r[0] * axy0 + r[2] * axy1;
            zeta_bar[1] += r[1] * axy0 + r[3] * axy1;
            rb[0] += axy0 * zv[0];
            rb[1] += axy0 * zv[1];
            rb[2] += axy1 * zv[0];
            rb[3] += axy1 * zv[1];
            // dR rows
            let ar = &cot[2..6];
            rb[1] += ar[0] * zw;
            rb[0] -= ar[1] * zw;
            rb[3] += ar[2] * zw;
            rb[2] -= ar[3] * zw;
            zeta_bar[2] += ar[0] * r[1] - ar[1] * r[0] + ar[2] * r[3] - ar[3] * r[2];
            // dp_v
            let av = &cot[6..8];
            p_bar[1] += av[0] * zw;
            p_bar[0] -= av[1] * zw;
            zeta_bar[2] += av[0] * pv[1] - av[1] * pv[0];
            g_bar[0] -= r[0] * av[0] + r[1] * av[1];
            g_bar[1] -= r[2] * av[0] + r[3] * av[1];
            rb[0] -= g[0] * av[0];
            rb[1] -= g[0] * av[1];
            rb[2] -= g[1] * av[0];
            rb[3] -= g[1] * av[1];
            if !dmat_v.is_empty() {
                for i in 0..2 {
                    for j in 0..2 {
                        dv_bar[i * 2 + j] -= av[i] * zv[j];
                        zeta_bar[j] -= dmat_v[i * 2 + j] * av[i];
                    }
                }
            }
            // dp_w
            let aw = cot[8];
            p_bar[0] += aw * zv[1];
            p_bar[1] -= aw * zv[0];
            zeta_bar[1] += aw * pv[0];
            zeta_bar[0] -= aw * pv[1];
            let gr = &g[2..6];
            rb[0] += aw * gr[1];
            rb[1] -= aw * gr[0];
            rb[2] += aw * gr[3];
            rb[3] -= aw * gr[2];
            g_bar[3] += aw * r[0];
            g_bar[2] -= aw * r[1];
            g_bar[5] += aw * r[2];
            g_bar[4] -= aw * r[3];
            if !dmat_w.is_empty() {
                dw_bar[0] -= aw * zw;
                zeta_bar[2] -= dmat_w[0] * aw;
            }
        }
        GroupTag::Se3 => {
            let (pv, pw) = (&p[0..3], &p[3..6]);
            let (zv, zw) = (&zeta[0..3], &zeta[3..6]);
            // dp = R zv
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                let a = cot[i];
                for j in 0..3 {
                    zeta_bar[j] += r[j] * a;
                    coords_bar[3 + 3 * i + j] += a * zv[j];
                }
            }
            // dr_i = r_i x zw
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                let a = &cot[3 + 3 * i..6 + 3 * i];
                cross_add(zw, a, &mut coords_bar[3 + 3 * i..6 + 3 * i]);
                cross_add(a, r, &mut zeta_bar[3..6]);
            }
            // dp_v
            let av = &cot[12..15];
            {
                let (pb_v, _) = p_bar.split_at_mut(3);
                cross_add(zw, av, pb_v);
            }
            cross_add(av, pv, &mut zeta_bar[3..6]);
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                let mut dot = 0.0;
                for j in 0..3 {
                    coords_bar[3 + 3 * i + j] -= g[i] * av[j];
                    dot += r[j] * av[j];
                }
                g_bar[i] -= dot;
            }
            if !dmat_v.is_empty() {
                for i in 0..3 {
                    for j in 0..3 {
                        dv_bar[i * 3 + j] -= av[i] * zv[j];
                        zeta_bar[j] -= dmat_v[i * 3 + j] * av[i];
                    }
                }
            }
            // dp_w
            let aw = &cot[15..18];
            {
                let (pb_v, pb_w) = p_bar.split_at_mut(3);
                cross_add(zw, aw, pb_w);
                cross_add(aw, pw, &mut zeta_bar[3..6]);
                cross_add(zv, aw, pb_v);
                cross_add(aw, pv, &mut zeta_bar[0..3]);
            }
            for i in 0..3 {
                let r = &coords[3 + 3 * i..6 + 3 * i];
                let gi = &g[3 + 3 * i..6 + 3 * i];
                cross_add(gi, aw, &mut coords_bar[3 + 3 * i..6 + 3 * i]);
                cross_add(aw, r, &mut g_bar[3 + 3 * i..6 + 3 * i]);
            }
            if !dmat_w.is_empty() {
                for i in 0..3 {
                    for j in 0..3 {
                        dw_bar[i * 3 + j] -= aw[i] * zw[j];
                        zeta_bar[3 + j] -= dmat_w[i * 3 + j] * aw[i];
                    }
                }
            }
        }
        GroupTag::So2 => unreachable!(),
    }
}

/// Reverse pass through one Cholesky head for a (possibly asymmetric) matrix
/// cotangent on the assembled `M^{-1}`: `A_bar = (G + G^T) A`.
fn mass_head_matrix_vjp(
    head: &MassHead,
    params: &[f64],
    cache: &mut MlpCache<f64>,
    a: &[f64],
    mat_bar: &[f64],
    out_bar: &mut Vec<f64>,
    enc_bar: &mut [f64],
    grad: &mut [f64],
) {
    let d = head.chol.dim;
    out_bar.clear();
    out_bar.resize(head.chol.mlp.output_dim(), 0.0);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            // A_bar[i][j] = sum_k (G[i][k] + G[k][i]) A[k][j]
            let mut acc = 0.0;
            for k in 0..d {
                acc += (mat_bar[i * d + k] + mat_bar[k * d + i]) * a[k * d + j];
            }
            out_bar[idx] = acc;
            idx += 1;
        }
    }
    head.chol.mlp.backward(params, cache, out_bar, enc_bar, |k, v| grad[k] += v);
}

/// Dual-number pass for one mass block: pulls a cotangent `c` on the kinetic
/// gradient `d T/d q_enc` back to the encoded input (Hessian-vector product),
/// the momentum block, and the parameters.
#[allow(clippy::too_many_arguments)]
fn mass_head_kinetic_vjp(
    head: &MassHead,
    params: &[f64],
    ws_dual: &mut MlpCache<Dual>,
    x_enc: &[f64],
    c: &[f64],
    p: &[f64],
    dual_in: &mut Vec<Dual>,
    dual_a: &mut Vec<Dual>,
    dual_s: &mut Vec<Dual>,
    dual_abar: &mut Vec<Dual>,
    dual_out: &mut Vec<Dual>,
    dual_xbar: &mut Vec<Dual>,
    enc_bar: &mut [f64],
    p_bar: &mut [f64],
    grad: &mut [f64],
) {
    let d = head.chol.dim;
    dual_in.clear();
    dual_in.extend(x_enc.iter().zip(c.iter()).map(|(&v, &t)| Dual::new(v, t)));
    head.chol.mlp.forward(params, dual_in, ws_dual);
    dual_a.clear();
    dual_a.resize(d * d, Dual::ZERO);
    head.chol.factor_from_outputs(ws_dual.output(), dual_a);
    // s = A^T p, T = 0.5 s.s + 0.5 eps p.p ; reverse with T_bar = 1.
    dual_s.clear();
    dual_s.resize(d, Dual::ZERO);
    for k in 0..d {
        let mut acc = Dual::ZERO;
        for i in 0..d {
            acc = acc + dual_a[i * d + k] * Dual::constant(p[i]);
        }
        dual_s[k] = acc;
    }
    // dT/dp = A s + eps p: its tangent part is the mixed second derivative.
    for i in 0..d {
        let mut acc = Dual::ZERO;
        for k in 0..d {
            acc = acc + dual_a[i * d + k] * dual_s[k];
        }
        p_bar[i] += acc.du; // eps p has no tangent in the x direction
    }
    // dT/dA = p s^T -> triangle cotangent -> network reverse (dual).
    dual_abar.clear();
    dual_abar.resize(d * d, Dual::ZERO);
    for i in 0..d {
        for j in 0..d {
            dual_abar[i * d + j] = Dual::constant(p[i]) * dual_s[j];
        }
    }
    dual_out.clear();
    dual_out.resize(head.chol.mlp.output_dim(), Dual::ZERO);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            dual_out[idx] = dual_abar[i * d + j];
            idx += 1;
        }
    }
    dual_xbar.clear();
    dual_xbar.resize(x_enc.len(), Dual::ZERO);
    head.chol.mlp.backward(params, ws_dual, dual_out, dual_xbar, |k, v| grad[k] += v.du);
    for (eb, dx) in enc_bar.iter_mut().zip(dual_xbar.iter()) {
        *eb += dx.du;
    }
}

/// Dissipation-head reverse pass (`D = (L0+L)(L0+L)^T`, eps = 0).
fn dissipation_head_vjp(
    head: &MassHead,
    params: &[f64],
    cache: &mut MlpCache<f64>,
    mat_bar: &[f64],
    out_bar: &mut Vec<f64>,
    enc_bar: &mut [f64],
    grad: &mut [f64],
) {
    let d = head.chol.dim;
    // Recover the factor from the cache output.
    let mut a = vec![0.0; d * d];
    head.chol.factor_from_outputs(cache.output(), &mut a);
    mass_head_matrix_vjp(head, params, cache, &a, mat_bar, out_bar, enc_bar, grad);
}

impl PortHamiltonianModel {
    pub fn state_dim(&self) -> usize {
        self.group.coord_dim() + self.group.alg_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim()
    }
}

/// The interface every trainable architecture exposes to the ODE machinery:
/// the vector field, its reverse pass, and the maps between the observable
/// `(q, zeta)` samples and the internal integration state.
pub trait TrainableDynamics: Sync {
    fn group(&self) -> GroupTag;
    fn control_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_len(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn flow(&self, ws: &mut FlowWorkspace, x: &[f64], u: &[f64], dx: &mut [f64]);
    /// Accumulates `(df/dx)^T cot` into `x_bar` and `(df/dtheta)^T cot` into `grad`.
    fn flow_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    );
    fn init_state(&self, ws: &mut FlowWorkspace, obs: &[f64], x0: &mut [f64]);
    /// Parameter gradient of the observable-to-state map at fixed data.
    fn init_state_vjp(&self, ws: &mut FlowWorkspace, obs: &[f64], x0_bar: &[f64], grad: &mut [f64]);
    fn observe(&self, ws: &mut FlowWorkspace, x: &[f64], obs: &mut [f64]);
    fn observe_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        obs_bar: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    );
}

fn invert_small(m: &[f64], d: usize, out: &mut [f64]) {
    match d {
        1 => out[0] = 1.0 / m[0],
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            out[0] = m[3] / det;
            out[1] = -m[1] / det;
            out[2] = -m[2] / det;
            out[3] = m[0] / det;
        }
        3 => {
            let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6]);
            out[0] = (m[4] * m[8] - m[5] * m[7]) / det;
            out[1] = (m[2] * m[7] - m[1] * m[8]) / det;
            out[2] = (m[1] * m[5] - m[2] * m[4]) / det;
            out[3] = (m[5] * m[6] - m[3] * m[8]) / det;
            out[4] = (m[0] * m[8] - m[2] * m[6]) / det;
            out[5] = (m[2] * m[3] - m[0] * m[5]) / det;
            out[6] = (m[3] * m[7] - m[4] * m[6]) / det;
            out[7] = (m[1] * m[6] - m[0] * m[7]) / det;
            out[8] = (m[0] * m[4] - m[1] * m[3]) / det;
        }
        _ => panic!("unsupported block size {d}"),
    }
}

impl TrainableDynamics for PortHamiltonianModel {
    fn group(&self) -> GroupTag {
        self.group
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn state_dim(&self) -> usize {
        PortHamiltonianModel::state_dim(self)
    }
    fn obs_dim(&self) -> usize {
        PortHamiltonianModel::obs_dim(self)
    }
    fn param_len(&self) -> usize {
        self.params.len()
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn flow(&self, ws: &mut FlowWorkspace, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let cdim = self.group.coord_dim();
        let (coords, p) = x.split_at(cdim);
        eval_structured_heads(self, ws, coords, p);
        let zeta = std::mem::take(&mut ws.zeta);
        let g = std::mem::take(&mut ws.g);
        let bmat = std::mem::take(&mut ws.bmat);
        let dv = std::mem::take(&mut ws.dmat_v);
        let dw = std::mem::take(&mut ws.dmat_w);
        assemble_flow(self.group, coords, p, &zeta, &g, &dv, &dw, &bmat, u, dx);
        ws.zeta = zeta;
        ws.g = g;
        ws.bmat = bmat;
        ws.dmat_v = dv;
        ws.dmat_w = dw;
    }

    fn flow_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let d = tag.alg_dim();
        let (dv_dim, dw_dim) = mass_block_dims(tag);
        let (coords, p) = x.split_at(cdim);
        eval_structured_heads(self, ws, coords, p);
        let zeta = std::mem::take(&mut ws.zeta);
        let g = std::mem::take(&mut ws.g);
        let bmat = std::mem::take(&mut ws.bmat);
        let dmat_v = std::mem::take(&mut ws.dmat_v);
        let dmat_w = std::mem::take(&mut ws.dmat_w);

        ws.zeta_bar.clear();
        ws.zeta_bar.resize(d, 0.0);
        ws.g_bar.clear();
        ws.g_bar.resize(cdim, 0.0);
        let mut b_bar = vec![0.0; d * u.len()];
        let mut dv_bar = vec![0.0; dmat_v.len()];
        let mut dw_bar = vec![0.0; dmat_w.len()];
        let (cb, pb) = x_bar.split_at_mut(cdim);
        {
            let mut zeta_bar = std::mem::take(&mut ws.zeta_bar);
            let mut g_bar = std::mem::take(&mut ws.g_bar);
            assemble_flow_vjp(
                tag, coords, p, &zeta, &g, &dmat_v, &dmat_w, &bmat, u, cot, cb, pb,
                &mut zeta_bar, &mut g_bar, &mut b_bar, &mut dv_bar, &mut dw_bar,
            );
            ws.zeta_bar = zeta_bar;
            ws.g_bar = g_bar;
        }

        // zeta = M^{-1} p: momentum pullback and first-order mass cotangent.
        let zeta_bar = std::mem::take(&mut ws.zeta_bar);
        for i in 0..dv_dim {
            for j in 0..dv_dim {
                pb[j] += ws.minv_v[i * dv_dim + j] * zeta_bar[i];
            }
        }
        for i in 0..dw_dim {
            for j in 0..dw_dim {
                pb[dv_dim + j] += ws.minv_w[i * dw_dim + j] * zeta_bar[dw_offset(tag) + i];
            }
        }
        // Mass heads: matrix cotangent G = zeta_bar p^T per block, plus the
        // second-order kinetic pullback with direction g_bar|enc.
        if let Some(head) = &self.heads.mass_v_inv {
            let off = head.enc.offset(tag);
            let dim = head.enc.dim(tag);
            ws.mat_bar.clear();
            ws.mat_bar.resize(dv_dim * dv_dim, 0.0);
            for i in 0..dv_dim {
                for j in 0..dv_dim {
                    ws.mat_bar[i * dv_dim + j] = zeta_bar[i] * p[j];
                }
            }
            let a_v = std::mem::take(&mut ws.a_v);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            let mat_bar = std::mem::take(&mut ws.mat_bar);
            mass_head_matrix_vjp(
                head,
                &self.params,
                &mut ws.nets.c_mv,
                &a_v,
                &mat_bar,
                &mut out_bar,
                &mut cb[off..off + dim],
                grad,
            );
            ws.mat_bar = mat_bar;
            let x_enc = &coords[off..off + dim];
            let mut dual_in = std::mem::take(&mut ws.dual_in);
            let mut dual_a = std::mem::take(&mut ws.dual_a);
            let mut dual_s = std::mem::take(&mut ws.dual_s);
            let mut dual_abar = std::mem::take(&mut ws.dual_abar);
            let mut dual_out = std::mem::take(&mut ws.dual_out);
            let mut dual_xbar = std::mem::take(&mut ws.dual_xbar);
            mass_head_kinetic_vjp(
                head,
                &self.params,
                &mut ws.nets.c_dual,
                x_enc,
                &ws.g_bar[off..off + dim],
                &p[..dv_dim],
                &mut dual_in,
                &mut dual_a,
                &mut dual_s,
                &mut dual_abar,
                &mut dual_out,
                &mut dual_xbar,
                &mut cb[off..off + dim],
                &mut pb[..dv_dim],
                grad,
            );
            ws.dual_in = dual_in;
            ws.dual_a = dual_a;
            ws.dual_s = dual_s;
            ws.dual_abar = dual_abar;
            ws.dual_out = dual_out;
            ws.dual_xbar = dual_xbar;
            ws.a_v = a_v;
            ws.out_bar = out_bar;
        }
        {
            let head = &self.heads.mass_w_inv;
            let off = head.enc.offset(tag);
            let dim = head.enc.dim(tag);
            ws.mat_bar.clear();
            ws.mat_bar.resize(dw_dim * dw_dim, 0.0);
            for i in 0..dw_dim {
                for j in 0..dw_dim {
                    ws.mat_bar[i * dw_dim + j] = zeta_bar[dw_offset(tag) + i] * p[dv_dim + j];
                }
            }
            let a_w = std::mem::take(&mut ws.a_w);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            let mat_bar = std::mem::take(&mut ws.mat_bar);
            mass_head_matrix_vjp(
                head,
                &self.params,
                &mut ws.nets.c_mw,
                &a_w,
                &mat_bar,
                &mut out_bar,
                &mut cb[off..off + dim],
                grad,
            );
            ws.mat_bar = mat_bar;
            let x_enc = &coords[off..off + dim];
            let mut dual_in = std::mem::take(&mut ws.dual_in);
            let mut dual_a = std::mem::take(&mut ws.dual_a);
            let mut dual_s = std::mem::take(&mut ws.dual_s);
            let mut dual_abar = std::mem::take(&mut ws.dual_abar);
            let mut dual_out = std::mem::take(&mut ws.dual_out);
            let mut dual_xbar = std::mem::take(&mut ws.dual_xbar);
            mass_head_kinetic_vjp(
                head,
                &self.params,
                &mut ws.nets.c_dual,
                x_enc,
                &ws.g_bar[off..off + dim],
                &p[dv_dim..dv_dim + dw_dim],
                &mut dual_in,
                &mut dual_a,
                &mut dual_s,
                &mut dual_abar,
                &mut dual_out,
                &mut dual_xbar,
                &mut cb[off..off + dim],
                &mut pb[dv_dim..dv_dim + dw_dim],
                grad,
            );
            ws.dual_in = dual_in;
            ws.dual_a = dual_a;
            ws.dual_s = dual_s;
            ws.dual_abar = dual_abar;
            ws.dual_out = dual_out;
            ws.dual_xbar = dual_xbar;
            ws.a_w = a_w;
            ws.out_bar = out_bar;
        }
        // Potential: second-order pullback along g_bar|enc.
        {
            let vh = &self.heads.potential;
            let off = vh.enc.offset(tag);
            let dim = vh.enc.dim(tag);
            ws.dual_in.clear();
            ws.dual_in.extend(
                coords[off..off + dim]
                    .iter()
                    .zip(ws.g_bar[off..off + dim].iter())
                    .map(|(&v, &t)| Dual::new(v, t)),
            );
            let dual_in = std::mem::take(&mut ws.dual_in);
            vh.mlp.forward(&self.params, &dual_in, &mut ws.nets.c_dual);
            ws.dual_in = dual_in;
            ws.dual_xbar.clear();
            ws.dual_xbar.resize(dim, Dual::ZERO);
            let mut dual_xbar = std::mem::take(&mut ws.dual_xbar);
            vh.mlp.backward(
                &self.params,
                &mut ws.nets.c_dual,
                &[Dual::constant(1.0)],
                &mut dual_xbar,
                |k, v| grad[k] += v.du,
            );
            for (o, dxb) in cb[off..off + dim].iter_mut().zip(dual_xbar.iter()) {
                *o += dxb.du;
            }
            ws.dual_xbar = dual_xbar;
            // The nominal LinearZ contribution to g is constant: no pullback.
        }
        // Input matrix (first order).
        {
            let bh = &self.heads.input_matrix;
            let off = bh.enc.offset(tag);
            let dim = bh.enc.dim(tag);
            bh.mlp.backward(
                &self.params,
                &mut ws.nets.c_b,
                &b_bar,
                &mut cb[off..off + dim],
                |k, v| grad[k] += v,
            );
        }
        // Dissipation heads (first order).
        if let Some(dh) = &self.heads.dissipation {
            if let Some(vhead) = &dh.v {
                let off = vhead.enc.offset(tag);
                let dim = vhead.enc.dim(tag);
                let mut out_bar = std::mem::take(&mut ws.out_bar);
                dissipation_head_vjp(
                    vhead,
                    &self.params,
                    &mut ws.nets.c_dv,
                    &dv_bar,
                    &mut out_bar,
                    &mut cb[off..off + dim],
                    grad,
                );
                ws.out_bar = out_bar;
            }
            let off = dh.w.enc.offset(tag);
            let dim = dh.w.enc.dim(tag);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            dissipation_head_vjp(
                &dh.w,
                &self.params,
                &mut ws.nets.c_dw,
                &dw_bar,
                &mut out_bar,
                &mut cb[off..off + dim],
                grad,
            );
            ws.out_bar = out_bar;
        }
        ws.zeta_bar = zeta_bar;
        ws.zeta = zeta;
        ws.g = g;
        ws.bmat = bmat;
        ws.dmat_v = dmat_v;
        ws.dmat_w = dmat_w;
    }

    fn init_state(&self, ws: &mut FlowWorkspace, obs: &[f64], x0: &mut [f64]) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let (dv, dw) = mass_block_dims(tag);
        x0[..cdim].copy_from_slice(&obs[..cdim]);
        eval_mass_heads(self, ws, &obs[..cdim]);
        // p0 = M(q0) zeta0, block by block.
        let mut inv = [0.0; 9];
        if dv > 0 {
            invert_small(&ws.minv_v, dv, &mut inv);
            for i in 0..dv {
                let mut acc = 0.0;
                for j in 0..dv {
                    acc += inv[i * dv + j] * obs[cdim + j];
                }
                x0[cdim + i] = acc;
            }
        }
        invert_small(&ws.minv_w, dw, &mut inv);
        for i in 0..dw {
            let mut acc = 0.0;
            for j in 0..dw {
                acc += inv[i * dw + j] * obs[cdim + dv + j];
            }
            x0[cdim + dv + i] = acc;
        }
    }

    fn init_state_vjp(&self, ws: &mut FlowWorkspace, obs: &[f64], x0_bar: &[f64], grad: &mut [f64]) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let (dv, dw) = mass_block_dims(tag);
        eval_mass_heads(self, ws, &obs[..cdim]);
        // For each block: p0 = G^{-1} z with G = M^{-1};
        // G_bar = -(G^{-1} lambda)(G^{-1} z)^T.
        let handle_block = |head: &MassHead,
                                cache_sel: usize,
                                gmat: &[f64],
                                a: &[f64],
                                d: usize,
                                z: &[f64],
                                lambda: &[f64],
                                ws_out: &mut Vec<f64>,
                                ws_enc: &mut Vec<f64>,
                                nets: &mut crate::nets::Workspace,
                                grad: &mut [f64]| {
            let mut inv = [0.0; 9];
            invert_small(gmat, d, &mut inv);
            let mut gl = vec![0.0; d];
            let mut gz = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    gl[i] += inv[i * d + j] * lambda[j];
                    gz[i] += inv[i * d + j] * z[j];
                }
            }
            let mut mat_bar = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    mat_bar[i * d + j] = -gl[i] * gz[j];
                }
            }
            ws_enc.clear();
            ws_enc.resize(head.enc.dim(tag), 0.0);
            let cache = if cache_sel == 0 { &mut nets.c_mv } else { &mut nets.c_mw };
            mass_head_matrix_vjp(head, &self.params, cache, a, &mat_bar, ws_out, ws_enc, grad);
        };
        if let Some(head) = &self.heads.mass_v_inv {
            let minv_v = std::mem::take(&mut ws.minv_v);
            let a_v = std::mem::take(&mut ws.a_v);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            let mut enc_bar = std::mem::take(&mut ws.enc_bar);
            handle_block(
                head,
                0,
                &minv_v,
                &a_v,
                dv,
                &obs[cdim..cdim + dv],
                &x0_bar[cdim..cdim + dv],
                &mut out_bar,
                &mut enc_bar,
                &mut ws.nets,
                grad,
            );
            ws.minv_v = minv_v;
            ws.a_v = a_v;
            ws.out_bar = out_bar;
            ws.enc_bar = enc_bar;
        }
        let head = &self.heads.mass_w_inv;
        let minv_w = std::mem::take(&mut ws.minv_w);
        let a_w = std::mem::take(&mut ws.a_w);
        let mut out_bar = std::mem::take(&mut ws.out_bar);
        let mut enc_bar = std::mem::take(&mut ws.enc_bar);
        handle_block(
            head,
            1,
            &minv_w,
            &a_w,
            dw,
            &obs[cdim + dv..cdim + dv + dw],
            &x0_bar[cdim + dv..cdim + dv + dw],
            &mut out_bar,
            &mut enc_bar,
            &mut ws.nets,
            grad,
        );
        ws.minv_w = minv_w;
        ws.a_w = a_w;
        ws.out_bar = out_bar;
        ws.enc_bar = enc_bar;
    }

    fn observe(&self, ws: &mut FlowWorkspace, x: &[f64], obs: &mut [f64]) {
        let cdim = self.group.coord_dim();
        let d = self.group.alg_dim();
        obs[..cdim].copy_from_slice(&x[..cdim]);
        eval_mass_heads(self, ws, &x[..cdim]);
        ws.obs_sc.resize(d, 0.0);
        let mut zeta = std::mem::take(&mut ws.obs_sc);
        apply_mass_inverse(self, ws, &x[cdim..], &mut zeta);
        obs[cdim..cdim + d].copy_from_slice(&zeta);
        ws.obs_sc = zeta;
    }

    fn observe_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        obs_bar: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let (dv, dw) = mass_block_dims(tag);
        let (coords, p) = x.split_at(cdim);
        eval_mass_heads(self, ws, coords);
        let (cb, pb) = x_bar.split_at_mut(cdim);
        for i in 0..cdim {
            cb[i] += obs_bar[i];
        }
        let zb = &obs_bar[cdim..];
        for i in 0..dv {
            for j in 0..dv {
                pb[j] += ws.minv_v[i * dv + j] * zb[i];
            }
        }
        for i in 0..dw {
            for j in 0..dw {
                pb[dv + j] += ws.minv_w[i * dw + j] * zb[dv + i];
            }
        }
        if let Some(head) = &self.heads.mass_v_inv {
            let off = head.enc.offset(tag);
            let dim = head.enc.dim(tag);
            let mut mat_bar = vec![0.0; dv * dv];
            for i in 0..dv {
                for j in 0..dv {
                    mat_bar[i * dv + j] = zb[i] * p[j];
                }
            }
            let a_v = std::mem::take(&mut ws.a_v);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            mass_head_matrix_vjp(
                head,
                &self.params,
                &mut ws.nets.c_mv,
                &a_v,
                &mat_bar,
                &mut out_bar,
                &mut cb[off..off + dim],
                grad,
            );
            ws.a_v = a_v;
            ws.out_bar = out_bar;
        }
        {
            let head = &self.heads.mass_w_inv;
            let off = head.enc.offset(tag);
            let dim = head.enc.dim(tag);
            let mut mat_bar = vec![0.0; dw * dw];
            for i in 0..dw {
                for j in 0..dw {
                    mat_bar[i * dw + j] = zb[dv + i] * p[dv + j];
                }
            }
            let a_w = std::mem::take(&mut ws.a_w);
            let mut out_bar = std::mem::take(&mut ws.out_bar);
            mass_head_matrix_vjp(
                head,
                &self.params,
                &mut ws.nets.c_mw,
                &a_w,
                &mat_bar,
                &mut out_bar,
                &mut cb[off..off + dim],
                grad,
            );
            ws.a_w = a_w;
            ws.out_bar = out_bar;
        }
    }
}

fn dw_offset(tag: GroupTag) -> usize {
    mass_block_dims(tag).0
}

impl TrainableDynamics for UnstructuredModel {
    fn group(&self) -> GroupTag {
        self.group
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn state_dim(&self) -> usize {
        self.group.coord_dim() + self.group.alg_dim()
    }
    fn obs_dim(&self) -> usize {
        self.state_dim()
    }
    fn param_len(&self) -> usize {
        self.params.len()
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn flow(&self, ws: &mut FlowWorkspace, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let d = tag.alg_dim();
        let (coords, p) = x.split_at(cdim);
        // Gradient of the single Hamiltonian network over (q, p).
        self.hnet.forward(&self.params, x, &mut ws.nets.c_h);
        ws.hgrad.clear();
        ws.hgrad.resize(cdim + d, 0.0);
        let mut hgrad = std::mem::take(&mut ws.hgrad);
        self.hnet.backward(&self.params, &mut ws.nets.c_h, &[1.0], &mut hgrad, |_, _| {});
        let bh = &self.input_matrix;
        bh.mlp.forward(&self.params, bh.enc.slice(tag, coords), &mut ws.nets.c_b);
        ws.bmat.resize(d * u.len(), 0.0);
        ws.bmat.copy_from_slice(ws.nets.c_b.output());
        let bmat = std::mem::take(&mut ws.bmat);
        assemble_flow(tag, coords, p, &hgrad[cdim..], &hgrad[..cdim], &[], &[], &bmat, u, dx);
        ws.bmat = bmat;
        ws.hgrad = hgrad;
    }

    fn flow_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        let tag = self.group;
        let cdim = tag.coord_dim();
        let d = tag.alg_dim();
        let (coords, p) = x.split_at(cdim);
        self.hnet.forward(&self.params, x, &mut ws.nets.c_h);
        ws.hgrad.clear();
        ws.hgrad.resize(cdim + d, 0.0);
        let mut hgrad = std::mem::take(&mut ws.hgrad);
        self.hnet.backward(&self.params, &mut ws.nets.c_h, &[1.0], &mut hgrad, |_, _| {});
        let bh = &self.input_matrix;
        bh.mlp.forward(&self.params, bh.enc.slice(tag, coords), &mut ws.nets.c_b);
        ws.bmat.resize(d * u.len(), 0.0);
        ws.bmat.copy_from_slice(ws.nets.c_b.output());
        let bmat = std::mem::take(&mut ws.bmat);

        ws.zeta_bar.clear();
        ws.zeta_bar.resize(d, 0.0);
        ws.g_bar.clear();
        ws.g_bar.resize(cdim, 0.0);
        let mut b_bar = vec![0.0; d * u.len()];
        let (cb, pb) = x_bar.split_at_mut(cdim);
        let mut zeta_bar = std::mem::take(&mut ws.zeta_bar);
        let mut g_bar = std::mem::take(&mut ws.g_bar);
        assemble_flow_vjp(
            tag,
            coords,
            p,
            &hgrad[cdim..],
            &hgrad[..cdim],
            &[],
            &[],
            &bmat,
            u,
            cot,
            cb,
            pb,
            &mut zeta_bar,
            &mut g_bar,
            &mut b_bar,
            &mut [],
            &mut [],
        );
        // The pair (g_bar, zeta_bar) is a cotangent on grad H: one dual-mode
        // reverse pass pulls it back through the Hessian.
        ws.dual_in.clear();
        for i in 0..cdim {
            ws.dual_in.push(Dual::new(x[i], g_bar[i]));
        }
        for i in 0..d {
            ws.dual_in.push(Dual::new(x[cdim + i], zeta_bar[i]));
        }
        let dual_in = std::mem::take(&mut ws.dual_in);
        self.hnet.forward(&self.params, &dual_in, &mut ws.nets.c_dual);
        ws.dual_in = dual_in;
        ws.dual_xbar.clear();
        ws.dual_xbar.resize(cdim + d, Dual::ZERO);
        let mut dual_xbar = std::mem::take(&mut ws.dual_xbar);
        self.hnet.backward(
            &self.params,
            &mut ws.nets.c_dual,
            &[Dual::constant(1.0)],
            &mut dual_xbar,
            |k, v| grad[k] += v.du,
        );
        for i in 0..cdim {
            cb[i] += dual_xbar[i].du;
        }
        for i in 0..d {
            pb[i] += dual_xbar[cdim + i].du;
        }
        ws.dual_xbar = dual_xbar;
        // Input-matrix pullback (first order).
        let off = bh.enc.offset(tag);
        let dim = bh.enc.dim(tag);
        bh.mlp.backward(&self.params, &mut ws.nets.c_b, &b_bar, &mut cb[off..off + dim], |k, v| {
            grad[k] += v
        });
        ws.zeta_bar = zeta_bar;
        ws.g_bar = g_bar;
        ws.bmat = bmat;
        ws.hgrad = hgrad;
    }

    fn init_state(&self, _ws: &mut FlowWorkspace, obs: &[f64], x0: &mut [f64]) {
        // The internal momentum is identified with the observed velocity at
        // t0; the network is free to learn dH/dp consistent with this choice.
        x0.copy_from_slice(obs);
    }

    fn init_state_vjp(
        &self,
        _ws: &mut FlowWorkspace,
        _obs: &[f64],
        _x0_bar: &[f64],
        _grad: &mut [f64],
    ) {
    }

    fn observe(&self, ws: &mut FlowWorkspace, x: &[f64], obs: &mut [f64]) {
        let cdim = self.group.coord_dim();
        let d = self.group.alg_dim();
        obs[..cdim].copy_from_slice(&x[..cdim]);
        self.hnet.forward(&self.params, x, &mut ws.nets.c_h);
        ws.hgrad.clear();
        ws.hgrad.resize(cdim + d, 0.0);
        let mut hgrad = std::mem::take(&mut ws.hgrad);
        self.hnet.backward(&self.params, &mut ws.nets.c_h, &[1.0], &mut hgrad, |_, _| {});
        obs[cdim..].copy_from_slice(&hgrad[cdim..]);
        ws.hgrad = hgrad;
    }

    fn observe_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        obs_bar: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        let cdim = self.group.coord_dim();
        let d = self.group.alg_dim();
        for i in 0..cdim {
            x_bar[i] += obs_bar[i];
        }
        // zeta = dH/dp: pull the cotangent back through the Hessian.
        ws.dual_in.clear();
        for i in 0..cdim {
            ws.dual_in.push(Dual::new(x[i], 0.0));
        }
        for i in 0..d {
            ws.dual_in.push(Dual::new(x[cdim + i], obs_bar[cdim + i]));
        }
        let dual_in = std::mem::take(&mut ws.dual_in);
        self.hnet.forward(&self.params, &dual_in, &mut ws.nets.c_dual);
        ws.dual_in = dual_in;
        ws.dual_xbar.clear();
        ws.dual_xbar.resize(cdim + d, Dual::ZERO);
        let mut dual_xbar = std::mem::take(&mut ws.dual_xbar);
        self.hnet.backward(
            &self.params,
            &mut ws.nets.c_dual,
            &[Dual::constant(1.0)],
            &mut dual_xbar,
            |k, v| grad[k] += v.du,
        );
        for i in 0..cdim + d {
            x_bar[i] += dual_xbar[i].du;
        }
        ws.dual_xbar = dual_xbar;
    }
}

impl TrainableDynamics for BlackBoxModel {
    fn group(&self) -> GroupTag {
        self.group
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn state_dim(&self) -> usize {
        self.group.coord_dim() + self.group.alg_dim()
    }
    fn obs_dim(&self) -> usize {
        self.state_dim()
    }
    fn param_len(&self) -> usize {
        self.params.len()
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn flow(&self, ws: &mut FlowWorkspace, x: &[f64], u: &[f64], dx: &mut [f64]) {
        ws.obs_sc.clear();
        ws.obs_sc.extend_from_slice(x);
        ws.obs_sc.extend_from_slice(u);
        let inp = std::mem::take(&mut ws.obs_sc);
        self.net.forward(&self.params, &inp, &mut ws.nets.c_h);
        ws.obs_sc = inp;
        dx.copy_from_slice(ws.nets.c_h.output());
    }

    fn flow_vjp(
        &self,
        ws: &mut FlowWorkspace,
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        x_bar: &mut [f64],
        grad: &mut [f64],
    ) {
        ws.obs_sc.clear();
        ws.obs_sc.extend_from_slice(x);
        ws.obs_sc.extend_from_slice(u);
        let inp = std::mem::take(&mut ws.obs_sc);
        self.net.forward(&self.params, &inp, &mut ws.nets.c_h);
        ws.obs_sc = inp;
        ws.enc_bar.clear();
        ws.enc_bar.resize(x.len() + u.len(), 0.0);
        let mut enc_bar = std::mem::take(&mut ws.enc_bar);
        self.net.backward(&self.params, &mut ws.nets.c_h, cot, &mut enc_bar, |k, v| grad[k] += v);
        for i in 0..x.len() {
            x_bar[i] += enc_bar[i];
        }
        ws.enc_bar = enc_bar;
    }

    fn init_state(&self, _ws: &mut FlowWorkspace, obs: &[f64], x0: &mut [f64]) {
        x0.copy_from_slice(obs);
    }

    fn init_state_vjp(
        &self,
        _ws: &mut FlowWorkspace,
        _obs: &[f64],
        _x0_bar: &[f64],
        _grad: &mut [f64],
    ) {
    }

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
        for (xb, ob) in x_bar.iter_mut().zip(obs_bar.iter()) {
            *xb += ob;
        }
    }
}

/// Dispatch wrapper over the three architectures.
pub enum AnyDynamics<'a> {
    Structured(&'a PortHamiltonianModel),
    Unstructured(&'a UnstructuredModel),
    BlackBox(&'a BlackBoxModel),
}

/// Total energy `H(q, p) = 0.5 p^T M^{-1}(q) p + V(q)`.
pub fn hamiltonian(model: &PortHamiltonianModel, q: &GroupElement, p: &MomentumVector) -> f64 {
    let mut ws = FlowWorkspace::new();
    let coords = q.coords();
    hamiltonian_from_state(model, &mut ws, coords.as_slice(), p.coords.as_slice())
}

pub(crate) fn hamiltonian_from_state(
    model: &PortHamiltonianModel,
    ws: &mut FlowWorkspace,
    coords: &[f64],
    p: &[f64],
) -> f64 {
    let (dv, dw) = mass_block_dims(model.group);
    eval_mass_heads(model, ws, coords);
    let mut h = 0.0;
    if let Some(head) = &model.heads.mass_v_inv {
        h += block_kinetic(&ws.a_v, head.chol.epsilon, &p[..dv]);
    }
    h += block_kinetic(&ws.a_w, model.heads.mass_w_inv.chol.epsilon, &p[dv..dv + dw]);
    let vh = &model.heads.potential;
    vh.mlp.forward(&model.params, vh.enc.slice(model.group, coords), &mut ws.nets.c_v);
    h += ws.nets.c_v.output()[0];
    if let NominalPotential::LinearZ { coeff } = vh.nominal {
        h += coeff * coords[2];
    }
    h
}

/// `(dH/dq, dH/dp)` in flattened coordinates. `dH/dp = M^{-1} p` exactly;
/// `dH/dq` carries the kinetic curvature term plus the potential gradient.
pub fn hamiltonian_gradients(
    model: &PortHamiltonianModel,
    q: &GroupElement,
    p: &MomentumVector,
) -> (DVector<f64>, DVector<f64>) {
    let mut ws = FlowWorkspace::new();
    let coords = q.coords();
    eval_structured_heads(model, &mut ws, coords.as_slice(), p.coords.as_slice());
    (DVector::from_vec(ws.g.clone()), DVector::from_vec(ws.zeta.clone()))
}

/// SE(3) port-Hamiltonian vector field: returns `(d coords/dt, d p/dt)`.
pub fn flow_se3(
    model: &PortHamiltonianModel,
    state: &PhState,
    u: &[f64],
) -> Result<(DVector<f64>, DVector<f64>), DynError> {
    if model.group != GroupTag::Se3 || state.q.tag() != GroupTag::Se3 {
        return Err(DynError::GroupMismatch(model.group, state.q.tag()));
    }
    flow_checked(model, state, u)
}

/// Restricted flow on SO(3) (rows + angular momentum only) or SE(2).
pub fn flow_restricted(
    model: &PortHamiltonianModel,
    state: &PhState,
    u: &[f64],
    tag: GroupTag,
) -> Result<(DVector<f64>, DVector<f64>), DynError> {
    if !matches!(tag, GroupTag::So3 | GroupTag::Se2) {
        return Err(DynError::UnsupportedGroup(tag));
    }
    if model.group != tag || state.q.tag() != tag {
        return Err(DynError::GroupMismatch(model.group, state.q.tag()));
    }
    flow_checked(model, state, u)
}

fn flow_checked(
    model: &PortHamiltonianModel,
    state: &PhState,
    u: &[f64],
) -> Result<(DVector<f64>, DVector<f64>), DynError> {
    if u.len() != model.control_dim {
        return Err(DynError::Dim(format!(
            "control has length {}, model expects {}",
            u.len(),
            model.control_dim
        )));
    }
    let mut ws = FlowWorkspace::new();
    let cdim = model.group.coord_dim();
    let d = model.group.alg_dim();
    let mut x = vec![0.0; cdim + d];
    x[..cdim].copy_from_slice(state.q.coords().as_slice());
    x[cdim..].copy_from_slice(state.p.coords.as_slice());
    let mut dx = vec![0.0; cdim + d];
    model.flow(&mut ws, &x, u, &mut dx);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(DynError::NonFinite);
    }
    Ok((
        DVector::from_column_slice(&dx[..cdim]),
        DVector::from_column_slice(&dx[cdim..]),
    ))
}

/// Momentum derivative through the generic Lie-group route: the coadjoint and
/// dual-left-translation maps in matrix form, converted back to vector
/// coordinates. Used as an independent oracle for the hand-expanded flow.
pub fn generic_flow_oracle(
    model: &PortHamiltonianModel,
    state: &PhState,
    u: &[f64],
) -> Result<(DVector<f64>, DVector<f64>), DynError> {
    let tag = model.group;
    let mut ws = FlowWorkspace::new();
    let coords = state.q.coords();
    eval_structured_heads(model, &mut ws, coords.as_slice(), state.p.coords.as_slice());
    let d = tag.alg_dim();
    let zeta = crate::liegroup::AlgebraVector::new(tag, DVector::from_column_slice(&ws.zeta))
        .map_err(|e| DynError::Dim(e.to_string()))?;
    // Kinematics in matrix form: qdot = q * hat(zeta).
    let xi = liegroup::hat(&zeta);
    let qdot = state.q.matrix() * &xi.mat;
    let r = tag.rot_dim();
    let t = tag.trans_dim();
    let mut dcoords = DVector::zeros(tag.coord_dim());
    for i in 0..t {
        dcoords[i] = qdot[(i, r)];
    }
    for i in 0..r {
        for j in 0..r {
            dcoords[t + i * r + j] = qdot[(i, j)];
        }
    }
    // Momentum: ad*_xi(p) - T*_e L_q(dH/dq as a matrix) - D zeta + B u.
    let p = MomentumVector::new(tag, state.p.coords.clone())
        .map_err(|e| DynError::Dim(e.to_string()))?;
    let coad = liegroup::coad_star_generic(&zeta, &p).map_err(|e| DynError::Dim(e.to_string()))?;
    let n = tag.mat_dim();
    let mut eta = DMatrix::zeros(n, n);
    for i in 0..t {
        eta[(i, r)] = ws.g[i];
    }
    for i in 0..r {
        for j in 0..r {
            eta[(i, j)] = ws.g[t + i * r + j];
        }
    }
    let pulled = liegroup::dual_left_translate(&state.q, &eta)
        .map_err(|e| DynError::Dim(e.to_string()))?;
    let pulled_vec = liegroup::dual_matrix_to_momentum(tag, &pulled);
    let mut dp = DVector::zeros(d);
    for i in 0..d {
        dp[i] = coad.coords[i] - pulled_vec.coords[i];
    }
    let (dv_dim, dw_dim) = mass_block_dims(tag);
    if !ws.dmat_v.is_empty() {
        for i in 0..dv_dim {
            for j in 0..dv_dim {
                dp[i] -= ws.dmat_v[i * dv_dim + j] * ws.zeta[j];
            }
        }
    }
    if !ws.dmat_w.is_empty() {
        for i in 0..dw_dim {
            for j in 0..dw_dim {
                dp[dv_dim + i] -= ws.dmat_w[i * dw_dim + j] * ws.zeta[dv_dim + j];
            }
        }
    }
    for i in 0..d {
        for k in 0..u.len() {
            dp[i] += ws.bmat[i * u.len() + k] * u[k];
        }
    }
    Ok((dcoords, dp))
}

/// Evaluates the head values of a structured model at a coordinate vector,
/// for inspection and oracle comparisons.
pub struct HeadValues {
    pub minv_v: Option<DMatrix<f64>>,
    pub minv_w: DMatrix<f64>,
    pub potential: f64,
    pub dhdq: DVector<f64>,
    pub input_matrix: DMatrix<f64>,
    pub dissipation_v: Option<DMatrix<f64>>,
    pub dissipation_w: Option<DMatrix<f64>>,
}

/// Public head evaluation: `M^{-1}` blocks, `V`, `dH/dq`, `B`, `D` at `(q, p)`.
pub fn head_values(model: &PortHamiltonianModel, q: &GroupElement, p: &MomentumVector) -> HeadValues {
    let mut ws = FlowWorkspace::new();
    let coords = q.coords();
    let (dv, dw) = mass_block_dims(model.group);
    eval_structured_heads(model, &mut ws, coords.as_slice(), p.coords.as_slice());
    let potential = {
        let vh = &model.heads.potential;
        vh.mlp.forward(&model.params, vh.enc.slice(model.group, coords.as_slice()), &mut ws.nets.c_v);
        let mut v = ws.nets.c_v.output()[0];
        if let NominalPotential::LinearZ { coeff } = vh.nominal {
            v += coeff * coords[2];
        }
        v
    };
    HeadValues {
        minv_v: model
            .heads
            .mass_v_inv
            .as_ref()
            .map(|_| DMatrix::from_row_slice(dv, dv, &ws.minv_v)),
        minv_w: DMatrix::from_row_slice(dw, dw, &ws.minv_w),
        potential,
        dhdq: DVector::from_column_slice(&ws.g),
        input_matrix: DMatrix::from_row_slice(
            model.group.alg_dim(),
            model.control_dim,
            &ws.bmat,
        ),
        dissipation_v: if ws.dmat_v.is_empty() {
            None
        } else {
            Some(DMatrix::from_row_slice(dv, dv, &ws.dmat_v))
        },
        dissipation_w: if ws.dmat_w.is_empty() {
            None
        } else {
            Some(DMatrix::from_row_slice(dw, dw, &ws.dmat_w))
        },
    }
}

/// Builds a [`PhState`] from raw state storage (coords + momentum).
pub fn state_from_slice(tag: GroupTag, x: &[f64]) -> Result<PhState, DynError> {
    let cdim = tag.coord_dim();
    let mat = coords_to_matrix(tag, &x[..cdim]).map_err(|e| DynError::Dim(e.to_string()))?;
    let q = GroupElement::from_matrix_unchecked(tag, mat);
    let p = MomentumVector::new(tag, DVector::from_column_slice(&x[cdim..]))
        .map_err(|e| DynError::Dim(e.to_string()))?;
    PhState::new(q, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{structured_preset, unstructured_preset, blackbox_preset};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_state(tag: GroupTag, rng: &mut StdRng) -> Vec<f64> {
        let v = crate::liegroup::AlgebraVector::new(
            tag,
            DVector::from_iterator(tag.alg_dim(), (0..tag.alg_dim()).map(|_| rng.gen_range(-1.0..1.0))),
        )
        .unwrap();
        let q = crate::liegroup::exp_map(&v);
        let mut x = vec![0.0; tag.coord_dim() + tag.alg_dim()];
        x[..tag.coord_dim()].copy_from_slice(q.coords().as_slice());
        for i in 0..tag.alg_dim() {
            x[tag.coord_dim() + i] = rng.gen_range(-1.0..1.0);
        }
        x
    }

    fn numeric_flow_vjp<M: TrainableDynamics>(
        model: &M,
        x: &[f64],
        u: &[f64],
        cot: &[f64],
        param_step: usize,
    ) -> (Vec<f64>, Vec<f64>)
    where
        M: Clone,
        M: ParamAccess,
    {
        let mut ws = FlowWorkspace::new();
        let n = x.len();
        let h = 1e-6;
        let mut x_bar = vec![0.0; n];
        let mut dx = vec![0.0; n];
        for i in 0..n {
            let mut xp = x.to_vec();
            xp[i] += h;
            model.flow(&mut ws, &xp, u, &mut dx);
            let fp: f64 = dx.iter().zip(cot.iter()).map(|(a, b)| a * b).sum();
            let mut xm = x.to_vec();
            xm[i] -= h;
            model.flow(&mut ws, &xm, u, &mut dx);
            let fm: f64 = dx.iter().zip(cot.iter()).map(|(a, b)| a * b).sum();
            x_bar[i] = (fp - fm) / (2.0 * h);
        }
        let np = model.param_len();
        let mut g = vec![0.0; np];
        let mut pert = model.clone();
        for k in (0..np).step_by(param_step) {
            let orig = pert.params_ref()[k];
            pert.params_mut_ref()[k] = orig + h;
            pert.flow(&mut ws, x, u, &mut dx);
            let fp: f64 = dx.iter().zip(cot.iter()).map(|(a, b)| a * b).sum();
            pert.params_mut_ref()[k] = orig - h;
            pert.flow(&mut ws, x, u, &mut dx);
            let fm: f64 = dx.iter().zip(cot.iter()).map(|(a, b)| a * b).sum();
            pert.params_mut_ref()[k] = orig;
            g[k] = (fp - fm) / (2.0 * h);
        }
        (x_bar, g)
    }

    trait ParamAccess {
        fn params_ref(&self) -> &[f64];
        fn params_mut_ref(&mut self) -> &mut [f64];
    }
    impl ParamAccess for PortHamiltonianModel {
        fn params_ref(&self) -> &[f64] {
            &self.params
        }
        fn params_mut_ref(&mut self) -> &mut [f64] {
            &mut self.params
        }
    }
    impl ParamAccess for UnstructuredModel {
        fn params_ref(&self) -> &[f64] {
            &self.params
        }
        fn params_mut_ref(&mut self) -> &mut [f64] {
            &mut self.params
        }
    }

    fn randomize_params(params: &mut [f64], rng: &mut StdRng, scale: f64) {
        for p in params.iter_mut() {
            *p += rng.gen_range(-scale..scale);
        }
    }

    #[test]
    fn hamiltonian_reduces_to_potential_at_zero_momentum() {
        let model = structured_preset("quadrotor_desk", 3).unwrap();
        let q = GroupElement::identity(GroupTag::Se3);
        let p = MomentumVector::zeros(GroupTag::Se3);
        let h = hamiltonian(&model, &q, &p);
        let hv = head_values(&model, &q, &p);
        assert!((h - hv.potential).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        for preset in ["pendulum_desk", "se2_desk", "quadrotor_desk"] {
            let mut model = structured_preset(preset, 5).unwrap();
            randomize_params(&mut model.params, &mut rng, 0.05);
            let tag = model.group;
            let x = random_state(tag, &mut rng);
            let cdim = tag.coord_dim();
            let state = state_from_slice(tag, &x).unwrap();
            let (dhdq, dhdp) = hamiltonian_gradients(&model, &state.q, &state.p);
            let mut ws = FlowWorkspace::new();
            let h = 1e-5;
            for i in 0..cdim {
                let mut cp = x[..cdim].to_vec();
                cp[i] += h;
                let hp = hamiltonian_from_state(&model, &mut ws, &cp, &x[cdim..]);
                let mut cm = x[..cdim].to_vec();
                cm[i] -= h;
                let hm = hamiltonian_from_state(&model, &mut ws, &cm, &x[cdim..]);
                let fd = (hp - hm) / (2.0 * h);
                assert!(
                    (fd - dhdq[i]).abs() / fd.abs().max(1e-4) < 1e-5,
                    "{preset} dH/dq[{i}]: {fd} vs {}",
                    dhdq[i]
                );
            }
            for i in 0..tag.alg_dim() {
                let mut pp = x[cdim..].to_vec();
                pp[i] += h;
                let hp = hamiltonian_from_state(&model, &mut ws, &x[..cdim], &pp);
                let mut pm = x[cdim..].to_vec();
                pm[i] -= h;
                let hm = hamiltonian_from_state(&model, &mut ws, &x[..cdim], &pm);
                let fd = (hp - hm) / (2.0 * h);
                assert!(
                    (fd - dhdp[i]).abs() / fd.abs().max(1e-4) < 1e-5,
                    "{preset} dH/dp[{i}]: {fd} vs {}",
                    dhdp[i]
                );
            }
        }
    }

    #[test]
    fn structured_flow_vjp_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        for preset in ["pendulum_desk", "se2_desk", "quadrotor_desk"] {
            let mut model = structured_preset(preset, 6).unwrap();
            randomize_params(&mut model.params, &mut rng, 0.05);
            let tag = model.group;
            let n = tag.coord_dim() + tag.alg_dim();
            let x = random_state(tag, &mut rng);
            let u: Vec<f64> = (0..model.control_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cot: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ws = FlowWorkspace::new();
            let mut x_bar = vec![0.0; n];
            let mut grad = vec![0.0; model.param_len()];
            model.flow_vjp(&mut ws, &x, &u, &cot, &mut x_bar, &mut grad);
            let (fd_x, fd_g) = numeric_flow_vjp(&model, &x, &u, &cot, 7);
            for i in 0..n {
                assert!(
                    (x_bar[i] - fd_x[i]).abs() / fd_x[i].abs().max(1e-3) < 2e-4,
                    "{preset} x_bar[{i}]: {} vs {}",
                    x_bar[i],
                    fd_x[i]
                );
            }
            for k in (0..model.param_len()).step_by(7) {
                assert!(
                    (grad[k] - fd_g[k]).abs() / fd_g[k].abs().max(1e-3) < 2e-4,
                    "{preset} grad[{k}]: {} vs {}",
                    grad[k],
                    fd_g[k]
                );
            }
        }
    }

    #[test]
    fn unstructured_flow_vjp_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(14);
        let mut model = unstructured_preset(GroupTag::So3, 1, 16, 3);
        randomize_params(&mut model.params, &mut rng, 0.05);
        let tag = model.group;
        let n = tag.coord_dim() + tag.alg_dim();
        let x = random_state(tag, &mut rng);
        let u = vec![0.3];
        let cot: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ws = FlowWorkspace::new();
        let mut x_bar = vec![0.0; n];
        let mut grad = vec![0.0; model.param_len()];
        model.flow_vjp(&mut ws, &x, &u, &cot, &mut x_bar, &mut grad);
        let (fd_x, fd_g) = numeric_flow_vjp(&model, &x, &u, &cot, 5);
        for i in 0..n {
            assert!(
                (x_bar[i] - fd_x[i]).abs() / fd_x[i].abs().max(1e-3) < 2e-4,
                "x_bar[{i}]: {} vs {}",
                x_bar[i],
                fd_x[i]
            );
        }
        for k in (0..model.param_len()).step_by(5) {
            assert!(
                (grad[k] - fd_g[k]).abs() / fd_g[k].abs().max(1e-3) < 2e-4,
                "grad[{k}]: {} vs {}",
                grad[k],
                fd_g[k]
            );
        }
    }

    #[test]
    fn observe_and_init_are_consistent() {
        let mut rng = StdRng::seed_from_u64(24);
        let mut model = structured_preset("se2_desk", 8).unwrap();
        randomize_params(&mut model.params, &mut rng, 0.05);
        let tag = model.group;
        let n = tag.coord_dim() + tag.alg_dim();
        let x = random_state(tag, &mut rng);
        let mut ws = FlowWorkspace::new();
        let mut obs = vec![0.0; n];
        model.observe(&mut ws, &x, &mut obs);
        let mut x0 = vec![0.0; n];
        model.init_state(&mut ws, &obs, &mut x0);
        for i in 0..n {
            assert!((x0[i] - x[i]).abs() < 1e-11, "roundtrip [{i}]: {} vs {}", x0[i], x[i]);
        }
    }

    #[test]
    fn generic_route_matches_hand_expanded_flow() {
        let mut rng = StdRng::seed_from_u64(34);
        for preset in ["pendulum_desk", "se2_desk", "quadrotor_desk"] {
            let mut model = structured_preset(preset, 11).unwrap();
            randomize_params(&mut model.params, &mut rng, 0.05);
            let tag = model.group;
            for _ in 0..100 {
                let x = random_state(tag, &mut rng);
                let u: Vec<f64> =
                    (0..model.control_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let state = state_from_slice(tag, &x).unwrap();
                let (dc_gen, dp_gen) = generic_flow_oracle(&model, &state, &u).unwrap();
                let mut ws = FlowWorkspace::new();
                let mut dx = vec![0.0; x.len()];
                model.flow(&mut ws, &x, &u, &mut dx);
                let cdim = tag.coord_dim();
                for i in 0..cdim {
                    assert!(
                        (dx[i] - dc_gen[i]).abs() < 1e-10,
                        "{preset} coords[{i}]: {} vs {}",
                        dx[i],
                        dc_gen[i]
                    );
                }
                for i in 0..tag.alg_dim() {
                    assert!(
                        (dx[cdim + i] - dp_gen[i]).abs() < 1e-10,
                        "{preset} dp[{i}]: {} vs {}",
                        dx[cdim + i],
                        dp_gen[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_momentum_flat_potential_gives_zero_restricted_derivative() {
        let mut model = structured_preset("pendulum_desk", 2).unwrap();
        // Zero all potential-net parameters so V is constant.
        let vh = model.heads.potential.mlp.clone();
        let off = vh.offset;
        for k in off..off + vh.param_len() {
            model.params[k] = 0.0;
        }
        let q = GroupElement::identity(GroupTag::So3);
        let p = MomentumVector::zeros(GroupTag::So3);
        let state = PhState::new(q, p).unwrap();
        let (dc, dp) = flow_restricted(&model, &state, &[0.0], GroupTag::So3).unwrap();
        assert!(dc.norm() < 1e-14);
        assert!(dp.norm() < 1e-14);
    }

    #[test]
    fn blackbox_zero_weights_returns_bias() {
        let mut model = blackbox_preset(GroupTag::So3, 1, 8, 0);
        for p in model.params.iter_mut() {
            *p = 0.0;
        }
        // Put a known bias on the output layer.
        let net = model.net.clone();
        let off = net.offset + net.param_len() - net.output_dim();
        for (k, val) in (off..off + net.output_dim()).zip(0..) {
            model.params[k] = val as f64 * 0.1;
        }
        let mut ws = FlowWorkspace::new();
        let mut rng = StdRng::seed_from_u64(0);
        let x = random_state(GroupTag::So3, &mut rng);
        let mut dx = vec![0.0; x.len()];
        model.flow(&mut ws, &x, &[0.4], &mut dx);
        for (i, v) in dx.iter().enumerate() {
            assert!((v - i as f64 * 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn flow_restricted_rejects_se3_tag() {
        let model = structured_preset("quadrotor_desk", 0).unwrap();
        let q = GroupElement::identity(GroupTag::Se3);
        let p = MomentumVector::zeros(GroupTag::Se3);
        let state = PhState::new(q, p).unwrap();
        assert!(matches!(
            flow_restricted(&model, &state, &[0.0; 4], GroupTag::Se3),
            Err(DynError::UnsupportedGroup(_))
        ));
    }
}
