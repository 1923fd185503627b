//! Matrix Lie group kernel for SO(2), SO(3), SE(2) and SE(3).
//!
//! Group elements are stored as their embedding matrices. Algebra and
//! momentum elements are stored in vector coordinates with the ordering
//! `[v; omega]` (translational first) on SE(2)/SE(3). The pairing between
//! matrices is the trace pairing `<a, b> = tr(a^T b)`; all dual maps and
//! coadjoints below are derived from it.
//!
//! SE(2) is handled as the (x, y, yaw) restriction of the SE(3) formulas
//! rather than through a separate derivation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

/// Default tolerance for group-membership checks at construction.
pub const DEFAULT_GROUP_TOL: f64 = 1e-9;
/// The logarithm raises [`GroupError::CutLocus`] when the rotation angle is
/// within this distance of pi.
pub const CUT_LOCUS_TOL: f64 = 1e-9;
/// Below this trace margin the SO(3) logarithm switches to eigenvector-based
/// axis extraction.
const NEAR_PI_TRACE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("matrix shape {rows}x{cols} does not match group {tag:?}")]
    Shape { tag: GroupTag, rows: usize, cols: usize },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    PairShape(usize, usize, usize, usize),
    #[error("group tag mismatch: {0:?} vs {1:?}")]
    TagMismatch(GroupTag, GroupTag),
    #[error("not a valid element of {tag:?}: {reason}")]
    InvalidElement { tag: GroupTag, reason: String },
    #[error("matrix is not in the Lie algebra of {tag:?}: {reason}")]
    NotInAlgebra { tag: GroupTag, reason: String },
    #[error("logarithm at the cut locus: rotation angle within {CUT_LOCUS_TOL:e} of pi")]
    CutLocus,
    #[error("coordinate dimension {got} does not match group {tag:?} (expected {expected})")]
    CoordDim { tag: GroupTag, got: usize, expected: usize },
    #[error("non-finite entry")]
    NonFinite,
}

/// Supported matrix Lie groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GroupTag {
    So2,
    So3,
    Se2,
    Se3,
}

impl GroupTag {
    /// Side length of the embedding matrix.
    pub fn mat_dim(self) -> usize {
        match self {
            GroupTag::So2 => 2,
            GroupTag::So3 => 3,
            GroupTag::Se2 => 3,
            GroupTag::Se3 => 4,
        }
    }

    /// Dimension of the Lie algebra (degrees of freedom).
    pub fn alg_dim(self) -> usize {
        match self {
            GroupTag::So2 => 1,
            GroupTag::So3 => 3,
            GroupTag::Se2 => 3,
            GroupTag::Se3 => 6,
        }
    }

    /// Side length of the rotation block.
    pub fn rot_dim(self) -> usize {
        match self {
            GroupTag::So2 | GroupTag::Se2 => 2,
            GroupTag::So3 | GroupTag::Se3 => 3,
        }
    }

    /// Number of translational coordinates (0 for the pure rotation groups).
    pub fn trans_dim(self) -> usize {
        match self {
            GroupTag::So2 | GroupTag::So3 => 0,
            GroupTag::Se2 => 2,
            GroupTag::Se3 => 3,
        }
    }

    /// Length of the flattened coordinate vector `[p; rows of R]`.
    pub fn coord_dim(self) -> usize {
        self.trans_dim() + self.rot_dim() * self.rot_dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupTag::So2 => "so2",
            GroupTag::So3 => "so3",
            GroupTag::Se2 => "se2",
            GroupTag::Se3 => "se3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "so2" => Some(GroupTag::So2),
            "so3" => Some(GroupTag::So3),
            "se2" => Some(GroupTag::Se2),
            "se3" => Some(GroupTag::Se3),
            _ => None,
        }
    }
}

/// A generalized coordinate: an element of one of the supported groups,
/// stored as its embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    tag: GroupTag,
    mat: DMatrix<f64>,
}

impl GroupElement {
    /// Builds an element after checking the group constraints with the
    /// default tolerance.
    pub fn from_matrix(tag: GroupTag, mat: DMatrix<f64>) -> Result<Self, GroupError> {
        Self::from_matrix_with_tol(tag, mat, DEFAULT_GROUP_TOL)
    }

    /// Builds an element checking `||R R^T - I||_F <= tol`, `|det R - 1| <= tol`
    /// and, on SE(n), that the bottom row is exactly `[0 .. 0 1]`.
    pub fn from_matrix_with_tol(
        tag: GroupTag,
        mat: DMatrix<f64>,
        tol: f64,
    ) -> Result<Self, GroupError> {
        let n = tag.mat_dim();
        if mat.nrows() != n || mat.ncols() != n {
            return Err(GroupError::Shape { tag, rows: mat.nrows(), cols: mat.ncols() });
        }
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(GroupError::NonFinite);
        }
        let r = tag.rot_dim();
        let rot = mat.view((0, 0), (r, r));
        let orth = (&rot * rot.transpose() - DMatrix::identity(r, r)).norm();
        if orth > tol {
            return Err(GroupError::InvalidElement {
                tag,
                reason: format!("||R R^T - I|| = {orth:.3e} exceeds {tol:.1e}"),
            });
        }
        let det = rot.clone_owned().determinant();
        if (det - 1.0).abs() > tol {
            return Err(GroupError::InvalidElement {
                tag,
                reason: format!("|det R - 1| = {:.3e} exceeds {tol:.1e}", (det - 1.0).abs()),
            });
        }
        if tag.trans_dim() > 0 {
            for j in 0..n {
                let want = if j == n - 1 { 1.0 } else { 0.0 };
                if mat[(n - 1, j)] != want {
                    return Err(GroupError::InvalidElement {
                        tag,
                        reason: "bottom row is not [0 .. 0 1]".into(),
                    });
                }
            }
        }
        Ok(Self { tag, mat })
    }

    /// Wraps a matrix without validation. Intended for states produced by an
    /// integrator, where constraint drift is a measured quantity.
    pub fn from_matrix_unchecked(tag: GroupTag, mat: DMatrix<f64>) -> Self {
        Self { tag, mat }
    }

    pub fn identity(tag: GroupTag) -> Self {
        Self { tag, mat: DMatrix::identity(tag.mat_dim(), tag.mat_dim()) }
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// The rotation block.
    pub fn rotation(&self) -> DMatrix<f64> {
        let r = self.tag.rot_dim();
        self.mat.view((0, 0), (r, r)).clone_owned()
    }

    /// The translation column (empty for SO(n)).
    pub fn translation(&self) -> DVector<f64> {
        let r = self.tag.rot_dim();
        let t = self.tag.trans_dim();
        self.mat.view((0, r), (t, 1)).clone_owned().column(0).clone_owned()
    }

    /// Structured inverse: `R^T` on SO(n), `[R^T, -R^T p; 0 1]` on SE(n).
    pub fn inverse(&self) -> GroupElement {
        let n = self.tag.mat_dim();
        let r = self.tag.rot_dim();
        let mut out = DMatrix::identity(n, n);
        let rot_t = self.rotation().transpose();
        out.view_mut((0, 0), (r, r)).copy_from(&rot_t);
        if self.tag.trans_dim() > 0 {
            let p = self.translation();
            let neg = -&rot_t * p;
            out.view_mut((0, r), (r, 1)).copy_from(&neg);
        }
        GroupElement { tag: self.tag, mat: out }
    }

    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement, GroupError> {
        if self.tag != other.tag {
            return Err(GroupError::TagMismatch(self.tag, other.tag));
        }
        Ok(GroupElement { tag: self.tag, mat: &self.mat * &other.mat })
    }

    /// Flattens to the coordinate vector `[p; rows of R]`.
    pub fn coords(&self) -> DVector<f64> {
        let r = self.tag.rot_dim();
        let t = self.tag.trans_dim();
        let mut out = DVector::zeros(self.tag.coord_dim());
        for i in 0..t {
            out[i] = self.mat[(i, r)];
        }
        for i in 0..r {
            for j in 0..r {
                out[t + i * r + j] = self.mat[(i, j)];
            }
        }
        out
    }

    /// Rebuilds an element from the coordinate vector `[p; rows of R]`.
    pub fn from_coords(tag: GroupTag, coords: &[f64]) -> Result<Self, GroupError> {
        let mat = coords_to_matrix(tag, coords)?;
        Self::from_matrix(tag, mat)
    }
}

pub(crate) fn coords_to_matrix(tag: GroupTag, coords: &[f64]) -> Result<DMatrix<f64>, GroupError> {
    if coords.len() != tag.coord_dim() {
        return Err(GroupError::CoordDim { tag, got: coords.len(), expected: tag.coord_dim() });
    }
    let n = tag.mat_dim();
    let r = tag.rot_dim();
    let t = tag.trans_dim();
    let mut mat = DMatrix::identity(n, n);
    for i in 0..t {
        mat[(i, r)] = coords[i];
    }
    for i in 0..r {
        for j in 0..r {
            mat[(i, j)] = coords[t + i * r + j];
        }
    }
    Ok(mat)
}

/// Vector coordinates of a Lie algebra element (`[v; omega]` on SE(n)).
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraVector {
    pub tag: GroupTag,
    pub coords: DVector<f64>,
}

impl AlgebraVector {
    pub fn new(tag: GroupTag, coords: DVector<f64>) -> Result<Self, GroupError> {
        if coords.len() != tag.alg_dim() {
            return Err(GroupError::CoordDim { tag, got: coords.len(), expected: tag.alg_dim() });
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GroupError::NonFinite);
        }
        Ok(Self { tag, coords })
    }

    pub fn zeros(tag: GroupTag) -> Self {
        Self { tag, coords: DVector::zeros(tag.alg_dim()) }
    }
}

/// Vector coordinates of a generalized momentum, ordered to pair with
/// [`AlgebraVector`] (`[p_v; p_omega]` on SE(n)).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumVector {
    pub tag: GroupTag,
    pub coords: DVector<f64>,
}

impl MomentumVector {
    pub fn new(tag: GroupTag, coords: DVector<f64>) -> Result<Self, GroupError> {
        if coords.len() != tag.alg_dim() {
            return Err(GroupError::CoordDim { tag, got: coords.len(), expected: tag.alg_dim() });
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(GroupError::NonFinite);
        }
        Ok(Self { tag, coords })
    }

    pub fn zeros(tag: GroupTag) -> Self {
        Self { tag, coords: DVector::zeros(tag.alg_dim()) }
    }
}

/// A Lie algebra element in matrix form (e.g. a 4x4 twist on SE(3)).
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraMatrix {
    pub tag: GroupTag,
    pub mat: DMatrix<f64>,
}

impl AlgebraMatrix {
    /// Checks that the matrix lies in the algebra subspace: skew rotation
    /// block, zero bottom row on SE(n).
    pub fn new(tag: GroupTag, mat: DMatrix<f64>) -> Result<Self, GroupError> {
        Self::new_with_tol(tag, mat, DEFAULT_GROUP_TOL)
    }

    pub fn new_with_tol(tag: GroupTag, mat: DMatrix<f64>, tol: f64) -> Result<Self, GroupError> {
        let n = tag.mat_dim();
        if mat.nrows() != n || mat.ncols() != n {
            return Err(GroupError::Shape { tag, rows: mat.nrows(), cols: mat.ncols() });
        }
        let r = tag.rot_dim();
        let rot = mat.view((0, 0), (r, r));
        let sym = (rot + rot.transpose()).norm();
        if sym > tol {
            return Err(GroupError::NotInAlgebra {
                tag,
                reason: format!("rotation block symmetric part has norm {sym:.3e}"),
            });
        }
        if tag.trans_dim() > 0 {
            let bottom = mat.row(n - 1).norm();
            if bottom > tol {
                return Err(GroupError::NotInAlgebra {
                    tag,
                    reason: format!("bottom row has norm {bottom:.3e}"),
                });
            }
        }
        Ok(Self { tag, mat })
    }
}

/// Trace pairing `<a, b> = tr(a^T b)` between two matrices of equal shape.
pub fn pairing(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, GroupError> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(GroupError::PairShape(a.nrows(), a.ncols(), b.nrows(), b.ncols()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

pub(crate) fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

pub(crate) fn so3_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Linear isomorphism from vector coordinates to the algebra matrix.
///
/// On SO(3) this is the skew-symmetric map; on SE(n) the translational part
/// `v` fills the last column of the twist matrix.
pub fn hat(v: &AlgebraVector) -> AlgebraMatrix {
    let tag = v.tag;
    let n = tag.mat_dim();
    let mut mat = DMatrix::zeros(n, n);
    match tag {
        GroupTag::So2 => {
            mat[(0, 1)] = -v.coords[0];
            mat[(1, 0)] = v.coords[0];
        }
        GroupTag::So3 => {
            let w = Vector3::new(v.coords[0], v.coords[1], v.coords[2]);
            mat.view_mut((0, 0), (3, 3)).copy_from(&so3_hat(&w));
        }
        GroupTag::Se2 => {
            mat[(0, 1)] = -v.coords[2];
            mat[(1, 0)] = v.coords[2];
            mat[(0, 2)] = v.coords[0];
            mat[(1, 2)] = v.coords[1];
        }
        GroupTag::Se3 => {
            let w = Vector3::new(v.coords[3], v.coords[4], v.coords[5]);
            mat.view_mut((0, 0), (3, 3)).copy_from(&so3_hat(&w));
            mat[(0, 3)] = v.coords[0];
            mat[(1, 3)] = v.coords[1];
            mat[(2, 3)] = v.coords[2];
        }
    }
    AlgebraMatrix { tag, mat }
}

/// Inverse of [`hat`]. Fails if the matrix is not in the algebra subspace.
pub fn vee(m: &AlgebraMatrix) -> Result<AlgebraVector, GroupError> {
    // Re-validate: AlgebraMatrix can be constructed long before vee is called.
    let checked = AlgebraMatrix::new(m.tag, m.mat.clone())?;
    let mat = &checked.mat;
    let coords = match m.tag {
        GroupTag::So2 => DVector::from_vec(vec![mat[(1, 0)]]),
        GroupTag::So3 => DVector::from_vec(vec![mat[(2, 1)], mat[(0, 2)], mat[(1, 0)]]),
        GroupTag::Se2 => DVector::from_vec(vec![mat[(0, 2)], mat[(1, 2)], mat[(1, 0)]]),
        GroupTag::Se3 => DVector::from_vec(vec![
            mat[(0, 3)],
            mat[(1, 3)],
            mat[(2, 3)],
            mat[(2, 1)],
            mat[(0, 2)],
            mat[(1, 0)],
        ]),
    };
    AlgebraVector::new(m.tag, coords)
}

// Series branches are used below a generous threshold (theta < 1e-3) to
// avoid the 1 - cos(theta) cancellation in the closed forms.
const SERIES_THETA2: f64 = 1e-6;

fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wh = so3_hat(w);
    let wh2 = wh * wh;
    let (a, b) = if theta2 < SERIES_THETA2 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + a * wh + b * wh2
}

/// The V-matrix coupling rotation and translation in the SE(3) exponential.
fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wh = so3_hat(w);
    let wh2 = wh * wh;
    let (b, c) = if theta2 < SERIES_THETA2 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + b * wh + c * wh2
}

fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wh = so3_hat(w);
    let wh2 = wh * wh;
    let c = if theta2 < SERIES_THETA2 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - 0.5 * wh + c * wh2
}

fn so3_log(rot: &Matrix3<f64>) -> Result<Vector3<f64>, GroupError> {
    let tr = rot.trace();
    let cos_theta = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = so3_vee(&((rot - rot.transpose()) * 0.5));
    let sin_theta = skew.norm().min(1.0);
    // atan2 keeps full precision at both small angles and near pi.
    let theta = sin_theta.atan2(cos_theta);
    if theta > std::f64::consts::PI - CUT_LOCUS_TOL {
        return Err(GroupError::CutLocus);
    }
    if tr <= -1.0 + NEAR_PI_TRACE_TOL {
        // Near pi the skew part degenerates: extract the axis from the
        // dominant column of R + I and fix its sign with the skew part.
        let b = rot + Matrix3::identity();
        let mut k = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(k, k)] {
                k = i;
            }
        }
        let col = b.column(k).clone_owned();
        let axis = col / col.norm();
        let axis = if skew.dot(&axis) < 0.0 { -axis } else { axis };
        return Ok(theta * axis);
    }
    let theta2 = theta * theta;
    if theta2 < SERIES_THETA2 {
        // theta/sin(theta) = 1 + t^2/6 + 7 t^4/360 + ...
        return Ok(skew * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0));
    }
    Ok(skew * (theta / theta.sin()))
}

/// Exponential map from vector algebra coordinates to the group.
///
/// Closed-form Rodrigues formula on the SO(3) block; the SE(n) translation is
/// coupled through the left Jacobian.
pub fn exp_map(v: &AlgebraVector) -> GroupElement {
    let tag = v.tag;
    match tag {
        GroupTag::So2 => {
            let th = v.coords[0];
            let (s, c) = th.sin_cos();
            let mat = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            GroupElement { tag, mat }
        }
        GroupTag::So3 => {
            let w = Vector3::new(v.coords[0], v.coords[1], v.coords[2]);
            let rot = so3_exp(&w);
            let mut mat = DMatrix::zeros(3, 3);
            mat.view_mut((0, 0), (3, 3)).copy_from(&rot);
            GroupElement { tag, mat }
        }
        GroupTag::Se2 => {
            // Restriction of the SE(3) formula to the plane.
            let lifted = AlgebraVector::new(
                GroupTag::Se3,
                DVector::from_vec(vec![v.coords[0], v.coords[1], 0.0, 0.0, 0.0, v.coords[2]]),
            )
            .expect("lifted twist");
            let g = exp_map(&lifted);
            let m = g.matrix();
            let mat = DMatrix::from_row_slice(
                3,
                3,
                &[
                    m[(0, 0)],
                    m[(0, 1)],
                    m[(0, 3)],
                    m[(1, 0)],
                    m[(1, 1)],
                    m[(1, 3)],
                    0.0,
                    0.0,
                    1.0,
                ],
            );
            GroupElement { tag, mat }
        }
        GroupTag::Se3 => {
            let vlin = Vector3::new(v.coords[0], v.coords[1], v.coords[2]);
            let w = Vector3::new(v.coords[3], v.coords[4], v.coords[5]);
            let rot = so3_exp(&w);
            let p = so3_left_jacobian(&w) * vlin;
            let mut mat = DMatrix::identity(4, 4);
            mat.view_mut((0, 0), (3, 3)).copy_from(&rot);
            mat[(0, 3)] = p[0];
            mat[(1, 3)] = p[1];
            mat[(2, 3)] = p[2];
            GroupElement { tag, mat }
        }
    }
}

/// Logarithm map back to vector algebra coordinates.
///
/// Errors with [`GroupError::CutLocus`] when the rotation angle is within
/// [`CUT_LOCUS_TOL`] of pi.
pub fn log_map(g: &GroupElement) -> Result<AlgebraVector, GroupError> {
    let tag = g.tag;
    match tag {
        GroupTag::So2 => {
            let th = g.mat[(1, 0)].atan2(g.mat[(0, 0)]);
            if th.abs() > std::f64::consts::PI - CUT_LOCUS_TOL {
                return Err(GroupError::CutLocus);
            }
            AlgebraVector::new(tag, DVector::from_vec(vec![th]))
        }
        GroupTag::So3 => {
            let rot = Matrix3::from_iterator(g.mat.iter().copied());
            let w = so3_log(&rot)?;
            AlgebraVector::new(tag, DVector::from_vec(vec![w[0], w[1], w[2]]))
        }
        GroupTag::Se2 => {
            let m = g.matrix();
            let lifted = DMatrix::from_row_slice(
                4,
                4,
                &[
                    m[(0, 0)],
                    m[(0, 1)],
                    0.0,
                    m[(0, 2)],
                    m[(1, 0)],
                    m[(1, 1)],
                    0.0,
                    m[(1, 2)],
                    0.0,
                    0.0,
                    1.0,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                ],
            );
            let v = log_map(&GroupElement { tag: GroupTag::Se3, mat: lifted })?;
            AlgebraVector::new(tag, DVector::from_vec(vec![v.coords[0], v.coords[1], v.coords[5]]))
        }
        GroupTag::Se3 => {
            let rot = Matrix3::from_iterator(g.mat.view((0, 0), (3, 3)).iter().copied());
            let w = so3_log(&rot)?;
            let p = Vector3::new(g.mat[(0, 3)], g.mat[(1, 3)], g.mat[(2, 3)]);
            let vlin = so3_left_jacobian_inv(&w) * p;
            AlgebraVector::new(
                tag,
                DVector::from_vec(vec![vlin[0], vlin[1], vlin[2], w[0], w[1], w[2]]),
            )
        }
    }
}

/// Left-invariant coordinate error `(q*)^{-1} q`.
pub fn group_error(q_star: &GroupElement, q: &GroupElement) -> Result<GroupElement, GroupError> {
    q_star.inverse().compose(q)
}

/// Orthogonal projector onto the algebra dual under the trace pairing.
///
/// On SE(3) it maps `[A a; b^T c]` to `[(A - A^T)/2, a; 0^T, 0]`; on SO(n) it
/// keeps the skew part.
pub fn project_dual(m: &DMatrix<f64>, tag: GroupTag) -> DMatrix<f64> {
    let n = tag.mat_dim();
    assert_eq!(m.nrows(), n, "projector input must be {n}x{n}");
    assert_eq!(m.ncols(), n);
    let r = tag.rot_dim();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..r {
        for j in 0..r {
            out[(i, j)] = 0.5 * (m[(i, j)] - m[(j, i)]);
        }
    }
    if tag.trans_dim() > 0 {
        for i in 0..r {
            out[(i, r)] = m[(i, r)];
        }
    }
    out
}

/// Momentum vector -> matrix form of the algebra dual. The rotational block
/// carries the 1/2 factor that makes the trace pairing against a twist equal
/// the vector dot product.
pub(crate) fn momentum_to_dual_matrix(p: &MomentumVector) -> DMatrix<f64> {
    let tag = p.tag;
    let n = tag.mat_dim();
    let r = tag.rot_dim();
    let t = tag.trans_dim();
    let mut out = DMatrix::zeros(n, n);
    match r {
        2 => {
            let pw = p.coords[t];
            out[(0, 1)] = -0.5 * pw;
            out[(1, 0)] = 0.5 * pw;
        }
        3 => {
            let pw = Vector3::new(p.coords[t], p.coords[t + 1], p.coords[t + 2]);
            out.view_mut((0, 0), (3, 3)).copy_from(&(0.5 * so3_hat(&pw)));
        }
        _ => unreachable!(),
    }
    for i in 0..t {
        out[(i, r)] = p.coords[i];
    }
    out
}

/// Inverse of [`momentum_to_dual_matrix`] for matrices already in the dual
/// subspace.
pub(crate) fn dual_matrix_to_momentum(tag: GroupTag, m: &DMatrix<f64>) -> MomentumVector {
    let r = tag.rot_dim();
    let t = tag.trans_dim();
    let mut coords = DVector::zeros(tag.alg_dim());
    for i in 0..t {
        coords[i] = m[(i, r)];
    }
    match r {
        2 => coords[t] = 2.0 * m[(1, 0)],
        3 => {
            coords[t] = 2.0 * m[(2, 1)];
            coords[t + 1] = 2.0 * m[(0, 2)];
            coords[t + 2] = 2.0 * m[(1, 0)];
        }
        _ => unreachable!(),
    }
    MomentumVector { tag, coords }
}

/// Coadjoint `ad*_xi(p)` in vector coordinates.
///
/// On SE(3) this is `[p_v x omega; p_omega x omega + p_v x v]`, the momentum
/// cross-coupling that appears in the Hamiltonian flow.
pub fn coad_star(xi: &AlgebraVector, p: &MomentumVector) -> Result<MomentumVector, GroupError> {
    if xi.tag != p.tag {
        return Err(GroupError::TagMismatch(xi.tag, p.tag));
    }
    let coords = match xi.tag {
        GroupTag::So2 => DVector::from_vec(vec![0.0]),
        GroupTag::So3 => {
            let w = Vector3::new(xi.coords[0], xi.coords[1], xi.coords[2]);
            let pw = Vector3::new(p.coords[0], p.coords[1], p.coords[2]);
            let out = pw.cross(&w);
            DVector::from_vec(vec![out[0], out[1], out[2]])
        }
        GroupTag::Se2 => {
            let (vx, vy, w) = (xi.coords[0], xi.coords[1], xi.coords[2]);
            let (pv1, pv2) = (p.coords[0], p.coords[1]);
            DVector::from_vec(vec![pv2 * w, -pv1 * w, pv1 * vy - pv2 * vx])
        }
        GroupTag::Se3 => {
            let v = Vector3::new(xi.coords[0], xi.coords[1], xi.coords[2]);
            let w = Vector3::new(xi.coords[3], xi.coords[4], xi.coords[5]);
            let pv = Vector3::new(p.coords[0], p.coords[1], p.coords[2]);
            let pw = Vector3::new(p.coords[3], p.coords[4], p.coords[5]);
            let a = pv.cross(&w);
            let b = pw.cross(&w) + pv.cross(&v);
            DVector::from_vec(vec![a[0], a[1], a[2], b[0], b[1], b[2]])
        }
    };
    Ok(MomentumVector { tag: xi.tag, coords })
}

/// Coadjoint through the generic construction `P_{g*}([xi^T, p])`, using the
/// matrix form of the momentum. Slower than [`coad_star`]; used to cross-check
/// the closed forms.
pub fn coad_star_generic(
    xi: &AlgebraVector,
    p: &MomentumVector,
) -> Result<MomentumVector, GroupError> {
    if xi.tag != p.tag {
        return Err(GroupError::TagMismatch(xi.tag, p.tag));
    }
    let xi_m = hat(xi).mat;
    let p_m = momentum_to_dual_matrix(p);
    let bracket = xi_m.transpose() * &p_m - &p_m * xi_m.transpose();
    let projected = project_dual(&bracket, xi.tag);
    Ok(dual_matrix_to_momentum(xi.tag, &projected))
}

/// Dual of the left translation: `T*_e L_q (eta) = P_{g*}(q^T eta)`.
///
/// `eta` is a gradient matrix with respect to the group element; the result
/// satisfies `<T*_e L_q(eta), xi> = <eta, q xi>` for every algebra `xi`.
pub fn dual_left_translate(
    q: &GroupElement,
    eta: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GroupError> {
    let n = q.tag.mat_dim();
    if eta.nrows() != n || eta.ncols() != n {
        return Err(GroupError::Shape { tag: q.tag, rows: eta.nrows(), cols: eta.ncols() });
    }
    Ok(project_dual(&(q.mat.transpose() * eta), q.tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_algebra(tag: GroupTag, rng: &mut StdRng, scale: f64) -> AlgebraVector {
        let coords =
            DVector::from_iterator(tag.alg_dim(), (0..tag.alg_dim()).map(|_| rng.gen_range(-scale..scale)));
        AlgebraVector::new(tag, coords).unwrap()
    }

    fn random_momentum(tag: GroupTag, rng: &mut StdRng, scale: f64) -> MomentumVector {
        let coords =
            DVector::from_iterator(tag.alg_dim(), (0..tag.alg_dim()).map(|_| rng.gen_range(-scale..scale)));
        MomentumVector::new(tag, coords).unwrap()
    }

    fn random_element(tag: GroupTag, rng: &mut StdRng) -> GroupElement {
        exp_map(&random_algebra(tag, rng, 1.5))
    }

    const ALL_TAGS: [GroupTag; 4] = [GroupTag::So2, GroupTag::So3, GroupTag::Se2, GroupTag::Se3];

    #[test]
    fn pairing_identity_trace() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(pairing(&i3, &i3).unwrap(), 3.0);
    }

    #[test]
    fn pairing_of_unit_hat_is_two() {
        // Expanding the skew matrix of e1 by hand: entries -1 and 1 at
        // (1,2)/(2,1), so tr(hat^T hat) = 2.
        let v = AlgebraVector::new(GroupTag::So3, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let h = hat(&v);
        assert!((pairing(&h.mat, &h.mat).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn pairing_shape_mismatch_errors() {
        let a = DMatrix::<f64>::zeros(3, 3);
        let b = DMatrix::<f64>::zeros(4, 4);
        assert!(pairing(&a, &b).is_err());
    }

    #[test]
    fn hat_matches_displayed_skew_matrix() {
        let v = AlgebraVector::new(GroupTag::So3, DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        let h = hat(&v);
        let want = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(h.mat, want);
    }

    #[test]
    fn hat_cross_product_antisymmetry() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let v = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let w = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let lhs = so3_hat(&v) * w;
            let rhs = -(so3_hat(&w) * v);
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn vee_hat_roundtrip_all_groups() {
        let mut rng = StdRng::seed_from_u64(1);
        for tag in ALL_TAGS {
            for _ in 0..100 {
                let v = random_algebra(tag, &mut rng, 3.0);
                let back = vee(&hat(&v)).unwrap();
                assert_eq!(back.coords, v.coords, "exact roundtrip on {tag:?}");
            }
        }
    }

    #[test]
    fn vee_rejects_non_algebra_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(AlgebraMatrix::new(GroupTag::So3, m).is_err());
    }

    #[test]
    fn exp_of_zero_is_identity() {
        for tag in ALL_TAGS {
            let g = exp_map(&AlgebraVector::zeros(tag));
            assert_eq!(g.matrix(), GroupElement::identity(tag).matrix());
        }
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let v = AlgebraVector::new(
            GroupTag::So3,
            DVector::from_vec(vec![0.0, 0.0, std::f64::consts::FRAC_PI_2]),
        )
        .unwrap();
        let g = exp_map(&v);
        let want = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((g.matrix() - want).norm() < 1e-15);
    }

    #[test]
    fn log_exp_roundtrip_random() {
        let mut rng = StdRng::seed_from_u64(42);
        for tag in ALL_TAGS {
            for _ in 0..1000 {
                let v = random_algebra(tag, &mut rng, 1.0);
                // Keep the rotational part within the log domain.
                let back = log_map(&exp_map(&v)).unwrap();
                assert!(
                    (&back.coords - &v.coords).norm() < 1e-10,
                    "roundtrip failed on {tag:?}: {} vs {}",
                    back.coords,
                    v.coords
                );
            }
        }
    }

    #[test]
    fn log_small_angle_matches_series() {
        // For tiny rotations log(exp(v)) ~ v with error O(theta^3); the
        // series oracle here is the first-order identity itself.
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let v = random_algebra(GroupTag::Se3, &mut rng, 1e-6);
            let back = log_map(&exp_map(&v)).unwrap();
            assert!((&back.coords - &v.coords).norm() < 1e-15);
        }
    }

    #[test]
    fn log_near_pi_uses_axis_extraction() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let theta = std::f64::consts::PI - 1e-7;
        let v = AlgebraVector::new(
            GroupTag::So3,
            DVector::from_vec(vec![axis[0] * theta, axis[1] * theta, axis[2] * theta]),
        )
        .unwrap();
        let back = log_map(&exp_map(&v)).unwrap();
        assert!((&back.coords - &v.coords).norm() < 1e-6);
    }

    #[test]
    fn log_at_cut_locus_errors() {
        let v = AlgebraVector::new(
            GroupTag::So3,
            DVector::from_vec(vec![std::f64::consts::PI, 0.0, 0.0]),
        )
        .unwrap();
        match log_map(&exp_map(&v)) {
            Err(GroupError::CutLocus) => {}
            other => panic!("expected cut-locus error, got {other:?}"),
        }
    }

    #[test]
    fn group_error_basics() {
        let mut rng = StdRng::seed_from_u64(11);
        for tag in ALL_TAGS {
            let q = random_element(tag, &mut rng);
            let e = group_error(&q, &q).unwrap();
            assert!((e.matrix() - GroupElement::identity(tag).matrix()).norm() < 1e-12);
            let id = GroupElement::identity(tag);
            let e2 = group_error(&id, &q).unwrap();
            assert!((e2.matrix() - q.matrix()).norm() < 1e-15);
        }
    }

    #[test]
    fn group_error_composes_back() {
        let mut rng = StdRng::seed_from_u64(12);
        for tag in ALL_TAGS {
            for _ in 0..20 {
                let a = random_element(tag, &mut rng);
                let b = random_element(tag, &mut rng);
                let e = group_error(&a, &b).unwrap();
                let back = a.compose(&e).unwrap();
                assert!((back.matrix() - b.matrix()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = StdRng::seed_from_u64(13);
        for tag in ALL_TAGS {
            for _ in 0..50 {
                let q = random_element(tag, &mut rng);
                let prod = q.compose(&q.inverse()).unwrap();
                assert!((prod.matrix() - GroupElement::identity(tag).matrix()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn projector_matches_hand_applied_formula() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 5.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        );
        let got = project_dual(&m, GroupTag::Se3);
        let want = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.5, 0.0, 5.0, //
                -0.5, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        );
        assert_eq!(got, want);
    }

    #[test]
    fn projector_kills_identity() {
        let got = project_dual(&DMatrix::identity(4, 4), GroupTag::Se3);
        assert_eq!(got, DMatrix::zeros(4, 4));
    }

    #[test]
    fn projector_idempotent_and_orthogonal() {
        let mut rng = StdRng::seed_from_u64(21);
        for tag in ALL_TAGS {
            let n = tag.mat_dim();
            for _ in 0..50 {
                let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
                let p1 = project_dual(&m, tag);
                let p2 = project_dual(&p1, tag);
                assert!((&p1 - &p2).norm() < 1e-14);
                // Orthogonality: the residual pairs to zero against a spanning
                // set of the dual subspace (images of hat under the momentum map).
                let resid = &m - &p1;
                for k in 0..tag.alg_dim() {
                    let mut coords = DVector::zeros(tag.alg_dim());
                    coords[k] = 1.0;
                    let basis =
                        momentum_to_dual_matrix(&MomentumVector::new(tag, coords).unwrap());
                    assert!(pairing(&resid, &basis).unwrap().abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn coad_star_of_zero_momentum() {
        let mut rng = StdRng::seed_from_u64(31);
        for tag in ALL_TAGS {
            let xi = random_algebra(tag, &mut rng, 2.0);
            let p = MomentumVector::zeros(tag);
            let out = coad_star(&xi, &p).unwrap();
            assert_eq!(out.coords.norm(), 0.0);
        }
    }

    #[test]
    fn coad_star_matches_generic_construction() {
        let mut rng = StdRng::seed_from_u64(32);
        for tag in ALL_TAGS {
            for _ in 0..200 {
                let xi = random_algebra(tag, &mut rng, 2.0);
                let p = random_momentum(tag, &mut rng, 2.0);
                let fast = coad_star(&xi, &p).unwrap();
                let slow = coad_star_generic(&xi, &p).unwrap();
                assert!(
                    (&fast.coords - &slow.coords).norm() < 1e-12,
                    "{tag:?}: {} vs {}",
                    fast.coords,
                    slow.coords
                );
            }
        }
    }

    #[test]
    fn coad_star_pairs_to_zero_against_its_twist() {
        // <xi, ad*_xi(p)> = <[xi, xi], p> = 0.
        let mut rng = StdRng::seed_from_u64(33);
        for tag in ALL_TAGS {
            for _ in 0..100 {
                let xi = random_algebra(tag, &mut rng, 2.0);
                let p = random_momentum(tag, &mut rng, 2.0);
                let out = coad_star(&xi, &p).unwrap();
                let dot = out.coords.dot(&xi.coords);
                assert!(dot.abs() < 1e-12, "{tag:?}: {dot}");
            }
        }
    }

    #[test]
    fn coad_star_duality_identity() {
        // <ad*_xi(p), psi> = <p, [xi, psi]> checked in matrix form.
        let mut rng = StdRng::seed_from_u64(34);
        for tag in ALL_TAGS {
            for _ in 0..100 {
                let xi = random_algebra(tag, &mut rng, 2.0);
                let psi = random_algebra(tag, &mut rng, 2.0);
                let p = random_momentum(tag, &mut rng, 2.0);
                let lhs = coad_star(&xi, &p).unwrap().coords.dot(&psi.coords);
                let xi_m = hat(&xi).mat;
                let psi_m = hat(&psi).mat;
                let p_m = momentum_to_dual_matrix(&p);
                let bracket = &xi_m * &psi_m - &psi_m * &xi_m;
                let rhs = pairing(&p_m, &bracket).unwrap();
                assert!((lhs - rhs).abs() < 1e-12, "{tag:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn dual_left_translate_at_identity_is_projection() {
        let mut rng = StdRng::seed_from_u64(41);
        for tag in ALL_TAGS {
            let n = tag.mat_dim();
            let eta = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let got = dual_left_translate(&GroupElement::identity(tag), &eta).unwrap();
            assert!((got - project_dual(&eta, tag)).norm() < 1e-15);
        }
    }

    #[test]
    fn dual_left_translate_duality_identity() {
        let mut rng = StdRng::seed_from_u64(42);
        for tag in ALL_TAGS {
            let n = tag.mat_dim();
            for _ in 0..200 {
                let q = random_element(tag, &mut rng);
                let eta = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                let xi = random_algebra(tag, &mut rng, 2.0);
                let xi_m = hat(&xi).mat;
                let lhs = pairing(&dual_left_translate(&q, &eta).unwrap(), &xi_m).unwrap();
                let rhs = pairing(&eta, &(q.matrix() * &xi_m)).unwrap();
                assert!((lhs - rhs).abs() < 1e-12, "{tag:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn dual_left_translate_translation_only_gradient() {
        // eta with zero rotational block: rotational output is zero and the
        // translational block is R^T eta_p.
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..20 {
            let q = random_element(GroupTag::Se3, &mut rng);
            let mut eta = DMatrix::zeros(4, 4);
            let ep = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            eta[(0, 3)] = ep[0];
            eta[(1, 3)] = ep[1];
            eta[(2, 3)] = ep[2];
            let out = dual_left_translate(&q, &eta).unwrap();
            assert!(out.view((0, 0), (3, 3)).norm() < 1e-14);
            let want = q.rotation().transpose() * ep;
            for i in 0..3 {
                assert!((out[(i, 3)] - want[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn element_validation_rejects_bad_rotation() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 0)] = 1.0 + 1e-6;
        assert!(GroupElement::from_matrix(GroupTag::So3, m).is_err());
    }

    #[test]
    fn element_validation_rejects_bad_bottom_row() {
        let mut m = DMatrix::identity(4, 4);
        m[(3, 0)] = 1e-12;
        assert!(GroupElement::from_matrix(GroupTag::Se3, m).is_err());
    }

    #[test]
    fn coords_roundtrip() {
        let mut rng = StdRng::seed_from_u64(51);
        for tag in ALL_TAGS {
            let q = random_element(tag, &mut rng);
            let c = q.coords();
            let back = GroupElement::from_coords(tag, c.as_slice()).unwrap();
            assert!((back.matrix() - q.matrix()).norm() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn prop_pairing_symmetric(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-5.0..5.0));
            let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-5.0..5.0));
            let ab = pairing(&a, &b).unwrap();
            let ba = pairing(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12 * (1.0 + ab.abs()));
        }

        #[test]
        fn prop_exp_log_inverse_on_domain(seed in 0u64..300) {
            let mut rng = StdRng::seed_from_u64(seed);
            // ||omega|| kept below pi - 1e-6.
            let w_norm = rng.gen_range(0.0..std::f64::consts::PI - 1e-3);
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let dir = if dir.norm() < 1e-6 { Vector3::x() } else { dir.normalize() };
            let w = dir * w_norm;
            let v = AlgebraVector::new(
                GroupTag::Se3,
                DVector::from_vec(vec![
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    w[0], w[1], w[2],
                ]),
            ).unwrap();
            let back = log_map(&exp_map(&v)).unwrap();
            prop_assert!((&back.coords - &v.coords).norm() < 1e-8);
        }
    }
}
