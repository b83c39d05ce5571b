//! Rigid-body math, neighbor graphs and pose/shape metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Tolerance for `R^T R = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud has no valid points")]
    EmptyCloud,
    #[error("cannot orthonormalize degenerate vectors v1={v1:?} v2={v2:?}")]
    Degenerate { v1: Vec3, v2: Vec3 },
    #[error("k={k} must be smaller than the number of valid points ({valid})")]
    KnnTooLarge { k: usize, valid: usize },
    #[error("metric needs at least one sample")]
    NoSamples,
    #[error("valid count {valid} exceeds {rows} rows")]
    BadValidCount { valid: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn trace(m: &Mat3) -> f64 {
    m[0][0] + m[1][1] + m[2][2]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (a[i][j] - b[i][j]).abs())
        .fold(0.0, f64::max)
}

/// Whether `m` is a proper rotation within `tol`.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let mtm = mat_mul(&transpose(m), m);
    max_abs_diff(&mtm, &IDENTITY) <= tol && (det(m) - 1.0).abs() <= tol
}

pub fn rot_x(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// N x 3 points; rows past `valid` are padding that duplicates real points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    valid: usize,
}

impl PointCloud {
    /// A cloud whose rows are all valid.
    pub fn new(points: Vec<Vec3>) -> Self {
        let valid = points.len();
        Self { points, valid }
    }

    pub fn with_valid(points: Vec<Vec3>, valid: usize) -> Result<Self> {
        if valid > points.len() {
            return Err(GeometryError::BadValidCount {
                valid,
                rows: points.len(),
            });
        }
        Ok(Self { points, valid })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The non-padded rows.
    pub fn valid_points(&self) -> &[Vec3] {
        &self.points[..self.valid]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid
    }

    pub fn centroid(&self) -> Result<Vec3> {
        if self.valid == 0 {
            return Err(GeometryError::EmptyCloud);
        }
        let sum = self.valid_points().iter().fold([0.0; 3], |acc, &p| add(acc, p));
        Ok(scale(sum, 1.0 / self.valid as f64))
    }

    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            valid: self.valid,
        }
    }

    pub fn translate(&self, t: Vec3) -> Self {
        self.map(|p| add(p, t))
    }

    pub fn rotate(&self, r: &Mat3) -> Self {
        self.map(|p| mat_vec(r, p))
    }

    /// Keep the rows at `indices` (all treated as valid).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Rotation followed by translation: `p -> R p + T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(IDENTITY, [0.0; 3])
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self::new(rotation, [0.0; 3])
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(IDENTITY, translation)
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation, ROTATION_TOL) && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply_point(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        RigidTransform {
            rotation: rt,
            translation: scale(mat_vec(&rt, self.translation), -1.0),
        }
    }
}

/// Rotations that leave an object's appearance unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryGroup {
    /// Full rotational symmetry about the canonical Z axis.
    pub continuous_z: bool,
    /// Always contains the identity.
    pub finite: Vec<Mat3>,
}

impl Default for SymmetryGroup {
    fn default() -> Self {
        Self::trivial()
    }
}

impl SymmetryGroup {
    pub fn trivial() -> Self {
        Self {
            continuous_z: false,
            finite: vec![IDENTITY],
        }
    }

    pub fn continuous_z() -> Self {
        Self {
            continuous_z: true,
            finite: vec![IDENTITY],
        }
    }

    /// Closure of `generators` under composition. Elements are
    /// deduplicated within `1e-9`.
    pub fn generated(continuous_z: bool, generators: &[Mat3]) -> Self {
        let mut elems = vec![IDENTITY];
        let contains = |set: &[Mat3], m: &Mat3| set.iter().any(|e| max_abs_diff(e, m) <= 1e-9);
        for g in generators {
            if !contains(&elems, g) {
                elems.push(*g);
            }
        }
        loop {
            let mut added = false;
            let snapshot = elems.clone();
            for a in &snapshot {
                for b in &snapshot {
                    let ab = mat_mul(a, b);
                    if !contains(&elems, &ab) {
                        elems.push(ab);
                        added = true;
                    }
                }
            }
            // A finite rotation group in 3D with these generators stays small;
            // the cap only guards against generators that are not of finite order.
            if !added || elems.len() > 120 {
                break;
            }
        }
        Self {
            continuous_z,
            finite: elems,
        }
    }

    /// Every finite element is a rotation, the identity is present, and the
    /// finite set is closed under composition.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !self.finite.iter().any(|e| max_abs_diff(e, &IDENTITY) <= 1e-9) {
            return Err("identity missing from finite elements".into());
        }
        for (i, e) in self.finite.iter().enumerate() {
            if !is_rotation(e, 1e-9) {
                return Err(format!("finite element {i} is not a proper rotation"));
            }
        }
        for a in &self.finite {
            for b in &self.finite {
                let ab = mat_mul(a, b);
                if !self.finite.iter().any(|e| max_abs_diff(e, &ab) <= 1e-9) {
                    return Err("finite elements are not closed under composition".into());
                }
            }
        }
        Ok(())
    }
}

/// Translate a cloud so its valid-point centroid is the origin.
pub fn center(cloud: &PointCloud) -> Result<(PointCloud, Vec3)> {
    let c = cloud.centroid()?;
    Ok((cloud.translate(scale(c, -1.0)), c))
}

pub fn apply(transform: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    cloud.map(|p| transform.apply_point(p))
}

/// Uniform rotation from three uniforms via a unit quaternion (Shoemake).
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = [a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()];
    quat_to_mat(q)
}

pub fn random_rotation(seed: u64) -> Mat3 {
    random_rotation_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Unit quaternion (w, x, y, z) to rotation matrix.
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Angle of `ra * rb^T`, in `[0, pi]`.
pub fn geodesic(ra: &Mat3, rb: &Mat3) -> f64 {
    let tr = trace(&mat_mul(ra, &transpose(rb)));
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Gram-Schmidt on two vectors; columns of the result are
/// `(e1, e2, e1 x e2)`.
pub fn orthonormalize(v1: Vec3, v2: Vec3) -> Result<Mat3> {
    let n1 = norm(v1);
    let degenerate = GeometryError::Degenerate { v1, v2 };
    if !(n1 > 0.0) {
        return Err(degenerate);
    }
    let e1 = scale(v1, 1.0 / n1);
    let n2 = norm(v2);
    let perp = sub(v2, scale(e1, dot(v2, e1)));
    let np = norm(perp);
    // sin of the angle between v1 and v2
    if !(n2 > 0.0) || np / n2 <= 1e-6 {
        return Err(degenerate);
    }
    let e2 = scale(perp, 1.0 / np);
    let e3 = cross(e1, e2);
    Ok([
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ])
}

/// Row-major `valid x k` neighbor table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl KnnTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..][..self.k]
    }

    /// The table restricted to the first `k` neighbors of every row.
    pub fn truncated(&self, k: usize) -> KnnTable {
        assert!(k <= self.k);
        let indices = (0..self.rows()).flat_map(|i| self.row(i)[..k].iter().copied()).collect();
        KnnTable { k, indices }
    }
}

/// For every valid point, its `k` nearest other valid points ordered by
/// distance, ties broken by lower index.
pub fn knn_indices(cloud: &PointCloud, k: usize) -> Result<KnnTable> {
    let pts = cloud.valid_points();
    let n = pts.len();
    if k >= n {
        return Err(GeometryError::KnnTooLarge { k, valid: n });
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (i, &p) in pts.iter().enumerate() {
        cand.clear();
        cand.extend(pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &q)| (dist2(p, q), j)));
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        indices.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(KnnTable { k, indices })
}

/// Static 3-d tree for exact nearest-neighbor queries.
struct KdTree {
    points: Vec<Vec3>,
    // implicit balanced tree over `order`; node = slice midpoint
    order: Vec<usize>,
}

impl KdTree {
    fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    fn build(points: &[Vec3], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let (lo, hi) = idx.split_at_mut(mid);
        Self::build(points, lo, depth + 1);
        Self::build(points, &mut hi[1..], depth + 1);
    }

    fn nearest_dist2(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, q, &mut best);
        best
    }

    fn search(&self, idx: &[usize], depth: usize, q: Vec3, best: &mut f64) {
        if idx.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let p = self.points[idx[mid]];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (&idx[..mid], &idx[mid + 1..])
        } else {
            (&idx[mid + 1..], &idx[..mid])
        };
        self.search(near, depth + 1, q, best);
        if delta * delta < *best {
            self.search(far, depth + 1, q, best);
        }
    }
}

fn one_sided_chamfer(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = KdTree::new(to);
    from.iter().map(|&p| tree.nearest_dist2(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance with squared Euclidean terms, over valid
/// points.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    let (a, b) = (p.valid_points(), q.valid_points());
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    Ok(one_sided_chamfer(a, b) + one_sided_chamfer(b, a))
}

/// Mean of the per-object Chamfer distances of an assembled pair.
pub fn pair_chamfer(
    pred_a: &PointCloud,
    gt_a: &PointCloud,
    pred_b: &PointCloud,
    gt_b: &PointCloud,
) -> Result<f64> {
    Ok(0.5 * (chamfer(pred_b, gt_b)? + chamfer(pred_a, gt_a)?))
}

/// The z-rotation angle maximizing `tr(Rz(theta) A)`.
fn best_z_angle(a: &Mat3) -> f64 {
    (a[0][1] - a[1][0]).atan2(a[0][0] + a[1][1])
}

/// Smallest geodesic error between `r_pred` and any symmetry-equivalent
/// `S * r_gt`, together with the minimizing ground truth.
pub fn sym_reduced_error(r_pred: &Mat3, r_gt: &Mat3, sym: &SymmetryGroup) -> (f64, Mat3) {
    let mut best = (geodesic(r_pred, r_gt), *r_gt);
    for s in &sym.finite {
        let mut cand = mat_mul(s, r_gt);
        if sym.continuous_z {
            let a = mat_mul(&cand, &transpose(r_pred));
            cand = mat_mul(&rot_z(best_z_angle(&a)), &cand);
        }
        let err = geodesic(r_pred, &cand);
        if err < best.0 {
            best = (err, cand);
        }
    }
    best
}

/// Intrinsic XYZ Euler angles `(a, b, c)` with `R = Rx(a) Ry(b) Rz(c)`,
/// each in `(-pi, pi]`.
pub fn euler_xyz(r: &Mat3) -> Vec3 {
    let sb = r[0][2].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[1][2]).atan2(r[2][2]);
        let c = (-r[0][1]).atan2(r[0][0]);
        [wrap_angle(a), b, wrap_angle(c)]
    } else {
        // gimbal lock: fold everything into the first angle
        let a = r[2][1].atan2(r[1][1]);
        [wrap_angle(a), b, 0.0]
    }
}

/// Wrap into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a % TAU;
    if w <= -PI {
        w += TAU;
    } else if w > PI {
        w -= TAU;
    }
    w
}

/// Per-object pose error after symmetry reduction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation: Vec3,
    /// Euler angles of `R_pred * R_gt_best^T`, degrees.
    pub euler_deg: Vec3,
    /// Symmetry-reduced geodesic error, radians.
    pub geodesic: f64,
}

/// Symmetry acts on the rotation only; translations are compared directly.
pub fn pose_error(pred: &RigidTransform, gt: &RigidTransform, sym: &SymmetryGroup) -> PoseError {
    let (geo, gt_best) = sym_reduced_error(&pred.rotation, &gt.rotation, sym);
    let residual = mat_mul(&pred.rotation, &transpose(&gt_best));
    let e = euler_xyz(&residual);
    PoseError {
        translation: sub(pred.translation, gt.translation),
        euler_deg: e.map(f64::to_degrees),
        geodesic: geo,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub rmse_t: f64,
    pub rmse_r_deg: f64,
}

/// Component-mean RMSE over translation components and Euler angles.
pub fn rmse_of(errors: &[PoseError]) -> Result<PoseMetrics> {
    if errors.is_empty() {
        return Err(GeometryError::NoSamples);
    }
    let n = (3 * errors.len()) as f64;
    let st: f64 = errors.iter().flat_map(|e| e.translation).map(|v| v * v).sum();
    let sr: f64 = errors.iter().flat_map(|e| e.euler_deg).map(|v| v * v).sum();
    Ok(PoseMetrics {
        rmse_t: (st / n).sqrt(),
        rmse_r_deg: (sr / n).sqrt(),
    })
}

pub fn pose_metrics(samples: &[(RigidTransform, RigidTransform, SymmetryGroup)]) -> Result<PoseMetrics> {
    let errors: Vec<PoseError> = samples.iter().map(|(p, g, s)| pose_error(p, g, s)).collect();
    rmse_of(&errors)
}

/// `pose_b^-1 ∘ pose_a`: A's placement expressed in B's body frame.
pub fn relative_pose(pose_a: &RigidTransform, pose_b: &RigidTransform) -> RigidTransform {
    pose_b.inverse().compose(pose_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use std::f64::consts::PI;

    fn rand_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
    }

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn center_examples() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let (out, x) = center(&c).unwrap();
        assert_eq!(x, [0.0; 3]);
        assert_eq!(out, c);
        let (out, x) = center(&PointCloud::new(vec![[2.0, 2.0, 2.0]])).unwrap();
        assert_eq!(x, [2.0; 3]);
        assert_eq!(out.points()[0], [0.0; 3]);
        assert_eq!(center(&PointCloud::new(vec![])), Err(GeometryError::EmptyCloud));
    }

    #[test]
    fn center_ignores_padding() {
        let c = PointCloud::with_valid(vec![[1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(c.centroid().unwrap(), [2.0, 0.0, 0.0]);
    }

    #[test]
    fn center_commutes_with_translation() {
        let p = rand_cloud(40, 1);
        let t = [0.3, -2.0, 5.5];
        let (_, c0) = center(&p).unwrap();
        let (centered, c1) = center(&p.translate(t)).unwrap();
        assert!(close(c1, add(c0, t), 1e-12));
        assert!(norm(centered.centroid().unwrap()) < 1e-12);
    }

    #[test]
    fn apply_examples() {
        let p = rand_cloud(10, 2);
        assert_eq!(apply(&RigidTransform::identity(), &p), p);
        let q = apply(&RigidTransform::from_rotation(rot_z(PI / 2.0)), &PointCloud::new(vec![[1.0, 0.0, 0.0]]));
        assert!(close(q.points()[0], [0.0, 1.0, 0.0], 1e-15));
        let t1 = RigidTransform::new(random_rotation(1), [1.0, 2.0, 3.0]);
        let t2 = RigidTransform::new(random_rotation(2), [-1.0, 0.5, 0.0]);
        let lhs = apply(&t2, &apply(&t1, &p));
        let rhs = apply(&t2.compose(&t1), &p);
        for (a, b) in lhs.points().iter().zip(rhs.points()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn random_rotation_is_valid_and_deterministic() {
        for seed in 0..50 {
            let r = random_rotation(seed);
            assert!(is_rotation(&r, 1e-12));
        }
        assert_eq!(random_rotation(9), random_rotation(9));
        assert_ne!(random_rotation(9), random_rotation(10));
    }

    #[test]
    fn geodesic_examples() {
        let r = random_rotation(3);
        assert!(geodesic(&r, &r) < 1e-7);
        assert!((geodesic(&IDENTITY, &rot_z(PI)) - PI).abs() < 1e-12);
        for i in -179..=180 {
            let th = i as f64 * PI / 180.0;
            assert!((geodesic(&IDENTITY, &rot_z(th)) - th.abs()).abs() < 1e-7, "{th}");
        }
    }

    #[test]
    fn orthonormalize_examples() {
        let m = orthonormalize([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m, IDENTITY);
        let m = orthonormalize([2.0, 0.0, 0.0], [0.0, 0.0, 3.0]).unwrap();
        // columns x, z, -y
        assert_eq!(m, [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            orthonormalize([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]),
            Err(GeometryError::Degenerate { .. })
        ));
        assert!(orthonormalize([0.0; 3], [0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn orthonormalize_is_equivariant() {
        let r0 = random_rotation(5);
        let (v1, v2) = ([0.3, -1.0, 2.0], [1.5, 0.2, -0.7]);
        let lhs = orthonormalize(mat_vec(&r0, v1), mat_vec(&r0, v2)).unwrap();
        let rhs = mat_mul(&r0, &orthonormalize(v1, v2).unwrap());
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn knn_examples() {
        let line = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let t = knn_indices(&line, 1).unwrap();
        assert_eq!(t.row(1), &[0]);
        let square = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let t = knn_indices(&square, 2).unwrap();
        assert_eq!(t.row(0), &[1, 3]);
        assert_eq!(t.row(1), &[0, 2]);
        assert_eq!(t.row(2), &[1, 3]);
        assert_eq!(t.row(3), &[0, 2]);
        assert_eq!(knn_indices(&square, 4), Err(GeometryError::KnnTooLarge { k: 4, valid: 4 }));
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let p = rand_cloud(50, 4);
        for k in [1, 5, 10] {
            let t = knn_indices(&p, k).unwrap();
            for i in 0..50 {
                let mut all: Vec<(f64, usize)> =
                    (0..50).filter(|&j| j != i).map(|j| (dist2(p.points()[i], p.points()[j]), j)).collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let expect: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
                assert_eq!(t.row(i), expect.as_slice());
            }
        }
    }

    #[test]
    fn knn_only_uses_valid_points() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let c = PointCloud::with_valid(pts, 3).unwrap();
        let t = knn_indices(&c, 1).unwrap();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.row(0), &[1]);
    }

    #[test]
    fn knn_is_permutation_consistent() {
        let p = rand_cloud(30, 8);
        let perm: Vec<usize> = (0..30).rev().collect();
        let q = p.select(&perm);
        let tp = knn_indices(&p, 4).unwrap();
        let tq = knn_indices(&q, 4).unwrap();
        // q[i] = p[perm[i]]; neighbor j of q[i] is q-index of p-neighbor
        let mut inv = vec![0; 30];
        for (i, &pi) in perm.iter().enumerate() {
            inv[pi] = i;
        }
        for i in 0..30 {
            let expect: Vec<usize> = tp.row(perm[i]).iter().map(|&j| inv[j]).collect();
            assert_eq!(tq.row(i), expect.as_slice());
        }
    }

    #[test]
    fn chamfer_examples() {
        let p = rand_cloud(20, 5);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        let a = PointCloud::new(vec![[0.0; 3]]);
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        let q = rand_cloud(33, 6);
        assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
        assert_eq!(chamfer(&p, &PointCloud::new(vec![])), Err(GeometryError::EmptyCloud));
        assert_eq!(pair_chamfer(&p, &p, &q, &q).unwrap(), 0.0);
        assert_eq!(pair_chamfer(&p, &p, &a, &b).unwrap(), 1.0);
    }

    #[test]
    fn chamfer_is_rigid_invariant() {
        let p = rand_cloud(60, 9);
        let q = rand_cloud(45, 10);
        let t = RigidTransform::new(random_rotation(11), [3.0, -1.0, 0.25]);
        let d0 = chamfer(&p, &q).unwrap();
        let d1 = chamfer(&apply(&t, &p), &apply(&t, &q)).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn sym_reduction_examples() {
        let g = random_rotation(12);
        assert!(sym_reduced_error(&g, &g, &SymmetryGroup::trivial()).0 < 1e-7);
        for phi in [0.3, -2.0, 3.0] {
            let pred = mat_mul(&rot_z(phi), &g);
            let (e, best) = sym_reduced_error(&pred, &g, &SymmetryGroup::continuous_z());
            assert!(e < 1e-6, "{e}");
            assert!(max_abs_diff(&best, &pred) < 1e-9);
        }
    }

    #[test]
    fn sym_reduction_never_exceeds_plain_geodesic() {
        let groups = [
            SymmetryGroup::continuous_z(),
            SymmetryGroup::generated(false, &[rot_z(PI / 2.0)]),
            SymmetryGroup::generated(true, &[rot_x(PI)]),
        ];
        for seed in 0..40 {
            let (p, g) = (random_rotation(seed), random_rotation(seed + 1000));
            for s in &groups {
                assert!(sym_reduced_error(&p, &g, s).0 <= geodesic(&p, &g) + 1e-12);
            }
        }
    }

    #[test]
    fn generated_groups() {
        let four = SymmetryGroup::generated(false, &[rot_z(PI / 2.0)]);
        assert_eq!(four.finite.len(), 4);
        four.check().unwrap();
        let d4 = SymmetryGroup::generated(false, &[rot_z(PI / 2.0), rot_x(PI)]);
        assert_eq!(d4.finite.len(), 8);
        d4.check().unwrap();
        let broken = SymmetryGroup {
            continuous_z: false,
            finite: vec![IDENTITY, rot_z(PI / 2.0)],
        };
        assert!(broken.check().is_err());
    }

    #[test]
    fn euler_roundtrip() {
        let (a, b, c) = (0.3, -0.7, 2.5);
        let r = mat_mul(&mat_mul(&rot_x(a), &rot_y(b)), &rot_z(c));
        let e = euler_xyz(&r);
        assert!(close(e, [a, b, c], 1e-12));
    }

    #[test]
    fn pose_metrics_examples() {
        let g = RigidTransform::new(random_rotation(20), [1.0, 2.0, 3.0]);
        let zero = pose_metrics(&[(g, g, SymmetryGroup::trivial())]).unwrap();
        assert!(zero.rmse_t == 0.0 && zero.rmse_r_deg < 1e-9);
        let shifted = RigidTransform::new(g.rotation, add(g.translation, [0.1, 0.0, 0.0]));
        let m = pose_metrics(&[(shifted, g, SymmetryGroup::trivial())]).unwrap();
        assert!((m.rmse_t - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        let rotated = RigidTransform::new(mat_mul(&rot_z(30f64.to_radians()), &g.rotation), g.translation);
        let m = pose_metrics(&[(rotated, g, SymmetryGroup::trivial())]).unwrap();
        assert!((m.rmse_r_deg - 30.0 / 3f64.sqrt()).abs() < 1e-9);
        assert_eq!(pose_metrics(&[]), Err(GeometryError::NoSamples));
    }

    #[test]
    fn relative_pose_examples() {
        let a = RigidTransform::new(random_rotation(30), [0.5, 0.0, 1.0]);
        let id = relative_pose(&a, &a);
        assert!(max_abs_diff(&id.rotation, &IDENTITY) < 1e-12 && norm(id.translation) < 1e-12);
        assert_eq!(relative_pose(&a, &RigidTransform::identity()), a);
    }

    proptest! {
        #[test]
        fn geodesic_is_a_metric(s1 in 0u64..10_000, s2 in 0u64..10_000, s3 in 0u64..10_000) {
            let (a, b, c) = (random_rotation(s1), random_rotation(s2), random_rotation(s3));
            let ab = geodesic(&a, &b);
            prop_assert!(ab >= 0.0 && ab <= PI);
            prop_assert!((ab - geodesic(&b, &a)).abs() <= 1e-7);
            prop_assert!(ab <= geodesic(&a, &c) + geodesic(&c, &b) + 1e-7);
        }

        #[test]
        fn inverse_composes_to_identity(seed in 0u64..10_000, t in proptest::array::uniform3(-5.0f64..5.0)) {
            let g = RigidTransform::new(random_rotation(seed), t);
            let id = g.compose(&g.inverse());
            prop_assert!(max_abs_diff(&id.rotation, &IDENTITY) < 1e-12);
            prop_assert!(norm(id.translation) < 1e-12);
        }
    }
}
