//! Assembly pairs on disk, surface sampling, canonicalization, augmentation,
//! and a procedural generator for lid-covering and peg-insertion pairs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, is_rotation, rot_x, rot_y, rot_z, GeometryError, Mat3, PointCloud, RigidTransform, SymmetryGroup, Vec3,
};

/// Rows per stored cloud.
pub const CLOUD_POINTS: usize = 1024;
pub const GLOBAL_SCALE: f64 = 3.0;
/// Base-center band, as a fraction of the vertical extent above the lowest point.
pub const BASE_BAND: f64 = 0.02;
/// Tolerance for the rest-plane and base-center checks of a canonical cloud.
pub const CANONICAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Annotation { path: String, msg: String },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some((i, t)) = triangles.iter().enumerate().find(|(_, t)| t.iter().any(|&v| v >= vertices.len())) {
            return Err(DataError::Contract(format!(
                "triangle {i} {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        let mesh = Self { vertices, triangles };
        if let Some(i) = (0..mesh.triangles.len()).find(|&i| !mesh.triangle_area(i).is_finite()) {
            return Err(DataError::Contract(format!("triangle {i} has non-finite area")));
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn corners(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.corners(i);
        0.5 * geometry::norm(geometry::cross(geometry::sub(b, a), geometry::sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    /// Concatenate meshes, reindexing triangles.
    pub fn merge(parts: &[TriMesh]) -> TriMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for p in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&p.vertices);
            triangles.extend(p.triangles.iter().map(|t| t.map(|v| v + base)));
        }
        TriMesh { vertices, triangles }
    }

    /// Parse an OFF file. Faces with more than three vertices are fanned.
    pub fn parse_off(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let bad = |line: usize, msg: String| DataError::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let (line, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let mut counts_line = None;
        if header == "OFF" {
        } else if let Some(rest) = header.strip_prefix("OFF") {
            counts_line = Some((line, rest.trim()));
        } else {
            return Err(bad(line, format!("expected `OFF` header, found `{header}`")));
        }
        let (line, counts) = match counts_line {
            Some(c) => c,
            None => lines.next().ok_or_else(|| bad(line, "missing counts line".into()))?,
        };
        let nums: Vec<usize> = counts
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(line, format!("bad counts `{counts}`: {e}")))?;
        if nums.len() < 2 {
            return Err(bad(line, format!("bad counts `{counts}`")));
        }
        let (nv, nf) = (nums[0], nums[1]);
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (line, l) = lines.next().ok_or_else(|| bad(line, "unexpected end of vertex list".into()))?;
            let v: Vec<f64> = l
                .split_whitespace()
                .take(3)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(line, format!("bad vertex `{l}`: {e}")))?;
            if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
                return Err(bad(line, format!("bad vertex `{l}`")));
            }
            vertices.push([v[0], v[1], v[2]]);
        }
        let mut triangles = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (line, l) = lines.next().ok_or_else(|| bad(line, "unexpected end of face list".into()))?;
            let f: Vec<usize> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(line, format!("bad face `{l}`: {e}")))?;
            let n = *f.first().ok_or_else(|| bad(line, "empty face".into()))?;
            if n < 3 || f.len() < n + 1 {
                return Err(bad(line, format!("bad face `{l}`")));
            }
            let idx = &f[1..=n];
            if let Some(&v) = idx.iter().find(|&&v| v >= nv) {
                return Err(bad(line, format!("vertex index {v} out of range ({nv} vertices)")));
            }
            for j in 1..n - 1 {
                triangles.push([idx[0], idx[j], idx[j + 1]]);
            }
        }
        TriMesh::new(vertices, triangles)
    }
}

fn sample_triangle<R: Rng + ?Sized>(corners: [Vec3; 3], rng: &mut R) -> Vec3 {
    let (u, v): (f64, f64) = (rng.gen(), rng.gen());
    let s = u.sqrt();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - v), s * v);
    std::array::from_fn(|d| wa * corners[0][d] + wb * corners[1][d] + wc * corners[2][d])
}

/// Result of blue-noise sampling: the points and the final minimum spacing.
#[derive(Clone, Debug)]
pub struct BlueNoise {
    pub cloud: PointCloud,
    pub radius: f64,
}

/// Dart throwing over a pool of area-weighted candidates, accepted through
/// a hash grid. The radius starts at `sqrt(area / target)` and shrinks by
/// 0.9 until at least `target` darts stick; the accepted set is then
/// subsampled uniformly to exactly `target` points.
pub fn poisson_disk_sample(mesh: &TriMesh, target: usize, seed: u64) -> Result<BlueNoise> {
    let area = mesh.area();
    if target == 0 {
        return Err(DataError::Contract("sample target must be positive".into()));
    }
    if !(area > 0.0) {
        return Err(DataError::Contract(format!("degenerate mesh (area {area})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for i in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(i);
        cumulative.push(acc);
    }
    let pool: Vec<Vec3> = (0..20 * target)
        .map(|_| {
            let x = rng.gen::<f64>() * acc;
            let t = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
            sample_triangle(mesh.corners(t), &mut rng)
        })
        .collect();

    let mut r = (area / target as f64).sqrt();
    loop {
        let accepted = throw_darts(&pool, r);
        if accepted.len() >= target {
            let mut keep = sample_indices(&mut rng, accepted.len(), target).into_vec();
            keep.sort_unstable();
            let points = keep.into_iter().map(|i| accepted[i]).collect();
            return Ok(BlueNoise {
                cloud: PointCloud::new(points),
                radius: r,
            });
        }
        r *= 0.9;
    }
}

fn throw_darts(pool: &[Vec3], r: f64) -> Vec<Vec3> {
    let cell = |p: Vec3| p.map(|x| (x / r).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut accepted: Vec<Vec3> = Vec::new();
    let r2 = r * r;
    for &p in pool {
        let c = cell(p);
        let mut clear = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids.iter().any(|&j| geometry::dist2(accepted[j], p) < r2) {
                            clear = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if clear {
            grid.entry(c).or_default().push(accepted.len());
            accepted.push(p);
        }
    }
    accepted
}

/// Fill rows `M..target` by cycling the `M` real points.
pub fn pad_cloud(points: &[Vec3], target: usize) -> Result<PointCloud> {
    let m = points.len();
    if m == 0 || m > target {
        return Err(DataError::Contract(format!("cannot pad {m} points to {target}")));
    }
    let rows = (0..target).map(|i| points[i % m]).collect();
    Ok(PointCloud::with_valid(rows, m)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestPlane {
    Xy,
    Xz,
}

impl RestPlane {
    pub fn gravity_axis(self) -> usize {
        match self {
            RestPlane::Xy => 2,
            RestPlane::Xz => 1,
        }
    }
}

/// Lowest valid coordinate along gravity and the horizontal base center.
pub fn rest_state(cloud: &PointCloud, plane: RestPlane) -> Result<(f64, Vec3)> {
    let pts = cloud.valid_points();
    if pts.is_empty() {
        return Err(GeometryError::EmptyCloud.into());
    }
    let g = plane.gravity_axis();
    let lo = pts.iter().map(|p| p[g]).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p[g]).fold(f64::NEG_INFINITY, f64::max);
    let band = lo + BASE_BAND * (hi - lo);
    let base: Vec<&Vec3> = pts.iter().filter(|p| p[g] <= band).collect();
    let mut c = [0.0; 3];
    for p in &base {
        c = geometry::add(c, **p);
    }
    c = geometry::scale(c, 1.0 / base.len() as f64);
    c[g] = 0.0;
    Ok((lo, c))
}

/// Translate so the cloud rests on the plane with its base center on the
/// vertical axis. Returns the moved cloud and the translation applied.
pub fn canonicalize(cloud: &PointCloud, plane: RestPlane) -> Result<(PointCloud, RigidTransform)> {
    let (lo, base) = rest_state(cloud, plane)?;
    let mut t = geometry::scale(base, -1.0);
    t[plane.gravity_axis()] = -lo;
    let tf = RigidTransform::from_translation(t);
    Ok((geometry::apply(&tf, cloud), tf))
}

/// Symmetry annotation as stored next to each cloud.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymmetryAnnotation {
    /// Continuous rotational symmetry axes.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rotational_axes: Vec<String>,
    /// Mirror symmetries, realized as half turns about the axis.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mirror_axes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finite_rotational: Option<FiniteRotation>,
    /// Extra group generators given as 3x3 row-major matrices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elements: Option<Vec<Mat3>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteRotation {
    pub axis: String,
    pub order: u32,
}

fn axis_rotation(axis: &str, angle: f64) -> std::result::Result<Mat3, String> {
    match axis {
        "x" => Ok(rot_x(angle)),
        "y" => Ok(rot_y(angle)),
        "z" => Ok(rot_z(angle)),
        other => Err(format!("unknown axis `{other}`")),
    }
}

impl SymmetryAnnotation {
    pub fn continuous_z() -> Self {
        Self {
            rotational_axes: vec!["z".into()],
            ..Self::default()
        }
    }

    pub fn cyclic_z(order: u32) -> Self {
        Self {
            finite_rotational: Some(FiniteRotation {
                axis: "z".into(),
                order,
            }),
            ..Self::default()
        }
    }

    pub fn group(&self) -> std::result::Result<SymmetryGroup, String> {
        let mut continuous = false;
        for a in &self.rotational_axes {
            match a.as_str() {
                "z" => continuous = true,
                "x" | "y" => return Err(format!("continuous symmetry about `{a}` is not supported (only z)")),
                other => return Err(format!("unknown axis `{other}`")),
            }
        }
        let mut gens = Vec::new();
        for a in &self.mirror_axes {
            gens.push(axis_rotation(a, std::f64::consts::PI)?);
        }
        if let Some(f) = &self.finite_rotational {
            if f.order == 0 {
                return Err("finite_rotational order must be positive".into());
            }
            gens.push(axis_rotation(&f.axis, 2.0 * std::f64::consts::PI / f.order as f64)?);
        }
        for (i, m) in self.elements.iter().flatten().enumerate() {
            if geometry::det(m) < 0.0 {
                return Err(format!("element {i} is improper (det < 0)"));
            }
            if !is_rotation(m, 1e-9) {
                return Err(format!("element {i} is not a rotation"));
            }
            gens.push(*m);
        }
        let group = SymmetryGroup::generated(continuous, &gens);
        group.check()?;
        Ok(group)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyPair {
    pub id: String,
    pub task: String,
    /// Fitting object, canonical pose.
    pub cloud_a: PointCloud,
    /// Receiving object, canonical pose.
    pub cloud_b: PointCloud,
    pub ann_a: SymmetryAnnotation,
    pub ann_b: SymmetryAnnotation,
    pub sym_a: SymmetryGroup,
    pub sym_b: SymmetryGroup,
}

impl AssemblyPair {
    pub fn new(
        id: String,
        task: String,
        cloud_a: PointCloud,
        cloud_b: PointCloud,
        ann_a: SymmetryAnnotation,
        ann_b: SymmetryAnnotation,
    ) -> Result<Self> {
        let sym_a = ann_a.group().map_err(|msg| DataError::Contract(format!("{id}/A: {msg}")))?;
        let sym_b = ann_b.group().map_err(|msg| DataError::Contract(format!("{id}/B: {msg}")))?;
        Ok(Self {
            id,
            task,
            cloud_a,
            cloud_b,
            ann_a,
            ann_b,
            sym_a,
            sym_b,
        })
    }
}

/// Centered observations of a pair and the poses that restore it.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub obs_a: PointCloud,
    pub obs_b: PointCloud,
    pub gt_a: RigidTransform,
    pub gt_b: RigidTransform,
}

fn observe(cloud: &PointCloud, r: &Mat3) -> Result<(PointCloud, RigidTransform)> {
    let (centered, c) = geometry::center(cloud)?;
    Ok((centered.rotate(r), RigidTransform::new(geometry::transpose(r), c)))
}

/// Independently rotate both canonical clouds about their centroids and
/// move them to the origin.
pub fn augment(pair: &AssemblyPair, seed: u64) -> Result<Augmented> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rb = geometry::random_rotation_with(&mut rng);
    let ra = geometry::random_rotation_with(&mut rng);
    let (obs_b, gt_b) = observe(&pair.cloud_b, &rb)?;
    let (obs_a, gt_a) = observe(&pair.cloud_a, &ra)?;
    Ok(Augmented {
        obs_a,
        obs_b,
        gt_a,
        gt_b,
    })
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let pts = cloud.valid_points();
    let mut out = String::with_capacity(pts.len() * 72);
    writeln!(out, "{}", pts.len()).unwrap();
    for p in pts {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).unwrap();
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Read an `.xyz` file and pad it to [`CLOUD_POINTS`] rows.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let origin = path.display().to_string();
    let bad = |line: usize, msg: String| DataError::Parse {
        path: origin.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let n: usize = first
        .trim()
        .parse()
        .map_err(|e| bad(1, format!("bad point count `{}`: {e}", first.trim())))?;
    if n == 0 || n > CLOUD_POINTS {
        return Err(bad(1, format!("point count {n} outside 1..={CLOUD_POINTS}")));
    }
    let mut points = Vec::with_capacity(n);
    for (i, l) in lines.by_ref().take(n) {
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(i + 1, format!("malformed point `{l}`: {e}")))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(bad(i + 1, format!("malformed point `{l}`")));
        }
        points.push([v[0], v[1], v[2]]);
    }
    if points.len() < n {
        return Err(bad(points.len() + 2, format!("expected {n} points, found {}", points.len())));
    }
    if let Some((i, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(bad(i + 1, format!("unexpected trailing content `{l}`")));
    }
    pad_cloud(&points, CLOUD_POINTS)
}

fn read_annotation(path: &Path) -> Result<(SymmetryAnnotation, SymmetryGroup)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: String| DataError::Annotation {
        path: path.display().to_string(),
        msg,
    };
    let ann: SymmetryAnnotation = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let group = ann.group().map_err(bad)?;
    Ok((ann, group))
}

pub fn save_pair(pair: &AssemblyPair, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_xyz(&pair.cloud_a, &dir.join("A.xyz"))?;
    write_xyz(&pair.cloud_b, &dir.join("B.xyz"))?;
    for (ann, name) in [(&pair.ann_a, "A.json"), (&pair.ann_b, "B.json")] {
        let path = dir.join(name);
        let text = serde_json::to_string_pretty(ann).expect("annotation serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

/// Load `<dir>/{A,B}.{xyz,json}`. The pair id is the directory name.
pub fn load_pair(dir: &Path, task: &str) -> Result<AssemblyPair> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let cloud_a = read_xyz(&dir.join("A.xyz"))?;
    let cloud_b = read_xyz(&dir.join("B.xyz"))?;
    let (ann_a, sym_a) = read_annotation(&dir.join("A.json"))?;
    let (ann_b, sym_b) = read_annotation(&dir.join("B.json"))?;
    Ok(AssemblyPair {
        id,
        task: task.to_string(),
        cloud_a,
        cloud_b,
        ann_a,
        ann_b,
        sym_a,
        sym_b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: String,
    pub rest_plane: RestPlane,
    pub global_scale: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// A manifest with its pairs loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<AssemblyPair>,
    pub test: Vec<AssemblyPair>,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let load = |ids: &[String]| -> Result<Vec<AssemblyPair>> {
        ids.iter().map(|id| load_pair(&dir.join(id), &manifest.task)).collect()
    };
    let train = load(&manifest.train)?;
    let test = load(&manifest.test)?;
    Ok(Dataset { manifest, train, test })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for pair in dataset.train.iter().chain(&dataset.test) {
        save_pair(pair, &dir.join(&pair.id))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Every dataset invariant that fails, one message per violation.
pub fn validate_dataset(dir: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => return vec![e.to_string()],
    };
    if manifest.global_scale != GLOBAL_SCALE {
        problems.push(format!("manifest: global_scale {} != {GLOBAL_SCALE}", manifest.global_scale));
    }
    let train: BTreeSet<&String> = manifest.train.iter().collect();
    let test: BTreeSet<&String> = manifest.test.iter().collect();
    if train.len() != manifest.train.len() || test.len() != manifest.test.len() {
        problems.push("manifest: duplicate pair id within a split".into());
    }
    for id in train.intersection(&test) {
        problems.push(format!("{id}: listed in both train and test"));
    }
    for id in train.union(&test) {
        let pair = match load_pair(&dir.join(id.as_str()), &manifest.task) {
            Ok(p) => p,
            Err(e) => {
                problems.push(format!("{id}: {e}"));
                continue;
            }
        };
        for (name, cloud) in [("A", &pair.cloud_a), ("B", &pair.cloud_b)] {
            if cloud.len() != CLOUD_POINTS {
                problems.push(format!("{id}/{name}: {} rows, expected {CLOUD_POINTS}", cloud.len()));
            }
        }
        match rest_state(&pair.cloud_b, manifest.rest_plane) {
            Ok((lo, base)) => {
                if lo.abs() > CANONICAL_TOL {
                    problems.push(format!("{id}/B: lowest point at {lo:e}, not on the rest plane"));
                }
                if geometry::norm(base) > CANONICAL_TOL {
                    problems.push(format!("{id}/B: base center {base:?} is off the vertical axis"));
                }
            }
            Err(e) => problems.push(format!("{id}/B: {e}")),
        }
        for (name, g) in [("A", &pair.sym_a), ("B", &pair.sym_b)] {
            if let Err(msg) = g.check() {
                problems.push(format!("{id}/{name}: symmetry group invalid: {msg}"));
            }
        }
    }
    problems
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Lid,
    Peg,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lid => "lid",
            TaskKind::Peg => "peg",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lid" => Ok(TaskKind::Lid),
            "peg" => Ok(TaskKind::Peg),
            other => Err(format!("unknown task `{other}` (expected lid or peg)")),
        }
    }
}

/// Surface of revolution about z through the given (radius, z) profile.
fn revolve(profile: &[(f64, f64)], segments: usize) -> TriMesh {
    let rings = profile.len();
    let mut vertices = Vec::with_capacity(rings * segments);
    for &(r, z) in profile {
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([r * a.cos(), r * a.sin(), z]);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..rings - 1 {
        for s in 0..segments {
            let t = (s + 1) % segments;
            let (a, b, c, d) = (i * segments + s, i * segments + t, (i + 1) * segments + s, (i + 1) * segments + t);
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    let mesh = TriMesh { vertices, triangles };
    drop_degenerate(mesh)
}

fn drop_degenerate(mut mesh: TriMesh) -> TriMesh {
    let keep: Vec<[usize; 3]> = (0..mesh.triangles.len())
        .filter(|&i| mesh.triangle_area(i) > 1e-14)
        .map(|i| mesh.triangles[i])
        .collect();
    mesh.triangles = keep;
    mesh
}

/// Star-shaped closed polygon about the origin (counter-clockwise).
fn cross_section(shape: usize, size: f64) -> Vec<[f64; 2]> {
    match shape {
        0 => (0..48)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / 48.0;
                [size * a.cos(), size * a.sin()]
            })
            .collect(),
        1 => vec![[size, -size], [size, size], [-size, size], [-size, -size]],
        _ => {
            let h = size / 2.5;
            vec![
                [size, -h],
                [size, h],
                [h, h],
                [h, size],
                [-h, size],
                [-h, h],
                [-size, h],
                [-size, -h],
                [-h, -h],
                [-h, -size],
                [h, -size],
                [h, -h],
            ]
        }
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Walls and end caps of a prism over `poly` between heights `z0 < z1`.
fn prism(poly: &[[f64; 2]], z0: f64, z1: f64, bottom: bool, top: bool) -> TriMesh {
    let n = poly.len();
    let mut vertices = Vec::new();
    for &z in &[z0, z1] {
        vertices.extend(poly.iter().map(|q| [q[0], q[1], z]));
    }
    let mut triangles = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        triangles.push([i, j, n + j]);
        triangles.push([i, n + j, n + i]);
    }
    for (flag, z, off) in [(bottom, z0, 0), (top, z1, n)] {
        if flag {
            let c = vertices.len();
            vertices.push([0.0, 0.0, z]);
            for i in 0..n {
                triangles.push([c, off + i, off + (i + 1) % n]);
            }
        }
    }
    drop_degenerate(TriMesh { vertices, triangles })
}

/// Flat grid over the square `[-h, h]^2` at height `z`, skipping cells whose
/// center falls inside `hole`.
fn holed_plate(h: f64, z: f64, cells: usize, hole: &[[f64; 2]]) -> TriMesh {
    let step = 2.0 * h / cells as f64;
    let idx = |i: usize, j: usize| i * (cells + 1) + j;
    let vertices = (0..=cells)
        .flat_map(|i| (0..=cells).map(move |j| [-h + i as f64 * step, -h + j as f64 * step, z]))
        .collect();
    let mut triangles = Vec::new();
    for i in 0..cells {
        for j in 0..cells {
            let center = [-h + (i as f64 + 0.5) * step, -h + (j as f64 + 0.5) * step];
            if point_in_polygon(center, hole) {
                continue;
            }
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh { vertices, triangles }
}

/// Shape parameters of one generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeParams {
    Lid {
        radius: f64,
        height: f64,
        wall: f64,
        lid_thickness: f64,
        plug_depth: f64,
    },
    Peg {
        board: f64,
        thickness: f64,
        hole_depth: f64,
        /// 0 circle, 1 square, 2 cross.
        section: usize,
        size: f64,
        length: f64,
    },
}

impl ShapeParams {
    pub fn random<R: Rng + ?Sized>(kind: TaskKind, rng: &mut R) -> Self {
        match kind {
            TaskKind::Lid => ShapeParams::Lid {
                radius: rng.gen_range(0.7..1.2),
                height: rng.gen_range(1.0..2.0),
                wall: rng.gen_range(0.06..0.14),
                lid_thickness: rng.gen_range(0.06..0.12),
                plug_depth: rng.gen_range(0.1..0.25),
            },
            TaskKind::Peg => {
                let thickness = rng.gen_range(0.5..0.9);
                ShapeParams::Peg {
                    board: rng.gen_range(1.0..1.4),
                    thickness,
                    hole_depth: thickness * rng.gen_range(0.5..0.8),
                    section: rng.gen_range(0..3),
                    size: rng.gen_range(0.25..0.45),
                    length: rng.gen_range(0.9..1.5),
                }
            }
        }
    }

    /// Meshes of (A, B) in assembled position.
    pub fn meshes(&self) -> (TriMesh, TriMesh) {
        const SEG: usize = 96;
        match *self {
            ShapeParams::Lid {
                radius,
                height,
                wall,
                lid_thickness,
                plug_depth,
            } => {
                let inner = radius - wall;
                let container = revolve(
                    &[
                        (0.0, 0.0),
                        (radius, 0.0),
                        (radius, height),
                        (inner, height),
                        (inner, wall),
                        (0.0, wall),
                    ],
                    SEG,
                );
                let lid = revolve(
                    &[
                        (0.0, height - plug_depth),
                        (inner, height - plug_depth),
                        (inner, height),
                        (radius, height),
                        (radius, height + lid_thickness),
                        (0.0, height + lid_thickness),
                    ],
                    SEG,
                );
                (lid, container)
            }
            ShapeParams::Peg {
                board,
                thickness,
                hole_depth,
                section,
                size,
                length,
            } => {
                let hole = cross_section(section, size);
                let square = vec![[board, -board], [board, board], [-board, board], [-board, -board]];
                let floor = thickness - hole_depth;
                let board_mesh = TriMesh::merge(&[
                    prism(&square, 0.0, thickness, true, false),
                    holed_plate(board, thickness, 64, &hole),
                    prism(&hole, floor, thickness, true, false),
                ]);
                let peg = prism(&hole, floor, floor + length, true, true);
                (peg, board_mesh)
            }
        }
    }

    pub fn annotations(&self) -> (SymmetryAnnotation, SymmetryAnnotation) {
        match *self {
            ShapeParams::Lid { .. } => (SymmetryAnnotation::continuous_z(), SymmetryAnnotation::continuous_z()),
            ShapeParams::Peg { section, .. } => {
                let peg = if section == 0 {
                    SymmetryAnnotation::continuous_z()
                } else {
                    SymmetryAnnotation::cyclic_z(4)
                };
                (peg, SymmetryAnnotation::cyclic_z(4))
            }
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `stream` derived from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix(splitmix(master) ^ stream)
}

/// One canonical pair: both objects sampled, then moved by B's
/// canonicalizing translation.
pub fn generate_pair(id: String, kind: TaskKind, params: &ShapeParams, seed: u64) -> Result<AssemblyPair> {
    let (mesh_a, mesh_b) = params.meshes();
    let a = poisson_disk_sample(&mesh_a, CLOUD_POINTS, derive_seed(seed, 0))?.cloud;
    let b = poisson_disk_sample(&mesh_b, CLOUD_POINTS, derive_seed(seed, 1))?.cloud;
    let (b, tf) = canonicalize(&b, RestPlane::Xy)?;
    let a = geometry::apply(&tf, &a);
    let (ann_a, ann_b) = params.annotations();
    AssemblyPair::new(id, kind.name().to_string(), a, b, ann_a, ann_b)
}

/// Training pairs in a `count`-pair dataset.
pub fn train_count(count: usize) -> usize {
    (count as f64 * 3.0 / 5.0).round() as usize
}

pub fn gen_synthetic(kind: TaskKind, count: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_split(kind, count, train_count(count), seed)
}

/// Generated dataset with an explicit training-set size.
pub fn gen_synthetic_split(kind: TaskKind, count: usize, n_train: usize, seed: u64) -> Result<Dataset> {
    if count < 2 || n_train == 0 || n_train >= count {
        return Err(DataError::Contract(format!(
            "need count >= 2 and a non-empty train/test split (count {count}, train {n_train})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<(String, ShapeParams, u64)> = (0..count)
        .map(|i| (format!("pair_{i:04}"), ShapeParams::random(kind, &mut rng), derive_seed(seed, i as u64 + 1)))
        .collect();
    let pairs = specs
        .into_iter()
        .map(|(id, params, s)| generate_pair(id, kind, &params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut train = pairs;
    let test = train.split_off(n_train);
    let manifest = DatasetManifest {
        task: kind.name().to_string(),
        rest_plane: RestPlane::Xy,
        global_scale: GLOBAL_SCALE,
        train: train.iter().map(|p| p.id.clone()).collect(),
        test: test.iter().map(|p| p.id.clone()).collect(),
    };
    Ok(Dataset { manifest, train, test })
}
