//! Two-branch pose network.
//!
//! Branch B poses the receiving object from its own cloud. Branch A poses
//! the fitting object from its equivariant features scaled channel-wise by
//! the rotation-invariant descriptor of B. Each branch owns a two-scale
//! encoder and two pose heads (translation, rotation).
//!
//! Pose convention: for an observed cloud with centroid `c`, the heads
//! produce an equivariant vector `t` and two equivariant directions
//! `(v1, v2)`. The Gram-Schmidt frame `(e1, e2, e3)` of `(v1, v2)` gives the
//! object's canonical z, x and y axes as seen in the input, so `v1` tracks
//! the up (symmetry) axis. With `M = [e2 e3 e1]` the predicted rotation is
//! `R = M^T` and the translation is `T = R (t - c)`, so the predicted
//! placement `p -> R p + T` of the observed cloud does not change when the
//! observation is moved by any rigid motion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError, KnnTable, PointCloud, RigidTransform, Vec3};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};
use crate::vn::{self, PoolAxis, PoolMode};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Name scopes of the two halves of a joint checkpoint.
pub const JOINT_B: &str = "b.";
pub const JOINT_A: &str = "a.";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("degenerate rotation head output v1={v1:?} v2={v2:?}")]
    DegenerateHead { v1: Vec3, v2: Vec3 },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Two-scale vector-neuron edge convolution.
    VectorNeuron,
    /// Scalar edge convolution on raw coordinates (not equivariant).
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "B")]
    B,
    #[serde(rename = "A")]
    A,
    /// Both branches in one graph, A conditioned on B's own descriptor.
    #[serde(rename = "joint")]
    Joint,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::B => "b.",
            Branch::A => "a.",
            Branch::Joint => "joint.",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "B" | "b" => Ok(Branch::B),
            "A" | "a" => Ok(Branch::A),
            "joint" => Ok(Branch::Joint),
            other => Err(format!("unknown branch `{other}` (expected B, A or joint)")),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::B => "B",
            Branch::A => "A",
            Branch::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub k_small: usize,
    pub k_large: usize,
    /// Output channels of each edge-convolution stage, then of the mixing
    /// layer; `widths.len() == depth + 1`.
    pub widths: Vec<usize>,
    /// Edge convolutions per scale.
    pub depth: usize,
    /// Hidden channels of each pose head.
    pub head_hidden: usize,
    /// Points fed to the encoder; larger clouds are subsampled with a fixed
    /// stride over their valid rows.
    pub points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::VectorNeuron,
            k_small: 10,
            k_large: 30,
            widths: vec![32, 64, 128],
            depth: 2,
            head_hidden: 64,
            points: 1024,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.k_small == 0 || self.k_small >= self.k_large {
            return fail(format!("need 0 < k_small < k_large, got {} and {}", self.k_small, self.k_large));
        }
        if self.depth == 0 || self.widths.len() != self.depth + 1 {
            return fail(format!("widths {:?} must have depth + 1 = {} entries", self.widths, self.depth + 1));
        }
        if self.widths.iter().any(|&w| w == 0) || self.head_hidden == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.points <= self.k_large {
            return fail(format!("points ({}) must exceed k_large ({})", self.points, self.k_large));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.widths[self.depth]
    }

    /// Names and shapes of one branch's parameters (without prefix). The
    /// invariant projection only exists where a descriptor is produced for
    /// A: in branch A itself, or in B's half of the joint model.
    pub fn param_shapes(&self, branch: Branch) -> Vec<(String, Vec<usize>)> {
        if branch == Branch::Joint {
            let half = |sub: &str, with_inv: bool| {
                self.branch_shapes(with_inv)
                    .into_iter()
                    .map(move |(n, shape)| (format!("{sub}{n}"), shape))
                    .collect::<Vec<_>>()
            };
            let mut out = half(JOINT_B, true);
            out.extend(half(JOINT_A, false));
            return out;
        }
        self.branch_shapes(branch == Branch::A)
    }

    fn branch_shapes(&self, with_inv: bool) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let d = self.depth;
        let h = self.head_hidden;
        let c_out = self.out_channels();
        match self.kind {
            EncoderKind::VectorNeuron => {
                for s in 0..2 {
                    for l in 0..d {
                        let c_in = if l == 0 { 1 } else { self.widths[l - 1] };
                        let c = self.widths[l];
                        out.push((format!("enc.s{s}.l{l}.w"), vec![c, 2 * c_in]));
                        out.push((format!("enc.s{s}.l{l}.u"), vec![c, c]));
                    }
                }
                out.push(("enc.mix.w".into(), vec![c_out, 2 * self.widths[d - 1]]));
                out.push(("enc.mix.u".into(), vec![c_out, c_out]));
                if with_inv {
                    out.push(("enc.inv.w".into(), vec![3, c_out]));
                }
                for (head, n) in [("head_t", 1), ("head_r", 2)] {
                    out.push((format!("{head}.w1"), vec![h, c_out]));
                    out.push((format!("{head}.u1"), vec![h, h]));
                    out.push((format!("{head}.w2"), vec![n, h]));
                }
            }
            EncoderKind::Plain => {
                for s in 0..2 {
                    for l in 0..d {
                        let c_in = if l == 0 { 3 } else { self.widths[l - 1] };
                        let c = self.widths[l];
                        out.push((format!("enc.s{s}.l{l}.w"), vec![c, 2 * c_in]));
                        out.push((format!("enc.s{s}.l{l}.b"), vec![c]));
                    }
                }
                out.push(("enc.mix.w".into(), vec![c_out, 2 * self.widths[d - 1]]));
                out.push(("enc.mix.b".into(), vec![c_out]));
                for (head, n) in [("head_t", 3), ("head_r", 6)] {
                    out.push((format!("{head}.w1"), vec![h, c_out]));
                    out.push((format!("{head}.b1"), vec![h]));
                    out.push((format!("{head}.w2"), vec![n, h]));
                    out.push((format!("{head}.b2"), vec![n]));
                }
            }
        }
        out
    }
}

/// Named parameter tensors of one branch (or of the joint model).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub branch: Branch,
    pub config: EncoderConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    branch: Branch,
    config: EncoderConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

impl ModelParams {
    /// Fan-scaled uniform matrices, zero biases.
    pub fn init(config: &EncoderConfig, branch: Branch, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_shapes(branch)
            .into_iter()
            .map(|(name, shape)| {
                let t = match shape.as_slice() {
                    &[rows, cols] => vn::init_matrix(rows, cols, &mut rng),
                    _ => Tensor::zeros(&shape),
                };
                (format!("{}{name}", branch.prefix()), t)
            })
            .collect();
        Ok(Self {
            branch,
            config: config.clone(),
            tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            branch: self.branch,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        TensorRecord {
                            shape: t.shape().to_vec(),
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let bad = |msg: String| ModelError::Format {
            path: origin.to_string(),
            msg,
        };
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", file.format_version)));
        }
        file.config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, rec) in file.tensors {
            let t = Tensor::new(rec.shape, rec.values).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        let params = Self {
            branch: file.branch,
            config: file.config,
            tensors,
        };
        for (name, shape) in params.config.param_shapes(params.branch) {
            let full = format!("{}{name}", params.branch.prefix());
            match params.tensors.get(&full) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(bad(format!("tensor `{full}` has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(bad(format!("tensor `{full}` missing"))),
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Register every tensor as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            prefix: self.branch.prefix().to_string(),
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone()))).collect(),
        }
    }
}

/// Parameters registered on a tape.
pub struct Bound<'t> {
    prefix: String,
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// The same parameters with names looked up under `scope`.
    pub fn scoped(&self, scope: &str) -> Bound<'t> {
        Bound {
            prefix: format!("{}{scope}", self.prefix),
            vars: self.vars.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        let full = format!("{}{name}", self.prefix);
        self.vars.get(&full).copied().ok_or(ModelError::MissingParam(full))
    }

    /// Gradients of all bound parameters, zero where none flowed.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect()
    }
}

/// Encoder outputs: per-point features and a global invariant descriptor.
pub struct Encoded<'t> {
    /// `(C, 3, N)` for vector neurons, `(C, N)` for the plain encoder.
    pub equivariant: Var<'t>,
    /// `(C)`.
    pub invariant: Var<'t>,
}

/// Pose head outputs registered on a tape.
pub struct PoseVars<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
    pub t_hat: Var<'t>,
    pub v1: Var<'t>,
    pub v2: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub transform: RigidTransform,
    pub t_hat: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
}

fn vec3(v: Var<'_>) -> Vec3 {
    let t = v.value();
    [t.data()[0], t.data()[1], t.data()[2]]
}

impl PoseVars<'_> {
    pub fn prediction(&self) -> PosePrediction {
        let r = self.rotation.value();
        let d = r.data();
        PosePrediction {
            transform: RigidTransform::new(
                [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]],
                vec3(self.translation),
            ),
            t_hat: vec3(self.t_hat),
            v1: vec3(self.v1),
            v2: vec3(self.v2),
        }
    }
}

/// Deterministic stride subsample of the valid rows followed by centering.
/// Returns the centered cloud and the centroid that was removed.
pub fn prepare_cloud(cloud: &PointCloud, points: usize) -> Result<(PointCloud, Vec3)> {
    let valid = cloud.valid_count();
    if valid == 0 {
        return Err(GeometryError::EmptyCloud.into());
    }
    let picked = if valid <= points {
        cloud.select(&(0..valid).collect::<Vec<_>>())
    } else {
        cloud.select(&(0..points).map(|i| i * valid / points).collect::<Vec<_>>())
    };
    Ok(geometry::center(&picked)?)
}

fn neighbor_tables(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<(KnnTable, KnnTable)> {
    let large = geometry::knn_indices(cloud, cfg.k_large)?;
    Ok((large.truncated(cfg.k_small), large))
}

fn coords_tensor(cloud: &PointCloud) -> Tensor {
    let pts = cloud.valid_points();
    let n = pts.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in pts.iter().enumerate() {
        for d in 0..3 {
            data[d * n + i] = p[d];
        }
    }
    Tensor::new(vec![3, n], data).expect("non-empty cloud")
}

/// Per-point features and global descriptor of a centered cloud.
pub fn encode_two_scale<'t>(
    tape: &'t Tape,
    params: &Bound<'t>,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<Encoded<'t>> {
    let equivariant = encode(tape, params, cfg, cloud)?;
    let invariant = match cfg.kind {
        EncoderKind::VectorNeuron => vn::vn_invariant(equivariant, params.get("enc.inv.w")?)?,
        EncoderKind::Plain => equivariant.mean_axis(1)?,
    };
    Ok(Encoded {
        equivariant,
        invariant,
    })
}

/// Per-point features of a centered cloud.
pub fn encode<'t>(tape: &'t Tape, params: &Bound<'t>, cfg: &EncoderConfig, cloud: &PointCloud) -> Result<Var<'t>> {
    let (small, large) = neighbor_tables(cloud, cfg)?;
    match cfg.kind {
        EncoderKind::VectorNeuron => {
            let lifted = vn::lift(tape, cloud)?;
            let mut scales = Vec::with_capacity(2);
            for (s, table) in [&small, &large].into_iter().enumerate() {
                let mut f = lifted;
                for l in 0..cfg.depth {
                    let w = params.get(&format!("enc.s{s}.l{l}.w"))?;
                    let u = params.get(&format!("enc.s{s}.l{l}.u"))?;
                    f = vn::vn_edge_conv(f, table, w, u)?;
                }
                scales.push(f);
            }
            let joined = tensor::concat(&scales, 0)?;
            let mixed = vn::vn_linear(joined, params.get("enc.mix.w")?)?;
            Ok(vn::vn_relu(mixed, params.get("enc.mix.u")?)?)
        }
        EncoderKind::Plain => {
            let x0 = tape.constant(coords_tensor(cloud));
            let mut scales = Vec::with_capacity(2);
            for (s, table) in [&small, &large].into_iter().enumerate() {
                let mut x = x0;
                for l in 0..cfg.depth {
                    let w = params.get(&format!("enc.s{s}.l{l}.w"))?;
                    let b = params.get(&format!("enc.s{s}.l{l}.b"))?;
                    x = plain_edge_conv(x, table, w, b)?;
                }
                scales.push(x);
            }
            let joined = tensor::concat(&scales, 0)?;
            Ok(affine(joined, params.get("enc.mix.w")?, params.get("enc.mix.b")?)?.max_scalar(0.0)?)
        }
    }
}

/// `W x + b` for `x` of shape `(C_in, N)`.
fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let y = w.matmul(x)?;
    let shape = y.shape();
    let bias = b.reshape(&[shape[0], 1])?.expand(&shape)?;
    Ok(y.add(bias)?)
}

fn plain_edge_conv<'t>(x: Var<'t>, knn: &KnnTable, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape()[1];
    let k = knn.k;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let xi = x.index_select(1, &centers)?;
    let xj = x.index_select(1, &knn.indices)?;
    let edges = tensor::concat(&[xi, xj.sub(xi)?], 0)?;
    let y = affine(edges, w, b)?.max_scalar(0.0)?;
    let c = y.shape()[0];
    Ok(y.reshape(&[c, n, k])?.max_axis(2)?)
}

/// Channel-wise scaling of per-point features by an invariant descriptor.
pub fn fuse<'t>(invariant: Var<'t>, equivariant: Var<'t>) -> Result<Var<'t>> {
    Ok(vn::fuse(invariant, equivariant)?)
}

/// Raw head outputs `(t, v1, v2)` from per-point features.
fn heads<'t>(params: &Bound<'t>, cfg: &EncoderConfig, feature: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    match cfg.kind {
        EncoderKind::VectorNeuron => {
            let head = |name: &str| -> Result<Var<'t>> {
                let h = vn::vn_linear(feature, params.get(&format!("{name}.w1"))?)?;
                let h = vn::vn_relu(h, params.get(&format!("{name}.u1"))?)?;
                let o = vn::vn_linear(h, params.get(&format!("{name}.w2"))?)?;
                Ok(vn::vn_pool(o, PoolMode::Mean, PoolAxis::Points)?)
            };
            let t = head("head_t")?.reshape(&[3])?;
            let r = head("head_r")?;
            let v1 = r.index_select(0, &[0])?.reshape(&[3])?;
            let v2 = r.index_select(0, &[1])?.reshape(&[3])?;
            Ok((t, v1, v2))
        }
        EncoderKind::Plain => {
            let head = |name: &str| -> Result<Var<'t>> {
                let h = affine(feature, params.get(&format!("{name}.w1"))?, params.get(&format!("{name}.b1"))?)?
                    .max_scalar(0.0)?;
                let o = affine(h, params.get(&format!("{name}.w2"))?, params.get(&format!("{name}.b2"))?)?;
                Ok(o.mean_axis(1)?)
            };
            let t = head("head_t")?;
            let r = head("head_r")?;
            Ok((t, r.index_select(0, &[0, 1, 2])?, r.index_select(0, &[3, 4, 5])?))
        }
    }
}

fn dot<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.mul(b)?.sum_all()?)
}

fn normalize<'t>(a: Var<'t>) -> Result<Var<'t>> {
    Ok(a.div(dot(a, a)?.sqrt()?)?)
}

fn cross<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (p, q) = ([1, 2, 0], [2, 0, 1]);
    let lhs = a.index_select(0, &p)?.mul(b.index_select(0, &q)?)?;
    let rhs = a.index_select(0, &q)?.mul(b.index_select(0, &p)?)?;
    Ok(lhs.sub(rhs)?)
}

/// Rigid pose from head outputs and the observed centroid.
pub fn assemble_pose<'t>(t_hat: Var<'t>, v1: Var<'t>, v2: Var<'t>, centroid: Vec3) -> Result<PoseVars<'t>> {
    let (a, b) = (vec3(v1), vec3(v2));
    if geometry::orthonormalize(a, b).is_err() {
        return Err(ModelError::DegenerateHead { v1: a, v2: b });
    }
    let e1 = normalize(v1)?;
    let e2 = normalize(v2.sub(e1.mul(dot(v2, e1)?)?)?)?;
    let e3 = cross(e1, e2)?;
    let rows: Vec<Var<'t>> = [e2, e3, e1].iter().map(|e| e.reshape(&[1, 3])).collect::<std::result::Result<_, _>>()?;
    let rotation = tensor::concat(&rows, 0)?;
    let tape = t_hat.tape();
    let offset = t_hat.sub(tape.constant(Tensor::vector(&centroid)))?;
    let translation = rotation.matmul(offset.reshape(&[3, 1])?)?.reshape(&[3])?;
    Ok(PoseVars {
        rotation,
        translation,
        t_hat,
        v1,
        v2,
    })
}

/// Head outputs for a per-point feature map, assembled into a pose.
pub fn pose_head<'t>(params: &Bound<'t>, cfg: &EncoderConfig, feature: Var<'t>, centroid: Vec3) -> Result<PoseVars<'t>> {
    let (t, v1, v2) = heads(params, cfg, feature)?;
    assemble_pose(t, v1, v2, centroid)
}

/// Pose of the receiving object from its (raw) cloud.
pub fn pose_b<'t>(tape: &'t Tape, params: &Bound<'t>, cfg: &EncoderConfig, cloud_b: &PointCloud) -> Result<PoseVars<'t>> {
    let (centered, c) = prepare_cloud(cloud_b, cfg.points)?;
    let e = encode(tape, params, cfg, &centered)?;
    pose_head(params, cfg, e, c)
}

/// Pose of the fitting object, conditioned on the receiving object's cloud.
pub fn pose_a<'t>(
    tape: &'t Tape,
    params: &Bound<'t>,
    cfg: &EncoderConfig,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
) -> Result<PoseVars<'t>> {
    let (centered_b, _) = prepare_cloud(cloud_b, cfg.points)?;
    let inv_b = encode_two_scale(tape, params, cfg, &centered_b)?.invariant;
    let (centered_a, c) = prepare_cloud(cloud_a, cfg.points)?;
    let eq_a = encode(tape, params, cfg, &centered_a)?;
    pose_head(params, cfg, fuse(inv_b, eq_a)?, c)
}

/// Canonical pose of B.
pub fn predict_b(cloud_b: &PointCloud, params: &ModelParams) -> Result<PosePrediction> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    Ok(pose_b(&tape, &bound, &params.config, cloud_b)?.prediction())
}

/// Pose of A given B in (predicted or ground-truth) canonical pose.
pub fn predict_a(cloud_a: &PointCloud, cloud_b_canonical: &PointCloud, params: &ModelParams) -> Result<PosePrediction> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    Ok(pose_a(&tape, &bound, &params.config, cloud_a, cloud_b_canonical)?.prediction())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointPrediction {
    pub a: PosePrediction,
    pub b: PosePrediction,
}

/// Joint ablation graph: B's half encodes the observed B once, for both
/// B's pose and the descriptor that conditions A's half. Returns (A, B).
pub fn joint_poses<'t>(
    tape: &'t Tape,
    params: &Bound<'t>,
    cfg: &EncoderConfig,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
) -> Result<(PoseVars<'t>, PoseVars<'t>)> {
    let (pb, pa) = (params.scoped(JOINT_B), params.scoped(JOINT_A));
    let (centered_b, cb) = prepare_cloud(cloud_b, cfg.points)?;
    let enc_b = encode_two_scale(tape, &pb, cfg, &centered_b)?;
    let pose_b = pose_head(&pb, cfg, enc_b.equivariant, cb)?;
    let (centered_a, ca) = prepare_cloud(cloud_a, cfg.points)?;
    let eq_a = encode(tape, &pa, cfg, &centered_a)?;
    let pose_a = pose_head(&pa, cfg, fuse(enc_b.invariant, eq_a)?, ca)?;
    Ok((pose_a, pose_b))
}

/// Ablation: both poses in one pass, A conditioned on the observed (not
/// canonicalized) B.
pub fn joint_forward(cloud_a: &PointCloud, cloud_b: &PointCloud, params: &ModelParams) -> Result<JointPrediction> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (a, b) = joint_poses(&tape, &bound, &params.config, cloud_a, cloud_b)?;
    Ok(JointPrediction {
        a: a.prediction(),
        b: b.prediction(),
    })
}
