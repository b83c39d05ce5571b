//! Pose loss, Adam, branch training and two-step evaluation with reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, derive_seed, AssemblyPair, DataError};
use crate::geometry::{self, GeometryError, PoseError, RigidTransform, SymmetryGroup};
use crate::model::{self, Branch, EncoderConfig, ModelError, ModelParams, PosePrediction, PoseVars};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("checkpoint configs differ in `{field}`")]
    ConfigMismatch { field: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rot: f64,
    pub lambda_trans: f64,
    /// Measure the rotation term against the symmetry-equivalent ground
    /// truth closest to the prediction instead of the annotated one.
    pub symmetry_aware: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rot: 1.0,
            lambda_trans: 1.0,
            symmetry_aware: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_rot) || !ok(self.lambda_trans) || self.lambda_rot + self.lambda_trans == 0.0 {
            return Err(TrainError::Config(format!(
                "loss weights must be non-negative and not both zero (got {}, {})",
                self.lambda_rot, self.lambda_trans
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            epochs: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be positive".into()));
        }
        if !pos(self.learning_rate) || !pos(self.eps) {
            return Err(TrainError::Config("learning_rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `λ_rot · geodesic(R_gt, R_pred) + λ_trans · mean|T_pred − T_gt|`.
pub fn pose_loss<'t>(pose: &PoseVars<'t>, gt: &RigidTransform, cfg: &LossConfig) -> Result<Var<'t>> {
    let tape = pose.rotation.tape();
    let r_gt = tape.constant(Tensor::new(vec![3, 3], gt.rotation.iter().flatten().copied().collect())?);
    let cos = pose.rotation.mul(r_gt)?.sum_all()?.add_scalar(-1.0)?.mul_scalar(0.5)?;
    let angle = cos.acos()?;
    let t_gt = tape.constant(Tensor::vector(&gt.translation));
    let l1 = pose.translation.sub(t_gt)?.abs()?.mean_all()?;
    Ok(angle.mul_scalar(cfg.lambda_rot)?.add(l1.mul_scalar(cfg.lambda_trans)?)?)
}

/// Ground truth the loss compares against: `gt` itself, or with
/// `symmetry_aware` its rotation replaced by the closest equivalent under
/// `sym` (held constant, so the gradient is that of the active branch).
pub fn loss_target(pose: &PoseVars<'_>, gt: &RigidTransform, sym: &SymmetryGroup, cfg: &LossConfig) -> RigidTransform {
    if !cfg.symmetry_aware {
        return *gt;
    }
    let v = pose.rotation.value();
    let d = v.data();
    let r_pred = [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]];
    let (_, rotation) = geometry::sym_reduced_error(&r_pred, &gt.rotation, sym);
    RigidTransform::new(rotation, gt.translation)
}

/// Loss value of a finished prediction.
pub fn loss_value(pred: &RigidTransform, gt: &RigidTransform, cfg: &LossConfig) -> f64 {
    let l1 = (0..3).map(|d| (pred.translation[d] - gt.translation[d]).abs()).sum::<f64>() / 3.0;
    cfg.lambda_rot * geometry::geodesic(&gt.rotation, &pred.rotation) + cfg.lambda_trans * l1
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: name.clone() });
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                _ => return Err(TrainError::Config(format!("gradient `{name}` does not match a parameter"))),
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss of one augmented sample on `tape` for the given branch.
pub fn sample_loss<'t>(
    tape: &'t Tape,
    bound: &model::Bound<'t>,
    branch: Branch,
    cfg: &EncoderConfig,
    pair: &AssemblyPair,
    aug: &data::Augmented,
    loss_cfg: &LossConfig,
) -> Result<Var<'t>> {
    match branch {
        Branch::B => {
            let pose = model::pose_b(tape, bound, cfg, &aug.obs_b)?;
            pose_loss(&pose, &loss_target(&pose, &aug.gt_b, &pair.sym_b, loss_cfg), loss_cfg)
        }
        // branch A learns against B in its ground-truth canonical pose
        Branch::A => {
            let pose = model::pose_a(tape, bound, cfg, &aug.obs_a, &pair.cloud_b)?;
            pose_loss(&pose, &loss_target(&pose, &aug.gt_a, &pair.sym_a, loss_cfg), loss_cfg)
        }
        Branch::Joint => {
            let (pose_a, pose_b) = model::joint_poses(tape, bound, cfg, &aug.obs_a, &aug.obs_b)?;
            let lb = pose_loss(&pose_b, &loss_target(&pose_b, &aug.gt_b, &pair.sym_b, loss_cfg), loss_cfg)?;
            let la = pose_loss(&pose_a, &loss_target(&pose_a, &aug.gt_a, &pair.sym_a, loss_cfg), loss_cfg)?;
            Ok(lb.add(la)?)
        }
    }
}

/// Loss value and parameter gradients of one sample.
fn sample_grad(
    params: &ModelParams,
    pair: &AssemblyPair,
    aug: &data::Augmented,
    loss_cfg: &LossConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = sample_loss(&tape, &bound, params.branch, &params.config, pair, aug, loss_cfg)?;
    tape.backward(loss)?;
    Ok((loss.item(), bound.grads()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

/// Augmentation seed of a training pair in a given epoch.
pub fn epoch_seed(master: u64, epoch: usize, pair: usize) -> u64 {
    derive_seed(derive_seed(master, epoch as u64 + 1), pair as u64)
}

pub fn train_branch(
    branch: Branch,
    pairs: &[AssemblyPair],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(encoder, branch, derive_seed(cfg.seed, 0))?;
    train_from(params, pairs, cfg, loss_cfg, |_, _| {})
}

/// Train existing parameters; `on_epoch(epoch, mean_loss)` runs after each epoch.
pub fn train_from(
    mut params: ModelParams,
    pairs: &[AssemblyPair],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut adam = Adam::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let diverged = |detail: String| TrainError::Diverged { epoch, detail };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX - epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
                .par_iter()
                .map(|&i| {
                    let aug = data::augment(&pairs[i], epoch_seed(cfg.seed, epoch, i))?;
                    sample_grad(&params, &pairs[i], &aug, loss_cfg)
                })
                .collect();
            let mut sum: Option<BTreeMap<String, Tensor>> = None;
            for r in results {
                let (loss, grads) = match r {
                    Ok(v) => v,
                    Err(TrainError::Model(ModelError::Tensor(e))) => return Err(diverged(e.to_string())),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(diverged(format!("loss is {loss}")));
                }
                total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (k, g) in grads {
                            let a = acc.get_mut(&k).expect("same parameter set");
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            match adam.step(&mut params.tensors, &grads) {
                Err(TrainError::NonFiniteGradient { param }) => {
                    return Err(diverged(format!("non-finite gradient for `{param}`")))
                }
                other => other?,
            }
        }
        let mean = total / pairs.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome { params, history })
}

/// Name of the first encoder-config field on which two checkpoints differ.
pub fn config_difference(a: &EncoderConfig, b: &EncoderConfig) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (ma, mb) = (va.as_object()?, vb.as_object()?);
    ma.iter().find(|(k, v)| mb.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

/// How poses are produced during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'p> {
    /// B first, then A against the B placed by the prediction.
    TwoStep { b: &'p ModelParams, a: &'p ModelParams },
    /// Ablation: one shared model, A conditioned on the observed B.
    Joint(&'p ModelParams),
    /// Ground-truth poses; exercises the metric plumbing.
    Oracle,
}

impl Predictor<'_> {
    fn mode(&self) -> &'static str {
        match self {
            Predictor::TwoStep { .. } => "two_step",
            Predictor::Joint(_) => "joint",
            Predictor::Oracle => "oracle",
        }
    }

    fn encoder(&self) -> Option<EncoderConfig> {
        match self {
            Predictor::TwoStep { b, .. } => Some(b.config.clone()),
            Predictor::Joint(p) => Some(p.config.clone()),
            Predictor::Oracle => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub pair_id: String,
    pub task: String,
    pub error_a: PoseError,
    pub error_b: PoseError,
    pub chamfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub rmse_t: f64,
    pub rmse_r_deg: f64,
    pub chamfer: f64,
    /// Test pairs.
    pub n: usize,
}

pub const ALL_TASKS: &str = "ALL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub encoder: Option<EncoderConfig>,
    /// One row per task, then the `ALL` row.
    pub tasks: Vec<TaskMetrics>,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn overall(&self) -> &TaskMetrics {
        self.tasks.last().expect("report has an ALL row")
    }
}

fn aggregate(task: &str, samples: &[&SampleRecord]) -> Result<TaskMetrics> {
    let errors: Vec<PoseError> = samples.iter().flat_map(|s| [s.error_a, s.error_b]).collect();
    let m = geometry::rmse_of(&errors)?;
    Ok(TaskMetrics {
        task: task.to_string(),
        rmse_t: m.rmse_t,
        rmse_r_deg: m.rmse_r_deg,
        chamfer: samples.iter().map(|s| s.chamfer).sum::<f64>() / samples.len() as f64,
        n: samples.len(),
    })
}

/// Per-task and overall metrics recomputed from sample records.
pub fn summarize(samples: &[SampleRecord]) -> Result<Vec<TaskMetrics>> {
    let mut by_task: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for s in samples {
        by_task.entry(s.task.as_str()).or_default().push(s);
    }
    let mut rows = by_task
        .iter()
        .map(|(t, s)| aggregate(t, s))
        .collect::<Result<Vec<_>>>()?;
    rows.push(aggregate(ALL_TASKS, &samples.iter().collect::<Vec<_>>())?);
    Ok(rows)
}

fn evaluate_pair(predictor: Predictor<'_>, pair: &AssemblyPair, seed: u64) -> Result<SampleRecord> {
    let aug = data::augment(pair, seed)?;
    let (pred_b, pred_a): (RigidTransform, RigidTransform) = match predictor {
        Predictor::TwoStep { b, a } => {
            let pb = model::predict_b(&aug.obs_b, b)?.transform;
            let placed_b = geometry::apply(&pb, &aug.obs_b);
            let pa = model::predict_a(&aug.obs_a, &placed_b, a)?.transform;
            (pb, pa)
        }
        Predictor::Joint(p) => {
            let j = model::joint_forward(&aug.obs_a, &aug.obs_b, p)?;
            (j.b.transform, j.a.transform)
        }
        Predictor::Oracle => (aug.gt_b, aug.gt_a),
    };
    let chamfer = geometry::pair_chamfer(
        &geometry::apply(&pred_a, &aug.obs_a),
        &pair.cloud_a,
        &geometry::apply(&pred_b, &aug.obs_b),
        &pair.cloud_b,
    )?;
    Ok(SampleRecord {
        pair_id: pair.id.clone(),
        task: pair.task.clone(),
        error_a: geometry::pose_error(&pred_a, &aug.gt_a, &pair.sym_a),
        error_b: geometry::pose_error(&pred_b, &aug.gt_b, &pair.sym_b),
        chamfer,
    })
}

/// Evaluate every test pair under one fixed augmentation per pair.
pub fn evaluate(predictor: Predictor<'_>, test: &[AssemblyPair], seed: u64) -> Result<EvalReport> {
    if let Predictor::TwoStep { b, a } = predictor {
        if let Some(field) = config_difference(&b.config, &a.config) {
            return Err(TrainError::ConfigMismatch { field });
        }
        if b.branch != Branch::B || a.branch != Branch::A {
            return Err(TrainError::Config(format!(
                "two-step evaluation needs B and A checkpoints, got {} and {}",
                b.branch, a.branch
            )));
        }
    }
    if test.is_empty() {
        return Err(TrainError::Config("test set is empty".into()));
    }
    let samples = test
        .par_iter()
        .enumerate()
        .map(|(i, pair)| evaluate_pair(predictor, pair, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mode: predictor.mode().to_string(),
        seed,
        encoder: predictor.encoder(),
        tasks: summarize(&samples)?,
        samples,
    })
}

pub fn evaluate_two_step(params_b: &ModelParams, params_a: &ModelParams, test: &[AssemblyPair], seed: u64) -> Result<EvalReport> {
    evaluate(Predictor::TwoStep { b: params_b, a: params_a }, test, seed)
}

/// Prediction of both poses for one observation pair, two-step order.
pub fn predict_pair(
    params_b: &ModelParams,
    params_a: &ModelParams,
    obs_a: &geometry::PointCloud,
    obs_b: &geometry::PointCloud,
) -> Result<(PosePrediction, PosePrediction)> {
    let pb = model::predict_b(obs_b, params_b)?;
    let pa = model::predict_a(obs_a, &geometry::apply(&pb.transform, obs_b), params_a)?;
    Ok((pa, pb))
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("task,rmse_t,rmse_r_deg,chamfer,n\n");
    for r in &report.tasks {
        out += &format!("{},{},{},{},{}\n", r.task, r.rmse_t, r.rmse_r_deg, r.chamfer, r.n);
    }
    out
}

pub fn samples_csv(report: &EvalReport) -> String {
    let mut out = String::from("pair_id,task,object,t_x,t_y,t_z,r_x_deg,r_y_deg,r_z_deg,geodesic_rad,chamfer\n");
    for s in &report.samples {
        for (obj, e) in [("A", &s.error_a), ("B", &s.error_b)] {
            let [tx, ty, tz] = e.translation;
            let [rx, ry, rz] = e.euler_deg;
            out += &format!(
                "{},{},{obj},{tx},{ty},{tz},{rx},{ry},{rz},{},{}\n",
                s.pair_id, s.task, e.geodesic, s.chamfer
            );
        }
    }
    out
}

pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out += &format!("{},{l}\n", i + 1);
    }
    out
}

/// `metrics.json`, `metrics.csv` and `samples.csv` in `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(report).expect("report serializes") + "\n")?;
    write(&dir.join("metrics.csv"), metrics_csv(report))?;
    write(&dir.join("samples.csv"), samples_csv(report))
}

pub fn write_loss_history(history: &[f64], path: &Path) -> Result<()> {
    write(path, loss_history_csv(history))
}
