//! Vector-neuron layers.
//!
//! Features are `(C, 3, ...)` tensors: one 3-vector per channel per point
//! (and per neighbor, for edge features). Every layer here commutes with a
//! rotation applied to all of the 3-vectors, except [`vn_invariant`], whose
//! output is unchanged by it.

use rand::Rng;

use crate::geometry::{self, KnnTable, PointCloud};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Largest centroid norm accepted by [`lift`].
pub const CENTERED_TOL: f64 = 1e-6;

/// Which axis a VN pooling reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Last axis of a `(C, 3, N, K)` edge feature.
    Neighbors,
    /// Last axis of a `(C, 3, N)` point feature.
    Points,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

/// Single-channel feature holding each point's coordinates. The cloud must
/// already be centered.
pub fn lift<'t>(tape: &'t Tape, cloud: &PointCloud) -> Result<Var<'t>> {
    let c = cloud.centroid().map_err(|e| TensorError::Contract {
        op: "lift",
        msg: e.to_string(),
    })?;
    if geometry::norm(c) > CENTERED_TOL {
        return Err(TensorError::Contract {
            op: "lift",
            msg: format!("cloud is not centered (centroid {c:?})"),
        });
    }
    let pts = cloud.valid_points();
    let n = pts.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in pts.iter().enumerate() {
        for d in 0..3 {
            data[d * n + i] = p[d];
        }
    }
    Ok(tape.constant(Tensor::new(vec![1, 3, n], data)?))
}

/// Channel mixing `out[c'] = Σ_c W[c', c] f[c]`; no bias.
pub fn vn_linear<'t>(f: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    let wshape = w.shape();
    if shape.len() < 3 || shape[1] != 3 || wshape.len() != 2 || wshape[1] != shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "vn_linear",
            lhs: wshape,
            rhs: shape,
        });
    }
    let rest: usize = shape[1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[0] = wshape[0];
    w.matmul(f.reshape(&[shape[0], rest])?)?.reshape(&out_shape)
}

/// Half-space projection: where `<v, k> < 0`, remove the component of `v`
/// along `k`. `k = 0` passes `v` through.
pub fn vn_relu_project<'t>(f: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    if shape != k.shape() || shape.len() < 3 || shape[1] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "vn_relu",
            lhs: shape,
            rhs: k.shape(),
        });
    }
    let (fv, kv) = (f.value(), k.value());
    let c = shape[0];
    let m: usize = shape[2..].iter().product();
    let mut out = fv.data().to_vec();
    let (fd, kd) = (fv.data(), kv.data());
    for ch in 0..c {
        let base = ch * 3 * m;
        for i in 0..m {
            let at = |d: usize| base + d * m + i;
            let s: f64 = (0..3).map(|d| fd[at(d)] * kd[at(d)]).sum();
            let q: f64 = (0..3).map(|d| kd[at(d)] * kd[at(d)]).sum();
            if s < 0.0 && q > 0.0 {
                for d in 0..3 {
                    out[at(d)] = fd[at(d)] - s / q * kd[at(d)];
                }
            }
        }
    }
    let value = Tensor::new(shape.clone(), out)?;
    f.tape().custom("vn_relu", &[f, k], value, move |ctx| {
        let (fd, kd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gf = g.to_vec();
        let mut gk = vec![0.0; g.len()];
        for ch in 0..c {
            let base = ch * 3 * m;
            for i in 0..m {
                let at = |d: usize| base + d * m + i;
                let s: f64 = (0..3).map(|d| fd[at(d)] * kd[at(d)]).sum();
                let q: f64 = (0..3).map(|d| kd[at(d)] * kd[at(d)]).sum();
                if !(s < 0.0 && q > 0.0) {
                    continue;
                }
                let gd: f64 = (0..3).map(|d| g[at(d)] * kd[at(d)]).sum();
                for d in 0..3 {
                    let j = at(d);
                    gf[j] = g[j] - gd / q * kd[j];
                    gk[j] = -(gd * fd[j] / q + s * g[j] / q - 2.0 * s * gd * kd[j] / (q * q));
                }
            }
        }
        let shape = ctx.grad.shape().to_vec();
        vec![
            ctx.needs_grad(0).then(|| Tensor::new(shape.clone(), gf).unwrap()),
            ctx.needs_grad(1).then(|| Tensor::new(shape, gk).unwrap()),
        ]
    })
}

/// VN ReLU with learned direction weights `u` (C x C).
pub fn vn_relu<'t>(f: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let k = vn_linear(f, u)?;
    vn_relu_project(f, k)
}

/// Pool over the last axis. `Max` keeps, per channel, the vector with the
/// largest inner product against the mean of the pooled set (lowest index
/// on ties); the same index is used for all three components.
pub fn vn_pool<'t>(f: Var<'t>, mode: PoolMode, axis: PoolAxis) -> Result<Var<'t>> {
    let shape = f.shape();
    let rank_ok = match axis {
        PoolAxis::Neighbors => shape.len() == 4,
        PoolAxis::Points => shape.len() == 3,
    };
    if !rank_ok || shape[1] != 3 {
        return Err(TensorError::Contract {
            op: "vn_pool",
            msg: format!("{axis:?} pooling does not apply to shape {shape:?}"),
        });
    }
    let last = shape.len() - 1;
    match mode {
        PoolMode::Mean => f.mean_axis(last),
        PoolMode::Max => vn_max_last(f),
    }
}

fn vn_max_last<'t>(f: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    let kdim = *shape.last().unwrap();
    let c = shape[0];
    let m: usize = shape[2..shape.len() - 1].iter().product();
    let fv = f.value();
    let fd = fv.data();
    let mut out = vec![0.0; c * 3 * m];
    let mut arg = vec![0usize; c * m];
    for ch in 0..c {
        for i in 0..m {
            let at = |d: usize, j: usize| ((ch * 3 + d) * m + i) * kdim + j;
            let mut dir = [0.0; 3];
            for (d, v) in dir.iter_mut().enumerate() {
                *v = (0..kdim).map(|j| fd[at(d, j)]).sum::<f64>() / kdim as f64;
            }
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..kdim {
                let score: f64 = (0..3).map(|d| fd[at(d, j)] * dir[d]).sum();
                if score > best_score {
                    best_score = score;
                    best = j;
                }
            }
            arg[ch * m + i] = best;
            for d in 0..3 {
                out[(ch * 3 + d) * m + i] = fd[at(d, best)];
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape.pop();
    let value = Tensor::new(out_shape, out)?;
    f.tape().custom("vn_max_pool", &[f], value, move |ctx| {
        let g = ctx.grad.data();
        let mut gi = Tensor::zeros(ctx.inputs[0].shape());
        let gd = gi.data_mut();
        for ch in 0..c {
            for i in 0..m {
                let j = arg[ch * m + i];
                for d in 0..3 {
                    gd[((ch * 3 + d) * m + i) * kdim + j] = g[(ch * 3 + d) * m + i];
                }
            }
        }
        vec![Some(gi)]
    })
}

/// Rotation-invariant global descriptor: per point, the inner product of
/// each channel with the sum of three learned equivariant directions
/// (`w` is 3 x C), averaged over points.
pub fn vn_invariant<'t>(f: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(TensorError::Contract {
            op: "vn_invariant",
            msg: format!("expected (C, 3, N), got {shape:?}"),
        });
    }
    let n = shape[2];
    let frame = vn_linear(f, w)?;
    let dir = frame.sum_axis(0)?.reshape(&[1, 3, n])?.expand(&shape)?;
    f.mul(dir)?.sum_axis(1)?.mean_axis(1)
}

/// Edge convolution over a fixed neighbor table: per point `i` and
/// neighbor `j`, the edge feature `[f_i, f_j - f_i]` goes through a VN
/// linear layer (`w`: C_out x 2C) and VN ReLU (`u`), then VN max pooling
/// over neighbors.
pub fn vn_edge_conv<'t>(f: Var<'t>, knn: &KnnTable, w: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let edges = edge_linear(f, knn, w)?;
    let activated = vn_relu(edges, u)?;
    vn_pool(activated, PoolMode::Max, PoolAxis::Neighbors)
}

/// `W [f_i, f_j - f_i]` for every edge, computed as
/// `(W_a - W_b) f_i + W_b f_j` so the mixing runs once per point rather
/// than once per edge. Output is `(C_out, 3, N, K)`.
pub fn edge_linear<'t>(f: Var<'t>, knn: &KnnTable, w: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    let wshape = w.shape();
    if shape.len() != 3 || wshape.len() != 2 || wshape[1] != 2 * shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "vn_edge_conv",
            lhs: wshape,
            rhs: shape,
        });
    }
    let (c, n) = (shape[0], shape[2]);
    if knn.rows() != n || knn.k == 0 {
        return Err(TensorError::Contract {
            op: "vn_edge_conv",
            msg: format!("neighbor table has {} rows for {n} points", knn.rows()),
        });
    }
    let k = knn.k;
    let cout = wshape[0];
    let wa = w.index_select(1, &(0..c).collect::<Vec<_>>())?;
    let wb = w.index_select(1, &(c..2 * c).collect::<Vec<_>>())?;
    let self_part = vn_linear(f, wa.sub(wb)?)?;
    let nbr_part = vn_linear(f, wb)?;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let edges = self_part
        .index_select(2, &centers)?
        .add(nbr_part.index_select(2, &knn.indices)?)?;
    edges.reshape(&[cout, 3, n, k])
}

/// Reference construction of edge features by explicit gather and concat.
pub fn edge_features<'t>(f: Var<'t>, knn: &KnnTable) -> Result<Var<'t>> {
    let shape = f.shape();
    let (c, n, k) = (shape[0], shape[2], knn.k);
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let fi = f.index_select(2, &centers)?;
    let fj = f.index_select(2, &knn.indices)?;
    tensor::concat(&[fi, fj.sub(fi)?], 0)?.reshape(&[2 * c, 3, n, k])
}

/// Scale channel `c` of a vector feature by scalar `scales[c]` at every
/// point.
pub fn fuse<'t>(scales: Var<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    let s = scales.shape();
    let fshape = feature.shape();
    if s.len() != 1 || fshape.is_empty() || s[0] != fshape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: s,
            rhs: fshape,
        });
    }
    let mut bshape = vec![1; fshape.len()];
    bshape[0] = s[0];
    scales.reshape(&bshape)?.expand(&fshape)?.mul(feature)
}

/// Apply a rotation to every 3-vector of a `(C, 3, ...)` tensor.
pub fn rotate_feature(t: &Tensor, r: &geometry::Mat3) -> Tensor {
    let shape = t.shape();
    let c = shape[0];
    let m: usize = shape[2..].iter().product();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..m {
            for (a, row) in r.iter().enumerate() {
                out[(ch * 3 + a) * m + i] = (0..3).map(|b| row[b] * src[(ch * 3 + b) * m + i]).sum();
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn_indices, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_residual(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = a.data().iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        num / den
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect());
        geometry::center(&raw).unwrap().0
    }

    #[test]
    fn lift_examples() {
        let tape = Tape::new();
        let f = lift(&tape, &PointCloud::new(vec![[0.0; 3]])).unwrap();
        assert_eq!(f.value().data(), &[0.0; 3]);
        let p = cloud(16, 1);
        assert_eq!(lift(&tape, &p).unwrap().shape(), vec![1, 3, 16]);
        let r = random_rotation(2);
        let lhs = lift(&tape, &p.rotate(&r)).unwrap().value();
        let rhs = rotate_feature(&lift(&tape, &p).unwrap().value(), &r);
        assert!(rel_residual(&lhs, &rhs) < 1e-15);
        let shifted = p.translate([1.0, 0.0, 0.0]);
        assert!(lift(&tape, &shifted).is_err());
    }

    #[test]
    fn vn_linear_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 3, 5], &mut rng);
        let f = tape.constant(x.clone());
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(*vn_linear(f, eye).unwrap().value(), x);
        let one = tape.constant(random_tensor(&[1, 3, 4], &mut rng));
        let two = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let doubled = vn_linear(one, two).unwrap().value();
        for (a, b) in doubled.data().iter().zip(one.value().data()) {
            assert_eq!(*a, 2.0 * b);
        }
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(vn_linear(f, bad).is_err());
    }

    #[test]
    fn vn_relu_examples() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let aligned = tape.constant(Tensor::new(vec![1, 3, 1], vec![2.0, 4.0, 6.0]).unwrap());
        assert_eq!(*vn_relu_project(v, aligned).unwrap().value(), *v.value());
        let opposite = tape.constant(Tensor::new(vec![1, 3, 1], vec![-1.0, -2.0, -3.0]).unwrap());
        let out = vn_relu_project(v, opposite).unwrap().value();
        assert!(out.data().iter().all(|x| x.abs() < 1e-15));
        let zero = tape.constant(Tensor::zeros(&[1, 3, 1]));
        assert_eq!(*vn_relu_project(v, zero).unwrap().value(), *v.value());
    }

    #[test]
    fn vn_pool_examples() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::new(vec![1, 3, 1, 3], vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]).unwrap());
        let m = vn_pool(same, PoolMode::Mean, PoolAxis::Neighbors).unwrap();
        assert_eq!(m.value().data(), &[1.0, 2.0, 3.0]);
        // {v, 0}: mean direction is v/2, so v wins
        let pair = tape.constant(Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap());
        let m = vn_pool(pair, PoolMode::Max, PoolAxis::Neighbors).unwrap();
        assert_eq!(m.value().data(), &[1.0, -2.0, 0.5]);
        assert!(vn_pool(pair, PoolMode::Max, PoolAxis::Points).is_err());
    }

    #[test]
    fn vn_invariant_of_zero_is_zero() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[4, 3, 6]));
        let w = tape.constant(init_matrix(3, 4, &mut ChaCha8Rng::seed_from_u64(0)));
        let inv = vn_invariant(f, w).unwrap();
        assert_eq!(inv.value().data(), &[0.0; 4]);
    }

    #[test]
    fn layers_are_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[4, 3, 20], &mut rng);
        let w = init_matrix(5, 4, &mut rng);
        let u = init_matrix(4, 4, &mut rng);
        let wi = init_matrix(3, 4, &mut rng);
        for seed in 0..20 {
            let r = random_rotation(seed);
            let run = |inp: &Tensor| {
                let tape = Tape::new();
                let f = tape.constant(inp.clone());
                let lin = vn_linear(f, tape.constant(w.clone())).unwrap().value();
                let relu = vn_relu(f, tape.constant(u.clone())).unwrap().value();
                let mean = vn_pool(f, PoolMode::Mean, PoolAxis::Points).unwrap().value();
                let max = vn_pool(f, PoolMode::Max, PoolAxis::Points).unwrap().value();
                let inv = vn_invariant(f, tape.constant(wi.clone())).unwrap().value();
                ((*lin).clone(), (*relu).clone(), (*mean).clone(), (*max).clone(), (*inv).clone())
            };
            let (l0, r0, m0, x0, i0) = run(&x);
            let (l1, r1, m1, x1, i1) = run(&rotate_feature(&x, &r));
            assert!(rel_residual(&rotate_feature(&l0, &r), &l1) < 1e-10);
            assert!(rel_residual(&rotate_feature(&r0, &r), &r1) < 1e-10);
            let m0 = m0.reshaped(&[4, 3, 1]).unwrap();
            let m1 = m1.reshaped(&[4, 3, 1]).unwrap();
            assert!(rel_residual(&rotate_feature(&m0, &r), &m1) < 1e-10);
            let x0 = x0.reshaped(&[4, 3, 1]).unwrap();
            let x1 = x1.reshaped(&[4, 3, 1]).unwrap();
            assert!(rel_residual(&rotate_feature(&x0, &r), &x1) < 1e-10);
            assert!(rel_residual(&i0, &i1) < 1e-6);
        }
    }

    #[test]
    fn edge_linear_matches_explicit_edge_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = cloud(24, 6);
        let knn = knn_indices(&p, 5).unwrap();
        let x = random_tensor(&[3, 3, 24], &mut rng);
        let w = init_matrix(4, 6, &mut rng);
        let tape = Tape::new();
        let f = tape.constant(x);
        let wv = tape.constant(w);
        let fast = edge_linear(f, &knn, wv).unwrap().value();
        let slow = vn_linear(edge_features(f, &knn).unwrap(), wv).unwrap().value();
        assert!(rel_residual(&slow, &fast) < 1e-12);
    }

    #[test]
    fn edge_conv_equivariance_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = cloud(32, 8);
        let knn = knn_indices(&p, 6).unwrap();
        let w = init_matrix(8, 2, &mut rng);
        let u = init_matrix(8, 8, &mut rng);
        let run = |cl: &PointCloud, table: &KnnTable| {
            let tape = Tape::new();
            let f = lift(&tape, cl).unwrap();
            (*vn_edge_conv(f, table, tape.constant(w.clone()), tape.constant(u.clone())).unwrap().value()).clone()
        };
        let base = run(&p, &knn);
        let r = random_rotation(9);
        let rotated = run(&p.rotate(&r), &knn);
        assert!(rel_residual(&rotate_feature(&base, &r), &rotated) < 1e-9);

        let perm: Vec<usize> = (0..32).map(|i| (i * 7) % 32).collect();
        let q = p.select(&perm);
        let knn_q = knn_indices(&q, 6).unwrap();
        let permuted = run(&q, &knn_q);
        let tape = Tape::new();
        let expect = tape.constant(base).index_select(2, &perm).unwrap().value();
        assert!(rel_residual(&expect, &permuted) < 1e-12);
    }

    #[test]
    fn edge_conv_on_identical_points_sees_only_the_center() {
        // identical per-point features make every f_j - f_i vanish, so the
        // difference half of the weights cannot influence the output
        let p = PointCloud::new(vec![[0.0; 3]; 5]);
        let knn = knn_indices(&p, 2).unwrap();
        let v = [0.4, -1.0, 2.0];
        let x = Tensor::new(vec![1, 3, 5], (0..15).map(|i| v[i / 5]).collect()).unwrap();
        let u = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let run = |w: [f64; 2]| {
            let tape = Tape::new();
            let w = tape.constant(Tensor::new(vec![1, 2], w.to_vec()).unwrap());
            (*vn_edge_conv(tape.constant(x.clone()), &knn, w, tape.constant(u.clone())).unwrap().value()).clone()
        };
        let a = run([1.5, 0.0]);
        let b = run([1.5, -3.0]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        for i in 0..5 {
            for d in 0..3 {
                assert!((a.data()[d * 5 + i] - 1.5 * v[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e = tape.constant(random_tensor(&[3, 3, 7], &mut rng));
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        assert_eq!(*fuse(ones, e).unwrap().value(), *e.value());
        let zeros = tape.constant(Tensor::zeros(&[3]));
        assert!(fuse(zeros, e).unwrap().value().data().iter().all(|&v| v == 0.0));
        let s = tape.constant(random_tensor(&[3], &mut rng));
        let r = random_rotation(11);
        let lhs = fuse(s, tape.constant(rotate_feature(&e.value(), &r))).unwrap().value();
        let rhs = rotate_feature(&fuse(s, e).unwrap().value(), &r);
        assert!(rel_residual(&lhs, &rhs) < 1e-15);
        assert!(fuse(tape.constant(Tensor::zeros(&[2])), e).is_err());
    }

    fn fd_check(inputs: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&vars);
        tape.backward(out).unwrap();
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let g = vars[k].grad().unwrap();
            for i in 0..x.len() {
                let eval = |d: f64| {
                    let tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, y)| {
                            let mut y = y.clone();
                            if j == k {
                                y.data_mut()[i] += d;
                            }
                            tape.constant(y)
                        })
                        .collect();
                    f(&vars).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {k}[{i}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[3, 3, 6], &mut rng);
        let k = random_tensor(&[3, 3, 6], &mut rng);
        let w = random_tensor(&[3, 3, 6], &mut rng);
        fd_check(&[x.clone(), k, w], |v| vn_relu_project(v[0], v[1]).unwrap().mul(v[2]).unwrap().sum_all().unwrap());
        let wi = random_tensor(&[3, 3], &mut rng);
        let c = random_tensor(&[3], &mut rng);
        fd_check(&[x.clone(), wi, c], |v| vn_invariant(v[0], v[1]).unwrap().mul(v[2]).unwrap().sum_all().unwrap());
        let p = cloud(6, 13);
        let knn = knn_indices(&p, 3).unwrap();
        let we = random_tensor(&[2, 6], &mut rng);
        let u = random_tensor(&[2, 2], &mut rng);
        let proj = random_tensor(&[2, 3, 6], &mut rng);
        fd_check(&[x, we, u, proj], |v| {
            vn_edge_conv(v[0], &knn, v[1], v[2]).unwrap().mul(v[3]).unwrap().sum_all().unwrap()
        });
    }
}
