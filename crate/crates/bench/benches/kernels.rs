use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use equipair::data::{self, ShapeParams, TaskKind};
use equipair::geometry::{self, PointCloud};
use equipair::model::{self, Branch, EncoderConfig, ModelParams};
use equipair::tensor::Tape;

fn lid_cloud() -> PointCloud {
    let params = ShapeParams::Lid {
        radius: 1.0,
        height: 1.5,
        wall: 0.1,
        lid_thickness: 0.08,
        plug_depth: 0.2,
    };
    data::generate_pair("bench".into(), TaskKind::Lid, &params, 1).unwrap().cloud_b
}

fn knn(c: &mut Criterion) {
    let cloud = lid_cloud();
    let mut group = c.benchmark_group("knn");
    for k in [10, 30] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| geometry::knn_indices(&cloud, k).unwrap())
        });
    }
    group.finish();
}

fn chamfer(c: &mut Criterion) {
    let p = lid_cloud();
    let q = p.rotate(&geometry::random_rotation(3));
    c.bench_function("chamfer_1024", |b| b.iter(|| geometry::chamfer(&p, &q).unwrap()));
}

fn forward_backward(c: &mut Criterion) {
    let cloud = lid_cloud();
    let mut group = c.benchmark_group("branch_b");
    group.sample_size(10);
    for points in [256, 1024] {
        let cfg = EncoderConfig {
            points,
            ..EncoderConfig::default()
        };
        let params = ModelParams::init(&cfg, Branch::B, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", points), &points, |b, _| {
            b.iter(|| model::predict_b(&cloud, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", points), &points, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let bound = params.bind(&tape);
                let pose = model::pose_b(&tape, &bound, &cfg, &cloud).unwrap();
                let loss = pose.translation.sum_all().unwrap().add(pose.rotation.sum_all().unwrap()).unwrap();
                tape.backward(loss).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, knn, chamfer, forward_backward);
criterion_main!(benches);
