use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use marknerf::camera::CameraIntrinsics;
use marknerf::embedder::{embed, EmbedderModel};
use marknerf::nerf::{render_view, FieldConfig, RadianceField, SamplingConfig};
use marknerf::par;
use marknerf::synth::{orbit_pose, render_over_white, watermark};

fn bench_render(c: &mut Criterion) {
    let field = RadianceField::new(FieldConfig::desk(), 0).unwrap();
    let scfg = SamplingConfig { n_coarse: 32, n_fine: 32, ..SamplingConfig::default() };
    let intr = CameraIntrinsics::new(32, 32, 40.0).unwrap();
    let pose = orbit_pose(4.0, 30.0, 30.0).unwrap();
    let mut g = c.benchmark_group("render_view_32x32");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("strategy", "parallel"), |b| {
        b.iter(|| render_view(&field, &intr, &pose, &scfg, 2.0, 6.0).unwrap())
    });
    g.bench_function(BenchmarkId::new("strategy", "sequential"), |b| {
        b.iter(|| par::sequential(|| render_view(&field, &intr, &pose, &scfg, 2.0, 6.0).unwrap()))
    });
    g.finish();
}

fn bench_embed(c: &mut Criterion) {
    let model = EmbedderModel::new(0);
    let intr = CameraIntrinsics::new(64, 64, 80.0).unwrap();
    let host = render_over_white(&intr, &orbit_pose(4.0, 0.0, 30.0).unwrap(), 1);
    let w = watermark(64, 64);
    let mut g = c.benchmark_group("embed_64x64");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("strategy", "parallel"), |b| b.iter(|| embed(&model, &host, &w).unwrap()));
    g.bench_function(BenchmarkId::new("strategy", "sequential"), |b| {
        b.iter(|| par::sequential(|| embed(&model, &host, &w).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench_render, bench_embed);
criterion_main!(benches);
