use criterion::{black_box, criterion_group, criterion_main, Criterion};
use occpose::assembly::{infer_people, AssemblyConfig};
use occpose::detnet::{Detector, DetectorConfig};
use occpose::dsed::{DsedConfig, Reasoner};
use occpose::occlabel::{classify_joints, label_scene};
use occpose::synthbody::{rasterize, render_features, sample_scene, SceneConfig};
use occpose::targets::{build_targets, TargetConfig};
use occpose::Pose3D;

fn scene_stages(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    let scene = sample_scene(3, &cfg).unwrap();
    let masks = rasterize(&scene);
    let poses: Vec<Pose3D> = scene.people.iter().map(|b| b.pose).collect();
    let labels = classify_joints(&scene, &masks).unwrap();

    c.bench_function("sample_scene", |b| b.iter(|| sample_scene(black_box(3), &cfg).unwrap()));
    c.bench_function("rasterize", |b| b.iter(|| rasterize(black_box(&scene))));
    c.bench_function("render_features", |b| b.iter(|| render_features(black_box(&masks))));
    c.bench_function("label_scene x4", |b| b.iter(|| label_scene(black_box(&scene), 4).unwrap()));
    c.bench_function("build_targets", |b| {
        b.iter(|| build_targets(black_box(&poses), &labels, &scene.camera, &TargetConfig::default()).unwrap())
    });
}

fn network_stages(c: &mut Criterion) {
    let scene = sample_scene(5, &SceneConfig::default()).unwrap();
    let features = render_features(&rasterize(&scene));
    let det = Detector::new(DetectorConfig::default(), 1).unwrap();
    let maps = det.predict(&features).unwrap();
    let reasoner = Reasoner::new_dsed(DsedConfig::default(), 2).unwrap();
    let acfg = AssemblyConfig::default();

    let mut g = c.benchmark_group("networks");
    g.sample_size(10);
    g.bench_function("detector forward", |b| b.iter(|| det.predict(black_box(&features)).unwrap()));
    g.bench_function("dsed inference", |b| b.iter(|| reasoner.reason_infer(black_box(&maps)).unwrap()));
    g.finish();

    let poses: Vec<Pose3D> = scene.people.iter().map(|b| b.pose).collect();
    let labels = classify_joints(&scene, &rasterize(&scene)).unwrap();
    let perfect = build_targets(&poses, &labels, &scene.camera, &TargetConfig::default()).unwrap().all;
    c.bench_function("assembly on perfect maps", |b| {
        b.iter(|| infer_people(black_box(&perfect), None, &scene.camera, &acfg, None).unwrap())
    });
}

criterion_group!(benches, scene_stages, network_stages);
criterion_main!(benches);
