use std::collections::BTreeMap;
use std::path::Path;

use occpose::assembly::{infer_people, train_refine as fit_refine, FrameResult, Provenance, RefineNet, RefineTrainConfig, RootSource};
use occpose::camera::heatmap_to_image;
use occpose::detnet::{train_detector, Detector, TrainConfig};
use occpose::dsed::{train_reasoner, BatchLog, ReasonSample, Reasoner, ReasonerKind};
use occpose::evalkit::{ablation_csv, ablation_text};
use occpose::experiment::{detect, detector_samples, directional_checks, evaluate_method, run_ablation, LabelledScene, ROW_DET, ROW_DSED, ROW_HOURGLASS};
use occpose::io::dataset::{generate_dataset, label_dataset, load_labelled, read_manifest, read_record, LabelledRecord};
use occpose::skeleton::{JOINT_NAMES, NUM_JOINTS};
use occpose::Camera;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{read_loss_csv, require_dir, require_file, write_json, write_loss_csv, RunDir};
use crate::{plot as fig, Models, PlotScene};

pub const DETECTOR_FILE: &str = "detector.safetensors";
pub const REASONER_FILE: &str = "reasoner.safetensors";
pub const REFINE_FILE: &str = "refine.safetensors";

fn inputs(pairs: &[(&str, &Path)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn labelled(data: &Path) -> Result<Vec<LabelledScene>, CliError> {
    require_dir(data, "dataset")?;
    read_manifest(data)?;
    let recs = load_labelled(data)?;
    Ok(recs
        .into_iter()
        .map(|LabelledRecord { record, labels, targets }| LabelledScene {
            seed: record.sidecar.seed,
            camera: record.sidecar.camera,
            features: record.features,
            poses: record.sidecar.poses,
            labels,
            targets,
        })
        .collect())
}

fn load_detector(path: &Path) -> Result<Detector, CliError> {
    require_file(path, "detector checkpoint")?;
    Ok(Detector::load(path)?)
}

fn load_reasoner(path: Option<&Path>) -> Result<Option<Reasoner>, CliError> {
    path.map(|p| {
        require_file(p, "reasoner checkpoint")?;
        Ok(Reasoner::load(p)?)
    })
    .transpose()
}

fn load_refine(path: Option<&Path>) -> Result<Option<RefineNet>, CliError> {
    path.map(|p| {
        require_file(p, "refinement checkpoint")?;
        Ok(RefineNet::load(p)?)
    })
    .transpose()
}

pub fn synth_gen(cfg: &RunConfig, count: usize) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let out = &cfg.out_dir;
    let mut run = RunDir::create(out, "synth-gen", cfg, &[])?;
    let manifest = generate_dataset(out, cfg.seed, count, &cfg.scene)?;
    let (mut people, mut occluders) = (0, 0);
    for stem in &manifest.records {
        let s = occpose::io::dataset::read_sidecar(out, stem)?;
        people += s.scene.people.len();
        occluders += s.scene.occluders.len();
    }
    run.log(format!("wrote {count} scenes ({people} people, {occluders} occluders) to {}", out.display()))?;
    run.metrics(&json!({"scenes": count, "people": people, "occluders": occluders}))
}

pub fn labelgen(cfg: &RunConfig, data: &Path) -> Result<(), CliError> {
    require_dir(data, "dataset")?;
    read_manifest(data)?;
    let mut run = RunDir::create(&data.join("labelgen"), "labelgen", cfg, &inputs(&[("data", data)]))?;
    let counts = label_dataset(data, cfg.label_supersample, &cfg.targets)?;
    let total: usize = counts.iter().sum();
    let frac = counts[1] as f64 / total.max(1) as f64;
    run.log(format!("labels truncated/occluded/visible = {counts:?}, occluded fraction {frac:.4}"))?;
    run.metrics(&json!({
        "truncated": counts[0],
        "occluded": counts[1],
        "visible": counts[2],
        "occluded_fraction": frac,
        "label_supersample": cfg.label_supersample,
    }))
}

pub fn train_det(cfg: &RunConfig, data: &Path) -> Result<(), CliError> {
    let scenes = labelled(data)?;
    let mut run = RunDir::create(&cfg.out_dir, "train-det", cfg, &inputs(&[("data", data)]))?;
    let train = TrainConfig {
        seed: cfg.detector_train.seed ^ cfg.seed,
        ..cfg.detector_train
    };
    let samples = detector_samples(&scenes, cfg.supervision);
    run.log(format!("training detector on {} scenes, supervision {:?}", samples.len(), cfg.supervision))?;
    let (det, hist) = train_detector(&samples, cfg.detector, &cfg.weights, &train)?;
    det.save(&run.join(DETECTOR_FILE))?;
    let rows: Vec<(usize, &str, f64)> = hist
        .iter()
        .flat_map(|e| {
            let l = e.loss;
            [(e.epoch, "total", l.total), (e.epoch, "keypoints", l.keypoints), (e.epoch, "pafs", l.pafs), (e.epoch, "root", l.root)]
        })
        .collect();
    write_loss_csv(&run.join("loss.csv"), &rows)?;
    for e in &hist {
        run.log(format!("epoch {} loss {:.6}", e.epoch, e.loss.total))?;
    }
    run.metrics(&json!({
        "parameters": det.params.num_scalars(),
        "supervision": cfg.supervision,
        "final_loss": hist.last().map(|e| e.loss),
    }))
}

fn schedule_csv(path: &Path, log: &[BatchLog]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for b in log {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

fn epoch_means(log: &[BatchLog]) -> Vec<(usize, &'static str, f64)> {
    let mut acc: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for b in log {
        let e = acc.entry(b.epoch).or_default();
        for (s, v) in e.0.iter_mut().zip([b.loss, b.teacher, b.occ, b.extract]) {
            *s += v;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .flat_map(|(epoch, (s, n))| {
            ["total", "teacher", "occ", "extract"].into_iter().zip(s).map(move |(t, v)| (epoch, t, v / n as f64))
        })
        .collect()
}

pub fn train_dsed(cfg: &RunConfig, data: &Path, detector: &Path, synthetic: Option<&Path>) -> Result<(), CliError> {
    let det = load_detector(detector)?;
    let scenes = labelled(data)?;
    let syn = match synthetic {
        Some(p) => labelled(p)?.into_iter().map(|s| s.targets).collect(),
        None => scenes.iter().map(|s| s.targets.clone()).collect::<Vec<_>>(),
    };
    let mut ins = vec![("data", data), ("detector", detector)];
    if let Some(p) = synthetic {
        ins.push(("synthetic", p));
    }
    let mut run = RunDir::create(&cfg.out_dir, "train-dsed", cfg, &inputs(&ins))?;
    let samples = scenes
        .iter()
        .map(|s| {
            Ok(ReasonSample {
                detected: Some(detect(&det, &s.features)?),
                targets: s.targets.clone(),
            })
        })
        .collect::<occpose::Result<Vec<_>>>()?;
    drop(scenes);
    let mut rcfg = cfg.reason_train;
    rcfg.train.seed ^= cfg.seed;
    let model = match cfg.reasoner {
        ReasonerKind::Dsed => Reasoner::new_dsed(cfg.dsed.clone(), rcfg.train.seed)?,
        ReasonerKind::Hourglass => Reasoner::new_hourglass(cfg.dsed.clone(), cfg.hourglass_depth, rcfg.train.seed)?,
    };
    run.log(format!(
        "training {:?} reasoner ({} inference parameters) on {} detector samples and {} synthetic samples, schedule {:?}",
        cfg.reasoner,
        model.inference_param_count(),
        samples.len(),
        syn.len(),
        rcfg.schedule
    ))?;
    let (model, log) = train_reasoner(model, &samples, &syn, &cfg.weights, &rcfg)?;
    model.save(&run.join(REASONER_FILE))?;
    schedule_csv(&run.join("schedule.csv"), &log)?;
    let means = epoch_means(&log);
    write_loss_csv(&run.join("loss.csv"), &means)?;
    for (e, t, v) in means.iter().filter(|r| r.1 == "total") {
        run.log(format!("epoch {e} {t} {v:.6}"))?;
    }
    run.metrics(&json!({
        "kind": model.kind(),
        "inference_parameters": model.inference_param_count(),
        "batches": log.len(),
        "mode1_batches": log.iter().filter(|b| b.mode == 1).count(),
        "mode2_batches": log.iter().filter(|b| b.mode == 2).count(),
        "final_batch": log.last(),
    }))
}

pub fn train_refine(cfg: &RunConfig) -> Result<(), CliError> {
    let mut run = RunDir::create(&cfg.out_dir, "train-refine", cfg, &[])?;
    let train = RefineTrainConfig {
        seed: cfg.refine_train.seed ^ cfg.seed,
        ..cfg.refine_train
    };
    let (net, hist) = fit_refine(cfg.refine, &train)?;
    net.save(&run.join(REFINE_FILE))?;
    let rows: Vec<_> = hist.iter().enumerate().map(|(e, &v)| (e, "total", v)).collect();
    write_loss_csv(&run.join("loss.csv"), &rows)?;
    run.log(format!("refinement loss {:?} -> {:?}", hist.first(), hist.last()))?;
    run.metrics(&json!({"final_loss": hist.last(), "epochs": hist.len()}))
}

#[derive(Serialize)]
struct JointOut {
    name: &'static str,
    u: Option<f64>,
    v: Option<f64>,
    z: Option<f64>,
    provenance: Provenance,
    confidence: f64,
}

#[derive(Serialize)]
struct PersonOut {
    joints: Vec<JointOut>,
    root_depth_mm: Option<f64>,
    root_source: Option<RootSource>,
    pose3d: Option<occpose::Pose3D>,
}

fn frame_json(scene: &str, frame: &FrameResult) -> serde_json::Value {
    let people: Vec<PersonOut> = frame
        .people
        .iter()
        .map(|p| PersonOut {
            joints: (0..NUM_JOINTS)
                .map(|j| JointOut {
                    name: JOINT_NAMES[j],
                    u: p.joints2d[j].map(|(x, _)| heatmap_to_image(x)),
                    v: p.joints2d[j].map(|(_, y)| heatmap_to_image(y)),
                    z: p.pose3d.map(|q| q.joints[j].z),
                    provenance: p.provenance[j],
                    confidence: p.confidences[j],
                })
                .collect(),
            root_depth_mm: p.root_depth_mm,
            root_source: p.root_source,
            pose3d: p.pose3d,
        })
        .collect();
    json!({"scene": scene, "people": people, "diagnostics": frame.diagnostics})
}

fn run_frame(
    det: &Detector,
    reasoner: Option<&Reasoner>,
    refine: Option<&RefineNet>,
    features: &ndarray::Array3<f32>,
    camera: &Camera,
    cfg: &RunConfig,
) -> Result<(occpose::targets::HeatmapSet, occpose::targets::HeatmapSet, FrameResult), CliError> {
    let detected = detect(det, features)?;
    let maps = match reasoner {
        Some(r) => r.reason_infer(&detected)?,
        None => detected.clone(),
    };
    let frame = infer_people(&maps, Some(&detected), camera, &cfg.assembly, refine)?;
    Ok((detected, maps, frame))
}

fn model_inputs<'a>(m: &'a Models) -> Vec<(&'static str, &'a Path)> {
    let mut v = vec![("data", m.data.as_path()), ("detector", m.detector.as_path())];
    if let Some(p) = &m.reasoner {
        v.push(("reasoner", p));
    }
    if let Some(p) = &m.refine {
        v.push(("refine", p));
    }
    v
}

pub fn infer(cfg: &RunConfig, m: &Models) -> Result<(), CliError> {
    require_dir(&m.data, "dataset")?;
    let manifest = read_manifest(&m.data)?;
    let det = load_detector(&m.detector)?;
    let reasoner = load_reasoner(m.reasoner.as_deref())?;
    let refine = load_refine(m.refine.as_deref())?;
    let mut run = RunDir::create(&cfg.out_dir, "infer", cfg, &inputs(&model_inputs(m)))?;
    let frames_dir = run.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let mut people = 0;
    for stem in &manifest.records {
        let rec = read_record(&m.data, stem)?;
        let (_, _, frame) = run_frame(&det, reasoner.as_ref(), refine.as_ref(), &rec.features, &rec.sidecar.camera, cfg)?;
        people += frame.people.len();
        write_json(&frames_dir.join(format!("{stem}.json")), &frame_json(stem, &frame))?;
    }
    run.log(format!("{} frames, {people} people", manifest.records.len()))?;
    run.metrics(&json!({"frames": manifest.records.len(), "people": people}))
}

fn method_name(reasoner: Option<&Reasoner>) -> &'static str {
    match reasoner.map(Reasoner::kind) {
        None => ROW_DET,
        Some(ReasonerKind::Dsed) => ROW_DSED,
        Some(ReasonerKind::Hourglass) => ROW_HOURGLASS,
    }
}

pub fn eval(cfg: &RunConfig, m: &Models) -> Result<(), CliError> {
    let scenes = labelled(&m.data)?;
    let det = load_detector(&m.detector)?;
    let reasoner = load_reasoner(m.reasoner.as_deref())?;
    let refine = load_refine(m.refine.as_deref())?;
    let mut run = RunDir::create(&cfg.out_dir, "eval", cfg, &inputs(&model_inputs(m)))?;
    let name = method_name(reasoner.as_ref());
    let res = evaluate_method(name, &det, reasoner.as_ref(), refine.as_ref(), &scenes, &cfg.assembly, &cfg.eval)?;
    run.log(ablation_text(&[res.row()]))?;
    run.metrics(&res)
}

pub fn ablate(cfg: &RunConfig, suite: &str) -> Result<(), CliError> {
    if suite != "table3" {
        return Err(CliError::Usage(format!("unknown suite {suite:?}; available: table3")));
    }
    let mut run = RunDir::create(&cfg.out_dir, "ablate", cfg, &[])?;
    let acfg = cfg.ablation_config();
    run.log(format!(
        "ablation: {} train, {} synthetic, {} eval scenes",
        acfg.train_scenes, acfg.synthetic_scenes, acfg.eval_scenes
    ))?;
    let out = run_ablation(&acfg)?;
    out.det_labels.save(&run.join("detector_visible.safetensors"))?;
    out.det_no_labels.save(&run.join("detector_all.safetensors"))?;
    out.dsed.save(&run.join("reasoner_dsed.safetensors"))?;
    out.hourglass.save(&run.join("reasoner_hourglass.safetensors"))?;
    out.refine.save(&run.join(REFINE_FILE))?;
    for (name, hist) in [("detector_visible", &out.det_labels_history), ("detector_all", &out.det_no_labels_history)] {
        let rows: Vec<_> = hist.iter().flat_map(|e| [(e.epoch, "total", e.loss.total), (e.epoch, "keypoints", e.loss.keypoints), (e.epoch, "pafs", e.loss.pafs), (e.epoch, "root", e.loss.root)]).collect();
        write_loss_csv(&run.join(&format!("{name}_loss.csv")), &rows)?;
    }
    for (name, log) in [("reasoner_dsed", &out.dsed_log), ("reasoner_hourglass", &out.hourglass_log)] {
        schedule_csv(&run.join(&format!("{name}_schedule.csv")), log)?;
        write_loss_csv(&run.join(&format!("{name}_loss.csv")), &epoch_means(log))?;
    }
    let rows: Vec<_> = out.refine_history.iter().enumerate().map(|(e, &v)| (e, "total", v)).collect();
    write_loss_csv(&run.join("refine_loss.csv"), &rows)?;
    let table = out.rows();
    std::fs::write(run.join("table3.csv"), ablation_csv(&table))?;
    std::fs::write(run.join("table3.txt"), ablation_text(&table))?;
    let checks = directional_checks(&out);
    run.log(ablation_text(&table))?;
    for c in &checks {
        run.log(format!("{}: {:.2} vs {:.2} (margin {}) -> {}", c.name, c.better, c.worse, c.required_margin, if c.passed { "PASS" } else { "FAIL" }))?;
    }
    let timings: BTreeMap<_, _> = out.timings.iter().cloned().collect();
    write_json(&run.join("timings.json"), &timings)?;
    run.metrics(&json!({
        "methods": out.methods,
        "checks": checks,
        "inference_parameters": {"dsed": out.dsed.inference_param_count(), "hourglass": out.hourglass.inference_param_count()},
    }))
}

pub fn plot(cfg: &RunConfig, run_dir: Option<&Path>, scene: &PlotScene) -> Result<(), CliError> {
    if run_dir.is_none() && scene.data.is_none() {
        return Err(CliError::Usage("plot needs --run and/or --data with --detector".into()));
    }
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if let Some(dir) = run_dir {
        require_dir(dir, "run directory")?;
        let mut names: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for name in names.iter().filter(|n| n.ends_with("loss.csv")) {
            let rows = read_loss_csv(&dir.join(name))?;
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (e, t, v) in rows {
                series.entry(t).or_default().push((e as f64, v));
            }
            let png = out.join(name.replace(".csv", ".png"));
            fig::loss_curves(&series.into_iter().collect::<Vec<_>>(), &png)?;
            written.push(png);
        }
        for name in names.iter().filter(|n| n.ends_with("schedule.csv")) {
            let mut r = csv::Reader::from_path(dir.join(name))?;
            let mut by_mode: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (step, b) in r.deserialize::<BatchLog>().enumerate() {
                let b = b?;
                by_mode.entry(format!("mode{}", b.mode)).or_default().push((step as f64, b.loss));
            }
            let png = out.join(name.replace(".csv", ".png"));
            fig::loss_curves(&by_mode.into_iter().collect::<Vec<_>>(), &png)?;
            written.push(png);
        }
    }
    if let (Some(data), Some(detector)) = (&scene.data, &scene.detector) {
        require_dir(data, "dataset")?;
        let manifest = read_manifest(data)?;
        let stem = manifest
            .records
            .get(scene.index)
            .ok_or_else(|| CliError::Usage(format!("--index {} is out of range ({} records)", scene.index, manifest.records.len())))?;
        let rec = read_record(data, stem)?;
        let det = load_detector(detector)?;
        let reasoner = load_reasoner(scene.reasoner.as_deref())?;
        let (detected, maps, frame) = run_frame(&det, reasoner.as_ref(), None, &rec.features, &rec.sidecar.camera, cfg)?;
        let p = out.join(format!("{stem}_detected.png"));
        fig::heatmap_overlay(&rec.features, &detected, &p)?;
        written.push(p);
        if reasoner.is_some() {
            let p = out.join(format!("{stem}_reasoned.png"));
            fig::heatmap_overlay(&rec.features, &maps, &p)?;
            written.push(p);
        }
        let preds: Vec<_> = frame.people.iter().filter_map(|p| p.pose3d).collect();
        let j2d: Vec<_> = frame.people.iter().map(|p| p.joints2d).collect();
        let p = out.join(format!("{stem}_skeletons.png"));
        fig::skeletons(&rec.features, &rec.sidecar.camera, &rec.sidecar.poses, &preds, &j2d, &p)?;
        written.push(p);
    }
    for p in &written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
