//! Desk-scale ablation: detector with and without occlusion labels, and the
//! two reasoning networks on top of the label-trained detector.

use serde::{Deserialize, Serialize};

use crate::assembly::{infer_people, train_refine, AssemblyConfig, RefineConfig, RefineNet, RefineTrainConfig};
use crate::camera::Camera;
use crate::detnet::{clean_maps, root_samples, train_detector, DetSample, Detector, DetectorConfig, EpochLoss, LossWeights, Supervision, TrainConfig};
use crate::dsed::{train_reasoner, BatchLog, DsedConfig, ReasonSample, ReasonTrainConfig, Reasoner};
use crate::error::{validation, Result};
use crate::evalkit::{evaluate, joint_detection, AblationRow, DetectionTally, EvalReport, FrameEval, PeopleMode, PCK_THRESHOLD_MM};
use crate::io::dataset::scene_seed;
use crate::occlabel::{label_scene, OcclusionLabels, OCCLUDED, VISIBLE};
use crate::pose::Pose3D;
use crate::synthbody::raster::{rasterize, render_features};
use crate::synthbody::{sample_scene, SceneConfig};
use crate::targets::{build_targets, HeatmapSet, TargetBundle, TargetConfig};

pub const ROW_DET_NO_LABELS: &str = "Det w/o OccL";
pub const ROW_DET: &str = "Det";
pub const ROW_HOURGLASS: &str = "Det+Reason(Hg)";
pub const ROW_DSED: &str = "Det+Reason(DSED)";

/// How predictions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub pck_threshold_mm: f64,
    pub people: PeopleMode,
    /// Minimum keypoint-map value for a detection peak.
    pub detect_tau: f64,
    /// Occluded joints count as detected with a peak this close (cells).
    pub occluded_radius: f64,
    /// Visible joints count as localized with a peak this close (cells).
    pub visible_radius: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            pck_threshold_mm: PCK_THRESHOLD_MM,
            people: PeopleMode::All,
            detect_tau: 0.3,
            occluded_radius: 2.0,
            visible_radius: 1.0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.pck_threshold_mm > 0.0) || !(self.detect_tau > 0.0) || !(self.occluded_radius > 0.0) || !(self.visible_radius > 0.0) {
            return Err(validation!("evaluation thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub targets: TargetConfig,
    pub label_supersample: usize,
    /// Scenes rendered for detector training (also mode-1 reasoning batches).
    pub train_scenes: usize,
    /// Extra scenes used only as synthetic visible-map batches (mode 2).
    pub synthetic_scenes: usize,
    pub eval_scenes: usize,
    pub detector: DetectorConfig,
    pub detector_train: TrainConfig,
    pub dsed: DsedConfig,
    pub reason_train: ReasonTrainConfig,
    /// Downsampling depth of the parameter-matched hourglass reasoner.
    pub hourglass_depth: usize,
    pub weights: LossWeights,
    pub refine: RefineConfig,
    pub refine_train: RefineTrainConfig,
    pub assembly: AssemblyConfig,
    pub protocol: EvalProtocol,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            scene: SceneConfig::default(),
            targets: TargetConfig::default(),
            label_supersample: 4,
            train_scenes: 1200,
            synthetic_scenes: 1200,
            eval_scenes: 500,
            detector: DetectorConfig::default(),
            detector_train: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
            dsed: DsedConfig::default(),
            reason_train: ReasonTrainConfig {
                train: TrainConfig {
                    epochs: 12,
                    ..TrainConfig::default()
                },
                ..ReasonTrainConfig::default()
            },
            hourglass_depth: 3,
            weights: LossWeights::default(),
            refine: RefineConfig::default(),
            refine_train: RefineTrainConfig {
                epochs: 40,
                ..RefineTrainConfig::default()
            },
            assembly: AssemblyConfig::default(),
            protocol: EvalProtocol::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.targets.validate()?;
        self.detector.validate()?;
        self.detector_train.validate()?;
        self.dsed.validate()?;
        self.reason_train.train.validate()?;
        self.weights.validate()?;
        self.assembly.validate()?;
        self.protocol.validate()?;
        if self.label_supersample == 0 {
            return Err(validation!("label_supersample must be at least 1"));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(validation!("train_scenes and eval_scenes must be positive"));
        }
        Ok(())
    }
}

/// A rendered, labelled scene held in memory.
#[derive(Debug, Clone)]
pub struct LabelledScene {
    pub seed: u64,
    pub camera: Camera,
    pub features: ndarray::Array3<f32>,
    pub poses: Vec<Pose3D>,
    pub labels: OcclusionLabels,
    pub targets: TargetBundle,
}

/// Split seeds are derived from the experiment seed so splits never overlap.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    let tag = match split {
        "train" => 1,
        "synthetic" => 2,
        "eval" => 3,
        _ => 4,
    };
    scene_seed(seed, tag)
}

pub fn labelled_scene(seed: u64, scene_cfg: &SceneConfig, target_cfg: &TargetConfig, supersample: usize) -> Result<LabelledScene> {
    let scene = sample_scene(seed, scene_cfg)?;
    let features = render_features(&rasterize(&scene));
    let labels = label_scene(&scene, supersample)?;
    let poses: Vec<Pose3D> = scene.people.iter().map(|b| b.pose).collect();
    let targets = build_targets(&poses, &labels, &scene.camera, target_cfg)?;
    Ok(LabelledScene {
        seed,
        camera: scene.camera,
        features,
        poses,
        labels,
        targets,
    })
}

pub fn make_split(seed: u64, count: usize, cfg: &AblationConfig) -> Result<Vec<LabelledScene>> {
    (0..count)
        .map(|i| labelled_scene(scene_seed(seed, i), &cfg.scene, &cfg.targets, cfg.label_supersample))
        .collect()
}

pub fn detector_samples(scenes: &[LabelledScene], supervision: Supervision) -> Vec<DetSample> {
    scenes
        .iter()
        .map(|s| {
            let visible_only = supervision == Supervision::Visible;
            DetSample {
                features: s.features.clone(),
                target: if visible_only { s.targets.visible.clone() } else { s.targets.all.clone() },
                roots: root_samples(&s.poses, &s.labels, &s.camera, visible_only),
            }
        })
        .collect()
}

/// Cleaned detector maps, as used both for reasoning input and inference.
pub fn detect(det: &Detector, features: &ndarray::Array3<f32>) -> Result<HeatmapSet> {
    let mut m = det.predict(features)?;
    clean_maps(&mut m);
    Ok(m)
}

/// Scores for one method over an evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: String,
    pub report: EvalReport,
    pub occluded_detection: DetectionTally,
    pub visible_detection: DetectionTally,
}

impl MethodEval {
    pub fn row(&self) -> AblationRow {
        AblationRow {
            method: self.method.clone(),
            pck_rel: self.report.pck_rel,
            pck_occ: self.report.pck_occ,
            occ_detect: self.occluded_detection.rate(),
            vis_detect: self.visible_detection.rate(),
        }
    }
}

/// Runs detector (+ optional reasoner) + assembly on every scene and scores it.
pub fn evaluate_method(
    method: &str,
    det: &Detector,
    reasoner: Option<&Reasoner>,
    refine: Option<&RefineNet>,
    scenes: &[LabelledScene],
    assembly: &AssemblyConfig,
    protocol: &EvalProtocol,
) -> Result<MethodEval> {
    protocol.validate()?;
    let mut frames = Vec::with_capacity(scenes.len());
    let (mut occ, mut vis) = (DetectionTally::default(), DetectionTally::default());
    for s in scenes {
        let detected = detect(det, &s.features)?;
        let maps = match reasoner {
            Some(r) => r.reason_infer(&detected)?,
            None => detected.clone(),
        };
        occ.add(joint_detection(&maps, &s.poses, &s.labels, &s.camera, OCCLUDED, protocol.detect_tau, protocol.occluded_radius)?);
        vis.add(joint_detection(&maps, &s.poses, &s.labels, &s.camera, VISIBLE, protocol.detect_tau, protocol.visible_radius)?);
        let frame = infer_people(&maps, Some(&detected), &s.camera, assembly, refine)?;
        frames.push(FrameEval {
            preds: frame.people.iter().filter_map(|p| p.pose3d).collect(),
            gts: s.poses.clone(),
            labels: s.labels.clone(),
        });
    }
    let report = evaluate(&frames, protocol.pck_threshold_mm, protocol.people)?;
    Ok(MethodEval {
        method: method.into(),
        report,
        occluded_detection: occ,
        visible_detection: vis,
    })
}

/// Everything an ablation run produces.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub methods: Vec<MethodEval>,
    pub det_labels: Detector,
    pub det_no_labels: Detector,
    pub dsed: Reasoner,
    pub hourglass: Reasoner,
    pub refine: RefineNet,
    pub det_labels_history: Vec<EpochLoss>,
    pub det_no_labels_history: Vec<EpochLoss>,
    pub dsed_log: Vec<BatchLog>,
    pub hourglass_log: Vec<BatchLog>,
    pub refine_history: Vec<f64>,
    /// Wall-clock seconds per stage (not part of any deterministic output).
    pub timings: Vec<(String, f64)>,
}

impl AblationOutcome {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.methods.iter().map(MethodEval::row).collect()
    }

    pub fn method(&self, name: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Trains every model and scores the four rows.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        log::info!("{name} done in {:.1}s", clock.elapsed().as_secs_f64());
        clock = std::time::Instant::now();
    };

    // Splits are built just before use and dropped after, which keeps the
    // peak footprint near one split plus the synthetic targets.
    let train = make_split(split_seed(cfg.seed, "train"), cfg.train_scenes, cfg)?;
    lap("data (train)", &mut timings);

    let det_train = TrainConfig {
        seed: cfg.detector_train.seed ^ cfg.seed,
        ..cfg.detector_train
    };
    let samples = detector_samples(&train, Supervision::Visible);
    let (det_labels, det_labels_history) = train_detector(&samples, cfg.detector, &cfg.weights, &det_train)?;
    drop(samples);
    lap("detector (visible)", &mut timings);
    let samples = detector_samples(&train, Supervision::All);
    let (det_no_labels, det_no_labels_history) = train_detector(&samples, cfg.detector, &cfg.weights, &det_train)?;
    drop(samples);
    lap("detector (all joints)", &mut timings);

    let reason_samples = train
        .into_iter()
        .map(|s| {
            Ok(ReasonSample {
                detected: Some(detect(&det_labels, &s.features)?),
                targets: s.targets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let synthetic: Vec<TargetBundle> = (0..cfg.synthetic_scenes)
        .map(|i| {
            let seed = scene_seed(split_seed(cfg.seed, "synthetic"), i);
            labelled_scene(seed, &cfg.scene, &cfg.targets, cfg.label_supersample).map(|s| s.targets)
        })
        .collect::<Result<_>>()?;
    lap("data (reasoning)", &mut timings);
    let mut rcfg = cfg.reason_train;
    rcfg.train.seed ^= cfg.seed;
    let (dsed, dsed_log) = train_reasoner(Reasoner::new_dsed(cfg.dsed.clone(), rcfg.train.seed)?, &reason_samples, &synthetic, &cfg.weights, &rcfg)?;
    lap("reasoner (dsed)", &mut timings);
    let (hourglass, hourglass_log) = train_reasoner(
        Reasoner::new_hourglass(cfg.dsed.clone(), cfg.hourglass_depth, rcfg.train.seed)?,
        &reason_samples,
        &synthetic,
        &cfg.weights,
        &rcfg,
    )?;
    lap("reasoner (hourglass)", &mut timings);
    drop(reason_samples);
    drop(synthetic);

    let refine_train = RefineTrainConfig {
        seed: cfg.refine_train.seed ^ cfg.seed,
        ..cfg.refine_train
    };
    let (refine, refine_history) = train_refine(cfg.refine, &refine_train)?;
    lap("refine", &mut timings);

    let eval = make_split(split_seed(cfg.seed, "eval"), cfg.eval_scenes, cfg)?;
    lap("data (eval)", &mut timings);
    let p = &cfg.protocol;
    let a = &cfg.assembly;
    let methods = vec![
        evaluate_method(ROW_DET_NO_LABELS, &det_no_labels, None, Some(&refine), &eval, a, p)?,
        evaluate_method(ROW_DET, &det_labels, None, Some(&refine), &eval, a, p)?,
        evaluate_method(ROW_HOURGLASS, &det_labels, Some(&hourglass), Some(&refine), &eval, a, p)?,
        evaluate_method(ROW_DSED, &det_labels, Some(&dsed), Some(&refine), &eval, a, p)?,
    ];
    lap("evaluation", &mut timings);
    Ok(AblationOutcome {
        methods,
        det_labels,
        det_no_labels,
        dsed,
        hourglass,
        refine,
        det_labels_history,
        det_no_labels_history,
        dsed_log,
        hourglass_log,
        refine_history,
        timings,
    })
}

/// One directional comparison between two rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub name: String,
    pub better: f64,
    pub worse: f64,
    pub required_margin: f64,
    pub passed: bool,
}

fn check(name: &str, better: Option<f64>, worse: Option<f64>, margin: f64) -> DirectionalCheck {
    let (b, w) = (better.unwrap_or(f64::NAN), worse.unwrap_or(f64::NAN));
    DirectionalCheck {
        name: name.into(),
        better: b,
        worse: w,
        required_margin: margin,
        passed: if margin > 0.0 { b - w >= margin } else { b > w },
    }
}

/// The three directional claims: reasoning helps occluded joints, DSED beats the
/// hourglass, visible-only supervision helps visible joints.
pub fn directional_checks(out: &AblationOutcome) -> Vec<DirectionalCheck> {
    let get = |n: &str| out.method(n).map(MethodEval::row);
    let (Some(nl), Some(det), Some(hg), Some(dsed)) = (get(ROW_DET_NO_LABELS), get(ROW_DET), get(ROW_HOURGLASS), get(ROW_DSED)) else {
        return Vec::new();
    };
    vec![
        check("DSED reasoning vs detector alone, occluded detection (pp)", dsed.occ_detect, det.occ_detect, 10.0),
        check("DSED vs matched hourglass, occluded detection (pp)", dsed.occ_detect, hg.occ_detect, 5.0),
        check("visible-only vs all-joint supervision, visible localization", det.vis_detect, nl.vis_detect, 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AblationConfig {
        let mut cfg = AblationConfig {
            train_scenes: 4,
            synthetic_scenes: 4,
            eval_scenes: 3,
            label_supersample: 1,
            hourglass_depth: 2,
            ..AblationConfig::default()
        };
        cfg.detector.channels = 8;
        cfg.detector.stem_channels = 8;
        cfg.detector.hourglass_depth = 2;
        cfg.detector.stacks = 1;
        cfg.detector_train.epochs = 1;
        cfg.detector_train.batch_size = 2;
        cfg.dsed.channels = vec![8, 8];
        cfg.reason_train.train.epochs = 1;
        cfg.reason_train.train.batch_size = 2;
        cfg.refine_train.samples = 64;
        cfg.refine_train.epochs = 1;
        cfg
    }

    #[test]
    fn tiny_ablation_produces_four_rows() {
        let out = run_ablation(&tiny()).unwrap();
        let rows = out.rows();
        let names: Vec<_> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, [ROW_DET_NO_LABELS, ROW_DET, ROW_HOURGLASS, ROW_DSED]);
        assert_eq!(directional_checks(&out).len(), 3);
        assert!(out.dsed_log.iter().any(|b| b.mode == 1) && out.dsed_log.iter().any(|b| b.mode == 2));
        let counts = (out.dsed.inference_param_count(), out.hourglass.inference_param_count());
        assert!(counts.1 as f64 >= 0.8 * counts.0 as f64 && counts.1 as f64 <= 1.2 * counts.0 as f64, "{counts:?}");
    }

    #[test]
    fn splits_are_disjoint() {
        let s: std::collections::BTreeSet<_> = ["train", "synthetic", "eval"].iter().map(|n| split_seed(1, n)).collect();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn margin_check_is_strict_about_direction() {
        assert!(check("x", Some(20.0), Some(10.0), 10.0).passed);
        assert!(!check("x", Some(19.9), Some(10.0), 10.0).passed);
        assert!(!check("x", Some(5.0), Some(5.0), 0.0).passed);
        assert!(!check("x", None, Some(5.0), 0.0).passed);
    }
}
