//! Dataset directories: one array file plus one JSON sidecar per scene.
//!
//! ```text
//! <dir>/dataset.json              manifest
//! <dir>/scene_000000.safetensors  instance_map, part_map, depth_buffer, features (h, w[, c])
//! <dir>/scene_000000.json         sidecar: scene, poses, camera, seed, labels, target manifest
//! <dir>/scene_000000.targets.safetensors  cached target maps (h, w, c)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::tensorfile::{read_tensors, write_tensors, TensorData};
use crate::camera::Camera;
use crate::error::{validation, Error, Result};
use crate::occlabel::{label_scene, OcclusionLabels};
use crate::pose::Pose3D;
use crate::skeleton::{EDGES, JOINT_NAMES, TORSO};
use crate::synthbody::raster::{rasterize, render_features, MaskSet};
use crate::synthbody::{sample_scene, Scene, SceneConfig};
use crate::targets::{build_targets, HeatmapSet, SupportMask, TargetBundle, TargetConfig};

pub const DATASET_FORMAT: &str = "occpose-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.json";

/// Depth convention written into every sidecar so records are self-describing.
pub const DEPTH_NORMALIZATION: &str = "root maps store Z * heatmap_width / focal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scene_config: SceneConfig,
    /// Record stems in index order.
    pub records: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetManifest {
    pub file: String,
    pub layout: String,
    pub config: TargetConfig,
    /// Channel names of each stored array, in channel order.
    pub channels: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub index: usize,
    pub seed: u64,
    pub camera: Camera,
    pub depth_normalization: String,
    pub scene: Scene,
    pub poses: Vec<Pose3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<OcclusionLabels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_supersample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<TargetManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sidecar: Sidecar,
    pub masks: MaskSet,
    /// `[C, H, W]` in memory.
    pub features: Array3<f32>,
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step, so neighbouring datasets do not share scenes
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn record_stem(index: usize) -> String {
    format!("scene_{index:06}")
}

fn chw_to_hwc(a: &Array3<f32>) -> ArrayD<f32> {
    a.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned().into_dyn()
}

fn hwc_to_chw(a: ArrayD<f32>, name: &str) -> Result<Array3<f32>> {
    let a = a.into_dimensionality::<ndarray::Ix3>().map_err(|_| Error::Format(format!("{name}: expected a 3-d array")))?;
    Ok(a.permuted_axes([2, 0, 1]).as_standard_layout().into_owned())
}

fn to2<T: Clone>(a: ArrayD<T>, name: &str) -> Result<Array2<T>> {
    a.into_dimensionality().map_err(|_| Error::Format(format!("{name}: expected a 2-d array")))
}

fn take(m: &mut BTreeMap<String, TensorData>, name: &str) -> Result<TensorData> {
    m.remove(name).ok_or_else(|| Error::Format(format!("missing array {name}")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn sidecar_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn arrays_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.safetensors"))
}

pub fn targets_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.targets.safetensors"))
}

pub fn write_sidecar(dir: &Path, stem: &str, sidecar: &Sidecar) -> Result<()> {
    write_json(&sidecar_path(dir, stem), sidecar)
}

pub fn read_sidecar(dir: &Path, stem: &str) -> Result<Sidecar> {
    let s: Sidecar = read_json(&sidecar_path(dir, stem))?;
    if s.format != DATASET_FORMAT || s.version != DATASET_VERSION {
        return Err(Error::Format(format!("{stem}: unsupported record format {} v{}", s.format, s.version)));
    }
    Ok(s)
}

pub fn write_record(dir: &Path, stem: &str, record: &Record) -> Result<()> {
    let mut m = BTreeMap::new();
    m.insert("instance_map".into(), TensorData::I32(record.masks.instance_map.clone().into_dyn()));
    m.insert("part_map".into(), TensorData::U8(record.masks.part_map.clone().into_dyn()));
    m.insert("depth_buffer".into(), TensorData::F64(record.masks.depth_buffer.clone().into_dyn()));
    m.insert("features".into(), TensorData::F32(chw_to_hwc(&record.features)));
    write_tensors(&arrays_path(dir, stem), &m, "{\"layout\":\"hwc\"}")?;
    write_sidecar(dir, stem, &record.sidecar)
}

pub fn read_record(dir: &Path, stem: &str) -> Result<Record> {
    let sidecar = read_sidecar(dir, stem)?;
    let (mut m, _) = read_tensors(&arrays_path(dir, stem))?;
    let masks = MaskSet {
        instance_map: to2(take(&mut m, "instance_map")?.into_i32("instance_map")?, "instance_map")?,
        part_map: to2(take(&mut m, "part_map")?.into_u8("part_map")?, "part_map")?,
        depth_buffer: to2(take(&mut m, "depth_buffer")?.into_f64("depth_buffer")?, "depth_buffer")?,
    };
    let features = hwc_to_chw(take(&mut m, "features")?.into_f32("features")?, "features")?;
    let (w, h) = (sidecar.camera.width, sidecar.camera.height);
    if masks.width() != w || masks.height() != h || features.dim().1 != h || features.dim().2 != w {
        return Err(Error::Format(format!("{stem}: array size does not match the camera {w}x{h}")));
    }
    Ok(Record { sidecar, masks, features })
}

/// Builds one record from scratch.
pub fn make_record(index: usize, seed: u64, cfg: &SceneConfig) -> Result<Record> {
    let scene = sample_scene(seed, cfg)?;
    let masks = rasterize(&scene);
    let features = render_features(&masks);
    let sidecar = Sidecar {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        index,
        seed,
        camera: scene.camera,
        depth_normalization: DEPTH_NORMALIZATION.into(),
        poses: scene.people.iter().map(|b| b.pose).collect(),
        scene,
        labels: None,
        label_supersample: None,
        targets: None,
    };
    Ok(Record { sidecar, masks, features })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a dataset directory (no {MANIFEST_FILE})", dir.display()),
        )));
    }
    let m: DatasetManifest = read_json(&path)?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Writes `count` scenes into `dir` (created if needed).
pub fn generate_dataset(dir: &Path, seed: u64, count: usize, cfg: &SceneConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(validation!("count must be positive"));
    }
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let stem = record_stem(index);
        let record = make_record(index, scene_seed(seed, index), cfg)?;
        write_record(dir, &stem, &record)?;
        records.push(stem);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed,
        scene_config: cfg.clone(),
        records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Channel names for the three map kinds.
pub fn channel_names() -> BTreeMap<&'static str, Vec<String>> {
    let kp: Vec<String> = JOINT_NAMES.iter().map(|n| n.to_string()).collect();
    let paf: Vec<String> = EDGES
        .iter()
        .flat_map(|&(p, c)| ["x", "y", "dz"].map(|k| format!("{}-{}.{k}", JOINT_NAMES[p], JOINT_NAMES[c])))
        .collect();
    let root: Vec<String> = TORSO.iter().map(|&j| JOINT_NAMES[j].to_string()).collect();
    [("keypoints", kp), ("pafs", paf), ("root_depth", root)].into_iter().collect()
}

const BUNDLE_PARTS: [&str; 3] = ["all", "visible", "occluded"];

pub fn write_targets(dir: &Path, stem: &str, bundle: &TargetBundle) -> Result<BTreeMap<String, Vec<String>>> {
    let names = channel_names();
    let mut m = BTreeMap::new();
    let mut manifest = BTreeMap::new();
    for (part, set) in BUNDLE_PARTS.iter().zip([&bundle.all, &bundle.visible, &bundle.occluded]) {
        for (kind, a) in [("keypoints", &set.keypoints), ("pafs", &set.pafs), ("root_depth", &set.root_depth)] {
            let key = format!("{part}.{kind}");
            m.insert(key.clone(), TensorData::F32(chw_to_hwc(a)));
            manifest.insert(key, names[kind].clone());
        }
    }
    for (kind, a) in [("keypoints", &bundle.occluded_support.keypoints), ("pafs", &bundle.occluded_support.pafs)] {
        let key = format!("occluded_support.{kind}");
        m.insert(key.clone(), TensorData::F32(chw_to_hwc(a)));
        manifest.insert(key, names[kind].clone());
    }
    write_tensors(&targets_path(dir, stem), &m, "{\"layout\":\"hwc\"}")?;
    Ok(manifest)
}

pub fn read_targets(dir: &Path, stem: &str) -> Result<TargetBundle> {
    let (mut m, _) = read_tensors(&targets_path(dir, stem))?;
    let mut get = |key: String| -> Result<Array3<f32>> { hwc_to_chw(take(&mut m, &key)?.into_f32(&key)?, &key) };
    let mut sets = Vec::with_capacity(3);
    for part in BUNDLE_PARTS {
        sets.push(HeatmapSet {
            keypoints: get(format!("{part}.keypoints"))?,
            pafs: get(format!("{part}.pafs"))?,
            root_depth: get(format!("{part}.root_depth"))?,
        });
    }
    let occluded_support = SupportMask {
        keypoints: get("occluded_support.keypoints".into())?,
        pafs: get("occluded_support.pafs".into())?,
    };
    let occluded = sets.pop().expect("three sets");
    let visible = sets.pop().expect("three sets");
    let all = sets.pop().expect("three sets");
    Ok(TargetBundle { all, visible, occluded, occluded_support })
}

/// Labels every record and caches its targets; returns the label counts
/// `[truncated, occluded, visible]`.
pub fn label_dataset(dir: &Path, supersample: usize, target_cfg: &TargetConfig) -> Result<[usize; 3]> {
    target_cfg.validate()?;
    let manifest = read_manifest(dir)?;
    let mut counts = [0usize; 3];
    for stem in &manifest.records {
        let mut sidecar = read_sidecar(dir, stem)?;
        let labels = label_scene(&sidecar.scene, supersample)?;
        for (c, n) in counts.iter_mut().enumerate() {
            *n += labels.count(c as u8);
        }
        let bundle = build_targets(&sidecar.poses, &labels, &sidecar.camera, target_cfg)?;
        let channels = write_targets(dir, stem, &bundle)?;
        sidecar.labels = Some(labels);
        sidecar.label_supersample = Some(supersample);
        sidecar.targets = Some(TargetManifest {
            file: targets_path(Path::new(""), stem).display().to_string(),
            layout: "hwc".into(),
            config: *target_cfg,
            channels,
        });
        write_sidecar(dir, stem, &sidecar)?;
    }
    Ok(counts)
}

/// A fully labelled record in memory.
#[derive(Debug, Clone)]
pub struct LabelledRecord {
    pub record: Record,
    pub labels: OcclusionLabels,
    pub targets: TargetBundle,
}

/// Loads every record of a labelled dataset.
pub fn load_labelled(dir: &Path) -> Result<Vec<LabelledRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .iter()
        .map(|stem| {
            let record = read_record(dir, stem)?;
            let labels = record
                .sidecar
                .labels
                .clone()
                .ok_or_else(|| Error::Format(format!("{stem} has no labels; run labelgen first")))?;
            let targets = read_targets(dir, stem)?;
            Ok(LabelledRecord { record, labels, targets })
        })
        .collect()
}

/// Per-record stack along a new leading axis, handy for batch inspection.
pub fn stack_features(records: &[Record]) -> Result<ArrayD<f32>> {
    let views: Vec<_> = records.iter().map(|r| r.features.view()).collect();
    ndarray::stack(Axis(0), &views).map(|a| a.into_dyn()).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let rec = make_record(3, 99, &cfg).unwrap();
        write_record(dir.path(), "r", &rec).unwrap();
        let back = read_record(dir.path(), "r").unwrap();
        assert_eq!(back, rec);
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.masks.depth_buffer), bits(&rec.masks.depth_buffer));
        let first = std::fs::read(arrays_path(dir.path(), "r")).unwrap();
        write_record(dir.path(), "r", &back).unwrap();
        assert_eq!(first, std::fs::read(arrays_path(dir.path(), "r")).unwrap());
    }

    #[test]
    fn labelled_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), 5, 3, &SceneConfig::default()).unwrap();
        assert_eq!(m.records.len(), 3);
        label_dataset(dir.path(), 2, &TargetConfig::default()).unwrap();
        let recs = load_labelled(dir.path()).unwrap();
        for r in &recs {
            let s = &r.record.sidecar;
            assert_eq!(r.labels, label_scene(&s.scene, 2).unwrap());
            let t = build_targets(&s.poses, &r.labels, &s.camera, &TargetConfig::default()).unwrap();
            assert_eq!(t, r.targets);
            assert_eq!(s.targets.as_ref().unwrap().channels["all.pafs"].len(), 42);
        }
    }

    #[test]
    fn unlabelled_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 5, 1, &SceneConfig::default()).unwrap();
        assert!(matches!(load_labelled(dir.path()), Err(Error::Format(_))));
        assert!(matches!(read_manifest(&dir.path().join("nope")), Err(Error::Io(_))));
    }

    #[test]
    fn scene_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| scene_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
    }
}
