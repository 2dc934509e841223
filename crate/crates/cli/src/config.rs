//! Run configuration: one JSON document, every field defaulted, unknown keys rejected.

use std::path::{Path, PathBuf};

use occpose::assembly::{AssemblyConfig, RefineConfig, RefineTrainConfig};
use occpose::detnet::{DetectorConfig, LossWeights, Supervision, TrainConfig};
use occpose::dsed::{DsedConfig, ReasonTrainConfig, ReasonerKind};
use occpose::experiment::{AblationConfig, EvalProtocol};
use occpose::synthbody::SceneConfig;
use occpose::targets::TargetConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Scene counts for the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSizes {
    pub train_scenes: usize,
    pub synthetic_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for AblationSizes {
    fn default() -> Self {
        let d = AblationConfig::default();
        Self {
            train_scenes: d.train_scenes,
            synthetic_scenes: d.synthetic_scenes,
            eval_scenes: d.eval_scenes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Training and inference run in f32; f64 is reserved for gradient checks.
    pub precision: Precision,
    pub scene: SceneConfig,
    pub targets: TargetConfig,
    pub label_supersample: usize,
    pub detector: DetectorConfig,
    pub detector_train: TrainConfig,
    pub supervision: Supervision,
    pub dsed: DsedConfig,
    pub reason_train: ReasonTrainConfig,
    pub reasoner: ReasonerKind,
    pub hourglass_depth: usize,
    pub weights: LossWeights,
    pub refine: RefineConfig,
    pub refine_train: RefineTrainConfig,
    pub assembly: AssemblyConfig,
    pub eval: EvalProtocol,
    pub ablation: AblationSizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            scene: a.scene,
            targets: a.targets,
            label_supersample: a.label_supersample,
            detector: a.detector,
            detector_train: a.detector_train,
            supervision: Supervision::Visible,
            dsed: a.dsed,
            reason_train: a.reason_train,
            reasoner: ReasonerKind::Dsed,
            hourglass_depth: a.hourglass_depth,
            weights: a.weights,
            refine: a.refine,
            refine_train: a.refine_train,
            assembly: a.assembly,
            eval: a.protocol,
            ablation: AblationSizes::default(),
        }
    }
}

impl RunConfig {
    /// Checks every section; errors name the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |key: &str, r: occpose::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        wrap("scene", self.scene.validate())?;
        wrap("targets", self.targets.validate())?;
        wrap("detector", self.detector.validate())?;
        wrap("detector_train", self.detector_train.validate())?;
        wrap("dsed", self.dsed.validate())?;
        wrap("reason_train.train", self.reason_train.train.validate())?;
        wrap("weights", self.weights.validate())?;
        wrap("assembly", self.assembly.validate())?;
        wrap("eval", self.eval.validate())?;
        if self.label_supersample == 0 {
            return Err(CliError::config("label_supersample", "must be at least 1"));
        }
        if self.hourglass_depth == 0 {
            return Err(CliError::config("hourglass_depth", "must be at least 1"));
        }
        if self.precision != Precision::F32 {
            return Err(CliError::config("precision", "only f32 is supported for training and inference"));
        }
        Ok(())
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            seed: self.seed,
            scene: self.scene.clone(),
            targets: self.targets,
            label_supersample: self.label_supersample,
            train_scenes: self.ablation.train_scenes,
            synthetic_scenes: self.ablation.synthetic_scenes,
            eval_scenes: self.ablation.eval_scenes,
            detector: self.detector,
            detector_train: self.detector_train,
            dsed: self.dsed.clone(),
            reason_train: self.reason_train,
            hourglass_depth: self.hourglass_depth,
            weights: self.weights,
            refine: self.refine,
            refine_train: self.refine_train,
            assembly: self.assembly,
            protocol: self.eval,
        }
    }
}

/// Writes `value` at a dotted `path`, refusing keys the defaults do not have.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(path, format!("{} is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(CliError::config(path, "unknown key"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

/// `key=value`; the value is parsed as JSON and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<(), CliError> {
    match over {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base
                    .as_object_mut()
                    .ok_or_else(|| CliError::config(prefix, "is not a section"))?
                    .get_mut(&k)
                    .ok_or_else(|| CliError::config(&key, "unknown key"))?;
                if v.is_object() && slot.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => Err(CliError::config(prefix, "config file must hold a JSON object")),
    }
}

/// Defaults, then the file (if any), then `key=value` overrides.
pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        let over: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config("<file>", format!("{}: {e}", path.display())))?;
        merge(&mut v, over, "")?;
    }
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(&path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reference text for every key with its default value.
pub fn documented_defaults() -> String {
    let mut s = serde_json::to_string_pretty(&RunConfig::default()).expect("defaults serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let d = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&documented_defaults()).unwrap();
        assert_eq!(back, d);
        d.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = load(None, &[("detector.widht".into(), Value::from(3))]).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "detector.widht"), "{err:?}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"scene": {"max_peeple": 2}}"#).unwrap();
        let err = load(Some(&p), &[]).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "scene.max_peeple"), "{err:?}");
    }

    #[test]
    fn bad_values_are_named() {
        let err = load(None, &[("detector_train.epochs".into(), Value::from("many"))]).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "detector_train.epochs"), "{err:?}");
        let err = load(None, &[("detector_train.epochs".into(), Value::from(0))]).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "detector_train"), "{err:?}");
    }

    #[test]
    fn overrides_apply() {
        let (k, v) = parse_override("scene.max_people=2").unwrap();
        let cfg = load(None, &[(k, v), parse_override("supervision=all").unwrap()]).unwrap();
        assert_eq!(cfg.scene.max_people, 2);
        assert_eq!(cfg.supervision, Supervision::All);
        assert!(parse_override("novalue").is_err());
    }
}
