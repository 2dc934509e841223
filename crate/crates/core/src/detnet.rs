//! Stacked-hourglass detector: rendered features in, keypoint / PAF /
//! root-depth maps out at stride 4, one full set per stack.

use std::path::Path;

use ndarray::{s, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{image_to_heatmap, Camera, STRIDE};
use crate::error::{validation, Error, Result};
use crate::nn::params::{load_into, read_checkpoint_meta, save_checkpoint, uniform};
use crate::nn::{cst, Adam, AdamConfig, Conv, Graph, ParamSet, Scalar, Var};
use crate::occlabel::{OcclusionLabels, VISIBLE};
use crate::pose::Pose3D;
use crate::skeleton::{NUM_JOINTS, NUM_TORSO, TORSO};
use crate::targets::{HeatmapSet, PAF_CHANNELS};

pub const HEAD_CHANNELS: usize = NUM_JOINTS + PAF_CHANNELS + NUM_TORSO;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub stacks: usize,
    pub input_channels: usize,
    /// Width of the first (full-resolution) stem convolution.
    pub stem_channels: usize,
    /// Width of every hourglass layer.
    pub channels: usize,
    /// Number of 2x downsamplings inside each hourglass.
    pub hourglass_depth: usize,
    /// Raw PAF depth outputs are multiplied by this (mm).
    pub paf_depth_scale: f64,
    /// Raw root outputs are multiplied by this (normalised depth units).
    pub root_scale: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            input_channels: crate::synthbody::raster::NUM_FEATURE_CHANNELS,
            stem_channels: 16,
            channels: 32,
            hourglass_depth: 3,
            paf_depth_scale: 100.0,
            root_scale: 1000.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.input_channels == 0 || self.stem_channels == 0 || self.channels == 0 {
            return Err(validation!("detector stacks and channel widths must be positive"));
        }
        if self.hourglass_depth == 0 || self.hourglass_depth > 6 {
            return Err(validation!("hourglass_depth must be in 1..=6, got {}", self.hourglass_depth));
        }
        if !(self.paf_depth_scale > 0.0) || !(self.root_scale > 0.0) {
            return Err(validation!("output scales must be positive"));
        }
        Ok(())
    }
}

/// Every loss weight used by the detector and the reasoning module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lam_k_vis: f64,
    pub lam_p_vis: f64,
    pub lam_r_vis: f64,
    pub lam_k_all: f64,
    pub lam_p_all: f64,
    pub lam_k_occ: f64,
    pub lam_p_occ: f64,
    pub omega_extract: f64,
    /// PAF depth residuals are measured in units of this many mm; 1 gives plain mm.
    pub paf_depth_unit_mm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lam_k_vis: 1.0,
            lam_p_vis: 1.0,
            lam_r_vis: 0.1,
            lam_k_all: 1.0,
            lam_p_all: 1.0,
            lam_k_occ: 1.0,
            lam_p_occ: 1.0,
            omega_extract: 1.0,
            paf_depth_unit_mm: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lam_k_vis,
            self.lam_p_vis,
            self.lam_r_vis,
            self.lam_k_all,
            self.lam_p_all,
            self.lam_k_occ,
            self.lam_p_occ,
            self.omega_extract,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(validation!("loss weights must be finite and non-negative"));
        }
        if !(self.paf_depth_unit_mm > 0.0) {
            return Err(validation!("paf_depth_unit_mm must be positive"));
        }
        Ok(())
    }

    /// Per-channel weights applied inside the PAF squared error.
    pub fn paf_channel_weights<T: Scalar>(&self, h: usize, w: usize) -> ArrayD<T> {
        let zw = 1.0 / (self.paf_depth_unit_mm * self.paf_depth_unit_mm);
        ArrayD::from_shape_fn(IxDyn(&[PAF_CHANNELS, h, w]), |i| cst(if i[0] % 3 == 2 { zw } else { 1.0 }))
    }
}

/// Parameter ids of one hourglass (recursive, innermost last).
#[derive(Debug, Clone)]
struct Hourglass {
    /// Per level: (skip, down, up) convolutions.
    levels: Vec<(Conv, Conv, Conv)>,
    bottom: Conv,
}

impl Hourglass {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, depth: usize) -> Self {
        let levels = (0..depth)
            .map(|d| {
                (
                    Conv::new(ps, rng, &format!("{name}.l{d}.skip"), c, c, 3),
                    Conv::new(ps, rng, &format!("{name}.l{d}.down"), c, c, 3),
                    Conv::new(ps, rng, &format!("{name}.l{d}.up"), c, c, 3),
                )
            })
            .collect();
        let bottom = Conv::new(ps, rng, &format!("{name}.bottom"), c, c, 3);
        Self { levels, bottom }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, level: usize) -> Var {
        let (skip, down, up) = &self.levels[level];
        let s = skip.forward_relu(g, ps, x);
        let p = g.avg_pool2(x);
        let d = down.forward_relu(g, ps, p);
        let inner = if level + 1 < self.levels.len() {
            self.forward(g, ps, d, level + 1)
        } else {
            self.bottom.forward_relu(g, ps, d)
        };
        let u = up.forward_relu(g, ps, inner);
        let u = g.upsample2(u);
        g.add(s, u)
    }
}

#[derive(Debug, Clone)]
struct Stack {
    hourglass: Hourglass,
    post: Conv,
    head: Conv,
    /// Maps features and raw heads back into the next stack's input.
    merge_features: Option<Conv>,
    merge_heads: Option<Conv>,
}

/// Parameter layout of the detector; the values live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct DetectorLayout {
    pub cfg: DetectorConfig,
    stem: [Conv; 3],
    stacks: Vec<Stack>,
}

/// Output variables of one stack.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub keypoints: Var,
    pub pafs: Var,
    pub root: Var,
}

impl DetectorLayout {
    pub fn new<T: Scalar>(cfg: DetectorConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let c = cfg.channels;
        let stem = [
            Conv::new(&mut ps, &mut rng, "stem0", cfg.input_channels, cfg.stem_channels, 3),
            Conv::new(&mut ps, &mut rng, "stem1", cfg.stem_channels, c, 3),
            Conv::new(&mut ps, &mut rng, "stem2", c, c, 3),
        ];
        let stacks = (0..cfg.stacks)
            .map(|si| {
                let hourglass = Hourglass::new(&mut ps, &mut rng, &format!("s{si}.hg"), c, cfg.hourglass_depth);
                let post = Conv::new(&mut ps, &mut rng, &format!("s{si}.post"), c, c, 3);
                let head = Conv::new(&mut ps, &mut rng, &format!("s{si}.head"), c, HEAD_CHANNELS, 1);
                // small head weights keep initial outputs near zero
                ps.values[head.w] = uniform(&mut rng, &[HEAD_CHANNELS, c, 1, 1], 0.01);
                let last = si + 1 == cfg.stacks;
                let merge_features = (!last).then(|| Conv::new(&mut ps, &mut rng, &format!("s{si}.mf"), c, c, 1));
                let merge_heads = (!last).then(|| Conv::new(&mut ps, &mut rng, &format!("s{si}.mh"), HEAD_CHANNELS, c, 1));
                Stack {
                    hourglass,
                    post,
                    head,
                    merge_features,
                    merge_heads,
                }
            })
            .collect();
        Ok((Self { cfg, stem, stacks }, ps))
    }

    fn head_scales<T: Scalar>(&self, h: usize, w: usize) -> ArrayD<T> {
        ArrayD::from_shape_fn(IxDyn(&[HEAD_CHANNELS, h, w]), |i| {
            let c = i[0];
            cst(if c < NUM_JOINTS {
                1.0
            } else if c < NUM_JOINTS + PAF_CHANNELS {
                if (c - NUM_JOINTS) % 3 == 2 {
                    self.cfg.paf_depth_scale
                } else {
                    1.0
                }
            } else {
                self.cfg.root_scale
            })
        })
    }

    /// Records the forward pass of a `[C, H, W]` input; returns one head set per stack.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Vec<HeadVars>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.input_channels {
            return Err(validation!("detector expects [{}, H, W] input, got {shape:?}", self.cfg.input_channels));
        }
        let div = STRIDE << self.cfg.hourglass_depth;
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(validation!("input size {}x{} must be divisible by {div}", shape[1], shape[2]));
        }
        let y = self.stem[0].forward_relu(g, ps, x);
        let y = g.avg_pool2(y);
        let y = self.stem[1].forward_relu(g, ps, y);
        let y = g.avg_pool2(y);
        let mut cur = self.stem[2].forward_relu(g, ps, y);
        let (h, w) = (shape[1] / STRIDE, shape[2] / STRIDE);
        let scales = self.head_scales::<T>(h, w);
        let mut outs = Vec::with_capacity(self.stacks.len());
        for st in &self.stacks {
            let f = st.hourglass.forward(g, ps, cur, 0);
            let f = st.post.forward_relu(g, ps, f);
            let raw = st.head.forward(g, ps, f);
            let scaled = g.mul_const(raw, scales.clone());
            outs.push(HeadVars {
                keypoints: g.slice_channels(scaled, 0, NUM_JOINTS),
                pafs: g.slice_channels(scaled, NUM_JOINTS, PAF_CHANNELS),
                root: g.slice_channels(scaled, NUM_JOINTS + PAF_CHANNELS, NUM_TORSO),
            });
            if let (Some(mf), Some(mh)) = (&st.merge_features, &st.merge_heads) {
                let a = mf.forward(g, ps, f);
                let b = mh.forward(g, ps, raw);
                let merged = g.add(a, b);
                cur = g.add(cur, merged);
            }
        }
        Ok(outs)
    }
}

/// A ground-truth root-depth sample: torso slot, heatmap cell, normalised depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootSample {
    pub torso: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Root-depth supervision points: torso joints in view (and visible, if asked),
/// at their nearest heatmap cell.
pub fn root_samples(poses: &[Pose3D], labels: &OcclusionLabels, camera: &Camera, visible_only: bool) -> Vec<RootSample> {
    let (w, h) = camera.heatmap_size();
    let mut out = Vec::new();
    for (pose, row) in poses.iter().zip(&labels.labels) {
        for (t, &j) in TORSO.iter().enumerate() {
            let keep = if visible_only { row[j] == VISIBLE } else { row[j] != crate::occlabel::TRUNCATED };
            if !keep {
                continue;
            }
            let Ok(px) = camera.project(pose.joints[j]) else { continue };
            if !camera.in_image(px) {
                continue;
            }
            let col = image_to_heatmap(px.0).round().clamp(0.0, (w - 1) as f64) as usize;
            let r = image_to_heatmap(px.1).round().clamp(0.0, (h - 1) as f64) as usize;
            out.push(RootSample {
                torso: t,
                row: r,
                col,
                value: camera.encode_depth(pose.joints[j].z),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VisLossBreakdown {
    pub total: f64,
    pub keypoints: f64,
    pub pafs: f64,
    pub root: f64,
}

fn to_t<T: Scalar>(a: &Array3<f32>) -> ArrayD<T> {
    a.mapv(|v| cst::<T>(v as f64)).into_dyn()
}

/// Detector loss summed over stacks: squared error on keypoints and PAFs
/// against `target`, L1 on root depth at the sampled cells.
pub fn loss_vis<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[HeadVars],
    target: &HeatmapSet,
    roots: &[RootSample],
    weights: &LossWeights,
) -> Result<(Var, VisLossBreakdown)> {
    weights.validate()?;
    let (h, w) = target.dims();
    let kt = to_t::<T>(&target.keypoints);
    let pt = to_t::<T>(&target.pafs);
    let pw = weights.paf_channel_weights::<T>(h, w);
    let mut terms = Vec::new();
    let mut br = VisLossBreakdown::default();
    for hv in preds {
        if g.value(hv.keypoints).shape() != kt.shape() {
            return Err(validation!(
                "prediction shape {:?} does not match targets {:?}",
                g.value(hv.keypoints).shape(),
                kt.shape()
            ));
        }
        let lk = g.sq_err(hv.keypoints, kt.clone(), None);
        let lp = g.sq_err(hv.pafs, pt.clone(), Some(pw.clone()));
        let at: Vec<[usize; 3]> = roots.iter().map(|r| [r.torso, r.row, r.col]).collect();
        let vals: Vec<T> = roots.iter().map(|r| cst(r.value)).collect();
        let lr = g.abs_err_at(hv.root, at, vals);
        br.keypoints += g.scalar(lk).to_f64().unwrap_or(f64::NAN);
        br.pafs += g.scalar(lp).to_f64().unwrap_or(f64::NAN);
        br.root += g.scalar(lr).to_f64().unwrap_or(f64::NAN);
        let a = g.scale(lk, cst(weights.lam_k_vis));
        let b = g.scale(lp, cst(weights.lam_p_vis));
        let c = g.scale(lr, cst(weights.lam_r_vis));
        terms.extend([a, b, c]);
    }
    let total = g.add_all(&terms);
    br.total = g.scalar(total).to_f64().unwrap_or(f64::NAN);
    if !br.total.is_finite() {
        return Err(Error::Numeric(format!("detector loss is not finite: {br:?}")));
    }
    Ok((total, br))
}

/// A trained detector with f32 parameters.
#[derive(Debug, Clone)]
pub struct Detector {
    pub layout: DetectorLayout,
    pub params: ParamSet<f32>,
}

pub const DETECTOR_KIND: &str = "detector";

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let (layout, params) = DetectorLayout::new(cfg, seed)?;
        Ok(Self { layout, params })
    }

    /// Per-stack outputs for one `[C, H, W]` input.
    pub fn forward_all(&self, features: &Array3<f32>) -> Result<Vec<HeatmapSet>> {
        let mut g = Graph::<f32>::new();
        let x = g.input(features.clone().into_dyn());
        let outs = self.layout.forward(&mut g, &self.params, x)?;
        let get = |v: Var| {
            g.value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("three-dimensional output")
        };
        Ok(outs
            .iter()
            .map(|o| HeatmapSet {
                keypoints: get(o.keypoints),
                pafs: get(o.pafs),
                root_depth: get(o.root),
            })
            .collect())
    }

    /// Final-stack maps, with keypoints clipped to [0, 1] and PAF directions
    /// renormalised wherever they are long enough to be meaningful.
    pub fn predict(&self, features: &Array3<f32>) -> Result<HeatmapSet> {
        let mut out = self.forward_all(features)?.pop().expect("at least one stack");
        clean_maps(&mut out);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, DETECTOR_KIND, serde_json::to_value(self.layout.cfg)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint_meta(path)?;
        if meta.kind != DETECTOR_KIND {
            return Err(Error::Format(format!("{} holds a {} checkpoint, not a detector", path.display(), meta.kind)));
        }
        let cfg: DetectorConfig = serde_json::from_value(meta.config)?;
        let mut det = Self::new(cfg, 0)?;
        load_into(&mut det.params, tensors)?;
        Ok(det)
    }
}

/// PAF (x, y) pairs shorter than this are treated as off-support at inference.
pub const PAF_SUPPORT_MIN_NORM: f32 = 0.5;

/// Clips keypoints to [0, 1]; PAF pairs become unit vectors (or zero with their depth).
pub fn clean_maps(m: &mut HeatmapSet) {
    m.keypoints.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let (h, w) = m.dims();
    for e in 0..PAF_CHANNELS / 3 {
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (m.pafs[[3 * e, r, c]], m.pafs[[3 * e + 1, r, c]]);
                let n = x.hypot(y);
                if n >= PAF_SUPPORT_MIN_NORM {
                    m.pafs[[3 * e, r, c]] = x / n;
                    m.pafs[[3 * e + 1, r, c]] = y / n;
                } else {
                    m.pafs[[3 * e, r, c]] = 0.0;
                    m.pafs[[3 * e + 1, r, c]] = 0.0;
                    m.pafs[[3 * e + 2, r, c]] = 0.0;
                }
            }
        }
    }
    m.root_depth.mapv_inplace(|v| v.max(0.0));
}

/// Which targets the detector is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Visible joints only (occluded joints treated as background).
    Visible,
    /// Every in-view joint (ablation without occlusion labels).
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Final learning rate as a fraction of the initial one (cosine schedule).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig::default(),
            final_lr_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(validation!("epochs and batch_size must be positive"));
        }
        if !(self.adam.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(validation!("invalid learning-rate settings"));
        }
        Ok(())
    }

    /// Cosine learning-rate multiplier at `step` of `total`.
    pub fn lr_scale(&self, step: usize, total: usize) -> f64 {
        let f = self.final_lr_fraction;
        let p = step as f64 / total.max(1) as f64;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// One detector training example.
#[derive(Debug, Clone)]
pub struct DetSample {
    pub features: Array3<f32>,
    pub target: HeatmapSet,
    pub roots: Vec<RootSample>,
}

/// Mean per-sample loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: VisLossBreakdown,
}

/// Trains a detector; `samples` already carry the chosen supervision.
pub fn train_detector(
    samples: &[DetSample],
    cfg: DetectorConfig,
    weights: &LossWeights,
    train: &TrainConfig,
) -> Result<(Detector, Vec<EpochLoss>)> {
    train.validate()?;
    weights.validate()?;
    if samples.is_empty() {
        return Err(validation!("detector training needs at least one sample"));
    }
    let mut det = Detector::new(cfg, train.seed)?;
    let mut opt = Adam::new(train.adam, &det.params);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps_per_epoch = samples.len().div_ceil(train.batch_size);
    let total_steps = steps_per_epoch * train.epochs;
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut sum = VisLossBreakdown::default();
        for batch in order.chunks(train.batch_size) {
            det.params.zero_grads();
            for &i in batch {
                let s = &samples[i];
                let mut g = Graph::<f32>::new();
                let x = g.input(s.features.clone().into_dyn());
                let outs = det.layout.forward(&mut g, &det.params, x)?;
                let (loss, br) = loss_vis(&mut g, &outs, &s.target, &s.roots, weights).map_err(|e| {
                    Error::Numeric(format!("epoch {epoch}, sample {i}: {e}"))
                })?;
                let grads = g.backward(loss);
                g.accumulate(&grads, &mut det.params);
                sum.total += br.total;
                sum.keypoints += br.keypoints;
                sum.pafs += br.pafs;
                sum.root += br.root;
            }
            det.params.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut det.params, train.lr_scale(step, total_steps));
            step += 1;
            if !det.params.is_finite() {
                return Err(Error::Numeric(format!("parameters became non-finite at epoch {epoch}")));
            }
        }
        let n = samples.len() as f64;
        let mean = VisLossBreakdown {
            total: sum.total / n,
            keypoints: sum.keypoints / n,
            pafs: sum.pafs / n,
            root: sum.root / n,
        };
        log::info!("detector epoch {epoch}: loss {:.4}", mean.total);
        history.push(EpochLoss { epoch, loss: mean });
    }
    Ok((det, history))
}

/// Keypoint channel slice helper used by tests and diagnostics.
pub fn channel_max(maps: &Array3<f32>, c: usize) -> f32 {
    maps.slice(s![c, .., ..]).iter().fold(f32::MIN, |m, &v| m.max(v))
}
