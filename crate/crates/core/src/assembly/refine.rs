//! Small fully connected network that completes and polishes root-relative
//! poses. Coordinates are normalised by an estimated torso length.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::template_bone_lengths;
use crate::error::{validation, Error, Result};
use crate::geom::Vec3;
use crate::nn::params::{load_into, read_checkpoint_meta, save_checkpoint};
use crate::nn::{Adam, AdamConfig, Graph, Linear, ParamSet};
use crate::pose::Pose3D;
use crate::skeleton::{EDGES, NUM_JOINTS, PELVIS};
use crate::synthbody::{pose_body, sample_pose, sample_shape};

/// Fewer present joints than this and the pose is passed through untouched.
pub const MIN_REFINE_JOINTS: usize = 8;
const INPUT: usize = 4 * NUM_JOINTS;
const OUTPUT: usize = 3 * NUM_JOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub hidden: usize,
    /// Present joints move by at most this much (mm).
    pub trust_radius_mm: f64,
    /// Allowed bone length range relative to the template.
    pub bone_ratio: (f64, f64),
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            trust_radius_mm: 50.0,
            bone_ratio: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineTrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Each non-root joint is hidden with this probability.
    pub dropout: f64,
    /// Gaussian noise (mm) added to visible joints.
    pub noise_mm: f64,
    pub seed: u64,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
            dropout: 0.2,
            noise_mm: 15.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineNet {
    pub cfg: RefineConfig,
    layers: [Linear; 3],
    pub params: ParamSet<f32>,
}

pub const REFINE_KIND: &str = "refine";

/// Torso-length unit from the bones whose both ends are present.
fn unit_length(joints: &[Option<Vec3>; NUM_JOINTS]) -> f64 {
    let tmpl = template_bone_lengths();
    let (mut got, mut want) = (0.0, 0.0);
    for (e, &(p, c)) in EDGES.iter().enumerate() {
        if let (Some(a), Some(b)) = (joints[p], joints[c]) {
            got += a.dist(b);
            want += tmpl[e];
        }
    }
    let scale = if want > 0.0 { (got / want).clamp(0.5, 2.0) } else { 1.0 };
    tmpl[0] * scale
}

fn encode(joints: &[Option<Vec3>; NUM_JOINTS], root: Vec3, unit: f64) -> [f32; INPUT] {
    let mut x = [0.0f32; INPUT];
    for (j, p) in joints.iter().enumerate() {
        if let Some(p) = p {
            let q = (*p - root) / unit;
            x[3 * j] = q.x as f32;
            x[3 * j + 1] = q.y as f32;
            x[3 * j + 2] = q.z as f32;
            x[3 * NUM_JOINTS + j] = 1.0;
        }
    }
    x
}

impl RefineNet {
    pub fn new(cfg: RefineConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || !(cfg.trust_radius_mm >= 0.0) || !(cfg.bone_ratio.0 > 0.0 && cfg.bone_ratio.1 > cfg.bone_ratio.0) {
            return Err(validation!("invalid refinement config {cfg:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let layers = [
            Linear::new(&mut params, &mut rng, "refine.l0", INPUT, cfg.hidden),
            Linear::new(&mut params, &mut rng, "refine.l1", cfg.hidden, cfg.hidden),
            Linear::new(&mut params, &mut rng, "refine.l2", cfg.hidden, OUTPUT),
        ];
        params.values[layers[2].w].mapv_inplace(|v| v * 0.01);
        Ok(Self { cfg, layers, params })
    }

    fn forward(&self, g: &mut Graph<f32>, x: Array2<f32>) -> crate::nn::Var {
        let xv = g.input(x.into_dyn());
        let h = self.layers[0].forward(g, &self.params, xv);
        let h = g.relu(h);
        let h = self.layers[1].forward(g, &self.params, h);
        let h = g.relu(h);
        let d = self.layers[2].forward(g, &self.params, h);
        // residual on the coordinate part of the input
        let coords = x_coords(g.value(xv));
        let c = g.input(coords);
        g.add(c, d)
    }

    /// Completes a lifted pose. Returns the pose and which joints were imputed.
    pub fn refine(&self, joints: &[Option<Vec3>; NUM_JOINTS]) -> Result<(Pose3D, [bool; NUM_JOINTS])> {
        let root = joints[PELVIS].ok_or_else(|| Error::Domain("refinement needs the pelvis".into()))?;
        let present = joints.iter().filter(|j| j.is_some()).count();
        if present < MIN_REFINE_JOINTS {
            return Ok((Pose3D::new(0, joints.map(|j| j.unwrap_or(root))), [false; NUM_JOINTS]));
        }
        let unit = unit_length(joints);
        let x = encode(joints, root, unit);
        let mut g = Graph::new();
        let out = self.forward(&mut g, Array2::from_shape_vec((1, INPUT), x.to_vec()).expect("shape"));
        let y = g.value(out);
        let mut pose = [Vec3::ZERO; NUM_JOINTS];
        let mut imputed = [false; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let pred = root + Vec3::new(y[[0, 3 * j]] as f64, y[[0, 3 * j + 1]] as f64, y[[0, 3 * j + 2]] as f64) * unit;
            pose[j] = match joints[j] {
                Some(p) if j == PELVIS => p,
                Some(p) => {
                    let d = pred - p;
                    let n = d.norm();
                    if n > self.cfg.trust_radius_mm {
                        p + d * (self.cfg.trust_radius_mm / n)
                    } else {
                        pred
                    }
                }
                None => {
                    imputed[j] = true;
                    pred
                }
            };
        }
        let tmpl = template_bone_lengths();
        for (e, &(p, c)) in EDGES.iter().enumerate() {
            let d = pose[c] - pose[p];
            let len = d.norm();
            let (lo, hi) = (self.cfg.bone_ratio.0 * tmpl[e], self.cfg.bone_ratio.1 * tmpl[e]);
            if len < lo || len > hi {
                let dir = if len > 1e-9 { d / len } else { Vec3::new(0.0, 1.0, 0.0) };
                pose[c] = pose[p] + dir * len.clamp(lo, hi);
            }
        }
        Ok((Pose3D::new(0, pose), imputed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, REFINE_KIND, serde_json::to_value(self.cfg)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint_meta(path)?;
        if meta.kind != REFINE_KIND {
            return Err(Error::Format(format!("{} holds a {} checkpoint, not a refinement net", path.display(), meta.kind)));
        }
        let cfg: RefineConfig = serde_json::from_value(meta.config)?;
        let mut net = Self::new(cfg, 0)?;
        load_into(&mut net.params, tensors)?;
        Ok(net)
    }
}

fn x_coords(x: &ArrayD<f32>) -> ArrayD<f32> {
    let b = x.shape()[0];
    ArrayD::from_shape_fn(IxDyn(&[b, OUTPUT]), |i| x[[i[0], i[1]]])
}

/// One synthetic training pose: network input and normalised target.
fn training_pair(rng: &mut ChaCha8Rng, cfg: &RefineTrainConfig) -> Result<([f32; INPUT], [f32; OUTPUT])> {
    let shape = sample_shape(rng, 0.15);
    let params = sample_pose(rng, 1.0, 0.15, Vec3::new(0.0, 0.0, 4000.0));
    let body = pose_body(&shape, &params, 0)?;
    let truth = body.pose.joints;
    let noise = Normal::new(0.0, cfg.noise_mm.max(1e-9)).expect("positive std");
    let mut joints: [Option<Vec3>; NUM_JOINTS] = truth.map(Some);
    for j in 0..NUM_JOINTS {
        if j != PELVIS && rng.gen_bool(cfg.dropout) {
            joints[j] = None;
        } else if j != PELVIS {
            joints[j] = Some(truth[j] + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
        }
    }
    let root = truth[PELVIS];
    let unit = unit_length(&joints);
    let x = encode(&joints, root, unit);
    let mut y = [0.0f32; OUTPUT];
    for j in 0..NUM_JOINTS {
        let q = (truth[j] - root) / unit;
        y[3 * j] = q.x as f32;
        y[3 * j + 1] = q.y as f32;
        y[3 * j + 2] = q.z as f32;
    }
    Ok((x, y))
}

/// Trains on synthetic poses with random joint dropout; returns per-epoch mean loss.
pub fn train_refine(cfg: RefineConfig, train: &RefineTrainConfig) -> Result<(RefineNet, Vec<f64>)> {
    if train.samples == 0 || train.epochs == 0 || train.batch_size == 0 || !(0.0..1.0).contains(&train.dropout) {
        return Err(validation!("invalid refinement training config"));
    }
    let mut net = RefineNet::new(cfg, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0003);
    let data: Vec<_> = (0..train.samples).map(|_| training_pair(&mut rng, train)).collect::<Result<_>>()?;
    let mut opt = Adam::new(train.adam, &net.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let b = chunk.len();
            let x = Array2::from_shape_fn((b, INPUT), |(i, k)| data[chunk[i]].0[k]);
            let y = ArrayD::from_shape_fn(IxDyn(&[b, OUTPUT]), |i| data[chunk[i[0]]].1[i[1]]);
            net.params.zero_grads();
            let mut g = Graph::new();
            let out = net.forward(&mut g, x);
            let l = g.sq_err(out, y, None);
            let l = g.scale(l, 1.0 / b as f32);
            sum += g.scalar(l) as f64 * b as f64;
            let grads = g.backward(l);
            g.accumulate(&grads, &mut net.params);
            opt.step(&mut net.params, 1.0);
        }
        let mean = sum / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("refinement loss diverged at epoch {epoch}")));
        }
        log::info!("refine epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok((net, history))
}
