//! Encoder-distillation reasoning network: a teacher encoder that sees
//! complete maps, a student encoder that sees visible/detected maps, and a
//! shared decoder. At inference only the student path runs and its
//! reconstruction is fused with the detector output.

use std::path::Path;

use ndarray::{s, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detnet::{clean_maps, LossWeights, TrainConfig, PAF_SUPPORT_MIN_NORM};
use crate::error::{validation, Error, Result};
use crate::nn::params::{load_into, read_checkpoint_meta, save_checkpoint, uniform};
use crate::nn::{cst, Adam, Conv, Graph, ParamSet, Scalar, Var};
use crate::skeleton::{NUM_EDGES, NUM_JOINTS};
use crate::targets::{HeatmapSet, SupportMask, TargetBundle, PAF_CHANNELS};

/// Reconstructed channels: keypoints then PAFs (root depth is not reasoned about).
pub const RECON_CHANNELS: usize = NUM_JOINTS + PAF_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    OccludedOnly,
    AllJoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsedConfig {
    /// Channel width of each encoder level; level `i` runs at 1/2^i resolution.
    pub channels: Vec<usize>,
    /// Include PAF depth channels in the input (3D mode) or drop them (2D mode).
    pub paf_depth_input: bool,
    /// Multiplier applied to PAF depth channels (mm) when fed as input.
    pub input_depth_scale: f64,
    /// Raw reconstructed PAF depth is multiplied by this (mm).
    pub paf_depth_scale: f64,
    pub teacher_input: TeacherInput,
}

impl Default for DsedConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 48, 64, 64],
            paf_depth_input: true,
            input_depth_scale: 0.01,
            paf_depth_scale: 100.0,
            teacher_input: TeacherInput::AllJoints,
        }
    }
}

impl DsedConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn input_channels(&self) -> usize {
        if self.paf_depth_input {
            NUM_JOINTS + PAF_CHANNELS
        } else {
            NUM_JOINTS + 2 * NUM_EDGES
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() > 6 || self.channels.contains(&0) {
            return Err(validation!("DSED needs 1..=6 levels of positive width, got {:?}", self.channels));
        }
        if !(self.input_depth_scale > 0.0) || !(self.paf_depth_scale > 0.0) {
            return Err(validation!("DSED depth scales must be positive"));
        }
        Ok(())
    }
}

/// Converts maps into the reasoning network's input tensor.
pub fn maps_to_input<T: Scalar>(m: &HeatmapSet, cfg_depth: bool, depth_scale: f64) -> ArrayD<T> {
    let (h, w) = m.dims();
    let c = if cfg_depth {
        NUM_JOINTS + PAF_CHANNELS
    } else {
        NUM_JOINTS + 2 * NUM_EDGES
    };
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
    for j in 0..NUM_JOINTS {
        for r in 0..h {
            for q in 0..w {
                out[[j, r, q]] = cst(m.keypoints[[j, r, q]] as f64);
            }
        }
    }
    let mut ch = NUM_JOINTS;
    for p in 0..PAF_CHANNELS {
        let is_depth = p % 3 == 2;
        if is_depth && !cfg_depth {
            continue;
        }
        let k = if is_depth { depth_scale } else { 1.0 };
        for r in 0..h {
            for q in 0..w {
                out[[ch, r, q]] = cst(m.pafs[[p, r, q]] as f64 * k);
            }
        }
        ch += 1;
    }
    out
}

#[derive(Debug, Clone)]
struct Encoder {
    levels: Vec<(Conv, Conv)>,
}

impl Encoder {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, input: usize, channels: &[usize]) -> Self {
        let mut prev = input;
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let a = Conv::new(ps, rng, &format!("{name}.e{i}a"), prev, c, 3);
                let b = Conv::new(ps, rng, &format!("{name}.e{i}b"), c, c, 3);
                prev = c;
                (a, b)
            })
            .collect();
        Self { levels }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Vec<Var> {
        let mut trace = Vec::with_capacity(self.levels.len());
        let mut cur = x;
        for (i, (a, b)) in self.levels.iter().enumerate() {
            if i > 0 {
                cur = g.avg_pool2(cur);
            }
            let y = a.forward_relu(g, ps, cur);
            cur = b.forward_relu(g, ps, y);
            trace.push(cur);
        }
        trace
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    /// One block per level below the deepest, from deepest-1 up to 0.
    blocks: Vec<(Conv, Conv)>,
    out: Conv,
}

impl Decoder {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, channels: &[usize]) -> Self {
        let n = channels.len();
        let blocks = (0..n.saturating_sub(1))
            .rev()
            .map(|i| {
                let a = Conv::new(ps, rng, &format!("dec.d{i}a"), channels[i + 1] + channels[i], channels[i], 3);
                let b = Conv::new(ps, rng, &format!("dec.d{i}b"), channels[i], channels[i], 3);
                (a, b)
            })
            .collect();
        let out = Conv::new(ps, rng, "dec.out", channels[0], RECON_CHANNELS, 1);
        ps.values[out.w] = uniform(rng, &[RECON_CHANNELS, channels[0], 1, 1], 0.01);
        ps.values[out.b].fill(T::zero());
        Self { blocks, out }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, trace: &[Var]) -> Var {
        let n = trace.len();
        let mut cur = trace[n - 1];
        for (k, (a, b)) in self.blocks.iter().enumerate() {
            let i = n - 2 - k;
            let up = g.upsample2(cur);
            let cat = g.concat(&[up, trace[i]]);
            let y = a.forward_relu(g, ps, cat);
            cur = b.forward_relu(g, ps, y);
        }
        self.out.forward(g, ps, cur)
    }
}

/// Reconstruction variables: keypoints `[15, h, w]` and PAFs `[42, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct Recon {
    pub keypoints: Var,
    pub pafs: Var,
}

fn split_recon<T: Scalar>(g: &mut Graph<T>, raw: Var, paf_depth_scale: f64) -> Recon {
    let shape = g.value(raw).shape().to_vec();
    let scales = ArrayD::from_shape_fn(IxDyn(&shape), |i| {
        let c = i[0];
        cst::<T>(if c >= NUM_JOINTS && (c - NUM_JOINTS) % 3 == 2 { paf_depth_scale } else { 1.0 })
    });
    let scaled = g.mul_const(raw, scales);
    Recon {
        keypoints: g.slice_channels(scaled, 0, NUM_JOINTS),
        pafs: g.slice_channels(scaled, NUM_JOINTS, PAF_CHANNELS),
    }
}

/// Parameter layout of teacher, student and decoder.
#[derive(Debug, Clone)]
pub struct DsedLayout {
    pub cfg: DsedConfig,
    teacher: Encoder,
    student: Encoder,
    decoder: Decoder,
    /// Parameter ids used at inference (student + decoder).
    pub inference_params: Vec<usize>,
}

impl DsedLayout {
    pub fn new<T: Scalar>(cfg: DsedConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let cin = cfg.input_channels();
        let teacher = Encoder::new(&mut ps, &mut rng, "teacher", cin, &cfg.channels);
        let first_student = ps.len();
        let student = Encoder::new(&mut ps, &mut rng, "student", cin, &cfg.channels);
        let decoder = Decoder::new(&mut ps, &mut rng, &cfg.channels);
        let inference_params = (first_student..ps.len()).collect();
        Ok((
            Self {
                cfg,
                teacher,
                student,
                decoder,
                inference_params,
            },
            ps,
        ))
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.value(x).shape();
        let div = 1 << (self.cfg.levels() - 1);
        if s.len() != 3 || s[0] != self.cfg.input_channels() || s[1] % div != 0 || s[2] % div != 0 {
            return Err(validation!(
                "reasoning input must be [{}, H, W] with H, W divisible by {div}, got {s:?}",
                self.cfg.input_channels()
            ));
        }
        Ok(())
    }

    pub fn teacher_forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<(Vec<Var>, Recon)> {
        self.check_input(g, x)?;
        let trace = self.teacher.forward(g, ps, x);
        let raw = self.decoder.forward(g, ps, &trace);
        Ok((trace, split_recon(g, raw, self.cfg.paf_depth_scale)))
    }

    pub fn student_forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<(Vec<Var>, Recon)> {
        self.check_input(g, x)?;
        let trace = self.student.forward(g, ps, x);
        let raw = self.decoder.forward(g, ps, &trace);
        Ok((trace, split_recon(g, raw, self.cfg.paf_depth_scale)))
    }

    pub fn inference_param_count<T: Scalar>(&self, ps: &ParamSet<T>) -> usize {
        self.inference_params.iter().map(|&i| ps.values[i].len()).sum()
    }
}

fn to_t<T: Scalar>(a: &Array3<f32>) -> ArrayD<T> {
    a.mapv(|v| cst::<T>(v as f64)).into_dyn()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonLossBreakdown {
    pub total: f64,
    pub all_keypoints: f64,
    pub all_pafs: f64,
    pub extract: f64,
}

fn value<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.scalar(v).to_f64().unwrap_or(f64::NAN)
}

/// Squared-error pair on keypoints and PAFs (depth residuals in `paf_depth_unit_mm`).
fn map_terms<T: Scalar>(
    g: &mut Graph<T>,
    recon: &Recon,
    target: &HeatmapSet,
    weights: &LossWeights,
    mask: Option<&SupportMask>,
) -> Result<(Var, Var)> {
    let (h, w) = target.dims();
    if g.value(recon.keypoints).shape() != [NUM_JOINTS, h, w] {
        return Err(validation!(
            "reconstruction shape {:?} does not match targets ({h}x{w})",
            g.value(recon.keypoints).shape()
        ));
    }
    let mut pw = weights.paf_channel_weights::<T>(h, w);
    let km = mask.map(|m| to_t::<T>(&m.keypoints));
    if let Some(m) = mask {
        pw = pw * to_t::<T>(&m.pafs);
    }
    let lk = g.sq_err(recon.keypoints, to_t(&target.keypoints), km);
    let lp = g.sq_err(recon.pafs, to_t(&target.pafs), Some(pw));
    Ok((lk, lp))
}

/// `L_all + omega * L_extract`; the teacher trace enters as a constant.
pub fn loss_reason<T: Scalar>(
    g: &mut Graph<T>,
    student_trace: &[Var],
    teacher_trace: &[Var],
    student_recon: &Recon,
    targets_all: &HeatmapSet,
    weights: &LossWeights,
) -> Result<(Var, ReasonLossBreakdown)> {
    weights.validate()?;
    if student_trace.len() != teacher_trace.len() || student_trace.is_empty() {
        return Err(validation!(
            "trace level mismatch: student {} vs teacher {}",
            student_trace.len(),
            teacher_trace.len()
        ));
    }
    let (lk, lp) = map_terms(g, student_recon, targets_all, weights, None)?;
    let levels = student_trace.len();
    let mut ext = Vec::with_capacity(levels);
    for (&s, &t) in student_trace.iter().zip(teacher_trace) {
        if g.value(s).shape() != g.value(t).shape() {
            return Err(validation!("trace level shapes differ"));
        }
        let n = g.value(s).len() as f64;
        let target = g.value(t).clone();
        let e = g.sq_err(s, target, None);
        ext.push(g.scale(e, cst(1.0 / (n * levels as f64))));
    }
    let extract = g.add_all(&ext);
    let a = g.scale(lk, cst(weights.lam_k_all));
    let b = g.scale(lp, cst(weights.lam_p_all));
    let c = g.scale(extract, cst(weights.omega_extract));
    let total = g.add_all(&[a, b, c]);
    let br = ReasonLossBreakdown {
        total: value(g, total),
        all_keypoints: value(g, lk),
        all_pafs: value(g, lp),
        extract: value(g, extract),
    };
    if !br.total.is_finite() {
        return Err(Error::Numeric(format!("reasoning loss is not finite: {br:?}")));
    }
    Ok((total, br))
}

/// Squared error restricted to the occluded-support cells.
pub fn loss_occ<T: Scalar>(
    g: &mut Graph<T>,
    recon: &Recon,
    targets_occluded: &HeatmapSet,
    support: &SupportMask,
    weights: &LossWeights,
) -> Result<(Var, f64)> {
    let (lk, lp) = map_terms(g, recon, targets_occluded, weights, Some(support))?;
    let a = g.scale(lk, cst(weights.lam_k_occ));
    let b = g.scale(lp, cst(weights.lam_p_occ));
    let total = g.add(a, b);
    let v = value(g, total);
    Ok((total, v))
}

/// Reconstruction loss of the teacher against its own input maps.
pub fn loss_teacher<T: Scalar>(g: &mut Graph<T>, recon: &Recon, input_maps: &HeatmapSet, weights: &LossWeights) -> Result<(Var, f64)> {
    let (lk, lp) = map_terms(g, recon, input_maps, weights, None)?;
    let a = g.scale(lk, cst(weights.lam_k_all));
    let b = g.scale(lp, cst(weights.lam_p_all));
    let total = g.add(a, b);
    let v = value(g, total);
    Ok((total, v))
}

/// Which reasoning architecture a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    Dsed,
    Hourglass,
}

/// Plain hourglass baseline mapping visible maps straight to complete maps.
#[derive(Debug, Clone)]
pub struct HourglassLayout {
    pub channels: usize,
    pub depth: usize,
    pub input_channels: usize,
    pub paf_depth_scale: f64,
    input: Conv,
    levels: Vec<(Conv, Conv, Conv)>,
    bottom: Conv,
    post: Conv,
    out: Conv,
}

impl HourglassLayout {
    pub fn new<T: Scalar>(input_channels: usize, channels: usize, depth: usize, paf_depth_scale: f64, seed: u64) -> Result<(Self, ParamSet<T>)> {
        if channels == 0 || depth == 0 || depth > 6 {
            return Err(validation!("hourglass baseline needs positive width and depth in 1..=6"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let input = Conv::new(&mut ps, &mut rng, "hg.in", input_channels, channels, 3);
        let levels = (0..depth)
            .map(|d| {
                (
                    Conv::new(&mut ps, &mut rng, &format!("hg.l{d}.skip"), channels, channels, 3),
                    Conv::new(&mut ps, &mut rng, &format!("hg.l{d}.down"), channels, channels, 3),
                    Conv::new(&mut ps, &mut rng, &format!("hg.l{d}.up"), channels, channels, 3),
                )
            })
            .collect();
        let bottom = Conv::new(&mut ps, &mut rng, "hg.bottom", channels, channels, 3);
        let post = Conv::new(&mut ps, &mut rng, "hg.post", channels, channels, 3);
        let out = Conv::new(&mut ps, &mut rng, "hg.out", channels, RECON_CHANNELS, 1);
        ps.values[out.w] = uniform(&mut rng, &[RECON_CHANNELS, channels, 1, 1], 0.01);
        ps.values[out.b].fill(T::zero());
        Ok((
            Self {
                channels,
                depth,
                input_channels,
                paf_depth_scale,
                input,
                levels,
                bottom,
                post,
                out,
            },
            ps,
        ))
    }

    fn level<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, l: usize) -> Var {
        let (skip, down, up) = &self.levels[l];
        let s = skip.forward_relu(g, ps, x);
        let p = g.avg_pool2(x);
        let d = down.forward_relu(g, ps, p);
        let inner = if l + 1 < self.levels.len() {
            self.level(g, ps, d, l + 1)
        } else {
            self.bottom.forward_relu(g, ps, d)
        };
        let u = up.forward_relu(g, ps, inner);
        let u = g.upsample2(u);
        g.add(s, u)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Recon> {
        let s = g.value(x).shape();
        let div = 1 << self.depth;
        if s.len() != 3 || s[0] != self.input_channels || s[1] % div != 0 || s[2] % div != 0 {
            return Err(validation!("hourglass baseline input has shape {s:?}"));
        }
        let y = self.input.forward_relu(g, ps, x);
        let y = self.level(g, ps, y, 0);
        let y = self.post.forward_relu(g, ps, y);
        let raw = self.out.forward(g, ps, y);
        Ok(split_recon(g, raw, self.paf_depth_scale))
    }
}

/// Hourglass width whose parameter count is closest to `target`.
pub fn matched_hourglass_channels(input_channels: usize, depth: usize, target: usize) -> usize {
    let count = |c: usize| {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        conv(input_channels, c, 3) + (3 * depth + 2) * conv(c, c, 3) + conv(c, RECON_CHANNELS, 1)
    };
    (4..=256)
        .min_by_key(|&c| (count(c) as i64 - target as i64).unsigned_abs())
        .expect("non-empty range")
}

#[derive(Debug, Clone)]
pub enum ReasonerNet {
    Dsed(DsedLayout),
    Hourglass(HourglassLayout),
}

/// A trained reasoning module (DSED or the hourglass baseline).
#[derive(Debug, Clone)]
pub struct Reasoner {
    pub net: ReasonerNet,
    pub cfg: DsedConfig,
    pub params: ParamSet<f32>,
}

pub const REASONER_KIND: &str = "reasoner";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReasonerMeta {
    kind: ReasonerKind,
    dsed: DsedConfig,
    hourglass_channels: usize,
    hourglass_depth: usize,
}

impl Reasoner {
    pub fn new_dsed(cfg: DsedConfig, seed: u64) -> Result<Self> {
        let (layout, params) = DsedLayout::new(cfg.clone(), seed)?;
        Ok(Self {
            net: ReasonerNet::Dsed(layout),
            cfg,
            params,
        })
    }

    /// Hourglass baseline sized to match the DSED inference path of `cfg`.
    pub fn new_hourglass(cfg: DsedConfig, depth: usize, seed: u64) -> Result<Self> {
        let (probe, ps) = DsedLayout::new::<f32>(cfg.clone(), 0)?;
        let target = probe.inference_param_count(&ps);
        let c = matched_hourglass_channels(cfg.input_channels(), depth, target);
        Self::new_hourglass_with(cfg, c, depth, seed)
    }

    pub fn new_hourglass_with(cfg: DsedConfig, channels: usize, depth: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, params) = HourglassLayout::new(cfg.input_channels(), channels, depth, cfg.paf_depth_scale, seed)?;
        Ok(Self {
            net: ReasonerNet::Hourglass(layout),
            cfg,
            params,
        })
    }

    pub fn kind(&self) -> ReasonerKind {
        match self.net {
            ReasonerNet::Dsed(_) => ReasonerKind::Dsed,
            ReasonerNet::Hourglass(_) => ReasonerKind::Hourglass,
        }
    }

    /// Parameters used at inference time.
    pub fn inference_param_count(&self) -> usize {
        match &self.net {
            ReasonerNet::Dsed(l) => l.inference_param_count(&self.params),
            ReasonerNet::Hourglass(_) => self.params.num_scalars(),
        }
    }

    fn input_of(&self, maps: &HeatmapSet) -> ArrayD<f32> {
        maps_to_input(maps, self.cfg.paf_depth_input, self.cfg.input_depth_scale)
    }

    /// Raw reconstruction (keypoints, PAFs) from visible / detected maps.
    pub fn reconstruct(&self, visible: &HeatmapSet) -> Result<(Array3<f32>, Array3<f32>)> {
        let mut g = Graph::<f32>::new();
        let x = g.input(self.input_of(visible));
        let recon = match &self.net {
            ReasonerNet::Dsed(l) => l.student_forward(&mut g, &self.params, x)?.1,
            ReasonerNet::Hourglass(l) => l.forward(&mut g, &self.params, x)?,
        };
        let get = |v: Var| g.value(v).clone().into_dimensionality::<ndarray::Ix3>().expect("3-d");
        Ok((get(recon.keypoints), get(recon.pafs)))
    }

    /// Detector maps fused with the reconstruction.
    pub fn reason_infer(&self, detected: &HeatmapSet) -> Result<HeatmapSet> {
        let (k, p) = self.reconstruct(detected)?;
        Ok(fuse(detected, &k, &p))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (hc, hd) = match &self.net {
            ReasonerNet::Hourglass(l) => (l.channels, l.depth),
            ReasonerNet::Dsed(_) => (0, 0),
        };
        let meta = ReasonerMeta {
            kind: self.kind(),
            dsed: self.cfg.clone(),
            hourglass_channels: hc,
            hourglass_depth: hd,
        };
        save_checkpoint(path, &self.params, REASONER_KIND, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint_meta(path)?;
        if meta.kind != REASONER_KIND {
            return Err(Error::Format(format!("{} holds a {} checkpoint, not a reasoner", path.display(), meta.kind)));
        }
        let m: ReasonerMeta = serde_json::from_value(meta.config)?;
        let mut r = match m.kind {
            ReasonerKind::Dsed => Self::new_dsed(m.dsed, 0)?,
            ReasonerKind::Hourglass => Self::new_hourglass_with(m.dsed, m.hourglass_channels, m.hourglass_depth, 0)?,
        };
        load_into(&mut r.params, tensors)?;
        Ok(r)
    }
}

/// Keypoints: min(detected + max(reconstructed, 0), 1), so a detected peak is
/// never lowered. PAFs: detected where the
/// detector has support, otherwise the (renormalised) reconstruction. Root
/// maps pass through.
pub fn fuse(detected: &HeatmapSet, recon_k: &Array3<f32>, recon_p: &Array3<f32>) -> HeatmapSet {
    let mut out = detected.clone();
    ndarray::Zip::from(&mut out.keypoints)
        .and(recon_k)
        .for_each(|o, &r| *o = (*o + r.max(0.0)).min(1.0));
    let (h, w) = detected.dims();
    for e in 0..NUM_EDGES {
        for r in 0..h {
            for q in 0..w {
                let dx = detected.pafs[[3 * e, r, q]];
                let dy = detected.pafs[[3 * e + 1, r, q]];
                if dx.hypot(dy) >= PAF_SUPPORT_MIN_NORM {
                    continue;
                }
                let (x, y, z) = (recon_p[[3 * e, r, q]], recon_p[[3 * e + 1, r, q]], recon_p[[3 * e + 2, r, q]]);
                let n = x.hypot(y);
                let (x, y, z) = if n >= PAF_SUPPORT_MIN_NORM { (x / n, y / n, z) } else { (0.0, 0.0, 0.0) };
                out.pafs[[3 * e, r, q]] = x;
                out.pafs[[3 * e + 1, r, q]] = y;
                out.pafs[[3 * e + 2, r, q]] = z;
            }
        }
    }
    out
}

/// Training-mode schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSchedule {
    /// Alternate detector-output batches and synthetic visible-map batches.
    Alternate,
    /// Detector outputs only.
    DetectorOnly,
    /// Synthetic visible maps only; the detector is never used.
    SyntheticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonTrainConfig {
    pub train: TrainConfig,
    pub schedule: ModeSchedule,
    /// Add the occluded-support loss in detector-output batches.
    pub occ_loss: bool,
}

impl Default for ReasonTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            schedule: ModeSchedule::Alternate,
            occ_loss: true,
        }
    }
}

/// One reasoning example: targets plus, for detector-output batches, the
/// detector's (cleaned) maps for the same scene.
#[derive(Debug, Clone)]
pub struct ReasonSample {
    pub detected: Option<HeatmapSet>,
    pub targets: TargetBundle,
}

/// A logged training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub mode: u8,
    pub loss: f64,
    pub teacher: f64,
    pub occ: f64,
    pub extract: f64,
}

/// Per-sample objective for either architecture; returns (root, log parts).
fn sample_objective(
    net: &ReasonerNet,
    cfg: &DsedConfig,
    ps: &ParamSet<f32>,
    g: &mut Graph<f32>,
    input: &HeatmapSet,
    targets: &TargetBundle,
    weights: &LossWeights,
    with_occ: bool,
) -> Result<(Var, [f64; 4])> {
    let x = g.input(maps_to_input(input, cfg.paf_depth_input, cfg.input_depth_scale));
    let mut terms = Vec::new();
    let (mut teacher_l, mut occ_l, mut extract_l) = (0.0, 0.0, 0.0);
    let recon = match net {
        ReasonerNet::Dsed(l) => {
            let teacher_maps = match cfg.teacher_input {
                TeacherInput::AllJoints => &targets.all,
                TeacherInput::OccludedOnly => &targets.occluded,
            };
            let tx = g.input(maps_to_input(teacher_maps, cfg.paf_depth_input, cfg.input_depth_scale));
            let (t_trace, t_recon) = l.teacher_forward(g, ps, tx)?;
            let (lt, v) = loss_teacher(g, &t_recon, teacher_maps, weights)?;
            teacher_l = v;
            terms.push(lt);
            let t_fixed: Vec<Var> = t_trace.iter().map(|&v| g.detach(v)).collect();
            let (s_trace, s_recon) = l.student_forward(g, ps, x)?;
            let (lr, br) = loss_reason(g, &s_trace, &t_fixed, &s_recon, &targets.all, weights)?;
            extract_l = br.extract;
            terms.push(lr);
            s_recon
        }
        ReasonerNet::Hourglass(l) => {
            let r = l.forward(g, ps, x)?;
            let (lk, lp) = map_terms(g, &r, &targets.all, weights, None)?;
            let a = g.scale(lk, weights.lam_k_all as f32);
            let b = g.scale(lp, weights.lam_p_all as f32);
            terms.extend([a, b]);
            r
        }
    };
    if with_occ {
        let (lo, v) = loss_occ(g, &recon, &targets.occluded, &targets.occluded_support, weights)?;
        occ_l = v;
        terms.push(lo);
    }
    let total = g.add_all(&terms);
    let t = value(g, total);
    if !t.is_finite() {
        return Err(Error::Numeric(format!("reasoning objective is not finite ({t})")));
    }
    Ok((total, [t, teacher_l, occ_l, extract_l]))
}

/// Trains a reasoner. `detector_samples` feed detector-output batches (mode 1),
/// `synthetic` feeds synthetic visible-map batches (mode 2).
pub fn train_reasoner(
    mut model: Reasoner,
    detector_samples: &[ReasonSample],
    synthetic: &[TargetBundle],
    weights: &LossWeights,
    cfg: &ReasonTrainConfig,
) -> Result<(Reasoner, Vec<BatchLog>)> {
    let train = &cfg.train;
    train.validate()?;
    weights.validate()?;
    let need_det = cfg.schedule != ModeSchedule::SyntheticOnly;
    let need_syn = cfg.schedule != ModeSchedule::DetectorOnly;
    if need_det && (detector_samples.is_empty() || detector_samples.iter().any(|s| s.detected.is_none())) {
        return Err(validation!("detector-output batches need samples with detector maps"));
    }
    if need_syn && synthetic.is_empty() {
        return Err(validation!("synthetic batches need at least one synthetic sample"));
    }
    let mut opt = Adam::new(train.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0002);
    let mut det_order: Vec<usize> = (0..detector_samples.len()).collect();
    let mut syn_order: Vec<usize> = (0..synthetic.len()).collect();
    let per_epoch = match cfg.schedule {
        ModeSchedule::Alternate => 2 * detector_samples.len().max(synthetic.len()).div_ceil(2 * train.batch_size),
        ModeSchedule::DetectorOnly => detector_samples.len().div_ceil(train.batch_size),
        ModeSchedule::SyntheticOnly => synthetic.len().div_ceil(train.batch_size),
    }
    .max(1);
    let total_steps = per_epoch * train.epochs;
    let (mut di, mut si) = (usize::MAX, usize::MAX);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..train.epochs {
        for batch in 0..per_epoch {
            let mode = match cfg.schedule {
                ModeSchedule::Alternate => 1 + (batch % 2) as u8,
                ModeSchedule::DetectorOnly => 1,
                ModeSchedule::SyntheticOnly => 2,
            };
            model.params.zero_grads();
            let mut sums = [0.0; 4];
            for _ in 0..train.batch_size {
                let mut g = Graph::<f32>::new();
                let (root, parts) = if mode == 1 {
                    if di >= det_order.len() {
                        det_order.shuffle(&mut rng);
                        di = 0;
                    }
                    let s = &detector_samples[det_order[di]];
                    di += 1;
                    let input = s.detected.as_ref().expect("checked above");
                    sample_objective(&model.net, &model.cfg, &model.params, &mut g, input, &s.targets, weights, cfg.occ_loss)?
                } else {
                    if si >= syn_order.len() {
                        syn_order.shuffle(&mut rng);
                        si = 0;
                    }
                    let t = &synthetic[syn_order[si]];
                    si += 1;
                    sample_objective(&model.net, &model.cfg, &model.params, &mut g, &t.visible, t, weights, false)?
                };
                let grads = g.backward(root);
                g.accumulate(&grads, &mut model.params);
                for (a, b) in sums.iter_mut().zip(parts) {
                    *a += b;
                }
            }
            let n = train.batch_size as f64;
            model.params.scale_grads(1.0 / train.batch_size as f32);
            opt.step(&mut model.params, train.lr_scale(step, total_steps));
            step += 1;
            if !model.params.is_finite() {
                return Err(Error::Numeric(format!("reasoner parameters became non-finite at epoch {epoch}")));
            }
            log.push(BatchLog {
                epoch,
                batch,
                mode,
                loss: sums[0] / n,
                teacher: sums[1] / n,
                occ: sums[2] / n,
                extract: sums[3] / n,
            });
        }
        let recent: Vec<f64> = log.iter().rev().take(per_epoch).map(|b| b.loss).collect();
        log::info!(
            "reasoner epoch {epoch}: mean batch loss {:.4}",
            recent.iter().sum::<f64>() / recent.len() as f64
        );
    }
    Ok((model, log))
}

/// Cleans raw detector output the same way inference does, for use as mode-1 input.
pub fn detector_maps_for_training(mut maps: HeatmapSet) -> HeatmapSet {
    clean_maps(&mut maps);
    maps
}

/// Keypoint channel view helper.
pub fn keypoint_channel(maps: &HeatmapSet, j: usize) -> ndarray::ArrayView2<'_, f32> {
    maps.keypoints.slice(s![j, .., ..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> DsedConfig {
        DsedConfig {
            channels: vec![6, 8],
            ..Default::default()
        }
    }

    fn rand3(rng: &mut ChaCha8Rng, c: usize, a: f64) -> Array3<f32> {
        uniform::<f32>(rng, &[c, 8, 8], a).into_dimensionality().unwrap()
    }

    fn toy_maps(rng: &mut ChaCha8Rng) -> HeatmapSet {
        let mut pafs = rand3(rng, PAF_CHANNELS, 1.0);
        for e in 0..NUM_EDGES {
            pafs.slice_mut(s![3 * e + 2, .., ..]).mapv_inplace(|v| v * 200.0);
        }
        HeatmapSet {
            keypoints: rand3(rng, NUM_JOINTS, 1.0).mapv(f32::abs),
            pafs,
            root_depth: rand3(rng, 7, 1.0).mapv(f32::abs),
        }
    }

    fn toy_bundle(rng: &mut ChaCha8Rng) -> TargetBundle {
        let mask = |rng: &mut ChaCha8Rng, c| rand3(rng, c, 1.0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        TargetBundle {
            all: toy_maps(rng),
            visible: toy_maps(rng),
            occluded: toy_maps(rng),
            occluded_support: SupportMask {
                keypoints: mask(rng, NUM_JOINTS),
                pafs: mask(rng, PAF_CHANNELS),
            },
        }
    }

    /// Per-tensor relative error between analytic and central-difference gradients.
    fn check_params(ps: &ParamSet<f64>, eval: impl Fn(&ParamSet<f64>) -> (Graph<f64>, Var), skip: impl Fn(usize) -> bool) {
        let (g, l) = eval(ps);
        let grads = g.backward(l);
        let mut acc = ps.clone();
        acc.zero_grads();
        g.accumulate(&grads, &mut acc);
        for pi in 0..ps.len() {
            if skip(pi) {
                assert!(acc.grads[pi].iter().all(|&v| v == 0.0), "{} should get no gradient", ps.names[pi]);
                continue;
            }
            let n = ps.values[pi].len();
            let (mut num, mut diff) = (0.0f64, 0.0f64);
            for k in [0, n / 3, n / 2, n - 1] {
                let h = 1e-5;
                let f = |d: f64| {
                    let mut a = ps.clone();
                    a.values[pi].as_slice_mut().unwrap()[k] += d;
                    let (ga, la) = eval(&a);
                    ga.scalar(la)
                };
                let fd = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
                let an = acc.grads[pi].as_slice().unwrap()[k];
                num += fd * fd;
                diff += (fd - an) * (fd - an);
            }
            let rel = diff.sqrt() / num.sqrt().max(1e-8);
            assert!(rel <= 1e-4, "{}: relative error {rel}", ps.names[pi]);
        }
    }

    #[test]
    fn reasoning_loss_gradients_match_finite_differences_and_skip_teacher() {
        let (layout, ps) = DsedLayout::new::<f64>(toy_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = toy_bundle(&mut rng);
        let w = LossWeights {
            omega_extract: 0.7,
            ..Default::default()
        };
        let n_teacher = layout.inference_params[0];
        check_params(
            &ps,
            |ps| {
                let mut g = Graph::new();
                let tx = g.input(maps_to_input(&b.all, true, 0.01));
                let (tt, _) = layout.teacher_forward(&mut g, ps, tx).unwrap();
                let tt: Vec<Var> = tt.iter().map(|&v| g.detach(v)).collect();
                let sx = g.input(maps_to_input(&b.visible, true, 0.01));
                let (st, sr) = layout.student_forward(&mut g, ps, sx).unwrap();
                let (l, _) = loss_reason(&mut g, &st, &tt, &sr, &b.all, &w).unwrap();
                (g, l)
            },
            |pi| pi < n_teacher,
        );
    }

    #[test]
    fn occluded_and_teacher_loss_gradients_match_finite_differences() {
        let (layout, ps) = DsedLayout::new::<f64>(toy_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = toy_bundle(&mut rng);
        let w = LossWeights::default();
        let n_teacher = layout.inference_params[0];
        check_params(
            &ps,
            |ps| {
                let mut g = Graph::new();
                let sx = g.input(maps_to_input(&b.visible, true, 0.01));
                let (_, sr) = layout.student_forward(&mut g, ps, sx).unwrap();
                let (l, _) = loss_occ(&mut g, &sr, &b.occluded, &b.occluded_support, &w).unwrap();
                (g, l)
            },
            |pi| pi < n_teacher,
        );
        check_params(
            &ps,
            |ps| {
                let mut g = Graph::new();
                let tx = g.input(maps_to_input(&b.occluded, true, 0.01));
                let (_, tr) = layout.teacher_forward(&mut g, ps, tx).unwrap();
                let (l, _) = loss_teacher(&mut g, &tr, &b.occluded, &w).unwrap();
                (g, l)
            },
            |pi| (n_teacher..layout.inference_params[0] + 4 * 2).contains(&pi),
        );
    }

    #[test]
    fn occluded_loss_ignores_cells_outside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = toy_bundle(&mut rng);
        let w = LossWeights::default();
        let eval = |k: &ArrayD<f64>, p: &ArrayD<f64>| {
            let mut g = Graph::<f64>::new();
            let r = Recon {
                keypoints: g.input(k.clone()),
                pafs: g.input(p.clone()),
            };
            loss_occ(&mut g, &r, &b.occluded, &b.occluded_support, &w).unwrap().1
        };
        let k = uniform::<f64>(&mut rng, &[NUM_JOINTS, 8, 8], 1.0);
        let p = uniform::<f64>(&mut rng, &[PAF_CHANNELS, 8, 8], 1.0);
        let base = eval(&k, &p);
        let mut k2 = k.clone();
        let mut p2 = p.clone();
        ndarray::Zip::from(&mut k2).and(&b.occluded_support.keypoints.view().into_dyn()).for_each(|v, &m| {
            if m == 0.0 {
                *v += 5.0
            }
        });
        ndarray::Zip::from(&mut p2).and(&b.occluded_support.pafs.view().into_dyn()).for_each(|v, &m| {
            if m == 0.0 {
                *v -= 3.0
            }
        });
        assert!((eval(&k2, &p2) - base).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn two_d_mode_drops_depth_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = toy_maps(&mut rng);
        let x2 = maps_to_input::<f32>(&m, false, 0.01);
        let x3 = maps_to_input::<f32>(&m, true, 0.01);
        assert_eq!(x2.shape(), &[43, 8, 8]);
        assert_eq!(x3.shape(), &[57, 8, 8]);
        assert_eq!(x3[[NUM_JOINTS + 2, 1, 1]], m.pafs[[2, 1, 1]] * 0.01);
        assert_eq!(x2[[NUM_JOINTS + 2, 1, 1]], m.pafs[[3, 1, 1]]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(DsedLayout::new::<f32>(DsedConfig { channels: vec![], ..Default::default() }, 0).is_err());
        let (l, ps) = DsedLayout::new::<f32>(toy_cfg(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[57, 7, 8])));
        assert!(l.student_forward(&mut g, &ps, x).is_err());
        let x = g.input(ArrayD::zeros(IxDyn(&[43, 8, 8])));
        assert!(l.student_forward(&mut g, &ps, x).is_err());
    }

    #[test]
    fn fusion_clamps_keypoints_and_fills_missing_pafs() {
        let mut det = HeatmapSet::zeros(2, 2);
        det.keypoints[[0, 0, 0]] = 0.8;
        det.pafs[[0, 0, 0]] = 1.0;
        det.pafs[[2, 0, 0]] = 50.0;
        let mut rk = Array3::zeros((NUM_JOINTS, 2, 2));
        rk[[0, 0, 0]] = 0.5;
        rk[[0, 1, 1]] = -0.3;
        let mut rp = Array3::zeros((PAF_CHANNELS, 2, 2));
        rp[[0, 0, 0]] = -1.0;
        rp[[1, 1, 0]] = 0.6;
        rp[[2, 1, 0]] = 70.0;
        rp[[0, 0, 1]] = 0.2;
        rp[[2, 0, 1]] = 9.0;
        let f = fuse(&det, &rk, &rp);
        assert_eq!(f.keypoints[[0, 0, 0]], 1.0);
        assert_eq!(f.keypoints[[0, 1, 1]], 0.0);
        assert_eq!((f.pafs[[0, 0, 0]], f.pafs[[2, 0, 0]]), (1.0, 50.0));
        assert_eq!((f.pafs[[1, 1, 0]], f.pafs[[2, 1, 0]]), (1.0, 70.0));
        assert_eq!((f.pafs[[0, 0, 1]], f.pafs[[2, 0, 1]]), (0.0, 0.0));
    }

    #[test]
    fn hourglass_baseline_matches_inference_parameter_count() {
        let cfg = DsedConfig::default();
        let d = Reasoner::new_dsed(cfg.clone(), 0).unwrap();
        let h = Reasoner::new_hourglass(cfg, 3, 0).unwrap();
        let (a, b) = (d.inference_param_count() as f64, h.inference_param_count() as f64);
        assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
    }

    #[test]
    fn checkpoints_round_trip_for_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = toy_maps(&mut rng);
        for r in [
            Reasoner::new_dsed(toy_cfg(), 1).unwrap(),
            Reasoner::new_hourglass_with(toy_cfg(), 5, 2, 1).unwrap(),
        ] {
            let p = dir.path().join("r.safetensors");
            r.save(&p).unwrap();
            let back = Reasoner::load(&p).unwrap();
            assert_eq!(back.kind(), r.kind());
            assert_eq!(back.reason_infer(&m).unwrap(), r.reason_infer(&m).unwrap());
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bundles: Vec<TargetBundle> = (0..4).map(|_| toy_bundle(&mut rng)).collect();
        let det: Vec<ReasonSample> = bundles
            .iter()
            .map(|b| ReasonSample {
                detected: Some(b.visible.clone()),
                targets: b.clone(),
            })
            .collect();
        let cfg = ReasonTrainConfig {
            train: TrainConfig {
                epochs: 30,
                batch_size: 2,
                adam: crate::nn::AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        };
        let run = || train_reasoner(Reasoner::new_dsed(toy_cfg(), 3).unwrap(), &det, &bundles, &LossWeights::default(), &cfg).unwrap();
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(m1.params.values, m2.params.values);
        assert_eq!(log1, log2);
        assert!(log1.iter().any(|b| b.mode == 1) && log1.iter().any(|b| b.mode == 2));
        let first = log1[0].loss + log1[1].loss;
        let last = log1[log1.len() - 2].loss + log1[log1.len() - 1].loss;
        assert!(last < first, "{first} -> {last}");
        let syn_only = ReasonTrainConfig {
            schedule: ModeSchedule::SyntheticOnly,
            ..cfg
        };
        let (_, log) = train_reasoner(Reasoner::new_dsed(toy_cfg(), 3).unwrap(), &[], &bundles, &LossWeights::default(), &syn_only).unwrap();
        assert!(log.iter().all(|b| b.mode == 2 && b.occ == 0.0));
    }
}
