//! Person matching, PCK / MPJPE, map-level joint detection rates and the
//! ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assembly::channel_peaks;
use crate::camera::{image_to_heatmap, Camera};
use crate::error::{validation, Result};
use crate::occlabel::{OcclusionLabels, OCCLUDED, VISIBLE};
use crate::pose::Pose3D;
use crate::skeleton::{NUM_JOINTS, PELVIS};
use crate::targets::HeatmapSet;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const MATCH_GATE_MM: f64 = 500.0;

/// One-to-one assignment of predictions to ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// (prediction index, ground-truth index, root distance mm), in pick order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Matching {
    pub fn gt_to_pred(&self, n_gt: usize) -> Vec<Option<usize>> {
        let mut m = vec![None; n_gt];
        for &(p, g, _) in &self.pairs {
            m[g] = Some(p);
        }
        m
    }
}

/// Greedy matching by ascending root distance; pairs farther than `gate` stay
/// unmatched. Ties go to the lower ground-truth then prediction index.
pub fn match_people(preds: &[Pose3D], gts: &[Pose3D], gate: f64) -> Matching {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        for (p, pr) in preds.iter().enumerate() {
            let d = pr.root().dist(gt.root());
            if d <= gate {
                cand.push((d, g, p));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; preds.len()], vec![false; gts.len()]);
    let mut pairs = Vec::new();
    for (d, g, p) in cand {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            pairs.push((p, g, d));
        }
    }
    Matching {
        pairs,
        unmatched_preds: (0..preds.len()).filter(|&p| !used_p[p]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&g| !used_g[g]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckMode {
    /// Camera-frame positions.
    Abs,
    /// Root-aligned positions.
    Rel,
    /// Root-aligned, occluded joints only.
    Occ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeopleMode {
    /// Unmatched ground-truth people count as all-incorrect.
    All,
    /// Only matched people are evaluated.
    Matched,
}

/// Per-joint errors of a matched pair under `mode`.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D, mode: PckMode) -> [f64; NUM_JOINTS] {
    let (pr, gr) = match mode {
        PckMode::Abs => (crate::Vec3::ZERO, crate::Vec3::ZERO),
        _ => (pred.joints[PELVIS], gt.joints[PELVIS]),
    };
    std::array::from_fn(|j| (pred.joints[j] - pr).dist(gt.joints[j] - gr))
}

fn evaluated(mode: PckMode, labels: Option<&[u8; NUM_JOINTS]>, j: usize) -> bool {
    match mode {
        PckMode::Occ => labels.is_some_and(|l| l[j] == OCCLUDED),
        _ => true,
    }
}

/// Correct / evaluated joint counts and the error sum over matched joints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTally {
    pub correct: usize,
    pub total: usize,
    /// Sum of errors over matched evaluated joints.
    pub error_sum: f64,
    pub matched_joints: usize,
}

impl JointTally {
    pub fn add(&mut self, o: &JointTally) {
        self.correct += o.correct;
        self.total += o.total;
        self.error_sum += o.error_sum;
        self.matched_joints += o.matched_joints;
    }

    pub fn pck(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    pub fn mpjpe(&self) -> Option<f64> {
        (self.matched_joints > 0).then(|| self.error_sum / self.matched_joints as f64)
    }
}

/// Tallies one frame. `labels` is required for the occluded mode.
pub fn tally(
    matching: &Matching,
    preds: &[Pose3D],
    gts: &[Pose3D],
    mode: PckMode,
    labels: Option<&OcclusionLabels>,
    thresh: f64,
    people: PeopleMode,
) -> Result<JointTally> {
    if mode == PckMode::Occ && labels.is_none() {
        return Err(validation!("occluded-joint metrics need occlusion labels"));
    }
    if let Some(l) = labels {
        if l.labels.len() != gts.len() {
            return Err(validation!("{} label rows for {} ground-truth people", l.labels.len(), gts.len()));
        }
    }
    let row = |g: usize| labels.map(|l| &l.labels[g]);
    let mut t = JointTally::default();
    for &(p, g, _) in &matching.pairs {
        let err = joint_errors(&preds[p], &gts[g], mode);
        for (j, &e) in err.iter().enumerate() {
            if evaluated(mode, row(g), j) {
                t.total += 1;
                t.correct += (e < thresh) as usize;
                t.error_sum += e;
                t.matched_joints += 1;
            }
        }
    }
    if people == PeopleMode::All {
        for &g in &matching.unmatched_gts {
            t.total += (0..NUM_JOINTS).filter(|&j| evaluated(mode, row(g), j)).count();
        }
    }
    Ok(t)
}

/// Percentage of evaluated joints with error below `thresh` (None if nothing is evaluated).
pub fn pck(
    matching: &Matching,
    preds: &[Pose3D],
    gts: &[Pose3D],
    mode: PckMode,
    labels: Option<&OcclusionLabels>,
    thresh: f64,
    people: PeopleMode,
) -> Result<Option<f64>> {
    Ok(tally(matching, preds, gts, mode, labels, thresh, people)?.pck())
}

/// Mean joint error over matched people (None for an empty matching).
pub fn mpjpe(matching: &Matching, preds: &[Pose3D], gts: &[Pose3D], mode: PckMode, labels: Option<&OcclusionLabels>) -> Result<Option<f64>> {
    Ok(tally(matching, preds, gts, mode, labels, PCK_THRESHOLD_MM, PeopleMode::Matched)?.mpjpe())
}

/// One evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub preds: Vec<Pose3D>,
    pub gts: Vec<Pose3D>,
    pub labels: OcclusionLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub people_mode: PeopleMode,
    pub threshold_mm: f64,
    pub pck_abs: Option<f64>,
    pub pck_rel: Option<f64>,
    pub pck_occ: Option<f64>,
    pub mpjpe_rel: Option<f64>,
    pub mpjpe_occ: Option<f64>,
    pub matched_count: usize,
    pub total_gt: usize,
    pub total_pred: usize,
    /// Root-aligned PCK per joint.
    pub per_joint_pck_rel: Vec<Option<f64>>,
    pub occluded_joints: usize,
    pub visible_joints: usize,
}

/// Aggregates joint counts over frames (not an average of per-frame percentages).
pub fn evaluate(frames: &[FrameEval], thresh: f64, people: PeopleMode) -> Result<EvalReport> {
    let (mut abs, mut rel, mut occ) = (JointTally::default(), JointTally::default(), JointTally::default());
    let mut per_joint = [JointTally::default(); NUM_JOINTS];
    let (mut matched, mut total_gt, mut total_pred, mut n_occ, mut n_vis) = (0, 0, 0, 0, 0);
    for f in frames {
        let m = match_people(&f.preds, &f.gts, MATCH_GATE_MM);
        abs.add(&tally(&m, &f.preds, &f.gts, PckMode::Abs, Some(&f.labels), thresh, people)?);
        rel.add(&tally(&m, &f.preds, &f.gts, PckMode::Rel, Some(&f.labels), thresh, people)?);
        occ.add(&tally(&m, &f.preds, &f.gts, PckMode::Occ, Some(&f.labels), thresh, people)?);
        for &(p, g, _) in &m.pairs {
            let e = joint_errors(&f.preds[p], &f.gts[g], PckMode::Rel);
            for j in 0..NUM_JOINTS {
                per_joint[j].total += 1;
                per_joint[j].correct += (e[j] < thresh) as usize;
            }
        }
        if people == PeopleMode::All {
            for _ in &m.unmatched_gts {
                per_joint.iter_mut().for_each(|t| t.total += 1);
            }
        }
        for row in &f.labels.labels {
            n_occ += row.iter().filter(|&&l| l == OCCLUDED).count();
            n_vis += row.iter().filter(|&&l| l == VISIBLE).count();
        }
        matched += m.pairs.len();
        total_gt += f.gts.len();
        total_pred += f.preds.len();
    }
    Ok(EvalReport {
        people_mode: people,
        threshold_mm: thresh,
        pck_abs: abs.pck(),
        pck_rel: rel.pck(),
        pck_occ: occ.pck(),
        mpjpe_rel: rel.mpjpe(),
        mpjpe_occ: occ.mpjpe(),
        matched_count: matched,
        total_gt,
        total_pred,
        per_joint_pck_rel: per_joint.iter().map(|t| t.pck()).collect(),
        occluded_joints: n_occ,
        visible_joints: n_vis,
    })
}

/// Hits / total for a map-level joint detection rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionTally {
    pub hits: usize,
    pub total: usize,
}

impl DetectionTally {
    pub fn add(&mut self, o: DetectionTally) {
        self.hits += o.hits;
        self.total += o.total;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.hits as f64 / self.total as f64)
    }
}

/// For every ground-truth joint carrying label `which`, whether its keypoint
/// channel has a peak (value >= `tau`) within `radius` cells of its projection.
pub fn joint_detection(
    maps: &HeatmapSet,
    gts: &[Pose3D],
    labels: &OcclusionLabels,
    camera: &Camera,
    which: u8,
    tau: f64,
    radius: f64,
) -> Result<DetectionTally> {
    if labels.labels.len() != gts.len() {
        return Err(validation!("{} label rows for {} people", labels.labels.len(), gts.len()));
    }
    let peaks: Vec<_> = (0..NUM_JOINTS)
        .map(|j| channel_peaks(maps.keypoints.slice(ndarray::s![j, .., ..]), j, tau))
        .collect();
    let mut t = DetectionTally::default();
    for (g, row) in gts.iter().zip(&labels.labels) {
        for j in 0..NUM_JOINTS {
            if row[j] != which {
                continue;
            }
            let Ok((u, v)) = camera.project(g.joints[j]) else { continue };
            let (x, y) = (image_to_heatmap(u), image_to_heatmap(v));
            t.total += 1;
            t.hits += peaks[j].iter().any(|p| (p.x - x).hypot(p.y - y) <= radius) as usize;
        }
    }
    Ok(t)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub pck_rel: Option<f64>,
    pub pck_occ: Option<f64>,
    /// Occluded joints with a peak within 2 cells (%).
    pub occ_detect: Option<f64>,
    /// Visible joints with a peak within 1 cell (%).
    pub vis_detect: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "NA".into())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,pck_rel,pck_occ,occ_detect,vis_detect\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method,
            fmt_opt(r.pck_rel),
            fmt_opt(r.pck_occ),
            fmt_opt(r.occ_detect),
            fmt_opt(r.vis_detect)
        );
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>10}  {:>10}\n", "method", "PCK_rel", "PCK_occ", "occ_detect", "vis_detect");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>8}  {:>8}  {:>10}  {:>10}",
            r.method,
            fmt_opt(r.pck_rel),
            fmt_opt(r.pck_occ),
            fmt_opt(r.occ_detect),
            fmt_opt(r.vis_detect)
        );
    }
    s
}
