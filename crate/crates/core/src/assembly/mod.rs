//! From fused maps to people: peak extraction, depth-aware limb scoring,
//! greedy grouping, root-depth search, lifting and refinement.

mod refine;

pub use refine::{train_refine, RefineConfig, RefineNet, RefineTrainConfig, MIN_REFINE_JOINTS, REFINE_KIND};

use ndarray::{s, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::camera::{heatmap_to_image, image_to_heatmap, Camera, STRIDE};
use crate::error::{validation, Error, Result};
use crate::geom::Vec3;
use crate::pose::Pose3D;
use crate::skeleton::{torso_channel, EDGES, L_HIP, NECK, NUM_EDGES, NUM_JOINTS, PELVIS, R_HIP, SYMMETRY_PAIRS, TORSO};
use crate::synthbody::body::TEMPLATE_OFFSETS;
use crate::targets::HeatmapSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssemblyConfig {
    /// Minimum keypoint value for a peak.
    pub peak_threshold: f64,
    /// Minimum joint confidence for its root-depth estimate to be trusted.
    pub conf_thresh: f64,
    pub max_people: usize,
    /// Points sampled along a candidate limb.
    pub line_samples: usize,
    /// Pairs scoring below this are never connected.
    pub min_limb_score: f64,
    /// Fraction of line samples whose alignment must exceed `min_limb_score`.
    pub min_support_fraction: f64,
    /// Depth-consistency gate width as a fraction of the depth hint.
    pub depth_gate: f64,
    /// Depth hint when no root-depth estimate is available yet.
    pub default_depth_mm: f64,
    /// Largest plausible bone length relative to the template.
    pub max_bone_scale: f64,
    /// Depth of the pelvis minus the depth of the shoulder midpoint.
    pub shoulder_depth_offset_mm: f64,
    /// Depth of the pelvis minus the depth of each torso joint, in root-channel order.
    pub torso_depth_offsets_mm: [f64; 7],
    /// People with fewer joints are discarded.
    pub min_joints: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        let offsets = template_torso_depth_offsets();
        Self {
            peak_threshold: 0.3,
            conf_thresh: 0.5,
            max_people: 10,
            line_samples: 10,
            min_limb_score: 0.2,
            min_support_fraction: 0.7,
            depth_gate: 0.1,
            default_depth_mm: 4000.0,
            max_bone_scale: 1.4,
            shoulder_depth_offset_mm: 0.5 * (offsets[3] + offsets[4]),
            torso_depth_offsets_mm: offsets,
            min_joints: 3,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_threshold > 0.0 && self.peak_threshold < 1.0) {
            return Err(validation!("peak_threshold must be in (0, 1), got {}", self.peak_threshold));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.min_support_fraction) {
            return Err(validation!("conf_thresh and min_support_fraction must be in [0, 1]"));
        }
        if self.max_people == 0 || self.line_samples < 2 {
            return Err(validation!("max_people must be positive and line_samples at least 2"));
        }
        if !(self.depth_gate > 0.0) || !(self.default_depth_mm > 0.0) || !(self.max_bone_scale >= 1.0) {
            return Err(validation!("depth_gate, default_depth_mm must be positive and max_bone_scale >= 1"));
        }
        Ok(())
    }
}

/// Rest-pose joint positions relative to the pelvis.
pub fn template_joints() -> [Vec3; NUM_JOINTS] {
    let mut j = [Vec3::ZERO; NUM_JOINTS];
    for (e, &(p, c)) in EDGES.iter().enumerate() {
        j[c] = j[p] + Vec3::from_array(TEMPLATE_OFFSETS[e]);
    }
    j
}

pub fn template_bone_lengths() -> [f64; NUM_EDGES] {
    TEMPLATE_OFFSETS.map(|o| Vec3::from_array(o).norm())
}

fn template_torso_depth_offsets() -> [f64; 7] {
    let t = template_joints();
    TORSO.map(|j| t[PELVIS].z - t[j].z)
}

/// Sum of template bone lengths on the tree path between two joints: an
/// upper bound on their 3D distance for any pose of a template-sized body.
pub fn tree_path_length(a: usize, b: usize) -> f64 {
    let lens = template_bone_lengths();
    let chain = |mut j: usize| {
        let mut v = vec![j];
        while let Some(e) = EDGES.iter().position(|&(_, c)| c == j) {
            j = EDGES[e].0;
            v.push(j);
        }
        v
    };
    let (ca, cb) = (chain(a), chain(b));
    let lca = *ca.iter().find(|j| cb.contains(j)).expect("tree is rooted");
    let up = |c: &[usize]| {
        c.iter()
            .take_while(|&&j| j != lca)
            .map(|&j| lens[EDGES.iter().position(|&(_, k)| k == j).expect("non-root")])
            .sum::<f64>()
    };
    up(&ca) + up(&cb)
}

/// A keypoint peak in heatmap cells (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCandidate {
    pub joint: usize,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Sub-cell offset of a peak from three samples: a parabola through the
/// logarithms when all are positive (exact for Gaussians), else through the values.
fn subcell(l: f64, c: f64, r: f64) -> f64 {
    let (a, b, d) = if l > 0.0 && c > 0.0 && r > 0.0 {
        (l.ln(), c.ln(), r.ln())
    } else {
        (l, c, r)
    };
    let den = a - 2.0 * b + d;
    if den < 0.0 {
        (0.5 * (a - d) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Peaks of one channel: 3x3 local maxima at or above `tau`, refined to
/// sub-cell precision. A flat top (equal neighbours, e.g. a clamped region)
/// gives a single peak at the centroid of its cells.
pub fn channel_peaks(map: ArrayView2<f32>, joint: usize, tau: f64) -> Vec<JointCandidate> {
    let (h, w) = map.dim();
    let neighbours = |r: usize, c: usize| {
        (-1i64..=1)
            .flat_map(move |dr| (-1i64..=1).map(move |dc| (r as i64 + dr, c as i64 + dc)))
            .filter(move |&(rr, cc)| (rr, cc) != (r as i64, c as i64) && rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64)
            .map(|(rr, cc)| (rr as usize, cc as usize))
    };
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map[[r, c]];
            if (v as f64) < tau || seen[[r, c]] {
                continue;
            }
            // flood the equal-valued component this cell belongs to
            let mut flat = vec![(r, c)];
            seen[[r, c]] = true;
            let mut is_max = true;
            let mut i = 0;
            while i < flat.len() {
                let (fr, fc) = flat[i];
                for (nr, nc) in neighbours(fr, fc) {
                    let n = map[[nr, nc]];
                    if n > v {
                        is_max = false;
                    } else if n == v && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        flat.push((nr, nc));
                    }
                }
                i += 1;
            }
            if !is_max {
                continue;
            }
            let (x, y) = if flat.len() == 1 {
                let at = |rr: usize, cc: usize| map[[rr, cc]] as f64;
                let dx = if c > 0 && c + 1 < w { subcell(at(r, c - 1), v as f64, at(r, c + 1)) } else { 0.0 };
                let dy = if r > 0 && r + 1 < h { subcell(at(r - 1, c), v as f64, at(r + 1, c)) } else { 0.0 };
                (c as f64 + dx, r as f64 + dy)
            } else {
                let n = flat.len() as f64;
                (
                    flat.iter().map(|&(_, fc)| fc as f64).sum::<f64>() / n,
                    flat.iter().map(|&(fr, _)| fr as f64).sum::<f64>() / n,
                )
            };
            out.push(JointCandidate {
                joint,
                x,
                y,
                confidence: (v as f64).min(1.0),
            });
        }
    }
    out
}

/// Peaks of every keypoint channel, sorted by confidence (then joint, position).
pub fn extract_peaks(maps: &HeatmapSet, tau: f64) -> Result<Vec<JointCandidate>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(validation!("peak threshold must be in (0, 1), got {tau}"));
    }
    let mut all: Vec<JointCandidate> = (0..NUM_JOINTS)
        .flat_map(|j| channel_peaks(maps.keypoints.slice(s![j, .., ..]), j, tau))
        .collect();
    all.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.joint.cmp(&b.joint))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    Ok(all)
}

/// Result of scoring one candidate limb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbScore {
    /// Mean PAF alignment with the a→b direction, in [-1, 1].
    pub alignment: f64,
    /// Fraction of samples whose alignment exceeds the configured minimum.
    pub support: f64,
    /// Mean PAF depth over samples with PAF support (None if there are none).
    pub dz: Option<f64>,
    /// Depth-consistency factor in (0, 1].
    pub depth_factor: f64,
    pub score: f64,
}

impl LimbScore {
    fn zero() -> Self {
        Self {
            alignment: 0.0,
            support: 0.0,
            dz: None,
            depth_factor: 1.0,
            score: 0.0,
        }
    }
}

/// Line integral of the PAF `[3, h, w]` from `a` to `b`, scaled by the depth
/// gate `exp(-| |dz_paf| - |dz_implied| | / (gate * z_hint))`. The implied
/// depth change is what a bone of length `bone_mm` needs to span the observed
/// image length at depth `z_hint`.
pub fn score_limb(
    paf: ArrayView3<f32>,
    a: &JointCandidate,
    b: &JointCandidate,
    z_hint: f64,
    bone_mm: f64,
    camera: &Camera,
    cfg: &AssemblyConfig,
) -> LimbScore {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    if len < 1e-9 {
        return LimbScore::zero();
    }
    let (ux, uy) = (dx / len, dy / len);
    let (_, h, w) = paf.dim();
    let n = cfg.line_samples;
    let (mut sum, mut good, mut zsum, mut zn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let (x, y) = (a.x + t * dx, a.y + t * dy);
        let (c, r) = (x.round().clamp(0.0, (w - 1) as f64) as usize, y.round().clamp(0.0, (h - 1) as f64) as usize);
        let (px, py, pz) = (paf[[0, r, c]] as f64, paf[[1, r, c]] as f64, paf[[2, r, c]] as f64);
        let al = px * ux + py * uy;
        sum += al;
        if al > cfg.min_limb_score {
            good += 1;
        }
        if px.hypot(py) > 0.5 {
            zsum += pz;
            zn += 1;
        }
    }
    let alignment = sum / n as f64;
    let support = good as f64 / n as f64;
    let dz = (zn > 0).then(|| zsum / zn as f64);
    let depth_factor = match dz {
        Some(dz) if z_hint > 0.0 => {
            let lateral = len * STRIDE as f64 * z_hint / camera.focal;
            let implied = (bone_mm * bone_mm - lateral * lateral).max(0.0).sqrt();
            (-(dz.abs() - implied).abs() / (cfg.depth_gate * z_hint)).exp()
        }
        _ => 1.0,
    };
    LimbScore {
        alignment,
        support,
        dz,
        depth_factor,
        score: alignment * depth_factor,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Found by the detector.
    Detected,
    /// Present only after reasoning.
    Reasoned,
    /// Imputed geometrically or by the refinement network.
    Refined,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSource {
    Pelvis,
    HipPair,
    ShoulderPair,
    Single(usize),
}

/// One assembled person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonEstimate {
    /// Heatmap-cell positions (x, y).
    pub joints2d: [Option<(f64, f64)>; NUM_JOINTS],
    pub confidences: [f64; NUM_JOINTS],
    /// PAF depth change (mm) of each connected edge.
    pub rel_depths: [Option<f64>; NUM_EDGES],
    pub root_depth_mm: Option<f64>,
    pub root_source: Option<RootSource>,
    pub pose3d: Option<Pose3D>,
    pub provenance: [Provenance; NUM_JOINTS],
}

impl PersonEstimate {
    fn empty() -> Self {
        Self {
            joints2d: [None; NUM_JOINTS],
            confidences: [0.0; NUM_JOINTS],
            rel_depths: [None; NUM_EDGES],
            root_depth_mm: None,
            root_source: None,
            pose3d: None,
            provenance: [Provenance::Missing; NUM_JOINTS],
        }
    }

    fn set(&mut self, c: &JointCandidate) {
        self.joints2d[c.joint] = Some((c.x, c.y));
        self.confidences[c.joint] = c.confidence;
        self.provenance[c.joint] = Provenance::Detected;
    }

    pub fn joint_count(&self) -> usize {
        self.joints2d.iter().filter(|j| j.is_some()).count()
    }

    fn total_confidence(&self) -> f64 {
        self.confidences.iter().sum()
    }
}

/// Decoded depth (mm) at a heatmap position of a root channel, if non-zero.
pub fn decode_root_at(root_maps: ArrayView3<f32>, channel: usize, (x, y): (f64, f64), camera: &Camera) -> Option<f64> {
    let (_, h, w) = root_maps.dim();
    let (c, r) = (x.round(), y.round());
    if c < 0.0 || r < 0.0 || c >= w as f64 || r >= h as f64 {
        return None;
    }
    let v = root_maps[[channel, r as usize, c as usize]] as f64;
    (v > 0.0).then(|| camera.decode_depth(v))
}

/// Depth hint for a person: the first torso joint with a root-depth reading.
fn depth_hint(p: &PersonEstimate, root: ArrayView3<f32>, camera: &Camera) -> Option<f64> {
    TORSO.iter().enumerate().find_map(|(ch, &j)| p.joints2d[j].and_then(|pt| decode_root_at(root, ch, pt, camera)))
}

/// Diagnostics from one assembly pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssemblyDiagnostics {
    pub candidates: usize,
    pub unmatched_candidates: usize,
    pub merges: usize,
    pub dropped_people: usize,
}

/// Groups candidates into people: greedy matching per edge in tree order,
/// then merging of fragments whose joint sets are disjoint and whose
/// nearest joints lie within a bone-chain's reach.
pub fn assemble(
    candidates: &[JointCandidate],
    maps: &HeatmapSet,
    camera: &Camera,
    cfg: &AssemblyConfig,
) -> Result<(Vec<PersonEstimate>, AssemblyDiagnostics)> {
    cfg.validate()?;
    let mut diag = AssemblyDiagnostics {
        candidates: candidates.len(),
        ..Default::default()
    };
    let by_type: Vec<Vec<usize>> = (0..NUM_JOINTS)
        .map(|j| (0..candidates.len()).filter(|&i| candidates[i].joint == j).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; candidates.len()];
    let mut people: Vec<PersonEstimate> = Vec::new();
    let bones = template_bone_lengths();
    let root = maps.root_depth.view();

    for (e, &(pj, cj)) in EDGES.iter().enumerate() {
        let paf = maps.pafs.slice(s![3 * e..3 * e + 3, .., ..]);
        let mut pairs = Vec::new();
        for &ia in &by_type[pj] {
            let a = &candidates[ia];
            let hint = owner[ia]
                .and_then(|p| depth_hint(&people[p], root, camera))
                .or_else(|| torso_channel(pj).and_then(|ch| decode_root_at(root, ch, (a.x, a.y), camera)))
                .unwrap_or(cfg.default_depth_mm);
            let reach = cfg.max_bone_scale * bones[e] * camera.focal / (hint * STRIDE as f64) + 1.0;
            for &ib in &by_type[cj] {
                let b = &candidates[ib];
                if (b.x - a.x).hypot(b.y - a.y) > reach {
                    continue;
                }
                let s = score_limb(paf, a, b, hint, bones[e], camera, cfg);
                if s.score > cfg.min_limb_score && s.support >= cfg.min_support_fraction {
                    pairs.push((ia, ib, s));
                }
            }
        }
        pairs.sort_by(|x, y| {
            y.2.score
                .total_cmp(&x.2.score)
                .then((candidates[y.0].confidence + candidates[y.1].confidence).total_cmp(&(candidates[x.0].confidence + candidates[x.1].confidence)))
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        let mut used_a = vec![false; candidates.len()];
        for (ia, ib, s) in pairs {
            if used_a[ia] || owner[ib].is_some() {
                continue;
            }
            let pid = match owner[ia] {
                Some(p) if people[p].joints2d[cj].is_none() => p,
                Some(_) => continue,
                None => {
                    let mut p = PersonEstimate::empty();
                    p.set(&candidates[ia]);
                    people.push(p);
                    owner[ia] = Some(people.len() - 1);
                    people.len() - 1
                }
            };
            people[pid].set(&candidates[ib]);
            people[pid].rel_depths[e] = s.dz;
            owner[ib] = Some(pid);
            used_a[ia] = true;
        }
    }
    // singletons take part in merging
    for (i, c) in candidates.iter().enumerate() {
        if owner[i].is_none() {
            let mut p = PersonEstimate::empty();
            p.set(c);
            people.push(p);
            owner[i] = Some(people.len() - 1);
        }
    }
    diag.merges = merge_fragments(&mut people, root, camera, cfg);

    let before = people.len();
    people.retain(|p| p.joint_count() >= cfg.min_joints);
    diag.unmatched_candidates = candidates.len() - people.iter().map(|p| p.joint_count()).sum::<usize>();
    people.sort_by(|a, b| b.total_confidence().total_cmp(&a.total_confidence()));
    people.truncate(cfg.max_people);
    diag.dropped_people = before - people.len();
    Ok((people, diag))
}

/// Repeatedly merges the closest compatible pair of people (disjoint joints,
/// at least one lacking the pelvis). Returns the number of merges.
fn merge_fragments(people: &mut Vec<PersonEstimate>, root: ArrayView3<f32>, camera: &Camera, cfg: &AssemblyConfig) -> usize {
    let mut merges = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..people.len() {
            for k in i + 1..people.len() {
                let (a, b) = (&people[i], &people[k]);
                if a.joints2d[PELVIS].is_some() && b.joints2d[PELVIS].is_some() {
                    continue;
                }
                if (0..NUM_JOINTS).any(|j| a.joints2d[j].is_some() && b.joints2d[j].is_some()) {
                    continue;
                }
                let (ha, hb) = (depth_hint(a, root, camera), depth_hint(b, root, camera));
                if let (Some(za), Some(zb)) = (ha, hb) {
                    if (za - zb).abs() > cfg.depth_gate * za.min(zb) {
                        continue;
                    }
                }
                let z = ha.or(hb).unwrap_or(cfg.default_depth_mm);
                let cells_per_mm = camera.focal / (z * STRIDE as f64);
                // the tree-nearest pair of joints gives the tightest bound
                let mut tight: Option<(f64, f64)> = None;
                for ja in (0..NUM_JOINTS).filter(|&j| a.joints2d[j].is_some()) {
                    for jb in (0..NUM_JOINTS).filter(|&j| b.joints2d[j].is_some()) {
                        let path = tree_path_length(ja, jb);
                        let (pa, pb) = (a.joints2d[ja].expect("present"), b.joints2d[jb].expect("present"));
                        let d = (pa.0 - pb.0).hypot(pa.1 - pb.1);
                        if tight.is_none_or(|(p, _)| path < p) {
                            tight = Some((path, d));
                        }
                    }
                }
                let Some((path, d)) = tight else { continue };
                let reach = cfg.max_bone_scale * path * cells_per_mm + 1.0;
                if d > reach {
                    continue;
                }
                let ratio = d / reach;
                if best.is_none_or(|(r, _, _)| ratio < r) {
                    best = Some((ratio, i, k));
                }
            }
        }
        let Some((_, i, k)) = best else { break };
        let b = people.remove(k);
        let a = &mut people[i];
        for j in 0..NUM_JOINTS {
            if b.joints2d[j].is_some() {
                a.joints2d[j] = b.joints2d[j];
                a.confidences[j] = b.confidences[j];
                a.provenance[j] = b.provenance[j];
            }
        }
        for e in 0..NUM_EDGES {
            if b.rel_depths[e].is_some() {
                a.rel_depths[e] = b.rel_depths[e];
            }
        }
        merges += 1;
    }
    merges
}

/// Root (pelvis) depth by tree search: a confident pelvis reading, else the
/// first confident symmetric torso pair, else the first confident torso joint.
pub fn infer_root_depth(
    person: &PersonEstimate,
    root_maps: ArrayView3<f32>,
    camera: &Camera,
    cfg: &AssemblyConfig,
) -> Option<(f64, RootSource)> {
    let reading = |j: usize| -> Option<f64> {
        if person.confidences[j] < cfg.conf_thresh {
            return None;
        }
        let ch = torso_channel(j)?;
        decode_root_at(root_maps, ch, person.joints2d[j]?, camera)
    };
    if let Some(z) = reading(PELVIS) {
        return Some((z, RootSource::Pelvis));
    }
    for (k, &(l, r)) in SYMMETRY_PAIRS.iter().enumerate() {
        if let (Some(zl), Some(zr)) = (reading(l), reading(r)) {
            let mid = 0.5 * (zl + zr);
            return Some(if k == 0 {
                (mid, RootSource::HipPair)
            } else {
                (mid + cfg.shoulder_depth_offset_mm, RootSource::ShoulderPair)
            });
        }
    }
    TORSO
        .iter()
        .enumerate()
        .find_map(|(ch, &j)| reading(j).map(|z| (z + cfg.torso_depth_offsets_mm[ch], RootSource::Single(j))))
}

/// Image position of the pelvis: detected, else the hip midpoint, else one
/// template torso length below the neck.
fn pelvis_cell(p: &PersonEstimate, z: f64, camera: &Camera) -> Option<(f64, f64)> {
    if let Some(c) = p.joints2d[PELVIS] {
        return Some(c);
    }
    if let (Some(a), Some(b)) = (p.joints2d[L_HIP], p.joints2d[R_HIP]) {
        return Some((0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1)));
    }
    let torso = template_bone_lengths()[0];
    p.joints2d[NECK].map(|n| (n.0, n.1 + torso * camera.focal / (z * STRIDE as f64)))
}

/// Lifted joints (None where missing) and whether the pelvis was inferred.
pub fn lift_joints(person: &PersonEstimate, camera: &Camera) -> Result<([Option<Vec3>; NUM_JOINTS], bool)> {
    let z_root = person
        .root_depth_mm
        .ok_or_else(|| Error::Domain("cannot lift a person without a root depth".into()))?;
    let mut cells = person.joints2d;
    let inferred = cells[PELVIS].is_none();
    if inferred {
        cells[PELVIS] = pelvis_cell(person, z_root, camera);
    }
    let mut z = [0.0; NUM_JOINTS];
    z[PELVIS] = z_root;
    for (e, &(p, c)) in EDGES.iter().enumerate() {
        z[c] = z[p] + person.rel_depths[e].unwrap_or(0.0);
    }
    let mut out = [None; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        if let Some((x, y)) = cells[j] {
            if z[j] > 0.0 {
                out[j] = Some(camera.backproject((heatmap_to_image(x), heatmap_to_image(y)), z[j])?);
            }
        }
    }
    Ok((out, inferred && out[PELVIS].is_some()))
}

/// Full 3D pose; missing joints are placed at the pelvis position.
pub fn lift_to_3d(person: &PersonEstimate, camera: &Camera) -> Result<Pose3D> {
    let (joints, _) = lift_joints(person, camera)?;
    let root = joints[PELVIS].ok_or_else(|| Error::Domain("pelvis position could not be inferred".into()))?;
    Ok(Pose3D::new(0, joints.map(|j| j.unwrap_or(root))))
}

/// Per-frame inference result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub people: Vec<PersonEstimate>,
    pub diagnostics: AssemblyDiagnostics,
}

/// Maps to people. `detected`, when given, marks joints without a detector
/// peak as reasoned.
pub fn infer_people(
    fused: &HeatmapSet,
    detected: Option<&HeatmapSet>,
    camera: &Camera,
    cfg: &AssemblyConfig,
    refine: Option<&RefineNet>,
) -> Result<FrameResult> {
    let cands = extract_peaks(fused, cfg.peak_threshold)?;
    let (mut people, diagnostics) = assemble(&cands, fused, camera, cfg)?;
    for p in &mut people {
        if let Some(det) = detected {
            for j in 0..NUM_JOINTS {
                if let Some((x, y)) = p.joints2d[j] {
                    let v = det.keypoints[[j, y.round() as usize, x.round() as usize]] as f64;
                    if v < cfg.peak_threshold {
                        p.provenance[j] = Provenance::Reasoned;
                    }
                }
            }
        }
        let Some((z, src)) = infer_root_depth(p, fused.root_depth.view(), camera, cfg) else {
            continue;
        };
        p.root_depth_mm = Some(z);
        p.root_source = Some(src);
        let (joints, pelvis_inferred) = lift_joints(p, camera)?;
        let Some(root) = joints[PELVIS] else { continue };
        if pelvis_inferred {
            p.provenance[PELVIS] = Provenance::Refined;
        }
        let pose = match refine {
            Some(net) => {
                let (pose, imputed) = net.refine(&joints)?;
                for j in 0..NUM_JOINTS {
                    if imputed[j] {
                        p.provenance[j] = Provenance::Refined;
                    }
                }
                pose
            }
            None => Pose3D::new(0, joints.map(|j| j.unwrap_or(root))),
        };
        p.pose3d = Some(pose);
    }
    Ok(FrameResult { people, diagnostics })
}

/// Heatmap-cell coordinates of a camera-frame point.
pub fn to_cell(camera: &Camera, p: Vec3) -> Option<(f64, f64)> {
    let (u, v) = camera.project(p).ok()?;
    Some((image_to_heatmap(u), image_to_heatmap(v)))
}

#[cfg(test)]
mod tests;
