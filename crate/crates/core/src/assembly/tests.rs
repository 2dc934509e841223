use super::*;
use crate::skeleton::{L_ELBOW, L_KNEE, L_SHOULDER, L_WRIST, R_SHOULDER, R_WRIST};
use crate::synthbody::{sample_scene, SceneConfig};
use crate::targets::{make_keypoint_maps, make_paf_maps, make_root_depth_maps, TargetConfig};
use ndarray::{Array2, Array3};

fn perfect_maps(poses: &[Pose3D], cam: &Camera) -> HeatmapSet {
    let t = TargetConfig::default();
    HeatmapSet {
        keypoints: make_keypoint_maps(poses, cam, t.sigma).unwrap(),
        pafs: make_paf_maps(poses, cam, t.limb_width).unwrap(),
        root_depth: make_root_depth_maps(poses, cam, t.root_radius).unwrap(),
    }
}

fn separated(people: usize) -> SceneConfig {
    SceneConfig {
        min_people: people,
        max_people: people,
        separated: true,
        occluder_density: 0.0,
        depth_range: (2800.0, 4500.0),
        ..Default::default()
    }
}

fn gaussian(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        let d = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
        (-d / (2.0 * sigma * sigma)).exp() as f32
    })
}

#[test]
fn single_gaussian_gives_one_precise_peak() {
    let m = gaussian(32, 32, 20.0, 10.0, 2.0);
    let p = channel_peaks(m.view(), 4, 0.3);
    assert_eq!(p.len(), 1);
    assert!((p[0].x - 20.0).abs() < 0.5 && (p[0].y - 10.0).abs() < 0.5);

    let m = gaussian(32, 32, 7.3, 12.6, 2.0);
    let p = channel_peaks(m.view(), 0, 0.3);
    assert!((p[0].x - 7.3).abs() < 1e-4 && (p[0].y - 12.6).abs() < 1e-4, "{p:?}");
}

#[test]
fn empty_map_and_adjacent_peaks() {
    let z = Array2::<f32>::zeros((8, 8));
    assert!(channel_peaks(z.view(), 0, 0.3).is_empty());
    let mut m = Array2::<f32>::zeros((8, 8));
    m[[3, 3]] = 0.9;
    m[[3, 4]] = 0.8;
    assert_eq!(channel_peaks(m.view(), 0, 0.3).len(), 1);
    m[[3, 4]] = 0.9;
    assert_eq!(channel_peaks(m.view(), 0, 0.3).len(), 1);
    assert!(extract_peaks(&HeatmapSet::zeros(8, 8), 0.0).is_err());
}

#[test]
fn clamped_plateau_gives_one_peak_at_its_centre() {
    let m = gaussian(32, 32, 12.0, 9.0, 2.0).mapv(|v| (2.0 * v).min(1.0));
    let p = channel_peaks(m.view(), 0, 0.3);
    assert_eq!(p.len(), 1, "{p:?}");
    assert!((p[0].x - 12.0).abs() < 1e-9 && (p[0].y - 9.0).abs() < 1e-9, "{p:?}");
    assert_eq!(p[0].confidence, 1.0);

    // a plateau with a higher cell beside it is not a peak
    let mut m = Array2::<f32>::zeros((8, 8));
    m.slice_mut(s![2..4, 2..5]).fill(0.6);
    m[[3, 5]] = 0.7;
    let p = channel_peaks(m.view(), 0, 0.3);
    assert_eq!(p.len(), 1);
    assert_eq!((p[0].x.round(), p[0].y), (5.0, 3.0));
}

fn cand(joint: usize, x: f64, y: f64) -> JointCandidate {
    JointCandidate {
        joint,
        x,
        y,
        confidence: 1.0,
    }
}

#[test]
fn limb_alignment_terms() {
    let cam = Camera::centered(140.0, 64, 64).unwrap();
    let cfg = AssemblyConfig::default();
    let mut paf = Array3::<f32>::zeros((3, 16, 16));
    for c in 2..=10 {
        paf[[0, 5, c]] = 1.0;
    }
    let (a, b) = (cand(0, 2.0, 5.0), cand(1, 10.0, 5.0));
    let s = score_limb(paf.view(), &a, &b, 3000.0, 10_000.0, &cam, &cfg);
    assert!((s.alignment - 1.0).abs() < 1e-12);
    let s = score_limb(paf.view(), &b, &a, 3000.0, 10_000.0, &cam, &cfg);
    assert!((s.alignment + 1.0).abs() < 1e-12);
    let mut orth = Array3::<f32>::zeros((3, 16, 16));
    orth.slice_mut(s![1, .., ..]).fill(1.0);
    let s = score_limb(orth.view(), &a, &b, 3000.0, 500.0, &cam, &cfg);
    assert_eq!(s.alignment, 0.0);
    assert_eq!(score_limb(paf.view(), &a, &a, 3000.0, 500.0, &cam, &cfg).score, 0.0);
}

#[test]
fn depth_inconsistent_limbs_are_penalised() {
    let cam = Camera::centered(140.0, 64, 64).unwrap();
    let cfg = AssemblyConfig::default();
    // 8 cells at 3 m span 686 mm laterally; a 700 mm bone then implies |dz| of about 140 mm
    let mut paf = Array3::<f32>::zeros((3, 16, 16));
    for c in 2..=10 {
        paf[[0, 5, c]] = 1.0;
        paf[[2, 5, c]] = 140.0;
    }
    let (a, b) = (cand(0, 2.0, 5.0), cand(1, 10.0, 5.0));
    let good = score_limb(paf.view(), &a, &b, 3000.0, 700.0, &cam, &cfg);
    paf.slice_mut(s![2, .., ..]).fill(900.0);
    let bad = score_limb(paf.view(), &a, &b, 3000.0, 700.0, &cam, &cfg);
    assert!(good.depth_factor > 0.95, "{good:?}");
    assert!(bad.depth_factor < 0.2 && bad.score < good.score, "{bad:?}");
}

#[test]
fn tree_paths() {
    let l = template_bone_lengths();
    assert_eq!(tree_path_length(L_WRIST, L_WRIST), 0.0);
    assert!((tree_path_length(L_WRIST, R_WRIST) - 2.0 * (l[2] + l[3] + l[4])).abs() < 1e-9);
    assert!((tree_path_length(L_KNEE, NECK) - (l[0] + l[8] + l[9])).abs() < 1e-9);
    assert!((tree_path_length(L_ELBOW, L_SHOULDER) - l[3]).abs() < 1e-9);
}

fn run(_poses: &[Pose3D], maps: &HeatmapSet, cam: &Camera) -> Vec<PersonEstimate> {
    infer_people(maps, None, cam, &AssemblyConfig::default(), None).unwrap().people
}

/// Index of the ground-truth person whose projected joints match an estimate.
fn owner(p: &PersonEstimate, poses: &[Pose3D], cam: &Camera) -> Vec<Option<usize>> {
    (0..NUM_JOINTS)
        .map(|j| {
            let (x, y) = p.joints2d[j]?;
            poses.iter().position(|g| {
                to_cell(cam, g.joints[j]).is_some_and(|(gx, gy)| (gx - x).hypot(gy - y) < 0.6)
            })
        })
        .collect()
}

#[test]
fn perfect_maps_of_separated_people_are_grouped_and_lifted() {
    let cfg = separated(3);
    for seed in 0..8 {
        let scene = sample_scene(seed, &cfg).unwrap();
        let poses: Vec<Pose3D> = scene.people.iter().map(|b| b.pose).collect();
        let cam = scene.camera;
        let people = run(&poses, &perfect_maps(&poses, &cam), &cam);
        assert_eq!(people.len(), 3, "seed {seed}");
        for p in &people {
            assert_eq!(p.joint_count(), NUM_JOINTS);
            let own = owner(p, &poses, &cam);
            let g = own[0].expect("pelvis matches someone");
            assert!(own.iter().all(|&o| o == Some(g)), "seed {seed}: swapped joints {own:?}");
            let est = p.pose3d.expect("lifted");
            let err: f64 = (0..NUM_JOINTS).map(|j| est.joints[j].dist(poses[g].joints[j])).sum::<f64>() / 15.0;
            assert!(err < 20.0, "seed {seed}: mpjpe {err}");
            assert_eq!(p.root_source, Some(RootSource::Pelvis));
        }
    }
}

#[test]
fn one_person_is_complete_and_empty_input_is_empty() {
    let scene = sample_scene(3, &separated(1)).unwrap();
    let poses = [scene.people[0].pose];
    let people = run(&poses, &perfect_maps(&poses, &scene.camera), &scene.camera);
    assert_eq!(people.len(), 1);
    assert_eq!(people[0].joint_count(), NUM_JOINTS);
    let (p, d) = assemble(&[], &HeatmapSet::zeros(32, 32), &scene.camera, &AssemblyConfig::default()).unwrap();
    assert!(p.is_empty() && d.candidates == 0);
}

#[test]
fn hidden_pelvis_is_bridged_and_root_comes_from_hips() {
    let mut ok = 0;
    for seed in 0..10 {
        let scene = sample_scene(100 + seed, &separated(2)).unwrap();
        let poses: Vec<Pose3D> = scene.people.iter().map(|b| b.pose).collect();
        let cam = scene.camera;
        let mut maps = perfect_maps(&poses, &cam);
        maps.keypoints.slice_mut(s![PELVIS, .., ..]).fill(0.0);
        maps.root_depth.slice_mut(s![0, .., ..]).fill(0.0);
        for e in [0, 8, 11] {
            maps.pafs.slice_mut(s![3 * e..3 * e + 3, .., ..]).fill(0.0);
        }
        let people = run(&poses, &maps, &cam);
        if people.len() != 2 {
            continue;
        }
        let all_good = people.iter().all(|p| {
            let own = owner(p, &poses, &cam);
            let g = own.iter().flatten().next().copied();
            let truth = g.map(|g| poses[g].root().z).unwrap_or(0.0);
            p.joint_count() == NUM_JOINTS - 1
                && own.iter().flatten().all(|&o| Some(o) == g)
                && p.root_source == Some(RootSource::HipPair)
                && (p.root_depth_mm.unwrap() - truth).abs() < 0.03 * truth
        });
        ok += all_good as usize;
    }
    assert!(ok >= 9, "{ok}/10 scenes recovered");
}

fn person_with(conf: &[(usize, f64)]) -> PersonEstimate {
    let mut p = PersonEstimate::empty();
    for &(j, c) in conf {
        p.joints2d[j] = Some((5.0, 5.0 + j as f64));
        p.confidences[j] = c;
    }
    p
}

fn root_maps_with(values: &[(usize, f64)], cam: &Camera) -> Array3<f32> {
    let mut m = Array3::<f32>::zeros((7, 32, 32));
    for &(j, z) in values {
        let ch = torso_channel(j).unwrap();
        m[[ch, 5 + j, 5]] = cam.encode_depth(z) as f32;
    }
    m
}

#[test]
fn root_depth_search_branches() {
    let cam = Camera::centered(140.0, 128, 128).unwrap();
    let cfg = AssemblyConfig::default();
    let p = person_with(&[(PELVIS, 0.9), (L_HIP, 0.9), (R_HIP, 0.9)]);
    let m = root_maps_with(&[(PELVIS, 3210.0), (L_HIP, 2900.0), (R_HIP, 3100.0)], &cam);
    let (z, src) = infer_root_depth(&p, m.view(), &cam, &cfg).unwrap();
    assert_eq!(src, RootSource::Pelvis);
    assert!((z - 3210.0).abs() < 1e-3);

    let p = person_with(&[(PELVIS, 0.2), (L_HIP, 0.9), (R_HIP, 0.9)]);
    let (z, src) = infer_root_depth(&p, m.view(), &cam, &cfg).unwrap();
    assert_eq!(src, RootSource::HipPair);
    assert!((z - 3000.0).abs() < 1e-3);

    let p = person_with(&[(L_SHOULDER, 0.8), (R_SHOULDER, 0.8), (L_HIP, 0.9)]);
    let m = root_maps_with(&[(L_SHOULDER, 4000.0), (R_SHOULDER, 4100.0), (L_HIP, 3000.0)], &cam);
    let (z, src) = infer_root_depth(&p, m.view(), &cam, &cfg).unwrap();
    assert_eq!(src, RootSource::ShoulderPair);
    assert!((z - 4050.0 - cfg.shoulder_depth_offset_mm).abs() < 1e-3);

    let p = person_with(&[(NECK, 0.8)]);
    let m = root_maps_with(&[(NECK, 5000.0)], &cam);
    assert_eq!(infer_root_depth(&p, m.view(), &cam, &cfg).unwrap().1, RootSource::Single(NECK));
    let p = person_with(&[(NECK, 0.4), (L_WRIST, 1.0)]);
    assert!(infer_root_depth(&p, m.view(), &cam, &cfg).is_none());
}

#[test]
fn lifting_contracts() {
    let cam = Camera::centered(140.0, 128, 128).unwrap();
    let mut p = person_with(&[(PELVIS, 1.0), (NECK, 1.0), (L_HIP, 1.0)]);
    assert!(lift_to_3d(&p, &cam).is_err());
    p.root_depth_mm = Some(3000.0);
    let (j, inferred) = lift_joints(&p, &cam).unwrap();
    assert!(!inferred);
    assert!(j[L_WRIST].is_none());
    for q in j.iter().flatten() {
        assert_eq!(q.z, 3000.0);
    }
    p.rel_depths[0] = Some(-120.0);
    let (j, _) = lift_joints(&p, &cam).unwrap();
    assert!((j[NECK].unwrap().z - 2880.0).abs() < 1e-9);
    let back = to_cell(&cam, j[NECK].unwrap()).unwrap();
    let want = p.joints2d[NECK].unwrap();
    assert!((back.0 - want.0).abs() < 1e-9 && (back.1 - want.1).abs() < 1e-9);
}

fn lifted(seed: u64) -> [Option<Vec3>; NUM_JOINTS] {
    let scene = sample_scene(seed, &separated(1)).unwrap();
    scene.people[0].pose.joints.map(Some)
}

#[test]
fn refinement_respects_trust_radius_and_precondition() {
    let net = RefineNet::new(RefineConfig::default(), 1).unwrap();
    let full = lifted(5);
    let (out, imputed) = net.refine(&full).unwrap();
    assert!(imputed.iter().all(|&i| !i));
    for j in 0..NUM_JOINTS {
        assert!(out.joints[j].dist(full[j].unwrap()) <= 50.0 + 1e-6 || j == PELVIS);
    }
    let mut sparse = full;
    for j in [2, 4, 5, 7, 8, 10, 11, 13] {
        sparse[j] = None;
    }
    let (out, imputed) = net.refine(&sparse).unwrap();
    assert!(imputed.iter().all(|&i| !i));
    for j in 0..NUM_JOINTS {
        if let Some(p) = sparse[j] {
            assert_eq!(out.joints[j], p);
        }
    }
}

#[test]
fn short_refinement_training_imputes_a_knee() {
    let train = RefineTrainConfig {
        samples: 4000,
        epochs: 40,
        batch_size: 32,
        ..Default::default()
    };
    let (net, hist) = train_refine(RefineConfig::default(), &train).unwrap();
    assert!(hist.last().unwrap() < &(0.5 * hist[0]), "{hist:?}");
    let mut errs = Vec::new();
    for seed in 0..20 {
        let mut j = lifted(500 + seed);
        let truth = j[L_KNEE].unwrap();
        j[L_KNEE] = None;
        let (out, imputed) = net.refine(&j).unwrap();
        assert!(imputed[L_KNEE]);
        errs.push(out.joints[L_KNEE].dist(truth));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean < 120.0, "mean knee error {mean}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("refine.safetensors");
    net.save(&path).unwrap();
    let back = RefineNet::load(&path).unwrap();
    let j = lifted(77);
    assert_eq!(back.refine(&j).unwrap(), net.refine(&j).unwrap());
}
