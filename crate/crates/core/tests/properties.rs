//! Property tests over randomly generated scenes, poses and maps.

use ndarray::{s, Array3, ArrayD};
use occpose::assembly::{decode_root_at, infer_people, AssemblyConfig};
use occpose::dsed::{fuse, loss_reason, Recon};
use occpose::detnet::{loss_vis, root_samples, HeadVars, LossWeights};
use occpose::evalkit::{match_people, tally, Matching, PckMode, PeopleMode, MATCH_GATE_MM};
use occpose::nn::Graph;
use occpose::occlabel::{classify_joints, loss_hs, skeleton_to_pose, OcclusionLabels, SsfWeights, OCCLUDED, TRUNCATED, VISIBLE};
use occpose::skeleton::{NUM_JOINTS, TORSO};
use occpose::synthbody::{rasterize, sample_scene, SceneConfig};
use occpose::targets::{build_targets, HeatmapSet, TargetConfig, PAF_CHANNELS};
use occpose::{Camera, Pose3D, Vec3};
use proptest::prelude::*;

fn cam() -> Camera {
    SceneConfig::default().camera
}

fn poses_of(seed: u64, cfg: &SceneConfig) -> (occpose::synthbody::Scene, Vec<Pose3D>) {
    let scene = sample_scene(seed, cfg).unwrap();
    let poses = scene.people.iter().map(|b| b.pose).collect();
    (scene, poses)
}

fn offset_pose(base: Vec3, offsets: &[f64]) -> Pose3D {
    Pose3D::new(0, std::array::from_fn(|j| base + Vec3::new(offsets[3 * j], offsets[3 * j + 1], offsets[3 * j + 2])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backproject_then_project_is_identity(u in 0.0..128.0f64, v in 0.0..128.0f64, z in 500.0..9000.0f64) {
        let c = cam();
        let p = c.backproject((u, v), z).unwrap();
        let (u2, v2) = c.project(p).unwrap();
        prop_assert!((u2 - u).abs() <= 1e-9 * u.abs().max(1.0));
        prop_assert!((v2 - v).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn root_depth_decode_inverts_encode(z in 500.0..9000.0f64, x in 0usize..32, y in 0usize..32) {
        let c = cam();
        let mut maps = Array3::<f32>::zeros((7, 32, 32));
        maps[[0, y, x]] = c.encode_depth(z) as f32;
        let back = decode_root_at(maps.view(), 0, (x as f64, y as f64), &c).unwrap();
        prop_assert!((back - z).abs() <= 1e-6 * z, "{back} vs {z}");
    }

    #[test]
    fn scene_sampling_is_a_pure_function_of_seed(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        prop_assert_eq!(sample_scene(seed, &cfg).unwrap(), sample_scene(seed, &cfg).unwrap());
    }

    #[test]
    fn masks_are_consistent(seed in any::<u64>()) {
        let (scene, _) = poses_of(seed, &SceneConfig::default());
        let m = rasterize(&scene);
        for ((&inst, &part), &d) in m.instance_map.iter().zip(m.part_map.iter()).zip(m.depth_buffer.iter()) {
            prop_assert_eq!(inst > 0, part != 255);
            prop_assert_eq!(inst != 0, d.is_finite());
        }
    }

    #[test]
    fn labels_are_ternary_and_truncation_means_out_of_view(seed in any::<u64>()) {
        let (scene, _) = poses_of(seed, &SceneConfig::default());
        let labels = classify_joints(&scene, &rasterize(&scene)).unwrap();
        for (i, row) in labels.labels.iter().enumerate() {
            for (j, &l) in row.iter().enumerate() {
                prop_assert!(l <= VISIBLE);
                let inside = scene.camera.project(scene.people[i].pose.joints[j]).map(|p| scene.camera.in_image(p)).unwrap_or(false);
                prop_assert_eq!(l == TRUNCATED, !inside);
            }
        }
    }

    #[test]
    fn target_maps_hold_their_invariants(seed in any::<u64>()) {
        let (scene, poses) = poses_of(seed, &SceneConfig::default());
        let labels = classify_joints(&scene, &rasterize(&scene)).unwrap();
        let b = build_targets(&poses, &labels, &scene.camera, &TargetConfig::default()).unwrap();
        for m in [&b.all, &b.visible, &b.occluded] {
            prop_assert!(m.validate().is_ok());
            for e in 0..PAF_CHANNELS / 3 {
                let xs = m.pafs.slice(s![3 * e, .., ..]);
                let ys = m.pafs.slice(s![3 * e + 1, .., ..]);
                let zs = m.pafs.slice(s![3 * e + 2, .., ..]);
                for ((&x, &y), &z) in xs.iter().zip(ys.iter()).zip(zs.iter()) {
                    if x == 0.0 && y == 0.0 {
                        prop_assert_eq!(z, 0.0);
                    } else {
                        prop_assert!(((x * x + y * y) - 1.0).abs() <= 4.0 * f32::EPSILON);
                    }
                }
            }
        }
        // a channel peaks at exactly 1 iff some contributing joint is in view
        for j in 0..NUM_JOINTS {
            let in_view = labels.labels.iter().any(|r| r[j] != TRUNCATED);
            let peak = b.all.keypoints.slice(s![j, .., ..]).fold(0.0f32, |a, &v| a.max(v));
            prop_assert_eq!(peak == 1.0, in_view);
        }
    }

    #[test]
    fn visible_loss_ignores_occluded_joints(seed in any::<u64>(), shift in -200.0..200.0f64) {
        let (scene, poses) = poses_of(seed, &SceneConfig::default());
        let labels = classify_joints(&scene, &rasterize(&scene)).unwrap();
        prop_assume!(labels.count(OCCLUDED) > 0);
        let cam = scene.camera;
        let cfg = TargetConfig::default();
        let mut moved = poses.clone();
        for (p, row) in moved.iter_mut().zip(&labels.labels) {
            for j in 0..NUM_JOINTS {
                if row[j] == OCCLUDED {
                    p.joints[j] = p.joints[j] + Vec3::new(shift, -shift, 0.5 * shift);
                }
            }
        }
        let loss = |poses: &[Pose3D]| {
            let t = build_targets(poses, &labels, &cam, &cfg).unwrap().visible;
            let roots = root_samples(poses, &labels, &cam, true);
            let mut g = Graph::<f64>::new();
            let hv = HeadVars {
                keypoints: g.input(ArrayD::from_elem(vec![NUM_JOINTS, 32, 32], 0.3)),
                pafs: g.input(ArrayD::from_elem(vec![PAF_CHANNELS, 32, 32], 0.1)),
                root: g.input(ArrayD::from_elem(vec![7, 32, 32], 20.0)),
            };
            loss_vis(&mut g, &[hv], &t, &roots, &LossWeights::default()).unwrap().1.total
        };
        prop_assert_eq!(loss(&poses), loss(&moved));
    }

    #[test]
    fn fusion_never_lowers_a_detected_peak(vals in prop::collection::vec(0.0..1.0f32, 15 * 4 * 4), recon in prop::collection::vec(-1.5..1.5f32, 15 * 4 * 4)) {
        let mut det = HeatmapSet::zeros(4, 4);
        det.keypoints = Array3::from_shape_vec((NUM_JOINTS, 4, 4), vals).unwrap();
        let rk = Array3::from_shape_vec((NUM_JOINTS, 4, 4), recon).unwrap();
        let f = fuse(&det, &rk, &Array3::zeros((PAF_CHANNELS, 4, 4)));
        for (a, b) in f.keypoints.iter().zip(det.keypoints.iter()) {
            prop_assert!(*a >= *b && *a <= 1.0);
        }
    }

    #[test]
    fn extraction_loss_vanishes_exactly_for_equal_traces(vals in prop::collection::vec(-2.0..2.0f64, 24), bump in 0.01..1.0f64) {
        let extract = |bump: f64| {
            let mut g = Graph::<f64>::new();
            let t = ArrayD::from_shape_vec(vec![6, 2, 2], vals.clone()).unwrap();
            let mut s = t.clone();
            s[[0, 0, 0]] += bump;
            let tv = g.input(t);
            let sv = g.input(s);
            let recon = Recon {
                keypoints: g.input(ArrayD::zeros(vec![NUM_JOINTS, 2, 2])),
                pafs: g.input(ArrayD::zeros(vec![PAF_CHANNELS, 2, 2])),
            };
            loss_reason(&mut g, &[sv], &[tv], &recon, &HeatmapSet::zeros(2, 2), &LossWeights::default()).unwrap().1.extract
        };
        prop_assert_eq!(extract(0.0), 0.0);
        prop_assert!(extract(bump) > 0.0);
    }

    #[test]
    fn pck_is_monotone_in_threshold(offsets in prop::collection::vec(-200.0..200.0f64, 45), t1 in 10.0..200.0f64, dt in 0.0..100.0f64) {
        let gt = offset_pose(Vec3::new(0.0, 0.0, 4000.0), &[0.0; 45]);
        let pred = offset_pose(Vec3::new(0.0, 0.0, 4000.0), &offsets);
        let m = match_people(&[pred], &[gt], f64::INFINITY);
        let at = |t: f64| tally(&m, &[pred], &[gt], PckMode::Rel, None, t, PeopleMode::All).unwrap().correct;
        prop_assert!(at(t1) <= at(t1 + dt));
    }

    #[test]
    fn rel_metrics_ignore_rigid_translation(offsets in prop::collection::vec(-200.0..200.0f64, 45), t in prop::array::uniform3(-400.0..400.0f64)) {
        let gt = offset_pose(Vec3::new(100.0, 50.0, 4000.0), &[0.0; 45]);
        let pred = offset_pose(Vec3::new(100.0, 50.0, 4000.0), &offsets);
        let moved = offset_pose(Vec3::new(100.0 + t[0], 50.0 + t[1], 4000.0 + t[2]), &offsets);
        let m = Matching { pairs: vec![(0, 0, 0.0)], ..Default::default() };
        let a = tally(&m, &[pred], &[gt], PckMode::Rel, None, 150.0, PeopleMode::All).unwrap();
        let b = tally(&m, &[moved], &[gt], PckMode::Rel, None, 150.0, PeopleMode::All).unwrap();
        prop_assert_eq!(a.correct, b.correct);
        prop_assert!((a.error_sum - b.error_sum).abs() < 1e-6);
    }

    #[test]
    fn occluded_and_other_joints_partition_matched_joints(labels in prop::collection::vec(0u8..3, 30), offsets in prop::collection::vec(-100.0..100.0f64, 45)) {
        let gts = vec![
            offset_pose(Vec3::new(-800.0, 0.0, 4000.0), &[0.0; 45]),
            offset_pose(Vec3::new(800.0, 0.0, 4000.0), &[0.0; 45]),
        ];
        let preds = vec![offset_pose(Vec3::new(-800.0, 0.0, 4000.0), &offsets), offset_pose(Vec3::new(800.0, 0.0, 4000.0), &offsets)];
        let rows: Vec<[u8; NUM_JOINTS]> = labels.chunks(NUM_JOINTS).map(|c| std::array::from_fn(|j| c[j])).collect();
        let l = OcclusionLabels { labels: rows.clone() };
        let m = match_people(&preds, &gts, MATCH_GATE_MM);
        let rel = tally(&m, &preds, &gts, PckMode::Rel, Some(&l), 150.0, PeopleMode::Matched).unwrap();
        let occ = tally(&m, &preds, &gts, PckMode::Occ, Some(&l), 150.0, PeopleMode::Matched).unwrap();
        let others: usize = m.pairs.iter().map(|&(_, g, _)| rows[g].iter().filter(|&&x| x != OCCLUDED).count()).sum();
        prop_assert_eq!(rel.matched_joints, occ.matched_joints + others);
    }

    #[test]
    fn fitting_terms_are_non_negative_and_weight_linear(seed in 0u64..10_000, k in 0usize..4, scale in 0.5..3.0f64) {
        let cfg = SceneConfig { min_people: 1, max_people: 1, occluder_density: 0.0, ..Default::default() };
        let (scene, poses) = poses_of(seed, &cfg);
        let body = &scene.people[0];
        let mask = rasterize(&scene).person_mask(1).mapv(|b| b as u8 as f64);
        let mut shape = body.shape;
        shape.beta[0] *= 1.1;
        let params = skeleton_to_pose(&poses[0], &shape).unwrap();
        let base = SsfWeights::default();
        let eval = |w: &SsfWeights| loss_hs(&shape, &params, Some(&body.shape), Some(&body.params), &poses[0], mask.view(), &scene.camera, w).unwrap();
        let a = eval(&base);
        prop_assert!(a.beta >= 0.0 && a.theta >= 0.0 && a.pose >= 0.0 && a.silhouette >= 0.0);
        let mut w2 = base;
        let (term, weight) = match k {
            0 => { w2.lambda_beta *= scale; (a.beta, base.lambda_beta) }
            1 => { w2.lambda_theta *= scale; (a.theta, base.lambda_theta) }
            2 => { w2.lambda_pos *= scale; (a.pose, base.lambda_pos) }
            _ => { w2.lambda_sil *= scale; (a.silhouette, base.lambda_sil) }
        };
        let b = eval(&w2);
        let want = a.total + (scale - 1.0) * weight * term;
        prop_assert!((b.total - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", b.total, want);
    }

    #[test]
    fn assembly_is_idempotent(seed in any::<u64>(), noise in 0.0..0.3f32) {
        let (scene, poses) = poses_of(seed, &SceneConfig::default());
        let labels = classify_joints(&scene, &rasterize(&scene)).unwrap();
        let mut maps = build_targets(&poses, &labels, &scene.camera, &TargetConfig::default()).unwrap().visible;
        // deterministic texture so peaks and limb scores are not all ties
        for ((c, r, q), v) in maps.keypoints.indexed_iter_mut() {
            *v = (*v + noise * (((c * 31 + r * 7 + q * 13) % 17) as f32 / 17.0)).min(1.0);
        }
        let cfg = AssemblyConfig::default();
        let a = infer_people(&maps, None, &scene.camera, &cfg, None).unwrap();
        let b = infer_people(&maps, None, &scene.camera, &cfg, None).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn supersampled_rasterization_agrees_with_direct_rendering() {
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let scene = sample_scene(seed, &SceneConfig::default()).unwrap();
        let direct = rasterize(&scene);
        let fine_scene = occpose::synthbody::Scene {
            camera: scene.camera.scaled(2).unwrap(),
            ..scene.clone()
        };
        let fine = rasterize(&fine_scene);
        let (h, w) = direct.instance_map.dim();
        for r in 0..h {
            for c in 0..w {
                let block = fine.instance_map.slice(s![2 * r..2 * r + 2, 2 * c..2 * c + 2]);
                let count = |v: i32| block.iter().filter(|&&x| x == v).count();
                let best = block.iter().map(|&v| count(v)).max().unwrap();
                // ties are resolved in favour of the direct rendering
                agree += (count(direct.instance_map[[r, c]]) == best) as usize;
                total += 1;
            }
        }
    }
    let rate = agree as f64 / total as f64;
    assert!(rate >= 0.99, "majority-vote agreement {rate}");
}

#[test]
fn torso_channels_are_the_torso_joints() {
    assert_eq!(TORSO.len(), 7);
    let labels = OcclusionLabels {
        labels: vec![[VISIBLE; NUM_JOINTS]],
    };
    let pose = offset_pose(Vec3::new(0.0, 0.0, 4000.0), &(0..45).map(|i| (i as f64 * 37.0) % 300.0 - 150.0).collect::<Vec<_>>());
    let b = build_targets(&[pose], &labels, &cam(), &TargetConfig::default()).unwrap();
    for (ch, &j) in TORSO.iter().enumerate() {
        let (u, v) = cam().project(pose.joints[j]).unwrap();
        let (x, y) = (u / 4.0 - 0.5, v / 4.0 - 0.5);
        let z = decode_root_at(b.all.root_depth.view(), ch, (x, y), &cam());
        assert!(z.is_some_and(|z| (z - pose.joints[j].z).abs() < 1e-3 * pose.joints[j].z) || ch > 0);
    }
}
