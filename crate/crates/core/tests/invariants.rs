use gaitlab_core::normalization::{
    compute_stats, frame_scale, global_average_skeleton, global_coord_standardize, sequence_scale, sequence_translate,
    skeleton_scale, skeleton_translate, DatasetStats,
};
use gaitlab_core::pose::{height, interpolate, middle_crop, pelvis, reorder, AnatomyMap, FrameGeometry, GaitSequence, Pose, NUM_JOINTS};
use proptest::prelude::*;

const CASES: u32 = 1000;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: CASES,
        ..ProptestConfig::default()
    }
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0), NUM_JOINTS)
        .prop_map(|v| Pose::from_slice(&v.into_iter().map(|(x, y)| [x, y]).collect::<Vec<_>>()).unwrap())
}

fn seq_strategy(max_len: usize) -> impl Strategy<Value = GaitSequence> {
    proptest::collection::vec(pose_strategy(), 1..=max_len)
        .prop_map(|poses| GaitSequence::new("s", "q", poses).unwrap().with_tag("view", "90"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn seq_close(a: &GaitSequence, b: &GaitSequence, tol: f64) -> bool {
    a.len() == b.len()
        && a.poses()
            .iter()
            .zip(b.poses())
            .all(|(p, q)| p.flat().zip(q.flat()).all(|(u, v)| close(u, v, tol)))
}

fn same_metadata(a: &GaitSequence, b: &GaitSequence) -> bool {
    a.len() == b.len() && a.subject_id == b.subject_id && a.sequence_id == b.sequence_id && a.tags == b.tags
}

fn stats_for(seqs: &[GaitSequence]) -> DatasetStats {
    compute_stats(seqs, &FrameGeometry::new(640.0, 480.0).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn height_is_translation_invariant_and_homogeneous(p in pose_strategy(), dx in -1e3f64..1e3, dy in -1e3f64..1e3, s in 0.01f64..100.0) {
        prop_assert!(close(height(&p.translated(dx, dy)), height(&p), 1e-9));
        prop_assert!(close(height(&p.scaled(s)), s * height(&p), 1e-12));
    }

    #[test]
    fn pelvis_is_equivariant(p in pose_strategy(), dx in -1e3f64..1e3, dy in -1e3f64..1e3, s in 0.01f64..100.0) {
        let c = pelvis(&p);
        let t = pelvis(&p.translated(dx, dy));
        prop_assert!(close(t[0], c[0] + dx, 1e-12) && close(t[1], c[1] + dy, 1e-12));
        let k = pelvis(&p.scaled(s));
        prop_assert!(close(k[0], s * c[0], 1e-12) && close(k[1], s * c[1], 1e-12));
    }

    #[test]
    fn interpolation_keeps_endpoints(seq in seq_strategy(8), n in 2usize..40) {
        let seq = if seq.len() == 1 { seq.with_poses(vec![seq.poses()[0]; 2]).unwrap() } else { seq };
        let out = interpolate(&seq, n).unwrap();
        prop_assert_eq!(out.len(), n);
        prop_assert_eq!(out.poses()[0], seq.poses()[0]);
        prop_assert_eq!(out.poses()[n - 1], seq.poses()[seq.len() - 1]);
    }

    #[test]
    fn middle_crop_is_the_centred_window(seq in seq_strategy(20), frac in 0.0f64..1.0) {
        let n = 1 + ((seq.len() - 1) as f64 * frac) as usize;
        let out = middle_crop(&seq, n).unwrap();
        let start = (seq.len() - n) / 2;
        prop_assert_eq!(out.poses(), &seq.poses()[start..start + n]);
    }

    #[test]
    fn reorder_then_inverse_is_identity(p in pose_strategy(), perm in Just((0..NUM_JOINTS).collect::<Vec<_>>()).prop_shuffle()) {
        let map = AnatomyMap::new(perm.try_into().unwrap()).unwrap();
        prop_assert_eq!(reorder(&reorder(&p, &map), &map.inverse()), p);
        let d = AnatomyMap::default();
        prop_assert_eq!(reorder(&reorder(&p, &d), &d.inverse()), p);
    }

    #[test]
    fn transforms_are_idempotent(seq in seq_strategy(10)) {
        let st = skeleton_translate(&seq);
        prop_assert!(seq_close(&skeleton_translate(&st), &st, 1e-9));
        let qt = sequence_translate(&seq);
        prop_assert!(seq_close(&sequence_translate(&qt), &qt, 1e-9));
        let ss = skeleton_scale(&seq).unwrap();
        prop_assert!(seq_close(&skeleton_scale(&ss).unwrap(), &ss, 1e-12));
        let qs = sequence_scale(&seq).unwrap();
        prop_assert!(seq_close(&sequence_scale(&qs).unwrap(), &qs, 1e-12));
    }

    #[test]
    fn skeleton_scale_removes_global_scale(seq in seq_strategy(10), s in 0.01f64..100.0) {
        let a = skeleton_scale(&seq).unwrap();
        let b = skeleton_scale(&seq.map_poses(|p| p.scaled(s))).unwrap();
        prop_assert!(seq_close(&a, &b, 1e-9));
        for p in a.poses() {
            prop_assert!(close(height(p), 1.0, 1e-12));
        }
    }

    #[test]
    fn skeleton_translate_removes_position(seq in seq_strategy(10), dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
        let a = skeleton_translate(&seq);
        let b = skeleton_translate(&seq.map_poses(|p| p.translated(dx, dy)));
        prop_assert!(seq_close(&a, &b, 1e-9));
        for p in a.poses() {
            let c = pelvis(p);
            prop_assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9);
        }
    }

    #[test]
    fn sequence_translate_keeps_displacements(seq in seq_strategy(10)) {
        let out = sequence_translate(&seq);
        for (w_in, w_out) in seq.poses().windows(2).zip(out.poses().windows(2)) {
            for j in 0..NUM_JOINTS {
                for c in 0..2 {
                    let before = w_in[1].joint(j)[c] - w_in[0].joint(j)[c];
                    let after = w_out[1].joint(j)[c] - w_out[0].joint(j)[c];
                    prop_assert!((before - after).abs() <= 1e-9, "{} vs {}", before, after);
                }
            }
        }
        let m = pelvis(&out.poses()[out.middle_index()]);
        prop_assert!(m[0].abs() < 1e-12 && m[1].abs() < 1e-12);
    }

    #[test]
    fn sequence_scale_keeps_height_ratios(seq in seq_strategy(10)) {
        let out = sequence_scale(&seq).unwrap();
        let h_in: Vec<f64> = seq.poses().iter().map(height).collect();
        let h_out: Vec<f64> = out.poses().iter().map(height).collect();
        for i in 0..h_in.len() {
            for k in 0..h_in.len() {
                prop_assert!(close(h_in[i] / h_in[k], h_out[i] / h_out[k], 1e-12));
            }
        }
        prop_assert!(close(h_out[out.middle_index()], 1.0, 1e-12));
    }

    #[test]
    fn frame_scale_keeps_coordinate_ratios(seq in seq_strategy(6), w in 1.0f64..4000.0) {
        let out = frame_scale(&seq, &FrameGeometry::new(w, w * 0.75).unwrap()).unwrap();
        let a = seq.poses()[0].joint(0);
        let b = out.poses()[0].joint(0);
        for (p, q) in seq.poses().iter().zip(out.poses()) {
            for j in 0..NUM_JOINTS {
                let (u, v) = (p.joint(j), q.joint(j));
                prop_assert!(close(u[0] * b[0], v[0] * a[0], 1e-12));
                prop_assert!(close(u[1] * b[1], v[1] * a[1], 1e-12));
            }
        }
    }

    #[test]
    fn global_transforms_commute_with_dataset_permutation(
        data in proptest::collection::vec(seq_strategy(4), 2..6),
        order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let stats = stats_for(&data);
        let geom = FrameGeometry::new(640.0, 480.0).unwrap();
        let perm: Vec<usize> = order.into_iter().filter(|&i| i < data.len()).collect();
        let apply = |s: &GaitSequence, stats: &DatasetStats| {
            (
                frame_scale(s, &geom).unwrap(),
                global_average_skeleton(s, stats).unwrap(),
                global_coord_standardize(s, stats),
            )
        };
        let direct: Vec<_> = data.iter().map(|s| apply(s, &stats)).collect();
        let shuffled: Vec<GaitSequence> = perm.iter().map(|&i| data[i].clone()).collect();
        // stats are refit on the permuted dataset
        let reordered = stats_for(&shuffled);
        let after: Vec<_> = shuffled.iter().map(|s| apply(s, &reordered)).collect();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&after[k].0, &direct[i].0);
            prop_assert!(seq_close(&after[k].1, &direct[i].1, 1e-9));
            prop_assert!(seq_close(&after[k].2, &direct[i].2, 1e-9));
        }
    }

    #[test]
    fn transforms_preserve_shape_and_metadata(seq in seq_strategy(10)) {
        let stats = stats_for(std::slice::from_ref(&seq));
        let geom = FrameGeometry::new(640.0, 480.0).unwrap();
        let outs = [
            frame_scale(&seq, &geom).unwrap(),
            global_average_skeleton(&seq, &stats).unwrap(),
            global_coord_standardize(&seq, &stats),
            skeleton_translate(&seq),
            sequence_translate(&seq),
            skeleton_scale(&seq).unwrap(),
            sequence_scale(&seq).unwrap(),
        ];
        for out in &outs {
            prop_assert!(same_metadata(out, &seq));
        }
        // frame order: a per-pose transform maps frame i from frame i
        let single: Vec<GaitSequence> = seq.poses().iter().map(|p| GaitSequence::new("s", "q", vec![*p]).unwrap()).collect();
        for (i, s) in single.iter().enumerate() {
            prop_assert_eq!(skeleton_translate(s).poses()[0], outs[3].poses()[i]);
        }
    }

    #[test]
    fn global_average_skeleton_keeps_height_ratios(p in pose_strategy(), s in 0.2f64..5.0) {
        let seq = GaitSequence::new("a", "a", vec![p, p.scaled(s)]).unwrap();
        let stats = stats_for(std::slice::from_ref(&seq));
        let out = global_average_skeleton(&seq, &stats).unwrap();
        prop_assert!(close(height(&out.poses()[1]) / height(&out.poses()[0]), s, 1e-12));
    }
}

fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn walker_dataset(n_seqs: usize, frames: usize, seed: u64) -> Vec<GaitSequence> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n_seqs)
        .map(|k| {
            let poses = (0..frames)
                .map(|_| Pose::new(std::array::from_fn(|j| [rng.random_range(0.0..640.0), 30.0 * j as f64 + rng.random_range(-20.0..20.0)])).unwrap())
                .collect();
            GaitSequence::new(format!("s{k}"), format!("q{k}"), poses).unwrap()
        })
        .collect()
}

#[test]
fn stats_match_a_two_pass_oracle() {
    let data = walker_dataset(20, 50, 3);
    let stats = stats_for(&data);
    let poses: Vec<&Pose> = data.iter().flat_map(|s| s.poses()).collect();
    assert_eq!(poses.len(), 1000);
    let (mh, _) = two_pass(&poses.iter().map(|p| height(p)).collect::<Vec<_>>());
    assert!(close(stats.mean_height, mh, 1e-9));
    for c in 0..2 {
        let (mp, _) = two_pass(&poses.iter().map(|p| pelvis(p)[c]).collect::<Vec<_>>());
        assert!(close(stats.mean_pelvis[c], mp, 1e-9));
    }
    for j in 0..NUM_JOINTS {
        for c in 0..2 {
            let (m, s) = two_pass(&poses.iter().map(|p| p.joint(j)[c]).collect::<Vec<_>>());
            assert!(close(stats.per_joint_mean[j][c], m, 1e-9));
            assert!(close(stats.per_joint_std[j][c], s, 1e-9));
        }
    }
}

#[test]
fn standardizing_the_source_dataset_gives_zero_mean_unit_std() {
    let data = walker_dataset(10, 30, 4);
    let stats = stats_for(&data);
    let out: Vec<GaitSequence> = data.iter().map(|s| global_coord_standardize(s, &stats)).collect();
    let poses: Vec<&Pose> = out.iter().flat_map(|s| s.poses()).collect();
    for j in 0..NUM_JOINTS {
        for c in 0..2 {
            let (m, s) = two_pass(&poses.iter().map(|p| p.joint(j)[c]).collect::<Vec<_>>());
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((s - 1.0).abs() < 1e-6, "std {s}");
        }
    }
}
