//! Synthetic-world invariants: purity, stream alignment, the grasp script and
//! rigid attachment as seen in image space.

use egowm::camera::Pose;
use egowm::eval::{detect_hand, mask_centroid, project_points, MaskFrame};
use egowm::synth::{generate_clip, window_starts, GraspEvent, WINDOW_STRIDE};

#[test]
fn clip_is_pure_function_of_seed_and_shape() {
    for seed in [0, 7, 123] {
        let (a, b) = (generate_clip(seed, 9, 32).unwrap(), generate_clip(seed, 9, 32).unwrap());
        assert!(a.rgb.bit_eq(&b.rgb) && a.hand_maps.bit_eq(&b.hand_maps) && a.object_masks.bit_eq(&b.object_masks));
        assert_eq!(a.world_poses, b.world_poses);
        assert_eq!(a.events, b.events);
    }
    let (a, b) = (generate_clip(1, 9, 32).unwrap(), generate_clip(2, 9, 32).unwrap());
    assert!(!a.rgb.bit_eq(&b.rgb));
}

#[test]
fn streams_are_aligned_and_well_formed() {
    for (seed, l, s) in [(0, 9, 32), (5, 17, 16), (9, 2, 8)] {
        let c = generate_clip(seed, l, s).unwrap();
        assert_eq!(c.rgb.shape(), [l, 3, s, s]);
        assert_eq!(c.hand_maps.shape(), [l, 1, s, s]);
        assert_eq!(c.object_masks.shape(), [l, 1, s, s]);
        assert_eq!((c.trajectory.len(), c.end_effector.len(), c.attached.len()), (l, l, l));
        assert_eq!(c.trajectory.poses()[0], Pose::identity());
        assert!(c.object_masks.data().iter().chain(c.hand_maps.data()).all(|&v| v == 0.0 || v == 1.0));
        // The object mask and hand map never claim the same pixel.
        for (m, h) in c.object_masks.data().iter().zip(c.hand_maps.data()) {
            assert!(*m + *h <= 1.0);
        }
    }
    assert!(generate_clip(0, 1, 32).is_err());
}

#[test]
fn default_script_grasps_and_releases() {
    for seed in 0..30 {
        let c = generate_clip(seed, 9, 32).unwrap();
        assert!(!c.events.is_empty(), "seed {seed}");
        assert_eq!(c.events[0].1, GraspEvent::Attach, "seed {seed}");
        let attached_frames = c.attached.iter().filter(|a| **a).count();
        assert!(attached_frames >= 2, "seed {seed}: {attached_frames} attached frames");
    }
}

#[test]
fn hand_map_equals_magenta_pixels() {
    for seed in 0..10 {
        let c = generate_clip(seed, 9, 32).unwrap();
        for i in 0..c.len() {
            let detected = detect_hand(&c.frame(i)).unwrap();
            let map = MaskFrame::from_stack(&c.hand_maps, i).unwrap();
            assert_eq!(detected, map, "seed {seed} frame {i}");
        }
    }
}

#[test]
fn attached_object_moves_with_projected_end_effector() {
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for seed in 0..40 {
        for (l, s) in [(9, 32), (17, 32)] {
            let c = generate_clip(seed, l, s).unwrap();
            let ee = project_points(&c.world_poses, &c.intrinsics, &c.end_effector);
            let cents: Vec<_> = (0..l).map(|i| mask_centroid(&MaskFrame::from_stack(&c.object_masks, i).unwrap())).collect();
            for i in 0..l - 1 {
                if !(c.attached[i] && c.attached[i + 1]) {
                    continue;
                }
                let (Some(a), Some(b), Some(p), Some(q)) = (cents[i], cents[i + 1], ee[i], ee[i + 1]) else {
                    panic!("seed {seed}: attached object or end effector not visible at frame {i}");
                };
                let d = ((b.0 - a.0) - (q.0 - p.0)).hypot((b.1 - a.1) - (q.1 - p.1));
                worst = worst.max(d);
                pairs += 1;
            }
        }
    }
    assert!(pairs >= 40, "only {pairs} attached frame pairs");
    assert!(worst <= 1.5, "velocity discrepancy {worst} px/frame");
}

#[test]
fn window_starts_match_enumeration() {
    for total in 1..40 {
        for len in 1..=total {
            // Every start s with s % stride == 0 that fits, plus the final
            // window if it is not already on the grid.
            let mut oracle: Vec<usize> = (0..total).filter(|s| s % WINDOW_STRIDE == 0 && s + len <= total).collect();
            if !oracle.contains(&(total - len)) {
                oracle.push(total - len);
            }
            assert_eq!(window_starts(total, len, WINDOW_STRIDE), oracle, "{total} {len}");
        }
    }
    assert_eq!(window_starts(17, 9, 5), vec![0, 5, 8]);
}

#[test]
fn windows_rebase_trajectory() {
    let c = generate_clip(3, 17, 16).unwrap();
    let ws = c.windows(9).unwrap();
    assert_eq!(ws.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 5, 8]);
    for w in &ws {
        assert_eq!(w.trajectory.poses()[0], Pose::identity());
        assert!(w.frame(0).bit_eq(&c.frame(w.start)));
    }
}
