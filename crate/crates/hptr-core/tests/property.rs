//! Property tests for the geometry and encoding invariants.

use std::f64::consts::PI;

use proptest::prelude::*;

use hptr_core::encoding::{ae, pe, rpe, EncodingConfig};
use hptr_core::geometry::{relative_pose, transform_points, wrap_angle, Pose2, TransformDirection};
use hptr_core::tensor::{Graph, Tensor};

fn pose_strategy() -> impl Strategy<Value = Pose2> {
    (-200.0..200.0f64, -200.0..200.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range_and_congruent(theta in -1e4..1e4f64) {
        let w = wrap_angle(theta).unwrap();
        prop_assert!(w > -PI && w <= PI);
        // congruent modulo 2 pi
        let k = ((theta - w) / (2.0 * PI)).round();
        prop_assert!((theta - w - k * 2.0 * PI).abs() < 1e-6);
    }

    #[test]
    fn point_transforms_round_trip(pose in pose_strategy(),
                                   x in -100.0..100.0f64,
                                   y in -100.0..100.0f64) {
        let g = transform_points(&pose, &[[x, y]], TransformDirection::LocalToGlobal);
        let back = transform_points(&pose, &g, TransformDirection::GlobalToLocal);
        prop_assert!((back[0][0] - x).abs() < 1e-9);
        prop_assert!((back[0][1] - y).abs() < 1e-9);
    }

    #[test]
    fn relative_poses_ignore_the_global_frame(g in pose_strategy(),
                                              a in pose_strategy(),
                                              b in pose_strategy()) {
        let r = relative_pose(&a, &b);
        let rg = relative_pose(&g.compose(&a), &g.compose(&b));
        prop_assert!((r.dx - rg.dx).abs() < 1e-9);
        prop_assert!((r.dy - rg.dy).abs() < 1e-9);
        prop_assert!(wrap_angle(r.dtheta - rg.dtheta).unwrap().abs() < 1e-9);
    }

    #[test]
    fn encodings_are_bounded_and_sized(dx in -500.0..500.0f64,
                                       dy in -500.0..500.0f64,
                                       dt in -4.0..4.0f64) {
        let cfg = EncodingConfig::new(16, 1000.0).unwrap();
        let r = hptr_core::geometry::RelPose { dx, dy, dtheta: dt };
        let v = rpe(&r, &cfg);
        prop_assert_eq!(v.len(), 3 * cfg.dim_d);
        prop_assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert_eq!(pe(dx, &cfg).len(), cfg.dim_d);
        // angular encoding is 2-pi periodic; the position encoding is not
        let shifted = ae(dt + 2.0 * PI, &cfg);
        for (p, q) in ae(dt, &cfg).iter().zip(&shifted) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_normalize_under_any_magnitude(scale in 1.0..1e4f64,
                                                  vals in proptest::collection::vec(-1.0..1.0f64, 8)) {
        let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 4], &scaled).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        for row in 0..2 {
            let sum: f32 = d[row * 4..(row + 1) * 4].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
