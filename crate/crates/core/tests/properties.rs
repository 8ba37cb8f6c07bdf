use std::collections::{BTreeMap, BTreeSet};

use lgs_core::features::weighted_average;
use lgs_core::io::{decode_region_ids, encode_region_ids};
use lgs_core::masklet::iou;
use lgs_core::metrics::{iou_2d, miou_3d, set_iou};
use lgs_core::query::postprocess;
use lgs_core::raster::compute_contributions;
use lgs_core::{CameraPose, GaussianBundle, Mask, MaskletSet, QueryConfig, RegionIdRaster};
use proptest::prelude::*;

const H: usize = 12;
const W: usize = 12;

fn mask() -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), H * W).prop_map(|bits| Mask::from_bits(H, W, bits).unwrap())
}

fn unit_ish() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, 6).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn bundle(max: usize) -> impl Strategy<Value = GaussianBundle> {
    let g = (
        proptest::array::uniform3(-1.5f64..1.5),
        0.02f64..0.3,
        0.02f64..0.3,
        -0.5f64..0.5,
        0.05f64..1.0,
    );
    proptest::collection::vec(g, 0..max).prop_map(|gs| {
        let mut b = GaussianBundle::empty(2);
        for (pos, sx, sz, rho, alpha) in gs {
            let cxy = rho * (sx * sz).sqrt();
            b.push(pos, [sx, cxy, 0.0, sz, 0.0, sx], [0.5; 3], alpha, &[1.0, 0.0], None)
                .unwrap();
        }
        b
    })
}

fn camera() -> CameraPose {
    CameraPose::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, 1.0, 0.0], (30.0, 30.0), (24, 24)).unwrap()
}

proptest! {
    #[test]
    fn mask_iou_is_symmetric_and_bounded(a in mask(), b in mask()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou_2d(&a, &b).unwrap(), iou_2d(&b, &a).unwrap());
        if !a.is_empty() {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn weighted_average_is_unit_and_order_free(
        views in proptest::collection::vec((unit_ish(), 1usize..500), 1..6),
        rot in 0usize..6,
    ) {
        let Ok(avg) = weighted_average(&views) else { return Ok(()) };
        let norm = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let mut shuffled = views.clone();
        shuffled.rotate_left(rot % views.len());
        shuffled.reverse();
        let other = weighted_average(&shuffled).unwrap();
        for (x, y) in avg.iter().zip(&other) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn outlier_filter_returns_a_subset(b in bundle(40), pick in proptest::collection::vec(any::<bool>(), 40)) {
        let selected: Vec<usize> = (0..b.len()).filter(|&i| pick[i]).collect();
        let kept = postprocess(selected.clone(), &b, &QueryConfig::default()).unwrap();
        let all: BTreeSet<usize> = selected.iter().copied().collect();
        prop_assert!(kept.iter().all(|i| all.contains(i)));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn compositing_weights_stay_in_unit_interval(b in bundle(25)) {
        let contrib = compute_contributions(&b, &camera());
        for p in 0..contrib.num_pixels() {
            prop_assert!(contrib.pixel(p).iter().all(|&(_, w)| w >= 0.0));
        }
        for a in contrib.accumulated_alpha() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn miou_3d_matches_set_iou(
        labels in proptest::collection::vec(0i32..4, 0..60),
        pick in proptest::collection::vec(any::<bool>(), 60),
        target in 0i32..4,
    ) {
        let selected: Vec<usize> = (0..labels.len()).filter(|&i| pick[i]).collect();
        let a: BTreeSet<usize> = selected.iter().copied().collect();
        let b: BTreeSet<usize> = (0..labels.len()).filter(|&i| labels[i] == target).collect();
        let m = miou_3d(&selected, &labels, target);
        prop_assert_eq!(m, set_iou(&a, &b));
        prop_assert_eq!(set_iou(&a, &b), set_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn exclusive_insertion_keeps_masklets_disjoint(
        regions in proptest::collection::vec(proptest::collection::vec(mask(), 3), 1..6),
    ) {
        let mut set = MaskletSet::new(H, W);
        let mut covered = vec![Mask::new(H, W); 3];
        for per in &regions {
            let per_frame: BTreeMap<usize, Mask> = per.iter().cloned().enumerate().collect();
            set.insert_exclusive(per_frame, 0).unwrap();
            for (c, m) in covered.iter_mut().zip(per) {
                c.union_with(m).unwrap();
            }
        }
        prop_assert!(set.check_disjoint().is_ok());
        // nothing proposed is lost: the masklets tile exactly the proposed pixels
        for (t, c) in covered.iter().enumerate() {
            let ids = set.region_ids(t).unwrap();
            for (p, &id) in ids.ids.iter().enumerate() {
                prop_assert_eq!(id != 0, c.bits()[p]);
            }
        }
    }

    #[test]
    fn region_ids_round_trip(h in 0usize..20, w in 0usize..20, seed in any::<u64>(), frame in 0usize..100) {
        let ids: Vec<u16> = (0..h * w).map(|p| (seed.wrapping_mul(p as u64 + 1) >> 48) as u16).collect();
        let raster = RegionIdRaster { frame, height: h, width: w, ids };
        let back = decode_region_ids(&encode_region_ids(&raster).unwrap(), frame).unwrap();
        prop_assert_eq!(back, raster);
    }
}
