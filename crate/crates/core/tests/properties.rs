use palmscan::dataset::{augment, AugmentationConfig};
use palmscan::metrics::{cohen_kappa, confusion, roc_auc, roc_curve, ConfusionMatrix};
use palmscan::raster::{load_orthomosaic, write_geotiff, GeoTransform, Orthomosaic, Patch, PatchWindow};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raster_with_mask() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<bool>(), w * h)))
}

fn ortho(w: usize, h: usize, mask: Vec<bool>) -> Orthomosaic {
    let rgb = (0..w * h * 3).map(|i| (i * 31 % 251) as u8).collect();
    Orthomosaic::new(w, h, rgb, mask, GeoTransform::IDENTITY, "").unwrap()
}

fn labels_and_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..60)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..2, n),
                prop::collection::vec((0u32..12).prop_map(|v| f64::from(v) / 11.0), n),
            )
        })
        .prop_filter("both classes", |(l, _)| l.contains(&0) && l.contains(&1))
}

/// Area under the ROC polyline by the trapezoid rule.
fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

proptest! {
    #[test]
    fn nodata_fraction_matches_brute_force(((w, h, mask), (a, b, s)) in raster_with_mask().prop_flat_map(|r| {
        let (w, h) = (r.0, r.1);
        (Just(r), (1..=w.min(h)).prop_flat_map(move |s| (0..=w - s, 0..=h - s, Just(s))))
    })) {
        let o = ortho(w, h, mask.clone());
        let win = PatchWindow::new(a, b, s);
        let mut n = 0;
        for y in b..b + s {
            for x in a..a + s {
                n += u32::from(mask[y * w + x]);
            }
        }
        prop_assert_eq!(o.masked_count(&win), n);
        prop_assert_eq!(o.nodata_fraction(&win), f64::from(n) / (s * s) as f64);
        let p = o.extract_patch(&win).unwrap();
        prop_assert_eq!(p.nodata_fraction, f64::from(n) / (s * s) as f64);
        let corner = if o.is_nodata(a, b) { [0; 3] } else { o.rgb(a, b) };
        prop_assert_eq!(p.rgb(0, 0), corner);
    }

    #[test]
    fn pixel_geo_roundtrip(
        ox in -1e6f64..1e6, oy in -1e6f64..1e6,
        pw in prop_oneof![0.01f64..2.0, -2.0f64..-0.01],
        ph in prop_oneof![0.01f64..2.0, -2.0f64..-0.01],
        rot in -0.005f64..0.005,
        col in 0usize..500, row in 0usize..500,
    ) {
        let gt = GeoTransform { origin_x: ox, pixel_width: pw, row_rot: rot, origin_y: oy, col_rot: -rot, pixel_height: ph };
        let o = Orthomosaic::new(500, 500, vec![0; 500 * 500 * 3], vec![false; 500 * 500], gt, "EPSG:32617").unwrap();
        let (x, y) = o.pixel_center_to_geo(col, row);
        prop_assert_eq!(o.geo_to_pixel(x, y).unwrap(), (col, row));
        let (c, r) = gt.inverse(x, y).unwrap();
        prop_assert!((c - (col as f64 + 0.5)).abs() < 1e-6 && (r - (row as f64 + 0.5)).abs() < 1e-6);
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms((labels, scores) in labels_and_scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = roc_auc(&labels, &scores).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| (s - 0.3).powi(3)).collect();
        prop_assert_eq!(roc_auc(&labels, &affine).unwrap(), base);
        prop_assert_eq!(roc_auc(&labels, &cubed).unwrap(), base);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((roc_auc(&flipped, &scores).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn auc_equals_trapezoid_area((labels, scores) in labels_and_scores()) {
        let auc = roc_auc(&labels, &scores).unwrap();
        prop_assert!((auc - trapezoid(&roc_curve(&labels, &scores))).abs() < 1e-12);
    }

    #[test]
    fn auc_equals_pairwise_count((labels, scores) in labels_and_scores()) {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        prop_assert_eq!(roc_auc(&labels, &scores).unwrap(), twice as f64 / (2 * pairs) as f64);
    }

    #[test]
    fn kappa_is_invariant_under_class_swap(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let cm = ConfusionMatrix::new(tp, fp, fn_, tn);
        prop_assume!(cm.total() > 0);
        let k = cohen_kappa(&cm).unwrap();
        let s = cohen_kappa(&cm.swapped()).unwrap();
        prop_assert!((k.value - s.value).abs() < 1e-12);
        prop_assert_eq!(k.degenerate, s.degenerate);
        prop_assert!(k.value <= 1.0 + 1e-12);
    }

    #[test]
    fn confusion_counts_partition_the_items(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..100)) {
        let (labels, preds): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let cm = confusion(&labels, &preds).unwrap();
        prop_assert_eq!(cm.total(), labels.len() as u64);
        prop_assert_eq!(cm.tp + cm.fn_, labels.iter().filter(|&&l| l == 1).count() as u64);
        prop_assert_eq!(cm.tp + cm.fp, preds.iter().filter(|&&p| p == 1).count() as u64);
    }

    #[test]
    fn augmentation_keeps_shape_and_window(seed in any::<u64>(), size in 2usize..48) {
        let pixels = (0..size * size * 3).map(|i| (i * 37 % 256) as u8).collect();
        let p = Patch::from_rgb(PatchWindow::new(3, 4, size), pixels, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = augment(&p, &AugmentationConfig::default(), &mut rng);
        prop_assert_eq!(q.size(), size);
        prop_assert_eq!(q.window, p.window);
        prop_assert_eq!(q.nodata_fraction, p.nodata_fraction);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn geotiff_roundtrip_preserves_pixels_mask_and_transform((w, h, mask) in raster_with_mask(), nodata in prop::option::of(Just(0u8))) {
        let o = ortho(w, h, mask);
        let o = Orthomosaic::new(w, h, o.rgb_bytes().to_vec(), o.mask().to_vec(),
            GeoTransform::from_gdal([500_000.0, 0.05, 0.0, 3_000_000.0, 0.0, -0.05]), "EPSG:32617").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.tif");
        write_geotiff(&o, &path, nodata).unwrap();
        let back = load_orthomosaic(&path).unwrap();
        prop_assert_eq!((back.width(), back.height()), (w, h));
        prop_assert_eq!(back.mask(), o.mask());
        prop_assert_eq!(back.geotransform, o.geotransform);
        for y in 0..h {
            for x in 0..w {
                if !o.is_nodata(x, y) {
                    prop_assert_eq!(back.rgb(x, y), o.rgb(x, y));
                }
            }
        }
    }
}
