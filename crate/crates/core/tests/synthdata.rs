use std::collections::BTreeSet;

use proptest::prelude::*;
use segviz::synthdata::{
    generate_node_dataset, generate_sample, mask_annotations, sample_patches, PhantomConfig, BACKGROUND, LIVER,
    SPLEEN,
};

fn region_mean(cfg: &PhantomConfig, class: u8, ids: std::ops::Range<u64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for id in ids {
        let s = generate_sample(cfg, id).unwrap();
        for (v, &l) in s.image.data().iter().zip(&s.labels) {
            if l == class {
                sum += f64::from(*v);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn organ_intensities_match_config_over_100_samples() {
    let cfg = PhantomConfig::default();
    assert!((region_mean(&cfg, LIVER, 0..100) - 0.7).abs() < 0.01);
    assert!((region_mean(&cfg, SPLEEN, 0..100) - 0.5).abs() < 0.01);
    assert!((region_mean(&cfg, BACKGROUND, 0..100) - 0.2).abs() < 0.01);
}

#[test]
fn organ_sizes_follow_axis_fractions() {
    let cfg = PhantomConfig::default();
    let area = |d_lo: f64, d_hi: f64| {
        let (a, b) = (d_lo * 64.0 / 2.0, d_hi * 64.0 / 2.0);
        (std::f64::consts::PI * a * a, std::f64::consts::PI * b * b)
    };
    let (liver_lo, liver_hi) = area(0.25, 0.40);
    let (spleen_lo, spleen_hi) = area(0.08, 0.15);
    for id in 0..50 {
        let s = generate_sample(&cfg, id).unwrap();
        let (l, sp) = (s.count_class(LIVER) as f64, s.count_class(SPLEEN) as f64);
        assert!(l >= 0.7 * liver_lo && l <= 1.3 * liver_hi + 4.0, "liver area {l}");
        assert!(sp >= 0.5 * spleen_lo && sp <= 1.3 * spleen_hi + 4.0, "spleen area {sp}");
        assert!(l > sp);
    }
}

#[test]
fn organs_keep_off_the_border() {
    let cfg = PhantomConfig::default();
    for id in 0..30 {
        let s = generate_sample(&cfg, id).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if y == 0 || x == 0 || y == 63 || x == 63 {
                    assert_eq!(s.labels[y * 64 + x], BACKGROUND);
                }
            }
        }
    }
}

#[test]
fn splits_are_reproducible_and_disjoint() {
    let cfg = PhantomConfig::default();
    let a = generate_node_dataset(&cfg, "liver", LIVER, 0..20, 0.8).unwrap();
    let b = generate_node_dataset(&cfg, "liver", LIVER, 0..20, 0.8).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.validation.len()), (16, 4));
    let train: BTreeSet<u64> = a.train.iter().map(|s| s.sample_id).collect();
    assert!(a.validation.iter().all(|s| !train.contains(&s.sample_id)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masking_only_touches_labels(id in 0u64..500, keep_liver: bool, keep_spleen: bool) {
        let s = generate_sample(&PhantomConfig::default(), id).unwrap();
        let mut keep = BTreeSet::new();
        if keep_liver { keep.insert(LIVER); }
        if keep_spleen { keep.insert(SPLEEN); }
        let m = mask_annotations(&s, &keep);
        prop_assert_eq!(&m.image, &s.image);
        prop_assert_eq!(&m.annotated_classes, &keep);
        for (&a, &b) in m.labels.iter().zip(&s.labels) {
            prop_assert!(a == b || (a == BACKGROUND && !keep.contains(&b)));
            prop_assert!(!(a != BACKGROUND && !keep.contains(&a)));
        }
    }

    #[test]
    fn patch_labels_are_binary(id in 0u64..200, seed: u64, ph in 1usize..=8, pw in 1usize..=8) {
        let s = generate_sample(&PhantomConfig::default(), id).unwrap();
        let ps = sample_patches(&s, &[ph * 8, pw * 8], 4, 0.5, SPLEEN, seed).unwrap();
        for p in ps {
            prop_assert!(p.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(p.image.shape(), &[1, ph * 8, pw * 8][..]);
        }
    }
}
