mod common;

use common::*;
use efpn_core::data::{generate_synthetic, SegSample, SyntheticConfig};
use efpn_core::imbalance::{
    apply_balance, apply_op, augment_sample, balance_plan, combined_workflow, decompose, fuse_predictions,
    gaussian_blur, group_lut, project_dataset, rotate, AugOp, AugmentationSpec, Arms, ClassAction, ClassStats,
    EnsembleBundle, GroupSpec, WorkflowConfig,
};
use efpn_core::trainer::TrainConfig;
use efpn_core::{EfpnConfig, EfpnModel, Error, IndexMask, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(id: &str, mask: IndexMask) -> SegSample {
    let image = Tensor::uniform(Shape::new(1, 3, mask.height(), mask.width()), 0.0, 1.0, &mut rng(id.len() as u64));
    SegSample::new(id, image, mask).unwrap()
}

fn group_totals(spec: &GroupSpec, stats: &ClassStats) -> Vec<usize> {
    spec.groups.iter().map(|g| g.iter().map(|&c| stats.image_counts[c]).sum()).collect()
}

#[test]
fn nine_classes_make_three_groups_of_three() {
    let counts: Vec<usize> = std::iter::once(0).chain([2340, 1700, 1300, 1000, 800, 600, 400, 250, 104]).collect();
    let stats = ClassStats::from_image_counts(counts);
    let spec = decompose(&stats, 3, &[]).unwrap();
    assert_eq!(spec.groups.len(), 3);
    assert!(spec.groups.iter().all(|g| g.len() == 3));
    spec.validate(10).unwrap();
}

#[test]
fn symmetric_counts_split_into_equal_totals() {
    let stats = ClassStats::from_image_counts(vec![0, 100, 100, 100, 1, 1, 1, 50, 50, 50]);
    let spec = decompose(&stats, 3, &[]).unwrap();
    assert_eq!(group_totals(&spec, &stats), vec![151, 151, 151]);
}

#[test]
fn crack_and_fracture_never_share_a_group() {
    // three tied leaders, so unconstrained greedy puts class 5 beside class 1
    let stats = ClassStats::from_image_counts(vec![0, 10, 10, 10, 1, 9, 8, 7, 2, 1]);
    let free = decompose(&stats, 3, &[]).unwrap();
    assert_eq!(free.groups[0], vec![1, 5, 9]);
    let split = decompose(&stats, 3, &[(1, 5)]).unwrap();
    assert!(split.groups.iter().all(|g| !(g.contains(&1) && g.contains(&5))));
    assert_eq!(split.groups, vec![vec![1, 4, 6], vec![2, 5, 9], vec![3, 7, 8]]);
    split.validate(10).unwrap();
}

#[test]
fn remainder_goes_to_a_smaller_last_group() {
    let stats = ClassStats::from_image_counts(vec![0, 5, 4, 3, 2, 1]);
    let spec = decompose(&stats, 3, &[]).unwrap();
    assert_eq!(spec.groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2]);
    spec.validate(6).unwrap();
}

#[test]
fn decomposition_errors() {
    let stats = ClassStats::from_image_counts(vec![0, 3, 2, 1]);
    assert!(matches!(decompose(&stats, 0, &[]), Err(Error::Config(_))));
    assert!(matches!(decompose(&stats, 3, &[(0, 1)]), Err(Error::Config(_))));
    assert!(matches!(decompose(&stats, 3, &[(2, 2)]), Err(Error::Config(_))));
    assert!(matches!(decompose(&ClassStats::from_image_counts(vec![5]), 3, &[]), Err(Error::Config(_))));
    match decompose(&stats, 3, &[(1, 3)]) {
        Err(Error::Planning(m)) => assert!(m.contains("class 3") && m.contains("class 1"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn group_remap_is_ascending() {
    let lut = group_lut(&[7, 2, 5]);
    assert_eq!([lut[2], lut[5], lut[7]], [1, 2, 3]);
    assert!([0usize, 1, 3, 4, 6, 8, 9].iter().all(|&c| lut[c] == 0));
}

#[test]
fn projection_drops_out_of_group_samples_and_round_trips() {
    let group = [2usize, 5, 7];
    let keep = IndexMask::from_fn(4, 4, |y, x| [0u8, 2, 5, 7, 3][(y + x) % 5]);
    let drop = IndexMask::from_fn(4, 4, |y, _| if y < 2 { 3 } else { 0 });
    let out = project_dataset(&[sample("a", keep.clone()), sample("bb", drop)], &group);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].id, "a");
    assert!(out[0].mask.data().iter().all(|&v| v <= 3));
    for (local, global) in out[0].mask.data().iter().zip(keep.data()) {
        if group.contains(&(*global as usize)) {
            assert_eq!(group[*local as usize - 1], *global as usize);
        } else {
            assert_eq!(*local, 0);
        }
    }
}

#[test]
fn fusion_hand_example() {
    let spec = GroupSpec {
        group_size: 2,
        groups: vec![vec![1, 2], vec![3, 4]],
        conflicts: vec![],
    };
    let a = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.2, 0.8, 0.0]).unwrap();
    let b = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.9, 0.05, 0.05]).unwrap();
    let (mask, probs) = fuse_predictions(&spec, 5, &[a, b]).unwrap();
    assert_eq!(mask[0].data(), &[1]);
    let raw = [(0.2 + 0.9) / 2.0, 0.8, 0.0, 0.05, 0.05];
    let total: f64 = raw.iter().sum();
    for (c, r) in raw.iter().enumerate() {
        assert!((probs.data()[c] as f64 - r / total).abs() < 1e-6);
    }
}

#[test]
fn single_group_fusion_is_that_models_argmax() {
    let spec = GroupSpec {
        group_size: 3,
        groups: vec![vec![1, 2, 3]],
        conflicts: vec![],
    };
    let model = EfpnModel::build(EfpnConfig::small(1, 8, 8, 8, 4), 0).unwrap();
    let x = Tensor::uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, &mut rng(1));
    let p = model.predict_proba(&x).unwrap();
    let (mask, probs) = fuse_predictions(&spec, 4, std::slice::from_ref(&p)).unwrap();
    assert_eq!(mask, model.predict(&x).unwrap());
    assert!(probs.max_abs_diff(&p) < 1e-6);
}

#[test]
fn confident_background_everywhere_fuses_to_background() {
    let spec = GroupSpec {
        group_size: 2,
        groups: vec![vec![1, 3], vec![2]],
        conflicts: vec![],
    };
    let bg = |c| Tensor::from_fn(Shape::new(1, c, 3, 3), |_, ch, _, _| if ch == 0 { 1.0 } else { 0.0 });
    let (mask, _) = fuse_predictions(&spec, 4, &[bg(3), bg(2)]).unwrap();
    assert!(mask[0].is_all_background());
}

#[test]
fn fusion_arity_errors() {
    let spec = GroupSpec {
        group_size: 2,
        groups: vec![vec![1, 2], vec![3]],
        conflicts: vec![],
    };
    let t = |c| Tensor::full(Shape::new(1, c, 2, 2), 1.0 / c as f32);
    assert!(matches!(fuse_predictions(&spec, 4, &[t(3)]), Err(Error::Usage(_))));
    assert!(matches!(fuse_predictions(&spec, 4, &[t(3), t(3)]), Err(Error::Usage(_))));
    assert!(fuse_predictions(&spec, 4, &[t(3), t(2)]).is_ok());
}

#[test]
fn flip_twice_is_identity() {
    let mask = IndexMask::from_fn(5, 7, |y, x| ((y * 7 + x) % 4) as u8);
    let s = sample("flip", mask.clone());
    let spec = AugmentationSpec::default();
    let mut r = rng(0);
    let (i1, m1) = apply_op(&s.image, &mask, AugOp::HorizontalFlip, &spec, &mut r).unwrap();
    assert_ne!(m1, mask);
    let (i2, m2) = apply_op(&i1, &m1, AugOp::HorizontalFlip, &spec, &mut r).unwrap();
    assert_eq!(m2, mask);
    assert_eq!(i2, s.image);
}

#[test]
fn quarter_turn_of_two_by_two_mask() {
    let m = IndexMask::new(2, 2, vec![1, 2, 3, 4]).unwrap();
    let (_, r) = rotate(&Tensor::zeros(Shape::new(1, 3, 2, 2)), &m, 90.0);
    assert_eq!(r.data(), &[3, 1, 4, 2]);
}

#[test]
fn photometric_ops_leave_mask_untouched() {
    let mask = IndexMask::from_fn(12, 12, |y, x| ((y / 3 + x / 4) % 3) as u8);
    let s = sample("photo", mask.clone());
    let spec = AugmentationSpec::default();
    for op in [AugOp::GaussianBlur, AugOp::ColorJitter, AugOp::RandomNoise] {
        let (img, m) = apply_op(&s.image, &mask, op, &spec, &mut rng(3)).unwrap();
        assert_eq!(m, mask, "{op}");
        assert_ne!(img, s.image, "{op}");
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let flat = Tensor::full(Shape::new(1, 3, 6, 6), 0.4);
    assert!(gaussian_blur(&flat, 1.2).max_abs_diff(&flat) < 1e-6);
}

#[test]
fn augmentation_is_reproducible_and_seed_dependent() {
    let mask = IndexMask::from_fn(16, 16, |y, x| if (4..10).contains(&y) && x > 5 { 2 } else { 0 });
    let s = sample("rep", mask.clone());
    let spec = AugmentationSpec::default();
    let a = augment_sample(&s.image, &mask, &spec, 11).unwrap();
    let b = augment_sample(&s.image, &mask, &spec, 11).unwrap();
    let c = augment_sample(&s.image, &mask, &spec, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_eq!(a.0.shape(), s.image.shape());
}

#[test]
fn augmentation_spec_bounds() {
    let bad = [
        AugmentationSpec { rotation_deg: 200.0, ..Default::default() },
        AugmentationSpec { crop_scale: [0.0, 1.0], ..Default::default() },
        AugmentationSpec { blur_sigma: [2.0, 1.0], ..Default::default() },
        AugmentationSpec { jitter: 1.0, ..Default::default() },
    ];
    let m = IndexMask::filled(4, 4, 0);
    for spec in bad {
        assert!(matches!(augment_sample(&Tensor::zeros(Shape::new(1, 3, 4, 4)), &m, &spec, 0), Err(Error::Config(_))));
    }
    assert!(matches!(
        augment_sample(&Tensor::zeros(Shape::new(1, 3, 4, 5)), &m, &AugmentationSpec::default(), 0),
        Err(Error::Data(_))
    ));
}

#[test]
fn balance_plan_examples() {
    let stats = ClassStats::from_image_counts(vec![0, 2340, 104, 900]);
    let plan = balance_plan(&stats, 2000);
    assert_eq!(plan.action(1), Some(ClassAction::UndersampleTo(2000)));
    assert_eq!(plan.action(2), Some(ClassAction::AugmentBy(1896)));
    assert_eq!(plan.action(3), Some(ClassAction::AugmentBy(1100)));
    assert!(balance_plan(&ClassStats::from_image_counts(vec![0, 7, 7]), 2000).is_empty());
}

#[test]
fn rarest_class_attribution_drives_balancing() {
    // class 1 in every image, class 2 in two of them
    let masks = [
        IndexMask::from_fn(4, 4, |y, _| if y == 0 { 1 } else { 0 }),
        IndexMask::from_fn(4, 4, |y, _| [1, 2, 0, 0][y]),
        IndexMask::from_fn(4, 4, |y, _| [1, 0, 2, 0][y]),
        IndexMask::from_fn(4, 4, |y, _| if y == 3 { 1 } else { 0 }),
        IndexMask::from_fn(4, 4, |_, x| if x == 0 { 1 } else { 0 }),
    ];
    let samples: Vec<SegSample> = masks.into_iter().enumerate().map(|(i, m)| sample(&"s".repeat(i + 1), m)).collect();
    let stats = ClassStats::from_samples(&samples, 3);
    assert_eq!(stats.image_counts, vec![5, 5, 2]);
    assert_eq!(stats.attributed_counts, vec![0, 3, 2]);

    let plan = balance_plan(&stats, 2);
    assert_eq!(plan.action(1), Some(ClassAction::UndersampleTo(2)));
    assert_eq!(plan.action(2), None);
    let spec = AugmentationSpec::default();
    let out = apply_balance(&samples, &stats, &plan, &spec).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(out, apply_balance(&samples, &stats, &plan, &spec).unwrap());

    let plan = balance_plan(&stats, 2000);
    assert_eq!(plan.action(2), Some(ClassAction::AugmentBy(1)));
    let out = apply_balance(&samples, &stats, &plan, &spec).unwrap();
    assert_eq!(out.len(), 6);
    assert_eq!(&out[..5], &samples[..]);
    assert!(out[5].id.starts_with("ss_aug0_"));
    let none = AugmentationSpec { ops: vec![], ..spec };
    assert!(matches!(apply_balance(&samples, &stats, &plan, &none), Err(Error::Config(_))));
}

#[test]
fn ensemble_bundle_round_trip_and_arity() {
    let spec = GroupSpec {
        group_size: 2,
        groups: vec![vec![1, 3], vec![2]],
        conflicts: vec![],
    };
    let small = |k, seed| EfpnModel::build(EfpnConfig::small(1, 8, 8, 8, k), seed).unwrap();
    assert!(matches!(EnsembleBundle::new(spec.clone(), 4, vec![small(3, 0), small(3, 1)]), Err(Error::Usage(_))));
    assert!(matches!(EnsembleBundle::new(spec.clone(), 4, vec![small(3, 0)]), Err(Error::Usage(_))));
    let bundle = EnsembleBundle::new(spec, 4, vec![small(3, 0), small(2, 1)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let back = EnsembleBundle::load(dir.path()).unwrap();
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng(2));
    assert_eq!(back.predict(&x).unwrap(), bundle.predict(&x).unwrap());
}

#[test]
fn workflow_smoke_keeps_groups_and_test_split_fixed() {
    let data = generate_synthetic(&SyntheticConfig::uniform(5, 0.5, 20, 16, 4)).unwrap();
    let (train, rest) = data.split_at(14);
    let (val, test) = rest.split_at(3);
    let model = EfpnConfig::small(1, 8, 8, 16, 5);
    let tc = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    let ciw = vec![0.0, 0.5, 0.5, 0.5, 0.5];
    let wf = WorkflowConfig { group_size: 2, conflicts: vec![(1, 2)], ..Default::default() };
    let combined = combined_workflow(train, val, test, &model, &tc, &wf, &ciw).unwrap();
    let spec = &combined.bundle.group_spec;
    assert_eq!(spec.groups.len(), 2);
    assert!(spec.groups.iter().all(|g| !(g.contains(&1) && g.contains(&2))));
    for (m, g) in combined.bundle.models.iter().zip(&spec.groups) {
        assert_eq!(m.num_classes(), g.len() + 1);
    }
    let baseline = combined_workflow(train, val, test, &model, &tc, &WorkflowConfig { arms: Arms::BASELINE, ..wf }, &ciw).unwrap();
    assert_eq!(baseline.bundle.models.len(), 1);
    assert_eq!(baseline.group_train_sizes, vec![train.iter().filter(|s| !s.mask.is_all_background()).count()]);
    let total = |c: &efpn_core::metrics::ConfusionMatrix| c.total();
    let test_pixels: u64 = test.iter().map(|s| s.mask.len() as u64).sum();
    assert_eq!(total(&combined.confusion), test_pixels);
    assert_eq!(total(&baseline.confusion), test_pixels);
    assert_eq!(combined.confusion.counts().chunks(5).map(|r| r.iter().sum::<u64>()).collect::<Vec<_>>(),
        baseline.confusion.counts().chunks(5).map(|r| r.iter().sum::<u64>()).collect::<Vec<_>>());
}

/// Encodes each pixel's own centre in the image and a unique label in the
/// mask, applies one geometric operator, and checks that the bilinear image
/// and the nearest-neighbour mask point back to the same source location.
fn displacement_fields_agree(op: AugOp, seed: u64) -> std::result::Result<(), TestCaseError> {
    let n = 15;
    let image = Tensor::from_fn(Shape::new(1, 3, n, n), |_, c, y, x| match c {
        0 => (x as f32 + 0.5) / n as f32,
        1 => (y as f32 + 0.5) / n as f32,
        _ => 1.0,
    });
    let mask = IndexMask::from_fn(n, n, |y, x| (1 + y * n + x) as u8);
    let spec = AugmentationSpec::default();
    let (img, m) = apply_op(&image, &mask, op, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut checked = 0;
    for y in 0..n {
        for x in 0..n {
            let label = m.get(y, x);
            if label == 0 {
                continue;
            }
            let (sy, sx) = ((label as usize - 1) / n, (label as usize - 1) % n);
            if sx == 0 || sy == 0 || sx == n - 1 || sy == n - 1 {
                continue;
            }
            let xs = img.get(0, 0, y, x) as f64 * n as f64;
            let ys = img.get(0, 1, y, x) as f64 * n as f64;
            prop_assert!((img.get(0, 2, y, x) - 1.0).abs() < 1e-5);
            prop_assert!(xs >= sx as f64 - 1e-3 && xs <= sx as f64 + 1.0 + 1e-3, "{op} x: {xs} vs pixel {sx}");
            prop_assert!(ys >= sy as f64 - 1e-3 && ys <= sy as f64 + 1.0 + 1e-3, "{op} y: {ys} vs pixel {sy}");
            checked += 1;
        }
    }
    prop_assert!(checked > n * n / 4, "{op}: only {checked} interior pixels");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_is_valid_and_deterministic(counts in prop::collection::vec(0usize..3000, 2..14), g in 1usize..5, pairs in prop::collection::vec((1usize..14, 1usize..14), 0..3)) {
        let k = counts.len() + 1;
        let stats = ClassStats::from_image_counts(std::iter::once(0).chain(counts).collect());
        let conflicts: Vec<(usize, usize)> = pairs.into_iter().filter(|&(a, b)| a < k && b < k && a != b).collect();
        match decompose(&stats, g, &conflicts) {
            Ok(spec) => {
                prop_assert!(spec.validate(k).is_ok());
                prop_assert_eq!(spec.groups.len(), (k - 1).div_ceil(g));
                prop_assert_eq!(Some(spec), decompose(&stats, g, &conflicts).ok());
            }
            Err(e) => prop_assert!(matches!(e, Error::Planning(_)), "{e}"),
        }
    }

    #[test]
    fn fused_distribution_sums_to_one(seed in any::<u64>(), sizes in prop::collection::vec(1usize..4, 1..4)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut next = 1;
        let groups: Vec<Vec<usize>> = sizes.iter().map(|&s| { let g = (next..next + s).collect(); next += s; g }).collect();
        let spec = GroupSpec { group_size: *sizes.iter().max().unwrap(), groups, conflicts: vec![] };
        let maps: Vec<Tensor> = sizes.iter().map(|&s| {
            let logits = Tensor::uniform(Shape::new(2, s + 1, 3, 3), -3.0, 3.0, &mut r);
            let mut t = efpn_core::Tape::<f32>::inference();
            let v = t.leaf(logits);
            let p = t.softmax_channels(v).unwrap();
            t.value(p).clone()
        }).collect();
        let (_, probs) = fuse_predictions(&spec, next, &maps).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let s: f64 = (0..next).map(|c| probs.get(n, c, y, x) as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn augmented_masks_only_lose_labels(seed in any::<u64>(), draw in any::<u64>(), h in 8usize..20, w in 8usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<u8> = (0..3).map(|_| r.gen_range(1..10)).collect();
        let mask = IndexMask::from_fn(h, w, |y, x| if (y + x) % 3 == 0 { 0 } else { classes[(y * x) % 3] });
        let image = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut r);
        let (img, m) = augment_sample(&image, &mask, &AugmentationSpec::default(), draw).unwrap();
        prop_assert_eq!(img.shape(), image.shape());
        prop_assert!(m.data().iter().all(|v| *v == 0 || mask.contains(*v)));
    }

    #[test]
    fn geometric_ops_keep_image_and_mask_aligned(seed in any::<u64>(), op in prop::sample::select(vec![AugOp::HorizontalFlip, AugOp::Shear, AugOp::Rotation, AugOp::RandomCrop])) {
        displacement_fields_agree(op, seed)?;
    }
}
