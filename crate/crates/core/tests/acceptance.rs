//! One test per acceptance criterion. Each prints the measured quantities;
//! run with `--nocapture` to see them for passing criteria too.

mod common;

use common::*;
use efpn_core::data::{generate_synthetic, ClassPalette, PaletteEntry, SegSample, SyntheticConfig};
use efpn_core::imbalance::{apply_op, combined_workflow, Arms, AugOp, AugmentationSpec, WorkflowConfig};
use efpn_core::metrics::{evaluate as evaluate_pairs, ConfusionMatrix};
use efpn_core::model::gradcheck_model;
use efpn_core::tensor::Tape;
use efpn_core::trainer::{evaluate, split, TrainConfig, Trainer};
use efpn_core::{EfpnConfig, EfpnModel, IndexMask, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REPORTED_PARAMS: f64 = 1_324_660.0;

fn verdict(id: u8, name: &str, ok: bool, detail: String) {
    println!("criterion {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} {name} failed: {detail}");
}

#[test]
fn criterion_1_parameter_budget() {
    let total = EfpnConfig::default().param_count() as f64;
    let rel = (total - REPORTED_PARAMS).abs() / REPORTED_PARAMS;
    verdict(1, "parameter budget", rel <= 0.01, format!("{total} params, {:.4}% from {REPORTED_PARAMS}", rel * 100.0));
}

#[test]
fn criterion_2_flop_ratio() {
    let report = EfpnConfig::default().flop_ratio_vs_inception();
    let ratios: Vec<String> = report.per_level.iter().map(|l| format!("L{} {:.3}", l.level, l.ratio)).collect();
    let ok = !report.per_level.is_empty() && report.per_level.iter().all(|l| l.ratio >= 7.0);
    verdict(2, "FLOP ratio", ok, ratios.join(", "));
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut ops = 0;
    for seed in 0..20 {
        for r in op_gradchecks(seed).unwrap() {
            ops += 1;
            worst = worst.max(r.max_rel_error);
            if !(r.max_rel_error < OP_TOL) {
                failed.push(format!("{} seed {seed}", r.op_name));
            }
        }
    }
    let e2e = gradcheck_model(&EfpnConfig::small(2, 16, 16, 16, 3), 0, GRAD_EPS, 2e-3).unwrap();
    let ok = failed.is_empty() && e2e.max_rel_error < 2e-3;
    verdict(
        3,
        "gradient correctness",
        ok,
        format!(
            "{ops} op checks over 20 seeds, worst {worst:.2e}, failures {failed:?}; end-to-end {:.2e} over {} elements",
            e2e.max_rel_error, e2e.checked
        ),
    );
}

#[test]
fn criterion_4_metric_oracle() {
    let ciw = ClassPalette::default().ciw();
    let pairs = random_pairs(200, 8, 10, 4);
    let mut worst: f64 = 0.0;
    for pair in &pairs {
        let report = evaluate_pairs([pair.clone()], &ciw).unwrap();
        worst = worst.max(metric_discrepancy(&report, &oracle_metrics(std::slice::from_ref(pair), 10, &ciw)));
    }
    let pooled = evaluate_pairs(pairs.iter().cloned(), &ciw).unwrap();
    worst = worst.max(metric_discrepancy(&pooled, &oracle_metrics(&pairs, 10, &ciw)));

    // gt [[0,0],[1,1]], pred [[0,1],[1,1]]
    let gt = IndexMask::from_fn(2, 2, |y, _| y as u8);
    let pred = IndexMask::from_fn(2, 2, |y, x| (y + x > 0) as u8);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt).unwrap();
    let iou = cm.iou_per_class();
    let fixture = cm.get(0, 0) == 1
        && cm.get(0, 1) == 1
        && cm.get(1, 1) == 2
        && cm.get(1, 0) == 0
        && iou == vec![Some(0.5), Some(2.0 / 3.0)]
        && cm.mean_iou(true).unwrap() == (0.5 + 2.0 / 3.0) / 2.0
        && cm.f1_macro().unwrap() == (2.0 / 3.0 + 0.8) / 2.0
        && cm.balanced_accuracy().unwrap() == 0.75
        && cm.mcc().value == 4.0 / 48f64.sqrt();
    verdict(
        4,
        "metric oracle",
        worst <= 1e-9 && fixture,
        format!("max discrepancy {worst:.1e} over 200 random 8x8 K=10 pairs, 2x2 fixture {}", if fixture { "exact" } else { "mismatch" }),
    );
}

fn pyramid_laws_hold(cfg: EfpnConfig, seed: u64) -> bool {
    let size = cfg.input_size;
    let (levels, lat, k) = (cfg.stages.len(), cfg.lateral_channels, cfg.num_classes);
    let channels: Vec<usize> = cfg.stages.iter().map(|s| s.out_channels).collect();
    let model = EfpnModel::build(cfg, seed).unwrap();
    let mut tape = Tape::inference();
    let p = model.params().bind(&mut tape);
    let x = tape.leaf(Tensor::uniform(Shape::new(1, 3, size, size), 0.0, 1.0, &mut rng(seed)));
    let lv = model.bottom_up(&mut tape, &p, x).unwrap();
    let mut ok = lv.len() == levels;
    for (l, &v) in lv.iter().enumerate() {
        ok &= tape.shape(v) == Shape::new(1, channels[l], size >> l, size >> l);
    }
    let pm = model.top_down(&mut tape, &p, &lv).unwrap();
    for (i, &v) in pm.iter().enumerate() {
        let l = levels - 1 - i;
        ok &= tape.shape(v) == Shape::new(1, lat, size >> l, size >> l);
    }
    let y = model.classify(&mut tape, &p, &pm).unwrap();
    ok && tape.shape(y) == Shape::new(1, k, size, size)
}

fn classifier_is_shared(seed: u64) -> bool {
    let mut model = EfpnModel::build(EfpnConfig::small(3, 8, 8, 16, 3), seed).unwrap();
    let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng(seed));
    let level_logits = |m: &EfpnModel| {
        let mut tape = Tape::inference();
        let p = m.params().bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let levels = m.bottom_up(&mut tape, &p, xv).unwrap();
        let pmaps = m.top_down(&mut tape, &p, &levels).unwrap();
        let ls = m.level_logits(&mut tape, &p, &pmaps).unwrap();
        ls.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    let before = level_logits(&model);
    let kernels = model.params().iter().filter(|p| p.tensor.shape().c == 8 && p.tensor.shape().n == 3).count();
    let [w, _] = model.classifier_param_names();
    let id = model.params().id(&w).unwrap();
    for v in model.params_mut().get_mut(id).tensor.data_mut() {
        *v += 0.25;
    }
    let after = level_logits(&model);
    kernels == 1 && before.len() == 3 && before.iter().zip(&after).all(|(a, b)| a.max_abs_diff(b) > 1e-4)
}

fn codec_round_trips(seed: u64) -> bool {
    let mut r = rng(seed);
    let k = r.gen_range(1..=24);
    let mut colors: Vec<[u8; 3]> = Vec::new();
    while colors.len() < k {
        let c: [u8; 3] = r.gen();
        if !colors.contains(&c) {
            colors.push(c);
        }
    }
    colors.shuffle(&mut r);
    let entries = colors
        .iter()
        .enumerate()
        .map(|(i, &rgb)| PaletteEntry {
            index: i,
            name: format!("c{i}"),
            rgb,
            ciw: if i == 0 { 0.0 } else { 0.5 },
        })
        .collect();
    let palette = ClassPalette::new(entries).unwrap();
    let mask = IndexMask::from_fn(9, 7, |_, _| r.gen_range(0..k) as u8);
    palette.decode_mask(&palette.encode_mask(&mask).unwrap()).unwrap() == mask
}

/// Pixel-centre coordinates in the image and a unique label in the mask;
/// after a geometric op both must point back to the same source pixel.
fn augmentation_aligned(op: AugOp, seed: u64) -> bool {
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
            let inside = |v: f64, p: usize| v >= p as f64 - 1e-3 && v <= p as f64 + 1.0 + 1e-3;
            if !inside(xs, sx) || !inside(ys, sy) {
                return false;
            }
            checked += 1;
        }
    }
    checked > n * n / 4
}

fn split_is_partition(seed: u64) -> bool {
    let mut r = rng(seed);
    let n = r.gen_range(20..400);
    let a = r.gen_range(0.2..0.8);
    let items: Vec<usize> = (0..n).collect();
    let (tr, va, te) = split(&items, [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0], seed).unwrap();
    let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
    all.sort_unstable();
    all == items
}

#[test]
fn criterion_5_invariant_suite() {
    let default_small = EfpnConfig {
        input_size: 64,
        ..EfpnConfig::default()
    };
    let mut failures = Vec::new();
    let mut pyramid = pyramid_laws_hold(default_small, 0);
    for seed in 0..8 {
        let levels = 1 + seed as usize % 3;
        pyramid &= pyramid_laws_hold(EfpnConfig::small(levels, 8, 6, 8 << levels, 3), seed);
    }
    if !pyramid {
        failures.push("pyramid laws");
    }
    if !(0..4).all(classifier_is_shared) {
        failures.push("classifier sharing");
    }
    if !(0..64).all(codec_round_trips) {
        failures.push("mask codec");
    }
    let ops = [AugOp::HorizontalFlip, AugOp::Shear, AugOp::Rotation, AugOp::RandomCrop];
    if !(0..32).all(|s| ops.iter().all(|&op| augmentation_aligned(op, s))) {
        failures.push("augmentation alignment");
    }
    if !(0..128).all(split_is_partition) {
        failures.push("split disjointness");
    }
    verdict(5, "invariant suite", failures.is_empty(), format!("failing: {failures:?}"));
}

fn toy_data(seed: u64) -> (Vec<SegSample>, Vec<SegSample>, Vec<SegSample>) {
    let data = generate_synthetic(&SyntheticConfig::uniform(4, 0.75, 64, 64, seed)).unwrap();
    split(&data, [0.7, 0.15, 0.15], seed).unwrap()
}

fn toy_trainer(seed: u64, epochs: usize) -> Trainer {
    let model = EfpnModel::build(EfpnConfig::small(2, 32, 32, 64, 4), seed).unwrap();
    Trainer::new(model, TrainConfig { epochs, seed, ..Default::default() }).unwrap()
}

#[test]
fn criterion_6_learning_smoke() {
    let (train, val, test) = toy_data(0);
    let mut t = toy_trainer(0, 200);
    let initial = evaluate(&t.model, &train, 8).unwrap().loss;
    let mut best_val = 0.0f64;
    let mut reduction = 0.0;
    t.run(&train, &val, |r| {
        best_val = best_val.max(r.val_iou);
        reduction = 1.0 - r.train_loss / initial;
        !(reduction >= 0.8 && best_val >= 0.6)
    })
    .unwrap();
    let test_iou = evaluate(&t.best_model().unwrap(), &test, 8).unwrap().confusion.mean_iou(true).unwrap();
    verdict(
        6,
        "learning smoke",
        reduction >= 0.8 && test_iou >= 0.6,
        format!(
            "initial loss {initial:.4}, reduction {:.1}% after {} epochs, held-out IoU w/bg {test_iou:.3}",
            reduction * 100.0,
            t.epoch
        ),
    );
}

#[test]
fn criterion_7_imbalance_direction() {
    let ciw = ClassPalette::default().ciw();
    let minority = [7, 8, 9];
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let data = generate_synthetic(&SyntheticConfig::long_tail(0.5, 480, 32, seed)).unwrap();
        let (train, val, test) = split(&data, [0.7, 0.15, 0.15], seed).unwrap();
        let model = EfpnConfig::small(2, 16, 32, 32, 10);
        let tc = TrainConfig { epochs: 20, seed, ..Default::default() };
        let score = |arms: Arms| {
            let wf = WorkflowConfig { arms, ..Default::default() };
            let out = combined_workflow(&train, &val, &test, &model, &tc, &wf, &ciw).unwrap();
            out.metrics.mean_iou_of(&minority).unwrap_or(0.0)
        };
        let (base, comb) = (score(Arms::BASELINE), score(Arms::COMBINED));
        if comb > base {
            wins += 1;
        }
        lines.push(format!("seed {seed}: baseline {base:.4} combined {comb:.4}"));
    }
    verdict(7, "imbalance direction", wins >= 4, format!("{wins}/5 seeds favour combined; {}", lines.join("; ")));
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::TempDir::new().unwrap();
    let (train, val, test) = toy_data(0);
    let ciw = ClassPalette::default_prefix(4).unwrap().ciw();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let mut t = toy_trainer(0, 4);
        t.run(&train, &val, |_| true).unwrap();
        let csv = dir.path().join(format!("history{run}.csv"));
        t.history.write_csv(&csv).unwrap();
        let report = evaluate(&t.best_model().unwrap(), &test, 8).unwrap().confusion.report(&ciw).unwrap();
        artifacts.push((std::fs::read(&csv).unwrap(), serde_json::to_vec_pretty(&report).unwrap()));
    }
    let ok = artifacts[0] == artifacts[1];
    verdict(8, "determinism", ok, format!("history {} bytes, metrics {} bytes", artifacts[0].0.len(), artifacts[0].1.len()));
}
