#![allow(dead_code)]

use efpn_core::tensor::{finite_diff_check, GradCheckReport, Tape, Var};
use efpn_core::{IndexMask, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_f64(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn rand_masks(n: usize, h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<IndexMask> {
    (0..n).map(|_| IndexMask::from_fn(h, w, |_, _| rng.gen_range(0..k) as u8)).collect()
}

/// Closes an op output with cross-entropy against fixed random targets so
/// every output element gets a distinct, nonlinear weight.
fn ce_head(tape: &mut Tape<f64>, y: Var, masks: &[IndexMask]) -> Result<Var> {
    tape.cross_entropy_loss(y, masks, None)
}

/// One finite-difference report per differentiable primitive for `seed`.
pub fn op_gradchecks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let x = rand_f64(Shape::new(2, 3, 5, 5), &mut r);
    let w = rand_f64(Shape::new(4, 3, 3, 3), &mut r);
    let b = rand_f64(Shape::new(1, 4, 1, 1), &mut r);
    let m = rand_masks(2, 5, 5, 4, &mut r);
    out.push(finite_diff_check(
        "conv2d",
        &[x.clone(), w, b],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let w = rand_f64(Shape::new(4, 3, 3, 3), &mut r);
    let m = rand_masks(2, 3, 3, 4, &mut r);
    out.push(finite_diff_check(
        "conv2d_stride2",
        &[x.clone(), w],
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 1)?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let wd = rand_f64(Shape::new(3, 1, 3, 3), &mut r);
    let m = rand_masks(2, 5, 5, 3, &mut r);
    out.push(finite_diff_check(
        "depthwise_conv2d",
        &[x.clone(), wd],
        |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], 1, 1)?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let wp = rand_f64(Shape::new(4, 3, 1, 1), &mut r);
    let bp = rand_f64(Shape::new(1, 4, 1, 1), &mut r);
    let m = rand_masks(2, 5, 5, 4, &mut r);
    out.push(finite_diff_check(
        "pointwise_conv",
        &[x.clone(), wp, bp],
        |t, v| {
            let y = t.pointwise_conv(v[0], v[1], v[2])?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let xp = rand_f64(Shape::new(2, 3, 6, 6), &mut r);
    let m2 = rand_masks(2, 3, 3, 3, &mut r);
    let m3 = rand_masks(2, 6, 6, 3, &mut r);
    out.push(finite_diff_check(
        "maxpool2d",
        std::slice::from_ref(&xp),
        |t, v| {
            let y = t.maxpool2d(v[0], 2, 2, 0)?;
            ce_head(t, y, &m2)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    out.push(finite_diff_check(
        "maxpool2d_3x3_same",
        std::slice::from_ref(&xp),
        |t, v| {
            let y = t.maxpool2d(v[0], 3, 1, 1)?;
            ce_head(t, y, &m3)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let xs = rand_f64(Shape::new(2, 3, 3, 3), &mut r);
    out.push(finite_diff_check(
        "upsample_nearest2x",
        &[xs],
        |t, v| {
            let y = t.upsample_nearest2x(v[0])?;
            ce_head(t, y, &m3)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let a = rand_f64(Shape::new(2, 1, 4, 4), &mut r);
    let c = rand_f64(Shape::new(2, 2, 4, 4), &mut r);
    let m = rand_masks(2, 4, 4, 3, &mut r);
    out.push(finite_diff_check(
        "concat_channels",
        &[a, c],
        |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);

    let p = rand_f64(Shape::new(2, 3, 4, 4), &mut r);
    let q = rand_f64(Shape::new(2, 3, 4, 4), &mut r);
    out.push(finite_diff_check(
        "relu",
        std::slice::from_ref(&p),
        |t, v| {
            let y = t.relu(v[0])?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    out.push(finite_diff_check(
        "add",
        &[p.clone(), q],
        |t, v| {
            let y = t.add(v[0], v[1])?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    let factor = r.gen_range(-2.0..2.0);
    out.push(finite_diff_check(
        "scale",
        std::slice::from_ref(&p),
        |t, v| {
            let y = t.scale(v[0], factor)?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    let mix = rand_f64(Shape::new(2, 3, 1, 1), &mut r);
    let mix_b = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
    out.push(finite_diff_check(
        "sum",
        std::slice::from_ref(&p),
        |t, v| {
            let s = t.softmax_channels(v[0])?;
            let (wv, bv) = (t.leaf(mix.clone()), t.leaf(mix_b.clone()));
            let y = t.pointwise_conv(s, wv, bv)?;
            t.sum(y)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    out.push(finite_diff_check(
        "softmax_channels",
        std::slice::from_ref(&p),
        |t, v| {
            let y = t.softmax_channels(v[0])?;
            let y = t.scale(y, 3.0)?;
            ce_head(t, y, &m)
        },
        GRAD_EPS,
        OP_TOL,
    )?);
    out.push(finite_diff_check("cross_entropy_loss", std::slice::from_ref(&p), |t, v| ce_head(t, v[0], &m), GRAD_EPS, OP_TOL)?);
    let weights: Vec<f64> = (0..3).map(|_| r.gen_range(0.1..2.0)).collect();
    out.push(finite_diff_check(
        "cross_entropy_loss_weighted",
        &[p],
        |t, v| t.cross_entropy_loss(v[0], &m, Some(&weights)),
        GRAD_EPS,
        OP_TOL,
    )?);
    Ok(out)
}

/// Metrics recomputed pixel by pixel from the mask pairs, without a
/// confusion matrix. MCC is the covariance ratio of one-hot label vectors.
#[derive(Debug)]
pub struct OracleMetrics {
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub iou_with_bg: f64,
    pub iou_without_bg: Option<f64>,
    pub f1_macro: f64,
    pub balanced_accuracy: f64,
    pub mcc: f64,
    pub fwiou: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn oracle_metrics(pairs: &[(IndexMask, IndexMask)], k: usize, ciw: &[f64]) -> OracleMetrics {
    let pixels = || pairs.iter().flat_map(|(p, g)| p.data().iter().zip(g.data()).map(|(&a, &b)| (a as usize, b as usize)));
    let (mut iou, mut f1, mut recall) = (Vec::new(), Vec::new(), Vec::new());
    let mut gt_count = vec![0usize; k];
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in pixels() {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        gt_count[c] = tp + fn_;
        iou.push((tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
        f1.push((tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
        recall.push((tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64));
    }
    let flat = |v: &[Option<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();

    let n = pixels().count() as f64;
    let (mut xm, mut ym) = (vec![0.0; k], vec![0.0; k]);
    for (p, g) in pixels() {
        xm[p] += 1.0 / n;
        ym[g] += 1.0 / n;
    }
    let (mut cxy, mut cxx, mut cyy) = (0.0, 0.0, 0.0);
    for (p, g) in pixels() {
        for c in 0..k {
            let x = f64::from(u8::from(p == c)) - xm[c];
            let y = f64::from(u8::from(g == c)) - ym[c];
            cxy += x * y;
            cxx += x * x;
            cyy += y * y;
        }
    }
    let mcc = if cxx == 0.0 || cyy == 0.0 { 0.0 } else { cxy / (cxx * cyy).sqrt() };

    let (mut num, mut den) = (0.0, 0.0);
    for c in 1..k {
        if gt_count[c] > 0 {
            let w = ciw[c] * gt_count[c] as f64 / n;
            num += w * iou[c].unwrap();
            den += w;
        }
    }
    OracleMetrics {
        iou_with_bg: mean(&flat(&iou)).unwrap(),
        iou_without_bg: mean(&flat(&iou[1..])),
        f1_macro: mean(&flat(&f1)).unwrap(),
        balanced_accuracy: mean(&flat(&recall)).unwrap(),
        mcc,
        fwiou: (den > 0.0).then(|| num / den),
        iou,
        f1,
    }
}

/// Largest disagreement between the confusion-matrix report and the oracle.
pub fn metric_discrepancy(report: &efpn_core::metrics::MetricsReport, o: &OracleMetrics) -> f64 {
    let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let mut d: f64 = 0.0;
    for (a, b) in report.per_class_iou.iter().zip(&o.iou) {
        d = d.max(opt(*a, *b));
    }
    for (a, b) in report.per_class_f1.iter().zip(&o.f1) {
        d = d.max(opt(*a, *b));
    }
    d.max((report.iou_with_bg - o.iou_with_bg).abs())
        .max(opt(report.iou_without_bg, o.iou_without_bg))
        .max((report.f1 - o.f1_macro).abs())
        .max((report.balanced_accuracy - o.balanced_accuracy).abs())
        .max((report.mcc - o.mcc).abs())
        .max(opt(report.fwiou, o.fwiou))
}

/// `count` random `size × size` prediction/ground-truth pairs over `k` classes.
pub fn random_pairs(count: usize, size: usize, k: usize, seed: u64) -> Vec<(IndexMask, IndexMask)> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let g = IndexMask::from_fn(size, size, |_, _| r.gen_range(0..k) as u8);
            // bias predictions toward the truth so IoUs spread over (0, 1)
            let p = IndexMask::from_fn(size, size, |y, x| if r.gen_bool(0.6) { g.get(y, x) } else { r.gen_range(0..k) as u8 });
            (p, g)
        })
        .collect()
}
