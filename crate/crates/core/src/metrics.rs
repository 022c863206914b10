//! Confusion-matrix based segmentation metrics.
//!
//! Every metric is derived from one `K × K` pixel-count table. Classes whose
//! IoU denominator is zero (absent from both ground truth and prediction) are
//! reported as `None` and left out of macro averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IndexMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row-major, `counts[g * k + p]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::usage(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Pixels with ground truth `g` predicted as `p`.
    pub fn get(&self, g: usize, p: usize) -> u64 {
        self.counts[g * self.k + p]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.k..(g + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, p)).sum()
    }

    pub fn accumulate(&mut self, pred: &IndexMask, gt: &IndexMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::data(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate(self.k).map_err(|e| tag("ground truth", e))?;
        pred.validate(self.k).map_err(|e| tag("prediction", e))?;
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::usage(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k = TP / (TP + FP + FN)`, `None` when the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row_sum(c) + self.col_sum(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// `F1_k = 2TP / (2TP + FP + FN)`, `None` when the denominator is zero.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row_sum(c) + self.col_sum(c);
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Recall per class, `None` for classes absent from the ground truth.
    pub fn recall_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let row = self.row_sum(c);
                (row > 0).then(|| self.get(c, c) as f64 / row as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self, include_background: bool) -> Result<f64> {
        let skip = usize::from(!include_background);
        mean_present(&self.iou_per_class()[skip.min(self.k)..]).ok_or_else(|| {
            Error::UndefinedMetric(format!(
                "mean IoU ({} background): no class present",
                if include_background { "with" } else { "without" }
            ))
        })
    }

    pub fn f1_macro(&self) -> Result<f64> {
        mean_present(&self.f1_per_class()).ok_or_else(|| Error::UndefinedMetric("macro F1: no class present".into()))
    }

    pub fn balanced_accuracy(&self) -> Result<f64> {
        mean_present(&self.recall_per_class())
            .ok_or_else(|| Error::UndefinedMetric("balanced accuracy: empty ground truth".into()))
    }

    /// Multi-class Matthews correlation; 0 with `degenerate = true` when
    /// either marginal has zero variance.
    pub fn mcc(&self) -> Mcc {
        let s = self.total() as f64;
        let c: f64 = (0..self.k).map(|i| self.get(i, i) as f64).sum();
        let p: Vec<f64> = (0..self.k).map(|i| self.col_sum(i) as f64).collect();
        let t: Vec<f64> = (0..self.k).map(|i| self.row_sum(i) as f64).collect();
        let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|a| a * a).sum();
        let tt: f64 = t.iter().map(|a| a * a).sum();
        let var_p = s * s - pp;
        let var_t = s * s - tt;
        if var_p <= 0.0 || var_t <= 0.0 {
            return Mcc {
                value: 0.0,
                degenerate: true,
            };
        }
        Mcc {
            value: (c * s - pt) / (var_p.sqrt() * var_t.sqrt()),
            degenerate: false,
        }
    }

    /// CIW-weighted frequency IoU over defect classes (index ≥ 1) present in
    /// the ground truth. With `use_frequency = false` the weights are the CIW
    /// values alone.
    pub fn fwiou(&self, ciw: &[f64], use_frequency: bool) -> Result<f64> {
        if ciw.len() != self.k {
            return Err(Error::usage(format!("{} CIW weights for {} classes", ciw.len(), self.k)));
        }
        let iou = self.iou_per_class();
        let gt_defects: u64 = (1..self.k).map(|c| self.row_sum(c)).sum();
        if gt_defects == 0 {
            return Err(Error::UndefinedMetric("FWIoU: ground truth has no defect pixels".into()));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for c in 1..self.k {
            let row = self.row_sum(c);
            if row == 0 {
                continue;
            }
            let f = if use_frequency { row as f64 / self.total() as f64 } else { 1.0 };
            let w = ciw[c] * f;
            num += w * iou[c].expect("present in ground truth");
            den += w;
        }
        if den == 0.0 {
            return Err(Error::UndefinedMetric(
                "FWIoU: every defect class present has zero weight".into(),
            ));
        }
        Ok(num / den)
    }

    pub fn report(&self, ciw: &[f64]) -> Result<MetricsReport> {
        let mcc = self.mcc();
        let fwiou = match self.fwiou(ciw, true) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            iou_with_bg: self.mean_iou(true)?,
            iou_without_bg: self.mean_iou(false).ok(),
            fwiou,
            f1: self.f1_macro()?,
            balanced_accuracy: self.balanced_accuracy()?,
            mcc: mcc.value,
            mcc_degenerate: mcc.degenerate,
            per_class_iou: self.iou_per_class(),
            per_class_f1: self.f1_per_class(),
            per_class_recall: self.recall_per_class(),
            pixels: self.total(),
        })
    }
}

fn tag(what: &str, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::data(format!("{what}: {m}")),
        other => other,
    }
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mcc {
    pub value: f64,
    pub degenerate: bool,
}

/// Flat metrics record; absent values serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_with_bg: f64,
    pub iou_without_bg: Option<f64>,
    pub fwiou: Option<f64>,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub mcc: f64,
    pub mcc_degenerate: bool,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub pixels: u64,
}

impl MetricsReport {
    /// Mean IoU over the given classes, skipping absent ones.
    pub fn mean_iou_of(&self, classes: &[usize]) -> Option<f64> {
        let picked: Vec<Option<f64>> = classes
            .iter()
            .map(|&c| self.per_class_iou.get(c).copied().flatten())
            .collect();
        mean_present(&picked)
    }
}

/// Metrics over a set of prediction/ground-truth pairs.
pub fn evaluate(pairs: impl IntoIterator<Item = (IndexMask, IndexMask)>, ciw: &[f64]) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(ciw.len());
    for (pred, gt) in pairs {
        cm.accumulate(&pred, &gt)?;
    }
    cm.report(ciw)
}

/// Class importance weights by class name. Background is always 0; names
/// without an entry get 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiwTable {
    weights: BTreeMap<String, f64>,
}

impl Default for CiwTable {
    /// Severity weights of the culvert-sewer deficiency classes.
    fn default() -> Self {
        let rows = [
            ("Crack", 1.0),
            ("Root", 1.0),
            ("Hole", 1.0),
            ("Joint Problems", 0.6419),
            ("Deformation", 0.1622),
            ("Fracture", 0.51),
            ("Water Level", 0.031),
            ("Encrustation", 0.3518),
            ("Loose Gasket", 0.5419),
        ];
        CiwTable {
            weights: rows.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
        }
    }
}

impl CiwTable {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        for (name, &w) in &weights {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(format!("CIW weight {w} for {name} is outside [0, 1]")));
            }
        }
        Ok(CiwTable { weights })
    }

    pub fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(1.0)
    }

    /// Weights for an ordered class list whose first entry is background.
    pub fn resolve(&self, class_names: &[&str]) -> Vec<f64> {
        class_names
            .iter()
            .enumerate()
            .map(|(i, n)| if i == 0 { 0.0 } else { self.weight(n) })
            .collect()
    }
}
