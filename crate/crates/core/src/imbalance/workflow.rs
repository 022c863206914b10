use serde::{Deserialize, Serialize};

use super::{
    apply_balance, balance_plan, decompose, project_dataset, AugmentationSpec, ClassStats, EnsembleBundle, GroupSpec,
};
use crate::data::{make_batch, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{EfpnConfig, EfpnModel};
use crate::trainer::{TrainConfig, TrainHistory, Trainer};

/// Which imbalance measures a workflow run applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arms {
    pub decomposition: bool,
    pub augmentation: bool,
}

impl Arms {
    pub const BASELINE: Arms = Arms {
        decomposition: false,
        augmentation: false,
    };
    pub const COMBINED: Arms = Arms {
        decomposition: true,
        augmentation: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub group_size: usize,
    pub conflicts: Vec<(usize, usize)>,
    /// Per-class image cap for under-sampling.
    pub cap: usize,
    pub augmentation: AugmentationSpec,
    pub arms: Arms,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            group_size: 3,
            conflicts: vec![(1, 5)],
            cap: 2000,
            augmentation: AugmentationSpec::default(),
            arms: Arms::COMBINED,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorkflowOutcome {
    pub bundle: EnsembleBundle,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub histories: Vec<TrainHistory>,
    /// Training-set size of each group after projection and balancing.
    pub group_train_sizes: Vec<usize>,
}

/// Decompose, project, balance, train one model per group, then evaluate
/// the fused ensemble on the untouched `test` set.
pub fn combined_workflow(
    train: &[SegSample],
    val: &[SegSample],
    test: &[SegSample],
    model: &EfpnConfig,
    train_cfg: &TrainConfig,
    wf: &WorkflowConfig,
    ciw: &[f64],
) -> Result<WorkflowOutcome> {
    let k = model.num_classes;
    if ciw.len() != k {
        return Err(Error::config(format!("{} CIW weights for {k} classes", ciw.len())));
    }
    let stats = ClassStats::from_samples(train, k);
    let spec = if wf.arms.decomposition {
        decompose(&stats, wf.group_size, &wf.conflicts)?
    } else {
        GroupSpec {
            group_size: k - 1,
            groups: vec![(1..k).collect()],
            conflicts: Vec::new(),
        }
    };
    let mut models = Vec::with_capacity(spec.groups.len());
    let mut histories = Vec::new();
    let mut sizes = Vec::new();
    for (j, group) in spec.groups.iter().enumerate() {
        let kg = group.len() + 1;
        let mut g_train = project_dataset(train, group);
        let g_val = project_dataset(val, group);
        if wf.arms.augmentation {
            let g_stats = ClassStats::from_samples(&g_train, kg);
            let plan = balance_plan(&g_stats, wf.cap);
            let aug = AugmentationSpec {
                seed: wf.augmentation.seed.wrapping_add(j as u64),
                ..wf.augmentation.clone()
            };
            g_train = apply_balance(&g_train, &g_stats, &plan, &aug)?;
        }
        if let Some(s) = g_train.iter().chain(&g_val).find(|s| s.mask.data().iter().any(|&v| v as usize >= kg)) {
            return Err(Error::data(format!("group {j} sample {} carries an out-of-group label", s.id)));
        }
        if g_train.is_empty() {
            return Err(Error::data(format!("group {j} {group:?} has no training images")));
        }
        sizes.push(g_train.len());
        let cfg = EfpnConfig {
            num_classes: kg,
            ..model.clone()
        };
        let net = EfpnModel::build(cfg, train_cfg.seed.wrapping_add(j as u64))?;
        let mut trainer = Trainer::new(net, train_cfg.clone())?;
        trainer.run(&g_train, &g_val, |_| true)?;
        models.push(trainer.best_model()?);
        histories.push(trainer.history);
    }
    let bundle = EnsembleBundle::new(spec, k, models)?;
    let mut confusion = ConfusionMatrix::new(k);
    for chunk in test.chunks(train_cfg.batch_size) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, masks) = make_batch(&refs)?;
        let (pred, _) = bundle.predict(&x)?;
        for (p, g) in pred.iter().zip(&masks) {
            confusion.accumulate(p, g)?;
        }
    }
    let metrics = confusion.report(ciw)?;
    Ok(WorkflowOutcome {
        bundle,
        metrics,
        confusion,
        histories,
        group_train_sizes: sizes,
    })
}
