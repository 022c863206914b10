use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_op, AugmentationSpec};
use super::{rarest_class, ClassStats};
use crate::data::SegSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassAction {
    UndersampleTo(usize),
    AugmentBy(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub class: usize,
    pub count: usize,
    pub action: ClassAction,
}

/// Per-class re-balancing plan over attributed image counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub cap: usize,
    /// Count every planned class is brought to.
    pub target: usize,
    pub entries: Vec<PlanEntry>,
    /// Defect classes with no attributed image; they get no plan.
    pub empty_classes: Vec<usize>,
}

impl BalancePlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn action(&self, class: usize) -> Option<ClassAction> {
        self.entries.iter().find(|e| e.class == class).map(|e| e.action)
    }
}

/// Classes above `cap` are under-sampled to it; every other non-empty class
/// is augmented up to `min(cap, largest surviving count)`.
pub fn balance_plan(stats: &ClassStats, cap: usize) -> BalancePlan {
    let counts = &stats.attributed_counts;
    let target = counts.iter().skip(1).map(|&c| c.min(cap)).max().unwrap_or(0);
    let mut entries = Vec::new();
    let mut empty_classes = Vec::new();
    for (class, &count) in counts.iter().enumerate().skip(1) {
        if count == 0 {
            log::warn!("class {class} has no images; nothing to balance");
            empty_classes.push(class);
        } else if count > cap {
            entries.push(PlanEntry {
                class,
                count,
                action: ClassAction::UndersampleTo(cap),
            });
        } else if count < target {
            entries.push(PlanEntry {
                class,
                count,
                action: ClassAction::AugmentBy(target - count),
            });
        }
    }
    BalancePlan {
        cap,
        target,
        entries,
        empty_classes,
    }
}

/// Executes a plan. Images are attributed to their rarest contained class
/// (by `stats.image_counts`); under-sampled classes keep a seeded subset,
/// augmented classes gain copies that cycle through `spec.ops` over the
/// class's images in order. Kept originals come first in input order,
/// followed by the augmented copies.
pub fn apply_balance(samples: &[SegSample], stats: &ClassStats, plan: &BalancePlan, spec: &AugmentationSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    if spec.ops.is_empty() && plan.entries.iter().any(|e| matches!(e.action, ClassAction::AugmentBy(_))) {
        return Err(Error::config("the balance plan needs augmentation but no operator is enabled"));
    }
    let k = stats.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in samples.iter().enumerate() {
        if let Some(c) = rarest_class(&s.mask, &stats.image_counts) {
            members[c].push(i);
        }
    }
    let mut keep = vec![true; samples.len()];
    let mut extra = Vec::new();
    for e in &plan.entries {
        let idx = &members[e.class];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(e.class as u64);
        match e.action {
            ClassAction::UndersampleTo(n) => {
                let mut chosen = vec![false; idx.len()];
                for j in sample_indices(&mut rng, idx.len(), n.min(idx.len())).into_iter() {
                    chosen[j] = true;
                }
                for (j, &i) in idx.iter().enumerate() {
                    keep[i] = chosen[j];
                }
            }
            ClassAction::AugmentBy(n) => {
                if idx.is_empty() {
                    continue;
                }
                for copy in 0..n {
                    let src = &samples[idx[copy % idx.len()]];
                    let op = spec.ops[copy % spec.ops.len()];
                    let (image, mask) = apply_op(&src.image, &src.mask, op, spec, &mut rng)?;
                    extra.push(SegSample {
                        id: format!("{}_aug{copy}_{op}", src.id),
                        image,
                        mask,
                    });
                }
            }
        }
    }
    Ok(samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .chain(extra)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_and_floor_examples() {
        let stats = ClassStats::from_image_counts(vec![0, 2340, 104, 2000]);
        let plan = balance_plan(&stats, 2000);
        assert_eq!(plan.target, 2000);
        assert_eq!(plan.action(1), Some(ClassAction::UndersampleTo(2000)));
        assert_eq!(plan.action(2), Some(ClassAction::AugmentBy(1896)));
        assert_eq!(plan.action(3), None);
    }

    #[test]
    fn balanced_input_gives_empty_plan() {
        let plan = balance_plan(&ClassStats::from_image_counts(vec![5, 40, 40, 40]), 2000);
        assert!(plan.is_empty());
    }

    #[test]
    fn empty_class_is_reported_not_planned() {
        let plan = balance_plan(&ClassStats::from_image_counts(vec![0, 10, 0, 4]), 2000);
        assert_eq!(plan.empty_classes, vec![2]);
        assert_eq!(plan.action(2), None);
        assert_eq!(plan.action(3), Some(ClassAction::AugmentBy(6)));
    }
}
