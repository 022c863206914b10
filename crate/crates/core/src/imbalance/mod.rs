//! Class-imbalance tooling: class decomposition into per-group models with
//! probability fusion, mask-consistent augmentation, capped re-balancing,
//! and the workflow that combines them.

mod augment;
mod balance;
mod workflow;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{apply_op, augment_sample, color_jitter, gaussian_blur, rotate, AugOp, AugmentationSpec};
pub use balance::{apply_balance, balance_plan, BalancePlan, ClassAction, PlanEntry};
pub use workflow::{combined_workflow, Arms, WorkflowConfig, WorkflowOutcome};

use crate::data::{load_checkpoint, save_checkpoint, SegSample};
use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::model::{argmax_channels, EfpnModel};
use crate::tensor::{Shape, Tensor};

/// Per-class image and pixel counts. Index 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Images whose mask contains the class.
    pub image_counts: Vec<usize>,
    pub pixel_counts: Vec<u64>,
    /// Images attributed to the class as their rarest contained defect.
    pub attributed_counts: Vec<usize>,
}

impl ClassStats {
    pub fn from_samples(samples: &[SegSample], num_classes: usize) -> Self {
        let (image_counts, pixel_counts) = crate::data::class_histogram(samples, num_classes);
        let mut attributed_counts = vec![0; num_classes];
        for s in samples {
            if let Some(c) = rarest_class(&s.mask, &image_counts) {
                attributed_counts[c] += 1;
            }
        }
        ClassStats {
            image_counts,
            pixel_counts,
            attributed_counts,
        }
    }

    /// Stats of single-label images: every image holds exactly one class.
    pub fn from_image_counts(image_counts: Vec<usize>) -> Self {
        ClassStats {
            pixel_counts: vec![0; image_counts.len()],
            attributed_counts: image_counts.clone(),
            image_counts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.image_counts.len()
    }
}

/// The contained defect class with the fewest images (ties to the lower
/// index), or `None` for an all-background mask.
pub fn rarest_class(mask: &IndexMask, image_counts: &[usize]) -> Option<usize> {
    let mut present = vec![false; image_counts.len()];
    for &v in mask.data() {
        if let Some(p) = present.get_mut(v as usize) {
            *p = true;
        }
    }
    (1..image_counts.len())
        .filter(|&c| present[c])
        .min_by_key(|&c| (image_counts[c], c))
}

/// Disjoint groups of defect classes, each trained as its own model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_size: usize,
    /// Class indices per group, ascending within each group.
    pub groups: Vec<Vec<usize>>,
    /// Unordered pairs that must not share a group.
    pub conflicts: Vec<(usize, usize)>,
}

impl GroupSpec {
    pub fn num_classes(&self) -> usize {
        self.groups.iter().flatten().max().map_or(1, |&m| m + 1)
    }

    pub fn group_of(&self, class: usize) -> Option<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(g, cs)| cs.iter().position(|&c| c == class).map(|i| (g, i + 1)))
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for (g, cs) in self.groups.iter().enumerate() {
            if cs.is_empty() || cs.len() > self.group_size {
                return Err(Error::config(format!("group {g} has {} classes", cs.len())));
            }
            if g + 1 < self.groups.len() && cs.len() != self.group_size {
                return Err(Error::config(format!("only the last group may be smaller than {}", self.group_size)));
            }
            for &c in cs {
                if c == 0 || c >= num_classes || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::config(format!("class {c} is invalid or repeated in the groups")));
                }
            }
            for &(a, b) in &self.conflicts {
                if cs.contains(&a) && cs.contains(&b) {
                    return Err(Error::config(format!("group {g} holds conflicting classes {a} and {b}")));
                }
            }
        }
        if let Some(c) = (1..num_classes).find(|&c| !seen[c]) {
            return Err(Error::config(format!("class {c} is in no group")));
        }
        Ok(())
    }
}

/// Greedy balanced partition: classes in descending image count (ties by
/// index) each join the non-full, conflict-free group with the smallest
/// running image total (ties to the lower group).
pub fn decompose(stats: &ClassStats, group_size: usize, conflicts: &[(usize, usize)]) -> Result<GroupSpec> {
    let k = stats.num_classes();
    if group_size == 0 {
        return Err(Error::config("group_size must be positive"));
    }
    if k < 2 {
        return Err(Error::config("decomposition needs at least one defect class"));
    }
    for &(a, b) in conflicts {
        if a == 0 || b == 0 || a >= k || b >= k || a == b {
            return Err(Error::config(format!("conflict pair ({a}, {b}) is not a pair of distinct defect classes")));
        }
    }
    let defects = k - 1;
    let num_groups = defects.div_ceil(group_size);
    let capacity = |g: usize| if g + 1 < num_groups { group_size } else { defects - group_size * (num_groups - 1) };
    let mut order: Vec<usize> = (1..k).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(stats.image_counts[c]), c));
    let conflicting = |a: usize, b: usize| conflicts.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    let mut totals = vec![0usize; num_groups];
    for c in order {
        let pick = (0..num_groups)
            .filter(|&g| groups[g].len() < capacity(g) && !groups[g].iter().any(|&m| conflicting(c, m)))
            .min_by_key(|&g| (totals[g], g));
        match pick {
            Some(g) => {
                groups[g].push(c);
                totals[g] += stats.image_counts[c];
            }
            None => {
                let blocker = groups
                    .iter()
                    .enumerate()
                    .filter(|(g, m)| m.len() < capacity(*g))
                    .flat_map(|(_, m)| m.iter().copied())
                    .find(|&m| conflicting(c, m));
                return Err(Error::Planning(match blocker {
                    Some(m) => format!("class {c} conflicts with class {m} in every group with room left"),
                    None => format!("no group has room for class {c}"),
                }));
            }
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(GroupSpec {
        group_size,
        groups,
        conflicts: conflicts.to_vec(),
    })
}

/// Lookup table taking global class indices to group-local ones.
pub fn group_lut(group: &[usize]) -> [u8; 256] {
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    let mut lut = [0u8; 256];
    for (i, &c) in sorted.iter().enumerate() {
        lut[c] = (i + 1) as u8;
    }
    lut
}

/// Remaps masks to the group's local indices (group classes ascending to
/// 1..=g, everything else to 0) and drops samples left with background only.
pub fn project_dataset(samples: &[SegSample], group: &[usize]) -> Vec<SegSample> {
    let lut = group_lut(group);
    samples
        .iter()
        .filter_map(|s| {
            let mask = s.mask.map(|v| lut[v as usize]);
            (!mask.is_all_background()).then(|| SegSample {
                id: s.id.clone(),
                image: s.image.clone(),
                mask,
            })
        })
        .collect()
}

/// Fuses per-group probability maps `(N, g_j + 1, H, W)` into global
/// `(N, K, H, W)` probabilities: each defect class takes its own group's
/// probability, background the mean of all background probabilities, then
/// each pixel is renormalised. The mask is the arg-max (ties to the lower
/// index).
pub fn fuse_predictions(spec: &GroupSpec, num_classes: usize, prob_maps: &[Tensor]) -> Result<(Vec<IndexMask>, Tensor)> {
    if prob_maps.len() != spec.groups.len() {
        return Err(Error::usage(format!(
            "{} probability maps for {} groups",
            prob_maps.len(),
            spec.groups.len()
        )));
    }
    let s0 = prob_maps[0].shape();
    for (j, (pm, g)) in prob_maps.iter().zip(&spec.groups).enumerate() {
        let s = pm.shape();
        if s.c != g.len() + 1 || (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::usage(format!(
                "group {j} has {} classes but its probability map is {s}",
                g.len()
            )));
        }
        if let Some(&c) = g.iter().find(|&&c| c >= num_classes) {
            return Err(Error::usage(format!("group {j} class {c} exceeds {num_classes} classes")));
        }
    }
    let plane = s0.h * s0.w;
    let out_shape = Shape::new(s0.n, num_classes, s0.h, s0.w);
    let mut out = vec![0f32; out_shape.numel()];
    let inv_groups = 1.0 / prob_maps.len() as f64;
    for n in 0..s0.n {
        for px in 0..plane {
            let mut v = vec![0f64; num_classes];
            for (pm, g) in prob_maps.iter().zip(&spec.groups) {
                let base = n * pm.shape().sample() + px;
                v[0] += pm.data()[base] as f64 * inv_groups;
                let mut sorted = g.clone();
                sorted.sort_unstable();
                for (i, &c) in sorted.iter().enumerate() {
                    v[c] = pm.data()[base + (i + 1) * plane] as f64;
                }
            }
            let total: f64 = v.iter().sum();
            for (c, x) in v.iter().enumerate() {
                out[n * out_shape.sample() + c * plane + px] = if total > 0.0 {
                    (x / total) as f32
                } else {
                    (c == 0) as u8 as f32
                };
            }
        }
    }
    let probs = Tensor::new(out_shape, out)?;
    Ok((argmax_channels(&probs), probs))
}

/// One trained model per group plus the grouping itself.
#[derive(Clone, Debug)]
pub struct EnsembleBundle {
    pub group_spec: GroupSpec,
    pub num_classes: usize,
    pub models: Vec<EfpnModel>,
}

impl EnsembleBundle {
    pub fn new(group_spec: GroupSpec, num_classes: usize, models: Vec<EfpnModel>) -> Result<Self> {
        group_spec.validate(num_classes)?;
        if models.len() != group_spec.groups.len() {
            return Err(Error::usage(format!(
                "{} models for {} groups",
                models.len(),
                group_spec.groups.len()
            )));
        }
        for (j, (m, g)) in models.iter().zip(&group_spec.groups).enumerate() {
            if m.num_classes() != g.len() + 1 {
                return Err(Error::usage(format!(
                    "group {j} model has {} outputs, expected {}",
                    m.num_classes(),
                    g.len() + 1
                )));
            }
        }
        Ok(EnsembleBundle {
            group_spec,
            num_classes,
            models,
        })
    }

    pub fn predict(&self, input: &Tensor) -> Result<(Vec<IndexMask>, Tensor)> {
        let maps = self
            .models
            .iter()
            .map(|m| m.predict_proba(input))
            .collect::<Result<Vec<_>>>()?;
        fuse_predictions(&self.group_spec, self.num_classes, &maps)
    }

    /// Writes `groups.json` and `group{j}.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({ "num_classes": self.num_classes, "group_spec": self.group_spec });
        let path = dir.join("groups.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json") + "\n").map_err(|e| Error::io(&path, e))?;
        for (j, m) in self.models.iter().enumerate() {
            save_checkpoint(m, &dir.join(format!("group{j}.ckpt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            num_classes: usize,
            group_spec: GroupSpec,
        }
        let path = dir.join("groups.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::file(&path, e.to_string()))?;
        let models = (0..meta.group_spec.groups.len())
            .map(|j| load_checkpoint(&dir.join(format!("group{j}.ckpt"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(meta.group_spec, meta.num_classes, models)
    }
}
