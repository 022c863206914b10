//! The E-FPN network: a bottom-up pyramid of multi-scale blocks, a top-down
//! pathway that fuses 1×1 lateral projections at a fixed channel width, and
//! one classifier shared by every pyramid level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::nn::{
    pointwise_flops, Cost, DwSepConv, DwSepConvSpec, InceptionRefSpec, MultiScaleBlock,
    MultiScaleBlockSpec, ParamStore, Pointwise,
};
use crate::tensor::{Element, Shape, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub blocks: usize,
    /// Widths of the 1×1, 3×3, 5×5 and pooled branches.
    pub branch_widths: [usize; 4],
    pub extra_depthwise_layers: usize,
}

impl StageConfig {
    /// Branch split of 1/8, 1/4, 1/2 and the remainder of `out_channels`.
    pub fn new(out_channels: usize, blocks: usize) -> Self {
        let (a, b, c) = (out_channels / 8, out_channels / 4, out_channels / 2);
        StageConfig {
            out_channels,
            blocks,
            branch_widths: [a, b, c, out_channels - a - b - c],
            extra_depthwise_layers: 2,
        }
    }

    /// Specs of this stage's blocks, the first taking `in_channels`.
    pub fn block_specs(&self, in_channels: usize) -> Vec<MultiScaleBlockSpec> {
        (0..self.blocks)
            .map(|b| MultiScaleBlockSpec {
                in_channels: if b == 0 { in_channels } else { self.out_channels },
                out_channels: self.out_channels,
                branch_widths: self.branch_widths,
                extra_depthwise_layers: self.extra_depthwise_layers,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfpnConfig {
    pub input_channels: usize,
    /// Nominal square input side, used for FLOP accounting.
    pub input_size: usize,
    pub num_classes: usize,
    /// Channels of the first stage; every later stage doubles it.
    pub base_channels: usize,
    /// Channel width of every top-down map.
    pub lateral_channels: usize,
    pub stages: Vec<StageConfig>,
}

/// Blocks per stage of the shipped default, chosen so the trainable
/// parameter total lands within 0.05% of the 1,324,660 target budget.
pub const CALIBRATED_BLOCKS: [usize; 4] = [4, 2, 5, 3];

impl Default for EfpnConfig {
    fn default() -> Self {
        Self::calibrated(10)
    }
}

impl EfpnConfig {
    /// Four stages (64/128/256/512 channels), 128-channel top-down maps,
    /// 256×256 input.
    pub fn calibrated(num_classes: usize) -> Self {
        EfpnConfig {
            input_channels: 3,
            input_size: 256,
            num_classes,
            base_channels: 64,
            lateral_channels: 128,
            stages: CALIBRATED_BLOCKS
                .iter()
                .enumerate()
                .map(|(i, &b)| StageConfig::new(64 << i, b))
                .collect(),
        }
    }

    /// A pyramid of `levels` single-block stages starting at `base_channels`.
    pub fn small(levels: usize, base_channels: usize, lateral_channels: usize, input_size: usize, num_classes: usize) -> Self {
        EfpnConfig {
            input_channels: 3,
            input_size,
            num_classes,
            base_channels,
            lateral_channels,
            stages: (0..levels).map(|i| StageConfig::new(base_channels << i, 1)).collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::config(format!("EfpnConfig.{field}: {why}")));
        if self.input_channels == 0 {
            return bad("input_channels", "must be positive".into());
        }
        if !(1..=256).contains(&self.num_classes) {
            return bad("num_classes", format!("{} is outside 1..=256", self.num_classes));
        }
        if self.lateral_channels == 0 {
            return bad("lateral_channels", "must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("stages", "at least one stage is required".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let expected = self.base_channels << i;
            if s.out_channels != expected {
                return bad(
                    &format!("stages[{i}].out_channels"),
                    format!("is {}, expected {expected} (base channels doubling per stage)", s.out_channels),
                );
            }
            if s.blocks == 0 {
                return bad(&format!("stages[{i}].blocks"), "must be at least 1".into());
            }
            let in_c = if i == 0 { self.input_channels } else { self.stages[i - 1].out_channels };
            for spec in s.block_specs(in_c) {
                spec.validate()
                    .map_err(|e| Error::config(format!("EfpnConfig.stages[{i}].branch_widths: {e}")))?;
            }
        }
        let div = 1usize << (self.levels() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return bad(
                "input_size",
                format!("{} is not a positive multiple of {div}", self.input_size),
            );
        }
        Ok(())
    }

    fn stage_inputs(&self) -> impl Iterator<Item = (usize, &StageConfig)> {
        self.stages.iter().enumerate().map(move |(i, s)| {
            let in_c = if i == 0 { self.input_channels } else { self.stages[i - 1].out_channels };
            (in_c, s)
        })
    }

    fn smoothing_spec(&self) -> DwSepConvSpec {
        DwSepConvSpec::same(self.lateral_channels, self.lateral_channels, 3)
    }

    /// Trainable parameters per module, in build order.
    pub fn param_breakdown(&self) -> Vec<(String, u64)> {
        let mut rows = Vec::new();
        for (l, (in_c, s)) in self.stage_inputs().enumerate() {
            let total: u64 = s.block_specs(in_c).iter().map(|b| b.param_count()).sum();
            rows.push((format!("stage{l} ({} x multi-scale block, {} ch)", s.blocks, s.out_channels), total));
        }
        for (l, s) in self.stages.iter().enumerate() {
            let lat = (s.out_channels * self.lateral_channels + self.lateral_channels) as u64;
            rows.push((format!("lateral{l} (1x1, {} -> {})", s.out_channels, self.lateral_channels), lat));
        }
        let smooth = self.smoothing_spec().param_count();
        for l in 0..self.levels() - 1 {
            rows.push((format!("smooth{l} (3x3 separable, {} ch)", self.lateral_channels), smooth));
        }
        let cls = (self.lateral_channels * self.num_classes + self.num_classes) as u64;
        rows.push((format!("classifier (1x1, {} -> {}, shared)", self.lateral_channels, self.num_classes), cls));
        rows
    }

    pub fn param_count(&self) -> u64 {
        self.param_breakdown().iter().map(|(_, n)| n).sum()
    }

    /// FLOPs per module for one `input_size × input_size` sample.
    pub fn flop_breakdown(&self, input_size: usize) -> Vec<(String, u64)> {
        let lat = self.lateral_channels;
        let k = self.num_classes;
        let res = |l: usize| input_size >> l;
        let mut rows = Vec::new();
        for (l, (in_c, s)) in self.stage_inputs().enumerate() {
            let r = res(l);
            let pool = if l > 0 { (in_c * r * r) as u64 } else { 0 };
            let blocks: u64 = s.block_specs(in_c).iter().map(|b| b.flops(r, r)).sum();
            rows.push((format!("stage{l}"), pool + blocks));
        }
        for (l, s) in self.stages.iter().enumerate() {
            let r = res(l);
            rows.push((format!("lateral{l}"), pointwise_flops(s.out_channels, lat, r, r)));
        }
        for l in 0..self.levels() - 1 {
            let r = res(l);
            let elems = (lat * r * r) as u64;
            // merge add + separable conv + ReLU
            rows.push((format!("smooth{l}"), elems + self.smoothing_spec().flops(r, r) + elems));
        }
        let classify: u64 = (0..self.levels()).map(|l| pointwise_flops(lat, k, res(l), res(l))).sum();
        let full = (k * input_size * input_size) as u64;
        // (L - 1) adds plus one scale to average the upsampled level logits
        rows.push(("classifier".into(), classify + self.levels() as u64 * full));
        rows
    }

    pub fn flop_count(&self, input_size: usize) -> u64 {
        self.flop_breakdown(input_size).iter().map(|(_, n)| n).sum()
    }

    /// Per pyramid level, FLOPs of reference Inception blocks with the same
    /// channel and branch configuration divided by FLOPs of the multi-scale
    /// blocks at that level.
    pub fn flop_ratio_vs_inception(&self) -> FlopRatioReport {
        let per_level: Vec<LevelFlops> = self
            .stage_inputs()
            .enumerate()
            .map(|(l, (in_c, s))| {
                let r = self.input_size >> l;
                let specs = s.block_specs(in_c);
                let multiscale: u64 = specs.iter().map(|b| b.flops(r, r)).sum();
                let inception: u64 = specs.iter().map(|b| InceptionRefSpec::matching(b).flops(r, r)).sum();
                LevelFlops {
                    level: l,
                    multiscale,
                    inception,
                    ratio: inception as f64 / multiscale as f64,
                }
            })
            .collect();
        let min_ratio = per_level.iter().map(|l| l.ratio).fold(f64::INFINITY, f64::min);
        FlopRatioReport { per_level, min_ratio }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelFlops {
    pub level: usize,
    pub multiscale: u64,
    pub inception: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRatioReport {
    pub per_level: Vec<LevelFlops>,
    /// Smallest per-level ratio.
    pub min_ratio: f64,
}

#[derive(Clone, Debug)]
struct Arch {
    stages: Vec<Vec<MultiScaleBlock>>,
    laterals: Vec<Pointwise>,
    /// `smoothing[l]` follows the merge at level `l`; the coarsest level has none.
    smoothing: Vec<DwSepConv>,
    classifier: Pointwise,
}

impl Arch {
    fn build(config: &EfpnConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for (l, (in_c, s)) in config.stage_inputs().enumerate() {
            let blocks = s
                .block_specs(in_c)
                .into_iter()
                .enumerate()
                .map(|(b, spec)| MultiScaleBlock::new(store, &format!("stage{l}.block{b}"), spec, &mut rng))
                .collect::<Result<_>>()?;
            stages.push(blocks);
        }
        let laterals = config
            .stages
            .iter()
            .enumerate()
            .map(|(l, s)| Pointwise::new(store, &format!("lateral{l}"), s.out_channels, config.lateral_channels, &mut rng))
            .collect::<Result<_>>()?;
        let smoothing = (0..config.levels() - 1)
            .map(|l| DwSepConv::new(store, &format!("smooth{l}"), config.smoothing_spec(), &mut rng))
            .collect::<Result<_>>()?;
        let classifier = Pointwise::new(store, "classifier", config.lateral_channels, config.num_classes, &mut rng)?;
        Ok(Arch {
            stages,
            laterals,
            smoothing,
            classifier,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EfpnModel {
    config: EfpnConfig,
    params: ParamStore,
    arch: Arch,
}

impl EfpnModel {
    /// Builds a model with He-uniform weights and zero biases drawn
    /// deterministically from `seed`.
    pub fn build(config: EfpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = Arch::build(&config, &mut params, seed)?;
        Ok(EfpnModel { config, params, arch })
    }

    /// Rebuilds a model from a configuration and a full set of named
    /// parameters (names and shapes must match the architecture).
    pub fn from_parts(config: EfpnConfig, params: ParamStore) -> Result<Self> {
        let template = Self::build(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::config(format!(
                "architecture has {} parameters, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {} {}, got {} {}",
                    want.name,
                    want.tensor.shape(),
                    got.name,
                    got.tensor.shape()
                )));
            }
        }
        Ok(EfpnModel {
            config: template.config,
            params,
            arch: template.arch,
        })
    }

    pub fn config(&self) -> &EfpnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        *self = Self::from_parts(self.config.clone(), params)?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    /// Sum of element counts over trainable parameters.
    pub fn param_count(&self) -> u64 {
        self.params.num_trainable_elements() as u64
    }

    pub fn flop_count(&self, input_size: usize) -> u64 {
        self.config.flop_count(input_size)
    }

    pub fn flop_ratio_vs_inception(&self) -> FlopRatioReport {
        self.config.flop_ratio_vs_inception()
    }

    /// Names of the shared classifier's weight and bias.
    pub fn classifier_param_names(&self) -> [String; 2] {
        [
            self.params.get(self.arch.classifier.weight()).name.clone(),
            self.params.get(self.arch.classifier.bias()).name.clone(),
        ]
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let div = 1usize << (self.levels() - 1);
        if s.c != self.config.input_channels || !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) || s.h == 0 || s.w == 0 {
            return Err(Error::data(format!(
                "input {s} needs {} channels and spatial dims that are positive multiples of {div}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Bottom-up feature maps, finest (level 0) first.
    pub fn bottom_up<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Vec<Var>> {
        self.check_input(tape.shape(x))?;
        let mut levels = Vec::with_capacity(self.levels());
        let mut y = x;
        for (l, blocks) in self.arch.stages.iter().enumerate() {
            if l > 0 {
                y = tape.maxpool2d(y, 2, 2, 0)?;
            }
            for block in blocks {
                y = block.forward(tape, p, y)?;
            }
            levels.push(y);
        }
        Ok(levels)
    }

    /// Top-down maps, coarsest first. Every map has `lateral_channels`.
    pub fn top_down<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], levels: &[Var]) -> Result<Vec<Var>> {
        if levels.len() != self.levels() {
            return Err(Error::usage(format!(
                "top_down expects {} bottom-up levels, got {}",
                self.levels(),
                levels.len()
            )));
        }
        let last = self.levels() - 1;
        let mut prev = self.arch.laterals[last].forward(tape, p, levels[last])?;
        let mut pmaps = vec![prev];
        for l in (0..last).rev() {
            let up = tape.upsample_nearest2x(prev)?;
            let lat = self.arch.laterals[l].forward(tape, p, levels[l])?;
            let merged = tape.add(up, lat)?;
            prev = self.arch.smoothing[l].forward(tape, p, merged)?;
            pmaps.push(prev);
        }
        Ok(pmaps)
    }

    /// Per-level logits from the shared classifier, each upsampled to the
    /// finest resolution, in the order of `pmaps`.
    pub fn level_logits<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], pmaps: &[Var]) -> Result<Vec<Var>> {
        let full = pmaps
            .iter()
            .map(|&v| tape.shape(v).h)
            .max()
            .ok_or_else(|| Error::usage("classify needs at least one map"))?;
        pmaps
            .iter()
            .map(|&pm| {
                let logits = self.arch.classifier.forward(tape, p, pm)?;
                let factor = full / tape.shape(pm).h;
                if factor == 1 {
                    Ok(logits)
                } else {
                    tape.upsample_nearest(logits, factor)
                }
            })
            .collect()
    }

    /// Mean of the per-level logits (raw, no softmax).
    pub fn classify<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], pmaps: &[Var]) -> Result<Var> {
        let per_level = self.level_logits(tape, p, pmaps)?;
        let mut acc = per_level[0];
        for &l in &per_level[1..] {
            acc = tape.add(acc, l)?;
        }
        tape.scale(acc, 1.0 / per_level.len() as f64)
    }

    pub fn forward_tape<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let levels = self.bottom_up(tape, p, x)?;
        let pmaps = self.top_down(tape, p, &levels)?;
        self.classify(tape, p, &pmaps)
    }

    /// Inference with an explicit parameter set (same names and shapes as
    /// this model's), e.g. an `f64` copy.
    pub fn forward_with<T: Element>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = self.forward_tape(&mut tape, &p, x)?;
        Ok(tape.take_value(y))
    }

    /// Logits `(N, K, H, W)`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.params, input)
    }

    /// Per-pixel class probabilities `(N, K, H, W)`.
    pub fn predict_proba(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = self.forward_tape(&mut tape, &p, x)?;
        let s = tape.softmax_channels(y)?;
        Ok(tape.take_value(s))
    }

    /// Arg-max class per pixel, one mask per batch entry.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<IndexMask>> {
        Ok(argmax_channels(&self.forward(input)?))
    }
}

/// Per-pixel arg-max over channels; ties resolve to the lowest index.
pub fn argmax_channels<T: Element>(t: &Tensor<T>) -> Vec<IndexMask> {
    let s = t.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let base = n * s.sample();
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0usize;
                    for c in 1..s.c {
                        if t.data()[base + c * plane + p] > t.data()[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            IndexMask::new(s.h, s.w, data).expect("mask dims")
        })
        .collect()
}


/// Finite-difference check of the full network's cross-entropy gradient
/// with respect to the input and every parameter, in `f64`, on one random
/// `input_size × input_size` sample.
pub fn gradcheck_model(config: &EfpnConfig, seed: u64, epsilon: f64, tolerance: f64) -> Result<crate::tensor::GradCheckReport> {
    use rand::Rng;

    let model = EfpnModel::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = config.input_size;
    let x = Tensor::<f64>::uniform(Shape::new(1, config.input_channels, s, s), 0.0, 1.0, &mut rng);
    let target = IndexMask::from_fn(s, s, |_, _| rng.gen_range(0..config.num_classes) as u8);
    let mut inputs = vec![x];
    inputs.extend(model.params().cast::<f64>().iter().map(|p| p.tensor.clone()));
    crate::tensor::finite_diff_check(
        "efpn_forward_cross_entropy",
        &inputs,
        |tape, vars| {
            let logits = model.forward_tape(tape, &vars[1..], vars[0])?;
            tape.cross_entropy_loss(logits, std::slice::from_ref(&target), None)
        },
        epsilon,
        tolerance,
    )
}
