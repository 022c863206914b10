use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tape, Tensor, Var};

use super::cost::{conv_flops, depthwise_flops, pointwise_flops, Cost};
use super::{bias_shape, he_uniform, ParamId, ParamStore};

/// 1×1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            he_uniform(Shape::new(out_channels, in_channels, 1, 1), in_channels, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(bias_shape(out_channels)))?;
        Ok(Pointwise {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.pointwise_conv(x, self.weight.var(p), self.bias.var(p))
    }

    pub fn param_count(&self) -> u64 {
        (self.in_channels * self.out_channels + self.out_channels) as u64
    }
}

/// Bias-free per-channel `k × k` convolution.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub channels: usize,
    pub kernel: usize,
    weight: ParamId,
}

impl Depthwise {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            he_uniform(Shape::new(channels, 1, kernel, kernel), kernel * kernel, rng),
        )?;
        Ok(Depthwise {
            channels,
            kernel,
            weight,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    /// Same-padded, stride 1.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, self.weight.var(p), 1, (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwSepConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DwSepConvSpec {
    /// Stride 1 with `(kernel - 1) / 2` padding, so spatial size is kept.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        DwSepConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

impl Cost for DwSepConvSpec {
    fn param_count(&self) -> u64 {
        let k2 = self.kernel * self.kernel;
        (k2 * self.in_channels + self.in_channels * self.out_channels + self.out_channels) as u64
    }

    /// Depthwise plus pointwise multiply-accumulates; the trailing ReLU is
    /// charged by whichever block owns the layer.
    fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        depthwise_flops(self.kernel, self.in_channels, ho, wo)
            + pointwise_flops(self.in_channels, self.out_channels, ho, wo)
    }
}

/// Depth-wise separable convolution: depthwise `k × k`, pointwise 1×1 with
/// bias, then ReLU.
#[derive(Clone, Debug)]
pub struct DwSepConv {
    pub spec: DwSepConvSpec,
    depthwise: ParamId,
    pointwise: Pointwise,
}

impl DwSepConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: DwSepConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) || spec.stride == 0 {
            return Err(Error::config(format!(
                "{prefix}: separable conv needs an odd kernel and positive stride, got {spec:?}"
            )));
        }
        let k = spec.kernel;
        let depthwise = store.add(
            format!("{prefix}.depthwise.weight"),
            he_uniform(Shape::new(spec.in_channels, 1, k, k), k * k, rng),
        )?;
        let pointwise = Pointwise::new(
            store,
            &format!("{prefix}.pointwise"),
            spec.in_channels,
            spec.out_channels,
            rng,
        )?;
        Ok(DwSepConv {
            spec,
            depthwise,
            pointwise,
        })
    }

    pub fn depthwise_weight(&self) -> ParamId {
        self.depthwise
    }

    pub fn pointwise(&self) -> &Pointwise {
        &self.pointwise
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let d = tape.depthwise_conv2d(x, self.depthwise.var(p), self.spec.stride, self.spec.padding)?;
        let y = self.pointwise.forward(tape, p, d)?;
        tape.relu(y)
    }
}

/// Full (non-separable) convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Cost for ConvSpec {
    fn param_count(&self) -> u64 {
        (self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels) as u64
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let f = |s: usize| (s + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        conv_flops(self.kernel, self.in_channels, self.out_channels, f(h), f(w))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        let k = spec.kernel;
        let weight = store.add(
            format!("{prefix}.weight"),
            he_uniform(Shape::new(spec.out_channels, spec.in_channels, k, k), spec.in_channels * k * k, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(bias_shape(spec.out_channels)))?;
        Ok(Conv { spec, weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight.var(p), Some(self.bias.var(p)), self.spec.stride, self.spec.padding)
    }
}

fn check_widths(what: &str, in_channels: usize, out_channels: usize, widths: &[usize; 4]) -> Result<()> {
    if in_channels == 0 {
        return Err(Error::config(format!("{what}: in_channels must be positive")));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(Error::config(format!("{what}: branch {i} has width 0")));
    }
    let total: usize = widths.iter().sum();
    if total != out_channels {
        return Err(Error::config(format!(
            "{what}: branch widths {widths:?} sum to {total}, expected out_channels {out_channels}"
        )));
    }
    Ok(())
}

/// Four parallel branches (1×1; 3×3 separable; 5×5 separable; 3×3 max-pool
/// then 1×1) concatenated to `out_channels`, followed by
/// `extra_depthwise_layers` depthwise 3×3 spatial detection layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_widths: [usize; 4],
    pub extra_depthwise_layers: usize,
}

impl MultiScaleBlockSpec {
    /// Equal quarters, two spatial detection layers.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        let q = out_channels / 4;
        MultiScaleBlockSpec {
            in_channels,
            out_channels,
            branch_widths: [q, q, q, out_channels - 3 * q],
            extra_depthwise_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("multi-scale block", self.in_channels, self.out_channels, &self.branch_widths)
    }

    fn branch_specs(&self) -> (DwSepConvSpec, DwSepConvSpec) {
        let [_, w3, w5, _] = self.branch_widths;
        (
            DwSepConvSpec::same(self.in_channels, w3, 3),
            DwSepConvSpec::same(self.in_channels, w5, 5),
        )
    }
}

impl Cost for MultiScaleBlockSpec {
    fn param_count(&self) -> u64 {
        let [w1, _, _, w4] = self.branch_widths;
        let cin = self.in_channels;
        let (s3, s5) = self.branch_specs();
        let pw = |w: usize| (cin * w + w) as u64;
        pw(w1) + s3.param_count() + s5.param_count() + pw(w4)
            + (self.extra_depthwise_layers * 9 * self.out_channels) as u64
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let [w1, _, _, w4] = self.branch_widths;
        let cin = self.in_channels;
        let hw = (h * w) as u64;
        let (s3, s5) = self.branch_specs();
        let convs = pointwise_flops(cin, w1, h, w)
            + s3.flops(h, w)
            + s5.flops(h, w)
            + pointwise_flops(cin, w4, h, w);
        let pool = cin as u64 * hw;
        let relus = self.out_channels as u64 * hw;
        let extra = self.extra_depthwise_layers as u64
            * (depthwise_flops(3, self.out_channels, h, w) + self.out_channels as u64 * hw);
        convs + pool + relus + extra
    }
}

#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    pub spec: MultiScaleBlockSpec,
    branch1: Pointwise,
    branch3: DwSepConv,
    branch5: DwSepConv,
    branch_pool: Pointwise,
    extra: Vec<Depthwise>,
}

impl MultiScaleBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MultiScaleBlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let [w1, _, _, w4] = spec.branch_widths;
        let (s3, s5) = spec.branch_specs();
        let branch1 = Pointwise::new(store, &format!("{prefix}.b1"), spec.in_channels, w1, rng)?;
        let branch3 = DwSepConv::new(store, &format!("{prefix}.b2"), s3, rng)?;
        let branch5 = DwSepConv::new(store, &format!("{prefix}.b3"), s5, rng)?;
        let branch_pool = Pointwise::new(store, &format!("{prefix}.b4"), spec.in_channels, w4, rng)?;
        let extra = (0..spec.extra_depthwise_layers)
            .map(|i| Depthwise::new(store, &format!("{prefix}.spatial{i}"), spec.out_channels, 3, rng))
            .collect::<Result<_>>()?;
        Ok(MultiScaleBlock {
            spec,
            branch1,
            branch3,
            branch5,
            branch_pool,
            extra,
        })
    }

    /// Evaluates the four branches in `order` (a permutation of `0..4`);
    /// the concatenation layout is fixed regardless of evaluation order.
    pub fn forward_ordered<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        order: [usize; 4],
    ) -> Result<Var> {
        let in_c = tape.shape(x).c;
        if in_c != self.spec.in_channels {
            return Err(Error::config(format!(
                "multi-scale block expects {} input channels, got {in_c}",
                self.spec.in_channels
            )));
        }
        let mut outs: [Option<Var>; 4] = [None; 4];
        for &b in &order {
            let y = match b {
                0 => {
                    let y = self.branch1.forward(tape, p, x)?;
                    tape.relu(y)?
                }
                1 => self.branch3.forward(tape, p, x)?,
                2 => self.branch5.forward(tape, p, x)?,
                3 => {
                    let pooled = tape.maxpool2d(x, 3, 1, 1)?;
                    let y = self.branch_pool.forward(tape, p, pooled)?;
                    tape.relu(y)?
                }
                _ => return Err(Error::usage(format!("branch index {b} out of range"))),
            };
            outs[b] = Some(y);
        }
        let parts: Vec<Var> = outs
            .iter()
            .map(|o| o.ok_or_else(|| Error::usage("branch order is not a permutation")))
            .collect::<Result<_>>()?;
        let mut y = tape.concat_channels(&parts)?;
        for layer in &self.extra {
            let d = layer.forward(tape, p, y)?;
            y = tape.relu(d)?;
        }
        Ok(y)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.forward_ordered(tape, p, x, [0, 1, 2, 3])
    }
}

/// Reference Inception block with full 3×3 and 5×5 convolutions, used as the
/// cost baseline for the multi-scale block. Adds the input back when the
/// channel counts match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionRefSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_widths: [usize; 4],
}

impl InceptionRefSpec {
    pub fn matching(block: &MultiScaleBlockSpec) -> Self {
        InceptionRefSpec {
            in_channels: block.in_channels,
            out_channels: block.out_channels,
            branch_widths: block.branch_widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("inception block", self.in_channels, self.out_channels, &self.branch_widths)
    }

    pub fn has_residual(&self) -> bool {
        self.in_channels == self.out_channels
    }

    fn conv_specs(&self) -> (ConvSpec, ConvSpec) {
        let [_, w3, w5, _] = self.branch_widths;
        let spec = |k: usize, out: usize| ConvSpec {
            in_channels: self.in_channels,
            out_channels: out,
            kernel: k,
            stride: 1,
            padding: (k - 1) / 2,
        };
        (spec(3, w3), spec(5, w5))
    }
}

impl Cost for InceptionRefSpec {
    fn param_count(&self) -> u64 {
        let [w1, _, _, w4] = self.branch_widths;
        let cin = self.in_channels;
        let (c3, c5) = self.conv_specs();
        (cin * w1 + w1) as u64 + c3.param_count() + c5.param_count() + (cin * w4 + w4) as u64
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let [w1, _, _, w4] = self.branch_widths;
        let cin = self.in_channels;
        let hw = (h * w) as u64;
        let (c3, c5) = self.conv_specs();
        let convs = pointwise_flops(cin, w1, h, w) + c3.flops(h, w) + c5.flops(h, w) + pointwise_flops(cin, w4, h, w);
        let pool = cin as u64 * hw;
        let relus = self.out_channels as u64 * hw;
        let residual = if self.has_residual() { self.out_channels as u64 * hw } else { 0 };
        convs + pool + relus + residual
    }
}

#[derive(Clone, Debug)]
pub struct InceptionRef {
    pub spec: InceptionRefSpec,
    branch1: Pointwise,
    branch3: Conv,
    branch5: Conv,
    branch_pool: Pointwise,
}

impl InceptionRef {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: InceptionRefSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let [w1, _, _, w4] = spec.branch_widths;
        let (c3, c5) = spec.conv_specs();
        Ok(InceptionRef {
            spec,
            branch1: Pointwise::new(store, &format!("{prefix}.b1"), spec.in_channels, w1, rng)?,
            branch3: Conv::new(store, &format!("{prefix}.b2"), c3, rng)?,
            branch5: Conv::new(store, &format!("{prefix}.b3"), c5, rng)?,
            branch_pool: Pointwise::new(store, &format!("{prefix}.b4"), spec.in_channels, w4, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y1 = self.branch1.forward(tape, p, x)?;
        let y1 = tape.relu(y1)?;
        let y3 = self.branch3.forward(tape, p, x)?;
        let y3 = tape.relu(y3)?;
        let y5 = self.branch5.forward(tape, p, x)?;
        let y5 = tape.relu(y5)?;
        let pooled = tape.maxpool2d(x, 3, 1, 1)?;
        let y4 = self.branch_pool.forward(tape, p, pooled)?;
        let y4 = tape.relu(y4)?;
        let y = tape.concat_channels(&[y1, y3, y5, y4])?;
        if self.spec.has_residual() {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }
}
