use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mask::IndexMask;

use super::kernels::{self, CrossEntropyCache};
use super::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        cache: CrossEntropyCache,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    param: Option<usize>,
}

/// Records a forward computation so gradients can be propagated back from a
/// scalar. A tape built with [`Tape::inference`] keeps values only and
/// refuses `backward`.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Moves a value out of the tape, leaving an empty placeholder.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        let placeholder = Tensor::zeros(Shape::new(0, shape.c, shape.h, shape.w));
        std::mem::replace(&mut self.nodes[v.0].value, placeholder)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// A leaf tagged with a model parameter index, so its gradient can be
    /// looked up by that index after `backward`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Some(id))
    }

    fn push(&mut self, value: Tensor<T>, op: Op, param: Option<usize>) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor<T>, op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op, None))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.push_checked("conv2d", y, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::depthwise_forward(self.value(x), self.value(w), stride, pad)?;
        self.push_checked("depthwise_conv2d", y, Op::Depthwise { x, w, stride, pad })
    }

    /// 1×1 convolution with bias.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::config(format!(
                "pointwise_conv: weight shape {ws} is not (Cout, Cin, 1, 1)"
            )));
        }
        self.conv2d(x, w, Some(b), 1, 0)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool_forward(self.value(x), k, stride, pad)?;
        self.push_checked("maxpool2d", y, Op::MaxPool { x, argmax })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::upsample_forward(self.value(x), factor)?;
        self.push_checked("upsample_nearest", y, Op::Upsample { x, factor })
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_nearest(x, 2)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_forward(&values)?;
        self.push_checked(
            "concat_channels",
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let zero = T::zero();
        let y = self.value(x).map(|v| if v > zero { v } else { zero });
        self.push_checked("relu", y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::config(format!(
                "add: shapes {} and {} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let y = Tensor::new(va.shape(), data)?;
        self.push_checked("add", y, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).map(|v| T::narrow(v.widen() * factor));
        self.push_checked("scale", y, Op::Scale { x, factor })
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = kernels::sum_f64(&self.value(x).to_f64_vec());
        self.push_checked("sum", Tensor::scalar(T::narrow(total)), Op::Sum { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_forward(self.value(x))?;
        self.push_checked("softmax_channels", y, Op::Softmax { x })
    }

    /// Mean (optionally class-weighted) negative log-likelihood of `targets`
    /// under the per-pixel softmax of `logits`.
    pub fn cross_entropy_loss(
        &mut self,
        logits: Var,
        targets: &[IndexMask],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (loss, cache) = kernels::cross_entropy_forward(self.value(logits), targets, class_weights)?;
        self.push_checked(
            "cross_entropy_loss",
            Tensor::scalar(T::narrow(loss)),
            Op::CrossEntropy { logits, cache },
        )
    }

    /// Propagates `d loss / d v` to every leaf that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::usage("backward called on an inference tape"));
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {ls}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => leaf_grads[i] = Some(g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    accumulate(&mut grads, *x, cg.input);
                    accumulate(&mut grads, *w, cg.weight);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, cg.bias);
                    }
                }
                Op::Depthwise { x, w, stride, pad } => {
                    let (gx, gw) = kernels::depthwise_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool_backward(self.shape(*x), node.value.shape().plane(), argmax, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample { x, factor } => {
                    accumulate(&mut grads, *x, kernels::upsample_backward(self.shape(*x), *factor, &g));
                }
                Op::Concat { parts } => {
                    let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
                    for (p, gp) in parts.iter().zip(kernels::concat_backward(&shapes, &g)) {
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::Relu { x } => {
                    let zero = T::zero();
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > zero { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * factor).collect());
                }
                Op::Sum { x } => {
                    accumulate(&mut grads, *x, vec![g[0]; self.shape(*x).numel()]);
                }
                Op::Softmax { x } => {
                    accumulate(&mut grads, *x, kernels::softmax_backward(&node.value, &g));
                }
                Op::CrossEntropy { logits, cache } => {
                    let gx = kernels::cross_entropy_backward(self.shape(*logits), cache, g[0]);
                    accumulate(&mut grads, *logits, gx);
                }
            }
        }

        let mut params = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(id) = n.param {
                params.insert(id, Var(i));
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            leaves: leaf_grads,
            shapes,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`], kept in `f64`.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf as a tensor; zeros when unreachable.
    pub fn wrt_tensor(&self, v: Var) -> Tensor<f64> {
        let shape = self.shapes[v.0];
        match self.wrt(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient for the leaf registered with [`Tape::param`] under `id`.
    pub fn param(&self, id: usize) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}
