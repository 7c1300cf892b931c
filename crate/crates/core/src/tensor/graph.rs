use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    L2Norm {
        input: Var,
        scale: Var,
        norms: Vec<T>,
    },
    Relu {
        input: Var,
    },
    /// Scalar computed outside the tape together with its local gradients.
    Scalar {
        inputs: Vec<Var>,
        local: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Node order is a topological order, so the backward pass
/// is a reverse scan.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Upsample { input }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (_, h, w) = self.value(*first).chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for (i, &v) in inputs.iter().enumerate() {
            let (c, hi, wi) = self.value(v).chw()?;
            if (hi, wi) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat input {i} is {hi}x{wi}, expected {h}x{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(self.value(v).data());
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        let out = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Channels `start..start + len` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let data = self.value(input).data()[start * hw..(start + len) * hw].to_vec();
        let rg = self.needs(input);
        let out = Tensor::new(vec![len, h, w], data)?;
        Ok(self.push(out, Op::Slice { input, start }, rg))
    }

    pub fn l2norm_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (out, norms) = kernels::l2norm_forward(self.value(input), self.value(scale))?;
        let rg = self.needs(input) || self.needs(scale);
        Ok(self.push(
            out,
            Op::L2Norm {
                input,
                scale,
                norms,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.needs(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Hash of every piecewise-linear branch taken on this tape: the sign of
    /// each ReLU input and each max-pool winner. Two evaluations with equal
    /// signatures lie on the same linear piece of the network.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.value(*input).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Records a scalar whose value and gradients with respect to `inputs`
    /// were computed by the caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, local: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::Contract(format!(
                "{} inputs but {} local gradients",
                inputs.len(),
                local.len()
            )));
        }
        for (i, (&v, lg)) in inputs.iter().zip(&local).enumerate() {
            if lg.dims() != self.value(v).dims() {
                return Err(Error::Shape(format!(
                    "local gradient {i} has dims {:?}, input has {:?}",
                    lg.dims(),
                    self.value(v).dims()
                )));
            }
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// `sum_i weights_i * x_i`, a convenient scalar probe for gradient tests.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.dims() != weights.dims() {
            return Err(Error::Shape(format!(
                "weights {:?} vs input {:?}",
                weights.dims(),
                x.dims()
            )));
        }
        let value = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.scalar_fn(&[input], value, vec![weights.clone()])
    }

    /// Reverse pass from a single-element `loss`. Gradients are accumulated
    /// into every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.dims().to_vec(), g).expect("same shape")))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a = *a + c),
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *pad,
                    g,
                    self.needs(*input),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                kernels::maxpool2x2_backward(argmax, g, &mut dx);
                self.accumulate(grads, *input, dx);
            }
            Op::Upsample { input } => {
                let x = self.value(*input);
                let mut dx = vec![T::zero(); x.len()];
                kernels::upsample2x_backward(x.chw()?, g, &mut dx);
                self.accumulate(grads, *input, dx);
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).len();
                    self.accumulate(grads, v, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                let x = self.value(*input);
                let (_, h, w) = x.chw()?;
                let mut dx = vec![T::zero(); x.len()];
                let off = start * h * w;
                dx[off..off + g.len()].copy_from_slice(g);
                self.accumulate(grads, *input, dx);
            }
            Op::L2Norm {
                input,
                scale,
                norms,
            } => {
                let (dx, ds) =
                    kernels::l2norm_backward(self.value(*input), self.value(*scale), norms, g);
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *scale, ds);
            }
            Op::Relu { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Scalar { inputs, local } => {
                let up = g[0];
                for (&v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, v, lg.data().iter().map(|&l| l * up).collect());
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient reaching `v`, or `None` when `v` does not influence the loss
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
