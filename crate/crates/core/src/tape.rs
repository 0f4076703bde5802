//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Each recorded operation appends a node; [`Tape::backward`] walks the nodes
//! in reverse recording order and accumulates gradients into every node that
//! depends on a leaf created with `requires_grad`. The tape is consumed by the
//! backward pass, so one tape serves exactly one training step.

use crate::error::{Error, Result};
use crate::ops::{
    self, batch_norm_backward, batch_norm_train, bias_grad, conv2d_backward_cached, conv2d_forward,
    linear_backward, linear_forward, ChannelStats, ConvCache, MacCounter, NormCache, RowMask,
};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait BackwardRule {
    /// Returns one entry per recorded input, `None` where no gradient flows.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        mask: Option<RowMask>,
        layer: Option<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        cache: ConvCache,
        mask: Option<RowMask>,
        layer: Option<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    BatchNormFixed {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: ChannelStats,
        eps: f32,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: MacCounter,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut self.macs)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Fully connected layer. `mask` selects the weight rows whose gradients
    /// are computed in the backward pass.
    pub fn linear(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        mask: Option<RowMask>,
        layer: Option<usize>,
    ) -> Result<Var> {
        let nodes = &self.nodes;
        let out = linear_forward(
            &nodes[x.0].value,
            &nodes[w.0].value,
            bias.map(|b| &nodes[b.0].value),
            &mut self.macs,
            layer,
        )?;
        let rg = self.any_grad(&[x, w]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                bias,
                mask,
                layer,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mask: Option<RowMask>,
        layer: Option<usize>,
    ) -> Result<Var> {
        let nodes = &self.nodes;
        let (out, cache) = conv2d_forward(
            &nodes[x.0].value,
            &nodes[w.0].value,
            bias.map(|b| &nodes[b.0].value),
            stride,
            padding,
            &mut self.macs,
            layer,
        )?;
        let rg = self.any_grad(&[x, w]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                cache,
                mask,
                layer,
            },
            rg,
        ))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(false)
        } else if self.value(b).is_scalar() {
            Ok(true)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum; `b` may also be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let scalar = self.binary_shapes("add", a, b)?;
        let out = elementwise(self.value(a), self.value(b), scalar, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may also be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let scalar = self.binary_shapes("mul", a, b)?;
        let out = elementwise(self.value(a), self.value(b), scalar, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.shape()[0], t.row_len()];
        self.reshape(x, &shape)
    }

    /// Non-overlapping `size×size` max pooling over `[N×C×H×W]`. The first
    /// maximum in row-major window order wins ties.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || size == 0 || t.shape()[2] < size || t.shape()[3] < size {
            return Err(Error::Shape(format!(
                "max_pool2d({size}) needs [N, C, H, W] with H, W >= {size}, got {:?}",
                t.shape()
            )));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (ho, wo) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if t.data()[idx] > t.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(t.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean softmax cross-entropy of `[N×C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy expects [N, C] logits for {} labels, got {:?}",
                labels.len(),
                t.shape()
            )));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0f64;
        for (row, &label) in t.rows().zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f32 = exps.iter().sum();
            loss += (z.ln() - (row[label] - max)) as f64;
            probs.extend(exps.iter().map(|e| e / z));
        }
        let out = Tensor::scalar((loss / labels.len() as f64) as f32);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Batch-statistic normalization over axis 1 with learnable scale and shift.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, ChannelStats)> {
        let (out, stats, cache) = batch_norm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Normalization with externally supplied statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &ChannelStats,
        eps: f32,
    ) -> Result<Var> {
        let out = ops::batch_norm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                stats: stats.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Back-propagates from a single-element `loss`, consuming the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, after) = grads.split_at_mut(i);
            let Some(g) = after[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor| -> Result<()> {
                if !nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut before[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            let value = |v: Var| &nodes[v.0].value;

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(g, value(*a), value(*b), &mut self.macs)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Linear {
                    x,
                    w,
                    bias,
                    mask,
                    layer,
                } => {
                    let frozen;
                    let mask = if nodes[w.0].requires_grad {
                        mask.as_ref()
                    } else {
                        frozen = RowMask::none(layer.unwrap_or(0), value(*w).shape()[0]);
                        Some(&frozen)
                    };
                    let (dx, dw) = linear_backward(g, value(*x), value(*w), mask, &mut self.macs, *layer)?;
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    if let Some(b) = bias {
                        acc(*b, bias_grad(g))?;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    cache,
                    mask,
                    layer,
                } => {
                    let frozen;
                    let mask = if nodes[w.0].requires_grad {
                        mask.as_ref()
                    } else {
                        frozen = RowMask::none(layer.unwrap_or(0), value(*w).shape()[0]);
                        Some(&frozen)
                    };
                    let (dx, dw) = conv2d_backward_cached(g, cache, value(*w), mask, &mut self.macs, *layer)?;
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    if let Some(b) = bias {
                        acc(*b, bias_grad(g))?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, reduce_like(g.clone(), value(*b)))?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    let scalar = vb.is_scalar() && va.shape() != vb.shape();
                    acc(*a, elementwise(g, vb, scalar, |g, b| g * b))?;
                    let gb = elementwise(g, va, false, |g, a| g * a);
                    acc(*b, reduce_like(gb, vb))?;
                }
                Op::Relu(x) => {
                    let dx = elementwise(g, value(*x), false, |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(*x, dx)?;
                }
                Op::Sum(x) => {
                    acc(*x, Tensor::full(value(*x).shape(), g.data()[0]))?;
                }
                Op::Reshape(x) => {
                    acc(*x, g.reshape(value(*x).shape())?)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = value(*x).zeros_like();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src] += gv;
                    }
                    acc(*x, dx)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f32;
                    let classes = value(*logits).shape()[1];
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    acc(*logits, Tensor::new(value(*logits).shape().to_vec(), d)?)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(g, cache, value(*gamma).data())?;
                    acc(*x, dx)?;
                    acc(*gamma, Tensor::new(value(*gamma).shape().to_vec(), dgamma)?)?;
                    acc(*beta, Tensor::new(value(*beta).shape().to_vec(), dbeta)?)?;
                }
                Op::BatchNormFixed {
                    x,
                    gamma,
                    beta,
                    stats,
                    eps,
                } => {
                    let vx = value(*x);
                    let c = vx.shape()[1];
                    let inner: usize = vx.shape()[2..].iter().product();
                    let gam = value(*gamma).data();
                    let inv: Vec<f32> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut dx = vx.zeros_like();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (i, (&gv, &xv)) in g.data().iter().zip(vx.data()).enumerate() {
                        let ch = (i / inner) % c;
                        dx.data_mut()[i] = gv * gam[ch] * inv[ch];
                        dgamma[ch] += gv * (xv - stats.mean[ch]) * inv[ch];
                        dbeta[ch] += gv;
                    }
                    acc(*x, dx)?;
                    acc(*gamma, Tensor::new(value(*gamma).shape().to_vec(), dgamma)?)?;
                    acc(*beta, Tensor::new(value(*beta).shape().to_vec(), dbeta)?)?;
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| value(v)).collect();
                    let grads = rule.backward(g, &vals, &node.value)?;
                    if grads.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom backward returned {} gradients for {} inputs",
                            grads.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, d) in inputs.iter().zip(grads) {
                        if let Some(d) = d {
                            acc(v, d)?;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            macs: self.macs,
        })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, b_scalar: bool, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = if b_scalar {
        let s = b.data()[0];
        a.data().iter().map(|&x| f(x, s)).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn reduce_like(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

/// Result of a backward pass: per-node gradients and the step's MAC counts.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    macs: MacCounter,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [1.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap();
        let wv = Tensor::new(vec![3], vec![0.5, -1.0, 4.0]).unwrap();
        let x = tape.param(xv.clone());
        let w = tape.param(wv.clone());
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), wv.data());
        assert_eq!(grads.get(w).unwrap().data(), xv.data());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn relu_propagates_nan() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![f32::NAN]).unwrap());
        let y = tape.relu(x);
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), [0.0, 2.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 10] {
            let mut tape = Tape::new();
            let logits = tape.param(Tensor::full(&[1, c], 0.7));
            let loss = tape.cross_entropy(logits, &[c - 1]).unwrap();
            assert!((tape.value(loss).data()[0] - (c as f32).ln()).abs() < 1e-6);
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(logits).unwrap().data();
            let want = 1.0 / c as f32;
            for (i, &v) in g.iter().enumerate() {
                let expect = if i == c - 1 { want - 1.0 } else { want };
                assert!((v - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, -1.0, 0.0, 2.0, 3.0, -2.0, -3.0]).unwrap());
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), [5.0, 0.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    struct Double;

    impl BackwardRule for Double {
        fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
            Ok(vec![Some(g.map(|v| 2.0 * v))])
        }
    }

    #[test]
    fn custom_rule_is_used() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let out = tape.value(x).map(|v| 2.0 * v);
        let y = tape.custom(&[x], out, Box::new(Double));
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let x = tape.param(Tensor::full(&[2], 1.0));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), [3.0, 3.0]);
    }

    struct Mlp {
        x: Tensor,
        labels: Vec<usize>,
        params: Vec<Tensor>,
    }

    impl Mlp {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [5usize, 7, 6, 3];
            let mut params = Vec::new();
            for w in sizes.windows(2) {
                params.push(random(&[w[1], w[0]], &mut rng));
                params.push(random(&[w[1]], &mut rng));
            }
            Self {
                x: random(&[4, 5], &mut rng),
                labels: vec![0, 2, 1, 2],
                params,
            }
        }

        fn tape_grads(&self) -> Vec<Tensor> {
            let mut tape = Tape::new();
            let mut h = tape.constant(self.x.clone());
            let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
            for l in 0..3 {
                h = tape
                    .linear(h, vars[2 * l], Some(vars[2 * l + 1]), None, Some(l))
                    .unwrap();
                if l < 2 {
                    h = tape.relu(h);
                }
            }
            let loss = tape.cross_entropy(h, &self.labels).unwrap();
            let mut grads = tape.backward(loss).unwrap();
            vars.iter().map(|&v| grads.take(v).unwrap()).collect()
        }

        /// Loss recomputed in f64 from scratch.
        fn loss64(&self, params: &[Vec<f64>]) -> f64 {
            let sizes = [5usize, 7, 6, 3];
            let mut total = 0.0;
            for (s, &label) in self.labels.iter().enumerate() {
                let mut h: Vec<f64> = self.x.data()[s * 5..(s + 1) * 5]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                for l in 0..3 {
                    let (w, b) = (&params[2 * l], &params[2 * l + 1]);
                    let (ci, co) = (sizes[l], sizes[l + 1]);
                    h = (0..co)
                        .map(|o| {
                            let v = b[o] + (0..ci).map(|c| w[o * ci + c] * h[c]).sum::<f64>();
                            if l < 2 {
                                v.max(0.0)
                            } else {
                                v
                            }
                        })
                        .collect();
                }
                let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = h.iter().map(|v| (v - max).exp()).sum();
                total += z.ln() + max - h[label];
            }
            total / self.labels.len() as f64
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mlp = Mlp::new(21);
        let grads = mlp.tape_grads();
        let base: Vec<Vec<f64>> = mlp
            .params
            .iter()
            .map(|p| p.data().iter().map(|&v| v as f64).collect())
            .collect();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.numel() {
                let mut plus = base.clone();
                plus[pi][i] += h;
                let mut minus = base.clone();
                minus[pi][i] -= h;
                let fd = (mlp.loss64(&plus) - mlp.loss64(&minus)) / (2.0 * h);
                let a = g.data()[i] as f64;
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-6,
                    "param {pi}[{i}]: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mlp = Mlp::new(22);
        let a = mlp.tape_grads();
        let b = mlp.tape_grads();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn all_rows_mask_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let run = |mask: Option<RowMask>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1, mask, Some(0)).unwrap();
            let y = tape.relu(y);
            let loss = tape.sum(y);
            let grads = tape.backward(loss).unwrap();
            (grads.get(wv).unwrap().clone(), grads.macs().clone())
        };
        let (dense, dense_macs) = run(None);
        let (masked, masked_macs) = run(Some(RowMask::all(0, 4)));
        assert!(dense.bit_eq(&masked));
        assert_eq!(dense_macs, masked_macs);
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random(&[3, 2, 2, 2], &mut rng);
        let gamma = Tensor::new(vec![2], vec![1.3, -0.7]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.2, 0.1]).unwrap();
        let r = random(&[3, 2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let gv = tape.param(gamma.clone());
        let bv = tape.param(beta.clone());
        let rv = tape.constant(r.clone());
        let (y, _) = tape.batch_norm(xv, gv, bv, 1e-5).unwrap();
        let p = tape.mul(y, rv).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();

        let loss64 = |x: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let mut total = 0.0;
            for c in 0..2 {
                let idx: Vec<usize> = (0..3)
                    .flat_map(|n| (0..4).map(move |i| (n * 2 + c) * 4 + i))
                    .collect();
                let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / 12.0;
                let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / 12.0;
                for &i in &idx {
                    total += r.data()[i] as f64 * (g[c] * (x[i] - mean) / (var + 1e-5).sqrt() + b[c]);
                }
            }
            total
        };
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (x0, g0, b0) = (to64(&x), to64(&gamma), to64(&beta));
        let h = 1e-5;
        let fd = |which: usize, i: usize| {
            let mut p = [x0.clone(), g0.clone(), b0.clone()];
            let mut m = p.clone();
            p[which][i] += h;
            m[which][i] -= h;
            (loss64(&p[0], &p[1], &p[2]) - loss64(&m[0], &m[1], &m[2])) / (2.0 * h)
        };
        for (which, v) in [(0, xv), (1, gv), (2, bv)] {
            let g = grads.get(v).unwrap();
            for i in 0..g.numel() {
                let (a, f) = (g.data()[i] as f64, fd(which, i));
                assert!(
                    (a - f).abs() <= 1e-3 * a.abs().max(f.abs()) + 1e-4,
                    "{which}[{i}]: {a} vs {f}"
                );
            }
        }
    }
}
