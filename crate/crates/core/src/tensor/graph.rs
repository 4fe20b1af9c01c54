use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How per-example cross-entropy terms are combined into the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Summed loss; the gradient for each example is independent of batch size.
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    AvgPool2d {
        input: Var,
        size: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Flatten {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Normalize {
        input: Var,
        std: Vec<f32>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in evaluation
/// order, so every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf tensor after backward, with `grad` populated when it requires one.
    pub fn tensor(&self, var: Var) -> &Tensor {
        self.value(var)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::resolve(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let data = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(
            vec![geometry.batch, geometry.out_channels, geometry.out_h(), geometry.out_w()],
            data,
        )?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            needs,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, c1, h, w] = self.value(a).dims4("concat_channels")?;
        let [n2, c2, h2, w2] = self.value(b).dims4("concat_channels")?;
        for (axis, expected, found) in [("batch", n, n2), ("height", h, h2), ("width", w, w2)] {
            if expected != found {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    axis,
                    expected,
                    found,
                });
            }
        }
        let data = kernels::concat_channels_forward(n, c1, c2, h * w, self.value(a).data(), self.value(b).data());
        let out = Tensor::new(vec![n, c1 + c2, h, w], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn avgpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let dims = self.value(input).dims4("avgpool2d")?;
        let [n, c, h, w] = dims;
        if size == 0 || h < size || w < size {
            return Err(Error::Dimension {
                op: "avgpool2d",
                axis: "spatial",
                expected: size,
                found: h.min(w),
            });
        }
        let data = kernels::avgpool2d_forward(dims, size, self.value(input).data());
        let out = Tensor::new(vec![n, c, h / size, w / size], data)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::AvgPool2d { input, size }, needs))
    }

    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("global_avgpool")?;
        let data = kernels::global_avgpool_forward(dims, self.value(input).data());
        let out = Tensor::new(vec![dims[0], dims[1]], data)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, needs))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest = x.numel() / n;
        let out = Tensor::new(vec![n, rest], x.data().to_vec()).expect("flatten preserves length");
        let needs = self.needs(input);
        self.push(out, Op::Flatten { input }, needs)
    }

    /// `x: [N, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, fan_in] = self.value(input).dims2("linear")?;
        let [fan_out, w_in] = self.value(weight).dims2("linear")?;
        if w_in != fan_in {
            return Err(Error::Dimension {
                op: "linear",
                axis: "in_features",
                expected: fan_in,
                found: w_in,
            });
        }
        if self.value(bias).numel() != fan_out {
            return Err(Error::Dimension {
                op: "linear",
                axis: "bias",
                expected: fan_out,
                found: self.value(bias).numel(),
            });
        }
        let data = kernels::linear_forward(
            n,
            fan_in,
            fan_out,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(vec![n, fan_out], data)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, needs))
    }

    /// Per-channel `(x - mean[c]) / std[c]` on `[N, C, H, W]`.
    pub fn normalize(&mut self, input: Var, mean: &[f32], std: &[f32]) -> Result<Var> {
        let [_, c, h, w] = self.value(input).dims4("normalize")?;
        if mean.len() != c || std.len() != c {
            return Err(Error::Dimension {
                op: "normalize",
                axis: "channel",
                expected: c,
                found: mean.len(),
            });
        }
        let hw = h * w;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - mean[ch]) / std[ch]
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(input);
        Ok(self.push(
            out,
            Op::Normalize {
                input,
                std: std.to_vec(),
            },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                axis: "shape",
                expected: self.value(a).numel(),
                found: self.value(b).numel(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f32 = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs)
    }

    /// Softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                axis: "batch",
                expected: n,
                found: labels.len(),
            });
        }
        kernels::check_labels(k, labels)?;
        let x = self.value(logits).data();
        let losses = kernels::cross_entropy_rows(k, x, labels);
        let probs = kernels::softmax_rows(n, k, x);
        let total: f32 = losses.iter().sum();
        let loss = match reduction {
            Reduction::Mean => total / n as f32,
            Reduction::Sum => total,
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            needs,
        ))
    }

    /// Reverse sweep from the scalar `loss`. Every leaf that requires a
    /// gradient receives one (all zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (target, g) in self.local_grads(idx, &upstream) {
                if !self.needs(target) {
                    continue;
                }
                match grads[target.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[target.0] = Some(g),
                }
            }
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[idx].get_or_insert_with(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g.clone());
            } else if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `idx` for each input that needs one.
    fn local_grads(&self, idx: usize, upstream: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let want = [self.needs(*input), self.needs(*kernel), self.needs(*bias)];
                let g = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    upstream,
                    want,
                );
                [(*input, g.input), (*kernel, g.kernel), (*bias, g.bias)]
                    .into_iter()
                    .filter_map(|(v, g)| g.map(|g| (v, g)))
                    .collect()
            }
            Op::ConcatChannels { a, b } => {
                let [n, c1, h, w] = self.value(*a).dims4("concat_channels").expect("checked");
                let c2 = self.value(*b).shape()[1];
                let (ga, gb) = kernels::concat_channels_backward(n, c1, c2, h * w, upstream);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu { input } => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(upstream)
                    .map(|(&y, &u)| if y > 0.0 { u } else { 0.0 })
                    .collect();
                vec![(*input, g)]
            }
            Op::AvgPool2d { input, size } => {
                let dims = self.value(*input).dims4("avgpool2d").expect("checked");
                vec![(*input, kernels::avgpool2d_backward(dims, *size, upstream))]
            }
            Op::GlobalAvgPool { input } => {
                let dims = self.value(*input).dims4("global_avgpool").expect("checked");
                vec![(*input, kernels::global_avgpool_backward(dims, upstream))]
            }
            Op::Flatten { input } => vec![(*input, upstream.to_vec())],
            Op::Linear { input, weight, bias } => {
                let [n, fan_in] = self.value(*input).dims2("linear").expect("checked");
                let fan_out = self.value(*bias).numel();
                let want = [self.needs(*input), self.needs(*weight), self.needs(*bias)];
                let g = kernels::linear_backward(
                    n,
                    fan_in,
                    fan_out,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    upstream,
                    want,
                );
                [(*input, g.input), (*weight, g.weight), (*bias, g.bias)]
                    .into_iter()
                    .filter_map(|(v, g)| g.map(|g| (v, g)))
                    .collect()
            }
            Op::Normalize { input, std, .. } => {
                let [_, c, h, w] = self.value(*input).dims4("normalize").expect("checked");
                let hw = h * w;
                let g = upstream
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| u / std[(i / hw) % c])
                    .collect();
                vec![(*input, g)]
            }
            Op::Add { a, b } => vec![(*a, upstream.to_vec()), (*b, upstream.to_vec())],
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = upstream.iter().zip(vb).map(|(u, y)| u * y).collect();
                let gb = upstream.iter().zip(va).map(|(u, x)| u * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum { input } => {
                vec![(*input, vec![upstream[0]; self.value(*input).numel()])]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = match reduction {
                    Reduction::Mean => upstream[0] / labels.len() as f32,
                    Reduction::Sum => upstream[0],
                };
                let mut g = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * k + y] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, g)]
            }
        }
    }
}
