//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! leaves gradients for every node that requires one.

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, ConvGeometry, ConvShape, UpShape};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    UpTemporal {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: UpShape,
    },
    AvgPoolSpatial {
        input: Var,
        spatial: usize,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// Eval mode uses fixed statistics, so the input gradient is affine.
        frozen: bool,
    },
    Swish {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Interp {
        input: Var,
        t_in: usize,
        t_out: usize,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Reshape {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        dlogits: Vec<f64>,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
}

/// Result of a train-mode batch norm: the output plus the batch statistics
/// the caller folds into its running estimates.
pub struct BatchNormOutput {
    pub output: Var,
    pub stats: BatchStats,
}

#[derive(Default)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It is differentiated only if `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<R>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<R>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor<R>, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv3d {
                input, weight, bias, ..
            }
            | Op::UpTemporal {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, scale, shift, ..
            } => vec![*input, *scale, *shift],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::AvgPoolSpatial { input, .. }
            | Op::Swish { input }
            | Op::Interp { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// 3D convolution of `[N,C,T,H,W]` with `[K,C,kt,kh,kw]` weights.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        const OP: &str = "conv3d";
        let [n, c, t, h, w] = self.value(input).dims5(OP)?;
        let [k, wc, kt, kh, kw] = self.value(weight).dims5(OP)?;
        if wc != c {
            return Err(Error::contract(OP, format!("weight expects {wc} channels, input has {c}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::contract(OP, format!("bias shape {:?} for {k} filters", self.shape(b))));
            }
        }
        let output = geom.output_extents([t, h, w], [kt, kh, kw]).ok_or_else(|| {
            Error::contract(OP, format!("kernel {:?} does not fit input {:?} with {geom:?}", [kt, kh, kw], [t, h, w]))
        })?;
        let shape = ConvShape {
            n,
            c,
            input: [t, h, w],
            k,
            kernel: [kt, kh, kw],
            output,
            geom,
        };
        let out = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(shape.output_dims(), out)?;
        self.push_checked(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                shape,
            },
            OP,
        )
    }

    /// Transpose convolution with kernel and stride `(2,1,1)`; weight is
    /// `[C, K, 2, 1, 1]` and the output is `[N, K, 2T, H, W]`.
    pub fn transpose_conv3d_temporal(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "transpose_conv3d_temporal";
        let [n, c, t, h, w] = self.value(input).dims5(OP)?;
        let [wc, k, kt, kh, kw] = self.value(weight).dims5(OP)?;
        if wc != c || [kt, kh, kw] != [2, 1, 1] {
            return Err(Error::contract(
                OP,
                format!("weight {:?} incompatible with input channels {c}", self.shape(weight)),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::contract(OP, format!("bias shape {:?} for {k} outputs", self.shape(b))));
            }
        }
        let shape = UpShape {
            n,
            c,
            k,
            t,
            spatial: h * w,
        };
        let out = kernels::up_temporal_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(vec![n, k, 2 * t, h, w], out)?;
        self.push_checked(
            value,
            Op::UpTemporal {
                input,
                weight,
                bias,
                shape,
            },
            OP,
        )
    }

    /// Mean over the spatial plane: `[N,C,T,H,W] -> [N,C,T,1,1]`.
    pub fn global_avg_pool_spatial(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool_spatial";
        let [n, c, t, h, w] = self.value(input).dims5(OP)?;
        let out = kernels::avg_pool_forward(self.value(input).data(), n * c * t, h * w);
        let value = Tensor::new(vec![n, c, t, 1, 1], out)?;
        self.push_checked(value, Op::AvgPoolSpatial { input, spatial: h * w }, OP)
    }

    /// Batch norm over every axis but channels, using batch statistics.
    pub fn batch_norm_train(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<BatchNormOutput> {
        const OP: &str = "batch_norm";
        let (n, c, inner) = self.value(input).ncx(OP)?;
        self.check_channel_param(scale, c, OP)?;
        self.check_channel_param(shift, c, OP)?;
        let stats = kernels::channel_stats(self.value(input).data(), n, c, inner);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let output = self.batch_norm_with(input, scale, shift, stats.mean.clone(), inv_std, false)?;
        Ok(BatchNormOutput { output, stats })
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (_, c, _) = self.value(input).ncx(OP)?;
        self.check_channel_param(scale, c, OP)?;
        self.check_channel_param(shift, c, OP)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract(OP, "running statistics length differs from channel count"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_with(input, scale, shift, running_mean.to_vec(), inv_std, true)
    }

    fn batch_norm_with(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        frozen: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.value(input).ncx("batch_norm")?;
        let out = kernels::channel_affine(
            self.value(input).data(),
            n,
            c,
            inner,
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push_checked(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                frozen,
            },
            "batch_norm",
        )
    }

    fn check_channel_param(&self, v: Var, c: usize, op: &'static str) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(Error::contract(op, format!("per-channel parameter {:?} for {c} channels", self.shape(v))));
        }
        Ok(())
    }

    /// Elementwise `x * sigmoid(x)`.
    pub fn swish(&mut self, input: Var) -> Result<Var> {
        let out = kernels::swish_forward(self.value(input).data());
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push_checked(value, Op::Swish { input }, "swish")
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| Error::contract(OP, "no inputs"))?;
        let (n, _, inner) = self.value(first).ncx(OP)?;
        let rest = self.shape(first)[2..].to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() < 2 || s[0] != n || s[2..] != rest[..] {
                return Err(Error::contract(OP, format!("extent mismatch: {:?} vs {:?}", s, self.shape(first))));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend(rest);
        let value = Tensor::new(shape, out)?;
        self.push_checked(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            OP,
        )
    }

    /// Nearest-neighbour resampling of axis 2 to `target_t` steps.
    pub fn nearest_interp_temporal(&mut self, input: Var, target_t: usize) -> Result<Var> {
        const OP: &str = "nearest_interp_temporal";
        if target_t == 0 {
            return Err(Error::contract(OP, "target length must be positive"));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(Error::contract(OP, format!("need [N,C,T,...], got {shape:?}")));
        }
        let t_in = shape[2];
        let rows = shape[0] * shape[1];
        let spatial: usize = shape[3..].iter().product();
        let out = kernels::interp_forward(self.value(input).data(), rows, t_in, target_t, spatial);
        let mut out_shape = shape;
        out_shape[2] = target_t;
        let value = Tensor::new(out_shape, out)?;
        self.push_checked(
            value,
            Op::Interp {
                input,
                t_in,
                t_out: target_t,
            },
            OP,
        )
    }

    /// Affine map along axis 1 at every position: `[N,Cin,...] -> [N,Cout,...]`
    /// with weight `[Cout, Cin]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let in_shape = self.shape(input).to_vec();
        let (n, c, inner) = self.value(input).ncx(OP)?;
        let w_shape = self.shape(weight).to_vec();
        if w_shape.len() != 2 || w_shape[1] != c {
            return Err(Error::contract(OP, format!("weight {w_shape:?} for {c} input channels")));
        }
        let k = w_shape[0];
        let flat_in = self.reshape(input, &[n, c, inner, 1, 1])?;
        let flat_w = self.reshape(weight, &[k, c, 1, 1, 1])?;
        let y = self.conv3d(flat_in, flat_w, Some(bias), ConvGeometry::unit())?;
        let mut out_shape = in_shape;
        out_shape[1] = k;
        self.reshape(y, &out_shape)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::contract(
                "add",
                format!("{:?} vs {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        let out = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Tensor::new(self.shape(lhs).to_vec(), out)?;
        self.push_checked(value, Op::Add { lhs, rhs }, "add")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = R::from_f64(factor);
        let out = self.value(input).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push_checked(value, Op::Scale { input, factor }, "scale")
    }

    /// Copies `input` under a new shape with the same number of elements.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(input).data().to_vec())?;
        self.push_checked(value, Op::Reshape { input }, "reshape")
    }

    /// Mean cross entropy of `[N, K, ...]` logits against hard class indices
    /// laid out as `[N, ...]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_mixed(logits, &[(1.0, targets)])
    }

    /// `sum_i w_i * CE(logits, targets_i)`; mixup uses two terms weighted by
    /// `lambda` and `1 - lambda`.
    pub fn cross_entropy_mixed(&mut self, logits: Var, targets: &[(f64, &[usize])]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (n, k, p) = self.value(logits).ncx(OP)?;
        for (_, t) in targets {
            if t.len() != n * p {
                return Err(Error::contract(OP, format!("{} targets for {} cells", t.len(), n * p)));
            }
            if let Some(bad) = t.iter().find(|&&c| c >= k) {
                return Err(Error::contract(OP, format!("target class {bad} outside [0, {k})")));
            }
        }
        let (loss, grad) = kernels::cross_entropy(self.value(logits).data(), n, k, p, targets);
        let dlogits = grad.iter().map(|v: &R| v.as_f64()).collect();
        let value = Tensor::scalar(R::from_f64(loss));
        self.push_checked(value, Op::CrossEntropy { logits, dlogits }, OP)
    }

    /// Back-propagates from a scalar node. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![R::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &dy)?;
            self.grads[i] = Some(dy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("gradient of node {}", v.0)));
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &[R]) -> Result<Vec<(Var, Vec<R>)>> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                weight,
                bias,
                shape,
            } => {
                let (dx, dw, db) = kernels::conv3d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    shape,
                    needs(input),
                );
                let mut out = vec![(*weight, dw)];
                out.extend(dx.map(|d| (*input, d)));
                out.extend(bias.map(|b| (b, db)));
                out
            }
            Op::UpTemporal {
                input,
                weight,
                bias,
                shape,
            } => {
                let (dx, dw, db) =
                    kernels::up_temporal_backward(self.value(*input).data(), self.value(*weight).data(), dy, shape);
                let mut out = vec![(*input, dx), (*weight, dw)];
                out.extend(bias.map(|b| (b, db)));
                out
            }
            Op::AvgPoolSpatial { input, spatial } => {
                vec![(*input, kernels::avg_pool_backward(dy, *spatial))]
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                frozen,
            } => {
                let x = self.value(*input);
                let (n, c, inner) = x.ncx("batch_norm")?;
                let gamma = self.value(*scale).data();
                if *frozen {
                    let mut dx = vec![R::zero(); dy.len()];
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let a = gamma[ch].as_f64() * inv_std[ch];
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            for ((o, &g), &xv) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&x.data()[r]) {
                                *o = R::from_f64(g.as_f64() * a);
                                dscale[ch] += g.as_f64() * (xv.as_f64() - mean[ch]) * inv_std[ch];
                                dshift[ch] += g.as_f64();
                            }
                        }
                    }
                    let conv = |v: Vec<f64>| v.into_iter().map(R::from_f64).collect();
                    vec![(*input, dx), (*scale, conv(dscale)), (*shift, conv(dshift))]
                } else {
                    let (dx, dscale, dshift) =
                        kernels::batch_norm_backward(x.data(), dy, n, c, inner, mean, inv_std, gamma);
                    vec![(*input, dx), (*scale, dscale), (*shift, dshift)]
                }
            }
            Op::Swish { input } => {
                vec![(*input, kernels::swish_backward(self.value(*input).data(), dy))]
            }
            Op::Concat { inputs } => {
                let (n, total, inner) = node.value.ncx("concat_channels")?;
                let mut parts: Vec<Vec<R>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                for b in 0..n {
                    let mut offset = 0;
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let c = self.shape(*v)[1];
                        let start = (b * total + offset) * inner;
                        part.extend_from_slice(&dy[start..start + c * inner]);
                        offset += c;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Interp { input, t_in, t_out } => {
                let s = self.shape(*input);
                let rows = s[0] * s[1];
                let spatial: usize = s[3..].iter().product();
                vec![(*input, kernels::interp_backward(dy, rows, *t_in, *t_out, spatial))]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, dy.to_vec()), (*rhs, dy.to_vec())],
            Op::Scale { input, factor } => {
                let f = R::from_f64(*factor);
                vec![(*input, dy.iter().map(|&g| g * f).collect())]
            }
            Op::Reshape { input } => vec![(*input, dy.to_vec())],
            Op::CrossEntropy { logits, dlogits } => {
                let g = dy[0].as_f64();
                vec![(*logits, dlogits.iter().map(|&d| R::from_f64(d * g)).collect())]
            }
        })
    }
}
