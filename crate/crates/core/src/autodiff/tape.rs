//! Define-by-run tape: every op appends a node, `backward` replays in reverse.

use super::conv::{self, ConvGeom};
use super::tensor::{broadcast_index_map, broadcast_shape, numel, reduce_index_map, Tensor};
use super::AutodiffError;

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Abs,
    Square,
    Sigmoid,
    Relu,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        // `None` when the operand already has the output shape
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Offset {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum {
        x: Var,
        map: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddBias {
        x: Var,
        bias: Var,
        plane: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's inputs have smaller ids than the node itself.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer of `var`, or `None` when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` as a tensor, zero-filled if `var` does not reach the root.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("grad matches shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input array (parameter, image, annotation, ...).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let map_a = (sa != out_shape).then(|| broadcast_index_map(&sa, &out_shape));
        let map_b = (sb != out_shape).then(|| broadcast_index_map(&sb, &out_shape));
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = numel(&out_shape);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                f(va[ia], vb[ib])
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = v.data().iter().find(|&&t| !(t > 0.0)) {
                return Err(AutodiffError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out = v.map(|t| match kind {
            UnaryKind::Neg => -t,
            UnaryKind::Exp => t.exp(),
            UnaryKind::Log => t.ln(),
            UnaryKind::Abs => t.abs(),
            UnaryKind::Square => t * t,
            UnaryKind::Sigmoid => sigmoid(t),
            UnaryKind::Relu => t.max(0.0),
        });
        Ok(self.push(out, Op::Unary { kind, x }))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural logarithm; rejects non-positive inputs, callers clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Log, x)
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn mul_scalar(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|t| t * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|t| t + offset);
        self.push(out, Op::Offset { x })
    }

    /// `1 - x`, the complement used throughout the losses.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Sums over `axes` (removed from the result shape).
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(AutodiffError::InvalidShape {
                op: "reduce_sum",
                detail: format!("axis {bad} out of range for {shape:?}"),
            });
        }
        let (out_shape, map) = reduce_index_map(&shape, &axes);
        let mut data = vec![0.0; numel(&out_shape)];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            data[o] += v;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Sum { x, map }))
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.reduce_sum(x, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_sum(x, &axes).expect("all axes valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Cross-correlation of `input[C_in,H,W]` with `kernel[C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let mismatch = |detail: String| AutodiffError::InvalidShape {
            op: "conv2d",
            detail,
        };
        if si.len() != 3 || sk.len() != 4 {
            return Err(mismatch(format!(
                "expected input [C,H,W] and kernel [O,C,k,k], got {si:?} and {sk:?}"
            )));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kc, k) = (sk[0], sk[1], sk[2]);
        if kc != c_in {
            return Err(mismatch(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if sk[3] != k || k % 2 == 0 {
            return Err(mismatch(format!(
                "kernel must be square and odd, got {k}x{}",
                sk[3]
            )));
        }
        if stride == 0 {
            return Err(mismatch("stride must be positive".into()));
        }
        let out_extent = |len: usize, axis: &str| -> Result<usize, AutodiffError> {
            let span = len + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(mismatch(format!(
                    "{axis}={len} with pad {pad}, kernel {k}, stride {stride} gives a non-integral output extent"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let oh = out_extent(h, "H")?;
        let ow = out_extent(w, "W")?;
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = conv::im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; c_out * geom.out_pixels()];
        conv::gemm(
            c_out,
            geom.patch_len(),
            geom.out_pixels(),
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Adds a per-channel bias `[C]` to `x[C,...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let plane: usize = sx[1..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i / plane];
        }
        Ok(self.push(out, Op::AddBias { x, bias, plane }))
    }

    /// 2×2 max pooling over `[C,H,W]`; gradient routes to each window's argmax.
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(AutodiffError::InvalidShape {
                op: "maxpool2x",
                detail: format!("needs [C,H,W] with even H and W, got {s:?}"),
            });
        }
        let (vals, argmax) = conv::maxpool2x(self.value(x).data(), s[0], s[1], s[2]);
        let value = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], vals)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::InvalidShape {
                op: "upsample2x",
                detail: format!("needs [C,H,W], got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let vals = conv::upsample2x(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], vals)?;
        Ok(self.push(value, Op::Upsample { x, c, h, w }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&vb[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
        ))
    }

    /// Reverse pass from a one-element `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let idx_a = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let idx_b = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                {
                    let ga = slot(grads, *a, va.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * vb[idx_b(i)],
                            BinaryKind::Div => gi / vb[idx_b(i)],
                        };
                        ga[idx_a(i)] += d;
                    }
                }
                let gb = slot(grads, *b, vb.len());
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * va[idx_a(i)],
                        BinaryKind::Div => {
                            let y = vb[idx_b(i)];
                            -gi * va[idx_a(i)] / (y * y)
                        }
                    };
                    gb[idx_b(i)] += d;
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.value(*x).data();
                let out = node.value.data();
                let gx = slot(grads, *x, vx.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => out[i],
                        UnaryKind::Log => 1.0 / vx[i],
                        UnaryKind::Abs => {
                            if vx[i] > 0.0 {
                                1.0
                            } else if vx[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Square => 2.0 * vx[i],
                        UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                        UnaryKind::Relu => {
                            if vx[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.len());
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }
            Op::Offset { x } | Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if vx[i] >= *lo && vx[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Sum { x, map } => {
                let gx = slot(grads, *x, map.len());
                for (d, &o) in gx.iter_mut().zip(map) {
                    *d += g[o];
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let kv = self.value(*kernel).data();
                {
                    let gk = slot(grads, *kernel, kv.len());
                    conv::gemm(
                        geom.c_out,
                        geom.out_pixels(),
                        geom.patch_len(),
                        g,
                        false,
                        cols,
                        true,
                        gk,
                        true,
                    );
                }
                let mut gcols = vec![0.0; cols.len()];
                conv::gemm(
                    geom.patch_len(),
                    geom.c_out,
                    geom.out_pixels(),
                    kv,
                    true,
                    g,
                    false,
                    &mut gcols,
                    false,
                );
                let gi = slot(grads, *input, geom.c_in * geom.h * geom.w);
                conv::col2im_accumulate(&gcols, geom, gi);
            }
            Op::AddBias { x, bias, plane } => {
                {
                    let gx = slot(grads, *x, g.len());
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                let channels = g.len() / plane;
                let gb = slot(grads, *bias, channels);
                for (c, d) in gb.iter_mut().enumerate() {
                    *d += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                }
            }
            Op::MaxPool { x, argmax } => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            Op::Upsample { x, c, h, w } => {
                let back = conv::upsample2x_backward(g, *c, *h, *w);
                let gx = slot(grads, *x, back.len());
                for (d, b) in gx.iter_mut().zip(back) {
                    *d += b;
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let stride = a_inner + b_inner;
                {
                    let ga = slot(grads, *a, outer * a_inner);
                    for o in 0..*outer {
                        for j in 0..*a_inner {
                            ga[o * a_inner + j] += g[o * stride + j];
                        }
                    }
                }
                let gb = slot(grads, *b, outer * b_inner);
                for o in 0..*outer {
                    for j in 0..*b_inner {
                        gb[o * b_inner + j] += g[o * stride + a_inner + j];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
