//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass: leaves are copied in,
//! operations record their inputs and enough context to replay the chain
//! rule, and [`Tape::backward`] walks the records once in reverse order.
//! Every forward op validates that its output is finite; NaN/Inf is an
//! error state, not a silent value.
//!
//! A tape is confined to one thread. Tensors extracted from it are plain
//! values and can be handed off freely.

use crate::error::{Error, Result};
use crate::kernels::{col2im_acc, im2col, matmul, matmul_nt, transpose};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Channel reduction mode for [`Tape::channel_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Whether batch normalization uses batch statistics (updating running
/// stats) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Div {
        a: VarId,
        b: VarId,
    },
    /// alpha * x + beta with constant coefficients.
    Affine {
        x: VarId,
        alpha: T,
    },
    /// s[0] * x where s is a one-element tensor.
    ScalarMul {
        s: VarId,
        x: VarId,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    MatMul {
        a: VarId,
        b: VarId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: VarId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: VarId,
    },
    Conv2d {
        x: VarId,
        kernel: VarId,
        bias: Option<VarId>,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        k: usize,
        pad: usize,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<usize>,
    },
    SoftmaxAxis {
        x: VarId,
        axis: usize,
    },
    BilinearUp {
        x: VarId,
        c: usize,
        src_h: usize,
        src_w: usize,
        dst_h: usize,
        dst_w: usize,
    },
    ChannelPool {
        x: VarId,
        mode: PoolMode,
        argmax: Vec<usize>,
        c: usize,
    },
    ConcatChannels {
        parts: Vec<(VarId, usize)>,
        hw: usize,
    },
    SliceChannels {
        x: VarId,
        start: usize,
        hw: usize,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        x: VarId,
        coords: Vec<(usize, usize)>,
        h: usize,
        w: usize,
    },
    SumAll {
        x: VarId,
    },
    CrossEntropy {
        logits: VarId,
        mask: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy an external tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<VarId> {
        self.push(
            "leaf",
            Tensor {
                shape: t.shape.clone(),
                data: t.data.clone(),
                requires_grad: t.requires_grad,
                grad: None,
            },
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Record a constant (no gradient) leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<VarId> {
        let t = Tensor::from_vec(shape, data)?;
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn data(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].value.data
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(id)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", Tensor::from_vec(shape, data)?, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", Tensor::from_vec(shape, data)?, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "div",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x / y).collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("div", Tensor::from_vec(shape, data)?, Op::Div { a, b }, needs)
    }

    /// alpha * x + beta, elementwise with constant coefficients.
    pub fn affine(&mut self, x: VarId, alpha: T, beta: T) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| alpha * v + beta).collect();
        let shape = tx.shape.clone();
        let needs = self.needs(x);
        self.push("affine", Tensor::from_vec(shape, data)?, Op::Affine { x, alpha }, needs)
    }

    /// Scale a tensor by a learnable one-element tensor.
    pub fn scalar_mul(&mut self, s: VarId, x: VarId) -> Result<VarId> {
        let ts = &self.nodes[s.0].value;
        if ts.numel() != 1 {
            return Err(Error::invalid(
                "scalar_mul",
                format!("scale must have one element, got shape {:?}", ts.shape),
            ));
        }
        let sv = ts.data[0];
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| sv * v).collect();
        let shape = tx.shape.clone();
        let needs = self.needs(s) || self.needs(x);
        self.push("scalar_mul", Tensor::from_vec(shape, data)?, Op::ScalarMul { s, x }, needs)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| v.max(T::ZERO)).collect();
        let shape = tx.shape.clone();
        let needs = self.needs(x);
        self.push("relu", Tensor::from_vec(shape, data)?, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data
            .iter()
            .map(|&v| {
                // Branch keeps the exponential argument negative for stability.
                if v.to_f64() >= 0.0 {
                    T::ONE / (T::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        let shape = tx.shape.clone();
        let needs = self.needs(x);
        self.push("sigmoid", Tensor::from_vec(shape, data)?, Op::Sigmoid { x }, needs)
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        let s: T = tx.data.iter().copied().sum();
        let needs = self.needs(x);
        self.push("sum_all", Tensor::from_vec(vec![1], vec![s])?, Op::SumAll { x }, needs)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::from_vec(vec![m, n], data)?,
            Op::MatMul { a, b, m, k, n },
            needs,
        )
    }

    pub fn transpose2(&mut self, x: VarId) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected a matrix, got shape {:?}", tx.shape),
            ));
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let data = transpose(&tx.data, rows, cols);
        let needs = self.needs(x);
        self.push(
            "transpose",
            Tensor::from_vec(vec![cols, rows], data)?,
            Op::Transpose { x, rows, cols },
            needs,
        )
    }

    pub fn reshape(&mut self, x: VarId, new_shape: Vec<usize>) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        let numel: usize = new_shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: tx.shape.clone(),
                rhs: new_shape,
            });
        }
        let data = tx.data.clone();
        let needs = self.needs(x);
        self.push("reshape", Tensor::from_vec(new_shape, data)?, Op::Reshape { x }, needs)
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// 2-D cross-correlation of X[c_in x h x w] with kernel
    /// [c_out x c_in x k x k], odd k, padding (k-1)/2 (same-size output).
    pub fn conv2d(&mut self, x: VarId, kernel: VarId, bias: Option<VarId>, padding: usize) -> Result<VarId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        if tx.shape.len() != 3 || tk.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        let (c_in, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (c_out, kc_in, k, k2) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        if kc_in != c_in || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::invalid(
                "conv2d",
                format!("padding {padding} must be (k-1)/2 = {}", (k - 1) / 2),
            ));
        }
        if let Some(b) = bias {
            let tb = &self.nodes[b.0].value;
            if tb.shape != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: tb.shape.clone(),
                });
            }
        }
        let hw = h * w;
        let mut out = if k == 1 {
            matmul(&tk.data, &tx.data, c_out, c_in, hw)
        } else {
            let col = im2col(&tx.data, c_in, h, w, k, padding);
            matmul(&tk.data, &col, c_out, c_in * k * k, hw)
        };
        if let Some(b) = bias {
            let tb = &self.nodes[b.0].value;
            for o in 0..c_out {
                let bv = tb.data[o];
                for v in &mut out[o * hw..(o + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernel) || bias.map_or(false, |b| self.needs(b));
        self.push(
            "conv2d",
            Tensor::from_vec(vec![c_out, h, w], out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                c_in,
                c_out,
                h,
                w,
                k,
                pad: padding,
            },
            needs,
        )
    }

    /// 2x2 max pooling with stride 2. Ties route to the first element in
    /// row-major scan order.
    pub fn max_pool2(&mut self, x: VarId) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 3 {
            return Err(Error::invalid(
                "max_pool2",
                format!("expected C x H x W, got {:?}", tx.shape),
            ));
        }
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "max_pool2",
                format!("spatial extents {h}x{w} must be even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let x_ch = &tx.data[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = x_ch[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if x_ch[idx] > best {
                                best = x_ch[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = best;
                    argmax[ch * oh * ow + oy * ow + ox] = ch * h * w + best_idx;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "max_pool2",
            Tensor::from_vec(vec![c, oh, ow], out)?,
            Op::MaxPool2 { x, argmax },
            needs,
        )
    }

    /// Numerically stabilized softmax along one axis.
    pub fn softmax_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if axis >= tx.shape.len() {
            return Err(Error::invalid(
                "softmax_axis",
                format!("axis {axis} out of range for shape {:?}", tx.shape),
            ));
        }
        let shape = tx.shape.clone();
        let data = softmax_slices(&tx.data, &shape, axis);
        let needs = self.needs(x);
        self.push(
            "softmax_axis",
            Tensor::from_vec(shape, data)?,
            Op::SoftmaxAxis { x, axis },
            needs,
        )
    }

    /// Bilinear upsampling with half-pixel centers and border clamping.
    pub fn bilinear_up(&mut self, x: VarId, dst_h: usize, dst_w: usize) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 3 {
            return Err(Error::invalid(
                "bilinear_up",
                format!("expected C x H x W, got {:?}", tx.shape),
            ));
        }
        let (c, src_h, src_w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        if dst_h < src_h || dst_w < src_w {
            return Err(Error::invalid(
                "bilinear_up",
                format!("target {dst_h}x{dst_w} smaller than source {src_h}x{src_w}"),
            ));
        }
        let ys = bilinear_axis::<T>(src_h, dst_h);
        let xs = bilinear_axis::<T>(src_w, dst_w);
        let mut out = vec![T::ZERO; c * dst_h * dst_w];
        for ch in 0..c {
            let src = &tx.data[ch * src_h * src_w..(ch + 1) * src_h * src_w];
            let dst = &mut out[ch * dst_h * dst_w..(ch + 1) * dst_h * dst_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let row0 = &src[y0 * src_w..(y0 + 1) * src_w];
                let row1 = &src[y1 * src_w..(y1 + 1) * src_w];
                let out_row = &mut dst[oy * dst_w..(oy + 1) * dst_w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    // Nested lerp: exact for constant inputs and for fy = fx = 0.
                    let v0 = row0[x0] + fx * (row0[x1] - row0[x0]);
                    let v1 = row1[x0] + fx * (row1[x1] - row1[x0]);
                    out_row[ox] = v0 + fy * (v1 - v0);
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "bilinear_up",
            Tensor::from_vec(vec![c, dst_h, dst_w], out)?,
            Op::BilinearUp {
                x,
                c,
                src_h,
                src_w,
                dst_h,
                dst_w,
            },
            needs,
        )
    }

    /// Per-pixel reduction over the channel axis: C x H x W -> 1 x H x W.
    pub fn channel_pool(&mut self, x: VarId, mode: PoolMode) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 3 || tx.shape[0] == 0 {
            return Err(Error::invalid(
                "channel_pool",
                format!("expected C x H x W with C >= 1, got {:?}", tx.shape),
            ));
        }
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let hw = h * w;
        let mut out = vec![T::ZERO; hw];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![0usize; hw];
                for p in 0..hw {
                    let mut best = tx.data[p];
                    let mut best_c = 0;
                    for ch in 1..c {
                        let v = tx.data[ch * hw + p];
                        // Strict comparison: ties keep the lowest channel index.
                        if v > best {
                            best = v;
                            best_c = ch;
                        }
                    }
                    out[p] = best;
                    argmax[p] = best_c;
                }
            }
            PoolMode::Avg => {
                let inv = T::ONE / T::from_f64(c as f64);
                for p in 0..hw {
                    let mut s = T::ZERO;
                    for ch in 0..c {
                        s += tx.data[ch * hw + p];
                    }
                    out[p] = s * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "channel_pool",
            Tensor::from_vec(vec![1, h, w], out)?,
            Op::ChannelPool { x, mode, argmax, c },
            needs,
        )
    }

    /// Stack parts along the channel axis in argument order.
    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no parts given"));
        }
        let first = &self.nodes[parts[0].0].value;
        if first.shape.len() != 3 {
            return Err(Error::invalid(
                "concat_channels",
                format!("expected C x H x W parts, got {:?}", first.shape),
            ));
        }
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut total_c = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.shape.len() != 3 || tp.shape[1] != h || tp.shape[2] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape.clone(),
                    rhs: tp.shape.clone(),
                });
            }
            total_c += tp.shape[0];
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(total_c * hw);
        let mut rec = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            data.extend_from_slice(&tp.data);
            rec.push((p, tp.shape[0]));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_channels",
            Tensor::from_vec(vec![total_c, h, w], data)?,
            Op::ConcatChannels { parts: rec, hw },
            needs,
        )
    }

    /// Select `len` contiguous channels starting at `start`.
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 3 || start + len > tx.shape[0] || len == 0 {
            return Err(Error::invalid(
                "slice_channels",
                format!("slice [{start}, {}) invalid for shape {:?}", start + len, tx.shape),
            ));
        }
        let (h, w) = (tx.shape[1], tx.shape[2]);
        let hw = h * w;
        let data = tx.data[start * hw..(start + len) * hw].to_vec();
        let needs = self.needs(x);
        self.push(
            "slice_channels",
            Tensor::from_vec(vec![len, h, w], data)?,
            Op::SliceChannels { x, start, hw },
            needs,
        )
    }

    /// Per-channel batch normalization over the spatial extent.
    ///
    /// Train mode normalizes with batch statistics (biased variance,
    /// eps inside the square root) and folds them into `running_mean` /
    /// `running_var` with the given momentum. Eval mode normalizes with the
    /// running statistics unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: f64,
        eps: f64,
    ) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 3 {
            return Err(Error::invalid(
                "batchnorm2d",
                format!("expected C x H x W, got {:?}", tx.shape),
            ));
        }
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let hw = h * w;
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        if tg.shape != [c] || tb.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: vec![c],
                rhs: if tg.shape != [c] { tg.shape.clone() } else { tb.shape.clone() },
            });
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batchnorm2d", "running stats length mismatch"));
        }
        if mode == BnMode::Train && hw <= 1 {
            return Err(Error::invalid(
                "batchnorm2d",
                "single-element normalization rejected in train mode",
            ));
        }
        let eps_t = T::from_f64(eps);
        let mut mean = vec![T::ZERO; c];
        let mut inv_std = vec![T::ZERO; c];
        let mut out = vec![T::ZERO; c * hw];
        let inv_n = T::ONE / T::from_f64(hw as f64);
        for ch in 0..c {
            let xs = &tx.data[ch * hw..(ch + 1) * hw];
            let (m, v) = match mode {
                BnMode::Train => {
                    let m: T = xs.iter().copied().sum::<T>() * inv_n;
                    let v: T = xs.iter().map(|&u| (u - m) * (u - m)).sum::<T>() * inv_n;
                    let mom = T::from_f64(momentum);
                    running_mean[ch] = (T::ONE - mom) * running_mean[ch] + mom * m;
                    running_var[ch] = (T::ONE - mom) * running_var[ch] + mom * v;
                    (m, v)
                }
                BnMode::Eval => (running_mean[ch], running_var[ch]),
            };
            let istd = T::ONE / (v + eps_t).sqrt();
            mean[ch] = m;
            inv_std[ch] = istd;
            let g = tg.data[ch];
            let b = tb.data[ch];
            for (o, &u) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *o = g * (u - m) * istd + b;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "batchnorm2d",
            Tensor::from_vec(vec![c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
            needs,
        )
    }

    /// Gather feature columns at pixel coordinates: S x H x W -> S x N.
    ///
    /// Coordinates out of bounds are a broken caller invariant, not an
    /// input error, and panic.
    pub fn gather_pixels(&mut self, x: VarId, coords: &[(usize, usize)]) -> Result<VarId> {
        let tx = &self.nodes[x.0].value;
        assert_eq!(tx.shape.len(), 3, "gather_pixels expects C x H x W");
        let (s, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let hw = h * w;
        let n = coords.len();
        let mut out = vec![T::ZERO; s * n];
        for (j, &(r, cidx)) in coords.iter().enumerate() {
            assert!(r < h && cidx < w, "node coordinate ({r}, {cidx}) outside {h}x{w}");
            for ch in 0..s {
                out[ch * n + j] = tx.data[ch * hw + r * w + cidx];
            }
        }
        let needs = self.needs(x);
        self.push(
            "gather_pixels",
            Tensor::from_vec(vec![s, n], out)?,
            Op::Gather {
                x,
                coords: coords.to_vec(),
                h,
                w,
            },
            needs,
        )
    }

    /// Two-class cross-entropy against a binary mask, averaged over pixels.
    pub fn cross_entropy2(&mut self, logits: VarId, mask: &[T]) -> Result<VarId> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape.len() != 3 || tl.shape[0] != 2 {
            return Err(Error::invalid(
                "cross_entropy2",
                format!("expected 2 x H x W logits, got {:?}", tl.shape),
            ));
        }
        let hw = tl.shape[1] * tl.shape[2];
        if mask.len() != hw {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy2",
                lhs: tl.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut total = T::ZERO;
        for p in 0..hw {
            let (l0, l1) = (tl.data[p], tl.data[hw + p]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let target = if mask[p].to_f64() > 0.5 { l1 } else { l0 };
            total += lse - target;
        }
        let loss = total / T::from_f64(hw as f64);
        let needs = self.needs(logits);
        self.push(
            "cross_entropy2",
            Tensor::from_vec(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                mask: mask.to_vec(),
            },
            needs,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf; leaves the loss did not reach get zeros.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; node.value.numel()]);
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulate `f(buf)` into the gradient buffer of `id` if it needs one.
        macro_rules! acc {
            ($id:expr, $f:expr) => {{
                let id: VarId = $id;
                if self.nodes[id.0].needs_grad {
                    let buf = grads[id.0]
                        .get_or_insert_with(|| vec![T::ZERO; self.nodes[id.0].value.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc!(*a, |buf: &mut [T]| add_into(buf, g));
                acc!(*b, |buf: &mut [T]| add_into(buf, g));
            }
            Op::Mul { a, b } => {
                let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                acc!(*a, |buf: &mut [T]| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv * bv;
                    }
                });
                acc!(*b, |buf: &mut [T]| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(da) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div { a, b } => {
                let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                acc!(*a, |buf: &mut [T]| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv / bv;
                    }
                });
                acc!(*b, |buf: &mut [T]| {
                    for (p, o) in buf.iter_mut().enumerate() {
                        *o += -g[p] * da[p] / (db[p] * db[p]);
                    }
                });
            }
            Op::Affine { x, alpha } => {
                let alpha = *alpha;
                acc!(*x, |buf: &mut [T]| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += alpha * gv;
                    }
                });
            }
            Op::ScalarMul { s, x } => {
                let sv = self.nodes[s.0].value.data[0];
                let xd = &self.nodes[x.0].value.data;
                acc!(*s, |buf: &mut [T]| {
                    let mut dot = T::ZERO;
                    for (&gv, &xv) in g.iter().zip(xd) {
                        dot += gv * xv;
                    }
                    buf[0] += dot;
                });
                acc!(*x, |buf: &mut [T]| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += sv * gv;
                    }
                });
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].value.data;
                acc!(*x, |buf: &mut [T]| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > T::ZERO {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = &self.nodes[i].value.data;
                acc!(*x, |buf: &mut [T]| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(yd) {
                        *o += gv * yv * (T::ONE - yv);
                    }
                });
            }
            Op::SumAll { x } => {
                let g0 = g[0];
                acc!(*x, |buf: &mut [T]| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                acc!(*a, |buf: &mut [T]| {
                    let da = matmul_nt(g, bd, m, n, k);
                    add_into(buf, &da);
                });
                acc!(*b, |buf: &mut [T]| {
                    let at = transpose(ad, m, k);
                    let db = matmul(&at, g, k, m, n);
                    add_into(buf, &db);
                });
            }
            Op::Transpose { x, rows, cols } => {
                // g has shape [cols x rows]; transpose it back.
                let gt = transpose(g, *cols, *rows);
                acc!(*x, |buf: &mut [T]| add_into(buf, &gt));
            }
            Op::Reshape { x } => {
                acc!(*x, |buf: &mut [T]| add_into(buf, g));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                c_in,
                c_out,
                h,
                w,
                k,
                pad,
            } => {
                let (c_in, c_out, h, w, k, pad) = (*c_in, *c_out, *h, *w, *k, *pad);
                let hw = h * w;
                let cik2 = c_in * k * k;
                if let Some(b) = bias {
                    acc!(*b, |buf: &mut [T]| {
                        for o in 0..c_out {
                            let mut s = T::ZERO;
                            for &gv in &g[o * hw..(o + 1) * hw] {
                                s += gv;
                            }
                            buf[o] += s;
                        }
                    });
                }
                let xd = &self.nodes[x.0].value.data;
                let kd = &self.nodes[kernel.0].value.data;
                acc!(*kernel, |buf: &mut [T]| {
                    let dk = if k == 1 {
                        matmul_nt(g, xd, c_out, hw, cik2)
                    } else {
                        let col = im2col(xd, c_in, h, w, k, pad);
                        matmul_nt(g, &col, c_out, hw, cik2)
                    };
                    add_into(buf, &dk);
                });
                acc!(*x, |buf: &mut [T]| {
                    let kt = transpose(kd, c_out, cik2);
                    let dcol = matmul(&kt, g, cik2, c_out, hw);
                    if k == 1 {
                        add_into(buf, &dcol);
                    } else {
                        col2im_acc(&dcol, buf, c_in, h, w, k, pad);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                acc!(*x, |buf: &mut [T]| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        buf[src] += gv;
                    }
                });
            }
            Op::SoftmaxAxis { x, axis } => {
                let yd = &self.nodes[i].value.data;
                let shape = &self.nodes[i].value.shape;
                let axis = *axis;
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                acc!(*x, |buf: &mut [T]| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let base = o * axis_len * inner + inn;
                            let mut dot = T::ZERO;
                            for a in 0..axis_len {
                                let f = base + a * inner;
                                dot += g[f] * yd[f];
                            }
                            for a in 0..axis_len {
                                let f = base + a * inner;
                                buf[f] += yd[f] * (g[f] - dot);
                            }
                        }
                    }
                });
            }
            Op::BilinearUp {
                x,
                c,
                src_h,
                src_w,
                dst_h,
                dst_w,
            } => {
                let (c, src_h, src_w, dst_h, dst_w) = (*c, *src_h, *src_w, *dst_h, *dst_w);
                let ys = bilinear_axis::<T>(src_h, dst_h);
                let xs = bilinear_axis::<T>(src_w, dst_w);
                acc!(*x, |buf: &mut [T]| {
                    for ch in 0..c {
                        let dst = &g[ch * dst_h * dst_w..(ch + 1) * dst_h * dst_w];
                        let src = &mut buf[ch * src_h * src_w..(ch + 1) * src_h * src_w];
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = dst[oy * dst_w + ox];
                                let w00 = (T::ONE - fy) * (T::ONE - fx);
                                let w01 = (T::ONE - fy) * fx;
                                let w10 = fy * (T::ONE - fx);
                                let w11 = fy * fx;
                                src[y0 * src_w + x0] += gv * w00;
                                src[y0 * src_w + x1] += gv * w01;
                                src[y1 * src_w + x0] += gv * w10;
                                src[y1 * src_w + x1] += gv * w11;
                            }
                        }
                    }
                });
            }
            Op::ChannelPool { x, mode, argmax, c } => {
                let hw = g.len();
                match mode {
                    PoolMode::Max => {
                        acc!(*x, |buf: &mut [T]| {
                            for p in 0..hw {
                                buf[argmax[p] * hw + p] += g[p];
                            }
                        });
                    }
                    PoolMode::Avg => {
                        let inv = T::ONE / T::from_f64(*c as f64);
                        acc!(*x, |buf: &mut [T]| {
                            for ch in 0..*c {
                                for p in 0..hw {
                                    buf[ch * hw + p] += g[p] * inv;
                                }
                            }
                        });
                    }
                }
            }
            Op::ConcatChannels { parts, hw } => {
                let mut offset = 0;
                for &(p, pc) in parts {
                    let span = pc * hw;
                    let gslice = &g[offset..offset + span];
                    acc!(p, |buf: &mut [T]| add_into(buf, gslice));
                    offset += span;
                }
            }
            Op::SliceChannels { x, start, hw } => {
                let base = start * hw;
                acc!(*x, |buf: &mut [T]| {
                    add_into(&mut buf[base..base + g.len()], g);
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            } => {
                let c = mean.len();
                let hw = g.len() / c;
                let xd = &self.nodes[x.0].value.data;
                let gd = &self.nodes[gamma.0].value.data;
                acc!(*beta, |buf: &mut [T]| {
                    for ch in 0..c {
                        let mut s = T::ZERO;
                        for &gv in &g[ch * hw..(ch + 1) * hw] {
                            s += gv;
                        }
                        buf[ch] += s;
                    }
                });
                acc!(*gamma, |buf: &mut [T]| {
                    for ch in 0..c {
                        let (m, istd) = (mean[ch], inv_std[ch]);
                        let mut s = T::ZERO;
                        for p in 0..hw {
                            let f = ch * hw + p;
                            s += g[f] * (xd[f] - m) * istd;
                        }
                        buf[ch] += s;
                    }
                });
                acc!(*x, |buf: &mut [T]| {
                    let inv_n = T::ONE / T::from_f64(hw as f64);
                    for ch in 0..c {
                        let (m, istd) = (mean[ch], inv_std[ch]);
                        let gam = gd[ch];
                        match mode {
                            BnMode::Eval => {
                                for p in 0..hw {
                                    let f = ch * hw + p;
                                    buf[f] += g[f] * gam * istd;
                                }
                            }
                            BnMode::Train => {
                                let mut sum_dxhat = T::ZERO;
                                let mut sum_dxhat_xhat = T::ZERO;
                                for p in 0..hw {
                                    let f = ch * hw + p;
                                    let xhat = (xd[f] - m) * istd;
                                    let dxhat = g[f] * gam;
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * xhat;
                                }
                                let mean_dxhat = sum_dxhat * inv_n;
                                let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                                for p in 0..hw {
                                    let f = ch * hw + p;
                                    let xhat = (xd[f] - m) * istd;
                                    buf[f] += istd * (g[f] * gam - mean_dxhat - xhat * mean_dxhat_xhat);
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather { x, coords, h: _, w } => {
                let n = coords.len();
                let s = g.len() / n;
                let hw = self.nodes[x.0].value.numel() / s;
                acc!(*x, |buf: &mut [T]| {
                    for (j, &(r, cidx)) in coords.iter().enumerate() {
                        for ch in 0..s {
                            buf[ch * hw + r * w + cidx] += g[ch * n + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, mask } => {
                let hw = mask.len();
                let ld = &self.nodes[logits.0].value.data;
                let g0 = g[0];
                let inv_n = T::ONE / T::from_f64(hw as f64);
                acc!(*logits, |buf: &mut [T]| {
                    for p in 0..hw {
                        let (l0, l1) = (ld[p], ld[hw + p]);
                        let m = l0.max(l1);
                        let e0 = (l0 - m).exp();
                        let e1 = (l1 - m).exp();
                        let z = e0 + e1;
                        let (p0, p1) = (e0 / z, e1 / z);
                        let fg = mask[p].to_f64() > 0.5;
                        buf[p] += g0 * inv_n * (p0 - if fg { T::ZERO } else { T::ONE });
                        buf[hw + p] += g0 * inv_n * (p1 - if fg { T::ONE } else { T::ZERO });
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Source taps and interpolation fraction for one output axis position
/// under the half-pixel-center convention with border clamping.
fn bilinear_axis<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let coord = (i as f64 + 0.5) * ratio - 0.5;
            if coord <= 0.0 {
                (0, 0, T::ZERO)
            } else if coord >= (src - 1) as f64 {
                (src - 1, src - 1, T::ZERO)
            } else {
                let i0 = coord.floor() as usize;
                (i0, i0 + 1, T::from_f64(coord - i0 as f64))
            }
        })
        .collect()
}

fn softmax_slices<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::ZERO; data.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let base = o * axis_len * inner + inn;
            let mut max = data[base];
            for a in 1..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = T::ZERO;
            for a in 0..axis_len {
                let f = base + a * inner;
                let e = (data[f] - max).exp();
                out[f] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
    out
}
