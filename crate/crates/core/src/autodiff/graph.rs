//! Reverse-mode tape. Every op appends a node holding its forward value;
//! [`Graph::backward`] walks the nodes in exact reverse insertion order.

use super::kernels::{self, bilinear_taps, roi_sample_points, ConvGeom, RoiRegion};
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Abs,
    Square,
    LogSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GradReverse {
        input: Var,
        scale: f32,
    },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddRowBias {
        input: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    GramDistance {
        source: Var,
        target: Var,
        scales: [f64; 2],
        /// Target Gram minus source Gram, C×C.
        diff: Vec<f64>,
    },
    AvgPool2d {
        input: Var,
        kernel: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Concat0(Vec<Var>),
    SliceBatch {
        input: Var,
        index: usize,
    },
    LogSoftmax(Var),
    SmoothL1 {
        input: Var,
        target: Vec<f32>,
        beta: f32,
    },
    BceWithLogits {
        input: Var,
        target: Vec<f32>,
    },
    RoiAlign {
        input: Var,
        rois: Vec<RoiRegion>,
        out: usize,
        samples: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-use computation tape.
///
/// Running [`Graph::backward`] a second time without [`Graph::zero_grad`]
/// in between is rejected rather than silently accumulating.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
fn log_sigmoid(x: f32) -> f32 {
    let x = x as f64;
    let v = if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    };
    v as f32
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; always has a gradient after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4], AutodiffError> {
        match self.shape(v) {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(AutodiffError::Rank {
                op,
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<[usize; 2], AutodiffError> {
        match self.shape(v) {
            &[r, c] => Ok([r, c]),
            s => Err(AutodiffError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of an NCHW input with an O×C×k×k kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "conv2d")?;
        let [o, wc, kh, kw] = self.dims4(weight, "conv2d")?;
        if wc != c || kh != kw {
            return Err(self.mismatch("conv2d", input, weight));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(self.mismatch("conv2d bias", weight, b));
            }
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: self.shape(input).to_vec(),
                right: self.shape(weight).to_vec(),
            });
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0f32; n * o * ncols];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; rows * ncols]
        };
        for i in 0..n {
            let img = &x[i * c * h * w..(i + 1) * c * h * w];
            let dst = &mut out[i * o * ncols..(i + 1) * o * ncols];
            let colm: &[f32] = if geom.is_pointwise() {
                img
            } else {
                kernels::im2col(img, &geom, &mut cols);
                &cols
            };
            kernels::gemm(o, rows, ncols, wt, false, colm, false, dst, false);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (oc, plane) in dst.chunks_mut(ncols).enumerate() {
                    let bias = bv[oc];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new([n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Identity forward; backward multiplies the incoming gradient by `scale`.
    pub fn grad_reverse(&mut self, input: Var, scale: f32) -> Result<Var, AutodiffError> {
        if !scale.is_finite() {
            return Err(AutodiffError::InvalidArgument(format!(
                "grad_reverse scale must be finite, got {scale}"
            )));
        }
        let value = self.value(input).clone();
        let rg = self.rg(input);
        Ok(self.push(value, Op::GradReverse { input, scale }, rg))
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let src = self.value(a);
        let f: fn(f32) -> f32 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Log => f32::ln,
            Unary::Abs => f32::abs,
            Unary::Square => |x| x * x,
            Unary::LogSigmoid => log_sigmoid,
        };
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Numerically stable `log(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::LogSigmoid, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(self.mismatch(name, a, b));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = match kind {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x + s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Adds a length-F bias to every row of an R×F matrix.
    pub fn add_row_bias(&mut self, input: Var, bias: Var) -> Result<Var, AutodiffError> {
        let [r, f] = self.dims2(input, "add_row_bias")?;
        if self.shape(bias) != [f] {
            return Err(self.mismatch("add_row_bias", input, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(input).data().to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let value = Tensor::new([r, f], data)?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias { input, bias }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let [m, k] = self.dims2(a, "matmul")?;
        let [k2, n] = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let [r, c] = self.dims2(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- reductions (accumulated in f64) -----------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(sum_f64(self.value(a).data()) as f32);
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let value = Tensor::scalar((sum_f64(x) / x.len().max(1) as f64) as f32);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum of squares of all elements.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::FrobeniusSq(a), rg)
    }

    /// `‖s_t·Σ_n T_n T_nᵀ − s_s·Σ_n S_n S_nᵀ‖_F²` for NCHW features viewed as
    /// C×(H·W) matrices per image. Both Grams and their difference are
    /// formed in f64, so nearly equal Grams do not cancel catastrophically.
    pub fn gram_distance(
        &mut self,
        source: Var,
        target: Var,
        scale_source: f64,
        scale_target: f64,
    ) -> Result<Var, AutodiffError> {
        let [_, cs, _, _] = self.dims4(source, "gram_distance")?;
        let [_, ct, _, _] = self.dims4(target, "gram_distance")?;
        if cs != ct {
            return Err(self.mismatch("gram_distance", source, target));
        }
        let mut grams = [vec![0.0f64; cs * cs], vec![0.0f64; cs * cs]];
        for (gm, v, scale) in [(0, target, scale_target), (1, source, scale_source)] {
            let diff = &mut grams[gm];
            let [n, c, h, w] = self.value(v).dims4()?;
            let hw = h * w;
            let x = self.value(v).data();
            for b in 0..n {
                let img = &x[b * c * hw..(b + 1) * c * hw];
                for i in 0..c {
                    let xi = &img[i * hw..(i + 1) * hw];
                    for j in i..c {
                        let xj = &img[j * hw..(j + 1) * hw];
                        let dot: f64 = xi.iter().zip(xj).map(|(&a, &b)| a as f64 * b as f64).sum();
                        diff[i * c + j] += scale * dot;
                    }
                }
            }
        }
        let mut diff: Vec<f64> = grams[0].iter().zip(&grams[1]).map(|(t, s)| t - s).collect();
        for i in 0..cs {
            for j in 0..i {
                diff[i * cs + j] = diff[j * cs + i];
            }
        }
        let value: f64 = diff.iter().map(|d| d * d).sum();
        let rg = self.rg(source) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::GramDistance {
                source,
                target,
                scales: [scale_source, scale_target],
                diff,
            },
            rg,
        ))
    }

    // ---- spatial -----------------------------------------------------

    /// Non-overlapping k×k average pooling (window == stride).
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "avg_pool2d")?;
        if kernel == 0 || h < kernel || w < kernel {
            return Err(AutodiffError::InvalidArgument(format!(
                "avg_pool2d kernel {kernel} does not fit {h}x{w}"
            )));
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let x = self.value(input).data();
        let norm = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s += plane[(oy * kernel + ky) * w + ox * kernel + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::AvgPool2d { input, kernel }, rg))
    }

    /// Non-overlapping k×k max pooling (window == stride).
    pub fn max_pool2d(&mut self, input: Var, kernel: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "max_pool2d")?;
        if kernel == 0 || h < kernel || w < kernel {
            return Err(AutodiffError::InvalidArgument(format!(
                "max_pool2d kernel {kernel} does not fit {h}x{w}"
            )));
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = p * h * w + (oy * kernel + ky) * w + ox * kernel + kx;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Mean over H×W, giving N×C×1×1.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "global_avg_pool")?;
        let x = self.value(input).data();
        let hw = h * w;
        let out = x.chunks(hw).map(|p| (sum_f64(p) / hw as f64) as f32).collect();
        let value = Tensor::new([n, c, 1, 1], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    pub fn upsample_nearest2d(&mut self, input: Var, factor: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "upsample_nearest2d")?;
        if factor == 0 {
            return Err(AutodiffError::InvalidArgument("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                let src = &x[p * h * w + (oy / factor) * w..p * h * w + (oy / factor + 1) * w];
                let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / factor];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::UpsampleNearest { input, factor }, rg))
    }

    // ---- indexing ----------------------------------------------------

    /// Picks elements by flat index into a 1-D result.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        let x = self.value(input).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(AutodiffError::Index {
                index: bad,
                len: x.len(),
            });
        }
        let out = indices.iter().map(|&i| x[i]).collect();
        let value = Tensor::new([indices.len()], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Gather { input, indices }, rg))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat0"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(AutodiffError::Rank {
                op: "concat0",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.mismatch("concat0", first, p));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat0(parts.to_vec()), rg))
    }

    /// Batch element `index` of an NCHW tensor as 1×C×H×W.
    pub fn slice_batch(&mut self, input: Var, index: usize) -> Result<Var, AutodiffError> {
        self.dims4(input, "slice_batch")?;
        let value = self.value(input).batch_item(index)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SliceBatch { input, index }, rg))
    }

    // ---- fused loss helpers -----------------------------------------

    /// Row-wise log-softmax of an R×K matrix.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let [r, k] = self.dims2(input, "log_softmax")?;
        let x = self.value(input).data();
        let mut out = vec![0.0; r * k];
        for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m as f64 + row.iter().map(|&v| ((v - m) as f64).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v as f64 - lse) as f32;
            }
        }
        let value = Tensor::new([r, k], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::LogSoftmax(input), rg))
    }

    /// Elementwise smooth-L1 (Huber with transition `beta`) against a fixed target.
    pub fn smooth_l1(&mut self, input: Var, target: Vec<f32>, beta: f32) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        if x.numel() != target.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "smooth_l1",
                left: x.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let out = x
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SmoothL1 { input, target, beta }, rg))
    }

    /// Elementwise binary cross-entropy on logits against fixed {0,1} targets.
    pub fn bce_with_logits(&mut self, input: Var, target: Vec<f32>) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        if x.numel() != target.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                left: x.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let out = x
            .data()
            .iter()
            .zip(&target)
            .map(|(&z, &t)| {
                let z = z as f64;
                (z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p()) as f32
            })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::BceWithLogits { input, target }, rg))
    }

    /// Bilinear RoI-align of `rois` on an NCHW feature map into R×C×out×out.
    pub fn roi_align(
        &mut self,
        input: Var,
        rois: Vec<RoiRegion>,
        out: usize,
        samples: usize,
    ) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.dims4(input, "roi_align")?;
        if let Some(bad) = rois.iter().find(|r| r.batch >= n) {
            return Err(AutodiffError::Index {
                index: bad.batch,
                len: n,
            });
        }
        if out == 0 || samples == 0 {
            return Err(AutodiffError::InvalidArgument("roi_align sizes must be positive".into()));
        }
        let x = self.value(input).data();
        let norm = 1.0 / (samples * samples) as f32;
        let mut res = vec![0.0; rois.len() * c * out * out];
        for (ri, roi) in rois.iter().enumerate() {
            for py in 0..out {
                for px in 0..out {
                    for (y, xx) in roi_sample_points(roi, out, samples, py, px) {
                        let taps = bilinear_taps(y, xx, h, w);
                        for ch in 0..c {
                            let plane = &x[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
                            let v: f32 = taps.iter().map(|&(o, wt)| plane[o] * wt).sum();
                            res[((ri * c + ch) * out + py) * out + px] += v * norm;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([rois.len(), c, out, out], res)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::RoiAlign {
                input,
                rois,
                out,
                samples,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(
                Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"),
            );
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<f32>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.numel()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].as_mut().unwrap()
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let [n, o, _, _] = out.dims4().expect("conv out");
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.channels * geom.height * geom.width;
                let need_w = slot(grads, *weight);
                let need_x = slot(grads, *input);
                let need_b = bias.is_some_and(|b| slot(grads, b));
                let mut cols = vec![0.0f32; if geom.is_pointwise() { 0 } else { rows * ncols }];
                let mut dcols = vec![0.0f32; rows * ncols];
                for b in 0..n {
                    let gout = &g[b * o * ncols..(b + 1) * o * ncols];
                    if need_b {
                        let db = acc!(bias.unwrap());
                        for (oc, plane) in gout.chunks(ncols).enumerate() {
                            db[oc] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                    }
                    if need_w {
                        let img = &x[b * img_len..(b + 1) * img_len];
                        let colm: &[f32] = if geom.is_pointwise() {
                            img
                        } else {
                            kernels::im2col(img, geom, &mut cols);
                            &cols
                        };
                        kernels::gemm(o, ncols, rows, gout, false, colm, true, acc!(weight), true);
                    }
                    if need_x {
                        let dimg = &mut acc!(input)[b * img_len..(b + 1) * img_len];
                        if geom.is_pointwise() {
                            kernels::gemm(rows, o, ncols, wt, true, gout, false, dimg, true);
                        } else {
                            kernels::gemm(rows, o, ncols, wt, true, gout, false, &mut dcols, false);
                            kernels::col2im(&dcols, geom, dimg);
                        }
                    }
                }
            }
            Op::GradReverse { input, scale } => {
                if slot(grads, *input) {
                    acc!(input).iter_mut().zip(g).for_each(|(d, &v)| *d += v * scale);
                }
            }
            Op::Unary(kind, a) => {
                if slot(grads, *a) {
                    let x = self.value(*a).data();
                    let y = out.data();
                    let d = acc!(a);
                    for j in 0..g.len() {
                        d[j] += g[j]
                            * match kind {
                                Unary::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[j] * (1.0 - y[j]),
                                Unary::Log => 1.0 / x[j],
                                Unary::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * x[j],
                                Unary::LogSigmoid => sigmoid(-x[j]),
                            };
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if slot(grads, *a) {
                    let d = acc!(a);
                    match kind {
                        Binary::Add | Binary::Sub => d.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        Binary::Mul => (0..g.len()).for_each(|j| d[j] += g[j] * xb[j]),
                    }
                }
                if slot(grads, *b) {
                    let d = acc!(b);
                    match kind {
                        Binary::Add => d.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        Binary::Sub => d.iter_mut().zip(g).for_each(|(d, &v)| *d -= v),
                        Binary::Mul => (0..g.len()).for_each(|j| d[j] += g[j] * xa[j]),
                    }
                }
            }
            Op::Scale(a, s) => {
                if slot(grads, *a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, &v)| *d += v * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if slot(grads, *a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::AddRowBias { input, bias } => {
                if slot(grads, *input) {
                    acc!(input).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if slot(grads, *bias) {
                    let f = self.value(*bias).numel();
                    let d = acc!(bias);
                    for row in g.chunks(f) {
                        d.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.dims2(*a, "matmul").expect("2d");
                let [_, n] = self.dims2(*b, "matmul").expect("2d");
                if slot(grads, *a) {
                    // dA = dC · Bᵀ
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, acc!(a), true);
                }
                if slot(grads, *b) {
                    // dB = Aᵀ · dC
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, acc!(b), true);
                }
            }
            Op::Transpose(a) => {
                if slot(grads, *a) {
                    let [r, c] = self.dims2(*a, "transpose").expect("2d");
                    let d = acc!(a);
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if slot(grads, *a) {
                    acc!(a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if slot(grads, *a) {
                    let d = acc!(a);
                    let s = g[0] / d.len().max(1) as f32;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::FrobeniusSq(a) => {
                if slot(grads, *a) {
                    let x = self.value(*a).data();
                    acc!(a).iter_mut().zip(x).for_each(|(d, &v)| *d += 2.0 * v * g[0]);
                }
            }
            Op::GramDistance {
                source,
                target,
                scales,
                diff,
            } => {
                // d/dX of ‖D‖² with D = ±s·Σ X Xᵀ + const is ±4s·D·X (D symmetric).
                for (v, coef) in [(*source, -4.0 * scales[0]), (*target, 4.0 * scales[1])] {
                    if !slot(grads, v) {
                        continue;
                    }
                    let [n, c, h, w] = self.dims4(v, "gram_distance").expect("4d");
                    let hw = h * w;
                    let x = self.value(v).data();
                    let d = acc!(v);
                    let k = coef * g[0] as f64;
                    for b in 0..n {
                        let base = b * c * hw;
                        for i in 0..c {
                            for p in 0..hw {
                                let s: f64 = (0..c).map(|j| diff[i * c + j] * x[base + j * hw + p] as f64).sum();
                                d[base + i * hw + p] += (k * s) as f32;
                            }
                        }
                    }
                }
            }
            Op::AvgPool2d { input, kernel } => {
                if slot(grads, *input) {
                    let [_, _, h, w] = self.dims4(*input, "avg_pool2d").expect("4d");
                    let [n, c, oh, ow] = out.dims4().expect("4d");
                    let norm = 1.0 / (kernel * kernel) as f32;
                    let d = acc!(input);
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = g[(p * oh + oy) * ow + ox] * norm;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        d[p * h * w + (oy * kernel + ky) * w + ox * kernel + kx] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if slot(grads, *input) {
                    let d = acc!(input);
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                if slot(grads, *input) {
                    let [_, _, h, w] = self.dims4(*input, "global_avg_pool").expect("4d");
                    let hw = h * w;
                    let d = acc!(input);
                    for (p, plane) in d.chunks_mut(hw).enumerate() {
                        let v = g[p] / hw as f32;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                if slot(grads, *input) {
                    let [_, _, h, w] = self.dims4(*input, "upsample").expect("4d");
                    let [n, c, oh, ow] = out.dims4().expect("4d");
                    let d = acc!(input);
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d[p * h * w + (oy / factor) * w + ox / factor] += g[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::Gather { input, indices } => {
                if slot(grads, *input) {
                    let d = acc!(input);
                    for (j, &src) in indices.iter().enumerate() {
                        d[src] += g[j];
                    }
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if slot(grads, *p) {
                        acc!(p).iter_mut().zip(&g[off..off + len]).for_each(|(d, &v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::SliceBatch { input, index } => {
                if slot(grads, *input) {
                    let per = out.numel();
                    acc!(input)[index * per..(index + 1) * per]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::LogSoftmax(input) => {
                if slot(grads, *input) {
                    let k = out.shape()[1];
                    let y = out.data();
                    let d = acc!(input);
                    for ((drow, yrow), grow) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let gs: f32 = grow.iter().sum();
                        for j in 0..k {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                }
            }
            Op::SmoothL1 {
                input,
                target,
                beta,
            } => {
                if slot(grads, *input) {
                    let x = self.value(*input).data();
                    let d = acc!(input);
                    for j in 0..g.len() {
                        let diff = x[j] - target[j];
                        let dd = if diff.abs() < *beta {
                            diff / beta
                        } else {
                            diff.signum()
                        };
                        d[j] += g[j] * dd;
                    }
                }
            }
            Op::BceWithLogits { input, target } => {
                if slot(grads, *input) {
                    let x = self.value(*input).data();
                    let d = acc!(input);
                    for j in 0..g.len() {
                        d[j] += g[j] * (sigmoid(x[j]) - target[j]);
                    }
                }
            }
            Op::RoiAlign {
                input,
                rois,
                out: size,
                samples,
            } => {
                if slot(grads, *input) {
                    let [_, c, h, w] = self.dims4(*input, "roi_align").expect("4d");
                    let norm = 1.0 / (samples * samples) as f32;
                    let d = acc!(input);
                    for (ri, roi) in rois.iter().enumerate() {
                        for py in 0..*size {
                            for px in 0..*size {
                                for (y, xx) in roi_sample_points(roi, *size, *samples, py, px) {
                                    let taps = bilinear_taps(y, xx, h, w);
                                    for ch in 0..c {
                                        let gv = g[((ri * c + ch) * size + py) * size + px] * norm;
                                        let base = (roi.batch * c + ch) * h * w;
                                        for &(o, wt) in &taps {
                                            d[base + o] += gv * wt;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_conv_is_scalar_multiply() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.param(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.param(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_hand_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[1, 1, 4, 5], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 9, 8]));
        let w = g.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 4]);
        let bad = g.constant(Tensor::zeros([4, 2, 3, 3]));
        let err = g.conv2d(x, bad, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3, 9, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn grad_reverse_scales_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.grad_reverse(x, -0.5).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == -0.5));
        assert!(g.grad_reverse(x, f32::NAN).is_err());
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([2, 3], 1.0));
        let b = g.constant(Tensor::full([3, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
        assert!(matches!(g.matmul(a, a), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn frobenius_of_zero_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([4, 4]));
        let f = g.frobenius_sq(z);
        assert_eq!(g.value(f).item(), 0.0);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn second_backward_requires_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.frobenius_sq(x);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().clone();
        assert!(matches!(g.backward(s), Err(AutodiffError::BackwardTwice)));
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn unused_params_get_zero_grad() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::full([3], 1.0));
        let s = g.square(used);
        g.backward(s).unwrap();
        assert_eq!(g.grad(used).unwrap().item(), 4.0);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-200.0, 0.0, 200.0]));
        let y = g.log_sigmoid(x);
        let v = g.value(y).data();
        assert!((v[0] + 200.0).abs() < 1e-3);
        assert!((v[1] + std::f32::consts::LN_2).abs() < 1e-7);
        assert!(v[2].abs() < 1e-30);
    }

    #[test]
    fn pools_and_upsample_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 2, 4, 4], |i| i as f32));
        let a = g.avg_pool2d(x, 2).unwrap();
        let m = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.shape(a), &[1, 2, 2, 2]);
        assert_eq!(g.value(a).data()[0], 2.5);
        assert_eq!(g.value(m).data()[0], 5.0);
        let u = g.upsample_nearest2d(m, 2).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 4, 4]);
        assert_eq!(g.value(u).data()[..4], [5.0, 5.0, 7.0, 7.0]);
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[7.5, 23.5]);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 2, 6, 6], 3.0));
        let r = RoiRegion {
            batch: 0,
            x0: 1.0,
            y0: 0.5,
            x1: 4.0,
            y1: 5.0,
        };
        let y = g.roi_align(x, vec![r], 4, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }
}
