use super::kernels::{bilinear_taps, col2im_add, gemm, im2col, pool_window, ConvGeom, Operand};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AdaptivePool(Var),
    ResizeBilinear(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scalar_mul",
            Op::Shift(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "reduce_sum",
            Op::MeanAll(..) => "reduce_mean",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AdaptivePool(..) => "adaptive_avg_pool",
            Op::ResizeBilinear(..) => "resize_bilinear",
            Op::Patchify { .. } => "patchify",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations in execution order.
///
/// Nodes are appended as ops run, so every node's inputs precede it and the
/// backward pass is a single reverse sweep over the node list.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Layer-norm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            label: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn named_leaf(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].label = Some(name.to_owned());
        v
    }

    /// Named leaf with an explicit gradient flag, without cloning `t`.
    pub fn param(&mut self, name: &str, t: &Tensor, requires_grad: bool) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad);
        self.nodes[v.0].label = Some(name.to_owned());
        v
    }

    /// Names a node for diagnostics.
    pub fn set_label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Accumulated gradient of a leaf after one or more [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Adds the leaf's accumulated gradient into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Describes the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(match &n.label {
                Some(l) => l.clone(),
                None => format!("#{i} ({})", n.op.name()),
            })
        })
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Operand::plain(self.value(a), k),
            Operand::plain(self.value(b), n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, tag: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, tag, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().expect("non-empty shape");
        if sr.iter().product::<usize>() != n {
            return Err(Error::shapes("add_row", sx, sr));
        }
        let r = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(sx.to_vec(), out, Op::AddRow(x, row), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, tag: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, tag, rg)
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.shape(p).iter().product::<usize>() != n {
                return Err(Error::shapes("layernorm", &shape, self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(shape.iter().product());
        for row in self.value(x).chunks(n) {
            let (mean, rstd) = row_stats(row);
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shapes("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::MeanAll(x), rg)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(oshape, out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            oshape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Cross-correlation of a `C_in×H×W` map with a `C_out×C_in×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::shapes("conv2d", &si, &sk));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (hp, wp) = (si[1] + 2 * padding, si[2] + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b).iter().product::<usize>() != c_out {
                return Err(Error::shapes("conv2d bias", &sk, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in: si[0],
            h: si[1],
            w: si[2],
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (hp - kh) / stride + 1,
            out_w: (wp - kw) / stride + 1,
        };
        let cols_n = geom.out_len();
        let mut out = vec![0.0; c_out * cols_n];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(cols_n).zip(self.value(b)) {
                row.fill(bv);
            }
        }
        let mut buf = Vec::new();
        let cols = im2col(self.value(input), &geom, &mut buf);
        gemm(
            c_out,
            geom.patch_len(),
            cols_n,
            Operand::plain(self.value(kernel), geom.patch_len()),
            Operand::plain(cols, cols_n),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![c_out, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Parameter("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = chw("upsample_nearest", self.shape(x))?;
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = v[(ch * h + i / factor) * w + j / factor];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample { x, factor }, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter("adaptive pool output extents must be positive".into()));
        }
        let (c, h, w) = chw("adaptive_avg_pool", self.shape(x))?;
        if out_h > h || out_w > w {
            return Err(Error::dim(
                "adaptive_avg_pool",
                format!("output {out_h}x{out_w} exceeds input {h}x{w}"),
            ));
        }
        let v = self.value(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for i in 0..out_h {
                let (r0, r1) = pool_window(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = pool_window(j, w, out_w);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += v[(ch * h + r) * w + c0..(ch * h + r) * w + c1].iter().sum::<f64>();
                    }
                    out[(ch * out_h + i) * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, out_h, out_w], out, Op::AdaptivePool(x), rg))
    }

    /// Bilinear resize with half-pixel centers (edge-clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter("resize output extents must be positive".into()));
        }
        let (c, h, w) = chw("resize_bilinear", self.shape(x))?;
        let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        let v = self.value(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &v[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * out_h + i) * out_w + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, out_h, out_w], out, Op::ResizeBilinear(x), rg))
    }

    /// Splits a `1×H×W` (or `H×W`) image into row-major non-overlapping
    /// `patch×patch` tiles, one flattened tile per output row.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (h, w) = match s.as_slice() {
            [1, h, w] | [h, w] => (*h, *w),
            _ => {
                return Err(Error::dim(
                    "patchify",
                    format!("expected a single-channel image, got {s:?}"),
                ))
            }
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim("patchify", format!("patch {patch} does not tile {h}x{w}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let v = self.value(x);
        let mut out = Vec::with_capacity(h * w);
        for pi in 0..gh {
            for pj in 0..gw {
                for r in 0..patch {
                    let row = (pi * patch + r) * w + pj * patch;
                    out.extend_from_slice(&v[row..row + patch]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![gh * gw, patch * patch], out, Op::Patchify { x, patch }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss` to every node and accumulates leaf gradients.
    ///
    /// Intermediate gradients live only for the duration of the call, so
    /// calling this twice adds the leaf gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Returns the gradient buffer of `v` if it takes part in differentiation.
        macro_rules! sink {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = sink!(*a) {
                    gemm(
                        m,
                        n,
                        k,
                        Operand::plain(g, n),
                        Operand::transposed(self.value(*b), n),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = sink!(*b) {
                    gemm(
                        k,
                        m,
                        n,
                        Operand::transposed(self.value(*a), k),
                        Operand::plain(g, n),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = sink!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = sink!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = sink!(*b) {
                    axpy(sign, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                if let Some(ga) = sink!(*a) {
                    for ((d, gi), bv) in ga.iter_mut().zip(g).zip(&vb) {
                        *d += gi * bv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for ((d, gi), av) in gb.iter_mut().zip(g).zip(&va) {
                        *d += gi * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if let Some(ga) = sink!(*a) {
                    for ((d, gi), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi / bv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (((d, gi), bv), o) in gb.iter_mut().zip(g).zip(vb).zip(out) {
                        *d -= gi * o / bv;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = sink!(*x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gr) = sink!(*row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = sink!(*x) {
                    axpy(*s, g, gx);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(gx) = sink!(*x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = sink!(*x) {
                    for ((d, gi), o) in gx.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                if let Some(gx) = sink!(*x) {
                    for ((d, gi), &v) in gx.iter_mut().zip(g).zip(vx) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = sink!(*x) {
                    for ((d, gi), o) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * o * (1.0 - o);
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x);
                if let Some(gx) = sink!(*x) {
                    for ((d, gi), v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gi * sign(*v);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis("softmax", &node.shape, *axis).expect("validated in forward");
                if let Some(gx) = sink!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = *node.shape.last().expect("non-empty");
                let vx = self.value(*x);
                let gam = self.value(*gamma).to_vec();
                let nf = n as f64;
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; vx.len()];
                for ((row, grow), drow) in vx.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, rstd) = row_stats(row);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                        let dxh = grow[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for j in 0..n {
                        let xh = (row[j] - mean) * rstd;
                        let dxh = grow[j] * gam[j];
                        drow[j] = rstd / nf * (nf * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                if let Some(gx) = sink!(*x) {
                    axpy(1.0, &dx, gx);
                }
                if let Some(gg) = sink!(*gamma) {
                    axpy(1.0, &dgamma, gg);
                }
                if let Some(gb) = sink!(*beta) {
                    axpy(1.0, &dbeta, gb);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = sink!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = sink!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Narrow { x, axis, start } => {
                let full_shape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis("narrow", &full_shape, *axis).expect("validated");
                let len = node.shape[*axis];
                if let Some(gx) = sink!(*x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        axpy(1.0, &g[o * len * inner..(o + 1) * len * inner], dst);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = sink!(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(1.0, src, &mut gp[o * len * inner..(o + 1) * len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let c_out = node.shape[0];
                let (pl, cols_n) = (geom.patch_len(), geom.out_len());
                if let Some(b) = bias {
                    if let Some(gb) = sink!(*b) {
                        for (d, row) in gb.iter_mut().zip(g.chunks(cols_n)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut buf = Vec::new();
                    let cols = im2col(self.value(*input), geom, &mut buf);
                    let gk = sink!(*kernel).expect("requires grad");
                    gemm(
                        c_out,
                        cols_n,
                        pl,
                        Operand::plain(g, cols_n),
                        Operand::transposed(cols, cols_n),
                        1.0,
                        gk,
                    );
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; pl * cols_n];
                    gemm(
                        pl,
                        c_out,
                        cols_n,
                        Operand::transposed(self.value(*kernel), pl),
                        Operand::plain(g, cols_n),
                        0.0,
                        &mut dcols,
                    );
                    let gi = sink!(*input).expect("requires grad");
                    col2im_add(&dcols, geom, gi);
                }
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = chw("upsample_nearest", self.shape(*x)).expect("validated");
                let (oh, ow) = (h * factor, w * factor);
                if let Some(gx) = sink!(*x) {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[(ch * h + i / factor) * w + j / factor] += g[(ch * oh + i) * ow + j];
                            }
                        }
                    }
                }
            }
            Op::AdaptivePool(x) => {
                let (c, h, w) = chw("adaptive_avg_pool", self.shape(*x)).expect("validated");
                let (oh, ow) = (node.shape[1], node.shape[2]);
                if let Some(gx) = sink!(*x) {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (r0, r1) = pool_window(i, h, oh);
                            for j in 0..ow {
                                let (c0, c1) = pool_window(j, w, ow);
                                let share = g[(ch * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    gx[(ch * h + r) * w + c0..(ch * h + r) * w + c1]
                                        .iter_mut()
                                        .for_each(|d| *d += share);
                                }
                            }
                        }
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                let (c, h, w) = chw("resize_bilinear", self.shape(*x)).expect("validated");
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
                if let Some(gx) = sink!(*x) {
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = g[(ch * oh + i) * ow + j];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, patch } => {
                let s = self.shape(*x);
                let w = s[s.len() - 1];
                let gw = w / patch;
                let plen = patch * patch;
                if let Some(gx) = sink!(*x) {
                    for (t, tile) in g.chunks(plen).enumerate() {
                        let (pi, pj) = (t / gw, t % gw);
                        for r in 0..*patch {
                            let row = (pi * patch + r) * w + pj * patch;
                            axpy(1.0, &tile[r * patch..(r + 1) * patch], &mut gx[row..row + patch]);
                        }
                    }
                }
            }
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::dim(op, format!("expected C×H×W, got {shape:?}"))),
    }
}
