use super::kernels::{col2im_acc, im2col, mm_acc, mm_nt_acc, mm_tn_acc, sigmoid};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};
use crate::quant::QuantScheme;

/// Lower clamp applied to every `log` input.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rectangular averaging window `[y0, y1) × [x0, x1)` in feature-map cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Window {
    fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum { x: Var, axes: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    TransposeLast2(Var),
    Softmax(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    Conv2d { x: Var, w: Var, b: Option<Var> },
    AvgPool2d { x: Var, factor: usize },
    ScaleChannels { x: Var, s: Var },
    RoiPool { x: Var, bins: Vec<Window> },
    PairSymmetrize { x: Var, persons: usize },
    FakeQuant { x: Var, scheme: QuantScheme },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Backward walks it in exact reverse
/// order and accumulates into gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix_dims<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

fn chw<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "{op}: expected C×H×W, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_axes(op: &str, rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
        return Err(Error::shape(format!(
            "{op}: invalid axes {axes:?} for rank {rank}"
        )));
    }
    Ok(sorted)
}

/// Maps every flat input index to the flat index of the reduced output.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(a, _)| !axes.contains(a))
        .map(|(_, &e)| e)
        .collect();
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut flat = 0;
        let mut o = 0;
        for (axis, &i) in idx.iter().enumerate() {
            if !axes.contains(&axis) {
                flat += i * out_strides[o];
                o += 1;
            }
        }
        map.push(flat);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    (out_shape, map)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log with the input clamped below at [`LOG_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        self.unary(x, |v| v.max(eps).ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents differ for {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x[n×in] · w[out×in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fan_in) = matrix_dims("linear", self.value(x))?;
        let (fan_out, w_in) = matrix_dims("linear", self.value(w))?;
        if fan_in != w_in {
            return Err(Error::shape(format!(
                "linear: input {:?} does not match weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let mut out = vec![T::zero(); n * fan_out];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fan_out] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} does not match {fan_out} outputs",
                    bias.shape()
                )));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias.data());
            }
        }
        mm_nt_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            n,
            fan_in,
            fan_out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, fan_out], out)?,
            Op::Linear { x, w, b },
            rg,
        ))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let axes = check_axes("sum", self.value(x).rank(), axes)?;
        let (out_shape, map) = reduction_map(self.shape(x), &axes);
        let mut out = Tensor::zeros(&out_shape);
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out.data_mut()[o] += v;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum { x, axes }, rg))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let axes = check_axes("mean", self.value(x).rank(), axes)?;
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let (out_shape, map) = reduction_map(self.shape(x), &axes);
        let mut out = Tensor::zeros(&out_shape);
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out.data_mut()[o] += v;
        }
        let denom = T::lit(count as f64);
        for v in out.data_mut() {
            *v = *v / denom;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean { x, axes }, rg))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat: no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat: invalid axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    s, base
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(format!(
                "slice: range {start}..{end} on axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = (end - start) * inner;
        let row = shape[axis] * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * row + start * inner;
            data.extend_from_slice(&src[base..base + len]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "transpose: rank {} has no last two axes",
                shape.len()
            )));
        }
        let out = transpose_last2(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::TransposeLast2(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax: rank-0 input"))?;
        let mut out = v.clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    z += *e;
                }
                for e in row.iter_mut() {
                    *e = *e / z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Row gather on a matrix. `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); index.len() * cols];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(Error::shape(format!(
                        "gather_rows: row {i} out of range for {rows} rows"
                    )));
                }
                data[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Stride-1 "same" convolution: `x[C×H×W]`, `w[O×C×k×k]` (odd k), `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = chw("conv2d", self.value(x))?;
        let (o, wc, k) = match *self.shape(w) {
            [o, wc, k1, k2] if k1 == k2 && k1 % 2 == 1 => (o, wc, k1),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: weight shape {:?} is not O×C×k×k with odd k",
                    self.shape(w)
                )))
            }
        };
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d: input {:?} has {c} channels, weight {:?} expects {wc}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let hw = h * wd;
        let mut out = vec![T::zero(); o * hw];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {o} filters",
                    self.shape(b)
                )));
            }
            for (row, &bias) in out.chunks_mut(hw).zip(self.value(b).data()) {
                row.fill(bias);
            }
        }
        let cols = im2col(self.value(x).data(), c, h, wd, k);
        mm_acc(self.value(w).data(), &cols, &mut out, o, c * k * k, hw);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![o, h, wd], out)?,
            Op::Conv2d { x, w, b },
            rg,
        ))
    }

    /// Non-overlapping `factor×factor` average pooling on `C×H×W`.
    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = chw("avg_pool2d", self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "avg_pool2d: extents {h}×{w} not divisible by {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        let inv = T::lit(1.0 / (factor * factor) as f64);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / factor) * ow + xx / factor] += src[(ch * h + y) * w + xx];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::AvgPool2d { x, factor },
            rg,
        ))
    }

    /// `y[c, ..] = x[c, ..] · s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = chw("scale_channels", self.value(x))?;
        if self.shape(s) != [c] {
            return Err(Error::shape(format!(
                "scale_channels: scale {:?} does not match {c} channels",
                self.shape(s)
            )));
        }
        let hw = h * w;
        let scales = self.value(s).data();
        let mut out = self.value(x).clone();
        for (plane, &sc) in out.data_mut().chunks_mut(hw).zip(scales) {
            for v in plane {
                *v *= sc;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Averages `x[C×H×W]` over each window; output is `[C·bins]`, channel-major.
    pub fn roi_pool(&mut self, x: Var, bins: &[Window]) -> Result<Var> {
        let (c, h, w) = chw("roi_pool", self.value(x))?;
        for b in bins {
            if b.y0 >= b.y1 || b.x0 >= b.x1 || b.y1 > h || b.x1 > w {
                return Err(Error::shape(format!(
                    "roi_pool: window {b:?} invalid for {h}×{w} map"
                )));
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * bins.len());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for b in bins {
                let mut acc = T::zero();
                for y in b.y0..b.y1 {
                    for xx in b.x0..b.x1 {
                        acc += plane[y * w + xx];
                    }
                }
                out.push(acc / T::lit(b.area() as f64));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::RoiPool {
                x,
                bins: bins.to_vec(),
            },
            rg,
        ))
    }

    /// `x[P²×C]` with rows indexed `i·P + j`. Each unordered pair's sum
    /// `x[ij] + x[ji]` is computed once and written to both slots.
    pub fn pair_symmetrize(&mut self, x: Var, persons: usize) -> Result<Var> {
        let (rows, c) = matrix_dims("pair_symmetrize", self.value(x))?;
        if rows != persons * persons {
            return Err(Error::shape(format!(
                "pair_symmetrize: {rows} rows is not {persons}²"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        for i in 0..persons {
            for j in i..persons {
                let (a, b) = (i * persons + j, j * persons + i);
                for k in 0..c {
                    let s = src[a * c + k] + src[b * c + k];
                    out[a * c + k] = s;
                    out[b * c + k] = s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::PairSymmetrize { x, persons },
            rg,
        ))
    }

    /// Quantize-dequantize with a straight-through backward pass.
    pub fn fake_quant(&mut self, x: Var, scheme: QuantScheme) -> Var {
        let out = self.value(x).map(|v| T::lit(scheme.fake_quant(v.as_f64())));
        let rg = self.rg(x);
        self.push(out, Op::FakeQuant { x, scheme }, rg)
    }

    /// Which side of every kink each piecewise input sits on: ReLU sign,
    /// clamp and log-floor activity. Two forwards with equal patterns lie in
    /// the same linear piece of those ops.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => bits.extend(self.value(x).data().iter().map(|&v| v > T::zero())),
                Op::Log(x) => {
                    bits.extend(self.value(x).data().iter().map(|&v| v > T::lit(LOG_EPS)))
                }
                Op::Clamp(x, lo, hi) => bits.extend(
                    self.value(x)
                        .data()
                        .iter()
                        .flat_map(|&v| [v >= lo, v <= hi]),
                ),
                _ => {}
            }
        }
        bits
    }

    /// Reverse-mode sweep from a single-element `root`, seeded with 1.
    /// Gradients accumulate into existing buffers until [`Tape::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward: root must hold one value, has shape {:?}",
                self.shape(root)
            )));
        }
        let seed = Tensor::full(self.shape(root), T::one());
        self.backward_with(root, seed)
    }

    /// Reverse-mode sweep with an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        same_shape("backward", self.value(root), &seed)?;
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        // interior buffers hold the previous sweep's values; only leaves accumulate
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        accumulate(&mut self.grads, root, seed);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[id].value;

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |d, y| d * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |d, x| d * x));
                }
            }
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|d| d * s));
            }
            Op::Neg(x) => accumulate(grads, *x, g.map(|d| -d)),
            Op::Relu(x) => accumulate(
                grads,
                *x,
                zip_map(g, val(*x), |d, v| if v > T::zero() { d } else { T::zero() }),
            ),
            Op::Sigmoid(x) => accumulate(grads, *x, zip_map(g, out, |d, y| d * y * (T::one() - y))),
            Op::Log(x) => {
                let eps = T::lit(LOG_EPS);
                accumulate(
                    grads,
                    *x,
                    zip_map(g, val(*x), |d, v| if v > eps { d / v } else { T::zero() }),
                );
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *x,
                    zip_map(
                        g,
                        val(*x),
                        |d, v| {
                            if v > lo && v < hi {
                                d
                            } else {
                                T::zero()
                            }
                        },
                    ),
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm_nt_acc(g.data(), val(*b).data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm_tn_acc(val(*a).data(), g.data(), &mut db, k, m, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let fan_out = val(*w).shape()[0];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * fan_in];
                    mm_acc(g.data(), val(*w).data(), &mut dx, n, fan_out, fan_in);
                    accumulate(grads, *x, Tensor::new(vec![n, fan_in], dx)?);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    mm_tn_acc(g.data(), val(*x).data(), &mut dw, fan_out, n, fan_in);
                    accumulate(grads, *w, Tensor::new(vec![fan_out, fan_in], dw)?);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (acc, &d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let shape = val(*x).shape();
                let (_, map) = reduction_map(shape, axes);
                let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                    let count: usize = axes.iter().map(|&a| shape[a]).product();
                    T::one() / T::lit(count as f64)
                } else {
                    T::one()
                };
                let data = map.iter().map(|&o| g.data()[o] * scale).collect();
                accumulate(grads, *x, Tensor::new(shape.to_vec(), data)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vshape = val(v).shape().to_vec();
                    let len = vshape[*axis] * inner;
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g.data()[base..base + len]);
                        }
                        accumulate(grads, v, Tensor::new(vshape, d)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let len = out.shape()[*axis] * inner;
                let mut d = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = o * row + start * inner;
                    d.data_mut()[base..base + len]
                        .copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                }
                accumulate(grads, *x, d);
            }
            Op::TransposeLast2(x) => accumulate(grads, *x, transpose_last2(g)),
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(out.numel());
                if d > 0 {
                    for (y, dy) in out.data().chunks(d).zip(g.data().chunks(d)) {
                        let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                        dx.extend(y.iter().zip(dy).map(|(&a, &b)| a * (b - dot)));
                    }
                }
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::GatherRows { x, index } => {
                let shape = val(*x).shape().to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        for (acc, &v) in d.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src)
                        {
                            *acc += v;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b } => {
                let (c, h, wd) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let (o, k) = (val(*w).shape()[0], val(*w).shape()[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                if wants(*w) {
                    let cols = im2col(val(*x).data(), c, h, wd, k);
                    let mut dw = vec![T::zero(); o * ckk];
                    mm_nt_acc(g.data(), &cols, &mut dw, o, hw, ckk);
                    accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    mm_tn_acc(val(*w).data(), g.data(), &mut dcols, ckk, o, hw);
                    let mut dx = vec![T::zero(); c * hw];
                    col2im_acc(&dcols, &mut dx, c, h, wd, k);
                    accumulate(grads, *x, Tensor::new(vec![c, h, wd], dx)?);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let db = g
                        .data()
                        .chunks(hw)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            Op::AvgPool2d { x, factor } => {
                let shape = val(*x).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / factor, w / factor);
                let inv = T::lit(1.0 / (factor * factor) as f64);
                let mut d = Tensor::zeros(&shape);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            d.data_mut()[(ch * h + y) * w + xx] =
                                g.data()[(ch * oh + y / factor) * ow + xx / factor] * inv;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ScaleChannels { x, s } => {
                let shape = val(*x).shape().to_vec();
                let hw = shape[1] * shape[2];
                if wants(*x) {
                    let mut d = g.clone();
                    for (plane, &sc) in d.data_mut().chunks_mut(hw).zip(val(*s).data()) {
                        for v in plane {
                            *v *= sc;
                        }
                    }
                    accumulate(grads, *x, d);
                }
                if wants(*s) {
                    let ds = g
                        .data()
                        .chunks(hw)
                        .zip(val(*x).data().chunks(hw))
                        .map(|(dp, xp)| dp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::from_vec(ds));
                }
            }
            Op::RoiPool { x, bins } => {
                let shape = val(*x).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut d = Tensor::zeros(&shape);
                for ch in 0..c {
                    for (bi, b) in bins.iter().enumerate() {
                        let share = g.data()[ch * bins.len() + bi] / T::lit(b.area() as f64);
                        for y in b.y0..b.y1 {
                            for xx in b.x0..b.x1 {
                                d.data_mut()[(ch * h + y) * w + xx] += share;
                            }
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::PairSymmetrize { x, persons } => {
                let p = *persons;
                let c = out.shape()[1];
                let mut d = vec![T::zero(); p * p * c];
                for i in 0..p {
                    for j in 0..p {
                        let (a, b) = (i * p + j, j * p + i);
                        for k in 0..c {
                            d[a * c + k] += g.data()[a * c + k];
                            d[b * c + k] += g.data()[a * c + k];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![p * p, c], d)?);
            }
            Op::FakeQuant { x, scheme } => accumulate(
                grads,
                *x,
                zip_map(g, val(*x), |d, v| {
                    if scheme.in_range(v.as_f64()) {
                        d
                    } else {
                        T::zero()
                    }
                }),
            ),
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch: usize = shape[..r - 2].iter().product();
    let mut data = vec![T::zero(); t.numel()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[base + j * rows + i] = t.data()[base + i * cols + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    Tensor::new(out_shape, data).expect("same element count")
}
