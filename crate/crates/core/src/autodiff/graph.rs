use std::collections::HashMap;
use std::rc::Rc;

use num_complex::Complex;
use rand::Rng;

use super::tensor::{broadcast_repeats, ComplexTensor, Tensor};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::spectral::{half_len, irfft_kernel, rfft_kernel, sequence_layout, FftPlan};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Node payload: real or split-plane complex.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Scalar> Value<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => &t.shape,
            Value::Complex(c) => &c.shape,
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            Value::Real(t) => t.numel(),
            Value::Complex(c) => c.numel(),
        }
    }

    /// Number of real scalars held (complex entries count twice).
    pub fn real_len(&self) -> usize {
        match self {
            Value::Real(t) => t.numel(),
            Value::Complex(c) => 2 * c.numel(),
        }
    }

    /// Flat view of the `i`-th real scalar; complex values expose the real
    /// plane first, then the imaginary plane.
    pub fn get_flat(&self, i: usize) -> T {
        match self {
            Value::Real(t) => t.data[i],
            Value::Complex(c) => {
                if i < c.numel() {
                    c.re[i]
                } else {
                    c.im[i - c.numel()]
                }
            }
        }
    }

    pub fn set_flat(&mut self, i: usize, v: T) {
        match self {
            Value::Real(t) => t.data[i] = v,
            Value::Complex(c) => {
                let n = c.numel();
                if i < n {
                    c.re[i] = v
                } else {
                    c.im[i - n] = v
                }
            }
        }
    }
}

/// Elementwise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

/// Form of the recommendation loss evaluated by [`Graph::rec_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecLossForm {
    /// Binary cross-entropy summed over every non-padding item.
    #[default]
    BinarySum,
    /// Softmax cross-entropy `-log p_target`.
    NegLogLikelihood,
}

/// Probability clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Elementwise { kind: ElementwiseKind, a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Mean { a: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Gather { table: Var, indices: Vec<usize> },
    SelectPosition { x: Var, position: usize },
    Rfft { x: Var },
    Irfft { x: Var },
    Window { x: Var, w: Var, start: usize, end: usize },
    Softmax { x: Var },
    RecLoss { probs: Var, targets: Vec<usize>, form: RecLossForm },
    ClReg { a: Var, b: Var, tau: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
enum GradBuf<T> {
    Real(Vec<T>),
    Complex(Vec<T>, Vec<T>),
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and the backward sweep is a single
/// reverse pass.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<GradBuf<T>>>,
    backward_done: bool,
    plans: HashMap<usize, Rc<FftPlan<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false, plans: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn plan(&mut self, n: usize) -> Rc<FftPlan<T>> {
        self.plans.entry(n).or_insert_with(|| Rc::new(FftPlan::new(n))).clone()
    }

    // ---- leaves -------------------------------------------------------------

    /// Records a real leaf; gradients flow to it when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        self.push(Value::Real(tensor), Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.push(Value::Real(tensor), Op::Leaf, false)
    }

    pub fn complex_leaf(&mut self, tensor: ComplexTensor<T>, requires_grad: bool) -> Var {
        self.push(Value::Complex(tensor), Op::Leaf, requires_grad)
    }

    // ---- accessors ----------------------------------------------------------

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> Result<&Tensor<T>> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => bail!(Contract, "node {} is complex, expected real", v.0),
        }
    }

    pub fn complex(&self, v: Var) -> Result<&ComplexTensor<T>> {
        match &self.nodes[v.0].value {
            Value::Complex(c) => Ok(c),
            Value::Real(_) => bail!(Contract, "node {} is real, expected complex", v.0),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a real node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        match self.grads.get(v.0)?.as_ref()? {
            GradBuf::Real(g) => Some(g),
            GradBuf::Complex(..) => None,
        }
    }

    /// Gradient planes `(d/d re, d/d im)` of a complex node.
    pub fn complex_grad(&self, v: Var) -> Option<(&[T], &[T])> {
        match self.grads.get(v.0)?.as_ref()? {
            GradBuf::Complex(re, im) => Some((re, im)),
            GradBuf::Real(_) => None,
        }
    }

    /// Gradient of any node flattened like [`Value::get_flat`], zero-filled
    /// when no gradient reached it.
    pub fn flat_grad(&self, v: Var) -> Vec<T> {
        let len = self.nodes[v.0].value.real_len();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(GradBuf::Real(g)) => g.clone(),
            Some(GradBuf::Complex(re, im)) => re.iter().chain(im.iter()).copied().collect(),
            None => vec![T::zero(); len],
        }
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise --------------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = if broadcast_repeats(&sa, &sb).is_some() {
            sa.clone()
        } else if broadcast_repeats(&sb, &sa).is_some() {
            sb.clone()
        } else {
            bail!(Dimension, "shapes {:?} and {:?} are not broadcast-compatible", sa, sb);
        };
        let numel: usize = out_shape.iter().product();
        let value = match (&self.nodes[a.0].value, &self.nodes[b.0].value) {
            (Value::Real(x), Value::Real(y)) => {
                let f = |p: T, q: T| match kind {
                    ElementwiseKind::Add => p + q,
                    ElementwiseKind::Sub => p - q,
                    ElementwiseKind::Mul => p * q,
                };
                let mut data = Vec::with_capacity(numel);
                if numel > 0 {
                    // Suffix broadcasting: the smaller operand repeats once per chunk.
                    if x.numel() == numel {
                        for xc in x.data.chunks(y.numel()) {
                            data.extend(xc.iter().zip(&y.data).map(|(&p, &q)| f(p, q)));
                        }
                    } else {
                        for yc in y.data.chunks(x.numel()) {
                            data.extend(x.data.iter().zip(yc).map(|(&p, &q)| f(p, q)));
                        }
                    }
                }
                Value::Real(Tensor::new(out_shape, data)?)
            }
            (Value::Complex(x), Value::Complex(y)) => {
                let (nx, ny) = (x.numel(), y.numel());
                let mut out = ComplexTensor::zeros(&out_shape);
                for i in 0..numel {
                    let (p, q) = (x.get(i % nx), y.get(i % ny));
                    out.set(
                        i,
                        match kind {
                            ElementwiseKind::Add => p + q,
                            ElementwiseKind::Sub => p - q,
                            ElementwiseKind::Mul => p * q,
                        },
                    );
                }
                Value::Complex(out)
            }
            _ => bail!(Dimension, "cannot combine real and complex operands"),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Elementwise { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = match &self.nodes[a.0].value {
            Value::Real(x) => {
                Value::Real(Tensor::from_fn(&x.shape, |i| x.data[i] * factor))
            }
            Value::Complex(x) => Value::Complex(ComplexTensor {
                shape: x.shape.clone(),
                re: x.re.iter().map(|&v| v * factor).collect(),
                im: x.im.iter().map(|&v| v * factor).collect(),
            }),
        };
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, factor }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.real(a)?.data.iter().copied().sum();
        let needs = self.needs(a);
        Ok(self.push(Value::Real(Tensor::scalar(total)), Op::Sum { a }, needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        if x.numel() == 0 {
            bail!(Dimension, "mean of an empty tensor");
        }
        let m = x.data.iter().copied().sum::<T>() / T::lit(x.numel() as f64);
        let needs = self.needs(a);
        Ok(self.push(Value::Real(Tensor::scalar(m)), Op::Mean { a }, needs))
    }

    // ---- linear algebra -----------------------------------------------------

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.real(a)?;
        let y = self.real(b)?;
        if x.shape.is_empty() || y.shape.len() != 2 {
            bail!(Dimension, "matmul expects [..., k] x [k, n], got {:?} x {:?}", x.shape, y.shape);
        }
        let k = x.last_dim();
        if y.shape[0] != k {
            bail!(Dimension, "inner dimensions differ: {:?} x {:?}", x.shape, y.shape);
        }
        let n = y.shape[1];
        let m = x.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &x.data, &y.data, &mut out);
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Real(Tensor::new(shape, out)?), Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        if x.shape.len() != 2 {
            bail!(Dimension, "transpose expects a matrix, got {:?}", x.shape);
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        let data = transpose_buf(&x.data, r, c);
        let needs = self.needs(a);
        Ok(self.push(Value::Real(Tensor::new(vec![c, r], data)?), Op::Transpose { a }, needs))
    }

    // ---- normalization and activations -------------------------------------

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.real(x)?;
        let d = xv.last_dim();
        if d == 0 || xv.shape.is_empty() {
            bail!(Dimension, "layer norm over an empty dimension");
        }
        let gv = self.real(gain)?;
        let bv = self.real(bias)?;
        if gv.shape != [d] || bv.shape != [d] {
            bail!(Dimension, "gain/bias must be [{d}], got {:?} and {:?}", gv.shape, bv.shape);
        }
        let rows = xv.numel() / d;
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mu) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Value::Real(Tensor::new(shape, out)?),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            needs,
        ))
    }

    /// Exact GELU `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.real(x)?;
        let out = Tensor::from_fn(&xv.shape, |i| gelu(xv.data[i]));
        let needs = self.needs(x);
        Ok(self.push(Value::Real(out), Op::Gelu { x }, needs))
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate must lie in [0, 1), got {rate}");
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.real(x)?;
        let keep = T::lit(1.0 / (1.0 - rate));
        // Comparing raw 32-bit draws against a fixed threshold drops each
        // element with probability `rate` to within 2^-32.
        let threshold = (rate * 4294967296.0) as u64;
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if u64::from(rng.next_u32()) < threshold { T::zero() } else { keep })
            .collect();
        let out = Tensor::from_fn(&xv.shape, |i| xv.data[i] * mask[i]);
        let needs = self.needs(x);
        Ok(self.push(Value::Real(out), Op::Dropout { x, mask }, needs))
    }

    // ---- indexing -----------------------------------------------------------

    /// Row lookup `table[indices]`; the result has shape `index_shape + [d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = self.real(table)?;
        if t.shape.len() != 2 {
            bail!(Dimension, "lookup table must be a matrix, got {:?}", t.shape);
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            bail!(Dimension, "index shape {:?} does not match {} indices", index_shape, indices.len());
        }
        let (rows, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            bail!(Data, "index {bad} out of range for table with {rows} rows");
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        Ok(self.push(
            Value::Real(Tensor::new(shape, out)?),
            Op::Gather { table, indices: indices.to_vec() },
            needs,
        ))
    }

    /// Selects one position along the sequence axis of `[..., N, d]`.
    pub fn select_position(&mut self, x: Var, position: usize) -> Result<Var> {
        let xv = self.real(x)?;
        let (batch, n, d) = sequence_layout(&xv.shape)?;
        if xv.shape.len() < 2 || position >= n {
            bail!(Dimension, "position {position} outside sequence axis of {:?}", xv.shape);
        }
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let start = (b * n + position) * d;
            out.extend_from_slice(&xv.data[start..start + d]);
        }
        let mut shape = xv.shape.clone();
        shape.remove(shape.len() - 2);
        let needs = self.needs(x);
        Ok(self.push(Value::Real(Tensor::new(shape, out)?), Op::SelectPosition { x, position }, needs))
    }

    // ---- spectral -----------------------------------------------------------

    /// Half-spectrum along the sequence axis: `[..., N, d] -> [..., M, d]`.
    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let (batch, n, d) = sequence_layout(self.shape(x))?;
        let plan = self.plan(n);
        let xv = self.real(x)?;
        let m = half_len(n);
        let mut re = vec![T::zero(); batch * m * d];
        let mut im = vec![T::zero(); batch * m * d];
        rfft_kernel(&plan, &xv.data, batch, d, &mut re, &mut im);
        let mut shape = xv.shape.clone();
        let k = shape.len();
        shape[if k == 1 { 0 } else { k - 2 }] = m;
        let needs = self.needs(x);
        Ok(self.push(Value::Complex(ComplexTensor::new(shape, re, im)?), Op::Rfft { x }, needs))
    }

    /// Inverse of [`Graph::rfft`] back to length `n`.
    pub fn irfft(&mut self, x: Var, n: usize) -> Result<Var> {
        let (batch, m, d) = sequence_layout(self.shape(x))?;
        if n == 0 || m != half_len(n) {
            bail!(Contract, "{m} bins are inconsistent with signal length {n}");
        }
        let plan = self.plan(n);
        let xv = self.complex(x)?;
        let mut out = vec![T::zero(); batch * n * d];
        irfft_kernel(&plan, &xv.re, &xv.im, batch, d, &mut out);
        let mut shape = xv.shape.clone();
        let k = shape.len();
        shape[if k == 1 { 0 } else { k - 2 }] = n;
        let needs = self.needs(x);
        Ok(self.push(Value::Real(Tensor::new(shape, out)?), Op::Irfft { x }, needs))
    }

    /// `x[..., k, :] * w[k, :]` for `start <= k < end`, zero elsewhere.
    pub fn windowed_filter(&mut self, x: Var, w: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.complex(x)?;
        let wv = self.complex(w)?;
        let (batch, m, d) = sequence_layout(&xv.shape)?;
        if wv.shape != [m, d] {
            bail!(Dimension, "filter shape {:?} does not match spectrum bins [{m}, {d}]", wv.shape);
        }
        if start > end || end > m {
            bail!(Contract, "window [{start}, {end}) outside [0, {m})");
        }
        let mut out = ComplexTensor::zeros(&xv.shape);
        for b in 0..batch {
            for k in start..end {
                for c in 0..d {
                    let i = (b * m + k) * d + c;
                    out.set(i, xv.get(i) * wv.get(k * d + c));
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Value::Complex(out), Op::Window { x, w, start, end }, needs))
    }

    // ---- losses -------------------------------------------------------------

    /// Row-wise softmax over the last dimension. With `mask_first`, column 0
    /// (the padding item) is forced to probability zero.
    pub fn softmax(&mut self, x: Var, mask_first: bool) -> Result<Var> {
        let xv = self.real(x)?;
        let v = xv.last_dim();
        if v == 0 || (mask_first && v < 2) {
            bail!(Dimension, "softmax needs at least one unmasked column");
        }
        let rows = xv.numel() / v;
        let lo = usize::from(mask_first);
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * v..(r + 1) * v];
            let max = row[lo..].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in lo..v {
                let e = (row[c] - max).exp();
                out[r * v + c] = e;
                z += e;
            }
            for c in lo..v {
                out[r * v + c] /= z;
            }
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        Ok(self.push(Value::Real(Tensor::new(shape, out)?), Op::Softmax { x }, needs))
    }

    /// Batch mean of the recommendation loss over `[B, |V|]` probabilities.
    /// Column 0 is the padding item and never contributes.
    pub fn rec_loss(&mut self, probs: Var, targets: &[usize], form: RecLossForm) -> Result<Var> {
        let p = self.real(probs)?;
        if p.shape.len() != 2 || p.shape[0] != targets.len() {
            bail!(Dimension, "expected [{}, |V|] probabilities, got {:?}", targets.len(), p.shape);
        }
        let v = p.shape[1];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == 0 {
                bail!(Data, "target is the padding item");
            }
            if t >= v {
                bail!(Data, "target {t} outside vocabulary of {v}");
            }
            total += rec_loss_row(&p.data[r * v..(r + 1) * v], t, form);
        }
        let loss = total / T::lit(targets.len().max(1) as f64);
        let needs = self.needs(probs);
        Ok(self.push(
            Value::Real(Tensor::scalar(loss)),
            Op::RecLoss { probs, targets: targets.to_vec(), form },
            needs,
        ))
    }

    /// Symmetric in-batch contrastive regularizer between two `[B, d]` views.
    pub fn cl_reg(&mut self, a: Var, b: Var, tau: T) -> Result<Var> {
        let av = self.real(a)?;
        let bv = self.real(b)?;
        if av.shape.len() != 2 || av.shape != bv.shape {
            bail!(Dimension, "views must share a [B, d] shape, got {:?} and {:?}", av.shape, bv.shape);
        }
        let batch = av.shape[0];
        if batch < 2 {
            bail!(Config, "contrastive regularization needs B >= 2, got {batch}");
        }
        if tau <= T::zero() {
            bail!(Config, "temperature must be positive");
        }
        let (loss, _) = cl_reg_forward(&av.data, &bv.data, batch, av.shape[1], tau, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Real(Tensor::scalar(loss)), Op::ClReg { a, b, tau }, needs))
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of every node that depends on a gradient-tracked
    /// leaf. Fails on a non-scalar loss or a second call without
    /// [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            bail!(Contract, "backward already ran on this graph; reset gradients first");
        }
        let lv = self.real(loss)?;
        if lv.numel() != 1 {
            bail!(Contract, "loss must be a scalar, got shape {:?}", lv.shape);
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(GradBuf::Real(vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate_real(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(GradBuf::Real(buf)) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            slot => *slot = Some(GradBuf::Real(g)),
        }
    }

    fn accumulate_complex(&mut self, v: Var, re: Vec<T>, im: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(GradBuf::Complex(br, bi)) => {
                br.iter_mut().zip(re).for_each(|(b, x)| *b += x);
                bi.iter_mut().zip(im).for_each(|(b, x)| *b += x);
            }
            slot => *slot = Some(GradBuf::Complex(re, im)),
        }
    }

    fn accumulate(&mut self, v: Var, g: GradBuf<T>) {
        match g {
            GradBuf::Real(g) => self.accumulate_real(v, g),
            GradBuf::Complex(re, im) => self.accumulate_complex(v, re, im),
        }
    }

    fn propagate(&mut self, idx: usize, g: &GradBuf<T>) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.apply_rule(idx, &op, g);
        self.nodes[idx].op = op;
    }

    fn apply_rule(&mut self, idx: usize, op: &Op<T>, g: &GradBuf<T>) {
        match *op {
            Op::Leaf => {}
            Op::Elementwise { kind, a, b } => self.back_elementwise(kind, a, b, g),
            Op::Scale { a, factor } => {
                let scaled = match g {
                    GradBuf::Real(g) => GradBuf::Real(g.iter().map(|&v| v * factor).collect()),
                    GradBuf::Complex(re, im) => GradBuf::Complex(
                        re.iter().map(|&v| v * factor).collect(),
                        im.iter().map(|&v| v * factor).collect(),
                    ),
                };
                self.accumulate(a, scaled);
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate_real(a, vec![real_grad(g)[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel();
                let v = real_grad(g)[0] / T::lit(n as f64);
                self.accumulate_real(a, vec![v; n]);
            }
            Op::MatMul { a, b } => self.back_matmul(a, b, real_grad(g)),
            Op::Transpose { a } => {
                let s = self.shape(a).to_vec();
                let ga = transpose_buf(real_grad(g), s[1], s[0]);
                self.accumulate_real(a, ga);
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref inv_std } => {
                self.back_layer_norm(x, gain, bias, xhat, inv_std, real_grad(g))
            }
            Op::Gelu { x } => {
                let g = real_grad(g);
                let xv = &self.real(x).unwrap().data;
                let gx = xv.iter().zip(g).map(|(&v, &gi)| gi * gelu_derivative(v)).collect();
                self.accumulate_real(x, gx);
            }
            Op::Dropout { x, ref mask } => {
                let gx = real_grad(g).iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.accumulate_real(x, gx);
            }
            Op::Gather { table, ref indices } => {
                if !self.needs(table) {
                    return;
                }
                let g = real_grad(g);
                let shape = self.shape(table).to_vec();
                let d = shape[1];
                let mut gt = vec![T::zero(); shape[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[row * d + c];
                    }
                }
                self.accumulate_real(table, gt);
            }
            Op::SelectPosition { x, position } => {
                let g = real_grad(g);
                let (batch, n, d) = sequence_layout(self.shape(x)).unwrap();
                let mut gx = vec![T::zero(); batch * n * d];
                for b in 0..batch {
                    let start = (b * n + position) * d;
                    gx[start..start + d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                self.accumulate_real(x, gx);
            }
            Op::Rfft { x } => self.back_rfft(x, g),
            Op::Irfft { x } => self.back_irfft(x, idx, real_grad(g)),
            Op::Window { x, w, start, end } => self.back_window(x, w, start, end, g),
            Op::Softmax { x } => self.back_softmax(x, idx, real_grad(g)),
            Op::RecLoss { probs, ref targets, form } => {
                let scale = real_grad(g)[0] / T::lit(targets.len().max(1) as f64);
                let p = self.real(probs).unwrap();
                let v = p.shape[1];
                let mut gp = vec![T::zero(); p.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    rec_loss_row_grad(&p.data[r * v..(r + 1) * v], t, form, scale, &mut gp[r * v..(r + 1) * v]);
                }
                self.accumulate_real(probs, gp);
            }
            Op::ClReg { a, b, tau } => {
                let scale = real_grad(g)[0];
                let av = self.real(a).unwrap();
                let bv = self.real(b).unwrap();
                let (batch, d) = (av.shape[0], av.shape[1]);
                let (_, grads) = cl_reg_forward(&av.data, &bv.data, batch, d, tau, true);
                let (mut ga, mut gb) = grads.expect("gradient requested");
                ga.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= scale);
                self.accumulate_real(a, ga);
                self.accumulate_real(b, gb);
            }
        }
    }

    fn back_elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var, g: &GradBuf<T>) {
        let out_len = match g {
            GradBuf::Real(g) => g.len(),
            GradBuf::Complex(re, _) => re.len(),
        };
        for (operand, other, is_a) in [(a, b, true), (b, a, false)] {
            if !self.needs(operand) {
                continue;
            }
            let n = self.nodes[operand.0].value.numel();
            let grad = match (g, &self.nodes[other.0].value) {
                (GradBuf::Real(g), Value::Real(o)) => {
                    let negate = kind == ElementwiseKind::Sub && !is_a;
                    let mut buf = vec![T::zero(); n];
                    if out_len > 0 {
                        match kind {
                            ElementwiseKind::Add | ElementwiseKind::Sub => {
                                for gc in g.chunks(n) {
                                    buf.iter_mut().zip(gc).for_each(|(b, &v)| *b += v);
                                }
                            }
                            ElementwiseKind::Mul if n == out_len => {
                                for (bc, gc) in buf.chunks_mut(o.numel()).zip(g.chunks(o.numel())) {
                                    bc.iter_mut().zip(gc).zip(&o.data).for_each(|((b, &v), &w)| *b = v * w);
                                }
                            }
                            ElementwiseKind::Mul => {
                                for (gc, oc) in g.chunks(n).zip(o.data.chunks(n)) {
                                    buf.iter_mut().zip(gc).zip(oc).for_each(|((b, &v), &w)| *b += v * w);
                                }
                            }
                        }
                    }
                    if negate {
                        buf.iter_mut().for_each(|b| *b = -*b);
                    }
                    GradBuf::Real(buf)
                }
                (GradBuf::Complex(gr, gi), Value::Complex(o)) => {
                    let no = o.numel();
                    let mut br = vec![T::zero(); n];
                    let mut bi = vec![T::zero(); n];
                    for i in 0..out_len {
                        let gc = Complex::new(gr[i], gi[i]);
                        let contrib = match kind {
                            ElementwiseKind::Add => gc,
                            ElementwiseKind::Sub => if is_a { gc } else { -gc },
                            ElementwiseKind::Mul => gc * o.get(i % no).conj(),
                        };
                        br[i % n] += contrib.re;
                        bi[i % n] += contrib.im;
                    }
                    GradBuf::Complex(br, bi)
                }
                _ => unreachable!("operand kinds checked at record time"),
            };
            self.accumulate(operand, grad);
        }
    }

    fn back_matmul(&mut self, a: Var, b: Var, g: &[T]) {
        let av = self.real(a).unwrap();
        let bv = self.real(b).unwrap();
        let k = av.last_dim();
        let n = bv.shape[1];
        let m = av.numel() / k.max(1);
        let ga = if self.needs(a) {
            let mut ga = vec![T::zero(); m * k];
            gemm_nt(m, n, k, g, &bv.data, &mut ga);
            Some(ga)
        } else {
            None
        };
        let gb = if self.needs(b) {
            let mut gb = vec![T::zero(); k * n];
            gemm_tn(m, k, n, &av.data, g, &mut gb);
            Some(gb)
        } else {
            None
        };
        if let Some(ga) = ga {
            self.accumulate_real(a, ga);
        }
        if let Some(gb) = gb {
            self.accumulate_real(b, gb);
        }
    }

    fn back_layer_norm(&mut self, x: Var, gain: Var, bias: Var, xhat: &[T], inv_std: &[T], g: &[T]) {
        let gv = self.real(gain).unwrap().data.clone();
        let d = gv.len();
        let rows = xhat.len() / d;
        let dn = T::lit(d as f64);
        if self.needs(x) {
            let mut gx = vec![T::zero(); xhat.len()];
            for r in 0..rows {
                let base = r * d;
                let mut mean_g = T::zero();
                let mut mean_gx = T::zero();
                for c in 0..d {
                    let gh = g[base + c] * gv[c];
                    mean_g += gh;
                    mean_gx += gh * xhat[base + c];
                }
                mean_g /= dn;
                mean_gx /= dn;
                for c in 0..d {
                    let gh = g[base + c] * gv[c];
                    gx[base + c] = inv_std[r] * (gh - mean_g - xhat[base + c] * mean_gx);
                }
            }
            self.accumulate_real(x, gx);
        }
        if self.needs(gain) {
            let mut gg = vec![T::zero(); d];
            for r in 0..rows {
                for c in 0..d {
                    gg[c] += g[r * d + c] * xhat[r * d + c];
                }
            }
            self.accumulate_real(gain, gg);
        }
        if self.needs(bias) {
            let mut gb = vec![T::zero(); d];
            for r in 0..rows {
                for c in 0..d {
                    gb[c] += g[r * d + c];
                }
            }
            self.accumulate_real(bias, gb);
        }
    }

    fn back_rfft(&mut self, x: Var, g: &GradBuf<T>) {
        let GradBuf::Complex(gr, gi) = g else { unreachable!("rfft output is complex") };
        let (batch, n, d) = sequence_layout(self.shape(x)).unwrap();
        let m = half_len(n);
        let plan = self.plan(n);
        // Interior bins stand for a conjugate pair; halving them before the
        // inverse turns it into the adjoint of the truncated forward map.
        let mut re = gr.clone();
        let mut im = gi.clone();
        for b in 0..batch {
            for k in 0..m {
                if is_interior_bin(k, n) {
                    for c in 0..d {
                        let i = (b * m + k) * d + c;
                        re[i] /= T::lit(2.0);
                        im[i] /= T::lit(2.0);
                    }
                }
            }
        }
        let mut gx = vec![T::zero(); batch * n * d];
        irfft_kernel(&plan, &re, &im, batch, d, &mut gx);
        let scale = T::lit(n as f64);
        gx.iter_mut().for_each(|v| *v *= scale);
        self.accumulate_real(x, gx);
    }

    fn back_irfft(&mut self, x: Var, out: usize, g: &[T]) {
        let (batch, n, d) = sequence_layout(self.nodes[out].value.shape()).unwrap();
        let m = half_len(n);
        let plan = self.plan(n);
        let mut re = vec![T::zero(); batch * m * d];
        let mut im = vec![T::zero(); batch * m * d];
        rfft_kernel(&plan, g, batch, d, &mut re, &mut im);
        let inv_n = T::one() / T::lit(n as f64);
        for b in 0..batch {
            for k in 0..m {
                let interior = is_interior_bin(k, n);
                let w = if interior { T::lit(2.0) * inv_n } else { inv_n };
                for c in 0..d {
                    let i = (b * m + k) * d + c;
                    re[i] *= w;
                    // The inverse ignores imaginary parts of DC and Nyquist.
                    im[i] = if interior { im[i] * w } else { T::zero() };
                }
            }
        }
        self.accumulate_complex(x, re, im);
    }

    fn back_window(&mut self, x: Var, w: Var, start: usize, end: usize, g: &GradBuf<T>) {
        let GradBuf::Complex(gr, gi) = g else { unreachable!("window output is complex") };
        let xv = self.complex(x).unwrap();
        let wv = self.complex(w).unwrap();
        let (batch, m, d) = sequence_layout(&xv.shape).unwrap();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = need_x.then(|| ComplexTensor::<T>::zeros(&xv.shape));
        let mut gw = need_w.then(|| ComplexTensor::<T>::zeros(&wv.shape));
        for b in 0..batch {
            for k in start..end {
                for c in 0..d {
                    let i = (b * m + k) * d + c;
                    let gc = Complex::new(gr[i], gi[i]);
                    if let Some(gx) = gx.as_mut() {
                        gx.set(i, gc * wv.get(k * d + c).conj());
                    }
                    if let Some(gw) = gw.as_mut() {
                        let j = k * d + c;
                        let cur = gw.get(j);
                        gw.set(j, cur + gc * xv.get(i).conj());
                    }
                }
            }
        }
        if let Some(gx) = gx {
            self.accumulate_complex(x, gx.re, gx.im);
        }
        if let Some(gw) = gw {
            self.accumulate_complex(w, gw.re, gw.im);
        }
    }

    fn back_softmax(&mut self, x: Var, out: usize, g: &[T]) {
        let p = match &self.nodes[out].value {
            Value::Real(p) => p,
            Value::Complex(_) => unreachable!(),
        };
        let v = p.last_dim();
        let rows = p.numel() / v;
        let mut gx = vec![T::zero(); p.numel()];
        for r in 0..rows {
            let pr = &p.data[r * v..(r + 1) * v];
            let gr = &g[r * v..(r + 1) * v];
            let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for c in 0..v {
                gx[r * v + c] = pr[c] * (gr[c] - dot);
            }
        }
        self.accumulate_real(x, gx);
    }
}

fn real_grad<T>(g: &GradBuf<T>) -> &[T] {
    match g {
        GradBuf::Real(g) => g,
        GradBuf::Complex(..) => unreachable!("real op received a complex gradient"),
    }
}

fn is_interior_bin(k: usize, n: usize) -> bool {
    k != 0 && !(n % 2 == 0 && k == n / 2)
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-x * x * T::lit(0.5)).exp() / (T::TAU()).sqrt();
    cdf + x * pdf
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Loss of one probability row; index 0 (padding) is skipped.
pub(crate) fn rec_loss_row<T: Scalar>(p: &[T], target: usize, form: RecLossForm) -> T {
    match form {
        RecLossForm::NegLogLikelihood => -clamp_prob(p[target]).0.ln(),
        RecLossForm::BinarySum => {
            let mut acc = T::zero();
            for (i, &pi) in p.iter().enumerate().skip(1) {
                let (q, _) = clamp_prob(pi);
                acc += if i == target { q.ln() } else { (T::one() - q).ln() };
            }
            -acc
        }
    }
}

fn rec_loss_row_grad<T: Scalar>(p: &[T], target: usize, form: RecLossForm, scale: T, out: &mut [T]) {
    match form {
        RecLossForm::NegLogLikelihood => {
            let (q, clamped) = clamp_prob(p[target]);
            if !clamped {
                out[target] = -scale / q;
            }
        }
        RecLossForm::BinarySum => {
            for (i, &pi) in p.iter().enumerate().skip(1) {
                let (q, clamped) = clamp_prob(pi);
                if clamped {
                    continue;
                }
                out[i] = if i == target { -scale / q } else { scale / (T::one() - q) };
            }
        }
    }
}

type ViewGrads<T> = Option<(Vec<T>, Vec<T>)>;

/// Loss and (optionally) gradients of the symmetric contrastive term.
/// Rows `0..B` of the stacked matrix are the first view, `B..2B` the second;
/// row `r` pairs with `(r + B) mod 2B` and contrasts against every other row
/// of the batch except that partner.
pub(crate) fn cl_reg_forward<T: Scalar>(a: &[T], b: &[T], batch: usize, d: usize, tau: T, want_grad: bool) -> (T, ViewGrads<T>) {
    let rows = 2 * batch;
    let z: Vec<T> = a.iter().chain(b.iter()).copied().collect();
    let mut sim = vec![T::zero(); rows * rows];
    gemm_nt(rows, d, rows, &z, &z, &mut sim);
    sim.iter_mut().for_each(|s| *s /= tau);
    let inv_b = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let mut gsim = want_grad.then(|| vec![T::zero(); rows * rows]);
    for r in 0..rows {
        let pos = (r + batch) % rows;
        let row = &sim[r * rows..(r + 1) * rows];
        let negatives = (0..rows).filter(|&c| c != r && c != pos);
        let max = negatives.clone().map(|c| row[c]).fold(T::neg_infinity(), T::max);
        let z_neg: T = negatives.clone().map(|c| (row[c] - max).exp()).sum();
        loss += (max + z_neg.ln() - row[pos]) * inv_b;
        if let Some(gs) = gsim.as_mut() {
            gs[r * rows + pos] -= inv_b;
            for c in negatives {
                gs[r * rows + c] += (row[c] - max).exp() / z_neg * inv_b;
            }
        }
    }
    let grads = gsim.map(|gs| {
        let mut w = vec![T::zero(); rows * rows];
        for r in 0..rows {
            for c in 0..rows {
                w[r * rows + c] = (gs[r * rows + c] + gs[c * rows + r]) / tau;
            }
        }
        let mut gz = vec![T::zero(); rows * d];
        gemm_nn(rows, rows, d, &w, &z, &mut gz);
        let gb = gz.split_off(batch * d);
        (gz, gb)
    });
    (loss, grads)
}

/// `out += a[m,k] * b[k,n]`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    T::gemm_acc((m, k, n), (a, k as isize, 1), (b, n as isize, 1), (out, n as isize, 1));
}

/// `out += g[m,n] * b[k,n]^T`.
fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, g: &[T], b: &[T], out: &mut [T]) {
    T::gemm_acc((m, n, k), (g, n as isize, 1), (b, 1, n as isize), (out, k as isize, 1));
}

/// `out += a[m,k]^T * g[m,n]`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    T::gemm_acc((k, m, n), (a, 1, k as isize), (g, n as isize, 1), (out, n as isize, 1));
}

fn transpose_buf<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
