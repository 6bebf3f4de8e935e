use std::sync::Arc;

use super::kernels::{self, ConvGeometry, UpGeometry};
use super::{dims4, Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    MaxUnpool2d,
    Relu,
    Sigmoid,
    Concat,
    Add,
    BceLoss,
    Sum,
    WeightedSum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv2d_transpose",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::MaxUnpool2d => "max_unpool2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat_channels",
            OpKind::Add => "add",
            OpKind::BceLoss => "bce_loss",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 12] = [
            OpKind::Leaf,
            OpKind::Conv2d,
            OpKind::ConvTranspose2d,
            OpKind::MaxPool2d,
            OpKind::MaxUnpool2d,
            OpKind::Relu,
            OpKind::Sigmoid,
            OpKind::Concat,
            OpKind::Add,
            OpKind::BceLoss,
            OpKind::Sum,
            OpKind::WeightedSum,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `(k - 1) / 2`; needs an odd kernel.
    Same,
    Explicit(usize),
}

/// Argmax positions recorded by [`Graph::maxpool2d`], consumed by
/// [`Graph::max_unpool2d`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pooled_shape: [usize; 4],
    source_hw: (usize, usize),
    positions: Arc<[u32]>,
}

impl PoolIndices {
    pub fn new(pooled_shape: [usize; 4], source_hw: (usize, usize), positions: Vec<u32>) -> Result<Self> {
        let expect: usize = pooled_shape.iter().product();
        if positions.len() != expect {
            return Err(shape_err!(
                "{} pool indices given for pooled shape {pooled_shape:?}",
                positions.len()
            ));
        }
        let plane = source_hw.0 * source_hw.1;
        if let Some(bad) = positions.iter().find(|&&p| p as usize >= plane) {
            return Err(shape_err!("pool index {bad} outside a {source_hw:?} plane"));
        }
        Ok(PoolIndices {
            pooled_shape,
            source_hw,
            positions: positions.into(),
        })
    }

    pub fn pooled_shape(&self) -> [usize; 4] {
        self.pooled_shape
    }

    pub fn source_hw(&self) -> (usize, usize) {
        self.source_hw
    }

    /// Flat offset of each maximum inside its `H x W` source plane.
    pub fn positions(&self) -> &[u32] {
        &self.positions
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: UpGeometry },
    MaxPool2d { x: Var, idx: PoolIndices },
    MaxUnpool2d { x: Var, idx: PoolIndices, out_plane: usize },
    Relu(Var),
    Sigmoid(Var),
    Concat { a: Var, b: Var },
    Add(Var, Var),
    BceLoss { pred: Var, target: Var },
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::MaxUnpool2d { .. } => OpKind::MaxUnpool2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add(..) => OpKind::Add,
            Op::BceLoss { .. } => OpKind::BceLoss,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Probability clamp inside [`Graph::bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede the
/// operations that consume them and [`Graph::backward`] can walk the tape in
/// reverse.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(String, Var)>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Corrupts the backward rule of `kind` (scales its input gradients by
    /// 1.5). Used to confirm that gradient checks catch broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Binds a named `f32` parameter into the graph, converting to `T`.
    pub fn param(&mut self, name: &str, t: &Tensor<f32>) -> Var {
        let data = t.data().iter().map(|&v| T::from_single(v)).collect();
        let v = self.push(t.shape().to_vec(), data, Op::Leaf, t.requires_grad);
        self.bindings.push((name.to_string(), v));
        v
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (n, cin, h, w) = dims4(self.shape(x))?;
        let (cout, wcin, kh, kw) = dims4(self.shape(weight))?;
        if wcin != cin {
            return Err(shape_err!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                self.shape(bias)
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be at least 1".into()));
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(shape_err!(
                        "conv2d: \"same\" padding needs a square odd kernel, got {kh}x{kw}"
                    ));
                }
                (kh - 1) / 2
            }
            Padding::Explicit(p) => p,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(weight), self.value(bias), &geom);
        let rg = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, cout, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d { x, w: weight, b: bias, geom },
            rg,
        ))
    }

    /// Transposed convolution; `weight` is `[Cin, Cout, k, k]` and only
    /// `k == stride` is supported.
    pub fn conv2d_transpose(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (n, cin, h, w) = dims4(self.shape(x))?;
        let (wcin, cout, kh, kw) = dims4(self.shape(weight))?;
        if wcin != cin {
            return Err(shape_err!(
                "conv2d_transpose: input has {cin} channels but weight expects {wcin}"
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err!(
                "conv2d_transpose: bias shape {:?} does not match {cout} output channels",
                self.shape(bias)
            ));
        }
        if stride == 0 || kh != stride || kw != stride {
            return Err(Error::Unsupported(format!(
                "conv2d_transpose supports kernel == stride only, got kernel {kh}x{kw} with stride {stride}"
            )));
        }
        let geom = UpGeometry {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            stride,
        };
        let out = kernels::conv_transpose_forward(self.value(x), self.value(weight), self.value(bias), &geom);
        let rg = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, cout, h * stride, w * stride],
            out,
            Op::ConvTranspose2d { x, w: weight, b: bias, geom },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: Var) -> Result<(Var, PoolIndices)> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2d: spatial dims must be even, got {h}x{w}"));
        }
        let (out, positions) = kernels::maxpool2x2_forward(self.value(x), n * c, h, w);
        let idx = PoolIndices::new([n, c, h / 2, w / 2], (h, w), positions)?;
        let rg = self.needs(x);
        let v = self.push(vec![n, c, h / 2, w / 2], out, Op::MaxPool2d { x, idx: idx.clone() }, rg);
        Ok((v, idx))
    }

    pub fn max_unpool2d(&mut self, x: Var, indices: &PoolIndices, out_size: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if indices.pooled_shape != [n, c, h, w] {
            return Err(shape_err!(
                "max_unpool2d: input {:?} does not match pooled shape {:?}",
                [n, c, h, w],
                indices.pooled_shape
            ));
        }
        let (oh, ow) = out_size;
        if (oh, ow) != (2 * h, 2 * w) || indices.source_hw != (oh, ow) {
            return Err(shape_err!(
                "max_unpool2d: output {oh}x{ow} must be twice the pooled {h}x{w} and match the pooled source {:?}",
                indices.source_hw
            ));
        }
        let out_plane = oh * ow;
        if let Some(bad) = indices.positions.iter().find(|&&p| p as usize >= out_plane) {
            return Err(shape_err!(
                "max_unpool2d: index {bad} out of range for a {oh}x{ow} plane"
            ));
        }
        let out = kernels::scatter_planes(self.value(x), &indices.positions, h * w, out_plane);
        let rg = self.needs(x);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            Op::MaxUnpool2d { x, idx: indices.clone(), out_plane },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.needs(x));
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.needs(x));
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.shape(a))?;
        let (nb, cb, hb, wb) = dims4(self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a)[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&self.value(b)[i * sb..(i + 1) * sb]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Mean binary cross-entropy. `pred` is clamped to `[eps, 1 - eps]`;
    /// `target` is treated as a constant.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err!(
                "bce_loss: prediction {:?} and target {:?} differ",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let total: f64 = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let p = p.as_f64().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = T::from_f64_lossy(total / p.len() as f64);
        let rg = self.needs(pred);
        Ok(self.push(vec![1], vec![loss], Op::BceLoss { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(x);
        self.push(vec![1], vec![T::from_f64_lossy(total)], Op::Sum(x), rg)
    }

    /// `sum_i weights[i] * x[i]`, accumulated in `f64`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            ));
        }
        let total: f64 = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(v, w)| v.as_f64() * w.as_f64())
            .sum();
        let rg = self.needs(x);
        Ok(self.push(
            vec![1],
            vec![T::from_f64_lossy(total)],
            Op::WeightedSum { x, weights },
            rg,
        ))
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls; see [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let scale = if self.fault == Some(node.op.kind()) {
                T::from_f64_lossy(1.5)
            } else {
                T::one()
            };
            let mut emit = |v: Var, mut delta: Vec<T>| {
                if scale != T::one() {
                    delta.iter_mut().for_each(|d| *d = *d * scale);
                }
                accumulate(&mut pending[v.0], delta);
            };
            match &node.op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    accumulate(&mut node.grad, dy);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let want = [self.needs(*x), self.needs(*w), self.needs(*b)];
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &dy, geom, want);
                    for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                        if let Some(d) = d {
                            emit(v, d);
                        }
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let want = [self.needs(*x), self.needs(*w), self.needs(*b)];
                    let (dx, dw, db) =
                        kernels::conv_transpose_backward(self.value(*x), self.value(*w), &dy, geom, want);
                    for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                        if let Some(d) = d {
                            emit(v, d);
                        }
                    }
                }
                Op::MaxPool2d { x, idx } => {
                    if self.needs(*x) {
                        let [_, _, h, w] = idx.pooled_shape;
                        let (sh, sw) = idx.source_hw;
                        emit(*x, kernels::scatter_planes(&dy, &idx.positions, h * w, sh * sw));
                    }
                }
                Op::MaxUnpool2d { x, idx, out_plane } => {
                    if self.needs(*x) {
                        let [_, _, h, w] = idx.pooled_shape;
                        emit(*x, kernels::gather_planes(&dy, &idx.positions, h * w, *out_plane));
                    }
                }
                Op::Relu(x) => {
                    let d = self
                        .value(*x)
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    emit(*x, d);
                }
                Op::Sigmoid(x) => {
                    let d = node
                        .value
                        .iter()
                        .zip(&dy)
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    emit(*x, d);
                }
                Op::Concat { a, b } => {
                    let (n, _, h, w) = dims4(&node.shape)?;
                    let ca = self.shape(*a)[1] * h * w;
                    let cb = self.shape(*b)[1] * h * w;
                    if self.needs(*a) {
                        let d = (0..n).flat_map(|k| dy[k * (ca + cb)..k * (ca + cb) + ca].iter().copied()).collect();
                        emit(*a, d);
                    }
                    if self.needs(*b) {
                        let d = (0..n)
                            .flat_map(|k| dy[k * (ca + cb) + ca..(k + 1) * (ca + cb)].iter().copied())
                            .collect();
                        emit(*b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        emit(*a, dy.clone());
                    }
                    if self.needs(*b) {
                        emit(*b, dy);
                    }
                }
                Op::BceLoss { pred, target } => {
                    let g = dy[0];
                    let count = T::from_usize(self.value(*pred).len()).unwrap_or_else(T::one);
                    let lo = T::from_f64_lossy(BCE_EPSILON);
                    let hi = T::one() - lo;
                    let d = self
                        .value(*pred)
                        .iter()
                        .zip(self.value(*target))
                        .map(|(&p, &t)| {
                            let p = p.max(lo).min(hi);
                            g * (p - t) / (p * (T::one() - p) * count)
                        })
                        .collect();
                    emit(*pred, d);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    emit(*x, vec![dy[0]; len]);
                }
                Op::WeightedSum { x, weights } => {
                    emit(*x, weights.iter().map(|&w| w * dy[0]).collect());
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a = *a + *d),
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_pixel_conv() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let w = g.leaf(&t(&[1, 1, 1, 1], &[3.0]));
        let b = g.leaf(&t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, Padding::Explicit(0)).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn identity_kernel_with_same_padding() {
        let data: Vec<f32> = (0..25).map(|v| v as f32 * 0.1 - 1.0).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 1, 5, 5], &data));
        let w = g.leaf(&t(&[1, 1, 3, 3], &kernel));
        let b = g.leaf(&t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &data[..]);
        assert_eq!(g.shape(y), &[1, 1, 5, 5]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 2, 4, 4], &[0.0; 32]));
        let w = g.leaf(&t(&[1, 3, 3, 3], &[0.0; 27]));
        let b = g.leaf(&t(&[1], &[0.0]));
        assert!(matches!(g.conv2d(x, w, b, 1, Padding::Same), Err(Error::Shape(_))));
        let w2 = g.leaf(&t(&[1, 2, 2, 2], &[0.0; 8]));
        assert!(g.conv2d(x, w2, b, 1, Padding::Same).is_err());
        let w3 = g.leaf(&t(&[1, 2, 3, 3], &[0.0; 18]));
        assert!(g.conv2d(x, w3, b, 0, Padding::Same).is_err());
    }

    #[test]
    fn transpose_conv_stamps_disjoint_blocks() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let w = g.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = g.leaf(&t(&[1], &[0.0]));
        let y = g.conv2d_transpose(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert_eq!(g.value(y), &[1.0; 16]);
    }

    #[test]
    fn transpose_conv_rejects_kernel_other_than_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let w = g.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = g.leaf(&t(&[1], &[0.0]));
        assert!(matches!(g.conv2d_transpose(x, w, b, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn maxpool_single_window_and_odd_rejection() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let (y, idx) = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y), &[4.0]);
        assert_eq!(idx.positions(), &[3]);
        let odd = g.leaf(&t(&[1, 1, 3, 2], &[0.0; 6]));
        assert!(g.maxpool2d(odd).is_err());
    }

    #[test]
    fn unpool_round_trip_and_range_check() {
        let mut g = Graph::<f32>::new();
        let data = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, 0.0, 0.0, 2.0, 8.0, 7.0, 6.0, 1.0, 1.0];
        let x = g.leaf(&t(&[1, 1, 4, 4], &data));
        let (p, idx) = g.maxpool2d(x).unwrap();
        let u = g.max_unpool2d(p, &idx, (4, 4)).unwrap();
        let expect = [0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 8.0, 7.0, 0.0, 0.0, 0.0];
        assert_eq!(g.value(u), &expect);

        let zeros = g.constant([1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let uz = g.max_unpool2d(zeros, &idx, (4, 4)).unwrap();
        assert!(g.value(uz).iter().all(|&v| v == 0.0));

        assert!(PoolIndices::new([1, 1, 2, 2], (4, 4), vec![0, 1, 2, 16]).is_err());
        let other = PoolIndices::new([1, 1, 2, 2], (5, 5), vec![0, 1, 2, 24]).unwrap();
        assert!(g.max_unpool2d(p, &other, (4, 4)).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant([1], vec![0.0]).unwrap();
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn concat_shapes_and_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant([1, 2, 4, 4], vec![1.0; 32]).unwrap();
        let b = g.constant([1, 3, 4, 4], vec![2.0; 48]).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 4, 4]);
        assert!(g.value(c)[..32].iter().all(|&v| v == 1.0));
        assert!(g.value(c)[32..].iter().all(|&v| v == 2.0));
        let d = g.constant([1, 3, 2, 2], vec![0.0; 12]).unwrap();
        assert!(g.concat_channels(a, d).is_err());
        assert!(g.constant([1, 0, 4, 4], vec![]).is_err());
    }

    #[test]
    fn bce_analytic_values() {
        let mut g = Graph::<f32>::new();
        let p = g.constant([1], vec![0.5]).unwrap();
        let tg = g.constant([1], vec![1.0]).unwrap();
        let l = g.bce_loss(p, tg).unwrap();
        assert!((g.value(l)[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let p = g.constant([4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = g.bce_loss(p, p).unwrap();
        assert!(g.value(l)[0] >= 0.0);
        assert!(g.value(l)[0] <= 1.1e-7);

        let q = g.constant([3], vec![0.5; 3]).unwrap();
        assert!(g.bce_loss(p, q).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&t(&[2, 3], &[0.5; 6]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        // second pass accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn chain_rule_through_sigmoid_and_bce() {
        // loss = bce(sigmoid(w * x), t)  =>  dL/dw = (sigmoid(w x) - t) * x
        let (wv, xv, tv) = (0.7f32, 1.3f32, 1.0f32);
        let mut g = Graph::<f32>::new();
        let x = g.constant([1, 1, 1, 1], vec![xv]).unwrap();
        let w = g.leaf(&t(&[1, 1, 1, 1], &[wv]).with_grad());
        let b = g.constant([1], vec![0.0]).unwrap();
        let z = g.conv2d(x, w, b, 1, Padding::Explicit(0)).unwrap();
        let p = g.sigmoid(z);
        let target = g.constant([1, 1, 1, 1], vec![tv]).unwrap();
        let l = g.bce_loss(p, target).unwrap();
        g.backward(l).unwrap();
        let s = 1.0 / (1.0 + (-(wv * xv)).exp());
        let expect = (s - tv) * xv;
        assert!((g.grad(w).unwrap()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }
}
