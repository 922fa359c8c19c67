use std::collections::HashMap;

use super::kernels::{self, PoolGeom, SpatialGeom, TemporalGeom};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Dims5, Real, Tensor, View};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Primitive op kinds, used for fault injection in gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    ConvSpatial,
    ConvTemporal,
    Relu,
    BatchNorm,
    GlobalPool,
    MaxPool,
    Linear,
    SoftmaxXent,
    Add,
    WeightedSum,
    FrameSubsample,
    Reshape,
}

/// Spatial axes selectable for global average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolAxes {
    pub l: bool,
    pub h: bool,
    pub w: bool,
}

impl PoolAxes {
    pub const SPATIAL: PoolAxes = PoolAxes { l: false, h: true, w: true };
    pub const SPATIOTEMPORAL: PoolAxes = PoolAxes { l: true, h: true, w: true };
}

/// Normalization statistics regime for one [`Tape::batch_norm`] call.
#[derive(Clone, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed by a train-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    ConvSpatial {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: SpatialGeom,
    },
    ConvTemporal {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: TemporalGeom,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalPool {
        x: Var,
        /// Output index of every input element.
        map: Vec<usize>,
        count: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    FrameSubsample {
        x: Var,
        stride: usize,
    },
    Reshape {
        x: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::ConvSpatial { .. } => OpKind::ConvSpatial,
            Op::ConvTemporal { .. } => OpKind::ConvTemporal,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::GlobalPool { .. } => OpKind::GlobalPool,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::Add { .. } => OpKind::Add,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::FrameSubsample { .. } => OpKind::FrameSubsample,
            Op::Reshape { .. } => OpKind::Reshape,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Linear record of a forward computation. Backward visits nodes in exact
/// reverse creation order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    fault: Option<(OpKind, T)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    /// Scales the input gradients produced by every op of `kind`. Only for
    /// exercising gradient checkers.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    /// Digest of every non-differentiable branch taken: ReLU input signs and
    /// max-pool winners. Two evaluations with equal digests lie on the same
    /// smooth piece of the loss.
    pub fn branch_digest(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Records a differentiable leaf not tied to a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Records parameter `id` once per tape; later calls return the same var.
    pub fn param(&mut self, id: usize, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_leaf(value.clone(), trainable, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// `(parameter id, var)` for every parameter recorded on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op.kind().unwrap())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(op, format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Frame-wise 2D convolution with `Cout×Cin×d×d` filters, zero padding.
    pub fn conv_spatial(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = Dims5::of("conv_spatial", self.shape(x))?;
        let &[cout, cin, d, d2] = self.shape(w) else {
            return Err(Error::shape("conv_spatial", format!("weight must be 4-D, got {:?}", self.shape(w))));
        };
        if d != d2 || d % 2 == 0 {
            return Err(Error::shape("conv_spatial", format!("kernel {d}×{d2} must be square and odd")));
        }
        if cin != xd.c {
            return Err(Error::shape("conv_spatial", format!("weight expects {cin} channels, input has {}", xd.c)));
        }
        self.check_bias("conv_spatial", b, cout)?;
        let geom = SpatialGeom::new(xd.h, xd.w, d, stride, pad).ok_or_else(|| {
            Error::shape("conv_spatial", format!("kernel {d} stride {stride} pad {pad} on {}×{}", xd.h, xd.w))
        })?;
        let mut out = kernels::conv_spatial_fwd(self.value(x).data(), &xd, self.value(w).data(), cout, &geom);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut out, self.value(b).data(), xd.n, xd.l * geom.ho * geom.wo);
        }
        let od = Dims5 { c: cout, h: geom.ho, w: geom.wo, ..xd };
        let value = Tensor::new(od.shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvSpatial { x, w, b, geom }, &inputs)
    }

    /// Point-wise temporal convolution with `Cout×Cin×t` filters.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = Dims5::of("conv_temporal", self.shape(x))?;
        let &[cout, cin, t] = self.shape(w) else {
            return Err(Error::shape("conv_temporal", format!("weight must be 3-D, got {:?}", self.shape(w))));
        };
        if t % 2 == 0 {
            return Err(Error::shape("conv_temporal", format!("temporal kernel {t} must be odd")));
        }
        if cin != xd.c {
            return Err(Error::shape("conv_temporal", format!("weight expects {cin} channels, input has {}", xd.c)));
        }
        self.check_bias("conv_temporal", b, cout)?;
        let geom = TemporalGeom::new(xd.l, t, stride, pad).ok_or_else(|| {
            Error::shape("conv_temporal", format!("kernel {t} exceeds padded length {}", xd.l + 2 * pad))
        })?;
        let mut out = kernels::conv_temporal_fwd(self.value(x).data(), &xd, self.value(w).data(), cout, &geom);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut out, self.value(b).data(), xd.n, geom.lo * xd.h * xd.w);
        }
        let od = Dims5 { c: cout, l: geom.lo, ..xd };
        let value = Tensor::new(od.shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvTemporal { x, w, b, geom }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Channel-wise normalization over the batch and all trailing axes.
    /// Returns the batch statistics in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch norm eps must be positive, got {eps}")));
        }
        let xd = Dims5::of("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [xd.c] || self.shape(beta) != [xd.c] {
            return Err(Error::shape("batch_norm", format!("affine parameters must have {} entries", xd.c)));
        }
        let spatial = xd.l * xd.h * xd.w;
        let eps = T::from_f64(eps);
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let (m, v) = kernels::channel_moments(xs, xd.n, xd.c, spatial);
                let stats = BatchStats { mean: m.clone(), var: v.clone(), count: xd.n * spatial };
                (m, v, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != xd.c || var.len() != xd.c {
                    return Err(Error::shape("batch_norm", "running statistics size mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::norm_apply(
            xs,
            xd.n,
            spatial,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(xd.shape(), y)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Arithmetic mean over the selected axes of an activation. Pooled axes
    /// are removed from the output shape.
    pub fn global_pool(&mut self, x: Var, axes: PoolAxes) -> Result<Var> {
        if !(axes.l || axes.h || axes.w) {
            return Err(Error::InvalidArgument("global_pool needs at least one axis".into()));
        }
        let xd = Dims5::of("global_pool", self.shape(x))?;
        let keep = |flag: bool, n: usize| if flag { 1 } else { n };
        let (ol, oh, ow) = (keep(axes.l, xd.l), keep(axes.h, xd.h), keep(axes.w, xd.w));
        let count = (xd.l / ol) * (xd.h / oh) * (xd.w / ow);
        let mut map = Vec::with_capacity(xd.numel());
        for n in 0..xd.n {
            for c in 0..xd.c {
                for l in 0..xd.l {
                    for h in 0..xd.h {
                        for w in 0..xd.w {
                            let (l, h, w) = (l % ol, h % oh, w % ow);
                            map.push((((n * xd.c + c) * ol + l) * oh + h) * ow + w);
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); xd.n * xd.c * ol * oh * ow];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let inv = T::one() / T::from_f64(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = Vec::new();
        if xd.batched {
            shape.push(xd.n);
        }
        shape.push(xd.c);
        for (flag, n) in [(axes.l, xd.l), (axes.h, xd.h), (axes.w, xd.w)] {
            if !flag {
                shape.push(n);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::GlobalPool { x, map, count }, &[x])
    }

    /// Per-frame spatial max pooling; the temporal axis is untouched.
    pub fn max_pool_spatial(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xd = Dims5::of("max_pool_spatial", self.shape(x))?;
        let geom = PoolGeom::new(xd.h, xd.w, k, stride, pad).ok_or_else(|| {
            Error::shape("max_pool_spatial", format!("window {k} stride {stride} pad {pad} on {}×{}", xd.h, xd.w))
        })?;
        let (y, argmax) = kernels::max_pool_fwd(self.value(x).data(), &xd, &geom);
        let od = Dims5 { h: geom.ho, w: geom.wo, ..xd };
        let value = Tensor::new(od.shape(), y)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// `y = W·x + b`. A rank-1 input is a single vector; otherwise the leading
    /// axis is the batch and the rest is flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[k, f] = self.shape(w) else {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {:?}", self.shape(w))));
        };
        if self.shape(b) != [k] {
            return Err(Error::shape("linear", format!("bias {:?} for {k} outputs", self.shape(b))));
        }
        let (rows, feat, out_shape) = match xs.len() {
            0 => return Err(Error::shape("linear", "scalar input")),
            1 => (1, xs[0], vec![k]),
            _ => (xs[0], xs[1..].iter().product(), vec![xs[0], k]),
        };
        if feat != f {
            return Err(Error::shape("linear", format!("weight expects {f} features, input has {feat}")));
        }
        let mut out = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            rows,
            f,
            k,
            T::one(),
            self.value(x).data(),
            View::new(0, f, 1),
            self.value(w).data(),
            View::new(0, 1, f),
            T::one(),
            &mut out,
            View::new(0, k, 1),
        );
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Linear { x, w, b, rows }, &[x, w, b])
    }

    /// Mean softmax cross-entropy over rows of `N×K` (or one `K` row).
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, k) = match shape.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(Error::shape("softmax_xent", format!("logits must be K or N×K, got {shape:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::shape("softmax_xent", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(rows * k);
        for (r, &y) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            loss += kernels::xent_row(row, y);
            probs.extend(kernels::softmax_row(row));
        }
        let value = Tensor::scalar(loss / T::from_f64(rows as f64));
        self.push(value, Op::SoftmaxXent { logits, probs, labels: labels.to_vec() }, &[logits])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// `Σ wᵢ·xᵢ` over single-element vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", format!("term has shape {:?}", self.shape(v))));
            }
            total += w * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, &inputs)
    }

    /// Keeps frames `0, s, 2s, …` of the temporal axis.
    pub fn frame_subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("frame stride must be positive".into()));
        }
        let xd = Dims5::of("frame_subsample", self.shape(x))?;
        let lo = xd.l.div_ceil(stride);
        let hw = xd.h * xd.w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(xd.n * xd.c * lo * hw);
        for nc in 0..xd.n * xd.c {
            for l in 0..lo {
                out.extend_from_slice(&src[(nc * xd.l + l * stride) * hw..][..hw]);
            }
        }
        let od = Dims5 { l: lo, ..xd };
        let value = Tensor::new(od.shape(), out)?;
        self.push(value, Op::FrameSubsample { x, stride }, &[x])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Reverse-mode pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            let factor = match (self.fault, node.op.kind()) {
                (Some((k, f)), Some(kind)) if k == kind => Some(f),
                _ => None,
            };
            for (v, mut dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(f) = factor {
                    dg.iter_mut().for_each(|x| *x *= f);
                }
                if !T::all_finite(&dg) {
                    return Err(Error::NonFinite(format!("gradient of {:?}", node.op.kind().unwrap())));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, &d)| *a += d),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::ConvSpatial { x, w, b, geom } => {
                let xd = Dims5::of("conv_spatial", self.shape(*x))?;
                let cout = self.shape(*w)[0];
                let (dx, dw) = kernels::conv_spatial_bwd(
                    self.value(*x).data(),
                    &xd,
                    self.value(*w).data(),
                    cout,
                    geom,
                    g,
                    self.needs(*x),
                );
                if let Some(b) = b {
                    out.push((*b, kernels::channel_bias_grad(g, cout, xd.n, xd.l * geom.ho * geom.wo)));
                }
                out.push((*w, dw));
                if self.needs(*x) {
                    out.push((*x, dx));
                }
            }
            Op::ConvTemporal { x, w, b, geom } => {
                let xd = Dims5::of("conv_temporal", self.shape(*x))?;
                let cout = self.shape(*w)[0];
                let (dx, dw) = kernels::conv_temporal_bwd(
                    self.value(*x).data(),
                    &xd,
                    self.value(*w).data(),
                    cout,
                    geom,
                    g,
                    self.needs(*x),
                );
                if let Some(b) = b {
                    out.push((*b, kernels::channel_bias_grad(g, cout, xd.n, geom.lo * xd.h * xd.w)));
                }
                out.push((*w, dw));
                if self.needs(*x) {
                    out.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xd = Dims5::of("batch_norm", self.shape(*x))?;
                let (dx, dgamma, dbeta) = kernels::norm_bwd(
                    g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    xd.n,
                    xd.l * xd.h * xd.w,
                    *batch_stats,
                );
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
                out.push((*x, dx));
            }
            Op::GlobalPool { x, map, count } => {
                let inv = T::one() / T::from_f64(*count as f64);
                out.push((*x, map.iter().map(|&o| g[o] * inv).collect()));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx[idx] += d;
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b, rows } => {
                let &[k, f] = self.shape(*w) else { unreachable!() };
                let rows = *rows;
                let mut dw = vec![T::zero(); k * f];
                gemm(k, rows, f, T::one(), g, View::new(0, 1, k), self.value(*x).data(), View::new(0, f, 1), T::zero(), &mut dw, View::new(0, f, 1));
                let mut db = vec![T::zero(); k];
                for r in 0..rows {
                    db.iter_mut().zip(&g[r * k..(r + 1) * k]).for_each(|(a, &d)| *a += d);
                }
                out.push((*w, dw));
                out.push((*b, db));
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * f];
                    gemm(rows, k, f, T::one(), g, View::new(0, k, 1), self.value(*w).data(), View::new(0, f, 1), T::zero(), &mut dx, View::new(0, f, 1));
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * k + y] -= scale;
                }
                out.push((*logits, dz));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    out.push((v, vec![g[0] * w]));
                }
            }
            Op::FrameSubsample { x, stride } => {
                let xd = Dims5::of("frame_subsample", self.shape(*x))?;
                let lo = xd.l.div_ceil(*stride);
                let hw = xd.h * xd.w;
                let mut dx = vec![T::zero(); xd.numel()];
                for nc in 0..xd.n * xd.c {
                    for l in 0..lo {
                        dx[(nc * xd.l + l * stride) * hw..][..hw].copy_from_slice(&g[(nc * lo + l) * hw..][..hw]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
        }
        Ok(out)
    }
}
