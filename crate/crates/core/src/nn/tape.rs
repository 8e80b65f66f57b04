//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A forward pass appends nodes; [`Tape::backward`] walks them in reverse and
//! returns gradients for leaves created with `requires_grad = true`.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, ConvSpec, PoolGeom, BN_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Block-permutation maps along the three spatial axes of an NCDHW tensor.
/// `maps[p][pos]` is the source index placed at `pos` by candidate `p`.
pub type AxisMaps = Arc<Vec<Vec<usize>>>;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    AvgPool {
        x: Var,
        stride: usize,
    },
    MaxPool {
        x: Var,
        stride: usize,
        arg: Vec<usize>,
    },
    Sum {
        xs: Vec<Var>,
    },
    Mix {
        alpha: Var,
        weights: Vec<T>,
        xs: Vec<Option<Var>>,
    },
    AxisMix {
        x: Var,
        alpha: Var,
        weights: Vec<T>,
        axis: usize,
        maps: AxisMaps,
    },
    JointMix {
        x: Var,
        alpha: Var,
        weights: Vec<T>,
        maps: [AxisMaps; 3],
    },
    Concat {
        xs: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Softmax Jacobian-vector product: d loss / d alpha given d loss / d weights.
fn softmax_backward<T: Scalar>(weights: &[T], dw: &[T]) -> Vec<T> {
    let inner: T = weights.iter().zip(dw).map(|(&w, &d)| w * d).sum();
    weights.iter().zip(dw).map(|(&w, &d)| w * (d - inner)).collect()
}

/// Gather along one spatial axis (2, 3 or 4) of an NCDHW buffer.
fn gather_axis<T: Scalar>(x: &[T], dims: [usize; 5], axis: usize, map: &[usize], out: &mut [T]) {
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    for o in 0..outer {
        for (pos, &src) in map.iter().enumerate() {
            let dst = (o * len + pos) * inner;
            let from = (o * len + src) * inner;
            out[dst..dst + inner].copy_from_slice(&x[from..from + inner]);
        }
    }
}

/// Flat source offset within one (d, h, w) block for joint permutation maps.
fn joint_index(dims: [usize; 5], maps: [&[usize]; 3]) -> Vec<usize> {
    let [_, _, d, h, w] = dims;
    let mut idx = Vec::with_capacity(d * h * w);
    for &a in maps[0] {
        for &b in maps[1] {
            for &c in maps[2] {
                idx.push((a * h + b) * w + c);
            }
        }
    }
    idx
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let xd = self.value(x).dims5();
        let wshape = self.value(w).shape().to_vec();
        let cin_g = xd[1] / spec.groups;
        if wshape.len() != 5
            || xd[1] % spec.groups != 0
            || wshape[0] % spec.groups != 0
            || wshape[1] != cin_g
            || wshape[2..] != spec.kernel
        {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {wshape:?} incompatible with input {xd:?} and {spec:?}"
            )));
        }
        if spec.stride != 1 && spec.stride != 2 {
            return Err(Error::UnsupportedStride(spec.stride));
        }
        let geom = ConvGeom::new(xd, wshape[0], spec);
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let [od, oh, ow] = geom.outd;
        let t = Tensor::from_vec(&[xd[0], wshape[0], od, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv { x, w, spec }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Non-affine batch normalization. In batch mode the batch mean and
    /// biased variance are returned for running-statistics bookkeeping.
    pub fn batch_norm(&mut self, x: Var, mode: NormMode<'_, T>) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let xv = self.value(x);
        let dims = xv.dims5();
        let (mean, var, batch_stats) = match mode {
            NormMode::Batch => {
                let (m, v) = kernels::channel_stats(xv.data(), dims);
                (m, v, true)
            }
            NormMode::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let sp: usize = dims[2..].iter().product();
        let c = dims[1];
        let mut xhat = xv.data().to_vec();
        for (i, chunk) in xhat.chunks_mut(sp).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
        let t = Tensor::from_vec(xv.shape(), xhat.clone()).expect("same shape");
        let rg = self.rg(x);
        let var_out = self.push(
            t,
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (var_out, batch_stats.then_some((mean, var)))
    }

    pub fn avg_pool(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::UnsupportedStride(stride));
        }
        let xd = self.value(x).dims5();
        let g = PoolGeom::new(xd, stride);
        let out = kernels::avg_pool_forward(self.value(x).data(), &g);
        let t = Tensor::from_vec(&[xd[0], xd[1], g.outd[0], g.outd[1], g.outd[2]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool { x, stride }, rg))
    }

    pub fn max_pool(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::UnsupportedStride(stride));
        }
        let xd = self.value(x).dims5();
        let g = PoolGeom::new(xd, stride);
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), &g);
        let t = Tensor::from_vec(&[xd[0], xd[1], g.outd[0], g.outd[1], g.outd[2]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool { x, stride, arg }, rg))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptyInput)?;
        let mut acc = self.value(*first).clone();
        for &v in &xs[1..] {
            if self.value(v).shape() != acc.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "sum of {:?} and {:?}",
                    acc.shape(),
                    self.value(v).shape()
                )));
            }
            acc.add_assign(self.value(v));
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(acc, Op::Sum { xs: xs.to_vec() }, rg))
    }

    /// `sum_k softmax(alpha)_k * x_k`; `None` entries are all-zero branches.
    pub fn mix(&mut self, alpha: Var, xs: &[Option<Var>], shape: &[usize]) -> Result<Var> {
        if self.value(alpha).len() != xs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} mixing logits for {} branches",
                self.value(alpha).len(),
                xs.len()
            )));
        }
        let weights = softmax(self.value(alpha).data());
        let mut acc = Tensor::zeros(shape);
        for (k, x) in xs.iter().enumerate() {
            if let Some(x) = x {
                if self.value(*x).shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "branch {k} has shape {:?}, expected {shape:?}",
                        self.value(*x).shape()
                    )));
                }
                acc.scale_add_assign(weights[k], self.value(*x));
            }
        }
        let rg = self.rg(alpha) || xs.iter().flatten().any(|&v| self.rg(v));
        Ok(self.push(
            acc,
            Op::Mix {
                alpha,
                weights,
                xs: xs.to_vec(),
            },
            rg,
        ))
    }

    /// `sum_p softmax(alpha)_p * gather(x, maps[p])` along one spatial axis.
    pub fn axis_mix(&mut self, x: Var, alpha: Var, axis: usize, maps: AxisMaps) -> Result<Var> {
        let dims = self.value(x).dims5();
        if !(2..=4).contains(&axis) {
            return Err(Error::ShapeMismatch(format!("axis {axis} is not spatial")));
        }
        if self.value(alpha).len() != maps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {} candidate orders",
                self.value(alpha).len(),
                maps.len()
            )));
        }
        if maps.iter().any(|m| m.len() != dims[axis]) {
            return Err(Error::ShapeMismatch(format!(
                "axis map length differs from extent {}",
                dims[axis]
            )));
        }
        let weights = softmax(self.value(alpha).data());
        let xv = self.value(x).data();
        let mut acc = vec![T::zero(); xv.len()];
        let mut buf = vec![T::zero(); xv.len()];
        for (p, map) in maps.iter().enumerate() {
            gather_axis(xv, dims, axis, map, &mut buf);
            let w = weights[p];
            for (a, &b) in acc.iter_mut().zip(&buf) {
                *a = *a + w * b;
            }
        }
        let t = Tensor::from_vec(&dims, acc)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(
            t,
            Op::AxisMix {
                x,
                alpha,
                weights,
                axis,
                maps,
            },
            rg,
        ))
    }

    /// Mixture over every (feature, base, equipment) order triple; candidate
    /// `((i * |base| + j) * |equip| + k)` applies maps `(i, j, k)`.
    pub fn joint_mix(&mut self, x: Var, alpha: Var, maps: [AxisMaps; 3]) -> Result<Var> {
        let dims = self.value(x).dims5();
        let total = maps[0].len() * maps[1].len() * maps[2].len();
        if self.value(alpha).len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {total} joint candidates",
                self.value(alpha).len()
            )));
        }
        for (a, m) in maps.iter().enumerate() {
            if m.iter().any(|p| p.len() != dims[a + 2]) {
                return Err(Error::ShapeMismatch("joint map length differs from extent".into()));
            }
        }
        let weights = softmax(self.value(alpha).data());
        let xv = self.value(x).data();
        let block: usize = dims[2..].iter().product();
        let mut acc = vec![T::zero(); xv.len()];
        let mut o = 0;
        for mf in maps[0].iter() {
            for mb in maps[1].iter() {
                for me in maps[2].iter() {
                    let idx = joint_index(dims, [mf, mb, me]);
                    let w = weights[o];
                    for (dst, src) in acc.chunks_mut(block).zip(xv.chunks(block)) {
                        for (a, &i) in dst.iter_mut().zip(&idx) {
                            *a = *a + w * src[i];
                        }
                    }
                    o += 1;
                }
            }
        }
        let t = Tensor::from_vec(&dims, acc)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(
            t,
            Op::JointMix {
                x,
                alpha,
                weights,
                maps,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or(Error::EmptyInput)?).dims5();
        let mut channels = 0;
        for &v in xs {
            let d = self.value(v).dims5();
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(Error::ShapeMismatch(format!("concat {d:?} with {first:?}")));
            }
            channels += d[1];
        }
        let n = first[0];
        let sp: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * sp);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * sp..(b + 1) * c * sp]);
            }
        }
        let t = Tensor::from_vec(&[n, channels, first[2], first[3], first[4]], out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, d, h, w] = self.value(x).dims5();
        let sp = d * h * w;
        let inv = T::one() / T::of(sp as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::from_vec(&[n, c], data).expect("n*c values");
        let rg = self.rg(x);
        self.push(t, Op::GlobalAvgPool { x }, rg)
    }

    /// `x (n, cin) -> x w^T + b` with `w (cout, cin)`, `b (cout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).len() != ws[0] {
            return Err(Error::ShapeMismatch(format!("linear {xs:?} x {ws:?}")));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * cout];
        for i in 0..n {
            for o in 0..cout {
                let row = &xv[i * cin..(i + 1) * cin];
                let wr = &wv[o * cin..(o + 1) * cin];
                out[i * cout + o] = bv[o] + row.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let t = Tensor::from_vec(&[n, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Mean squared error against constant targets; a scalar node.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::LengthMismatch(target.len(), p.len()));
        }
        let n = T::of(p.len() as f64);
        let loss = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let geom = ConvGeom::new(xv.dims5(), wv.shape()[0], *spec);
                if self.rg(*x) {
                    let gx = kernels::conv3d_backward_input(g.data(), wv.data(), &geom);
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                }
                if self.rg(*w) {
                    let gw = kernels::conv3d_backward_weight(g.data(), xv.data(), &geom);
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw).unwrap());
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let dims = self.value(*x).dims5();
                let c = dims[1];
                let sp: usize = dims[2..].iter().product();
                let mut gx = g.data().to_vec();
                if *batch_stats {
                    let m = T::of((dims[0] * sp) as f64);
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for (i, (gc, xc)) in g.data().chunks(sp).zip(xhat.chunks(sp)).enumerate() {
                        let ch = i % c;
                        for (&a, &b) in gc.iter().zip(xc) {
                            sum_g[ch] = sum_g[ch] + a;
                            sum_gx[ch] = sum_gx[ch] + a * b;
                        }
                    }
                    for (i, (gc, xc)) in gx.chunks_mut(sp).zip(xhat.chunks(sp)).enumerate() {
                        let ch = i % c;
                        for (a, &b) in gc.iter_mut().zip(xc) {
                            *a = inv_std[ch] * (*a - sum_g[ch] / m - b * sum_gx[ch] / m);
                        }
                    }
                } else {
                    for (i, gc) in gx.chunks_mut(sp).enumerate() {
                        let s = inv_std[i % c];
                        for a in gc {
                            *a = *a * s;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&dims, gx).unwrap());
            }
            Op::AvgPool { x, stride } => {
                let xv = self.value(*x);
                let geom = PoolGeom::new(xv.dims5(), *stride);
                let gx = kernels::avg_pool_backward(g.data(), &geom);
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
            }
            Op::MaxPool { x, stride, arg } => {
                let xv = self.value(*x);
                let geom = PoolGeom::new(xv.dims5(), *stride);
                let gx = kernels::max_pool_backward(g.data(), arg, &geom);
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
            }
            Op::Sum { xs } => {
                for &v in xs {
                    if self.rg(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Mix { alpha, weights, xs } => {
                let mut dw = vec![T::zero(); xs.len()];
                for (k, x) in xs.iter().enumerate() {
                    if let Some(x) = x {
                        dw[k] = g.dot(self.value(*x));
                        if self.rg(*x) {
                            accumulate(grads, *x, g.map(|v| v * weights[k]));
                        }
                    }
                }
                if self.rg(*alpha) {
                    let ga = softmax_backward(weights, &dw);
                    accumulate(grads, *alpha, Tensor::from_vec(&[ga.len()], ga).unwrap());
                }
            }
            Op::AxisMix {
                x,
                alpha,
                weights,
                axis,
                maps,
            } => {
                let xv = self.value(*x);
                let dims = xv.dims5();
                let outer: usize = dims[..*axis].iter().product();
                let len = dims[*axis];
                let inner: usize = dims[*axis + 1..].iter().product();
                let mut dw = vec![T::zero(); maps.len()];
                let mut gx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                for (p, map) in maps.iter().enumerate() {
                    let mut acc = T::zero();
                    for o in 0..outer {
                        for (pos, &src) in map.iter().enumerate() {
                            let dst = (o * len + pos) * inner;
                            let from = (o * len + src) * inner;
                            let gs = &g.data()[dst..dst + inner];
                            acc = acc
                                + gs.iter()
                                    .zip(&xv.data()[from..from + inner])
                                    .map(|(&a, &b)| a * b)
                                    .sum::<T>();
                            if let Some(gx) = gx.as_mut() {
                                for (t, &a) in gx[from..from + inner].iter_mut().zip(gs) {
                                    *t = *t + weights[p] * a;
                                }
                            }
                        }
                    }
                    dw[p] = acc;
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::from_vec(&dims, gx).unwrap());
                }
                if self.rg(*alpha) {
                    let ga = softmax_backward(weights, &dw);
                    accumulate(grads, *alpha, Tensor::from_vec(&[ga.len()], ga).unwrap());
                }
            }
            Op::JointMix {
                x,
                alpha,
                weights,
                maps,
            } => {
                let xv = self.value(*x);
                let dims = xv.dims5();
                let block: usize = dims[2..].iter().product();
                let mut dw = vec![T::zero(); weights.len()];
                let mut gx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut o = 0;
                for mf in maps[0].iter() {
                    for mb in maps[1].iter() {
                        for me in maps[2].iter() {
                            let idx = joint_index(dims, [mf, mb, me]);
                            let mut acc = T::zero();
                            for (bi, gs) in g.data().chunks(block).enumerate() {
                                let src = &xv.data()[bi * block..(bi + 1) * block];
                                for (&a, &i) in gs.iter().zip(&idx) {
                                    acc = acc + a * src[i];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx[bi * block..(bi + 1) * block];
                                    for (&a, &i) in gs.iter().zip(&idx) {
                                        dst[i] = dst[i] + weights[o] * a;
                                    }
                                }
                            }
                            dw[o] = acc;
                            o += 1;
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::from_vec(&dims, gx).unwrap());
                }
                if self.rg(*alpha) {
                    let ga = softmax_backward(weights, &dw);
                    accumulate(grads, *alpha, Tensor::from_vec(&[ga.len()], ga).unwrap());
                }
            }
            Op::Concat { xs } => {
                let [n, total, d, h, w] = g.dims5();
                let sp = d * h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(n * c * sp);
                        for b in 0..n {
                            let start = (b * total + offset) * sp;
                            part.extend_from_slice(&g.data()[start..start + c * sp]);
                        }
                        accumulate(grads, v, Tensor::from_vec(&[n, c, d, h, w], part).unwrap());
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let [_, _, d, h, w] = xv.dims5();
                let sp = d * h * w;
                let inv = T::one() / T::of(sp as f64);
                let mut gx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, sp));
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = wv.shape()[0];
                let gd = g.data();
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); n * cin];
                    for i in 0..n {
                        for o in 0..cout {
                            let go = gd[i * cout + o];
                            for k in 0..cin {
                                gx[i * cin + k] = gx[i * cin + k] + go * wv.data()[o * cin + k];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); cout * cin];
                    for i in 0..n {
                        for o in 0..cout {
                            let go = gd[i * cout + o];
                            for k in 0..cin {
                                gw[o * cin + k] = gw[o * cin + k] + go * xv.data()[i * cin + k];
                            }
                        }
                    }
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); cout];
                    for i in 0..n {
                        for o in 0..cout {
                            gb[o] = gb[o] + gd[i * cout + o];
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[cout], gb).unwrap());
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = g.data()[0] * T::of(2.0) / T::of(target.len() as f64);
                let data = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                accumulate(grads, *pred, Tensor::from_vec(pv.shape(), data).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(xp, false);
                let l = build(&mut t, xv);
                t.value(l).data()[0]
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: analytic {a}, numeric {fd}"
            );
        }
    }

    fn sample(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn batch_norm_gradient() {
        let target: Vec<f64> = (0..2 * 3 * 2 * 2 * 1).map(|i| (i as f64 * 0.3).cos()).collect();
        fd_check(
            |t, x| {
                let (y, _) = t.batch_norm(x, NormMode::Batch);
                t.mse(y, &target).unwrap()
            },
            sample(&[2, 3, 2, 2, 1], 0.7),
        );
    }

    #[test]
    fn pooling_gradients() {
        let shape = [1, 2, 3, 2, 3];
        for stride in [1, 2] {
            let out_len = {
                let g = PoolGeom::new(shape, stride);
                2 * g.outd.iter().product::<usize>()
            };
            let target: Vec<f64> = (0..out_len).map(|i| i as f64 * 0.1).collect();
            fd_check(
                |t, x| {
                    let y = t.avg_pool(x, stride).unwrap();
                    t.mse(y, &target).unwrap()
                },
                sample(&shape, 0.9),
            );
            fd_check(
                |t, x| {
                    let y = t.max_pool(x, stride).unwrap();
                    t.mse(y, &target).unwrap()
                },
                sample(&shape, 0.9),
            );
        }
    }

    #[test]
    fn axis_and_joint_mix_gradients_wrt_input() {
        let maps: AxisMaps = Arc::new(vec![vec![0, 1, 2], vec![2, 0, 1]]);
        let target: Vec<f64> = (0..12).map(|i| i as f64 * 0.05).collect();
        fd_check(
            |t, x| {
                let a = t.constant(Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap());
                let y = t.axis_mix(x, a, 3, maps.clone()).unwrap();
                t.mse(y, &target).unwrap()
            },
            sample(&[1, 2, 2, 3, 1], 0.4),
        );
        let id1: AxisMaps = Arc::new(vec![vec![0]]);
        let fm: AxisMaps = Arc::new(vec![vec![0, 1], vec![1, 0]]);
        fd_check(
            |t, x| {
                let a = t.constant(Tensor::from_vec(&[4], vec![0.3, -0.2, 0.1, 0.0]).unwrap());
                let y = t.joint_mix(x, a, [fm.clone(), maps.clone(), id1.clone()]).unwrap();
                t.mse(y, &target).unwrap()
            },
            sample(&[1, 2, 2, 3, 1], 0.4),
        );
    }

    #[test]
    fn concat_gap_linear_gradient() {
        fd_check(
            |t, x| {
                let r = t.relu(x);
                let c = t.concat_channels(&[x, r]).unwrap();
                let p = t.global_avg_pool(c);
                let w = t.constant(sample(&[2, 4], 0.3));
                let b = t.constant(Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap());
                let y = t.linear(p, w, b).unwrap();
                t.mse(y, &[1.0, 0.0, -1.0, 0.5]).unwrap()
            },
            sample(&[2, 2, 1, 2, 2], 1.3),
        );
    }
}
