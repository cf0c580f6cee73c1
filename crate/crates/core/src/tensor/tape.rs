use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax2 {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    GradReverse {
        input: Var,
        scale: T,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaskMul {
        input: Var,
        mask: Tensor<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Euclidean {
        est: Var,
        target: Tensor<T>,
    },
    CrossEntropy2 {
        logits: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a reverse scan.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf whose gradient is tracked (parameters, or inputs under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape(v) {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(op, &[0, 0, 0, 0], other)),
        }
    }

    /// Cross-correlation of `[N, Ci, H, W]` with `[Co, Ci, k, k]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.dims4(input, "conv2d")?;
        let (c_out, wc, kh, kw) = self.dims4(weight, "conv2d weight")?;
        if wc != c_in || kh != kw {
            return Err(Error::shape("conv2d weight", &[c_out, c_in, kh, kh], self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", &[c_out], self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c_in, h, w, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &[kh, kh], &[h, w]))?;
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            n,
            c_out,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2 (even size required)", &[h + h % 2, w + w % 2], &[h, w]));
        }
        let (out, argmax) = kernels::maxpool2_forward(n * c, h, w, self.value(input).data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let rg = self.requires(input);
        self.push(value, Op::MaxPool2 { input, argmax }, rg, "maxpool2")
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "upsample2")?;
        let out = kernels::upsample2_forward(n * c, h, w, self.value(input).data());
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.requires(input);
        self.push(value, Op::Upsample2 { input }, rg, "upsample2")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.requires(input);
        self.push(value, Op::Relu { input }, rg, "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        let rg = self.requires(input);
        self.push(value, Op::Sigmoid { input }, rg, "sigmoid")
    }

    /// Softmax over the trailing dimension, which must have size 2.
    pub fn softmax2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().last() != Some(&2) {
            return Err(Error::shape("softmax2", &[2], x.shape()));
        }
        let mut out = Vec::with_capacity(x.len());
        for pair in x.data().chunks(2) {
            let (p, q) = super::softmax2(pair[0], pair[1]);
            out.push(p);
            out.push(q);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires(input);
        self.push(value, Op::Softmax2 { input }, rg, "softmax2")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "global_avg_pool")?;
        let inv = T::one() / T::of((h * w) as f64);
        let out = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.requires(input);
        self.push(value, Op::GlobalAvgPool { input }, rg, "global_avg_pool")
    }

    /// Identity forward; multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&mut self, input: Var, scale: T) -> Result<Var> {
        if !(scale > T::zero()) {
            return Err(Error::Config(format!("gradient reversal scale must be > 0, got {scale}")));
        }
        let value = self.value(input).clone();
        let rg = self.requires(input);
        self.push(value, Op::GradReverse { input, scale }, rg, "grad_reverse")
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = match self.shape(input) {
            &[n, d] => (n, d),
            other => return Err(Error::shape("linear", &[0, 0], other)),
        };
        let d_out = match self.shape(weight) {
            &[o, i] if i == d_in => o,
            other => return Err(Error::shape("linear weight", &[0, d_in], other)),
        };
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::shape("linear bias", &[d_out], bv.shape()));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            n,
            d_in,
            d_out,
            self.value(input).data(),
            d_in,
            1,
            self.value(weight).data(),
            1,
            d_in,
            &mut out,
            bias.is_some(),
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        let rg = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        self.push(value, Op::Linear { input, weight, bias }, rg, "linear")
    }

    /// Element-wise product with a constant mask. A `[N, 1, H, W]` mask is
    /// broadcast across the channels of a `[N, C, H, W]` input.
    pub fn mask_mul(&mut self, input: Var, mask: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        let out = if mask.shape() == x.shape() {
            x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect()
        } else {
            let (n, c, h, w) = self.dims4(input, "mask_mul")?;
            if mask.shape() != [n, 1, h, w] {
                return Err(Error::shape("mask_mul", &[n, 1, h, w], mask.shape()));
            }
            let x = self.value(input).data();
            let mut out = Vec::with_capacity(x.len());
            for s in 0..n {
                let m = &mask.data()[s * h * w..(s + 1) * h * w];
                for ch in 0..c {
                    let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    out.extend(plane.iter().zip(m).map(|(&a, &b)| a * b));
                }
            }
            out
        };
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let rg = self.requires(input);
        self.push(value, Op::MaskMul { input, mask }, rg, "mask_mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.requires(input);
        self.push(value, Op::Scale { input, factor }, rg, "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.requires(input);
        self.push(value, Op::Sum { input }, rg, "sum")
    }

    /// `(1/2M) Σ (est − target)²` with `M` the number of elements.
    pub fn euclidean_loss(&mut self, est: Var, target: Tensor<T>) -> Result<Var> {
        let e = self.value(est);
        if e.shape() != target.shape() {
            return Err(Error::shape("euclidean_loss", target.shape(), e.shape()));
        }
        let m = T::of(e.len() as f64);
        let sq: T = e.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sq / (m + m));
        let rg = self.requires(est);
        self.push(value, Op::Euclidean { est, target }, rg, "euclidean_loss")
    }

    /// Mean over the batch of `−log softmax(logits)[label]` for `[N, 2]`
    /// logits.
    pub fn cross_entropy2(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != [labels.len(), 2] || labels.iter().any(|&l| l > 1) {
            return Err(Error::shape("cross_entropy2", &[labels.len(), 2], x.shape()));
        }
        let mut total = T::zero();
        for (pair, &label) in x.data().chunks(2).zip(labels) {
            let m = pair[0].max(pair[1]);
            let lse = m + ((pair[0] - m).exp() + (pair[1] - m).exp()).ln();
            total = total + lse - pair[label];
        }
        let value = Tensor::scalar(total / T::of(labels.len() as f64));
        let rg = self.requires(logits);
        self.push(
            value,
            Op::CrossEntropy2 {
                logits,
                labels: labels.to_vec(),
            },
            rg,
            "cross_entropy2",
        )
    }

    /// `Σ −[y log σ(z) + (1−y) log(1−σ(z))]` over all elements, evaluated
    /// from logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", &[targets.len()], z.shape()));
        }
        let total = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let value = Tensor::scalar(total);
        let rg = self.requires(logits);
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Backward sweep from a scalar output with seed gradient 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let seed = Tensor::full(self.value_checked(output)?.shape().to_vec(), T::one());
        self.backward(output, seed)
    }

    fn value_checked(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(Error::NoForward)
    }

    /// Propagates `output_grad` from `output` back to every leaf that
    /// requires a gradient.
    pub fn backward(&self, output: Var, output_grad: Tensor<T>) -> Result<Gradients<T>> {
        let out = self.value_checked(output)?;
        if out.shape() != output_grad.shape() {
            return Err(Error::shape("backward", out.shape(), output_grad.shape()));
        }
        output_grad.ensure_finite("backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(output_grad);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = self.shape(*input)[0];
                let w = self.value(*weight);
                let c_out = w.shape()[0];
                let r = kernels::conv2d_backward(geom, n, c_out, cols, w.data(), gd, self.requires(*input));
                if let Some(dx) = r.dx {
                    accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), dx)?);
                }
                if self.requires(*weight) {
                    accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), r.dw)?);
                }
                if let Some(b) = bias.filter(|b| self.requires(*b)) {
                    accumulate(grads, b, Tensor::new(vec![c_out], r.db)?);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.requires(*input) {
                    let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                    let d = dx.data_mut();
                    for (&a, &gv) in argmax.iter().zip(gd) {
                        d[a as usize] = d[a as usize] + gv;
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::Upsample2 { input } => {
                if self.requires(*input) {
                    let shape = self.shape(*input).to_vec();
                    let dx = kernels::upsample2_backward(shape[0] * shape[1], shape[2], shape[3], gd);
                    accumulate(grads, *input, Tensor::new(shape, dx)?);
                }
            }
            Op::Relu { input } => {
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::Softmax2 { input } => {
                let p = node.value.data();
                let mut dx = Vec::with_capacity(p.len());
                for (pp, gg) in p.chunks(2).zip(gd.chunks(2)) {
                    let dot = pp[0] * gg[0] + pp[1] * gg[1];
                    dx.push(pp[0] * (gg[0] - dot));
                    dx.push(pp[1] * (gg[1] - dot));
                }
                accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.shape(*input).to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(grads, *input, Tensor::new(shape, dx)?);
            }
            Op::GradReverse { input, scale } => {
                let s = -*scale;
                accumulate(grads, *input, g.map(|v| v * s));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d_in) = (x.shape()[0], x.shape()[1]);
                let d_out = w.shape()[0];
                if self.requires(*input) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(n, d_out, d_in, gd, d_out, 1, w.data(), d_in, 1, &mut dx, false);
                    accumulate(grads, *input, Tensor::new(vec![n, d_in], dx)?);
                }
                if self.requires(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(d_out, n, d_in, gd, 1, d_out, x.data(), d_in, 1, &mut dw, false);
                    accumulate(grads, *weight, Tensor::new(vec![d_out, d_in], dw)?);
                }
                if let Some(b) = bias.filter(|b| self.requires(*b)) {
                    let mut db = vec![T::zero(); d_out];
                    for row in gd.chunks(d_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    accumulate(grads, b, Tensor::new(vec![d_out], db)?);
                }
            }
            Op::MaskMul { input, mask } => {
                let dx = if mask.shape() == g.shape() {
                    gd.iter().zip(mask.data()).map(|(&a, &m)| a * m).collect()
                } else {
                    let s = g.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut dx = Vec::with_capacity(gd.len());
                    for smp in 0..n {
                        let m = &mask.data()[smp * hw..(smp + 1) * hw];
                        for ch in 0..c {
                            let plane = &gd[(smp * c + ch) * hw..(smp * c + ch + 1) * hw];
                            dx.extend(plane.iter().zip(m).map(|(&a, &b)| a * b));
                        }
                    }
                    dx
                };
                accumulate(grads, *input, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.map(|v| v * *factor));
            }
            Op::Sum { input } => {
                accumulate(grads, *input, Tensor::full(self.shape(*input).to_vec(), gd[0]));
            }
            Op::Euclidean { est, target } => {
                let e = self.value(*est);
                let k = gd[0] / T::of(e.len() as f64);
                let dx = e.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * k).collect();
                accumulate(grads, *est, Tensor::new(e.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy2 { logits, labels } => {
                let x = self.value(*logits);
                let k = gd[0] / T::of(labels.len() as f64);
                let mut dx = Vec::with_capacity(x.len());
                for (pair, &label) in x.data().chunks(2).zip(labels) {
                    let (p0, p1) = super::softmax2(pair[0], pair[1]);
                    let (y0, y1) = if label == 0 { (T::one(), T::zero()) } else { (T::zero(), T::one()) };
                    dx.push((p0 - y0) * k);
                    dx.push((p1 - y1) * k);
                }
                accumulate(grads, *logits, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let dx = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * gd[0])
                    .collect();
                accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
