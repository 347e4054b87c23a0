use super::kernels::{self, ConvGeom};
use super::{check_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    /// Input kept to test which elements were clipped.
    Clamp(Var, T, T),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Reshape(Var),
    TransposeLast2 {
        x: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        offsets: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        channels: usize,
        spatial: usize,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        channels: usize,
        spatial: usize,
    },
    Gap {
        x: Var,
        spatial: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        norms: Vec<T>,
        eps: T,
    },
    ScaleSpatial {
        f: Var,
        m: Var,
        channels: usize,
        spatial: usize,
    },
    GridSample {
        x: Var,
        grid: Var,
        dims: [usize; 6],
    },
    ChannelsLast {
        x: Var,
        dims: [usize; 4],
    },
    IndexSelect0 {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    AddBiasLast {
        x: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Append-only record of differentiable operations.
///
/// Nodes are stored in execution order, which is a topological order of the
/// dataflow graph; [`Graph::backward`] replays it in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / last.max(1);
    (rows, last)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; all zeros when `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        check_shape(op, self.shape(a), self.shape(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Elementwise clip to `[lo, hi]`; gradient flows where the input lies
    /// inside, bounds included.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.len().max(1) as f64));
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("sum_last", "rank >= 1", "scalar"));
        }
        let (rows, last) = split_last(v.shape());
        let data = (0..rows)
            .map(|r| v.data()[r * last..(r + 1) * last].iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let out = Tensor::new(&v.shape()[..v.rank() - 1], data)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let r = v.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank >= 2", format!("{:?}", v.shape())));
        }
        let (m, n) = (v.shape()[r - 2], v.shape()[r - 1]);
        let batch = v.len() / (m * n).max(1);
        let mut data = vec![T::zero(); v.len()];
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    data[b * m * n + j * m + i] = v.data()[b * m * n + i * n + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::TransposeLast2 { x, batch, m, n }, &[x]))
    }

    /// Matrix product over the last two axes with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", format!("[.., M, K] x [.., K, N], lhs {sa:?}"), format!("rhs {sb:?}"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let data = kernels::bmm(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Matmul { a, b, batch, m, k, n }, &[a, b]))
    }

    fn conv_geom(&self, op: &'static str, x: Var, weight: Var, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] == 0 {
            return Err(Error::shape(op, "weight [C_out, C_in, k, k] with k >= 1", format!("{ws:?}")));
        }
        let (n, cin, h, w) = match *xs {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(op, "input [C, H, W] or [N, C, H, W]", format!("{xs:?}"))),
        };
        if cin != ws[1] {
            return Err(Error::shape(
                op,
                format!("input channels {} to match weight {ws:?}", ws[1]),
                format!("input {xs:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        let k = ws[2];
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                op,
                format!("spatial extent + 2*padding >= {k}"),
                format!("input {xs:?} with padding {pad}"),
            ));
        }
        Ok((
            ConvGeom {
                cin,
                h,
                w,
                cout: ws[0],
                k,
                stride,
                pad,
            },
            n,
        ))
    }

    fn conv_out_shape(&self, x: Var, g: &ConvGeom, n: usize) -> Vec<usize> {
        if self.shape(x).len() == 3 {
            vec![g.cout, g.out_h(), g.out_w()]
        } else {
            vec![n, g.cout, g.out_h(), g.out_w()]
        }
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = bias {
            check_shape(op, &[cout], self.shape(b))?;
        }
        Ok(())
    }

    /// Cross-correlation of `[N, C_in, H, W]` (or `[C_in, H, W]`) input with
    /// `[C_out, C_in, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (geom, batch) = self.conv_geom("conv2d", x, weight, stride, pad)?;
        self.check_bias("conv2d", bias, geom.cout)?;
        let data = kernels::conv_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            None,
        );
        let out = Tensor::new(&self.conv_out_shape(x, &geom, batch), data)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                offsets: None,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// Deformable convolution: tap `t = ky*k + kx` at each output position is
    /// displaced by `(offsets[2t], offsets[2t+1]) = (dy, dx)` pixels and read
    /// with the four-neighbour bilinear kernel.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (geom, batch) = self.conv_geom("deform_conv2d", x, weight, stride, pad)?;
        self.check_bias("deform_conv2d", bias, geom.cout)?;
        let mut off_shape = vec![2 * geom.taps(), geom.out_h(), geom.out_w()];
        if self.shape(x).len() == 4 {
            off_shape.insert(0, batch);
        }
        check_shape("deform_conv2d offsets", &off_shape, self.shape(offsets))?;
        let data = kernels::conv_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            Some(self.value(offsets).data()),
        );
        let out = Tensor::new(&self.conv_out_shape(x, &geom, batch), data)?;
        let mut inputs = vec![x, weight, offsets];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                offsets: Some(offsets),
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// 2x2 max pooling with stride 2 (floor on odd extents).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::shape("max_pool2", "rank >= 2", format!("{s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("max_pool2", "spatial extent >= 2", format!("{s:?}")));
        }
        let planes = v.len() / (h * w);
        let mut data = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &v.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    data.push(plane[best]);
                    argmax.push(p * h * w + best);
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    fn norm_dims(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(op, "[N, C, ...]", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        check_shape(op, &[c], self.shape(gamma))?;
        check_shape(op, &[c], self.shape(beta))?;
        Ok((n, c, s[2..].iter().product()))
    }

    fn norm_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        invstd: &[T],
        n: usize,
        c: usize,
        spatial: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let xh = (xv[j] - mean[ch]) * invstd[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        (xhat, out)
    }

    /// Training-mode batch norm over axis 1 using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, spatial) = self.norm_dims("batch_norm", x, gamma, beta)?;
        let m = n * spatial;
        if m == 0 {
            return Err(Error::shape("batch_norm", "non-empty batch", "0 elements per channel"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &v in &xv[base..base + spatial] {
                    s += v;
                }
            }
            let mu = s / T::from_f64(m as f64);
            let mut sq = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &v in &xv[base..base + spatial] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / T::from_f64(m as f64);
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.norm_apply(x, gamma, beta, &mean, &invstd, n, c, spatial);
        let unbiased = if m > 1 {
            var.iter().map(|&v| v * T::from_f64(m as f64 / (m - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let out = Tensor::new(self.shape(x), out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                channels: c,
                spatial,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Evaluation-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, spatial) = self.norm_dims("batch_norm", x, gamma, beta)?;
        check_shape("batch_norm running stats", &[c], &[running_mean.len()])?;
        check_shape("batch_norm running stats", &[c], &[running_var.len()])?;
        let invstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.norm_apply(x, gamma, beta, running_mean, &invstd, n, c, spatial);
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                channels: c,
                spatial,
            },
            &[x, gamma, beta],
        ))
    }

    /// Global average pooling over the last two axes.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 3 {
            return Err(Error::shape("gap", "[C, H, W] or [N, C, H, W]", format!("{s:?}")));
        }
        let spatial = s[s.len() - 2] * s[s.len() - 1];
        if spatial == 0 {
            return Err(Error::shape("gap", "H, W >= 1", format!("{s:?}")));
        }
        let inv = T::one() / T::from_f64(spatial as f64);
        let data = v
            .data()
            .chunks(spatial)
            .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let out = Tensor::new(&s[..s.len() - 2], data)?;
        Ok(self.push(out, Op::Gap { x, spatial }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("matching extents except axis {axis}, lhs {sa:?}"),
                format!("rhs {sb:?}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&vb[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            &[a, b],
        ))
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("softmax", "rank >= 1", "scalar"));
        }
        let (rows, last) = split_last(v.shape());
        let mut data = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let out = &mut data[r * last..(r + 1) * last];
            let mut s = T::zero();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o = *o / s;
            }
        }
        let out = Tensor::new(v.shape(), data)?;
        Ok(self.push(out, Op::SoftmaxLast(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("log_softmax", "rank >= 1", "scalar"));
        }
        let (rows, last) = split_last(v.shape());
        let mut data = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().fold(T::zero(), |a, &b| a + (b - mx).exp()).ln();
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let out = Tensor::new(v.shape(), data)?;
        Ok(self.push(out, Op::LogSoftmaxLast(x), &[x]))
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() {
            return Err(Error::shape("l2_normalize", format!("rank > {axis}"), format!("{s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut norms = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut sq = T::zero();
                for a in 0..len {
                    let e = v.data()[(o * len + a) * inner + i];
                    sq += e * e;
                }
                let nrm = sq.sqrt();
                norms[o * inner + i] = nrm;
                let d = nrm.max(eps);
                for a in 0..len {
                    let j = (o * len + a) * inner + i;
                    data[j] = v.data()[j] / d;
                }
            }
        }
        let out = Tensor::new(s, data)?;
        Ok(self.push(
            out,
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
                eps,
            },
            &[x],
        ))
    }

    /// Multiplies every channel of `f` (`[.., C, H, W]`) by the matching
    /// single-channel spatial map `m` (`[.., 1, H, W]`).
    pub fn scale_spatial(&mut self, f: Var, m: Var) -> Result<Var> {
        let (sf, sm) = (self.shape(f).to_vec(), self.shape(m).to_vec());
        let r = sf.len();
        let ok = r >= 3 && sm.len() == r && sm[r - 3] == 1 && sf[..r - 3] == sm[..r - 3] && sf[r - 2..] == sm[r - 2..];
        if !ok {
            return Err(Error::shape("scale_spatial", format!("mask [.., 1, H, W] for feature {sf:?}"), format!("{sm:?}")));
        }
        let channels = sf[r - 3];
        let spatial = sf[r - 2] * sf[r - 1];
        let (vf, vm) = (self.value(f).data(), self.value(m).data());
        let mut data = vec![T::zero(); vf.len()];
        for (j, d) in data.iter_mut().enumerate() {
            let b = j / (channels * spatial);
            let p = j % spatial;
            *d = vf[j] * vm[b * spatial + p];
        }
        let out = Tensor::new(&sf, data)?;
        Ok(self.push(
            out,
            Op::ScaleSpatial {
                f,
                m,
                channels,
                spatial,
            },
            &[f, m],
        ))
    }

    /// Bilinear sampling of `x` (`[N, C, H, W]` or `[C, H, W]`) at a grid of
    /// normalized (x, y) coordinates (`[N, Ho, Wo, 2]` or `[Ho, Wo, 2]`).
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(grid).to_vec());
        let (n, c, h, w, ho, wo) = match (&sx[..], &sg[..]) {
            (&[c, h, w], &[ho, wo, 2]) => (1, c, h, w, ho, wo),
            (&[n, c, h, w], &[gn, ho, wo, 2]) if gn == n => (n, c, h, w, ho, wo),
            _ => {
                return Err(Error::shape(
                    "bilinear_sample",
                    format!("grid [N, Ho, Wo, 2] for feature {sx:?}"),
                    format!("{sg:?}"),
                ))
            }
        };
        self.check_finite("bilinear_sample", grid)?;
        let data = kernels::grid_sample_forward(self.value(x).data(), n, c, h, w, self.value(grid).data(), ho, wo);
        let shape = if sx.len() == 3 { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::GridSample {
                x,
                grid,
                dims: [n, c, h, w, ho, wo],
            },
            &[x, grid],
        ))
    }

    /// `[N, C, H, W] -> [N, H, W, C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, h, w] = &s[..] else {
            return Err(Error::shape("channels_last", "[N, C, H, W]", format!("{s:?}")));
        };
        let v = self.value(x).data();
        let mut data = vec![T::zero(); v.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    data[(i * h * w + p) * c + ch] = v[(i * c + ch) * h * w + p];
                }
            }
        }
        let out = Tensor::new(&[n, h, w, c], data)?;
        Ok(self.push(out, Op::ChannelsLast { x, dims: [n, c, h, w] }, &[x]))
    }

    /// Gathers slabs of the leading axis (repeats allowed).
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.is_empty() {
            return Err(Error::shape("index_select", "rank >= 1", "scalar"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("index_select", format!("indices < {}", s[0]), format!("index {bad}")));
        }
        let step = v.len() / s[0].max(1);
        let mut data = Vec::with_capacity(idx.len() * step);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * step..(i + 1) * step]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::IndexSelect0 { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for a `[R, C]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[r, c] = &s[..] else {
            return Err(Error::shape("pick", "[R, C]", format!("{s:?}")));
        };
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", format!("{r} indices < {c}"), format!("{idx:?}")));
        }
        let v = self.value(x).data();
        let data = idx.iter().enumerate().map(|(row, &i)| v[row * c + i]).collect();
        let out = Tensor::new(&[r], data)?;
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Adds a `[D]` vector to every row of a `[.., D]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        check_shape("add_bias", &[d], self.shape(b))?;
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| v + bv[j % d])
            .collect();
        let out = Tensor::new(&s, data)?;
        Ok(self.push(out, Op::AddBiasLast { x, b }, &[x, b]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut updates: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                updates.push((*a, dy.to_vec()));
                updates.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, dy.to_vec()));
                updates.push((*b, dy.iter().map(|&g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    updates.push((*a, dy.iter().zip(vb).map(|(&g, &v)| g * v).collect()));
                }
                if self.wants(*b) {
                    updates.push((*b, dy.iter().zip(va).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Affine(x, s) => updates.push((*x, dy.iter().map(|&g| g * *s).collect())),
            Op::Relu(x) => updates.push((
                *x,
                dy.iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let d = dy.iter().zip(xv).map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() }).collect();
                updates.push((*x, d));
            }
            Op::Tanh(x) => updates.push((*x, dy.iter().zip(y).map(|(&g, &v)| g * (T::one() - v * v)).collect())),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                updates.push((*x, vec![dy[0]; n]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                updates.push((*x, vec![dy[0] / T::from_f64(n.max(1) as f64); n]));
            }
            Op::SumLast(x) => {
                let (_, last) = split_last(self.shape(*x));
                let d = dy.iter().flat_map(|&g| std::iter::repeat_n(g, last)).collect();
                updates.push((*x, d));
            }
            Op::Reshape(x) => updates.push((*x, dy.to_vec())),
            Op::TransposeLast2 { x, batch, m, n } => {
                let mut d = vec![T::zero(); dy.len()];
                for b in 0..*batch {
                    for r in 0..*m {
                        for c in 0..*n {
                            d[b * m * n + r * n + c] = dy[b * m * n + c * m + r];
                        }
                    }
                }
                updates.push((*x, d));
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (da, db) =
                    kernels::bmm_backward(self.value(*a).data(), self.value(*b).data(), dy, *batch, *m, *k, *n);
                updates.push((*a, da));
                updates.push((*b, db));
            }
            Op::Conv {
                x,
                weight,
                bias,
                offsets,
                geom,
                batch,
            } => {
                let g = kernels::conv_backward(
                    self.value(*x).data(),
                    *batch,
                    geom,
                    self.value(*weight).data(),
                    offsets.map(|o| self.value(o).data()),
                    dy,
                );
                updates.push((*x, g.dx));
                updates.push((*weight, g.dweight));
                if let Some(b) = bias {
                    updates.push((*b, g.dbias));
                }
                if let (Some(o), Some(d)) = (offsets, g.doff) {
                    updates.push((*o, d));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    d[src] += g;
                }
                updates.push((*x, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                channels,
                spatial,
            } => {
                let c = *channels;
                let n = xhat.len() / (c * spatial).max(1);
                let m = T::from_f64((n * spatial) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); xhat.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                        let k = gv[ch] * invstd[ch] / m;
                        for j in base..base + spatial {
                            dx[j] = k * (m * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                        }
                    }
                }
                updates.push((*x, dx));
                updates.push((*gamma, dgamma));
                updates.push((*beta, dbeta));
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                channels,
                spatial,
            } => {
                let c = *channels;
                let n = xhat.len() / (c * spatial).max(1);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xhat.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                            dx[j] = dy[j] * gv[ch] * invstd[ch];
                        }
                    }
                }
                updates.push((*x, dx));
                updates.push((*gamma, dgamma));
                updates.push((*beta, dbeta));
            }
            Op::Gap { x, spatial } => {
                let inv = T::one() / T::from_f64(*spatial as f64);
                let d = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, *spatial)).collect();
                updates.push((*x, d));
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let step = a_inner + b_inner;
                let mut da = Vec::with_capacity(outer * a_inner);
                let mut db = Vec::with_capacity(outer * b_inner);
                for o in 0..*outer {
                    da.extend_from_slice(&dy[o * step..o * step + a_inner]);
                    db.extend_from_slice(&dy[o * step + a_inner..(o + 1) * step]);
                }
                updates.push((*a, da));
                updates.push((*b, db));
            }
            Op::SoftmaxLast(x) => {
                let (rows, last) = split_last(node.value.shape());
                let mut d = vec![T::zero(); dy.len()];
                for r in 0..rows {
                    let s = r * last..(r + 1) * last;
                    let dot = dy[s.clone()].iter().zip(&y[s.clone()]).fold(T::zero(), |a, (&g, &p)| a + g * p);
                    for j in s {
                        d[j] = y[j] * (dy[j] - dot);
                    }
                }
                updates.push((*x, d));
            }
            Op::LogSoftmaxLast(x) => {
                let (rows, last) = split_last(node.value.shape());
                let mut d = vec![T::zero(); dy.len()];
                for r in 0..rows {
                    let s = r * last..(r + 1) * last;
                    let total = dy[s.clone()].iter().fold(T::zero(), |a, &g| a + g);
                    for j in s {
                        d[j] = dy[j] - y[j].exp() * total;
                    }
                }
                updates.push((*x, d));
            }
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
                eps,
            } => {
                let mut d = vec![T::zero(); dy.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let nrm = norms[o * inner + i];
                        let idx = |a: usize| (o * len + a) * inner + i;
                        if nrm > *eps {
                            let dot = (0..*len).fold(T::zero(), |acc, a| acc + y[idx(a)] * dy[idx(a)]);
                            for a in 0..*len {
                                d[idx(a)] = (dy[idx(a)] - y[idx(a)] * dot) / nrm;
                            }
                        } else {
                            for a in 0..*len {
                                d[idx(a)] = dy[idx(a)] / *eps;
                            }
                        }
                    }
                }
                updates.push((*x, d));
            }
            Op::ScaleSpatial {
                f,
                m,
                channels,
                spatial,
            } => {
                let (vf, vm) = (self.value(*f).data(), self.value(*m).data());
                let mut df = vec![T::zero(); vf.len()];
                let mut dm = vec![T::zero(); vm.len()];
                for (j, &g) in dy.iter().enumerate() {
                    let b = j / (channels * spatial);
                    let p = j % spatial;
                    df[j] = g * vm[b * spatial + p];
                    dm[b * spatial + p] += g * vf[j];
                }
                updates.push((*f, df));
                updates.push((*m, dm));
            }
            Op::GridSample { x, grid, dims } => {
                let [n, c, h, w, ho, wo] = *dims;
                let (dx, dg) = kernels::grid_sample_backward(
                    self.value(*x).data(),
                    n,
                    c,
                    h,
                    w,
                    self.value(*grid).data(),
                    ho,
                    wo,
                    dy,
                );
                updates.push((*x, dx));
                updates.push((*grid, dg));
            }
            Op::ChannelsLast { x, dims } => {
                let [n, c, h, w] = *dims;
                let mut d = vec![T::zero(); dy.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..h * w {
                            d[(i * c + ch) * h * w + p] = dy[(i * h * w + p) * c + ch];
                        }
                    }
                }
                updates.push((*x, d));
            }
            Op::IndexSelect0 { x, idx } => {
                let xv = self.value(*x);
                let step = xv.len() / xv.shape()[0].max(1);
                let mut d = vec![T::zero(); xv.len()];
                for (k, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * step..(src + 1) * step], &dy[k * step..(k + 1) * step]);
                }
                updates.push((*x, d));
            }
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (row, (&i, &g)) in idx.iter().zip(dy).enumerate() {
                    d[row * c + i] += g;
                }
                updates.push((*x, d));
            }
            Op::AddBiasLast { x, b } => {
                let dlen = self.value(*b).len();
                let mut db = vec![T::zero(); dlen];
                for (j, &g) in dy.iter().enumerate() {
                    db[j % dlen] += g;
                }
                updates.push((*x, dy.to_vec()));
                updates.push((*b, db));
            }
        }
        for (v, d) in updates {
            self.accumulate(v, d);
        }
    }
}
