//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation stores
//! its output value eagerly and records enough to push gradients back to its
//! inputs. Nodes that do not depend on any gradient-requiring leaf are never
//! visited by [`Graph::backward`].

use rand::Rng;

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics (training) or frozen running statistics.
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        alpha: f32,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    MeanPerItem {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        local_grads: Vec<Tensor>,
    },
    Combine {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// `c = a·b + beta·c` where `a` is logically `[m,k]` and `b` is `[k,n]`;
/// the `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_n(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let cols_n = g.cols_n();
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * plane..(ni * g.c + ci + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.s + ki) as isize - g.p as isize;
                        let dst = &mut dst_row[(ni * g.ho + oy) * g.wo..(ni * g.ho + oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.s + kj) as isize - g.p as isize;
                            *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols_n = g.cols_n();
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let dst = &mut dx[(ni * g.c + ci) * plane..(ni * g.c + ci + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.s + ki) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[(ni * g.ho + oy) * g.wo..(ni * g.ho + oy + 1) * g.wo];
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * g.s + kj) as isize - g.p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// A constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// 2-D convolution, NCHW input, `[out, in, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be [out,in,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            s: stride,
            p: pad,
            ho: conv_out(xs[2], ws[2], stride, pad),
            wo: conv_out(xs[3], ws[3], stride, pad),
        };
        let out_c = ws[0];
        let rows = geom.c * geom.k * geom.k;
        let cols_n = geom.cols_n();
        let mut cols = vec![0.0; rows * cols_n];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut mat = vec![0.0; out_c * cols_n];
        gemm(out_c, rows, cols_n, self.value(w).data(), false, &cols, false, &mut mat, 0.0);
        let hw = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.n * out_c * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for o in 0..out_c {
            let bo = bias.as_ref().map_or(0.0, |bv| bv[o]);
            for ni in 0..geom.n {
                let src = &mat[o * cols_n + ni * hw..o * cols_n + (ni + 1) * hw];
                let dst = &mut out[(ni * out_c + o) * hw..(ni * out_c + o + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[geom.n, out_c, geom.ho, geom.wo], out);
        self.push(value, needs, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Fully connected layer: `x [N,F]`, `w [O,F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N,F]");
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        gemm(n, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (d, bb) in row.iter_mut().zip(bv) {
                    *d += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[n, o], out), needs, Op::Linear { x, w, b })
    }

    /// Batch normalisation over N, H, W. With `stats = None` the batch
    /// statistics are used and returned as `(mean, biased variance)`;
    /// otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        stats: Option<(&[f32], &[f32])>,
    ) -> (Var, Vec<f32>, Vec<f32>) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        let count = (n * hw) as f32;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        s += xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = m as f32;
                    var[ci] = (sq / count as f64) as f32;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for i in range {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_vec(&xs, out),
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (v, mean, var)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f32) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { alpha * v });
        let needs = self.needs(x);
        self.push(value, needs, Op::LeakyRelu { x, alpha })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid { x })
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        let keep = 1.0 - p;
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout { x, mask })
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * ho * wo];
        let mut argmax = vec![0u32; nc * ho * wo];
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if xv[i] > best {
                                best = xv[i];
                                idx = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = idx as u32;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[xs[0], xs[1], ho, wo], out), needs, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], out), needs, Op::Upsample2 { x })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.shape(inputs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?} on axis {axis}");
            }
            out_shape[axis] += s[axis];
        }
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::from_vec(&out_shape, out),
            needs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Selects items along axis 0 (repetition allowed).
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        let per: usize = xs[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * per);
        for &i in index {
            assert!(i < xs[0], "gather index {i} out of range {}", xs[0]);
            out.extend_from_slice(&xv[i * per..(i + 1) * per]);
        }
        let mut shape = xs.clone();
        shape[0] = index.len();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, out),
            needs,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(value, needs, Op::Reshape { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale { x, factor })
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.dim(0);
        let per = t.len() / n;
        let out = t
            .data()
            .chunks(per)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / per as f64) as f32)
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n], out), needs, Op::MeanPerItem { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m as f32), needs, Op::MeanAll { x })
    }

    /// Scalar node whose value and per-input derivatives were computed
    /// outside the graph (closed-form losses).
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f32, local_grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), local_grads.len());
        for (&v, g) in inputs.iter().zip(&local_grads) {
            assert_eq!(self.shape(v), g.shape(), "local gradient shape mismatch");
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::scalar(value),
            needs,
            Op::Custom {
                inputs: inputs.to_vec(),
                local_grads,
            },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "combine expects scalars");
            total += w as f64 * self.value(v).item() as f64;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total as f32), needs, Op::Combine { terms: terms.to_vec() })
    }

    fn accumulate(&mut self, v: Var, grad: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&grad),
            None => node.grad = Some(grad),
        }
    }

    /// Back-propagates from `root` with seed gradient 1 on each element.
    /// Leaf gradients are retained; intermediate ones are released.
    pub fn backward(&mut self, root: Var) {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed);
    }

    pub fn backward_with(&mut self, root: Var, seed: Tensor) {
        if !self.needs(root) {
            return;
        }
        self.accumulate(root, seed);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, op, grad);
        }
    }

    fn backward_op(&mut self, i: usize, op: Op, dy: Tensor) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => self.backward_conv(i, x, w, b, stride, pad, &dy),
            Op::Linear { x, w, b } => {
                let xs = self.shape(x).to_vec();
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape(w)[0];
                if self.needs(x) {
                    let mut dx = vec![0.0; n * f];
                    gemm(n, o, f, dy.data(), false, self.value(w).data(), false, &mut dx, 0.0);
                    self.accumulate(x, Tensor::from_vec(&xs, dx));
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; o * f];
                    gemm(o, n, f, dy.data(), true, self.value(x).data(), false, &mut dw, 0.0);
                    self.accumulate(w, Tensor::from_vec(&[o, f], dw));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![0.0; o];
                    for row in dy.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, Tensor::from_vec(&[o], db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let count = (n * hw) as f32;
                let dyv = dy.data();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for j in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sum_dy[ci] += dyv[j];
                            sum_dy_xhat[ci] += dyv[j] * xhat[j];
                        }
                    }
                }
                if self.needs(x) {
                    let gv = self.value(gamma).data().to_vec();
                    let mut dx = vec![0.0; dyv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = gv[ci] * inv_std[ci];
                            for j in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[j] = if batch_stats {
                                    k / count * (count * dyv[j] - sum_dy[ci] - xhat[j] * sum_dy_xhat[ci])
                                } else {
                                    k * dyv[j]
                                };
                            }
                        }
                    }
                    self.accumulate(x, Tensor::from_vec(&xs, dx));
                }
                if self.needs(gamma) {
                    self.accumulate(gamma, Tensor::from_vec(&[c], sum_dy_xhat));
                }
                if self.needs(beta) {
                    self.accumulate(beta, Tensor::from_vec(&[c], sum_dy));
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { alpha * d })
                    .collect();
                let g = Tensor::from_vec(xv.shape(), data);
                self.accumulate(x, g);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let data = y.data().iter().zip(dy.data()).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                let g = Tensor::from_vec(y.shape(), data);
                self.accumulate(x, g);
            }
            Op::Dropout { x, mask } => {
                let data = dy.data().iter().zip(&mask).map(|(d, m)| d * m).collect();
                let g = Tensor::from_vec(dy.shape(), data);
                self.accumulate(x, g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(x));
                let dxv = dx.data_mut();
                for (&idx, &d) in argmax.iter().zip(dy.data()) {
                    dxv[idx as usize] += d;
                }
                self.accumulate(x, dx);
            }
            Op::Upsample2 { x } => {
                let xs = self.shape(x).to_vec();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; nc * h * w];
                let dyv = dy.data();
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += dyv[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(x, Tensor::from_vec(&xs, dx));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = dy.shape()[..axis].iter().product();
                let chunks: Vec<usize> = inputs.iter().map(|&v| self.value(v).len() / outer).collect();
                let row: usize = chunks.iter().sum();
                let dyv = dy.data();
                let mut offset = 0;
                for (&v, &chunk) in inputs.iter().zip(&chunks) {
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(chunk * outer);
                        for o in 0..outer {
                            g.extend_from_slice(&dyv[o * row + offset..o * row + offset + chunk]);
                        }
                        let shape = self.shape(v).to_vec();
                        self.accumulate(v, Tensor::from_vec(&shape, g));
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, index } => {
                let mut dx = Tensor::zeros(self.shape(x));
                let per = dx.len() / dx.dim(0);
                let dxv = dx.data_mut();
                for (k, &src) in index.iter().enumerate() {
                    for (d, v) in dxv[src * per..(src + 1) * per].iter_mut().zip(&dy.data()[k * per..(k + 1) * per]) {
                        *d += v;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape { x } => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, dy.reshape(&shape));
            }
            Op::Add { a, b } => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy);
            }
            Op::Scale { x, factor } => {
                self.accumulate(x, dy.map(|d| d * factor));
            }
            Op::MeanPerItem { x } => {
                let shape = self.shape(x).to_vec();
                let n = shape[0];
                let per: usize = shape[1..].iter().product();
                let mut dx = Vec::with_capacity(n * per);
                for &d in dy.data() {
                    dx.extend(std::iter::repeat_n(d / per as f32, per));
                }
                self.accumulate(x, Tensor::from_vec(&shape, dx));
            }
            Op::MeanAll { x } => {
                let shape = self.shape(x).to_vec();
                let len: usize = shape.iter().product();
                self.accumulate(x, Tensor::full(&shape, dy.item() / len as f32));
            }
            Op::Custom { inputs, local_grads } => {
                let up = dy.item();
                for (v, g) in inputs.into_iter().zip(local_grads) {
                    self.accumulate(v, g.map(|d| d * up));
                }
            }
            Op::Combine { terms } => {
                let up = dy.item();
                for (v, w) in terms {
                    self.accumulate(v, Tensor::scalar(up * w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(&mut self, _i: usize, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, dy: &Tensor) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            s: stride,
            p: pad,
            ho: conv_out(xs[2], ws[2], stride, pad),
            wo: conv_out(xs[3], ws[3], stride, pad),
        };
        let out_c = ws[0];
        let rows = geom.c * geom.k * geom.k;
        let cols_n = geom.cols_n();
        let hw = geom.ho * geom.wo;
        let mut dmat = vec![0.0; out_c * cols_n];
        let dyv = dy.data();
        for ni in 0..geom.n {
            for o in 0..out_c {
                dmat[o * cols_n + ni * hw..o * cols_n + (ni + 1) * hw]
                    .copy_from_slice(&dyv[(ni * out_c + o) * hw..(ni * out_c + o + 1) * hw]);
            }
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let db = (0..out_c).map(|o| dmat[o * cols_n..(o + 1) * cols_n].iter().sum()).collect();
            self.accumulate(b, Tensor::from_vec(&[out_c], db));
        }
        if self.needs(w) {
            let mut cols = vec![0.0; rows * cols_n];
            im2col(self.value(x).data(), &geom, &mut cols);
            let mut dw = vec![0.0; out_c * rows];
            gemm(out_c, cols_n, rows, &dmat, false, &cols, true, &mut dw, 0.0);
            self.accumulate(w, Tensor::from_vec(&ws, dw));
        }
        if self.needs(x) {
            let mut dcols = vec![0.0; rows * cols_n];
            gemm(rows, out_c, cols_n, self.value(w).data(), true, &dmat, false, &mut dcols, 0.0);
            let mut dx = vec![0.0; xs.iter().product()];
            col2im(&dcols, &geom, &mut dx);
            self.accumulate(x, Tensor::from_vec(&xs, dx));
        }
    }
}
