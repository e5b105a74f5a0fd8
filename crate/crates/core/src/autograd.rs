//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Graphs built with [`Graph::inference`] record values only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::sparse::SparseMatrix;
use crate::tensor::{self, Tensor};

type Backward = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Statistics used by [`Graph::batch_norm`].
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed per-channel mean and (biased) variance.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.record,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.insert(Rc::new(t), true)
    }

    pub fn leaf_rc(&self, t: Rc<Tensor>) -> Var {
        self.insert(t, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.insert(Rc::new(t), false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor>) -> Var {
        self.insert(t, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.numel(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(
            nodes[output.0].value.shape().to_vec(),
            vec![1.0],
        ));
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, &[a, b], move |g| {
            vec![
                Some(g.zip_map(&vb, |g, y| g * y)),
                Some(g.zip_map(&va, |g, x| g * x)),
            ]
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x / y);
        self.push(out, &[a, b], move |g| {
            let ga = g.zip_map(&vb, |g, y| g / y);
            let gb = Tensor::from_fn(g.shape().to_vec(), |i| {
                -g.data()[i] * va.data()[i] / (vb.data()[i] * vb.data()[i])
            });
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], |g| vec![Some(g.clone())])
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&self, a: Var, c: Rc<Tensor>) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(out, &[a], move |g| vec![Some(g.zip_map(&c, |g, y| g * y))])
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|v| v.max(0.0));
        self.push(out, &[a], move |g| {
            vec![Some(g.zip_map(&va, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let y = Rc::new(out.clone());
        self.push(out, &[a], move |g| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        self.push(Tensor::scalar(va.sum()), &[a], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape.to_vec());
        self.push(out, &[a], move |g| vec![Some(g.clone().reshape(old.clone()))])
    }

    /// Mean binary cross-entropy against a constant target, with the
    /// prediction clamped to `[clamp, 1 - clamp]`.
    pub fn bce_mean(&self, p: Var, target: Rc<Tensor>, clamp: f64) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.shape(), target.shape(), "bce shape mismatch");
        let n = vp.numel() as f64;
        let loss: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), &[p], move |g| {
            let s = g.item() / n;
            let grad = vp.zip_map(&target, |p, t| {
                if p < clamp || p > 1.0 - clamp {
                    0.0
                } else {
                    s * (p - t) / (p * (1.0 - p))
                }
            });
            vec![Some(grad)]
        })
    }

    // ------------------------------------------------------------------
    // Layout
    // ------------------------------------------------------------------

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        self.push(Tensor::new([n, total, h, w], out), parts, move |g| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..n {
                for (gr, &c) in grads.iter_mut().zip(&chans) {
                    gr.extend_from_slice(&gd[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::new([n, c, h, w], d)))
                .collect()
        })
    }

    /// Swaps the last two axes of a 3-d tensor.
    pub fn transpose12(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = transpose_last2(&va);
        self.push(out, &[a], |g| vec![Some(transpose_last2(g))])
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `x · w` over the last axis of `x`, with `w` of shape `[K, N]`.
    pub fn linear(&self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = *vx.shape().last().expect("linear on a 0-d tensor");
        assert_eq!(vw.shape().len(), 2, "linear weight must be 2-d");
        assert_eq!(vw.shape()[0], k, "linear inner dimension mismatch");
        let n = vw.shape()[1];
        let rows = vx.numel() / k;
        let mut out = vec![0.0; rows * n];
        tensor::gemm(rows, k, n, 1.0, vx.data(), false, vw.data(), false, 0.0, &mut out);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), &[x, w], move |g| {
            let mut gx = vec![0.0; rows * k];
            tensor::gemm(rows, n, k, 1.0, g.data(), false, vw.data(), true, 0.0, &mut gx);
            let mut gw = vec![0.0; k * n];
            tensor::gemm(k, rows, n, 1.0, vx.data(), true, g.data(), false, 0.0, &mut gw);
            vec![
                Some(Tensor::new(vx.shape().to_vec(), gx)),
                Some(Tensor::new([k, n], gw)),
            ]
        })
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]` (or `[B, N, K]` when
    /// `trans_b`).
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (bs, m, k) = dims3(&va);
        let (bs2, r, c) = dims3(&vb);
        assert_eq!(bs, bs2, "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(c, k, "bmm inner mismatch");
            r
        } else {
            assert_eq!(r, k, "bmm inner mismatch");
            c
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            tensor::gemm(
                m,
                k,
                n,
                1.0,
                &va.data()[i * m * k..],
                false,
                &vb.data()[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new([bs, m, n], out), &[a, b], move |g| {
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let bi = &vb.data()[i * k * n..(i + 1) * k * n];
                let ai = &va.data()[i * m * k..(i + 1) * m * k];
                // dA = G · op(B)^T
                tensor::gemm(m, n, k, 1.0, gi, false, bi, !trans_b, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                if trans_b {
                    // B is [n, k]: dB = G^T · A
                    tensor::gemm(n, m, k, 1.0, gi, true, ai, false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
                } else {
                    // B is [k, n]: dB = A^T · G
                    tensor::gemm(k, m, n, 1.0, ai, true, gi, false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
                }
            }
            vec![
                Some(Tensor::new(va.shape().to_vec(), ga)),
                Some(Tensor::new(vb.shape().to_vec(), gb)),
            ]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let va = self.value(a);
        let k = *va.shape().last().unwrap();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let y = Rc::new(Tensor::new(va.shape().to_vec(), out.clone()));
        self.push(Tensor::new(va.shape().to_vec(), out), &[a], move |g| {
            let mut gx = vec![0.0; y.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(k)
                .zip(y.data().chunks(k))
                .zip(gx.chunks_mut(k))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx))]
        })
    }

    /// Applies one fixed sparse operator per batch item: `out[b] = P[b] · x[b]`
    /// with `x` of shape `[B, N, C]`.
    pub fn spmm(&self, ops: Rc<Vec<SparseMatrix>>, x: Var) -> Var {
        let vx = self.value(x);
        let (bs, n, c) = dims3(&vx);
        assert_eq!(ops.len(), bs, "one operator per batch item");
        let mut out = vec![0.0; bs * n * c];
        for (b, p) in ops.iter().enumerate() {
            assert_eq!(p.dim(), n, "operator size mismatch");
            p.mul_dense(&vx.data()[b * n * c..(b + 1) * n * c], c, &mut out[b * n * c..(b + 1) * n * c]);
        }
        self.push(Tensor::new([bs, n, c], out), &[x], move |g| {
            let mut gx = vec![0.0; bs * n * c];
            for (b, p) in ops.iter().enumerate() {
                p.transpose_mul_dense(&g.data()[b * n * c..(b + 1) * n * c], c, &mut gx[b * n * c..(b + 1) * n * c]);
            }
            vec![Some(Tensor::new([bs, n, c], gx))]
        })
    }

    // ------------------------------------------------------------------
    // Convolution and pooling
    // ------------------------------------------------------------------

    /// Dense 2-d convolution: `x [B, Ci, H, W]`, `w [Co, Ci, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (bs, ci, h, wd) = vx.dims4();
        let (co, ci2, k, k2) = vw.dims4();
        assert_eq!(ci, ci2, "conv input channels mismatch");
        assert_eq!(k, k2, "square kernels only");
        let ho = tensor::conv_out(h, k, stride, pad);
        let wo = tensor::conv_out(wd, k, stride, pad);
        let kk = ci * k * k;
        let plane = ho * wo;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; bs * co * plane];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * plane] };
        for b in 0..bs {
            let xb = &vx.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
            let src: &[f64] = if pointwise {
                xb
            } else {
                tensor::im2col(xb, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            tensor::gemm(co, kk, plane, 1.0, vw.data(), false, src, false, 0.0, &mut out[b * co * plane..(b + 1) * co * plane]);
        }
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            add_channel_bias(&mut out, vb.data(), bs, co, plane);
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let need_x = self.requires_grad(x);
        self.push(Tensor::new([bs, co, ho, wo], out), &parents, move |g| {
            let mut gx = vec![0.0; if need_x { bs * ci * h * wd } else { 0 }];
            let mut gw = vec![0.0; co * kk];
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * plane] };
            let mut dcols = if pointwise { Vec::new() } else { vec![0.0; kk * plane] };
            for b in 0..bs {
                let gb = &g.data()[b * co * plane..(b + 1) * co * plane];
                let xb = &vx.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
                if pointwise {
                    tensor::gemm(co, plane, kk, 1.0, gb, false, xb, true, 1.0, &mut gw);
                    if need_x {
                        let gxb = &mut gx[b * ci * h * wd..(b + 1) * ci * h * wd];
                        tensor::gemm(kk, co, plane, 1.0, vw.data(), true, gb, false, 0.0, gxb);
                    }
                } else {
                    tensor::im2col(xb, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                    tensor::gemm(co, plane, kk, 1.0, gb, false, &cols, true, 1.0, &mut gw);
                    if need_x {
                        let gxb = &mut gx[b * ci * h * wd..(b + 1) * ci * h * wd];
                        tensor::gemm(kk, co, plane, 1.0, vw.data(), true, gb, false, 0.0, &mut dcols);
                        tensor::col2im(&dcols, ci, h, wd, k, stride, pad, ho, wo, gxb);
                    }
                }
            }
            let mut grads = vec![
                need_x.then(|| Tensor::new([bs, ci, h, wd], gx)),
                Some(Tensor::new([co, ci, k, k], gw)),
            ];
            if has_bias {
                grads.push(Some(channel_sums(g.data(), bs, co, plane)));
            }
            grads
        })
    }

    /// Depth-wise 2-d convolution with unit stride and "same" padding:
    /// `x [B, C, H, W]`, `w [C, 1, k, k]`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (bs, c, h, wd) = vx.dims4();
        let (c2, one, k, _) = vw.dims4();
        assert!(c == c2 && one == 1, "depth-wise weight must be [C, 1, k, k]");
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; bs * c * h * wd];
        for b in 0..bs {
            for ch in 0..c {
                let src = &vx.data()[(b * c + ch) * h * wd..(b * c + ch + 1) * h * wd];
                let ker = &vw.data()[ch * k * k..(ch + 1) * k * k];
                let dst = &mut out[(b * c + ch) * h * wd..(b * c + ch + 1) * h * wd];
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad;
                                if ix >= 0 && ix < wd as isize {
                                    acc += ker[ky * k + kx] * src[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        dst[y * wd + xx] = acc;
                    }
                }
            }
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), bs, c, h * wd);
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push(Tensor::new([bs, c, h, wd], out), &parents, move |g| {
            let mut gx = vec![0.0; bs * c * h * wd];
            let mut gw = vec![0.0; c * k * k];
            for b in 0..bs {
                for ch in 0..c {
                    let base = (b * c + ch) * h * wd;
                    let src = &vx.data()[base..base + h * wd];
                    let gsrc = &g.data()[base..base + h * wd];
                    let ker = &vw.data()[ch * k * k..(ch + 1) * k * k];
                    for y in 0..h {
                        for xx in 0..wd {
                            let gv = gsrc[y * wd + xx];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = xx as isize + kx as isize - pad;
                                    if ix >= 0 && ix < wd as isize {
                                        let si = iy as usize * wd + ix as usize;
                                        gw[ch * k * k + ky * k + kx] += gv * src[si];
                                        gx[base + si] += gv * ker[ky * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new([bs, c, h, wd], gx)),
                Some(Tensor::new([c, 1, k, k], gw)),
            ];
            if has_bias {
                grads.push(Some(channel_sums(g.data(), bs, c, h * wd)));
            }
            grads
        })
    }

    /// Per-channel normalization with learnable scale and shift. Returns the
    /// batch mean and biased variance when normalizing with batch statistics.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let (vx, vg, vbeta) = (self.value(x), self.value(gamma), self.value(beta));
        let (bs, c, h, w) = vx.dims4();
        let plane = h * w;
        let m = (bs * plane) as f64;
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..bs {
                        s += vx.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut v = 0.0;
                    for b in 0..bs {
                        for &xv in &vx.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            v += (xv - mean[ch]) * (xv - mean[ch]);
                        }
                    }
                    var[ch] = v / m;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.numel()];
        let mut out = vec![0.0; vx.numel()];
        for b in 0..bs {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (vx.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * vg.data()[ch] + vbeta.data()[ch];
                }
            }
        }
        let stats_out = batch.then(|| (mean.clone(), var.clone()));
        let gvals = Rc::clone(&vg);
        let var_node = self.push(Tensor::new([bs, c, h, w], out), &[x, gamma, beta], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for b in 0..bs {
                    let base = (b * c + ch) * plane;
                    for i in base..base + plane {
                        sum_g += gd[i];
                        sum_gx += gd[i] * xhat[i];
                    }
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let scale = gvals.data()[ch] * inv_std[ch];
                for b in 0..bs {
                    let base = (b * c + ch) * plane;
                    for i in base..base + plane {
                        gx[i] = if batch {
                            scale * (gd[i] - sum_g / m - xhat[i] * sum_gx / m)
                        } else {
                            scale * gd[i]
                        };
                    }
                }
            }
            vec![
                Some(Tensor::new([bs, c, h, w], gx)),
                Some(Tensor::new([c], ggamma)),
                Some(Tensor::new([c], gbeta)),
            ]
        });
        (var_node, stats_out)
    }

    /// Non-overlapping `k × k` average pooling of `[B, C, H, W]`.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let (bs, c, h, w) = vx.dims4();
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible dims");
        let out = tensor::block_mean(vx.data(), bs * c, h, w, k);
        let (ho, wo) = (h / k, w / k);
        self.push(Tensor::new([bs, c, ho, wo], out), &[x], move |g| {
            let inv = 1.0 / (k * k) as f64;
            let mut gx = vec![0.0; bs * c * h * w];
            for p in 0..bs * c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = g.data()[(p * ho + y / k) * wo + xx / k] * inv;
                    }
                }
            }
            vec![Some(Tensor::new([bs, c, h, w], gx))]
        })
    }

    /// Bilinear resampling of `[B, C, H, W]` to `[B, C, ho, wo]`.
    pub fn resize_bilinear(&self, x: Var, ho: usize, wo: usize) -> Var {
        let vx = self.value(x);
        let (bs, c, h, w) = vx.dims4();
        let out = tensor::resize_bilinear(vx.data(), bs * c, h, w, ho, wo);
        self.push(Tensor::new([bs, c, ho, wo], out), &[x], move |g| {
            let ty = tensor::bilinear_taps(ho, h);
            let tx = tensor::bilinear_taps(wo, w);
            let mut gx = vec![0.0; bs * c * h * w];
            for p in 0..bs * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g.data()[(p * ho + oy) * wo + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(Tensor::new([bs, c, h, w], gx))]
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        &[a, b, c] => (a, b, c),
        s => panic!("expected a 3-d tensor, got {s:?}"),
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let (bs, m, n) = dims3(t);
    let mut out = vec![0.0; t.numel()];
    for b in 0..bs {
        for i in 0..m {
            for j in 0..n {
                out[(b * n + j) * m + i] = t.data()[(b * m + i) * n + j];
            }
        }
    }
    Tensor::new([bs, n, m], out)
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], bs: usize, c: usize, plane: usize) {
    for b in 0..bs {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums(g: &[f64], bs: usize, c: usize, plane: usize) -> Tensor {
    let mut s = vec![0.0; c];
    for b in 0..bs {
        for (ch, acc) in s.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += g[base..base + plane].iter().sum::<f64>();
        }
    }
    Tensor::new([c], s)
}
