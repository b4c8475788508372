//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly as nodes are pushed. `backward` emits gradient
//! computations as new tape nodes, so gradients are themselves differentiable
//! and the gradient-penalty term can be trained through (double backprop).
//! The primitive set is closed under differentiation: the vjp of every op is
//! expressed with ops from the same set, except for pointwise nonlinearities
//! whose curvature is zero almost everywhere (relu-style masks).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major tensor. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product::<usize>().max(1)],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>().max(1), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// NCHW accessors used by the conv kernels.
    fn dim4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-d tensor");
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

// Some op payloads (shapes, scalar arguments) exist only for Debug output;
// the backward pass reads the saved tensors instead.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Sqrt(Var),
    /// Pointwise multiply by a constant mask (relu/abs/clamp derivatives).
    LeakyRelu(Var, f64),
    Abs(Var),
    Clamp(Var, f64, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvXGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        xh: usize,
        xw: usize,
    },
    ConvWGrad {
        g: Var,
        x: Var,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    },
    SumAll(Var),
    Broadcast(Var, Vec<usize>),
    SumPerSample(Var),
    BroadcastPerSample(Var, Vec<usize>),
    SumToChannel(Var),
    BroadcastChannel(Var, Vec<usize>),
    AvgPool2(Var),
    AvgUnpool2(Var, Vec<usize>),
    UpsampleNearest2(Var, usize, usize),
    SumPool2(Var, usize, usize),
    ConcatC(Var, Var),
    SliceC(Var, usize, usize),
    PadC(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    rg: bool,
}

/// Define-by-run tape. One `Graph` per training step; parameters enter as
/// leaves each step.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            rg: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, value: Tensor, rg: bool) -> Var {
        self.nodes.push(Node { value, op, rg });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg || self.nodes[b.0].rg;
        self.push(Op::Add(a, b), t, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg || self.nodes[b.0].rg;
        self.push(Op::Sub(a, b), t, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| -x).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::Neg(a), t, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg || self.nodes[b.0].rg;
        self.push(Op::Mul(a, b), t, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "div shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg || self.nodes[b.0].rg;
        self.push(Op::Div(a, b), t, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x + s).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::AddScalar(a, s), t, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x * s).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::MulScalar(a, s), t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg;
        self.push(Op::Sigmoid(a), t, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x.tanh()).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::Tanh(a), t, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x.ln()).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::Log(a), t, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x.sqrt()).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::Sqrt(a), t, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data
            .iter()
            .map(|x| if *x > 0.0 { *x } else { slope * x })
            .collect();
        let t = Tensor::from_vec(&ta.shape.clone(), data);
        let rg = self.nodes[a.0].rg;
        self.push(Op::LeakyRelu(a, slope), t, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(&ta.shape.clone(), ta.data.iter().map(|x| x.abs()).collect());
        let rg = self.nodes[a.0].rg;
        self.push(Op::Abs(a), t, rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(
            &ta.shape.clone(),
            ta.data.iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        let rg = self.nodes[a.0].rg;
        self.push(Op::Clamp(a, lo, hi), t, rg)
    }

    // -- reductions and broadcasts ---------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.nodes[a.0].rg;
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).item();
        let t = Tensor::from_vec(shape, vec![v; shape.iter().product::<usize>().max(1)]);
        let rg = self.nodes[a.0].rg;
        self.push(Op::Broadcast(a, shape.to_vec()), t, rg)
    }

    /// [N, ...] -> [N], summing all trailing dims.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.shape[0];
        let per = ta.len() / n;
        let data = (0..n)
            .map(|i| ta.data[i * per..(i + 1) * per].iter().sum())
            .collect();
        let t = Tensor::from_vec(&[n], data);
        let rg = self.nodes[a.0].rg;
        self.push(Op::SumPerSample(a), t, rg)
    }

    pub fn broadcast_per_sample(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value(a);
        let n = ta.shape[0];
        assert_eq!(shape[0], n);
        let per = shape.iter().product::<usize>() / n;
        let mut data = Vec::with_capacity(n * per);
        for i in 0..n {
            data.extend(std::iter::repeat(ta.data[i]).take(per));
        }
        let t = Tensor::from_vec(shape, data);
        let rg = self.nodes[a.0].rg;
        self.push(Op::BroadcastPerSample(a, shape.to_vec()), t, rg)
    }

    /// [N,C,H,W] -> [C].
    pub fn sum_to_channel(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        let mut out = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ci] += ta.data[base..base + h * w].iter().sum::<f64>();
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(Op::SumToChannel(a), Tensor::from_vec(&[c], out), rg)
    }

    pub fn broadcast_channel(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(shape.len(), 4);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(ta.shape, vec![c]);
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for ci in 0..c {
                data.extend(std::iter::repeat(ta.data[ci]).take(h * w));
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::BroadcastChannel(a, shape.to_vec()),
            Tensor::from_vec(shape, data),
            rg,
        )
    }

    // -- pooling / resampling --------------------------------------------

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &ta.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y1 = (oy * 2 + 2).min(h);
                    let x1 = (ox * 2 + 2).min(w);
                    let mut acc = 0.0;
                    for y in oy * 2..y1 {
                        for x in ox * 2..x1 {
                            acc += src[y * w + x];
                        }
                    }
                    dst[oy * ow + ox] = acc / ((y1 - oy * 2) * (x1 - ox * 2)) as f64;
                }
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::AvgPool2(a),
            Tensor::from_vec(&[n, c, oh, ow], out),
            rg,
        )
    }

    /// Adjoint of `avg_pool2`: distribute each cell value divided by its cell
    /// count back over the cell.
    pub fn avg_unpool2(&mut self, a: Var, out_shape: &[usize]) -> Var {
        let ta = self.value(a);
        let (n, c, oh, ow) = ta.dim4();
        let (h, w) = (out_shape[2], out_shape[3]);
        assert_eq!(out_shape[0], n);
        assert_eq!(out_shape[1], c);
        assert_eq!(oh, h.div_ceil(2));
        assert_eq!(ow, w.div_ceil(2));
        let mut out = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            let src = &ta.data[nc * oh * ow..(nc + 1) * oh * ow];
            let dst = &mut out[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y1 = (oy * 2 + 2).min(h);
                    let x1 = (ox * 2 + 2).min(w);
                    let v = src[oy * ow + ox] / ((y1 - oy * 2) * (x1 - ox * 2)) as f64;
                    for y in oy * 2..y1 {
                        for x in ox * 2..x1 {
                            dst[y * w + x] += v;
                        }
                    }
                }
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::AvgUnpool2(a, out_shape.to_vec()),
            Tensor::from_vec(out_shape, out),
            rg,
        )
    }

    pub fn upsample_nearest2(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        assert_eq!(h, oh.div_ceil(2));
        assert_eq!(w, ow.div_ceil(2));
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &ta.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::UpsampleNearest2(a, oh, ow),
            Tensor::from_vec(&[n, c, oh, ow], out),
            rg,
        )
    }

    /// Adjoint of `upsample_nearest2`: sum each 2x2 block.
    pub fn sum_pool2(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        assert_eq!(oh, h.div_ceil(2));
        assert_eq!(ow, w.div_ceil(2));
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &ta.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / 2) * ow + x / 2] += src[y * w + x];
                }
            }
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::SumPool2(a, oh, ow),
            Tensor::from_vec(&[n, c, oh, ow], out),
            rg,
        )
    }

    // -- channel concat / slice ------------------------------------------

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dim4();
        let (nb, cb, hb, wb) = tb.dim4();
        assert!(n == nb && h == hb && w == wb, "concat shape mismatch");
        let mut data = Vec::with_capacity((ca + cb) * n * h * w);
        for ni in 0..n {
            data.extend_from_slice(&ta.data[ni * ca * h * w..(ni + 1) * ca * h * w]);
            data.extend_from_slice(&tb.data[ni * cb * h * w..(ni + 1) * cb * h * w]);
        }
        let rg = self.nodes[a.0].rg || self.nodes[b.0].rg;
        self.push(
            Op::ConcatC(a, b),
            Tensor::from_vec(&[n, ca + cb, h, w], data),
            rg,
        )
    }

    pub fn slice_c(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        assert!(c0 < c1 && c1 <= c);
        let mut data = Vec::with_capacity(n * (c1 - c0) * h * w);
        for ni in 0..n {
            let base = ni * c * h * w;
            data.extend_from_slice(&ta.data[base + c0 * h * w..base + c1 * h * w]);
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::SliceC(a, c0, c1),
            Tensor::from_vec(&[n, c1 - c0, h, w], data),
            rg,
        )
    }

    pub fn pad_c(&mut self, a: Var, c0: usize, total_c: usize) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = ta.dim4();
        assert!(c0 + c <= total_c);
        let mut data = vec![0.0; n * total_c * h * w];
        for ni in 0..n {
            let src = &ta.data[ni * c * h * w..(ni + 1) * c * h * w];
            let base = ni * total_c * h * w + c0 * h * w;
            data[base..base + c * h * w].copy_from_slice(src);
        }
        let rg = self.nodes[a.0].rg;
        self.push(
            Op::PadC(a, c0, total_c),
            Tensor::from_vec(&[n, total_c, h, w], data),
            rg,
        )
    }

    // -- convolution ------------------------------------------------------

    /// Zero-padded strided 2-D convolution (correlation orientation),
    /// x: [N,C,H,W], w: [O,C,KH,KW], optional bias [O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let tx = self.value(x);
            let tw = self.value(w);
            let tb = b.map(|bv| self.value(bv));
            conv2d_forward(tx, tw, tb, stride, pad)
        };
        let rg = self.nodes[x.0].rg
            || self.nodes[w.0].rg
            || b.map(|bv| self.nodes[bv.0].rg).unwrap_or(false);
        self.push(Op::Conv2d { x, w, b, stride, pad }, value, rg)
    }

    fn conv_x_grad(&mut self, g: Var, w: Var, stride: usize, pad: usize, xh: usize, xw: usize) -> Var {
        let value = conv_x_grad_forward(self.value(g), self.value(w), stride, pad, xh, xw);
        let rg = self.nodes[g.0].rg || self.nodes[w.0].rg;
        self.push(Op::ConvXGrad { g, w, stride, pad, xh, xw }, value, rg)
    }

    fn conv_w_grad(&mut self, g: Var, x: Var, stride: usize, pad: usize, kh: usize, kw: usize) -> Var {
        let value = conv_w_grad_forward(self.value(g), self.value(x), stride, pad, kh, kw);
        let rg = self.nodes[g.0].rg || self.nodes[x.0].rg;
        self.push(Op::ConvWGrad { g, x, stride, pad, kh, kw }, value, rg)
    }

    // -- backward ---------------------------------------------------------

    /// Reverse-mode sweep from scalar `out`. Returns, for every node index,
    /// the gradient node (None where the node does not influence `out` or
    /// does not require grad). Gradients are ordinary tape nodes and can be
    /// differentiated again.
    pub fn backward(&mut self, out: Var) -> Result<Vec<Option<Var>>> {
        if self.value(out).len() != 1 {
            return Err(Error::NonFinite("backward needs a scalar output".into()));
        }
        if !self.value(out).item().is_finite() {
            return Err(Error::NonFinite("backward seed is not finite".into()));
        }
        let n = self.nodes.len();
        let mut contribs: Vec<Vec<Var>> = vec![Vec::new(); n];
        let seed = self.leaf(Tensor::scalar(1.0), false);
        contribs[out.0].push(seed);
        let mut grads: Vec<Option<Var>> = vec![None; n];
        for i in (0..n).rev() {
            if contribs[i].is_empty() || !self.nodes[i].rg {
                continue;
            }
            let mut g = contribs[i][0];
            for c in contribs[i][1..].to_vec() {
                g = self.add(g, c);
            }
            grads[i] = Some(g);
            let op = self.nodes[i].op.clone();
            self.push_vjps(&op, Var(i), g, &mut contribs);
        }
        Ok(grads)
    }

    fn rg_of(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    fn push_vjps(&mut self, op: &Op, out: Var, g: Var, contribs: &mut [Vec<Var>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg_of(a) {
                    contribs[a.0].push(g);
                }
                if self.rg_of(b) {
                    contribs[b.0].push(g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg_of(a) {
                    contribs[a.0].push(g);
                }
                if self.rg_of(b) {
                    let ng = self.neg(g);
                    contribs[b.0].push(ng);
                }
            }
            Op::Neg(a) => {
                if self.rg_of(a) {
                    let ng = self.neg(g);
                    contribs[a.0].push(ng);
                }
            }
            Op::Mul(a, b) => {
                if self.rg_of(a) {
                    let v = self.mul(g, b);
                    contribs[a.0].push(v);
                }
                if self.rg_of(b) {
                    let v = self.mul(g, a);
                    contribs[b.0].push(v);
                }
            }
            Op::Div(a, b) => {
                if self.rg_of(a) {
                    let v = self.div(g, b);
                    contribs[a.0].push(v);
                }
                if self.rg_of(b) {
                    // -g * a / b^2
                    let bb = self.mul(b, b);
                    let ab = self.div(a, bb);
                    let gab = self.mul(g, ab);
                    let v = self.neg(gab);
                    contribs[b.0].push(v);
                }
            }
            Op::AddScalar(a, _) => {
                if self.rg_of(a) {
                    contribs[a.0].push(g);
                }
            }
            Op::MulScalar(a, s) => {
                if self.rg_of(a) {
                    let v = self.mul_scalar(g, s);
                    contribs[a.0].push(v);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg_of(a) {
                    // y*(1-y), built from the output node so higher-order
                    // derivatives flow
                    let y = out;
                    let one_minus = {
                        let ny = self.neg(y);
                        self.add_scalar(ny, 1.0)
                    };
                    let dy = self.mul(y, one_minus);
                    let v = self.mul(g, dy);
                    contribs[a.0].push(v);
                }
            }
            Op::Tanh(a) => {
                if self.rg_of(a) {
                    let y = out;
                    let yy = self.mul(y, y);
                    let nyy = self.neg(yy);
                    let dy = self.add_scalar(nyy, 1.0);
                    let v = self.mul(g, dy);
                    contribs[a.0].push(v);
                }
            }
            Op::Log(a) => {
                if self.rg_of(a) {
                    let v = self.div(g, a);
                    contribs[a.0].push(v);
                }
            }
            Op::Sqrt(a) => {
                if self.rg_of(a) {
                    let y = out;
                    let two_y = self.mul_scalar(y, 2.0);
                    let v = self.div(g, two_y);
                    contribs[a.0].push(v);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.rg_of(a) {
                    let mask: Vec<f64> = self.value(a)
                        .data
                        .iter()
                        .map(|x| if *x > 0.0 { 1.0 } else { slope })
                        .collect();
                    let shape = self.value(a).shape.clone();
                    let m = self.constant(Tensor::from_vec(&shape, mask));
                    let v = self.mul(g, m);
                    contribs[a.0].push(v);
                }
            }
            Op::Abs(a) => {
                if self.rg_of(a) {
                    let mask: Vec<f64> = self.value(a)
                        .data
                        .iter()
                        .map(|x| if *x >= 0.0 { 1.0 } else { -1.0 })
                        .collect();
                    let shape = self.value(a).shape.clone();
                    let m = self.constant(Tensor::from_vec(&shape, mask));
                    let v = self.mul(g, m);
                    contribs[a.0].push(v);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.rg_of(a) {
                    let mask: Vec<f64> = self.value(a)
                        .data
                        .iter()
                        .map(|x| if *x >= lo && *x <= hi { 1.0 } else { 0.0 })
                        .collect();
                    let shape = self.value(a).shape.clone();
                    let m = self.constant(Tensor::from_vec(&shape, mask));
                    let v = self.mul(g, m);
                    contribs[a.0].push(v);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.rg_of(x) {
                    let (xh, xw) = {
                        let t = self.value(x);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.conv_x_grad(g, w, stride, pad, xh, xw);
                    contribs[x.0].push(v);
                }
                if self.rg_of(w) {
                    let (kh, kw) = {
                        let t = self.value(w);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.conv_w_grad(g, x, stride, pad, kh, kw);
                    contribs[w.0].push(v);
                }
                if let Some(bv) = b {
                    if self.rg_of(bv) {
                        let v = self.sum_to_channel(g);
                        contribs[bv.0].push(v);
                    }
                }
            }
            Op::ConvXGrad { g: g0, w, stride, pad, .. } => {
                // output dx is bilinear in (g0, w)
                if self.rg_of(g0) {
                    let v = self.conv2d(g, w, None, stride, pad);
                    contribs[g0.0].push(v);
                }
                if self.rg_of(w) {
                    let (kh, kw) = {
                        let t = self.value(w);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.conv_w_grad(g0, g, stride, pad, kh, kw);
                    contribs[w.0].push(v);
                }
            }
            Op::ConvWGrad { g: g0, x, stride, pad, .. } => {
                if self.rg_of(g0) {
                    let v = self.conv2d(x, g, None, stride, pad);
                    contribs[g0.0].push(v);
                }
                if self.rg_of(x) {
                    let (xh, xw) = {
                        let t = self.value(x);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.conv_x_grad(g0, g, stride, pad, xh, xw);
                    contribs[x.0].push(v);
                }
            }
            Op::SumAll(a) => {
                if self.rg_of(a) {
                    let shape = self.value(a).shape.clone();
                    let v = self.broadcast(g, &shape);
                    contribs[a.0].push(v);
                }
            }
            Op::Broadcast(a, _) => {
                if self.rg_of(a) {
                    let v = self.sum_all(g);
                    contribs[a.0].push(v);
                }
            }
            Op::SumPerSample(a) => {
                if self.rg_of(a) {
                    let shape = self.value(a).shape.clone();
                    let v = self.broadcast_per_sample(g, &shape);
                    contribs[a.0].push(v);
                }
            }
            Op::BroadcastPerSample(a, _) => {
                if self.rg_of(a) {
                    let v = self.sum_per_sample(g);
                    contribs[a.0].push(v);
                }
            }
            Op::SumToChannel(a) => {
                if self.rg_of(a) {
                    let shape = self.value(a).shape.clone();
                    let v = self.broadcast_channel(g, &shape);
                    contribs[a.0].push(v);
                }
            }
            Op::BroadcastChannel(a, _) => {
                if self.rg_of(a) {
                    let v = self.sum_to_channel(g);
                    contribs[a.0].push(v);
                }
            }
            Op::AvgPool2(a) => {
                if self.rg_of(a) {
                    let shape = self.value(a).shape.clone();
                    let v = self.avg_unpool2(g, &shape);
                    contribs[a.0].push(v);
                }
            }
            Op::AvgUnpool2(a, _) => {
                if self.rg_of(a) {
                    let v = self.avg_pool2(g);
                    contribs[a.0].push(v);
                }
            }
            Op::UpsampleNearest2(a, _, _) => {
                if self.rg_of(a) {
                    let (oh, ow) = {
                        let t = self.value(a);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.sum_pool2(g, oh, ow);
                    contribs[a.0].push(v);
                }
            }
            Op::SumPool2(a, _, _) => {
                if self.rg_of(a) {
                    let (h, w) = {
                        let t = self.value(a);
                        (t.shape[2], t.shape[3])
                    };
                    let v = self.upsample_nearest2(g, h, w);
                    contribs[a.0].push(v);
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.value(a).shape[1];
                let cb = self.value(b).shape[1];
                if self.rg_of(a) {
                    let v = self.slice_c(g, 0, ca);
                    contribs[a.0].push(v);
                }
                if self.rg_of(b) {
                    let v = self.slice_c(g, ca, ca + cb);
                    contribs[b.0].push(v);
                }
            }
            Op::SliceC(a, c0, _) => {
                if self.rg_of(a) {
                    let total = self.value(a).shape[1];
                    let v = self.pad_c(g, c0, total);
                    contribs[a.0].push(v);
                }
            }
            Op::PadC(a, c0, _) => {
                if self.rg_of(a) {
                    let c = self.value(a).shape[1];
                    let v = self.slice_c(g, c0, c0 + c);
                    contribs[a.0].push(v);
                }
            }
        }
    }

}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = x.dim4();
    let (o, cw, kh, kw) = w.dim4();
    assert_eq!(c, cw, "conv channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let dst = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            if let Some(bias) = b {
                dst.fill(bias.data[oi]);
            }
            for ci in 0..c {
                let src = &x.data[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let wbase = ((oi * c + ci) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy_lo, oy_hi) = valid_range(pad, ky, stride, h, oh);
                        let (ox_lo, ox_hi) = valid_range(pad, kx, stride, wd, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let srow = &src[iy * wd..(iy + 1) * wd];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                drow[ox] += wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

/// Output rows oy with 0 <= oy*stride + k - pad < extent.
#[inline]
fn valid_range(pad: usize, k: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = extent + pad - 1;
    let hi = if max_i < k {
        0
    } else {
        (((max_i - k) / stride) + 1).min(out_extent)
    };
    (lo.min(hi), hi)
}

fn conv_x_grad_forward(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    xh: usize,
    xw: usize,
) -> Tensor {
    let (n, o, oh, ow) = g.dim4();
    let (ow_, c, kh, kw) = w.dim4();
    assert_eq!(o, ow_, "conv grad channel mismatch");
    let mut out = vec![0.0; n * c * xh * xw];
    for ni in 0..n {
        for oi in 0..o {
            let src = &g.data[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let dst = &mut out[(ni * c + ci) * xh * xw..(ni * c + ci + 1) * xh * xw];
                let wbase = ((oi * c + ci) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy_lo, oy_hi) = valid_range(pad, ky, stride, xh, oh);
                        let (ox_lo, ox_hi) = valid_range(pad, kx, stride, xw, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let srow = &src[oy * ow..(oy + 1) * ow];
                            let drow = &mut dst[iy * xw..(iy + 1) * xw];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                drow[ix] += wv * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, xh, xw], out)
}

fn conv_w_grad_forward(
    g: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (n, o, oh, ow) = g.dim4();
    let (nx, c, h, wd) = x.dim4();
    assert_eq!(n, nx);
    let mut out = vec![0.0; o * c * kh * kw];
    for ni in 0..n {
        for oi in 0..o {
            let src = &g.data[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let xs = &x.data[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let wbase = ((oi * c + ci) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy_lo, oy_hi) = valid_range(pad, ky, stride, h, oh);
                        let (ox_lo, ox_hi) = valid_range(pad, kx, stride, wd, ow);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let srow = &src[oy * ow..(oy + 1) * ow];
                            let xrow = &xs[iy * wd..(iy + 1) * wd];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                acc += srow[ox] * xrow[ix];
                            }
                        }
                        out[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, c, kh, kw], out)
}
