//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is an eager tape: every op computes its forward value at call
//! time and records enough to replay gradients in reverse. Summation order
//! inside every kernel is fixed, so forward and backward are bit-deterministic
//! for identical inputs.
//!
//! Broadcasting is right-aligned: trailing extents must match, or be 1, or be
//! missing on the smaller operand.

use crate::error::{Error, Result};
use crate::real::Real;

/// Plain dense tensor value, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; numel],
        }
    }

    pub fn scalar(x: R) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn filled(shape: &[usize], x: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Convert element type (used by the 64-bit gradient-check harness).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedKind {
    Sum,
    Mean,
    Max,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Tanh-approximation constant for GELU: sqrt(2/pi).
pub const GELU_C: f64 = 0.7978845608;
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Reduce {
        kind: RedKind,
        a: usize,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Layernorm {
        a: usize,
        axis: usize,
        eps: f64,
    },
    GroupNorm {
        a: usize,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Upsample {
        a: usize,
        factor: usize,
        mode: UpsampleMode,
    },
    IndexSelect {
        a: usize,
        axis: usize,
        idx: Vec<usize>,
    },
    GatherTk {
        a: usize,
        tok: Vec<Vec<usize>>,
        ch: Vec<Vec<usize>>,
    },
    ScatterTk {
        a: usize,
        tok: Vec<Vec<usize>>,
        ch: Vec<Vec<usize>>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        ignore: Option<i64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    requires_grad: bool,
    op: Op,
}

/// Eager autodiff tape.
#[derive(Debug)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
}

// ---------------------------------------------------------------------------
// shape helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Dimension(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` as seen from broadcast shape `out`, with 0
/// for broadcast extents.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let _ = pad;
    strides
}

/// Iterate the broadcast output space, calling f(out_linear, off_a, off_b).
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut offa = 0usize;
    let mut offb = 0usize;
    for lin in 0..numel {
        f(lin, offa, offb);
        // increment multi-index with carry
        for d in (0..rank).rev() {
            idx[d] += 1;
            offa += sa[d];
            offb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            offa -= sa[d] * out[d];
            offb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn axis_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if n == 0 {
        return Err(Error::Dimension(format!(
            "empty axis {} in shape {:?}",
            axis, shape
        )));
    }
    Ok((outer, n, inner))
}

fn check_indices(idx: &[usize], extent: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; extent];
    for &i in idx {
        if i >= extent {
            return Err(Error::Index(format!(
                "{} index {} out of range (extent {})",
                what, i, extent
            )));
        }
        if seen[i] {
            return Err(Error::Index(format!("duplicate {} index {}", what, i)));
        }
        seen[i] = true;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<R>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(R::from_f64(x)))
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        for &x in &self.nodes[v.0].value.data {
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in {}",
                    context
                )));
            }
        }
        Ok(())
    }

    // -- matmul -------------------------------------------------------------

    /// Batched matrix product. `a` is [.., M, K]; `b` is [.., K, P] (or
    /// [.., P, K] with `transpose_b`). Batch extents must match, or `b` may
    /// be rank 2 and is shared across the batch.
    pub fn matmul_opts(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2, got {:?} and {:?}",
                ashape, bshape
            )));
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, p) = if transpose_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let batch_a: usize = ashape[..ashape.len() - 2].iter().product();
        let shared_b = bshape.len() == 2;
        if !shared_b && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2] {
            return Err(Error::Dimension(format!(
                "matmul batch extents disagree: {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(p);
        let mut out = vec![R::ZERO; batch_a * m * p];
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        for batch in 0..batch_a {
            let ao = batch * m * ka;
            let bo = if shared_b { 0 } else { batch * ka * p };
            let co = batch * m * p;
            if transpose_b {
                // b slice is [P, K]
                for i in 0..m {
                    let arow = &ad[ao + i * ka..ao + (i + 1) * ka];
                    let crow = &mut out[co + i * p..co + i * p + p];
                    for (j, c) in crow.iter_mut().enumerate() {
                        let brow = &bd[bo + j * ka..bo + (j + 1) * ka];
                        let mut s = R::ZERO;
                        for (&av, &bv) in arow.iter().zip(brow) {
                            s += av * bv;
                        }
                        *c = s;
                    }
                }
            } else {
                for i in 0..m {
                    let arow = &ad[ao + i * ka..ao + (i + 1) * ka];
                    let crow = &mut out[co + i * p..co + i * p + p];
                    for (k, &av) in arow.iter().enumerate() {
                        let brow = &bd[bo + k * p..bo + (k + 1) * p];
                        for (c, &bv) in crow.iter_mut().zip(brow) {
                            *c += av * bv;
                        }
                    }
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Matmul {
                a: a.0,
                b: b.0,
                transpose_b,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opts(a, b, false)
    }

    /// a @ b^T on the trailing two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opts(a, b, true)
    }

    // -- elementwise --------------------------------------------------------

    pub fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let sa = broadcast_strides(self.shape(a), &out_shape);
        let sb = broadcast_strides(self.shape(b), &out_shape);
        let mut out = vec![R::ZERO; out_shape.iter().product()];
        {
            let ad = &self.nodes[a.0].value.data;
            let bd = &self.nodes[b.0].value.data;
            let mut err = None;
            for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| {
                let (x, y) = (ad[oa], bd[ob]);
                out[lin] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => {
                        if y == R::ZERO && err.is_none() {
                            err = Some(Error::Domain("division by zero".into()));
                        }
                        x / y
                    }
                };
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(ad.data.len());
        for &x in &ad.data {
            let xf = x.to_f64();
            let y = match kind {
                UnKind::Neg => -x,
                UnKind::Exp => x.exp(),
                UnKind::Log => {
                    if xf <= 0.0 {
                        return Err(Error::Domain(format!("log of non-positive value {}", xf)));
                    }
                    x.ln()
                }
                UnKind::Sqrt => {
                    if xf < 0.0 {
                        return Err(Error::Domain(format!("sqrt of negative value {}", xf)));
                    }
                    x.sqrt()
                }
                UnKind::Relu => x.maximum(R::ZERO),
                UnKind::Gelu => {
                    let inner = GELU_C * (xf + GELU_A * xf * xf * xf);
                    R::from_f64(0.5 * xf * (1.0 + inner.tanh()))
                }
                UnKind::Sigmoid => {
                    // stable in both tails
                    let y = if xf >= 0.0 {
                        1.0 / (1.0 + (-xf).exp())
                    } else {
                        let e = xf.exp();
                        e / (1.0 + e)
                    };
                    R::from_f64(y)
                }
            };
            out.push(y);
        }
        let shape = ad.shape.clone();
        let rg = self.req(a);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Unary { kind, a: a.0 },
        ))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sqrt, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, a)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Gelu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, a)
    }

    /// Multiply by a compile-time constant (no gradient to the constant).
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ad = &self.nodes[a.0].value;
        let cr = R::from_f64(c);
        let data = ad.data.iter().map(|&x| x * cr).collect();
        let shape = ad.shape.clone();
        let rg = self.req(a);
        self.push(Tensor { shape, data }, rg, Op::Scale { a: a.0, c })
    }

    // -- reductions ---------------------------------------------------------

    pub fn reduce(&mut self, kind: RedKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        let (outer, n, inner, out_shape) = match axis {
            Some(ax) => {
                let (o, n, i) = axis_dims(&ad.shape, ax)?;
                let mut s = ad.shape.clone();
                s.remove(ax);
                (o, n, i, s)
            }
            None => (1usize, ad.numel().max(1), 1usize, vec![]),
        };
        if ad.numel() == 0 {
            return Err(Error::Dimension("reduce over empty tensor".into()));
        }
        let mut out = vec![R::ZERO; outer * inner];
        let mut argmax = Vec::new();
        let nn = R::from_f64(n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| ad.data[o * n * inner + j * inner + i];
                let v = match kind {
                    RedKind::Sum => {
                        let mut s = R::ZERO;
                        for j in 0..n {
                            s += at(j);
                        }
                        s
                    }
                    RedKind::Mean => {
                        let mut s = R::ZERO;
                        for j in 0..n {
                            s += at(j);
                        }
                        s / nn
                    }
                    RedKind::Max => {
                        let mut best = at(0);
                        let mut bj = 0usize;
                        for j in 1..n {
                            if at(j) > best {
                                best = at(j);
                                bj = j;
                            }
                        }
                        argmax.push(bj);
                        best
                    }
                    RedKind::Variance => {
                        let mut s = R::ZERO;
                        for j in 0..n {
                            s += at(j);
                        }
                        let mu = s / nn;
                        let mut v = R::ZERO;
                        for j in 0..n {
                            let d = at(j) - mu;
                            v += d * d;
                        }
                        v / nn
                    }
                };
                out[o * inner + i] = v;
            }
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Reduce {
                kind,
                a: a.0,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(RedKind::Sum, a, axis)
    }
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(RedKind::Mean, a, axis)
    }
    pub fn max_reduce(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(RedKind::Max, a, axis)
    }
    pub fn variance(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(RedKind::Variance, a, axis)
    }

    // -- normalization / softmax -------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        let (outer, n, inner) = axis_dims(&ad.shape, axis)?;
        let mut out = vec![R::ZERO; ad.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = ad.data[base];
                for j in 1..n {
                    let v = ad.data[base + j * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = R::ZERO;
                for j in 0..n {
                    let e = (ad.data[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        let shape = ad.shape.clone();
        let rg = self.req(a);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Softmax { a: a.0, axis },
        ))
    }

    /// Standardize along `axis` (population variance), no affine.
    pub fn layernorm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        let (outer, n, inner) = axis_dims(&ad.shape, axis)?;
        let nn = R::from_f64(n as f64);
        let epsr = R::from_f64(eps);
        let mut out = vec![R::ZERO; ad.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut s = R::ZERO;
                for j in 0..n {
                    s += ad.data[base + j * inner];
                }
                let mu = s / nn;
                let mut v = R::ZERO;
                for j in 0..n {
                    let d = ad.data[base + j * inner] - mu;
                    v += d * d;
                }
                let std = (v / nn + epsr).sqrt();
                for j in 0..n {
                    out[base + j * inner] = (ad.data[base + j * inner] - mu) / std;
                }
            }
        }
        let shape = ad.shape.clone();
        let rg = self.req(a);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Layernorm { a: a.0, axis, eps },
        ))
    }

    /// Group normalization over [B, C, H, W], no affine.
    pub fn groupnorm(&mut self, a: Var, groups: usize, eps: f64) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        if ad.rank() != 4 {
            return Err(Error::Dimension(format!(
                "groupnorm expects [B,C,H,W], got {:?}",
                ad.shape
            )));
        }
        let (b, c, h, w) = (ad.shape[0], ad.shape[1], ad.shape[2], ad.shape[3]);
        if c % groups != 0 {
            return Err(Error::Dimension(format!(
                "channels {} not divisible by {} groups",
                c, groups
            )));
        }
        let gs = c / groups * h * w;
        let nn = R::from_f64(gs as f64);
        let epsr = R::from_f64(eps);
        let mut out = vec![R::ZERO; ad.numel()];
        for bi in 0..b {
            for g in 0..groups {
                let base = bi * c * h * w + g * gs;
                let mut s = R::ZERO;
                for j in 0..gs {
                    s += ad.data[base + j];
                }
                let mu = s / nn;
                let mut v = R::ZERO;
                for j in 0..gs {
                    let d = ad.data[base + j] - mu;
                    v += d * d;
                }
                let std = (v / nn + epsr).sqrt();
                for j in 0..gs {
                    out[base + j] = (ad.data[base + j] - mu) / std;
                }
            }
        }
        let shape = ad.shape.clone();
        let rg = self.req(a);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::GroupNorm {
                a: a.0,
                groups,
                eps,
            },
        ))
    }

    // -- convolution / resampling -------------------------------------------

    /// Output positions whose input index `o*stride + k - pad` stays inside
    /// [0, in_len); keeps the convolution inner loops branch-free.
    fn conv_out_range(
        k: usize,
        pad: usize,
        stride: usize,
        in_len: usize,
        out_len: usize,
    ) -> (usize, usize) {
        if k >= in_len + pad {
            return (0, 0);
        }
        let lo = if k < pad {
            (pad - k + stride - 1) / stride
        } else {
            0
        };
        let hi = ((in_len + pad - k - 1) / stride + 1).min(out_len);
        (lo, hi.max(lo))
    }

    /// Cross-correlation over [B, Cin, H, W] with weight [Cout, Cin, kh, kw].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects [B,Cin,H,W] and [Cout,Cin,kh,kw], got {:?} and {:?}",
                xs, ws
            )));
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != cin2 {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?} vs weight {:?}",
                xs, ws
            )));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} does not fit padded input {}x{} (pad {}, stride {})",
                kh, kw, h, wd, padding, stride
            )));
        }
        if let Some(bias) = b {
            if self.shape(bias) != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(bias),
                    cout
                )));
            }
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![R::ZERO; bn * cout * ho * wo];
        {
            let xd = &self.nodes[x.0].value.data;
            let wdat = &self.nodes[w.0].value.data;
            for bi in 0..bn {
                for co in 0..cout {
                    let obase = (bi * cout + co) * ho * wo;
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = Self::conv_out_range(ky, padding, stride, h, ho);
                            for kx in 0..kw {
                                let wv = wdat[wbase + ky * kw + kx];
                                let (ox_lo, ox_hi) =
                                    Self::conv_out_range(kx, padding, stride, wd, wo);
                                for oy in oy_lo..oy_hi {
                                    let xrow = xbase + (oy * stride + ky - padding) * wd + kx;
                                    let orow = obase + oy * wo;
                                    if stride == 1 {
                                        let xs = xrow + ox_lo - padding;
                                        let n = ox_hi - ox_lo;
                                        let xsl = &xd[xs..xs + n];
                                        let osl = &mut out[orow + ox_lo..orow + ox_lo + n];
                                        for (o, &xv) in osl.iter_mut().zip(xsl) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            out[orow + ox] +=
                                                wv * xd[xrow + ox * stride - padding];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = b {
                let bd = &self.nodes[bias.0].value.data;
                for bi in 0..bn {
                    for co in 0..cout {
                        let obase = (bi * cout + co) * ho * wo;
                        for j in 0..ho * wo {
                            out[obase + j] += bd[co];
                        }
                    }
                }
            }
        }
        let rg = self.req(x) || self.req(w) || b.map(|v| self.req(v)).unwrap_or(false);
        Ok(self.push(
            Tensor {
                shape: vec![bn, cout, ho, wo],
                data: out,
            },
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                padding,
            },
        ))
    }

    /// Integer-factor spatial upsampling of [B, C, H, W].
    /// Bilinear uses align_corners=false: src = (dst + 0.5)/f - 0.5.
    pub fn upsample(&mut self, a: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 4 {
            return Err(Error::Dimension(format!(
                "upsample expects [B,C,H,W], got {:?}",
                ashape
            )));
        }
        let (b, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![R::ZERO; b * c * ho * wo];
        {
            let ad = &self.nodes[a.0].value.data;
            match mode {
                UpsampleMode::Nearest => {
                    for bc in 0..b * c {
                        let ibase = bc * h * w;
                        let obase = bc * ho * wo;
                        for oy in 0..ho {
                            let iy = oy / factor;
                            for ox in 0..wo {
                                out[obase + oy * wo + ox] = ad[ibase + iy * w + ox / factor];
                            }
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    let plan_y = bilinear_plan(h, ho, factor);
                    let plan_x = bilinear_plan(w, wo, factor);
                    for bc in 0..b * c {
                        let ibase = bc * h * w;
                        let obase = bc * ho * wo;
                        for oy in 0..ho {
                            let (y0, y1, ty) = plan_y[oy];
                            for ox in 0..wo {
                                let (x0, x1, tx) = plan_x[ox];
                                let v00 = ad[ibase + y0 * w + x0].to_f64();
                                let v01 = ad[ibase + y0 * w + x1].to_f64();
                                let v10 = ad[ibase + y1 * w + x0].to_f64();
                                let v11 = ad[ibase + y1 * w + x1].to_f64();
                                let top = v00 * (1.0 - tx) + v01 * tx;
                                let bot = v10 * (1.0 - tx) + v11 * tx;
                                out[obase + oy * wo + ox] =
                                    R::from_f64(top * (1.0 - ty) + bot * ty);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, ho, wo],
                data: out,
            },
            rg,
            Op::Upsample {
                a: a.0,
                factor,
                mode,
            },
        ))
    }

    // -- indexing / layout --------------------------------------------------

    /// Select `idx` entries along `axis`; the selection is shared across all
    /// other axes.
    pub fn index_select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if axis >= ashape.len() {
            return Err(Error::Dimension(format!(
                "index_select axis {} out of range for {:?}",
                axis, ashape
            )));
        }
        for &i in idx {
            if i >= ashape[axis] {
                return Err(Error::Index(format!(
                    "index {} out of range for axis {} of {:?}",
                    i, axis, ashape
                )));
            }
        }
        let (outer, n, inner) = (
            ashape[..axis].iter().product::<usize>(),
            ashape[axis],
            ashape[axis + 1..].iter().product::<usize>(),
        );
        let mut out_shape = ashape.clone();
        out_shape[axis] = idx.len();
        let mut out = vec![R::ZERO; outer * idx.len() * inner];
        {
            let ad = &self.nodes[a.0].value.data;
            for o in 0..outer {
                for (ji, &j) in idx.iter().enumerate() {
                    let src = (o * n + j) * inner;
                    let dst = (o * idx.len() + ji) * inner;
                    out[dst..dst + inner].copy_from_slice(&ad[src..src + inner]);
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::IndexSelect {
                a: a.0,
                axis,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per-sample restriction of [B, N, C] to (token_idx x channel_idx),
    /// producing [B, k_t, k_c]. Indexes must be unique and in range.
    pub fn gather_tk(&mut self, a: Var, tok: &[Vec<usize>], ch: &[Vec<usize>]) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 3 {
            return Err(Error::Dimension(format!(
                "gather expects [B,N,C], got {:?}",
                ashape
            )));
        }
        let (b, n, c) = (ashape[0], ashape[1], ashape[2]);
        if tok.len() != b || ch.len() != b {
            return Err(Error::Dimension(format!(
                "index lists cover {} samples, tensor has {}",
                tok.len(),
                b
            )));
        }
        let kt = tok[0].len();
        let kc = ch[0].len();
        for bi in 0..b {
            if tok[bi].len() != kt || ch[bi].len() != kc {
                return Err(Error::Index("ragged per-sample index lists".into()));
            }
            check_indices(&tok[bi], n, "token")?;
            check_indices(&ch[bi], c, "channel")?;
        }
        let mut out = vec![R::ZERO; b * kt * kc];
        {
            let ad = &self.nodes[a.0].value.data;
            for bi in 0..b {
                for (ti, &t) in tok[bi].iter().enumerate() {
                    for (ji, &j) in ch[bi].iter().enumerate() {
                        out[(bi * kt + ti) * kc + ji] = ad[(bi * n + t) * c + j];
                    }
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: vec![b, kt, kc],
                data: out,
            },
            rg,
            Op::GatherTk {
                a: a.0,
                tok: tok.to_vec(),
                ch: ch.to_vec(),
            },
        ))
    }

    /// Inverse of `gather_tk`: write [B, k_t, k_c] into a zero [B, N, C] at
    /// the given positions.
    pub fn scatter_tk(
        &mut self,
        a: Var,
        tok: &[Vec<usize>],
        ch: &[Vec<usize>],
        n: usize,
        c: usize,
    ) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 3 {
            return Err(Error::Dimension(format!(
                "scatter expects [B,kt,kc], got {:?}",
                ashape
            )));
        }
        let (b, kt, kc) = (ashape[0], ashape[1], ashape[2]);
        if tok.len() != b || ch.len() != b {
            return Err(Error::Dimension("index lists do not cover the batch".into()));
        }
        for bi in 0..b {
            if tok[bi].len() != kt || ch[bi].len() != kc {
                return Err(Error::Index("ragged per-sample index lists".into()));
            }
            check_indices(&tok[bi], n, "token")?;
            check_indices(&ch[bi], c, "channel")?;
        }
        let mut out = vec![R::ZERO; b * n * c];
        {
            let ad = &self.nodes[a.0].value.data;
            for bi in 0..b {
                for (ti, &t) in tok[bi].iter().enumerate() {
                    for (ji, &j) in ch[bi].iter().enumerate() {
                        out[(bi * n + t) * c + j] += ad[(bi * kt + ti) * kc + ji];
                    }
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: vec![b, n, c],
                data: out,
            },
            rg,
            Op::ScatterTk {
                a: a.0,
                tok: tok.to_vec(),
                ch: ch.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat shapes incompatible: {:?} vs {:?}",
                    first, s
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![R::ZERO; outer * total * inner];
        let mut off = 0usize;
        for &v in inputs {
            let s = self.shape(v)[axis];
            let ad = &self.nodes[v.0].value.data;
            for o in 0..outer {
                let src = o * s * inner;
                let dst = (o * total + off) * inner;
                out[dst..dst + s * inner].copy_from_slice(&ad[src..src + s * inner]);
            }
            off += s;
        }
        let rg = inputs.iter().any(|&v| self.req(v));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ad = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ad.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                ad.shape, shape
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: ad.data.clone(),
        };
        let rg = self.req(a);
        Ok(self.push(t, rg, Op::Reshape { a: a.0 }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if perm.len() != ashape.len() {
            return Err(Error::Dimension(format!(
                "permutation {:?} does not match rank of {:?}",
                perm, ashape
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Dimension(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| ashape[p]).collect();
        let in_strides = row_major_strides(&ashape);
        let out_strides = row_major_strides(&out_shape);
        let mut out = vec![R::ZERO; self.nodes[a.0].value.numel()];
        {
            let ad = &self.nodes[a.0].value.data;
            let rank = perm.len();
            let mut idx = vec![0usize; rank];
            for slot in out.iter_mut() {
                let mut src = 0usize;
                for d in 0..rank {
                    src += idx[d] * in_strides[perm[d]];
                }
                *slot = ad[src];
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let _ = out_strides;
        }
        let rg = self.req(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    // -- loss ---------------------------------------------------------------

    /// Mean negative log-likelihood over non-ignored pixels.
    /// `logits` is [B, K, H, W]; `targets` is flat in (b, y, x) order.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore: Option<i64>,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 4 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects [B,K,H,W] logits, got {:?}",
                ls
            )));
        }
        let (b, k, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        if targets.len() != b * h * w {
            return Err(Error::Dimension(format!(
                "cross_entropy mask has {} pixels, logits imply {}",
                targets.len(),
                b * h * w
            )));
        }
        let mut count = 0usize;
        let mut loss = 0.0f64;
        {
            let ld = &self.nodes[logits.0].value.data;
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let t = targets[(bi * h + y) * w + x];
                        if Some(t) == ignore {
                            continue;
                        }
                        if t < 0 || t as usize >= k {
                            return Err(Error::Data(format!(
                                "mask value {} out of range [0,{}) at (sample {}, y {}, x {})",
                                t, k, bi, y, x
                            )));
                        }
                        let at = |c: usize| ld[((bi * k + c) * h + y) * w + x].to_f64();
                        let mut m = at(0);
                        for c in 1..k {
                            m = m.max(at(c));
                        }
                        let mut s = 0.0f64;
                        for c in 0..k {
                            s += (at(c) - m).exp();
                        }
                        loss += m + s.ln() - at(t as usize);
                        count += 1;
                    }
                }
            }
        }
        let mean = if count > 0 { loss / count as f64 } else { 0.0 };
        let rg = self.req(logits);
        Ok(self.push(
            Tensor::scalar(R::from_f64(mean)),
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                count,
            },
        ))
    }

    // -- backward -----------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "backward on a detached tensor (no grad-requiring inputs)".into(),
            ));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![R::ZERO; node.value.numel()]);
            }
        }
        self.grads[loss.0].as_mut().unwrap()[0] += R::ONE;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op)?;
        }
        Ok(())
    }

    fn take_grad(&self, i: usize) -> Vec<R> {
        self.grads[i].as_ref().unwrap().clone()
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [R])) {
        if self.nodes[target].requires_grad {
            f(self.grads[target].as_mut().unwrap());
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, transpose_b } => {
                let g = self.take_grad(i);
                let ashape = self.nodes[*a].value.shape.clone();
                let bshape = self.nodes[*b].value.shape.clone();
                let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let p = if *transpose_b {
                    bshape[bshape.len() - 2]
                } else {
                    bshape[bshape.len() - 1]
                };
                let batch: usize = ashape[..ashape.len() - 2].iter().product();
                let shared_b = bshape.len() == 2;
                let ad = self.nodes[*a].value.data.clone();
                let bd = self.nodes[*b].value.data.clone();
                self.acc(*a, |da| {
                    for bt in 0..batch {
                        let go = bt * m * p;
                        let ao = bt * m * ka;
                        let bo = if shared_b { 0 } else { bt * ka * p };
                        if *transpose_b {
                            // C = A B^T, b slice [P,K]: dA = dC B
                            for ii in 0..m {
                                let darow = &mut da[ao + ii * ka..ao + (ii + 1) * ka];
                                for j in 0..p {
                                    let gv = g[go + ii * p + j];
                                    let brow = &bd[bo + j * ka..bo + (j + 1) * ka];
                                    for (d, &bv) in darow.iter_mut().zip(brow) {
                                        *d += gv * bv;
                                    }
                                }
                            }
                        } else {
                            // dA = dC B^T as row dot products so both factors
                            // stream contiguously
                            for ii in 0..m {
                                let grow = &g[go + ii * p..go + (ii + 1) * p];
                                let darow = &mut da[ao + ii * ka..ao + (ii + 1) * ka];
                                for (k, d) in darow.iter_mut().enumerate() {
                                    let brow = &bd[bo + k * p..bo + (k + 1) * p];
                                    let mut s = R::ZERO;
                                    for (&gv, &bv) in grow.iter().zip(brow) {
                                        s += gv * bv;
                                    }
                                    *d += s;
                                }
                            }
                        }
                    }
                });
                self.acc(*b, |db| {
                    for bt in 0..batch {
                        let go = bt * m * p;
                        let ao = bt * m * ka;
                        let bo = if shared_b { 0 } else { bt * ka * p };
                        if *transpose_b {
                            // dB[j,k] = sum_i dC[i,j] A[i,k]
                            for ii in 0..m {
                                let arow = &ad[ao + ii * ka..ao + (ii + 1) * ka];
                                for j in 0..p {
                                    let gv = g[go + ii * p + j];
                                    let dbrow = &mut db[bo + j * ka..bo + (j + 1) * ka];
                                    for (d, &av) in dbrow.iter_mut().zip(arow) {
                                        *d += gv * av;
                                    }
                                }
                            }
                        } else {
                            for ii in 0..m {
                                let arow = &ad[ao + ii * ka..ao + (ii + 1) * ka];
                                let grow = &g[go + ii * p..go + (ii + 1) * p];
                                for (k, &av) in arow.iter().enumerate() {
                                    let dbrow = &mut db[bo + k * p..bo + (k + 1) * p];
                                    for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                        *d += av * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Binary { kind, a, b } => {
                let g = self.take_grad(i);
                let out_shape = self.nodes[i].value.shape.clone();
                let sa = broadcast_strides(&self.nodes[*a].value.shape, &out_shape);
                let sb = broadcast_strides(&self.nodes[*b].value.shape, &out_shape);
                let ad = self.nodes[*a].value.data.clone();
                let bd = self.nodes[*b].value.data.clone();
                let kind = *kind;
                self.acc(*a, |da| {
                    for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| {
                        let gv = g[lin];
                        da[oa] += match kind {
                            BinKind::Add | BinKind::Sub => gv,
                            BinKind::Mul => gv * bd[ob],
                            BinKind::Div => gv / bd[ob],
                        };
                    });
                });
                self.acc(*b, |db| {
                    for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| {
                        let gv = g[lin];
                        db[ob] += match kind {
                            BinKind::Add => gv,
                            BinKind::Sub => -gv,
                            BinKind::Mul => gv * ad[oa],
                            BinKind::Div => -gv * ad[oa] / (bd[ob] * bd[ob]),
                        };
                    });
                });
            }
            Op::Unary { kind, a } => {
                let g = self.take_grad(i);
                let ad = self.nodes[*a].value.data.clone();
                let yd = self.nodes[i].value.data.clone();
                let kind = *kind;
                self.acc(*a, |da| {
                    for j in 0..ad.len() {
                        let x = ad[j].to_f64();
                        let d = match kind {
                            UnKind::Neg => -1.0,
                            UnKind::Exp => yd[j].to_f64(),
                            UnKind::Log => 1.0 / x,
                            UnKind::Sqrt => 0.5 / yd[j].to_f64(),
                            UnKind::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Gelu => {
                                let u = GELU_C * (x + GELU_A * x * x * x);
                                let t = u.tanh();
                                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                            }
                            UnKind::Sigmoid => {
                                let y = yd[j].to_f64();
                                y * (1.0 - y)
                            }
                        };
                        da[j] += g[j] * R::from_f64(d);
                    }
                });
            }
            Op::Scale { a, c } => {
                let g = self.take_grad(i);
                let cr = R::from_f64(*c);
                self.acc(*a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * cr;
                    }
                });
            }
            Op::Reduce {
                kind,
                a,
                axis,
                argmax,
            } => {
                let g = self.take_grad(i);
                let ashape = self.nodes[*a].value.shape.clone();
                let (outer, n, inner) = match axis {
                    Some(ax) => axis_dims(&ashape, *ax)?,
                    None => (1, self.nodes[*a].value.numel(), 1),
                };
                let ad = self.nodes[*a].value.data.clone();
                let nn = R::from_f64(n as f64);
                let kind = *kind;
                let argmax = argmax.clone();
                self.acc(*a, |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let gv = g[o * inner + ii];
                            match kind {
                                RedKind::Sum => {
                                    for j in 0..n {
                                        da[o * n * inner + j * inner + ii] += gv;
                                    }
                                }
                                RedKind::Mean => {
                                    for j in 0..n {
                                        da[o * n * inner + j * inner + ii] += gv / nn;
                                    }
                                }
                                RedKind::Max => {
                                    let bj = argmax[o * inner + ii];
                                    da[o * n * inner + bj * inner + ii] += gv;
                                }
                                RedKind::Variance => {
                                    let mut s = R::ZERO;
                                    for j in 0..n {
                                        s += ad[o * n * inner + j * inner + ii];
                                    }
                                    let mu = s / nn;
                                    let two = R::from_f64(2.0);
                                    for j in 0..n {
                                        let x = ad[o * n * inner + j * inner + ii];
                                        da[o * n * inner + j * inner + ii] +=
                                            gv * two * (x - mu) / nn;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let g = self.take_grad(i);
                let yd = self.nodes[i].value.data.clone();
                let shape = self.nodes[i].value.shape.clone();
                let (outer, n, inner) = axis_dims(&shape, *axis)?;
                self.acc(*a, |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let mut dot = R::ZERO;
                            for j in 0..n {
                                dot += g[base + j * inner] * yd[base + j * inner];
                            }
                            for j in 0..n {
                                let y = yd[base + j * inner];
                                da[base + j * inner] += y * (g[base + j * inner] - dot);
                            }
                        }
                    }
                });
            }
            Op::Layernorm { a, axis, eps } => {
                let g = self.take_grad(i);
                let yd = self.nodes[i].value.data.clone();
                let ad = self.nodes[*a].value.data.clone();
                let shape = self.nodes[i].value.shape.clone();
                let (outer, n, inner) = axis_dims(&shape, *axis)?;
                let nn = R::from_f64(n as f64);
                let epsr = R::from_f64(*eps);
                self.acc(*a, |da| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let mut s = R::ZERO;
                            for j in 0..n {
                                s += ad[base + j * inner];
                            }
                            let mu = s / nn;
                            let mut v = R::ZERO;
                            for j in 0..n {
                                let d = ad[base + j * inner] - mu;
                                v += d * d;
                            }
                            let std = (v / nn + epsr).sqrt();
                            let mut gmean = R::ZERO;
                            let mut gydot = R::ZERO;
                            for j in 0..n {
                                gmean += g[base + j * inner];
                                gydot += g[base + j * inner] * yd[base + j * inner];
                            }
                            gmean /= nn;
                            gydot /= nn;
                            for j in 0..n {
                                let y = yd[base + j * inner];
                                da[base + j * inner] +=
                                    (g[base + j * inner] - gmean - y * gydot) / std;
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { a, groups, eps } => {
                let g = self.take_grad(i);
                let yd = self.nodes[i].value.data.clone();
                let ad = self.nodes[*a].value.data.clone();
                let shape = self.nodes[i].value.shape.clone();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gs = c / groups * h * w;
                let nn = R::from_f64(gs as f64);
                let epsr = R::from_f64(*eps);
                let groups = *groups;
                self.acc(*a, |da| {
                    for bi in 0..b {
                        for gi in 0..groups {
                            let base = bi * c * h * w + gi * gs;
                            let mut s = R::ZERO;
                            for j in 0..gs {
                                s += ad[base + j];
                            }
                            let mu = s / nn;
                            let mut v = R::ZERO;
                            for j in 0..gs {
                                let d = ad[base + j] - mu;
                                v += d * d;
                            }
                            let std = (v / nn + epsr).sqrt();
                            let mut gmean = R::ZERO;
                            let mut gydot = R::ZERO;
                            for j in 0..gs {
                                gmean += g[base + j];
                                gydot += g[base + j] * yd[base + j];
                            }
                            gmean /= nn;
                            gydot /= nn;
                            for j in 0..gs {
                                da[base + j] += (g[base + j] - gmean - yd[base + j] * gydot) / std;
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let g = self.take_grad(i);
                let xs = self.nodes[*x].value.shape.clone();
                let ws = self.nodes[*w].value.shape.clone();
                let os = self.nodes[i].value.shape.clone();
                let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo) = (os[2], os[3]);
                let xd = self.nodes[*x].value.data.clone();
                let wdat = self.nodes[*w].value.data.clone();
                let (stride, padding) = (*stride, *padding);
                self.acc(*x, |dx| {
                    for bi in 0..bn {
                        for co in 0..cout {
                            let obase = (bi * cout + co) * ho * wo;
                            for ci in 0..cin {
                                let xbase = (bi * cin + ci) * h * wd;
                                let wbase = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) =
                                        Self::conv_out_range(ky, padding, stride, h, ho);
                                    for kx in 0..kw {
                                        let wv = wdat[wbase + ky * kw + kx];
                                        let (ox_lo, ox_hi) =
                                            Self::conv_out_range(kx, padding, stride, wd, wo);
                                        for oy in oy_lo..oy_hi {
                                            let xrow =
                                                xbase + (oy * stride + ky - padding) * wd + kx;
                                            let orow = obase + oy * wo;
                                            if stride == 1 {
                                                let xs = xrow + ox_lo - padding;
                                                let n = ox_hi - ox_lo;
                                                let gsl = &g[orow + ox_lo..orow + ox_lo + n];
                                                let dsl = &mut dx[xs..xs + n];
                                                for (d, &gv) in dsl.iter_mut().zip(gsl) {
                                                    *d += wv * gv;
                                                }
                                            } else {
                                                for ox in ox_lo..ox_hi {
                                                    dx[xrow + ox * stride - padding] +=
                                                        wv * g[orow + ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(*w, |dw| {
                    for bi in 0..bn {
                        for co in 0..cout {
                            let obase = (bi * cout + co) * ho * wo;
                            for ci in 0..cin {
                                let xbase = (bi * cin + ci) * h * wd;
                                let wbase = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) =
                                        Self::conv_out_range(ky, padding, stride, h, ho);
                                    for kx in 0..kw {
                                        let (ox_lo, ox_hi) =
                                            Self::conv_out_range(kx, padding, stride, wd, wo);
                                        let mut s = R::ZERO;
                                        for oy in oy_lo..oy_hi {
                                            let xrow =
                                                xbase + (oy * stride + ky - padding) * wd + kx;
                                            let orow = obase + oy * wo;
                                            if stride == 1 {
                                                let xs = xrow + ox_lo - padding;
                                                let n = ox_hi - ox_lo;
                                                let xsl = &xd[xs..xs + n];
                                                let gsl = &g[orow + ox_lo..orow + ox_lo + n];
                                                for (&xv, &gv) in xsl.iter().zip(gsl) {
                                                    s += xv * gv;
                                                }
                                            } else {
                                                for ox in ox_lo..ox_hi {
                                                    s += xd[xrow + ox * stride - padding]
                                                        * g[orow + ox];
                                                }
                                            }
                                        }
                                        dw[wbase + ky * kw + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(bias) = b {
                    self.acc(*bias, |db| {
                        for bi in 0..bn {
                            for co in 0..cout {
                                let obase = (bi * cout + co) * ho * wo;
                                for j in 0..ho * wo {
                                    db[co] += g[obase + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Upsample { a, factor, mode } => {
                let g = self.take_grad(i);
                let ashape = self.nodes[*a].value.shape.clone();
                let (b, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
                let (ho, wo) = (h * factor, w * factor);
                let factor = *factor;
                let mode = *mode;
                self.acc(*a, |da| match mode {
                    UpsampleMode::Nearest => {
                        for bc in 0..b * c {
                            let ibase = bc * h * w;
                            let obase = bc * ho * wo;
                            for oy in 0..ho {
                                let iy = oy / factor;
                                for ox in 0..wo {
                                    da[ibase + iy * w + ox / factor] += g[obase + oy * wo + ox];
                                }
                            }
                        }
                    }
                    UpsampleMode::Bilinear => {
                        let plan_y = bilinear_plan(h, ho, factor);
                        let plan_x = bilinear_plan(w, wo, factor);
                        for bc in 0..b * c {
                            let ibase = bc * h * w;
                            let obase = bc * ho * wo;
                            for oy in 0..ho {
                                let (y0, y1, ty) = plan_y[oy];
                                for ox in 0..wo {
                                    let (x0, x1, tx) = plan_x[ox];
                                    let gv = g[obase + oy * wo + ox].to_f64();
                                    da[ibase + y0 * w + x0] +=
                                        R::from_f64(gv * (1.0 - ty) * (1.0 - tx));
                                    da[ibase + y0 * w + x1] += R::from_f64(gv * (1.0 - ty) * tx);
                                    da[ibase + y1 * w + x0] += R::from_f64(gv * ty * (1.0 - tx));
                                    da[ibase + y1 * w + x1] += R::from_f64(gv * ty * tx);
                                }
                            }
                        }
                    }
                });
            }
            Op::IndexSelect { a, axis, idx } => {
                let g = self.take_grad(i);
                let ashape = self.nodes[*a].value.shape.clone();
                let (outer, n, inner) = (
                    ashape[..*axis].iter().product::<usize>(),
                    ashape[*axis],
                    ashape[*axis + 1..].iter().product::<usize>(),
                );
                let idx = idx.clone();
                self.acc(*a, |da| {
                    for o in 0..outer {
                        for (ji, &j) in idx.iter().enumerate() {
                            let src = (o * idx.len() + ji) * inner;
                            let dst = (o * n + j) * inner;
                            for t in 0..inner {
                                da[dst + t] += g[src + t];
                            }
                        }
                    }
                });
            }
            Op::GatherTk { a, tok, ch } => {
                let g = self.take_grad(i);
                let ashape = self.nodes[*a].value.shape.clone();
                let (_, n, c) = (ashape[0], ashape[1], ashape[2]);
                let kt = tok[0].len();
                let kc = ch[0].len();
                let (tok, ch) = (tok.clone(), ch.clone());
                self.acc(*a, |da| {
                    for (bi, (ts, js)) in tok.iter().zip(ch.iter()).enumerate() {
                        for (ti, &t) in ts.iter().enumerate() {
                            for (ji, &j) in js.iter().enumerate() {
                                da[(bi * n + t) * c + j] += g[(bi * kt + ti) * kc + ji];
                            }
                        }
                    }
                });
            }
            Op::ScatterTk { a, tok, ch } => {
                let g = self.take_grad(i);
                let oshape = self.nodes[i].value.shape.clone();
                let (_, n, c) = (oshape[0], oshape[1], oshape[2]);
                let ashape = self.nodes[*a].value.shape.clone();
                let (kt, kc) = (ashape[1], ashape[2]);
                let (tok, ch) = (tok.clone(), ch.clone());
                self.acc(*a, |da| {
                    for (bi, (ts, js)) in tok.iter().zip(ch.iter()).enumerate() {
                        for (ti, &t) in ts.iter().enumerate() {
                            for (ji, &j) in js.iter().enumerate() {
                                da[(bi * kt + ti) * kc + ji] += g[(bi * n + t) * c + j];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let g = self.take_grad(i);
                let oshape = self.nodes[i].value.shape.clone();
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[*axis + 1..].iter().product();
                let total = oshape[*axis];
                let mut off = 0usize;
                for &v in inputs {
                    let s = self.nodes[v].value.shape[*axis];
                    let off_here = off;
                    self.acc(v, |dv| {
                        for o in 0..outer {
                            let src = (o * total + off_here) * inner;
                            let dst = o * s * inner;
                            for t in 0..s * inner {
                                dv[dst + t] += g[src + t];
                            }
                        }
                    });
                    off += s;
                }
            }
            Op::Reshape { a } => {
                let g = self.take_grad(i);
                self.acc(*a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j];
                    }
                });
            }
            Op::Permute { a, perm } => {
                let g = self.take_grad(i);
                let oshape = self.nodes[i].value.shape.clone();
                let ashape = self.nodes[*a].value.shape.clone();
                let in_strides = row_major_strides(&ashape);
                let rank = perm.len();
                let perm = perm.clone();
                self.acc(*a, |da| {
                    let mut idx = vec![0usize; rank];
                    for (lin, &gv) in g.iter().enumerate() {
                        let _ = lin;
                        let mut src = 0usize;
                        for d in 0..rank {
                            src += idx[d] * in_strides[perm[d]];
                        }
                        da[src] += gv;
                        for d in (0..rank).rev() {
                            idx[d] += 1;
                            if idx[d] < oshape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let g = self.take_grad(i)[0];
                if *count == 0 {
                    return Ok(());
                }
                let ls = self.nodes[*logits].value.shape.clone();
                let (b, k, h, w) = (ls[0], ls[1], ls[2], ls[3]);
                let ld = self.nodes[*logits].value.data.clone();
                let inv = g.to_f64() / *count as f64;
                let targets = targets.clone();
                let ignore = *ignore;
                self.acc(*logits, |dl| {
                    for bi in 0..b {
                        for y in 0..h {
                            for x in 0..w {
                                let t = targets[(bi * h + y) * w + x];
                                if Some(t) == ignore {
                                    continue;
                                }
                                let at = |c: usize| ld[((bi * k + c) * h + y) * w + x].to_f64();
                                let mut m = at(0);
                                for c in 1..k {
                                    m = m.max(at(c));
                                }
                                let mut s = 0.0f64;
                                for c in 0..k {
                                    s += (at(c) - m).exp();
                                }
                                for c in 0..k {
                                    let p = (at(c) - m).exp() / s;
                                    let onehot = if c == t as usize { 1.0 } else { 0.0 };
                                    dl[((bi * k + c) * h + y) * w + x] +=
                                        R::from_f64((p - onehot) * inv);
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// (lo, hi, frac) sampling plan for align_corners=false bilinear resize.
fn bilinear_plan(n_in: usize, n_out: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) / f - 0.5;
            let x0f = src.floor();
            let t = src - x0f;
            let x0 = x0f.max(0.0) as usize;
            let x0 = x0.min(n_in - 1);
            let x1 = if x0f < 0.0 { x0 } else { (x0 + 1).min(n_in - 1) };
            (x0, x1, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_grad_is_ones_bt() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        // grad wrt A = ones @ B^T
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[2, 2]"), "{e}");
    }

    #[test]
    fn sigmoid_relu_values() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data, vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn variance_hand_cases() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let v = g.variance(x, Some(0)).unwrap();
        assert_eq!(g.value(v).data[0], 1.0);
        let c = g.constant(t(&[4], &[3.0; 4]));
        let v = g.variance(c, Some(0)).unwrap();
        assert_eq!(g.value(v).data[0], 0.0);
    }

    #[test]
    fn mean_last_axis() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = g.mean(x, Some(1)).unwrap();
        assert_eq!(g.value(m).data, vec![2.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data, vec![0.25; 4]);
        let big = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(big, 0).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);
        let x = g.constant(t(&[2], &[0.0, 3.0f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layernorm_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 2.0]));
        let y = g.layernorm(x, 0, 1e-5).unwrap();
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((g.value(y).data[0] + expect).abs() < 1e-12);
        assert!((g.value(y).data[1] - expect).abs() < 1e-12);
        let c = g.constant(t(&[3], &[5.0; 3]));
        let y = g.layernorm(c, 0, 1e-5).unwrap();
        assert_eq!(g.value(y).data, vec![0.0; 3]);
    }

    #[test]
    fn gather_scatter_hand_cases() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        // gather rows {1} cols {0}
        let y = g.gather_tk(x, &[vec![1]], &[vec![0]]).unwrap();
        assert_eq!(g.value(y).data, vec![3.0]);
        // gather with all indexes = identity
        let all = g.gather_tk(x, &[vec![0, 1]], &[vec![0, 1]]).unwrap();
        assert_eq!(g.value(all).data, g.value(x).data);
        // scatter then read back unselected position = 0
        let s = g.scatter_tk(y, &[vec![1]], &[vec![0]], 2, 2).unwrap();
        assert_eq!(g.value(s).data, vec![0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0; 4]));
        assert!(matches!(
            g.gather_tk(x, &[vec![5]], &[vec![0]]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            g.gather_tk(x, &[vec![1, 1]], &[vec![0]]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_detached_is_usage_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn upsample_nearest_and_bilinear() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.upsample(x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(g.value(y).data, vec![1.0; 4]);
        // bilinear of [[0,2]] along width -> [0, 0.5, 1.5, 2]
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let y = g.upsample(x, 2, UpsampleMode::Bilinear).unwrap();
        let d = &g.value(y).data;
        let row: Vec<f64> = d[4..8].to_vec();
        assert_eq!(row, vec![0.0, 0.5, 1.5, 2.0]);
        // constant map stays constant
        let c = g.constant(t(&[1, 1, 2, 2], &[3.0; 4]));
        let y = g.upsample(c, 2, UpsampleMode::Bilinear).unwrap();
        assert!(g.value(y).data.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn conv2d_hand_cases() {
        let mut g: Graph<f64> = Graph::new();
        // 1x1 identity kernel over channels
        let x = g.constant(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
        // 3x3 all-ones kernel, all-ones 3x3 input, pad 1: center 9, corners 4
        let x = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let d = &g.value(y).data;
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[8], 4.0);
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t(&[1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(a, b), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_fanout_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]), true);
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap(); // x^2 + x, dx = 2x + 1 = 5
        g.backward(b).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let targets = vec![0i64, 1, 2, 3];
        let l = g.cross_entropy(logits, &targets, None).unwrap();
        assert!((g.value(l).data[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_bad_mask_value() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let e = g.cross_entropy(logits, &[0, 7], None).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("x 1"), "{msg}");
    }
}
