//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value plus whatever extra
//! buffers its backward rule needs. Parents always precede children, so a
//! reverse sweep over node indices is a valid topological order.

use super::{gemm, Layout, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Attribution bucket for FLOP accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    #[default]
    Other,
    Embed,
    Backbone,
    Cell,
    Head,
    Loss,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, s: T },
    ScaleBy { a: Var, s: Var },
    ReluSq { a: Var },
    RmsNorm { x: Var, gain: Option<Var> },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { a: Var, base: f64 },
    Attention { q: Var, k: Var, v: Var },
    ConcatLast { a: Var, b: Var },
    Concat0 { a: Var, b: Var },
    Narrow0 { a: Var, start: usize },
    Reshape { a: Var },
    SumAll { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, count: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    saved: Vec<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    flops: u64,
    tag: Tag,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// Recording of a computation, differentiable in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
    tag: Tag,
}

fn any_rg<T>(nodes: &[Node<T>], vars: &[Var]) -> bool {
    vars.iter().any(|v| nodes[v.0].requires_grad)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_finite<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("{op} input")));
    }
    Ok(())
}

fn rope_table(len: usize, half: usize, hd: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for t in 0..len {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / hd as f64);
            let ang = t as f64 * freq;
            cos.push(ang.cos());
            sin.push(ang.sin());
        }
    }
    (cos, sin)
}

/// Rotates pairs `(i, i + hd/2)` of each head vector by a position-dependent
/// angle; `inverse` applies the transpose rotation.
fn rope_apply<T: Real>(src: &[T], dst: &mut [T], shape: &[usize], base: f64, inverse: bool) {
    let (b, l, h, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let half = hd / 2;
    let (cos, sin) = rope_table(l, half, hd, base);
    for bi in 0..b {
        for t in 0..l {
            for hi in 0..h {
                let off = ((bi * l + t) * h + hi) * hd;
                for i in 0..half {
                    let c = T::of(cos[t * half + i]);
                    let s = if inverse { T::of(-sin[t * half + i]) } else { T::of(sin[t * half + i]) };
                    let x1 = src[off + i];
                    let x2 = src[off + i + half];
                    dst[off + i] = x1 * c + x2 * s;
                    dst[off + i + half] = x2 * c - x1 * s;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            tag: Tag::Other,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the FLOP attribution bucket for subsequently recorded ops.
    pub fn set_tag(&mut self, tag: Tag) {
        self.tag = tag;
    }

    pub fn tag(&self) -> Tag {
        self.tag
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

    /// Number of stored activation elements: every non-parameter node value
    /// plus the extra buffers saved for backward.
    pub fn activation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.param.is_none())
            .map(|n| n.value.numel() + n.saved.len())
            .sum()
    }

    /// Forward FLOPs recorded on this tape.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn flops_tagged(&self, tag: Tag) -> u64 {
        self.nodes.iter().filter(|n| n.tag == tag).map(|n| n.flops).sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, saved: Vec<T>, requires_grad: bool, flops: u64) -> Var {
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
            param: None,
            flops,
            tag: self.tag,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad, 0)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-requiring leaf. Repeated binds
    /// of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        self.bindings.push((id, v));
        v
    }

    /// Gradients of every bound parameter reached by `grads`.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bindings
            .iter()
            .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    // ---- linear algebra ----

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::row_major(0, k),
            self.value(b).data(),
            Layout::row_major(0, n),
            T::zero(),
            &mut out,
            Layout::row_major(0, n),
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = any_rg(&self.nodes, &[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, Vec::new(), rg, 2 * (m * k * n) as u64))
    }

    /// `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[1] != k {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        let n = sb[0];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::row_major(0, k),
            self.value(b).data(),
            Layout::transposed(0, k),
            T::zero(),
            &mut out,
            Layout::row_major(0, n),
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = any_rg(&self.nodes, &[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMulNT { a, b }, Vec::new(), rg, 2 * (m * k * n) as u64))
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f).map_err(|_| shape_err(name, self.shape(a), self.shape(b)))?;
        let rg = any_rg(&self.nodes, &[a, b]);
        let flops = out.numel() as u64;
        Ok(self.push(out, op, Vec::new(), rg, flops))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a last-axis bias vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let n = *sa.last().unwrap();
        if sb != [n] {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let rg = any_rg(&self.nodes, &[a, bias]);
        let flops = out.numel() as u64;
        Ok(self.push(out, Op::AddBias { a, bias }, Vec::new(), rg, flops))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).scale(s);
        let rg = self.nodes[a.0].requires_grad;
        let flops = out.numel() as u64;
        self.push(out, Op::Scale { a, s }, Vec::new(), rg, flops)
    }

    /// Multiplies `a` by a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).scale(sv);
        let rg = any_rg(&self.nodes, &[a, s]);
        let flops = out.numel() as u64;
        Ok(self.push(out, Op::ScaleBy { a, s }, Vec::new(), rg, flops))
    }

    /// `max(x, 0)²`.
    pub fn relu_sq(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let r = x.max(T::zero());
            r * r
        });
        let rg = self.nodes[a.0].requires_grad;
        let flops = 2 * out.numel() as u64;
        self.push(out, Op::ReluSq { a }, Vec::new(), rg, flops)
    }

    /// Root-mean-square normalization over the last axis. `gain`, when
    /// present, must cover a whole number of rows and is tiled over the rest
    /// (a `[n]` gain scales every row; a `[h, n]` gain scales per head).
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        let total = self.value(x).numel();
        let gv = match gain {
            Some(g) => {
                let gl = self.value(g).numel();
                if !gl.is_multiple_of(n) || !total.is_multiple_of(gl) {
                    return Err(shape_err("rms_norm", &sx, self.shape(g)));
                }
                Some(self.value(g).data().to_vec())
            }
            None => None,
        };
        let xs = self.value(x).data();
        let rows = total / n;
        let mut out = vec![T::zero(); total];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / n as f64;
            let iv = T::of(1.0 / (ms + eps).sqrt());
            inv.push(iv);
            for j in 0..n {
                let idx = r * n + j;
                let mut y = row[j] * iv;
                if let Some(g) = &gv {
                    y *= g[idx % g.len()];
                }
                out[idx] = y;
            }
        }
        let mut parents = vec![x];
        parents.extend(gain);
        let rg = any_rg(&self.nodes, &parents);
        Ok(self.push(Tensor::from_parts(sx, out), Op::RmsNorm { x, gain }, inv, rg, 4 * total as u64))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {sa:?}")));
        }
        check_finite("softmax", self.value(a))?;
        let outer: usize = sa[..axis].iter().product();
        let n = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let xs = self.value(a).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| xs[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (xs[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        let flops = 4 * out.len() as u64;
        Ok(self.push(Tensor::from_parts(sa, out), Op::Softmax { a, outer, n, inner }, Vec::new(), rg, flops))
    }

    // ---- sequence / attention ----

    /// Gathers rows of `table[v, d]`; output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &st, shape));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding token",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Vec::new(),
            rg,
            0,
        ))
    }

    /// Rotary position encoding over `[batch, len, heads, head_dim]`.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || !sa[3].is_multiple_of(2) {
            return Err(Error::contract(format!("rope expects [B, L, H, even head_dim], got {sa:?}")));
        }
        let mut out = vec![T::zero(); self.value(a).numel()];
        rope_apply(self.value(a).data(), &mut out, &sa, base, false);
        let rg = self.nodes[a.0].requires_grad;
        let flops = 3 * out.len() as u64;
        Ok(self.push(Tensor::from_parts(sa, out), Op::Rope { a, base }, Vec::new(), rg, flops))
    }

    /// Scaled dot-product attention over `[batch, len, heads, head_dim]`
    /// operands; `causal` masks keys after the query position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 4 {
            return Err(Error::contract(format!("attention expects [B, L, H, hd], got {sq:?}")));
        }
        for other in [k, v] {
            if self.shape(other) != sq.as_slice() {
                return Err(shape_err("attention", &sq, self.shape(other)));
            }
        }
        let (b, l, h, hd) = (sq[0], sq[1], sq[2], sq[3]);
        let row = h * hd;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut out = vec![T::zero(); b * l * row];
        let mut probs = vec![T::zero(); b * h * l * l];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for bi in 0..b {
            for hi in 0..h {
                let base = bi * l * row + hi * hd;
                let pbase = (bi * h + hi) * l * l;
                gemm(
                    l,
                    hd,
                    l,
                    scale,
                    qd,
                    Layout { offset: base, rs: row, cs: 1 },
                    kd,
                    Layout { offset: base, rs: 1, cs: row },
                    T::zero(),
                    &mut probs,
                    Layout::row_major(pbase, l),
                );
                for t in 0..l {
                    let p = &mut probs[pbase + t * l..pbase + (t + 1) * l];
                    let lim = if causal { t + 1 } else { l };
                    let mx = p[..lim].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in &mut p[..lim] {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in &mut p[..lim] {
                        *x = *x / sum;
                    }
                    for x in &mut p[lim..] {
                        *x = T::zero();
                    }
                }
                gemm(
                    l,
                    l,
                    hd,
                    T::one(),
                    &probs,
                    Layout::row_major(pbase, l),
                    vd,
                    Layout { offset: base, rs: row, cs: 1 },
                    T::zero(),
                    &mut out,
                    Layout { offset: base, rs: row, cs: 1 },
                );
            }
        }
        let rg = any_rg(&self.nodes, &[q, k, v]);
        let flops = (b * h * (4 * l * l * hd + 4 * l * l)) as u64;
        Ok(self.push(Tensor::from_parts(sq, out), Op::Attention { q, k, v }, probs, rg, flops))
    }

    // ---- structural ----

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", &sa, &sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let rows = ad.len() / na;
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * na..(r + 1) * na]);
            out.extend_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let rg = any_rg(&self.nodes, &[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast { a, b }, Vec::new(), rg, 0))
    }

    /// Concatenates along the leading axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err("concat0", &sa, &sb));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let rg = any_rg(&self.nodes, &[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat0 { a, b }, Vec::new(), rg, 0))
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if len == 0 || start + len > sa[0] {
            return Err(Error::Index {
                what: "narrow0",
                index: start + len,
                bound: sa[0],
            });
        }
        let inner: usize = sa[1..].iter().product();
        let out = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa.clone();
        shape[0] = len;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow0 { a, start }, Vec::new(), rg, 0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, Op::Reshape { a }, Vec::new(), rg, 0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.nodes[a.0].requires_grad;
        let flops = self.value(a).numel() as u64;
        self.push(Tensor::scalar(s), Op::SumAll { a }, Vec::new(), rg, flops)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the rows whose target differs from `ignore`. With no such rows the loss
    /// is zero and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let v = *sl.last().unwrap();
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        check_finite("cross_entropy", self.value(logits))?;
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let row = &xs[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max).f64();
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let e = (x.f64() - mx).exp();
                probs[r * v + j] = T::of(e);
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = T::of(p.f64() / sum);
            }
            total += mx + sum.ln() - row[t].f64();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            probs,
            rg,
            4 * xs.len() as u64,
        ))
    }

    // ---- reverse sweep ----

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(loss, &Tensor::ones(self.shape(loss)))
    }

    /// Vector-Jacobian product: backpropagates `seed` from `output`.
    pub fn backward_from(&self, output: Var, seed: &Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward seed", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data().to_vec());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (p, contrib) in self.node_backward(i, &g) {
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
                .collect(),
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let k = self.value(*a).last_dim();
                let n = self.shape(*b)[1];
                let m = g.len() / n;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, Layout::row_major(0, n), val(*b), Layout::transposed(0, n), T::zero(), &mut da, Layout::row_major(0, k));
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), val(*a), Layout::transposed(0, k), g, Layout::row_major(0, n), T::zero(), &mut db, Layout::row_major(0, n));
                    out.push((*b, db));
                }
            }
            Op::MatMulNT { a, b } => {
                let k = self.value(*a).last_dim();
                let n = self.shape(*b)[0];
                let m = g.len() / n;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, Layout::row_major(0, n), val(*b), Layout::row_major(0, k), T::zero(), &mut da, Layout::row_major(0, k));
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm(n, m, k, T::one(), g, Layout::transposed(0, n), val(*a), Layout::row_major(0, k), T::zero(), &mut db, Layout::row_major(0, k));
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::AddBias { a, bias } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale { a, s } => {
                if self.rg(*a) {
                    out.push((*a, g.iter().map(|&x| x * *s).collect()));
                }
            }
            Op::ScaleBy { a, s } => {
                let sv = val(*s)[0];
                if self.rg(*a) {
                    out.push((*a, g.iter().map(|&x| x * sv).collect()));
                }
                if self.rg(*s) {
                    let d: T = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum();
                    out.push((*s, vec![d]));
                }
            }
            Op::ReluSq { a } => {
                if self.rg(*a) {
                    let two = T::of(2.0);
                    out.push((*a, g.iter().zip(val(*a)).map(|(&d, &x)| d * two * x.max(T::zero())).collect()));
                }
            }
            Op::RmsNorm { x, gain } => {
                let xs = val(*x);
                let n = self.value(*x).last_dim();
                let inv = &node.saved;
                let gv = gain.map(&val);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dg = gv.map(|g| vec![T::zero(); g.len()]);
                for (r, &iv) in inv.iter().enumerate() {
                    let lo = r * n;
                    // dxhat = dy * gain; dx = inv * (dxhat - xhat * mean(dxhat * xhat))
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        let idx = lo + j;
                        let xhat = xs[idx] * iv;
                        let mut dxh = g[idx];
                        if let (Some(gvv), Some(dgv)) = (gv, dg.as_mut()) {
                            let gi = idx % gvv.len();
                            dgv[gi] += g[idx] * xhat;
                            dxh *= gvv[gi];
                        }
                        dx[idx] = dxh;
                        dot += dxh.f64() * xhat.f64();
                    }
                    let mean = T::of(dot / n as f64);
                    for j in 0..n {
                        let idx = lo + j;
                        let xhat = xs[idx] * iv;
                        dx[idx] = iv * (dx[idx] - xhat * mean);
                    }
                }
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if let (Some(gvar), Some(dg)) = (gain, dg) {
                    if self.rg(*gvar) {
                        out.push((*gvar, dg));
                    }
                }
            }
            Op::Softmax { a, outer, n, inner } => {
                if self.rg(*a) {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let dot: T = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Rope { a, base } => {
                if self.rg(*a) {
                    let mut dx = vec![T::zero(); g.len()];
                    rope_apply(g, &mut dx, node.value.shape(), *base, true);
                    out.push((*a, dx));
                }
            }
            Op::Attention { q, k, v } => {
                let s = node.value.shape();
                let (b, l, h, hd) = (s[0], s[1], s[2], s[3]);
                let row = h * hd;
                let scale = T::of(1.0 / (hd as f64).sqrt());
                let probs = &node.saved;
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let (rq, rk, rv) = (self.rg(*q), self.rg(*k), self.rg(*v));
                let mut dq = vec![T::zero(); if rq { g.len() } else { 0 }];
                let mut dk = vec![T::zero(); if rk { g.len() } else { 0 }];
                let mut dv = vec![T::zero(); if rv { g.len() } else { 0 }];
                let mut ds = vec![T::zero(); l * l];
                for bi in 0..b {
                    for hi in 0..h {
                        let hl = Layout { offset: bi * l * row + hi * hd, rs: row, cs: 1 };
                        let pbase = (bi * h + hi) * l * l;
                        if rv {
                            gemm(l, l, hd, T::one(), probs, Layout::transposed(pbase, l), g, hl, T::one(), &mut dv, hl);
                        }
                        if !(rq || rk) {
                            continue;
                        }
                        gemm(l, hd, l, T::one(), g, hl, vd, Layout { offset: hl.offset, rs: 1, cs: row }, T::zero(), &mut ds, Layout::row_major(0, l));
                        for t in 0..l {
                            let p = &probs[pbase + t * l..pbase + (t + 1) * l];
                            let dp = &mut ds[t * l..(t + 1) * l];
                            let dot: T = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pp) in dp.iter_mut().zip(p) {
                                *d = pp * (*d - dot);
                            }
                        }
                        if rq {
                            gemm(l, l, hd, scale, &ds, Layout::row_major(0, l), kd, hl, T::one(), &mut dq, hl);
                        }
                        if rk {
                            gemm(l, l, hd, scale, &ds, Layout::transposed(0, l), qd, hl, T::one(), &mut dk, hl);
                        }
                    }
                }
                if rq {
                    out.push((*q, dq));
                }
                if rk {
                    out.push((*k, dk));
                }
                if rv {
                    out.push((*v, dv));
                }
            }
            Op::ConcatLast { a, b } => {
                let na = self.value(*a).last_dim();
                let nb = self.value(*b).last_dim();
                let rows = g.len() / (na + nb);
                if self.rg(*a) {
                    out.push((*a, (0..rows).flat_map(|r| g[r * (na + nb)..r * (na + nb) + na].iter().copied()).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, (0..rows).flat_map(|r| g[r * (na + nb) + na..(r + 1) * (na + nb)].iter().copied()).collect()));
                }
            }
            Op::Concat0 { a, b } => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    out.push((*a, g[..na].to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g[na..].to_vec()));
                }
            }
            Op::Narrow0 { a, start } => {
                if self.rg(*a) {
                    let inner: usize = self.shape(*a)[1..].iter().product();
                    let mut da = vec![T::zero(); self.value(*a).numel()];
                    da[start * inner..start * inner + g.len()].copy_from_slice(g);
                    out.push((*a, da));
                }
            }
            Op::Reshape { a } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::SumAll { a } => {
                if self.rg(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                if self.rg(*logits) {
                    let v = self.value(*logits).last_dim();
                    let mut dl = vec![T::zero(); self.value(*logits).numel()];
                    if *count > 0 {
                        let w = T::of(g[0].f64() / *count as f64);
                        for (r, &t) in targets.iter().enumerate() {
                            if t == *ignore {
                                continue;
                            }
                            for j in 0..v {
                                dl[r * v + j] = node.saved[r * v + j] * w;
                            }
                            dl[r * v + t] -= w;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
        }
        out
    }
}
