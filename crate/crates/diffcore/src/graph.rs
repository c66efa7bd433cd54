//! Tape of recorded operations with exact reverse-mode gradients.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. `backward` walks the tape once in reverse index
//! order, so accumulation order (and therefore every reduced value) is fixed.

use std::collections::HashMap;

use crate::error::{shape_err, DiffError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{lit, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Gelu,
    Ln,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        map_a: Bcast,
        map_b: Bcast,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Unary {
        kind: Unary,
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        inners: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        src_inner: usize,
        start: usize,
        dst_inner: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        fh: usize,
        fw: usize,
    },
    Upsample {
        x: usize,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        cols: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    /// Values returned by `detach`, in call order.
    detached: Vec<usize>,
    /// Replayed by `detach` instead of the live value (finite-difference oracles).
    pinned: Option<Vec<Tensor<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape of numpy-style broadcasting, or `None` when incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// How a broadcast operand is indexed from a flat output index.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Source equals the trailing extents of the output: `i % n`.
    Cycle(usize),
    /// Source equals the leading extents followed by ones: `i / n`.
    Repeat(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline(always)]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Repeat(n) => i / n,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_map(src: &[usize], out: &[usize]) -> Bcast {
    if src == out {
        return Bcast::Same;
    }
    let n = numel(out);
    let src_n = numel(src);
    if src.len() <= out.len() && src == &out[out.len() - src.len()..] {
        return Bcast::Cycle(src_n.max(1));
    }
    if src.len() == out.len() {
        let lead = src.iter().zip(out).take_while(|(a, b)| a == b).count();
        if src[lead..].iter().all(|&d| d == 1) {
            return Bcast::Repeat(numel(&out[lead..]).max(1));
        }
    }
    let r = out.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        let j = i as isize - (r - src.len()) as isize;
        if j >= 0 {
            let d = src[j as usize];
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(map)
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.fast_tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    let th = u.fast_tanh();
    let du = lit::<T>(GELU_C) * (T::one() + lit::<T>(3.0 * GELU_A) * x * x);
    lit::<T>(0.5) * (T::one() + th) + lit::<T>(0.5) * x * (T::one() - th * th) * du
}

/// Half-pixel bilinear source taps for resizing `src` samples to `dst`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w = s - i0 as f64;
            (i0, i1, if i1 == i0 { 0.0 } else { w })
        })
        .collect()
}

/// Softmax over contiguous rows of length `n`, in place.
fn softmax_rows<T: Float>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        for v in row.iter_mut() {
            *v = (*v - mx).fast_exp();
        }
        let s: T = row.iter().copied().sum();
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), detached: Vec::new(), pinned: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Constant input; never receives gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter. Frozen parameters are recorded as
    /// constants, so their gradient is exactly zero by construction.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let k = self.detached.len();
        let val = match self.pinned.as_ref().and_then(|p| p.get(k)) {
            Some(v) if v.shape() == self.shape(x) => v.clone(),
            _ => self.value(x).clone(),
        };
        let v = self.input(val);
        self.detached.push(v.0);
        v
    }

    /// A graph whose `detach` calls return `values` in order. A stop-gradient
    /// output is a constant of the surrogate loss the tape differentiates;
    /// pinning it lets finite differences see the same surrogate.
    pub fn with_pinned_detaches(values: Vec<Tensor<T>>) -> Self {
        Self { pinned: Some(values), ..Self::new() }
    }

    /// Values produced by every `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        self.detached.iter().map(|&i| self.nodes[i].value.clone()).collect()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a: [.., m, k] @ b: [k, n]` (shared weight) or `[.., k, n]` with the
    /// same leading extents as `a` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &[&sa, &sb]);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let shared_b = sb.len() == 2;
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return shape_err("matmul", &[&sa, &sb]);
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                unsafe {
                    T::gemm(
                        batch * m,
                        k,
                        n,
                        T::one(),
                        av.as_ptr(),
                        k as isize,
                        1,
                        bv.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            } else {
                for bi in 0..batch {
                    unsafe {
                        T::gemm(
                            m,
                            k,
                            n,
                            T::one(),
                            av.as_ptr().add(bi * m * k),
                            k as isize,
                            1,
                            bv.as_ptr().add(bi * k * n),
                            n as isize,
                            1,
                            T::zero(),
                            out.as_mut_ptr().add(bi * m * n),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a: a.0, b: b.0, shared_b, batch, m, k, n },
            rg,
        ))
    }

    /// `x @ w + bias` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let Some(out_shape) = broadcast_shape(&sa, &sb) else {
            return shape_err(name, &[&sa, &sb]);
        };
        let map_a = broadcast_map(&sa, &out_shape);
        let map_b = broadcast_map(&sb, &out_shape);
        let n = numel(&out_shape);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<T> = match (&map_a, &map_b) {
            (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Cycle(m)) => {
                av.chunks(*m).flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect()
            }
            (Bcast::Cycle(m), Bcast::Same) => {
                bv.chunks(*m).flat_map(|c| av.iter().zip(c).map(|(&x, &y)| f(x, y))).collect()
            }
            _ => (0..n).map(|i| f(av[map_a.at(i)], bv[map_b.at(i)])).collect(),
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Binary { kind, a: a.0, b: b.0, map_a, map_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::new(shape, out).expect("same size"), Op::Scale { x: x.0, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::new(shape, out).expect("same size"), Op::AddScalar { x: x.0 }, rg)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: T| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Gelu => gelu(v),
            Unary::Ln => v.ln(),
        };
        let out: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::new(shape, out).expect("same size"), Op::Unary { kind, x: x.0 }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    /// Gradient passes where `lo <= x <= hi`, zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::new(shape, out).expect("same size"), Op::Clamp { x: x.0, lo, hi }, rg)
    }

    // ---- normalization --------------------------------------------------

    /// Layer norm over the last axis with denominator `sqrt(var + eps)`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return shape_err("layer_norm", &[&shape]);
        };
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return shape_err("layer_norm", &[&shape, self.shape(p)]);
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = lit::<T>(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + lit::<T>(eps)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gm) = gamma {
            let gv = self.value(gm).data();
            for row in out.chunks_mut(d) {
                for (o, &g) in row.iter_mut().zip(gv) {
                    *o = *o * g;
                }
            }
        }
        if let Some(bt) = beta {
            let bv = self.value(bt).data();
            for row in out.chunks_mut(d) {
                for (o, &b) in row.iter_mut().zip(bv) {
                    *o = *o + b;
                }
            }
        }
        let rg = self.rg(x.0)
            || gamma.is_some_and(|g| self.rg(g.0))
            || beta.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.map(|v| v.0), beta: beta.map(|v| v.0), xhat, rstd },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return shape_err("softmax", &[&shape]);
        };
        let mut out = self.value(x).data().to_vec();
        softmax_rows(&mut out, d);
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: x.0 }, rg))
    }

    // ---- attention ------------------------------------------------------

    /// Scaled dot-product multi-head attention on already-projected inputs:
    /// `q: [B, Lq, D]`, `k, v: [B, Lk, D]`, heads split along `D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3
            || sk.len() != 3
            || sk != sv
            || sq[0] != sk[0]
            || sq[2] != sk[2]
            || heads == 0
            || !sq[2].is_multiple_of(heads)
        {
            return shape_err("attention", &[&sq, &sk, &sv]);
        }
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if lk == 0 {
            return shape_err("attention", &[&sq, &sk, &sv]);
        }
        let dh = d / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); b * heads * lq * lk];
        let mut out = vec![T::zero(); b * lq * d];
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                unsafe {
                    T::gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        qv.as_ptr().add(bi * lq * d + h * dh),
                        d as isize,
                        1,
                        kv.as_ptr().add(bi * lk * d + h * dh),
                        1,
                        d as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                }
                softmax_rows(p, lk);
                unsafe {
                    T::gemm(
                        lq,
                        lk,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        lk as isize,
                        1,
                        vv.as_ptr().add(bi * lk * d + h * dh),
                        d as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(bi * lq * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        Ok(self.push(
            Tensor::new(vec![b, lq, d], out)?,
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs },
            rg,
        ))
    }

    /// Attention weights `[B, H, Lq, Lk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- indexing and layout ------------------------------------------

    /// Rows of `table: [V, D]` gathered by `ids`, shaped `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return shape_err("embedding", &[&st]);
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(DiffError::Invalid {
                op: "embedding",
                msg: format!("id {bad} out of range for vocabulary {vocab}"),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("sum_axis", &[&shape]);
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x: x.0, outer, len, inner }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, lit(1.0 / len as f64)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = xs.first() else {
            return shape_err("concat", &[]);
        };
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return shape_err("concat", &[&s0]);
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.shape(v).to_vec()).collect();
                return Err(DiffError::Shape { op: "concat", shapes });
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let tail = numel(&s0[axis + 1..]);
        let inners: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis] * tail).collect();
        let row: usize = inners.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&x, &inner) in xs.iter().zip(&inners) {
                out.extend_from_slice(&self.value(x).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x.0));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat { xs: xs.iter().map(|v| v.0).collect(), outer, inners },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let val = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(val, Op::Reshape { x: x.0 }, rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer = numel(&shape[..axis]);
        let tail = numel(&shape[axis + 1..]);
        let src_inner = shape[axis] * tail;
        let dst_inner = len * tail;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * dst_inner);
        for o in 0..outer {
            let base = o * src_inner + start * tail;
            out.extend_from_slice(&xv[base..base + dst_inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice { x: x.0, outer, src_inner, start: start * tail, dst_inner },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", &[&shape, perm]);
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x: x.0, perm: perm.to_vec() }, rg))
    }

    // ---- spatial ------------------------------------------------------

    /// Area-average downsample of `[B, H, W, C]` by integer factors.
    pub fn avg_pool2d(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 || !s[1].is_multiple_of(fh) || !s[2].is_multiple_of(fw) {
            return shape_err("avg_pool2d", &[&s, &[fh, fw]]);
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / fh, w / fw);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        let inv = lit::<T>(1.0 / (fh * fw) as f64);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    for dy in 0..fh {
                        for dx in 0..fw {
                            let i = ((bi * h + oy * fh + dy) * w + ox * fw + dx) * c;
                            for ch in 0..c {
                                out[o + ch] = out[o + ch] + xv[i + ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] * inv;
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(vec![b, oh, ow, c], out)?, Op::AvgPool2d { x: x.0, fh, fw }, rg))
    }

    /// Bilinear resize of `[B, h, w, C]` to `[B, out_h, out_w, C]`
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
            return shape_err("upsample_bilinear", &[&s, &[out_h, out_w]]);
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * out_h * out_w * c];
        for bi in 0..b {
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let o = ((bi * out_h + oy) * out_w + ox) * c;
                    let taps = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx)),
                        (y0, x1, (1.0 - wy) * wx),
                        (y1, x0, wy * (1.0 - wx)),
                        (y1, x1, wy * wx),
                    ];
                    for (yy, xx, wt) in taps {
                        let i = ((bi * h + yy) * w + xx) * c;
                        let wt = lit::<T>(wt);
                        for ch in 0..c {
                            out[o + ch] = out[o + ch] + wt * xv[i + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![b, out_h, out_w, c], out)?,
            Op::Upsample { x: x.0, rows, cols },
            rg,
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1, on `[B, H, W, Cin]` with
    /// `w: [9 * Cin, Cout]` laid out as `(ky, kx, cin)` rows.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if s.len() != 4 || sw.len() != 2 || sw[0] != 9 * s[3] {
            return shape_err("conv3x3", &[&s, &sw]);
        }
        let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let cout = sw[1];
        let cols = im2col(self.value(x).data(), b, h, wd, cin);
        let mut out = vec![T::zero(); b * h * wd * cout];
        unsafe {
            T::gemm(
                b * h * wd,
                9 * cin,
                cout,
                T::one(),
                cols.as_ptr(),
                (9 * cin) as isize,
                1,
                self.value(w).data().as_ptr(),
                cout as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(Tensor::new(vec![b, h, wd, cout], out)?, Op::Conv3x3 { x: x.0, w: w.0, cols }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", &[self.shape(loss)]);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<T>>], p: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[p].requires_grad {
                return;
            }
            let slot = grads[p].get_or_insert_with(|| vec![T::zero(); self.nodes[p].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_b, batch, m, k, n } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                acc(grads, a, &mut |ga| {
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                g.as_ptr().add(bi * m * n),
                                n as isize,
                                1,
                                bv.as_ptr().add(boff),
                                1,
                                n as isize,
                                T::one(),
                                ga.as_mut_ptr().add(bi * m * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                });
                acc(grads, b, &mut |gb| {
                    if *shared_b {
                        unsafe {
                            T::gemm(
                                k,
                                batch * m,
                                n,
                                T::one(),
                                av.as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                T::one(),
                                gb.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    } else {
                        for bi in 0..batch {
                            unsafe {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    T::one(),
                                    av.as_ptr().add(bi * m * k),
                                    1,
                                    k as isize,
                                    g.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    T::one(),
                                    gb.as_mut_ptr().add(bi * k * n),
                                    n as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
            }
            Op::Binary { kind, a, b, map_a, map_b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let ia = |j: usize| map_a.at(j);
                let ib = |j: usize| map_b.at(j);
                acc(grads, *a, &mut |ga| {
                    for (j, &gj) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gj,
                            Binary::Mul => gj * bv[ib(j)],
                            Binary::Div => gj / bv[ib(j)],
                        };
                        let t = ia(j);
                        ga[t] = ga[t] + d;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (j, &gj) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * av[ia(j)],
                            Binary::Div => {
                                let bb = bv[ib(j)];
                                -gj * av[ia(j)] / (bb * bb)
                            }
                        };
                        let t = ib(j);
                        gb[t] = gb[t] + d;
                    }
                });
            }
            Op::Scale { x, c } => acc(grads, *x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s * *c;
                }
            }),
            Op::AddScalar { x } => acc(grads, *x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }),
            Op::Unary { kind, x } => {
                let xv = self.nodes[*x].value.data();
                let yv = node.value.data();
                acc(grads, *x, &mut |gx| {
                    for j in 0..g.len() {
                        let d = match kind {
                            Unary::Sigmoid => yv[j] * (T::one() - yv[j]),
                            Unary::Gelu => gelu_grad(xv[j]),
                            Unary::Ln => T::one() / xv[j],
                        };
                        gx[j] = gx[j] + g[j] * d;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[*x].value.data();
                acc(grads, *x, &mut |gx| {
                    for j in 0..g.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            gx[j] = gx[j] + g[j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let rows = g.len() / d;
                let gam = gamma.map(|p| self.nodes[p].value.data());
                if let Some(p) = *gamma {
                    acc(grads, p, &mut |gg| {
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    });
                }
                if let Some(p) = *beta {
                    acc(grads, p, &mut |gb| {
                        for r in 0..rows {
                            for c in 0..d {
                                gb[c] = gb[c] + g[r * d + c];
                            }
                        }
                    });
                }
                acc(grads, *x, &mut |gx| {
                    let inv_d = lit::<T>(1.0 / d as f64);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let v = g[r * d + c] * gam.map_or(T::one(), |gv| gv[c]);
                            dxh[c] = v;
                            s1 = s1 + v;
                            s2 = s2 + v * xhat[r * d + c];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for c in 0..d {
                            gx[r * d + c] =
                                gx[r * d + c] + rstd[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                acc(grads, *x, &mut |gx| {
                    for r in 0..g.len() / d {
                        let row = r * d..(r + 1) * d;
                        let dot = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in row {
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                let d = node.value.shape()[1];
                acc(grads, *table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] = gt[id * d + c] + g[r * d + c];
                        }
                    }
                });
            }
            Op::SumAll { x } => acc(grads, *x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::SumAxis { x, outer, len, inner } => acc(grads, *x, &mut |gx| {
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            let t = (o * len + l) * inner + j;
                            gx[t] = gx[t] + g[o * inner + j];
                        }
                    }
                }
            }),
            Op::Concat { xs, outer, inners } => {
                let row: usize = inners.iter().sum();
                let mut off = 0;
                for (&x, &inner) in xs.iter().zip(inners) {
                    acc(grads, x, &mut |gx| {
                        for o in 0..*outer {
                            for j in 0..inner {
                                gx[o * inner + j] = gx[o * inner + j] + g[o * row + off + j];
                            }
                        }
                    });
                    off += inner;
                }
            }
            Op::Reshape { x } => acc(grads, *x, &mut |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }),
            Op::Slice { x, outer, src_inner, start, dst_inner } => acc(grads, *x, &mut |gx| {
                for o in 0..*outer {
                    for j in 0..*dst_inner {
                        let t = o * src_inner + start + j;
                        gx[t] = gx[t] + g[o * dst_inner + j];
                    }
                }
            }),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                acc(grads, *x, &mut |gx| {
                    for (d, &s) in gx.iter_mut().zip(&back) {
                        *d = *d + s;
                    }
                });
            }
            Op::AvgPool2d { x, fh, fw } => {
                let s = self.nodes[*x].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / fh, w / fw);
                let inv = lit::<T>(1.0 / (fh * fw) as f64);
                acc(grads, *x, &mut |gx| {
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((bi * oh + y / fh) * ow + xx / fw) * c;
                                let i = ((bi * h + y) * w + xx) * c;
                                for ch in 0..c {
                                    gx[i + ch] = gx[i + ch] + g[o + ch] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, rows, cols } => {
                let s = self.nodes[*x].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (out_h, out_w) = (rows.len(), cols.len());
                acc(grads, *x, &mut |gx| {
                    for bi in 0..b {
                        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                                let o = ((bi * out_h + oy) * out_w + ox) * c;
                                let taps = [
                                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                                    (y0, x1, (1.0 - wy) * wx),
                                    (y1, x0, wy * (1.0 - wx)),
                                    (y1, x1, wy * wx),
                                ];
                                for (yy, xx, wt) in taps {
                                    let i = ((bi * h + yy) * w + xx) * c;
                                    let wt = lit::<T>(wt);
                                    for ch in 0..c {
                                        gx[i + ch] = gx[i + ch] + wt * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, cols } => {
                let s = self.nodes[*x].value.shape();
                let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
                let cout = node.value.shape()[3];
                let rows = b * h * wd;
                acc(grads, *w, &mut |gw| unsafe {
                    T::gemm(
                        9 * cin,
                        rows,
                        cout,
                        T::one(),
                        cols.as_ptr(),
                        1,
                        (9 * cin) as isize,
                        g.as_ptr(),
                        cout as isize,
                        1,
                        T::one(),
                        gw.as_mut_ptr(),
                        cout as isize,
                        1,
                    );
                });
                let wv = self.nodes[*w].value.data();
                acc(grads, *x, &mut |gx| {
                    let mut dcols = vec![T::zero(); rows * 9 * cin];
                    unsafe {
                        T::gemm(
                            rows,
                            cout,
                            9 * cin,
                            T::one(),
                            g.as_ptr(),
                            cout as isize,
                            1,
                            wv.as_ptr(),
                            1,
                            cout as isize,
                            T::zero(),
                            dcols.as_mut_ptr(),
                            (9 * cin) as isize,
                            1,
                        );
                    }
                    col2im_add(&dcols, gx, b, h, wd, cin);
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sq = self.nodes[q].value.shape();
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = self.nodes[k].value.shape()[1];
        let dh = d / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let qv = self.nodes[q].value.data();
        let kv = self.nodes[k].value.data();
        let vv = self.nodes[v].value.data();
        let (rq, rk, rv) = (self.rg(q), self.rg(k), self.rg(v));
        let mut dq = rq.then(|| vec![T::zero(); qv.len()]);
        let mut dk = rk.then(|| vec![T::zero(); kv.len()]);
        let mut dv = rv.then(|| vec![T::zero(); vv.len()]);
        let mut ds = vec![T::zero(); lq * lk];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                let go = unsafe { g.as_ptr().add(bi * lq * d + h * dh) };
                if let Some(dv) = dv.as_mut() {
                    unsafe {
                        T::gemm(
                            lk,
                            lq,
                            dh,
                            T::one(),
                            p.as_ptr(),
                            1,
                            lk as isize,
                            go,
                            d as isize,
                            1,
                            T::one(),
                            dv.as_mut_ptr().add(bi * lk * d + h * dh),
                            d as isize,
                            1,
                        );
                    }
                }
                if !(rq || rk) {
                    continue;
                }
                // dP = dO @ V^T, then dS = P * (dP - rowsum(dP * P))
                unsafe {
                    T::gemm(
                        lq,
                        dh,
                        lk,
                        T::one(),
                        go,
                        d as isize,
                        1,
                        vv.as_ptr().add(bi * lk * d + h * dh),
                        1,
                        d as isize,
                        T::zero(),
                        ds.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                }
                for r in 0..lq {
                    let row = &mut ds[r * lk..(r + 1) * lk];
                    let prow = &p[r * lk..(r + 1) * lk];
                    let dot = row.iter().zip(prow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (x, &pp) in row.iter_mut().zip(prow) {
                        *x = pp * (*x - dot);
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    unsafe {
                        T::gemm(
                            lq,
                            lk,
                            dh,
                            scale,
                            ds.as_ptr(),
                            lk as isize,
                            1,
                            kv.as_ptr().add(bi * lk * d + h * dh),
                            d as isize,
                            1,
                            T::one(),
                            dq.as_mut_ptr().add(bi * lq * d + h * dh),
                            d as isize,
                            1,
                        );
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    unsafe {
                        T::gemm(
                            lk,
                            lq,
                            dh,
                            scale,
                            ds.as_ptr(),
                            1,
                            lk as isize,
                            qv.as_ptr().add(bi * lq * d + h * dh),
                            d as isize,
                            1,
                            T::one(),
                            dk.as_mut_ptr().add(bi * lk * d + h * dh),
                            d as isize,
                            1,
                        );
                    }
                }
            }
        }
        for (p, part) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(part) = part {
                let slot = grads[p].get_or_insert_with(|| vec![T::zero(); part.len()]);
                for (d, s) in slot.iter_mut().zip(part) {
                    *d = *d + s;
                }
            }
        }
    }
}

fn permute_data<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut src_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(src[cur]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn im2col<T: Float>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); b * h * w * 9 * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Float>(cols: &[T], gx: &mut [T], b: usize, h: usize, w: usize, c: usize) {
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            gx[dst + ch] = gx[dst + ch] + cols[src + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Per-node gradients from [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Collects parameter gradients; parameters absent from the graph or
    /// frozen get exact zeros.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        self.accumulate_into(graph, &mut out);
        out
    }

    pub fn accumulate_into(&self, graph: &Graph<T>, out: &mut ParamGrads<T>) {
        let mut ids: Vec<(&ParamId, &Var)> = graph.params.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = self.wrt(v) {
                let t = Tensor::new(graph.shape(v).to_vec(), g.to_vec()).expect("grad shape");
                out.accumulate(id, &t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 6], 3.25));
        let y = g.layer_norm(x, None, None, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn shape_error_names_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn broadcast_trailing_singleton() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.input(Tensor::from_f64(&[2, 1], &[10., 100.]).unwrap());
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[10., 20., 30., 400., 500., 600.]);
    }

    #[test]
    fn broadcast_middle_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let s = g.input(Tensor::from_f64(&[2, 1, 2], &[10., 20., 30., 40.]).unwrap());
        let y = g.add(s, a).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 13., 24., 35., 46., 37., 48.]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let q = g.input(crate::seeded_init(&[2, 3, 8], 1, crate::Init::Normal { std: 1.0 }));
        let k = g.input(crate::seeded_init(&[2, 5, 8], 2, crate::Init::Normal { std: 1.0 }));
        let o = g.attention(q, k, k, 2).unwrap();
        let p = g.attention_probs(o).unwrap();
        for row in p.chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 2, 2, 1], 0.7));
        let y = g.upsample_bilinear(x, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
