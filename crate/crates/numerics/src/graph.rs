use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention(Box<AttentionRecord<T>>),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, r0: usize, c0: usize },
    GatherRows { src: Var, idx: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { src: Var, inv_std: Vec<T> },
    /// Keeps `tanh(u)` of the forward pass for the backward sweep.
    Gelu { src: Var, tanh: Vec<T> },
    /// Keeps `sigmoid(x)` of the forward pass.
    Silu { src: Var, sig: Vec<T> },
    Exp(Var),
    ClampMax { src: Var, max: T },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    L2Normalize { src: Var, norms: Vec<T> },
}

#[derive(Debug)]
struct AttentionRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    q_segs: Vec<(usize, usize)>,
    kv_segs: Vec<(usize, usize)>,
    heads: usize,
    scale: T,
    /// Softmax probabilities per (segment, head), each `[lq, lk]`, concatenated.
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager computation tape. Values are immutable once recorded; the tape is
/// meant to be built and consumed by a single worker.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` finds nothing to differentiate.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Records a parameter. Repeated calls with the same id return the same var.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = params.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let nb: usize = sb.iter().product();
        let ok = sa == sb || nb == 1 || (sb.len() <= sa.len() && sa.ends_with(sb));
        if ok {
            Ok(())
        } else {
            Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// `a + b`, where `b` may broadcast over leading extents of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<T> = if nb == av.len() {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        } else {
            let mut out = Vec::with_capacity(av.len());
            for chunk in av.chunks_exact(nb) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| x + y));
            }
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// `a - b` for identical shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "sub",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    /// Elementwise `a * b`, where `b` may broadcast over leading extents of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<T> = if nb == av.len() {
            av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
        } else {
            let mut out = Vec::with_capacity(av.len());
            for chunk in av.chunks_exact(nb) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| x * y));
            }
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// Matrix product of 2-D operands, optionally transposing either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, ka) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, ka, n, self.value(a), a_t, self.value(b), b_t, &mut out, T::zero());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, a_t, b_t }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "transpose needs 2-D input, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_buf(self.value(a), r, c);
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Concatenates 2-D operands along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NumericsError::InvalidArgument(
                "concat needs at least one part and axis 0 or 1".into(),
            ));
        }
        for &p in parts {
            if self.shape(p).len() != 2 {
                return Err(NumericsError::InvalidArgument(
                    "concat operands must be 2-D".into(),
                ));
            }
        }
        let other = 1 - axis;
        let fixed = self.shape(parts[0])[other];
        for &p in parts {
            if self.shape(p)[other] != fixed {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let (out, shape) = if axis == 0 {
            let mut out = Vec::with_capacity(total * fixed);
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            (out, vec![total, fixed])
        } else {
            let rows = fixed;
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
            (out, vec![rows, total])
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Rectangular window `[r0, r0+rows) x [c0, c0+cols)` of a 2-D operand.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || r0 + rows > s[0] || c0 + cols > s[1] {
            return Err(NumericsError::InvalidArgument(format!(
                "slice [{r0}+{rows}, {c0}+{cols}] out of bounds for {s:?}"
            )));
        }
        let width = s[1];
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&src[r * width + c0..r * width + c0 + cols]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, cols], out, Op::Slice { src: a, r0, c0 }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, rows: usize) -> Result<Var> {
        let (_, c) = self.dims(a);
        self.slice(a, r0, rows, 0, c)
    }

    /// Row gather `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NumericsError::InvalidArgument(format!(
                "gather index {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                src: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over the last extent.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in 0..r {
            softmax_in_place(&mut out[row * c..(row + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in 0..r {
            let x = &mut out[row * c..(row + 1) * c];
            let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            x.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), ng)
    }

    /// Normalization over the last extent to zero mean and unit variance
    /// (no affine transform; compose with `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let eps = T::from_f64_lossy(LN_EPS);
        let cf = T::from_usize(c).unwrap();
        let mut out = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in 0..r {
            let x = &mut out[row * c..(row + 1) * c];
            let mean = x.iter().copied().sum::<T>() / cf;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::LayerNorm { src: a, inv_std },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = gelu_consts::<T>();
        let half = T::from_f64_lossy(0.5);
        let ng = self.ng(a) && self.grad_enabled;
        let x = self.value(a);
        let mut tanh = Vec::with_capacity(if ng { x.len() } else { 0 });
        let mut out = Vec::with_capacity(x.len());
        for &v in x {
            let th = (k * (v + c * v * v * v)).tanh();
            out.push(half * v * (T::one() + th));
            if ng {
                tanh.push(th);
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::Gelu { src: a, tanh }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ng = self.ng(a) && self.grad_enabled;
        let x = self.value(a);
        let mut sig = Vec::with_capacity(if ng { x.len() } else { 0 });
        let mut out = Vec::with_capacity(x.len());
        for &v in x {
            let s = sigmoid(v);
            out.push(v * s);
            if ng {
                sig.push(s);
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::Silu { src: a, sig }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), ng)
    }

    /// `min(a, max)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let max = T::from_f64_lossy(max);
        let out = self.value(a).iter().map(|&x| x.min(max)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::ClampMax { src: a, max }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.value(a).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::MeanAll(a), ng)
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r == 0 {
            return Err(NumericsError::InvalidArgument(
                "mean over zero rows".into(),
            ));
        }
        let v = self.value(a);
        let mut out = vec![T::zero(); c];
        for row in 0..r {
            for (o, &x) in out.iter_mut().zip(&v[row * c..(row + 1) * c]) {
                *o += x;
            }
        }
        let inv = T::one() / T::from_usize(r).unwrap();
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        Ok(self.push(vec![1, c], out, Op::MeanRows(a), ng))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let out = (0..r)
            .map(|row| v[row * c..(row + 1) * c].iter().copied().sum::<T>())
            .collect();
        let ng = self.ng(a);
        self.push(vec![r, 1], out, Op::SumCols(a), ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let eps = T::from_f64_lossy(L2_EPS);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in 0..r {
            let x = &mut out[row * c..(row + 1) * c];
            let n = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            x.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::L2Normalize { src: a, norms },
            ng,
        )
    }

    /// Affine map `x W + b` for `x: [r, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (r, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != n {
                    return Err(NumericsError::ShapeMismatch {
                        op: "linear bias",
                        lhs: vec![n],
                        rhs: self.shape(b).to_vec(),
                    });
                }
                let mut out = Vec::with_capacity(r * n);
                for _ in 0..r {
                    out.extend_from_slice(bv);
                }
                out
            }
            None => vec![T::zero(); r * n],
        };
        T::gemm(r, k, n, self.value(x), false, self.value(w), false, &mut out, T::one());
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![r, n], out, Op::Linear { x, w, b }, ng))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q` is `[rows_q, d]`, `k` and `v` are `[rows_kv, d]`; query segment
    /// `i` (start, len) attends only to key/value segment `i`. Heads split
    /// the feature axis evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[(usize, usize)],
        kv_segs: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (rq, d) = self.dims(q);
        let (rk, dk) = self.dims(k);
        if self.dims(v) != (rk, dk) || dk != d || heads == 0 || d % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if q_segs.len() != kv_segs.len()
            || q_segs.iter().any(|&(s, l)| s + l > rq)
            || kv_segs.iter().any(|&(s, l)| s + l > rk || l == 0)
        {
            return Err(NumericsError::InvalidArgument(
                "attention segments out of range or empty".into(),
            ));
        }
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let total: usize = q_segs
            .iter()
            .zip(kv_segs)
            .map(|(a, b)| a.1 * b.1 * heads)
            .sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); rq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut off = 0;
        for (&(qs, lq), &(ks, lk)) in q_segs.iter().zip(kv_segs) {
            for h in 0..heads {
                let p = &mut probs[off..off + lq * lk];
                let col = h * dh;
                T::gemm_strided(
                    lq,
                    dh,
                    lk,
                    &qv[qs * d + col..],
                    (d, 1),
                    &kv[ks * d + col..],
                    (1, d),
                    p,
                    (lk, 1),
                    T::zero(),
                );
                for row in p.chunks_exact_mut(lk) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                T::gemm_strided(
                    lq,
                    lk,
                    dh,
                    p,
                    (lk, 1),
                    &vv[ks * d + col..],
                    (d, 1),
                    &mut out[qs * d + col..],
                    (d, 1),
                    T::zero(),
                );
                off += lq * lk;
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let rec = AttentionRecord {
            q,
            k,
            v,
            q_segs: q_segs.to_vec(),
            kv_segs: kv_segs.to_vec(),
            heads,
            scale,
            probs: if ng { probs } else { Vec::new() },
        };
        Ok(self.push(vec![rq, d], out, Op::Attention(Box::new(rec)), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut params = HashMap::new();
        if !node.needs_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match node.op {
                Op::Param(id) => {
                    params.insert(id, g);
                }
                _ => grads[i] = Some(g),
            }
        }
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn attention_backward(&self, rec: &AttentionRecord<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rq, d) = self.dims(rec.q);
        let rk = self.dims(rec.k).0;
        let dh = d / rec.heads;
        let (qv, kv, vv) = (
            &self.nodes[rec.q.0].value,
            &self.nodes[rec.k.0].value,
            &self.nodes[rec.v.0].value,
        );
        let mut dq = vec![T::zero(); rq * d];
        let mut dk = vec![T::zero(); rk * d];
        let mut dv = vec![T::zero(); rk * d];
        let mut dp = Vec::new();
        let mut off = 0;
        for (&(qs, lq), &(ks, lk)) in rec.q_segs.iter().zip(&rec.kv_segs) {
            for h in 0..rec.heads {
                let p = &rec.probs[off..off + lq * lk];
                let col = h * dh;
                let go = &g[qs * d + col..];
                // dV += P^T dO
                T::gemm_strided(lk, lq, dh, p, (1, lk), go, (d, 1), &mut dv[ks * d + col..], (d, 1), T::one());
                // dP = dO V^T
                dp.clear();
                dp.resize(lq * lk, T::zero());
                T::gemm_strided(lq, dh, lk, go, (d, 1), &vv[ks * d + col..], (1, d), &mut dp, (lk, 1), T::zero());
                // dS = scale * P * (dP - rowsum(P * dP))
                for (dr, pr) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = rec.scale * pv * (*x - dot);
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                T::gemm_strided(lq, lk, dh, &dp, (lk, 1), &kv[ks * d + col..], (d, 1), &mut dq[qs * d + col..], (d, 1), T::one());
                T::gemm_strided(lk, lq, dh, &dp, (1, lk), &qv[qs * d + col..], (d, 1), &mut dk[ks * d + col..], (d, 1), T::one());
                off += lq * lk;
            }
        }
        self.acc_add(grads, rec.q, &dq);
        self.acc_add(grads, rec.k, &dk);
        self.acc_add(grads, rec.v, &dv);
    }

    /// Adds `src` into the gradient of `v`, copying on first contribution.
    fn acc_add(&self, grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(dst) => add_into(dst, src),
            slot => *slot = Some(src.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_add(grads, *a, g);
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for chunk in g.chunks_exact(nb) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Sub(a, b) => {
                self.acc_add(grads, *a, g);
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let nb = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gac, gc) in ga.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for ((o, &v), &y) in gac.iter_mut().zip(gc).zip(bv) {
                            *o += v * y;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                        for ((o, &v), &x) in gb.iter_mut().zip(gc).zip(ac) {
                            *o += v * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::MatMul { a, b, a_t, b_t } => {
                let (a_t, b_t) = (*a_t, *b_t);
                let sa = &self.nodes[a.0].shape;
                let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = node.shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    if a_t {
                        // A stored [k, m]: dA = op(B) dC^T
                        T::gemm(k, n, m, bv, b_t, g, true, ga, T::one());
                    } else {
                        // dA = dC op(B)^T
                        T::gemm(m, n, k, g, false, bv, !b_t, ga, T::one());
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if b_t {
                        // B stored [n, k]: dB = dC^T op(A)
                        T::gemm(n, m, k, g, true, av, a_t, gb, T::one());
                    } else {
                        // dB = op(A)^T dC
                        T::gemm(k, m, n, av, !a_t, g, false, gb, T::one());
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    let t = transpose_buf(g, r, c);
                    add_into(ga, &t);
                }
            }
            Op::Reshape(a) => self.acc_add(grads, *a, g),
            Op::Linear { x, w, b } => {
                let (r, k) = self.dims(*x);
                let n = node.shape[1];
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    T::gemm(r, n, k, g, false, wv, true, gx, T::one());
                }
                if let Some(gw) = self.acc(grads, *w) {
                    T::gemm(k, r, n, xv, true, g, false, gw, T::one());
                }
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    for chunk in g.chunks_exact(n) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        self.acc_add(grads, p, &g[off..off + len]);
                        off += len;
                    }
                } else {
                    let total = node.shape[1];
                    let rows = node.shape[0];
                    let mut col = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].shape[1];
                        if let Some(gp) = self.acc(grads, p) {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * c..(r + 1) * c],
                                    &g[r * total + col..r * total + col + c],
                                );
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::Slice { src, r0, c0 } => {
                let width = self.nodes[src.0].shape[1];
                let (rows, cols) = (node.shape[0], node.shape[1]);
                if let Some(gs) = self.acc(grads, *src) {
                    for r in 0..rows {
                        let dst = (r0 + r) * width + c0;
                        add_into(&mut gs[dst..dst + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = node.shape[1];
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &s) in idx.iter().enumerate() {
                        add_into(&mut gs[s * c..(s + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = matrix_dims(&node.shape);
                if let Some(ga) = self.acc(grads, *a) {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            ga[row * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (r, c) = matrix_dims(&node.shape);
                if let Some(ga) = self.acc(grads, *a) {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let s: T = gs.iter().copied().sum();
                        for j in 0..c {
                            ga[row * c + j] += gs[j] - ys[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let (r, c) = matrix_dims(&node.shape);
                let cf = T::from_usize(c).unwrap();
                if let Some(ga) = self.acc(grads, *src) {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let mg = gs.iter().copied().sum::<T>() / cf;
                        let mgy = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        let inv = inv_std[row];
                        for j in 0..c {
                            ga[row * c + j] += inv * (gs[j] - mg - ys[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu { src, tanh } => {
                let av = &self.nodes[src.0].value;
                if let Some(ga) = self.acc(grads, *src) {
                    for (((o, &v), &x), &th) in ga.iter_mut().zip(g).zip(av).zip(tanh) {
                        *o += v * gelu_grad(x, th);
                    }
                }
            }
            Op::Silu { src, sig } => {
                let av = &self.nodes[src.0].value;
                if let Some(ga) = self.acc(grads, *src) {
                    for (((o, &v), &x), &s) in ga.iter_mut().zip(g).zip(av).zip(sig) {
                        *o += v * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &v), &e) in ga.iter_mut().zip(g).zip(y) {
                        *o += v * e;
                    }
                }
            }
            Op::ClampMax { src, max } => {
                let av = &self.nodes[src.0].value;
                if let Some(ga) = self.acc(grads, *src) {
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x < *max {
                            *o += v;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0];
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / T::from_usize(ga.len().max(1)).unwrap();
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                let inv = T::one() / T::from_usize(r).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for row in 0..r {
                        for j in 0..c {
                            ga[row * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for row in 0..r {
                        let s = g[row];
                        ga[row * c..(row + 1) * c].iter_mut().for_each(|o| *o += s);
                    }
                }
            }
            Op::L2Normalize { src, norms } => {
                let (r, c) = matrix_dims(&node.shape);
                if let Some(ga) = self.acc(grads, *src) {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        let inv = T::one() / norms[row];
                        for j in 0..c {
                            ga[row * c + j] += (gs[j] - ys[j] * dot) * inv;
                        }
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to an intermediate value, if it
    /// depends on a parameter.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Vec<T>> {
        self.params.remove(&id)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose_buf<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    x.iter_mut().for_each(|v| *v /= s);
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

/// Derivative of the tanh-approximated GELU given `th = tanh(u(x))`.
fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let (k, c) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_param(vals: &[f64], shape: &[usize]) -> (ParamSet<f64>, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::new(shape.to_vec(), vals.to_vec()).unwrap(), true);
        (ps, id)
    }

    #[test]
    fn square_sum_gradient() {
        let (ps, id) = leaf_param(&[3.0], &[1]);
        let mut g = Graph::new();
        let p = g.param(&ps, id);
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[6.0]);
    }

    #[test]
    fn independent_loss_has_no_gradient() {
        let (ps, id) = leaf_param(&[1.0, 2.0], &[2]);
        let mut g = Graph::new();
        let _p = g.param(&ps, id);
        let c = g.constant(Tensor::new([2], vec![4.0, 5.0]).unwrap());
        let loss = g.sum(c);
        let mut grads = g.backward(loss).unwrap();
        let mut ps = ps;
        ps.load_grads(&mut grads).unwrap();
        assert_eq!(ps.tensor(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (ps, id) = leaf_param(&[1.0, 2.0], &[2]);
        let mut g = Graph::new();
        let p = g.param(&ps, id);
        assert!(matches!(
            g.backward(p),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn matmul_transposed_operands_agree() {
        let mut g = Graph::<f64>::new();
        let a = g.constant_from([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = g.constant_from([3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let at = g.transpose(a).unwrap();
        let bt = g.transpose(b).unwrap();
        let c2 = g.matmul_t(at, bt, true, true).unwrap();
        assert_eq!(g.value(c), &[4., 5., 10., 11.]);
        assert_eq!(g.value(c), g.value(c2));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let a = g.constant_from([2, 4], vec![1., 2., 3., 4., -1., 0., 0., 5.]).unwrap();
        let y = g.layer_norm(a);
        for row in g.value(y).chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let (ps, id) = leaf_param(&[3.0], &[1]);
        let mut g = Graph::inference();
        let p = g.param(&ps, id);
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(id).is_none());
    }
}
