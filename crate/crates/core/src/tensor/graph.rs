use super::gemm::{gemm, strided_gemm};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused grouped-query causal attention call.
///
/// `q` is laid out `[batch·q_len, n_q_heads·head_dim]`, `k` and `v` are
/// `[batch·kv_len, n_kv_heads·head_dim]`. Query `i` attends key `j` iff
/// `j <= i + q_offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub q_offset: usize,
}

impl AttentionSpec {
    /// Key/value head read by query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h / (self.n_q_heads / self.n_kv_heads)
    }

    fn visible(&self, i: usize) -> usize {
        (i + self.q_offset + 1).min(self.kv_len)
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Tanh(Var),
    SoftCap(Var, F),
    Silu(Var),
    Relu(Var),
    Sinh(Var),
    Asinh(Var),
    RmsNorm {
        x: Var,
        scale: Option<Var>,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<F>,
    },
    SoftmaxRows {
        x: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<F>,
        total_weight: F,
        probs: Vec<F>,
    },
    QuantileLoss {
        pred: Var,
        target: Vec<F>,
        mask: Vec<F>,
        taus: Vec<F>,
        denom: F,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are pushed in evaluation order, so the node list is already
/// topologically sorted. Gradients of leaves accumulate across calls to
/// [`Graph::backward`] until [`Graph::zero_grad`].
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Real>(what: &str, t: &[F]) -> Result<()> {
    if t.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, `None` when no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn as_matrix(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.last_dim())
    }

    // ---------------------------------------------------------------- ops

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?}{} · {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb, m, k, n },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Bias-free linear layer `x · Wᵀ` with `W` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, w, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.map_value(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a trailing-axis vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "bias of {} elements for last extent {d}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            for (y, &bb) in row.iter_mut().zip(&b) {
                *y += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    fn map_value(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let src = self.value(a);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map_value(a, |x| x.tanh());
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// `alpha · tanh(x / alpha)`.
    pub fn soft_cap(&mut self, a: Var, alpha: F) -> Var {
        let t = self.map_value(a, |x| alpha * (x / alpha).tanh());
        let rg = self.rg(a);
        self.push(t, Op::SoftCap(a, alpha), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map_value(a, |x| x / (F::ONE + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map_value(a, |x| if x > F::ZERO { x } else { F::ZERO });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sinh(&mut self, a: Var) -> Var {
        let t = self.map_value(a, |x| x.sinh());
        let rg = self.rg(a);
        self.push(t, Op::Sinh(a), rg)
    }

    pub fn asinh(&mut self, a: Var) -> Var {
        let t = self.map_value(a, |x| x.asinh());
        let rg = self.rg(a);
        self.push(t, Op::Asinh(a), rg)
    }

    /// RMS normalization over the last axis, optionally scaled.
    pub fn rmsnorm(&mut self, x: Var, scale: Option<Var>, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if let Some(s) = scale {
            if self.value(s).numel() != d {
                return Err(Error::dim(format!(
                    "rmsnorm scale has {} elements, last extent is {d}",
                    self.value(s).numel()
                )));
            }
        }
        let sc = scale.map(|s| self.value(s).data().to_vec());
        let src = self.value(x);
        let mut out = vec![F::ZERO; src.numel()];
        let mut inv_rms = Vec::with_capacity(src.rows());
        let dn = F::of(d as f64);
        for (row, orow) in src.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let inv = F::ONE / (ms + eps).sqrt();
            inv_rms.push(inv);
            match &sc {
                Some(s) => {
                    for ((o, &v), &g) in orow.iter_mut().zip(row).zip(s) {
                        *o = v * inv * g;
                    }
                }
                None => {
                    for (o, &v) in orow.iter_mut().zip(row) {
                        *o = v * inv;
                    }
                }
            }
        }
        if !inv_rms.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("rmsnorm of a zero row with eps = 0".into()));
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x) || scale.is_some_and(|s| self.rg(s));
        Ok(self.push(t, Op::RmsNorm { x, scale, inv_rms }, rg))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::dim("embedding table must be 2-D"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownToken {
                    id: id as u32,
                    vocab_size: v,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects (and possibly repeats) rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = self.as_matrix(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let d = self.value(first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != d {
                return Err(Error::dim("concat_rows: last extents differ"));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / d.max(1);
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Rotary embedding on `[rows, heads·head_dim]`; row `r` sits at
    /// absolute position `positions[r]`. Adjacent pairs `(2j, 2j+1)` rotate
    /// by `pos · base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        if head_dim % 2 != 0 {
            return Err(Error::config(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let (rows, width) = self.as_matrix(x);
        if width % head_dim != 0 || positions.len() != rows {
            return Err(Error::dim(format!(
                "rope: width {width}, head_dim {head_dim}, {rows} rows vs {} positions",
                positions.len()
            )));
        }
        let mut t = self.value(x).clone();
        rotate_rows(t.data_mut(), width, positions, head_dim, base, false);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            rg,
        ))
    }

    /// Fused grouped-query causal softmax attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let AttentionSpec {
            batch,
            q_len,
            kv_len,
            n_q_heads: hq,
            n_kv_heads: hkv,
            head_dim: hd,
            ..
        } = spec;
        if hkv == 0 || hq % hkv != 0 {
            return Err(Error::config(format!(
                "query heads {hq} not divisible by kv heads {hkv}"
            )));
        }
        if self.shape(q) != [batch * q_len, hq * hd]
            || self.shape(k) != [batch * kv_len, hkv * hd]
            || self.shape(v) != [batch * kv_len, hkv * hd]
        {
            return Err(Error::dim(format!(
                "attention shapes q {:?} k {:?} v {:?} disagree with {spec:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let (qw, kw) = (hq * hd, hkv * hd);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![F::ZERO; batch * q_len * qw];
        let mut probs = vec![F::ZERO; batch * hq * q_len * kv_len];
        for b in 0..batch {
            for h in 0..hq {
                let kh = spec.kv_head(h);
                let qo = b * q_len * qw + h * hd;
                let ko = b * kv_len * kw + kh * hd;
                let po = (b * hq + h) * q_len * kv_len;
                let p = &mut probs[po..po + q_len * kv_len];
                strided_gemm(
                    q_len, hd, kv_len, scale, &qd[qo..], qw, 1, &kd[ko..], 1, kw, F::ZERO, p,
                    kv_len, 1,
                );
                for i in 0..q_len {
                    let row = &mut p[i * kv_len..(i + 1) * kv_len];
                    let vis = spec.visible(i);
                    let mx = row[..vis].iter().copied().fold(F::neg_infinity(), F::max);
                    let mut z = F::ZERO;
                    for s in row[..vis].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in row[..vis].iter_mut() {
                        *s /= z;
                    }
                    for s in row[vis..].iter_mut() {
                        *s = F::ZERO;
                    }
                }
                strided_gemm(
                    q_len,
                    kv_len,
                    hd,
                    F::ONE,
                    p,
                    kv_len,
                    1,
                    &vd[ko..],
                    kw,
                    1,
                    F::ZERO,
                    &mut out[qo..],
                    qw,
                    1,
                );
            }
        }
        check_finite("attention", &out)?;
        let t = Tensor::new(vec![batch * q_len, qw], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Row softmax. With `causal_offset = Some(o)`, row `i` only sees
    /// columns `j <= i + o`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal_offset: Option<usize>) -> Var {
        let (_, c) = self.as_matrix(x);
        let mut t = self.value(x).clone();
        for (i, row) in t.data_mut().chunks_mut(c.max(1)).enumerate() {
            let vis = causal_offset.map_or(c, |o| (i + o + 1).min(c));
            let mx = row[..vis].iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::ZERO;
            for s in row[..vis].iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for s in row[..vis].iter_mut() {
                *s /= z;
            }
            for s in row[vis..].iter_mut() {
                *s = F::ZERO;
            }
        }
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).data().iter().copied().sum::<F>() / F::of(n as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of a `[r, d]` matrix, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.as_matrix(x);
        if r == 0 {
            return Err(Error::dim("mean over zero rows"));
        }
        let mut out = vec![F::ZERO; d];
        for row in self.value(x).data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rn = F::of(r as f64);
        for o in &mut out {
            *o /= rn;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![d], out)?, Op::MeanRows(x), rg))
    }

    /// Weighted mean softmax cross-entropy over rows that carry a target.
    ///
    /// Returns zero when no row has a target (or total weight is zero).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: Option<&[F]>,
    ) -> Result<Var> {
        let (r, v) = self.as_matrix(logits);
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} logit rows", targets.len())));
        }
        if let Some(w) = weights {
            if w.len() != r {
                return Err(Error::dim("one weight per logit row required"));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![F::ZERO; r * v];
        let mut wsum = F::ZERO;
        let mut loss = F::ZERO;
        let mut wts = vec![F::ZERO; r];
        for i in 0..r {
            let Some(t) = targets[i] else { continue };
            if t >= v {
                return Err(Error::UnknownToken {
                    id: t as u32,
                    vocab_size: v,
                });
            }
            let w = weights.map_or(F::ONE, |w| w[i]);
            wts[i] = w;
            let row = &ld[i * v..(i + 1) * v];
            let prow = &mut probs[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::ZERO;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            let ce = (mx - row[t]) + z.ln();
            loss += w * ce;
            wsum += w;
        }
        let value = if wsum > F::ZERO { loss / wsum } else { F::ZERO };
        if !value.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: wts,
                total_weight: wsum,
                probs,
            },
            rg,
        ))
    }

    /// Masked pinball loss `Σ z·ρ_τ(y − q̂) / (Q·Σz)`.
    ///
    /// `pred` is `[n, P·Q]` (quantile index fastest), `target` and `mask`
    /// are `n·P` long. Zero when the mask is empty.
    pub fn quantile_loss(&mut self, pred: Var, target: &[F], mask: &[F], taus: &[F]) -> Result<Var> {
        let q = taus.len();
        let numel = self.value(pred).numel();
        if q == 0 || target.len() * q != numel || mask.len() != target.len() {
            return Err(Error::dim(format!(
                "quantile loss: pred {numel} elements, {} targets, {} mask, {q} levels",
                target.len(),
                mask.len()
            )));
        }
        let pd = self.value(pred).data();
        let zsum: F = mask.iter().copied().sum();
        let denom = F::of(q as f64) * zsum;
        let mut total = F::ZERO;
        for (j, (&y, &z)) in target.iter().zip(mask).enumerate() {
            if z == F::ZERO {
                continue;
            }
            for (qi, &tau) in taus.iter().enumerate() {
                total += z * pinball(tau, y - pd[j * q + qi]);
            }
        }
        let value = if zsum > F::ZERO { total / denom } else { F::ZERO };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::QuantileLoss {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                taus: taus.to_vec(),
                denom,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &[F]) -> Result<Var> {
        let pd = self.value(pred).data();
        if pd.len() != target.len() || pd.is_empty() {
            return Err(Error::dim("mse: prediction and target lengths differ"));
        }
        let n = F::of(pd.len() as f64);
        let v = pd
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward needs a scalar output"));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![F::ZERO; nodes[v.0].value.numel()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    let lg = self.leaf_grads[i].get_or_insert_with(|| vec![F::ZERO; g.len()]);
                    for (a, b) in lg.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                &Op::MatMul { a, b, ta, tb, m, k, n } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(a, &mut |da| {
                        if ta {
                            gemm(k, n, m, bv, tb, &g, true, da, true);
                        } else {
                            gemm(m, n, k, &g, false, bv, !tb, da, true);
                        }
                    });
                    acc(b, &mut |db| {
                        if tb {
                            gemm(n, m, k, &g, true, av, ta, db, true);
                        } else {
                            gemm(k, m, n, av, !ta, &g, false, db, true);
                        }
                    });
                }
                &Op::Add(a, b) => {
                    acc(a, &mut |da| add_into(da, &g));
                    acc(b, &mut |db| add_into(db, &g));
                }
                &Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gg * y;
                        }
                    });
                    acc(b, &mut |db| {
                        for ((d, &gg), &x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gg * x;
                        }
                    });
                }
                &Op::Scale(a, c) => acc(a, &mut |da| {
                    for (d, &gg) in da.iter_mut().zip(&g) {
                        *d += gg * c;
                    }
                }),
                &Op::AddBias(x, bias) => {
                    acc(x, &mut |dx| add_into(dx, &g));
                    let d = nodes[bias.0].value.numel();
                    acc(bias, &mut |db| {
                        for row in g.chunks(d) {
                            add_into(db, row);
                        }
                    });
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &yy) in da.iter_mut().zip(&g).zip(y) {
                            *d += gg * (F::ONE - yy * yy);
                        }
                    });
                }
                &Op::SoftCap(a, alpha) => {
                    let y = node.value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &yy) in da.iter_mut().zip(&g).zip(y) {
                            let t = yy / alpha;
                            *d += gg * (F::ONE - t * t);
                        }
                    });
                }
                &Op::Silu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &xx) in da.iter_mut().zip(&g).zip(x) {
                            let s = F::ONE / (F::ONE + (-xx).exp());
                            *d += gg * s * (F::ONE + xx * (F::ONE - s));
                        }
                    });
                }
                &Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &xx) in da.iter_mut().zip(&g).zip(x) {
                            if xx > F::ZERO {
                                *d += gg;
                            }
                        }
                    });
                }
                &Op::Sinh(a) => {
                    let x = nodes[a.0].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &xx) in da.iter_mut().zip(&g).zip(x) {
                            *d += gg * xx.cosh();
                        }
                    });
                }
                &Op::Asinh(a) => {
                    let x = nodes[a.0].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &xx) in da.iter_mut().zip(&g).zip(x) {
                            *d += gg / (xx * xx + F::ONE).sqrt();
                        }
                    });
                }
                Op::RmsNorm { x, scale, inv_rms } => {
                    let xv = nodes[x.0].value.data();
                    let d = nodes[x.0].value.last_dim();
                    let dn = F::of(d as f64);
                    let sv = scale.map(|s| nodes[s.0].value.data());
                    acc(*x, &mut |dx| {
                        for (r, &inv) in inv_rms.iter().enumerate() {
                            let xs = &xv[r * d..(r + 1) * d];
                            let gs = &g[r * d..(r + 1) * d];
                            let dot: F = match sv {
                                Some(s) => (0..d).map(|j| gs[j] * s[j] * xs[j]).sum(),
                                None => (0..d).map(|j| gs[j] * xs[j]).sum(),
                            };
                            let coef = inv * inv * dot / dn;
                            for j in 0..d {
                                let gj = sv.map_or(gs[j], |s| gs[j] * s[j]);
                                dx[r * d + j] += inv * (gj - xs[j] * coef);
                            }
                        }
                    });
                    if let Some(s) = *scale {
                        acc(s, &mut |ds| {
                            for (r, &inv) in inv_rms.iter().enumerate() {
                                for j in 0..d {
                                    ds[j] += g[r * d + j] * xv[r * d + j] * inv;
                                }
                            }
                        });
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.last_dim();
                    acc(*table, &mut |dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let d = nodes[x.0].value.last_dim();
                    acc(*x, &mut |dx| {
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        acc(p, &mut |dp| add_into(dp, &g[off..off + n]));
                        off += n;
                    }
                }
                &Op::Reshape(x) => acc(x, &mut |dx| add_into(dx, &g)),
                Op::Rope {
                    x,
                    positions,
                    head_dim,
                    base,
                } => {
                    let width = nodes[x.0].value.last_dim();
                    let mut back = g.clone();
                    rotate_rows(&mut back, width, positions, *head_dim, *base, true);
                    acc(*x, &mut |dx| add_into(dx, &back));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        spec,
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                        probs,
                        &g,
                    );
                    acc(*q, &mut |b| add_into(b, &dq));
                    acc(*k, &mut |b| add_into(b, &dk));
                    acc(*v, &mut |b| add_into(b, &dv));
                }
                &Op::SoftmaxRows { x } => {
                    let y = node.value.data();
                    let c = node.value.last_dim().max(1);
                    acc(x, &mut |dx| {
                        for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yy * (gg - dot);
                            }
                        }
                    });
                }
                &Op::Sum(x) => acc(x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }),
                &Op::Mean(x) => {
                    let n = F::of(nodes[x.0].value.numel().max(1) as f64);
                    acc(x, &mut |dx| {
                        for d in dx.iter_mut() {
                            *d += g[0] / n;
                        }
                    });
                }
                &Op::MeanRows(x) => {
                    let (r, d) = (nodes[x.0].value.rows(), nodes[x.0].value.last_dim());
                    let rn = F::of(r as f64);
                    acc(x, &mut |dx| {
                        for row in dx.chunks_mut(d) {
                            for (o, &gg) in row.iter_mut().zip(&g) {
                                *o += gg / rn;
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    total_weight,
                    probs,
                } => {
                    if *total_weight > F::ZERO {
                        let v = nodes[logits.0].value.last_dim();
                        acc(*logits, &mut |dl| {
                            for (i, t) in targets.iter().enumerate() {
                                let Some(t) = *t else { continue };
                                let c = g[0] * weights[i] / *total_weight;
                                let row = &mut dl[i * v..(i + 1) * v];
                                for (d, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                                    *d += c * p;
                                }
                                row[t] -= c;
                            }
                        });
                    }
                }
                Op::QuantileLoss {
                    pred,
                    target,
                    mask,
                    taus,
                    denom,
                } => {
                    if *denom > F::ZERO {
                        let q = taus.len();
                        let pv = nodes[pred.0].value.data();
                        acc(*pred, &mut |dp| {
                            for (j, (&y, &z)) in target.iter().zip(mask).enumerate() {
                                if z == F::ZERO {
                                    continue;
                                }
                                for (qi, &tau) in taus.iter().enumerate() {
                                    let u = y - pv[j * q + qi];
                                    let slope = if u >= F::ZERO { tau } else { tau - F::ONE };
                                    dp[j * q + qi] -= g[0] * z * slope / *denom;
                                }
                            }
                        });
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = nodes[pred.0].value.data();
                    let n = F::of(target.len() as f64);
                    acc(*pred, &mut |dp| {
                        for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                            *d += g[0] * F::of(2.0) * (p - t) / n;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Pinball loss `max(τu, (τ−1)u)`.
#[inline]
pub(crate) fn pinball<F: Real>(tau: F, u: F) -> F {
    (tau * u).max((tau - F::ONE) * u)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn rotate_rows<F: Real>(
    data: &mut [F],
    width: usize,
    positions: &[usize],
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| base.powf(-(2.0 * j as f64) / head_dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut cs = vec![(F::ZERO, F::ZERO); half];
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        for (j, c) in cs.iter_mut().enumerate() {
            let theta = sign * pos as f64 * inv_freq[j];
            *c = (F::of(theta.cos()), F::of(theta.sin()));
        }
        for head in row.chunks_mut(head_dim) {
            for (j, &(c, s)) in cs.iter().enumerate() {
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = x0 * c - x1 * s;
                head[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn attention_backward<F: Real>(
    spec: &AttentionSpec,
    qd: &[F],
    kd: &[F],
    vd: &[F],
    probs: &[F],
    g: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let AttentionSpec {
        batch,
        q_len,
        kv_len,
        n_q_heads: hq,
        n_kv_heads: hkv,
        head_dim: hd,
        ..
    } = *spec;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let (qw, kw) = (hq * hd, hkv * hd);
    let mut dq = vec![F::ZERO; qd.len()];
    let mut dk = vec![F::ZERO; kd.len()];
    let mut dv = vec![F::ZERO; vd.len()];
    let mut ds = vec![F::ZERO; q_len * kv_len];
    for b in 0..batch {
        for h in 0..hq {
            let kh = spec.kv_head(h);
            let qo = b * q_len * qw + h * hd;
            let ko = b * kv_len * kw + kh * hd;
            let po = (b * hq + h) * q_len * kv_len;
            let p = &probs[po..po + q_len * kv_len];
            // dP = dO · Vᵀ
            strided_gemm(
                q_len, hd, kv_len, F::ONE, &g[qo..], qw, 1, &vd[ko..], 1, kw, F::ZERO, &mut ds,
                kv_len, 1,
            );
            for i in 0..q_len {
                let vis = spec.visible(i);
                let pr = &p[i * kv_len..(i + 1) * kv_len];
                let dr = &mut ds[i * kv_len..(i + 1) * kv_len];
                let dot: F = (0..vis).map(|j| pr[j] * dr[j]).sum();
                for j in 0..vis {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                for x in dr[vis..].iter_mut() {
                    *x = F::ZERO;
                }
            }
            strided_gemm(
                q_len,
                kv_len,
                hd,
                scale,
                &ds,
                kv_len,
                1,
                &kd[ko..],
                kw,
                1,
                F::ONE,
                &mut dq[qo..],
                qw,
                1,
            );
            strided_gemm(
                kv_len,
                q_len,
                hd,
                scale,
                &ds,
                1,
                kv_len,
                &qd[qo..],
                qw,
                1,
                F::ONE,
                &mut dk[ko..],
                kw,
                1,
            );
            strided_gemm(
                kv_len,
                q_len,
                hd,
                F::ONE,
                p,
                1,
                kv_len,
                &g[qo..],
                qw,
                1,
                F::ONE,
                &mut dv[ko..],
                kw,
                1,
            );
        }
    }
    (dq, dk, dv)
}
