//! Forward recording and reverse-mode replay.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every primitive
//! it evaluates and can later produce [`Gradients`] for the parameters that
//! took part. Several graphs may be built concurrently over one store; the
//! gradients they return are merged with [`ParamStore::accumulate`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Real, NORM_EPS};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn sq_norm(&self) -> Real {
        self.grads.values().map(Tensor::sq_norm).sum()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    TanhClip {
        x: Var,
        alpha: Real,
    },
    Exp(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Vec<bool>>,
        weights: Vec<Real>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        blocks: Vec<usize>,
        outer: usize,
    },
    RowDot {
        q: Var,
        k: Var,
    },
    Softmax {
        x: Var,
        mask: Vec<bool>,
    },
    PickLogProb {
        logits: Var,
        mask: Vec<bool>,
        chosen: Vec<usize>,
        probs: Vec<Real>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<Real>,
    },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked("constant", value, Op::Leaf)
    }

    /// The graph node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.value(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `y = x W^T + b` over the trailing axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        if wt.shape().len() != 2 {
            return Err(TensorError::shape("linear", format!("weight shape {:?}", wt.shape())));
        }
        let (out, inp) = (wt.shape()[0], wt.shape()[1]);
        if xt.shape().is_empty() || xt.last_dim() != inp {
            return Err(TensorError::shape(
                "linear",
                format!("input {:?} against weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.value(b).shape()),
                ));
            }
        }
        let rows = xt.rows();
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::row_major(xt.data(), rows, inp),
            MatRef::transposed(wt.data(), out, inp),
            &mut y,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let y = Tensor::new(shape, y)?;
        self.push_checked("linear", y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} + {:?}", at.shape(), bt.shape()),
            ));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(at.shape().to_vec(), data)?;
        self.push_checked("add", y, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * c).collect();
        let y = Tensor::new(xt.shape().to_vec(), data)?;
        self.push_checked("scale", y, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.max(0.0)).collect();
        let y = Tensor::new(xt.shape().to_vec(), data)?;
        self.push_checked("relu", y, Op::Relu(x))
    }

    /// `alpha * tanh(x)`; any scaling of the argument is the caller's business.
    pub fn tanh_clip(&mut self, x: Var, alpha: Real) -> Result<Var> {
        if !(alpha > 0.0) {
            return Err(TensorError::shape("tanh_clip", format!("alpha must be positive, got {alpha}")));
        }
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| alpha * v.tanh()).collect();
        let y = Tensor::new(xt.shape().to_vec(), data)?;
        self.push_checked("tanh_clip", y, Op::TanhClip { x, alpha })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.exp()).collect();
        let y = Tensor::new(xt.shape().to_vec(), data)?;
        self.push_checked("exp", y, Op::Exp(x))
    }

    /// Normalizes `x: [batch, set, channels]` over the set axis, per batch
    /// entry and channel, then applies the per-channel affine `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(TensorError::shape("instance_norm", format!("input {shape:?}")));
        }
        let (batch, set, ch) = (shape[0], shape[1], shape[2]);
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.shape() != [ch] || bt.shape() != [ch] {
            return Err(TensorError::shape(
                "instance_norm",
                format!("affine {:?}/{:?} for {ch} channels", gt.shape(), bt.shape()),
            ));
        }
        let xs = xt.data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; batch * ch];
        let n = set as Real;
        for b in 0..batch {
            let base = b * set * ch;
            for c in 0..ch {
                let mut mean = 0.0;
                for s in 0..set {
                    mean += xs[base + s * ch + c];
                }
                mean /= n;
                let mut var = 0.0;
                for s in 0..set {
                    let d = xs[base + s * ch + c] - mean;
                    var += d * d;
                }
                var /= n;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[b * ch + c] = is;
                for s in 0..set {
                    let i = base + s * ch + c;
                    xhat[i] = (xs[i] - mean) * is;
                }
            }
        }
        let (g, be) = (gt.data(), bt.data());
        let y: Vec<Real> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| g[i % ch] * v + be[i % ch])
            .collect();
        let y = Tensor::new(shape.to_vec(), y)?;
        self.push_checked(
            "instance_norm",
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q: [G, M, H*dk]`, `k: [G, S, H*dk]`, `v: [G, S, H*dv]`; head `h` uses
    /// the `h`-th block of columns. `mask` (length `G*S`, `true` = excluded)
    /// is shared by all queries of a group. Returns `[G, M, H*dv]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (qs, ks, vs) = (qt.shape(), kt.shape(), vt.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(TensorError::shape(
                "attention",
                format!("expected rank-3 q/k/v, got {qs:?} {ks:?} {vs:?}"),
            ));
        }
        let (groups, m, hdk) = (qs[0], qs[1], qs[2]);
        let (s, hdv) = (ks[1], vs[2]);
        if ks[0] != groups || vs[0] != groups || vs[1] != s || ks[2] != hdk {
            return Err(TensorError::shape(
                "attention",
                format!("q {qs:?}, k {ks:?}, v {vs:?}"),
            ));
        }
        if heads == 0 || hdk % heads != 0 || hdv % heads != 0 {
            return Err(TensorError::shape(
                "attention",
                format!("{heads} heads do not divide widths {hdk}/{hdv}"),
            ));
        }
        if let Some(mask) = &mask {
            if mask.len() != groups * s {
                return Err(TensorError::shape(
                    "attention",
                    format!("mask length {} for {groups}x{s} keys", mask.len()),
                ));
            }
        }
        let (dk, dv) = (hdk / heads, hdv / heads);
        let scale = 1.0 / (dk as Real).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut weights = vec![0.0; groups * heads * m * s];
        let mut out = vec![0.0; groups * m * hdv];
        for g in 0..groups {
            let gmask = mask.as_ref().map(|mk| &mk[g * s..(g + 1) * s]);
            let open = |j: usize| gmask.is_none_or(|mk| !mk[j]);
            if !(0..s).any(open) {
                return Err(TensorError::DegenerateMask {
                    op: "attention",
                    row: g,
                });
            }
            for h in 0..heads {
                for mi in 0..m {
                    let qrow = &qd[(g * m + mi) * hdk + h * dk..][..dk];
                    let w = &mut weights[((g * heads + h) * m + mi) * s..][..s];
                    let mut max = Real::NEG_INFINITY;
                    for j in 0..s {
                        if !open(j) {
                            continue;
                        }
                        let krow = &kd[(g * s + j) * hdk + h * dk..][..dk];
                        let score = dot(qrow, krow) * scale;
                        w[j] = score;
                        max = max.max(score);
                    }
                    let mut sum = 0.0;
                    for j in 0..s {
                        if open(j) {
                            w[j] = (w[j] - max).exp();
                            sum += w[j];
                        }
                    }
                    let orow = &mut out[(g * m + mi) * hdv + h * dv..][..dv];
                    for j in 0..s {
                        if !open(j) {
                            continue;
                        }
                        w[j] /= sum;
                        let vrow = &vd[(g * s + j) * hdv + h * dv..][..dv];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w[j] * x;
                        }
                    }
                }
            }
        }
        let y = Tensor::new(vec![groups, m, hdv], out)?;
        self.push_checked(
            "attention",
            y,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                weights,
            },
        )
    }

    /// Selects rows of `x` viewed as `[rows, prod(row_shape)]`; the result
    /// has shape `[index.len(), row_shape...]`.
    pub fn gather_rows(&mut self, x: Var, row_shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let row_len: usize = row_shape.iter().product();
        if row_len == 0 || xt.len() % row_len != 0 {
            return Err(TensorError::shape(
                "gather_rows",
                format!("{:?} into rows of {row_shape:?}", xt.shape()),
            ));
        }
        let rows = xt.len() / row_len;
        let src = xt.data();
        let mut out = Vec::with_capacity(index.len() * row_len);
        for &i in &index {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = vec![index.len()];
        shape.extend_from_slice(row_shape);
        let y = Tensor::new(shape, out)?;
        Ok(self.push(y, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {ref_shape:?}")));
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == ref_shape.len()
                && s[..axis] == ref_shape[..axis]
                && s[axis + 1..] == ref_shape[axis + 1..];
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} against {ref_shape:?} on axis {axis}"),
                ));
            }
            total_axis += s[axis];
            blocks.push(s[axis..].iter().product::<usize>());
        }
        let width: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total_axis;
        let y = Tensor::new(shape, out)?;
        Ok(self.push(
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
                blocks,
                outer,
            },
        ))
    }

    /// `out[g, s] = q[g] . k[g, s]` for `q: [G, D]`, `k: [G, S, D]`.
    pub fn row_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qt, kt) = (self.value(q), self.value(k));
        let (qs, ks) = (qt.shape(), kt.shape());
        if qs.len() != 2 || ks.len() != 3 || ks[0] != qs[0] || ks[2] != qs[1] {
            return Err(TensorError::shape("row_dot", format!("q {qs:?}, k {ks:?}")));
        }
        let (groups, s, d) = (ks[0], ks[1], ks[2]);
        let mut out = vec![0.0; groups * s];
        for g in 0..groups {
            let qrow = &qt.data()[g * d..(g + 1) * d];
            for j in 0..s {
                out[g * s + j] = dot(qrow, &kt.data()[(g * s + j) * d..][..d]);
            }
        }
        let y = Tensor::new(vec![groups, s], out)?;
        self.push_checked("row_dot", y, Op::RowDot { q, k })
    }

    /// Softmax over the trailing axis with `mask` entries (`true`) forced to
    /// exactly zero. A row with every entry masked is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.len() || xt.shape().is_empty() {
            return Err(TensorError::shape(
                "softmax_masked",
                format!("mask length {} for {:?}", mask.len(), xt.shape()),
            ));
        }
        let width = xt.last_dim();
        let probs = masked_softmax_rows(xt.data(), &mask, width, "softmax_masked")?;
        let y = Tensor::new(xt.shape().to_vec(), probs)?;
        self.push_checked("softmax_masked", y, Op::Softmax { x, mask })
    }

    /// Log-probability of `chosen[r]` under the masked softmax of row `r`
    /// of `logits: [R, S]`. Returns `[R]`.
    pub fn pick_log_prob(&mut self, logits: Var, mask: Vec<bool>, chosen: Vec<usize>) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape().len() != 2 || mask.len() != lt.len() || chosen.len() != lt.shape()[0] {
            return Err(TensorError::shape(
                "pick_log_prob",
                format!(
                    "logits {:?}, mask {}, chosen {}",
                    lt.shape(),
                    mask.len(),
                    chosen.len()
                ),
            ));
        }
        let width = lt.shape()[1];
        let data = lt.data();
        let probs = masked_softmax_rows(data, &mask, width, "pick_log_prob")?;
        let mut out = Vec::with_capacity(chosen.len());
        for (r, &c) in chosen.iter().enumerate() {
            if c >= width {
                return Err(TensorError::Index {
                    op: "pick_log_prob",
                    index: c,
                    extent: width,
                });
            }
            if mask[r * width + c] {
                return Err(TensorError::shape(
                    "pick_log_prob",
                    format!("row {r} chose masked entry {c}"),
                ));
            }
            let row = &data[r * width..(r + 1) * width];
            let rmask = &mask[r * width..(r + 1) * width];
            let max = row
                .iter()
                .zip(rmask)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| *v)
                .fold(Real::NEG_INFINITY, Real::max);
            let lse = row
                .iter()
                .zip(rmask)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| (v - max).exp())
                .sum::<Real>()
                .ln()
                + max;
            out.push(row[c] - lse);
        }
        let y = Tensor::from_vec(out);
        self.push_checked(
            "pick_log_prob",
            y,
            Op::PickLogProb {
                logits,
                mask,
                chosen,
                probs,
            },
        )
    }

    /// `sum_i weights[i] * x[i]`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<Real>) -> Result<Var> {
        let xt = self.value(x);
        if weights.len() != xt.len() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), xt.len()),
            ));
        }
        let s = dot(xt.data(), &weights);
        self.push_checked("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, weights })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: Real = self.value(x).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let g = Tensor::new(node.value.shape().to_vec(), dy)?;
                    out.grads.insert(*id, g);
                }
                Op::Linear { x, w, b } => self.back_linear(&mut grads, &dy, *x, *w, *b),
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, self, *a), &dy);
                    add_into(slot(&mut grads, self, *b), &dy);
                }
                Op::Scale(x, c) => {
                    let gx = slot(&mut grads, self, *x);
                    for (g, d) in gx.iter_mut().zip(&dy) {
                        *g += c * d;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, self, *x);
                    for ((g, d), v) in gx.iter_mut().zip(&dy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::TanhClip { x, alpha } => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, self, *x);
                    for ((g, d), yv) in gx.iter_mut().zip(&dy).zip(y) {
                        let t = yv / alpha;
                        *g += d * alpha * (1.0 - t * t);
                    }
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, self, *x);
                    for ((g, d), yv) in gx.iter_mut().zip(&dy).zip(y) {
                        *g += d * yv;
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => self.back_instance_norm(&mut grads, &dy, *x, *gamma, *beta, xhat, inv_std),
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    weights,
                } => self.back_attention(&mut grads, &dy, *q, *k, *v, *heads, mask.as_deref(), weights),
                Op::Gather { x, index } => {
                    let row_len = dy.len() / index.len().max(1);
                    let gx = slot(&mut grads, self, *x);
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut gx[src * row_len..(src + 1) * row_len];
                        add_into(dst, &dy[r * row_len..(r + 1) * row_len]);
                    }
                }
                Op::Reshape(x) => add_into(slot(&mut grads, self, *x), &dy),
                Op::Concat {
                    inputs,
                    blocks,
                    outer,
                } => {
                    let width: usize = blocks.iter().sum();
                    let mut offset = 0;
                    for (&v, &blk) in inputs.iter().zip(blocks) {
                        let gx = slot(&mut grads, self, v);
                        for o in 0..*outer {
                            add_into(
                                &mut gx[o * blk..(o + 1) * blk],
                                &dy[o * width + offset..o * width + offset + blk],
                            );
                        }
                        offset += blk;
                    }
                }
                Op::RowDot { q, k } => {
                    let ks = self.value(*k).shape();
                    let (groups, s, d) = (ks[0], ks[1], ks[2]);
                    let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                    let mut gq = vec![0.0; groups * d];
                    let mut gk = vec![0.0; groups * s * d];
                    for g in 0..groups {
                        for j in 0..s {
                            let dj = dy[g * s + j];
                            if dj == 0.0 {
                                continue;
                            }
                            let krow = &kv[(g * s + j) * d..][..d];
                            let qrow = &qv[g * d..][..d];
                            axpy(&mut gq[g * d..(g + 1) * d], dj, krow);
                            axpy(&mut gk[(g * s + j) * d..][..d], dj, qrow);
                        }
                    }
                    add_into(slot(&mut grads, self, *q), &gq);
                    add_into(slot(&mut grads, self, *k), &gk);
                }
                Op::Softmax { x, mask } => {
                    let p = node.value.data();
                    let width = node.value.last_dim();
                    let gx = slot(&mut grads, self, *x);
                    for r in 0..p.len() / width {
                        let range = r * width..(r + 1) * width;
                        let inner = dot(&p[range.clone()], &dy[range.clone()]);
                        for j in range {
                            if !mask[j] {
                                gx[j] += p[j] * (dy[j] - inner);
                            }
                        }
                    }
                }
                Op::PickLogProb {
                    logits,
                    mask,
                    chosen,
                    probs,
                } => {
                    let width = self.value(*logits).shape()[1];
                    let gx = slot(&mut grads, self, *logits);
                    for (r, &c) in chosen.iter().enumerate() {
                        let d = dy[r];
                        for j in 0..width {
                            let idx = r * width + j;
                            if mask[idx] {
                                continue;
                            }
                            let ind = if j == c { 1.0 } else { 0.0 };
                            gx[idx] += d * (ind - probs[idx]);
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let d = dy[0];
                    let gx = slot(&mut grads, self, *x);
                    axpy(gx, d, weights);
                }
                Op::Sum(x) => {
                    let d = dy[0];
                    for g in slot(&mut grads, self, *x).iter_mut() {
                        *g += d;
                    }
                }
            }
        }
        Ok(out)
    }

    fn back_linear(&self, grads: &mut [Option<Vec<Real>>], dy: &[Real], x: Var, w: Var, b: Option<Var>) {
        let (xt, wt) = (self.value(x), self.value(w));
        let (out, inp) = (wt.shape()[0], wt.shape()[1]);
        let rows = xt.rows();
        gemm(
            MatRef::row_major(dy, rows, out),
            MatRef::row_major(wt.data(), out, inp),
            slot(grads, self, x),
            1.0,
        );
        gemm(
            MatRef::transposed(dy, rows, out),
            MatRef::row_major(xt.data(), rows, inp),
            slot(grads, self, w),
            1.0,
        );
        if let Some(b) = b {
            let gb = slot(grads, self, b);
            for row in dy.chunks_exact(out) {
                add_into(gb, row);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_instance_norm(
        &self,
        grads: &mut [Option<Vec<Real>>],
        dy: &[Real],
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[Real],
        inv_std: &[Real],
    ) {
        let shape = self.value(x).shape();
        let (batch, set, ch) = (shape[0], shape[1], shape[2]);
        let g = self.value(gamma).data();
        let mut dgamma = vec![0.0; ch];
        let mut dbeta = vec![0.0; ch];
        let mut dx = vec![0.0; dy.len()];
        let n = set as Real;
        for b in 0..batch {
            let base = b * set * ch;
            for c in 0..ch {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for s in 0..set {
                    let i = base + s * ch + c;
                    dgamma[c] += dy[i] * xhat[i];
                    dbeta[c] += dy[i];
                    let dxh = dy[i] * g[c];
                    sum_d += dxh;
                    sum_dx += dxh * xhat[i];
                }
                let is = inv_std[b * ch + c];
                for s in 0..set {
                    let i = base + s * ch + c;
                    let dxh = dy[i] * g[c];
                    dx[i] = is / n * (n * dxh - sum_d - xhat[i] * sum_dx);
                }
            }
        }
        add_into(slot(grads, self, x), &dx);
        add_into(slot(grads, self, gamma), &dgamma);
        add_into(slot(grads, self, beta), &dbeta);
    }

    #[allow(clippy::too_many_arguments)]
    fn back_attention(
        &self,
        grads: &mut [Option<Vec<Real>>],
        dy: &[Real],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
        weights: &[Real],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (groups, m, hdk) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let (s, hdv) = (kt.shape()[1], vt.shape()[2]);
        let (dk, dv) = (hdk / heads, hdv / heads);
        let scale = 1.0 / (dk as Real).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dw = vec![0.0; s];
        for g in 0..groups {
            let open = |j: usize| mask.is_none_or(|mk| !mk[g * s + j]);
            for h in 0..heads {
                for mi in 0..m {
                    let w = &weights[((g * heads + h) * m + mi) * s..][..s];
                    let dout = &dy[(g * m + mi) * hdv + h * dv..][..dv];
                    let mut inner = 0.0;
                    for j in 0..s {
                        if !open(j) {
                            continue;
                        }
                        let vo = (g * s + j) * hdv + h * dv;
                        dw[j] = dot(dout, &vd[vo..vo + dv]);
                        inner += w[j] * dw[j];
                        axpy(&mut gv[vo..vo + dv], w[j], dout);
                    }
                    let qo = (g * m + mi) * hdk + h * dk;
                    for j in 0..s {
                        if !open(j) {
                            continue;
                        }
                        let ds = w[j] * (dw[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (g * s + j) * hdk + h * dk;
                        axpy(&mut gq[qo..qo + dk], ds, &kd[ko..ko + dk]);
                        axpy(&mut gk[ko..ko + dk], ds, &qd[qo..qo + dk]);
                    }
                }
            }
        }
        add_into(slot(grads, self, q), &gq);
        add_into(slot(grads, self, k), &gk);
        add_into(slot(grads, self, v), &gv);
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<Real>>], graph: &Graph<'_>, v: Var) -> &'a mut [Real] {
    grads[v.0].get_or_insert_with(|| vec![0.0; graph.value(v).len()])
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy(dst: &mut [Real], a: Real, x: &[Real]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked_softmax_rows(data: &[Real], mask: &[bool], width: usize, op: &'static str) -> Result<Vec<Real>> {
    let mut probs = vec![0.0; data.len()];
    for (r, (row, rmask)) in data.chunks_exact(width).zip(mask.chunks_exact(width)).enumerate() {
        let max = row
            .iter()
            .zip(rmask)
            .filter(|(_, m)| !**m)
            .map(|(v, _)| *v)
            .fold(Real::NEG_INFINITY, Real::max);
        if max == Real::NEG_INFINITY {
            return Err(TensorError::DegenerateMask { op, row: r });
        }
        let out = &mut probs[r * width..(r + 1) * width];
        let mut sum = 0.0;
        for j in 0..width {
            if !rmask[j] {
                out[j] = (row[j] - max).exp();
                sum += out[j];
            }
        }
        for (j, p) in out.iter_mut().enumerate() {
            if !rmask[j] {
                *p /= sum;
            }
        }
    }
    Ok(probs)
}
