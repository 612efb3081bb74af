//! Linear single-use tape of primitive operations.
//!
//! Forward builders evaluate eagerly and record one node per result. A
//! tape is confined to one logical thread and consumed by `backward`;
//! rebuilding the graph is the reset.

use crate::error::{Error, Result};
use crate::scalar::{normal_cdf, normal_pdf, Scalar};

use super::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Restricted cross-entropy row: ground-truth category plus the negative
/// category set. Categories outside `{gt} ∪ negatives` contribute nothing,
/// in value or gradient.
#[derive(Debug, Clone)]
pub struct CeRow {
    pub gt: usize,
    pub negatives: Vec<usize>,
}

enum Op<F> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: F,
    },
    LinearComb {
        terms: Vec<(TensorId, F)>,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    },
    RowBiasAdd {
        x: TensorId,
        bias: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ColAffine {
        x: TensorId,
        scale: Vec<F>,
    },
    Reindex {
        x: TensorId,
        map: Vec<usize>,
    },
    ScatterRows {
        x: TensorId,
        rows: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<TensorId>,
    },
    RowScale {
        x: TensorId,
        s: TensorId,
    },
    TopkMask {
        x: TensorId,
        keep: Vec<bool>,
    },
    Sum {
        x: TensorId,
    },
    RestrictedCe {
        logits: TensorId,
        rows: Vec<CeRow>,
        // Saved restricted softmax probabilities: per row, p_gt then p_neg.
        probs: Vec<Vec<F>>,
    },
}

struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<F>,
}

/// Ordered record of primitive operations over flat tensors.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf holding a copy of `t`'s data.
    pub fn leaf(&mut self, t: &Tensor<F>) -> TensorId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Register a non-differentiable constant leaf.
    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].value.len()
    }

    /// Gradient accumulated for `id`, if it was on the path to the loss.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, needs_grad: bool, op: Op<F>) -> TensorId {
        assert!(
            !self.consumed,
            "tape already consumed by backward; build a fresh tape"
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            shape,
            needs_grad,
            op,
        });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, ng, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: F) -> TensorId {
        let value: Vec<F> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(value, shape, ng, Op::Scale { x, c })
    }

    /// Σ cᵢ·xᵢ over same-shaped tensors. Coefficients are constants.
    pub fn linear_comb(&mut self, terms: &[(TensorId, F)]) -> Result<TensorId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Tape("linear_comb of zero terms".into()))?;
        let shape = self.shape(first.0).to_vec();
        let mut value = vec![F::zero(); self.numel(first.0)];
        let mut ng = false;
        for &(id, c) in terms {
            if self.shape(id) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "linear_comb",
                    lhs: shape,
                    rhs: self.shape(id).to_vec(),
                });
            }
            for (o, &v) in value.iter_mut().zip(self.value(id)) {
                *o += c * v;
            }
            ng |= self.needs(id);
        }
        Ok(self.push(
            value,
            shape,
            ng,
            Op::LinearComb {
                terms: terms.to_vec(),
            },
        ))
    }

    // ── Matrix products ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, vec![m, n], ng, Op::MatMul { a, b }))
    }

    /// Grouped matrix product over shape [g,m,k] × [g,k,n] (or [g,n,k]
    /// with `transpose_b`), yielding [g,m,n].
    pub fn bmm(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut value = vec![F::zero(); g * m * n];
        for gi in 0..g {
            let ag = &self.value(a)[gi * m * k..(gi + 1) * m * k];
            let bg = &self.value(b)[gi * k * n..(gi + 1) * k * n];
            let out = if transpose_b {
                matmul_nt(ag, bg, m, k, n)
            } else {
                matmul_raw(ag, bg, m, k, n)
            };
            value[gi * m * n..(gi + 1) * m * n].copy_from_slice(&out);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, vec![g, m, n], ng, Op::Bmm { a, b, transpose_b }))
    }

    /// Broadcast-add a length-n bias over the rows of an (m,n) matrix.
    pub fn row_bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "row_bias_add",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let mut value = self.value(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += self.value(bias)[j];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, vec![m, n], ng, Op::RowBiasAdd { x, bias }))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    /// Elementwise x·Φ(x) with Φ the exact standard normal CDF.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value: Vec<F> = self.value(x).iter().map(|&v| v * normal_cdf(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(value, shape, ng, Op::Gelu { x })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Tape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut value = self.value(x).to_vec();
        for_each_lane(&shape, axis, |lane| {
            let mut mx = F::neg_infinity();
            for &i in lane {
                if value[i] > mx {
                    mx = value[i];
                }
            }
            let mut z = F::zero();
            for &i in lane {
                value[i] = (value[i] - mx).exp();
                z += value[i];
            }
            for &i in lane {
                value[i] = value[i] / z;
            }
        });
        let ng = self.needs(x);
        Ok(self.push(value, shape, ng, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis, then gain/bias.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Tape("layernorm input must have at least one axis".into())
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.numel(x) / d;
        let inv_d = F::one() / F::real(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        let mut value = vec![F::zero(); rows * d];
        for r in 0..rows {
            let xr = &self.value(x)[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (xr[j] - mean) * istd;
                xhat[r * d + j] = h;
                value[r * d + j] = self.value(gain)[j] * h + self.value(bias)[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            shape,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization over the rows of an (m,n) matrix (training
    /// mode: batch statistics, gradient flows through them). Returns the
    /// output id plus per-column batch mean and biased variance for the
    /// caller's running-statistics update.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    ) -> Result<(TensorId, Vec<F>, Vec<F>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Tape(format!(
                "batchnorm expects a matrix, got shape {sx:?}"
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let inv_m = F::one() / F::real(m as f64);
        let mut mean = vec![F::zero(); n];
        let mut var = vec![F::zero(); n];
        for i in 0..m {
            for j in 0..n {
                mean[j] += self.value(x)[i * n + j];
            }
        }
        for v in mean.iter_mut() {
            *v = *v * inv_m;
        }
        for i in 0..m {
            for j in 0..n {
                let c = self.value(x)[i * n + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_m;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); m * n];
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let h = (self.value(x)[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                value[i * n + j] = self.value(gain)[j] * h + self.value(bias)[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let id = self.push(
            value,
            vec![m, n],
            ng,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    /// Per-column affine with constant coefficients: out[:,j] =
    /// scale[j]·x[:,j] + shift[j]. Used for batch norm in evaluation mode.
    pub fn col_affine(&mut self, x: TensorId, scale: Vec<F>, shift: Vec<F>) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || scale.len() != sx[1] || shift.len() != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "col_affine",
                lhs: sx,
                rhs: vec![scale.len()],
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] = scale[j] * self.value(x)[i * n + j] + shift[j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, vec![m, n], ng, Op::ColAffine { x, scale }))
    }

    // ── Structure ops ────────────────────────────────────────────────

    /// General gather: out[i] = x[map[i]]. Covers row selection, head
    /// split/merge, tiling and transposition; the adjoint scatter-adds.
    pub fn reindex(&mut self, x: TensorId, map: Vec<usize>, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != map.len() {
            return Err(Error::ShapeMismatch {
                op: "reindex",
                lhs: new_shape,
                rhs: vec![map.len()],
            });
        }
        let src_len = self.numel(x);
        if map.iter().any(|&i| i >= src_len) {
            return Err(Error::Tape("reindex map out of bounds".into()));
        }
        let value: Vec<F> = map.iter().map(|&i| self.value(x)[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(value, new_shape, ng, Op::Reindex { x, map }))
    }

    /// Place the rows of x (r,c) into a zeroed (out_rows,c) matrix at the
    /// given row positions, adding on collision.
    pub fn scatter_rows(
        &mut self,
        x: TensorId,
        rows: Vec<usize>,
        out_rows: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != rows.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: sx,
                rhs: vec![rows.len()],
            });
        }
        if rows.iter().any(|&r| r >= out_rows) {
            return Err(Error::Tape("scatter_rows target out of bounds".into()));
        }
        let c = sx[1];
        let mut value = vec![F::zero(); out_rows * c];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..c {
                value[r * c + j] += self.value(x)[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, vec![out_rows, c], ng, Op::ScatterRows { x, rows }))
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Tape("concat_rows of zero inputs".into()))?;
        let c = match self.shape(*first) {
            [_, c] => *c,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut value = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &id in xs {
            match self.shape(id) {
                [r, cc] if *cc == c => rows += *r,
                s => {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: s.to_vec(),
                        rhs: vec![c],
                    })
                }
            }
            value.extend_from_slice(self.value(id));
            ng |= self.needs(id);
        }
        Ok(self.push(value, vec![rows, c], ng, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Scale each row of x (m,n) by the matching entry of s (m).
    pub fn row_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() != 2 || ss != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: sx,
                rhs: ss,
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            let w = self.value(s)[i];
            for j in 0..n {
                value[i * n + j] = self.value(x)[i * n + j] * w;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value, vec![m, n], ng, Op::RowScale { x, s }))
    }

    /// Zero all entries of each row except its k largest (ties broken by
    /// lowest index). Survivors keep their values; gradients at ties
    /// follow the selected branch.
    pub fn topk_mask(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        Ok(self.topk_mask_with_selection(x, k)?.0)
    }

    /// `topk_mask` that also reports the surviving column indices per row,
    /// in descending-value order.
    pub fn topk_mask_with_selection(
        &mut self,
        x: TensorId,
        k: usize,
    ) -> Result<(TensorId, Vec<Vec<usize>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Tape(format!(
                "topk_mask expects a matrix, got shape {sx:?}"
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        if k == 0 || k > n {
            return Err(Error::Tape(format!("topk_mask k={k} invalid for n={n}")));
        }
        let mut keep = vec![false; m * n];
        let mut value = vec![F::zero(); m * n];
        let mut selection = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.value(x)[i * n..(i + 1) * n];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx.truncate(k);
            for &j in &idx {
                keep[i * n + j] = true;
                value[i * n + j] = row[j];
            }
            selection.push(idx);
        }
        let ng = self.needs(x);
        let id = self.push(value, vec![m, n], ng, Op::TopkMask { x, keep });
        Ok((id, selection))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut s = F::zero();
        for &v in self.value(x) {
            s += v;
        }
        let ng = self.needs(x);
        self.push(vec![s], vec![], ng, Op::Sum { x })
    }

    /// Per-row identity loss restricted to the ground-truth category and a
    /// negative set: −log(exp(o_gt) / (exp(o_gt) + Σ_{j∈N} exp(o_j))),
    /// max-shift stabilized. An empty negative set yields exactly zero.
    pub fn restricted_ce(&mut self, logits: TensorId, rows: Vec<CeRow>) -> Result<TensorId> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] != rows.len() {
            return Err(Error::ShapeMismatch {
                op: "restricted_ce",
                lhs: sx,
                rhs: vec![rows.len()],
            });
        }
        let (m, c) = (sx[0], sx[1]);
        let mut value = vec![F::zero(); m];
        let mut probs = Vec::with_capacity(m);
        for (i, row) in rows.iter().enumerate() {
            if row.gt >= c || row.negatives.iter().any(|&j| j >= c) {
                return Err(Error::Tape(format!(
                    "restricted_ce category out of range for width {c}"
                )));
            }
            let o = &self.value(logits)[i * c..(i + 1) * c];
            let mut mx = o[row.gt];
            for &j in &row.negatives {
                if o[j] > mx {
                    mx = o[j];
                }
            }
            let e_gt = (o[row.gt] - mx).exp();
            let mut z = e_gt;
            let mut p_row = Vec::with_capacity(1 + row.negatives.len());
            for &j in &row.negatives {
                z += (o[j] - mx).exp();
            }
            p_row.push(e_gt / z);
            for &j in &row.negatives {
                p_row.push((o[j] - mx).exp() / z);
            }
            value[i] = mx + z.ln() - o[row.gt];
            probs.push(p_row);
        }
        let ng = self.needs(logits);
        Ok(self.push(value, vec![m], ng, Op::RestrictedCe { logits, rows, probs }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of every grad-requiring tensor reachable from
    /// `loss`. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; rebuild the graph to reset".into(),
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing requires grad
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.apply_adjoint(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: impl FnOnce(&mut [F])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![F::zero(); len]);
        contrib(slot);
    }

    fn apply_adjoint(&mut self, node_idx: usize, g: &[F]) {
        // The op is cloned out cheaply by matching on references; data
        // buffers needed for adjoints are read before mutation.
        match &self.nodes[node_idx].op {
            Op::Leaf => {}
            &Op::Add { a, b } => {
                self.accumulate(a, |d| add_assign(d, g));
                self.accumulate(b, |d| add_assign(d, g));
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accumulate(a, |d| {
                    for ((o, &gv), &bvv) in d.iter_mut().zip(g).zip(&bv) {
                        *o += gv * bvv;
                    }
                });
                self.accumulate(b, |d| {
                    for ((o, &gv), &avv) in d.iter_mut().zip(g).zip(&av) {
                        *o += gv * avv;
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.accumulate(x, |d| {
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::LinearComb { terms } => {
                for &(id, c) in terms.clone().iter() {
                    self.accumulate(id, |d| {
                        for (o, &gv) in d.iter_mut().zip(g) {
                            *o += gv * c;
                        }
                    });
                }
            }
            &Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let da = matmul_nt(g, &bv, m, n, k);
                    self.accumulate(a, |d| add_assign(d, &da));
                }
                if self.needs(b) {
                    let db = matmul_tn(&av, g, m, k, n);
                    self.accumulate(b, |d| add_assign(d, &db));
                }
            }
            &Op::Bmm { a, b, transpose_b } => {
                let sa = self.nodes[a.0].shape.clone();
                let (gcnt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.nodes[node_idx].shape[2];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let mut da = vec![F::zero(); av.len()];
                    for gi in 0..gcnt {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &bv[gi * k * n..(gi + 1) * k * n];
                        let d = if transpose_b {
                            // y = a·bᵀ with b (n,k): da = dy·b
                            matmul_raw(gg, bg, m, n, k)
                        } else {
                            matmul_nt(gg, bg, m, n, k)
                        };
                        add_assign(&mut da[gi * m * k..(gi + 1) * m * k], &d);
                    }
                    self.accumulate(a, |dst| add_assign(dst, &da));
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); bv.len()];
                    for gi in 0..gcnt {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &av[gi * m * k..(gi + 1) * m * k];
                        let d = if transpose_b {
                            // db (n,k) = dyᵀ·a
                            matmul_tn(gg, ag, m, n, k)
                        } else {
                            matmul_tn(ag, gg, m, k, n)
                        };
                        add_assign(&mut db[gi * k * n..(gi + 1) * k * n], &d);
                    }
                    self.accumulate(b, |dst| add_assign(dst, &db));
                }
            }
            &Op::RowBiasAdd { x, bias } => {
                let n = self.nodes[bias.0].value.len();
                self.accumulate(x, |d| add_assign(d, g));
                self.accumulate(bias, |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.clone();
                self.accumulate(x, |d| {
                    for ((o, &gv), &v) in d.iter_mut().zip(g).zip(&xv) {
                        *o += gv * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let shape = self.nodes[node_idx].shape.clone();
                let y = self.nodes[node_idx].value.clone();
                let mut dx = vec![F::zero(); y.len()];
                for_each_lane(&shape, axis, |lane| {
                    let mut dot = F::zero();
                    for &i in lane {
                        dot += g[i] * y[i];
                    }
                    for &i in lane {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                });
                self.accumulate(x, |d| add_assign(d, &dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d_feat = self.nodes[gain.0].value.len();
                let rows = xhat.len() / d_feat;
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = self.nodes[gain.0].value.clone();
                if self.needs(gain) {
                    self.accumulate(gain, |dst| {
                        for r in 0..rows {
                            for j in 0..d_feat {
                                dst[j] += g[r * d_feat + j] * xhat[r * d_feat + j];
                            }
                        }
                    });
                }
                if self.needs(bias) {
                    self.accumulate(bias, |dst| {
                        for r in 0..rows {
                            for j in 0..d_feat {
                                dst[j] += g[r * d_feat + j];
                            }
                        }
                    });
                }
                if self.needs(x) {
                    let inv_d = F::one() / F::real(d_feat as f64);
                    let mut dx = vec![F::zero(); rows * d_feat];
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d_feat {
                            let gd = gv[j] * g[r * d_feat + j];
                            m1 += gd;
                            m2 += gd * xhat[r * d_feat + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d_feat {
                            let gd = gv[j] * g[r * d_feat + j];
                            dx[r * d_feat + j] =
                                inv_std[r] * (gd - m1 - xhat[r * d_feat + j] * m2);
                        }
                    }
                    self.accumulate(x, |dst| add_assign(dst, &dx));
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = self.nodes[gain.0].value.len();
                let m = xhat.len() / n;
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = self.nodes[gain.0].value.clone();
                if self.needs(gain) {
                    self.accumulate(gain, |dst| {
                        for i in 0..m {
                            for j in 0..n {
                                dst[j] += g[i * n + j] * xhat[i * n + j];
                            }
                        }
                    });
                }
                if self.needs(bias) {
                    self.accumulate(bias, |dst| {
                        for i in 0..m {
                            for j in 0..n {
                                dst[j] += g[i * n + j];
                            }
                        }
                    });
                }
                if self.needs(x) {
                    let inv_m = F::one() / F::real(m as f64);
                    let mut dx = vec![F::zero(); m * n];
                    for j in 0..n {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for i in 0..m {
                            let gd = gv[j] * g[i * n + j];
                            m1 += gd;
                            m2 += gd * xhat[i * n + j];
                        }
                        m1 = m1 * inv_m;
                        m2 = m2 * inv_m;
                        for i in 0..m {
                            let gd = gv[j] * g[i * n + j];
                            dx[i * n + j] = inv_std[j] * (gd - m1 - xhat[i * n + j] * m2);
                        }
                    }
                    self.accumulate(x, |dst| add_assign(dst, &dx));
                }
            }
            Op::ColAffine { x, scale } => {
                let x = *x;
                let scale = scale.clone();
                let n = scale.len();
                self.accumulate(x, |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i] += gv * scale[i % n];
                    }
                });
            }
            Op::Reindex { x, map } => {
                let x = *x;
                let map = map.clone();
                self.accumulate(x, |d| {
                    for (i, &src) in map.iter().enumerate() {
                        d[src] += g[i];
                    }
                });
            }
            Op::ScatterRows { x, rows } => {
                let x = *x;
                let rows = rows.clone();
                let c = self.nodes[node_idx].shape[1];
                self.accumulate(x, |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows { xs } => {
                let xs = xs.clone();
                let mut offset = 0;
                for id in xs {
                    let len = self.nodes[id.0].value.len();
                    let piece = &g[offset..offset + len];
                    self.accumulate(id, |d| add_assign(d, piece));
                    offset += len;
                }
            }
            &Op::RowScale { x, s } => {
                let (m, n) = (self.nodes[node_idx].shape[0], self.nodes[node_idx].shape[1]);
                let xv = self.nodes[x.0].value.clone();
                let sv = self.nodes[s.0].value.clone();
                self.accumulate(x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * sv[i];
                        }
                    }
                });
                self.accumulate(s, |d| {
                    for i in 0..m {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * xv[i * n + j];
                        }
                        d[i] += acc;
                    }
                });
            }
            Op::TopkMask { x, keep } => {
                let x = *x;
                let keep = keep.clone();
                self.accumulate(x, |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        if keep[i] {
                            d[i] += gv;
                        }
                    }
                });
            }
            &Op::Sum { x } => {
                let gv = g[0];
                self.accumulate(x, |d| {
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::RestrictedCe { logits, rows, probs } => {
                let logits = *logits;
                let rows = rows.clone();
                let probs = probs.clone();
                let c = self.nodes[logits.0].shape[1];
                self.accumulate(logits, |d| {
                    for (i, row) in rows.iter().enumerate() {
                        let gi = g[i];
                        let p = &probs[i];
                        d[i * c + row.gt] += (p[0] - F::one()) * gi;
                        for (t, &j) in row.negatives.iter().enumerate() {
                            d[i * c + j] += p[t + 1] * gi;
                        }
                    }
                });
            }
        }
    }
}

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Visit each lane (set of flat indices) along `axis` of `shape`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let lane_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; lane_len];
    for o in 0..outer {
        for i in 0..inner {
            for (l, slot) in lane.iter_mut().enumerate() {
                *slot = o * lane_len * inner + l * inner + i;
            }
            f(&lane);
        }
    }
}
