//! Reverse-mode autodiff over a flat operation tape.
//!
//! Nodes are appended in execution order, so ids are already a topological
//! order; [`Tape::backward`] walks them once in reverse and accumulates
//! gradients additively. Attention and the softmax cross-entropy keep the
//! probability matrices from the forward pass for their backward rules.

use super::ops::{gemm, row_moments, softmax_row_prefix};
use super::tensor::add_assign;
use super::{fl, NnError, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Index into the gradient vector returned by [`Tape::backward`].
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Row-broadcast bias add: `x[n,m] + bias[m]`.
    AddBias {
        a: Var,
        bias: Var,
    },
    /// Elementwise add of a constant (positional encodings etc.).
    AddConst {
        a: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    /// Elementwise multiply by a constant mask (dropout).
    MulConst {
        a: Var,
        mask: Vec<F>,
    },
    Relu {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    L2NormRows {
        a: Var,
        eps: F,
    },
    /// Ragged mean-pool gather: row `i` of the output is the mean of the
    /// table rows listed in `ids[i]`.
    EmbeddingMean {
        table: Var,
        ids: Vec<Vec<u32>>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    /// Arbitrary row gather; rows may repeat.
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Transpose {
        a: Var,
    },
    MultiHeadAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Per-head attention probabilities saved from the forward pass;
        /// masked entries are exact zeros, which also encodes causality.
        attn: Vec<Tensor<F>>,
    },
    /// Mean cross-entropy of logit rows against integer targets; saves the
    /// softmax probabilities.
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<F>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Tape<F> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NnError> {
        let value = gemm(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(value, Op::Matmul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(NnError::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        add_assign(value.data_mut(), self.value(b).data());
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(NnError::ShapeMismatch(format!(
                "bias length {} vs {cols} columns",
                self.value(bias).len()
            )));
        }
        let mut value = self.value(a).clone();
        let n_rows = value.len() / cols;
        for i in 0..n_rows {
            let bias_data = &self.nodes[bias.0].value;
            let row = &mut value.data_mut()[i * cols..(i + 1) * cols];
            add_assign(row, bias_data.data());
        }
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn add_const(&mut self, a: Var, constant: &Tensor<F>) -> Result<Var, NnError> {
        if !self.value(a).same_shape(constant) {
            return Err(NnError::ShapeMismatch(format!(
                "add_const {:?} vs {:?}",
                self.value(a).shape(),
                constant.shape()
            )));
        }
        let mut value = self.value(a).clone();
        add_assign(value.data_mut(), constant.data());
        Ok(self.push(value, Op::AddConst { a }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c })
    }

    pub fn mul_const(&mut self, a: Var, mask: Vec<F>) -> Result<Var, NnError> {
        if mask.len() != self.value(a).len() {
            return Err(NnError::ShapeMismatch(format!(
                "mask length {} vs {}",
                mask.len(),
                self.value(a).len()
            )));
        }
        let mut value = self.value(a).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        Ok(self.push(value, Op::MulConst { a, mask }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(value, Op::Relu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            softmax_row_prefix(value.row_mut(i), cols);
        }
        self.push(value, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, NnError> {
        let value = super::ops::layer_norm(
            self.value(a),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(value, Op::LayerNorm { a, gamma, beta, eps }))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: F) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        let n_rows = value.len() / cols;
        for i in 0..n_rows {
            let row = &mut value.data_mut()[i * cols..(i + 1) * cols];
            let norm = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        self.push(value, Op::L2NormRows { a, eps })
    }

    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<u32>>) -> Result<Var, NnError> {
        let tab = self.value(table);
        let (rows, d) = (tab.rows(), tab.cols());
        let mut out = vec![F::zero(); ids.len() * d];
        for (i, row_ids) in ids.iter().enumerate() {
            if row_ids.is_empty() {
                return Err(NnError::InvalidShape("embedding_mean with empty id row".into()));
            }
            for &id in row_ids {
                if id as usize >= rows {
                    return Err(NnError::ShapeMismatch(format!(
                        "token id {id} out of range for table with {rows} rows"
                    )));
                }
                add_assign(&mut out[i * d..(i + 1) * d], tab.row(id as usize));
            }
            let inv = F::one() / fl::<F>(row_ids.len() as f64);
            for v in &mut out[i * d..(i + 1) * d] {
                *v = *v * inv;
            }
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(value, Op::EmbeddingMean { table, ids }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidShape("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NnError::ShapeMismatch(format!(
                    "concat_rows column mismatch {} vs {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > rows {
            return Err(NnError::ShapeMismatch(format!(
                "slice rows {start}..{} of {rows}",
                start + len
            )));
        }
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::matrix(len, cols, data)?;
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, NnError> {
        let t = self.value(a);
        let (n, cols) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NnError::ShapeMismatch(format!("gather row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(value, Op::GatherRows { a, rows }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose { a })
    }

    /// Multi-head attention over column-split heads. `q: [n, d]`,
    /// `k, v: [m, d]` with `d % heads == 0`; causal restricts position `i`
    /// to keys `0..=i` (requires `n == m`).
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        let m = self.value(k).rows();
        if self.value(k).cols() != d || self.value(v).cols() != d || self.value(v).rows() != m {
            return Err(NnError::ShapeMismatch(format!(
                "attention shapes q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::InvalidShape(format!(
                "model dim {d} not divisible into {heads} heads"
            )));
        }
        if causal && n != m {
            return Err(NnError::ShapeMismatch(
                "causal mask requires self-attention (|Q| == |K|)".into(),
            ));
        }
        let dh = d / heads;
        let scale = F::one() / fl::<F>(dh as f64).sqrt();
        let mut out = vec![F::zero(); n * d];
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let mut probs = vec![F::zero(); n * m];
            for i in 0..n {
                let qrow = &qd[i * d + off..i * d + off + dh];
                let valid = if causal { i + 1 } else { m };
                let prow = &mut probs[i * m..(i + 1) * m];
                for j in 0..valid {
                    let krow = &kd[j * d + off..j * d + off + dh];
                    let mut acc = F::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    prow[j] = acc * scale;
                }
                softmax_row_prefix(prow, valid);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate().take(valid) {
                    let vrow = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
            attn.push(Tensor::matrix(n, m, probs)?);
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(value, Op::MultiHeadAttention { q, k, v, heads, attn }))
    }

    /// Mean cross-entropy of each logit row against its integer target;
    /// returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let t = self.value(logits);
        let (n, m) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= m) {
            return Err(NnError::ShapeMismatch(format!(
                "target class {bad} out of range for {m} columns"
            )));
        }
        let mut probs = t.clone();
        let mut loss = F::zero();
        for (i, &target) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
            // -log p[target], computed as logsumexp - logit for stability.
            loss += sum.ln() + max - self.value(logits).row(i)[target];
        }
        loss = loss / fl::<F>(n as f64);
        Ok(self.push(
            Tensor::scalar_value(loss),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Runs the backward pass from a scalar root. Returns one gradient slot
    /// per node id (`None` for nodes the root does not depend on).
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor<F>>> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar_value(F::one()));

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            self.accumulate_parents(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        grads
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], var: Var, delta: Tensor<F>) {
        match &mut grads[var.0] {
            Some(g) => add_assign(g.data_mut(), delta.data()),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, i: usize, grad: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA' = dC · B'ᵀ, dB' = A'ᵀ · dC, undoing the flags afterwards.
                let da_p = gemm(grad, bv, false, !tb).expect("backward shapes");
                let db_p = gemm(av, grad, !ta, false).expect("backward shapes");
                let da = if *ta { da_p.transpose() } else { da_p };
                let db = if *tb { db_p.transpose() } else { db_p };
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.clone());
            }
            Op::AddBias { a, bias } => {
                self.add_grad(grads, *a, grad.clone());
                let cols = grad.cols();
                let mut db = vec![F::zero(); cols];
                for r in 0..grad.len() / cols {
                    add_assign(&mut db, &grad.data()[r * cols..(r + 1) * cols]);
                }
                let shape = self.value(*bias).shape().to_vec();
                self.add_grad(grads, *bias, Tensor::new(shape, db).expect("bias shape"));
            }
            Op::AddConst { a } => self.add_grad(grads, *a, grad.clone()),
            Op::Scale { a, c } => self.add_grad(grads, *a, grad.map(|g| g * *c)),
            Op::MulConst { a, mask } => {
                let mut dx = grad.clone();
                for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                    *g = *g * *m;
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Relu { a } => {
                let mut dx = grad.clone();
                for (g, &x) in dx.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= F::zero() {
                        *g = F::zero();
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[i].value;
                let mut dx = grad.clone();
                let cols = y.cols();
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let drow = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    let dot: F = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in drow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let x = self.value(*a);
                let gm = self.value(*gamma).data();
                let d = x.cols();
                let n_rows = x.len() / d;
                let inv_d = F::one() / fl::<F>(d as f64);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..n_rows {
                    let xrow = &x.data()[r * d..(r + 1) * d];
                    let grow = &grad.data()[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(xrow, *eps);
                    // dxhat, plus affine parameter gradients along the way.
                    let mut dxhat = vec![F::zero(); d];
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gm[j];
                        dxhat[j] = dh;
                        sum_dxhat += dh;
                        sum_dxhat_xhat += dh * xhat;
                    }
                    let dxrow = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        dxrow[j] =
                            inv_std * (dxhat[j] - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                self.add_grad(grads, *a, dx);
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.add_grad(grads, *gamma, Tensor::new(gshape, dgamma).expect("gamma shape"));
                self.add_grad(grads, *beta, Tensor::new(bshape, dbeta).expect("beta shape"));
            }
            Op::L2NormRows { a, eps } => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let cols = x.cols();
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for r in 0..x.len() / cols {
                    let xrow = &x.data()[r * cols..(r + 1) * cols];
                    let yrow = &y.data()[r * cols..(r + 1) * cols];
                    let grow = &grad.data()[r * cols..(r + 1) * cols];
                    let norm = (xrow.iter().map(|&v| v * v).sum::<F>() + *eps).sqrt();
                    let dot: F = grow.iter().zip(yrow).map(|(&g, &u)| g * u).sum();
                    let dxrow = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dxrow[j] = (grow[j] - yrow[j] * dot) / norm;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::EmbeddingMean { table, ids } => {
                let tab = self.value(*table);
                let d = tab.cols();
                let mut dt = Tensor::zeros(tab.shape().to_vec());
                for (r, row_ids) in ids.iter().enumerate() {
                    let inv = F::one() / fl::<F>(row_ids.len() as f64);
                    let grow = &grad.data()[r * d..(r + 1) * d];
                    for &id in row_ids {
                        let drow = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (dv, &g) in drow.iter_mut().zip(grow) {
                            *dv += g * inv;
                        }
                    }
                }
                self.add_grad(grads, *table, dt);
            }
            Op::ConcatRows { parts } => {
                let cols = grad.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = grad.data()[start * cols..(start + rows) * cols].to_vec();
                    let delta = Tensor::matrix(rows, cols, slice).expect("concat slice");
                    self.add_grad(grads, p, delta);
                    start += rows;
                }
            }
            Op::SliceRows { a, start } => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut dx = Tensor::zeros(src.shape().to_vec());
                let offset = start * cols;
                add_assign(&mut dx.data_mut()[offset..offset + grad.len()], grad.data());
                self.add_grad(grads, *a, dx);
            }
            Op::GatherRows { a, rows } => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut dx = Tensor::zeros(src.shape().to_vec());
                for (out_row, &src_row) in rows.iter().enumerate() {
                    let grow = &grad.data()[out_row * cols..(out_row + 1) * cols];
                    add_assign(&mut dx.data_mut()[src_row * cols..(src_row + 1) * cols], grow);
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Transpose { a } => {
                self.add_grad(grads, *a, grad.transpose());
            }
            Op::MultiHeadAttention { q, k, v, heads, attn } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let dh = d / heads;
                let scale = F::one() / fl::<F>(dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.shape().to_vec());
                let mut dk = Tensor::zeros(kv.shape().to_vec());
                let mut dv = Tensor::zeros(vv.shape().to_vec());
                for (h, probs) in attn.iter().enumerate() {
                    let off = h * dh;
                    // dS = A ∘ (dOh·Vhᵀ - rowdot), dVh = Aᵀ·dOh, then the two
                    // projections back to Q and K. Masked entries of A are
                    // exactly zero, which zeroes their dS as well.
                    for i_row in 0..n {
                        let grow = &grad.data()[i_row * d + off..i_row * d + off + dh];
                        let arow = probs.row(i_row);
                        // row of dA = dOh · Vhᵀ
                        let mut da = vec![F::zero(); m];
                        for j in 0..m {
                            if arow[j] == F::zero() {
                                continue;
                            }
                            let vrow = &vv.data()[j * d + off..j * d + off + dh];
                            let mut acc = F::zero();
                            for (&g, &vvj) in grow.iter().zip(vrow) {
                                acc += g * vvj;
                            }
                            da[j] = acc;
                        }
                        let dot: F = da.iter().zip(arow).map(|(&x, &p)| x * p).sum();
                        // dS row (scaled); accumulate into dQ, dK, dV.
                        let qrow = &qv.data()[i_row * d + off..i_row * d + off + dh];
                        for j in 0..m {
                            let p = arow[j];
                            if p == F::zero() {
                                continue;
                            }
                            let ds = p * (da[j] - dot) * scale;
                            let krow = &kv.data()[j * d + off..j * d + off + dh];
                            let dqrow = &mut dq.data_mut()[i_row * d + off..i_row * d + off + dh];
                            for (dqv_, &kj) in dqrow.iter_mut().zip(krow) {
                                *dqv_ += ds * kj;
                            }
                            let dkrow = &mut dk.data_mut()[j * d + off..j * d + off + dh];
                            for (dkv_, &qj) in dkrow.iter_mut().zip(qrow) {
                                *dkv_ += ds * qj;
                            }
                            let dvrow = &mut dv.data_mut()[j * d + off..j * d + off + dh];
                            for (dvv_, &g) in dvrow.iter_mut().zip(grow) {
                                *dvv_ += p * g;
                            }
                        }
                    }
                }
                self.add_grad(grads, *q, dq);
                self.add_grad(grads, *k, dk);
                self.add_grad(grads, *v, dv);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let g = grad.scalar();
                let (n, m) = (probs.rows(), probs.cols());
                let inv_n = F::one() / fl::<F>(n as f64);
                let mut dl = probs.clone();
                for (r, &target) in targets.iter().enumerate() {
                    let row = &mut dl.data_mut()[r * m..(r + 1) * m];
                    row[target] = row[target] - F::one();
                    for v in row.iter_mut() {
                        *v = *v * inv_n * g;
                    }
                }
                self.add_grad(grads, *logits, dl);
            }
        }
    }
}
