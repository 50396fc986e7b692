//! A minimal reverse-mode differentiation arena covering exactly the
//! operations the fine-tuning loss needs: row normalization, `A·Bᵀ`
//! products, angular/cosine margins, sub-center pooling, top-K gather,
//! row mean/std, scalar affine gates, sigmoid, batch normalization, the
//! calibration loss, and softmax cross-entropy.
//!
//! The tape is define-by-run: each builder method computes the value
//! immediately and records the operation. Graph shape (top-K membership,
//! pooling selections) is therefore frozen at forward time and reused by
//! the backward pass, which walks the records in exact reverse order.
//! Gradients flow only to nodes marked as requiring gradients, so constant
//! subgraphs cost nothing extra.
//!
//! Tapes are rebuilt every mini-batch and never shared across threads;
//! internal primitives may partition rows across workers because every
//! output element is reduced in a fixed order.

use crate::error::{Error, Result};
use crate::scoring::{self, Select, STD_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Row-wise L2 normalization; `norms` are the forward row norms.
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    /// `A · Bᵀ` with `a: (m, d)`, `b: (n, d)`, output `(m, n)`.
    MatMulNt { a: NodeId, b: NodeId },
    /// Additive angular margin at the listed `(row, col)` positions:
    /// `cos θ → cos(θ + m)`; elsewhere identity.
    AngleMargin {
        x: NodeId,
        positions: Vec<(usize, usize)>,
        margin: f64,
    },
    /// Cosine-space margin: `c → c − m` at the penalized positions,
    /// identity elsewhere. The derivative is 1 everywhere, so the backward
    /// pass needs no position list.
    CosineMargin { x: NodeId },
    /// Pool every `group` consecutive columns to one; `chosen` records the
    /// winning flat source index per output element.
    PoolCols { x: NodeId, chosen: Vec<usize> },
    /// Per-row top-k gather; `indices[r]` are the selected source columns
    /// in descending-score order.
    TopKRows { x: NodeId, indices: Vec<Vec<usize>> },
    /// Mean over each row: `(m, k) → (m, 1)`.
    RowMean { x: NodeId },
    /// Population standard deviation over each row; stores forward means
    /// and stds for the backward pass.
    RowStd {
        x: NodeId,
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    /// Elementwise `w·x + b` with scalar nodes `w`, `b`.
    ScaleShift { x: NodeId, w: NodeId, b: NodeId },
    /// Elementwise logistic function; output value reused in backward.
    Sigmoid { x: NodeId },
    /// `N_ij = (R_ij − a_i)/(2·max(b_i, floor)) + (R_ij − c_j)/(2·max(d_j, floor))`
    /// with a constant raw matrix `R (m, n)`, per-row shift/scale `a, b`
    /// and per-column shift/scale `c, d`.
    PairNormalize {
        raw: Vec<f64>,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
    },
    /// Whole-tensor batch normalization with learnable scalar gamma/beta;
    /// stores the normalized values and batch variance.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    /// Calibration loss over a score tensor with a target mask.
    /// `corrected_sign` selects the conventional target term
    /// `softplus(−s_tar)`; when false the literal (degenerate) form
    /// `softplus(+s_tar)` is used.
    CllrLoss {
        x: NodeId,
        target_mask: Vec<bool>,
        n_tar: usize,
        n_non: usize,
        corrected_sign: bool,
    },
    /// Mean over rows of softmax cross-entropy against one class per row;
    /// stores the row-wise softmax for backward.
    SoftmaxXentMean {
        x: NodeId,
        classes: Vec<usize>,
        softmax: Vec<f64>,
    },
    /// Elementwise constant scale `c·x`.
    Scale { x: NodeId, c: f64 },
    /// `alpha·a + beta·b` for scalar nodes.
    AddScaled {
        a: NodeId,
        b: NodeId,
        alpha: f64,
        beta: f64,
    },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, if the node required one.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a parameter node; errors if the node carried no
    /// gradient (i.e. was not marked as a parameter).
    pub fn wrt(&self, id: NodeId) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| Error::InvalidConfig("node carries no gradient".into()))
    }
}

/// Define-by-run recording of one loss computation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, rg: bool, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad: rg,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Selected source columns of a top-K node, row by row.
    pub fn topk_indices(&self, id: NodeId) -> Option<&[Vec<usize>]> {
        match &self.nodes[id.0].op {
            Op::TopKRows { indices, .. } => Some(indices),
            _ => None,
        }
    }

    fn check_shape(&self, id: NodeId, rows: usize, cols: usize) -> Result<()> {
        let (r, c) = self.shape(id);
        if (r, c) != (rows, cols) {
            return Err(Error::InvalidConfig(format!(
                "tape shape mismatch: expected {rows}x{cols}, got {r}x{c}"
            )));
        }
        Ok(())
    }

    /// A trainable parameter tensor.
    pub fn param(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> NodeId {
        self.push(value, rows, cols, true, Op::Leaf)
    }

    /// A constant tensor: gradients never flow into it.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> NodeId {
        self.push(value, rows, cols, false, Op::Leaf)
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let mut value = self.nodes[x.0].value.clone();
        let mut norms = Vec::with_capacity(rows);
        for row in value.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(value, rows, cols, rg, Op::NormalizeRows { x, norms }))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, da) = self.shape(a);
        let (n, db) = self.shape(b);
        if da != db {
            return Err(Error::DimMismatch {
                expected: da,
                got: db,
            });
        }
        let value = scoring::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, n, da);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, m, n, rg, Op::MatMulNt { a, b }))
    }

    /// Apply an additive angular margin `cos θ → cos(θ + m)` at the given
    /// `(row, col)` positions of a cosine-score tensor.
    pub fn angle_margin(
        &mut self,
        x: NodeId,
        positions: &[(usize, usize)],
        margin: f64,
    ) -> Result<NodeId> {
        if margin < 0.0 {
            return Err(Error::NegativeMargin(margin));
        }
        let (rows, cols) = self.shape(x);
        let mut value = self.nodes[x.0].value.clone();
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        for &(r, c) in positions {
            if r >= rows || c >= cols {
                return Err(Error::InvalidConfig(format!(
                    "margin position ({r},{c}) outside {rows}x{cols} tensor"
                )));
            }
            let cos_t = value[r * cols + c];
            let sin_t = (1.0 - cos_t * cos_t).max(1e-12).sqrt();
            value[r * cols + c] = cos_t * cos_m - sin_t * sin_m;
        }
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rows,
            cols,
            rg,
            Op::AngleMargin {
                x,
                positions: positions.to_vec(),
                margin,
            },
        ))
    }

    /// Apply a cosine-space margin `c → c − m` at the given positions.
    pub fn cosine_margin(
        &mut self,
        x: NodeId,
        positions: &[(usize, usize)],
        margin: f64,
    ) -> Result<NodeId> {
        if margin < 0.0 {
            return Err(Error::NegativeMargin(margin));
        }
        let (rows, cols) = self.shape(x);
        let mut value = self.nodes[x.0].value.clone();
        for &(r, c) in positions {
            if r >= rows || c >= cols {
                return Err(Error::InvalidConfig(format!(
                    "margin position ({r},{c}) outside {rows}x{cols} tensor"
                )));
            }
            value[r * cols + c] -= margin;
        }
        let rg = self.rg(x);
        Ok(self.push(value, rows, cols, rg, Op::CosineMargin { x }))
    }

    /// Pool every `group` consecutive columns into one with min or max;
    /// ties resolve to the lowest sub-column and the selection is frozen
    /// for the backward pass.
    pub fn pool_cols(&mut self, x: NodeId, group: usize, select: Select) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if group == 0 || cols % group != 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot pool {cols} columns in groups of {group}"
            )));
        }
        let out_cols = cols / group;
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows * out_cols);
        let mut chosen = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            for c in 0..out_cols {
                let base = r * cols + c * group;
                let mut best_j = 0usize;
                let mut best = src[base];
                for j in 1..group {
                    let v = src[base + j];
                    let better = match select {
                        Select::Min => v < best,
                        Select::Max => v > best,
                    };
                    if better {
                        best = v;
                        best_j = j;
                    }
                }
                value.push(best);
                chosen.push(base + best_j);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, rows, out_cols, rg, Op::PoolCols { x, chosen }))
    }

    /// Per-row top-k gather (descending value, lowest-index tie-break).
    pub fn top_k_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if k == 0 || k > cols {
            return Err(Error::InvalidCohortSize { k, c: cols });
        }
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows * k);
        let mut indices = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let idx = scoring::top_k_indices(row, k)?;
            value.extend(idx.iter().map(|&i| row[i]));
            indices.push(idx);
        }
        let rg = self.rg(x);
        Ok(self.push(value, rows, k, rg, Op::TopKRows { x, indices }))
    }

    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let src = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(value, rows, 1, rg, Op::RowMean { x }))
    }

    pub fn row_std(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let src = &self.nodes[x.0].value;
        let mut means = Vec::with_capacity(rows);
        let mut stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let (m, s) = scoring::mean_std(&src[r * cols..(r + 1) * cols]);
            means.push(m);
            stds.push(s);
        }
        let rg = self.rg(x);
        Ok(self.push(stds.clone(), rows, 1, rg, Op::RowStd { x, means, stds }))
    }

    /// Elementwise `w·x + b` with scalar gate nodes.
    pub fn scale_shift(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_shape(w, 1, 1)?;
        self.check_shape(b, 1, 1)?;
        let (rows, cols) = self.shape(x);
        let wv = self.nodes[w.0].value[0];
        let bv = self.nodes[b.0].value[0];
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| wv * v + bv).collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, rows, cols, rg, Op::ScaleShift { x, w, b }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(value, rows, cols, rg, Op::Sigmoid { x }))
    }

    /// Symmetric two-sided normalization of a constant raw score matrix by
    /// per-row statistics `(a, b)` and per-column statistics `(c, d)`:
    /// `N_ij = (R_ij − a_i)/(2·max(b_i, floor)) + (R_ij − c_j)/(2·max(d_j, floor))`.
    pub fn pair_normalize(
        &mut self,
        raw: &[f64],
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
    ) -> Result<NodeId> {
        let (m, _) = self.shape(a);
        let (n, _) = self.shape(c);
        self.check_shape(a, m, 1)?;
        self.check_shape(b, m, 1)?;
        self.check_shape(c, n, 1)?;
        self.check_shape(d, n, 1)?;
        if raw.len() != m * n {
            return Err(Error::InvalidConfig(format!(
                "raw score matrix has {} entries, expected {}x{}",
                raw.len(),
                m,
                n
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let cv = &self.nodes[c.0].value;
        let dv = &self.nodes[d.0].value;
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            let (ai, bi) = (av[i], bv[i].max(STD_FLOOR));
            for j in 0..n {
                let (cj, dj) = (cv[j], dv[j].max(STD_FLOOR));
                value.push((raw[i * n + j] - ai) / (2.0 * bi) + (raw[i * n + j] - cj) / (2.0 * dj));
            }
        }
        let rg = self.rg(a) || self.rg(b) || self.rg(c) || self.rg(d);
        Ok(self.push(
            value,
            m,
            n,
            rg,
            Op::PairNormalize {
                raw: raw.to_vec(),
                a,
                b,
                c,
                d,
            },
        ))
    }

    /// Whole-tensor batch normalization with learnable scalar gamma/beta.
    /// Uses the batch's own statistics (training mode). Returns the output
    /// node; batch mean/variance are available via [`Tape::bn_stats`].
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_shape(gamma, 1, 1)?;
        self.check_shape(beta, 1, 1)?;
        let (rows, cols) = self.shape(x);
        let src = &self.nodes[x.0].value;
        let n = src.len() as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv_std).collect();
        let g = self.nodes[gamma.0].value[0];
        let b = self.nodes[beta.0].value[0];
        let value: Vec<f64> = xhat.iter().map(|v| g * v + b).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rows,
            cols,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch mean and (biased) variance recorded by a batch-norm node.
    pub fn bn_stats(&self, id: NodeId) -> Option<(f64, f64)> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { x, eps, inv_std, .. } => {
                let src = &self.nodes[x.0].value;
                let mean = src.iter().sum::<f64>() / src.len() as f64;
                let var = 1.0 / (inv_std * inv_std) - eps;
                Some((mean, var))
            }
            _ => None,
        }
    }

    /// Calibration loss `(1/(2 ln 2))·(Σ softplus(∓s_tar)/N_tar + Σ softplus(s_non)/N_non)`.
    /// `corrected_sign = true` gives the conventional `−s_tar` target term.
    pub fn cllr_loss(&mut self, x: NodeId, target_mask: &[bool], corrected_sign: bool) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if target_mask.len() != rows * cols {
            return Err(Error::Misaligned(format!(
                "mask has {} entries for a {}x{} score tensor",
                target_mask.len(),
                rows,
                cols
            )));
        }
        let n_tar = target_mask.iter().filter(|&&t| t).count();
        let n_non = target_mask.len() - n_tar;
        if n_tar == 0 || n_non == 0 {
            return Err(Error::SingleClass);
        }
        let src = &self.nodes[x.0].value;
        let mut c_tar = 0.0;
        let mut c_non = 0.0;
        for (v, &t) in src.iter().zip(target_mask) {
            if t {
                let arg = if corrected_sign { -v } else { *v };
                c_tar += softplus(arg);
            } else {
                c_non += softplus(*v);
            }
        }
        let value = (c_tar / n_tar as f64 + c_non / n_non as f64) / (2.0 * std::f64::consts::LN_2);
        let rg = self.rg(x);
        Ok(self.push(
            vec![value],
            1,
            1,
            rg,
            Op::CllrLoss {
                x,
                target_mask: target_mask.to_vec(),
                n_tar,
                n_non,
                corrected_sign,
            },
        ))
    }

    /// Mean over rows of softmax cross-entropy with one class label per row.
    pub fn softmax_xent_mean(&mut self, x: NodeId, classes: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if classes.len() != rows {
            return Err(Error::Misaligned(format!(
                "{} class labels for {} rows",
                classes.len(),
                rows
            )));
        }
        let src = &self.nodes[x.0].value;
        let mut softmax = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let y = classes[r];
            if y >= cols {
                return Err(Error::ClassOutOfRange { class: y, c: cols });
            }
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - mx).exp();
            }
            let lse = mx + denom.ln();
            total += lse - row[y];
            for (j, &v) in row.iter().enumerate() {
                softmax[r * cols + j] = (v - mx).exp() / denom;
            }
        }
        let value = total / rows as f64;
        let rg = self.rg(x);
        Ok(self.push(
            vec![value],
            1,
            1,
            rg,
            Op::SoftmaxXentMean {
                x,
                classes: classes.to_vec(),
                softmax,
            },
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| c * v).collect();
        let rg = self.rg(x);
        Ok(self.push(value, rows, cols, rg, Op::Scale { x, c }))
    }

    /// `alpha·a + beta·b` for scalar nodes (loss combination).
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64, beta: f64) -> Result<NodeId> {
        self.check_shape(a, 1, 1)?;
        self.check_shape(b, 1, 1)?;
        let value = alpha * self.nodes[a.0].value[0] + beta * self.nodes[b.0].value[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![value], 1, 1, rg, Op::AddScaled { a, b, alpha, beta }))
    }

    /// Reverse pass from a scalar loss node. Visits records in exact
    /// reverse order; gradients accumulate only into nodes that require
    /// them. The tape itself is not consumed, so several losses recorded
    /// on one tape can each be differentiated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::InvalidConfig(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.value.len()])
                } else {
                    None
                }
            })
            .collect();
        if grads[loss.0].is_none() {
            // The loss does not depend on any parameter: all-zero gradients.
            return Ok(Gradients { grads });
        }
        grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Scatter `g` (gradient at node `idx`) into the node's inputs.
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let cols = node.cols;
        match &node.op {
            Op::Leaf => {}
            Op::NormalizeRows { x, norms } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let y = &node.value;
                    for r in 0..node.rows {
                        let row_y = &y[r * cols..(r + 1) * cols];
                        let row_g = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                        let inv = 1.0 / norms[r];
                        for j in 0..cols {
                            gx[r * cols + j] += (row_g[j] - dot * row_y[j]) * inv;
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, d) = self.shape(*a);
                let (n, _) = self.shape(*b);
                if grads[a.0].is_some() {
                    let bval = &self.nodes[b.0].value;
                    let ga = grads[a.0].as_mut().unwrap();
                    // gA[i,:] += sum_j G[i,j] * B[j,:]
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..d {
                                ga[i * d + kk] += gij * bval[j * d + kk];
                            }
                        }
                    }
                }
                if grads[b.0].is_some() {
                    let aval = &self.nodes[a.0].value;
                    let gb = grads[b.0].as_mut().unwrap();
                    // gB[j,:] += sum_i G[i,j] * A[i,:]
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..d {
                                gb[j * d + kk] += gij * aval[i * d + kk];
                            }
                        }
                    }
                }
            }
            Op::AngleMargin {
                x,
                positions,
                margin,
            } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (gi, v) in gx.iter_mut().zip(g) {
                        *gi += v;
                    }
                    let (cos_m, sin_m) = (margin.cos(), margin.sin());
                    let src = &self.nodes[x.0].value;
                    for &(r, c) in positions {
                        let i = r * cols + c;
                        let cos_t = src[i];
                        let one_minus = 1.0 - cos_t * cos_t;
                        // d/dc [c·cos m − sqrt(max(1−c², ε))·sin m]
                        let d = if one_minus > 1e-12 {
                            cos_m + sin_m * cos_t / one_minus.sqrt()
                        } else {
                            cos_m // clamped: sqrt term is constant
                        };
                        gx[i] += g[i] * (d - 1.0); // replace the identity part
                    }
                }
            }
            Op::CosineMargin { x, .. } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (gi, v) in gx.iter_mut().zip(g) {
                        *gi += v;
                    }
                }
            }
            Op::PoolCols { x, chosen, .. } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (out, &src_idx) in chosen.iter().enumerate() {
                        gx[src_idx] += g[out];
                    }
                }
            }
            Op::TopKRows { x, indices } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let (_, src_cols) = self.shape(*x);
                    for (r, idx) in indices.iter().enumerate() {
                        for (kk, &src_col) in idx.iter().enumerate() {
                            gx[r * src_cols + src_col] += g[r * cols + kk];
                        }
                    }
                }
            }
            Op::RowMean { x } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let (rows, src_cols) = self.shape(*x);
                    let inv = 1.0 / src_cols as f64;
                    for r in 0..rows {
                        let gr = g[r] * inv;
                        for j in 0..src_cols {
                            gx[r * src_cols + j] += gr;
                        }
                    }
                }
            }
            Op::RowStd { x, means, stds } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let (rows, src_cols) = self.shape(*x);
                    let src = &self.nodes[x.0].value;
                    for r in 0..rows {
                        let denom = src_cols as f64 * stds[r].max(STD_FLOOR);
                        let gr = g[r] / denom;
                        for j in 0..src_cols {
                            gx[r * src_cols + j] += gr * (src[r * src_cols + j] - means[r]);
                        }
                    }
                }
            }
            Op::ScaleShift { x, w, b } => {
                let wv = self.nodes[w.0].value[0];
                let xval = &self.nodes[x.0].value;
                if let Some(gx) = grads[x.0].as_mut() {
                    for (gi, v) in gx.iter_mut().zip(g) {
                        *gi += wv * v;
                    }
                }
                if let Some(gw) = grads[w.0].as_mut() {
                    gw[0] += g.iter().zip(xval).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    gb[0] += g.iter().sum::<f64>();
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((gi, v), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *gi += v * y * (1.0 - y);
                    }
                }
            }
            Op::PairNormalize { raw, a, b, c, d } => {
                let (m, _) = self.shape(*a);
                let (n, _) = self.shape(*c);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let cv = &self.nodes[c.0].value;
                let dv = &self.nodes[d.0].value;
                for i in 0..m {
                    let bi = bv[i].max(STD_FLOOR);
                    let mut ga_acc = 0.0;
                    let mut gb_acc = 0.0;
                    for j in 0..n {
                        let gij = g[i * n + j];
                        ga_acc += gij * (-1.0 / (2.0 * bi));
                        gb_acc += gij * (-(raw[i * n + j] - av[i]) / (2.0 * bi * bi));
                    }
                    if let Some(ga) = grads[a.0].as_mut() {
                        ga[i] += ga_acc;
                    }
                    if let Some(gb) = grads[b.0].as_mut() {
                        gb[i] += gb_acc;
                    }
                }
                for j in 0..n {
                    let dj = dv[j].max(STD_FLOOR);
                    let mut gc_acc = 0.0;
                    let mut gd_acc = 0.0;
                    for i in 0..m {
                        let gij = g[i * n + j];
                        gc_acc += gij * (-1.0 / (2.0 * dj));
                        gd_acc += gij * (-(raw[i * n + j] - cv[j]) / (2.0 * dj * dj));
                    }
                    if let Some(gc) = grads[c.0].as_mut() {
                        gc[j] += gc_acc;
                    }
                    if let Some(gd) = grads[d.0].as_mut() {
                        gd[j] += gd_acc;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let gval = self.nodes[gamma.0].value[0];
                let n = xhat.len() as f64;
                if let Some(gg) = grads[gamma.0].as_mut() {
                    gg[0] += g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gb) = grads[beta.0].as_mut() {
                    gb[0] += g.iter().sum::<f64>();
                }
                if let Some(gx) = grads[x.0].as_mut() {
                    let sum_g: f64 = g.iter().sum();
                    let sum_gx: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    let coeff = gval * inv_std;
                    for (i, gi) in gx.iter_mut().enumerate() {
                        *gi += coeff * (g[i] - sum_g / n - xhat[i] * sum_gx / n);
                    }
                }
            }
            Op::CllrLoss {
                x,
                target_mask,
                n_tar,
                n_non,
                corrected_sign,
            } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let gscale = g[0] / (2.0 * std::f64::consts::LN_2);
                    let src = &self.nodes[x.0].value;
                    for (i, (&v, &t)) in src.iter().zip(target_mask).enumerate() {
                        let d = if t {
                            let base = if *corrected_sign {
                                -sigmoid(-v) // d softplus(−s)/ds
                            } else {
                                sigmoid(v)
                            };
                            base / *n_tar as f64
                        } else {
                            sigmoid(v) / *n_non as f64
                        };
                        gx[i] += gscale * d;
                    }
                }
            }
            Op::SoftmaxXentMean { x, classes, softmax } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let rows = classes.len();
                    let src_cols = gx.len() / rows;
                    let gr = g[0] / rows as f64;
                    for r in 0..rows {
                        for j in 0..src_cols {
                            let mut d = softmax[r * src_cols + j];
                            if j == classes[r] {
                                d -= 1.0;
                            }
                            gx[r * src_cols + j] += gr * d;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (gi, v) in gx.iter_mut().zip(g) {
                        *gi += c * v;
                    }
                }
            }
            Op::AddScaled { a, b, alpha, beta } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    ga[0] += alpha * g[0];
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    gb[0] += beta * g[0];
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
