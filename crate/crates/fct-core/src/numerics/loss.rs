//! Losses and their gradients: mean squared error, softmax cross-entropy,
//! KL distillation through a frozen linear head, InfoNCE, and row-wise L2
//! normalization with its backward pass.

use super::layers::AffineLayer;
use super::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Mean squared error over all elements.
///
/// Returns the loss and its gradient with respect to `pred`, so the
/// gradient is `2 (pred - target) / (rows * cols)`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "mse expects matching shapes, got {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let count = (pred.rows() * pred.cols()) as f64;
    if count == 0.0 {
        return Err(Error::DegenerateInput("mse over an empty matrix".into()));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Numerically stable softmax cross-entropy with integer class labels,
/// averaged over the batch. Returns the loss and the gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    let (n, classes) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::DegenerateInput("cross-entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, classes);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        loss += (log_sum - row[labels[r] as usize]) * inv_n;
        let g = grad.row_mut(r);
        for c in 0..classes {
            g[c] = ((row[c] - log_sum).exp()) * inv_n;
        }
        g[labels[r] as usize] -= inv_n;
    }
    Ok((loss, grad))
}

/// Cross entropy against per-row target distributions instead of hard
/// labels, averaged over the batch. The gradient with respect to the
/// logits is `(softmax - target) / batch`.
pub fn soft_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::Shape(format!(
            "logits {}x{} vs soft targets {}x{}",
            logits.rows(),
            logits.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::DegenerateInput("cross-entropy over an empty batch".into()));
    }
    let inv_n = 1.0 / logits.rows() as f64;
    let log_probs = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let lp = log_probs.row(r);
        let t = targets.row(r);
        let g = grad.row_mut(r);
        for c in 0..lp.len() {
            loss -= t[c] * lp[c] * inv_n;
            g[c] = (lp[c].exp() - t[c]) * inv_n;
        }
    }
    Ok((loss, grad))
}

fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        let o = out.row_mut(r);
        for c in 0..row.len() {
            o[c] = row[c] - log_sum;
        }
    }
    out
}

/// Distillation loss between two embeddings, measured after projecting both
/// through a shared frozen linear head and comparing the resulting class
/// distributions.
///
/// With `reversed = false` this is `KL(p || q)` where `p` comes from
/// `target_emb` and `q` from `pred_emb`; `reversed = true` swaps the roles
/// to `KL(q || p)`. Both are averaged over the batch. The returned gradient
/// is with respect to `pred_emb`; the head and the target receive none.
pub fn kl_distillation_loss(
    pred_emb: &Matrix,
    target_emb: &Matrix,
    head: &AffineLayer,
    reversed: bool,
) -> Result<(f64, Matrix)> {
    if pred_emb.rows() != target_emb.rows() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred_emb.rows(),
            target_emb.rows()
        )));
    }
    if pred_emb.rows() == 0 {
        return Err(Error::DegenerateInput("distillation over an empty batch".into()));
    }
    let logits_q = head.forward_infer(pred_emb)?;
    let logits_p = head.forward_infer(target_emb)?;
    let log_q = log_softmax_rows(&logits_q);
    let log_p = log_softmax_rows(&logits_p);
    let n = pred_emb.rows();
    let classes = logits_q.cols();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_logits = Matrix::zeros(n, classes);
    for r in 0..n {
        let lq = log_q.row(r);
        let lp = log_p.row(r);
        let g = grad_logits.row_mut(r);
        if reversed {
            // KL(q || p): d/dlogits_q = q * ((log q - log p) - row_loss).
            let mut row_loss = 0.0;
            for c in 0..classes {
                row_loss += lq[c].exp() * (lq[c] - lp[c]);
            }
            loss += row_loss * inv_n;
            for c in 0..classes {
                let q = lq[c].exp();
                g[c] = q * ((lq[c] - lp[c]) - row_loss) * inv_n;
            }
        } else {
            // KL(p || q): d/dlogits_q = q - p.
            for c in 0..classes {
                let p = lp[c].exp();
                loss += p * (lp[c] - lq[c]) * inv_n;
                g[c] = (lq[c].exp() - p) * inv_n;
            }
        }
    }
    let grad_pred = grad_logits.matmul_nt(head.weight())?;
    Ok((loss, grad_pred))
}

/// Normalizes each row to unit L2 norm. Returns the normalized matrix and
/// the original norms (needed by [`l2_normalize_backward`]).
pub fn l2_normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let norm = dot(x.row(r), x.row(r)).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "cannot normalize zero vector at row {r}"
            )));
        }
        for v in out.row_mut(r) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward pass of row-wise L2 normalization: given the normalized output
/// `y`, the input norms, and the output gradient, returns the input
/// gradient `(g - y (y . g)) / norm` per row.
pub fn l2_normalize_backward(y: &Matrix, norms: &[f64], grad: &Matrix) -> Result<Matrix> {
    if y.rows() != grad.rows() || y.cols() != grad.cols() || norms.len() != y.rows() {
        return Err(Error::Shape("normalization backward shape mismatch".into()));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = grad.row(r);
        let proj = dot(yr, gr);
        let o = out.row_mut(r);
        for c in 0..yr.len() {
            o[c] = (gr[c] - yr[c] * proj) / norms[r];
        }
    }
    Ok(out)
}

/// InfoNCE over a batch of two augmented views.
///
/// `embeddings` holds `2B` rows: row `i` and row `i + B` are the two views
/// of sample `i`. Rows are L2-normalized internally, similarities are
/// scaled by `1 / temperature`, self-similarity is excluded, and the loss
/// is averaged over all `2B` anchors. Returns the gradient with respect to
/// the raw (unnormalized) embeddings.
pub fn info_nce_loss(embeddings: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let total = embeddings.rows();
    if total < 4 || total % 2 != 0 {
        return Err(Error::DegenerateBatch(format!(
            "InfoNCE needs an even batch of at least 4 views, got {total}"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "InfoNCE temperature must be positive, got {temperature}"
        )));
    }
    let half = total / 2;
    let (z, norms) = l2_normalize_rows(embeddings)?;
    let sim = z.matmul_nt(&z)?;
    let inv_t = 1.0 / temperature;
    let inv_total = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut grad_sim = Matrix::zeros(total, total);
    for i in 0..total {
        let pos = if i < half { i + half } else { i - half };
        // Stable log-sum-exp over j != i of sim[i][j] / t.
        let row = sim.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                max = max.max(s * inv_t);
            }
        }
        let mut sum_exp = 0.0;
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                sum_exp += (s * inv_t - max).exp();
            }
        }
        let log_sum = max + sum_exp.ln();
        loss += (log_sum - row[pos] * inv_t) * inv_total;
        let g = grad_sim.row_mut(i);
        for j in 0..total {
            if j != i {
                g[j] = (row[j] * inv_t - log_sum).exp() * inv_total * inv_t;
            }
        }
        g[pos] -= inv_total * inv_t;
    }
    // sim = z z^T, so dL/dz = (G + G^T) z.
    let mut grad_sym = grad_sim.clone();
    for i in 0..total {
        for j in 0..total {
            let v = grad_sim.get(j, i);
            let cur = grad_sym.get(i, j);
            grad_sym.set(i, j, cur + v);
        }
    }
    let grad_z = grad_sym.matmul(&z)?;
    let grad = l2_normalize_backward(&z, &norms, &grad_z)?;
    Ok((loss, grad))
}
