use super::{matmul, matmul_at, matmul_bt, Matrix};
use crate::error::{Error, Result};
use crate::topology::ConnectivityMask;

/// `y = x · (W ⊙ mask) + bias`, bias broadcast over rows.
pub fn masked_linear_forward(
    x: &Matrix,
    w: &Matrix,
    mask: &ConnectivityMask,
    bias: &[f32],
) -> Result<Matrix> {
    check_layer_shapes("masked_linear_forward", x, w, mask, bias)?;
    let wm = mask.apply_copy(w);
    let mut y = matmul(x, &wm)?;
    add_bias_rows(&mut y, bias);
    Ok(y)
}

/// Gradients of a masked linear layer.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_bias: Vec<f32>,
}

/// Backward pass of `masked_linear_forward`.
///
/// `grad_w = (xᵀ · upstream) ⊙ mask`, so inactive positions come out exactly
/// zero; `grad_x = upstream · (W ⊙ mask)ᵀ`; `grad_bias` is the column sum of
/// `upstream`.
pub fn masked_linear_backward(
    x: &Matrix,
    w: &Matrix,
    mask: &ConnectivityMask,
    upstream: &Matrix,
) -> Result<LinearGrads> {
    check_layer_shapes("masked_linear_backward", x, w, mask, &vec![0.0; w.cols()])?;
    if upstream.rows() != x.rows() || upstream.cols() != w.cols() {
        return Err(Error::shape(
            "masked_linear_backward",
            format!("upstream {}x{}", x.rows(), w.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let mut grad_w = matmul_at(x, upstream)?;
    mask.zero_inactive(&mut grad_w);
    let wm = mask.apply_copy(w);
    let grad_x = matmul_bt(upstream, &wm)?;
    let grad_bias = column_sums(upstream);
    Ok(LinearGrads {
        grad_x,
        grad_w,
        grad_bias,
    })
}

fn check_layer_shapes(
    op: &'static str,
    x: &Matrix,
    w: &Matrix,
    mask: &ConnectivityMask,
    bias: &[f32],
) -> Result<()> {
    if x.cols() != w.rows() || mask.rows() != w.rows() || mask.cols() != w.cols() || bias.len() != w.cols() {
        return Err(Error::shape(
            op,
            format!(
                "x(B,{in_dim}) w({in_dim},{out_dim}) mask({in_dim},{out_dim}) bias({out_dim})",
                in_dim = w.rows(),
                out_dim = w.cols()
            ),
            format!(
                "x(_,{}) mask({},{}) bias({})",
                x.cols(),
                mask.rows(),
                mask.cols(),
                bias.len()
            ),
        ));
    }
    Ok(())
}

pub(crate) fn add_bias_rows(y: &mut Matrix, bias: &[f32]) {
    let cols = y.cols();
    for row in y.as_mut_slice().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut sums = vec![0.0f32; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

/// `max(0, x)` elementwise.
pub fn relu_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// ReLU gradient; the derivative at exactly 0 is taken as 0.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if !x.same_shape(upstream) {
        return Err(Error::shape(
            "relu_backward",
            format!("{}x{}", x.rows(), x.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let mut g = upstream.clone();
    for (gv, xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Softmax cross-entropy over a batch of logits.
#[derive(Debug, Clone)]
pub struct SoftmaxCe {
    /// Mean negative log-likelihood over the batch.
    pub loss: f32,
    /// `(softmax − one_hot) / B`.
    pub grad_logits: Matrix,
    /// Number of rows whose argmax equals the label.
    pub correct: usize,
}

/// Numerically stabilized softmax + mean cross-entropy.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<SoftmaxCe> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{b} labels"),
            format!("{}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {c} classes"
        )));
    }

    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let inv_b = 1.0 / b as f64;
    let mut exps = vec![0.0f64; c];

    for r in 0..b {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for (e, &lv) in exps.iter_mut().zip(row) {
            *e = (lv as f64 - max).exp();
            sum += *e;
        }
        let label = labels[r];
        // log-sum-exp form: nll = ln(sum) - (logit_label - max)
        loss += sum.ln() - (row[label] as f64 - max);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == label {
            correct += 1;
        }
        let g = grad.row_mut(r);
        let inv_sum = 1.0 / sum;
        for (gv, &e) in g.iter_mut().zip(&exps) {
            *gv = (e * inv_sum * inv_b) as f32;
        }
        g[label] -= inv_b as f32;
    }

    Ok(SoftmaxCe {
        loss: (loss / b as f64) as f32,
        grad_logits: grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology;
    use rand::Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn relu_basics() {
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.0]);

        let up = Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        let g = relu_backward(&x, &up).unwrap();
        // derivative at 0 is 0 by convention
        assert_eq!(g.as_slice(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Matrix::zeros(4, 10);
        let labels = vec![3, 1, 0, 9];
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((out.loss - 10.0f32.ln()).abs() < 1e-6, "loss {}", out.loss);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut logits = Matrix::zeros(1, 5);
        logits.set(0, 2, 50.0);
        let out = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(out.loss < 1e-6);
        assert_eq!(out.correct, 1);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Matrix::zeros(2, 3);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    }

    /// Independent f64 evaluation of the mean cross-entropy, used as the
    /// finite-difference oracle. f32 loss values cannot resolve derivatives
    /// at the 1e-3 relative level.
    fn ce_loss_f64(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let b = logits.len();
        let mut total = 0.0;
        for (row, &label) in logits.iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            total += sum.ln() - (row[label] - max);
        }
        total / b as f64
    }

    fn to_f64_rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
            .collect()
    }

    fn fd_check(analytic: f32, numeric: f64, what: &str) {
        let numeric = numeric as f32;
        let denom = analytic.abs().max(numeric.abs()).max(1e-5);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-3,
            "{what}: analytic {analytic} numeric {numeric}"
        );
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = crate::rng::seeded(11);
        let logits = random_matrix(&mut rng, 3, 4);
        let labels = vec![1, 3, 0];
        let out = softmax_cross_entropy(&logits, &labels).unwrap();

        let eps = 1e-3f64;
        let base = to_f64_rows(&logits);
        for r in 0..3 {
            for c in 0..4 {
                let mut plus = base.clone();
                plus[r][c] += eps;
                let mut minus = base.clone();
                minus[r][c] -= eps;
                let numeric =
                    (ce_loss_f64(&plus, &labels) - ce_loss_f64(&minus, &labels)) / (2.0 * eps);
                fd_check(out.grad_logits.get(r, c), numeric, &format!("({r},{c})"));
            }
        }
    }

    #[test]
    fn all_ones_mask_equals_dense_forward() {
        let mut rng = crate::rng::seeded(12);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 6);
        let bias: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = topology::ConnectivityMask::dense(4, 6);

        let masked = masked_linear_forward(&x, &w, &mask, &bias).unwrap();
        let mut dense = matmul(&x, &w).unwrap();
        add_bias_rows(&mut dense, &bias);
        assert_eq!(masked, dense);
    }

    #[test]
    fn all_zeros_mask_outputs_bias() {
        let mut rng = crate::rng::seeded(13);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 6);
        let bias: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let mask = topology::build_er_mask(4, 6, 0.0, 7).unwrap();

        let y = masked_linear_forward(&x, &w, &mask, &bias).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), bias.as_slice());
        }
    }

    #[test]
    fn masked_forward_equals_dense_on_pre_zeroed_weights() {
        let mut rng = crate::rng::seeded(14);
        let x = random_matrix(&mut rng, 5, 4);
        let w = random_matrix(&mut rng, 4, 6);
        let bias = vec![0.25f32; 6];
        let mask = topology::build_er_mask(4, 6, 0.5, 3).unwrap();

        let zeroed = mask.apply_copy(&w);
        let masked = masked_linear_forward(&x, &w, &mask, &bias).unwrap();
        let mut dense = matmul(&x, &zeroed).unwrap();
        add_bias_rows(&mut dense, &bias);
        assert_eq!(masked, dense);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = crate::rng::seeded(15);
        let x = random_matrix(&mut rng, 3, 5);
        let w = random_matrix(&mut rng, 5, 4);
        let mask = topology::build_er_mask(5, 4, 0.6, 5).unwrap();
        let up = Matrix::zeros(3, 4);

        let g = masked_linear_backward(&x, &w, &mask, &up).unwrap();
        assert!(g.grad_x.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.grad_w.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_positions_of_grad_w_are_exactly_zero() {
        let mut rng = crate::rng::seeded(16);
        let x = random_matrix(&mut rng, 4, 5);
        let w = random_matrix(&mut rng, 5, 6);
        let mask = topology::build_er_mask(5, 6, 0.4, 9).unwrap();
        let up = random_matrix(&mut rng, 4, 6);

        let g = masked_linear_backward(&x, &w, &mask, &up).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                if !mask.get(r, c) {
                    assert_eq!(g.grad_w.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_linear_grads_match_finite_differences() {
        let mut rng = crate::rng::seeded(17);
        let x = random_matrix(&mut rng, 3, 5);
        let w = random_matrix(&mut rng, 5, 4);
        let bias: Vec<f32> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mask = topology::build_er_mask(5, 4, 0.7, 21).unwrap();
        let labels = vec![0, 2, 1];

        // f64 oracle for loss(w, bias, x) through the masked layer.
        let loss_f64 = |w: &[Vec<f64>], bias: &[f64], x: &[Vec<f64>]| -> f64 {
            let logits: Vec<Vec<f64>> = x
                .iter()
                .map(|xr| {
                    (0..4)
                        .map(|j| {
                            let mut s = bias[j];
                            for i in 0..5 {
                                if mask.get(i, j) {
                                    s += xr[i] * w[i][j];
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect();
            ce_loss_f64(&logits, &labels)
        };

        let y = masked_linear_forward(&x, &w, &mask, &bias).unwrap();
        let ce = softmax_cross_entropy(&y, &labels).unwrap();
        let grads = masked_linear_backward(&x, &w, &mask, &ce.grad_logits).unwrap();

        let eps = 1e-3f64;
        let w64 = to_f64_rows(&w);
        let x64 = to_f64_rows(&x);
        let b64: Vec<f64> = bias.iter().map(|&v| v as f64).collect();

        for r in 0..5 {
            for c in 0..4 {
                if !mask.get(r, c) {
                    assert_eq!(grads.grad_w.get(r, c), 0.0);
                    continue;
                }
                let mut wp = w64.clone();
                wp[r][c] += eps;
                let mut wm = w64.clone();
                wm[r][c] -= eps;
                let numeric =
                    (loss_f64(&wp, &b64, &x64) - loss_f64(&wm, &b64, &x64)) / (2.0 * eps);
                fd_check(grads.grad_w.get(r, c), numeric, &format!("w[{r},{c}]"));
            }
        }

        for c in 0..4 {
            let mut bp = b64.clone();
            bp[c] += eps;
            let mut bm = b64.clone();
            bm[c] -= eps;
            let numeric = (loss_f64(&w64, &bp, &x64) - loss_f64(&w64, &bm, &x64)) / (2.0 * eps);
            fd_check(grads.grad_bias[c], numeric, &format!("bias[{c}]"));
        }

        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x64.clone();
                xp[r][c] += eps;
                let mut xm = x64.clone();
                xm[r][c] -= eps;
                let numeric =
                    (loss_f64(&w64, &b64, &xp) - loss_f64(&w64, &b64, &xm)) / (2.0 * eps);
                fd_check(grads.grad_x.get(r, c), numeric, &format!("x[{r},{c}]"));
            }
        }
    }
}
