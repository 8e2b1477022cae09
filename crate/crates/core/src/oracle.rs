//! Reference implementations used by the test suites.
//!
//! Everything in here is written as plainly as possible (explicit loops,
//! f64, no shared code with the optimized paths) so it can act as an
//! independent check on the real kernels, layers, and pipeline math.

/// C[m,n] = A[m,k] @ B[k,n] via the naive triple loop.
pub fn matmul_oracle(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Dilated same-length 1-D convolution, input `x` as [batch][len][c_in]
/// flattened, weights as [c_out][c_in][kernel] flattened. Symmetric zero
/// padding totaling (kernel-1)*dilation with the extra element on the right.
pub fn conv1d_oracle(
    x: &[f64],
    batch: usize,
    len: usize,
    c_in: usize,
    w: &[f64],
    c_out: usize,
    kernel: usize,
    dilation: usize,
    bias: &[f64],
) -> Vec<f64> {
    assert_eq!(x.len(), batch * len * c_in);
    assert_eq!(w.len(), c_out * c_in * kernel);
    assert_eq!(bias.len(), c_out);
    let pad_left = (kernel - 1) * dilation / 2;
    let mut y = vec![0.0; batch * len * c_out];
    for b in 0..batch {
        for t in 0..len {
            for o in 0..c_out {
                let mut s = bias[o];
                for c in 0..c_in {
                    for k in 0..kernel {
                        let src = t as isize + (k * dilation) as isize - pad_left as isize;
                        if src >= 0 && (src as usize) < len {
                            s += w[(o * c_in + c) * kernel + k]
                                * x[(b * len + src as usize) * c_in + c];
                        }
                    }
                }
                y[(b * len + t) * c_out + o] = s;
            }
        }
    }
    y
}

/// Softmax of one row by the direct exp/sum formula (no max subtraction).
pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Layer normalization of one vector with population variance.
pub fn layer_norm_oracle(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len();
    let mean: f64 = x.iter().sum::<f64>() / d as f64;
    let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + eps).sqrt();
    (0..d)
        .map(|i| (x[i] - mean) * rstd * gain[i] + bias[i])
        .collect()
}

/// Multi-head scaled-dot-product self-attention done entirely with loops.
///
/// `x` is [batch][w][d_model]; the four projections are [d_model][d_model]
/// plus bias, laid out input-major so y = x @ W + b. With `diag_mask` the
/// diagonal score is dropped before the softmax. Returns (output, attention)
/// with attention as [batch][heads][w][w].
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    x: &[f64],
    batch: usize,
    w: usize,
    d_model: usize,
    heads: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
    wo: &[f64],
    bo: &[f64],
    diag_mask: bool,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(d_model % heads, 0);
    let dk = d_model / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let project = |wmat: &[f64], bvec: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; batch * w * d_model];
        for b in 0..batch {
            for t in 0..w {
                for j in 0..d_model {
                    let mut s = bvec[j];
                    for i in 0..d_model {
                        s += x[(b * w + t) * d_model + i] * wmat[i * d_model + j];
                    }
                    out[(b * w + t) * d_model + j] = s;
                }
            }
        }
        out
    };

    let q = project(wq, bq);
    let k = project(wk, bk);
    let v = project(wv, bv);

    let mut attn = vec![0.0; batch * heads * w * w];
    let mut heads_out = vec![0.0; batch * w * d_model];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..w {
                let mut scores = vec![0.0; w];
                for j in 0..w {
                    let mut s = 0.0;
                    for l in 0..dk {
                        s += q[(b * w + i) * d_model + h * dk + l]
                            * k[(b * w + j) * d_model + h * dk + l];
                    }
                    scores[j] = s * scale;
                }
                if diag_mask {
                    scores[i] = f64::NEG_INFINITY;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..w {
                    attn[((b * heads + h) * w + i) * w + j] = exps[j] / denom;
                }
                for l in 0..dk {
                    let mut s = 0.0;
                    for j in 0..w {
                        s += attn[((b * heads + h) * w + i) * w + j]
                            * v[(b * w + j) * d_model + h * dk + l];
                    }
                    heads_out[(b * w + i) * d_model + h * dk + l] = s;
                }
            }
        }
    }

    let mut y = vec![0.0; batch * w * d_model];
    for b in 0..batch {
        for t in 0..w {
            for j in 0..d_model {
                let mut s = bo[j];
                for i in 0..d_model {
                    s += heads_out[(b * w + t) * d_model + i] * wo[i * d_model + j];
                }
                y[(b * w + t) * d_model + j] = s;
            }
        }
    }
    (y, attn)
}

/// Position-wise feed-forward applied one position at a time.
pub fn pffn_oracle(
    x: &[f64],
    rows: usize,
    d_model: usize,
    d_ff: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let gelu = |v: f64| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let mut y = vec![0.0; rows * d_model];
    for r in 0..rows {
        let xin = &x[r * d_model..(r + 1) * d_model];
        let mut hidden = vec![0.0; d_ff];
        for j in 0..d_ff {
            let mut s = b1[j];
            for i in 0..d_model {
                s += xin[i] * w1[i * d_ff + j];
            }
            hidden[j] = gelu(s);
        }
        for j in 0..d_model {
            let mut s = b2[j];
            for i in 0..d_ff {
                s += hidden[i] * w2[i * d_model + j];
            }
            y[r * d_model + j] = s;
        }
    }
    y
}

/// Empirical quantile with linear interpolation between order statistics:
/// h = alpha * (n - 1), interpolating between the floor and ceil entries of
/// the sorted sample.
pub fn quantile_oracle(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let h = alpha * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Per-class F1 scores computed from first principles; class 0 is treated as
/// the positive class for its own F1. Zero denominators contribute 0.
pub fn per_class_f1_oracle(y_true: &[u8], y_pred: &[u8]) -> (f64, f64) {
    assert_eq!(y_true.len(), y_pred.len());
    let f1_for = |class: u8| -> f64 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fnn = 0.0;
        for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
            if p == class && t == class {
                tp += 1.0;
            } else if p == class && t != class {
                fp += 1.0;
            } else if p != class && t == class {
                fnn += 1.0;
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    };
    (f1_for(0), f1_for(1))
}

pub fn macro_f1_oracle(y_true: &[u8], y_pred: &[u8]) -> f64 {
    let (f0, f1) = per_class_f1_oracle(y_true, y_pred);
    (f0 + f1) / 2.0
}

/// Central finite difference of a scalar function at `x`, one coordinate at
/// a time.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with a small absolute floor so near-zero
/// entries do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_oracle_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_oracle(2, 2, 2, &a, &b), b);
        assert_eq!(matmul_oracle(1, 2, 1, &[1.0, 2.0], &[3.0, 4.0]), vec![11.0]);
    }

    #[test]
    fn conv_oracle_center_one_kernel_is_identity() {
        // kernel [0,1,0] with any dilation leaves the input untouched
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        for dilation in [1, 2, 3] {
            let y = conv1d_oracle(&x, 1, 10, 1, &[0.0, 1.0, 0.0], 1, 3, dilation, &[0.0]);
            assert_eq!(y, x);
        }
    }

    #[test]
    fn quantile_oracle_pins_min_median_max() {
        let v = vec![0.1, 0.9, 0.2];
        assert_eq!(quantile_oracle(&v, 0.0), 0.1);
        assert_eq!(quantile_oracle(&v, 1.0), 0.9);
        assert_eq!(quantile_oracle(&v, 0.5), 0.2);
        // even length median interpolates
        assert!((quantile_oracle(&[1.0, 2.0, 3.0, 4.0], 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_oracle_hand_case() {
        // confusion: tp=1 fn=1 tn=2 fp=0
        // class1: precision 1, recall 1/2 -> F1 2/3
        // class0: precision 2/3, recall 1 -> F1 4/5
        let got = macro_f1_oracle(&[1, 1, 0, 0], &[1, 0, 0, 0]);
        assert!((got - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let g = finite_difference(f, &x, 1e-5);
        let want = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&want, &g) < 1e-8);
    }
}
