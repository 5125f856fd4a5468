use super::ops::softmax_rows_backward;
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
use crate::error::{Error, Result};

/// Score assigned to blocked entries. `exp(MASKED_SCORE - rowmax)` underflows
/// to exactly zero while keeping all intermediate values finite.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    weights: Tensor2,
    scale: f64,
}

impl AttentionCache {
    pub fn weights(&self) -> &Tensor2 {
        &self.weights
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Tensor2,
    pub dk: Tensor2,
    pub dv: Tensor2,
}

/// Scaled dot-product attention `softmax(QKᵀ/√d + mask)·V`.
///
/// `mask` is row-major `n × m`; `true` blocks the entry. A row with every
/// entry blocked is an error.
pub fn attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mask: Option<&[bool]>,
) -> Result<(Tensor2, AttentionCache)> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "attention q/k",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention k/v",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let (n, m) = (q.rows(), k.rows());
    if let Some(mask) = mask {
        if mask.len() != n * m {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                left: (n, m),
                right: (mask.len(), 1),
            });
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k)?;
    for r in 0..n {
        let row = scores.row_mut(r);
        let mut open = 0;
        for (c, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if mask.is_some_and(|mk| mk[r * m + c]) {
                *s = MASKED_SCORE;
            } else {
                open += 1;
            }
        }
        if open == 0 {
            return Err(Error::FullyMaskedRow { row: r });
        }
        super::ops::softmax_in_place(row);
    }
    let out = matmul(&scores, v)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights: scores,
            scale,
        },
    ))
}

pub fn attention_backward(cache: &AttentionCache, d_out: &Tensor2) -> Result<AttentionGrads> {
    if d_out.rows() != cache.q.rows() || d_out.cols() != cache.v.cols() {
        return Err(Error::ShapeMismatch {
            op: "attention_backward",
            left: (cache.q.rows(), cache.v.cols()),
            right: d_out.shape(),
        });
    }
    let dv = matmul_tn(&cache.weights, d_out)?;
    let dweights = matmul_nt(d_out, &cache.v)?;
    // blocked entries have zero weight, so their score gradient is zero too
    let dscores = softmax_rows_backward(&cache.weights, &dweights)?.scale(cache.scale);
    let dq = matmul(&dscores, &cache.k)?;
    let dk = matmul_tn(&dscores, &cache.q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let v = t(&[&[3.0, -2.0, 0.5]]);
        let (out, _) = attention(&t(&[&[0.7]]), &t(&[&[-1.3]]), &v, Some(&[false])).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identity_two_by_two_matches_closed_form() {
        // d = 2 here (Q = K = I₂), scale 1/√2
        let i2 = Tensor2::eye(2);
        let v = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (out, cache) = attention(&i2, &i2, &v, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w_hi = s.exp() / (s.exp() + 1.0);
        assert!((cache.weights().get(0, 0) - w_hi).abs() < 1e-15);
        assert!((out.get(0, 0) - w_hi).abs() < 1e-15);
        assert!((out.get(1, 1) - w_hi).abs() < 1e-15);
    }

    #[test]
    fn unit_dim_scores_match_softmax_of_one_zero() {
        // d = 1, Q = K = [[1],[0]]: score rows [1,0] and [0,0]
        let q = t(&[&[1.0], &[0.0]]);
        let v = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (out, _) = attention(&q, &q, &v, None).unwrap();
        let e = 1f64.exp();
        assert!((out.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((out.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blocked_value_row_has_no_influence() {
        let q = Tensor2::from_fn(3, 4, |r, c| (r + c) as f64 * 0.2 - 0.3);
        let k = Tensor2::from_fn(3, 4, |r, c| (r * c) as f64 * 0.1);
        let mut v = Tensor2::from_fn(3, 2, |r, c| r as f64 - c as f64);
        let mut mask = vec![false; 9];
        for r in 0..3 {
            mask[r * 3 + 1] = true;
        }
        let (a, _) = attention(&q, &k, &v, Some(&mask)).unwrap();
        v.set(1, 0, 1e6);
        v.set(1, 1, -1e6);
        let (b, _) = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = Tensor2::zeros(2, 2);
        let err = attention(&q, &q, &q, Some(&[false, false, true, true])).unwrap_err();
        assert!(err.to_string().contains("attention row fully masked"));
    }

    #[test]
    fn rows_sum_to_one() {
        let q = Tensor2::from_fn(4, 3, |r, c| (r as f64 - c as f64) * 3.0);
        let (_, cache) = attention(&q, &q, &q, None).unwrap();
        for r in 0..4 {
            assert!((cache.weights().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
