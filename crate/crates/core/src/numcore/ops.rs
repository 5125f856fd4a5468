use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
use crate::error::{Error, Result};

/// `y = x·W + b`, with `b` a `1 × d_out` row broadcast over rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    if x.cols() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "affine",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut y = matmul(x, w)?;
    let bias = b.data();
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor2,
    pub dw: Tensor2,
    pub db: Tensor2,
}

pub fn affine_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<AffineGrads> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine_backward",
            left: (x.rows(), w.cols()),
            right: dy.shape(),
        });
    }
    Ok(AffineGrads {
        dx: matmul_nt(dy, w)?,
        dw: matmul_tn(x, dy)?,
        db: dy.sum_rows(),
    })
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    y
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    y.same_shape(dy, "softmax_rows_backward")?;
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, a), b) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = a * (b - dot);
        }
    }
    Ok(dx)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
pub fn layer_norm(
    x: &Tensor2,
    gain: &Tensor2,
    bias: &Tensor2,
) -> Result<(Tensor2, LayerNormCache)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm needs feature dim >= 2, got {d}"
        )));
    }
    for (p, op) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
        if p.shape() != (1, d) {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: p.shape(),
            });
        }
    }
    let mut xhat = Tensor2::zeros(x.rows(), d);
    let mut y = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.set(r, c, h);
            y.set(r, c, h * gain.data()[c] + bias.data()[c]);
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub dx: Tensor2,
    pub dgain: Tensor2,
    pub dbias: Tensor2,
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor2,
    dy: &Tensor2,
) -> Result<LayerNormGrads> {
    cache.xhat.same_shape(dy, "layer_norm_backward")?;
    let (n, d) = dy.shape();
    let mut dx = Tensor2::zeros(n, d);
    let mut dgain = Tensor2::zeros(1, d);
    let mut dbias = Tensor2::zeros(1, d);
    let g = gain.data();
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for c in 0..d {
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * xh[c];
        }
        let k = cache.inv_std[r] / d as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = k * (d as f64 * dxhat[c] - s1 - xh[c] * s2);
        }
    }
    Ok(LayerNormGrads { dx, dgain, dbias })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor2) -> Tensor2 {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    x.same_shape(dy, "gelu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor2::from_vec(x.rows(), x.cols(), data)
}

pub fn sigmoid(x: &Tensor2) -> Tensor2 {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    y.same_shape(dy, "sigmoid_backward")?;
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor2::from_vec(y.rows(), y.cols(), data)
}
