//! Dense f64 tensors and the primitive kernels the model is built from.
//!
//! Every public forward op validates shapes, names itself in errors, and
//! checks its output for NaN/Inf. The slice-level kernels (`*_forward` /
//! `*_backward`) are the building blocks of the fused model passes; the
//! `Tensor` wrappers exist for parameter storage and the small-op surface.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec".into(),
                detail: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.into() })
        }
    }
}

// ── Slice kernels ────────────────────────────────────────────────────

/// out[M,N] = a[M,K] × b[K,N]. Accumulates in k-inner order for determinism.
pub fn matmul_forward(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let out_row = &mut out[row * n..(row + 1) * n];
        out_row.fill(0.0);
        let a_row = &a[row * k..(row + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// da += dout × bᵀ; db += aᵀ × dout.
pub fn matmul_backward(
    da: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) {
    for row in 0..m {
        let dout_row = &dout[row * n..(row + 1) * n];
        let a_row = &a[row * k..(row + 1) * k];
        let da_row = &mut da[row * k..(row + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (d, bv) in dout_row.iter().zip(b_row.iter()) {
                acc += d * bv;
            }
            da_row[kk] += acc;
        }
        for (kk, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[kk * n..(kk + 1) * n];
            for (dbv, &d) in db_row.iter_mut().zip(dout_row.iter()) {
                *dbv += av * d;
            }
        }
    }
}

/// Numerically stable softmax over the last `n` elements of each row, in place.
pub fn softmax_rows(x: &mut [f64], rows: usize, n: usize) {
    debug_assert_eq!(x.len(), rows * n);
    for r in 0..rows {
        let row = &mut x[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// dx for y = softmax(x): dx = y ⊙ (dy − Σ y·dy), per row.
pub fn softmax_backward_row(dx: &mut [f64], y: &[f64], dy: &[f64]) {
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    for ((d, &yv), &dyv) in dx.iter_mut().zip(y.iter()).zip(dy.iter()) {
        *d += yv * (dyv - dot);
    }
}

/// y = gain ⊙ (x − mean)/√(var + eps) + bias, per row of width `n`.
/// Caches inverse stddev per row for the backward pass.
pub fn layernorm_forward(
    y: &mut [f64],
    rstd: &mut [f64],
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    n: usize,
) {
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let yr = &mut y[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            yr[i] = gain[i] * (xr[i] - mean) * rs + bias[i];
        }
    }
}

pub fn layernorm_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    rstd: &[f64],
    rows: usize,
    n: usize,
) {
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let dxr = &mut dx[r * n..(r + 1) * n];
        let rs = rstd[r];
        let mean = xr.iter().sum::<f64>() / n as f64;
        // xhat = (x - mean) * rstd
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xhat = 0.0;
        for i in 0..n {
            let xhat = (xr[i] - mean) * rs;
            let dyg = dyr[i] * gain[i];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dgain[i] += dyr[i] * xhat;
            dbias[i] += dyr[i];
        }
        for i in 0..n {
            let xhat = (xr[i] - mean) * rs;
            let dyg = dyr[i] * gain[i];
            dxr[i] += rs * (dyg - sum_dyg / n as f64 - xhat * sum_dyg_xhat / n as f64);
        }
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU (tanh approximation), elementwise.
pub fn gelu_forward(y: &mut [f64], x: &[f64]) {
    for (yo, &xv) in y.iter_mut().zip(x.iter()) {
        let cube = 0.044715 * xv * xv * xv;
        *yo = 0.5 * xv * (1.0 + (GELU_SQRT_2_OVER_PI * (xv + cube)).tanh());
    }
}

pub fn gelu_backward(dx: &mut [f64], dy: &[f64], x: &[f64]) {
    for ((d, &g), &xv) in dx.iter_mut().zip(dy.iter()).zip(x.iter()) {
        let cube = 0.044715 * xv * xv * xv;
        let inner = GELU_SQRT_2_OVER_PI * (xv + cube);
        let t = inner.tanh();
        let sech2 = 1.0 - t * t;
        let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * xv * xv);
        *d += g * (0.5 * (1.0 + t) + 0.5 * xv * sech2 * dinner);
    }
}

// ── Tensor-level ops (shape-checked, finite-checked) ─────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul".into(),
            detail: format!("{:?} × {:?}", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    matmul_forward(&mut out.data, &a.data, &b.data, m, k, n);
    out.check_finite("matmul")?;
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add".into(),
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
    let out = Tensor {
        shape: a.shape.clone(),
        data,
    };
    out.check_finite("add")?;
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "mul".into(),
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
    let out = Tensor {
        shape: a.shape.clone(),
        data,
    };
    out.check_finite("mul")?;
    Ok(out)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.shape.is_empty() {
        return Err(Error::Shape {
            op: "softmax".into(),
            detail: "scalar input".into(),
        });
    }
    let n = *x.shape.last().unwrap();
    let rows = x.len() / n;
    let mut out = x.clone();
    softmax_rows(&mut out.data, rows, n);
    out.check_finite("softmax")?;
    Ok(out)
}

/// Layer normalization over the last axis with affine terms.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = *x.shape.last().ok_or_else(|| Error::Shape {
        op: "layernorm".into(),
        detail: "scalar input".into(),
    })?;
    if gain.len() != n || bias.len() != n {
        return Err(Error::Shape {
            op: "layernorm".into(),
            detail: format!("width {} vs gain {} / bias {}", n, gain.len(), bias.len()),
        });
    }
    let rows = x.len() / n;
    let mut out = Tensor::zeros(&x.shape);
    let mut rstd = vec![0.0; rows];
    layernorm_forward(&mut out.data, &mut rstd, &x.data, &gain.data, &bias.data, rows, n);
    out.check_finite("layernorm")?;
    Ok(out)
}

/// Row lookup: out[i, :] = table[ids[i], :].
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let d = table.cols();
    for (pos, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Shape {
                op: "embedding".into(),
                detail: format!("id {} at position {} out of range {}", id, pos, table.rows()),
            });
        }
    }
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        out.data[i * d..(i + 1) * d].copy_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let y = softmax(&x).unwrap();
        for v in &y.data {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[3, 5], (0..15).map(|i| i as f64 * 0.7 - 4.0).collect()).unwrap();
        let y = softmax(&x).unwrap();
        for r in 0..3 {
            let s: f64 = y.data[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![3.0, -1.5, 2.25, 0.125]).unwrap();
        let out = matmul(&i2, &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn layernorm_constant_vector_is_zero_before_affine() {
        // gain=1, bias=0: a constant row maps to (x-mean)=0 scaled by 1/sqrt(eps).
        let x = Tensor::from_vec(&[1, 6], vec![4.2; 6]).unwrap();
        let gain = Tensor::from_vec(&[6], vec![1.0; 6]).unwrap();
        let bias = Tensor::from_vec(&[6], vec![0.0; 6]).unwrap();
        let y = layernorm(&x, &gain, &bias).unwrap();
        for v in &y.data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn embedding_out_of_range() {
        let table = Tensor::zeros(&[4, 2]);
        let err = embedding(&table, &[0, 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains("position 1"));
    }

    #[test]
    fn gelu_matches_finite_difference() {
        let xs = [-2.0, -0.5, 0.0, 0.3, 1.7];
        let h = 1e-6;
        for &x in &xs {
            let mut y = [0.0];
            gelu_forward(&mut y, &[x]);
            let (mut yp, mut ym) = ([0.0], [0.0]);
            gelu_forward(&mut yp, &[x + h]);
            gelu_forward(&mut ym, &[x - h]);
            let fd = (yp[0] - ym[0]) / (2.0 * h);
            let mut dx = [0.0];
            gelu_backward(&mut dx, &[1.0], &[x]);
            assert!((dx[0] - fd).abs() < 1e-8, "x={x}: {} vs {}", dx[0], fd);
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_difference() {
        let n = 5;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9 - 2.0).sin()).collect();
        let gain: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bias: Vec<f64> = (0..n).map(|i| 0.05 * i as f64).collect();
        let dy: Vec<f64> = (0..n).map(|i| (i as f64 + 0.3).cos()).collect();

        let mut y = vec![0.0; n];
        let mut rstd = vec![0.0; 1];
        layernorm_forward(&mut y, &mut rstd, &x, &gain, &bias, 1, n);
        let mut dx = vec![0.0; n];
        let mut dgain = vec![0.0; n];
        let mut dbias = vec![0.0; n];
        layernorm_backward(&mut dx, &mut dgain, &mut dbias, &dy, &x, &gain, &rstd, 1, n);

        let h = 1e-6;
        let loss = |xv: &[f64], gv: &[f64], bv: &[f64]| -> f64 {
            let mut yy = vec![0.0; n];
            let mut rs = vec![0.0; 1];
            layernorm_forward(&mut yy, &mut rs, xv, gv, bv, 1, n);
            yy.iter().zip(dy.iter()).map(|(a, b)| a * b).sum()
        };
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &gain, &bias) - loss(&xm, &gain, &bias)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-7, "dx[{i}]");
            let mut gp = gain.clone();
            let mut gm = gain.clone();
            gp[i] += h;
            gm[i] -= h;
            let fd = (loss(&x, &gp, &bias) - loss(&x, &gm, &bias)) / (2.0 * h);
            assert!((dgain[i] - fd).abs() < 1e-7, "dgain[{i}]");
        }
    }

    #[test]
    fn matmul_backward_matches_finite_difference() {
        let (m, k, n) = (2, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 1.3 - 2.0).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7 + 0.2).cos()).collect();
        let dout: Vec<f64> = (0..m * n).map(|i| 0.5 + i as f64 * 0.25).collect();

        let mut da = vec![0.0; m * k];
        let mut db = vec![0.0; k * n];
        matmul_backward(&mut da, &mut db, &dout, &a, &b, m, k, n);

        let loss = |av: &[f64], bv: &[f64]| -> f64 {
            let mut out = vec![0.0; m * n];
            matmul_forward(&mut out, av, bv, m, k, n);
            out.iter().zip(dout.iter()).map(|(x, y)| x * y).sum()
        };
        let h = 1e-6;
        for i in 0..m * k {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            assert!((da[i] - fd).abs() < 1e-7);
        }
        for i in 0..k * n {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            assert!((db[i] - fd).abs() < 1e-7);
        }
    }
}
