use super::{OpCounter, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// `a[m×k] · b[k×n]`, row-major slices.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ops: &OpCounter) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
    ops.add((m * k * n) as u64);
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ops: &OpCounter) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    ops.add((m * k * n) as u64);
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ops: &OpCounter) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ar[i];
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
    }
    ops.add((m * k * n) as u64);
    out
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

fn check(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    x.check_precision(w, "linear")?;
    if x.ndim() != 2 {
        return Err(Error::dim("linear", "input rank", 2, x.ndim()));
    }
    if w.ndim() != 2 {
        return Err(Error::dim("linear", "weight rank", 2, w.ndim()));
    }
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(0);
    if w.dim(1) != din {
        return Err(Error::dim("linear", "in_features", din, w.dim(1)));
    }
    if let Some(b) = bias {
        x.check_precision(b, "linear")?;
        if b.shape() != [dout] {
            return Err(Error::dim("linear", "bias", format!("[{dout}]"), format!("{:?}", b.shape())));
        }
    }
    Ok((n, din, dout))
}

/// `y = x·Wᵀ + b` over `[N, Din]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, ops: &OpCounter) -> Result<Tensor> {
    let (n, din, dout) = check(x, w, bias)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * dout];
    out.par_chunks_mut(dout).enumerate().for_each(|(i, row)| {
        let xr = &xd[i * din..(i + 1) * din];
        for (o, y) in row.iter_mut().enumerate() {
            let wr = &wd[o * din..(o + 1) * din];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *y = acc;
        }
    });
    ops.add((n * din * dout) as u64);
    Ok(x.with_data(vec![n, dout], out))
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    grad_out: &Tensor,
    ops: &OpCounter,
) -> Result<LinearGrads> {
    let (n, din, dout) = check(x, w, None)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::dim("linear_backward", "grad_out", format!("[{n}, {dout}]"), format!("{:?}", grad_out.shape())));
    }
    let gx = matmul(grad_out.data(), w.data(), n, dout, din, ops);
    let gw = matmul_tn(grad_out.data(), x.data(), dout, n, din, ops);
    let bias = with_bias.then(|| {
        let mut gb = vec![0.0; dout];
        for row in grad_out.data().chunks(dout) {
            for (acc, g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        x.with_data(vec![dout], gb)
    });
    Ok(LinearGrads {
        x: x.with_data(vec![n, din], gx),
        w: x.with_data(vec![dout, din], gw),
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    const P: Precision = Precision::F64;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data, P).unwrap()
    }

    #[test]
    fn dot_product_by_hand() {
        let ops = OpCounter::new();
        let y = linear(&t(&[1, 2], vec![1.0, 2.0]), &t(&[1, 2], vec![3.0, 4.0]), Some(&t(&[1], vec![0.0])), &ops).unwrap();
        assert_eq!(y.data(), &[11.0]);
        assert_eq!(ops.total(), 2);
    }

    #[test]
    fn identity_and_zero_input() {
        let ops = OpCounter::new();
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -8.0]);
        assert_eq!(linear(&x, &eye, None, &ops).unwrap(), x);
        let b = t(&[3], vec![1.0, 2.0, 3.0]);
        let y = linear(&Tensor::zeros(&[2, 3], P), &eye, Some(&b), &ops).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let ops = OpCounter::new();
        let err = linear(&Tensor::zeros(&[1, 3], P), &Tensor::zeros(&[2, 2], P), None, &ops).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "in_features", .. }));
    }

    #[test]
    fn matmul_variants_agree() {
        let ops = OpCounter::new();
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let ab = matmul(&a, &b, 2, 3, 2, &ops);
        assert_eq!(ab, vec![1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // bᵀ as 2x3 row-major
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2, &ops), ab);
        // aᵀ as 3x2 row-major
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2, &ops), ab);
    }
}
