use super::{conv2d_output_hw, Tensor};
use crate::error::{Error, Result};

pub fn pool_output_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    conv2d_output_hw(h, w, k, k, stride, pad)
}

fn check(op: &'static str, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::dim(op, "input rank", 4, x.ndim()));
    }
    if stride == 0 || k == 0 {
        return Err(Error::dim(op, "window", ">= 1", 0));
    }
    let (h, w) = (x.dim(2), x.dim(3));
    if k > h + 2 * pad {
        return Err(Error::dim(op, "height", format!(">= {k}"), h + 2 * pad));
    }
    if k > w + 2 * pad {
        return Err(Error::dim(op, "width", format!(">= {k}"), w + 2 * pad));
    }
    let (oh, ow) = pool_output_hw(h, w, k, stride, pad);
    Ok((h, w, oh, ow))
}

/// Average pooling; padded cells count as zeros in the `k²` denominator.
pub fn avgpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, w, oh, ow) = check("avgpool2d", x, k, stride, pad)?;
    let planes = x.dim(0) * x.dim(1);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += plane[iy as usize * w + ix as usize];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok(x.with_data(vec![x.dim(0), x.dim(1), oh, ow], out))
}

pub fn avgpool2d_backward(input_shape: &[usize], grad_out: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = pool_output_hw(h, w, k, stride, pad);
    let expected = [input_shape[0], input_shape[1], oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::dim("avgpool2d_backward", "grad_out", format!("{expected:?}"), format!("{:?}", grad_out.shape())));
    }
    let planes = input_shape[0] * input_shape[1];
    let inv = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gy = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[oy * ow + ox] * inv;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gxp[iy as usize * w + ix as usize] += g;
                    }
                }
            }
        }
    }
    Ok(grad_out.with_data(input_shape.to_vec(), gx))
}

/// Max pooling; padded cells never win. Returns the output and, per output
/// cell, the flat input index that produced it (first maximum on ties).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, oh, ow) = check("maxpool2d", x, k, stride, pad)?;
    let planes = x.dim(0) * x.dim(1);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((x.with_data(vec![x.dim(0), x.dim(1), oh, ow], out), arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("maxpool2d_backward", "grad_out", argmax.len(), grad_out.len()));
    }
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Ok(grad_out.with_data(input_shape.to_vec(), gx))
}
