use super::{OpCounter, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Output spatial extent of a convolution or pooling window.
pub fn conv2d_output_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn macs(&self) -> u64 {
        (self.b * self.cout * self.oh * self.ow * self.cin * self.kh * self.kw) as u64
    }
}

fn geometry(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Geometry> {
    x.check_precision(w, "conv2d")?;
    if x.ndim() != 4 {
        return Err(Error::dim("conv2d", "input rank", 4, x.ndim()));
    }
    if w.ndim() != 4 {
        return Err(Error::dim("conv2d", "weight rank", 4, w.ndim()));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride", ">= 1", 0));
    }
    let (b, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, wcin, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if wcin != cin {
        return Err(Error::dim("conv2d", "in_channels", cin, wcin));
    }
    if kh > h + 2 * pad {
        return Err(Error::dim("conv2d", "kernel_height", format!("<= {}", h + 2 * pad), kh));
    }
    if kw > wd + 2 * pad {
        return Err(Error::dim("conv2d", "kernel_width", format!("<= {}", wd + 2 * pad), kw));
    }
    if let Some(bias) = bias {
        x.check_precision(bias, "conv2d")?;
        if bias.shape() != [cout] {
            return Err(Error::dim("conv2d", "bias", format!("[{cout}]"), format!("{:?}", bias.shape())));
        }
    }
    let (oh, ow) = conv2d_output_hw(h, wd, kh, kw, stride, pad);
    Ok(Geometry { b, cin, h, w: wd, cout, kh, kw, oh, ow })
}

/// 2-D cross-correlation over `[B, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`.
///
/// Each output element accumulates over `(cin, ki, kj)` in that fixed order.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    ops: &OpCounter,
) -> Result<Tensor> {
    let g = geometry(x, w, bias, stride, pad)?;
    let xd = x.data();
    let wdat = w.data();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.b * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (bi, co) = (idx / g.cout, idx % g.cout);
        if let Some(bias) = bias {
            o.iter_mut().for_each(|v| *v = bias.data()[co]);
        }
        for ci in 0..g.cin {
            let xplane = &xd[(bi * g.cin + ci) * g.h * g.w..(bi * g.cin + ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wdat[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    for oy in 0..g.oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &xplane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            o[oy * g.ow + ox] += wv * row[ix as usize];
                        }
                    }
                }
            }
        }
    });
    ops.add(g.macs());
    Ok(x.with_data(vec![g.b, g.cout, g.oh, g.ow], out))
}

/// Vector-Jacobian product of [`conv2d`]. Charges twice the forward cost.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    ops: &OpCounter,
) -> Result<ConvGrads> {
    let g = geometry(x, w, None, stride, pad)?;
    let expected = [g.b, g.cout, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            "grad_out",
            format!("{expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (xd, wdat, gy) = (x.data(), w.data(), grad_out.data());
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;

    let mut gx = vec![0.0; x.len()];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, gxp)| {
        let (bi, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let gyp = &gy[(bi * g.cout + co) * out_plane..(bi * g.cout + co + 1) * out_plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wdat[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    for oy in 0..g.oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            gxp[iy as usize * g.w + ix as usize] += wv * gyp[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });

    let ksize = g.cin * g.kh * g.kw;
    let mut gw = vec![0.0; w.len()];
    gw.par_chunks_mut(ksize).enumerate().for_each(|(co, gwc)| {
        for bi in 0..g.b {
            let gyp = &gy[(bi * g.cout + co) * out_plane..(bi * g.cout + co + 1) * out_plane];
            for ci in 0..g.cin {
                let xplane = &xd[(bi * g.cin + ci) * in_plane..(bi * g.cin + ci + 1) * in_plane];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.ow {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += gyp[oy * g.ow + ox] * xplane[iy as usize * g.w + ix as usize];
                            }
                        }
                        gwc[(ci * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    });

    let bias = with_bias.then(|| {
        let mut gb = vec![0.0; g.cout];
        for bi in 0..g.b {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gy[(bi * g.cout + co) * out_plane..(bi * g.cout + co + 1) * out_plane]
                    .iter()
                    .sum::<f64>();
            }
        }
        x.with_data(vec![g.cout], gb)
    });

    ops.add(2 * g.macs());
    Ok(ConvGrads {
        x: x.with_data(x.shape().to_vec(), gx),
        w: x.with_data(w.shape().to_vec(), gw),
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Phase, Precision};

    const P: Precision = Precision::F64;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data, P).unwrap()
    }

    #[test]
    fn single_multiply() {
        let ops = OpCounter::new();
        let y = conv2d(&t(&[1, 1, 1, 1], vec![2.0]), &t(&[1, 1, 1, 1], vec![3.0]), None, 1, 0, &ops).unwrap();
        assert_eq!(y.data(), &[6.0]);
        assert_eq!(ops.get(Phase::Forward), 1);
    }

    #[test]
    fn sum_of_nine_ones() {
        let ops = OpCounter::new();
        let y = conv2d(&Tensor::ones(&[1, 1, 3, 3], P), &Tensor::ones(&[1, 1, 3, 3], P), None, 1, 0, &ops).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zeros_in_zeros_out_and_op_count() {
        let ops = OpCounter::new();
        let w = Tensor::ones(&[4, 3, 3, 3], P);
        let y = conv2d(&Tensor::zeros(&[2, 3, 5, 5], P), &w, None, 2, 1, &ops).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(ops.total(), (2 * 4 * 3 * 3 * 3 * 3 * 3) as u64);
    }

    #[test]
    fn bias_is_added() {
        let ops = OpCounter::new();
        let b = t(&[2], vec![0.5, -1.0]);
        let y = conv2d(&Tensor::zeros(&[1, 1, 2, 2], P), &Tensor::ones(&[2, 1, 1, 1], P), Some(&b), 1, 0, &ops).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn mismatched_channels_name_the_axis() {
        let ops = OpCounter::new();
        let err = conv2d(&Tensor::zeros(&[1, 2, 3, 3], P), &Tensor::zeros(&[1, 3, 1, 1], P), None, 1, 0, &ops).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "in_channels", .. }), "{err}");
        let err = conv2d(&Tensor::zeros(&[1, 1, 2, 2], P), &Tensor::zeros(&[1, 1, 5, 5], P), None, 1, 1, &ops).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "kernel_height", .. }), "{err}");
    }

    #[test]
    fn backward_doubles_the_charge() {
        let ops = OpCounter::new();
        let x = Tensor::ones(&[1, 2, 4, 4], P);
        let w = Tensor::ones(&[3, 2, 3, 3], P);
        let y = conv2d(&x, &w, None, 1, 1, &ops).unwrap();
        ops.set_phase(Phase::Backward);
        let g = conv2d_backward(&x, &w, true, 1, 1, &Tensor::ones(y.shape(), P), &ops).unwrap();
        assert_eq!(ops.get(Phase::Backward), 2 * ops.get(Phase::Forward));
        assert_eq!(g.x.shape(), x.shape());
        assert_eq!(g.w.shape(), w.shape());
        assert_eq!(g.bias.unwrap().data(), &[16.0, 16.0, 16.0]);
    }
}
