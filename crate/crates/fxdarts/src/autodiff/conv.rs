//! Direct-loop 2-D convolution kernels (forward and backward).

use super::tensor::Tensor;
use super::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// `floor((extent + 2*padding - dilation*(k-1) - 1) / stride) + 1`
pub fn conv_out_extent(extent: usize, k: usize, spec: &Conv2dSpec) -> Option<usize> {
    let padded = extent + 2 * spec.padding;
    let span = spec.dilation * (k - 1) + 1;
    if padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    spec: &Conv2dSpec,
) -> Result<Tensor, TensorError> {
    let (n, c_in, h, width) = x.dims4()?;
    let (c_out, c_per_group, kh, kw) = w.dims4()?;
    if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
        return Err(TensorError::InvalidConvSpec {
            detail: "stride, dilation, and groups must be positive".into(),
        });
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "groups",
            expected: spec.groups,
            got: c_in,
        });
    }
    if c_per_group != c_in / spec.groups {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "in_channels/groups",
            expected: c_in / spec.groups,
            got: c_per_group,
        });
    }
    let oh = conv_out_extent(h, kh, spec).ok_or_else(|| TensorError::InvalidConvSpec {
        detail: format!("kernel {kh}x{kw} does not fit input {h}x{width} with padding {}", spec.padding),
    })?;
    let ow = conv_out_extent(width, kw, spec).ok_or_else(|| TensorError::InvalidConvSpec {
        detail: format!("kernel {kh}x{kw} does not fit input {h}x{width} with padding {}", spec.padding),
    })?;

    let out_per_group = c_out / spec.groups;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / out_per_group;
            let ci_base = g * c_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_per_group {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix as usize >= width {
                                    continue;
                                }
                                acc += x.at4(ni, ci_base + ci, iy as usize, ix as usize)
                                    * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// MACs of the forward pass above, for the instrumented FLOPs oracle.
pub fn conv2d_mac_count(x: &Tensor, w: &Tensor, out: &Tensor, _spec: &Conv2dSpec) -> u64 {
    let n = x.shape[0] as u64;
    let c_per_group = w.shape[1] as u64;
    let (kh, kw) = (w.shape[2] as u64, w.shape[3] as u64);
    let (c_out, oh, ow) = (out.shape[1] as u64, out.shape[2] as u64, out.shape[3] as u64);
    n * c_out * oh * ow * c_per_group * kh * kw
}

/// Gradients with respect to input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    out_shape: &[usize],
    grad_out: &[f64],
    spec: &Conv2dSpec,
) -> (Vec<f64>, Vec<f64>) {
    let (n, c_in, h, width) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (c_out, c_per_group, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let out_per_group = c_out / spec.groups;

    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / out_per_group;
            let ci_base = g * c_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out[((ni * c_out + co) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c_per_group {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix as usize >= width {
                                    continue;
                                }
                                let xi = ((ni * c_in + ci_base + ci) * h + iy as usize) * width
                                    + ix as usize;
                                let wi = ((co * c_per_group + ci) * kh + ky) * kw + kx;
                                gx[xi] += go * w.data[wi];
                                gw[wi] += go * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
