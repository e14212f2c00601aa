//! Zero-padded 1-D and 2-D convolutions over channel-first tensors.

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    pub const POINTWISE: Conv1dSpec = Conv1dSpec { stride: 1, dilation: 1, padding: 0 };

    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Conv1dSpec { stride, dilation, padding }
    }

    /// Length-preserving geometry for an odd kernel at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv1dSpec { stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride_f: usize,
    pub stride_t: usize,
    pub padding_f: usize,
    pub padding_t: usize,
}

impl Conv2dSpec {
    pub fn new(stride_f: usize, stride_t: usize, padding_f: usize, padding_t: usize) -> Self {
        Conv2dSpec { stride_f, stride_t, padding_f, padding_t }
    }
}

/// `floor((len + 2·padding − dilation·(kernel−1) − 1) / stride) + 1`
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return Err(config_err!(
            "kernel, stride and dilation must be ≥ 1 (got {kernel}, {stride}, {dilation})"
        ));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return Err(config_err!(
            "input length {len} with padding {padding} is shorter than the receptive span {span}"
        ));
    }
    Ok((padded - span) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` for which `o·stride + offset` lands inside `[0, in_len)`.
#[inline]
fn tap_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

#[inline]
fn axpy(out: &mut [f32], w: f32, x: &[f32], stride: usize, offset: isize, lo: usize, hi: usize) {
    if lo >= hi {
        return;
    }
    let start = (lo as isize * stride as isize + offset) as usize;
    if stride == 1 {
        let xs = &x[start..start + (hi - lo)];
        for (o, &v) in out[lo..hi].iter_mut().zip(xs) {
            *o += w * v;
        }
    } else {
        for (o, &v) in out[lo..hi].iter_mut().zip(x[start..].iter().step_by(stride)) {
            *o += w * v;
        }
    }
}

#[inline]
fn dot(gy: &[f32], x: &[f32], stride: usize, offset: isize, lo: usize, hi: usize) -> f32 {
    if lo >= hi {
        return 0.0;
    }
    let start = (lo as isize * stride as isize + offset) as usize;
    if stride == 1 {
        gy[lo..hi].iter().zip(&x[start..start + (hi - lo)]).map(|(a, b)| a * b).sum()
    } else {
        gy[lo..hi].iter().zip(x[start..].iter().step_by(stride)).map(|(a, b)| a * b).sum()
    }
}

/// Kernel extent of a 1-D weight: `[C_out, C_in, K]`, or `[C_out, C_in]` for pointwise.
pub(crate) fn conv1d_weight_dims(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match *weight.shape() {
        [co, ci, k] => Ok((co, ci, k)),
        [co, ci] => Ok((co, ci, 1)),
        ref s => Err(config_err!("conv1d weight must be 2-D or 3-D, got {s:?}")),
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c_out => Err(config_err!("bias has {} entries, expected {c_out}", b.len())),
        _ => Ok(()),
    }
}

/// Geometry shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub spec: Conv1dSpec,
}

impl Conv1dGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv1dSpec) -> Result<Self> {
        let (c_out, wc_in, kernel) = conv1d_weight_dims(weight)?;
        let [c_in, t_in] = *input.shape() else {
            return Err(config_err!("conv1d input must be C×T, got {:?}", input.shape()));
        };
        if c_in != wc_in {
            return Err(config_err!("conv1d input has {c_in} channels but weight expects {wc_in}"));
        }
        check_bias(bias, c_out)?;
        let t_out = conv_out_len(t_in, kernel, spec.stride, spec.dilation, spec.padding)?;
        Ok(Conv1dGeom { c_in, c_out, kernel, t_in, t_out, spec })
    }

    fn offset(&self, k: usize) -> isize {
        (k * self.spec.dilation) as isize - self.spec.padding as isize
    }

    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.kernel * self.t_out) as u64
    }
}

/// `input: C_in×T`, `weight: C_out×C_in×K` → `C_out×T_out`.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv1dSpec) -> Result<Tensor> {
    let g = Conv1dGeom::new(input, weight, bias, spec)?;
    Ok(conv1d_forward(&g, input.data(), weight.data(), bias.map(Tensor::data)))
}

pub(crate) fn conv1d_forward(g: &Conv1dGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Tensor {
    let mut out = vec![0.0f32; g.c_out * g.t_out];
    let taps: Vec<(isize, usize, usize)> = (0..g.kernel)
        .map(|k| {
            let off = g.offset(k);
            let (lo, hi) = tap_range(off, g.spec.stride, g.t_in, g.t_out);
            (off, lo, hi)
        })
        .collect();
    for (co, row) in out.chunks_exact_mut(g.t_out).enumerate() {
        if let Some(b) = bias {
            row.fill(b[co]);
        }
        for ci in 0..g.c_in {
            let x_row = &x[ci * g.t_in..(ci + 1) * g.t_in];
            let w_base = (co * g.c_in + ci) * g.kernel;
            for (k, &(off, lo, hi)) in taps.iter().enumerate() {
                axpy(row, w[w_base + k], x_row, g.spec.stride, off, lo, hi);
            }
        }
    }
    Tensor::from_parts(vec![g.c_out, g.t_out], out)
}

/// Gradients with respect to input, weight and bias.
pub(crate) fn conv1d_backward(g: &Conv1dGeom, x: &[f32], w: &[f32], gy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; g.c_in * g.t_in];
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; g.c_out];
    let stride = g.spec.stride;
    for co in 0..g.c_out {
        let gy_row = &gy[co * g.t_out..(co + 1) * g.t_out];
        gb[co] = gy_row.iter().sum();
        for ci in 0..g.c_in {
            let x_row = &x[ci * g.t_in..(ci + 1) * g.t_in];
            let gx_row = &mut gx[ci * g.t_in..(ci + 1) * g.t_in];
            let w_base = (co * g.c_in + ci) * g.kernel;
            for k in 0..g.kernel {
                let off = g.offset(k);
                let (lo, hi) = tap_range(off, stride, g.t_in, g.t_out);
                gw[w_base + k] += dot(gy_row, x_row, stride, off, lo, hi);
                let wv = w[w_base + k];
                for o in lo..hi {
                    gx_row[(o as isize * stride as isize + off) as usize] += wv * gy_row[o];
                }
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kf: usize,
    pub kt: usize,
    pub f_in: usize,
    pub t_in: usize,
    pub f_out: usize,
    pub t_out: usize,
    pub spec: Conv2dSpec,
}

impl Conv2dGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Self> {
        let [c_in, f_in, t_in] = *input.shape() else {
            return Err(config_err!("conv2d input must be C×F×T, got {:?}", input.shape()));
        };
        let [c_out, wc_in, kf, kt] = *weight.shape() else {
            return Err(config_err!("conv2d weight must be C_out×C_in×Kf×Kt, got {:?}", weight.shape()));
        };
        if c_in != wc_in {
            return Err(config_err!("conv2d input has {c_in} channels but weight expects {wc_in}"));
        }
        check_bias(bias, c_out)?;
        let f_out = conv_out_len(f_in, kf, spec.stride_f, 1, spec.padding_f)?;
        let t_out = conv_out_len(t_in, kt, spec.stride_t, 1, spec.padding_t)?;
        Ok(Conv2dGeom { c_in, c_out, kf, kt, f_in, t_in, f_out, t_out, spec })
    }

    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.kf * self.kt * self.f_out * self.t_out) as u64
    }

    fn f_taps(&self) -> Vec<(isize, usize, usize)> {
        (0..self.kf)
            .map(|k| {
                let off = k as isize - self.spec.padding_f as isize;
                let (lo, hi) = tap_range(off, self.spec.stride_f, self.f_in, self.f_out);
                (off, lo, hi)
            })
            .collect()
    }

    fn t_taps(&self) -> Vec<(isize, usize, usize)> {
        (0..self.kt)
            .map(|k| {
                let off = k as isize - self.spec.padding_t as isize;
                let (lo, hi) = tap_range(off, self.spec.stride_t, self.t_in, self.t_out);
                (off, lo, hi)
            })
            .collect()
    }
}

/// `input: C_in×F×T`, `weight: C_out×C_in×Kf×Kt` → `C_out×F_out×T_out`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let g = Conv2dGeom::new(input, weight, bias, spec)?;
    Ok(conv2d_forward(&g, input.data(), weight.data(), bias.map(Tensor::data)))
}

pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Tensor {
    let plane_in = g.f_in * g.t_in;
    let plane_out = g.f_out * g.t_out;
    let mut out = vec![0.0f32; g.c_out * plane_out];
    let f_taps = g.f_taps();
    let t_taps = g.t_taps();
    for (co, plane) in out.chunks_exact_mut(plane_out).enumerate() {
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..g.c_in {
            let x_plane = &x[ci * plane_in..(ci + 1) * plane_in];
            for (kf, &(foff, flo, fhi)) in f_taps.iter().enumerate() {
                for fo in flo..fhi {
                    let fi = (fo as isize * g.spec.stride_f as isize + foff) as usize;
                    let x_row = &x_plane[fi * g.t_in..(fi + 1) * g.t_in];
                    let out_row = &mut plane[fo * g.t_out..(fo + 1) * g.t_out];
                    let w_base = ((co * g.c_in + ci) * g.kf + kf) * g.kt;
                    for (kt, &(toff, tlo, thi)) in t_taps.iter().enumerate() {
                        axpy(out_row, w[w_base + kt], x_row, g.spec.stride_t, toff, tlo, thi);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.c_out, g.f_out, g.t_out], out)
}

pub(crate) fn conv2d_backward(g: &Conv2dGeom, x: &[f32], w: &[f32], gy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane_in = g.f_in * g.t_in;
    let plane_out = g.f_out * g.t_out;
    let mut gx = vec![0.0f32; g.c_in * plane_in];
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; g.c_out];
    let f_taps = g.f_taps();
    let t_taps = g.t_taps();
    let st = g.spec.stride_t;
    for co in 0..g.c_out {
        let gy_plane = &gy[co * plane_out..(co + 1) * plane_out];
        gb[co] = gy_plane.iter().sum();
        for ci in 0..g.c_in {
            let x_plane = &x[ci * plane_in..(ci + 1) * plane_in];
            let gx_plane = &mut gx[ci * plane_in..(ci + 1) * plane_in];
            for (kf, &(foff, flo, fhi)) in f_taps.iter().enumerate() {
                for fo in flo..fhi {
                    let fi = (fo as isize * g.spec.stride_f as isize + foff) as usize;
                    let x_row = &x_plane[fi * g.t_in..(fi + 1) * g.t_in];
                    let gy_row = &gy_plane[fo * g.t_out..(fo + 1) * g.t_out];
                    let w_base = ((co * g.c_in + ci) * g.kf + kf) * g.kt;
                    for (kt, &(toff, tlo, thi)) in t_taps.iter().enumerate() {
                        gw[w_base + kt] += dot(gy_row, x_row, st, toff, tlo, thi);
                        let wv = w[w_base + kt];
                        let gx_row = &mut gx_plane[fi * g.t_in..(fi + 1) * g.t_in];
                        for o in tlo..thi {
                            gx_row[(o as isize * st as isize + toff) as usize] += wv * gy_row[o];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_kernel_scales() {
        let y = conv1d(&t(&[1, 3], &[1., 2., 3.]), &t(&[1, 1, 1], &[2.]), None, Conv1dSpec::POINTWISE).unwrap();
        assert_eq!(y.data(), &[2., 4., 6.]);
    }

    #[test]
    fn identity_kernel_with_padding() {
        let x = t(&[2, 4], &[1., -2., 3., 4., 5., 6., -7., 8.]);
        let mut w = vec![0.0; 2 * 2 * 3];
        w[1] = 1.0; // (0,0,1)
        w[(2 + 1) * 3 + 1] = 1.0; // (1,1,1)
        let y = conv1d(&x, &t(&[2, 2, 3], &w), None, Conv1dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_taps() {
        let y = conv1d(&t(&[1, 5], &[1., 0., 0., 0., 1.]), &t(&[1, 1, 3], &[1., 1., 1.]), None, Conv1dSpec::new(1, 2, 0)).unwrap();
        assert_eq!(y.data(), &[2.]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let r = conv1d(&Tensor::zeros([3, 5]), &Tensor::zeros([1, 2, 3]), None, Conv1dSpec::POINTWISE);
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn too_short_input_rejected() {
        assert!(conv_out_len(2, 3, 1, 2, 0).is_err());
        assert_eq!(conv_out_len(5, 3, 1, 2, 0).unwrap(), 1);
    }

    #[test]
    fn conv2d_examples() {
        let y = conv2d(&t(&[1, 2, 2], &[1., 2., 3., 4.]), &t(&[1, 1, 1, 1], &[2.]), None, Conv2dSpec::new(1, 1, 0, 0)).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8.]);

        let y = conv2d(&Tensor::full([1, 3, 3], 1.0), &Tensor::full([1, 1, 3, 3], 1.0), None, Conv2dSpec::new(1, 1, 0, 0)).unwrap();
        assert_eq!(y.data(), &[9.]);

        let y = conv2d(&Tensor::zeros([1, 8, 5]), &Tensor::zeros([1, 1, 3, 3]), None, Conv2dSpec::new(2, 1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5]);
    }

    #[test]
    fn strided_matches_naive() {
        // naive reference straight from the definition
        let x: Vec<f32> = (0..2 * 11).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..3 * 2 * 3).map(|i| (i as f32 * 0.91).cos()).collect();
        let spec = Conv1dSpec::new(2, 2, 3);
        let y = conv1d(&t(&[2, 11], &x), &t(&[3, 2, 3], &w), None, spec).unwrap();
        let t_out = y.dim(1);
        for co in 0..3 {
            for o in 0..t_out {
                let mut acc = 0.0f32;
                for ci in 0..2 {
                    for k in 0..3 {
                        let ti = (o * 2 + k * 2) as isize - 3;
                        if (0..11).contains(&ti) {
                            acc += w[(co * 2 + ci) * 3 + k] * x[ci * 11 + ti as usize];
                        }
                    }
                }
                assert!((acc - y.data()[co * t_out + o]).abs() < 1e-5);
            }
        }
    }
}
