use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Affine map along the trailing axis: `input: …×D_in`, `weight: D_out×D_in`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (d_out, d_in) = linear_dims(input, weight, bias)?;
    Ok(linear_forward(input, weight.data(), bias.map(Tensor::data), d_out, d_in))
}

pub(crate) fn linear_dims(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let [d_out, d_in] = *weight.shape() else {
        return Err(config_err!("linear weight must be D_out×D_in, got {:?}", weight.shape()));
    };
    let trailing = *input.shape().last().expect("tensors have at least one axis");
    if trailing != d_in {
        return Err(config_err!("linear input trailing extent {trailing} does not match D_in {d_in}"));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(config_err!("linear bias has {} entries, expected {d_out}", b.len()));
        }
    }
    Ok((d_out, d_in))
}

pub(crate) fn linear_forward(input: &Tensor, w: &[f32], bias: Option<&[f32]>, d_out: usize, d_in: usize) -> Tensor {
    let rows = input.len() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for x in input.data().chunks_exact(d_in) {
        for (j, w_row) in w.chunks_exact(d_in).enumerate() {
            let acc: f32 = w_row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(acc + bias.map_or(0.0, |b| b[j]));
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::from_parts(shape, out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn linear_backward(x: &[f32], w: &[f32], gy: &[f32], d_out: usize, d_in: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; d_out];
    for ((xr, gyr), gxr) in x.chunks_exact(d_in).zip(gy.chunks_exact(d_out)).zip(gx.chunks_exact_mut(d_in)) {
        for (j, &g) in gyr.iter().enumerate() {
            gb[j] += g;
            let w_row = &w[j * d_in..(j + 1) * d_in];
            let gw_row = &mut gw[j * d_in..(j + 1) * d_in];
            for i in 0..d_in {
                gxr[i] += g * w_row[i];
                gw_row[i] += g * xr[i];
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let y = linear(&x, &Tensor::new([3, 3], eye).unwrap(), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let b = Tensor::new([2], vec![0.5, -1.0]).unwrap();
        let y = linear(&Tensor::full([3, 4], 9.0), &Tensor::zeros([2, 4]), Some(&b)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn trailing_extent_mismatch() {
        assert!(linear(&Tensor::zeros([3]), &Tensor::zeros([2, 4]), None).is_err());
    }
}
