//! Batch normalization over the leading (channel) axis.

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics over every non-channel axis.
    Train,
    /// Normalize with running statistics.
    Infer,
}

/// Borrowed batch-norm state. `gamma`/`beta` are absent for non-affine layers.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a> {
    pub gamma: Option<&'a Tensor>,
    pub beta: Option<&'a Tensor>,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub output: Tensor,
    /// Per-channel mean used for normalization.
    pub mean: Vec<f32>,
    /// Per-channel `1/sqrt(var + eps)` used for normalization.
    pub inv_std: Vec<f32>,
    /// Unbiased batch variance (train mode only), for the running-average update.
    pub batch_var: Option<Vec<f32>>,
}

fn check(input: &Tensor, p: &BatchNormParams<'_>) -> Result<usize> {
    let c = input.dim(0);
    let extents = [Some(p.running_mean), Some(p.running_var), p.gamma, p.beta];
    for t in extents.into_iter().flatten() {
        if t.len() != c {
            return Err(config_err!("batch-norm parameter has {} entries for {c} channels", t.len()));
        }
    }
    if let Some(v) = p.running_var.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::CorruptWeights(format!("running variance entry {v} is negative")));
    }
    Ok(c)
}

pub fn batchnorm(input: &Tensor, params: BatchNormParams<'_>, mode: BnMode, eps: f32) -> Result<BatchNormOutput> {
    let c = check(input, &params)?;
    let n = input.len() / c;
    let x = input.data();
    let (mean, inv_std, batch_var) = match mode {
        BnMode::Infer => {
            let inv: Vec<f32> = params.running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (params.running_mean.data().to_vec(), inv, None)
        }
        BnMode::Train => {
            let mut mean = Vec::with_capacity(c);
            let mut inv = Vec::with_capacity(c);
            let mut unbiased = Vec::with_capacity(c);
            for row in x.chunks_exact(n) {
                let m = row.iter().sum::<f32>() / n as f32;
                let ss: f32 = row.iter().map(|v| (v - m) * (v - m)).sum();
                mean.push(m);
                inv.push(1.0 / (ss / n as f32 + eps).sqrt());
                unbiased.push(if n > 1 { ss / (n - 1) as f32 } else { 0.0 });
            }
            (mean, inv, Some(unbiased))
        }
    };
    let mut out = Vec::with_capacity(x.len());
    for (ch, row) in x.chunks_exact(n).enumerate() {
        let g = params.gamma.map_or(1.0, |g| g.data()[ch]);
        let b = params.beta.map_or(0.0, |b| b.data()[ch]);
        let scale = g * inv_std[ch];
        let m = mean[ch];
        out.extend(row.iter().map(|v| (v - m) * scale + b));
    }
    Ok(BatchNormOutput {
        output: Tensor::from_parts(input.shape().to_vec(), out),
        mean,
        inv_std,
        batch_var,
    })
}

/// Exponential moving average `r ← (1 − momentum)·r + momentum·batch`.
pub fn update_running(running: &mut Tensor, batch: &[f32], momentum: f32) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub(crate) fn batchnorm_backward(
    x: &[f32],
    gy: &[f32],
    gamma: Option<&[f32]>,
    mean: &[f32],
    inv_std: &[f32],
    mode: BnMode,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let c = mean.len();
    let n = x.len() / c;
    let mut gx = vec![0.0f32; x.len()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    for ch in 0..c {
        let xs = &x[ch * n..(ch + 1) * n];
        let gys = &gy[ch * n..(ch + 1) * n];
        let (m, inv) = (mean[ch], inv_std[ch]);
        let g = gamma.map_or(1.0, |g| g[ch]);
        let sum_gy: f32 = gys.iter().sum();
        let sum_gy_xhat: f32 = xs.iter().zip(gys).map(|(v, d)| (v - m) * inv * d).sum();
        gg[ch] = sum_gy_xhat;
        gb[ch] = sum_gy;
        let out = &mut gx[ch * n..(ch + 1) * n];
        match mode {
            BnMode::Infer => {
                for (o, d) in out.iter_mut().zip(gys) {
                    *o = d * g * inv;
                }
            }
            BnMode::Train => {
                let k = g * inv / n as f32;
                for ((o, d), v) in out.iter_mut().zip(gys).zip(xs) {
                    let xhat = (v - m) * inv;
                    *o = k * (n as f32 * d - sum_gy - xhat * sum_gy_xhat);
                }
            }
        }
    }
    (gx, gg, gb)
}
