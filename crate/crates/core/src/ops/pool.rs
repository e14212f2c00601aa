//! Temporal pooling over `C×T` feature maps.

use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;

/// Floor applied to the variance before the square root in [`stats_pool`].
pub const STATS_VAR_FLOOR: f32 = 1e-10;

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [c, t] => Ok((c, t)),
        ref s => Err(config_err!("expected a C×T tensor, got {s:?}")),
    }
}

/// Per-channel mean over time: `C×T → C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, t) = dims(x)?;
    let data = x.data().chunks_exact(t).map(|r| r.iter().sum::<f32>() / t as f32).collect();
    Ok(Tensor::from_parts(vec![c], data))
}

/// Fixed-length segmentation of `[0, frames)`.
///
/// Boundaries sit at multiples of `segment_length` and end with `frames`; the
/// last segment holds the remainder (1..=segment_length frames).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<usize>,
}

impl Segments {
    pub fn new(frames: usize, segment_length: usize) -> Result<Self> {
        if frames == 0 || segment_length == 0 {
            return Err(input_err!("segmentation needs frames ≥ 1 and segment_length ≥ 1"));
        }
        let mut bounds: Vec<usize> = (0..frames).step_by(segment_length).collect();
        bounds.push(frames);
        Ok(Segments { bounds })
    }

    /// `s_0 = 0 < s_1 < … < s_K = T`.
    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn frames(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }
}

#[derive(Clone, Debug)]
pub struct SegmentPooling {
    pub segments: Segments,
    /// `C×K`: column `k` is the mean of segment `k`.
    pub embeddings: Tensor,
}

pub fn segment_avg_pool(x: &Tensor, segment_length: usize) -> Result<SegmentPooling> {
    let (_, t) = dims(x)?;
    let segments = Segments::new(t, segment_length)?;
    let embeddings = segment_means(x, &segments)?;
    Ok(SegmentPooling { segments, embeddings })
}

/// `C×T → C×K` means over the given segments.
pub fn segment_means(x: &Tensor, segments: &Segments) -> Result<Tensor> {
    let (c, t) = dims(x)?;
    if segments.frames() != t {
        return Err(config_err!("segments cover {} frames, input has {t}", segments.frames()));
    }
    let k = segments.count();
    let mut out = Vec::with_capacity(c * k);
    for row in x.data().chunks_exact(t) {
        out.extend(segments.ranges().map(|r| {
            let n = r.len() as f32;
            row[r].iter().sum::<f32>() / n
        }));
    }
    Ok(Tensor::from_parts(vec![c, k], out))
}

/// Broadcast each segment column back over its frames: `C×K → C×T`.
pub fn expand_segments(x: &Tensor, segments: &Segments) -> Result<Tensor> {
    let (c, k) = dims(x)?;
    if k != segments.count() {
        return Err(config_err!("{k} segment columns for {} segments", segments.count()));
    }
    let t = segments.frames();
    let mut out = Vec::with_capacity(c * t);
    for row in x.data().chunks_exact(k) {
        for (v, r) in row.iter().zip(segments.ranges()) {
            out.extend(std::iter::repeat_n(*v, r.len()));
        }
    }
    Ok(Tensor::from_parts(vec![c, t], out))
}

/// Per-channel mean and population standard deviation, concatenated: `C×T → 2C`.
pub fn stats_pool(x: &Tensor) -> Result<Tensor> {
    let (c, t) = dims(x)?;
    let mut mean = Vec::with_capacity(2 * c);
    let mut std = Vec::with_capacity(c);
    for row in x.data().chunks_exact(t) {
        let m = row.iter().sum::<f32>() / t as f32;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / t as f32;
        mean.push(m);
        std.push(var.max(STATS_VAR_FLOOR).sqrt());
    }
    mean.extend(std);
    Ok(Tensor::from_parts(vec![2 * c], mean))
}
