//! Network building blocks. Each layer owns only parameter handles; values
//! live in the model's [`ParamStore`] and are read through the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::ops::{self, BnMode, Conv1dSpec, Conv2dSpec, Segments, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::config::{BlockConfig, CamConfig, FcmConfig};

/// Registers parameters in a store with seeded initialization: Kaiming-uniform
/// (fan-in, ReLU gain) for weights, zeros for biases, unit/zero batch norm.
pub struct ParamBuilder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> ParamBuilder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        ParamBuilder { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f32).sqrt();
        let value = Tensor::rand_uniform(shape.to_vec(), -bound, bound, &mut self.rng);
        self.store.add_param(name, value)
    }

    pub fn bias(&mut self, name: String, len: usize) -> Result<ParamId> {
        self.store.add_param(name, Tensor::zeros([len]))
    }

    pub fn batchnorm(&mut self, prefix: &str, channels: usize, affine: bool) -> Result<BatchNorm> {
        let (gamma, beta) = if affine {
            (
                Some(self.store.add_param(format!("{prefix}.weight"), Tensor::full([channels], 1.0))?),
                Some(self.store.add_param(format!("{prefix}.bias"), Tensor::zeros([channels]))?),
            )
        } else {
            (None, None)
        };
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean: self.store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels]))?,
            running_var: self.store.add_buffer(format!("{prefix}.running_var"), Tensor::full([channels], 1.0))?,
            channels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let store = tape.store()?;
        let gamma = self.gamma.map(|id| tape.param(id)).transpose()?;
        let beta = self.beta.map(|id| tape.param(id)).transpose()?;
        let rm = &store.buffer(self.running_mean).value;
        let rv = &store.buffer(self.running_var).value;
        let (y, stats) = tape.batchnorm(x, gamma, beta, rm, rv, mode, DEFAULT_EPS)?;
        if let Some(stats) = stats {
            let mut mean = rm.clone();
            let mut var = rv.clone();
            ops::update_running(&mut mean, &stats.mean, DEFAULT_MOMENTUM);
            ops::update_running(&mut var, &stats.var, DEFAULT_MOMENTUM);
            tape.record_buffer_update(self.running_mean, mean);
            tape.record_buffer_update(self.running_var, var);
        }
        Ok(y)
    }

    /// Batch norm followed by ReLU.
    pub fn forward_relu(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let y = self.forward(tape, x, mode)?;
        tape.relu(y)
    }

    pub fn num_params(&self) -> usize {
        if self.gamma.is_some() {
            2 * self.channels
        } else {
            0
        }
    }
}

/// Bias-free 2-D convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct Conv2dBn {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub spec: Conv2dSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2dBn {
    fn new(b: &mut ParamBuilder<'_>, prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride_f: usize) -> Result<Self> {
        let pad = kernel / 2;
        Ok(Conv2dBn {
            weight: b.weight(format!("{prefix}.conv.weight"), &[c_out, c_in, kernel, kernel])?,
            bn: b.batchnorm(&format!("{prefix}.bn"), c_out, true)?,
            spec: Conv2dSpec::new(stride_f, 1, pad, pad),
            c_in,
            c_out,
            kernel,
        })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let y = tape.conv2d(x, w, None, self.spec)?;
        self.bn.forward(tape, y, mode)
    }
}

/// Two 3×3 conv-BN stages with an identity shortcut, or a strided 1×1
/// conv-BN shortcut when the block downsamples frequency.
#[derive(Clone, Debug)]
pub struct ResBlock2d {
    pub conv1: Conv2dBn,
    pub conv2: Conv2dBn,
    pub shortcut: Option<Conv2dBn>,
    pub stride_f: usize,
}

impl ResBlock2d {
    fn new(b: &mut ParamBuilder<'_>, prefix: &str, channels: usize, kernel: usize, stride_f: usize) -> Result<Self> {
        let shortcut = if stride_f != 1 {
            Some(Conv2dBn::new(b, &format!("{prefix}.shortcut"), channels, channels, 1, stride_f)?)
        } else {
            None
        };
        Ok(ResBlock2d {
            conv1: Conv2dBn::new(b, &format!("{prefix}.conv1"), channels, channels, kernel, stride_f)?,
            conv2: Conv2dBn::new(b, &format!("{prefix}.conv2"), channels, channels, kernel, 1)?,
            shortcut,
            stride_f,
        })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.conv1.forward(tape, x, mode)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x, mode)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        tape.relu(y)
    }
}

/// 2-D residual front-end. Input `F×T`, output `(channels·F/8)×T` for the
/// default strides.
#[derive(Clone, Debug)]
pub struct Fcm {
    pub stem: Conv2dBn,
    pub blocks: Vec<ResBlock2d>,
    pub feat_dim: usize,
}

impl Fcm {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, cfg: &FcmConfig, feat_dim: usize) -> Result<Self> {
        let stem = Conv2dBn::new(b, &format!("{prefix}.stem"), 1, cfg.channels, cfg.kernel, 1)?;
        let blocks = cfg
            .freq_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| ResBlock2d::new(b, &format!("{prefix}.layer{}", i + 1), cfg.channels, cfg.kernel, s))
            .collect::<Result<_>>()?;
        Ok(Fcm { stem, blocks, feat_dim })
    }

    /// Runs the stem and each residual block, returning every intermediate
    /// `C×F×T` map (stem output first) followed by the flattened output.
    pub fn forward_traced(&self, tape: &mut Tape<'_>, features: Var, mode: BnMode) -> Result<(Vec<Var>, Var)> {
        let [f, t] = *tape.shape(features) else {
            return Err(config_err!("features must be F×T, got {:?}", tape.shape(features)));
        };
        if f != self.feat_dim {
            return Err(config_err!("features have {f} frequency bins, model expects {}", self.feat_dim));
        }
        let x = tape.reshape(features, &[1, f, t])?;
        let x = self.stem.forward(tape, x, mode)?;
        let mut x = tape.relu(x)?;
        let mut trace = vec![x];
        for block in &self.blocks {
            x = block.forward(tape, x, mode)?;
            trace.push(x);
        }
        let [c, fo, to] = *tape.shape(x) else { unreachable!() };
        let flat = tape.reshape(x, &[c * fo, to])?;
        Ok((trace, flat))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, features: Var, mode: BnMode) -> Result<Var> {
        Ok(self.forward_traced(tape, features, mode)?.1)
    }
}

/// Conv1d → BN → ReLU, used for the subsampling input layer.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub spec: Conv1dSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl TdnnLayer {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(TdnnLayer {
            weight: b.weight(format!("{prefix}.linear.weight"), &[c_out, c_in, kernel])?,
            bn: b.batchnorm(&format!("{prefix}.bn"), c_out, true)?,
            spec: Conv1dSpec::new(stride, 1, kernel / 2),
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let y = tape.conv1d(x, w, None, self.spec)?;
        self.bn.forward_relu(tape, y, mode)
    }
}

/// Context-aware mask predictor: `σ(W2·relu(W1·e + b1) + b2)` evaluated once
/// per segment, where `e` is the global mean plus (optionally) the segment mean.
#[derive(Clone, Debug)]
pub struct CamModule {
    /// `H×C`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `C'×H`
    pub w2: ParamId,
    pub b2: ParamId,
    pub segment_length: usize,
    pub segment_pooling: bool,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

impl CamModule {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        segment_length: usize,
        segment_pooling: bool,
    ) -> Result<Self> {
        Ok(CamModule {
            w1: b.weight(format!("{prefix}.linear1.weight"), &[hidden, in_channels])?,
            b1: b.bias(format!("{prefix}.linear1.bias"), hidden)?,
            w2: b.weight(format!("{prefix}.linear2.weight"), &[out_channels, hidden])?,
            b2: b.bias(format!("{prefix}.linear2.bias"), out_channels)?,
            segment_length,
            segment_pooling,
            in_channels,
            hidden,
            out_channels,
        })
    }

    /// Segmentation used for an input of `frames` frames; a single segment
    /// when segment pooling is off.
    pub fn segments(&self, frames: usize) -> Result<Segments> {
        if self.segment_pooling {
            Segments::new(frames, self.segment_length)
        } else {
            Segments::new(frames, frames)
        }
    }

    /// Mask `C'×T` from the global embedding `e_g: C` and, with segment
    /// pooling, the per-segment embeddings `e_s: C×K`.
    pub fn mask(&self, tape: &mut Tape<'_>, e_g: Var, e_s: Option<Var>, segments: &Segments) -> Result<Var> {
        let c = self.in_channels;
        if tape.value(e_g).len() != c {
            return Err(config_err!("global embedding has {} channels, mask expects {c}", tape.value(e_g).len()));
        }
        let context = match e_s {
            Some(es) => {
                if tape.shape(es) != [c, segments.count()] {
                    return Err(config_err!(
                        "segment embeddings have shape {:?}, expected [{c}, {}]",
                        tape.shape(es),
                        segments.count()
                    ));
                }
                tape.add_column(es, e_g)?
            }
            None => {
                let col = tape.reshape(e_g, &[c, 1])?;
                if segments.count() == 1 {
                    col
                } else {
                    let zeros = tape.input(Tensor::zeros([c, segments.count()]));
                    tape.add_column(zeros, e_g)?
                }
            }
        };
        let (w1, b1, w2, b2) = (tape.param(self.w1)?, tape.param(self.b1)?, tape.param(self.w2)?, tape.param(self.b2)?);
        let h = tape.conv1d(context, w1, Some(b1), Conv1dSpec::POINTWISE)?;
        let h = tape.relu(h)?;
        let m = tape.conv1d(h, w2, Some(b2), Conv1dSpec::POINTWISE)?;
        let m = tape.sigmoid(m)?;
        tape.expand_segments(m, segments)
    }

    /// Pools `x: C×T` and predicts its mask.
    pub fn mask_for(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let frames = tape.shape(x)[1];
        let segments = self.segments(frames)?;
        let e_g = tape.mean_time(x)?;
        let e_s = if self.segment_pooling { Some(tape.segment_mean(x, &segments)?) } else { None };
        self.mask(tape, e_g, e_s, &segments)
    }
}

/// Evaluates a CAM mask outside any training graph.
pub fn cam_mask(store: &ParamStore, cam: &CamModule, e_g: &Tensor, e_s: Option<&Tensor>, segments: &Segments) -> Result<Tensor> {
    let mut tape = Tape::inference(store);
    let g = tape.input(e_g.clone());
    let s = e_s.map(|t| tape.input(t.clone()));
    let m = cam.mask(&mut tape, g, s, segments)?;
    Ok(tape.value(m).clone())
}

/// One densely connected TDNN layer:
/// `X = W_fnn·relu(BN(S))`, `F = conv(relu(BN(X)))`, `F̃ = F ⊙ M`, output `[S; F̃]`.
#[derive(Clone, Debug)]
pub struct DenseTdnnLayer {
    pub bn1: BatchNorm,
    /// `bottleneck × C_in` pointwise weights.
    pub fnn: ParamId,
    pub bn2: BatchNorm,
    /// `k × bottleneck × kernel`.
    pub tdnn: ParamId,
    pub tdnn_spec: Conv1dSpec,
    pub cam: Option<CamModule>,
    pub in_channels: usize,
    pub growth_rate: usize,
    pub bottleneck: usize,
    pub kernel: usize,
}

impl DenseTdnnLayer {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        in_channels: usize,
        block: &BlockConfig,
        cam: Option<&CamConfig>,
        segment_length: usize,
    ) -> Result<Self> {
        let bn = block.bottleneck_channels;
        let k = block.growth_rate;
        let bn1 = b.batchnorm(&format!("{prefix}.nonlinear1.bn"), in_channels, true)?;
        let fnn = b.weight(format!("{prefix}.linear1.weight"), &[bn, in_channels])?;
        let bn2 = b.batchnorm(&format!("{prefix}.nonlinear2.bn"), bn, true)?;
        let tdnn = b.weight(format!("{prefix}.cam_layer.linear_local.weight"), &[k, bn, block.kernel])?;
        let cam = cam
            .map(|c| {
                CamModule::new(b, &format!("{prefix}.cam_layer"), bn, bn / c.reduction, k, segment_length, c.segment_pooling)
            })
            .transpose()?;
        Ok(DenseTdnnLayer {
            bn1,
            fnn,
            bn2,
            tdnn,
            tdnn_spec: Conv1dSpec::same(block.kernel, block.dilation),
            cam,
            in_channels,
            growth_rate: k,
            bottleneck: bn,
            kernel: block.kernel,
        })
    }

    /// Returns `(X, F, F̃)` without the concatenation.
    pub fn forward_parts(&self, tape: &mut Tape<'_>, s: Var, mode: BnMode) -> Result<(Var, Var, Var)> {
        let c = tape.shape(s)[0];
        if c != self.in_channels {
            return Err(config_err!("D-TDNN layer expects {} channels, got {c}", self.in_channels));
        }
        let h = self.bn1.forward_relu(tape, s, mode)?;
        let w = tape.param(self.fnn)?;
        let h = tape.conv1d(h, w, None, Conv1dSpec::POINTWISE)?;
        let x = self.bn2.forward_relu(tape, h, mode)?;
        let w = tape.param(self.tdnn)?;
        let f = tape.conv1d(x, w, None, self.tdnn_spec)?;
        let refined = match &self.cam {
            Some(cam) => {
                let m = cam.mask_for(tape, x)?;
                tape.mul(f, m)?
            }
            None => f,
        };
        Ok((x, f, refined))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, s: Var, mode: BnMode) -> Result<Var> {
        let (_, _, refined) = self.forward_parts(tape, s, mode)?;
        tape.concat(&[s, refined])
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth_rate
    }
}

/// BN → ReLU → pointwise conv compressing the channel count.
#[derive(Clone, Debug)]
pub struct TransitLayer {
    pub bn: BatchNorm,
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl TransitLayer {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(TransitLayer {
            bn: b.batchnorm(&format!("{prefix}.nonlinear.bn"), c_in, true)?,
            weight: b.weight(format!("{prefix}.linear.weight"), &[c_out, c_in])?,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.bn.forward_relu(tape, x, mode)?;
        let w = tape.param(self.weight)?;
        tape.conv1d(h, w, None, Conv1dSpec::POINTWISE)
    }
}

/// BN → ReLU → statistics pooling → linear → non-affine BN.
#[derive(Clone, Debug)]
pub struct EmbeddingHead {
    pub out_nonlinear: BatchNorm,
    pub dense: ParamId,
    pub dense_bn: BatchNorm,
    pub channels: usize,
    pub embedding_dim: usize,
}

impl EmbeddingHead {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, channels: usize, embedding_dim: usize) -> Result<Self> {
        Ok(EmbeddingHead {
            out_nonlinear: b.batchnorm(&format!("{prefix}.out_nonlinear.bn"), channels, true)?,
            dense: b.weight(format!("{prefix}.dense.linear.weight"), &[embedding_dim, 2 * channels])?,
            dense_bn: b.batchnorm(&format!("{prefix}.dense.bn"), embedding_dim, false)?,
            channels,
            embedding_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.out_nonlinear.forward_relu(tape, x, mode)?;
        let stats = tape.stats_pool(h)?;
        let w = tape.param(self.dense)?;
        let e = tape.linear(stats, w, None)?;
        self.dense_bn.forward(tape, e, mode)
    }
}
