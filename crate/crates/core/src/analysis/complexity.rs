//! Analytic parameter and operation counts.
//!
//! MACs count the multiply-accumulates of convolutions and linear maps,
//! including taps that fall on zero padding. FLOPs use the convention
//! `2·MACs + one add per bias element per position`, two per element for
//! batch norm, and one per element for activations, element-wise sums and
//! products, and each pooling reduction.

use std::fmt::Write as _;

use crate::error::Result;
use crate::features::FbankConfig;
use crate::model::{Conv2dBn, DenseTdnnLayer, Fcm, Model};
use crate::ops::conv_out_len;
use crate::params::ParamStore;

/// Geometry of one primitive operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpGeom {
    Conv1d { c_in: usize, c_out: usize, kernel: usize, t_out: usize, bias: bool },
    Conv2d { c_in: usize, c_out: usize, kf: usize, kt: usize, f_out: usize, t_out: usize, bias: bool },
    Linear { d_in: usize, d_out: usize, positions: usize, bias: bool },
    BatchNorm { elements: usize },
    /// ReLU or sigmoid.
    Activation { elements: usize },
    /// Element-wise add or multiply of two tensors.
    Elementwise { elements: usize },
    /// One reduction pass over `elements` inputs (a mean, or a variance).
    Pool { elements: usize },
}

impl OpGeom {
    pub fn macs(&self) -> u64 {
        let m = match *self {
            OpGeom::Conv1d { c_in, c_out, kernel, t_out, .. } => c_out * c_in * kernel * t_out,
            OpGeom::Conv2d { c_in, c_out, kf, kt, f_out, t_out, .. } => c_out * c_in * kf * kt * f_out * t_out,
            OpGeom::Linear { d_in, d_out, positions, .. } => d_out * d_in * positions,
            _ => 0,
        };
        m as u64
    }

    pub fn flops(&self) -> u64 {
        let extra = match *self {
            OpGeom::Conv1d { c_out, t_out, bias, .. } => usize::from(bias) * c_out * t_out,
            OpGeom::Conv2d { c_out, f_out, t_out, bias, .. } => usize::from(bias) * c_out * f_out * t_out,
            OpGeom::Linear { d_out, positions, bias, .. } => usize::from(bias) * d_out * positions,
            OpGeom::BatchNorm { elements } => 2 * elements,
            OpGeom::Activation { elements } | OpGeom::Elementwise { elements } | OpGeom::Pool { elements } => elements,
        };
        2 * self.macs() + extra as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSpec {
    pub seconds: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerRow>,
    pub input: Option<InputSpec>,
    pub flop_convention: String,
}

pub const DEFAULT_CONVENTION: &str = "flops = 2*macs + bias adds; batchnorm 2/element; activation, element-wise and pooling 1/element";

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// `layer<TAB>params<TAB>macs<TAB>flops`, one line per row plus a `total` line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tparams\tmacs\tflops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.name, r.params, r.macs, r.flops);
        }
        let _ = writeln!(s, "total\t{}\t{}\t{}", self.total_params(), self.total_macs(), self.total_flops());
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>15}  {:>15}", "layer", "params", "MACs", "FLOPs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>15}  {:>15}", r.name, r.params, r.macs, r.flops);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>15}  {:>15}",
            "total",
            self.total_params(),
            self.total_macs(),
            self.total_flops()
        );
        let _ = writeln!(s, "total params: {:.2} M", self.total_params() as f64 / 1e6);
        if let Some(input) = self.input {
            let _ = writeln!(
                s,
                "input: {:.2} s ({} frames); MACs {:.3} G; FLOPs {:.3} G",
                input.seconds,
                input.frames,
                self.total_macs() as f64 / 1e9,
                self.total_flops() as f64 / 1e9
            );
            let _ = writeln!(s, "convention: {}", self.flop_convention);
        }
        s
    }
}

/// Frames produced by the default front-end for `seconds` of audio.
pub fn frames_for_seconds(seconds: f64) -> Option<usize> {
    let cfg = FbankConfig::default();
    cfg.num_frames((seconds * cfg.sample_rate as f64).round() as usize)
}

/// Audio duration spanned by `frames` default frames.
pub fn seconds_for_frames(frames: usize) -> f64 {
    let cfg = FbankConfig::default();
    (cfg.window_samples() + frames.saturating_sub(1) * cfg.hop_samples()) as f64 / cfg.sample_rate as f64
}

/// Per-layer operation lists for one forward pass over `frames` frames.
pub fn layer_ops(model: &Model, frames: usize) -> Result<Vec<(String, Vec<OpGeom>)>> {
    let cfg = model.config();
    let mut layers = Vec::new();
    if let Some(fcm) = &model.fcm {
        fcm_ops(fcm, cfg.feat_dim, frames, &mut layers)?;
    }
    let it = &model.input_tdnn;
    let t = conv_out_len(frames, it.kernel, it.spec.stride, 1, it.spec.padding)?;
    layers.push((
        "xvector.tdnn".to_string(),
        vec![
            OpGeom::Conv1d { c_in: it.c_in, c_out: it.c_out, kernel: it.kernel, t_out: t, bias: false },
            OpGeom::BatchNorm { elements: it.c_out * t },
            OpGeom::Activation { elements: it.c_out * t },
        ],
    ));
    for (i, block) in model.blocks.iter().enumerate() {
        for (j, layer) in block.layers.iter().enumerate() {
            layers.push((format!("xvector.block{}.tdnnd{}", i + 1, j + 1), dense_layer_ops(layer, t)?));
        }
        let tr = &block.transit;
        layers.push((
            format!("xvector.transit{}", i + 1),
            vec![
                OpGeom::BatchNorm { elements: tr.c_in * t },
                OpGeom::Activation { elements: tr.c_in * t },
                OpGeom::Conv1d { c_in: tr.c_in, c_out: tr.c_out, kernel: 1, t_out: t, bias: false },
            ],
        ));
    }
    let head = &model.head;
    let c = head.channels;
    layers.push((
        "xvector.out_nonlinear".to_string(),
        vec![OpGeom::BatchNorm { elements: c * t }, OpGeom::Activation { elements: c * t }],
    ));
    layers.push(("xvector.stats".to_string(), vec![OpGeom::Pool { elements: c * t }, OpGeom::Pool { elements: c * t }]));
    layers.push((
        "xvector.dense".to_string(),
        vec![
            OpGeom::Linear { d_in: 2 * c, d_out: head.embedding_dim, positions: 1, bias: false },
            OpGeom::BatchNorm { elements: head.embedding_dim },
        ],
    ));
    Ok(layers)
}

fn fcm_ops(fcm: &Fcm, feat_dim: usize, frames: usize, layers: &mut Vec<(String, Vec<OpGeom>)>) -> Result<()> {
    let conv = |c: &Conv2dBn, f_in: usize| -> Result<(usize, Vec<OpGeom>)> {
        let f_out = conv_out_len(f_in, c.kernel, c.spec.stride_f, 1, c.spec.padding_f)?;
        let t_out = conv_out_len(frames, c.kernel, c.spec.stride_t, 1, c.spec.padding_t)?;
        let n = c.c_out * f_out * t_out;
        Ok((
            f_out,
            vec![
                OpGeom::Conv2d { c_in: c.c_in, c_out: c.c_out, kf: c.kernel, kt: c.kernel, f_out, t_out, bias: false },
                OpGeom::BatchNorm { elements: n },
            ],
        ))
    };
    let (mut f, mut ops) = conv(&fcm.stem, feat_dim)?;
    let c = fcm.stem.c_out;
    ops.push(OpGeom::Activation { elements: c * f * frames });
    layers.push(("head.stem".to_string(), ops));
    for (i, block) in fcm.blocks.iter().enumerate() {
        let (f_out, mut ops) = conv(&block.conv1, f)?;
        ops.push(OpGeom::Activation { elements: c * f_out * frames });
        ops.extend(conv(&block.conv2, f_out)?.1);
        if let Some(sc) = &block.shortcut {
            ops.extend(conv(sc, f)?.1);
        }
        let n = c * f_out * frames;
        ops.push(OpGeom::Elementwise { elements: n });
        ops.push(OpGeom::Activation { elements: n });
        layers.push((format!("head.layer{}", i + 1), ops));
        f = f_out;
    }
    Ok(())
}

fn dense_layer_ops(layer: &DenseTdnnLayer, t: usize) -> Result<Vec<OpGeom>> {
    let (c, bn, k) = (layer.in_channels, layer.bottleneck, layer.growth_rate);
    let mut ops = vec![
        OpGeom::BatchNorm { elements: c * t },
        OpGeom::Activation { elements: c * t },
        OpGeom::Conv1d { c_in: c, c_out: bn, kernel: 1, t_out: t, bias: false },
        OpGeom::BatchNorm { elements: bn * t },
        OpGeom::Activation { elements: bn * t },
        OpGeom::Conv1d { c_in: bn, c_out: k, kernel: layer.kernel, t_out: t, bias: false },
    ];
    if let Some(cam) = &layer.cam {
        let segments = cam.segments(t)?;
        let ks = segments.count();
        ops.push(OpGeom::Pool { elements: bn * t });
        if cam.segment_pooling {
            ops.push(OpGeom::Pool { elements: bn * t });
            ops.push(OpGeom::Elementwise { elements: bn * ks });
        }
        ops.extend([
            OpGeom::Conv1d { c_in: bn, c_out: cam.hidden, kernel: 1, t_out: ks, bias: true },
            OpGeom::Activation { elements: cam.hidden * ks },
            OpGeom::Conv1d { c_in: cam.hidden, c_out: k, kernel: 1, t_out: ks, bias: true },
            OpGeom::Activation { elements: k * ks },
            OpGeom::Elementwise { elements: k * t },
        ]);
    }
    Ok(ops)
}

/// Parameters whose dotted name starts with `prefix.`.
fn params_under(store: &ParamStore, prefix: &str) -> u64 {
    store
        .params()
        .iter()
        .filter(|p| p.name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.')))
        .map(|p| p.numel() as u64)
        .sum()
}

/// Per-layer trainable parameter counts. Batch-norm running statistics are
/// buffers and are not counted.
pub fn count_params(model: &Model) -> Result<ComplexityReport> {
    let frames = model.config().min_frames();
    let mut report = count_flops(model, frames)?;
    for r in &mut report.rows {
        r.macs = 0;
        r.flops = 0;
    }
    report.input = None;
    Ok(report)
}

/// Analytic per-layer parameters, MACs and FLOPs for `frames` input frames.
pub fn count_flops(model: &Model, frames: usize) -> Result<ComplexityReport> {
    let min = model.config().min_frames();
    if frames < min {
        return Err(crate::error::input_err!("{frames} frames is below the model minimum of {min}"));
    }
    let store = model.store();
    let mut rows: Vec<LayerRow> = layer_ops(model, frames)?
        .into_iter()
        .map(|(name, ops)| LayerRow {
            params: params_under(store, &name),
            macs: ops.iter().map(OpGeom::macs).sum(),
            flops: ops.iter().map(OpGeom::flops).sum(),
            name,
        })
        .collect();
    let counted: u64 = rows.iter().map(|r| r.params).sum();
    let total = store.num_params() as u64;
    if counted != total {
        rows.push(LayerRow { name: "other".into(), params: total - counted, macs: 0, flops: 0 });
    }
    Ok(ComplexityReport {
        rows,
        input: Some(InputSpec { seconds: seconds_for_frames(frames), frames }),
        flop_convention: DEFAULT_CONVENTION.to_string(),
    })
}

/// How a single "FLOPs" figure is derived from the per-op counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    /// One multiply-accumulate counted as one operation.
    MacsOnce,
    /// Multiply and add counted separately.
    MacsTwice,
    /// [`DEFAULT_CONVENTION`].
    Full,
}

impl FlopConvention {
    pub const ALL: [FlopConvention; 3] = [FlopConvention::MacsOnce, FlopConvention::MacsTwice, FlopConvention::Full];

    pub fn name(self) -> &'static str {
        match self {
            FlopConvention::MacsOnce => "MACx1",
            FlopConvention::MacsTwice => "MACx2",
            FlopConvention::Full => "full",
        }
    }

    pub fn apply(self, report: &ComplexityReport) -> u64 {
        match self {
            FlopConvention::MacsOnce => report.total_macs(),
            FlopConvention::MacsTwice => 2 * report.total_macs(),
            FlopConvention::Full => report.total_flops(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepEntry {
    pub seconds: f64,
    pub frames: usize,
    pub convention: FlopConvention,
    pub operations: u64,
}

impl SweepEntry {
    pub fn relative_delta(&self, target: f64) -> f64 {
        (self.operations as f64 - target) / target
    }
}

/// Evaluates every convention at each input duration.
pub fn convention_sweep(model: &Model, durations: &[f64]) -> Result<Vec<SweepEntry>> {
    let mut out = Vec::new();
    for &seconds in durations {
        let frames = frames_for_seconds(seconds)
            .ok_or_else(|| crate::error::input_err!("{seconds} s is shorter than one analysis window"))?;
        let report = count_flops(model, frames)?;
        for convention in FlopConvention::ALL {
            out.push(SweepEntry { seconds, frames, convention, operations: convention.apply(&report) });
        }
    }
    Ok(out)
}

/// Entry with the smallest relative distance to `target`.
pub fn closest_entry(entries: &[SweepEntry], target: f64) -> Option<SweepEntry> {
    entries.iter().copied().min_by(|a, b| a.relative_delta(target).abs().total_cmp(&b.relative_delta(target).abs()))
}

/// MACs actually executed by a recorded forward pass over `frames` frames.
pub fn executed_macs(model: &Model, frames: usize) -> Result<u64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = crate::tensor::Tensor::rand_uniform([model.config().feat_dim, frames], -1.0, 1.0, &mut rng);
    let mut tape = crate::autograd::Tape::inference(model.store());
    let v = tape.input(x);
    model.forward(&mut tape, v, crate::ops::BnMode::Infer)?;
    Ok(tape.executed_macs())
}
