//! Architecture descriptions, presets and the `key = value` config format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::ops::conv_out_len;

#[derive(Clone, Debug, PartialEq)]
pub struct FcmConfig {
    pub channels: usize,
    /// Frequency stride of each residual block.
    pub freq_strides: Vec<usize>,
    pub kernel: usize,
}

impl FcmConfig {
    pub fn total_freq_downsampling(&self) -> usize {
        self.freq_strides.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputTdnnConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub bottleneck_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamConfig {
    /// Hidden width of the mask predictor is `bottleneck_channels / reduction`.
    pub reduction: usize,
    /// Add segment-level means to the global mean before mask prediction.
    pub segment_pooling: bool,
}

/// Which feature map feeds statistics pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolInput {
    LastTransition,
    /// Channel concatenation of every transition output.
    AllTransitions,
}

impl PoolInput {
    fn as_str(self) -> &'static str {
        match self {
            PoolInput::LastTransition => "last_transition",
            PoolInput::AllTransitions => "all_transitions",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub fcm: Option<FcmConfig>,
    pub input_tdnn: InputTdnnConfig,
    pub blocks: Vec<BlockConfig>,
    pub cam: Option<CamConfig>,
    pub transition_compression: f64,
    pub segment_length: usize,
    pub embedding_dim: usize,
    pub pool_input: PoolInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// FCM front-end + 12/24/16-layer D-TDNN with per-layer context-aware masking.
    Campp,
    /// Two-block (6/12 layers, k = 64) D-TDNN without masking or FCM.
    DtdnnVanilla,
    /// The deeper, narrower backbone of CAM++ without masking or FCM.
    DtdnnL,
    /// Vanilla D-TDNN with global + segment pooled masking in every layer.
    DtdnnCamGpSp,
    /// Small CAM++-shaped network for tests and toy training.
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Campp, Preset::DtdnnVanilla, Preset::DtdnnL, Preset::DtdnnCamGpSp, Preset::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Campp => "campp",
            Preset::DtdnnVanilla => "dtdnn_vanilla",
            Preset::DtdnnL => "dtdnn_l",
            Preset::DtdnnCamGpSp => "dtdnn_cam_gp_sp",
            Preset::Tiny => "tiny",
        }
    }

    pub fn config(self) -> ModelConfig {
        let block = |num_layers, growth_rate, bottleneck_channels, dilation| BlockConfig {
            num_layers,
            growth_rate,
            bottleneck_channels,
            kernel: 3,
            dilation,
        };
        let cam = Some(CamConfig { reduction: 2, segment_pooling: true });
        let deep = vec![block(12, 32, 128, 1), block(24, 32, 128, 2), block(16, 32, 128, 2)];
        let vanilla = vec![block(6, 64, 128, 1), block(12, 64, 128, 3)];
        let base = ModelConfig {
            feat_dim: 80,
            fcm: Some(FcmConfig { channels: 32, freq_strides: vec![1, 2, 2, 2], kernel: 3 }),
            input_tdnn: InputTdnnConfig { out_channels: 128, kernel: 5, stride: 2 },
            blocks: deep.clone(),
            cam: cam.clone(),
            transition_compression: 0.5,
            segment_length: 100,
            embedding_dim: 512,
            pool_input: PoolInput::LastTransition,
        };
        match self {
            Preset::Campp => base,
            Preset::DtdnnL => ModelConfig { fcm: None, cam: None, ..base },
            Preset::DtdnnVanilla => ModelConfig {
                fcm: None,
                cam: None,
                blocks: vanilla,
                input_tdnn: InputTdnnConfig { stride: 1, ..base.input_tdnn.clone() },
                ..base
            },
            Preset::DtdnnCamGpSp => ModelConfig {
                fcm: None,
                blocks: vanilla,
                input_tdnn: InputTdnnConfig { stride: 1, ..base.input_tdnn.clone() },
                ..base
            },
            Preset::Tiny => ModelConfig {
                fcm: Some(FcmConfig { channels: 4, freq_strides: vec![1, 2, 2, 2], kernel: 3 }),
                input_tdnn: InputTdnnConfig { out_channels: 32, kernel: 5, stride: 2 },
                blocks: vec![block(2, 8, 32, 1), block(2, 8, 32, 2)],
                segment_length: 16,
                embedding_dim: 32,
                ..base
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| config_err!("unknown preset {s:?} (expected one of campp, dtdnn_vanilla, dtdnn_l, dtdnn_cam_gp_sp, tiny)"))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| if v == 0 { Err(config_err!("{what} must be ≥ 1")) } else { Ok(()) };
        positive(self.feat_dim, "feat_dim")?;
        positive(self.embedding_dim, "embedding_dim")?;
        positive(self.segment_length, "segment_length")?;
        positive(self.input_tdnn.out_channels, "input_tdnn.out_channels")?;
        positive(self.input_tdnn.kernel, "input_tdnn.kernel")?;
        positive(self.input_tdnn.stride, "input_tdnn.stride")?;
        if self.input_tdnn.kernel.is_multiple_of(2) {
            return Err(config_err!("input_tdnn.kernel must be odd"));
        }
        if let Some(fcm) = &self.fcm {
            positive(fcm.channels, "fcm.channels")?;
            if fcm.freq_strides.is_empty() || fcm.freq_strides.contains(&0) {
                return Err(config_err!("fcm.freq_strides must be a non-empty list of positive strides"));
            }
            if fcm.kernel % 2 == 0 {
                return Err(config_err!("fcm.kernel must be odd"));
            }
            self.fcm_freq_extents()?;
        }
        if self.blocks.is_empty() {
            return Err(config_err!("at least one D-TDNN block is required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (v, what) in [
                (b.num_layers, "num_layers"),
                (b.growth_rate, "growth_rate"),
                (b.bottleneck_channels, "bottleneck_channels"),
                (b.kernel, "kernel"),
                (b.dilation, "dilation"),
            ] {
                positive(v, &format!("blocks[{i}].{what}"))?;
            }
            if b.kernel % 2 == 0 {
                return Err(config_err!("blocks[{i}].kernel must be odd"));
            }
            if let Some(cam) = &self.cam {
                positive(cam.reduction, "cam.reduction")?;
                if b.bottleneck_channels / cam.reduction == 0 {
                    return Err(config_err!("blocks[{i}]: bottleneck narrower than cam.reduction"));
                }
            }
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(config_err!("transition_compression must be in (0, 1]"));
        }
        Ok(())
    }

    /// Frequency extent before the FCM and after each of its residual blocks.
    pub fn fcm_freq_extents(&self) -> Result<Vec<usize>> {
        let fcm = self.fcm.as_ref().ok_or_else(|| config_err!("model has no FCM"))?;
        let pad = fcm.kernel / 2;
        let mut extents = vec![self.feat_dim];
        let mut f = self.feat_dim;
        for &s in &fcm.freq_strides {
            f = conv_out_len(f, fcm.kernel, s, 1, pad)?;
            extents.push(f);
        }
        Ok(extents)
    }

    /// Channel count entering the input TDNN layer.
    pub fn backbone_input_channels(&self) -> Result<usize> {
        match &self.fcm {
            Some(fcm) => Ok(fcm.channels * self.fcm_freq_extents()?.last().unwrap()),
            None => Ok(self.feat_dim),
        }
    }

    /// Shortest accepted input, in frames: the backbone must see at least two
    /// frames after the input TDNN's subsampling.
    pub fn min_frames(&self) -> usize {
        self.input_tdnn.stride + 1
    }

    pub fn transition_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.transition_compression).floor() as usize).max(1)
    }

    /// Flat `key = value` serialization.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(it: impl Iterator<Item = T>) -> String {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut s = String::from("# camforge model config\n");
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("feat_dim", self.feat_dim.to_string());
        kv("fcm.enabled", self.fcm.is_some().to_string());
        if let Some(fcm) = &self.fcm {
            kv("fcm.channels", fcm.channels.to_string());
            kv("fcm.freq_strides", list(fcm.freq_strides.iter()));
            kv("fcm.kernel", fcm.kernel.to_string());
        }
        kv("input_tdnn.out_channels", self.input_tdnn.out_channels.to_string());
        kv("input_tdnn.kernel", self.input_tdnn.kernel.to_string());
        kv("input_tdnn.stride", self.input_tdnn.stride.to_string());
        kv("blocks.num_layers", list(self.blocks.iter().map(|b| b.num_layers)));
        kv("blocks.growth_rate", list(self.blocks.iter().map(|b| b.growth_rate)));
        kv("blocks.bottleneck_channels", list(self.blocks.iter().map(|b| b.bottleneck_channels)));
        kv("blocks.kernel", list(self.blocks.iter().map(|b| b.kernel)));
        kv("blocks.dilation", list(self.blocks.iter().map(|b| b.dilation)));
        kv("cam.enabled", self.cam.is_some().to_string());
        if let Some(cam) = &self.cam {
            kv("cam.reduction", cam.reduction.to_string());
            kv("cam.segment_pooling", cam.segment_pooling.to_string());
        }
        kv("segment_length", self.segment_length.to_string());
        kv("transition_compression", self.transition_compression.to_string());
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("pool_input", self.pool_input.as_str().to_string());
        s
    }

    /// Parses a complete config.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Preset::Campp.config();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Overrides the keys present in `text`, leaving the others untouched.
    /// Block lists must all have the same length after the update.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut block_lists: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut fcm_enabled: Option<bool> = None;
        let mut cam_enabled: Option<bool> = None;
        let mut fcm = self.fcm.clone().unwrap_or(FcmConfig { channels: 32, freq_strides: vec![1, 2, 2, 2], kernel: 3 });
        let mut cam = self.cam.clone().unwrap_or(CamConfig { reduction: 2, segment_pooling: true });

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected `key = value`, got {line:?}")))?;
            let uint = |v: &str| v.parse::<usize>().map_err(|_| perr(format!("{key}: {v:?} is not a non-negative integer")));
            let boolean = |v: &str| v.parse::<bool>().map_err(|_| perr(format!("{key}: {v:?} is not true/false")));
            let uints = |v: &str| v.split(',').map(|p| uint(p.trim())).collect::<Result<Vec<_>>>();
            match key {
                "feat_dim" => self.feat_dim = uint(value)?,
                "fcm.enabled" => fcm_enabled = Some(boolean(value)?),
                "fcm.channels" => fcm.channels = uint(value)?,
                "fcm.freq_strides" => fcm.freq_strides = uints(value)?,
                "fcm.kernel" => fcm.kernel = uint(value)?,
                "input_tdnn.out_channels" => self.input_tdnn.out_channels = uint(value)?,
                "input_tdnn.kernel" => self.input_tdnn.kernel = uint(value)?,
                "input_tdnn.stride" => self.input_tdnn.stride = uint(value)?,
                "blocks.num_layers" | "blocks.growth_rate" | "blocks.bottleneck_channels" | "blocks.kernel"
                | "blocks.dilation" => block_lists.push((key.to_string(), uints(value)?, line_no)),
                "cam.enabled" => cam_enabled = Some(boolean(value)?),
                "cam.reduction" => cam.reduction = uint(value)?,
                "cam.segment_pooling" => cam.segment_pooling = boolean(value)?,
                "segment_length" => self.segment_length = uint(value)?,
                "transition_compression" => {
                    self.transition_compression =
                        value.parse().map_err(|_| perr(format!("{key}: {value:?} is not a number")))?
                }
                "embedding_dim" => self.embedding_dim = uint(value)?,
                "pool_input" => {
                    self.pool_input = match value {
                        "last_transition" => PoolInput::LastTransition,
                        "all_transitions" => PoolInput::AllTransitions,
                        _ => return Err(perr(format!("pool_input: unknown value {value:?}"))),
                    }
                }
                _ => return Err(perr(format!("unknown key {key:?}"))),
            }
        }

        if fcm_enabled.unwrap_or(self.fcm.is_some()) {
            self.fcm = Some(fcm);
        } else {
            self.fcm = None;
        }
        if cam_enabled.unwrap_or(self.cam.is_some()) {
            self.cam = Some(cam);
        } else {
            self.cam = None;
        }

        if !block_lists.is_empty() {
            let n = block_lists.iter().map(|(_, v, _)| v.len()).max().unwrap();
            if n != self.blocks.len() {
                if block_lists.len() < 5 {
                    let line = block_lists[0].2;
                    return Err(Error::Parse {
                        line,
                        msg: "changing the number of blocks requires all five blocks.* keys".into(),
                    });
                }
                let template = self.blocks.last().cloned().ok_or_else(|| config_err!("no blocks"))?;
                self.blocks.resize(n, template);
            }
            for (key, values, line) in block_lists {
                if values.len() != n {
                    return Err(Error::Parse { line, msg: format!("{key} lists {} blocks, expected {n}", values.len()) });
                }
                for (b, v) in self.blocks.iter_mut().zip(values) {
                    match key.as_str() {
                        "blocks.num_layers" => b.num_layers = v,
                        "blocks.growth_rate" => b.growth_rate = v,
                        "blocks.bottleneck_channels" => b.bottleneck_channels = v,
                        "blocks.kernel" => b.kernel = v,
                        _ => b.dilation = v,
                    }
                }
            }
        }
        self.validate()
    }
}
