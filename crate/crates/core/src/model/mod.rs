//! CAM++ and D-TDNN speaker embedding networks.

mod config;
mod layers;

use std::path::Path;

pub use config::{BlockConfig, CamConfig, FcmConfig, InputTdnnConfig, ModelConfig, PoolInput, Preset};
pub use layers::{
    cam_mask, BatchNorm, CamModule, Conv2dBn, DenseTdnnLayer, EmbeddingHead, Fcm, ParamBuilder, ResBlock2d, TdnnLayer,
    TransitLayer,
};

use crate::autograd::{Tape, Var};
use crate::error::{input_err, Error, Result};
use crate::ops::BnMode;
use crate::params::{BufferId, ParamStore};
use crate::tensor::Tensor;
use crate::tensor_file;

/// One dense block followed by its transition layer.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseTdnnLayer>,
    pub transit: TransitLayer,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub fcm: Option<Fcm>,
    pub input_tdnn: TdnnLayer,
    pub blocks: Vec<DenseBlock>,
    pub head: EmbeddingHead,
}

impl Model {
    /// Builds a randomly initialized model; the same seed gives the same weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);

        let fcm = config.fcm.as_ref().map(|f| Fcm::new(&mut b, "head", f, config.feat_dim)).transpose()?;
        let mut channels = config.backbone_input_channels()?;
        let it = &config.input_tdnn;
        let input_tdnn = TdnnLayer::new(&mut b, "xvector.tdnn", channels, it.out_channels, it.kernel, it.stride)?;
        channels = it.out_channels;

        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut pooled = 0;
        for (i, block) in config.blocks.iter().enumerate() {
            let mut layers = Vec::with_capacity(block.num_layers);
            for j in 0..block.num_layers {
                let prefix = format!("xvector.block{}.tdnnd{}", i + 1, j + 1);
                let layer = DenseTdnnLayer::new(&mut b, &prefix, channels, block, config.cam.as_ref(), config.segment_length)?;
                channels = layer.out_channels();
                layers.push(layer);
            }
            let out = config.transition_width(channels);
            let transit = TransitLayer::new(&mut b, &format!("xvector.transit{}", i + 1), channels, out)?;
            channels = out;
            pooled += out;
            blocks.push(DenseBlock { layers, transit });
        }
        let head_channels = match config.pool_input {
            PoolInput::LastTransition => channels,
            PoolInput::AllTransitions => pooled,
        };
        let head = EmbeddingHead::new(&mut b, "xvector", head_channels, config.embedding_dim)?;
        Ok(Model { config, store, fcm, input_tdnn, blocks, head })
    }

    pub fn from_preset(preset: Preset, seed: u64) -> Result<Self> {
        Model::build(preset.config(), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn check_tape(&self, tape: &Tape<'_>) -> Result<()> {
        if !std::ptr::eq(tape.store()?, &self.store) {
            return Err(Error::Usage("tape is bound to a different parameter store".into()));
        }
        Ok(())
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        let min = self.config.min_frames();
        if frames < min {
            return Err(input_err!("input has {frames} frames, the model needs at least {min}"));
        }
        Ok(())
    }

    /// Backbone output before the embedding head (`C×T'`).
    pub fn backbone(&self, tape: &mut Tape<'_>, features: Var, mode: BnMode) -> Result<Var> {
        self.check_tape(tape)?;
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[0] != self.config.feat_dim {
            return Err(input_err!("features must be {}×T, got {shape:?}", self.config.feat_dim));
        }
        self.check_frames(shape[1])?;
        let mut x = match &self.fcm {
            Some(fcm) => fcm.forward(tape, features, mode)?,
            None => features,
        };
        x = self.input_tdnn.forward(tape, x, mode)?;
        let mut transitions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in &block.layers {
                x = layer.forward(tape, x, mode)?;
            }
            x = block.transit.forward(tape, x, mode)?;
            transitions.push(x);
        }
        match self.config.pool_input {
            PoolInput::LastTransition => Ok(x),
            PoolInput::AllTransitions => tape.concat(&transitions),
        }
    }

    /// Features `F×T` to embedding `D`.
    pub fn forward(&self, tape: &mut Tape<'_>, features: Var, mode: BnMode) -> Result<Var> {
        let x = self.backbone(tape, features, mode)?;
        self.head.forward(tape, x, mode)
    }

    /// Inference-mode embedding of one utterance's features.
    pub fn extract_embedding(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let x = tape.input(features.clone());
        let e = self.forward(&mut tape, x, BnMode::Infer)?;
        Ok(tape.value(e).clone())
    }

    /// FCM output `(C·F')×T` for the given features, or the features
    /// themselves when the model has no FCM.
    pub fn fcm_output(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let x = tape.input(features.clone());
        let y = match &self.fcm {
            Some(fcm) => fcm.forward(&mut tape, x, BnMode::Infer)?,
            None => x,
        };
        Ok(tape.value(y).clone())
    }

    /// Writes running-statistic updates collected by a train-mode forward.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, Tensor)>) {
        for (id, value) in updates {
            self.store.buffer_mut(id).value = value;
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        tensor_file::save(path, self.store.named_tensors())
    }

    /// Builds the architecture from `config` and fills every tensor from `path`.
    /// Unknown, missing, misshapen or non-finite tensors are rejected.
    pub fn load_weights(path: &Path, config: ModelConfig) -> Result<Self> {
        let tensors = tensor_file::load(path)?;
        let mut model = Model::build(config, 0)?;
        model.set_tensors(tensors)?;
        Ok(model)
    }

    pub fn set_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, t) in tensors {
            if !t.all_finite() {
                return Err(Error::CorruptWeights(format!("tensor {name:?} contains non-finite values")));
            }
            if name.ends_with(".running_var") && t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::CorruptWeights(format!("tensor {name:?} has negative variance")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("tensor {name:?} appears twice")));
            }
            self.store.set(&name, t)?;
        }
        let missing = self.store.named_tensors().map(|(n, _)| n).find(|n| !seen.contains(*n));
        match missing {
            Some(n) => Err(Error::MissingTensor(n.to_string())),
            None => Ok(()),
        }
    }
}

/// Builds a model from a preset name.
pub fn build_model(preset: &str, seed: u64) -> Result<Model> {
    Model::from_preset(preset.parse()?, seed)
}
