//! Small-scale training harness: labeled datasets, synthetic speakers and a
//! full-batch fit loop.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::aam::{aam_softmax_loss, cosine_predictions, AamConfig};
use super::optim::{clip_grad_norm, lr_schedule, ScheduleConfig, Sgd};
use crate::autograd::Tape;
use crate::error::{config_err, input_err, Error, Result};
use crate::features::{read_wav, write_wav, AudioBuffer, Fbank, FbankConfig};
use crate::model::Model;
use crate::ops::BnMode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One training example.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub utterance: String,
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ToyDataset {
    pub items: Vec<LabeledFeatures>,
    /// Speaker id for each label index.
    pub speakers: Vec<String>,
}

impl ToyDataset {
    /// Labels are assigned by sorted speaker id.
    pub fn from_examples(examples: Vec<(String, String, Tensor)>) -> Self {
        let speakers: Vec<String> = {
            let mut s: Vec<String> = examples.iter().map(|e| e.0.clone()).collect();
            s.sort();
            s.dedup();
            s
        };
        let items = examples
            .into_iter()
            .map(|(spk, utt, features)| LabeledFeatures {
                label: speakers.binary_search(&spk).unwrap(),
                utterance: utt,
                features,
            })
            .collect();
        ToyDataset { items, speakers }
    }

    /// Loads either a directory of `<speaker>_<utt>.wav` files or a manifest
    /// with one `path<TAB>speaker` line per utterance (relative paths resolve
    /// against the manifest's directory).
    pub fn load(path: &Path, fbank: &Fbank) -> Result<Self> {
        let entries = if path.is_dir() { scan_dir(path)? } else { parse_manifest(path)? };
        let examples = entries
            .into_iter()
            .map(|(wav, spk)| {
                let utt = wav.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                let feats = fbank.compute(&read_wav(&wav)?)?;
                Ok((spk, utt, feats))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyDataset::from_examples(examples))
    }

    pub fn num_classes(&self) -> usize {
        self.speakers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(config_err!("training needs at least two speakers, found {}", self.num_classes()));
        }
        for (label, spk) in self.speakers.iter().enumerate() {
            let n = self.items.iter().filter(|i| i.label == label).count();
            if n < 2 {
                return Err(config_err!("speaker {spk:?} has {n} utterance(s), need at least 2"));
            }
        }
        Ok(())
    }
}

fn scan_dir(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((spk, _)) = stem.split_once('_') else {
            return Err(input_err!("{} is not named <speaker>_<utt>.wav", path.display()));
        };
        out.push((path.clone(), spk.to_string()));
    }
    out.sort();
    if out.is_empty() {
        return Err(input_err!("no .wav files in {}", dir.display()));
    }
    Ok(out)
}

fn parse_manifest(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((p, spk)) = line.split_once('\t') else {
            return Err(Error::Parse { line: i + 1, msg: "expected path<TAB>speaker".into() });
        };
        if spk.trim().is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty speaker id".into() });
        }
        out.push((base.join(p), spk.trim().to_string()));
    }
    Ok(out)
}

/// Harmonic "voices": each speaker has its own pitch and formant-like
/// spectral envelope; utterances vary pitch slightly and add noise.
pub fn synthetic_speakers(speakers: usize, utterances: usize, seconds: f64, seed: u64) -> Vec<(String, String, AudioBuffer)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = 16_000.0;
    let n = (seconds * sr) as usize;
    let mut out = Vec::with_capacity(speakers * utterances);
    for s in 0..speakers {
        let f0 = 100.0 + 70.0 * s as f64 + rng.gen_range(0.0..20.0);
        let formant = 500.0 + 900.0 * s as f64 + rng.gen_range(0.0..200.0);
        for u in 0..utterances {
            let pitch = f0 * rng.gen_range(0.97..1.03);
            let phases: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let mut v = 0.0;
                    for (h, ph) in phases.iter().enumerate() {
                        let f = pitch * (h + 1) as f64;
                        if f >= 7600.0 {
                            break;
                        }
                        let gain = (-((f - formant) / 600.0).powi(2)).exp() + 0.05;
                        v += gain * (2.0 * PI * f * t + ph).sin();
                    }
                    (0.1 * v + rng.gen_range(-0.005..0.005)) as f32
                })
                .collect();
            let audio = AudioBuffer::new(samples, 16_000).expect("valid synthetic audio");
            out.push((format!("spk{s}"), format!("spk{s}_utt{u}"), audio));
        }
    }
    out
}

/// Writes [`synthetic_speakers`] as `<speaker>_<utt>.wav` files plus a
/// `manifest.tsv`; returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, speakers: usize, utterances: usize, seconds: f64, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (spk, utt, audio) in synthetic_speakers(speakers, utterances, seconds, seed) {
        let name = format!("{utt}.wav");
        write_wav(dir.join(&name), &audio)?;
        manifest.push_str(&format!("{name}\t{spk}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// In-memory synthetic dataset with default features.
pub fn synthetic_dataset(speakers: usize, utterances: usize, seconds: f64, seed: u64) -> Result<ToyDataset> {
    let fbank = Fbank::new(FbankConfig::default())?;
    let examples = synthetic_speakers(speakers, utterances, seconds, seed)
        .into_iter()
        .map(|(spk, utt, audio)| Ok((spk, utt, fbank.compute(&audio)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset::from_examples(examples))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrPolicy {
    Schedule(ScheduleConfig),
    Constant(f64),
}

/// Default joint gradient-norm ceiling for [`toy_fit`].
pub const CLIP: f32 = 1.0;

#[derive(Clone, Debug)]
pub struct ToyFitConfig {
    pub steps: usize,
    pub lr: LrPolicy,
    pub momentum: f32,
    pub weight_decay: f32,
    pub margin: f64,
    pub scale: f64,
    /// Longer inputs are randomly cropped to this many frames (3 s).
    pub crop_frames: usize,
    /// Joint gradient-norm ceiling applied before each update.
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

impl ToyFitConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        ToyFitConfig {
            steps,
            lr: LrPolicy::Schedule(ScheduleConfig::new(steps / 10, steps)),
            momentum: 0.9,
            weight_decay: 1e-4,
            margin: 0.2,
            scale: 32.0,
            crop_frames: 300,
            clip_norm: Some(CLIP),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Loss before each update.
    pub losses: Vec<f32>,
    /// Training accuracy before each update.
    pub accuracies: Vec<f32>,
    /// Loss and accuracy after the last update.
    pub final_loss: f32,
    pub final_accuracy: f32,
    /// Learned class weights `N×D`.
    pub class_weights: Tensor,
}

fn crop(features: &Tensor, frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (f, t) = (features.dim(0), features.dim(1));
    if t <= frames {
        return features.clone();
    }
    let start = rng.gen_range(0..=t - frames);
    let data = features.data().chunks_exact(t).flat_map(|row| row[start..start + frames].iter().copied()).collect();
    Tensor::from_parts(vec![f, frames], data)
}

/// Loss and accuracy of one full batch; returns gradients when `train`.
fn batch_pass(
    model: &Model,
    classes: &ParamStore,
    inputs: &[Tensor],
    labels: &[usize],
    aam: &AamConfig,
    train: bool,
) -> Result<(f32, f32, Option<crate::autograd::Gradients>, Option<Tensor>)> {
    let mut tape = if train { Tape::with_params(model.store()) } else { Tape::inference(model.store()) };
    let embeddings = inputs
        .iter()
        .map(|x| {
            let v = tape.input(x.clone());
            model.forward(&mut tape, v, BnMode::Infer)
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = tape.stack(&embeddings)?;
    let w = tape.input(classes.params()[0].value.clone());
    let loss = aam_softmax_loss(&mut tape, emb, labels, w, aam)?;
    let preds = cosine_predictions(tape.value(emb), tape.value(w))?;
    let acc = preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f32 / labels.len() as f32;
    let value = tape.value(loss).item()?;
    if !train {
        return Ok((value, acc, None, None));
    }
    let grads = tape.backward(loss)?;
    let gw = grads.wrt(w).cloned();
    Ok((value, acc, Some(grads), gw))
}

/// Full-batch training of `model` plus a cosine classifier with AAM-softmax.
///
/// Batch norm runs with frozen running statistics: every forward sees one
/// utterance, and the embedding layer's batch norm acts on a single vector.
pub fn toy_fit(model: &mut Model, data: &ToyDataset, cfg: &ToyFitConfig) -> Result<FitReport> {
    data.validate()?;
    if let LrPolicy::Schedule(s) = &cfg.lr {
        s.validate()?;
    }
    let aam = AamConfig { margin: cfg.margin, scale: cfg.scale, num_classes: data.num_classes() };
    aam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = model.config().embedding_dim;
    let bound = (6.0 / dim as f32).sqrt();
    let mut classes = ParamStore::new();
    classes.add_param("classifier.weight", Tensor::rand_uniform([data.num_classes(), dim], -bound, bound, &mut rng))?;

    let labels: Vec<usize> = data.items.iter().map(|i| i.label).collect();
    let mut model_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut class_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut accuracies = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let inputs: Vec<Tensor> = data.items.iter().map(|i| crop(&i.features, cfg.crop_frames, &mut rng)).collect();
        let (loss, acc, grads, gw) = batch_pass(model, &classes, &inputs, &labels, &aam, true)?;
        losses.push(loss);
        accuracies.push(acc);
        log::debug!("step {step} loss {loss:.6} acc {acc:.3}");
        let lr = match cfg.lr {
            LrPolicy::Schedule(s) => lr_schedule(step + 1, &s),
            LrPolicy::Constant(lr) => lr,
        } as f32;
        grads.expect("training pass returns gradients").accumulate_into(model.store_mut());
        classes.params_mut()[0].gradient = gw.expect("classifier reached by the loss");
        let norm = match cfg.clip_norm {
            Some(max) => clip_grad_norm(&mut [model.store_mut(), &mut classes], max),
            None => f32::NAN,
        };
        log::debug!("step {step} gradient norm {norm:.4}");
        model_opt.step(model.store_mut(), lr);
        class_opt.step(&mut classes, lr);
    }
    let inputs: Vec<Tensor> = data.items.iter().map(|i| crop(&i.features, cfg.crop_frames, &mut rng)).collect();
    let (final_loss, final_accuracy, _, _) = batch_pass(model, &classes, &inputs, &labels, &aam, false)?;
    Ok(FitReport { losses, accuracies, final_loss, final_accuracy, class_weights: classes.params()[0].value.clone() })
}
