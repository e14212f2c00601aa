use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camforge_core::analysis::{
    benchmark_rtf, closest_entry, convention_sweep, count_flops, frames_for_seconds, RtfConfig, WallClock,
};
use camforge_core::features::{read_wav, Fbank, FbankConfig};
use camforge_core::scoring::{
    attach_scores, compute_eer, compute_mindcf, format_scores, parse_enrollment_map, parse_trials, score_trials,
    DcfParams, EmbeddingStore,
};
use camforge_core::training::{toy_fit, write_synthetic_dataset, ToyDataset, ToyFitConfig};
use camforge_core::{tensor_file, Model, ModelConfig, Preset};

use crate::{Format, ModelArgs};

/// Published complexity of the full CAM++ network, used as the sweep reference.
const CAMPP_REFERENCE_FLOPS: f64 = 1.72e9;
const SWEEP_SECONDS: [f64; 3] = [1.0, 2.0, 3.0];

fn model_config(preset: &str, config: Option<&Path>) -> Result<ModelConfig> {
    let mut cfg = preset.parse::<Preset>()?.config();
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let cfg = model_config(&args.preset, args.config.as_deref())?;
    Ok(match &args.weights {
        Some(path) => Model::load_weights(path, cfg).with_context(|| format!("loading {}", path.display()))?,
        None => Model::build(cfg, args.seed)?,
    })
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Expands directories into their WAV files, sorted by name.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut wavs: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| is_wav(p))
                .collect();
            wavs.sort();
            out.extend(wavs);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn embed(args: &ModelArgs, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let model = load_model(args)?;
    let fbank = Fbank::new(FbankConfig::default())?;
    let mut store = EmbeddingStore::new();
    for path in expand_inputs(inputs)? {
        if is_wav(&path) {
            let id = path.file_stem().and_then(|s| s.to_str()).context("input file name is not UTF-8")?;
            let audio = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
            let features = fbank.compute(&audio)?;
            let e = model.extract_embedding(&features).with_context(|| format!("embedding {}", path.display()))?;
            store.insert(id, e)?;
        } else {
            // feature file: one F×T record per utterance
            for (id, features) in tensor_file::load(&path).with_context(|| format!("reading {}", path.display()))? {
                let e = model.extract_embedding(&features).with_context(|| format!("embedding {id}"))?;
                store.insert(id, e)?;
            }
        }
    }
    if store.is_empty() {
        bail!(camforge_core::Error::Input("no inputs to embed".into()));
    }
    store.save(out)?;
    log::info!("wrote {} embeddings to {}", store.len(), out.display());
    Ok(())
}

pub fn score(embeddings: &Path, trials: &Path, enroll: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let store = EmbeddingStore::load(embeddings).with_context(|| format!("reading {}", embeddings.display()))?;
    let trials = parse_trials(trials).with_context(|| format!("reading {}", trials.display()))?;
    let map = enroll
        .map(|p| -> Result<_> { Ok(parse_enrollment_map(&fs::read_to_string(p)?)?) })
        .transpose()?;
    let scores = score_trials(&trials, &store, map.as_ref())?;
    let text = format_scores(&trials, &scores);
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn eval(trials: &Path, scores: &Path, params: DcfParams) -> Result<()> {
    params.validate()?;
    let trials = parse_trials(trials).with_context(|| format!("reading {}", trials.display()))?;
    let text = fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?;
    let scored = attach_scores(&trials, &text)?;
    let eer = compute_eer(&scored)?;
    let dcf = compute_mindcf(&scored, &params)?;
    println!("EER {:.4} minDCF {:.4}", eer.eer, dcf.mindcf);
    log::info!("EER threshold {:.6}, minDCF threshold {:.6}", eer.threshold, dcf.threshold);
    Ok(())
}

pub fn analyze(preset: &str, config: Option<&Path>, seconds: f64, format: Format) -> Result<()> {
    let frames = frames_for_seconds(seconds)
        .with_context(|| format!("{seconds} s is shorter than one analysis window"))?;
    let model = Model::build(model_config(preset, config)?, 0)?;
    let report = count_flops(&model, frames)?;
    let sweep = convention_sweep(&model, &SWEEP_SECONDS)?;
    let mut s = match format {
        Format::Table => report.to_table(),
        Format::Tsv => report.to_tsv(),
    };
    let reference = (preset == "campp" && config.is_none()).then_some(CAMPP_REFERENCE_FLOPS);
    let _ = writeln!(s, "\nconvention sweep");
    for e in &sweep {
        let _ = write!(s, "{:.0}s\t{}\t{:.3} G", e.seconds, e.convention.name(), e.operations as f64 / 1e9);
        if let Some(r) = reference {
            let _ = write!(s, "\t{:+.1}%", 100.0 * e.relative_delta(r));
        }
        s.push('\n');
    }
    if let Some(r) = reference {
        let best = closest_entry(&sweep, r).expect("sweep is not empty");
        let _ = writeln!(
            s,
            "chosen convention: {} at {:.0} s = {:.3} G vs reference {:.2} G ({:+.1}%)",
            best.convention.name(),
            best.seconds,
            best.operations as f64 / 1e9,
            r / 1e9,
            100.0 * best.relative_delta(r)
        );
    }
    print!("{s}");
    Ok(())
}

pub fn bench(args: &ModelArgs, seconds: f64, repeats: usize, include_features: bool) -> Result<()> {
    if repeats < 3 {
        bail!(camforge_core::Error::Config(format!("repeats must be at least 3, got {repeats}")));
    }
    let model = load_model(args)?;
    let cfg = RtfConfig { audio_seconds: seconds, repeats, include_features, seed: args.seed };
    let report = benchmark_rtf(&model, &cfg, &mut WallClock::new())?;
    println!("preset={} {}", args.preset, report.summary());
    println!("rtf_median {:.6}", report.rtf);
    Ok(())
}

pub fn train_toy(args: &ModelArgs, data: &Path, steps: usize, trace: Option<&Path>, out: &Path) -> Result<()> {
    let mut model = load_model(args)?;
    let fbank = Fbank::new(FbankConfig::default())?;
    let dataset = ToyDataset::load(data, &fbank).with_context(|| format!("loading {}", data.display()))?;
    let report = toy_fit(&mut model, &dataset, &ToyFitConfig::new(steps, args.seed))?;
    let mut text = String::from("step\tloss\taccuracy\n");
    for (i, (l, a)) in report.losses.iter().zip(&report.accuracies).enumerate() {
        let _ = writeln!(text, "{i}\t{l:.9e}\t{a:.4}");
    }
    let _ = writeln!(text, "final\t{:.9e}\t{:.4}", report.final_loss, report.final_accuracy);
    match trace {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    model.save_weights(out)?;
    Ok(())
}

pub fn toy_data(speakers: usize, utterances: usize, seconds: f64, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest = write_synthetic_dataset(out, speakers, utterances, seconds, seed)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn init(preset: &str, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let model = Model::build(model_config(preset, config)?, seed)?;
    model.save_weights(out)?;
    println!("{} parameters written to {}", model.num_params(), out.display());
    Ok(())
}
