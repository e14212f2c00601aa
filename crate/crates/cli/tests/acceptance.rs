//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use camforge_core::analysis::{closest_entry, convention_sweep, count_flops, count_params, OpGeom};
use camforge_core::gradcheck::standard_suite;
use camforge_core::model::{cam_mask, CamModule, ParamBuilder};
use camforge_core::ops::{self, global_avg_pool, segment_avg_pool, Conv1dSpec, Conv2dSpec, Segments};
use camforge_core::scoring::{compute_eer_from, compute_mindcf_from, DcfParams};
use camforge_core::{Model, ParamStore, Preset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn camforge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_camforge"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning camforge: {e}"))?;
    if !out.status.success() {
        return Err(format!("camforge {args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ---------------------------------------------------------------------------

fn parameter_counts() -> Outcome {
    const TOLERANCE: f64 = 0.05;
    let targets = [
        (Preset::Campp, 7.18e6),
        (Preset::DtdnnL, 6.40e6),
        (Preset::DtdnnVanilla, 2.85e6),
        (Preset::DtdnnCamGpSp, 3.07e6),
    ];
    let mut parts = Vec::new();
    for (preset, target) in targets {
        let n = count_params(&Model::from_preset(preset, 0).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .total_params() as f64;
        let delta = (n - target) / target;
        ensure(delta.abs() <= TOLERANCE, || format!("{preset}: {n} vs {target} ({:+.2}%)", 100.0 * delta))?;
        parts.push(format!("{preset} {:.3} M ({:+.2}%)", n / 1e6, 100.0 * delta));
    }
    let table = camforge(&["analyze", "--preset", "campp"])?;
    let line = table.lines().find(|l| l.starts_with("total params:")).ok_or("no total params line")?;
    let m: f64 = line.trim_start_matches("total params:").trim().trim_end_matches('M').trim().parse().map_err(|_| line.to_string())?;
    ensure(((m - 7.18) / 7.18).abs() <= TOLERANCE, || format!("cli reports {line}"))?;
    Ok(parts.join(", "))
}

// 2 ---------------------------------------------------------------------------

fn brute_conv1d_macs(ci: usize, co: usize, k: usize, t: usize, spec: Conv1dSpec) -> (usize, u64) {
    let tp = t + 2 * spec.padding;
    let span = spec.dilation * (k - 1) + 1;
    let t_out = (tp - span) / spec.stride + 1;
    let mut count = 0;
    for _o in 0..co {
        for to in 0..t_out {
            for _c in 0..ci {
                for j in 0..k {
                    let pos = to * spec.stride + j * spec.dilation;
                    assert!(pos < tp);
                    count += 1;
                }
            }
        }
    }
    (t_out, count)
}

fn brute_conv2d_macs(ci: usize, co: usize, kf: usize, kt: usize, f: usize, t: usize, spec: Conv2dSpec) -> (usize, usize, u64) {
    let (fp, tp) = (f + 2 * spec.padding_f, t + 2 * spec.padding_t);
    let f_out = (fp - kf) / spec.stride_f + 1;
    let t_out = (tp - kt) / spec.stride_t + 1;
    let mut count = 0;
    for _o in 0..co {
        for _fo in 0..f_out {
            for _to in 0..t_out {
                for _c in 0..ci {
                    for _a in 0..kf {
                        for _b in 0..kt {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    (f_out, t_out, count)
}

fn flop_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geometries = 12;
    for _ in 0..geometries {
        let (ci, co, k) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..6));
        let spec = Conv1dSpec::new(rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..3));
        let t = rng.gen_range(spec.dilation * (k - 1) + 1..40);
        let (t_out, count) = brute_conv1d_macs(ci, co, k, t, spec);
        let x = Tensor::zeros([ci, t]);
        let w = Tensor::zeros([co, ci, k]);
        let y = ops::conv1d(&x, &w, None, spec).map_err(|e| e.to_string())?;
        ensure(y.dim(1) == t_out, || format!("conv1d output length {} vs {t_out}", y.dim(1)))?;
        let macs = OpGeom::Conv1d { c_in: ci, c_out: co, kernel: k, t_out, bias: false }.macs();
        ensure(macs == count, || format!("conv1d {ci}->{co} k{k} {spec:?}: {macs} vs {count}"))?;

        let (ci, co, kf, kt) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let spec = Conv2dSpec::new(rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(0..2), rng.gen_range(0..2));
        let (f, t) = (rng.gen_range(kf..14), rng.gen_range(kt..14));
        let (f_out, t_out, count) = brute_conv2d_macs(ci, co, kf, kt, f, t, spec);
        let y = ops::conv2d(&Tensor::zeros([ci, f, t]), &Tensor::zeros([co, ci, kf, kt]), None, spec).map_err(|e| e.to_string())?;
        ensure(y.shape() == [co, f_out, t_out], || format!("conv2d shape {:?}", y.shape()))?;
        let macs = OpGeom::Conv2d { c_in: ci, c_out: co, kf, kt, f_out, t_out, bias: false }.macs();
        ensure(macs == count, || format!("conv2d: {macs} vs {count}"))?;

        let (p, di, d_o, bias) = (rng.gen_range(1..6), rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_bool(0.5));
        let (mut muls, mut adds) = (0u64, 0u64);
        for _ in 0..p * d_o {
            muls += di as u64;
            adds += di as u64 + u64::from(bias);
        }
        let g = OpGeom::Linear { d_in: di, d_out: d_o, positions: p, bias };
        ensure((g.macs(), g.flops()) == (muls, muls + adds), || format!("linear {g:?}"))?;
    }

    let model = Model::from_preset(Preset::Campp, 0).map_err(|e| e.to_string())?;
    let sweep = convention_sweep(&model, &[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    let target = 1.72e9;
    let best = closest_entry(&sweep, target).ok_or("empty sweep")?;
    ensure(best.relative_delta(target).abs() <= 0.20, || format!("closest convention is {best:?}"))?;
    let default = count_flops(&model, sweep[0].frames).map_err(|e| e.to_string())?;
    let cli = camforge(&["analyze", "--preset", "campp"])?;
    ensure(cli.contains("chosen convention: "), || "analyze does not record the chosen convention".into())?;
    Ok(format!(
        "{geometries} geometries per kind exact; {} @ {:.0} s = {:.3} G vs 1.72 G ({:+.1}%); default convention @ 1 s = {:.3} G",
        best.convention.name(),
        best.seconds,
        best.operations as f64 / 1e9,
        100.0 * best.relative_delta(target),
        default.total_flops() as f64 / 1e9
    ))
}

// 3 ---------------------------------------------------------------------------

fn sweep_oracle(targets: &[f64], nontargets: &[f64], p: &DcfParams) -> (f64, f64) {
    let mut distinct: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut taus = vec![f64::NEG_INFINITY];
    taus.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    taus.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            let miss = targets.iter().filter(|&&s| s < tau).count() as f64 / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s >= tau).count() as f64 / nontargets.len() as f64;
            (miss, fa)
        })
        .collect();
    let mut eer = f64::NAN;
    for j in 1..rates.len() {
        let (d0, d1) = (rates[j - 1].0 - rates[j - 1].1, rates[j].0 - rates[j].1);
        if d1 >= 0.0 {
            let a = if d1 == 0.0 { 1.0 } else { -d0 / (d1 - d0) };
            eer = rates[j - 1].0 + a * (rates[j].0 - rates[j - 1].0);
            break;
        }
    }
    let norm = (p.p_target * p.c_miss).min((1.0 - p.p_target) * p.c_fa);
    let dcf = rates
        .iter()
        .map(|(m, f)| (p.p_target * p.c_miss * m + (1.0 - p.p_target) * p.c_fa * f) / norm)
        .fold(f64::INFINITY, f64::min);
    (eer, dcf)
}

fn metric_oracle() -> Outcome {
    let p = DcfParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let total = rng.gen_range(2..=200);
        let nt = rng.gen_range(1..total);
        let shift = rng.gen_range(0.0..2.0);
        let coarse = rng.gen_bool(0.3);
        let mut draw = |mu: f64| {
            let v: f64 = mu + rng.gen_range(-1.0..1.0);
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        };
        let t: Vec<f64> = (0..nt).map(|_| draw(shift)).collect();
        let n: Vec<f64> = (0..total - nt).map(|_| draw(0.0)).collect();
        let (eer, dcf) = sweep_oracle(&t, &n, &p);
        let got_eer = compute_eer_from(&t, &n).map_err(|e| e.to_string())?.eer;
        let got_dcf = compute_mindcf_from(&t, &n, &p).map_err(|e| e.to_string())?.mindcf;
        worst = worst.max((got_eer - eer).abs()).max((got_dcf - dcf).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation from oracle {worst:e}"))?;

    let sep = (compute_eer_from(&[0.9, 0.8], &[0.1, 0.2]).unwrap().eer, compute_mindcf_from(&[0.9, 0.8], &[0.1, 0.2], &p).unwrap().mindcf);
    ensure(sep == (0.0, 0.0), || format!("separable gives {sep:?}"))?;
    let same = (compute_eer_from(&[0.5; 4], &[0.5; 6]).unwrap().eer, compute_mindcf_from(&[0.5; 4], &[0.5; 6], &p).unwrap().mindcf);
    ensure((same.0 - 0.5).abs() < 1e-12 && (same.1 - 1.0).abs() < 1e-12, || format!("indistinguishable gives {same:?}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (trials, scores) = (dir.path().join("trials"), dir.path().join("scores"));
    std::fs::write(&trials, "a b target\na c nontarget\nd e target\nd f nontarget\n").unwrap();
    std::fs::write(&scores, "a b 0.91\na c 0.12\nd e 0.75\nd f -0.30\n").unwrap();
    let out = camforge(&["eval", "--trials", path(&trials), "--scores", path(&scores)])?;
    ensure(out.trim() == "EER 0.0000 minDCF 0.0000", || format!("eval printed {out:?}"))?;
    Ok(format!("50 sets, max deviation {worst:.1e}; separable 0/0; indistinguishable 0.5/1.0"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

// 4 ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for seed in 0..20 {
        for r in standard_suite(seed).map_err(|e| e.to_string())? {
            let op = r.label.split('/').next().unwrap().to_string();
            let e = worst.entry(op).or_insert(0.0);
            *e = e.max(r.relative_error());
        }
    }
    let (op, max) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).ok_or("empty suite")?;
    ensure(worst.contains_key("dtdnn_layer"), || "D-TDNN layer missing from the suite".into())?;
    ensure(*max < 1e-3, || format!("{op}: relative error {max:.2e}"))?;
    Ok(format!("{} checks x 20 seeds, worst {op} {max:.2e}", worst.len()))
}

// 5 ---------------------------------------------------------------------------

fn masking_and_pooling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cam = CamModule::new(&mut ParamBuilder::new(&mut store, 5), "cam", 16, 8, 12, 100, true).map_err(|e| e.to_string())?;
    let segs = Segments::new(250, 100).map_err(|e| e.to_string())?;
    let eg = Tensor::rand_uniform([16], -3.0, 3.0, &mut rng);
    let es = Tensor::rand_uniform([16, 3], -3.0, 3.0, &mut rng);
    let m = cam_mask(&store, &cam, &eg, Some(&es), &segs).map_err(|e| e.to_string())?;
    ensure(m.data().iter().all(|&v| v > 0.0 && v < 1.0), || "mask value outside (0, 1)".into())?;

    for p in store.params_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let m = cam_mask(&store, &cam, &eg, Some(&es), &segs).map_err(|e| e.to_string())?;
    ensure(m.data().iter().all(|&v| v == 0.5), || "zero-parameter mask is not exactly 0.5".into())?;

    let mut worst = 0.0f64;
    for frames in [250, 100, 37, 301] {
        let x = Tensor::rand_uniform([8, frames], -1.0, 1.0, &mut rng);
        let pooled = segment_avg_pool(&x, 100).map_err(|e| e.to_string())?;
        let global = global_avg_pool(&x).map_err(|e| e.to_string())?;
        let k = pooled.segments.count();
        for c in 0..8 {
            let weighted: f64 = pooled
                .segments
                .ranges()
                .enumerate()
                .map(|(j, r)| pooled.embeddings.data()[c * k + j] as f64 * r.len() as f64)
                .sum();
            worst = worst.max((weighted / frames as f64 - global.data()[c] as f64).abs());
        }
        if frames == 100 {
            ensure(pooled.embeddings.data() == global.data(), || "T = 100 segment pooling differs from global".into())?;
        }
    }
    ensure(worst <= 1e-5, || format!("weighted segment means off by {worst:e}"))?;
    let bounds = Segments::new(250, 100).unwrap().bounds().to_vec();
    ensure(bounds == [0, 100, 200, 250], || format!("T = 250 boundaries {bounds:?}"))?;
    Ok(format!("mask in (0,1); zero params -> 0.5; weighted means within {worst:.1e}; boundaries {bounds:?}"))
}

// 6 ---------------------------------------------------------------------------

fn toy_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let manifest = camforge(&["toy-data", "--speakers", "2", "--utterances", "5", "--seed", "7", "--out", path(&data)])?;
    let manifest = manifest.trim().to_string();
    let mut traces = Vec::new();
    for run in 0..2 {
        let trace = dir.path().join(format!("trace{run}.tsv"));
        let weights = dir.path().join(format!("w{run}.camw"));
        camforge(&[
            "train-toy", "--preset", "tiny", "--seed", "7", "--steps", "200", "--data", &manifest, "--trace", path(&trace),
            "--out", path(&weights),
        ])?;
        traces.push(std::fs::read_to_string(&trace).map_err(|e| e.to_string())?);
    }
    ensure(traces[0] == traces[1], || "loss traces differ between identical runs".into())?;
    let last = traces[0].lines().last().ok_or("empty trace")?;
    let fields: Vec<&str> = last.split('\t').collect();
    let (loss, acc): (f64, f64) = match fields[..] {
        ["final", l, a] => (l.parse().map_err(|_| last.to_string())?, a.parse().map_err(|_| last.to_string())?),
        _ => return Err(format!("unexpected trace line {last:?}")),
    };
    ensure(loss < 0.1 && acc == 1.0, || format!("final loss {loss:e}, accuracy {acc}"))?;
    Ok(format!("200 steps: final loss {loss:.2e}, accuracy {acc:.2}; traces bit-identical"))
}

// 7 ---------------------------------------------------------------------------

fn rtf_methodology() -> Outcome {
    let median = |secs: &str| -> Result<f64, String> {
        let out = camforge(&["bench", "--preset", "campp", "--duration-seconds", secs, "--repeats", "5"])?;
        ensure(out.contains("threads=1"), || format!("bench does not report threads=1: {out}"))?;
        let line = out.lines().find(|l| l.starts_with("rtf_median")).ok_or("no rtf_median line")?;
        line["rtf_median".len()..].trim().parse().map_err(|_| line.to_string())
    };
    let short = median("3")?;
    let long = median("6")?;
    let change = (long - short) / short;
    ensure(change.abs() <= 0.20, || format!("RTF {short:.4} at 3 s vs {long:.4} at 6 s ({:+.1}%)", 100.0 * change))?;
    Ok(format!(
        "campp single thread: RTF {short:.4} at 3 s, {long:.4} at 6 s ({:+.1}%); published 0.013 is hardware-specific, reported only",
        100.0 * change
    ))
}

// 8 ---------------------------------------------------------------------------

fn non_reproducibility() -> Outcome {
    Ok("EER/MinDCF on VoxCeleb1-O (e.g. 0.73%) need full VoxCeleb training and are NOT reproduced; criteria 1-7 replace them".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("parameter counts", parameter_counts),
        ("FLOP accounting", flop_accounting),
        ("EER/MinDCF oracle", metric_oracle),
        ("gradient suite", gradient_suite),
        ("masking/pooling invariants", masking_and_pooling),
        ("toy overfit", toy_overfit),
        ("RTF methodology", rtf_methodology),
        ("non-reproducibility statement", non_reproducibility),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}, {secs:.1} s): {detail}", i + 1),
            Err(detail) => {
                println!("FAIL criterion {} ({name}, {secs:.1} s): {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
