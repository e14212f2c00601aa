use camforge_core::scoring::{
    compute_eer, compute_eer_from, compute_mindcf_from, parse_enrollment_map, parse_trials_str, score_trials, DcfParams,
    EmbeddingStore, TrialSet,
};
use camforge_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute force: every candidate threshold is evaluated by counting directly.
fn oracle(targets: &[f64], nontargets: &[f64], p: &DcfParams) -> (f64, f64) {
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

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.gen_range(1..100);
    let nn = rng.gen_range(1..100);
    let coarse = rng.gen_bool(0.3);
    let shift = rng.gen_range(0.0..2.0);
    let mut draw = |mu: f64| {
        let v: f64 = mu + rng.gen_range(-1.0..1.0);
        if coarse {
            (v * 10.0).round() / 10.0
        } else {
            v
        }
    };
    let t = (0..nt).map(|_| draw(shift)).collect();
    let n = (0..nn).map(|_| draw(0.0)).collect();
    (t, n)
}

#[test]
fn metrics_match_the_threshold_sweep_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = DcfParams::default();
    for _ in 0..50 {
        let (t, n) = random_set(&mut rng);
        let (eer, dcf) = oracle(&t, &n, &p);
        assert!((compute_eer_from(&t, &n).unwrap().eer - eer).abs() < 1e-9);
        assert!((compute_mindcf_from(&t, &n, &p).unwrap().mindcf - dcf).abs() < 1e-9);
    }
}

#[test]
fn eer_threshold_lies_within_the_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (t, n) = random_set(&mut rng);
        let r = compute_eer_from(&t, &n).unwrap();
        let lo = t.iter().chain(&n).cloned().fold(f64::INFINITY, f64::min);
        let hi = t.iter().chain(&n).cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(r.threshold >= lo && r.threshold <= hi);
    }
}

proptest! {
    #[test]
    fn invariant_under_increasing_transforms(
        t in prop::collection::vec(-5.0f64..5.0, 1..60),
        n in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let p = DcfParams::default();
        let f = |v: &f64| (v * 0.7).exp() + 3.0;
        let (tt, nn): (Vec<f64>, Vec<f64>) = (t.iter().map(f).collect(), n.iter().map(f).collect());
        let a = compute_eer_from(&t, &n).unwrap().eer;
        let b = compute_eer_from(&tt, &nn).unwrap().eer;
        prop_assert!((a - b).abs() < 1e-12);
        let a = compute_mindcf_from(&t, &n, &p).unwrap().mindcf;
        let b = compute_mindcf_from(&tt, &nn, &p).unwrap().mindcf;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn metric_bounds(
        t in prop::collection::vec(-1.0f64..1.0, 1..60),
        n in prop::collection::vec(-1.0f64..1.0, 1..60),
    ) {
        let eer = compute_eer_from(&t, &n).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&eer));
        let dcf = compute_mindcf_from(&t, &n, &DcfParams::default()).unwrap().mindcf;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dcf));
    }
}

#[test]
fn enrollment_averaging_in_scoring() {
    let mut store = EmbeddingStore::new();
    store.insert("u1", Tensor::new([2], vec![1.0, 0.0]).unwrap()).unwrap();
    store.insert("u2", Tensor::new([2], vec![0.0, 1.0]).unwrap()).unwrap();
    store.insert("t", Tensor::new([2], vec![1.0, 1.0]).unwrap()).unwrap();
    assert!(store.insert("bad", Tensor::zeros([3])).is_err());
    let trials = parse_trials_str("spk t target\nu1 t nontarget\n").unwrap();
    let map = parse_enrollment_map("spk u1 u2\n").unwrap();
    let scores = score_trials(&trials, &store, Some(&map)).unwrap();
    assert!((scores[0] - 1.0).abs() < 1e-12);
    assert!((scores[1] - 0.5f64.sqrt()).abs() < 1e-9);
    let set = TrialSet { scores: Some(scores), ..trials };
    assert_eq!(compute_eer(&set).unwrap().eer, 0.0);
    assert!(score_trials(&parse_trials_str("x t 1").unwrap(), &store, None).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.camw");
    store.save(&path).unwrap();
    let back = EmbeddingStore::load(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.get("u2").unwrap().data(), &[0.0, 1.0]);
}
