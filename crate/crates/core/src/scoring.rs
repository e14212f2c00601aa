//! Verification back-end: trial lists, embedding stores, cosine scoring and
//! the EER / MinDCF metrics.
//!
//! A trial is accepted when its score is at or above the threshold. Metrics
//! are evaluated at the thresholds `−∞`, every midpoint between consecutive
//! distinct scores, and `+∞`, so tied scores are never split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, input_err, Error, Result};
use crate::tensor::Tensor;
use crate::tensor_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Target,
    Nontarget,
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" | "1" => Ok(Label::Target),
            "nontarget" | "0" => Ok(Label::Nontarget),
            _ => Err(format!("unknown label {s:?} (expected target, nontarget, 1 or 0)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    /// Parallel to `trials` once scored.
    pub scores: Option<Vec<f64>>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Builds a scored set directly from per-class score lists.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mut trials = Vec::new();
        let mut scores = Vec::new();
        for (label, list) in [(Label::Target, targets), (Label::Nontarget, nontargets)] {
            for (i, &s) in list.iter().enumerate() {
                trials.push(Trial { enroll: format!("e{i}"), test: format!("{label:?}{i}"), label });
                scores.push(s);
            }
        }
        TrialSet { trials, scores: Some(scores) }
    }

    /// Target and nontarget scores.
    pub fn split_scores(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let scores = self.scores.as_ref().ok_or_else(|| input_err!("trial set has no scores"))?;
        if scores.len() != self.trials.len() {
            return Err(input_err!("{} scores for {} trials", scores.len(), self.trials.len()));
        }
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, &s) in self.trials.iter().zip(scores) {
            match t.label {
                Label::Target => tar.push(s),
                Label::Nontarget => non.push(s),
            }
        }
        Ok((tar, non))
    }
}

/// Parses `enroll_id test_id label` lines; blank lines and `#` comments are skipped.
pub fn parse_trials_str(text: &str) -> Result<TrialSet> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [enroll, test, label] = fields[..] else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 3 fields, found {}", fields.len()) });
        };
        let label = label.parse().map_err(|msg| Error::Parse { line: i + 1, msg })?;
        trials.push(Trial { enroll: enroll.into(), test: test.into(), label });
    }
    Ok(TrialSet { trials, scores: None })
}

pub fn parse_trials(path: &Path) -> Result<TrialSet> {
    parse_trials_str(&fs::read_to_string(path)?)
}

/// Utterance id → embedding, all of one dimension.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, Tensor>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(Tensor::len)
    }

    pub fn insert(&mut self, id: impl Into<String>, embedding: Tensor) -> Result<()> {
        if embedding.ndim() != 1 {
            return Err(input_err!("embeddings must be vectors, got shape {:?}", embedding.shape()));
        }
        if let Some(d) = self.dim() {
            if embedding.len() != d {
                return Err(config_err!("embedding of length {} in a store of dimension {d}", embedding.len()));
            }
        }
        self.entries.insert(id.into(), embedding);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.entries.get(id).ok_or_else(|| input_err!("no embedding for {id:?}"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: EmbeddingStore) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_file::save(path, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = EmbeddingStore::new();
        for (name, t) in tensor_file::load(path)? {
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

/// Element-wise mean of raw embeddings.
pub fn average_enrollment(embeddings: &[&Tensor]) -> Result<Tensor> {
    let first = embeddings.first().ok_or_else(|| input_err!("cannot average zero embeddings"))?;
    let mut acc = vec![0.0f64; first.len()];
    for e in embeddings {
        if e.shape() != first.shape() {
            return Err(input_err!("embedding shapes differ: {:?} vs {:?}", e.shape(), first.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(e.data()) {
            *a += v as f64;
        }
    }
    let n = embeddings.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

pub fn cosine_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(input_err!("cannot compare embeddings of length {} and {}", a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(input_err!("cosine score of a zero-norm embedding"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Parses `speaker utt1 utt2 ...` lines (Kaldi `spk2utt`).
pub fn parse_enrollment_map(text: &str) -> Result<HashMap<String, Vec<String>>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(spk) = fields.next() else { continue };
        if spk.starts_with('#') {
            continue;
        }
        let utts: Vec<String> = fields.map(String::from).collect();
        if utts.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: format!("speaker {spk:?} lists no utterances") });
        }
        map.insert(spk.to_string(), utts);
    }
    Ok(map)
}

/// Cosine score of every trial. An enrollment id found in `enrollment` is
/// represented by the average of its utterances' embeddings; otherwise it is
/// looked up directly.
pub fn score_trials(trials: &TrialSet, store: &EmbeddingStore, enrollment: Option<&HashMap<String, Vec<String>>>) -> Result<Vec<f64>> {
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        if !cache.contains_key(t.enroll.as_str()) {
            let e = match enrollment.and_then(|m| m.get(&t.enroll)) {
                Some(utts) => average_enrollment(&utts.iter().map(|u| store.get(u)).collect::<Result<Vec<_>>>()?)?,
                None => store.get(&t.enroll)?.clone(),
            };
            cache.insert(&t.enroll, e);
        }
        scores.push(cosine_score(&cache[t.enroll.as_str()], store.get(&t.test)?)?);
    }
    Ok(scores)
}

/// `enroll_id test_id score` lines with six decimals.
pub fn format_scores(trials: &TrialSet, scores: &[f64]) -> String {
    let mut s = String::new();
    for (t, score) in trials.trials.iter().zip(scores) {
        let _ = writeln!(s, "{} {} {:.6}", t.enroll, t.test, score);
    }
    s
}

/// Reads a score file and aligns it with `trials` by `(enroll, test)` pair.
pub fn attach_scores(trials: &TrialSet, score_text: &str) -> Result<TrialSet> {
    let mut by_pair: HashMap<(&str, &str), f64> = HashMap::new();
    for (i, line) in score_text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let [e, t, s] = fields[..] else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 3 fields, found {}", fields.len()) });
        };
        let score: f64 = s.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad score {s:?}") })?;
        if !score.is_finite() {
            return Err(Error::Parse { line: i + 1, msg: "score is not finite".into() });
        }
        by_pair.insert((e, t), score);
    }
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            by_pair
                .get(&(t.enroll.as_str(), t.test.as_str()))
                .copied()
                .ok_or_else(|| input_err!("no score for trial {} {}", t.enroll, t.test))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSet { trials: trials.trials.clone(), scores: Some(scores) })
}

/// Miss and false-alarm rates at each candidate threshold, lowest threshold first.
struct OperatingPoints {
    thresholds: Vec<f64>,
    p_miss: Vec<f64>,
    p_fa: Vec<f64>,
}

fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<OperatingPoints> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(input_err!(
            "need both target and nontarget trials (got {} and {})",
            targets.len(),
            nontargets.len()
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(input_err!("scores must be finite"));
    }
    let mut all: Vec<(f64, bool)> =
        targets.iter().map(|&s| (s, true)).chain(nontargets.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut p_miss = vec![0.0];
    let mut p_fa = vec![1.0];
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        thresholds.push(if i < all.len() { 0.5 * (v + all[i].0) } else { f64::INFINITY });
        p_miss.push(tar_below as f64 / nt);
        p_fa.push((nn - non_below as f64) / nn);
    }
    Ok(OperatingPoints { thresholds, p_miss, p_fa })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate, linearly interpolated between the two operating points
/// where `P_miss − P_fa` changes sign.
pub fn compute_eer_from(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    let ops = operating_points(targets, nontargets)?;
    let lo = targets.iter().chain(nontargets).cloned().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().chain(nontargets).cloned().fold(f64::NEG_INFINITY, f64::max);
    let finite = |t: f64| t.clamp(lo, hi);
    let d = |i: usize| ops.p_miss[i] - ops.p_fa[i];
    // d(0) = −1 and d(last) = +1, so a sign change always exists
    let j = (1..ops.thresholds.len()).find(|&i| d(i) >= 0.0).expect("miss − fa ends at +1");
    let (d0, d1) = (d(j - 1), d(j));
    let alpha = if d1 == 0.0 { 1.0 } else { -d0 / (d1 - d0) };
    let eer = ops.p_miss[j - 1] + alpha * (ops.p_miss[j] - ops.p_miss[j - 1]);
    let (t0, t1) = (finite(ops.thresholds[j - 1]), finite(ops.thresholds[j]));
    Ok(EerResult { eer, threshold: t0 + alpha * (t1 - t0) })
}

pub fn compute_eer(trials: &TrialSet) -> Result<EerResult> {
    let (t, n) = trials.split_scores()?;
    compute_eer_from(&t, &n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(config_err!("need 0 < p_target < 1 and positive costs, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinDcfResult {
    pub mindcf: f64,
    pub threshold: f64,
}

/// Minimum normalized detection cost over the candidate thresholds. Ties
/// keep the lowest threshold.
pub fn compute_mindcf_from(targets: &[f64], nontargets: &[f64], params: &DcfParams) -> Result<MinDcfResult> {
    params.validate()?;
    let ops = operating_points(targets, nontargets)?;
    let norm = (params.p_target * params.c_miss).min((1.0 - params.p_target) * params.c_fa);
    let mut best = MinDcfResult { mindcf: f64::INFINITY, threshold: f64::NAN };
    for i in 0..ops.thresholds.len() {
        let cost = params.p_target * params.c_miss * ops.p_miss[i] + (1.0 - params.p_target) * params.c_fa * ops.p_fa[i];
        let c = cost / norm;
        if c < best.mindcf {
            best = MinDcfResult { mindcf: c, threshold: ops.thresholds[i] };
        }
    }
    Ok(best)
}

pub fn compute_mindcf(trials: &TrialSet, params: &DcfParams) -> Result<MinDcfResult> {
    let (t, n) = trials.split_scores()?;
    compute_mindcf_from(&t, &n, params)
}
