//! Additive angular margin softmax.

use crate::autograd::{Function, Tape, Var};
use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    pub num_classes: usize,
}

impl AamConfig {
    pub fn new(num_classes: usize) -> Self {
        AamConfig { margin: 0.2, scale: 32.0, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(config_err!("margin must lie in [0, π/2), got {}", self.margin));
        }
        if !(self.scale > 0.0) {
            return Err(config_err!("scale must be positive, got {}", self.scale));
        }
        if self.num_classes < 2 {
            return Err(config_err!("need at least two classes, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// Smallest `sin θ` used in the margin derivative; keeps it finite when an
/// embedding is exactly aligned with its class weight.
const MIN_SIN: f64 = 1e-6;

struct Normalized {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalize_rows(t: &Tensor, what: &str) -> Result<Normalized> {
    let d = t.dim(1);
    let mut rows = Vec::with_capacity(t.dim(0));
    let mut norms = Vec::with_capacity(t.dim(0));
    for (i, r) in t.data().chunks_exact(d).enumerate() {
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(input_err!("{what} row {i} has zero norm"));
        }
        rows.push(r.iter().map(|&v| v as f64 / n).collect());
        norms.push(n);
    }
    Ok(Normalized { rows, norms })
}

fn check(emb: &Tensor, labels: &[usize], weights: &Tensor, cfg: &AamConfig) -> Result<()> {
    cfg.validate()?;
    let ([b, d], [n, dw]) = (emb.shape(), weights.shape()) else {
        return Err(config_err!("expected B×D embeddings and N×D weights, got {:?} and {:?}", emb.shape(), weights.shape()));
    };
    if d != dw || *n != cfg.num_classes {
        return Err(config_err!("weights {:?} do not match D={d}, N={}", weights.shape(), cfg.num_classes));
    }
    if labels.len() != *b {
        return Err(input_err!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= *n) {
        return Err(input_err!("label {bad} out of range for {n} classes"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Margined target cosine `φ(c)` and its derivative.
fn phi(c: f64, m: f64) -> (f64, f64) {
    if c < (std::f64::consts::PI - m).cos() {
        (c - m * m.sin(), 1.0)
    } else {
        let s = (1.0 - c * c).max(0.0).sqrt();
        (c * m.cos() - s * m.sin(), m.cos() + c * m.sin() / s.max(MIN_SIN))
    }
}

/// Everything the forward pass produces, kept for the backward rule.
struct Forward {
    e: Normalized,
    w: Normalized,
    /// `B×N` logits including the margin on the target.
    logits: Vec<Vec<f64>>,
    /// `dφ/dc` at each target.
    dphi: Vec<f64>,
    loss: f64,
}

fn forward(emb: &Tensor, labels: &[usize], weights: &Tensor, cfg: &AamConfig) -> Result<Forward> {
    check(emb, labels, weights, cfg)?;
    let e = normalize_rows(emb, "embedding")?;
    let w = normalize_rows(weights, "class weight")?;
    let mut logits = Vec::with_capacity(labels.len());
    let mut dphi = Vec::with_capacity(labels.len());
    let mut loss = 0.0;
    for (ei, &y) in e.rows.iter().zip(labels) {
        let mut z: Vec<f64> = w.rows.iter().map(|wj| cfg.scale * dot(ei, wj)).collect();
        let (p, dp) = phi(z[y] / cfg.scale, cfg.margin);
        z[y] = cfg.scale * p;
        dphi.push(dp);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        logits.push(z);
    }
    loss /= labels.len() as f64;
    Ok(Forward { e, w, logits, dphi, loss })
}

/// Logits `s·cos θ_j`, with `s·cos(θ_y + m)` at each label.
pub fn aam_logits(emb: &Tensor, labels: &[usize], weights: &Tensor, cfg: &AamConfig) -> Result<Tensor> {
    let f = forward(emb, labels, weights, cfg)?;
    let data = f.logits.into_iter().flatten().map(|v| v as f32).collect();
    Tensor::new([labels.len(), cfg.num_classes], data)
}

/// Mean cross-entropy over the margined logits, without recording anything.
pub fn aam_softmax_loss_value(emb: &Tensor, labels: &[usize], weights: &Tensor, cfg: &AamConfig) -> Result<f64> {
    Ok(forward(emb, labels, weights, cfg)?.loss)
}

/// Index of the class with the highest plain cosine, per row.
pub fn cosine_predictions(emb: &Tensor, weights: &Tensor) -> Result<Vec<usize>> {
    let e = normalize_rows(emb, "embedding")?;
    let w = normalize_rows(weights, "class weight")?;
    Ok(e.rows
        .iter()
        .map(|ei| {
            w.rows
                .iter()
                .enumerate()
                .map(|(j, wj)| (j, dot(ei, wj)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(j, _)| j)
        })
        .collect())
}

#[derive(Debug)]
struct AamBackward {
    labels: Vec<usize>,
    scale: f64,
    // forward state
    e_rows: Vec<Vec<f64>>,
    e_norms: Vec<f64>,
    w_rows: Vec<Vec<f64>>,
    w_norms: Vec<f64>,
    logits: Vec<Vec<f64>>,
    dphi: Vec<f64>,
}

/// Gradient through `x̂ = x/‖x‖`: `(g − x̂(x̂·g)) / ‖x‖`.
fn through_norm(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f32> {
    let proj = dot(unit, g);
    unit.iter().zip(g).map(|(u, gi)| ((gi - u * proj) / norm) as f32).collect()
}

impl Function for AamBackward {
    fn name(&self) -> &'static str {
        "aam_softmax"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let upstream = grad.item()? as f64;
        let b = self.labels.len();
        let n = self.w_rows.len();
        let d = self.e_rows[0].len();
        let mut ge_hat = vec![vec![0.0; d]; b];
        let mut gw_hat = vec![vec![0.0; d]; n];
        for i in 0..b {
            let z = &self.logits[i];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            for j in 0..n {
                let mut gz = (z[j] - max).exp() / denom;
                if j == self.labels[i] {
                    gz -= 1.0;
                }
                let mut gc = upstream * gz * self.scale / b as f64;
                if j == self.labels[i] {
                    gc *= self.dphi[i];
                }
                for k in 0..d {
                    ge_hat[i][k] += gc * self.w_rows[j][k];
                    gw_hat[j][k] += gc * self.e_rows[i][k];
                }
            }
        }
        let ge: Vec<f32> =
            (0..b).flat_map(|i| through_norm(&self.e_rows[i], self.e_norms[i], &ge_hat[i])).collect();
        let gw: Vec<f32> =
            (0..n).flat_map(|j| through_norm(&self.w_rows[j], self.w_norms[j], &gw_hat[j])).collect();
        Ok(vec![Some(Tensor::new([b, d], ge)?), Some(Tensor::new([n, d], gw)?)])
    }
}

/// Records the AAM-softmax loss of `embeddings` (`B×D`) against
/// `class_weights` (`N×D`) and returns the scalar loss var.
pub fn aam_softmax_loss(tape: &mut Tape<'_>, embeddings: Var, labels: &[usize], class_weights: Var, cfg: &AamConfig) -> Result<Var> {
    let f = forward(tape.value(embeddings), labels, tape.value(class_weights), cfg)?;
    let out = Tensor::scalar(f.loss as f32);
    let node = AamBackward {
        labels: labels.to_vec(),
        scale: cfg.scale,
        e_rows: f.e.rows,
        e_norms: f.e.norms,
        w_rows: f.w.rows,
        w_norms: f.w.norms,
        logits: f.logits,
        dphi: f.dphi,
    };
    tape.custom(&[embeddings, class_weights], out, Box::new(node))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_target_logit() {
        let cfg = AamConfig::new(2);
        let e = Tensor::new([1, 2], vec![3.0, 0.0]).unwrap();
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = aam_logits(&e, &[0], &w, &cfg).unwrap();
        assert!((z.data()[0] as f64 - 32.0 * 0.2f64.cos()).abs() < 1e-4);
        assert!((z.data()[0] - 31.362).abs() < 1e-3);
        assert_eq!(z.data()[1], 0.0);
    }

    #[test]
    fn zero_margin_unit_scale_is_softmax_on_cosines() {
        let cfg = AamConfig { margin: 0.0, scale: 1.0, num_classes: 3 };
        let e = Tensor::new([2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let w = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let labels = [1, 2];
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let er = e.row(i);
            let en = (er[0] * er[0] + er[1] * er[1]).sqrt() as f64;
            let cos: Vec<f64> = (0..3)
                .map(|j| {
                    let wr = w.row(j);
                    let wn = (wr[0] * wr[0] + wr[1] * wr[1]).sqrt() as f64;
                    (er[0] * wr[0] + er[1] * wr[1]) as f64 / (en * wn)
                })
                .collect();
            let lse = cos.iter().map(|c| c.exp()).sum::<f64>().ln();
            expected += lse - cos[y];
        }
        expected /= 2.0;
        let got = aam_softmax_loss_value(&e, &labels, &w, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn margin_fallback_below_cos_pi_minus_m() {
        let m = 0.2f64;
        let c = (std::f64::consts::PI - m).cos() - 0.01;
        assert_eq!(phi(c, m).0, c - m * m.sin());
        let c = 0.3f64;
        let theta = c.acos();
        assert!((phi(c, m).0 - (theta + m).cos()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let cfg = AamConfig::new(2);
        let e = Tensor::full([1, 2], 1.0);
        let w = Tensor::full([2, 2], 1.0);
        assert!(matches!(aam_softmax_loss_value(&e, &[2], &w, &cfg), Err(crate::Error::Input(_))));
    }
}
