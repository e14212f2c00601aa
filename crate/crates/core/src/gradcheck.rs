//! Finite-difference gradient checking with a fourth-order central stencil.
//!
//! The numeric side only ever runs forward passes on a non-recording tape, so
//! it stays independent of every backward rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f32 = 1e-3;

/// Comparison of analytic and numeric gradients for one tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub label: String,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradComparison {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference norm when both are tiny.
    pub fn relative_error(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for (a, n) in self.analytic.data().iter().zip(self.numeric.data()) {
            let (a, n) = (*a as f64, *n as f64);
            diff += (a - n).powi(2);
            na += a * a;
            nn += n * n;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-6 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        }
    }
}

/// Fixed random weights `r` in `[-1, 1)` matching the shape of `y`.
fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

/// `Σ y ⊙ r` for a fixed random `r`; turns any output into a scalar loss with
/// non-degenerate gradients.
pub fn random_projection(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = projection_weights(tape.shape(y), seed);
    let rv = tape.input(r);
    let prod = tape.mul(y, rv)?;
    tape.sum(prod)
}

/// The same projection evaluated in f64 outside the tape. Rounding the
/// projected loss to f32 would quantize finite differences at the ulp of the
/// whole sum, which swamps small gradients.
fn project_f64(y: &Tensor, seed: u64) -> f64 {
    let r = projection_weights(y.shape(), seed);
    y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Fourth-order central difference `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`
/// of `eval` with respect to one scalar that `set` writes.
fn stencil(orig: f32, step: f32, mut f: impl FnMut(f32) -> Result<f64>) -> Result<f32> {
    let h = step as f64;
    let p2 = f(orig + 2.0 * step)?;
    let p1 = f(orig + step)?;
    let m1 = f(orig - step)?;
    let m2 = f(orig - 2.0 * step)?;
    f(orig)?;
    Ok(((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)) as f32)
}

/// Checks the gradient of `r · f(inputs)` with respect to each input, where
/// `r` is drawn from `seed`. `f` may return a tensor of any shape.
pub fn check_inputs<F>(inputs: &[Tensor], step: f32, seed: u64, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let loss = random_projection(&mut tape, y, seed)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new().without_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(project_f64(tape.value(y), seed))
    };

    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            numeric.push(stencil(orig, step, |v| {
                work[i].data_mut()[j] = v;
                eval(&work)
            })?);
        }
        out.push(GradComparison {
            label: format!("input{i}"),
            numeric: Tensor::from_parts(a.shape().to_vec(), numeric),
            analytic: a,
        });
    }
    Ok(out)
}

/// Checks the gradient of `r · f()` with respect to stored parameters.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], step: f32, seed: u64, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape)?;
        let loss = random_projection(&mut tape, y, seed)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let y = f(&mut tape)?;
        Ok(project_f64(tape.value(y), seed))
    };
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let shape = store.param(id).value.shape().to_vec();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(shape.clone()));
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = store.param(id).value.data()[j];
            numeric.push(stencil(orig, step, |v| {
                store.param_mut(id).value.data_mut()[j] = v;
                eval(store)
            })?);
        }
        out.push(GradComparison {
            label: store.param(id).name.clone(),
            numeric: Tensor::from_parts(shape, numeric),
            analytic,
        });
    }
    Ok(out)
}

/// Random tensor in `[-1, 1)` keeping values away from `±margin` around zero,
/// so ReLU kinks are not straddled by a finite-difference step.
pub fn random_away_from_zero<R: Rng>(shape: &[usize], margin: f32, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Gradient checks for every differentiable tape operation, the AAM-softmax
/// loss and one complete D-TDNN layer with context-aware masking
/// (`C = 8`, `T = 12`, `k = 4`), all drawn from `seed`.
pub fn standard_suite(seed: u64) -> Result<Vec<GradComparison>> {
    use crate::model::{BlockConfig, CamConfig, DenseTdnnLayer, ParamBuilder};
    use crate::ops::{BnMode, Conv1dSpec, Conv2dSpec, Segments};
    use crate::training::{aam_softmax_loss, AamConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>| -> Result<()> {
        for mut r in check_inputs(&inputs, DEFAULT_STEP, seed, f)? {
            r.label = format!("{name}/{}", r.label);
            out.push(r);
        }
        Ok(())
    };
    let mut uni = |shape: &[usize]| Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng);

    let (x, w, b) = (uni(&[3, 11]), uni(&[4, 3, 3]), uni(&[4]));
    run("conv1d", vec![x, w, b], &|t, v| t.conv1d(v[0], v[1], Some(v[2]), Conv1dSpec::new(2, 2, 2)))?;
    let (x, w, b) = (uni(&[2, 7, 6]), uni(&[3, 2, 3, 3]), uni(&[3]));
    run("conv2d", vec![x, w, b], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1, 1, 1)))?;
    let (x, w, b) = (uni(&[4, 5]), uni(&[3, 5]), uni(&[3]));
    run("linear", vec![x, w, b], &|t, v| t.linear(v[0], v[1], Some(v[2])))?;
    let (x, g, b) = (uni(&[3, 9]), uni(&[3]), uni(&[3]));
    let (rm, rv) = (uni(&[3]), uni(&[3]).map(|v| v.abs() + 0.5));
    run("batchnorm_train", vec![x.clone(), g.clone(), b.clone()], &|t, v| {
        Ok(t.batchnorm(v[0], Some(v[1]), Some(v[2]), &rm, &rv, BnMode::Train, 1e-5)?.0)
    })?;
    run("batchnorm_infer", vec![x, g, b], &|t, v| {
        Ok(t.batchnorm(v[0], Some(v[1]), Some(v[2]), &rm, &rv, BnMode::Infer, 1e-5)?.0)
    })?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    run("relu", vec![random_away_from_zero(&[4, 6], 0.05, &mut rng2)], &|t, v| t.relu(v[0]))?;
    let mut uni = |shape: &[usize]| Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng2);
    run("sigmoid", vec![uni(&[4, 6]).scale(3.0)], &|t, v| t.sigmoid(v[0]))?;
    run("add", vec![uni(&[3, 4]), uni(&[3, 4])], &|t, v| t.add(v[0], v[1]))?;
    run("mul", vec![uni(&[3, 4]), uni(&[3, 4])], &|t, v| t.mul(v[0], v[1]))?;
    run("add_column", vec![uni(&[3, 4]), uni(&[3])], &|t, v| t.add_column(v[0], v[1]))?;
    run("concat", vec![uni(&[2, 5]), uni(&[3, 5])], &|t, v| t.concat(&[v[0], v[1]]))?;
    run("stack", vec![uni(&[4]), uni(&[4])], &|t, v| t.stack(&[v[0], v[1]]))?;
    run("reshape", vec![uni(&[2, 6])], &|t, v| t.reshape(v[0], &[3, 4]))?;
    run("mean_time", vec![uni(&[3, 7])], &|t, v| t.mean_time(v[0]))?;
    let segs = Segments::new(10, 4)?;
    run("segment_mean", vec![uni(&[3, 10])], &|t, v| t.segment_mean(v[0], &segs))?;
    run("expand_segments", vec![uni(&[3, 3])], &|t, v| t.expand_segments(v[0], &segs))?;
    run("stats_pool", vec![uni(&[3, 8])], &|t, v| t.stats_pool(v[0]))?;
    run("sum", vec![uni(&[2, 3])], &|t, v| t.sum(v[0]))?;
    let aam = AamConfig { margin: 0.2, scale: 4.0, num_classes: 4 };
    run("aam_softmax", vec![uni(&[3, 5]), uni(&[4, 5])], &|t, v| aam_softmax_loss(t, v[0], &[2, 0, 3], v[1], &aam))?;

    // One D-TDNN layer with CAM, C = 8, T = 12, k = 4. Setups whose ReLU
    // pre-activations come within `KINK_MARGIN` of zero are redrawn: a central
    // difference across a kink measures neither one-sided derivative. The
    // larger step keeps f32 rounding of the layer output below the signal of
    // the small CAM gradients.
    const LAYER_STEP: f32 = 5e-3;
    const KINK_MARGIN: f32 = 0.05;
    let mut attempts = 0;
    let mut store = ParamStore::new();
    let block = BlockConfig { num_layers: 1, growth_rate: 4, bottleneck_channels: 8, kernel: 3, dilation: 2 };
    let cam = CamConfig { reduction: 2, segment_pooling: true };
    let layer = DenseTdnnLayer::new(&mut ParamBuilder::new(&mut store, seed), "layer", 8, &block, Some(&cam), 5)?;
    let initial: Vec<Tensor> = store.params().iter().map(|p| p.value.clone()).collect();
    let mut s = Tensor::zeros([8, 12]);
    for _ in 0..5000 {
        for (p, init) in store.params_mut().iter_mut().zip(&initial) {
            p.value = if p.name.contains(".bn.") {
                let shift = if p.name.ends_with("weight") { 1.0 } else { 0.0 };
                Tensor::rand_uniform(p.value.shape().to_vec(), shift - 0.3, shift + 0.3, &mut rng2)
            } else if p.name.ends_with("bias") {
                Tensor::rand_uniform(p.value.shape().to_vec(), -0.5, 0.5, &mut rng2)
            } else {
                init.clone()
            };
        }
        // Place BN1 outputs away from zero by inverting the normalization.
        let z1 = random_away_from_zero(&[8, 12], 0.1, &mut rng2).scale(1.5);
        let bn1 = &layer.bn1;
        let (g, b) = (store.param(bn1.gamma.unwrap()).value.data(), store.param(bn1.beta.unwrap()).value.data());
        let (rm, rv) = (store.buffer(bn1.running_mean).value.data(), store.buffer(bn1.running_var).value.data());
        let data = z1
            .data()
            .chunks_exact(12)
            .enumerate()
            .flat_map(|(c, row)| row.iter().map(move |z| (z - b[c]) / g[c] * (rv[c] + 1e-5).sqrt() + rm[c]))
            .collect();
        s = Tensor::from_parts(vec![8, 12], data);
        attempts += 1;
        if relu_margin(&store, &layer, &s)? > KINK_MARGIN {
            break;
        }
    }
    log::debug!("gradient suite seed {seed}: layer setup accepted after {attempts} draws");
    let ids: Vec<ParamId> = (0..store.params().len()).map(ParamId).collect();
    for mut r in check_params(&mut store, &ids, LAYER_STEP, seed, |t| {
        let sv = t.input(s.clone());
        layer.forward(t, sv, BnMode::Infer)
    })? {
        r.label = format!("dtdnn_layer/{}", r.label);
        out.push(r);
    }
    let layer_input = {
        let grads = {
            let mut t = Tape::with_params(&store);
            let sv = t.input(s.clone());
            let y = layer.forward(&mut t, sv, BnMode::Infer)?;
            let l = random_projection(&mut t, y, seed)?;
            let g = t.backward(l)?;
            g.wrt(sv).cloned().expect("layer input reaches the loss")
        };
        let eval = |x: &Tensor| -> Result<f64> {
            let mut t = Tape::inference(&store);
            let sv = t.input(x.clone());
            let y = layer.forward(&mut t, sv, BnMode::Infer)?;
            Ok(project_f64(t.value(y), seed))
        };
        let mut work = s.clone();
        let mut numeric = Vec::with_capacity(s.len());
        for j in 0..s.len() {
            let orig = work.data()[j];
            numeric.push(stencil(orig, LAYER_STEP, |v| {
                work.data_mut()[j] = v;
                eval(&work)
            })?);
        }
        GradComparison { label: "dtdnn_layer/input".into(), numeric: Tensor::from_parts(s.shape().to_vec(), numeric), analytic: grads }
    };
    out.push(layer_input);
    Ok(out)
}

/// Smallest `|z|` over every ReLU input inside `layer` when fed `s`.
fn relu_margin(store: &ParamStore, layer: &crate::model::DenseTdnnLayer, s: &Tensor) -> Result<f32> {
    use crate::ops::{BnMode, Conv1dSpec};
    let mut t = Tape::inference(store);
    let sv = t.input(s.clone());
    let mut pre = vec![layer.bn1.forward(&mut t, sv, BnMode::Infer)?];
    let h = t.relu(pre[0])?;
    let w = t.param(layer.fnn)?;
    let h = t.conv1d(h, w, None, Conv1dSpec::POINTWISE)?;
    pre.push(layer.bn2.forward(&mut t, h, BnMode::Infer)?);
    if let Some(cam) = &layer.cam {
        let x = t.relu(pre[1])?;
        let segments = cam.segments(t.shape(x)[1])?;
        let e_g = t.mean_time(x)?;
        let context = if cam.segment_pooling {
            let e_s = t.segment_mean(x, &segments)?;
            t.add_column(e_s, e_g)?
        } else {
            let c = t.shape(e_g)[0];
            t.reshape(e_g, &[c, 1])?
        };
        let (w1, b1) = (t.param(cam.w1)?, t.param(cam.b1)?);
        pre.push(t.conv1d(context, w1, Some(b1), Conv1dSpec::POINTWISE)?);
    }
    Ok(pre.iter().flat_map(|v| t.value(*v).data().iter().map(|z| z.abs())).fold(f32::INFINITY, f32::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Conv1dSpec;

    #[test]
    fn matches_on_conv1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform([2, 7], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform([3, 2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([3], -1.0, 1.0, &mut rng);
        let res = check_inputs(&[x, w, b], DEFAULT_STEP, 7, |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), Conv1dSpec::new(2, 1, 1))
        })
        .unwrap();
        for r in res {
            assert!(r.relative_error() < 1e-3, "{} {}", r.label, r.relative_error());
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        #[derive(Debug)]
        struct Doubled;
        impl crate::autograd::Function for Doubled {
            fn name(&self) -> &'static str {
                "doubled"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
                // true derivative is 2; report 3
                Ok(vec![Some(grad.scale(3.0))])
            }
        }
        let x = Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap();
        let res = check_inputs(&[x], DEFAULT_STEP, 0, |t, v| {
            let y = t.value(v[0]).scale(2.0);
            t.custom(&[v[0]], y, Box::new(Doubled))
        })
        .unwrap();
        assert!(res[0].relative_error() > 0.1);
    }
}
