//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse execution order, visiting
//! each exactly once, and returns the gradients of every leaf and parameter
//! that the loss depends on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{config_err, Error, Result};
use crate::ops::{self, BnMode, Conv1dGeom, Conv1dSpec, Conv2dGeom, Conv2dSpec, Segments};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A differentiable operation defined outside this module.
pub trait Function: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradient for each input (in order), given the forward values and the
    /// gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<f32>, inv_std: Vec<f32>, mode: BnMode },
    Linear { x: Var, w: Var, b: Option<Var>, d_out: usize, d_in: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddColumn { x: Var, col: Var },
    Concat { parts: Vec<Var> },
    Stack { parts: Vec<Var> },
    Reshape { x: Var },
    MeanTime { x: Var },
    SegmentMean { x: Var, segments: Segments },
    ExpandSegments { x: Var, segments: Segments },
    StatsPool { x: Var },
    Sum { x: Var },
    Custom { inputs: Vec<Var>, f: Box<dyn Function> },
}

struct Node {
    value: Value,
    op: Op,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance.
    pub var: Vec<f32>,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    recording: bool,
    param_vars: HashMap<ParamId, Var>,
    buffer_updates: Vec<(BufferId, Tensor)>,
    macs: u64,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape<'static> {
    /// A recording tape with no parameter store attached.
    pub fn new() -> Self {
        Tape::build(None, true)
    }
}

impl<'p> Tape<'p> {
    fn build(store: Option<&'p ParamStore>, recording: bool) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            recording,
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
            macs: 0,
        }
    }

    /// Recording tape whose parameter leaves read from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape::build(Some(store), true)
    }

    /// Evaluation-only tape; [`Tape::backward`] on it is a usage error.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape::build(Some(store), false)
    }

    pub fn without_grad(mut self) -> Self {
        self.recording = false;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn store(&self) -> Result<&'p ParamStore> {
        self.store.ok_or_else(|| Error::Usage("tape has no parameter store".into()))
    }

    /// Multiply-accumulates executed by convolution and linear nodes so far.
    pub fn executed_macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.expect("param node without store").param(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value: Value::Owned(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf reading a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.store()?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn record_buffer_update(&mut self, id: BufferId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let geom = Conv1dGeom::new(xv, wv, bv, spec)?;
        let y = ops::conv1d_forward(&geom, xv.data(), wv.data(), bv.map(Tensor::data));
        self.macs += geom.macs();
        self.push("conv1d", y, Op::Conv1d { x, w, b, geom })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let geom = Conv2dGeom::new(xv, wv, bv, spec)?;
        let y = ops::conv2d_forward(&geom, xv.data(), wv.data(), bv.map(Tensor::data));
        self.macs += geom.macs();
        self.push("conv2d", y, Op::Conv2d { x, w, b, geom })
    }

    /// Batch norm over axis 0. Train mode also returns the batch statistics so
    /// the caller can update running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: BnMode,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let params = ops::BatchNormParams {
            gamma: gamma.map(|g| self.value(g)),
            beta: beta.map(|b| self.value(b)),
            running_mean,
            running_var,
        };
        let out = ops::batchnorm(self.value(x), params, mode, eps)?;
        let stats = out.batch_var.map(|var| BatchStats { mean: out.mean.clone(), var });
        let op = Op::BatchNorm { x, gamma, beta, mean: out.mean, inv_std: out.inv_std, mode };
        Ok((self.push("batchnorm", out.output, op)?, stats))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let (d_out, d_in) = ops::linear_dims(xv, wv, bv)?;
        let y = ops::linear_forward(xv, wv.data(), bv.map(Tensor::data), d_out, d_in);
        self.macs += (d_out * xv.len()) as u64;
        self.push("linear", y, Op::Linear { x, w, b, d_out, d_in })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push("relu", y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(x));
        self.push("sigmoid", y, Op::Sigmoid { x })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push("add", y, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul", y, Op::Mul { a, b })
    }

    /// `x: C×K` plus `col: C` broadcast along the second axis.
    pub fn add_column(&mut self, x: Var, col: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(col);
        let [c, k] = *xv.shape() else {
            return Err(config_err!("add_column expects C×K, got {:?}", xv.shape()));
        };
        if cv.len() != c {
            return Err(config_err!("add_column: column has {} entries for {c} rows", cv.len()));
        }
        let mut data = xv.data().to_vec();
        for (row, &b) in data.chunks_exact_mut(k).zip(cv.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let y = Tensor::from_parts(vec![c, k], data);
        self.push("add_column", y, Op::AddColumn { x, col })
    }

    /// Concatenate along axis 0; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| config_err!("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(config_err!("concat: trailing shape {:?} vs {:?}", &v.shape()[1..], tail));
            }
            rows += v.dim(0);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec() })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| config_err!("stack of zero tensors"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape() != &inner[..] {
                return Err(config_err!("stack: shape {:?} vs {:?}", v.shape(), inner));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push("stack", Tensor::from_parts(shape, data), Op::Stack { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", y, Op::Reshape { x })
    }

    /// `C×T → C` mean over time.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        self.push("mean_time", y, Op::MeanTime { x })
    }

    /// `C×T → C×K` segment means.
    pub fn segment_mean(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let y = ops::segment_means(self.value(x), segments)?;
        self.push("segment_mean", y, Op::SegmentMean { x, segments: segments.clone() })
    }

    /// `C×K → C×T`, repeating each column over its segment.
    pub fn expand_segments(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let y = ops::expand_segments(self.value(x), segments)?;
        self.push("expand_segments", y, Op::ExpandSegments { x, segments: segments.clone() })
    }

    pub fn stats_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::stats_pool(self.value(x))?;
        self.push("stats_pool", y, Op::StatsPool { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum { x })
    }

    /// Record an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, f: Box<dyn Function>) -> Result<Var> {
        let name = f.name();
        self.push(name, output, Op::Custom { inputs: inputs.to_vec(), f })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Usage("backward called on a tape that did not record".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = BTreeMap::new();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params.insert(*id, g.clone());
                    grads[i] = Some(g);
                }
                op => self.backward_node(op, Var(i), &g, &mut grads)?,
            }
        }
        Ok(Gradients { vars: grads, params })
    }

    fn backward_node(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let shaped = |like: Var, data: Vec<f32>| Tensor::from_parts(self.shape(like).to_vec(), data);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv1d_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data());
                acc(*x, shaped(*x, gx));
                acc(*w, shaped(*w, gw));
                if let Some(b) = b {
                    acc(*b, shaped(*b, gb));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data());
                acc(*x, shaped(*x, gx));
                acc(*w, shaped(*w, gw));
                if let Some(b) = b {
                    acc(*b, shaped(*b, gb));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, mode } => {
                let gv = gamma.map(|v| self.value(v).data());
                let (gx, gg, gb) = ops::batchnorm_backward(self.value(*x).data(), g.data(), gv, mean, inv_std, *mode);
                acc(*x, shaped(*x, gx));
                if let Some(v) = gamma {
                    acc(*v, shaped(*v, gg));
                }
                if let Some(v) = beta {
                    acc(*v, shaped(*v, gb));
                }
            }
            Op::Linear { x, w, b, d_out, d_in } => {
                let (gx, gw, gb) =
                    ops::linear_backward(self.value(*x).data(), self.value(*w).data(), g.data(), *d_out, *d_in);
                acc(*x, shaped(*x, gx));
                acc(*w, shaped(*w, gw));
                if let Some(b) = b {
                    acc(*b, shaped(*b, gb));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = xv.iter().zip(g.data()).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
                acc(*x, shaped(*x, data));
            }
            Op::Sigmoid { x } => {
                let y = self.value(out).data();
                let data = y.iter().zip(g.data()).map(|(s, d)| d * s * (1.0 - s)).collect();
                acc(*x, shaped(*x, data));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(bv).map(|(d, v)| d * v).collect();
                let gb = g.data().iter().zip(av).map(|(d, v)| d * v).collect();
                acc(*a, shaped(*a, ga));
                acc(*b, shaped(*b, gb));
            }
            Op::AddColumn { x, col } => {
                let k = g.dim(1);
                let gc = g.data().chunks_exact(k).map(|r| r.iter().sum()).collect();
                acc(*x, g.clone());
                acc(*col, shaped(*col, gc));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, shaped(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Stack { parts } => {
                for (&p, chunk) in parts.iter().zip(g.data().chunks_exact(g.len() / parts.len())) {
                    acc(p, shaped(p, chunk.to_vec()));
                }
            }
            Op::Reshape { x } => acc(*x, shaped(*x, g.data().to_vec())),
            Op::MeanTime { x } => {
                let t = self.value(*x).dim(1);
                let data = g.data().iter().flat_map(|&d| std::iter::repeat_n(d / t as f32, t)).collect();
                acc(*x, shaped(*x, data));
            }
            Op::SegmentMean { x, segments } => {
                let k = segments.count();
                let mut data = Vec::with_capacity(self.value(*x).len());
                for grow in g.data().chunks_exact(k) {
                    for (d, r) in grow.iter().zip(segments.ranges()) {
                        let n = r.len();
                        data.extend(std::iter::repeat_n(d / n as f32, n));
                    }
                }
                acc(*x, shaped(*x, data));
            }
            Op::ExpandSegments { x, segments } => {
                let t = segments.frames();
                let mut data = Vec::with_capacity(self.value(*x).len());
                for grow in g.data().chunks_exact(t) {
                    data.extend(segments.ranges().map(|r| grow[r].iter().sum::<f32>()));
                }
                acc(*x, shaped(*x, data));
            }
            Op::StatsPool { x } => {
                let xv = self.value(*x);
                let (c, t) = (xv.dim(0), xv.dim(1));
                let y = self.value(out).data();
                let mut data = Vec::with_capacity(xv.len());
                for (ch, row) in xv.data().chunks_exact(t).enumerate() {
                    let (m, s) = (y[ch], y[c + ch]);
                    let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / t as f32;
                    let gm = g.data()[ch] / t as f32;
                    let gs = if var > ops::STATS_VAR_FLOOR { g.data()[c + ch] / (t as f32 * s) } else { 0.0 };
                    data.extend(row.iter().map(|v| gm + gs * (v - m)));
                }
                acc(*x, shaped(*x, data));
            }
            Op::Sum { x } => {
                let d = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x).to_vec(), d));
            }
            Op::Custom { inputs, f } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = f.backward(&values, self.value(out), g)?;
                for (&v, gi) in inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(v) {
                            return Err(config_err!("{}: gradient shape {:?} for input {:?}", f.name(), gi.shape(), self.shape(v)));
                        }
                        acc(v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf (input or parameter var). `None` if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Adds every parameter gradient into `Parameter::gradient`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.param_mut(*id).gradient.add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([3], vec![1., -2., 5.]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_recording() {
        let store = ParamStore::new();
        let mut tape = Tape::inference(&store);
        let x = tape.input(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn param_gradients_accumulate_and_unreached_stay_zero() {
        let mut store = ParamStore::new();
        let a = store.add_param("a", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = store.add_param("unused", Tensor::zeros([2])).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut tape = Tape::with_params(&store);
                let av = tape.param(a).unwrap();
                let again = tape.param(a).unwrap();
                assert_eq!(av, again);
                let s = tape.sum(av).unwrap();
                tape.backward(s).unwrap()
            };
            grads.accumulate_into(&mut store);
        }
        assert_eq!(store.param(a).gradient.data(), &[2.0, 2.0]);
        assert_eq!(store.param(unused).gradient.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1], vec![f32::MAX]).unwrap());
        let y = tape.add(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "add" })));
    }
}
