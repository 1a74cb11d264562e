//! Minimal differentiable classifiers: forward pass, per-example loss,
//! input and parameter gradients, and an SGD step.
//!
//! A [`Network`] is a fixed stack of dense / conv / pool / ReLU layers over
//! one flat parameter buffer. That keeps optimizer state, finiteness checks
//! and finite-difference tests trivial.

mod layers;
mod optim;
mod scalar;

pub use layers::{ConvGeom, DenseGeom, Layer, LayerKind, PoolGeom};
pub use optim::{LrPhase, LrSchedule, Sgd};
pub use scalar::Scalar;
pub(crate) use scalar::gemm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use layers::Saved;

/// Input geometry of one example: channels, height, width. Flat feature
/// vectors use `[1, 1, d]`.
pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
    /// conv(16, 5x5) - ReLU - maxpool(2) - conv(32, 5x5) - ReLU - maxpool(2)
    /// - dense(100) - ReLU - dense(classes)
    Lenet,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp { .. } => "mlp",
            Architecture::Lenet => "lenet",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Sum of squared differences between logits and the one-hot label.
    /// Only used to check optimizer arithmetic against closed forms.
    SquaredError,
}

/// A labelled mini-batch, validated against a class count at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T = f32> {
    inputs: Vec<T>,
    labels: Vec<usize>,
    shape: Shape,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Vec<T>, labels: Vec<usize>, shape: Shape, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let per = shape.iter().product::<usize>();
        if inputs.len() != per * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), shape[0], shape[1], shape[2]],
                found: vec![inputs.len()],
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[T] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Same labels, new inputs of identical length.
    pub fn with_inputs(&self, inputs: Vec<T>) -> Self {
        assert_eq!(inputs.len(), self.inputs.len());
        Self {
            inputs,
            labels: self.labels.clone(),
            shape: self.shape,
        }
    }

    /// Sub-batch of the given example positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        let per = self.example_len();
        let mut inputs = Vec::with_capacity(per * positions.len());
        for &i in positions {
            inputs.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
        }
        Self {
            inputs,
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
        }
    }
}

/// What a combined forward/backward evaluation should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub input_grad: bool,
    pub param_grad: bool,
}

/// Result of [`Network::evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub logits: Vec<T>,
    pub losses: Vec<T>,
    /// Gradient of each example's own loss w.r.t. its input.
    pub input_grad: Option<Vec<T>>,
    /// Gradient of the batch-mean loss w.r.t. the parameters.
    pub param_grad: Option<Vec<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn mean_loss(&self) -> T {
        self.losses.iter().copied().sum::<T>() / T::of(self.losses.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<T = f32> {
    arch: Architecture,
    input_shape: Shape,
    classes: usize,
    layers: Vec<Layer>,
    params: Vec<T>,
    loss: LossKind,
}

pub type Model = Network<f32>;

struct Trace<T> {
    acts: Vec<Vec<T>>,
    saved: Vec<Saved<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with Kaiming-uniform (fan-in) weights and zero
    /// biases, drawn from the `init` substream of `seed`.
    pub fn new(arch: Architecture, input_shape: Shape, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("network needs at least one class and a non-empty input"));
        }
        let kinds = layer_plan(&arch, input_shape, classes)?;
        let mut layers = Vec::with_capacity(kinds.len());
        let mut offset = 0;
        for kind in kinds {
            let mut layer = Layer {
                kind,
                w_off: offset,
                b_off: offset,
            };
            if let Some((nw, _, nb)) = layer.param_shape() {
                layer.b_off = offset + nw;
                offset += nw + nb;
            }
            layers.push(layer);
        }

        let mut params = vec![T::zero(); offset];
        let mut rng = rng::substream(seed, "init", 0);
        for layer in &layers {
            if let Some((nw, fan_in, _)) = layer.param_shape() {
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[layer.w_off..layer.w_off + nw] {
                    *p = T::of(rng.random_range(-bound..bound));
                }
            }
        }
        Ok(Self {
            arch,
            input_shape,
            classes,
            layers,
            params,
            loss: LossKind::CrossEntropy,
        })
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            input_shape: self.input_shape,
            classes: self.classes,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::of(p.to_f64().unwrap_or(f64::NAN))).collect(),
            loss: self.loss,
        }
    }

    fn check(&self, batch: &Batch<T>) -> Result<()> {
        if batch.shape != self.input_shape {
            let mut found = vec![batch.len()];
            found.extend(batch.shape);
            let mut expected = vec![batch.len()];
            expected.extend(self.input_shape);
            return Err(Error::ShapeMismatch { expected, found });
        }
        if let Some((index, &label)) =
            batch.labels.iter().enumerate().find(|(_, &l)| l >= self.classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    fn run_forward(&self, x: &[T], n: usize, keep: bool) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let (y, s) = layers::forward(layer, &self.params, &cur, n);
            if keep {
                acts.push(std::mem::replace(&mut cur, y));
                saved.push(s);
            } else {
                cur = y;
            }
        }
        acts.push(cur);
        Trace { acts, saved }
    }

    /// Logits, `batch.len() x classes`, row-major.
    pub fn forward(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        self.check(batch)?;
        let mut trace = self.run_forward(&batch.inputs, batch.len(), false);
        Ok(trace.acts.pop().expect("output"))
    }

    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?, self.classes))
    }

    pub fn loss_per_example(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let logits = self.forward(batch)?;
        Ok(self.losses_from_logits(&logits, &batch.labels).0)
    }

    /// Per-example losses and d(loss_i)/d(logits_i).
    fn losses_from_logits(&self, logits: &[T], labels: &[usize]) -> (Vec<T>, Vec<T>) {
        let c = self.classes;
        let mut losses = Vec::with_capacity(labels.len());
        let mut dlogits = vec![T::zero(); logits.len()];
        for ((row, d), &y) in logits.chunks_exact(c).zip(dlogits.chunks_exact_mut(c)).zip(labels) {
            match self.loss {
                LossKind::CrossEntropy => {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (dj, &z) in d.iter_mut().zip(row) {
                        *dj = (z - m).exp();
                        sum = sum + *dj;
                    }
                    for dj in d.iter_mut() {
                        *dj = *dj / sum;
                    }
                    d[y] = d[y] - T::one();
                    losses.push(m + sum.ln() - row[y]);
                }
                LossKind::SquaredError => {
                    let mut l = T::zero();
                    for (j, (dj, &z)) in d.iter_mut().zip(row).enumerate() {
                        let t = if j == y { T::one() } else { T::zero() };
                        l = l + (z - t) * (z - t);
                        *dj = T::of(2.0) * (z - t);
                    }
                    losses.push(l);
                }
            }
        }
        (losses, dlogits)
    }

    /// One forward pass plus whatever gradients `want` asks for.
    pub fn evaluate(&self, batch: &Batch<T>, want: Want) -> Result<Evaluation<T>> {
        self.check(batch)?;
        let n = batch.len();
        let backprop = want.input_grad || want.param_grad;
        let mut trace = self.run_forward(&batch.inputs, n, backprop);
        let logits = trace.acts.last().expect("output").clone();
        let (losses, dlogits) = self.losses_from_logits(&logits, &batch.labels);
        if !backprop {
            return Ok(Evaluation {
                logits,
                losses,
                input_grad: None,
                param_grad: None,
            });
        }

        let mut param_grad = want.param_grad.then(|| vec![T::zero(); self.params.len()]);
        let mut d = dlogits;
        let last = self.layers.len() - 1;
        for i in (0..=last).rev() {
            let need_dx = i > 0 || want.input_grad;
            let dx = layers::backward(
                &self.layers[i],
                &self.params,
                &trace.acts[i],
                &trace.acts[i + 1],
                &trace.saved[i],
                &d,
                n,
                param_grad.as_deref_mut(),
                need_dx,
            );
            trace.acts.truncate(i + 1);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
        // Per-example gradients were summed over the batch; report the mean.
        if let Some(g) = param_grad.as_mut() {
            let scale = T::one() / T::of(n as f64);
            g.iter_mut().for_each(|v| *v = *v * scale);
        }
        Ok(Evaluation {
            logits,
            losses,
            input_grad: want.input_grad.then_some(d),
            param_grad,
        })
    }

    /// Gradient of each example's loss w.r.t. its own input, batch-shaped.
    pub fn grad_input(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let ev = self.evaluate(
            batch,
            Want {
                input_grad: true,
                param_grad: false,
            },
        )?;
        Ok(ev.input_grad.expect("requested"))
    }

    /// Gradient of the batch-mean loss w.r.t. the parameters, and that loss.
    pub fn param_grad(&self, batch: &Batch<T>) -> Result<(Vec<T>, T)> {
        let ev = self.evaluate(
            batch,
            Want {
                input_grad: false,
                param_grad: true,
            },
        )?;
        let loss = ev.mean_loss();
        Ok((ev.param_grad.expect("requested"), loss))
    }

    /// Plain gradient step `theta <- theta - lr * grad(mean loss)`.
    pub fn sgd_step(&mut self, batch: &Batch<T>, lr: T) -> Result<()> {
        if !(lr >= T::zero()) || !lr.is_finite() {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        let (grad, _) = self.param_grad(batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter gradient",
                epoch: 0,
                step: 0,
            });
        }
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p = *p - lr * *g;
        }
        Ok(())
    }
}

/// Row-wise softmax of `logits` with `classes` columns.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
        let s = e.iter().copied().sum::<T>();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Index of the first maximum in each row.
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn layer_plan(arch: &Architecture, shape: Shape, classes: usize) -> Result<Vec<LayerKind>> {
    let flat = shape.iter().product::<usize>();
    let mut kinds = Vec::new();
    match arch {
        Architecture::Linear => kinds.push(LayerKind::Dense(DenseGeom {
            inputs: flat,
            outputs: classes,
        })),
        Architecture::Mlp { hidden } => {
            let mut inputs = flat;
            for &h in hidden {
                if h == 0 {
                    return Err(Error::config("hidden layer width must be positive"));
                }
                kinds.push(LayerKind::Dense(DenseGeom { inputs, outputs: h }));
                kinds.push(LayerKind::Relu { len: h });
                inputs = h;
            }
            kinds.push(LayerKind::Dense(DenseGeom {
                inputs,
                outputs: classes,
            }));
        }
        Architecture::Lenet => {
            let [c, h, w] = shape;
            let mut geom = (c, h, w);
            for out_ch in [16, 32] {
                let (ch, hh, ww) = geom;
                if hh < 6 || ww < 6 {
                    return Err(Error::config(format!(
                        "lenet needs larger inputs than {c}x{h}x{w}"
                    )));
                }
                let conv = ConvGeom {
                    in_ch: ch,
                    in_h: hh,
                    in_w: ww,
                    out_ch,
                    kernel: 5,
                };
                kinds.push(LayerKind::Conv(conv));
                kinds.push(LayerKind::Relu {
                    len: out_ch * conv.out_h() * conv.out_w(),
                });
                let pool = PoolGeom {
                    ch: out_ch,
                    in_h: conv.out_h(),
                    in_w: conv.out_w(),
                };
                kinds.push(LayerKind::MaxPool(pool));
                geom = (out_ch, pool.out_h(), pool.out_w());
            }
            let flat = geom.0 * geom.1 * geom.2;
            kinds.push(LayerKind::Dense(DenseGeom {
                inputs: flat,
                outputs: 100,
            }));
            kinds.push(LayerKind::Relu { len: 100 });
            kinds.push(LayerKind::Dense(DenseGeom {
                inputs: 100,
                outputs: classes,
            }));
        }
    }
    Ok(kinds)
}

#[cfg(test)]
mod tests;
