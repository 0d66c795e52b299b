//! Feed-forward classifier with softmax cross-entropy, analytic gradients,
//! SGD/Adam, and flat parameter import/export for federated exchange.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, init_seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::config("hidden_dims", "every hidden width must be at least 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Weight matrix `[out, in]` (row-major) followed by its bias `[out]`, per layer.
    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            blocks.push(Block {
                shape: vec![fan_out, fan_in],
                offset,
            });
            offset += fan_in * fan_out;
            blocks.push(Block {
                shape: vec![fan_out],
                offset,
            });
            offset += fan_out;
        }
        Layout { blocks }
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Rank-1 blocks are biases.
    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }
}

/// Flat model weights plus the layout that gives them shape.
#[derive(Clone, Debug)]
pub struct ParameterVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: PartialEq> PartialEq for ParameterVector<T> {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.same_layout(other)
    }
}

impl<T> ParameterVector<T> {
    pub fn from_parts(values: Vec<T>, layout: Arc<Layout>) -> Result<Self> {
        check_len(layout.total_len(), values.len())?;
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }
}

impl<T: Scalar> ParameterVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![T::zero(); layout.total_len()],
            layout,
        }
    }

    /// Overwrites the values with `other`'s, keeping the allocation.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_layout(other)?;
        self.values.copy_from_slice(&other.values);
        Ok(())
    }

    /// FNV-1a over the little-endian `f64` bit patterns; used in round logs.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_f64_lossy().to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

/// Anything that carries a feature vector and a class label.
pub trait Labeled<T> {
    fn features(&self) -> &[T];
    fn label(&self) -> usize;
}

impl<T> Labeled<T> for (Vec<T>, usize) {
    fn features(&self) -> &[T] {
        &self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

pub fn init_parameters<T: Scalar>(config: &ModelConfig) -> Result<ParameterVector<T>> {
    config.validate()?;
    let layout = Arc::new(config.layout());
    let mut params = ParameterVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    for (layer, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound is positive and finite");
        let block = &layout.blocks[2 * layer];
        for w in &mut params.values[block.range()] {
            *w = T::lit(dist.sample(&mut rng));
        }
    }
    Ok(params)
}

fn check_params<T>(params: &ParameterVector<T>, config: &ModelConfig) -> Result<()> {
    check_len(config.num_parameters(), params.len())?;
    if *params.layout != config.layout() {
        return Err(Error::LayoutMismatch);
    }
    Ok(())
}

/// Runs the network, returning the pre-activations of every layer. The last
/// entry holds the logits.
fn forward_trace<T: Scalar>(values: &[T], dims: &[(usize, usize)], features: &[T]) -> Vec<Vec<T>> {
    let mut trace: Vec<Vec<T>> = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let weights = &values[offset..offset + fan_in * fan_out];
        let bias = &values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let z: Vec<T> = {
            let input: &[T] = if layer == 0 { features } else { &trace[layer - 1] };
            let relu = layer > 0;
            weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, &b)| {
                    let mut acc = b;
                    for (&w, &x) in row.iter().zip(input) {
                        let x = if relu { x.max(T::zero()) } else { x };
                        acc += w * x;
                    }
                    acc
                })
                .collect()
        };
        trace.push(z);
    }
    trace
}

pub fn forward_logits<T: Scalar>(
    params: &ParameterVector<T>,
    config: &ModelConfig,
    features: &[T],
) -> Result<Vec<T>> {
    check_params(params, config)?;
    check_len(config.input_dim, features.len())?;
    let mut trace = forward_trace(params.values(), &config.layer_dims(), features);
    Ok(trace.pop().expect("at least one layer"))
}

/// Row-wise softmax with max-subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn canonical_order<T: Scalar, S: Labeled<T>>(batch: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&batch[a], &batch[b]);
        sa.label().cmp(&sb.label()).then_with(|| {
            sa.features()
                .iter()
                .zip(sb.features())
                .map(|(x, y)| x.to_f64_lossy().total_cmp(&y.to_f64_lossy()))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

/// Mean cross-entropy over `batch` and its gradient with respect to every
/// parameter.
///
/// Samples are accumulated in a canonical order (label, then features), so
/// the result does not depend on how the batch happens to be ordered.
pub fn loss_and_grad<T: Scalar, S: Labeled<T>>(
    params: &ParameterVector<T>,
    config: &ModelConfig,
    batch: &[S],
) -> Result<(T, Vec<T>)> {
    check_params(params, config)?;
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let dims = config.layer_dims();
    let values = params.values();
    let mut grad = vec![T::zero(); values.len()];
    let mut loss_sum = T::zero();

    for idx in canonical_order(batch) {
        let sample = &batch[idx];
        check_len(config.input_dim, sample.features().len())?;
        let label = sample.label();
        if label >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside [0, {})",
                config.num_classes
            )));
        }
        let trace = forward_trace(values, &dims, sample.features());
        let logits = trace.last().expect("at least one layer");
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss_sum += lse - logits[label];

        // dL/dz for the output layer: softmax - onehot
        let mut delta: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
        delta[label] -= T::one();

        let mut offset_end = values.len();
        for layer in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[layer];
            let bias_start = offset_end - fan_out;
            let w_start = bias_start - fan_in * fan_out;
            let input: Vec<T> = if layer == 0 {
                sample.features().to_vec()
            } else {
                trace[layer - 1].iter().map(|&z| z.max(T::zero())).collect()
            };
            for (o, &d) in delta.iter().enumerate() {
                grad[bias_start + o] += d;
                let row = &mut grad[w_start + o * fan_in..w_start + (o + 1) * fan_in];
                for (g, &x) in row.iter_mut().zip(&input) {
                    *g += d * x;
                }
            }
            if layer > 0 {
                let pre = &trace[layer - 1];
                let weights = &values[w_start..bias_start];
                let mut prev = vec![T::zero(); fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    for (p, &w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += w * d;
                    }
                }
                for (p, &z) in prev.iter_mut().zip(pre) {
                    if z <= T::zero() {
                        *p = T::zero();
                    }
                }
                delta = prev;
            }
            offset_end = w_start;
        }
    }

    let n = T::from_count(batch.len());
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss_sum / n, grad))
}

/// Gradient of `loss + (mu/2)·‖θ − θ_g‖²`, given the gradient of `loss`.
pub fn fedprox_augment<T: Scalar>(grad: &[T], params: &[T], global: &[T], mu: T) -> Result<Vec<T>> {
    check_len(grad.len(), params.len())?;
    check_len(grad.len(), global.len())?;
    if mu < T::zero() {
        return Err(Error::InvalidArgument("fedprox mu must be nonnegative".into()));
    }
    Ok(grad
        .iter()
        .zip(params.iter().zip(global))
        .map(|(&g, (&p, &q))| g + mu * (p - q))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub learning_rate: T,
    adam: Option<AdamMoments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: T, num_params: usize) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        let adam = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(AdamMoments {
                m: vec![T::zero(); num_params],
                v: vec![T::zero(); num_params],
                t: 0,
                beta1: T::lit(0.9),
                beta2: T::lit(0.999),
                eps: T::lit(1e-8),
            }),
        };
        Ok(Self { learning_rate, adam })
    }

    pub fn kind(&self) -> OptimizerKind {
        if self.adam.is_some() {
            OptimizerKind::Adam
        } else {
            OptimizerKind::Sgd
        }
    }

    pub fn adam(&self) -> Option<&AdamMoments<T>> {
        self.adam.as_ref()
    }

    /// Zeroes Adam moments and the step counter. No-op for SGD.
    pub fn reset(&mut self) {
        if let Some(adam) = &mut self.adam {
            adam.m.iter_mut().for_each(|x| *x = T::zero());
            adam.v.iter_mut().for_each(|x| *x = T::zero());
            adam.t = 0;
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParameterVector<T>, grad: &[T]) -> Result<()> {
        check_len(params.len(), grad.len())?;
        let lr = self.learning_rate;
        match &mut self.adam {
            None => {
                for (p, &g) in params.values_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Some(adam) => {
                check_len(adam.m.len(), grad.len())?;
                adam.t += 1;
                let t = i32::try_from(adam.t).unwrap_or(i32::MAX);
                let (b1, b2) = (adam.beta1, adam.beta2);
                let bias1 = T::one() - b1.powi(t);
                let bias2 = T::one() - b2.powi(t);
                for (((p, &g), m), v) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(adam.m.iter_mut())
                    .zip(adam.v.iter_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + adam.eps);
                }
            }
        }
        Ok(())
    }
}
