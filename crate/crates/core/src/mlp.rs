//! Small fully-connected networks with hand-written backpropagation.
//!
//! Two uses: the stage-1 feature extractor trained by minibatch SGD on the
//! ERM split, and the balance learner that maps stage-1 predictions and the
//! class label to positive, globally normalized example weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, Reader};
use crate::data::EmbeddingDataset;
use crate::error::{AfrError, Result};
use crate::head::LinearHead;
use crate::metrics::argmax;
use crate::numerics::{lse_unchecked, softmax_into, Matrix, Rng};
use crate::weights::{group_aggregated_weights, WeightVector};

pub const MLP_MAGIC: &[u8; 4] = b"AFRM";
pub const MLP_VERSION: u32 = 1;

/// Transform applied to the last layer's pre-activation. Hidden layers
/// always use ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Logits,
    Softplus,
}

/// `ln(1 + eᶻ)`, floored at the smallest positive normal so it never
/// returns exactly zero.
#[inline]
pub fn softplus(z: f64) -> f64 {
    let v = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    v.max(f64::MIN_POSITIVE)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out × in`.
    weights: Matrix,
    bias: Vec<f64>,
}

impl Dense {
    fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: OutputTransform,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Pre-activation of every layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl Mlp {
    /// He-normal weights, zero biases. `sizes` lists input, hidden and
    /// output widths.
    pub fn new(sizes: &[usize], output: OutputTransform, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(AfrError::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| scale * rng.normal())
                    .collect();
                Dense {
                    weights: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers, output })
    }

    /// Builds a network from explicit `(weights out×in, bias)` pairs.
    pub fn from_layers(layers: Vec<(Matrix, Vec<f64>)>, output: OutputTransform) -> Result<Self> {
        if layers.is_empty() {
            return Err(AfrError::invalid("network needs at least one layer"));
        }
        let layers: Vec<Dense> = layers
            .into_iter()
            .map(|(weights, bias)| Dense { weights, bias })
            .collect();
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(AfrError::invalid(format!(
                    "layer {l}: bias length mismatch"
                )));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(AfrError::invalid(format!(
                    "layer {l}: input width does not chain"
                )));
            }
        }
        Ok(Self { layers, output })
    }

    pub fn with_output(mut self, output: OutputTransform) -> Self {
        self.output = output;
        self
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Width of the representation feeding the last layer.
    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().in_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::out_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * (l.in_dim() + 1))
            .sum()
    }

    /// Flat parameters, layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(l.weights.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(AfrError::invalid("parameter vector has the wrong length"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(AfrError::invalid("parameters are not finite"));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// The last layer as a linear head anchored at its current values.
    pub fn last_layer_head(&self) -> LinearHead {
        let last = self.layers.last().unwrap();
        LinearHead::from_anchor(last.weights.clone(), last.bias.clone()).expect("consistent layer")
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(AfrError::invalid(format!(
                "inputs have {} columns, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn hidden(z: &mut Matrix) {
        z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    }

    pub fn forward_cached(&self, inputs: &Matrix) -> Result<ForwardCache> {
        self.check_input(inputs)?;
        let mut cache_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.affine_transposed(&layer.weights, &layer.bias);
            cache_inputs.push(a);
            a = z.clone();
            if l + 1 < self.layers.len() {
                Self::hidden(&mut a);
            } else if self.output == OutputTransform::Softplus {
                a.as_mut_slice().iter_mut().for_each(|v| *v = softplus(*v));
            }
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs: cache_inputs,
            pre,
            output: a,
        })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.output)
    }

    /// Activations entering the last layer (the input itself for a
    /// single-layer network).
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            a = a.affine_transposed(&layer.weights, &layer.bias);
            Self::hidden(&mut a);
        }
        Ok(a)
    }

    /// Flat parameter gradient given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Matrix) -> Vec<f64> {
        let n_layers = self.layers.len();
        let mut delta = d_output.clone();
        if self.output == OutputTransform::Softplus {
            let z = &cache.pre[n_layers - 1];
            for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= sigmoid(zv);
            }
        }
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let a = &cache.inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let mut g = vec![0.0; out_dim * (in_dim + 1)];
            {
                let (gw, gb) = g.split_at_mut(out_dim * in_dim);
                for r in 0..a.rows() {
                    let d = delta.row(r);
                    let x = a.row(r);
                    for k in 0..out_dim {
                        let dk = d[k];
                        if dk == 0.0 {
                            continue;
                        }
                        gb[k] += dk;
                        for (gv, &xv) in gw[k * in_dim..(k + 1) * in_dim].iter_mut().zip(x) {
                            *gv += dk * xv;
                        }
                    }
                }
            }
            per_layer[l] = g;
            if l > 0 {
                let mut prev = Matrix::zeros(a.rows(), in_dim);
                let z_prev = &cache.pre[l - 1];
                for r in 0..a.rows() {
                    let d = delta.row(r);
                    let dst = prev.row_mut(r);
                    for k in 0..out_dim {
                        let dk = d[k];
                        if dk == 0.0 {
                            continue;
                        }
                        for (pv, &w) in dst.iter_mut().zip(layer.weights.row(k)) {
                            *pv += dk * w;
                        }
                    }
                    for (pv, &zv) in dst.iter_mut().zip(z_prev.row(r)) {
                        if zv <= 0.0 {
                            *pv = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        per_layer.concat()
    }

    /// Mean cross-entropy of the logits against `labels` and its gradient.
    pub fn cross_entropy_and_gradient(
        &self,
        inputs: &Matrix,
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        if self.output != OutputTransform::Logits {
            return Err(AfrError::invalid("cross-entropy needs a logits output"));
        }
        if inputs.rows() != labels.len() || labels.is_empty() {
            return Err(AfrError::invalid(
                "inputs and labels differ in length or are empty",
            ));
        }
        let cache = self.forward_cached(inputs)?;
        let logits = &cache.output;
        let n = labels.len() as f64;
        let c = self.output_dim();
        let mut loss = 0.0;
        let mut d_out = Matrix::zeros(logits.rows(), c);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AfrError::invalid(format!("label {y} out of range")));
            }
            let z = logits.row(i);
            loss += lse_unchecked(z) - z[y];
            let d = d_out.row_mut(i);
            softmax_into(z, d);
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v /= n);
        }
        Ok((loss / n, self.backward(&cache, &d_out)))
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Stage-1 training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    /// Whole stage-1 network; [`Mlp::embed`] gives the cached features.
    pub extractor: Mlp,
    /// Its last layer, anchored at the trained values.
    pub head: LinearHead,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Trains body and linear head jointly by minibatch SGD on mean
/// cross-entropy. `dataset` should already be restricted to the ERM split.
pub fn train_erm_extractor(
    dataset: &EmbeddingDataset,
    config: &ExtractorConfig,
    rng: &mut Rng,
) -> Result<Stage1Model> {
    if dataset.is_empty() {
        return Err(AfrError::invalid("ERM split is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(AfrError::invalid(
            "batch_size, epochs and learning_rate must be positive",
        ));
    }
    let mut sizes = vec![dataset.dim()];
    sizes.extend(&config.hidden);
    sizes.push(dataset.num_classes());
    let mut net = Mlp::new(&sizes, OutputTransform::Logits, rng)?;
    let mut params = net.params();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = dataset.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let (loss, grad) = net.cross_entropy_and_gradient(&x, &y)?;
            if !loss.is_finite() {
                return Err(AfrError::Divergence { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            net.set_params(&params).map_err(|_| AfrError::Divergence {
                epoch,
                loss: f64::NAN,
            })?;
        }
        final_loss = epoch_loss / dataset.len() as f64;
    }

    let logits = net.forward(dataset.features())?;
    let correct = logits
        .iter_rows()
        .zip(dataset.labels())
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(Stage1Model {
        head: net.last_layer_head(),
        extractor: net,
        train_accuracy: correct as f64 / dataset.len() as f64,
        final_loss,
    })
}

/// Replaces the features with the extractor's penultimate activations.
pub fn cache_embeddings(extractor: &Mlp, dataset: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    dataset.with_features(extractor.embed(dataset.features())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BalanceLearnerResult {
    pub network: Mlp,
    /// Group-aggregated weights at step 0 (initialization) through `steps`.
    pub trajectory: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub final_weights: WeightVector,
}

/// Balance-learner input rows: stage-1 probabilities followed by a one-hot
/// class label.
pub fn balance_inputs(p_erm: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let c = p_erm.cols();
    if p_erm.rows() != labels.len() {
        return Err(AfrError::invalid(
            "probabilities and labels differ in length",
        ));
    }
    let mut out = Matrix::zeros(labels.len(), 2 * c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AfrError::invalid(format!("label {y} out of range")));
        }
        let row = out.row_mut(i);
        row[..c].copy_from_slice(p_erm.row(i));
        row[c + y] = 1.0;
    }
    Ok(out)
}

/// `(1/G) Σ_g |A_g − 1/G|` for aggregated weights `A`.
pub fn balance_loss(aggregated: &[f64]) -> f64 {
    let g = aggregated.len() as f64;
    aggregated.iter().map(|a| (a - 1.0 / g).abs()).sum::<f64>() / g
}

/// Normalized weights from raw softplus outputs.
fn normalize_outputs(out: &Matrix) -> Result<WeightVector> {
    WeightVector::from_unnormalized(out.as_slice().to_vec())
}

/// Balance loss of `net` on `inputs` and its gradient with respect to the
/// network parameters, differentiating through the global normalization.
/// The absolute value has subgradient 0 at 0.
pub fn balance_loss_and_gradient(
    net: &Mlp,
    inputs: &Matrix,
    groups: &[usize],
    num_groups: usize,
) -> Result<(f64, Vec<f64>, WeightVector)> {
    let cache = net.forward_cached(inputs)?;
    let raw = cache.output();
    let weights = normalize_outputs(raw)?;
    let agg = group_aggregated_weights(&weights, groups, num_groups);
    let loss = balance_loss(&agg);
    let g = num_groups as f64;
    let slope: Vec<f64> = agg
        .iter()
        .map(|a| {
            let dev = a - 1.0 / g;
            if dev > 0.0 {
                1.0 / g
            } else if dev < 0.0 {
                -1.0 / g
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.as_slice().iter().sum();
    let mean_slope: f64 = weights
        .as_slice()
        .iter()
        .zip(groups)
        .map(|(w, &gi)| w * slope[gi])
        .sum();
    let d_out: Vec<f64> = groups
        .iter()
        .map(|&gi| (slope[gi] - mean_slope) / total)
        .collect();
    let d_out = Matrix::new(raw.rows(), 1, d_out)?;
    Ok((loss, net.backward(&cache, &d_out), weights))
}

/// Fits a network `f(p, y) > 0` whose normalized outputs make every group's
/// aggregated weight as close to `1/G` as possible, using full-batch Adam.
pub fn train_balance_learner(
    p_erm: &Matrix,
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
    config: &BalanceConfig,
) -> Result<BalanceLearnerResult> {
    if groups.len() != labels.len() {
        return Err(AfrError::invalid("groups and labels differ in length"));
    }
    if num_groups == 0 || groups.iter().any(|&g| g >= num_groups) {
        return Err(AfrError::invalid("group index out of range"));
    }
    let inputs = balance_inputs(p_erm, labels)?;
    let mut sizes = vec![inputs.cols()];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut rng = Rng::new(config.seed);
    let mut net = Mlp::new(&sizes, OutputTransform::Softplus, &mut rng)?;
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), config.learning_rate);

    let mut trajectory = Vec::with_capacity(config.steps + 1);
    let mut losses = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let (loss, grad, weights) = balance_loss_and_gradient(&net, &inputs, groups, num_groups)?;
        if !loss.is_finite() {
            return Err(AfrError::Divergence { epoch: step, loss });
        }
        trajectory.push(group_aggregated_weights(&weights, groups, num_groups));
        losses.push(loss);
        if step == config.steps {
            return Ok(BalanceLearnerResult {
                network: net,
                trajectory,
                losses,
                final_weights: weights,
            });
        }
        adam.update(&mut params, &grad);
        net.set_params(&params).map_err(|_| AfrError::Divergence {
            epoch: step + 1,
            loss: f64::NAN,
        })?;
    }
    unreachable!("loop returns at the final step")
}

/// `AFRM` container: magic | version u32 | layer count u32 | (in u32, out
/// u32) per layer | parameters as little-endian f64 in [`Mlp::params`]
/// order. The output transform is not stored; decoding yields a logits
/// network (see [`Mlp::with_output`]).
pub fn encode_mlp(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MLP_MAGIC);
    out.extend_from_slice(&MLP_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
    }
    put_f64s(&mut out, &net.params());
    out
}

pub fn decode_mlp(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MLP_MAGIC)?;
    r.expect_version(MLP_VERSION)?;
    let count_at = r.offset();
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(AfrError::parse(count_at, "network has no layers"));
    }
    let mut dims = Vec::with_capacity(count);
    for l in 0..count {
        let at = r.offset();
        let (i, o) = (r.u32()? as usize, r.u32()? as usize);
        if l > 0 && dims.last().map(|&(_, prev_out)| prev_out) != Some(i) {
            return Err(AfrError::parse(
                at,
                format!("layer {l} input width does not chain"),
            ));
        }
        dims.push((i, o));
    }
    let mut layers = Vec::with_capacity(count);
    for &(i, o) in &dims {
        let w = r.f64s(i * o)?;
        let b = r.f64s(o)?;
        layers.push((Matrix::new(o, i, w)?, b));
    }
    r.expect_end()?;
    Mlp::from_layers(layers, OutputTransform::Logits)
}

pub fn write_mlp_file(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mlp(net))?;
    Ok(())
}

pub fn read_mlp_file(path: impl AsRef<Path>) -> Result<Mlp> {
    decode_mlp(&fs::read(path)?)
}
