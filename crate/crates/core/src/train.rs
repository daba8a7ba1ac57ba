//! Surrogate-gradient training through time.
//!
//! The forward pass keeps hard binary spikes; the backward pass replaces the
//! firing step's derivative with a rectangular window of width `a` around
//! the threshold (value `1/a` inside, zero outside). Gradient checks run the
//! same backward code against a relaxed forward whose spike is the window's
//! antiderivative, `clamp((u - u_th)/a + 1/2, 0, 1)`.
//!
//! The multiplicative reset gate in the temporal update is treated as a
//! constant during backpropagation, so no second threshold derivative
//! appears. Batch gradients are reduced in sample-index order, which makes
//! every step bitwise reproducible.

use crate::error::{Error, Result};
use crate::lif::{LifParams, SpikeTrain, SpikingNetwork};
use crate::mat::Mat;

/// Shape of the firing-step derivative used during backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Rectangular,
}

/// Surrogate derivative: a window of width `width` centered on the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec { kind: SurrogateKind::Rectangular, width: 1.0 }
    }
}

impl SurrogateSpec {
    pub fn rectangular(width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::domain(format!("surrogate width must be positive, got {width}")));
        }
        Ok(SurrogateSpec { kind: SurrogateKind::Rectangular, width })
    }
}

/// Firing-step derivative at membrane potential `u`.
pub fn surrogate_grad(u: f64, params: &LifParams, spec: &SurrogateSpec) -> f64 {
    match spec.kind {
        SurrogateKind::Rectangular => {
            let a = spec.width;
            if (u - params.u_th).abs() < a / 2.0 {
                1.0 / a
            } else {
                0.0
            }
        }
    }
}

/// Continuous stand-in for the firing step whose derivative is exactly
/// [`surrogate_grad`]; only relaxed (gradient-check) passes use it.
pub fn soft_spike(u: f64, params: &LifParams, spec: &SurrogateSpec) -> f64 {
    match spec.kind {
        SurrogateKind::Rectangular => {
            ((u - params.u_th) / spec.width + 0.5).clamp(0.0, 1.0)
        }
    }
}

/// Loss applied to the readout layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    RateCrossEntropy,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Classic heavy-ball momentum; zero keeps plain SGD.
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 50,
            batch_size: 16,
            momentum: 0.0,
            loss: LossKind::RateCrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least one"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Numerically stable softmax cross-entropy; returns the loss and the
/// gradient with respect to the logits.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Cross-entropy over per-class firing rates of the readout train.
pub fn rate_loss(output: &SpikeTrain, label: usize) -> Result<f64> {
    if label >= output.width() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} output neurons",
            output.width()
        )));
    }
    let t = output.timesteps() as f64;
    let logits: Vec<f64> =
        output.counts_per_neuron().iter().map(|&c| c as f64 / t).collect();
    Ok(softmax_cross_entropy(&logits, label).0)
}

/// Whether spikes stay binary or relax to the surrogate's antiderivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Relaxed,
}

/// Intermediate values of one sample's forward pass, kept for the backward
/// sweep: layer inputs, raw linear inputs and membrane potentials, indexed
/// `[t][layer]`.
pub struct GradCache {
    /// `inputs[t][l]` feeds layer `l`; `inputs[t][depth]` is the readout.
    pub inputs: Vec<Vec<Vec<f64>>>,
    pub x_raw: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub mode: SpikeMode,
}

/// Stateless forward pass recording everything the backward sweep needs.
/// The network's persistent layer states are untouched.
pub fn forward_cached(
    net: &SpikingNetwork,
    sample: &SpikeTrain,
    mode: SpikeMode,
    spec: &SurrogateSpec,
) -> Result<GradCache> {
    if sample.width() != net.input_width() {
        return Err(Error::domain(format!(
            "sample width {} does not match network input {}",
            sample.width(),
            net.input_width()
        )));
    }
    let depth = net.depth();
    let timesteps = sample.timesteps();
    let mut h: Vec<Vec<f64>> =
        net.layers.iter().map(|l| vec![0.0; l.synapse.n_out()]).collect();
    let mut inputs = Vec::with_capacity(timesteps);
    let mut x_raw_all = Vec::with_capacity(timesteps);
    let mut u_all = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let mut per_layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut per_layer_x = Vec::with_capacity(depth);
        let mut per_layer_u = Vec::with_capacity(depth);
        let mut s: Vec<f64> = sample.row(t).iter().map(|&b| b as f64).collect();
        for (l, layer) in net.layers.iter().enumerate() {
            per_layer_inputs.push(s.clone());
            let x = layer.synapse.spatial_input_real(&s)?;
            let mut u = vec![0.0; x.len()];
            let mut s_out = vec![0.0; x.len()];
            for i in 0..x.len() {
                u[i] = h[l][i] + x[i];
                let spike = match mode {
                    SpikeMode::Hard => (u[i] >= layer.neuron.u_th) as u8 as f64,
                    SpikeMode::Relaxed => soft_spike(u[i], &layer.neuron, spec),
                };
                s_out[i] = spike;
                h[l][i] = layer.neuron.v_reset * spike + layer.neuron.beta * u[i] * (1.0 - spike);
            }
            per_layer_x.push(x);
            per_layer_u.push(u);
            s = s_out;
        }
        per_layer_inputs.push(s);
        inputs.push(per_layer_inputs);
        x_raw_all.push(per_layer_x);
        u_all.push(per_layer_u);
    }
    Ok(GradCache { inputs, x_raw: x_raw_all, u: u_all, mode })
}

/// Result of one backward sweep.
pub struct BackwardPass {
    pub loss: f64,
    /// Straight-through weight gradients, mask not applied. Multiplying by
    /// the mask gives the gradient of the masked forward; the raw values
    /// drive sub-network score updates and dense update modes.
    pub dense_grads: Vec<Mat>,
}

/// Backpropagation through time over one cached sample.
pub fn backward(
    net: &SpikingNetwork,
    cache: &GradCache,
    label: usize,
    spec: &SurrogateSpec,
) -> Result<BackwardPass> {
    let depth = net.depth();
    let timesteps = cache.inputs.len();
    let n_out = net.output_width();
    if label >= n_out {
        return Err(Error::domain(format!("label {label} out of range for {n_out} classes")));
    }
    let t_f = timesteps as f64;
    let mut logits = vec![0.0f64; n_out];
    for per_layer in &cache.inputs {
        for (z, &s) in logits.iter_mut().zip(&per_layer[depth]) {
            *z += s / t_f;
        }
    }
    let (loss, dlogits) = softmax_cross_entropy(&logits, label);

    let mut dense_grads: Vec<Mat> = net
        .layers
        .iter()
        .map(|l| Mat::zeros(l.synapse.n_out(), l.synapse.n_in()))
        .collect();

    // dL/d(raw linear input) per timestep for the layer above the one being
    // processed; drives the loss term flowing into the current layer.
    let mut g_xraw_above: Vec<Vec<f64>> = Vec::new();
    for l in (0..depth).rev() {
        let layer = &net.layers[l];
        let width = layer.synapse.n_out();
        let scale: Vec<f64> = match &layer.synapse.norm {
            Some(n) => (0..width).map(|i| n.scale(i)).collect(),
            None => vec![1.0; width],
        };
        let mut g_xraw_here: Vec<Vec<f64>> = vec![vec![0.0; width]; timesteps];
        let mut g_u_next = vec![0.0f64; width];
        for t in (0..timesteps).rev() {
            // dL/ds for this layer's output spikes.
            let ds: Vec<f64> = if l == depth - 1 {
                dlogits.iter().map(|&g| g / t_f).collect()
            } else {
                let upper = &net.layers[l + 1].synapse;
                let g_up = &g_xraw_above[t];
                (0..width)
                    .map(|j| {
                        let mut acc = 0.0;
                        for i in 0..upper.n_out() {
                            acc += upper.effective_weight(i, j) * g_up[i];
                        }
                        acc
                    })
                    .collect()
            };
            let gate = &cache.inputs[t][l + 1];
            let u = &cache.u[t][l];
            let mut g_u = vec![0.0f64; width];
            for i in 0..width {
                let phi = surrogate_grad(u[i], &layer.neuron, spec);
                g_u[i] = ds[i] * phi + layer.neuron.beta * (1.0 - gate[i]) * g_u_next[i];
                g_xraw_here[t][i] = g_u[i] * scale[i];
            }
            let s_in = &cache.inputs[t][l];
            let grad = &mut dense_grads[l];
            for i in 0..width {
                let gx = g_xraw_here[t][i];
                if gx != 0.0 {
                    let row = grad.row_mut(i);
                    for (j, &s) in s_in.iter().enumerate() {
                        row[j] += gx * s;
                    }
                }
            }
            g_u_next = g_u;
        }
        g_xraw_above = g_xraw_here;
    }
    Ok(BackwardPass { loss, dense_grads })
}

/// Whether a layer's update writes through its mask or to every weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightUpdateMode {
    Masked,
    Dense,
}

/// SGD driver holding the optional momentum state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub spec: SurrogateSpec,
    velocity: Option<Vec<Mat>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, spec: SurrogateSpec) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, spec, velocity: None })
    }

    /// One batch update with every layer masked.
    pub fn step(&mut self, net: &mut SpikingNetwork, batch: &[(SpikeTrain, usize)]) -> Result<f64> {
        let modes = vec![WeightUpdateMode::Masked; net.depth()];
        self.step_with_modes(net, batch, &modes)
    }

    /// One batch update with a per-layer choice of masked or dense writes.
    pub fn step_with_modes(
        &mut self,
        net: &mut SpikingNetwork,
        batch: &[(SpikeTrain, usize)],
        modes: &[WeightUpdateMode],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::domain("cannot train on an empty batch"));
        }
        if modes.len() != net.depth() {
            return Err(Error::domain("one update mode per layer required"));
        }
        let (loss, grads) = batch_gradients(net, batch, &self.spec)?;

        let velocity = self.velocity.get_or_insert_with(|| {
            net.layers
                .iter()
                .map(|l| Mat::zeros(l.synapse.n_out(), l.synapse.n_in()))
                .collect()
        });
        let lr = self.cfg.learning_rate;
        let momentum = self.cfg.momentum;
        for (l, grad) in grads.iter().enumerate() {
            let vel = &mut velocity[l];
            for (v, g) in vel.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v = momentum * *v + g;
            }
            let layer = &mut net.layers[l].synapse;
            match modes[l] {
                WeightUpdateMode::Masked => {
                    let mask = layer.mask.as_slice();
                    for ((w, v), &m) in
                        layer.weights.as_mut_slice().iter_mut().zip(vel.as_slice()).zip(mask)
                    {
                        if m != 0 {
                            *w -= lr * v;
                        }
                    }
                }
                WeightUpdateMode::Dense => {
                    for (w, v) in layer.weights.as_mut_slice().iter_mut().zip(vel.as_slice()) {
                        *w -= lr * v;
                    }
                }
            }
        }
        Ok(loss)
    }
}

/// Mean loss and mean dense gradients over a batch, reduced in sample order.
pub fn batch_gradients(
    net: &SpikingNetwork,
    batch: &[(SpikeTrain, usize)],
    spec: &SurrogateSpec,
) -> Result<(f64, Vec<Mat>)> {
    if batch.is_empty() {
        return Err(Error::domain("cannot take gradients of an empty batch"));
    }
    let mut grads: Vec<Mat> = net
        .layers
        .iter()
        .map(|l| Mat::zeros(l.synapse.n_out(), l.synapse.n_in()))
        .collect();
    let mut loss_sum = 0.0;
    for (sample, label) in batch {
        let cache = forward_cached(net, sample, SpikeMode::Hard, spec)?;
        let pass = backward(net, &cache, *label, spec)?;
        loss_sum += pass.loss;
        for (acc, g) in grads.iter_mut().zip(&pass.dense_grads) {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss_sum * inv, grads))
}

/// One SGD step over a batch; returns the mean batch loss.
pub fn bptt_step(
    net: &mut SpikingNetwork,
    batch: &[(SpikeTrain, usize)],
    cfg: &TrainConfig,
    spec: &SurrogateSpec,
) -> Result<f64> {
    Trainer::new(*cfg, *spec)?.step(net, batch)
}

/// Trains for `epochs` epochs over in-order batches; returns per-epoch mean
/// losses.
pub fn train_epochs(
    net: &mut SpikingNetwork,
    data: &crate::encode::LabeledSpikeDataset,
    cfg: &TrainConfig,
    spec: &SurrogateSpec,
    epochs: usize,
    modes: &[WeightUpdateMode],
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    let mut trainer = Trainer::new(*cfg, *spec)?;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in data.samples().chunks(cfg.batch_size) {
            epoch_loss += trainer.step_with_modes(net, batch, modes)?;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok(losses)
}

/// Class prediction: the readout neuron with the most spikes, lowest index
/// winning ties.
pub fn predict(net: &mut SpikingNetwork, sample: &SpikeTrain) -> Result<usize> {
    let out = net.forward(sample)?;
    let counts = out.counts_per_neuron();
    let mut best = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of correctly classified samples.
pub fn evaluate_accuracy(
    net: &mut SpikingNetwork,
    data: &crate::encode::LabeledSpikeDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for (sample, label) in data.iter() {
        if predict(net, sample)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
