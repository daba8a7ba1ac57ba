//! Iterative leaky integrate-and-fire dynamics for dense masked networks.
//!
//! A neuron couples the spatial input `x` of the current timestep with the
//! temporal input `h` carried over from the previous one:
//!
//! ```text
//! u = h_prev + x
//! s = 1 if u >= u_th else 0          (fires exactly at threshold)
//! h = v_reset * s + beta * u * (1 - s)
//! ```
//!
//! The spatial input of a layer is the masked linear map of the previous
//! layer's spikes, optionally followed by a per-neuron affine normalization
//! with stored (not batch) statistics.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::{Mask, Mat};
use crate::seed::derive_seed;

/// Neuron hyperparameters shared by all units of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Membrane decay factor, strictly between 0 and 1.
    pub beta: f64,
    /// Firing threshold.
    pub u_th: f64,
    /// Potential the state resets to after a spike; must lie below `u_th`.
    pub v_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams { beta: 0.9, u_th: 0.5, v_reset: 0.0 }
    }
}

impl LifParams {
    pub fn new(beta: f64, u_th: f64, v_reset: f64) -> Result<Self> {
        let p = LifParams { beta, u_th, v_reset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::domain(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !self.u_th.is_finite() {
            return Err(Error::domain("u_th must be finite"));
        }
        if !self.v_reset.is_finite() || self.v_reset >= self.u_th {
            return Err(Error::domain(format!(
                "v_reset must be finite and below u_th, got v_reset={} u_th={}",
                self.v_reset, self.u_th
            )));
        }
        Ok(())
    }
}

/// One membrane update. Returns the spike and the next temporal input.
pub fn lif_step(h_prev: f64, x: f64, params: &LifParams) -> Result<(bool, f64)> {
    if !h_prev.is_finite() || !x.is_finite() {
        return Err(Error::domain(format!(
            "lif_step requires finite inputs, got h_prev={h_prev} x={x}"
        )));
    }
    let u = h_prev + x;
    let spike = u >= params.u_th;
    let h_next = if spike { params.v_reset } else { params.beta * u };
    Ok((spike, h_next))
}

/// Binary spikes over `timesteps x width`; the only signal between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    timesteps: usize,
    width: usize,
    data: Vec<u8>, // row-major [t][i]
}

impl SpikeTrain {
    pub fn zeros(timesteps: usize, width: usize) -> Self {
        assert!(timesteps >= 1 && width >= 1, "spike trains need T >= 1 and N >= 1");
        SpikeTrain { timesteps, width, data: vec![0; timesteps * width] }
    }

    pub fn from_fn(timesteps: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut train = SpikeTrain::zeros(timesteps, width);
        for t in 0..timesteps {
            for i in 0..width {
                train.set(t, i, f(t, i));
            }
        }
        train
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, t: usize, i: usize) -> u8 {
        self.data[t * self.width + i]
    }

    pub fn set(&mut self, t: usize, i: usize, v: bool) {
        self.data[t * self.width + i] = v as u8;
    }

    /// All spikes of one timestep.
    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    /// Spike count per neuron, summed over timesteps.
    pub fn counts_per_neuron(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.width];
        for t in 0..self.timesteps {
            for (c, &s) in counts.iter_mut().zip(self.row(t)) {
                *c += s as usize;
            }
        }
        counts
    }
}

/// Per-neuron affine normalization folded into the linear map:
/// `y_i = gamma_i * (x_i - mu_i) / sqrt(sigma_i^2 + eps)`.
///
/// `sigma_b`/`mu_b` are stored running statistics; nothing here is updated
/// during training.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub eps_bn: f64,
}

impl NormParams {
    pub fn new(gamma: Vec<f64>, sigma_b: Vec<f64>, mu_b: Vec<f64>, eps_bn: f64) -> Result<Self> {
        if gamma.len() != sigma_b.len() || gamma.len() != mu_b.len() {
            return Err(Error::domain("normalization vectors must share one length"));
        }
        if !(eps_bn > 0.0) {
            return Err(Error::domain("eps_bn must be positive"));
        }
        if sigma_b.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::domain("sigma_b entries must be nonnegative"));
        }
        Ok(NormParams { gamma, sigma_b, mu_b, eps_bn })
    }

    /// Multiplicative part of the affine for neuron `i`.
    pub fn scale(&self, i: usize) -> f64 {
        self.gamma[i] / (self.sigma_b[i] * self.sigma_b[i] + self.eps_bn).sqrt()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mu_b[i]) * self.scale(i);
        }
    }
}

/// Weight matrix with a binary mask; the effective weight is `w * m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDenseLayer {
    pub weights: Mat,
    pub mask: Mask,
    pub norm: Option<NormParams>,
}

impl MaskedDenseLayer {
    pub fn new(weights: Mat, mask: Mask, norm: Option<NormParams>) -> Result<Self> {
        if weights.rows() != mask.rows() || weights.cols() != mask.cols() {
            return Err(Error::domain(format!(
                "mask shape {}x{} does not match weights {}x{}",
                mask.rows(),
                mask.cols(),
                weights.rows(),
                weights.cols()
            )));
        }
        if let Some(n) = &norm {
            if n.gamma.len() != weights.rows() {
                return Err(Error::domain("normalization length must equal the output width"));
            }
        }
        Ok(MaskedDenseLayer { weights, mask, norm })
    }

    /// Layer with every weight unmasked and no normalization.
    pub fn dense(weights: Mat) -> Self {
        let mask = Mask::ones(weights.rows(), weights.cols());
        MaskedDenseLayer { weights, mask, norm: None }
    }

    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn effective_weight(&self, i: usize, j: usize) -> f64 {
        if self.mask.get(i, j) {
            self.weights[(i, j)]
        } else {
            0.0
        }
    }

    /// Spatial input `x = (W o M) s`, with the normalization affine applied
    /// when present. Only fired input channels are visited.
    pub fn spatial_input(&self, s_in: &[u8]) -> Result<Vec<f64>> {
        if s_in.len() != self.n_in() {
            return Err(Error::domain(format!(
                "input width {} does not match layer fan-in {}",
                s_in.len(),
                self.n_in()
            )));
        }
        let fired: Vec<usize> =
            s_in.iter().enumerate().filter(|(_, &s)| s != 0).map(|(j, _)| j).collect();
        let mut x = vec![0.0f64; self.n_out()];
        for (i, xi) in x.iter_mut().enumerate() {
            let wrow = self.weights.row(i);
            let mrow = self.mask.row(i);
            let mut acc = 0.0;
            for &j in &fired {
                acc += wrow[j] * mrow[j] as f64;
            }
            *xi = acc;
        }
        if let Some(norm) = &self.norm {
            norm.apply(&mut x);
        }
        Ok(x)
    }

    /// Same map for real-valued inputs; used by relaxed training passes.
    pub fn spatial_input_real(&self, s_in: &[f64]) -> Result<Vec<f64>> {
        if s_in.len() != self.n_in() {
            return Err(Error::domain(format!(
                "input width {} does not match layer fan-in {}",
                s_in.len(),
                self.n_in()
            )));
        }
        let mut x = vec![0.0f64; self.n_out()];
        for (i, xi) in x.iter_mut().enumerate() {
            let wrow = self.weights.row(i);
            let mrow = self.mask.row(i);
            let mut acc = 0.0;
            for (j, &s) in s_in.iter().enumerate() {
                if s != 0.0 && mrow[j] != 0 {
                    acc += wrow[j] * s;
                }
            }
            *xi = acc;
        }
        if let Some(norm) = &self.norm {
            norm.apply(&mut x);
        }
        Ok(x)
    }
}

/// Temporal input carried by each neuron of a layer between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Vec<f64>,
}

impl LayerState {
    pub fn zeros(n: usize) -> Self {
        LayerState { h: vec![0.0; n] }
    }
}

/// A masked linear map plus one LIF unit per output channel.
#[derive(Clone, Debug)]
pub struct SpikingLayer {
    pub synapse: MaskedDenseLayer,
    pub neuron: LifParams,
    pub state: LayerState,
}

impl SpikingLayer {
    pub fn new(synapse: MaskedDenseLayer, neuron: LifParams) -> Result<Self> {
        neuron.validate()?;
        let state = LayerState::zeros(synapse.n_out());
        Ok(SpikingLayer { synapse, neuron, state })
    }

    pub fn reset_state(&mut self) {
        self.state.h.iter_mut().for_each(|h| *h = 0.0);
    }

    /// One timestep: spatial input, then the per-neuron membrane update.
    pub fn forward(&mut self, s_in: &[u8]) -> Result<Vec<u8>> {
        let x = self.synapse.spatial_input(s_in)?;
        let mut out = vec![0u8; x.len()];
        for (i, &xi) in x.iter().enumerate() {
            let (spike, h_next) = lif_step(self.state.h[i], xi, &self.neuron)?;
            out[i] = spike as u8;
            self.state.h[i] = h_next;
        }
        Ok(out)
    }
}

/// How fresh weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    RsqrtFanIn,
    /// `U[-r, r]`.
    Uniform(f64),
}

/// Everything a single layer exposes to an observer during a forward pass.
pub struct StepObservation<'a> {
    pub t: usize,
    pub layer: usize,
    /// Spikes entering the layer at this timestep.
    pub s_in: &'a [u8],
    /// Spatial input after masking and normalization.
    pub x: &'a [f64],
    /// Membrane potentials before the firing decision.
    pub u: &'a [f64],
    /// Spikes leaving the layer.
    pub s_out: &'a [u8],
}

/// Feed-forward stack of spiking layers sharing a timestep count per run.
#[derive(Clone, Debug)]
pub struct SpikingNetwork {
    pub layers: Vec<SpikingLayer>,
}

impl SpikingNetwork {
    pub fn new(layers: Vec<SpikingLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("a network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].synapse.n_in() != w[0].synapse.n_out() {
                return Err(Error::domain(format!(
                    "layer fan-in {} does not match previous fan-out {}",
                    w[1].synapse.n_in(),
                    w[0].synapse.n_out()
                )));
            }
        }
        Ok(SpikingNetwork { layers })
    }

    /// Fresh dense network over `widths = [input, hidden.., output]`, all
    /// layers sharing `params`, weights drawn per `init` from `seed`.
    pub fn random(widths: &[usize], params: LifParams, init: WeightInit, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::domain("need at least input and output widths"));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let r = match init {
                WeightInit::RsqrtFanIn => 1.0 / (n_in as f64).sqrt(),
                WeightInit::Uniform(r) => r,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, l as u64));
            let weights = Mat::from_fn(n_out, n_in, |_, _| rng.gen_range(-r..=r));
            layers.push(SpikingLayer::new(MaskedDenseLayer::dense(weights), params)?);
        }
        SpikingNetwork::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].synapse.n_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].synapse.n_out()
    }

    pub fn reset_states(&mut self) {
        self.layers.iter_mut().for_each(SpikingLayer::reset_state);
    }

    /// Runs the whole train through the network. States are reset to zero
    /// before the first timestep, so the result is a pure function of
    /// weights, masks, parameters and input.
    pub fn forward(&mut self, input: &SpikeTrain) -> Result<SpikeTrain> {
        self.forward_observed(input, |_| {})
    }

    /// Forward pass that reports every layer's internals to `observer`.
    pub fn forward_observed(
        &mut self,
        input: &SpikeTrain,
        mut observer: impl FnMut(&StepObservation),
    ) -> Result<SpikeTrain> {
        if input.width() != self.input_width() {
            return Err(Error::domain(format!(
                "input width {} does not match network input {}",
                input.width(),
                self.input_width()
            )));
        }
        self.reset_states();
        let timesteps = input.timesteps();
        let mut output = SpikeTrain::zeros(timesteps, self.output_width());
        for t in 0..timesteps {
            let mut s: Vec<u8> = input.row(t).to_vec();
            for (l, layer) in self.layers.iter_mut().enumerate() {
                let x = layer.synapse.spatial_input(&s)?;
                let mut u = vec![0.0f64; x.len()];
                let mut s_out = vec![0u8; x.len()];
                for (i, &xi) in x.iter().enumerate() {
                    let h_prev = layer.state.h[i];
                    u[i] = h_prev + xi;
                    let (spike, h_next) = lif_step(h_prev, xi, &layer.neuron)?;
                    s_out[i] = spike as u8;
                    layer.state.h[i] = h_next;
                }
                observer(&StepObservation { t, layer: l, s_in: &s, x: &x, u: &u, s_out: &s_out });
                s = s_out;
            }
            for (i, &b) in s.iter().enumerate() {
                output.set(t, i, b != 0);
            }
        }
        Ok(output)
    }

    /// FNV digest of every weight's bit pattern, for frozen-weight checks.
    pub fn weight_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            h ^= layer.synapse.weights.bit_digest();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Total and unmasked weight counts over all layers.
    pub fn weight_counts(&self) -> (usize, usize) {
        let mut total = 0;
        let mut live = 0;
        for layer in &self.layers {
            total += layer.synapse.weights.len();
            live += layer.synapse.mask.count_ones();
        }
        (total, live)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: f64, u_th: f64, v_reset: f64) -> LifParams {
        LifParams { beta, u_th, v_reset }
    }

    #[test]
    fn step_fires_and_resets() {
        let p = params(0.9, 0.5, 0.0);
        let (s, h) = lif_step(0.3, 0.4, &p).unwrap();
        assert!(s);
        assert_eq!(h, 0.0);
    }

    #[test]
    fn step_decays_below_threshold() {
        let p = params(0.9, 0.5, 0.0);
        let (s, h) = lif_step(0.2, 0.1, &p).unwrap();
        assert!(!s);
        assert!((h - 0.27).abs() < 1e-15, "decay should give 0.9 * 0.3, got {h}");
    }

    #[test]
    fn step_fires_exactly_at_threshold() {
        let p = params(0.9, 0.5, 0.0);
        let (s, _) = lif_step(0.0, 0.5, &p).unwrap();
        assert!(s, "heaviside takes value one at zero");
    }

    #[test]
    fn step_rejects_non_finite() {
        let p = params(0.9, 0.5, 0.0);
        assert!(lif_step(f64::NAN, 0.0, &p).is_err());
        assert!(lif_step(0.0, f64::INFINITY, &p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(LifParams::new(1.0, 0.5, 0.0).is_err());
        assert!(LifParams::new(0.5, 0.5, 0.5).is_err());
        assert!(LifParams::new(0.5, 0.5, 0.0).is_ok());
    }

    #[test]
    fn silent_input_stays_silent() {
        let layer = MaskedDenseLayer::dense(Mat::from_fn(3, 3, |_, _| 0.7));
        let mut sl = SpikingLayer::new(layer, params(0.9, 0.5, 0.0)).unwrap();
        let out = sl.forward(&[0, 0, 0]).unwrap();
        assert_eq!(out, vec![0, 0, 0]);
        assert_eq!(sl.state.h, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_kills_weight() {
        let weights = Mat::from_rows(&[&[1.0]]);
        let mut mask = Mask::ones(1, 1);
        mask.set(0, 0, false);
        let layer = MaskedDenseLayer::new(weights, mask, None).unwrap();
        let x = layer.spatial_input(&[1]).unwrap();
        assert_eq!(x, vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_domain_error() {
        let layer = MaskedDenseLayer::dense(Mat::zeros(2, 3));
        assert!(layer.spatial_input(&[1, 0]).is_err());
    }

    /// Scalar per-neuron recomputation of a random 3x3 layer step.
    #[test]
    fn layer_forward_matches_scalar_recomputation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let weights = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..=1.0));
        let p = params(0.9, 0.5, 0.0);
        let mut layer =
            SpikingLayer::new(MaskedDenseLayer::dense(weights.clone()), p).unwrap();
        layer.state.h = vec![0.1, -0.2, 0.3];
        let h_before = layer.state.h.clone();
        let s_in = [1u8, 0, 1];

        let out = layer.forward(&s_in).unwrap();

        for i in 0..3 {
            let mut x = 0.0;
            for j in 0..3 {
                x += weights[(i, j)] * s_in[j] as f64;
            }
            let u = h_before[i] + x;
            let spike = u >= p.u_th;
            let h_next = if spike { p.v_reset } else { p.beta * u };
            assert_eq!(out[i], spike as u8, "neuron {i} spike");
            assert!((layer.state.h[i] - h_next).abs() < 1e-15, "neuron {i} state");
        }
    }

    #[test]
    fn single_layer_single_step_network_equals_layer_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..=1.0));
        let p = params(0.9, 0.5, 0.0);
        let layer = SpikingLayer::new(MaskedDenseLayer::dense(weights), p).unwrap();

        let mut net = SpikingNetwork::new(vec![layer.clone()]).unwrap();
        let input = SpikeTrain::from_fn(1, 2, |_, i| i == 0);
        let out = net.forward(&input).unwrap();

        let mut solo = layer;
        solo.reset_state();
        let expect = solo.forward(input.row(0)).unwrap();
        assert_eq!(out.row(0), expect.as_slice());
    }

    #[test]
    fn network_forward_is_deterministic() {
        let p = params(0.8, 0.5, 0.0);
        let mut net =
            SpikingNetwork::random(&[4, 6, 3], p, WeightInit::RsqrtFanIn, 99).unwrap();
        let input = SpikeTrain::from_fn(5, 4, |t, i| (t + i) % 2 == 0);
        let a = net.forward(&input).unwrap();
        let b = net.forward(&input).unwrap();
        assert_eq!(a, b);

        let mut other =
            SpikingNetwork::random(&[4, 6, 3], p, WeightInit::RsqrtFanIn, 99).unwrap();
        assert_eq!(other.forward(&input).unwrap(), a);
    }

    /// Independent scalar-loop simulation of a two-layer net over three steps.
    #[test]
    fn network_forward_matches_scalar_simulation() {
        let p = params(0.7, 0.5, 0.0);
        let mut net = SpikingNetwork::random(&[4, 4, 4], p, WeightInit::RsqrtFanIn, 1234).unwrap();
        let input = SpikeTrain::from_fn(3, 4, |t, i| (t * 3 + i * 5) % 3 != 0);
        let got = net.forward(&input).unwrap();

        // Scalar reference: explicit loops, no shared code paths.
        let w: Vec<&Mat> = net.layers.iter().map(|l| &l.synapse.weights).collect();
        let mut h = [[0.0f64; 4]; 2];
        for t in 0..3 {
            let mut s: Vec<f64> = input.row(t).iter().map(|&b| b as f64).collect();
            for l in 0..2 {
                let mut s_next = vec![0.0f64; 4];
                for i in 0..4 {
                    let mut x = 0.0;
                    for j in 0..4 {
                        x += w[l][(i, j)] * s[j];
                    }
                    let u = h[l][i] + x;
                    if u >= p.u_th {
                        s_next[i] = 1.0;
                        h[l][i] = p.v_reset;
                    } else {
                        s_next[i] = 0.0;
                        h[l][i] = p.beta * u;
                    }
                }
                s = s_next;
            }
            for i in 0..4 {
                assert_eq!(got.get(t, i), s[i] as u8, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn width_mismatch_is_domain_error() {
        let p = LifParams::default();
        let mut net = SpikingNetwork::random(&[4, 2], p, WeightInit::RsqrtFanIn, 0).unwrap();
        let input = SpikeTrain::zeros(2, 3);
        assert!(net.forward(&input).is_err());
    }

    #[test]
    fn zero_input_zero_reset_never_spikes() {
        let p = params(0.95, 0.5, 0.0);
        let mut net = SpikingNetwork::random(&[3, 5, 2], p, WeightInit::Uniform(1.0), 7).unwrap();
        let input = SpikeTrain::zeros(20, 3);
        let out = net.forward(&input).unwrap();
        assert_eq!(out.count_ones(), 0);
    }

    #[test]
    fn normalization_shifts_and_scales() {
        let weights = Mat::from_rows(&[&[1.0, 1.0]]);
        let norm = NormParams::new(vec![2.0], vec![1.0], vec![0.5], 1e-5).unwrap();
        let layer = MaskedDenseLayer::new(weights, Mask::ones(1, 2), Some(norm)).unwrap();
        let x = layer.spatial_input(&[1, 1]).unwrap();
        // (2 - 0.5) * 2 / sqrt(1 + 1e-5)
        let expect = 1.5 * 2.0 / (1.0f64 + 1e-5).sqrt();
        assert!((x[0] - expect).abs() < 1e-12);
    }
}
