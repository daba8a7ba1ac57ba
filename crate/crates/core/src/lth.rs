//! Constructive equivalent-network machinery.
//!
//! A target weight `w` between two spiking neurons is emulated by one
//! virtual spiking neuron: an in-weight `v >= u_th` makes the virtual neuron
//! fire exactly when its input spikes (independent of its temporal state,
//! given a nonnegative reset), and an out-weight within `eps` of `w` carries
//! an approximately equal contribution. Sampling enough candidate pairs from
//! `U[-1, 1]^2` makes such a pair exist with high probability; the width
//! bounds below quantify "enough" for a single weight, a layer, stacked
//! layers, spiking activations, and full networks over time.
//!
//! With `C_th = (1 - u_th)/2` (the chance a uniform in-weight clears the
//! threshold) and `C = 2 p_sup / (1 - beta)` (the flip-probability constant
//! of the layer bound), the required candidate counts are:
//!
//! ```text
//! single weight     ceil( log(1/delta) / (C_th eps) )
//! one layer         N ceil( N/(C_th eps) log(N/delta) )
//! layer to layer    N ceil( N/(C_th eps) log(N^2/delta) )
//! with activation   N^2 ceil( N/(C_th eps) log(N^2/(delta - N C eps)) )
//! full network      N^2 ceil( N/(C_th eps) log(N^2 L/(delta - N C L T eps)) )
//! ```
//!
//! The activation and network bounds are only finite while
//! `delta - N C (L T) eps > 0`; anything else is reported as infeasible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encode::LabeledSpikeDataset;
use crate::error::{Error, Result};
use crate::lif::{LifParams, MaskedDenseLayer, SpikingLayer, SpikingNetwork, WeightInit};
use crate::mat::{Mask, Mat};
use crate::seed::derive_seed;

/// Parameter bundle feeding every width bound.
#[derive(Clone, Copy, Debug)]
pub struct LthBoundParams {
    /// Layer width of the target network.
    pub n: usize,
    /// Depth of the target network.
    pub l: usize,
    /// Timestep horizon.
    pub t: usize,
    /// Per-entry approximation tolerance.
    pub eps: f64,
    /// Failure probability budget.
    pub delta: f64,
    /// Firing threshold of the virtual neurons.
    pub u_th: f64,
    /// Dataset constant `2 p_sup / (1 - beta)`.
    pub c: f64,
}

impl LthBoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::domain("eps must be positive"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::domain("delta must lie in (0, 1]"));
        }
        if self.n == 0 || self.l == 0 || self.t == 0 {
            return Err(Error::domain("n, l and t must be positive"));
        }
        if !(self.c >= 0.0) {
            return Err(Error::domain("the dataset constant must be nonnegative"));
        }
        self.c_th().map(|_| ())
    }

    /// `C_th = (1 - u_th)/2`; positive only below threshold one.
    pub fn c_th(&self) -> Result<f64> {
        let c_th = (1.0 - self.u_th) / 2.0;
        if !(c_th > 0.0) {
            return Err(Error::domain(format!(
                "u_th = {} leaves no probability of clearing the threshold",
                self.u_th
            )));
        }
        Ok(c_th)
    }
}

/// Candidates needed so one of them approximates a single weight.
pub fn required_k_single(p: &LthBoundParams) -> Result<u64> {
    p.validate()?;
    let c_th = p.c_th()?;
    Ok(((1.0 / p.delta).ln() / (c_th * p.eps)).ceil() as u64)
}

/// Candidates needed for all weights into one neuron, in `N` blocks.
pub fn required_k_layer(p: &LthBoundParams) -> Result<u64> {
    p.validate()?;
    let c_th = p.c_th()?;
    let n = p.n as f64;
    let inner = (n / (c_th * p.eps) * (n / p.delta).ln()).ceil() as u64;
    Ok(p.n as u64 * inner)
}

fn k_layer_to_layer_with_log(p: &LthBoundParams, log_arg: f64) -> Result<u64> {
    p.validate()?;
    let c_th = p.c_th()?;
    let n = p.n as f64;
    let inner = (n / (c_th * p.eps) * log_arg.ln()).ceil() as u64;
    Ok(p.n as u64 * inner)
}

/// Candidates needed for all `N x N` weights between two layers.
pub fn required_k_layer_to_layer(p: &LthBoundParams) -> Result<u64> {
    let n = p.n as f64;
    k_layer_to_layer_with_log(p, n * n / p.delta)
}

/// Same bound with the narrower `log(N/delta)` numerator; reported alongside
/// the standard form for comparison.
pub fn required_k_layer_to_layer_narrow(p: &LthBoundParams) -> Result<u64> {
    let n = p.n as f64;
    k_layer_to_layer_with_log(p, n / p.delta)
}

/// Candidates needed once the spiking activation is included. Requires
/// `delta - N C eps > 0`.
pub fn required_k_activation(p: &LthBoundParams) -> Result<u64> {
    p.validate()?;
    let c_th = p.c_th()?;
    let n = p.n as f64;
    let margin = p.delta - n * p.c * p.eps;
    if !(margin > 0.0) {
        return Err(Error::InfeasibleBound(format!(
            "delta - N*C*eps = {margin:.6} is not positive; shrink eps"
        )));
    }
    let inner = (n / (c_th * p.eps) * (n * n / margin).ln()).ceil() as u64;
    Ok((p.n as u64).pow(2) * inner)
}

/// Candidates needed per layer for a whole network over `T` timesteps.
/// Requires `delta - N C L T eps > 0`.
pub fn required_k_network(p: &LthBoundParams) -> Result<u64> {
    p.validate()?;
    let c_th = p.c_th()?;
    let n = p.n as f64;
    let margin = p.delta - n * p.c * (p.l * p.t) as f64 * p.eps;
    if !(margin > 0.0) {
        return Err(Error::InfeasibleBound(format!(
            "delta - N*C*L*T*eps = {margin:.6} is not positive; shrink eps"
        )));
    }
    let inner = (n / (c_th * p.eps) * (n * n * p.l as f64 / margin).ln()).ceil() as u64;
    Ok((p.n as u64).pow(2) * inner)
}

/// How a block chooses among qualifying candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    /// The first index meeting both conditions, mirroring the existence
    /// argument.
    FirstQualifying,
    /// The qualifying index with the smallest out-weight error.
    BestError,
}

/// One virtual-neuron block: `k` candidate (in-weight, out-weight) pairs and
/// a mask activating at most one of them.
#[derive(Clone, Debug)]
pub struct EquivalentBlock {
    pub v_in: Vec<f64>,
    pub w_out: Vec<f64>,
    pub mask: Vec<u8>,
    /// Index of the active candidate, when the construction succeeded.
    pub selected: Option<usize>,
}

impl EquivalentBlock {
    /// Out-weight error of the active candidate against `target`.
    pub fn achieved_error(&self, target: f64) -> Option<f64> {
        self.selected.map(|i| (self.w_out[i] - target).abs())
    }
}

/// Picks the candidate index satisfying `v >= u_th` and
/// `|w_out - target| <= eps` under the given rule.
pub fn select_candidate(
    v_in: &[f64],
    w_out: &[f64],
    target: f64,
    eps: f64,
    u_th: f64,
    rule: SelectionRule,
) -> Option<usize> {
    let qualifies = |i: usize| v_in[i] >= u_th && (w_out[i] - target).abs() <= eps;
    match rule {
        SelectionRule::FirstQualifying => (0..v_in.len()).find(|&i| qualifies(i)),
        SelectionRule::BestError => (0..v_in.len())
            .filter(|&i| qualifies(i))
            .min_by(|&a, &b| {
                let ea = (w_out[a] - target).abs();
                let eb = (w_out[b] - target).abs();
                ea.partial_cmp(&eb).unwrap().then(a.cmp(&b))
            }),
    }
}

/// Samples `k` i.i.d. candidate pairs from `U[-1, 1]^2` and activates one
/// qualifying index. A block with no qualifying candidate is returned with
/// an empty mask, not an error.
pub fn construct_single_weight(
    target_w: f64,
    k: usize,
    eps: f64,
    u_th: f64,
    seed: u64,
    rule: SelectionRule,
) -> Result<EquivalentBlock> {
    if k == 0 {
        return Err(Error::domain("need at least one candidate"));
    }
    if target_w.abs() > 1.0 {
        return Err(Error::domain(format!(
            "target weight {target_w} cannot be matched by out-weights in [-1, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v_in = Vec::with_capacity(k);
    let mut w_out = Vec::with_capacity(k);
    for _ in 0..k {
        v_in.push(rng.gen_range(-1.0..=1.0));
        w_out.push(rng.gen_range(-1.0..=1.0));
    }
    let selected = select_candidate(&v_in, &w_out, target_w, eps, u_th, rule);
    let mut mask = vec![0u8; k];
    if let Some(i) = selected {
        mask[i] = 1;
    }
    Ok(EquivalentBlock { v_in, w_out, mask, selected })
}

/// A block that failed to find a qualifying candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockFailure {
    pub layer: usize,
    pub out_idx: usize,
    pub in_idx: usize,
}

/// Outcome summary of an equivalent-network construction.
#[derive(Clone, Debug, Default)]
pub struct ConstructionReport {
    /// (output, input) pairs attempted across all layers.
    pub attempted: usize,
    pub failed: Vec<BlockFailure>,
    /// Largest achieved out-weight error among successful selections.
    pub max_weight_error: f64,
}

impl ConstructionReport {
    pub fn all_successful(&self) -> bool {
        self.failed.is_empty()
    }
}

/// An equivalent network plus its construction report.
#[derive(Clone, Debug)]
pub struct EquivalentConstruction {
    pub network: SpikingNetwork,
    pub report: ConstructionReport,
}

/// Admissible per-weight magnitude for a layer of fan-in `n`.
pub fn admissible_weight_bound(n_in: usize) -> f64 {
    1.0 / (n_in as f64).sqrt()
}

/// Copy of `net` with each layer's weights scaled into the admissible range
/// when needed; returns the applied per-layer scale factors (1 where the
/// layer already fit). Rescaling changes firing semantics relative to the
/// threshold, so this is a separate, explicit step.
pub fn rescale_into_admissible(net: &SpikingNetwork) -> (SpikingNetwork, Vec<f64>) {
    let mut out = net.clone();
    let mut factors = Vec::with_capacity(net.depth());
    for layer in &mut out.layers {
        let bound = admissible_weight_bound(layer.synapse.n_in());
        let max_abs = layer
            .synapse
            .weights
            .as_slice()
            .iter()
            .fold(0.0f64, |m, &w| m.max(w.abs()));
        let factor = if max_abs > bound { bound / max_abs } else { 1.0 };
        if factor < 1.0 {
            layer.synapse.weights.as_mut_slice().iter_mut().for_each(|w| *w *= factor);
        }
        factors.push(factor);
    }
    (out, factors)
}

/// Builds the 2L-layer equivalent of `target`: each target layer becomes a
/// virtual layer of `k_per_layer` spiking neurons (each wired to exactly one
/// input channel, `k/N` candidates per channel block) followed by a masked
/// out-layer whose selections approximate the target weights to
/// `eps / fan_in` each, so every spatial-input entry is off by at most
/// `eps`. Virtual and out-layers inherit the target layer's neuron
/// parameters.
pub fn construct_equivalent_network(
    target: &SpikingNetwork,
    k_per_layer: usize,
    eps: f64,
    seed: u64,
    rule: SelectionRule,
) -> Result<EquivalentConstruction> {
    if !(eps > 0.0) {
        return Err(Error::domain("eps must be positive"));
    }
    for (l, layer) in target.layers.iter().enumerate() {
        if layer.neuron.v_reset < 0.0 {
            return Err(Error::domain(format!(
                "layer {l}: virtual neurons need a nonnegative reset potential"
            )));
        }
        let bound = admissible_weight_bound(layer.synapse.n_in());
        for i in 0..layer.synapse.n_out() {
            for j in 0..layer.synapse.n_in() {
                let w = layer.synapse.effective_weight(i, j);
                if w.abs() > bound + 1e-12 {
                    return Err(Error::domain(format!(
                        "layer {l} weight ({i}, {j}) = {w} exceeds the admissible \
                         bound {bound:.6}; rescale first"
                    )));
                }
            }
        }
        if k_per_layer == 0 || k_per_layer % layer.synapse.n_in() != 0 {
            return Err(Error::domain(format!(
                "k_per_layer = {k_per_layer} must be a positive multiple of layer {l}'s \
                 fan-in {}",
                layer.synapse.n_in()
            )));
        }
    }

    let mut layers = Vec::with_capacity(2 * target.depth());
    let mut report = ConstructionReport::default();
    for (l, t_layer) in target.layers.iter().enumerate() {
        let n_in = t_layer.synapse.n_in();
        let n_out = t_layer.synapse.n_out();
        let block = k_per_layer / n_in;
        let tol = eps / n_in as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, l as u64));

        // In-weights: virtual neuron a listens to channel a / block only.
        let mut v_live = Vec::with_capacity(k_per_layer);
        for _ in 0..k_per_layer {
            v_live.push(rng.gen_range(-1.0..=1.0));
        }
        // Out-weights: the full candidate matrix.
        let w_out = Mat::from_fn(n_out, k_per_layer, |_, _| rng.gen_range(-1.0..=1.0));

        let mut out_mask = Mask::zeros(n_out, k_per_layer);
        for j in 0..n_out {
            for i in 0..n_in {
                report.attempted += 1;
                let target_w = t_layer.synapse.effective_weight(j, i);
                let base = i * block;
                let row = w_out.row(j);
                let pick = select_candidate(
                    &v_live[base..base + block],
                    &row[base..base + block],
                    target_w,
                    tol,
                    t_layer.neuron.u_th,
                    rule,
                );
                match pick {
                    Some(a) => {
                        out_mask.set(j, base + a, true);
                        let err = (row[base + a] - target_w).abs();
                        report.max_weight_error = report.max_weight_error.max(err);
                    }
                    None => {
                        report.failed.push(BlockFailure { layer: l, out_idx: j, in_idx: i });
                    }
                }
            }
        }

        let v_weights = Mat::from_fn(k_per_layer, n_in, |a, i| {
            if i == a / block {
                v_live[a]
            } else {
                0.0
            }
        });
        let v_mask = Mask::from_fn(k_per_layer, n_in, |a, i| i == a / block);
        layers.push(SpikingLayer::new(
            MaskedDenseLayer::new(v_weights, v_mask, None)?,
            t_layer.neuron,
        )?);
        layers.push(SpikingLayer::new(
            MaskedDenseLayer::new(w_out, out_mask, None)?,
            t_layer.neuron,
        )?);
    }
    Ok(EquivalentConstruction { network: SpikingNetwork::new(layers)?, report })
}

/// Desk-scale equivalence experiment: measure the dataset constant on
/// calibration networks, size the virtual layers from the network bound, and
/// check empirical output agreement against the `1 - delta` guarantee.
#[derive(Clone, Copy, Debug)]
pub struct LthExperimentConfig {
    pub n: usize,
    pub l: usize,
    pub t: usize,
    pub delta: f64,
    /// Per-entry tolerance; `None` picks `eps_budget_fraction` of the
    /// feasibility budget `delta / (N C L T)` from the measured constant.
    pub eps: Option<f64>,
    pub beta: f64,
    pub u_th: f64,
    pub trials: usize,
    pub calibration_nets: usize,
    pub calibration_samples: usize,
    pub eps_budget_fraction: f64,
    /// Overrides the bound-derived width (rounded up to a block multiple).
    pub k_override: Option<usize>,
    pub rule: SelectionRule,
    pub seed: u64,
}

impl Default for LthExperimentConfig {
    fn default() -> Self {
        LthExperimentConfig {
            n: 4,
            l: 2,
            t: 3,
            delta: 0.2,
            eps: None,
            beta: 0.3,
            u_th: 0.5,
            trials: 500,
            calibration_nets: 32,
            calibration_samples: 16,
            eps_budget_fraction: 0.5,
            k_override: None,
            rule: SelectionRule::FirstQualifying,
            seed: 0,
        }
    }
}

/// Outcome of [`run_lth_experiment`].
#[derive(Clone, Copy, Debug)]
pub struct LthExperimentReport {
    pub params: LthBoundParams,
    pub beta: f64,
    pub k_required: u64,
    pub k_used: usize,
    pub k_layer_to_layer: u64,
    pub k_layer_to_layer_narrow: u64,
    pub trials: usize,
    pub exact_agreement: f64,
    pub mean_l2: f64,
    pub blocks_attempted: usize,
    pub blocks_failed: usize,
    /// The guaranteed agreement level `1 - delta`.
    pub target_agreement: f64,
}

/// Runs the full experiment. Every trial builds a fresh random target
/// network, constructs its equivalent from the sized virtual layers, and
/// compares outputs on a fresh random input train.
pub fn run_lth_experiment(cfg: &LthExperimentConfig) -> Result<LthExperimentReport> {
    if cfg.trials == 0 || cfg.calibration_nets == 0 || cfg.calibration_samples == 0 {
        return Err(Error::domain("trials and calibration sizes must be positive"));
    }
    if !(cfg.eps_budget_fraction > 0.0 && cfg.eps_budget_fraction < 1.0) {
        return Err(Error::domain("eps_budget_fraction must lie in (0, 1)"));
    }
    let params = LifParams::new(cfg.beta, cfg.u_th, 0.0)?;
    let widths = vec![cfg.n; cfg.l + 1];

    // The dataset constant 2 p_sup / (1 - beta), medianed over calibration
    // networks so one near-degenerate neuron does not dictate the width.
    let mut constants = Vec::with_capacity(cfg.calibration_nets);
    for i in 0..cfg.calibration_nets {
        let mut net = SpikingNetwork::random(
            &widths,
            params,
            WeightInit::RsqrtFanIn,
            derive_seed(cfg.seed, 10_000 + i as u64),
        )?;
        let data = crate::encode::random_spike_dataset(
            cfg.calibration_samples,
            cfg.n,
            cfg.t,
            0.5,
            derive_seed(cfg.seed, 20_000 + i as u64),
        )?;
        let stats = crate::prob::estimate_membrane_stats(&mut net, &data)?;
        let p_sup = stats
            .iter()
            .flat_map(|s| s.p_sup.iter().copied())
            .fold(0.0f64, f64::max);
        constants.push(2.0 * p_sup / (1.0 - cfg.beta));
    }
    constants.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let c = constants[constants.len() / 2];

    let eps = match cfg.eps {
        Some(e) => e,
        None => {
            cfg.eps_budget_fraction * cfg.delta / (cfg.n as f64 * c * (cfg.l * cfg.t) as f64)
        }
    };
    let bound_params = LthBoundParams {
        n: cfg.n,
        l: cfg.l,
        t: cfg.t,
        eps,
        delta: cfg.delta,
        u_th: cfg.u_th,
        c,
    };
    let k_required = required_k_network(&bound_params)?;
    let k_used = match cfg.k_override {
        Some(k) => k.div_ceil(cfg.n) * cfg.n,
        None => (k_required as usize).div_ceil(cfg.n) * cfg.n,
    };

    let mut exact_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut attempted = 0usize;
    let mut failed = 0usize;
    for trial in 0..cfg.trials {
        let mut target = SpikingNetwork::random(
            &widths,
            params,
            WeightInit::RsqrtFanIn,
            derive_seed(cfg.seed, 30_000 + trial as u64),
        )?;
        let input = crate::encode::random_spike_dataset(
            1,
            cfg.n,
            cfg.t,
            0.5,
            derive_seed(cfg.seed, 40_000 + trial as u64),
        )?;
        let mut built = construct_equivalent_network(
            &target,
            k_used,
            eps,
            derive_seed(cfg.seed, 50_000 + trial as u64),
            cfg.rule,
        )?;
        attempted += built.report.attempted;
        failed += built.report.failed.len();
        let agreement = measure_agreement(&mut target, &mut built.network, &input)?;
        exact_sum += agreement.exact_fraction;
        l2_sum += agreement.mean_l2;
    }

    Ok(LthExperimentReport {
        params: bound_params,
        beta: cfg.beta,
        k_required,
        k_used,
        k_layer_to_layer: required_k_layer_to_layer(&bound_params)?,
        k_layer_to_layer_narrow: required_k_layer_to_layer_narrow(&bound_params)?,
        trials: cfg.trials,
        exact_agreement: exact_sum / cfg.trials as f64,
        mean_l2: l2_sum / cfg.trials as f64,
        blocks_attempted: attempted,
        blocks_failed: failed,
        target_agreement: 1.0 - cfg.delta,
    })
}

/// Output agreement of two networks over a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Agreement {
    /// Fraction of samples whose outputs match bit for bit at every
    /// timestep.
    pub exact_fraction: f64,
    /// Mean per-timestep Euclidean distance between the output trains.
    pub mean_l2: f64,
}

/// Compares the outputs of two networks sample by sample.
pub fn measure_agreement(
    net_a: &mut SpikingNetwork,
    net_b: &mut SpikingNetwork,
    data: &LabeledSpikeDataset,
) -> Result<Agreement> {
    if data.is_empty() {
        return Err(Error::domain("cannot measure agreement on an empty dataset"));
    }
    if net_a.input_width() != net_b.input_width()
        || net_a.output_width() != net_b.output_width()
    {
        return Err(Error::domain("networks must share input and output widths"));
    }
    let mut exact = 0usize;
    let mut l2_sum = 0.0;
    for (sample, _) in data.iter() {
        let out_a = net_a.forward(sample)?;
        let out_b = net_b.forward(sample)?;
        if out_a == out_b {
            exact += 1;
        }
        let mut per_t = 0.0;
        for t in 0..out_a.timesteps() {
            let mut sq = 0.0;
            for i in 0..out_a.width() {
                let d = out_a.get(t, i) as f64 - out_b.get(t, i) as f64;
                sq += d * d;
            }
            per_t += sq.sqrt();
        }
        l2_sum += per_t / out_a.timesteps() as f64;
    }
    Ok(Agreement {
        exact_fraction: exact as f64 / data.len() as f64,
        mean_l2: l2_sum / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::{SpikeTrain, WeightInit};

    fn params(n: usize, eps: f64, delta: f64, u_th: f64) -> LthBoundParams {
        LthBoundParams { n, l: 1, t: 1, eps, delta, u_th, c: 1.0 }
    }

    #[test]
    fn single_bound_reference_values() {
        // 1/(0.25 * 0.1) * ln 20 = 40 ln 20 = 119.83, so 120.
        let p = params(1, 0.1, 0.05, 0.5);
        assert_eq!(required_k_single(&p).unwrap(), 120);
        // 40 ln 10 = 92.1, so 93.
        let p = params(1, 0.1, 0.1, 0.5);
        assert_eq!(required_k_single(&p).unwrap(), 93);
    }

    #[test]
    fn single_bound_delta_one_needs_nothing() {
        let p = params(1, 0.1, 1.0, 0.5);
        assert_eq!(required_k_single(&p).unwrap(), 0);
    }

    #[test]
    fn single_bound_halving_eps_doubles_it() {
        let coarse = params(1, 0.2, 0.05, 0.5);
        let fine = params(1, 0.1, 0.05, 0.5);
        let a = (1.0 / 0.05f64).ln() / (0.25 * 0.2);
        let b = (1.0 / 0.05f64).ln() / (0.25 * 0.1);
        assert!((b - 2.0 * a).abs() < 1e-9);
        assert!(required_k_single(&fine).unwrap() >= 2 * required_k_single(&coarse).unwrap() - 1);
    }

    #[test]
    fn single_bound_rejects_threshold_at_one() {
        let p = params(1, 0.1, 0.1, 1.0);
        assert!(required_k_single(&p).is_err());
    }

    #[test]
    fn layer_bound_reference_value() {
        // 4 * ceil(160 ln 40) = 4 * 591 = 2364.
        let p = params(4, 0.1, 0.1, 0.5);
        assert_eq!(required_k_layer(&p).unwrap(), 2364);
    }

    #[test]
    fn layer_bound_collapses_at_width_one() {
        let p = params(1, 0.1, 0.1, 0.5);
        assert_eq!(required_k_layer(&p).unwrap(), required_k_single(&p).unwrap());
    }

    #[test]
    fn layer_to_layer_appendix_vs_narrow_form() {
        let p = params(4, 0.1, 0.1, 0.5);
        let wide = required_k_layer_to_layer(&p).unwrap();
        let narrow = required_k_layer_to_layer_narrow(&p).unwrap();
        assert!(wide >= narrow);
        // 4 * ceil(160 * ln(160)) = 4 * ceil(812.1) = 4 * 813.
        assert_eq!(wide, 4 * 813);
    }

    #[test]
    fn activation_bound_reference_and_infeasible() {
        // delta - N C eps = 0.5 - 2*0.5*0.1 = 0.4;
        // inner = ceil(80 * ln(4/0.4)) = ceil(184.2) = 185; k = 4 * 185.
        let p = LthBoundParams { n: 2, l: 1, t: 1, eps: 0.1, delta: 0.5, u_th: 0.5, c: 0.5 };
        assert_eq!(required_k_activation(&p).unwrap(), 740);

        let bad = LthBoundParams { n: 4, l: 1, t: 1, eps: 0.06, delta: 0.2, u_th: 0.5, c: 1.0 };
        match required_k_activation(&bad) {
            Err(Error::InfeasibleBound(_)) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn network_bound_collapses_to_activation() {
        let p = LthBoundParams { n: 3, l: 1, t: 1, eps: 0.01, delta: 0.5, u_th: 0.5, c: 0.5 };
        assert_eq!(required_k_network(&p).unwrap(), required_k_activation(&p).unwrap());
    }

    #[test]
    fn network_bound_infeasible_propagates() {
        let p = LthBoundParams { n: 4, l: 2, t: 3, eps: 0.1, delta: 0.2, u_th: 0.5, c: 1.0 };
        assert!(matches!(required_k_network(&p), Err(Error::InfeasibleBound(_))));
    }

    #[test]
    fn bounds_are_monotone_over_a_grid() {
        let base = LthBoundParams { n: 3, l: 2, t: 2, eps: 0.05, delta: 0.3, u_th: 0.5, c: 0.2 };
        let k = |p: &LthBoundParams| required_k_network(p).unwrap();
        // Nonincreasing in eps and delta.
        let mut last = u64::MAX;
        for i in 1..6 {
            let p = LthBoundParams { eps: 0.01 * i as f64, ..base };
            let v = k(&p);
            assert!(v <= last);
            last = v;
        }
        last = u64::MAX;
        for i in 1..6 {
            let p = LthBoundParams { delta: 0.15 * i as f64, ..base };
            let v = k(&p);
            assert!(v <= last);
            last = v;
        }
        // Nondecreasing in n, l, t.
        let grow = |f: &dyn Fn(usize) -> LthBoundParams| {
            let mut prev = 0u64;
            for i in 1..4 {
                let v = k(&f(i));
                assert!(v >= prev);
                prev = v;
            }
        };
        grow(&|n| LthBoundParams { n, ..base });
        grow(&|l| LthBoundParams { l, ..base });
        grow(&|t| LthBoundParams { t, ..base });
        // Same for the simpler bounds.
        let mut prev = 0;
        for n in 1..6 {
            let v = required_k_layer(&LthBoundParams { n, ..base }).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn candidate_selection_examples() {
        // First index qualifies on both conditions.
        let idx = select_candidate(
            &[0.7, -0.3],
            &[0.42, 0.9],
            0.4,
            0.05,
            0.5,
            SelectionRule::FirstQualifying,
        );
        assert_eq!(idx, Some(0));
        // In-weight below threshold: no qualifying candidate.
        let idx = select_candidate(&[0.3], &[0.4], 0.4, 0.5, 0.5, SelectionRule::FirstQualifying);
        assert_eq!(idx, None);
        // Best-error mode picks the tighter match.
        let idx = select_candidate(
            &[0.9, 0.9],
            &[0.44, 0.41],
            0.4,
            0.05,
            0.5,
            SelectionRule::BestError,
        );
        assert_eq!(idx, Some(1));
    }

    #[test]
    fn single_weight_construction_activates_at_most_one() {
        let block =
            construct_single_weight(0.2, 50, 0.1, 0.5, 99, SelectionRule::FirstQualifying)
                .unwrap();
        let active: usize = block.mask.iter().map(|&m| m as usize).sum();
        assert!(active <= 1);
        if let Some(i) = block.selected {
            assert!(block.v_in[i] >= 0.5);
            assert!((block.w_out[i] - 0.2).abs() <= 0.1);
            assert_eq!(block.mask[i], 1);
        }
    }

    /// Monte Carlo success frequency at the single-weight bound width.
    #[test]
    fn single_weight_success_rate_meets_bound() {
        let p = params(1, 0.1, 0.1, 0.5);
        let k = required_k_single(&p).unwrap() as usize;
        let trials = 2_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4141);
        let mut successes = 0usize;
        for t in 0..trials {
            // Targets inside [-0.7, 0.7] keep the candidate window inside
            // [-1, 1], matching the bound's uniform-measure argument.
            let target = rng.gen_range(-0.7..=0.7);
            let block = construct_single_weight(
                target,
                k,
                0.1,
                0.5,
                derive_seed(7, t as u64),
                SelectionRule::FirstQualifying,
            )
            .unwrap();
            if block.selected.is_some() {
                successes += 1;
            }
        }
        let freq = successes as f64 / trials as f64;
        let std3 = 3.0 * (0.9f64 * 0.1 / trials as f64).sqrt();
        assert!(freq >= 0.9 - std3, "success frequency {freq}");
    }

    /// A 1x1 target reduces to one candidate block: a k-wide virtual layer
    /// on a single input channel and one active out-weight meeting the same
    /// two conditions the single-weight block enforces.
    #[test]
    fn equivalent_single_layer_single_weight_reduces_to_block() {
        let weights = Mat::from_rows(&[&[0.4]]);
        let p = LifParams { beta: 0.5, u_th: 0.5, v_reset: 0.0 };
        let target = SpikingNetwork::new(vec![SpikingLayer::new(
            MaskedDenseLayer::dense(weights),
            p,
        )
        .unwrap()])
        .unwrap();
        let k = 600;
        let built =
            construct_equivalent_network(&target, k, 0.1, 5, SelectionRule::FirstQualifying)
                .unwrap();
        assert_eq!(built.network.depth(), 2);
        assert_eq!(built.report.attempted, 1);
        assert!(built.report.all_successful());
        let virt = &built.network.layers[0].synapse;
        let out = &built.network.layers[1].synapse;
        assert_eq!((virt.n_out(), virt.n_in()), (k, 1));
        assert_eq!((out.n_out(), out.n_in()), (1, k));
        let picks: Vec<usize> = (0..k).filter(|&a| out.mask.get(0, a)).collect();
        assert_eq!(picks.len(), 1);
        let a = picks[0];
        assert!(virt.weights[(a, 0)] >= 0.5);
        assert!((out.weights[(0, a)] - 0.4).abs() <= 0.1);
    }

    /// Exhaustive linear-map comparison over all binary inputs.
    #[test]
    fn construction_error_bounded_for_every_binary_input() {
        let n = 4usize;
        let p = LifParams { beta: 0.5, u_th: 0.5, v_reset: 0.0 };
        let target =
            SpikingNetwork::random(&[n, n], p, WeightInit::RsqrtFanIn, 77).unwrap();
        let eps = 0.25;
        let built = construct_equivalent_network(
            &target,
            n * 4000,
            eps,
            13,
            SelectionRule::FirstQualifying,
        )
        .unwrap();
        assert!(built.report.all_successful(), "failed blocks: {:?}", built.report.failed);

        let virt = &built.network.layers[0].synapse;
        let out = &built.network.layers[1].synapse;
        for pattern in 0..(1u32 << n) {
            let s: Vec<f64> = (0..n).map(|i| ((pattern >> i) & 1) as f64).collect();
            // Selected virtual neurons relay their channel's spike exactly.
            let mut relayed = vec![0.0f64; virt.n_out()];
            for a in 0..virt.n_out() {
                let channel = (0..n).find(|&i| virt.mask.get(a, i)).unwrap();
                relayed[a] = if virt.weights[(a, channel)] >= p.u_th && s[channel] == 1.0 {
                    1.0
                } else if s[channel] == 0.0 {
                    0.0
                } else {
                    // Unselected candidates may or may not fire; masked out
                    // entries cannot influence the comparison below.
                    f64::NAN
                };
            }
            for j in 0..n {
                let mut approx = 0.0;
                for a in 0..out.n_in() {
                    if out.mask.get(j, a) {
                        assert!(!relayed[a].is_nan(), "selected candidate must be decisive");
                        approx += out.weights[(j, a)] * relayed[a];
                    }
                }
                let mut exact = 0.0;
                for i in 0..n {
                    exact += target.layers[0].synapse.weights[(j, i)] * s[i];
                }
                assert!(
                    (approx - exact).abs() <= eps + 1e-12,
                    "pattern {pattern:04b} output {j}: {approx} vs {exact}"
                );
            }
        }
    }

    /// A zero target matrix is approximable with modest widths.
    #[test]
    fn zero_target_construction_succeeds() {
        let n = 3usize;
        let p = LifParams { beta: 0.5, u_th: 0.5, v_reset: 0.0 };
        let zero = Mat::zeros(n, n);
        let target = SpikingNetwork::new(vec![SpikingLayer::new(
            MaskedDenseLayer::dense(zero),
            p,
        )
        .unwrap()])
        .unwrap();
        let mut successes = 0usize;
        let trials = 50usize;
        for s in 0..trials {
            let built = construct_equivalent_network(
                &target,
                n * 600,
                0.15,
                s as u64,
                SelectionRule::FirstQualifying,
            )
            .unwrap();
            if built.report.all_successful() {
                successes += 1;
            }
        }
        assert!(successes >= 45, "only {successes}/{trials} constructions succeeded");
    }

    #[test]
    fn out_of_range_target_weight_rejected() {
        let weights = Mat::from_rows(&[&[0.9, 0.0], &[0.0, 0.1]]);
        let p = LifParams { beta: 0.5, u_th: 0.5, v_reset: 0.0 };
        let target = SpikingNetwork::new(vec![SpikingLayer::new(
            MaskedDenseLayer::dense(weights),
            p,
        )
        .unwrap()])
        .unwrap();
        // 0.9 > 1/sqrt(2).
        assert!(construct_equivalent_network(&target, 8, 0.1, 0, SelectionRule::FirstQualifying)
            .is_err());

        let (rescaled, factors) = rescale_into_admissible(&target);
        assert!(factors[0] < 1.0);
        assert!(construct_equivalent_network(
            &rescaled,
            2 * 2000,
            0.2,
            0,
            SelectionRule::FirstQualifying
        )
        .is_ok());
    }

    /// Active virtual neurons fire exactly when their input spikes,
    /// regardless of spike history, checked exhaustively over histories.
    #[test]
    fn virtual_neuron_output_is_temporally_independent() {
        let p = LifParams { beta: 0.9, u_th: 0.5, v_reset: 0.0 };
        for v_milli in [500u32, 700, 999, 1000] {
            let v = v_milli as f64 / 1000.0;
            for history in 0..(1u32 << 6) {
                let mut h = 0.0f64;
                for t in 0..6 {
                    let s_in = ((history >> t) & 1) as f64;
                    let u = h + v * s_in;
                    let fired = u >= p.u_th;
                    assert_eq!(
                        fired,
                        s_in == 1.0,
                        "v={v} history={history:06b} t={t}: relay property broken"
                    );
                    h = if fired { p.v_reset } else { p.beta * u };
                }
            }
        }
    }

    #[test]
    fn agreement_identity_and_flip() {
        let p = LifParams { beta: 0.5, u_th: 0.5, v_reset: 0.0 };
        let mut net =
            SpikingNetwork::random(&[3, 3], p, WeightInit::RsqrtFanIn, 21).unwrap();
        let data = crate::encode::random_spike_dataset(20, 3, 4, 0.5, 3).unwrap();
        let mut same = net.clone();
        let agreement = measure_agreement(&mut net, &mut same, &data).unwrap();
        assert_eq!(agreement.exact_fraction, 1.0);
        assert_eq!(agreement.mean_l2, 0.0);

        // Flip the sign of one strong weight and drive an input through it.
        let mut flipped = net.clone();
        flipped.layers[0].synapse.weights[(0, 0)] = 0.5;
        net.layers[0].synapse.weights[(0, 0)] = -0.5;
        let adversarial = crate::encode::LabeledSpikeDataset::new(
            vec![(SpikeTrain::from_fn(2, 3, |_, i| i == 0), 0)],
            1,
        )
        .unwrap();
        let ag = measure_agreement(&mut net, &mut flipped, &adversarial).unwrap();
        assert!(ag.exact_fraction < 1.0);
        assert!(ag.mean_l2 > 0.0);
    }

    #[test]
    fn agreement_rejects_empty_and_mismatched() {
        let p = LifParams::default();
        let mut a = SpikingNetwork::random(&[3, 3], p, WeightInit::RsqrtFanIn, 0).unwrap();
        let mut b = SpikingNetwork::random(&[3, 2], p, WeightInit::RsqrtFanIn, 0).unwrap();
        let empty = crate::encode::LabeledSpikeDataset::empty();
        let mut a2 = a.clone();
        assert!(measure_agreement(&mut a, &mut a2, &empty).is_err());
        let data = crate::encode::random_spike_dataset(2, 3, 2, 0.5, 0).unwrap();
        assert!(measure_agreement(&mut a, &mut b, &data).is_err());
    }
}
