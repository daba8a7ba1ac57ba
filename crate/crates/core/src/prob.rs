//! Probabilistic model of spike flips under weight perturbation.
//!
//! A perturbation of the spatial input by at most `eps` can only change a
//! neuron's output when its membrane potential lies in the crisis
//! neighborhood `[u_th - eps, u_th + eps]`, so the mass of the membrane
//! distribution there bounds the flip probability. Membrane potentials are
//! modeled as Gaussian; per-neuron means, variances and density suprema are
//! estimated from forward passes over a dataset. The same machinery yields
//! the per-weight flip probability
//!
//! ```text
//! P = E_act[|w|] * |gamma| / sqrt(sigma_b^2 + eps_bn) * N(0 | mu - u_th, var)
//! ```
//!
//! that drives the spike-firing pruning criterion.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::encode::LabeledSpikeDataset;
use crate::error::{Error, Result};
use crate::lif::SpikingNetwork;

/// Below this variance the Gaussian fit is meaningless and the histogram
/// fallback takes over.
pub const DEGENERATE_VAR: f64 = 1e-8;

/// Half-width of the counting window used for the histogram density.
const HIST_WINDOW: f64 = 0.05;

/// Per-neuron membrane statistics of one layer, plus the firing rate of each
/// input channel feeding it.
#[derive(Clone, Debug)]
pub struct MembraneStats {
    /// Mean membrane potential per output neuron.
    pub mu: Vec<f64>,
    /// Population variance per output neuron.
    pub var: Vec<f64>,
    /// Density supremum estimate per output neuron: the Gaussian peak
    /// `1/sqrt(2 pi var)`, or a histogram estimate near the threshold when
    /// the variance is degenerate.
    pub p_sup: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Observed firing rate of each input channel.
    pub in_rate: Vec<f64>,
    /// Membrane observations per neuron that produced the estimates.
    pub observations: usize,
}

/// Statistics of one (output neuron, input channel) pair.
#[derive(Clone, Copy, Debug)]
pub struct ChannelStats {
    pub in_rate: f64,
    pub mu: f64,
    pub var: f64,
    pub p_sup: f64,
}

impl MembraneStats {
    pub fn channel(&self, out_idx: usize, in_idx: usize) -> ChannelStats {
        ChannelStats {
            in_rate: self.in_rate[in_idx],
            mu: self.mu[out_idx],
            var: self.var[out_idx],
            p_sup: self.p_sup[out_idx],
        }
    }

    /// Expectation of the activated absolute weight: the input channel's
    /// firing rate times `|w|`.
    pub fn e_act_absw(&self, in_idx: usize, w: f64) -> f64 {
        self.in_rate[in_idx] * w.abs()
    }
}

/// Mean, population variance, density-supremum estimate and degeneracy flag
/// of a stream of membrane observations.
pub(crate) fn stats_from_moments(
    count: usize,
    sum: f64,
    sum_sq: f64,
    near_threshold: usize,
) -> (f64, f64, f64, bool) {
    if count == 0 {
        return (0.0, 0.0, 0.0, true);
    }
    let n = count as f64;
    let mu = sum / n;
    let var = (sum_sq / n - mu * mu).max(0.0);
    if var < DEGENERATE_VAR {
        let density = near_threshold as f64 / (n * 2.0 * HIST_WINDOW);
        (mu, var, density, true)
    } else {
        (mu, var, 1.0 / (2.0 * std::f64::consts::PI * var).sqrt(), false)
    }
}

/// Runs every sample through the network and estimates per-layer membrane
/// statistics and input firing rates.
pub fn estimate_membrane_stats(
    net: &mut SpikingNetwork,
    data: &LabeledSpikeDataset,
) -> Result<Vec<MembraneStats>> {
    if data.is_empty() {
        return Err(Error::domain("cannot estimate statistics from an empty dataset"));
    }
    let depth = net.depth();
    let mut count = vec![0usize; depth];
    let mut sum: Vec<Vec<f64>> =
        net.layers.iter().map(|l| vec![0.0; l.synapse.n_out()]).collect();
    let mut sum_sq = sum.clone();
    let mut near: Vec<Vec<usize>> =
        net.layers.iter().map(|l| vec![0; l.synapse.n_out()]).collect();
    let mut in_fired: Vec<Vec<usize>> =
        net.layers.iter().map(|l| vec![0; l.synapse.n_in()]).collect();
    let thresholds: Vec<f64> = net.layers.iter().map(|l| l.neuron.u_th).collect();

    for (sample, _) in data.iter() {
        net.forward_observed(sample, |obs| {
            count[obs.layer] += 1;
            for (i, &u) in obs.u.iter().enumerate() {
                sum[obs.layer][i] += u;
                sum_sq[obs.layer][i] += u * u;
                if (u - thresholds[obs.layer]).abs() <= HIST_WINDOW {
                    near[obs.layer][i] += 1;
                }
            }
            for (j, &s) in obs.s_in.iter().enumerate() {
                in_fired[obs.layer][j] += s as usize;
            }
        })?;
    }

    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        let n_out = net.layers[l].synapse.n_out();
        let mut mu = Vec::with_capacity(n_out);
        let mut var = Vec::with_capacity(n_out);
        let mut p_sup = Vec::with_capacity(n_out);
        let mut degenerate = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let (m, v, p, d) = stats_from_moments(count[l], sum[l][i], sum_sq[l][i], near[l][i]);
            mu.push(m);
            var.push(v);
            p_sup.push(p);
            degenerate.push(d);
        }
        let in_rate =
            in_fired[l].iter().map(|&f| f as f64 / count[l].max(1) as f64).collect();
        out.push(MembraneStats { mu, var, p_sup, degenerate, in_rate, observations: count[l] });
    }
    Ok(out)
}

/// Sets each layer's normalization to the observed mean and standard
/// deviation of its raw linear output over `data`, layer by layer so every
/// calibration sees the previous layers already normalized. Existing `gamma`
/// values are kept; layers without normalization get `gamma = 1`.
pub fn calibrate_norm(
    net: &mut SpikingNetwork,
    data: &LabeledSpikeDataset,
    eps_bn: f64,
) -> Result<()> {
    use crate::lif::NormParams;
    if data.is_empty() {
        return Err(Error::domain("cannot calibrate normalization from an empty dataset"));
    }
    for l in 0..net.depth() {
        let gamma = match net.layers[l].synapse.norm.take() {
            Some(n) => n.gamma,
            None => vec![1.0; net.layers[l].synapse.n_out()],
        };
        let n_out = net.layers[l].synapse.n_out();
        let mut count = 0usize;
        let mut sum = vec![0.0f64; n_out];
        let mut sum_sq = vec![0.0f64; n_out];
        for (sample, _) in data.iter() {
            net.forward_observed(sample, |obs| {
                if obs.layer == l {
                    count += 1;
                    for (i, &x) in obs.x.iter().enumerate() {
                        sum[i] += x;
                        sum_sq[i] += x * x;
                    }
                }
            })?;
        }
        let n = count.max(1) as f64;
        let mut mu_b = Vec::with_capacity(n_out);
        let mut sigma_b = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let m = sum[i] / n;
            mu_b.push(m);
            sigma_b.push((sum_sq[i] / n - m * m).max(0.0).sqrt());
        }
        net.layers[l].synapse.norm = Some(NormParams::new(gamma, sigma_b, mu_b, eps_bn)?);
    }
    Ok(())
}

/// Perturbation query: the input error bound plus the layer context every
/// flip bound needs.
#[derive(Clone, Copy, Debug)]
pub struct CrisisQuery {
    pub eps: f64,
    pub u_th: f64,
    pub beta: f64,
    pub width: usize,
    pub timesteps: usize,
}

impl CrisisQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(Error::domain("perturbation bound must be nonnegative"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::domain("beta must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Mass of the membrane distribution inside the crisis neighborhood
/// `[u_th - eps, u_th + eps]` under a Gaussian fit. A degenerate variance
/// collapses to a point mass at the mean.
pub fn crisis_probability(mu: f64, var: f64, q: &CrisisQuery) -> f64 {
    if var < DEGENERATE_VAR {
        return if (mu - q.u_th).abs() <= q.eps { 1.0 } else { 0.0 };
    }
    let normal = Normal::new(mu, var.sqrt()).expect("positive variance");
    (normal.cdf(q.u_th + q.eps) - normal.cdf(q.u_th - q.eps)).clamp(0.0, 1.0)
}

/// Worst-case membrane error after `timesteps` steps of per-step input error
/// `eps` under decay `beta`: the geometric sum `eps (1 - beta^T)/(1 - beta)`,
/// capped by `eps / (1 - beta)`.
pub fn temporal_error_bound(eps: f64, beta: f64, timesteps: usize) -> f64 {
    eps * (1.0 - beta.powi(timesteps as i32)) / (1.0 - beta)
}

/// Union bound on any of `width` neurons flipping at the final timestep:
/// `min(1, 2 N p_sup eps / (1 - beta))`.
pub fn layer_flip_bound(p_sup: f64, q: &CrisisQuery) -> f64 {
    (2.0 * q.width as f64 * p_sup * q.eps / (1.0 - q.beta)).min(1.0)
}

/// Per-output-neuron normalization constants entering the flip probability.
#[derive(Clone, Copy, Debug)]
pub struct NormScale {
    pub gamma: f64,
    pub sigma_b: f64,
    pub eps_bn: f64,
}

impl NormScale {
    pub fn scale(&self) -> f64 {
        self.gamma.abs() / (self.sigma_b * self.sigma_b + self.eps_bn).sqrt()
    }
}

/// Estimated probability that pruning weight `w` flips its neuron's output:
/// the expected membrane error it carries times the membrane density at the
/// threshold. Without normalization the scale factor is one. A degenerate
/// variance falls back to the channel's histogram density supremum.
pub fn weight_flip_probability(
    w: f64,
    ch: &ChannelStats,
    norm: Option<&NormScale>,
    u_th: f64,
) -> f64 {
    let e_act = ch.in_rate * w.abs();
    let scale = norm.map_or(1.0, NormScale::scale);
    let density = if ch.var < DEGENERATE_VAR {
        ch.p_sup
    } else {
        Normal::new(ch.mu, ch.var.sqrt()).expect("positive variance").pdf(u_th)
    };
    e_act * scale * density
}

/// One row of the per-weight probability report.
#[derive(Clone, Debug)]
pub struct ProbReportRow {
    pub layer: usize,
    pub out_idx: usize,
    pub in_idx: usize,
    pub abs_w: f64,
    pub e_act_absw: f64,
    pub gamma_scale: f64,
    pub mu: f64,
    pub var: f64,
    pub p: f64,
}

/// Flip probabilities for every unmasked weight of the network, one row per
/// live weight in (layer, output, input) order.
pub fn prob_report(net: &SpikingNetwork, stats: &[MembraneStats]) -> Result<Vec<ProbReportRow>> {
    if stats.len() != net.depth() {
        return Err(Error::domain("need one statistics block per layer"));
    }
    let mut rows = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let u_th = layer.neuron.u_th;
        for i in 0..layer.synapse.n_out() {
            let norm = layer.synapse.norm.as_ref().map(|n| NormScale {
                gamma: n.gamma[i],
                sigma_b: n.sigma_b[i],
                eps_bn: n.eps_bn,
            });
            for j in 0..layer.synapse.n_in() {
                if !layer.synapse.mask.get(i, j) {
                    continue;
                }
                let w = layer.synapse.weights[(i, j)];
                let ch = stats[l].channel(i, j);
                rows.push(ProbReportRow {
                    layer: l,
                    out_idx: i,
                    in_idx: j,
                    abs_w: w.abs(),
                    e_act_absw: stats[l].e_act_absw(j, w),
                    gamma_scale: norm.as_ref().map_or(1.0, NormScale::scale),
                    mu: ch.mu,
                    var: ch.var,
                    p: weight_flip_probability(w, &ch, norm.as_ref(), u_th),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::{LifParams, SpikingNetwork, WeightInit};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn query(eps: f64, u_th: f64) -> CrisisQuery {
        CrisisQuery { eps, u_th, beta: 0.5, width: 1, timesteps: 1 }
    }

    #[test]
    fn moments_of_constant_stream_are_degenerate() {
        let (mu, var, _, degenerate) = stats_from_moments(2, 0.6, 0.18, 0);
        assert!((mu - 0.3).abs() < 1e-12);
        assert!(var < 1e-12);
        assert!(degenerate);
    }

    #[test]
    fn moments_two_point_population_variance() {
        // Observations {0.2, 0.4}: population variance 0.01, not 0.02.
        let sum = 0.2 + 0.4;
        let sum_sq = 0.04 + 0.16;
        let (mu, var, _, degenerate) = stats_from_moments(2, sum, sum_sq, 0);
        assert!((mu - 0.3).abs() < 1e-12);
        assert!((var - 0.01).abs() < 1e-12);
        assert!(!degenerate);
    }

    /// Monte Carlo: estimates recover the parameters of a standard normal.
    #[test]
    fn moments_recover_standard_normal() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v: f64 = rng.sample(normal);
            sum += v;
            sum_sq += v * v;
        }
        let (mu, var, p_sup, _) = stats_from_moments(n, sum, sum_sq, 0);
        assert!(mu.abs() < 0.02, "mu={mu}");
        assert!((var - 1.0).abs() < 0.05, "var={var}");
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p_sup - peak).abs() < 0.02);
    }

    /// Simpson-rule quadrature of the Gaussian density over the crisis
    /// neighborhood as an independent oracle.
    #[test]
    fn crisis_probability_matches_quadrature() {
        let q = query(0.1, 0.5);
        let got = crisis_probability(0.0, 1.0, &q);

        let pdf = |u: f64| (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (lo, hi) = (0.4, 0.6);
        let n = 10_000; // even
        let h = (hi - lo) / n as f64;
        let mut acc = pdf(lo) + pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(lo + i as f64 * h);
        }
        let oracle = acc * h / 3.0;
        assert!((got - oracle).abs() < 1e-9, "got {got} oracle {oracle}");
        assert!((got - 0.0703).abs() < 5e-5);
    }

    #[test]
    fn crisis_probability_total_mass_and_empty_interval() {
        assert!((crisis_probability(0.0, 1.0, &query(1e9, 0.5)) - 1.0).abs() < 1e-12);
        assert_eq!(crisis_probability(0.5, 1.0, &query(0.0, 0.5)), 0.0);
    }

    #[test]
    fn crisis_probability_point_mass() {
        assert_eq!(crisis_probability(0.45, 0.0, &query(0.1, 0.5)), 1.0);
        assert_eq!(crisis_probability(0.3, 0.0, &query(0.1, 0.5)), 0.0);
    }

    #[test]
    fn temporal_bound_values() {
        assert!((temporal_error_bound(0.1, 0.5, 2) - 0.15).abs() < 1e-12);
        assert!((temporal_error_bound(0.1, 0.5, 1) - 0.1).abs() < 1e-12);
        // Large horizon approaches the geometric limit.
        assert!((temporal_error_bound(0.1, 0.5, 200) - 0.2).abs() < 1e-12);
        // Never exceeds the cap.
        for t in 1..50 {
            assert!(temporal_error_bound(0.1, 0.9, t) <= 0.1 / (1.0 - 0.9) + 1e-12);
        }
    }

    #[test]
    fn layer_bound_value_and_clamp() {
        let q = CrisisQuery { eps: 0.05, u_th: 0.5, beta: 0.5, width: 10, timesteps: 1 };
        assert!((layer_flip_bound(0.4, &q) - 0.8).abs() < 1e-12);
        let zero = CrisisQuery { eps: 0.0, ..q };
        assert_eq!(layer_flip_bound(0.4, &zero), 0.0);
        let huge = CrisisQuery { eps: 100.0, ..q };
        assert_eq!(layer_flip_bound(0.4, &huge), 1.0);
    }

    /// Scalar evaluation oracle for the worked flip probability.
    #[test]
    fn weight_flip_probability_worked_value() {
        let ch = ChannelStats { in_rate: 1.0, mu: 0.2, var: 1.0, p_sup: 0.0 };
        let norm = NormScale { gamma: 1.0, sigma_b: 1.0, eps_bn: 1e-5 };
        let got = weight_flip_probability(0.05, &ch, Some(&norm), 0.5);

        // mu - u_th = -0.3, so the density at the threshold is the standard
        // normal pdf at 0.3.
        let pdf = (-0.3f64 * 0.3 / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let oracle = 0.05 * (1.0 / (1.0f64 + 1e-5).sqrt()) * pdf;
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.01907).abs() < 5e-6, "got {got}");
    }

    #[test]
    fn silent_channel_and_zero_gamma_give_zero() {
        let ch = ChannelStats { in_rate: 0.0, mu: 0.5, var: 1.0, p_sup: 0.0 };
        let norm = NormScale { gamma: 1.0, sigma_b: 1.0, eps_bn: 1e-5 };
        assert_eq!(weight_flip_probability(10.0, &ch, Some(&norm), 0.5), 0.0);

        let firing = ChannelStats { in_rate: 0.9, ..ch };
        let zero_gamma = NormScale { gamma: 0.0, ..norm };
        assert_eq!(weight_flip_probability(10.0, &firing, Some(&zero_gamma), 0.5), 0.0);
    }

    #[test]
    fn flip_probability_monotonicity() {
        let norm = NormScale { gamma: 1.0, sigma_b: 1.0, eps_bn: 1e-5 };
        let u_th = 0.5;
        // Nondecreasing in the activation expectation (via rate and |w|).
        let mut last = 0.0;
        for k in 0..20 {
            let ch = ChannelStats { in_rate: k as f64 / 19.0, mu: 0.1, var: 0.5, p_sup: 0.0 };
            let p = weight_flip_probability(0.3, &ch, Some(&norm), u_th);
            assert!(p >= last);
            last = p;
        }
        // Nondecreasing in |gamma|.
        let ch = ChannelStats { in_rate: 0.5, mu: 0.1, var: 0.5, p_sup: 0.0 };
        last = 0.0;
        for k in 0..20 {
            let n = NormScale { gamma: k as f64 / 4.0, sigma_b: 1.0, eps_bn: 1e-5 };
            let p = weight_flip_probability(0.3, &ch, Some(&n), u_th);
            assert!(p >= last);
            last = p;
        }
        // Maximal over mu exactly at the threshold.
        let at_th = ChannelStats { in_rate: 0.5, mu: u_th, var: 0.5, p_sup: 0.0 };
        let p_max = weight_flip_probability(0.3, &at_th, Some(&norm), u_th);
        for k in 0..40 {
            let mu = -1.0 + k as f64 * 0.05;
            let ch = ChannelStats { in_rate: 0.5, mu, var: 0.5, p_sup: 0.0 };
            assert!(weight_flip_probability(0.3, &ch, Some(&norm), u_th) <= p_max + 1e-15);
        }
    }

    #[test]
    fn estimate_stats_runs_over_network() {
        let mut net = SpikingNetwork::random(
            &[4, 6, 3],
            LifParams::default(),
            WeightInit::RsqrtFanIn,
            11,
        )
        .unwrap();
        let data = crate::encode::random_spike_dataset(20, 4, 5, 0.5, 3).unwrap();
        let stats = estimate_membrane_stats(&mut net, &data).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].mu.len(), 6);
        assert_eq!(stats[0].in_rate.len(), 4);
        assert_eq!(stats[1].mu.len(), 3);
        // 20 samples times 5 timesteps of observations per neuron.
        assert_eq!(stats[0].observations, 100);
        // Input firing rates of the first layer hover around 0.5.
        for &r in &stats[0].in_rate {
            assert!((r - 0.5).abs() < 0.2, "rate {r}");
        }
        assert!(estimate_membrane_stats(
            &mut net,
            &crate::encode::LabeledSpikeDataset::empty()
        )
        .is_err());
    }

    #[test]
    fn estimate_stats_rejects_width_mismatch() {
        let mut net = SpikingNetwork::random(
            &[4, 3],
            LifParams::default(),
            WeightInit::RsqrtFanIn,
            1,
        )
        .unwrap();
        let data = crate::encode::random_spike_dataset(3, 6, 2, 0.5, 0).unwrap();
        assert!(estimate_membrane_stats(&mut net, &data).is_err());
    }

    #[test]
    fn calibration_standardizes_linear_outputs() {
        let mut net = SpikingNetwork::random(
            &[6, 5, 2],
            LifParams::default(),
            WeightInit::RsqrtFanIn,
            17,
        )
        .unwrap();
        let data = crate::encode::random_spike_dataset(50, 6, 4, 0.5, 9).unwrap();
        calibrate_norm(&mut net, &data, 1e-5).unwrap();
        assert!(net.layers.iter().all(|l| l.synapse.norm.is_some()));

        // After calibration the observed normalized outputs of layer 0 have
        // mean close to zero.
        let mut sum = vec![0.0f64; 5];
        let mut count = 0usize;
        for (sample, _) in data.iter() {
            net.forward_observed(sample, |obs| {
                if obs.layer == 0 {
                    count += 1;
                    for (i, &x) in obs.x.iter().enumerate() {
                        sum[i] += x;
                    }
                }
            })
            .unwrap();
        }
        for &s in &sum {
            assert!((s / count as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn report_covers_live_weights_only() {
        let mut net = SpikingNetwork::random(
            &[3, 4, 2],
            LifParams::default(),
            WeightInit::RsqrtFanIn,
            5,
        )
        .unwrap();
        net.layers[0].synapse.mask.set(0, 0, false);
        let data = crate::encode::random_spike_dataset(10, 3, 3, 0.5, 1).unwrap();
        let stats = estimate_membrane_stats(&mut net, &data).unwrap();
        let rows = prob_report(&net, &stats).unwrap();
        assert_eq!(rows.len(), 3 * 4 + 4 * 2 - 1);
        assert!(rows.iter().all(|r| r.p >= 0.0));
    }
}
