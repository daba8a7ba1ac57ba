//! Rewind iterative pruning with magnitude and spike-flip criteria.
//!
//! The loop trains for a few epochs, snapshots the weights as the rewind
//! point, finishes training, then repeatedly: scores the live weights,
//! prunes the lowest-scoring `p%` of what remains, reloads the rewind
//! snapshot under the new mask, and retrains.
//!
//! Criteria:
//! - `magnitude`: score is `|w|`.
//! - `sf1`: hidden layers with normalization are scored by the estimated
//!   spike-flip probability of the weight; encoding (first), readout (last)
//!   and unnormalized layers keep the magnitude score.
//! - `sf2`: like `sf1`, but the encoding and readout masks are recomputed
//!   from scratch each iteration and those layers train and rewind without
//!   the mask, so their pruned weights can return.

use crate::encode::LabeledSpikeDataset;
use crate::error::{Error, Result};
use crate::lif::{MaskedDenseLayer, SpikingNetwork};
use crate::mat::{Mask, Mat};
use crate::prob::{estimate_membrane_stats, weight_flip_probability, MembraneStats, NormScale};
use crate::train::{
    evaluate_accuracy, train_epochs, SurrogateSpec, TrainConfig, WeightUpdateMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneCriterion {
    Magnitude,
    Sf1,
    Sf2,
}

impl PruneCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            PruneCriterion::Magnitude => "magnitude",
            PruneCriterion::Sf1 => "sf1",
            PruneCriterion::Sf2 => "sf2",
        }
    }
}

/// Whether each pruning step ranks across all layers of a score family or
/// within each layer separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneScope {
    Global,
    PerLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct ImpConfig {
    /// Percent of the remaining live weights pruned per iteration.
    pub rate: f64,
    pub iterations: usize,
    pub rewind_epoch: usize,
    /// Training epochs per phase.
    pub epochs: usize,
    pub criterion: PruneCriterion,
    pub scope: PruneScope,
    pub seed: u64,
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            rate: 20.0,
            iterations: 10,
            rewind_epoch: 2,
            epochs: 50,
            criterion: PruneCriterion::Magnitude,
            scope: PruneScope::Global,
            seed: 0,
        }
    }
}

impl ImpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 100.0) {
            return Err(Error::Config(format!("prune rate must lie in (0, 100), got {}", self.rate)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("need at least one pruning iteration".into()));
        }
        if self.rewind_epoch > self.epochs {
            return Err(Error::Config("rewind epoch cannot exceed the epoch budget".into()));
        }
        Ok(())
    }
}

/// Position of a layer in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Encoding,
    Hidden,
    Readout,
}

pub fn layer_kind(layer_idx: usize, depth: usize) -> LayerKind {
    if layer_idx == 0 {
        LayerKind::Encoding
    } else if layer_idx + 1 == depth {
        LayerKind::Readout
    } else {
        LayerKind::Hidden
    }
}

/// Mask application phases of one pruning iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPhase {
    Loss,
    Update,
    Rewind,
}

/// The dynamic-mask policy of the `sf2` variant: hidden layers apply their
/// mask everywhere, encoding and readout layers only when computing the
/// forward pass and loss.
pub fn sf_imp2_mask_policy(kind: LayerKind, phase: MaskPhase) -> bool {
    match kind {
        LayerKind::Hidden => true,
        LayerKind::Encoding | LayerKind::Readout => matches!(phase, MaskPhase::Loss),
    }
}

/// Magnitude scores: `|w|` everywhere. Ranking only ever consults live
/// entries, so pruned weights never re-enter through these values.
pub fn magnitude_scores(layer: &MaskedDenseLayer) -> Mat {
    Mat::from_fn(layer.weights.rows(), layer.weights.cols(), |i, j| layer.weights[(i, j)].abs())
}

/// Spike-flip scores: per-weight flip probability from the layer's
/// normalization constants and the estimated membrane statistics. Layers
/// without normalization fall back to magnitude.
pub fn sf_scores(layer: &MaskedDenseLayer, stats: &MembraneStats, u_th: f64) -> Mat {
    let Some(norm) = &layer.norm else {
        return magnitude_scores(layer);
    };
    Mat::from_fn(layer.weights.rows(), layer.weights.cols(), |i, j| {
        let scale = NormScale { gamma: norm.gamma[i], sigma_b: norm.sigma_b[i], eps_bn: norm.eps_bn };
        weight_flip_probability(layer.weights[(i, j)], &stats.channel(i, j), Some(&scale), u_th)
    })
}

/// Min, max and mean of the live scores at pruning time.
#[derive(Clone, Copy, Debug)]
pub struct ScoreDigest {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Snapshot of one pruning iteration.
#[derive(Clone, Debug)]
pub struct PruneIteration {
    pub iteration: usize,
    pub masks: Vec<Mask>,
    /// Fraction of all weights currently masked out.
    pub sparsity: f64,
    pub eval_acc: f64,
    pub digest: ScoreDigest,
}

#[derive(Clone, Debug)]
pub struct PruneTrajectory {
    pub criterion: PruneCriterion,
    pub iterations: Vec<PruneIteration>,
}

/// One pruning pool: the layers ranked together against a shared remaining
/// count schedule.
struct Group {
    layers: Vec<usize>,
    total: usize,
    /// Recompute the mask over all weights instead of shrinking the live
    /// set; the `sf2` exemption.
    fresh_ranked: bool,
}

fn build_groups(net: &SpikingNetwork, cfg: &ImpConfig) -> Vec<Group> {
    let depth = net.depth();
    let count = |l: usize| net.layers[l].synapse.weights.len();
    match cfg.criterion {
        PruneCriterion::Magnitude => match cfg.scope {
            PruneScope::Global => vec![Group {
                layers: (0..depth).collect(),
                total: (0..depth).map(count).sum(),
                fresh_ranked: false,
            }],
            PruneScope::PerLayer => (0..depth)
                .map(|l| Group { layers: vec![l], total: count(l), fresh_ranked: false })
                .collect(),
        },
        PruneCriterion::Sf1 | PruneCriterion::Sf2 => {
            let fresh = cfg.criterion == PruneCriterion::Sf2;
            let mut groups = Vec::new();
            let sf_layers: Vec<usize> = (0..depth)
                .filter(|&l| {
                    layer_kind(l, depth) == LayerKind::Hidden
                        && net.layers[l].synapse.norm.is_some()
                })
                .collect();
            match cfg.scope {
                PruneScope::Global if !sf_layers.is_empty() => {
                    groups.push(Group {
                        total: sf_layers.iter().map(|&l| count(l)).sum(),
                        layers: sf_layers.clone(),
                        fresh_ranked: false,
                    });
                }
                _ => {
                    for &l in &sf_layers {
                        groups.push(Group { layers: vec![l], total: count(l), fresh_ranked: false });
                    }
                }
            }
            for l in 0..depth {
                if !sf_layers.contains(&l) {
                    let exempt = fresh && layer_kind(l, depth) != LayerKind::Hidden;
                    groups.push(Group {
                        layers: vec![l],
                        total: count(l),
                        fresh_ranked: exempt,
                    });
                }
            }
            groups
        }
    }
}

/// Remaining-count schedule: after iteration `k`, a pool of `total` weights
/// keeps `round(total * (1 - p/100)^k)`. Computing the count from the
/// compounded schedule keeps rounding from drifting across iterations.
fn target_live(total: usize, rate: f64, iteration: usize) -> usize {
    (total as f64 * (1.0 - rate / 100.0).powi(iteration as i32)).round() as usize
}

fn is_exempt(l: usize, depth: usize, cfg: &ImpConfig) -> bool {
    cfg.criterion == PruneCriterion::Sf2 && layer_kind(l, depth) != LayerKind::Hidden
}

/// Runs the full rewind pruning loop and returns the per-iteration
/// trajectory. The network is left in its final pruned, retrained state.
pub fn imp_run(
    net: &mut SpikingNetwork,
    train_data: &LabeledSpikeDataset,
    eval_data: &LabeledSpikeDataset,
    train_cfg: &TrainConfig,
    spec: &SurrogateSpec,
    cfg: &ImpConfig,
) -> Result<PruneTrajectory> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Config("pruning needs a nonempty training set".into()));
    }
    let depth = net.depth();
    let modes: Vec<WeightUpdateMode> = (0..depth)
        .map(|l| {
            if is_exempt(l, depth, cfg) {
                WeightUpdateMode::Dense
            } else {
                WeightUpdateMode::Masked
            }
        })
        .collect();

    train_epochs(net, train_data, train_cfg, spec, cfg.rewind_epoch, &modes)?;
    let rewind: Vec<Mat> = net.layers.iter().map(|l| l.synapse.weights.clone()).collect();
    train_epochs(net, train_data, train_cfg, spec, cfg.epochs - cfg.rewind_epoch, &modes)?;

    let groups = build_groups(net, cfg);
    let (total_weights, _) = net.weight_counts();
    let mut trajectory =
        PruneTrajectory { criterion: cfg.criterion, iterations: Vec::with_capacity(cfg.iterations) };

    for k in 1..=cfg.iterations {
        let stats: Option<Vec<MembraneStats>> = match cfg.criterion {
            PruneCriterion::Magnitude => None,
            _ => Some(
                estimate_membrane_stats(net, train_data)
                    .map_err(|e| Error::Config(format!("membrane statistics unavailable: {e}")))?,
            ),
        };
        let scores: Vec<Mat> = (0..depth)
            .map(|l| {
                let layer = &net.layers[l].synapse;
                match cfg.criterion {
                    PruneCriterion::Magnitude => magnitude_scores(layer),
                    _ => {
                        if layer_kind(l, depth) == LayerKind::Hidden && layer.norm.is_some() {
                            sf_scores(
                                layer,
                                &stats.as_ref().unwrap()[l],
                                net.layers[l].neuron.u_th,
                            )
                        } else {
                            magnitude_scores(layer)
                        }
                    }
                }
            })
            .collect();

        let digest = live_digest(net, &scores);

        for group in &groups {
            let target = target_live(group.total, cfg.rate, k);
            if group.fresh_ranked {
                rebuild_masks(net, &scores, &group.layers, target);
            } else {
                shrink_masks(net, &scores, &group.layers, target);
            }
        }

        // Reload the rewind point under the new masks: masked positions hold
        // literal zeros so the reload is checkable bit for bit. Exempt
        // layers reload the full snapshot.
        for (l, snapshot) in rewind.iter().enumerate() {
            let layer = &mut net.layers[l].synapse;
            if is_exempt(l, depth, cfg) {
                layer.weights = snapshot.clone();
            } else {
                for i in 0..layer.weights.rows() {
                    for j in 0..layer.weights.cols() {
                        layer.weights[(i, j)] =
                            if layer.mask.get(i, j) { snapshot[(i, j)] } else { 0.0 };
                    }
                }
            }
        }

        train_epochs(net, train_data, train_cfg, spec, cfg.epochs, &modes)?;

        let (_, live) = net.weight_counts();
        trajectory.iterations.push(PruneIteration {
            iteration: k,
            masks: net.layers.iter().map(|l| l.synapse.mask.clone()).collect(),
            sparsity: 1.0 - live as f64 / total_weights as f64,
            eval_acc: evaluate_accuracy(net, eval_data)?,
            digest,
        });
    }
    Ok(trajectory)
}

fn live_digest(net: &SpikingNetwork, scores: &[Mat]) -> ScoreDigest {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (l, s) in scores.iter().enumerate() {
        let mask = &net.layers[l].synapse.mask;
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                if mask.get(i, j) {
                    let v = s[(i, j)];
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        ScoreDigest { min: 0.0, max: 0.0, mean: 0.0 }
    } else {
        ScoreDigest { min, max, mean: sum / count as f64 }
    }
}

/// Drops the lowest-scoring live entries of the pool until `target` remain.
fn shrink_masks(net: &mut SpikingNetwork, scores: &[Mat], layers: &[usize], target: usize) {
    let mut live: Vec<(f64, usize, usize)> = Vec::new();
    for &l in layers {
        let mask = &net.layers[l].synapse.mask;
        let s = &scores[l];
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                if mask.get(i, j) {
                    live.push((s[(i, j)], l, i * s.cols() + j));
                }
            }
        }
    }
    if live.len() <= target {
        return;
    }
    let prune = live.len() - target;
    // Lowest score first; ties drop the higher flat index, so low indices
    // survive like in top-k selection.
    live.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0).expect("scores must be finite").then(b.2.cmp(&a.2)).then(b.1.cmp(&a.1))
    });
    for &(_, l, flat) in live.iter().take(prune) {
        let cols = net.layers[l].synapse.mask.cols();
        net.layers[l].synapse.mask.set(flat / cols, flat % cols, false);
    }
}

/// Rebuilds the pool's masks from scratch, keeping the `target` best scores
/// over all weights, pruned or not.
fn rebuild_masks(net: &mut SpikingNetwork, scores: &[Mat], layers: &[usize], target: usize) {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for &l in layers {
        let s = &scores[l];
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                all.push((s[(i, j)], l, i * s.cols() + j));
            }
        }
    }
    all.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("scores must be finite").then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1))
    });
    for &l in layers {
        let layer = &mut net.layers[l].synapse;
        layer.mask = Mask::zeros(layer.weights.rows(), layer.weights.cols());
    }
    for &(_, l, flat) in all.iter().take(target) {
        let cols = net.layers[l].synapse.mask.cols();
        net.layers[l].synapse.mask.set(flat / cols, flat % cols, true);
    }
}
