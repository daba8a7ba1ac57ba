//! Edge-popup search for sub-networks in frozen random weights.
//!
//! Every weight gets a trainable score; the forward pass keeps only the
//! top-`k%` scores per layer and masks the rest. Weights never change. Score
//! gradients pass straight through the selection: the score of edge `(u, v)`
//! moves by the loss sensitivity of neuron `v`'s raw linear input times the
//! presynaptic spike times the frozen weight.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encode::LabeledSpikeDataset;
use crate::error::{Error, Result};
use crate::lif::SpikingNetwork;
use crate::mat::{Mask, Mat};
use crate::seed::derive_seed;
use crate::train::{batch_gradients, evaluate_accuracy, SurrogateSpec, TrainConfig};

/// Mask keeping the `ceil(k% * count)` largest scores, ties broken in favor
/// of the smallest flat index.
pub fn select_topk_mask(scores: &Mat, k_percent: f64) -> Mask {
    debug_assert!(k_percent > 0.0 && k_percent < 100.0);
    let count = scores.len();
    let keep = ((k_percent / 100.0 * count as f64).ceil() as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    let flat = scores.as_slice();
    order.sort_unstable_by(|&a, &b| {
        flat[b].partial_cmp(&flat[a]).expect("scores must be finite").then(a.cmp(&b))
    });
    let mut mask = Mask::zeros(scores.rows(), scores.cols());
    for &idx in order.iter().take(keep) {
        mask.set(idx / scores.cols(), idx % scores.cols(), true);
    }
    mask
}

/// Score update rule: `s + alpha * dL_dI_v * S_u * w_uv`.
pub fn score_update(s_uv: f64, alpha: f64, dl_di_v: f64, s_u: u8, w_uv: f64) -> f64 {
    s_uv + alpha * dl_di_v * (s_u as f64) * w_uv
}

/// Per-epoch metrics of a sub-network search.
#[derive(Clone, Copy, Debug)]
pub struct PopupEpoch {
    pub epoch: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub sparsity: f64,
}

/// Final state of a search: per-layer scores, the masks they select, and the
/// accuracy trace.
#[derive(Clone, Debug)]
pub struct PopupOutcome {
    pub scores: Vec<Mat>,
    pub masks: Vec<Mask>,
    pub trace: Vec<PopupEpoch>,
}

/// Runs the search over frozen weights. Scores start uniform in `[-1, 1]`
/// like a fresh weight draw; after every batch the scores move against the
/// loss gradient and the masks are recomputed. The network is left with the
/// final masks installed and its weights bit-identical to entry.
pub fn edge_popup_train(
    net: &mut SpikingNetwork,
    train_data: &LabeledSpikeDataset,
    eval_data: &LabeledSpikeDataset,
    k_percent: f64,
    cfg: &TrainConfig,
    spec: &SurrogateSpec,
) -> Result<PopupOutcome> {
    if train_data.is_empty() {
        return Err(Error::domain("cannot search on an empty dataset"));
    }
    if !(k_percent > 0.0 && k_percent < 100.0) {
        return Err(Error::domain(format!("k_percent must lie in (0, 100), got {k_percent}")));
    }
    cfg.validate()?;

    let mut scores: Vec<Mat> = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, l as u64));
            Mat::from_fn(layer.synapse.n_out(), layer.synapse.n_in(), |_, _| {
                rng.gen_range(-1.0..=1.0)
            })
        })
        .collect();

    let install = |net: &mut SpikingNetwork, scores: &[Mat]| {
        for (layer, s) in net.layers.iter_mut().zip(scores) {
            layer.synapse.mask = select_topk_mask(s, k_percent);
        }
    };
    install(net, &scores);

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        for batch in train_data.samples().chunks(cfg.batch_size) {
            let (_, grads) = batch_gradients(net, batch, spec)?;
            for (l, grad) in grads.iter().enumerate() {
                let weights = net.layers[l].synapse.weights.as_slice();
                let flat = scores[l].as_mut_slice();
                for (e, (&g, &w)) in grad.as_slice().iter().zip(weights).enumerate() {
                    if g != 0.0 {
                        // Descend the loss: an edge whose removal would raise
                        // the loss gains score.
                        flat[e] = score_update(flat[e], -cfg.learning_rate, g, 1, w);
                    }
                }
            }
            install(net, &scores);
        }
        trace.push(PopupEpoch {
            epoch,
            train_acc: evaluate_accuracy(net, train_data)?,
            eval_acc: evaluate_accuracy(net, eval_data)?,
            sparsity: 1.0 - k_percent / 100.0,
        });
    }

    let masks = net.layers.iter().map(|l| l.synapse.mask.clone()).collect();
    Ok(PopupOutcome { scores, masks, trace })
}

/// Uniformly random mask with exactly the top-k cardinality, for baselines.
pub fn random_mask(rows: usize, cols: usize, k_percent: f64, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Mat::from_fn(rows, cols, |_, _| rng.gen::<f64>());
    select_topk_mask(&scores, k_percent)
}
