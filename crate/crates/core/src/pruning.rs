//! Binary weight masks, layer-wise magnitude pruning, weight rewinding and
//! random-mask baselines. Only dense and conv weight tensors are maskable;
//! biases and batch-norm parameters are never pruned.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Network, ParamLayout, ParamRole, Params};
use crate::optim::{self, TrainConfig, TrainReport};
use crate::rng::{self, stream};

/// Per-weight-tensor keep flags; `None` for slots that are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    layout: Arc<ParamLayout>,
    keep: Vec<Option<Vec<bool>>>,
}

impl Mask {
    /// The mask that keeps everything.
    pub fn ones(theta_like: &Params) -> Self {
        Self::from_layout(theta_like.layout())
    }

    pub fn from_layout(layout: &Arc<ParamLayout>) -> Self {
        let keep = layout
            .slots
            .iter()
            .map(|s| (s.role == ParamRole::Weight).then(|| vec![true; s.len()]))
            .collect();
        Mask {
            layout: Arc::clone(layout),
            keep,
        }
    }

    /// Builds a mask from one flag vector per weight tensor, in layer order.
    pub fn from_layers(layout: &Arc<ParamLayout>, layers: Vec<Vec<bool>>) -> Result<Self> {
        let mut mask = Self::from_layout(layout);
        if layers.len() != mask.layer_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask layers for {} weight tensors",
                layers.len(),
                mask.layer_count()
            )));
        }
        for (dst, src) in mask.keep.iter_mut().flatten().zip(layers) {
            if dst.len() != src.len() {
                return Err(Error::ShapeMismatch("mask layer length".into()));
            }
            *dst = src;
        }
        Ok(mask)
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn layer_count(&self) -> usize {
        self.keep.iter().flatten().count()
    }

    /// (parameter slot, keep flags) for every maskable tensor.
    pub fn layers(&self) -> impl Iterator<Item = (usize, &[bool])> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(slot, k)| k.as_deref().map(|k| (slot, k)))
    }

    /// The `k`-th maskable tensor.
    pub fn layer(&self, k: usize) -> Option<&[bool]> {
        self.keep.iter().flatten().nth(k).map(Vec::as_slice)
    }

    pub fn layer_mut(&mut self, k: usize) -> Option<&mut [bool]> {
        self.keep.iter_mut().flatten().nth(k).map(Vec::as_mut_slice)
    }

    pub fn surviving_counts(&self) -> Vec<usize> {
        self.keep
            .iter()
            .flatten()
            .map(|k| k.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn maskable_len(&self) -> usize {
        self.keep.iter().flatten().map(Vec::len).sum()
    }

    fn check(&self, params: &Params) -> Result<()> {
        if Arc::ptr_eq(&self.layout, params.layout()) || *self.layout == **params.layout() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("mask is not congruent with the parameters".into()))
        }
    }

    /// Zeroes every masked-out entry of `params` (`m ⊙ params`).
    pub fn apply(&self, params: &mut Params) -> Result<()> {
        self.check(params)?;
        for (slot, keep) in self.layers() {
            for (v, &k) in params.get_mut(slot).iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// True when every masked-out entry of `params` is exactly zero.
    pub fn preserves_zeros(&self, params: &Params) -> bool {
        self.check(params).is_ok()
            && self
                .layers()
                .all(|(slot, keep)| params.get(slot).iter().zip(keep).all(|(v, &k)| k || *v == 0.0))
    }

    /// True when this mask keeps nothing that `outer` removed.
    pub fn is_nested_in(&self, outer: &Mask) -> bool {
        self.keep.len() == outer.keep.len()
            && self
                .keep
                .iter()
                .flatten()
                .zip(outer.keep.iter().flatten())
                .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    /// Bits packed MSB-first, each layer padded to a whole byte.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for keep in self.keep.iter().flatten() {
            for chunk in keep.chunks(8) {
                let mut byte = 0u8;
                for (i, &k) in chunk.iter().enumerate() {
                    if k {
                        byte |= 0x80 >> i;
                    }
                }
                out.push(byte);
            }
        }
        out
    }

    pub fn from_packed_bits(layout: &Arc<ParamLayout>, bytes: &[u8]) -> Result<Self> {
        let mut mask = Self::from_layout(layout);
        let mut offset = 0;
        for keep in mask.keep.iter_mut().flatten() {
            let n_bytes = keep.len().div_ceil(8);
            let chunk = bytes
                .get(offset..offset + n_bytes)
                .ok_or_else(|| Error::Corrupt("mask bit array too short".into()))?;
            for (i, k) in keep.iter_mut().enumerate() {
                *k = chunk[i / 8] & (0x80 >> (i % 8)) != 0;
            }
            offset += n_bytes;
        }
        if offset != bytes.len() {
            return Err(Error::Corrupt("mask bit array has trailing bytes".into()));
        }
        Ok(mask)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_packed_bits()))
    }
}

/// Fraction of maskable weights that survive, `‖m‖₀ / |θ|`.
pub fn sparsity(mask: &Mask) -> f64 {
    let total = mask.maskable_len();
    if total == 0 {
        return 1.0;
    }
    mask.surviving_counts().iter().sum::<usize>() as f64 / total as f64
}

/// Number of weights removed from a layer with `remaining` survivors.
pub fn prune_count(remaining: usize, p: f64) -> usize {
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    ((p * remaining as f64) + 1e-9).floor() as usize
}

/// Per layer, removes the `floor(p · remaining)` surviving weights of
/// smallest magnitude; ties go to the lower flat index.
pub fn prune_step(theta: &Params, mask: &Mask, p: f64) -> Result<Mask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("prune fraction {p} outside (0, 1)")));
    }
    mask.check(theta)?;
    let mut next = mask.clone();
    for (slot, keep) in next.keep.iter_mut().enumerate() {
        let Some(keep) = keep else { continue };
        let values = theta.get(slot);
        let mut alive: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        let k = prune_count(alive.len(), p);
        if k == 0 {
            continue;
        }
        alive.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        for &i in &alive[..k] {
            keep[i] = false;
        }
    }
    Ok(next)
}

/// Resets weights to `θ₀ ⊙ m`, other parameters to `θ₀`, and running
/// statistics to their initial values.
pub fn rewind(net: &Network, mask: &Mask) -> Result<Network> {
    let mut out = net.clone();
    let mut theta = net.theta_init().clone();
    mask.apply(&mut theta)?;
    out.set_theta(theta)?;
    out.reset_running_stats();
    Ok(out)
}

/// A mask with exactly the reference's per-layer survivor counts, positions
/// drawn uniformly from a seeded stream.
pub fn random_mask(reference: &Mask, seed: u64) -> Mask {
    let mut rng = rng::stream_rng(seed, stream::RANDOM_MASK, 0);
    let mut out = reference.clone();
    for keep in out.keep.iter_mut().flatten() {
        let n = keep.len();
        let k = keep.iter().filter(|&&b| b).count();
        keep.iter_mut().for_each(|b| *b = false);
        for i in rand::seq::index::sample(&mut rng, n, k) {
            keep[i] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    Imp,
    Random,
}

impl MaskMethod {
    pub fn label(self) -> &'static str {
        match self {
            MaskMethod::Imp => "IMP",
            MaskMethod::Random => "random",
        }
    }
}

/// Train / validation / test splits used by pruning experiments.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// A sparse subnetwork: mask, its rewound start, and the trained result.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub round: usize,
    pub method: MaskMethod,
    pub mask: Mask,
    pub rewound: Network,
    pub trained: Network,
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub report: TrainReport,
    pub mask_seed: Option<u64>,
}

/// What a ticket file stores: the mask plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TicketRecord {
    pub arch: ArchSpec,
    pub round: usize,
    pub method: MaskMethod,
    pub sparsity: f64,
    pub test_accuracy: f64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub mask_seed: Option<u64>,
    pub mask: Mask,
}

impl Ticket {
    pub fn record(&self, train_seed: u64) -> TicketRecord {
        TicketRecord {
            arch: self.trained.spec().clone(),
            round: self.round,
            method: self.method,
            sparsity: self.sparsity,
            test_accuracy: self.test_accuracy,
            init_seed: self.trained.seed(),
            train_seed,
            mask_seed: self.mask_seed,
            mask: self.mask.clone(),
        }
    }

    /// `ticket_r{round}_pm{percent}.lt`
    pub fn file_name(&self) -> String {
        ticket_file_name(self.round, self.sparsity)
    }
}

pub fn ticket_file_name(round: usize, sparsity: f64) -> String {
    format!("ticket_r{round}_pm{:.1}.lt", sparsity * 100.0)
}

/// Rewinds `base` under `mask`, trains for `config.max_epochs`, and scores the result.
pub fn train_ticket(
    base: &Network,
    mask: Mask,
    method: MaskMethod,
    round: usize,
    data: Splits<'_>,
    config: &TrainConfig,
) -> Result<Ticket> {
    let rewound = rewind(base, &mask)?;
    let (trained, report) = optim::train(&rewound, Some(&mask), data.train, data.val, config)?;
    let (_, test_accuracy) = optim::evaluate(&trained, Some(&mask), data.test)?;
    Ok(Ticket {
        round,
        method,
        sparsity: sparsity(&mask),
        mask,
        rewound,
        trained,
        test_accuracy,
        report,
        mask_seed: None,
    })
}

/// Iterative magnitude pruning: train, prune `p` of the survivors per layer,
/// rewind, repeat. Returns the dense round 0 followed by `rounds` tickets.
pub fn run_imp(
    base: &Network,
    data: Splits<'_>,
    train_config: &TrainConfig,
    p: f64,
    rounds: usize,
    epochs_per_round: usize,
) -> Result<Vec<Ticket>> {
    run_imp_with_progress(base, data, train_config, p, rounds, epochs_per_round, &mut |_| {})
}

pub fn run_imp_with_progress(
    base: &Network,
    data: Splits<'_>,
    train_config: &TrainConfig,
    p: f64,
    rounds: usize,
    epochs_per_round: usize,
    on_round: &mut dyn FnMut(&Ticket),
) -> Result<Vec<Ticket>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("IMP needs at least one round".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("prune fraction {p} outside (0, 1)")));
    }
    let config = TrainConfig {
        max_epochs: epochs_per_round,
        ..train_config.clone()
    };
    let mut tickets: Vec<Ticket> = Vec::with_capacity(rounds + 1);
    for round in 0..=rounds {
        let mask = match tickets.last() {
            None => Mask::ones(base.theta()),
            Some(prev) => prune_step(prev.trained.theta(), &prev.mask, p)?,
        };
        let ticket = train_ticket(base, mask, MaskMethod::Imp, round, data, &config)?;
        on_round(&ticket);
        tickets.push(ticket);
    }
    Ok(tickets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, LayerSpec};
    use proptest::prelude::*;

    fn three_layer() -> Network {
        // weight tensors of 100, 1000 and 10000 entries
        let spec = ArchSpec::new(
            vec![10],
            vec![
                LayerSpec::dense(10, 10),
                LayerSpec::Relu,
                LayerSpec::dense(10, 100),
                LayerSpec::Relu,
                LayerSpec::dense(100, 100),
            ],
        );
        build_network(&spec, 3).unwrap()
    }

    #[test]
    fn sparsity_endpoints() {
        let net = three_layer();
        let mut m = Mask::ones(net.theta());
        assert_eq!(sparsity(&m), 1.0);
        for k in 0..3 {
            m.layer_mut(k).unwrap().iter_mut().for_each(|b| *b = false);
        }
        assert_eq!(sparsity(&m), 0.0);
    }

    #[test]
    fn three_quarters_pruned_is_quarter_sparsity() {
        let net = build_network(&ArchSpec::new(vec![10], vec![LayerSpec::dense(10, 10)]), 0).unwrap();
        let mut m = Mask::ones(net.theta());
        m.layer_mut(0).unwrap()[..75].iter_mut().for_each(|b| *b = false);
        assert_eq!(sparsity(&m), 0.25);
    }

    #[test]
    fn floor_rule_counts() {
        let net = three_layer();
        let m1 = prune_step(net.theta(), &Mask::ones(net.theta()), 0.1).unwrap();
        assert_eq!(m1.surviving_counts()[0], 90);
        let m2 = prune_step(net.theta(), &m1, 0.1).unwrap();
        assert_eq!(m2.surviving_counts()[0], 81);
        assert!(m2.is_nested_in(&m1));
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let net = build_network(&ArchSpec::new(vec![3], vec![LayerSpec::dense(3, 1)]), 0).unwrap();
        let mut theta = net.theta().clone();
        theta.get_mut(0).copy_from_slice(&[0.5, -0.5, 2.0]);
        let m = prune_step(&theta, &Mask::ones(&theta), 0.34).unwrap();
        assert_eq!(m.layer(0).unwrap(), &[false, true, true]);
    }

    #[test]
    fn biases_are_never_masked() {
        let net = three_layer();
        let mut m = Mask::ones(net.theta());
        for _ in 0..5 {
            m = prune_step(net.theta(), &m, 0.5).unwrap();
        }
        let mut theta = net.theta().clone();
        theta.get_mut(1).iter_mut().for_each(|b| *b = 1.0);
        m.apply(&mut theta).unwrap();
        assert!(theta.get(1).iter().all(|&b| b == 1.0));
    }

    #[test]
    fn rewind_identity_and_idempotence() {
        let mut net = three_layer();
        net.theta_mut().scale(3.0);
        let ones = Mask::ones(net.theta());
        assert_eq!(rewind(&net, &ones).unwrap().theta(), net.theta_init());
        let m = prune_step(net.theta(), &ones, 0.3).unwrap();
        let once = rewind(&net, &m).unwrap();
        let twice = rewind(&once, &m).unwrap();
        assert_eq!(once, twice);
        for (slot, keep) in m.layers() {
            for (i, &k) in keep.iter().enumerate() {
                let v = once.theta().get(slot)[i];
                if k {
                    assert_eq!(v.to_bits(), net.theta_init().get(slot)[i].to_bits());
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn random_mask_matches_counts() {
        let net = three_layer();
        let ones = Mask::ones(net.theta());
        assert_eq!(random_mask(&ones, 4), ones);
        let mut m = prune_step(net.theta(), &ones, 0.1).unwrap();
        m = prune_step(net.theta(), &m, 0.1).unwrap();
        let r = random_mask(&m, 9);
        assert_eq!(r.surviving_counts(), m.surviving_counts());
        assert_eq!(r.surviving_counts()[0], 81);
        assert_eq!(r, random_mask(&m, 9));
        assert_ne!(r, random_mask(&m, 10));
    }

    #[test]
    fn packed_bits_round_trip() {
        let net = three_layer();
        let m = random_mask(&prune_step(net.theta(), &Mask::ones(net.theta()), 0.37).unwrap(), 1);
        let back = Mask::from_packed_bits(m.layout(), &m.to_packed_bits()).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn pruned_weights_never_exceed_survivors(values in proptest::collection::vec(-5.0f64..5.0, 12), p in 0.05f64..0.95) {
            let net = build_network(&ArchSpec::new(vec![3], vec![LayerSpec::dense(3, 4)]), 0).unwrap();
            let mut theta = net.theta().clone();
            theta.get_mut(0).copy_from_slice(&values);
            let m = prune_step(&theta, &Mask::ones(&theta), p).unwrap();
            let keep = m.layer(0).unwrap();
            let pruned_max = values.iter().zip(keep).filter(|(_, &k)| !k).map(|(v, _)| v.abs()).fold(0.0, f64::max);
            let kept_min = values.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(pruned_max <= kept_min);
            prop_assert_eq!(keep.iter().filter(|&&k| !k).count(), prune_count(12, p));
        }

        #[test]
        fn random_mask_preserves_layer_counts(seed in 0u64..1000, p in 0.05f64..0.9) {
            let net = build_network(&ArchSpec::new(vec![6], vec![LayerSpec::dense(6, 5), LayerSpec::dense(5, 3)]), 1).unwrap();
            let m = prune_step(net.theta(), &Mask::ones(net.theta()), p).unwrap();
            prop_assert_eq!(random_mask(&m, seed).surviving_counts(), m.surviving_counts());
        }
    }
}
