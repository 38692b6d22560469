//! Random directions in weight space and filter-wise normalization.
//!
//! A raw direction draws every weight entry from N(0, 1). Normalization then
//! rescales each filter `d[i][j]` to `d[i][j] / ‖d[i][j]‖ · ‖θ[i][j]‖` (Frobenius
//! norms), which removes the per-layer scale freedom of ReLU networks from the
//! picture. Bias and batch-norm components are held at zero throughout.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ParamRole, Params};
use crate::pruning::Mask;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    FilterNormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub values: Params,
    pub status: Normalization,
    pub seed: u64,
}

pub fn sample_direction(net: &Network, seed: u64) -> Direction {
    let mut rng = rng::stream_rng(seed, stream::DIRECTION, 0);
    let mut values = Params::zeros(net.theta().layout());
    for slot in 0..values.slot_count() {
        if values.slots()[slot].role != ParamRole::Weight {
            continue;
        }
        for v in values.get_mut(slot) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    Direction {
        values,
        status: Normalization::Raw,
        seed,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales every filter of `d` to the norm of the matching filter of `theta`.
/// Filters whose `theta` (or `d`) norm is zero come out all-zero.
pub fn filter_normalize(d: &Direction, theta: &Params) -> Result<Direction> {
    d.values.ensure_congruent(theta, "direction")?;
    let mut out = d.values.clone();
    for slot in 0..out.slot_count() {
        let info = &out.slots()[slot];
        if info.role != ParamRole::Weight {
            out.get_mut(slot).iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let flen = info.filter_len();
        let t = theta.get(slot);
        for (dj, tj) in out.get_mut(slot).chunks_exact_mut(flen).zip(t.chunks_exact(flen)) {
            let (dn, tn) = (norm(dj), norm(tj));
            if tn == 0.0 || dn == 0.0 {
                dj.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let c = tn / dn;
                dj.iter_mut().for_each(|v| *v *= c);
            }
        }
    }
    Ok(Direction {
        values: out,
        status: Normalization::FilterNormalized,
        seed: d.seed,
    })
}

/// `d ⊙ m`. Apply before [`filter_normalize`] so the rescaling uses the
/// surviving weights only.
pub fn restrict_to_mask(d: &Direction, mask: &Mask) -> Result<Direction> {
    let mut out = d.clone();
    mask.apply(&mut out.values)?;
    Ok(out)
}

/// Two filter-normalized directions sharing a target network.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPair {
    pub d1: Direction,
    pub d2: Direction,
}

impl DirectionPair {
    pub fn new(d1: Direction, d2: Direction) -> Result<Self> {
        if d1.seed == d2.seed {
            return Err(Error::InvalidArgument(format!(
                "both directions use seed {}",
                d1.seed
            )));
        }
        if !d1.values.congruent(&d2.values) {
            return Err(Error::ShapeMismatch("directions are not congruent".into()));
        }
        Ok(DirectionPair { d1, d2 })
    }

    /// Samples, optionally restricts to `mask`, and normalizes against the
    /// (masked) parameters of `net`.
    pub fn for_network(net: &Network, mask: Option<&Mask>, seeds: (u64, u64)) -> Result<Self> {
        let mut theta = net.theta().clone();
        let make = |seed: u64, theta: &Params| -> Result<Direction> {
            let mut d = sample_direction(net, seed);
            if let Some(m) = mask {
                d = restrict_to_mask(&d, m)?;
            }
            filter_normalize(&d, theta)
        };
        if let Some(m) = mask {
            m.apply(&mut theta)?;
        }
        Self::new(make(seeds.0, &theta)?, make(seeds.1, &theta)?)
    }

    pub fn seeds(&self) -> (u64, u64) {
        (self.d1.seed, self.d2.seed)
    }

    pub fn is_normalized(&self) -> bool {
        self.d1.status == Normalization::FilterNormalized && self.d2.status == Normalization::FilterNormalized
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, filter_view, ArchSpec, LayerSpec};

    fn small_net() -> Network {
        let spec = ArchSpec::new(
            vec![2, 6, 6],
            vec![
                LayerSpec::conv2d(2, 3, 3),
                LayerSpec::batch_norm(3),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(48, 5),
            ],
        );
        build_network(&spec, 21).unwrap()
    }

    // Independent norm oracle: per-filter sum of squares over flat indices.
    fn filter_norms(p: &Params) -> Vec<f64> {
        let mut out = Vec::new();
        for (slot, values) in p.iter() {
            if slot.role != ParamRole::Weight {
                continue;
            }
            let per = slot.shape[1..].iter().product::<usize>();
            for j in 0..slot.shape[0] {
                let mut s = 0.0;
                for k in 0..per {
                    let v = values[j * per + k];
                    s += v * v;
                }
                out.push(s.sqrt());
            }
        }
        out
    }

    #[test]
    fn sampling_is_seeded_and_skips_biases() {
        let net = small_net();
        let a = sample_direction(&net, 3);
        assert_eq!(a, sample_direction(&net, 3));
        assert_ne!(a, sample_direction(&net, 4));
        for (slot, v) in a.values.iter() {
            if slot.role != ParamRole::Weight {
                assert!(v.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn normalized_filters_match_theta_norms() {
        let net = small_net();
        let d = filter_normalize(&sample_direction(&net, 1), net.theta()).unwrap();
        assert_eq!(d.status, Normalization::FilterNormalized);
        for (dn, tn) in filter_norms(&d.values).iter().zip(filter_norms(net.theta())) {
            assert!((dn - tn).abs() <= 1e-9 * tn);
        }
    }

    #[test]
    fn single_filter_scaled_to_target() {
        let net = build_network(&ArchSpec::new(vec![2], vec![LayerSpec::dense(2, 1)]), 0).unwrap();
        let mut theta = net.theta().clone();
        theta.get_mut(0).copy_from_slice(&[3.0, 0.0]);
        let mut d = sample_direction(&net, 0);
        d.values.get_mut(0).copy_from_slice(&[0.9, 1.2]);
        let n = filter_normalize(&d, &theta).unwrap();
        assert!((norm(n.values.get(0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_filter_gives_zero_direction() {
        let net = small_net();
        let mut theta = net.theta().clone();
        theta.get_mut(0)[..18].iter_mut().for_each(|v| *v = 0.0);
        let d = filter_normalize(&sample_direction(&net, 2), &theta).unwrap();
        assert!(d.values.get(0)[..18].iter().all(|&v| v == 0.0));
        assert!(d.values.get(0)[18..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mask_then_normalize_uses_masked_norms() {
        let net = small_net();
        let mut mask = Mask::ones(net.theta());
        for (i, k) in mask.layer_mut(1).unwrap().iter_mut().enumerate() {
            *k = i % 3 != 0;
        }
        let mut masked = net.theta().clone();
        mask.apply(&mut masked).unwrap();
        let pair = DirectionPair::for_network(&net, Some(&mask), (1, 2)).unwrap();
        for d in [&pair.d1, &pair.d2] {
            assert!(mask.preserves_zeros(&d.values));
            for (dn, tn) in filter_norms(&d.values).iter().zip(filter_norms(&masked)) {
                assert!((dn - tn).abs() <= 1e-9 * tn.max(1e-30));
            }
        }
        let ones = Mask::ones(net.theta());
        let raw = sample_direction(&net, 5);
        assert_eq!(restrict_to_mask(&raw, &ones).unwrap(), raw);
    }

    #[test]
    fn pair_rejects_equal_seeds() {
        let net = small_net();
        assert!(DirectionPair::for_network(&net, None, (4, 4)).is_err());
        assert!(filter_view(&DirectionPair::for_network(&net, None, (4, 5)).unwrap().d1.values).count() == 8);
    }
}
