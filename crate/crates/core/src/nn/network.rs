use std::borrow::Cow;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::arch::{ArchSpec, Architecture, LayerSpec, ParamRole};
use super::kernels::{self, BnStats, Mode};
use super::loss;
use super::params::{Gradients, Params};
use crate::error::{Error, Result};
use crate::pruning::Mask;
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

/// Running-stat momentum used by training.
pub const BN_MOMENTUM: f64 = 0.1;

/// A network with its current parameters, the snapshot taken at construction
/// time, and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arc<Architecture>,
    theta: Params,
    theta_init: Params,
    running: Vec<Option<BnStats>>,
    running_init: Vec<Option<BnStats>>,
    seed: u64,
}

/// Builds a network with Kaiming-normal weights (std `sqrt(2 / fan_in)`),
/// zero biases, unit batch-norm scales and zero shifts.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<Network> {
    let arch = Arc::new(Architecture::new(spec.clone())?);
    let layout = Arc::clone(arch.layout());
    let mut rng = rng::stream_rng(seed, stream::INIT, 0);
    let mut theta = Params::zeros(&layout);
    for (slot, values) in layout.slots.iter().zip(theta.values_mut()) {
        match slot.role {
            ParamRole::Weight => {
                let std = (2.0 / slot.filter_len() as f64).sqrt();
                for v in values.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
            }
            ParamRole::BnScale => values.iter_mut().for_each(|v| *v = 1.0),
            ParamRole::Bias | ParamRole::BnShift => {}
        }
    }
    let running: Vec<Option<BnStats>> = arch
        .layers()
        .iter()
        .map(|l| match *l {
            LayerSpec::BatchNorm { features } => Some(BnStats::identity(features)),
            _ => None,
        })
        .collect();
    Ok(Network {
        arch,
        theta_init: theta.clone(),
        theta,
        running_init: running.clone(),
        running,
        seed,
    })
}

impl Network {
    /// Reassembles a network from persisted parts.
    pub fn from_parts(
        spec: ArchSpec,
        theta: Vec<f64>,
        theta_init: Vec<f64>,
        running: Vec<Option<BnStats>>,
        running_init: Vec<Option<BnStats>>,
        seed: u64,
    ) -> Result<Self> {
        let arch = Arc::new(Architecture::new(spec)?);
        let theta = Params::from_flat(arch.layout(), &theta)?;
        let theta_init = Params::from_flat(arch.layout(), &theta_init)?;
        for stats in [&running, &running_init] {
            if stats.len() != arch.layers().len() {
                return Err(Error::ShapeMismatch("running statistics per layer".into()));
            }
            for (layer, s) in arch.layers().iter().zip(stats.iter()) {
                let ok = match (layer, s) {
                    (LayerSpec::BatchNorm { features }, Some(s)) => {
                        s.mean.len() == *features && s.var.len() == *features
                    }
                    (LayerSpec::BatchNorm { .. }, None) => false,
                    (_, s) => s.is_none(),
                };
                if !ok {
                    return Err(Error::ShapeMismatch("running statistics per layer".into()));
                }
            }
        }
        Ok(Network {
            arch,
            theta,
            theta_init,
            running,
            running_init,
            seed,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn spec(&self) -> &ArchSpec {
        self.arch.spec()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &Params {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Params {
        &mut self.theta
    }

    pub fn theta_init(&self) -> &Params {
        &self.theta_init
    }

    pub fn set_theta(&mut self, theta: Params) -> Result<()> {
        self.theta.ensure_congruent(&theta, "replacement theta")?;
        self.theta = theta;
        Ok(())
    }

    pub fn running_stats(&self) -> &[Option<BnStats>] {
        &self.running
    }

    pub fn running_stats_init(&self) -> &[Option<BnStats>] {
        &self.running_init
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<BnStats>] {
        &mut self.running
    }

    pub(crate) fn reset_running_stats(&mut self) {
        self.running = self.running_init.clone();
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<usize> {
        let shape = inputs.shape();
        if shape.len() < 2 || shape[1..] != *self.arch.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "inputs {:?} do not match [batch, {:?}]",
                shape,
                self.arch.input_shape()
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("network inputs".into()));
        }
        Ok(shape[0])
    }

    fn effective<'a>(&'a self, mask: Option<&Mask>) -> Result<Cow<'a, Params>> {
        match mask {
            None => Ok(Cow::Borrowed(&self.theta)),
            Some(m) => {
                let mut p = self.theta.clone();
                m.apply(&mut p)?;
                Ok(Cow::Owned(p))
            }
        }
    }

    /// Logits for a batch. With a mask the computation uses `m ⊙ θ`. Eval
    /// mode disables dropout and normalizes with the running statistics.
    pub fn forward(&self, mask: Option<&Mask>, inputs: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let batch = self.check_inputs(inputs)?;
        let params = self.effective(mask)?;
        let trace = kernels::forward(&self.arch, &params, &self.running, inputs.data(), batch, mode, rng, false);
        let logits = trace.acts.into_iter().last().expect("output");
        Ok(Tensor::from_parts_unchecked(vec![batch, self.classes()], logits))
    }

    /// Mean cross-entropy and its exact gradient for the realized dropout
    /// pattern. Entries removed by the mask get zero gradient.
    pub fn backward(
        &self,
        mask: Option<&Mask>,
        inputs: &Tensor,
        labels: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, Gradients)> {
        let (loss, grads, _) = self.backward_with_stats(mask, inputs, labels, mode, rng)?;
        Ok((loss, grads))
    }

    pub(crate) fn backward_with_stats(
        &self,
        mask: Option<&Mask>,
        inputs: &Tensor,
        labels: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, Gradients, Vec<Option<(BnStats, usize)>>)> {
        let batch = self.check_inputs(inputs)?;
        if labels.len() != batch {
            return Err(Error::ShapeMismatch(format!("{batch} inputs vs {} labels", labels.len())));
        }
        let params = self.effective(mask)?;
        let trace = kernels::forward(&self.arch, &params, &self.running, inputs.data(), batch, mode, rng, true);
        let (loss, dlogits) = loss::cross_entropy_grad(trace.logits(), self.classes(), labels)?;
        let mut grads = kernels::backward(&self.arch, &params, &trace, dlogits);
        if let Some(m) = mask {
            m.apply(&mut grads)?;
        }
        Ok((loss, grads, trace.batch_stats))
    }

    /// Folds observed batch statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub(crate) fn update_running_stats(&mut self, observed: &[Option<(BnStats, usize)>], momentum: f64) {
        for (r, o) in self.running.iter_mut().zip(observed) {
            if let (Some(r), Some((obs, n))) = (r.as_mut(), o.as_ref()) {
                let correction = if *n > 1 { *n as f64 / (*n - 1) as f64 } else { 1.0 };
                for f in 0..r.mean.len() {
                    r.mean[f] = (1.0 - momentum) * r.mean[f] + momentum * obs.mean[f];
                    r.var[f] = (1.0 - momentum) * r.var[f] + momentum * obs.var[f] * correction;
                }
            }
        }
    }

    /// Eval-mode logits for a flat batch under arbitrary parameters.
    /// No validation: the caller guarantees shapes and finiteness.
    pub(crate) fn eval_logits_with(&self, params: &Params, inputs: &[f64], batch: usize) -> Vec<f64> {
        let mut unused = rng::seeded(0);
        let trace = kernels::forward(&self.arch, params, &self.running, inputs, batch, Mode::Eval, &mut unused, false);
        trace.acts.into_iter().last().expect("output")
    }

    /// Digest over architecture, parameters, snapshots and running statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.spec()).expect("spec serializes"));
        h.update(self.seed.to_le_bytes());
        h.update(self.theta.to_le_bytes());
        h.update(self.theta_init.to_le_bytes());
        for stats in [&self.running, &self.running_init] {
            for s in stats.iter().flatten() {
                for v in s.mean.iter().chain(&s.var) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::filter_view;

    fn dense_identity() -> Network {
        let mut net = build_network(&ArchSpec::new(vec![2], vec![LayerSpec::dense(2, 2)]), 0).unwrap();
        net.theta_mut().get_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        net.theta_mut().get_mut(1).copy_from_slice(&[0.0, 0.0]);
        net
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchSpec::new(vec![4], vec![LayerSpec::dense(4, 2)]);
        let a = build_network(&spec, 7).unwrap();
        let b = build_network(&spec, 7).unwrap();
        assert_eq!(a.theta().to_le_bytes(), b.theta().to_le_bytes());
        assert_eq!(a.theta(), a.theta_init());
        let c = build_network(&spec, 8).unwrap();
        assert_ne!(a.theta(), c.theta());
    }

    #[test]
    fn dense_filters_are_rows() {
        let net = build_network(&ArchSpec::new(vec![10], vec![LayerSpec::dense(10, 5)]), 1).unwrap();
        let filters: Vec<_> = filter_view(net.theta()).collect();
        assert_eq!(filters.len(), 5);
        for (j, f) in filters.iter().enumerate() {
            assert_eq!((f.layer, f.filter, f.values.len()), (0, j, 10));
        }
    }

    #[test]
    fn conv_filters_are_output_channels_and_bn_has_none() {
        let spec = ArchSpec::new(
            vec![3, 8, 8],
            vec![
                LayerSpec::conv2d(3, 8, 5),
                LayerSpec::batch_norm(8),
                LayerSpec::Flatten,
                LayerSpec::dense(128, 2),
            ],
        );
        let net = build_network(&spec, 3).unwrap();
        let filters: Vec<_> = filter_view(net.theta()).filter(|f| f.layer < 2).collect();
        assert_eq!(filters.len(), 8);
        assert!(filters.iter().all(|f| f.values.len() == 75 && f.layer == 0));
        assert!(filter_view(net.theta()).all(|f| f.layer != 1));
    }

    #[test]
    fn identity_weights_pass_inputs_through() {
        let net = dense_identity();
        let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let y = net.forward(None, &x, Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn masked_row_zeroes_output() {
        let net = dense_identity();
        let mut mask = Mask::ones(net.theta());
        mask.layer_mut(0).unwrap()[2..].iter_mut().for_each(|k| *k = false);
        let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let y = net.forward(Some(&mask), &x, Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = dense_identity();
        let wrong = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(net.forward(None, &wrong, Mode::Eval, &mut rng::seeded(0)).is_err());
        let nan = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            net.forward(None, &nan, Mode::Eval, &mut rng::seeded(0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let spec = ArchSpec::new(
            vec![3],
            vec![LayerSpec::dense(3, 4), LayerSpec::Relu, LayerSpec::dense(4, 2)],
        );
        let net = build_network(&spec, 11).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
        let x2 = Tensor::new(
            vec![4, 3],
            vec![0.1, -0.4, 0.9, 0.1, -0.4, 0.9, 1.2, 0.3, -0.7, 1.2, 0.3, -0.7],
        )
        .unwrap();
        let (l1, g1) = net.backward(None, &x, &[0, 1], Mode::Train, &mut rng::seeded(0)).unwrap();
        let (l2, g2) = net.backward(None, &x2, &[0, 0, 1, 1], Mode::Train, &mut rng::seeded(0)).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_weights_get_zero_gradient() {
        let spec = ArchSpec::new(vec![3], vec![LayerSpec::dense(3, 3), LayerSpec::Relu, LayerSpec::dense(3, 2)]);
        let net = build_network(&spec, 5).unwrap();
        let mut mask = Mask::ones(net.theta());
        mask.layer_mut(0).unwrap()[4] = false;
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let (_, g) = net.backward(Some(&mask), &x, &[0, 1], Mode::Train, &mut rng::seeded(1)).unwrap();
        assert_eq!(g.get(0)[4], 0.0);
    }

    #[test]
    fn forward_is_deterministic_with_dropout() {
        let spec = ArchSpec::new(
            vec![4],
            vec![LayerSpec::dense(4, 8), LayerSpec::Relu, LayerSpec::dropout(0.5), LayerSpec::dense(8, 3)],
        );
        let net = build_network(&spec, 2).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = net.forward(None, &x, Mode::Train, &mut rng::seeded(9)).unwrap();
        let b = net.forward(None, &x, Mode::Train, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }
}
