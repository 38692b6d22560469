//! The 2D loss surface `L(α, β) = loss(θ* + α·d1 + β·d2)` over a fixed
//! evaluation subset, computed in parallel with results that do not depend
//! on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::directions::DirectionPair;
use crate::error::{Error, Result};
use crate::nn::{nll_sum, Network, Params};
use crate::pruning::Mask;
use crate::rng::{self, stream};

/// Stored in place of a non-finite loss.
pub const LOSS_SENTINEL: f64 = f64::NAN;
const EVAL_CHUNK: usize = 256;

pub fn is_sentinel(loss: f64) -> bool {
    !loss.is_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub resolution_a: usize,
    pub resolution_b: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(1.0, 51)
    }
}

impl GridSpec {
    /// `[-half, half]²` sampled at `resolution` points per axis.
    pub fn square(half: f64, resolution: usize) -> Self {
        GridSpec {
            alpha_min: -half,
            alpha_max: half,
            beta_min: -half,
            beta_max: half,
            resolution_a: resolution,
            resolution_b: resolution,
        }
    }

    /// Checks the invariants; returns warnings for grids that are valid but
    /// do not contain the origin.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |detail: String| {
            Err(Error::Config {
                field: "grid".into(),
                detail,
            })
        };
        for v in [self.alpha_min, self.alpha_max, self.beta_min, self.beta_max] {
            if !v.is_finite() {
                return bad("axis bounds must be finite".into());
            }
        }
        if self.alpha_min >= self.alpha_max || self.beta_min >= self.beta_max {
            return bad("min must be below max on both axes".into());
        }
        if self.resolution_a < 2 || self.resolution_b < 2 {
            return bad("resolution must be at least 2 on both axes".into());
        }
        let mut warnings = Vec::new();
        if self.center_index().is_none() {
            warnings.push(format!(
                "grid [{}, {}] x [{}, {}] at {}x{} does not contain (0, 0); the center loss is evaluated separately",
                self.alpha_min, self.alpha_max, self.beta_min, self.beta_max, self.resolution_a, self.resolution_b
            ));
        }
        Ok(warnings)
    }

    fn axis(min: f64, max: f64, res: usize, i: usize) -> f64 {
        if min == -max && 2 * i + 1 == res {
            return 0.0;
        }
        min + (max - min) * i as f64 / (res - 1) as f64
    }

    pub fn alpha(&self, i: usize) -> f64 {
        Self::axis(self.alpha_min, self.alpha_max, self.resolution_a, i)
    }

    pub fn beta(&self, j: usize) -> f64 {
        Self::axis(self.beta_min, self.beta_max, self.resolution_b, j)
    }

    pub fn len(&self) -> usize {
        self.resolution_a * self.resolution_b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid index of the point exactly at the origin, if there is one.
    pub fn center_index(&self) -> Option<(usize, usize)> {
        let i = (0..self.resolution_a).find(|&i| self.alpha(i) == 0.0)?;
        let j = (0..self.resolution_b).find(|&j| self.beta(j) == 0.0)?;
        Some((i, j))
    }
}

/// A fixed sample of evaluation examples shared by every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSubset {
    pub source: String,
    pub n: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
    pub data: Dataset,
}

/// Uniform sample without replacement: the first `n` entries of a seeded
/// permutation, sorted. Subsets with the same seed are nested in `n`.
pub fn make_eval_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<EvalSubset> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation subset must be non-empty".into()));
    }
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluation subset of {n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut perm: Vec<usize> = (0..dataset.len()).collect();
    perm.shuffle(&mut rng::stream_rng(seed, stream::SUBSET, 0));
    let mut indices = perm[..n].to_vec();
    indices.sort_unstable();
    let data = dataset.subset(&indices, dataset.split(), format!("{}[n={n},seed={seed}]", dataset.source()))?;
    Ok(EvalSubset {
        source: dataset.source().to_string(),
        n,
        seed,
        indices,
        data,
    })
}

/// `θ* + α·d1 + β·d2`.
pub fn perturb(theta_star: &Params, d1: &Params, d2: &Params, alpha: f64, beta: f64) -> Result<Params> {
    theta_star.ensure_congruent(d1, "first direction")?;
    theta_star.ensure_congruent(d2, "second direction")?;
    let mut out = theta_star.clone();
    out.set_combination(theta_star, alpha, d1, beta, d2);
    Ok(out)
}

/// Mean eval-mode cross-entropy of `params` over the subset. Examples are
/// accumulated in order, so the result equals a single-batch evaluation.
pub fn subset_loss(net: &Network, params: &Params, subset: &EvalSubset) -> f64 {
    let data = &subset.data;
    let row = data.images().row_len();
    let images = data.images().data();
    let classes = net.classes();
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = net.eval_logits_with(params, &images[start * row..end * row], end - start);
        total = nll_sum(&logits, classes, &data.labels()[start..end], total);
    }
    total / data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMeta {
    pub direction_seeds: (u64, u64),
    pub checkpoint_digest: String,
    pub mask_digest: Option<String>,
    pub eval_source: String,
    pub eval_n: usize,
    pub eval_seed: u64,
    pub loss_kind: String,
    pub per_point_evaluations: usize,
    /// Kept in memory only; persisted surfaces must not depend on timing.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Losses on an `resolution_a x resolution_b` grid, row-major in α.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub spec: GridSpec,
    pub losses: Vec<f64>,
    pub center_loss: f64,
    pub meta: SurfaceMeta,
}

impl SurfaceGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.spec.resolution_b + j]
    }

    pub fn finite_losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.losses.iter().copied().filter(|v| v.is_finite())
    }

    pub fn losses_le_bytes(&self) -> Vec<u8> {
        self.losses.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect()
    }
}

pub fn evaluate_surface(
    net: &Network,
    mask: Option<&Mask>,
    pair: &DirectionPair,
    spec: &GridSpec,
    subset: &EvalSubset,
    workers: usize,
) -> Result<SurfaceGrid> {
    evaluate_surface_with_progress(net, mask, pair, spec, subset, workers, &|_, _| {})
}

/// As [`evaluate_surface`]; `progress(rows_done, rows_total)` fires each time
/// another row's worth of points has completed.
pub fn evaluate_surface_with_progress(
    net: &Network,
    mask: Option<&Mask>,
    pair: &DirectionPair,
    spec: &GridSpec,
    subset: &EvalSubset,
    workers: usize,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SurfaceGrid> {
    if !pair.is_normalized() {
        return Err(Error::UnnormalizedDirection);
    }
    spec.validate()?;
    if subset.data.is_empty() || subset.n == 0 {
        return Err(Error::EmptyDataset("evaluation subset".into()));
    }
    if subset.data.example_shape() != net.arch().input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "subset examples {:?} vs network input {:?}",
            subset.data.example_shape(),
            net.arch().input_shape()
        )));
    }
    if let Some(&label) = subset.data.labels().iter().find(|&&l| l >= net.classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: net.classes(),
        });
    }
    let theta_star = net.theta();
    theta_star.ensure_congruent(&pair.d1.values, "direction")?;
    let mut center = theta_star.clone();
    if let Some(m) = mask {
        m.apply(&mut center)?;
    }
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let done = AtomicUsize::new(0);
    let (ra, rb) = (spec.resolution_a, spec.resolution_b);
    let losses: Vec<f64> = pool.install(|| {
        (0..ra * rb)
            .into_par_iter()
            .map_init(
                || center.clone(),
                |buf, k| {
                    let (i, j) = (k / rb, k % rb);
                    buf.set_combination(&center, spec.alpha(i), &pair.d1.values, spec.beta(j), &pair.d2.values);
                    if let Some(m) = mask {
                        m.apply(buf).expect("mask checked against center");
                    }
                    let loss = subset_loss(net, buf, subset);
                    let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if finished % rb == 0 {
                        progress(finished / rb, ra);
                    }
                    if loss.is_finite() {
                        loss
                    } else {
                        LOSS_SENTINEL
                    }
                },
            )
            .collect()
    });
    let center_loss = match spec.center_index() {
        Some((i, j)) => losses[i * rb + j],
        None => subset_loss(net, &center, subset),
    };
    Ok(SurfaceGrid {
        spec: *spec,
        losses,
        center_loss,
        meta: SurfaceMeta {
            direction_seeds: pair.seeds(),
            checkpoint_digest: net.digest(),
            mask_digest: mask.map(Mask::digest),
            eval_source: subset.source.clone(),
            eval_n: subset.n,
            eval_seed: subset.seed,
            loss_kind: "cross_entropy".into(),
            per_point_evaluations: subset.data.len(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceStats {
    pub center_loss: f64,
    pub min_loss: f64,
    pub max_finite_loss: f64,
    /// `max_finite_loss - center_loss`
    pub depth: f64,
    /// Share of finite points within `epsilon` of the center loss.
    pub flat_area_fraction: f64,
}

pub fn surface_stats(grid: &SurfaceGrid, epsilon: f64) -> Result<SurfaceStats> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let finite: Vec<f64> = grid.finite_losses().collect();
    if finite.is_empty() {
        return Err(Error::AllSentinel);
    }
    let min_loss = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max_finite_loss = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = grid.center_loss;
    let flat = finite.iter().filter(|&&v| (v - c).abs() <= epsilon).count();
    Ok(SurfaceStats {
        center_loss: c,
        min_loss,
        max_finite_loss,
        depth: max_finite_loss - c,
        flat_area_fraction: flat as f64 / finite.len() as f64,
    })
}

/// Pearson correlation over positions where both values are finite.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    // rounding can push a perfect correlation just past 1
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
