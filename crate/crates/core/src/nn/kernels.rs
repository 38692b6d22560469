//! Layer kernels on flat batch-major buffers. Summation order inside every
//! kernel is fixed, so results are bit-reproducible for a given input.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::params::Params;
use crate::rng::Rng;

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(features: usize) -> Self {
        BnStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

pub(crate) struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

pub(crate) struct Trace {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Vec<f64>>,
    bn: Vec<Option<BnCache>>,
    dropout: Vec<Option<Vec<f64>>>,
    /// Per-layer (mean, biased variance, element count) observed in train mode.
    pub batch_stats: Vec<Option<(BnStats, usize)>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace has output")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geom(arch: &Architecture, layer: usize) -> ConvGeom {
    let LayerSpec::Conv2d {
        out_channels,
        kernel,
        stride,
        padding,
        ..
    } = arch.layers()[layer]
    else {
        unreachable!("not a conv layer")
    };
    let input = arch.input_shape_of(layer);
    let out = arch.output_shape(layer);
    ConvGeom {
        c: input[0],
        h: input[1],
        w: input[2],
        f: out_channels,
        k: kernel,
        stride,
        pad: padding,
        oh: out[1],
        ow: out[2],
    }
}

/// Patches as rows: `patches[p * patch_len + (c * k + ky) * k + kx]`.
fn im2col(x: &[f64], g: &ConvGeom, patches: &mut [f64]) {
    let pl = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut patches[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            let mut idx = 0;
            for c in 0..g.c {
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[idx] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im(dpatches: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let pl = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dpatches[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            let mut idx = 0;
            for c in 0..g.c {
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Runs the network on a batch. `running` holds one entry per layer
/// (`Some` for batch-norm layers). Dropout draws from `rng` in train mode only.
pub(crate) fn forward(
    arch: &Architecture,
    params: &Params,
    running: &[Option<BnStats>],
    input: &[f64],
    batch: usize,
    mode: Mode,
    rng: &mut Rng,
    keep_cache: bool,
) -> Trace {
    let layers = arch.layers();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_vec());
    let mut bn = Vec::with_capacity(layers.len());
    let mut dropout = Vec::with_capacity(layers.len());
    let mut batch_stats = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let x = &acts[i];
        let mut bn_cache = None;
        let mut drop_mask = None;
        let mut stats = None;
        let y = match *layer {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let s = arch.first_slot(i).expect("dense owns params");
                let (w, b) = (params.get(s), params.get(s + 1));
                let mut y = vec![0.0; batch * out_features];
                for bi in 0..batch {
                    let xr = &x[bi * in_features..(bi + 1) * in_features];
                    let yr = &mut y[bi * out_features..(bi + 1) * out_features];
                    for (o, yo) in yr.iter_mut().enumerate() {
                        *yo = b[o] + dot(xr, &w[o * in_features..(o + 1) * in_features]);
                    }
                }
                y
            }
            LayerSpec::Conv2d { .. } => {
                let g = conv_geom(arch, i);
                let s = arch.first_slot(i).expect("conv owns params");
                let (w, b) = (params.get(s), params.get(s + 1));
                let (pl, np) = (g.patch_len(), g.positions());
                let in_len = g.c * g.h * g.w;
                let out_len = g.f * np;
                let mut patches = vec![0.0; np * pl];
                let mut y = vec![0.0; batch * out_len];
                for bi in 0..batch {
                    im2col(&x[bi * in_len..(bi + 1) * in_len], &g, &mut patches);
                    let yb = &mut y[bi * out_len..(bi + 1) * out_len];
                    for f in 0..g.f {
                        let wf = &w[f * pl..(f + 1) * pl];
                        for p in 0..np {
                            yb[f * np + p] = b[f] + dot(wf, &patches[p * pl..(p + 1) * pl]);
                        }
                    }
                }
                y
            }
            LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerSpec::BatchNorm { features } => {
                let s = arch.first_slot(i).expect("batch norm owns params");
                let (gamma, beta) = (params.get(s), params.get(s + 1));
                let spatial = arch.output_shape(i).iter().product::<usize>() / features;
                let n = batch * spatial;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; features];
                        let mut var = vec![0.0; features];
                        for f in 0..features {
                            let mut sum = 0.0;
                            for bi in 0..batch {
                                let base = (bi * features + f) * spatial;
                                sum += x[base..base + spatial].iter().sum::<f64>();
                            }
                            let m = sum / n as f64;
                            let mut sq = 0.0;
                            for bi in 0..batch {
                                let base = (bi * features + f) * spatial;
                                sq += x[base..base + spatial]
                                    .iter()
                                    .map(|v| (v - m) * (v - m))
                                    .sum::<f64>();
                            }
                            mean[f] = m;
                            var[f] = sq / n as f64;
                        }
                        stats = Some((
                            BnStats {
                                mean: mean.clone(),
                                var: var.clone(),
                            },
                            n,
                        ));
                        (mean, var)
                    }
                    Mode::Eval => {
                        let r = running[i].as_ref().expect("running stats for batch norm");
                        (r.mean.clone(), r.var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut y = vec![0.0; x.len()];
                let mut xhat = if keep_cache { vec![0.0; x.len()] } else { Vec::new() };
                for bi in 0..batch {
                    for f in 0..features {
                        let base = (bi * features + f) * spatial;
                        for k in base..base + spatial {
                            let h = (x[k] - mean[f]) * inv_std[f];
                            y[k] = gamma[f] * h + beta[f];
                            if keep_cache {
                                xhat[k] = h;
                            }
                        }
                    }
                }
                if keep_cache {
                    bn_cache = Some(BnCache {
                        xhat,
                        inv_std,
                        train: mode == Mode::Train,
                    });
                }
                y
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    let keep = 1.0 - rate;
                    let scale = 1.0 / keep;
                    let m: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                        .collect();
                    let y = x.iter().zip(&m).map(|(a, b)| a * b).collect();
                    drop_mask = Some(m);
                    y
                } else {
                    x.clone()
                }
            }
            LayerSpec::Flatten => x.clone(),
            LayerSpec::AvgPool { size } => {
                let input = arch.input_shape_of(i);
                let (c, h, w) = (input[0], input[1], input[2]);
                let (oh, ow) = (h / size, w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut y = vec![0.0; batch * c * oh * ow];
                for bc in 0..batch * c {
                    let xin = &x[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for ky in 0..size {
                                let row = (oy * size + ky) * w + ox * size;
                                s += xin[row..row + size].iter().sum::<f64>();
                            }
                            y[(bc * oh + oy) * ow + ox] = s * norm;
                        }
                    }
                }
                y
            }
            LayerSpec::ResidualAdd { from } => {
                let skip = &acts[from + 1];
                x.iter().zip(skip).map(|(a, b)| a + b).collect()
            }
        };
        bn.push(bn_cache);
        dropout.push(drop_mask);
        batch_stats.push(stats);
        acts.push(y);
    }
    Trace {
        batch,
        acts,
        bn,
        dropout,
        batch_stats,
    }
}

/// Gradients of the loss w.r.t. every parameter, given the gradient w.r.t. the logits.
pub(crate) fn backward(arch: &Architecture, params: &Params, trace: &Trace, dlogits: Vec<f64>) -> Params {
    let layers = arch.layers();
    let batch = trace.batch;
    let mut grads = Params::zeros(arch.layout());
    let mut pending: Vec<Option<Vec<f64>>> = vec![None; layers.len()];
    let mut g = dlogits;
    for i in (0..layers.len()).rev() {
        if let Some(extra) = pending[i].take() {
            for (a, b) in g.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let x = &trace.acts[i];
        let need_dx = i > 0;
        g = match layers[i] {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let s = arch.first_slot(i).expect("dense owns params");
                let w = params.get(s);
                let mut dx = if need_dx { vec![0.0; batch * in_features] } else { Vec::new() };
                {
                    let gv = grads.values_mut();
                    let (wslot, bslot) = gv.split_at_mut(s + 1);
                    let dw = &mut wslot[s];
                    let db = &mut bslot[0];
                    for bi in 0..batch {
                        let xr = &x[bi * in_features..(bi + 1) * in_features];
                        let gr = &g[bi * out_features..(bi + 1) * out_features];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            axpy(&mut dw[o * in_features..(o + 1) * in_features], go, xr);
                            if need_dx {
                                axpy(
                                    &mut dx[bi * in_features..(bi + 1) * in_features],
                                    go,
                                    &w[o * in_features..(o + 1) * in_features],
                                );
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::Conv2d { .. } => {
                let geo = conv_geom(arch, i);
                let s = arch.first_slot(i).expect("conv owns params");
                let w = params.get(s);
                let (pl, np) = (geo.patch_len(), geo.positions());
                let in_len = geo.c * geo.h * geo.w;
                let out_len = geo.f * np;
                let mut patches = vec![0.0; np * pl];
                let mut dpatches = vec![0.0; np * pl];
                let mut dx = if need_dx { vec![0.0; batch * in_len] } else { Vec::new() };
                let gv = grads.values_mut();
                let (wslot, bslot) = gv.split_at_mut(s + 1);
                let dw = &mut wslot[s];
                let db = &mut bslot[0];
                for bi in 0..batch {
                    im2col(&x[bi * in_len..(bi + 1) * in_len], &geo, &mut patches);
                    if need_dx {
                        dpatches.iter_mut().for_each(|v| *v = 0.0);
                    }
                    let gb = &g[bi * out_len..(bi + 1) * out_len];
                    for f in 0..geo.f {
                        let wf = &w[f * pl..(f + 1) * pl];
                        for p in 0..np {
                            let go = gb[f * np + p];
                            if go == 0.0 {
                                continue;
                            }
                            db[f] += go;
                            axpy(&mut dw[f * pl..(f + 1) * pl], go, &patches[p * pl..(p + 1) * pl]);
                            if need_dx {
                                axpy(&mut dpatches[p * pl..(p + 1) * pl], go, wf);
                            }
                        }
                    }
                    if need_dx {
                        col2im(&dpatches, &geo, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                dx
            }
            LayerSpec::Relu => {
                let y = &trace.acts[i + 1];
                g.iter().zip(y).map(|(&gv, &yv)| if yv > 0.0 { gv } else { 0.0 }).collect()
            }
            LayerSpec::BatchNorm { features } => {
                let s = arch.first_slot(i).expect("batch norm owns params");
                let gamma = params.get(s);
                let cache = trace.bn[i].as_ref().expect("batch norm cache kept for backward");
                let spatial = arch.output_shape(i).iter().product::<usize>() / features;
                let n = (batch * spatial) as f64;
                let mut dgamma = vec![0.0; features];
                let mut dbeta = vec![0.0; features];
                for bi in 0..batch {
                    for f in 0..features {
                        let base = (bi * features + f) * spatial;
                        for k in base..base + spatial {
                            dgamma[f] += g[k] * cache.xhat[k];
                            dbeta[f] += g[k];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                if cache.train {
                    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    for f in 0..features {
                        let mean_dxhat = dbeta[f] * gamma[f] / n;
                        let mean_dxhat_xhat = dgamma[f] * gamma[f] / n;
                        for bi in 0..batch {
                            let base = (bi * features + f) * spatial;
                            for k in base..base + spatial {
                                let dxhat = g[k] * gamma[f];
                                dx[k] = cache.inv_std[f]
                                    * (dxhat - mean_dxhat - cache.xhat[k] * mean_dxhat_xhat);
                            }
                        }
                    }
                } else {
                    for bi in 0..batch {
                        for f in 0..features {
                            let base = (bi * features + f) * spatial;
                            let c = gamma[f] * cache.inv_std[f];
                            for k in base..base + spatial {
                                dx[k] = g[k] * c;
                            }
                        }
                    }
                }
                let gv = grads.values_mut();
                gv[s].copy_from_slice(&dgamma);
                gv[s + 1].copy_from_slice(&dbeta);
                dx
            }
            LayerSpec::Dropout { .. } => match &trace.dropout[i] {
                Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => g,
            },
            LayerSpec::Flatten => g,
            LayerSpec::AvgPool { size } => {
                let input = arch.input_shape_of(i);
                let (c, h, w) = (input[0], input[1], input[2]);
                let (oh, ow) = (h / size, w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; batch * c * h * w];
                for bc in 0..batch * c {
                    let dxin = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(bc * oh + oy) * ow + ox] * norm;
                            for ky in 0..size {
                                let row = (oy * size + ky) * w + ox * size;
                                dxin[row..row + size].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::ResidualAdd { from } => {
                match &mut pending[from] {
                    Some(p) => p.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
                g
            }
        };
    }
    grads
}
