//! Rewrites a network after input channels of some layers were removed.
//!
//! Dropping input channel `d` of a layer drops output filter `d` of the
//! conv or dense layer producing it, and channel `d` of every batch-norm in
//! between. The pruned layer itself receives its refit kernels.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lifting::swap_kernel_axes;
use crate::network::{BatchNorm, Conv2d, ConvParams, LayerKind, Linear, LinearParams, NetworkSpec};
use crate::tensor::Tensor;

use super::LayerPruneResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneMode {
    /// Install the regression refit `Λ·D(w)` and intercepts.
    #[default]
    Refit,
    /// Keep the original kernels of surviving channels.
    MaskOnly,
}

/// Where the input channels of a layer come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upstream {
    /// Index of the conv or dense layer whose outputs are the channels.
    pub producer: usize,
    /// Batch-norm layers between producer and consumer.
    pub batchnorms: Vec<usize>,
}

/// Finds the layer producing the input channels of layer `idx`, or explains
/// why those channels cannot be removed.
pub fn trace_producer(net: &NetworkSpec, idx: usize) -> Result<Upstream> {
    let id = &net.layers[idx].id;
    let mut batchnorms = Vec::new();
    for j in (0..idx).rev() {
        let layer = &net.layers[j];
        match &layer.kind {
            LayerKind::Relu | LayerKind::MaxPool(_) | LayerKind::AvgPool(_) | LayerKind::Flatten => {}
            LayerKind::BatchNorm(_) => batchnorms.push(j),
            LayerKind::Conv(_) | LayerKind::Linear(_) => return Ok(Upstream { producer: j, batchnorms }),
            LayerKind::ResidualBegin { tag } => {
                return Err(Error::Structural(format!(
                    "input of layer {id} also feeds residual connection {tag} (layer {}); its channels cannot be removed",
                    layer.id
                )))
            }
            LayerKind::ResidualAdd { .. } => {
                return Err(Error::Structural(format!(
                    "input channels of layer {id} come from residual sum {}; they cannot be removed",
                    layer.id
                )))
            }
        }
    }
    Err(Error::Structural(format!(
        "layer {id} reads the network input; its channels cannot be removed"
    )))
}

fn out_channels(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Conv(c) => c.out_channels,
        LayerKind::Linear(l) => l.out_features,
        _ => 0,
    }
}

/// `out × in × k × k` kernels of the kept input channels.
fn slice_inputs(weight: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let s = weight.shape();
    let (out, inp, kk) = (s[0], s[1], s[2] * s[3]);
    let src = weight.data();
    let mut data = Vec::with_capacity(out * keep.len() * kk);
    for o in 0..out {
        for &d in keep {
            data.extend_from_slice(&src[(o * inp + d) * kk..][..kk]);
        }
    }
    Tensor::with_dtype(vec![out, keep.len(), s[2], s[3]], weight.dtype(), data)
}

/// Leading-axis rows of `weight` listed in `keep`.
fn slice_outputs(weight: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let s = weight.shape();
    let per: usize = s[1..].iter().product();
    let src = weight.data();
    let mut data = Vec::with_capacity(keep.len() * per);
    for &o in keep {
        data.extend_from_slice(&src[o * per..][..per]);
    }
    let mut shape = s.to_vec();
    shape[0] = keep.len();
    Tensor::with_dtype(shape, weight.dtype(), data)
}

fn pick(v: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Routes a refit intercept into the network: the layer's own bias when it
/// has one, else the running mean of a directly following batch-norm, else
/// a newly enabled bias. Returns the bias to store on the layer.
fn place_intercept(
    has_bias: bool,
    next_bn: Option<&mut BatchNorm>,
    intercept: &[f64],
) -> (bool, Option<Vec<f64>>) {
    if has_bias {
        return (true, Some(intercept.to_vec()));
    }
    if let Some(bn) = next_bn {
        if let Some(p) = &mut bn.params {
            for (m, b) in p.running_mean.iter_mut().zip(intercept) {
                *m -= b;
            }
        }
        return (false, None);
    }
    (true, Some(intercept.to_vec()))
}

fn check_result(net: &NetworkSpec, r: &LayerPruneResult) -> Result<()> {
    let g = net.lifted_geometry(&r.layer_id)?;
    if g != r.geometry {
        return Err(Error::Structural(format!(
            "layer {}: result was computed for {:?}, network has {:?}",
            r.layer_id, r.geometry, g
        )));
    }
    let kept = &r.kept_in;
    if kept.is_empty()
        || kept.windows(2).any(|p| p[0] >= p[1])
        || kept.last().is_some_and(|&d| d >= g.in_channels)
    {
        return Err(Error::Structural(format!(
            "layer {}: kept channels {kept:?} are not a nonempty ascending subset of 0..{}",
            r.layer_id, g.in_channels
        )));
    }
    Ok(())
}

/// Installs results into their layers and removes the matching producer
/// filters. Layers without results are left untouched.
pub fn prune_network(net: &NetworkSpec, results: &[LayerPruneResult], mode: PruneMode) -> Result<NetworkSpec> {
    let mut out = net.clone();
    let mut plans = Vec::with_capacity(results.len());
    let mut claimed: HashMap<usize, &str> = HashMap::new();
    for r in results {
        check_result(net, r)?;
        let idx = net.position(&r.layer_id).ok_or_else(|| {
            Error::Structural(format!(
                "shortcut {} reads a residual input; its channels cannot be removed",
                r.layer_id
            ))
        })?;
        let up = trace_producer(net, idx)?;
        let producer = &net.layers[up.producer];
        if out_channels(&producer.kind) != r.geometry.in_channels {
            return Err(Error::Structural(format!(
                "layer {} has {} input channels but its producer {} has {} outputs",
                r.layer_id,
                r.geometry.in_channels,
                producer.id,
                out_channels(&producer.kind)
            )));
        }
        if let Some(other) = claimed.insert(up.producer, &r.layer_id) {
            return Err(Error::Structural(format!(
                "layers {other} and {} both prune the outputs of layer {}",
                r.layer_id, producer.id
            )));
        }
        plans.push((idx, up, r));
    }

    for (idx, _, r) in &plans {
        install(&mut out, *idx, r, mode)?;
    }
    for (_, up, r) in &plans {
        remove_outputs(&mut out, up, &r.kept_in)?;
    }
    out.validate()?;
    Ok(out)
}

fn install(net: &mut NetworkSpec, idx: usize, r: &LayerPruneResult, mode: PruneMode) -> Result<()> {
    let kept = &r.kept_in;
    let taps = r.geometry.taps();
    let refit = swap_kernel_axes(&r.refit_kernels)?;
    let (head, tail) = net.layers.split_at_mut(idx + 1);
    let next_bn = match tail.first_mut().map(|l| &mut l.kind) {
        Some(LayerKind::BatchNorm(bn)) => Some(bn),
        _ => None,
    };
    match &mut head[idx].kind {
        LayerKind::Conv(c) => {
            c.in_channels = kept.len();
            install_conv(c, kept, refit, &r.refit_bias, next_bn, mode)?;
        }
        LayerKind::Linear(l) => {
            l.in_features = kept.len() * taps;
            install_linear(l, kept, taps, refit, &r.refit_bias, next_bn, mode)?;
        }
        _ => unreachable!("checked by lifted_geometry"),
    }
    Ok(())
}

fn install_conv(
    c: &mut Conv2d,
    kept: &[usize],
    refit: Tensor,
    intercept: &[f64],
    next_bn: Option<&mut BatchNorm>,
    mode: PruneMode,
) -> Result<()> {
    let Some(p) = &mut c.params else {
        return Ok(());
    };
    match mode {
        PruneMode::MaskOnly => p.weight = slice_inputs(&p.weight, kept)?,
        PruneMode::Refit => {
            let (bias_flag, bias) = place_intercept(c.bias, next_bn, intercept);
            *p = ConvParams { weight: refit, bias };
            c.bias = bias_flag;
        }
    }
    Ok(())
}

fn install_linear(
    l: &mut Linear,
    kept: &[usize],
    taps: usize,
    refit: Tensor,
    intercept: &[f64],
    next_bn: Option<&mut BatchNorm>,
    mode: PruneMode,
) -> Result<()> {
    let out = l.out_features;
    let Some(p) = &mut l.params else {
        return Ok(());
    };
    match mode {
        PruneMode::MaskOnly => {
            let channels = p.weight.shape()[1] / taps;
            let grouped = p.weight.clone().reshape(vec![out, channels, taps, 1])?;
            let sliced = slice_inputs(&grouped, kept)?;
            p.weight = sliced.reshape(vec![out, kept.len() * taps])?;
        }
        PruneMode::Refit => {
            let (bias_flag, bias) = place_intercept(l.bias, next_bn, intercept);
            *p = LinearParams {
                weight: refit.reshape(vec![out, kept.len() * taps])?,
                bias,
            };
            l.bias = bias_flag;
        }
    }
    Ok(())
}

fn remove_outputs(net: &mut NetworkSpec, up: &Upstream, keep: &[usize]) -> Result<()> {
    let produced = out_channels(&net.layers[up.producer].kind);
    for &j in &up.batchnorms {
        let id = net.layers[j].id.clone();
        let LayerKind::BatchNorm(bn) = &mut net.layers[j].kind else {
            unreachable!("traced batch-norm")
        };
        if bn.channels != produced {
            return Err(Error::Structural(format!(
                "batch-norm {id} has {} channels, producer emits {produced}; cannot remove channels through it",
                bn.channels
            )));
        }
        bn.channels = keep.len();
        if let Some(p) = &bn.params {
            bn.params = Some(p.select(keep));
        }
    }
    match &mut net.layers[up.producer].kind {
        LayerKind::Conv(c) => {
            c.out_channels = keep.len();
            if let Some(p) = &mut c.params {
                p.weight = slice_outputs(&p.weight, keep)?;
                p.bias = p.bias.as_ref().map(|b| pick(b, keep));
            }
        }
        LayerKind::Linear(l) => {
            l.out_features = keep.len();
            if let Some(p) = &mut l.params {
                p.weight = slice_outputs(&p.weight, keep)?;
                p.bias = p.bias.as_ref().map(|b| pick(b, keep));
            }
        }
        _ => unreachable!("producers are conv or dense layers"),
    }
    Ok(())
}

/// `out × keep.len() × …` kernels spread back to `out × d × …`, with zero
/// kernels for the channels not kept.
fn expand_inputs(kernels: &Tensor, keep: &[usize], d: usize) -> Result<Tensor> {
    let s = kernels.shape();
    let (out, kk) = (s[0], s[2] * s[3]);
    let src = kernels.data();
    let mut data = vec![0.0; out * d * kk];
    for o in 0..out {
        for (i, &c) in keep.iter().enumerate() {
            data[(o * d + c) * kk..][..kk].copy_from_slice(&src[(o * keep.len() + i) * kk..][..kk]);
        }
    }
    Tensor::with_dtype(vec![out, d, s[2], s[3]], kernels.dtype(), data)
}

/// Installs results without changing any layer shape: kernels of removed
/// input channels are set to zero and producers are left alone. This is the
/// only option for layers reading a residual sum, and also covers shortcut
/// projections.
pub fn install_in_place(net: &NetworkSpec, results: &[LayerPruneResult], mode: PruneMode) -> Result<NetworkSpec> {
    let mut out = net.clone();
    for r in results {
        check_result(net, r)?;
        let g = r.geometry;
        let kept = &r.kept_in;
        let full = |weight: &Tensor| -> Result<Tensor> {
            let s = weight.shape().to_vec();
            let grouped = weight.clone().reshape(vec![g.out_channels, g.in_channels, g.kernel, g.kernel])?;
            let kernels = match mode {
                PruneMode::MaskOnly => slice_inputs(&grouped, kept)?,
                PruneMode::Refit => swap_kernel_axes(&r.refit_kernels)?,
            };
            expand_inputs(&kernels, kept, g.in_channels)?.reshape(s)
        };
        if let Some(pos) = out.shortcut_position(&r.layer_id) {
            let LayerKind::ResidualAdd { shortcut: Some(sc), .. } = &mut out.layers[pos].kind else {
                unreachable!("shortcut_position finds residual sums")
            };
            let sc = &mut **sc;
            if let Some(p) = &mut sc.conv.params {
                let weight = full(&p.weight)?;
                set_params(&mut sc.conv.bias, &mut p.weight, &mut p.bias, weight, sc.bn.as_mut(), &r.refit_bias, mode);
            }
            continue;
        }
        let idx = out.position(&r.layer_id).expect("checked by lifted_geometry");
        let (head, tail) = out.layers.split_at_mut(idx + 1);
        let next_bn = match tail.first_mut().map(|l| &mut l.kind) {
            Some(LayerKind::BatchNorm(bn)) => Some(bn),
            _ => None,
        };
        match &mut head[idx].kind {
            LayerKind::Conv(c) => {
                if let Some(p) = &mut c.params {
                    let weight = full(&p.weight)?;
                    set_params(&mut c.bias, &mut p.weight, &mut p.bias, weight, next_bn, &r.refit_bias, mode);
                }
            }
            LayerKind::Linear(l) => {
                if let Some(p) = &mut l.params {
                    let weight = full(&p.weight)?;
                    set_params(&mut l.bias, &mut p.weight, &mut p.bias, weight, next_bn, &r.refit_bias, mode);
                }
            }
            _ => unreachable!("checked by lifted_geometry"),
        }
    }
    out.validate()?;
    Ok(out)
}

fn set_params(
    bias_flag: &mut bool,
    weight: &mut Tensor,
    bias: &mut Option<Vec<f64>>,
    new_weight: Tensor,
    next_bn: Option<&mut BatchNorm>,
    intercept: &[f64],
    mode: PruneMode,
) {
    *weight = new_weight;
    if mode == PruneMode::Refit {
        let (flag, b) = place_intercept(*bias_flag, next_bn, intercept);
        *bias_flag = flag;
        *bias = b;
    }
}
