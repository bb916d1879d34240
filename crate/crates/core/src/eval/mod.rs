//! Deterministic CPU forward pass over a [`NetworkSpec`].

mod dataset;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dump::LayerDump;
use crate::error::{Error, Result};
use crate::network::{BatchNorm, Conv2d, FeatureShape, Layer, LayerKind, NetworkSpec, Pool};
use crate::tensor::Tensor;

pub use dataset::{load_images, EvalDataset};

/// A batch of activations: `n` samples of `shape`, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub n: usize,
    pub shape: FeatureShape,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn from_images(batch: &Tensor) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("input batch must be N x C x H x W, got {s:?}")));
        }
        Ok(Self {
            n: s[0],
            shape: FeatureShape::Spatial {
                c: s[1],
                h: s[2],
                w: s[3],
            },
            data: batch.data().to_vec(),
        })
    }

    /// As an `N × C × H × W` tensor; flat activations become `N × F × 1 × 1`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let dims = match self.shape {
            FeatureShape::Spatial { c, h, w } => vec![self.n, c, h, w],
            FeatureShape::Flat { n, .. } => vec![self.n, n, 1, 1],
        };
        Tensor::new(dims, self.data.clone())
    }
}

fn missing_weights(id: &str) -> Error {
    Error::Structural(format!("layer {id} has no weights attached"))
}

fn conv_forward(id: &str, conv: &Conv2d, x: &Activation) -> Result<Activation> {
    let FeatureShape::Spatial { c, h, w } = x.shape else {
        return Err(Error::Structural(format!("layer {id} needs a spatial input")));
    };
    if c != conv.in_channels {
        return Err(Error::Structural(format!(
            "layer {id} expects {} channels, got {c}",
            conv.in_channels
        )));
    }
    let p = conv.params.as_ref().ok_or_else(|| missing_weights(id))?;
    let (oh, ow) = conv
        .output_hw(h, w)
        .ok_or_else(|| Error::Structural(format!("layer {id}: kernel does not fit {h}x{w}")))?;
    let (m, k, s, pad) = (conv.out_channels, conv.kernel, conv.stride, conv.padding as isize);
    let wt = p.weight.data();
    let mut out = vec![0.0; x.n * m * oh * ow];
    out.par_chunks_mut(m * oh * ow)
        .zip(x.data.par_chunks(c * h * w))
        .for_each(|(y, xs)| {
            for o in 0..m {
                let plane = &mut y[o * oh * ow..][..oh * ow];
                if let Some(b) = &p.bias {
                    plane.fill(b[o]);
                }
                for d in 0..c {
                    let src = &xs[d * h * w..][..h * w];
                    for r in 0..k {
                        for q in 0..k {
                            let wv = wt[((o * c + d) * k + r) * k + q];
                            for a in 0..oh {
                                let ii = (a * s) as isize + r as isize - pad;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let row = &src[ii as usize * w..][..w];
                                for bcol in 0..ow {
                                    let jj = (bcol * s) as isize + q as isize - pad;
                                    if jj >= 0 && jj < w as isize {
                                        plane[a * ow + bcol] += wv * row[jj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Activation {
        n: x.n,
        shape: FeatureShape::Spatial { c: m, h: oh, w: ow },
        data: out,
    })
}

fn bn_forward(id: &str, bn: &BatchNorm, eps: f64, x: &mut Activation) -> Result<()> {
    let p = bn.params.as_ref().ok_or_else(|| missing_weights(id))?;
    let (c, plane) = match x.shape {
        FeatureShape::Spatial { c, h, w } => (c, h * w),
        FeatureShape::Flat { n, .. } => (n, 1),
    };
    if c != bn.channels {
        return Err(Error::Structural(format!(
            "layer {id} normalizes {} channels, got {c}",
            bn.channels
        )));
    }
    for sample in x.data.chunks_mut(c * plane) {
        for (ch, vals) in sample.chunks_mut(plane).enumerate() {
            let inv = 1.0 / (p.running_var[ch] + eps).sqrt();
            let (mean, scale, shift) = (p.running_mean[ch], p.scale[ch], p.shift[ch]);
            for v in vals {
                *v = (*v - mean) * inv * scale + shift;
            }
        }
    }
    Ok(())
}

fn pool_forward(id: &str, pool: &Pool, max: bool, x: &Activation) -> Result<Activation> {
    let FeatureShape::Spatial { c, h, w } = x.shape else {
        return Err(Error::Structural(format!("layer {id} needs a spatial input")));
    };
    if pool.kernel == 0 || pool.stride == 0 || h < pool.kernel || w < pool.kernel {
        return Err(Error::Structural(format!("layer {id}: window does not fit {h}x{w}")));
    }
    let (k, s) = (pool.kernel, pool.stride);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(x.n * c * oh * ow);
    for plane in x.data.chunks(h * w) {
        for a in 0..oh {
            for b in 0..ow {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for r in 0..k {
                    for q in 0..k {
                        let v = plane[(a * s + r) * w + b * s + q];
                        acc = if max { acc.max(v) } else { acc + v };
                    }
                }
                out.push(if max { acc } else { acc / (k * k) as f64 });
            }
        }
    }
    Ok(Activation {
        n: x.n,
        shape: FeatureShape::Spatial { c, h: oh, w: ow },
        data: out,
    })
}

/// Output of the shortcut branch (convolution, then optional batch-norm),
/// also returning the pre-normalization convolution output.
fn shortcut_forward(
    net: &NetworkSpec,
    sc: &crate::network::Shortcut,
    skip: &Activation,
) -> Result<(Activation, Activation)> {
    let raw = conv_forward(&sc.id, &sc.conv, skip)?;
    let mut out = raw.clone();
    if let Some(bn) = &sc.bn {
        bn_forward(&sc.id, bn, net.bn_eps, &mut out)?;
    }
    Ok((raw, out))
}

/// Runs the network, calling `visit(id, input, output)` after every conv,
/// dense and shortcut convolution. The output is taken before any
/// batch-norm or nonlinearity.
pub fn run_with<F>(net: &NetworkSpec, batch: &Tensor, mut visit: F) -> Result<Activation>
where
    F: FnMut(&str, &Activation, &Activation),
{
    let mut x = Activation::from_images(batch)?;
    let [c, h, w] = net.input_shape;
    if x.shape != (FeatureShape::Spatial { c, h, w }) {
        return Err(Error::Structural(format!(
            "network input expects {c}x{h}x{w}, batch is {:?}",
            batch.shape()
        )));
    }
    let mut saved: HashMap<&str, Activation> = HashMap::new();
    for Layer { id, kind } in &net.layers {
        let id = id.as_str();
        x = match kind {
            LayerKind::Conv(conv) => {
                let y = conv_forward(id, conv, &x)?;
                visit(id, &x, &y);
                y
            }
            LayerKind::Linear(lin) => {
                let FeatureShape::Flat { n: f, .. } = x.shape else {
                    return Err(Error::Structural(format!("layer {id} needs a flat input")));
                };
                if f != lin.in_features {
                    return Err(Error::Structural(format!(
                        "layer {id} expects {} features, got {f}",
                        lin.in_features
                    )));
                }
                let p = lin.params.as_ref().ok_or_else(|| missing_weights(id))?;
                let m = lin.out_features;
                let wt = p.weight.data();
                let mut out = vec![0.0; x.n * m];
                out.par_chunks_mut(m)
                    .zip(x.data.par_chunks(f))
                    .for_each(|(y, xs)| {
                        for (o, v) in y.iter_mut().enumerate() {
                            let row = &wt[o * f..][..f];
                            let dot: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
                            *v = dot + p.bias.as_ref().map_or(0.0, |b| b[o]);
                        }
                    });
                let y = Activation {
                    n: x.n,
                    shape: FeatureShape::Flat { n: m, from: None },
                    data: out,
                };
                visit(id, &x, &y);
                y
            }
            LayerKind::MaxPool(p) => pool_forward(id, p, true, &x)?,
            LayerKind::AvgPool(p) => pool_forward(id, p, false, &x)?,
            LayerKind::Relu => {
                x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                x
            }
            LayerKind::BatchNorm(bn) => {
                bn_forward(id, bn, net.bn_eps, &mut x)?;
                x
            }
            LayerKind::Flatten => {
                if let FeatureShape::Spatial { c, h, w } = x.shape {
                    x.shape = FeatureShape::Flat {
                        n: c * h * w,
                        from: Some((c, h, w)),
                    };
                }
                x
            }
            LayerKind::ResidualBegin { tag } => {
                saved.insert(tag, x.clone());
                x
            }
            LayerKind::ResidualAdd { tag, shortcut } => {
                let skip = saved.remove(tag.as_str()).ok_or_else(|| {
                    Error::Structural(format!("layer {id}: residual tag {tag} was never opened"))
                })?;
                let skip = match shortcut {
                    Some(sc) => {
                        let (raw, out) = shortcut_forward(net, sc, &skip)?;
                        visit(&sc.id, &skip, &raw);
                        out
                    }
                    None => skip,
                };
                if skip.shape.numel() != x.shape.numel() || skip.shape.channels() != x.shape.channels() {
                    return Err(Error::Structural(format!(
                        "layer {id}: shortcut shape {:?} differs from {:?}",
                        skip.shape, x.shape
                    )));
                }
                x.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
                x
            }
        };
    }
    Ok(x)
}

/// Logits (`N × classes`) of a batch of images.
pub fn forward(net: &NetworkSpec, batch: &Tensor) -> Result<Tensor> {
    let out = run_with(net, batch, |_, _, _| {})?;
    let f = out.shape.numel();
    Tensor::new(vec![out.n, f], out.data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every image; ties go to the lowest index.
pub fn predict(net: &NetworkSpec, images: &Tensor, batch_size: usize) -> Result<Vec<usize>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("images must be N x C x H x W, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut preds = Vec::with_capacity(s[0]);
    for chunk in images.data().chunks(batch_size.max(1) * per) {
        let n = chunk.len() / per;
        let batch = Tensor::new(vec![n, s[1], s[2], s[3]], chunk.to_vec())?;
        let logits = forward(net, &batch)?;
        let classes = logits.shape()[1];
        preds.extend(logits.data().chunks(classes).map(argmax));
    }
    Ok(preds)
}

/// Top-1 accuracy of `net` on `data`.
pub fn evaluate(net: &NetworkSpec, data: &EvalDataset) -> Result<f64> {
    let preds = predict(net, &data.images, 256)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.labels.len() as f64)
}

/// Captures the input and pre-activation output of the named conv, dense or
/// shortcut layers while running `images` through `net`.
pub fn capture_dumps(net: &NetworkSpec, images: &Tensor, layer_ids: &[&str]) -> Result<Vec<LayerDump>> {
    let mut geoms = Vec::with_capacity(layer_ids.len());
    for id in layer_ids {
        geoms.push(net.lifted_geometry(id)?);
    }
    let mut captured: HashMap<String, (Activation, Activation)> = HashMap::new();
    run_with(net, images, |id, x, y| {
        if layer_ids.contains(&id) {
            captured.insert(id.to_string(), (x.clone(), y.clone()));
        }
    })?;
    layer_ids
        .iter()
        .zip(geoms)
        .map(|(id, g)| {
            let (x, y) = captured
                .remove(*id)
                .ok_or_else(|| Error::Structural(format!("layer {id} was not reached")))?;
            let side = g.kernel;
            let xt = match x.shape {
                FeatureShape::Flat { n, .. } if side > 1 => {
                    Tensor::new(vec![x.n, n / (side * side), side, side], x.data)?
                }
                _ => x.to_tensor()?,
            };
            LayerDump::new(*id, g, xt, y.to_tensor()?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ConvParams, Linear, LinearParams};
    use crate::zoo;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, true);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        conv.params = Some(ConvParams {
            weight: Tensor::new(vec![1, 1, 3, 3], k).unwrap(),
            bias: Some(vec![0.0]),
        });
        let net = NetworkSpec::new([1, 5, 4], vec![Layer::new("c", LayerKind::Conv(conv))]);
        let x = Tensor::new(vec![2, 1, 5, 4], (0..40).map(f64::from).collect()).unwrap();
        let y = forward(&net, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn bias_decides_class_on_zero_input() {
        let mut net = zoo::lenet();
        zoo::init_weights(&mut net, 0);
        for layer in &mut net.layers {
            match &mut layer.kind {
                LayerKind::Conv(c) => {
                    let p = c.params.as_mut().unwrap();
                    p.weight.data_mut().fill(0.0);
                    p.bias.as_mut().unwrap().fill(0.0);
                }
                LayerKind::Linear(l) => {
                    let p = l.params.as_mut().unwrap();
                    p.weight.data_mut().fill(0.0);
                    p.bias.as_mut().unwrap().fill(0.0);
                }
                _ => {}
            }
        }
        let pos = net.position("fc3").unwrap();
        if let LayerKind::Linear(l) = &mut net.layers[pos].kind {
            l.params.as_mut().unwrap().bias.as_mut().unwrap()[7] = 1.0;
        }
        let preds = predict(&net, &Tensor::zeros(vec![3, 1, 28, 28]), 2).unwrap();
        assert_eq!(preds, vec![7, 7, 7]);
    }

    #[test]
    fn mismatched_batch_is_structural_error() {
        let mut net = zoo::lenet();
        zoo::init_weights(&mut net, 0);
        assert!(matches!(
            forward(&net, &Tensor::zeros(vec![1, 3, 28, 28])),
            Err(Error::Structural(_))
        ));
        let bare = zoo::lenet();
        assert!(forward(&bare, &Tensor::zeros(vec![1, 1, 28, 28])).is_err());
    }

    fn one_layer_classifier(bias: Vec<f64>, weight: Vec<f64>, inputs: usize) -> NetworkSpec {
        let classes = bias.len();
        let mut lin = Linear::new(inputs, classes, true);
        lin.params = Some(LinearParams {
            weight: Tensor::new(vec![classes, inputs], weight).unwrap(),
            bias: Some(bias),
        });
        NetworkSpec::new(
            [1, 1, inputs],
            vec![
                Layer::new("flat", LayerKind::Flatten),
                Layer::new("fc", LayerKind::Linear(lin)),
            ],
        )
    }

    #[test]
    fn constant_classifier_scores_label_frequency() {
        let net = one_layer_classifier(vec![1.0, 0.0, 0.0], vec![0.0; 6], 2);
        let labels = vec![0, 1, 0, 2, 0];
        let data = EvalDataset::new(Tensor::zeros(vec![5, 1, 1, 2]), labels).unwrap();
        assert!((evaluate(&net, &data).unwrap() - 0.6).abs() < 1e-15);

        let lookup = one_layer_classifier(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 2);
        let one = EvalDataset::new(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap(), vec![1]).unwrap();
        assert_eq!(evaluate(&lookup, &one).unwrap(), 1.0);
    }

    #[test]
    fn random_net_is_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = 16;
        let net = one_layer_classifier(
            vec![0.0; 10],
            (0..10 * inputs).map(|_| rng.random::<f64>() - 0.5).collect(),
            inputs,
        );
        let n = 10_000;
        let images = Tensor::new(vec![n, 1, 1, inputs], (0..n * inputs).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
        let acc = evaluate(&net, &EvalDataset::new(images, labels).unwrap()).unwrap();
        assert!((0.07..=0.13).contains(&acc), "{acc}");
    }

    #[test]
    fn captured_output_matches_network_intermediate() {
        let mut net = zoo::lenet();
        zoo::init_weights(&mut net, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images = Tensor::new(vec![3, 1, 28, 28], (0..3 * 784).map(|_| rng.random()).collect()).unwrap();
        let dumps = capture_dumps(&net, &images, &["conv0", "fc1", "fc2"]).unwrap();
        assert_eq!(dumps[0].x, images);
        assert_eq!(dumps[1].geometry.kernel, 5);
        assert_eq!(dumps[1].x.shape(), &[3, 16, 5, 5]);
        assert_eq!(dumps[2].x.shape(), &[3, 120, 1, 1]);

        // Truncated network ending at fc1 must reproduce the dumped output bitwise.
        let mut head = net.clone();
        let cut = head.position("fc1").unwrap();
        head.layers.truncate(cut + 1);
        let y = forward(&head, &images).unwrap();
        assert_eq!(y.data(), dumps[1].y.data());
        assert!(capture_dumps(&net, &images, &["relu0"]).is_err());
        assert!(capture_dumps(&net, &images, &["nope"]).is_err());
    }

    #[test]
    fn shortcut_layers_can_be_captured() {
        let mut net = zoo::resnet18();
        zoo::init_weights(&mut net, 2);
        let images = Tensor::zeros(vec![1, 3, 32, 32]);
        let dumps = capture_dumps(&net, &images, &["conv5_shortcut", "conv6"]).unwrap();
        assert_eq!(dumps[0].x.shape(), &[1, 64, 32, 32]);
        assert_eq!(dumps[0].y.shape(), &[1, 128, 16, 16]);
    }
}
