//! Reference architectures: LeNet-5 (MNIST), VGG-16 and ResNet18 (CIFAR-10).
//!
//! Layers carry no weights; use [`init_weights`] to attach random ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{
    BatchNorm, BnParams, Conv2d, ConvParams, Layer, LayerKind, Linear, LinearParams, NetworkSpec, Pool,
    Shortcut,
};
use crate::tensor::Tensor;

/// One entry of a VGG channel configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggItem {
    Conv(usize),
    MaxPool,
}

/// Parses a configuration such as `"64, 64, M, 128"`.
pub fn parse_vgg_config(s: &str) -> Option<Vec<VggItem>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t.eq_ignore_ascii_case("m") {
                Some(VggItem::MaxPool)
            } else {
                t.parse().ok().filter(|&c| c > 0).map(VggItem::Conv)
            }
        })
        .collect()
}

pub const VGG16_BASELINE: &str = "64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M";

/// Pruned VGG-16 channel configurations, keyed by scenario name.
pub const VGG16_PRUNED: [(&str, &str); 7] = [
    ("conv1-4", "29, 64, M, 124, 127, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M"),
    ("conv5-7", "64, 64, M, 128, 128, M, 250, 232, 219, M, 512, 512, 512, M, 512, 512, 512, M"),
    ("conv8-10", "64, 64, M, 128, 128, M, 256, 256, 256, M, 65, 24, 12, M, 512, 512, 512, M"),
    ("conv11-12", "64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 10, 12, 512, M"),
    ("conv8-12", "64, 64, M, 128, 128, M, 256, 256, 256, M, 65, 24, 12, M, 10, 12, 512, M"),
    ("conv_all", "29, 64, M, 124, 127, M, 250, 232, 219, M, 65, 24, 12, M, 10, 12, 512, M"),
    ("conv_all+fc", "29, 64, M, 124, 127, M, 250, 232, 219, M, 65, 24, 12, M, 10, 12, 91, M"),
];

pub fn vgg16_pruned(name: &str) -> Option<NetworkSpec> {
    VGG16_PRUNED
        .iter()
        .find(|(n, _)| *n == name)
        .and_then(|(_, cfg)| parse_vgg_config(cfg))
        .map(|cfg| vgg(&cfg, 10))
}

pub fn lenet() -> NetworkSpec {
    lenet_with(16)
}

/// LeNet-5 with `conv1_out` filters in the second convolution.
pub fn lenet_with(conv1_out: usize) -> NetworkSpec {
    let avg = Pool { kernel: 2, stride: 2 };
    let layers = vec![
        Layer::new("conv0", LayerKind::Conv(Conv2d::new(1, 6, 5, 1, 2, true))),
        Layer::new("relu0", LayerKind::Relu),
        Layer::new("pool0", LayerKind::AvgPool(avg)),
        Layer::new("conv1", LayerKind::Conv(Conv2d::new(6, conv1_out, 5, 1, 0, true))),
        Layer::new("relu1", LayerKind::Relu),
        Layer::new("pool1", LayerKind::AvgPool(avg)),
        Layer::new("flatten", LayerKind::Flatten),
        Layer::new("fc1", LayerKind::Linear(Linear::new(conv1_out * 25, 120, true))),
        Layer::new("relu2", LayerKind::Relu),
        Layer::new("fc2", LayerKind::Linear(Linear::new(120, 84, true))),
        Layer::new("relu3", LayerKind::Relu),
        Layer::new("fc3", LayerKind::Linear(Linear::new(84, 10, true))),
    ];
    NetworkSpec::new([1, 28, 28], layers)
}

pub fn vgg16() -> NetworkSpec {
    vgg(&parse_vgg_config(VGG16_BASELINE).expect("valid config"), 10)
}

/// VGG-style network on 3×32×32 input: each convolution is 3×3, padding 1,
/// with bias, followed by batch-norm and ReLU; a single dense classifier.
pub fn vgg(cfg: &[VggItem], classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut channels = 3;
    let (mut conv, mut pool) = (0, 0);
    for item in cfg {
        match *item {
            VggItem::Conv(out) => {
                layers.push(Layer::new(
                    format!("conv{conv}"),
                    LayerKind::Conv(Conv2d::new(channels, out, 3, 1, 1, true)),
                ));
                layers.push(Layer::new(format!("bn{conv}"), LayerKind::BatchNorm(BatchNorm::new(out))));
                layers.push(Layer::new(format!("relu{conv}"), LayerKind::Relu));
                channels = out;
                conv += 1;
            }
            VggItem::MaxPool => {
                layers.push(Layer::new(
                    format!("pool{pool}"),
                    LayerKind::MaxPool(Pool { kernel: 2, stride: 2 }),
                ));
                pool += 1;
            }
        }
    }
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    layers.push(Layer::new("fc", LayerKind::Linear(Linear::new(channels, classes, true))));
    NetworkSpec::new([3, 32, 32], layers)
}

/// ResNet18 for CIFAR-10: bias-free convolutions, batch-norm after every
/// convolution, 1×1 projection shortcuts where the shape changes.
pub fn resnet18() -> NetworkSpec {
    let mut layers = vec![
        Layer::new("conv0", LayerKind::Conv(Conv2d::new(3, 64, 3, 1, 1, false))),
        Layer::new("bn0", LayerKind::BatchNorm(BatchNorm::new(64))),
        Layer::new("relu0", LayerKind::Relu),
    ];
    let mut channels = 64;
    let mut idx = 1;
    for (stage, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let tag = format!("block{stage}_{block}");
            let (a, b) = (idx, idx + 1);
            layers.push(Layer::new(format!("{tag}_in"), LayerKind::ResidualBegin { tag: tag.clone() }));
            layers.push(Layer::new(
                format!("conv{a}"),
                LayerKind::Conv(Conv2d::new(channels, width, 3, stride, 1, false)),
            ));
            layers.push(Layer::new(format!("bn{a}"), LayerKind::BatchNorm(BatchNorm::new(width))));
            layers.push(Layer::new(format!("relu{a}"), LayerKind::Relu));
            layers.push(Layer::new(
                format!("conv{b}"),
                LayerKind::Conv(Conv2d::new(width, width, 3, 1, 1, false)),
            ));
            layers.push(Layer::new(format!("bn{b}"), LayerKind::BatchNorm(BatchNorm::new(width))));
            let shortcut = (stride != 1 || channels != width).then(|| {
                Box::new(Shortcut {
                    id: format!("conv{a}_shortcut"),
                    conv: Conv2d::new(channels, width, 1, stride, 0, false),
                    bn: Some(BatchNorm::new(width)),
                })
            });
            layers.push(Layer::new(format!("{tag}_add"), LayerKind::ResidualAdd { tag, shortcut }));
            layers.push(Layer::new(format!("relu{b}"), LayerKind::Relu));
            channels = width;
            idx += 2;
        }
    }
    layers.push(Layer::new("pool", LayerKind::AvgPool(Pool { kernel: 4, stride: 4 })));
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    layers.push(Layer::new("fc", LayerKind::Linear(Linear::new(512, 10, true))));
    NetworkSpec::new([3, 32, 32], layers)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn conv_params(rng: &mut ChaCha8Rng, c: &Conv2d) -> ConvParams {
    let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let n = c.out_channels * c.in_channels * c.kernel * c.kernel;
    ConvParams {
        weight: Tensor::new(
            vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            uniform(rng, n, bound),
        )
        .expect("finite weights"),
        bias: c.bias.then(|| uniform(rng, c.out_channels, bound)),
    }
}

fn bn_params(rng: &mut ChaCha8Rng, channels: usize) -> BnParams {
    BnParams {
        scale: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
        shift: uniform(rng, channels, 0.1),
        running_mean: uniform(rng, channels, 0.1),
        running_var: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
    }
}

/// Attaches seeded random weights (fan-in scaled uniform) to every layer.
pub fn init_weights(net: &mut NetworkSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        match &mut layer.kind {
            LayerKind::Conv(c) => c.params = Some(conv_params(&mut rng, c)),
            LayerKind::Linear(l) => {
                let bound = 1.0 / (l.in_features as f64).sqrt();
                l.params = Some(LinearParams {
                    weight: Tensor::new(
                        vec![l.out_features, l.in_features],
                        uniform(&mut rng, l.out_features * l.in_features, bound),
                    )
                    .expect("finite weights"),
                    bias: l.bias.then(|| uniform(&mut rng, l.out_features, bound)),
                });
            }
            LayerKind::BatchNorm(b) => b.params = Some(bn_params(&mut rng, b.channels)),
            LayerKind::ResidualAdd {
                shortcut: Some(s), ..
            } => {
                s.conv.params = Some(conv_params(&mut rng, &s.conv));
                if let Some(bn) = &mut s.bn {
                    bn.params = Some(bn_params(&mut rng, bn.channels));
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_totals_match_architecture_tables() {
        assert_eq!(lenet().param_count(), 61_706);
        assert_eq!(lenet_with(8).param_count(), 36_498);
        let vgg = vgg16();
        vgg.validate().unwrap();
        assert_eq!(vgg.param_count(), 14_728_266);
        assert_eq!(vgg.layer("conv0").unwrap().param_count(), 1_792);
        assert_eq!(vgg.layer("conv7").unwrap().param_count(), 1_180_160);
        let res = resnet18();
        res.validate().unwrap();
        assert_eq!(res.param_count(), 11_173_962);
        assert_eq!(res.layer("conv0").unwrap().param_count(), 1_728);
    }

    #[test]
    fn pruned_vgg_configs_are_valid() {
        for (name, _) in VGG16_PRUNED {
            vgg16_pruned(name).unwrap().validate().unwrap();
        }
        assert!(parse_vgg_config("64, x").is_none());
        assert!(parse_vgg_config("64, 0").is_none());
    }

    #[test]
    fn random_weights_validate() {
        for mut net in [lenet(), resnet18()] {
            init_weights(&mut net, 1);
            net.validate().unwrap();
            assert!(net.has_weights());
        }
    }
}
