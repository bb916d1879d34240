//! Layer-list description of a feed-forward CNN with optional weights.
//!
//! Weight layouts follow the common framework convention: convolution
//! weights are `out × in × k × k`, dense weights are `out × in`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `out × in × k × k`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub params: Option<ConvParams>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
            params: None,
        }
    }

    pub fn param_count(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        k2 * self.in_channels as u64 * self.out_channels as u64
            + if self.bias { self.out_channels as u64 } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ext = |x: usize| {
            let padded = x + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((ext(h)?, ext(w)?))
    }

    fn check_params(&self, id: &str) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(Error::Structural(format!(
                "layer {id}: kernel must be odd and stride positive (kernel {}, stride {})",
                self.kernel, self.stride
            )));
        }
        if let Some(p) = &self.params {
            p.weight
                .expect_shape(
                    &format!("layer {id} weight"),
                    &[self.out_channels, self.in_channels, self.kernel, self.kernel],
                )
                .map_err(|e| Error::Structural(e.to_string()))?;
            check_bias(id, self.bias, p.bias.as_deref(), self.out_channels)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub params: Option<LinearParams>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            in_features,
            out_features,
            bias,
            params: None,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.in_features as u64 * self.out_features as u64
            + if self.bias { self.out_features as u64 } else { 0 }
    }

    fn check_params(&self, id: &str) -> Result<()> {
        if let Some(p) = &self.params {
            p.weight
                .expect_shape(
                    &format!("layer {id} weight"),
                    &[self.out_features, self.in_features],
                )
                .map_err(|e| Error::Structural(e.to_string()))?;
            check_bias(id, self.bias, p.bias.as_deref(), self.out_features)?;
        }
        Ok(())
    }
}

fn check_bias(id: &str, flag: bool, bias: Option<&[f64]>, out: usize) -> Result<()> {
    match (flag, bias) {
        (true, Some(b)) if b.len() == out => Ok(()),
        (false, None) => Ok(()),
        (true, Some(b)) => Err(Error::Structural(format!(
            "layer {id}: bias has {} entries, expected {out}",
            b.len()
        ))),
        (true, None) => Err(Error::Structural(format!("layer {id}: bias values missing"))),
        (false, Some(_)) => Err(Error::Structural(format!(
            "layer {id}: bias values given for a bias-free layer"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub(crate) fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect();
        Self {
            scale: pick(&self.scale),
            shift: pick(&self.shift),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub params: Option<BnParams>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            params: None,
        }
    }

    /// Only the affine scale and shift are trainable parameters.
    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }

    fn check_params(&self, id: &str) -> Result<()> {
        if let Some(p) = &self.params {
            for (name, v) in [
                ("scale", &p.scale),
                ("shift", &p.shift),
                ("running_mean", &p.running_mean),
                ("running_var", &p.running_var),
            ] {
                if v.len() != self.channels {
                    return Err(Error::Structural(format!(
                        "layer {id}: {name} has {} entries, expected {}",
                        v.len(),
                        self.channels
                    )));
                }
            }
            if p.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::Structural(format!(
                    "layer {id}: negative running variance"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

/// Projection applied to the saved activation before a residual sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Shortcut {
    pub id: String,
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(Conv2d),
    Linear(Linear),
    MaxPool(Pool),
    AvgPool(Pool),
    Relu,
    BatchNorm(BatchNorm),
    Flatten,
    ResidualBegin { tag: String },
    ResidualAdd { tag: String, shortcut: Option<Box<Shortcut>> },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Linear(_) => "linear",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::AvgPool(_) => "avgpool",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualBegin { .. } => "residual_begin",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self { id: id.into(), kind }
    }

    pub fn param_count(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv(c) => c.param_count(),
            LayerKind::Linear(l) => l.param_count(),
            LayerKind::BatchNorm(b) => b.param_count(),
            LayerKind::ResidualAdd {
                shortcut: Some(s), ..
            } => s.conv.param_count() + s.bn.as_ref().map_or(0, BatchNorm::param_count),
            _ => 0,
        }
    }

    /// Whether every trainable tensor of this layer is attached.
    pub fn has_weights(&self) -> bool {
        match &self.kind {
            LayerKind::Conv(c) => c.params.is_some(),
            LayerKind::Linear(l) => l.params.is_some(),
            LayerKind::BatchNorm(b) => b.params.is_some(),
            LayerKind::ResidualAdd {
                shortcut: Some(s), ..
            } => s.conv.params.is_some() && s.bn.as_ref().is_none_or(|b| b.params.is_some()),
            _ => true,
        }
    }
}

/// Activation shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { c: usize, h: usize, w: usize },
    /// A feature vector; `from` remembers the map it was flattened from.
    Flat { n: usize, from: Option<(usize, usize, usize)> },
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial { c, h, w } => c * h * w,
            FeatureShape::Flat { n, .. } => n,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            FeatureShape::Spatial { c, .. } => c,
            FeatureShape::Flat { n, .. } => n,
        }
    }

    fn same_layout(&self, other: &FeatureShape) -> bool {
        match (self, other) {
            (FeatureShape::Spatial { .. }, FeatureShape::Spatial { .. }) => self == other,
            (FeatureShape::Flat { n: a, .. }, FeatureShape::Flat { n: b, .. }) => a == b,
            _ => false,
        }
    }
}

/// How a multiply–add pair is counted in FLOP totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply–add is one operation. Reproduces the published VGG-16
    /// CIFAR-10 figures (3.14e8 per image for the baseline).
    #[default]
    MultiplyAddAsOne,
    /// A multiply–add counts as two operations.
    MultiplyAddAsTwo,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::MultiplyAddAsOne => 1,
            FlopConvention::MultiplyAddAsTwo => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape `C × H × W`.
    pub input_shape: [usize; 3],
    pub bn_eps: f64,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Self {
        Self {
            input_shape,
            bn_eps: DEFAULT_BN_EPS,
            layers,
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Total trainable parameters. Batch-norm contributes its affine
    /// scale and shift only; running statistics are not counted.
    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn has_weights(&self) -> bool {
        self.layers.iter().all(Layer::has_weights)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Index of the residual sum owning the shortcut convolution `id`.
    pub fn shortcut_position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| {
            matches!(&l.kind, LayerKind::ResidualAdd { shortcut: Some(s), .. } if s.id == id)
        })
    }

    pub fn shortcut(&self, id: &str) -> Option<&Shortcut> {
        self.shortcut_position(id).and_then(|i| match &self.layers[i].kind {
            LayerKind::ResidualAdd { shortcut: Some(s), .. } => Some(s.as_ref()),
            _ => None,
        })
    }

    /// Shape entering layer `idx`.
    pub fn input_shape_at(&self, shapes: &[FeatureShape], idx: usize) -> FeatureShape {
        match idx {
            0 => {
                let [c, h, w] = self.input_shape;
                FeatureShape::Spatial { c, h, w }
            }
            i => shapes[i - 1],
        }
    }

    /// Convolution geometry under which layer `id` is lifted to a regression.
    ///
    /// Convolutions (including shortcut projections) use their own geometry.
    /// A dense layer reading a flattened `C × H × W` map with `H == W` odd is
    /// treated as an `H × H` convolution over `C` channels, so its channels are
    /// whole feature maps; any other dense layer is a 1×1 convolution over its
    /// input features.
    pub fn lifted_geometry(&self, id: &str) -> Result<ConvGeometry> {
        if let Some(s) = self.shortcut(id) {
            let c = &s.conv;
            return ConvGeometry::new(c.kernel, c.stride, c.padding, c.in_channels, c.out_channels);
        }
        let idx = self
            .position(id)
            .ok_or_else(|| Error::Structural(format!("no layer named {id}")))?;
        match &self.layers[idx].kind {
            LayerKind::Conv(c) => {
                ConvGeometry::new(c.kernel, c.stride, c.padding, c.in_channels, c.out_channels)
            }
            LayerKind::Linear(l) => {
                let shapes = self.shapes()?;
                match self.input_shape_at(&shapes, idx) {
                    FeatureShape::Flat {
                        from: Some((c, h, w)),
                        ..
                    } if h == w && h % 2 == 1 => ConvGeometry::new(h, 1, 0, c, l.out_features),
                    _ => ConvGeometry::dense(l.in_features, l.out_features),
                }
            }
            other => Err(Error::Structural(format!(
                "layer {id} is a {} layer; only conv and linear layers can be sparsified",
                other.name()
            ))),
        }
    }

    /// Output shape of every layer for the declared input shape.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        self.shapes_for(self.input_shape)
    }

    pub fn shapes_for(&self, input: [usize; 3]) -> Result<Vec<FeatureShape>> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.id.as_str()) {
                return Err(Error::Structural(format!("duplicate layer id {}", l.id)));
            }
            if let LayerKind::ResidualAdd {
                shortcut: Some(s), ..
            } = &l.kind
            {
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Structural(format!("duplicate layer id {}", s.id)));
                }
            }
        }

        let [c, h, w] = input;
        let mut shape = FeatureShape::Spatial { c, h, w };
        let mut from = String::from("<input>");
        let mut saved: HashMap<&str, (FeatureShape, &str)> = HashMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = step_shape(layer, shape, &from, &mut saved)?;
            from.clone_from(&layer.id);
            out.push(shape);
        }
        if let Some(tag) = saved.keys().next() {
            return Err(Error::Structural(format!(
                "residual tag {tag} is opened but never added"
            )));
        }
        Ok(out)
    }

    /// FLOPs of one forward pass per layer, for one input sample.
    pub fn layer_flops(&self, input: [usize; 3], convention: FlopConvention) -> Result<Vec<u64>> {
        let shapes = self.shapes_for(input)?;
        let f = convention.factor();
        let [c, h, w] = input;
        let mut prev = FeatureShape::Spatial { c, h, w };
        let mut saved: HashMap<&str, FeatureShape> = HashMap::new();
        let mut flops = Vec::with_capacity(self.layers.len());
        for (layer, &shape) in self.layers.iter().zip(&shapes) {
            let n = shape.numel() as u64;
            let ops = match &layer.kind {
                LayerKind::Conv(conv) => conv_macs(conv, &shape) * f,
                LayerKind::Linear(lin) => lin.in_features as u64 * lin.out_features as u64 * f,
                LayerKind::MaxPool(_) | LayerKind::AvgPool(_) | LayerKind::Relu | LayerKind::BatchNorm(_) => n,
                LayerKind::Flatten => 0,
                LayerKind::ResidualBegin { tag } => {
                    saved.insert(tag, prev);
                    0
                }
                LayerKind::ResidualAdd { tag, shortcut } => {
                    let skip = saved.remove(tag.as_str()).expect("validated");
                    let mut ops = n;
                    if let Some(s) = shortcut {
                        let sc_shape = match skip {
                            FeatureShape::Spatial { h, w, .. } => {
                                let (oh, ow) = s.conv.output_hw(h, w).expect("validated");
                                FeatureShape::Spatial { c: s.conv.out_channels, h: oh, w: ow }
                            }
                            flat => flat,
                        };
                        ops += conv_macs(&s.conv, &sc_shape) * f;
                        if s.bn.is_some() {
                            ops += sc_shape.numel() as u64;
                        }
                    }
                    ops
                }
            };
            flops.push(ops);
            prev = shape;
        }
        Ok(flops)
    }

    pub fn flops(&self, input: [usize; 3], convention: FlopConvention) -> Result<u64> {
        Ok(self.layer_flops(input, convention)?.iter().sum())
    }
}

/// Fraction of parameters removed going from `baseline` to `model` params.
pub fn sparsity(baseline: u64, model: u64) -> Result<f64> {
    if baseline == 0 || model > baseline {
        return Err(Error::Domain(format!(
            "sparsity needs 0 <= model <= baseline and baseline > 0, got model {model}, baseline {baseline}"
        )));
    }
    Ok(1.0 - model as f64 / baseline as f64)
}

fn conv_macs(conv: &Conv2d, out: &FeatureShape) -> u64 {
    let (oh, ow) = match *out {
        FeatureShape::Spatial { h, w, .. } => (h, w),
        FeatureShape::Flat { .. } => (1, 1),
    };
    (conv.kernel * conv.kernel) as u64
        * conv.in_channels as u64
        * conv.out_channels as u64
        * (oh * ow) as u64
}

fn conv_shape(id: &str, conv: &Conv2d, shape: FeatureShape, from: &str) -> Result<FeatureShape> {
    conv.check_params(id)?;
    match shape {
        FeatureShape::Spatial { c, h, w } => {
            if c != conv.in_channels {
                return Err(Error::Structural(format!(
                    "layer {id} expects {} input channels but layer {from} produces {c}",
                    conv.in_channels
                )));
            }
            let (oh, ow) = conv.output_hw(h, w).ok_or_else(|| {
                Error::Structural(format!(
                    "layer {id}: kernel {} does not fit the {h}x{w} output of layer {from}",
                    conv.kernel
                ))
            })?;
            Ok(FeatureShape::Spatial {
                c: conv.out_channels,
                h: oh,
                w: ow,
            })
        }
        FeatureShape::Flat { .. } => Err(Error::Structural(format!(
            "layer {id} is a convolution but layer {from} produces a flat vector"
        ))),
    }
}

fn step_shape<'a>(
    layer: &'a Layer,
    shape: FeatureShape,
    from: &str,
    saved: &mut HashMap<&'a str, (FeatureShape, &'a str)>,
) -> Result<FeatureShape> {
    let id = layer.id.as_str();
    match &layer.kind {
        LayerKind::Conv(conv) => conv_shape(id, conv, shape, from),
        LayerKind::Linear(lin) => {
            lin.check_params(id)?;
            match shape {
                FeatureShape::Flat { n, .. } if n == lin.in_features => Ok(FeatureShape::Flat {
                    n: lin.out_features,
                    from: None,
                }),
                FeatureShape::Flat { n, .. } => Err(Error::Structural(format!(
                    "layer {id} expects {} input features but layer {from} produces {n}",
                    lin.in_features
                ))),
                FeatureShape::Spatial { .. } => Err(Error::Structural(format!(
                    "layer {id} is dense but layer {from} produces a spatial map; insert a flatten"
                ))),
            }
        }
        LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => match shape {
            FeatureShape::Spatial { c, h, w } if p.kernel > 0 && p.stride > 0 && h >= p.kernel && w >= p.kernel => {
                Ok(FeatureShape::Spatial {
                    c,
                    h: (h - p.kernel) / p.stride + 1,
                    w: (w - p.kernel) / p.stride + 1,
                })
            }
            _ => Err(Error::Structural(format!(
                "layer {id}: pooling window {}x{} stride {} does not apply to the output of layer {from}",
                p.kernel, p.kernel, p.stride
            ))),
        },
        LayerKind::Relu => Ok(shape),
        LayerKind::BatchNorm(bn) => {
            bn.check_params(id)?;
            if shape.channels() != bn.channels {
                return Err(Error::Structural(format!(
                    "layer {id} normalizes {} channels but layer {from} produces {}",
                    bn.channels,
                    shape.channels()
                )));
            }
            Ok(shape)
        }
        LayerKind::Flatten => Ok(match shape {
            FeatureShape::Spatial { c, h, w } => FeatureShape::Flat {
                n: c * h * w,
                from: Some((c, h, w)),
            },
            flat => flat,
        }),
        LayerKind::ResidualBegin { tag } => {
            if saved.insert(tag.as_str(), (shape, id)).is_some() {
                return Err(Error::Structural(format!(
                    "layer {id}: residual tag {tag} is already open"
                )));
            }
            Ok(shape)
        }
        LayerKind::ResidualAdd { tag, shortcut } => {
            let (skip, begin) = saved.remove(tag.as_str()).ok_or_else(|| {
                Error::Structural(format!("layer {id}: residual tag {tag} was never opened"))
            })?;
            let skip = match shortcut {
                Some(s) => {
                    let out = conv_shape(&s.id, &s.conv, skip, begin)?;
                    if let Some(bn) = &s.bn {
                        bn.check_params(&s.id)?;
                        if bn.channels != out.channels() {
                            return Err(Error::Structural(format!(
                                "layer {}: shortcut batchnorm has {} channels, conv produces {}",
                                s.id,
                                bn.channels,
                                out.channels()
                            )));
                        }
                    }
                    out
                }
                None => skip,
            };
            if !skip.same_layout(&shape) {
                return Err(Error::Structural(format!(
                    "layer {id}: shortcut from layer {begin} has shape {skip:?} but layer {from} produces {shape:?}"
                )));
            }
            Ok(shape)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn lenet_counts_match_architecture_table() {
        let net = zoo::lenet();
        net.validate().unwrap();
        assert_eq!(net.param_count(), 61_706);
        assert_eq!(net.layer("conv1").unwrap().param_count(), 2_416);
        assert_eq!(net.layer("conv0").unwrap().param_count(), 156);
        assert_eq!(net.layer("fc1").unwrap().param_count(), 48_120);
        assert_eq!(net.layer("fc2").unwrap().param_count(), 10_164);
        assert_eq!(net.layer("fc3").unwrap().param_count(), 850);
    }

    #[test]
    fn chain_errors_name_both_layers() {
        let mut net = zoo::lenet();
        let pos = net.position("fc1").unwrap();
        if let LayerKind::Linear(l) = &mut net.layers[pos].kind {
            l.in_features = 399;
        }
        let err = net.validate().unwrap_err().to_string();
        assert!(err.contains("fc1") && err.contains("flatten"), "{err}");

        let mut net = zoo::lenet();
        let pos = net.position("conv1").unwrap();
        if let LayerKind::Conv(c) = &mut net.layers[pos].kind {
            c.in_channels = 5;
        }
        let err = net.validate().unwrap_err().to_string();
        assert!(err.contains("conv1"), "{err}");
    }

    #[test]
    fn residual_tags_must_balance() {
        let layers = vec![
            Layer::new("b", LayerKind::ResidualBegin { tag: "t".into() }),
            Layer::new("r", LayerKind::Relu),
        ];
        assert!(NetworkSpec::new([1, 4, 4], layers).validate().is_err());
        let layers = vec![Layer::new(
            "a",
            LayerKind::ResidualAdd {
                tag: "t".into(),
                shortcut: None,
            },
        )];
        assert!(NetworkSpec::new([1, 4, 4], layers).validate().is_err());
    }

    #[test]
    fn residual_shortcut_must_match_main_branch() {
        let layers = vec![
            Layer::new("b", LayerKind::ResidualBegin { tag: "t".into() }),
            Layer::new("c", LayerKind::Conv(Conv2d::new(2, 4, 3, 1, 1, false))),
            Layer::new(
                "a",
                LayerKind::ResidualAdd {
                    tag: "t".into(),
                    shortcut: None,
                },
            ),
        ];
        let err = NetworkSpec::new([2, 4, 4], layers.clone()).validate().unwrap_err();
        assert!(err.to_string().contains('b'));
        let mut fixed = layers;
        fixed[2].kind = LayerKind::ResidualAdd {
            tag: "t".into(),
            shortcut: Some(Box::new(Shortcut {
                id: "sc".into(),
                conv: Conv2d::new(2, 4, 1, 1, 0, false),
                bn: Some(BatchNorm::new(4)),
            })),
        };
        let net = NetworkSpec::new([2, 4, 4], fixed);
        net.validate().unwrap();
        assert_eq!(net.param_count(), 72 + 8 + 8);
    }

    #[test]
    fn single_pointwise_conv_costs_one_multiply_add() {
        let net = NetworkSpec::new(
            [1, 1, 1],
            vec![Layer::new("c", LayerKind::Conv(Conv2d::new(1, 1, 1, 1, 0, false)))],
        );
        assert_eq!(net.flops([1, 1, 1], FlopConvention::MultiplyAddAsTwo).unwrap(), 2);
        assert_eq!(net.flops([1, 1, 1], FlopConvention::MultiplyAddAsOne).unwrap(), 1);
    }

    #[test]
    fn lenet_conv1_flops_match_scalar_loop() {
        let net = zoo::lenet();
        let per_layer = net.layer_flops([1, 28, 28], FlopConvention::MultiplyAddAsTwo).unwrap();
        let idx = net.position("conv1").unwrap();
        // Count multiply-adds of a 6→16, 5x5 convolution on a 14x14 map, one by one.
        let mut ops = 0u64;
        for _m in 0..16 {
            for y in 0..10 {
                for x in 0..10 {
                    for _d in 0..6 {
                        for i in 0..5 {
                            for j in 0..5 {
                                assert!(y + i < 14 && x + j < 14);
                                ops += 2;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(ops, 480_000);
        assert_eq!(per_layer[idx], ops);
    }

    #[test]
    fn flops_reject_mismatched_input() {
        let net = zoo::lenet();
        assert!(net.flops([3, 28, 28], FlopConvention::default()).is_err());
    }

    #[test]
    fn weight_shapes_are_checked() {
        let mut net = zoo::lenet();
        let pos = net.position("conv0").unwrap();
        if let LayerKind::Conv(c) = &mut net.layers[pos].kind {
            c.params = Some(ConvParams {
                weight: Tensor::zeros(vec![6, 1, 3, 3]),
                bias: Some(vec![0.0; 6]),
            });
        }
        assert!(net.validate().is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(100, 100).unwrap(), 0.0);
        assert_eq!(sparsity(100, 25).unwrap(), 0.75);
        assert!((sparsity(61_706, 36_498).unwrap() - 0.408_518_2).abs() < 1e-6);
        assert!(matches!(sparsity(10, 11), Err(Error::Domain(_))));
        assert!(sparsity(0, 0).is_err());
    }

    fn stored_values(net: &NetworkSpec) -> u64 {
        let conv = |c: &Conv2d| {
            let p = c.params.as_ref().unwrap();
            p.weight.len() + p.bias.as_ref().map_or(0, Vec::len)
        };
        let bn = |b: &BatchNorm| {
            let p = b.params.as_ref().unwrap();
            p.scale.len() + p.shift.len()
        };
        let n: usize = net
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv(c) => conv(c),
                LayerKind::Linear(x) => {
                    let p = x.params.as_ref().unwrap();
                    p.weight.len() + p.bias.as_ref().map_or(0, Vec::len)
                }
                LayerKind::BatchNorm(b) => bn(b),
                LayerKind::ResidualAdd { shortcut: Some(s), .. } => conv(&s.conv) + s.bn.as_ref().map_or(0, bn),
                _ => 0,
            })
            .sum();
        n as u64
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]
        #[test]
        fn param_count_matches_stored_values(
            widths in proptest::collection::vec((1usize..24, proptest::bool::ANY), 1..7),
            classes in 1usize..12,
            seed in 0u64..1000,
        ) {
            let mut pools = 0;
            let mut cfg = Vec::new();
            for (w, pool) in widths {
                cfg.push(zoo::VggItem::Conv(w));
                if pool && pools < 5 {
                    cfg.push(zoo::VggItem::MaxPool);
                    pools += 1;
                }
            }
            let mut net = zoo::vgg(&cfg, classes);
            let fc = net.layers.pop().unwrap();
            let flat = net.shapes().unwrap().last().unwrap().numel();
            net.layers.push(fc);
            if let LayerKind::Linear(l) = &mut net.layers.last_mut().unwrap().kind {
                l.in_features = flat;
            }
            zoo::init_weights(&mut net, seed);
            net.validate().unwrap();
            proptest::prop_assert_eq!(net.param_count(), stored_values(&net));
        }
    }

    #[test]
    fn resnet_param_count_matches_stored_values() {
        let mut net = zoo::resnet18();
        zoo::init_weights(&mut net, 0);
        assert_eq!(net.param_count(), stored_values(&net));
    }
}
