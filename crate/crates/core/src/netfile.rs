//! `net.json` persistence. The JSON file lists layers; each weight tensor is
//! stored in its own TDF file next to it and referenced by file name.
//!
//! ```json
//! {"input_shape": [1, 28, 28], "bn_eps": 1e-5, "layers": [
//!   {"id": "conv0", "type": "conv", "in_channels": 1, "out_channels": 6,
//!    "kernel": 5, "stride": 1, "padding": 2, "bias": true,
//!    "tensors": {"weight": "conv0.weight.tdf", "bias": "conv0.bias.tdf"}},
//!   {"id": "relu0", "type": "relu"}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    BatchNorm, BnParams, Conv2d, ConvParams, Layer, LayerKind, Linear, LinearParams, NetworkSpec, Pool,
    Shortcut, DEFAULT_BN_EPS,
};
use crate::tensor::Tensor;

type TensorMap = BTreeMap<String, String>;

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    input_shape: [usize; 3],
    #[serde(default = "default_eps")]
    bn_eps: f64,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    id: String,
    #[serde(flatten)]
    kind: KindRecord,
}

#[derive(Serialize, Deserialize)]
struct ConvRecord {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    #[serde(default = "yes")]
    bias: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct LinearRecord {
    in_features: usize,
    out_features: usize,
    #[serde(default = "yes")]
    bias: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct PoolRecord {
    kernel: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct BnRecord {
    channels: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct ShortcutRecord {
    id: String,
    conv: ConvRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum KindRecord {
    Conv(ConvRecord),
    Linear(LinearRecord),
    #[serde(rename = "maxpool")]
    MaxPool(PoolRecord),
    #[serde(rename = "avgpool")]
    AvgPool(PoolRecord),
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm(BnRecord),
    Flatten,
    ResidualBegin {
        tag: String,
    },
    ResidualAdd {
        tag: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shortcut: Option<ShortcutRecord>,
    },
}

struct Writer<'a> {
    dir: &'a Path,
}

impl Writer<'_> {
    fn put(&self, map: &mut TensorMap, id: &str, role: &str, t: &Tensor) -> Result<()> {
        let name = format!("{id}.{role}.tdf");
        t.save(self.dir.join(&name))?;
        map.insert(role.to_string(), name);
        Ok(())
    }

    fn put_vec(&self, map: &mut TensorMap, id: &str, role: &str, v: &[f64]) -> Result<()> {
        self.put(map, id, role, &Tensor::new(vec![v.len()], v.to_vec())?)
    }

    fn conv(&self, id: &str, c: &Conv2d) -> Result<ConvRecord> {
        let mut tensors = TensorMap::new();
        if let Some(p) = &c.params {
            self.put(&mut tensors, id, "weight", &p.weight)?;
            if let Some(b) = &p.bias {
                self.put_vec(&mut tensors, id, "bias", b)?;
            }
        }
        Ok(ConvRecord {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bias: c.bias,
            tensors,
        })
    }

    fn bn(&self, id: &str, b: &BatchNorm) -> Result<BnRecord> {
        let mut tensors = TensorMap::new();
        if let Some(p) = &b.params {
            self.put_vec(&mut tensors, id, "scale", &p.scale)?;
            self.put_vec(&mut tensors, id, "shift", &p.shift)?;
            self.put_vec(&mut tensors, id, "running_mean", &p.running_mean)?;
            self.put_vec(&mut tensors, id, "running_var", &p.running_var)?;
        }
        Ok(BnRecord {
            channels: b.channels,
            tensors,
        })
    }

    fn layer(&self, layer: &Layer) -> Result<KindRecord> {
        let id = layer.id.as_str();
        Ok(match &layer.kind {
            LayerKind::Conv(c) => KindRecord::Conv(self.conv(id, c)?),
            LayerKind::Linear(l) => {
                let mut tensors = TensorMap::new();
                if let Some(p) = &l.params {
                    self.put(&mut tensors, id, "weight", &p.weight)?;
                    if let Some(b) = &p.bias {
                        self.put_vec(&mut tensors, id, "bias", b)?;
                    }
                }
                KindRecord::Linear(LinearRecord {
                    in_features: l.in_features,
                    out_features: l.out_features,
                    bias: l.bias,
                    tensors,
                })
            }
            LayerKind::MaxPool(p) => KindRecord::MaxPool(PoolRecord {
                kernel: p.kernel,
                stride: p.stride,
            }),
            LayerKind::AvgPool(p) => KindRecord::AvgPool(PoolRecord {
                kernel: p.kernel,
                stride: p.stride,
            }),
            LayerKind::Relu => KindRecord::Relu,
            LayerKind::BatchNorm(b) => KindRecord::BatchNorm(self.bn(id, b)?),
            LayerKind::Flatten => KindRecord::Flatten,
            LayerKind::ResidualBegin { tag } => KindRecord::ResidualBegin { tag: tag.clone() },
            LayerKind::ResidualAdd { tag, shortcut } => KindRecord::ResidualAdd {
                tag: tag.clone(),
                shortcut: shortcut
                    .as_ref()
                    .map(|s| -> Result<ShortcutRecord> {
                        Ok(ShortcutRecord {
                            id: s.id.clone(),
                            conv: self.conv(&s.id, &s.conv)?,
                            bn: s.bn.as_ref().map(|b| self.bn(&format!("{}_bn", s.id), b)).transpose()?,
                        })
                    })
                    .transpose()?,
            },
        })
    }
}

struct Reader<'a> {
    dir: &'a Path,
}

impl Reader<'_> {
    fn get(&self, map: &TensorMap, id: &str, role: &str) -> Result<Option<Tensor>> {
        map.get(role)
            .map(|name| {
                Tensor::load(self.dir.join(name)).map_err(|e| e.in_layer(id))
            })
            .transpose()
    }

    fn get_vec(&self, map: &TensorMap, id: &str, role: &str) -> Result<Vec<f64>> {
        let t = self.get(map, id, role)?.ok_or_else(|| {
            Error::Structural(format!("layer {id}: tensor '{role}' is not listed"))
        })?;
        if t.ndim() != 1 {
            return Err(Error::Structural(format!(
                "layer {id}: tensor '{role}' must be 1-d, got {:?}",
                t.shape()
            )));
        }
        Ok(t.into_data())
    }

    fn conv(&self, id: &str, r: ConvRecord) -> Result<Conv2d> {
        let mut c = Conv2d::new(r.in_channels, r.out_channels, r.kernel, r.stride, r.padding, r.bias);
        c.params = self.conv_params(id, &r.tensors, r.bias)?;
        Ok(c)
    }

    fn conv_params(&self, id: &str, map: &TensorMap, bias: bool) -> Result<Option<ConvParams>> {
        let Some(weight) = self.get(map, id, "weight")? else {
            return Ok(None);
        };
        let bias = if bias || map.contains_key("bias") {
            Some(self.get_vec(map, id, "bias")?)
        } else {
            None
        };
        Ok(Some(ConvParams { weight, bias }))
    }

    fn bn(&self, id: &str, r: BnRecord) -> Result<BatchNorm> {
        let mut b = BatchNorm::new(r.channels);
        if !r.tensors.is_empty() {
            b.params = Some(BnParams {
                scale: self.get_vec(&r.tensors, id, "scale")?,
                shift: self.get_vec(&r.tensors, id, "shift")?,
                running_mean: self.get_vec(&r.tensors, id, "running_mean")?,
                running_var: self.get_vec(&r.tensors, id, "running_var")?,
            });
        }
        Ok(b)
    }

    fn layer(&self, r: LayerRecord) -> Result<Layer> {
        let id = r.id;
        let kind = match r.kind {
            KindRecord::Conv(c) => LayerKind::Conv(self.conv(&id, c)?),
            KindRecord::Linear(l) => {
                let mut lin = Linear::new(l.in_features, l.out_features, l.bias);
                lin.params = self
                    .conv_params(&id, &l.tensors, l.bias)?
                    .map(|p| LinearParams {
                        weight: p.weight,
                        bias: p.bias,
                    });
                LayerKind::Linear(lin)
            }
            KindRecord::MaxPool(p) => LayerKind::MaxPool(Pool {
                kernel: p.kernel,
                stride: p.stride,
            }),
            KindRecord::AvgPool(p) => LayerKind::AvgPool(Pool {
                kernel: p.kernel,
                stride: p.stride,
            }),
            KindRecord::Relu => LayerKind::Relu,
            KindRecord::BatchNorm(b) => LayerKind::BatchNorm(self.bn(&id, b)?),
            KindRecord::Flatten => LayerKind::Flatten,
            KindRecord::ResidualBegin { tag } => LayerKind::ResidualBegin { tag },
            KindRecord::ResidualAdd { tag, shortcut } => LayerKind::ResidualAdd {
                tag,
                shortcut: shortcut
                    .map(|s| -> Result<Box<Shortcut>> {
                        let conv = self.conv(&s.id, s.conv)?;
                        let bn = s.bn.map(|b| self.bn(&s.id, b)).transpose()?;
                        Ok(Box::new(Shortcut { id: s.id, conv, bn }))
                    })
                    .transpose()?,
            },
        };
        Ok(Layer { id, kind })
    }
}

impl NetworkSpec {
    /// Loads a network description; tensor files resolve relative to the
    /// directory holding `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: NetRecord = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let reader = Reader { dir };
        let layers = record
            .layers
            .into_iter()
            .map(|l| reader.layer(l))
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkSpec {
            input_shape: record.input_shape,
            bn_eps: record.bn_eps,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Writes `path` and one TDF per attached tensor into its directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let writer = Writer { dir };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerRecord {
                    id: l.id.clone(),
                    kind: writer.layer(l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = NetRecord {
            input_shape: self.input_shape,
            bn_eps: self.bn_eps,
            layers,
        };
        let text = serde_json::to_string_pretty(&record).expect("network serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn weighted_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        for mut net in [zoo::lenet(), zoo::resnet18()] {
            zoo::init_weights(&mut net, 5);
            let path = tmp.path().join("net.json");
            net.save(&path).unwrap();
            let back = NetworkSpec::load(&path).unwrap();
            assert_eq!(back, net);
        }
    }

    #[test]
    fn architecture_only_file_parses_with_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("net.json");
        fs::write(
            &path,
            r#"{"input_shape": [1, 4, 4], "layers": [
                {"id": "c", "type": "conv", "in_channels": 1, "out_channels": 2, "kernel": 3, "padding": 1},
                {"id": "r", "type": "relu"},
                {"id": "p", "type": "maxpool", "kernel": 2, "stride": 2},
                {"id": "f", "type": "flatten"},
                {"id": "fc", "type": "linear", "in_features": 8, "out_features": 3, "bias": false}
            ]}"#,
        )
        .unwrap();
        let net = NetworkSpec::load(&path).unwrap();
        assert_eq!(net.bn_eps, DEFAULT_BN_EPS);
        assert_eq!(net.param_count(), 18 + 2 + 24);
        assert!(!net.has_weights());
    }

    #[test]
    fn missing_tensor_file_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let mut net = zoo::lenet();
        zoo::init_weights(&mut net, 1);
        let path = tmp.path().join("net.json");
        net.save(&path).unwrap();
        fs::remove_file(tmp.path().join("fc2.weight.tdf")).unwrap();
        let err = NetworkSpec::load(&path).unwrap_err().to_string();
        assert!(err.contains("fc2.weight.tdf"), "{err}");
    }

    #[test]
    fn inconsistent_chain_is_rejected_on_load() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("net.json");
        fs::write(
            &path,
            r#"{"input_shape": [1, 4, 4], "layers": [
                {"id": "c", "type": "conv", "in_channels": 2, "out_channels": 2, "kernel": 3}
            ]}"#,
        )
        .unwrap();
        assert!(matches!(NetworkSpec::load(&path), Err(Error::Structural(_))));
    }
}
