//! Captured activations of a single layer.
//!
//! On disk a dump is a directory holding `meta.json`, `X.tdf` and `Y.tdf`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const INPUT_FILE: &str = "X.tdf";
pub const OUTPUT_FILE: &str = "Y.tdf";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpMeta {
    pub layer_id: String,
    pub geometry: ConvGeometry,
}

/// Input `X` (T×D×H×W) and output `Y` (T×M×H'×W') of one layer.
#[derive(Debug, Clone)]
pub struct LayerDump {
    pub layer_id: String,
    pub geometry: ConvGeometry,
    pub x: Tensor,
    pub y: Tensor,
}

impl LayerDump {
    pub fn new(layer_id: impl Into<String>, geometry: ConvGeometry, x: Tensor, y: Tensor) -> Result<Self> {
        let dump = Self {
            layer_id: layer_id.into(),
            geometry,
            x,
            y,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let g = &self.geometry;
        let (xs, ys) = (self.x.shape(), self.y.shape());
        if xs.len() != 4 || ys.len() != 4 {
            return Err(Error::Shape(format!(
                "dump {}: X and Y must be 4-d, got {:?} and {:?}",
                self.layer_id, xs, ys
            )));
        }
        if xs[0] != ys[0] {
            return Err(Error::Shape(format!(
                "dump {}: X has {} samples but Y has {}",
                self.layer_id, xs[0], ys[0]
            )));
        }
        if xs[0] == 0 {
            return Err(Error::Shape(format!("dump {} holds no samples", self.layer_id)));
        }
        if xs[1] != g.in_channels || ys[1] != g.out_channels {
            return Err(Error::Shape(format!(
                "dump {}: channels X={} Y={} disagree with geometry D={} M={}",
                self.layer_id, xs[1], ys[1], g.in_channels, g.out_channels
            )));
        }
        let (oh, ow) = (g.output_extent(xs[2])?, g.output_extent(xs[3])?);
        if ys[2] != oh || ys[3] != ow {
            return Err(Error::Shape(format!(
                "dump {}: Y spatial extent {}x{} but geometry implies {}x{}",
                self.layer_id, ys[2], ys[3], oh, ow
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.x.shape()[2], self.x.shape()[3])
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.y.shape()[2], self.y.shape()[3])
    }

    /// Number of (sample, row, column) output positions, T·H'·W'.
    pub fn num_positions(&self) -> usize {
        let (h, w) = self.output_hw();
        self.samples() * h * w
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DumpMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: meta_path.clone(),
            source: e,
        })?;
        let x = Tensor::load(dir.join(INPUT_FILE))?;
        let y = Tensor::load(dir.join(OUTPUT_FILE))?;
        Self::new(meta.layer_id, meta.geometry, x, y)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DumpMeta {
            layer_id: self.layer_id.clone(),
            geometry: self.geometry,
        };
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
        self.x.save(dir.join(INPUT_FILE))?;
        self.y.save(dir.join(OUTPUT_FILE))
    }
}
