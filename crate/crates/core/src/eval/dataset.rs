//! Labelled image sets: MNIST IDX files or a pair of TDF tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TDF_MAGIC};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct EvalDataset {
    /// `N × C × H × W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl EvalDataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("images must be N x C x H x W, got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Shape("dataset holds no images".into()));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let images = Tensor::new(vec![n, s[1], s[2], s[3]], self.images.data()[..n * per].to_vec())?;
        Self::new(images, self.labels[..n].to_vec())
    }

    /// Loads images and labels, detecting TDF or IDX format per file.
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let images = load_images(images)?;
        let labels = read_labels(labels.as_ref())?;
        Self::new(images, labels)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Idx<'a> {
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<Idx<'a>> {
    let be = |i: usize| -> Option<u32> {
        bytes.get(i..i + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
    };
    let found = be(0).ok_or_else(|| Error::format(path, "file too short for an IDX header"))?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("IDX magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be(4 + 4 * i).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::format(path, "truncated IDX dimensions"))?;
    let payload = &bytes[4 + 4 * ndim..];
    let want: usize = dims.iter().product();
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("IDX payload has {} bytes, dimensions need {want}", payload.len()),
        ));
    }
    Ok(Idx { dims, payload })
}

/// Reads an image tensor (TDF, 3-d or 4-d) or an IDX image file as `N × C × H × W`.
pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.starts_with(TDF_MAGIC) {
        let t = Tensor::from_bytes(&bytes, path)?;
        return match t.ndim() {
            4 => Ok(t),
            3 => {
                let s = t.shape().to_vec();
                t.reshape(vec![s[0], 1, s[1], s[2]])
            }
            _ => Err(Error::format(path, format!("image tensor must be 3-d or 4-d, got {:?}", t.shape()))),
        };
    }
    let idx = parse_idx(&bytes, IDX_IMAGES, path)?;
    let data = idx.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![idx.dims[0], 1, idx.dims[1], idx.dims[2]], data)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    if bytes.starts_with(TDF_MAGIC) {
        let t = Tensor::from_bytes(&bytes, path)?;
        if t.ndim() != 1 {
            return Err(Error::format(path, "label tensor must be 1-d"));
        }
        return t
            .data()
            .iter()
            .map(|&v| {
                (v >= 0.0 && v.fract() == 0.0)
                    .then_some(v as usize)
                    .ok_or_else(|| Error::format(path, format!("label {v} is not a class index")))
            })
            .collect();
    }
    let idx = parse_idx(&bytes, IDX_LABELS, path)?;
    Ok(idx.payload.iter().map(|&b| usize::from(b)).collect())
}
