use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameters of a square-kernel convolution.
///
/// `kernel == 1` describes a fully connected layer applied per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    #[serde(alias = "k")]
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(alias = "D")]
    pub in_channels: usize,
    #[serde(alias = "M")]
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        kernel: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let g = Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        };
        g.validate()?;
        Ok(g)
    }

    /// Geometry of a dense layer viewed as a 1x1 convolution.
    pub fn dense(in_features: usize, out_features: usize) -> Result<Self> {
        Self::new(1, 1, 0, in_features, out_features)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel extent must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be positive, got D={} M={}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// k², the number of taps per input channel.
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Length of one lifted feature column, k²·D.
    pub fn lifted_len(&self) -> usize {
        self.taps() * self.in_channels
    }

    /// Output extent along one spatial axis, or an error when the kernel
    /// does not fit into the padded input.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} does not fit input extent {} with padding {}",
                self.kernel, input, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}
