use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, Sequential};
use crate::error::{Error, Result};

/// Architecture of the convolutional encoder.
///
/// Each entry of `channels` is one block named `block{i}` (1-based): a 3x3
/// convolution and ReLU, followed by 2x2 max pooling while the spatial size
/// allows it. The last block ends with global average pooling and a linear
/// projection `block{n}.fc` to `embedding_dim`, which leaves the embedding
/// free to take negative coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub arch: String,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            arch: "conv4".into(),
            embedding_dim: 64,
            input_size: 16,
            input_channels: 1,
            channels: vec![8, 16, 32, 64],
        }
    }
}

impl EncoderSpec {
    pub fn block_names(&self) -> Vec<String> {
        (1..=self.channels.len()).map(|i| format!("block{i}")).collect()
    }

    pub fn layers(&self) -> Result<Vec<Layer>> {
        if self.arch != "conv4" && self.arch != "conv" {
            return Err(Error::Config(format!(
                "unknown encoder architecture `{}`",
                self.arch
            )));
        }
        if self.channels.is_empty() || self.embedding_dim == 0 || self.input_channels == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        let n = self.channels.len();
        let mut layers = Vec::new();
        let mut in_ch = self.input_channels;
        let mut size = self.input_size;
        for (i, &out_ch) in self.channels.iter().enumerate() {
            let name = format!("block{}", i + 1);
            layers.push(Layer::Conv3x3 {
                name: format!("{name}.conv"),
                in_channels: in_ch,
                out_channels: out_ch,
            });
            layers.push(Layer::Relu);
            if i + 1 < n && size >= 4 {
                layers.push(Layer::MaxPool2);
                size /= 2;
            }
            in_ch = out_ch;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear {
            name: format!("block{n}.fc"),
            in_features: in_ch,
            out_features: self.embedding_dim,
            bias: true,
        });
        Ok(layers)
    }
}

pub fn build_encoder<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Result<Sequential> {
    Ok(Sequential::new(spec.layers()?, rng))
}
