//! The encoder as used by the pipeline: a [`Sequential`] network plus the
//! spec it was built from, with batched image embedding.

use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::Embedder;
use crate::nn::{build_encoder, EncoderSpec, Network, ParamSet, Sequential};
use crate::tensor::Tensor;

const EMBED_CHUNK: usize = 256;

/// Stacks images into an NHWC tensor, mapping `[0, 1]` pixels to `[-1, 1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::Data("images in a batch must share one shape".into()));
        }
        data.extend(img.data.iter().map(|v| 2.0 * v - 1.0));
    }
    Tensor::from_vec(&[images.len(), h, w, c], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub spec: EncoderSpec,
    pub net: Sequential,
}

impl EncoderModel {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::rng_for(seed, "encoder-init", 0);
        let net = build_encoder(&spec, &mut rng)?;
        Ok(EncoderModel { spec, net })
    }

    pub fn from_params(spec: EncoderSpec, params: ParamSet) -> Result<Self> {
        let net = Sequential::with_params(spec.layers()?, params)?;
        Ok(EncoderModel { spec, net })
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let x = images_to_tensor(chunk)?;
            let y = self.net.forward(&x)?;
            for r in 0..y.rows() {
                out.push(y.row(r).iter().map(|v| *v as f64).collect());
            }
        }
        Ok(out)
    }
}

impl Embedder for EncoderModel {
    fn embed(&self, samples: &[&LabeledSample]) -> Result<Vec<Vec<f64>>> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        self.embed_images(&images)
    }
}
