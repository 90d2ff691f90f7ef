//! The full segmentation network: encoder plus the configured decoder.

use crate::decoder::Decoder;
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Module, ParamSpec, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct HbFormer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl HbFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new("encoder", &config)?,
            decoder: Decoder::new("decoder", &config)?,
            config,
        })
    }

    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.specs(), seed)
    }

    /// `image [B, C_in, S, S] -> logits [B, num_classes, S, S]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let shape = s.graph.shape(image);
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.img_size || shape[3] != c.img_size {
            return Err(Error::invalid(
                "hbformer",
                format!(
                    "expected [B, {}, {}, {}], got {shape:?}",
                    c.in_channels, c.img_size, c.img_size
                ),
            ));
        }
        let enc = self.encoder.forward(s, image)?;
        self.decoder.forward(s, &enc)
    }

    /// Eval-mode logits for a batch of images, without recording gradients.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::with_graph(Graph::new(), store, false);
        s.freeze_params();
        let x = s.graph.constant(images.shape().to_vec(), images.data().to_vec())?;
        let y = self.forward(&mut s, x)?;
        Ok(s.graph.tensor(y))
    }
}

impl Module for HbFormer {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.encoder.param_specs(out);
        self.decoder.param_specs(out);
    }
}
