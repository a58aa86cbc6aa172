//! Clip-context and text-context transformer encoders.

mod checkpoint;
mod config;
mod encoder;
mod init;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, CONFIG_FILE, PARAMS_BIN, PARAMS_JSON};
pub use config::{Aggregation, ContextMode, ModelConfig};
pub use encoder::{AttentionTrace, ClipAt, Mode};
pub use init::param_shapes;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Encoder configuration plus its learnable parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; see [`param_shapes`] for the layout.
    pub fn new<R: rand::Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init::init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Cosine similarity of two unit vectors.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    crate::tensor::kernels::dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        let u = [0.6f64, 0.8];
        let neg = [-0.6f64, -0.8];
        assert_eq!(similarity(&u, &u), 1.0);
        assert_eq!(similarity(&u, &neg), -1.0);
        assert_eq!(similarity(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
    }
}
