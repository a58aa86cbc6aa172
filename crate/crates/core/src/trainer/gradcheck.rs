use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch_loss;
use crate::dataset::{generate_synthetic, sample_batch, GenConfig, Split};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ContextMode, Mode, Model, ModelConfig};
use crate::tensor::{finite_diff_check, GradCheckReport};

/// Size presets for [`toy_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyDims {
    /// d=16, m=2, two heads, one layer, batch of 4.
    Small,
    /// d=8, m=1; for quick smoke runs.
    Tiny,
}

impl FromStr for ToyDims {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown gradcheck dims {other:?} (small|tiny)"))),
        }
    }
}

impl fmt::Display for ToyDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Small => "small",
            Self::Tiny => "tiny",
        })
    }
}

/// Central-difference check of the full training loss (both context
/// branches, all three loss terms) over every parameter of a toy model, in
/// f64. Dropout is off so the loss is deterministic.
pub fn toy_gradcheck(seed: u64, dims: ToyDims) -> Result<GradCheckReport> {
    let (d, m) = match dims {
        ToyDims::Small => (16, 2),
        ToyDims::Tiny => (8, 1),
    };
    let gen = GenConfig {
        n_videos: 3,
        clips_per_video: 6,
        test_clips: 6,
        d_v: d,
        d_w: d,
        n_topics: 3,
        optional_steps: 1,
        ambiguity: 0.5,
        ..GenConfig::default()
    };
    let data = generate_synthetic(&gen, seed)?;
    let cfg = ModelConfig {
        m,
        d,
        d_v: d,
        d_w: d,
        heads: 2,
        n_layers: 1,
        d_inner: 2 * d,
        d_text_hidden: 2 * d,
        context_mode: ContextMode::Both,
        pos_init_std: 0.1,
        ..ModelConfig::default()
    };
    // A moderate temperature keeps the softmax terms away from saturation,
    // where central differences lose all precision.
    let loss = LossConfig { tau: 0.2, ..LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Model<f64> = Model::new(cfg, &mut rng)?;
    let batch = sample_batch(&data, Split::Train, 4, m, loss.k_neg, &mut rng)?;
    finite_diff_check(
        |g, params| {
            let probe = Model { config: model.config.clone(), params: params.clone() };
            batch_loss(&probe, g, &batch, &loss, &mut Mode::Eval).map(|(v, _)| v)
        },
        &model.params,
        1e-3,
    )
}
