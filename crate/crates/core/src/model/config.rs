use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the encoder reduces a window to one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Centre-slot output of the transformer.
    Mid,
    /// Mean of the readout over all slots.
    OutAvg,
    /// Coordinate-wise max of the readout over all slots.
    OutMax,
    /// Mean of the raw window features, then the single-clip path.
    FeatAvg,
    /// Max of the raw window features, then the single-clip path.
    FeatMax,
}

/// Which modalities see their temporal neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Clip,
    Text,
    Both,
    None,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $var:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($var),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $var { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Aggregation {
    "mid" => Aggregation::Mid,
    "out_avg" => Aggregation::OutAvg,
    "out_max" => Aggregation::OutMax,
    "feat_avg" => Aggregation::FeatAvg,
    "feat_max" => Aggregation::FeatMax,
});

str_enum!(ContextMode {
    "clip" => ContextMode::Clip,
    "text" => ContextMode::Text,
    "both" => ContextMode::Both,
    "none" => ContextMode::None,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Context radius; windows hold `2m+1` slots.
    pub m: usize,
    /// Joint embedding dimension.
    pub d: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub heads: usize,
    pub n_layers: usize,
    /// Hidden width of the readout MLP.
    pub d_inner: usize,
    /// Hidden width of the per-token text layer.
    pub d_text_hidden: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
    pub context_mode: ContextMode,
    pub use_input_projection: bool,
    pub layer_norm: bool,
    pub output_projection: bool,
    /// Standard deviation of the positional-embedding initializer.
    pub pos_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 3,
            d: 512,
            d_v: 1024,
            d_w: 2048,
            heads: 2,
            n_layers: 1,
            d_inner: 2048,
            d_text_hidden: 2048,
            dropout: 0.3,
            aggregation: Aggregation::Mid,
            context_mode: ContextMode::Clip,
            use_input_projection: true,
            layer_norm: false,
            output_projection: false,
            pos_init_std: 0.001,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_v == 0 || self.d_w == 0 || self.d_inner == 0 || self.d_text_hidden == 0 {
            return err("model dimensions must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return err(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.n_layers == 0 {
            return err("need at least one attention layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} not in [0,1)", self.dropout));
        }
        if !self.use_input_projection && self.d_v != self.d {
            return err(format!(
                "without the input projection d_v ({}) must equal d ({})",
                self.d_v, self.d
            ));
        }
        if !(self.pos_init_std >= 0.0) {
            return err("pos_init_std must be nonnegative".into());
        }
        Ok(())
    }

    /// Radius of the clip-side window.
    pub fn clip_radius(&self) -> usize {
        match self.context_mode {
            ContextMode::Clip | ContextMode::Both => self.m,
            ContextMode::Text | ContextMode::None => 0,
        }
    }

    /// Radius of the caption-side window, or `None` for the plain text branch.
    pub fn text_radius(&self) -> Option<usize> {
        match self.context_mode {
            ContextMode::Text | ContextMode::Both => Some(self.m),
            ContextMode::Clip | ContextMode::None => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
