use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy)]
enum Init {
    /// N(0, 1/fan_in)
    Fan(usize),
    Normal(f64),
    Zero,
    One,
}

fn block_shapes(cfg: &ModelConfig, prefix: &str, d_in: usize, radius: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d;
    let mut out = Vec::new();
    if cfg.use_input_projection {
        out.push((format!("{prefix}.proj"), vec![d_in, d], Init::Fan(d_in)));
    }
    out.push((format!("{prefix}.pos"), vec![2 * radius + 1, d], Init::Normal(cfg.pos_init_std)));
    for l in 0..cfg.n_layers {
        for h in 0..cfg.heads {
            for kind in ["q", "k", "v"] {
                out.push((format!("{prefix}.l{l}.h{h}.{kind}"), vec![d, cfg.head_dim()], Init::Fan(d)));
            }
        }
        if cfg.output_projection {
            out.push((format!("{prefix}.l{l}.out"), vec![d, d], Init::Fan(d)));
        }
        if cfg.layer_norm {
            out.push((format!("{prefix}.l{l}.ln_gamma"), vec![d], Init::One));
            out.push((format!("{prefix}.l{l}.ln_beta"), vec![d], Init::Zero));
        }
    }
    out.push((format!("{prefix}.g.w1"), vec![d, cfg.d_inner], Init::Fan(d)));
    out.push((format!("{prefix}.g.b1"), vec![cfg.d_inner], Init::Zero));
    out.push((format!("{prefix}.g.w2"), vec![cfg.d_inner, d], Init::Fan(cfg.d_inner)));
    out.push((format!("{prefix}.g.b2"), vec![d], Init::Zero));
    out
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = block_shapes(cfg, "clip", cfg.d_v, cfg.clip_radius());
    out.push(("text.w1".into(), vec![cfg.d_w, cfg.d_text_hidden], Init::Fan(cfg.d_w)));
    out.push(("text.b1".into(), vec![cfg.d_text_hidden], Init::Zero));
    out.push(("text.w2".into(), vec![cfg.d_text_hidden, cfg.d], Init::Fan(cfg.d_text_hidden)));
    out.push(("text.b2".into(), vec![cfg.d], Init::Zero));
    if let Some(r) = cfg.text_radius() {
        out.extend(block_shapes(cfg, "textctx", cfg.d, r));
    }
    out
}

/// Every parameter name and shape implied by a config, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub(super) fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zero => vec![T::zero(); n],
            Init::One => vec![T::one(); n],
            Init::Normal(s) => sample(rng, n, s)?,
            Init::Fan(fan) => sample(rng, n, 1.0 / (fan as f64).sqrt())?,
        };
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

fn sample<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Result<Vec<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("initializer: {e}")))?;
    Ok((0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect())
}
