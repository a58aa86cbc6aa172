use rand::RngCore;

use super::{Aggregation, Model};
use crate::dataset::{build_context_window, ContextWindow, VideoRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Forward-pass mode. Dropout draws from the training RNG; eval mode is
/// deterministic.
pub enum Mode<'r> {
    Train(&'r mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// A clip addressed by its video and temporal index.
#[derive(Clone, Copy, Debug)]
pub struct ClipAt<'a> {
    pub video: &'a VideoRecord,
    pub index: usize,
}

/// Attention paid by the centre query, indexed `[layer][head][slot]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    /// Head-averaged centre attention of one layer.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let heads = &self.layers[layer];
        let slots = heads[0].len();
        (0..slots)
            .map(|s| heads.iter().map(|h| h[s]).sum::<f64>() / heads.len() as f64)
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Readout {
    Centre(usize),
    Mean,
    Max,
}

struct Encoded {
    out: Var,
    /// Attention nodes per layer and head; empty on the single-clip path.
    attention: Vec<Vec<Var>>,
    slots: usize,
    centre: usize,
}

fn to_scalars<T: Scalar>(src: &[f32], out: &mut Vec<T>) {
    out.extend(src.iter().map(|&v| T::from_f64_lossy(v as f64)));
}

impl<T: Scalar> Model<T> {
    fn param_var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self.params.expect_id(name)?;
        Ok(g.param(&self.params, id))
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Train(rng) => g.dropout(x, self.config.dropout, &mut **rng, true),
            Mode::Eval => Ok(x),
        }
    }

    /// `g(x) + x` with `g` = linear, ReLU, linear.
    fn mlp_residual(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.param_var(g, &format!("{prefix}.g.w1"))?;
        let b1 = self.param_var(g, &format!("{prefix}.g.b1"))?;
        let w2 = self.param_var(g, &format!("{prefix}.g.w2"))?;
        let b2 = self.param_var(g, &format!("{prefix}.g.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w2)?;
        let y = g.add_row_bias(y, b2)?;
        g.add(y, x)
    }

    /// Shared transformer trunk for both context encoders.
    ///
    /// `x` holds `n` consecutive blocks of `slots` rows. With `slots == 1` the
    /// block reads positional row `radius` (offset zero). `single_path`
    /// bypasses the softmax, whose weight is identically one for one slot.
    #[allow(clippy::too_many_arguments)]
    fn encode(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        n: usize,
        slots: usize,
        radius: usize,
        readout: Readout,
        input_dropout: bool,
        single_path: bool,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        let x = if input_dropout { self.dropout(g, x, mode)? } else { x };
        let mut h = if cfg.use_input_projection {
            let w = self.param_var(g, &format!("{prefix}.proj"))?;
            g.matmul(x, w)?
        } else {
            x
        };
        let pos = self.param_var(g, &format!("{prefix}.pos"))?;
        let offset = radius - (slots - 1) / 2;
        let idx: Vec<usize> = (0..n).flat_map(|_| offset..offset + slots).collect();
        let pe = g.gather_rows(pos, &idx)?;
        h = g.add(h, pe)?;
        if input_dropout {
            h = self.dropout(g, h, mode)?;
        }

        let scale = T::one() / T::from_usize(cfg.d).expect("d").sqrt();
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut layer_attn = Vec::new();
            for r in 0..cfg.heads {
                let base = format!("{prefix}.l{l}.h{r}");
                let wv = self.param_var(g, &format!("{base}.v"))?;
                let v = g.matmul(h, wv)?;
                if single_path {
                    heads.push(v);
                    continue;
                }
                let wq = self.param_var(g, &format!("{base}.q"))?;
                let wk = self.param_var(g, &format!("{base}.k"))?;
                let q = g.matmul(h, wq)?;
                let k = g.matmul(h, wk)?;
                let a = g.block_attention(q, k, v, slots, scale)?;
                layer_attn.push(a);
                heads.push(a);
            }
            let mut cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            if cfg.output_projection {
                let wo = self.param_var(g, &format!("{prefix}.l{l}.out"))?;
                cat = g.matmul(cat, wo)?;
            }
            let mut a = g.add(cat, h)?;
            if cfg.layer_norm {
                let gamma = self.param_var(g, &format!("{prefix}.l{l}.ln_gamma"))?;
                let beta = self.param_var(g, &format!("{prefix}.l{l}.ln_beta"))?;
                a = g.layer_norm_rows(a, gamma, beta, T::from_f64_lossy(1e-5))?;
            }
            h = a;
            attention.push(layer_attn);
        }

        let seg = vec![slots; n];
        let (pooled, centre) = match readout {
            Readout::Centre(c) => {
                let rows = if slots == 1 {
                    h
                } else {
                    let idx: Vec<usize> = (0..n).map(|b| b * slots + c).collect();
                    g.gather_rows(h, &idx)?
                };
                (self.mlp_residual(g, prefix, rows)?, c)
            }
            Readout::Mean => {
                let y = self.mlp_residual(g, prefix, h)?;
                (g.segment_mean(y, &seg)?, (slots - 1) / 2)
            }
            Readout::Max => {
                let y = self.mlp_residual(g, prefix, h)?;
                (g.segment_max(y, &seg)?, (slots - 1) / 2)
            }
        };
        let out = g.l2_normalize_rows(pooled)?;
        Ok(Encoded {
            out,
            attention,
            slots,
            centre,
        })
    }

    fn window_matrix(&self, windows: &[ContextWindow<'_>], radius: usize) -> Result<Tensor<T>> {
        let d_v = self.config.d_v;
        let slots = 2 * radius + 1;
        let mut data = Vec::with_capacity(windows.len() * slots * d_v);
        for w in windows {
            if w.m != radius || w.features.len() != slots {
                return Err(Error::Config(format!(
                    "window radius {} does not match model clip radius {radius}",
                    w.m
                )));
            }
            for f in &w.features {
                if f.len() != d_v {
                    return Err(Error::dims("clip feature", &[d_v], &[f.len()]));
                }
                to_scalars(f, &mut data);
            }
        }
        Tensor::matrix(windows.len() * slots, d_v, data)
    }

    fn clip_windows_encoded(
        &self,
        g: &mut Graph<T>,
        windows: &[ContextWindow<'_>],
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let r = self.config.clip_radius();
        let n = windows.len();
        let slots = 2 * r + 1;
        let x = g.constant(self.window_matrix(windows, r)?);
        let windowed = |readout| (slots, readout, false);
        let (slots, readout, pooled_input) = match self.config.aggregation {
            Aggregation::Mid => windowed(Readout::Centre(r)),
            Aggregation::OutAvg => windowed(Readout::Mean),
            Aggregation::OutMax => windowed(Readout::Max),
            Aggregation::FeatAvg | Aggregation::FeatMax => (1, Readout::Centre(0), true),
        };
        if pooled_input {
            let seg = vec![2 * r + 1; n];
            let xa = if self.config.aggregation == Aggregation::FeatAvg {
                g.segment_mean(x, &seg)?
            } else {
                g.segment_max(x, &seg)?
            };
            return self.encode(g, "clip", xa, n, 1, r, readout, true, true, mode);
        }
        self.encode(g, "clip", x, n, slots, r, readout, true, false, mode)
    }

    /// Embeds clip context windows into unit rows (`n × d`).
    pub fn embed_clip_windows(
        &self,
        g: &mut Graph<T>,
        windows: &[ContextWindow<'_>],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        Ok(self.clip_windows_encoded(g, windows, mode)?.out)
    }

    /// Unwindowed path: each clip alone, at positional offset zero.
    pub fn embed_clip_single(
        &self,
        g: &mut Graph<T>,
        features: &[&[f32]],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let d_v = self.config.d_v;
        let mut data = Vec::with_capacity(features.len() * d_v);
        for f in features {
            if f.len() != d_v {
                return Err(Error::dims("clip feature", &[d_v], &[f.len()]));
            }
            to_scalars(f, &mut data);
        }
        let x = g.constant(Tensor::matrix(features.len(), d_v, data)?);
        let r = self.config.clip_radius();
        let enc = self.encode(g, "clip", x, features.len(), 1, r, Readout::Centre(0), true, true, mode)?;
        Ok(enc.out)
    }

    /// Per-token linear + ReLU, max-pool over tokens, output linear.
    /// Returns unnormalized sentence vectors (`n × d`).
    fn text_trunk(&self, g: &mut Graph<T>, captions: &[&[Vec<f32>]]) -> Result<Var> {
        let d_w = self.config.d_w;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(captions.len());
        for tokens in captions {
            if tokens.is_empty() {
                return Err(Error::Input("caption has no tokens".into()));
            }
            for t in tokens.iter() {
                if t.len() != d_w {
                    return Err(Error::dims("token feature", &[d_w], &[t.len()]));
                }
                to_scalars(t, &mut data);
            }
            lens.push(tokens.len());
        }
        let total = data.len() / d_w;
        let x = g.constant(Tensor::matrix(total, d_w, data)?);
        let w1 = self.param_var(g, "text.w1")?;
        let b1 = self.param_var(g, "text.b1")?;
        let w2 = self.param_var(g, "text.w2")?;
        let b2 = self.param_var(g, "text.b2")?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.relu(h)?;
        let pooled = g.segment_max(h, &lens)?;
        let y = g.matmul(pooled, w2)?;
        g.add_row_bias(y, b2)
    }

    /// Plain sentence embeddings (`n × d` unit rows).
    pub fn embed_text_batch(&self, g: &mut Graph<T>, captions: &[&[Vec<f32>]]) -> Result<Var> {
        let y = self.text_trunk(g, captions)?;
        g.l2_normalize_rows(y)
    }

    fn text_windows_encoded(
        &self,
        g: &mut Graph<T>,
        windows: &[Vec<&[Vec<f32>]>],
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let r = self
            .config
            .text_radius()
            .ok_or_else(|| Error::Config("model has no text-context encoder".into()))?;
        let slots = 2 * r + 1;
        let mut flat = Vec::with_capacity(windows.len() * slots);
        for w in windows {
            if w.len() != slots {
                return Err(Error::Config(format!(
                    "caption window of {} slots does not match text radius {r}",
                    w.len()
                )));
            }
            flat.extend(w.iter().copied());
        }
        let x = self.text_trunk(g, &flat)?;
        self.encode(g, "textctx", x, windows.len(), slots, r, Readout::Centre(r), false, false, mode)
    }

    /// Embeds windows of `2m+1` captions (token lists) into unit rows.
    pub fn embed_text_windows(
        &self,
        g: &mut Graph<T>,
        windows: &[Vec<&[Vec<f32>]>],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        Ok(self.text_windows_encoded(g, windows, mode)?.out)
    }

    fn clip_windows_for<'a>(&self, items: &[ClipAt<'a>]) -> Result<Vec<ContextWindow<'a>>> {
        let r = self.config.clip_radius();
        items
            .iter()
            .map(|c| build_context_window(c.video, c.index, r))
            .collect()
    }

    fn caption_windows_for<'a>(&self, items: &[ClipAt<'a>], r: usize) -> Result<Vec<Vec<&'a [Vec<f32>]>>> {
        items
            .iter()
            .map(|c| {
                Ok(build_context_window(c.video, c.index, r)?
                    .source_indices
                    .iter()
                    .map(|&i| c.video.clips[i].token_features.as_slice())
                    .collect())
            })
            .collect()
    }

    /// Clip-side embeddings using this model's clip radius.
    pub fn embed_clips(&self, g: &mut Graph<T>, items: &[ClipAt<'_>], mode: &mut Mode<'_>) -> Result<Var> {
        let windows = self.clip_windows_for(items)?;
        self.embed_clip_windows(g, &windows, mode)
    }

    /// Caption-side embeddings: text context when configured, else the plain branch.
    pub fn embed_captions(
        &self,
        g: &mut Graph<T>,
        items: &[ClipAt<'_>],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        match self.config.text_radius() {
            Some(r) => {
                let windows = self.caption_windows_for(items, r)?;
                self.embed_text_windows(g, &windows, mode)
            }
            None => {
                let caps: Vec<&[Vec<f32>]> = items
                    .iter()
                    .map(|c| c.video.clips[c.index].token_features.as_slice())
                    .collect();
                self.embed_text_batch(g, &caps)
            }
        }
    }

    fn traces(&self, g: &Graph<T>, enc: &Encoded, n: usize) -> Vec<AttentionTrace> {
        let cfg = &self.config;
        (0..n)
            .map(|b| AttentionTrace {
                layers: (0..cfg.n_layers)
                    .map(|l| {
                        (0..cfg.heads)
                            .map(|h| match enc.attention.get(l).and_then(|a| a.get(h)) {
                                Some(&v) => {
                                    let probs = g.attention_probs(v).expect("attention node");
                                    let row = (b * enc.slots + enc.centre) * enc.slots;
                                    probs[row..row + enc.slots]
                                        .iter()
                                        .map(|p| p.to_f64_lossy())
                                        .collect()
                                }
                                None => vec![1.0],
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }

    /// One clip window to one unit vector; the attention trace is returned in eval mode.
    pub fn embed_clip_context(
        &self,
        window: &ContextWindow<'_>,
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<T>, Option<AttentionTrace>)> {
        let mut g = Graph::new();
        let enc = self.clip_windows_encoded(&mut g, std::slice::from_ref(window), mode)?;
        let trace = (!mode.is_train()).then(|| self.traces(&g, &enc, 1).remove(0));
        Ok((g.value(enc.out).data().to_vec(), trace))
    }

    pub fn embed_text(&self, tokens: &[Vec<f32>]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let v = self.embed_text_batch(&mut g, &[tokens])?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn embed_text_context(&self, captions: &[&[Vec<f32>]], mode: &mut Mode<'_>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let v = self.embed_text_windows(&mut g, &[captions.to_vec()], mode)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Eval-mode clip embeddings, computed in chunks.
    pub fn encode_clips(&self, items: &[ClipAt<'_>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(items.len());
        for part in items.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let v = self.embed_clips(&mut g, part, &mut Mode::Eval)?;
            let t = g.value(v);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Eval-mode caption embeddings, computed in chunks.
    pub fn encode_captions(&self, items: &[ClipAt<'_>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(items.len());
        for part in items.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let v = self.embed_captions(&mut g, part, &mut Mode::Eval)?;
            let t = g.value(v);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Eval-mode centre-query attention for each clip.
    pub fn clip_attention(&self, items: &[ClipAt<'_>], chunk: usize) -> Result<Vec<AttentionTrace>> {
        let mut out = Vec::with_capacity(items.len());
        for part in items.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let windows = self.clip_windows_for(part)?;
            let enc = self.clip_windows_encoded(&mut g, &windows, &mut Mode::Eval)?;
            out.extend(self.traces(&g, &enc, part.len()));
        }
        Ok(out)
    }
}
