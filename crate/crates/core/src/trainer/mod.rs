//! Optimization loop: batch sampling, loss, Adam with warmup and linear
//! decay, periodic evaluation, checkpoints and ablation sweeps.

mod ablation;
mod gradcheck;
mod optim;

pub use ablation::{run_ablation, write_ablation_csv, AblationCell, Axis, GridSpec, CSV_COLUMNS};
pub use gradcheck::{toy_gradcheck, ToyDims};
pub use optim::{Adam, AdamConfig};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{sample_batch, Batch, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{check_dims, evaluate, EvalOptions, RetrievalReport};
use crate::losses::{duplicate_caption_mask, loss_total, LossBreakdown, LossConfig, LossInputs, Negatives, Term};
use crate::model::{save_checkpoint, ClipAt, ContextMode, Mode, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many iterations; 0 evaluates
    /// only after the last one.
    pub eval_every: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            warmup_iters: 1300,
            total_iters: 2000,
            batch_size: 512,
            seed: 0,
            eval_every: 500,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small model and schedule sized for the default synthetic dataset.
    pub fn desk_scale() -> Self {
        Self {
            lr_max: 1e-3,
            warmup_iters: 200,
            total_iters: 2000,
            batch_size: 64,
            model: ModelConfig {
                m: 1,
                d: 32,
                d_v: 32,
                d_w: 32,
                d_inner: 64,
                d_text_hidden: 64,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters ({}) exceeds total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_max > 0.0) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Applies dotted-path overrides such as `loss.lambda_uni=12` on top of
    /// this config. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut json = serde_json::to_value(self).expect("config serializes");
        for (path, v) in overrides {
            set_path(&mut json, path, v.clone())?;
        }
        serde_json::from_value(json).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sets `root[a][b]...` for a dotted `path`; every key must already exist.
pub fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
    }
    *cur = v;
    Ok(())
}

/// Learning rate at `iter`: linear warmup to `lr_max`, then linear decay
/// reaching zero at `total_iters`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    let (w, t) = (cfg.warmup_iters, cfg.total_iters);
    if iter > t {
        return Err(Error::Index { what: "iteration", index: iter, len: t + 1 });
    }
    if iter < w {
        return Ok(cfg.lr_max * ((iter + 1) as f64 / w as f64));
    }
    if t == w {
        return Ok(0.0);
    }
    Ok(cfg.lr_max * ((t - iter) as f64 / (t - w) as f64))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iter { iter: usize, lr: f64, loss: LossBreakdown },
    Eval { iter: usize, report: RetrievalReport },
}

pub struct TrainOutput<T: Scalar> {
    pub model: Model<T>,
    pub final_report: RetrievalReport,
    /// Iteration, model and report of the best test RSum seen.
    pub best: (usize, Model<T>, RetrievalReport),
    pub log: Vec<LogRecord>,
}

/// Builds the embeddings of a sampled batch and its neighbour negatives and
/// returns the total loss.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    batch: &Batch<'_>,
    loss_cfg: &LossConfig,
    mode: &mut Mode<'_>,
) -> Result<(Var, LossBreakdown)> {
    let items: Vec<ClipAt<'_>> = batch
        .pairs
        .iter()
        .map(|p| ClipAt { video: p.video, index: p.at.clip })
        .collect();
    let mut neigh = Vec::new();
    let mut owner = Vec::new();
    for (i, p) in batch.pairs.iter().enumerate() {
        for &n in &p.neighbours {
            neigh.push(ClipAt { video: p.video, index: n });
            owner.push(i);
        }
    }
    let clips = model.embed_clips(g, &items, mode)?;
    let texts = model.embed_captions(g, &items, mode)?;
    let (clip_negatives, text_negatives) = if neigh.is_empty() {
        (None, None)
    } else {
        let c = model.embed_clips(g, &neigh, mode)?;
        let t = if model.config.context_mode == ContextMode::Both {
            let t = model.embed_captions(g, &neigh, mode)?;
            Some(Negatives { embs: t, owner: owner.clone() })
        } else {
            None
        };
        (Some(Negatives { embs: c, owner }), t)
    };
    let mask = loss_cfg.exclude_duplicate_captions.then(|| {
        let caps: Vec<&str> = batch.pairs.iter().map(|p| p.caption()).collect();
        duplicate_caption_mask(&caps)
    });
    let inputs = LossInputs {
        clips,
        texts,
        clip_negatives,
        text_negatives,
        excluded: mask.as_deref(),
    };
    loss_total(g, &inputs, loss_cfg)
}

/// Samples a batch, runs forward and backward, and applies one Adam update.
#[allow(clippy::too_many_arguments)]
fn step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    dataset: &FeatureDataset,
    cfg: &TrainConfig,
    iter: usize,
    lr: f64,
    batch_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let k_neg = if cfg.loss.has(Term::Nei) { cfg.loss.k_neg } else { 0 };
    let batch = sample_batch(dataset, Split::Train, cfg.batch_size, cfg.model.m, k_neg, batch_rng)?;
    let mut g = Graph::new();
    let (loss, bd) = batch_loss(model, &mut g, &batch, &cfg.loss, &mut Mode::Train(dropout_rng)).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("iteration {iter}: {msg}")),
        other => other,
    })?;
    if !bd.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at iteration {iter}: {bd:?}")));
    }
    let grads = g.backward(loss)?;
    adam.step(&mut model.params, &grads, lr)
        .map_err(|e| Error::Numeric(format!("iteration {iter}: {e}")))?;
    Ok(bd)
}

/// Trains from a fresh initialization. Every record is passed to `sink` as
/// soon as it is produced and also kept in the returned log.
pub fn train<T: Scalar>(
    dataset: &FeatureDataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut model: Model<T> = Model::new(cfg.model.clone(), &mut init_rng)?;
    check_dims(&model, dataset)?;
    let mut adam = Adam::new(&model.params, cfg.adam);
    let eval_opts = EvalOptions::default();
    let mut log = Vec::new();
    let mut best: Option<(usize, Model<T>, RetrievalReport)> = None;
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        sink(&rec)?;
        log.push(rec);
        Ok(())
    };

    let mut final_report = None;
    for iter in 0..cfg.total_iters {
        let lr = lr_schedule(iter, cfg)?;
        let bd = step(&mut model, &mut adam, dataset, cfg, iter, lr, &mut batch_rng, &mut dropout_rng)?;
        emit(LogRecord::Iter { iter, lr, loss: bd }, &mut log)?;
        let last = iter + 1 == cfg.total_iters;
        if last || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) {
            let report = evaluate(&model, dataset, &eval_opts)?;
            if best.as_ref().is_none_or(|b| report.rsum > b.2.rsum) {
                best = Some((iter + 1, model.clone(), report.clone()));
            }
            if last {
                final_report = Some(report.clone());
            }
            emit(LogRecord::Eval { iter: iter + 1, report }, &mut log)?;
        }
    }
    let final_report = match final_report {
        Some(r) => r,
        None => {
            let report = evaluate(&model, dataset, &eval_opts)?;
            best = Some((0, model.clone(), report.clone()));
            emit(LogRecord::Eval { iter: 0, report: report.clone() }, &mut log)?;
            report
        }
    };
    Ok(TrainOutput {
        model,
        final_report,
        best: best.expect("at least one evaluation"),
        log,
    })
}

/// Final and best-RSum reports, labelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(rename = "final")]
    pub final_report: RetrievalReport,
    pub best_iter: usize,
    pub best: RetrievalReport,
}

/// Trains and writes the log, both checkpoints and the summary into `out`.
pub fn train_to_dir<T: Scalar>(dataset: &FeatureDataset, cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut sink = |rec: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(writer, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    let result = train::<T>(dataset, cfg, &mut sink);
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let output = result?;
    save_checkpoint(&output.model, &out.join(FINAL_DIR))?;
    save_checkpoint(&output.best.1, &out.join(BEST_DIR))?;
    let summary = TrainSummary {
        final_report: output.final_report,
        best_iter: output.best.0,
        best: output.best.2,
    };
    let p = out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}
