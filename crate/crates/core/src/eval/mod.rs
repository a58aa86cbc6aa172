//! Retrieval metrics in both directions and post-hoc analyses.

mod analysis;

pub use analysis::{
    attention_summary, neighbour_similarity_analysis, rank_delta_by_word, write_attention_csv,
    write_neighbour_csv, write_rank_delta_csv, AttentionSummary, NeighbourAnalysis, NeighbourBin,
    WordDelta, NEIGHBOUR_BINS,
};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::model::{ClipAt, Model};
use crate::scalar::Scalar;
use crate::tensor::kernels::dot;

/// Label written into every report describing how MR is computed.
pub const MR_CONVENTION: &str = "lower_median";

/// Dense query × gallery cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    values: Vec<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    /// Dot products of unit-norm query and gallery rows.
    pub fn new(
        queries: &[Vec<T>],
        gallery: &[Vec<T>],
        row_ids: Vec<String>,
        col_ids: Vec<String>,
    ) -> Result<Self> {
        if row_ids.len() != queries.len() || col_ids.len() != gallery.len() {
            return Err(Error::dims(
                "similarity ids",
                &[queries.len(), gallery.len()],
                &[row_ids.len(), col_ids.len()],
            ));
        }
        let d = queries.first().or(gallery.first()).map_or(0, Vec::len);
        if let Some(bad) = queries.iter().chain(gallery).find(|r| r.len() != d) {
            return Err(Error::dims("similarity rows", &[d], &[bad.len()]));
        }
        let values = queries
            .par_iter()
            .flat_map_iter(|q| gallery.iter().map(move |g| dot(q, g)))
            .collect();
        Ok(Self { row_ids, col_ids, values })
    }

    /// Wraps precomputed row-major values.
    pub fn from_values(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims("similarity values", &[rows, cols], &[values.len()]));
        }
        Ok(Self {
            row_ids: (0..rows).map(|i| i.to_string()).collect(),
            col_ids: (0..cols).map(|i| i.to_string()).collect(),
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols() + c]
    }
}

/// Rank of gallery item `t` in `row`: one plus the number of items scoring
/// strictly higher, plus ties at a lower gallery index.
fn rank_in_row<T: Scalar>(row: &[T], t: usize) -> usize {
    let st = row[t];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(g, &s)| s > st || (s == st && g < t))
        .count()
}

/// One-based rank of each query's best-ranked correct gallery item.
pub fn rank_queries<T: Scalar>(sim: &SimilarityMatrix<T>, truth: &[Vec<usize>]) -> Result<Vec<usize>> {
    if truth.len() != sim.rows() {
        return Err(Error::dims("truth sets", &[sim.rows()], &[truth.len()]));
    }
    for t in truth {
        if t.is_empty() {
            return Err(Error::Input("query without a ground-truth item".into()));
        }
        if let Some(&bad) = t.iter().find(|&&g| g >= sim.cols()) {
            return Err(Error::Index { what: "ground-truth gallery item", index: bad, len: sim.cols() });
        }
    }
    Ok((0..sim.rows())
        .into_par_iter()
        .map(|q| {
            let row = sim.row(q);
            truth[q].iter().map(|&t| rank_in_row(row, t)).min().expect("nonempty")
        })
        .collect())
}

/// Which retrieval directions to report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    S2c,
    C2s,
    Both,
}

impl Direction {
    pub fn s2c(self) -> bool {
        self != Direction::C2s
    }
    pub fn c2s(self) -> bool {
        self != Direction::S2c
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2c" => Ok(Direction::S2c),
            "c2s" => Ok(Direction::C2s),
            "both" => Ok(Direction::Both),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::S2c => "s2c",
            Direction::C2s => "c2s",
            Direction::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mr: usize,
    #[serde(default)]
    pub ranks: Vec<usize>,
}

impl DirectionReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Input("no ranks to report".into()));
        }
        let n = ranks.len() as f64;
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        Ok(Self {
            r1: recall(1),
            r5: recall(5),
            r10: recall(10),
            mr: sorted[(sorted.len() - 1) / 2],
            ranks: ranks.to_vec(),
        })
    }

    pub fn recall_sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

/// Recall@{1,5,10}, median rank and RSum. Directions not evaluated are
/// omitted from the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mr_convention: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s2c: Option<DirectionReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c2s: Option<DirectionReport>,
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Checks recall ordering, MR ≥ 1 and the RSum identity.
    pub fn check(&self) -> Result<()> {
        let mut sum = 0.0;
        for d in [&self.s2c, &self.c2s].into_iter().flatten() {
            if !(0.0 <= d.r1 && d.r1 <= d.r5 && d.r5 <= d.r10 && d.r10 <= 100.0) || d.mr < 1 {
                return Err(Error::Contract(format!("inconsistent recalls {d:?}")));
            }
            sum += d.recall_sum();
        }
        if sum != self.rsum {
            return Err(Error::Contract(format!("rsum {} != recall sum {sum}", self.rsum)));
        }
        Ok(())
    }
}

/// Builds a report from whichever directions were ranked.
pub fn report(ranks_s2c: Option<&[usize]>, ranks_c2s: Option<&[usize]>) -> Result<RetrievalReport> {
    if ranks_s2c.is_none() && ranks_c2s.is_none() {
        return Err(Error::Input("report needs at least one direction".into()));
    }
    let s2c = ranks_s2c.map(DirectionReport::from_ranks).transpose()?;
    let c2s = ranks_c2s.map(DirectionReport::from_ranks).transpose()?;
    let rsum = [&s2c, &c2s].into_iter().flatten().map(DirectionReport::recall_sum).sum();
    Ok(RetrievalReport {
        mr_convention: MR_CONVENTION.into(),
        s2c,
        c2s,
        rsum,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub direction: Direction,
    /// Treat every item with identical caption text as correct.
    pub collapse_duplicate_captions: bool,
    /// Clips embedded per forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            direction: Direction::Both,
            collapse_duplicate_captions: false,
            chunk: 256,
        }
    }
}

/// Embeddings of every clip in a split and of its caption, in clip order.
pub struct SplitEmbeddings<T> {
    pub ids: Vec<String>,
    pub captions: Vec<String>,
    pub clips: Vec<Vec<T>>,
    pub texts: Vec<Vec<T>>,
}

pub fn embed_split<T: Scalar>(
    model: &Model<T>,
    dataset: &FeatureDataset,
    split: Split,
    chunk: usize,
) -> Result<SplitEmbeddings<T>> {
    check_dims(model, dataset)?;
    let videos = dataset.split(split);
    let items: Vec<ClipAt<'_>> = videos
        .iter()
        .flat_map(|v| (0..v.clips.len()).map(move |index| ClipAt { video: v, index }))
        .collect();
    Ok(SplitEmbeddings {
        ids: items.iter().map(|c| c.video.clips[c.index].clip_id.clone()).collect(),
        captions: items.iter().map(|c| c.video.clips[c.index].caption.clone()).collect(),
        clips: model.encode_clips(&items, chunk)?,
        texts: model.encode_captions(&items, chunk)?,
    })
}

pub(crate) fn check_dims<T: Scalar>(model: &Model<T>, dataset: &FeatureDataset) -> Result<()> {
    let (m, d) = (&model.config, dataset);
    if m.d_v != d.d_v || m.d_w != d.d_w {
        return Err(Error::Config(format!(
            "model expects d_v={}, d_w={} but dataset has d_v={}, d_w={}",
            m.d_v, m.d_w, d.d_v, d.d_w
        )));
    }
    Ok(())
}

fn truth_sets(captions: &[String], collapse: bool) -> Vec<Vec<usize>> {
    (0..captions.len())
        .map(|i| {
            if collapse {
                (0..captions.len()).filter(|&k| captions[k] == captions[i]).collect()
            } else {
                vec![i]
            }
        })
        .collect()
}

/// Ranks and reports precomputed split embeddings.
pub fn evaluate_embeddings<T: Scalar>(emb: &SplitEmbeddings<T>, opts: &EvalOptions) -> Result<RetrievalReport> {
    let truth = truth_sets(&emb.captions, opts.collapse_duplicate_captions);
    let s2c = if opts.direction.s2c() {
        let sim = SimilarityMatrix::new(&emb.texts, &emb.clips, emb.ids.clone(), emb.ids.clone())?;
        Some(rank_queries(&sim, &truth)?)
    } else {
        None
    };
    let c2s = if opts.direction.c2s() {
        let sim = SimilarityMatrix::new(&emb.clips, &emb.texts, emb.ids.clone(), emb.ids.clone())?;
        Some(rank_queries(&sim, &truth)?)
    } else {
        None
    };
    report(s2c.as_deref(), c2s.as_deref())
}

/// Embeds a split with the model in eval mode and reports retrieval metrics.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &FeatureDataset,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    let emb = embed_split(model, dataset, opts.split, opts.chunk)?;
    evaluate_embeddings(&emb, opts)
}

/// Untrained reference: raw clip features against mean token features.
/// Requires `d_v == d_w`; used to check that a generated dataset is learnable
/// but not trivially separable.
pub fn raw_feature_baseline(dataset: &FeatureDataset, opts: &EvalOptions) -> Result<RetrievalReport> {
    if dataset.d_v != dataset.d_w {
        return Err(Error::Config("raw feature baseline needs d_v == d_w".into()));
    }
    let unit = |v: Vec<f64>| -> Result<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate("zero feature vector".into()));
        }
        Ok(v.into_iter().map(|x| x / n).collect())
    };
    let clips_of = dataset.split(opts.split).iter().flat_map(|v| &v.clips);
    let mut emb = SplitEmbeddings { ids: vec![], captions: vec![], clips: vec![], texts: vec![] };
    for c in clips_of {
        emb.ids.push(c.clip_id.clone());
        emb.captions.push(c.caption.clone());
        emb.clips.push(unit(c.clip_feature.iter().map(|&x| x as f64).collect())?);
        let mut mean = vec![0.0; dataset.d_w];
        for t in &c.token_features {
            for (m, &x) in mean.iter_mut().zip(t) {
                *m += x as f64;
            }
        }
        emb.texts.push(unit(mean)?);
    }
    evaluate_embeddings(&emb, opts)
}
