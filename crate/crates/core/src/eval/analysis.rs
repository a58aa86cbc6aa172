use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use super::{check_dims, embed_split};
use crate::dataset::{FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::model::{ClipAt, Model};
use crate::scalar::Scalar;
use crate::tensor::kernels::dot;

/// Number of equal-width similarity bins over `[-1, 1]`.
pub const NEIGHBOUR_BINS: usize = 8;

/// Corpus-averaged centre attention, one row per layer over offsets `-m..=m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub m: usize,
    pub clips: usize,
    pub layers: Vec<Vec<f64>>,
}

pub fn attention_summary<T: Scalar>(
    model: &Model<T>,
    dataset: &FeatureDataset,
    split: Split,
    m: usize,
) -> Result<AttentionSummary> {
    check_dims(model, dataset)?;
    let radius = model.config.clip_radius();
    if radius != m {
        return Err(Error::Config(format!("requested m={m} but the checkpoint's clip radius is {radius}")));
    }
    let items: Vec<ClipAt<'_>> = dataset
        .split(split)
        .iter()
        .flat_map(|v| (0..v.clips.len()).map(move |index| ClipAt { video: v, index }))
        .collect();
    if items.is_empty() {
        return Err(Error::Input(format!("{split} split has no clips")));
    }
    let traces = model.clip_attention(&items, 256)?;
    let n_layers = model.config.n_layers;
    let mut layers = vec![vec![0.0; 2 * m + 1]; n_layers];
    for t in &traces {
        for (l, acc) in layers.iter_mut().enumerate() {
            let w = t.head_mean(l);
            // Single-clip aggregation exposes one weight regardless of m.
            if w.len() == 1 {
                acc[m] += w[0];
            } else {
                acc.iter_mut().zip(&w).for_each(|(a, x)| *a += x);
            }
        }
    }
    for row in &mut layers {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(AttentionSummary { m, clips: traces.len(), layers })
}

pub fn write_attention_csv<W: Write>(s: &AttentionSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let m = s.m as i64;
    let mut header = vec!["layer".to_string()];
    header.extend((-m..=m).map(|o| format!("offset_{o}")));
    w.write_record(&header).map_err(csv_err)?;
    for (l, row) in s.layers.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WordDelta {
    pub word: String,
    /// Captions containing the word.
    pub captions: usize,
    pub improved: usize,
    pub worsened: usize,
    pub delta: i64,
}

/// Per-word counts of captions whose rank improved or worsened between two
/// runs over the same queries. Sorted by descending delta, then word.
pub fn rank_delta_by_word(
    ranks_ctx: &[usize],
    ranks_noctx: &[usize],
    captions: &[&str],
) -> Result<Vec<WordDelta>> {
    if ranks_ctx.len() != ranks_noctx.len() || ranks_ctx.len() != captions.len() {
        return Err(Error::dims(
            "rank delta query sets",
            &[ranks_ctx.len(), ranks_noctx.len()],
            &[captions.len()],
        ));
    }
    let mut table: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for ((&a, &b), cap) in ranks_ctx.iter().zip(ranks_noctx).zip(captions) {
        let words: BTreeSet<String> = cap.split_whitespace().map(str::to_lowercase).collect();
        for w in words {
            let e = table.entry(w).or_default();
            e.0 += 1;
            if a < b {
                e.1 += 1;
            } else if a > b {
                e.2 += 1;
            }
        }
    }
    let mut out: Vec<WordDelta> = table
        .into_iter()
        .map(|(word, (captions, improved, worsened))| WordDelta {
            word,
            captions,
            improved,
            worsened,
            delta: improved as i64 - worsened as i64,
        })
        .collect();
    out.sort_by(|a, b| b.delta.cmp(&a.delta).then_with(|| a.word.cmp(&b.word)));
    Ok(out)
}

pub fn write_rank_delta_csv<W: Write>(rows: &[WordDelta], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighbourBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighbourAnalysis {
    pub pairs: usize,
    pub skipped_videos: usize,
    pub mean_delta: f64,
    pub bins: Vec<NeighbourBin>,
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bin index of a similarity in `[-1, 1]`; the top edge belongs to the last bin.
pub(crate) fn bin_of(s: f64) -> usize {
    let b = ((s.clamp(-1.0, 1.0) + 1.0) / 2.0 * NEIGHBOUR_BINS as f64).floor() as usize;
    b.min(NEIGHBOUR_BINS - 1)
}

/// Similarity of each adjacent clip to a caption, `s(clip j±1, caption j)`,
/// under two models. Pairs are binned by the second model's similarity and
/// the per-bin distribution of `first − second` is summarized.
pub fn neighbour_similarity_analysis<T: Scalar>(
    model_ctx: &Model<T>,
    model_noctx: &Model<T>,
    dataset: &FeatureDataset,
    split: Split,
) -> Result<NeighbourAnalysis> {
    let a = embed_split(model_ctx, dataset, split, 256)?;
    let b = embed_split(model_noctx, dataset, split, 256)?;
    let mut skipped = 0;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut offset = 0;
    for v in dataset.split(split) {
        let n = v.clips.len();
        if n < 2 {
            skipped += 1;
            offset += n;
            continue;
        }
        for j in 0..n {
            let neighbours = [j.checked_sub(1), (j + 1 < n).then_some(j + 1)];
            for k in neighbours.into_iter().flatten() {
                let sa = dot(&a.clips[offset + k], &a.texts[offset + j]).to_f64_lossy();
                let sb = dot(&b.clips[offset + k], &b.texts[offset + j]).to_f64_lossy();
                pairs.push((sb, sa - sb));
            }
        }
        offset += n;
    }
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); NEIGHBOUR_BINS];
    for &(x, d) in &pairs {
        per_bin[bin_of(x)].push(d);
    }
    let width = 2.0 / NEIGHBOUR_BINS as f64;
    let bins = per_bin
        .into_iter()
        .enumerate()
        .map(|(i, mut ds)| {
            ds.sort_by(f64::total_cmp);
            let (q1, median, q3, mean) = if ds.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    quantile(&ds, 0.25),
                    quantile(&ds, 0.5),
                    quantile(&ds, 0.75),
                    ds.iter().sum::<f64>() / ds.len() as f64,
                )
            };
            NeighbourBin {
                lo: -1.0 + i as f64 * width,
                hi: -1.0 + (i + 1) as f64 * width,
                count: ds.len(),
                q1,
                median,
                q3,
                mean,
            }
        })
        .collect();
    let mean_delta = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64
    };
    Ok(NeighbourAnalysis { pairs: pairs.len(), skipped_videos: skipped, mean_delta, bins })
}

pub fn write_neighbour_csv<W: Write>(a: &NeighbourAnalysis, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in &a.bins {
        w.serialize(b).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_partition_the_interval() {
        assert_eq!(bin_of(-1.0), 0);
        assert_eq!(bin_of(-0.75), 1);
        assert_eq!(bin_of(0.0), 4);
        assert_eq!(bin_of(1.0), 7);
        assert_eq!(bin_of(0.999), 7);
    }

    #[test]
    fn quantiles_interpolate() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&d, 0.5), 3.0);
        assert_eq!(quantile(&d, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
