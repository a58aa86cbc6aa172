use std::collections::BTreeSet;

use rand::Rng;

use super::window::window_indices;
use super::{ClipRef, FeatureDataset, Split, VideoRecord};
use crate::error::{Error, Result};

/// One clip–caption pair of a training batch plus its neighbour negatives.
#[derive(Clone, Debug)]
pub struct BatchPair<'a> {
    pub video: &'a VideoRecord,
    pub at: ClipRef,
    /// Centre indices of neighbouring clips used as negatives (may be empty).
    pub neighbours: Vec<usize>,
}

impl BatchPair<'_> {
    pub fn caption(&self) -> &str {
        &self.video.clips[self.at.clip].caption
    }
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub m: usize,
    pub pairs: Vec<BatchPair<'a>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_neighbours(&self) -> usize {
        self.pairs.iter().map(|p| p.neighbours.len()).sum()
    }
}

/// Valid neighbour indices of clip `j`: offsets in `[-m, m] \ {0}` clamped
/// to the video, de-duplicated, and filtered to captions that differ from
/// the centre caption. Ascending order.
fn neighbour_candidates(video: &VideoRecord, j: usize, m: usize) -> Vec<usize> {
    let centre = &video.clips[j].caption;
    let mut idx = window_indices(video.clips.len(), j, m);
    idx.remove(m);
    idx.into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|&i| i != j && video.clips[i].caption != *centre)
        .collect()
}

/// Draws up to `k` distinct neighbours of clip `j` uniformly at random.
pub fn sample_neighbours<R: Rng + ?Sized>(
    video: &VideoRecord,
    j: usize,
    m: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    if m == 0 || k == 0 || j >= video.clips.len() {
        return Vec::new();
    }
    let mut cand = neighbour_candidates(video, j, m);
    let take = k.min(cand.len());
    for i in 0..take {
        let pick = rng.random_range(i..cand.len());
        cand.swap(i, pick);
    }
    cand.truncate(take);
    cand
}

/// Draws one neighbour `j+α` of clip `j`, or `None` when no valid neighbour exists.
pub fn sample_neighbour<R: Rng + ?Sized>(
    video: &VideoRecord,
    j: usize,
    m: usize,
    rng: &mut R,
) -> Option<usize> {
    sample_neighbours(video, j, m, 1, rng).into_iter().next()
}

/// Samples `b` clip–caption pairs uniformly from the whole split, without
/// replacement when the pool is large enough, each with up to `k_neg`
/// neighbour negatives.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    dataset: &'a FeatureDataset,
    split: Split,
    b: usize,
    m: usize,
    k_neg: usize,
    rng: &mut R,
) -> Result<Batch<'a>> {
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut pool = dataset.clip_refs(split);
    if pool.is_empty() {
        return Err(Error::Input(format!("{split} split has no clips")));
    }
    let chosen: Vec<ClipRef> = if pool.len() >= b {
        for i in 0..b {
            let pick = rng.random_range(i..pool.len());
            pool.swap(i, pick);
        }
        pool.truncate(b);
        pool
    } else {
        (0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let videos = dataset.split(split);
    let pairs = chosen
        .into_iter()
        .map(|at| {
            let video = &videos[at.video];
            let neighbours = sample_neighbours(video, at.clip, m, k_neg, rng);
            BatchPair {
                video,
                at,
                neighbours,
            }
        })
        .collect();
    Ok(Batch { m, pairs })
}
