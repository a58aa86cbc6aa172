use super::VideoRecord;
use crate::error::{Error, Result};

/// The `2m+1` clips centred on one clip of a video.
///
/// Slots falling outside the video repeat the first or last clip.
#[derive(Clone, Debug)]
pub struct ContextWindow<'a> {
    pub centre_video: &'a str,
    pub centre_index: usize,
    pub m: usize,
    pub features: Vec<&'a [f32]>,
    pub padded_mask: Vec<bool>,
    pub source_indices: Vec<usize>,
}

impl ContextWindow<'_> {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

/// Clamped source indices for the window of radius `m` around `j`.
pub(crate) fn window_indices(n_clips: usize, j: usize, m: usize) -> Vec<usize> {
    let last = n_clips as isize - 1;
    (-(m as isize)..=m as isize)
        .map(|a| (j as isize + a).clamp(0, last) as usize)
        .collect()
}

pub fn build_context_window(video: &VideoRecord, j: usize, m: usize) -> Result<ContextWindow<'_>> {
    let n = video.clips.len();
    if j >= n {
        return Err(Error::Index {
            what: "context window centre",
            index: j,
            len: n,
        });
    }
    let source_indices = window_indices(n, j, m);
    let padded_mask = (-(m as isize)..=m as isize)
        .map(|a| {
            let raw = j as isize + a;
            raw < 0 || raw >= n as isize
        })
        .collect();
    let features = source_indices
        .iter()
        .map(|&i| video.clips[i].clip_feature.as_slice())
        .collect();
    Ok(ContextWindow {
        centre_video: &video.video_id,
        centre_index: j,
        m,
        features,
        padded_mask,
        source_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClipRecord;
    use proptest::prelude::*;

    fn video(n: usize) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            clips: (0..n)
                .map(|i| ClipRecord {
                    clip_id: format!("c{i}"),
                    clip_feature: vec![i as f32],
                    token_features: vec![vec![0.0]],
                    caption: format!("cap {i}"),
                    t_start: None,
                    t_end: None,
                })
                .collect(),
        }
    }

    #[test]
    fn start_of_video_duplicates_first_clip() {
        let v = video(5);
        let w = build_context_window(&v, 0, 2).unwrap();
        assert_eq!(w.source_indices, vec![0, 0, 0, 1, 2]);
        assert_eq!(w.padded_mask, vec![true, true, false, false, false]);
        assert_eq!(w.features[0], &[0.0f32][..]);
    }

    #[test]
    fn interior_window_is_unpadded() {
        let v = video(5);
        let w = build_context_window(&v, 2, 1).unwrap();
        assert_eq!(w.source_indices, vec![1, 2, 3]);
        assert!(w.padded_mask.iter().all(|p| !p));
    }

    #[test]
    fn end_of_video_duplicates_last_clip() {
        let v = video(5);
        let w = build_context_window(&v, 4, 2).unwrap();
        assert_eq!(w.source_indices, vec![2, 3, 4, 4, 4]);
        assert_eq!(w.padded_mask, vec![false, false, false, true, true]);
    }

    #[test]
    fn centre_out_of_range_is_an_index_error() {
        let v = video(3);
        assert!(matches!(
            build_context_window(&v, 3, 1),
            Err(Error::Index { index: 3, len: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn window_shape_invariants(n in 1usize..12, j_frac in 0.0f64..1.0, m in 0usize..6) {
            let v = video(n);
            let j = ((n as f64 * j_frac) as usize).min(n - 1);
            let w = build_context_window(&v, j, m).unwrap();
            prop_assert_eq!(w.len(), 2 * m + 1);
            prop_assert_eq!(w.source_indices[m], j);
            prop_assert!(!w.padded_mask[m]);
            let unpadded: Vec<usize> = w.source_indices.iter().zip(&w.padded_mask)
                .filter(|(_, p)| !**p).map(|(i, _)| *i).collect();
            prop_assert!(unpadded.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(w.source_indices.iter().all(|&i| i < n));
        }
    }
}
