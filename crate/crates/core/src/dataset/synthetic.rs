//! Synthetic "recipe" videos in which a clip's topic is mostly hidden in
//! the clip itself but recoverable from the clips around it.
//!
//! Each topic has a recipe: an ordered sequence of
//! `clips_per_video + optional_steps` steps drawn from a shared step
//! vocabulary. A video of that topic keeps `clips_per_video` of those steps,
//! in recipe order. A caption reads "<step verb> the <topic noun>" and its
//! token vectors are the word directions plus small noise. A clip feature is
//! `step + (1 − ρ)·topic + ρ·confuser + noise`, where the confuser direction
//! is shared by every topic and ρ is `ambiguity`. At high ρ a single clip
//! barely reveals its topic, while its neighbours share the topic and their
//! steps follow the topic's recipe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClipRecord, FeatureDataset, VideoRecord, DEFAULT_L_MAX};
use crate::error::{Error, Result};

const NOUNS: &[&str] = &[
    "onion", "garlic", "chicken", "beef", "salmon", "tofu", "rice", "noodles", "tomato", "pepper",
    "potato", "carrot", "cabbage", "mushroom", "egg", "cheese", "bread", "dough", "lentils",
    "spinach", "shrimp", "pork", "lamb", "squash", "beans",
];
const VERBS: &[&str] = &[
    "wash", "peel", "chop", "season", "mix", "fry", "simmer", "bake", "stir", "drain", "plate",
    "garnish",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Training videos.
    pub n_videos: usize,
    pub clips_per_video: usize,
    /// Size of the test gallery in clips; test videos are filled in order.
    pub test_clips: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub n_topics: usize,
    /// Size of the shared step vocabulary. Raised to the recipe length when
    /// smaller.
    pub n_steps: usize,
    /// Recipe steps beyond `clips_per_video`; each video skips that many.
    pub optional_steps: usize,
    /// Weight moved from the topic direction onto the shared confuser.
    pub ambiguity: f64,
    /// Norm-scale of the Gaussian noise added to clip features.
    pub noise: f64,
    /// Norm-scale of the Gaussian noise added to token features.
    pub token_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_videos: 20,
            clips_per_video: 8,
            test_clips: 100,
            d_v: 32,
            d_w: 32,
            n_topics: 13,
            n_steps: 12,
            optional_steps: 3,
            ambiguity: 0.9,
            noise: 0.4,
            token_noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synthetic generator: {m}")));
        if self.d_v == 0 || self.d_w == 0 {
            return err("d_v and d_w must be positive");
        }
        if self.n_videos == 0 || self.clips_per_video == 0 {
            return err("need at least one training video and one clip per video");
        }
        if self.n_topics == 0 {
            return err("need at least one topic");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return err("ambiguity must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.token_noise >= 0.0) {
            return err("noise levels must be nonnegative");
        }
        Ok(())
    }
}

fn word(list: &[&str], i: usize) -> String {
    if i < list.len() {
        list[i].to_string()
    } else {
        format!("{}{}", list[i % list.len()], i / list.len())
    }
}

fn directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, v: &[f32], sigma: f64) -> Vec<f32> {
    let scale = sigma / (v.len() as f64).sqrt();
    v.iter()
        .map(|&x| (x as f64 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale) as f32)
        .collect()
}

/// Generates train and test splits; identical `(config, seed)` give
/// bit-identical datasets.
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<FeatureDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipe_len = config.clips_per_video + config.optional_steps;
    let steps = recipe_len.max(config.n_steps);

    let (nt, ns) = (config.n_topics, steps);
    let mut clip_dirs = directions(&mut rng, nt + ns + 2, config.d_v);
    let mut word_dirs = if config.d_v == config.d_w {
        clip_dirs.split_off(nt + ns + 1)
    } else {
        directions(&mut rng, nt + ns + 1, config.d_w)
    };
    let confuser = clip_dirs.pop().expect("confuser direction");
    let filler = word_dirs.pop().expect("filler direction");
    let step_clip = clip_dirs.split_off(nt);
    let topic_clip = clip_dirs;
    let (topic_word, step_word) = if config.d_v == config.d_w {
        (topic_clip.clone(), step_clip.clone())
    } else {
        let s = word_dirs.split_off(nt);
        (word_dirs, s)
    };

    let recipes: Vec<Vec<usize>> = (0..nt)
        .map(|_| rand::seq::index::sample(&mut rng, steps, recipe_len).into_vec())
        .collect();

    let mut make_video = |prefix: &str, index: usize, n_clips: usize| -> VideoRecord {
        let topic = index % config.n_topics;
        let video_id = format!("{prefix}_v{index:03}");
        let mut keep = rand::seq::index::sample(&mut rng, recipe_len, n_clips).into_vec();
        keep.sort_unstable();
        let order: Vec<usize> = keep.iter().map(|&i| recipes[topic][i]).collect();
        let clips = (0..n_clips)
            .map(|j| {
                let step = order[j];
                let (a, r) = (1.0 - config.ambiguity as f32, config.ambiguity as f32);
                let clean: Vec<f32> = (0..config.d_v)
                    .map(|i| step_clip[step][i] + a * topic_clip[topic][i] + r * confuser[i])
                    .collect();
                let clip_feature = jitter(&mut rng, &clean, config.noise);
                let token_features = [&step_word[step], &filler, &topic_word[topic]]
                    .into_iter()
                    .map(|w| jitter(&mut rng, w, config.token_noise))
                    .collect();
                ClipRecord {
                    clip_id: format!("{video_id}_c{j:02}"),
                    clip_feature,
                    token_features,
                    caption: format!("{} the {}", word(VERBS, step), word(NOUNS, topic)),
                    t_start: Some(j as f64 * 6.0),
                    t_end: Some(j as f64 * 6.0 + 5.0),
                }
            })
            .collect();
        VideoRecord { video_id, clips }
    };

    let train = (0..config.n_videos)
        .map(|i| make_video("train", i, config.clips_per_video))
        .collect();
    let mut test = Vec::new();
    let mut remaining = config.test_clips;
    while remaining > 0 {
        let n = remaining.min(config.clips_per_video);
        test.push(make_video("test", test.len(), n));
        remaining -= n;
    }

    let dataset = FeatureDataset {
        d_v: config.d_v,
        d_w: config.d_w,
        l_max: DEFAULT_L_MAX,
        train,
        test,
    };
    dataset.validate()?;
    Ok(dataset)
}
