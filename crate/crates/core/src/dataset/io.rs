//! Directory format:
//!
//! * `manifest.json`: dims, splits, per-clip row offsets, blob checksums.
//! * `clip_feats.bin`: little-endian f32, one `d_v` row per clip.
//! * `token_feats.bin`: little-endian f32, one `d_w` row per token.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClipRecord, FeatureDataset, VideoRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLIP_FEATS_FILE: &str = "clip_feats.bin";
pub const TOKEN_FEATS_FILE: &str = "token_feats.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    d_v: usize,
    d_w: usize,
    #[serde(rename = "L_max")]
    l_max: usize,
    splits: Splits,
    checksums: Checksums,
}

#[derive(Serialize, Deserialize)]
struct Splits {
    train: Vec<VideoEntry>,
    test: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
struct Checksums {
    clip_feats: String,
    token_feats: String,
}

#[derive(Serialize, Deserialize)]
struct VideoEntry {
    video_id: String,
    clips: Vec<ClipEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClipEntry {
    clip_id: String,
    caption: String,
    t_start: Option<f64>,
    t_end: Option<f64>,
    feat_row: usize,
    token_row_start: usize,
    token_count: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the dataset in the on-disk format, creating `dir` if needed.
pub fn write_dataset(dataset: &FeatureDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut clip_blob = Vec::new();
    let mut token_blob = Vec::new();
    let (mut feat_row, mut token_row) = (0usize, 0usize);
    let mut entries = |videos: &[VideoRecord]| -> Vec<VideoEntry> {
        videos
            .iter()
            .map(|v| VideoEntry {
                video_id: v.video_id.clone(),
                clips: v
                    .clips
                    .iter()
                    .map(|c| {
                        c.clip_feature
                            .iter()
                            .for_each(|x| clip_blob.extend_from_slice(&x.to_le_bytes()));
                        c.token_features
                            .iter()
                            .flatten()
                            .for_each(|x| token_blob.extend_from_slice(&x.to_le_bytes()));
                        let e = ClipEntry {
                            clip_id: c.clip_id.clone(),
                            caption: c.caption.clone(),
                            t_start: c.t_start,
                            t_end: c.t_end,
                            feat_row,
                            token_row_start: token_row,
                            token_count: c.token_features.len(),
                        };
                        feat_row += 1;
                        token_row += c.token_features.len();
                        e
                    })
                    .collect(),
            })
            .collect()
    };
    let train = entries(&dataset.train);
    let test = entries(&dataset.test);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        d_v: dataset.d_v,
        d_w: dataset.d_w,
        l_max: dataset.l_max,
        splits: Splits { train, test },
        checksums: Checksums {
            clip_feats: sha256_hex(&clip_blob),
            token_feats: sha256_hex(&token_blob),
        },
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(CLIP_FEATS_FILE, &clip_blob)?;
    write(TOKEN_FEATS_FILE, &token_blob)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Input(format!("manifest serialization: {e}")))?;
    write(MANIFEST_FILE, &json)
}

fn read_rows(
    blob: &[u8],
    path: &Path,
    record: &str,
    start: usize,
    count: usize,
    width: usize,
) -> Result<Vec<Vec<f32>>> {
    let row_bytes = width * 4;
    let end = (start + count) * row_bytes;
    if end > blob.len() {
        return Err(Error::load(
            path,
            record,
            format!(
                "rows {start}..{} of width {width} exceed blob of {} bytes",
                start + count,
                blob.len()
            ),
        ));
    }
    Ok(blob[start * row_bytes..end]
        .chunks_exact(row_bytes)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        })
        .collect())
}

/// Loads and fully validates a dataset directory.
///
/// Captions longer than `L_max` tokens keep their first `L_max` tokens.
pub fn load_dataset(dir: &Path) -> Result<FeatureDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::load(&manifest_path, "manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::load(
            &manifest_path,
            "manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let clip_path = dir.join(CLIP_FEATS_FILE);
    let token_path = dir.join(TOKEN_FEATS_FILE);
    let clip_blob = fs::read(&clip_path).map_err(|e| Error::io(&clip_path, e))?;
    let token_blob = fs::read(&token_path).map_err(|e| Error::io(&token_path, e))?;

    let convert = |videos: Vec<VideoEntry>| -> Result<Vec<VideoRecord>> {
        videos
            .into_iter()
            .map(|v| {
                let clips = v
                    .clips
                    .into_iter()
                    .map(|c| {
                        if c.caption.is_empty() {
                            return Err(Error::load(&manifest_path, &c.clip_id, "empty caption"));
                        }
                        if c.token_count == 0 {
                            return Err(Error::load(&manifest_path, &c.clip_id, "no caption tokens"));
                        }
                        let mut feat =
                            read_rows(&clip_blob, &clip_path, &c.clip_id, c.feat_row, 1, manifest.d_v)?;
                        let mut tokens = read_rows(
                            &token_blob,
                            &token_path,
                            &c.clip_id,
                            c.token_row_start,
                            c.token_count,
                            manifest.d_w,
                        )?;
                        tokens.truncate(manifest.l_max);
                        Ok(ClipRecord {
                            clip_id: c.clip_id,
                            clip_feature: feat.pop().expect("one row"),
                            token_features: tokens,
                            caption: c.caption,
                            t_start: c.t_start,
                            t_end: c.t_end,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(VideoRecord {
                    video_id: v.video_id,
                    clips,
                })
            })
            .collect()
    };
    let train = convert(manifest.splits.train)?;
    let test = convert(manifest.splits.test)?;

    for (path, blob, want) in [
        (&clip_path, &clip_blob, &manifest.checksums.clip_feats),
        (&token_path, &token_blob, &manifest.checksums.token_feats),
    ] {
        let got = sha256_hex(blob);
        if got != *want {
            return Err(Error::load(
                path,
                "checksum",
                format!("sha256 {got} does not match manifest {want}"),
            ));
        }
    }

    let dataset = FeatureDataset {
        d_v: manifest.d_v,
        d_w: manifest.d_w,
        l_max: manifest.l_max,
        train,
        test,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(d_v: usize) -> FeatureDataset {
        FeatureDataset {
            d_v,
            d_w: 3,
            l_max: 4,
            train: vec![VideoRecord {
                video_id: "v0".into(),
                clips: vec![ClipRecord {
                    clip_id: "v0_c0".into(),
                    clip_feature: (0..d_v).map(|i| i as f32 * 0.25 - 1.0).collect(),
                    token_features: vec![vec![1.0, -2.0, f32::MIN_POSITIVE], vec![0.5; 3]],
                    caption: "crack the egg".into(),
                    t_start: Some(0.0),
                    t_end: Some(2.5),
                }],
            }],
            test: vec![],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(5);
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_feature_row_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(512), dir.path()).unwrap();
        let p = dir.path().join(CLIP_FEATS_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob.truncate(511 * 4);
        fs::write(&p, blob).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("v0_c0"), "{err}");
    }

    #[test]
    fn empty_caption_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(2);
        ds.train[0].clips[0].caption.clear();
        assert!(write_dataset(&ds, dir.path()).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(4), dir.path()).unwrap();
        let p = dir.path().join(TOKEN_FEATS_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob[0] ^= 1;
        fs::write(&p, blob).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sha256"), "{err}");
    }

    #[test]
    fn missing_blob_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(4), dir.path()).unwrap();
        fs::remove_file(dir.path().join(CLIP_FEATS_FILE)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(CLIP_FEATS_FILE), "{err}");
    }

    #[test]
    fn long_captions_are_truncated_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(2);
        ds.l_max = 8;
        ds.train[0].clips[0].token_features = (0..8).map(|i| vec![i as f32; 3]).collect();
        write_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"L_max\": 8", "\"L_max\": 5");
        fs::write(&mpath, text).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let toks = &loaded.train[0].clips[0].token_features;
        assert_eq!(toks.len(), 5);
        assert_eq!(toks[4], vec![4.0; 3]);
    }
}
