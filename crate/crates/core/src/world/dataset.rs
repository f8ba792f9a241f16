//! On-disk episode datasets: `manifest.json` plus raw little-endian blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{mean_step_size, simulate_episode, Episode, EpisodeParams};
use super::pose::{NavAction, Pose};
use super::render::Frame;
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub id: usize,
    pub seed: u64,
    pub map_seed: u64,
    pub length: usize,
    pub frame_file: String,
    pub pose_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub fps: f64,
    pub average_step_size: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub episodes: Vec<EpisodeEntry>,
}

/// A loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Builds an in-memory dataset; `average_step_size` is the mean
    /// inter-frame displacement over all episodes.
    pub fn from_episodes(episodes: Vec<Episode>, config_hash: Option<String>) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::invalid("dataset needs at least one episode"))?;
        let (h, w, c) = (first.frames[0].height, first.frames[0].width, first.frames[0].channels);
        let fps = first.fps;
        for ep in &episodes {
            if ep.len() < 2 || ep.frames.len() != ep.poses.len() {
                return Err(Error::invalid(format!("episode {}: need matching frames and poses, at least 2", ep.id)));
            }
            if ep.fps != fps || ep.frames.iter().any(|f| (f.height, f.width, f.channels) != (h, w, c)) {
                return Err(Error::invalid(format!("episode {}: inconsistent fps or frame size", ep.id)));
            }
        }
        let average_step_size = mean_step_size(episodes.iter().map(|e| e.poses.as_slice()));
        if !(average_step_size > 0.0) {
            return Err(Error::invalid("dataset has zero average step size"));
        }
        let entries = episodes
            .iter()
            .map(|e| EpisodeEntry {
                id: e.id,
                seed: e.seed,
                map_seed: e.map_seed,
                length: e.len(),
                frame_file: format!("ep{:05}_frames.bin", e.id),
                pose_file: format!("ep{:05}_poses.bin", e.id),
            })
            .collect();
        let manifest = Manifest {
            version: DATASET_VERSION,
            fps,
            average_step_size,
            height: h,
            width: w,
            channels: c,
            config_hash,
            episodes: entries,
        };
        Ok(Dataset { manifest, episodes })
    }

    pub fn average_step_size(&self) -> f64 {
        self.manifest.average_step_size
    }

    /// Actions for every episode, normalized by the dataset step size.
    pub fn actions(&self) -> Result<Vec<Vec<NavAction>>> {
        self.episodes.iter().map(|e| e.actions(self.manifest.average_step_size)).collect()
    }

    /// Writes the dataset atomically: everything goes to a sibling temp
    /// directory that is renamed over `dir` at the end.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dir_atomic(dir, |tmp| {
            for (ep, entry) in self.episodes.iter().zip(&self.manifest.episodes) {
                let mut fb = Vec::with_capacity(ep.frames.len() * ep.frames[0].numel() * 4);
                for f in &ep.frames {
                    for v in &f.data {
                        fb.extend_from_slice(&v.to_le_bytes());
                    }
                }
                write_file(&tmp.join(&entry.frame_file), &fb)?;
                let mut pb = Vec::with_capacity(ep.poses.len() * 24);
                for p in &ep.poses {
                    for v in [p.x, p.y, p.yaw] {
                        pb.extend_from_slice(&v.to_le_bytes());
                    }
                }
                write_file(&tmp.join(&entry.pose_file), &pb)?;
            }
            let json = serde_json::to_string_pretty(&self.manifest)?;
            write_file(&tmp.join(MANIFEST_FILE), json.as_bytes())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::format(&mpath, format!("unsupported version {}", manifest.version)));
        }
        let frame_len = manifest.height * manifest.width * manifest.channels;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for entry in &manifest.episodes {
            let fpath = dir.join(&entry.frame_file);
            let fb = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            if fb.len() != entry.length * frame_len * 4 {
                return Err(Error::format(&fpath, format!("expected {} bytes, found {}", entry.length * frame_len * 4, fb.len())));
            }
            let values: Vec<f32> = fb.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let frames = values
                .chunks_exact(frame_len)
                .map(|d| Frame::new(manifest.height, manifest.width, manifest.channels, d.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let ppath = dir.join(&entry.pose_file);
            let pb = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
            if pb.len() != entry.length * 24 {
                return Err(Error::format(&ppath, format!("expected {} bytes, found {}", entry.length * 24, pb.len())));
            }
            let poses = pb
                .chunks_exact(24)
                .map(|c| {
                    let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
                    Pose { x: f(0), y: f(1), yaw: f(2) }
                })
                .collect();
            episodes.push(Episode { id: entry.id, seed: entry.seed, map_seed: entry.map_seed, fps: manifest.fps, frames, poses });
        }
        Ok(Dataset { manifest, episodes })
    }
}

/// Simulates `num_episodes` episodes in parallel. Episode `i` uses map
/// `map_seeds[i % len]` and its own seed derived from `seed`.
pub fn generate_episodes(num_episodes: usize, seed: u64, map_seeds: &[u64], params: &EpisodeParams) -> Result<Vec<Episode>> {
    if map_seeds.is_empty() {
        return Err(Error::invalid("need at least one map seed"));
    }
    (0..num_episodes)
        .into_par_iter()
        .map(|i| simulate_episode(i, rng::indexed(seed, i as u64), map_seeds[i % map_seeds.len()], params))
        .collect()
}

/// Generates episodes and writes them to `out`.
pub fn generate_dataset(
    num_episodes: usize,
    seed: u64,
    map_seeds: &[u64],
    params: &EpisodeParams,
    out: &Path,
    config_hash: Option<String>,
) -> Result<Dataset> {
    let episodes = generate_episodes(num_episodes, seed, map_seeds, params)?;
    let ds = Dataset::from_episodes(episodes, config_hash)?;
    ds.save(out)?;
    Ok(ds)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    dir.with_file_name(format!(".{name}.{tag}.{}", std::process::id()))
}

/// Fills a fresh temp directory via `fill`, then swaps it into place.
pub fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_dir_all(&old);
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes a single file via a temp file and rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp.{}", std::process::id()));
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EpisodeParams {
        EpisodeParams { length: 12, ..Default::default() }
    }

    #[test]
    fn two_episodes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let ds = generate_dataset(2, 7, &[1, 2], &small(), &out, None).unwrap();
        assert_eq!(ds.manifest.episodes.len(), 2);
        let back = Dataset::load(&out).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.episodes.iter().zip(&ds.episodes) {
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.data.iter().zip(&fb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            for (pa, pb) in a.poses.iter().zip(&b.poses) {
                assert_eq!(pa.x.to_bits(), pb.x.to_bits());
                assert_eq!(pa.yaw.to_bits(), pb.yaw.to_bits());
            }
        }
        assert_eq!(back.manifest.average_step_size.to_bits(), ds.manifest.average_step_size.to_bits());
    }

    #[test]
    fn stored_actions_never_backward() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let params = EpisodeParams { noise_level: 0.4, length: 20, ..Default::default() };
        generate_dataset(4, 3, &[5], &params, &out, None).unwrap();
        let ds = Dataset::load(&out).unwrap();
        for acts in ds.actions().unwrap() {
            assert!(acts.iter().all(|a| a.u[0] >= 0.0));
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_dataset(3, 9, &[4, 8], &small(), &a, Some("abc".into())).unwrap();
        generate_dataset(3, 9, &[4, 8], &small(), &b, Some("abc".into())).unwrap();
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 1 + 2 * 3);
        for n in names {
            assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn overwrite_replaces_existing_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        generate_dataset(3, 1, &[1], &small(), &out, None).unwrap();
        generate_dataset(1, 1, &[1], &small(), &out, None).unwrap();
        assert_eq!(Dataset::load(&out).unwrap().episodes.len(), 1);
        assert!(!out.join("ep00002_frames.bin").exists());
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        generate_dataset(1, 1, &[1], &small(), &out, None).unwrap();
        let p = out.join("ep00000_poses.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Dataset::load(&out), Err(Error::Format { .. })));
    }
}
