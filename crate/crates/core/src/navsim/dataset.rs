//! Training samples and the on-disk episode archive.
//!
//! Archive layout (version 1):
//!
//! ```text
//! DIR/manifest.json            seed, split ratio, simulator settings, train/test ids
//! DIR/ep_NNNNN/meta.json       world, poses, actions, waypoints, length
//! DIR/ep_NNNNN/frame_KKKK.ppm  rendered observation for pose K (binary P6)
//! ```
//!
//! Samples are not stored: they are redrawn from the manifest seed, so a
//! loaded archive yields exactly the samples of the run that wrote it.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expert_rollout, gen_world, Episode, SimConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::NavInput;
use crate::tensor::Tensor;

pub const ARCHIVE_VERSION: u32 = 1;
const MIN_EPISODES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    /// `(n_way, 2)` agent-frame unit headings.
    pub action: Tensor,
    /// `(n_way, 2)` agent-frame offsets in meters.
    pub waypoints: Tensor,
    /// `d / d_max`.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub episode: usize,
    pub t: usize,
    pub d: usize,
    pub input: NavInput,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub n_episodes: usize,
    pub split_ratio: f64,
    pub sim: SimConfig,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: SplitManifest,
    /// Indexed by episode id.
    pub episodes: Vec<Episode>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn cfg(&self) -> &SimConfig {
        &self.manifest.sim
    }
}

/// World seed of episode `id`.
pub(crate) fn episode_seed(seed: u64, id: usize) -> u64 {
    // splitmix64 step keeps neighbouring ids decorrelated
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `samples_per_episode` samples: `t - p >= 0`, `t + max(d, n_way) <= end`.
pub(crate) fn draw_samples(ep: &Episode, seed: u64, cfg: &SimConfig) -> Result<Vec<Sample>> {
    let end = ep.len() - 1;
    let p = cfg.past_frames;
    if end < p + cfg.n_waypoints.max(cfg.d_min) {
        return Err(Error::Data(format!("episode {} too short for sampling ({} poses)", ep.id, ep.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed ^ 0x5A4D_504C_4553, ep.id));
    (0..cfg.samples_per_episode)
        .map(|_| {
            let t = rng.gen_range(p..=end - cfg.n_waypoints.max(cfg.d_min));
            let d = rng.gen_range(cfg.d_min..=cfg.d_max.min(end - t));
            sample_at(ep, t, d, cfg)
        })
        .collect()
}

/// The sample with current frame `t` and goal frame `t + d`.
pub fn sample_at(ep: &Episode, t: usize, d: usize, cfg: &SimConfig) -> Result<Sample> {
    let p = cfg.past_frames;
    if t < p || t + d >= ep.len() || ep.images.len() != ep.len() {
        return Err(Error::Data(format!("sample (t={t}, d={d}) outside episode {}", ep.id)));
    }
    let frames = ep.images[t - p..=t].to_vec();
    let goal = ep.images[t + d].clone();
    let flat = |v: Vec<[f64; 2]>| Tensor::new(vec![v.len(), 2], v.into_iter().flatten().collect());
    let target = Target {
        action: flat(ep.action_window(t, cfg.n_waypoints))?,
        waypoints: flat(ep.waypoints[t].clone())?,
        distance: d as f64 / cfg.d_max as f64,
    };
    Ok(Sample { episode: ep.id, t, d, input: NavInput { frames, goal }, target })
}

fn split_ids(n: usize, seed: u64, ratio: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5350_4C49_54));
    let n_train = (n as f64 * ratio).round() as usize;
    let (mut train, mut test) = (ids[..n_train].to_vec(), ids[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn assemble(manifest: SplitManifest, episodes: Vec<Episode>) -> Result<Dataset> {
    let collect = |ids: &[usize]| -> Result<Vec<Sample>> {
        let per: Vec<Vec<Sample>> =
            ids.iter().map(|&i| draw_samples(&episodes[i], manifest.seed, &manifest.sim)).collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    };
    let train = collect(&manifest.train)?;
    let test = collect(&manifest.test)?;
    Ok(Dataset { manifest, episodes, train, test })
}

/// Generates `n_episodes` expert episodes and an episode-level split.
pub fn make_dataset(n_episodes: usize, seed: u64, split_ratio: f64, cfg: &SimConfig) -> Result<Dataset> {
    if n_episodes < MIN_EPISODES {
        return Err(Error::invalid(format!("need at least {MIN_EPISODES} episodes, got {n_episodes}")));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {split_ratio}")));
    }
    let episodes: Vec<Episode> = (0..n_episodes)
        .into_par_iter()
        .map(|id| expert_rollout(&gen_world(episode_seed(seed, id), cfg)?, id, cfg))
        .collect::<Result<_>>()?;
    let (train, test) = split_ids(n_episodes, seed, split_ratio);
    let manifest =
        SplitManifest { version: ARCHIVE_VERSION, seed, n_episodes, split_ratio, sim: cfg.clone(), train, test };
    assemble(manifest, episodes)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

fn episode_dir(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(format!("ep_{id:05}"))
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    version: u32,
    #[serde(flatten)]
    episode: Episode,
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = EpisodeMeta { version: ARCHIVE_VERSION, episode: ep.clone() };
    let mut w = BufWriter::new(fs::File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut w, &meta).map_err(json_err)?;
    for (k, img) in ep.images.iter().enumerate() {
        img.write_pnm(BufWriter::new(fs::File::create(dir.join(format!("frame_{k:04}.ppm")))?))?;
    }
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let r = BufReader::new(fs::File::open(dir.join("meta.json"))?);
    let meta: EpisodeMeta = serde_json::from_reader(r).map_err(json_err)?;
    if meta.version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("episode archive version {} unsupported", meta.version)));
    }
    let mut ep = meta.episode;
    ep.images = (0..ep.poses.len())
        .map(|k| Image::read_pnm(BufReader::new(fs::File::open(dir.join(format!("frame_{k:04}.ppm")))?)))
        .collect::<Result<_>>()?;
    ep.goal_image = ep.images.last().cloned();
    Ok(ep)
}

/// Writes the manifest and every episode under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    ds.episodes.par_iter().try_for_each(|ep| write_episode(&episode_dir(dir, ep.id), ep))?;
    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &ds.manifest).map_err(json_err)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
    let r = BufReader::new(fs::File::open(dir.join("manifest.json"))?);
    let m: SplitManifest = serde_json::from_reader(r).map_err(json_err)?;
    if m.version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("archive version {} unsupported", m.version)));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let episodes: Vec<Episode> =
        (0..manifest.n_episodes).into_par_iter().map(|id| read_episode(&episode_dir(dir, id))).collect::<Result<_>>()?;
    if episodes.iter().enumerate().any(|(i, e)| e.id != i) {
        return Err(Error::Data("episode ids do not match their directories".into()));
    }
    assemble(manifest, episodes)
}
