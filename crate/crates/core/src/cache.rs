//! Offline feature cache.
//!
//! Demonstrations are pushed through a frozen extractor once and each frame
//! is paired with its chunk of future expert actions. The file is a header
//! line followed by one JSON record per line; floats are written in shortest
//! round-trip form so reading a cache back is lossless and the bytes are a
//! pure function of the inputs.
//!
//! Chunk row `i` of the record at frame `t` is the expert action at frame
//! `t + i * chunk_stride`. The stride matches the spacing at which the
//! runtime schedules chunk elements (one policy period). The extractor is run
//! at the same period: frames `o, o + s, o + 2s, ...` form one tracker pass
//! for each offset `o < s`, so the tracker's memory sees the frame spacing it
//! will see at inference time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{fingerprint_bytes, Dataset, DemoEpisode};
use crate::perception::{permute_slots, ExtractorKind, PerceptionConfig, Perceiver};
use crate::policy::ACTION_DIM;
use crate::rng::{self, Stream};
use crate::sim::{self, Proprio};

pub const CACHE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub episode_id: u64,
    pub t: usize,
    pub feature: Vec<f64>,
    pub proprio: Vec<f64>,
    pub action_chunk_target: Vec<[f64; ACTION_DIM]>,
    /// False where the row is padding past the end of the episode.
    pub valid_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub schema_version: u32,
    pub kind: ExtractorKind,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub k: usize,
    pub action_dim: usize,
    pub chunk_stride: u64,
    pub dataset_fingerprint: String,
    pub train_seed_range: [u64; 2],
    pub augment_occlusion_p: f64,
    pub augment_slot_permutation: bool,
    pub perception: PerceptionConfig,
    pub n_records: usize,
    pub skipped_episodes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheFile {
    pub header: CacheHeader,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheOptions {
    pub k: usize,
    pub chunk_stride: u64,
    /// Probability that a demo frame (other than the first) is blacked out
    /// before feature extraction.
    pub augment_occlusion_p: f64,
    /// Store whole-scene features with their object slots in a random order.
    pub augment_slot_permutation: bool,
    pub perception: PerceptionConfig,
}

impl Default for CacheOptions {
    fn default() -> Self {
        Self {
            k: 20,
            chunk_stride: 5,
            augment_occlusion_p: 0.0,
            augment_slot_permutation: false,
            perception: PerceptionConfig::default(),
        }
    }
}

/// Chunk targets for frame `t`: rows past the end repeat the final action.
pub fn chunk_targets(ep: &DemoEpisode, t: usize, k: usize, stride: usize) -> (Vec<[f64; ACTION_DIM]>, Vec<bool>) {
    let last = ep.frames.len() - 1;
    let mut rows = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for i in 0..k {
        let j = t + i * stride;
        valid.push(j <= last);
        rows.push(ep.frames[j.min(last)].action.to_row());
    }
    (rows, valid)
}

fn episode_records(
    ep: &DemoEpisode,
    kind: ExtractorKind,
    opts: &CacheOptions,
    dt: f64,
) -> Result<Option<Vec<FeatureRecord>>> {
    if ep.frames.is_empty() {
        return Ok(Some(Vec::new()));
    }
    let stride = opts.chunk_stride as usize;
    let n = ep.frames.len();
    let mut mask = sim::occlusion_mask(
        opts.augment_occlusion_p,
        n,
        rng::derive_seed(ep.seed, Stream::Augment),
    )?;
    mask[0] = true;
    let mut perm_rng = rng::rng_from_seed(rng::derive_indexed(ep.seed, Stream::Augment, 1));
    let mut perm: Vec<usize> = (0..opts.perception.capacity).collect();
    let obs0 = &ep.frames[0].observation;
    let mut slots: Vec<Option<FeatureRecord>> = vec![None; n];
    for offset in 0..stride.min(n) {
        let mut perceiver = match Perceiver::new(kind, obs0, &ep.prompt, ep.target_id) {
            Ok(p) => p,
            Err(Error::NoTarget) => {
                log::warn!("episode {}: prompt matches no object, skipped", ep.episode_id);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        for t in (offset..n).step_by(stride) {
            let frame = &ep.frames[t];
            let obs = if mask[t] {
                frame.observation.clone()
            } else {
                frame.observation.blacked_out()
            };
            let mut feature = perceiver.perceive(&obs, dt * stride as f64, &opts.perception)?;
            if opts.augment_slot_permutation {
                perm.shuffle(&mut perm_rng);
                permute_slots(&mut feature.0, kind, &opts.perception, &perm)?;
            }
            let (rows, valid) = chunk_targets(ep, t, opts.k, stride);
            slots[t] = Some(FeatureRecord {
                episode_id: ep.episode_id,
                t,
                feature: feature.0,
                proprio: frame.observation.proprio.to_vec().to_vec(),
                action_chunk_target: rows,
                valid_mask: valid,
            });
        }
    }
    Ok(Some(slots.into_iter().map(|r| r.expect("every frame visited")).collect()))
}

/// Runs every episode through the extractor. `fingerprint` identifies the
/// source dataset file.
pub fn extract_and_cache(
    dataset: &Dataset,
    fingerprint: &str,
    kind: ExtractorKind,
    opts: &CacheOptions,
) -> Result<CacheFile> {
    if opts.k == 0 || opts.chunk_stride == 0 {
        return Err(Error::InvalidArgument("k and chunk_stride must be positive".into()));
    }
    if !(0.0..=1.0).contains(&opts.augment_occlusion_p) {
        return Err(Error::InvalidArgument("augment_occlusion_p outside [0, 1]".into()));
    }
    opts.perception.validate()?;
    let dt = dataset.header.sim.dt;
    let per_episode: Vec<Result<Option<Vec<FeatureRecord>>>> = dataset
        .episodes
        .par_iter()
        .map(|ep| episode_records(ep, kind, opts, dt))
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (ep, r) in dataset.episodes.iter().zip(per_episode) {
        match r? {
            Some(mut recs) => records.append(&mut recs),
            None => skipped.push(ep.episode_id),
        }
    }
    Ok(CacheFile {
        header: CacheHeader {
            schema_version: CACHE_SCHEMA_VERSION,
            kind,
            feature_dim: opts.perception.feature_width(),
            proprio_dim: Proprio::DIM,
            k: opts.k,
            action_dim: ACTION_DIM,
            chunk_stride: opts.chunk_stride,
            dataset_fingerprint: fingerprint.to_string(),
            train_seed_range: dataset.header.seed_range,
            augment_occlusion_p: opts.augment_occlusion_p,
            augment_slot_permutation: opts.augment_slot_permutation,
            perception: opts.perception.clone(),
            n_records: records.len(),
            skipped_episodes: skipped,
        },
        records,
    })
}

/// Loads, fingerprints and caches a dataset file.
pub fn extract_and_cache_file(path: &Path, kind: ExtractorKind, opts: &CacheOptions) -> Result<CacheFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let dataset = Dataset::parse(&bytes, path)?;
    extract_and_cache(&dataset, &fingerprint_bytes(&bytes), kind, opts)
}

impl CacheFile {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(|e| Error::io("<cache>", e))?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<cache>", e))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn parse(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut lines = BufReader::new(bytes).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::corrupt(origin, "empty file"))?
            .map_err(|e| Error::io(origin, e))?;
        let header: CacheHeader =
            serde_json::from_str(&first).map_err(|e| Error::corrupt(origin, format!("header: {e}")))?;
        if header.schema_version != CACHE_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: CACHE_SCHEMA_VERSION,
                found: header.schema_version,
            });
        }
        let mut records = Vec::with_capacity(header.n_records);
        for i in 0..header.n_records {
            let line = lines
                .next()
                .ok_or_else(|| {
                    Error::corrupt(origin, format!("truncated: {i} of {} records", header.n_records))
                })?
                .map_err(|e| Error::io(origin, e))?;
            let r: FeatureRecord = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(origin, format!("record {i}: {e}")))?;
            if r.feature.len() != header.feature_dim
                || r.proprio.len() != header.proprio_dim
                || r.action_chunk_target.len() != header.k
                || r.valid_mask.len() != header.k
            {
                return Err(Error::corrupt(origin, format!("record {i}: shape disagrees with header")));
            }
            records.push(r);
        }
        for line in lines {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if !line.trim().is_empty() {
                return Err(Error::corrupt(origin, "trailing content after records"));
            }
        }
        Ok(CacheFile { header, records })
    }
}

/// What a reader expects of a cache; unset fields are not checked.
#[derive(Debug, Clone, Default)]
pub struct CacheExpectation {
    pub fingerprint: Option<String>,
    pub k: Option<usize>,
    pub kind: Option<ExtractorKind>,
}

impl CacheExpectation {
    pub fn check(&self, h: &CacheHeader) -> Result<()> {
        if let Some(fp) = &self.fingerprint {
            if fp != &h.dataset_fingerprint {
                return Err(Error::Fingerprint {
                    expected: fp.clone(),
                    found: h.dataset_fingerprint.clone(),
                });
            }
        }
        if let Some(k) = self.k {
            if k != h.k {
                return Err(Error::Dimension(format!("cache has K = {}, requested {k}", h.k)));
            }
        }
        if let Some(kind) = self.kind {
            if kind != h.kind {
                return Err(Error::Incompatible(format!("cache holds {} features, requested {kind}", h.kind)));
            }
        }
        Ok(())
    }
}

pub fn read_cache(path: &Path, expect: &CacheExpectation) -> Result<CacheFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cache = CacheFile::parse(&bytes, path)?;
    expect.check(&cache.header)?;
    Ok(cache)
}

/// Shuffled index batches covering `0..n` exactly once; the last batch may
/// be short. The order depends only on `(seed, epoch)`.
pub fn minibatch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty cache".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from_seed(rng::derive_indexed(seed, Stream::Shuffle, epoch));
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One epoch of record batches.
pub fn minibatches(cache: &CacheFile, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<&FeatureRecord>>> {
    let batches = minibatch_indices(cache.records.len(), batch_size, seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(|b| b.into_iter().map(|i| &cache.records[i]).collect())
        .collect())
}
