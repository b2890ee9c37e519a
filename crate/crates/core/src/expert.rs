//! Scripted expert demonstrations.
//!
//! Each episode draws a fresh scene, picks one object uniformly as the grasp
//! target and rolls out a waypoint controller. Because different episodes of
//! the same scene distribution grasp different objects, the resulting dataset
//! carries object-level multimodality by construction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_aabb, BoxPrompt, Pose2};
use crate::rng::{self, Stream};
use crate::sim::{self, Action, Observation, Scene, SimConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Extra height above `h_lift` the expert lifts to.
    pub lift_margin: f64,
    /// Prompt edge jitter as a fraction of the box extent.
    pub prompt_jitter: f64,
    pub max_episode_ticks: u64,
    /// Highest tolerated fraction of rollouts that must be regenerated.
    pub max_failure_rate: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            lift_margin: 0.02,
            prompt_jitter: 0.10,
            max_episode_ticks: 1000,
            max_failure_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPhase {
    ApproachAbove,
    Align,
    Descend,
    Close,
    Lift,
    Done,
}

pub fn choose_target(scene: &Scene, seed: u64) -> Result<u32> {
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut ids = scene.object_ids();
    ids.sort_unstable();
    let mut rng = rng::rng_for(seed, Stream::Target);
    Ok(ids[rng.gen_range(0..ids.len())])
}

/// One waypoint-controller decision. Phases whose waypoint is already reached
/// (within half the grasp tolerance) are skipped within the same call.
pub fn expert_action(
    scene: &Scene,
    target_id: u32,
    mut phase: ExpertPhase,
    sim_cfg: &SimConfig,
    cfg: &ExpertConfig,
) -> Result<(Action, ExpertPhase)> {
    let obj = scene.object(target_id)?;
    let g = &scene.gripper;
    let pos_tol = 0.5 * sim_cfg.eps_pos;
    let ang_tol = 0.5 * sim_cfg.eps_theta;
    let [dx, dy, dth] = obj.pose.delta(&g.pose);
    let at_xy = dx.abs() <= pos_tol && dy.abs() <= pos_tol;
    let aligned = dth.abs() <= ang_tol;
    let lift_to = sim_cfg.h_lift + cfg.lift_margin;

    loop {
        let (action, reached) = match phase {
            ExpertPhase::ApproachAbove => (
                Action {
                    target: obj.pose,
                    target_height: sim_cfg.home_height,
                    grip: false,
                },
                at_xy,
            ),
            ExpertPhase::Align => (
                Action {
                    target: obj.pose,
                    target_height: sim_cfg.home_height,
                    grip: false,
                },
                at_xy && aligned,
            ),
            ExpertPhase::Descend => (
                Action {
                    target: obj.pose,
                    target_height: 0.0,
                    grip: false,
                },
                g.height <= pos_tol,
            ),
            ExpertPhase::Close => (
                Action {
                    target: obj.pose,
                    target_height: 0.0,
                    grip: true,
                },
                g.grip,
            ),
            ExpertPhase::Lift => (
                Action {
                    target: g.pose,
                    target_height: lift_to,
                    grip: true,
                },
                g.height >= lift_to - pos_tol,
            ),
            ExpertPhase::Done => return Ok((Action::hold(g), ExpertPhase::Done)),
        };
        if !reached {
            return Ok((action, phase));
        }
        phase = match phase {
            ExpertPhase::ApproachAbove => ExpertPhase::Align,
            ExpertPhase::Align => ExpertPhase::Descend,
            ExpertPhase::Descend => ExpertPhase::Close,
            ExpertPhase::Close => ExpertPhase::Lift,
            ExpertPhase::Lift | ExpertPhase::Done => ExpertPhase::Done,
        };
    }
}

/// Bounding box of the target's footprint with each edge independently
/// shifted by up to `jitter` times the box extent.
pub fn make_prompt<R: Rng>(
    scene: &Scene,
    target_id: u32,
    jitter: f64,
    rng: &mut R,
) -> Result<BoxPrompt> {
    let obj = scene.object(target_id)?;
    let bb = footprint_aabb(&obj.pose, obj.half_extents);
    if jitter <= 0.0 {
        return Ok(bb);
    }
    let (w, h) = (bb.width(), bb.height());
    let mut j = |extent: f64| rng.gen_range(-jitter..=jitter) * extent;
    let x_min = bb.x_min + j(w);
    let y_min = bb.y_min + j(h);
    let x_max = bb.x_max + j(w);
    let y_max = bb.y_max + j(h);
    BoxPrompt::new(x_min, y_min, x_max, y_max)
}

pub fn prompt_for_seed(scene: &Scene, target_id: u32, jitter: f64, seed: u64) -> Result<BoxPrompt> {
    let mut rng = rng::rng_for(seed, Stream::PromptJitter);
    make_prompt(scene, target_id, jitter, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub episode_id: u64,
    pub seed: u64,
    pub prompt: BoxPrompt,
    pub target_id: u32,
    pub frames: Vec<Frame>,
}

impl DemoEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Runs the expert from a fresh scene. Returns `None` if it fails to lift the
/// target within the tick budget.
pub fn rollout_expert(
    sim_cfg: &SimConfig,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Option<DemoEpisode>> {
    let mut scene = sim::init_scene(sim_cfg, seed)?;
    let target_id = choose_target(&scene, seed)?;
    let prompt = prompt_for_seed(&scene, target_id, cfg.prompt_jitter, seed)?;
    let mut phase = ExpertPhase::ApproachAbove;
    let mut frames = Vec::new();
    while scene.tick < cfg.max_episode_ticks {
        let (action, next_phase) = expert_action(&scene, target_id, phase, sim_cfg, cfg)?;
        phase = next_phase;
        if phase == ExpertPhase::Done {
            break;
        }
        frames.push(Frame {
            observation: sim::observe(&scene, true),
            action,
        });
        scene = sim::step(&scene, &action, sim_cfg, sim_cfg.dt);
    }
    if phase != ExpertPhase::Done || !sim::success(&scene, target_id, sim_cfg)? {
        return Ok(None);
    }
    Ok(Some(DemoEpisode {
        episode_id: 0,
        seed,
        prompt,
        target_id,
        frames,
    }))
}

/// Replays an episode's actions from its seed. Errors if any recorded
/// observation diverges; returns whether the target ends up lifted.
pub fn replay_episode(sim_cfg: &SimConfig, ep: &DemoEpisode) -> Result<bool> {
    let mut scene = sim::init_scene(sim_cfg, ep.seed)?;
    for (t, frame) in ep.frames.iter().enumerate() {
        let obs = sim::observe(&scene, frame.observation.visible);
        if obs != frame.observation {
            return Err(Error::Incompatible(format!(
                "episode {} diverges from replay at frame {t}",
                ep.episode_id
            )));
        }
        scene = sim::step(&scene, &frame.action, sim_cfg, sim_cfg.dt);
    }
    sim::success(&scene, ep.target_id, sim_cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub sim: SimConfig,
    pub expert: ExpertConfig,
    pub n_episodes: usize,
    pub seed: u64,
    /// Half-open range of scene seeds consumed, regenerations included.
    pub seed_range: [u64; 2],
    pub regenerated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeLine {
    episode_id: u64,
    seed: u64,
    target_id: u32,
    prompt: BoxPrompt,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameLine {
    t: usize,
    observation: Observation,
    action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum DatasetLine {
    Header(DatasetHeader),
    Episode(EpisodeLine),
    Frame(FrameLine),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<DemoEpisode>,
}

/// Generates `n_episodes` successful expert episodes from scene seeds
/// `seed, seed + 1, ...`, skipping seeds whose rollout fails.
pub fn generate_dataset(
    sim_cfg: &SimConfig,
    cfg: &ExpertConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be positive".into()));
    }
    sim_cfg.validate()?;
    let allowed_failures = (cfg.max_failure_rate * n_episodes as f64).floor() as usize;
    let mut episodes: Vec<DemoEpisode> = Vec::with_capacity(n_episodes);
    let mut next = seed;
    let mut failures = 0usize;
    while episodes.len() < n_episodes {
        let want = (n_episodes - episodes.len()) as u64;
        let batch: Vec<Result<Option<DemoEpisode>>> = (next..next + want)
            .into_par_iter()
            .map(|s| rollout_expert(sim_cfg, cfg, s))
            .collect();
        next += want;
        for r in batch {
            match r? {
                Some(mut ep) => {
                    ep.episode_id = episodes.len() as u64;
                    episodes.push(ep);
                }
                None => {
                    failures += 1;
                    if failures > allowed_failures {
                        return Err(Error::Config(format!(
                            "expert failed {failures} rollouts (limit {allowed_failures} for {n_episodes} episodes)"
                        )));
                    }
                }
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            sim: sim_cfg.clone(),
            expert: cfg.clone(),
            n_episodes,
            seed,
            seed_range: [seed, next],
            regenerated: failures,
        },
        episodes,
    })
}

impl Dataset {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let line = |l: &DatasetLine, w: &mut W| -> Result<()> {
            serde_json::to_writer(&mut *w, l)?;
            w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))
        };
        line(&DatasetLine::Header(self.header.clone()), &mut w)?;
        for ep in &self.episodes {
            line(
                &DatasetLine::Episode(EpisodeLine {
                    episode_id: ep.episode_id,
                    seed: ep.seed,
                    target_id: ep.target_id,
                    prompt: ep.prompt,
                    length: ep.frames.len(),
                }),
                &mut w,
            )?;
            for (t, f) in ep.frames.iter().enumerate() {
                line(
                    &DatasetLine::Frame(FrameLine {
                        t,
                        observation: f.observation.clone(),
                        action: f.action,
                    }),
                    &mut w,
                )?;
            }
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
        let corrupt = |reason: String| Error::corrupt(origin, reason);
        let mut lines = BufReader::new(bytes).lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, DatasetLine)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::corrupt(origin, format!("truncated: expected {what}")))?;
            let line = line.map_err(|e| Error::io(origin, e))?;
            let parsed = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(origin, format!("line {}: {e}", no + 1)))?;
            Ok((no + 1, parsed))
        };
        let header = match next_line("header")? {
            (_, DatasetLine::Header(h)) => h,
            (no, _) => return Err(corrupt(format!("line {no}: expected header"))),
        };
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: DATASET_SCHEMA_VERSION,
                found: header.schema_version,
            });
        }
        let mut episodes = Vec::with_capacity(header.n_episodes);
        for _ in 0..header.n_episodes {
            let ep = match next_line("episode")? {
                (_, DatasetLine::Episode(e)) => e,
                (no, _) => return Err(corrupt(format!("line {no}: expected episode"))),
            };
            let mut frames = Vec::with_capacity(ep.length);
            for t in 0..ep.length {
                match next_line("frame")? {
                    (_, DatasetLine::Frame(f)) if f.t == t => frames.push(Frame {
                        observation: f.observation,
                        action: f.action,
                    }),
                    (no, _) => return Err(corrupt(format!("line {no}: expected frame {t}"))),
                }
            }
            episodes.push(DemoEpisode {
                episode_id: ep.episode_id,
                seed: ep.seed,
                prompt: ep.prompt,
                target_id: ep.target_id,
                frames,
            });
        }
        if let Some((no, _)) = lines.find(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)) {
            return Err(corrupt(format!("line {}: trailing content", no + 1)));
        }
        Ok(Dataset { header, episodes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Where the expert heads first: the `(x, y)` of its first approach waypoint.
pub fn first_waypoint(ep: &DemoEpisode) -> Option<Pose2> {
    ep.frames.first().map(|f| f.action.target)
}
