//! Asynchronous chunked-action execution.
//!
//! A low-rate inference loop predicts action chunks and a high-rate control
//! loop consumes them through a tick-indexed buffer. Chunk element `i` of a
//! prediction made at tick `p` owns the control ticks
//! `[p + i*s, p + (i+1)*s)` where `s = f_c / f_p`; it is entered under every
//! one of those ticks so that the control loop only ever reads candidates
//! keyed by the current tick. Elements whose first tick precedes the chunk's
//! arrival are dropped on insertion.
//!
//! [`run_episode`] is the reference lockstep scheduler. [`run_episode_threaded`]
//! splits inference and control across two threads with a simulated clock and
//! must produce the same command log.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert;
use crate::geometry::BoxPrompt;
use crate::perception::{ExtractorKind, PerceptionConfig, Perceiver};
use crate::policy::Policy;
use crate::sim::{self, Action, Observation, Scene, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBufferPolicy {
    HoldLastCommand,
    HoldPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub policy_hz: u32,
    pub control_hz: u32,
    /// Inference latency in control ticks.
    pub latency_ticks: u64,
    /// Ensemble decay per policy period of candidate age.
    pub ensemble_m: f64,
    pub empty_buffer: EmptyBufferPolicy,
    pub max_ticks: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            policy_hz: 20,
            control_hz: 100,
            latency_ticks: 5,
            ensemble_m: 0.1,
            empty_buffer: EmptyBufferPolicy::HoldLastCommand,
            max_ticks: 600,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policy_hz == 0 || self.control_hz == 0 || self.control_hz % self.policy_hz != 0 {
            return Err(Error::Config(
                "runtime: control_hz must be a positive multiple of policy_hz".into(),
            ));
        }
        if !(self.ensemble_m >= 0.0) {
            return Err(Error::Config("runtime: ensemble_m must be non-negative".into()));
        }
        if self.max_ticks == 0 {
            return Err(Error::Config("runtime: max_ticks must be positive".into()));
        }
        Ok(())
    }

    /// Control ticks per policy period.
    pub fn stride(&self) -> u64 {
        (self.control_hz / self.policy_hz) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedCandidate {
    /// Control tick this candidate is served at.
    pub target_tick: u64,
    /// First tick owned by the chunk element this candidate came from.
    pub element_tick: u64,
    pub action: Action,
    /// Tick at which the chunk became available.
    pub birth_tick: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimedActionBuffer {
    entries: BTreeMap<u64, Vec<TimedCandidate>>,
}

impl TimedActionBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ticks(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn candidates(&self, tick: u64) -> &[TimedCandidate] {
        self.entries.get(&tick).map_or(&[], |v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Schedules a chunk predicted at `predicted_at` that becomes available
    /// at `available_at`, then prunes everything before `predicted_at`.
    /// Pruning stops there because the control loop may still be serving
    /// ticks between prediction and arrival.
    pub fn insert_chunk(&mut self, chunk: &[Action], predicted_at: u64, available_at: u64, stride: u64) {
        debug_assert!(available_at >= predicted_at);
        for (i, a) in chunk.iter().enumerate() {
            let start = predicted_at + i as u64 * stride;
            if start < available_at {
                continue;
            }
            for tick in start..start + stride {
                self.entries.entry(tick).or_default().push(TimedCandidate {
                    target_tick: tick,
                    element_tick: start,
                    action: *a,
                    birth_tick: available_at,
                });
            }
        }
        self.prune(predicted_at);
    }

    /// Drops every entry strictly before `now`.
    pub fn prune(&mut self, now: u64) {
        self.entries = self.entries.split_off(&now);
    }

    /// Prunes and returns the candidates for `now`.
    pub fn take_current(&mut self, now: u64) -> Vec<TimedCandidate> {
        self.prune(now);
        self.entries.remove(&now).unwrap_or_default()
    }
}

/// Normalized weights `exp(-m * age)` with age in policy periods.
pub fn ensemble_weights(candidates: &[TimedCandidate], now: u64, m: f64, stride: u64) -> Vec<f64> {
    // Shift by the youngest age so large m cannot underflow every weight.
    let ages: Vec<f64> = candidates
        .iter()
        .map(|c| now.saturating_sub(c.birth_tick) as f64 / stride as f64)
        .collect();
    let min_age = ages.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = ages.iter().map(|a| (-m * (a - min_age)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted mean of the continuous channels and weighted vote on the grip.
/// `None` when there are no candidates.
pub fn ensemble(candidates: &[TimedCandidate], now: u64, m: f64, stride: u64) -> Option<Action> {
    match candidates {
        [] => None,
        [only] => Some(only.action),
        _ => {
            let w = ensemble_weights(candidates, now, m, stride);
            let mut acc = [0.0; 4];
            let mut closed = 0.0;
            for (c, wi) in candidates.iter().zip(&w) {
                let a = &c.action;
                acc[0] += wi * a.target.x;
                acc[1] += wi * a.target.y;
                acc[2] += wi * a.target.theta;
                acc[3] += wi * a.target_height;
                if a.grip {
                    closed += wi;
                }
            }
            Some(Action {
                target: crate::geometry::Pose2 {
                    x: acc[0],
                    y: acc[1],
                    theta: acc[2],
                },
                target_height: acc[3],
                grip: closed > 0.5,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub tick: u64,
    pub action: Action,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub ticks: u64,
    pub hit_rate: f64,
    pub failure: Option<String>,
    pub commands: Vec<CommandRecord>,
}

impl EpisodeOutcome {
    /// Hit-rate over ticks `>= warmup`.
    pub fn hit_rate_after(&self, warmup: u64) -> Option<f64> {
        let tail: Vec<&CommandRecord> = self.commands.iter().filter(|c| c.tick >= warmup).collect();
        if tail.is_empty() {
            return None;
        }
        Some(tail.iter().filter(|c| c.candidates > 0).count() as f64 / tail.len() as f64)
    }

    fn finish(success: bool, commands: Vec<CommandRecord>, failure: Option<String>) -> Self {
        let ticks = commands.len() as u64;
        let hits = commands.iter().filter(|c| c.candidates > 0).count();
        let hit_rate = if commands.is_empty() {
            0.0
        } else {
            hits as f64 / commands.len() as f64
        };
        Self {
            success,
            ticks,
            hit_rate,
            failure,
            commands,
        }
    }
}

/// Everything that defines one evaluation trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub scene_seed: u64,
    pub target_id: u32,
    pub prompt: BoxPrompt,
    pub occlusion_p: f64,
    pub occlusion_seed: u64,
}

impl TrialSpec {
    /// Target, prompt and occlusion pattern all derive from the scene seed, so
    /// every method sees the same trial.
    pub fn from_seed(sim_cfg: &SimConfig, prompt_jitter: f64, scene_seed: u64, occlusion_p: f64) -> Result<Self> {
        let scene = sim::init_scene(sim_cfg, scene_seed)?;
        let target_id = expert::choose_target(&scene, scene_seed)?;
        let prompt = expert::prompt_for_seed(&scene, target_id, prompt_jitter, scene_seed)?;
        Ok(Self {
            scene_seed,
            target_id,
            prompt,
            occlusion_p,
            occlusion_seed: scene_seed,
        })
    }
}

/// Policy plus extractor state: what the inference loop owns.
pub struct InferenceState<'a> {
    policy: &'a Policy,
    perceiver: Option<Perceiver>,
    kind: ExtractorKind,
    prompt: BoxPrompt,
    target_id: u32,
    perception: &'a PerceptionConfig,
    period_s: f64,
}

impl<'a> InferenceState<'a> {
    pub fn new(
        policy: &'a Policy,
        kind: ExtractorKind,
        trial: &TrialSpec,
        perception: &'a PerceptionConfig,
        rt: &RuntimeConfig,
    ) -> Result<Self> {
        policy.check_compatible(kind, perception.feature_width())?;
        if policy.meta.chunk_stride != rt.stride() {
            return Err(Error::Incompatible(format!(
                "checkpoint chunk stride {} != runtime policy period of {} ticks",
                policy.meta.chunk_stride,
                rt.stride()
            )));
        }
        Ok(Self {
            policy,
            perceiver: None,
            kind,
            prompt: trial.prompt,
            target_id: trial.target_id,
            perception,
            period_s: 1.0 / rt.policy_hz as f64,
        })
    }

    /// Perceive one frame and predict a chunk. The first call binds the prompt
    /// and needs a visible frame.
    pub fn infer(&mut self, obs: &Observation) -> Result<Vec<Action>> {
        if self.perceiver.is_none() {
            self.perceiver = Some(Perceiver::new(self.kind, obs, &self.prompt, self.target_id)?);
        }
        let perceiver = self.perceiver.as_mut().expect("bound above");
        let feature = perceiver.perceive(obs, self.period_s, self.perception)?;
        let chunk = self.policy.act(feature.as_slice(), &obs.proprio.to_vec())?;
        Ok(chunk.actions())
    }
}

/// Observe, perceive, predict and schedule. Returns the chunk that was inserted.
pub fn inference_step(
    scene: &Scene,
    visible: bool,
    state: &mut InferenceState<'_>,
    buffer: &mut TimedActionBuffer,
    tick: u64,
    rt: &RuntimeConfig,
) -> Result<Vec<Action>> {
    let obs = sim::observe(scene, visible);
    let chunk = state.infer(&obs)?;
    buffer.insert_chunk(&chunk, tick, tick + rt.latency_ticks, rt.stride());
    Ok(chunk)
}

/// Prune, gather, ensemble (or fall back) and step the world.
pub fn control_tick(
    scene: &Scene,
    buffer: &mut TimedActionBuffer,
    tick: u64,
    last_command: &Action,
    rt: &RuntimeConfig,
    sim_cfg: &SimConfig,
) -> (Scene, CommandRecord) {
    let cands = buffer.take_current(tick);
    let command = ensemble(&cands, tick, rt.ensemble_m, rt.stride()).unwrap_or_else(|| match rt.empty_buffer {
        EmptyBufferPolicy::HoldLastCommand => *last_command,
        EmptyBufferPolicy::HoldPose => Action::hold(&scene.gripper),
    });
    let next = sim::step(scene, &command, sim_cfg, sim_cfg.dt);
    (
        next,
        CommandRecord {
            tick,
            action: command,
            candidates: cands.len(),
        },
    )
}

/// Visibility of each inference frame; the prompt frame is always visible.
pub fn inference_visibility(trial: &TrialSpec, rt: &RuntimeConfig) -> Result<Vec<bool>> {
    let n = (rt.max_ticks / rt.stride() + 1) as usize;
    let mut mask = sim::occlusion_mask(trial.occlusion_p, n, trial.occlusion_seed)?;
    mask[0] = true;
    Ok(mask)
}

fn failure_outcome(e: Error, commands: Vec<CommandRecord>) -> Result<EpisodeOutcome> {
    match e {
        Error::TrackLost(_) | Error::NoTarget => Ok(EpisodeOutcome::finish(false, commands, Some(e.to_string()))),
        other => Err(other),
    }
}

/// Reference lockstep schedule: at every policy-aligned tick an inference is
/// launched (its chunk arrives `latency_ticks` later), then every tick runs
/// one control step. Stops on success or after `max_ticks`.
pub fn run_episode(
    policy: &Policy,
    kind: ExtractorKind,
    trial: &TrialSpec,
    sim_cfg: &SimConfig,
    perception: &PerceptionConfig,
    rt: &RuntimeConfig,
) -> Result<EpisodeOutcome> {
    rt.validate()?;
    let mut scene = sim::init_scene(sim_cfg, trial.scene_seed)?;
    let mask = inference_visibility(trial, rt)?;
    let mut state = InferenceState::new(policy, kind, trial, perception, rt)?;
    let mut buffer = TimedActionBuffer::new();
    let mut last = Action::hold(&scene.gripper);
    let mut commands = Vec::with_capacity(rt.max_ticks as usize);
    let stride = rt.stride();
    for tick in 0..rt.max_ticks {
        if tick % stride == 0 {
            let visible = mask[(tick / stride) as usize];
            if let Err(e) = inference_step(&scene, visible, &mut state, &mut buffer, tick, rt) {
                return failure_outcome(e, commands);
            }
        }
        let (next, rec) = control_tick(&scene, &mut buffer, tick, &last, rt, sim_cfg);
        scene = next;
        last = rec.action;
        commands.push(rec);
        if sim::success(&scene, trial.target_id, sim_cfg)? {
            return Ok(EpisodeOutcome::finish(true, commands, None));
        }
    }
    Ok(EpisodeOutcome::finish(false, commands, None))
}

struct Shared {
    buffer: TimedActionBuffer,
    /// Policy tick of the newest chunk inserted, if any.
    inserted_through: Option<u64>,
    /// First failed inference and the tick it was launched at.
    failed: Option<(u64, Error)>,
}

/// Two-thread schedule under a simulated clock. The control thread publishes
/// a snapshot at each policy-aligned tick; the inference thread owns the
/// extractor and policy and writes chunks into the shared buffer. Before
/// serving a tick the control thread waits for every chunk due by then, which
/// makes the command log identical to [`run_episode`].
pub fn run_episode_threaded(
    policy: &Policy,
    kind: ExtractorKind,
    trial: &TrialSpec,
    sim_cfg: &SimConfig,
    perception: &PerceptionConfig,
    rt: &RuntimeConfig,
) -> Result<EpisodeOutcome> {
    rt.validate()?;
    let mut scene = sim::init_scene(sim_cfg, trial.scene_seed)?;
    let mask = inference_visibility(trial, rt)?;
    let stride = rt.stride();
    let shared = Arc::new((
        Mutex::new(Shared {
            buffer: TimedActionBuffer::new(),
            inserted_through: None,
            failed: None,
        }),
        Condvar::new(),
    ));
    let (tx, rx) = mpsc::channel::<(u64, Scene, bool)>();

    let result = thread::scope(|s| -> Result<EpisodeOutcome> {
        let worker_shared = Arc::clone(&shared);
        let mut state = InferenceState::new(policy, kind, trial, perception, rt)?;
        s.spawn(move || {
            let (lock, cv) = &*worker_shared;
            for (tick, snapshot, visible) in rx {
                let obs = sim::observe(&snapshot, visible);
                let out = state.infer(&obs);
                let mut g = lock.lock().expect("buffer lock");
                match out {
                    Ok(chunk) => {
                        g.buffer.insert_chunk(&chunk, tick, tick + rt.latency_ticks, stride);
                        g.inserted_through = Some(tick);
                    }
                    Err(e) => {
                        if g.failed.is_none() {
                            g.failed = Some((tick, e));
                        }
                        g.inserted_through = Some(tick);
                    }
                }
                cv.notify_all();
            }
        });

        let (lock, cv) = &*shared;
        let mut last = Action::hold(&scene.gripper);
        let mut commands = Vec::with_capacity(rt.max_ticks as usize);
        let mut launched: Vec<u64> = Vec::new();
        for tick in 0..rt.max_ticks {
            if tick % stride == 0 {
                let visible = mask[(tick / stride) as usize];
                tx.send((tick, scene.clone(), visible)).expect("inference thread alive");
                launched.push(tick);
            }
            // Newest launched chunk that is due at this tick.
            let due = launched
                .iter()
                .rev()
                .find(|&&p| p + rt.latency_ticks <= tick)
                .copied();
            let mut g = lock.lock().expect("buffer lock");
            if let Some(due) = due {
                while g.inserted_through.map_or(true, |t| t < due) {
                    g = cv.wait(g).expect("buffer lock");
                }
            }
            // Lockstep stops at the failing inference tick before serving it.
            if let Some((p, e)) = g.failed.take() {
                drop(g);
                drop(tx);
                commands.truncate(p as usize);
                return failure_outcome(e, commands);
            }
            let (next, rec) = control_tick(&scene, &mut g.buffer, tick, &last, rt, sim_cfg);
            drop(g);
            scene = next;
            last = rec.action;
            commands.push(rec);
            if sim::success(&scene, trial.target_id, sim_cfg)? {
                drop(tx);
                return settle(lock, cv, launched.last().copied(), true, commands);
            }
        }
        drop(tx);
        settle(lock, cv, launched.last().copied(), false, commands)
    });
    result
}

/// Waits for every launched inference so that a failure the episode outran is
/// still reported at the tick it happened.
fn settle(
    lock: &Mutex<Shared>,
    cv: &Condvar,
    last_launched: Option<u64>,
    success: bool,
    mut commands: Vec<CommandRecord>,
) -> Result<EpisodeOutcome> {
    let mut g = lock.lock().expect("buffer lock");
    if let Some(last) = last_launched {
        while g.inserted_through.map_or(true, |t| t < last) {
            g = cv.wait(g).expect("buffer lock");
        }
    }
    match g.failed.take() {
        Some((p, e)) => {
            commands.truncate(p as usize);
            failure_outcome(e, commands)
        }
        None => Ok(EpisodeOutcome::finish(success, commands, None)),
    }
}
