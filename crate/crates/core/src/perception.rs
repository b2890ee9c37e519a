//! Frozen feature extractors.
//!
//! [`ExtractorKind::ObjectCentric`] is a promptable single-object tracker: a
//! box prompt at `t = 0` selects the target, after which a constant-velocity
//! memory carries the target through blacked-out frames. The two global
//! extractors see the whole scene with no memory; one of them also receives a
//! per-frame box indicator for the target.
//!
//! ObjectCentric layout (width 10):
//!
//! | index | channel                                   |
//! |-------|-------------------------------------------|
//! | 0..3  | target pose minus gripper pose (x, y, θ)  |
//! | 3..5  | target half extents                       |
//! | 5..8  | estimated target velocity (x, y, θ)       |
//! | 8     | visibility flag                           |
//! | 9     | staleness, `min(frames_since_seen, cap) / cap` |
//!
//! Global layout: `capacity` slots of (relative x, y, θ, half extents) sorted
//! by object id, zero padded, followed by the proprio block. The boxed
//! variant appends one IoU indicator per slot. All extractors zero-pad to
//! [`PerceptionConfig::feature_width`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_aabb, wrap_angle, BoxPrompt, Pose2};
use crate::sim::{ObjectView, Observation, Proprio};

pub const OBJECT_CENTRIC_DIM: usize = 10;
const SLOT_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    ObjectCentric,
    GlobalScene,
    GlobalSceneWithBox,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 3] = [
        ExtractorKind::ObjectCentric,
        ExtractorKind::GlobalScene,
        ExtractorKind::GlobalSceneWithBox,
    ];
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExtractorKind::ObjectCentric => "object_centric",
            ExtractorKind::GlobalScene => "global_scene",
            ExtractorKind::GlobalSceneWithBox => "global_scene_with_box",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    /// Weight of the newest finite-difference velocity in the smoothed estimate.
    pub velocity_alpha: f64,
    pub staleness_cap: u32,
    /// Object slots in the global layouts.
    pub capacity: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            velocity_alpha: 0.5,
            staleness_cap: 50,
            capacity: 6,
        }
    }
}

impl PerceptionConfig {
    pub fn global_dim(&self) -> usize {
        SLOT_DIM * self.capacity + Proprio::DIM
    }

    pub fn conditioned_dim(&self) -> usize {
        (SLOT_DIM + 1) * self.capacity + Proprio::DIM
    }

    /// Common padded width shared by every extractor.
    pub fn feature_width(&self) -> usize {
        OBJECT_CENTRIC_DIM
            .max(self.global_dim())
            .max(self.conditioned_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.velocity_alpha > 0.0 && self.velocity_alpha <= 1.0) {
            return Err(Error::Config("perception: velocity_alpha must be in (0, 1]".into()));
        }
        if self.staleness_cap == 0 || self.capacity == 0 {
            return Err(Error::Config("perception: staleness_cap and capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn padded(mut self, width: usize) -> FeatureVector {
        if self.0.len() < width {
            self.0.resize(width, 0.0);
        }
        self
    }
}

/// Tracker memory for one prompted object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub target_id: u32,
    pub last_pose: Pose2,
    pub velocity: [f64; 3],
    pub frames_since_seen: u32,
    pub extents: [f64; 2],
}

fn view_aabb(v: &ObjectView) -> BoxPrompt {
    footprint_aabb(&v.pose, v.half_extents)
}

fn sorted_views(obs: &Observation) -> Vec<&ObjectView> {
    let mut views: Vec<&ObjectView> = obs.object_views.iter().collect();
    views.sort_by_key(|v| v.id);
    views
}

/// Object whose footprint box best overlaps the prompt, with its IoU.
/// Ties go to the lower id.
pub fn match_prompt(obs0: &Observation, prompt: &BoxPrompt) -> Result<(u32, f64)> {
    if !obs0.visible {
        return Err(Error::InvalidArgument("prompt frame must be visible".into()));
    }
    let mut best: Option<(u32, f64)> = None;
    for v in sorted_views(obs0) {
        let iou = view_aabb(v).iou(prompt);
        if iou > best.map_or(0.0, |(_, b)| b) {
            best = Some((v.id, iou));
        }
    }
    best.ok_or(Error::NoTarget)
}

/// Binds the tracker to the object designated by `prompt`.
pub fn bind_prompt(obs0: &Observation, prompt: &BoxPrompt) -> Result<TrackState> {
    let (id, _) = match_prompt(obs0, prompt)?;
    let v = obs0.view(id).expect("matched id is present");
    Ok(TrackState {
        target_id: id,
        last_pose: v.pose,
        velocity: [0.0; 3],
        frames_since_seen: 0,
        extents: v.half_extents,
    })
}

fn object_centric_feature(state: &TrackState, proprio: &Proprio, visible: bool, cap: u32) -> FeatureVector {
    let rel = state.last_pose.delta(&proprio.pose);
    let staleness = state.frames_since_seen.min(cap) as f64 / cap as f64;
    FeatureVector(vec![
        rel[0],
        rel[1],
        rel[2],
        state.extents[0],
        state.extents[1],
        state.velocity[0],
        state.velocity[1],
        state.velocity[2],
        if visible { 1.0 } else { 0.0 },
        staleness,
    ])
}

/// Advances the tracker by one frame and emits the object-centric feature.
///
/// Visible frames re-anchor the pose and update the smoothed velocity;
/// blacked-out frames extrapolate the pose at the remembered velocity.
pub fn track_step(
    state: &TrackState,
    obs: &Observation,
    dt: f64,
    cfg: &PerceptionConfig,
) -> Result<(TrackState, FeatureVector)> {
    let mut next = state.clone();
    if obs.visible {
        let v = obs.view(state.target_id).ok_or(Error::TrackLost(state.target_id))?;
        let d = v.pose.delta(&state.last_pose);
        let a = cfg.velocity_alpha;
        for i in 0..3 {
            next.velocity[i] = a * (d[i] / dt) + (1.0 - a) * state.velocity[i];
        }
        next.last_pose = v.pose;
        next.extents = v.half_extents;
        next.frames_since_seen = 0;
    } else {
        let p = &state.last_pose;
        next.last_pose = Pose2 {
            x: p.x + state.velocity[0] * dt,
            y: p.y + state.velocity[1] * dt,
            theta: wrap_angle(p.theta + state.velocity[2] * dt),
        };
        next.frames_since_seen = state.frames_since_seen.saturating_add(1);
    }
    let feature = object_centric_feature(&next, &obs.proprio, obs.visible, cfg.staleness_cap);
    Ok((next, feature))
}

fn slot_block(obs: &Observation, capacity: usize, stride: usize, indicator: Option<&BoxPrompt>) -> Result<Vec<f64>> {
    let count = obs.object_views.len();
    if count > capacity {
        return Err(Error::Capacity { count, capacity });
    }
    let mut block = vec![0.0; stride * capacity];
    if !obs.visible {
        return Ok(block);
    }
    for (slot, v) in sorted_views(obs).into_iter().enumerate() {
        let rel = v.pose.delta(&obs.proprio.pose);
        let s = &mut block[slot * stride..(slot + 1) * stride];
        s[..SLOT_DIM].copy_from_slice(&[rel[0], rel[1], rel[2], v.half_extents[0], v.half_extents[1]]);
        if let Some(b) = indicator {
            s[SLOT_DIM] = view_aabb(v).iou(b);
        }
    }
    Ok(block)
}

/// Whole-scene feature with no target information and no memory.
pub fn extract_global(obs: &Observation, capacity: usize) -> Result<FeatureVector> {
    let mut f = slot_block(obs, capacity, SLOT_DIM, None)?;
    f.extend_from_slice(&obs.proprio.to_vec());
    Ok(FeatureVector(f))
}

/// Whole-scene feature plus, per slot, the IoU of that object with the
/// externally tracked target box. Blacked-out frames zero the whole object
/// block, indicators included.
pub fn extract_conditioned(
    obs: &Observation,
    prompt_box_now: Option<&BoxPrompt>,
    capacity: usize,
) -> Result<FeatureVector> {
    let mut f = slot_block(obs, capacity, SLOT_DIM + 1, prompt_box_now)?;
    f.extend_from_slice(&obs.proprio.to_vec());
    Ok(FeatureVector(f))
}

/// Reorders the object slots of a whole-scene feature by `perm`
/// (`perm[dst] = src`). Object ids are arbitrary labels, so any slot order
/// describes the same scene; the object-centric layout has no slots and is
/// left untouched.
pub fn permute_slots(feature: &mut [f64], kind: ExtractorKind, cfg: &PerceptionConfig, perm: &[usize]) -> Result<()> {
    let stride = match kind {
        ExtractorKind::ObjectCentric => return Ok(()),
        ExtractorKind::GlobalScene => SLOT_DIM,
        ExtractorKind::GlobalSceneWithBox => SLOT_DIM + 1,
    };
    let n = cfg.capacity;
    if perm.len() != n || feature.len() < n * stride {
        return Err(Error::Dimension(format!(
            "permutation of {} slots over a {}-wide feature",
            perm.len(),
            feature.len()
        )));
    }
    let original = feature[..n * stride].to_vec();
    for (dst, &src) in perm.iter().enumerate() {
        if src >= n {
            return Err(Error::InvalidArgument(format!("slot {src} out of range")));
        }
        feature[dst * stride..(dst + 1) * stride].copy_from_slice(&original[src * stride..(src + 1) * stride]);
    }
    Ok(())
}

/// Per-episode extractor state: prompt binding at `t = 0`, then one feature
/// per frame padded to the common width.
#[derive(Debug, Clone)]
pub enum Perceiver {
    ObjectCentric(TrackState),
    GlobalScene,
    /// Holds the id the external box tracker follows.
    GlobalSceneWithBox(u32),
}

impl Perceiver {
    /// `obs0` must be visible. `target_id` is the object the external box
    /// tracker follows for the conditioned baseline; the object-centric
    /// tracker ignores it and binds from the prompt.
    pub fn new(kind: ExtractorKind, obs0: &Observation, prompt: &BoxPrompt, target_id: u32) -> Result<Self> {
        Ok(match kind {
            ExtractorKind::ObjectCentric => Perceiver::ObjectCentric(bind_prompt(obs0, prompt)?),
            ExtractorKind::GlobalScene => Perceiver::GlobalScene,
            ExtractorKind::GlobalSceneWithBox => Perceiver::GlobalSceneWithBox(target_id),
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Perceiver::ObjectCentric(_) => ExtractorKind::ObjectCentric,
            Perceiver::GlobalScene => ExtractorKind::GlobalScene,
            Perceiver::GlobalSceneWithBox(_) => ExtractorKind::GlobalSceneWithBox,
        }
    }

    pub fn perceive(&mut self, obs: &Observation, dt: f64, cfg: &PerceptionConfig) -> Result<FeatureVector> {
        let f = match self {
            Perceiver::ObjectCentric(state) => {
                let (next, f) = track_step(state, obs, dt, cfg)?;
                *state = next;
                f
            }
            Perceiver::GlobalScene => extract_global(obs, cfg.capacity)?,
            Perceiver::GlobalSceneWithBox(id) => {
                let b = obs.view(*id).filter(|_| obs.visible).map(view_aabb);
                extract_conditioned(obs, b.as_ref(), cfg.capacity)?
            }
        };
        Ok(f.padded(cfg.feature_width()))
    }
}
