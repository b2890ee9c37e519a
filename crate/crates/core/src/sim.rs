//! Deterministic planar pick-and-lift world.
//!
//! Kinematic only: the gripper slews toward a commanded pose under per-axis
//! speed limits, and closing the gripper over an aligned object attaches it.
//! [`Scene`] values are immutable snapshots; [`step`] returns a new one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// How initial object placements are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneLayout {
    /// Between `min_objects` and `max_objects` objects, uniform rejection sampling.
    Random,
    /// Exactly two identical objects mirrored about the vertical line through
    /// the gripper home position, `half_gap` away from it.
    MirroredPair { half_gap_min: f64, half_gap_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub workspace: Workspace,
    pub min_objects: usize,
    pub max_objects: usize,
    pub half_extent_min: f64,
    pub half_extent_max: f64,
    /// Initial object orientations are drawn from `[-max, max]`.
    pub object_theta_max: f64,
    /// Extra clearance between circumscribed object discs.
    pub min_clearance: f64,
    /// Keep-out band along the workspace border for object centers.
    pub edge_margin: f64,
    pub eps_pos: f64,
    pub eps_theta: f64,
    pub h_lift: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub dt: f64,
    pub home: Pose2,
    pub home_height: f64,
    pub max_height: f64,
    pub placement_retries: usize,
    pub layout: SceneLayout,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workspace: Workspace {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            },
            min_objects: 3,
            max_objects: 6,
            half_extent_min: 0.02,
            half_extent_max: 0.04,
            object_theta_max: 1.2,
            min_clearance: 0.02,
            edge_margin: 0.08,
            eps_pos: 0.015,
            eps_theta: 0.2,
            h_lift: 0.10,
            v_max: 0.5,
            w_max: 3.0,
            dt: 0.01,
            home: Pose2::new(0.5, 0.5, 0.0),
            home_height: 0.15,
            max_height: 0.3,
            placement_retries: 10_000,
            layout: SceneLayout::Random,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = &self.workspace;
        let bad = |m: &str| Err(Error::Config(format!("sim: {m}")));
        if !(ws.x_min < ws.x_max && ws.y_min < ws.y_max) {
            return bad("empty workspace");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(self.half_extent_min > 0.0 && self.half_extent_min <= self.half_extent_max) {
            return bad("half extents must be positive and ordered");
        }
        if !(self.eps_pos > 0.0 && self.eps_theta > 0.0) {
            return bad("grasp tolerances must be positive");
        }
        if !(self.h_lift > 0.0 && self.home_height > self.h_lift && self.max_height >= self.home_height) {
            return bad("require 0 < h_lift < home_height <= max_height");
        }
        if !(self.v_max > 0.0 && self.w_max > 0.0 && self.dt > 0.0) {
            return bad("speeds and dt must be positive");
        }
        if !ws.contains(self.home.x, self.home.y) {
            return bad("home pose outside workspace");
        }
        if let SceneLayout::MirroredPair {
            half_gap_min,
            half_gap_max,
        } = self.layout
        {
            if !(half_gap_min > 0.0 && half_gap_min <= half_gap_max) {
                return bad("mirrored layout gap range invalid");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub pose: Pose2,
    pub half_extents: [f64; 2],
    pub color_id: u32,
    pub lifted: bool,
    pub attached: bool,
}

impl ObjectState {
    /// Radius of the circumscribed disc.
    pub fn radius(&self) -> f64 {
        self.half_extents[0].hypot(self.half_extents[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pose: Pose2,
    pub height: f64,
    pub grip: bool,
    pub held_object: Option<u32>,
    /// Pose of the held object in the gripper frame.
    pub grasp_offset: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectState>,
    pub gripper: GripperState,
    pub tick: u64,
    pub rng_seed: u64,
}

impl Scene {
    pub fn object(&self, id: u32) -> Result<&ObjectState> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or(Error::UnknownObject(id))
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.id).collect()
    }

    /// Canonical serialization: objects sorted by id, fixed field order.
    pub fn canonical_json(&self) -> String {
        let mut sorted = self.clone();
        sorted.objects.sort_by_key(|o| o.id);
        serde_json::to_string(&sorted).expect("scene serializes")
    }

    pub fn proprio(&self) -> Proprio {
        Proprio {
            pose: self.gripper.pose,
            height: self.gripper.height,
            grip: self.gripper.grip,
        }
    }
}

/// Proprioceptive state. Never occluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proprio {
    pub pose: Pose2,
    pub height: f64,
    pub grip: bool,
}

impl Proprio {
    pub const DIM: usize = 5;

    pub fn to_vec(&self) -> [f64; Self::DIM] {
        [
            self.pose.x,
            self.pose.y,
            self.pose.theta,
            self.height,
            if self.grip { 1.0 } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub id: u32,
    pub pose: Pose2,
    pub half_extents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visible: bool,
    pub object_views: Vec<ObjectView>,
    pub proprio: Proprio,
}

impl Observation {
    pub fn view(&self, id: u32) -> Option<&ObjectView> {
        self.object_views.iter().find(|v| v.id == id)
    }

    /// The same frame with its image blacked out.
    pub fn blacked_out(&self) -> Observation {
        Observation {
            visible: false,
            object_views: Vec::new(),
            proprio: self.proprio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target: Pose2,
    pub target_height: f64,
    pub grip: bool,
}

impl Action {
    /// Command that keeps the gripper where it is.
    pub fn hold(gripper: &GripperState) -> Self {
        Self {
            target: gripper.pose,
            target_height: gripper.height,
            grip: gripper.grip,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.target.is_finite() && self.target_height.is_finite()
    }

    /// `[x, y, theta, height, grip]` with grip encoded as ±1.
    pub fn to_row(&self) -> [f64; 5] {
        [
            self.target.x,
            self.target.y,
            self.target.theta,
            self.target_height,
            if self.grip { 1.0 } else { -1.0 },
        ]
    }

    /// Inverse of [`Action::to_row`]; the grip channel is a logit.
    pub fn from_row(row: &[f64]) -> Self {
        Self {
            target: Pose2::new(row[0], row[1], row[2]),
            target_height: row[3],
            grip: row[4] > 0.0,
        }
    }
}

fn sample_extents<R: Rng>(cfg: &SimConfig, rng: &mut R) -> [f64; 2] {
    let mut draw = || {
        if cfg.half_extent_max > cfg.half_extent_min {
            rng.gen_range(cfg.half_extent_min..=cfg.half_extent_max)
        } else {
            cfg.half_extent_min
        }
    };
    [draw(), draw()]
}

fn sample_theta<R: Rng>(cfg: &SimConfig, rng: &mut R) -> f64 {
    if cfg.object_theta_max > 0.0 {
        rng.gen_range(-cfg.object_theta_max..=cfg.object_theta_max)
    } else {
        0.0
    }
}

fn separated(a: &ObjectState, b: &ObjectState, clearance: f64) -> bool {
    a.pose.distance(&b.pose) > a.radius() + b.radius() + clearance
}

fn home_gripper(cfg: &SimConfig) -> GripperState {
    GripperState {
        pose: cfg.home,
        height: cfg.home_height,
        grip: false,
        held_object: None,
        grasp_offset: None,
    }
}

fn object_at(id: u32, pose: Pose2, half_extents: [f64; 2], color_id: u32) -> ObjectState {
    ObjectState {
        id,
        pose,
        half_extents,
        color_id,
        lifted: false,
        attached: false,
    }
}

/// Draws a fresh scene from the seeded generator.
pub fn init_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::rng_for(seed, Stream::Scene);
    let mut palette: Vec<u32> = (0..8).collect();
    palette.shuffle(&mut rng);
    let ws = &cfg.workspace;

    let objects = match cfg.layout {
        SceneLayout::Random => {
            let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
            let mut objects: Vec<ObjectState> = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while objects.len() < n {
                if attempts >= cfg.placement_retries {
                    return Err(Error::DegenerateConfig(format!(
                        "placed {} of {n} objects after {attempts} attempts",
                        objects.len()
                    )));
                }
                attempts += 1;
                let he = sample_extents(cfg, &mut rng);
                let r = he[0].hypot(he[1]) + cfg.edge_margin;
                if ws.x_max - ws.x_min <= 2.0 * r || ws.y_max - ws.y_min <= 2.0 * r {
                    continue;
                }
                let x = rng.gen_range(ws.x_min + r..ws.x_max - r);
                let y = rng.gen_range(ws.y_min + r..ws.y_max - r);
                let theta = sample_theta(cfg, &mut rng);
                let id = objects.len() as u32;
                let candidate = object_at(id, Pose2::new(x, y, theta), he, palette[id as usize % 8]);
                if objects
                    .iter()
                    .all(|o| separated(o, &candidate, cfg.min_clearance))
                {
                    objects.push(candidate);
                }
            }
            objects
        }
        SceneLayout::MirroredPair {
            half_gap_min,
            half_gap_max,
        } => {
            let mut attempts = 0usize;
            loop {
                if attempts >= cfg.placement_retries {
                    return Err(Error::DegenerateConfig(
                        "mirrored pair does not fit the workspace".into(),
                    ));
                }
                attempts += 1;
                let he = sample_extents(cfg, &mut rng);
                let r = he[0].hypot(he[1]) + cfg.edge_margin;
                let gap = if half_gap_max > half_gap_min {
                    rng.gen_range(half_gap_min..=half_gap_max)
                } else {
                    half_gap_min
                };
                if ws.y_max - ws.y_min <= 2.0 * r {
                    continue;
                }
                let y = rng.gen_range(ws.y_min + r..ws.y_max - r);
                let theta = sample_theta(cfg, &mut rng);
                let cx = cfg.home.x;
                let left = object_at(0, Pose2::new(cx - gap, y, theta), he, palette[0]);
                let right = object_at(1, Pose2::new(cx + gap, y, -theta), he, palette[1]);
                let inside = |o: &ObjectState| {
                    o.pose.x - r >= ws.x_min && o.pose.x + r <= ws.x_max
                };
                if inside(&left) && inside(&right) && separated(&left, &right, cfg.min_clearance) {
                    break vec![left, right];
                }
            }
        }
    };

    Ok(Scene {
        objects,
        gripper: home_gripper(cfg),
        tick: 0,
        rng_seed: seed,
    })
}

fn approach(current: f64, target: f64, max_step: f64) -> f64 {
    current + (target - current).clamp(-max_step, max_step)
}

/// Advances the world by one control period under `action`.
///
/// Non-finite command components are replaced by the current gripper state.
pub fn step(scene: &Scene, action: &Action, cfg: &SimConfig, dt: f64) -> Scene {
    let mut next = scene.clone();
    let g = &scene.gripper;
    let pick = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
    let (tx, ty) = cfg
        .workspace
        .clamp(pick(action.target.x, g.pose.x), pick(action.target.y, g.pose.y));
    let ttheta = pick(action.target.theta, g.pose.theta);
    let th = pick(action.target_height, g.height).clamp(0.0, cfg.max_height);

    let lin = cfg.v_max * dt;
    let ang = cfg.w_max * dt;
    let x = approach(g.pose.x, tx, lin);
    let y = approach(g.pose.y, ty, lin);
    let dtheta = wrap_angle(ttheta - g.pose.theta).clamp(-ang, ang);
    let theta = if dtheta == 0.0 {
        g.pose.theta
    } else {
        wrap_angle(g.pose.theta + dtheta)
    };
    let height = approach(g.height, th, lin);

    let ng = &mut next.gripper;
    ng.pose = Pose2 { x, y, theta };
    ng.height = height;

    if action.grip && !g.grip {
        ng.grip = true;
        // Closing: attach the nearest aligned object within tolerance.
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in next.objects.iter().enumerate() {
            let d = o.pose.distance(&ng.pose);
            let dth = wrap_angle(o.pose.theta - ng.pose.theta).abs();
            if d <= cfg.eps_pos && dth <= cfg.eps_theta {
                let better = match best {
                    None => true,
                    Some((bd, bi)) => d < bd || (d == bd && o.id < next.objects[bi].id),
                };
                if better {
                    best = Some((d, i));
                }
            }
        }
        if let Some((_, i)) = best {
            let o = &mut next.objects[i];
            o.attached = true;
            let local = ng.pose.inverse_transform_point([o.pose.x, o.pose.y]);
            ng.held_object = Some(o.id);
            ng.grasp_offset = Some(Pose2::new(
                local[0],
                local[1],
                o.pose.theta - ng.pose.theta,
            ));
        }
    } else if !action.grip && g.grip {
        ng.grip = false;
        if let Some(id) = ng.held_object.take() {
            ng.grasp_offset = None;
            if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
                o.attached = false;
                o.lifted = false;
            }
        }
    }

    let (pose, height, held, offset) = (
        next.gripper.pose,
        next.gripper.height,
        next.gripper.held_object,
        next.gripper.grasp_offset,
    );
    if let (Some(id), Some(off)) = (held, offset) {
        if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
            let p = pose.transform_point([off.x, off.y]);
            o.pose = Pose2::new(p[0], p[1], pose.theta + off.theta);
            o.lifted = height > 0.0;
        }
    }
    next.tick = scene.tick + 1;
    next
}

/// True when the designated object is held at or above the lift threshold.
pub fn success(scene: &Scene, target_id: u32, cfg: &SimConfig) -> Result<bool> {
    let obj = scene.object(target_id)?;
    Ok(obj.attached && scene.gripper.height >= cfg.h_lift)
}

/// Per-frame visibility: each frame is independently blacked out with
/// probability `p`. `true` means visible.
pub fn occlusion_mask(p: f64, num_frames: usize, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "occlusion probability {p} outside [0, 1]"
        )));
    }
    let mut rng = rng::rng_for(seed, Stream::Occlusion);
    Ok((0..num_frames).map(|_| rng.gen::<f64>() >= p).collect())
}

pub fn observe(scene: &Scene, visible: bool) -> Observation {
    let object_views = if visible {
        scene
            .objects
            .iter()
            .map(|o| ObjectView {
                id: o.id,
                pose: o.pose,
                half_extents: o.half_extents,
            })
            .collect()
    } else {
        Vec::new()
    };
    Observation {
        visible,
        object_views,
        proprio: scene.proprio(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn scene_with_object_under_gripper(offset: f64) -> Scene {
        let c = cfg();
        let mut s = init_scene(&c, 1).unwrap();
        let g = s.gripper.pose;
        s.objects.truncate(1);
        s.objects[0].pose = Pose2::new(g.x + offset, g.y, g.theta);
        s
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg();
        let a = init_scene(&c, 42).unwrap();
        let b = init_scene(&c, 42).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn forced_object_count() {
        let c = SimConfig {
            min_objects: 3,
            max_objects: 3,
            ..cfg()
        };
        for seed in 0..20 {
            assert_eq!(init_scene(&c, seed).unwrap().objects.len(), 3);
        }
    }

    #[test]
    fn objects_never_overlap() {
        let c = cfg();
        for seed in 0..1000 {
            let s = init_scene(&c, seed).unwrap();
            assert!((3..=6).contains(&s.objects.len()));
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    let d = ((a.pose.x - b.pose.x).powi(2) + (a.pose.y - b.pose.y).powi(2)).sqrt();
                    let ra = (a.half_extents[0].powi(2) + a.half_extents[1].powi(2)).sqrt();
                    let rb = (b.half_extents[0].powi(2) + b.half_extents[1].powi(2)).sqrt();
                    assert!(d > ra + rb, "seed {seed}: {} and {} overlap", a.id, b.id);
                }
            }
            assert!(!s.gripper.grip);
            assert!(s.gripper.height > c.h_lift);
        }
    }

    #[test]
    fn impossible_placement_is_degenerate() {
        let c = SimConfig {
            min_objects: 6,
            max_objects: 6,
            half_extent_min: 0.2,
            half_extent_max: 0.2,
            placement_retries: 200,
            ..cfg()
        };
        assert!(matches!(init_scene(&c, 3), Err(Error::DegenerateConfig(_))));
    }

    #[test]
    fn mirrored_pair_is_symmetric() {
        let c = SimConfig {
            layout: SceneLayout::MirroredPair {
                half_gap_min: 0.12,
                half_gap_max: 0.3,
            },
            ..cfg()
        };
        for seed in 0..50 {
            let s = init_scene(&c, seed).unwrap();
            assert_eq!(s.objects.len(), 2);
            let (l, r) = (&s.objects[0], &s.objects[1]);
            assert!((l.pose.x + r.pose.x - 2.0 * c.home.x).abs() < 1e-12);
            assert_eq!(l.pose.y, r.pose.y);
            assert_eq!(l.pose.theta, -r.pose.theta);
            assert_eq!(l.half_extents, r.half_extents);
        }
    }

    #[test]
    fn holding_pose_is_a_fixed_point() {
        let c = cfg();
        let s = init_scene(&c, 5).unwrap();
        let a = Action::hold(&s.gripper);
        let n = step(&s, &a, &c, c.dt);
        assert_eq!(n.tick, s.tick + 1);
        let mut n2 = n.clone();
        n2.tick = s.tick;
        assert_eq!(n2, s);
    }

    #[test]
    fn close_over_centered_object_attaches() {
        let c = cfg();
        let s = scene_with_object_under_gripper(0.0);
        let a = Action {
            grip: true,
            ..Action::hold(&s.gripper)
        };
        let n = step(&s, &a, &c, c.dt);
        assert!(n.objects[0].attached);
        assert_eq!(n.gripper.held_object, Some(n.objects[0].id));
    }

    #[test]
    fn close_just_outside_tolerance_misses() {
        let c = cfg();
        let s = scene_with_object_under_gripper(c.eps_pos + 1e-6);
        let a = Action {
            grip: true,
            ..Action::hold(&s.gripper)
        };
        let n = step(&s, &a, &c, c.dt);
        assert!(n.gripper.grip);
        assert!(!n.objects[0].attached);
        assert_eq!(n.gripper.held_object, None);
    }

    #[test]
    fn misaligned_close_misses() {
        let c = cfg();
        let mut s = scene_with_object_under_gripper(0.0);
        s.objects[0].pose.theta = s.gripper.pose.theta + c.eps_theta + 1e-3;
        let a = Action {
            grip: true,
            ..Action::hold(&s.gripper)
        };
        assert!(!step(&s, &a, &c, c.dt).objects[0].attached);
    }

    #[test]
    fn attached_object_follows_and_releases() {
        let c = cfg();
        let s = scene_with_object_under_gripper(0.005);
        let close = Action {
            grip: true,
            ..Action::hold(&s.gripper)
        };
        let mut s = step(&s, &close, &c, c.dt);
        let up = Action {
            target: Pose2::new(0.7, 0.6, 0.5),
            target_height: 0.2,
            grip: true,
        };
        for _ in 0..100 {
            s = step(&s, &up, &c, c.dt);
        }
        let o = &s.objects[0];
        assert!(o.attached && o.lifted);
        let expect = s.gripper.pose.transform_point([0.005, 0.0]);
        assert!((o.pose.x - expect[0]).abs() < 1e-12 && (o.pose.y - expect[1]).abs() < 1e-12);
        let open = Action {
            grip: false,
            ..Action::hold(&s.gripper)
        };
        let s = step(&s, &open, &c, c.dt);
        assert!(!s.objects[0].attached);
        assert_eq!(s.gripper.held_object, None);
    }

    #[test]
    fn speed_limits_respected() {
        let c = cfg();
        let s = init_scene(&c, 9).unwrap();
        let far = Action {
            target: Pose2::new(5.0, -3.0, 3.0),
            target_height: 10.0,
            grip: false,
        };
        let n = step(&s, &far, &c, c.dt);
        let g0 = &s.gripper;
        let g1 = &n.gripper;
        assert!((g1.pose.x - g0.pose.x).abs() <= c.v_max * c.dt + 1e-12);
        assert!((g1.pose.y - g0.pose.y).abs() <= c.v_max * c.dt + 1e-12);
        assert!(wrap_angle(g1.pose.theta - g0.pose.theta).abs() <= c.w_max * c.dt + 1e-12);
        // out-of-bounds targets clamp to the workspace
        let mut s = n;
        for _ in 0..500 {
            s = step(&s, &far, &c, c.dt);
        }
        assert_eq!(s.gripper.pose.x, c.workspace.x_max);
        assert_eq!(s.gripper.pose.y, c.workspace.y_min);
        assert_eq!(s.gripper.height, c.max_height);
    }

    #[test]
    fn success_predicate() {
        let c = cfg();
        let mut s = scene_with_object_under_gripper(0.0);
        let id = s.objects[0].id;
        s.objects[0].attached = true;
        s.gripper.grip = true;
        s.gripper.held_object = Some(id);
        s.gripper.height = c.h_lift;
        assert!(success(&s, id, &c).unwrap());
        s.gripper.height = c.h_lift - 1e-9;
        assert!(!success(&s, id, &c).unwrap());
        assert!(matches!(success(&s, 99, &c), Err(Error::UnknownObject(99))));
    }

    #[test]
    fn wrong_object_is_not_success() {
        let c = cfg();
        let mut s = init_scene(&c, 2).unwrap();
        s.objects[0].attached = true;
        s.gripper.height = c.h_lift + 0.05;
        assert!(!success(&s, s.objects[1].id, &c).unwrap());
    }

    #[test]
    fn occlusion_extremes_and_rate() {
        assert!(occlusion_mask(0.0, 1000, 1).unwrap().iter().all(|v| *v));
        assert!(occlusion_mask(1.0, 1000, 1).unwrap().iter().all(|v| !*v));
        assert!(occlusion_mask(1.5, 10, 1).is_err());
        assert!(occlusion_mask(-0.1, 10, 1).is_err());
        let m = occlusion_mask(0.4, 100_000, 3).unwrap();
        let blacked = m.iter().filter(|v| !**v).count() as f64 / m.len() as f64;
        assert!((blacked - 0.4).abs() <= 0.01, "{blacked}");
    }

    #[test]
    fn observe_respects_visibility() {
        let c = SimConfig {
            min_objects: 4,
            max_objects: 4,
            ..cfg()
        };
        let s = init_scene(&c, 11).unwrap();
        let o = observe(&s, false);
        assert!(o.object_views.is_empty());
        assert_eq!(o.proprio, s.proprio());
        assert_eq!(observe(&s, true).object_views.len(), 4);
    }

    #[test]
    fn observation_tracks_post_step_state() {
        let c = cfg();
        let s = scene_with_object_under_gripper(0.0);
        let close = Action {
            grip: true,
            ..Action::hold(&s.gripper)
        };
        let s1 = step(&s, &close, &c, c.dt);
        let mv = Action {
            target: Pose2::new(0.8, 0.8, 0.3),
            target_height: 0.0,
            grip: true,
        };
        let s2 = step(&s1, &mv, &c, c.dt);
        let o = observe(&s2, true);
        for (v, obj) in o.object_views.iter().zip(&s2.objects) {
            assert_eq!(v.pose, obj.pose);
        }
        assert_eq!(o.proprio, s2.proprio());
        assert_ne!(observe(&s1, true), o);
    }
}
