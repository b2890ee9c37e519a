use promptgrasp::perception::{ExtractorKind, PerceptionConfig};
use promptgrasp::policy::{Activation, Normalizer, Policy, PolicyMeta, PolicyParams, ACTION_DIM};
use promptgrasp::runtime::{
    control_tick, ensemble, inference_step, run_episode, InferenceState, RuntimeConfig, TimedActionBuffer, TrialSpec,
};
use promptgrasp::sim::{self, Action, Proprio, SimConfig};

fn random_policy(kind: ExtractorKind, k: usize, seed: u64) -> Policy {
    let perception = PerceptionConfig::default();
    let din = perception.feature_width() + Proprio::DIM;
    let params = PolicyParams::init(&[din, 32, k * ACTION_DIM], Activation::Tanh, k, ACTION_DIM, seed).unwrap();
    Policy {
        params,
        input_norm: Normalizer {
            mean: vec![0.0; din],
            std: vec![1.0; din],
        },
        action_norm: Normalizer {
            mean: vec![0.5, 0.5, 0.0, 0.1, 0.0],
            std: vec![0.1, 0.1, 0.3, 0.05, 1.0],
        },
        meta: PolicyMeta {
            kind,
            feature_dim: perception.feature_width(),
            proprio_dim: Proprio::DIM,
            k,
            chunk_stride: 5,
            dataset_fingerprint: String::new(),
            train_seed_range: [0, 0],
        },
    }
}

fn trial(seed: u64, p: f64) -> TrialSpec {
    TrialSpec::from_seed(&SimConfig::default(), 0.1, seed, p).unwrap()
}

fn action(x: f64) -> Action {
    Action {
        target: promptgrasp::geometry::Pose2::new(x, 0.5, 0.0),
        target_height: 0.15,
        grip: false,
    }
}

#[test]
fn zero_latency_serves_the_current_tick() {
    let mut b = TimedActionBuffer::new();
    b.insert_chunk(&[action(0.1), action(0.2)], 40, 40, 5);
    let c = b.take_current(40);
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].action, action(0.1));
}

#[test]
fn occluded_frames_still_produce_chunks() {
    let sim_cfg = SimConfig::default();
    let perception = PerceptionConfig::default();
    let rt = RuntimeConfig::default();
    for kind in [ExtractorKind::ObjectCentric, ExtractorKind::GlobalScene, ExtractorKind::GlobalSceneWithBox] {
        let pol = random_policy(kind, 4, 2);
        let t = trial(900, 0.0);
        let scene = sim::init_scene(&sim_cfg, t.scene_seed).unwrap();
        let mut state = InferenceState::new(&pol, kind, &t, &perception, &rt).unwrap();
        let mut buffer = TimedActionBuffer::new();
        let first = inference_step(&scene, true, &mut state, &mut buffer, 0, &rt).unwrap();
        let blind = inference_step(&scene, false, &mut state, &mut buffer, 5, &rt).unwrap();
        assert_eq!(first.len(), 4);
        assert_eq!(blind.len(), 4);
        assert!(blind.iter().all(Action::is_finite));
    }
}

#[test]
fn empty_buffer_before_first_chunk_holds_home() {
    let sim_cfg = SimConfig::default();
    let rt = RuntimeConfig::default();
    assert!(rt.latency_ticks > 0);
    let pol = random_policy(ExtractorKind::ObjectCentric, 20, 5);
    let out = run_episode(&pol, ExtractorKind::ObjectCentric, &trial(901, 0.0), &sim_cfg, &PerceptionConfig::default(), &rt)
        .unwrap();
    let home = Action::hold(&sim::init_scene(&sim_cfg, 901).unwrap().gripper);
    for c in &out.commands[..rt.latency_ticks as usize] {
        assert_eq!(c.candidates, 0);
        assert_eq!(c.action, home);
    }
}

#[test]
fn buffer_hit_uses_the_ensemble_exactly() {
    let sim_cfg = SimConfig::default();
    let rt = RuntimeConfig::default();
    let scene = sim::init_scene(&sim_cfg, 3).unwrap();
    let mut buffer = TimedActionBuffer::new();
    buffer.insert_chunk(&[action(0.3), action(0.4), action(0.5)], 0, 0, 5);
    buffer.insert_chunk(&[action(0.6), action(0.7), action(0.8)], 5, 5, 5);
    let cands = buffer.candidates(7).to_vec();
    assert_eq!(cands.len(), 2);
    let expected = ensemble(&cands, 7, rt.ensemble_m, 5).unwrap();
    let (_, rec) = control_tick(&scene, &mut buffer, 7, &action(0.0), &rt, &sim_cfg);
    assert_eq!(rec.action, expected);
    assert_eq!(rec.candidates, 2);
}

#[test]
fn command_log_is_contiguous_and_deterministic() {
    let sim_cfg = SimConfig::default();
    let rt = RuntimeConfig::default();
    let perception = PerceptionConfig::default();
    let pol = random_policy(ExtractorKind::GlobalSceneWithBox, 20, 8);
    let t = trial(902, 0.3);
    let a = run_episode(&pol, ExtractorKind::GlobalSceneWithBox, &t, &sim_cfg, &perception, &rt).unwrap();
    let b = run_episode(&pol, ExtractorKind::GlobalSceneWithBox, &t, &sim_cfg, &perception, &rt).unwrap();
    assert_eq!(a, b);
    for (i, c) in a.commands.iter().enumerate() {
        assert_eq!(c.tick, i as u64);
    }
}

#[test]
fn hit_rate_after_startup() {
    let sim_cfg = SimConfig::default();
    let rt = RuntimeConfig {
        latency_ticks: 5,
        ..RuntimeConfig::default()
    };
    let perception = PerceptionConfig::default();
    let pol = random_policy(ExtractorKind::GlobalScene, 20, 9);
    for seed in 903..908 {
        let out = run_episode(&pol, ExtractorKind::GlobalScene, &trial(seed, 0.0), &sim_cfg, &perception, &rt).unwrap();
        let rate = out.hit_rate_after(10).unwrap();
        assert!(rate >= 0.99, "seed {seed}: {rate}");
    }
}
