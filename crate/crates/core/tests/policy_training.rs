use promptgrasp::cache::{CacheFile, CacheHeader, FeatureRecord};
use promptgrasp::perception::{ExtractorKind, PerceptionConfig};
use promptgrasp::policy::{
    self, fit, loss, Activation, Batch, PolicyParams, TrainConfig, ACTION_DIM,
};
use promptgrasp::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_cache(kind: ExtractorKind, feature_dim: usize, k: usize, records: Vec<FeatureRecord>) -> CacheFile {
    CacheFile {
        header: CacheHeader {
            schema_version: 1,
            kind,
            feature_dim,
            proprio_dim: 2,
            k,
            action_dim: ACTION_DIM,
            chunk_stride: 5,
            dataset_fingerprint: "toy".into(),
            train_seed_range: [0, 2],
            augment_occlusion_p: 0.0,
            augment_slot_permutation: false,
            perception: PerceptionConfig::default(),
            n_records: records.len(),
            skipped_episodes: Vec::new(),
        },
        records,
    }
}

fn record(id: u64, feature: Vec<f64>, row: [f64; ACTION_DIM], k: usize) -> FeatureRecord {
    FeatureRecord {
        episode_id: id,
        t: 0,
        feature,
        proprio: vec![0.5, 0.5],
        action_chunk_target: vec![row; k],
        valid_mask: vec![true; k],
    }
}

#[test]
fn single_record_is_memorized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let din = 12;
    let k = 4;
    let x: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..k * ACTION_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 2000,
        ..TrainConfig::default()
    };
    let mut sizes = vec![din];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(k * ACTION_DIM);
    let mut p = PolicyParams::init(&sizes, cfg.activation, k, ACTION_DIM, 3).unwrap();
    fit(&mut p, &x, &y, &cfg).unwrap();
    let l = loss(&p, &Batch::new(1, x, y)).unwrap();
    assert!(l < 1e-6, "loss {l}");
}

#[test]
fn conflicting_targets_minimized_at_their_mean() {
    // Duplicate input with targets y1 and y2: the loss, as a function of a
    // constant prediction c, is (c - y1)^2 + (c - y2)^2 per coordinate.
    let y1 = [0.2, -1.0];
    let y2 = [0.8, 3.0];
    let loss_at = |c: [f64; 2]| {
        let mut p = PolicyParams::zeros(&[1, 2], Activation::Identity, 1, 2).unwrap();
        p.layers[0].bias = c.to_vec();
        let b = Batch::new(2, vec![0.0, 0.0], [y1, y2].concat());
        loss(&p, &b).unwrap()
    };
    let mid = [0.5, 1.0];
    let best = loss_at(mid);
    for dx in [-0.01, 0.01] {
        for dy in [-0.01, 0.01] {
            assert!(loss_at([mid[0] + dx, mid[1] + dy]) > best);
        }
    }
    assert!((best - (0.09 + 4.0)).abs() < 1e-12);
}

#[test]
fn mirrored_targets_train_to_the_midpoint() {
    let k = 3;
    let d = 0.2;
    let center = [0.5, 0.4, 0.0, 0.15, 0.0];
    let mut lo = center;
    let mut hi = center;
    lo[0] -= d;
    hi[0] += d;
    lo[2] = -0.6;
    hi[2] = 0.6;
    let feature = vec![0.3, -0.7, 0.1];
    let cache = toy_cache(
        ExtractorKind::GlobalScene,
        3,
        k,
        vec![record(0, feature.clone(), lo, k), record(1, feature.clone(), hi, k)],
    );
    let cfg = TrainConfig {
        chunk_len: k,
        batch_size: 2,
        epochs: 600,
        ..TrainConfig::default()
    };
    let (pol, _) = policy::train(&cache, &cfg).unwrap();
    let out = pol.act(&feature, &[0.5, 0.5]).unwrap();
    for i in 0..k {
        let row = out.row(i);
        assert!((row[0] - center[0]).abs() < 1e-3 * d, "row {i}: x {}", row[0]);
        assert!((row[2] - center[2]).abs() < 1e-3 * 0.6, "row {i}: theta {}", row[2]);
    }
}

#[test]
fn fixed_seed_gives_identical_params() {
    let k = 2;
    let records = (0..20)
        .map(|i| {
            let f = i as f64 / 20.0;
            record(i, vec![f, 1.0 - f], [f, f * f, 0.0, 0.1, if i % 2 == 0 { 1.0 } else { -1.0 }], k)
        })
        .collect();
    let cache = toy_cache(ExtractorKind::ObjectCentric, 2, k, records);
    let cfg = TrainConfig {
        chunk_len: k,
        hidden: vec![16],
        epochs: 5,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let (a, ca) = policy::train(&cache, &cfg).unwrap();
    let (b, cb) = policy::train(&cache, &cfg).unwrap();
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_eq!(ca, cb);
}

#[test]
fn checkpoint_roundtrip_and_guards() {
    let k = 2;
    let records = (0..8).map(|i| record(i, vec![i as f64, 0.5], [0.1 * i as f64, 0.2, 0.0, 0.1, 1.0], k)).collect();
    let cache = toy_cache(ExtractorKind::ObjectCentric, 2, k, records);
    let cfg = TrainConfig {
        chunk_len: k,
        hidden: vec![8],
        epochs: 2,
        ..TrainConfig::default()
    };
    let (pol, _) = policy::train(&cache, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.ckpt");
    policy::save_checkpoint(&pol, &path).unwrap();

    let back = policy::load_checkpoint(&path, None).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(back.params.flatten()), bits(pol.params.flatten()));
    assert_eq!(back, pol);

    assert!(matches!(
        policy::load_checkpoint(&path, Some((ExtractorKind::ObjectCentric, 3))),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        policy::load_checkpoint(&path, Some((ExtractorKind::GlobalScene, 2))),
        Err(Error::Incompatible(_))
    ));
    assert!(policy::load_checkpoint(&path, Some((ExtractorKind::ObjectCentric, 2))).is_ok());
}

#[test]
fn corrupt_checkpoint_rejected() {
    let k = 1;
    let cache = toy_cache(
        ExtractorKind::ObjectCentric,
        1,
        k,
        vec![record(0, vec![0.0], [0.0; ACTION_DIM], k)],
    );
    let cfg = TrainConfig {
        chunk_len: k,
        hidden: vec![4],
        epochs: 1,
        ..TrainConfig::default()
    };
    let (pol, _) = policy::train(&cache, &cfg).unwrap();
    let bytes = policy::checkpoint_bytes(&pol);
    let origin = std::path::Path::new("mem");
    assert!(policy::parse_checkpoint(&bytes[..bytes.len() - 3], origin).is_err());
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let newline = text.find('\n').unwrap();
    let bumped = text[..newline].replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    assert_ne!(bumped, text[..newline], "header carries a version field");
    let mut forged = bumped.into_bytes();
    forged.extend_from_slice(&bytes[newline..]);
    assert!(matches!(policy::parse_checkpoint(&forged, origin), Err(Error::Version { found: 99, .. })));
}
