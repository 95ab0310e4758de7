use tryon_core::checkpoint::{load_checkpoint, save_checkpoint};
use tryon_core::config::RunConfig;
use tryon_core::error::Error;
use tryon_core::imgproc::{read_pfm, write_pfm};
use tryon_core::rng::Rng;
use tryon_core::stage1::{Stage1Config, Stage1Model};
use tryon_core::synth::{generate_dataset, load_dataset, save_dataset, verify_sample, GeneratorSpec};
use tryon_core::warp::{read_flow, write_flow, FlowField};

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        train: 3,
        val: 1,
        test: 2,
        ..GeneratorSpec::default()
    }
}

#[test]
fn dataset_survives_disk_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_spec(), 9).unwrap();
    save_dataset(&ds, dir.path(), true).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.seed, 9);
    assert_eq!(back.train.len(), 3);
    for (a, b) in ds.train.iter().chain(&ds.test).zip(back.train.iter().chain(&back.test)) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.gt_flow, b.gt_flow);
        assert!(verify_sample(b).ok);
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let a = generate_dataset(&small_spec(), 4).unwrap();
    let b = generate_dataset(&small_spec(), 4).unwrap();
    let c = generate_dataset(&small_spec(), 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train[0].garment, c.train[0].garment);
}

#[test]
fn every_generated_sample_verifies() {
    let ds = generate_dataset(&small_spec(), 11).unwrap();
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        let v = verify_sample(s);
        assert!(v.ok, "{}: {}", s.id, v.message);
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = RunConfig {
        learning_rate: 3e-4,
        ..RunConfig::default()
    };
    let model = Stage1Model::new(Stage1Config::from_run(&cfg), 2).unwrap();
    save_checkpoint(&model.params, &cfg, &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.store, model.params);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.config_hash, cfg.hash());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = RunConfig::default();
    let model = Stage1Model::new(Stage1Config::from_run(&cfg), 2).unwrap();
    save_checkpoint(&model.params, &cfg, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

    let text = String::from_utf8_lossy(&bytes[..200]).replace("learning_rate", "learning_ratx");
    let mut edited = text.into_bytes();
    edited.extend_from_slice(&bytes[200..]);
    std::fs::write(&path, &edited).unwrap();
    assert!(load_checkpoint(&path).is_err());

    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn pfm_and_flow_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(1);
    let img = rng.uniform_tensor(&[3, 8, 6], -1.0, 1.0).round_f32();
    write_pfm(&img, &dir.path().join("a.pfm")).unwrap();
    assert_eq!(read_pfm(&dir.path().join("a.pfm")).unwrap(), img);

    let flow = FlowField::new(rng.uniform_tensor(&[2, 8, 6], -3.0, 3.0).round_f32()).unwrap();
    write_flow(&flow, &dir.path().join("f.flo")).unwrap();
    assert_eq!(read_flow(&dir.path().join("f.flo")).unwrap(), flow);
}

#[test]
fn config_text_roundtrip_and_overrides() {
    let mut cfg = RunConfig::default();
    cfg.set("learning_rate", "0.00025").unwrap();
    cfg.set("max_steps", "17").unwrap();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(back.hash(), RunConfig::default().hash());
    assert!(cfg.set("no_such_key", "1").is_err());
    assert!(cfg.set("batch_size", "zero").is_err());
}
