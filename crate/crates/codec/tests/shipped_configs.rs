//! The configs shipped in configs/ must always parse and validate.

use std::path::PathBuf;

use muc_codec::config::Config;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn desk_config_parses() {
    let cfg = Config::from_file(&configs_dir().join("desk.cfg")).unwrap();
    assert_eq!(cfg.encoder.n_layers, 6);
    assert_eq!(cfg.encoder.model_dim, 192);
    assert_eq!(cfg.encoder.tap_layer, 4);
    assert_eq!(cfg.sampler.n_steps, 50);
    assert_eq!(cfg.sampler.guidance_scale, 1.5);
    assert_eq!(cfg.train.ctc_weight, 0.2);
}

#[test]
fn reference_config_parses() {
    let cfg = Config::from_file(&configs_dir().join("reference.cfg")).unwrap();
    assert_eq!(cfg.encoder.n_layers, 13);
    assert_eq!(cfg.encoder.tap_layer, 7);
    assert_eq!(cfg.dit.n_layers, 24);
    assert_eq!(cfg.dit.head_dim, 72);
    assert_eq!(cfg.dit.norm_groups, 32);
    assert_eq!(cfg.sample_rate, 48000);
}
