//! Command-line surface checks that don't need trained checkpoints.

use std::process::Command;

fn muc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_muc"))
}

#[test]
fn info_dumps_a_stream_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.muc");
    // Minimal valid stream: header + 3 low-preset frames.
    let header = muc_codec::bitstream::StreamHeader {
        version: muc_codec::bitstream::MUC_VERSION,
        config_id: muc_codec::bitstream::ConfigId::Low,
        sample_rate: 24000,
        channels: 1,
        token_rate: 25,
        n_frames: 3,
        n_codebooks: 1,
        codebook_size: 16384,
        block_len: 64,
    };
    let codes = muc_codec::rvq::CodeSeq::new(
        vec![5, 10, 15],
        3,
        1,
        16384,
        muc_codec::bitstream::ConfigId::Low,
    );
    let bytes =
        muc_codec::bitstream::encode_stream(std::slice::from_ref(&codes), &header).unwrap();
    std::fs::write(&path, bytes).unwrap();

    let out = muc().arg("info").arg(&path).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("MUC1 v1"), "{text}");
    assert!(text.contains("low (1x16384)"), "{text}");
    assert!(text.contains("frames        : 3"), "{text}");
}

#[test]
fn info_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.muc");
    std::fs::write(&path, b"this is not a stream, not even close").unwrap();
    let out = muc().arg("info").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn unknown_config_keys_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "presett=low\n").unwrap();
    let out = muc().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown config key"), "{err}");
}

#[test]
fn train_single_late_stage_reports_missing_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "ckpt_dir={}\ncorpus_dir={}\ncorpus.train=2\ncorpus.dev=1\ncorpus.test=1\n",
            dir.path().join("run").display(),
            dir.path().join("corpus").display()
        ),
    )
    .unwrap();
    let out = muc()
        .args(["train", "--stages", "rvq", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("requires checkpoint from `muencoder2`"), "{err}");
}

#[test]
fn decode_logs_sampler_override() {
    // The override is reported before checkpoint loading fails, so this
    // exercises the logging without a trained pipeline.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.cfg");
    std::fs::write(&cfg_path, format!("ckpt_dir={}\n", dir.path().display())).unwrap();
    let missing = dir.path().join("none.muc");
    std::fs::write(&missing, b"MUC1").unwrap();
    let out = muc()
        .args(["decode"])
        .arg(&missing)
        .args(["--steps", "25", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sampler override: 25 steps"), "{err}");
    assert!(!out.status.success());
}
