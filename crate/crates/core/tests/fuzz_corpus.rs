//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets run. Seeds named `truncated*` must be rejected; every other seed
//! must decode and survive a round trip.

use std::fs;
use std::path::PathBuf;

use awenc_core::config::ExperimentConfig;
use awenc_core::data::Dataset;
use awenc_core::models::checkpoint::{decode, encode};
use awenc_core::pipeline::Thresholds;
use awenc_core::verification::VerificationReport;
use awenc_core::watermark::Watermark;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn replay(target: &str, check: impl Fn(&[u8]) -> bool) {
    for (name, bytes) in seeds(target) {
        let ok = check(&bytes);
        assert_eq!(ok, !name.starts_with("truncated"), "{target}/{name}");
    }
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).expect("utf-8 seed")
}

#[test]
fn watermark_seeds() {
    replay("watermark", |b| match Watermark::from_bytes(b) {
        Ok(w) => {
            assert_eq!(Watermark::from_bytes(&w.to_bytes()).unwrap().to_bytes(), w.to_bytes());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn checkpoint_seeds() {
    replay("checkpoint", |b| match decode(b) {
        Ok((kind, mlp)) => {
            assert_eq!(encode(kind, &mlp), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn dataset_seeds() {
    replay("dataset", |b| match Dataset::from_bytes(b) {
        Ok(d) => {
            assert_eq!(d.to_bytes(), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn config_seeds() {
    replay("config", |b| match ExperimentConfig::from_toml(text(b)) {
        Ok(cfg) => {
            let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(again.to_toml(), cfg.to_toml());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn thresholds_seeds() {
    replay("thresholds", |b| Thresholds::from_json(text(b)).is_ok());
}

#[test]
fn report_seeds() {
    replay("report", |b| VerificationReport::from_json(text(b)).is_ok());
}
