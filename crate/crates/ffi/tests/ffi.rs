use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use dpgdiff::checkpoint::save_checkpoint;
use dpgdiff::dataset::{Domain, Token};
use dpgdiff::eval::{compute_metrics, GuidedScorer, Scorer};
use dpgdiff::network::{ModelConfig, Variant};
use dpgdiff::trainer::{TrainConfig, TrainState};
use dpgdiff_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dpg_last_error()) }.to_string_lossy().into_owned()
}

fn checkpoint() -> (tempfile::TempDir, TrainState) {
    let cfg = ModelConfig {
        d: 8,
        n_heads: 2,
        max_seq_len: 5,
        diffusion_steps: 6,
        vocab_x: 9,
        vocab_y: 7,
        variant: Variant::Full,
        ..ModelConfig::default()
    };
    let train = TrainConfig::default();
    let state = TrainState::new(&cfg, &train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &state, &train).unwrap();
    (dir, state)
}

#[test]
fn scores_match_the_library() {
    let (dir, state) = checkpoint();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dpg_model_load(path.as_ptr(), true, &mut handle) }, DpgStatus::Ok);
    assert!(!handle.is_null());
    assert_eq!(unsafe { dpg_model_table_size(handle, 0) }, 9);
    assert_eq!(unsafe { dpg_model_table_size(handle, 1) }, 7);
    assert_eq!(unsafe { dpg_model_table_size(handle, 2) }, 0);
    assert_eq!(unsafe { dpg_model_diffusion_steps(handle) }, 6);

    let items = [3usize, 2, 5, 4];
    let domains = [0u8, 1, 0, 1];
    let mut out = vec![f64::NAN; 7];
    let status = unsafe { dpg_model_score(handle, items.as_ptr(), domains.as_ptr(), 4, 1, 0, 11, 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DpgStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");

    let seq = [Token::new(3, Domain::X), Token::new(2, Domain::Y), Token::new(5, Domain::X), Token::new(4, Domain::Y)];
    let scorer = GuidedScorer::new(&state.model).unwrap();
    let want = scorer.score(3, &seq, Domain::Y, 6, 11).unwrap();
    assert_eq!(out, want);

    let mut short = vec![0.0; 3];
    let status = unsafe { dpg_model_score(handle, items.as_ptr(), domains.as_ptr(), 4, 1, 0, 11, 3, short.as_mut_ptr(), 3) };
    assert_eq!(status, DpgStatus::BufferTooSmall);
    let bad_domain = [0u8, 1, 7, 1];
    let status = unsafe { dpg_model_score(handle, items.as_ptr(), bad_domain.as_ptr(), 4, 1, 0, 11, 3, out.as_mut_ptr(), 7) };
    assert_eq!(status, DpgStatus::InvalidArgument);
    let oob = [3usize, 2, 50, 4];
    let status = unsafe { dpg_model_score(handle, oob.as_ptr(), domains.as_ptr(), 4, 1, 0, 11, 3, out.as_mut_ptr(), 7) };
    assert_eq!(status, DpgStatus::IndexOutOfRange);
    let status = unsafe { dpg_model_score(handle, ptr::null(), ptr::null(), 0, 1, 0, 11, 3, out.as_mut_ptr(), 7) };
    assert_eq!(status, DpgStatus::InvalidArgument);
    unsafe { dpg_model_free(handle) };
    unsafe { dpg_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_name_the_path() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dpg_model_load(ptr::null(), true, &mut handle) }, DpgStatus::NullPointer);
    let missing = CString::new("/nonexistent/ckpt").unwrap();
    assert_eq!(unsafe { dpg_model_load(missing.as_ptr(), true, &mut handle) }, DpgStatus::Io);
    assert!(last_error().contains("/nonexistent/ckpt"), "{}", last_error());
    assert!(handle.is_null());

    let (dir, _) = checkpoint();
    std::fs::write(dir.path().join("params.bin"), [1u8; 5]).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dpg_model_load(path.as_ptr(), false, &mut handle) }, DpgStatus::Checkpoint);
}

#[test]
fn metrics_match_the_library() {
    let ranks = [1usize, 4, 12, 2, 7, 100];
    let mut out = DpgMetrics::default();
    assert_eq!(unsafe { dpg_compute_metrics(ranks.as_ptr(), ranks.len(), &mut out) }, DpgStatus::Ok);
    let want = compute_metrics(&ranks).unwrap();
    assert_eq!(
        [out.mrr, out.ndcg5, out.ndcg10, out.hr5, out.hr10],
        want.values()
    );
    assert_eq!(out.n_users, 6);
    let zero = [0usize];
    assert_eq!(unsafe { dpg_compute_metrics(zero.as_ptr(), 1, &mut out) }, DpgStatus::InvalidArgument);
    assert_eq!(unsafe { dpg_compute_metrics(ranks.as_ptr(), 0, &mut out) }, DpgStatus::InvalidArgument);
    assert_eq!(unsafe { dpg_compute_metrics(ptr::null(), 3, &mut out) }, DpgStatus::NullPointer);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dpg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_interface_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dpgdiff.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "dpg_model_load",
        "dpg_model_free",
        "dpg_model_score",
        "dpg_model_table_size",
        "dpg_model_diffusion_steps",
        "dpg_compute_metrics",
        "dpg_last_error",
        "dpg_version",
        "typedef struct DpgModel DpgModel",
        "DPG_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
