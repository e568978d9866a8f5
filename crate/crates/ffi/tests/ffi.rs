use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pointpwc::harness::{synth_pair, SynthSpec};
use pointpwc::network::{Network, NetworkConfig};
use pointpwc_ffi::*;

fn flat(rows: &[[f64; 3]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn last_error() -> String {
    let p = ppwc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> CString {
    CString::new(
        r#"{"levels": 3, "widths": [8, 8], "cost_dims": [8, 8], "k_cost": 4, "k_conv": 4}"#,
    )
    .unwrap()
}

fn new_model(cfg: &CString, seed: u64) -> *mut PpwcModel {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { ppwc_model_new(cfg.as_ptr(), seed, &mut m) },
        PpwcStatus::Ok
    );
    assert!(!m.is_null());
    m
}

fn infer(m: *const PpwcModel, p: &[f64], q: &[f64]) -> (PpwcStatus, Vec<f64>) {
    let mut out = vec![0.0; p.len()];
    let s = unsafe {
        ppwc_infer(
            m,
            p.as_ptr(),
            p.len() / 3,
            q.as_ptr(),
            q.len() / 3,
            out.as_mut_ptr(),
        )
    };
    (s, out)
}

fn pair() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pair = synth_pair(&SynthSpec {
        n_points: 48,
        ..SynthSpec::default()
    })
    .unwrap();
    (
        flat(pair.p.points()),
        flat(pair.q.points()),
        flat(pair.gt.unwrap().vectors()),
    )
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ppwc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn inference_matches_the_rust_api() {
    let cfg = small_config();
    let m = new_model(&cfg, 3);
    let (p, q, _) = pair();
    let (status, flow) = infer(m, &p, &q);
    assert_eq!(status, PpwcStatus::Ok);

    let net_cfg: NetworkConfig = serde_json::from_str(cfg.to_str().unwrap()).unwrap();
    let net = Network::new(net_cfg, 3).unwrap();
    let sp =
        pointpwc::geom::PointCloud::new(p.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
    let sq =
        pointpwc::geom::PointCloud::new(q.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
    let expected = flat(net.infer(&sp, &sq).unwrap().vectors());
    assert_eq!(flow, expected);
    unsafe { ppwc_model_free(m) };
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let cfg = small_config();
    let m = new_model(&cfg, 11);
    assert_eq!(unsafe { ppwc_model_save(m, path.as_ptr()) }, PpwcStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { ppwc_model_load(cfg.as_ptr(), path.as_ptr(), &mut loaded) },
        PpwcStatus::Ok
    );
    let (p, q, _) = pair();
    assert_eq!(infer(m, &p, &q).1, infer(loaded, &p, &q).1);
    unsafe {
        ppwc_model_free(m);
        ppwc_model_free(loaded);
    }
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model(&small_config(), 0);
    assert_eq!(unsafe { ppwc_model_save(m, path.as_ptr()) }, PpwcStatus::Ok);
    let mut loaded = ptr::null_mut();
    let status = unsafe { ppwc_model_load(ptr::null(), path.as_ptr(), &mut loaded) };
    assert_eq!(status, PpwcStatus::Checkpoint);
    assert!(loaded.is_null());
    assert!(last_error().contains("checkpoint"));
    unsafe { ppwc_model_free(m) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { ppwc_model_load(ptr::null(), path.as_ptr(), &mut loaded) },
        PpwcStatus::Io
    );
}

#[test]
fn bad_configs_are_rejected() {
    let mut m = ptr::null_mut();
    for json in [r#"{"levels": 1}"#, r#"{"depth": 3}"#, "not json"] {
        let cfg = CString::new(json).unwrap();
        assert_eq!(
            unsafe { ppwc_model_new(cfg.as_ptr(), 0, &mut m) },
            PpwcStatus::Config,
            "{json}"
        );
        assert!(m.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn error_message_clears_on_success() {
    let cfg = CString::new("{").unwrap();
    let mut m = ptr::null_mut();
    unsafe { ppwc_model_new(cfg.as_ptr(), 0, &mut m) };
    assert!(!ppwc_last_error_message().is_null());
    let mut c = 0.0;
    let p = [0.0, 0.0, 0.0];
    assert_eq!(
        unsafe { ppwc_chamfer(p.as_ptr(), 1, p.as_ptr(), 1, &mut c) },
        PpwcStatus::Ok
    );
    assert!(ppwc_last_error_message().is_null());
}

#[test]
fn null_pointers_are_reported() {
    let m = new_model(&small_config(), 0);
    let (p, q, _) = pair();
    let s = unsafe { ppwc_infer(m, ptr::null(), 48, q.as_ptr(), 48, ptr::null_mut()) };
    assert_eq!(s, PpwcStatus::NullPointer);
    let s = unsafe { ppwc_infer(ptr::null(), p.as_ptr(), 48, q.as_ptr(), 48, ptr::null_mut()) };
    assert_eq!(s, PpwcStatus::NullPointer);
    assert_eq!(
        unsafe { ppwc_model_new(ptr::null(), 0, ptr::null_mut()) },
        PpwcStatus::NullPointer
    );
    assert_eq!(unsafe { ppwc_model_min_points(ptr::null()) }, 0);
    unsafe {
        ppwc_model_free(ptr::null_mut());
        ppwc_model_free(m);
    }
}

#[test]
fn too_few_points_and_non_finite_input() {
    let m = new_model(&small_config(), 0);
    assert_eq!(unsafe { ppwc_model_min_points(m) }, 16);
    let p = vec![0.5; 3 * 8];
    assert_eq!(infer(m, &p, &p).0, PpwcStatus::TooFewPoints);
    let (mut p, q, _) = pair();
    p[4] = f64::NAN;
    assert_eq!(infer(m, &p, &q).0, PpwcStatus::InvalidArgument);
    unsafe { ppwc_model_free(m) };
}

#[test]
fn evaluate_and_chamfer() {
    let (p, q, gt) = pair();
    let mut metrics = PpwcMetrics::default();
    assert_eq!(
        unsafe { ppwc_evaluate(gt.as_ptr(), gt.as_ptr(), 48, &mut metrics) },
        PpwcStatus::Ok
    );
    assert_eq!(metrics.epe3d, 0.0);
    assert_eq!(metrics.acc_strict, 1.0);
    let zero = vec![0.0; gt.len()];
    assert_eq!(
        unsafe { ppwc_evaluate(zero.as_ptr(), gt.as_ptr(), 48, &mut metrics) },
        PpwcStatus::Ok
    );
    assert!(metrics.epe3d > 0.0);

    let mut c = -1.0;
    assert_eq!(
        unsafe { ppwc_chamfer(p.as_ptr(), 48, p.as_ptr(), 48, &mut c) },
        PpwcStatus::Ok
    );
    assert_eq!(c, 0.0);
    assert_eq!(
        unsafe { ppwc_chamfer(p.as_ptr(), 48, q.as_ptr(), 48, &mut c) },
        PpwcStatus::Ok
    );
    assert!(c > 0.0);
    assert_eq!(
        unsafe { ppwc_chamfer(p.as_ptr(), 0, q.as_ptr(), 48, &mut c) },
        PpwcStatus::InvalidArgument
    );
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libpointpwc_ffi.a");
    assert!(
        lib.exists(),
        "static library not found at {}",
        lib.display()
    );
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("c_smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
