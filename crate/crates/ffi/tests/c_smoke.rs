use std::path::PathBuf;
use std::process::Command;

use certattack::model::Classifier;

/// Compiles `examples/smoke.c` against the header and the static library.
/// Skipped when no C compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libcertattack_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("examples/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());

    let model = tmp.path().join("m.json");
    Classifier::linear(3, 2, vec![1.0, -1.0, 0.5, -0.5, 0.0, 0.0], vec![0.0, 0.0]).unwrap().save(&model).unwrap();
    let out = Command::new(&bin).arg(&model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("class 0 radius "), "{text}");

    let out = Command::new(&bin).arg(tmp.path().join("missing.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load failed"));
}
