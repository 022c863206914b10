//! Compiles `tests/c/smoke.c` against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

fn staticlib() -> PathBuf {
    // target/<profile>/deps/c_abi-<hash> -> target/<profile>/libefpn_ffi.a
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    profile_dir.join("libefpn_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = staticlib();
    assert!(lib.is_file(), "{} not built", lib.display());
    let dir = tempfile::TempDir::new().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("run the C compiler");
    assert!(status.success(), "compiling smoke.c failed");
    let out = Command::new(&exe).arg(dir.path().join("m.ckpt")).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    let expected = efpn_core::EfpnConfig::default();
    assert_eq!(
        stdout.trim(),
        format!(
            "version {} params {} classes {}",
            env!("CARGO_PKG_VERSION"),
            expected.param_count(),
            expected.num_classes
        )
    );
}
