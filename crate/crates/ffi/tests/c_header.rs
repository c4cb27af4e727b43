use std::path::{Path, PathBuf};
use std::process::Command;

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().ok()?;
    let profile = exe.parent()?.parent()?;
    let lib = profile.join("libnormline_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_header() {
    let (Some(cc), Some(lib)) = (compiler(), static_lib()) else {
        eprintln!("skipping: no C compiler or static library");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "normline.h"
int main(void) {
    NlDataset *ds = NULL;
    if (nl_dataset_synthetic(500, 2, 1, 10, 1.2, 1, &ds) != NL_STATUS_OK) return 1;
    size_t n = 0;
    nl_dataset_len(ds, NL_SPLIT_TEST, &n);
    NlModel *m = NULL;
    if (nl_model_build(ds, "hidden = [4]", 0, &m) != NL_STATUS_OK) { fprintf(stderr, "%s\n", nl_last_error()); return 2; }
    double probs[64];
    size_t written = 0;
    if (nl_model_predict(m, ds, NL_SPLIT_TEST, probs, 64, &written) != NL_STATUS_OK) return 3;
    if (nl_model_load("/nonexistent", &m) != NL_STATUS_DATA) return 4;
    printf("%s %zu %zu\n", nl_version(), n, written);
    nl_model_free(m);
    nl_dataset_free(ds);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let out = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), format!("{} 50 50", env!("CARGO_PKG_VERSION")));
}
