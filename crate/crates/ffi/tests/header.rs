use std::path::Path;
use std::process::Command;

const PROGRAM: &str = r#"
#include "cmt.h"
int main(void) {
    CmtDetector *det = 0;
    CmtStatus s = cmt_detector_load("x.json", CMT_MODEL_TEACHER, &det);
    CmtDetection out[4];
    size_t n = 0;
    if (s == CMT_STATUS_OK) {
        s = cmt_detector_detect(det, 0, 64, 64, out, 4, &n);
        cmt_detector_free(det);
    }
    char buf[64];
    cmt_last_error_message(buf, sizeof buf);
    return s == CMT_STATUS_OK ? 0 : (int)s;
}
"#;

#[test]
fn generated_header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("cmt.h")).unwrap();
    for name in [
        "cmt_detector_load",
        "cmt_detector_detect",
        "cmt_detector_free",
        "cmt_contrastive_loss",
        "cmt_ema_update",
        "cmt_evaluate",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .expect("C compiler available");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
