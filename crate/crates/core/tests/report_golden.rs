use std::fs;
use std::path::{Path, PathBuf};

use curricubench::report::{emit_report, SCATTER_FILE, SVG_FILE, TABLE_FILE};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report")
}

/// The renderer is pure, so its outputs for a fixed results file are
/// compared byte for byte. `CURRICUBENCH_BLESS=1` rewrites them.
#[test]
fn report_matches_goldens() {
    let out = tempfile::tempdir().unwrap();
    let summary = emit_report(&golden_dir().join("results.csv"), None, out.path()).unwrap();
    assert_eq!(summary.rows, 12);
    assert_eq!(summary.malformed.len(), 1);
    let bless = std::env::var("CURRICUBENCH_BLESS").is_ok_and(|v| v == "1");
    for name in [TABLE_FILE, SCATTER_FILE, SVG_FILE] {
        let got = fs::read(out.path().join(name)).unwrap();
        let path = golden_dir().join(name);
        if bless {
            fs::write(&path, &got).unwrap();
        }
        assert_eq!(got, fs::read(&path).unwrap(), "{name} differs from golden");
    }
}

#[test]
fn report_is_a_pure_function_of_its_inputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&golden_dir().join("results.csv"), None, a.path()).unwrap();
    emit_report(&golden_dir().join("results.csv"), None, b.path()).unwrap();
    for name in [TABLE_FILE, SCATTER_FILE, SVG_FILE] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn empty_results_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    fs::write(&results, "").unwrap();
    let out = dir.path().join("report");
    assert!(emit_report(&results, None, &out).is_err());
    assert!(!out.exists());
}
