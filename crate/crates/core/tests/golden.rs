//! Report schema stability: litmus reports must match the checked-in JSON.
//! Run with `UPDATE_GOLDEN=1` to rewrite the files.

use std::path::PathBuf;

use specguard_core::corpus::litmus;
use specguard_core::{analyze, AnalysisConfig, Report};

#[test]
fn litmus_reports_match_golden_files() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for l in litmus() {
        let c = AnalysisConfig::default();
        let json = Report::new(l.name, &c, &analyze(&l.program(), &c).unwrap()).to_json();
        let path = dir.join(format!("{}.json", l.name));
        if update {
            std::fs::write(&path, &json).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(json, want, "{} report changed", l.name);
    }
}
