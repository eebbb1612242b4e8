//! Parse/print round trips over the whole fixture corpus, and analyzer
//! behavior on the planted-hazard fixtures.

use ccfi_core::analyzer::{analyze_module, HazardKind};
use ccfi_core::ir::{parse_module, print_module, typecheck};

fn fixture_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn all_ir_files() -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![fixture_root()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "ir") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_parses_typechecks_and_round_trips() {
    let files = all_ir_files();
    assert!(files.len() >= 35, "fixture corpus went missing?");
    for path in files {
        let src = std::fs::read_to_string(&path).unwrap();
        let m = parse_module(&src).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        let diags = typecheck(&m);
        assert!(diags.is_empty(), "{path:?}: {diags:?}");
        let printed = print_module(&m);
        let reparsed = parse_module(&printed)
            .unwrap_or_else(|e| panic!("{path:?} failed reparse: {e}\n{printed}"));
        assert_eq!(m, reparsed, "{path:?} did not round trip");
    }
}

#[test]
fn fptr_array_fixture_shape() {
    let src = std::fs::read_to_string(fixture_root().join("fptr_array.ir")).unwrap();
    let m = parse_module(&src).unwrap();
    assert_eq!(m.functions.len(), 2);
    assert_eq!(m.tables.len(), 1);
}

#[test]
fn clean_corpus_has_zero_hazards() {
    for path in all_ir_files() {
        let p = path.to_string_lossy();
        if !p.contains("benign") && !p.contains("fptr_array") {
            continue;
        }
        let m = parse_module(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let hz = analyze_module(&m);
        assert!(hz.is_empty(), "{path:?}: {hz:?}");
    }
}

#[test]
fn planted_hazards_are_reported_exactly() {
    let expect = |file: &str, expected: &[(HazardKind, usize)]| {
        let src = std::fs::read_to_string(fixture_root().join("hazards").join(file)).unwrap();
        let m = parse_module(&src).unwrap();
        let hz = analyze_module(&m);
        for (kind, count) in expected {
            let got = hz.iter().filter(|h| h.kind == *kind).count();
            assert_eq!(got, *count, "{file}: {kind:?} ({hz:?})");
        }
        let total: usize = expected.iter().map(|(_, c)| c).sum();
        assert_eq!(hz.len(), total, "{file} reported extras: {hz:?}");
    };
    expect(
        "dyn_array.ir",
        &[
            (HazardKind::FnPtrCastToRaw, 3),
            (HazardKind::RawCopyUntyped, 1),
        ],
    );
    expect("oracle.ir", &[(HazardKind::OracleExposure, 1)]);
    expect(
        "cast_back.ir",
        &[
            (HazardKind::FnPtrCastToRaw, 1),
            (HazardKind::RawCastToFnPtr, 1),
        ],
    );
    expect("rec_rawcopy.ir", &[(HazardKind::RawCopyUntyped, 1)]);
}

#[test]
fn runtime_mac_failures_in_hazard_corpus_are_covered_by_flags() {
    use ccfi_core::pass::{instrument_module, PassConfig};
    use ccfi_core::vm::{run, RunConfig};
    let dir = fixture_root().join("hazards");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "ir") {
            continue;
        }
        let m = parse_module(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let hz = analyze_module(&m);
        let instrumented = instrument_module(&m, &PassConfig::default());
        let r = run(&instrumented, None, &RunConfig::default());
        if r.outcome.is_ccfi_violation() {
            assert!(
                !hz.is_empty(),
                "{path:?} fails at run time but carries no flag"
            );
        }
        // uninstrumented, every hazard fixture runs to completion
        let plain = run(&m, None, &RunConfig::default());
        assert!(
            matches!(plain.outcome, ccfi_core::vm::Outcome::Halted { .. }),
            "{path:?} is broken even without protection: {:?}",
            plain.outcome
        );
    }
}
