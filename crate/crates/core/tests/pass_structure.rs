//! Structural properties of the instrumentation pass: identity under the
//! all-off configuration, prologue/epilogue placement, leaf handling,
//! startup sealing of globals, and full mediation of the output.

use ccfi_core::ir::{parse_module, print_module, typecheck, Instr, Module};
use ccfi_core::pass::{
    emit_global_initializers, instrument_frame, instrument_module, leaf_optimize, mediation_scan,
    PassConfig, INIT_FUNCTION,
};

fn module(src: &str) -> Module {
    let m = parse_module(src).expect("parses");
    assert!(typecheck(&m).is_empty());
    m
}

fn fixture(rel: &str) -> String {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel);
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn all_off_configuration_is_identity() {
    for file in ["benign/21_mixed.ir", "benign/13_vtable.ir", "benign/04_fib.ir"] {
        let m = module(&fixture(file));
        let out = instrument_module(&m, &PassConfig::disabled());
        assert_eq!(m, out, "{file} changed under the all-off config");
    }
}

#[test]
fn non_leaf_functions_gain_prologue_mac_and_epilogue_check() {
    let m = module(&fixture("benign/05_calls.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    for f in &out.functions {
        if f.name == INIT_FUNCTION {
            continue;
        }
        let orig = m.function(&f.name).unwrap().1;
        if orig.is_leaf() {
            continue;
        }
        assert!(f.has_mac_slot, "{} lost its mac slot", f.name);
        assert_eq!(f.body[0], Instr::FrameMac, "{} prologue", f.name);
        let rets: Vec<usize> = f
            .body
            .iter()
            .enumerate()
            .filter(|(_, i)| matches!(i, Instr::Ret { .. }))
            .map(|(i, _)| i)
            .collect();
        assert!(!rets.is_empty());
        for r in rets {
            assert_eq!(f.body[r - 1], Instr::FrameCheck, "{} epilogue", f.name);
        }
    }
}

#[test]
fn frame_pad_is_emitted_only_with_entropy() {
    let m = module(&fixture("benign/05_calls.ir"));
    let without = instrument_module(
        &m,
        &PassConfig {
            entropy_bits: 0,
            ..PassConfig::default()
        },
    );
    let with = instrument_module(
        &m,
        &PassConfig {
            entropy_bits: 4,
            ..PassConfig::default()
        },
    );
    let count = |m: &Module| {
        m.functions
            .iter()
            .flat_map(|f| &f.body)
            .filter(|i| matches!(i, Instr::FramePad))
            .count()
    };
    assert_eq!(count(&without), 0);
    assert!(count(&with) > 0);
}

#[test]
fn leaf_functions_take_the_register_path() {
    let m = module(&fixture("benign/18_leaf_calls.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    let leaf = out.function("axpy").unwrap().1;
    assert!(!leaf.has_mac_slot);
    assert_eq!(leaf.body[0], Instr::LeafSave);
    assert!(leaf.body.iter().any(|i| matches!(i, Instr::LeafCheck)));
    assert!(!leaf
        .body
        .iter()
        .any(|i| matches!(i, Instr::FrameMac | Instr::FrameCheck | Instr::MacPtr { .. })));

    // with the optimization off, the same function takes the frame path
    let unopt = instrument_module(
        &m,
        &PassConfig {
            leaf_opt: false,
            ..PassConfig::default()
        },
    );
    let f = unopt.function("axpy").unwrap().1;
    assert!(f.has_mac_slot);
    assert_eq!(f.body[0], Instr::FrameMac);
}

#[test]
fn leaf_optimize_refuses_non_leaves() {
    let m = module(&fixture("benign/05_calls.ir"));
    let (_, shift) = m.function("shift").unwrap();
    assert!(leaf_optimize(shift).is_err());
    let (_, scale) = m.function("scale").unwrap();
    assert!(leaf_optimize(scale).is_ok());
}

#[test]
fn branch_targets_survive_rewriting() {
    // a loop whose back-edge targets instruction 0 must not re-run the
    // prologue, and targets past inserted checks must follow their group
    let m = module(&fixture("benign/03_loop_sum.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    let diags = typecheck(&out);
    assert!(diags.is_empty(), "{diags:?}");
    // semantic check is the real proof: the instrumented loop still sums
    let r = ccfi_core::vm::run(&out, None, &ccfi_core::vm::RunConfig::default());
    assert_eq!(r.output, vec![55]);
}

#[test]
fn instrumented_output_retypechecks_and_prints_stably() {
    for file in [
        "benign/13_vtable.ir",
        "benign/21_mixed.ir",
        "benign/22_nested_rec.ir",
        "benign/11_record_copy.ir",
    ] {
        let m = module(&fixture(file));
        let out = instrument_module(&m, &PassConfig::default());
        let diags = typecheck(&out);
        assert!(diags.is_empty(), "{file}: {diags:?}");
        // canonical print of instrumented IR reparses to a fixed point
        let printed = print_module(&out);
        let reparsed = parse_module(&printed).expect("instrumented IR reparses");
        assert_eq!(print_module(&reparsed), printed, "{file}");
    }
}

#[test]
fn fnptr_stores_and_loads_are_wrapped() {
    let m = module(&fixture("benign/08_fptr_local.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    let main = out.function("main").unwrap().1;
    let body = &main.body;
    let store_at = body
        .iter()
        .position(|i| matches!(i, Instr::Store { .. }))
        .unwrap();
    assert!(matches!(body[store_at + 1], Instr::MacPtr { .. }));
    let load_at = body
        .iter()
        .position(|i| matches!(i, Instr::Load { ty, .. } if ty.is_fnptr()))
        .unwrap();
    assert!(matches!(body[load_at + 1], Instr::CheckPtr { .. }));
    assert!(matches!(body[load_at + 2], Instr::AssertNz { .. }));
}

#[test]
fn mcall_is_lowered_and_new_obj_sealed() {
    let m = module(&fixture("benign/13_vtable.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    let main = out.function("main").unwrap().1;
    assert!(!main.body.iter().any(|i| matches!(i, Instr::MCall { .. })));
    assert!(main.body.iter().any(|i| matches!(i, Instr::TCall { .. })));
    let new_at = main
        .body
        .iter()
        .position(|i| matches!(i, Instr::NewObj { .. }))
        .unwrap();
    assert!(matches!(main.body[new_at + 1], Instr::TableRef { .. }));
    assert!(matches!(main.body[new_at + 2], Instr::MacPtr { .. }));
}

#[test]
fn global_initializers_are_sealed_at_startup() {
    let m = module(&fixture("benign/22_nested_rec.ir"));
    let out = instrument_module(&m, &PassConfig::default());
    let init = out.function(INIT_FUNCTION).unwrap().1;
    // one seal for the nested function pointer; the spare global is
    // zero-initialized and stays unsealed
    let macs = init
        .body
        .iter()
        .filter(|i| matches!(i, Instr::MacPtr { .. }))
        .count();
    assert_eq!(macs, 1);
}

#[test]
fn module_without_fn_globals_gets_an_empty_init() {
    let m = module(&fixture("benign/02_arith.ir"));
    let out = emit_global_initializers(&m, &PassConfig::default());
    let init = out.function(INIT_FUNCTION).unwrap().1;
    assert_eq!(init.body, vec![Instr::Ret { value: None }]);
}

#[test]
fn instrument_frame_is_identity_shaped_on_bodies_without_rets() {
    let m = module("fn main() -> int64 { print 1\n halt 0 }");
    let (_, main) = m.function("main").unwrap();
    let out = instrument_frame(main, &PassConfig::default());
    assert_eq!(out.body[0], Instr::FrameMac);
    assert!(!out.body.iter().any(|i| matches!(i, Instr::FrameCheck)));
}

#[test]
fn benign_corpus_is_fully_mediated_after_instrumentation() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/benign");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "ir") {
            continue;
        }
        let m = module(&std::fs::read_to_string(&path).unwrap());
        let out = instrument_module(&m, &PassConfig::default());
        let violations = mediation_scan(&out);
        assert!(violations.is_empty(), "{path:?}: {violations:?}");
    }
}

#[test]
fn type_sig_classes_attach_signatures() {
    let m = module(&fixture("benign/06_fptr_global.ir"));
    let out = instrument_module(
        &m,
        &PassConfig {
            type_sig_classes: true,
            ..PassConfig::default()
        },
    );
    let main = out.function("main").unwrap().1;
    let has_sig = main
        .body
        .iter()
        .any(|i| matches!(i, Instr::CheckPtr { sig: Some(_), .. }));
    assert!(has_sig);
    let init = out.function(INIT_FUNCTION).unwrap().1;
    assert!(init
        .body
        .iter()
        .any(|i| matches!(i, Instr::MacPtr { sig: Some(_), .. })));
}
