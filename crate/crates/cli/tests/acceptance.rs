//! Acceptance suite. Each test verifies one release criterion end to end
//! and prints a `ACCEPTANCE <id> PASS` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use ccfi_core::analyzer::{analyze_module, HazardKind};
use ccfi_core::ir::{parse_module, typecheck, Module};
use ccfi_core::mac::generate_key;
use ccfi_core::pass::{instrument_module, PassConfig};
use ccfi_core::prng::ReservedPrng;
use ccfi_core::scenario::{builtin_scenarios, replay_frequency, run_scenario, Expected};
use ccfi_core::table::TableMode;
use ccfi_core::vm::attack::parse_script;
use ccfi_core::vm::{run, Outcome, RunConfig};

fn fixture_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture_root().join(rel)).unwrap()
}

fn checked(src: &str) -> Module {
    let m = parse_module(src).expect("fixture parses");
    let diags = typecheck(&m);
    assert!(diags.is_empty(), "{diags:?}");
    m
}

fn ir_files(dir: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(fixture_root().join(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ir"))
        .collect();
    v.sort();
    v
}

/// Criterion 1: the MAC engine matches the published AES-128 vectors and an
/// independently implemented AES-128 on 1,000 random (key, block) pairs,
/// in under a second.
#[test]
fn criterion_1_aes_oracle_equivalence() {
    let started = std::time::Instant::now();
    let vectors = [
        (
            "000102030405060708090a0b0c0d0e0f",
            "00112233445566778899aabbccddeeff",
            "69c4e0d86a7b0430d8cdb78070b4c55a",
        ),
        (
            "2b7e151628aed2a6abf7158809cf4f3c",
            "3243f6a8885a308d313198a2e0370734",
            "3925841d02dc09fbdc118597196a0b32",
        ),
    ];
    for (k, p, c) in vectors {
        let key: [u8; 16] = hex::decode(k).unwrap().try_into().unwrap();
        let pt: [u8; 16] = hex::decode(p).unwrap().try_into().unwrap();
        let got = ccfi_core::aes::Aes128::new(&key).encrypt_block(&pt);
        assert_eq!(hex::encode(got), c, "published vector mismatch");
    }
    let mut prng = ReservedPrng::from_seed(0xacce97);
    for _ in 0..1000 {
        let key = prng.bytes_16();
        let block = prng.bytes_16();
        let ours = ccfi_core::aes::Aes128::new(&key).encrypt_block(&block);
        let reference = {
            let cipher = aes::Aes128::new(GenericArray::from_slice(&key));
            let mut b = block;
            cipher.encrypt_block(GenericArray::from_mut_slice(&mut b));
            b
        };
        assert_eq!(ours, reference);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "oracle run took {elapsed:?}");
    println!("ACCEPTANCE 1 PASS: AES matches reference vectors and 1000 random pairs in {elapsed:?}");
}

/// Criterion 2: over the benign corpus (>= 20 programs), instrumented and
/// uninstrumented runs produce byte-identical output with zero violations,
/// exact-map table, five seeds each.
#[test]
fn criterion_2_semantic_transparency() {
    let files = ir_files("benign");
    assert!(files.len() >= 20, "corpus holds {} programs", files.len());
    let mut checked_runs = 0;
    for path in &files {
        let m = checked(&std::fs::read_to_string(path).unwrap());
        let instrumented = instrument_module(&m, &PassConfig::default());
        for seed in [11u64, 222, 3333, 44444, 0xccf1] {
            let config = RunConfig {
                seed,
                table_mode: TableMode::Exact,
                ..RunConfig::default()
            };
            let base = run(&m, None, &config);
            let inst = run(&instrumented, None, &config);
            assert!(
                matches!(inst.outcome, Outcome::Halted { .. }),
                "{path:?} seed {seed}: {:?}",
                inst.outcome
            );
            assert_eq!(base.outcome, inst.outcome, "{path:?} seed {seed}");
            assert_eq!(base.output, inst.output, "{path:?} seed {seed}");
            checked_runs += 1;
        }
    }
    println!(
        "ACCEPTANCE 2 PASS: {} programs x 5 seeds byte-identical, {} comparisons, zero violations",
        files.len(),
        checked_runs
    );
}

/// Criterion 3: the eight built-in scenarios produce exactly their expected
/// outcomes, deterministically under fixed seeds.
#[test]
fn criterion_3_attack_suite() {
    let scenarios = builtin_scenarios();
    let expected = [
        ("s1-cross-address-swap", Expected::Detected),
        ("s2-same-address-replay", Expected::Bypassed),
        ("s3-domain-confusion", Expected::Detected),
        ("s4-frame-pointer-corruption", Expected::Detected),
        ("s5-rawcopy-stale-mac", Expected::Detected),
        ("s6-unprotected-index", Expected::Bypassed),
        ("s7-manual-index-protection", Expected::Detected),
        ("s8-type-signature-swap", Expected::Detected),
    ];
    assert_eq!(scenarios.len(), expected.len());
    for (s, (name, want)) in scenarios.iter().zip(expected) {
        assert_eq!(s.name, name);
        assert_eq!(s.expected, want, "{name} expectation drifted");
        let report = run_scenario(s).unwrap();
        assert!(
            report.pass,
            "{name}: expected {want:?}, got {} ({})",
            report.actual, report.detail
        );
    }
    println!("ACCEPTANCE 3 PASS: scenarios s1-s8 match their expected outcomes");
}

/// Criterion 4: with 4-bit per-frame entropy, same-address replay aligns
/// with frequency 0.0625 +/- 0.01 through one padded frame and
/// 0.0039 +/- 0.005 through two, over 10,000 trials each.
#[test]
fn criterion_4_replay_probability() {
    let atk = read_fixture("replay/replay.atk");

    let d1 = read_fixture("replay/depth1.ir");
    let (hits1, n1, f1) = replay_frequency(&d1, &atk, 10_000, 4, 0xccf1).unwrap();
    assert!(
        (f1 - 0.0625).abs() <= 0.01,
        "depth-1 frequency {f1} ({hits1}/{n1}) outside 0.0625 +/- 0.01"
    );

    let d2 = read_fixture("replay/depth2.ir");
    let (hits2, n2, f2) = replay_frequency(&d2, &atk, 10_000, 4, 0xccf1).unwrap();
    let expect2 = 1.0 / 256.0;
    assert!(
        (f2 - expect2).abs() <= 0.005,
        "depth-2 frequency {f2} ({hits2}/{n2}) outside {expect2} +/- 0.005"
    );

    // sanity floor: with no randomization the replay always lands
    let (_, _, f0) = replay_frequency(&d1, &atk, 100, 0, 7).unwrap();
    assert_eq!(f0, 1.0);

    println!(
        "ACCEPTANCE 4 PASS: replay frequency depth-1 {f1:.4} ({hits1}/{n1}), depth-2 {f2:.4} ({hits2}/{n2}), entropy-0 floor 1.0"
    );
}

/// Criterion 5: the 16-byte MAC key never appears in attacker-visible
/// memory, across every attack point of the full scenario suite.
#[test]
fn criterion_5_key_secrecy() {
    let mut snapshots_scanned = 0usize;
    let mut bytes_scanned = 0usize;
    for s in builtin_scenarios() {
        let m = checked(&s.program);
        let instrumented = instrument_module(&m, &s.pass);
        let script = s.script.as_deref().map(|t| parse_script(t).unwrap());
        let config = RunConfig {
            record_snapshots: true,
            ..s.run.clone()
        };
        let key = generate_key(&mut ReservedPrng::from_seed(config.seed));
        let result = run(&instrumented, script.as_ref(), &config);
        for snap in &result.snapshots {
            snapshots_scanned += 1;
            for (_, bytes) in snap {
                bytes_scanned += bytes.len();
                assert!(
                    !bytes.windows(16).any(|w| w == key.bytes()),
                    "{}: key bytes visible in attacker-readable memory",
                    s.name
                );
            }
        }
    }
    assert!(snapshots_scanned > 0);
    println!(
        "ACCEPTANCE 5 PASS: key absent from {snapshots_scanned} snapshots ({bytes_scanned} bytes scanned)"
    );
}

fn steps_of(m: &Module, config: &RunConfig) -> (u64, u64) {
    let r = run(m, None, config);
    assert!(
        matches!(r.outcome, Outcome::Halted { .. }),
        "bench run trapped: {:?}",
        r.outcome
    );
    (r.counters.steps, r.counters.mac_ops)
}

/// Criterion 6: across the five empty-function fixtures the instrumented
/// minus baseline step count per call is one constant; leaf-optimized
/// builds show a strictly smaller constant and exactly zero MAC operations
/// attributable to the callee.
#[test]
fn criterion_6_constant_call_overhead() {
    let config = RunConfig {
        entropy_bits: 0,
        ..RunConfig::default()
    };
    let frame_cfg = PassConfig {
        entropy_bits: 0,
        leaf_opt: false,
        ..PassConfig::default()
    };
    let leaf_cfg = PassConfig {
        entropy_bits: 0,
        ..PassConfig::default()
    };

    let mut leaf_deltas = Vec::new();
    let mut frame_deltas = Vec::new();
    for name in ["empty_a", "empty_b", "empty_c", "empty_d", "empty_e"] {
        let src = read_fixture(&format!("bench/{name}.ir"));
        let m = checked(&src);
        let (base, _) = steps_of(&m, &config);
        let (leaf, leaf_macs) = steps_of(&instrument_module(&m, &leaf_cfg), &config);
        let (frame, _) = steps_of(&instrument_module(&m, &frame_cfg), &config);
        leaf_deltas.push(leaf - base);
        frame_deltas.push(frame - base);
        // main's own frame protection accounts for every MAC op; the eight
        // leaf calls add none
        assert_eq!(leaf_macs, 2, "{name}: leaf callees must cost 0 MAC ops");
    }
    assert!(
        leaf_deltas.windows(2).all(|w| w[0] == w[1]),
        "leaf-path deltas differ: {leaf_deltas:?}"
    );
    assert!(
        frame_deltas.windows(2).all(|w| w[0] == w[1]),
        "frame-path deltas differ: {frame_deltas:?}"
    );
    assert!(
        leaf_deltas[0] < frame_deltas[0],
        "leaf constant {} not below frame constant {}",
        leaf_deltas[0],
        frame_deltas[0]
    );

    // per-call linearity: halving the call count removes exactly 4 deltas
    let eight = read_fixture("bench/empty_a.ir");
    let four = {
        let mut lines: Vec<&str> = eight.lines().collect();
        let mut removed = 0;
        lines.retain(|l| {
            if removed < 4 && l.trim() == "call @cb()" {
                removed += 1;
                false
            } else {
                true
            }
        });
        lines.join("\n")
    };
    let m8 = checked(&eight);
    let m4 = checked(&four);
    let d8 = {
        let (b, _) = steps_of(&m8, &config);
        let (i, _) = steps_of(&instrument_module(&m8, &leaf_cfg), &config);
        i - b
    };
    let d4 = {
        let (b, _) = steps_of(&m4, &config);
        let (i, _) = steps_of(&instrument_module(&m4, &leaf_cfg), &config);
        i - b
    };
    assert_eq!((d8 - d4) % 4, 0);
    let per_call = (d8 - d4) / 4;
    assert!(per_call > 0);

    // the function-pointer fixture performs exactly one check per indirect
    // call site execution (8 loops) plus one seal per store and one at init
    let fsrc = read_fixture("bench/fptr_calls.ir");
    let fm = checked(&fsrc);
    let fp_cfg = PassConfig {
        protect_stack: false,
        entropy_bits: 0,
        ..PassConfig::default()
    };
    let (_, fp_macs) = steps_of(&instrument_module(&fm, &fp_cfg), &config);
    assert_eq!(fp_macs, 9, "8 checked loads + 1 startup seal");

    println!(
        "ACCEPTANCE 6 PASS: empty-call delta constant (leaf {} < frame {}), {} steps per leaf call, fptr fixture 1 check per indirect call",
        leaf_deltas[0], frame_deltas[0], per_call
    );
}

/// Criterion 7: the analyzer reports exactly the planted hazards on the
/// hazard corpus, zero on the clean corpus, and every run-time MAC failure
/// from a missed re-seal carries at least one flag.
#[test]
fn criterion_7_analyzer_fidelity() {
    // clean corpus: benign programs plus the table-dispatch fixture
    let mut clean = ir_files("benign");
    clean.push(fixture_root().join("fptr_array.ir"));
    for path in &clean {
        let m = checked(&std::fs::read_to_string(path).unwrap());
        let hz = analyze_module(&m);
        assert!(hz.is_empty(), "{path:?}: unexpected {hz:?}");
    }

    let planted: &[(&str, &[(HazardKind, usize)])] = &[
        (
            "dyn_array.ir",
            &[(HazardKind::FnPtrCastToRaw, 3), (HazardKind::RawCopyUntyped, 1)],
        ),
        ("oracle.ir", &[(HazardKind::OracleExposure, 1)]),
        (
            "cast_back.ir",
            &[(HazardKind::FnPtrCastToRaw, 1), (HazardKind::RawCastToFnPtr, 1)],
        ),
        ("rec_rawcopy.ir", &[(HazardKind::RawCopyUntyped, 1)]),
    ];
    for (file, want) in planted {
        let m = checked(&read_fixture(&format!("hazards/{file}")));
        let hz = analyze_module(&m);
        let total: usize = want.iter().map(|(_, n)| n).sum();
        assert_eq!(hz.len(), total, "{file}: {hz:?}");
        for (kind, n) in *want {
            assert_eq!(
                hz.iter().filter(|h| h.kind == *kind).count(),
                *n,
                "{file}: {kind:?}"
            );
        }
    }

    // coverage: every hazard fixture that traps under instrumentation due
    // to a missed re-seal is flagged at the faulting copy chain
    let mut trapping = 0;
    for path in ir_files("hazards") {
        let m = checked(&std::fs::read_to_string(&path).unwrap());
        let hz = analyze_module(&m);
        let inst = instrument_module(&m, &PassConfig::default());
        let r = run(&inst, None, &RunConfig::default());
        if r.outcome.is_ccfi_violation() {
            trapping += 1;
            assert!(!hz.is_empty(), "{path:?} trapped without a flag");
        }
    }
    assert!(trapping >= 2, "hazard corpus lost its trapping fixtures");
    println!(
        "ACCEPTANCE 7 PASS: planted hazards exact, clean corpus zero, {trapping} run-time failures all flagged"
    );
}

/// Criterion 8: with 4-bit entropy all 16 pad values appear within 1,000
/// allocations, and a chi-square test over 16,000 pad draws is uniform at
/// p > 0.001.
#[test]
fn criterion_8_allocator_statistics() {
    use ccfi_core::alloc::{frame_pad, HeapAllocator, GRANULE};

    let base = 0x4000_0000u64;
    let mut prng = ReservedPrng::from_seed(0xa110c);
    let mut heap = HeapAllocator::new(base, 1 << 26, 4, false);
    let extent = 8 + 15 * GRANULE;
    let mut seen = [false; 16];
    for _ in 0..1000 {
        let addr = heap.alloc(&mut prng, 8).unwrap();
        let pad = (addr - base) % extent;
        seen[(pad / GRANULE) as usize] = true;
    }
    assert!(seen.iter().all(|s| *s), "missing pad values: {seen:?}");

    let mut counts = [0u64; 16];
    let mut prng = ReservedPrng::from_seed(0xccf1);
    for _ in 0..16_000 {
        let pad = frame_pad(&mut prng, 4) / GRANULE;
        counts[pad as usize] += 1;
    }
    let expected = 1000.0f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    // upper critical value of chi-square with 15 degrees of freedom at
    // p = 0.001; staying below it means uniformity is not rejected
    const CHI2_CRIT_15DOF_P001: f64 = 37.697;
    assert!(
        chi2 < CHI2_CRIT_15DOF_P001,
        "chi-square {chi2:.2} rejects uniformity (counts {counts:?})"
    );
    println!(
        "ACCEPTANCE 8 PASS: 16/16 pad values within 1000 allocations, chi-square {chi2:.2} < {CHI2_CRIT_15DOF_P001}"
    );
}

/// Criterion 9: hardware-scale results are explicitly not reproduced here;
/// the README says so and the step model stands in for them.
#[test]
fn criterion_9_non_goals_are_documented() {
    let readme = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"),
    )
    .expect("README.md present");
    for needle in ["SPEC2006", "cycle", "throughput"] {
        assert!(
            readme.contains(needle),
            "README must state that {needle}-class results are out of scope"
        );
    }
    println!(
        "ACCEPTANCE 9 PASS: hardware-scale overheads (SPEC2006 percentages, webserver throughput, cycle counts) documented as not reproduced; step/MAC-op accounting stands in"
    );
}
