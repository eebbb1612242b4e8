//! Built-in attack scenarios and the machinery to run them.

use crate::ir::{parse_module, typecheck, Module};
use crate::pass::{instrument_module, PassConfig};
use crate::table::TableMode;
use crate::vm::attack::{parse_script, AttackScript};
use crate::vm::{run, CrashMode, Outcome, RunConfig, RunResult};
use serde::Serialize;
use std::fmt;

/// What a scenario is expected to demonstrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    /// The run ends in a CCFI violation before the corrupted value steers
    /// control.
    Detected,
    /// The run completes without detection and its observable output
    /// diverges from the attack-free baseline.
    Bypassed,
    /// The attack leaves observable behavior unchanged.
    Unaffected,
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expected::Detected => "detected",
            Expected::Bypassed => "bypassed",
            Expected::Unaffected => "unaffected",
        })
    }
}

/// How an actual run classified, including the failure modes no scenario
/// should expect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classified {
    Detected,
    Bypassed,
    Unaffected,
    Crashed(String),
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Classified::Detected => f.write_str("detected"),
            Classified::Bypassed => f.write_str("bypassed"),
            Classified::Unaffected => f.write_str("unaffected"),
            Classified::Crashed(d) => write!(f, "crashed ({d})"),
        }
    }
}

impl Classified {
    pub fn matches(&self, expected: Expected) -> bool {
        matches!(
            (self, expected),
            (Classified::Detected, Expected::Detected)
                | (Classified::Bypassed, Expected::Bypassed)
                | (Classified::Unaffected, Expected::Unaffected)
        )
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub program: String,
    pub script: Option<String>,
    pub expected: Expected,
    pub trials: u32,
    pub pass: PassConfig,
    pub run: RunConfig,
}

impl Scenario {
    fn builtin(
        name: &str,
        description: &str,
        program: &str,
        script: Option<&str>,
        expected: Expected,
    ) -> Scenario {
        Scenario {
            name: name.to_string(),
            description: description.to_string(),
            program: program.to_string(),
            script: script.map(str::to_string),
            expected,
            trials: 1,
            pass: PassConfig {
                entropy_bits: 0,
                ..PassConfig::default()
            },
            run: RunConfig {
                entropy_bits: 0,
                ..RunConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub expected: Expected,
    pub actual: Classified,
    pub pass: bool,
    pub trials: u32,
    pub detail: String,
}

#[derive(Debug)]
pub enum ScenarioError {
    Parse(String),
    Type(String),
    Script(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Parse(e) => write!(f, "program does not parse: {e}"),
            ScenarioError::Type(e) => write!(f, "program does not typecheck: {e}"),
            ScenarioError::Script(e) => write!(f, "attack script rejected: {e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// Classify one finished run against its attack-free baseline.
pub fn classify(result: &RunResult, baseline: &RunResult) -> Classified {
    match &result.outcome {
        Outcome::Trapped(t) if result.outcome.is_ccfi_violation() => {
            let _ = t;
            Classified::Detected
        }
        Outcome::Trapped(t) => Classified::Crashed(format!("{t:?}")),
        Outcome::Halted { .. } => {
            if result.output == baseline.output {
                Classified::Unaffected
            } else {
                Classified::Bypassed
            }
        }
    }
}

fn prepare(s: &Scenario) -> Result<(Module, Option<AttackScript>), ScenarioError> {
    let module = parse_module(&s.program).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let diags = typecheck(&module);
    if !diags.is_empty() {
        return Err(ScenarioError::Type(
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let script = match &s.script {
        Some(text) => {
            Some(parse_script(text).map_err(|e| ScenarioError::Script(e.to_string()))?)
        }
        None => None,
    };
    Ok((instrument_module(&module, &s.pass), script))
}

/// Run a scenario over its trials. Every trial must classify the same way
/// for the scenario to pass.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let (module, script) = prepare(s)?;
    let mut actual: Option<Classified> = None;
    let mut detail = String::new();
    let mut all_match = true;
    for trial in 0..s.trials.max(1) {
        let config = RunConfig {
            seed: s.run.seed.wrapping_add(trial as u64),
            ..s.run.clone()
        };
        let baseline = run(&module, None, &config);
        let attacked = run(&module, script.as_ref(), &config);
        let class = classify(&attacked, &baseline);
        if let Some(prev) = &actual {
            if *prev != class {
                all_match = false;
            }
        }
        if detail.is_empty() {
            detail = format!(
                "outcome {:?}, output {:?} (baseline {:?})",
                attacked.outcome, attacked.output, baseline.output
            );
        }
        actual = Some(class);
    }
    let actual = actual.expect("at least one trial");
    let pass = all_match && actual.matches(s.expected);
    Ok(ScenarioReport {
        name: s.name.clone(),
        expected: s.expected,
        actual,
        pass,
        trials: s.trials.max(1),
        detail,
    })
}

/// The eight built-in scenarios.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let mut v = Vec::new();

    v.push(Scenario::builtin(
        "s1-cross-address-swap",
        "swap two sealed function pointers, values and MACs, between two addresses",
        include_str!("../../../fixtures/scenarios/s1_cross_swap.ir"),
        Some(include_str!("../../../fixtures/scenarios/s1_cross_swap.atk")),
        Expected::Detected,
    ));

    let mut s2 = Scenario::builtin(
        "s2-same-address-replay",
        "replay an old (pointer, MAC) pair at the same reused heap address",
        include_str!("../../../fixtures/scenarios/s2_replay.ir"),
        Some(include_str!("../../../fixtures/scenarios/s2_replay.atk")),
        Expected::Bypassed,
    );
    s2.run.reuse_heap = true;
    v.push(s2);

    v.push(Scenario::builtin(
        "s3-domain-confusion",
        "use a function-pointer MAC as a return-address MAC at an equal class payload",
        include_str!("../../../fixtures/scenarios/s3_domain.ir"),
        Some(include_str!("../../../fixtures/scenarios/s3_domain.atk")),
        Expected::Detected,
    ));

    v.push(Scenario::builtin(
        "s4-frame-pointer-corruption",
        "corrupt only the saved frame pointer",
        include_str!("../../../fixtures/scenarios/s4_frameptr.ir"),
        Some(include_str!("../../../fixtures/scenarios/s4_frameptr.atk")),
        Expected::Detected,
    ));

    v.push(Scenario::builtin(
        "s5-rawcopy-stale-mac",
        "raw-copy a sealed region and call through the unsealed copy",
        include_str!("../../../fixtures/scenarios/s5_rawcopy.ir"),
        None,
        Expected::Detected,
    ));

    v.push(Scenario::builtin(
        "s6-unprotected-index",
        "overwrite an unprotected jump-table index",
        include_str!("../../../fixtures/scenarios/s6_index.ir"),
        Some(include_str!("../../../fixtures/scenarios/s6_index.atk")),
        Expected::Bypassed,
    ));

    v.push(Scenario::builtin(
        "s7-manual-index-protection",
        "the same index overwrite against manual macptr/checkptr protection",
        include_str!("../../../fixtures/scenarios/s7_manual.ir"),
        Some(include_str!("../../../fixtures/scenarios/s7_manual.atk")),
        Expected::Detected,
    ));

    let mut s8 = Scenario::builtin(
        "s8-type-signature-swap",
        "same-address replay of a pointer with a different type signature, signatures sealed",
        include_str!("../../../fixtures/scenarios/s8_typesig.ir"),
        Some(include_str!("../../../fixtures/scenarios/s8_typesig.atk")),
        Expected::Detected,
    );
    s8.pass.type_sig_classes = true;
    s8.run.reuse_heap = true;
    v.push(s8);

    v
}

/// Replay alignment frequency: run `trials` seeds and report the fraction
/// whose output diverged from the attack-free baseline without detection.
pub fn replay_frequency(
    program: &str,
    script: &str,
    trials: u32,
    entropy_bits: u32,
    base_seed: u64,
) -> Result<(u32, u32, f64), ScenarioError> {
    let module = parse_module(program).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let diags = typecheck(&module);
    if !diags.is_empty() {
        return Err(ScenarioError::Type(
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let script = parse_script(script).map_err(|e| ScenarioError::Script(e.to_string()))?;
    let pass = PassConfig {
        entropy_bits,
        ..PassConfig::default()
    };
    let instrumented = instrument_module(&module, &pass);
    let mut hits = 0u32;
    for trial in 0..trials {
        let config = RunConfig {
            seed: base_seed.wrapping_add(trial as u64),
            entropy_bits,
            reuse_heap: true,
            table_mode: TableMode::Exact,
            crash_mode: CrashMode::Trap,
            ..RunConfig::default()
        };
        let baseline = run(&instrumented, None, &config);
        let attacked = run(&instrumented, Some(&script), &config);
        if classify(&attacked, &baseline) == Classified::Bypassed {
            hits += 1;
        }
    }
    Ok((hits, trials, hits as f64 / trials as f64))
}
