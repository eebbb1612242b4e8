//! `ccfi` — command-line harness for the MAC-protected toy IR.
//!
//! Subcommands: `run`, `emit-ir`, `analyze`, `scenarios`, `replay-mc`,
//! `bench`. Exit codes: 0 success, 1 analyzer hazards, 2 CCFI violation,
//! 3 other trap, 4 scenario or bench expectation mismatch, 5 input error.

use ccfi_core::analyzer::{analyze_module, suggest_fix, Severity};
use ccfi_core::ir::{parse_module, print_module, typecheck, Module};
use ccfi_core::pass::{instrument_module, PassConfig};
use ccfi_core::scenario::{
    builtin_scenarios, replay_frequency, run_scenario, Expected, Scenario, ScenarioReport,
};
use ccfi_core::table::TableMode;
use ccfi_core::vm::attack::{parse_script, AttackScript};
use ccfi_core::vm::{run, CrashMode, Outcome, RunConfig, RunResult, TrapKind, DEFAULT_SEED};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_HAZARDS: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_TRAP: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_INPUT: u8 = 5;

#[derive(Parser)]
#[command(
    name = "ccfi",
    about = "MAC-protected control flow on a toy IR: instrument, execute, attack, measure",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    JsonLines,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// PRNG seed; fixes the key, pads and addresses
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Per-allocation randomization entropy in bits (0..=16)
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(0..=16))]
    entropy: u32,
    /// MAC table mode: `exact` or `direct:<2^k>`
    #[arg(long, default_value = "exact", value_parser = TableMode::parse)]
    mac_table: TableMode,
    /// Seal type-signature hashes into pointer classes
    #[arg(long)]
    type_sig: bool,
    /// On a failed frame check: diagnostic trap, or zero the return slot
    #[arg(long, value_enum, default_value_t = CrashArg::Trap)]
    crash_mode: CrashArg,
    /// Disable stack (return address / frame pointer) protection
    #[arg(long)]
    no_stack: bool,
    /// Disable function/vtable pointer protection
    #[arg(long)]
    no_fptr: bool,
    /// Protect leaf functions with frame MACs instead of the register path
    #[arg(long)]
    no_leaf_opt: bool,
    /// Let the heap reuse freed addresses
    #[arg(long)]
    reuse_heap: bool,
    /// Abort the run after this many weighted steps
    #[arg(long, default_value_t = 10_000_000)]
    step_limit: u64,
    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CrashArg {
    Trap,
    Zero,
}

impl CommonOpts {
    fn pass_config(&self) -> PassConfig {
        PassConfig {
            protect_stack: !self.no_stack,
            protect_pointers: !self.no_fptr,
            leaf_opt: !self.no_leaf_opt,
            type_sig_classes: self.type_sig,
            entropy_bits: self.entropy,
        }
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            step_limit: self.step_limit,
            table_mode: self.mac_table,
            entropy_bits: self.entropy,
            reuse_heap: self.reuse_heap,
            crash_mode: match self.crash_mode {
                CrashArg::Trap => CrashMode::Trap,
                CrashArg::Zero => CrashMode::Zero,
            },
            record_snapshots: false,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse, typecheck, instrument and execute a program
    Run {
        file: PathBuf,
        /// Attack script to fire at the program's attack points
        #[arg(long)]
        attack: Option<PathBuf>,
        /// Skip instrumentation entirely
        #[arg(long)]
        baseline: bool,
        /// Print the instrumented IR before running
        #[arg(long)]
        emit_ir: bool,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Print the instrumented IR
    EmitIr {
        file: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Report code liable to break automatic MACing or mint MACs
    Analyze {
        file: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run the built-in attack scenarios plus any user suite
    Scenarios {
        /// Directory of user scenario manifests (*.toml)
        suite: Option<PathBuf>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Same-address replay probability over many seeds
    ReplayMc {
        program: PathBuf,
        script: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: u32,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Step and MAC-op accounting, baseline vs instrumented
    Bench {
        corpus: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            file,
            attack,
            baseline,
            emit_ir,
            opts,
        } => cmd_run(&file, attack.as_deref(), baseline, emit_ir, &opts),
        Command::EmitIr { file, opts } => cmd_emit_ir(&file, &opts),
        Command::Analyze { file, opts } => cmd_analyze(&file, &opts),
        Command::Scenarios { suite, opts } => cmd_scenarios(suite.as_deref(), &opts),
        Command::ReplayMc {
            program,
            script,
            trials,
            opts,
        } => cmd_replay_mc(&program, &script, trials, &opts),
        Command::Bench { corpus, opts } => cmd_bench(&corpus, &opts),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

type CmdResult = Result<u8, String>;

fn load_module(file: &Path) -> Result<Module, String> {
    let text = std::fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
    let module = parse_module(&text).map_err(|e| format!("{}:{e}", file.display()))?;
    let diags = typecheck(&module);
    if !diags.is_empty() {
        let rendered = diags
            .iter()
            .map(|d| format!("{}: {d}", file.display()))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(rendered);
    }
    Ok(module)
}

fn load_script(file: &Path) -> Result<AttackScript, String> {
    let text = std::fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
    parse_script(&text).map_err(|e| format!("{}: {e}", file.display()))
}

fn cmd_run(
    file: &Path,
    attack: Option<&Path>,
    baseline: bool,
    emit_ir: bool,
    opts: &CommonOpts,
) -> CmdResult {
    let module = load_module(file)?;
    let module = if baseline {
        module
    } else {
        instrument_module(&module, &opts.pass_config())
    };
    if emit_ir {
        print!("{}", print_module(&module));
    }
    let script = attack.map(load_script).transpose()?;
    let result = run(&module, script.as_ref(), &opts.run_config());
    if opts.format == Format::JsonLines {
        println!("{}", serde_json::to_string(&result).unwrap());
    } else {
        for v in &result.output {
            println!("{v}");
        }
    }
    Ok(exit_for(&result))
}

fn exit_for(result: &RunResult) -> u8 {
    match &result.outcome {
        Outcome::Halted { exit } => (*exit & 0xff) as u8,
        Outcome::Trapped(TrapKind::CcfiViolation {
            function,
            instr,
            kind,
        }) => {
            eprintln!(
                "CCFI violation at {function}[{instr}]: {} check failed",
                kind.name()
            );
            EXIT_VIOLATION
        }
        Outcome::Trapped(t) => {
            eprintln!("trap: {t:?}");
            EXIT_TRAP
        }
    }
}

fn cmd_emit_ir(file: &Path, opts: &CommonOpts) -> CmdResult {
    let module = load_module(file)?;
    let instrumented = instrument_module(&module, &opts.pass_config());
    print!("{}", print_module(&instrumented));
    Ok(EXIT_OK)
}

fn cmd_analyze(file: &Path, opts: &CommonOpts) -> CmdResult {
    let module = load_module(file)?;
    let hazards = analyze_module(&module);
    let mut warnings = 0;
    for h in &hazards {
        if opts.format == Format::JsonLines {
            println!("{}", serde_json::to_string(h).unwrap());
        } else {
            println!("{h}");
            if let Ok(s) = suggest_fix(h) {
                println!("    fix: {s}");
            }
        }
        if h.severity == Severity::Warning {
            warnings += 1;
        }
    }
    if opts.format == Format::Text {
        println!("{} hazard(s), {warnings} at warning severity", hazards.len());
    }
    Ok(if warnings > 0 { EXIT_HAZARDS } else { EXIT_OK })
}

/// User scenario manifest; paths are relative to the manifest file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    #[serde(default)]
    description: String,
    program: PathBuf,
    script: Option<PathBuf>,
    expected: ManifestExpected,
    #[serde(default = "one")]
    trials: u32,
    #[serde(default)]
    pass: ManifestPass,
    #[serde(default)]
    run: ManifestRun,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum ManifestExpected {
    Detected,
    Bypassed,
    Unaffected,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ManifestPass {
    protect_stack: Option<bool>,
    protect_pointers: Option<bool>,
    leaf_opt: Option<bool>,
    type_sig_classes: Option<bool>,
    entropy_bits: Option<u32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ManifestRun {
    seed: Option<u64>,
    entropy_bits: Option<u32>,
    reuse_heap: Option<bool>,
    mac_table: Option<String>,
    step_limit: Option<u64>,
}

fn scenario_from_manifest(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let program = std::fs::read_to_string(dir.join(&m.program))
        .map_err(|e| format!("{}: program: {e}", path.display()))?;
    let script = m
        .script
        .as_ref()
        .map(|s| std::fs::read_to_string(dir.join(s)))
        .transpose()
        .map_err(|e| format!("{}: script: {e}", path.display()))?;

    let mut pass = PassConfig {
        entropy_bits: 0,
        ..PassConfig::default()
    };
    if let Some(v) = m.pass.protect_stack {
        pass.protect_stack = v;
    }
    if let Some(v) = m.pass.protect_pointers {
        pass.protect_pointers = v;
    }
    if let Some(v) = m.pass.leaf_opt {
        pass.leaf_opt = v;
    }
    if let Some(v) = m.pass.type_sig_classes {
        pass.type_sig_classes = v;
    }
    if let Some(v) = m.pass.entropy_bits {
        pass.entropy_bits = v;
    }

    let mut runc = RunConfig {
        entropy_bits: pass.entropy_bits,
        ..RunConfig::default()
    };
    if let Some(v) = m.run.seed {
        runc.seed = v;
    }
    if let Some(v) = m.run.entropy_bits {
        runc.entropy_bits = v;
    }
    if let Some(v) = m.run.reuse_heap {
        runc.reuse_heap = v;
    }
    if let Some(v) = m.run.step_limit {
        runc.step_limit = v;
    }
    if let Some(v) = &m.run.mac_table {
        runc.table_mode = TableMode::parse(v)?;
    }

    Ok(Scenario {
        name: m.name,
        description: m.description,
        program,
        script,
        expected: match m.expected {
            ManifestExpected::Detected => Expected::Detected,
            ManifestExpected::Bypassed => Expected::Bypassed,
            ManifestExpected::Unaffected => Expected::Unaffected,
        },
        trials: m.trials,
        pass,
        run: runc,
    })
}

fn cmd_scenarios(suite: Option<&Path>, opts: &CommonOpts) -> CmdResult {
    let mut scenarios = builtin_scenarios();
    if let Some(dir) = suite {
        let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| format!("{}: {e}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        manifests.retain(|p| p.extension().is_some_and(|e| e == "toml"));
        manifests.sort();
        if manifests.is_empty() {
            return Err(format!("{}: no scenario manifests found", dir.display()));
        }
        for m in manifests {
            scenarios.push(scenario_from_manifest(&m)?);
        }
    }

    let mut all_pass = true;
    let mut reports: Vec<ScenarioReport> = Vec::new();
    for s in &scenarios {
        let report = run_scenario(s).map_err(|e| format!("{}: {e}", s.name))?;
        all_pass &= report.pass;
        reports.push(report);
    }
    if opts.format == Format::JsonLines {
        for r in &reports {
            println!("{}", serde_json::to_string(r).unwrap());
        }
    } else {
        println!("{:<28} {:<12} {:<12} result", "scenario", "expected", "actual");
        for r in &reports {
            println!(
                "{:<28} {:<12} {:<12} {}",
                r.name,
                r.expected.to_string(),
                r.actual.to_string(),
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        println!(
            "{} scenario(s), {} passed",
            reports.len(),
            reports.iter().filter(|r| r.pass).count()
        );
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_MISMATCH })
}

#[derive(Serialize)]
struct ReplayRecord {
    trials: u32,
    hits: u32,
    frequency: f64,
    entropy_bits: u32,
    base_seed: u64,
}

fn cmd_replay_mc(program: &Path, script: &Path, trials: u32, opts: &CommonOpts) -> CmdResult {
    let prog =
        std::fs::read_to_string(program).map_err(|e| format!("{}: {e}", program.display()))?;
    let atk = std::fs::read_to_string(script).map_err(|e| format!("{}: {e}", script.display()))?;
    let (hits, trials, freq) = replay_frequency(&prog, &atk, trials, opts.entropy, opts.seed)
        .map_err(|e| e.to_string())?;
    let record = ReplayRecord {
        trials,
        hits,
        frequency: freq,
        entropy_bits: opts.entropy,
        base_seed: opts.seed,
    };
    if opts.format == Format::JsonLines {
        println!("{}", serde_json::to_string(&record).unwrap());
    } else {
        println!(
            "replay aligned and bypassed in {hits}/{trials} trials: frequency {freq:.6} (entropy {} bits)",
            opts.entropy
        );
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BenchRecord {
    program: String,
    baseline_steps: u64,
    instrumented_steps: u64,
    delta_steps: u64,
    calls: u64,
    mac_ops: u64,
    overhead: f64,
}

fn cmd_bench(corpus: &Path, opts: &CommonOpts) -> CmdResult {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus)
        .map_err(|e| format!("{}: {e}", corpus.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ir"));
    files.sort();
    if files.is_empty() {
        return Err(format!("{}: no .ir programs found", corpus.display()));
    }

    // overhead accounting runs without randomization so deltas are exact
    let runc = RunConfig {
        seed: opts.seed,
        entropy_bits: 0,
        table_mode: opts.mac_table,
        step_limit: opts.step_limit,
        ..RunConfig::default()
    };
    let passc = PassConfig {
        entropy_bits: 0,
        ..opts.pass_config()
    };

    let mut records = Vec::new();
    for path in &files {
        let module = load_module(path)?;
        let base = run(&module, None, &runc);
        let instrumented = instrument_module(&module, &passc);
        let inst = run(&instrumented, None, &runc);
        for (label, r) in [("baseline", &base), ("instrumented", &inst)] {
            if !matches!(r.outcome, Outcome::Halted { .. }) {
                return Err(format!(
                    "{}: {label} run did not complete: {:?}",
                    path.display(),
                    r.outcome
                ));
            }
        }
        if base.output != inst.output {
            return Err(format!("{}: instrumented output diverged", path.display()));
        }
        records.push(BenchRecord {
            program: path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            baseline_steps: base.counters.steps,
            instrumented_steps: inst.counters.steps,
            delta_steps: inst.counters.steps - base.counters.steps,
            calls: inst.counters.calls,
            mac_ops: inst.counters.mac_ops,
            overhead: inst.counters.steps as f64 / base.counters.steps as f64,
        });
    }

    // across the empty-call fixtures the per-program step delta must be one
    // constant: instrumentation cost per call does not depend on the callee
    let empty_deltas: Vec<u64> = records
        .iter()
        .filter(|r| r.program.starts_with("empty"))
        .map(|r| r.delta_steps)
        .collect();
    let constant_overhead = empty_deltas.windows(2).all(|w| w[0] == w[1]);

    if opts.format == Format::JsonLines {
        for r in &records {
            println!("{}", serde_json::to_string(r).unwrap());
        }
    } else {
        println!(
            "{:<16} {:>10} {:>12} {:>8} {:>8} {:>9}",
            "program", "baseline", "instrumented", "calls", "mac_ops", "overhead"
        );
        for r in &records {
            println!(
                "{:<16} {:>10} {:>12} {:>8} {:>8} {:>8.2}x",
                r.program, r.baseline_steps, r.instrumented_steps, r.calls, r.mac_ops, r.overhead
            );
        }
        if !empty_deltas.is_empty() {
            println!(
                "empty-call fixtures: delta {} across {} programs ({})",
                if constant_overhead {
                    "constant"
                } else {
                    "NOT constant"
                },
                empty_deltas.len(),
                empty_deltas
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
    }
    Ok(if constant_overhead { EXIT_OK } else { EXIT_MISMATCH })
}
