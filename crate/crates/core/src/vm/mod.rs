//! Deterministic interpreter with an explicit attacker model.
//!
//! Machine model:
//!
//! - Code occupies a read-only region; function `f` sits at
//!   `CODE_BASE + f * FUNC_STRIDE` and a code address decodes back to
//!   (function, instruction index). Return addresses and function pointer
//!   values are code addresses.
//! - The stack grows down from `STACK_TOP`. A call pushes the return
//!   address, then the caller's frame pointer; the callee's frame pointer
//!   is the address of the saved-fp slot, so `[fp]` is the old frame
//!   pointer and `[fp+8]` the return address. Below that sit the optional
//!   16-byte MAC slot (`[fp-16]`), the locals, and any random frame pad.
//! - Temps are registers held outside the address space; the attacker can
//!   touch neither them nor the reserved register file (MAC key, leaf
//!   slot, randomness source).
//! - The attacker reads any mapped memory and writes any writable memory,
//!   at the program points named by `attack_point` instructions.
//!
//! Step accounting is weighted: every instruction costs one step, and each
//! MAC computation (macptr, checkptr, frame protection) adds
//! `MAC_STEP_COST` more, standing in for the multi-instruction cipher work
//! a real prologue would run. Leaf save/check are plain register moves and
//! cost one step.

pub mod attack;
pub mod memory;

use crate::alloc::{frame_pad, AllocError, HeapAllocator};
use crate::ir::{FuncId, Instr, Module, Operand, TempId};
use crate::mac::{
    encode_class, generate_key, mac_value, sig_hash15, verify, ClassKind, MacKey, ADDRESS_MASK,
};
use crate::prng::ReservedPrng;
use crate::table::{MacTable, TableMode};
use attack::{Action, AddrExpr, AttackLogEntry, AttackScript, ScriptEnv, ValueExpr};
use memory::Memory;
use serde::Serialize;
use std::collections::HashMap;

pub const CODE_BASE: u64 = 0x40_0000;
pub const FUNC_STRIDE: u64 = 0x1000;
pub const RO_BASE: u64 = 0x1000_0000;
pub const GLOBAL_BASE: u64 = 0x2000_0000;
pub const HEAP_BASE: u64 = 0x4000_0000;
pub const HEAP_LEN: u64 = 1 << 26;
pub const STACK_TOP: u64 = 0x6000_0000;
pub const STACK_LEN: u64 = 1 << 16;
pub const MAC_TABLE_BASE: u64 = 0x8000_0000;

/// Return-address value meaning "return to the VM, not to code".
pub const HALT_SENTINEL: u64 = 0xe0f;

/// Extra steps charged per MAC computation.
pub const MAC_STEP_COST: u64 = 10;

pub const DEFAULT_SEED: u64 = 0xccf1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashMode {
    /// Diagnostic trap on a failed frame check.
    Trap,
    /// Zero the saved return address and frame pointer and keep going; the
    /// subsequent return then crashes without a control transfer.
    Zero,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub step_limit: u64,
    pub table_mode: TableMode,
    pub entropy_bits: u32,
    pub reuse_heap: bool,
    pub crash_mode: CrashMode,
    /// Record a full memory snapshot at every attack point (for key-secrecy
    /// scans in tests).
    pub record_snapshots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            step_limit: 10_000_000,
            table_mode: TableMode::Exact,
            entropy_bits: 4,
            reuse_heap: false,
            crash_mode: CrashMode::Trap,
            record_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "trap", rename_all = "snake_case")]
pub enum TrapKind {
    CcfiViolation {
        function: String,
        instr: usize,
        kind: ClassKind,
    },
    MemoryFault {
        detail: String,
    },
    TypeFault {
        detail: String,
    },
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Halted { exit: i64 },
    Trapped(TrapKind),
}

impl Outcome {
    pub fn is_ccfi_violation(&self) -> bool {
        matches!(self, Outcome::Trapped(TrapKind::CcfiViolation { .. }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub steps: u64,
    pub calls: u64,
    pub mac_ops: u64,
    pub table_collisions: u64,
}

pub type MemorySnapshot = Vec<(u64, Vec<u8>)>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub outcome: Outcome,
    pub output: Vec<i64>,
    pub counters: Counters,
    pub attack_log: Vec<AttackLogEntry>,
    #[serde(skip)]
    pub snapshots: Vec<MemorySnapshot>,
}

pub fn func_addr(f: FuncId) -> u64 {
    CODE_BASE + f as u64 * FUNC_STRIDE
}

struct Frame {
    func: FuncId,
    temps: Vec<u64>,
    ret_dst: Option<TempId>,
    expected_ret: u64,
}

enum Flow {
    Continue,
    FunctionDone(i64),
    Halt(i64),
}

type Step = Result<Flow, TrapKind>;

struct Vm<'m> {
    module: &'m Module,
    config: RunConfig,
    mem: Memory,
    key: MacKey,
    prng: ReservedPrng,
    leaf_slot: (u64, u64),
    table: MacTable,
    heap: HeapAllocator,
    frames: Vec<Frame>,
    pc: (FuncId, usize),
    sp: u64,
    fp: u64,
    counters: Counters,
    output: Vec<i64>,
    attack_log: Vec<AttackLogEntry>,
    snapshots: Vec<MemorySnapshot>,
    occurrences: HashMap<String, u64>,
    env: ScriptEnv,
    globals_addr: Vec<u64>,
    tables_addr: Vec<u64>,
}

/// Execute a module under the given attack script and configuration.
/// `(module, script, seed)` fully determine the result.
pub fn run(module: &Module, script: Option<&AttackScript>, config: &RunConfig) -> RunResult {
    let mut prng = ReservedPrng::from_seed(config.seed);
    let key = generate_key(&mut prng);
    let table = MacTable::new(config.table_mode, MAC_TABLE_BASE);
    let heap = HeapAllocator::new(HEAP_BASE, HEAP_LEN, config.entropy_bits, config.reuse_heap);

    let mut vm = Vm {
        module,
        config: config.clone(),
        mem: Memory::new(),
        key,
        prng,
        leaf_slot: (0, 0),
        table,
        heap,
        frames: Vec::new(),
        pc: (0, 0),
        sp: STACK_TOP,
        fp: 0,
        counters: Counters::default(),
        output: Vec::new(),
        attack_log: Vec::new(),
        snapshots: Vec::new(),
        occurrences: HashMap::new(),
        env: ScriptEnv::default(),
        globals_addr: Vec::new(),
        tables_addr: Vec::new(),
    };
    vm.load();

    let outcome = vm.execute(script);
    vm.counters.table_collisions = vm.table.stats.collisions;

    RunResult {
        outcome,
        output: vm.output,
        counters: vm.counters,
        attack_log: vm.attack_log,
        snapshots: vm.snapshots,
    }
}

impl<'m> Vm<'m> {
    fn load(&mut self) {
        let m = self.module;
        for f in &m.functions {
            assert!(
                (f.body.len() as u64) < FUNC_STRIDE,
                "function `{}` exceeds the code stride",
                f.name
            );
        }
        self.mem.add_region(
            CODE_BASE,
            (m.functions.len().max(1) as u64) * FUNC_STRIDE,
            false,
            "code",
        );

        // read-only area: method tables, then read-only globals
        let mut ro_cursor = RO_BASE;
        for t in &m.tables {
            self.tables_addr.push(ro_cursor);
            ro_cursor += (t.entries.len() as u64) * 8;
        }
        self.globals_addr = vec![0; m.globals.len()];
        let mut rw_cursor = GLOBAL_BASE;
        for (i, g) in m.globals.iter().enumerate() {
            let size = m.size_of(&g.ty);
            if g.readonly {
                self.globals_addr[i] = ro_cursor;
                ro_cursor += size;
            } else {
                self.globals_addr[i] = rw_cursor;
                rw_cursor += size;
            }
        }
        if ro_cursor > RO_BASE {
            self.mem.add_region(RO_BASE, ro_cursor - RO_BASE, false, "rodata");
        }
        if rw_cursor > GLOBAL_BASE {
            self.mem
                .add_region(GLOBAL_BASE, rw_cursor - GLOBAL_BASE, true, "globals");
        }
        self.mem
            .add_region(STACK_TOP - STACK_LEN, STACK_LEN, true, "stack");
        self.mem.add_region(HEAP_BASE, 0, true, "heap");
        self.mem
            .add_region(MAC_TABLE_BASE, self.table.region_len(), true, "mac-table");

        // install method tables and global initializers
        for (ti, t) in m.tables.iter().enumerate() {
            for (ei, f) in t.entries.iter().enumerate() {
                self.mem.poke(
                    self.tables_addr[ti] + ei as u64 * 8,
                    &func_addr(*f).to_le_bytes(),
                );
            }
        }
        for (gi, g) in m.globals.iter().enumerate() {
            let addr = self.globals_addr[gi];
            self.install_init(addr, &g.ty, &g.init);
        }
    }

    fn install_init(&mut self, addr: u64, ty: &crate::ir::TypeDesc, init: &crate::ir::GlobalInit) {
        use crate::ir::{GlobalInit, TypeDesc};
        match ty {
            TypeDesc::Record(name) => {
                let rec = self.module.record_by_name(name).expect("known record").clone();
                let mut off = 0;
                if let Some(vt) = rec.vtable {
                    self.mem
                        .poke(addr, &self.tables_addr[vt].to_le_bytes());
                    off = 8;
                }
                let items: &[GlobalInit] = match init {
                    GlobalInit::Record(items) => items,
                    GlobalInit::Zero => &[],
                    other => panic!("record global initialized with {other:?}"),
                };
                for (i, (_, fty)) in rec.fields.iter().enumerate() {
                    let item = items.get(i).unwrap_or(&GlobalInit::Zero);
                    self.install_init(addr + off, fty, item);
                    off += self.module.size_of(fty);
                }
            }
            _ => {
                let value = match init {
                    GlobalInit::Zero => 0,
                    GlobalInit::Int(n) => *n as u64,
                    GlobalInit::Func(f) => func_addr(*f),
                    GlobalInit::Table(t) => self.tables_addr[*t],
                    GlobalInit::Record(_) => panic!("record initializer on scalar global"),
                };
                self.mem.poke(addr, &value.to_le_bytes());
            }
        }
    }

    fn execute(&mut self, script: Option<&AttackScript>) -> Outcome {
        let main = match self.module.main_id() {
            Some(id) => id,
            None => {
                return Outcome::Trapped(TrapKind::TypeFault {
                    detail: "module has no `main` function".into(),
                })
            }
        };
        if let Some((init, _)) = self.module.function("__ccfi_init") {
            match self.run_function(init, script) {
                Ok(_) => {}
                Err(outcome) => return outcome,
            }
        }
        match self.run_function(main, script) {
            Ok(exit) => Outcome::Halted { exit },
            Err(outcome) => outcome,
        }
    }

    fn run_function(
        &mut self,
        f: FuncId,
        script: Option<&AttackScript>,
    ) -> Result<i64, Outcome> {
        if let Err(t) = self.enter_function(f, &[], HALT_SENTINEL, None) {
            return Err(Outcome::Trapped(t));
        }
        loop {
            match self.step(script) {
                Ok(Flow::Continue) => {}
                Ok(Flow::FunctionDone(v)) => return Ok(v),
                Ok(Flow::Halt(code)) => return Err(Outcome::Halted { exit: code }),
                Err(t) => return Err(Outcome::Trapped(t)),
            }
        }
    }

    fn mem_trap(&self, e: memory::MemFault) -> TrapKind {
        TrapKind::MemoryFault {
            detail: e.to_string(),
        }
    }

    fn frame(&self) -> &Frame {
        self.frames.last().expect("at least one live frame")
    }

    fn mac_reserve(&self, f: FuncId) -> u64 {
        if self.module.functions[f].has_mac_slot {
            16
        } else {
            0
        }
    }

    fn local_addr(&self, l: usize) -> u64 {
        self.fp - self.mac_reserve(self.frame().func) - 8 * (l as u64 + 1)
    }

    fn value(&self, op: &Operand) -> u64 {
        match op {
            Operand::Const(n) => *n as u64,
            Operand::Temp(t) => self.frame().temps.get(*t).copied().unwrap_or(0),
            Operand::AddrOfLocal(l) => self.local_addr(*l),
            Operand::AddrOfGlobal(g) => self.globals_addr[*g],
        }
    }

    fn set_temp(&mut self, t: TempId, v: u64) {
        let temps = &mut self.frames.last_mut().expect("live frame").temps;
        if t >= temps.len() {
            temps.resize(t + 1, 0);
        }
        temps[t] = v;
    }

    fn push_u64(&mut self, v: u64) -> Result<(), TrapKind> {
        self.sp -= 8;
        self.check_stack()?;
        self.mem.write_u64(self.sp, v).map_err(|e| self.mem_trap(e))
    }

    fn check_stack(&self) -> Result<(), TrapKind> {
        if self.sp < STACK_TOP - STACK_LEN {
            Err(TrapKind::MemoryFault {
                detail: "stack overflow".into(),
            })
        } else {
            Ok(())
        }
    }

    fn enter_function(
        &mut self,
        f: FuncId,
        args: &[u64],
        retaddr: u64,
        ret_dst: Option<TempId>,
    ) -> Result<(), TrapKind> {
        self.push_u64(retaddr)?;
        self.push_u64(self.fp)?;
        self.fp = self.sp;
        let func = &self.module.functions[f];
        self.sp -= self.mac_reserve(f) + 8 * func.locals.len() as u64;
        self.check_stack()?;
        let mut temps = vec![0u64; func.temp_names.len()];
        for (i, a) in args.iter().enumerate() {
            if i < temps.len() {
                temps[i] = *a;
            }
        }
        self.frames.push(Frame {
            func: f,
            temps,
            ret_dst,
            expected_ret: retaddr,
        });
        self.pc = (f, 0);
        Ok(())
    }

    fn decode_code_addr(&self, addr: u64) -> Option<(FuncId, usize)> {
        if addr < CODE_BASE {
            return None;
        }
        let off = addr - CODE_BASE;
        let f = (off / FUNC_STRIDE) as usize;
        let i = (off % FUNC_STRIDE) as usize;
        if f < self.module.functions.len() && i <= self.module.functions[f].body.len() {
            Some((f, i))
        } else {
            None
        }
    }

    fn class_for(
        &self,
        kind: ClassKind,
        payload: u64,
        sig: &Option<crate::ir::Signature>,
    ) -> crate::mac::ClassTag {
        let hash = sig.as_ref().map(|s| sig_hash15(&s.canonical()));
        encode_class(kind, payload & ADDRESS_MASK, hash).expect("masked payload always fits")
    }

    fn call_common(
        &mut self,
        f: FuncId,
        dst: Option<TempId>,
        args: &[Operand],
    ) -> Result<(), TrapKind> {
        let argv: Vec<u64> = args.iter().map(|a| self.value(a)).collect();
        let retaddr = func_addr(self.pc.0) + self.pc.1 as u64 + 1;
        self.counters.calls += 1;
        self.enter_function(f, &argv, retaddr, dst)
    }

    fn indirect_call(
        &mut self,
        target: u64,
        dst: Option<TempId>,
        args: &[Operand],
        kind: ClassKind,
    ) -> Result<(), TrapKind> {
        if target == 0 {
            return Err(self.violation(kind));
        }
        match self.decode_code_addr(target) {
            Some((f, 0)) => self.call_common(f, dst, args),
            _ => Err(TrapKind::MemoryFault {
                detail: format!("indirect call to invalid target {target:#x}"),
            }),
        }
    }

    fn violation(&self, kind: ClassKind) -> TrapKind {
        TrapKind::CcfiViolation {
            function: self.module.functions[self.pc.0].name.clone(),
            instr: self.pc.1,
            kind,
        }
    }

    /// Frame-check failure: trap, or in zero mode wipe the saved return
    /// address and frame pointer so the upcoming return cannot transfer
    /// control anywhere.
    fn frame_check_failed(&mut self) -> Result<(), TrapKind> {
        match self.config.crash_mode {
            CrashMode::Trap => Err(self.violation(ClassKind::ReturnAddress)),
            CrashMode::Zero => {
                self.mem
                    .write_u64(self.fp + 8, 0)
                    .map_err(|e| self.mem_trap(e))?;
                self.mem.write_u64(self.fp, 0).map_err(|e| self.mem_trap(e))?;
                Ok(())
            }
        }
    }

    fn step(&mut self, script: Option<&AttackScript>) -> Step {
        let (fid, idx) = self.pc;
        let body = &self.module.functions[fid].body;
        if idx >= body.len() {
            return Err(TrapKind::TypeFault {
                detail: format!(
                    "control fell off the end of `{}`",
                    self.module.functions[fid].name
                ),
            });
        }
        let instr = &body[idx];

        let cost = match instr {
            Instr::MacPtr { .. }
            | Instr::CheckPtr { .. }
            | Instr::FrameMac
            | Instr::FrameCheck => 1 + MAC_STEP_COST,
            _ => 1,
        };
        self.counters.steps += cost;
        if self.counters.steps > self.config.step_limit {
            return Err(TrapKind::StepLimit);
        }

        let mut next = idx + 1;
        match instr.clone() {
            Instr::Const { dst, value } => self.set_temp(dst, value as u64),
            Instr::FuncRef { dst, func } => self.set_temp(dst, func_addr(func)),
            Instr::TableRef { dst, table } => self.set_temp(dst, self.tables_addr[table]),
            Instr::FrameAddr { dst } => self.set_temp(dst, self.fp),
            Instr::Bin { dst, op, lhs, rhs } => {
                let a = self.value(&lhs);
                let b = self.value(&rhs);
                let v = self.binop(op, a, b)?;
                self.set_temp(dst, v);
            }
            Instr::Load { dst, addr, .. } => {
                let a = self.value(&addr);
                let v = self.mem.read_u64(a).map_err(|e| self.mem_trap(e))?;
                self.set_temp(dst, v);
            }
            Instr::Store { addr, value, .. } => {
                let a = self.value(&addr);
                let v = self.value(&value);
                self.mem.write_u64(a, v).map_err(|e| self.mem_trap(e))?;
            }
            Instr::Cast { dst, value, .. } => {
                let v = self.value(&value);
                self.set_temp(dst, v);
            }
            Instr::Alloca { dst, bytes } => {
                self.sp -= bytes.div_ceil(8) * 8;
                self.check_stack()?;
                self.set_temp(dst, self.sp);
            }
            Instr::HeapAlloc { dst, bytes } => {
                let size = self.value(&bytes);
                let addr = self.heap_alloc(size)?;
                self.set_temp(dst, addr);
            }
            Instr::HeapFree { addr } => {
                let a = self.value(&addr);
                self.heap.free(a).map_err(|e| TrapKind::MemoryFault {
                    detail: e.to_string(),
                })?;
            }
            Instr::Call { dst, func, args } => {
                self.call_common(func, dst, &args)?;
                return Ok(Flow::Continue);
            }
            Instr::ICall { dst, target, args } => {
                let t = self.value(&target);
                self.indirect_call(t, dst, &args, ClassKind::FunctionPointer)?;
                return Ok(Flow::Continue);
            }
            Instr::MCall { dst, obj, index, args, .. } => {
                let o = self.value(&obj);
                let tp = self.mem.read_u64(o).map_err(|e| self.mem_trap(e))?;
                let i = self.value(&index);
                let entry = self
                    .mem
                    .read_u64(tp.wrapping_add(8 * i))
                    .map_err(|e| self.mem_trap(e))?;
                self.indirect_call(entry, dst, &args, ClassKind::VTablePointer)?;
                return Ok(Flow::Continue);
            }
            Instr::TCall { dst, table_ptr, index, args, .. } => {
                let tp = self.value(&table_ptr);
                if tp == 0 {
                    return Err(self.violation(ClassKind::VTablePointer));
                }
                let i = self.value(&index);
                let entry = self
                    .mem
                    .read_u64(tp.wrapping_add(8 * i))
                    .map_err(|e| self.mem_trap(e))?;
                self.indirect_call(entry, dst, &args, ClassKind::VTablePointer)?;
                return Ok(Flow::Continue);
            }
            Instr::TableGet { dst, table, index } => {
                let i = self.value(&index);
                let entries = &self.module.tables[table].entries;
                if i as usize >= entries.len() {
                    return Err(TrapKind::MemoryFault {
                        detail: format!(
                            "index {i} out of range for table `{}`",
                            self.module.tables[table].name
                        ),
                    });
                }
                let addr = self.tables_addr[table] + 8 * i;
                let v = self.mem.read_u64(addr).map_err(|e| self.mem_trap(e))?;
                self.set_temp(dst, v);
            }
            Instr::NewObj { dst, record } => {
                let rec = &self.module.records[record];
                let ty = crate::ir::TypeDesc::Record(rec.name.clone());
                let size = self.module.size_of(&ty);
                let vt = rec.vtable.expect("typecheck requires a vtable");
                let addr = self.heap_alloc(size)?;
                // fresh object: zero the body, install the table pointer
                self.mem
                    .write(addr, &vec![0u8; size as usize])
                    .map_err(|e| self.mem_trap(e))?;
                self.mem
                    .write_u64(addr, self.tables_addr[vt])
                    .map_err(|e| self.mem_trap(e))?;
                self.set_temp(dst, addr);
            }
            Instr::CopyRec { record, dst, src } => {
                let name = self.module.records[record].name.clone();
                let len = self.module.size_of(&crate::ir::TypeDesc::Record(name));
                let s = self.value(&src);
                let d = self.value(&dst);
                let bytes = self.mem.read(s, len).map_err(|e| self.mem_trap(e))?;
                self.mem.write(d, &bytes).map_err(|e| self.mem_trap(e))?;
            }
            Instr::RawCopy { dst, src, len } => {
                let n = self.value(&len);
                let s = self.value(&src);
                let d = self.value(&dst);
                let bytes = self.mem.read(s, n).map_err(|e| self.mem_trap(e))?;
                self.mem.write(d, &bytes).map_err(|e| self.mem_trap(e))?;
            }
            Instr::CcfiRawCopy { dst, src, len, elem } => {
                let n = self.value(&len);
                let s = self.value(&src);
                let d = self.value(&dst);
                let bytes = self.mem.read(s, n).map_err(|e| self.mem_trap(e))?;
                self.mem.write(d, &bytes).map_err(|e| self.mem_trap(e))?;
                self.ccfi_recopy(s, d, n, &elem)?;
            }
            Instr::MacPtr { value, addr, kind, sig } => {
                let v = self.value(&value);
                let a = self.value(&addr);
                let class = self.class_for(kind, a, &sig);
                let mac = mac_value(&self.key, v, &class);
                self.counters.mac_ops += 1;
                self.table
                    .store(&mut self.mem, a, mac)
                    .map_err(|_| TrapKind::MemoryFault {
                        detail: "mac table exhausted".into(),
                    })?;
            }
            Instr::CheckPtr { dst, value, addr, kind, sig } => {
                let v = self.value(&value);
                let a = self.value(&addr);
                let class = self.class_for(kind, a, &sig);
                self.counters.mac_ops += 1;
                let checked = match self.table.load(&self.mem, a) {
                    Some(stored) if verify(&self.key, v, &class, &stored) => v,
                    _ => 0,
                };
                self.set_temp(dst, checked);
            }
            Instr::AssertNz { value, kind } => {
                if self.value(&value) == 0 {
                    return Err(self.violation(kind));
                }
            }
            Instr::FrameMac => {
                let ra = self.mem.read_u64(self.fp + 8).map_err(|e| self.mem_trap(e))?;
                let oldfp = self.mem.read_u64(self.fp).map_err(|e| self.mem_trap(e))?;
                let class = self.class_for(ClassKind::ReturnAddress, oldfp, &None);
                let mac = mac_value(&self.key, ra, &class);
                self.counters.mac_ops += 1;
                self.mem
                    .write(self.fp - 16, &mac.0)
                    .map_err(|e| self.mem_trap(e))?;
            }
            Instr::FrameCheck => {
                let ra = self.mem.read_u64(self.fp + 8).map_err(|e| self.mem_trap(e))?;
                let oldfp = self.mem.read_u64(self.fp).map_err(|e| self.mem_trap(e))?;
                let stored = self.mem.read_16(self.fp - 16).map_err(|e| self.mem_trap(e))?;
                let class = self.class_for(ClassKind::ReturnAddress, oldfp, &None);
                self.counters.mac_ops += 1;
                if !verify(&self.key, ra, &class, &crate::mac::MacValue(stored)) {
                    self.frame_check_failed()?;
                }
            }
            Instr::FramePad => {
                let pad = frame_pad(&mut self.prng, self.config.entropy_bits);
                self.sp -= pad;
                self.check_stack()?;
            }
            Instr::LeafSave => {
                let ra = self.mem.read_u64(self.fp + 8).map_err(|e| self.mem_trap(e))?;
                let oldfp = self.mem.read_u64(self.fp).map_err(|e| self.mem_trap(e))?;
                self.leaf_slot = (ra, oldfp);
            }
            Instr::LeafCheck => {
                let ra = self.mem.read_u64(self.fp + 8).map_err(|e| self.mem_trap(e))?;
                let oldfp = self.mem.read_u64(self.fp).map_err(|e| self.mem_trap(e))?;
                if (ra, oldfp) != self.leaf_slot {
                    self.frame_check_failed()?;
                }
            }
            Instr::Br { cond, then_to, else_to } => {
                next = if self.value(&cond) != 0 { then_to } else { else_to };
            }
            Instr::Jmp { to } => next = to,
            Instr::AttackPoint { label } => {
                let occ = self.occurrences.entry(label.clone()).or_insert(0);
                *occ += 1;
                let occ = *occ;
                if self.config.record_snapshots {
                    self.snapshots.push(self.mem.snapshot());
                }
                if let Some(script) = script {
                    let matching: Vec<Action> = script
                        .entries
                        .iter()
                        .filter(|e| e.label == label && e.occurrence.is_none_or(|k| k == occ))
                        .map(|e| e.action.clone())
                        .collect();
                    for action in matching {
                        self.run_action(&action);
                    }
                }
            }
            Instr::Print { value } => {
                let v = self.value(&value);
                self.output.push(v as i64);
            }
            Instr::Ret { value } => {
                let retval = value.map(|v| self.value(&v)).unwrap_or(0) as i64;
                return self.do_ret(retval);
            }
            Instr::Halt { code } => {
                let c = self.value(&code) as i64;
                return Ok(Flow::Halt(c));
            }
        }
        self.pc = (self.pc.0, next);
        Ok(Flow::Continue)
    }

    fn binop(&self, op: crate::ir::BinOp, a: u64, b: u64) -> Result<u64, TrapKind> {
        use crate::ir::BinOp::*;
        let (sa, sb) = (a as i64, b as i64);
        Ok(match op {
            Add => a.wrapping_add(b),
            Sub => a.wrapping_sub(b),
            Mul => a.wrapping_mul(b),
            Div => {
                if b == 0 {
                    return Err(TrapKind::TypeFault {
                        detail: "division by zero".into(),
                    });
                }
                sa.wrapping_div(sb) as u64
            }
            And => a & b,
            Or => a | b,
            Xor => a ^ b,
            Shl => a.wrapping_shl(b as u32),
            Shr => a.wrapping_shr(b as u32),
            Eq => (a == b) as u64,
            Ne => (a != b) as u64,
            Lt => (sa < sb) as u64,
            Le => (sa <= sb) as u64,
            Gt => (sa > sb) as u64,
            Ge => (sa >= sb) as u64,
        })
    }

    fn heap_alloc(&mut self, size: u64) -> Result<u64, TrapKind> {
        let addr = self.heap.alloc(&mut self.prng, size).map_err(|e| match e {
            AllocError::OutOfMemory => TrapKind::MemoryFault {
                detail: "heap exhausted".into(),
            },
            other => TrapKind::TypeFault {
                detail: other.to_string(),
            },
        })?;
        self.mem.grow_region("heap", self.heap.mapped_end());
        Ok(addr)
    }

    /// Re-seal control slots after a type-aware byte copy: for every element
    /// slot that has a MAC at the source, verify it there and store a fresh
    /// MAC for the destination address. Slots with no source MAC are left
    /// bare, and a failed verification re-seals a zero, so corruption still
    /// surfaces at the destination's next check.
    fn ccfi_recopy(
        &mut self,
        src: u64,
        dst: u64,
        len: u64,
        elem: &crate::ir::TypeDesc,
    ) -> Result<(), TrapKind> {
        let esize = self.module.size_of(elem);
        let slots = self.module.control_slots(elem);
        if slots.is_empty() || esize == 0 {
            return Ok(());
        }
        let count = len / esize;
        for e in 0..count {
            for slot in &slots {
                let a_src = src + e * esize + slot.offset;
                let a_dst = dst + e * esize + slot.offset;
                let stored = match self.table.load(&self.mem, a_src) {
                    Some(s) => s,
                    None => continue,
                };
                let v = self.mem.read_u64(a_src).map_err(|e| self.mem_trap(e))?;
                // the source may have been sealed with or without a
                // signature hash depending on how it was instrumented
                let mut candidates = vec![];
                if slot.sig.is_some() {
                    candidates.push(slot.sig.clone());
                }
                candidates.push(None);
                let verified = candidates
                    .iter()
                    .find(|sig| {
                        let class = self.class_for(slot.kind, a_src, sig);
                        verify(&self.key, v, &class, &stored)
                    })
                    .cloned();
                self.counters.mac_ops += 2;
                self.counters.steps += 2 * (1 + MAC_STEP_COST);
                let (checked, sig) = match verified {
                    Some(sig) => (v, sig),
                    None => (0, candidates[0].clone()),
                };
                let class_dst = self.class_for(slot.kind, a_dst, &sig);
                let mac = mac_value(&self.key, checked, &class_dst);
                self.table
                    .store(&mut self.mem, a_dst, mac)
                    .map_err(|_| TrapKind::MemoryFault {
                        detail: "mac table exhausted".into(),
                    })?;
            }
        }
        Ok(())
    }

    fn do_ret(&mut self, retval: i64) -> Step {
        let target = self.mem.read_u64(self.fp + 8).map_err(|e| self.mem_trap(e))?;
        let oldfp = self.mem.read_u64(self.fp).map_err(|e| self.mem_trap(e))?;
        self.sp = self.fp + 16;
        self.fp = oldfp;
        let frame = self.frames.pop().expect("ret with no live frame");

        if target == HALT_SENTINEL {
            return Ok(Flow::FunctionDone(retval));
        }
        match self.decode_code_addr(target) {
            None => Err(TrapKind::MemoryFault {
                detail: format!("return to invalid address {target:#x}"),
            }),
            Some((f, i)) => {
                if target == frame.expected_ret {
                    self.pc = (f, i);
                    if let Some(d) = frame.ret_dst {
                        self.set_temp(d, retval as u64);
                    }
                } else {
                    // control was redirected through memory; registers are
                    // garbage from the hijacked function's point of view
                    self.frames.push(Frame {
                        func: f,
                        temps: vec![0; self.module.functions[f].temp_names.len()],
                        ret_dst: None,
                        expected_ret: 0,
                    });
                    self.pc = (f, i);
                }
                Ok(Flow::Continue)
            }
        }
    }

    // ----- attacker actions -----

    fn resolve_addr(&mut self, e: &AddrExpr) -> Result<u64, String> {
        match e {
            AddrExpr::Abs(n) => Ok(*n),
            AddrExpr::Global { name, offset } => {
                let gi = self
                    .module
                    .globals
                    .iter()
                    .position(|g| g.name == *name)
                    .ok_or_else(|| format!("unknown global `{name}`"))?;
                Ok(self.globals_addr[gi].wrapping_add_signed(*offset))
            }
            AddrExpr::Frame { offset } => Ok(self.fp.wrapping_add_signed(*offset)),
            AddrExpr::MacSlot(inner) => {
                let addr = self.resolve_addr(inner)?;
                self.table
                    .slot_address(addr)
                    .ok_or_else(|| "mac table exhausted".to_string())
            }
            AddrExpr::Deref { name, offset } => {
                let (_, bytes) = self
                    .env
                    .bindings
                    .get(name)
                    .ok_or_else(|| format!("`{name}` was never read"))?;
                if bytes.len() < 8 {
                    return Err(format!("`{name}` holds fewer than 8 bytes"));
                }
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[..8]);
                Ok(u64::from_le_bytes(b).wrapping_add_signed(*offset))
            }
            AddrExpr::Code { func } => self
                .module
                .function(func)
                .map(|(id, _)| func_addr(id))
                .ok_or_else(|| format!("unknown function `{func}`")),
            AddrExpr::AddrOfRead { name } => self
                .env
                .bindings
                .get(name)
                .map(|(a, _)| *a)
                .ok_or_else(|| format!("`{name}` was never read")),
        }
    }

    fn resolve_value(&mut self, v: &ValueExpr) -> Result<Vec<u8>, String> {
        match v {
            ValueExpr::Hex(b) => Ok(b.clone()),
            ValueExpr::U64(n) => Ok(n.to_le_bytes().to_vec()),
            ValueExpr::Ptr(a) => Ok(self.resolve_addr(a)?.to_le_bytes().to_vec()),
            ValueExpr::Bytes { name, range } => {
                let (_, bytes) = self
                    .env
                    .bindings
                    .get(name)
                    .ok_or_else(|| format!("`{name}` was never read"))?;
                match range {
                    None => Ok(bytes.clone()),
                    Some((a, b)) => {
                        if *b > bytes.len() {
                            return Err(format!(
                                "slice {a}..{b} exceeds `{name}` of {} bytes",
                                bytes.len()
                            ));
                        }
                        Ok(bytes[*a..*b].to_vec())
                    }
                }
            }
        }
    }

    fn run_action(&mut self, action: &Action) {
        match action {
            Action::Read { addr, len, name } => {
                let a = match self.resolve_addr(addr) {
                    Ok(a) => a,
                    Err(detail) => {
                        self.attack_log.push(AttackLogEntry::ResolveFailed { detail });
                        return;
                    }
                };
                match self.mem.read(a, *len) {
                    Ok(bytes) => {
                        self.env.bindings.insert(name.clone(), (a, bytes));
                        self.attack_log.push(AttackLogEntry::Read {
                            addr: a,
                            len: *len,
                            name: name.clone(),
                            ok: true,
                        });
                    }
                    Err(_) => self.attack_log.push(AttackLogEntry::Read {
                        addr: a,
                        len: *len,
                        name: name.clone(),
                        ok: false,
                    }),
                }
            }
            Action::Write { addr, value } => {
                let resolved = self
                    .resolve_addr(addr)
                    .and_then(|a| Ok((a, self.resolve_value(value)?)));
                let (a, bytes) = match resolved {
                    Ok(x) => x,
                    Err(detail) => {
                        self.attack_log.push(AttackLogEntry::ResolveFailed { detail });
                        return;
                    }
                };
                if self.mem.is_writable(a, bytes.len() as u64) {
                    self.mem.write(a, &bytes).expect("checked writable");
                    self.attack_log.push(AttackLogEntry::Write {
                        addr: a,
                        len: bytes.len() as u64,
                        ok: true,
                        reason: None,
                    });
                } else {
                    let reason = match self.mem.read(a, bytes.len() as u64) {
                        Ok(_) => "read-only",
                        Err(_) => "unmapped",
                    };
                    self.attack_log.push(AttackLogEntry::Write {
                        addr: a,
                        len: bytes.len() as u64,
                        ok: false,
                        reason: Some(reason.to_string()),
                    });
                }
            }
            Action::Note(text) => self.attack_log.push(AttackLogEntry::Note {
                text: text.clone(),
            }),
        }
    }
}
