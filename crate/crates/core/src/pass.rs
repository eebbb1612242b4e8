//! The instrumentation pass.
//!
//! Rewrites a module so that every control-flow pointer is sealed when it
//! is stored and checked when it is loaded:
//!
//! - function-pointer stores gain a `macptr`, loads gain a `checkptr` plus
//!   a zero check (check-on-load: a corrupt pointer traps even if never
//!   called);
//! - `mcall` is split into an explicit table-pointer load, check, and
//!   table call; `new_obj` seals the fresh object's table pointer;
//! - typed record copies re-seal every control slot for the destination
//!   address;
//! - non-leaf functions get a frame MAC in the prologue and a check before
//!   every return; leaf functions instead park the return address and
//!   frame pointer in a reserved register and compare on exit, costing no
//!   MAC operations;
//! - global initializers holding function pointers are sealed by a
//!   synthetic `__ccfi_init` run before `main`.
//!
//! Raw byte copies are deliberately left alone: losing the MAC on an
//! untyped copy is the compatibility hazard the analyzer exists to flag.

use crate::ir::{
    ControlSlot, Function, FuncId, GlobalInit, Instr, Module, Operand, Signature, TableId,
    TempId, TypeDesc,
};
use crate::mac::ClassKind;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassConfig {
    pub protect_stack: bool,
    pub protect_pointers: bool,
    pub leaf_opt: bool,
    pub type_sig_classes: bool,
    pub entropy_bits: u32,
}

impl Default for PassConfig {
    fn default() -> Self {
        PassConfig {
            protect_stack: true,
            protect_pointers: true,
            leaf_opt: true,
            type_sig_classes: false,
            entropy_bits: 4,
        }
    }
}

impl PassConfig {
    pub fn disabled() -> Self {
        PassConfig {
            protect_stack: false,
            protect_pointers: false,
            leaf_opt: false,
            type_sig_classes: false,
            entropy_bits: 0,
        }
    }

    pub fn enabled(&self) -> bool {
        self.protect_stack || self.protect_pointers
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PassError {
    NotALeaf { function: String },
}

impl fmt::Display for PassError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassError::NotALeaf { function } => {
                write!(f, "`{function}` makes calls and cannot take the leaf path")
            }
        }
    }
}

impl std::error::Error for PassError {}

pub const INIT_FUNCTION: &str = "__ccfi_init";

/// Apply the configured protections, returning a new module. An all-off
/// configuration returns the input unchanged.
pub fn instrument_module(module: &Module, config: &PassConfig) -> Module {
    assert!(config.entropy_bits <= 16, "entropy is capped at 16 bits");
    let mut m = module.clone();
    if !config.enabled() {
        return m;
    }
    for f in m.functions.iter_mut() {
        if config.protect_pointers {
            *f = instrument_copies(f, module, config);
            *f = instrument_pointer_ops(f, module, config);
        }
        if config.protect_stack {
            if config.leaf_opt && f.is_leaf() {
                *f = leaf_optimize(f).expect("leafness just checked");
            } else {
                *f = instrument_frame(f, config);
            }
        }
    }
    if config.protect_pointers {
        m = emit_global_initializers(&m, config);
    }
    m
}

/// Rebuild a body with per-instruction expansions. `prologue` lands before
/// the first instruction; branch targets are remapped so a jump to an old
/// instruction lands at the start of its expansion (and a loop back to
/// index 0 does not re-run the prologue).
fn rewrite_body(
    f: &mut Function,
    prologue: Vec<Instr>,
    mut emit: impl FnMut(&mut Function, Instr, &mut Vec<Instr>),
) {
    let body = std::mem::take(&mut f.body);
    let mut new_body = prologue;
    let mut index_map = Vec::with_capacity(body.len() + 1);
    for instr in body {
        index_map.push(new_body.len());
        emit(f, instr, &mut new_body);
    }
    index_map.push(new_body.len());
    for instr in &mut new_body {
        match instr {
            Instr::Br { then_to, else_to, .. } => {
                *then_to = index_map[*then_to];
                *else_to = index_map[*else_to];
            }
            Instr::Jmp { to } => *to = index_map[*to],
            _ => {}
        }
    }
    f.body = new_body;
}

/// Stack protection: reserve the frame MAC slot, seal the just-pushed
/// return address and old frame pointer in the prologue, re-check before
/// every return. With entropy on, the prologue also pads the frame by a
/// random number of granules, shifting every deeper frame.
pub fn instrument_frame(f: &Function, config: &PassConfig) -> Function {
    let mut nf = f.clone();
    nf.has_mac_slot = true;
    let mut prologue = vec![Instr::FrameMac];
    if config.entropy_bits > 0 {
        prologue.push(Instr::FramePad);
    }
    rewrite_body(&mut nf, prologue, |_, instr, out| {
        if matches!(instr, Instr::Ret { .. }) {
            out.push(Instr::FrameCheck);
        }
        out.push(instr);
    });
    nf
}

/// Leaf path: the return address and frame pointer are parked in a
/// reserved register at entry and compared against memory on exit. No MAC
/// slot, no MAC operations.
pub fn leaf_optimize(f: &Function) -> Result<Function, PassError> {
    if !f.is_leaf() {
        return Err(PassError::NotALeaf {
            function: f.name.clone(),
        });
    }
    let mut nf = f.clone();
    rewrite_body(&mut nf, vec![Instr::LeafSave], |_, instr, out| {
        if matches!(instr, Instr::Ret { .. }) {
            out.push(Instr::LeafCheck);
        }
        out.push(instr);
    });
    Ok(nf)
}

fn sig_attr(config: &PassConfig, sig: &Signature) -> Option<Signature> {
    if config.type_sig_classes {
        Some(sig.clone())
    } else {
        None
    }
}

/// Pointer protection: seal on store, check on load, split method calls
/// around an explicit table-pointer check, seal fresh objects.
pub fn instrument_pointer_ops(f: &Function, module: &Module, config: &PassConfig) -> Function {
    let mut nf = f.clone();
    rewrite_body(&mut nf, Vec::new(), |nf, instr, out| match instr {
        Instr::Store { ty: TypeDesc::FnPtr(sig), addr, value } => {
            out.push(Instr::Store {
                ty: TypeDesc::FnPtr(sig.clone()),
                addr,
                value,
            });
            out.push(Instr::MacPtr {
                value,
                addr,
                kind: ClassKind::FunctionPointer,
                sig: sig_attr(config, &sig),
            });
        }
        Instr::Load { dst, ty: TypeDesc::FnPtr(sig), addr } => {
            out.push(Instr::Load {
                dst,
                ty: TypeDesc::FnPtr(sig.clone()),
                addr,
            });
            out.push(Instr::CheckPtr {
                dst,
                value: Operand::Temp(dst),
                addr,
                kind: ClassKind::FunctionPointer,
                sig: sig_attr(config, &sig),
            });
            out.push(Instr::AssertNz {
                value: Operand::Temp(dst),
                kind: ClassKind::FunctionPointer,
            });
        }
        Instr::MCall { dst, sig, obj, index, args } => {
            let tp = nf.fresh_temp("vt");
            let tpc = nf.fresh_temp("vtc");
            out.push(Instr::Load {
                dst: tp,
                ty: TypeDesc::RawPtr,
                addr: obj,
            });
            out.push(Instr::CheckPtr {
                dst: tpc,
                value: Operand::Temp(tp),
                addr: obj,
                kind: ClassKind::VTablePointer,
                sig: None,
            });
            out.push(Instr::AssertNz {
                value: Operand::Temp(tpc),
                kind: ClassKind::VTablePointer,
            });
            out.push(Instr::TCall {
                dst,
                sig,
                table_ptr: Operand::Temp(tpc),
                index,
                args,
            });
        }
        Instr::NewObj { dst, record } => {
            let vt: TableId = module.records[record]
                .vtable
                .expect("typecheck requires new_obj records to carry a vtable");
            out.push(Instr::NewObj { dst, record });
            let tt = nf.fresh_temp("vt");
            out.push(Instr::TableRef { dst: tt, table: vt });
            out.push(Instr::MacPtr {
                value: Operand::Temp(tt),
                addr: Operand::Temp(dst),
                kind: ClassKind::VTablePointer,
                sig: None,
            });
        }
        other => out.push(other),
    });
    nf
}

/// Typed copies of records holding control slots: copy the bytes, then for
/// every slot verify the MAC at the source address and seal a fresh one for
/// the destination address. A slot with no source MAC re-seals a zero, so
/// the corruption surfaces at the destination's next check rather than
/// silently validating.
pub fn instrument_copies(f: &Function, module: &Module, config: &PassConfig) -> Function {
    let mut nf = f.clone();
    rewrite_body(&mut nf, Vec::new(), |nf, instr, out| match instr {
        Instr::CopyRec { record, dst, src } => {
            let ty = TypeDesc::Record(module.records[record].name.clone());
            let slots = module.control_slots(&ty);
            if slots.is_empty() {
                out.push(Instr::CopyRec { record, dst, src });
                return;
            }
            let size = module.size_of(&ty);
            out.push(Instr::RawCopy {
                dst,
                src,
                len: Operand::Const(size as i64),
            });
            for ControlSlot { offset, kind, sig } in slots {
                let sig = sig.as_ref().and_then(|s| sig_attr(config, s));
                let a_src = nf.fresh_temp("cs");
                out.push(Instr::Bin {
                    dst: a_src,
                    op: crate::ir::BinOp::Add,
                    lhs: src,
                    rhs: Operand::Const(offset as i64),
                });
                let v = nf.fresh_temp("cv");
                out.push(Instr::Load {
                    dst: v,
                    ty: TypeDesc::RawPtr,
                    addr: Operand::Temp(a_src),
                });
                let vc = nf.fresh_temp("cc");
                out.push(Instr::CheckPtr {
                    dst: vc,
                    value: Operand::Temp(v),
                    addr: Operand::Temp(a_src),
                    kind,
                    sig: sig.clone(),
                });
                let a_dst = nf.fresh_temp("cd");
                out.push(Instr::Bin {
                    dst: a_dst,
                    op: crate::ir::BinOp::Add,
                    lhs: dst,
                    rhs: Operand::Const(offset as i64),
                });
                out.push(Instr::MacPtr {
                    value: Operand::Temp(vc),
                    addr: Operand::Temp(a_dst),
                    kind,
                    sig,
                });
            }
        }
        other => out.push(other),
    });
    nf
}

/// Initializer value sitting at a byte offset within a global, if it is a
/// function or table reference.
fn init_ref_at(
    module: &Module,
    ty: &TypeDesc,
    init: &GlobalInit,
    offset: u64,
) -> Option<RefInit> {
    match (ty, init) {
        (TypeDesc::FnPtr(_), GlobalInit::Func(f)) if offset == 0 => Some(RefInit::Func(*f)),
        (TypeDesc::Record(name), init) => {
            let rec = module.record_by_name(name)?;
            let items: &[GlobalInit] = match init {
                GlobalInit::Record(items) => items,
                _ => &[],
            };
            let mut off = 0;
            if let Some(vt) = rec.vtable {
                if offset == 0 {
                    return Some(RefInit::Table(vt));
                }
                off = 8;
            }
            for (i, (_, fty)) in rec.fields.iter().enumerate() {
                let size = module.size_of(fty);
                if offset >= off && offset < off + size {
                    let item = items.get(i).unwrap_or(&GlobalInit::Zero);
                    return init_ref_at(module, fty, item, offset - off);
                }
                off += size;
            }
            None
        }
        _ => None,
    }
}

enum RefInit {
    Func(FuncId),
    Table(TableId),
}

/// Append `__ccfi_init`, which seals every function- or table-pointer
/// initializer of every global (recursively through records) before `main`
/// runs. Null initializers are left unsealed; their first use fails the
/// check like any never-sealed pointer.
pub fn emit_global_initializers(module: &Module, config: &PassConfig) -> Module {
    let mut m = module.clone();
    if m.function(INIT_FUNCTION).is_some() {
        return m;
    }
    let mut init = Function {
        name: INIT_FUNCTION.to_string(),
        params: vec![],
        locals: vec![],
        ret: None,
        has_mac_slot: false,
        temp_names: vec![],
        body: vec![],
    };
    for (gi, g) in m.globals.iter().enumerate() {
        for ControlSlot { offset, kind, sig } in m.control_slots(&g.ty) {
            let target = match init_ref_at(&m, &g.ty, &g.init, offset) {
                Some(t) => t,
                None => continue,
            };
            let a = init.fresh_temp("ga");
            init.body.push(Instr::Bin {
                dst: a,
                op: crate::ir::BinOp::Add,
                lhs: Operand::AddrOfGlobal(gi),
                rhs: Operand::Const(offset as i64),
            });
            let v = init.fresh_temp("gv");
            match target {
                RefInit::Func(f) => init.body.push(Instr::FuncRef { dst: v, func: f }),
                RefInit::Table(t) => init.body.push(Instr::TableRef { dst: v, table: t }),
            }
            init.body.push(Instr::MacPtr {
                value: Operand::Temp(v),
                addr: Operand::Temp(a),
                kind,
                sig: sig.as_ref().and_then(|s| sig_attr(config, s)),
            });
        }
    }
    init.body.push(Instr::Ret { value: None });
    m.functions.push(init);
    m
}

/// Static full-mediation scan over an instrumented module: every indirect
/// call target and every sealed value must trace back (by the nearest
/// preceding assignment) to a checkptr, a literal function/table
/// reference, a read-only table read, or an unwritten parameter register.
/// Returns human-readable violations; empty means fully mediated.
pub fn mediation_scan(module: &Module) -> Vec<String> {
    let mut violations = Vec::new();
    for f in &module.functions {
        for (idx, instr) in f.body.iter().enumerate() {
            match instr {
                Instr::ICall { target, .. } => {
                    check_source(f, idx, target, "icall target", &mut violations);
                }
                Instr::TCall { table_ptr, .. } => {
                    check_source(f, idx, table_ptr, "tcall table", &mut violations);
                }
                Instr::MCall { .. } => violations.push(format!(
                    "{}[{idx}]: mcall was not lowered to a checked table call",
                    f.name
                )),
                Instr::MacPtr { value, .. } => {
                    check_source(f, idx, value, "macptr value", &mut violations);
                }
                _ => {}
            }
        }
    }
    violations
}

fn check_source(
    f: &Function,
    at: usize,
    op: &Operand,
    what: &str,
    violations: &mut Vec<String>,
) {
    let t = match op {
        Operand::Temp(t) => *t,
        _ => {
            violations.push(format!("{}[{at}]: {what} is not a register", f.name));
            return;
        }
    };
    match last_def(f, at, t) {
        Some(Instr::CheckPtr { .. })
        | Some(Instr::FuncRef { .. })
        | Some(Instr::TableRef { .. })
        | Some(Instr::TableGet { .. }) => {}
        Some(other) => violations.push(format!(
            "{}[{at}]: {what} `{}` comes from {:?}, not a checked source",
            f.name,
            f.temp_names[t],
            std::mem::discriminant(other)
        )),
        None => {
            if t >= f.params.len() {
                violations.push(format!(
                    "{}[{at}]: {what} `{}` is never assigned",
                    f.name, f.temp_names[t]
                ));
            }
            // parameters are register values never stored to memory
        }
    }
}

/// Nearest textual assignment to `t` before `at`. Bodies in this corpus
/// assign before use in straight-line order, which is all this needs.
fn last_def(f: &Function, at: usize, t: TempId) -> Option<&Instr> {
    f.body[..at].iter().rev().find(|i| def_of(i) == Some(t))
}

pub(crate) fn def_of(i: &Instr) -> Option<TempId> {
    match i {
        Instr::Const { dst, .. }
        | Instr::FuncRef { dst, .. }
        | Instr::TableRef { dst, .. }
        | Instr::FrameAddr { dst }
        | Instr::Bin { dst, .. }
        | Instr::Load { dst, .. }
        | Instr::Cast { dst, .. }
        | Instr::Alloca { dst, .. }
        | Instr::HeapAlloc { dst, .. }
        | Instr::TableGet { dst, .. }
        | Instr::NewObj { dst, .. }
        | Instr::CheckPtr { dst, .. } => Some(*dst),
        Instr::Call { dst, .. }
        | Instr::ICall { dst, .. }
        | Instr::MCall { dst, .. }
        | Instr::TCall { dst, .. } => *dst,
        _ => None,
    }
}
