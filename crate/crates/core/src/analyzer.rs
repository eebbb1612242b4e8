//! Static detection of code that defeats automatic MACing.
//!
//! Four hazard classes:
//!
//! - `RawCopyUntyped`: a `rawcopy` whose source or destination region is
//!   known to hold control-flow pointers, or whose operand types are fully
//!   unknown. The copy moves pointer bytes without re-sealing them, so the
//!   destination fails its next check.
//! - `FnPtrCastToRaw`: a function pointer cast to `int64`/`rawptr`. Once
//!   erased, stores stop being sealed automatically.
//! - `RawCastToFnPtr`: the cast back. Flagged even when the program pairs
//!   it with a manual re-seal; the report notes that pairing is what to
//!   audit.
//! - `OracleExposure` (advisory): a `macptr` whose value is neither a
//!   literal function/table reference nor a just-checked value. Feeding
//!   attacker-influenced data to the sealing primitive hands out valid
//!   MACs for arbitrary pointers. The rule over-approximates: deliberate
//!   manual protection of plain data also trips it.
//!
//! The analysis is intraprocedural with short def-chain walks through
//! pointer arithmetic; that is enough to pin the patterns above without a
//! whole-program alias analysis.

use crate::ir::{Function, Instr, Module, Operand, TypeDesc};
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HazardKind {
    RawCopyUntyped,
    FnPtrCastToRaw,
    RawCastToFnPtr,
    OracleExposure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Advisory,
}

impl HazardKind {
    pub fn severity(self) -> Severity {
        match self {
            HazardKind::OracleExposure => Severity::Advisory,
            _ => Severity::Warning,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HazardKind::RawCopyUntyped => "raw-copy-untyped",
            HazardKind::FnPtrCastToRaw => "fnptr-cast-to-raw",
            HazardKind::RawCastToFnPtr => "raw-cast-to-fnptr",
            HazardKind::OracleExposure => "oracle-exposure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hazard {
    pub kind: HazardKind,
    pub severity: Severity,
    pub function: String,
    pub instr: usize,
    pub note: String,
    /// Element type for copy hazards, when provenance pinned one down.
    pub inferred_elem: Option<String>,
}

impl fmt::Display for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} at {}[{}]: {}",
            match self.severity {
                Severity::Warning => "warning",
                Severity::Advisory => "advisory",
            },
            self.kind.name(),
            self.function,
            self.instr,
            self.note
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuggestError {
    NotACopyHazard,
}

impl fmt::Display for SuggestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "suggestions exist only for raw-copy hazards")
    }
}

impl std::error::Error for SuggestError {}

/// Region provenance of a pointer operand.
enum Prov {
    Typed(TypeDesc),
    NoInfo,
}

pub fn analyze_module(module: &Module) -> Vec<Hazard> {
    let mut hazards = Vec::new();
    for f in &module.functions {
        let temp_types = crate::ir::typecheck_temp_types(module, f);
        for (idx, instr) in f.body.iter().enumerate() {
            match instr {
                Instr::Cast { ty, value, .. } => {
                    let from = operand_type(&temp_types, value);
                    match (from, ty) {
                        (Some(TypeDesc::FnPtr(sig)), TypeDesc::Int64 | TypeDesc::RawPtr) => {
                            hazards.push(Hazard {
                                kind: HazardKind::FnPtrCastToRaw,
                                severity: HazardKind::FnPtrCastToRaw.severity(),
                                function: f.name.clone(),
                                instr: idx,
                                note: format!(
                                    "`{}` erased to `{}`; stores of the erased value are not sealed",
                                    sig.canonical(),
                                    ty.render()
                                ),
                                inferred_elem: None,
                            });
                        }
                        (Some(TypeDesc::Int64) | Some(TypeDesc::RawPtr), TypeDesc::FnPtr(sig)) => {
                            hazards.push(Hazard {
                                kind: HazardKind::RawCastToFnPtr,
                                severity: HazardKind::RawCastToFnPtr.severity(),
                                function: f.name.clone(),
                                instr: idx,
                                note: format!(
                                    "raw value cast to `{}`; audit that a matching re-seal pairs with this cast",
                                    sig.canonical()
                                ),
                                inferred_elem: None,
                            });
                        }
                        _ => {}
                    }
                }
                Instr::RawCopy { dst, src, .. } => {
                    let p_dst = provenance(module, f, idx, dst, 4);
                    let p_src = provenance(module, f, idx, src, 4);
                    let hot = |p: &Prov| match p {
                        Prov::Typed(t) => module.contains_control_ptr(t),
                        Prov::NoInfo => false,
                    };
                    let typed_elem = [&p_src, &p_dst].into_iter().find_map(|p| match p {
                        Prov::Typed(t) if module.contains_control_ptr(t) => Some(t.render()),
                        _ => None,
                    });
                    if hot(&p_src) || hot(&p_dst) {
                        hazards.push(Hazard {
                            kind: HazardKind::RawCopyUntyped,
                            severity: HazardKind::RawCopyUntyped.severity(),
                            function: f.name.clone(),
                            instr: idx,
                            note: "raw copy of a region holding control-flow pointers; their MACs are not recomputed".into(),
                            inferred_elem: typed_elem,
                        });
                    } else if matches!(p_src, Prov::NoInfo) && matches!(p_dst, Prov::NoInfo) {
                        hazards.push(Hazard {
                            kind: HazardKind::RawCopyUntyped,
                            severity: HazardKind::RawCopyUntyped.severity(),
                            function: f.name.clone(),
                            instr: idx,
                            note: "raw copy between regions of unknown type; sealed pointers inside would lose their MACs".into(),
                            inferred_elem: None,
                        });
                    }
                }
                Instr::MacPtr { value, .. } => {
                    let ok = match value {
                        Operand::Temp(t) => matches!(
                            last_def(f, idx, *t),
                            Some(Instr::FuncRef { .. })
                                | Some(Instr::TableRef { .. })
                                | Some(Instr::CheckPtr { .. })
                        ),
                        _ => false,
                    };
                    if !ok {
                        hazards.push(Hazard {
                            kind: HazardKind::OracleExposure,
                            severity: HazardKind::OracleExposure.severity(),
                            function: f.name.clone(),
                            instr: idx,
                            note: "macptr over a value that is not a literal reference or a checked load; this can mint MACs for attacker-chosen data".into(),
                            inferred_elem: None,
                        });
                    }
                }
                _ => {}
            }
        }
    }
    hazards
}

/// Concrete rewrite for a raw-copy hazard.
pub fn suggest_fix(hazard: &Hazard) -> Result<String, SuggestError> {
    if hazard.kind != HazardKind::RawCopyUntyped {
        return Err(SuggestError::NotACopyHazard);
    }
    Ok(match &hazard.inferred_elem {
        Some(ty) => format!("replace rawcopy with ccfi_rawcopy(dst, src, len, {ty})"),
        None => "replace rawcopy with ccfi_rawcopy(dst, src, len, <element type>); the element type could not be inferred and needs manual annotation".into(),
    })
}

fn operand_type(temp_types: &[Option<TypeDesc>], op: &Operand) -> Option<TypeDesc> {
    match op {
        Operand::Temp(t) => temp_types.get(*t).cloned().flatten(),
        Operand::Const(_) => Some(TypeDesc::Int64),
        Operand::AddrOfLocal(_) | Operand::AddrOfGlobal(_) => Some(TypeDesc::RawPtr),
    }
}

fn last_def(f: &Function, at: usize, t: usize) -> Option<&Instr> {
    f.body[..at]
        .iter()
        .rev()
        .find(|i| crate::pass::def_of(i) == Some(t))
}

/// Where does a pointer operand point? Follows addresses of locals and
/// globals, fresh typed objects, and pointer arithmetic a few steps deep;
/// casts and heap allocations erase the answer.
fn provenance(module: &Module, f: &Function, at: usize, op: &Operand, depth: u32) -> Prov {
    if depth == 0 {
        return Prov::NoInfo;
    }
    match op {
        Operand::AddrOfLocal(l) => Prov::Typed(f.locals[*l].1.clone()),
        Operand::AddrOfGlobal(g) => Prov::Typed(module.globals[*g].ty.clone()),
        Operand::Const(_) => Prov::NoInfo,
        Operand::Temp(t) => match last_def(f, at, *t) {
            Some(Instr::Bin { lhs, .. }) => provenance(module, f, at, lhs, depth - 1),
            Some(Instr::CheckPtr { value, .. }) => provenance(module, f, at, value, depth - 1),
            Some(Instr::NewObj { record, .. }) => {
                Prov::Typed(TypeDesc::Record(module.records[*record].name.clone()))
            }
            _ => Prov::NoInfo,
        },
    }
}
