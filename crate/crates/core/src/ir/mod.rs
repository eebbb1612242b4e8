//! The toy intermediate representation.
//!
//! A module is a set of record types, read-only method tables, globals and
//! functions. All values are 64-bit cells; records live in memory and are
//! manipulated through typed loads/stores and copies. Instruction operands
//! are virtual registers (temps), integer literals, or `&name` addresses of
//! locals and globals. Locals are memory slots in the stack frame; temps are
//! registers and have no address.
//!
//! The textual grammar is documented in `docs/ir.md`.

mod parse;
mod print;
mod typecheck;

pub use parse::{parse_module, ParseError};
pub use print::print_module;
pub(crate) use typecheck::temp_types_unchecked as typecheck_temp_types;
pub use typecheck::{typecheck, Diagnostic};

use crate::mac::ClassKind;
use serde::{Deserialize, Serialize};
use std::fmt;

pub type FuncId = usize;
pub type GlobalId = usize;
pub type TableId = usize;
pub type RecordId = usize;
pub type TempId = usize;
pub type LocalId = usize;

/// Function signature. The canonical rendering (`fn(int64,rawptr->void)`)
/// is what the type-signature hash is computed over.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub params: Vec<TypeDesc>,
    pub ret: Option<Box<TypeDesc>>,
}

impl Signature {
    pub fn canonical(&self) -> String {
        let mut s = String::from("fn(");
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&p.render());
        }
        s.push_str("->");
        match &self.ret {
            Some(t) => s.push_str(&t.render()),
            None => s.push_str("void"),
        }
        s.push(')');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeDesc {
    Int64,
    RawPtr,
    FnPtr(Signature),
    Record(String),
}

impl TypeDesc {
    pub fn render(&self) -> String {
        match self {
            TypeDesc::Int64 => "int64".into(),
            TypeDesc::RawPtr => "rawptr".into(),
            TypeDesc::FnPtr(sig) => sig.canonical(),
            TypeDesc::Record(name) => format!("rec({name})"),
        }
    }

    pub fn is_fnptr(&self) -> bool {
        matches!(self, TypeDesc::FnPtr(_))
    }

    pub fn is_record(&self) -> bool {
        matches!(self, TypeDesc::Record(_))
    }
}

impl fmt::Display for TypeDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Record type. When `vtable` is set the record carries a hidden
/// method-table pointer slot at offset 0, ahead of the declared fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordDef {
    pub name: String,
    pub vtable: Option<TableId>,
    pub fields: Vec<(String, TypeDesc)>,
}

/// Read-only array of function references, the vtable analog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodTable {
    pub name: String,
    pub entries: Vec<FuncId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlobalInit {
    Zero,
    Int(i64),
    Func(FuncId),
    Table(TableId),
    Record(Vec<GlobalInit>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub ty: TypeDesc,
    pub init: GlobalInit,
    pub readonly: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Temp(TempId),
    Const(i64),
    AddrOfLocal(LocalId),
    AddrOfGlobal(GlobalId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    Const { dst: TempId, value: i64 },
    FuncRef { dst: TempId, func: FuncId },
    TableRef { dst: TempId, table: TableId },
    FrameAddr { dst: TempId },
    Bin { dst: TempId, op: BinOp, lhs: Operand, rhs: Operand },
    Load { dst: TempId, ty: TypeDesc, addr: Operand },
    Store { ty: TypeDesc, addr: Operand, value: Operand },
    Cast { dst: TempId, ty: TypeDesc, value: Operand },
    Alloca { dst: TempId, bytes: u64 },
    HeapAlloc { dst: TempId, bytes: Operand },
    HeapFree { addr: Operand },
    Call { dst: Option<TempId>, func: FuncId, args: Vec<Operand> },
    ICall { dst: Option<TempId>, target: Operand, args: Vec<Operand> },
    /// Method call through the table pointer stored at offset 0 of `obj`.
    MCall { dst: Option<TempId>, sig: Signature, obj: Operand, index: Operand, args: Vec<Operand> },
    /// Call through an already-loaded table pointer; emitted by the pass
    /// when it splits an `mcall` into load + check + call.
    TCall { dst: Option<TempId>, sig: Signature, table_ptr: Operand, index: Operand, args: Vec<Operand> },
    /// Read an entry from a method table. The table is immutable memory, so
    /// the result needs no MAC check.
    TableGet { dst: TempId, table: TableId, index: Operand },
    NewObj { dst: TempId, record: RecordId },
    CopyRec { record: RecordId, dst: Operand, src: Operand },
    RawCopy { dst: Operand, src: Operand, len: Operand },
    CcfiRawCopy { dst: Operand, src: Operand, len: Operand, elem: TypeDesc },
    MacPtr { value: Operand, addr: Operand, kind: ClassKind, sig: Option<Signature> },
    CheckPtr { dst: TempId, value: Operand, addr: Operand, kind: ClassKind, sig: Option<Signature> },
    /// Trap with a CCFI violation if the value is zero (a failed checkptr).
    AssertNz { value: Operand, kind: ClassKind },
    FrameMac,
    FrameCheck,
    FramePad,
    LeafSave,
    LeafCheck,
    Br { cond: Operand, then_to: usize, else_to: usize },
    Jmp { to: usize },
    AttackPoint { label: String },
    Print { value: Operand },
    Ret { value: Option<Operand> },
    Halt { code: Operand },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    /// Parameters occupy temp slots `0..params.len()`.
    pub params: Vec<(String, TypeDesc)>,
    pub locals: Vec<(String, TypeDesc)>,
    pub ret: Option<TypeDesc>,
    /// Reserve a 16-byte MAC slot in the frame (set by the pass).
    pub has_mac_slot: bool,
    pub temp_names: Vec<String>,
    pub body: Vec<Instr>,
}

impl Function {
    /// A leaf makes no calls of any kind. `print` and the intrinsics are VM
    /// services, not calls.
    pub fn is_leaf(&self) -> bool {
        !self.body.iter().any(|i| {
            matches!(
                i,
                Instr::Call { .. } | Instr::ICall { .. } | Instr::MCall { .. } | Instr::TCall { .. }
            )
        })
    }

    pub fn fresh_temp(&mut self, hint: &str) -> TempId {
        let mut n = self.temp_names.len();
        loop {
            let name = format!("__{hint}{n}");
            if !self.temp_names.iter().any(|t| t == &name) {
                self.temp_names.push(name);
                return self.temp_names.len() - 1;
            }
            n += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Module {
    pub records: Vec<RecordDef>,
    pub tables: Vec<MethodTable>,
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<(FuncId, &Function)> {
        self.functions
            .iter()
            .enumerate()
            .find(|(_, f)| f.name == name)
    }

    pub fn main_id(&self) -> Option<FuncId> {
        self.function("main").map(|(id, _)| id)
    }

    /// Size of a value of this type in memory, in bytes.
    pub fn size_of(&self, ty: &TypeDesc) -> u64 {
        match ty {
            TypeDesc::Int64 | TypeDesc::RawPtr | TypeDesc::FnPtr(_) => 8,
            TypeDesc::Record(name) => {
                let rec = self.record_by_name(name).expect("unknown record");
                let hidden = if rec.vtable.is_some() { 8 } else { 0 };
                hidden
                    + rec
                        .fields
                        .iter()
                        .map(|(_, t)| self.size_of(t))
                        .sum::<u64>()
            }
        }
    }

    pub fn record_by_name(&self, name: &str) -> Option<&RecordDef> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn record_id(&self, name: &str) -> Option<RecordId> {
        self.records.iter().position(|r| r.name == name)
    }

    /// Whether a value of this type holds protected control-flow pointers
    /// anywhere inside: a function pointer, or a record with a method-table
    /// slot or such fields nested within.
    pub fn contains_control_ptr(&self, ty: &TypeDesc) -> bool {
        match ty {
            TypeDesc::FnPtr(_) => true,
            TypeDesc::Record(name) => {
                let rec = match self.record_by_name(name) {
                    Some(r) => r,
                    None => return false,
                };
                rec.vtable.is_some()
                    || rec.fields.iter().any(|(_, t)| self.contains_control_ptr(t))
            }
            _ => false,
        }
    }

    /// Byte offsets of all control-flow pointer slots within a value of
    /// `ty`, with the class kind and signature each slot is checked under.
    pub fn control_slots(&self, ty: &TypeDesc) -> Vec<ControlSlot> {
        let mut out = Vec::new();
        self.collect_control_slots(ty, 0, &mut out);
        out
    }

    fn collect_control_slots(&self, ty: &TypeDesc, base: u64, out: &mut Vec<ControlSlot>) {
        match ty {
            TypeDesc::FnPtr(sig) => out.push(ControlSlot {
                offset: base,
                kind: ClassKind::FunctionPointer,
                sig: Some(sig.clone()),
            }),
            TypeDesc::Record(name) => {
                let rec = match self.record_by_name(name) {
                    Some(r) => r.clone(),
                    None => return,
                };
                let mut off = base;
                if rec.vtable.is_some() {
                    out.push(ControlSlot {
                        offset: off,
                        kind: ClassKind::VTablePointer,
                        sig: None,
                    });
                    off += 8;
                }
                for (_, fty) in &rec.fields {
                    self.collect_control_slots(fty, off, out);
                    off += self.size_of(fty);
                }
            }
            _ => {}
        }
    }
}

/// A protected slot within a composite value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSlot {
    pub offset: u64,
    pub kind: ClassKind,
    pub sig: Option<Signature>,
}
