//! Static checks over a parsed module.
//!
//! Typing is per-function and textual: every temp must be assigned before
//! use and keeps the type of its first assignment. All cells are 64 bits;
//! the checker polices how they may be combined, most importantly that
//! indirect calls only go through values of function-pointer type.

use super::*;
use crate::mac::ClassKind;
use std::collections::HashSet;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub function: Option<String>,
    pub instr: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.function, self.instr) {
            (Some(func), Some(i)) => write!(f, "{func}[{i}]: {}", self.message),
            (Some(func), None) => write!(f, "{func}: {}", self.message),
            _ => write!(f, "module: {}", self.message),
        }
    }
}

/// Empty result means the module is well-typed.
pub fn typecheck(m: &Module) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let module_diag = |msg: String| Diagnostic {
        function: None,
        instr: None,
        message: msg,
    };

    match m.functions.iter().filter(|f| f.name == "main").count() {
        1 => {
            let (_, main) = m.function("main").unwrap();
            if !main.params.is_empty() {
                diags.push(module_diag("`main` takes no parameters".into()));
            }
        }
        0 => diags.push(module_diag("module has no `main` function".into())),
        n => diags.push(module_diag(format!("module has {n} `main` functions"))),
    }

    for rec in &m.records {
        let mut seen = HashSet::new();
        if record_cycle(m, &rec.name, &mut seen) {
            diags.push(module_diag(format!(
                "record `{}` contains itself",
                rec.name
            )));
        }
    }

    for f in &m.functions {
        check_function(m, f, &mut diags);
    }
    diags
}

fn record_cycle(m: &Module, name: &str, seen: &mut HashSet<String>) -> bool {
    if !seen.insert(name.to_string()) {
        return true;
    }
    let rec = match m.record_by_name(name) {
        Some(r) => r,
        None => return false,
    };
    for (_, ty) in &rec.fields {
        if let TypeDesc::Record(inner) = ty {
            if record_cycle(m, inner, seen) {
                return true;
            }
        }
    }
    seen.remove(name);
    false
}

fn func_signature(f: &Function) -> Signature {
    Signature {
        params: f.params.iter().map(|(_, t)| t.clone()).collect(),
        ret: f.ret.clone().map(Box::new),
    }
}

/// Forward type assignment for every temp in a function, ignoring errors.
/// Callers (the analyzer) run this only on modules that already typecheck.
pub(crate) fn temp_types_unchecked(m: &Module, f: &Function) -> Vec<Option<TypeDesc>> {
    let mut checker = FnChecker {
        m,
        f,
        temps: vec![None; f.temp_names.len()],
        diags: Vec::new(),
    };
    for (i, (_, ty)) in f.params.iter().enumerate() {
        checker.temps[i] = Some(ty.clone());
    }
    for (idx, instr) in f.body.iter().enumerate() {
        checker.check_instr(idx, instr);
    }
    checker.temps
}

fn check_function(m: &Module, f: &Function, diags: &mut Vec<Diagnostic>) {
    let mut checker = FnChecker {
        m,
        f,
        temps: vec![None; f.temp_names.len()],
        diags: Vec::new(),
    };
    for (i, (_, ty)) in f.params.iter().enumerate() {
        if ty.is_record() {
            checker.diag_at(None, "record parameters are not supported; pass a pointer");
        }
        checker.temps[i] = Some(ty.clone());
    }
    for (_, ty) in &f.locals {
        if let TypeDesc::Record(name) = ty {
            if m.record_by_name(name).is_none() {
                checker.diag_at(None, format!("unknown record type `{name}`"));
            }
        }
    }
    for (idx, instr) in f.body.iter().enumerate() {
        checker.check_instr(idx, instr);
    }
    match f.body.last() {
        None => checker.diag_at(None, "function body is empty; add `ret` or `halt`"),
        Some(Instr::Ret { .. }) | Some(Instr::Halt { .. }) | Some(Instr::Jmp { .. })
        | Some(Instr::Br { .. }) => {}
        Some(_) => checker.diag_at(
            Some(f.body.len() - 1),
            "control falls off the end of the function; add `ret` or `halt`",
        ),
    }
    diags.append(&mut checker.diags);
}

struct FnChecker<'a> {
    m: &'a Module,
    f: &'a Function,
    temps: Vec<Option<TypeDesc>>,
    diags: Vec<Diagnostic>,
}

impl<'a> FnChecker<'a> {
    fn diag_at(&mut self, instr: Option<usize>, msg: impl Into<String>) {
        self.diags.push(Diagnostic {
            function: Some(self.f.name.clone()),
            instr,
            message: msg.into(),
        });
    }

    fn operand_type(&mut self, idx: usize, op: &Operand) -> Option<TypeDesc> {
        match op {
            Operand::Const(_) => Some(TypeDesc::Int64),
            Operand::AddrOfLocal(_) | Operand::AddrOfGlobal(_) => Some(TypeDesc::RawPtr),
            Operand::Temp(t) => match &self.temps[*t] {
                Some(ty) => Some(ty.clone()),
                None => {
                    self.diag_at(
                        Some(idx),
                        format!("`{}` is used before assignment", self.f.temp_names[*t]),
                    );
                    None
                }
            },
        }
    }

    fn assign(&mut self, idx: usize, dst: TempId, ty: TypeDesc) {
        match &self.temps[dst] {
            Some(old) if *old != ty => self.diag_at(
                Some(idx),
                format!(
                    "`{}` was `{}` and is reassigned as `{}`",
                    self.f.temp_names[dst],
                    old.render(),
                    ty.render()
                ),
            ),
            _ => self.temps[dst] = Some(ty),
        }
    }

    fn want(&mut self, idx: usize, what: &str, op: &Operand, want: &TypeDesc) {
        if let Some(ty) = self.operand_type(idx, op) {
            if ty != *want {
                self.diag_at(
                    Some(idx),
                    format!("{what} must be `{}`, found `{}`", want.render(), ty.render()),
                );
            }
        }
    }

    fn want_addr(&mut self, idx: usize, what: &str, op: &Operand) {
        if let Some(ty) = self.operand_type(idx, op) {
            if ty != TypeDesc::RawPtr {
                self.diag_at(
                    Some(idx),
                    format!("{what} must be `rawptr`, found `{}`", ty.render()),
                );
            }
        }
    }

    fn check_args(&mut self, idx: usize, sig_params: &[TypeDesc], args: &[Operand]) {
        if sig_params.len() != args.len() {
            self.diag_at(
                Some(idx),
                format!(
                    "call expects {} argument(s), found {}",
                    sig_params.len(),
                    args.len()
                ),
            );
            return;
        }
        for (i, (want, arg)) in sig_params.iter().zip(args).enumerate() {
            if let Some(got) = self.operand_type(idx, arg) {
                if got != *want {
                    self.diag_at(
                        Some(idx),
                        format!(
                            "argument {i} must be `{}`, found `{}`",
                            want.render(),
                            got.render()
                        ),
                    );
                }
            }
        }
    }

    fn bind_result(
        &mut self,
        idx: usize,
        dst: &Option<TempId>,
        ret: &Option<Box<TypeDesc>>,
    ) {
        match (dst, ret) {
            (Some(d), Some(ty)) => self.assign(idx, *d, (**ty).clone()),
            (Some(_), None) => self.diag_at(Some(idx), "void call cannot produce a value"),
            _ => {}
        }
    }

    fn check_instr(&mut self, idx: usize, instr: &Instr) {
        match instr {
            Instr::Const { dst, .. } => self.assign(idx, *dst, TypeDesc::Int64),
            Instr::FuncRef { dst, func } => {
                let sig = func_signature(&self.m.functions[*func]);
                self.assign(idx, *dst, TypeDesc::FnPtr(sig));
            }
            Instr::TableRef { dst, .. } => self.assign(idx, *dst, TypeDesc::RawPtr),
            Instr::FrameAddr { dst } => self.assign(idx, *dst, TypeDesc::RawPtr),
            Instr::Bin { dst, op, lhs, rhs } => {
                let lt = self.operand_type(idx, lhs);
                let rt = self.operand_type(idx, rhs);
                let (lt, rt) = match (lt, rt) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return,
                };
                use BinOp::*;
                let result = match op {
                    Add | Sub => match (&lt, &rt) {
                        (TypeDesc::Int64, TypeDesc::Int64) => Some(TypeDesc::Int64),
                        (TypeDesc::RawPtr, TypeDesc::Int64) => Some(TypeDesc::RawPtr),
                        (TypeDesc::Int64, TypeDesc::RawPtr) if *op == Add => {
                            Some(TypeDesc::RawPtr)
                        }
                        (TypeDesc::RawPtr, TypeDesc::RawPtr) if *op == Sub => {
                            Some(TypeDesc::Int64)
                        }
                        _ => None,
                    },
                    Mul | Div | And | Or | Xor | Shl | Shr => {
                        if lt == TypeDesc::Int64 && rt == TypeDesc::Int64 {
                            Some(TypeDesc::Int64)
                        } else {
                            None
                        }
                    }
                    // comparisons are raw 64-bit; any non-record cells compare
                    Eq | Ne | Lt | Le | Gt | Ge => {
                        if lt.is_record() || rt.is_record() {
                            None
                        } else {
                            Some(TypeDesc::Int64)
                        }
                    }
                };
                match result {
                    Some(ty) => self.assign(idx, *dst, ty),
                    None => self.diag_at(
                        Some(idx),
                        format!(
                            "`{}` cannot combine `{}` and `{}`",
                            op.mnemonic(),
                            lt.render(),
                            rt.render()
                        ),
                    ),
                }
            }
            Instr::Load { dst, ty, addr } => {
                self.want_addr(idx, "load address", addr);
                if ty.is_record() {
                    self.diag_at(Some(idx), "records cannot be loaded into a register; use copy");
                } else {
                    self.assign(idx, *dst, ty.clone());
                }
            }
            Instr::Store { ty, addr, value } => {
                self.want_addr(idx, "store address", addr);
                if ty.is_record() {
                    self.diag_at(Some(idx), "records cannot be stored from a register; use copy");
                } else {
                    self.want(idx, "stored value", value, ty);
                }
            }
            Instr::Cast { dst, ty, value } => {
                if ty.is_record() {
                    self.diag_at(Some(idx), "cannot cast to a record type");
                    return;
                }
                if let Some(src) = self.operand_type(idx, value) {
                    if src.is_record() {
                        self.diag_at(Some(idx), "cannot cast a record value");
                        return;
                    }
                }
                self.assign(idx, *dst, ty.clone());
            }
            Instr::Alloca { dst, .. } => self.assign(idx, *dst, TypeDesc::RawPtr),
            Instr::HeapAlloc { dst, bytes } => {
                self.want(idx, "allocation size", bytes, &TypeDesc::Int64);
                self.assign(idx, *dst, TypeDesc::RawPtr);
            }
            Instr::HeapFree { addr } => self.want_addr(idx, "heap_free address", addr),
            Instr::Call { dst, func, args } => {
                let sig = func_signature(&self.m.functions[*func]);
                self.check_args(idx, &sig.params, args);
                self.bind_result(idx, dst, &sig.ret);
            }
            Instr::ICall { dst, target, args } => {
                match self.operand_type(idx, target) {
                    Some(TypeDesc::FnPtr(sig)) => {
                        self.check_args(idx, &sig.params, args);
                        self.bind_result(idx, dst, &sig.ret);
                    }
                    Some(other) => self.diag_at(
                        Some(idx),
                        format!(
                            "indirect call through non-function-pointer `{}`",
                            other.render()
                        ),
                    ),
                    None => {}
                }
            }
            Instr::MCall { dst, sig, obj, index, args } => {
                self.want_addr(idx, "mcall object", obj);
                self.want(idx, "mcall index", index, &TypeDesc::Int64);
                self.check_args(idx, &sig.params, args);
                self.bind_result(idx, dst, &sig.ret);
            }
            Instr::TCall { dst, sig, table_ptr, index, args } => {
                self.want_addr(idx, "tcall table pointer", table_ptr);
                self.want(idx, "tcall index", index, &TypeDesc::Int64);
                self.check_args(idx, &sig.params, args);
                self.bind_result(idx, dst, &sig.ret);
            }
            Instr::TableGet { dst, table, index } => {
                let table = &self.m.tables[*table];
                match index {
                    Operand::Const(i) => {
                        if *i < 0 || *i as usize >= table.entries.len() {
                            self.diag_at(
                                Some(idx),
                                format!(
                                    "index {i} out of bounds for table `{}` of {} entries",
                                    table.name,
                                    table.entries.len()
                                ),
                            );
                            return;
                        }
                        let sig = func_signature(&self.m.functions[table.entries[*i as usize]]);
                        self.assign(idx, *dst, TypeDesc::FnPtr(sig));
                    }
                    other => {
                        self.want(idx, "table index", other, &TypeDesc::Int64);
                        let sigs: Vec<Signature> = table
                            .entries
                            .iter()
                            .map(|f| func_signature(&self.m.functions[*f]))
                            .collect();
                        match sigs.first() {
                            Some(first) if sigs.iter().all(|s| s == first) => {
                                self.assign(idx, *dst, TypeDesc::FnPtr(first.clone()));
                            }
                            Some(_) => self.diag_at(
                                Some(idx),
                                format!(
                                    "table `{}` mixes signatures; a dynamic index needs a homogeneous table",
                                    table.name
                                ),
                            ),
                            None => self.diag_at(
                                Some(idx),
                                format!("table `{}` is empty", table.name),
                            ),
                        }
                    }
                }
            }
            Instr::NewObj { dst, record } => {
                if self.m.records[*record].vtable.is_none() {
                    self.diag_at(
                        Some(idx),
                        format!(
                            "record `{}` has no vtable; new_obj requires one",
                            self.m.records[*record].name
                        ),
                    );
                }
                self.assign(idx, *dst, TypeDesc::RawPtr);
            }
            Instr::CopyRec { dst, src, .. } => {
                self.want_addr(idx, "copy destination", dst);
                self.want_addr(idx, "copy source", src);
            }
            Instr::RawCopy { dst, src, len } => {
                self.want_addr(idx, "rawcopy destination", dst);
                self.want_addr(idx, "rawcopy source", src);
                self.want(idx, "rawcopy length", len, &TypeDesc::Int64);
            }
            Instr::CcfiRawCopy { dst, src, len, .. } => {
                self.want_addr(idx, "ccfi_rawcopy destination", dst);
                self.want_addr(idx, "ccfi_rawcopy source", src);
                self.want(idx, "ccfi_rawcopy length", len, &TypeDesc::Int64);
            }
            Instr::MacPtr { value, addr, kind, .. } => {
                if let Some(ty) = self.operand_type(idx, value) {
                    if ty.is_record() {
                        self.diag_at(Some(idx), "macptr value must be a 64-bit cell");
                    }
                }
                self.want_addr(idx, "macptr address", addr);
                if *kind == ClassKind::ReturnAddress {
                    self.diag_at(Some(idx), "macptr cannot use the return-address class");
                }
            }
            Instr::CheckPtr { dst, value, addr, kind, .. } => {
                let vty = self.operand_type(idx, value);
                self.want_addr(idx, "checkptr address", addr);
                if *kind == ClassKind::ReturnAddress {
                    self.diag_at(Some(idx), "checkptr cannot use the return-address class");
                }
                if let Some(ty) = vty {
                    if ty.is_record() {
                        self.diag_at(Some(idx), "checkptr value must be a 64-bit cell");
                    } else {
                        self.assign(idx, *dst, ty);
                    }
                }
            }
            Instr::AssertNz { value, .. } => {
                let _ = self.operand_type(idx, value);
            }
            Instr::FrameMac | Instr::FrameCheck => {
                if !self.f.has_mac_slot {
                    self.diag_at(
                        Some(idx),
                        "frame_mac/frame_check need a `macframe` function",
                    );
                }
            }
            Instr::FramePad | Instr::LeafSave | Instr::LeafCheck => {}
            Instr::Br { cond, then_to, else_to } => {
                self.want(idx, "branch condition", cond, &TypeDesc::Int64);
                for t in [then_to, else_to] {
                    if *t > self.f.body.len() {
                        self.diag_at(Some(idx), "branch target out of range");
                    }
                }
            }
            Instr::Jmp { to } => {
                if *to > self.f.body.len() {
                    self.diag_at(Some(idx), "jump target out of range");
                }
            }
            Instr::AttackPoint { .. } => {}
            Instr::Print { value } => self.want(idx, "print value", value, &TypeDesc::Int64),
            Instr::Ret { value } => match (&self.f.ret, value) {
                (Some(want), Some(v)) => {
                    let want = want.clone();
                    self.want(idx, "return value", v, &want);
                }
                (Some(_), None) => self.diag_at(Some(idx), "missing return value"),
                (None, Some(_)) => self.diag_at(Some(idx), "void function returns a value"),
                (None, None) => {}
            },
            Instr::Halt { code } => self.want(idx, "halt code", code, &TypeDesc::Int64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_module;
    use super::*;

    fn check(src: &str) -> Vec<Diagnostic> {
        typecheck(&parse_module(src).unwrap())
    }

    #[test]
    fn well_typed_module_is_clean() {
        let diags = check(
            "fn main() -> int64 {
               local slot: fn(->int64)
               f = funcref @h
               store.fn(->int64) &slot, f
               g = load.fn(->int64) &slot
               r = icall g()
               print r
               ret 0
             }
             fn h() -> int64 { ret 7 }",
        );
        assert!(diags.is_empty(), "{diags:?}");
    }

    #[test]
    fn icall_through_int_is_rejected() {
        let diags = check(
            "fn main() -> int64 {
               local x: int64
               v = load.int64 &x
               r = icall v()
               ret 0
             }",
        );
        assert!(diags
            .iter()
            .any(|d| d.message.contains("indirect call through non-function-pointer")));
    }

    #[test]
    fn fnptr_store_into_fnptr_slot_ok_and_cast_is_legal() {
        let diags = check(
            "fn h() -> int64 { ret 1 }
             fn main() -> int64 {
               f = funcref @h
               i = cast.int64 f
               print i
               ret 0
             }",
        );
        assert!(diags.is_empty(), "{diags:?}");
    }

    #[test]
    fn missing_main_detected() {
        let diags = check("fn a() { ret }");
        assert!(diags.iter().any(|d| d.message.contains("no `main`")));
    }

    #[test]
    fn fall_off_end_detected() {
        let diags = check("fn main() -> int64 { x = const 1 }");
        assert!(diags.iter().any(|d| d.message.contains("falls off")));
    }

    #[test]
    fn arg_count_mismatch_detected() {
        let diags = check(
            "fn f(a: int64) -> int64 { ret a }
             fn main() -> int64 { r = call @f(1, 2)\n ret r }",
        );
        assert!(diags.iter().any(|d| d.message.contains("expects 1 argument")));
    }

    #[test]
    fn record_cycle_detected() {
        let diags = check(
            "record A { b: rec(B) }
             record B { a: rec(A) }
             fn main() -> int64 { ret 0 }",
        );
        assert!(diags.iter().any(|d| d.message.contains("contains itself")));
    }

    #[test]
    fn use_before_assignment_detected() {
        let diags = check("fn main() -> int64 { i = add i, 1\n ret i }");
        assert!(diags.iter().any(|d| d.message.contains("before assignment")));
    }
}
