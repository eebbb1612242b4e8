//! Canonical textual rendering of a module. Printing a parsed module and
//! reparsing the output yields a structurally equal module; branch targets
//! are materialized as synthetic `L<n>` labels.

use super::*;
use std::collections::BTreeSet;
use std::fmt::Write;

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    for rec in &m.records {
        let _ = write!(out, "record {}", rec.name);
        if let Some(t) = rec.vtable {
            let _ = write!(out, " vtable({})", m.tables[t].name);
        }
        let fields = rec
            .fields
            .iter()
            .map(|(n, t)| format!("{n}: {}", t.render()))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, " {{ {fields} }}");
    }
    for table in &m.tables {
        let entries = table
            .entries
            .iter()
            .map(|f| m.functions[*f].name.clone())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, "table {} {{ {entries} }}", table.name);
    }
    for g in &m.globals {
        let kw = if g.readonly { "roglobal" } else { "global" };
        let _ = write!(out, "{kw} {}: {}", g.name, g.ty.render());
        if g.init != GlobalInit::Zero {
            let _ = write!(out, " = {}", render_init(m, &g.init));
        }
        out.push('\n');
    }
    for f in &m.functions {
        out.push('\n');
        print_function(m, f, &mut out);
    }
    out
}

fn render_init(m: &Module, init: &GlobalInit) -> String {
    match init {
        GlobalInit::Zero => "0".into(),
        GlobalInit::Int(n) => n.to_string(),
        GlobalInit::Func(f) => format!("@{}", m.functions[*f].name),
        GlobalInit::Table(t) => format!("@{}", m.tables[*t].name),
        GlobalInit::Record(items) => {
            let inner = items
                .iter()
                .map(|i| render_init(m, i))
                .collect::<Vec<_>>()
                .join(", ");
            format!("{{ {inner} }}")
        }
    }
}

fn print_function(m: &Module, f: &Function, out: &mut String) {
    let params = f
        .params
        .iter()
        .map(|(n, t)| format!("{n}: {}", t.render()))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = write!(out, "fn {}({params})", f.name);
    if let Some(rt) = &f.ret {
        let _ = write!(out, " -> {}", rt.render());
    }
    if f.has_mac_slot {
        out.push_str(" macframe");
    }
    out.push_str(" {\n");
    for (n, t) in &f.locals {
        let _ = writeln!(out, "  local {n}: {}", t.render());
    }

    let mut targets = BTreeSet::new();
    for i in &f.body {
        match i {
            Instr::Br { then_to, else_to, .. } => {
                targets.insert(*then_to);
                targets.insert(*else_to);
            }
            Instr::Jmp { to } => {
                targets.insert(*to);
            }
            _ => {}
        }
    }
    let label = |idx: usize| format!("L{idx}");

    for (idx, instr) in f.body.iter().enumerate() {
        if targets.contains(&idx) {
            let _ = writeln!(out, "{}:", label(idx));
        }
        let _ = writeln!(out, "  {}", render_instr(m, f, instr, &label));
    }
    if targets.contains(&f.body.len()) {
        let _ = writeln!(out, "{}:", label(f.body.len()));
    }
    out.push_str("}\n");
}

fn op(m: &Module, f: &Function, operand: &Operand) -> String {
    match operand {
        Operand::Temp(t) => f.temp_names[*t].clone(),
        Operand::Const(n) => n.to_string(),
        Operand::AddrOfLocal(l) => format!("&{}", f.locals[*l].0),
        Operand::AddrOfGlobal(g) => format!("&{}", m.globals[*g].name),
    }
}

fn kind_token(kind: ClassKind) -> &'static str {
    match kind {
        ClassKind::FunctionPointer => "fn",
        ClassKind::VTablePointer => "vtable",
        ClassKind::ManualData => "data",
        ClassKind::ReturnAddress => "ret",
    }
}

fn mac_attrs(kind: ClassKind, sig: &Option<Signature>) -> String {
    let mut s = format!(", {}", kind_token(kind));
    if let Some(sig) = sig {
        let _ = write!(s, ", sig({})", sig.canonical());
    }
    s
}

fn args_str(m: &Module, f: &Function, args: &[Operand]) -> String {
    args.iter().map(|a| op(m, f, a)).collect::<Vec<_>>().join(", ")
}

fn dst_prefix(f: &Function, dst: &Option<TempId>) -> String {
    match dst {
        Some(t) => format!("{} = ", f.temp_names[*t]),
        None => String::new(),
    }
}

fn render_instr(
    m: &Module,
    f: &Function,
    instr: &Instr,
    label: &dyn Fn(usize) -> String,
) -> String {
    let t = |id: &TempId| f.temp_names[*id].clone();
    match instr {
        Instr::Const { dst, value } => format!("{} = const {value}", t(dst)),
        Instr::FuncRef { dst, func } => {
            format!("{} = funcref @{}", t(dst), m.functions[*func].name)
        }
        Instr::TableRef { dst, table } => {
            format!("{} = tableref @{}", t(dst), m.tables[*table].name)
        }
        Instr::FrameAddr { dst } => format!("{} = frameaddr", t(dst)),
        Instr::Bin { dst, op: b, lhs, rhs } => format!(
            "{} = {} {}, {}",
            t(dst),
            b.mnemonic(),
            op(m, f, lhs),
            op(m, f, rhs)
        ),
        Instr::Load { dst, ty, addr } => {
            format!("{} = load.{} {}", t(dst), ty.render(), op(m, f, addr))
        }
        Instr::Store { ty, addr, value } => format!(
            "store.{} {}, {}",
            ty.render(),
            op(m, f, addr),
            op(m, f, value)
        ),
        Instr::Cast { dst, ty, value } => {
            format!("{} = cast.{} {}", t(dst), ty.render(), op(m, f, value))
        }
        Instr::Alloca { dst, bytes } => format!("{} = alloca {bytes}", t(dst)),
        Instr::HeapAlloc { dst, bytes } => {
            format!("{} = heap_alloc {}", t(dst), op(m, f, bytes))
        }
        Instr::HeapFree { addr } => format!("heap_free {}", op(m, f, addr)),
        Instr::Call { dst, func, args } => format!(
            "{}call @{}({})",
            dst_prefix(f, dst),
            m.functions[*func].name,
            args_str(m, f, args)
        ),
        Instr::ICall { dst, target, args } => format!(
            "{}icall {}({})",
            dst_prefix(f, dst),
            op(m, f, target),
            args_str(m, f, args)
        ),
        Instr::MCall { dst, sig, obj, index, args } => format!(
            "{}mcall.{} {}, {} ({})",
            dst_prefix(f, dst),
            sig.canonical(),
            op(m, f, obj),
            op(m, f, index),
            args_str(m, f, args)
        ),
        Instr::TCall { dst, sig, table_ptr, index, args } => format!(
            "{}tcall.{} {}, {} ({})",
            dst_prefix(f, dst),
            sig.canonical(),
            op(m, f, table_ptr),
            op(m, f, index),
            args_str(m, f, args)
        ),
        Instr::TableGet { dst, table, index } => format!(
            "{} = tableget @{}, {}",
            t(dst),
            m.tables[*table].name,
            op(m, f, index)
        ),
        Instr::NewObj { dst, record } => {
            format!("{} = new_obj {}", t(dst), m.records[*record].name)
        }
        Instr::CopyRec { record, dst, src } => format!(
            "copy.rec({}) {}, {}",
            m.records[*record].name,
            op(m, f, dst),
            op(m, f, src)
        ),
        Instr::RawCopy { dst, src, len } => format!(
            "rawcopy {}, {}, {}",
            op(m, f, dst),
            op(m, f, src),
            op(m, f, len)
        ),
        Instr::CcfiRawCopy { dst, src, len, elem } => format!(
            "ccfi_rawcopy {}, {}, {}, {}",
            op(m, f, dst),
            op(m, f, src),
            op(m, f, len),
            elem.render()
        ),
        Instr::MacPtr { value, addr, kind, sig } => format!(
            "macptr {}, {}{}",
            op(m, f, value),
            op(m, f, addr),
            mac_attrs(*kind, sig)
        ),
        Instr::CheckPtr { dst, value, addr, kind, sig } => format!(
            "{} = checkptr {}, {}{}",
            t(dst),
            op(m, f, value),
            op(m, f, addr),
            mac_attrs(*kind, sig)
        ),
        Instr::AssertNz { value, kind } => format!(
            "ccfi_assert_nz {}, {}",
            op(m, f, value),
            kind_token(*kind)
        ),
        Instr::FrameMac => "frame_mac".into(),
        Instr::FrameCheck => "frame_check".into(),
        Instr::FramePad => "frame_pad".into(),
        Instr::LeafSave => "leaf_save".into(),
        Instr::LeafCheck => "leaf_check".into(),
        Instr::Br { cond, then_to, else_to } => format!(
            "br {}, {}, {}",
            op(m, f, cond),
            label(*then_to),
            label(*else_to)
        ),
        Instr::Jmp { to } => format!("jmp {}", label(*to)),
        Instr::AttackPoint { label: l } => format!("attack_point \"{l}\""),
        Instr::Print { value } => format!("print {}", op(m, f, value)),
        Instr::Ret { value: Some(v) } => format!("ret {}", op(m, f, v)),
        Instr::Ret { value: None } => "ret".into(),
        Instr::Halt { code } => format!("halt {}", op(m, f, code)),
    }
}
