//! Canonical text form of a program. `parse_program(serialize_program(p)) == p`.

use std::fmt::Write as _;

use super::ir::*;

pub fn serialize_program(p: &Program) -> String {
    let mut out = String::new();
    if p.entry != "main" {
        let _ = writeln!(out, "entry {}", p.entry);
    }
    for g in &p.globals {
        let _ = write!(out, "global {} {}", g.name, g.size);
        if !g.init.is_empty() {
            let bytes: Vec<String> = g.init.iter().map(u8::to_string).collect();
            let _ = write!(out, " = {}", bytes.join(", "));
        }
        out.push('\n');
    }
    for e in &p.externs {
        let _ = writeln!(out, "extern {e}");
    }
    for (i, s) in p.slots.iter().enumerate() {
        let vs: Vec<String> = s.variants.iter().map(|(k, n)| format!("{k}:{n}")).collect();
        let _ = writeln!(out, "slot {i} {} = {}", s.function, vs.join(", "));
    }
    for f in &p.functions {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&serialize_function(f));
    }
    out
}

pub fn serialize_function(f: &Function) -> String {
    let mut out = String::new();
    let params: Vec<String> = f
        .params
        .iter()
        .map(|p| format!("{}: {}", p.name, if p.ty == Ty::I64 { "i64" } else { "ptr" }))
        .collect();
    let _ = write!(out, "func {}({})", f.name, params.join(", "));
    if f.kind != VariantKind::Original {
        let _ = write!(out, " kind={}", f.kind);
    }
    let a = &f.attrs;
    for (set, name) in [
        (a.address_taken, "address_taken"),
        (a.external_visible, "external_visible"),
        (a.no_memory_access, "no_memory_access"),
        (a.cold, "cold"),
    ] {
        if set {
            let _ = write!(out, " {name}");
        }
    }
    let ins = &f.instrumented;
    let tags: Vec<&str> = [
        (ins.address, "address"),
        (ins.ub, "ub"),
        (ins.coverage, "coverage"),
        (ins.profile, "profile"),
    ]
    .into_iter()
    .filter_map(|(set, n)| set.then_some(n))
    .collect();
    if !tags.is_empty() {
        let _ = write!(out, " instr({})", tags.join(", "));
    }
    out.push_str(" {\n");
    for b in &f.blocks {
        let _ = writeln!(out, "{}:", b.label);
        for i in &b.insts {
            let _ = writeln!(out, "  {}", inst_text(i));
        }
        let _ = writeln!(out, "  {}", term_text(&b.term));
    }
    out.push_str("}\n");
    out
}

fn args_text(args: &[Operand]) -> String {
    args.iter().map(|a| format!(" {a}")).collect()
}

fn with_dst(dst: &Option<String>, rest: String) -> String {
    match dst {
        Some(d) => format!("{d} = {rest}"),
        None => rest,
    }
}

pub fn inst_text(i: &Inst) -> String {
    match i {
        Inst::Const { dst, value } => format!("{dst} = const {value}"),
        Inst::Move { dst, src } => format!("{dst} = move {src}"),
        Inst::Bin { dst, op, lhs, rhs } => format!("{dst} = {} {lhs} {rhs}", op.mnemonic()),
        Inst::Cmp { dst, pred, lhs, rhs } => format!("{dst} = cmp {} {lhs} {rhs}", pred.mnemonic()),
        Inst::Select { dst, cond, if_true, if_false } => {
            format!("{dst} = select {cond} {if_true} {if_false}")
        }
        Inst::Alloc { dst, size, redzone } => {
            format!("{dst} = {} {size}", if *redzone { "alloc_rz" } else { "alloc" })
        }
        Inst::Free { ptr, quarantine } => format!("{} {ptr}", if *quarantine { "free_q" } else { "free" }),
        Inst::Load { dst, addr, width } => {
            format!("{dst} = {} {addr}", if *width == Width::Byte { "load8" } else { "load64" })
        }
        Inst::Store { addr, value, width } => {
            format!("{} {addr} {value}", if *width == Width::Byte { "store8" } else { "store64" })
        }
        Inst::Call { dst, callee, args } => with_dst(dst, format!("call {callee}{}", args_text(args))),
        Inst::CallSlot { dst, slot, args } => with_dst(dst, format!("call_slot {slot}{}", args_text(args))),
        Inst::CallRef { dst, target, args } => with_dst(dst, format!("call_ref {target}{}", args_text(args))),
        Inst::TakeAddress { dst, function } => format!("{dst} = take_address {function}"),
        Inst::GlobalAddr { dst, global } => format!("{dst} = global_addr {global}"),
        Inst::CheckAddr { addr, width } => format!("check_addr {addr} {}", width.bytes()),
        Inst::CheckOverflow { op, lhs, rhs } => format!("check_overflow {} {lhs} {rhs}", op.mnemonic()),
        Inst::CheckShift { amount } => format!("check_shift {amount}"),
        Inst::CheckDiv { lhs, rhs } => format!("check_div {lhs} {rhs}"),
        Inst::CovHit { id } => format!("cov_hit {id}"),
        Inst::ProfCount { site, id } => format!(
            "prof_count {} {id}",
            match site {
                ProfSite::Entry => "entry",
                ProfSite::Block => "block",
            }
        ),
        Inst::Input { dst, index } => format!("{dst} = input {index}"),
        Inst::InputLen { dst } => format!("{dst} = input_len"),
        Inst::Write { value } => format!("write {value}"),
        Inst::Print { value } => format!("print {value}"),
    }
}

pub fn term_text(t: &Terminator) -> String {
    match t {
        Terminator::Br(l) => format!("br {l}"),
        Terminator::CondBr { cond, then_label, else_label } => format!("cbr {cond} {then_label} {else_label}"),
        Terminator::Return(None) => "return".to_string(),
        Terminator::Return(Some(v)) => format!("return {v}"),
    }
}
