//! Structural and dataflow validation of programs.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use super::ir::*;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("duplicate symbol `{0}`")]
    DuplicateName(String),
    #[error("entry function `{0}` does not exist")]
    MissingEntry(String),
    #[error("function `{0}` has no blocks")]
    EmptyFunction(String),
    #[error("function `{function}`: duplicate block label `{label}`")]
    DuplicateLabel { function: String, label: String },
    #[error("function `{function}`: duplicate parameter `{param}`")]
    DuplicateParam { function: String, param: String },
    #[error("function `{function}` block `{block}`: branch to unknown label `{target}`")]
    DanglingBranch { function: String, block: String, target: String },
    #[error("function `{function}` block `{block}`: use of undefined register `{register}`")]
    UndefinedRegister { function: String, block: String, register: String },
    #[error("function `{function}`: call to unknown function `{callee}`")]
    UnknownCallee { function: String, callee: String },
    #[error("function `{function}`: `{callee}` expects {expected} arguments, got {got}")]
    ArityMismatch { function: String, callee: String, expected: usize, got: usize },
    #[error("function `{function}`: take_address of `{target}`, which is not a defined function")]
    BadAddressTarget { function: String, target: String },
    #[error("function `{function}`: unknown global `{global}`")]
    UnknownGlobal { function: String, global: String },
    #[error("function `{function}`: slot {slot} is not declared")]
    UnknownSlot { function: String, slot: u32 },
    #[error("slot {slot}: {message}")]
    BadSlot { slot: usize, message: String },
    #[error("function `{0}`: no_memory_access attribute disagrees with its body")]
    MemoryAttributeMismatch(String),
    #[error("function `{function}`: `{opcode}` not allowed in a {kind} body")]
    MisplacedInstrumentation { function: String, opcode: String, kind: VariantKind },
    #[error("function `{0}`: trampoline bodies must be a single slot dispatch")]
    BadTrampoline(String),
}

pub fn validate(p: &Program) -> Result<(), ValidationError> {
    let mut seen = HashSet::new();
    for name in p
        .functions
        .iter()
        .map(|f| &f.name)
        .chain(p.externs.iter())
        .chain(p.globals.iter().map(|g| &g.name))
    {
        if !seen.insert(name.as_str()) {
            return Err(ValidationError::DuplicateName(name.clone()));
        }
    }
    if p.function(&p.entry).is_none() {
        return Err(ValidationError::MissingEntry(p.entry.clone()));
    }
    let arity: HashMap<&str, usize> = p.functions.iter().map(|f| (f.name.as_str(), f.params.len())).collect();
    let externs: HashSet<&str> = p.externs.iter().map(String::as_str).collect();
    let globals: HashSet<&str> = p.globals.iter().map(|g| g.name.as_str()).collect();

    let mut slot_arity = Vec::with_capacity(p.slots.len());
    for (i, s) in p.slots.iter().enumerate() {
        if s.variants.is_empty() {
            return Err(ValidationError::BadSlot { slot: i, message: "no variants".into() });
        }
        let mut n = None;
        for (_, v) in &s.variants {
            let a = *arity.get(v.as_str()).ok_or_else(|| ValidationError::BadSlot {
                slot: i,
                message: format!("variant `{v}` is not a function"),
            })?;
            if n.is_some_and(|n| n != a) {
                return Err(ValidationError::BadSlot { slot: i, message: "variants disagree on arity".into() });
            }
            n = Some(a);
        }
        slot_arity.push(n.unwrap_or(0));
    }

    for f in &p.functions {
        validate_function(f, &arity, &externs, &globals, &slot_arity)?;
    }
    Ok(())
}

fn validate_function(
    f: &Function,
    arity: &HashMap<&str, usize>,
    externs: &HashSet<&str>,
    globals: &HashSet<&str>,
    slot_arity: &[usize],
) -> Result<(), ValidationError> {
    let fname = || f.name.clone();
    if f.blocks.is_empty() {
        return Err(ValidationError::EmptyFunction(fname()));
    }
    let mut params = HashSet::new();
    for prm in &f.params {
        if !params.insert(prm.name.as_str()) {
            return Err(ValidationError::DuplicateParam { function: fname(), param: prm.name.clone() });
        }
    }
    let mut labels = HashMap::new();
    for (i, b) in f.blocks.iter().enumerate() {
        if labels.insert(b.label.as_str(), i).is_some() {
            return Err(ValidationError::DuplicateLabel { function: fname(), label: b.label.clone() });
        }
    }
    for b in &f.blocks {
        for t in b.term.successors() {
            if !labels.contains_key(t) {
                return Err(ValidationError::DanglingBranch {
                    function: fname(),
                    block: b.label.clone(),
                    target: t.to_string(),
                });
            }
        }
    }
    if f.attrs.no_memory_access == f.has_memory_ops() {
        return Err(ValidationError::MemoryAttributeMismatch(fname()));
    }

    for inst in f.insts() {
        let misplaced = (inst.is_check() && !f.kind.may_carry_checks())
            || (matches!(inst, Inst::CovHit { .. }) && f.kind != VariantKind::Coverage);
        if misplaced {
            return Err(ValidationError::MisplacedInstrumentation {
                function: fname(),
                opcode: super::opcode::Opcode::of_inst(inst).as_str().to_string(),
                kind: f.kind,
            });
        }
        let check_arity = |callee: &str, expected: usize, got: usize| {
            if expected != got {
                Err(ValidationError::ArityMismatch { function: fname(), callee: callee.to_string(), expected, got })
            } else {
                Ok(())
            }
        };
        match inst {
            Inst::Call { callee, args, .. } => match arity.get(callee.as_str()) {
                Some(&n) => check_arity(callee, n, args.len())?,
                None if externs.contains(callee.as_str()) => {}
                None => return Err(ValidationError::UnknownCallee { function: fname(), callee: callee.clone() }),
            },
            Inst::CallSlot { slot, args, .. } => match slot_arity.get(*slot as usize) {
                Some(&n) => check_arity(&format!("slot {slot}"), n, args.len())?,
                None => return Err(ValidationError::UnknownSlot { function: fname(), slot: *slot }),
            },
            Inst::TakeAddress { function, .. } if !arity.contains_key(function.as_str()) => {
                return Err(ValidationError::BadAddressTarget { function: fname(), target: function.clone() });
            }
            Inst::GlobalAddr { global, .. } if !globals.contains(global.as_str()) => {
                return Err(ValidationError::UnknownGlobal { function: fname(), global: global.clone() });
            }
            _ => {}
        }
    }

    if f.kind == VariantKind::Trampoline {
        let ok = f.blocks.len() == 1
            && f.blocks[0].insts.len() == 1
            && matches!(f.blocks[0].insts[0], Inst::CallSlot { .. });
        if !ok {
            return Err(ValidationError::BadTrampoline(fname()));
        }
    }

    check_definite_assignment(f, &labels)
}

/// Forward must-analysis: a register is available at a block entry only if it
/// is assigned on every path from the function entry.
fn check_definite_assignment(f: &Function, labels: &HashMap<&str, usize>) -> Result<(), ValidationError> {
    let n = f.blocks.len();
    let succ: Vec<Vec<usize>> = f
        .blocks
        .iter()
        .map(|b| b.term.successors().iter().map(|l| labels[l]).collect())
        .collect();
    let mut preds = vec![Vec::new(); n];
    for (i, ss) in succ.iter().enumerate() {
        for &s in ss {
            preds[s].push(i);
        }
    }
    let mut reachable = vec![false; n];
    let mut stack = vec![0];
    reachable[0] = true;
    while let Some(b) = stack.pop() {
        for &s in &succ[b] {
            if !reachable[s] {
                reachable[s] = true;
                stack.push(s);
            }
        }
    }

    let defs: Vec<BTreeSet<&str>> = f.blocks.iter().map(|b| b.insts.iter().filter_map(Inst::dst).collect()).collect();
    let universe: BTreeSet<&str> = defs.iter().flatten().copied().chain(f.params.iter().map(|p| p.name.as_str())).collect();
    let entry_in: BTreeSet<&str> = f.params.iter().map(|p| p.name.as_str()).collect();

    // None = top (not yet computed)
    let mut ins: Vec<Option<BTreeSet<&str>>> = vec![None; n];
    ins[0] = Some(entry_in.clone());
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..n {
            if !reachable[b] {
                continue;
            }
            let mut new_in: Option<BTreeSet<&str>> = if b == 0 { Some(entry_in.clone()) } else { None };
            for &p in &preds[b] {
                if !reachable[p] {
                    continue;
                }
                let Some(pin) = &ins[p] else { continue };
                let out: BTreeSet<&str> = pin.union(&defs[p]).copied().collect();
                new_in = Some(match new_in {
                    None => out,
                    Some(cur) => cur.intersection(&out).copied().collect(),
                });
            }
            let new_in = new_in.unwrap_or_else(|| universe.clone());
            if ins[b].as_ref() != Some(&new_in) {
                ins[b] = Some(new_in);
                changed = true;
            }
        }
    }

    for (b, block) in f.blocks.iter().enumerate() {
        if !reachable[b] {
            continue;
        }
        let mut avail = ins[b].clone().unwrap_or_default();
        let undefined = |op: &Operand, avail: &BTreeSet<&str>| match op {
            Operand::Reg(r) if !avail.contains(r.as_str()) => Some(r.clone()),
            _ => None,
        };
        for inst in &block.insts {
            for op in inst.operands() {
                if let Some(register) = undefined(op, &avail) {
                    return Err(ValidationError::UndefinedRegister {
                        function: f.name.clone(),
                        block: block.label.clone(),
                        register,
                    });
                }
            }
            if let Some(d) = inst.dst() {
                avail.insert(d);
            }
        }
        for op in block.term.operands() {
            if let Some(register) = undefined(op, &avail) {
                return Err(ValidationError::UndefinedRegister {
                    function: f.name.clone(),
                    block: block.label.clone(),
                    register,
                });
            }
        }
    }
    Ok(())
}
