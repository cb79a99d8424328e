//! Address and UB check insertion, check stripping and a static completeness
//! scan.

use thiserror::Error;

use crate::pir::{BasicBlock, Function, Inst, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckConfig {
    pub enable_address: bool,
    pub enable_ub: bool,
    /// Runtime flag: keep executing after a failed UB check.
    pub ub_recovery: bool,
}

impl CheckConfig {
    pub const ADDRESS: CheckConfig = CheckConfig { enable_address: true, enable_ub: false, ub_recovery: false };
    pub const UB: CheckConfig = CheckConfig { enable_address: false, enable_ub: true, ub_recovery: false };
    pub const ALL: CheckConfig = CheckConfig { enable_address: true, enable_ub: true, ub_recovery: false };
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig::ADDRESS
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SanitizeError {
    #[error("function `{0}` is already address-instrumented")]
    AlreadyAddress(String),
    #[error("function `{0}` is already UB-instrumented")]
    AlreadyUb(String),
    #[error("function `{function}` has kind {kind}, which cannot carry checks")]
    WrongKind { function: String, kind: VariantKind },
    #[error("no sanitizer enabled")]
    NothingEnabled,
}

fn require_checkable(f: &Function) -> Result<(), SanitizeError> {
    if f.kind.may_carry_checks() {
        Ok(())
    } else {
        Err(SanitizeError::WrongKind { function: f.name.clone(), kind: f.kind })
    }
}

fn rewrite_blocks(f: &Function, mut each: impl FnMut(&Inst, &mut Vec<Inst>)) -> Vec<BasicBlock> {
    f.blocks
        .iter()
        .map(|b| {
            let mut insts = Vec::with_capacity(b.insts.len() * 2);
            for i in &b.insts {
                each(i, &mut insts);
            }
            BasicBlock { label: b.label.clone(), insts, term: b.term.clone() }
        })
        .collect()
}

/// Guards every load and store with `check_addr`, widens allocations with
/// redzones and routes frees through the quarantine.
pub fn apply_address_checks(f: &Function) -> Result<Function, SanitizeError> {
    require_checkable(f)?;
    if f.instrumented.address {
        return Err(SanitizeError::AlreadyAddress(f.name.clone()));
    }
    let blocks = rewrite_blocks(f, |i, out| match i {
        Inst::Load { addr, width, .. } | Inst::Store { addr, width, .. } => {
            out.push(Inst::CheckAddr { addr: addr.clone(), width: *width });
            out.push(i.clone());
        }
        Inst::Alloc { dst, size, .. } => {
            out.push(Inst::Alloc { dst: dst.clone(), size: size.clone(), redzone: true })
        }
        Inst::Free { ptr, .. } => out.push(Inst::Free { ptr: ptr.clone(), quarantine: true }),
        _ => out.push(i.clone()),
    });
    let mut g = Function { blocks, ..f.clone() };
    g.instrumented.address = true;
    Ok(g)
}

/// Guards signed add/sub/mul, shifts and divisions.
pub fn apply_ub_checks(f: &Function) -> Result<Function, SanitizeError> {
    require_checkable(f)?;
    if f.instrumented.ub {
        return Err(SanitizeError::AlreadyUb(f.name.clone()));
    }
    let blocks = rewrite_blocks(f, |i, out| {
        if let Inst::Bin { op, lhs, rhs, .. } = i {
            if op.can_overflow() {
                out.push(Inst::CheckOverflow { op: *op, lhs: lhs.clone(), rhs: rhs.clone() });
            } else if op.is_shift() {
                out.push(Inst::CheckShift { amount: rhs.clone() });
            } else if op.is_division() {
                out.push(Inst::CheckDiv { lhs: lhs.clone(), rhs: rhs.clone() });
            }
        }
        out.push(i.clone());
    });
    let mut g = Function { blocks, ..f.clone() };
    g.instrumented.ub = true;
    Ok(g)
}

/// Applies every sanitizer enabled in `cfg`.
pub fn apply_checks(f: &Function, cfg: &CheckConfig) -> Result<Function, SanitizeError> {
    if !cfg.enable_address && !cfg.enable_ub {
        return Err(SanitizeError::NothingEnabled);
    }
    let mut g = f.clone();
    if cfg.enable_address {
        g = apply_address_checks(&g)?;
    }
    if cfg.enable_ub {
        g = apply_ub_checks(&g)?;
    }
    Ok(g)
}

/// Which check families [`strip_checks`] removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripSet {
    pub address: bool,
    pub ub: bool,
}

impl StripSet {
    pub const ALL: StripSet = StripSet { address: true, ub: true };
    pub const ADDRESS: StripSet = StripSet { address: true, ub: false };
    pub const UB: StripSet = StripSet { address: false, ub: true };
}

/// Removes checks and sanitizer bookkeeping; everything else is untouched.
pub fn strip_checks(f: &Function, set: StripSet) -> Function {
    let blocks = rewrite_blocks(f, |i, out| match i {
        Inst::CheckAddr { .. } if set.address => {}
        Inst::CheckOverflow { .. } | Inst::CheckShift { .. } | Inst::CheckDiv { .. } if set.ub => {}
        Inst::Alloc { dst, size, redzone: true } if set.address => {
            out.push(Inst::Alloc { dst: dst.clone(), size: size.clone(), redzone: false })
        }
        Inst::Free { ptr, quarantine: true } if set.address => {
            out.push(Inst::Free { ptr: ptr.clone(), quarantine: false })
        }
        _ => out.push(i.clone()),
    });
    let mut g = Function { blocks, ..f.clone() };
    if set.address {
        g.instrumented.address = false;
    }
    if set.ub {
        g.instrumented.ub = false;
    }
    g
}

/// A checkable site lacking its guard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnguardedSite {
    pub block: String,
    pub index: usize,
}

fn guards(check: &Inst, site: &Inst) -> bool {
    match (check, site) {
        (Inst::CheckAddr { addr: a, width: w }, Inst::Load { addr, width, .. } | Inst::Store { addr, width, .. }) => {
            a == addr && w == width
        }
        (Inst::CheckOverflow { op: o, lhs: l, rhs: r }, Inst::Bin { op, lhs, rhs, .. }) => o == op && l == lhs && r == rhs,
        (Inst::CheckShift { amount }, Inst::Bin { op, rhs, .. }) => op.is_shift() && amount == rhs,
        (Inst::CheckDiv { lhs: l, rhs: r }, Inst::Bin { op, lhs, rhs, .. }) => op.is_division() && l == lhs && r == rhs,
        _ => false,
    }
}

fn needs_guard(i: &Inst, cfg: &CheckConfig) -> bool {
    match i {
        Inst::Load { .. } | Inst::Store { .. } => cfg.enable_address,
        Inst::Bin { op, .. } => {
            cfg.enable_ub && (op.can_overflow() || op.is_shift() || op.is_division())
        }
        _ => false,
    }
}

/// Static completeness scan: every site the configuration covers must be
/// immediately preceded by its check, and allocation bookkeeping must be on.
pub fn unguarded_sites(f: &Function, cfg: &CheckConfig) -> Vec<UnguardedSite> {
    let mut out = Vec::new();
    for b in &f.blocks {
        for (idx, i) in b.insts.iter().enumerate() {
            let missing = match i {
                Inst::Alloc { redzone: false, .. } | Inst::Free { quarantine: false, .. } => cfg.enable_address,
                _ if needs_guard(i, cfg) => {
                    // A UB-guarded op may also sit behind an unrelated check; look back
                    // over the contiguous run of checks before it.
                    !b.insts[..idx].iter().rev().take_while(|p| p.is_check()).any(|p| guards(p, i))
                }
                _ => false,
            };
            if missing {
                out.push(UnguardedSite { block: b.label.clone(), index: idx });
            }
        }
    }
    out
}

/// Number of sites in `f` that a sanitizer with `cfg` would instrument.
pub fn checkable_sites(f: &Function, cfg: &CheckConfig) -> usize {
    f.insts()
        .filter(|i| {
            needs_guard(i, cfg) || (cfg.enable_address && matches!(i, Inst::Alloc { .. } | Inst::Free { .. }))
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pir::{interpret, parse_program, ExecOptions, Program, TrapKind};

    fn sanitized(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    fn with_main(p: &Program, f: Function) -> Program {
        let mut q = p.clone();
        *q.function_mut("main").unwrap() = f;
        q
    }

    #[test]
    fn load_gains_one_check() {
        let p = sanitized("func main() kind=sanitized { b0: p = alloc 8; x = load64 p; return x }");
        let f = p.function("main").unwrap();
        let g = apply_address_checks(f).unwrap();
        assert_eq!(g.instruction_count(), f.instruction_count() + 1);
        assert!(matches!(g.blocks[0].insts[1], Inst::CheckAddr { .. }));
        assert!(unguarded_sites(&g, &CheckConfig::ADDRESS).is_empty());
        assert_eq!(unguarded_sites(f, &CheckConfig::ADDRESS).len(), 2);
    }

    #[test]
    fn store_past_end_traps() {
        let p = sanitized("func main() kind=sanitized { b0: p = alloc 16; q = add p 16; store8 q 1; return }");
        let g = apply_address_checks(p.function("main").unwrap()).unwrap();
        let r = interpret(&with_main(&p, g), &[], None, &ExecOptions::default()).unwrap();
        assert_eq!(r.trap_kind(), Some(TrapKind::AddressCheck));
    }

    #[test]
    fn use_after_free_traps_on_check() {
        let p = sanitized("func main() kind=sanitized { b0: p = alloc 16; free p; x = load8 p; return x }");
        let g = apply_address_checks(p.function("main").unwrap()).unwrap();
        let r = interpret(&with_main(&p, g), &[], None, &ExecOptions::default()).unwrap();
        assert_eq!(r.trap_kind(), Some(TrapKind::AddressCheck));
    }

    #[test]
    fn double_instrumentation_and_kind_errors() {
        let p = sanitized("func main() kind=sanitized { b0: return }");
        let g = apply_address_checks(p.function("main").unwrap()).unwrap();
        assert!(matches!(apply_address_checks(&g), Err(SanitizeError::AlreadyAddress(_))));
        let g = apply_ub_checks(&g).unwrap();
        assert!(matches!(apply_ub_checks(&g), Err(SanitizeError::AlreadyUb(_))));
        let q = sanitized("func main() kind=unsanitized { b0: return }");
        assert!(matches!(
            apply_address_checks(q.function("main").unwrap()),
            Err(SanitizeError::WrongKind { .. })
        ));
        let cfg = CheckConfig { enable_address: false, enable_ub: false, ub_recovery: false };
        assert_eq!(apply_checks(p.function("main").unwrap(), &cfg), Err(SanitizeError::NothingEnabled));
    }

    #[test]
    fn ub_checks_trap() {
        for (body, kind) in [
            ("a = const 9223372036854775807; b = add a 1", TrapKind::OverflowCheck),
            ("a = const 1; b = shl a 64", TrapKind::ShiftCheck),
            ("a = input 0; b = sdiv 7 a", TrapKind::DivCheck),
        ] {
            let src = format!("func main() kind=sanitized {{ b0: {body}; return b }}");
            let p = sanitized(&src);
            let g = apply_ub_checks(p.function("main").unwrap()).unwrap();
            let q = with_main(&p, g);
            let r = interpret(&q, &[], None, &ExecOptions::default()).unwrap();
            assert_eq!(r.trap_kind(), Some(kind), "{body}");
            let raw = interpret(&p, &[], None, &ExecOptions::default()).unwrap();
            assert_eq!(raw.trap_kind(), None);
        }
    }

    #[test]
    fn strip_inverts_and_partial_strip_keeps_ub() {
        let p = sanitized(
            "func main() kind=sanitized { b0: p = alloc 8; a = input 0; s = shl 1 a; store8 p s; free p; return s }",
        );
        let f = p.function("main").unwrap();
        assert_eq!(&strip_checks(f, StripSet::ALL), f);
        let g = apply_checks(f, &CheckConfig::ALL).unwrap();
        assert!(unguarded_sites(&g, &CheckConfig::ALL).is_empty());
        assert_eq!(&strip_checks(&g, StripSet::ALL), f);
        let h = strip_checks(&g, StripSet::ADDRESS);
        assert_eq!(h.insts().filter(|i| matches!(i, Inst::CheckShift { .. })).count(), 1);
        assert!(h.insts().all(|i| !matches!(i, Inst::CheckAddr { .. })));
        let r = interpret(&with_main(&p, h), &[70], None, &ExecOptions::default()).unwrap();
        assert_eq!(r.trap_kind(), Some(TrapKind::ShiftCheck));
    }
}
