use varsan::bench::{full_sanitized, planted_bugs, CUSTOM_ALLOCATOR};
use varsan::pir::{interpret, parse_program, ExecOptions, Program, Status, TrapInfo, TrapKind};
use varsan::sanitize::CheckConfig;

/// Maps a trap in an instrumented body back to the index of the original
/// instruction by skipping the inserted checks before it.
fn original_index(p: &Program, trap: &TrapInfo) -> usize {
    let f = p.function(&trap.function).unwrap();
    let b = &f.blocks[f.block_index(&trap.block).unwrap()];
    let at = trap.index.expect("traps inside a block");
    at - b.insts[..at].iter().filter(|i| i.is_check()).count()
}

#[test]
fn planted_bugs_trap_at_their_site() {
    let bugs = planted_bugs();
    assert!(bugs.len() >= 12);
    for bug in bugs {
        let original = parse_program(bug.source).unwrap();
        let clean = interpret(&original, &bug.input, None, &ExecOptions::default()).unwrap();
        assert!(
            !clean.trap_kind().is_some_and(|k| k.is_sanitizer_report()),
            "{} reported without checks",
            bug.name
        );

        let p = full_sanitized(&original, &CheckConfig::ALL).unwrap();
        let r = interpret(&p, &bug.input, None, &ExecOptions::default()).unwrap();
        let trap = r.trap.unwrap_or_else(|| panic!("{} did not trap", bug.name));
        assert_eq!(trap.kind, bug.kind, "{}", bug.name);
        assert_eq!(trap.function, bug.function, "{}", bug.name);
        assert_eq!(trap.block, bug.block, "{}", bug.name);
        assert_eq!(original_index(&p, &trap), bug.index, "{}", bug.name);
    }
}

#[test]
fn address_only_build_misses_ub_bugs() {
    for bug in planted_bugs() {
        let p = full_sanitized(&parse_program(bug.source).unwrap(), &CheckConfig::ADDRESS).unwrap();
        let r = interpret(&p, &bug.input, None, &ExecOptions::default()).unwrap();
        if bug.kind == TrapKind::AddressCheck {
            assert_eq!(r.trap_kind(), Some(TrapKind::AddressCheck), "{}", bug.name);
        } else {
            assert!(!r.trap_kind().is_some_and(|k| k.is_sanitizer_report()), "{}", bug.name);
        }
    }
}

#[test]
fn ub_recovery_reports_and_continues() {
    let bug = planted_bugs().into_iter().find(|b| b.name == "mul_overflow").unwrap();
    let p = full_sanitized(&parse_program(bug.source).unwrap(), &CheckConfig::ALL).unwrap();
    let opts = ExecOptions { ub_recovery: true, ..Default::default() };
    let r = interpret(&p, &bug.input, None, &opts).unwrap();
    assert_eq!(r.status, Status::Ok);
    assert_eq!(r.ub_reports.len(), 1);
    assert_eq!(r.ub_reports[0].kind, TrapKind::OverflowCheck);
}

#[test]
fn overflow_inside_a_sub_allocated_chunk_goes_unnoticed() {
    let p = full_sanitized(&parse_program(CUSTOM_ALLOCATOR).unwrap(), &CheckConfig::ALL).unwrap();
    let r = interpret(&p, &[], None, &ExecOptions::default()).unwrap();
    assert_eq!(r.status, Status::Ok, "{:?}", r.trap);
}
