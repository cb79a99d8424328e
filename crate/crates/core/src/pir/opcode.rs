//! Opcode classes used for instruction accounting and static cost weights.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::ir::{BinOp, Inst, Terminator};

macro_rules! opcodes {
    ($($variant:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum Opcode {
            $($variant),*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$variant),*];
            pub const COUNT: usize = Self::ALL.len();

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Opcode::$variant => $name),*
                }
            }

            pub fn parse(s: &str) -> Option<Opcode> {
                match s {
                    $($name => Some(Opcode::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    Const => "const",
    Move => "move",
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    SDiv => "sdiv",
    SRem => "srem",
    Shl => "shl",
    Shr => "shr",
    And => "and",
    Or => "or",
    Xor => "xor",
    Cmp => "cmp",
    Select => "select",
    Alloc => "alloc",
    AllocRz => "alloc_rz",
    Free => "free",
    FreeQ => "free_q",
    Load => "load",
    Store => "store",
    Call => "call",
    CallSlot => "call_slot",
    CallRef => "call_ref",
    TakeAddress => "take_address",
    GlobalAddr => "global_addr",
    CheckAddr => "check_addr",
    CheckOverflow => "check_overflow",
    CheckShift => "check_shift",
    CheckDiv => "check_div",
    CovHit => "cov_hit",
    ProfCount => "prof_count",
    Input => "input",
    InputLen => "input_len",
    Write => "write",
    Print => "print",
    Br => "br",
    CondBr => "cbr",
    Ret => "return",
    // Implicit read of a dispatch-table slot, charged once per dispatched call.
    SlotLoad => "slot_load",
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Opcode {
    pub fn of_binop(op: BinOp) -> Opcode {
        match op {
            BinOp::Add => Opcode::Add,
            BinOp::Sub => Opcode::Sub,
            BinOp::Mul => Opcode::Mul,
            BinOp::SDiv => Opcode::SDiv,
            BinOp::SRem => Opcode::SRem,
            BinOp::Shl => Opcode::Shl,
            BinOp::Shr => Opcode::Shr,
            BinOp::And => Opcode::And,
            BinOp::Or => Opcode::Or,
            BinOp::Xor => Opcode::Xor,
        }
    }

    pub fn of_inst(inst: &Inst) -> Opcode {
        match inst {
            Inst::Const { .. } => Opcode::Const,
            Inst::Move { .. } => Opcode::Move,
            Inst::Bin { op, .. } => Opcode::of_binop(*op),
            Inst::Cmp { .. } => Opcode::Cmp,
            Inst::Select { .. } => Opcode::Select,
            Inst::Alloc { redzone: false, .. } => Opcode::Alloc,
            Inst::Alloc { redzone: true, .. } => Opcode::AllocRz,
            Inst::Free { quarantine: false, .. } => Opcode::Free,
            Inst::Free { quarantine: true, .. } => Opcode::FreeQ,
            Inst::Load { .. } => Opcode::Load,
            Inst::Store { .. } => Opcode::Store,
            Inst::Call { .. } => Opcode::Call,
            Inst::CallSlot { .. } => Opcode::CallSlot,
            Inst::CallRef { .. } => Opcode::CallRef,
            Inst::TakeAddress { .. } => Opcode::TakeAddress,
            Inst::GlobalAddr { .. } => Opcode::GlobalAddr,
            Inst::CheckAddr { .. } => Opcode::CheckAddr,
            Inst::CheckOverflow { .. } => Opcode::CheckOverflow,
            Inst::CheckShift { .. } => Opcode::CheckShift,
            Inst::CheckDiv { .. } => Opcode::CheckDiv,
            Inst::CovHit { .. } => Opcode::CovHit,
            Inst::ProfCount { .. } => Opcode::ProfCount,
            Inst::Input { .. } => Opcode::Input,
            Inst::InputLen { .. } => Opcode::InputLen,
            Inst::Write { .. } => Opcode::Write,
            Inst::Print { .. } => Opcode::Print,
        }
    }

    pub fn of_terminator(term: &Terminator) -> Opcode {
        match term {
            Terminator::Br(_) => Opcode::Br,
            Terminator::CondBr { .. } => Opcode::CondBr,
            Terminator::Return(_) => Opcode::Ret,
        }
    }

    pub fn is_check(self) -> bool {
        matches!(
            self,
            Opcode::CheckAddr | Opcode::CheckOverflow | Opcode::CheckShift | Opcode::CheckDiv
        )
    }
}

/// Dense per-opcode counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpcodeCounts([u64; Opcode::COUNT]);

impl Default for OpcodeCounts {
    fn default() -> Self {
        OpcodeCounts([0; Opcode::COUNT])
    }
}

impl Index<Opcode> for OpcodeCounts {
    type Output = u64;
    fn index(&self, op: Opcode) -> &u64 {
        &self.0[op as usize]
    }
}

impl IndexMut<Opcode> for OpcodeCounts {
    fn index_mut(&mut self, op: Opcode) -> &mut u64 {
        &mut self.0[op as usize]
    }
}

impl OpcodeCounts {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn checks(&self) -> u64 {
        Opcode::ALL.iter().filter(|o| o.is_check()).map(|&o| self[o]).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Opcode, u64)> + '_ {
        Opcode::ALL.iter().map(move |&o| (o, self[o]))
    }

    /// Nonzero entries keyed by mnemonic.
    pub fn to_map(&self) -> BTreeMap<String, u64> {
        self.iter()
            .filter(|(_, n)| *n > 0)
            .map(|(o, n)| (o.as_str().to_string(), n))
            .collect()
    }
}
