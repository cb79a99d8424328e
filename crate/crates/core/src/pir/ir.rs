//! In-memory form of PIR programs.
//!
//! Registers are mutable virtual registers named by identifiers; there are no
//! phi nodes. Values are 64-bit two's-complement integers. Function references
//! produced by `take_address` are opaque integers outside the memory arena.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A whole program: globals, external declarations, slot layout and functions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub entry: String,
    pub globals: Vec<Global>,
    pub externs: Vec<String>,
    /// Dispatch-table layout; empty for programs without multi-variant functions.
    pub slots: Vec<SlotDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub size: u64,
    pub init: Vec<u8>,
}

/// One dispatch-table slot: the original function name and its variants in
/// variant-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotDecl {
    pub function: String,
    pub variants: Vec<(VariantKind, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ty {
    I64,
    Ptr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub ty: Ty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Original,
    Sanitized,
    Unsanitized,
    Coverage,
    Fast,
    Trampoline,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Original => "original",
            VariantKind::Sanitized => "sanitized",
            VariantKind::Unsanitized => "unsanitized",
            VariantKind::Coverage => "coverage",
            VariantKind::Fast => "fast",
            VariantKind::Trampoline => "trampoline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "original" => VariantKind::Original,
            "sanitized" => VariantKind::Sanitized,
            "unsanitized" => VariantKind::Unsanitized,
            "coverage" => VariantKind::Coverage,
            "fast" => VariantKind::Fast,
            "trampoline" => VariantKind::Trampoline,
            _ => return None,
        })
    }

    /// Whether sanitizer checks may appear in a body of this kind.
    pub fn may_carry_checks(self) -> bool {
        matches!(self, VariantKind::Sanitized | VariantKind::Coverage)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub address_taken: bool,
    pub external_visible: bool,
    pub no_memory_access: bool,
    pub cold: bool,
}

/// Which instrumentation passes have already run over a body.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Instrumented {
    pub address: bool,
    pub ub: bool,
    pub coverage: bool,
    pub profile: bool,
}

impl Instrumented {
    pub fn any(&self) -> bool {
        self.address || self.ub || self.coverage || self.profile
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Param>,
    pub blocks: Vec<BasicBlock>,
    pub attrs: Attributes,
    pub kind: VariantKind,
    pub instrumented: Instrumented,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub insts: Vec<Inst>,
    pub term: Terminator,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(String),
    Imm(i64),
}

impl Operand {
    pub fn reg(name: impl Into<String>) -> Self {
        Operand::Reg(name.into())
    }

    pub fn as_reg(&self) -> Option<&str> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => f.write_str(r),
            Operand::Imm(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    SDiv,
    SRem,
    Shl,
    Shr,
    And,
    Or,
    Xor,
}

impl BinOp {
    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::SDiv,
        BinOp::SRem,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::SDiv => "sdiv",
            BinOp::SRem => "srem",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    pub fn can_overflow(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Sub | BinOp::Mul)
    }

    pub fn is_shift(self) -> bool {
        matches!(self, BinOp::Shl | BinOp::Shr)
    }

    pub fn is_division(self) -> bool {
        matches!(self, BinOp::SDiv | BinOp::SRem)
    }

    /// Unchecked machine semantics: wrapping arithmetic, shift amounts taken
    /// modulo 64, division by zero yields 0.
    pub fn eval_raw(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::SDiv => {
                if b == 0 {
                    0
                } else {
                    a.wrapping_div(b)
                }
            }
            BinOp::SRem => {
                if b == 0 {
                    0
                } else {
                    a.wrapping_rem(b)
                }
            }
            BinOp::Shl => a.wrapping_shl(b as u32),
            BinOp::Shr => ((a as u64).wrapping_shr(b as u32)) as i64,
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpPred {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpPred {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpPred::Eq => "eq",
            CmpPred::Ne => "ne",
            CmpPred::Lt => "lt",
            CmpPred::Le => "le",
            CmpPred::Gt => "gt",
            CmpPred::Ge => "ge",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "eq" => CmpPred::Eq,
            "ne" => CmpPred::Ne,
            "lt" => CmpPred::Lt,
            "le" => CmpPred::Le,
            "gt" => CmpPred::Gt,
            "ge" => CmpPred::Ge,
            _ => return None,
        })
    }

    pub fn eval(self, a: i64, b: i64) -> bool {
        match self {
            CmpPred::Eq => a == b,
            CmpPred::Ne => a != b,
            CmpPred::Lt => a < b,
            CmpPred::Le => a <= b,
            CmpPred::Gt => a > b,
            CmpPred::Ge => a >= b,
        }
    }
}

/// Memory access width in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Byte,
    Quad,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::Byte => 1,
            Width::Quad => 8,
        }
    }

    pub fn from_bytes(n: i64) -> Option<Self> {
        match n {
            1 => Some(Width::Byte),
            8 => Some(Width::Quad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProfSite {
    Entry,
    Block,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Inst {
    Const { dst: String, value: i64 },
    Move { dst: String, src: Operand },
    Bin { dst: String, op: BinOp, lhs: Operand, rhs: Operand },
    Cmp { dst: String, pred: CmpPred, lhs: Operand, rhs: Operand },
    Select { dst: String, cond: Operand, if_true: Operand, if_false: Operand },
    /// `redzone` marks the sanitizer-widened form (`alloc_rz`).
    Alloc { dst: String, size: Operand, redzone: bool },
    /// `quarantine` marks the sanitizer form (`free_q`), which validates the pointer.
    Free { ptr: Operand, quarantine: bool },
    Load { dst: String, addr: Operand, width: Width },
    Store { addr: Operand, value: Operand, width: Width },
    Call { dst: Option<String>, callee: String, args: Vec<Operand> },
    CallSlot { dst: Option<String>, slot: u32, args: Vec<Operand> },
    CallRef { dst: Option<String>, target: Operand, args: Vec<Operand> },
    TakeAddress { dst: String, function: String },
    GlobalAddr { dst: String, global: String },
    CheckAddr { addr: Operand, width: Width },
    CheckOverflow { op: BinOp, lhs: Operand, rhs: Operand },
    CheckShift { amount: Operand },
    CheckDiv { lhs: Operand, rhs: Operand },
    CovHit { id: u32 },
    ProfCount { site: ProfSite, id: u32 },
    /// `read_input(index)`: input byte at index, 0 past the end.
    Input { dst: String, index: Operand },
    InputLen { dst: String },
    /// Appends the low byte of the value to the output.
    Write { value: Operand },
    /// Appends the decimal form of the value and a newline to the output.
    Print { value: Operand },
}

impl Inst {
    pub fn dst(&self) -> Option<&str> {
        match self {
            Inst::Const { dst, .. }
            | Inst::Move { dst, .. }
            | Inst::Bin { dst, .. }
            | Inst::Cmp { dst, .. }
            | Inst::Select { dst, .. }
            | Inst::Alloc { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::TakeAddress { dst, .. }
            | Inst::GlobalAddr { dst, .. }
            | Inst::Input { dst, .. }
            | Inst::InputLen { dst } => Some(dst),
            Inst::Call { dst, .. } | Inst::CallSlot { dst, .. } | Inst::CallRef { dst, .. } => {
                dst.as_deref()
            }
            _ => None,
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Inst::Const { .. }
            | Inst::TakeAddress { .. }
            | Inst::GlobalAddr { .. }
            | Inst::CovHit { .. }
            | Inst::ProfCount { .. }
            | Inst::InputLen { .. } => vec![],
            Inst::Move { src, .. } => vec![src],
            Inst::Bin { lhs, rhs, .. }
            | Inst::Cmp { lhs, rhs, .. }
            | Inst::CheckOverflow { lhs, rhs, .. }
            | Inst::CheckDiv { lhs, rhs } => vec![lhs, rhs],
            Inst::Select { cond, if_true, if_false, .. } => vec![cond, if_true, if_false],
            Inst::Alloc { size, .. } => vec![size],
            Inst::Free { ptr, .. } => vec![ptr],
            Inst::Load { addr, .. } | Inst::CheckAddr { addr, .. } => vec![addr],
            Inst::Store { addr, value, .. } => vec![addr, value],
            Inst::Call { args, .. } | Inst::CallSlot { args, .. } => args.iter().collect(),
            Inst::CallRef { target, args, .. } => {
                std::iter::once(target).chain(args.iter()).collect()
            }
            Inst::CheckShift { amount } => vec![amount],
            Inst::Input { index, .. } => vec![index],
            Inst::Write { value } | Inst::Print { value } => vec![value],
        }
    }

    pub fn is_memory_op(&self) -> bool {
        matches!(
            self,
            Inst::Alloc { .. } | Inst::Free { .. } | Inst::Load { .. } | Inst::Store { .. }
        )
    }

    pub fn is_check(&self) -> bool {
        matches!(
            self,
            Inst::CheckAddr { .. }
                | Inst::CheckOverflow { .. }
                | Inst::CheckShift { .. }
                | Inst::CheckDiv { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Terminator {
    Br(String),
    CondBr { cond: Operand, then_label: String, else_label: String },
    Return(Option<Operand>),
}

impl Terminator {
    pub fn successors(&self) -> Vec<&str> {
        match self {
            Terminator::Br(l) => vec![l],
            Terminator::CondBr { then_label, else_label, .. } => vec![then_label, else_label],
            Terminator::Return(_) => vec![],
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Terminator::Br(_) => vec![],
            Terminator::CondBr { cond, .. } => vec![cond],
            Terminator::Return(v) => v.iter().collect(),
        }
    }
}

impl Function {
    pub fn new(name: impl Into<String>, params: Vec<Param>, blocks: Vec<BasicBlock>) -> Self {
        let mut f = Function {
            name: name.into(),
            params,
            blocks,
            attrs: Attributes::default(),
            kind: VariantKind::Original,
            instrumented: Instrumented::default(),
        };
        f.attrs.no_memory_access = !f.has_memory_ops();
        f
    }

    pub fn insts(&self) -> impl Iterator<Item = &Inst> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    pub fn has_memory_ops(&self) -> bool {
        self.insts().any(Inst::is_memory_op)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len() + 1).sum()
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    /// Names of functions called directly from this body.
    pub fn direct_callees(&self) -> BTreeSet<&str> {
        self.insts()
            .filter_map(|i| match i {
                Inst::Call { callee, .. } => Some(callee.as_str()),
                _ => None,
            })
            .collect()
    }
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    /// Fills in attributes that are determined by program structure:
    /// `no_memory_access` for bodies without memory operations and
    /// `address_taken` for targets of `take_address`. Never clears an attribute.
    pub fn infer_attributes(&mut self) {
        let taken: BTreeSet<String> = self
            .functions
            .iter()
            .flat_map(|f| f.insts())
            .filter_map(|i| match i {
                Inst::TakeAddress { function, .. } => Some(function.clone()),
                _ => None,
            })
            .collect();
        for f in &mut self.functions {
            if !f.has_memory_ops() {
                f.attrs.no_memory_access = true;
            }
            if taken.contains(&f.name) {
                f.attrs.address_taken = true;
            }
        }
    }

    pub fn total_instructions(&self) -> usize {
        self.functions.iter().map(Function::instruction_count).sum()
    }
}
