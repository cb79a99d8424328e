//! The PIR intermediate representation: types, text format, validator and
//! interpreter.

mod ir;
pub mod memory;
pub mod opcode;
mod parse;
mod print;
mod validate;
pub mod vm;

pub use ir::*;
pub use opcode::{Opcode, OpcodeCounts};
pub use parse::{parse_program, parse_unvalidated, ParseError, Pos};
pub use print::{inst_text, serialize_function, serialize_program, term_text};
pub use validate::{validate, ValidationError};
pub use vm::{
    instruction_cost_report, interpret, overhead, CostReport, ExecError, ExecOptions, ExecResult, HostFn, Image, Machine, Status, TrapInfo, TrapKind, DISPATCH_COST,
};
