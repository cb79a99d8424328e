//! Deterministic interpreter with exact instruction accounting.
//!
//! A [`Program`] is lowered once into an [`Image`] (registers, labels and
//! callees resolved to indices) and then executed by a [`Machine`]. Every
//! instruction and terminator costs one unit; a dispatch through the variant
//! table additionally charges [`DISPATCH_COST`] units under `slot_load`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ir::*;
use super::memory::{MemFault, Memory, DEFAULT_ARENA_CAPACITY};
use super::opcode::{Opcode, OpcodeCounts};
use super::validate::{validate, ValidationError};
use crate::dispatch::DispatchTable;

/// Extra cost units charged for reading a dispatch-table slot.
pub const DISPATCH_COST: u64 = 1;

/// Function references are encoded as integers far outside any arena.
const FUNC_REF_BASE: i64 = 0x7f00_0000_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapKind {
    AddressCheck,
    OverflowCheck,
    ShiftCheck,
    DivCheck,
    OobRaw,
    UafRaw,
    Unreachable,
}

impl TrapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrapKind::AddressCheck => "address_check",
            TrapKind::OverflowCheck => "overflow_check",
            TrapKind::ShiftCheck => "shift_check",
            TrapKind::DivCheck => "div_check",
            TrapKind::OobRaw => "oob_raw",
            TrapKind::UafRaw => "uaf_raw",
            TrapKind::Unreachable => "unreachable",
        }
    }

    pub fn is_sanitizer_report(self) -> bool {
        matches!(
            self,
            TrapKind::AddressCheck | TrapKind::OverflowCheck | TrapKind::ShiftCheck | TrapKind::DivCheck
        )
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a trap (or recovered UB report) happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapInfo {
    pub kind: TrapKind,
    pub function: String,
    pub variant: VariantKind,
    pub block: String,
    /// Instruction index within the block; `None` for the terminator.
    pub index: Option<usize>,
}

impl fmt::Display for TrapInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {} [{}] block {}", self.kind, self.function, self.variant, self.block)?;
        match self.index {
            Some(i) => write!(f, " inst {i}"),
            None => write!(f, " terminator"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Trap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub status: Status,
    pub trap: Option<TrapInfo>,
    pub output: Vec<u8>,
    pub return_value: Option<i64>,
    pub instructions_executed: u64,
    pub by_class: OpcodeCounts,
    /// Saturating per-id hit counters for `cov_hit`.
    pub coverage: Vec<u8>,
    pub profile_counters: Vec<u64>,
    /// Entries per function body, when call tracing is enabled.
    pub call_counts: BTreeMap<String, u64>,
    /// UB checks that failed while recovery was enabled.
    pub ub_reports: Vec<TrapInfo>,
}

impl ExecResult {
    pub fn trap_kind(&self) -> Option<TrapKind> {
        self.trap.as_ref().map(|t| t.kind)
    }

    pub fn dispatched_calls(&self) -> u64 {
        self.by_class[Opcode::SlotLoad] / DISPATCH_COST
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("program dispatches through slots but no dispatch table was supplied")]
    MissingTable,
    #[error("dispatch table has {table} slots, program declares {program}")]
    TableMismatch { table: usize, program: usize },
    #[error("call to unresolved external `{0}`")]
    UnresolvedExternal(String),
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub max_instructions: u64,
    pub max_call_depth: usize,
    pub arena_capacity: u64,
    /// Keep running after a failed UB check, recording it in `ub_reports`.
    pub ub_recovery: bool,
    pub trace_calls: bool,
    /// Invoke the step hook every this many cost units.
    pub hook_interval: Option<u64>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            max_instructions: 50_000_000,
            max_call_depth: 4096,
            arena_capacity: DEFAULT_ARENA_CAPACITY,
            ub_recovery: false,
            trace_calls: false,
            hook_interval: None,
        }
    }
}

pub type HostFn = Arc<dyn Fn(&[i64]) -> i64 + Send + Sync>;

#[derive(Debug, Clone, Copy)]
enum V {
    R(u32),
    I(i64),
}

#[derive(Debug, Clone)]
enum CInst {
    Const(u32, i64),
    Move(u32, V),
    Bin(u32, BinOp, V, V),
    Cmp(u32, CmpPred, V, V),
    Select(u32, V, V, V),
    Alloc(u32, V, bool),
    Free(V, bool),
    Load(u32, V, Width),
    Store(V, V, Width),
    Call(Option<u32>, u32, Box<[V]>),
    CallExtern(Option<u32>, u32, Box<[V]>),
    CallSlot(Option<u32>, u32, Box<[V]>),
    CallRef(Option<u32>, V, Box<[V]>),
    FuncRef(u32, u32),
    GlobalAddr(u32, i64),
    CheckAddr(V, Width),
    CheckOverflow(BinOp, V, V),
    CheckShift(V),
    CheckDiv(V, V),
    Cov(u32),
    Prof(u32),
    Input(u32, V),
    InputLen(u32),
    Write(V),
    Print(V),
}

#[derive(Debug, Clone)]
enum CTerm {
    Br(u32),
    CondBr(V, u32, u32),
    Ret(Option<V>),
}

#[derive(Debug, Clone)]
struct CBlock {
    label: String,
    insts: Vec<CInst>,
    ops: Vec<Opcode>,
    term: CTerm,
    term_op: Opcode,
}

#[derive(Debug, Clone)]
struct CFunc {
    name: String,
    kind: VariantKind,
    nparams: usize,
    nregs: usize,
    blocks: Vec<CBlock>,
    /// Set for trampolines: the slot they forward to.
    trampoline_slot: Option<u32>,
}

/// A validated program lowered for execution. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct Image {
    funcs: Vec<CFunc>,
    entry: u32,
    slot_variants: Vec<Vec<u32>>,
    externs: Vec<String>,
    globals: Vec<(u64, Vec<u8>)>,
    cov_len: usize,
    prof_len: usize,
}

impl Image {
    pub fn compile(p: &Program) -> Result<Image, ExecError> {
        validate(p)?;
        let func_ids: HashMap<&str, u32> =
            p.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i as u32)).collect();
        let extern_ids: HashMap<&str, u32> =
            p.externs.iter().enumerate().map(|(i, e)| (e.as_str(), i as u32)).collect();

        // Globals are laid out with redzones before any dynamic allocation.
        let mut layout = Memory::new(u64::MAX);
        let mut global_addr = HashMap::new();
        let mut globals = Vec::new();
        for g in &p.globals {
            let addr = layout.alloc(g.size as i64, true).expect("global layout");
            global_addr.insert(g.name.as_str(), addr as i64);
            globals.push((g.size, g.init.clone()));
        }

        let mut cov_len = 0usize;
        let mut prof_len = 0usize;
        let mut funcs = Vec::with_capacity(p.functions.len());
        for f in &p.functions {
            let mut regs: HashMap<&str, u32> = HashMap::new();
            for prm in &f.params {
                let n = regs.len() as u32;
                regs.entry(prm.name.as_str()).or_insert(n);
            }
            for i in f.insts() {
                if let Some(d) = i.dst() {
                    let n = regs.len() as u32;
                    regs.entry(d).or_insert(n);
                }
            }
            let labels: HashMap<&str, u32> =
                f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i as u32)).collect();
            let r = |name: &str| regs[name];
            let v = |op: &Operand| match op {
                Operand::Reg(n) => V::R(regs[n.as_str()]),
                Operand::Imm(i) => V::I(*i),
            };
            let vs = |ops: &[Operand]| ops.iter().map(v).collect::<Box<[V]>>();
            let mut blocks = Vec::with_capacity(f.blocks.len());
            for b in &f.blocks {
                let mut insts = Vec::with_capacity(b.insts.len());
                let mut ops = Vec::with_capacity(b.insts.len());
                for i in &b.insts {
                    ops.push(Opcode::of_inst(i));
                    insts.push(match i {
                        Inst::Const { dst, value } => CInst::Const(r(dst), *value),
                        Inst::Move { dst, src } => CInst::Move(r(dst), v(src)),
                        Inst::Bin { dst, op, lhs, rhs } => CInst::Bin(r(dst), *op, v(lhs), v(rhs)),
                        Inst::Cmp { dst, pred, lhs, rhs } => CInst::Cmp(r(dst), *pred, v(lhs), v(rhs)),
                        Inst::Select { dst, cond, if_true, if_false } => {
                            CInst::Select(r(dst), v(cond), v(if_true), v(if_false))
                        }
                        Inst::Alloc { dst, size, redzone } => CInst::Alloc(r(dst), v(size), *redzone),
                        Inst::Free { ptr, quarantine } => CInst::Free(v(ptr), *quarantine),
                        Inst::Load { dst, addr, width } => CInst::Load(r(dst), v(addr), *width),
                        Inst::Store { addr, value, width } => CInst::Store(v(addr), v(value), *width),
                        Inst::Call { dst, callee, args } => {
                            let d = dst.as_deref().map(r);
                            match func_ids.get(callee.as_str()) {
                                Some(&id) => CInst::Call(d, id, vs(args)),
                                None => CInst::CallExtern(d, extern_ids[callee.as_str()], vs(args)),
                            }
                        }
                        Inst::CallSlot { dst, slot, args } => CInst::CallSlot(dst.as_deref().map(r), *slot, vs(args)),
                        Inst::CallRef { dst, target, args } => {
                            CInst::CallRef(dst.as_deref().map(r), v(target), vs(args))
                        }
                        Inst::TakeAddress { dst, function } => CInst::FuncRef(r(dst), func_ids[function.as_str()]),
                        Inst::GlobalAddr { dst, global } => CInst::GlobalAddr(r(dst), global_addr[global.as_str()]),
                        Inst::CheckAddr { addr, width } => CInst::CheckAddr(v(addr), *width),
                        Inst::CheckOverflow { op, lhs, rhs } => CInst::CheckOverflow(*op, v(lhs), v(rhs)),
                        Inst::CheckShift { amount } => CInst::CheckShift(v(amount)),
                        Inst::CheckDiv { lhs, rhs } => CInst::CheckDiv(v(lhs), v(rhs)),
                        Inst::CovHit { id } => {
                            cov_len = cov_len.max(*id as usize + 1);
                            CInst::Cov(*id)
                        }
                        Inst::ProfCount { id, .. } => {
                            prof_len = prof_len.max(*id as usize + 1);
                            CInst::Prof(*id)
                        }
                        Inst::Input { dst, index } => CInst::Input(r(dst), v(index)),
                        Inst::InputLen { dst } => CInst::InputLen(r(dst)),
                        Inst::Write { value } => CInst::Write(v(value)),
                        Inst::Print { value } => CInst::Print(v(value)),
                    });
                }
                let term = match &b.term {
                    Terminator::Br(l) => CTerm::Br(labels[l.as_str()]),
                    Terminator::CondBr { cond, then_label, else_label } => {
                        CTerm::CondBr(v(cond), labels[then_label.as_str()], labels[else_label.as_str()])
                    }
                    Terminator::Return(val) => CTerm::Ret(val.as_ref().map(v)),
                };
                blocks.push(CBlock {
                    label: b.label.clone(),
                    insts,
                    ops,
                    term,
                    term_op: Opcode::of_terminator(&b.term),
                });
            }
            let trampoline_slot = match (f.kind, f.blocks[0].insts.first()) {
                (VariantKind::Trampoline, Some(Inst::CallSlot { slot, .. })) => Some(*slot),
                _ => None,
            };
            funcs.push(CFunc {
                name: f.name.clone(),
                kind: f.kind,
                nparams: f.params.len(),
                nregs: regs.len().max(1),
                blocks,
                trampoline_slot,
            });
        }
        let slot_variants = p
            .slots
            .iter()
            .map(|s| s.variants.iter().map(|(_, n)| func_ids[n.as_str()]).collect())
            .collect();
        Ok(Image {
            funcs,
            entry: func_ids[p.entry.as_str()],
            slot_variants,
            externs: p.externs.clone(),
            globals,
            cov_len,
            prof_len,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_variants.len()
    }

    pub fn coverage_len(&self) -> usize {
        self.cov_len
    }

    pub fn profile_len(&self) -> usize {
        self.prof_len
    }

    pub fn function_names(&self) -> impl Iterator<Item = &str> {
        self.funcs.iter().map(|f| f.name.as_str())
    }
}

struct Frame {
    func: u32,
    block: u32,
    ip: u32,
    base: usize,
    ret: Option<u32>,
}

enum Flow {
    Continue,
    Trap(TrapKind),
    Done(Option<i64>),
}

/// Reusable execution state for one [`Image`].
pub struct Machine<'i> {
    image: &'i Image,
    opts: ExecOptions,
    externs: HashMap<u32, HostFn>,
    mem: Memory,
    regs: Vec<i64>,
    frames: Vec<Frame>,
    scratch: Vec<i64>,
}

impl<'i> Machine<'i> {
    pub fn new(image: &'i Image, opts: ExecOptions) -> Self {
        Machine {
            image,
            mem: Memory::new(opts.arena_capacity),
            opts,
            externs: HashMap::new(),
            regs: Vec::new(),
            frames: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn options(&self) -> &ExecOptions {
        &self.opts
    }

    /// Binds a host implementation for a declared external function.
    pub fn bind_extern(&mut self, name: &str, f: HostFn) -> bool {
        match self.image.externs.iter().position(|e| e == name) {
            Some(i) => {
                self.externs.insert(i as u32, f);
                true
            }
            None => false,
        }
    }

    pub fn run(&mut self, input: &[u8], table: Option<&DispatchTable>) -> Result<ExecResult, ExecError> {
        self.run_with_hook(input, table, &mut |_| {})
    }

    /// Runs the entry function. `hook` receives the cost units executed so far
    /// every `hook_interval` units.
    pub fn run_with_hook(
        &mut self,
        input: &[u8],
        table: Option<&DispatchTable>,
        hook: &mut dyn FnMut(u64),
    ) -> Result<ExecResult, ExecError> {
        let image = self.image;
        if !image.slot_variants.is_empty() {
            match table {
                None => return Err(ExecError::MissingTable),
                Some(t) if t.len() != image.slot_variants.len() => {
                    return Err(ExecError::TableMismatch { table: t.len(), program: image.slot_variants.len() })
                }
                _ => {}
            }
        }
        self.mem.reset();
        for (size, init) in &image.globals {
            let addr = self.mem.alloc(*size as i64, true).expect("globals fit in arena");
            self.mem.write_bytes(addr, init);
        }
        self.regs.clear();
        self.frames.clear();

        let mut res = ExecResult {
            status: Status::Ok,
            trap: None,
            output: Vec::new(),
            return_value: None,
            instructions_executed: 0,
            by_class: OpcodeCounts::default(),
            coverage: vec![0; image.cov_len],
            profile_counters: vec![0; image.prof_len],
            call_counts: BTreeMap::new(),
            ub_reports: Vec::new(),
        };
        let mut calls = vec![0u64; if self.opts.trace_calls { image.funcs.len() } else { 0 }];

        // The entry is invoked like external code and may itself be a trampoline.
        let entry = self.through_trampoline(image.entry, table, &mut res)?;
        self.push_frame(entry, &[], None);
        if let Some(c) = calls.get_mut(entry as usize) {
            *c += 1;
        }

        let max = self.opts.max_instructions;
        let interval = self.opts.hook_interval.filter(|&i| i > 0);
        let mut next_hook = interval.unwrap_or(u64::MAX);

        let outcome = loop {
            if res.instructions_executed >= next_hook {
                hook(res.instructions_executed);
                next_hook = res.instructions_executed + interval.unwrap_or(u64::MAX);
            }
            if res.instructions_executed >= max {
                break Flow::Trap(TrapKind::Unreachable);
            }
            let fr = self.frames.last().expect("active frame");
            let func = &image.funcs[fr.func as usize];
            let block = &func.blocks[fr.block as usize];
            let ip = fr.ip as usize;
            let base = fr.base;
            if ip < block.insts.len() {
                let op = block.ops[ip];
                res.by_class[op] += 1;
                res.instructions_executed += 1;
                self.frames.last_mut().expect("frame").ip += 1;
                match self.step(&block.insts[ip], base, input, table, &mut res, &mut calls)? {
                    Flow::Continue => {}
                    Flow::Trap(kind) if self.opts.ub_recovery && is_ub(kind) => {
                        let info = self.trap_info(kind, Some(ip));
                        res.ub_reports.push(info);
                    }
                    other => {
                        // Report the faulting instruction, not the next one.
                        self.frames.last_mut().expect("frame").ip -= 1;
                        break other;
                    }
                }
            } else {
                res.by_class[block.term_op] += 1;
                res.instructions_executed += 1;
                match &block.term {
                    CTerm::Br(t) => {
                        let fr = self.frames.last_mut().expect("frame");
                        fr.block = *t;
                        fr.ip = 0;
                    }
                    CTerm::CondBr(c, t, e) => {
                        let target = if self.val(*c, base) != 0 { *t } else { *e };
                        let fr = self.frames.last_mut().expect("frame");
                        fr.block = target;
                        fr.ip = 0;
                    }
                    CTerm::Ret(v) => {
                        let value = v.map(|v| self.val(v, base)).unwrap_or(0);
                        let fr = self.frames.pop().expect("frame");
                        self.regs.truncate(fr.base);
                        if self.frames.is_empty() {
                            break Flow::Done(Some(value));
                        }
                        if let Some(d) = fr.ret {
                            let b = self.frames.last().expect("caller").base;
                            self.regs[b + d as usize] = value;
                        }
                    }
                }
            }
        };

        match outcome {
            Flow::Done(v) => res.return_value = v,
            Flow::Trap(kind) => {
                res.status = Status::Trap;
                res.trap = Some(self.trap_info(kind, None));
            }
            Flow::Continue => unreachable!(),
        }
        if self.opts.trace_calls {
            res.call_counts = calls
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(i, &n)| (image.funcs[i].name.clone(), n))
                .collect();
        }
        Ok(res)
    }

    fn trap_info(&self, kind: TrapKind, index: Option<usize>) -> TrapInfo {
        let fr = self.frames.last().expect("frame at trap");
        let func = &self.image.funcs[fr.func as usize];
        let block = &func.blocks[fr.block as usize];
        let at = index.unwrap_or(fr.ip as usize);
        TrapInfo {
            kind,
            function: func.name.clone(),
            variant: func.kind,
            block: block.label.clone(),
            index: (at < block.insts.len()).then_some(at),
        }
    }

    #[inline]
    fn val(&self, v: V, base: usize) -> i64 {
        match v {
            V::R(r) => self.regs[base + r as usize],
            V::I(i) => i,
        }
    }

    #[inline]
    fn set(&mut self, base: usize, r: u32, value: i64) {
        self.regs[base + r as usize] = value;
    }

    fn push_frame(&mut self, func: u32, args: &[i64], ret: Option<u32>) {
        let f = &self.image.funcs[func as usize];
        let base = self.regs.len();
        self.regs.resize(base + f.nregs, 0);
        self.regs[base..base + f.nparams].copy_from_slice(&args[..f.nparams]);
        self.frames.push(Frame { func, block: 0, ip: 0, base, ret });
    }

    fn call(&mut self, func: u32, args: &[V], base: usize, ret: Option<u32>, calls: &mut [u64]) -> Flow {
        if self.frames.len() >= self.opts.max_call_depth {
            return Flow::Trap(TrapKind::Unreachable);
        }
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        scratch.extend(args.iter().map(|&a| self.val(a, base)));
        self.push_frame(func, &scratch, ret);
        self.scratch = scratch;
        if let Some(c) = calls.get_mut(func as usize) {
            *c += 1;
        }
        Flow::Continue
    }

    /// A trampoline is a tail jump through its slot: entering one costs the
    /// slot read and lands directly in the active variant.
    fn through_trampoline(&self, f: u32, table: Option<&DispatchTable>, res: &mut ExecResult) -> Result<u32, ExecError> {
        let image = self.image;
        match image.funcs[f as usize].trampoline_slot {
            None => Ok(f),
            Some(slot) => {
                let t = table.ok_or(ExecError::MissingTable)?;
                res.by_class[Opcode::SlotLoad] += DISPATCH_COST;
                res.instructions_executed += DISPATCH_COST;
                Ok(image.slot_variants[slot as usize][t.get(slot as usize) as usize])
            }
        }
    }

    fn mem_fault(f: MemFault) -> Flow {
        Flow::Trap(match f {
            MemFault::OutOfArena => TrapKind::OobRaw,
            MemFault::Freed => TrapKind::UafRaw,
            MemFault::Checked => TrapKind::AddressCheck,
        })
    }

    fn step(
        &mut self,
        inst: &CInst,
        base: usize,
        input: &[u8],
        table: Option<&DispatchTable>,
        res: &mut ExecResult,
        calls: &mut [u64],
    ) -> Result<Flow, ExecError> {
        let image = self.image;
        Ok(match inst {
            CInst::Const(d, c) => {
                self.set(base, *d, *c);
                Flow::Continue
            }
            CInst::Move(d, s) => {
                let x = self.val(*s, base);
                self.set(base, *d, x);
                Flow::Continue
            }
            CInst::Bin(d, op, a, b) => {
                let x = op.eval_raw(self.val(*a, base), self.val(*b, base));
                self.set(base, *d, x);
                Flow::Continue
            }
            CInst::Cmp(d, p, a, b) => {
                let x = p.eval(self.val(*a, base), self.val(*b, base)) as i64;
                self.set(base, *d, x);
                Flow::Continue
            }
            CInst::Select(d, c, t, e) => {
                let x = if self.val(*c, base) != 0 { self.val(*t, base) } else { self.val(*e, base) };
                self.set(base, *d, x);
                Flow::Continue
            }
            CInst::Alloc(d, size, rz) => match self.mem.alloc(self.val(*size, base), *rz) {
                Ok(p) => {
                    self.set(base, *d, p as i64);
                    Flow::Continue
                }
                Err(f) => Self::mem_fault(f),
            },
            CInst::Free(p, q) => match self.mem.free(self.val(*p, base), *q) {
                Ok(()) => Flow::Continue,
                Err(f) => Self::mem_fault(f),
            },
            CInst::Load(d, a, w) => match self.mem.load(self.val(*a, base), *w) {
                Ok(x) => {
                    self.set(base, *d, x);
                    Flow::Continue
                }
                Err(f) => Self::mem_fault(f),
            },
            CInst::Store(a, v, w) => {
                let (addr, value) = (self.val(*a, base), self.val(*v, base));
                match self.mem.store(addr, value, *w) {
                    Ok(()) => Flow::Continue,
                    Err(f) => Self::mem_fault(f),
                }
            }
            CInst::Call(d, f, args) => {
                let f = self.through_trampoline(*f, table, res)?;
                self.call(f, args, base, *d, calls)
            }
            CInst::CallSlot(d, slot, args) => {
                res.by_class[Opcode::SlotLoad] += DISPATCH_COST;
                res.instructions_executed += DISPATCH_COST;
                let t = table.ok_or(ExecError::MissingTable)?;
                let variant = t.get(*slot as usize);
                let f = image.slot_variants[*slot as usize][variant as usize];
                self.call(f, args, base, *d, calls)
            }
            CInst::CallRef(d, target, args) => {
                let raw = self.val(*target, base).wrapping_sub(FUNC_REF_BASE);
                match usize::try_from(raw).ok().filter(|&i| i < image.funcs.len()) {
                    Some(f) if image.funcs[f].nparams == args.len() => {
                        let f = self.through_trampoline(f as u32, table, res)?;
                        self.call(f, args, base, *d, calls)
                    }
                    // Jumping to a non-function is a wild control transfer.
                    _ => Flow::Trap(TrapKind::OobRaw),
                }
            }
            CInst::CallExtern(d, e, args) => {
                let Some(host) = self.externs.get(e).cloned() else {
                    return Err(ExecError::UnresolvedExternal(image.externs[*e as usize].clone()));
                };
                let argv: Vec<i64> = args.iter().map(|&a| self.val(a, base)).collect();
                let x = host(&argv);
                if let Some(d) = d {
                    self.set(base, *d, x);
                }
                Flow::Continue
            }
            CInst::FuncRef(d, f) => {
                self.set(base, *d, FUNC_REF_BASE + *f as i64);
                Flow::Continue
            }
            CInst::GlobalAddr(d, a) => {
                self.set(base, *d, *a);
                Flow::Continue
            }
            CInst::CheckAddr(a, w) => {
                if self.mem.shadow.check(self.val(*a, base), w.bytes()) {
                    Flow::Continue
                } else {
                    Flow::Trap(TrapKind::AddressCheck)
                }
            }
            CInst::CheckOverflow(op, a, b) => {
                let (x, y) = (self.val(*a, base), self.val(*b, base));
                let ok = match op {
                    BinOp::Add => x.checked_add(y).is_some(),
                    BinOp::Sub => x.checked_sub(y).is_some(),
                    BinOp::Mul => x.checked_mul(y).is_some(),
                    _ => true,
                };
                if ok {
                    Flow::Continue
                } else {
                    Flow::Trap(TrapKind::OverflowCheck)
                }
            }
            CInst::CheckShift(a) => {
                if (0..64).contains(&self.val(*a, base)) {
                    Flow::Continue
                } else {
                    Flow::Trap(TrapKind::ShiftCheck)
                }
            }
            CInst::CheckDiv(a, b) => {
                let (x, y) = (self.val(*a, base), self.val(*b, base));
                if y == 0 || (x == i64::MIN && y == -1) {
                    Flow::Trap(TrapKind::DivCheck)
                } else {
                    Flow::Continue
                }
            }
            CInst::Cov(id) => {
                let c = &mut res.coverage[*id as usize];
                *c = c.saturating_add(1);
                Flow::Continue
            }
            CInst::Prof(id) => {
                res.profile_counters[*id as usize] += 1;
                Flow::Continue
            }
            CInst::Input(d, i) => {
                let idx = self.val(*i, base);
                let b = usize::try_from(idx).ok().and_then(|i| input.get(i)).copied().unwrap_or(0);
                self.set(base, *d, b as i64);
                Flow::Continue
            }
            CInst::InputLen(d) => {
                self.set(base, *d, input.len() as i64);
                Flow::Continue
            }
            CInst::Write(v) => {
                res.output.push(self.val(*v, base) as u8);
                Flow::Continue
            }
            CInst::Print(v) => {
                let s = format!("{}\n", self.val(*v, base));
                res.output.extend_from_slice(s.as_bytes());
                Flow::Continue
            }
        })
    }
}

fn is_ub(kind: TrapKind) -> bool {
    matches!(kind, TrapKind::OverflowCheck | TrapKind::ShiftCheck | TrapKind::DivCheck)
}

/// Validates, lowers and runs `program` once.
pub fn interpret(
    program: &Program,
    input: &[u8],
    table: Option<&DispatchTable>,
    opts: &ExecOptions,
) -> Result<ExecResult, ExecError> {
    let image = Image::compile(program)?;
    Machine::new(&image, opts.clone()).run(input, table)
}

/// Total and per-class instruction counts of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total: u64,
    pub checks: u64,
    pub dispatch: u64,
    pub by_class: BTreeMap<String, u64>,
}

pub fn instruction_cost_report(r: &ExecResult) -> CostReport {
    CostReport {
        total: r.instructions_executed,
        checks: r.by_class.checks(),
        dispatch: r.by_class[Opcode::SlotLoad],
        by_class: r.by_class.to_map(),
    }
}

/// Relative overhead of `a` over the baseline `b`: `a/b - 1`.
pub fn overhead(a: u64, b: u64) -> f64 {
    a as f64 / b as f64 - 1.0
}
