//! Parser for the line-oriented PIR text format.
//!
//! Statements inside a function body end at a newline or `;`. Items at the top
//! level start with a keyword (`func`, `global`, `extern`, `entry`, `slot`).
//! Everything after `#` on a line is a comment.

use std::fmt;

use thiserror::Error;

use super::ir::*;
use super::validate::{validate, ValidationError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: Pos, message: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Pos,
}

fn syntax(pos: &Pos, message: impl Into<String>) -> ParseError {
    ParseError::Syntax { pos: pos.clone(), message: message.into() }
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let pos = Pos { line: line_no, col: i + 1 };
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), pos });
                continue;
            }
            if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let value = parse_int(&s).ok_or_else(|| syntax(&pos, format!("bad integer `{s}`")))?;
                out.push(Token { tok: Tok::Int(value), pos });
                continue;
            }
            if "(){}:,=;".contains(c) {
                out.push(Token { tok: Tok::Punct(c), pos });
                i += 1;
                continue;
            }
            return Err(syntax(&pos, format!("unexpected character `{c}`")));
        }
        out.push(Token { tok: Tok::Newline, pos: Pos { line: line_no, col: chars.len() + 1 } });
    }
    Ok(out)
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude: i128 = if let Some(hex) = body.strip_prefix("0x") {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i128>().ok()?
    };
    let v = if neg { -magnitude } else { magnitude };
    // Hex literals may spell any 64-bit pattern.
    if body.starts_with("0x") && !neg && v <= u64::MAX as i128 {
        return Some(v as u64 as i64);
    }
    i64::try_from(v).ok()
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

/// Parses and validates a PIR program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let program = parse_unvalidated(text)?;
    validate(&program)?;
    Ok(program)
}

/// Parses without running the validator. Structural attributes are inferred.
pub fn parse_unvalidated(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser { toks: lex(text)?, at: 0 };
    let mut program = Program {
        functions: Vec::new(),
        entry: "main".to_string(),
        globals: Vec::new(),
        externs: Vec::new(),
        slots: Vec::new(),
    };
    loop {
        p.skip_newlines();
        let Some(tok) = p.peek().cloned() else { break };
        match &tok.tok {
            Tok::Ident(kw) if kw == "func" => {
                p.bump();
                program.functions.push(p.function()?);
            }
            Tok::Ident(kw) if kw == "global" => {
                p.bump();
                program.globals.push(p.global()?);
            }
            Tok::Ident(kw) if kw == "extern" => {
                p.bump();
                program.externs.push(p.ident("extern name")?);
                p.end_of_line()?;
            }
            Tok::Ident(kw) if kw == "entry" => {
                p.bump();
                program.entry = p.ident("entry function name")?;
                p.end_of_line()?;
            }
            Tok::Ident(kw) if kw == "slot" => {
                p.bump();
                let index = p.int("slot index")?;
                if index != program.slots.len() as i64 {
                    return Err(syntax(
                        &tok.pos,
                        format!("slot {index} declared out of order (expected {})", program.slots.len()),
                    ));
                }
                program.slots.push(p.slot()?);
            }
            _ => return Err(syntax(&tok.pos, format!("expected a top-level item, found {}", describe(&tok.tok)))),
        }
    }
    program.infer_attributes();
    Ok(program)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Punct(c) => format!("`{c}`"),
        Tok::Newline => "end of line".to_string(),
    }
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.at)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.toks.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn eof_pos(&self) -> Pos {
        self.toks.last().map(|t| t.pos.clone()).unwrap_or(Pos { line: 1, col: 1 })
    }

    fn next(&mut self, what: &str) -> Result<Token, ParseError> {
        let pos = self.eof_pos();
        self.bump().ok_or_else(|| syntax(&pos, format!("unexpected end of input, expected {what}")))
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Some(Token { tok: Tok::Newline, .. })) {
            self.at += 1;
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        let t = self.next(what)?;
        match t.tok {
            Tok::Ident(s) => Ok(s),
            other => Err(syntax(&t.pos, format!("expected {what}, found {}", describe(&other)))),
        }
    }

    fn int(&mut self, what: &str) -> Result<i64, ParseError> {
        let t = self.next(what)?;
        match t.tok {
            Tok::Int(v) => Ok(v),
            other => Err(syntax(&t.pos, format!("expected {what}, found {}", describe(&other)))),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), ParseError> {
        let t = self.next(&format!("`{c}`"))?;
        match t.tok {
            Tok::Punct(p) if p == c => Ok(()),
            other => Err(syntax(&t.pos, format!("expected `{c}`, found {}", describe(&other)))),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Token { tok: Tok::Punct(p), .. }) if *p == c) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn end_of_line(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            None | Some(Token { tok: Tok::Newline, .. }) => Ok(()),
            Some(t) => Err(syntax(&t.pos, format!("expected end of line, found {}", describe(&t.tok)))),
        }
    }

    fn global(&mut self) -> Result<Global, ParseError> {
        let name = self.ident("global name")?;
        let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
        let size = self.int("global size")?;
        if size <= 0 {
            return Err(syntax(&pos, "global size must be positive"));
        }
        let mut init = Vec::new();
        if self.eat_punct('=') {
            loop {
                let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
                let b = self.int("initializer byte")?;
                let byte = u8::try_from(b).map_err(|_| syntax(&pos, format!("initializer byte {b} out of range")))?;
                init.push(byte);
                if !self.eat_punct(',') {
                    break;
                }
            }
        }
        if init.len() as i64 > size {
            return Err(syntax(&pos, "initializer longer than global"));
        }
        self.end_of_line()?;
        Ok(Global { name, size: size as u64, init })
    }

    fn slot(&mut self) -> Result<SlotDecl, ParseError> {
        let function = self.ident("slot function name")?;
        self.punct('=')?;
        let mut variants = Vec::new();
        loop {
            let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
            let kind_name = self.ident("variant kind")?;
            let kind = VariantKind::parse(&kind_name)
                .ok_or_else(|| syntax(&pos, format!("unknown variant kind `{kind_name}`")))?;
            self.punct(':')?;
            variants.push((kind, self.ident("variant name")?));
            if !self.eat_punct(',') {
                break;
            }
        }
        self.end_of_line()?;
        Ok(SlotDecl { function, variants })
    }

    fn function(&mut self) -> Result<Function, ParseError> {
        let name = self.ident("function name")?;
        self.punct('(')?;
        let mut params = Vec::new();
        if !self.eat_punct(')') {
            loop {
                let pname = self.ident("parameter name")?;
                self.punct(':')?;
                let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
                let ty = match self.ident("parameter type")?.as_str() {
                    "i64" => Ty::I64,
                    "ptr" => Ty::Ptr,
                    other => return Err(syntax(&pos, format!("unknown type `{other}`"))),
                };
                params.push(Param { name: pname, ty });
                if self.eat_punct(')') {
                    break;
                }
                self.punct(',')?;
            }
        }
        let mut attrs = Attributes::default();
        let mut kind = VariantKind::Original;
        let mut instrumented = Instrumented::default();
        loop {
            let t = self.next("`{` or attribute")?;
            match t.tok {
                Tok::Punct('{') => break,
                Tok::Ident(a) => match a.as_str() {
                    "address_taken" => attrs.address_taken = true,
                    "external_visible" => attrs.external_visible = true,
                    "no_memory_access" => attrs.no_memory_access = true,
                    "cold" => attrs.cold = true,
                    "kind" => {
                        self.punct('=')?;
                        let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
                        let k = self.ident("variant kind")?;
                        kind = VariantKind::parse(&k)
                            .ok_or_else(|| syntax(&pos, format!("unknown variant kind `{k}`")))?;
                    }
                    "instr" => {
                        self.punct('(')?;
                        loop {
                            let pos = self.peek().map(|t| t.pos.clone()).unwrap_or_else(|| self.eof_pos());
                            match self.ident("instrumentation name")?.as_str() {
                                "address" => instrumented.address = true,
                                "ub" => instrumented.ub = true,
                                "coverage" => instrumented.coverage = true,
                                "profile" => instrumented.profile = true,
                                other => {
                                    return Err(syntax(&pos, format!("unknown instrumentation `{other}`")))
                                }
                            }
                            if self.eat_punct(')') {
                                break;
                            }
                            self.punct(',')?;
                        }
                    }
                    other => return Err(syntax(&t.pos, format!("unknown attribute `{other}`"))),
                },
                other => return Err(syntax(&t.pos, format!("expected `{{` or attribute, found {}", describe(&other)))),
            }
        }
        let blocks = self.body(&name)?;
        Ok(Function { name, params, blocks, attrs, kind, instrumented })
    }

    /// Collects the tokens of one statement, stopping before `}`.
    fn statement(&mut self) -> Vec<Token> {
        let mut stmt = Vec::new();
        while let Some(t) = self.peek() {
            match t.tok {
                Tok::Newline | Tok::Punct(';') => {
                    self.at += 1;
                    break;
                }
                Tok::Punct('}') => break,
                _ => {
                    stmt.push(t.clone());
                    self.at += 1;
                }
            }
        }
        stmt
    }

    fn body(&mut self, fname: &str) -> Result<Vec<BasicBlock>, ParseError> {
        let mut blocks: Vec<BasicBlock> = Vec::new();
        // (label, insts, label position) of the block being filled
        let mut open: Option<(String, Vec<Inst>, Pos)> = None;
        loop {
            match self.peek() {
                None => return Err(syntax(&self.eof_pos(), format!("unterminated body of function `{fname}`"))),
                Some(Token { tok: Tok::Punct('}'), pos }) => {
                    let pos = pos.clone();
                    self.at += 1;
                    if let Some((label, _, lpos)) = open {
                        return Err(syntax(&lpos, format!("block `{label}` has no terminator")));
                    }
                    if blocks.is_empty() {
                        return Err(syntax(&pos, format!("function `{fname}` has no blocks")));
                    }
                    return Ok(blocks);
                }
                _ => {}
            }
            let mut stmt = self.statement();
            if stmt.is_empty() {
                continue;
            }
            if stmt.len() >= 2 && stmt[1].tok == Tok::Punct(':') {
                if let Tok::Ident(label) = &stmt[0].tok {
                    if let Some((prev, _, lpos)) = open.take() {
                        return Err(syntax(&lpos, format!("block `{prev}` has no terminator")));
                    }
                    open = Some((label.clone(), Vec::new(), stmt[0].pos.clone()));
                    stmt.drain(..2);
                    if stmt.is_empty() {
                        continue;
                    }
                }
            }
            let pos = stmt[0].pos.clone();
            let Some((label, insts, _)) = open.as_mut() else {
                return Err(syntax(&pos, "statement outside of a labeled block"));
            };
            match parse_statement(&stmt)? {
                Stmt::Inst(i) => insts.push(i),
                Stmt::Term(term) => {
                    let (label, insts) = (std::mem::take(label), std::mem::take(insts));
                    blocks.push(BasicBlock { label, insts, term });
                    open = None;
                }
            }
        }
    }
}

enum Stmt {
    Inst(Inst),
    Term(Terminator),
}

struct Cursor<'a> {
    toks: &'a [Token],
    at: usize,
    end_pos: Pos,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [Token]) -> Self {
        let end_pos = toks
            .last()
            .map(|t| Pos { line: t.pos.line, col: t.pos.col + 1 })
            .unwrap_or(Pos { line: 0, col: 0 });
        Cursor { toks, at: 0, end_pos }
    }

    fn done(&self) -> bool {
        self.at >= self.toks.len()
    }

    fn pos(&self) -> Pos {
        self.toks.get(self.at).map(|t| t.pos.clone()).unwrap_or_else(|| self.end_pos.clone())
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        let pos = self.pos();
        match self.toks.get(self.at).map(|t| &t.tok) {
            Some(Tok::Ident(s)) => {
                self.at += 1;
                Ok(s.clone())
            }
            Some(other) => Err(syntax(&pos, format!("expected {what}, found {}", describe(other)))),
            None => Err(syntax(&pos, format!("expected {what}"))),
        }
    }

    fn int(&mut self, what: &str) -> Result<i64, ParseError> {
        let pos = self.pos();
        match self.toks.get(self.at).map(|t| &t.tok) {
            Some(Tok::Int(v)) => {
                self.at += 1;
                Ok(*v)
            }
            Some(other) => Err(syntax(&pos, format!("expected {what}, found {}", describe(other)))),
            None => Err(syntax(&pos, format!("expected {what}"))),
        }
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        let pos = self.pos();
        match self.toks.get(self.at).map(|t| &t.tok) {
            Some(Tok::Ident(s)) => {
                self.at += 1;
                Ok(Operand::Reg(s.clone()))
            }
            Some(Tok::Int(v)) => {
                self.at += 1;
                Ok(Operand::Imm(*v))
            }
            Some(other) => Err(syntax(&pos, format!("expected operand, found {}", describe(other)))),
            None => Err(syntax(&pos, "expected operand")),
        }
    }

    fn rest_operands(&mut self) -> Result<Vec<Operand>, ParseError> {
        let mut v = Vec::new();
        while !self.done() {
            v.push(self.operand()?);
        }
        Ok(v)
    }

    fn finish(&self) -> Result<(), ParseError> {
        match self.toks.get(self.at) {
            None => Ok(()),
            Some(t) => Err(syntax(&t.pos, format!("unexpected {}", describe(&t.tok)))),
        }
    }
}

fn parse_statement(toks: &[Token]) -> Result<Stmt, ParseError> {
    let mut c = Cursor::new(toks);
    let dst = if toks.len() >= 2 && toks[1].tok == Tok::Punct('=') {
        let d = c.ident("destination register")?;
        c.at += 1;
        Some(d)
    } else {
        None
    };
    let op_pos = c.pos();
    let op = c.ident("opcode")?;
    let need_dst = |d: &Option<String>| -> Result<String, ParseError> {
        d.clone().ok_or_else(|| syntax(&op_pos, format!("`{op}` requires a destination register")))
    };
    let no_dst = |d: &Option<String>| -> Result<(), ParseError> {
        match d {
            Some(_) => Err(syntax(&op_pos, format!("`{op}` does not produce a value"))),
            None => Ok(()),
        }
    };
    let stmt = match op.as_str() {
        "br" => {
            no_dst(&dst)?;
            Stmt::Term(Terminator::Br(c.ident("branch target")?))
        }
        "cbr" => {
            no_dst(&dst)?;
            let cond = c.operand()?;
            let then_label = c.ident("branch target")?;
            let else_label = c.ident("branch target")?;
            Stmt::Term(Terminator::CondBr { cond, then_label, else_label })
        }
        "return" => {
            no_dst(&dst)?;
            let v = if c.done() { None } else { Some(c.operand()?) };
            Stmt::Term(Terminator::Return(v))
        }
        "const" => Stmt::Inst(Inst::Const { dst: need_dst(&dst)?, value: c.int("constant")? }),
        "move" => Stmt::Inst(Inst::Move { dst: need_dst(&dst)?, src: c.operand()? }),
        "cmp" => {
            let d = need_dst(&dst)?;
            let ppos = c.pos();
            let p = c.ident("comparison predicate")?;
            let pred = CmpPred::from_mnemonic(&p)
                .ok_or_else(|| syntax(&ppos, format!("unknown comparison predicate `{p}`")))?;
            Stmt::Inst(Inst::Cmp { dst: d, pred, lhs: c.operand()?, rhs: c.operand()? })
        }
        "select" => Stmt::Inst(Inst::Select {
            dst: need_dst(&dst)?,
            cond: c.operand()?,
            if_true: c.operand()?,
            if_false: c.operand()?,
        }),
        "alloc" | "alloc_rz" => Stmt::Inst(Inst::Alloc {
            dst: need_dst(&dst)?,
            size: c.operand()?,
            redzone: op == "alloc_rz",
        }),
        "free" | "free_q" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::Free { ptr: c.operand()?, quarantine: op == "free_q" })
        }
        "load8" | "load64" => Stmt::Inst(Inst::Load {
            dst: need_dst(&dst)?,
            addr: c.operand()?,
            width: if op == "load8" { Width::Byte } else { Width::Quad },
        }),
        "store8" | "store64" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::Store {
                addr: c.operand()?,
                value: c.operand()?,
                width: if op == "store8" { Width::Byte } else { Width::Quad },
            })
        }
        "call" => {
            let callee = c.ident("callee name")?;
            Stmt::Inst(Inst::Call { dst, callee, args: c.rest_operands()? })
        }
        "call_slot" => {
            let spos = c.pos();
            let slot = c.int("slot index")?;
            let slot = u32::try_from(slot).map_err(|_| syntax(&spos, "slot index out of range"))?;
            Stmt::Inst(Inst::CallSlot { dst, slot, args: c.rest_operands()? })
        }
        "call_ref" => {
            let target = c.operand()?;
            Stmt::Inst(Inst::CallRef { dst, target, args: c.rest_operands()? })
        }
        "take_address" => {
            Stmt::Inst(Inst::TakeAddress { dst: need_dst(&dst)?, function: c.ident("function name")? })
        }
        "global_addr" => {
            Stmt::Inst(Inst::GlobalAddr { dst: need_dst(&dst)?, global: c.ident("global name")? })
        }
        "check_addr" => {
            no_dst(&dst)?;
            let addr = c.operand()?;
            let wpos = c.pos();
            let w = c.int("access width")?;
            let width = Width::from_bytes(w).ok_or_else(|| syntax(&wpos, "access width must be 1 or 8"))?;
            Stmt::Inst(Inst::CheckAddr { addr, width })
        }
        "check_overflow" => {
            no_dst(&dst)?;
            let opos = c.pos();
            let o = c.ident("arithmetic opcode")?;
            let bop = BinOp::from_mnemonic(&o)
                .filter(|b| b.can_overflow())
                .ok_or_else(|| syntax(&opos, format!("`{o}` cannot overflow-check")))?;
            Stmt::Inst(Inst::CheckOverflow { op: bop, lhs: c.operand()?, rhs: c.operand()? })
        }
        "check_shift" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::CheckShift { amount: c.operand()? })
        }
        "check_div" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::CheckDiv { lhs: c.operand()?, rhs: c.operand()? })
        }
        "cov_hit" => {
            no_dst(&dst)?;
            let ipos = c.pos();
            let id = u32::try_from(c.int("coverage id")?).map_err(|_| syntax(&ipos, "coverage id out of range"))?;
            Stmt::Inst(Inst::CovHit { id })
        }
        "prof_count" => {
            no_dst(&dst)?;
            let spos = c.pos();
            let site = match c.ident("`entry` or `block`")?.as_str() {
                "entry" => ProfSite::Entry,
                "block" => ProfSite::Block,
                other => return Err(syntax(&spos, format!("unknown profile site `{other}`"))),
            };
            let ipos = c.pos();
            let id = u32::try_from(c.int("counter id")?).map_err(|_| syntax(&ipos, "counter id out of range"))?;
            Stmt::Inst(Inst::ProfCount { site, id })
        }
        "input" => Stmt::Inst(Inst::Input { dst: need_dst(&dst)?, index: c.operand()? }),
        "input_len" => Stmt::Inst(Inst::InputLen { dst: need_dst(&dst)? }),
        "write" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::Write { value: c.operand()? })
        }
        "print" => {
            no_dst(&dst)?;
            Stmt::Inst(Inst::Print { value: c.operand()? })
        }
        other => match BinOp::from_mnemonic(other) {
            Some(bop) => Stmt::Inst(Inst::Bin { dst: need_dst(&dst)?, op: bop, lhs: c.operand()?, rhs: c.operand()? }),
            None => return Err(syntax(&op_pos, format!("unknown opcode `{other}`"))),
        },
    };
    c.finish()?;
    Ok(stmt)
}
