//! The cas assembler core: parsing (labels, mnemonics, directives,
//! constant expressions), two-pass assembly over named segments, and raw
//! `bin` image emission.
//!
//! Syntax sketch:
//!
//! ```text
//! #include "config.h"          ; handled by the preprocessor
//!         .segment code,x
//!         .entry start
//! start:  mov   %r1, 10000000  ; immediates auto-promote to x-forms
//! again:  dec   %r1
//!         jnz   again          ; label targets take an immediate word
//!         out   1000, (IOBASE_TIMER + 0)
//!         ld    %r2, [%r3 + 4]
//!         .segment data,w
//! msg:    .ascii "Hi"          ; one character per word, 0-terminated
//!         .word  msg, 0x1F, 1Fh, 017, 17q, 255d, 'A'
//! ```
//!
//! Expressions fold constants over `+ - * / & | << >>` and unary minus,
//! and may mention at most one symbol, additively; a symbolic immediate
//! word becomes a type-0 relocation whose site stores the addend.

use std::collections::HashMap;
use std::fmt;

use clown_core::isa::{self, Instruction, Opcode, Shape};
use clown_core::word::Word;

use crate::object::{ObjectModule, Reloc, SegFlags, Segment, Symbol, RELOC_ABSOLUTE_WORD};

#[derive(Debug, Clone)]
pub struct AsmError {
    pub file: String,
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl fmt::Display for AsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.file, self.line, self.col, self.msg)
    }
}

impl std::error::Error for AsmError {}

#[derive(Debug)]
pub struct AsmErrors(pub Vec<AsmError>);

impl fmt::Display for AsmErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for AsmErrors {}

// ------------------------------------------------------------ expressions

/// A folded expression: a constant, plus at most one symbol added in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymExpr {
    pub sym: Option<String>,
    pub k: i64,
}

impl SymExpr {
    fn constant(k: i64) -> SymExpr {
        SymExpr { sym: None, k }
    }
}

struct ExprParser<'a> {
    chars: Vec<char>,
    pos: usize,
    src: &'a str,
}

type ExprResult = Result<SymExpr, (usize, String)>;

impl<'a> ExprParser<'a> {
    fn new(src: &'a str) -> ExprParser<'a> {
        ExprParser { chars: src.chars().collect(), pos: 0, src }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat2(&mut self, a: char, b: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(a) && self.chars.get(self.pos + 1) == Some(&b) {
            self.pos += 2;
            true
        } else {
            false
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, (usize, String)> {
        Err((self.pos, msg.into()))
    }

    fn parse(mut self) -> ExprResult {
        let v = self.bitor()?;
        self.skip_ws();
        if self.pos != self.chars.len() {
            return self.err(format!("unexpected character in expression: {:?}", self.src));
        }
        Ok(v)
    }

    fn bitor(&mut self) -> ExprResult {
        let mut v = self.bitand()?;
        while self.eat('|') {
            v = self.pure_op(v, self.pos, "|")?.apply(|a, b| a | b, self.bitand()?, self.pos)?;
        }
        Ok(v)
    }

    fn bitand(&mut self) -> ExprResult {
        let mut v = self.shift()?;
        while self.peek_op_and() {
            self.pos += 1;
            v = self.pure_op(v, self.pos, "&")?.apply(|a, b| a & b, self.shift()?, self.pos)?;
        }
        Ok(v)
    }

    fn peek_op_and(&mut self) -> bool {
        self.skip_ws();
        self.peek() == Some('&')
    }

    fn shift(&mut self) -> ExprResult {
        let mut v = self.addsub()?;
        loop {
            if self.eat2('<', '<') {
                v = self
                    .pure_op(v, self.pos, "<<")?
                    .apply(|a, b| a.wrapping_shl(b as u32), self.addsub()?, self.pos)?;
            } else if self.eat2('>', '>') {
                v = self
                    .pure_op(v, self.pos, ">>")?
                    .apply(|a, b| a.wrapping_shr(b as u32), self.addsub()?, self.pos)?;
            } else {
                return Ok(v);
            }
        }
    }

    fn addsub(&mut self) -> ExprResult {
        let mut v = self.muldiv()?;
        loop {
            if self.eat('+') {
                let rhs = self.muldiv()?;
                if v.sym.is_some() && rhs.sym.is_some() {
                    return self.err("expression mentions more than one symbol");
                }
                v = SymExpr { sym: v.sym.or(rhs.sym), k: v.k.wrapping_add(rhs.k) };
            } else if self.eat('-') {
                let rhs = self.muldiv()?;
                if rhs.sym.is_some() {
                    return self.err("cannot subtract a symbol");
                }
                v = SymExpr { sym: v.sym, k: v.k.wrapping_sub(rhs.k) };
            } else {
                return Ok(v);
            }
        }
    }

    fn muldiv(&mut self) -> ExprResult {
        let mut v = self.unary()?;
        loop {
            if self.eat('*') {
                v = self.pure_op(v, self.pos, "*")?.apply(
                    |a, b| a.wrapping_mul(b),
                    self.unary()?,
                    self.pos,
                )?;
            } else if self.eat('/') {
                let rhs = self.unary()?;
                if rhs.k == 0 {
                    return self.err("division by zero in constant expression");
                }
                v = self.pure_op(v, self.pos, "/")?.apply(|a, b| a / b, rhs, self.pos)?;
            } else {
                return Ok(v);
            }
        }
    }

    fn unary(&mut self) -> ExprResult {
        if self.eat('-') {
            let v = self.unary()?;
            if v.sym.is_some() {
                return self.err("cannot negate a symbol");
            }
            return Ok(SymExpr::constant(v.k.wrapping_neg()));
        }
        self.primary()
    }

    fn primary(&mut self) -> ExprResult {
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let v = self.bitor()?;
                if !self.eat(')') {
                    return self.err("expected ')'");
                }
                Ok(v)
            }
            Some('\'') => self.char_literal(),
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let start = self.pos;
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                Ok(SymExpr { sym: Some(name), k: 0 })
            }
            _ => self.err("expected a value"),
        }
    }

    fn char_literal(&mut self) -> ExprResult {
        self.pos += 1; // opening quote
        let c = match self.peek() {
            Some('\\') => {
                self.pos += 1;
                match self.peek() {
                    Some('n') => '\n',
                    Some('t') => '\t',
                    Some('0') => '\0',
                    Some('\\') => '\\',
                    Some('\'') => '\'',
                    Some('"') => '"',
                    _ => return self.err("unknown escape in character literal"),
                }
            }
            Some(c) => c,
            None => return self.err("unterminated character literal"),
        };
        self.pos += 1;
        if self.peek() != Some('\'') {
            return self.err("unterminated character literal");
        }
        self.pos += 1;
        Ok(SymExpr::constant(c as i64))
    }

    /// Numeric literals, prefix and postfix: 0x1F, 1Fh, 0o17, 017, 17q,
    /// 255, 255d.
    fn number(&mut self) -> ExprResult {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
            self.pos += 1;
        }
        let tok: String = self.chars[start..self.pos].iter().collect();
        parse_number(&tok).map(SymExpr::constant).ok_or((start, format!("bad number {tok:?}")))
    }

    fn pure_op(&self, v: SymExpr, pos: usize, op: &str) -> Result<PureLhs, (usize, String)> {
        if v.sym.is_some() {
            Err((pos, format!("symbol not allowed with operator {op}")))
        } else {
            Ok(PureLhs(v.k))
        }
    }
}

struct PureLhs(i64);

impl PureLhs {
    fn apply(
        self,
        f: impl Fn(i64, i64) -> i64,
        rhs: SymExpr,
        pos: usize,
    ) -> Result<SymExpr, (usize, String)> {
        if rhs.sym.is_some() {
            return Err((pos, "symbol not allowed here".into()));
        }
        Ok(SymExpr::constant(f(self.0, rhs.k)))
    }
}

pub fn parse_number(tok: &str) -> Option<i64> {
    let t = tok;
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return i64::from_str_radix(hex, 16).ok();
    }
    if let Some(oct) = t.strip_prefix("0o").or_else(|| t.strip_prefix("0O")) {
        return i64::from_str_radix(oct, 8).ok();
    }
    if !t.chars().next()?.is_ascii_digit() {
        return None;
    }
    if let Some(body) = t.strip_suffix(['h', 'H']) {
        return i64::from_str_radix(body, 16).ok();
    }
    if let Some(body) = t.strip_suffix(['q', 'Q']) {
        return i64::from_str_radix(body, 8).ok();
    }
    if let Some(body) = t.strip_suffix(['d', 'D']) {
        return body.parse().ok();
    }
    if t.len() > 1 && t.starts_with('0') {
        return i64::from_str_radix(&t[1..], 8).ok();
    }
    t.parse().ok()
}

pub fn parse_expr(src: &str) -> Result<SymExpr, (usize, String)> {
    ExprParser::new(src).parse()
}

// -------------------------------------------------------------- operands

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Reg(u8),
    SegReg(u8),
    /// `[%rN + disp]` or `[abs-expr]`
    Mem { base: Option<u8>, disp: SymExpr },
    /// Bare expression.
    Expr(SymExpr),
    /// Parenthesized expression — a port for I/O instructions, otherwise
    /// an ordinary immediate.
    Paren(SymExpr),
}

fn parse_register(tok: &str) -> Option<Operand> {
    let body = tok.strip_prefix('%')?;
    if let Some(n) = body.strip_prefix('r') {
        let n: u8 = n.parse().ok()?;
        return (n < 16).then_some(Operand::Reg(n));
    }
    if let Some(n) = body.strip_prefix('s') {
        let n: u8 = n.parse().ok()?;
        return (n < 8).then_some(Operand::SegReg(n));
    }
    None
}

fn parse_operand(tok: &str) -> Result<Operand, String> {
    let tok = tok.trim();
    if tok.starts_with('%') {
        return parse_register(tok).ok_or_else(|| format!("bad register {tok:?}"));
    }
    if let Some(inner) = tok.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or("missing ']'")?.trim();
        if inner.starts_with('%') {
            // %rN, optionally followed by +/- displacement
            let (reg_tok, rest) = match inner.find(['+', '-']) {
                Some(i) => (&inner[..i], &inner[i..]),
                None => (inner, ""),
            };
            let Some(Operand::Reg(base)) = parse_register(reg_tok.trim()) else {
                return Err(format!("bad base register in {tok:?}"));
            };
            let disp = if rest.is_empty() {
                SymExpr::constant(0)
            } else {
                parse_expr(&format!("0 {rest}")).map_err(|(_, m)| m)?
            };
            return Ok(Operand::Mem { base: Some(base), disp });
        }
        let disp = parse_expr(inner).map_err(|(_, m)| m)?;
        return Ok(Operand::Mem { base: None, disp });
    }
    if tok.starts_with('(') && tok.ends_with(')') {
        let v = parse_expr(&tok[1..tok.len() - 1]).map_err(|(_, m)| m)?;
        return Ok(Operand::Paren(v));
    }
    let v = parse_expr(tok).map_err(|(_, m)| m)?;
    Ok(Operand::Expr(v))
}

/// Split an operand field at top-level commas (bracket-, paren- and
/// quote-aware).
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if let Some(q) = quote {
            cur.push(c);
            if c == '\\' {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => {
                quote = Some(c);
                cur.push(c);
            }
            '[' | '(' => {
                depth += 1;
                cur.push(c);
            }
            ']' | ')' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur = String::new();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

// ------------------------------------------------------------ statements

#[derive(Debug, Clone)]
enum StmtKind {
    Instruction { mnemonic: String, operands: Vec<Operand> },
    Directive { name: String, raw_args: String },
}

#[derive(Debug, Clone)]
struct Stmt {
    labels: Vec<String>,
    kind: Option<StmtKind>,
    file: String,
    line: usize,
    source: String,
}

fn parse_lines(text: &str, default_file: &str) -> Result<Vec<Stmt>, AsmErrors> {
    let mut stmts = Vec::new();
    let mut errors = Vec::new();
    let mut file = default_file.to_string();
    let mut line_no = 0usize;
    for raw in text.lines() {
        line_no += 1;
        if let Some(rest) = raw.trim_start().strip_prefix("#line ") {
            let mut parts = rest.splitn(2, ' ');
            if let Some(n) = parts.next().and_then(|n| n.parse::<usize>().ok()) {
                line_no = n.saturating_sub(1);
                if let Some(f) = parts.next() {
                    file = f.trim().trim_matches('"').to_string();
                }
            }
            continue;
        }
        let body = strip_line_comment(raw);
        let mut rest = body.trim();
        if rest.is_empty() {
            continue;
        }
        let mut labels = Vec::new();
        // leading labels: ident ':'
        loop {
            let Some((head, tail)) = rest.split_once(':') else { break };
            let head = head.trim();
            if !is_label(head) || tail.starts_with(':') {
                break;
            }
            labels.push(head.to_string());
            rest = tail.trim();
        }
        let kind = if rest.is_empty() {
            None
        } else if let Some(dir) = rest.strip_prefix('.') {
            let (name, args) = match dir.find(char::is_whitespace) {
                Some(i) => (&dir[..i], dir[i..].trim()),
                None => (dir, ""),
            };
            Some(StmtKind::Directive { name: name.to_lowercase(), raw_args: args.to_string() })
        } else {
            let (mnem, args) = match rest.find(char::is_whitespace) {
                Some(i) => (&rest[..i], rest[i..].trim()),
                None => (rest, ""),
            };
            let mut operands = Vec::new();
            let mut bad = false;
            for tok in split_operands(args) {
                match parse_operand(&tok) {
                    Ok(op) => operands.push(op),
                    Err(msg) => {
                        errors.push(AsmError {
                            file: file.clone(),
                            line: line_no,
                            col: raw.find(tok.as_str().trim()).map_or(1, |i| i + 1),
                            msg,
                        });
                        bad = true;
                    }
                }
            }
            if bad {
                continue;
            }
            Some(StmtKind::Instruction { mnemonic: mnem.to_lowercase(), operands })
        };
        stmts.push(Stmt {
            labels,
            kind,
            file: file.clone(),
            line: line_no,
            source: raw.trim_end().to_string(),
        });
    }
    if errors.is_empty() {
        Ok(stmts)
    } else {
        Err(AsmErrors(errors))
    }
}

fn strip_line_comment(line: &str) -> String {
    let mut quote: Option<char> = None;
    let mut out = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' {
                if let Some(n) = chars.next() {
                    out.push(n);
                }
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            ';' => break,
            '"' | '\'' => {
                quote = Some(c);
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}

fn is_label(s: &str) -> bool {
    let mut cs = s.chars();
    cs.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

// ----------------------------------------------------- instruction forms

/// A fully selected instruction: which opcode, which register fields, and
/// what goes into the 16-bit and 32-bit immediate slots. `imm32` carries
/// a possibly-symbolic value; a symbol makes the site a relocation.
#[derive(Debug, Clone)]
struct Selected {
    opcode: Opcode,
    rd: u8,
    rs: u8,
    imm16: i64,
    imm32: Option<SymExpr>,
}

impl Selected {
    fn size(&self) -> u32 {
        1 + self.imm32.is_some() as u32
    }
}

fn plain(opcode: Opcode) -> Selected {
    Selected { opcode, rd: 0, rs: 0, imm16: 0, imm32: None }
}

fn select(mnemonic: &str, ops: &[Operand]) -> Result<Selected, String> {
    let opcode = isa::Opcode::from_mnemonic(mnemonic)
        .ok_or_else(|| format!("unknown mnemonic {mnemonic:?}"))?;
    let usage = || format!("bad operands for {mnemonic}");
    use Operand::*;
    let sel = match opcode.shape() {
        Shape::None => match ops {
            [] => plain(opcode),
            _ => return Err(usage()),
        },
        Shape::Rd => match ops {
            [Reg(d)] => Selected { rd: *d, ..plain(opcode) },
            _ => return Err(usage()),
        },
        Shape::Rs => match ops {
            [Reg(s)] => Selected { rs: *s, ..plain(opcode) },
            [Expr(e) | Paren(e)] => promote(opcode, 0, e.clone())?,
            _ => return Err(usage()),
        },
        Shape::RdRs => match ops {
            [Reg(d), Reg(s)] => Selected { rd: *d, rs: *s, ..plain(opcode) },
            [Reg(d), Expr(e) | Paren(e)] => promote(opcode, *d, e.clone())?,
            _ => return Err(usage()),
        },
        Shape::RdImm => match ops {
            [Reg(d), Expr(e) | Paren(e)] => {
                Selected { rd: *d, imm32: Some(e.clone()), ..plain(opcode) }
            }
            _ => return Err(usage()),
        },
        Shape::Imm => match ops {
            [Expr(e) | Paren(e)] => Selected { imm32: Some(e.clone()), ..plain(opcode) },
            _ => return Err(usage()),
        },
        Shape::Imm16 => match ops {
            [Expr(e)] => {
                let k = constant(e, "vector")?;
                Selected { imm16: k, ..plain(opcode) }
            }
            _ => return Err(usage()),
        },
        Shape::RdMem => match ops {
            [Reg(d), Mem { base: Some(b), disp }] => {
                Selected { rd: *d, rs: *b, imm16: constant(disp, "displacement")?, ..plain(opcode) }
            }
            [Reg(d), Mem { base: None, disp }] => {
                let x = opcode.x_form().ok_or_else(usage)?;
                Selected { rd: *d, imm32: Some(disp.clone()), ..plain(x) }
            }
            _ => return Err(usage()),
        },
        Shape::MemRs => match ops {
            [Mem { base: Some(b), disp }, Reg(s)] => {
                Selected { rd: *b, rs: *s, imm16: constant(disp, "displacement")?, ..plain(opcode) }
            }
            [Mem { base: None, disp }, Reg(s)] => {
                let x = opcode.x_form().ok_or_else(usage)?;
                Selected { rs: *s, imm32: Some(disp.clone()), ..plain(x) }
            }
            _ => return Err(usage()),
        },
        Shape::RdAbs => match ops {
            [Reg(d), Mem { base: None, disp }] => {
                Selected { rd: *d, imm32: Some(disp.clone()), ..plain(opcode) }
            }
            _ => return Err(usage()),
        },
        Shape::AbsRs => match ops {
            [Mem { base: None, disp }, Reg(s)] => {
                Selected { rs: *s, imm32: Some(disp.clone()), ..plain(opcode) }
            }
            _ => return Err(usage()),
        },
        Shape::SegRs => match ops {
            [SegReg(k), Reg(s)] => Selected { rd: *k, rs: *s, ..plain(opcode) },
            _ => return Err(usage()),
        },
        Shape::RdSeg => match ops {
            [Reg(d), SegReg(k)] => Selected { rd: *d, rs: *k, ..plain(opcode) },
            _ => return Err(usage()),
        },
        Shape::Target => match ops {
            [Expr(e)] => target(opcode, 0, e)?,
            _ => return Err(usage()),
        },
        Shape::RegTarget => match ops {
            [Reg(s)] => Selected { rs: *s, ..plain(opcode) },
            [Expr(e)] => {
                let x = opcode.x_form().ok_or_else(usage)?;
                Selected { imm32: Some(e.clone()), ..plain(x) }
            }
            _ => return Err(usage()),
        },
        Shape::ImmTarget => match ops {
            [Expr(e)] => Selected { imm32: Some(e.clone()), ..plain(opcode) },
            _ => return Err(usage()),
        },
        Shape::RdTarget => match ops {
            [Reg(d), Expr(e)] => target(opcode, *d, e)?,
            _ => return Err(usage()),
        },
        Shape::SegTarget => match ops {
            [SegReg(k), Expr(e)] => target(opcode, *k, e)?,
            _ => return Err(usage()),
        },
        Shape::InPort => match ops {
            [Reg(d), Paren(p)] => {
                Selected { rd: *d, imm16: constant(p, "port")?, ..plain(opcode) }
            }
            _ => return Err(usage()),
        },
        Shape::OutPort => match ops {
            [Reg(s), Paren(p)] => {
                Selected { rs: *s, imm16: constant(p, "port")?, ..plain(opcode) }
            }
            [Expr(e), Paren(p)] => {
                let x = opcode.x_form().ok_or_else(usage)?;
                Selected {
                    imm16: constant(p, "port")?,
                    imm32: Some(e.clone()),
                    ..plain(x)
                }
            }
            _ => return Err(usage()),
        },
        Shape::ImmPort => match ops {
            [Expr(e), Paren(p)] => Selected {
                imm16: constant(p, "port")?,
                imm32: Some(e.clone()),
                ..plain(opcode)
            },
            _ => return Err(usage()),
        },
    };
    Ok(sel)
}

fn constant(e: &SymExpr, what: &str) -> Result<i64, String> {
    if e.sym.is_some() {
        return Err(format!("{what} must be a constant expression"));
    }
    Ok(e.k)
}

/// Register-or-immediate slots: an immediate operand selects the x-form.
fn promote(opcode: Opcode, rd: u8, e: SymExpr) -> Result<Selected, String> {
    let x = opcode
        .x_form()
        .ok_or_else(|| format!("{} does not take an immediate operand", opcode.mnemonic()))?;
    Ok(Selected { rd, imm32: Some(e), ..plain(x) })
}

/// Flow-control targets: symbolic or wide targets take the promoted
/// immediate word; small constants fit the 16-bit field.
fn target(opcode: Opcode, rd: u8, e: &SymExpr) -> Result<Selected, String> {
    if e.sym.is_none() && i16::try_from(e.k).is_ok() {
        Ok(Selected { rd, imm16: e.k, ..plain(opcode) })
    } else {
        Ok(Selected { rd, imm32: Some(e.clone()), ..plain(opcode) })
    }
}

// ------------------------------------------------------------- assembler

#[derive(Debug, Clone)]
pub struct Assembly {
    pub module: ObjectModule,
    /// Address / words / source listing, one line per statement.
    pub listing: String,
}

struct SegBuild {
    name: String,
    flags: SegFlags,
    words: Vec<Word>,
    relocs: Vec<(u32, String)>,
}

struct Assembler {
    segs: Vec<SegBuild>,
    cur: usize,
    /// name -> (segment, offset)
    defs: HashMap<String, (usize, u32)>,
    globals: Vec<String>,
    externs: Vec<String>,
    entry_label: Option<(String, AsmError)>,
    errors: Vec<AsmError>,
}

pub fn assemble(text: &str, file: &str) -> Result<Assembly, AsmErrors> {
    let stmts = parse_lines(text, file)?;
    let mut asm = Assembler {
        segs: vec![SegBuild {
            name: "code".into(),
            flags: SegFlags { writable: false, executable: true },
            words: Vec::new(),
            relocs: Vec::new(),
        }],
        cur: 0,
        defs: HashMap::new(),
        globals: Vec::new(),
        externs: Vec::new(),
        entry_label: None,
        errors: Vec::new(),
    };

    // pass 1: size statements, bind labels
    let sizes = asm.pass1(&stmts);
    if !asm.errors.is_empty() {
        return Err(AsmErrors(asm.errors));
    }
    // pass 2: encode, checking the pass-1 prediction statement by statement
    let listing = asm.pass2(&stmts, &sizes);
    if !asm.errors.is_empty() {
        return Err(AsmErrors(asm.errors));
    }
    asm.finish(listing)
}

impl Assembler {
    fn error(&mut self, stmt: &Stmt, msg: impl Into<String>) {
        self.errors.push(AsmError {
            file: stmt.file.clone(),
            line: stmt.line,
            col: 1,
            msg: msg.into(),
        });
    }

    fn switch_segment(&mut self, args: &str, stmt: &Stmt) {
        let mut parts = args.split(',').map(str::trim);
        let Some(name) = parts.next().filter(|n| is_label(n)) else {
            self.error(stmt, "expected .segment name[,w][,x]");
            return;
        };
        let mut flags = SegFlags::default();
        let mut have_flags = false;
        for f in parts {
            have_flags = true;
            match f {
                "w" => flags.writable = true,
                "x" => flags.executable = true,
                other => self.error(stmt, format!("unknown segment flag {other:?}")),
            }
        }
        if let Some(i) = self.segs.iter().position(|s| s.name == name) {
            self.cur = i;
            if have_flags {
                self.segs[i].flags = flags;
            }
        } else {
            if !have_flags {
                flags = SegFlags { writable: name != "code", executable: name == "code" };
            }
            self.segs.push(SegBuild {
                name: name.to_string(),
                flags,
                words: Vec::new(),
                relocs: Vec::new(),
            });
            self.cur = self.segs.len() - 1;
        }
    }

    /// Size of a directive's payload given the current offset, or None if
    /// the directive emits nothing / is malformed (errors recorded).
    fn directive_size(&mut self, name: &str, args: &str, offset: u32, stmt: &Stmt) -> u32 {
        match name {
            "word" => split_operands(args).len() as u32,
            "ascii" => match parse_string(args) {
                Ok(s) => s.chars().count() as u32 + 1,
                Err(msg) => {
                    self.error(stmt, msg);
                    0
                }
            },
            "space" => match parse_expr(args) {
                Ok(SymExpr { sym: None, k }) if k >= 0 => k as u32,
                _ => {
                    self.error(stmt, ".space needs a nonnegative constant");
                    0
                }
            },
            "align" => match parse_expr(args) {
                Ok(SymExpr { sym: None, k }) if k > 0 => {
                    let k = k as u32;
                    (k - offset % k) % k
                }
                _ => {
                    self.error(stmt, ".align needs a positive constant");
                    0
                }
            },
            "org" => match parse_expr(args) {
                Ok(SymExpr { sym: None, k }) if k >= 0 && k as u32 >= offset => k as u32 - offset,
                Ok(SymExpr { sym: None, .. }) => {
                    self.error(stmt, ".org cannot move backwards");
                    0
                }
                _ => {
                    self.error(stmt, ".org needs a constant offset");
                    0
                }
            },
            _ => 0,
        }
    }

    fn pass1(&mut self, stmts: &[Stmt]) -> Vec<u32> {
        let mut sizes = Vec::with_capacity(stmts.len());
        let mut offsets: Vec<u32> = vec![0; self.segs.len()];
        for stmt in stmts {
            for label in &stmt.labels {
                if self.defs.insert(label.clone(), (self.cur, offsets[self.cur])).is_some() {
                    self.error(stmt, format!("duplicate label {label:?}"));
                }
            }
            let size = match &stmt.kind {
                None => 0,
                Some(StmtKind::Instruction { mnemonic, operands }) => {
                    match select(mnemonic, operands) {
                        Ok(sel) => sel.size(),
                        Err(msg) => {
                            self.error(stmt, msg);
                            0
                        }
                    }
                }
                Some(StmtKind::Directive { name, raw_args }) => match name.as_str() {
                    "segment" => {
                        self.switch_segment(raw_args, stmt);
                        while offsets.len() < self.segs.len() {
                            offsets.push(0);
                        }
                        0
                    }
                    "global" | "extern" | "entry" => 0,
                    "word" | "ascii" | "space" | "align" | "org" => {
                        self.directive_size(name, raw_args, offsets[self.cur], stmt)
                    }
                    other => {
                        self.error(stmt, format!("unknown directive .{other}"));
                        0
                    }
                },
            };
            offsets[self.cur] += size;
            sizes.push(size);
        }
        self.cur = 0;
        sizes
    }

    fn pass2(&mut self, stmts: &[Stmt], sizes: &[u32]) -> String {
        let mut listing = String::new();
        self.cur = 0;
        for (stmt, &predicted) in stmts.iter().zip(sizes) {
            let seg = self.cur;
            let at = self.segs[seg].words.len();
            match &stmt.kind {
                None => {}
                Some(StmtKind::Instruction { mnemonic, operands }) => {
                    if let Ok(sel) = select(mnemonic, operands) {
                        self.emit_selected(sel, stmt);
                    }
                }
                Some(StmtKind::Directive { name, raw_args }) => {
                    self.run_directive(name, raw_args, stmt);
                }
            }
            let emitted = (self.segs[self.cur].words.len() - if self.cur == seg { at } else { 0 })
                as u32;
            if self.cur == seg {
                assert_eq!(
                    emitted, predicted,
                    "{}:{}: pass-1 size {predicted} != pass-2 size {emitted}",
                    stmt.file, stmt.line
                );
            }
            let words = if self.cur == seg {
                self.segs[seg].words[at..].to_vec()
            } else {
                Vec::new()
            };
            let rendered: Vec<String> =
                words.iter().map(|w| format!("{:08X}", *w as u32)).collect();
            listing.push_str(&format!(
                "{:>4}:{:04X}  {:<18} {}\n",
                self.segs[seg].name.chars().take(4).collect::<String>(),
                at,
                rendered.join(" "),
                stmt.source
            ));
        }
        listing
    }

    fn imm16_field(&mut self, value: i64, stmt: &Stmt) -> i16 {
        // port numbers and small targets are nonnegative; displacements
        // may be negative — accept both encodings of the 16-bit field
        if let Ok(v) = i16::try_from(value) {
            v
        } else if let Ok(v) = u16::try_from(value) {
            v as i16
        } else {
            self.error(stmt, format!("value {value} does not fit in 16 bits"));
            0
        }
    }

    fn emit_selected(&mut self, sel: Selected, stmt: &Stmt) {
        let imm16 = self.imm16_field(sel.imm16, stmt);
        let mut inst = Instruction::new(sel.opcode).with_rd(sel.rd).with_rs(sel.rs);
        if imm16 != 0 {
            inst = inst.with_imm16(imm16);
        }
        let mut reloc: Option<String> = None;
        if let Some(e) = &sel.imm32 {
            let value = match &e.sym {
                None => e.k,
                Some(name) => {
                    reloc = Some(name.clone());
                    e.k
                }
            };
            if i32::try_from(value).is_err() && u32::try_from(value).is_err() {
                self.error(stmt, format!("immediate {value} does not fit in 32 bits"));
            }
            inst = inst.with_imm32(value as Word);
        }
        match isa::encode(&inst) {
            Ok(words) => {
                let seg = &mut self.segs[self.cur];
                if let Some(sym) = reloc {
                    seg.relocs.push((seg.words.len() as u32 + 1, sym));
                }
                seg.words.extend(words);
            }
            Err(e) => self.error(stmt, e.to_string()),
        }
    }

    fn run_directive(&mut self, name: &str, args: &str, stmt: &Stmt) {
        match name {
            "segment" => self.switch_segment(args, stmt),
            "global" => {
                for sym in split_operands(args) {
                    self.globals.push(sym);
                }
            }
            "extern" => {
                for sym in split_operands(args) {
                    self.externs.push(sym);
                }
            }
            "entry" => {
                let arg = args.trim().to_string();
                if !is_label(&arg) {
                    self.error(stmt, ".entry needs a label");
                } else {
                    self.entry_label = Some((
                        arg,
                        AsmError {
                            file: stmt.file.clone(),
                            line: stmt.line,
                            col: 1,
                            msg: String::new(),
                        },
                    ));
                }
            }
            "word" => {
                for tok in split_operands(args) {
                    match parse_expr(&tok) {
                        Ok(e) => {
                            let seg = &mut self.segs[self.cur];
                            if let Some(sym) = &e.sym {
                                seg.relocs.push((seg.words.len() as u32, sym.clone()));
                            }
                            seg.words.push(e.k as Word);
                        }
                        Err((_, msg)) => self.error(stmt, msg),
                    }
                }
            }
            "ascii" => match parse_string(args) {
                Ok(s) => {
                    let seg = &mut self.segs[self.cur];
                    seg.words.extend(s.chars().map(|c| c as Word));
                    seg.words.push(0);
                }
                Err(msg) => self.error(stmt, msg),
            },
            "space" | "align" | "org" => {
                let off = self.segs[self.cur].words.len() as u32;
                let pad = self.directive_size(name, args, off, stmt);
                self.segs[self.cur].words.extend(std::iter::repeat(0).take(pad as usize));
            }
            _ => {}
        }
    }

    fn finish(mut self, listing: String) -> Result<Assembly, AsmErrors> {
        let mut module = ObjectModule::default();
        for s in &self.segs {
            module.segments.push(Segment {
                name: s.name.clone(),
                flags: s.flags,
                words: s.words.clone(),
            });
        }
        // declared names first, then implicit locals referenced by relocs
        let mut sym_index: HashMap<String, usize> = HashMap::new();
        let mut errors: Vec<AsmError> = Vec::new();
        let define = |name: &str,
                          module: &mut ObjectModule,
                          sym_index: &mut HashMap<String, usize>,
                          defs: &HashMap<String, (usize, u32)>,
                          externs: &[String],
                          global: bool|
         -> Option<usize> {
            if let Some(&i) = sym_index.get(name) {
                if global {
                    module.symbols[i].global = true;
                }
                return Some(i);
            }
            let entry = match defs.get(name) {
                Some(&(seg, off)) => Symbol {
                    name: name.to_string(),
                    segment: Some(seg),
                    value: off,
                    global,
                },
                None if externs.iter().any(|e| e == name) => {
                    Symbol { name: name.to_string(), segment: None, value: 0, global: false }
                }
                None => return None,
            };
            module.symbols.push(entry);
            sym_index.insert(name.to_string(), module.symbols.len() - 1);
            Some(module.symbols.len() - 1)
        };
        let globals = std::mem::take(&mut self.globals);
        for g in &globals {
            if define(g, &mut module, &mut sym_index, &self.defs, &self.externs, true).is_none() {
                errors.push(AsmError {
                    file: "".into(),
                    line: 0,
                    col: 0,
                    msg: format!(".global {g:?}: symbol is not defined"),
                });
            }
        }
        for (seg_idx, s) in self.segs.iter().enumerate() {
            for (offset, sym) in &s.relocs {
                match define(sym, &mut module, &mut sym_index, &self.defs, &self.externs, false) {
                    Some(idx) => module.relocs.push(Reloc {
                        segment: seg_idx,
                        offset: *offset,
                        symbol: idx,
                        kind: RELOC_ABSOLUTE_WORD,
                    }),
                    None => errors.push(AsmError {
                        file: "".into(),
                        line: 0,
                        col: 0,
                        msg: format!("undefined symbol {sym:?}"),
                    }),
                }
            }
        }
        if let Some((label, pos)) = &self.entry_label {
            match self.defs.get(label) {
                Some(&(seg, off)) => module.entry = Some((seg, off)),
                None => errors.push(AsmError {
                    file: pos.file.clone(),
                    line: pos.line,
                    col: 1,
                    msg: format!(".entry {label:?}: label is not defined"),
                }),
            }
        }
        if !errors.is_empty() {
            return Err(AsmErrors(errors));
        }
        module.validate().expect("assembler produced an inconsistent module");
        Ok(Assembly { module, listing })
    }
}

fn parse_string(args: &str) -> Result<String, String> {
    let args = args.trim();
    let inner = args
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .ok_or("expected a double-quoted string")?;
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('0') => out.push('\0'),
            Some('\\') => out.push('\\'),
            Some('\'') => out.push('\''),
            Some('"') => out.push('"'),
            other => return Err(format!("unknown string escape {other:?}")),
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- bin emit

#[derive(Debug, Clone)]
pub struct BinImage {
    pub base: u32,
    pub words: Vec<Word>,
    pub entry: Option<u32>,
}

#[derive(Debug, Error)]
pub enum BinError {
    #[error("unresolved externals in bin output: {0}")]
    Unresolved(String),
    #[error("entry point is at {actual:#x}, but --entry-disp requires {required:#x}")]
    EntryMismatch { actual: u32, required: u32 },
    #[error("module has no entry point to verify")]
    NoEntry,
}

use thiserror::Error;

/// Flatten a fully resolved module into a raw image at `base`: segments
/// placed in order, each aligned up to 8 words, relocations patched to
/// absolute addresses.
pub fn emit_bin(
    module: &ObjectModule,
    base: u32,
    entry_disp: Option<u32>,
) -> Result<BinImage, BinError> {
    let ext = module.externals();
    if !ext.is_empty() {
        return Err(BinError::Unresolved(ext.join(", ")));
    }
    let mut bases = Vec::with_capacity(module.segments.len());
    let mut cursor = base;
    for seg in &module.segments {
        cursor = align_up(cursor, 8);
        bases.push(cursor);
        cursor += seg.words.len() as u32;
    }
    let mut words = vec![0; (cursor - base) as usize];
    for (seg, &b) in module.segments.iter().zip(&bases) {
        let at = (b - base) as usize;
        words[at..at + seg.words.len()].copy_from_slice(&seg.words);
    }
    for r in &module.relocs {
        let sym = &module.symbols[r.symbol];
        let target = bases[sym.segment.unwrap()] + sym.value;
        let site = (bases[r.segment] - base + r.offset) as usize;
        words[site] = (target as i64 + words[site] as i64) as Word;
    }
    let entry = module.entry.map(|(seg, off)| bases[seg] + off);
    if let Some(disp) = entry_disp {
        let actual = entry.ok_or(BinError::NoEntry)?;
        if actual != base + disp {
            return Err(BinError::EntryMismatch { actual, required: base + disp });
        }
    }
    Ok(BinImage { base, words, entry })
}

pub fn align_up(v: u32, a: u32) -> u32 {
    v.div_ceil(a) * a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asm(text: &str) -> ObjectModule {
        assemble(text, "t.s").unwrap().module
    }

    fn asm_err(text: &str) -> String {
        assemble(text, "t.s").unwrap_err().to_string()
    }

    fn code(text: &str) -> Vec<Word> {
        asm(text).segments[0].words.clone()
    }

    #[test]
    fn benchmark_sizes_to_six_words() {
        let words = code("\tmov %r1, 10000000\nagain:\tdec %r1\n\tjnz again\n\tstop\n");
        assert_eq!(words.len(), 6);
        // mov promotes; jnz takes an immediate word holding the label
        assert_eq!(words[0] as u32, 0x81100000);
        assert_eq!(words[1], 10_000_000);
    }

    #[test]
    fn spec_encodings() {
        assert_eq!(code("mov %r1, %r2"), vec![0x01120000]);
        assert_eq!(code("nop"), vec![0x00000000]);
    }

    #[test]
    fn ascii_one_char_per_word() {
        let m = asm(".segment data\n.ascii \"Hi\"\n");
        let data = &m.segments[m.find_segment("data").unwrap()].words;
        assert_eq!(data, &vec![0x48, 0x69, 0x00]);
    }

    #[test]
    fn number_notations_agree() {
        let m = asm(".segment data\n.word 0x1F, 1Fh, 0o17, 017, 17q, 255, 255d, 'A', '\\n'\n");
        let data = &m.segments[1].words;
        assert_eq!(data, &vec![0x1F, 0x1F, 0o17, 0o17, 0o17, 255, 255, 65, 10]);
    }

    #[test]
    fn out_with_port_expression() {
        // value 1000 promotes out -> xout; port lands in the 16-bit field
        let words = code("out 1000, (0x10 + 0)\n");
        assert_eq!(words.len(), 2);
        assert_eq!(words[1], 1000);
        assert_eq!(words[0] as u32 & 0xFFFF, 0x10);
        assert_eq!((words[0] as u32) >> 31, 1);
    }

    #[test]
    fn ld_forms() {
        let w = code("ld %r1, [%r2]\nld %r1, [%r2 + 4]\nld %r1, [%r2 - 1]\nld %r1, [0x800]\n");
        assert_eq!(w.len(), 5); // 1 + 1 + 1 + 2
        assert_eq!(w[1] as u32 & 0xFFFF, 4);
        assert_eq!(w[2] as u32 & 0xFFFF, 0xFFFF); // -1
        assert_eq!(w[4], 0x800);
    }

    #[test]
    fn labels_and_relocs() {
        let m = asm("start:\n\tcall puts\n\tstop\n.extern puts\n");
        assert_eq!(m.relocs.len(), 1);
        assert_eq!(m.relocs[0].offset, 1);
        let sym = &m.symbols[m.relocs[0].symbol];
        assert_eq!(sym.name, "puts");
        assert!(sym.segment.is_none());
    }

    #[test]
    fn duplicate_label_rejected() {
        assert!(asm_err("a:\nnop\na:\nnop\n").contains("duplicate label"));
    }

    #[test]
    fn undefined_symbol_rejected() {
        assert!(asm_err("jmp nowhere\n").contains("undefined symbol"));
    }

    #[test]
    fn unknown_mnemonic_has_location() {
        let e = asm_err("\n\nfrobnicate %r1\n");
        assert!(e.contains("t.s:3"), "{e}");
        assert!(e.contains("frobnicate"));
    }

    #[test]
    fn entry_binding() {
        let m = asm(".entry main\nnop\nmain:\tstop\n");
        assert_eq!(m.entry, Some((0, 1)));
        assert!(asm_err(".entry missing\nnop\n").contains("not defined"));
    }

    #[test]
    fn segments_and_word_reloc() {
        let m = asm("\t.segment data,w\nvalue:\t.word 42\n\t.segment code\n\tld %r1, [value]\n");
        let c = m.find_segment("code").unwrap();
        assert_eq!(m.relocs.len(), 1);
        assert_eq!(m.relocs[0].segment, c);
        // site stores the addend only
        assert_eq!(m.segments[c].words[m.relocs[0].offset as usize], 0);
    }

    #[test]
    fn align_space_org() {
        let m = asm(".segment data\n.word 1\n.align 4\n.word 2\n.space 2\n.word 3\n.org 12\n.word 4\n");
        let d = &m.segments[1].words;
        assert_eq!(d.len(), 13);
        assert_eq!(d[4], 2);
        assert_eq!(d[7], 3);
        assert_eq!(d[12], 4);
        assert!(asm_err(".word 1, 2\n.org 1\n").contains("backwards"));
    }

    #[test]
    fn emit_bin_patches_relocs() {
        let m = asm("\tjmp target\nnop\ntarget:\tstop\n");
        let img = emit_bin(&m, 0x1000, None).unwrap();
        assert_eq!(img.words.len(), 4);
        assert_eq!(img.words[1], 0x1003); // absolute patched target
        let img0 = emit_bin(&m, 0, None).unwrap();
        assert_eq!(img0.words[1], 3);
    }

    #[test]
    fn emit_bin_rejects_externals() {
        let m = asm(".extern puts\ncall puts\n");
        assert!(matches!(emit_bin(&m, 0, None), Err(BinError::Unresolved(_))));
    }

    #[test]
    fn entry_disp_verified() {
        let m = asm(".entry main\nnop\nmain: stop\n");
        assert!(emit_bin(&m, 0x100, Some(1)).is_ok());
        assert!(matches!(
            emit_bin(&m, 0x100, Some(0)),
            Err(BinError::EntryMismatch { actual: 0x101, required: 0x100 })
        ));
    }

    #[test]
    fn listing_shows_addresses_and_words() {
        let a = assemble("start:\tmov %r1, 7\n\tstop\n", "t.s").unwrap();
        assert!(a.listing.contains("81100000"), "{}", a.listing);
        assert!(a.listing.contains("start:"));
    }

    #[test]
    fn int_and_ports_need_constants() {
        assert!(asm_err("label:\nint label\n").contains("constant"));
    }

    #[test]
    fn far_control_transfers() {
        let w = code("jmpf %s3, 0x20\ncallf %s1, handler\nhandler: iret\n");
        // jmpf fits imm16; callf promotes for the label
        assert_eq!(w.len(), 4);
    }
}
