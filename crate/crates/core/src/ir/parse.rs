//! Recursive-descent parser for the textual IR.
//!
//! Parsing runs in three steps: lex the whole file, pre-scan item headers so
//! functions, tables, records and globals can be referenced before they are
//! declared, then parse bodies against the collected name environment.
//! Branch targets are patched after each function body completes.

use super::*;
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.msg)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Assign,
    Dot,
    Arrow,
    Amp,
    At,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(n) => format!("`{n}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Assign => "`=`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Arrow => "`->`".into(),
            Tok::Amp => "`&`".into(),
            Tok::At => "`@`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

const RESERVED: &[&str] = &[
    "fn", "record", "table", "global", "roglobal", "local", "macframe", "vtable", "int64",
    "rawptr", "rec", "void", "sig",
];

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

type Spanned = (Tok, u32, u32);

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.src.get(self.pos).copied()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.pos + 1).copied()
    }

    fn lex(mut self) -> Result<Vec<Spanned>, ParseError> {
        let mut out = Vec::new();
        loop {
            // skip whitespace and # comments
            loop {
                match self.peek() {
                    Some(b) if b.is_ascii_whitespace() => {
                        self.bump();
                    }
                    Some(b'#') => {
                        while let Some(b) = self.peek() {
                            if b == b'\n' {
                                break;
                            }
                            self.bump();
                        }
                    }
                    _ => break,
                }
            }
            let (line, col) = (self.line, self.col);
            let b = match self.peek() {
                None => {
                    out.push((Tok::Eof, line, col));
                    return Ok(out);
                }
                Some(b) => b,
            };
            let tok = match b {
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'{' => {
                    self.bump();
                    Tok::LBrace
                }
                b'}' => {
                    self.bump();
                    Tok::RBrace
                }
                b'[' => {
                    self.bump();
                    Tok::LBracket
                }
                b']' => {
                    self.bump();
                    Tok::RBracket
                }
                b',' => {
                    self.bump();
                    Tok::Comma
                }
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b'=' => {
                    self.bump();
                    Tok::Assign
                }
                b'.' => {
                    self.bump();
                    Tok::Dot
                }
                b'&' => {
                    self.bump();
                    Tok::Amp
                }
                b'@' => {
                    self.bump();
                    Tok::At
                }
                b'-' => {
                    self.bump();
                    match self.peek() {
                        Some(b'>') => {
                            self.bump();
                            Tok::Arrow
                        }
                        Some(d) if d.is_ascii_digit() => {
                            let n = self.lex_number()?;
                            Tok::Int(n.wrapping_neg())
                        }
                        _ => return Err(self.err("expected `->` or a number after `-`")),
                    }
                }
                b'"' => {
                    self.bump();
                    let mut s = String::new();
                    loop {
                        match self.bump() {
                            None | Some(b'\n') => {
                                return Err(self.err("unterminated string literal"))
                            }
                            Some(b'"') => break,
                            Some(c) => s.push(c as char),
                        }
                    }
                    Tok::Str(s)
                }
                d if d.is_ascii_digit() => Tok::Int(self.lex_number()?),
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let mut s = String::new();
                    while let Some(c) = self.peek() {
                        if c.is_ascii_alphanumeric() || c == b'_' {
                            s.push(c as char);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(s)
                }
                other => return Err(self.err(format!("unexpected character `{}`", other as char))),
            };
            out.push((tok, line, col));
        }
    }

    fn lex_number(&mut self) -> Result<i64, ParseError> {
        let mut s = String::new();
        if self.peek() == Some(b'0') && matches!(self.peek2(), Some(b'x') | Some(b'X')) {
            self.bump();
            self.bump();
            while let Some(c) = self.peek() {
                if c.is_ascii_hexdigit() || c == b'_' {
                    if c != b'_' {
                        s.push(c as char);
                    }
                    self.bump();
                } else {
                    break;
                }
            }
            u64::from_str_radix(&s, 16)
                .map(|v| v as i64)
                .map_err(|_| self.err("invalid hex literal"))
        } else {
            while let Some(c) = self.peek() {
                if c.is_ascii_digit() || c == b'_' {
                    if c != b'_' {
                        s.push(c as char);
                    }
                    self.bump();
                } else {
                    break;
                }
            }
            s.parse::<i64>().map_err(|_| self.err("invalid integer literal"))
        }
    }
}

/// Names declared at module level, collected before bodies are parsed so
/// that forward references resolve.
#[derive(Default)]
struct NameEnv {
    functions: HashMap<String, FuncId>,
    tables: HashMap<String, TableId>,
    records: HashMap<String, RecordId>,
    globals: HashMap<String, GlobalId>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    env: NameEnv,
}

pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let toks = Lexer::new(text).lex()?;
    let env = prescan(&toks)?;
    let mut p = Parser { toks, pos: 0, env };
    p.module()
}

fn prescan(toks: &[Spanned]) -> Result<NameEnv, ParseError> {
    let mut env = NameEnv::default();
    let mut i = 0;
    let mut depth = 0u32;
    let dup = |kind: &str, name: &str, line: u32, col: u32| ParseError {
        line,
        col,
        msg: format!("duplicate {kind} name `{name}`"),
    };
    while i + 1 < toks.len() {
        match &toks[i].0 {
            Tok::LBrace => depth += 1,
            Tok::RBrace => depth = depth.saturating_sub(1),
            _ => {}
        }
        if let (Tok::Ident(kw), line, col) = &toks[i] {
            // item keywords count only at top level: `fn` also shows up as
            // a type constructor and as a class-kind token inside bodies
            let header = depth == 0
                && matches!(
                    kw.as_str(),
                    "fn" | "record" | "table" | "global" | "roglobal"
                );
            if header {
                if let (Tok::Ident(name), ..) = &toks[i + 1] {
                    let name = name.clone();
                    match kw.as_str() {
                        "fn" => {
                            if env.functions.insert(name.clone(), env.functions.len()).is_some() {
                                return Err(dup("function", &name, *line, *col));
                            }
                        }
                        "record" => {
                            if env.records.insert(name.clone(), env.records.len()).is_some() {
                                return Err(dup("record", &name, *line, *col));
                            }
                        }
                        "table" => {
                            if env.tables.insert(name.clone(), env.tables.len()).is_some() {
                                return Err(dup("table", &name, *line, *col));
                            }
                        }
                        _ => {
                            if env.globals.insert(name.clone(), env.globals.len()).is_some() {
                                return Err(dup("global", &name, *line, *col));
                            }
                        }
                    }
                }
            }
        }
        i += 1;
    }
    Ok(env)
}

impl Parser {
    fn cur(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn here(&self) -> (u32, u32) {
        (self.toks[self.pos].1, self.toks[self.pos].2)
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.cur() == want {
            self.advance();
            Ok(())
        } else {
            Err(self.err_here(format!(
                "expected {}, found {}",
                want.describe(),
                self.cur().describe()
            )))
        }
    }

    fn eat_if(&mut self, want: &Tok) -> bool {
        if self.cur() == want {
            self.advance();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.cur().clone() {
            Tok::Ident(s) => {
                self.advance();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected {what}, found {}", other.describe()))),
        }
    }

    fn user_name(&mut self, what: &str) -> Result<String, ParseError> {
        let (line, col) = self.here();
        let name = self.ident(what)?;
        if RESERVED.contains(&name.as_str()) {
            return Err(ParseError {
                line,
                col,
                msg: format!("`{name}` is a reserved word"),
            });
        }
        Ok(name)
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match *self.cur() {
            Tok::Int(n) => {
                self.advance();
                Ok(n)
            }
            _ => Err(self.err_here(format!("expected integer, found {}", self.cur().describe()))),
        }
    }

    fn module(&mut self) -> Result<Module, ParseError> {
        // Pre-size so items land at the ids the prescan assigned.
        let mut m = Module {
            records: vec![
                RecordDef {
                    name: String::new(),
                    vtable: None,
                    fields: vec![]
                };
                self.env.records.len()
            ],
            tables: vec![
                MethodTable {
                    name: String::new(),
                    entries: vec![]
                };
                self.env.tables.len()
            ],
            globals: vec![
                Global {
                    name: String::new(),
                    ty: TypeDesc::Int64,
                    init: GlobalInit::Zero,
                    readonly: false
                };
                self.env.globals.len()
            ],
            functions: vec![
                Function {
                    name: String::new(),
                    params: vec![],
                    locals: vec![],
                    ret: None,
                    has_mac_slot: false,
                    temp_names: vec![],
                    body: vec![]
                };
                self.env.functions.len()
            ],
        };
        loop {
            match self.cur().clone() {
                Tok::Eof => break,
                Tok::Ident(kw) => match kw.as_str() {
                    "record" => self.record_decl(&mut m)?,
                    "table" => self.table_decl(&mut m)?,
                    "global" | "roglobal" => self.global_decl(&mut m)?,
                    "fn" => self.fn_decl(&mut m)?,
                    other => {
                        return Err(self.err_here(format!(
                            "expected `record`, `table`, `global`, `roglobal` or `fn`, found `{other}`"
                        )))
                    }
                },
                other => {
                    return Err(self.err_here(format!(
                        "expected an item, found {}",
                        other.describe()
                    )))
                }
            }
        }
        Ok(m)
    }

    fn record_decl(&mut self, m: &mut Module) -> Result<(), ParseError> {
        self.advance(); // record
        let name = self.user_name("record name")?;
        let id = self.env.records[&name];
        let mut vtable = None;
        if let Tok::Ident(s) = self.cur() {
            if s == "vtable" {
                self.advance();
                self.eat(Tok::LParen)?;
                let tname = self.ident("table name")?;
                vtable = Some(self.lookup_table(&tname)?);
                self.eat(Tok::RParen)?;
            }
        }
        self.eat(Tok::LBrace)?;
        let mut fields = Vec::new();
        if !self.eat_if(&Tok::RBrace) {
            loop {
                let fname = self.user_name("field name")?;
                self.eat(Tok::Colon)?;
                let ty = self.type_desc()?;
                fields.push((fname, ty));
                if self.eat_if(&Tok::Comma) {
                    continue;
                }
                self.eat(Tok::RBrace)?;
                break;
            }
        }
        m.records[id] = RecordDef { name, vtable, fields };
        Ok(())
    }

    fn table_decl(&mut self, m: &mut Module) -> Result<(), ParseError> {
        self.advance(); // table
        let name = self.user_name("table name")?;
        let id = self.env.tables[&name];
        self.eat(Tok::LBrace)?;
        let mut entries = Vec::new();
        if !self.eat_if(&Tok::RBrace) {
            loop {
                let fname = self.ident("function name")?;
                entries.push(self.lookup_function(&fname)?);
                if self.eat_if(&Tok::Comma) {
                    continue;
                }
                self.eat(Tok::RBrace)?;
                break;
            }
        }
        m.tables[id] = MethodTable { name, entries };
        Ok(())
    }

    fn global_decl(&mut self, m: &mut Module) -> Result<(), ParseError> {
        let readonly = matches!(self.cur(), Tok::Ident(s) if s == "roglobal");
        self.advance();
        let name = self.user_name("global name")?;
        let id = self.env.globals[&name];
        self.eat(Tok::Colon)?;
        let ty = self.type_desc()?;
        let init = if self.eat_if(&Tok::Assign) {
            self.global_init()?
        } else {
            GlobalInit::Zero
        };
        m.globals[id] = Global {
            name,
            ty,
            init,
            readonly,
        };
        Ok(())
    }

    fn global_init(&mut self) -> Result<GlobalInit, ParseError> {
        match self.cur().clone() {
            Tok::Int(n) => {
                self.advance();
                Ok(GlobalInit::Int(n))
            }
            Tok::At => {
                self.advance();
                let name = self.ident("function or table name")?;
                if let Some(&f) = self.env.functions.get(&name) {
                    Ok(GlobalInit::Func(f))
                } else if let Some(&t) = self.env.tables.get(&name) {
                    Ok(GlobalInit::Table(t))
                } else {
                    Err(self.err_here(format!("unknown function or table `{name}`")))
                }
            }
            Tok::LBrace => {
                self.advance();
                let mut items = Vec::new();
                if !self.eat_if(&Tok::RBrace) {
                    loop {
                        items.push(self.global_init()?);
                        if self.eat_if(&Tok::Comma) {
                            continue;
                        }
                        self.eat(Tok::RBrace)?;
                        break;
                    }
                }
                Ok(GlobalInit::Record(items))
            }
            other => Err(self.err_here(format!(
                "expected initializer, found {}",
                other.describe()
            ))),
        }
    }

    fn type_desc(&mut self) -> Result<TypeDesc, ParseError> {
        let name = self.ident("type")?;
        match name.as_str() {
            "int64" => Ok(TypeDesc::Int64),
            "rawptr" => Ok(TypeDesc::RawPtr),
            "fn" => {
                self.eat(Tok::LParen)?;
                let mut params = Vec::new();
                if !matches!(self.cur(), Tok::Arrow) {
                    loop {
                        params.push(self.type_desc()?);
                        if self.eat_if(&Tok::Comma) {
                            continue;
                        }
                        break;
                    }
                }
                self.eat(Tok::Arrow)?;
                let ret = self.ret_type()?;
                self.eat(Tok::RParen)?;
                Ok(TypeDesc::FnPtr(Signature {
                    params,
                    ret: ret.map(Box::new),
                }))
            }
            "rec" => {
                self.eat(Tok::LParen)?;
                let rname = self.ident("record name")?;
                if !self.env.records.contains_key(&rname) {
                    return Err(self.err_here(format!("unknown record type `{rname}`")));
                }
                self.eat(Tok::RParen)?;
                Ok(TypeDesc::Record(rname))
            }
            other => Err(self.err_here(format!("unknown type `{other}`"))),
        }
    }

    fn ret_type(&mut self) -> Result<Option<TypeDesc>, ParseError> {
        if matches!(self.cur(), Tok::Ident(s) if s == "void") {
            self.advance();
            Ok(None)
        } else {
            Ok(Some(self.type_desc()?))
        }
    }

    fn sig_type(&mut self) -> Result<Signature, ParseError> {
        let (line, col) = self.here();
        match self.type_desc()? {
            TypeDesc::FnPtr(sig) => Ok(sig),
            other => Err(ParseError {
                line,
                col,
                msg: format!("expected a function type, found `{}`", other.render()),
            }),
        }
    }

    fn lookup_function(&self, name: &str) -> Result<FuncId, ParseError> {
        self.env
            .functions
            .get(name)
            .copied()
            .ok_or_else(|| self.err_here(format!("unknown function `{name}`")))
    }

    fn lookup_table(&self, name: &str) -> Result<TableId, ParseError> {
        self.env
            .tables
            .get(name)
            .copied()
            .ok_or_else(|| self.err_here(format!("unknown table `{name}`")))
    }

    fn fn_decl(&mut self, m: &mut Module) -> Result<(), ParseError> {
        self.advance(); // fn
        let name = self.ident("function name")?;
        let id = self.env.functions[&name];
        self.eat(Tok::LParen)?;
        let mut params = Vec::new();
        if !self.eat_if(&Tok::RParen) {
            loop {
                let pname = self.user_name("parameter name")?;
                self.eat(Tok::Colon)?;
                let ty = self.type_desc()?;
                params.push((pname, ty));
                if self.eat_if(&Tok::Comma) {
                    continue;
                }
                self.eat(Tok::RParen)?;
                break;
            }
        }
        let ret = if self.eat_if(&Tok::Arrow) {
            self.ret_type()?
        } else {
            None
        };
        let has_mac_slot = if matches!(self.cur(), Tok::Ident(s) if s == "macframe") {
            self.advance();
            true
        } else {
            false
        };
        self.eat(Tok::LBrace)?;

        let mut fb = FnBuilder::new(&params);
        while matches!(self.cur(), Tok::Ident(s) if s == "local") {
            self.advance();
            let lname = self.user_name("local name")?;
            self.eat(Tok::Colon)?;
            let ty = self.type_desc()?;
            if fb.locals.iter().any(|(n, _)| *n == lname) {
                return Err(self.err_here(format!("duplicate local `{lname}`")));
            }
            fb.locals.push((lname, ty));
        }

        let mut body = Vec::new();
        while !self.eat_if(&Tok::RBrace) {
            if *self.cur() == Tok::Eof {
                return Err(self.err_here("unexpected end of input inside function body"));
            }
            self.stmt(m, &mut fb, &mut body)?;
        }

        // patch branch targets
        for (at, tname, line, col) in fb.label_patches {
            let target = *fb.labels.get(&tname).ok_or(ParseError {
                line,
                col,
                msg: format!("unknown label `{tname}`"),
            })?;
            match &mut body[at] {
                Instr::Br { then_to, else_to, .. } => {
                    if *then_to == usize::MAX {
                        *then_to = target;
                    } else {
                        *else_to = target;
                    }
                }
                Instr::Jmp { to } => *to = target,
                _ => unreachable!("patch target is always a branch"),
            }
        }

        m.functions[id] = Function {
            name,
            params,
            locals: fb.locals,
            ret,
            has_mac_slot,
            temp_names: fb.temp_names,
            body,
        };
        Ok(())
    }

    fn stmt(
        &mut self,
        m: &Module,
        fb: &mut FnBuilder,
        body: &mut Vec<Instr>,
    ) -> Result<(), ParseError> {
        // `name:` is a label; `name =` starts an assignment; otherwise the
        // token is an opcode mnemonic.
        if let Tok::Ident(first) = self.cur().clone() {
            if self.toks.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::Colon) {
                self.advance();
                self.advance();
                if fb.labels.insert(first.clone(), body.len()).is_some() {
                    return Err(self.err_here(format!("duplicate label `{first}`")));
                }
                return Ok(());
            }
            if self.toks.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::Assign) {
                let (line, col) = self.here();
                let dst_name = self.user_name("value name")?;
                self.advance(); // =
                let dst = fb.temp(&dst_name);
                let instr = self.assigning_instr(m, fb, dst, (line, col))?;
                body.push(instr);
                return Ok(());
            }
        }
        let instr = self.bare_instr(m, fb, body.len())?;
        body.push(instr);
        Ok(())
    }

    fn assigning_instr(
        &mut self,
        m: &Module,
        fb: &mut FnBuilder,
        dst: TempId,
        at: (u32, u32),
    ) -> Result<Instr, ParseError> {
        let op = self.ident("instruction")?;
        match op.as_str() {
            "const" => Ok(Instr::Const {
                dst,
                value: self.int()?,
            }),
            "funcref" => {
                self.eat(Tok::At)?;
                let name = self.ident("function name")?;
                Ok(Instr::FuncRef {
                    dst,
                    func: self.lookup_function(&name)?,
                })
            }
            "tableref" => {
                self.eat(Tok::At)?;
                let name = self.ident("table name")?;
                Ok(Instr::TableRef {
                    dst,
                    table: self.lookup_table(&name)?,
                })
            }
            "frameaddr" => Ok(Instr::FrameAddr { dst }),
            "add" | "sub" | "mul" | "div" | "and" | "or" | "xor" | "shl" | "shr" | "eq" | "ne"
            | "lt" | "le" | "gt" | "ge" => {
                let bop = match op.as_str() {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    "mul" => BinOp::Mul,
                    "div" => BinOp::Div,
                    "and" => BinOp::And,
                    "or" => BinOp::Or,
                    "xor" => BinOp::Xor,
                    "shl" => BinOp::Shl,
                    "shr" => BinOp::Shr,
                    "eq" => BinOp::Eq,
                    "ne" => BinOp::Ne,
                    "lt" => BinOp::Lt,
                    "le" => BinOp::Le,
                    "gt" => BinOp::Gt,
                    _ => BinOp::Ge,
                };
                let lhs = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let rhs = self.operand(fb)?;
                Ok(Instr::Bin {
                    dst,
                    op: bop,
                    lhs,
                    rhs,
                })
            }
            "load" => {
                self.eat(Tok::Dot)?;
                let ty = self.type_desc()?;
                let addr = self.operand(fb)?;
                Ok(Instr::Load { dst, ty, addr })
            }
            "cast" => {
                self.eat(Tok::Dot)?;
                let ty = self.type_desc()?;
                let value = self.operand(fb)?;
                Ok(Instr::Cast { dst, ty, value })
            }
            "alloca" => {
                let n = self.int()?;
                if n <= 0 {
                    return Err(self.err_here("alloca size must be positive"));
                }
                Ok(Instr::Alloca {
                    dst,
                    bytes: n as u64,
                })
            }
            "heap_alloc" => Ok(Instr::HeapAlloc {
                dst,
                bytes: self.operand(fb)?,
            }),
            "call" => self.call_tail(m, fb, Some(dst)),
            "icall" => self.icall_tail(fb, Some(dst)),
            "mcall" => self.mcall_tail(fb, Some(dst), false),
            "tcall" => self.mcall_tail(fb, Some(dst), true),
            "tableget" => {
                self.eat(Tok::At)?;
                let name = self.ident("table name")?;
                let table = self.lookup_table(&name)?;
                self.eat(Tok::Comma)?;
                let index = self.operand(fb)?;
                Ok(Instr::TableGet { dst, table, index })
            }
            "new_obj" => {
                let rname = self.ident("record name")?;
                let record = *self
                    .env
                    .records
                    .get(&rname)
                    .ok_or_else(|| self.err_here(format!("unknown record type `{rname}`")))?;
                Ok(Instr::NewObj { dst, record })
            }
            "checkptr" => {
                let value = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let addr = self.operand(fb)?;
                let (kind, sig) = self.mac_attrs()?;
                Ok(Instr::CheckPtr {
                    dst,
                    value,
                    addr,
                    kind,
                    sig,
                })
            }
            other => Err(ParseError {
                line: at.0,
                col: at.1,
                msg: format!("unknown instruction `{other}`"),
            }),
        }
    }

    fn bare_instr(
        &mut self,
        m: &Module,
        fb: &mut FnBuilder,
        body_len: usize,
    ) -> Result<Instr, ParseError> {
        let op_line = self.here().0;
        let op = self.ident("instruction")?;
        match op.as_str() {
            "store" => {
                self.eat(Tok::Dot)?;
                let ty = self.type_desc()?;
                let addr = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let value = self.operand(fb)?;
                Ok(Instr::Store { ty, addr, value })
            }
            "heap_free" => Ok(Instr::HeapFree {
                addr: self.operand(fb)?,
            }),
            "call" => self.call_tail(m, fb, None),
            "icall" => self.icall_tail(fb, None),
            "mcall" => self.mcall_tail(fb, None, false),
            "tcall" => self.mcall_tail(fb, None, true),
            "copy" => {
                self.eat(Tok::Dot)?;
                let (line, col) = self.here();
                let ty = self.type_desc()?;
                let record = match &ty {
                    TypeDesc::Record(name) => self.env.records[name],
                    other => {
                        return Err(ParseError {
                            line,
                            col,
                            msg: format!("copy requires a record type, found `{}`", other.render()),
                        })
                    }
                };
                let dst = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let src = self.operand(fb)?;
                Ok(Instr::CopyRec { record, dst, src })
            }
            "rawcopy" => {
                let dst = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let src = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let len = self.operand(fb)?;
                Ok(Instr::RawCopy { dst, src, len })
            }
            "ccfi_rawcopy" => {
                let dst = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let src = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let len = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let elem = self.type_desc()?;
                Ok(Instr::CcfiRawCopy {
                    dst,
                    src,
                    len,
                    elem,
                })
            }
            "macptr" => {
                let value = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let addr = self.operand(fb)?;
                let (kind, sig) = self.mac_attrs()?;
                Ok(Instr::MacPtr {
                    value,
                    addr,
                    kind,
                    sig,
                })
            }
            "ccfi_assert_nz" => {
                let value = self.operand(fb)?;
                let kind = if self.eat_if(&Tok::Comma) {
                    self.class_kind()?
                } else {
                    ClassKind::ManualData
                };
                Ok(Instr::AssertNz { value, kind })
            }
            "frame_mac" => Ok(Instr::FrameMac),
            "frame_check" => Ok(Instr::FrameCheck),
            "frame_pad" => Ok(Instr::FramePad),
            "leaf_save" => Ok(Instr::LeafSave),
            "leaf_check" => Ok(Instr::LeafCheck),
            "br" => {
                let cond = self.operand(fb)?;
                self.eat(Tok::Comma)?;
                let (l1, c1) = self.here();
                let t1 = self.ident("label")?;
                self.eat(Tok::Comma)?;
                let (l2, c2) = self.here();
                let t2 = self.ident("label")?;
                fb.label_patches.push((body_len, t1, l1, c1));
                fb.label_patches.push((body_len, t2, l2, c2));
                Ok(Instr::Br {
                    cond,
                    then_to: usize::MAX,
                    else_to: usize::MAX,
                })
            }
            "jmp" => {
                let (l, c) = self.here();
                let t = self.ident("label")?;
                fb.label_patches.push((body_len, t, l, c));
                Ok(Instr::Jmp { to: usize::MAX })
            }
            "attack_point" => match self.cur().clone() {
                Tok::Str(s) => {
                    self.advance();
                    Ok(Instr::AttackPoint { label: s })
                }
                other => Err(self.err_here(format!(
                    "expected a quoted label, found {}",
                    other.describe()
                ))),
            },
            "print" => Ok(Instr::Print {
                value: self.operand(fb)?,
            }),
            // The operand of `ret`/`halt` is optional; it must sit on the
            // same line so the next statement is not swallowed.
            "ret" => {
                let value = if self.operand_starts() && self.here().0 == op_line {
                    Some(self.operand(fb)?)
                } else {
                    None
                };
                Ok(Instr::Ret { value })
            }
            "halt" => {
                let code = if self.operand_starts() && self.here().0 == op_line {
                    self.operand(fb)?
                } else {
                    Operand::Const(0)
                };
                Ok(Instr::Halt { code })
            }
            other => Err(self.err_here(format!("unknown instruction `{other}`"))),
        }
    }

    fn call_tail(
        &mut self,
        _m: &Module,
        fb: &mut FnBuilder,
        dst: Option<TempId>,
    ) -> Result<Instr, ParseError> {
        self.eat(Tok::At)?;
        let name = self.ident("function name")?;
        let func = self.lookup_function(&name)?;
        let args = self.arg_list(fb)?;
        Ok(Instr::Call { dst, func, args })
    }

    fn icall_tail(&mut self, fb: &mut FnBuilder, dst: Option<TempId>) -> Result<Instr, ParseError> {
        let target = self.operand(fb)?;
        let args = self.arg_list(fb)?;
        Ok(Instr::ICall { dst, target, args })
    }

    fn mcall_tail(
        &mut self,
        fb: &mut FnBuilder,
        dst: Option<TempId>,
        through_table: bool,
    ) -> Result<Instr, ParseError> {
        self.eat(Tok::Dot)?;
        let sig = self.sig_type()?;
        let obj = self.operand(fb)?;
        self.eat(Tok::Comma)?;
        let index = self.operand(fb)?;
        let args = self.arg_list(fb)?;
        Ok(if through_table {
            Instr::TCall {
                dst,
                sig,
                table_ptr: obj,
                index,
                args,
            }
        } else {
            Instr::MCall {
                dst,
                sig,
                obj,
                index,
                args,
            }
        })
    }

    fn arg_list(&mut self, fb: &mut FnBuilder) -> Result<Vec<Operand>, ParseError> {
        self.eat(Tok::LParen)?;
        let mut args = Vec::new();
        if !self.eat_if(&Tok::RParen) {
            loop {
                args.push(self.operand(fb)?);
                if self.eat_if(&Tok::Comma) {
                    continue;
                }
                self.eat(Tok::RParen)?;
                break;
            }
        }
        Ok(args)
    }

    fn mac_attrs(&mut self) -> Result<(ClassKind, Option<Signature>), ParseError> {
        let mut kind = ClassKind::ManualData;
        let mut sig = None;
        while self.eat_if(&Tok::Comma) {
            match self.cur().clone() {
                Tok::Ident(s) if s == "sig" => {
                    self.advance();
                    self.eat(Tok::LParen)?;
                    sig = Some(self.sig_type()?);
                    self.eat(Tok::RParen)?;
                }
                _ => kind = self.class_kind()?,
            }
        }
        Ok((kind, sig))
    }

    fn class_kind(&mut self) -> Result<ClassKind, ParseError> {
        let (line, col) = self.here();
        let name = self.ident("class kind")?;
        match name.as_str() {
            "fn" => Ok(ClassKind::FunctionPointer),
            "vtable" => Ok(ClassKind::VTablePointer),
            "data" => Ok(ClassKind::ManualData),
            "ret" => Ok(ClassKind::ReturnAddress),
            other => Err(ParseError {
                line,
                col,
                msg: format!("unknown class kind `{other}` (expected fn, vtable, data or ret)"),
            }),
        }
    }

    fn operand_starts(&self) -> bool {
        matches!(self.cur(), Tok::Ident(_) | Tok::Int(_) | Tok::Amp)
    }

    fn operand(&mut self, fb: &mut FnBuilder) -> Result<Operand, ParseError> {
        match self.cur().clone() {
            Tok::Int(n) => {
                self.advance();
                Ok(Operand::Const(n))
            }
            Tok::Amp => {
                self.advance();
                let name = self.ident("local or global name")?;
                if let Some(i) = fb.locals.iter().position(|(n, _)| *n == name) {
                    Ok(Operand::AddrOfLocal(i))
                } else if let Some(&g) = self.env.globals.get(&name) {
                    Ok(Operand::AddrOfGlobal(g))
                } else {
                    Err(self.err_here(format!("unknown local or global `{name}`")))
                }
            }
            Tok::Ident(name) => {
                self.advance();
                match fb.temp_id(&name) {
                    Some(t) => Ok(Operand::Temp(t)),
                    None => Err(self.err_here(format!("use of undefined value `{name}`"))),
                }
            }
            Tok::At => Err(self.err_here(
                "function references are values: bind one with `x = funcref @name` first",
            )),
            other => Err(self.err_here(format!("expected operand, found {}", other.describe()))),
        }
    }
}

struct FnBuilder {
    locals: Vec<(String, TypeDesc)>,
    temp_names: Vec<String>,
    labels: HashMap<String, usize>,
    label_patches: Vec<(usize, String, u32, u32)>,
}

impl FnBuilder {
    fn new(params: &[(String, TypeDesc)]) -> Self {
        FnBuilder {
            locals: Vec::new(),
            temp_names: params.iter().map(|(n, _)| n.clone()).collect(),
            labels: HashMap::new(),
            label_patches: Vec::new(),
        }
    }

    fn temp_id(&self, name: &str) -> Option<TempId> {
        self.temp_names.iter().position(|n| n == name)
    }

    fn temp(&mut self, name: &str) -> TempId {
        match self.temp_id(name) {
            Some(t) => t,
            None => {
                self.temp_names.push(name.to_string());
                self.temp_names.len() - 1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_module() {
        let m = parse_module("fn main() -> int64 { print 42\n ret 0 }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].name, "main");
        assert_eq!(m.functions[0].body.len(), 2);
    }

    #[test]
    fn forward_references_resolve() {
        let src = "
            fn main() -> int64 {
              f = funcref @late
              r = icall f(2)
              print r
              ret 0
            }
            fn late(x: int64) -> int64 { y = add x, 40\n ret y }
        ";
        let m = parse_module(src).unwrap();
        assert_eq!(m.functions.len(), 2);
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_module("fn main( { }").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.col > 1);
    }

    #[test]
    fn duplicate_function_rejected() {
        let err = parse_module("fn a() { ret }\nfn a() { ret }").unwrap_err();
        assert!(err.msg.contains("duplicate function"));
    }

    #[test]
    fn unknown_type_rejected() {
        let err = parse_module("global g: float64").unwrap_err();
        assert!(err.msg.contains("unknown type"));
    }

    #[test]
    fn labels_and_branches() {
        let src = "
            fn main() -> int64 {
              i = const 0
            top:
              i = add i, 1
              c = lt i, 10
              br c, top, done
            done:
              print i
              ret 0
            }
        ";
        let m = parse_module(src).unwrap();
        let body = &m.functions[0].body;
        match &body[3] {
            Instr::Br { then_to, else_to, .. } => {
                assert_eq!(*then_to, 1);
                assert_eq!(*else_to, 4);
            }
            other => panic!("expected br, got {other:?}"),
        }
    }

    #[test]
    fn record_table_global_roundtrip_shapes() {
        let src = "
            record Pair { lo: int64, cb: fn(->int64) }
            record Obj vtable(VT) { x: int64 }
            table VT { h }
            global g: rec(Pair) = { 3, @h }
            roglobal r: int64 = 9
            fn h() -> int64 { ret 1 }
            fn main() -> int64 { ret 0 }
        ";
        let m = parse_module(src).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].vtable, Some(0));
        assert_eq!(m.tables[0].entries, vec![0]);
        assert!(m.globals[1].readonly);
        assert_eq!(m.size_of(&TypeDesc::Record("Pair".into())), 16);
        assert_eq!(m.size_of(&TypeDesc::Record("Obj".into())), 16);
    }
}
