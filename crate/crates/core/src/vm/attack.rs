//! Attack scripts: declarative attacker actions bound to trigger points.
//!
//! A script is a list of lines of the form
//!
//! ```text
//! on <label>[#k]: read <addr> <len> as <name>
//! on <label>[#k]: write <addr> <value>
//! on <label>[#k]: note <text>
//! ```
//!
//! fired when execution reaches the `#k`-th occurrence of
//! `attack_point "<label>"` (every occurrence when `#k` is omitted). The
//! attacker reads arbitrary mapped memory and writes anywhere writable;
//! writes into read-only ranges are rejected and logged. Reserved registers
//! have no address and cannot be named at all.
//!
//! Address expressions, resolved at trigger time:
//!
//! - `0x1f0` / `4096` — absolute
//! - `&g`, `&g+8` — a global's address
//! - `frame[k]` — current frame pointer plus `k` (saved frame pointer at
//!   `frame[0]`, return address at `frame[8]`, MAC slot at `frame[-16]`)
//! - `macslot(<addr>)` — the MAC-table slot shadowing `<addr>`
//! - `*name`, `*name+8` — the u64 led by a prior read, as an address
//! - `code(f)` — entry address of function `f`
//! - `@name` — the address a prior read named `name` was taken from
//!
//! Value expressions: `hex:<bytes>`, `u64:<n>` (8 bytes little-endian),
//! `name` / `name[a..b]` (bytes of a prior read), `ptr(<addr>)` (8 bytes
//! little-endian of a resolved address).

use serde::Serialize;
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptError {
    pub line: u32,
    pub msg: String,
}

impl fmt::Display for ScriptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "attack script line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ScriptError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddrExpr {
    Abs(u64),
    Global { name: String, offset: i64 },
    Frame { offset: i64 },
    MacSlot(Box<AddrExpr>),
    Deref { name: String, offset: i64 },
    Code { func: String },
    AddrOfRead { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueExpr {
    Hex(Vec<u8>),
    U64(u64),
    Bytes { name: String, range: Option<(usize, usize)> },
    Ptr(AddrExpr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Read { addr: AddrExpr, len: u64, name: String },
    Write { addr: AddrExpr, value: ValueExpr },
    Note(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerEntry {
    pub label: String,
    /// 1-based occurrence filter; `None` fires on every occurrence.
    pub occurrence: Option<u64>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttackScript {
    pub entries: Vec<TriggerEntry>,
}

impl AttackScript {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// What actually happened when each action ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackLogEntry {
    Read { addr: u64, len: u64, name: String, ok: bool },
    Write { addr: u64, len: u64, ok: bool, reason: Option<String> },
    Note { text: String },
    ResolveFailed { detail: String },
}

/// Bytes bound by prior reads, with the address each was read from.
#[derive(Debug, Default)]
pub struct ScriptEnv {
    pub bindings: HashMap<String, (u64, Vec<u8>)>,
}

pub fn parse_script(text: &str) -> Result<AttackScript, ScriptError> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno as u32 + 1;
        // `#` starts a comment, except in the occurrence marker `label#k`,
        // which always sits before the trigger's `:`.
        let line = if raw.trim_start().starts_with('#') {
            ""
        } else {
            match raw.find(':') {
                Some(c) => match raw[c..].find('#') {
                    Some(h) => &raw[..c + h],
                    None => raw,
                },
                None => raw,
            }
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        entries.push(parse_line(line, lineno)?);
    }
    Ok(AttackScript { entries })
}

fn err(line: u32, msg: impl Into<String>) -> ScriptError {
    ScriptError {
        line,
        msg: msg.into(),
    }
}

fn parse_line(line: &str, no: u32) -> Result<TriggerEntry, ScriptError> {
    let rest = line
        .strip_prefix("on ")
        .ok_or_else(|| err(no, "expected `on <label>[#k]: <action>`"))?;
    let colon = rest
        .find(':')
        .ok_or_else(|| err(no, "missing `:` after trigger"))?;
    let (trigger, action_text) = (rest[..colon].trim(), rest[colon + 1..].trim());
    let (label, occurrence) = match trigger.split_once('#') {
        Some((l, k)) => {
            let k: u64 = k
                .parse()
                .map_err(|_| err(no, format!("invalid occurrence index `{k}`")))?;
            if k == 0 {
                return Err(err(no, "occurrence indices are 1-based"));
            }
            (l.trim().to_string(), Some(k))
        }
        None => (trigger.to_string(), None),
    };
    if label.is_empty() {
        return Err(err(no, "empty trigger label"));
    }

    let mut words = action_text.split_whitespace();
    let action = match words.next() {
        Some("read") => {
            let addr = parse_addr(words.next().ok_or_else(|| err(no, "read: missing address"))?, no)?;
            let len: u64 = words
                .next()
                .ok_or_else(|| err(no, "read: missing length"))?
                .parse()
                .map_err(|_| err(no, "read: invalid length"))?;
            match (words.next(), words.next()) {
                (Some("as"), Some(name)) => Action::Read {
                    addr,
                    len,
                    name: name.to_string(),
                },
                _ => return Err(err(no, "read: expected `as <name>`")),
            }
        }
        Some("write") => {
            let addr = parse_addr(
                words.next().ok_or_else(|| err(no, "write: missing address"))?,
                no,
            )?;
            let value = parse_value(
                words.next().ok_or_else(|| err(no, "write: missing value"))?,
             no,
            )?;
            Action::Write { addr, value }
        }
        Some("note") => Action::Note(action_text["note".len()..].trim().to_string()),
        other => {
            return Err(err(
                no,
                format!("unknown action `{}`", other.unwrap_or("")),
            ))
        }
    };
    Ok(TriggerEntry {
        label,
        occurrence,
        action,
    })
}

fn split_offset(s: &str) -> (&str, i64) {
    // trailing +N / -N on symbolic bases
    for (i, c) in s.char_indices().skip(1) {
        if c == '+' || c == '-' {
            if let Ok(off) = s[i..].parse::<i64>() {
                return (&s[..i], off);
            }
        }
    }
    (s, 0)
}

fn parse_num(s: &str) -> Option<u64> {
    if let Some(hexpart) = s.strip_prefix("0x") {
        u64::from_str_radix(hexpart, 16).ok()
    } else {
        s.parse::<u64>().ok()
    }
}

fn parse_addr(tok: &str, no: u32) -> Result<AddrExpr, ScriptError> {
    if let Some(n) = parse_num(tok) {
        return Ok(AddrExpr::Abs(n));
    }
    if let Some(rest) = tok.strip_prefix('&') {
        let (name, offset) = split_offset(rest);
        return Ok(AddrExpr::Global {
            name: name.to_string(),
            offset,
        });
    }
    if let Some(rest) = tok.strip_prefix("frame[") {
        let inner = rest
            .strip_suffix(']')
            .ok_or_else(|| err(no, "frame[..]: missing `]`"))?;
        let offset: i64 = inner
            .parse()
            .map_err(|_| err(no, format!("frame[..]: invalid offset `{inner}`")))?;
        return Ok(AddrExpr::Frame { offset });
    }
    if let Some(rest) = tok.strip_prefix("macslot(") {
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| err(no, "macslot(..): missing `)`"))?;
        return Ok(AddrExpr::MacSlot(Box::new(parse_addr(inner, no)?)));
    }
    if let Some(rest) = tok.strip_prefix("code(") {
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| err(no, "code(..): missing `)`"))?;
        return Ok(AddrExpr::Code {
            func: inner.to_string(),
        });
    }
    if let Some(rest) = tok.strip_prefix('*') {
        let (name, offset) = split_offset(rest);
        return Ok(AddrExpr::Deref {
            name: name.to_string(),
            offset,
        });
    }
    if let Some(rest) = tok.strip_prefix('@') {
        return Ok(AddrExpr::AddrOfRead {
            name: rest.to_string(),
        });
    }
    Err(err(no, format!("invalid address expression `{tok}`")))
}

fn parse_value(tok: &str, no: u32) -> Result<ValueExpr, ScriptError> {
    if let Some(h) = tok.strip_prefix("hex:") {
        if h.is_empty() || h.len() % 2 != 0 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(err(no, format!("invalid hex bytes `{h}`")));
        }
        let bytes = (0..h.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&h[i..i + 2], 16).unwrap())
            .collect();
        return Ok(ValueExpr::Hex(bytes));
    }
    if let Some(n) = tok.strip_prefix("u64:") {
        let v = parse_num(n).ok_or_else(|| err(no, format!("invalid u64 `{n}`")))?;
        return Ok(ValueExpr::U64(v));
    }
    if let Some(rest) = tok.strip_prefix("ptr(") {
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| err(no, "ptr(..): missing `)`"))?;
        return Ok(ValueExpr::Ptr(parse_addr(inner, no)?));
    }
    // name or name[a..b]
    if let Some(open) = tok.find('[') {
        let name = &tok[..open];
        let inner = tok[open + 1..]
            .strip_suffix(']')
            .ok_or_else(|| err(no, "slice: missing `]`"))?;
        let (a, b) = inner
            .split_once("..")
            .ok_or_else(|| err(no, "slice: expected `a..b`"))?;
        let a: usize = a.parse().map_err(|_| err(no, "slice: invalid start"))?;
        let b: usize = b.parse().map_err(|_| err(no, "slice: invalid end"))?;
        if a >= b {
            return Err(err(no, "slice: empty range"));
        }
        return Ok(ValueExpr::Bytes {
            name: name.to_string(),
            range: Some((a, b)),
        });
    }
    Ok(ValueExpr::Bytes {
        name: tok.to_string(),
        range: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_read_write_note() {
        let s = parse_script(
            "# capture then replay
             on observe: read frame[8] 8 as ra
             on observe: read macslot(frame[8]) 16 as m
             on replay#2: write @ra ra
             on replay#2: write &g+8 hex:deadbeef
             on replay#2: write frame[0] u64:4096
             on replay#2: write frame[8] ptr(code(evil))
             on replay#2: note replay planted
            ",
        )
        .unwrap();
        assert_eq!(s.entries.len(), 7);
        assert_eq!(s.entries[0].label, "observe");
        assert_eq!(s.entries[0].occurrence, None);
        assert_eq!(s.entries[2].occurrence, Some(2));
        assert!(matches!(
            &s.entries[1].action,
            Action::Read { addr: AddrExpr::MacSlot(_), len: 16, .. }
        ));
        assert!(matches!(
            &s.entries[3].action,
            Action::Write { value: ValueExpr::Hex(b), .. } if b == &vec![0xde, 0xad, 0xbe, 0xef]
        ));
    }

    #[test]
    fn slices_and_derefs() {
        let s = parse_script("on p: write *cell+8 saved[0..8]").unwrap();
        match &s.entries[0].action {
            Action::Write { addr, value } => {
                assert_eq!(
                    *addr,
                    AddrExpr::Deref {
                        name: "cell".into(),
                        offset: 8
                    }
                );
                assert_eq!(
                    *value,
                    ValueExpr::Bytes {
                        name: "saved".into(),
                        range: Some((0, 8))
                    }
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_script("read 0x10 8 as x").is_err());
        assert!(parse_script("on p: read nowhere 8 as x").is_err());
        assert!(parse_script("on p#0: note zero").is_err());
        assert!(parse_script("on p: write 0x10 hex:abc").is_err());
    }
}
