//! Meaning-representation (MR) language used in dialog plots.
//!
//! Actions are pseudocode calls such as
//! `get_alarms(ordered_by="time", index=0).check(time)`:
//!
//! ```text
//! action := IDENT '(' arglist? ')' chain*
//! chain  := '.' IDENT ( '(' arglist? ')' )?
//! arg    := IDENT ( '=' value )?
//! value  := STRING | INT | BOOL | action
//! ```
//!
//! Bare-identifier args (no `=`) are only accepted inside chain calls.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::AppContext;
use crate::values::parse_display_date;

/// A literal that can be stored in an app-context record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl Scalar {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{}", if *b { "True" } else { "False" }),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

/// One app-context record: slot name to value, in insertion order.
pub type Record = IndexMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Str(String),
    Int(i64),
    Bool(bool),
    Action(Box<Action>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<Scalar> {
        match self {
            Value::Str(s) => Some(Scalar::Str(s.clone())),
            Value::Int(i) => Some(Scalar::Int(*i)),
            Value::Bool(b) => Some(Scalar::Bool(*b)),
            Value::Action(_) => None,
        }
    }

    pub fn as_action(&self) -> Option<&Action> {
        match self {
            Value::Action(a) => Some(a),
            _ => None,
        }
    }
}

impl From<Scalar> for Value {
    fn from(s: Scalar) -> Self {
        match s {
            Scalar::Str(s) => Value::Str(s),
            Scalar::Int(i) => Value::Int(i),
            Scalar::Bool(b) => Value::Bool(b),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<Action> for Value {
    fn from(a: Action) -> Self {
        Value::Action(Box::new(a))
    }
}

/// A keyword argument. `value == None` is a bare identifier such as the
/// `time` in `check(time)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Arg {
    pub key: String,
    pub value: Option<Value>,
}

impl Arg {
    pub fn new(key: impl Into<String>, value: impl Into<Value>) -> Self {
        Arg {
            key: key.into(),
            value: Some(value.into()),
        }
    }

    /// An unnamed nested action, as in `notify_done(create(time="07:00"))`.
    pub fn positional(action: Action) -> Self {
        Arg {
            key: String::new(),
            value: Some(Value::Action(Box::new(action))),
        }
    }

    pub fn bare(key: impl Into<String>) -> Self {
        Arg {
            key: key.into(),
            value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Call { name: String, args: Vec<Arg> },
    Field(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Action {
    pub head: String,
    pub args: Vec<Arg>,
    pub chain: Vec<Segment>,
}

pub const SELF_CORRECTION: &str = "self_correction";
pub const ORDERED_BY: &str = "ordered_by";
pub const INDEX: &str = "index";

impl Action {
    pub fn new(head: impl Into<String>) -> Self {
        Action {
            head: head.into(),
            args: Vec::new(),
            chain: Vec::new(),
        }
    }

    pub fn with_args(head: impl Into<String>, args: Vec<Arg>) -> Self {
        Action {
            head: head.into(),
            args,
            chain: Vec::new(),
        }
    }

    pub fn call(mut self, name: impl Into<String>, args: Vec<Arg>) -> Self {
        self.chain.push(Segment::Call {
            name: name.into(),
            args,
        });
        self
    }

    pub fn field(mut self, name: impl Into<String>) -> Self {
        self.chain.push(Segment::Field(name.into()));
        self
    }

    pub fn arg(&self, key: &str) -> Option<&Arg> {
        self.args.iter().find(|a| a.key == key)
    }

    pub fn arg_mut(&mut self, key: &str) -> Option<&mut Arg> {
        self.args.iter_mut().find(|a| a.key == key)
    }

    /// True when the last chain segment is a `self_correction(...)` call.
    pub fn has_self_correction(&self) -> bool {
        matches!(self.chain.last(), Some(Segment::Call { name, .. }) if name == SELF_CORRECTION)
    }

    /// True when the head call uses `ordered_by`/`index` selection.
    pub fn is_complex_referral(&self) -> bool {
        self.head.starts_with("get_") && (self.arg(ORDERED_BY).is_some() || self.arg(INDEX).is_some())
    }

    /// Visit this action and every action nested inside its argument values.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Action)) {
        f(self);
        let chain_args = self.chain.iter().filter_map(|s| match s {
            Segment::Call { args, .. } => Some(args),
            Segment::Field(_) => None,
        });
        for args in std::iter::once(&self.args).chain(chain_args) {
            for arg in args {
                if let Some(Value::Action(inner)) = &arg.value {
                    inner.walk(f);
                }
            }
        }
    }

    /// Literal (key, value) pairs of this action and all nested actions,
    /// in textual order.
    pub fn literals(&self) -> Vec<(&str, Scalar)> {
        let mut out = Vec::new();
        collect_literals(self, &mut out);
        out
    }
}

fn collect_literals<'a>(a: &'a Action, out: &mut Vec<(&'a str, Scalar)>) {
    let chain_args = a.chain.iter().filter_map(|s| match s {
        Segment::Call { args, .. } => Some(args),
        Segment::Field(_) => None,
    });
    for args in std::iter::once(&a.args).chain(chain_args) {
        for arg in args {
            match &arg.value {
                Some(Value::Action(inner)) => collect_literals(inner, out),
                Some(v) => out.push((arg.key.as_str(), v.as_scalar().expect("scalar"))),
                None => {}
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_action(self))
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&print_action(self))
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_action(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" | "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Eq,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Eq => "`=`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    /// Returns the next token and the byte offset it starts at.
    fn next(&mut self) -> Result<(usize, Tok), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return Ok((start, Tok::End));
        };
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '.' => Some(Tok::Dot),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            return Ok((start, t));
        }
        if c == '"' {
            let mut out = String::new();
            let mut chars = rest.char_indices().skip(1);
            while let Some((i, ch)) = chars.next() {
                match ch {
                    '"' => {
                        self.pos = start + i + 1;
                        return Ok((start, Tok::Str(out)));
                    }
                    '\\' => match chars.next() {
                        Some((_, esc @ ('"' | '\\'))) => out.push(esc),
                        Some((_, 'n')) => out.push('\n'),
                        Some((j, other)) => {
                            return Err(ParseError {
                                offset: start + j,
                                expected: vec!["escape `\\\"`, `\\\\` or `\\n`"],
                                found: format!("`\\{other}`"),
                            })
                        }
                        None => break,
                    },
                    _ => out.push(ch),
                }
            }
            return Err(ParseError {
                offset: self.src.len(),
                expected: vec!["closing `\"`"],
                found: "end of input".into(),
            });
        }
        if c == '-' || c.is_ascii_digit() {
            let len = rest
                .char_indices()
                .skip(1)
                .find(|(_, ch)| !ch.is_ascii_digit())
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            let text = &rest[..len];
            return match text.parse::<i64>() {
                Ok(i) => {
                    self.pos += len;
                    Ok((start, Tok::Int(i)))
                }
                Err(_) => Err(ParseError {
                    offset: start,
                    expected: vec!["integer"],
                    found: format!("`{text}`"),
                }),
            };
        }
        if c == '_' || c.is_ascii_alphabetic() {
            let len = rest
                .char_indices()
                .find(|(_, ch)| !(*ch == '_' || ch.is_ascii_alphanumeric()))
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            self.pos += len;
            return Ok((start, Tok::Ident(rest[..len].to_string())));
        }
        Err(ParseError {
            offset: start,
            expected: vec!["identifier", "string", "integer", "punctuation"],
            found: format!("`{c}`"),
        })
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(usize, Tok)>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            lexer: Lexer::new(src),
            peeked: None,
        }
    }

    fn peek(&mut self) -> Result<&(usize, Tok), ParseError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lexer.next()?);
        }
        Ok(self.peeked.as_ref().unwrap())
    }

    fn bump(&mut self) -> Result<(usize, Tok), ParseError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lexer.next(),
        }
    }

    fn expect(&mut self, want: Tok, name: &'static str) -> Result<usize, ParseError> {
        let (off, tok) = self.bump()?;
        if tok == want {
            Ok(off)
        } else {
            Err(ParseError {
                offset: off,
                expected: vec![name],
                found: tok.describe(),
            })
        }
    }

    fn ident(&mut self) -> Result<(usize, String), ParseError> {
        match self.bump()? {
            (off, Tok::Ident(s)) => Ok((off, s)),
            (off, tok) => Err(ParseError {
                offset: off,
                expected: vec!["identifier"],
                found: tok.describe(),
            }),
        }
    }

    fn action(&mut self) -> Result<Action, ParseError> {
        let (_, head) = self.ident()?;
        self.action_after_head(head)
    }

    fn action_after_head(&mut self, head: String) -> Result<Action, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let args = self.arglist(takes_bare_args(&head))?;
        let mut chain = Vec::new();
        while matches!(self.peek()?, (_, Tok::Dot)) {
            self.bump()?;
            let (_, name) = self.ident()?;
            if matches!(self.peek()?, (_, Tok::LParen)) {
                self.bump()?;
                let args = self.arglist(true)?;
                chain.push(Segment::Call { name, args });
            } else {
                chain.push(Segment::Field(name));
            }
        }
        Ok(Action { head, args, chain })
    }

    /// Parses `arg (',' arg)* ')'` with the opening paren already consumed.
    fn arglist(&mut self, allow_bare: bool) -> Result<Vec<Arg>, ParseError> {
        let mut args: Vec<Arg> = Vec::new();
        if matches!(self.peek()?, (_, Tok::RParen)) {
            self.bump()?;
            return Ok(args);
        }
        loop {
            let (off, key) = self.ident()?;
            if matches!(self.peek()?, (_, Tok::LParen)) {
                // positional argument: a nested action such as ask_confirm(create(...))
                let inner = self.action_after_head(key)?;
                args.push(Arg::positional(inner));
                match self.bump()? {
                    (_, Tok::Comma) => continue,
                    (_, Tok::RParen) => return Ok(args),
                    (o, t) => {
                        return Err(ParseError {
                            offset: o,
                            expected: vec!["`,`", "`)`"],
                            found: t.describe(),
                        })
                    }
                }
            }
            let value = if matches!(self.peek()?, (_, Tok::Eq)) {
                self.bump()?;
                Some(self.value()?)
            } else if allow_bare {
                None
            } else {
                let (o, t) = self.peek()?.clone();
                return Err(ParseError {
                    offset: o,
                    expected: vec!["`=`"],
                    found: t.describe(),
                });
            };
            if args.iter().any(|a| a.key == key) {
                return Err(ParseError {
                    offset: off,
                    expected: vec!["unique keyword"],
                    found: format!("duplicate keyword `{key}`"),
                });
            }
            args.push(Arg { key, value });
            match self.bump()? {
                (_, Tok::Comma) => continue,
                (_, Tok::RParen) => return Ok(args),
                (o, t) => {
                    return Err(ParseError {
                        offset: o,
                        expected: vec!["`,`", "`)`"],
                        found: t.describe(),
                    })
                }
            }
        }
    }

    fn value(&mut self) -> Result<Value, ParseError> {
        match self.bump()? {
            (_, Tok::Str(s)) => Ok(Value::Str(s)),
            (_, Tok::Int(i)) => Ok(Value::Int(i)),
            (off, Tok::Ident(id)) => {
                if matches!(self.peek()?, (_, Tok::LParen)) {
                    return Ok(Value::Action(Box::new(self.action_after_head(id)?)));
                }
                match id.as_str() {
                    "True" | "true" => Ok(Value::Bool(true)),
                    "False" | "false" => Ok(Value::Bool(false)),
                    _ => Err(ParseError {
                        offset: off,
                        expected: vec!["string", "integer", "boolean", "action"],
                        found: format!("identifier `{id}`"),
                    }),
                }
            }
            (off, tok) => Err(ParseError {
                offset: off,
                expected: vec!["string", "integer", "boolean", "action"],
                found: tok.describe(),
            }),
        }
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        match self.bump()? {
            (_, Tok::End) => Ok(()),
            (off, tok) => Err(ParseError {
                offset: off,
                expected: vec!["end of input"],
                found: tok.describe(),
            }),
        }
    }
}

pub fn parse_action(text: &str) -> Result<Action, ParseError> {
    let mut p = Parser::new(text);
    let a = p.action()?;
    p.finish()?;
    Ok(a)
}

/// Parses the action list of one plot turn: either a single action or a
/// bracketed, comma-separated list.
pub fn parse_action_list(text: &str) -> Result<Vec<Action>, ParseError> {
    let mut p = Parser::new(text);
    if matches!(p.peek()?, (_, Tok::LBracket)) {
        p.bump()?;
        let mut out = Vec::new();
        if matches!(p.peek()?, (_, Tok::RBracket)) {
            p.bump()?;
        } else {
            loop {
                out.push(p.action()?);
                match p.bump()? {
                    (_, Tok::Comma) => continue,
                    (_, Tok::RBracket) => break,
                    (o, t) => {
                        return Err(ParseError {
                            offset: o,
                            expected: vec!["`,`", "`]`"],
                            found: t.describe(),
                        })
                    }
                }
            }
        }
        p.finish()?;
        Ok(out)
    } else {
        let a = p.action()?;
        p.finish()?;
        Ok(vec![a])
    }
}

fn print_str(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
}

fn print_args(args: &[Arg], out: &mut String) {
    out.push('(');
    for (i, arg) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        if arg.key.is_empty() {
            if let Some(v) = &arg.value {
                print_value(v, out);
            }
            continue;
        }
        out.push_str(&arg.key);
        if let Some(v) = &arg.value {
            out.push('=');
            print_value(v, out);
        }
    }
    out.push(')');
}

fn print_value(v: &Value, out: &mut String) {
    match v {
        Value::Str(s) => print_str(s, out),
        Value::Int(i) => out.push_str(&i.to_string()),
        Value::Bool(b) => out.push_str(if *b { "True" } else { "False" }),
        Value::Action(a) => print_into(a, out),
    }
}

fn print_into(a: &Action, out: &mut String) {
    out.push_str(&a.head);
    print_args(&a.args, out);
    for seg in &a.chain {
        out.push('.');
        match seg {
            Segment::Call { name, args } => {
                out.push_str(name);
                print_args(args, out);
            }
            Segment::Field(name) => out.push_str(name),
        }
    }
}

/// Canonical text: `key=value` pairs separated by `", "`, no other spacing.
pub fn print_action(a: &Action) -> String {
    let mut out = String::new();
    print_into(a, &mut out);
    out
}

/// Dialog acts whose head call names slots rather than binding them.
fn takes_bare_args(head: &str) -> bool {
    head == "request_information" || head.ends_with("_request_information")
}

/// One action is printed bare; several are printed as `[a, b]`.
pub fn print_action_list(actions: &[Action]) -> String {
    if actions.len() == 1 {
        return print_action(&actions[0]);
    }
    let parts: Vec<String> = actions.iter().map(print_action).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("`{0}` is not a context getter for service `{1}`")]
    NotAGetter(String, String),
    #[error("index {index} out of range for {len} record(s)")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("reference matches {0} records where exactly one is required")]
    Ambiguous(usize),
    #[error("reference matches no record")]
    NoMatch,
    #[error("argument `{0}` must be a literal")]
    NonLiteralArg(String),
    #[error("self_correction overrides `{0}`, which is absent from the head call")]
    OverrideMissing(String),
    #[error("action has no trailing self_correction segment")]
    NoSelfCorrection,
}

/// Result of evaluating a context reference.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    Records(Vec<Record>),
    Record(Record),
    Value(Scalar),
}

/// Collapse a trailing `.self_correction(k=v, ...)` into the head args.
pub fn apply_self_correction(a: &Action) -> Result<Action, EvalError> {
    let Some(Segment::Call { name, args }) = a.chain.last() else {
        return Err(EvalError::NoSelfCorrection);
    };
    if name != SELF_CORRECTION {
        return Err(EvalError::NoSelfCorrection);
    }
    let mut out = a.clone();
    out.chain.pop();
    for ov in args {
        match out.arg_mut(&ov.key) {
            Some(target) => target.value = ov.value.clone(),
            None => return Err(EvalError::OverrideMissing(ov.key.clone())),
        }
    }
    Ok(out)
}

fn slot_known(records: &[Record], slot: &str) -> bool {
    records.iter().any(|r| r.contains_key(slot))
}

fn unique(records: Vec<Record>) -> Result<Record, EvalError> {
    match records.len() {
        0 => Err(EvalError::NoMatch),
        1 => Ok(records.into_iter().next().unwrap()),
        n => Err(EvalError::Ambiguous(n)),
    }
}

/// Display dates compare chronologically, everything else by value.
pub fn cmp_scalars(p: &Scalar, q: &Scalar) -> std::cmp::Ordering {
    if let (Scalar::Str(a), Scalar::Str(b)) = (p, q) {
        if let (Some(x), Some(y)) = (parse_display_date(a), parse_display_date(b)) {
            return x.cmp(&y);
        }
    }
    p.cmp(q)
}

fn is_check(name: &str) -> bool {
    name == "check" || name.ends_with("_check")
}

/// Evaluate a `get_<service>(...)` reference over an app context.
///
/// Filters select matching records, `ordered_by` sorts them ascending
/// (ties keep insertion order) and `index` picks one. Chain segments then
/// apply left to right: `check(slot)` yields that slot's value, any other
/// call passes the targeted record through, and a field access reads a slot
/// of the current record.
pub fn resolve_referral(a: &Action, ctx: &AppContext) -> Result<Resolved, EvalError> {
    let a = if a.has_self_correction() {
        apply_self_correction(a)?
    } else {
        a.clone()
    };
    let getter = format!("get_{}", ctx.service_name);
    if a.head != getter {
        return Err(EvalError::NotAGetter(a.head.clone(), ctx.service_name.clone()));
    }

    let mut ordered_by = None;
    let mut index = None;
    let mut filters = Vec::new();
    for arg in &a.args {
        let lit = arg
            .value
            .as_ref()
            .and_then(Value::as_scalar)
            .ok_or_else(|| EvalError::NonLiteralArg(arg.key.clone()))?;
        match (arg.key.as_str(), lit) {
            (ORDERED_BY, Scalar::Str(s)) => ordered_by = Some(s),
            (INDEX, Scalar::Int(i)) => index = Some(i),
            (ORDERED_BY | INDEX, _) => return Err(EvalError::NonLiteralArg(arg.key.clone())),
            (key, lit) => filters.push((key.to_string(), lit)),
        }
    }

    let all = &ctx.records;
    for (key, _) in &filters {
        if !all.is_empty() && !slot_known(all, key) {
            return Err(EvalError::UnknownSlot(key.clone()));
        }
    }
    let mut selected: Vec<Record> = all
        .iter()
        .filter(|r| filters.iter().all(|(k, v)| r.get(k) == Some(v)))
        .cloned()
        .collect();
    if let Some(slot) = &ordered_by {
        if !all.is_empty() && !slot_known(all, slot) {
            return Err(EvalError::UnknownSlot(slot.clone()));
        }
        // records lacking the slot sort last; sort_by is stable
        selected.sort_by(|x, y| match (x.get(slot), y.get(slot)) {
            (Some(p), Some(q)) => cmp_scalars(p, q),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
    }
    let mut state = match index {
        Some(i) => {
            if i < 0 || i as usize >= selected.len() {
                return Err(EvalError::IndexOutOfRange {
                    index: i,
                    len: selected.len(),
                });
            }
            Resolved::Record(selected.swap_remove(i as usize))
        }
        None => Resolved::Records(selected),
    };

    // the record a check() value was read from, for a trailing field access
    let mut origin: Option<Record> = None;
    for seg in &a.chain {
        let record = match state {
            Resolved::Records(rs) => unique(rs)?,
            Resolved::Record(r) => r,
            Resolved::Value(_) => origin.clone().ok_or(EvalError::NoMatch)?,
        };
        state = match seg {
            Segment::Call { name, args } if is_check(name) => {
                let bare: Vec<&str> = args
                    .iter()
                    .filter(|x| x.value.is_none())
                    .map(|x| x.key.as_str())
                    .collect();
                if bare.len() == 1 {
                    let v = record
                        .get(bare[0])
                        .cloned()
                        .ok_or_else(|| EvalError::UnknownSlot(bare[0].to_string()))?;
                    origin = Some(record);
                    Resolved::Value(v)
                } else {
                    Resolved::Record(record)
                }
            }
            Segment::Call { .. } => Resolved::Record(record),
            Segment::Field(f) => {
                let v = record
                    .get(f)
                    .cloned()
                    .ok_or_else(|| EvalError::UnknownSlot(f.clone()))?;
                origin = Some(record);
                Resolved::Value(v)
            }
        };
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::AppContext;

    fn alarms() -> AppContext {
        let rec = |t: &str, n: &str| {
            let mut r = Record::new();
            r.insert("time".into(), Scalar::from(t));
            r.insert("name".into(), Scalar::from(n));
            r.insert("if_repeat".into(), Scalar::Bool(true));
            r
        };
        AppContext::new(
            "alarms",
            "2025-04-16T09:00".parse().unwrap(),
            vec![rec("07:00", "Morning Workout"), rec("18:30", "Family Dinner")],
        )
    }

    #[test]
    fn empty_call() {
        let a = parse_action("confirm()").unwrap();
        assert_eq!(a, Action::new("confirm"));
        assert_eq!(print_action(&a), "confirm()");
    }

    #[test]
    fn chain_with_bare_arg() {
        let a = parse_action("get_alarms(ordered_by=\"time\", index=0).alarms_check(name)").unwrap();
        assert_eq!(a.head, "get_alarms");
        assert_eq!(a.args, vec![Arg::new("ordered_by", "time"), Arg::new("index", 0)]);
        assert_eq!(
            a.chain,
            vec![Segment::Call {
                name: "alarms_check".into(),
                args: vec![Arg::bare("name")]
            }]
        );
    }

    #[test]
    fn nested_action_with_field_access() {
        let a = parse_action(
            "weather_get_weather(date=get_calendar_events(name=\"Art Class\").calendar_events_check(date).date)",
        )
        .unwrap();
        let inner = a.args[0].value.as_ref().unwrap().as_action().unwrap();
        assert_eq!(inner.head, "get_calendar_events");
        assert_eq!(inner.chain.last(), Some(&Segment::Field("date".into())));
    }

    #[test]
    fn whitespace_is_insignificant() {
        let a = parse_action("restaurant_booking_reserve_table(restaurant =\"French Brasserie\", time=\"8:00 PM\")").unwrap();
        assert_eq!(
            print_action(&a),
            "restaurant_booking_reserve_table(restaurant=\"French Brasserie\", time=\"8:00 PM\")"
        );
    }

    #[test]
    fn bare_arg_rejected_in_head_call() {
        let err = parse_action("check(time)").unwrap_err();
        assert_eq!(err.offset, 10);
        assert!(err.expected.contains(&"`=`"));
    }

    #[test]
    fn slot_request_names_bare_slots() {
        let a = parse_action("alarms_request_information(time)").unwrap();
        assert_eq!(a.args, vec![Arg::bare("time")]);
        assert_eq!(print_action(&a), "alarms_request_information(time)");
    }

    #[test]
    fn duplicate_keyword_rejected() {
        let err = parse_action("f(a=1, a=2)").unwrap_err();
        assert_eq!(err.offset, 7);
    }

    #[test]
    fn error_offsets() {
        assert_eq!(parse_action("f(a=)").unwrap_err().offset, 4);
        assert_eq!(parse_action("f(").unwrap_err().offset, 2);
        assert_eq!(parse_action("f() g").unwrap_err().offset, 4);
        assert_eq!(parse_action("f(a=\"x)").unwrap_err().offset, 7);
        assert_eq!(parse_action("f(a=bogus)").unwrap_err().offset, 4);
    }

    #[test]
    fn string_escapes_round_trip() {
        let a = Action::with_args("say", vec![Arg::new("text", "a \"quoted\" \\ path")]);
        let text = print_action(&a);
        assert_eq!(text, r#"say(text="a \"quoted\" \\ path")"#);
        assert_eq!(parse_action(&text).unwrap(), a);
    }

    #[test]
    fn booleans_and_negative_ints() {
        let a = parse_action("f(x=true, y=False, z=-3)").unwrap();
        assert_eq!(print_action(&a), "f(x=True, y=False, z=-3)");
    }

    #[test]
    fn action_lists() {
        let l = parse_action_list("[a(), b(x=1)]").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(print_action_list(&l), "[a(), b(x=1)]");
        assert_eq!(parse_action_list("confirm()").unwrap(), vec![Action::new("confirm")]);
    }

    #[test]
    fn self_correction_collapses_into_head() {
        let a = parse_action("get_movie_time(location=\"Miami\").self_correction(location=\"Houston\")").unwrap();
        assert_eq!(print_action(&a), "get_movie_time(location=\"Miami\").self_correction(location=\"Houston\")");
        let fixed = apply_self_correction(&a).unwrap();
        assert_eq!(print_action(&fixed), "get_movie_time(location=\"Houston\")");
    }

    #[test]
    fn self_correction_without_overrides_is_identity_on_head() {
        let a = parse_action("f(x=\"1\").self_correction()").unwrap();
        assert_eq!(apply_self_correction(&a).unwrap(), parse_action("f(x=\"1\")").unwrap());
    }

    #[test]
    fn self_correction_only_touches_head() {
        let a = parse_action("f(x=\"1\").g(x=\"2\").self_correction(x=\"3\")").unwrap();
        let fixed = apply_self_correction(&a).unwrap();
        assert_eq!(print_action(&fixed), "f(x=\"3\").g(x=\"2\")");
    }

    #[test]
    fn self_correction_missing_keyword() {
        let a = parse_action("f(x=\"1\").self_correction(y=\"3\")").unwrap();
        assert_eq!(apply_self_correction(&a), Err(EvalError::OverrideMissing("y".into())));
    }

    #[test]
    fn referral_by_order() {
        let ctx = alarms();
        let a = parse_action("get_alarms(ordered_by=\"time\", index=0)").unwrap();
        match resolve_referral(&a, &ctx).unwrap() {
            Resolved::Record(r) => assert_eq!(r["name"], Scalar::from("Morning Workout")),
            other => panic!("{other:?}"),
        }
        let a = parse_action("get_alarms(ordered_by=\"time\", index=1).check(name)").unwrap();
        assert_eq!(
            resolve_referral(&a, &ctx).unwrap(),
            Resolved::Value(Scalar::from("Family Dinner"))
        );
    }

    #[test]
    fn referral_index_out_of_range_on_empty() {
        let mut ctx = alarms();
        ctx.records.clear();
        let a = parse_action("get_alarms(ordered_by=\"time\", index=0)").unwrap();
        assert_eq!(
            resolve_referral(&a, &ctx),
            Err(EvalError::IndexOutOfRange { index: 0, len: 0 })
        );
    }

    #[test]
    fn referral_filter_and_field_after_check() {
        let ctx = alarms();
        let a = parse_action("get_alarms(name=\"Family Dinner\").alarms_check(time).time").unwrap();
        assert_eq!(resolve_referral(&a, &ctx).unwrap(), Resolved::Value(Scalar::from("18:30")));
        let a = parse_action("get_alarms(if_repeat=True)").unwrap();
        match resolve_referral(&a, &ctx).unwrap() {
            Resolved::Records(rs) => assert_eq!(rs.len(), 2),
            other => panic!("{other:?}"),
        }
        let a = parse_action("get_alarms(if_repeat=True).check(name)").unwrap();
        assert_eq!(resolve_referral(&a, &ctx), Err(EvalError::Ambiguous(2)));
        let a = parse_action("get_alarms(colour=\"red\")").unwrap();
        assert_eq!(resolve_referral(&a, &ctx), Err(EvalError::UnknownSlot("colour".into())));
    }

    #[test]
    fn ordered_by_ties_keep_insertion_order() {
        let mut ctx = alarms();
        for r in ctx.records.iter_mut() {
            r.insert("time".into(), Scalar::from("09:00"));
        }
        let a = parse_action("get_alarms(ordered_by=\"time\", index=1).check(name)").unwrap();
        assert_eq!(
            resolve_referral(&a, &ctx).unwrap(),
            Resolved::Value(Scalar::from("Family Dinner"))
        );
    }
}
