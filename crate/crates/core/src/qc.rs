//! Deterministic and evaluator-based checks over realized dialogs.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use chrono::{Datelike, Duration, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::context::render_contexts;
use crate::dataset::Datapoint;
use crate::llm::{CompletionRequest, LlmClient, LlmError};
use crate::mr::{print_action, Scalar, INDEX, ORDERED_BY};
use crate::plot::{Speaker, Style, Turn, Verbosity};
use crate::realizer::RealizedTurn;
use crate::template::{TemplateError, TemplateSet};
use crate::values::{parse_display_date, parse_iso_date, parse_time, twelve_hour, weekday_name};

const NUMBER_WORDS: [&str; 13] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];

/// Surface forms under which a value counts as mentioned.
pub fn surface_forms(value: &Scalar, today: Option<NaiveDate>) -> Vec<String> {
    let mut out = Vec::new();
    match value {
        Scalar::Bool(b) => out.push(if *b { "yes" } else { "no" }.to_string()),
        Scalar::Int(n) => {
            out.push(n.to_string());
            if let Some(w) = usize::try_from(*n).ok().and_then(|i| NUMBER_WORDS.get(i)) {
                out.push(w.to_string());
            }
            if *n == 1 {
                out.push("single".into());
            }
        }
        Scalar::Str(s) => {
            out.push(s.to_lowercase());
            let date = parse_display_date(s).or_else(|| parse_iso_date(s));
            if let Some(d) = date {
                out.push(d.format("%Y-%m-%d").to_string());
                out.push(weekday_name(d).to_lowercase());
                let month = MONTHS[d.month0() as usize];
                out.push(format!("{month} {}", d.day()));
                out.push(format!("{} {}", &month[..3], d.day()));
                if let Some(t) = today {
                    if d == t {
                        out.push("today".into());
                    } else if d == t + Duration::days(1) {
                        out.push("tomorrow".into());
                    }
                }
            }
            if let Some((h, m)) = parse_time(s) {
                out.push(format!("{h:02}:{m:02}"));
                out.push(format!("{h}:{m:02}"));
                let twelve = twelve_hour(h, m).to_lowercase();
                out.push(twelve.replace(' ', ""));
                out.push(twelve.replace(" am", " a.m.").replace(" pm", " p.m."));
                if m == 0 {
                    let (h12, suffix) = twelve.split_once(':').map(|(a, b)| (a.to_string(), b[2..].to_string())).unwrap();
                    out.push(format!("{h12}{suffix}"));
                    out.push(format!("{h12}{}", suffix.trim()));
                    out.push(format!("{h12} o'clock"));
                }
                out.push(twelve);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Case-insensitive match of `needle` in `hay` on alphanumeric boundaries.
pub fn contains_bounded(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let hay = hay.to_lowercase();
    let needle = needle.to_lowercase();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = hay[..start].chars().next_back();
        let after = hay[end..].chars().next();
        let edge = |c: Option<char>| c.map_or(true, |c| !c.is_alphanumeric());
        let inner_start = needle.chars().next().map_or(false, |c| c.is_alphanumeric());
        let inner_end = needle.chars().next_back().map_or(false, |c| c.is_alphanumeric());
        if (!inner_start || edge(before)) && (!inner_end || edge(after)) {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// `a`/`an` shortly before a word from the slot's name, as in "a 3D
/// ticket" for a ticket quantity of one.
fn indefinite_one(text: &str, slot: &str) -> bool {
    let stems: Vec<String> = slot
        .split('_')
        .filter(|w| w.len() > 2)
        .map(|w| w.trim_end_matches('s').to_lowercase())
        .collect();
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .collect();
    tokens.iter().enumerate().any(|(i, t)| {
        (t == "a" || t == "an")
            && tokens[i + 1..]
                .iter()
                .take(3)
                .any(|w| stems.iter().any(|s| w.starts_with(s.as_str())))
    })
}

/// Whether an utterance mentions a slot value under any equivalent form.
pub fn value_mentioned(text: &str, slot: &str, value: &Scalar, today: Option<NaiveDate>) -> bool {
    surface_forms(value, today).iter().any(|f| contains_bounded(text, f))
        || (*value == Scalar::Int(1) && indefinite_one(text, slot))
}

fn weekday_abbr_before(text: &str, start: usize) -> bool {
    const DAYS: [&str; 7] = ["Mon ", "Tue ", "Wed ", "Thu ", "Fri ", "Sat ", "Sun "];
    start >= 4 && text.is_char_boundary(start - 4) && DAYS.contains(&&text[start - 4..start])
}

fn patterns() -> &'static [(LeakKind, Regex)] {
    static RE: OnceLock<Vec<(LeakKind, Regex)>> = OnceLock::new();
    RE.get_or_init(|| {
        let r = |p: &str| Regex::new(p).expect("valid pattern");
        vec![
            (LeakKind::IsoDateTime, r(r"\b\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}(:\d{2})?\b")),
            (LeakKind::IsoDate, r(r"\b\d{4}-\d{2}-\d{2}\b")),
            (LeakKind::ClockWithSeconds, r(r"\b\d{1,2}:\d{2}:\d{2}\b")),
            (LeakKind::Placeholder, r(r"\{\{[^{}]*\}\}")),
            (LeakKind::MrFragment, r(r"\b[A-Za-z_][A-Za-z0-9_]*\([^()]*=")),
        ]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    IsoDate,
    IsoDateTime,
    ClockWithSeconds,
    Placeholder,
    MrFragment,
}

/// Internal value formats that should never reach an utterance. A date in
/// display form (`Tue 2026-12-29`) and plain `HH:MM` times are allowed.
pub fn find_leaks(text: &str) -> Vec<(LeakKind, String)> {
    let mut out = Vec::new();
    let mut covered: Vec<(usize, usize)> = Vec::new();
    for (kind, re) in patterns() {
        for m in re.find_iter(text) {
            if covered.iter().any(|(s, e)| m.start() < *e && *s < m.end()) {
                continue;
            }
            if matches!(kind, LeakKind::IsoDate) && weekday_abbr_before(text, m.start()) {
                continue;
            }
            covered.push((m.start(), m.end()));
            out.push((*kind, m.as_str().to_string()));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Disposition {
    Keep,
    Drop,
    FlagForReview,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub check: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcReport {
    pub id: String,
    pub checks: BTreeMap<String, Verdict>,
    pub failures: Vec<Failure>,
    pub disposition: Disposition,
}

pub const CHECK_UNFORMATTED: &str = "unformatted";
pub const CHECK_COVERAGE: &str = "slot_coverage";
pub const CHECK_CONSISTENCY: &str = "consistency";

/// Every utterance a datapoint carries: user messages and all six system
/// variants.
fn utterances(dp: &Datapoint) -> impl Iterator<Item = (usize, &str)> {
    dp.dialog.turns.iter().enumerate().flat_map(|(i, t)| {
        let texts: Vec<&str> = match t {
            RealizedTurn::User(s) => vec![s.as_str()],
            RealizedTurn::System(r) => r.variants.values().map(String::as_str).collect(),
        };
        texts.into_iter().map(move |s| (i, s))
    })
}

pub fn check_unformatted(dp: &Datapoint) -> Vec<Failure> {
    let mut out = Vec::new();
    for (i, text) in utterances(dp) {
        for (kind, token) in find_leaks(text) {
            out.push(Failure {
                check: CHECK_UNFORMATTED.into(),
                turn: Some(i),
                detail: format!("{kind:?} `{token}`"),
            });
        }
    }
    out
}

/// The utterance slot coverage is judged on: the user's message, or the
/// high-verbosity mirroring variant of a system turn.
pub fn coverage_text(turn: &RealizedTurn) -> &str {
    match turn {
        RealizedTurn::User(s) => s,
        RealizedTurn::System(r) => r.get(Style::new(Verbosity::High, true)),
    }
}

fn checked_literals(turn: &Turn) -> Vec<(String, Scalar)> {
    let mut out = Vec::new();
    for a in &turn.actions {
        for (slot, v) in a.literals() {
            if slot == ORDERED_BY || slot == INDEX || matches!(v, Scalar::Bool(_)) {
                continue;
            }
            out.push((slot.to_string(), v));
        }
    }
    out
}

pub fn check_slot_coverage(dp: &Datapoint) -> Vec<Failure> {
    let today = Some(dp.now.date());
    let mut out = Vec::new();
    for (i, (turn, real)) in dp.plot.turns.iter().zip(&dp.dialog.turns).enumerate() {
        let text = coverage_text(real);
        for (slot, v) in checked_literals(turn) {
            if !value_mentioned(text, &slot, &v, today) {
                out.push(Failure {
                    check: CHECK_COVERAGE.into(),
                    turn: Some(i),
                    detail: format!("{slot}={v} not mentioned"),
                });
            }
        }
    }
    if dp.plot.turns.len() != dp.dialog.turns.len() {
        out.push(Failure {
            check: CHECK_COVERAGE.into(),
            turn: None,
            detail: "plot and dialog lengths differ".into(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Consistency {
    Consistent(String),
    Inconsistent(String),
}

/// Read a verdict out of free text: any negated form wins over a bare
/// "consistent".
pub fn parse_verdict(text: &str) -> Option<Consistency> {
    let lower = text.to_lowercase();
    let rationale = text.trim().to_string();
    let negated = ["inconsistent", "not consistent", "inconsistency"];
    if negated.iter().any(|n| lower.contains(n)) {
        Some(Consistency::Inconsistent(rationale))
    } else if lower.contains("consistent") {
        Some(Consistency::Consistent(rationale))
    } else {
        None
    }
}

fn dialog_block(dp: &Datapoint) -> String {
    let mut lines = Vec::new();
    for (turn, real) in dp.plot.turns.iter().zip(&dp.dialog.turns) {
        let who = match turn.speaker {
            Speaker::User => "user",
            Speaker::System => "assistant",
        };
        let actions: Vec<String> = turn.actions.iter().map(print_action).collect();
        lines.push(format!("{who} actions: {}", serde_json::to_string(&actions).expect("strings")));
        lines.push(format!("{who}: {}", coverage_text(real)));
    }
    lines.join("\n")
}

/// Ask the evaluator whether utterances follow their actions. An answer
/// that never yields a verdict is reported as `Err` with the last reply.
pub fn evaluate_consistency(
    dp: &Datapoint,
    llm: &LlmClient,
    templates: &TemplateSet,
    attempts: u32,
) -> Result<Result<Consistency, String>, QcError> {
    let mut b = BTreeMap::new();
    b.insert("context", render_contexts(dp.now, &dp.contexts));
    b.insert("actions_and_utterances", dialog_block(dp));
    let prompt = templates.qc.render(&b)?;
    let turns: Vec<Json> = dp
        .plot
        .turns
        .iter()
        .zip(&dp.dialog.turns)
        .map(|(t, r)| {
            json!({
                "speaker": t.speaker,
                "actions": t.actions.iter().map(print_action).collect::<Vec<_>>(),
                "utterance": coverage_text(r),
            })
        })
        .collect();
    let req = CompletionRequest::user("evaluate", prompt)
        .with_sampling(0.0, 256)
        .with_meta(json!({ "task": "evaluate", "turns": turns, "today": dp.now.date().to_string() }));
    let mut last = String::new();
    for attempt in 1..=attempts.max(1) {
        let mut req = req.clone();
        if attempt > 1 {
            req.meta["attempt"] = json!(attempt);
        }
        last = llm.complete(&req)?.text;
        if let Some(v) = parse_verdict(&last) {
            return Ok(Ok(v));
        }
    }
    Ok(Err(last))
}

#[derive(Debug, Error)]
pub enum QcError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// Evaluator settings for the second QC step.
pub struct Evaluator<'a> {
    pub llm: &'a LlmClient,
    pub templates: &'a TemplateSet,
    pub attempts: u32,
}

/// Deterministic checks first; a datapoint failing any is dropped without
/// consulting the evaluator. An inconsistent or unreadable verdict flags
/// the datapoint for review.
pub fn run_qc(dp: &Datapoint, evaluator: Option<&Evaluator<'_>>) -> Result<QcReport, QcError> {
    let mut checks = BTreeMap::new();
    let mut failures = check_unformatted(dp);
    checks.insert(CHECK_UNFORMATTED.to_string(), if failures.is_empty() { Verdict::Pass } else { Verdict::Fail });
    let coverage = check_slot_coverage(dp);
    checks.insert(CHECK_COVERAGE.to_string(), if coverage.is_empty() { Verdict::Pass } else { Verdict::Fail });
    failures.extend(coverage);
    let mut disposition = if failures.is_empty() { Disposition::Keep } else { Disposition::Drop };
    if let (Disposition::Keep, Some(ev)) = (disposition, evaluator) {
        let (verdict, detail) = match evaluate_consistency(dp, ev.llm, ev.templates, ev.attempts)? {
            Ok(Consistency::Consistent(_)) => (Verdict::Pass, None),
            Ok(Consistency::Inconsistent(why)) => (Verdict::Fail, Some(why)),
            Err(raw) => (Verdict::Fail, Some(format!("unparseable verdict: {raw}"))),
        };
        checks.insert(CHECK_CONSISTENCY.to_string(), verdict);
        if let Some(detail) = detail {
            failures.push(Failure {
                check: CHECK_CONSISTENCY.into(),
                turn: None,
                detail,
            });
            disposition = Disposition::FlagForReview;
        }
    }
    Ok(QcReport {
        id: dp.id.clone(),
        checks,
        failures,
        disposition,
    })
}
