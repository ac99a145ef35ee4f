//! Slot value kinds and the canonical date/time forms.
//!
//! Internally dates are ISO `YYYY-MM-DD` and times 24h `HH:MM`. Dates shown
//! to users (and stored in plots) use the display form `Www YYYY-MM-DD`.

use chrono::{Datelike, NaiveDate};

use crate::mr::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Time,
    Date,
    Int,
    Bool,
    Text,
}

const INT_SLOTS: &[&str] = &["party_size", "ticket_quantity", "number_of_rooms", "quantity", "count"];

pub fn slot_kind(name: &str) -> SlotKind {
    if name.starts_with("if_") || name.starts_with("is_") {
        SlotKind::Bool
    } else if INT_SLOTS.contains(&name) || name.starts_with("number_of_") {
        SlotKind::Int
    } else if name.ends_with("date") || name == "birthday" {
        SlotKind::Date
    } else if (name.ends_with("time") && name != "duration_time") || name == "showtime" {
        SlotKind::Time
    } else {
        SlotKind::Text
    }
}

pub fn display_date(d: NaiveDate) -> String {
    d.format("%a %Y-%m-%d").to_string()
}

pub fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Parses `Www YYYY-MM-DD`, rejecting a weekday that disagrees with the date.
pub fn parse_display_date(s: &str) -> Option<NaiveDate> {
    let (wd, rest) = s.trim().split_once(' ')?;
    let d = parse_iso_date(rest)?;
    (d.format("%a").to_string() == wd).then_some(d)
}

pub fn weekday_name(d: NaiveDate) -> &'static str {
    match d.weekday() {
        chrono::Weekday::Mon => "Monday",
        chrono::Weekday::Tue => "Tuesday",
        chrono::Weekday::Wed => "Wednesday",
        chrono::Weekday::Thu => "Thursday",
        chrono::Weekday::Fri => "Friday",
        chrono::Weekday::Sat => "Saturday",
        chrono::Weekday::Sun => "Sunday",
    }
}

/// `HH:MM` 24h time, accepting `H:MM` too.
pub fn parse_time(s: &str) -> Option<(u32, u32)> {
    let (h, m) = s.trim().split_once(':')?;
    if m.len() != 2 || h.is_empty() || h.len() > 2 {
        return None;
    }
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (h < 24 && m < 60).then_some((h, m))
}

/// `20:00` -> `8:00 PM`.
pub fn twelve_hour(h: u32, m: u32) -> String {
    let suffix = if h < 12 { "AM" } else { "PM" };
    let h12 = match h % 12 {
        0 => 12,
        x => x,
    };
    format!("{h12}:{m:02} {suffix}")
}

/// Bring a backend-produced value into canonical form for its slot kind:
/// ISO dates become display dates, numeric strings become integers for
/// count slots, and boolean words become booleans.
pub fn normalize_scalar(kind: SlotKind, v: Scalar) -> Scalar {
    match (kind, v) {
        (SlotKind::Date, Scalar::Str(s)) => match parse_iso_date(&s) {
            Some(d) => Scalar::Str(display_date(d)),
            None => Scalar::Str(s),
        },
        (SlotKind::Int, Scalar::Str(s)) => match s.trim().parse::<i64>() {
            Ok(i) => Scalar::Int(i),
            Err(_) => Scalar::Str(s),
        },
        (SlotKind::Bool, Scalar::Str(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Scalar::Bool(true),
            "false" | "no" => Scalar::Bool(false),
            _ => Scalar::Str(s),
        },
        (_, v) => v,
    }
}

/// Whether a value is acceptable for its slot kind after normalization.
pub fn conforms(kind: SlotKind, v: &Scalar) -> bool {
    match (kind, v) {
        (SlotKind::Date, Scalar::Str(s)) => parse_display_date(s).is_some(),
        (SlotKind::Time, Scalar::Str(s)) => parse_time(s).is_some(),
        (SlotKind::Int, Scalar::Int(_)) => true,
        (SlotKind::Bool, Scalar::Bool(_)) => true,
        (SlotKind::Text, Scalar::Str(s)) => !s.trim().is_empty(),
        _ => false,
    }
}
