//! App contexts: simulated on-device state (alarms, calendar, contacts,
//! messages, reminders) grounded on a persona and a current time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{extract_json_object, CompletionRequest, LlmClient, LlmError};
use crate::mr::{Record, Scalar};
use crate::persona::Persona;
use crate::schema::{SchemaSet, ServiceSchema};
use crate::values::{conforms, display_date, normalize_scalar, slot_kind, SlotKind};

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// Minute-resolution local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub NaiveDateTime);

impl Timestamp {
    pub fn date(&self) -> NaiveDate {
        self.0.date()
    }

    /// `Www YYYY-MM-DD`, the form shown as `today`.
    pub fn today(&self) -> String {
        display_date(self.0.date())
    }

    pub fn clock(&self) -> String {
        self.0.format("%H:%M").to_string()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format(TS_FORMAT))
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveDateTime::parse_from_str(s, TS_FORMAT).map(Timestamp)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppContext {
    pub service_name: String,
    pub current_time: Timestamp,
    pub records: Vec<Record>,
}

impl AppContext {
    pub fn new(service: impl Into<String>, current_time: Timestamp, records: Vec<Record>) -> Self {
        AppContext {
            service_name: service.into(),
            current_time,
            records,
        }
    }
}

/// `{'today': 'Wed 2025-04-16', 'alarms': [...]}` style rendering used in
/// prompts.
pub fn render_contexts(now: Timestamp, contexts: &[AppContext]) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("today".into(), json!(now.today()));
    for c in contexts {
        obj.insert(c.service_name.clone(), serde_json::to_value(&c.records).unwrap());
    }
    serde_json::Value::Object(obj).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Default for TimeWindow {
    fn default() -> Self {
        TimeWindow {
            start: "2024-01-01T00:00".parse().unwrap(),
            end: "2027-01-01T00:00".parse().unwrap(),
        }
    }
}

/// Uniform minute in `[start, end)`.
pub fn sample_current_time<R: Rng>(rng: &mut R, window: &TimeWindow) -> Timestamp {
    let span = (window.end.0 - window.start.0).num_minutes().max(1);
    Timestamp(window.start.0 + Duration::minutes(rng.gen_range(0..span)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub window: TimeWindow,
    pub min_records: usize,
    pub max_records: usize,
    /// Per-service overrides of `[min, max]`.
    pub record_ranges: BTreeMap<String, (usize, usize)>,
    pub no_context_prob: f64,
    pub max_attempts: u32,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            window: TimeWindow::default(),
            min_records: 1,
            max_records: 5,
            record_ranges: BTreeMap::new(),
            no_context_prob: 0.33,
            max_attempts: 3,
        }
    }
}

impl ContextConfig {
    pub fn range(&self, service: &str) -> (usize, usize) {
        self.record_ranges
            .get(service)
            .copied()
            .unwrap_or((self.min_records, self.max_records))
    }
}

/// All generated contexts of one persona.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub persona_id: String,
    pub now: Timestamp,
    pub contexts: Vec<AppContext>,
}

impl ContextSet {
    pub fn get(&self, service: &str) -> Option<&AppContext> {
        self.contexts.iter().find(|c| c.service_name == service)
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context for `{service}` failed validation after {attempts} attempt(s): {reason}")]
    Invalid {
        service: String,
        attempts: u32,
        reason: String,
    },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

fn context_prompt(
    persona: &Persona,
    schema: &ServiceSchema,
    now: Timestamp,
    count: usize,
    contacts: &[String],
    contact_slots: &[String],
) -> String {
    let mut p = format!(
        "Here is a smartphone user's introduction: {}\n\
         The current time is {} {}.\n\
         Generate {count} records that could exist in this user's {} app.\n\
         Each record must contain exactly these keys:\n",
        persona.introduction,
        now.today(),
        now.clock(),
        schema.service_name
    );
    for s in &schema.slots {
        p.push_str(&format!("- {}: {}", s.name, s.description));
        if !s.potential_values.is_empty() {
            p.push_str(&format!(" (one of: {})", s.potential_values.join(", ")));
        }
        p.push('\n');
    }
    p.push_str("Write dates as YYYY-MM-DD, times as 24-hour HH:MM, and flags as true/false.\n");
    if !contact_slots.is_empty() {
        p.push_str(&format!(
            "Values of {} must be chosen from these contacts: {}.\n",
            contact_slots.join(", "),
            contacts.join(", ")
        ));
    }
    p.push_str("Records must be distinguishable from each other. Return JSON: {\"records\": [...]}");
    p
}

fn context_meta(
    schema: &ServiceSchema,
    now: Timestamp,
    count: usize,
    contacts: &[String],
    contact_slots: &[String],
    persona: &Persona,
) -> serde_json::Value {
    json!({
        "task": "context",
        "service": schema.service_name,
        "today": now.date().to_string(),
        "count": count,
        "slots": schema.slots.iter().map(|s| json!({
            "name": s.name,
            "potential_values": s.potential_values,
        })).collect::<Vec<_>>(),
        "contacts": contacts,
        "contact_slots": contact_slots,
        "surname": persona.surname,
    })
}

/// Parse and validate one backend completion into records.
pub fn validate_records(
    text: &str,
    schema: &ServiceSchema,
    count: usize,
    contacts: &[String],
    contact_slots: &[String],
    distinguishing: &[String],
) -> Result<Vec<Record>, String> {
    let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
    let items = obj
        .get("records")
        .and_then(|v| v.as_array())
        .ok_or("missing `records` array")?;
    if items.len() != count {
        return Err(format!("expected {count} records, got {}", items.len()));
    }
    let mut out = Vec::with_capacity(count);
    for (i, item) in items.iter().enumerate() {
        let map = item.as_object().ok_or_else(|| format!("record {i} is not an object"))?;
        let mut rec = Record::new();
        for slot in &schema.slots {
            let raw = map
                .get(&slot.name)
                .ok_or_else(|| format!("record {i} lacks `{}`", slot.name))?;
            let scalar: Scalar = serde_json::from_value(raw.clone())
                .map_err(|_| format!("record {i}: `{}` is not a scalar", slot.name))?;
            let kind = slot_kind(&slot.name);
            let v = normalize_scalar(kind, scalar);
            if !conforms(kind, &v) {
                return Err(format!("record {i}: `{}` has malformed value {v}", slot.name));
            }
            if !slot.potential_values.is_empty() && kind == SlotKind::Text {
                let s = v.as_str().unwrap_or_default();
                if !slot.potential_values.iter().any(|p| p.eq_ignore_ascii_case(s)) {
                    return Err(format!("record {i}: `{}` value {s:?} not allowed", slot.name));
                }
            }
            if contact_slots.contains(&slot.name) {
                let s = v.as_str().unwrap_or_default();
                if !contacts.iter().any(|c| c == s) {
                    return Err(format!("record {i}: `{}` value {s:?} is not a contact", slot.name));
                }
            }
            rec.insert(slot.name.clone(), v);
        }
        if let Some(extra) = map.keys().find(|k| schema.slot(k).is_none()) {
            return Err(format!("record {i} has unknown key `{extra}`"));
        }
        out.push(rec);
    }
    let mut seen = BTreeSet::new();
    for rec in &out {
        let key: Vec<Option<&Scalar>> = if distinguishing.is_empty() {
            rec.values().map(Some).collect()
        } else {
            distinguishing
                .iter().map(|k| rec.get(k)).collect()
        };
        if !seen.insert(key) {
            return Err("duplicate records".into());
        }
    }
    Ok(out)
}

/// Generate every context-bearing service's records for one persona, in
/// dependency order. Contact-valued slots draw from generated contacts.
pub fn generate_contexts<R: Rng>(
    persona: &Persona,
    schemas: &SchemaSet,
    now: Timestamp,
    llm: &LlmClient,
    rng: &mut R,
    cfg: &ContextConfig,
) -> Result<BTreeMap<String, AppContext>, ContextError> {
    let mut out = BTreeMap::new();
    let mut contacts: Vec<String> = Vec::new();
    for schema in schemas.context_order() {
        let name = &schema.service_name;
        let meta = schemas.meta(name).expect("context services carry metadata");
        let (lo, hi) = cfg.range(name);
        let count = rng.gen_range(lo.max(1)..=hi.max(lo.max(1)));
        let contact_slots: Vec<String> = if contacts.is_empty() {
            Vec::new()
        } else {
            meta.contact_slots.clone()
        };
        let prompt = context_prompt(persona, schema, now, count, &contacts, &contact_slots);
        let req = CompletionRequest::user(format!("context.{name}"), prompt)
            .with_meta(context_meta(schema, now, count, &contacts, &contact_slots, persona));
        let mut last = String::new();
        let mut records = None;
        for attempt in 1..=cfg.max_attempts.max(1) {
            let mut req = req.clone();
            if attempt > 1 {
                req.meta["attempt"] = json!(attempt);
            }
            let text = llm.complete(&req)?.text;
            match validate_records(
                &text,
                schema,
                count,
                &contacts,
                &contact_slots,
                &meta.referring_preference,
            ) {
                Ok(r) => {
                    records = Some(r);
                    break;
                }
                Err(e) => {
                    log::warn!("context {name} attempt {attempt}: {e}");
                    last = e;
                }
            }
        }
        let records = records.ok_or_else(|| ContextError::Invalid {
            service: name.clone(),
            attempts: cfg.max_attempts.max(1),
            reason: last,
        })?;
        if name == "contacts" {
            contacts = records
                .iter()
                .filter_map(|r| r.get("contact_name").and_then(Scalar::as_str).map(String::from))
                .collect();
        }
        out.insert(name.clone(), AppContext::new(name.clone(), now, records));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn timestamp_forms() {
        let t: Timestamp = "2025-04-16T09:05".parse().unwrap();
        assert_eq!(t.today(), "Wed 2025-04-16");
        assert_eq!(t.clock(), "09:05");
        assert_eq!(t.to_string(), "2025-04-16T09:05");
        let t: Timestamp = "2026-12-28T00:00".parse().unwrap();
        assert_eq!(t.today(), "Mon 2026-12-28");
        assert_eq!(serde_json::to_string(&t).unwrap(), "\"2026-12-28T00:00\"");
    }

    #[test]
    fn sampled_times_stay_in_window() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = TimeWindow::default();
        for _ in 0..1000 {
            let t = sample_current_time(&mut rng, &w);
            assert!(t >= w.start && t < w.end);
        }
    }

    #[test]
    fn rejects_bad_records() {
        let schemas = SchemaSet::bundled();
        let alarms = schemas.service("alarms").unwrap();
        let ok = r#"{"records": [{"time": "07:00", "name": "Gym", "if_repeat": true}]}"#;
        assert!(validate_records(ok, alarms, 1, &[], &[], &[]).is_ok());
        let bad_time = r#"{"records": [{"time": "7am", "name": "Gym", "if_repeat": true}]}"#;
        assert!(validate_records(bad_time, alarms, 1, &[], &[], &[]).is_err());
        let extra = r#"{"records": [{"time": "07:00", "name": "Gym", "if_repeat": true, "x": 1}]}"#;
        assert!(validate_records(extra, alarms, 1, &[], &[], &[]).is_err());
        let dup = r#"{"records": [{"time": "07:00", "name": "Gym", "if_repeat": true},
                                  {"time": "07:00", "name": "Gym", "if_repeat": true}]}"#;
        assert!(validate_records(dup, alarms, 2, &[], &[], &[]).is_err());
    }
}
