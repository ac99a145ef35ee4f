use serde_json::json;

use super::PlotError;
use crate::context::Timestamp;
use crate::llm::{extract_json_object, CompletionRequest, LlmClient};
use crate::mr::{Record, Scalar};
use crate::sampler::IntentRef;
use crate::schema::{IntentSpec, ServiceSchema};
use crate::values::{conforms, normalize_scalar, slot_kind, SlotKind};

/// Records returned by one simulated database query.
pub const QUERY_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub intent: IntentRef,
    /// Inputs followed by result slots, one record per hit.
    pub records: Vec<Record>,
}

fn query_prompt(service: &ServiceSchema, intent: &IntentSpec, inputs: &Record, now: Timestamp) -> String {
    let mut p = format!(
        "Today is {}. Act as the {} service database answering `{}`: {}\n\
         The request is:\n",
        now.today(),
        service.service_name,
        intent.name,
        intent.description
    );
    for (k, v) in inputs {
        p.push_str(&format!("- {k}: {v}\n"));
    }
    p.push_str(&format!("Return {QUERY_SIZE} plausible, distinct results with these fields:\n"));
    for s in &intent.result_slots {
        let desc = service.slot(s).map(|x| x.description.as_str()).unwrap_or("");
        p.push_str(&format!("- {s}: {desc}\n"));
    }
    p.push_str(
        "Each result repeats the request fields unchanged. Write dates as YYYY-MM-DD and times as HH:MM.\n\
         Answer with JSON only: {\"records\": [ {...}, ... ]}\n",
    );
    p
}

/// Check a raw completion against the request and return normalized records.
pub fn validate_query(
    text: &str,
    service: &ServiceSchema,
    intent: &IntentSpec,
    inputs: &Record,
) -> Result<Vec<Record>, String> {
    let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
    let items = obj
        .get("records")
        .and_then(|v| v.as_array())
        .ok_or("missing `records` array")?;
    if items.len() != QUERY_SIZE {
        return Err(format!("expected {QUERY_SIZE} records, got {}", items.len()));
    }
    let mut out = Vec::with_capacity(QUERY_SIZE);
    for (i, item) in items.iter().enumerate() {
        let map = item.as_object().ok_or_else(|| format!("record {i} is not an object"))?;
        if let Some(extra) = map.keys().find(|k| service.slot(k).is_none()) {
            return Err(format!("record {i} has unknown key `{extra}`"));
        }
        let read = |slot: &str| -> Result<Scalar, String> {
            let raw = map.get(slot).ok_or_else(|| format!("record {i} lacks `{slot}`"))?;
            let s: Scalar =
                serde_json::from_value(raw.clone()).map_err(|_| format!("record {i}: `{slot}` is not a scalar"))?;
            let kind = slot_kind(slot);
            let v = normalize_scalar(kind, s);
            if !conforms(kind, &v) {
                return Err(format!("record {i}: `{slot}` has malformed value {v}"));
            }
            Ok(v)
        };
        let mut rec = Record::new();
        for (k, want) in inputs {
            let got = read(k)?;
            if &got != want {
                return Err(format!("record {i}: `{k}` is {got}, request said {want}"));
            }
            rec.insert(k.clone(), got);
        }
        for s in &intent.result_slots {
            if rec.contains_key(s) {
                continue;
            }
            let v = read(s)?;
            let pv = service.slot(s).map(|x| &x.potential_values);
            if let (Some(pv), Some(t)) = (pv.filter(|p| !p.is_empty()), v.as_str()) {
                if slot_kind(s) == SlotKind::Text && !pv.iter().any(|p| p.eq_ignore_ascii_case(t)) {
                    return Err(format!("record {i}: `{s}` value {t:?} not allowed"));
                }
            }
            rec.insert(s.clone(), v);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Ask the backend to simulate the intent's database lookup, retrying
/// malformed answers up to `attempts` times.
pub fn query_database(
    service: &ServiceSchema,
    intent: &IntentSpec,
    inputs: &Record,
    now: Timestamp,
    llm: &LlmClient,
    attempts: u32,
) -> Result<QueryResult, PlotError> {
    let meta = json!({
        "task": "query",
        "service": service.service_name,
        "intent": intent.name,
        "inputs": inputs,
        "result_slots": intent.result_slots.iter().map(|s| json!({
            "name": s,
            "potential_values": service.slot(s).map(|x| x.potential_values.clone()).unwrap_or_default(),
        })).collect::<Vec<_>>(),
        "count": QUERY_SIZE,
        "today": now.date().to_string(),
    });
    let req = CompletionRequest::user(
        format!("query.{}.{}", service.service_name, intent.name),
        query_prompt(service, intent, inputs, now),
    )
    .with_meta(meta);
    let attempts = attempts.max(1);
    let mut reason = String::new();
    for attempt in 1..=attempts {
        let mut req = req.clone();
        if attempt > 1 {
            req.meta["attempt"] = json!(attempt);
        }
        let text = llm.complete(&req)?.text;
        match validate_query(&text, service, intent, inputs) {
            Ok(records) => {
                return Ok(QueryResult {
                    intent: IntentRef::new(&service.service_name, &intent.name),
                    records,
                })
            }
            Err(e) => {
                log::warn!("query {}.{} attempt {attempt}: {e}", service.service_name, intent.name);
                reason = e;
            }
        }
    }
    Err(PlotError::Query {
        intent: format!("{}.{}", service.service_name, intent.name),
        attempts,
        reason,
    })
}
