//! Dialog structure sampling: kind, local phenomena, intents and slot values.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::context::{AppContext, ContextSet, Timestamp};
use crate::llm::{extract_json_object, CompletionRequest, LlmClient, LlmError};
use crate::mr::{Record, Scalar};
use crate::persona::Persona;
use crate::schema::{alias_closure, alias_graph, IntentSpec, SchemaSet};
use crate::values::{conforms, normalize_scalar, slot_kind, SlotKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Single,
    Compound,
    Compositional,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Single, Kind::Compound, Kind::Compositional];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Single => "single",
            Kind::Compound => "compound",
            Kind::Compositional => "compositional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenomenon {
    SelfCorrection,
    ComplexReferral,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phenomena {
    pub self_correction: bool,
    pub complex_referral: bool,
}

impl Phenomena {
    pub fn list(self) -> Vec<Phenomenon> {
        let mut out = Vec::new();
        if self.self_correction {
            out.push(Phenomenon::SelfCorrection);
        }
        if self.complex_referral {
            out.push(Phenomenon::ComplexReferral);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntentRef {
    pub service: String,
    pub intent: String,
}

impl IntentRef {
    pub fn new(service: impl Into<String>, intent: impl Into<String>) -> Self {
        IntentRef {
            service: service.into(),
            intent: intent.into(),
        }
    }

    /// `service.intent`, the key used in slot-value maps and labels.
    pub fn key(&self) -> String {
        format!("{}.{}", self.service, self.intent)
    }
}

/// `inner` is the inner intent's result slot, `outer` the outer input slot
/// it feeds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchedSlot {
    pub inner: String,
    pub outer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompositionalPair {
    pub outer: IntentRef,
    pub inner: IntentRef,
    pub matched: MatchedSlot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    /// Index into `DialogSpecimen::intents`.
    pub intent: usize,
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogSpecimen {
    pub id: String,
    pub kind: Kind,
    /// For compositional dialogs: `[outer, inner]`.
    pub intents: Vec<IntentRef>,
    pub matched_slot: Option<MatchedSlot>,
    pub phenomena: Phenomena,
    pub correction: Option<Correction>,
    pub slot_values: IndexMap<String, Record>,
    /// Stale values a self-correcting user states first.
    pub alternatives: IndexMap<String, Record>,
    /// Targeted context record per context intent.
    pub targets: IndexMap<String, usize>,
    pub persona_id: String,
    pub context_services: Vec<String>,
    pub now: Timestamp,
}

impl DialogSpecimen {
    pub fn new(id: impl Into<String>, kind: Kind, intents: Vec<IntentRef>, now: Timestamp) -> Self {
        DialogSpecimen {
            id: id.into(),
            kind,
            intents,
            matched_slot: None,
            phenomena: Phenomena::default(),
            correction: None,
            slot_values: IndexMap::new(),
            alternatives: IndexMap::new(),
            targets: IndexMap::new(),
            persona_id: String::new(),
            context_services: Vec::new(),
            now,
        }
    }

    pub fn values(&self, key: &str) -> Record {
        self.slot_values.get(key).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindRatios {
    pub single: f64,
    pub compound: f64,
    pub compositional: f64,
}

impl Default for KindRatios {
    fn default() -> Self {
        KindRatios {
            single: 0.386,
            compound: 0.405,
            compositional: 0.209,
        }
    }
}

impl KindRatios {
    fn get(&self, k: Kind) -> f64 {
        match k {
            Kind::Single => self.single,
            Kind::Compound => self.compound,
            Kind::Compositional => self.compositional,
        }
    }
}

/// Exclusive shares of dialogs with only self-correction, only complex
/// referral, and both. The remainder carries neither.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenomenaRates {
    pub self_correction_only: f64,
    pub complex_referral_only: f64,
    pub both: f64,
}

impl Default for PhenomenaRates {
    fn default() -> Self {
        PhenomenaRates {
            self_correction_only: 0.190,
            complex_referral_only: 0.151,
            both: 0.033,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind_ratios: KindRatios,
    pub phenomena: PhenomenaRates,
    pub alias_transitive: bool,
    pub no_context_prob: f64,
    pub max_attempts: u32,
    pub value_attempts: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind_ratios: KindRatios::default(),
            phenomena: PhenomenaRates::default(),
            alias_transitive: true,
            no_context_prob: 0.33,
            max_attempts: 400,
            value_attempts: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid ratios: {0}")]
    InvalidRatios(String),
    #[error("no valid compositional pair in the schema set")]
    EmptyPool,
    #[error("no intent combination satisfies {0}")]
    Infeasible(String),
    #[error("slot values failed validation after {attempts} attempt(s): {reason}")]
    InvalidValues { attempts: u32, reason: String },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let k = &self.kind_ratios;
        let parts = [k.single, k.compound, k.compositional];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SamplerError::InvalidRatios(format!(
                "kind ratios must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        let p = &self.phenomena;
        let parts = [p.self_correction_only, p.complex_referral_only, p.both];
        if parts.iter().any(|x| !(0.0..=1.0).contains(x)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(SamplerError::InvalidRatios(format!(
                "phenomena shares must be in [0, 1] and sum to at most 1, got {parts:?}"
            )));
        }
        if p.both > 0.0 && k.single >= 1.0 {
            return Err(SamplerError::InvalidRatios(
                "dialogs with both phenomena need a multi-intent kind".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.no_context_prob) {
            return Err(SamplerError::InvalidRatios("no_context_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draw a dialog kind and its phenomena.
///
/// A single intent cannot carry both phenomena (one needs a context intent,
/// the other a non-context one), so dialogs with both are drawn among the
/// multi-intent kinds and the remaining kind shares are rescaled to keep the
/// overall kind distribution at the configured ratios.
pub fn sample_kind<R: Rng>(rng: &mut R, cfg: &SamplerConfig) -> Result<(Kind, Phenomena), SamplerError> {
    cfg.validate()?;
    let p = cfg.phenomena;
    let u: f64 = rng.gen();
    let phenomena = if u < p.self_correction_only {
        Phenomena { self_correction: true, complex_referral: false }
    } else if u < p.self_correction_only + p.complex_referral_only {
        Phenomena { self_correction: false, complex_referral: true }
    } else if u < p.self_correction_only + p.complex_referral_only + p.both {
        Phenomena { self_correction: true, complex_referral: true }
    } else {
        Phenomena::default()
    };
    let k = cfg.kind_ratios;
    let multi = k.compound + k.compositional;
    let both_given = |kind: Kind| match kind {
        Kind::Single => 0.0,
        other if multi > 0.0 => k.get(other) / multi,
        _ => 0.0,
    };
    let weights: Vec<f64> = if phenomena.self_correction && phenomena.complex_referral {
        Kind::ALL.iter().map(|&x| both_given(x)).collect()
    } else {
        let rest = 1.0 - p.both;
        Kind::ALL
            .iter()
            .map(|&x| if rest > 0.0 { ((k.get(x) - p.both * both_given(x)) / rest).max(0.0) } else { k.get(x) })
            .collect()
    };
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (kind, w) in Kind::ALL.iter().zip(&weights) {
        if x < *w {
            return Ok((*kind, phenomena));
        }
        x -= w;
    }
    Ok((*Kind::ALL.iter().zip(&weights).filter(|(_, w)| **w > 0.0).last().unwrap().0, phenomena))
}

/// Every valid (outer, inner, matched slot) combination: the outer input
/// slot equals the inner result slot or lies in its alias closure.
pub fn enumerate_compositional_pool(schemas: &SchemaSet, transitive: bool) -> Vec<CompositionalPair> {
    let graph = alias_graph(&schemas.services);
    let mut out = Vec::new();
    for outer_svc in &schemas.services {
        for outer in &outer_svc.intent_operations {
            for s_in in outer.input_slots() {
                for inner_svc in &schemas.services {
                    for inner in &inner_svc.intent_operations {
                        if inner_svc.service_name == outer_svc.service_name && inner.name == outer.name {
                            continue;
                        }
                        for s_out in &inner.result_slots {
                            if s_in == s_out || alias_closure(&graph, s_out, transitive).contains(s_in) {
                                out.push(CompositionalPair {
                                    outer: IntentRef::new(&outer_svc.service_name, &outer.name),
                                    inner: IntentRef::new(&inner_svc.service_name, &inner.name),
                                    matched: MatchedSlot {
                                        inner: s_out.clone(),
                                        outer: s_in.clone(),
                                    },
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn sample_compositional<R: Rng>(
    rng: &mut R,
    schemas: &SchemaSet,
    transitive: bool,
) -> Result<CompositionalPair, SamplerError> {
    enumerate_compositional_pool(schemas, transitive)
        .choose(rng)
        .cloned()
        .ok_or(SamplerError::EmptyPool)
}

/// Slots of an intent a user can state and then revise: non-context
/// intents only, excluding flags and single-valued enumerations.
pub fn correctable_slots(schemas: &SchemaSet, r: &IntentRef, exclude: Option<&str>) -> Vec<String> {
    let Some(intent) = schemas.intent(&r.service, &r.intent) else {
        return Vec::new();
    };
    if intent.require_context {
        return Vec::new();
    }
    let svc = schemas.service(&r.service).unwrap();
    intent
        .input_slots()
        .filter(|s| Some(s.as_str()) != exclude)
        .filter(|s| slot_kind(s) != SlotKind::Bool)
        .filter(|s| svc.slot(s).map_or(true, |spec| spec.potential_values.len() != 1))
        .cloned()
        .collect()
}

fn referable(schemas: &SchemaSet, r: &IntentRef) -> bool {
    schemas.intent(&r.service, &r.intent).map_or(false, |i| i.require_context)
        && schemas.meta(&r.service).map_or(false, |m| !m.orderable_slots.is_empty())
}

/// Services whose context has at least one record.
fn usable_contexts(ctx: &ContextSet) -> BTreeSet<String> {
    ctx.contexts
        .iter()
        .filter(|c| !c.records.is_empty())
        .map(|c| c.service_name.clone())
        .collect()
}

fn allowed(schemas: &SchemaSet, r: &IntentRef, contexts: Option<&BTreeSet<String>>) -> bool {
    match schemas.intent(&r.service, &r.intent) {
        Some(i) if i.require_context => contexts.map_or(false, |c| c.contains(&r.service)),
        Some(_) => true,
        None => false,
    }
}

fn draw_intent<R: Rng>(rng: &mut R, schemas: &SchemaSet, contexts: Option<&BTreeSet<String>>) -> Option<IntentRef> {
    let services: Vec<_> = schemas
        .services
        .iter()
        .filter(|s| {
            s.intent_operations
                .iter()
                .any(|i| allowed(schemas, &IntentRef::new(&s.service_name, &i.name), contexts))
        })
        .collect();
    let svc = services.choose(rng)?;
    let intents: Vec<&IntentSpec> = svc
        .intent_operations
        .iter()
        .filter(|i| allowed(schemas, &IntentRef::new(&svc.service_name, &i.name), contexts))
        .collect();
    intents.choose(rng).map(|i| IntentRef::new(&svc.service_name, &i.name))
}

/// Intents plus structure for one dialog, before slot values are filled.
/// `contexts` is `None` for a dialog without app context.
pub fn sample_intents<R: Rng>(
    rng: &mut R,
    schemas: &SchemaSet,
    kind: Kind,
    phenomena: Phenomena,
    contexts: Option<&BTreeSet<String>>,
    cfg: &SamplerConfig,
) -> Result<(Vec<IntentRef>, Option<MatchedSlot>, Option<Correction>), SamplerError> {
    let pool: Vec<CompositionalPair> = if kind == Kind::Compositional {
        enumerate_compositional_pool(schemas, cfg.alias_transitive)
            .into_iter()
            .filter(|p| allowed(schemas, &p.outer, contexts) && allowed(schemas, &p.inner, contexts))
            .collect()
    } else {
        Vec::new()
    };
    for _ in 0..cfg.max_attempts.max(1) {
        let (intents, matched) = match kind {
            Kind::Single => match draw_intent(rng, schemas, contexts) {
                Some(a) => (vec![a], None),
                None => break,
            },
            Kind::Compound => {
                let (Some(a), Some(b)) = (draw_intent(rng, schemas, contexts), draw_intent(rng, schemas, contexts))
                else {
                    break;
                };
                if a == b {
                    continue;
                }
                (vec![a, b], None)
            }
            Kind::Compositional => {
                let Some(p) = pool.choose(rng) else { break };
                (vec![p.outer.clone(), p.inner.clone()], Some(p.matched.clone()))
            }
        };
        if phenomena.complex_referral && !intents.iter().any(|r| referable(schemas, r)) {
            continue;
        }
        let mut correction = None;
        if phenomena.self_correction {
            let mut options = Vec::new();
            // the compositional inner is never stated with literal values
            let candidates = if kind == Kind::Compositional { 1 } else { intents.len() };
            for (i, r) in intents.iter().enumerate().take(candidates) {
                let exclude = matched.as_ref().filter(|_| i == 0).map(|m| m.outer.as_str());
                for slot in correctable_slots(schemas, r, exclude) {
                    options.push(Correction { intent: i, slot });
                }
            }
            match options.choose(rng) {
                Some(c) => correction = Some(c.clone()),
                None => continue,
            }
        }
        return Ok((intents, matched, correction));
    }
    Err(SamplerError::Infeasible(format!(
        "kind {} with phenomena {:?}",
        kind.as_str(),
        phenomena.list()
    )))
}

/// Sample the structure of one dialog over a persona's contexts. When the
/// requested combination is infeasible for the schema subset, phenomena are
/// relaxed first and then the kind falls back to single.
pub fn sample_specimen<R: Rng>(
    id: &str,
    rng: &mut R,
    schemas: &SchemaSet,
    persona_id: &str,
    ctx: &ContextSet,
    cfg: &SamplerConfig,
) -> Result<DialogSpecimen, SamplerError> {
    let (kind, phenomena) = sample_kind(rng, cfg)?;
    let no_context = !phenomena.complex_referral && rng.gen_bool(cfg.no_context_prob);
    let usable = usable_contexts(ctx);
    let avail = (!no_context).then_some(&usable);

    let mut attempts = vec![(kind, phenomena)];
    if phenomena.complex_referral {
        attempts.push((kind, Phenomena { complex_referral: false, ..phenomena }));
    }
    if phenomena.self_correction {
        attempts.push((kind, Phenomena::default()));
    }
    attempts.push((Kind::Single, Phenomena::default()));

    let mut last_err = None;
    for (k, ph) in attempts {
        match sample_intents(rng, schemas, k, ph, avail, cfg) {
            Ok((intents, matched, correction)) => {
                if (k, ph) != (kind, phenomena) {
                    log::warn!(
                        "{id}: relaxed {} {:?} to {} {:?}",
                        kind.as_str(),
                        phenomena.list(),
                        k.as_str(),
                        ph.list()
                    );
                }
                let mut spec = DialogSpecimen::new(id, k, intents, ctx.now);
                spec.matched_slot = matched;
                spec.phenomena = ph;
                spec.correction = correction;
                spec.persona_id = persona_id.to_string();
                spec.context_services = if no_context {
                    Vec::new()
                } else {
                    dialog_context_services(rng, schemas, &spec.intents, &usable)
                };
                return Ok(spec);
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

/// Context services attached to a dialog: those of its intents plus their
/// dependencies, or one random context service when none is involved.
fn dialog_context_services<R: Rng>(
    rng: &mut R,
    schemas: &SchemaSet,
    intents: &[IntentRef],
    usable: &BTreeSet<String>,
) -> Vec<String> {
    let is_ctx = |s: &str| schemas.meta(s).map_or(false, |m| m.context);
    let mut wanted: BTreeSet<String> = BTreeSet::new();
    let mut frontier: Vec<String> = intents.iter().map(|r| r.service.clone()).filter(|s| is_ctx(s)).collect();
    while let Some(s) = frontier.pop() {
        if wanted.insert(s.clone()) {
            if let Some(m) = schemas.meta(&s) {
                frontier.extend(m.depends_on.iter().filter(|d| is_ctx(d)).cloned());
            }
        }
    }
    if wanted.is_empty() {
        let options: Vec<&String> = usable.iter().collect();
        if let Some(s) = options.choose(rng) {
            wanted.insert((*s).clone());
        }
    }
    schemas
        .context_order()
        .into_iter()
        .map(|s| s.service_name.clone())
        .filter(|s| wanted.contains(s))
        .collect()
}

/// Slot values filled for a specimen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotFill {
    pub values: IndexMap<String, Record>,
    pub alternatives: IndexMap<String, Record>,
    pub targets: IndexMap<String, usize>,
}

impl DialogSpecimen {
    pub fn apply(&mut self, fill: SlotFill) {
        self.slot_values = fill.values;
        self.alternatives = fill.alternatives;
        self.targets = fill.targets;
    }
}

/// Slots the backend must fill for one intent. The compositional outer
/// input slot is excluded because the inner intent produces it.
fn generated_slots(schemas: &SchemaSet, spec: &DialogSpecimen, i: usize) -> Vec<String> {
    let r = &spec.intents[i];
    let intent = schemas.intent(&r.service, &r.intent).expect("sampled intents exist");
    let skip = spec.matched_slot.as_ref().filter(|_| i == 0).map(|m| m.outer.clone());
    intent.input_slots().filter(|s| Some(*s) != skip.as_ref()).cloned().collect()
}

fn values_prompt(persona: Option<&Persona>, spec: &DialogSpecimen, items: &[(String, Vec<String>)], schemas: &SchemaSet) -> String {
    let mut p = String::new();
    if let Some(persona) = persona {
        p.push_str(&format!("A smartphone user introduces themself: {}\n", persona.introduction));
    }
    p.push_str(&format!(
        "Today is {}. Invent realistic values for the slots below, one JSON object per intent.\n",
        spec.now.today()
    ));
    for (key, slots) in items {
        let (svc, _) = key.split_once('.').unwrap();
        p.push_str(&format!("{key}:\n"));
        for s in slots {
            let spec = schemas.service(svc).and_then(|x| x.slot(s));
            let desc = spec.map(|x| x.description.as_str()).unwrap_or("");
            p.push_str(&format!("- {s}: {desc}"));
            if let Some(pv) = spec.map(|x| &x.potential_values).filter(|v| !v.is_empty()) {
                p.push_str(&format!(" (one of: {})", pv.join(", ")));
            }
            p.push('\n');
        }
    }
    if let Some(c) = &spec.correction {
        p.push_str(&format!(
            "Also give a different alternative value for {} of {} under \"alternatives\".\n",
            c.slot,
            spec.intents[c.intent].key()
        ));
    }
    p.push_str(
        "Write dates as YYYY-MM-DD and times as 24-hour HH:MM.\n\
         Return JSON: {\"values\": {<intent>: {<slot>: <value>}}, \"alternatives\": {<intent>: {<slot>: <value>}}}",
    );
    p
}

fn parse_scalar(
    schemas: &SchemaSet,
    service: &str,
    slot: &str,
    raw: &serde_json::Value,
) -> Result<Scalar, String> {
    let scalar: Scalar = serde_json::from_value(raw.clone()).map_err(|_| format!("`{slot}` is not a scalar"))?;
    let kind = slot_kind(slot);
    let v = normalize_scalar(kind, scalar);
    if !conforms(kind, &v) {
        return Err(format!("`{slot}` has malformed value {v}"));
    }
    let pv = schemas
        .service(service)
        .and_then(|s| s.slot(slot))
        .map(|s| s.potential_values.clone())
        .unwrap_or_default();
    if !pv.is_empty() && kind == SlotKind::Text {
        let s = v.as_str().unwrap_or_default();
        return pv
            .iter()
            .find(|p| p.eq_ignore_ascii_case(s))
            .map(|p| Scalar::Str(p.clone()))
            .ok_or_else(|| format!("`{slot}` value {s:?} not among {pv:?}"));
    }
    Ok(v)
}

fn parse_fill(
    text: &str,
    schemas: &SchemaSet,
    spec: &DialogSpecimen,
    items: &[(String, Vec<String>)],
) -> Result<(IndexMap<String, Record>, IndexMap<String, Record>), String> {
    let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
    let mut values = IndexMap::new();
    for (key, slots) in items {
        let svc = key.split_once('.').unwrap().0;
        let got = obj
            .pointer(&format!("/values/{}", key.replace('~', "~0").replace('/', "~1")))
            .and_then(|v| v.as_object())
            .ok_or_else(|| format!("missing values for {key}"))?;
        let mut rec = Record::new();
        for s in slots {
            let raw = got.get(s).ok_or_else(|| format!("{key} lacks `{s}`"))?;
            rec.insert(s.clone(), parse_scalar(schemas, svc, s, raw)?);
        }
        values.insert(key.clone(), rec);
    }
    let mut alternatives = IndexMap::new();
    if let Some(c) = &spec.correction {
        let r = &spec.intents[c.intent];
        let key = r.key();
        let raw = obj
            .get("alternatives")
            .and_then(|a| a.get(&key))
            .and_then(|a| a.get(&c.slot))
            .ok_or_else(|| format!("missing alternative for {key}.{}", c.slot))?;
        let alt = parse_scalar(schemas, &r.service, &c.slot, raw)?;
        if values.get(&key).and_then(|v: &Record| v.get(&c.slot)) == Some(&alt) {
            return Err(format!("alternative for {key}.{} equals the value", c.slot));
        }
        let mut rec = Record::new();
        rec.insert(c.slot.clone(), alt);
        alternatives.insert(key, rec);
    }
    Ok((values, alternatives))
}

/// Fill every slot value of a specimen in one backend completion. Intents
/// that act on app context target an existing record instead.
pub fn generate_slot_values<R: Rng>(
    spec: &DialogSpecimen,
    persona: Option<&Persona>,
    schemas: &SchemaSet,
    contexts: &[AppContext],
    rng: &mut R,
    llm: &LlmClient,
    cfg: &SamplerConfig,
) -> Result<SlotFill, SamplerError> {
    let mut targets = IndexMap::new();
    for r in &spec.intents {
        let intent = schemas.intent(&r.service, &r.intent).expect("sampled intents exist");
        if intent.require_context {
            let n = contexts
                .iter()
                .find(|c| c.service_name == r.service)
                .map_or(0, |c| c.records.len());
            if n == 0 {
                return Err(SamplerError::Infeasible(format!("{} needs a non-empty context", r.key())));
            }
            targets.insert(r.key(), rng.gen_range(0..n));
        }
    }
    // compositional: the inner intent's slots are listed first
    let order: Vec<usize> = match spec.kind {
        Kind::Compositional => vec![1, 0],
        _ => (0..spec.intents.len()).collect(),
    };
    let items: Vec<(String, Vec<String>)> = order
        .into_iter()
        .map(|i| (spec.intents[i].key(), generated_slots(schemas, spec, i)))
        .filter(|(_, slots)| !slots.is_empty())
        .collect();
    let mut fill = SlotFill {
        targets,
        ..SlotFill::default()
    };
    if items.is_empty() {
        return Ok(fill);
    }
    let meta = json!({
        "task": "slot_values",
        "today": spec.now.date().to_string(),
        "items": items.iter().map(|(key, slots)| {
            let svc = key.split_once('.').unwrap().0;
            json!({
                "key": key,
                "slots": slots.iter().map(|s| json!({
                    "name": s,
                    "potential_values": schemas.service(svc).and_then(|x| x.slot(s)).map(|x| x.potential_values.clone()).unwrap_or_default(),
                })).collect::<Vec<_>>(),
            })
        }).collect::<Vec<_>>(),
        "alternatives": spec.correction.iter().map(|c| json!({
            "key": spec.intents[c.intent].key(),
            "slot": c.slot,
        })).collect::<Vec<_>>(),
    });
    let req = CompletionRequest::user("slot_values", values_prompt(persona, spec, &items, schemas)).with_meta(meta);
    let mut reason = String::new();
    let attempts = cfg.value_attempts.max(1);
    for attempt in 1..=attempts {
        let mut req = req.clone();
        if attempt > 1 {
            req.meta["attempt"] = json!(attempt);
        }
        let text = llm.complete(&req)?.text;
        match parse_fill(&text, schemas, spec, &items) {
            Ok((values, alternatives)) => {
                fill.values = values;
                fill.alternatives = alternatives;
                return Ok(fill);
            }
            Err(e) => {
                log::warn!("{}: slot values attempt {attempt}: {e}", spec.id);
                reason = e;
            }
        }
    }
    Err(SamplerError::InvalidValues { attempts, reason })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn degenerate_ratios() {
        let cfg = SamplerConfig {
            kind_ratios: KindRatios { single: 0.0, compound: 1.0, compositional: 0.0 },
            ..SamplerConfig::default()
        };
        let mut rng = rng_for(1, "t", 0);
        for _ in 0..200 {
            assert_eq!(sample_kind(&mut rng, &cfg).unwrap().0, Kind::Compound);
        }
        let bad = SamplerConfig {
            kind_ratios: KindRatios { single: 0.5, compound: 0.6, compositional: 0.0 },
            ..SamplerConfig::default()
        };
        assert!(matches!(sample_kind(&mut rng, &bad), Err(SamplerError::InvalidRatios(_))));
    }

    #[test]
    fn both_phenomena_never_single() {
        let cfg = SamplerConfig::default();
        let mut rng = rng_for(2, "t", 0);
        for _ in 0..5000 {
            let (k, p) = sample_kind(&mut rng, &cfg).unwrap();
            if p.self_correction && p.complex_referral {
                assert_ne!(k, Kind::Single);
            }
        }
    }

    #[test]
    fn correctable_slots_skip_context_and_flags() {
        let s = SchemaSet::bundled();
        assert!(correctable_slots(&s, &IntentRef::new("alarms", "delete"), None).is_empty());
        assert_eq!(correctable_slots(&s, &IntentRef::new("alarms", "create"), None), vec!["time", "name"]);
        assert_eq!(
            correctable_slots(&s, &IntentRef::new("weather", "get_weather"), Some("date")),
            vec!["location"]
        );
    }
}
