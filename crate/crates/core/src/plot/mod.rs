//! Turn-by-turn action plots.

mod build;
mod merge;
mod phenomena;
mod query;
mod referring;
mod style;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::AppContext;
use crate::llm::{LlmClient, LlmError};
use crate::mr::{parse_action_list, print_action_list, Action, EvalError, ParseError, Segment, Value, SELF_CORRECTION};
use crate::sampler::{DialogSpecimen, Kind, Phenomenon};
use crate::schema::SchemaSet;

pub use build::{build_single_plot, single_plot_from_initial, ContextTarget, SingleOptions, SinglePlot};
pub use merge::{merge_compositional, merge_compound, prefix_plot, substitute_inner};
pub use phenomena::{inject_phenomena, ordered_position, rewrite_referral};
pub use query::{query_database, validate_query, QueryResult, QUERY_SIZE};
pub use referring::{choose_referring_expression, RefError};
pub use style::{assign_default_styles, StylePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "@User@",
            Speaker::System => "@System@",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Turn {
    pub speaker: Speaker,
    pub actions: Vec<Action>,
}

impl Turn {
    pub fn user(actions: Vec<Action>) -> Self {
        Turn {
            speaker: Speaker::User,
            actions,
        }
    }

    pub fn system(actions: Vec<Action>) -> Self {
        Turn {
            speaker: Speaker::System,
            actions,
        }
    }

    /// `@User@: action` or `@System@: [a, b]`.
    pub fn line(&self) -> String {
        format!("{}: {}", self.speaker.tag(), print_action_list(&self.actions))
    }

    pub fn parse_line(line: &str) -> Result<Turn, PlotError> {
        let line = line.trim();
        let (speaker, rest) = if let Some(r) = line.strip_prefix("@User@:") {
            (Speaker::User, r)
        } else if let Some(r) = line.strip_prefix("@System@:") {
            (Speaker::System, r)
        } else {
            return Err(PlotError::BadLine(line.to_string()));
        };
        Ok(Turn {
            speaker,
            actions: parse_action_list(rest.trim())?,
        })
    }

    /// Whether any action carries a self-correction or an ordered reference.
    pub fn has_phenomenon(&self) -> bool {
        self.actions.iter().any(|a| {
            let mut hit = a.has_self_correction();
            a.walk(&mut |x| hit |= x.is_complex_referral());
            hit
        })
    }
}

/// Accept two common misspellings of dialog acts.
pub fn normalize_spelling(line: &str) -> String {
    line.replace("request_infomation", "request_information")
        .replace("inform_infomation", "inform_information")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verbosity {
    Low,
    Mid,
    High,
}

impl Verbosity {
    pub const ALL: [Verbosity; 3] = [Verbosity::Low, Verbosity::Mid, Verbosity::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Verbosity::Low => "low",
            Verbosity::Mid => "mid",
            Verbosity::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Style {
    pub verbosity: Verbosity,
    pub mirroring: bool,
}

impl Style {
    pub const fn new(verbosity: Verbosity, mirroring: bool) -> Self {
        Style { verbosity, mirroring }
    }

    /// All six styles in the order low/mid/high, mirroring first.
    pub fn all() -> [Style; 6] {
        let mut out = [Style::new(Verbosity::Low, true); 6];
        for (i, v) in Verbosity::ALL.iter().enumerate() {
            out[2 * i] = Style::new(*v, true);
            out[2 * i + 1] = Style::new(*v, false);
        }
        out
    }

    /// `verbosity_high mirroring` and friends.
    pub fn key(self) -> String {
        format!(
            "verbosity_{} {}",
            self.verbosity.as_str(),
            if self.mirroring { "mirroring" } else { "no_mirroring" }
        )
    }

    pub fn from_key(key: &str) -> Option<Style> {
        Style::all().into_iter().find(|s| s.key() == key)
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Serialize for Style {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Style {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let k = String::deserialize(d)?;
        Style::from_key(&k).ok_or_else(|| serde::de::Error::custom(format!("unknown style `{k}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub services: Vec<String>,
    /// `service.intent`, outer before inner.
    pub intents: Vec<String>,
    pub kind: Kind,
    pub phenomena: Vec<Phenomenon>,
}

impl Labels {
    pub fn single(service: &str, intent: &str) -> Self {
        Labels {
            services: vec![service.to_string()],
            intents: vec![format!("{service}.{intent}")],
            kind: Kind::Single,
            phenomena: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plot {
    pub turns: Vec<Turn>,
    /// One per system turn, in order; empty until styles are assigned.
    pub default_styles: Vec<Style>,
    pub labels: Labels,
}

#[derive(Serialize, Deserialize)]
struct PlotRepr {
    turns: Vec<String>,
    default_styles: Vec<Style>,
    labels: Labels,
}

impl Serialize for Plot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PlotRepr {
            turns: self.turns.iter().map(Turn::line).collect(),
            default_styles: self.default_styles.clone(),
            labels: self.labels.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Plot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PlotRepr::deserialize(d)?;
        let turns = r
            .turns
            .iter()
            .map(|l| Turn::parse_line(l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Ok(Plot {
            turns,
            default_styles: r.default_styles,
            labels: r.labels,
        })
    }
}

impl Plot {
    pub fn lines(&self) -> Vec<String> {
        self.turns.iter().map(Turn::line).collect()
    }

    pub fn system_turns(&self) -> impl Iterator<Item = (usize, &Turn)> {
        self.turns.iter().enumerate().filter(|(_, t)| t.speaker == Speaker::System)
    }

    /// Default style of the system turn at position `turn`.
    pub fn style_of(&self, turn: usize) -> Option<Style> {
        let ordinal = self.turns[..turn].iter().filter(|t| t.speaker == Speaker::System).count();
        (self.turns.get(turn)?.speaker == Speaker::System)
            .then(|| self.default_styles.get(ordinal).copied())
            .flatten()
    }
}

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unrecognized plot line `{0}`")]
    BadLine(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("specimen has no value for required slot `{slot}` of {intent}")]
    MissingSlot { intent: String, slot: String },
    #[error("unknown intent {0}")]
    UnknownIntent(String),
    #[error("merge expects single-intent plots")]
    NotSingle,
    #[error("slot `{0}` is absent from the outer initial action")]
    MatchedSlotAbsent(String),
    #[error("{0} requires a non-empty app context")]
    EmptyContext(String),
    #[error("inner intent produced no value for `{0}`")]
    NoInnerValue(String),
    #[error(transparent)]
    Referring(#[from] RefError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("query for {intent} failed after {attempts} attempt(s): {reason}")]
    Query { intent: String, attempts: u32, reason: String },
    #[error("labels cannot be derived: {0}")]
    Labels(String),
    #[error("invalid plot: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub optional_slot_prob: f64,
    pub query_attempts: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            optional_slot_prob: 0.5,
            query_attempts: 3,
        }
    }
}

/// Build the full plot for a sampled specimen: single plots per intent,
/// merged by kind, with phenomena injected and default styles assigned.
pub fn build_plot<R: Rng>(
    spec: &DialogSpecimen,
    schemas: &SchemaSet,
    contexts: &[AppContext],
    rng: &mut R,
    llm: &LlmClient,
    cfg: &PlotConfig,
) -> Result<Plot, PlotError> {
    let forced = |i: usize| -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = spec.correction.as_ref().filter(|c| c.intent == i) {
            out.push(c.slot.clone());
        }
        out
    };
    let plot = match spec.kind {
        Kind::Single => {
            let opts = SingleOptions {
                forced_initial: forced(0),
                ..SingleOptions::default()
            };
            build_single_plot(spec, 0, schemas, contexts, rng, llm, cfg, &opts)?.plot
        }
        Kind::Compound => {
            let a = SingleOptions {
                forced_initial: forced(0),
                ..SingleOptions::default()
            };
            let b = SingleOptions {
                forced_initial: forced(1),
                ..SingleOptions::default()
            };
            let pa = build_single_plot(spec, 0, schemas, contexts, rng, llm, cfg, &a)?;
            let pb = build_single_plot(spec, 1, schemas, contexts, rng, llm, cfg, &b)?;
            merge_compound(&pa.plot, &pb.plot)?
        }
        Kind::Compositional => {
            let matched = spec
                .matched_slot
                .as_ref()
                .ok_or_else(|| PlotError::Invalid("compositional specimen without matched slot".into()))?;
            let inner_opts = SingleOptions {
                asked: Some(vec![matched.inner.clone()]),
                ..SingleOptions::default()
            };
            let inner = build_single_plot(spec, 1, schemas, contexts, rng, llm, cfg, &inner_opts)?;
            let value = inner
                .result
                .as_ref()
                .and_then(|r| r.get(&matched.inner))
                .cloned()
                .ok_or_else(|| PlotError::NoInnerValue(matched.inner.clone()))?;
            let mut forced_outer = forced(0);
            forced_outer.push(matched.outer.clone());
            let mut extra = crate::mr::Record::new();
            extra.insert(matched.outer.clone(), value);
            let outer_opts = SingleOptions {
                forced_initial: forced_outer,
                extra_values: extra,
                asked: None,
            };
            let outer = build_single_plot(spec, 0, schemas, contexts, rng, llm, cfg, &outer_opts)?;
            merge_compositional(&outer.plot, &inner.plot, matched)?
        }
    };
    let mut plot = inject_phenomena(plot, spec, rng, contexts, schemas)?;
    plot.labels.phenomena = spec.phenomena.list();
    let policy = StylePolicy::from_schemas(schemas);
    Ok(assign_default_styles(plot, &policy, contexts))
}

/// Split `svc_name` against known service names, longest match first.
pub(crate) fn split_service<'a>(name: &'a str, services: &[&str]) -> Option<(String, &'a str)> {
    services
        .iter()
        .filter(|s| name.len() > s.len() + 1 && name.starts_with(**s) && name.as_bytes()[s.len()] == b'_')
        .max_by_key(|s| s.len())
        .map(|s| (s.to_string(), &name[s.len() + 1..]))
}

/// Dialog-act or intent name without its service prefix.
pub fn strip_service<'a>(head: &'a str, services: &[&str]) -> &'a str {
    split_service(head, services).map_or(head, |(_, rest)| rest)
}

/// First non-correction chain call of an action.
pub(crate) fn first_call(a: &Action) -> Option<(&String, &Vec<crate::mr::Arg>)> {
    a.chain.iter().find_map(|s| match s {
        Segment::Call { name, args } if name != SELF_CORRECTION => Some((name, args)),
        _ => None,
    })
}

/// (service, intent) of an intent-bearing action such as
/// `get_alarms(...).alarms_delete(name)` or `weather_get_weather(...)`.
fn resolve_intent(a: &Action, schemas: &SchemaSet, all_user_keys: &[String]) -> Result<(String, String), PlotError> {
    let names: Vec<&str> = schemas.services.iter().map(|s| s.service_name.as_str()).collect();
    let getter = a.head.strip_prefix("get_").filter(|s| names.contains(s));
    if let (Some(svc), Some((call, _))) = (getter, first_call(a)) {
        let intent = match split_service(call, &[svc]) {
            Some((_, rest)) if schemas.intent(svc, rest).is_some() => rest.to_string(),
            _ => call.clone(),
        };
        return match schemas.intent(svc, &intent) {
            Some(_) => Ok((svc.to_string(), intent)),
            None => Err(PlotError::UnknownIntent(format!("{svc}.{intent}"))),
        };
    }
    if let Some((svc, rest)) = split_service(&a.head, &names) {
        if schemas.intent(&svc, rest).is_some() {
            return Ok((svc, rest.to_string()));
        }
    }
    // unprefixed: the intent whose slots cover every stated key and whose
    // required slots are all stated somewhere in the plot
    let keys: Vec<&str> = a.args.iter().map(|x| x.key.as_str()).collect();
    let candidates: Vec<(String, String)> = schemas
        .services
        .iter()
        .filter_map(|s| {
            let i = s.intent(&a.head)?;
            let covered = keys.iter().all(|k| s.slot(k).is_some());
            let required = i.required_slots.iter().all(|r| all_user_keys.contains(r));
            (covered && required && !i.require_context).then(|| (s.service_name.clone(), i.name.clone()))
        })
        .collect();
    match candidates.len() {
        1 => Ok(candidates.into_iter().next().unwrap()),
        0 => Err(PlotError::UnknownIntent(a.head.clone())),
        n => Err(PlotError::Labels(format!("`{}` matches {n} intents", a.head))),
    }
}

fn user_arg_keys(plot: &Plot) -> Vec<String> {
    let mut keys = Vec::new();
    for t in plot.turns.iter().filter(|t| t.speaker == Speaker::User) {
        for a in &t.actions {
            a.walk(&mut |x| {
                for arg in &x.args {
                    if arg.value.is_some() {
                        keys.push(arg.key.clone());
                    }
                }
                for s in &x.chain {
                    if let Segment::Call { args, .. } = s {
                        keys.extend(args.iter().filter(|g| g.value.is_some()).map(|g| g.key.clone()));
                    }
                }
            });
        }
    }
    keys
}

/// Recompute labels from the plot text alone.
pub fn derive_labels(plot: &Plot, schemas: &SchemaSet) -> Result<Labels, PlotError> {
    let first = plot
        .turns
        .first()
        .filter(|t| t.speaker == Speaker::User)
        .ok_or_else(|| PlotError::Labels("plot does not open with a user turn".into()))?;
    let keys = user_arg_keys(plot);
    let mut intents = Vec::new();
    let mut nested = false;
    for a in &first.actions {
        intents.push(resolve_intent(a, schemas, &keys)?);
        let args = a.args.iter().chain(a.chain.iter().flat_map(|s| match s {
            Segment::Call { args, .. } => args.iter(),
            Segment::Field(_) => [].iter(),
        }));
        for arg in args {
            if let Some(Value::Action(inner)) = &arg.value {
                intents.push(resolve_intent(inner, schemas, &keys)?);
                nested = true;
            }
        }
    }
    let kind = match (first.actions.len(), nested) {
        (2, _) => Kind::Compound,
        (1, true) => Kind::Compositional,
        (1, false) => Kind::Single,
        (n, _) => return Err(PlotError::Labels(format!("{n} actions in the opening turn"))),
    };
    let mut services: Vec<String> = Vec::new();
    for (s, _) in &intents {
        if !services.contains(s) {
            services.push(s.clone());
        }
    }
    let mut phenomena = Vec::new();
    let user_turns = || plot.turns.iter().filter(|t| t.speaker == Speaker::User);
    if user_turns().any(|t| t.actions.iter().any(Action::has_self_correction)) {
        phenomena.push(Phenomenon::SelfCorrection);
    }
    if user_turns().any(|t| {
        t.actions.iter().any(|a| {
            let mut hit = false;
            a.walk(&mut |x| hit |= x.is_complex_referral());
            hit
        })
    }) {
        phenomena.push(Phenomenon::ComplexReferral);
    }
    Ok(Labels {
        services,
        intents: intents.into_iter().map(|(s, i)| format!("{s}.{i}")).collect(),
        kind,
        phenomena,
    })
}

/// Structural invariants: user opens, speakers alternate, one default
/// style per system turn, and every required slot is stated by the user.
pub fn validate_plot(plot: &Plot, schemas: &SchemaSet) -> Result<(), PlotError> {
    let bad = |m: String| Err(PlotError::Invalid(m));
    if plot.turns.first().map(|t| t.speaker) != Some(Speaker::User) {
        return bad("first turn must be a user turn".into());
    }
    for w in plot.turns.windows(2) {
        if w[0].speaker == w[1].speaker {
            return bad("speakers must alternate".into());
        }
    }
    let systems = plot.system_turns().count();
    if plot.default_styles.len() != systems {
        return bad(format!("{} default styles for {systems} system turns", plot.default_styles.len()));
    }
    let keys = user_arg_keys(plot);
    for key in &plot.labels.intents {
        let (svc, intent) = key.split_once('.').unwrap_or((key, ""));
        let spec = schemas
            .intent(svc, intent)
            .ok_or_else(|| PlotError::UnknownIntent(key.clone()))?;
        for r in &spec.required_slots {
            if !keys.contains(r) {
                return bad(format!("required slot `{r}` of {key} never stated by the user"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_keys_round_trip() {
        for s in Style::all() {
            assert_eq!(Style::from_key(&s.key()), Some(s));
        }
        assert_eq!(Style::all()[0].key(), "verbosity_low mirroring");
        assert_eq!(Style::all()[5].key(), "verbosity_high no_mirroring");
    }

    #[test]
    fn lines_round_trip() {
        let l = "@System@: [alarms_ask_confirm(get_alarms(name=\"Morning Workout\").delete(name)), alarms_inform_result(name=\"Family Dinner\")]";
        let t = Turn::parse_line(l).unwrap();
        assert_eq!(t.speaker, Speaker::System);
        assert_eq!(t.actions.len(), 2);
        assert_eq!(t.line(), l);
        assert!(Turn::parse_line("User: hi()").is_err());
    }

    #[test]
    fn spelling_normalized() {
        assert_eq!(
            normalize_spelling("@System@: request_infomation(showtime)"),
            "@System@: request_information(showtime)"
        );
    }
}

#[cfg(test)]
mod end_to_end {
    use super::*;
    use crate::context::{generate_contexts, ContextConfig, ContextSet};
    use crate::persona::{generate_persona, PersonaConfig, PersonaTables};
    use crate::sampler::{generate_slot_values, sample_specimen, SamplerConfig};
    use crate::util::rng_for;

    #[test]
    fn sampled_plots_are_valid_and_relabel() {
        let schemas = SchemaSet::bundled();
        let llm = LlmClient::mock(11);
        let mut rng = rng_for(11, "p", 0);
        let persona =
            generate_persona(&mut rng, &PersonaTables::bundled(), &PersonaConfig::default(), &llm, "p0000").unwrap();
        let now: crate::context::Timestamp = "2025-04-16T09:05".parse().unwrap();
        let ctxs = generate_contexts(&persona, &schemas, now, &llm, &mut rng, &ContextConfig::default()).unwrap();
        let set = ContextSet {
            persona_id: persona.id.clone(),
            now,
            contexts: ctxs.into_values().collect(),
        };
        let cfg = SamplerConfig::default();
        let mut kinds = std::collections::BTreeMap::new();
        for i in 0..300u64 {
            let mut rng = rng_for(11, "dialog", i);
            let mut spec = sample_specimen(&format!("d{i}"), &mut rng, &schemas, &persona.id, &set, &cfg).unwrap();
            let dialog_ctx: Vec<AppContext> = set
                .contexts
                .iter()
                .filter(|c| spec.context_services.contains(&c.service_name))
                .cloned()
                .collect();
            let fill = generate_slot_values(&spec, Some(&persona), &schemas, &dialog_ctx, &mut rng, &llm, &cfg).unwrap();
            spec.apply(fill);
            let plot = build_plot(&spec, &schemas, &dialog_ctx, &mut rng, &llm, &PlotConfig::default())
                .unwrap_or_else(|e| panic!("{}: {e}\n{spec:#?}", spec.id));
            validate_plot(&plot, &schemas).unwrap_or_else(|e| panic!("{e}\n{}", plot.lines().join("\n")));
            let derived = derive_labels(&plot, &schemas).unwrap_or_else(|e| panic!("{e}\n{}", plot.lines().join("\n")));
            assert_eq!(derived, plot.labels, "\n{}", plot.lines().join("\n"));
            if std::env::var("SHOW_PLOTS").is_ok() && i % 15 == 0 {
                eprintln!("{:?} {:?}\n{}\n", plot.labels, plot.default_styles.iter().map(|s| s.key()).collect::<Vec<_>>(), plot.lines().join("\n"));
            }
            *kinds.entry(plot.labels.kind).or_insert(0) += 1;
        }
        assert_eq!(kinds.len(), 3);
    }
}
