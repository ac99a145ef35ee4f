//! Service schemas: intents, slots and the meta-indicators that steer plot
//! construction.
//!
//! Files use a fixed JSON layout (`service_name`, `intent_operations`,
//! `slots`). Unknown keys are rejected. A manifest lists the active set and
//! carries per-service generation metadata that is not part of the schema
//! layout itself.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub name: String,
    pub description: String,
    pub potential_values: Vec<String>,
    pub alias: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub name: String,
    pub description: String,
    pub require_input_values: bool,
    pub require_context: bool,
    pub require_confirmation: bool,
    pub return_list: bool,
    pub report_result: bool,
    pub check_on_input: bool,
    pub can_refer_to_input_slot: bool,
    pub minimum_input_slot_number: usize,
    pub minimum_initial_slots: Vec<String>,
    pub summary_emphasis_slots: Vec<String>,
    pub required_slots: Vec<String>,
    pub optional_slots: Vec<String>,
    pub result_slots: Vec<String>,
}

impl IntentSpec {
    /// Required then optional slots, in declaration order.
    pub fn input_slots(&self) -> impl Iterator<Item = &String> {
        self.required_slots.iter().chain(self.optional_slots.iter())
    }

    /// Intents that report something back rather than performing an operation.
    pub fn is_query(&self) -> bool {
        self.report_result || self.return_list
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSchema {
    pub service_name: String,
    pub intent_operations: Vec<IntentSpec>,
    pub slots: Vec<SlotSpec>,
}

impl ServiceSchema {
    pub fn intent(&self, name: &str) -> Option<&IntentSpec> {
        self.intent_operations.iter().find(|i| i.name == name)
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Position of a slot in the service's declaration order.
    pub fn slot_position(&self, name: &str) -> usize {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .unwrap_or(usize::MAX)
    }

    pub fn getter(&self) -> String {
        format!("get_{}", self.service_name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("{path}: parse error: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Parse and validate one schema file.
pub fn load_schema<R: Read>(mut source: R) -> Result<ServiceSchema, SchemaError> {
    let mut text = String::new();
    source.read_to_string(&mut text).map_err(|e| SchemaError::Io {
        path: "$".into(),
        source: e,
    })?;
    let schema: ServiceSchema = serde_json::from_str(&text).map_err(|e| SchemaError::Parse {
        path: "$".into(),
        source: e,
    })?;
    validate_service(&schema)?;
    Ok(schema)
}

pub fn load_schema_file(path: &Path) -> Result<ServiceSchema, SchemaError> {
    let file = std::fs::File::open(path).map_err(|e| SchemaError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    load_schema(file).map_err(|e| match e {
        SchemaError::Parse { source, .. } => SchemaError::Parse {
            path: path.display().to_string(),
            source,
        },
        SchemaError::Invalid { path: p, message } => SchemaError::Invalid {
            path: format!("{}:{}", path.display(), p),
            message,
        },
        other => other,
    })
}

/// Per-service invariants. The error path points at the offending field.
pub fn validate_service(s: &ServiceSchema) -> Result<(), SchemaError> {
    if s.service_name.is_empty() {
        return Err(invalid("$.service_name", "service name is empty"));
    }
    let mut slot_names = BTreeSet::new();
    for (i, slot) in s.slots.iter().enumerate() {
        let path = format!("$.slots[{i}]");
        if slot.name.is_empty() {
            return Err(invalid(format!("{path}.name"), "slot name is empty"));
        }
        if !slot_names.insert(slot.name.as_str()) {
            return Err(invalid(
                format!("{path}.name"),
                format!("duplicate slot name `{}`", slot.name),
            ));
        }
        if slot.alias.iter().any(|a| a == &slot.name) {
            return Err(invalid(
                format!("{path}.alias"),
                format!("slot `{}` lists itself as alias", slot.name),
            ));
        }
    }

    let mut graph: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for slot in &s.slots {
        graph.insert(&slot.name, slot.alias.iter().map(String::as_str).collect());
    }
    if let Some(cycle) = find_cycle(&graph) {
        return Err(invalid("$.slots", format!("alias cycle {}", cycle.join(" -> "))));
    }

    let mut intent_names = BTreeSet::new();
    for (i, intent) in s.intent_operations.iter().enumerate() {
        let path = format!("$.intent_operations[{i}]");
        if intent.name.is_empty() {
            return Err(invalid(format!("{path}.name"), "intent name is empty"));
        }
        if !intent_names.insert(intent.name.as_str()) {
            return Err(invalid(
                format!("{path}.name"),
                format!("duplicate intent name `{}`", intent.name),
            ));
        }
        let lists: [(&str, &Vec<String>); 5] = [
            ("required_slots", &intent.required_slots),
            ("optional_slots", &intent.optional_slots),
            ("result_slots", &intent.result_slots),
            ("minimum_initial_slots", &intent.minimum_initial_slots),
            ("summary_emphasis_slots", &intent.summary_emphasis_slots),
        ];
        for (field, names) in lists {
            for (j, name) in names.iter().enumerate() {
                if !slot_names.contains(name.as_str()) {
                    return Err(invalid(
                        format!("{path}.{field}[{j}]"),
                        format!("unknown slot `{name}`"),
                    ));
                }
            }
        }
        let inputs = intent.required_slots.len() + intent.optional_slots.len();
        if intent.minimum_input_slot_number > inputs {
            return Err(invalid(
                format!("{path}.minimum_input_slot_number"),
                format!(
                    "minimum_input_slot_number {} exceeds {} input slot(s)",
                    intent.minimum_input_slot_number, inputs
                ),
            ));
        }
        let pairs = [
            ("required_slots", &intent.required_slots, "optional_slots", &intent.optional_slots),
            ("required_slots", &intent.required_slots, "result_slots", &intent.result_slots),
            ("optional_slots", &intent.optional_slots, "result_slots", &intent.result_slots),
        ];
        for (fa, a, fb, b) in pairs {
            if let Some(dup) = a.iter().find(|x| b.contains(x)) {
                return Err(invalid(
                    format!("{path}.{fb}"),
                    format!("slot `{dup}` appears in both {fa} and {fb}"),
                ));
            }
        }
    }
    Ok(())
}

/// DFS cycle detection; returns the cycle path when one exists.
fn find_cycle<'a>(graph: &BTreeMap<&'a str, Vec<&'a str>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit<'a>(
        node: &'a str,
        graph: &BTreeMap<&'a str, Vec<&'a str>>,
        marks: &mut HashMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        match marks.get(node) {
            Some(Mark::Done) => return None,
            Some(Mark::Open) => {
                let start = stack.iter().position(|n| *n == node).unwrap_or(0);
                let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                cycle.push(node.to_string());
                return Some(cycle);
            }
            None => {}
        }
        marks.insert(node, Mark::Open);
        stack.push(node);
        for next in graph.get(node).into_iter().flatten() {
            if let Some(c) = visit(next, graph, marks, stack) {
                return Some(c);
            }
        }
        stack.pop();
        marks.insert(node, Mark::Done);
        None
    }
    let mut marks = HashMap::new();
    for node in graph.keys() {
        let mut stack = Vec::new();
        if let Some(c) = visit(node, graph, &mut marks, &mut stack) {
            return Some(c);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    DuplicateService(String),
    AliasCycle(Vec<String>),
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::DuplicateService(s) => write!(f, "duplicate service name `{s}`"),
            Diagnostic::AliasCycle(c) => write!(f, "alias cycle {}", c.join(" -> ")),
        }
    }
}

/// Alias graph over the global slot-name universe: a slot name maps to the
/// union of alias lists declared for it across services.
pub fn alias_graph(schemas: &[ServiceSchema]) -> BTreeMap<String, BTreeSet<String>> {
    let mut graph: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for s in schemas {
        for slot in &s.slots {
            graph
                .entry(slot.name.clone())
                .or_default()
                .extend(slot.alias.iter().cloned());
        }
    }
    graph
}

/// Cross-service checks. Alias targets may name parent concepts that no
/// service declares as a slot (e.g. `start_date`); they are not flagged.
pub fn validate_schema_set(schemas: &[ServiceSchema]) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for s in schemas {
        if !seen.insert(s.service_name.as_str()) && reported.insert(s.service_name.as_str()) {
            out.push(Diagnostic::DuplicateService(s.service_name.clone()));
        }
    }
    let graph = alias_graph(schemas);
    let borrowed: BTreeMap<&str, Vec<&str>> = graph
        .iter()
        .map(|(k, v)| (k.as_str(), v.iter().map(String::as_str).collect()))
        .collect();
    if let Some(c) = find_cycle(&borrowed) {
        out.push(Diagnostic::AliasCycle(c));
    }
    out
}

/// Transitive (or one-hop) alias closure of a slot name, excluding itself.
pub fn alias_closure(
    graph: &BTreeMap<String, BTreeSet<String>>,
    slot: &str,
    transitive: bool,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut frontier: Vec<String> = graph.get(slot).into_iter().flatten().cloned().collect();
    while let Some(next) = frontier.pop() {
        if next == slot || !out.insert(next.clone()) {
            continue;
        }
        if transitive {
            frontier.extend(graph.get(&next).into_iter().flatten().cloned());
        }
    }
    out
}

/// Generation metadata for one service, kept beside the schema file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceMeta {
    pub file: String,
    /// Service carries on-device app context (alarms, calendar, ...).
    #[serde(default)]
    pub context: bool,
    /// Services whose context must be generated first.
    #[serde(default)]
    pub depends_on: Vec<String>,
    /// Slots whose values must name a generated contact.
    #[serde(default)]
    pub contact_slots: Vec<String>,
    /// Slot preference order for referring to a context record.
    #[serde(default)]
    pub referring_preference: Vec<String>,
    /// Slots usable as `ordered_by` keys for complex referrals.
    #[serde(default)]
    pub orderable_slots: Vec<String>,
    /// Intents whose confirmation concerns an irreversible operation.
    #[serde(default)]
    pub irreversible_intents: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub services: Vec<ServiceMeta>,
}

/// A validated schema set plus its manifest metadata, indexed by service.
#[derive(Debug, Clone)]
pub struct SchemaSet {
    pub services: Vec<ServiceSchema>,
    pub meta: BTreeMap<String, ServiceMeta>,
}

impl SchemaSet {
    pub fn new(services: Vec<ServiceSchema>, metas: Vec<ServiceMeta>) -> Result<Self, SchemaError> {
        let diags = validate_schema_set(&services);
        if let Some(d) = diags.first() {
            return Err(invalid("$", d.to_string()));
        }
        let meta = services
            .iter()
            .zip(metas)
            .map(|(s, m)| (s.service_name.clone(), m))
            .collect();
        Ok(SchemaSet { services, meta })
    }

    /// Schemas without manifest metadata (no context services).
    pub fn bare(services: Vec<ServiceSchema>) -> Result<Self, SchemaError> {
        let metas = services
            .iter()
            .map(|s| ServiceMeta {
                file: format!("{}.json", s.service_name),
                context: false,
                depends_on: vec![],
                contact_slots: vec![],
                referring_preference: s.slots.iter().map(|x| x.name.clone()).collect(),
                orderable_slots: vec![],
                irreversible_intents: vec![],
            })
            .collect();
        Self::new(services, metas)
    }

    pub fn load_manifest(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SchemaError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut services = Vec::new();
        for m in &manifest.services {
            services.push(load_schema_file(&dir.join(&m.file))?);
        }
        Self::new(services, manifest.services)
    }

    /// The authored service set bundled with the crate.
    pub fn bundled() -> Self {
        let manifest: Manifest =
            serde_json::from_str(bundled::MANIFEST).expect("bundled manifest parses");
        let services = manifest
            .services
            .iter()
            .map(|m| {
                let text = bundled::file(&m.file).expect("bundled schema present");
                load_schema(text.as_bytes()).expect("bundled schema valid")
            })
            .collect();
        Self::new(services, manifest.services).expect("bundled set valid")
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSchema> {
        self.services.iter().find(|s| s.service_name == name)
    }

    pub fn meta(&self, name: &str) -> Option<&ServiceMeta> {
        self.meta.get(name)
    }

    pub fn intent(&self, service: &str, intent: &str) -> Option<&IntentSpec> {
        self.service(service)?.intent(intent)
    }

    /// Restrict to the named services, keeping declaration order.
    pub fn subset(&self, names: &[String]) -> Result<Self, SchemaError> {
        for n in names {
            if self.service(n).is_none() {
                return Err(invalid("$.services", format!("unknown service `{n}`")));
            }
        }
        let services: Vec<ServiceSchema> = self
            .services
            .iter()
            .filter(|s| names.contains(&s.service_name))
            .cloned()
            .collect();
        let metas = services
            .iter()
            .map(|s| self.meta[&s.service_name].clone())
            .collect();
        Self::new(services, metas)
    }

    pub fn is_irreversible(&self, service: &str, intent: &str) -> bool {
        self.meta(service)
            .map(|m| m.irreversible_intents.iter().any(|i| i == intent))
            .unwrap_or(false)
    }

    /// Context services in dependency order (dependencies first, otherwise
    /// declaration order).
    pub fn context_order(&self) -> Vec<&ServiceSchema> {
        let ctx: Vec<&ServiceSchema> = self
            .services
            .iter()
            .filter(|s| self.meta(&s.service_name).map(|m| m.context).unwrap_or(false))
            .collect();
        let mut done: Vec<&ServiceSchema> = Vec::new();
        let mut pending = ctx.clone();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|s| {
                let deps = &self.meta[&s.service_name].depends_on;
                let ready = deps.iter().all(|d| {
                    done.iter().any(|x| &x.service_name == d)
                        || !ctx.iter().any(|x| &x.service_name == d)
                });
                if ready {
                    done.push(s);
                }
                !ready
            });
            if pending.len() == before {
                // cyclic dependencies: fall back to declaration order
                done.append(&mut pending);
            }
        }
        done
    }
}

pub mod bundled {
    pub const MANIFEST: &str = include_str!("../schemas/manifest.json");

    const FILES: &[(&str, &str)] = &[
        ("alarms.json", include_str!("../schemas/alarms.json")),
        ("banking.json", include_str!("../schemas/banking.json")),
        ("calendar_events.json", include_str!("../schemas/calendar_events.json")),
        ("contacts.json", include_str!("../schemas/contacts.json")),
        ("hotel_booking.json", include_str!("../schemas/hotel_booking.json")),
        ("messages.json", include_str!("../schemas/messages.json")),
        ("movie.json", include_str!("../schemas/movie.json")),
        ("reminders.json", include_str!("../schemas/reminders.json")),
        ("restaurant_booking.json", include_str!("../schemas/restaurant_booking.json")),
        ("smart_home.json", include_str!("../schemas/smart_home.json")),
        ("weather.json", include_str!("../schemas/weather.json")),
    ];

    pub fn file(name: &str) -> Option<&'static str> {
        FILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }

    pub fn files() -> impl Iterator<Item = (&'static str, &'static str)> {
        FILES.iter().copied()
    }
}
