//! Turn plots into utterances: persona-conditioned user turns and six-style
//! system turns, with history built from each system turn's default style.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::context::{render_contexts, AppContext, Timestamp};
use crate::llm::{extract_json_object, CompletionRequest, LlmClient, LlmError};
use crate::mr::{print_action, Scalar};
use crate::persona::Persona;
use crate::plot::{Plot, Speaker, Style, Turn};
use crate::template::{TemplateError, TemplateSet};

/// The exchange every conversation history starts from.
pub const SEED_EXCHANGE: &str = "user: {\"actions\": [\"hello()\"], \"message\": \"Hi.\"}\n\
assistant: {\"actions\": [\"offer_help()\"], \"message\": \"Hello, how can I help?\"}";

/// Style definitions as worded in the system prompt.
pub const STYLE_DEFINITIONS: [(&str, &str); 6] = [
    ("verbosity_low", "Your response must only have a couple of words, such as \"when\", \"how long\" or \"done\"."),
    ("verbosity_mid", "Your response should be a concise but complete sentence and must replace the nouns or noun phrases mentioned by user with pronouns, such as \"it\", \"that\" and \"its\"."),
    ("verbosity_high", "Your response should use full expressions with all the details."),
    ("mirroring", "Your response should use the user's noun phrase or verb expressions when possible."),
    ("no_mirroring", "Ignore all previous dialog. Do not affect by user expression."),
    ("summary", "Your response should be a brief report of the given summary."),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyledResponse {
    /// Keyed by style key, in the canonical six-style order.
    pub variants: IndexMap<String, String>,
    pub default_key: Style,
}

impl StyledResponse {
    pub fn get(&self, style: Style) -> &str {
        self.variants.get(&style.key()).map(String::as_str).unwrap_or("")
    }

    pub fn default_text(&self) -> &str {
        self.get(self.default_key)
    }

    /// Build from a completion object, requiring exactly the six keys with
    /// non-empty strings.
    pub fn from_json(obj: &Json, default_key: Style) -> Result<Self, String> {
        let map = obj.as_object().ok_or("completion is not an object")?;
        let expected: Vec<String> = Style::all().iter().map(|s| s.key()).collect();
        if let Some(extra) = map.keys().find(|k| !expected.contains(k)) {
            return Err(format!("unexpected key `{extra}`"));
        }
        let mut variants = IndexMap::new();
        for k in expected {
            let text = map
                .get(&k)
                .and_then(Json::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("missing or empty `{k}`"))?;
            variants.insert(k, text.to_string());
        }
        Ok(StyledResponse { variants, default_key })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RealizedTurn {
    User(String),
    System(StyledResponse),
}

impl RealizedTurn {
    pub fn speaker(&self) -> Speaker {
        match self {
            RealizedTurn::User(_) => Speaker::User,
            RealizedTurn::System(_) => Speaker::System,
        }
    }

    /// The user's utterance or the system's default-style utterance.
    pub fn text(&self) -> &str {
        match self {
            RealizedTurn::User(s) => s,
            RealizedTurn::System(r) => r.default_text(),
        }
    }
}

/// Utterances aligned one-to-one with a plot's turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogRecord {
    pub turns: Vec<RealizedTurn>,
}

impl DialogRecord {
    pub fn check_alignment(&self, plot: &Plot) -> Result<(), RealizerError> {
        if self.turns.len() > plot.turns.len() {
            return Err(RealizerError::Misaligned(format!(
                "{} utterances for {} turns",
                self.turns.len(),
                plot.turns.len()
            )));
        }
        for (i, (r, t)) in self.turns.iter().zip(&plot.turns).enumerate() {
            if r.speaker() != t.speaker {
                return Err(RealizerError::Misaligned(format!("turn {i} speaker differs")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RealizerError {
    #[error("turn {turn}: no usable completion after {attempts} attempt(s): {reason}")]
    Unparseable { turn: usize, attempts: u32, reason: String },
    #[error("dialog record misaligned with plot: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizerConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub attempts: u32,
    /// One completion per style instead of all six at once.
    pub per_style: bool,
}

impl Default for RealizerConfig {
    fn default() -> Self {
        RealizerConfig {
            temperature: 0.7,
            max_tokens: 512,
            attempts: 3,
            per_style: false,
        }
    }
}

/// What both roles know about the dialog's surroundings.
#[derive(Debug, Clone)]
pub struct Scene {
    pub services: Vec<String>,
    pub now: Timestamp,
    pub context: String,
}

impl Scene {
    pub fn new(services: Vec<String>, now: Timestamp, contexts: &[AppContext]) -> Self {
        Scene {
            services,
            now,
            context: render_contexts(now, contexts),
        }
    }

    fn situation(&self) -> String {
        self.services.join(", ")
    }
}

fn action_strings(turn: &Turn) -> Vec<String> {
    turn.actions.iter().map(print_action).collect()
}

fn history_line(speaker: Speaker, turn: &Turn, text: &str) -> String {
    let who = match speaker {
        Speaker::User => "user",
        Speaker::System => "assistant",
    };
    format!("{who}: {}", json!({ "actions": action_strings(turn), "message": text }))
}

/// Conversation so far, with each system turn shown in its default style.
pub fn build_history(plot: &Plot, record: &DialogRecord) -> Result<String, RealizerError> {
    record.check_alignment(plot)?;
    let mut out = String::from(SEED_EXCHANGE);
    for (r, t) in record.turns.iter().zip(&plot.turns) {
        out.push('\n');
        out.push_str(&history_line(t.speaker, t, r.text()));
    }
    Ok(out)
}

fn user_values(turn: &Turn) -> Vec<String> {
    let mut out = Vec::new();
    for a in &turn.actions {
        for (_, v) in a.literals() {
            let s = match v {
                Scalar::Str(s) => s,
                Scalar::Int(i) => i.to_string(),
                Scalar::Bool(_) => continue,
            };
            if !out.contains(&s) {
                out.push(s);
            }
        }
    }
    out
}

fn action_list(turn: &Turn) -> String {
    serde_json::to_string(&action_strings(turn)).expect("strings serialize")
}

/// Generates utterances with separate user-role and system-role backends.
pub struct Realizer<'a> {
    pub templates: &'a TemplateSet,
    pub user_llm: &'a LlmClient,
    pub system_llm: &'a LlmClient,
    pub cfg: &'a RealizerConfig,
}

impl Realizer<'_> {
    fn attempt<T>(
        &self,
        llm: &LlmClient,
        turn: usize,
        req: CompletionRequest,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, RealizerError> {
        let attempts = self.cfg.attempts.max(1);
        let mut reason = String::new();
        for attempt in 1..=attempts {
            let mut req = req.clone();
            if attempt > 1 {
                req.meta["attempt"] = json!(attempt);
            }
            let text = llm.complete(&req)?.text;
            match parse(&text) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("{} turn {turn} attempt {attempt}: {e}", req.tag);
                    reason = e;
                }
            }
        }
        Err(RealizerError::Unparseable { turn, attempts, reason })
    }

    /// The user's next utterance.
    pub fn realize_user_turn(
        &self,
        plot: &Plot,
        index: usize,
        history: &str,
        persona: &Persona,
        scene: &Scene,
    ) -> Result<String, RealizerError> {
        let turn = &plot.turns[index];
        debug_assert_eq!(turn.speaker, Speaker::User);
        let after_seed = history.strip_prefix(SEED_EXCHANGE).unwrap_or(history).trim_start_matches('\n');
        let mut b = BTreeMap::new();
        b.insert("user_intro", persona.introduction.clone());
        b.insert("context", scene.context.clone());
        b.insert("situation", scene.situation());
        b.insert("history", after_seed.to_string());
        b.insert("action[cur_turn]", action_list(turn));
        b.insert("user_style_instruction", persona.speaking_habit.clone());
        let prompt = self.templates.user.render(&b)?;
        let req = CompletionRequest::user("user_turn", prompt)
            .with_sampling(self.cfg.temperature, self.cfg.max_tokens)
            .with_meta(json!({
                "task": "user_turn",
                "actions": action_strings(turn),
                "services": scene.services,
                "today": scene.now.date().to_string(),
            }));
        self.attempt(self.user_llm, index, req, |text| {
            let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
            obj.get("message")
                .and_then(Json::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .ok_or_else(|| "missing `message`".to_string())
        })
    }

    fn system_meta(&self, plot: &Plot, index: usize, record: &DialogRecord, scene: &Scene) -> Json {
        let prev_user = (0..index).rev().find(|&i| plot.turns[i].speaker == Speaker::User);
        let (last_user, values) = match prev_user {
            Some(i) => (
                record.turns.get(i).map(|r| r.text().to_string()).unwrap_or_default(),
                user_values(&plot.turns[i]),
            ),
            None => (String::new(), Vec::new()),
        };
        json!({
            "task": "system_turn",
            "actions": action_strings(&plot.turns[index]),
            "services": scene.services,
            "last_user": last_user,
            "last_user_values": values,
            "today": scene.now.date().to_string(),
        })
    }

    /// All six styled variants of a system turn.
    pub fn realize_system_turn(
        &self,
        plot: &Plot,
        index: usize,
        history: &str,
        record: &DialogRecord,
        scene: &Scene,
    ) -> Result<StyledResponse, RealizerError> {
        let turn = &plot.turns[index];
        debug_assert_eq!(turn.speaker, Speaker::System);
        let default_key = plot
            .style_of(index)
            .ok_or_else(|| RealizerError::Misaligned(format!("turn {index} has no default style")))?;
        let meta = self.system_meta(plot, index, record, scene);
        let mut b = BTreeMap::new();
        b.insert("situation", scene.situation());
        b.insert("history", history.to_string());
        b.insert("action[cur_turn]", action_list(turn));
        if !self.cfg.per_style {
            let prompt = self.templates.system.render(&b)?;
            let req = CompletionRequest::user("system_turn", prompt)
                .with_sampling(self.cfg.temperature, self.cfg.max_tokens)
                .with_meta(meta);
            return self.attempt(self.system_llm, index, req, |text| {
                let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
                StyledResponse::from_json(&obj, default_key)
            });
        }
        let mut variants = IndexMap::new();
        for style in Style::all() {
            let (verb, mirror) = style.key().split_once(' ').map(|(a, b)| (a.to_string(), b.to_string())).unwrap();
            let def = |k: &str| STYLE_DEFINITIONS.iter().find(|(n, _)| *n == k).map(|(_, d)| *d).unwrap_or("");
            b.insert("style", style.key());
            b.insert("style_definition", format!("'{verb}': {}\n'{mirror}': {}", def(&verb), def(&mirror)));
            let prompt = self.templates.system_single_style.render(&b)?;
            let mut m = meta.clone();
            m["task"] = json!("system_style");
            m["style"] = json!(style.key());
            let req = CompletionRequest::user("system_style", prompt)
                .with_sampling(self.cfg.temperature, self.cfg.max_tokens)
                .with_meta(m);
            let text = self.attempt(self.system_llm, index, req, |text| {
                let obj = extract_json_object(text).ok_or("no JSON object in completion")?;
                obj.get("response")
                    .and_then(Json::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .ok_or_else(|| "missing `response`".to_string())
            })?;
            variants.insert(style.key(), text);
        }
        Ok(StyledResponse { variants, default_key })
    }

    /// Realize every turn in order; each turn sees the history before it.
    pub fn realize_dialog(&self, plot: &Plot, persona: &Persona, scene: &Scene) -> Result<DialogRecord, RealizerError> {
        let mut record = DialogRecord::default();
        for (i, turn) in plot.turns.iter().enumerate() {
            let history = build_history(plot, &record)?;
            let r = match turn.speaker {
                Speaker::User => RealizedTurn::User(self.realize_user_turn(plot, i, &history, persona, scene)?),
                Speaker::System => RealizedTurn::System(self.realize_system_turn(plot, i, &history, &record, scene)?),
            };
            record.turns.push(r);
        }
        Ok(record)
    }
}
