use std::collections::BTreeSet;

use super::{first_call, split_service, Plot, Speaker, Style, Turn, Verbosity};
use crate::context::AppContext;
use crate::mr::{Action, Value, INDEX, ORDERED_BY};
use crate::qc::contains_bounded;
use crate::schema::SchemaSet;

/// Words that make echoing the user's phrasing unwise.
pub const SENSITIVE_LEXICON: &[&str] = &[
    // emotional
    "angry", "upset", "furious", "frustrated", "annoyed", "sad", "depressed", "devastated", "heartbroken",
    "anxious", "worried", "scared", "terrified", "stressed", "panicking", "lonely", "grieving", "funeral",
    // bias-sensitive
    "race", "racial", "religion", "religious", "ethnicity", "immigrant", "disabled", "disability",
    "pregnant", "sexuality", "gender", "illegal",
    // profanity
    "damn", "hell", "crap", "shit", "fuck", "bastard", "bitch",
];

/// Schema facts the default-style rules consult.
#[derive(Debug, Clone, Default)]
pub struct StylePolicy {
    services: Vec<String>,
    irreversible: BTreeSet<(String, String)>,
    with_results: BTreeSet<(String, String)>,
    lexicon: Vec<String>,
}

impl StylePolicy {
    pub fn from_schemas(schemas: &SchemaSet) -> Self {
        let mut p = StylePolicy {
            services: schemas.services.iter().map(|s| s.service_name.clone()).collect(),
            lexicon: SENSITIVE_LEXICON.iter().map(|s| s.to_string()).collect(),
            ..StylePolicy::default()
        };
        for s in &schemas.services {
            for i in &s.intent_operations {
                let key = (s.service_name.clone(), i.name.clone());
                if schemas.is_irreversible(&s.service_name, &i.name) {
                    p.irreversible.insert(key.clone());
                }
                if !i.result_slots.is_empty() {
                    p.with_results.insert(key);
                }
            }
        }
        p
    }

    pub fn with_lexicon(mut self, words: Vec<String>) -> Self {
        self.lexicon = words;
        self
    }

    fn split<'a>(&self, head: &'a str, fallback: &str) -> (String, &'a str) {
        let names: Vec<&str> = self.services.iter().map(String::as_str).collect();
        split_service(head, &names).unwrap_or_else(|| (fallback.to_string(), head))
    }

    /// (service, intent) of an action nested in a dialog act.
    fn nested_intent(&self, a: &Action, service: &str) -> (String, String) {
        let getter = a.head.strip_prefix("get_").filter(|s| self.services.iter().any(|x| x == s));
        if let (Some(svc), Some((call, _))) = (getter, first_call(a)) {
            let (_, name) = self.split(call, svc);
            return (svc.to_string(), name.to_string());
        }
        let (svc, name) = self.split(&a.head, service);
        (svc, name.to_string())
    }

    fn act_verbosity(&self, a: &Action, fallback: &str) -> Verbosity {
        let (svc, act) = self.split(&a.head, fallback);
        let inner = a.args.first().and_then(|x| x.value.as_ref()).and_then(Value::as_action);
        match act {
            "summary" => Verbosity::High,
            "ask_confirm" => match inner {
                Some(i) if self.irreversible.contains(&self.nested_intent(i, &svc)) => Verbosity::High,
                _ => Verbosity::Low,
            },
            "inform_result" => Verbosity::Mid,
            "notify_done" => match inner {
                Some(i) if self.with_results.contains(&self.nested_intent(i, &svc)) => Verbosity::Mid,
                _ => Verbosity::Low,
            },
            _ => Verbosity::Low,
        }
    }

    /// Whether a user turn should not be mirrored: it uses sensitive words,
    /// or refers to app records ambiguously.
    fn unsafe_to_mirror(&self, turn: &Turn, contexts: &[AppContext]) -> bool {
        for a in &turn.actions {
            let mut flagged = false;
            a.walk(&mut |x| {
                for (_, v) in x.literals() {
                    if let Some(s) = v.as_str() {
                        flagged |= self.lexicon.iter().any(|w| contains_bounded(s, w));
                    }
                }
                if let Some(svc) = x.head.strip_prefix("get_") {
                    if let Some(ctx) = contexts.iter().find(|c| c.service_name == svc) {
                        let filters: Vec<_> = x
                            .args
                            .iter()
                            .filter(|g| g.key != ORDERED_BY && g.key != INDEX)
                            .filter_map(|g| Some((g.key.as_str(), g.value.as_ref()?.as_scalar()?)))
                            .collect();
                        if !filters.is_empty() {
                            let hits = ctx
                                .records
                                .iter()
                                .filter(|r| filters.iter().all(|(k, v)| r.get(*k) == Some(v)))
                                .count();
                            flagged |= hits > 1;
                        }
                    }
                }
            });
            if flagged {
                return true;
            }
        }
        false
    }
}

/// Assign each system turn its default style from the plot structure.
pub fn assign_default_styles(mut plot: Plot, policy: &StylePolicy, contexts: &[AppContext]) -> Plot {
    let fallback = plot.labels.services.first().cloned().unwrap_or_default();
    let mut styles = Vec::new();
    for (i, turn) in plot.turns.iter().enumerate() {
        if turn.speaker != Speaker::System {
            continue;
        }
        let prev = plot.turns[..i].iter().rev().find(|t| t.speaker == Speaker::User);
        let verbosity = if prev.is_some_and(Turn::has_phenomenon) {
            Verbosity::High
        } else {
            turn.actions
                .iter()
                .map(|a| policy.act_verbosity(a, &fallback))
                .max()
                .unwrap_or(Verbosity::Low)
        };
        let mirroring = !prev.is_some_and(|t| policy.unsafe_to_mirror(t, contexts));
        styles.push(Style::new(verbosity, mirroring));
    }
    plot.default_styles = styles;
    plot
}

#[cfg(test)]
mod tests {
    use super::super::Labels;
    use super::*;

    fn plot(lines: &[&str], labels: Labels) -> Plot {
        Plot {
            turns: lines.iter().map(|l| Turn::parse_line(l).unwrap()).collect(),
            default_styles: Vec::new(),
            labels,
        }
    }

    #[test]
    fn irreversible_confirmation_is_high() {
        let p = plot(
            &[
                "@User@: purchase_tickets(movie_name=\"Joker\")",
                "@System@: request_information(showtime)",
                "@User@: inform_information(showtime=\"20:00\")",
                "@System@: ask_confirm(purchase_tickets(movie_name=\"Joker\", showtime=\"20:00\"))",
                "@User@: confirm()",
                "@System@: notify_done(purchase_tickets(movie_name=\"Joker\", showtime=\"20:00\"))",
            ],
            Labels::single("movie", "purchase_tickets"),
        );
        let policy = StylePolicy::from_schemas(&SchemaSet::bundled());
        let p = assign_default_styles(p, &policy, &[]);
        let v: Vec<Verbosity> = p.default_styles.iter().map(|s| s.verbosity).collect();
        assert_eq!(v[0], Verbosity::Low);
        assert_eq!(v[1], Verbosity::High);
        assert!(p.default_styles.iter().all(|s| s.mirroring));
    }

    #[test]
    fn sensitive_words_disable_mirroring() {
        let p = plot(
            &["@User@: send(recipient=\"Mia Kim\", content=\"I am so angry right now\")", "@System@: notify_done(send(recipient=\"Mia Kim\"))"],
            Labels::single("messages", "send"),
        );
        let policy = StylePolicy::from_schemas(&SchemaSet::bundled());
        let p = assign_default_styles(p, &policy, &[]);
        assert!(!p.default_styles[0].mirroring);
    }
}
