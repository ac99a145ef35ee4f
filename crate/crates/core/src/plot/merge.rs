use super::{Labels, Plot, PlotError, Speaker, Turn};
use crate::mr::{Action, Segment, Value, SELF_CORRECTION};
use crate::sampler::{Kind, MatchedSlot};

/// One system turn and the user reply it waits for, if any.
#[derive(Debug, Clone)]
struct Step {
    system: Vec<Action>,
    reply: Option<Vec<Action>>,
}

fn split_steps(plot: &Plot) -> (Vec<Action>, Vec<Step>) {
    let opening = plot.turns[0].actions.clone();
    let mut steps = Vec::new();
    let mut i = 1;
    while i < plot.turns.len() {
        let system = plot.turns[i].actions.clone();
        let reply = plot
            .turns
            .get(i + 1)
            .filter(|t| t.speaker == Speaker::User)
            .map(|t| t.actions.clone());
        i += if reply.is_some() { 2 } else { 1 };
        steps.push(Step { system, reply });
    }
    (opening, steps)
}

fn join_steps(opening: Vec<Action>, steps: Vec<Step>, labels: Labels) -> Plot {
    let mut turns = vec![Turn::user(opening)];
    for s in steps {
        turns.push(Turn::system(s.system));
        if let Some(r) = s.reply {
            turns.push(Turn::user(r));
        }
    }
    Plot {
        turns,
        default_styles: Vec::new(),
        labels,
    }
}

fn prefix_user_action(a: &Action, service: &str) -> Action {
    let mut out = a.clone();
    if out.head == format!("get_{service}") && !out.chain.is_empty() {
        for seg in out.chain.iter_mut() {
            if let Segment::Call { name, .. } = seg {
                if name != SELF_CORRECTION {
                    *name = format!("{service}_{name}");
                    break;
                }
            }
        }
    } else {
        out.head = format!("{service}_{}", out.head);
    }
    out
}

/// Prefix every top-level act with the service name. Nested actions inside
/// system acts keep their plain names.
pub fn prefix_plot(plot: &Plot, service: &str) -> Plot {
    let turns = plot
        .turns
        .iter()
        .map(|t| Turn {
            speaker: t.speaker,
            actions: t
                .actions
                .iter()
                .map(|a| match t.speaker {
                    Speaker::User => prefix_user_action(a, service),
                    Speaker::System => {
                        let mut x = a.clone();
                        x.head = format!("{service}_{}", x.head);
                        x
                    }
                })
                .collect(),
        })
        .collect();
    Plot {
        turns,
        default_styles: plot.default_styles.clone(),
        labels: plot.labels.clone(),
    }
}

fn is_confirmation(a: &Action) -> bool {
    a.head == "ask_confirm" || a.head.ends_with("_ask_confirm")
}

fn single_service(p: &Plot) -> Result<&str, PlotError> {
    match (p.labels.kind, p.labels.services.as_slice()) {
        (Kind::Single, [s]) if p.turns.first().map(|t| t.speaker) == Some(Speaker::User) => Ok(s),
        _ => Err(PlotError::NotSingle),
    }
}

/// Interleave two single-intent plots into one compound plot.
///
/// Pending system responses are taken pairwise. When both wait for a user
/// reply they stay separate turns, answered in sequence; otherwise they
/// share one turn, confirmations first, carrying the one pending reply.
pub fn merge_compound(a: &Plot, b: &Plot) -> Result<Plot, PlotError> {
    let (sa, sb) = (single_service(a)?, single_service(b)?);
    let (open_a, steps_a) = split_steps(&prefix_plot(a, sa));
    let (open_b, steps_b) = split_steps(&prefix_plot(b, sb));
    let mut qa = steps_a.into_iter().peekable();
    let mut qb = steps_b.into_iter().peekable();
    let mut out = Vec::new();
    loop {
        match (qa.peek(), qb.peek()) {
            (Some(x), Some(y)) if x.reply.is_some() && y.reply.is_some() => {
                out.push(qa.next().unwrap());
                out.push(qb.next().unwrap());
            }
            (Some(_), Some(_)) => {
                let (x, y) = (qa.next().unwrap(), qb.next().unwrap());
                let mut system: Vec<Action> = x.system.into_iter().chain(y.system).collect();
                system.sort_by_key(|act| !is_confirmation(act));
                out.push(Step {
                    system,
                    reply: x.reply.or(y.reply),
                });
            }
            (Some(_), None) => out.push(qa.next().unwrap()),
            (None, Some(_)) => out.push(qb.next().unwrap()),
            (None, None) => break,
        }
    }
    let mut services = a.labels.services.clone();
    for s in &b.labels.services {
        if !services.contains(s) {
            services.push(s.clone());
        }
    }
    let labels = Labels {
        services,
        intents: a.labels.intents.iter().chain(&b.labels.intents).cloned().collect(),
        kind: Kind::Compound,
        phenomena: Vec::new(),
    };
    Ok(join_steps(open_a.into_iter().chain(open_b).collect(), out, labels))
}

/// Replace the outer input slot's value with the inner action followed by
/// a field access to the matched result slot. Head arguments are searched
/// before chain-call arguments.
pub fn substitute_inner(outer: &Action, inner: &Action, matched: &MatchedSlot) -> Result<Action, PlotError> {
    let value = Value::Action(Box::new(inner.clone().field(matched.inner.clone())));
    let mut out = outer.clone();
    if let Some(arg) = out.arg_mut(&matched.outer) {
        arg.value = Some(value);
        return Ok(out);
    }
    for seg in out.chain.iter_mut() {
        if let Segment::Call { args, .. } = seg {
            if let Some(arg) = args.iter_mut().find(|a| a.key == matched.outer) {
                arg.value = Some(value);
                return Ok(out);
            }
        }
    }
    Err(PlotError::MatchedSlotAbsent(matched.outer.clone()))
}

/// Nest the inner intent into the outer one. The inner intent's slot
/// requests come first; its closing report is dropped because the outer
/// intent consumes the value.
pub fn merge_compositional(outer: &Plot, inner: &Plot, matched: &MatchedSlot) -> Result<Plot, PlotError> {
    let (so, si) = (single_service(outer)?, single_service(inner)?);
    let (open_o, steps_o) = split_steps(&prefix_plot(outer, so));
    let (open_i, mut steps_i) = split_steps(&prefix_plot(inner, si));
    let inner_action = open_i.first().ok_or(PlotError::NotSingle)?;
    let outer_action = open_o.first().ok_or(PlotError::NotSingle)?;
    let nested = substitute_inner(outer_action, inner_action, matched)?;
    steps_i.pop();
    let labels = Labels {
        services: {
            let mut s = vec![so.to_string()];
            if si != so {
                s.push(si.to_string());
            }
            s
        },
        intents: outer.labels.intents.iter().chain(&inner.labels.intents).cloned().collect(),
        kind: Kind::Compositional,
        phenomena: Vec::new(),
    };
    Ok(join_steps(vec![nested], steps_i.into_iter().chain(steps_o).collect(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot(lines: &[&str], service: &str, intent: &str) -> Plot {
        Plot {
            turns: lines.iter().map(|l| Turn::parse_line(l).unwrap()).collect(),
            default_styles: Vec::new(),
            labels: Labels::single(service, intent),
        }
    }

    #[test]
    fn both_waiting_for_replies_stay_separate() {
        let a = plot(
            &[
                "@User@: reserve_table(restaurant=\"Golden Lotus\", date=\"Wed 2025-04-16\", time=\"19:00\")",
                "@System@: request_information(party_size)",
                "@User@: inform_information(party_size=2)",
                "@System@: notify_done(reserve_table(restaurant=\"Golden Lotus\"))",
            ],
            "restaurant_booking",
            "reserve_table",
        );
        let b = plot(
            &[
                "@User@: get_weather(location=\"Miami\")",
                "@System@: request_information(date)",
                "@User@: inform_information(date=\"Thu 2025-04-17\")",
                "@System@: inform_result(condition=\"sunny\")",
            ],
            "weather",
            "get_weather",
        );
        let m = merge_compound(&a, &b).unwrap();
        assert_eq!(
            m.lines(),
            vec![
                "@User@: [restaurant_booking_reserve_table(restaurant=\"Golden Lotus\", date=\"Wed 2025-04-16\", time=\"19:00\"), weather_get_weather(location=\"Miami\")]",
                "@System@: restaurant_booking_request_information(party_size)",
                "@User@: restaurant_booking_inform_information(party_size=2)",
                "@System@: weather_request_information(date)",
                "@User@: weather_inform_information(date=\"Thu 2025-04-17\")",
                "@System@: [restaurant_booking_notify_done(reserve_table(restaurant=\"Golden Lotus\")), weather_inform_result(condition=\"sunny\")]",
            ]
        );
        assert_eq!(m.labels.kind, Kind::Compound);
    }

    #[test]
    fn confirmation_goes_first() {
        let a = plot(&["@User@: check_balance(account_type=\"savings\")", "@System@: inform_result(balance=\"$40\")"], "banking", "check_balance");
        let b = plot(
            &[
                "@User@: send(recipient=\"Mia Kim\", content=\"Hi\")",
                "@System@: ask_confirm(send(recipient=\"Mia Kim\", content=\"Hi\"))",
                "@User@: confirm()",
                "@System@: notify_done(send(recipient=\"Mia Kim\", content=\"Hi\"))",
            ],
            "messages",
            "send",
        );
        let m = merge_compound(&a, &b).unwrap();
        assert_eq!(
            m.lines()[1],
            "@System@: [messages_ask_confirm(send(recipient=\"Mia Kim\", content=\"Hi\")), banking_inform_result(balance=\"$40\")]"
        );
        assert_eq!(m.lines()[2], "@User@: messages_confirm()");
        assert_eq!(m.turns.len(), 4);
    }

    #[test]
    fn substitution_needs_the_slot() {
        let outer = crate::mr::parse_action("get_weather(location=\"Miami\")").unwrap();
        let inner = crate::mr::parse_action("get_movie_time(movie_name=\"Up\")").unwrap();
        let m = MatchedSlot { inner: "showtime".into(), outer: "date".into() };
        assert!(matches!(substitute_inner(&outer, &inner, &m), Err(PlotError::MatchedSlotAbsent(_))));
    }
}
