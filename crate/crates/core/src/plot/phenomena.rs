use std::cmp::Ordering;

use rand::prelude::*;

use super::{Plot, PlotError, Speaker};
use crate::context::AppContext;
use crate::mr::{cmp_scalars, Action, Arg, Record, Segment, Value, INDEX, ORDERED_BY, SELF_CORRECTION};
use crate::sampler::DialogSpecimen;
use crate::schema::SchemaSet;

/// Position `target` takes when `records` are sorted ascending by `slot`,
/// ties kept in insertion order and records lacking the slot placed last.
pub fn ordered_position(target: &Record, records: &[Record], slot: &str) -> Option<usize> {
    let at = records.iter().position(|r| r == target)?;
    let key = target.get(slot)?;
    let before = records
        .iter()
        .enumerate()
        .filter(|(i, r)| match r.get(slot) {
            None => false,
            Some(v) => match cmp_scalars(v, key) {
                Ordering::Less => true,
                Ordering::Equal => *i < at,
                Ordering::Greater => false,
            },
        })
        .count();
    Some(before)
}

/// Replace a getter's filters with an ordered selection of the same record.
pub fn rewrite_referral(getter: &Action, slot: &str, index: usize) -> Action {
    let mut out = getter.clone();
    out.args = vec![Arg::new(ORDERED_BY, slot), Arg::new(INDEX, index as i64)];
    out
}

/// Pre-order visit of an action and every action nested in its arguments.
fn visit_mut(a: &mut Action, f: &mut dyn FnMut(&mut Action)) {
    f(a);
    for arg in a.args.iter_mut() {
        if let Some(Value::Action(inner)) = arg.value.as_mut() {
            visit_mut(inner, f);
        }
    }
    for seg in a.chain.iter_mut() {
        if let Segment::Call { args, .. } = seg {
            for arg in args.iter_mut() {
                if let Some(Value::Action(inner)) = arg.value.as_mut() {
                    visit_mut(inner, f);
                }
            }
        }
    }
}

fn filtered_target<'c>(getter: &Action, ctx: &'c AppContext) -> Option<&'c Record> {
    let mut hits = ctx.records.iter().filter(|r| {
        getter
            .args
            .iter()
            .all(|g| match g.value.as_ref().and_then(Value::as_scalar) {
                Some(v) => r.get(&g.key) == Some(&v),
                None => false,
            })
    });
    let first = hits.next()?;
    hits.next().is_none().then_some(first)
}

fn inject_correction(plot: &mut Plot, spec: &DialogSpecimen) -> Result<(), PlotError> {
    let Some(c) = &spec.correction else {
        return Err(PlotError::Invalid("self-correction without a chosen slot".into()));
    };
    let key = spec.intents[c.intent].key();
    let stale = spec
        .alternatives
        .get(&key)
        .and_then(|r| r.get(&c.slot))
        .cloned()
        .ok_or_else(|| PlotError::Invalid(format!("no alternative value for {key}.{}", c.slot)))?;
    let opening = &mut plot.turns[0].actions;
    let action = opening
        .get_mut(c.intent)
        .ok_or_else(|| PlotError::Invalid(format!("no opening action for {key}")))?;
    let arg = action
        .arg_mut(&c.slot)
        .ok_or_else(|| PlotError::MatchedSlotAbsent(c.slot.clone()))?;
    let fin = arg.value.replace(Value::from(stale));
    let fin = fin.ok_or_else(|| PlotError::Invalid(format!("`{}` has no value", c.slot)))?;
    action.chain.push(Segment::Call {
        name: SELF_CORRECTION.to_string(),
        args: vec![Arg {
            key: c.slot.clone(),
            value: Some(fin),
        }],
    });
    Ok(())
}

fn inject_referral<R: Rng>(
    plot: &mut Plot,
    rng: &mut R,
    contexts: &[AppContext],
    schemas: &SchemaSet,
) -> Result<(), PlotError> {
    // (ordinal among visited actions, service, target, orderable slots)
    let mut candidates = Vec::new();
    let mut ordinal = 0usize;
    for a in plot.turns[0].actions.iter_mut() {
        visit_mut(a, &mut |x| {
            if let Some(svc) = x.head.strip_prefix("get_") {
                let orderable = schemas.meta(svc).map(|m| m.orderable_slots.clone()).unwrap_or_default();
                if let Some(ctx) = contexts.iter().find(|c| c.service_name == svc) {
                    if let Some(t) = filtered_target(x, ctx) {
                        let slots: Vec<String> = orderable.into_iter().filter(|s| t.contains_key(s)).collect();
                        if !slots.is_empty() {
                            candidates.push((ordinal, ctx, t.clone(), slots));
                        }
                    }
                }
            }
            ordinal += 1;
        });
    }
    let (pick, ctx, target, slots) = candidates
        .choose(rng)
        .cloned()
        .ok_or_else(|| PlotError::Invalid("no getter over an orderable context".into()))?;
    let slot = slots.choose(rng).expect("non-empty").clone();
    let index = ordered_position(&target, &ctx.records, &slot).expect("target is in its context");
    let mut ordinal = 0usize;
    for a in plot.turns[0].actions.iter_mut() {
        visit_mut(a, &mut |x| {
            if ordinal == pick {
                *x = rewrite_referral(x, &slot, index);
            }
            ordinal += 1;
        });
    }
    Ok(())
}

/// Apply the specimen's sampled phenomena to the opening user turn.
pub fn inject_phenomena<R: Rng>(
    mut plot: Plot,
    spec: &DialogSpecimen,
    rng: &mut R,
    contexts: &[AppContext],
    schemas: &SchemaSet,
) -> Result<Plot, PlotError> {
    if plot.turns.first().map(|t| t.speaker) != Some(Speaker::User) {
        return Err(PlotError::Invalid("plot does not open with a user turn".into()));
    }
    if spec.phenomena.self_correction {
        inject_correction(&mut plot, spec)?;
    }
    if spec.phenomena.complex_referral {
        inject_referral(&mut plot, rng, contexts, schemas)?;
    }
    Ok(plot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Timestamp;
    use crate::mr::{parse_action, resolve_referral, Resolved};

    fn alarms() -> AppContext {
        let mk = |name: &str, time: &str| -> Record {
            let mut r = Record::new();
            r.insert("name".into(), name.into());
            r.insert("time".into(), time.into());
            r
        };
        let now = Timestamp(chrono::NaiveDate::from_ymd_opt(2025, 4, 16).unwrap().and_hms_opt(6, 0, 0).unwrap());
        AppContext::new(
            "alarms",
            now,
            vec![mk("Family Dinner", "18:30"), mk("Morning Workout", "07:00"), mk("Nap", "07:00")],
        )
    }

    #[test]
    fn positions_agree_with_resolution() {
        let ctx = alarms();
        for (i, t) in ctx.records.iter().enumerate() {
            let pos = ordered_position(t, &ctx.records, "time").unwrap();
            let a = parse_action(&format!("get_alarms(ordered_by=\"time\", index={pos})")).unwrap();
            assert_eq!(resolve_referral(&a, &ctx).unwrap(), Resolved::Record(ctx.records[i].clone()));
        }
        assert_eq!(ordered_position(&ctx.records[2], &ctx.records, "time"), Some(1));
    }

    #[test]
    fn referral_rewrites_the_getter() {
        let ctx = alarms();
        let mut plot = Plot {
            turns: vec![super::super::Turn::parse_line(
                "@User@: get_alarms(name=\"Morning Workout\").check(time)",
            )
            .unwrap()],
            default_styles: Vec::new(),
            labels: super::super::Labels::single("alarms", "check"),
        };
        let mut rng = crate::util::rng_for(0, "t", 0);
        inject_referral(&mut plot, &mut rng, &[ctx], &SchemaSet::bundled()).unwrap();
        let line = plot.turns[0].line();
        assert!(line.starts_with("@User@: get_alarms(ordered_by="), "{line}");
        assert!(plot.turns[0].has_phenomenon());
    }
}
