use rand::prelude::*;

use super::query::{query_database, QueryResult};
use super::referring::choose_referring_expression;
use super::{Labels, Plot, PlotConfig, PlotError, Turn};
use crate::context::AppContext;
use crate::llm::LlmClient;
use crate::mr::{Action, Arg, Record, Value};
use crate::sampler::DialogSpecimen;
use crate::schema::{IntentSpec, SchemaSet, ServiceSchema};

/// How a context intent addresses its record: the targeted record, the
/// slots used to refer to it, and for checks the slots asked about.
#[derive(Debug, Clone)]
pub struct ContextTarget<'a> {
    pub context: &'a AppContext,
    pub target: usize,
    pub filter: Vec<String>,
    pub asked: Vec<String>,
}

impl ContextTarget<'_> {
    fn record(&self) -> &Record {
        &self.context.records[self.target]
    }

    fn getter(&self) -> Action {
        let rec = self.record();
        let args = self
            .filter
            .iter()
            .map(|s| Arg::new(s.clone(), Value::from(rec[s].clone())))
            .collect();
        Action::with_args(format!("get_{}", self.context.service_name), args)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SingleOptions {
    /// Slots that must appear in the opening request.
    pub forced_initial: Vec<String>,
    /// Values supplied from outside the specimen (a compositional input).
    pub extra_values: Record,
    /// Slots a check intent asks about, overriding the random choice.
    pub asked: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct SinglePlot {
    pub plot: Plot,
    /// The record the intent reports on: the targeted context record, or
    /// the first query result.
    pub result: Option<Record>,
}

fn kwargs(values: &Record, slots: &[String]) -> Vec<Arg> {
    slots
        .iter()
        .filter_map(|s| values.get(s).map(|v| Arg::new(s.clone(), Value::from(v.clone()))))
        .collect()
}

fn bare(slots: &[String]) -> Vec<Arg> {
    slots.iter().map(|s| Arg::bare(s.clone())).collect()
}

/// Slots the user supplies over the dialog: the opening ones plus every
/// required slot, in schema declaration order.
fn provided(service: &ServiceSchema, intent: &IntentSpec, initial: &[String]) -> Vec<String> {
    let mut out: Vec<String> = intent
        .input_slots()
        .filter(|s| initial.contains(s) || intent.required_slots.contains(s))
        .cloned()
        .collect();
    out.sort_by_key(|s| service.slot_position(s));
    out
}

/// Chain call for a context intent: keyword args when it carries input
/// values, otherwise the asked or emphasized slots bare.
fn context_call(intent: &IntentSpec, values: &Record, slots: &[String], target: &ContextTarget<'_>) -> Vec<Arg> {
    let kw = kwargs(values, slots);
    if !kw.is_empty() {
        return kw;
    }
    if intent.report_result && !target.asked.is_empty() {
        return bare(&target.asked);
    }
    bare(&intent.summary_emphasis_slots)
}

/// Deterministic plot for one intent given which slots open the dialog.
pub fn single_plot_from_initial(
    service: &ServiceSchema,
    intent: &IntentSpec,
    values: &Record,
    initial: &[String],
    target: Option<&ContextTarget<'_>>,
    query: Option<&QueryResult>,
) -> Result<Plot, PlotError> {
    let key = format!("{}.{}", service.service_name, intent.name);
    for r in &intent.required_slots {
        if !values.contains_key(r) {
            return Err(PlotError::MissingSlot {
                intent: key,
                slot: r.clone(),
            });
        }
    }
    if intent.require_context && target.is_none() {
        return Err(PlotError::EmptyContext(key));
    }
    let initial: Vec<String> = initial.iter().filter(|s| values.contains_key(*s)).cloned().collect();
    let all = provided(service, intent, &initial);

    let (opening, full) = match target {
        Some(t) => (
            t.getter().call(intent.name.clone(), context_call(intent, values, &initial, t)),
            t.getter().call(intent.name.clone(), context_call(intent, values, &all, t)),
        ),
        None => (
            Action::with_args(intent.name.clone(), kwargs(values, &initial)),
            Action::with_args(intent.name.clone(), kwargs(values, &all)),
        ),
    };

    let mut turns = vec![Turn::user(vec![opening])];
    for slot in &intent.required_slots {
        if initial.contains(slot) {
            continue;
        }
        turns.push(Turn::system(vec![Action::with_args("request_information", vec![Arg::bare(slot.clone())])]));
        turns.push(Turn::user(vec![Action::with_args(
            "inform_information",
            kwargs(values, std::slice::from_ref(slot)),
        )]));
    }
    if intent.require_confirmation {
        turns.push(Turn::system(vec![Action::with_args(
            "ask_confirm",
            vec![Arg::positional(full.clone())],
        )]));
        turns.push(Turn::user(vec![Action::new("confirm")]));
    }
    let terminal = if intent.return_list {
        let q = query.ok_or_else(|| PlotError::Invalid(format!("{key} needs query results")))?;
        let emph = if intent.summary_emphasis_slots.is_empty() {
            intent.result_slots.iter().take(1).cloned().collect()
        } else {
            intent.summary_emphasis_slots.clone()
        };
        let mut args = vec![Arg::new("count", q.records.len() as i64)];
        for s in emph {
            let joined: Vec<String> = q.records.iter().filter_map(|r| r.get(&s)).map(|v| v.to_string()).collect();
            args.push(Arg::new(s, joined.join(", ").as_str()));
        }
        Action::with_args("summary", args)
    } else if intent.report_result {
        match (target, query) {
            (Some(t), _) => Action::with_args("inform_result", kwargs(t.record(), &t.asked)),
            (None, Some(q)) => Action::with_args("inform_result", kwargs(&q.records[0], &intent.result_slots)),
            (None, None) => return Err(PlotError::Invalid(format!("{key} needs query results"))),
        }
    } else {
        Action::with_args("notify_done", vec![Arg::positional(full)])
    };
    turns.push(Turn::system(vec![terminal]));
    Ok(Plot {
        turns,
        default_styles: Vec::new(),
        labels: Labels::single(&service.service_name, &intent.name),
    })
}

/// Opening slots: the minimum initial ones, forced ones, a random subset of
/// the rest, topped up to the intent's minimum input count.
fn choose_initial<R: Rng>(
    rng: &mut R,
    intent: &IntentSpec,
    values: &Record,
    forced: &[String],
    optional_prob: f64,
) -> Vec<String> {
    let mut chosen: Vec<String> = Vec::new();
    for s in intent.minimum_initial_slots.iter().chain(forced) {
        if values.contains_key(s) && !chosen.contains(s) {
            chosen.push(s.clone());
        }
    }
    for s in &intent.required_slots {
        if !chosen.contains(s) && rng.gen_bool(0.5) {
            chosen.push(s.clone());
        }
    }
    for s in &intent.optional_slots {
        if !chosen.contains(s) && values.contains_key(s) && rng.gen_bool(optional_prob) {
            chosen.push(s.clone());
        }
    }
    let mut rest: Vec<&String> = intent.required_slots.iter().filter(|s| !chosen.contains(s)).collect();
    rest.shuffle(rng);
    let mut opt: Vec<&String> = intent
        .optional_slots
        .iter()
        .filter(|s| !chosen.contains(s) && values.contains_key(*s))
        .collect();
    opt.shuffle(rng);
    for s in rest.into_iter().chain(opt) {
        if chosen.len() >= intent.minimum_input_slot_number {
            break;
        }
        chosen.push(s.clone());
    }
    // keep the specimen's value order
    values.keys().filter(|k| chosen.contains(k)).cloned().collect()
}

/// Plot for intent `idx` of a specimen.
#[allow(clippy::too_many_arguments)]
pub fn build_single_plot<R: Rng>(
    spec: &DialogSpecimen,
    idx: usize,
    schemas: &SchemaSet,
    contexts: &[AppContext],
    rng: &mut R,
    llm: &LlmClient,
    cfg: &PlotConfig,
    opts: &SingleOptions,
) -> Result<SinglePlot, PlotError> {
    let r = &spec.intents[idx];
    let service = schemas
        .service(&r.service)
        .ok_or_else(|| PlotError::UnknownIntent(r.key()))?;
    let intent = service.intent(&r.intent).ok_or_else(|| PlotError::UnknownIntent(r.key()))?;
    let mut values = spec.values(&r.key());
    for (k, v) in &opts.extra_values {
        values.insert(k.clone(), v.clone());
    }
    let initial = choose_initial(rng, intent, &values, &opts.forced_initial, cfg.optional_slot_prob);

    let mut target = None;
    if intent.require_context {
        let ctx = contexts
            .iter()
            .find(|c| c.service_name == r.service && !c.records.is_empty())
            .ok_or_else(|| PlotError::EmptyContext(r.key()))?;
        let idx = spec.targets.get(&r.key()).copied().unwrap_or(0).min(ctx.records.len() - 1);
        let preference = schemas.meta(&r.service).map(|m| m.referring_preference.clone()).unwrap_or_default();
        let filter = choose_referring_expression(&ctx.records[idx], &ctx.records, &preference)?;
        let asked = match &opts.asked {
            Some(a) => a.clone(),
            None if intent.report_result => {
                let fresh: Vec<&String> = intent.result_slots.iter().filter(|s| !filter.contains(s)).collect();
                let pool = if fresh.is_empty() { intent.result_slots.iter().collect() } else { fresh };
                pool.choose(rng).map(|s| vec![(*s).clone()]).unwrap_or_default()
            }
            None => Vec::new(),
        };
        target = Some(ContextTarget {
            context: ctx,
            target: idx,
            filter,
            asked,
        });
    }

    let query = if intent.is_query() && target.is_none() {
        let all = provided(service, intent, &initial);
        let inputs: Record = all
            .iter()
            .filter_map(|s| values.get(s).map(|v| (s.clone(), v.clone())))
            .collect();
        Some(query_database(service, intent, &inputs, spec.now, llm, cfg.query_attempts)?)
    } else {
        None
    };

    let plot = single_plot_from_initial(service, intent, &values, &initial, target.as_ref(), query.as_ref())?;
    let result = match (&target, &query) {
        (Some(t), _) => Some(t.record().clone()),
        (None, Some(q)) => q.records.first().cloned(),
        _ => None,
    };
    Ok(SinglePlot { plot, result })
}
