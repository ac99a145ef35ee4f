//! Offline backend. Every completion is a pure function of the request and
//! the backend seed, driven by the structured `meta` the pipeline attaches.

use chrono::{Duration, NaiveDate};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value as Json};

use super::{ChatBackend, CompletionRequest, RawCompletion, TransportError};
use crate::mr::{parse_action, Action, Scalar, Segment, Value, INDEX, ORDERED_BY, SELF_CORRECTION};
use crate::util::{fnv1a, word_count, words_of};
use crate::values::{display_date, slot_kind, SlotKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvaluatorMode {
    /// Flag a dialog when a literal value is missing from its turn.
    ValueMatching,
    AlwaysConsistent,
}

pub struct MockBackend {
    seed: u64,
    evaluator: EvaluatorMode,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            evaluator: EvaluatorMode::ValueMatching,
        }
    }

    pub fn with_evaluator(mut self, mode: EvaluatorMode) -> Self {
        self.evaluator = mode;
        self
    }

    fn rng(&self, req: &CompletionRequest) -> ChaCha8Rng {
        let body = serde_json::to_string(req).expect("request serializes");
        let h = fnv1a(body.as_bytes()) ^ self.seed.rotate_left(17);
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, req: &CompletionRequest) -> Result<RawCompletion, TransportError> {
        let mut rng = self.rng(req);
        let m = &req.meta;
        let text = match m.get("task").and_then(Json::as_str) {
            Some("occupation") => occupation(m, &mut rng),
            Some("introduction") => introduction(m, &mut rng),
            Some("context") => context_records(m, &mut rng),
            Some("slot_values") => slot_values(m, &mut rng),
            Some("query") => query(m, &mut rng),
            Some("user_turn") => user_turn(m),
            Some("system_turn") => system_turn(m),
            Some("system_style") => system_style(m),
            Some("evaluate") => evaluate(m, self.evaluator),
            _ => "OK.".to_string(),
        };
        Ok(RawCompletion { text, usage: None })
    }
}

const CITIES: &[&str] = &[
    "Houston", "Miami", "Seattle", "Denver", "Chicago", "Boston", "Austin", "Portland", "Atlanta",
    "San Diego", "Las Vegas", "Phoenix", "Nashville", "Minneapolis",
];
const COMPANIES: &[&str] = &[
    "Northwind Labs", "Bluebird Health", "Summit Partners", "Lakeside High School", "Riverbend Logistics",
    "Evergreen University", "Harbor Bank", "Copperleaf Studio", "Pinecrest Clinic", "Metro Transit",
];
const EVENT_NAMES: &[&str] = &[
    "Morning Workout", "Family Dinner", "Team Standup", "Art Class", "Dentist Appointment", "Book Club",
    "Yoga Session", "Project Review", "Piano Lesson", "Grocery Run", "Soccer Practice", "Budget Meeting",
    "Coffee Chat", "Flight Check-in", "Vet Visit", "Date Night",
];
const FIRST_NAMES: &[&str] = &[
    "David", "Emma", "Liam", "Olivia", "Raj", "Sofia", "Chen", "Amara", "Lucas", "Mia", "Noah", "Zara",
    "Ethan", "Leah", "Omar", "Grace",
];
const LAST_NAMES: &[&str] = &[
    "Carter", "Nguyen", "Patel", "Rossi", "Kim", "Alvarez", "Brooks", "Okafor", "Schmidt", "Ward",
];
const CONTENTS: &[&str] = &[
    "Pick up the dry cleaning", "Call the plumber about the sink", "Bring snacks for the trip",
    "Renew the car registration", "See you at the station", "Running ten minutes late",
    "Water the plants", "Send the slides before noon", "Buy a birthday gift", "Book the vet visit",
    "Dinner is at seven", "Check the lease renewal",
];
const MOVIES: &[&str] = &[
    "Joker", "Inception", "Dune", "Oppenheimer", "Interstellar", "Coco", "Arrival", "Parasite",
    "The Matrix", "Up", "Gravity", "Frozen",
];
const CINEMAS: &[&str] = &[
    "Regal Cinemas", "AMC Empire 25", "Cinemark Plaza", "Alamo Drafthouse", "Landmark Theatre",
    "Majestic Cinema", "Harkins Camelview", "Roxy Theater",
];
const RESTAURANTS: &[&str] = &[
    "French Brasserie", "Golden Lotus", "Casa Bonita", "Trattoria Roma", "Sakura House", "Spice Route",
    "Blue Fin Grill", "Olive Garden Terrace", "Bangkok Garden", "Le Petit Bistro",
];
const HOTELS: &[&str] = &[
    "Grand Plaza Hotel", "Seaside Inn", "Maple Lodge", "The Riverside", "Hilltop Suites",
    "Harbor View Hotel", "Desert Rose Resort", "City Center Inn", "Lakeshore Hotel",
];
const PAYEES: &[&str] = &[
    "City Water", "Metro Electric", "Verizon", "Comcast", "State Farm", "Landlord Jane Ward",
    "Gym Membership", "Visa Card",
];
const DURATIONS: &[&str] = &["30 minutes", "45 minutes", "1 hour", "90 minutes", "2 hours"];
const RATINGS: &[&str] = &["4.8 stars", "4.6 stars", "4.5 stars", "4.3 stars", "4.1 stars", "3.9 stars"];

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).unwrap()
}

fn iso(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

fn today_of(m: &Json) -> NaiveDate {
    m.get("today")
        .and_then(Json::as_str)
        .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
        .unwrap_or_else(|| NaiveDate::from_ymd_opt(2025, 4, 16).unwrap())
}

fn person<R: Rng>(rng: &mut R) -> String {
    format!("{} {}", pick(rng, FIRST_NAMES), pick(rng, LAST_NAMES))
}

fn text_pool(slot: &str) -> Option<&'static [&'static str]> {
    Some(match slot {
        "location" => CITIES,
        "name" => EVENT_NAMES,
        "content" => CONTENTS,
        "movie_name" => MOVIES,
        "cinema_name" => CINEMAS,
        "restaurant" => RESTAURANTS,
        "hotel_name" => HOTELS,
        "payee" => PAYEES,
        "duration_time" => DURATIONS,
        "rating" => RATINGS,
        _ => return None,
    })
}

/// A plausible raw value for a slot, as a backend would write it (ISO
/// dates, 24h times).
fn fake_value<R: Rng>(slot: &str, potential: &[String], today: NaiveDate, rng: &mut R) -> Json {
    if !potential.is_empty() {
        return json!(potential.choose(rng).unwrap());
    }
    match slot_kind(slot) {
        SlotKind::Date if slot == "birthday" => {
            json!(iso(today - Duration::days(rng.gen_range(7000..25000))))
        }
        SlotKind::Date => json!(iso(today + Duration::days(rng.gen_range(0..10)))),
        SlotKind::Time => json!(format!("{:02}:{:02}", rng.gen_range(7..22), [0, 15, 30, 45][rng.gen_range(0..4)])),
        SlotKind::Int => match slot {
            "party_size" => json!(rng.gen_range(1..9)),
            "number_of_rooms" => json!(rng.gen_range(1..4)),
            _ => json!(rng.gen_range(1..5)),
        },
        SlotKind::Bool => json!(rng.gen_bool(0.5)),
        SlotKind::Text => {
            if let Some(pool) = text_pool(slot) {
                return json!(pick(rng, pool));
            }
            json!(match slot {
                "contact_name" | "recipient" | "sender" | "attendees" => person(rng),
                "phone_number" => format!("555-{:04}", rng.gen_range(100..10000)),
                "email" => format!("{}{}@example.com", pick(rng, FIRST_NAMES).to_lowercase(), rng.gen_range(1..99)),
                "amount" | "balance" | "price_per_night" => format!("${}", rng.gen_range(20..900)),
                "temperature" => format!("{} degrees", rng.gen_range(30..95)),
                "status" => pick(rng, &["on", "off", "idle", "running"]).to_string(),
                other => format!("{} {}", words_of(other), rng.gen_range(1..100)),
            })
        }
    }
}

fn slot_list(v: Option<&Json>) -> Vec<(String, Vec<String>)> {
    v.and_then(Json::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|s| {
                    let name = s.get("name")?.as_str()?.to_string();
                    let pv = s
                        .get("potential_values")
                        .and_then(Json::as_array)
                        .map(|x| x.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                        .unwrap_or_default();
                    Some((name, pv))
                })
                .collect()
        })
        .unwrap_or_default()
}

fn str_list(v: Option<&Json>) -> Vec<String> {
    v.and_then(Json::as_array)
        .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

fn occupation(m: &Json, rng: &mut ChaCha8Rng) -> String {
    let level = if m["work_status"] == "student" {
        "entry-level"
    } else {
        pick(rng, &["senior", "intermediate", "entry-level", "not-specified"])
    };
    json!({
        "location": pick(rng, CITIES),
        "affiliation": pick(rng, COMPANIES),
        "job_level": level,
    })
    .to_string()
}

fn introduction(m: &Json, rng: &mut ChaCha8Rng) -> String {
    let s = |k: &str| m.get(k).and_then(Json::as_str).unwrap_or("").to_string();
    let hobby = pick(rng, &["hiking", "baking", "chess", "gardening", "photography", "running", "jazz"]);
    let status = match s("work_status").as_str() {
        "employed" => format!(
            "I work as a {} at {} in {}.",
            s("occupation_title"),
            s("affiliation"),
            s("location")
        ),
        "student" => format!(
            "I am a student studying {} at {} in {}.",
            s("occupation_title"),
            s("affiliation"),
            s("location")
        ),
        _ => "I am retired these days and not working.".to_string(),
    };
    format!(
        "Hi, I'm {} {}. {status} In my free time I enjoy {hobby}, and friends say I am a typical {}.",
        s("first_name"),
        s("surname"),
        s("mbti")
    )
}

fn context_records(m: &Json, rng: &mut ChaCha8Rng) -> String {
    let today = today_of(m);
    let count = m.get("count").and_then(Json::as_u64).unwrap_or(1) as usize;
    let slots = slot_list(m.get("slots"));
    let contacts = str_list(m.get("contacts"));
    let contact_slots = str_list(m.get("contact_slots"));
    let mut columns: Vec<Vec<Json>> = Vec::new();
    for (name, pv) in &slots {
        let col: Vec<Json> = if contact_slots.contains(name) && !contacts.is_empty() {
            (0..count).map(|_| json!(contacts.choose(rng).unwrap())).collect()
        } else if let Some(pool) = text_pool(name).filter(|p| p.len() >= count && pv.is_empty()) {
            // distinct names keep records distinguishable
            pool.choose_multiple(rng, count).map(|s| json!(s)).collect()
        } else if name == "contact_name" {
            let mut seen = Vec::new();
            while seen.len() < count {
                let p = person(rng);
                if !seen.contains(&p) {
                    seen.push(p);
                }
            }
            seen.into_iter().map(Json::from).collect()
        } else {
            (0..count).map(|_| fake_value(name, pv, today, rng)).collect()
        };
        columns.push(col);
    }
    let records: Vec<Json> = (0..count)
        .map(|i| {
            let mut rec = Map::new();
            for ((name, _), col) in slots.iter().zip(&columns) {
                rec.insert(name.clone(), col[i].clone());
            }
            Json::Object(rec)
        })
        .collect();
    json!({ "records": records }).to_string()
}

fn slot_values(m: &Json, rng: &mut ChaCha8Rng) -> String {
    let today = today_of(m);
    let mut values = Map::new();
    let mut potentials: std::collections::HashMap<(String, String), Vec<String>> = Default::default();
    for item in m.get("items").and_then(Json::as_array).into_iter().flatten() {
        let key = item["key"].as_str().unwrap_or_default().to_string();
        let mut obj = Map::new();
        for (name, pv) in slot_list(item.get("slots")) {
            obj.insert(name.clone(), fake_value(&name, &pv, today, rng));
            potentials.insert((key.clone(), name), pv);
        }
        values.insert(key, Json::Object(obj));
    }
    let mut alternatives = Map::new();
    for alt in m.get("alternatives").and_then(Json::as_array).into_iter().flatten() {
        let key = alt["key"].as_str().unwrap_or_default().to_string();
        let slot = alt["slot"].as_str().unwrap_or_default().to_string();
        let current = values.get(&key).and_then(|o| o.get(&slot)).cloned();
        let pv = potentials.get(&(key.clone(), slot.clone())).cloned().unwrap_or_default();
        let mut v = fake_value(&slot, &pv, today, rng);
        for _ in 0..50 {
            if Some(&v) != current.as_ref() {
                break;
            }
            v = fake_value(&slot, &pv, today, rng);
        }
        let entry = alternatives
            .entry(key)
            .or_insert_with(|| Json::Object(Map::new()));
        entry.as_object_mut().unwrap().insert(slot, v);
    }
    json!({ "values": values, "alternatives": alternatives }).to_string()
}

fn query(m: &Json, rng: &mut ChaCha8Rng) -> String {
    let today = today_of(m);
    let count = m.get("count").and_then(Json::as_u64).unwrap_or(5) as usize;
    let inputs = m.get("inputs").and_then(Json::as_object).cloned().unwrap_or_default();
    let results = slot_list(m.get("result_slots"));
    let mut columns = Vec::new();
    for (name, pv) in &results {
        let col: Vec<Json> = match text_pool(name).filter(|p| p.len() >= count && pv.is_empty()) {
            Some(pool) => pool.choose_multiple(rng, count).map(|s| json!(s)).collect(),
            None => (0..count).map(|_| fake_value(name, pv, today, rng)).collect(),
        };
        columns.push(col);
    }
    let records: Vec<Json> = (0..count)
        .map(|i| {
            let mut rec = inputs.clone();
            for ((name, _), col) in results.iter().zip(&columns) {
                rec.insert(name.clone(), col[i].clone());
            }
            Json::Object(rec)
        })
        .collect();
    json!({ "records": records }).to_string()
}

// ---- verbalization -------------------------------------------------------

/// Split `svc_name` into (service, name) against the known services.
fn split_prefix<'a>(head: &'a str, services: &[String]) -> (Option<String>, &'a str) {
    let mut best: Option<&String> = None;
    for s in services {
        if head.len() > s.len() + 1 && head.starts_with(s.as_str()) && head.as_bytes()[s.len()] == b'_' {
            if best.map_or(true, |b| s.len() > b.len()) {
                best = Some(s);
            }
        }
    }
    match best {
        Some(s) => (Some(s.clone()), &head[s.len() + 1..]),
        None => (None, head),
    }
}

fn entity(service: &str) -> String {
    match service {
        "alarms" => "alarm".into(),
        "calendar_events" => "calendar event".into(),
        "messages" => "message".into(),
        "reminders" => "reminder".into(),
        "contacts" => "contact".into(),
        other => words_of(other),
    }
}

fn intent_phrase(service: Option<&str>, intent: &str) -> String {
    let ent = service.map(entity).unwrap_or_else(|| "item".into());
    match intent {
        "create" if service == Some("alarms") => "set an alarm".into(),
        "create" => format!("create a new {ent}"),
        "modify" => format!("change my {ent}"),
        "delete" => format!("delete my {ent}"),
        "check" => format!("check my {ent}"),
        "send" => "send a message".into(),
        "get_movie_time" => "find showtimes".into(),
        "purchase_tickets" => "buy movie tickets".into(),
        "search_hotel" => "find a hotel".into(),
        "book_hotel" => "book a hotel room".into(),
        "search_restaurant" => "find a restaurant".into(),
        "reserve_table" => "reserve a table".into(),
        "get_weather" => "check the weather".into(),
        "operation_on_device" => "control a device".into(),
        "check_device_status" => "check a device".into(),
        "check_balance" => "check my balance".into(),
        "transfer_money" => "transfer money".into(),
        "pay_bill" => "pay a bill".into(),
        other => words_of(other),
    }
}

fn ordinal(i: i64) -> String {
    const WORDS: [&str; 10] = [
        "", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    ];
    match WORDS.get(i as usize) {
        Some(w) => w.to_string(),
        None => format!("number {}", i + 1),
    }
}

struct Verbalizer<'a> {
    services: &'a [String],
}

impl Verbalizer<'_> {
    fn default_service(&self) -> Option<&str> {
        (self.services.len() == 1).then(|| self.services[0].as_str())
    }

    fn scalar(&self, slot: &str, v: &Scalar) -> String {
        match v {
            Scalar::Bool(b) => format!("{} {}", words_of(slot), if *b { "yes" } else { "no" }),
            other => other.to_string(),
        }
    }

    fn value(&self, slot: &str, v: &Value) -> String {
        match v {
            Value::Action(a) => self.reference(a),
            other => self.scalar(slot, &other.as_scalar().unwrap()),
        }
    }

    fn slot_phrase(&self, slot: &str, v: &Value) -> String {
        let text = self.value(slot, v);
        if matches!(v, Value::Bool(_)) {
            return text;
        }
        match slot_kind(slot) {
            SlotKind::Date => format!("on {text}"),
            SlotKind::Time => format!("at {text}"),
            _ if slot == "location" => format!("in {text}"),
            _ => format!("{} {text}", words_of(slot)),
        }
    }

    fn args_phrase(&self, args: &[crate::mr::Arg]) -> String {
        let parts: Vec<String> = args
            .iter()
            .filter_map(|a| a.value.as_ref().map(|v| self.slot_phrase(&a.key, v)))
            .collect();
        parts.join(", ")
    }

    /// Noun phrase for a context getter, e.g. "my alarm Morning Workout".
    fn getter(&self, a: &Action) -> String {
        let service = a.head.trim_start_matches("get_");
        let ent = entity(service);
        if let (Some(o), Some(i)) = (a.arg(ORDERED_BY), a.arg(INDEX)) {
            let slot = o.value.as_ref().and_then(Value::as_scalar).map(|s| s.to_string()).unwrap_or_default();
            let idx = match i.value.as_ref().and_then(Value::as_scalar) {
                Some(Scalar::Int(n)) => n,
                _ => 0,
            };
            return match slot_kind(&slot) {
                SlotKind::Date | SlotKind::Time if idx == 0 => format!("my earliest {ent}"),
                SlotKind::Date | SlotKind::Time => format!("my {} earliest {ent}", ordinal(idx)),
                _ if idx == 0 => format!("my first {ent} sorted by {}", words_of(&slot)),
                _ => format!("my {} {ent} sorted by {}", ordinal(idx), words_of(&slot)),
            };
        }
        let filters = self.args_phrase(&a.args);
        if filters.is_empty() {
            format!("my {ent}")
        } else {
            format!("my {ent} with {filters}")
        }
    }

    /// Phrase for an action nested as a value (compositional inner).
    fn reference(&self, a: &Action) -> String {
        let field = match a.chain.last() {
            Some(Segment::Field(f)) => Some(f.clone()),
            _ => None,
        };
        let base = if a.head.starts_with("get_") {
            self.getter(a)
        } else {
            let (svc, intent) = split_prefix(&a.head, self.services);
            let what = intent_phrase(svc.as_deref(), intent);
            let args = self.args_phrase(&a.args);
            if args.is_empty() {
                format!("what I get when I {what}")
            } else {
                format!("what I get when I {what} for {args}")
            }
        };
        match field {
            Some(f) => format!("the {} of {base}", words_of(&f)),
            None => base,
        }
    }

    /// Clause describing an intent action: "buy movie tickets with ...".
    fn intent_clause(&self, a: &Action) -> String {
        if a.head.starts_with("get_") {
            let target = self.getter(a);
            let call = a.chain.iter().find_map(|s| match s {
                Segment::Call { name, args } if name != SELF_CORRECTION => Some((name, args)),
                _ => None,
            });
            let Some((name, args)) = call else {
                return format!("look at {target}");
            };
            let (_, intent) = split_prefix(name, self.services);
            let kwargs = self.args_phrase(args);
            let bare: Vec<String> = args.iter().filter(|x| x.value.is_none()).map(|x| words_of(&x.key)).collect();
            return match intent {
                i if i == "check" || i.ends_with("_check") => {
                    if bare.is_empty() {
                        format!("check {target}")
                    } else {
                        format!("check the {} of {target}", bare.join(" and "))
                    }
                }
                "modify" if !kwargs.is_empty() => format!("change {target} to {kwargs}"),
                other => format!("{} {target}", words_of(other)),
            };
        }
        let (svc, intent) = split_prefix(&a.head, self.services);
        let svc = svc.or_else(|| self.default_service().map(String::from));
        let what = intent_phrase(svc.as_deref(), intent);
        let args = self.args_phrase(&a.args);
        if args.is_empty() {
            what
        } else {
            format!("{what} {args}")
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn parse_all(m: &Json, key: &str) -> Vec<Action> {
    str_list(m.get(key)).iter().filter_map(|s| parse_action(s).ok()).collect()
}

fn user_sentence(v: &Verbalizer<'_>, a: &Action) -> String {
    let (_, act) = split_prefix(&a.head, v.services);
    match act {
        "hello" => return "Hi.".into(),
        "confirm" => return "Yes, that's correct.".into(),
        "inform_information" => {
            let parts: Vec<String> = a
                .args
                .iter()
                .filter_map(|x| x.value.as_ref().map(|val| v.slot_phrase(&x.key, val)))
                .collect();
            return format!("{}.", capitalize(&parts.join(", ")));
        }
        _ => {}
    }
    let mut sentence = if a.head.starts_with("get_")
        && a.chain.iter().any(|s| matches!(s, Segment::Call { name, .. } if name == "check" || name.ends_with("_check")))
    {
        format!("Could you {}?", v.intent_clause(a))
    } else {
        format!("I'd like to {}.", v.intent_clause(a))
    };
    if let Some(Segment::Call { name, args }) = a.chain.last() {
        if name == SELF_CORRECTION {
            for ov in args {
                if let Some(val) = &ov.value {
                    sentence.push_str(&format!(" Actually, make that {} instead.", v.value(&ov.key, val)));
                }
            }
        }
    }
    sentence
}

fn user_turn(m: &Json) -> String {
    let services = str_list(m.get("services"));
    let v = Verbalizer { services: &services };
    let actions = parse_all(m, "actions");
    let sentences: Vec<String> = actions.iter().map(|a| user_sentence(&v, a)).collect();
    let message = match sentences.len() {
        0 => "Okay.".to_string(),
        1 => sentences[0].clone(),
        _ => {
            let mut out = sentences[0].clone();
            for s in &sentences[1..] {
                out.push_str(" Also, ");
                let mut c = s.chars();
                if let Some(f) = c.next() {
                    out.push_str(&(f.to_lowercase().collect::<String>() + c.as_str()));
                }
            }
            out
        }
    };
    json!({ "actions": str_list(m.get("actions")), "message": message }).to_string()
}

struct Forms {
    low: String,
    mid: String,
    high: String,
}

fn literal_list(v: &Verbalizer<'_>, args: &[crate::mr::Arg]) -> Vec<String> {
    args.iter()
        .filter(|a| a.key != "count")
        .filter_map(|a| a.value.as_ref().map(|val| format!("the {} is {}", words_of(&a.key), v.value(&a.key, val))))
        .collect()
}

fn system_forms(v: &Verbalizer<'_>, a: &Action) -> Forms {
    let (_, act) = split_prefix(&a.head, v.services);
    let inner = a.args.first().and_then(|x| x.value.as_ref()).and_then(Value::as_action);
    match act {
        "request_information" => {
            let slots: Vec<String> = a.args.iter().map(|x| words_of(&x.key)).collect();
            let joined = slots.join(" and ");
            Forms {
                low: format!("{}?", capitalize(&joined)),
                mid: format!("What {joined} would you like for it?"),
                high: format!("Could you tell me the {joined} you would like for this request?"),
            }
        }
        "ask_confirm" => Forms {
            low: "Confirm?".into(),
            mid: "Do you want me to go ahead with that?".into(),
            high: match inner {
                Some(i) => format!("Just to confirm, you want to {}. Is that correct?", v.intent_clause(i)),
                None => "Just to confirm, should I go ahead with your request as described?".into(),
            },
        },
        "notify_done" => Forms {
            low: "Done.".into(),
            mid: "All right, I have taken care of that for you.".into(),
            high: match inner {
                Some(i) => format!("I have completed your request to {}.", v.intent_clause(i)),
                None => "I have completed your request exactly as you described it.".into(),
            },
        },
        "inform_result" => {
            let facts = literal_list(v, &a.args);
            let values: Vec<String> = a
                .args
                .iter()
                .filter_map(|x| x.value.as_ref().map(|val| v.value(&x.key, val)))
                .collect();
            Forms {
                low: "Found it.".into(),
                mid: format!("I found it, and it says {}.", values.join(", ")),
                high: format!("Here is what I found: {}.", facts.join(", and ")),
            }
        }
        "summary" => {
            let count = a
                .arg("count")
                .and_then(|x| x.value.as_ref())
                .map(|val| v.value("count", val))
                .unwrap_or_else(|| "several".into());
            let facts: Vec<String> = a
                .args
                .iter()
                .filter(|x| x.key != "count")
                .filter_map(|x| x.value.as_ref().map(|val| v.value(&x.key, val)))
                .collect();
            Forms {
                low: "Options found.".into(),
                mid: format!("I found {count} options that fit what you asked."),
                high: format!("I found {count} options for you: {}.", facts.join("; ")),
            }
        }
        other => Forms {
            low: "Okay.".into(),
            mid: "Okay, I am working on that for you now.".into(),
            high: format!("Okay, I am now handling the {} step of your request.", words_of(other)),
        },
    }
}

/// The phrase the mirroring variants reuse: the longest of the user's
/// values that appears verbatim in their utterance, else its last words.
fn mirror_phrase(last_user: &str, values: &[String]) -> String {
    let lower = last_user.to_lowercase();
    let hit = values
        .iter()
        .filter(|v| v.len() > 1 && lower.contains(&v.to_lowercase()))
        .max_by_key(|v| v.len());
    if let Some(v) = hit {
        let start = lower.find(&v.to_lowercase()).unwrap();
        return last_user[start..start + v.len()].to_string();
    }
    let words: Vec<&str> = last_user
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return "that".into();
    }
    words[words.len().saturating_sub(2)..].join(" ")
}

fn first_words(s: &str, n: usize) -> String {
    s.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn pad_above(text: String, floor: usize, filler: &str) -> String {
    let mut out = text;
    while word_count(&out) <= floor {
        out.push(' ');
        out.push_str(filler);
    }
    out
}

/// The six variants as `[low M, low noM, mid M, mid noM, high M, high noM]`.
fn six_variants(m: &Json) -> [String; 6] {
    let services = str_list(m.get("services"));
    let v = Verbalizer { services: &services };
    let actions = parse_all(m, "actions");
    let forms: Vec<Forms> = actions.iter().map(|a| system_forms(&v, a)).collect();
    let join = |f: fn(&Forms) -> &String| forms.iter().map(f).cloned().collect::<Vec<_>>().join(" ");
    let (low, mid, high) = (join(|f| &f.low), join(|f| &f.mid), join(|f| &f.high));
    let last_user = m.get("last_user").and_then(Json::as_str).unwrap_or("");
    let phrase = mirror_phrase(last_user, &str_list(m.get("last_user_values")));
    let low_m = format!("{low} {}", first_words(&phrase, 2));
    let mid_m = format!("About {phrase}: {mid}");
    let high_m = format!("About {phrase}: {high}");
    let mid = pad_above(mid, word_count(&low), "Anything else?");
    let mid_m = pad_above(mid_m, word_count(&low_m), "Anything else?");
    let high = pad_above(high, word_count(&mid), "Let me know if you need anything else.");
    let high_m = pad_above(high_m, word_count(&mid_m), "Let me know if you need anything else.");
    [low_m, low, mid_m, mid, high_m, high]
}

pub const STYLE_KEYS: [&str; 6] = [
    "verbosity_low mirroring",
    "verbosity_low no_mirroring",
    "verbosity_mid mirroring",
    "verbosity_mid no_mirroring",
    "verbosity_high mirroring",
    "verbosity_high no_mirroring",
];

fn system_turn(m: &Json) -> String {
    let variants = six_variants(m);
    let mut obj = Map::new();
    for (k, v) in STYLE_KEYS.iter().zip(variants) {
        obj.insert(k.to_string(), json!(v));
    }
    Json::Object(obj).to_string()
}

fn system_style(m: &Json) -> String {
    let variants = six_variants(m);
    let style = m.get("style").and_then(Json::as_str).unwrap_or(STYLE_KEYS[0]);
    let i = STYLE_KEYS.iter().position(|k| *k == style).unwrap_or(0);
    json!({ "response": variants[i] }).to_string()
}

fn evaluate(m: &Json, mode: EvaluatorMode) -> String {
    if mode == EvaluatorMode::AlwaysConsistent {
        return "Consistent. The utterances follow the actions.".into();
    }
    let today = today_of(m);
    for (n, turn) in m.get("turns").and_then(Json::as_array).into_iter().flatten().enumerate() {
        let utterance = turn.get("utterance").and_then(Json::as_str).unwrap_or("");
        for text in str_list(turn.get("actions")) {
            let Ok(a) = parse_action(&text) else { continue };
            for (slot, value) in a.literals() {
                if slot == ORDERED_BY || slot == INDEX || matches!(value, Scalar::Bool(_)) {
                    continue;
                }
                if !crate::qc::value_mentioned(utterance, slot, &value, Some(today)) {
                    return format!(
                        "Inconsistent. Turn {} does not mention the {} value \"{}\".",
                        n + 1,
                        words_of(slot),
                        value
                    );
                }
            }
        }
    }
    "Consistent. Every turn reflects its actions.".into()
}

/// Display form of an ISO date string, for tests and fixtures.
pub fn shown_date(iso_date: &str) -> String {
    NaiveDate::parse_from_str(iso_date, "%Y-%m-%d")
        .map(display_date)
        .unwrap_or_else(|_| iso_date.to_string())
}
