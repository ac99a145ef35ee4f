mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::prelude::*;
use regex::Regex;

use common::{Reply, Stub};
use todgen::context::{AppContext, Timestamp};
use todgen::dataset::{compute_stats, split, verbosity_means, Datapoint, SplitParams};
use todgen::llm::{
    BackendConfig, BackendKind, ChatBackend, CompletionRequest, FnBackend, LlmClient, MockBackend, RawCompletion,
    RetryPolicy, TransportError,
};
use todgen::mr::{parse_action_list, print_action_list, resolve_referral, Record, Resolved, Scalar, INDEX, ORDERED_BY};
use todgen::plot::{
    assign_default_styles, choose_referring_expression, inject_phenomena, merge_compositional, normalize_spelling,
    single_plot_from_initial, Labels, Plot, RefError, Style, StylePolicy, Turn, Verbosity,
};
use todgen::pipeline::{Pipeline, PipelineConfig};
use todgen::qc::{check_slot_coverage, check_unformatted, run_qc, surface_forms, Disposition};
use todgen::realizer::RealizedTurn;
use todgen::sampler::{DialogSpecimen, IntentRef, Kind, MatchedSlot};
use todgen::schema::SchemaSet;
use todgen::util::rng_for;

fn criterion(n: u32, name: &str, f: impl FnOnce()) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {n:>2} {verdict} {name} ({:.2}s)\n",
        start.elapsed().as_secs_f64()
    );
    // written past the test harness capture so the verdict is always visible
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(e) = result {
        resume_unwind(e);
    }
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const CORPUS_SEED: u64 = 7;

/// The 1,000-dialog mock corpus under the default configuration.
fn corpus() -> &'static Vec<Datapoint> {
    static CORPUS: OnceLock<Vec<Datapoint>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let cfg = PipelineConfig {
            seed: CORPUS_SEED,
            dialogs: 1000,
            out_dir: tmp("acceptance-corpus"),
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        for s in [p.run_personas(), p.run_contexts(), p.run_plots(), p.run_realize()] {
            let s = s.unwrap();
            assert!(s.ok(), "{} failed: {:?}", s.stage, s.errors);
        }
        let text = std::fs::read_to_string(p.path("dataset.jsonl")).unwrap();
        todgen::dataset::read_dataset(text.as_bytes()).unwrap()
    })
}

fn lines(p: &Plot) -> Vec<String> {
    p.lines()
}

fn plot_of(turns: &[&str], labels: Labels) -> Plot {
    Plot {
        turns: turns.iter().map(|l| Turn::parse_line(l).unwrap()).collect(),
        default_styles: Vec::new(),
        labels,
    }
}

fn rec(pairs: &[(&str, Scalar)]) -> Record {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn s(v: &str) -> Scalar {
    Scalar::Str(v.to_string())
}

// 1 ------------------------------------------------------------------------

#[test]
fn c01_mr_conformance() {
    criterion(1, "published action strings parse and print canonically", || {
        // (as published, canonical form)
        let cases: &[(&str, &str)] = &[
            (
                "[restaurant_booking_reserve_table(restaurant =\"French Brasserie\", time=\"8:00 PM\"), hotel_booking_search_hotel(location=\"Las Vegas\")]",
                "[restaurant_booking_reserve_table(restaurant=\"French Brasserie\", time=\"8:00 PM\"), hotel_booking_search_hotel(location=\"Las Vegas\")]",
            ),
            (
                "weather_get_weather(date=get_calendar_events( name=\"Art Class\").calendar_events_check(date).date)",
                "weather_get_weather(date=get_calendar_events(name=\"Art Class\").calendar_events_check(date).date)",
            ),
            (
                "get_movie_time(movie_name=\"Fast & Furious Presents: Hobbs & Shaw\", location=\"Miami\").self_correction( location=\"Houston\")",
                "get_movie_time(movie_name=\"Fast & Furious Presents: Hobbs & Shaw\", location=\"Miami\").self_correction(location=\"Houston\")",
            ),
            (
                "get_alarms(ordered_by=\"time\", index=0).check(time)",
                "get_alarms(ordered_by=\"time\", index=0).check(time)",
            ),
            (
                "[get_alarms(ordered_by=\"time\", index=0).alarms_delete(name), get_alarms(ordered_by=\"time\", index=1).alarms_check(name)]",
                "[get_alarms(ordered_by=\"time\", index=0).alarms_delete(name), get_alarms(ordered_by=\"time\", index=1).alarms_check(name)]",
            ),
            (
                "[alarms_ask_confirm(get_alarms(name=\"Morning Workout\").delete(name)), alarms_inform_result(name=\"Family Dinner\")]",
                "[alarms_ask_confirm(get_alarms(name=\"Morning Workout\").delete(name)), alarms_inform_result(name=\"Family Dinner\")]",
            ),
            ("alarms_confirm()", "alarms_confirm()"),
            (
                "alarms_notify_done(get_alarms(name=\"Morning Workout\").delete(name))",
                "alarms_notify_done(get_alarms(name=\"Morning Workout\").delete(name))",
            ),
            (
                "purchase_tickets(movie_name=\"Joker\", date=\"Tue 2026-12-29\", cinema_name=\"Regal Cinemas\", ticket_quantity=1, movie_format=\"3d\")",
                "purchase_tickets(movie_name=\"Joker\", date=\"Tue 2026-12-29\", cinema_name=\"Regal Cinemas\", ticket_quantity=1, movie_format=\"3d\")",
            ),
            ("request_infomation(showtime)", "request_information(showtime)"),
            ("inform_infomation(showtime=\"20:00\")", "inform_information(showtime=\"20:00\")"),
            (
                "ask_confirm(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
                "ask_confirm(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
            ),
            ("confirm()", "confirm()"),
            (
                "notify_done(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
                "notify_done(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
            ),
        ];
        for (raw, canonical) in cases {
            let text = normalize_spelling(raw);
            let once = print_action_list(&parse_action_list(&text).unwrap_or_else(|e| panic!("{raw}: {e}")));
            assert_eq!(&once, canonical);
            let twice = print_action_list(&parse_action_list(&once).unwrap());
            assert_eq!(twice, once);
        }
    });
}

// 2 ------------------------------------------------------------------------

#[test]
fn c02_movie_ticket_plot() {
    criterion(2, "movie ticket plot reconstructed from its specimen", || {
        let published = [
            "@User@: purchase_tickets(movie_name=\"Joker\", date=\"Tue 2026-12-29\", cinema_name=\"Regal Cinemas\", ticket_quantity=1, movie_format=\"3d\")",
            "@System@: request_infomation(showtime)",
            "@User@: inform_infomation(showtime=\"20:00\")",
            "@System@: ask_confirm(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
            "@User@: confirm()",
            "@System@: notify_done(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
        ];
        let expected: Vec<String> = published.iter().map(|l| normalize_spelling(l)).collect();
        let schemas = SchemaSet::bundled();
        let svc = schemas.service("movie").unwrap();
        let values = rec(&[
            ("movie_name", s("Joker")),
            ("date", s("Tue 2026-12-29")),
            ("cinema_name", s("Regal Cinemas")),
            ("ticket_quantity", Scalar::Int(1)),
            ("movie_format", s("3d")),
            ("showtime", s("20:00")),
        ]);
        let initial: Vec<String> = ["movie_name", "date", "cinema_name", "ticket_quantity", "movie_format"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        let plot = single_plot_from_initial(svc, svc.intent("purchase_tickets").unwrap(), &values, &initial, None, None)
            .unwrap();
        assert_eq!(lines(&plot), expected);
        assert_eq!(plot.turns.len(), 6);
        assert!(expected[1].contains("request_information(showtime)"));
    });
}

// 3 ------------------------------------------------------------------------

#[test]
fn c03_compositional_substitution() {
    criterion(3, "weather/calendar compositional action", || {
        let outer = plot_of(
            &[
                "@User@: get_weather(date=\"Fri 2025-04-18\")",
                "@System@: inform_result(condition=\"sunny\", temperature=\"21C\")",
            ],
            Labels::single("weather", "get_weather"),
        );
        let inner = plot_of(
            &[
                "@User@: get_calendar_events(name=\"Art Class\").check(date)",
                "@System@: inform_result(date=\"Fri 2025-04-18\")",
            ],
            Labels::single("calendar_events", "check"),
        );
        let matched = MatchedSlot {
            inner: "date".into(),
            outer: "date".into(),
        };
        let merged = merge_compositional(&outer, &inner, &matched).unwrap();
        assert_eq!(
            merged.lines()[0],
            "@User@: weather_get_weather(date=get_calendar_events(name=\"Art Class\").calendar_events_check(date).date)"
        );
        assert_eq!(merged.labels.kind, Kind::Compositional);
    });
}

// 4 ------------------------------------------------------------------------

fn random_context<R: Rng>(rng: &mut R, calendar: bool, now: Timestamp) -> AppContext {
    let n = rng.gen_range(1..=6);
    let times = ["07:00", "07:30", "09:15", "12:00", "18:30", "22:45"];
    let dates = ["Wed 2025-04-16", "Thu 2025-04-17", "Fri 2025-04-18"];
    let records = (0..n)
        .map(|i| {
            if calendar {
                rec(&[
                    ("name", s(&format!("Event {i}"))),
                    ("date", s(dates.choose(rng).unwrap())),
                    ("start_time", s(times.choose(rng).unwrap())),
                ])
            } else {
                rec(&[
                    ("time", s(times.choose(rng).unwrap())),
                    ("name", s(&format!("Alarm {i}"))),
                    ("if_repeat", Scalar::Bool(rng.gen())),
                ])
            }
        })
        .collect();
    AppContext::new(if calendar { "calendar_events" } else { "alarms" }, now, records)
}

#[test]
fn c04_referral_round_trip() {
    criterion(4, "complex referral resolves back to its record", || {
        let schemas = SchemaSet::bundled();
        let now: Timestamp = "2025-04-16T06:00".parse().unwrap();
        let mut rng = rng_for(4, "acceptance", 0);
        for case in 0..1000 {
            let calendar = case % 2 == 1;
            let ctx = random_context(&mut rng, calendar, now);
            let target = ctx.records.choose(&mut rng).unwrap().clone();
            let name = target["name"].as_str().unwrap().to_string();
            let (service, line) = if calendar {
                ("calendar_events", format!("@User@: get_calendar_events(name=\"{name}\").check(date)"))
            } else {
                ("alarms", format!("@User@: get_alarms(name=\"{name}\").check(time)"))
            };
            let plot = plot_of(&[&line], Labels::single(service, "check"));
            let mut spec = DialogSpecimen::new(format!("r{case}"), Kind::Single, vec![IntentRef::new(service, "check")], now);
            spec.phenomena.complex_referral = true;
            let out = inject_phenomena(plot, &spec, &mut rng, std::slice::from_ref(&ctx), &schemas).unwrap();
            let mut getter = out.turns[0].actions[0].clone();
            assert!(getter.arg(ORDERED_BY).is_some() && getter.arg(INDEX).is_some(), "{}", out.lines()[0]);
            getter.chain.clear();
            assert_eq!(resolve_referral(&getter, &ctx).unwrap(), Resolved::Record(target), "{}", out.lines()[0]);
        }
    });
}

// 5 ------------------------------------------------------------------------

/// Exhaustive search over slot subsets: smallest distinguishing subset,
/// ties broken by the lexicographically smallest index list.
fn oracle(target: &Record, records: &[Record], preference: &[String]) -> Result<Vec<String>, RefError> {
    if !records.iter().any(|r| r == target) {
        return Err(RefError::TargetMissing);
    }
    let pool: Vec<String> = if preference.is_empty() {
        target.keys().cloned().collect()
    } else {
        preference.iter().filter(|p| target.contains_key(*p)).cloned().collect()
    };
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..(1 << pool.len()) {
        let idx: Vec<usize> = (0..pool.len()).filter(|i| mask & (1 << i) != 0).collect();
        let hits = records
            .iter()
            .filter(|r| idx.iter().all(|&i| r.get(&pool[i]) == target.get(&pool[i])))
            .count();
        if hits != 1 {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => (idx.len(), &idx) < (b.len(), b),
        };
        if better {
            best = Some(idx);
        }
    }
    best.map(|b| b.into_iter().map(|i| pool[i].clone()).collect())
        .ok_or(RefError::Indistinguishable)
}

#[test]
fn c05_referring_expression_minimality() {
    criterion(5, "referring expressions agree with brute force", || {
        let slots = ["a", "b", "c", "d"];
        let mut rng = rng_for(5, "acceptance", 0);
        let mut outcomes = BTreeMap::new();
        for _ in 0..50_000 {
            let n = rng.gen_range(1..=4);
            let records: Vec<Record> = (0..n)
                .map(|_| {
                    let mut r = Record::new();
                    for sl in slots {
                        if rng.gen_bool(0.8) {
                            let v = if rng.gen() { s(["x", "y"].choose(&mut rng).unwrap()) } else { Scalar::Int(rng.gen_range(0..2)) };
                            r.insert(sl.to_string(), v);
                        }
                    }
                    r
                })
                .collect();
            let target = if rng.gen_bool(0.05) {
                rec(&[("a", s("z"))])
            } else {
                records.choose(&mut rng).unwrap().clone()
            };
            let preference: Vec<String> = if rng.gen_bool(0.3) {
                Vec::new()
            } else {
                let mut p: Vec<String> = slots.iter().filter(|_| rng.gen_bool(0.75)).map(|x| x.to_string()).collect();
                p.shuffle(&mut rng);
                p
            };
            let got = choose_referring_expression(&target, &records, &preference);
            let want = oracle(&target, &records, &preference);
            assert_eq!(got, want, "target {target:?} records {records:?} preference {preference:?}");
            let key = match &want {
                Ok(v) => format!("size {}", v.len()),
                Err(e) => format!("{e:?}"),
            };
            *outcomes.entry(key).or_insert(0) += 1;
        }
        assert!(outcomes.len() >= 4, "weak coverage: {outcomes:?}");
    });
}

// 6 ------------------------------------------------------------------------

struct StyleCase {
    name: &'static str,
    turns: &'static [&'static str],
    labels: (&'static str, &'static str),
    contexts: Vec<AppContext>,
    /// (verbosity, mirroring) per system turn.
    expected: &'static [(Verbosity, bool)],
}

fn reminder_context() -> AppContext {
    AppContext::new(
        "reminders",
        "2025-04-16T09:00".parse().unwrap(),
        vec![
            rec(&[("content", s("Pay rent")), ("date", s("Fri 2025-04-18")), ("time", s("09:00"))]),
            rec(&[("content", s("Call mom")), ("date", s("Fri 2025-04-18")), ("time", s("18:00"))]),
            rec(&[("content", s("Dentist")), ("date", s("Mon 2025-04-21")), ("time", s("10:30"))]),
        ],
    )
}

fn alarm_context() -> AppContext {
    AppContext::new(
        "alarms",
        "2025-04-16T06:00".parse().unwrap(),
        vec![
            rec(&[("time", s("07:00")), ("name", s("Morning Workout")), ("if_repeat", Scalar::Bool(true))]),
            rec(&[("time", s("18:30")), ("name", s("Family Dinner")), ("if_repeat", Scalar::Bool(true))]),
        ],
    )
}

fn style_cases() -> Vec<StyleCase> {
    use Verbosity::{High as H, Low as L, Mid as M};
    vec![
        StyleCase {
            name: "movie ticket purchase",
            turns: &[
                "@User@: purchase_tickets(movie_name=\"Joker\", date=\"Tue 2026-12-29\", cinema_name=\"Regal Cinemas\", ticket_quantity=1, movie_format=\"3d\")",
                "@System@: request_information(showtime)",
                "@User@: inform_information(showtime=\"20:00\")",
                "@System@: ask_confirm(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
                "@User@: confirm()",
                "@System@: notify_done(purchase_tickets(movie_name=\"Joker\", ticket_quantity=1, date=\"Tue 2026-12-29\", showtime=\"20:00\", movie_format=\"3d\", cinema_name=\"Regal Cinemas\"))",
            ],
            labels: ("movie", "purchase_tickets"),
            contexts: vec![],
            expected: &[(L, true), (H, true), (L, true)],
        },
        StyleCase {
            name: "earliest alarm deletion with referral",
            turns: &[
                "@User@: [get_alarms(ordered_by=\"time\", index=0).alarms_delete(name), get_alarms(ordered_by=\"time\", index=1).alarms_check(name)]",
                "@System@: [alarms_ask_confirm(get_alarms(name=\"Morning Workout\").delete(name)), alarms_inform_result(name=\"Family Dinner\")]",
                "@User@: alarms_confirm()",
                "@System@: alarms_notify_done(get_alarms(name=\"Morning Workout\").delete(name))",
            ],
            labels: ("alarms", "delete"),
            contexts: vec![alarm_context()],
            expected: &[(H, true), (L, true)],
        },
        StyleCase {
            name: "query result",
            turns: &["@User@: get_weather(date=\"Thu 2025-04-17\")", "@System@: inform_result(condition=\"sunny\")"],
            labels: ("weather", "get_weather"),
            contexts: vec![],
            expected: &[(M, true)],
        },
        StyleCase {
            name: "completion of an intent with results",
            turns: &["@User@: check_device_status(device=\"lamp\")", "@System@: notify_done(check_device_status(device=\"lamp\"))"],
            labels: ("smart_home", "check_device_status"),
            contexts: vec![],
            expected: &[(M, true)],
        },
        StyleCase {
            name: "completion without results",
            turns: &["@User@: create(time=\"07:00\")", "@System@: notify_done(create(time=\"07:00\"))"],
            labels: ("alarms", "create"),
            contexts: vec![],
            expected: &[(L, true)],
        },
        StyleCase {
            name: "confirmation of a reversible change",
            turns: &[
                "@User@: get_alarms(name=\"Morning Workout\").modify(time=\"07:30\")",
                "@System@: ask_confirm(get_alarms(name=\"Morning Workout\").modify(time=\"07:30\"))",
                "@User@: confirm()",
                "@System@: notify_done(get_alarms(name=\"Morning Workout\").modify(time=\"07:30\"))",
            ],
            labels: ("alarms", "modify"),
            contexts: vec![alarm_context()],
            expected: &[(L, true), (L, true)],
        },
        StyleCase {
            name: "confirmation of an irreversible deletion",
            turns: &[
                "@User@: get_alarms(name=\"Family Dinner\").delete(name)",
                "@System@: ask_confirm(get_alarms(name=\"Family Dinner\").delete(name))",
                "@User@: confirm()",
                "@System@: notify_done(get_alarms(name=\"Family Dinner\").delete(name))",
            ],
            labels: ("alarms", "delete"),
            contexts: vec![alarm_context()],
            expected: &[(H, true), (L, true)],
        },
        StyleCase {
            name: "summary",
            turns: &["@User@: search_hotel(location=\"Las Vegas\")", "@System@: summary(search_hotel(location=\"Las Vegas\"))"],
            labels: ("hotel_booking", "search_hotel"),
            contexts: vec![],
            expected: &[(H, true)],
        },
        StyleCase {
            name: "slot request",
            turns: &[
                "@User@: create(content=\"Pay rent\")",
                "@System@: request_information(date)",
                "@User@: inform_information(date=\"Fri 2025-04-18\")",
                "@System@: notify_done(create(content=\"Pay rent\", date=\"Fri 2025-04-18\"))",
            ],
            labels: ("reminders", "create"),
            contexts: vec![],
            expected: &[(L, true), (L, true)],
        },
        StyleCase {
            name: "mixed acts take the highest level",
            turns: &[
                "@User@: [search_restaurant(location=\"Miami\"), get_weather(location=\"Miami\")]",
                "@System@: [restaurant_booking_inform_result(restaurant=\"Golden Lotus\"), weather_request_information(date)]",
            ],
            labels: ("restaurant_booking", "search_restaurant"),
            contexts: vec![],
            expected: &[(M, true)],
        },
        StyleCase {
            name: "summary next to a completion",
            turns: &[
                "@User@: [hotel_booking_search_hotel(location=\"Paris\"), alarms_create(time=\"06:00\")]",
                "@System@: [hotel_booking_summary(search_hotel(location=\"Paris\")), alarms_notify_done(create(time=\"06:00\"))]",
            ],
            labels: ("hotel_booking", "search_hotel"),
            contexts: vec![],
            expected: &[(H, true)],
        },
        StyleCase {
            name: "self-correction raises verbosity",
            turns: &[
                "@User@: get_movie_time(movie_name=\"Up\", location=\"Miami\").self_correction(location=\"Houston\")",
                "@System@: inform_result(showtime=\"19:00\", cinema_name=\"AMC\")",
            ],
            labels: ("movie", "get_movie_time"),
            contexts: vec![],
            expected: &[(H, true)],
        },
        StyleCase {
            name: "phenomenon affects only the next response",
            turns: &[
                "@User@: get_reminders(ordered_by=\"date\", index=2).modify(time=\"11:00\")",
                "@System@: ask_confirm(get_reminders(content=\"Dentist\").modify(time=\"11:00\"))",
                "@User@: confirm()",
                "@System@: notify_done(get_reminders(content=\"Dentist\").modify(time=\"11:00\"))",
            ],
            labels: ("reminders", "modify"),
            contexts: vec![reminder_context()],
            expected: &[(H, true), (L, true)],
        },
        StyleCase {
            name: "emotional wording disables mirroring",
            turns: &[
                "@User@: send(recipient=\"Mia Kim\", content=\"I am really upset about today\")",
                "@System@: ask_confirm(send(recipient=\"Mia Kim\", content=\"I am really upset about today\"))",
            ],
            labels: ("messages", "send"),
            contexts: vec![],
            expected: &[(H, false)],
        },
        StyleCase {
            name: "profanity disables mirroring",
            turns: &[
                "@User@: create(content=\"fix the damn sink\", date=\"Fri 2025-04-18\")",
                "@System@: notify_done(create(content=\"fix the damn sink\", date=\"Fri 2025-04-18\"))",
            ],
            labels: ("reminders", "create"),
            contexts: vec![],
            expected: &[(L, false)],
        },
        StyleCase {
            name: "sensitive word inside a longer word is ignored",
            turns: &[
                "@User@: create(content=\"buy shellfish\", date=\"Fri 2025-04-18\")",
                "@System@: notify_done(create(content=\"buy shellfish\", date=\"Fri 2025-04-18\"))",
            ],
            labels: ("reminders", "create"),
            contexts: vec![],
            expected: &[(L, true)],
        },
        StyleCase {
            name: "ambiguous context reference disables mirroring",
            turns: &["@User@: get_reminders(date=\"Fri 2025-04-18\").check(time)", "@System@: inform_result(time=\"09:00\")"],
            labels: ("reminders", "check"),
            contexts: vec![reminder_context()],
            expected: &[(M, false)],
        },
        StyleCase {
            name: "unique context reference keeps mirroring",
            turns: &["@User@: get_reminders(date=\"Mon 2025-04-21\").check(time)", "@System@: inform_result(time=\"10:30\")"],
            labels: ("reminders", "check"),
            contexts: vec![reminder_context()],
            expected: &[(M, true)],
        },
        StyleCase {
            name: "mirroring returns after a neutral turn",
            turns: &[
                "@User@: send(recipient=\"Leo Park\", content=\"so sad you can't come\")",
                "@System@: ask_confirm(send(recipient=\"Leo Park\", content=\"so sad you can't come\"))",
                "@User@: confirm()",
                "@System@: notify_done(send(recipient=\"Leo Park\", content=\"so sad you can't come\"))",
            ],
            labels: ("messages", "send"),
            contexts: vec![],
            expected: &[(H, false), (L, true)],
        },
        StyleCase {
            name: "compound confirmation with a query result",
            turns: &[
                "@User@: [restaurant_booking_reserve_table(restaurant=\"Golden Lotus\", date=\"Wed 2025-04-16\", time=\"19:00\", party_size=2), banking_check_balance(account_type=\"savings\")]",
                "@System@: [restaurant_booking_ask_confirm(reserve_table(restaurant=\"Golden Lotus\", date=\"Wed 2025-04-16\", time=\"19:00\", party_size=2)), banking_inform_result(balance=\"$40\")]",
                "@User@: restaurant_booking_confirm()",
                "@System@: restaurant_booking_notify_done(reserve_table(restaurant=\"Golden Lotus\", date=\"Wed 2025-04-16\", time=\"19:00\", party_size=2))",
            ],
            labels: ("restaurant_booking", "reserve_table"),
            contexts: vec![],
            expected: &[(H, true), (L, true)],
        },
    ]
}

#[test]
fn c06_default_style_rules() {
    criterion(6, "default-style fixture suite", || {
        let schemas = SchemaSet::bundled();
        let policy = StylePolicy::from_schemas(&schemas);
        let cases = style_cases();
        assert_eq!(cases.len(), 20);
        for c in cases {
            let plot = plot_of(c.turns, Labels::single(c.labels.0, c.labels.1));
            let styled = assign_default_styles(plot, &policy, &c.contexts);
            let want: Vec<Style> = c.expected.iter().map(|(v, m)| Style::new(*v, *m)).collect();
            assert_eq!(styled.default_styles, want, "case `{}`", c.name);
        }
    });
}

// 7 ------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_todgen")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "todgen {args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn c07_end_to_end_determinism() {
    criterion(7, "run-all is byte-for-byte reproducible", || {
        let a = tmp("acceptance-run-a");
        let b = tmp("acceptance-run-b");
        let c = tmp("acceptance-run-c");
        for dir in [&a, &b] {
            run_cli(&["run-all", "--seed", "11", "--count", "200", "--backend", "mock", "--out", dir.to_str().unwrap()]);
        }
        for stage in ["personas", "contexts", "plots", "realize", "qc", "stats", "split"] {
            run_cli(&[stage, "--seed", "11", "--count", "200", "--out", c.to_str().unwrap()]);
        }
        let (fa, fb, fc) = (artifacts(&a), artifacts(&b), artifacts(&c));
        assert!(fa.contains_key("dataset.jsonl") && fa.contains_key("qc_report.jsonl") && fa.contains_key("stats.json"));
        let dataset = &fa["dataset.jsonl"];
        assert_eq!(dataset.iter().filter(|&&b| b == b'\n').count(), 200);
        assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
        for (name, bytes) in &fa {
            assert!(bytes == &fb[name], "{name} differs between runs");
            // summaries carry cumulative cost, which differs when stages run in separate processes
            if !name.ends_with(".summary.json") {
                assert!(bytes == &fc[name], "{name} differs between run-all and chained stages");
            }
        }
    });
}

// 8 ------------------------------------------------------------------------

#[test]
fn c08_distribution_targets() {
    criterion(8, "kind and phenomena shares near the published corpus", || {
        let report = compute_stats(corpus(), &SchemaSet::bundled());
        assert_eq!(report.dialogs, 1000);
        let kinds = [("single", 38.6), ("compound", 40.5), ("compositional", 20.9)];
        let phenomena = [("self_correction", 19.0), ("complex_referral", 15.1), ("both", 3.3), ("none", 62.6)];
        for (name, target) in kinds {
            let got = report.kinds.get(name).map_or(0.0, |s| s.percent);
            assert!((got - target).abs() <= 3.0, "{name}: {got:.1}% vs {target}%");
        }
        for (name, target) in phenomena {
            let got = report.phenomena.get(name).map_or(0.0, |s| s.percent);
            assert!((got - target).abs() <= 3.0, "{name}: {got:.1}% vs {target}%");
        }
        let v: Vec<String> = ["low", "mid", "high"]
            .iter()
            .map(|k| format!("{k} {:.1}%", report.default_verbosity.get(*k).map_or(0.0, |s| s.percent)))
            .collect();
        let _ = writeln!(std::io::stderr(), "default verbosity shares: {} (published high 61.7, mid 28.8, low 9.5)", v.join(", "));
    });
}

// 9 ------------------------------------------------------------------------

#[test]
fn c09_split_correctness() {
    criterion(9, "zero-shot split holds exactly the held-out service", || {
        let dps = corpus();
        let params = SplitParams {
            seed: CORPUS_SEED,
            ..SplitParams::default()
        };
        let m = split(dps, &params).unwrap();
        let by_id: BTreeMap<&str, &Datapoint> = dps.iter().map(|d| (d.id.as_str(), d)).collect();
        let banking = |id: &String| by_id[id.as_str()].labels.services.iter().any(|s| s == "banking");
        assert!(!m.zero_shot.is_empty());
        assert!(m.zero_shot.iter().all(banking));
        assert!(!m.train.iter().any(banking));
        assert!(!m.test.iter().any(banking));
        assert_eq!(m.train.len() + m.test.len() + m.zero_shot.len(), dps.len());
        let mut all: Vec<&String> = m.train.iter().chain(&m.test).chain(&m.zero_shot).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), dps.len());
        let want = 0.1 * dps.len() as f64;
        assert!((m.test.len() as f64 - want).abs() <= 1.0, "test {} of {}", m.test.len(), dps.len());
    });
}

// 10 -----------------------------------------------------------------------

fn literals(turn: &Turn) -> Vec<(String, Scalar)> {
    let mut out = Vec::new();
    for a in &turn.actions {
        for (slot, v) in a.literals() {
            if slot != ORDERED_BY && slot != INDEX && !matches!(v, Scalar::Bool(_)) {
                out.push((slot.to_string(), v));
            }
        }
    }
    out
}

fn hv_m() -> String {
    Style::new(Verbosity::High, true).key()
}

/// Remove every way of saying `value` from `text`.
fn scrub(text: &str, value: &Scalar, today: chrono::NaiveDate) -> String {
    let mut forms = surface_forms(value, Some(today));
    forms.sort_by_key(|f| std::cmp::Reverse(f.len()));
    let mut out = text.to_string();
    for f in forms.iter().filter(|f| !f.is_empty()) {
        let re = Regex::new(&format!("(?i){}", regex::escape(f))).unwrap();
        out = re.replace_all(&out, "that").into_owned();
    }
    if *value == Scalar::Int(1) {
        let re = Regex::new(r"(?i)\ban?\b").unwrap();
        out = re.replace_all(&out, "the").into_owned();
    }
    out
}

fn drop_value<R: Rng>(dp: &Datapoint, rng: &mut R) -> Option<Datapoint> {
    let candidates: Vec<(usize, String, Scalar)> = dp
        .plot
        .turns
        .iter()
        .enumerate()
        .flat_map(|(i, t)| literals(t).into_iter().map(move |(k, v)| (i, k, v)))
        .collect();
    let (turn, _, value) = candidates.choose(rng)?.clone();
    let mut out = dp.clone();
    let today = dp.now.date();
    match &mut out.dialog.turns[turn] {
        RealizedTurn::User(text) => *text = scrub(text, &value, today),
        RealizedTurn::System(r) => {
            let key = hv_m();
            let text = r.variants[&key].clone();
            r.variants.insert(key, scrub(&text, &value, today));
        }
    }
    Some(out)
}

fn leak_date<R: Rng>(dp: &Datapoint, rng: &mut R) -> Datapoint {
    let mut out = dp.clone();
    let iso = dp.now.date().format("%Y-%m-%d").to_string();
    let turn = rng.gen_range(0..out.dialog.turns.len());
    match &mut out.dialog.turns[turn] {
        RealizedTurn::User(text) => text.push_str(&format!(" That is {iso}.")),
        RealizedTurn::System(r) => {
            let keys: Vec<String> = r.variants.keys().cloned().collect();
            let key = keys.choose(rng).unwrap();
            r.variants.get_mut(key).unwrap().push_str(&format!(" Due {iso}."));
        }
    }
    out
}

#[test]
fn c10_qc_seeded_faults() {
    criterion(10, "deterministic QC catches seeded faults without false positives", || {
        let dps = corpus();
        let mut rng = rng_for(10, "acceptance", 0);
        let clean: Vec<&Datapoint> = dps.iter().take(200).collect();
        for dp in &clean {
            let r = run_qc(dp, None).unwrap();
            assert_eq!(r.disposition, Disposition::Keep, "{}: {:?}", dp.id, r.failures);
        }
        for dp in &clean {
            let bad = leak_date(dp, &mut rng);
            assert!(!check_unformatted(&bad).is_empty(), "{} leak missed", dp.id);
            assert_eq!(run_qc(&bad, None).unwrap().disposition, Disposition::Drop);
        }
        let mut dropped = 0;
        for dp in dps.iter().cycle().take(dps.len()) {
            if dropped == 200 {
                break;
            }
            let Some(bad) = drop_value(dp, &mut rng) else { continue };
            dropped += 1;
            assert!(!check_slot_coverage(&bad).is_empty(), "{} dropped value missed", dp.id);
            assert_eq!(run_qc(&bad, None).unwrap().disposition, Disposition::Drop);
        }
        assert_eq!(dropped, 200);
    });
}

// 11 -----------------------------------------------------------------------

#[test]
fn c11_verbosity_ordering() {
    criterion(11, "low < mid < high word counts per dialog", || {
        let means: Vec<[f64; 3]> = corpus().iter().filter_map(verbosity_means).collect();
        assert!(!means.is_empty());
        let ordered = means.iter().filter(|m| m[0] < m[1] && m[1] < m[2]).count();
        let share = ordered as f64 / means.len() as f64;
        let avg: Vec<f64> = (0..3).map(|i| means.iter().map(|m| m[i]).sum::<f64>() / means.len() as f64).collect();
        let _ = writeln!(
            std::io::stderr(),
            "mean words low/mid/high: {:.1}/{:.1}/{:.1} (published 2.5/9.0/17.6), ordered {:.1}%",
            avg[0],
            avg[1],
            avg[2],
            share * 100.0
        );
        assert!(share >= 0.99, "only {:.2}% ordered", share * 100.0);
    });
}

// 12 -----------------------------------------------------------------------

#[test]
fn c12_backend_robustness() {
    criterion(12, "retries over a faulty HTTP backend drop no turns", || {
        let dir = tmp("acceptance-http");
        let mut cfg = PipelineConfig {
            seed: 12,
            dialogs: 1,
            out_dir: dir.clone(),
            ..PipelineConfig::default()
        };
        cfg.persona.pool_size = 2;
        cfg.realizer.attempts = 2;
        let p = Pipeline::new(cfg.clone()).unwrap();
        for s in [p.run_personas(), p.run_contexts(), p.run_plots()] {
            assert!(s.unwrap().ok());
        }

        // reference realization, recording every completion in order
        let mock = MockBackend::new(cfg.seed);
        let recorded = Arc::new(Mutex::new(Vec::<String>::new()));
        let rec2 = recorded.clone();
        let recorder = LlmClient::new(
            Arc::new(FnBackend(move |req: &CompletionRequest| -> Result<RawCompletion, TransportError> {
                let r = mock.send(req)?;
                rec2.lock().unwrap().push(r.text.clone());
                Ok(r)
            })),
            RetryPolicy::default(),
        );
        let m = || LlmClient::mock(cfg.seed);
        let p = Pipeline::new(cfg.clone()).unwrap().with_clients(m(), recorder.clone(), recorder, m());
        assert!(p.run_realize().unwrap().ok());
        let reference = std::fs::read(dir.join("dataset.jsonl")).unwrap();
        let texts = recorded.lock().unwrap().clone();
        let n = texts.len();
        assert!(n >= 2);

        // 2x500 before the first turn; a malformed system reply before the second
        let mut plan = vec![Reply::Status(500), Reply::Status(500), Reply::Content(texts[0].clone())];
        plan.push(Reply::Content("I cannot produce JSON today".into()));
        plan.extend(texts[1..].iter().cloned().map(Reply::Content));
        let plan = Arc::new(plan);
        let script = plan.clone();
        let stub = Stub::serve(move |i, _| script.get(i).cloned().unwrap_or(Reply::Status(599)));

        std::env::set_var("TODGEN_STUB_KEY", "test-token");
        let http = BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some(stub.url.clone()),
            auth_env: Some("TODGEN_STUB_KEY".into()),
            timeout_secs: 5,
            retry: RetryPolicy {
                max_attempts: 3,
                backoff_ms: 1,
                backoff_factor: 1.0,
            },
            ..BackendConfig::default()
        }
        .build(cfg.seed)
        .unwrap();
        std::fs::remove_file(dir.join("dataset.jsonl")).unwrap();
        let p = Pipeline::new(cfg.clone()).unwrap().with_clients(m(), http.clone(), http, m());
        let summary = p.run_realize().unwrap();
        assert!(summary.ok(), "{:?}", summary.errors);
        assert_eq!(summary.produced, 1);
        assert_eq!(stub.hits(), plan.len());
        assert_eq!(stub.hits(), n + 3);
        let user = summary.cost["user_turn"];
        let system = summary.cost["system_turn"];
        assert_eq!(user.attempts, user.requests + 2);
        assert_eq!(system.attempts, system.requests);
        assert_eq!(user.requests + system.requests, n as u64 + 1);
        assert_eq!(user.failures + system.failures, 0);
        let got = std::fs::read(dir.join("dataset.jsonl")).unwrap();
        assert!(got == reference, "realization over HTTP differs from the reference");
        let dp = &todgen::dataset::read_dataset(got.as_slice()).unwrap()[0];
        assert_eq!(dp.dialog.turns.len(), dp.plot.turns.len());
    });
}
