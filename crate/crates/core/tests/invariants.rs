use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use todgen::dataset::{compute_stats, read_dataset, split, write_dataset, Datapoint, SplitParams};
use todgen::mr::{parse_action_list, print_action, print_action_list, Action, Arg, Scalar};
use todgen::pipeline::{Pipeline, PipelineConfig};
use todgen::schema::SchemaSet;

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z_]{0,10}[a-z]".prop_filter("no bare-arg heads", |s| !s.ends_with("request_information"))
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        "[A-Za-z0-9 &:,.'\"\\\\-]{0,16}".prop_map(Scalar::Str),
        (-1000i64..1000).prop_map(Scalar::Int),
        any::<bool>().prop_map(Scalar::Bool),
    ]
}

fn flat_action() -> impl Strategy<Value = Action> {
    (ident(), prop::collection::vec((ident(), scalar()), 0..4)).prop_map(|(head, args)| {
        Action::with_args(head, args.into_iter().map(|(k, v)| Arg::new(k, v)).collect())
    })
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        3 => flat_action(),
        // getter chain: get_x(...).op(slot)
        1 => (flat_action(), ident(), ident()).prop_map(|(g, op, slot)| g.call(op, vec![Arg::bare(slot)])),
        // nested action as a value, optionally with a field access
        1 => (ident(), ident(), flat_action(), ident(), any::<bool>()).prop_map(|(head, key, inner, field, with_field)| {
            let inner = if with_field { inner.field(field) } else { inner };
            Action::with_args(head, vec![Arg::new(key, inner)])
        }),
        1 => (ident(), flat_action()).prop_map(|(head, inner)| Action::with_args(head, vec![Arg::positional(inner)])),
    ]
}

proptest! {
    #[test]
    fn printed_actions_parse_back(actions in prop::collection::vec(action(), 1..4)) {
        let text = print_action_list(&actions);
        let parsed = parse_action_list(&text).unwrap();
        prop_assert_eq!(&parsed, &actions);
        prop_assert_eq!(print_action_list(&parsed), text);
    }

    #[test]
    fn whitespace_does_not_change_meaning(a in flat_action()) {
        let canonical = print_action(&a);
        let spaced = canonical.replace(", ", " ,  ").replace('(', " ( ").replace('=', " = ");
        // only rewrite outside string literals
        prop_assume!(!a.args.iter().any(|x| x.value.as_ref().and_then(|v| v.as_scalar()).is_some_and(|s| matches!(s, Scalar::Str(_)))));
        prop_assert_eq!(print_action_list(&parse_action_list(&spaced).unwrap()), canonical);
    }
}

fn small_corpus() -> &'static Vec<Datapoint> {
    static CORPUS: OnceLock<Vec<Datapoint>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("invariants-corpus");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = PipelineConfig {
            seed: 31,
            dialogs: 120,
            out_dir: dir,
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        for s in [p.run_personas(), p.run_contexts(), p.run_plots(), p.run_realize()] {
            assert!(s.unwrap().ok());
        }
        read_dataset(std::fs::read(p.path("dataset.jsonl")).unwrap().as_slice()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trips(picks in prop::collection::vec(0usize..120, 0..20)) {
        let dps: Vec<Datapoint> = picks.iter().map(|&i| small_corpus()[i].clone()).collect();
        let mut buf = Vec::new();
        write_dataset(&dps, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), dps);
    }

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), fraction in 0.0f64..=1.0) {
        let dps = small_corpus();
        let params = SplitParams { seed, test_fraction: fraction, ..SplitParams::default() };
        let m = split(dps, &params).unwrap();
        let sets: Vec<BTreeSet<&String>> = [&m.train, &m.test, &m.zero_shot].iter().map(|v| v.iter().collect()).collect();
        prop_assert_eq!(sets.iter().map(|s| s.len()).sum::<usize>(), dps.len());
        let all: BTreeSet<&String> = sets.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), dps.len());
        prop_assert_eq!(&split(dps, &params).unwrap(), &m);
    }

    #[test]
    fn stats_ignore_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let schemas = SchemaSet::bundled();
        let mut shuffled = small_corpus().clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = compute_stats(small_corpus(), &schemas);
        let mut b = compute_stats(&shuffled, &schemas);
        for (k, v) in &a.mean_words_per_verbosity {
            let w = b.mean_words_per_verbosity.get_mut(k).unwrap();
            prop_assert!((*v - *w).abs() < 1e-9);
            *w = *v;
        }
        prop_assert_eq!(a, b);
    }
}
