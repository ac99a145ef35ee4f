//! Datapoints on disk, corpus statistics and the train/test/zero-shot split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{AppContext, Timestamp};
use crate::plot::{derive_labels, Labels, Plot, Verbosity};
use crate::realizer::{DialogRecord, RealizedTurn};
use crate::sampler::{Kind, Phenomenon};
use crate::schema::SchemaSet;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub id: String,
    pub persona_id: String,
    pub now: Timestamp,
    pub contexts: Vec<AppContext>,
    pub plot: Plot,
    pub dialog: DialogRecord,
    pub labels: Labels,
}

impl Datapoint {
    /// Plot and dialog line up and the stored labels match the plot.
    pub fn validate(&self, schemas: &SchemaSet) -> Result<(), String> {
        if self.dialog.turns.len() != self.plot.turns.len() {
            return Err(format!(
                "{} utterances for {} turns",
                self.dialog.turns.len(),
                self.plot.turns.len()
            ));
        }
        self.dialog.check_alignment(&self.plot).map_err(|e| e.to_string())?;
        let derived = derive_labels(&self.plot, schemas).map_err(|e| e.to_string())?;
        if derived != self.labels {
            return Err(format!("stored labels {:?} differ from derived {:?}", self.labels, derived));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("held-out service `{0}` appears in no datapoint")]
    HeldOutAbsent(String),
    #[error("invalid split ratios: {0}")]
    Ratios(String),
}

/// One JSON object per line.
pub fn write_dataset<W: Write>(dps: &[Datapoint], mut sink: W) -> Result<(), DatasetError> {
    for dp in dps {
        serde_json::to_writer(&mut sink, dp).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Blank lines are skipped; anything else must parse.
pub fn read_dataset<R: BufRead>(source: R) -> Result<Vec<Datapoint>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Malformed { line: i + 1, source })?);
    }
    Ok(out)
}

/// Generic JSON-lines helpers for the other stage artifacts.
pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut sink: W) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut sink, it)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(source: R) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Malformed { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub held_out_service: String,
    /// Fraction of the whole corpus placed in the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            held_out_service: "banking".into(),
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub held_out_service: String,
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub zero_shot: Vec<String>,
}

/// Every datapoint touching the held-out service goes to the zero-shot
/// split; the rest is shuffled and `round(test_fraction * total)` of them
/// form the test split.
pub fn split(dps: &[Datapoint], params: &SplitParams) -> Result<SplitManifest, DatasetError> {
    if !(0.0..=1.0).contains(&params.test_fraction) {
        return Err(DatasetError::Ratios(format!("test fraction {}", params.test_fraction)));
    }
    let held = &params.held_out_service;
    let (zero, rest): (Vec<&Datapoint>, Vec<&Datapoint>) =
        dps.iter().partition(|d| d.labels.services.iter().any(|s| s == held));
    if zero.is_empty() {
        return Err(DatasetError::HeldOutAbsent(held.clone()));
    }
    let mut rest: Vec<String> = rest.into_iter().map(|d| d.id.clone()).collect();
    rest.sort();
    rest.shuffle(&mut rng_for(params.seed, "split", 0));
    let n_test = ((params.test_fraction * dps.len() as f64).round() as usize).min(rest.len());
    let train = rest.split_off(n_test);
    Ok(SplitManifest {
        held_out_service: held.clone(),
        seed: params.seed,
        test_fraction: params.test_fraction,
        train,
        test: rest,
        zero_shot: zero.into_iter().map(|d| d.id.clone()).collect(),
    })
}

/// Whitespace tokens after stripping punctuation.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .count()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dialogs: usize,
    pub turns: usize,
    /// Turns per dialog.
    pub dialog_lengths: BTreeMap<usize, usize>,
    /// Words per utterance; system turns counted in their default style.
    pub utterance_words: BTreeMap<usize, usize>,
    /// Each service of a multi-intent dialog counted separately.
    pub services: BTreeMap<String, Share>,
    /// Dialog-act heads with the service prefix removed.
    pub action_heads: BTreeMap<String, Share>,
    /// Heads above 3% of all actions; the rest pooled under `other`.
    pub action_heads_major: BTreeMap<String, Share>,
    pub kinds: BTreeMap<String, Share>,
    /// Exclusive categories: self_correction, complex_referral, both, none.
    pub phenomena: BTreeMap<String, Share>,
    pub default_verbosity: BTreeMap<String, Share>,
    pub mean_words_per_verbosity: BTreeMap<String, f64>,
}

#[derive(Default)]
struct Acc {
    dialogs: usize,
    turns: usize,
    lengths: BTreeMap<usize, usize>,
    words: BTreeMap<usize, usize>,
    services: BTreeMap<String, usize>,
    heads: BTreeMap<String, usize>,
    kinds: BTreeMap<String, usize>,
    phenomena: BTreeMap<String, usize>,
    verbosity: BTreeMap<String, usize>,
    verb_words: BTreeMap<String, (usize, usize)>,
}

fn bump<K: Ord>(m: &mut BTreeMap<K, usize>, k: K, n: usize) {
    *m.entry(k).or_insert(0) += n;
}

impl Acc {
    fn add(mut self, dp: &Datapoint, service_names: &[String]) -> Self {
        self.dialogs += 1;
        self.turns += dp.plot.turns.len();
        bump(&mut self.lengths, dp.plot.turns.len(), 1);
        for s in &dp.labels.services {
            bump(&mut self.services, s.clone(), 1);
        }
        bump(&mut self.kinds, dp.labels.kind.as_str().to_string(), 1);
        let sc = dp.labels.phenomena.contains(&Phenomenon::SelfCorrection);
        let cr = dp.labels.phenomena.contains(&Phenomenon::ComplexReferral);
        let cat = match (sc, cr) {
            (true, true) => "both",
            (true, false) => "self_correction",
            (false, true) => "complex_referral",
            (false, false) => "none",
        };
        bump(&mut self.phenomena, cat.to_string(), 1);
        let names: Vec<&str> = service_names.iter().map(String::as_str).collect();
        for t in &dp.plot.turns {
            for a in &t.actions {
                let head = crate::plot::strip_service(&a.head, &names);
                bump(&mut self.heads, head.to_string(), 1);
            }
        }
        for r in &dp.dialog.turns {
            bump(&mut self.words, token_count(r.text()), 1);
            if let RealizedTurn::System(s) = r {
                bump(&mut self.verbosity, s.default_key.verbosity.as_str().to_string(), 1);
                for v in Verbosity::ALL {
                    for m in [true, false] {
                        let n = token_count(s.get(crate::plot::Style::new(v, m)));
                        let e = self.verb_words.entry(v.as_str().to_string()).or_insert((0, 0));
                        e.0 += n;
                        e.1 += 1;
                    }
                }
            }
        }
        self
    }

    fn merge(mut self, o: Acc) -> Acc {
        self.dialogs += o.dialogs;
        self.turns += o.turns;
        for (k, v) in o.lengths {
            bump(&mut self.lengths, k, v);
        }
        for (k, v) in o.words {
            bump(&mut self.words, k, v);
        }
        for (dst, src) in [
            (&mut self.services, o.services),
            (&mut self.heads, o.heads),
            (&mut self.kinds, o.kinds),
            (&mut self.phenomena, o.phenomena),
            (&mut self.verbosity, o.verbosity),
        ] {
            for (k, v) in src {
                bump(dst, k, v);
            }
        }
        for (k, (a, b)) in o.verb_words {
            let e = self.verb_words.entry(k).or_insert((0, 0));
            e.0 += a;
            e.1 += b;
        }
        self
    }
}

fn shares(m: &BTreeMap<String, usize>, total: usize) -> BTreeMap<String, Share> {
    m.iter()
        .map(|(k, &count)| {
            let percent = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
            (k.clone(), Share { count, percent })
        })
        .collect()
}

pub fn compute_stats(dps: &[Datapoint], schemas: &SchemaSet) -> StatsReport {
    let names: Vec<String> = schemas.services.iter().map(|s| s.service_name.clone()).collect();
    let acc = dps
        .par_iter()
        .fold(Acc::default, |acc, dp| acc.add(dp, &names))
        .reduce(Acc::default, Acc::merge);
    let n_actions: usize = acc.heads.values().sum();
    let n_services: usize = acc.services.values().sum();
    let n_system: usize = acc.verbosity.values().sum();
    let heads = shares(&acc.heads, n_actions);
    let mut major = BTreeMap::new();
    let mut other = 0;
    for (k, s) in &heads {
        if s.percent > 3.0 {
            major.insert(k.clone(), s.clone());
        } else {
            other += s.count;
        }
    }
    if other > 0 {
        major.insert("other".into(), shares(&BTreeMap::from([("other".to_string(), other)]), n_actions)["other"].clone());
    }
    let mut kinds = acc.kinds.clone();
    for k in Kind::ALL {
        kinds.entry(k.as_str().to_string()).or_insert(0);
    }
    let mut phen = acc.phenomena.clone();
    for k in ["self_correction", "complex_referral", "both", "none"] {
        phen.entry(k.to_string()).or_insert(0);
    }
    StatsReport {
        dialogs: acc.dialogs,
        turns: acc.turns,
        dialog_lengths: acc.lengths,
        utterance_words: acc.words,
        services: shares(&acc.services, n_services),
        action_heads: heads,
        action_heads_major: major,
        kinds: shares(&kinds, acc.dialogs),
        phenomena: shares(&phen, acc.dialogs),
        default_verbosity: shares(&acc.verbosity, n_system),
        mean_words_per_verbosity: acc
            .verb_words
            .iter()
            .map(|(k, (w, n))| (k.clone(), if *n == 0 { 0.0 } else { *w as f64 / *n as f64 }))
            .collect(),
    }
}

/// Per-dialog mean word counts of the low, mid and high variants.
pub fn verbosity_means(dp: &Datapoint) -> Option<[f64; 3]> {
    let mut sums = [0usize; 3];
    let mut n = 0usize;
    for r in &dp.dialog.turns {
        if let RealizedTurn::System(s) = r {
            n += 1;
            for (i, v) in Verbosity::ALL.iter().enumerate() {
                for m in [true, false] {
                    sums[i] += crate::util::word_count(s.get(crate::plot::Style::new(*v, m)));
                }
            }
        }
    }
    (n > 0).then(|| sums.map(|s| s as f64 / (2 * n) as f64))
}

/// CSV tables for the four distributions: dialog lengths, utterance
/// lengths, services and action heads.
pub fn stats_csv(report: &StatsReport) -> BTreeMap<&'static str, String> {
    fn table<K: ToString>(header: [&str; 2], rows: impl Iterator<Item = (K, String)>) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k.to_string(), v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
    let mut out = BTreeMap::new();
    out.insert(
        "dialog_lengths.csv",
        table(["turns", "dialogs"], report.dialog_lengths.iter().map(|(k, v)| (*k, v.to_string()))),
    );
    out.insert(
        "utterance_words.csv",
        table(["words", "utterances"], report.utterance_words.iter().map(|(k, v)| (*k, v.to_string()))),
    );
    out.insert(
        "services.csv",
        table(["service", "percent"], report.services.iter().map(|(k, v)| (k, format!("{:.2}", v.percent)))),
    );
    out.insert(
        "action_heads.csv",
        table(["action", "percent"], report.action_heads_major.iter().map(|(k, v)| (k, format!("{:.2}", v.percent)))),
    );
    out
}

/// Ids listed one per line; `#` starts a comment.
pub fn read_exclusions<R: BufRead>(source: R) -> std::io::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in source.lines() {
        let line = line?;
        let id = line.split('#').next().unwrap_or("").trim();
        if !id.is_empty() {
            out.insert(id.to_string());
        }
    }
    Ok(out)
}

