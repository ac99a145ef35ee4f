//! Persona synthesis: occupation, demographics, then a written
//! introduction.

use std::io::Read;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{extract_json_object, CompletionRequest, LlmClient, LlmError};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkStatus {
    #[serde(rename = "employed")]
    Employed,
    #[serde(rename = "unemployed/retired")]
    Unemployed,
    #[serde(rename = "student")]
    Student,
}

impl WorkStatus {
    pub const ALL: [WorkStatus; 3] = [WorkStatus::Employed, WorkStatus::Unemployed, WorkStatus::Student];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkStatus::Employed => "employed",
            WorkStatus::Unemployed => "unemployed/retired",
            WorkStatus::Student => "student",
        }
    }

    /// Words an introduction must use (any one) to reflect this status.
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            WorkStatus::Employed => &["work", "job", "employed", "career"],
            WorkStatus::Unemployed => &["retired", "unemployed", "not working", "between jobs"],
            WorkStatus::Student => &["student", "study", "studying"],
        }
    }
}

pub const RACES: [&str; 6] = ["white", "black", "api", "aian", "multiracial", "hispanic"];
pub const GENDERS: [&str; 2] = ["male", "female"];
pub const JOB_LEVELS: [&str; 4] = ["senior", "intermediate", "entry-level", "not-specified"];
pub const MBTI: [&str; 16] = [
    "INTJ", "INTP", "ENTJ", "ENTP", "INFJ", "INFP", "ENFJ", "ENFP", "ISTJ", "ISFJ", "ESTJ", "ESFJ",
    "ISTP", "ISFP", "ESTP", "ESFP",
];

const MALE_NAMES: &[&str] = &[
    "James", "Robert", "Michael", "David", "Daniel", "Carlos", "Wei", "Arjun", "Kwame", "Lucas",
    "Ethan", "Noah", "Omar", "Hiroshi", "Mateo", "Samuel",
];
const FEMALE_NAMES: &[&str] = &[
    "Mary", "Linda", "Sarah", "Emily", "Maria", "Sofia", "Mei", "Priya", "Amara", "Olivia",
    "Grace", "Hannah", "Layla", "Yuki", "Valentina", "Chloe",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub surname: String,
    pub first_name: String,
    pub gender: String,
    pub race: String,
    pub work_status: WorkStatus,
    pub occupation_code: String,
    pub occupation_title: String,
    pub location: String,
    pub affiliation: String,
    pub job_level: String,
    pub mbti: String,
    pub introduction: String,
    pub speaking_habit: String,
}

impl Persona {
    fn blank(id: String) -> Self {
        Persona {
            id,
            surname: String::new(),
            first_name: String::new(),
            gender: String::new(),
            race: String::new(),
            work_status: WorkStatus::Unemployed,
            occupation_code: String::new(),
            occupation_title: String::new(),
            location: String::new(),
            affiliation: String::new(),
            job_level: "not-specified".into(),
            mbti: String::new(),
            introduction: String::new(),
            speaking_habit: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Occupation {
    pub code: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SurnameRow {
    pub name: String,
    pub count: u64,
    pub white: f64,
    pub black: f64,
    pub api: f64,
    pub aian: f64,
    pub multiracial: f64,
    pub hispanic: f64,
}

impl SurnameRow {
    pub fn race_weights(&self) -> [f64; 6] {
        [self.white, self.black, self.api, self.aian, self.multiracial, self.hispanic]
    }
}

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("{0} table is empty")]
    EmptyTable(&'static str),
    #[error("{table} table, line {line}: {message}")]
    MalformedRow {
        table: &'static str,
        line: u64,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("introduction failed validation after {0} attempt(s)")]
    InvalidIntroduction(u32),
    #[error("backend reply for occupation details is malformed: {0}")]
    MalformedDetails(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone)]
pub struct PersonaTables {
    pub occupations: Vec<Occupation>,
    pub surnames: Vec<SurnameRow>,
}

fn read_csv<T: serde::de::DeserializeOwned, R: Read>(
    table: &'static str,
    source: R,
) -> Result<Vec<T>, PersonaError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: T = row.map_err(|e| PersonaError::MalformedRow {
            table,
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(PersonaError::EmptyTable(table));
    }
    Ok(out)
}

impl PersonaTables {
    /// Parse CSV tables with headers `code,title` and
    /// `name,count,white,black,api,aian,multiracial,hispanic`.
    pub fn from_readers<A: Read, B: Read>(occupations: A, surnames: B) -> Result<Self, PersonaError> {
        let occupations = read_csv("occupation", occupations)?;
        let surnames: Vec<SurnameRow> = read_csv("surname", surnames)?;
        for (i, row) in surnames.iter().enumerate() {
            let w = row.race_weights();
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(PersonaError::MalformedRow {
                    table: "surname",
                    line: i as u64 + 2,
                    message: format!("race weights of `{}` are not a distribution", row.name),
                });
            }
        }
        Ok(PersonaTables { occupations, surnames })
    }

    pub fn bundled() -> Self {
        Self::from_readers(
            include_str!("../data/occupations.csv").as_bytes(),
            include_str!("../data/surnames.csv").as_bytes(),
        )
        .expect("bundled tables are valid")
    }

    pub fn load(occupations: &Path, surnames: &Path) -> Result<Self, PersonaError> {
        let open = |p: &Path| {
            std::fs::File::open(p).map_err(|e| PersonaError::Io {
                path: p.display().to_string(),
                source: e,
            })
        };
        Self::from_readers(open(occupations)?, open(surnames)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaConfig {
    pub pool_size: usize,
    /// Weights for employed, unemployed/retired, student.
    pub work_status_weights: [f64; 3],
    pub occupation_table: Option<String>,
    pub surname_table: Option<String>,
    pub max_attempts: u32,
    pub max_resamples: u32,
}

impl Default for PersonaConfig {
    fn default() -> Self {
        PersonaConfig {
            pool_size: 500,
            work_status_weights: [0.6, 0.2, 0.2],
            occupation_table: None,
            surname_table: None,
            max_attempts: 3,
            max_resamples: 5,
        }
    }
}

/// Step 1: work status, then occupation details for employed people and
/// students.
pub fn sample_occupation<R: Rng>(
    rng: &mut R,
    tables: &PersonaTables,
    weights: &[f64; 3],
    llm: &LlmClient,
    id: &str,
) -> Result<Persona, PersonaError> {
    if tables.occupations.is_empty() {
        return Err(PersonaError::EmptyTable("occupation"));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| PersonaError::Precondition(e.to_string()))?;
    let mut p = Persona::blank(id.to_string());
    p.work_status = WorkStatus::ALL[dist.sample(rng)];
    if p.work_status == WorkStatus::Unemployed {
        return Ok(p);
    }
    let occ = tables.occupations.choose(rng).expect("nonempty");
    p.occupation_code = occ.code.clone();
    p.occupation_title = occ.title.clone();
    let prompt = format!(
        "A person is a {} in the field of \"{}\" (industry code {}). Invent where they live, \
         the organization they belong to, and their job level (one of: {}). \
         Return JSON: {{\"location\": ..., \"affiliation\": ..., \"job_level\": ...}}",
        p.work_status.as_str(),
        occ.title,
        occ.code,
        JOB_LEVELS.join(", ")
    );
    let req = CompletionRequest::user("persona.occupation", prompt).with_meta(json!({
        "task": "occupation",
        "id": id,
        "work_status": p.work_status.as_str(),
        "occupation_title": occ.title,
    }));
    let text = llm.complete(&req)?.text;
    let obj = extract_json_object(&text).ok_or_else(|| PersonaError::MalformedDetails(text.clone()))?;
    let field = |k: &str| {
        obj.get(k)
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| PersonaError::MalformedDetails(format!("missing `{k}`")))
    };
    p.location = field("location")?;
    p.affiliation = field("affiliation")?;
    let level = field("job_level")?.to_ascii_lowercase();
    p.job_level = if JOB_LEVELS.contains(&level.as_str()) {
        level
    } else {
        "not-specified".into()
    };
    Ok(p)
}

/// Step 2: surname and race drawn jointly, then gender, first name and MBTI.
pub fn sample_demographics<R: Rng>(
    rng: &mut R,
    tables: &PersonaTables,
    p: &mut Persona,
) -> Result<(), PersonaError> {
    if tables.surnames.is_empty() {
        return Err(PersonaError::EmptyTable("surname"));
    }
    let rows = WeightedIndex::new(tables.surnames.iter().map(|r| r.count.max(1)))
        .map_err(|e| PersonaError::Precondition(e.to_string()))?;
    let row = &tables.surnames[rows.sample(rng)];
    let races = WeightedIndex::new(row.race_weights()).map_err(|e| PersonaError::MalformedRow {
        table: "surname",
        line: 0,
        message: e.to_string(),
    })?;
    p.surname = row.name.clone();
    p.race = RACES[races.sample(rng)].to_string();
    p.gender = GENDERS.choose(rng).unwrap().to_string();
    let names = if p.gender == "male" { MALE_NAMES } else { FEMALE_NAMES };
    p.first_name = names.choose(rng).unwrap().to_string();
    p.mbti = MBTI.choose(rng).unwrap().to_string();
    Ok(())
}

/// Fixed mapping from personality type and seniority to a speech-style
/// instruction for the user simulator.
pub fn speaking_habit(mbti: &str, job_level: &str) -> String {
    let b = mbti.as_bytes();
    let energy = if b.first() == Some(&b'E') {
        "chatty and outgoing, sometimes adding a friendly remark"
    } else {
        "reserved and brief, saying only what is needed"
    };
    let judgement = if b.get(2) == Some(&b'T') {
        "direct, factual wording"
    } else {
        "warm, polite wording"
    };
    let structure = if b.get(3) == Some(&b'J') {
        "states requests in an organized way"
    } else {
        "phrases requests casually"
    };
    let register = match job_level {
        "senior" => "a confident, businesslike tone",
        "intermediate" => "a practical, matter-of-fact tone",
        "entry-level" => "a relaxed, informal tone",
        _ => "an everyday conversational tone",
    };
    format!("You are {energy}; you use {judgement}, {structure}, and speak with {register}.")
}

/// Accept an introduction only if it names the surname and reflects the
/// work status.
pub fn introduction_valid(p: &Persona, intro: &str) -> bool {
    let lower = intro.to_lowercase();
    !intro.trim().is_empty()
        && intro.contains(&p.surname)
        && p.work_status.keywords().iter().any(|k| lower.contains(k))
}

/// Step 3: a backend-written introduction, validated and retried.
pub fn write_introduction(mut p: Persona, llm: &LlmClient, max_attempts: u32) -> Result<Persona, PersonaError> {
    if p.surname.trim().is_empty() {
        return Err(PersonaError::Precondition("persona has no surname".into()));
    }
    p.speaking_habit = speaking_habit(&p.mbti, &p.job_level);
    let occupation = match p.work_status {
        WorkStatus::Unemployed => "is currently not working or retired".to_string(),
        WorkStatus::Student => format!("is a student of {} at {} in {}", p.occupation_title, p.affiliation, p.location),
        WorkStatus::Employed => format!(
            "works as a {} ({} level) at {} in {}",
            p.occupation_title, p.job_level, p.affiliation, p.location
        ),
    };
    let prompt = format!(
        "Write a first-person introduction (under 120 words) for {} {}, a {} person, {} \
         gender, MBTI {}, who {}. Add a few fictional personal details such as hobbies \
         and family. Mention the full name and their work status.",
        p.first_name, p.surname, p.race, p.gender, p.mbti, occupation
    );
    let meta = json!({
        "task": "introduction",
        "id": p.id,
        "first_name": p.first_name,
        "surname": p.surname,
        "work_status": p.work_status.as_str(),
        "occupation_title": p.occupation_title,
        "affiliation": p.affiliation,
        "location": p.location,
        "mbti": p.mbti,
    });
    for attempt in 1..=max_attempts.max(1) {
        let mut meta = meta.clone();
        meta["attempt"] = json!(attempt);
        let req = CompletionRequest::user("persona.introduction", prompt.clone()).with_meta(meta);
        let text = llm.complete(&req)?.text.trim().to_string();
        if introduction_valid(&p, &text) {
            p.introduction = text;
            return Ok(p);
        }
        log::debug!("introduction for {} rejected on attempt {attempt}", p.id);
    }
    Err(PersonaError::InvalidIntroduction(max_attempts.max(1)))
}

/// All three steps; an invalid introduction discards the draw and resamples.
pub fn generate_persona<R: Rng>(
    rng: &mut R,
    tables: &PersonaTables,
    cfg: &PersonaConfig,
    llm: &LlmClient,
    id: &str,
) -> Result<Persona, PersonaError> {
    let mut last = None;
    for _ in 0..=cfg.max_resamples {
        let mut p = sample_occupation(rng, tables, &cfg.work_status_weights, llm, id)?;
        sample_demographics(rng, tables, &mut p)?;
        match write_introduction(p, llm, cfg.max_attempts) {
            Ok(p) => return Ok(p),
            Err(e @ PersonaError::InvalidIntroduction(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// The persona pool; each persona draws from its own rng stream.
pub fn generate_pool(
    seed: u64,
    tables: &PersonaTables,
    cfg: &PersonaConfig,
    llm: &LlmClient,
) -> Result<Vec<Persona>, PersonaError> {
    (0..cfg.pool_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "persona", i as u64);
            generate_persona(&mut rng, tables, cfg, llm, &format!("p{i:04}"))
        })
        .collect()
}
