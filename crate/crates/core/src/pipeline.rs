//! File-checkpointed generation stages.
//!
//! Every stage reads its predecessor's artifact from the output directory and
//! writes its own. Per-item failures are collected in a stage summary rather
//! than aborting the stage; anything that prevents the stage from running at
//! all is a [`PipelineError`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{generate_contexts, sample_current_time, AppContext, ContextConfig, ContextSet, Timestamp};
use crate::dataset::{
    compute_stats, read_exclusions, read_jsonl, split, stats_csv, write_jsonl, Datapoint, DatasetError, SplitManifest,
    SplitParams, StatsReport,
};
use crate::llm::{Accounting, AuditLog, BackendConfig, LlmClient, LlmError, Limiter, StageCost};
use crate::persona::{generate_persona, Persona, PersonaConfig, PersonaTables};
use crate::plot::{build_plot, Plot, PlotConfig};
use crate::qc::{run_qc, Disposition, Evaluator, QcReport};
use crate::realizer::{Realizer, RealizerConfig, Scene};
use crate::sampler::{generate_slot_values, sample_specimen, DialogSpecimen, SamplerConfig};
use crate::schema::SchemaSet;
use crate::template::TemplateSet;
use crate::util::rng_for;

pub const PERSONAS_FILE: &str = "personas.jsonl";
pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const PLOTS_FILE: &str = "plots.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const QC_FILE: &str = "qc_report.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {}: run the `{stage}` stage first", path.display())]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingInput { .. } => "missing_input",
            PipelineError::Io { .. } => "io",
            PipelineError::Data { .. } => "data",
            PipelineError::Backend(_) => "backend",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    /// Personas, contexts, slot values and simulated queries.
    pub generator: BackendConfig,
    pub user: BackendConfig,
    pub system: BackendConfig,
    pub evaluator: BackendConfig,
}

impl Default for Backends {
    fn default() -> Self {
        Backends {
            generator: BackendConfig::default(),
            user: BackendConfig::default(),
            system: BackendConfig::default(),
            evaluator: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcSettings {
    /// Consult the evaluator model after the deterministic checks.
    pub evaluate: bool,
    pub attempts: u32,
    /// Ids removed after manual review of flagged datapoints.
    pub exclusions: Option<PathBuf>,
}

impl Default for QcSettings {
    fn default() -> Self {
        QcSettings {
            evaluate: true,
            attempts: 3,
            exclusions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// `None` uses the bundled schemas.
    pub schema_manifest: Option<PathBuf>,
    /// Restrict generation to these services; empty means all.
    pub services: Vec<String>,
    pub dialogs: usize,
    pub out_dir: PathBuf,
    /// Directory overriding any of the bundled prompt templates.
    pub templates_dir: Option<PathBuf>,
    /// Maximum backend requests in flight.
    pub concurrency: usize,
    pub no_context_prob: f64,
    /// Attempts per dialog plot before the dialog is reported as failed.
    pub plot_attempts: u32,
    /// Append every backend exchange to `audit.jsonl` in the output directory.
    pub audit: bool,
    pub persona: PersonaConfig,
    pub context: ContextConfig,
    pub sampler: SamplerConfig,
    pub plot: PlotConfig,
    pub realizer: RealizerConfig,
    pub backends: Backends,
    pub qc: QcSettings,
    pub split: SplitParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            schema_manifest: None,
            services: Vec::new(),
            dialogs: 100,
            out_dir: PathBuf::from("out"),
            templates_dir: None,
            concurrency: 8,
            no_context_prob: 0.33,
            plot_attempts: 3,
            audit: false,
            persona: PersonaConfig::default(),
            context: ContextConfig::default(),
            sampler: SamplerConfig::default(),
            plot: PlotConfig::default(),
            realizer: RealizerConfig::default(),
            backends: Backends::default(),
            qc: QcSettings::default(),
            split: SplitParams::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parse TOML text; relative paths stay relative to the working directory.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parse a TOML config file; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.schema_manifest, &mut cfg.templates_dir, &mut cfg.qc.exclusions]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut cfg.out_dir);
        for t in [&mut cfg.persona.occupation_table, &mut cfg.persona.surname_table]
            .into_iter()
            .flatten()
        {
            if Path::new(t.as_str()).is_relative() {
                *t = base.join(&*t).display().to_string();
            }
        }
        Ok(cfg)
    }

    /// Ratios in range and every referenced path present.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.no_context_prob) {
            return Err(PipelineError::Config("no_context_prob must be in [0, 1]".into()));
        }
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        if self.persona.pool_size == 0 {
            return Err(PipelineError::Config("persona.pool_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split.test_fraction) {
            return Err(PipelineError::Config("split.test_fraction must be in [0, 1]".into()));
        }
        self.sampler_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for b in [&self.backends.generator, &self.backends.user, &self.backends.system, &self.backends.evaluator] {
            b.validate()?;
        }
        let mut paths: Vec<&Path> = Vec::new();
        paths.extend(self.schema_manifest.as_deref());
        paths.extend(self.templates_dir.as_deref());
        paths.extend(self.qc.exclusions.as_deref());
        paths.extend(self.persona.occupation_table.as_deref().map(Path::new));
        paths.extend(self.persona.surname_table.as_deref().map(Path::new));
        for p in paths {
            if !p.exists() {
                return Err(PipelineError::Config(format!("path does not exist: {}", p.display())));
            }
        }
        if self.persona.occupation_table.is_some() != self.persona.surname_table.is_some() {
            return Err(PipelineError::Config(
                "persona.occupation_table and persona.surname_table must be given together".into(),
            ));
        }
        Ok(())
    }

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            no_context_prob: self.no_context_prob,
            ..self.sampler.clone()
        }
    }
}

/// One failed item of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub produced: usize,
    pub errors: Vec<ItemError>,
    pub cost: BTreeMap<String, StageCost>,
}

impl StageSummary {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// The plot of one dialog with everything needed to realize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub id: String,
    pub persona_id: String,
    pub now: Timestamp,
    pub contexts: Vec<AppContext>,
    pub specimen: DialogSpecimen,
    pub plot: Plot,
}

struct Clients {
    generator: LlmClient,
    user: LlmClient,
    system: LlmClient,
    evaluator: LlmClient,
    accounting: Arc<Accounting>,
}

/// Loaded configuration, schemas, templates and backend clients.
pub struct Pipeline {
    cfg: PipelineConfig,
    schemas: SchemaSet,
    templates: TemplateSet,
    tables: PersonaTables,
    clients: Clients,
}

fn read_items<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingInput {
                stage,
                path: path.to_path_buf(),
            }
        } else {
            PipelineError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    read_jsonl(BufReader::new(file)).map_err(|source| PipelineError::Data {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_items<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_jsonl(items, BufWriter::new(file)).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Split per-item results into values and errors, keeping input order.
fn partition<T>(results: Vec<(String, Result<T, String>)>) -> (Vec<T>, Vec<ItemError>) {
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(message) => errors.push(ItemError { id, message }),
        }
    }
    (ok, errors)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let all = match &cfg.schema_manifest {
            Some(p) => SchemaSet::load_manifest(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => SchemaSet::bundled(),
        };
        let schemas = if cfg.services.is_empty() {
            all
        } else {
            all.subset(&cfg.services).map_err(|e| PipelineError::Config(e.to_string()))?
        };
        let templates = match &cfg.templates_dir {
            Some(d) => TemplateSet::load_dir(d).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => TemplateSet::bundled(),
        };
        let tables = match (&cfg.persona.occupation_table, &cfg.persona.surname_table) {
            (Some(o), Some(s)) => {
                PersonaTables::load(Path::new(o), Path::new(s)).map_err(|e| PipelineError::Config(e.to_string()))?
            }
            _ => PersonaTables::bundled(),
        };
        std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
        let limiter = Arc::new(Limiter::new(cfg.concurrency));
        let accounting = Arc::new(Accounting::default());
        let audit = if cfg.audit {
            let path = cfg.out_dir.join("audit.jsonl");
            Some(Arc::new(AuditLog::create(&path).map_err(io_err(&path))?))
        } else {
            None
        };
        let build = |b: &BackendConfig| -> Result<LlmClient, PipelineError> {
            let mut c = b
                .build(cfg.seed)?
                .with_limiter(limiter.clone())
                .with_accounting(accounting.clone());
            if let Some(a) = &audit {
                c = c.with_audit(a.clone());
            }
            Ok(c)
        };
        let clients = Clients {
            generator: build(&cfg.backends.generator)?,
            user: build(&cfg.backends.user)?,
            system: build(&cfg.backends.system)?,
            evaluator: build(&cfg.backends.evaluator)?,
            accounting,
        };
        Ok(Pipeline {
            cfg,
            schemas,
            templates,
            tables,
            clients,
        })
    }

    /// Replace a backend client, e.g. with a scripted test double.
    pub fn with_clients(mut self, generator: LlmClient, user: LlmClient, system: LlmClient, evaluator: LlmClient) -> Self {
        let acc = self.clients.accounting.clone();
        self.clients = Clients {
            generator: generator.with_accounting(acc.clone()),
            user: user.with_accounting(acc.clone()),
            system: system.with_accounting(acc.clone()),
            evaluator: evaluator.with_accounting(acc.clone()),
            accounting: acc,
        };
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn schemas(&self) -> &SchemaSet {
        &self.schemas
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.cfg.out_dir.join(file)
    }

    fn summary(&self, stage: &str, produced: usize, errors: Vec<ItemError>) -> Result<StageSummary, PipelineError> {
        let s = StageSummary {
            stage: stage.to_string(),
            produced,
            errors,
            cost: self.clients.accounting.snapshot(),
        };
        write_json(&self.path(&format!("{stage}.summary.json")), &s)?;
        for e in &s.errors {
            log::warn!("{stage}: {}: {}", e.id, e.message);
        }
        Ok(s)
    }

    pub fn run_personas(&self) -> Result<StageSummary, PipelineError> {
        let results: Vec<_> = (0..self.cfg.persona.pool_size)
            .into_par_iter()
            .map(|i| {
                let id = format!("p{i:04}");
                let mut rng = rng_for(self.cfg.seed, "persona", i as u64);
                let r = generate_persona(&mut rng, &self.tables, &self.cfg.persona, &self.clients.generator, &id)
                    .map_err(|e| e.to_string());
                (id, r)
            })
            .collect();
        let (personas, errors) = partition(results);
        write_items(&self.path(PERSONAS_FILE), &personas)?;
        self.summary("personas", personas.len(), errors)
    }

    pub fn run_contexts(&self) -> Result<StageSummary, PipelineError> {
        let personas: Vec<Persona> = read_items(&self.path(PERSONAS_FILE), "personas")?;
        let results: Vec<_> = personas
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = rng_for(self.cfg.seed, "context", i as u64);
                let now = sample_current_time(&mut rng, &self.cfg.context.window);
                let r = generate_contexts(p, &self.schemas, now, &self.clients.generator, &mut rng, &self.cfg.context)
                    .map(|c| ContextSet {
                        persona_id: p.id.clone(),
                        now,
                        contexts: c.into_values().collect(),
                    })
                    .map_err(|e| e.to_string());
                (p.id.clone(), r)
            })
            .collect();
        let (sets, errors) = partition(results);
        write_items(&self.path(CONTEXTS_FILE), &sets)?;
        self.summary("contexts", sets.len(), errors)
    }

    fn plot_one(&self, i: usize, personas: &BTreeMap<&str, &Persona>, sets: &[ContextSet]) -> Result<PlotRecord, String> {
        let id = format!("d{i:05}");
        let sampler = self.cfg.sampler_config();
        let mut rng = rng_for(self.cfg.seed, "dialog", i as u64);
        let set = &sets[rng.gen_range(0..sets.len())];
        let persona = personas.get(set.persona_id.as_str()).copied();
        let mut last = String::new();
        for _ in 0..self.cfg.plot_attempts.max(1) {
            let attempt = (|| -> Result<PlotRecord, String> {
                let mut spec = sample_specimen(&id, &mut rng, &self.schemas, &set.persona_id, set, &sampler)
                    .map_err(|e| e.to_string())?;
                let contexts: Vec<AppContext> = set
                    .contexts
                    .iter()
                    .filter(|c| spec.context_services.contains(&c.service_name))
                    .cloned()
                    .collect();
                let fill = generate_slot_values(
                    &spec,
                    persona,
                    &self.schemas,
                    &contexts,
                    &mut rng,
                    &self.clients.generator,
                    &sampler,
                )
                .map_err(|e| e.to_string())?;
                spec.apply(fill);
                let plot = build_plot(&spec, &self.schemas, &contexts, &mut rng, &self.clients.generator, &self.cfg.plot)
                    .map_err(|e| e.to_string())?;
                Ok(PlotRecord {
                    id: id.clone(),
                    persona_id: set.persona_id.clone(),
                    now: set.now,
                    contexts,
                    specimen: spec,
                    plot,
                })
            })();
            match attempt {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::debug!("{id}: {e}");
                    last = e;
                }
            }
        }
        Err(last)
    }

    pub fn run_plots(&self) -> Result<StageSummary, PipelineError> {
        let personas: Vec<Persona> = read_items(&self.path(PERSONAS_FILE), "personas")?;
        let sets: Vec<ContextSet> = read_items(&self.path(CONTEXTS_FILE), "contexts")?;
        if sets.is_empty() && self.cfg.dialogs > 0 {
            return Err(PipelineError::Config("no persona has generated contexts".into()));
        }
        let by_id: BTreeMap<&str, &Persona> = personas.iter().map(|p| (p.id.as_str(), p)).collect();
        let results: Vec<_> = (0..self.cfg.dialogs)
            .into_par_iter()
            .map(|i| (format!("d{i:05}"), self.plot_one(i, &by_id, &sets)))
            .collect();
        let (plots, errors) = partition(results);
        write_items(&self.path(PLOTS_FILE), &plots)?;
        self.summary("plots", plots.len(), errors)
    }

    pub fn run_realize(&self) -> Result<StageSummary, PipelineError> {
        let personas: Vec<Persona> = read_items(&self.path(PERSONAS_FILE), "personas")?;
        let plots: Vec<PlotRecord> = read_items(&self.path(PLOTS_FILE), "plots")?;
        let by_id: BTreeMap<&str, &Persona> = personas.iter().map(|p| (p.id.as_str(), p)).collect();
        let realizer = Realizer {
            templates: &self.templates,
            user_llm: &self.clients.user,
            system_llm: &self.clients.system,
            cfg: &self.cfg.realizer,
        };
        let results: Vec<_> = plots
            .par_iter()
            .map(|r| {
                let out = (|| -> Result<Datapoint, String> {
                    let persona = by_id
                        .get(r.persona_id.as_str())
                        .ok_or_else(|| format!("unknown persona `{}`", r.persona_id))?;
                    let scene = Scene::new(r.plot.labels.services.clone(), r.now, &r.contexts);
                    let dialog = realizer.realize_dialog(&r.plot, persona, &scene).map_err(|e| e.to_string())?;
                    Ok(Datapoint {
                        id: r.id.clone(),
                        persona_id: r.persona_id.clone(),
                        now: r.now,
                        contexts: r.contexts.clone(),
                        plot: r.plot.clone(),
                        dialog,
                        labels: r.plot.labels.clone(),
                    })
                })();
                (r.id.clone(), out)
            })
            .collect();
        let (dps, errors) = partition(results);
        write_items(&self.path(DATASET_FILE), &dps)?;
        self.summary("realize", dps.len(), errors)
    }

    pub fn run_qc(&self) -> Result<StageSummary, PipelineError> {
        let dps: Vec<Datapoint> = read_items(&self.path(DATASET_FILE), "realize")?;
        let evaluator = Evaluator {
            llm: &self.clients.evaluator,
            templates: &self.templates,
            attempts: self.cfg.qc.attempts,
        };
        let ev = self.cfg.qc.evaluate.then_some(&evaluator);
        let results: Vec<_> = dps
            .par_iter()
            .map(|dp| (dp.id.clone(), run_qc(dp, ev).map_err(|e| e.to_string())))
            .collect();
        let (reports, errors) = partition(results);
        write_items(&self.path(QC_FILE), &reports)?;
        self.summary("qc", reports.len(), errors)
    }

    /// The dataset minus datapoints QC dropped and reviewed exclusions.
    pub fn accepted(&self) -> Result<Vec<Datapoint>, PipelineError> {
        let dps: Vec<Datapoint> = read_items(&self.path(DATASET_FILE), "realize")?;
        let mut removed = BTreeSet::new();
        let qc_path = self.path(QC_FILE);
        if qc_path.exists() {
            let reports: Vec<QcReport> = read_items(&qc_path, "qc")?;
            removed.extend(
                reports
                    .into_iter()
                    .filter(|r| r.disposition == Disposition::Drop)
                    .map(|r| r.id),
            );
        }
        if let Some(p) = &self.cfg.qc.exclusions {
            let file = File::open(p).map_err(io_err(p))?;
            removed.extend(read_exclusions(BufReader::new(file)).map_err(io_err(p))?);
        }
        Ok(dps.into_iter().filter(|d| !removed.contains(&d.id)).collect())
    }

    pub fn run_stats(&self) -> Result<StageSummary, PipelineError> {
        let dps = self.accepted()?;
        let report: StatsReport = compute_stats(&dps, &self.schemas);
        write_json(&self.path(STATS_FILE), &report)?;
        for (name, text) in stats_csv(&report) {
            let path = self.path(&format!("stats_{name}"));
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        self.summary("stats", dps.len(), Vec::new())
    }

    pub fn run_split(&self) -> Result<StageSummary, PipelineError> {
        let dps = self.accepted()?;
        let manifest: SplitManifest = split(&dps, &self.cfg.split).map_err(|source| PipelineError::Data {
            path: self.path(DATASET_FILE),
            source,
        })?;
        write_json(&self.path(SPLIT_FILE), &manifest)?;
        let by_id: BTreeMap<&str, &Datapoint> = dps.iter().map(|d| (d.id.as_str(), d)).collect();
        for (name, ids) in [("train", &manifest.train), ("test", &manifest.test), ("zero_shot", &manifest.zero_shot)] {
            let part: Vec<&Datapoint> = ids.iter().map(|id| by_id[id.as_str()]).collect();
            write_items(&self.path(&format!("{name}.jsonl")), &part)?;
        }
        self.summary("split", dps.len(), Vec::new())
    }

    /// Every stage in order; stops at the first stage that cannot run.
    pub fn run_all(&self) -> Result<Vec<StageSummary>, PipelineError> {
        let stages: [fn(&Self) -> Result<StageSummary, PipelineError>; 7] = [
            Self::run_personas,
            Self::run_contexts,
            Self::run_plots,
            Self::run_realize,
            Self::run_qc,
            Self::run_stats,
            Self::run_split,
        ];
        stages.iter().map(|f| f(self)).collect()
    }
}
