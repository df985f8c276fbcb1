//! Run configuration and the command implementations behind the CLI.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! [paths]            # relative paths resolve against the config file's directory
//! train = "data/train.jsonl"
//! test = "data/test.jsonl"
//! coreset = "out/coreset.json"
//! bank = "out/bank.json"
//! evolution_log = "out/evolution.jsonl"
//! transcript = "out/transcript.jsonl"
//! report = "out/report.json"
//!
//! [decs]             # DecsConfig
//! [sres]             # SresConfig
//! [task]             # TaskSpec: name, class_names
//! [model]            # policy + evaluator endpoint; [model.evaluator] and
//!                    # [model.eval] override it for grading and for evaluation
//! backend = "script" # script | nearest-exemplar | http
//! script = "golden/script.json"
//! [eval]             # runs, arm, sres, seed, temperature
//! [synth]            # SynthSpec used by `synth`
//! ```
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 model
//! transport error, 4 invariant violation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{BankError, ExperienceBank};
use crate::decs::{self, Coreset, DecsConfig, DecsError, Sizing};
use crate::embedding::{self, Dataset, EmbeddingError};
use crate::exemplar::{Arm, CoresetExemplars, ExemplarSelector, NoExemplars, RandomExemplars, RawTopK};
use crate::harness::{self, HarnessError, SynthSpec};
use crate::model::http::{ChatClient, HttpConfig};
use crate::model::mock::{NearestExemplarPolicy, ScriptedClient};
use crate::model::{parse_answer, Clients, GenerationRequest, ModelClient, ModelError, PromptInput, Role};
use crate::prompt::{PromptBuilder, PromptError, TaskSpec, TemplateSet};
use crate::rng;
use crate::sres::{self, SresConfig, SresError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("file not found: {0}")]
    FileMissing(PathBuf),
    #[error("unknown record id {0:?}")]
    UnknownId(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Decs(#[from] DecsError),
    #[error(transparent)]
    Sres(#[from] SresError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

fn model_exit(e: &ModelError) -> i32 {
    if e.is_transport() {
        3
    } else {
        2
    }
}

fn prompt_exit(e: &PromptError) -> i32 {
    match e {
        PromptError::MaskViolation(_) => 4,
        _ => 2,
    }
}

fn bank_exit(e: &BankError) -> i32 {
    match e {
        BankError::InvariantViolation(_) | BankError::AddWhenFull { .. } => 4,
        _ => 2,
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Model(e) => model_exit(e),
            PipelineError::Prompt(e) => prompt_exit(e),
            PipelineError::Bank(e) => bank_exit(e),
            PipelineError::Sres(e) => match e {
                SresError::Model(m) => model_exit(m),
                SresError::Prompt(p) => prompt_exit(p),
                SresError::Bank(b) => bank_exit(b),
                _ => 2,
            },
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub coreset: Option<PathBuf>,
    /// Bank written by `evolve` and read by `eval --sres`.
    pub bank: Option<PathBuf>,
    /// Starting bank for `evolve`; an empty bank when absent.
    pub initial_bank: Option<PathBuf>,
    pub evolution_log: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Per-query predictions of `eval`.
    pub predictions: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Replays a mock script.
    #[default]
    Script,
    /// Majority label of the shown exemplars.
    NearestExemplar,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub backend: Backend,
    pub script: Option<PathBuf>,
    pub http: HttpConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: Backend,
    pub script: Option<PathBuf>,
    pub http: HttpConfig,
    /// Grading endpoint for `evolve`; the main endpoint when absent.
    pub evaluator: Option<EndpointConfig>,
    /// Policy for `eval`; the main endpoint when absent.
    pub eval: Option<EndpointConfig>,
}

impl ModelConfig {
    fn main(&self) -> EndpointConfig {
        EndpointConfig {
            backend: self.backend,
            script: self.script.clone(),
            http: self.http.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub runs: usize,
    pub arm: Arm,
    pub sres: bool,
    pub seed: u64,
    pub temperature: f64,
    pub max_output_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            arm: Arm::Decs,
            sres: false,
            seed: 0,
            temperature: 1.0,
            max_output_length: GenerationRequest::DEFAULT_MAX_OUTPUT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub decs: DecsConfig,
    pub sres: SresConfig,
    pub task: Option<TaskSpec>,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub synth: Option<SynthSpec>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides of the config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub arm: Option<Arm>,
    pub sres: bool,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(PipelineError::FileMissing(path.to_path_buf()));
        }
        let text = read(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn path(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| PipelineError::Config(format!("[paths] {field} is not set")))
    }

    fn input(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        let p = self.path(field, value)?;
        if !p.exists() {
            return Err(PipelineError::FileMissing(p));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.decs.validate()?;
        self.sres.validate()?;
        if self.eval.runs == 0 {
            return Err(PipelineError::Config("[eval] runs must be >= 1".into()));
        }
        if !(self.eval.temperature >= 0.0) || self.eval.max_output_length == 0 {
            return Err(PipelineError::Config(
                "[eval] temperature must be >= 0 and max_output_length >= 1".into(),
            ));
        }
        if let Some(t) = &self.task {
            t.validate(None)?;
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn task(&self, num_classes: usize) -> Result<TaskSpec> {
        let task = self
            .task
            .clone()
            .ok_or_else(|| PipelineError::Config("[task] section is missing".into()))?;
        task.validate(Some(num_classes))?;
        Ok(task)
    }

    pub fn builder(&self) -> Result<PromptBuilder> {
        let templates = match &self.paths.templates {
            Some(dir) => TemplateSet::load_dir(self.resolve(dir))?,
            None => TemplateSet::builtin(),
        };
        Ok(PromptBuilder::new(templates))
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&json).as_bytes()))
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, String> = map.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{v}", serde_json::to_string(k).unwrap()))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

fn load_normalized(path: &Path) -> Result<Dataset> {
    let ds = embedding::load_dataset(path)?;
    Ok(if ds.is_normalized() { ds } else { ds.normalized()? })
}

fn connect(cfg: &RunConfig, ep: &EndpointConfig) -> Result<Box<dyn ModelClient>> {
    Ok(match ep.backend {
        Backend::Script => {
            let script = ep
                .script
                .as_deref()
                .ok_or_else(|| PipelineError::Config("script backend needs a script path".into()))?;
            let path = cfg.resolve(script);
            if !path.exists() {
                return Err(PipelineError::FileMissing(path));
            }
            Box::new(ScriptedClient::load(path)?)
        }
        Backend::NearestExemplar => Box::new(NearestExemplarPolicy),
        Backend::Http => Box::new(ChatClient::new(ep.http.clone())?),
    })
}

pub struct OptimizeSummary {
    pub path: PathBuf,
    pub sizing: Sizing,
    pub keys_per_class: Vec<usize>,
}

impl fmt::Display for OptimizeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "sizing (S_c, T_opt) = ({}, {})",
            self.sizing.coreset_size, self.sizing.epochs
        )?;
        let counts: Vec<String> = self.keys_per_class.iter().map(|c| c.to_string()).collect();
        writeln!(f, "keys per class: {}", counts.join(" "))?;
        write!(f, "coreset written to {}", self.path.display())
    }
}

pub fn cmd_optimize(cfg: &RunConfig) -> Result<OptimizeSummary> {
    cfg.validate()?;
    let train_path = cfg.input("train", &cfg.paths.train)?;
    let out = cfg.path("coreset", &cfg.paths.coreset)?;
    let train = load_normalized(&train_path)?;
    let coreset = decs::optimize(&train, &cfg.decs)?;
    if coreset.max_norm_error() >= decs::KEY_NORM_TOLERANCE {
        return Err(PipelineError::Bank(BankError::InvariantViolation(
            "optimized keys left the unit sphere".into(),
        )));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    coreset.save(&out)?;
    Ok(OptimizeSummary {
        path: out,
        sizing: coreset.sizing,
        keys_per_class: coreset.keys_per_class(),
    })
}

/// Owns whatever a selector borrows.
enum SelectorSource {
    None,
    Train(Dataset),
    Coreset(Dataset, Coreset),
}

impl SelectorSource {
    fn load(cfg: &RunConfig, arm: Arm) -> Result<Self> {
        Ok(match arm {
            Arm::None => SelectorSource::None,
            Arm::Random | Arm::Topk => SelectorSource::Train(load_normalized(&cfg.input("train", &cfg.paths.train)?)?),
            Arm::Decs => {
                let train = load_normalized(&cfg.input("train", &cfg.paths.train)?)?;
                let coreset = Coreset::load(cfg.input("coreset", &cfg.paths.coreset)?)?;
                SelectorSource::Coreset(train, coreset)
            }
        })
    }

    fn selector(&self, arm: Arm, k: usize, seed: u64) -> Result<Box<dyn ExemplarSelector + '_>> {
        Ok(match (arm, self) {
            (Arm::None, _) => Box::new(NoExemplars),
            (Arm::Random, SelectorSource::Train(t)) => Box::new(RandomExemplars::new(t, k, seed)?),
            (Arm::Topk, SelectorSource::Train(t)) => Box::new(RawTopK::new(t, k)?),
            (Arm::Decs, SelectorSource::Coreset(t, c)) => Box::new(CoresetExemplars::new(c, t, k)?),
            _ => unreachable!("selector source loaded for a different arm"),
        })
    }

    fn train(&self) -> Option<&Dataset> {
        match self {
            SelectorSource::None => None,
            SelectorSource::Train(t) | SelectorSource::Coreset(t, _) => Some(t),
        }
    }
}

pub struct EvolveSummary {
    pub bank_path: PathBuf,
    pub bank_size: usize,
    pub version: u64,
    pub instances: usize,
    pub skipped: usize,
}

impl fmt::Display for EvolveSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instances ({} skipped); bank holds {} heuristics at version {}; written to {}",
            self.instances,
            self.skipped,
            self.bank_size,
            self.version,
            self.bank_path.display()
        )
    }
}

pub fn cmd_evolve(cfg: &RunConfig, ov: &Overrides) -> Result<EvolveSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = ov.seed {
        cfg.sres.seed = s;
    }
    cfg.validate()?;
    let arm = ov.arm.unwrap_or(Arm::Decs);
    let bank_path = cfg.path("bank", &cfg.paths.bank)?;
    let initial = match &cfg.paths.initial_bank {
        Some(p) => ExperienceBank::load(cfg.input("initial_bank", &Some(p.clone()))?)?,
        None => ExperienceBank::new(cfg.sres.bank_capacity),
    };
    let source = SelectorSource::load(&cfg, arm)?;
    let train = match source.train() {
        Some(t) => t.clone(),
        None => load_normalized(&cfg.input("train", &cfg.paths.train)?)?,
    };
    let task = cfg.task(train.num_classes())?;
    let builder = cfg.builder()?;
    let selector = source.selector(arm, cfg.decs.top_k, cfg.sres.seed)?;

    let main = cfg.model.main();
    let policy = connect(&cfg, &main)?;
    let separate = cfg.model.evaluator.as_ref().filter(|e| **e != main);
    let evaluator_owned = separate.map(|e| connect(&cfg, e)).transpose()?;
    let evaluator: &dyn ModelClient = evaluator_owned.as_deref().unwrap_or(policy.as_ref());

    let ctx = sres::Context {
        selector: selector.as_ref(),
        task: &task,
        clients: Clients {
            policy: policy.as_ref(),
            evaluator,
        },
        builder: &builder,
        cfg: &cfg.sres,
    };
    let evo = sres::evolve(&train, initial, &ctx)?;
    if evo.log.iter().any(|e| e.bank_size > evo.bank.capacity) {
        return Err(PipelineError::Bank(BankError::InvariantViolation(
            "evolution log shows the bank above capacity".into(),
        )));
    }
    let taint = sres::taint_check(&evo.transcript, |id| {
        train.find(id).map(|(_, r)| task.class_name(r.label).to_string())
    });
    if !taint.is_clean() {
        return Err(PipelineError::Prompt(PromptError::MaskViolation(format!(
            "{} occurrences in summarization/update prompts",
            taint.summarization + taint.update
        ))));
    }

    write(&bank_path, &evo.bank.to_json())?;
    if let Some(p) = &cfg.paths.evolution_log {
        write(&cfg.resolve(p), &evo.log_jsonl())?;
    }
    if let Some(p) = &cfg.paths.transcript {
        write(&cfg.resolve(p), &evo.transcript.to_jsonl())?;
    }
    Ok(EvolveSummary {
        bank_path,
        bank_size: evo.bank.len(),
        version: evo.bank.version,
        instances: evo.log.len(),
        skipped: evo.log.iter().filter(|e| e.skipped).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub unparseable: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: Arm,
    pub sres: bool,
    pub runs: Vec<RunResult>,
    pub mean_accuracy: f64,
    /// Pooled over all runs.
    pub per_class: Vec<ClassAccuracy>,
    pub unparseable: usize,
    pub config_fingerprint: String,
    pub transcript: Option<String>,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned-column text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![["run".into(), "accuracy".into(), "correct".into(), "unparseable".into()]];
        for r in &self.runs {
            rows.push([
                r.run.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{}/{}", r.correct, r.total),
                r.unparseable.to_string(),
            ]);
        }
        rows.push(["mean".into(), format!("{:.4}", self.mean_accuracy), String::new(), self.unparseable.to_string()]);
        let mut out = format!("arm: {}{}\n", self.arm, if self.sres { " + sres" } else { "" });
        render_rows(&mut out, &rows);
        out.push('\n');
        let mut rows: Vec<[String; 4]> = vec![["class".into(), "accuracy".into(), "correct".into(), String::new()]];
        for c in &self.per_class {
            rows.push([c.class.clone(), format!("{:.4}", c.accuracy), format!("{}/{}", c.correct, c.total), String::new()]);
        }
        render_rows(&mut out, &rows);
        out
    }
}

fn render_rows(out: &mut String, rows: &[[String; 4]]) {
    let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    for r in rows {
        let line: Vec<String> = (0..4).map(|c| format!("{:<w$}", r[c], w = widths[c])).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
}

#[derive(Serialize)]
struct Prediction<'a> {
    run: usize,
    query_id: &'a str,
    label: usize,
    predicted: Option<usize>,
    exemplars: Vec<&'a str>,
    response: &'a str,
}

pub fn cmd_eval(cfg: &RunConfig, ov: &Overrides) -> Result<EvalReport> {
    let endpoint = cfg.model.eval.clone().unwrap_or_else(|| cfg.model.main());
    let policy = connect(cfg, &endpoint)?;
    evaluate(cfg, ov, policy.as_ref())
}

/// [`cmd_eval`] against an explicit policy client.
pub fn evaluate(cfg: &RunConfig, ov: &Overrides, policy: &dyn ModelClient) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    if let Some(a) = ov.arm {
        cfg.eval.arm = a;
    }
    cfg.eval.sres |= ov.sres;
    if let Some(r) = ov.runs {
        cfg.eval.runs = r;
    }
    if let Some(s) = ov.seed {
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    let arm = cfg.eval.arm;
    let test = load_normalized(&cfg.input("test", &cfg.paths.test)?)?;
    let task = cfg.task(test.num_classes())?;
    let bank = if cfg.eval.sres {
        Some(ExperienceBank::load(cfg.input("bank", &cfg.paths.bank)?)?)
    } else {
        None
    };
    let source = SelectorSource::load(&cfg, arm)?;
    if let Some(t) = source.train() {
        if t.dim() != test.dim() || t.num_classes() != test.num_classes() {
            return Err(PipelineError::Config("training and test sets disagree on dim or classes".into()));
        }
    }
    let builder = cfg.builder()?;

    let c = test.num_classes();
    let mut runs = Vec::with_capacity(cfg.eval.runs);
    let mut class_correct = vec![0usize; c];
    let mut class_total = vec![0usize; c];
    let mut predictions = String::new();
    for run in 0..cfg.eval.runs {
        let seed = rng::derive(cfg.eval.seed, run as u64);
        let selector = source.selector(arm, cfg.decs.top_k, seed)?;
        let mut reqs = Vec::with_capacity(test.len());
        let mut shown = Vec::with_capacity(test.len());
        for (i, rec) in test.records().iter().enumerate() {
            let exemplars = selector.select(rec, i)?;
            let prompt =
                builder.build_inference_prompt(&rec.id, rec.image_ref.as_deref(), &exemplars, bank.as_ref(), &task)?;
            reqs.push(
                GenerationRequest::new(PromptInput::Multimodal(prompt), Role::Policy)
                    .temperature(cfg.eval.temperature)
                    .max_output(cfg.eval.max_output_length),
            );
            shown.push(exemplars);
        }
        let responses = policy.generate_batch(&reqs);
        let (mut correct, mut unparseable) = (0, 0);
        for ((rec, resp), exemplars) in test.records().iter().zip(responses).zip(&shown) {
            let resp = resp?;
            let text = resp.texts.first().map(String::as_str).unwrap_or("");
            let predicted = parse_answer(text, &task).ok();
            match predicted {
                Some(p) if p == rec.label => {
                    correct += 1;
                    class_correct[rec.label] += 1;
                }
                Some(_) => {}
                None => unparseable += 1,
            }
            class_total[rec.label] += 1;
            let line = Prediction {
                run,
                query_id: &rec.id,
                label: rec.label,
                predicted,
                exemplars: exemplars.iter().map(|e| e.id.as_str()).collect(),
                response: text,
            };
            predictions.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
            predictions.push('\n');
        }
        runs.push(RunResult {
            run,
            seed,
            correct,
            total: test.len(),
            unparseable,
            accuracy: ratio(correct, test.len()),
        });
    }
    let accuracies: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let transcript = match &cfg.paths.predictions {
        Some(p) => {
            write(&cfg.resolve(p), &predictions)?;
            Some(p.display().to_string())
        }
        None => None,
    };
    let report = EvalReport {
        arm,
        sres: cfg.eval.sres,
        mean_accuracy: mean(&accuracies),
        unparseable: runs.iter().map(|r| r.unparseable).sum(),
        runs,
        per_class: (0..c)
            .map(|k| ClassAccuracy {
                class: task.class_name(k).to_string(),
                correct: class_correct[k],
                total: class_total[k],
                accuracy: ratio(class_correct[k], class_total[k]),
            })
            .collect(),
        config_fingerprint: cfg.fingerprint(),
        transcript,
    };
    if let Some(p) = &cfg.paths.report {
        write(&cfg.resolve(p), &report.to_json())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedRow {
    pub rank: usize,
    pub key: usize,
    pub class: String,
    pub similarity: f64,
    /// Training record shown for the key.
    pub anchor_id: String,
}

pub fn render_retrieval(query_id: &str, rows: &[RetrievedRow]) -> String {
    let mut table: Vec<[String; 4]> = vec![["rank".into(), "key".into(), "class".into(), "similarity".into()]];
    for r in rows {
        table.push([
            r.rank.to_string(),
            format!("{} ({})", r.key, r.anchor_id),
            r.class.clone(),
            format!("{:.12}", r.similarity),
        ]);
    }
    let mut out = format!("query: {query_id}\n");
    render_rows(&mut out, &table);
    out
}

pub fn cmd_retrieve(cfg: &RunConfig, query_id: &str, k: Option<usize>) -> Result<Vec<RetrievedRow>> {
    cfg.validate()?;
    let test = load_normalized(&cfg.input("test", &cfg.paths.test)?)?;
    let train = load_normalized(&cfg.input("train", &cfg.paths.train)?)?;
    let coreset = Coreset::load(cfg.input("coreset", &cfg.paths.coreset)?)?;
    let (_, query) = test.find(query_id).ok_or_else(|| PipelineError::UnknownId(query_id.to_string()))?;
    let names = match &cfg.task {
        Some(t) => {
            t.validate(Some(coreset.num_classes))?;
            t.class_names.clone()
        }
        None => (0..coreset.num_classes).map(|c| c.to_string()).collect(),
    };
    let neighbors = decs::retrieve_topk(&coreset, &query.vector, k.unwrap_or(cfg.decs.top_k))?;
    let anchors = crate::exemplar::key_anchors(&coreset, &train)?;
    Ok(neighbors
        .into_iter()
        .enumerate()
        .map(|(i, n)| RetrievedRow {
            rank: i + 1,
            key: n.index,
            class: names[n.class].clone(),
            similarity: n.similarity,
            anchor_id: train.get(anchors[n.index]).id.clone(),
        })
        .collect())
}

pub struct SynthSummary {
    pub train: (PathBuf, usize),
    pub test: (PathBuf, usize),
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "wrote {} training records to {} and {} test records to {}",
            self.train.1,
            self.train.0.display(),
            self.test.1,
            self.test.0.display()
        )
    }
}

/// Generates a synthetic benchmark. The spec comes from `spec_path` when
/// given, else from the `[synth]` section.
pub fn cmd_synth(cfg: &RunConfig, spec_path: Option<&Path>, seed: Option<u64>) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut spec = match spec_path {
        Some(p) => {
            if !p.exists() {
                return Err(PipelineError::FileMissing(p.to_path_buf()));
            }
            toml::from_str::<SynthSpec>(&read(p)?).map_err(|e| PipelineError::Config(e.to_string()))?
        }
        None => cfg
            .synth
            .clone()
            .ok_or_else(|| PipelineError::Config("[synth] section is missing".into()))?,
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train, test) = harness::generate_synthetic(&spec)?;
    let train_path = cfg.path("train", &cfg.paths.train)?;
    let test_path = cfg.path("test", &cfg.paths.test)?;
    for (ds, p) in [(&train, &train_path), (&test, &test_path)] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
                path: dir.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        embedding::save_dataset(ds, p)?;
    }
    Ok(SynthSummary {
        train: (train_path, train.len()),
        test: (test_path, test.len()),
    })
}
