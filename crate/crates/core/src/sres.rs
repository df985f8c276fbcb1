//! Self-refined experience summarization.
//!
//! For one training instance:
//!
//! 1. build the inference prompt from the selected exemplars and the
//!    current bank, and sample `G` rollouts from the policy;
//! 2. have the evaluator grade each rollout on every criterion (0 or 1)
//!    with the ground truth visible; the reward is the sum;
//! 3. if the reward spread reaches `min_spread`, ask the policy to contrast
//!    the scored rollouts (ground truth redacted) and state one heuristic;
//! 4. ask the policy how the bank should absorb the heuristic and apply the
//!    decision.
//!
//! [`evolve`] runs this over a seeded subset of the training set, one
//! instance after another, since each decision consumes the bank left by
//! the previous one. An Add on a full bank is re-prompted once with Add
//! forbidden and falls back to Keep if the second answer is unusable.
//! Instances whose outputs cannot be parsed are logged and skipped; client
//! errors and mask violations abort the run.
//!
//! Request order per instance, by role (mock scripts follow it):
//!
//! | role      | requests                                                        |
//! |-----------|-----------------------------------------------------------------|
//! | policy    | rollouts (`G` samples), summary, decision, [re-prompted decision] |
//! | evaluator | one grade per rollout, in rollout order                          |

use serde::{Deserialize, Serialize};

use crate::bank::{BankError, Candidate, ExperienceBank, UpdateAction};
use crate::decs::DecsError;
use crate::embedding::{Dataset, EmbeddingRecord};
use crate::exemplar::ExemplarSelector;
use crate::model::{
    parse_action, parse_answer, parse_scores, Clients, GenerationRequest, ModelError, ParseError, PromptInput, Role,
};
use crate::prompt::{count_label, PromptBuilder, PromptError, ScoredText, TaskSpec, DEFAULT_CRITERIA};
use crate::rng::{self, stream};

#[derive(Debug, thiserror::Error)]
pub enum SresError {
    #[error("invalid SRES config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Retrieval(#[from] DecsError),
}

impl SresError {
    /// Errors that end an evolve run instead of skipping the instance.
    pub fn is_fatal(&self) -> bool {
        match self {
            SresError::Parse(_) => false,
            SresError::Prompt(e) => !matches!(e, PromptError::DegenerateGroup),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SresConfig {
    pub group_size: usize,
    pub temperature: f64,
    /// Evolution instances drawn from the training set.
    pub instances: usize,
    /// Minimum `max - min` reward within a group for summarization.
    pub min_spread: u32,
    pub seed: u64,
    pub criteria: Vec<String>,
    /// Evaluator sampling temperature.
    pub evaluator_temperature: f64,
    pub max_output_length: usize,
    /// Capacity of a freshly created bank.
    pub bank_capacity: usize,
}

impl Default for SresConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            temperature: 1.0,
            instances: 200,
            min_spread: 1,
            seed: 0,
            criteria: DEFAULT_CRITERIA.iter().map(|c| c.to_string()).collect(),
            evaluator_temperature: 0.0,
            max_output_length: GenerationRequest::DEFAULT_MAX_OUTPUT,
            bank_capacity: crate::bank::DEFAULT_CAPACITY,
        }
    }
}

impl SresConfig {
    pub fn validate(&self) -> Result<(), SresError> {
        let bad = |m: &str| Err(SresError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.temperature >= 0.0 && self.evaluator_temperature >= 0.0) {
            return bad("temperatures must be >= 0");
        }
        if self.criteria.is_empty() {
            return bad("criteria must not be empty");
        }
        if self.max_output_length == 0 {
            return bad("max_output_length must be >= 1");
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    /// 1-based position within the group.
    pub index: usize,
    pub text: String,
    /// `None` when the answer could not be parsed.
    pub parsed_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub per_criterion: Vec<u8>,
    pub total: u32,
    /// The evaluator's output could not be parsed; the total is 0.
    pub unscorable: bool,
}

impl RewardBreakdown {
    pub fn from_scores(per_criterion: Vec<u8>) -> Self {
        let total = per_criterion.iter().map(|&v| v as u32).sum();
        Self {
            per_criterion,
            total,
            unscorable: false,
        }
    }

    fn unscorable(n: usize) -> Self {
        Self {
            per_criterion: vec![0; n],
            total: 0,
            unscorable: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Rollout,
    Scoring,
    Summarization,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tau: u64,
    pub instance_id: String,
    pub phase: Phase,
    pub prompt: String,
    pub responses: Vec<String>,
}

/// Every prompt sent and every response received during evolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    fn record(&mut self, tau: u64, instance_id: &str, phase: Phase, prompt: String, responses: Vec<String>) {
        self.entries.push(TranscriptEntry {
            tau,
            instance_id: instance_id.to_string(),
            phase,
            prompt,
            responses,
        });
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("transcript entries serialize") + "\n")
            .collect()
    }
}

/// Ground-truth occurrences per phase, counted over prompts only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TaintReport {
    pub rollout: usize,
    pub scoring: usize,
    pub summarization: usize,
    pub update: usize,
}

impl TaintReport {
    /// No ground truth reached a summarization or update prompt.
    pub fn is_clean(&self) -> bool {
        self.summarization == 0 && self.update == 0
    }
}

/// Counts whole-word, case-insensitive occurrences of each instance's
/// ground-truth class name in the prompts of the transcript.
pub fn taint_check<F>(transcript: &Transcript, ground_truth: F) -> TaintReport
where
    F: Fn(&str) -> Option<String>,
{
    let mut report = TaintReport::default();
    for e in &transcript.entries {
        let Some(label) = ground_truth(&e.instance_id) else {
            continue;
        };
        let n = count_label(&e.prompt, &label);
        match e.phase {
            Phase::Rollout => report.rollout += n,
            Phase::Scoring => report.scoring += n,
            Phase::Summarization => report.summarization += n,
            Phase::Update => report.update += n,
        }
    }
    report
}

/// Grades each rollout; one evaluator request per rollout.
#[allow(clippy::too_many_arguments)]
pub fn score_group(
    rollouts: &[Rollout],
    context: &str,
    ground_truth: &str,
    evaluator: &dyn crate::model::ModelClient,
    builder: &PromptBuilder,
    cfg: &SresConfig,
    tau: u64,
    instance_id: &str,
    transcript: &mut Transcript,
) -> Result<Vec<RewardBreakdown>, SresError> {
    let prompts = rollouts
        .iter()
        .map(|r| builder.build_scoring_prompt(&r.text, context, ground_truth, &cfg.criteria))
        .collect::<Result<Vec<_>, _>>()?;
    let reqs: Vec<GenerationRequest> = prompts
        .iter()
        .map(|p| {
            GenerationRequest::new(PromptInput::Text(p.clone()), Role::Evaluator)
                .temperature(cfg.evaluator_temperature)
                .max_output(cfg.max_output_length)
        })
        .collect();
    let responses = evaluator.generate_batch(&reqs);
    let mut out = Vec::with_capacity(rollouts.len());
    for ((prompt, resp), rollout) in prompts.into_iter().zip(responses).zip(rollouts) {
        let resp = resp?;
        let text = resp.texts.first().cloned().unwrap_or_default();
        let breakdown = match parse_scores(&text, cfg.criteria.len()) {
            Ok(v) => RewardBreakdown::from_scores(v),
            Err(e) => {
                log::warn!("{instance_id}: rollout {} unscorable: {e}", rollout.index);
                RewardBreakdown::unscorable(cfg.criteria.len())
            }
        };
        transcript.record(tau, instance_id, Phase::Scoring, prompt, resp.texts);
        out.push(breakdown);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    /// `None` when the group had too little contrast to summarize.
    pub candidate: Option<Candidate>,
}

impl InstanceOutcome {
    pub fn totals(&self) -> Vec<u32> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

/// Shared, read-only inputs of a run.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub selector: &'a dyn ExemplarSelector,
    pub task: &'a TaskSpec,
    pub clients: Clients<'a>,
    pub builder: &'a PromptBuilder,
    pub cfg: &'a SresConfig,
}

fn extract_heuristic(text: &str) -> Option<String> {
    text.lines().rev().find_map(|line| {
        let l = line.trim().trim_start_matches(['*', '#', '>', ' ']);
        let head = l.get(..10)?;
        if head.eq_ignore_ascii_case("heuristic:") {
            let rule = l[10..].trim().trim_matches('*').trim();
            (!rule.is_empty()).then(|| rule.to_string())
        } else {
            None
        }
    })
}

pub fn run_instance(
    instance: &EmbeddingRecord,
    instance_index: usize,
    bank: &ExperienceBank,
    ctx: &Context<'_>,
    transcript: &mut Transcript,
) -> Result<InstanceOutcome, SresError> {
    let cfg = ctx.cfg;
    let tau = bank.version;
    let id = instance.id.as_str();
    let ground_truth = ctx.task.class_name(instance.label);

    let exemplars = ctx.selector.select(instance, instance_index)?;
    let prompt = ctx.builder.build_inference_prompt(
        id,
        instance.image_ref.as_deref(),
        &exemplars,
        Some(bank),
        ctx.task,
    )?;
    let context = prompt.render();
    let req = GenerationRequest::new(PromptInput::Multimodal(prompt), Role::Policy)
        .samples(cfg.group_size)
        .temperature(cfg.temperature)
        .max_output(cfg.max_output_length);
    let resp = ctx.clients.policy.generate(&req)?;
    transcript.record(tau, id, Phase::Rollout, context.clone(), resp.texts.clone());
    let rollouts: Vec<Rollout> = resp
        .texts
        .into_iter()
        .enumerate()
        .map(|(g, text)| Rollout {
            index: g + 1,
            parsed_label: parse_answer(&text, ctx.task).ok(),
            text,
        })
        .collect();

    let rewards = score_group(
        &rollouts,
        &context,
        ground_truth,
        ctx.clients.evaluator,
        ctx.builder,
        cfg,
        tau,
        id,
        transcript,
    )?;
    let totals: Vec<u32> = rewards.iter().map(|r| r.total).collect();
    let spread = totals.iter().max().unwrap_or(&0) - totals.iter().min().unwrap_or(&0);
    if spread < cfg.min_spread.max(1) {
        return Ok(InstanceOutcome {
            rollouts,
            rewards,
            candidate: None,
        });
    }

    let scored: Vec<ScoredText<'_>> = rollouts
        .iter()
        .zip(&totals)
        .map(|(r, &score)| ScoredText { text: &r.text, score })
        .collect();
    let prompt = ctx
        .builder
        .build_summarization_prompt(&scored, cfg.criteria.len() as u32, ground_truth)?;
    let req = GenerationRequest::new(PromptInput::Text(prompt.clone()), Role::Policy)
        .temperature(cfg.temperature)
        .max_output(cfg.max_output_length);
    let resp = ctx.clients.policy.generate(&req)?;
    let text = resp.texts.first().cloned().unwrap_or_default();
    transcript.record(tau, id, Phase::Summarization, prompt, resp.texts);
    let rule = extract_heuristic(&text).ok_or_else(|| ParseError::Unparseable(text.clone()))?;
    Ok(InstanceOutcome {
        rollouts,
        rewards,
        candidate: Some(Candidate::new(rule, vec![id.to_string()])),
    })
}

/// Asks the policy for a bank decision and applies it.
fn decide(
    bank: &ExperienceBank,
    candidate: &Candidate,
    ground_truth: &str,
    ctx: &Context<'_>,
    instance_id: &str,
    transcript: &mut Transcript,
) -> Result<(UpdateAction, bool), SresError> {
    let ask = |forbid_add: bool, transcript: &mut Transcript| -> Result<String, SresError> {
        let prompt = ctx
            .builder
            .build_update_prompt(bank, &candidate.text, Some(ground_truth), forbid_add)?;
        let req = GenerationRequest::new(PromptInput::Text(prompt.clone()), Role::Policy)
            .temperature(ctx.cfg.temperature)
            .max_output(ctx.cfg.max_output_length);
        let resp = ctx.clients.policy.generate(&req)?;
        let text = resp.texts.first().cloned().unwrap_or_default();
        transcript.record(bank.version, instance_id, Phase::Update, prompt, resp.texts);
        Ok(text)
    };
    let first = ask(false, transcript)?;
    match parse_action(&first, bank, &candidate.text) {
        Ok(action) => Ok((action, false)),
        Err(ParseError::AddWhenFull) => {
            let second = ask(true, transcript)?;
            match parse_action(&second, bank, &candidate.text) {
                Ok(action) => Ok((action, true)),
                Err(e) => {
                    log::warn!("{instance_id}: re-prompted decision unusable ({e}); keeping the bank");
                    Ok((UpdateAction::Keep, true))
                }
            }
        }
        Err(e) => Err(e.into()),
    }
}

/// One line of the evolution log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Bank version the instance started from.
    pub tau: u64,
    pub instance_id: String,
    pub scores: Vec<u32>,
    /// `Add`, `Delete(id)`, `Keep` or `Modify(id)`; absent when skipped.
    pub action: Option<String>,
    pub bank_size: usize,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reprompted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn describe(action: &UpdateAction) -> String {
    match action.target_id() {
        Some(t) => format!("{}({t})", action.kind()),
        None => action.kind().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    pub bank: ExperienceBank,
    pub log: Vec<LogEvent>,
    pub transcript: Transcript,
}

impl Evolution {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log events serialize") + "\n")
            .collect()
    }
}

/// Training indices visited by [`evolve`], in visiting order.
pub fn evolution_subset(train: &Dataset, cfg: &SresConfig) -> Vec<usize> {
    let all: Vec<usize> = (0..train.len()).collect();
    if cfg.instances > train.len() {
        log::warn!(
            "{} evolution instances requested, training set has {}; using all",
            cfg.instances,
            train.len()
        );
    }
    rng::sample_without_replacement(&mut rng::seeded(cfg.seed, stream::EVOLVE_SUBSET), &all, cfg.instances)
}

pub fn evolve(train: &Dataset, initial: ExperienceBank, ctx: &Context<'_>) -> Result<Evolution, SresError> {
    ctx.cfg.validate()?;
    ctx.task
        .validate(Some(train.num_classes()))
        .map_err(SresError::Prompt)?;
    initial.validate()?;
    let mut bank = initial;
    let mut log = Vec::new();
    let mut transcript = Transcript::default();

    for idx in evolution_subset(train, ctx.cfg) {
        let instance = train.get(idx);
        let tau = bank.version;
        let mut event = LogEvent {
            tau,
            instance_id: instance.id.clone(),
            scores: Vec::new(),
            action: None,
            bank_size: bank.len(),
            skipped: true,
            reprompted: false,
            error: None,
        };
        let outcome = match run_instance(instance, idx, &bank, ctx, &mut transcript) {
            Ok(o) => o,
            Err(e) if !e.is_fatal() => {
                log::warn!("{}: instance failed: {e}", instance.id);
                event.error = Some(e.to_string());
                log.push(event);
                continue;
            }
            Err(e) => return Err(e),
        };
        event.scores = outcome.totals();
        let Some(candidate) = outcome.candidate else {
            log.push(event);
            continue;
        };
        let ground_truth = ctx.task.class_name(instance.label);
        match decide(&bank, &candidate, ground_truth, ctx, &instance.id, &mut transcript) {
            Ok((action, reprompted)) => {
                bank = bank.apply_update(&candidate, &action)?;
                event.action = Some(describe(&action));
                event.bank_size = bank.len();
                event.skipped = false;
                event.reprompted = reprompted;
            }
            Err(e) if !e.is_fatal() => {
                log::warn!("{}: bank decision failed: {e}", instance.id);
                event.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        log.push(event);
    }
    Ok(Evolution { bank, log, transcript })
}
