//! End-to-end evaluation: run one attack mode over a dataset, aggregate
//! the attack success rate, and emit machine-readable reports.
//!
//! A report is a pure function of `(config, models, dataset)`: each sample
//! attack is seeded from its own counter-derived stream of the master
//! seed, samples run in parallel, and aggregation is an ordered reduction
//! by sample index. Wall-clock time lives in a timestamp field that is
//! excluded from equality.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{AttackSession, QueryStage, QueryTarget};
use crate::bsa::{init_perturbation, AttackBudget, LossTerm, Optimizer};
use crate::error::{Error, Result};
use crate::icsa::{run_pipeline, AttackResult, AttackStatus, AttackTrace, PipelineDepth};
use crate::modelzoo::{Prediction, PretrainedModel, TaskDataset, TaskKind, TaskTarget};

/// Momentum decay for the MI_VARIANT mode.
pub const MI_DECAY: f64 = 1.0;

/// The attack variants the harness can evaluate. The serialized names are
/// the command-line mode names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Image-only attack using only the image-encoder blocks of the loss.
    #[serde(rename = "IE")]
    Ie,
    /// Image-only attack using only the fusion-encoder blocks of the loss.
    #[serde(rename = "TE")]
    Te,
    /// Image-only attack on the full block-similarity loss (stage 1 alone).
    #[serde(rename = "BSA")]
    Bsa,
    /// Stages 1–2: image attack, then word substitution on the clean image.
    #[serde(rename = "BSA+BA")]
    BsaBa,
    /// Stages 1–2, then each ranked candidate queried with the frozen
    /// stage-1 image — no cross-search descent.
    #[serde(rename = "BSA+BA+Q")]
    BsaBaQ,
    /// The full three-stage pipeline.
    #[serde(rename = "VLATTACK")]
    Vlattack,
    /// Control baseline: a single uniform perturbation in the ball, one query.
    #[serde(rename = "RANDOM_NOISE")]
    RandomNoise,
    /// The full pipeline with the momentum-iterative image optimizer.
    #[serde(rename = "MI_VARIANT")]
    MiVariant,
}

impl EvalMode {
    /// Every mode, in presentation order.
    pub const ALL: [EvalMode; 8] = [
        EvalMode::Ie,
        EvalMode::Te,
        EvalMode::Bsa,
        EvalMode::BsaBa,
        EvalMode::BsaBaQ,
        EvalMode::Vlattack,
        EvalMode::RandomNoise,
        EvalMode::MiVariant,
    ];

    /// The six rows of the component-ablation ladder.
    pub const ABLATION_LADDER: [EvalMode; 6] = [
        EvalMode::Ie,
        EvalMode::Te,
        EvalMode::Bsa,
        EvalMode::BsaBa,
        EvalMode::BsaBaQ,
        EvalMode::Vlattack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Ie => "IE",
            EvalMode::Te => "TE",
            EvalMode::Bsa => "BSA",
            EvalMode::BsaBa => "BSA+BA",
            EvalMode::BsaBaQ => "BSA+BA+Q",
            EvalMode::Vlattack => "VLATTACK",
            EvalMode::RandomNoise => "RANDOM_NOISE",
            EvalMode::MiVariant => "MI_VARIANT",
        }
    }

    /// Which blocks the image objective sums over in this mode.
    pub fn loss_term(self) -> LossTerm {
        match self {
            EvalMode::Ie => LossTerm::ImageOnly,
            EvalMode::Te => LossTerm::FusionOnly,
            _ => LossTerm::Full,
        }
    }

    /// How deep the pipeline runs; `None` for the noise control, which
    /// runs no pipeline at all.
    pub fn depth(self) -> Option<PipelineDepth> {
        match self {
            EvalMode::Ie | EvalMode::Te | EvalMode::Bsa => Some(PipelineDepth::ImageOnly),
            EvalMode::BsaBa => Some(PipelineDepth::WithText),
            EvalMode::BsaBaQ => Some(PipelineDepth::WithPairQueries),
            EvalMode::Vlattack | EvalMode::MiVariant => Some(PipelineDepth::Full),
            EvalMode::RandomNoise => None,
        }
    }

    pub fn optimizer(self) -> Optimizer {
        match self {
            EvalMode::MiVariant => Optimizer::MomentumIterative { decay: MI_DECAY },
            _ => Optimizer::Pgd,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canon = s.to_ascii_uppercase();
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == canon)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of {}",
                    EvalMode::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

/// Everything that determines an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub task: TaskKind,
    /// How many dataset samples to consider (before correctness filtering).
    pub sample_count: usize,
    pub budget: AttackBudget,
    /// Master seed; each sample attack derives its own stream from it.
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one per-sample attack, as stored in the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    /// Index of the sample in the evaluated dataset.
    pub index: usize,
    pub status: AttackStatus,
    /// Attack queries spent (probes excluded).
    pub queries: usize,
    pub image_iterations: usize,
    /// Which ranked candidate flipped, for multimodal successes.
    pub candidate_index: Option<usize>,
    pub trace: AttackTrace,
}

/// Success counts split by the stage that landed the flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub image: usize,
    pub text: usize,
    pub multimodal: usize,
}

impl StageCounts {
    pub fn total(self) -> usize {
        self.image + self.text + self.multimodal
    }
}

/// Aggregated evaluation result. Equality ignores the timestamp, so two
/// runs with identical inputs compare equal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// `100 · successes / attempted`, rounded to two decimals.
    pub asr_percent: f64,
    /// Correctly-predicted samples that were actually attacked.
    pub attempted: usize,
    pub successes_by_stage: StageCounts,
    pub mean_queries: f64,
    pub mean_image_iterations: f64,
    pub samples: Vec<SampleOutcome>,
    pub version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch at aggregation time; excluded from
    /// equality.
    pub timestamp: u64,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.asr_percent == other.asr_percent
            && self.attempted == other.attempted
            && self.successes_by_stage == other.successes_by_stage
            && self.mean_queries == other.mean_queries
            && self.mean_image_iterations == other.mean_image_iterations
            && self.samples == other.samples
            && self.version == other.version
            && self.seed == other.seed
    }
}

impl EvalReport {
    /// Sample indices whose attack succeeded, in order.
    pub fn success_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.status.is_success())
            .map(|s| s.index)
            .collect()
    }
}

/// Derives the attack seed for one sample from the master seed: stream
/// `index` of the master generator, first draw. Independent of evaluation
/// order and thread scheduling.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.random::<u64>()
}

/// Does the victim's clean answer match the label? Used to filter the
/// evaluation set down to correctly-predicted samples.
fn correct(prediction: &Prediction, target: &TaskTarget) -> Result<bool> {
    match (prediction, target) {
        (Prediction::Class { label, .. }, TaskTarget::Class(want)) => Ok(label == want),
        (Prediction::Sequence { tokens, .. }, TaskTarget::Caption(want)) => Ok(tokens == want),
        (Prediction::Box { bbox, .. }, TaskTarget::Box(want)) => {
            Ok(crate::blackbox::iou(bbox, want) > 0.5)
        }
        _ => Err(Error::Eval(
            "victim prediction kind does not match the dataset's target kind".into(),
        )),
    }
}

/// The control baseline: one uniform draw inside the ball, one query.
fn random_noise_attack(session: &mut AttackSession<'_>, seed: u64) -> Result<AttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = session.budget().clone();
    let noisy = init_perturbation(session.original_image(), &budget, &mut rng);
    let text = session.original_text().clone();
    let prediction = session.query(QueryStage::Image, &noisy, &text)?;
    let flipped = session.flips(&prediction);
    let trace = AttackTrace { ledger: session.ledger().clone(), ..AttackTrace::default() };
    let queries_used = trace.ledger.attack_queries();
    Ok(AttackResult {
        status: if flipped { AttackStatus::SuccessImage } else { AttackStatus::Failure },
        adversarial: flipped.then(|| (noisy, text)),
        flipped_prediction: flipped.then_some(prediction),
        image_iterations_used: 0,
        queries_used,
        candidate_index: None,
        trace,
    })
}

/// Runs the configured mode against one session.
fn attack_with_mode(
    mode: EvalMode,
    surrogate: &PretrainedModel,
    session: &mut AttackSession<'_>,
    seed: u64,
) -> Result<AttackResult> {
    match mode.depth() {
        Some(depth) => run_pipeline(
            surrogate,
            session,
            mode.loss_term(),
            mode.optimizer(),
            seed,
            depth,
        ),
        None => random_noise_attack(session, seed),
    }
}

/// Every invariant a healthy per-sample trace must satisfy; violations
/// mean attack code misbehaved and fail the whole evaluation.
fn validate_outcome(outcome: &SampleOutcome, budget: &AttackBudget) -> Result<()> {
    let ledger = &outcome.trace.ledger;
    if ledger.constraint_violations != 0 {
        return Err(Error::Eval(format!(
            "sample {}: {} constraint violations recorded",
            outcome.index, ledger.constraint_violations
        )));
    }
    if outcome.queries != ledger.attack_queries() {
        return Err(Error::Eval(format!(
            "sample {}: reported {} queries but the ledger bills {}",
            outcome.index,
            outcome.queries,
            ledger.attack_queries()
        )));
    }
    if outcome.image_iterations > budget.total_steps {
        return Err(Error::Eval(format!(
            "sample {}: {} image iterations exceed the budget {}",
            outcome.index, outcome.image_iterations, budget.total_steps
        )));
    }
    Ok(())
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Evaluates one mode over the first `config.sample_count` samples of the
/// dataset: filters to correctly-predicted samples, attacks each with its
/// own seed stream, re-validates every trace, and aggregates the ASR.
pub fn evaluate(
    config: &EvalConfig,
    surrogate: &PretrainedModel,
    victim: &dyn QueryTarget,
    dataset: &TaskDataset,
) -> Result<EvalReport> {
    config.validate()?;
    if dataset.task != config.task {
        return Err(Error::Config(format!(
            "config expects a {:?} dataset, got {:?}",
            config.task, dataset.task
        )));
    }
    if victim.task_kind() != config.task {
        return Err(Error::Config(format!(
            "victim answers {:?}, config expects {:?}",
            victim.task_kind(),
            config.task
        )));
    }
    if dataset.samples.len() < config.sample_count {
        return Err(Error::Config(format!(
            "dataset provides {} samples, config asks for {}",
            dataset.samples.len(),
            config.sample_count
        )));
    }

    let pool = &dataset.samples[..config.sample_count];
    let per_sample: Vec<Result<Option<SampleOutcome>>> = pool
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let mut session = AttackSession::open(
                victim,
                surrogate.sentence_encoder(),
                sample.image.clone(),
                sample.text.clone(),
                config.budget.clone(),
            )?;
            if !correct(session.original_prediction(), &sample.target)? {
                return Ok(None);
            }
            let seed = sample_seed(config.seed, index);
            let result = attack_with_mode(config.mode, surrogate, &mut session, seed)?;
            Ok(Some(SampleOutcome {
                index,
                status: result.status,
                queries: result.queries_used,
                image_iterations: result.image_iterations_used,
                candidate_index: result.candidate_index,
                trace: result.trace,
            }))
        })
        .collect();

    let mut outcomes = Vec::new();
    for entry in per_sample {
        if let Some(outcome) = entry? {
            validate_outcome(&outcome, &config.budget)?;
            outcomes.push(outcome);
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Eval(
            "the victim predicted no sample correctly; nothing to attack".into(),
        ));
    }

    let attempted = outcomes.len();
    let mut by_stage = StageCounts::default();
    let mut queries = 0usize;
    let mut iterations = 0usize;
    for o in &outcomes {
        match o.status {
            AttackStatus::SuccessImage => by_stage.image += 1,
            AttackStatus::SuccessText => by_stage.text += 1,
            AttackStatus::SuccessMultimodal => by_stage.multimodal += 1,
            AttackStatus::Failure => {}
        }
        queries += o.queries;
        iterations += o.image_iterations;
    }

    Ok(EvalReport {
        config: config.clone(),
        asr_percent: round2(100.0 * by_stage.total() as f64 / attempted as f64),
        attempted,
        successes_by_stage: by_stage,
        mean_queries: queries as f64 / attempted as f64,
        mean_image_iterations: iterations as f64 / attempted as f64,
        samples: outcomes,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        timestamp: now_unix(),
    })
}

/// The component ablation: all six ladder modes over the identical sample
/// set, budget, and master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    /// `(mode, ASR)` rows in ladder order.
    pub fn rows(&self) -> Vec<(EvalMode, f64)> {
        self.reports.iter().map(|r| (r.config.mode, r.asr_percent)).collect()
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>10} {:>12} {:>12}", "mode", "ASR%", "attempted", "mean_query", "mean_iters")?;
        for r in &self.reports {
            writeln!(
                f,
                "{:<12} {:>8.2} {:>10} {:>12.2} {:>12.2}",
                r.config.mode.name(),
                r.asr_percent,
                r.attempted,
                r.mean_queries,
                r.mean_image_iterations
            )?;
        }
        Ok(())
    }
}

/// Evaluates the six ablation modes on identical samples. Rows appear in
/// ladder order; every row shares the dataset slice, budget, and seed.
pub fn run_ablation(
    surrogate: &PretrainedModel,
    victim: &dyn QueryTarget,
    dataset: &TaskDataset,
    budget: &AttackBudget,
    seed: u64,
) -> Result<AblationTable> {
    let mut reports = Vec::with_capacity(EvalMode::ABLATION_LADDER.len());
    for mode in EvalMode::ABLATION_LADDER {
        let config = EvalConfig {
            mode,
            task: dataset.task,
            sample_count: dataset.samples.len(),
            budget: budget.clone(),
            seed,
        };
        reports.push(evaluate(&config, surrogate, victim, dataset)?);
    }
    Ok(AblationTable { reports })
}

/// Serializes a report to pretty-printed JSON at `path`.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Reads back a report written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
