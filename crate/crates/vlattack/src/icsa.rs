//! The multimodal level: iteration planning, the cross-search loop, and the
//! three-stage pipeline entry point.
//!
//! The pipeline spends a total image-iteration budget `N` across two image
//! phases. Stage 1 spends `N_s` iterations on an image-only attack and
//! queries once. Stage 2 spends no iterations: it probes word importance,
//! then queries gate-passing substitution candidates against the clean
//! image. Stage 3 splits the remaining `N − N_s` iterations across the `K`
//! best candidates — `K = min(|candidates|, N − N_s)`, each receiving
//! `floor((N − N_s)/K)` iterations — re-querying the victim before and
//! after each candidate's descent burst. The image perturbation (and any
//! momentum state) carries over from stage 1 through every candidate; it is
//! never re-initialised. With no candidates at all, stage 3 degenerates to
//! `N − N_s` extra image-only iterations and a single query.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{AttackSession, QueryLedger, QueryStage};
use crate::bsa::{init_perturbation, AttackBudget, BsaObjective, Descent, LossTerm, Optimizer};
use crate::error::{Error, Result};
use crate::modelzoo::{ImageTensor, Prediction, PretrainedModel, TokenSequence};
use crate::text_attack::{text_attack, TextAttackOutcome, TextCandidate};

/// How stage 3 will spend the remaining iteration budget.
#[derive(Clone, Debug)]
pub struct SearchPlan {
    /// Number of candidates that will receive cross-search attention (`K`).
    pub multimodal_steps: usize,
    /// Image iterations per candidate (`N_k`); zero when `K` is zero.
    pub iterations_per_candidate: usize,
    /// The top-`K` candidates, highest similarity first; ties keep their
    /// stage-2 order (importance-major, substitution-minor).
    pub ranked: Vec<TextCandidate>,
    /// For each ranked entry, its index in the stage-2 candidate list.
    pub source_indices: Vec<usize>,
}

/// Splits the post-stage-1 iteration budget across the candidate list.
/// An empty list yields the degenerate plan (`K = 0`).
pub fn compute_plan(candidates: Vec<TextCandidate>, budget: &AttackBudget) -> SearchPlan {
    let pool = budget.total_steps - budget.image_steps;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // Stable by construction: equal similarities keep stage-2 order.
    order.sort_by(|&a, &b| {
        candidates[b]
            .similarity
            .partial_cmp(&candidates[a].similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let k = candidates.len().min(pool);
    order.truncate(k);
    let ranked: Vec<TextCandidate> = order.iter().map(|&i| candidates[i].clone()).collect();
    SearchPlan {
        multimodal_steps: k,
        iterations_per_candidate: if k == 0 { 0 } else { pool / k },
        ranked,
        source_indices: order,
    }
}

impl SearchPlan {
    /// Stage 3 may never exceed the budget remaining after stage 1.
    pub fn validate_for(&self, budget: &AttackBudget) -> Result<()> {
        let pool = budget.total_steps - budget.image_steps;
        if self.multimodal_steps != self.ranked.len()
            || self.ranked.len() != self.source_indices.len()
        {
            return Err(Error::Config("search plan is internally inconsistent".into()));
        }
        if self.multimodal_steps > pool {
            return Err(Error::Config(format!(
                "plan wants {} candidates but only {pool} iterations remain",
                self.multimodal_steps
            )));
        }
        if self.multimodal_steps > 0
            && self.iterations_per_candidate != pool / self.multimodal_steps
        {
            return Err(Error::Config("per-candidate iteration count is wrong".into()));
        }
        if self.multimodal_steps * self.iterations_per_candidate > pool {
            return Err(Error::Config("plan exceeds the iteration budget".into()));
        }
        Ok(())
    }
}

/// Where in the pipeline an attack concluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackStatus {
    /// Stage 1: the perturbed image alone flipped the victim.
    SuccessImage,
    /// Stage 2: a substituted sentence flipped the victim on the clean image.
    SuccessText,
    /// Stage 3: a perturbed image and candidate sentence flipped together.
    SuccessMultimodal,
    /// The full budget was exhausted without a flip.
    Failure,
}

impl AttackStatus {
    pub fn is_success(self) -> bool {
        self != AttackStatus::Failure
    }
}

/// One stage-2 candidate as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub position: usize,
    pub similarity: f64,
}

/// Per-stage log of one full attack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Objective value before each stage-1 step, plus the final value.
    pub stage1_losses: Vec<f64>,
    /// Importance probes spent in stage 2.
    pub probes: usize,
    /// Gate-passing candidates in stage-2 query order.
    pub candidates: Vec<CandidateRecord>,
    /// Stage-3 ranking: indices into `candidates`, similarity-descending.
    pub stage3_order: Vec<usize>,
    /// Objective value before each stage-3 step.
    pub stage3_losses: Vec<f64>,
    /// Final query accounting for the whole attack.
    pub ledger: QueryLedger,
}

/// Outcome of one full attack on one sample.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub status: AttackStatus,
    /// The flipping pair; absent on failure.
    pub adversarial: Option<(ImageTensor, TokenSequence)>,
    /// The victim's answer to the flipping pair; absent on failure.
    pub flipped_prediction: Option<Prediction>,
    /// Image-descent iterations actually spent, across stages 1 and 3.
    pub image_iterations_used: usize,
    /// Attack queries spent (probes excluded; see the ledger in the trace).
    pub queries_used: usize,
    /// Which ranked candidate succeeded, when the status is multimodal.
    pub candidate_index: Option<usize>,
    pub trace: AttackTrace,
}

/// What the cross-search loop reports back to the pipeline driver.
pub struct CrossSearch {
    /// The flipping pair, its prediction, and the ranked-candidate index;
    /// `None` if the plan was exhausted.
    pub flipped: Option<(ImageTensor, TokenSequence, Prediction, Option<usize>)>,
    /// Iterations spent inside stage 3.
    pub iterations: usize,
    /// Objective value before each stage-3 step.
    pub losses: Vec<f64>,
}

/// Runs stage 3 from the stage-1 image. The descent state is the same one
/// stage 1 used, so momentum (when enabled) flows through; the perturbation
/// itself carries across candidates and is never re-initialised.
pub fn icsa_run(
    surrogate: &PretrainedModel,
    session: &mut AttackSession<'_>,
    start: ImageTensor,
    plan: &SearchPlan,
    descent: &mut Descent,
    term: LossTerm,
) -> Result<CrossSearch> {
    let budget = session.budget().clone();
    plan.validate_for(&budget)?;
    let original_image = session.original_image().clone();
    let original_text = session.original_text().clone();
    let anchor = BsaObjective::new(surrogate, &original_image, &original_text, term)?;

    let mut current = start;
    let mut iterations = 0;
    let mut losses = Vec::new();

    if plan.multimodal_steps == 0 {
        // Degenerate path: pure image attack for the rest of the budget.
        let extra = budget.total_steps - budget.image_steps;
        for _ in 0..extra {
            let (loss, next) = descent.step(&anchor, &original_image, &current, &budget)?;
            losses.push(loss);
            current = next;
            iterations += 1;
        }
        let prediction = session.query(QueryStage::Multimodal, &current, &original_text)?;
        let flipped = session
            .flips(&prediction)
            .then(|| (current, original_text, prediction, None));
        return Ok(CrossSearch {
            flipped,
            iterations,
            losses,
        });
    }

    for (rank, candidate) in plan.ranked.iter().enumerate() {
        let prediction = session.query(QueryStage::Multimodal, &current, &candidate.sequence)?;
        if session.flips(&prediction) {
            return Ok(CrossSearch {
                flipped: Some((current, candidate.sequence.clone(), prediction, Some(rank))),
                iterations,
                losses,
            });
        }
        // Descend on the candidate pair against the clean-pair anchor.
        let objective = anchor.with_text(&candidate.sequence);
        for _ in 0..plan.iterations_per_candidate {
            let (loss, next) = descent.step(&objective, &original_image, &current, &budget)?;
            losses.push(loss);
            current = next;
            iterations += 1;
        }
        let prediction = session.query(QueryStage::Multimodal, &current, &candidate.sequence)?;
        if session.flips(&prediction) {
            return Ok(CrossSearch {
                flipped: Some((current, candidate.sequence.clone(), prediction, Some(rank))),
                iterations,
                losses,
            });
        }
    }

    Ok(CrossSearch {
        flipped: None,
        iterations,
        losses,
    })
}

/// How far down the pipeline a run is allowed to go. Each depth executes
/// the shallower depths' stages verbatim before its own — with the same
/// seed, a success at a shallow depth is therefore also a success at every
/// deeper one (the containment property the ablation ladder relies on).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineDepth {
    /// Stage 1 only: image attack, one query.
    ImageOnly,
    /// Stages 1–2: add the text attack on the clean image.
    WithText,
    /// Stages 1–2, then query each ranked candidate paired with the frozen
    /// stage-1 image — no further image updates.
    WithPairQueries,
    /// All three stages, including the cross-search.
    Full,
}

/// Runs the pipeline to the requested depth. The caller opens the session
/// on a correctly-predicted sample; the seed drives only the image
/// initialisation.
pub fn run_pipeline(
    surrogate: &PretrainedModel,
    session: &mut AttackSession<'_>,
    term: LossTerm,
    optimizer: Optimizer,
    seed: u64,
    depth: PipelineDepth,
) -> Result<AttackResult> {
    let budget = session.budget().clone();
    let original_image = session.original_image().clone();
    let original_text = session.original_text().clone();

    let mut trace = AttackTrace::default();
    let finish = |status: AttackStatus,
                  adversarial: Option<(ImageTensor, TokenSequence)>,
                  flipped_prediction: Option<Prediction>,
                  iterations: usize,
                  candidate_index: Option<usize>,
                  mut trace: AttackTrace,
                  session: &AttackSession<'_>| {
        trace.ledger = session.ledger().clone();
        let queries_used = trace.ledger.attack_queries();
        Ok(AttackResult {
            status,
            adversarial,
            flipped_prediction,
            image_iterations_used: iterations,
            queries_used,
            candidate_index,
            trace,
        })
    };

    // Stage 1 — image-only attack, then one query. This reproduces the
    // standalone image attack step for step, so a run that flips here is
    // exactly a single-modal success.
    let objective = BsaObjective::new(surrogate, &original_image, &original_text, term)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = init_perturbation(&original_image, &budget, &mut rng);
    let mut descent = Descent::new(optimizer);
    for _ in 0..budget.image_steps {
        let (loss, next) = descent.step(&objective, &original_image, &current, &budget)?;
        trace.stage1_losses.push(loss);
        current = next;
    }
    trace.stage1_losses.push(objective.loss(&current)?);
    let iterations = budget.image_steps;

    let prediction = session.query(QueryStage::Image, &current, &original_text)?;
    if session.flips(&prediction) {
        return finish(
            AttackStatus::SuccessImage,
            Some((current, original_text)),
            Some(prediction),
            iterations,
            None,
            trace,
            session,
        );
    }
    if depth == PipelineDepth::ImageOnly {
        return finish(AttackStatus::Failure, None, None, iterations, None, trace, session);
    }

    // Stage 2 — text-only attack on the clean image.
    let outcome = text_attack(session)?;
    trace.probes = session.ledger().text_probes;
    let candidates = match outcome {
        TextAttackOutcome::Success {
            adversarial,
            prediction,
            candidates,
            ..
        } => {
            trace.candidates = candidate_records(&candidates);
            return finish(
                AttackStatus::SuccessText,
                Some((original_image, adversarial)),
                Some(prediction),
                iterations,
                None,
                trace,
                session,
            );
        }
        TextAttackOutcome::Exhausted { candidates } => candidates,
    };
    trace.candidates = candidate_records(&candidates);
    if depth == PipelineDepth::WithText {
        return finish(AttackStatus::Failure, None, None, iterations, None, trace, session);
    }

    let plan = compute_plan(candidates, &budget);
    trace.stage3_order = plan.source_indices.clone();

    if depth == PipelineDepth::WithPairQueries {
        // Pair queries against the frozen stage-1 image, best-ranked first.
        for (rank, candidate) in plan.ranked.iter().enumerate() {
            let prediction =
                session.query(QueryStage::Multimodal, &current, &candidate.sequence)?;
            if session.flips(&prediction) {
                return finish(
                    AttackStatus::SuccessMultimodal,
                    Some((current, candidate.sequence.clone())),
                    Some(prediction),
                    iterations,
                    Some(rank),
                    trace,
                    session,
                );
            }
        }
        return finish(AttackStatus::Failure, None, None, iterations, None, trace, session);
    }

    // Stage 3 — cross-search over the ranked candidates.
    let cross = icsa_run(surrogate, session, current, &plan, &mut descent, term)?;
    let iterations = iterations + cross.iterations;
    trace.stage3_losses = cross.losses;

    match cross.flipped {
        Some((image, text, prediction, rank)) => finish(
            AttackStatus::SuccessMultimodal,
            Some((image, text)),
            Some(prediction),
            iterations,
            rank,
            trace,
            session,
        ),
        None => finish(AttackStatus::Failure, None, None, iterations, None, trace, session),
    }
}

/// The full three-stage pipeline — [`run_pipeline`] at [`PipelineDepth::Full`].
pub fn vlattack(
    surrogate: &PretrainedModel,
    session: &mut AttackSession<'_>,
    term: LossTerm,
    optimizer: Optimizer,
    seed: u64,
) -> Result<AttackResult> {
    run_pipeline(surrogate, session, term, optimizer, seed, PipelineDepth::Full)
}

fn candidate_records(candidates: &[TextCandidate]) -> Vec<CandidateRecord> {
    candidates
        .iter()
        .map(|c| CandidateRecord {
            text: c.sequence.raw_text().to_string(),
            position: c.position,
            similarity: c.similarity,
        })
        .collect()
}
