//! Word-substitution text attack behind a semantic gate.
//!
//! The attack runs in three moves, all through the query gateway:
//!
//! 1. **Importance ranking** — each content word is masked to `<unk>` and
//!    the victim is probed once per position. Positions whose mask alone
//!    flips the prediction outrank all others; the rest are ordered by how
//!    much the mask erodes the original prediction's confidence. Probes are
//!    billed to their own ledger lane and are exempt from the semantic gate
//!    (a masked sentence is not a candidate, only a measurement).
//! 2. **Candidate planning** — for positions in importance order, the
//!    nearest vocabulary neighbours of the original word (by sentence-encoder
//!    cosine) each yield a one-word-substituted candidate sentence.
//!    Candidates that fail the gate — whole-sentence similarity to the
//!    original must *exceed* the budget's floor — are discarded without
//!    spending a query. The plan is capped at the iteration budget left
//!    after the image stage, so a later cross-search can give every
//!    surviving candidate at least one descent step.
//! 3. **Candidate queries** — surviving candidates are tried against the
//!    victim with the *clean* image, in plan order, stopping at the first
//!    flip. A run that exhausts the plan hands the candidate list back for
//!    the multimodal stage.
//!
//! Every candidate modifies exactly one position of the original sentence,
//! which keeps it inside the word-substitution allowance for any budget.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::blackbox::{AttackSession, QueryStage};
use crate::error::{Error, Result};
use crate::modelzoo::{Prediction, SentenceEncoder, TokenId, TokenSequence, Vocabulary, UNK};

/// How many embedding neighbours to consider per ranked position.
pub const DEFAULT_NEIGHBOURS: usize = 8;

/// One probed position, with the measured effect of masking it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPosition {
    /// Token index into the original sentence.
    pub position: usize,
    /// Whether masking this position alone flipped the prediction.
    pub flipped: bool,
    /// Original confidence minus confidence under the mask.
    pub confidence_drop: f64,
}

/// A gate-passing substitution candidate, ready to query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCandidate {
    /// The full candidate sentence (original with one word substituted).
    pub sequence: TokenSequence,
    /// The substituted position.
    pub position: usize,
    /// The replacement token.
    pub replacement: TokenId,
    /// Whole-sentence similarity to the original; strictly above the floor.
    pub similarity: f64,
}

/// Outcome of the text-only attack stage. Both variants carry the full
/// candidate plan so the pipeline trace can record it.
#[derive(Clone, Debug)]
pub enum TextAttackOutcome {
    /// A candidate flipped the victim on the clean image.
    Success {
        adversarial: TokenSequence,
        prediction: Prediction,
        candidates: Vec<TextCandidate>,
        /// Index of the flipping candidate within `candidates`.
        winning_index: usize,
    },
    /// No candidate flipped; the plan is handed on for cross-search.
    Exhausted { candidates: Vec<TextCandidate> },
}

/// Probes every content-word position by masking it to `<unk>` and returns
/// the positions sorted most-important first: flips before non-flips, then
/// larger confidence drops, then left to right. Probes bill to the probe
/// lane of the ledger, not to attack queries.
pub fn rank_word_importance(session: &mut AttackSession<'_>) -> Result<Vec<RankedPosition>> {
    let vocab = Vocabulary::shared();
    let text = session.original_text().clone();
    let image = session.original_image().clone();
    let base_confidence = session.original_prediction().confidence();

    let mut ranked = Vec::new();
    for (position, &id) in text.ids().iter().enumerate() {
        if !vocab.is_content_word(id) {
            continue;
        }
        let masked = text.substitute(position, UNK)?;
        let probe = session.query(QueryStage::TextProbe, &image, &masked)?;
        ranked.push(RankedPosition {
            position,
            flipped: session.flips(&probe),
            confidence_drop: base_confidence - probe.confidence(),
        });
    }
    ranked.sort_by(|a, b| {
        b.flipped
            .cmp(&a.flipped)
            .then(
                b.confidence_drop
                    .partial_cmp(&a.confidence_drop)
                    .unwrap_or(Ordering::Equal),
            )
            .then(a.position.cmp(&b.position))
    });
    Ok(ranked)
}

/// Cosine similarity of two plain vectors, zero when either has no norm.
fn vector_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` word tokens closest to `original` in the encoder's embedding,
/// by cosine, excluding `original` itself and every non-word token. Ties
/// break toward the lower token id; the result is deterministic.
pub fn generate_substitutions(
    encoder: &SentenceEncoder,
    original: TokenId,
    k: usize,
) -> Result<Vec<TokenId>> {
    let vocab = Vocabulary::shared();
    if !vocab.is_word(original) {
        return Err(Error::Input(format!(
            "token {original} is not a substitutable word"
        )));
    }
    let anchor = encoder.word_vector(original)?;
    let mut scored: Vec<(TokenId, f64)> = Vec::new();
    for id in vocab.word_ids() {
        if id == original {
            continue;
        }
        let v = encoder.word_vector(id)?;
        scored.push((id, vector_cosine(&anchor, &v)));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// Whole-sentence similarity under the session's sentence encoder — the
/// same quantity the query gateway gates on.
pub fn semantic_similarity(
    encoder: &SentenceEncoder,
    a: &TokenSequence,
    b: &TokenSequence,
) -> Result<f64> {
    encoder.similarity(a, b)
}

/// Builds the gate-passing candidate plan: positions in importance order,
/// neighbours in similarity order, keeping only candidates whose sentence
/// similarity strictly exceeds the budget floor, up to `cap` entries.
pub fn propose_candidates(
    session: &AttackSession<'_>,
    ranking: &[RankedPosition],
    neighbours: usize,
    cap: usize,
) -> Result<Vec<TextCandidate>> {
    let text = session.original_text();
    let floor = session.budget().sigma_s;
    let encoder = session.sentence_encoder();
    let mut plan = Vec::new();
    if cap == 0 {
        return Ok(plan);
    }
    'positions: for ranked in ranking {
        let original_id = text.ids()[ranked.position];
        for replacement in generate_substitutions(encoder, original_id, neighbours)? {
            let sequence = text.substitute(ranked.position, replacement)?;
            let similarity = encoder.similarity(text, &sequence)?;
            if similarity > floor {
                plan.push(TextCandidate {
                    sequence,
                    position: ranked.position,
                    replacement,
                    similarity,
                });
                if plan.len() == cap {
                    break 'positions;
                }
            }
        }
    }
    Ok(plan)
}

/// Runs the full text-only attack: rank, plan, and query candidates with
/// the clean image until one flips or the plan is exhausted.
pub fn text_attack(session: &mut AttackSession<'_>) -> Result<TextAttackOutcome> {
    let image = session.original_image().clone();
    let ranking = rank_word_importance(session)?;
    let budget = session.budget();
    let cap = budget.total_steps - budget.image_steps;
    let candidates = propose_candidates(session, &ranking, DEFAULT_NEIGHBOURS, cap)?;

    for (index, candidate) in candidates.iter().enumerate() {
        let prediction = session.query(QueryStage::TextCandidate, &image, &candidate.sequence)?;
        if session.flips(&prediction) {
            let adversarial = candidate.sequence.clone();
            return Ok(TextAttackOutcome::Success {
                adversarial,
                prediction,
                candidates,
                winning_index: index,
            });
        }
    }
    Ok(TextAttackOutcome::Exhausted { candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::QueryTarget;
    use crate::bsa::AttackBudget;
    use crate::modelzoo::{build_pretrained, ImageTensor, ModelConfig, TaskKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> SentenceEncoder {
        build_pretrained(&ModelConfig::default(), 17)
            .unwrap()
            .sentence_encoder()
    }

    fn test_image() -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(32, 32, 3, data).unwrap()
    }

    /// Classifies by whether a trigger word is present; masking the watched
    /// position erodes confidence.
    struct TriggerTarget {
        trigger: TokenId,
        watched: usize,
    }

    impl QueryTarget for TriggerTarget {
        fn predict(&self, _image: &ImageTensor, text: &TokenSequence) -> Result<Prediction> {
            let ids = text.ids();
            if ids.contains(&self.trigger) {
                return Ok(Prediction::Class {
                    label: 1,
                    confidence: 0.99,
                });
            }
            let masked_watch = ids.get(self.watched) == Some(&UNK);
            Ok(Prediction::Class {
                label: 0,
                confidence: if masked_watch { 0.55 } else { 0.9 },
            })
        }

        fn task_kind(&self) -> TaskKind {
            TaskKind::Classification
        }
    }

    /// Never changes its mind, whatever it is asked.
    struct StubbornTarget;

    impl QueryTarget for StubbornTarget {
        fn predict(&self, _image: &ImageTensor, _text: &TokenSequence) -> Result<Prediction> {
            Ok(Prediction::Class {
                label: 0,
                confidence: 0.8,
            })
        }

        fn task_kind(&self) -> TaskKind {
            TaskKind::Classification
        }
    }

    fn open_session<'a>(
        target: &'a dyn QueryTarget,
        text: &str,
        budget: AttackBudget,
    ) -> AttackSession<'a> {
        let vocab = Vocabulary::shared();
        AttackSession::open(
            target,
            encoder(),
            test_image(),
            vocab.tokenize(text).unwrap(),
            budget,
        )
        .unwrap()
    }

    #[test]
    fn ranking_probes_each_content_word_once_and_sorts_flips_first() {
        let vocab = Vocabulary::shared();
        // "the red circle is big" — content words: red(1), circle(2), big(4).
        let text = "the red circle is big";
        let ids = vocab.tokenize(text).unwrap();
        // The trigger is the mask token itself, so every probe flips.
        let target = TriggerTarget {
            trigger: UNK,
            watched: 4,
        };
        let mut session = open_session(&target, text, AttackBudget::default());
        let ranking = rank_word_importance(&mut session).unwrap();

        let content: Vec<usize> = ids
            .ids()
            .iter()
            .enumerate()
            .filter(|(_, &id)| vocab.is_content_word(id))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ranking.len(), content.len());
        assert_eq!(session.ledger().text_probes, content.len());
        assert_eq!(session.ledger().attack_queries(), 0);

        // Every probe carries a mask, so every probe flips to label 1.
        assert!(ranking.iter().all(|r| r.flipped));
    }

    #[test]
    fn ranking_orders_by_confidence_drop_when_nothing_flips() {
        // Trigger never appears (position 0 is "the", never masked);
        // masking position 4 ("big") costs 0.35 confidence, others 0.
        let text = "the red circle is big";
        let target = TriggerTarget {
            trigger: 9999,
            watched: 4,
        };
        let mut session = open_session(&target, text, AttackBudget::default());
        let ranking = rank_word_importance(&mut session).unwrap();
        assert!(!ranking[0].flipped);
        assert_eq!(ranking[0].position, 4);
        assert!(ranking[0].confidence_drop > ranking[1].confidence_drop);
        // Remaining positions tie at zero drop and stay left to right.
        let rest: Vec<usize> = ranking[1..].iter().map(|r| r.position).collect();
        assert_eq!(rest, vec![1, 2]);
    }

    #[test]
    fn substitutions_match_a_brute_force_oracle() {
        let enc = encoder();
        let vocab = Vocabulary::shared();
        let original = vocab.id_of("red").unwrap();
        let got = generate_substitutions(&enc, original, 8).unwrap();
        assert_eq!(got.len(), 8);
        assert!(!got.contains(&original));
        assert!(got.iter().all(|&id| vocab.is_word(id)));

        // Oracle: score every other word independently and sort.
        let anchor = enc.word_vector(original).unwrap();
        let mut oracle: Vec<(TokenId, f64)> = vocab
            .word_ids()
            .filter(|&id| id != original)
            .map(|id| (id, vector_cosine(&anchor, &enc.word_vector(id).unwrap())))
            .collect();
        oracle.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(a.0.cmp(&b.0))
        });
        let expect: Vec<TokenId> = oracle[..8].iter().map(|(id, _)| *id).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn substitutions_reject_non_words() {
        let enc = encoder();
        assert!(generate_substitutions(&enc, UNK, 4).is_err());
    }

    /// The default similarity floor of 0.95 is calibrated for sentence
    /// encoders with synonym structure; with this laboratory's small
    /// vocabulary a single-word swap of a five-word sentence lands near
    /// 0.8, so tests that need a live plan lower the floor.
    fn permissive_budget() -> AttackBudget {
        AttackBudget {
            sigma_s: 0.6,
            ..AttackBudget::default()
        }
    }

    #[test]
    fn candidates_pass_the_gate_modify_one_position_and_respect_the_cap() {
        let text = "the red circle is big";
        let target = StubbornTarget;
        let mut session = open_session(&target, text, permissive_budget());
        let ranking = rank_word_importance(&mut session).unwrap();
        let cap = 5;
        let plan = propose_candidates(&session, &ranking, DEFAULT_NEIGHBOURS, cap).unwrap();

        assert!(plan.len() <= cap);
        assert!(!plan.is_empty(), "a 0.6 floor should admit some candidates");
        let original = session.original_text().clone();
        for candidate in &plan {
            assert!(candidate.similarity > session.budget().sigma_s);
            let diff = original.diff_positions(&candidate.sequence);
            assert_eq!(diff, vec![candidate.position]);
        }
    }

    #[test]
    fn an_impossible_gate_empties_the_plan() {
        let text = "the red circle is big";
        let target = StubbornTarget;
        let budget = AttackBudget {
            sigma_s: 1.0,
            ..AttackBudget::default()
        };
        let mut session = open_session(&target, text, budget);
        let ranking = rank_word_importance(&mut session).unwrap();
        let plan = propose_candidates(&session, &ranking, DEFAULT_NEIGHBOURS, 10).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn text_attack_stops_at_the_first_flipping_candidate() {
        let vocab = Vocabulary::shared();
        let text = "the red circle is big";
        // Victim flips whenever the sentence contains the nearest embedding
        // neighbour of "red", which the planner will try early.
        let red = vocab.id_of("red").unwrap();
        let neighbour = generate_substitutions(&encoder(), red, 1).unwrap()[0];
        let target = TriggerTarget {
            trigger: neighbour,
            watched: 1,
        };
        let mut session = open_session(&target, text, permissive_budget());
        let outcome = text_attack(&mut session).unwrap();

        match outcome {
            TextAttackOutcome::Success { adversarial, .. } => {
                assert!(adversarial.ids().contains(&neighbour));
                let diff = session.original_text().diff_positions(&adversarial);
                assert_eq!(diff.len(), 1);
            }
            TextAttackOutcome::Exhausted { .. } => panic!("expected a flip"),
        }
        // Probes billed separately; at least one candidate query was spent.
        assert!(session.ledger().text_candidates >= 1);
        assert_eq!(
            session.ledger().attack_queries(),
            session.ledger().text_candidates
        );
    }

    #[test]
    fn text_attack_exhausts_against_a_stubborn_victim() {
        let text = "the red circle is big";
        let target = StubbornTarget;
        let mut session = open_session(&target, text, permissive_budget());
        let budget_cap =
            session.budget().total_steps - session.budget().image_steps;
        let outcome = text_attack(&mut session).unwrap();
        match outcome {
            TextAttackOutcome::Exhausted { candidates } => {
                assert!(!candidates.is_empty());
                assert!(candidates.len() <= budget_cap);
                assert_eq!(session.ledger().text_candidates, candidates.len());
            }
            TextAttackOutcome::Success { .. } => panic!("stubborn victim cannot flip"),
        }
        assert_eq!(session.ledger().constraint_violations, 0);
    }
}
