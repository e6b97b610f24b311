//! The only gateway to a victim model.
//!
//! Attack code never touches a [`FineTunedTask`]'s parameters, gradients,
//! or raw forward pass. It opens an [`AttackSession`] around the original
//! `(image, text)` pair and sends every query through
//! [`AttackSession::query`], which:
//!
//! 1. re-checks the attack's own constraints — the image must sit inside
//!    the ℓ∞ ball around the original and inside the pixel range, and any
//!    modified text must stay within the word allowance and above the
//!    semantic similarity gate — failing *hard* on violation, because a
//!    violating query is a bug in attack code, not a recoverable condition;
//! 2. bills the query to a per-stage ledger;
//! 3. returns only the prediction and its confidence score.
//!
//! Importance probes are the one deliberate exception to the similarity
//! gate: ranking a word's importance masks it out with `<unk>`, which by
//! design changes the sentence's meaning. Probes are billed to their own
//! ledger lane and still obey the image and word-count constraints.

use serde::{Deserialize, Serialize};

use crate::bsa::AttackBudget;
use crate::error::{Error, Result};
use crate::modelzoo::{
    FineTunedTask, ImageTensor, Prediction, SentenceEncoder, TaskKind, TokenSequence,
};

/// Axis-aligned box with `x1 ≤ x2`, `y1 ≤ y2`, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Validating constructor: corners must be finite and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Input("box coordinates must be finite".into()));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Input(format!(
                "box corners are not ordered: ({x1}, {y1}) .. ({x2}, {y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners, normalising their order.
    pub fn from_corners(ax: f64, ay: f64, bx: f64, by: f64) -> Self {
        BoundingBox {
            x1: ax.min(bx),
            y1: ay.min(by),
            x2: ax.max(bx),
            y2: ay.max(by),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Intersection-over-union of two boxes. Symmetric, always in `[0, 1]`;
/// disjoint or zero-area inputs yield exactly `0`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Task-aware success predicate: does `prediction` count as adversarial
/// relative to the original prediction?
///
/// - classification: the label changed;
/// - generation: the token sequences differ at any position or in length;
/// - grounding: the boxes overlap at IoU ≤ 0.5.
///
/// Never true when `prediction == original`.
pub fn is_adversarial(prediction: &Prediction, original: &Prediction, task: TaskKind) -> bool {
    match (task, prediction, original) {
        (
            TaskKind::Classification,
            Prediction::Class { label: a, .. },
            Prediction::Class { label: b, .. },
        ) => a != b,
        (
            TaskKind::Generation,
            Prediction::Sequence { tokens: a, .. },
            Prediction::Sequence { tokens: b, .. },
        ) => a != b,
        (TaskKind::Grounding, Prediction::Box { bbox: a, .. }, Prediction::Box { bbox: b, .. }) => {
            iou(a, b) <= 0.5
        }
        _ => {
            debug_assert!(false, "prediction kinds do not match the task");
            true
        }
    }
}

/// Which pipeline stage issued a query; determines the ledger lane and
/// whether the similarity gate applies (it does everywhere except probes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryStage {
    /// Image-only first stage (perturbed image, original text).
    Image,
    /// Word-importance probe (original image, one word masked to `<unk>`).
    TextProbe,
    /// Substitution candidate test (original image, one word substituted).
    TextCandidate,
    /// Cross-search stage (perturbed image and substituted text together).
    Multimodal,
}

/// Query counts per stage plus the violation counter, which must stay zero
/// over any healthy attack run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    /// All queries answered, probes included.
    pub total: usize,
    pub image_stage: usize,
    pub text_probes: usize,
    pub text_candidates: usize,
    pub multimodal_stage: usize,
    /// Queries rejected for violating the attack's own constraints.
    pub constraint_violations: usize,
}

impl QueryLedger {
    /// Queries under the attack's accounting: stage-1, candidate, and
    /// cross-search queries. Importance probes are tracked separately.
    pub fn attack_queries(&self) -> usize {
        self.image_stage + self.text_candidates + self.multimodal_stage
    }
}

/// One journal line per answered query, kept so tests can audit that every
/// query respected the constraints it claimed to.
#[derive(Clone, Debug, Serialize)]
pub struct QueryRecord {
    pub stage: QueryStage,
    /// ℓ∞ distance of the queried image from the original.
    pub image_distance: f64,
    /// Number of word positions differing from the original text.
    pub modified_positions: usize,
    /// Sentence similarity to the original text; `None` for unmodified text.
    pub gamma: Option<f64>,
    /// Whether the answer counted as adversarial.
    pub flipped: bool,
}

/// Anything that can stand behind the gateway. The crate's victims are
/// [`FineTunedTask`]s; tests substitute fixed-output stand-ins.
pub trait QueryTarget: Sync {
    fn predict(&self, image: &ImageTensor, text: &TokenSequence) -> Result<Prediction>;
    fn task_kind(&self) -> TaskKind;
}

impl QueryTarget for FineTunedTask {
    fn predict(&self, image: &ImageTensor, text: &TokenSequence) -> Result<Prediction> {
        FineTunedTask::predict(self, image, text)
    }

    fn task_kind(&self) -> TaskKind {
        self.task_kind
    }
}

/// Multiplicative + absolute slack when re-checking the ball constraint:
/// admits rounding of at most a few ulps, nothing more.
fn exceeds(distance: f64, radius: f64) -> bool {
    distance > radius * (1.0 + 1e-12) + 1e-18
}

/// A per-example attack session: owns the originals, the budget, the
/// ledger, and the query journal.
pub struct AttackSession<'a> {
    target: &'a dyn QueryTarget,
    encoder: SentenceEncoder,
    original_image: ImageTensor,
    original_text: TokenSequence,
    original_prediction: Prediction,
    budget: AttackBudget,
    ledger: QueryLedger,
    journal: Vec<QueryRecord>,
}

impl<'a> AttackSession<'a> {
    /// Opens a session around the clean pair. The clean prediction is read
    /// once here — callers use it to verify the victim is correct before
    /// attacking — and is not billed to the attack's ledger.
    pub fn open(
        target: &'a dyn QueryTarget,
        encoder: SentenceEncoder,
        image: ImageTensor,
        text: TokenSequence,
        budget: AttackBudget,
    ) -> Result<Self> {
        budget.validate()?;
        let original_prediction = target.predict(&image, &text)?;
        Ok(AttackSession {
            target,
            encoder,
            original_image: image,
            original_text: text,
            original_prediction,
            budget,
            ledger: QueryLedger::default(),
            journal: Vec::new(),
        })
    }

    pub fn original_image(&self) -> &ImageTensor {
        &self.original_image
    }

    pub fn original_text(&self) -> &TokenSequence {
        &self.original_text
    }

    pub fn original_prediction(&self) -> &Prediction {
        &self.original_prediction
    }

    pub fn budget(&self) -> &AttackBudget {
        &self.budget
    }

    pub fn task_kind(&self) -> TaskKind {
        self.target.task_kind()
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn journal(&self) -> &[QueryRecord] {
        &self.journal
    }

    pub fn sentence_encoder(&self) -> &SentenceEncoder {
        &self.encoder
    }

    /// Whether a prediction counts as adversarial against this session's
    /// original.
    pub fn flips(&self, prediction: &Prediction) -> bool {
        is_adversarial(prediction, &self.original_prediction, self.target.task_kind())
    }

    /// Sends one query to the victim after re-validating every constraint
    /// the attack is bound by. A violation increments the violation counter
    /// and returns a hard error — it means the attack code is buggy.
    pub fn query(
        &mut self,
        stage: QueryStage,
        image: &ImageTensor,
        text: &TokenSequence,
    ) -> Result<Prediction> {
        let violation = |s: &mut Self, msg: String| {
            s.ledger.constraint_violations += 1;
            Err(Error::Constraint(msg))
        };

        if image.dims() != self.original_image.dims() {
            return violation(self, "queried image has the wrong shape".into());
        }
        if let Some(bad) = image
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return violation(self, format!("queried pixel {bad} outside [0, 1]"));
        }
        let image_distance = image.linf_distance(&self.original_image);
        if exceeds(image_distance, self.budget.sigma_i) {
            return violation(
                self,
                format!(
                    "queried image at ℓ∞ distance {image_distance} exceeds radius {}",
                    self.budget.sigma_i
                ),
            );
        }

        let modified = self.original_text.diff_positions(text);
        if modified.len() > self.budget.max_modified_words {
            return violation(
                self,
                format!(
                    "queried text modifies {} positions, allowance is {}",
                    modified.len(),
                    self.budget.max_modified_words
                ),
            );
        }
        let gamma = if modified.is_empty() {
            None
        } else {
            let g = self.encoder.similarity(&self.original_text, text)?;
            // Probes mask a word out to measure its importance; semantic
            // drift is the point, so the gate does not apply to them.
            if stage != QueryStage::TextProbe && g <= self.budget.sigma_s {
                return violation(
                    self,
                    format!(
                        "queried text similarity {g} does not exceed the gate {}",
                        self.budget.sigma_s
                    ),
                );
            }
            Some(g)
        };

        let prediction = self.target.predict(image, text)?;
        self.ledger.total += 1;
        match stage {
            QueryStage::Image => self.ledger.image_stage += 1,
            QueryStage::TextProbe => self.ledger.text_probes += 1,
            QueryStage::TextCandidate => self.ledger.text_candidates += 1,
            QueryStage::Multimodal => self.ledger.multimodal_stage += 1,
        }
        self.journal.push(QueryRecord {
            stage,
            image_distance,
            modified_positions: modified.len(),
            gamma,
            flipped: self.flips(&prediction),
        });
        Ok(prediction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{build_pretrained, ModelConfig, ModelStructure, Vocabulary};
    use proptest::prelude::*;

    #[test]
    fn iou_matches_the_worked_example() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let expected = 1.0 / 7.0;
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_handles_disjoint_degenerate_and_identical_boxes() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);

        let line = BoundingBox::new(0.0, 0.0, 0.0, 5.0).unwrap();
        assert_eq!(iou(&line, &line), 0.0, "zero-area boxes have IoU 0");
        assert_eq!(iou(&a, &line), 0.0);

        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_constructors_validate_and_normalise() {
        assert!(BoundingBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        let b = BoundingBox::from_corners(3.0, 4.0, 1.0, 2.0);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (1.0, 2.0, 3.0, 4.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn iou_is_symmetric_and_bounded(
            ax1 in 0.0f64..30.0, aw in 0.0f64..10.0, ay1 in 0.0f64..30.0, ah in 0.0f64..10.0,
            bx1 in 0.0f64..30.0, bw in 0.0f64..10.0, by1 in 0.0f64..30.0, bh in 0.0f64..10.0,
        ) {
            let a = BoundingBox::new(ax1, ay1, ax1 + aw, ay1 + ah).unwrap();
            let b = BoundingBox::new(bx1, by1, bx1 + bw, by1 + bh).unwrap();
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn adversarial_predicate_is_irreflexive_and_task_aware() {
        let c = Prediction::Class { label: 3, confidence: 0.9 };
        assert!(!is_adversarial(&c, &c, TaskKind::Classification));
        let c2 = Prediction::Class { label: 4, confidence: 0.2 };
        assert!(is_adversarial(&c2, &c, TaskKind::Classification));

        let s = Prediction::Sequence { tokens: vec![41, 45], confidence: 0.8 };
        assert!(!is_adversarial(&s, &s, TaskKind::Generation));
        let longer = Prediction::Sequence { tokens: vec![41, 45, 49], confidence: 0.8 };
        assert!(is_adversarial(&longer, &s, TaskKind::Generation), "length change flips");
        let swapped = Prediction::Sequence { tokens: vec![45, 41], confidence: 0.8 };
        assert!(is_adversarial(&swapped, &s, TaskKind::Generation));

        let near = Prediction::Box {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            confidence: 0.7,
        };
        assert!(!is_adversarial(&near, &near, TaskKind::Grounding));
        let shifted = Prediction::Box {
            bbox: BoundingBox::new(9.0, 9.0, 19.0, 19.0).unwrap(),
            confidence: 0.7,
        };
        assert!(is_adversarial(&shifted, &near, TaskKind::Grounding), "IoU 1/199 <= 0.5");
        let overlapping = Prediction::Box {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 11.0).unwrap(),
            confidence: 0.7,
        };
        assert!(
            !is_adversarial(&overlapping, &near, TaskKind::Grounding),
            "IoU 10/11 > 0.5 keeps the answer correct"
        );
    }

    /// Fixed-output stand-in victim for gateway tests.
    struct ConstantTarget(Prediction);

    impl QueryTarget for ConstantTarget {
        fn predict(&self, _: &ImageTensor, _: &TokenSequence) -> Result<Prediction> {
            Ok(self.0.clone())
        }
        fn task_kind(&self) -> TaskKind {
            TaskKind::Classification
        }
    }

    fn session_fixture(budget: AttackBudget) -> (ConstantTarget, SentenceEncoder, ImageTensor, TokenSequence) {
        let model = build_pretrained(
            &ModelConfig {
                structure: ModelStructure::EncoderOnly,
                image_size: 8,
                patch_size: 4,
                ..ModelConfig::default()
            },
            21,
        )
        .unwrap();
        let _ = budget;
        let target = ConstantTarget(Prediction::Class { label: 0, confidence: 1.0 });
        let encoder = model.sentence_encoder();
        let image = ImageTensor::zeros(8, 8, 3);
        let text = Vocabulary::shared().tokenize("what color is the red circle").unwrap();
        (target, encoder, image, text)
    }

    #[test]
    fn gateway_rejects_out_of_ball_images_and_counts_the_violation() {
        let budget = AttackBudget::default();
        let (target, encoder, image, text) = session_fixture(budget.clone());
        let mut session =
            AttackSession::open(&target, encoder, image.clone(), text.clone(), budget.clone())
                .unwrap();

        let mut far = image.data().to_vec();
        far[0] = (budget.sigma_i * 2.0).min(1.0);
        let far = image.with_data(far);
        let err = session.query(QueryStage::Image, &far, &text);
        assert!(matches!(err, Err(Error::Constraint(_))));
        assert_eq!(session.ledger().constraint_violations, 1);
        assert_eq!(session.ledger().total, 0, "violating queries are not answered");

        // A query exactly on the boundary is admissible.
        let mut edge = image.data().to_vec();
        edge[0] = budget.sigma_i;
        let edge = image.with_data(edge);
        session.query(QueryStage::Image, &edge, &text).unwrap();
        assert_eq!(session.ledger().image_stage, 1);
        assert_eq!(session.ledger().total, 1);
    }

    #[test]
    fn gateway_enforces_word_allowance_and_similarity_gate() {
        let (target, encoder, image, text) = session_fixture(AttackBudget::default());
        let vocab = Vocabulary::shared();
        let green = vocab.id_of("green").unwrap();
        let square = vocab.id_of("square").unwrap();

        // Position 4 is "red", position 5 is "circle".
        let one_sub = text.substitute(4, green).unwrap();
        let two_subs = one_sub.substitute(5, square).unwrap();

        let gamma = encoder.similarity(&text, &one_sub).unwrap();
        assert!(gamma > 0.0, "fixture requires a positive similarity, got {gamma}");

        // Gate strictly below gamma: the candidate passes.
        let mut budget = AttackBudget::default();
        budget.sigma_s = gamma / 2.0;
        let mut session = AttackSession::open(
            &target,
            encoder.clone(),
            image.clone(),
            text.clone(),
            budget,
        )
        .unwrap();
        session.query(QueryStage::TextCandidate, &image, &one_sub).unwrap();
        assert_eq!(session.ledger().text_candidates, 1);

        // Two modified words exceed the allowance regardless of similarity.
        let err = session.query(QueryStage::TextCandidate, &image, &two_subs);
        assert!(matches!(err, Err(Error::Constraint(_))));
        assert_eq!(session.ledger().constraint_violations, 1);

        // Gate at or above gamma: the same candidate is rejected...
        let mut strict = AttackBudget::default();
        strict.sigma_s = (1.0 + gamma) / 2.0;
        let mut session = AttackSession::open(
            &target,
            encoder.clone(),
            image.clone(),
            text.clone(),
            strict,
        )
        .unwrap();
        let err = session.query(QueryStage::TextCandidate, &image, &one_sub);
        assert!(matches!(err, Err(Error::Constraint(_))));

        // ...but an importance probe may mask a word without passing the gate.
        let masked = text.substitute(4, crate::modelzoo::UNK).unwrap();
        session.query(QueryStage::TextProbe, &image, &masked).unwrap();
        assert_eq!(session.ledger().text_probes, 1);
        assert_eq!(session.journal().len(), 1);
        assert_eq!(session.journal()[0].modified_positions, 1);
        assert!(session.journal()[0].gamma.is_some());
    }

    #[test]
    fn ledger_splits_queries_by_stage() {
        let budget = AttackBudget::default();
        let (target, encoder, image, text) = session_fixture(budget.clone());
        let mut session =
            AttackSession::open(&target, encoder, image.clone(), text.clone(), budget).unwrap();
        session.query(QueryStage::Image, &image, &text).unwrap();
        session.query(QueryStage::Image, &image, &text).unwrap();
        session.query(QueryStage::Multimodal, &image, &text).unwrap();
        let ledger = session.ledger();
        assert_eq!(ledger.total, 3);
        assert_eq!(ledger.image_stage, 2);
        assert_eq!(ledger.multimodal_stage, 1);
        assert_eq!(ledger.text_probes, 0);
        assert_eq!(ledger.attack_queries(), 3);
        assert_eq!(ledger.constraint_violations, 0);
        assert!(!session.flips(session.original_prediction()));
    }
}
