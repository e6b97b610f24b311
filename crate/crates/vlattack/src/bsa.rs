//! Block-wise similarity attack on images.
//!
//! The attack perturbs an image so that *every* intermediate feature vector
//! of a white-box surrogate model — one vector per image token per block,
//! across both the image encoder and the fusion encoder — turns away from
//! its clean counterpart. The loss is the plain sum of cosine similarities
//! between clean and perturbed feature vectors; minimising it disrupts the
//! shared representation rather than any single task head, which is what
//! lets the perturbation transfer to fine-tuned victims.
//!
//! Descent is projected sign-gradient: each step moves against the sign of
//! the pixel gradient and re-projects into the ℓ∞ ball around the original
//! image intersected with the valid pixel range. A momentum variant
//! accumulates L1-normalised gradients first; with decay 0 it reduces
//! exactly to the plain step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{cosine_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::modelzoo::{
    FeatureStack, ImageTensor, PretrainedModel, TaskKind, TokenId, TokenSequence,
};

/// Everything an attack is allowed to spend: perturbation radii, iteration
/// counts, step size, and the text-modification allowance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackBudget {
    /// ℓ∞ radius of the image perturbation ball. Zero is permitted and
    /// makes every image operation the identity (useful as a control).
    pub sigma_i: f64,
    /// Sentence-similarity gate: a substituted text is admissible only when
    /// its cosine similarity to the original strictly exceeds this.
    pub sigma_s: f64,
    /// Total image-iteration budget `N` across all stages.
    pub total_steps: usize,
    /// Iterations `N_s` spent on the image-only first stage.
    pub image_steps: usize,
    /// Per-iteration step size.
    pub step_size: f64,
    /// Maximum number of word positions that may differ from the original.
    pub max_modified_words: usize,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            sigma_i: 16.0 / 255.0,
            sigma_s: 0.95,
            total_steps: 40,
            image_steps: 20,
            step_size: 0.01,
            max_modified_words: 1,
        }
    }
}

impl AttackBudget {
    /// Default budget for a task: grounding uses the tighter 4/255 radius,
    /// everything else 16/255.
    pub fn for_task(kind: TaskKind) -> Self {
        let mut budget = AttackBudget::default();
        if kind == TaskKind::Grounding {
            budget.sigma_i = 4.0 / 255.0;
        }
        budget
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if !self.sigma_i.is_finite() || !(0.0..1.0).contains(&self.sigma_i) {
            return err(format!("sigma_i {} must lie in [0, 1)", self.sigma_i));
        }
        if !self.sigma_s.is_finite() || self.sigma_s <= 0.0 || self.sigma_s > 1.0 {
            return err(format!("sigma_s {} must lie in (0, 1]", self.sigma_s));
        }
        if self.image_steps == 0 || self.image_steps > self.total_steps {
            return err(format!(
                "image_steps {} must satisfy 0 < image_steps <= total_steps {}",
                self.image_steps, self.total_steps
            ));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return err(format!("step_size {} must be positive", self.step_size));
        }
        if self.max_modified_words == 0 {
            return err("max_modified_words must be at least 1".into());
        }
        Ok(())
    }
}

/// Which feature groups the loss covers; the full attack uses both, the
/// single-encoder ablations one each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    /// Image-encoder blocks only.
    ImageOnly,
    /// Fusion-encoder blocks only.
    FusionOnly,
    /// Both groups (the full block-similarity loss).
    Full,
}

/// Sum of cosine similarities between corresponding feature vectors of two
/// stacks, over every block of both encoders. Bounded by ±(total vector
/// count); equals the bound exactly when the stacks are identical and no
/// vector is degenerate. Vectors with norm below `1e-12` contribute zero.
pub fn bsa_loss(reference: &FeatureStack, perturbed: &FeatureStack) -> Result<f64> {
    if !reference.same_shape(perturbed) {
        return Err(Error::Input(
            "feature stacks have mismatched block shapes".into(),
        ));
    }
    let mut total = 0.0;
    for (r, p) in reference
        .image_blocks
        .iter()
        .zip(&perturbed.image_blocks)
        .chain(reference.fusion_blocks.iter().zip(&perturbed.fusion_blocks))
    {
        for i in 0..r.nrows() {
            total += cosine_rows(&r.row(i), &p.row(i));
        }
    }
    Ok(total)
}

/// Uniform random start inside the ℓ∞ ball: each pixel moves by an
/// independent draw from `[−σᵢ, σᵢ]`, then the result is projected back
/// into the valid pixel range. With `sigma_i == 0` the original image is
/// returned exactly.
pub fn init_perturbation(
    image: &ImageTensor,
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    if budget.sigma_i == 0.0 {
        return image.clone();
    }
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| {
            let delta = rng.random_range(-budget.sigma_i..=budget.sigma_i);
            (v + delta).clamp(0.0, 1.0)
        })
        .collect();
    // Draws are within the ball by construction; clamping to [0, 1] only
    // shrinks the distance, so no further projection is needed.
    image.with_data(data)
}

/// The differentiable attack objective: a fixed reference feature stack
/// (clean image, clean text) and the surrogate model evaluated on the
/// perturbed side.
pub struct BsaObjective<'a> {
    model: &'a PretrainedModel,
    reference: FeatureStack,
    /// Token ids fed alongside the perturbed image; starts as the clean
    /// text and changes only during the cross-search stage.
    text: Vec<TokenId>,
    term: LossTerm,
}

impl<'a> BsaObjective<'a> {
    /// Anchors the reference at the clean `(image, text)` pair. The
    /// reference never moves afterwards, even when the perturbed-side text
    /// is swapped.
    pub fn new(
        model: &'a PretrainedModel,
        clean_image: &ImageTensor,
        clean_text: &TokenSequence,
        term: LossTerm,
    ) -> Result<Self> {
        let reference = model.forward_with_features(clean_image, clean_text)?;
        Ok(BsaObjective {
            model,
            reference,
            text: clean_text.ids().to_vec(),
            term,
        })
    }

    /// Same anchored reference, different perturbed-side text.
    pub fn with_text(&self, text: &TokenSequence) -> BsaObjective<'a> {
        BsaObjective {
            model: self.model,
            reference: self.reference.clone(),
            text: text.ids().to_vec(),
            term: self.term,
        }
    }

    pub fn reference(&self) -> &FeatureStack {
        &self.reference
    }

    /// Loss value at `image` (no gradient).
    pub fn loss(&self, image: &ImageTensor) -> Result<f64> {
        let (loss, _, _) = self.eval(image, false)?;
        Ok(loss)
    }

    /// Loss and its gradient with respect to every pixel of `image`.
    pub fn loss_and_gradient(&self, image: &ImageTensor) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, _) = self.eval(image, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn eval(&self, image: &ImageTensor, want_grad: bool) -> Result<(f64, Option<Vec<f64>>, usize)> {
        let mut tape = Tape::new();
        let img = if want_grad {
            tape.variable(image.flat_matrix())
        } else {
            tape.constant(image.flat_matrix())
        };
        let vars = self.model.features_on_tape(&mut tape, img, &self.text);

        let mut pairs: Vec<(Var, &crate::autograd::Matrix)> = Vec::new();
        if matches!(self.term, LossTerm::ImageOnly | LossTerm::Full) {
            pairs.extend(vars.image_blocks.iter().copied().zip(&self.reference.image_blocks));
        }
        if matches!(self.term, LossTerm::FusionOnly | LossTerm::Full) {
            pairs.extend(vars.fusion_blocks.iter().copied().zip(&self.reference.fusion_blocks));
        }

        let mut acc: Option<Var> = None;
        let mut vectors = 0;
        for (var, reference) in pairs {
            vectors += reference.nrows();
            let cos = tape.cos_rows_vs_const(var, reference);
            let s = tape.sum_all(cos);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, s),
                None => s,
            });
        }
        let root = acc.ok_or_else(|| Error::Attack("objective covers no feature blocks".into()))?;
        let loss = tape.value(root)[(0, 0)];
        let grad = if want_grad {
            let mut grads = tape.backward(root);
            let g = grads
                .take(img)
                .map(|m| m.into_raw_vec_and_offset().0)
                .unwrap_or_else(|| vec![0.0; image.len()]);
            Some(g)
        } else {
            None
        };
        Ok((loss, grad, vectors))
    }
}

/// Optimiser choice for the image stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Plain projected sign-gradient descent.
    Pgd,
    /// Momentum-iterative variant: the update direction is the sign of an
    /// accumulated, L1-normalised gradient.
    MomentumIterative { decay: f64 },
}

/// Descent engine carrying optimiser state across stages; the momentum
/// accumulator, like the perturbation itself, is never reset mid-attack.
pub struct Descent {
    optimizer: Optimizer,
    momentum: Option<Vec<f64>>,
}

impl Descent {
    pub fn new(optimizer: Optimizer) -> Self {
        Descent {
            optimizer,
            momentum: None,
        }
    }

    /// One projected descent step from `current`. Returns the loss at
    /// `current` (before the move) and the next iterate, which always lies
    /// inside the ℓ∞ ball around `original` and inside `[0, 1]`.
    pub fn step(
        &mut self,
        objective: &BsaObjective<'_>,
        original: &ImageTensor,
        current: &ImageTensor,
        budget: &AttackBudget,
    ) -> Result<(f64, ImageTensor)> {
        let (loss, grad) = objective.loss_and_gradient(current)?;
        let direction: Vec<f64> = match self.optimizer {
            Optimizer::Pgd => grad.iter().map(|g| g.signum_or_zero()).collect(),
            Optimizer::MomentumIterative { decay } => {
                let state = self
                    .momentum
                    .get_or_insert_with(|| vec![0.0; grad.len()]);
                if state.is_empty() {
                    *state = vec![0.0; grad.len()];
                }
                assert_eq!(state.len(), grad.len(), "momentum state length mismatch");
                let l1: f64 = grad.iter().map(|g| g.abs()).sum();
                for (s, g) in state.iter_mut().zip(&grad) {
                    *s *= decay;
                    if l1 > 1e-300 {
                        *s += g / l1;
                    }
                }
                state.iter().map(|s| s.signum_or_zero()).collect()
            }
        };
        let moved: Vec<f64> = current
            .data()
            .iter()
            .zip(&direction)
            .map(|(&v, &d)| v - budget.step_size * d)
            .collect();
        let (h, w, c) = current.dims();
        let next = ImageTensor::raw(h, w, c, moved).project_into_ball(original, budget.sigma_i);
        Ok((loss, next))
    }
}

/// One projected sign-gradient step (the default optimiser).
pub fn bsa_step(
    objective: &BsaObjective<'_>,
    original: &ImageTensor,
    current: &ImageTensor,
    budget: &AttackBudget,
) -> Result<(f64, ImageTensor)> {
    Descent::new(Optimizer::Pgd).step(objective, original, current, budget)
}

/// One momentum-iterative step with external accumulator state. With
/// `decay == 0` the result is identical to [`bsa_step`].
pub fn bsa_step_momentum(
    objective: &BsaObjective<'_>,
    original: &ImageTensor,
    current: &ImageTensor,
    budget: &AttackBudget,
    momentum: &mut Vec<f64>,
    decay: f64,
) -> Result<(f64, ImageTensor)> {
    let mut descent = Descent {
        optimizer: Optimizer::MomentumIterative { decay },
        momentum: Some(std::mem::take(momentum)),
    };
    let out = descent.step(objective, original, current, budget)?;
    *momentum = descent.momentum.take().expect("state preserved");
    Ok(out)
}

/// Outcome of a standalone image attack.
#[derive(Clone, Debug)]
pub struct BsaAttackResult {
    /// Final perturbed image.
    pub image: ImageTensor,
    /// Loss before each step, plus the final loss (`steps + 1` entries).
    pub losses: Vec<f64>,
}

/// Runs `steps` projected descent iterations from a fresh random start
/// inside the ball. Pure function of its arguments: the same seed yields a
/// bitwise-identical result.
pub fn bsa_attack(
    model: &PretrainedModel,
    image: &ImageTensor,
    text: &TokenSequence,
    steps: usize,
    budget: &AttackBudget,
    seed: u64,
    term: LossTerm,
    optimizer: Optimizer,
) -> Result<BsaAttackResult> {
    budget.validate()?;
    let objective = BsaObjective::new(model, image, text, term)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = init_perturbation(image, budget, &mut rng);
    let mut descent = Descent::new(optimizer);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, next) = descent.step(&objective, image, &current, budget)?;
        losses.push(loss);
        current = next;
    }
    losses.push(objective.loss(&current)?);
    Ok(BsaAttackResult {
        image: current,
        losses,
    })
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// `signum` that maps exact zero to zero instead of ±1, so zero-gradient
    /// pixels stay put.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Matrix;
    use crate::modelzoo::{build_pretrained, ModelConfig, ModelStructure, Vocabulary};
    use proptest::prelude::*;

    fn tiny_model() -> PretrainedModel {
        let config = ModelConfig {
            structure: ModelStructure::EncoderOnly,
            image_size: 8,
            patch_size: 4,
            ..ModelConfig::default()
        };
        build_pretrained(&config, 5).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
        let n = size * size * 3;
        let data = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        ImageTensor::new(size, size, 3, data).unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng) -> FeatureStack {
        let block = |rng: &mut ChaCha8Rng| {
            Matrix::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0))
        };
        FeatureStack {
            image_blocks: vec![block(rng), block(rng)],
            fusion_blocks: vec![block(rng), block(rng)],
        }
    }

    #[test]
    fn default_budget_matches_standard_values() {
        let b = AttackBudget::default();
        assert_eq!(b.sigma_i, 16.0 / 255.0);
        assert_eq!(b.sigma_s, 0.95);
        assert_eq!(b.total_steps, 40);
        assert_eq!(b.image_steps, 20);
        assert_eq!(b.step_size, 0.01);
        assert_eq!(b.max_modified_words, 1);
        assert!(b.validate().is_ok());
        assert_eq!(AttackBudget::for_task(TaskKind::Grounding).sigma_i, 4.0 / 255.0);
        assert_eq!(AttackBudget::for_task(TaskKind::Classification).sigma_i, 16.0 / 255.0);
    }

    #[test]
    fn budget_validation_rejects_bad_values() {
        let ok = AttackBudget::default();
        for mutate in [
            |b: &mut AttackBudget| b.sigma_i = -0.1,
            |b: &mut AttackBudget| b.sigma_i = 1.0,
            |b: &mut AttackBudget| b.sigma_s = 0.0,
            |b: &mut AttackBudget| b.sigma_s = 1.1,
            |b: &mut AttackBudget| b.image_steps = 0,
            |b: &mut AttackBudget| b.image_steps = 41,
            |b: &mut AttackBudget| b.step_size = 0.0,
            |b: &mut AttackBudget| b.max_modified_words = 0,
        ] {
            let mut bad = ok.clone();
            mutate(&mut bad);
            assert!(bad.validate().is_err(), "{bad:?} should fail validation");
        }
        // A zero radius is a legal degenerate control.
        let mut zero = ok;
        zero.sigma_i = 0.0;
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn loss_of_identical_stacks_is_the_vector_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let stack = random_stack(&mut rng);
            let loss = bsa_loss(&stack, &stack).unwrap();
            let v = stack.total_vectors() as f64;
            assert!((loss - v).abs() < 1e-9, "identity loss {loss} != {v}");
        }
    }

    #[test]
    fn loss_is_bounded_by_vector_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_stack(&mut rng);
            let b = random_stack(&mut rng);
            let v = a.total_vectors() as f64;
            let loss = bsa_loss(&a, &b).unwrap();
            assert!(loss.abs() <= v + 1e-9, "|{loss}| exceeds {v}");
        }
    }

    #[test]
    fn loss_ignores_zero_norm_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_stack(&mut rng);
        let b = a.clone();
        let v = a.total_vectors() as f64;
        a.image_blocks[0].row_mut(2).fill(0.0);
        // One degenerate pair contributes 0 instead of 1.
        let loss = bsa_loss(&a, &b).unwrap();
        assert!((loss - (v - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_stack(&mut rng);
        let mut b = a.clone();
        b.fusion_blocks.pop();
        assert!(bsa_loss(&a, &b).is_err());
    }

    #[test]
    fn init_with_zero_radius_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = random_image(&mut rng, 8);
        let mut budget = AttackBudget::default();
        budget.sigma_i = 0.0;
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let init = init_perturbation(&image, &budget, &mut rng2);
        assert_eq!(init, image);
    }

    #[test]
    fn init_is_deterministic_and_inside_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = random_image(&mut rng, 8);
        let budget = AttackBudget::default();
        let a = init_perturbation(&image, &budget, &mut ChaCha8Rng::seed_from_u64(11));
        let b = init_perturbation(&image, &budget, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(a.linf_distance(&image) <= budget.sigma_i * (1.0 + 1e-12));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradient_matches_finite_differences_through_the_loss() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clean = random_image(&mut rng, 8);
        let text = Vocabulary::shared().tokenize("red circle").unwrap();
        let objective = BsaObjective::new(&model, &clean, &text, LossTerm::Full).unwrap();
        let probe = random_image(&mut rng, 8);
        let (_, grad) = objective.loss_and_gradient(&probe).unwrap();

        let step = 1e-3;
        for _ in 0..20 {
            let i = rng.random_range(0..probe.len());
            let mut up = probe.data().to_vec();
            up[i] += step;
            let mut down = probe.data().to_vec();
            down[i] -= step;
            let fu = objective.loss(&ImageTensor::raw(8, 8, 3, up)).unwrap();
            let fd = objective.loss(&ImageTensor::raw(8, 8, 3, down)).unwrap();
            let numeric = (fu - fd) / (2.0 * step);
            let analytic = grad[i];
            let diff = (analytic - numeric).abs();
            assert!(
                diff < 1e-8 || diff / analytic.abs().max(numeric.abs()) < 1e-4,
                "pixel {i}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn descent_steps_reduce_the_loss_at_standard_settings() {
        // 100 seeded random starts on a fixed model/input; a single
        // projected step must reduce the loss in at least 90 of them.
        // Recorded rate with this seed set: 100/100.
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clean = random_image(&mut rng, 8);
        let text = Vocabulary::shared().tokenize("green square").unwrap();
        let objective = BsaObjective::new(&model, &clean, &text, LossTerm::Full).unwrap();
        let budget = AttackBudget::default();

        let mut decreased = 0;
        for trial in 0..100 {
            let mut trng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let start = init_perturbation(&clean, &budget, &mut trng);
            let (loss_before, next) = bsa_step(&objective, &clean, &start, &budget).unwrap();
            let loss_after = objective.loss(&next).unwrap();
            if loss_after < loss_before {
                decreased += 1;
            }
        }
        assert_eq!(decreased, 100, "descent rate fixture moved");
        assert!(decreased >= 90);
    }

    #[test]
    fn momentum_with_zero_decay_equals_plain_step() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean = random_image(&mut rng, 8);
        let text = Vocabulary::shared().tokenize("blue triangle").unwrap();
        let objective = BsaObjective::new(&model, &clean, &text, LossTerm::Full).unwrap();
        let budget = AttackBudget::default();
        let start = init_perturbation(&clean, &budget, &mut rng);

        let (l1, plain) = bsa_step(&objective, &clean, &start, &budget).unwrap();
        let mut momentum = Vec::new();
        let (l2, with_momentum) =
            bsa_step_momentum(&objective, &clean, &start, &budget, &mut momentum, 0.0).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(plain, with_momentum, "decay 0 must reduce to the plain step");
        assert_eq!(momentum.len(), clean.len(), "state returned to the caller");
    }

    #[test]
    fn attack_is_bitwise_repeatable() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clean = random_image(&mut rng, 8);
        let text = Vocabulary::shared().tokenize("red square").unwrap();
        let budget = AttackBudget::default();
        let a = bsa_attack(&model, &clean, &text, 5, &budget, 77, LossTerm::Full, Optimizer::Pgd)
            .unwrap();
        let b = bsa_attack(&model, &clean, &text, 5, &budget, 77, LossTerm::Full, Optimizer::Pgd)
            .unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 6);
        assert!(a.losses[5] < a.losses[0], "five steps should make progress");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Every iterate of a descent run stays inside the ℓ∞ ball and the
        /// pixel range, for random radii, step sizes, and step counts.
        #[test]
        fn iterates_stay_feasible(
            seed in 0u64..1000,
            sigma in 0.0f64..0.3,
            step_size in 0.001f64..0.1,
            steps in 1usize..6,
        ) {
            let model = tiny_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = random_image(&mut rng, 8);
            let text = Vocabulary::shared().tokenize("red circle").unwrap();
            let objective = BsaObjective::new(&model, &clean, &text, LossTerm::Full).unwrap();
            let budget = AttackBudget {
                sigma_i: sigma,
                step_size,
                ..AttackBudget::default()
            };
            let mut current = init_perturbation(&clean, &budget, &mut rng);
            let mut descent = Descent::new(Optimizer::Pgd);
            for _ in 0..steps {
                let (_, next) = descent.step(&objective, &clean, &current, &budget).unwrap();
                prop_assert!(next.linf_distance(&clean) <= sigma + 1e-15);
                prop_assert!(next.data().iter().all(|v| (0.0..=1.0).contains(v)));
                current = next;
            }
        }
    }
}
