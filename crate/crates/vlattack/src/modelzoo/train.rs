//! Training loops: image-text pretraining and full-model fine-tuning.
//!
//! Both entry points share one batch engine: every sample in a batch builds
//! its own tape with *all* parameters registered as variables, gradients
//! are averaged in deterministic index order (parallel evaluation, ordered
//! reduction), and Adam applies the update. Per-sample randomness (negative
//! sampling, caption masking) comes from counter-derived streams of the
//! recipe seed, so results are independent of thread scheduling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::modelzoo::params::{init_head, LinearP, ModelParams};
use crate::modelzoo::vocab::{TokenId, Vocabulary, CLS, END, UNK};
use crate::modelzoo::{
    net, FineTunedTask, ImageTensor, ModelStructure, PretrainedModel, TaskDataset, TaskKind,
    TaskTarget, TokenSequence,
};

/// Optimisation settings for one training run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep the image tower (patch projection, image positions, image
    /// blocks) at its current weights and train only the fusion stack,
    /// text-side embeddings, and task head. Standard practice when
    /// adapting a shared backbone to a downstream task.
    #[serde(default)]
    pub freeze_image_tower: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            freeze_image_tower: false,
        }
    }
}

impl TrainRecipe {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, in epoch order.
#[derive(Clone, Debug)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// One matching image-caption pair for pretraining.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub image: ImageTensor,
    pub caption: TokenSequence,
}

/// A corpus of matching pairs.
#[derive(Clone, Debug)]
pub struct PairCorpus {
    pub pairs: Vec<PairSample>,
}

/// Adam with lazily initialised per-tensor state, addressed by the
/// canonical parameter traversal index.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: Vec::new(),
        }
    }

    /// Starts one optimisation step (one batch).
    fn begin(&mut self) {
        self.t += 1;
    }

    /// Applies the update for parameter `index` in place.
    fn update_one(&mut self, index: usize, param: &mut Matrix, grad: &Matrix) {
        if self.state.len() <= index {
            self.state.resize(index + 1, None);
        }
        let (m, v) = self.state[index]
            .get_or_insert_with(|| (Matrix::zeros(param.raw_dim()), Matrix::zeros(param.raw_dim())));
        let b1 = self.beta1;
        let b2 = self.beta2;
        m.zip_mut_with(grad, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
        v.zip_mut_with(grad, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
        let mc = 1.0 - b1.powi(self.t);
        let vc = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        ndarray::Zip::from(&mut *param)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &mi, &vi| {
                *p -= lr * (mi / mc) / ((vi / vc).sqrt() + eps);
            });
    }
}

/// All parameters of one model bound onto a tape as variables, in canonical
/// order (body first, then the head when present).
struct BoundVars {
    params: ModelParams<Var>,
    head: Option<LinearP<Var>>,
    order: Vec<Var>,
}

fn bind_trainable(
    tape: &mut Tape,
    params: &ModelParams<Matrix>,
    head: Option<&LinearP<Matrix>>,
) -> BoundVars {
    let mut order = Vec::new();
    let bound = params.map(&mut |m| {
        let v = tape.variable(m.clone());
        order.push(v);
        v
    });
    let head = head.map(|h| {
        h.map(&mut |m| {
            let v = tape.variable(m.clone());
            order.push(v);
            v
        })
    });
    BoundVars {
        params: bound,
        head,
        order,
    }
}

/// Two-way match/mismatch logits for one encoded image-caption pair.
///
/// Pools the fused image rows and text rows separately and scores them with
/// the learned bilinear metric `u_img · M · u_txtᵀ` held by the matching
/// head. A full metric can align whatever subspaces the two modalities use
/// at initialisation, so the cross-modal comparison the objective needs is
/// linearly learnable from the first step instead of having to emerge
/// inside the attention stack. The score becomes the logit of "matched"
/// against a fixed zero logit for "mismatched".
fn match_logits(
    tape: &mut Tape,
    head: &LinearP<Var>,
    memory: Var,
    n_patches: usize,
    text_len: usize,
) -> Var {
    let img_rows = tape.slice_rows(memory, 1, n_patches);
    let txt_rows = tape.slice_rows(memory, 1 + n_patches, text_len);
    let pool_img = tape.constant(Matrix::from_elem((1, n_patches), 1.0 / n_patches as f64));
    let pool_txt = tape.constant(Matrix::from_elem((1, text_len), 1.0 / text_len as f64));
    let u_img = tape.matmul(pool_img, img_rows);
    let u_txt = tape.matmul(pool_txt, txt_rows);
    let mapped = net::linear(tape, head, u_img);
    let score = tape.matmul_nt(mapped, u_txt);
    let pick = tape.constant(Matrix::from_shape_vec((1, 2), vec![0.0, 1.0]).expect("1x2"));
    tape.matmul(score, pick)
}

/// Per-sample deterministic RNG, independent of batching and threading.
fn sample_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | sample as u64);
    rng
}

/// Shared batch engine. `loss_of` builds one sample's scalar loss node on
/// the given tape from the bound variables and a per-sample RNG.
fn run_training<L>(
    params: &mut ModelParams<Matrix>,
    mut head: Option<&mut LinearP<Matrix>>,
    n_samples: usize,
    recipe: &TrainRecipe,
    loss_of: L,
) -> Result<TrainLog>
where
    L: Fn(&mut Tape, &BoundVars, usize, &mut ChaCha8Rng) -> Result<Var> + Sync,
{
    recipe.validate()?;
    if n_samples == 0 {
        return Err(Error::Training("no training samples".into()));
    }
    let mut adam = Adam::new(recipe.learning_rate);
    // Mask over the body parameters in canonical traversal order; the head
    // (appended after the body) always trains.
    let frozen: Vec<bool> = params
        .named()
        .iter()
        .map(|(name, _)| {
            recipe.freeze_image_tower
                && (name.starts_with("patch.")
                    || name == "img_pos"
                    || name.starts_with("img_blocks."))
        })
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut epoch_losses = Vec::with_capacity(recipe.epochs);

    for epoch in 0..recipe.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let params_ref: &ModelParams<Matrix> = params;
            let head_ref: Option<&LinearP<Matrix>> = head.as_deref();
            let per_sample: Vec<Result<(f64, Vec<Matrix>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut tape = Tape::new();
                    let bound = bind_trainable(&mut tape, params_ref, head_ref);
                    let mut rng = sample_rng(recipe.seed, epoch, idx);
                    let loss_var = loss_of(&mut tape, &bound, idx, &mut rng)?;
                    let loss = tape.value(loss_var)[(0, 0)];
                    let mut grads = tape.backward(loss_var);
                    let gs: Vec<Matrix> = bound
                        .order
                        .iter()
                        .map(|&v| {
                            grads
                                .take(v)
                                .unwrap_or_else(|| Matrix::zeros(tape.value(v).raw_dim()))
                        })
                        .collect();
                    Ok((loss, gs))
                })
                .collect();

            // Ordered reduction keeps the update bitwise deterministic.
            let mut avg: Option<Vec<Matrix>> = None;
            let scale = 1.0 / batch.len() as f64;
            for item in per_sample {
                let (loss, gs) = item?;
                epoch_loss += loss;
                match &mut avg {
                    None => avg = Some(gs),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(gs) {
                            *a += &g;
                        }
                    }
                }
            }
            let mut avg = avg.expect("non-empty batch");
            for g in &mut avg {
                g.mapv_inplace(|v| v * scale);
            }

            adam.begin();
            let mut index = 0;
            params.map_mut(&mut |m| {
                if !frozen[index] {
                    adam.update_one(index, m, &avg[index]);
                }
                index += 1;
            });
            if let Some(h) = head.as_deref_mut() {
                h.map_mut(&mut |m| {
                    adam.update_one(index, m, &avg[index]);
                    index += 1;
                });
            }
            debug_assert_eq!(index, avg.len());
        }
        let mean = epoch_loss / n_samples as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged to {mean} in epoch {epoch}"
            )));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainLog { epoch_losses })
}

impl PretrainedModel {
    /// Pretrains in place on matching image-caption pairs.
    ///
    /// Encoder-only models learn two-way image-text matching on the summary
    /// token: every pair is scored against its own caption and against one
    /// fixed mismatched caption drawn from another corpus entry.
    /// Encoder-decoder models learn denoising captioning: the encoder sees
    /// the caption with words independently masked to `<unk>`, the decoder
    /// reconstructs the full caption.
    pub fn pretrain(&mut self, corpus: &PairCorpus, recipe: &TrainRecipe) -> Result<TrainLog> {
        if corpus.pairs.is_empty() {
            return Err(Error::Training("pretraining corpus is empty".into()));
        }
        for pair in &corpus.pairs {
            if pair.caption.is_empty() {
                return Err(Error::Training("pretraining caption is empty".into()));
            }
            if pair.caption.len() + 1 > self.config.max_decode_len + 1 {
                return Err(Error::Training(format!(
                    "caption of {} tokens exceeds the decoder budget",
                    pair.caption.len()
                )));
            }
        }
        let distinct = corpus
            .pairs
            .iter()
            .any(|p| p.caption.ids() != corpus.pairs[0].caption.ids());
        if self.config.structure == ModelStructure::EncoderOnly && !distinct {
            return Err(Error::Training(
                "matching pretraining needs at least two distinct captions".into(),
            ));
        }

        let config = self.config.clone();
        let pairs = &corpus.pairs;
        match config.structure {
            ModelStructure::EncoderOnly => {
                let mut head = self.itm_head.take().ok_or_else(|| {
                    Error::Config("encoder-only model lost its matching head".into())
                })?;
                let result = run_training(
                    &mut self.params,
                    Some(&mut head),
                    pairs.len(),
                    recipe,
                    |tape, bound, idx, _rng| {
                        let pair = &pairs[idx];
                        // Each sample contributes one positive (its own
                        // caption) and one negative (a fixed partner's
                        // caption) every time it is visited. Keeping the
                        // negative fixed across epochs makes the objective
                        // stationary, which small-batch training needs to
                        // pick the matching signal out of the noise.
                        let mut partner_rng = sample_rng(recipe.seed, 0, idx);
                        let mut other = partner_rng.random_range(0..pairs.len());
                        let mut tries = 0;
                        while pairs[other].caption.ids() == pair.caption.ids() && tries < 64 {
                            other = partner_rng.random_range(0..pairs.len());
                            tries += 1;
                        }
                        if pairs[other].caption.ids() == pair.caption.ids() {
                            // Rejection sampling missed; scan for any entry
                            // with a different caption (one exists, the
                            // corpus was validated above).
                            other = (0..pairs.len())
                                .find(|&o| pairs[o].caption.ids() != pair.caption.ids())
                                .expect("corpus has two distinct captions");
                        }
                        let img = tape.constant(pair.image.flat_matrix());
                        let head = bound.head.as_ref().expect("head bound");
                        let pos_enc =
                            net::encode(tape, &bound.params, &config, img, pair.caption.ids());
                        let pos_logits = match_logits(
                            tape,
                            head,
                            pos_enc.memory,
                            config.n_patches(),
                            pair.caption.len(),
                        );
                        let pos_loss = tape.cross_entropy_mean(pos_logits, &[1]);
                        let neg_enc = net::encode(
                            tape,
                            &bound.params,
                            &config,
                            img,
                            pairs[other].caption.ids(),
                        );
                        let neg_logits = match_logits(
                            tape,
                            head,
                            neg_enc.memory,
                            config.n_patches(),
                            pairs[other].caption.len(),
                        );
                        let neg_loss = tape.cross_entropy_mean(neg_logits, &[0]);
                        let sum = tape.add(pos_loss, neg_loss);
                        Ok(tape.scale(sum, 0.5))
                    },
                );
                self.itm_head = Some(head);
                result
            }
            ModelStructure::EncoderDecoder => run_training(
                &mut self.params,
                None,
                pairs.len(),
                recipe,
                |tape, bound, idx, rng| {
                    let pair = &pairs[idx];
                    let caption = pair.caption.ids();
                    let masked: Vec<TokenId> = caption
                        .iter()
                        .map(|&id| if rng.random::<f64>() < 0.5 { UNK } else { id })
                        .collect();
                    let img = tape.constant(pair.image.flat_matrix());
                    let enc = net::encode(tape, &bound.params, &config, img, &masked);
                    let dec = bound.params.decoder.as_ref().expect("decoder bound");
                    let mut prefix = vec![CLS];
                    prefix.extend_from_slice(caption);
                    let mut targets = caption.to_vec();
                    targets.push(END);
                    let logits = net::decode_logits(tape, &bound.params, dec, &config, enc.memory, &prefix);
                    Ok(tape.cross_entropy_mean(logits, &targets))
                },
            ),
        }
    }

    /// Fine-tunes a full copy of this model on a task dataset — every body
    /// tensor is updated, not just the head — and returns the victim.
    pub fn fine_tune(&self, data: &TaskDataset, recipe: &TrainRecipe) -> Result<FineTunedTask> {
        if data.samples.is_empty() {
            return Err(Error::Training("fine-tuning dataset is empty".into()));
        }
        let vocab = Vocabulary::shared();
        let config = self.config.clone();

        // Per-sample supervision, precomputed.
        enum Supervision {
            Class(usize),
            Tokens(Vec<TokenId>),
        }
        let mut answer_ids: Vec<TokenId> = Vec::new();
        if data.task == TaskKind::Classification {
            if data.classes.is_empty() {
                return Err(Error::Training("classification dataset without classes".into()));
            }
            for name in &data.classes {
                answer_ids.push(vocab.id_of(name).ok_or_else(|| {
                    Error::Training(format!("class name {name:?} is not in the vocabulary"))
                })?);
            }
        }
        let supervision: Vec<Supervision> = data
            .samples
            .iter()
            .map(|sample| -> Result<Supervision> {
                match (&sample.target, data.task) {
                    (TaskTarget::Class(c), TaskKind::Classification) => {
                        if *c >= data.classes.len() {
                            return Err(Error::Training(format!(
                                "class index {c} out of range for {} classes",
                                data.classes.len()
                            )));
                        }
                        match config.structure {
                            ModelStructure::EncoderOnly => Ok(Supervision::Class(*c)),
                            ModelStructure::EncoderDecoder => {
                                Ok(Supervision::Tokens(vec![answer_ids[*c]]))
                            }
                        }
                    }
                    (TaskTarget::Caption(tokens), TaskKind::Generation) => {
                        if tokens.is_empty() || tokens.len() + 1 > config.max_decode_len + 1 {
                            return Err(Error::Training(format!(
                                "caption length {} outside the decoder budget",
                                tokens.len()
                            )));
                        }
                        let mut t = tokens.clone();
                        t.push(END);
                        Ok(Supervision::Tokens(t))
                    }
                    (TaskTarget::Box(bbox), TaskKind::Grounding) => {
                        let mut t = Vec::with_capacity(5);
                        for coord in [bbox.x1, bbox.y1, bbox.x2, bbox.y2] {
                            let q = coord.round().clamp(0.0, 32.0) as usize;
                            t.push(vocab.loc_id(q)?);
                        }
                        t.push(END);
                        Ok(Supervision::Tokens(t))
                    }
                    _ => Err(Error::Training(
                        "sample target kind does not match the dataset task".into(),
                    )),
                }
            })
            .collect::<Result<_>>()?;

        // Tasks that decode need a decoder; encoder-only handles exactly
        // classification.
        match (config.structure, data.task) {
            (ModelStructure::EncoderOnly, TaskKind::Classification) => {}
            (ModelStructure::EncoderOnly, _) => {
                return Err(Error::Config(
                    "encoder-only models support only classification fine-tuning".into(),
                ))
            }
            (ModelStructure::EncoderDecoder, _) => {}
        }

        let mut params = self.params.clone();
        let mut head = match (config.structure, data.task) {
            (ModelStructure::EncoderOnly, TaskKind::Classification) => {
                let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed ^ HEAD_SEED_SALT);
                Some(init_head(config.width, data.classes.len(), &mut rng))
            }
            _ => None,
        };

        let samples = &data.samples;
        run_training(
            &mut params,
            head.as_mut(),
            samples.len(),
            recipe,
            |tape, bound, idx, _rng| {
                let sample = &samples[idx];
                let img = tape.constant(sample.image.flat_matrix());
                let enc = net::encode(tape, &bound.params, &config, img, sample.text.ids());
                match &supervision[idx] {
                    Supervision::Class(c) => {
                        let head = bound.head.as_ref().expect("classifier head bound");
                        let logits = net::linear(tape, head, enc.cls);
                        Ok(tape.cross_entropy_mean(logits, &[*c]))
                    }
                    Supervision::Tokens(targets) => {
                        let dec = bound.params.decoder.as_ref().expect("decoder bound");
                        let mut prefix = vec![CLS];
                        prefix.extend_from_slice(&targets[..targets.len() - 1]);
                        let logits = net::decode_logits(
                            tape,
                            &bound.params,
                            dec,
                            &config,
                            enc.memory,
                            &prefix,
                        );
                        Ok(tape.cross_entropy_mean(logits, targets))
                    }
                }
            },
        )?;

        Ok(FineTunedTask {
            config,
            params,
            head,
            task_kind: data.task,
            class_names: data.classes.clone(),
            answer_ids,
            seed: recipe.seed,
        })
    }
}

/// Seed salt so the fresh classifier head does not reuse the body stream.
const HEAD_SEED_SALT: u64 = 0x4845_4144;


#[cfg(test)]
mod zz_probe {
    use super::*;
    use crate::harness::synthesize_pretraining_corpus;
    use crate::modelzoo::{build_pretrained, ModelConfig};

    #[test]
    fn zz_feature_geometry_at_init() {
        let model = build_pretrained(&ModelConfig::default(), 13).unwrap();
        let corpus = synthesize_pretraining_corpus(32, 7).unwrap();
        let config = &model.config;
        let np = config.n_patches();
        let mut u_imgs: Vec<Vec<f64>> = Vec::new();
        let mut u_txts: Vec<Vec<f64>> = Vec::new();
        for pair in &corpus.pairs {
            let mut tape = Tape::new();
            let bound = bind_trainable(&mut tape, &model.params, None);
            let img = tape.constant(pair.image.flat_matrix());
            let enc = net::encode(&mut tape, &bound.params, config, img, pair.caption.ids());
            let mem = tape.value(enc.memory).clone();
            let u_img: Vec<f64> = (0..config.width)
                .map(|c| (0..np).map(|r| mem[(1 + r, c)]).sum::<f64>() / np as f64)
                .collect();
            let tl = pair.caption.len();
            let u_txt: Vec<f64> = (0..config.width)
                .map(|c| (0..tl).map(|r| mem[(1 + np + r, c)]).sum::<f64>() / tl as f64)
                .collect();
            u_imgs.push(u_img);
            u_txts.push(u_txt);
        }
        let stats = |vecs: &Vec<Vec<f64>>, label: &str| {
            let n = vecs.len();
            let w = vecs[0].len();
            let mut grand = vec![0.0; w];
            for v in vecs {
                for (g, x) in grand.iter_mut().zip(v) {
                    *g += x / n as f64;
                }
            }
            // class = i % 8 (color id by corpus construction)
            let mut between = 0.0;
            let mut within = 0.0;
            for cls in 0..8usize {
                let members: Vec<&Vec<f64>> = vecs.iter().skip(cls).step_by(8).collect();
                let m = members.len() as f64;
                let mut mean = vec![0.0; w];
                for v in &members {
                    for (a, x) in mean.iter_mut().zip(v.iter()) {
                        *a += x / m;
                    }
                }
                between += mean
                    .iter()
                    .zip(&grand)
                    .map(|(a, g)| (a - g) * (a - g))
                    .sum::<f64>()
                    * m;
                for v in &members {
                    within += v
                        .iter()
                        .zip(&mean)
                        .map(|(x, a)| (x - a) * (x - a))
                        .sum::<f64>();
                }
            }
            let scale: f64 = vecs.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>() / (n * w) as f64;
            println!(
                "{label}: rms {:.4}  between-var {:.6}  within-var {:.6}  ratio {:.3}",
                scale.sqrt(),
                between,
                within,
                between / within.max(1e-12)
            );
        };
        stats(&u_imgs, "u_img by color");
        stats(&u_txts, "u_txt by color-word");
    }
}
