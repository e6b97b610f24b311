//! Parameter containers for the miniature vision-language models.
//!
//! Every struct here is generic over its payload `T`. The concrete model
//! stores `ModelParams<Matrix>`; a forward pass lifts the same structure
//! onto a [`Tape`](crate::autograd::Tape) as `ModelParams<Var>` via
//! [`ModelParams::map`]. Training, checkpointing, and the
//! "every-parameter-changed" diagnostics all rely on one canonical traversal
//! order, so `map`, `map_mut`, and `named` must visit fields in exactly the
//! same sequence — a unit test pins them together by pointer identity.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Matrix;
use crate::modelzoo::ModelConfig;

/// Affine map `x @ w + b` with `w: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct LinearP<T> {
    pub w: T,
    pub b: T,
}

/// Layer-norm gain and bias, both `1×d` rows.
#[derive(Clone, Debug)]
pub struct NormP<T> {
    pub g: T,
    pub b: T,
}

/// One pre-norm transformer encoder block: single-head self-attention
/// followed by a GELU feed-forward, each with a residual connection.
#[derive(Clone, Debug)]
pub struct BlockP<T> {
    pub norm1: NormP<T>,
    pub q: LinearP<T>,
    pub k: LinearP<T>,
    pub v: LinearP<T>,
    pub o: LinearP<T>,
    pub norm2: NormP<T>,
    pub ff1: LinearP<T>,
    pub ff2: LinearP<T>,
}

/// One pre-norm decoder block: causal self-attention, cross-attention into
/// the encoder output, then the feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlockP<T> {
    pub norm1: NormP<T>,
    pub self_q: LinearP<T>,
    pub self_k: LinearP<T>,
    pub self_v: LinearP<T>,
    pub self_o: LinearP<T>,
    pub norm2: NormP<T>,
    pub cross_q: LinearP<T>,
    pub cross_k: LinearP<T>,
    pub cross_v: LinearP<T>,
    pub cross_o: LinearP<T>,
    pub norm3: NormP<T>,
    pub ff1: LinearP<T>,
    pub ff2: LinearP<T>,
}

/// Autoregressive decoder: position table, blocks, final norm, and the
/// vocabulary projection.
#[derive(Clone, Debug)]
pub struct DecoderP<T> {
    pub pos: T,
    pub blocks: Vec<DecoderBlockP<T>>,
    pub final_norm: NormP<T>,
    pub lm_head: LinearP<T>,
}

/// All trainable tensors of a model, minus any task-specific classifier
/// head (which lives next to these on the owning model so the same body can
/// carry different heads).
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    /// Patch pixels → token embedding.
    pub patch: LinearP<T>,
    /// Learned position per image patch, `n_patches×width`.
    pub img_pos: T,
    /// Word embedding table, `vocab×width`; shared by the fusion encoder
    /// and (when present) the decoder input.
    pub word_emb: T,
    /// Learned position per text slot, `max_text_len×width`.
    pub text_pos: T,
    /// Modality-type embeddings: row 0 = cls, row 1 = image, row 2 = text.
    pub type_emb: T,
    /// The fusion sequence's leading summary token, `1×width`.
    pub cls_emb: T,
    pub img_blocks: Vec<BlockP<T>>,
    pub fusion_blocks: Vec<BlockP<T>>,
    /// Final norm applied to the fusion output before heads / decoding.
    pub final_norm: NormP<T>,
    /// Present only on encoder-decoder models.
    pub decoder: Option<DecoderP<T>>,
}

impl<T> LinearP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearP<U> {
        LinearP {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> LinearP<U> {
        LinearP {
            w: f(&mut self.w),
            b: f(&mut self.b),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }
}

impl<T> NormP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormP<U> {
        NormP {
            g: f(&self.g),
            b: f(&self.b),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> NormP<U> {
        NormP {
            g: f(&mut self.g),
            b: f(&mut self.b),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.g"), &self.g));
        out.push((format!("{prefix}.b"), &self.b));
    }
}

impl<T> BlockP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockP<U> {
        BlockP {
            norm1: self.norm1.map(f),
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            norm2: self.norm2.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> BlockP<U> {
        BlockP {
            norm1: self.norm1.map_mut(f),
            q: self.q.map_mut(f),
            k: self.k.map_mut(f),
            v: self.v.map_mut(f),
            o: self.o.map_mut(f),
            norm2: self.norm2.map_mut(f),
            ff1: self.ff1.map_mut(f),
            ff2: self.ff2.map_mut(f),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.norm1.named(&format!("{prefix}.norm1"), out);
        self.q.named(&format!("{prefix}.q"), out);
        self.k.named(&format!("{prefix}.k"), out);
        self.v.named(&format!("{prefix}.v"), out);
        self.o.named(&format!("{prefix}.o"), out);
        self.norm2.named(&format!("{prefix}.norm2"), out);
        self.ff1.named(&format!("{prefix}.ff1"), out);
        self.ff2.named(&format!("{prefix}.ff2"), out);
    }
}

impl<T> DecoderBlockP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderBlockP<U> {
        DecoderBlockP {
            norm1: self.norm1.map(f),
            self_q: self.self_q.map(f),
            self_k: self.self_k.map(f),
            self_v: self.self_v.map(f),
            self_o: self.self_o.map(f),
            norm2: self.norm2.map(f),
            cross_q: self.cross_q.map(f),
            cross_k: self.cross_k.map(f),
            cross_v: self.cross_v.map(f),
            cross_o: self.cross_o.map(f),
            norm3: self.norm3.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> DecoderBlockP<U> {
        DecoderBlockP {
            norm1: self.norm1.map_mut(f),
            self_q: self.self_q.map_mut(f),
            self_k: self.self_k.map_mut(f),
            self_v: self.self_v.map_mut(f),
            self_o: self.self_o.map_mut(f),
            norm2: self.norm2.map_mut(f),
            cross_q: self.cross_q.map_mut(f),
            cross_k: self.cross_k.map_mut(f),
            cross_v: self.cross_v.map_mut(f),
            cross_o: self.cross_o.map_mut(f),
            norm3: self.norm3.map_mut(f),
            ff1: self.ff1.map_mut(f),
            ff2: self.ff2.map_mut(f),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.norm1.named(&format!("{prefix}.norm1"), out);
        self.self_q.named(&format!("{prefix}.self_q"), out);
        self.self_k.named(&format!("{prefix}.self_k"), out);
        self.self_v.named(&format!("{prefix}.self_v"), out);
        self.self_o.named(&format!("{prefix}.self_o"), out);
        self.norm2.named(&format!("{prefix}.norm2"), out);
        self.cross_q.named(&format!("{prefix}.cross_q"), out);
        self.cross_k.named(&format!("{prefix}.cross_k"), out);
        self.cross_v.named(&format!("{prefix}.cross_v"), out);
        self.cross_o.named(&format!("{prefix}.cross_o"), out);
        self.norm3.named(&format!("{prefix}.norm3"), out);
        self.ff1.named(&format!("{prefix}.ff1"), out);
        self.ff2.named(&format!("{prefix}.ff2"), out);
    }
}

impl<T> DecoderP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderP<U> {
        DecoderP {
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            lm_head: self.lm_head.map(f),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> DecoderP<U> {
        DecoderP {
            pos: f(&mut self.pos),
            blocks: self.blocks.iter_mut().map(|b| b.map_mut(f)).collect(),
            final_norm: self.final_norm.map_mut(f),
            lm_head: self.lm_head.map_mut(f),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("{prefix}.blocks.{i}"), out);
        }
        self.final_norm.named(&format!("{prefix}.final_norm"), out);
        self.lm_head.named(&format!("{prefix}.lm_head"), out);
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            patch: self.patch.map(f),
            img_pos: f(&self.img_pos),
            word_emb: f(&self.word_emb),
            text_pos: f(&self.text_pos),
            type_emb: f(&self.type_emb),
            cls_emb: f(&self.cls_emb),
            img_blocks: self.img_blocks.iter().map(|b| b.map(f)).collect(),
            fusion_blocks: self.fusion_blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            decoder: self.decoder.as_ref().map(|d| d.map(f)),
        }
    }

    pub fn map_mut<U>(&mut self, f: &mut impl FnMut(&mut T) -> U) -> ModelParams<U> {
        ModelParams {
            patch: self.patch.map_mut(f),
            img_pos: f(&mut self.img_pos),
            word_emb: f(&mut self.word_emb),
            text_pos: f(&mut self.text_pos),
            type_emb: f(&mut self.type_emb),
            cls_emb: f(&mut self.cls_emb),
            img_blocks: self.img_blocks.iter_mut().map(|b| b.map_mut(f)).collect(),
            fusion_blocks: self.fusion_blocks.iter_mut().map(|b| b.map_mut(f)).collect(),
            final_norm: self.final_norm.map_mut(f),
            decoder: self.decoder.as_mut().map(|d| d.map_mut(f)),
        }
    }

    /// Stable `(name, tensor)` listing in canonical traversal order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.patch.named("patch", &mut out);
        out.push(("img_pos".to_string(), &self.img_pos));
        out.push(("word_emb".to_string(), &self.word_emb));
        out.push(("text_pos".to_string(), &self.text_pos));
        out.push(("type_emb".to_string(), &self.type_emb));
        out.push(("cls_emb".to_string(), &self.cls_emb));
        for (i, b) in self.img_blocks.iter().enumerate() {
            b.named(&format!("img_blocks.{i}"), &mut out);
        }
        for (i, b) in self.fusion_blocks.iter().enumerate() {
            b.named(&format!("fusion_blocks.{i}"), &mut out);
        }
        self.final_norm.named("final_norm", &mut out);
        if let Some(d) = &self.decoder {
            d.named("decoder", &mut out);
        }
        out
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn linear(rng: &mut ChaCha8Rng, din: usize, dout: usize, std: f64) -> LinearP<Matrix> {
    LinearP {
        w: randn(rng, din, dout, std),
        b: Matrix::zeros((1, dout)),
    }
}

fn norm(width: usize) -> NormP<Matrix> {
    NormP {
        g: Matrix::from_elem((1, width), 1.0),
        b: Matrix::zeros((1, width)),
    }
}

fn block(rng: &mut ChaCha8Rng, width: usize, ff: usize, std: f64) -> BlockP<Matrix> {
    BlockP {
        norm1: norm(width),
        q: linear(rng, width, width, std),
        k: linear(rng, width, width, std),
        v: linear(rng, width, width, std),
        o: linear(rng, width, width, std),
        norm2: norm(width),
        ff1: linear(rng, width, ff, std),
        ff2: linear(rng, ff, width, std),
    }
}

fn decoder_block(rng: &mut ChaCha8Rng, width: usize, ff: usize, std: f64) -> DecoderBlockP<Matrix> {
    DecoderBlockP {
        norm1: norm(width),
        self_q: linear(rng, width, width, std),
        self_k: linear(rng, width, width, std),
        self_v: linear(rng, width, width, std),
        self_o: linear(rng, width, width, std),
        norm2: norm(width),
        cross_q: linear(rng, width, width, std),
        cross_k: linear(rng, width, width, std),
        cross_v: linear(rng, width, width, std),
        cross_o: linear(rng, width, width, std),
        norm3: norm(width),
        ff1: linear(rng, width, ff, std),
        ff2: linear(rng, ff, width, std),
    }
}

const WEIGHT_STD: f64 = 0.05;
const EMBED_STD: f64 = 0.02;

impl ModelParams<Matrix> {
    /// Fresh random initialisation. Linear weights are drawn at a scale that
    /// keeps pre-norm activations near unit order; all biases start at zero
    /// and norms at identity.
    pub fn init(config: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = config.width;
        let ff = config.ff_width;
        ModelParams {
            patch: linear(rng, config.patch_dim(), w, WEIGHT_STD),
            img_pos: randn(rng, config.n_patches(), w, EMBED_STD),
            word_emb: randn(rng, vocab_size, w, EMBED_STD),
            text_pos: randn(rng, config.max_text_len, w, EMBED_STD),
            type_emb: randn(rng, 3, w, EMBED_STD),
            cls_emb: randn(rng, 1, w, EMBED_STD),
            img_blocks: (0..config.image_blocks).map(|_| block(rng, w, ff, WEIGHT_STD)).collect(),
            fusion_blocks: (0..config.fusion_blocks).map(|_| block(rng, w, ff, WEIGHT_STD)).collect(),
            final_norm: norm(w),
            decoder: if config.has_decoder() {
                Some(DecoderP {
                    pos: randn(rng, config.max_decode_len + 1, w, EMBED_STD),
                    blocks: (0..config.decoder_blocks)
                        .map(|_| decoder_block(rng, w, ff, WEIGHT_STD))
                        .collect(),
                    final_norm: norm(w),
                    lm_head: linear(rng, w, vocab_size, WEIGHT_STD),
                })
            } else {
                None
            },
        }
    }
}

/// Fresh classifier head mapping the summary token to `classes` logits.
pub fn init_head(width: usize, classes: usize, rng: &mut ChaCha8Rng) -> LinearP<Matrix> {
    linear(rng, width, classes, WEIGHT_STD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{ModelConfig, ModelStructure};
    use rand::SeedableRng;

    fn sample_params() -> ModelParams<Matrix> {
        let config = ModelConfig {
            structure: ModelStructure::EncoderDecoder,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        ModelParams::init(&config, 101, &mut rng)
    }

    /// `map`, `map_mut`, and `named` must walk tensors in the same order;
    /// everything from Adam state to checkpoint layout depends on it.
    #[test]
    fn traversals_agree_by_pointer_identity() {
        let mut params = sample_params();

        let mut map_order: Vec<*const Matrix> = Vec::new();
        params.map(&mut |m| map_order.push(m as *const Matrix));

        let named_order: Vec<*const Matrix> =
            params.named().iter().map(|(_, m)| *m as *const Matrix).collect();

        let mut mut_order: Vec<*const Matrix> = Vec::new();
        params.map_mut(&mut |m| mut_order.push(m as *const Matrix));

        assert_eq!(map_order, named_order, "map vs named traversal order");
        assert_eq!(map_order, mut_order, "map vs map_mut traversal order");
    }

    #[test]
    fn tensor_names_are_unique() {
        let params = sample_params();
        let named = params.named();
        let mut names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate tensor names");
    }

    #[test]
    fn encoder_only_models_have_no_decoder_tensors() {
        let config = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(&config, 101, &mut rng);
        assert!(params.decoder.is_none());
        assert!(params.named().iter().all(|(n, _)| !n.starts_with("decoder")));
    }
}
