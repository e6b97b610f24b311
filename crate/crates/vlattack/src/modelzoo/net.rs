//! Tape-level forward passes shared by training, inference, and attacks.
//!
//! Every function here takes parameters already lifted onto a
//! [`Tape`](crate::autograd::Tape) (as `Var` handles), so the same code path
//! produces gradients with respect to parameters during training and with
//! respect to image pixels during attacks — whichever inputs were registered
//! as variables.

use crate::autograd::{Matrix, Tape, Var};
use crate::modelzoo::params::{BlockP, DecoderBlockP, DecoderP, LinearP, ModelParams, NormP};
use crate::modelzoo::vocab::TokenId;
use crate::modelzoo::ModelConfig;

/// Additive attention-mask value for forbidden positions. Finite (rather
/// than −∞) so masked rows never produce NaNs, yet far below any reachable
/// score.
const MASK_OFF: f64 = -1e30;

pub(crate) fn layer_norm(tape: &mut Tape, p: &NormP<Var>, x: Var) -> Var {
    let n = tape.norm_rows(x);
    let scaled = tape.mul_row(n, p.g);
    tape.add_row(scaled, p.b)
}

pub(crate) fn linear(tape: &mut Tape, p: &LinearP<Var>, x: Var) -> Var {
    let m = tape.matmul(x, p.w);
    tape.add_row(m, p.b)
}

/// Single-head scaled dot-product attention. `mask`, when present, is added
/// to the raw scores before the softmax.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, width: usize, mask: Option<Var>) -> Var {
    let scores = tape.matmul_nt(q, k);
    let mut scaled = tape.scale(scores, 1.0 / (width as f64).sqrt());
    if let Some(m) = mask {
        scaled = tape.add(scaled, m);
    }
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Pre-norm encoder block: `x + attn(norm1(x))`, then `x + ff(norm2(x))`.
pub(crate) fn encoder_block(tape: &mut Tape, p: &BlockP<Var>, x: Var, width: usize) -> Var {
    let h = layer_norm(tape, &p.norm1, x);
    let q = linear(tape, &p.q, h);
    let k = linear(tape, &p.k, h);
    let v = linear(tape, &p.v, h);
    let mixed = attend(tape, q, k, v, width, None);
    let proj = linear(tape, &p.o, mixed);
    let x = tape.add(x, proj);

    let h2 = layer_norm(tape, &p.norm2, x);
    let ff = linear(tape, &p.ff1, h2);
    let act = tape.gelu(ff);
    let out = linear(tape, &p.ff2, act);
    tape.add(x, out)
}

/// Pre-norm decoder block: causal self-attention, cross-attention into the
/// encoder memory, feed-forward; all residual.
fn decoder_block(
    tape: &mut Tape,
    p: &DecoderBlockP<Var>,
    x: Var,
    memory: Var,
    causal: Var,
    width: usize,
) -> Var {
    let h = layer_norm(tape, &p.norm1, x);
    let q = linear(tape, &p.self_q, h);
    let k = linear(tape, &p.self_k, h);
    let v = linear(tape, &p.self_v, h);
    let mixed = attend(tape, q, k, v, width, Some(causal));
    let proj = linear(tape, &p.self_o, mixed);
    let x = tape.add(x, proj);

    let h2 = layer_norm(tape, &p.norm2, x);
    let q = linear(tape, &p.cross_q, h2);
    let k = linear(tape, &p.cross_k, memory);
    let v = linear(tape, &p.cross_v, memory);
    let mixed = attend(tape, q, k, v, width, None);
    let proj = linear(tape, &p.cross_o, mixed);
    let x = tape.add(x, proj);

    let h3 = layer_norm(tape, &p.norm3, x);
    let ff = linear(tape, &p.ff1, h3);
    let act = tape.gelu(ff);
    let out = linear(tape, &p.ff2, act);
    tape.add(x, out)
}

/// Flat gather indices mapping an image buffer `(y, x, ch)` to a
/// `n_patches × patch_dim` matrix, one row per patch in raster order.
pub(crate) fn patch_index(config: &ModelConfig) -> Vec<usize> {
    let p = config.patch_size;
    let per_side = config.image_size / p;
    let mut index = Vec::with_capacity(config.n_patches() * config.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..config.channels {
                        let y = py * p + dy;
                        let x = px * p + dx;
                        index.push((y * config.image_size + x) * config.channels + ch);
                    }
                }
            }
        }
    }
    index
}

/// Lower-triangular additive mask for causal self-attention over `len`
/// positions.
fn causal_mask(tape: &mut Tape, len: usize) -> Var {
    let mut m = Matrix::zeros((len, len));
    for i in 0..len {
        for j in (i + 1)..len {
            m[(i, j)] = MASK_OFF;
        }
    }
    tape.constant(m)
}

/// Per-block feature handles produced by [`encode`].
pub(crate) struct EncodedVars {
    /// Post-block outputs of each image-encoder block, `n_patches×width`.
    pub image_blocks: Vec<Var>,
    /// Image-token rows of each fusion block's output, `n_patches×width`.
    pub fusion_blocks: Vec<Var>,
    /// Final-normed full fusion sequence `(1 + n_patches + text)×width`.
    pub memory: Var,
    /// Final-normed summary (cls) row, `1×width`.
    pub cls: Var,
}

/// Runs the image encoder and fusion encoder over one image (already on the
/// tape as a flat `1×(h·w·c)` node) and a token sequence, which may be
/// empty.
pub(crate) fn encode(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    config: &ModelConfig,
    image: Var,
    text: &[TokenId],
) -> EncodedVars {
    assert!(
        text.len() <= config.max_text_len,
        "text length {} exceeds the model maximum {}",
        text.len(),
        config.max_text_len
    );
    let width = config.width;
    let n_patches = config.n_patches();

    // Image encoder: patchify, project, add positions, run blocks.
    let index = patch_index(config);
    let patches = tape.gather_flat(image, &index, n_patches, config.patch_dim());
    let mut tok = linear(tape, &p.patch, patches);
    tok = tape.add(tok, p.img_pos);
    let mut image_blocks = Vec::with_capacity(config.image_blocks);
    for block in &p.img_blocks {
        tok = encoder_block(tape, block, tok, width);
        image_blocks.push(tok);
    }

    // Fusion sequence: [cls] + image tokens + text tokens, each tagged with
    // its modality-type embedding.
    let type_cls = tape.gather_rows(p.type_emb, &[0]);
    let cls = tape.add(p.cls_emb, type_cls);

    let type_img = tape.gather_rows(p.type_emb, &vec![1; n_patches]);
    let img_part = tape.add(tok, type_img);

    let mut parts = vec![cls, img_part];
    if !text.is_empty() {
        let emb = tape.gather_rows(p.word_emb, text);
        let pos_ids: Vec<usize> = (0..text.len()).collect();
        let pos = tape.gather_rows(p.text_pos, &pos_ids);
        let with_pos = tape.add(emb, pos);
        let type_text = tape.gather_rows(p.type_emb, &vec![2; text.len()]);
        parts.push(tape.add(with_pos, type_text));
    }
    let mut seq = tape.concat_rows(&parts);

    let mut fusion_blocks = Vec::with_capacity(config.fusion_blocks);
    for block in &p.fusion_blocks {
        seq = encoder_block(tape, block, seq, width);
        fusion_blocks.push(tape.slice_rows(seq, 1, n_patches));
    }

    let memory = layer_norm(tape, &p.final_norm, seq);
    let cls_row = tape.slice_rows(memory, 0, 1);

    EncodedVars {
        image_blocks,
        fusion_blocks,
        memory,
        cls: cls_row,
    }
}

/// Runs the decoder over a prefix (first token is the start symbol) against
/// encoder `memory`, returning vocabulary logits for every prefix position.
pub(crate) fn decode_logits(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    dec: &DecoderP<Var>,
    config: &ModelConfig,
    memory: Var,
    prefix: &[TokenId],
) -> Var {
    assert!(!prefix.is_empty(), "decoder prefix must be non-empty");
    assert!(
        prefix.len() <= config.max_decode_len + 1,
        "decoder prefix length {} exceeds the model maximum {}",
        prefix.len(),
        config.max_decode_len + 1
    );
    let len = prefix.len();
    let emb = tape.gather_rows(p.word_emb, prefix);
    let pos_ids: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(dec.pos, &pos_ids);
    let mut x = tape.add(emb, pos);

    let causal = causal_mask(tape, len);
    for block in &dec.blocks {
        x = decoder_block(tape, block, x, memory, causal, config.width);
    }
    let normed = layer_norm(tape, &dec.final_norm, x);
    linear(tape, &dec.lm_head, normed)
}
