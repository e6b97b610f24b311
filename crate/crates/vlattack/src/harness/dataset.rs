//! Synthetic scene generation: a deterministic renderer that draws 1–3
//! colored shapes on a 32×32 canvas, plus dataset builders for the three
//! tasks and the image–caption pretraining corpus.
//!
//! Every sample is generated from its own counter-derived RNG stream, so a
//! dataset is a pure function of `(task, n, seed)` regardless of how the
//! calls are ordered or parallelised.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::BoundingBox;
use crate::error::{Error, Result};
use crate::modelzoo::{
    read_container, write_container, Container, ImageTensor, PairCorpus, PairSample, TaskDataset,
    TaskKind, TaskSample, TaskTarget, TensorEntry, Vocabulary, COLORS, SHAPES,
};

/// Canvas edge in pixels; matches the default model geometry and the
/// location-token range (corner coordinates run `0..=CANVAS`).
pub const CANVAS: usize = 32;

/// RGB value per color class, indexed like [`COLORS`]. The palette forms
/// hue ladders (red–orange–yellow, blue–purple–magenta) whose nearest
/// neighbours sit at ℓ∞ distance 0.16: far enough apart that jittered
/// sprites classify cleanly, close enough that a bounded adversarial
/// perturbation can reach a class boundary.
pub const COLOR_VALUES: [[f64; 3]; 8] = [
    [0.86, 0.10, 0.10], // red
    [0.10, 0.74, 0.10], // green
    [0.10, 0.26, 0.86], // blue
    [0.86, 0.42, 0.10], // yellow
    [0.10, 0.74, 0.42], // cyan
    [0.42, 0.10, 0.86], // magenta
    [0.86, 0.26, 0.10], // orange
    [0.26, 0.10, 0.86], // purple
];

/// Base background intensity; per-pixel noise of ±[`BACKGROUND_NOISE`] is
/// added on top.
pub const BACKGROUND: f64 = 0.08;
pub const BACKGROUND_NOISE: f64 = 0.02;

/// Per-channel color jitter applied to each sprite.
const COLOR_JITTER: f64 = 0.04;

/// One shape instance: kind index into [`SHAPES`], color index into
/// [`COLORS`], integer center, and integer "radius" (half-extent).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sprite {
    pub shape: usize,
    pub color: usize,
    pub cx: usize,
    pub cy: usize,
    pub r: usize,
}

impl Sprite {
    /// The sprite's extent as a box in pixel coordinates, exclusive on the
    /// far corner: a sprite covering pixel columns `cx−r ..= cx+r` spans
    /// the continuous interval `[cx−r, cx+r+1)`.
    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::new(
            (self.cx - self.r) as f64,
            (self.cy - self.r) as f64,
            (self.cx + self.r + 1) as f64,
            (self.cy + self.r + 1) as f64,
        )
        .expect("sprite extents are ordered by construction")
    }

    /// Whether the sprite covers pixel `(x, y)`.
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        let r = self.r as i64;
        match self.shape {
            // Circle: squared Euclidean distance inside r².
            0 => dx * dx + dy * dy <= r * r,
            // Square: Chebyshev distance inside r.
            1 => dx.abs() <= r && dy.abs() <= r,
            // Triangle: apex at the top, base at the bottom.
            2 => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            _ => unreachable!("shape index out of range"),
        }
    }
}

/// Renders sprites over a noisy dark background. Sprites are assumed
/// disjoint (the samplers below guarantee it), so paint order is
/// irrelevant.
pub fn render_scene(sprites: &[Sprite], rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut image = ImageTensor::zeros(CANVAS, CANVAS, 3);
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            for ch in 0..3 {
                let noise = rng.random_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
                image.set(y, x, ch, (BACKGROUND + noise).clamp(0.0, 1.0));
            }
        }
    }
    for sprite in sprites {
        let jitter: [f64; 3] =
            std::array::from_fn(|_| rng.random_range(-COLOR_JITTER..=COLOR_JITTER));
        let base = COLOR_VALUES[sprite.color];
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if sprite.covers(x, y) {
                    for ch in 0..3 {
                        image.set(y, x, ch, (base[ch] + jitter[ch]).clamp(0.02, 0.98));
                    }
                }
            }
        }
    }
    image
}

/// The per-sample RNG stream: one master seed, one stream per sample
/// index, so generation order and parallelism cannot change the output.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws a center position such that the sprite (with its exclusive far
/// corner) stays inside the canvas.
fn place(rng: &mut ChaCha8Rng, r: usize) -> (usize, usize) {
    let cx = rng.random_range(r..=CANVAS - 1 - r);
    let cy = rng.random_range(r..=CANVAS - 1 - r);
    (cx, cy)
}

/// Disjointness with a one-pixel margin, tested on extent boxes.
fn disjoint(a: &Sprite, b: &Sprite) -> bool {
    let (ba, bb) = (a.bounding_box(), b.bounding_box());
    ba.x2 + 1.0 <= bb.x1 || bb.x2 + 1.0 <= ba.x1 || ba.y2 + 1.0 <= bb.y1 || bb.y2 + 1.0 <= ba.y1
}

fn tokenize(text: &str) -> Result<crate::modelzoo::TokenSequence> {
    Vocabulary::shared().tokenize(text)
}

/// Sprite radius meaning "big" in size questions.
const BIG_RADIUS: usize = 7;
/// Sprite radius meaning "small" in size questions.
const SMALL_RADIUS: usize = 3;

/// Answer classes for the question-answering task: the eight colors
/// followed by the two sizes. The question decides which attribute the
/// model must report, so the text pathway carries real signal.
pub fn classification_classes() -> Vec<String> {
    COLORS.iter().chain(["big", "small"].iter()).map(|w| w.to_string()).collect()
}

/// One question-answering sample: a single sprite, and a question that asks
/// either for its color or for its size. The answer class (8 colors + 2
/// sizes) is stratified by sample index, so label counts are uniform up to
/// remainder.
fn classification_sample(index: usize, seed: u64) -> Result<(TaskSample, Sprite)> {
    let mut rng = sample_rng(seed, index);
    let class = index % (COLORS.len() + 2);
    let shape = rng.random_range(0..SHAPES.len());
    let (color, r, question) = if class < COLORS.len() {
        let r = if rng.random::<bool>() { BIG_RADIUS } else { SMALL_RADIUS };
        let question = match rng.random_range(0..3) {
            0 => format!("what color is the {}", SHAPES[shape]),
            1 => format!("which color is the {}", SHAPES[shape]),
            _ => format!("what color is this {}", SHAPES[shape]),
        };
        (class, r, question)
    } else {
        let color = rng.random_range(0..COLORS.len());
        let r = if class == COLORS.len() { BIG_RADIUS } else { SMALL_RADIUS };
        let question = match rng.random_range(0..3) {
            0 => "what size is the object".to_string(),
            1 => "which size is this thing".to_string(),
            _ => "what size is this object".to_string(),
        };
        (color, r, question)
    };
    let (cx, cy) = place(&mut rng, r);
    let sprite = Sprite { shape, color, cx, cy, r };
    let image = render_scene(&[sprite], &mut rng);
    Ok((
        TaskSample {
            image,
            text: tokenize(&question)?,
            target: TaskTarget::Class(class),
        },
        sprite,
    ))
}

/// One captioning sample: a single sprite, a fixed prompt, and the target
/// caption "a <color> <shape>".
fn generation_sample(index: usize, seed: u64) -> Result<(TaskSample, Sprite)> {
    let mut rng = sample_rng(seed, index);
    let color = index % COLORS.len();
    let shape = rng.random_range(0..SHAPES.len());
    let r = rng.random_range(3..=7);
    let (cx, cy) = place(&mut rng, r);
    let sprite = Sprite { shape, color, cx, cy, r };
    let image = render_scene(&[sprite], &mut rng);
    let prompt = match rng.random_range(0..3) {
        0 => "describe the image",
        1 => "describe the picture",
        _ => "describe this scene",
    };
    let caption = tokenize(&format!("a {} {}", COLORS[color], SHAPES[shape]))?;
    Ok((
        TaskSample {
            image,
            text: tokenize(prompt)?,
            target: TaskTarget::Caption(caption.ids().to_vec()),
        },
        sprite,
    ))
}

/// One grounding sample: 1–3 sprites with pairwise-distinct colors, a
/// referring phrase naming the referent's color and shape (unique because
/// colors are distinct), and the referent's extent box as the target.
fn grounding_sample(index: usize, seed: u64) -> Result<(TaskSample, Vec<Sprite>, usize)> {
    let mut rng = sample_rng(seed, index);
    let referent_color = index % COLORS.len();
    let wanted = 1 + rng.random_range(0..3usize);

    let mut other_colors: Vec<usize> =
        (0..COLORS.len()).filter(|&c| c != referent_color).collect();
    other_colors.shuffle(&mut rng);

    let mut sprites: Vec<Sprite> = Vec::with_capacity(wanted);
    for slot in 0..wanted {
        let color = if slot == 0 { referent_color } else { other_colors[slot - 1] };
        let shape = rng.random_range(0..SHAPES.len());
        let r = rng.random_range(3..=6);
        let mut placed = false;
        for _ in 0..40 {
            let (cx, cy) = place(&mut rng, r);
            let candidate = Sprite { shape, color, cx, cy, r };
            if sprites.iter().all(|s| disjoint(s, &candidate)) {
                sprites.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break; // keep the sprites that fit; the referent always does
        }
    }

    let referent = sprites[0];
    let image = render_scene(&sprites, &mut rng);
    let phrase = match rng.random_range(0..3) {
        0 => format!("find the {} {}", COLORS[referent.color], SHAPES[referent.shape]),
        1 => format!("point to the {} {}", COLORS[referent.color], SHAPES[referent.shape]),
        _ => format!("the {} {}", COLORS[referent.color], SHAPES[referent.shape]),
    };
    Ok((
        TaskSample {
            image,
            text: tokenize(&phrase)?,
            target: TaskTarget::Box(referent.bounding_box()),
        },
        sprites,
        0,
    ))
}

/// Builds a labelled dataset of `n` samples for `task`. Deterministic per
/// `(task, n, seed)`; a prefix of a larger dataset with the same seed is
/// identical to a smaller one.
pub fn synthesize_dataset(task: TaskKind, n: usize, seed: u64) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::Input("a dataset needs at least one sample".into()));
    }
    let samples: Result<Vec<TaskSample>> = (0..n)
        .map(|i| {
            Ok(match task {
                TaskKind::Classification => classification_sample(i, seed)?.0,
                TaskKind::Generation => generation_sample(i, seed)?.0,
                TaskKind::Grounding => grounding_sample(i, seed)?.0,
            })
        })
        .collect();
    let classes = if task == TaskKind::Classification {
        classification_classes()
    } else {
        Vec::new()
    };
    Ok(TaskDataset { task, classes, samples: samples? })
}

/// Builds an image–caption corpus for pretraining: single-sprite scenes
/// captioned "a <color> <shape>", colors stratified by index.
pub fn synthesize_pretraining_corpus(n: usize, seed: u64) -> Result<PairCorpus> {
    if n == 0 {
        return Err(Error::Input("a corpus needs at least one pair".into()));
    }
    let pairs: Result<Vec<PairSample>> = (0..n)
        .map(|i| {
            // Size-annotated single-sprite scenes: captions name every
            // attribute the downstream questions can ask about, so the
            // pretrained features already carry color and size.
            let mut rng = sample_rng(seed, i);
            let color = i % COLORS.len();
            let shape = rng.random_range(0..SHAPES.len());
            let (size_word, r) = if rng.random::<bool>() {
                ("big", BIG_RADIUS)
            } else {
                ("small", SMALL_RADIUS)
            };
            let (cx, cy) = place(&mut rng, r);
            let sprite = Sprite { shape, color, cx, cy, r };
            let image = render_scene(&[sprite], &mut rng);
            // Half the captions carry the size word: enough for pretraining
            // to expose size features without letting sprite mass crowd out
            // color as the dominant matching cue.
            let caption = if rng.random::<bool>() {
                tokenize(&format!("a {size_word} {} {}", COLORS[color], SHAPES[shape]))?
            } else {
                tokenize(&format!("a {} {}", COLORS[color], SHAPES[shape]))?
            };
            Ok(PairSample { image, caption })
        })
        .collect();
    Ok(PairCorpus { pairs: pairs? })
}

/// One manifest row: where the sample's image starts inside the container
/// file, the query text, and the label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Name of the image tensor in the container.
    pub tensor: String,
    /// Absolute byte offset of the image payload within the container file.
    pub image_offset: u64,
    pub text: String,
    pub label: TaskTarget,
}

/// The JSON manifest written next to a dataset container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
    pub samples: Vec<ManifestEntry>,
}

const DATASET_KIND: &str = "task-dataset";

/// Writes a dataset as a tensor container (one `image_<i>` entry per
/// sample) plus a JSON manifest of (image offset, question text, label).
pub fn save_dataset(
    data: &TaskDataset,
    container_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Input("refusing to write an empty dataset".into()));
    }
    let (h, w, c) = data.samples[0].image.dims();
    let tensors: Vec<TensorEntry> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| TensorEntry::from_matrix(&format!("image_{i}"), &s.image.flat_matrix()))
        .collect();
    let container = Container {
        kind: DATASET_KIND.to_string(),
        meta: serde_json::json!({
            "task": data.task,
            "image_size": h,
            "channels": c,
        }),
        tensors,
    };
    let offsets = write_container(container_path, &container)?;
    debug_assert_eq!(h, w, "canvases are square");

    let samples = data
        .samples
        .iter()
        .zip(&offsets)
        .map(|(s, (name, offset))| ManifestEntry {
            tensor: name.clone(),
            image_offset: *offset,
            text: s.text.raw_text().to_string(),
            label: s.target.clone(),
        })
        .collect();
    let manifest = DatasetManifest {
        task: data.task,
        classes: data.classes.clone(),
        image_size: h,
        channels: c,
        samples,
    };
    std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads back a dataset written by [`save_dataset`].
pub fn load_dataset(container_path: &Path, manifest_path: &Path) -> Result<TaskDataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    let container = read_container(container_path)?;
    if container.kind != DATASET_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {DATASET_KIND} container, found {:?}",
            container.kind
        )));
    }
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        container.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let tensor = by_name.get(entry.tensor.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("manifest names missing tensor {:?}", entry.tensor))
        })?;
        let image = ImageTensor::new(
            manifest.image_size,
            manifest.image_size,
            manifest.channels,
            tensor.data.clone(),
        )?;
        samples.push(TaskSample {
            image,
            text: tokenize(&entry.text)?,
            target: entry.label.clone(),
        });
    }
    Ok(TaskDataset { task: manifest.task, classes: manifest.classes.clone(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{ModelConfig, UNK};

    #[test]
    fn canvas_matches_the_default_model_geometry() {
        let config = ModelConfig::default();
        assert_eq!(CANVAS, config.image_size);
        assert_eq!(3, config.channels);
        // Corner coordinates 0..=CANVAS all have location tokens.
        assert!(CANVAS < crate::modelzoo::LOC_TOKENS);
    }

    #[test]
    fn datasets_are_deterministic_per_seed_and_prefix_stable() {
        for task in [TaskKind::Classification, TaskKind::Generation, TaskKind::Grounding] {
            let a = synthesize_dataset(task, 12, 5).unwrap();
            let b = synthesize_dataset(task, 12, 5).unwrap();
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.image, y.image);
                assert_eq!(x.text.ids(), y.text.ids());
                assert_eq!(x.target, y.target);
            }
            let shorter = synthesize_dataset(task, 5, 5).unwrap();
            for (x, y) in shorter.samples.iter().zip(&a.samples) {
                assert_eq!(x.image, y.image, "prefix stability under {task:?}");
            }
            let c = synthesize_dataset(task, 12, 6).unwrap();
            assert!(
                a.samples.iter().zip(&c.samples).any(|(x, y)| x.image != y.image),
                "different seeds should render differently"
            );
        }
        assert!(synthesize_dataset(TaskKind::Classification, 0, 1).is_err());
    }

    #[test]
    fn class_labels_are_approximately_uniform_at_800_samples() {
        let data = synthesize_dataset(TaskKind::Classification, 800, 0).unwrap();
        assert_eq!(data.classes.len(), 10, "eight colors and two sizes");
        let mut counts = [0usize; 10];
        for s in &data.samples {
            match s.target {
                TaskTarget::Class(c) => counts[c] += 1,
                _ => panic!("classification targets must be class indices"),
            }
        }
        let per_class = 800 / 10;
        for (class, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64) >= 0.8 * per_class as f64
                    && (count as f64) <= 1.2 * per_class as f64,
                "class {class} has {count} samples, outside ±20% of {per_class}"
            );
        }
    }

    #[test]
    fn rendered_pixels_stay_in_range_and_texts_stay_in_vocabulary() {
        for task in [TaskKind::Classification, TaskKind::Generation, TaskKind::Grounding] {
            let data = synthesize_dataset(task, 24, 3).unwrap();
            let config = ModelConfig::default();
            for s in &data.samples {
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(s.text.len() <= config.max_text_len, "question fits the encoder");
                assert!(
                    !s.text.ids().contains(&UNK),
                    "template words must all be in the vocabulary: {:?}",
                    s.text.raw_text()
                );
            }
        }
    }

    #[test]
    fn captions_are_two_to_four_tokens() {
        let data = synthesize_dataset(TaskKind::Generation, 24, 3).unwrap();
        let config = ModelConfig::default();
        for s in &data.samples {
            match &s.target {
                TaskTarget::Caption(ids) => {
                    assert!((2..=4).contains(&ids.len()));
                    assert!(ids.len() < config.max_decode_len, "room for the end token");
                }
                _ => panic!("generation targets must be captions"),
            }
        }
    }

    #[test]
    fn grounding_scenes_have_valid_boxes_and_unique_referents() {
        for i in 0..40 {
            let (sample, sprites, referent) = grounding_sample(i, 9).unwrap();
            assert!(!sprites.is_empty() && sprites.len() <= 3);
            let target = match &sample.target {
                TaskTarget::Box(b) => *b,
                _ => panic!("grounding targets must be boxes"),
            };
            assert_eq!(target, sprites[referent].bounding_box());

            for s in &sprites {
                let b = s.bounding_box();
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= CANVAS as f64 && b.y2 <= CANVAS as f64);
                assert!(b.x1 < b.x2 && b.y1 < b.y2);
                assert_eq!(b.x1.fract(), 0.0, "corners are integers in location units");
            }
            // The referring phrase (color, shape) pair matches exactly one sprite.
            let r = sprites[referent];
            let matches = sprites
                .iter()
                .filter(|s| s.color == r.color && s.shape == r.shape)
                .count();
            assert_eq!(matches, 1, "referent must be unique in scene {i}");
            // Sprites never share a color, and never overlap.
            for (a, sa) in sprites.iter().enumerate() {
                for sb in &sprites[a + 1..] {
                    assert_ne!(sa.color, sb.color);
                    assert!(disjoint(sa, sb));
                }
            }
        }
    }

    #[test]
    fn sprites_paint_inside_their_boxes_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for shape in 0..3 {
            let sprite = Sprite { shape, color: 2, cx: 16, cy: 14, r: 5 };
            let image = render_scene(&[sprite], &mut rng);
            let b = sprite.bounding_box();
            let mut painted = 0;
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    // Blue channel of color 2 is bright; background is dark.
                    let lit = image.get(y, x, 2) > 0.5;
                    let inside = (x as f64) >= b.x1
                        && (x as f64) < b.x2
                        && (y as f64) >= b.y1
                        && (y as f64) < b.y2;
                    if lit {
                        painted += 1;
                        assert!(inside, "lit pixel ({x}, {y}) outside the extent box");
                    }
                    if !inside {
                        assert!(image.get(y, x, 2) < BACKGROUND + BACKGROUND_NOISE + 1e-9);
                    }
                }
            }
            assert!(painted > 0, "shape {shape} must paint something");
            assert!(sprite.covers(sprite.cx, sprite.cy + 2), "near-center pixel covered");
        }
    }

    #[test]
    fn pretraining_corpus_is_deterministic_with_varied_captions() {
        let a = synthesize_pretraining_corpus(16, 2).unwrap();
        let b = synthesize_pretraining_corpus(16, 2).unwrap();
        assert_eq!(a.pairs.len(), 16);
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.caption.ids(), y.caption.ids());
        }
        let distinct: std::collections::HashSet<_> =
            a.pairs.iter().map(|p| p.caption.ids().to_vec()).collect();
        assert!(distinct.len() >= 8, "caption diversity feeds the matching objective");
        assert!(synthesize_pretraining_corpus(0, 2).is_err());
    }

    #[test]
    fn datasets_round_trip_through_container_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("data.bin");
        let json = dir.path().join("data.json");
        for task in [TaskKind::Classification, TaskKind::Generation, TaskKind::Grounding] {
            let data = synthesize_dataset(task, 6, 11).unwrap();
            save_dataset(&data, &bin, &json).unwrap();
            let back = load_dataset(&bin, &json).unwrap();
            assert_eq!(back.task, data.task);
            assert_eq!(back.classes, data.classes);
            assert_eq!(back.samples.len(), data.samples.len());
            for (x, y) in data.samples.iter().zip(&back.samples) {
                assert_eq!(x.image, y.image);
                assert_eq!(x.text.ids(), y.text.ids());
                assert_eq!(x.target, y.target);
            }
        }
    }

    #[test]
    fn manifest_offsets_point_at_the_raw_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("data.bin");
        let json = dir.path().join("data.json");
        let data = synthesize_dataset(TaskKind::Classification, 4, 13).unwrap();
        save_dataset(&data, &bin, &json).unwrap();

        let manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        for (entry, sample) in manifest.samples.iter().zip(&data.samples) {
            let at = entry.image_offset as usize;
            let first = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            assert_eq!(first, sample.image.data()[0], "offset {at} must hit pixel 0");
            assert_eq!(entry.text, sample.text.raw_text());
        }
    }
}
