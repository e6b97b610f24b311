//! On-disk container for tensors plus a JSON descriptor.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! concatenated tensor payloads as little-endian `f64`. The header records
//! the container kind, free-form metadata, and for every tensor its name,
//! shape, and byte offset into the payload region. Readers validate the
//! format tag, offsets, and shape/byte agreement before returning anything.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::modelzoo::params::{init_head, LinearP, ModelParams};
use crate::modelzoo::vocab::Vocabulary;
use crate::modelzoo::{FineTunedTask, ModelConfig, PretrainedModel, TaskKind};

const FORMAT_TAG: &str = "vlab-container-v1";

/// One named tensor with its payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        TensorEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", self.name)))
    }
}

/// A kind tag, free-form metadata, and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<HeaderTensor>,
}

/// Writes a container to `path`, replacing any existing file. Returns each
/// tensor's absolute byte offset within the file, in container order, so
/// callers can publish out-of-band indices (e.g. a dataset manifest).
pub fn write_container(path: &Path, container: &Container) -> Result<Vec<(String, u64)>> {
    let mut offset = 0u64;
    let mut header_tensors = Vec::with_capacity(container.tensors.len());
    for t in &container.tensors {
        if t.data.len() != t.rows * t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has {} values but shape {}x{}",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            )));
        }
        header_tensors.push(HeaderTensor {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
            offset,
        });
        offset += (t.data.len() * 8) as u64;
    }
    let header = Header {
        format: FORMAT_TAG.to_string(),
        kind: container.kind.clone(),
        meta: container.meta.clone(),
        tensors: header_tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_base = 8 + header_bytes.len() as u64;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut absolute = Vec::with_capacity(container.tensors.len());
    let mut written = 0u64;
    for t in &container.tensors {
        absolute.push((t.name.clone(), payload_base + written));
        for value in &t.data {
            file.write_all(&value.to_le_bytes())?;
        }
        written += (t.data.len() * 8) as u64;
    }
    file.flush()?;
    Ok(absolute)
}

/// Reads and validates a container written by [`write_container`].
pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short for a header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Checkpoint("header length overflows".into()))?;
    if bytes.len() < payload_start {
        return Err(Error::Checkpoint(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported container format {:?}",
            header.format
        )));
    }
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut seen = std::collections::HashSet::new();
    for t in &header.tensors {
        if !seen.insert(t.name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {:?}", t.name)));
        }
        let n_bytes = t.rows * t.cols * 8;
        let start = t.offset as usize;
        let end = start
            .checked_add(n_bytes)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {:?} range overflows", t.name)))?;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} extends past the payload ({} > {})",
                t.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(TensorEntry {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
            data,
        });
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

fn tensors_of(params: &ModelParams<Matrix>, head: Option<(&str, &LinearP<Matrix>)>) -> Vec<TensorEntry> {
    let mut out: Vec<TensorEntry> = params
        .named()
        .into_iter()
        .map(|(name, m)| TensorEntry::from_matrix(&name, m))
        .collect();
    if let Some((prefix, h)) = head {
        out.push(TensorEntry::from_matrix(&format!("{prefix}.w"), &h.w));
        out.push(TensorEntry::from_matrix(&format!("{prefix}.b"), &h.b));
    }
    out
}

/// Overwrites `params` (and optionally a head) from container tensors,
/// requiring an exact match of names, order, and shapes.
fn fill_from(
    container: &Container,
    params: &mut ModelParams<Matrix>,
    head: Option<(&str, &mut LinearP<Matrix>)>,
) -> Result<()> {
    let expected: Vec<String> = {
        let mut names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if let Some((prefix, _)) = &head {
            names.push(format!("{prefix}.w"));
            names.push(format!("{prefix}.b"));
        }
        names
    };
    let found: Vec<&str> = container.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected.len() != found.len() || expected.iter().zip(&found).any(|(e, f)| e != f) {
        return Err(Error::Checkpoint(format!(
            "tensor roster mismatch: expected {} tensors starting {:?}, found {} starting {:?}",
            expected.len(),
            expected.first(),
            found.len(),
            found.first()
        )));
    }
    let mut iter = container.tensors.iter();
    let mut fill = |m: &mut Matrix| -> Result<()> {
        let t = iter.next().expect("length checked above");
        let loaded = t.to_matrix()?;
        if loaded.raw_dim() != m.raw_dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {}x{} but the model expects {}x{}",
                t.name,
                t.rows,
                t.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        *m = loaded;
        Ok(())
    };
    let mut first_err: Option<Error> = None;
    params.map_mut(&mut |m| {
        if first_err.is_none() {
            if let Err(e) = fill(m) {
                first_err = Some(e);
            }
        }
    });
    if let Some((_, h)) = head {
        if first_err.is_none() {
            if let Err(e) = fill(&mut h.w) {
                first_err = Some(e);
            }
        }
        if first_err.is_none() {
            if let Err(e) = fill(&mut h.b) {
                first_err = Some(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct PretrainedMeta {
    config: ModelConfig,
    seed: u64,
    vocab_fingerprint: u64,
    has_matching_head: bool,
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    config: ModelConfig,
    seed: u64,
    vocab_fingerprint: u64,
    task_kind: TaskKind,
    class_names: Vec<String>,
    answer_ids: Vec<usize>,
    has_head: bool,
}

impl PretrainedModel {
    /// Saves every tensor plus the configuration needed to rebuild.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PretrainedMeta {
            config: self.config.clone(),
            seed: self.seed,
            vocab_fingerprint: Vocabulary::shared().fingerprint(),
            has_matching_head: self.itm_head.is_some(),
        };
        let container = Container {
            kind: "pretrained-model".to_string(),
            meta: serde_json::to_value(&meta)?,
            tensors: tensors_of(&self.params, self.itm_head.as_ref().map(|h| ("matching_head", h))),
        };
        write_container(path, &container)?;
        Ok(())
    }

    /// Loads a model saved by [`PretrainedModel::save`].
    pub fn load(path: &Path) -> Result<PretrainedModel> {
        let container = read_container(path)?;
        if container.kind != "pretrained-model" {
            return Err(Error::Checkpoint(format!(
                "expected a pretrained-model container, found {:?}",
                container.kind
            )));
        }
        let meta: PretrainedMeta = serde_json::from_value(container.meta.clone())?;
        meta.config.validate()?;
        let vocab = Vocabulary::shared();
        if meta.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different vocabulary".into(),
            ));
        }
        let mut model = crate::modelzoo::build_pretrained(&meta.config, meta.seed)?;
        if !meta.has_matching_head {
            model.itm_head = None;
        }
        let head = model.itm_head.as_mut().map(|h| ("matching_head", h));
        fill_from(&container, &mut model.params, head)?;
        Ok(model)
    }
}

impl FineTunedTask {
    /// Saves the fine-tuned weights and task description.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TaskMeta {
            config: self.config.clone(),
            seed: self.seed,
            vocab_fingerprint: Vocabulary::shared().fingerprint(),
            task_kind: self.task_kind,
            class_names: self.class_names.clone(),
            answer_ids: self.answer_ids.clone(),
            has_head: self.head.is_some(),
        };
        let container = Container {
            kind: "fine-tuned-task".to_string(),
            meta: serde_json::to_value(&meta)?,
            tensors: tensors_of(&self.params, self.head.as_ref().map(|h| ("task_head", h))),
        };
        write_container(path, &container)?;
        Ok(())
    }

    /// Loads a victim saved by [`FineTunedTask::save`].
    pub fn load(path: &Path) -> Result<FineTunedTask> {
        let container = read_container(path)?;
        if container.kind != "fine-tuned-task" {
            return Err(Error::Checkpoint(format!(
                "expected a fine-tuned-task container, found {:?}",
                container.kind
            )));
        }
        let meta: TaskMeta = serde_json::from_value(container.meta.clone())?;
        meta.config.validate()?;
        let vocab = Vocabulary::shared();
        if meta.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different vocabulary".into(),
            ));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(meta.seed);
        let mut params = ModelParams::init(&meta.config, vocab.size(), &mut rng);
        let mut head = if meta.has_head {
            Some(init_head(meta.config.width, meta.class_names.len().max(1), &mut rng))
        } else {
            None
        };
        fill_from(&container, &mut params, head.as_mut().map(|h| ("task_head", h)))?;
        Ok(FineTunedTask {
            config: meta.config,
            params,
            head,
            task_kind: meta.task_kind,
            class_names: meta.class_names,
            answer_ids: meta.answer_ids,
            seed: meta.seed,
        })
    }
}
