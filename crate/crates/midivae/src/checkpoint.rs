//! Versioned checkpoint container.
//!
//! Layout: magic `MVAE`, a little-endian u32 format version, a u64 JSON
//! length, the JSON metadata block, then one contiguous little-endian `f64`
//! blob holding every parameter tensor in metadata order followed by the
//! optimizer's first and second moments (when present). The metadata records
//! the model configuration, the vocabulary, tensor names/shapes, optimizer
//! scalars and the training counters needed for bit-stable resumption.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MidiVae, ModelConfig};
use crate::nn::Adam;
use crate::octuple::{OctupleVocabulary, VocabularyFile};

const MAGIC: &[u8; 4] = b"MVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

/// Counters from which the trainer's random streams are reconstructed.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainerState {
    pub seed: u64,
    /// Optimizer steps completed.
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    model_config: ModelConfig,
    vocabulary: VocabularyFile,
    vocab_fingerprint: String,
    trainer: TrainerState,
    tensors: Vec<TensorMeta>,
    optimizer: Option<OptimizerMeta>,
}

/// A deserialized checkpoint: the rebuilt model plus optimizer and trainer
/// counters.
pub struct Checkpoint {
    pub model: MidiVae,
    pub vocab: OctupleVocabulary,
    pub adam: Option<Adam>,
    pub trainer: TrainerState,
}

/// Serialize model (+ optimizer) state to `path`.
pub fn save(
    path: impl AsRef<Path>,
    model: &MidiVae,
    vocab: &OctupleVocabulary,
    adam: Option<&Adam>,
    trainer: &TrainerState,
) -> Result<()> {
    let tensors: Vec<TensorMeta> = model
        .params
        .iter()
        .map(|(_, name, v)| TensorMeta { name: name.to_string(), rows: v.nrows(), cols: v.ncols() })
        .collect();
    let meta = Metadata {
        version: CHECKPOINT_VERSION,
        model_config: model.config.clone(),
        vocabulary: vocab.to_file(),
        vocab_fingerprint: vocab.fingerprint(),
        trainer: trainer.clone(),
        tensors,
        optimizer: adam.map(|a| OptimizerMeta {
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            step: a.step,
        }),
    };
    let json = serde_json::to_vec(&meta)?;

    let p = path.as_ref();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let write_mat = |m: &Array2<f64>, out: &mut Vec<u8>| {
        for &x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (_, _, v) in model.params.iter() {
        write_mat(v, &mut out);
    }
    if let Some(a) = adam {
        for m in &a.m {
            write_mat(m, &mut out);
        }
        for v in &a.v {
            write_mat(v, &mut out);
        }
    }
    let mut f = fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(p.display().to_string(), e))?;
    Ok(())
}

/// Load a checkpoint and rebuild the model around it.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let fail = |m: &str| Error::Checkpoint(format!("{}: {m}", p.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("missing MVAE magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + json_len > bytes.len() {
        return Err(fail("truncated metadata"));
    }
    let meta: Metadata = serde_json::from_slice(&bytes[16..16 + json_len])?;
    let vocab = OctupleVocabulary::from_file(meta.vocabulary.clone())?;
    if vocab.fingerprint() != meta.vocab_fingerprint {
        return Err(fail("vocabulary fingerprint does not match its contents"));
    }

    // model seeded arbitrarily; every tensor is overwritten below
    let mut model = MidiVae::new(meta.model_config.clone(), 0)?;

    let scalar_count: usize = meta.tensors.iter().map(|t| t.rows * t.cols).sum();
    let with_opt = meta.optimizer.is_some();
    let expected = 16 + json_len + 8 * scalar_count * if with_opt { 3 } else { 1 };
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload size mismatch: got {} bytes, expected {expected}",
            bytes.len()
        )));
    }

    let mut offset = 16 + json_len;
    let read_mat = |rows: usize, cols: usize, offset: &mut usize| -> Array2<f64> {
        let mut m = Array2::zeros((rows, cols));
        for x in m.iter_mut() {
            *x = f64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
            *offset += 8;
        }
        m
    };

    for t in &meta.tensors {
        let id = model
            .params
            .id(&t.name)
            .ok_or_else(|| fail(&format!("unknown tensor `{}` for this architecture", t.name)))?;
        let current = model.params.value(id);
        if current.nrows() != t.rows || current.ncols() != t.cols {
            return Err(fail(&format!(
                "tensor `{}` has shape {}x{}, expected {}x{}",
                t.name,
                t.rows,
                t.cols,
                current.nrows(),
                current.ncols()
            )));
        }
        let m = read_mat(t.rows, t.cols, &mut offset);
        model.params.set(id, m);
    }

    let adam = match &meta.optimizer {
        Some(o) => {
            let mut adam = Adam::new(&model.params, o.learning_rate);
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.epsilon = o.epsilon;
            adam.step = o.step;
            for t in &meta.tensors {
                let id = model.params.id(&t.name).expect("checked above");
                adam.m[id] = read_mat(t.rows, t.cols, &mut offset);
            }
            for t in &meta.tensors {
                let id = model.params.id(&t.name).expect("checked above");
                adam.v[id] = read_mat(t.rows, t.cols, &mut offset);
            }
            Some(adam)
        }
        None => None,
    };

    Ok(Checkpoint { model, vocab, adam, trainer: meta.trainer })
}

/// The vocabulary fingerprint stored in a checkpoint, without loading the
/// tensors.
pub fn peek_fingerprint(path: impl AsRef<Path>) -> Result<String> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: missing MVAE magic", p.display())));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[16..16 + json_len])?;
    Ok(meta.vocab_fingerprint)
}
