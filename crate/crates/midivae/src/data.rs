//! Corpus ingestion, splits, caching, batching and the synthetic four-part
//! chorale generator used for desk-scale training and tests.
//!
//! Layout produced by [`ingest_corpus`] in the output directory:
//! `manifest.json` (entries with split tags and cache offsets),
//! `cache.bin` (length-prefixed token records, one per piece) and
//! `rejects.json` (pieces that failed parsing/encoding, with reasons).
//! Split assignment is a pure function of the piece id and the ratio
//! configuration, so it is stable across runs and machines.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi;
use crate::octuple::{encode_score, NoteEvent, OctupleToken, OctupleVocabulary, TokenSequence};
use crate::views::{PieceViews, ViewDims};

pub const MANIFEST_VERSION: u32 = 1;
pub const CACHE_FILE: &str = "cache.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REJECTS_FILE: &str = "rejects.json";
pub const VOCAB_FILE: &str = "vocabulary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Contract(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub split: Split,
    pub notes: usize,
    pub tracks: usize,
    pub bars: usize,
    /// Byte offset of this piece's record in the cache file.
    pub cache_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub vocab_fingerprint: String,
    pub cache_file: String,
    pub split_ratios: (f64, f64, f64),
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split_len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: CorpusManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectsReport {
    pub rejected: Vec<(String, String)>,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Avalanche finalizer; FNV alone barely moves its high bits when ids
/// differ only in trailing characters.
fn mix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^= h >> 33;
    h
}

/// Stable split assignment from the piece id alone.
pub fn split_of(id: &str, ratios: (f64, f64, f64)) -> Split {
    let u = mix64(fnv1a(id.as_bytes())) as f64 / u64::MAX as f64;
    if u < ratios.0 {
        Split::Train
    } else if u < ratios.0 + ratios.1 {
        Split::Validation
    } else {
        Split::Test
    }
}

/// Parse, encode, validate and cache every piece under `root`. Unreadable or
/// over-capacity pieces are skipped and listed in the rejects report, never
/// silently dropped.
pub fn ingest_corpus(
    root: impl AsRef<Path>,
    vocab: &OctupleVocabulary,
    dims: &ViewDims,
    out_dir: impl AsRef<Path>,
    ratios: (f64, f64, f64),
) -> Result<(CorpusManifest, RejectsReport)> {
    let root = root.as_ref();
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    if (ratios.0 + ratios.1 + ratios.2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split ratios must sum to 1".into()));
    }

    let mut files: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "mid" || e == "midi" || e == "smf" || e == "json"
                })
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    let mut cache: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for path in files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("piece")
            .to_string();
        match encode_file(&path, vocab, dims) {
            Ok(views) => {
                let offset = cache.len() as u64;
                write_record(&mut cache, views.seq.tokens());
                entries.push(ManifestEntry {
                    id: id.clone(),
                    source: path.display().to_string(),
                    split: split_of(&id, ratios),
                    notes: views.seq.len(),
                    tracks: views.track_tensor.group_lengths().iter().filter(|&&l| l > 0).count(),
                    bars: views.bar_tensor.group_lengths().iter().filter(|&&l| l > 0).count(),
                    cache_offset: offset,
                });
            }
            Err(e) => rejected.push((id, e.to_string())),
        }
    }

    let cache_path = out_dir.join(CACHE_FILE);
    fs::write(&cache_path, &cache).map_err(|e| Error::io(cache_path.display().to_string(), e))?;
    let vocab_path = out_dir.join(VOCAB_FILE);
    fs::write(&vocab_path, serde_json::to_string_pretty(&vocab.to_file())?)
        .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        vocab_fingerprint: vocab.fingerprint(),
        cache_file: CACHE_FILE.to_string(),
        split_ratios: ratios,
        entries,
    };
    manifest.save(out_dir)?;
    let rejects = RejectsReport { rejected };
    let rejects_path = out_dir.join(REJECTS_FILE);
    fs::write(&rejects_path, serde_json::to_string_pretty(&rejects)?)
        .map_err(|e| Error::io(rejects_path.display().to_string(), e))?;
    Ok((manifest, rejects))
}

fn encode_file(path: &Path, vocab: &OctupleVocabulary, dims: &ViewDims) -> Result<PieceViews> {
    let events = midi::load_events(path)?;
    let seq = encode_score(&events, vocab)?;
    PieceViews::build(seq, vocab, dims)
}

fn write_record(cache: &mut Vec<u8>, tokens: &[OctupleToken]) {
    cache.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        for v in t.as_array() {
            cache.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_record(bytes: &[u8], offset: u64) -> Result<Vec<OctupleToken>> {
    let start = offset as usize;
    let fail = || Error::Contract(format!("corrupt cache record at offset {offset}"));
    if start + 4 > bytes.len() {
        return Err(fail());
    }
    let count = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
    let mut pos = start + 4;
    if pos + count * 32 > bytes.len() {
        return Err(fail());
    }
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let mut a = [0u32; 8];
        for slot in a.iter_mut() {
            *slot = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            pos += 4;
        }
        tokens.push(OctupleToken::from_array(a));
    }
    Ok(tokens)
}

/// One cached piece rebuilt into its view tensors.
#[derive(Debug, Clone)]
pub struct LoadedPiece {
    pub id: String,
    pub views: PieceViews,
}

/// Load every piece of one split from the cache.
pub fn load_split(
    manifest: &CorpusManifest,
    dir: &Path,
    vocab: &OctupleVocabulary,
    dims: &ViewDims,
    split: Split,
) -> Result<Vec<LoadedPiece>> {
    if manifest.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::VocabMismatch {
            checkpoint: vocab.fingerprint(),
            corpus: manifest.vocab_fingerprint.clone(),
        });
    }
    let cache_path = dir.join(&manifest.cache_file);
    let bytes =
        fs::read(&cache_path).map_err(|e| Error::io(cache_path.display().to_string(), e))?;
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        let tokens = read_record(&bytes, e.cache_offset)?;
        let seq = TokenSequence::new(tokens, Some(e.id.clone()));
        out.push(LoadedPiece { id: e.id.clone(), views: PieceViews::build(seq, vocab, dims)? });
    }
    Ok(out)
}

/// Deterministic epoch ordering: a seeded Fisher-Yates permutation that is a
/// pure function of (seed, epoch).
pub fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Index batches for one epoch; the final partial batch is included.
pub fn epoch_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let order = epoch_order(count, seed, epoch);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ---- synthetic chorale generation ----

/// Parameters of the synthetic four-part chorale corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub pieces: usize,
    pub bars: usize,
    /// Average notes per part per bar; realized patterns are whole, half or
    /// quarter notes.
    pub density: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec { pieces: 512, bars: 8, density: 2.0, seed: 17 }
    }
}

/// Disjoint SATB pitch ranges (soprano down to bass), each spanning a full
/// octave so every chord tone is reachable.
const PART_RANGES: [(u8, u8); 4] = [(68, 80), (56, 67), (44, 55), (32, 43)];

/// Instrument quartets drawn from the thirteen chamber programs, listed in
/// soprano-to-bass order.
const ENSEMBLES: [[u8; 4]; 4] = [
    [40, 41, 42, 43], // strings
    [56, 60, 57, 58], // brass
    [73, 68, 71, 70], // winds
    [73, 41, 57, 43], // mixed
];

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const PROGRESSIONS: [[usize; 4]; 4] =
    [[0, 3, 4, 0], [0, 5, 3, 4], [0, 4, 5, 3], [0, 3, 0, 4]];
const TEMPOS: [f64; 5] = [90.0, 96.0, 108.0, 120.0, 132.0];
const VELOCITIES: [u8; 5] = [64, 72, 80, 88, 96];

/// Generate one piece deterministically from (seed, index).
pub fn synth_piece(spec: &SyntheticCorpusSpec, index: usize) -> Vec<NoteEvent> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64 + 1).wrapping_mul(0x2545f4914f6cdd1d));
    let ensemble = ENSEMBLES[rng.random_range(0..ENSEMBLES.len())];
    let root: u8 = rng.random_range(0..12);
    let progression = PROGRESSIONS[rng.random_range(0..PROGRESSIONS.len())];
    let tempo = TEMPOS[rng.random_range(0..TEMPOS.len())];

    // pattern mix tuned so expected notes per part per bar equals density
    let p_quarters = ((spec.density - 1.5) / 3.0).clamp(0.0, 0.5);
    let p_halves = 0.5;

    let mut events = Vec::new();
    for bar in 0..spec.bars {
        let degree = progression[bar % progression.len()];
        let chord: Vec<u8> = [0usize, 2, 4]
            .iter()
            .map(|&o| (root + MAJOR_SCALE[(degree + o) % 7]) % 12)
            .collect();
        for (part, &(lo, hi)) in PART_RANGES.iter().enumerate() {
            let u: f64 = rng.random();
            let onsets: &[u64] = if u < p_quarters {
                &[0, 4, 8, 12]
            } else if u < p_quarters + p_halves {
                &[0, 8]
            } else {
                &[0]
            };
            let slot = 120u64;
            for (k, &pos) in onsets.iter().enumerate() {
                let next = onsets.get(k + 1).copied().unwrap_or(16);
                // chord tone nearest the middle of the part range, with a
                // small random walk for melodic variety
                let anchor =
                    (lo as i32 + hi as i32) / 2 + rng.random_range(-3..=3);
                let mut best: u8 = lo;
                let mut best_d = i32::MAX;
                for p in lo..=hi {
                    if chord.contains(&(p % 12)) {
                        let d = (p as i32 - anchor).abs();
                        if d < best_d {
                            best_d = d;
                            best = p;
                        }
                    }
                }
                events.push(NoteEvent {
                    pitch: best,
                    velocity: VELOCITIES[rng.random_range(0..VELOCITIES.len())],
                    onset: (bar as u64 * 16 + pos) * slot,
                    duration: (next - pos) * slot,
                    instrument: ensemble[part],
                    tempo,
                    time_signature: (4, 4),
                });
            }
        }
    }
    events
}

/// Write `spec.pieces` JSON note-lists under `out/pieces` and ingest them.
/// Deterministic: the same spec produces byte-identical files.
pub fn synth_chorale_corpus(
    spec: &SyntheticCorpusSpec,
    vocab: &OctupleVocabulary,
    dims: &ViewDims,
    out: impl AsRef<Path>,
) -> Result<(CorpusManifest, RejectsReport)> {
    let out = out.as_ref();
    let pieces_dir = out.join("pieces");
    fs::create_dir_all(&pieces_dir)
        .map_err(|e| Error::io(pieces_dir.display().to_string(), e))?;
    for i in 0..spec.pieces {
        let events = synth_piece(spec, i);
        let path = pieces_dir.join(format!("chorale_{i:05}.json"));
        midi::save_note_json(&events, &path)?;
    }
    let (manifest, rejects) = ingest_corpus(&pieces_dir, vocab, dims, out, (0.8, 0.1, 0.1))?;
    if !rejects.rejected.is_empty() {
        return Err(Error::Contract(format!(
            "synthetic pieces must always pass ingestion; {} rejected ({})",
            rejects.rejected.len(),
            rejects.rejected[0].1
        )));
    }
    Ok((manifest, rejects))
}
