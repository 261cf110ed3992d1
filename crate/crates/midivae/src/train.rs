//! Training loop with teacher forcing and beta annealing, reconstruction
//! evaluation, and the finite-difference gradient check.
//!
//! Every random stream (epoch shuffles, latent noise, dropout masks) is a
//! pure function of the training seed and structural counters, so a resumed
//! run replays the interrupted one bit for bit, and two runs with equal
//! seeds produce equal loss traces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainerState};
use crate::data::{epoch_batches, LoadedPiece};
use crate::error::{Error, Result};
use crate::model::MidiVae;
use crate::nn::{Adam, ParamGrads};
use crate::octuple::{Attribute, OctupleVocabulary, ATTRIBUTE_COUNT};
use crate::vae::{
    forward_reconstruct, standard_normal, AttributeProbabilities, ForwardOutput, LatentMode,
    LossBreakdown,
};
use crate::views::PieceViews;

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Final KL weight after annealing.
    pub beta_max: f64,
    /// Fraction of `max_steps` over which beta ramps linearly from 0.
    pub beta_anneal_frac: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints (0 = only at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 2000,
            beta_max: 0.2,
            beta_anneal_frac: 0.25,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_interval: 500,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_anneal_frac) {
            return Err(Error::Config("beta_anneal_frac must lie in [0, 1]".into()));
        }
        if self.beta_max < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("beta_max and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    /// Linear anneal 0 -> beta_max over the first `beta_anneal_frac` of
    /// training, then constant.
    pub fn beta_at(&self, step: usize) -> f64 {
        let horizon = (self.max_steps as f64 * self.beta_anneal_frac).round();
        if horizon < 1.0 || step as f64 >= horizon {
            self.beta_max
        } else {
            self.beta_max * step as f64 / horizon
        }
    }
}

/// One NDJSON metrics record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_rs: f64,
    pub l_rst: f64,
    pub l_rsb: f64,
    pub l_kl: f64,
    pub beta: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub steps_run: usize,
    pub final_loss: Option<LossBreakdown>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for v in [a, b] {
        h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51afd7ed558ccd);
    }
    h
}

/// Teacher-forced trainer; owns the model and optimizer state.
pub struct Trainer {
    pub model: MidiVae,
    pub adam: Adam,
    pub vocab: OctupleVocabulary,
    pub config: TrainingConfig,
    /// Optimizer steps completed so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: MidiVae, vocab: OctupleVocabulary, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params, config.learning_rate);
        Ok(Trainer { model, adam, vocab, config, step: 0 })
    }

    /// Rebuild a trainer from a checkpoint, restoring optimizer moments and
    /// the step counter. The training configuration is supplied by the
    /// caller and must match the original for an exact replay.
    pub fn resume(path: impl AsRef<Path>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let ck = checkpoint::load(path)?;
        let adam = ck
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        if ck.trainer.seed != config.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, resume requested seed {}",
                ck.trainer.seed, config.seed
            )));
        }
        Ok(Trainer {
            model: ck.model,
            adam,
            vocab: ck.vocab,
            config,
            step: ck.trainer.step,
        })
    }

    /// One optimizer step over a batch of pieces (gradient accumulation in
    /// deterministic order). Returns the batch-averaged loss.
    pub fn train_step(&mut self, batch: &[&LoadedPiece]) -> Result<LossBreakdown> {
        assert!(!batch.is_empty(), "empty batch");
        let beta = self.config.beta_at(self.step);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = ParamGrads::new();
        let mut sums = LossBreakdown {
            l_rs: 0.0,
            l_rst: 0.0,
            l_rsb: 0.0,
            l_kl: 0.0,
            beta,
            l_total: 0.0,
        };
        for (slot, piece) in batch.iter().enumerate() {
            let noise_seed = mix(self.config.seed, self.step as u64, slot as u64);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let eps: Vec<f64> = (0..self.model.config.latent_dim)
                .map(|_| standard_normal(&mut noise_rng))
                .collect();
            let dropout_rng = if self.model.config.dropout > 0.0 {
                Some(ChaCha8Rng::seed_from_u64(noise_seed ^ 0x5851f42d4c957f2d))
            } else {
                None
            };
            let out = forward_reconstruct(
                &self.model,
                &piece.views,
                &LatentMode::Noise(eps),
                beta,
                dropout_rng,
            )?;
            if !out.breakdown.l_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    batch_id: batch.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join(","),
                    detail: format!("piece {} produced {:?}", piece.id, out.breakdown),
                });
            }
            grads.accumulate(out.graph.backward(out.loss_node), scale);
            sums.l_rs += out.breakdown.l_rs * scale;
            sums.l_rst += out.breakdown.l_rst * scale;
            sums.l_rsb += out.breakdown.l_rsb * scale;
            sums.l_kl += out.breakdown.l_kl * scale;
            sums.l_total += out.breakdown.l_total * scale;
        }
        let clip = if self.config.grad_clip > 0.0 { Some(self.config.grad_clip) } else { None };
        self.adam.apply(&mut self.model.params, &mut grads, clip);
        self.step += 1;
        Ok(sums)
    }

    /// Run until `max_steps` (or until `stop` returns true), logging metrics
    /// and checkpointing into `out_dir` when given. Resumable: epoch order
    /// and batch composition derive from (seed, epoch), so a run restarted
    /// from step k continues exactly where the original left off.
    pub fn run(
        &mut self,
        pieces: &[LoadedPiece],
        out_dir: Option<&Path>,
        mut stop: impl FnMut(&mut Self, usize, &LossBreakdown) -> bool,
    ) -> Result<TrainOutcome> {
        if pieces.is_empty() {
            return Err(Error::Contract("cannot train on an empty corpus".into()));
        }
        let mut metrics_path = None;
        let mut metrics_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                let vocab_path = dir.join("vocabulary.json");
                fs::write(&vocab_path, serde_json::to_string_pretty(&self.vocab.to_file())?)
                    .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
                let path = dir.join(METRICS_FILE);
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                metrics_path = Some(path);
                Some(file)
            }
            None => None,
        };

        let batch_count =
            |n: usize, b: usize| -> usize { n.div_ceil(b) };
        let bpe = batch_count(pieces.len(), self.config.batch_size);
        let mut final_loss = None;
        let start = Instant::now();
        while self.step < self.config.max_steps {
            let epoch = (self.step / bpe) as u64;
            let batch_idx = self.step % bpe;
            let batches =
                epoch_batches(pieces.len(), self.config.batch_size, self.config.seed, epoch);
            let batch: Vec<&LoadedPiece> =
                batches[batch_idx].iter().map(|&i| &pieces[i]).collect();
            let step_before = self.step;
            let loss = self.train_step(&batch)?;
            if let Some(f) = metrics_file.as_mut() {
                let record = MetricsRecord {
                    step: step_before,
                    l_rs: loss.l_rs,
                    l_rst: loss.l_rst,
                    l_rsb: loss.l_rsb,
                    l_kl: loss.l_kl,
                    beta: loss.beta,
                    l_total: loss.l_total,
                    lr: self.config.learning_rate,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                let line = serde_json::to_string(&record)?;
                writeln!(f, "{line}").map_err(|e| Error::io(METRICS_FILE.to_string(), e))?;
            }
            final_loss = Some(loss);
            let should_stop = stop(self, step_before, final_loss.as_ref().unwrap());
            if let Some(dir) = out_dir {
                let interval = self.config.checkpoint_interval;
                let at_end = self.step >= self.config.max_steps || should_stop;
                if at_end || (interval > 0 && self.step.is_multiple_of(interval)) {
                    self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            if should_stop {
                break;
            }
        }
        Ok(TrainOutcome {
            checkpoint_path: out_dir.map(|d| d.join(CHECKPOINT_FILE)),
            metrics_path,
            steps_run: self.step,
            final_loss,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self.model,
            &self.vocab,
            Some(&self.adam),
            &TrainerState { seed: self.config.seed, step: self.step },
        )
    }
}

// ---- reconstruction evaluation ----

/// Per-attribute teacher-forced reconstruction accuracies. `overall` is the
/// micro-average over the six core attributes (duration, pitch, position,
/// instrument, bar, tempo); velocity and time signature are reported
/// separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub overall: f64,
    pub duration: f64,
    pub pitch: f64,
    pub position: f64,
    pub instrument: f64,
    pub bar: f64,
    pub tempo: f64,
    pub velocity: f64,
    pub time_signature: f64,
    /// Canonical positions evaluated.
    pub positions: usize,
    /// Core attribute predictions = 6 * positions.
    pub core_predictions: usize,
    pub core_correct: usize,
    pub config_fingerprint: String,
}

const CORE_ATTRS: [Attribute; 6] = [
    Attribute::Duration,
    Attribute::Pitch,
    Attribute::Position,
    Attribute::Instrument,
    Attribute::Bar,
    Attribute::Tempo,
];

/// Evaluate with injected canonical probabilities (the test seam used by the
/// oracle tests); `probs_of` must return one `N x V_m` matrix per attribute.
pub fn evaluate_with_probs(
    pieces: &[LoadedPiece],
    cfg: &crate::model::ModelConfig,
    fingerprint: &str,
    mut probs_of: impl FnMut(&PieceViews) -> Result<AttributeProbabilities>,
) -> Result<EvalReport> {
    let mut correct = [0usize; ATTRIBUTE_COUNT];
    let mut positions = 0usize;
    for piece in pieces {
        let probs = probs_of(&piece.views)?;
        if probs.rows() != piece.views.canonical_len() {
            return Err(Error::Contract(format!(
                "probability rows {} != canonical length {}",
                probs.rows(),
                piece.views.canonical_len()
            )));
        }
        let predicted = crate::vae::argmax_sequence(&probs, cfg);
        for (p, t) in predicted.tokens().iter().zip(piece.views.seq.tokens()) {
            positions += 1;
            for (m, attr) in Attribute::ALL.iter().enumerate() {
                if p.get(*attr) == t.get(*attr) {
                    correct[m] += 1;
                }
            }
        }
    }
    let acc = |attr: Attribute| -> f64 {
        if positions == 0 {
            0.0
        } else {
            correct[attr.index()] as f64 / positions as f64
        }
    };
    let core_correct: usize = CORE_ATTRS.iter().map(|a| correct[a.index()]).sum();
    let core_predictions = CORE_ATTRS.len() * positions;
    Ok(EvalReport {
        version: 1,
        overall: if core_predictions == 0 {
            0.0
        } else {
            core_correct as f64 / core_predictions as f64
        },
        duration: acc(Attribute::Duration),
        pitch: acc(Attribute::Pitch),
        position: acc(Attribute::Position),
        instrument: acc(Attribute::Instrument),
        bar: acc(Attribute::Bar),
        tempo: acc(Attribute::Tempo),
        velocity: acc(Attribute::Velocity),
        time_signature: acc(Attribute::TimeSignature),
        positions,
        core_predictions,
        core_correct,
        config_fingerprint: fingerprint.to_string(),
    })
}

/// Deterministic (z = mu), teacher-forced reconstruction accuracy of a model
/// over a set of pieces.
pub fn evaluate_reconstruction(
    model: &MidiVae,
    vocab: &OctupleVocabulary,
    pieces: &[LoadedPiece],
) -> Result<EvalReport> {
    let fingerprint = format!("{}-{}", vocab.fingerprint(), config_fingerprint(model));
    evaluate_with_probs(pieces, &model.config, &fingerprint, |views| {
        let out: ForwardOutput =
            forward_reconstruct(model, views, &LatentMode::Deterministic, 0.0, None)?;
        Ok(out.fused)
    })
}

fn config_fingerprint(model: &MidiVae) -> String {
    let json = serde_json::to_string(&model.config).expect("config serializes");
    format!("{:016x}", crate::data::fnv1a(json.as_bytes()))
}

// ---- gradient check ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuleWorst {
    pub module: String,
    pub parameter: String,
    pub row: usize,
    pub col: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub per_module_worst: Vec<ModuleWorst>,
}

/// Central finite differences against analytic gradients on a miniature
/// configuration (D = 8, one layer, one head) in double precision.
/// `coordinates` parameter coordinates are sampled across all tensors;
/// relative error uses `|a - fd| / max(|a|, |fd|, 1e-6)`.
pub fn gradient_check(seed: u64, coordinates: usize) -> Result<GradCheckReport> {
    use crate::octuple::{encode_score, NoteEvent};

    let vocab = OctupleVocabulary::new();
    let mut cfg = crate::model::ModelConfig::miniature();
    cfg.vocab_sizes = vocab.model_sizes();
    let mut model = MidiVae::new(cfg, seed)?;

    // a 2-instrument, 2-bar piece within the miniature capacities
    let note = |pitch: u8, onset: u64, instrument: u8| NoteEvent {
        pitch,
        velocity: 80,
        onset,
        duration: 480,
        instrument,
        tempo: 120.0,
        time_signature: (4, 4),
    };
    let events = vec![
        note(60, 0, 40),
        note(64, 960, 40),
        note(48, 0, 42),
        note(50, 1920, 42),
        note(62, 2400, 40),
        note(45, 2880, 42),
    ];
    let seq = encode_score(&events, &vocab)?;
    let piece = PieceViews::build(seq, &vocab, &model.config.view_dims())?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let eps: Vec<f64> =
        (0..model.config.latent_dim).map(|_| standard_normal(&mut noise_rng)).collect();
    let beta = 0.3;
    let mode = LatentMode::Noise(eps);

    let out = forward_reconstruct(&model, &piece, &mode, beta, None)?;
    let analytic: std::collections::HashMap<usize, crate::nn::Mat> =
        out.graph.backward(out.loss_node).into_iter().collect();
    drop(out);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234567);
    let param_count = model.params.len();
    let mut max_rel = 0.0f64;
    let mut worst: std::collections::BTreeMap<String, ModuleWorst> = Default::default();
    let mut checked = 0usize;
    while checked < coordinates {
        let pid = rng.random_range(0..param_count);
        let shape = {
            let v = model.params.value(pid);
            (v.nrows(), v.ncols())
        };
        let i = rng.random_range(0..shape.0);
        let j = rng.random_range(0..shape.1);
        let a = analytic.get(&pid).map(|g| g[[i, j]]).unwrap_or(0.0);

        let old = model.params.value(pid)[[i, j]];
        let h = 1e-5 * (1.0 + old.abs());
        model.params.value_mut(pid)[[i, j]] = old + h;
        let plus = forward_reconstruct(&model, &piece, &mode, beta, None)?.breakdown.l_total;
        model.params.value_mut(pid)[[i, j]] = old - h;
        let minus = forward_reconstruct(&model, &piece, &mode, beta, None)?.breakdown.l_total;
        model.params.value_mut(pid)[[i, j]] = old;
        let fd = (plus - minus) / (2.0 * h);

        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        let name = model.params.name(pid).to_string();
        let module: String =
            name.split('.').take(2).collect::<Vec<_>>().join(".");
        let entry = worst.entry(module.clone()).or_insert_with(|| ModuleWorst {
            module,
            parameter: name.clone(),
            row: i,
            col: j,
            rel_error: rel,
        });
        if rel >= entry.rel_error {
            entry.parameter = name;
            entry.row = i;
            entry.col = j;
            entry.rel_error = rel;
        }
        checked += 1;
    }

    let tolerance = 1e-3;
    let mut per_module_worst: Vec<ModuleWorst> = worst.into_values().collect();
    per_module_worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        coordinates: checked,
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel < tolerance,
        per_module_worst,
    })
}
