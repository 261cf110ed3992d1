//! Command-line entry point: one command, nine subcommands, a single
//! structured TOML configuration file with flat dotted-key overrides.
//!
//! Every subcommand is deterministic given `--seed` and the configuration
//! (wall-clock fields in logs aside). Exit codes: 0 success, 2 usage errors
//! (from argument parsing), then per error class: 3 config, 4 I/O, 5 parse
//! or format, 6 data/capacity, 7 internal. With `--json`, stdout carries
//! exactly one machine-readable JSON payload; human-readable notes go to
//! stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{
    self, ingest_corpus, synth_chorale_corpus, CorpusManifest, Split, SyntheticCorpusSpec,
};
use crate::error::{Error, Result};
use crate::midi;
use crate::model::{MidiVae, ModelConfig};
use crate::octuple::{
    decode_sequence, encode_score, remi_plus_token_count, OctupleVocabulary, TokenSequence,
};
use crate::train::{evaluate_reconstruction, gradient_check, Trainer, TrainingConfig};
use crate::vae::{sample_prior_generate, DecodeStrategy};
use crate::views::PieceViews;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: i32) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_interrupt_handler() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as usize);
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "midivae",
    version,
    about = "Multi-view VAE for multi-track symbolic music on octuple tokens",
    long_about = "Multi-view VAE for multi-track symbolic music on octuple tokens.\n\n\
Exit codes: 0 success; 2 usage; 3 config validation; 4 I/O; 5 parse/format; \
6 data/capacity; 7 internal invariant.\n\
Configuration: --config points at a TOML file (sections [model], [training], \
[data], [synth]); --set section.key=value overrides individual keys; unknown \
keys are rejected by name."
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set training.seed=7
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Override every seed consumed by the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Emit a machine-readable JSON payload on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize an SMF or JSON note list into octuple tokens.
    Tokenize(TokenizeArgs),
    /// Generate a synthetic four-part chorale corpus and ingest it.
    SynthCorpus(SynthArgs),
    /// Parse, encode and cache a directory of pieces.
    Ingest(IngestArgs),
    /// Train the multi-view model on an ingested corpus.
    Train(TrainArgs),
    /// Reconstruct one piece through the trained model.
    Reconstruct(ReconstructArgs),
    /// Sample pieces from the prior of a trained model.
    Generate(GenerateArgs),
    /// Teacher-forced reconstruction accuracy over a corpus split.
    Evaluate(EvaluateArgs),
    /// Finite-difference validation of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Compare octuple sequence lengths against an event-based token count.
    CompareLength(CompareLengthArgs),
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Input .mid/.midi/.json piece.
    #[arg(long)]
    pub input: PathBuf,
    /// Write the token sequence as JSON here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Piece count (defaults to [synth].pieces).
    #[arg(long)]
    pub pieces: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of .mid/.midi/.json files.
    #[arg(long)]
    pub input: PathBuf,
    /// Output corpus directory (manifest + cache + rejects).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ingested corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Cap on optimizer steps (defaults to [training].max_steps).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input piece (.mid/.midi/.json).
    #[arg(long)]
    pub input: PathBuf,
    /// Output SMF path for the reconstruction.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Sampling temperature; omitted = greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Directory for the generated SMF files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// train | validation | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the report JSON here as well as stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Parameter coordinates to sample (at least 200 for the full check).
    #[arg(long, default_value_t = 200)]
    pub coordinates: usize,
}

#[derive(Debug, Args)]
pub struct CompareLengthArgs {
    /// Directory of .mid/.midi/.json pieces.
    #[arg(long)]
    pub input: PathBuf,
}

// ---- configuration file ----

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub data: DataSection,
    pub synth: SyntheticCorpusSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Base preset: "desk" (D = 128, depths {2, 2}) or "full" (D = 512,
    /// depths {4, 8}).
    pub preset: String,
    pub track_dim: Option<usize>,
    pub bar_dim: Option<usize>,
    pub latent_dim: Option<usize>,
    pub tracks: Option<usize>,
    pub bars: Option<usize>,
    pub track_slots: Option<usize>,
    pub bar_slots: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub attention_heads: Option<usize>,
    pub feedforward_width: Option<usize>,
    pub dropout: Option<f64>,
    /// Model initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".to_string(),
            track_dim: None,
            bar_dim: None,
            latent_dim: None,
            tracks: None,
            bars: None,
            track_slots: None,
            bar_slots: None,
            encoder_layers: None,
            decoder_layers: None,
            attention_heads: None,
            feedforward_width: None,
            dropout: None,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab: &OctupleVocabulary) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => ModelConfig::desk(vocab),
            "full" => ModelConfig::full(vocab),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}` (expected `desk` or `full`)"
                )))
            }
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            track_dim,
            bar_dim,
            latent_dim,
            tracks,
            bars,
            track_slots,
            bar_slots,
            encoder_layers,
            decoder_layers,
            attention_heads,
            feedforward_width,
            dropout
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub split_ratios: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { split_ratios: (0.8, 0.1, 0.1) }
    }
}

/// Load the TOML file (when given), apply `--set key=value` overrides onto
/// the raw tree, then deserialize strictly (unknown keys are rejected by
/// name).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        None => String::new(),
    };
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
        set_dotted(&mut value, key.trim(), raw.trim())?;
    }
    value
        .try_into()
        .map_err(|e| Error::Config(format!("config validation failed: {e}")))
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match raw.parse::<i64>() {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => match raw.parse::<f64>() {
            Ok(f) => toml::Value::Float(f),
            Err(_) => match raw {
                "true" => toml::Value::Boolean(true),
                "false" => toml::Value::Boolean(false),
                other => toml::Value::String(other.to_string()),
            },
        },
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}` crosses a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key `{key}` crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

// ---- dispatch ----

/// Run the parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    install_interrupt_handler();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            e.exit_code()
        }
    }
}

fn emit(cli: &Cli, payload: serde_json::Value, human: String) -> Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        println!("{human}");
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.synth.seed = seed;
        cfg.model.seed = seed;
    }
    let vocab = OctupleVocabulary::new();

    match &cli.command {
        Command::Tokenize(args) => {
            let events = midi::load_events(&args.input)?;
            let seq = encode_score(&events, &vocab)?;
            let payload = json!({
                "notes": seq.len(),
                "tokens": seq.tokens(),
            });
            match &args.output {
                Some(path) => {
                    fs::write(path, serde_json::to_string_pretty(&payload)?)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    emit(
                        cli,
                        json!({"written": path.display().to_string(), "notes": seq.len()}),
                        format!("wrote {} tokens to {}", seq.len(), path.display()),
                    )
                }
                None => emit(cli, payload, format!("{seq:#?}")),
            }
        }

        Command::SynthCorpus(args) => {
            let mut spec = cfg.synth.clone();
            if let Some(p) = args.pieces {
                spec.pieces = p;
            }
            let model_cfg = cfg.model.build(&vocab)?;
            let (manifest, _) =
                synth_chorale_corpus(&spec, &vocab, &model_cfg.view_dims(), &args.out)?;
            emit(
                cli,
                json!({
                    "pieces": manifest.entries.len(),
                    "train": manifest.split_len(Split::Train),
                    "validation": manifest.split_len(Split::Validation),
                    "test": manifest.split_len(Split::Test),
                    "out": args.out.display().to_string(),
                }),
                format!(
                    "generated {} pieces into {} (splits {}/{}/{})",
                    manifest.entries.len(),
                    args.out.display(),
                    manifest.split_len(Split::Train),
                    manifest.split_len(Split::Validation),
                    manifest.split_len(Split::Test),
                ),
            )
        }

        Command::Ingest(args) => {
            let model_cfg = cfg.model.build(&vocab)?;
            let (manifest, rejects) = ingest_corpus(
                &args.input,
                &vocab,
                &model_cfg.view_dims(),
                &args.out,
                cfg.data.split_ratios,
            )?;
            emit(
                cli,
                json!({
                    "accepted": manifest.entries.len(),
                    "rejected": rejects.rejected,
                    "out": args.out.display().to_string(),
                }),
                format!(
                    "ingested {} pieces ({} rejected) into {}",
                    manifest.entries.len(),
                    rejects.rejected.len(),
                    args.out.display()
                ),
            )
        }

        Command::Train(args) => {
            let mut tcfg = cfg.training.clone();
            if let Some(steps) = args.steps {
                tcfg.max_steps = steps;
            }
            let manifest = CorpusManifest::load(&args.corpus)?;
            let mut trainer = match &args.resume {
                Some(path) => Trainer::resume(path, tcfg)?,
                None => {
                    let model_cfg = cfg.model.build(&vocab)?;
                    let model = MidiVae::new(model_cfg, cfg.model.seed)?;
                    Trainer::new(model, vocab.clone(), tcfg)?
                }
            };
            let pieces = data::load_split(
                &manifest,
                &args.corpus,
                &trainer.vocab.clone(),
                &trainer.model.config.view_dims(),
                Split::Train,
            )?;
            let outcome = trainer.run(&pieces, Some(&args.out), |_, step, loss| {
                if step % 25 == 0 {
                    eprintln!(
                        "step {step}: total {:.4} (rs {:.4} rst {:.4} rsb {:.4} kl {:.4} beta {:.3})",
                        loss.l_total, loss.l_rs, loss.l_rst, loss.l_rsb, loss.l_kl, loss.beta
                    );
                }
                INTERRUPTED.load(Ordering::SeqCst)
            })?;
            if INTERRUPTED.load(Ordering::SeqCst) {
                eprintln!("interrupted: checkpoint saved at step {}", outcome.steps_run);
            }
            emit(
                cli,
                json!({
                    "steps": outcome.steps_run,
                    "checkpoint": outcome.checkpoint_path.as_ref().map(|p| p.display().to_string()),
                    "metrics": outcome.metrics_path.as_ref().map(|p| p.display().to_string()),
                    "final_loss": outcome.final_loss,
                }),
                format!(
                    "trained {} steps; final total loss {:.4}; checkpoint {}",
                    outcome.steps_run,
                    outcome.final_loss.map(|l| l.l_total).unwrap_or(f64::NAN),
                    outcome
                        .checkpoint_path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default()
                ),
            )
        }

        Command::Reconstruct(args) => {
            let ck = checkpoint::load(&args.checkpoint)?;
            let events = midi::load_events(&args.input)?;
            let seq = encode_score(&events, &ck.vocab)?;
            let piece = PieceViews::build(seq, &ck.vocab, &ck.model.config.view_dims())?;
            let out = crate::vae::forward_reconstruct(
                &ck.model,
                &piece,
                &crate::vae::LatentMode::Deterministic,
                0.0,
                None,
            )?;
            let mut decoded = decode_sequence(&out.reconstruction, &ck.vocab)?;
            midi::harmonize_meta(&mut decoded);
            midi::save_smf(&decoded, &args.output)?;
            let matches = piece
                .seq
                .tokens()
                .iter()
                .zip(out.reconstruction.tokens())
                .filter(|(a, b)| a == b)
                .count();
            let report = diff_summary(&piece.seq, &out.reconstruction);
            emit(
                cli,
                json!({
                    "notes": piece.seq.len(),
                    "exact_token_matches": matches,
                    "per_attribute_accuracy": report,
                    "output": args.output.display().to_string(),
                }),
                format!(
                    "reconstructed {} notes ({} exact token matches) -> {}\nper-attribute accuracy: {report:?}",
                    piece.seq.len(),
                    matches,
                    args.output.display()
                ),
            )
        }

        Command::Generate(args) => {
            let ck = checkpoint::load(&args.checkpoint)?;
            fs::create_dir_all(&args.out)
                .map_err(|e| Error::io(args.out.display().to_string(), e))?;
            let strategy = match args.temperature {
                Some(t) => DecodeStrategy::Temperature(t),
                None => DecodeStrategy::Greedy,
            };
            let seed = cli.seed.unwrap_or(cfg.training.seed);
            let pieces = sample_prior_generate(&ck.model, args.count, seed, strategy);
            let mut written = Vec::new();
            let mut degenerate = 0usize;
            for (i, gp) in pieces.iter().enumerate() {
                if gp.degenerate {
                    degenerate += 1;
                    continue;
                }
                let mut events = decode_sequence(&gp.piece, &ck.vocab)?;
                midi::harmonize_meta(&mut events);
                let path = args.out.join(format!("sample_{i:04}.mid"));
                midi::save_smf(&events, &path)?;
                written.push(path.display().to_string());
            }
            emit(
                cli,
                json!({
                    "requested": args.count,
                    "written": written,
                    "degenerate": degenerate,
                    "degeneracy_rate": if args.count > 0 { degenerate as f64 / args.count as f64 } else { 0.0 },
                }),
                format!(
                    "generated {} pieces ({} degenerate) into {}",
                    written.len(),
                    degenerate,
                    args.out.display()
                ),
            )
        }

        Command::Evaluate(args) => {
            let split = Split::parse(&args.split)?;
            let ck = checkpoint::load(&args.checkpoint)?;
            let manifest = CorpusManifest::load(&args.corpus)?;
            if manifest.vocab_fingerprint != ck.vocab.fingerprint() {
                return Err(Error::VocabMismatch {
                    checkpoint: ck.vocab.fingerprint(),
                    corpus: manifest.vocab_fingerprint,
                });
            }
            let pieces = data::load_split(
                &manifest,
                &args.corpus,
                &ck.vocab,
                &ck.model.config.view_dims(),
                split,
            )?;
            if pieces.is_empty() {
                return Err(Error::Contract(format!("split `{}` is empty", args.split)));
            }
            let report = evaluate_reconstruction(&ck.model, &ck.vocab, &pieces)?;
            if let Some(path) = &args.output {
                fs::write(path, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            emit(
                cli,
                serde_json::to_value(&report)?,
                format!(
                    "overall {:.4} | duration {:.4} pitch {:.4} position {:.4} instrument {:.4} bar {:.4} tempo {:.4} | velocity {:.4} timesig {:.4} ({} positions)",
                    report.overall,
                    report.duration,
                    report.pitch,
                    report.position,
                    report.instrument,
                    report.bar,
                    report.tempo,
                    report.velocity,
                    report.time_signature,
                    report.positions
                ),
            )
        }

        Command::Gradcheck(args) => {
            let seed = cli.seed.unwrap_or(0);
            let report = gradient_check(seed, args.coordinates)?;
            let human = format!(
                "gradient check over {} coordinates: max relative error {:.3e} (tolerance {:.0e}) -> {}\nworst per module: {}",
                report.coordinates,
                report.max_rel_error,
                report.tolerance,
                if report.passed { "PASS" } else { "FAIL" },
                report
                    .per_module_worst
                    .iter()
                    .take(5)
                    .map(|w| format!("{} {:.2e} ({})", w.module, w.rel_error, w.parameter))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            let payload = serde_json::to_value(&report)?;
            emit(cli, payload, human)?;
            if !report.passed {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error
                )));
            }
            Ok(())
        }

        Command::CompareLength(args) => {
            let stats = compare_length(&args.input, &vocab)?;
            emit(
                cli,
                serde_json::to_value(&stats)?,
                format!(
                    "pieces {} | mean octuple length {:.1} | mean event-token length {:.1} | mean ratio {:.4}",
                    stats.pieces, stats.mean_octuple, stats.mean_event, stats.mean_ratio
                ),
            )
        }
    }
}

fn diff_summary(original: &TokenSequence, reconstruction: &TokenSequence) -> Vec<(String, f64)> {
    use crate::octuple::Attribute;
    let n = original.len().min(reconstruction.len());
    Attribute::ALL
        .iter()
        .map(|&attr| {
            let correct = original
                .tokens()
                .iter()
                .zip(reconstruction.tokens())
                .filter(|(a, b)| a.get(attr) == b.get(attr))
                .count();
            (attr.name().to_string(), if n == 0 { 0.0 } else { correct as f64 / n as f64 })
        })
        .collect()
}

/// Sequence-length statistics over a directory of pieces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthStats {
    pub pieces: usize,
    pub mean_octuple: f64,
    pub mean_event: f64,
    /// Mean of per-piece octuple/event ratios.
    pub mean_ratio: f64,
    pub per_piece: Vec<(String, usize, usize, f64)>,
}

pub fn compare_length(dir: &Path, vocab: &OctupleVocabulary) -> Result<LengthStats> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "mid" || e == "midi" || e == "json"
                })
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no pieces found under {}", dir.display())));
    }
    let mut per_piece = Vec::new();
    let mut sum_oct = 0usize;
    let mut sum_event = 0usize;
    let mut sum_ratio = 0.0f64;
    for path in &files {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("piece").to_string();
        let events = midi::load_events(path)?;
        let seq = encode_score(&events, vocab)?;
        let octuple = seq.len();
        let event_count = remi_plus_token_count(&events, vocab)?;
        let ratio = if event_count == 0 { 0.0 } else { octuple as f64 / event_count as f64 };
        sum_oct += octuple;
        sum_event += event_count;
        sum_ratio += ratio;
        per_piece.push((id, octuple, event_count, ratio));
    }
    let n = files.len() as f64;
    Ok(LengthStats {
        pieces: files.len(),
        mean_octuple: sum_oct as f64 / n,
        mean_event: sum_event as f64 / n,
        mean_ratio: sum_ratio / n,
        per_piece,
    })
}
