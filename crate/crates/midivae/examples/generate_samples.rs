//! Train briefly on a few chorales, then sample new pieces from the prior
//! and write them as MIDI files.
//!
//! Run with: cargo run --release --example generate_samples

use midivae::data::{synth_piece, LoadedPiece, SyntheticCorpusSpec};
use midivae::midi::{harmonize_meta, save_smf};
use midivae::model::{MidiVae, ModelConfig};
use midivae::octuple::{decode_sequence, encode_score, OctupleVocabulary};
use midivae::train::{Trainer, TrainingConfig};
use midivae::vae::{sample_prior_generate, DecodeStrategy};
use midivae::views::PieceViews;

fn main() -> midivae::Result<()> {
    let vocab = OctupleVocabulary::new();
    let mut cfg = ModelConfig::desk(&vocab);
    cfg.track_dim = 64;
    cfg.bar_dim = 64;
    cfg.latent_dim = 64;
    cfg.feedforward_width = 256;
    let model = MidiVae::new(cfg.clone(), 2)?;

    let spec = SyntheticCorpusSpec { pieces: 4, bars: 8, density: 1.5, seed: 31 };
    let pieces: Vec<LoadedPiece> = (0..spec.pieces)
        .map(|i| {
            let seq = encode_score(&synth_piece(&spec, i), &vocab)?;
            Ok(LoadedPiece {
                id: format!("chorale_{i}"),
                views: PieceViews::build(seq, &vocab, &cfg.view_dims())?,
            })
        })
        .collect::<midivae::Result<_>>()?;

    let tcfg = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_steps: 150,
        seed: 13,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, vocab.clone(), tcfg)?;
    trainer.run(&pieces, None, |_, step, loss| {
        if (step + 1) % 50 == 0 {
            println!("step {:3}: total {:.3}", step + 1, loss.l_total);
        }
        false
    })?;

    let dir = std::env::temp_dir().join("midivae_example_generate");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let samples = sample_prior_generate(&trainer.model, 4, 99, DecodeStrategy::Temperature(0.8));
    for (i, sample) in samples.iter().enumerate() {
        if sample.degenerate {
            println!("sample {i}: degenerate (empty decode)");
            continue;
        }
        let mut events = decode_sequence(&sample.piece, &vocab)?;
        harmonize_meta(&mut events);
        let path = dir.join(format!("sample_{i}.mid"));
        save_smf(&events, &path)?;
        println!(
            "sample {i}: {} notes over {} bars -> {}",
            events.len(),
            sample.piece.tokens().iter().map(|t| t.bar_idx).max().map(|b| b + 1).unwrap_or(0),
            path.display()
        );
    }
    Ok(())
}
