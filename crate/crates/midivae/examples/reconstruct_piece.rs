//! Overfit one chorale, reconstruct it through the latent bottleneck in
//! deterministic mode, and write the reconstruction as a MIDI file.
//!
//! Run with: cargo run --release --example reconstruct_piece

use midivae::data::{synth_piece, LoadedPiece, SyntheticCorpusSpec};
use midivae::midi::{harmonize_meta, save_smf};
use midivae::model::{MidiVae, ModelConfig};
use midivae::octuple::{decode_sequence, encode_score, OctupleVocabulary};
use midivae::train::{Trainer, TrainingConfig};
use midivae::vae::{forward_reconstruct, LatentMode};
use midivae::views::PieceViews;

fn main() -> midivae::Result<()> {
    let vocab = OctupleVocabulary::new();
    let mut cfg = ModelConfig::desk(&vocab);
    cfg.track_dim = 64;
    cfg.bar_dim = 64;
    cfg.latent_dim = 64;
    cfg.feedforward_width = 256;
    let model = MidiVae::new(cfg.clone(), 3)?;

    let spec = SyntheticCorpusSpec { pieces: 1, bars: 8, density: 1.5, seed: 5 };
    let events = synth_piece(&spec, 0);
    let seq = encode_score(&events, &vocab)?;
    let piece = LoadedPiece {
        id: "chorale".into(),
        views: PieceViews::build(seq, &vocab, &cfg.view_dims())?,
    };

    let tcfg = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        max_steps: 220,
        seed: 9,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, vocab.clone(), tcfg)?;
    trainer.run(&[piece.clone()], None, |_, step, loss| {
        if (step + 1) % 50 == 0 {
            println!("step {:3}: total {:.3}", step + 1, loss.l_total);
        }
        false
    })?;

    let out = forward_reconstruct(
        &trainer.model,
        &piece.views,
        &LatentMode::Deterministic,
        0.0,
        None,
    )?;
    let matches = piece
        .views
        .seq
        .tokens()
        .iter()
        .zip(out.reconstruction.tokens())
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "reconstruction: {}/{} tokens exact",
        matches,
        piece.views.seq.len()
    );

    let mut decoded = decode_sequence(&out.reconstruction, &vocab)?;
    harmonize_meta(&mut decoded);
    let dir = std::env::temp_dir().join("midivae_example_reconstruct");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("reconstruction.mid");
    save_smf(&decoded, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
