//! Sequence-length comparison: octuple tokens versus an event-based token
//! count over a synthetic corpus. The compound representation uses roughly
//! one quarter of the tokens.
//!
//! Run with: cargo run --release --example compare_length

use midivae::data::{synth_piece, SyntheticCorpusSpec};
use midivae::octuple::{encode_score, remi_plus_token_count, OctupleVocabulary};

fn main() -> midivae::Result<()> {
    let vocab = OctupleVocabulary::new();
    let spec = SyntheticCorpusSpec { pieces: 64, bars: 8, density: 2.0, seed: 29 };

    let mut sum_ratio = 0.0;
    let mut sum_oct = 0usize;
    let mut sum_event = 0usize;
    println!("piece    octuple   event-based   ratio");
    for i in 0..spec.pieces {
        let events = synth_piece(&spec, i);
        let seq = encode_score(&events, &vocab)?;
        let event_count = remi_plus_token_count(&events, &vocab)?;
        let ratio = seq.len() as f64 / event_count as f64;
        sum_ratio += ratio;
        sum_oct += seq.len();
        sum_event += event_count;
        if i < 8 {
            println!("{i:5}    {:7}   {event_count:11}   {ratio:.4}", seq.len());
        }
    }
    let n = spec.pieces as f64;
    println!("  ...");
    println!(
        "mean over {} pieces: octuple {:.1}, event-based {:.1}, ratio {:.4} ({}% shorter)",
        spec.pieces,
        sum_oct as f64 / n,
        sum_event as f64 / n,
        sum_ratio / n,
        (100.0 * (1.0 - sum_ratio / n)).round()
    );
    Ok(())
}
