//! Quantize a small score into octuple tokens, decode it back, and compare
//! the compound length against an event-based token count.
//!
//! Run with: cargo run --release --example tokenize_roundtrip

use midivae::octuple::{
    decode_sequence, encode_score, remi_plus_token_count, NoteEvent, OctupleVocabulary,
};

fn note(pitch: u8, onset: u64, duration: u64, instrument: u8) -> NoteEvent {
    NoteEvent {
        pitch,
        velocity: 80,
        onset,
        duration,
        instrument,
        tempo: 120.0,
        time_signature: (4, 4),
    }
}

fn main() -> midivae::Result<()> {
    let vocab = OctupleVocabulary::new();

    // two bars of a violin/cello duet
    let score = vec![
        note(60, 0, 480, 40),
        note(64, 480, 480, 40),
        note(67, 960, 960, 40),
        note(48, 0, 960, 42),
        note(43, 960, 960, 42),
        note(72, 1920, 1920, 40),
        note(36, 1920, 1920, 42),
    ];

    let seq = encode_score(&score, &vocab)?;
    println!("notes: {}, octuple tokens: {}", score.len(), seq.len());
    for t in seq.tokens() {
        println!(
            "  bar {} pos {:2} inst {} pitch {:3} dur {:2} vel {:2} ts {} tempo {}",
            t.bar_idx,
            t.position_idx,
            t.instrument_idx,
            t.pitch_idx,
            t.duration_idx,
            t.velocity_idx,
            t.timesig_idx,
            t.tempo_idx
        );
    }

    let decoded = decode_sequence(&seq, &vocab)?;
    let reencoded = encode_score(&decoded, &vocab)?;
    assert_eq!(seq, reencoded, "decode followed by encode is the identity");
    println!("round trip: exact");

    let events = remi_plus_token_count(&score, &vocab)?;
    println!(
        "event-based tokens: {events} -> compound/event ratio {:.3}",
        seq.len() as f64 / events as f64
    );
    Ok(())
}
