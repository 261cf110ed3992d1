//! Rearrange a canonical token sequence into its track view and bar view,
//! then scatter back and verify the round trip.
//!
//! Run with: cargo run --release --example view_transforms

use midivae::data::{synth_piece, SyntheticCorpusSpec};
use midivae::octuple::{encode_score, OctupleVocabulary};
use midivae::views::{build_bar_view, build_track_view, gather_tokens, ViewDims};

fn main() -> midivae::Result<()> {
    let vocab = OctupleVocabulary::new();
    let dims = ViewDims { tracks: 4, bars: 8, track_slots: 32, bar_slots: 16 };

    let spec = SyntheticCorpusSpec { pieces: 1, bars: 8, density: 2.0, seed: 42 };
    let events = synth_piece(&spec, 0);
    let seq = encode_score(&events, &vocab)?;
    println!("canonical sequence: {} tokens", seq.len());

    let (track_tensor, track_transform) = build_track_view(&seq, &vocab, &dims)?;
    println!(
        "track view: {} x {} slots, per-track lengths {:?}",
        track_tensor.group_count(),
        track_tensor.slot_capacity(),
        track_tensor.group_lengths()
    );

    let (bar_tensor, bar_transform) = build_bar_view(&seq, &vocab, &dims)?;
    println!(
        "bar view:   {} x {} slots, per-bar lengths {:?}",
        bar_tensor.group_count(),
        bar_tensor.slot_capacity(),
        bar_tensor.group_lengths()
    );

    let expected: Vec<_> = seq.tokens().iter().map(|t| t.as_array()).collect();
    assert_eq!(gather_tokens(&track_tensor, &track_transform), expected);
    assert_eq!(gather_tokens(&bar_tensor, &bar_transform), expected);
    println!("scatter back to canonical order: exact for both views");
    Ok(())
}
