//! Write a Standard MIDI File and parse it back.
//!
//! Run with: cargo run --release --example midi_file_io

use midivae::midi::{load_smf, save_smf};
use midivae::octuple::NoteEvent;

fn main() -> midivae::Result<()> {
    let events = vec![
        NoteEvent {
            pitch: 60,
            velocity: 80,
            onset: 0,
            duration: 480,
            instrument: 40,
            tempo: 120.0,
            time_signature: (4, 4),
        },
        NoteEvent {
            pitch: 55,
            velocity: 72,
            onset: 0,
            duration: 960,
            instrument: 42,
            tempo: 120.0,
            time_signature: (4, 4),
        },
        NoteEvent {
            pitch: 64,
            velocity: 88,
            onset: 480,
            duration: 480,
            instrument: 40,
            tempo: 120.0,
            time_signature: (4, 4),
        },
    ];

    let dir = std::env::temp_dir().join("midivae_example_io");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("duet.mid");
    save_smf(&events, &path)?;
    println!("wrote {}", path.display());

    let parsed = load_smf(&path)?;
    println!("parsed {} notes:", parsed.len());
    for e in &parsed {
        println!(
            "  t={:4} dur={:4} pitch={:3} vel={:3} program={} {}bpm {}/{}",
            e.onset,
            e.duration,
            e.pitch,
            e.velocity,
            e.instrument,
            e.tempo,
            e.time_signature.0,
            e.time_signature.1
        );
    }
    assert_eq!(parsed, events, "save followed by load is the identity");
    println!("SMF round trip: exact");
    Ok(())
}
