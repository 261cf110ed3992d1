//! Track-view and bar-view rearrangements of a canonical token sequence.
//!
//! Both transforms are selection/permutation maps realized as explicit index
//! maps rather than materialized matrices: `forward` says which canonical
//! position fills each (group, slot) cell, `inverse` says where each
//! canonical position landed. Restricted to real (non-PAD) cells the forward
//! map is a bijection onto `0..N`, and within each group the slots preserve
//! canonical order.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::octuple::{OctupleVocabulary, TokenSequence, ATTRIBUTE_COUNT};

/// Group axis sizes for the two views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewDims {
    /// T: number of track slots.
    pub tracks: usize,
    /// B: number of bars.
    pub bars: usize,
    /// L_t: per-track slot capacity.
    pub track_slots: usize,
    /// L_b: per-bar slot capacity.
    pub bar_slots: usize,
}

/// Which rearrangement a transform realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Track,
    Bar,
}

impl ViewKind {
    pub fn group_noun(self) -> &'static str {
        match self {
            ViewKind::Track => "track",
            ViewKind::Bar => "bar",
        }
    }
}

/// The index maps realizing one view rearrangement and its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewTransform {
    kind: ViewKind,
    /// Flattened group-major map: `forward[g * slot_capacity + l]` is the
    /// canonical source position, or `None` for PAD cells.
    forward: Vec<Option<usize>>,
    /// `inverse[n] = (group, slot)` for each canonical position.
    inverse: Vec<(usize, usize)>,
    group_count: usize,
    slot_capacity: usize,
}

impl ViewTransform {
    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn slot_capacity(&self) -> usize {
        self.slot_capacity
    }

    /// Canonical sequence length N.
    pub fn canonical_len(&self) -> usize {
        self.inverse.len()
    }

    pub fn forward_index(&self, group: usize, slot: usize) -> Option<usize> {
        self.forward[group * self.slot_capacity + slot]
    }

    pub fn inverse_index(&self, position: usize) -> (usize, usize) {
        self.inverse[position]
    }

    /// For each canonical position, the row it occupies in a group-major
    /// flattening of the view (`group * slot_capacity + slot`).
    pub fn canonical_row_indices(&self) -> Vec<usize> {
        self.inverse.iter().map(|&(g, l)| g * self.slot_capacity + l).collect()
    }

    /// Gather rows of a group-major flattened per-slot matrix back into
    /// canonical order, dropping PAD slots. `rows` must have
    /// `group_count * slot_capacity` rows.
    pub fn scatter_to_canonical(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        let expected = self.group_count * self.slot_capacity;
        if rows.nrows() != expected {
            return Err(Error::Contract(format!(
                "scatter_to_canonical: got {} rows, transform expects {expected}",
                rows.nrows()
            )));
        }
        let mut out = Array2::zeros((self.inverse.len(), rows.ncols()));
        for (n, &(g, l)) in self.inverse.iter().enumerate() {
            out.row_mut(n).assign(&rows.row(g * self.slot_capacity + l));
        }
        Ok(out)
    }
}

/// A padded group_count x slot_capacity x 8 grid of attribute indices with
/// its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTensor {
    /// Attribute indices; PAD cells hold the PAD index of every attribute.
    pub values: Array3<u32>,
    /// True where the cell holds a real token.
    pub mask: Array2<bool>,
}

impl ViewTensor {
    pub fn group_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn slot_capacity(&self) -> usize {
        self.values.shape()[1]
    }

    /// Number of real tokens (true mask cells).
    pub fn token_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Per-group real-token lengths.
    pub fn group_lengths(&self) -> Vec<usize> {
        (0..self.group_count())
            .map(|g| self.mask.row(g).iter().filter(|&&m| m).count())
            .collect()
    }
}

fn build_view(
    seq: &TokenSequence,
    vocab: &OctupleVocabulary,
    kind: ViewKind,
    group_count: usize,
    slot_capacity: usize,
    group_of: impl Fn(usize) -> Result<usize>,
) -> Result<(ViewTensor, ViewTransform)> {
    let pad = vocab.pad_token().as_array();
    let mut values = Array3::from_shape_fn((group_count, slot_capacity, ATTRIBUTE_COUNT), |(_, _, m)| pad[m]);
    let mut mask = Array2::from_elem((group_count, slot_capacity), false);
    let mut forward = vec![None; group_count * slot_capacity];
    let mut inverse = Vec::with_capacity(seq.len());
    let mut fill = vec![0usize; group_count];

    for (n, token) in seq.tokens().iter().enumerate() {
        let g = group_of(n)?;
        let l = fill[g];
        if l >= slot_capacity {
            return Err(Error::Capacity {
                group_kind: kind.group_noun(),
                group_index: g,
                count: seq
                    .tokens()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| group_of(*i).map(|gg| gg == g).unwrap_or(false))
                    .count(),
                capacity: slot_capacity,
            });
        }
        fill[g] += 1;
        let attrs = token.as_array();
        for (m, &a) in attrs.iter().enumerate() {
            values[[g, l, m]] = a;
        }
        mask[[g, l]] = true;
        forward[g * slot_capacity + l] = Some(n);
        inverse.push((g, l));
    }

    Ok((
        ViewTensor { values, mask },
        ViewTransform { kind, forward, inverse, group_count, slot_capacity },
    ))
}

/// Rearrange the canonical sequence into one row per track slot.
///
/// Track slots are assigned by part order: the distinct instruments present
/// in the sequence, ascending by instrument index (the vocabulary lists
/// programs in configured part order), take slots 0, 1, .... Two parts on
/// the same program fold into one slot, which must then hold both parts'
/// notes within capacity.
pub fn build_track_view(
    seq: &TokenSequence,
    vocab: &OctupleVocabulary,
    dims: &ViewDims,
) -> Result<(ViewTensor, ViewTransform)> {
    let mut instruments: Vec<u32> = seq.tokens().iter().map(|t| t.instrument_idx).collect();
    instruments.sort_unstable();
    instruments.dedup();
    for &i in &instruments {
        if (i as usize) >= vocab.size(crate::octuple::Attribute::Instrument) {
            return Err(Error::InstrumentMapping(format!(
                "instrument index {i} outside vocabulary"
            )));
        }
    }
    if instruments.len() > dims.tracks {
        return Err(Error::InstrumentMapping(format!(
            "{} distinct instruments exceed the {} configured track slots",
            instruments.len(),
            dims.tracks
        )));
    }
    let tokens = seq.tokens();
    build_view(seq, vocab, ViewKind::Track, dims.tracks, dims.track_slots, |n| {
        Ok(instruments
            .binary_search(&tokens[n].instrument_idx)
            .expect("instrument collected above"))
    })
}

/// Rearrange the canonical sequence into one row per bar.
pub fn build_bar_view(
    seq: &TokenSequence,
    vocab: &OctupleVocabulary,
    dims: &ViewDims,
) -> Result<(ViewTensor, ViewTransform)> {
    let tokens = seq.tokens();
    build_view(seq, vocab, ViewKind::Bar, dims.bars, dims.bar_slots, |n| {
        let bar = tokens[n].bar_idx as usize;
        if bar >= dims.bars {
            return Err(Error::Contract(format!(
                "bar index {bar} out of range for {} bars",
                dims.bars
            )));
        }
        Ok(bar)
    })
}

/// Both view rearrangements of one piece, bundled for the model.
#[derive(Debug, Clone)]
pub struct PieceViews {
    pub seq: TokenSequence,
    pub track_tensor: ViewTensor,
    pub track_transform: ViewTransform,
    pub bar_tensor: ViewTensor,
    pub bar_transform: ViewTransform,
}

impl PieceViews {
    pub fn build(
        seq: TokenSequence,
        vocab: &OctupleVocabulary,
        dims: &ViewDims,
    ) -> Result<Self> {
        let (track_tensor, track_transform) = build_track_view(&seq, vocab, dims)?;
        let (bar_tensor, bar_transform) = build_bar_view(&seq, vocab, dims)?;
        Ok(PieceViews { seq, track_tensor, track_transform, bar_tensor, bar_transform })
    }

    pub fn canonical_len(&self) -> usize {
        self.seq.len()
    }
}

/// Reassemble the canonical attribute grid from a view; the identity check
/// used by tests and debugging.
pub fn gather_tokens(view: &ViewTensor, transform: &ViewTransform) -> Vec<[u32; ATTRIBUTE_COUNT]> {
    (0..transform.canonical_len())
        .map(|n| {
            let (g, l) = transform.inverse_index(n);
            let mut a = [0u32; ATTRIBUTE_COUNT];
            for (m, slot) in a.iter_mut().enumerate() {
                *slot = view.values[[g, l, m]];
            }
            a
        })
        .collect()
}
