//! The neural architecture: compound-token embedding, weight-shared
//! intra-group encoders with attention pooling, inter-group encoders, and
//! guidance-driven intra-group decoders, instantiated once per view (track
//! and bar).
//!
//! Data flows group-major: a view tensor of shape `G x L x 8` is embedded to
//! a `(G*L) x D` matrix; the intra stack runs on each group's `L x D` slice
//! with one shared parameter set; pooling summarizes each group to one row;
//! the inter stack mixes group summaries and pools them to the view vector.
//! Decoding mirrors this: the latent vector becomes `G` guidance rows, and a
//! shared causal decoder reconstructs each group's slot sequence conditioned
//! on its guidance row.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mat, NodeId};
use crate::nn::layers::{
    causal_mask, sinusoidal_pe, AttnPool, DecoderStack, Dropout, EncoderStack, GuidanceAttn,
    Linear,
};
use crate::nn::params::{embedding_init, ParamSet};
use crate::octuple::{OctupleVocabulary, ATTRIBUTE_COUNT};
use crate::views::ViewDims;

/// Which of the two views a component belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Track,
    Bar,
}

/// Which encoder/decoder branches participate in a forward pass. The
/// single-view modes are the ablations: the disabled branch contributes a
/// zero vector to the latent fusion, its decoder never runs, and the fused
/// probabilities are exactly the active view's scatter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    Multi,
    TrackOnly,
    BarOnly,
}

impl ViewMode {
    pub fn uses_track(self) -> bool {
        matches!(self, ViewMode::Multi | ViewMode::TrackOnly)
    }

    pub fn uses_bar(self) -> bool {
        matches!(self, ViewMode::Multi | ViewMode::BarOnly)
    }
}

/// Architecture hyperparameters; `vocab_sizes` are the model-side sizes
/// (real values + PAD + end-of-group) in attribute order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub track_dim: usize,
    pub bar_dim: usize,
    pub latent_dim: usize,
    pub tracks: usize,
    pub bars: usize,
    pub track_slots: usize,
    pub bar_slots: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_width: usize,
    pub dropout: f64,
    pub vocab_sizes: [usize; ATTRIBUTE_COUNT],
    #[serde(default)]
    pub view_mode: ViewMode,
}

impl ModelConfig {
    /// Full-scale defaults: `D_t = D_b = D_z = 512`, encoder/decoder depths
    /// {4, 8}, 8 attention heads.
    pub fn full(vocab: &OctupleVocabulary) -> Self {
        ModelConfig {
            track_dim: 512,
            bar_dim: 512,
            latent_dim: 512,
            tracks: 4,
            bars: 8,
            track_slots: 64,
            bar_slots: 32,
            encoder_layers: 4,
            decoder_layers: 8,
            attention_heads: 8,
            feedforward_width: 2048,
            dropout: 0.1,
            vocab_sizes: vocab.model_sizes(),
            view_mode: ViewMode::Multi,
        }
    }

    /// Reduced configuration for desk-scale runs: D = 128, depths {2, 2},
    /// 4 heads.
    pub fn desk(vocab: &OctupleVocabulary) -> Self {
        ModelConfig {
            track_dim: 128,
            bar_dim: 128,
            latent_dim: 128,
            tracks: 4,
            bars: 8,
            track_slots: 32,
            bar_slots: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            feedforward_width: 512,
            dropout: 0.0,
            vocab_sizes: vocab.model_sizes(),
            view_mode: ViewMode::Multi,
        }
    }

    /// Miniature configuration for numerical validation: D = 8, one layer,
    /// one head, synthetic small vocabularies.
    pub fn miniature() -> Self {
        ModelConfig {
            track_dim: 8,
            bar_dim: 8,
            latent_dim: 8,
            tracks: 2,
            bars: 2,
            track_slots: 4,
            bar_slots: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 1,
            feedforward_width: 16,
            dropout: 0.0,
            vocab_sizes: [10, 6, 8, 5, 6, 9, 4, 7],
            view_mode: ViewMode::Multi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, dim) in [
            ("track_dim", self.track_dim),
            ("bar_dim", self.bar_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if dim == 0 || !dim.is_multiple_of(ATTRIBUTE_COUNT) {
                return err(format!("{name} = {dim} must be a positive multiple of 8"));
            }
        }
        for (name, dim) in [("track_dim", self.track_dim), ("bar_dim", self.bar_dim)] {
            if !dim.is_multiple_of(self.attention_heads) {
                return err(format!(
                    "{name} = {dim} not divisible by {} heads",
                    self.attention_heads
                ));
            }
        }
        if !self.latent_dim.is_multiple_of(self.attention_heads) {
            return err(format!(
                "latent_dim = {} not divisible by {} heads",
                self.latent_dim, self.attention_heads
            ));
        }
        if self.tracks == 0 || self.bars == 0 || self.track_slots == 0 || self.bar_slots == 0 {
            return err("group counts and slot capacities must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return err("encoder_layers and decoder_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_sizes.iter().any(|&v| v < 3) {
            return err("each attribute needs at least one real value plus PAD and EOG".into());
        }
        Ok(())
    }

    pub fn view_dims(&self) -> ViewDims {
        ViewDims {
            tracks: self.tracks,
            bars: self.bars,
            track_slots: self.track_slots,
            bar_slots: self.bar_slots,
        }
    }

    pub fn dim(&self, view: View) -> usize {
        match view {
            View::Track => self.track_dim,
            View::Bar => self.bar_dim,
        }
    }

    pub fn groups(&self, view: View) -> usize {
        match view {
            View::Track => self.tracks,
            View::Bar => self.bars,
        }
    }

    pub fn slots(&self, view: View) -> usize {
        match view {
            View::Track => self.track_slots,
            View::Bar => self.bar_slots,
        }
    }

    /// PAD index per attribute (= real vocabulary size).
    pub fn pad_index(&self, attr: usize) -> u32 {
        (self.vocab_sizes[attr] - 2) as u32
    }

    /// End-of-group index per attribute.
    pub fn eog_index(&self, attr: usize) -> u32 {
        (self.vocab_sizes[attr] - 1) as u32
    }
}

/// All components of one view's encoder/decoder pair.
pub struct ViewComponents {
    pub view: View,
    dim: usize,
    groups: usize,
    slots: usize,
    /// Per-attribute embedding tables, each `V_m x (D/8)`.
    tables: [usize; ATTRIBUTE_COUNT],
    proj: Linear,
    pad_vec: usize,
    start_vec: usize,
    intra_enc: EncoderStack,
    intra_pool: AttnPool,
    inter_enc: EncoderStack,
    inter_pool: AttnPool,
    guidance: GuidanceAttn,
    intra_dec: DecoderStack,
    heads: Vec<Linear>,
    /// Slot-axis positional encoding tiled over groups: `(G*L) x D`.
    tiled_pe: Mat,
    /// `L x D` slot encoding (decoder inputs).
    slot_pe: Mat,
    /// Group-axis positional encoding (`G x D`), bar view only.
    group_pe: Option<Mat>,
}

impl ViewComponents {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        view: View,
    ) -> Self {
        let prefix = match view {
            View::Track => "track",
            View::Bar => "bar",
        };
        let dim = cfg.dim(view);
        let groups = cfg.groups(view);
        let slots = cfg.slots(view);
        let attr_dim = dim / ATTRIBUTE_COUNT;
        let tables: [usize; ATTRIBUTE_COUNT] = std::array::from_fn(|m| {
            ps.register(
                format!("{prefix}.emb.table{m}"),
                embedding_init(rng, cfg.vocab_sizes[m], attr_dim, 0.1),
            )
        });
        let proj = Linear::new(ps, rng, &format!("{prefix}.emb.proj"), dim, dim);
        let pad_vec = ps.register(format!("{prefix}.emb.pad"), embedding_init(rng, 1, dim, 0.1));
        let start_vec =
            ps.register(format!("{prefix}.dec.start"), embedding_init(rng, 1, dim, 0.1));
        let heads = cfg.attention_heads;
        let ff = cfg.feedforward_width;
        let intra_enc = EncoderStack::new(
            ps,
            rng,
            &format!("{prefix}.intra_enc"),
            dim,
            heads,
            ff,
            cfg.encoder_layers,
        );
        let intra_pool = AttnPool::new(ps, rng, &format!("{prefix}.intra_pool"), dim, heads);
        let inter_enc = EncoderStack::new(
            ps,
            rng,
            &format!("{prefix}.inter_enc"),
            dim,
            heads,
            ff,
            cfg.encoder_layers,
        );
        let inter_pool = AttnPool::new(ps, rng, &format!("{prefix}.inter_pool"), dim, heads);
        let guidance = GuidanceAttn::new(
            ps,
            rng,
            &format!("{prefix}.guide"),
            groups,
            dim,
            cfg.latent_dim,
            heads,
        );
        let intra_dec = DecoderStack::new(
            ps,
            rng,
            &format!("{prefix}.intra_dec"),
            dim,
            dim,
            heads,
            ff,
            cfg.decoder_layers,
        );
        let out_heads: Vec<Linear> = (0..ATTRIBUTE_COUNT)
            .map(|m| Linear::new(ps, rng, &format!("{prefix}.head{m}"), dim, cfg.vocab_sizes[m]))
            .collect();
        let slot_pe = sinusoidal_pe(slots, dim);
        let mut tiled_pe = Mat::zeros((groups * slots, dim));
        for gidx in 0..groups {
            tiled_pe
                .slice_mut(ndarray::s![gidx * slots..(gidx + 1) * slots, ..])
                .assign(&slot_pe);
        }
        let group_pe = match view {
            View::Bar => Some(sinusoidal_pe(groups, dim)),
            View::Track => None,
        };
        ViewComponents {
            view,
            dim,
            groups,
            slots,
            tables,
            proj,
            pad_vec,
            start_vec,
            intra_enc,
            intra_pool,
            inter_enc,
            inter_pool,
            guidance,
            intra_dec,
            heads: out_heads,
            tiled_pe,
            slot_pe,
            group_pe,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Raw compound embedding of token rows: per attribute table lookup,
    /// concatenation, projection. No PAD substitution, no positional
    /// encoding.
    fn embed_rows(&self, ps: &ParamSet, g: &mut Graph, ids: &[[u32; ATTRIBUTE_COUNT]]) -> NodeId {
        let mut parts = Vec::with_capacity(ATTRIBUTE_COUNT);
        for m in 0..ATTRIBUTE_COUNT {
            let table = ps.bind(g, self.tables[m]);
            let indices: Vec<usize> = ids.iter().map(|t| t[m] as usize).collect();
            parts.push(g.gather_rows(table, indices));
        }
        let concat = g.hstack(&parts);
        self.proj.apply(ps, g, concat)
    }

    /// Encoder-side embedding of a full view grid: PAD slots are replaced by
    /// the dedicated PAD embedding, then slot positional encoding is added.
    /// Output is `(G*L) x D`, group-major.
    pub fn embed_grid(
        &self,
        ps: &ParamSet,
        g: &mut Graph,
        values: &Array3<u32>,
        mask: &Array2<bool>,
        dropout: &Dropout,
    ) -> NodeId {
        let rows = self.groups * self.slots;
        assert_eq!(values.shape(), &[self.groups, self.slots, ATTRIBUTE_COUNT]);
        let mut ids = Vec::with_capacity(rows);
        for gi in 0..self.groups {
            for l in 0..self.slots {
                let mut t = [0u32; ATTRIBUTE_COUNT];
                for (m, slot) in t.iter_mut().enumerate() {
                    *slot = values[[gi, l, m]];
                }
                ids.push(t);
            }
        }
        let embedded = self.embed_rows(ps, g, &ids);
        // blend in the dedicated PAD embedding on masked-off slots
        let mut real = Mat::zeros((rows, self.dim));
        let mut padm = Mat::zeros((rows, self.dim));
        for (r, flag) in mask.iter().enumerate() {
            if *flag {
                real.row_mut(r).fill(1.0);
            } else {
                padm.row_mut(r).fill(1.0);
            }
        }
        let real = g.constant(real);
        let padm = g.constant(padm);
        let pad = ps.bind(g, self.pad_vec);
        let pad_rows = g.gather_rows(pad, vec![0; rows]);
        let kept = g.mul(embedded, real);
        let pad_part = g.mul(pad_rows, padm);
        let blended = g.add(kept, pad_part);
        let pe = g.constant(self.tiled_pe.clone());
        let with_pe = g.add(blended, pe);
        dropout.apply(g, with_pe)
    }

    /// Additive block-diagonal self-attention mask: queries attend only to
    /// valid cells of their own group (a group with no valid cells attends
    /// uniformly over its own slots, matching an isolated all-PAD run).
    fn block_self_mask(&self, mask: &Array2<bool>, causal: bool) -> Mat {
        let rows = self.groups * self.slots;
        let none_valid: Vec<bool> =
            (0..self.groups).map(|gi| !mask.row(gi).iter().any(|&m| m)).collect();
        Mat::from_shape_fn((rows, rows), |(q, k)| {
            let (qg, ql) = (q / self.slots, q % self.slots);
            let (kg, kl) = (k / self.slots, k % self.slots);
            if qg != kg {
                return crate::nn::graph::MASK_NEG;
            }
            if causal {
                if kl <= ql {
                    0.0
                } else {
                    crate::nn::graph::MASK_NEG
                }
            } else if mask[[kg, kl]] || none_valid[kg] {
                0.0
            } else {
                crate::nn::graph::MASK_NEG
            }
        })
    }

    /// `G x (G*L)` pooling mask with the same empty-group rule.
    fn pool_mask(&self, mask: &Array2<bool>) -> Mat {
        let rows = self.groups * self.slots;
        let none_valid: Vec<bool> =
            (0..self.groups).map(|gi| !mask.row(gi).iter().any(|&m| m)).collect();
        Mat::from_shape_fn((self.groups, rows), |(qg, k)| {
            let (kg, kl) = (k / self.slots, k % self.slots);
            if qg == kg && (mask[[kg, kl]] || none_valid[kg]) {
                0.0
            } else {
                crate::nn::graph::MASK_NEG
            }
        })
    }

    /// `(G*L) x G` cross-attention mask routing each slot to its own
    /// group's guidance row.
    fn guidance_routing_mask(&self) -> Mat {
        Mat::from_shape_fn((self.groups * self.slots, self.groups), |(q, kg)| {
            if q / self.slots == kg {
                0.0
            } else {
                crate::nn::graph::MASK_NEG
            }
        })
    }

    /// Hierarchical encoding: shared intra-group encoder + pooling per
    /// group (batched over groups with block masks), then the inter-group
    /// encoder (bar view adds group positional encoding first) and a final
    /// pooling to the view vector.
    ///
    /// Returns (group characteristics `G x D`, pooled view vector `1 x D`).
    pub fn encode(
        &self,
        ps: &ParamSet,
        g: &mut Graph,
        embedded: NodeId,
        mask: &Array2<bool>,
        dropout: &Dropout,
    ) -> (NodeId, NodeId) {
        let block = self.block_self_mask(mask, false);
        let enc = self.intra_enc.apply_masked(ps, g, embedded, Some(&block), dropout);
        let pool = self.pool_mask(mask);
        let chars = self.intra_pool.apply_grouped(ps, g, enc, self.groups, &pool);
        let inter_in = match &self.group_pe {
            Some(pe) => {
                let pe = g.constant(pe.clone());
                g.add(chars, pe)
            }
            None => chars,
        };
        let inter = self.inter_enc.apply(ps, g, inter_in, None, dropout);
        let pooled = self.inter_pool.apply(ps, g, inter, None);
        (chars, pooled)
    }

    /// Guidance rows from the latent vector (`1 x D_z`): one row per group;
    /// bar-view queries carry positional encoding.
    pub fn decode_guidance(&self, ps: &ParamSet, g: &mut Graph, z: NodeId) -> NodeId {
        self.guidance.apply(ps, g, z, self.group_pe.as_ref())
    }

    /// Teacher-forced decoding of every group, batched with block-causal
    /// self-attention and per-group cross-attention routing. `teacher`
    /// holds the target grid (`G x L x 8`); input at slot k is the embedded
    /// target k-1 (slot 0 is the learned start vector). Returns one logits
    /// node per attribute, `(G*L) x V_m`, group-major.
    pub fn decode_teacher(
        &self,
        ps: &ParamSet,
        g: &mut Graph,
        guidance: NodeId,
        teacher: &Array3<u32>,
        dropout: &Dropout,
    ) -> Vec<NodeId> {
        assert_eq!(teacher.shape(), &[self.groups, self.slots, ATTRIBUTE_COUNT]);
        let rows = self.groups * self.slots;
        // embed all teacher tokens once, then shift each group right by one
        let ids = grid_rows(teacher);
        let embedded = self.embed_rows(ps, g, &ids);
        let shift_idx: Vec<usize> = (0..rows)
            .map(|r| if r % self.slots == 0 { r } else { r - 1 })
            .collect();
        let shifted = g.gather_rows(embedded, shift_idx);
        // splice the learned start vector into every slot-0 row
        let mut keep = Mat::ones((rows, self.dim));
        let mut start_sel = Mat::zeros((rows, self.dim));
        for gi in 0..self.groups {
            keep.row_mut(gi * self.slots).fill(0.0);
            start_sel.row_mut(gi * self.slots).fill(1.0);
        }
        let keep = g.constant(keep);
        let start_sel = g.constant(start_sel);
        let start = ps.bind(g, self.start_vec);
        let start_rows = g.gather_rows(start, vec![0; rows]);
        let kept = g.mul(shifted, keep);
        let start_part = g.mul(start_rows, start_sel);
        let inputs = g.add(kept, start_part);
        let pe = g.constant(self.tiled_pe.clone());
        let inputs = g.add(inputs, pe);
        let inputs = dropout.apply(g, inputs);

        let full_mask = Array2::from_elem((self.groups, self.slots), true);
        let self_mask = self.block_self_mask(&full_mask, true);
        let cross = self.guidance_routing_mask();
        let out = self.intra_dec.apply_with_mask(
            ps,
            g,
            inputs,
            guidance,
            &self_mask,
            Some(&cross),
            dropout,
        );
        self.heads.iter().map(|h| h.apply(ps, g, out)).collect()
    }

    /// Logits for the next slot of one group given the already-generated
    /// prefix. Used by autoregressive generation.
    pub fn next_slot_logits(
        &self,
        ps: &ParamSet,
        guidance_row: &Mat,
        prefix: &[[u32; ATTRIBUTE_COUNT]],
    ) -> Vec<Vec<f64>> {
        assert!(prefix.len() < self.slots, "prefix must leave room for one slot");
        let mut g = Graph::new();
        let start = ps.bind(&mut g, self.start_vec);
        let inputs = if prefix.is_empty() {
            start
        } else {
            let emb = self.embed_rows(ps, &mut g, prefix);
            g.vstack(&[start, emb])
        };
        let len = prefix.len() + 1;
        let pe = g.constant(self.slot_pe.slice(ndarray::s![0..len, ..]).to_owned());
        let inputs = g.add(inputs, pe);
        let mem = g.constant(guidance_row.clone());
        let mask = causal_mask(len);
        let mut x = inputs;
        // mirror DecoderStack::apply but on a prefix-length causal mask
        x = self.intra_dec_apply_prefix(ps, &mut g, x, mem, &mask);
        let last = g.slice_rows(x, len - 1, 1);
        self.heads
            .iter()
            .map(|h| {
                let logits = h.apply(ps, &mut g, last);
                g.value(logits).row(0).to_vec()
            })
            .collect()
    }

    fn intra_dec_apply_prefix(
        &self,
        ps: &ParamSet,
        g: &mut Graph,
        x: NodeId,
        mem: NodeId,
        mask: &Mat,
    ) -> NodeId {
        self.intra_dec.apply_with_mask(ps, g, x, mem, mask, None, &Dropout::Off)
    }
}

/// The full two-view model plus fusion heads and the adaptive fusion
/// parameters.
pub struct MidiVae {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub track: ViewComponents,
    pub bar: ViewComponents,
    fusion: Linear,
    mu_head: Linear,
    logvar_head: Linear,
    /// Free parameters of the adaptive fusion weights (`1 x 8`); the fusion
    /// vector is their sigmoid.
    pub alpha_free: usize,
}

impl MidiVae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let track = ViewComponents::new(&mut ps, &mut rng, &config, View::Track);
        let bar = ViewComponents::new(&mut ps, &mut rng, &config, View::Bar);
        let fusion = Linear::new(
            &mut ps,
            &mut rng,
            "fusion.conv",
            config.track_dim + config.bar_dim,
            config.latent_dim,
        );
        let mu_head = Linear::new(&mut ps, &mut rng, "fusion.mu", config.latent_dim, config.latent_dim);
        let logvar_head =
            Linear::new(&mut ps, &mut rng, "fusion.logvar", config.latent_dim, config.latent_dim);
        // sigmoid(0) = 0.5: both views start with equal weight
        let alpha_free = ps.register("alpha.free", Mat::zeros((1, ATTRIBUTE_COUNT)));
        Ok(MidiVae {
            config,
            params: ps,
            track,
            bar,
            fusion,
            mu_head,
            logvar_head,
            alpha_free,
        })
    }

    pub fn view(&self, view: View) -> &ViewComponents {
        match view {
            View::Track => &self.track,
            View::Bar => &self.bar,
        }
    }

    /// Multi-view information fusion: the two pooled view vectors, stacked
    /// along a two-position view axis, pass through a width-2 convolution
    /// (equivalently, one affine map on their concatenation) to the hybrid
    /// embedding, from which two affine heads produce mu and log-variance.
    pub fn fuse_views(&self, g: &mut Graph, h_t: NodeId, h_b: NodeId) -> (NodeId, NodeId) {
        assert_eq!(g.value(h_t).shape(), &[1, self.config.track_dim], "h_t width");
        assert_eq!(g.value(h_b).shape(), &[1, self.config.bar_dim], "h_b width");
        let concat = g.hstack(&[h_t, h_b]);
        let hybrid = self.fusion.apply(&self.params, g, concat);
        let mu = self.mu_head.apply(&self.params, g, hybrid);
        let logvar = self.logvar_head.apply(&self.params, g, hybrid);
        (mu, logvar)
    }

    /// The adaptive fusion vector alpha = sigmoid(free), `1 x 8`.
    pub fn alpha_node(&self, g: &mut Graph) -> NodeId {
        let free = self.params.bind(g, self.alpha_free);
        g.sigmoid(free)
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        self.params
            .value(self.alpha_free)
            .row(0)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect()
    }

    /// Sum over both views' parameter tensors, for the weight-sharing audit.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

/// Flatten a view mask to group-major row order.
pub fn flat_mask(mask: &Array2<bool>) -> Vec<bool> {
    mask.iter().copied().collect()
}

/// Row-major flattening helper for `G x L x 8` grids.
pub fn grid_rows(values: &Array3<u32>) -> Vec<[u32; ATTRIBUTE_COUNT]> {
    let (g, l, _) = values.dim();
    let mut out = Vec::with_capacity(g * l);
    for gi in 0..g {
        for li in 0..l {
            let mut t = [0u32; ATTRIBUTE_COUNT];
            for (m, slot) in t.iter_mut().enumerate() {
                *slot = values[[gi, li, m]];
            }
            out.push(t);
        }
    }
    out
}

/// Mean embedding width sanity check used by tests.
pub fn attr_width(config: &ModelConfig, view: View) -> usize {
    config.dim(view) / ATTRIBUTE_COUNT
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octuple::OctupleVocabulary;
    use ndarray::Axis;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::miniature();
        c.track_dim = 16;
        c.bar_dim = 16;
        c.latent_dim = 16;
        c.attention_heads = 2;
        c.feedforward_width = 32;
        c.tracks = 3;
        c.bars = 4;
        c.track_slots = 5;
        c.bar_slots = 5;
        c
    }

    fn random_grid(cfg: &ModelConfig, view: View, seed: u64, fill: &[usize]) -> (Array3<u32>, Array2<bool>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = cfg.groups(view);
        let slots = cfg.slots(view);
        let mut values = Array3::zeros((groups, slots, ATTRIBUTE_COUNT));
        let mut mask = Array2::from_elem((groups, slots), false);
        for gi in 0..groups {
            for l in 0..slots {
                if l < fill[gi] {
                    mask[[gi, l]] = true;
                    for m in 0..ATTRIBUTE_COUNT {
                        values[[gi, l, m]] = rng.random_range(0..(cfg.vocab_sizes[m] - 2)) as u32;
                    }
                } else {
                    for m in 0..ATTRIBUTE_COUNT {
                        values[[gi, l, m]] = cfg.pad_index(m);
                    }
                }
            }
        }
        (values, mask)
    }

    #[test]
    fn config_defaults_match_reference_settings() {
        let vocab = OctupleVocabulary::new();
        let cfg = ModelConfig::full(&vocab);
        assert_eq!(cfg.track_dim, 512);
        assert_eq!(cfg.bar_dim, 512);
        assert_eq!(cfg.latent_dim, 512);
        assert_eq!(cfg.encoder_layers, 4);
        assert_eq!(cfg.decoder_layers, 8);
        assert_eq!(cfg.attention_heads, 8);
        cfg.validate().unwrap();
        ModelConfig::desk(&vocab).validate().unwrap();
        ModelConfig::miniature().validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_dims() {
        let mut c = ModelConfig::miniature();
        c.track_dim = 12; // not a multiple of 8
        assert!(c.validate().is_err());
        let mut c = ModelConfig::miniature();
        c.attention_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_is_shared_across_groups_and_pad_is_dedicated() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 1).unwrap();
        let (mut values, mut mask) = random_grid(&cfg, View::Track, 2, &[2, 2, 0]);
        // same token at the same slot of groups 0 and 1
        for m in 0..ATTRIBUTE_COUNT {
            values[[1, 0, m]] = values[[0, 0, m]];
        }
        // PAD cell with garbage indices must still embed as PAD
        mask[[2, 0]] = false;
        for m in 0..ATTRIBUTE_COUNT {
            values[[2, 0, m]] = 1;
        }
        let mut g = Graph::new();
        let emb = model.track.embed_grid(&model.params, &mut g, &values, &mask, &Dropout::Off);
        let v = g.value(emb).clone();
        let slots = cfg.track_slots;
        assert_eq!(v.shape(), &[cfg.tracks * slots, cfg.track_dim]);
        // identical tokens at the same slot index in different groups
        assert_eq!(v.row(0), v.row(slots));
        // PAD rows at equal slot indices are equal regardless of stored ids
        let (values2, mask2) = random_grid(&cfg, View::Track, 3, &[0, 0, 0]);
        let emb2 = model.track.embed_grid(&model.params, &mut g, &values2, &mask2, &Dropout::Off);
        let v2 = g.value(emb2);
        assert_eq!(v.row(2 * slots), v2.row(2 * slots));
    }

    #[test]
    fn encode_shapes_are_as_documented() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 1).unwrap();
        let (values, mask) = random_grid(&cfg, View::Bar, 5, &[3, 0, 1, 5]);
        let mut g = Graph::new();
        let emb = model.bar.embed_grid(&model.params, &mut g, &values, &mask, &Dropout::Off);
        let (chars, pooled) = model.bar.encode(&model.params, &mut g, emb, &mask, &Dropout::Off);
        assert_eq!(g.value(chars).shape(), &[cfg.bars, cfg.bar_dim]);
        assert_eq!(g.value(pooled).shape(), &[1, cfg.bar_dim]);
        assert!(g.value(pooled).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn track_summary_is_permutation_invariant_and_bar_is_not() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 7).unwrap();
        let (values, mask) = random_grid(&cfg, View::Track, 11, &[2, 4, 1]);

        let encode_track = |values: &Array3<u32>, mask: &Array2<bool>| {
            let mut g = Graph::new();
            let emb = model.track.embed_grid(&model.params, &mut g, values, mask, &Dropout::Off);
            let (_, pooled) = model.track.encode(&model.params, &mut g, emb, mask, &Dropout::Off);
            g.value(pooled).clone()
        };
        let base = encode_track(&values, &mask);
        // swap groups 0 and 2
        let mut pvalues = values.clone();
        let mut pmask = mask.clone();
        for l in 0..cfg.track_slots {
            for m in 0..ATTRIBUTE_COUNT {
                pvalues[[0, l, m]] = values[[2, l, m]];
                pvalues[[2, l, m]] = values[[0, l, m]];
            }
            pmask[[0, l]] = mask[[2, l]];
            pmask[[2, l]] = mask[[0, l]];
        }
        let permuted = encode_track(&pvalues, &pmask);
        let rel: f64 = (&base - &permuted)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max)
            / base.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(rel < 1e-10, "track view should be permutation invariant, rel dev {rel}");

        // the bar view must generally change under group permutation
        let (bvalues, bmask) = random_grid(&cfg, View::Bar, 13, &[2, 3, 1, 4]);
        let encode_bar = |values: &Array3<u32>, mask: &Array2<bool>| {
            let mut g = Graph::new();
            let emb = model.bar.embed_grid(&model.params, &mut g, values, mask, &Dropout::Off);
            let (_, pooled) = model.bar.encode(&model.params, &mut g, emb, mask, &Dropout::Off);
            g.value(pooled).clone()
        };
        let b0 = encode_bar(&bvalues, &bmask);
        let mut pb = bvalues.clone();
        let mut pm = bmask.clone();
        for l in 0..cfg.bar_slots {
            for m in 0..ATTRIBUTE_COUNT {
                pb[[0, l, m]] = bvalues[[3, l, m]];
                pb[[3, l, m]] = bvalues[[0, l, m]];
            }
            pm[[0, l]] = bmask[[3, l]];
            pm[[3, l]] = bmask[[0, l]];
        }
        let b1 = encode_bar(&pb, &pm);
        assert_ne!(b0, b1, "bar positional encoding should break permutation symmetry");
    }

    #[test]
    fn fuse_views_is_asymmetric_and_right_sized() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Mat::from_shape_fn((1, 16), |(_, j)| 0.1 * j as f64));
        let b = g.constant(Mat::from_shape_fn((1, 16), |(_, j)| -0.05 * j as f64));
        let (mu1, lv1) = model.fuse_views(&mut g, a, b);
        let (mu2, _) = model.fuse_views(&mut g, b, a);
        assert_eq!(g.value(mu1).shape(), &[1, cfg.latent_dim]);
        assert_eq!(g.value(lv1).shape(), &[1, cfg.latent_dim]);
        assert_ne!(g.value(mu1), g.value(mu2), "fusion should distinguish view order");

        // zero inputs give exactly the composed biases, deterministically
        let z1 = g.constant(Mat::zeros((1, 16)));
        let z2 = g.constant(Mat::zeros((1, 16)));
        let (mu_a, lv_a) = model.fuse_views(&mut g, z1, z2);
        let (mu_b, lv_b) = model.fuse_views(&mut g, z1, z2);
        assert_eq!(g.value(mu_a), g.value(mu_b));
        assert_eq!(g.value(lv_a), g.value(lv_b));
    }

    #[test]
    fn decoder_logit_shapes_and_alpha_bounds() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 5).unwrap();
        let (values, _) = random_grid(&cfg, View::Bar, 17, &[2, 1, 0, 3]);
        let mut g = Graph::new();
        let z = g.constant(Mat::from_shape_fn((1, cfg.latent_dim), |(_, j)| 0.01 * j as f64));
        let guidance = model.bar.decode_guidance(&model.params, &mut g, z);
        assert_eq!(g.value(guidance).shape(), &[cfg.bars, cfg.bar_dim]);
        let logits = model.bar.decode_teacher(&model.params, &mut g, guidance, &values, &Dropout::Off);
        assert_eq!(logits.len(), ATTRIBUTE_COUNT);
        for (m, l) in logits.iter().enumerate() {
            assert_eq!(g.value(*l).shape(), &[cfg.bars * cfg.bar_slots, cfg.vocab_sizes[m]]);
        }
        let alpha = model.alpha_node(&mut g);
        let av = g.value(alpha);
        assert_eq!(av.shape(), &[1, ATTRIBUTE_COUNT]);
        assert!(av.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(av.iter().all(|&x| (x - 0.5).abs() < 1e-12), "alpha starts at 0.5");
    }

    #[test]
    fn weight_sharing_audit_group_count_does_not_change_param_count() {
        let mut a = tiny_config();
        a.tracks = 2;
        a.bars = 2;
        let mut b = tiny_config();
        b.tracks = 6;
        b.bars = 7;
        let ma = MidiVae::new(a, 1).unwrap();
        let mb = MidiVae::new(b, 1).unwrap();
        // only the guidance query matrices grow with group counts
        let guide_rows = |m: &MidiVae| {
            m.params.value(m.params.id("track.guide.queries").unwrap()).len()
                + m.params.value(m.params.id("bar.guide.queries").unwrap()).len()
        };
        assert_eq!(
            ma.parameter_count() - guide_rows(&ma),
            mb.parameter_count() - guide_rows(&mb),
            "intra/inter stacks must be weight-shared across groups"
        );
    }

    #[test]
    fn next_slot_logits_match_teacher_forced_prefix() {
        let cfg = tiny_config();
        let model = MidiVae::new(cfg.clone(), 9).unwrap();
        let (values, _) = random_grid(&cfg, View::Bar, 19, &[3, 0, 0, 0]);
        let mut g = Graph::new();
        let z = g.constant(Mat::zeros((1, cfg.latent_dim)));
        let guidance = model.bar.decode_guidance(&model.params, &mut g, z);
        let logits =
            model.bar.decode_teacher(&model.params, &mut g, guidance, &values, &Dropout::Off);
        let guidance_row = g.value(guidance).row(0).insert_axis(Axis(0)).to_owned();
        // prefix of 2 tokens: the teacher-forced logits at slot 2 must match
        let prefix: Vec<[u32; ATTRIBUTE_COUNT]> = grid_rows(&values)[0..2].to_vec();
        let step = model.bar.next_slot_logits(&model.params, &guidance_row, &prefix);
        for m in 0..ATTRIBUTE_COUNT {
            let teacher_row = g.value(logits[m]).row(2).to_vec();
            for (a, b) in teacher_row.iter().zip(&step[m]) {
                assert!((a - b).abs() < 1e-9, "attr {m}: {a} vs {b}");
            }
        }
    }
}
