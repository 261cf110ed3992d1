//! The multi-view VAE assembly: latent fusion, reparameterization, dual
//! decoding, adaptive probability fusion and the composite loss.
//!
//! The per-attribute fusion weights alpha blend the two views' scattered
//! probabilities position by position:
//!
//! ```text
//! P[n, m] = alpha_m * scatter_t(P_t)[n, m] + (1 - alpha_m) * scatter_b(P_b)[n, m]
//! ```
//!
//! and the training objective is the sum of the fused, track-view and
//! bar-view reconstruction terms plus the beta-weighted KL divergence.
//!
//! Plain (graph-free) implementations of the fusion, KL and loss arithmetic
//! live here alongside the graph-based training path; tests hold the two
//! routes together.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MidiVae, ModelConfig, View, ViewMode};
use crate::nn::graph::{Graph, Mat, NodeId};
use crate::nn::layers::Dropout;
use crate::octuple::{OctupleToken, TokenSequence, ATTRIBUTE_COUNT};
use crate::views::{PieceViews, ViewTensor, ViewTransform};

/// Latent distribution parameters and a realized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
    /// The noise that produced `z` (all zeros in deterministic mode), kept
    /// for reproducibility.
    pub epsilon: Vec<f64>,
}

impl LatentState {
    /// Deterministic mode: z = mu.
    pub fn deterministic(mu: Vec<f64>, log_var: Vec<f64>) -> Self {
        let z = mu.clone();
        let epsilon = vec![0.0; mu.len()];
        LatentState { mu, log_var, z, epsilon }
    }

    /// Reparameterized sample z = mu + exp(log_var / 2) * eps with eps drawn
    /// from the given generator.
    pub fn sample(mu: Vec<f64>, log_var: Vec<f64>, rng: &mut ChaCha8Rng) -> Self {
        let epsilon: Vec<f64> = (0..mu.len()).map(|_| standard_normal(rng)).collect();
        Self::with_noise(mu, log_var, epsilon)
    }

    /// Reparameterize with explicit noise.
    pub fn with_noise(mu: Vec<f64>, log_var: Vec<f64>, epsilon: Vec<f64>) -> Self {
        assert_eq!(mu.len(), log_var.len());
        assert_eq!(mu.len(), epsilon.len());
        let z = mu
            .iter()
            .zip(&log_var)
            .zip(&epsilon)
            .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
            .collect();
        LatentState { mu, log_var, z, epsilon }
    }
}

/// One standard-normal draw (Box-Muller; two uniforms per call keeps the
/// stream layout independent of call parity).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// KL(N(mu, diag sigma^2) || N(0, I)) in closed form.
pub fn kl_divergence(state: &LatentState) -> f64 {
    0.5 * state
        .mu
        .iter()
        .zip(&state.log_var)
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// The adaptive per-attribute fusion vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    alpha: Vec<f64>,
}

impl FusionWeights {
    /// Any alpha in [0, 1] componentwise; the boundaries select one view
    /// exactly.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != ATTRIBUTE_COUNT {
            return Err(Error::Contract(format!(
                "fusion weights need {ATTRIBUTE_COUNT} components, got {}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Contract("fusion weights must lie in [0, 1]".into()));
        }
        Ok(FusionWeights { alpha })
    }

    /// Sigmoid-squashed free parameters; always strictly inside (0, 1).
    pub fn from_free(free: &[f64]) -> Self {
        FusionWeights {
            alpha: free.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
        }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Per-position categorical distributions, one matrix per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProbabilities {
    pub attrs: Vec<Array2<f64>>,
}

impl AttributeProbabilities {
    pub fn rows(&self) -> usize {
        self.attrs.first().map(|a| a.nrows()).unwrap_or(0)
    }

    /// Every row of every attribute sums to 1 within `tol`.
    pub fn check_normalized(&self, tol: f64) -> bool {
        self.attrs
            .iter()
            .all(|a| a.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= tol))
    }
}

/// The composite loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rs: f64,
    pub l_rst: f64,
    pub l_rsb: f64,
    pub l_kl: f64,
    pub beta: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// The additivity identity `l_total = l_rs + l_rst + l_rsb + beta*l_kl`.
    pub fn additivity_error(&self) -> f64 {
        (self.l_rs + self.l_rst + self.l_rsb + self.beta * self.l_kl - self.l_total).abs()
    }
}

/// Targets and loss mask for one view in flattened group-major order.
#[derive(Debug, Clone)]
pub struct ViewTargets {
    /// `targets[m][row]` is attribute m's index at that slot.
    pub targets: Vec<Vec<usize>>,
    /// True on supervised slots (real tokens plus the end-of-group slot).
    pub mask: Vec<bool>,
}

impl ViewTargets {
    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Teacher grid for one view: target tokens with an end-of-group marker
/// appended after each group's real tokens (when capacity allows), PAD
/// beyond. Also returns the supervision mask.
pub fn decoder_targets(view: &ViewTensor, cfg: &ModelConfig, which: View) -> (Array3<u32>, Array2<bool>) {
    let groups = cfg.groups(which);
    let slots = cfg.slots(which);
    let mut targets = view.values.clone();
    let mut mask = Array2::from_elem((groups, slots), false);
    for g in 0..groups {
        let len = view.mask.row(g).iter().filter(|&&m| m).count();
        for l in 0..len {
            mask[[g, l]] = true;
        }
        if len < slots {
            for m in 0..ATTRIBUTE_COUNT {
                targets[[g, len, m]] = cfg.eog_index(m);
            }
            mask[[g, len]] = true;
        }
    }
    (targets, mask)
}

/// Flatten a teacher grid into per-attribute target/mask vectors.
pub fn flatten_targets(targets: &Array3<u32>, mask: &Array2<bool>) -> ViewTargets {
    let (groups, slots, _) = targets.dim();
    let mut out = ViewTargets {
        targets: std::array::from_fn::<_, ATTRIBUTE_COUNT, _>(|_| Vec::with_capacity(groups * slots))
            .into(),
        mask: Vec::with_capacity(groups * slots),
    };
    for g in 0..groups {
        for l in 0..slots {
            for m in 0..ATTRIBUTE_COUNT {
                out.targets[m].push(targets[[g, l, m]] as usize);
            }
            out.mask.push(mask[[g, l]]);
        }
    }
    out
}

/// Canonical targets of a sequence: `targets[m][n]`.
pub fn canonical_targets(seq: &TokenSequence) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> =
        std::array::from_fn::<_, ATTRIBUTE_COUNT, _>(|_| Vec::with_capacity(seq.len())).into();
    for t in seq.tokens() {
        for (m, &v) in t.as_array().iter().enumerate() {
            out[m].push(v as usize);
        }
    }
    out
}

/// Adaptive feature fusion on plain matrices: scatter both views back to
/// canonical order and blend per attribute. Both views must cover the same
/// canonical length.
pub fn fuse_probabilities(
    p_t: &AttributeProbabilities,
    p_b: &AttributeProbabilities,
    xf_t: &ViewTransform,
    xf_b: &ViewTransform,
    weights: &FusionWeights,
) -> Result<AttributeProbabilities> {
    if xf_t.canonical_len() != xf_b.canonical_len() {
        return Err(Error::Contract(format!(
            "view transforms disagree on canonical length: {} vs {}",
            xf_t.canonical_len(),
            xf_b.canonical_len()
        )));
    }
    let mut attrs = Vec::with_capacity(ATTRIBUTE_COUNT);
    for m in 0..ATTRIBUTE_COUNT {
        let st = xf_t.scatter_to_canonical(&p_t.attrs[m])?;
        let sb = xf_b.scatter_to_canonical(&p_b.attrs[m])?;
        let a = weights.alpha()[m];
        attrs.push(a * &st + (1.0 - a) * &sb);
    }
    Ok(AttributeProbabilities { attrs })
}

/// Mean (over masked rows) of the summed per-attribute cross-entropies.
pub fn reconstruction_loss(
    probs: &AttributeProbabilities,
    targets: &[Vec<usize>],
    mask: &[bool],
) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for m in 0..ATTRIBUTE_COUNT {
        for (row, (&t, &keep)) in probs.attrs[m]
            .rows()
            .into_iter()
            .zip(targets[m].iter().zip(mask))
        {
            if keep {
                total -= row[t].max(1e-300).ln();
            }
        }
    }
    total / count as f64
}

/// Assemble the composite loss from plain probabilities; the graph-based
/// training path computes the same quantities.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    fused: &AttributeProbabilities,
    canonical: &[Vec<usize>],
    p_t: &AttributeProbabilities,
    t_targets: &ViewTargets,
    p_b: &AttributeProbabilities,
    b_targets: &ViewTargets,
    state: &LatentState,
    beta: f64,
) -> LossBreakdown {
    let n = fused.rows();
    let l_rs = reconstruction_loss(fused, canonical, &vec![true; n]);
    let l_rst = reconstruction_loss(p_t, &t_targets.targets, &t_targets.mask);
    let l_rsb = reconstruction_loss(p_b, &b_targets.targets, &b_targets.mask);
    let l_kl = kl_divergence(state);
    LossBreakdown {
        l_rs,
        l_rst,
        l_rsb,
        l_kl,
        beta,
        l_total: l_rs + l_rst + l_rsb + beta * l_kl,
    }
}

/// How z is realized in a forward pass.
#[derive(Debug, Clone)]
pub enum LatentMode {
    /// z = mu; used for reconstruction evaluation.
    Deterministic,
    /// z = mu + sigma * eps with the given noise (length `latent_dim`).
    Noise(Vec<f64>),
}

/// Everything a teacher-forced reconstruction pass produces.
pub struct ForwardOutput {
    pub graph: Graph,
    pub loss_node: NodeId,
    pub breakdown: LossBreakdown,
    pub latent: LatentState,
    /// Fused canonical probabilities (N rows per attribute).
    pub fused: AttributeProbabilities,
    /// View probabilities in flattened group-major order.
    pub track_probs: AttributeProbabilities,
    pub bar_probs: AttributeProbabilities,
    /// Argmax reconstruction, canonical order.
    pub reconstruction: TokenSequence,
    /// True when the piece had no tokens (losses defined as zero).
    pub empty_piece: bool,
}

/// Run the full teacher-forced pipeline on one piece, building the autodiff
/// graph as we go. `dropout_rng` enables dropout (training only).
pub fn forward_reconstruct(
    model: &MidiVae,
    piece: &PieceViews,
    mode: &LatentMode,
    beta: f64,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let ps = &model.params;
    let mode_views = cfg.view_mode;
    let mut g = Graph::new();
    let dropout = Dropout::new(cfg.dropout, dropout_rng);

    // encode the active views; a disabled branch contributes zeros
    let h_t = if mode_views.uses_track() {
        let emb = model.track.embed_grid(ps, &mut g, &piece.track_tensor.values, &piece.track_tensor.mask, &dropout);
        let (_, h) = model.track.encode(ps, &mut g, emb, &piece.track_tensor.mask, &dropout);
        h
    } else {
        g.constant(Mat::zeros((1, cfg.track_dim)))
    };
    let h_b = if mode_views.uses_bar() {
        let emb = model.bar.embed_grid(ps, &mut g, &piece.bar_tensor.values, &piece.bar_tensor.mask, &dropout);
        let (_, h) = model.bar.encode(ps, &mut g, emb, &piece.bar_tensor.mask, &dropout);
        h
    } else {
        g.constant(Mat::zeros((1, cfg.bar_dim)))
    };

    // latent fusion and reparameterization
    let (mu_node, lv_node) = model.fuse_views(&mut g, h_t, h_b);
    let z_node = match mode {
        LatentMode::Deterministic => mu_node,
        LatentMode::Noise(eps) => {
            if eps.len() != cfg.latent_dim {
                return Err(Error::Contract(format!(
                    "noise length {} != latent dim {}",
                    eps.len(),
                    cfg.latent_dim
                )));
            }
            let eps_node = g.constant(Mat::from_shape_vec((1, eps.len()), eps.clone()).expect("row"));
            let half_lv = g.scale(lv_node, 0.5);
            let sigma = g.exp(half_lv);
            let scaled = g.mul(sigma, eps_node);
            g.add(mu_node, scaled)
        }
    };

    // dual decoding with teacher forcing (active branches only)
    let zero_loss = |g: &mut Graph| g.constant(Mat::zeros((1, 1)));
    let probs_t: Vec<NodeId>;
    let l_rst;
    if mode_views.uses_track() {
        let guide = model.track.decode_guidance(ps, &mut g, z_node);
        let (teach, mask) = decoder_targets(&piece.track_tensor, cfg, View::Track);
        let logits = model.track.decode_teacher(ps, &mut g, guide, &teach, &dropout);
        probs_t = logits.iter().map(|&l| g.softmax_rows(l)).collect();
        let targets = flatten_targets(&teach, &mask);
        l_rst = view_loss_node(&mut g, &probs_t, &targets);
    } else {
        probs_t = Vec::new();
        l_rst = zero_loss(&mut g);
    }
    let probs_b: Vec<NodeId>;
    let l_rsb;
    if mode_views.uses_bar() {
        let guide = model.bar.decode_guidance(ps, &mut g, z_node);
        let (teach, mask) = decoder_targets(&piece.bar_tensor, cfg, View::Bar);
        let logits = model.bar.decode_teacher(ps, &mut g, guide, &teach, &dropout);
        probs_b = logits.iter().map(|&l| g.softmax_rows(l)).collect();
        let targets = flatten_targets(&teach, &mask);
        l_rsb = view_loss_node(&mut g, &probs_b, &targets);
    } else {
        probs_b = Vec::new();
        l_rsb = zero_loss(&mut g);
    }

    // adaptive feature fusion back to canonical order; in single-view mode
    // the fused matrix is exactly the active view's scatter
    let n = piece.canonical_len();
    let alpha = model.alpha_node(&mut g);
    let idx_t = piece.track_transform.canonical_row_indices();
    let idx_b = piece.bar_transform.canonical_row_indices();
    let canon = canonical_targets(&piece.seq);
    let mut fused_nodes = Vec::with_capacity(ATTRIBUTE_COUNT);
    let mut nll_rs: Option<NodeId> = None;
    for m in 0..ATTRIBUTE_COUNT {
        let fused = match mode_views {
            ViewMode::Multi => {
                let pt = g.gather_rows(probs_t[m], idx_t.clone());
                let pb = g.gather_rows(probs_b[m], idx_b.clone());
                let am = g.slice_cols(alpha, m, 1);
                let one_minus = g.affine(am, -1.0, 1.0);
                let wt = g.mul_scalar_node(pt, am);
                let wb = g.mul_scalar_node(pb, one_minus);
                g.add(wt, wb)
            }
            ViewMode::TrackOnly => g.gather_rows(probs_t[m], idx_t.clone()),
            ViewMode::BarOnly => g.gather_rows(probs_b[m], idx_b.clone()),
        };
        fused_nodes.push(fused);
        if n > 0 {
            let nll = g.nll_probs(fused, canon[m].clone(), vec![true; n]);
            nll_rs = Some(match nll_rs {
                Some(acc) => g.add(acc, nll),
                None => nll,
            });
        }
    }
    let l_rs = match nll_rs {
        Some(sum) => g.scale(sum, 1.0 / n as f64),
        None => g.constant(Mat::zeros((1, 1))),
    };

    // KL term
    let exp_lv = g.exp(lv_node);
    let mu_sq = g.mul(mu_node, mu_node);
    let sum_terms = g.add(exp_lv, mu_sq);
    let minus_lv = g.sub(sum_terms, lv_node);
    let shifted = g.affine(minus_lv, 1.0, -1.0);
    let kl_sum = g.sum_all(shifted);
    let l_kl = g.scale(kl_sum, 0.5);

    // total
    let kl_term = g.scale(l_kl, beta);
    let rec = g.add(l_rs, l_rst);
    let rec2 = g.add(rec, l_rsb);
    let loss_node = g.add(rec2, kl_term);

    let empty_piece = n == 0;
    if empty_piece {
        eprintln!("warning: all positions PAD; reconstruction terms defined as 0");
    }

    // extract plain values
    let mu = g.value(mu_node).row(0).to_vec();
    let log_var = g.value(lv_node).row(0).to_vec();
    let latent = match mode {
        LatentMode::Deterministic => LatentState::deterministic(mu, log_var),
        LatentMode::Noise(eps) => LatentState::with_noise(mu, log_var, eps.clone()),
    };
    let breakdown = LossBreakdown {
        l_rs: g.value(l_rs)[[0, 0]],
        l_rst: g.value(l_rst)[[0, 0]],
        l_rsb: g.value(l_rsb)[[0, 0]],
        l_kl: g.value(l_kl)[[0, 0]],
        beta,
        l_total: g.value(loss_node)[[0, 0]],
    };
    let fused = AttributeProbabilities {
        attrs: fused_nodes.iter().map(|&f| g.value(f).clone()).collect(),
    };
    let track_probs = AttributeProbabilities {
        attrs: probs_t.iter().map(|&p| g.value(p).clone()).collect(),
    };
    let bar_probs = AttributeProbabilities {
        attrs: probs_b.iter().map(|&p| g.value(p).clone()).collect(),
    };
    let reconstruction = argmax_sequence(&fused, cfg);

    Ok(ForwardOutput {
        graph: g,
        loss_node,
        breakdown,
        latent,
        fused,
        track_probs,
        bar_probs,
        reconstruction,
        empty_piece,
    })
}

fn view_loss_node(g: &mut Graph, probs: &[NodeId], targets: &ViewTargets) -> NodeId {
    let count = targets.supervised();
    if count == 0 {
        return g.constant(Mat::zeros((1, 1)));
    }
    let mut acc: Option<NodeId> = None;
    for (m, &p) in probs.iter().enumerate() {
        let nll = g.nll_probs(p, targets.targets[m].clone(), targets.mask.clone());
        acc = Some(match acc {
            Some(a) => g.add(a, nll),
            None => nll,
        });
    }
    let sum = acc.expect("eight attributes");
    g.scale(sum, 1.0 / count as f64)
}

/// Greedy per-position reconstruction: argmax over the real value range
/// (PAD and end-of-group are prediction-support only for generation stops).
pub fn argmax_sequence(fused: &AttributeProbabilities, cfg: &ModelConfig) -> TokenSequence {
    let n = fused.rows();
    let mut tokens = Vec::with_capacity(n);
    for row in 0..n {
        let mut attrs = [0u32; ATTRIBUTE_COUNT];
        for (m, slot) in attrs.iter_mut().enumerate() {
            let real = cfg.vocab_sizes[m] - 2;
            let r = fused.attrs[m].row(row);
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for (v, &p) in r.iter().take(real).enumerate() {
                if p > best_p {
                    best_p = p;
                    best = v;
                }
            }
            *slot = best as u32;
        }
        tokens.push(OctupleToken::from_array(attrs));
    }
    TokenSequence::new(tokens, None)
}

/// How generated distributions are turned into tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    Temperature(f64),
}

/// One generated piece: the bar-view decode is the piece (temporally
/// ordered by construction); the track-view decode is kept for diagnostics.
#[derive(Debug, Clone)]
pub struct GeneratedPiece {
    pub piece: TokenSequence,
    pub track_diagnostic: TokenSequence,
    pub degenerate: bool,
}

/// Sample `count` pieces from the prior: z ~ N(0, I), each view decodes its
/// groups autoregressively until an end-of-group pitch or slot capacity.
pub fn sample_prior_generate(
    model: &MidiVae,
    count: usize,
    seed: u64,
    strategy: DecodeStrategy,
) -> Vec<GeneratedPiece> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| standard_normal(&mut rng)).collect();
        let bar_tokens = decode_view_free(model, View::Bar, &z, &mut rng, strategy);
        let track_tokens = decode_view_free(model, View::Track, &z, &mut rng, strategy);
        let degenerate = bar_tokens.is_empty();
        out.push(GeneratedPiece {
            piece: TokenSequence::new(bar_tokens, None),
            track_diagnostic: TokenSequence::new(track_tokens, None),
            degenerate,
        });
    }
    out
}

/// Autoregressive free decoding of one view from a latent vector.
pub fn decode_view_free(
    model: &MidiVae,
    which: View,
    z: &[f64],
    rng: &mut ChaCha8Rng,
    strategy: DecodeStrategy,
) -> Vec<OctupleToken> {
    let cfg = &model.config;
    let ps = &model.params;
    let view = model.view(which);
    let mut g = Graph::new();
    let z_node = g.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
    let guidance = view.decode_guidance(ps, &mut g, z_node);
    let guidance_all = g.value(guidance).clone();

    let mut tokens = Vec::new();
    for group in 0..cfg.groups(which) {
        let guidance_row = guidance_all.row(group).insert_axis(Axis(0)).to_owned();
        let mut prefix: Vec<[u32; ATTRIBUTE_COUNT]> = Vec::new();
        while prefix.len() < cfg.slots(which) {
            let logits = view.next_slot_logits(ps, &guidance_row, &prefix);
            let mut attrs = [0u32; ATTRIBUTE_COUNT];
            let mut stop = false;
            for m in 0..ATTRIBUTE_COUNT {
                // sample over real values + end-of-group; PAD is never emitted
                let real = cfg.vocab_sizes[m] - 2;
                let mut candidates = logits[m][..real].to_vec();
                candidates.push(logits[m][cfg.eog_index(m) as usize]);
                let idx = match strategy {
                    DecodeStrategy::Greedy => argmax(&candidates),
                    DecodeStrategy::Temperature(tau) => sample_categorical(&candidates, tau, rng),
                };
                if idx == real {
                    if m == 0 {
                        stop = true;
                        break;
                    }
                    // a non-pitch head voted to stop; fall back to its best
                    // real value so the token stays decodable
                    attrs[m] = argmax(&logits[m][..real]) as u32;
                } else {
                    attrs[m] = idx as u32;
                }
            }
            if stop {
                break;
            }
            prefix.push(attrs);
            tokens.push(OctupleToken::from_array(attrs));
        }
    }
    tokens
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

fn sample_categorical(logits: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let tau = tau.max(1e-6);
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let weights: Vec<f64> = logits.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
