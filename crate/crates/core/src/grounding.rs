//! Cross-modal matching, per-branch proposal scores, score fusion and the
//! final box choice.

use crate::error::{Error, Result};
use crate::nn::{gaussian, param_rng, Bound, FeedForward, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::scenegen::{Box3D, ProposalSet};
use crate::tensor::{softmax, Tape, Var};

/// Per-proposal scores from both branches and their fusion. Each vector lies
/// on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalScores {
    pub speech: Vec<f64>,
    pub text: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Proposals (queries) attend over a language sequence, then a residual
/// feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct MatchParams {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl MatchParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, seed, &format!("{name}.attn"), dim, heads),
            ffn: FeedForward::new(store, seed, &format!("{name}.ffn"), (dim, 2 * dim, dim)),
        }
    }
}

/// `M × D` fused proposal features.
pub fn cross_modal_match(tape: &mut Tape, p: &Bound, params: &MatchParams, proposals: Var, lang: Var) -> Var {
    assert!(tape.value(lang).rows > 0, "empty language sequence");
    let a = params.attn.forward(tape, p, proposals, lang);
    let x = tape.add(proposals, a);
    let f = params.ffn.forward(tape, p, x);
    tape.add(x, f)
}

/// Two-layer feed-forward producing one logit per proposal.
#[derive(Clone, Copy, Debug)]
pub struct ScoreHead {
    pub hidden: Linear,
    /// `1 × D` readout; a bias would cancel under the softmax.
    pub readout: ParamId,
}

impl ScoreHead {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dim: usize) -> Self {
        let rname = format!("{name}.readout");
        let readout = gaussian(1, dim, (1.0 / dim as f64).sqrt(), &mut param_rng(seed, &rname));
        Self { hidden: Linear::new(store, seed, &format!("{name}.hidden"), dim, dim), readout: store.add(rname, readout) }
    }

    /// `1 × M` logits.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Var {
        let h = self.hidden.forward(tape, p, fused);
        let h = tape.gelu(h);
        tape.matmul_t(p.var(self.readout), h)
    }

    /// `1 × M` probabilities.
    pub fn scores(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Var {
        let z = self.logits(tape, p, fused);
        tape.softmax_rows(z)
    }
}

/// Where the branches are mixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionLevel {
    /// `S = β S_s + (1-β) S_t` on probabilities.
    Probability,
    /// `softmax(β z_s + (1-β) z_t)` on logits.
    Logit,
}

pub fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidBeta(beta))
    }
}

pub fn fuse_scores(speech: &[f64], text: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    assert_eq!(speech.len(), text.len(), "branch length mismatch");
    Ok(speech.iter().zip(text).map(|(s, t)| beta * s + (1.0 - beta) * t).collect())
}

pub fn fuse_logits(speech: &[f64], text: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let z: Vec<f64> = speech.iter().zip(text).map(|(s, t)| beta * s + (1.0 - beta) * t).collect();
    Ok(softmax(&z))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    assert!(!scores.is_empty(), "empty score vector");
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn select_box(scores: &[f64], proposals: &ProposalSet) -> (usize, Box3D) {
    let i = argmax(scores);
    (i, proposals.boxes[i])
}
