//! Training objectives. Every loss has a value-level form and a tape form;
//! the tape forms are what training differentiates.

use crate::error::{Error, Result};
use crate::scenegen::{iou, Box3D, ProposalSet};
use crate::tensor::{Mat, Tape, Var};

pub const LOG_CLAMP: f64 = 1e-12;

/// One-hot reference label over `m` proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefLabels {
    pub hot: usize,
    pub m: usize,
}

impl RefLabels {
    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.m).map(|i| if i == self.hot { 1.0 } else { 0.0 }).collect()
    }
}

/// How the contrastive directional terms are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveMode {
    /// Mean over the active directional terms.
    Six,
    /// Mean over the groups {T→S}, {S→T}, {S,T→O}, {O→S,T}.
    Four,
}

/// Which modality pairs are aligned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub text_object: bool,
    pub speech_object: bool,
    pub text_speech: bool,
}

impl Alignment {
    pub const ALL: Alignment = Alignment { text_object: true, speech_object: true, text_speech: true };
    pub const NONE: Alignment = Alignment { text_object: false, speech_object: false, text_speech: false };

    pub fn is_empty(&self) -> bool {
        !(self.text_object || self.speech_object || self.text_speech)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub temperature: f64,
    pub contrastive_mode: ContrastiveMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 0.5,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            temperature: 0.07,
            contrastive_mode: ContrastiveMode::Six,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha1, self.alpha2, self.gamma1, self.gamma2, self.gamma3];
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        crate::grounding::check_beta(self.beta)
    }
}

/// Cross-entropy `-Σ y_i ln ŷ_i`, probabilities clamped at 1e-12.
pub fn cls_loss(probs: &[f64], target: &[f64]) -> f64 {
    assert_eq!(probs.len(), target.len());
    -probs.iter().zip(target).map(|(p, y)| y * p.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// `-ln ŷ[target]` for a `1 × C` probability node.
pub fn cls_loss_var(tape: &mut Tape, probs: Var, target: usize) -> Var {
    let l = tape.log_clamp(probs, LOG_CLAMP);
    let picked = tape.pick_mean(l, &[target]);
    tape.scale(picked, -1.0)
}

/// One-hot at the proposal with the highest IoU against `gt` (lowest index on ties).
pub fn make_ref_labels(proposals: &ProposalSet, gt: &Box3D) -> RefLabels {
    assert!(!proposals.is_empty(), "no proposals");
    let ious: Vec<f64> = proposals.boxes.iter().map(|b| iou(b, gt)).collect();
    RefLabels { hot: crate::grounding::argmax(&ious), m: proposals.len() }
}

/// `α1 L_ref-s + α2 L_ref-t`.
pub fn ref_loss(speech: &[f64], text: &[f64], labels: &RefLabels, alpha1: f64, alpha2: f64) -> f64 {
    let t = labels.one_hot();
    alpha1 * cls_loss(speech, &t) + alpha2 * cls_loss(text, &t)
}

/// Single-branch reference loss on a `1 × M` score node.
pub fn ref_loss_var(tape: &mut Tape, scores: Var, labels: &RefLabels) -> Var {
    cls_loss_var(tape, scores, labels.hot)
}

fn check_rows(m: &Mat) -> Result<()> {
    if m.rows == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    for r in 0..m.rows {
        if m.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm(r));
        }
    }
    Ok(())
}

/// `(1/N) Σ_i -ln softmax_j(cos(A_i, B_j)/τ)[i]` on the tape.
pub fn contrastive_directional_var(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    check_rows(tape.value(a))?;
    check_rows(tape.value(b))?;
    let n = tape.value(a).rows;
    assert_eq!(n, tape.value(b).rows, "batch size mismatch");
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let sim = tape.matmul_t(an, bn);
    let logits = tape.scale(sim, 1.0 / temperature);
    let logp = tape.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_mean(logp, &diag);
    Ok(tape.scale(picked, -1.0))
}

pub fn contrastive_directional(a: &Mat, b: &Mat, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = contrastive_directional_var(&mut tape, va, vb, temperature)?;
    Ok(tape.scalar(l))
}

/// Symmetrized contrastive loss over speech `s`, text `t` and object `o` batches.
pub fn contrastive_total_var(
    tape: &mut Tape,
    s: Var,
    t: Var,
    o: Var,
    temperature: f64,
    align: Alignment,
    mode: ContrastiveMode,
) -> Result<Var> {
    let mut terms: Vec<(usize, Var)> = Vec::new();
    let mut dir = |tape: &mut Tape, group: usize, x: Var, y: Var| -> Result<()> {
        terms.push((group, contrastive_directional_var(tape, x, y, temperature)?));
        Ok(())
    };
    if align.text_speech {
        dir(tape, 0, t, s)?;
        dir(tape, 1, s, t)?;
    }
    if align.speech_object {
        dir(tape, 2, s, o)?;
        dir(tape, 3, o, s)?;
    }
    if align.text_object {
        dir(tape, 2, t, o)?;
        dir(tape, 3, o, t)?;
    }
    if terms.is_empty() {
        return Ok(tape.constant(Mat::zeros(1, 1)));
    }
    let denom = match mode {
        ContrastiveMode::Six => terms.len(),
        ContrastiveMode::Four => {
            let mut groups: Vec<usize> = terms.iter().map(|&(g, _)| g).collect();
            groups.dedup();
            groups.len()
        }
    } as f64;
    let weighted: Vec<(f64, Var)> = terms.iter().map(|&(_, v)| (1.0 / denom, v)).collect();
    Ok(tape.weighted_sum(&weighted))
}

pub fn contrastive_total(s: &Mat, t: &Mat, o: &Mat, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (vs, vt, vo) = (tape.constant(s.clone()), tape.constant(t.clone()), tape.constant(o.clone()));
    let l = contrastive_total_var(&mut tape, vs, vt, vo, temperature, Alignment::ALL, ContrastiveMode::Six)?;
    Ok(tape.scalar(l))
}

/// `γ1 L_c + γ2 L_ref + γ3 L_cls` (no detection term).
pub fn total_loss(cls: f64, reference: f64, contrastive: f64, cfg: &LossConfig) -> f64 {
    cfg.gamma1 * contrastive + cfg.gamma2 * reference + cfg.gamma3 * cls
}
