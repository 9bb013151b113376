//! Learnable feature extractors for speech, text and proposals.
//!
//! Each encoder owns [`ParamId`]s into a shared [`ParamStore`] and runs on a
//! [`Tape`] so the same code serves training, inference and gradient checks.

use crate::nn::{sinusoidal_positions, Bound, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::phonetics::N_MELS;
use crate::scenegen::{Box3D, PointCloud};
use crate::tensor::{softmax, Mat, Tape, Var};

/// Consecutive mel frames concatenated per speech step.
pub const FRAME_STACK: usize = 4;
/// Per-point input: xyz relative to the box center, then pseudo-color.
pub const POINT_INPUT: usize = 6;

/// Speech frames `N_s × D_s` (before or after refinement).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFeatures {
    pub frames: Mat,
}

/// Max-pooled speech vector and its `M`-fold stack.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSpeechFeature {
    pub vector: Vec<f64>,
    pub stacked: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub token_feats: Mat,
    pub sentence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub proposal_feats: Mat,
    pub object_anchor: Vec<f64>,
}

/// Groups of four mel frames flattened to `ceil(L/4) × 320`; the last group is
/// padded by repeating the final frame.
pub fn stack_frames(mel: &Mat) -> Mat {
    assert_eq!(mel.rows, N_MELS, "mel must have 80 rows");
    assert!(mel.cols > 0, "empty spectrogram");
    let steps = mel.cols.div_ceil(FRAME_STACK);
    let mut out = Mat::zeros(steps, FRAME_STACK * N_MELS);
    for s in 0..steps {
        let row = out.row_mut(s);
        for j in 0..FRAME_STACK {
            let t = (s * FRAME_STACK + j).min(mel.cols - 1);
            for ch in 0..N_MELS {
                row[j * N_MELS + ch] = mel.get(ch, t);
            }
        }
    }
    out
}

/// Frame-stacking front end, phonetic-aware refinement and the class head.
#[derive(Clone, Copy, Debug)]
pub struct SpeechEncoder {
    pub frontend: Linear,
    pub refine_proj: Linear,
    pub refine_attn: MultiHeadAttention,
    pub classifier: Linear,
    pub dim: usize,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, dim: usize, heads: usize, classes: usize) -> Self {
        Self {
            frontend: Linear::new(store, seed, "speech.frontend", FRAME_STACK * N_MELS, dim),
            refine_proj: Linear::new(store, seed, "speech.refine.proj", dim, dim),
            refine_attn: MultiHeadAttention::new(store, seed, "speech.refine.attn", dim, heads),
            classifier: Linear::new(store, seed, "speech.classifier", dim, classes),
            dim,
        }
    }

    /// `W_s`: stacked frames through a linear map.
    pub fn frontend(&self, tape: &mut Tape, p: &Bound, mel: &Mat) -> Var {
        let x = tape.constant(stack_frames(mel));
        self.frontend.forward(tape, p, x)
    }

    /// `W_s' = SelfAttention(Linear(W_s))` with sinusoidal positions added to
    /// the projection and a residual around the attention.
    pub fn refine(&self, tape: &mut Tape, p: &Bound, w_s: Var) -> Var {
        let steps = tape.value(w_s).rows;
        let h = self.refine_proj.forward(tape, p, w_s);
        let pos = tape.constant(sinusoidal_positions(steps, self.dim));
        let h = tape.add(h, pos);
        let a = self.refine_attn.forward(tape, p, h, h);
        tape.add(h, a)
    }

    /// Class probabilities from the pooled speech vector.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, f_s: Var) -> Var {
        let logits = self.classifier.forward(tape, p, f_s);
        tape.softmax_rows(logits)
    }
}

/// `F_s`: column-wise max over frames.
pub fn pool(tape: &mut Tape, frames: Var) -> Var {
    tape.col_max(frames)
}

/// Value-level pooling and `M`-fold stacking.
pub fn pool_and_stack(frames: &Mat, m: usize) -> GlobalSpeechFeature {
    assert!(m >= 1 && frames.rows >= 1);
    let vector: Vec<f64> = (0..frames.cols)
        .map(|c| (0..frames.rows).map(|r| frames.get(r, c)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let stacked = Mat::from_vec(m, vector.len(), vector.iter().copied().cycle().take(m * vector.len()).collect());
    GlobalSpeechFeature { vector, stacked }
}

/// Value-level class head: `softmax(F_s W + b)`.
pub fn classify_speech(f_s: &[f64], weight: &Mat, bias: &[f64]) -> ClassScores {
    let logits: Vec<f64> = (0..weight.cols)
        .map(|c| bias[c] + f_s.iter().enumerate().map(|(r, x)| x * weight.get(r, c)).sum::<f64>())
        .collect();
    ClassScores { probs: softmax(&logits) }
}

/// Word embeddings + positions + one residual self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub attn: MultiHeadAttention,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, vocab: usize, dim: usize, heads: usize) -> Self {
        let name = "text.embedding";
        let table = crate::nn::gaussian(vocab, dim, 0.5, &mut crate::nn::param_rng(seed, name));
        Self {
            embedding: store.add(name, table),
            attn: MultiHeadAttention::new(store, seed, "text.attn", dim, heads),
            dim,
        }
    }

    /// Returns `(token features L_t×D, sentence feature 1×D)`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, token_ids: &[usize]) -> (Var, Var) {
        assert!(!token_ids.is_empty(), "empty token sequence");
        let e = tape.gather_rows(p.var(self.embedding), token_ids);
        let pos = tape.constant(sinusoidal_positions(token_ids.len(), self.dim));
        let h = tape.add(e, pos);
        let a = self.attn.forward(tape, p, h, h);
        let tokens = tape.add(h, a);
        let sentence = tape.mean_rows(tokens);
        (tokens, sentence)
    }
}

/// Per-point linear + tanh, max-pooled inside each box.
#[derive(Clone, Copy, Debug)]
pub struct VisualEncoder {
    pub point: Linear,
    pub empty: ParamId,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, dim: usize) -> Self {
        let name = "visual.empty";
        let empty = crate::nn::gaussian(1, dim, 0.1, &mut crate::nn::param_rng(seed, name));
        Self { point: Linear::new(store, seed, "visual.point", POINT_INPUT, dim), empty: store.add(name, empty) }
    }

    /// One feature row per box. Boxes containing no points get the learned
    /// empty embedding.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, cloud: &PointCloud, boxes: &[Box3D]) -> Var {
        let (input, segments) = gather_box_points(cloud, boxes);
        if input.rows == 0 {
            let e = p.var(self.empty);
            return tape.repeat_rows(e, boxes.len());
        }
        let x = tape.constant(input);
        let h = self.point.forward(tape, p, x);
        let h = tape.tanh(h);
        tape.segment_max(h, &segments, p.var(self.empty))
    }
}

/// Stacks the points inside each box (box-local coordinates + color) and
/// returns the row segments per box.
pub fn gather_box_points(cloud: &PointCloud, boxes: &[Box3D]) -> (Mat, Vec<Vec<usize>>) {
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(boxes.len());
    let mut next = 0;
    for b in boxes {
        let mut seg = Vec::new();
        for r in 0..cloud.len() {
            let pt = cloud.points.row(r);
            if b.contains(pt) {
                for i in 0..3 {
                    data.push(pt[i] - b.center[i]);
                }
                data.extend_from_slice(&pt[3..6]);
                seg.push(next);
                next += 1;
            }
        }
        segments.push(seg);
    }
    (Mat::from_vec(next, POINT_INPUT, data), segments)
}
