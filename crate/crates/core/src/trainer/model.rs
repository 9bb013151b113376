//! The full grounder: parameters, per-utterance inputs and the batched forward pass.

use std::collections::HashMap;

use crate::config::TrainConfig;
use crate::encoders::{pool, SpeechEncoder, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::grounding::{cross_modal_match, fuse_logits, fuse_scores, FusionLevel, MatchParams, ProposalScores, ScoreHead};
use crate::losses::{cls_loss_var, contrastive_total_var, make_ref_labels, RefLabels};
use crate::nn::{Bound, ParamStore};
use crate::phonetics::{corrupt_transcription, synth_spectrogram, utterance_phonemes, ConfusionTable};
use crate::scenegen::{derive_seed, propose_boxes, sample_points, Box3D, Dataset, PointCloud, ProposalSet, Scene, SubsetTag, Utterance};
use crate::tensor::{softmax, Mat, Tape, Var};
use crate::vocab::{self, CLASSES};

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub speech: SpeechEncoder,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub match_text: MatchParams,
    pub match_speech: MatchParams,
    pub head_text: ScoreHead,
    pub head_speech: ScoreHead,
    pub dim: usize,
}

impl Model {
    /// Every module is allocated regardless of toggles, so checkpoints share one layout.
    pub fn new(cfg: &TrainConfig) -> Self {
        let (seed, dim, heads) = (cfg.seed, cfg.dim, cfg.heads);
        let mut store = ParamStore::new();
        let speech = SpeechEncoder::new(&mut store, seed, dim, heads, CLASSES.len());
        let text = TextEncoder::new(&mut store, seed, vocab::vocab_size(), dim, heads);
        let visual = VisualEncoder::new(&mut store, seed, dim);
        let match_text = MatchParams::new(&mut store, seed, "match", dim, heads);
        let match_speech =
            if cfg.shared_match { match_text } else { MatchParams::new(&mut store, seed, "match_speech", dim, heads) };
        let head_text = ScoreHead::new(&mut store, seed, "score.text", dim);
        let head_speech = ScoreHead::new(&mut store, seed, "score.speech", dim);
        Self { store, speech, text, visual, match_text, match_speech, head_text, head_speech, dim }
    }

    pub fn load(cfg: &TrainConfig, path: &std::path::Path) -> Result<Self> {
        let mut m = Self::new(cfg);
        crate::checkpoint::load(&mut m.store, path)?;
        Ok(m)
    }
}

/// Corruption and synthesis settings for one pass over the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditions {
    pub error_rate: f64,
    pub rate_scale: f64,
    pub noise_level: f64,
}

impl Conditions {
    pub const CLEAN: Conditions = Conditions { error_rate: 0.0, rate_scale: 1.0, noise_level: 0.0 };

    pub fn of(cfg: &TrainConfig) -> Self {
        Self { error_rate: cfg.error_rate, rate_scale: cfg.rate_scale, noise_level: cfg.noise_level }
    }
}

/// Everything the forward pass needs for one utterance.
#[derive(Clone, Debug)]
pub struct Sample {
    pub mel: Mat,
    pub token_ids: Vec<usize>,
    pub cloud: PointCloud,
    pub proposals: ProposalSet,
    pub gt: Box3D,
    pub labels: RefLabels,
    pub class_id: usize,
    pub subset_tag: SubsetTag,
}

pub fn scene_index(ds: &Dataset) -> HashMap<&str, &Scene> {
    ds.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect()
}

pub fn token_ids(tokens: &[String]) -> Result<Vec<usize>> {
    tokens.iter().map(|t| vocab::word_id(t).ok_or_else(|| Error::OutOfVocabulary(t.clone()))).collect()
}

/// Speech is synthesized from the spoken tokens; the text branch sees the
/// corrupted transcription. `variant` 0 is the fixed evaluation draw.
pub fn prepare(scene: &Scene, utt: &Utterance, cfg: &TrainConfig, cond: Conditions, variant: u64) -> Result<Sample> {
    let target = scene.object(utt.target_instance_id).ok_or(Error::UnknownTarget(utt.target_instance_id))?;
    if cfg.proposals < scene.objects.len() {
        return Err(Error::Config(format!(
            "proposals = {} is smaller than the {} objects in {}",
            cfg.proposals,
            scene.objects.len(),
            scene.scene_id
        )));
    }
    let base = utt.corruption_seed;
    let heard = corrupt_transcription(&utt.tokens, cond.error_rate, ConfusionTable::shipped(), base);
    let phonemes = utterance_phonemes(&utt.tokens)?;
    let mel = synth_spectrogram(&phonemes, cond.rate_scale, cond.noise_level, derive_seed(base, "speech", variant)).bins;
    let cloud = sample_points(scene, cfg.points, derive_seed(base, "points", variant));
    let proposals = propose_boxes(
        scene,
        utt.target_instance_id,
        cfg.proposals,
        cfg.proposal_jitter,
        derive_seed(base, "proposals", variant),
    )?;
    let labels = make_ref_labels(&proposals, &target.bbox);
    Ok(Sample {
        mel,
        token_ids: token_ids(&heard)?,
        cloud,
        proposals,
        gt: target.bbox,
        labels,
        class_id: target.class_id,
        subset_tag: utt.subset_tag,
    })
}

pub fn prepare_all(ds: &Dataset, cfg: &TrainConfig, cond: Conditions, variant: u64) -> Result<Vec<Sample>> {
    let index = scene_index(ds);
    ds.utterances
        .iter()
        .map(|u| {
            let scene = index.get(u.scene_id.as_str()).ok_or_else(|| Error::Config(format!("unknown scene `{}`", u.scene_id)))?;
            prepare(scene, u, cfg, cond, variant)
        })
        .collect()
}

/// Tape nodes of one sample.
pub struct SampleNodes {
    /// `F_s`, present when speech is consumed.
    pub f_s: Option<Var>,
    pub sentence: Var,
    pub object: Var,
    pub text_logits: Var,
    pub speech_logits: Option<Var>,
    pub cls: Option<Var>,
    pub ref_text: Var,
    pub ref_speech: Option<Var>,
}

/// Unweighted loss components (batch means) and the nodes they came from.
pub struct BatchNodes {
    pub samples: Vec<SampleNodes>,
    pub contrastive: Option<Var>,
    pub reference: Var,
    pub cls: Option<Var>,
}

/// Loss weights after toggles and calibration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Gammas {
    pub contrastive: f64,
    pub reference: f64,
    pub cls: f64,
}

impl Gammas {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            contrastive: if cfg.ccm && !cfg.align.is_empty() { cfg.loss.gamma1 } else { 0.0 },
            reference: cfg.loss.gamma2,
            cls: if cfg.sll { cfg.loss.gamma3 } else { 0.0 },
        }
    }
}

impl Model {
    /// Speech sequence fed to matching (`W_s'`, or `W_s` without refinement) and its pooled vector.
    pub fn speech_sequence(&self, tape: &mut Tape, p: &Bound, mel: &Mat, cfg: &TrainConfig) -> (Var, Var) {
        let w_s = self.speech.frontend(tape, p, mel);
        let seq = if cfg.sll { self.speech.refine(tape, p, w_s) } else { w_s };
        let f_s = pool(tape, seq);
        (seq, f_s)
    }

    pub fn forward_sample(&self, tape: &mut Tape, p: &Bound, s: &Sample, cfg: &TrainConfig) -> SampleNodes {
        let m = s.proposals.len();
        let speech = cfg.speech_active().then(|| self.speech_sequence(tape, p, &s.mel, cfg));
        let cls = match (cfg.sll, speech) {
            (true, Some((_, f_s))) => {
                let probs = self.speech.classify(tape, p, f_s);
                Some(cls_loss_var(tape, probs, s.class_id))
            }
            _ => None,
        };
        let (tokens, sentence) = self.text.encode(tape, p, &s.token_ids);
        let mut boxes = s.proposals.boxes.clone();
        boxes.push(s.gt);
        let feats = self.visual.encode(tape, p, &s.cloud, &boxes);
        let props = tape.gather_rows(feats, &(0..m).collect::<Vec<_>>());
        let object = tape.gather_rows(feats, &[m]);

        let fused_t = cross_modal_match(tape, p, &self.match_text, props, tokens);
        let text_logits = self.head_text.logits(tape, p, fused_t);
        let st = tape.softmax_rows(text_logits);
        let ref_text = cls_loss_var(tape, st, s.labels.hot);

        let (speech_logits, ref_speech) = match (cfg.cbm, speech) {
            (true, Some((seq, _))) => {
                let fused_s = cross_modal_match(tape, p, &self.match_speech, props, seq);
                let z = self.head_speech.logits(tape, p, fused_s);
                let ss = tape.softmax_rows(z);
                (Some(z), Some(cls_loss_var(tape, ss, s.labels.hot)))
            }
            _ => (None, None),
        };
        SampleNodes { f_s: speech.map(|x| x.1), sentence, object, text_logits, speech_logits, cls, ref_text, ref_speech }
    }

    pub fn forward_batch(&self, tape: &mut Tape, p: &Bound, batch: &[&Sample], cfg: &TrainConfig) -> Result<BatchNodes> {
        assert!(!batch.is_empty(), "empty batch");
        let n = batch.len() as f64;
        let samples: Vec<SampleNodes> = batch.iter().map(|s| self.forward_sample(tape, p, s, cfg)).collect();
        let mut refs = Vec::new();
        for s in &samples {
            refs.push((cfg.loss.alpha2 / n, s.ref_text));
            if let Some(r) = s.ref_speech {
                refs.push((cfg.loss.alpha1 / n, r));
            }
        }
        let reference = tape.weighted_sum(&refs);
        let cls_terms: Vec<(f64, Var)> = samples.iter().filter_map(|s| s.cls.map(|c| (1.0 / n, c))).collect();
        let cls = (!cls_terms.is_empty()).then(|| tape.weighted_sum(&cls_terms));
        let contrastive = if Gammas::of(cfg).contrastive != 0.0 {
            let t_rows: Vec<Var> = samples.iter().map(|s| s.sentence).collect();
            let o_rows: Vec<Var> = samples.iter().map(|s| s.object).collect();
            let t = tape.concat_rows(&t_rows);
            let o = tape.concat_rows(&o_rows);
            // without speech the speech rows are never read
            let s = match samples.iter().map(|s| s.f_s).collect::<Option<Vec<Var>>>() {
                Some(rows) => tape.concat_rows(&rows),
                None => t,
            };
            Some(contrastive_total_var(tape, s, t, o, cfg.loss.temperature, cfg.align, cfg.loss.contrastive_mode)?)
        } else {
            None
        };
        Ok(BatchNodes { samples, contrastive, reference, cls })
    }

    /// `γ1 L_c + γ2 L_ref + γ3 L_cls` on the tape.
    pub fn total(&self, tape: &mut Tape, nodes: &BatchNodes, g: &Gammas) -> Var {
        let mut terms = vec![(g.reference, nodes.reference)];
        if let Some(c) = nodes.contrastive {
            terms.push((g.contrastive, c));
        }
        if let Some(c) = nodes.cls {
            terms.push((g.cls, c));
        }
        tape.weighted_sum(&terms)
    }

    /// Branch and fused proposal scores for one sample at fusion weight `beta`.
    pub fn score(&self, s: &Sample, cfg: &TrainConfig, beta: f64) -> Result<ProposalScores> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let nodes = self.forward_sample(&mut tape, &p, s, cfg);
        let zt = tape.value(nodes.text_logits).data.clone();
        let m = zt.len();
        let text = softmax(&zt);
        let (zs, speech) = match nodes.speech_logits {
            Some(z) => {
                let z = tape.value(z).data.clone();
                let sp = softmax(&z);
                (z, sp)
            }
            None => (vec![0.0; m], vec![1.0 / m as f64; m]),
        };
        let fused = match cfg.fusion {
            FusionLevel::Probability => fuse_scores(&speech, &text, beta)?,
            FusionLevel::Logit => fuse_logits(&zs, &zt, beta)?,
        };
        Ok(ProposalScores { speech, text, fused })
    }

    /// Pooled speech feature `F_s` for a token sequence.
    pub fn speech_feature(&self, tokens: &[String], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
        let mel = synth_spectrogram(&utterance_phonemes(tokens)?, cfg.rate_scale, cfg.noise_level, seed).bins;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (_, f_s) = self.speech_sequence(&mut tape, &p, &mel, cfg);
        Ok(tape.value(f_s).data.clone())
    }
}
