//! Deterministic training, evaluation, gradient checking and ablation sweeps.

mod ablate;
mod gradcheck;
mod model;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, ablate_with_threads, thread_count, AblationRow, AblationTable, Sweep, BETA_GRID};
pub use gradcheck::{grad_check, quadratic_probe, GradGroup, GradReport};
pub use model::{prepare, prepare_all, scene_index, token_ids, Conditions, Gammas, Model, Sample};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{breakdown, match_rate, Breakdown, EvalRecord};
use crate::grounding::{argmax, check_beta};
use crate::nn::Adam;
use crate::scenegen::{derive_seed, Dataset};
use crate::tensor::Tape;
use crate::vocab::{ATTRIBUTES, CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub contrastive: f64,
    pub reference: f64,
    pub cls: f64,
    pub gammas: Gammas,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<Breakdown>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    checkpoint: String,
}

impl RunLog {
    /// One JSON object per epoch, then the checkpoint reference if set.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e).expect("serializable")).expect("write to string");
        }
        if let Some(c) = &self.checkpoint {
            let rec = CheckpointRecord { checkpoint: c.clone() };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable")).expect("write to string");
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut log = RunLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| Error::Parse { path: "runlog".into(), line: i + 1, message: e.to_string() };
            if line.contains("\"checkpoint\"") {
                log.checkpoint = Some(serde_json::from_str::<CheckpointRecord>(line).map_err(bad)?.checkpoint);
            } else {
                log.epochs.push(serde_json::from_str(line).map_err(bad)?);
            }
        }
        Ok(log)
    }
}

/// Trains from scratch. `val` is scored every `val_every` epochs and after the last one.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val: Option<&Dataset>) -> Result<(Model, RunLog)> {
    cfg.validate()?;
    if train_set.utterances.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = Model::new(cfg);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", 0));
    let mut gammas = Gammas::of(cfg);
    let mut log = RunLog::default();
    let index = scene_index(train_set);
    let mut fixed: Option<Vec<Sample>> = None;
    let ids: Vec<_> = model.store.ids().collect();
    for epoch in 0..cfg.epochs {
        let cond = if epoch < cfg.clean_epochs { Conditions::CLEAN } else { Conditions::of(cfg) };
        let variant = if cfg.augment { epoch as u64 + 1 } else { 0 };
        // without augmentation the inputs only change at the clean/noisy boundary
        let samples = match (&fixed, cfg.augment || epoch == cfg.clean_epochs) {
            (Some(s), false) => s.clone(),
            _ => {
                let s: Vec<Sample> = train_set
                    .utterances
                    .iter()
                    .map(|u| {
                        let scene = index.get(u.scene_id.as_str()).ok_or_else(|| Error::Config(format!("unknown scene `{}`", u.scene_id)))?;
                        prepare(scene, u, cfg, cond, variant)
                    })
                    .collect::<Result<_>>()?;
                if !cfg.augment {
                    fixed = Some(s.clone());
                }
                s
            }
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let nodes = model.forward_batch(&mut tape, &p, &batch, cfg)?;
            let parts = [
                nodes.contrastive.map_or(0.0, |v| tape.scalar(v)),
                tape.scalar(nodes.reference),
                nodes.cls.map_or(0.0, |v| tape.scalar(v)),
            ];
            if cfg.gamma_calibration && epoch == 0 && b == 0 {
                gammas = calibrate(gammas, parts);
            }
            let total = model.total(&mut tape, &nodes, &gammas);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = tape.backward(total);
            let g: Vec<_> = ids.iter().map(|&id| grads.get_or_zeros(p.var(id), model.store.get(id).shape())).collect();
            adam.update(&mut model.store, &g);
            let w = batch.len() as f64;
            sums[0] += w * loss;
            for k in 0..3 {
                sums[k + 1] += w * parts[k];
            }
        }
        let n = samples.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0;
        let val_table = match val {
            Some(v) if last || due => Some(evaluate(&model, cfg, v, cfg.effective_beta())?.breakdown),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            total: sums[0] / n,
            contrastive: sums[1] / n,
            reference: sums[2] / n,
            cls: sums[3] / n,
            gammas,
            val: val_table,
        });
    }
    Ok((model, log))
}

/// Scales the contrastive and classification weights so each weighted term
/// starts at the weighted reference loss.
fn calibrate(g: Gammas, parts: [f64; 3]) -> Gammas {
    let target = g.reference * parts[1];
    let scale = |gamma: f64, value: f64| if gamma != 0.0 && value > 0.0 { target / value } else { gamma };
    Gammas { contrastive: scale(g.contrastive, parts[0]), reference: g.reference, cls: scale(g.cls, parts[2]) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub breakdown: Breakdown,
    pub records: Vec<EvalRecord>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    /// Percentage of utterances whose chosen proposal is the labeled one.
    pub fn match_rate(&self) -> f64 {
        match_rate(&self.predicted, &self.labels).expect("nonempty evaluation")
    }
}

/// Scores every utterance of `ds` at fusion weight `beta` (ignored without the speech branch).
pub fn evaluate(model: &Model, cfg: &TrainConfig, ds: &Dataset, beta: f64) -> Result<Evaluation> {
    check_beta(beta)?;
    if model.dim != cfg.dim {
        return Err(Error::Config(format!("model width {} does not match config dim {}", model.dim, cfg.dim)));
    }
    if ds.utterances.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let beta = if cfg.cbm { beta } else { 0.0 };
    let samples = prepare_all(ds, cfg, Conditions::of(cfg), 0)?;
    evaluate_samples(model, cfg, &samples, beta)
}

pub fn evaluate_samples(model: &Model, cfg: &TrainConfig, samples: &[Sample], beta: f64) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let scores = model.score(s, cfg, beta)?;
        let i = argmax(&scores.fused);
        records.push(EvalRecord { predicted: s.proposals.boxes[i], ground_truth: s.gt, subset_tag: s.subset_tag });
        predicted.push(i);
        labels.push(s.labels.hot);
    }
    Ok(Evaluation { breakdown: breakdown(&records)?, records, predicted, labels })
}

/// Mean pairwise `F_s` cosine for confusion-pair variants and for random cross-class pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhoneticSimilarity {
    pub confusion: f64,
    pub cross_class: f64,
}

pub const CONFUSION_PAIRS: [(&str, &str); 3] = [("grey", "grain"), ("white", "wide"), ("bed", "bat")];

pub fn phonetic_similarity(model: &Model, cfg: &TrainConfig, pairs_per_kind: usize, seed: u64) -> Result<PhoneticSimilarity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrase = |attr: &str, class: &str| -> Vec<String> { ["the", attr, class].iter().map(|s| s.to_string()).collect() };
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut conf = Vec::new();
    let mut cross = Vec::new();
    for _ in 0..pairs_per_kind {
        for (a, b) in CONFUSION_PAIRS {
            let (ua, ub) = if crate::vocab::class_id(a).is_some() {
                let attr = ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())];
                (phrase(attr, a), phrase(attr, b))
            } else {
                let class = CLASSES[rng.gen_range(0..CLASSES.len())];
                (phrase(a, class), phrase(b, class))
            };
            let fa = model.speech_feature(&ua, cfg, rng.gen())?;
            let fb = model.speech_feature(&ub, cfg, rng.gen())?;
            conf.push(cos(&fa, &fb));
        }
        let ca = rng.gen_range(0..CLASSES.len());
        let cb = (ca + rng.gen_range(1..CLASSES.len())) % CLASSES.len();
        let ua = phrase(ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())], CLASSES[ca]);
        let ub = phrase(ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())], CLASSES[cb]);
        cross.push(cos(&model.speech_feature(&ua, cfg, rng.gen())?, &model.speech_feature(&ub, cfg, rng.gen())?));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(PhoneticSimilarity { confusion: mean(&conf), cross_class: mean(&cross) })
}

pub fn save_run(dir: &Path, model: &Model, log: &mut RunLog) -> Result<()> {
    let name = "model.ckpt";
    crate::checkpoint::save(&model.store, &dir.join(name))?;
    log.checkpoint = Some(name.into());
    std::fs::write(dir.join("runlog.jsonl"), log.to_jsonl())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, GenConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { dim: 16, heads: 2, points: 256, epochs: 2, batch_size: 4, val_every: 1, ..TrainConfig::default() }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        generate_dataset(seed, n, 2, &GenConfig::default(), "t").unwrap()
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (ds, val) = (data(4, 1), data(2, 2));
        let cfg = tiny_cfg();
        let (m1, l1) = train(&cfg, &ds, Some(&val)).unwrap();
        let (m2, l2) = train(&cfg, &ds, Some(&val)).unwrap();
        assert_eq!(l1.to_jsonl(), l2.to_jsonl());
        assert_eq!(crate::checkpoint::encode(&m1.store), crate::checkpoint::encode(&m2.store));
        assert_eq!(RunLog::parse_jsonl(&l1.to_jsonl()).unwrap(), l1);
        assert_eq!(l1.epochs.len(), 2);
        assert!(l1.epochs.iter().all(|e| e.val.is_some()));
    }

    #[test]
    fn ccm_off_reports_zero_contrastive() {
        let cfg = TrainConfig { ccm: false, ..tiny_cfg() };
        let (_, log) = train(&cfg, &data(3, 3), None).unwrap();
        assert!(log.epochs.iter().all(|e| e.contrastive == 0.0));
    }

    #[test]
    fn evaluation_contracts() {
        let cfg = tiny_cfg();
        let ds = data(2, 4);
        let model = Model::new(&cfg);
        let a = evaluate(&model, &cfg, &ds, 0.5).unwrap();
        assert_eq!(a, evaluate(&model, &cfg, &ds, 0.5).unwrap());
        assert_eq!(a.breakdown.rows.iter().filter(|r| r.subset == "overall").count(), 2);
        assert!(matches!(evaluate(&model, &cfg, &Dataset::default(), 0.5), Err(Error::Empty(_))));
        assert!(evaluate(&model, &cfg, &ds, 1.5).is_err());
        let wide = TrainConfig { dim: 32, ..cfg };
        assert!(evaluate(&model, &wide, &ds, 0.5).is_err());
    }

    #[test]
    fn cbm_off_selects_like_text_only() {
        let ds = data(3, 5);
        let text_only = TrainConfig { dim: 16, heads: 2, points: 256, epochs: 2, batch_size: 4, ..TrainConfig::text_only() };
        let with_sll = TrainConfig { sll: true, ..text_only.clone() };
        let (a, _) = train(&text_only, &ds, None).unwrap();
        let (b, _) = train(&with_sll, &ds, None).unwrap();
        let ea = evaluate(&a, &text_only, &ds, 0.5).unwrap();
        let eb = evaluate(&b, &with_sll, &ds, 0.5).unwrap();
        assert_eq!(ea.predicted, eb.predicted);
    }

    #[test]
    fn calibration_equalizes_terms() {
        let g = calibrate(Gammas { contrastive: 1.0, reference: 1.0, cls: 1.0 }, [0.1, 4.0, 2.0]);
        assert!((g.contrastive * 0.1 - 4.0).abs() < 1e-12);
        assert!((g.cls * 2.0 - 4.0).abs() < 1e-12);
        let off = calibrate(Gammas { contrastive: 0.0, reference: 1.0, cls: 1.0 }, [0.0, 4.0, 2.0]);
        assert_eq!(off.contrastive, 0.0);
    }
}
