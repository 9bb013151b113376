//! Flat `key = value` run configuration. Every key has a default; unknown keys
//! are rejected by name.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grounding::FusionLevel;
use crate::losses::{Alignment, ContrastiveMode, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub gamma_calibration: bool,
    pub sll: bool,
    pub cbm: bool,
    pub ccm: bool,
    pub align: Alignment,
    pub error_rate: f64,
    pub rate_scale: f64,
    pub noise_level: f64,
    pub clean_epochs: usize,
    pub augment: bool,
    pub dim: usize,
    pub heads: usize,
    pub proposals: usize,
    pub points: usize,
    pub proposal_jitter: f64,
    pub shared_match: bool,
    pub fusion: FusionLevel,
    pub val_every: usize,
    pub scenes: usize,
    pub val_scenes: usize,
    pub utterances_per_scene: usize,
    pub gradcheck_entries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            loss: LossConfig::default(),
            gamma_calibration: false,
            sll: true,
            cbm: true,
            ccm: true,
            align: Alignment::ALL,
            error_rate: 0.3,
            rate_scale: 1.0,
            noise_level: 0.5,
            clean_epochs: 0,
            augment: true,
            dim: 64,
            heads: 4,
            proposals: 16,
            points: 256,
            proposal_jitter: 0.15,
            shared_match: true,
            fusion: FusionLevel::Probability,
            val_every: 5,
            scenes: 400,
            val_scenes: 100,
            utterances_per_scene: 6,
            gradcheck_entries: 16,
        }
    }
}

/// `(key, description)` in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for init, shuffling and data variants"),
    ("epochs", "passes over the training split"),
    ("batch_size", "utterances per optimizer step"),
    ("lr", "Adam step size"),
    ("alpha1", "weight of the speech reference loss"),
    ("alpha2", "weight of the text reference loss"),
    ("beta", "speech weight in score fusion, in [0, 1]"),
    ("gamma1", "weight of the contrastive loss"),
    ("gamma2", "weight of the reference loss"),
    ("gamma3", "weight of the speech classification loss"),
    ("temperature", "contrastive temperature, > 0"),
    ("contrastive_mode", "six | four: average over directional terms or grouped terms"),
    ("gamma_calibration", "rescale gammas so all terms start at the reference loss magnitude"),
    ("sll", "speech learnable layers (refinement + class head)"),
    ("cbm", "speech score branch and beta fusion"),
    ("ccm", "contrastive alignment"),
    ("align_text_object", "align text and object features"),
    ("align_speech_object", "align speech and object features"),
    ("align_text_speech", "align text and speech features"),
    ("error_rate", "per-token transcription substitution probability"),
    ("rate_scale", "speech rate multiplier, in [0.5, 2]"),
    ("noise_level", "std of additive log-mel noise"),
    ("clean_epochs", "leading epochs trained with noise 0, rate 1 and no transcription errors"),
    ("augment", "redraw spectrogram noise, points and proposals every epoch"),
    ("dim", "feature width of every encoder"),
    ("heads", "attention heads, must divide dim"),
    ("proposals", "candidate boxes per utterance"),
    ("points", "points sampled per scene"),
    ("proposal_jitter", "max per-axis jitter of proposal boxes (m)"),
    ("shared_match", "one matching network for both branches"),
    ("fusion", "probability | logit"),
    ("val_every", "validate every n epochs (0: final epoch only)"),
    ("scenes", "training scenes written by gen-data"),
    ("val_scenes", "validation scenes written by gen-data"),
    ("utterances_per_scene", "utterances per generated scene"),
    ("gradcheck_entries", "entries checked per tensor by gradcheck (0: all)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "alpha1" => self.loss.alpha1 = parse(key, v)?,
            "alpha2" => self.loss.alpha2 = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "gamma1" => self.loss.gamma1 = parse(key, v)?,
            "gamma2" => self.loss.gamma2 = parse(key, v)?,
            "gamma3" => self.loss.gamma3 = parse(key, v)?,
            "temperature" => self.loss.temperature = parse(key, v)?,
            "contrastive_mode" => {
                self.loss.contrastive_mode = match v {
                    "six" => ContrastiveMode::Six,
                    "four" => ContrastiveMode::Four,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for key `{key}`"))),
                }
            }
            "gamma_calibration" => self.gamma_calibration = parse(key, v)?,
            "sll" => self.sll = parse(key, v)?,
            "cbm" => self.cbm = parse(key, v)?,
            "ccm" => self.ccm = parse(key, v)?,
            "align_text_object" => self.align.text_object = parse(key, v)?,
            "align_speech_object" => self.align.speech_object = parse(key, v)?,
            "align_text_speech" => self.align.text_speech = parse(key, v)?,
            "error_rate" => self.error_rate = parse(key, v)?,
            "rate_scale" => self.rate_scale = parse(key, v)?,
            "noise_level" => self.noise_level = parse(key, v)?,
            "clean_epochs" => self.clean_epochs = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "proposals" => self.proposals = parse(key, v)?,
            "points" => self.points = parse(key, v)?,
            "proposal_jitter" => self.proposal_jitter = parse(key, v)?,
            "shared_match" => self.shared_match = parse(key, v)?,
            "fusion" => {
                self.fusion = match v {
                    "probability" => FusionLevel::Probability,
                    "logit" => FusionLevel::Logit,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for key `{key}`"))),
                }
            }
            "val_every" => self.val_every = parse(key, v)?,
            "scenes" => self.scenes = parse(key, v)?,
            "val_scenes" => self.val_scenes = parse(key, v)?,
            "utterances_per_scene" => self.utterances_per_scene = parse(key, v)?,
            "gradcheck_entries" => self.gradcheck_entries = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "alpha1" => self.loss.alpha1.to_string(),
            "alpha2" => self.loss.alpha2.to_string(),
            "beta" => self.loss.beta.to_string(),
            "gamma1" => self.loss.gamma1.to_string(),
            "gamma2" => self.loss.gamma2.to_string(),
            "gamma3" => self.loss.gamma3.to_string(),
            "temperature" => self.loss.temperature.to_string(),
            "contrastive_mode" => match self.loss.contrastive_mode {
                ContrastiveMode::Six => "six".into(),
                ContrastiveMode::Four => "four".into(),
            },
            "gamma_calibration" => self.gamma_calibration.to_string(),
            "sll" => self.sll.to_string(),
            "cbm" => self.cbm.to_string(),
            "ccm" => self.ccm.to_string(),
            "align_text_object" => self.align.text_object.to_string(),
            "align_speech_object" => self.align.speech_object.to_string(),
            "align_text_speech" => self.align.text_speech.to_string(),
            "error_rate" => self.error_rate.to_string(),
            "rate_scale" => self.rate_scale.to_string(),
            "noise_level" => self.noise_level.to_string(),
            "clean_epochs" => self.clean_epochs.to_string(),
            "augment" => self.augment.to_string(),
            "dim" => self.dim.to_string(),
            "heads" => self.heads.to_string(),
            "proposals" => self.proposals.to_string(),
            "points" => self.points.to_string(),
            "proposal_jitter" => self.proposal_jitter.to_string(),
            "shared_match" => self.shared_match.to_string(),
            "fusion" => match self.fusion {
                FusionLevel::Probability => "probability".into(),
                FusionLevel::Logit => "logit".into(),
            },
            "val_every" => self.val_every.to_string(),
            "scenes" => self.scenes.to_string(),
            "val_scenes" => self.val_scenes.to_string(),
            "utterances_per_scene" => self.utterances_per_scene.to_string(),
            "gradcheck_entries" => self.gradcheck_entries.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its description; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let v = self.get(k).expect("listed key");
            writeln!(out, "# {doc}\n{k} = {v}").expect("write to string");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return bad("error_rate must be in [0, 1]");
        }
        if !(0.5..=2.0).contains(&self.rate_scale) {
            return bad("rate_scale must be in [0.5, 2]");
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise_level must be >= 0");
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads must divide dim");
        }
        if self.proposals == 0 || self.points == 0 {
            return bad("proposals and points must be >= 1");
        }
        if self.cbm && !self.speech_active() {
            return bad("cbm requires the speech branch");
        }
        Ok(())
    }

    /// Whether any path consumes speech.
    pub fn speech_active(&self) -> bool {
        self.sll || self.cbm || (self.ccm && (self.align.speech_object || self.align.text_speech))
    }

    /// Fusion weight actually used; 0 when the speech score branch is off.
    pub fn effective_beta(&self) -> f64 {
        if self.cbm {
            self.loss.beta
        } else {
            0.0
        }
    }

    pub fn text_only() -> Self {
        Self { sll: false, cbm: false, ccm: false, ..Self::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("beta", "0.2").unwrap();
        cfg.set("fusion", "logit").unwrap();
        cfg.set("lr", "0.0003").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = TrainConfig::default();
        for (k, _) in KEYS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(TrainConfig::parse("beta = 2").is_err());
        assert!(TrainConfig::parse("heads = 5").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# hello\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn toggles() {
        assert_eq!(TrainConfig::text_only().effective_beta(), 0.0);
        assert!(!TrainConfig::text_only().speech_active());
        assert_eq!(TrainConfig::default().effective_beta(), 0.5);
    }
}
