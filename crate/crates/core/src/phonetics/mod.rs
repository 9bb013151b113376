//! Pronunciations, phonetic distance, transcription-error simulation and the
//! speech front ends (synthetic spectrograms and a real-audio mel path).

mod mel;
mod speech;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{self, WordKind};

pub use mel::{mel_filterbank, mel_spectrogram, hz_to_mel, mel_to_hz, HOP, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE, WINDOW};
pub use speech::{generate_templates, synth_spectrogram, PhonemeTemplates, TEMPLATE_MASTER_SEED};

/// ARPAbet without stress markers.
pub const INVENTORY: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY",
    "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y",
    "Z", "ZH",
];

pub const LEXICON_TSV: &str = include_str!("../../data/lexicon.tsv");
pub const CONFUSIONS_TSV: &str = include_str!("../../data/confusions.tsv");

/// Decay rate of confusion weights with phonetic distance.
pub const CONFUSION_LAMBDA: f64 = 4.0;
/// Largest phonetic distance still considered confusable.
pub const CONFUSION_MAX_DISTANCE: f64 = 2.0 / 3.0;

pub type Phoneme = u8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSeq(pub Vec<Phoneme>);

impl PhonemeSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> Vec<&'static str> {
        self.0.iter().map(|&p| INVENTORY[p as usize]).collect()
    }
}

pub fn phoneme_index(symbol: &str) -> Option<Phoneme> {
    INVENTORY.iter().position(|&s| s == symbol).map(|i| i as Phoneme)
}

fn parse_lexicon(text: &str) -> Result<BTreeMap<String, PhonemeSeq>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Asset(format!("lexicon.tsv line {}: {m}", i + 1));
        let (word, phones) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
        let seq = phones
            .split_whitespace()
            .map(|s| phoneme_index(s).ok_or_else(|| bad(format!("unknown phoneme {s}"))))
            .collect::<Result<Vec<_>>>()?;
        if seq.is_empty() {
            return Err(bad("empty pronunciation".into()));
        }
        out.insert(word.to_string(), PhonemeSeq(seq));
    }
    Ok(out)
}

fn lexicon() -> &'static BTreeMap<String, PhonemeSeq> {
    static LEX: OnceLock<BTreeMap<String, PhonemeSeq>> = OnceLock::new();
    LEX.get_or_init(|| parse_lexicon(LEXICON_TSV).expect("shipped lexicon parses"))
}

pub fn g2p(word: &str) -> Result<PhonemeSeq> {
    lexicon().get(word).cloned().ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
}

/// Concatenated pronunciation of a token sequence.
pub fn utterance_phonemes(tokens: &[String]) -> Result<PhonemeSeq> {
    let mut out = Vec::new();
    for t in tokens {
        out.extend(g2p(t)?.0);
    }
    Ok(PhonemeSeq(out))
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = up;
        }
    }
    row[b.len()]
}

/// Phoneme edit distance normalized by the longer pronunciation.
pub fn phonetic_distance(a: &str, b: &str) -> Result<f64> {
    let (pa, pb) = (g2p(a)?, g2p(b)?);
    Ok(levenshtein(&pa.0, &pb.0) as f64 / pa.len().max(pb.len()) as f64)
}

/// word → (confusable, weight) lists. Weights are unnormalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionTable {
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl ConfusionTable {
    /// The table shipped in `confusions.tsv`.
    pub fn shipped() -> &'static ConfusionTable {
        static TABLE: OnceLock<ConfusionTable> = OnceLock::new();
        TABLE.get_or_init(|| ConfusionTable::parse(CONFUSIONS_TSV).expect("shipped confusions parse"))
    }

    /// Every non-function word paired with every other non-function word within
    /// `max_distance`, weighted `exp(-lambda * d)`.
    pub fn from_lexicon(lambda: f64, max_distance: f64) -> Result<Self> {
        let content: Vec<&str> = vocab::words().filter(|w| vocab::kind(w) != Some(WordKind::Function)).collect();
        let mut entries = BTreeMap::new();
        for &w in &content {
            let mut list = Vec::new();
            for &v in &content {
                if v == w {
                    continue;
                }
                let d = phonetic_distance(w, v)?;
                if d <= max_distance + 1e-9 {
                    list.push((v.to_string(), (-lambda * d).exp()));
                }
            }
            if !list.is_empty() {
                entries.insert(w.to_string(), list);
            }
        }
        Ok(Self { entries })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<(String, f64)>)>) -> Self {
        Self { entries: entries.into_iter().collect() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Asset(format!("confusions.tsv line {}: {m}", i + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            let [word, confusable, weight] = cols[..] else { return Err(bad("expected 3 columns")) };
            let weight: f64 = weight.parse().map_err(|_| bad("bad weight"))?;
            if !(weight > 0.0) || vocab::word_id(confusable).is_none() || vocab::word_id(word).is_none() {
                return Err(bad("weight must be positive and words in vocabulary"));
            }
            entries.entry(word.to_string()).or_default().push((confusable.to_string(), weight));
        }
        Ok(Self { entries })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, list) in &self.entries {
            for (v, weight) in list {
                writeln!(out, "{w}\t{v}\t{weight:.17e}").expect("write to string");
            }
        }
        out
    }

    pub fn confusables(&self, word: &str) -> &[(String, f64)] {
        self.entries.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn contains_pair(&self, a: &str, b: &str) -> bool {
        self.confusables(a).iter().any(|(v, _)| v == b)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries.iter().flat_map(|(w, l)| l.iter().map(move |(v, x)| (w.as_str(), v.as_str(), *x)))
    }
}

/// Substitution-only error model: each token with confusables is replaced with
/// probability `error_rate` by a draw from its confusion weights.
pub fn corrupt_transcription(tokens: &[String], error_rate: f64, table: &ConfusionTable, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tokens
        .iter()
        .map(|t| {
            let options = table.confusables(t);
            if options.is_empty() || !(rng.gen::<f64>() < error_rate) {
                return t.clone();
            }
            let total: f64 = options.iter().map(|(_, w)| w).sum();
            let mut u = rng.gen::<f64>() * total;
            for (v, w) in options {
                if u < *w {
                    return v.clone();
                }
                u -= w;
            }
            options[options.len() - 1].0.clone()
        })
        .collect()
}
