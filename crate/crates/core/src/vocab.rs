//! The closed word inventory shared by scene generation, phonetics and the
//! text encoder.

/// Object classes, indexed by `class_id`.
pub const CLASSES: [&str; 8] = ["chair", "table", "bed", "sofa", "desk", "lamp", "shelf", "door"];

/// Color attributes, indexed by `attribute_id`.
pub const ATTRIBUTES: [&str; 6] = ["grey", "white", "brown", "black", "red", "blue"];

/// Relation and function words. Never substituted by the error model.
pub const FUNCTION_WORDS: [&str; 12] =
    ["the", "a", "there", "is", "of", "to", "next", "near", "beside", "close", "on", "office"];

/// Words that only ever appear as transcription errors.
pub const CONFUSABLES: [&str; 17] = [
    "grain", "wide", "bat", "brain", "bread", "cable", "soda", "disk", "lamb", "self", "more",
    "block", "glue", "share", "crown", "wait", "bad",
];

pub const NUM_CLASSES: usize = CLASSES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordKind {
    Class,
    Attribute,
    Function,
    Confusable,
}

/// All words in id order: classes, attributes, function words, confusables.
pub fn words() -> impl Iterator<Item = &'static str> {
    CLASSES.iter().chain(&ATTRIBUTES).chain(&FUNCTION_WORDS).chain(&CONFUSABLES).copied()
}

pub fn vocab_size() -> usize {
    CLASSES.len() + ATTRIBUTES.len() + FUNCTION_WORDS.len() + CONFUSABLES.len()
}

pub fn word_id(word: &str) -> Option<usize> {
    words().position(|w| w == word)
}

pub fn word(id: usize) -> Option<&'static str> {
    words().nth(id)
}

pub fn kind(word: &str) -> Option<WordKind> {
    if CLASSES.contains(&word) {
        Some(WordKind::Class)
    } else if ATTRIBUTES.contains(&word) {
        Some(WordKind::Attribute)
    } else if FUNCTION_WORDS.contains(&word) {
        Some(WordKind::Function)
    } else if CONFUSABLES.contains(&word) {
        Some(WordKind::Confusable)
    } else {
        None
    }
}

pub fn class_id(word: &str) -> Option<usize> {
    CLASSES.iter().position(|&w| w == word)
}

pub fn attribute_id(word: &str) -> Option<usize> {
    ATTRIBUTES.iter().position(|&w| w == word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_are_unique() {
        let all: Vec<_> = words().collect();
        assert_eq!(all.len(), vocab_size());
        for (i, w) in all.iter().enumerate() {
            assert_eq!(word_id(w), Some(i), "{w} duplicated");
            assert_eq!(word(i), Some(*w));
        }
    }

    #[test]
    fn classic_confusables_present() {
        for w in ["grain", "wide", "bat"] {
            assert_eq!(kind(w), Some(WordKind::Confusable));
        }
    }
}
