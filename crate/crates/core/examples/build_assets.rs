//! Regenerates the shipped phonetic assets under `crates/core/data/`.
//!
//! cargo run -p speechground --example build_assets

use std::path::Path;

use speechground::phonetics::{generate_templates, ConfusionTable, CONFUSION_LAMBDA, CONFUSION_MAX_DISTANCE, TEMPLATE_MASTER_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let table = ConfusionTable::from_lexicon(CONFUSION_LAMBDA, CONFUSION_MAX_DISTANCE)?;
    std::fs::write(data.join("confusions.tsv"), table.to_tsv())?;
    std::fs::write(data.join("phoneme_templates.bin"), generate_templates(TEMPLATE_MASTER_SEED).encode())?;
    println!("wrote {} confusion pairs", table.iter().count());
    Ok(())
}
