//! Writes the synthetic corpus as files the `fet` binary reads.
//!
//! cargo run --release -p fet-core --example write_synthetic -- <dir>

use std::path::PathBuf;

use fet_core::corpus::{write_instances, write_tier_map};
use fet_core::synthetic::{desk_config, generate, SyntheticConfig};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "synthetic".into()),
    );
    std::fs::create_dir_all(&dir)?;
    let corpus = generate(SyntheticConfig::default());
    write_instances(dir.join("train.jsonl"), &corpus.train)?;
    write_instances(dir.join("test.jsonl"), &corpus.test)?;
    write_tier_map(dir.join("tiers.jsonl"), &corpus.tier_map)?;
    corpus.table.write(dir.join("embeddings.txt"))?;
    corpus.proposer.write(dir.join("candidates.jsonl"))?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&desk_config())? + "\n",
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}
