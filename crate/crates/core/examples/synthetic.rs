//! Trains on the synthetic corpus and prints test metrics for the full model
//! and for the ablation without induction (lambda = 0, theta_s = 1).
//!
//! cargo run --release -p fet-core --example synthetic -- [key=value ...]

use std::collections::BTreeSet;
use std::time::Instant;

use fet_core::metrics::{EvalReport, Pair, TierEmptyPolicy};
use fet_core::pipeline::{prepare_all, train, AttributeSupply, Resources, RunConfig};
use fet_core::synthetic::{desk_config, generate, SyntheticConfig, SyntheticCorpus};

fn run(corpus: &SyntheticCorpus, name: &str, config: &RunConfig) -> anyhow::Result<()> {
    let supply = AttributeSupply::Proposer(&corpus.proposer);
    let start = Instant::now();
    let outcome = train(
        config,
        &corpus.train,
        &[],
        Resources {
            tier_map: &corpus.tier_map,
            table: &corpus.table,
            attributes: AttributeSupply::Proposer(&corpus.proposer),
            features: None,
        },
        None,
    )?;
    let model = outcome.model;
    let test = prepare_all(&model, &corpus.test, &supply, false)?;
    let pairs: Vec<Pair<usize>> = model
        .predict_all(&test)?
        .into_iter()
        .zip(&test)
        .map(|(r, p)| (r.final_labels, p.gold_set.clone()))
        .collect();
    let report = EvalReport::new(&pairs, &model.vocab, TierEmptyPolicy::Skip);
    let held: BTreeSet<usize> = corpus
        .held_out
        .iter()
        .filter_map(|l| model.vocab.id(l))
        .collect();
    let hits: usize = pairs
        .iter()
        .map(|(p, g)| p.intersection(&held).filter(|x| g.contains(x)).count())
        .sum();
    println!(
        "== {name} ({:.1}s)\n{}",
        start.elapsed().as_secs_f64(),
        report.render()
    );
    println!("held-out correct: {hits}\n");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let corpus = generate(SyntheticConfig::default());
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: Vec<(&str, &str)> = args
        .iter()
        .map(|a| {
            a.split_once('=')
                .ok_or_else(|| anyhow::anyhow!("expected key=value, got {a}"))
        })
        .collect::<anyhow::Result<_>>()?;
    let config = desk_config().with_overrides(pairs)?;
    run(&corpus, "full", &config)?;
    let ablation = RunConfig {
        lambda: 0.0,
        theta_s: 1.0,
        ..config
    };
    run(&corpus, "without induction", &ablation)
}
