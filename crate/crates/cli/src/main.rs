//! `fet`: train, predict, evaluate and inspect entity typing models.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use fet_core::bag::{
    collect_attributes, load_attribute_file, write_attribute_file, AttributeProposal,
    AttributeRecord, PrecomputedProposer,
};
use fet_core::corpus::{
    build_vocabulary, load_embedding_table, load_instances, load_tier_map, LabelVocabulary,
};
use fet_core::encoder::PrecomputedEncoder;
use fet_core::metrics::{cooccurrence_csv, cooccurrence_matrix, EvalReport, Pair};
use fet_core::pipeline::{
    checkpoint, prepare_all, train, AttributeSupply, EncoderKind, PredictionRecord, Resources,
    RunConfig,
};

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "fet",
    version,
    about = "Sequence-to-set fine-grained entity typing",
    after_help = "Any run configuration field can be overridden as --key=value, e.g. --theta_s=1 --d_s=64."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Predict label sets with a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Extract context and entity attributes into a precomputed-attribute file.
    BuildBag(BuildBagArgs),
    /// Write the label co-occurrence matrix as CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct AttributeArgs {
    /// Masked-word candidates jsonl: {"id", "candidates": [[word, prob], ...]}.
    #[arg(long, conflicts_with = "attributes")]
    candidates: Option<PathBuf>,
    /// Precomputed attributes jsonl written by `build-bag`.
    #[arg(long)]
    attributes: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training instances jsonl.
    #[arg(long)]
    train: PathBuf,
    /// Development instances jsonl for early stopping.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Label tier map jsonl: {"label", "tier"}.
    #[arg(long)]
    tier_map: PathBuf,
    /// Word embedding table, one `word v1 ... vd` line per word.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    attrs: AttributeArgs,
    /// Encoder features jsonl, required with `encoder=precomputed`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for gradient computation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instances jsonl; gold labels are ignored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    attrs: AttributeArgs,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Predictions jsonl to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint whose vocabulary supplies tiers and shot counts.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predictions jsonl written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Gold instances jsonl.
    #[arg(long)]
    gold: PathBuf,
    /// Report JSON to write; the text tables go to stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildBagArgs {
    #[arg(long)]
    input: PathBuf,
    /// Masked-word candidates jsonl; without it only entity attributes are kept.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Instances jsonl whose gold sets are counted.
    #[arg(long, required_unless_present = "predictions")]
    instances: Option<PathBuf>,
    /// Predictions jsonl whose final sets are counted.
    #[arg(long, conflicts_with = "instances")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    tier_map: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

/// Splits `--key=value` arguments naming run configuration fields from the
/// rest. Flags that the subcommand itself declares stay with clap.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let fields = config_fields();
    let command = Cli::command();
    let sub = args
        .get(1)
        .and_then(|name| command.find_subcommand(name))
        .cloned();
    let own: BTreeSet<String> = sub
        .iter()
        .flat_map(|c| {
            c.get_arguments()
                .filter_map(|a| a.get_long().map(str::to_string))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, arg) in args.into_iter().enumerate() {
        if i >= 2 {
            if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
                if fields.contains(key) && !own.contains(key) {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn config_fields() -> BTreeSet<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn apply(config: RunConfig, overrides: &[(String, String)]) -> Result<RunConfig> {
    Ok(config.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

/// Writes `<output>.manifest.json` echoing the effective configuration.
fn write_manifest(
    output: &Path,
    command: &str,
    config: &RunConfig,
    inputs: serde_json::Value,
) -> Result<()> {
    let mut name = output.as_os_str().to_os_string();
    name.push(".manifest.json");
    let path = PathBuf::from(name);
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": inputs,
        "output": output,
    });
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_features(path: Option<&Path>, config: &RunConfig) -> Result<Option<PrecomputedEncoder>> {
    match (config.encoder, path) {
        (EncoderKind::Precomputed, None) => bail!("encoder=precomputed needs --features"),
        (_, Some(p)) => Ok(Some(PrecomputedEncoder::load(p, config.hidden_size())?)),
        (EncoderKind::Toy, None) => Ok(None),
    }
}

enum AttributeSource {
    None,
    Proposer(PrecomputedProposer),
    Precomputed(BTreeMap<String, Vec<AttributeProposal>>),
}

impl AttributeSource {
    fn load(args: &AttributeArgs) -> Result<Self> {
        Ok(match (&args.candidates, &args.attributes) {
            (Some(c), _) => Self::Proposer(PrecomputedProposer::load(c)?),
            (None, Some(a)) => Self::Precomputed(load_attribute_file(a)?),
            (None, None) => {
                log::warn!("event=no_context_attributes reason=\"neither --candidates nor --attributes given\"");
                Self::None
            }
        })
    }

    fn supply(&self) -> AttributeSupply<'_> {
        match self {
            Self::None => AttributeSupply::None,
            Self::Proposer(p) => AttributeSupply::Proposer(p),
            Self::Precomputed(m) => AttributeSupply::Precomputed(m),
        }
    }
}

fn run_train(args: TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut config = apply(base_config(args.config.as_deref())?, overrides)?;
    if let Some(w) = args.workers {
        config.workers = w;
        config.validate()?;
    }
    let train_set = load_instances(&args.train)?;
    let dev_set = match &args.dev {
        Some(p) => load_instances(p)?,
        None => Vec::new(),
    };
    let tier_map = load_tier_map(&args.tier_map)?;
    let table = load_embedding_table(&args.embeddings)?;
    let attributes = AttributeSource::load(&args.attrs)?;
    let features = load_features(args.features.as_deref(), &config)?;
    log::info!(
        "event=train_start train={} dev={} out={}",
        train_set.len(),
        dev_set.len(),
        args.out.display()
    );
    let outcome = train(
        &config,
        &train_set,
        &dev_set,
        Resources {
            tier_map: &tier_map,
            table: &table,
            attributes: attributes.supply(),
            features,
        },
        Some(&args.out),
    )?;
    checkpoint::save(&outcome.model, &args.out)?;
    let history = args.out.join("history.json");
    fs::write(
        &history,
        serde_json::to_string_pretty(&outcome.history)? + "\n",
    )
    .with_context(|| format!("writing {}", history.display()))?;
    log::info!(
        "event=train_done best_epoch={} out={}",
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn run_predict(args: PredictArgs, overrides: &[(String, String)]) -> Result<()> {
    let table = load_embedding_table(&args.embeddings)?;
    let manifest = checkpoint::read_manifest(&args.checkpoint)?;
    let features = load_features(args.features.as_deref(), &manifest.config)?;
    let model = checkpoint::load(&args.checkpoint, table, features)?;
    let mut config = apply(model.config.clone(), overrides)?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    let model = model.with_config(config)?;
    let instances = load_instances(&args.input)?;
    let attributes = AttributeSource::load(&args.attrs)?;
    let prepared = prepare_all(&model, &instances, &attributes.supply(), false)?;
    let mut out = Vec::new();
    for result in model.predict_all(&prepared)? {
        serde_json::to_writer(&mut out, &result.to_record(&model.vocab))?;
        out.push(b'\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    write_manifest(
        &args.out,
        "predict",
        &model.config,
        json!({ "checkpoint": args.checkpoint, "input": args.input, "embeddings": args.embeddings }),
    )?;
    log::info!(
        "event=predict_done instances={} out={}",
        prepared.len(),
        args.out.display()
    );
    Ok(())
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}: bad prediction record", path.display(), i + 1))
        })
        .collect()
}

fn label_ids(
    vocab: &LabelVocabulary,
    labels: &[String],
    path: &Path,
    id: &str,
) -> Result<BTreeSet<usize>> {
    labels
        .iter()
        .map(|l| {
            vocab.id(l).with_context(|| {
                format!(
                    "{}: record `{id}` has label `{l}` outside the vocabulary",
                    path.display()
                )
            })
        })
        .collect()
}

fn run_eval(args: EvalArgs, overrides: &[(String, String)]) -> Result<()> {
    let manifest = checkpoint::read_manifest(&args.checkpoint)?;
    let base = match &args.config {
        Some(p) => base_config(Some(p))?,
        None => manifest.config.clone(),
    };
    let config = apply(base, overrides)?;
    let vocab = manifest.vocabulary;
    let predictions = load_predictions(&args.predictions)?;
    let gold: BTreeMap<String, BTreeSet<usize>> = load_instances(&args.gold)?
        .into_iter()
        .map(|i| {
            let ids = vocab.ids_of(&i.gold_labels);
            (i.id, ids)
        })
        .collect();
    let mut pairs: Vec<Pair<usize>> = Vec::with_capacity(predictions.len());
    for rec in &predictions {
        let Some(g) = gold.get(&rec.id) else {
            bail!(
                "{}: prediction `{}` has no gold instance in {}",
                args.predictions.display(),
                rec.id,
                args.gold.display()
            );
        };
        pairs.push((
            label_ids(&vocab, &rec.final_labels, &args.predictions, &rec.id)?,
            g.clone(),
        ));
    }
    if pairs.len() != gold.len() {
        log::warn!(
            "event=eval_partial predictions={} gold={}",
            pairs.len(),
            gold.len()
        );
    }
    let report = EvalReport::new(&pairs, &vocab, config.tier_empty);
    report.write_json(&args.out)?;
    write_manifest(
        &args.out,
        "eval",
        &config,
        json!({ "checkpoint": args.checkpoint, "predictions": args.predictions, "gold": args.gold }),
    )?;
    print!("{}", report.render());
    Ok(())
}

fn run_build_bag(args: BuildBagArgs, overrides: &[(String, String)]) -> Result<()> {
    let config = apply(base_config(args.config.as_deref())?, overrides)?;
    let instances = load_instances(&args.input)?;
    let proposer = args
        .candidates
        .as_deref()
        .map(PrecomputedProposer::load)
        .transpose()?;
    let records: Vec<AttributeRecord> = instances
        .iter()
        .map(|i| AttributeRecord {
            id: i.id.clone(),
            attributes: collect_attributes(
                i,
                proposer
                    .as_ref()
                    .map(|p| p as &dyn fet_core::bag::MaskedWordProposer),
                config.theta_c,
            ),
        })
        .collect();
    write_attribute_file(&args.out, &records)?;
    write_manifest(
        &args.out,
        "build-bag",
        &config,
        json!({ "input": args.input, "candidates": args.candidates }),
    )?;
    log::info!(
        "event=build_bag_done instances={} out={}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let tier_map = load_tier_map(&args.tier_map)?;
    let vocab = build_vocabulary(&[], &tier_map)?;
    let sets: Vec<BTreeSet<usize>> = match (&args.instances, &args.predictions) {
        (Some(p), _) => load_instances(p)?
            .iter()
            .map(|i| {
                let v: Vec<String> = i.gold_labels.iter().cloned().collect();
                label_ids(&vocab, &v, p, &i.id)
            })
            .collect::<Result<_>>()?,
        (None, Some(p)) => load_predictions(p)?
            .iter()
            .map(|r| label_ids(&vocab, &r.final_labels, p, &r.id))
            .collect::<Result<_>>()?,
        (None, None) => bail!("report needs --instances or --predictions"),
    };
    let matrix = cooccurrence_matrix(&sets, vocab.len());
    let mut file =
        fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    file.write_all(cooccurrence_csv(&matrix, &vocab).as_bytes())
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} {}",
                buf.timestamp_millis(),
                record.level().as_str().to_ascii_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::Train(a) => run_train(a, &overrides),
        Command::Predict(a) => run_predict(a, &overrides),
        Command::Eval(a) => run_eval(a, &overrides),
        Command::BuildBag(a) => run_build_bag(a, &overrides),
        Command::Report(a) => {
            if let Some((k, _)) = overrides.first() {
                eprintln!("error: report takes no configuration overrides (got --{k})");
                return ExitCode::from(USAGE_ERROR);
            }
            run_report(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(USAGE_ERROR)
            } else {
                ExitCode::from(RUNTIME_ERROR)
            }
        }
    }
}

/// Bad configuration values are usage errors; everything else is a runtime
/// failure.
fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<fet_core::Error>(),
            Some(fet_core::Error::Config(_))
        )
    })
}
