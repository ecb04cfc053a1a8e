use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::{info, Level};

use kerag_core::baserec::{train_cf, CfConfig};
use kerag_core::binfmt::{read_cf, read_embeddings, write_cf, write_embeddings, Snapshot, SnapshotStats};
use kerag_core::corpus::{filter_min_interactions, leave_one_out_split, load_kg, load_ratings_with_titles, DatasetFormat, KnowledgeGraph};
use kerag_core::eval::{evaluate_run, format_sweep_table, sweep_q, write_report, write_traces, EvalConfig, RunOutput};
use kerag_core::gat::{self, GatTrainConfig, LossForm};
use kerag_core::llm::{Completer, HttpCompleter, InferenceParams, MockCompleter, MockMode};
use kerag_core::promptgen::{emit_instructions, write_jsonl, Artifacts, PromptOptions, PromptVariant, SentenceTemplates};
use kerag_core::retriever::{score_edges, top_q};
use kerag_core::sampling::SamplingConfig;
use kerag_core::synth::{self, SynthConfig};
use kerag_core::{CfModel, DatasetSplit, EmbeddingStore, GatParams, TripleIndex};

#[derive(Parser)]
#[command(name = "kerag", version, about = "Knowledge-graph enhanced LLM re-ranking for recommendation")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset in MovieLens layout.
    Synth(SynthArgs),
    /// Load ratings (and optionally a KG), filter and write a snapshot.
    Ingest(IngestArgs),
    /// Train the graph attention network over the snapshot's KG.
    GatTrain(GatTrainArgs),
    /// Train the collaborative-filtering base recommender.
    CfTrain(CfTrainArgs),
    /// Print the top-Q scored triples for a list of items.
    Retrieve(RetrieveArgs),
    /// Emit an instruction-tuning file.
    Emit(EmitArgs),
    /// Evaluate HR@k / NDCG@k through an LLM endpoint.
    Eval(EvalArgs),
    /// Evaluate once per Q and print the results side by side.
    SweepQ(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 400)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    ratings: PathBuf,
    /// `ml` (`::`-separated, titles from movies.dat) or `csv`.
    #[arg(long, default_value = "ml")]
    format: DatasetFormat,
    /// Title table; defaults to movies.dat next to the ratings file.
    #[arg(long)]
    titles: Option<PathBuf>,
    #[arg(long, requires = "map")]
    kg: Option<PathBuf>,
    #[arg(long, requires = "kg")]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GatTrainArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    chunk: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    /// `hinge` or `reversed`.
    #[arg(long, default_value = "hinge")]
    loss: LossForm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CfTrainArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 8192)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 1)]
    q: usize,
    /// One raw item id per line.
    #[arg(long)]
    items: PathBuf,
    /// Output TSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ArtifactArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    cf: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Relation-to-sentence table; the built-in table when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// `t` (triple_format), `s` (sentence_format) or `original`.
    #[arg(long, default_value = "t")]
    variant: PromptVariant,
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    /// Retrieve triples for liked/disliked items only.
    #[arg(long)]
    no_candidate_triples: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EndpointArgs {
    /// `mock:echo_hint`, `mock:reverse`, `mock:garbage`, or a base URL.
    /// Falls back to KERAG_LLM_URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "kerag")]
    model: String,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 40)]
    top_k: u32,
    #[arg(long, default_value_t = 0.1)]
    top_p: f64,
    #[arg(long, default_value_t = 256)]
    max_tokens: u32,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    #[arg(long, default_value_t = 8)]
    in_flight: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[arg(long, default_value = "t")]
    variant: PromptVariant,
    #[arg(long, value_delimiter = ',', default_value = "3,5")]
    k: Vec<usize>,
    /// Evaluate only the first N test users.
    #[arg(long)]
    limit: Option<usize>,
    /// Keep short responses short instead of filling from Hint 1.
    #[arg(long)]
    no_pad: bool,
    /// Do not force the held-out item into the candidate set.
    #[arg(long)]
    no_force_include: bool,
    #[arg(long)]
    no_candidate_triples: bool,
    #[arg(long, default_value_t = 0.1)]
    failure_ceiling: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    q: usize,
    /// Report path; traces go to a `traces` directory beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    q_values: Vec<usize>,
    /// Directory receiving one `q<N>/` run per value and `sweep.tsv`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Ingest(a) => ingest(a),
        Command::GatTrain(a) => gat_train(a),
        Command::CfTrain(a) => cf_train(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Emit(a) => emit(a),
        Command::Eval(a) => eval(a),
        Command::SweepQ(a) => sweep(a),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let world = synth::generate(&SynthConfig {
        users: a.users,
        items: a.items,
        groups: a.groups,
        seed: a.seed,
        ..SynthConfig::default()
    })?;
    synth::write_movielens_files(&world, &a.out)?;
    println!(
        "wrote {} ratings and {} triples to {}",
        world.dataset.interactions.len(),
        world.kg.triples.len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let titles = a.titles.clone().or_else(|| {
        let sibling = a.ratings.with_file_name("movies.dat");
        (a.format == DatasetFormat::MovieLens && sibling.exists()).then_some(sibling)
    });
    let (raw, rating_stats) = load_ratings_with_titles(&a.ratings, a.format, titles.as_deref())?;
    let kept = filter_min_interactions(&raw.interactions, a.min_interactions);
    if kept.is_empty() {
        bail!("no interactions survive --min-interactions {}", a.min_interactions);
    }
    let dataset = raw.reindexed(&kept);
    let (kg, kg_stats) = match (&a.kg, &a.map) {
        (Some(kg), Some(map)) => {
            let (g, s) = load_kg(kg, map, &dataset.catalog)?;
            (g, Some(s))
        }
        _ => (
            KnowledgeGraph {
                item_count: dataset.catalog.item_count(),
                ..KnowledgeGraph::default()
            },
            None,
        ),
    };
    let stats = SnapshotStats {
        ratings: rating_stats,
        min_interactions: a.min_interactions,
        users_after_filter: dataset.catalog.user_count(),
        items_after_filter: dataset.catalog.item_count(),
        interactions_after_filter: dataset.interactions.len(),
        kg: kg_stats,
    };
    let snapshot = Snapshot { dataset, kg, stats };
    snapshot.write(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&snapshot.stats)?);
    Ok(())
}

fn gat_train(a: GatTrainArgs) -> Result<()> {
    let snapshot = Snapshot::read(&a.snapshot)?;
    if snapshot.kg.triples.is_empty() {
        bail!("snapshot {} has no knowledge-graph triples", a.snapshot.display());
    }
    let config = GatTrainConfig {
        dim: a.dim,
        batch_size: a.batch,
        chunk_size: a.chunk,
        learning_rate: a.lr,
        epochs: a.epochs,
        margin: a.margin,
        negatives_per_positive: a.negatives,
        seed: a.seed,
        loss_form: a.loss,
        ..GatTrainConfig::default()
    };
    let trained = gat::train(&snapshot.kg, &config)?;
    write_embeddings(&a.out, &trained.store, &trained.params)?;
    println!(
        "epochs {} final loss {:.6} -> {}",
        trained.epoch_losses.len(),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cf_train(a: CfTrainArgs) -> Result<()> {
    let snapshot = Snapshot::read(&a.snapshot)?;
    let split = leave_one_out_split(&snapshot.dataset.interactions)?;
    let config = CfConfig {
        dim: a.dim,
        layers: a.layers,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        l2: a.l2,
        seed: a.seed,
    };
    let trained = train_cf(&split, snapshot.dataset.catalog.item_count(), &config)?;
    write_cf(&a.out, &trained.model)?;
    println!(
        "epochs {} final loss {:.6} -> {}",
        trained.epoch_losses.len(),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn load_index(embeddings: &Path, kg: &KnowledgeGraph) -> Result<(EmbeddingStore, GatParams, TripleIndex)> {
    let (store, params) =
        read_embeddings(embeddings).with_context(|| format!("reading {}", embeddings.display()))?;
    let index = score_edges(&store, kg)?;
    Ok((store, params, index))
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let snapshot = Snapshot::read(&a.snapshot)?;
    let (_, _, index) = load_index(&a.embeddings, &snapshot.kg)?;
    let catalog = &snapshot.dataset.catalog;
    let lookup = catalog.item_index();
    let wanted = fs::read_to_string(&a.items).with_context(|| format!("reading {}", a.items.display()))?;

    let mut out = String::new();
    for raw in wanted.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let Some(&item) = lookup.get(raw) else {
            bail!("item `{raw}` is not in the snapshot catalog");
        };
        for t in top_q(item, a.q, &index)? {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                catalog.item_titles[item],
                snapshot.kg.relation_texts[t.relation],
                snapshot.kg.entity_texts[t.tail_entity],
                t.score
            ));
        }
    }
    match a.out {
        Some(path) => fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

/// Everything loaded from disk that prompts are built from.
struct Loaded {
    snapshot: Snapshot,
    split: DatasetSplit,
    cf: CfModel,
    index: TripleIndex,
    templates: SentenceTemplates,
}

impl Loaded {
    fn open(a: &ArtifactArgs) -> Result<Self> {
        let snapshot = Snapshot::read(&a.snapshot)?;
        let split = leave_one_out_split(&snapshot.dataset.interactions)?;
        let cf = read_cf(&a.cf).with_context(|| format!("reading {}", a.cf.display()))?;
        if cf.user_count() != split.user_count() || cf.item_count() != snapshot.dataset.catalog.item_count() {
            bail!(
                "{} was trained on {} users x {} items, snapshot has {} x {}",
                a.cf.display(),
                cf.user_count(),
                cf.item_count(),
                split.user_count(),
                snapshot.dataset.catalog.item_count()
            );
        }
        let (_, _, index) = load_index(&a.embeddings, &snapshot.kg)?;
        let templates = match &a.templates {
            Some(p) => SentenceTemplates::load(p)?,
            None => SentenceTemplates::builtin(),
        };
        Ok(Self {
            snapshot,
            split,
            cf,
            index,
            templates,
        })
    }

    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            catalog: &self.snapshot.dataset.catalog,
            kg: &self.snapshot.kg,
            split: &self.split,
            cf: &self.cf,
            index: &self.index,
            templates: &self.templates,
        }
    }
}

fn emit(a: EmitArgs) -> Result<()> {
    let loaded = Loaded::open(&a.artifacts)?;
    let sampling = SamplingConfig {
        n_samples: a.n,
        n_clusters: a.clusters,
        decay_factor: a.decay,
        seed: a.seed,
        ..SamplingConfig::default()
    };
    let mut options = PromptOptions::new(a.variant, a.q);
    options.include_candidate_triples = !a.no_candidate_triples;
    let outcome = emit_instructions(&loaded.artifacts(), &sampling, &options)?;
    write_jsonl(&outcome.records, &a.out)?;
    println!(
        "sampled {} users, wrote {} records ({} skipped for rating-tier deficits) to {}",
        outcome.sampled,
        outcome.records.len(),
        outcome.skipped,
        a.out.display()
    );
    Ok(())
}

fn completer(a: &EndpointArgs) -> Result<Box<dyn Completer>> {
    if let Some(mode) = a.endpoint.as_deref().and_then(|e| e.strip_prefix("mock:")) {
        return Ok(Box::new(MockCompleter { mode: mode.parse::<MockMode>()? }));
    }
    let mut params = InferenceParams {
        temperature: a.temperature,
        top_k: a.top_k,
        top_p: a.top_p,
        max_tokens: a.max_tokens,
        model_name: a.model.clone(),
        timeout: Duration::from_secs(a.timeout),
        retries: a.retries,
        max_in_flight: a.in_flight,
        ..InferenceParams::default()
    };
    let client = match &a.endpoint {
        Some(url) => {
            params.endpoint_url = url.clone();
            let key = std::env::var(kerag_core::llm::ENV_KEY).ok().filter(|k| !k.is_empty());
            HttpCompleter::new(params, key)?
        }
        None => {
            if std::env::var_os(kerag_core::llm::ENV_URL).is_none() {
                bail!("no --endpoint given and {} is not set", kerag_core::llm::ENV_URL);
            }
            HttpCompleter::from_env(params)?
        }
    };
    Ok(Box::new(client))
}

fn eval_config(r: &RunArgs, q: usize) -> EvalConfig {
    let mut options = PromptOptions::new(r.variant, q);
    options.include_candidate_triples = !r.no_candidate_triples;
    let mut config = EvalConfig::new(options);
    config.k_values = r.k.clone();
    config.limit = r.limit;
    config.pad_with_hint = !r.no_pad;
    config.force_include_test = !r.no_force_include;
    config.failure_ceiling = r.failure_ceiling;
    config.seed = r.seed;
    config.max_in_flight = r.endpoint.in_flight;
    config
}

fn save_run(run: &RunOutput, report_path: &Path) -> Result<()> {
    write_report(&run.report, report_path)?;
    let traces = report_path.parent().unwrap_or(Path::new(".")).join("traces");
    write_traces(&run.traces, &traces)?;
    info!(report = %report_path.display(), traces = %traces.display(), "run written");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let loaded = Loaded::open(&a.run.artifacts)?;
    let client = completer(&a.run.endpoint)?;
    let config = eval_config(&a.run, a.q);
    let run = match evaluate_run(&loaded.artifacts(), &config, client.as_ref()) {
        Ok(run) => run,
        Err(kerag_core::Error::FailureCeiling { rate, ceiling, partial, .. }) => {
            write_report(&partial, &a.out)?;
            bail!(
                "endpoint failure rate {rate:.3} exceeded ceiling {ceiling}; partial report written to {}",
                a.out.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    save_run(&run, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&run.report.to_flat_json())?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let loaded = Loaded::open(&a.run.artifacts)?;
    let client = completer(&a.run.endpoint)?;
    let config = eval_config(&a.run, a.q_values.first().copied().unwrap_or(0));
    let runs = sweep_q(&loaded.artifacts(), &config, &a.q_values, client.as_ref())?;
    for run in &runs {
        save_run(run, &a.out.join(format!("q{}", run.report.q)).join("report.json"))?;
    }
    let table = format_sweep_table(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>());
    fs::write(a.out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
