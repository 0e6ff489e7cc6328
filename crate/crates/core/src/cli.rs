//! The `uttrank` command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, Split};
use crate::eval::{run_comparison, ComparisonConfig, Extractor};
use crate::pipeline::{extract_all, prepare_all};
use crate::rouge::{rouge_triple, RougeScore, RougeTriple};
use crate::scorer::ScoringModel;
use crate::synth::{generate, SynthConfig};
use crate::trainer::{grad_check_assembly, random_check_point, train, LossAssembly, Objective, OptimizerConfig, TrainConfig};
use crate::{Error, Result};

/// Environment variable read for the log filter (`error`, `warn`, `info`, ...).
pub const LOG_ENV: &str = "UTTRANK_LOG";

#[derive(Debug, Parser)]
#[command(name = "uttrank", version, about = "Two-stage utterance ranking for query-focused meeting summarization")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a ranker, re-ranker or baseline scorer.
    Train(TrainArgs),
    /// Run the extraction pipeline and write generator inputs as JSONL.
    Extract(ExtractArgs),
    /// Train and compare extractors on a train/test split.
    Eval(EvalArgs),
    /// Score candidate/reference pairs with ROUGE-1/2/L.
    Rouge(RougeArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a planted-order synthetic corpus.
    Synth(SynthArgs),
}

/// Overrides applied on top of the JSON config file.
#[derive(Debug, Clone, Default, Args)]
struct Overrides {
    /// JSON config file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// Pairwise base margin.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    listwise_k: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    per_sample_top: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    token_budget: Option<usize>,
    /// Skip stage-2 re-ranking.
    #[arg(long)]
    no_rerank: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// pairwise, listwise, bce or mse.
    #[arg(long, default_value = "pairwise")]
    objective: String,
    /// Stage-1 checkpoint; required for the listwise objective.
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ranker: PathBuf,
    #[arg(long)]
    reranker: Option<PathBuf>,
    /// Output JSONL; a manifest is written alongside.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated extractors (default: all).
    #[arg(long, value_delimiter = ',')]
    extractors: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Do not print the table to stdout.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct RougeArgs {
    /// Two-column TSV: candidate, reference.
    #[arg(long, conflicts_with_all = ["candidates", "references"])]
    tsv: Option<PathBuf>,
    /// One candidate per line.
    #[arg(long, requires = "references")]
    candidates: Option<PathBuf>,
    /// One reference per line.
    #[arg(long, requires = "candidates")]
    references: Option<PathBuf>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Objectives to check (default: all four).
    #[arg(long, value_delimiter = ',')]
    objectives: Vec<String>,
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 6)]
    items: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Training instances.
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    validation: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Utterances per instance.
    #[arg(long, default_value_t = 40)]
    utterances: usize,
    /// Standard deviation of the label noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    /// SHA-256 of each input file, keyed by path as given.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], config: &impl Serialize, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        for path in inputs {
            input_digests.insert(path.display().to_string(), file_digest(path)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            input_digests,
            outputs: Vec::new(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    fn write(mut self, path: &Path, outputs: &[PathBuf]) -> Result<()> {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        write_file(path, &(serde_json::to_string_pretty(&self)? + "\n"))
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "output".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn load_config(path: Option<&Path>) -> Result<ComparisonConfig> {
    match path {
        None => Ok(ComparisonConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })
        }
    }
}

fn parse_optimizer(name: &str) -> Result<OptimizerConfig> {
    match name {
        "sgd" => Ok(OptimizerConfig::Sgd),
        "adam" => Ok(OptimizerConfig::adam()),
        other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
    }
}

impl Overrides {
    fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer = parse_optimizer(v)?;
        }
        if let Some(v) = self.margin {
            cfg.base_margin = v;
        }
        if self.listwise_k.is_some() {
            cfg.listwise_k = self.listwise_k;
        }
        Ok(())
    }

    /// Loads the config file and applies every flag to it.
    fn resolve(&self) -> Result<ComparisonConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        self.apply_train(&mut cfg.train)?;
        if let Some(rt) = cfg.rerank_train.as_mut() {
            self.apply_train(rt)?;
        }
        let p = &mut cfg.pipeline;
        if let Some(v) = self.sample_size {
            p.sample_size = v;
        }
        if let Some(v) = self.per_sample_top {
            p.per_sample_top = v;
        }
        if let Some(v) = self.top_k {
            p.top_k = v;
        }
        if let Some(v) = self.token_budget {
            p.token_budget = v;
        }
        if let Some(v) = self.margin {
            p.base_margin = v;
        }
        if self.listwise_k.is_some() {
            p.listwise_k = self.listwise_k;
        }
        if self.no_rerank {
            p.rerank_enabled = false;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let objective: Objective = args.objective.parse()?;
    let resolved = args.overrides.resolve()?;
    let mut config = match (objective, &resolved.rerank_train) {
        (Objective::Listwise, Some(rt)) => rt.clone(),
        _ => resolved.train.clone(),
    };
    config.objective = objective;
    let stage1 = match (&args.stage1, objective) {
        (Some(p), _) => Some(ScoringModel::load(p)?),
        (None, Objective::Listwise) => return Err(Error::invalid("--stage1 is required for the listwise objective")),
        (None, _) => None,
    };
    let corpus = load_corpus(&args.train, Split::Train)?;
    let prepared = prepare_all(&corpus.instances);
    info!("training {objective} on {} instances", corpus.len());
    let outcome = train(&prepared, &config, &resolved.pipeline, stage1.as_ref())?;

    let model_path = args.out_dir.join("model.json");
    let loss_path = args.out_dir.join("loss.csv");
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    outcome.model.save(&model_path)?;
    write_file(&loss_path, &outcome.history_csv())?;

    let mut inputs = vec![args.train.as_path()];
    inputs.extend(args.stage1.as_deref());
    #[derive(Serialize)]
    struct Snapshot<'a> {
        train: &'a TrainConfig,
        pipeline: &'a crate::pipeline::PipelineConfig,
    }
    RunManifest::new("train", argv, &Snapshot { train: &config, pipeline: &resolved.pipeline }, config.seed, &inputs)?
        .write(&args.out_dir.join("manifest.json"), &[model_path, loss_path])
}

fn cmd_extract(args: &ExtractArgs, argv: &[String]) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let pipeline = cfg.pipeline;
    pipeline.validate()?;
    let ranker = ScoringModel::load(&args.ranker)?;
    let reranker = match (&args.reranker, pipeline.rerank_enabled) {
        (Some(p), true) => Some(ScoringModel::load(p)?),
        (None, true) => return Err(Error::invalid("--reranker is required unless --no-rerank is given")),
        (_, false) => None,
    };
    let corpus = load_corpus(&args.input, Split::Test)?;
    let prepared = prepare_all(&corpus.instances);
    let results = extract_all(&prepared, &ranker, reranker.as_ref(), &pipeline)?;
    let mut out = String::new();
    for r in &results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(&args.out, &out)?;
    info!("wrote {} extractions to {}", results.len(), args.out.display());

    let mut inputs = vec![args.input.as_path(), args.ranker.as_path()];
    inputs.extend(args.reranker.as_deref().filter(|_| pipeline.rerank_enabled));
    RunManifest::new("extract", argv, &pipeline, 0, &inputs)?.write(&sibling_manifest(&args.out), &[args.out.clone()])
}

fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    let extractors: Vec<Extractor> = if args.extractors.is_empty() {
        Extractor::ALL.to_vec()
    } else {
        args.extractors.iter().map(|e| e.parse()).collect::<Result<_>>()?
    };
    let train = load_corpus(&args.train, Split::Train)?;
    let test = load_corpus(&args.test, Split::Test)?;
    let corpus_id = file_digest(&args.test)?[..12].to_string();
    let report = run_comparison(&corpus_id, &train.instances, &test.instances, &extractors, &cfg)?;
    let table = report.to_table();
    if !args.quiet {
        print!("{table}");
    }

    let json_path = args.out_dir.join("report.json");
    let table_path = args.out_dir.join("report.txt");
    write_file(&json_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_file(&table_path, &table)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    RunManifest::new("eval", argv, &cfg, seed, &[&args.train, &args.test])?
        .write(&args.out_dir.join("manifest.json"), &[json_path, table_path])
}

#[derive(Debug, Serialize)]
struct RougeRow {
    index: usize,
    #[serde(flatten)]
    scores: RougeTriple,
}

#[derive(Debug, Serialize)]
struct RougeReport {
    pairs: Vec<RougeRow>,
    mean: RougeTriple,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn mean_score(scores: impl Iterator<Item = RougeScore> + Clone) -> RougeScore {
    let n = scores.clone().count().max(1) as f64;
    let (p, r, f) = scores.fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.precision, acc.1 + s.recall, acc.2 + s.f1));
    RougeScore { precision: p / n, recall: r / n, f1: f / n }
}

fn cmd_rouge(args: &RougeArgs, argv: &[String]) -> Result<()> {
    let (pairs, inputs): (Vec<(String, String)>, Vec<&Path>) = match (&args.tsv, &args.candidates, &args.references) {
        (Some(tsv), _, _) => {
            let mut pairs = Vec::new();
            for (i, line) in read_lines(tsv)?.into_iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (c, r) = line.split_once('\t').ok_or_else(|| Error::Parse {
                    path: tsv.clone(),
                    line: i + 1,
                    message: "expected two tab-separated columns".into(),
                })?;
                pairs.push((c.to_string(), r.to_string()));
            }
            (pairs, vec![tsv.as_path()])
        }
        (None, Some(c), Some(r)) => {
            let (cands, refs) = (read_lines(c)?, read_lines(r)?);
            if cands.len() != refs.len() {
                return Err(Error::validation(format!(
                    "{} candidates but {} references",
                    cands.len(),
                    refs.len()
                )));
            }
            (cands.into_iter().zip(refs).collect(), vec![c.as_path(), r.as_path()])
        }
        _ => return Err(Error::invalid("give --tsv or both --candidates and --references")),
    };
    let rows: Vec<RougeRow> = pairs
        .iter()
        .enumerate()
        .map(|(index, (c, r))| RougeRow { index, scores: rouge_triple(c, r) })
        .collect();
    let mean = RougeTriple {
        rouge1: mean_score(rows.iter().map(|r| r.scores.rouge1)),
        rouge2: mean_score(rows.iter().map(|r| r.scores.rouge2)),
        rouge_l: mean_score(rows.iter().map(|r| r.scores.rouge_l)),
    };
    let json = serde_json::to_string_pretty(&RougeReport { pairs: rows, mean })? + "\n";
    match &args.out {
        Some(out) => {
            write_file(out, &json)?;
            RunManifest::new("rouge", argv, &serde_json::json!({}), 0, &inputs)?.write(&sibling_manifest(out), &[out.clone()])
        }
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    objective: Objective,
    points: usize,
    max_relative_error: f64,
    threshold: f64,
    pass: bool,
}

fn cmd_gradcheck(args: &GradcheckArgs, argv: &[String]) -> Result<bool> {
    let objectives: Vec<Objective> = if args.objectives.is_empty() {
        vec![Objective::Pairwise, Objective::Listwise, Objective::Bce, Objective::Mse]
    } else {
        args.objectives.iter().map(|o| o.parse()).collect::<Result<_>>()?
    };
    let layer_dims = TrainConfig::default().layer_dims();
    let mut rows = Vec::new();
    for objective in objectives {
        let assembly = LossAssembly::for_objective(objective, crate::ranklosses::DEFAULT_BASE_MARGIN, 3.min(args.items));
        let mut worst: f64 = 0.0;
        let mut threshold = 0.0;
        for point in 0..args.points {
            let seed = args.seed.wrapping_add(point as u64);
            let cp = random_check_point(&assembly, &layer_dims, args.items, seed)?;
            let report = grad_check_assembly(&cp.model, &assembly, &cp.features, &cp.targets, args.epsilon)?;
            worst = worst.max(report.max_relative_error);
            threshold = report.threshold;
        }
        rows.push(GradcheckRow {
            objective,
            points: args.points,
            max_relative_error: worst,
            threshold,
            pass: worst <= threshold,
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    let json = serde_json::to_string_pretty(&rows)? + "\n";
    match &args.out {
        Some(out) => {
            write_file(out, &json)?;
            #[derive(Serialize)]
            struct Snapshot<'a> {
                points: usize,
                items: usize,
                epsilon: f64,
                layer_dims: &'a [usize],
            }
            let snap = Snapshot { points: args.points, items: args.items, epsilon: args.epsilon, layer_dims: &layer_dims };
            RunManifest::new("gradcheck", argv, &snap, args.seed, &[])?.write(&sibling_manifest(out), &[out.clone()])?;
        }
        None => print!("{json}"),
    }
    Ok(all_pass)
}

fn cmd_synth(args: &SynthArgs, argv: &[String]) -> Result<()> {
    let cfg = SynthConfig {
        train: args.train,
        validation: args.validation,
        test: args.test,
        utterances: args.utterances,
        noise: args.noise,
        seed: args.seed,
    };
    let corpus = generate(&cfg)?;
    let outputs = corpus.write_dir(&args.out_dir)?;
    RunManifest::new("synth", argv, &cfg, cfg.seed, &[])?.write(&args.out_dir.join("manifest.json"), &outputs)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 1 on validation or I/O
/// errors (and failed gradient checks), 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &argv).map(|_| true),
        Command::Extract(a) => cmd_extract(a, &argv).map(|_| true),
        Command::Eval(a) => cmd_eval(a, &argv).map(|_| true),
        Command::Rouge(a) => cmd_rouge(a, &argv).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, &argv),
        Command::Synth(a) => cmd_synth(a, &argv).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
