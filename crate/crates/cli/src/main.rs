use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radar::dataset::{
    generate_synthetic, load_interactions, read_prepared, split_dataset, write_prepared, Aggregation, Format, InteractionDataset, LoadOptions,
    Regime, Split, SyntheticSpec,
};
use radar::encoder::{propagate_uniform, read_checkpoint};
use radar::eval::all_ranking_evaluate;
use radar::experiments::{ablation, lambda_csv, lambda_sweep, noise_robustness_sweep, SweepOptions, DEFAULT_RATIOS};
use radar::graph::build_normalized_adjacency;
use radar::trainer::{train, RunDir, TrainConfig, Variant};
use radar::Error;

#[derive(Parser)]
#[command(name = "radar", version, about = "Graph contrastive recommendation: data prep, training, evaluation and sweeps")]
struct Cli {
    /// Seed for splitting, initialisation and sampling (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, deduplicate and split an interaction file (or a synthetic corpus) into `--out`.
    Prepare(PrepareArgs),
    /// Train on a prepared dataset; writes `<out>/<name>/`.
    Train(TrainArgs),
    /// Score a checkpoint on a prepared dataset.
    Evaluate(EvaluateArgs),
    /// Train several variants over several seeds.
    Ablate(AblateArgs),
    /// Noise-injection robustness sweep.
    Robustness(RobustnessArgs),
    /// Sweep the information-bottleneck weight ratio.
    SweepLambda(SweepLambdaArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction file: `user<TAB>item[<TAB>weight][<TAB>behavior]`.
    #[arg(long, required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a clustered synthetic corpus instead of reading a file.
    #[arg(long, conflicts_with = "input")]
    synthetic: bool,
    #[arg(long, default_value = "tsv")]
    format: String,
    /// Skip the first non-comment line.
    #[arg(long)]
    header: bool,
    /// binary or weighted.
    #[arg(long, default_value = "binary")]
    regime: String,
    /// count or sum (weighted regime).
    #[arg(long, default_value = "count")]
    aggregation: String,
    /// Train, valid and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.2,0.1")]
    split: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 20)]
    edges_per_user: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run name under `--out`.
    #[arg(long, default_value = "default")]
    name: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,40")]
    k: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds (default: the configured seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run independent trainings on the worker pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,gen+gen,gen+linear,no-dacl,acl-only")]
    variants: Vec<String>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2,0.25")]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "full,gen+gen")]
    variants: Vec<String>,
}

#[derive(Args)]
struct SweepLambdaArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

/// Exit-code classes: 2 for usage and validation problems, 1 otherwise.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) | Error::Parse { .. } | Error::Shape { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

/// Defaults, then the config file, then `RADAR_*` variables, then `--seed`.
fn load_config(cli: &Cli) -> Outcome<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).or_else(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Outcome<InteractionDataset> {
    if !dir.is_dir() {
        return usage(format!("dataset directory {} not found", dir.display()));
    }
    Ok(read_prepared(dir)?)
}

fn print_json(v: &impl serde::Serialize) -> Outcome<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> Outcome<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, text)?;
    Ok(p)
}

fn parse_variants(names: &[String]) -> Outcome<Vec<Variant>> {
    if names.is_empty() {
        return usage("at least one variant is required");
    }
    names.iter().map(|n| n.parse::<Variant>().map_err(|e| Failure::Usage(e.to_string()))).collect()
}

fn sweep_options(cfg: &TrainConfig, a: &SweepArgs) -> SweepOptions {
    SweepOptions {
        seeds: if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() },
        parallel: a.parallel,
        ..SweepOptions::default()
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    match &cli.cmd {
        Command::Prepare(a) => prepare(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Ablate(a) => {
            let cfg = load_config(cli)?;
            let ds = load_data(&a.sweep.data)?;
            let variants = parse_variants(&a.variants)?;
            let report = ablation(&ds, &cfg, &variants, &sweep_options(&cfg, &a.sweep))?;
            write_out(&cli.out, "ablation.json", &serde_json::to_string_pretty(&report)?)?;
            write_out(&cli.out, "ablation.csv", &report.to_csv())?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Robustness(a) => {
            let cfg = load_config(cli)?;
            let ds = load_data(&a.sweep.data)?;
            let variants = parse_variants(&a.variants)?;
            let ratios = if a.ratios.is_empty() { DEFAULT_RATIOS.to_vec() } else { a.ratios.clone() };
            let report = noise_robustness_sweep(&ds, &cfg, &ratios, &variants, &sweep_options(&cfg, &a.sweep))?;
            write_out(&cli.out, "robustness.jsonl", &report.to_jsonl()?)?;
            write_out(&cli.out, "robustness.csv", &report.to_csv())?;
            write_out(&cli.out, "robustness_trends.json", &serde_json::to_string_pretty(&report.trends)?)?;
            print!("{}", report.to_csv());
            for t in &report.trends {
                eprintln!("{}: monotone recall@20 trend = {}", t.variant, t.monotone);
            }
            Ok(())
        }
        Command::SweepLambda(a) => {
            let cfg = load_config(cli)?;
            let ds = load_data(&a.sweep.data)?;
            let rows = lambda_sweep(&ds, &cfg, &a.values, &sweep_options(&cfg, &a.sweep))?;
            write_out(&cli.out, "lambda_sweep.json", &serde_json::to_string_pretty(&rows)?)?;
            write_out(&cli.out, "lambda_sweep.csv", &lambda_csv(&rows))?;
            print!("{}", lambda_csv(&rows));
            Ok(())
        }
    }
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Outcome<()> {
    let seed = cli.seed.unwrap_or(TrainConfig::default().seed);
    if a.split.len() != 3 {
        return usage("--split takes three fractions: train,valid,test");
    }
    let fractions = [a.split[0], a.split[1], a.split[2]];
    let raw = if a.synthetic {
        generate_synthetic(SyntheticSpec::new(a.users, a.items, a.clusters, a.edges_per_user, seed))?.dataset
    } else {
        let path = a.input.as_ref().expect("clap enforces --input without --synthetic");
        if !path.is_file() {
            return usage(format!("input file {} not found", path.display()));
        }
        let opts = LoadOptions {
            format: a.format.parse::<Format>()?,
            header: a.header,
            regime: match a.regime.as_str() {
                "binary" => Regime::Binary,
                "weighted" => Regime::Weighted,
                other => return usage(format!("unknown regime `{other}` (expected binary or weighted)")),
            },
            aggregation: match a.aggregation.as_str() {
                "count" => Aggregation::Count,
                "sum" => Aggregation::Sum,
                other => return usage(format!("unknown aggregation `{other}` (expected count or sum)")),
            },
        };
        load_interactions(path, &opts)?
    };
    let ds = split_dataset(&raw, fractions, seed)?;
    let manifest = write_prepared(&ds, &cli.out)?;
    print_json(&manifest)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Outcome<()> {
    let cfg = load_config(cli)?;
    let ds = load_data(&a.data)?;
    let mut run = RunDir::create(&cli.out, &a.name, &cfg, &ds.checksum())?;
    let out = train(&ds, &cfg, Some(&mut run))?;
    let mut metrics = BTreeMap::new();
    if out.best.is_some() {
        for (split, name) in [(Split::Valid, "valid"), (Split::Test, "test")] {
            for (k, v) in out.evaluate(&ds, split)?.metrics {
                metrics.insert(format!("{name}/{k}"), v);
            }
        }
    }
    run.finish(metrics)?;
    print_json(run.manifest())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Outcome<()> {
    if !a.checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", a.checkpoint.display()));
    }
    if a.k.is_empty() || a.k.contains(&0) {
        return usage("--k values must be at least 1");
    }
    let split = match a.split.as_str() {
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => return usage(format!("unknown split `{other}` (expected valid or test)")),
    };
    let cfg = load_config(cli)?;
    let ds = load_data(&a.data)?;
    let (state, layers) = read_checkpoint(&a.checkpoint)?;
    if state.user.rows() != ds.n_users() || state.item.rows() != ds.n_items() {
        return usage(format!(
            "checkpoint (d={}, N={}, M={}) does not match dataset (N={}, M={})",
            state.dim(),
            state.user.rows(),
            state.item.rows(),
            ds.n_users(),
            ds.n_items()
        ));
    }
    let adj = build_normalized_adjacency(&ds, cfg.use_weights)?;
    let p = propagate_uniform(adj.matrix(), &state, layers)?;
    let (report, _) = all_ranking_evaluate(&p.user, &p.item, &ds, split, &a.k)?;
    let mut csv = String::from("k,recall,ndcg\n");
    for &k in &a.k {
        let _ = writeln!(csv, "{k},{:.6},{:.6}", report.recall(k), report.ndcg(k));
    }
    write_out(&cli.out, "report.json", &serde_json::to_string_pretty(&report)?)?;
    write_out(&cli.out, "report.csv", &csv)?;
    print_json(&report)
}
