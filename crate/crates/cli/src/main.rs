//! `oxds`: train per-domain mappers onto a shared hyperspherical semantic
//! space, then search, evaluate, classify and hash across any combination of
//! domains. Exit codes: 0 success, 2 validation error, 1 internal error.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oxds_core::harness::{
    cmd_embed, cmd_eval, cmd_fewshot, cmd_hash, cmd_search, cmd_train, EvalOptions, FewshotMode,
    FewshotOptions,
};
use oxds_core::mapper::TrainConfig;
use oxds_core::metrics::{render_report, write_report_csv, MetricKind, ReportRow};
use oxds_core::synth::{generate, SynthConfig};
use oxds_core::Error;

#[derive(Parser)]
#[command(name = "oxds", version, about = "Open cross-domain visual search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic multi-domain benchmark dataset.
    Synth(SynthArgs),
    /// Train one domain's mapping function and write its model file.
    Train(TrainArgs),
    /// Embed items of one or more domains into the shared space.
    Embed(EmbedArgs),
    /// Rank a gallery against a single query item.
    Search(SearchArgs),
    /// Run retrieval evaluations over (source, target) domain pairs.
    Eval(EvalArgs),
    /// Few-shot classification over unseen categories.
    Fewshot(FewshotArgs),
    /// Binary-code retrieval evaluation via iterative quantization.
    Hash(HashArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    categories: usize,
    #[arg(long)]
    domains: usize,
    /// Embedding (prototype) dimension.
    #[arg(long)]
    dim: usize,
    /// Raw feature dimension.
    #[arg(long)]
    feat_dim: usize,
    #[arg(long)]
    per_class: usize,
    /// Noise level; either one value or one per domain, comma-separated.
    #[arg(long, default_value = "0.05")]
    sigma: String,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    zero_shot_frac: f64,
    /// Apply a fixed componentwise odd nonlinearity to the features.
    #[arg(long)]
    nonlinear: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 20.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Width of an optional hidden layer (affine map when absent).
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Comma-separated domains to embed.
    #[arg(long)]
    domains: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    query_id: String,
    /// Target domains as one `+`-joined union, e.g. `photo+clipart`.
    #[arg(long)]
    targets: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    refine: bool,
    /// Refinement mixture; defaults to 0.7 (unseen) / 0.4 (seen) by mode.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Comma-separated source groups; a group is `+`-joined domains whose
    /// queries are combined (first listed anchors the tuples).
    #[arg(long)]
    sources: String,
    /// Comma-separated target groups; a group is a `+`-joined gallery union.
    #[arg(long)]
    targets: String,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Metrics: map, map@k, prec@k, nn, ft, st, e, dcg, ia_map@k.
    #[arg(long, default_value = "map")]
    metrics: String,
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 20.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Prototype source: w2v, n-shot-source or n-shot-target.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    source_domain: String,
    #[arg(long)]
    target_domain: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    runs: usize,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HashArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 64)]
    bits: usize,
    #[arg(long, default_value_t = 50)]
    iterations: usize,
}

fn parse_groups(spec: &str) -> Vec<Vec<String>> {
    spec.split(',')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            g.split('+')
                .map(|d| d.trim().to_string())
                .filter(|d| !d.is_empty())
                .collect()
        })
        .collect()
}

fn parse_metrics(spec: &str) -> Result<Vec<MetricKind>, Error> {
    spec.split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| MetricKind::parse(m.trim()))
        .collect()
}

fn eval_options(args: &EvalArgs) -> Result<EvalOptions, Error> {
    Ok(EvalOptions {
        k: args.k,
        lambda: args.lambda,
        refine: args.refine,
        metrics: parse_metrics(&args.metrics)?,
        seed: args.seed,
        scale_s: args.scale,
    })
}

fn emit_report(rows: &[ReportRow], out: &Option<PathBuf>, binary: bool) -> Result<(), Error> {
    match out {
        Some(path) => {
            write_report_csv(rows, path, binary)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{}", render_report(rows, binary)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let sigma: Result<Vec<f64>, _> = args
                .sigma
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect();
            let cfg = SynthConfig {
                num_categories: args.categories,
                num_domains: args.domains,
                embed_dim: args.dim,
                feature_dim: args.feat_dim,
                samples_per_category: args.per_class,
                noise_sigma: sigma.map_err(|_| {
                    Error::InvalidParameter(format!("bad --sigma `{}`", args.sigma))
                })?,
                condition_number: args.kappa,
                seed: args.seed,
                zero_shot_frac: args.zero_shot_frac,
                nonlinear: args.nonlinear,
            };
            let out = generate(&cfg, &args.out)?;
            println!("{}", out.manifest_path.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = TrainConfig {
                scale_s: args.scale,
                learning_rate: args.lr,
                momentum: args.momentum,
                batch_size: args.batch,
                epochs: args.epochs,
                seed: args.seed,
                hidden_dim: args.hidden,
            };
            let report = cmd_train(&args.manifest, &args.domain, &args.models, &cfg)?;
            println!("initial loss {:.6}", report.epoch_losses[0]);
            for (epoch, loss) in report.epoch_losses.iter().enumerate().skip(1) {
                println!("epoch {epoch} loss {loss:.6}");
            }
            println!("wrote {}", report.model_path.display());
            Ok(())
        }
        Command::Embed(args) => {
            let domains: BTreeSet<String> = args
                .domains
                .split(',')
                .map(|d| d.trim().to_string())
                .filter(|d| !d.is_empty())
                .collect();
            let n = cmd_embed(&args.manifest, &args.models, &domains, &args.out)?;
            println!("wrote {n} embeddings to {}", args.out.display());
            Ok(())
        }
        Command::Search(args) => {
            let targets: BTreeSet<String> = args
                .targets
                .split('+')
                .map(|d| d.trim().to_string())
                .filter(|d| !d.is_empty())
                .collect();
            let ranked = cmd_search(
                &args.manifest,
                &args.models,
                &args.query_id,
                &targets,
                Some(args.k),
                args.refine,
                args.lambda,
            )?;
            println!("rank,item_id,domain,category,score");
            for (rank, item) in ranked.iter().enumerate() {
                println!(
                    "{},{},{},{},{:.6}",
                    rank + 1,
                    item.item_id,
                    item.domain,
                    item.category,
                    item.score
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let opts = eval_options(&args)?;
            let rows = cmd_eval(
                &args.manifest,
                &args.models,
                &parse_groups(&args.sources),
                &parse_groups(&args.targets),
                &opts,
            )?;
            emit_report(&rows, &args.out, false)
        }
        Command::Fewshot(args) => {
            let opts = FewshotOptions {
                mode: FewshotMode::parse(&args.mode)?,
                source_domain: args.source_domain.clone(),
                target_domain: args.target_domain.clone(),
                shots: args.n,
                runs: args.runs,
                lambda: args.lambda,
                seed: args.seed,
            };
            let report = cmd_fewshot(&args.manifest, &args.models, &opts)?;
            println!(
                "mode {} shots {} runs {} accuracy {:.6}",
                report.mode.as_str(),
                report.shots,
                report.runs,
                report.mean_accuracy
            );
            if let Some(out) = &args.out {
                let source_label = match report.mode {
                    FewshotMode::WordVectors => "w2v".to_string(),
                    FewshotMode::NShotSource => args.source_domain.clone(),
                    FewshotMode::NShotTarget => args.target_domain.clone(),
                };
                let row = ReportRow {
                    metric: "accuracy".into(),
                    source_domains: source_label,
                    target_domains: args.target_domain.clone(),
                    k: report.shots.to_string(),
                    value: Some(report.mean_accuracy),
                    queries: report.queries,
                    skipped: 0,
                };
                write_report_csv(&[row], out, false)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Hash(args) => {
            let opts = eval_options(&args.eval)?;
            let rows = cmd_hash(
                &args.eval.manifest,
                &args.eval.models,
                &parse_groups(&args.eval.sources),
                &parse_groups(&args.eval.targets),
                args.bits,
                args.iterations,
                &opts,
            )?;
            emit_report(&rows, &args.eval.out, true)
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        // Missing user-named files are validation problems; anything else
        // that reaches the filesystem layer is internal.
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
