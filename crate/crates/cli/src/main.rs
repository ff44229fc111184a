//! `tweetbench`: prepare data, train and evaluate models, render result
//! tables and run the property suite.
//!
//! Results go to stdout and diagnostics to stderr. Exit codes: 0 success,
//! 1 failed property or assertion, 2 usage or input error, 3 training
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tweetbench_core::corpus::{
    class_distribution_named, duplicate_ids, load_dataset_with, NormalizeOptions, Subtask, TextField,
};
use tweetbench_core::harness::{
    self, binary_vs_multiclass_study, compare_runs, evaluate_run, latest_run, to_pretty_json, HarnessError,
    LoadedConfig, RunResult, StudyOptions,
};
use tweetbench_core::metrics::{render_table, Summary};
use tweetbench_core::reference::render_table2;
use tweetbench_core::selftest::{run_selftest, SelftestOptions};
use tweetbench_core::tokenizer::build_vocab;

#[derive(Parser, Debug)]
#[command(name = "tweetbench", version, about = "Tweet sentiment benchmark toolkit")]
struct Cli {
    /// Seed for every stochastic step; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON). `train` runs it; other commands take their
    /// defaults (subtask, data paths, tokenizer settings, output root) from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a labelled TSV file and summarize its class distribution.
    Prepare(PrepareArgs),
    /// Learn a subword vocabulary from a labelled TSV file.
    BuildVocab(BuildVocabArgs),
    /// Run the experiment described by --config and print its run directory.
    Train,
    /// Re-evaluate a finished run on a labelled TSV file.
    Evaluate(EvaluateArgs),
    /// Render finished runs as an accuracy / macro P / R / F1 table.
    Report(ReportArgs),
    /// Compare binary and five-class accuracy on matched data.
    Study(StudyArgs),
    /// Run the property suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    subtask: Option<Subtask>,
    /// Normalized TSV; the distribution summary goes next to it as
    /// `<out>.summary.json`.
    #[arg(long)]
    out: PathBuf,
    /// Keep letter case.
    #[arg(long)]
    keep_case: bool,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    subtask: Option<Subtask>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_freq: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory; defaults to the latest run under the output root.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Labelled TSV; defaults to the run's test file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write `id<TAB>gold<TAB>pred` here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Replay a bundled reference table (only `table2`).
    #[arg(long, value_parser = ["table2"])]
    reference: Option<String>,
    /// Append rows of differences against the first row.
    #[arg(long)]
    deltas: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Give every tweet the same label.
    #[arg(long)]
    collapse: bool,
    /// Only the naive Bayes baseline.
    #[arg(long)]
    nb_only: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Skip checks that train a model.
    #[arg(long)]
    quick: bool,
    #[arg(long, hide = true)]
    mutate_grad: bool,
}

#[derive(Debug)]
enum Failure {
    Assertion(String),
    Input(String),
    Training(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Assertion(_) => 1,
            Self::Input(_) => 2,
            Self::Training(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Assertion(m) | Self::Input(m) | Self::Training(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_training_failure() {
            Self::Training(e.to_string())
        } else {
            Self::Input(e.to_string())
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

type Outcome = Result<(), Failure>;

struct Context {
    seed: Option<u64>,
    config: Option<LoadedConfig>,
}

impl Context {
    fn require_config(&self, what: &str) -> Result<&LoadedConfig, Failure> {
        self.config
            .as_ref()
            .ok_or_else(|| Failure::Input(format!("{what} requires --config")))
    }

    fn subtask(&self, flag: Option<Subtask>) -> Result<Subtask, Failure> {
        flag.or(self.config.as_ref().map(|c| c.config.subtask))
            .ok_or_else(|| Failure::Input("--subtask is required without --config".into()))
    }

    fn train_file(&self, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
        flag.or_else(|| self.config.as_ref().map(|c| c.resolve(&c.config.data.train)))
            .ok_or_else(|| Failure::Input("--in is required without --config".into()))
    }

    fn output_root(&self) -> PathBuf {
        match &self.config {
            Some(c) => c.output_root(),
            None => std::env::var_os(harness::OUTPUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(harness::DEFAULT_OUTPUT)),
        }
    }

    fn seed(&self, default: u64) -> u64 {
        self.seed
            .or(self.config.as_ref().map(|c| c.config.seed))
            .unwrap_or(default)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn prepare(ctx: &Context, args: PrepareArgs) -> Outcome {
    let subtask = ctx.subtask(args.subtask)?;
    let path = ctx.train_file(args.input)?;
    let lowercase = !args.keep_case
        && ctx
            .config
            .as_ref()
            .map(|c| c.config.tokenizer.lowercase)
            .unwrap_or(true);
    let ds = load_dataset_with(&path, subtask, &NormalizeOptions { lowercase }).map_err(input)?;
    let mut buf = Vec::new();
    ds.write_tsv(&mut buf, TextField::Normalized).map_err(input)?;
    write(&args.out, &String::from_utf8(buf).expect("utf-8"))?;
    let summary = json!({
        "source": path.display().to_string(),
        "subtask": subtask,
        "total": ds.len(),
        "skipped_unavailable": ds.skipped_unavailable,
        "duplicate_ids": duplicate_ids(&ds),
        "distribution": class_distribution_named(&ds),
    });
    let text = to_pretty_json(&summary);
    write(&with_suffix(&args.out, ".summary.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn build_vocab_cmd(ctx: &Context, args: BuildVocabArgs) -> Outcome {
    let subtask = ctx.subtask(args.subtask)?;
    let path = ctx.train_file(args.input)?;
    let settings = ctx
        .config
        .as_ref()
        .map(|c| c.config.tokenizer.clone())
        .unwrap_or_default();
    let ds = load_dataset_with(
        &path,
        subtask,
        &NormalizeOptions {
            lowercase: settings.lowercase,
        },
    )
    .map_err(input)?;
    let corpus: Vec<&str> = ds.examples.iter().map(|e| e.norm_text.as_str()).collect();
    let vocab = build_vocab(
        &corpus,
        args.vocab_size.unwrap_or(settings.vocab_size),
        args.min_freq.unwrap_or(settings.min_freq),
    )
    .map_err(input)?;
    vocab.save(&args.out).map_err(input)?;
    println!("{}\t{}", args.out.display(), vocab.len());
    Ok(())
}

fn train(ctx: &Context) -> Outcome {
    let mut loaded = ctx.require_config("train")?.clone();
    if let Some(seed) = ctx.seed {
        loaded.config.seed = seed;
    }
    let run = harness::run_experiment(&loaded)?;
    log::info!(
        "{} on {}: accuracy {:.4}",
        run.report.name,
        run.report.split,
        run.report.metrics.accuracy
    );
    println!("{}", run.run_dir.display());
    Ok(())
}

fn evaluate(ctx: &Context, args: EvaluateArgs) -> Outcome {
    let run_dir = match args.run {
        Some(r) => r,
        None => latest_run(&ctx.output_root())?,
    };
    let data = match args.data {
        Some(d) => d,
        None => {
            let run = RunResult::load(&run_dir)?;
            match &ctx.config {
                Some(c) => c.resolve(&run.config.data.test),
                None => run.config.data.test.clone(),
            }
        }
    };
    let (predictions, report) = evaluate_run(&run_dir, &data)?;
    if let Some(p) = args.predictions {
        write(&p, &predictions.to_tsv(report_scale(&run_dir)?))?;
    }
    print!("{}", to_pretty_json(&report));
    Ok(())
}

fn report_scale(run_dir: &Path) -> Result<tweetbench_core::SentimentScale, Failure> {
    Ok(RunResult::load(run_dir)?.config.subtask.scale())
}

fn report(_: &Context, args: ReportArgs) -> Outcome {
    if args.runs.is_empty() && args.reference.is_none() {
        return Err(Failure::Input(
            "nothing to report: pass --runs DIR... or --reference table2\n\nUsage: tweetbench report --runs <DIR>... [--deltas]".into(),
        ));
    }
    if args.reference.is_some() {
        print!("{}", render_table2(args.deltas));
    }
    if args.runs.is_empty() {
        return Ok(());
    }
    let runs = args.runs.iter().map(RunResult::load).collect::<Result<Vec<_>, _>>()?;
    let (rows, deltas, split) = if runs.len() == 1 {
        let r = &runs[0];
        (
            vec![(r.report.name.clone(), Summary::from(&r.report.metrics))],
            Vec::new(),
            r.report.split.clone(),
        )
    } else {
        let cmp = compare_runs(&runs)?;
        (cmp.rows, cmp.deltas, cmp.split)
    };
    if args.json {
        let body = json!({
            "split": split,
            "rows": rows.iter().map(|(n, s)| json!({"model": n, "metrics": s})).collect::<Vec<_>>(),
            "deltas": deltas.iter().map(|(n, s)| json!({"model": n, "metrics": s})).collect::<Vec<_>>(),
        });
        print!("{}", to_pretty_json(&body));
        return Ok(());
    }
    if args.reference.is_some() {
        println!();
    }
    println!("split: {split}");
    let shown: Vec<&(String, Summary)> = if args.deltas {
        rows.iter().chain(&deltas).collect()
    } else {
        rows.iter().collect()
    };
    print!("{}", render_table(shown.iter().map(|(n, s)| (n.as_str(), *s))));
    Ok(())
}

fn study(ctx: &Context, args: StudyArgs) -> Outcome {
    let mut opts = StudyOptions {
        collapse: args.collapse,
        encoder: !args.nb_only,
        ..StudyOptions::default()
    };
    if let Some(e) = args.epochs {
        opts.train.epochs = e;
    }
    let report = binary_vs_multiclass_study(ctx.seed(0), &opts)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion(
            "binary accuracy fell below five-class accuracy".into(),
        ))
    }
}

fn selftest(ctx: &Context, args: SelftestArgs) -> Outcome {
    let report = run_selftest(&SelftestOptions {
        quick: args.quick,
        seed: ctx.seed(0),
        mutate_grad: args.mutate_grad,
    });
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion(format!(
            "failed properties: {}",
            report.failed().join(", ")
        )))
    }
}

fn run(cli: Cli) -> Outcome {
    let config = cli.config.as_deref().map(LoadedConfig::load).transpose()?;
    let ctx = Context { seed: cli.seed, config };
    match cli.command {
        Command::Prepare(a) => prepare(&ctx, a),
        Command::BuildVocab(a) => build_vocab_cmd(&ctx, a),
        Command::Train => train(&ctx),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Study(a) => study(&ctx, a),
        Command::Selftest(a) => selftest(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
