//! `facloc`: generate synthetic data, train embeddings with the clustering
//! loss or a baseline, evaluate checkpoints and trace inference.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facloc::data::{generate_gaussian, sample_batch, split_by_class, Dataset};
use facloc::embedding::pairwise_distances;
use facloc::facility::oracle_score;
use facloc::inference::{brute_force_inference, greedy_inference, pam_refine};
use facloc::metrics::margin;
use facloc::model::forward;
use facloc::optim::{evaluate, train_with, EvalMetrics, LossKind, TrainConfig};
use facloc::{EmbeddingBatch, Error, MlpParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "facloc",
    version,
    about = "Deep metric learning with a facility-location clustering loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-class dataset as CSV plus a manifest.
    Generate(GenerateArgs),
    /// Train one or more losses and print a comparison table.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out classes of a dataset.
    Evaluate(EvaluateArgs),
    /// Print greedy and refinement traces for one sampled batch.
    Inspect(InspectArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = positive)]
    classes: usize,
    #[arg(long, value_parser = positive)]
    per_class: usize,
    #[arg(long, value_parser = positive)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; the manifest goes to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
}

/// Comma-separated integers; empty allowed.
#[derive(Clone, Debug)]
struct List(Vec<usize>);

fn parse_list(s: &str) -> Result<List, String> {
    if s.trim().is_empty() {
        return Ok(List(Vec::new()));
    }
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(List)
}

#[derive(Clone, Debug)]
struct Losses(Vec<LossKind>);

fn parse_losses(s: &str) -> Result<Losses, String> {
    s.split(',')
        .map(|v| v.trim().parse::<LossKind>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(Losses)
}

/// A count, or a keyword meaning "pick automatically".
#[derive(Clone, Copy, Debug)]
struct Auto(Option<usize>);

fn parse_interval(s: &str) -> Result<Auto, String> {
    match s {
        "epoch" => Ok(Auto(None)),
        v => v
            .parse::<usize>()
            .map(|n| Auto(Some(n)))
            .map_err(|e| e.to_string()),
    }
}

fn parse_threads(s: &str) -> Result<Auto, String> {
    match s {
        "default" => Ok(Auto(None)),
        v => v
            .parse::<usize>()
            .map(|n| Auto(Some(n)))
            .map_err(|e| e.to_string()),
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory; each loss writes to `<out>/<loss>/`.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of cluster, triplet, lifted, npairs.
    #[arg(long, default_value = "cluster", value_parser = parse_losses)]
    loss: Losses,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    class_ratio: f64,
    /// Hidden layer widths, comma-separated (empty for a linear map).
    #[arg(long, default_value = "32,32", value_parser = parse_list)]
    hidden: List,
    #[arg(long, default_value_t = 16)]
    embedding_dim: usize,
    #[arg(long, alias = "lr", default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    rms_decay: f64,
    #[arg(long, default_value_t = 1e-8)]
    rms_eps: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma0: f64,
    #[arg(long, default_value_t = 0.94)]
    gamma_decay_rate: f64,
    /// Iterations per decay step, or `epoch`.
    #[arg(long, default_value = "epoch", value_parser = parse_interval)]
    gamma_decay_interval: Auto,
    #[arg(long, default_value_t = 5)]
    refine_iters: usize,
    /// Margin for triplet and lifted losses (default 0.2 and 1.0).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.002)]
    lambda: f64,
    #[arg(long, alias = "max-iterations", default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    eval_interval: usize,
    #[arg(long, alias = "eval-ks", default_value = "1,2,4,8", value_parser = parse_list)]
    k: List,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads, or `default`.
    #[arg(long, default_value = "default", value_parser = parse_threads)]
    threads: Auto,
    /// Fill `elapsed_ms` in the metrics (makes the stream non-reproducible).
    #[arg(long)]
    record_wall_clock: bool,
}

impl TrainArgs {
    fn config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            batch_size: self.batch_size,
            class_ratio: self.class_ratio,
            hidden: self.hidden.0.clone(),
            embedding_dim: self.embedding_dim,
            learning_rate: self.learning_rate,
            rms_decay: self.rms_decay,
            rms_eps: self.rms_eps,
            gamma0: self.gamma0,
            gamma_decay_rate: self.gamma_decay_rate,
            gamma_decay_interval: self.gamma_decay_interval.0,
            refine_iters: self.refine_iters,
            alpha: self.alpha,
            lambda: self.lambda,
            max_iterations: self.iterations,
            eval_interval: self.eval_interval,
            eval_ks: self.k.0.clone(),
            split_fraction: self.split_fraction,
            seed: self.seed,
            threads: self.threads.0,
            record_wall_clock: self.record_wall_clock,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split seed; use the training seed to score the same held-out classes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, default_value = "1,2,4,8", value_parser = parse_list)]
    k: List,
    #[arg(long, default_value_t = 5)]
    refine_iters: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Embed with this checkpoint; raw features when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    class_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    refine_iters: usize,
    /// Also solve the inner maximization exhaustively.
    #[arg(long)]
    brute_force: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    out: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_context<T>(r: std::io::Result<T>, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load_csv(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn generate(args: &GenerateArgs) -> CmdResult {
    let ds = generate_gaussian(
        args.classes,
        args.per_class,
        args.dim,
        args.center_scale,
        args.std,
        args.seed,
    )?;
    io_context(fs::write(&args.out, ds.to_csv()), &args.out)?;
    let mut m = Manifest::new("generate");
    m.push("classes", args.classes);
    m.push("per_class", args.per_class);
    m.push("dim", args.dim);
    m.push("std", format!("{:?}", args.std));
    m.push("center_scale", format!("{:?}", args.center_scale));
    m.push("seed", args.seed);
    m.push("out", args.out.display());
    m.push("artifact.rows", ds.len());
    let path = manifest_path(&args.out);
    io_context(m.write(&path), &path)?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Rows: one per method. Values are percentages, as in published tables.
fn print_table(rows: &[(LossKind, EvalMetrics)], ks: &[usize]) {
    let mut header = format!("{:<18}{:>8}", "Method", "NMI");
    for k in ks {
        header.push_str(&format!("{:>8}", format!("R@{k}")));
    }
    println!("{header}");
    for (kind, m) in rows {
        let mut line = format!("{:<18}{:>8.2}", kind.display_name(), 100.0 * m.nmi);
        for k in ks {
            match m.recall_at.get(k) {
                Some(r) => line.push_str(&format!("{:>8.2}", 100.0 * r)),
                None => line.push_str(&format!("{:>8}", "-")),
            }
        }
        println!("{line}");
    }
}

fn train_cmd(args: &TrainArgs) -> CmdResult {
    let ds = load_dataset(&args.data)?;
    for kind in &args.loss.0 {
        args.config(*kind).validate()?;
    }
    let mut rows = Vec::new();
    for &kind in &args.loss.0 {
        let config = args.config(kind);
        let dir = args.out.join(kind.to_string());
        io_context(fs::create_dir_all(&dir), &dir)?;
        let metrics_path = dir.join("metrics.jsonl");
        let mut sink = BufWriter::new(io_context(File::create(&metrics_path), &metrics_path)?);
        let outcome = train_with(&config, &ds, |record| {
            writeln!(sink, "{}", record.to_json_line())?;
            Ok(())
        })?;
        io_context(sink.flush(), &metrics_path)?;
        let checkpoint_path = dir.join("checkpoint.txt");
        outcome.params.save(&checkpoint_path)?;

        let (x, y) = ds.subset(&outcome.split.test_classes);
        let metrics = evaluate(
            &outcome.params,
            &x,
            &y,
            &config.eval_ks,
            config.refine_iters,
        )?;

        let mut m = Manifest::new("train");
        m.push("data", args.data.display());
        m.push("out", args.out.display());
        for (k, v) in config.key_values() {
            m.push(k, v);
        }
        m.push("artifact.checkpoint", checkpoint_path.display());
        m.push("artifact.metrics", metrics_path.display());
        m.push("artifact.train_classes", join(&outcome.split.train_classes));
        m.push("artifact.test_classes", join(&outcome.split.test_classes));
        let manifest_path = dir.join("manifest.txt");
        io_context(m.write(&manifest_path), &manifest_path)?;
        rows.push((kind, metrics));
    }
    print_table(&rows, &args.k.0);
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn load_checkpoint(path: &Path) -> Result<MlpParams, Failure> {
    MlpParams::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn check_input_dim(params: &MlpParams, ds: &Dataset) -> CmdResult {
    if params.input_dim() != ds.input_dim() {
        return Err(Failure::Runtime(format!(
            "checkpoint expects {} input features, dataset has {}",
            params.input_dim(),
            ds.input_dim()
        )));
    }
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> CmdResult {
    if args.k.0.contains(&0) {
        return Err(Failure::Usage("recall K values must be positive".into()));
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    check_input_dim(&params, &ds)?;
    let split = split_by_class(&ds, args.split_fraction, args.seed)?;
    let (x, y) = ds.subset(&split.test_classes);
    let metrics = evaluate(&params, &x, &y, &args.k.0, args.refine_iters)?;
    println!("held-out classes: {}", join(&split.test_classes));
    let mut header = format!("{:>8}", "NMI");
    let mut line = format!("{:>8.2}", 100.0 * metrics.nmi);
    for k in &args.k.0 {
        header.push_str(&format!("{:>8}", format!("R@{k}")));
        match metrics.recall_at.get(k) {
            Some(r) => line.push_str(&format!("{:>8.2}", 100.0 * r)),
            None => line.push_str(&format!("{:>8}", "-")),
        }
    }
    println!("{header}\n{line}");
    Ok(())
}

fn inspect_cmd(args: &InspectArgs) -> CmdResult {
    let ds = load_dataset(&args.data)?;
    let classes = ds.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (x, y) = sample_batch(&ds, &classes, args.batch_size, args.class_ratio, &mut rng)?;
    let e = match &args.checkpoint {
        Some(path) => {
            let params = load_checkpoint(path)?;
            check_input_dim(&params, &ds)?;
            forward(&params, &x)?.0
        }
        None => EmbeddingBatch::new(x)?,
    };
    let d = pairwise_distances(&e)?;
    let gamma = args.gamma;

    println!(
        "batch: {} points, {} classes, gamma {gamma}",
        y.len(),
        y.num_classes()
    );
    println!("labels: {}", join(y.as_slice()));
    let greedy = greedy_inference(&d, &y, gamma)?;
    println!("\ngreedy selection");
    println!("{:>5} {:>7} {:>14} {:>14}", "step", "point", "A(S)", "gain");
    for (step, (&p, &a)) in greedy
        .medoids
        .as_slice()
        .iter()
        .zip(&greedy.trace)
        .enumerate()
    {
        let gain = if step == 0 {
            "-".to_string()
        } else {
            format!("{:.6}", a - greedy.trace[step - 1])
        };
        println!("{:>5} {:>7} {:>14.6} {:>14}", step + 1, p, a, gain);
    }

    let refined = pam_refine(&d, &y, &greedy.medoids, gamma, args.refine_iters)?;
    println!("\nrefinement");
    println!("{:>5} {:>14}", "sweep", "A(S)");
    println!("{:>5} {:>14.6}", 0, greedy.objective);
    for (t, a) in refined.trace.iter().enumerate() {
        println!("{:>5} {:>14.6}", t + 1, a);
    }

    let (oracle, oracle_medoids) = oracle_score(&d, &y)?;
    println!("\nmedoids: {}", join(refined.medoids.as_slice()));
    println!("oracle medoids: {}", join(oracle_medoids.as_slice()));
    println!("A(S) = {:.6}", refined.objective);
    println!("oracle score = {oracle:.6}");
    println!("hinge argument = {:.6}", refined.objective - oracle);
    println!("margin = {:.6}", margin(&refined.assignment, &y)?);

    if args.brute_force {
        let exact =
            brute_force_inference(&d, &y, gamma).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("\nexhaustive optimum");
        println!("medoids: {}", join(exact.medoids.as_slice()));
        println!("A(S) = {:.6}", exact.objective);
        println!(
            "gap to refined = {:.6}",
            exact.objective - refined.objective
        );
    }
    Ok(())
}

fn replay_cmd(args: &ReplayArgs) -> CmdResult {
    let m = Manifest::read(&args.manifest).map_err(Failure::Runtime)?;
    let argv = m
        .replay_args(args.out.as_deref())
        .map_err(Failure::Runtime)?;
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Failure::Runtime(format!("manifest does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Runtime("manifest records a replay".into()));
    }
    run(&cli.command)
}

fn run(command: &Command) -> CmdResult {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Replay(a) => replay_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
