use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prp_core::checkpoint;
use prp_core::data::{
    kcore_filter, load_interactions, read_prepared, split, write_prepared, DatasetStats, InputFormat, SplitPart,
    SplitRatios,
};
use prp_core::eval::{evaluate, MetricRow, DEFAULT_KS};
use prp_core::oracle::{run_all, ComplexityConfig, OracleReport, VerifyOptions};
use prp_core::train::{fit, LossMode, TrainConfig, TrainError, CONFIG_FILE, METRICS_FILE};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "prp", version, about = "Pseudo-ranking collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and split a raw interaction file.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Input layout; `auto` treats `.inter` files as RecBole atomic files.
        #[arg(long, value_enum, default_value_t = Format::Auto)]
        format: Format,
    },
    /// Train a model on a prepared dataset.
    Train {
        /// JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-ranking evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        /// Metrics JSON destination; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the numerical and theoretical checks.
    Verify {
        #[arg(long)]
        strict_timing: bool,
        #[arg(long)]
        skip_timing: bool,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// JSON report destination.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_failure: bool,
    },
    /// Aggregate test metrics of several training runs.
    Report {
        /// Output directories written by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Auto,
    Atomic,
    Plain,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

fn data(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.to_string(),
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => usage(e),
            _ => data(e),
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn prepare(input: &Path, output: &Path, min_core: usize, seed: u64, format: Format) -> Result<(), Failure> {
    if !input.is_file() {
        return Err(usage(format!("input file {} does not exist", input.display())));
    }
    let atomic = match format {
        Format::Atomic => true,
        Format::Plain => false,
        Format::Auto => input.extension().is_some_and(|e| e == "inter"),
    };
    let format = if atomic { InputFormat::atomic() } else { InputFormat::default() };
    let raw = load_interactions(input, format).map_err(data)?;
    let core = kcore_filter(&raw, min_core).map_err(data)?;
    let store = split(&core, SplitRatios::default(), seed).map_err(data)?;
    let stats = DatasetStats {
        n_users: core.n_users(),
        n_items: core.n_items(),
        n_interactions: core.n_interactions(),
        sparsity: core.sparsity(),
        raw_users: raw.n_users(),
        raw_items: raw.n_items(),
        raw_interactions: raw.n_interactions(),
        min_core,
        seed,
        n_train: store.count(SplitPart::Train),
        n_valid: store.count(SplitPart::Valid),
        n_test: store.count(SplitPart::Test),
    };
    write_prepared(output, &store, &stats).map_err(data)?;
    println!(
        "raw: {} users, {} items, {} interactions",
        stats.raw_users, stats.raw_items, stats.raw_interactions
    );
    println!(
        "{min_core}-core: {} users, {} items, {} interactions, sparsity {:.4}%",
        stats.n_users,
        stats.n_items,
        stats.n_interactions,
        100.0 * stats.sparsity
    );
    println!(
        "split: train {} / valid {} / test {} -> {}",
        stats.n_train,
        stats.n_valid,
        stats.n_test,
        output.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    let config = config.with_env_overrides()?;
    config.validate()?;
    Ok(config)
}

fn print_rows(rows: &[MetricRow]) {
    println!("{:<6} {:>4} {:>8} {:>8} {:>8} {:>7}", "split", "K", "HR", "Recall", "NDCG", "users");
    for r in rows {
        println!(
            "{:<6} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>7}",
            r.split, r.k, r.hr, r.recall, r.ndcg, r.n_users
        );
    }
}

fn train(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<(), Failure> {
    let config = load_config(config)?;
    let (store, _) = read_prepared(data_dir).map_err(data)?;
    let mode = match config.loss_mode {
        LossMode::Prp => "prp",
        LossMode::Bpr => "bpr",
    };
    println!(
        "training {mode} on {} users x {} items ({} train pairs), seed {}",
        store.n_users(),
        store.n_items(),
        store.count(SplitPart::Train),
        config.seed
    );
    let result = fit(&config, &store, Some(out))?;
    for h in &result.history {
        let valid = h.valid_ndcg.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  loss {:.5}  rank {:.5}  lp {:.5}  valid ndcg@10 {valid}  {:.1}s",
            h.epoch, h.mean_total_loss, h.mean_rank_loss, h.mean_lp_loss, h.seconds
        );
    }
    println!(
        "best epoch {} of {}{}",
        result.best_epoch,
        result.epochs_run,
        if result.stopped_early { " (early stop)" } else { "" }
    );
    print_rows(&result.metric_rows(config.seed));
    println!("outputs written to {}", out.display());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    split: EvalSplit,
    ks: &[usize],
    output: Option<&Path>,
) -> Result<(), Failure> {
    if ks.contains(&0) {
        return Err(usage("--k values must be >= 1"));
    }
    let (model, manifest) = checkpoint::load(ckpt).map_err(data)?;
    let (store, _) = read_prepared(data_dir).map_err(data)?;
    if (manifest.n_users, manifest.n_items) != (store.n_users(), store.n_items()) {
        return Err(data(format!(
            "checkpoint covers {} users x {} items, dataset has {} x {}",
            manifest.n_users,
            manifest.n_items,
            store.n_users(),
            store.n_items()
        )));
    }
    let part = match split {
        EvalSplit::Valid => SplitPart::Valid,
        EvalSplit::Test => SplitPart::Test,
    };
    let result = evaluate(&model, &store, part, ks).map_err(data)?;
    let rows = result.rows(manifest.seed, manifest.epoch);
    match output {
        Some(path) => {
            write_json(path, &rows)?;
            print_rows(&rows);
        }
        None => println!("{}", serde_json::to_string_pretty(&rows).expect("serializable")),
    }
    Ok(())
}

fn verify(opts: VerifyOptions, report: Option<&Path>) -> Result<(), Failure> {
    let reports = run_all(&opts);
    println!("{:<52} {:>8} {:>12} {:>10}  verdict", "check", "n", "max dev", "tolerance");
    for r in &reports {
        let verdict = match (r.passed, r.advisory) {
            (true, _) => "PASS",
            (false, true) => "WARN (advisory)",
            (false, false) => "FAIL",
        };
        println!(
            "{:<52} {:>8} {:>12.3e} {:>10.1e}  {verdict}",
            r.name, r.instances, r.max_deviation, r.tolerance
        );
        println!("    {}", r.detail);
        if let Some(ce) = r.counterexample.as_ref().filter(|_| !r.passed) {
            println!("    counterexample: {ce}");
        }
    }
    if let Some(path) = report {
        write_json(path, &reports)?;
    }
    let failed: Vec<&OracleReport> = reports.iter().filter(|r| r.blocking_failure()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!(
                "{} check(s) failed: {}",
                failed.len(),
                failed.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join("; ")
            ),
        })
    }
}

#[derive(Debug, Serialize)]
struct ReportRow {
    label: String,
    runs: usize,
    seeds: Vec<u64>,
    k: usize,
    mean_hr: f64,
    mean_recall: f64,
    mean_ndcg: f64,
    std_ndcg: f64,
}

fn run_label(config: &TrainConfig) -> String {
    if config.loss_mode == LossMode::Bpr {
        return "bpr".into();
    }
    let a = config.ablations;
    let mut parts = vec![format!("prp k={} beta={}", config.k, config.beta)];
    for (on, name) in [(a.no_ranker, "no_ranker"), (a.no_lp, "no_lp"), (a.no_confidence, "no_confidence")] {
        if on {
            parts.push(name.into());
        }
    }
    parts.join(" ")
}

fn report(runs: &[PathBuf], k: usize, output: Option<&Path>) -> Result<(), Failure> {
    let mut groups: Vec<(String, Vec<(u64, MetricRow)>)> = Vec::new();
    for dir in runs {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| data(format!("{}: {e}", p.display())))
        };
        let config = TrainConfig::from_json(&read(CONFIG_FILE)?).map_err(data)?;
        let rows: Vec<MetricRow> = serde_json::from_str(&read(METRICS_FILE)?)
            .map_err(|e| data(format!("{}: {e}", dir.join(METRICS_FILE).display())))?;
        let row = rows
            .into_iter()
            .find(|r| r.split == "test" && r.k == k)
            .ok_or_else(|| data(format!("{}: no test row for K={k}", dir.display())))?;
        let label = run_label(&config);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push((config.seed, row)),
            None => groups.push((label, vec![(config.seed, row)])),
        }
    }
    let table: Vec<ReportRow> = groups
        .into_iter()
        .map(|(label, v)| {
            let n = v.len() as f64;
            let mean = |f: fn(&MetricRow) -> f64| v.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
            let mean_ndcg = mean(|r| r.ndcg);
            let var = v.iter().map(|(_, r)| (r.ndcg - mean_ndcg).powi(2)).sum::<f64>() / n;
            ReportRow {
                label,
                runs: v.len(),
                seeds: v.iter().map(|(s, _)| *s).collect(),
                k,
                mean_hr: mean(|r| r.hr),
                mean_recall: mean(|r| r.recall),
                mean_ndcg,
                std_ndcg: var.sqrt(),
            }
        })
        .collect();
    println!(
        "{:<40} {:>4} {:>8} {:>8} {:>8} {:>8}",
        "run",
        "n",
        format!("HR@{k}"),
        format!("R@{k}"),
        format!("NDCG@{k}"),
        "std"
    );
    for r in &table {
        println!(
            "{:<40} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.label, r.runs, r.mean_hr, r.mean_recall, r.mean_ndcg, r.std_ndcg
        );
    }
    if let Some(path) = output {
        write_json(path, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare {
            input,
            output,
            min_core,
            seed,
            format,
        } => prepare(&input, &output, min_core, seed, format),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            k,
            output,
        } => eval(&checkpoint, &data, split, &k, output.as_deref()),
        Command::Verify {
            strict_timing,
            skip_timing,
            seed,
            trials,
            report,
            inject_failure,
        } => {
            if trials == 0 {
                return Err(usage("--trials must be >= 1"));
            }
            let opts = VerifyOptions {
                seed,
                trials,
                strict_timing,
                complexity: (!skip_timing).then(ComplexityConfig::default),
                inject_failure,
            };
            verify(opts, report.as_deref())
        }
        Command::Report { runs, k, output } => report(&runs, k, output.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
