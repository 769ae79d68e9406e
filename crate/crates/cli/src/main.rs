//! `cddrec`: prepare a corpus, train, evaluate and sweep diffusion settings.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cddrec::checkpoint;
use cddrec::config::{parse_kv, TrainConfig, REQUIRED_KEYS};
use cddrec::corpus::{
    build_sequences, corpus_hash, load_interactions, read_corpus, write_corpus, EvalSplit, InputFormat,
    InteractionSequence,
};
use cddrec::eval::{evaluate, EvalOptions, TieBreak, DEFAULT_TOP_N};
use cddrec::trainer::{TrainReport, Trainer};

const CORPUS_DIR: &str = "corpus";
const PREPARE_FILE: &str = "prepare.txt";
const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";
const EPOCH_LOG: &str = "epochs.log";
const LOSS_LOG: &str = "losses.tsv";
const REPORT_FILE: &str = "train_report.txt";
const HASH_KEY: &str = "# corpus_sha256 = ";

#[derive(Parser)]
#[command(name = "cddrec", version, about = "Conditional denoising diffusion sequential recommender")]
struct Cli {
    /// Working directory holding the corpus cache and run directories.
    #[arg(long, global = true, env = "CDDREC_WORKDIR", default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw interactions and cache the per-user sequences.
    Prepare {
        /// `user, item, timestamp` rows (or `user, item, rating, timestamp`).
        #[arg(long)]
        input: PathBuf,
        /// Field delimiter; inferred from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        /// Default `max_len` for runs on this corpus.
        #[arg(long, default_value_t = 20)]
        max_len: usize,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory name under `<workdir>/runs`.
        #[arg(long)]
        run: Option<String>,
        /// Continue from the run's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Replace an existing run.
        #[arg(long, conflicts_with = "resume")]
        force: bool,
    },
    /// Rank the full catalog with a trained run and write metric files.
    Evaluate {
        /// Run directory (or a path inside it, such as its checkpoint).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        #[arg(long, value_enum, default_value = "optimistic")]
        tie: Tie,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
        /// Denoising step used for scoring; defaults to the run's `t_infer`.
        #[arg(long)]
        t_infer: Option<usize>,
        /// Count validation targets as training occurrences for frequency buckets.
        #[arg(long)]
        count_valid: bool,
    },
    /// Train and evaluate every (steps, beta_max) pair.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated diffusion step counts.
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<usize>,
        /// Comma-separated maximum noise levels.
        #[arg(long, value_delimiter = ',', required = true)]
        beta_max: Vec<f64>,
        /// Sweep directory name under `<workdir>/sweeps`.
        #[arg(long, default_value = "sweep")]
        name: String,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` file; must set lambda and tau.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set d=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tie {
    Optimistic,
    Pessimistic,
    Mid,
}

impl From<Tie> for TieBreak {
    fn from(t: Tie) -> Self {
        match t {
            Tie::Optimistic => TieBreak::Optimistic,
            Tie::Pessimistic => TieBreak::Pessimistic,
            Tie::Mid => TieBreak::Mid,
        }
    }
}

fn corpus_dir(workdir: &Path) -> PathBuf {
    workdir.join(CORPUS_DIR)
}

fn prepare(workdir: &Path, input: &Path, format: Option<Format>, min_count: usize, max_len: usize) -> Result<()> {
    if max_len == 0 {
        bail!("max_len must be positive");
    }
    let format = match format {
        Some(Format::Tsv) => InputFormat::Tsv,
        Some(Format::Csv) => InputFormat::Csv,
        None => InputFormat::from_path(input),
    };
    let raw = load_interactions(input, format)?;
    let (seqs, catalog) = build_sequences(&raw, min_count)?;
    let dir = corpus_dir(workdir);
    let stats = write_corpus(&dir, &seqs, &catalog)?;
    fs::write(dir.join(PREPARE_FILE), format!("min_count = {min_count}\nmax_len = {max_len}\n"))?;
    log::info!("{stats}");
    log::info!("corpus written to {}", dir.display());
    Ok(())
}

/// Defaults, then the prepared corpus's `max_len`, then the config file,
/// then flags.
fn resolve_config(args: &ConfigArgs, workdir: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut given: Vec<String> = Vec::new();
    if let Ok(text) = fs::read_to_string(corpus_dir(workdir).join(PREPARE_FILE)) {
        if let Some(v) = parse_kv(&text)?.get("max_len") {
            cfg.set("max_len", v)?;
        }
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let kv = parse_kv(&text).with_context(|| format!("parsing {}", path.display()))?;
        for key in REQUIRED_KEYS {
            if !kv.contains_key(*key) {
                bail!("{}: missing required key {key:?}", path.display());
            }
        }
        for (k, v) in &kv {
            cfg.set(k, v).with_context(|| format!("{}", path.display()))?;
            given.push(k.clone());
        }
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    for s in &args.overrides {
        let (k, v) = s.split_once('=').with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let named = [
        ("variant", args.variant.clone()),
        ("encoder", args.encoder.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
    ];
    flags.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    for (k, v) in flags {
        cfg.set(&k, &v)?;
        given.push(k);
    }
    for key in REQUIRED_KEYS {
        if !given.iter().any(|g| g == key) {
            bail!("{key} must be set in the config file or with --{key}");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(workdir: &Path) -> Result<(Vec<InteractionSequence>, usize, String)> {
    let dir = corpus_dir(workdir);
    let (seqs, catalog) =
        read_corpus(&dir).with_context(|| format!("no prepared corpus in {} (run `prepare` first)", dir.display()))?;
    Ok((seqs, catalog.item_count(), corpus_hash(&dir)?))
}

fn append(path: &Path, line: &str) -> cddrec::Result<()> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| cddrec::Error::io(path, e))
}

/// Trains `cfg` into `run_dir`, checkpointing after every epoch.
fn train_run(
    cfg: TrainConfig,
    seqs: &[InteractionSequence],
    items: usize,
    hash: &str,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainReport> {
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let trainer = if resume {
        let mut state = checkpoint::load(&ckpt)?;
        // Only the epoch budget may change when resuming.
        if (TrainConfig { max_epochs: cfg.max_epochs, ..state.config.clone() }) != cfg {
            bail!("configuration differs from the checkpoint in {}", run_dir.display());
        }
        let stored = fs::read_to_string(run_dir.join(CONFIG_FILE))?;
        if !stored.contains(&format!("{HASH_KEY}{hash}")) {
            bail!("corpus changed since {} was trained", run_dir.display());
        }
        state.config.max_epochs = cfg.max_epochs;
        fs::write(run_dir.join(CONFIG_FILE), format!("{HASH_KEY}{hash}\n{}", cfg.to_kv()))?;
        log::info!("resuming after epoch {}", state.epoch);
        Trainer::from_state(state, seqs)?
    } else {
        fs::create_dir_all(run_dir)?;
        fs::write(run_dir.join(CONFIG_FILE), format!("{HASH_KEY}{hash}\n{}", cfg.to_kv()))?;
        fs::write(run_dir.join(EPOCH_LOG), "")?;
        fs::write(run_dir.join(LOSS_LOG), "epoch\tt\treconstruction\tin_view\tcross_view\n")?;
        Trainer::new(cfg, seqs, items)?
    };
    let (_, report) = trainer.fit(|log, tr| {
        append(
            &run_dir.join(EPOCH_LOG),
            &format!(
                "epoch {} batches {} loss {:.6} valid_mrr {:.6}{}",
                log.epoch,
                log.batches,
                log.mean_total,
                log.valid_mrr,
                if log.improved { " best" } else { "" }
            ),
        )?;
        for s in &log.per_step {
            append(
                &run_dir.join(LOSS_LOG),
                &format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}", log.epoch, s.t, s.cd, s.in_view, s.cross_view),
            )?;
        }
        checkpoint::save(&ckpt, &tr.state())
    })?;
    fs::write(
        run_dir.join(REPORT_FILE),
        format!(
            "epochs_run = {}\nbest_epoch = {}\nbest_valid_mrr = {:.6}\nwall_time_secs = {:.1}\n",
            report.epochs_run,
            report.best_epoch,
            report.best_valid_metric,
            report.wall_time.as_secs_f64()
        ),
    )?;
    log::info!(
        "trained {} epochs, best validation MRR {:.4} at epoch {}",
        report.epochs_run,
        report.best_valid_metric,
        report.best_epoch
    );
    Ok(report)
}

fn train(workdir: &Path, args: &ConfigArgs, run: Option<String>, resume: bool, force: bool) -> Result<()> {
    let cfg = resolve_config(args, workdir)?;
    let (seqs, items, hash) = load_corpus(workdir)?;
    let name = run.unwrap_or_else(|| format!("{}-{}-seed{}", cfg.variant, cfg.encoder, cfg.seed));
    let run_dir = workdir.join("runs").join(name);
    if run_dir.join(CHECKPOINT_FILE).exists() && !resume {
        if !force {
            bail!("{} already has a checkpoint; pass --resume or --force", run_dir.display());
        }
        fs::remove_dir_all(&run_dir)?;
    }
    train_run(cfg, &seqs, items, &hash, &run_dir, resume)?;
    log::info!("run directory {}", run_dir.display());
    Ok(())
}

fn run_dir_of(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn evaluate_run(
    workdir: &Path,
    run_dir: &Path,
    split: EvalSplit,
    opts: EvalOptions,
) -> Result<cddrec::eval::MetricsReport> {
    let (model, _) = checkpoint::load_model(&run_dir.join(CHECKPOINT_FILE))?;
    let (seqs, _, hash) = load_corpus(workdir)?;
    let stored = fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap_or_default();
    if !stored.contains(&format!("{HASH_KEY}{hash}")) {
        bail!("corpus in {} does not match the one {} was trained on", workdir.display(), run_dir.display());
    }
    let report = evaluate(&model, &seqs, split, &opts)?;
    report.write_files(run_dir)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    workdir: &Path,
    run: &Path,
    split: EvalSplit,
    tie: Tie,
    top_n: usize,
    t_infer: Option<usize>,
    count_valid: bool,
) -> Result<()> {
    let run_dir = run_dir_of(run);
    let state = checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
    let opts = EvalOptions {
        top_n,
        tie: tie.into(),
        t_infer: t_infer.unwrap_or(state.config.t_infer),
        count_valid,
        ..EvalOptions::default()
    };
    let report = evaluate_run(workdir, &run_dir, split, opts)?;
    log::info!("{} MRR {:.4}; files written to {}", split.name(), report.metrics.mrr, run_dir.display());
    Ok(())
}

struct Cell {
    steps: usize,
    beta_max: f64,
    outcome: std::result::Result<(f64, f64), String>,
}

fn sweep(workdir: &Path, args: &ConfigArgs, steps: &[usize], betas: &[f64], name: &str, split: EvalSplit) -> Result<()> {
    if steps.is_empty() || betas.is_empty() {
        bail!("the sweep grid is empty");
    }
    let base = resolve_config(args, workdir)?;
    let (seqs, items, hash) = load_corpus(workdir)?;
    let dir = workdir.join("sweeps").join(name);
    fs::create_dir_all(&dir)?;
    let mut cells = Vec::new();
    for &t in steps {
        for &b in betas {
            let run_dir = dir.join(format!("T{t}_beta{b}"));
            log::info!("sweep cell steps={t} beta_max={b}");
            let outcome = (|| -> Result<(f64, f64)> {
                let mut cfg = base.clone();
                cfg.set("steps", &t.to_string())?;
                cfg.set("beta_max", &b.to_string())?;
                cfg.validate()?;
                if run_dir.exists() {
                    fs::remove_dir_all(&run_dir)?;
                }
                let report = train_run(cfg.clone(), &seqs, items, &hash, &run_dir, false)?;
                let opts = EvalOptions { t_infer: cfg.t_infer, ..EvalOptions::default() };
                let metrics = evaluate_run(workdir, &run_dir, split, opts)?;
                Ok((report.best_valid_metric, metrics.metrics.mrr))
            })();
            if let Err(e) = &outcome {
                log::error!("cell steps={t} beta_max={b} failed: {e:#}");
            }
            cells.push(Cell { steps: t, beta_max: b, outcome: outcome.map_err(|e| format!("{e:#}")) });
        }
    }
    write_sweep(&dir, &cells, split)?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    log::info!("sweep finished: {} cells, {failed} failed; summary in {}", cells.len(), dir.display());
    Ok(())
}

fn write_sweep(dir: &Path, cells: &[Cell], split: EvalSplit) -> Result<()> {
    let mut summary = format!("steps\tbeta_max\tvalid_mrr\t{}_mrr\tstatus\n", split.name());
    let mut by_beta: BTreeMap<String, String> = BTreeMap::new();
    let mut by_steps: BTreeMap<usize, String> = BTreeMap::new();
    for c in cells {
        match &c.outcome {
            Ok((valid, eval)) => {
                summary.push_str(&format!("{}\t{}\t{valid:.6}\t{eval:.6}\tok\n", c.steps, c.beta_max));
                by_beta.entry(c.beta_max.to_string()).or_default().push_str(&format!("{} {eval:.6}\n", c.steps));
                by_steps.entry(c.steps).or_default().push_str(&format!("{} {eval:.6}\n", c.beta_max));
            }
            Err(e) => summary.push_str(&format!("{}\t{}\tnan\tnan\tfailed: {}\n", c.steps, c.beta_max, e.replace('\n', " "))),
        }
    }
    fs::write(dir.join("summary.tsv"), summary)?;
    for (b, rows) in by_beta {
        fs::write(dir.join(format!("mrr_vs_steps_beta{b}.dat")), format!("# steps {}_mrr\n{rows}", split.name()))?;
    }
    for (t, rows) in by_steps {
        fs::write(dir.join(format!("mrr_vs_beta_T{t}.dat")), format!("# beta_max {}_mrr\n{rows}", split.name()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let w = &cli.workdir;
    match cli.command {
        Command::Prepare { input, format, min_count, max_len } => prepare(w, &input, format, min_count, max_len),
        Command::Train { config, run, resume, force } => train(w, &config, run, resume, force),
        Command::Evaluate { run, split, tie, top_n, t_infer, count_valid } => {
            cmd_evaluate(w, &run, split, tie, top_n, t_infer, count_valid)
        }
        Command::Sweep { config, steps, beta_max, name, split } => sweep(w, &config, &steps, &beta_max, &name, split),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
