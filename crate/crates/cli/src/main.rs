use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use pathm3::bench::{bench_attention, bench_csv, fitted_slope, BenchOptions, Method};
use pathm3::config::RunConfig;
use pathm3::fusion::FusionMode;
use pathm3::data::{generate_synthetic_corpus, load_split, split_dataset, Manifest, MANIFEST_FILE};
use pathm3::model::{gradcheck_model, load_checkpoint, save_checkpoint, CheckpointMeta, PathM3};
use pathm3::tensor::ParamStore;
use pathm3::train::{evaluate, run_experiment, EvalOptions, MetricsReport};
use pathm3::Error;

const BEST_CHECKPOINT: &str = "best.pm3w";
const BEST_IMAGE_ONLY_CHECKPOINT: &str = "best_image_only.pm3w";
const LAST_CHECKPOINT: &str = "last.pm3w";

#[derive(Debug, Parser)]
#[command(name = "pathm3", version, about = "Multimodal multi-task MIL on bags of patch embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and its split manifest.
    GenData(Common),
    /// Train, select on val, evaluate on test; writes a run directory.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval(Common),
    /// Print greedy captions for one split as `bag_id<TAB>words`.
    Caption(Common),
    /// Time exact against Nyström attention; CSV on stdout.
    Bench(Common),
    /// Finite-difference check of every model parameter.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file of config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, paper or tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Any config key, e.g. `--set fusion_blocks=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    runs_dir: Option<String>,
    /// gen-data: corpus directory. Other commands: run directory to use
    /// instead of `<runs_dir>/<timestamp>-seed<seed>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// image_only or image_and_text.
    #[arg(long)]
    mode: Option<String>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
}

/// Validation problems exit with 1, everything else with 2.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

impl Common {
    fn overrides(&self) -> Outcome<Vec<(String, String)>> {
        let mut out = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got `{item}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("preset", &self.preset),
            ("alpha", &self.alpha),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("data_dir", &self.data_dir),
            ("runs_dir", &self.runs_dir),
            ("checkpoint", &self.checkpoint),
            ("mode", &self.mode),
            ("split", &self.split),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }

    fn resolve(&self) -> Outcome<RunConfig> {
        Ok(RunConfig::resolve(self.config.as_deref(), &self.overrides()?)?)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the run directory and echoes the effective config into it.
fn open_run_dir(cfg: &RunConfig, explicit: Option<&Path>) -> Outcome<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            let base = format!("{ts}-seed{}", cfg.seed);
            let mut dir = cfg.runs_dir.join(&base);
            let mut n = 1;
            while dir.exists() {
                dir = cfg.runs_dir.join(format!("{base}-{n}"));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_file(&dir.join("config.json"), &cfg.to_json()?)?;
    Ok(dir)
}

fn load_manifest(cfg: &RunConfig) -> Outcome<Manifest> {
    let manifest = Manifest::load(&cfg.data_dir.join(MANIFEST_FILE))?;
    cfg.check_manifest(&manifest)?;
    Ok(manifest)
}

/// Newest run directory under `runs_dir` holding a best checkpoint.
fn latest_run(runs_dir: &Path) -> Outcome<PathBuf> {
    let entries = fs::read_dir(runs_dir).map_err(|e| io_err(runs_dir, e))?;
    let mut found: Vec<(SystemTime, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(BEST_CHECKPOINT).is_file())
        .filter_map(|p| Some((fs::metadata(p.join(BEST_CHECKPOINT)).ok()?.modified().ok()?, p)))
        .collect();
    found.sort();
    found
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| Failure::Runtime(format!("no {BEST_CHECKPOINT} under {}", runs_dir.display())))
}

/// The explicit checkpoint, or the newest run's checkpoint selected under
/// `mode`. The image-only pick only serves image-only accuracy; captions
/// come from the main best-val checkpoint.
fn checkpoint_for(cfg: &RunConfig, mode: FusionMode) -> Outcome<(PathBuf, PathM3, ParamStore)> {
    let path = match &cfg.checkpoint {
        Some(p) => p.clone(),
        None => {
            let run = latest_run(&cfg.runs_dir)?;
            let io = run.join(BEST_IMAGE_ONLY_CHECKPOINT);
            if mode == FusionMode::ImageOnly && io.is_file() {
                io
            } else {
                run.join(BEST_CHECKPOINT)
            }
        }
    };
    let (model, store, _) = load_checkpoint(&path)?;
    Ok((path, model, store))
}

fn gen_data(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let dir = out_dir.unwrap_or(&cfg.data_dir);
    let fractions = cfg.split_fractions()?;
    let corpus = generate_synthetic_corpus(&cfg.synthetic_spec(), dir)?;
    let manifest = split_dataset(&corpus, fractions, cfg.data_seed, cfg.stratify)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let [tr, va, te] = manifest.split_counts();
    println!(
        "wrote {} bags to {} (train {tr}, val {va}, test {te})",
        manifest.bags.len(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let manifest = load_manifest(cfg)?;
    let run = open_run_dir(cfg, out_dir)?;
    let exp = run_experiment(&cfg.model_config(), &cfg.train_config(), &manifest, &cfg.data_dir)?;
    let report = exp.report();
    report.write(&run)?;
    let meta = CheckpointMeta {
        model: cfg.model_config(),
        seed: cfg.seed,
        run: serde_json::to_value(cfg).map_err(Error::from)?,
    };
    save_checkpoint(&run.join(BEST_CHECKPOINT), &exp.outcome.best.store, &meta)?;
    save_checkpoint(&run.join(BEST_IMAGE_ONLY_CHECKPOINT), &exp.outcome.best_image_only.store, &meta)?;
    save_checkpoint(&run.join(LAST_CHECKPOINT), &exp.outcome.last, &meta)?;
    let mut captions = String::new();
    for (id, tokens) in &exp.test_image_and_text.captions {
        captions.push_str(&format!("{id}\t{}\n", manifest.detokenize(tokens)));
    }
    write_file(&run.join("test_captions.tsv"), &captions)?;
    println!(
        "best epochs {} / {} (val accuracy {:.4} / {:.4}); test accuracy image_and_text {:.4}, image_only {:.4}; BLEU@4 {:.4}",
        exp.outcome.best.epoch,
        exp.outcome.best_image_only.epoch,
        exp.outcome.best.val_accuracy,
        exp.outcome.best_image_only.val_accuracy,
        exp.test_image_and_text.accuracy,
        exp.test_image_only.accuracy,
        exp.test_image_and_text.bleu4.unwrap_or(0.0)
    );
    println!("run directory: {}", run.display());
    Ok(())
}

fn eval(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let manifest = load_manifest(cfg)?;
    let (path, model, store) = checkpoint_for(cfg, cfg.mode)?;
    let bags = load_split(&manifest, &cfg.data_dir, cfg.split)?;
    let run = open_run_dir(cfg, out_dir)?;
    let opts = EvalOptions {
        mode: cfg.mode,
        alpha: cfg.alpha,
        losses: true,
        captions: true,
        max_decode_len: cfg.max_decode_len,
    };
    let e = evaluate(&model, &store, &bags, opts)?;
    let report = MetricsReport {
        rows: vec![e.row(0, cfg.split.as_str(), 0.0)],
        ..MetricsReport::default()
    };
    report.write(&run)?;
    let mut preds = String::from("bag_id\tpredicted\tlabel\n");
    for (id, p, l) in &e.predictions {
        preds.push_str(&format!("{id}\t{p}\t{l}\n"));
    }
    write_file(&run.join("predictions.tsv"), &preds)?;
    println!(
        "{} on {} ({} bags, mode {}): accuracy {:.4}, BLEU@4 {:.4}",
        path.display(),
        cfg.split.as_str(),
        e.n,
        cfg.mode.as_str(),
        e.accuracy,
        e.bleu4.unwrap_or(0.0)
    );
    println!("run directory: {}", run.display());
    Ok(())
}

fn caption(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let manifest = load_manifest(cfg)?;
    let (_, model, store) = checkpoint_for(cfg, FusionMode::ImageAndText)?;
    let bags = load_split(&manifest, &cfg.data_dir, cfg.split)?;
    let run = open_run_dir(cfg, out_dir)?;
    let mut out = String::new();
    for bag in &bags {
        let tokens = model.caption(&store, &bag.features, cfg.max_decode_len)?;
        let line = format!("{}\t{}", bag.record.bag_id, manifest.detokenize(&tokens));
        println!("{line}");
        out.push_str(&line);
        out.push('\n');
    }
    write_file(&run.join("captions.tsv"), &out)
}

fn bench(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let rows = bench_attention(
        &cfg.bench_sizes,
        BenchOptions {
            landmarks: cfg.bench_landmarks,
            repeats: cfg.bench_repeats,
            head_dim: cfg.bench_dim,
            pinv_iterations: cfg.pinv_iterations,
            seed: cfg.seed,
        },
    )?;
    let run = open_run_dir(cfg, out_dir)?;
    let csv = bench_csv(&rows);
    write_file(&run.join("bench.csv"), &csv)?;
    print!("{csv}");
    for method in [Method::Exact, Method::Nystrom] {
        if let Some(s) = fitted_slope(&rows, method) {
            eprintln!("{} log-log slope {s:.3}", method.as_str());
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out_dir: Option<&Path>) -> Outcome {
    let report = gradcheck_model(
        &cfg.model_config(),
        cfg.seed,
        cfg.grad_instances,
        cfg.alpha,
        cfg.grad_step,
        cfg.grad_tol,
    )?;
    let run = open_run_dir(cfg, out_dir)?;
    let mut text = String::from("param,max_rel_err,max_abs_err,passed\n");
    for p in &report.params {
        text.push_str(&format!("{},{:e},{:e},{}\n", p.name, p.max_rel_err, p.max_abs_err, p.passed));
    }
    write_file(&run.join("gradcheck.csv"), &text)?;
    let failed: Vec<&str> = report.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect();
    let worst = report.worst().map_or(0.0, |p| p.max_rel_err);
    println!(
        "{} parameters checked, worst relative error {worst:.3e} (tol {:e})",
        report.params.len(),
        cfg.grad_tol
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn dispatch(command: &Command) -> Outcome {
    let (common, run): (&Common, fn(&RunConfig, Option<&Path>) -> Outcome) = match command {
        Command::GenData(c) => (c, gen_data),
        Command::Train(c) => (c, train),
        Command::Eval(c) => (c, eval),
        Command::Caption(c) => (c, caption),
        Command::Bench(c) => (c, bench),
        Command::Gradcheck(c) => (c, gradcheck),
    };
    let cfg = common.resolve()?;
    run(&cfg, common.out_dir.as_deref())
}

fn main() -> ExitCode {
    let keys = RunConfig::default().help_table().unwrap_or_default();
    let after = format!("Config keys (desk defaults; see --preset):\n{keys}");
    let cmd = Cli::command().after_long_help(after.clone()).mut_subcommands(|s| s.after_long_help(after.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
