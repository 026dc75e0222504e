use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use remp::checkpoint;
use remp::config::{describe_keys, RunConfig};
use remp::data::{derive_seed, gen_synthetic, load_dataset, meta_path, save_dataset, stream, Dataset, Rng, Split};
use remp::inspect::{export_embeddings, inspect, is_non_decreasing};
use remp::model::ModelParams;
use remp::train::{evaluate, run_ablation, train, AblationTable};

#[derive(Parser)]
#[command(name = "remp", version, about = "Few-shot classification with attention-rectified prototypes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines (default: $REMP_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Named flags win over these.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root seed (seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset CSV (paths.dataset).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory (paths.out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    GenSynth(GenSynth),
    /// Train a model; writes best.ckpt, last.ckpt and train.jsonl.
    Train(TrainCmd),
    /// Evaluate a checkpoint over seeded episodes.
    Eval(EvalCmd),
    /// Train and evaluate every ablation arm.
    Ablate(AblateCmd),
    /// Write per-layer query/prototype similarity heatmaps for one episode.
    Inspect(InspectCmd),
    /// Write embedded features of one split as CSV.
    ExportEmbeddings(ExportCmd),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EpisodeFlags {
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    m_query: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    alpha: Option<f64>,
    /// cooperative, pretrain_then_finetune, local_only or global_only.
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path (default: <out_dir>/eval.json).
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InspectCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Propagation layers (inspect.layers).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// CSV path (default: <out_dir>/embeddings_<split>.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failures before any work starts are usage errors; everything after is a
/// runtime error.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<remp::Error> for Failure {
    fn from(e: remp::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

fn path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl EpisodeFlags {
    fn overrides(&self, section: &str, out: &mut Vec<(&'static str, String)>) {
        let keys: [&'static str; 3] = if section == "train" {
            ["train.n_way", "train.k_shot", "train.m_query"]
        } else {
            ["eval.n_way", "eval.k_shot", "eval.m_query"]
        };
        push(out, keys[0], &self.n_way);
        push(out, keys[1], &self.k_shot);
        push(out, keys[2], &self.m_query);
    }
}

/// Named flags as `(key, value)` pairs, applied after the file and `--set`.
fn flag_overrides(cli: &Cli) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    let c = &cli.common;
    push(&mut out, "seed", &c.seed);
    push(&mut out, "paths.dataset", &path_string(&c.dataset));
    push(&mut out, "paths.out_dir", &path_string(&c.out_dir));
    match &cli.command {
        Command::GenSynth(g) => {
            push(&mut out, "data.classes", &g.classes);
            push(&mut out, "data.per_class", &g.per_class);
            push(&mut out, "data.dim", &g.dim);
            push(&mut out, "data.spread", &g.spread);
            push(&mut out, "data.separation", &g.separation);
            push(&mut out, "data.name", &g.name);
        }
        Command::Train(t) => {
            push(&mut out, "objective.alpha", &t.alpha);
            push(&mut out, "train.arm", &t.arm);
            push(&mut out, "train.max_iters", &t.max_iters);
            push(&mut out, "train.lr0", &t.lr0);
            t.episode.overrides("train", &mut out);
        }
        Command::Eval(e) => {
            push(&mut out, "paths.checkpoint", &path_string(&e.checkpoint));
            push(&mut out, "eval.episodes", &e.episodes);
            push(&mut out, "eval.threads", &e.threads);
            e.episode.overrides("eval", &mut out);
        }
        Command::Ablate(a) => {
            push(&mut out, "train.max_iters", &a.max_iters);
            push(&mut out, "eval.episodes", &a.episodes);
            push(&mut out, "eval.threads", &a.threads);
        }
        Command::Inspect(i) => {
            push(&mut out, "paths.checkpoint", &path_string(&i.checkpoint));
            push(&mut out, "inspect.layers", &i.layers);
            i.episode.overrides("eval", &mut out);
        }
        Command::ExportEmbeddings(x) => {
            push(&mut out, "paths.checkpoint", &path_string(&x.checkpoint));
        }
    }
    out
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let usage = |e: remp::Error| Failure::Usage(e.to_string());
    let mut cfg = RunConfig::default();
    let file = cli
        .common
        .config
        .clone()
        .or_else(|| std::env::var_os("REMP_CONFIG").map(PathBuf::from));
    if let Some(path) = file {
        cfg.apply_file(&path).map_err(usage)?;
    }
    cfg.apply_overrides(&cli.common.set).map_err(usage)?;
    for (key, value) in flag_overrides(cli) {
        cfg.set(key, &value).map_err(usage)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| remp::Error::io(dir, e).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| remp::Error::io(path, e).into())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))
}

fn load_pair(cfg: &RunConfig) -> Result<(Dataset, ModelParams), Failure> {
    let ds = load_dataset(&cfg.dataset)?;
    let params = checkpoint::load(&cfg.checkpoint)?;
    if params.input_dim() != ds.dim {
        return Err(Failure::Runtime(format!(
            "checkpoint {} expects {}-dimensional inputs but dataset {} has dimension {}",
            cfg.checkpoint.display(),
            params.input_dim(),
            cfg.dataset.display(),
            ds.dim
        )));
    }
    Ok((ds, params))
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    match &cli.command {
        Command::GenSynth(_) => {
            let ds = gen_synthetic(&cfg.synth, &mut Rng::derived(cfg.seed, stream::DATA))?;
            if let Some(parent) = cfg.dataset.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_dataset(&ds, &cfg.dataset)?;
            println!(
                "wrote {} and {}",
                cfg.dataset.display(),
                meta_path(&cfg.dataset).display()
            );
            for split in Split::ALL {
                let ids: Vec<String> = ds.classes_in(split).map(|c| c.id.to_string()).collect();
                let samples: usize = ds.classes_in(split).map(|c| c.rows.rows()).sum();
                println!(
                    "{split:<5} {:>3} classes {:>6} samples  [{}]",
                    ids.len(),
                    samples,
                    ids.join(" ")
                );
            }
        }
        Command::Train(_) => {
            let exp = cfg.experiment()?;
            let ds = load_dataset(&cfg.dataset)?;
            let outcome = train(&ds, exp.init_params(&ds)?, &exp)?;
            create_dir(&cfg.out_dir)?;
            checkpoint::save(&outcome.best_params, &cfg.out_dir.join("best.ckpt"))?;
            checkpoint::save(&outcome.params, &cfg.out_dir.join("last.ckpt"))?;
            let mut log = String::new();
            for entry in &outcome.log {
                log.push_str(&serde_json::to_string(entry).map_err(|e| Failure::Runtime(e.to_string()))?);
                log.push('\n');
            }
            write_file(&cfg.out_dir.join("train.jsonl"), log.as_bytes())?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "iter {} loss {:.4} (global {:.4}, local {:.4}) query acc {:.4}",
                    last.iter, last.full_loss, last.global_loss, last.local_loss, last.query_acc
                );
            }
            if let Some(best) = &outcome.best_val {
                println!("best val acc {:.4} at iter {}", best.accuracy, best.iter);
            }
            println!("wrote checkpoints and log to {}", cfg.out_dir.display());
        }
        Command::Eval(e) => {
            let exp = cfg.experiment()?;
            let (ds, params) = load_pair(cfg)?;
            let report = evaluate(
                &ds,
                &params,
                e.split,
                exp.eval.episodes,
                exp.eval.shape,
                &exp.propagation,
                &exp.objective,
                derive_seed(exp.seed, stream::EVAL),
                exp.eval.threads,
            )?;
            let path = e.output.clone().unwrap_or_else(|| cfg.out_dir.join("eval.json"));
            write_file(&path, to_json(&report)?.as_bytes())?;
            println!("ACC {:.4} ± {:.4}", report.mean, report.ci95);
        }
        Command::Ablate(_) => {
            let exp = cfg.experiment()?;
            let ds = load_dataset(&cfg.dataset)?;
            let table: AblationTable = run_ablation(&ds, &exp, &cfg.metric_pairs(), cfg.ablate_checkpoint)?;
            write_file(&cfg.out_dir.join("ablation.json"), to_json(&table)?.as_bytes())?;
            print!("{}", table.render());
        }
        Command::Inspect(i) => {
            let exp = cfg.experiment()?;
            let (ds, params) = load_pair(cfg)?;
            let layers = cfg.inspect_layers.unwrap_or(exp.propagation.layers_eval);
            let heatmaps = inspect(
                &ds,
                &params,
                i.split,
                exp.eval.shape,
                &exp.propagation,
                exp.objective.propagated_queries,
                layers,
                &mut Rng::derived(exp.seed, stream::INSPECT),
            )?;
            let dir = cfg.out_dir.join("inspect");
            let written = heatmaps.write(&dir)?;
            let dd = heatmaps.diagonal_dominance();
            let scores: Vec<String> = dd.iter().map(|v| format!("{v:.3}")).collect();
            println!("diagonal dominance by layer: {}", scores.join(" "));
            println!("non-decreasing: {}", is_non_decreasing(&dd));
            println!("wrote {} files to {}", written.len(), dir.display());
        }
        Command::ExportEmbeddings(x) => {
            let (ds, params) = load_pair(cfg)?;
            let path = x
                .output
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(format!("embeddings_{}.csv", x.split)));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let n = export_embeddings(&ds, &params, x.split, &path)?;
            println!("wrote {n} rows to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = format!("Config keys (defaults shown):\n{}", describe_keys());
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = build_config(&cli).and_then(|cfg| run(&cli, &cfg));
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
