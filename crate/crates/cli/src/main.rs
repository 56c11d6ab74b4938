use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dpms::checkpoint::Checkpoint;
use dpms::data::{generate_synthetic_dataset, load_dataset, Split, SynthConfig};
use dpms::metrics::{evaluate, Which};
use dpms::model::SegNet;
use dpms::trainer::{
    default_workers, run_ablation, run_training, AblationOptions, GridSpec, LoadedData, RunOptions, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "dpms", version, about = "Semi-supervised segmentation training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_labeled: usize,
        #[arg(long, default_value_t = 192)]
        n_unlabeled: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train a student/teacher pair.
    Train {
        /// JSON training config; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "student")]
        which: String,
        /// CSV output path; defaults to next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run an ablation grid and write markdown + CSV tables.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base config underneath the grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override every cell's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Comma-separated seeds replacing the grid's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn read_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn ensure_writable_dir(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && fs::read_dir(path)?.next().is_some() {
        if !force {
            bail!("{} is not empty (use --force to overwrite)", path.display());
        }
        fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
    }
    Ok(())
}

fn gen_data(cfg: SynthConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    ensure_writable_dir(out, force)?;
    let manifest = generate_synthetic_dataset(&cfg, out)?;
    println!(
        "wrote {} samples ({} labeled, {} unlabeled, {} test) to {}",
        manifest.samples.len(),
        manifest.count(Split::TrainLabeled),
        manifest.count(Split::TrainUnlabeled),
        manifest.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<PathBuf>,
    force: bool,
) -> anyhow::Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if resume.is_none() {
        ensure_writable_dir(out, force)?;
    }
    let data = LoadedData::from_dataset(&load_dataset(data)?)?;
    let outcome =
        run_training(&cfg, &data, &RunOptions { out_dir: Some(out.to_path_buf()), force, resume, stop_after: None })?;
    if let Some(rec) = &outcome.final_eval {
        println!("{}", rec.student.to_table());
        println!("{}", rec.teacher.to_table());
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: &str, which: &str, csv: Option<PathBuf>) -> anyhow::Result<()> {
    let split = Split::parse(split)?;
    let which = Which::parse(which)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = SegNet::new(ckpt.meta.model.clone())?;
    let state = ckpt.to_state(&net)?;
    let data = LoadedData::from_dataset(&load_dataset(data)?)?;
    let pairs = data.split_pairs(split)?;
    let (params, stats) = match which {
        Which::Student => (&state.student, &state.student_stats),
        Which::Teacher => (&state.teacher.params, &state.teacher.stats),
    };
    let report = evaluate(&net, params, stats, &pairs, which)?;
    println!("iteration {} on {}", state.iteration, split.as_str());
    println!("{}", report.to_table());
    let csv = csv.unwrap_or_else(|| checkpoint.with_extension(format!("{}.{}.csv", split.as_str(), which.as_str())));
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    println!("csv: {}", csv.display());
    Ok(())
}

fn ablate(
    grid: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    iterations: Option<u64>,
    seeds: Option<Vec<u64>>,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let spec = GridSpec::from_json_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
    let base = read_config(config)?;
    let data = LoadedData::from_dataset(&load_dataset(data)?)?;
    let table = run_ablation(&spec, &base, &data, &AblationOptions { iterations, seeds, workers: default_workers() })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stem = grid.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation");
    let md = out.join(format!("{stem}.md"));
    let csv = out.join(format!("{stem}.csv"));
    let markdown = table.to_markdown();
    fs::write(&md, &markdown).with_context(|| format!("writing {}", md.display()))?;
    fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{markdown}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { out, n_labeled, n_unlabeled, n_test, classes, size, seed, force } => gen_data(
            SynthConfig {
                n_labeled,
                n_unlabeled,
                n_test,
                height: size,
                width: size,
                num_classes: classes,
                seed,
                ..SynthConfig::default()
            },
            &out,
            force,
        ),
        Command::Train { config, data, out, seed, resume, force } => {
            train(config.as_deref(), &data, &out, seed, resume, force)
        }
        Command::Eval { checkpoint, data, split, which, csv } => eval(&checkpoint, &data, &split, &which, csv),
        Command::Ablate { grid, data, out, config, iterations, seeds } => {
            ablate(&grid, &data, &out, config.as_deref(), iterations, seeds)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(dpms::Error::NonFiniteLoss { dump: Some(p), .. }) = e.downcast_ref::<dpms::Error>() {
                eprintln!("diagnostic dump: {}", p.display());
            }
            ExitCode::from(2)
        }
    }
}
