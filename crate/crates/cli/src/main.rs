use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metaseg::config::{parse_shots, Overrides, RunConfig, SeedTarget};
use metaseg::episodes::{gen_synthetic, load_dataset_dir, write_dataset_dir, SegDataset, Split};
use metaseg::eval::{evaluate, shot_sweep};
use metaseg::ridge::HeadKind;
use metaseg::trainer::{
    checkpoint_precision, load_checkpoint, meta_train, metrics_csv, save_checkpoint, Checkpoint, Model, Precision,
    RunOptions,
};
use metaseg::verify::{run_verification, VerifyOptions};
use metaseg::{Error, Real, Result};

/// Few-shot semantic segmentation with a meta-learned embedding and a
/// closed-form ridge-regression head.
#[derive(Debug, Parser)]
#[command(name = "metaseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of this command's stage (overridden by METASEG_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset to a directory of PPM/PGM files.
    Gendata {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train a model, writing a checkpoint per epoch and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; the synthetic dataset is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// f32 or f64.
        #[arg(long)]
        precision: Option<Precision>,
        /// ridge, prototype or convstep.
        #[arg(long)]
        head: Option<HeadKind>,
        /// Drop the global-context branch from the embedding.
        #[arg(long)]
        no_gc_branch: bool,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on novel-class tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/last.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; the synthetic dataset is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated shot counts for a sweep, e.g. `1,5,10`.
        #[arg(long, value_parser = parse_shot_list)]
        shots: Option<ShotList>,
        /// Classes per task.
        #[arg(long)]
        way: Option<usize>,
        /// Support images per class.
        #[arg(long)]
        shot: Option<usize>,
        /// Query images per class.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        /// Evaluate in this precision instead of the stored one.
        #[arg(long)]
        precision: Option<Precision>,
        /// Swap the base learner of the loaded model.
        #[arg(long)]
        head: Option<HeadKind>,
        /// Write per-task rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the f64 verification battery.
    Verify {
        /// Episodes drawn for the sampler invariants.
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

#[derive(Debug, Clone)]
struct ShotList(Vec<usize>);

fn parse_shot_list(s: &str) -> std::result::Result<ShotList, String> {
    parse_shots(s).map(ShotList).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gendata { common } => {
            let cfg = resolve(&common, Overrides::default(), SeedTarget::Synth)?;
            let ds = gen_synthetic(&cfg.synth)?;
            let dir = common.out.clone().or(cfg.paths.data_dir.clone()).unwrap_or(cfg.paths.out_dir.clone());
            write_dataset_dir(&ds, &dir)?;
            eprintln!("wrote {} images to {}", ds.records.len(), dir.display());
            println!("{}", ds.checksum());
        }
        Command::Train {
            common,
            data,
            precision,
            head,
            no_gc_branch,
            resume,
        } => {
            let o = Overrides {
                data_dir: data,
                precision,
                head,
                no_gc_branch,
                ..Overrides::default()
            };
            let cfg = resolve(&common, o, SeedTarget::Train)?;
            let ds = dataset(&cfg)?;
            let run = RunOptions {
                workers: common.workers.max(1),
            };
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &ds, resume.as_deref(), run)?,
                Precision::F64 => train::<f64>(&cfg, &ds, resume.as_deref(), run)?,
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            shots,
            way,
            shot,
            queries,
            tasks,
            precision,
            head,
            csv,
        } => {
            let o = Overrides {
                checkpoint,
                data_dir: data,
                shots: shots.map(|s| s.0),
                k: way,
                n: shot,
                q: queries,
                tasks,
                ..Overrides::default()
            };
            let cfg = resolve(&common, o, SeedTarget::Eval)?;
            let path = cfg
                .paths
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.paths.out_dir.join("last.ckpt"));
            let stored = checkpoint_precision(&path)?;
            let ds = dataset(&cfg)?;
            check_dataset(&path, &ds)?;
            let run = RunOptions {
                workers: common.workers.max(1),
            };
            match precision.unwrap_or(stored) {
                Precision::F32 => eval::<f32>(&cfg, &path, stored, &ds, head, csv.as_deref(), run)?,
                Precision::F64 => eval::<f64>(&cfg, &path, stored, &ds, head, csv.as_deref(), run)?,
            }
        }
        Command::Verify {
            episodes,
            inject_gradient_bug,
        } => {
            let opts = VerifyOptions {
                sampler_episodes: episodes,
                inject_gradient_bug,
                ..VerifyOptions::default()
            };
            eprintln!("{opts:?}");
            let report = run_verification(&opts, |c| {
                eprintln!("{} {} ({:.1}s)", if c.passed { "ok  " } else { "FAIL" }, c.name, c.seconds)
            });
            print!("{}", report.to_text());
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn resolve(common: &Common, mut o: Overrides, target: SeedTarget) -> Result<RunConfig> {
    o.seed = common.seed;
    o.out_dir = common.out.clone();
    let cfg = RunConfig::resolve(common.config.as_deref(), &o, target)?;
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
    Ok(cfg)
}

fn dataset(cfg: &RunConfig) -> Result<SegDataset> {
    let ds = match &cfg.paths.data_dir {
        Some(dir) => load_dataset_dir(dir)?,
        None => gen_synthetic(&cfg.synth)?,
    };
    eprintln!("dataset {} ({} images)", ds.checksum(), ds.records.len());
    Ok(ds)
}

const DATASET_STAMP: &str = "dataset.sha256";

/// Refuse to evaluate on a dataset other than the one the checkpoint was
/// trained on, when the training run recorded it.
fn check_dataset(checkpoint: &Path, ds: &SegDataset) -> Result<()> {
    let stamp = checkpoint.parent().unwrap_or(Path::new(".")).join(DATASET_STAMP);
    let Ok(recorded) = fs::read_to_string(&stamp) else {
        return Ok(());
    };
    let current = ds.checksum();
    if recorded.trim() != current {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on dataset {} but the evaluation dataset is {current}",
            checkpoint.display(),
            recorded.trim()
        )));
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn train<T: Real>(cfg: &RunConfig, ds: &SegDataset, resume: Option<&Path>, run: RunOptions) -> Result<()> {
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("run.toml"), &cfg.to_toml())?;
    write(&out.join(DATASET_STAMP), &format!("{}\n", ds.checksum()))?;
    let resume = resume.map(load_checkpoint::<T>).transpose()?;
    let start = resume.as_ref().map_or(0, |c| c.epoch);
    eprintln!(
        "training {} parameters for epochs {}..={}",
        Model::<T>::new(&cfg.train.embed, cfg.train.head, cfg.train.seed)?.count_params(),
        start + 1,
        cfg.train.epochs
    );
    let ck = meta_train::<T>(ds, &cfg.train, resume, run, |ck: &Checkpoint<T>| {
        let m = ck.history.last().expect("epoch recorded");
        let eval = m.eval_miou.map_or(String::new(), |v| format!(" novel mIoU {v:.4}"));
        eprintln!("epoch {:>3} loss {:.4}{eval}", m.epoch, m.mean_loss);
        save_checkpoint(&out.join(format!("epoch-{:03}.ckpt", ck.epoch)), ck)?;
        save_checkpoint(&out.join("last.ckpt"), ck)?;
        write(&out.join("metrics.csv"), &metrics_csv(&ck.history))
    })?;
    println!("{}", out.join("last.ckpt").display());
    eprintln!("model fingerprint {}", ck.model.fingerprint());
    Ok(())
}

fn eval<T: Real>(
    cfg: &RunConfig,
    path: &Path,
    stored: Precision,
    ds: &SegDataset,
    head: Option<HeadKind>,
    csv: Option<&Path>,
    run: RunOptions,
) -> Result<()> {
    let mut model: Model<T> = match stored {
        Precision::F32 => load_checkpoint::<f32>(path)?.model.cast(),
        Precision::F64 => load_checkpoint::<f64>(path)?.model.cast(),
    };
    if let Some(h) = head {
        model.kind = h;
    }
    eprintln!("checkpoint {} fingerprint {}", path.display(), model.fingerprint());
    let e = &cfg.eval;
    if e.shots.is_empty() {
        let report = evaluate(&model, ds, Split::Novel, e.k, e.n, e.q, e.tasks, e.seed, run)?;
        println!("{}", report.summary());
        if let Some(p) = csv {
            write(p, &report.to_csv())?;
        }
    } else {
        let sweep = shot_sweep(&model, ds, Split::Novel, e.k, &e.shots, e.q, e.tasks, e.seed, run)?;
        print!("{}", sweep.to_table());
        if let Some(p) = csv {
            write(p, &sweep.to_csv())?;
        }
    }
    Ok(())
}
