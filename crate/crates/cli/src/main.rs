use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plgmi::losses::LossKind;
use plgmi::manifest::RunManifest;
use plgmi::pipeline::{AblationAxis, Pipeline, RunOptions, Stage, StageStatus};
use plgmi::Error;

#[derive(Parser, Debug)]
#[command(name = "plgmi", version, about = "Pseudo-label guided model inversion experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run manifest (YAML).
    #[arg(long, global = true, env = "PLG_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the manifest's run id.
    #[arg(long, global = true, env = "PLG_RUN_ID")]
    run_id: Option<String>,
    /// Overrides the manifest's root seed.
    #[arg(long, global = true, env = "PLG_SEED")]
    seed: Option<u64>,
    /// Worker threads for per-class attack work.
    #[arg(long, global = true, env = "PLG_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Recompute stages whose outputs are already current.
    #[arg(long, global = true, env = "PLG_FORCE")]
    force: bool,
    /// Single-threaded kernels so reruns are bit-identical.
    #[arg(long, global = true, env = "PLG_DETERMINISTIC")]
    deterministic: bool,
    /// Overrides the dataset root directory.
    #[arg(long, global = true, env = "PLG_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Root of all run artifacts.
    #[arg(long, global = true, env = "PLG_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// GAN progress log interval in iterations (0 disables).
    #[arg(long, global = true, env = "PLG_LOG_EVERY", default_value_t = 100)]
    log_every: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the target classifier on the private split.
    TrainTarget,
    /// Train the evaluation classifier on the full training pool.
    TrainEval,
    /// Pseudo-label the public data with the target's top-n picks per class.
    Select {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the conditional GAN on the pseudo-labelled public data.
    TrainGan {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Reconstruct images of each private class from the generator.
    Invert {
        /// Inversion loss: ce, mm or poincare.
        #[arg(long)]
        loss: Option<String>,
        /// Augmented views per objective evaluation.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
    },
    /// Score the reconstructions with the evaluation classifier.
    Evaluate,
    /// Record logit-gradient trend curves for each inversion loss.
    AnalyzeLoss,
    /// Sweep one hyperparameter, one attack and evaluation per value.
    Ablate {
        /// inv_loss, n, alpha or m.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the manifest's defaults when absent.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Every attack stage in order, from training the target to evaluation.
    Run {
        /// Also record the loss trend curves.
        #[arg(long)]
        analyze: bool,
    },
    /// Print the resolved manifest and its hash.
    Show,
}

fn resolve(global: &Global, cmd: &Command) -> plgmi::Result<RunManifest> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("no manifest given (--config or PLG_CONFIG)".into()))?;
    let mut m = RunManifest::load(path)?;
    if let Some(id) = &global.run_id {
        m.run_id = id.clone();
    }
    if let Some(s) = global.seed {
        m.seed = s;
    }
    if global.deterministic {
        m.deterministic = true;
    }
    if let Some(r) = &global.data_root {
        m.dataset.data_root = Some(r.clone());
    }
    match cmd {
        Command::Select { n: Some(n) } => m.selection.n = *n,
        Command::TrainGan { alpha, iters } => {
            if let Some(a) = alpha {
                m.gan.alpha = *a;
            }
            if let Some(i) = iters {
                m.gan.total_iters = *i;
            }
        }
        Command::Invert {
            loss,
            views,
            images_per_class,
        } => {
            if let Some(l) = loss {
                m.attack.reconstruct.inv_loss.kind = LossKind::parse(l)?;
            }
            if let Some(v) = views {
                m.attack.reconstruct.views = *v;
            }
            if let Some(i) = images_per_class {
                m.attack.images_per_class = *i;
            }
        }
        _ => {}
    }
    m.validate()?;
    Ok(m)
}

fn report_status(stage: Stage, status: &StageStatus) {
    match status {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::Skipped => println!("{stage}: up to date"),
    }
}

fn execute(cli: Cli) -> plgmi::Result<()> {
    let manifest = resolve(&cli.global, &cli.cmd)?;
    if manifest.deterministic {
        // must precede the first use of the global thread pool
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let jobs = if manifest.deterministic { 1 } else { cli.global.jobs.max(1) };
    let opts = RunOptions {
        force: cli.global.force,
        jobs,
        log_every: cli.global.log_every,
    };
    let pipeline = Pipeline::new(manifest, &cli.global.out_dir, opts)?;
    let single = |stage: Stage| -> plgmi::Result<()> {
        let status = pipeline.run(stage)?;
        report_status(stage, &status);
        Ok(())
    };
    match &cli.cmd {
        Command::TrainTarget => single(Stage::TrainTarget)?,
        Command::TrainEval => single(Stage::TrainEval)?,
        Command::Select { .. } => single(Stage::Select)?,
        Command::TrainGan { .. } => single(Stage::TrainGan)?,
        Command::Invert { .. } => single(Stage::Invert)?,
        Command::Evaluate => {
            single(Stage::Evaluate)?;
            print_report(&pipeline)?;
        }
        Command::AnalyzeLoss => single(Stage::AnalyzeLoss)?,
        Command::Ablate { axis, values } => {
            let axis = AblationAxis::parse(axis)?;
            let values = if values.is_empty() {
                axis.defaults(pipeline.manifest())
            } else {
                values.clone()
            };
            let rows = pipeline.ablate(axis, &values)?;
            println!("{:<12} {:>10} {:>10}  error", axis.id(), "attack_acc", "fid");
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            for r in &rows {
                println!(
                    "{:<12} {:>10} {:>10}  {}",
                    r.value,
                    fmt(r.attack_acc),
                    fmt(r.fid),
                    r.error.as_deref().unwrap_or("")
                );
            }
            println!("wrote {}", pipeline.paths().ablations.join(format!("{}.csv", axis.id())).display());
        }
        Command::Run { analyze } => {
            let mut stages = Stage::ATTACK.to_vec();
            if *analyze {
                stages.push(Stage::AnalyzeLoss);
            }
            for stage in stages {
                single(stage)?;
            }
            print_report(&pipeline)?;
        }
        Command::Show => {
            println!("config_hash: {}", pipeline.manifest().config_hash());
            print!("{}", pipeline.manifest().to_yaml()?);
        }
    }
    Ok(())
}

fn print_report(pipeline: &Pipeline) -> plgmi::Result<()> {
    let r = pipeline.load_report()?;
    let s = &r.selected;
    println!(
        "attack acc top-1 {:.4} ± {:.4}, top-5 {:.4} ± {:.4}, knn dist {:.4}, fid {}",
        s.attack_acc_top1.mean,
        s.attack_acc_top1.std,
        s.attack_acc_top5.mean,
        s.attack_acc_top5.std,
        s.knn_dist,
        s.fid.map_or("absent".to_string(), |f| format!("{f:.4}"))
    );
    println!("report: {}", pipeline.paths().reports.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{}]: {e}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
