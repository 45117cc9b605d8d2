//! `spg`: generate scenes, train, evaluate, ablate, analyze, and gradient-check.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
//! divergence, 5 gradient-check failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spg::ablation::{ablation_csv, run_ablation_suite};
use spg::analysis::{self, AnalysisError};
use spg::checkpoint::{self, CheckpointError};
use spg::config::{parse_config, ConfigError, TrainConfig};
use spg::gradcheck::{self, SuiteOptions};
use spg::linalg::GradCheckOptions;
use spg::scenes::{self, SceneError};
use spg::trainer::{self, RunError};
use spg::SpgError;

#[derive(Parser, Debug)]
#[command(
    name = "spg",
    version,
    about = "Subspace prototype guidance on synthetic point-cloud scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, env = "SPG_RUNS_ROOT", default_value = "runs")]
    out: PathBuf,
    /// `key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training and test scenes of a config as scene files.
    Gen(ConfigArgs),
    /// Train and write manifest, metrics, checkpoint and resolved config.
    Train(ConfigArgs),
    /// Evaluate a run's checkpoint on its test scenes or on scene files.
    Eval {
        /// Run directory containing checkpoint.bin and config.resolved.
        #[arg(long)]
        run: PathBuf,
        /// Scene files to evaluate instead of the run's test scenes.
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
    },
    /// Run the ablation rows and write an ablation table.
    Ablate(ConfigArgs),
    /// Feature-center report, feature dump and intra-class variance for a run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Corrupt the named block's analytic gradient.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let text = match &args.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => String::new(),
    };
    Ok(parse_config(&text, &args.overrides)?)
}

fn load_run(run: &Path) -> Result<(TrainConfig, checkpoint::Checkpoint)> {
    let cfg_path = run.join("config.resolved");
    let text = std::fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = parse_config(&text, &[])?;
    let ckpt = checkpoint::load(&run.join("checkpoint.bin"))?;
    if ckpt.model.arch != cfg.architecture() {
        bail!(SpgError::Config(
            "checkpoint architecture does not match config.resolved".into()
        ));
    }
    Ok((cfg, ckpt))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn fmt_iou(v: &[Option<f64>]) -> String {
    v.iter()
        .map(|x| x.map_or_else(|| "  -  ".to_string(), |x| format!("{x:.3}")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_gen(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = args.out.join(&cfg.name).join("scenes");
    for (split, scenes) in [
        ("train", trainer::training_scenes(&cfg)?),
        ("test", trainer::test_scenes(&cfg)?),
    ] {
        let d = dir.join(split);
        mkdir(&d)?;
        for (k, s) in scenes.iter().enumerate() {
            scenes::write_scene(s, &d.join(format!("scene_{k:04}.txt")))?;
        }
        println!("wrote {} {split} scenes to {}", scenes.len(), d.display());
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    println!(
        "run {} ({} epochs x {} scenes, mode {})",
        cfg.name,
        cfg.epochs,
        cfg.scenes_per_epoch,
        cfg.mode.as_str()
    );
    let (manifest, _) = trainer::run_experiment(&cfg, &args.out, |m| {
        println!(
            "epoch {:>3}  OA {:.4}  mAcc {:.4}  mIoU {:.4}  l_con {:.4} l_l1 {:.4} l_l1_main {:.4} l_ce {:.4}",
            m.epoch, m.oa, m.macc, m.miou, m.losses.con, m.losses.l1, m.losses.l1_main, m.losses.ce
        );
    })?;
    println!("per-class IoU: {}", fmt_iou(&manifest.final_class_iou));
    println!("wrote {}", args.out.join(&cfg.name).display());
    Ok(())
}

fn cmd_eval(run: &Path, files: &[PathBuf]) -> Result<()> {
    let (cfg, ckpt) = load_run(run)?;
    let scenes = if files.is_empty() {
        trainer::test_scenes(&cfg)?
    } else {
        files
            .iter()
            .map(|p| scenes::read_scene(p))
            .collect::<Result<Vec<_>, _>>()?
    };
    let aux_before = ckpt.model.aux.reads.get();
    let m = trainer::evaluate(&ckpt.model.main, &scenes)?;
    let aux_reads = ckpt.model.aux.reads.get() - aux_before;
    println!(
        "scenes {}  OA {:.4}  mAcc {:.4}  mIoU {:.4}",
        scenes.len(),
        m.oa,
        m.macc,
        m.miou
    );
    println!("per-class IoU: {}", fmt_iou(&m.class_iou));
    println!("auxiliary-branch reads during inference: {aux_reads}");
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let minority = cfg.profile.build().minority_class();
    let outcomes = run_ablation_suite(&cfg, Some(&args.out), |o| match &o.result {
        Ok(m) => println!(
            "{:<14} mIoU {:.4}  minority IoU {}",
            o.row.label(),
            m.miou,
            fmt_iou(&m.class_iou[minority..=minority])
        ),
        Err(e) => println!("{:<14} error: {e}", o.row.label()),
    });
    let dir = args.out.join(format!("{}-ablation", cfg.name));
    mkdir(&dir)?;
    let path = dir.join("ablation.csv");
    write(&path, ablation_csv(&outcomes, minority))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_analyze(run: &Path) -> Result<()> {
    let (cfg, ckpt) = load_run(run)?;
    let train = trainer::training_scenes(&cfg)?;
    let test = trainer::test_scenes(&cfg)?;
    let report =
        analysis::feature_center_analysis(&ckpt.model.main, &train, &test, cfg.center_features)?;
    let dir = run.join("analysis");
    mkdir(&dir)?;
    write(&dir.join("centers.csv"), report.to_csv())?;
    let rows = analysis::dump_features(
        &ckpt.model.main,
        &test,
        &dir.join("features.csv"),
        &dir.join("labels.csv"),
    )?;
    let (features, labels) =
        analysis::read_features(&dir.join("features.csv"), &dir.join("labels.csv"))?;
    let var = analysis::intra_class_variance(&features, &labels, cfg.architecture().num_classes);
    let mut csv = String::from("class,variance\n");
    for (c, v) in var.iter().enumerate() {
        csv.push_str(&format!(
            "{c},{}\n",
            v.map_or_else(|| "nan".into(), |x| x.to_string())
        ));
    }
    write(&dir.join("variance.csv"), csv)?;
    println!(
        "{:>5} {:>8} {:>8} {:>8}",
        "class", "cos_tp", "cos_fp", "cos_fn"
    );
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in &report.rows {
        println!(
            "{:>5} {:>8} {:>8} {:>8}",
            r.class,
            f(r.cos_tp),
            f(r.cos_fp),
            f(r.cos_fn)
        );
    }
    let bad = report.tp_over_fn_violations();
    println!(
        "TP closer than FN to the train TP center in {}/{} comparable classes",
        report.comparable_classes() - bad.len(),
        report.comparable_classes()
    );
    println!("dumped {rows} feature rows to {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, tol: f64, fault: Option<String>) -> Result<()> {
    let opts = SuiteOptions {
        check: GradCheckOptions {
            tol,
            ..GradCheckOptions::default()
        },
        seed,
        fault,
    };
    let report = gradcheck::run_suite(&opts)?;
    print!("{}", report.to_text());
    if !report.passed() {
        for b in report.failing() {
            eprintln!(
                "failing block: {} (max rel err {:.3e})",
                b.name, b.max_rel_err
            );
        }
        bail!(GradcheckFailed);
    }
    Ok(())
}

fn is_io(e: &(dyn std::error::Error + 'static)) -> bool {
    e.is::<std::io::Error>()
        || matches!(
            e.downcast_ref::<RunError>(),
            Some(
                RunError::Io { .. }
                    | RunError::Scene(SceneError::Io { .. })
                    | RunError::Checkpoint(CheckpointError::Io { .. })
            )
        )
        || matches!(e.downcast_ref::<SceneError>(), Some(SceneError::Io { .. }))
        || matches!(
            e.downcast_ref::<CheckpointError>(),
            Some(CheckpointError::Io { .. })
        )
        || matches!(
            e.downcast_ref::<AnalysisError>(),
            Some(AnalysisError::Io { .. })
        )
}

fn as_spg<'a>(e: &'a (dyn std::error::Error + 'static)) -> Option<&'a SpgError> {
    match e.downcast_ref::<RunError>() {
        Some(RunError::Spg(inner)) => Some(inner),
        _ => e.downcast_ref::<SpgError>(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GradcheckFailed>() {
            return 5;
        }
        if cause.is::<ConfigError>()
            || matches!(cause.downcast_ref::<RunError>(), Some(RunError::Config(_)))
            || matches!(as_spg(cause), Some(SpgError::Config(_)))
        {
            return 2;
        }
        if matches!(as_spg(cause), Some(SpgError::Divergence { .. })) {
            return 4;
        }
        if is_io(cause) {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval { run, scenes } => cmd_eval(run, scenes),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze { run } => cmd_analyze(run),
        Command::Gradcheck { seed, tol, fault } => cmd_gradcheck(*seed, *tol, fault.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
