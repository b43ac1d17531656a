//! `flashlab`: train a toy teacher, distill a few-step student, sample, evaluate and ablate.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use flashlab_core::checkpoint::{Checkpoint, CheckpointKind};
use flashlab_core::config::ExperimentConfig;
use flashlab_core::engine::{
    ablate, config_id, seeded, student_samples, teacher_reference, AblationAxis, Distiller, EvalSet, Teacher,
    TeacherTrainer, EVAL_NFES,
};
use flashlab_core::nets::classes;
use flashlab_core::sampling::student_sample;

use output::{write_ablation, write_points, write_scatter, MetricsLog};

const CSV_HELP: &str = "\
CSV files are UTF-8, comma-separated, with one header row and '.' decimals.

Metrics logs (train-teacher, distill, eval) have the columns
  iter,nfe,metric,value,seed,config_id,wall_clock
where metric is one of loss (teacher), sw / mmd (student, per nfe),
teacher_sw / teacher_mmd (teacher reference, per nfe), loss_distill, loss_adv,
loss_dis, loss_dmd, lambda_adv, lambda_dmd and nfe_per_iter. wall_clock is Unix
time in seconds. Logs are append-only; a resumed run appends to its log.

Sample files have the columns x,y,class.
Ablation writes <axis>_runs.csv (axis,variant,config_id,seed,nfe,sw) and
<axis>_summary.csv (axis,variant,config_id,reference,nfe,seeds,mean,sd,median).";

#[derive(Parser)]
#[command(name = "flashlab", version, about = "Few-step diffusion distillation on 2-D toy densities", after_long_help = CSV_HELP)]
struct Cli {
    /// Run seed.
    #[arg(long, global = true, env = "FLASHLAB_SEED", default_value_t = 0)]
    seed: u64,
    /// Logging cadence in iterations; overrides `eval_every` for distillation.
    #[arg(long, global = true)]
    metrics_every: Option<u64>,
    /// Worker threads for commands that run independent jobs (ablate).
    #[arg(long, global = true, default_value_t = 1)]
    device_threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional teacher by denoising score matching.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a few-step LoRA student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Draw points from a distilled student.
    Sample(SampleArgs),
    /// Sweep one ablation axis over several seeds.
    Ablate(AblateArgs),
    /// Score a teacher or student checkpoint against held-out data.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint; not needed with --resume.
    #[arg(long, required_unless_present = "resume")]
    teacher: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Student checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a distillation checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop (and checkpoint) at this iteration instead of the configured total.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Metrics log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Distillation checkpoint.
    #[arg(long)]
    student: PathBuf,
    /// Student steps: 1, 2 or 4.
    #[arg(long, default_value_t = 4)]
    nfe: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// A class id, or `random` for classes drawn uniformly.
    #[arg(long, default_value = "random")]
    class: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional scatter plot.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: losses, pi, distill_loss, gan, k, guidance.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Student step count the table reports.
    #[arg(long, default_value_t = 4)]
    nfe: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn sibling_csv(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("csv"))
}

fn train_teacher(cli: &Cli, a: &TrainTeacherArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut log = MetricsLog::open(&sibling_csv(&a.out, a.metrics.clone()), cli.seed, &config_id(&cfg), false)?;
    let mut trainer = TeacherTrainer::new(&cfg, cli.seed)?;
    let every = cli.metrics_every.unwrap_or((cfg.teacher_iters / 50).max(1));
    let mut err = None;
    let res = trainer.run(every, |r| {
        if let Err(e) = log.write(r) {
            err.get_or_insert(e);
        }
    });
    if let Err(e) = res {
        let dump = a.out.with_extension("failed");
        trainer.checkpoint().save(&dump)?;
        bail!("teacher training aborted at iteration {}: {e}; state written to {}", trainer.iter(), dump.display());
    }
    if let Some(e) = err {
        return Err(e);
    }
    trainer.checkpoint().save(&a.out)?;
    eprintln!("teacher: {} iterations, checkpoint {}", trainer.iter(), a.out.display());
    Ok(())
}

fn distill(cli: &Cli, a: &DistillArgs) -> Result<()> {
    let mut d = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some(p) = &a.config {
                let cfg = ExperimentConfig::load(p)?;
                ensure!(cfg == ck.config, "config differs from the one stored in {}", path.display());
            }
            Distiller::from_checkpoint(&ck)?
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(every) = cli.metrics_every {
                cfg.eval_every = every;
            }
            let teacher_path = a.teacher.as_ref().expect("clap requires --teacher without --resume");
            let ck = Checkpoint::load(teacher_path)?;
            ensure!(
                ck.kind == CheckpointKind::Teacher,
                "{} is not a teacher checkpoint",
                teacher_path.display()
            );
            ensure!(
                ck.config.k == cfg.k,
                "k: teacher checkpoint was configured with k={}, config has k={}",
                ck.config.k,
                cfg.k
            );
            Distiller::new(&cfg, &Teacher::from_checkpoint(&ck)?, cli.seed)?
        }
    };
    let cfg = d.config().clone();
    let log_path = sibling_csv(&a.out, a.metrics.clone());
    let mut log = MetricsLog::open(&log_path, d.seed(), &config_id(&cfg), a.resume.is_some())?;
    let until = a.stop_at.unwrap_or(cfg.iters);
    let mut err = None;
    let res = d.run(until, |r| {
        if let Err(e) = log.write(r) {
            err.get_or_insert(e);
        }
    });
    // The run is left at its last good state on failure, so this is always safe to keep.
    d.checkpoint().save(&a.out)?;
    if let Err(e) = res {
        bail!("distillation aborted at iteration {}: {e}; last good state written to {}", d.iter(), a.out.display());
    }
    if let Some(e) = err {
        return Err(e);
    }
    eprintln!("distill: iteration {} of {}, checkpoint {}", d.iter(), cfg.iters, a.out.display());
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    ensure!(EVAL_NFES.contains(&a.nfe), "unsupported --nfe {}; expected 1, 2 or 4", a.nfe);
    ensure!(a.n > 0, "--n must be positive");
    let ck = Checkpoint::load(&a.student)?;
    let d = Distiller::from_checkpoint(&ck)?;
    let cfg = d.config();
    let ds = cfg.dataset()?;
    let mut rng = seeded(cli.seed, 0);
    let labels: Vec<u32> = match a.class.as_str() {
        "random" => (0..a.n).map(|_| ds.sample_class(&mut rng)).collect(),
        c => {
            let c: u32 = c.parse().with_context(|| format!("--class must be a class id or `random`, got {c}"))?;
            ensure!((c as usize) < ds.n_classes(), "class {c} outside 0..{}", ds.n_classes());
            vec![c; a.n]
        }
    };
    let (x, nfe) = student_sample(&d.student_model(), &cfg.schedule(), a.nfe, cfg.k, &classes(&labels), ds.dim(), &mut rng)?;
    write_points(&a.out, &x, &labels)?;
    if let Some(svg) = &a.svg {
        write_scatter(svg, &x, &labels, &format!("student, {} step(s)", a.nfe))?;
    }
    eprintln!("sample: {} points, {nfe} network evaluation(s) per point", a.n);
    Ok(())
}

fn run_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let axis = AblationAxis::from_name(&a.axis)?;
    ensure!(a.seeds > 0, "--seeds must be positive");
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(every) = cli.metrics_every {
        cfg.eval_every = every;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let seeds: Vec<u64> = (0..a.seeds).map(|s| cli.seed + s).collect();
    let rows = ablate(&cfg, axis, &seeds, a.nfe, cli.device_threads, &|msg| eprintln!("ablate: {msg}"))?;
    write_ablation(&a.out, axis.name(), &rows)?;
    println!("| variant | nfe | median sw | mean ± sd |");
    println!("|---|---|---|---|");
    for r in &rows {
        let mark = if r.reference { " (reference)" } else { "" };
        println!("| {}{mark} | {} | {:.4} | {:.4} ± {:.4} |", r.variant, r.nfe, r.median, r.mean, r.sd);
    }
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ck.config;
    let eval = EvalSet::new(cfg)?;
    let mut rows = Vec::new();
    match ck.kind {
        CheckpointKind::Teacher => {
            let teacher = Teacher::from_checkpoint(&ck)?;
            rows.extend(teacher_reference(cfg, &teacher.model(), &eval)?);
        }
        CheckpointKind::Distill => {
            let d = Distiller::from_checkpoint(&ck)?;
            rows.extend(teacher_reference(cfg, &d.teacher_model(), &eval)?);
            let student = d.student_model();
            for nfe in EVAL_NFES {
                let x = student_samples(cfg, &student, &eval, nfe)?;
                let (sw, mmd) = eval.score(cfg, &x)?;
                rows.push(flashlab_core::checkpoint::MetricRecord { iter: ck.iter, nfe, metric: "sw".into(), value: sw });
                rows.push(flashlab_core::checkpoint::MetricRecord { iter: ck.iter, nfe, metric: "mmd".into(), value: mmd });
            }
        }
    }
    for r in rows.iter_mut().filter(|r| r.metric.starts_with("teacher")) {
        r.iter = ck.iter;
    }
    match &a.out {
        Some(path) => {
            let mut log = MetricsLog::open(path, cli.seed, &config_id(cfg), false)?;
            for r in &rows {
                log.write(r)?;
            }
        }
        None => {
            println!("metric,nfe,value");
            for r in &rows {
                println!("{},{},{}", r.metric, r.nfe, r.value);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::TrainTeacher(a) => train_teacher(&cli, a),
        Command::Distill(a) => distill(&cli, a),
        Command::Sample(a) => sample(&cli, a),
        Command::Ablate(a) => run_ablate(&cli, a),
        Command::Eval(a) => eval(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
