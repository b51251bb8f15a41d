use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rflow_core::anchored::{anchored_generate, AnchoredConfig};
use rflow_core::config::{PipelineConfig, RawConfig};
use rflow_core::coupling::CouplingSet;
use rflow_core::evalharness::{cfg_sweep, few_step_sweep, straightness_eval, EvalReport, EvalSpec};
use rflow_core::pipeline::{Runner, Step, PIPELINE};
use rflow_core::solver::{euler_final, euler_simulate, straightness, Guided, StraightnessSummary};
use rflow_core::tensornet::Checkpoint;
use rflow_core::toydata::{sample_noise, ToyTask};
use rflow_core::util::sha256_hex;
use rflow_core::velocityfield::{GuidanceSpec, Stage, VelocityField};
use rflow_core::Error;

#[derive(Parser)]
#[command(name = "rflow", version, about = "Rectified-flow training, reflow and distillation on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage (fm, rf1, couplings, rf2, distill) or the whole pipeline.
    Train {
        stage: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Iteration count for the stage (every stage for `pipeline`).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override a config key: `section.key=value`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Re-run steps even when their recorded artifacts are current.
        #[arg(long)]
        no_resume: bool,
    },
    /// Draw samples from a checkpoint and write them as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Condition every sample on this label instead of drawing labels.
        #[arg(long)]
        label: Option<usize>,
        /// Use anchored optimization for guided sampling.
        #[arg(long)]
        anchored: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-step and guidance sweeps; writes JSON and CSV reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional config; its [eval] and [anchored] sections supply defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        omegas: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `few-step`, `cfg` or `all`.
        #[arg(long, default_value = "all")]
        sweep: String,
        /// Also run anchored sampling in the guidance sweep.
        #[arg(long)]
        anchored: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Mean straightness of sampled trajectories.
    Straightness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-trajectory CSVs for the first rows; `{i}` is the row index.
        #[arg(long)]
        dump: Option<String>,
        #[arg(long, default_value_t = 8)]
        dump_count: usize,
    },
    /// Print checkpoint, coupling-file or manifest metadata.
    Inspect { path: PathBuf },
}

/// Error plus the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            stage,
            config,
            seed,
            iters,
            out_dir,
            overrides,
            no_resume,
        } => cmd_train(&stage, &config, seed, iters, out_dir, &overrides, no_resume),
        Command::Sample {
            checkpoint,
            steps,
            omega,
            n,
            seed,
            label,
            anchored,
            out,
        } => cmd_sample(&checkpoint, steps, omega, n, seed, label, anchored, &out),
        Command::Eval {
            checkpoint,
            config,
            steps,
            omegas,
            samples,
            repetitions,
            seed,
            sweep,
            anchored,
            out_dir,
        } => cmd_eval(EvalArgs {
            checkpoint,
            config,
            steps,
            omegas,
            samples,
            repetitions,
            seed,
            sweep,
            anchored,
            out_dir,
        }),
        Command::Straightness {
            checkpoint,
            n,
            steps,
            seed,
            dump,
            dump_count,
        } => cmd_straightness(&checkpoint, n, steps, seed, dump.as_deref(), dump_count),
        Command::Inspect { path } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn steps_for(stage: &str) -> Result<Vec<Step>, Failure> {
    Ok(match stage {
        "fm" => vec![Step::Train(Stage::Fm)],
        "rf1" => vec![Step::Train(Stage::Rf1)],
        "rf2" => vec![Step::Train(Stage::Rf2)],
        "distill" => vec![Step::Train(Stage::Distilled)],
        "pipeline" => PIPELINE.to_vec(),
        "couplings" => vec![],
        other => {
            return Err(usage(format!(
                "unknown stage `{other}` (expected fm, rf1, couplings, rf2, distill or pipeline)"
            )))
        }
    })
}

fn stage_section(stage: &str) -> &'static str {
    match stage {
        "fm" => "stage.fm",
        "rf1" => "stage.rf1",
        "rf2" => "stage.rf2",
        _ => "stage.distill",
    }
}

fn cmd_train(
    stage: &str,
    config: &Path,
    seed: Option<u64>,
    iters: Option<usize>,
    out_dir: Option<PathBuf>,
    overrides: &[String],
    no_resume: bool,
) -> CliResult {
    let mut steps = steps_for(stage)?;
    let mut raw = RawConfig::load(config)?;
    for o in overrides {
        raw.set(o)?;
    }
    if let Some(s) = seed {
        raw.set(&format!("run.seed={s}"))?;
    }
    if let Some(dir) = out_dir {
        raw.set(&format!("run.out_dir={}", dir.display()))?;
    }
    if let Some(n) = iters {
        let stages: Vec<&str> = match stage {
            "pipeline" => vec!["fm", "rf1", "rf2", "distill"],
            "couplings" => vec![],
            s => vec![s],
        };
        for s in stages {
            raw.set(&format!("{}.iterations={n}", stage_section(s)))?;
        }
    }
    let cfg = PipelineConfig::from_raw(raw)?;
    if stage == "couplings" {
        steps.push(Step::Couplings(cfg.couplings.source));
    }
    let mut runner = Runner::open(&cfg)?;
    runner.resume = !no_resume;
    for step in steps {
        let ran = runner.run_step(step)?;
        let note = if ran { "done" } else { "up to date" };
        eprintln!("{}: {note}", step.name());
    }
    runner.save()?;
    println!("{}", runner.manifest.digest);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(VelocityField, String), Failure> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let field = VelocityField::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    Ok((field, sha256_hex(&bytes)))
}

fn task_for(field: &VelocityField, ck_path: &Path) -> Result<ToyTask, Failure> {
    let ck = Checkpoint::from_bytes(&std::fs::read(ck_path)?)?;
    let name = ck
        .metadata
        .iter()
        .find(|(k, _)| k == "task")
        .map(|(_, v)| v.as_str());
    let task = match name {
        Some(n) => ToyTask::by_name(n)?,
        None => ToyTask::gauss8(),
    };
    if task.dim != field.spec.dim || task.num_conditions != field.spec.num_conditions {
        return Err(usage("checkpoint does not match its task"));
    }
    Ok(task)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    steps: usize,
    omega: f64,
    n: usize,
    seed: u64,
    label: Option<usize>,
    anchored: bool,
    out: &Path,
) -> CliResult {
    let (field, _) = load_checkpoint(checkpoint)?;
    let mut steps = steps;
    if steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    if field.stage == Stage::Distilled && steps > 1 {
        eprintln!("warning: distilled checkpoint is a one-step model; using --steps 1 instead of {steps}");
        steps = 1;
    }
    let k = field.spec.num_conditions;
    if let Some(l) = label {
        if l >= k {
            return Err(usage(format!("label {l} outside [0, {k})")));
        }
    }
    let guidance = GuidanceSpec::new(omega)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| label.unwrap_or_else(|| rng.random_range(0..k))).collect();
    let z0 = sample_noise(&mut rng, n, field.spec.dim);

    let mut csv = String::from("label");
    for d in 0..field.spec.dim {
        csv.push_str(&format!(",z{d}"));
    }
    csv.push('\n');
    if n > 0 {
        let z1 = if anchored {
            anchored_generate(&field, &z0, &labels, steps, omega, &AnchoredConfig::default())?.final_state
        } else {
            euler_final(&Guided { field: &field, spec: &guidance }, &z0, &labels, steps)?
        };
        for (i, l) in labels.iter().enumerate() {
            csv.push_str(&l.to_string());
            for x in z1.row(i) {
                csv.push_str(&format!(",{x}"));
            }
            csv.push('\n');
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, csv)?;
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    steps: Option<Vec<usize>>,
    omegas: Option<Vec<f64>>,
    samples: Option<usize>,
    repetitions: Option<usize>,
    seed: Option<u64>,
    sweep: String,
    anchored: bool,
    out_dir: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (field, hash) = load_checkpoint(&args.checkpoint)?;
    let task = task_for(&field, &args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => PipelineConfig::from_raw(RawConfig::load(p)?)?,
        None => PipelineConfig::parse("")?,
    };
    let (few, guided) = match args.sweep.as_str() {
        "few-step" => (true, false),
        "cfg" => (false, true),
        "all" => (true, true),
        other => return Err(usage(format!("unknown sweep `{other}`"))),
    };
    let spec = EvalSpec {
        samples: args.samples.unwrap_or(cfg.eval.samples),
        repetitions: args.repetitions.unwrap_or(cfg.eval.repetitions),
        seed: args.seed.unwrap_or(cfg.eval.seed),
    };
    let id = format!("{}-{}", field.stage, &hash[..12]);
    let mut report = EvalReport::new(&id, &spec);
    if few {
        let mut steps = args.steps.clone().unwrap_or(cfg.eval.steps.clone());
        if field.stage == Stage::Distilled && steps.iter().any(|&t| t > 1) {
            eprintln!("warning: distilled checkpoint is a one-step model; evaluating T = 1 only");
            steps = vec![1];
        }
        let (points, rows) = few_step_sweep(&field, &id, &task, &steps, &spec)?;
        report.few_step = points;
        report.rows.extend(rows);
    }
    if guided {
        let omegas = args.omegas.clone().unwrap_or(cfg.eval.omegas.clone());
        let anchor = args.anchored.then_some(&cfg.couplings.anchor);
        let (points, rows) = cfg_sweep(&field, &id, &task, &omegas, cfg.eval.cfg_steps, anchor, &spec)?;
        report.cfg = points;
        report.rows.extend(rows);
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let stem = args.out_dir.join(format!("eval_{id}"));
    std::fs::write(stem.with_extension("json"), report.to_json()? + "\n")?;
    std::fs::write(stem.with_extension("csv"), report.to_csv())?;
    for p in report.few_step.iter().chain(&report.cfg) {
        println!(
            "T={} omega={} anchored={} W2={:.5} ± {:.5} energy={:.5} ± {:.5}",
            p.steps, p.omega, p.anchored, p.w2.mean, p.w2.std_err, p.energy.mean, p.energy.std_err
        );
    }
    println!("{}", stem.with_extension("json").display());
    Ok(())
}

fn cmd_straightness(checkpoint: &Path, n: usize, steps: usize, seed: u64, dump: Option<&str>, dump_count: usize) -> CliResult {
    let (field, _) = load_checkpoint(checkpoint)?;
    let task = task_for(&field, checkpoint)?;
    let summary: StraightnessSummary = straightness_eval(&field, &task, n, steps, seed)?;
    if let Some(pattern) = dump {
        let m = dump_count.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = sample_noise(&mut rng, m, field.spec.dim);
        let labels: Vec<usize> = (0..m).map(|i| i % field.spec.num_conditions).collect();
        let traj = euler_simulate(&field, &z0, &labels, steps)?;
        straightness(&traj)?;
        traj.write_csv(pattern)?;
    }
    println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
    Ok(())
}

fn cmd_inspect(path: &Path) -> CliResult {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(b"RFLOW") {
        let ck = Checkpoint::from_bytes(&bytes)?;
        println!("checkpoint {}", path.display());
        println!("sha256 = {}", sha256_hex(&bytes));
        println!("widths = {:?}", ck.net.widths());
        println!("parameters = {}", ck.net.param_count());
        for (k, v) in &ck.metadata {
            println!("{k} = {v}");
        }
    } else if bytes.starts_with(b"RFCPL") {
        let set = CouplingSet::from_bytes(&bytes)?;
        println!("couplings {}", path.display());
        println!("sha256 = {}", sha256_hex(&bytes));
        println!("records = {}", set.len());
        println!("dim = {}", set.dim);
        println!("num_conditions = {}", set.num_conditions);
        for (k, v) in &set.metadata {
            println!("{k} = {v}");
        }
    } else if let Ok(value) = serde_json::from_slice::<serde_json::Value>(&bytes) {
        println!("{}", serde_json::to_string_pretty(&value).map_err(Error::from)?);
    } else {
        return Err(usage(format!("{} is not a checkpoint, coupling file or manifest", path.display())));
    }
    Ok(())
}
