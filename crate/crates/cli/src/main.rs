use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opis_core::config::{eval_dataset_seed, ExperimentConfig};
use opis_core::experiment::{self, ModelSnapshot};
use opis_core::harness::{
    build_branch_supervision, finite_diff_check, forward, random_case, Method, SupervisionContext, SupervisionMode,
    ToyModel,
};
use opis_core::OpisError;

#[derive(Parser)]
#[command(name = "opis", version, about = "Progressive instance-balanced supervision on a synthetic detection world")]
struct Cli {
    /// Experiment config (sectioned key = value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (train, eval) or file (compare).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides [train] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides [train] method.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Overrides [train] iterations.
    #[arg(long, global = true)]
    iterations_override: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes trainlog.csv, timing.csv, model.json and config.resolved.toml.
    Train,
    /// Evaluate a model snapshot on a regenerated scene set; writes metrics.json and detections.jsonl.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the evaluation set of the snapshot's root seed.
        #[arg(long)]
        dataset_seed: Option<u64>,
    },
    /// Train and evaluate every method x seed cell; writes a CSV with per-method medians.
    Compare {
        #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.to_vec())]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Worker threads; falls back to the available cores.
        #[arg(long, env = "OPIS_THREADS")]
        threads: Option<usize>,
    },
    /// Finite-difference check of the analytic gradient on a random model and scene.
    Gradcheck,
    /// Trace the negative sampler on one scene at one iteration.
    SampleDemo {
        #[arg(long)]
        iteration: Option<usize>,
    },
}

enum Failure {
    Config(String),
    Numerical(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<OpisError> for Failure {
    fn from(e: OpisError) -> Self {
        match e {
            OpisError::Config(msg) => Failure::Config(msg),
            OpisError::InvalidInput(_) => Failure::Config(e.to_string()),
            OpisError::Numerical { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(format!("io: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(method) = cli.method {
        cfg.train.method = method;
    }
    if let Some(iterations) = cli.iterations_override {
        cfg.train.iterations = iterations;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Other(format!("cannot create {}: {e}", path.display())))
}

fn cmd_train(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli)?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml_string())?;
    let run = experiment::run_training(&cfg)?;
    run.log.write_csv(create(&dir.join("trainlog.csv"))?)?;
    run.log.write_timing_csv(create(&dir.join("timing.csv"))?)?;
    let snapshot = ModelSnapshot { config: cfg.clone(), model: run.model };
    serde_json::to_writer(create(&dir.join("model.json"))?, &snapshot).map_err(|e| Failure::Other(e.to_string()))?;
    let last = run.log.rows.last().expect("at least two iterations");
    println!(
        "trained {} for {} iterations (seed {}); final loss midn {:.4} refinement {:?}",
        cfg.train.method,
        cfg.train.iterations,
        cfg.train.seed,
        last.loss_midn,
        last.loss_ref
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, model_path: &Path, dataset_seed: Option<u64>) -> CliResult<()> {
    let text = fs::read_to_string(model_path)
        .map_err(|e| Failure::Config(format!("cannot read model {}: {e}", model_path.display())))?;
    let snapshot: ModelSnapshot = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", model_path.display())))?;
    let seed = dataset_seed.unwrap_or_else(|| eval_dataset_seed(snapshot.config.train.seed));
    let (report, dets) = experiment::run_evaluation(&snapshot.config, &snapshot.model, seed)?;
    let dir = out_dir(cli)?;
    let mut w = create(&dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Failure::Other(e.to_string()))?;
    writeln!(w)?;
    opis_core::eval::write_detections(&dets, create(&dir.join("detections.jsonl"))?)?;
    println!("mAP {:.4} CorLoc {:.4} over {} scenes", report.map, report.corloc, report.num_scenes);
    Ok(())
}

fn cmd_compare(cli: &Cli, methods: &[Method], seeds: &[u64], threads: Option<usize>) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let threads = threads
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = experiment::compare(&cfg, methods, seeds, threads)?;
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("compare.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    experiment::write_compare_csv(&rows, create(&path)?)?;
    for (m, (map, corloc)) in experiment::medians(&rows) {
        println!("{m:<9} median mAP {map:.4} CorLoc {corloc:.4}");
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let case = random_case(seed)?;
    let rep = finite_diff_check(&case.model, &case.scene, &case.ctx, SupervisionMode::Frozen)?;
    println!(
        "gradcheck seed {seed}: method {} iteration {} params {} max relative error {:.3e} (param {})",
        case.ctx.method,
        case.ctx.schedule.iteration,
        rep.analytic.len(),
        rep.max_rel_error,
        rep.worst_param
    );
    if rep.max_rel_error <= 1e-5 {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed: relative error {:.3e} exceeds 1e-5", rep.max_rel_error)))
    }
}

fn cmd_sample_demo(cli: &Cli, iteration: Option<usize>) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let tc = cfg.train_config();
    let iteration = iteration.unwrap_or(tc.finetune_start());
    if iteration > tc.final_iteration() {
        return Err(Failure::Config(format!(
            "iteration {iteration} is past the final iteration {}",
            tc.final_iteration()
        )));
    }
    let schedule = tc.schedule(iteration);
    let method = if tc.method.uses_pib() { tc.method } else { Method::PibOnly };
    let scene = cfg.data.clone();
    let scene = opis_core::harness::generate_dataset(&scene, opis_core::config::train_dataset_seed(tc.seed), 1)?
        .remove(0);
    let model = ToyModel::init(scene.label.num_classes(), scene.features.ncols(), tc.num_branches, tc.init_std, tc.seed)?;
    let scores = forward(&model, &scene)?;
    let ctx = SupervisionContext { method, schedule, seed: tc.seed };

    println!(
        "scene {} ({} proposals, classes {:?}), iteration {iteration}, phase {}, method {method}",
        scene.id,
        scene.num_proposals(),
        scene.label.present().collect::<Vec<_>>(),
        schedule.phase().as_str()
    );
    match schedule.progress()? {
        None => {
            println!("normal phase: instance balancing starts at iteration {}", tc.finetune_start());
            return Ok(());
        }
        Some(t) => println!(
            "T = {t:.4}, mu = {:.4}, neglect threshold = {:.4}",
            schedule.ratio()?.unwrap_or(f64::NAN),
            schedule.neglect_threshold()?
        ),
    }
    for k in 1..=tc.num_branches {
        let sup = build_branch_supervision(&scene, &scores, k, &ctx)?;
        println!("branch {k}: zeta = {:.4}", sup.zeta);
        for t in &sup.traces {
            if t.neglect_checked {
                println!(
                    "  class {}: n_P {} n_N 0, no negatives; positives kept {}",
                    t.class, t.n_pos, t.kept_pos
                );
            } else {
                println!(
                    "  class {}: n_P {} n_N {} mu {:.3} target {} bins {:?} selected {:?} random {} |N'| {}",
                    t.class, t.n_pos, t.n_neg, t.mu, t.target, t.bin_population, t.bin_selected, t.random_fill, t.kept_neg
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Eval { model, dataset_seed } => cmd_eval(&cli, model, *dataset_seed),
        Command::Compare { methods, seeds, threads } => cmd_compare(&cli, methods, seeds, *threads),
        Command::Gradcheck => cmd_gradcheck(&cli),
        Command::SampleDemo { iteration } => cmd_sample_demo(&cli, *iteration),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config error", m),
                Failure::Numerical(m) | Failure::Other(m) => ("error", m),
            };
            eprintln!("opis: {kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}
