//! Experiment driver over the faithdist library: dataset generation,
//! teacher training, distillation, attacking, bounding, agreement,
//! reporting, and the alpha ablation. Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 stage failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use faithdist::attacks::{emp_lb, AttackConfig, InputRegion};
use faithdist::bounds::faith_ub_with;
use faithdist::data::{generate_synthetic2d, generate_synthetic_images, write_idx, Synthetic2dSpec, SyntheticImageSpec};
use faithdist::distillation::{accuracy, adversarial_train, distill, Method};
use faithdist::error::Error;
use faithdist::metrics::{empirical_distillation_agreement, population_stats};
use faithdist::pipeline::{ablate_alpha, run_pipeline, ExperimentConfig, ResultsStore};
use faithdist::{FeedForwardNetwork, Result, TeacherStudentPair};

#[derive(Parser)]
#[command(name = "faithdist", about = "Teacher-student faithfulness experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the evaluation subset size (0 = full test split).
    #[arg(long)]
    eval_count: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("config {}: {e}", self.config.display())))?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.eval_count {
            cfg.eval_count = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train the teacher network.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Distill one or all configured students from the trained teacher.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Restrict to one method (default: every configured student).
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Empirical lower bounds (PGD) over the evaluation subset.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        method: Method,
        /// Radius; defaults to every entry of the configured grid.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Certified upper bounds over the evaluation subset.
    Bound {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Empirical distillation agreement over the evaluation subset.
    Agree {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Run every stage and print the summary table.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        /// Recompute completed stages.
        #[arg(long)]
        force: bool,
    },
    /// Distill FD students over a list of loss weights and compare bounds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated alpha values, e.g. 0.5,0.75,1.0.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Generate a seeded synthetic dataset on disk.
    GenData {
        /// `2d` writes train/test CSVs; `images` writes IDX pairs.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_) | Error::Usage(_) | Error::Json(_) | Error::ShapeMismatch { .. } => 2,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::IndexOutOfRange { .. }
        | Error::UnsupportedDimension { .. } => 3,
        Error::Stage { .. } | Error::Attack(_) | Error::NonFinite(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Loads the teacher, training it first if its model file is absent.
fn ensure_teacher(cfg: &ExperimentConfig, store: &ResultsStore) -> Result<FeedForwardNetwork> {
    let path = store.model_path("teacher");
    if !path.exists() {
        let (train, test) = cfg.dataset.load(cfg.seed)?;
        let init = FeedForwardNetwork::init(&cfg.teacher_arch, cfg.seed)?;
        let outcome = adversarial_train(
            init,
            &train,
            &test,
            &cfg.teacher.recipe,
            cfg.teacher.epsilon,
            &cfg.teacher.attack,
        )?;
        outcome.network.save(&path)?;
        println!(
            "trained teacher: clean accuracy {:.4} (epoch {})",
            accuracy(&outcome.network, &test)?,
            outcome.best_epoch
        );
    }
    FeedForwardNetwork::load(&path)
}

fn ensure_student(cfg: &ExperimentConfig, store: &ResultsStore, method: Method) -> Result<FeedForwardNetwork> {
    let path = store.model_path(&format!("student-{method}"));
    if !path.exists() {
        let student_cfg = cfg
            .students
            .iter()
            .find(|s| s.method == method)
            .ok_or_else(|| Error::Usage(format!("method {method} is not configured")))?;
        let teacher = ensure_teacher(cfg, store)?;
        let (train, test) = cfg.dataset.load(cfg.seed)?;
        let outcome = distill(&teacher, &cfg.student_arch, &train, &test, student_cfg)?;
        outcome.network.save(&path)?;
        println!(
            "distilled {method} student: clean accuracy {:.4} (epoch {})",
            accuracy(&outcome.network, &test)?,
            outcome.best_epoch
        );
    }
    FeedForwardNetwork::load(&path)
}

fn load_pair(cfg: &ExperimentConfig, store: &ResultsStore, method: Method) -> Result<TeacherStudentPair> {
    let teacher = ensure_teacher(cfg, store)?;
    let student = ensure_student(cfg, store, method)?;
    TeacherStudentPair::new(teacher, student)
}

fn epsilons(cfg: &ExperimentConfig, requested: Option<f64>) -> Vec<f64> {
    match requested {
        Some(e) => vec![e],
        None => cfg.epsilon_grid.clone(),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { config } => {
            let cfg = config.load()?;
            let store = ResultsStore::open(&cfg.output_dir)?;
            let teacher = ensure_teacher(&cfg, &store)?;
            let (_, test) = cfg.dataset.load(cfg.seed)?;
            println!("teacher clean accuracy: {:.4}", accuracy(&teacher, &test)?);
        }
        Command::Distill { config, method } => {
            let cfg = config.load()?;
            let store = ResultsStore::open(&cfg.output_dir)?;
            let methods: Vec<Method> = match method {
                Some(m) => vec![m],
                None => cfg.students.iter().map(|s| s.method).collect(),
            };
            let (_, test) = cfg.dataset.load(cfg.seed)?;
            for m in methods {
                let student = ensure_student(&cfg, &store, m)?;
                println!("{m} student clean accuracy: {:.4}", accuracy(&student, &test)?);
            }
        }
        Command::Attack { config, method, epsilon } => {
            let cfg = config.load()?;
            let store = ResultsStore::open(&cfg.output_dir)?;
            let pair = load_pair(&cfg, &store, method)?;
            let (_, test) = cfg.dataset.load(cfg.seed)?;
            let eval = if cfg.eval_count == 0 { test } else { test.take(cfg.eval_count) };
            for eps in epsilons(&cfg, epsilon) {
                let attack = AttackConfig::fifty_step(eps, cfg.seed);
                let mut values = Vec::with_capacity(eval.len());
                for (i, x) in eval.inputs.iter().enumerate() {
                    let region = InputRegion::unit_box(x.clone(), eps)?;
                    values.push(emp_lb(&pair, &region, &attack.for_example(i as u64))?.objective_value);
                }
                let (mean, std) = population_stats(&values);
                println!("emp_lb method={method} eps={eps} mean={mean:.6} std={std:.6} n={}", values.len());
            }
        }
        Command::Bound { config, method, epsilon } => {
            let cfg = config.load()?;
            let store = ResultsStore::open(&cfg.output_dir)?;
            let pair = load_pair(&cfg, &store, method)?;
            let (_, test) = cfg.dataset.load(cfg.seed)?;
            let eval = if cfg.eval_count == 0 { test } else { test.take(cfg.eval_count) };
            for eps in epsilons(&cfg, epsilon) {
                let mut values = Vec::with_capacity(eval.len());
                for x in &eval.inputs {
                    let region = InputRegion::unit_box(x.clone(), eps)?;
                    values.push(faith_ub_with(&pair, &region, cfg.bound_method)?);
                }
                let (mean, std) = population_stats(&values);
                println!("faith_ub method={method} eps={eps} mean={mean:.6} std={std:.6} n={}", values.len());
            }
        }
        Command::Agree { config, method, epsilon } => {
            let cfg = config.load()?;
            let store = ResultsStore::open(&cfg.output_dir)?;
            let pair = load_pair(&cfg, &store, method)?;
            let (_, test) = cfg.dataset.load(cfg.seed)?;
            let eval = if cfg.eval_count == 0 { test } else { test.take(cfg.eval_count) };
            for eps in epsilons(&cfg, epsilon) {
                let attack = AttackConfig::fifty_step(eps, cfg.seed);
                let a = empirical_distillation_agreement(&pair, &eval, eps, &attack)?;
                println!("agreement method={method} eps={eps} value={a:.6} n={}", eval.len());
            }
        }
        Command::Report { config, force } => {
            let cfg = config.load()?;
            let store = run_pipeline(&cfg, force)?;
            print!("{}", fs::read_to_string(store.summary_csv_path())?);
        }
        Command::Ablate { config, alphas } => {
            let cfg = config.load()?;
            let store = ablate_alpha(&cfg, &alphas)?;
            print!("{}", fs::read_to_string(store.root.join("ablation.csv"))?);
        }
        Command::GenData { kind, out, seed, train_count, test_count } => {
            fs::create_dir_all(&out)?;
            match kind.as_str() {
                "2d" => {
                    let mut spec = Synthetic2dSpec::default();
                    if let Some(n) = train_count {
                        spec.train_count = n;
                    }
                    if let Some(n) = test_count {
                        spec.test_count = n;
                    }
                    let (train, test) = generate_synthetic2d(&spec, seed)?;
                    for (name, ds) in [("train", &train), ("test", &test)] {
                        let mut csv = String::from("x0,x1,label\n");
                        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
                            csv.push_str(&format!("{},{},{y}\n", x.get(0), x.get(1)));
                        }
                        fs::write(out.join(format!("{name}.csv")), csv)?;
                    }
                    println!("wrote {} train and {} test rows to {}", train.len(), test.len(), out.display());
                }
                "images" => {
                    let mut spec = SyntheticImageSpec::default();
                    if let Some(n) = train_count {
                        spec.train_count = n;
                    }
                    if let Some(n) = test_count {
                        spec.test_count = n;
                    }
                    let (train, test) = generate_synthetic_images(&spec, seed)?;
                    for (name, ds) in [("train", &train), ("test", &test)] {
                        let images: Vec<Vec<u8>> = ds
                            .inputs
                            .iter()
                            .map(|x| x.data().iter().map(|&v| (v * 255.0).round() as u8).collect())
                            .collect();
                        let labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
                        write_idx(
                            out.join(format!("{name}-images.idx")),
                            out.join(format!("{name}-labels.idx")),
                            28,
                            28,
                            &images,
                            &labels,
                        )?;
                    }
                    println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
                }
                other => {
                    return Err(Error::Usage(format!("unknown dataset kind `{other}` (expected `2d` or `images`)")));
                }
            }
        }
    }
    Ok(())
}
