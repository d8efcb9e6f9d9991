use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metafault::data::corpus::{load_corpus, write_synth_corpus, Preprocess, SynthCorpusOptions};
use metafault::data::synth::{distributed_taxonomy, punctual_taxonomy};
use metafault::gradcheck;
use metafault::harness::{
    run_ablation, run_artificial_to_real, run_meta_test, run_plan, AblationGrid, ExperimentPlan,
    ResultRow, ResultTable,
};
use metafault::meta::{InnerLrTable, OuterOptimizer};
use metafault::model::{checkpoint, validate_params, ModelSpec};

#[derive(Parser)]
#[command(
    name = "metafault",
    version,
    about = "Few-shot bearing-fault diagnosis with meta-learned initializations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the plan's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-task adaptation (1 is the determinism reference).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train per a plan file; writes checkpoints, curves and results.
    Train {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Meta-test a saved checkpoint under a plan's protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Learned-rate table JSON saved next to the checkpoint; defaults to
        /// the plan's fixed alpha when absent.
        #[arg(long)]
        lr_table: Option<PathBuf>,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Optimizer x inner-rate grid, or a train-size sweep when --train-sizes
    /// is given.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "adam,rmsprop,sgd")]
        optimizers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        train_sizes: Option<Vec<usize>>,
    },
    /// Artificial-to-real transfer: meta-train on source classes, meta-test
    /// on target classes, one row per shot count.
    A2r {
        #[arg(long)]
        plan: PathBuf,
        /// Source class labels; defaults to the plan's train classes.
        #[arg(long, value_delimiter = ',')]
        source: Option<Vec<usize>>,
        /// Target class labels; defaults to the plan's test classes.
        #[arg(long, value_delimiter = ',')]
        target: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        shots: Vec<usize>,
    },
    /// Emit a synthetic corpus in the container format.
    Synth {
        /// Punctual-damage classes (1 healthy + up to 9 faults).
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Additional distributed-damage classes, labels 11 and up.
        #[arg(long, default_value_t = 0)]
        distributed: usize,
        #[arg(long, default_value_t = 2)]
        records_per_class: usize,
        /// Samples per record.
        #[arg(long, default_value_t = 20480)]
        duration: usize,
        #[arg(long, default_value_t = 2048)]
        stride: usize,
        /// "none" or "fft".
        #[arg(long, default_value = "none")]
        preprocess: String,
    },
    /// Run the differentiation oracle suite.
    Gradcheck {
        /// Random instances per primitive.
        #[arg(long, default_value_t = 8)]
        seeds: u64,
        /// Parameter components probed on the full model.
        #[arg(long, default_value_t = 110)]
        model_samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn load_plan(path: &Path, seed: Option<u64>) -> Result<ExperimentPlan, String> {
    let mut plan = ExperimentPlan::load(path).map_err(|e| e.to_string())?;
    if let Some(seed) = seed {
        plan.cfg.seed = seed;
    }
    Ok(plan)
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, String> {
    out.as_deref().ok_or_else(|| "--out is required for this subcommand".to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train { plan } => {
            let plan = load_plan(&plan, cli.seed)?;
            let out = require_out(&cli.out)?;
            let outcome =
                run_plan(&plan, "train", Some(out), cli.threads).map_err(|e| e.to_string())?;
            print!("{}", ResultTable { rows: vec![outcome.row] }.to_text());
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, lr_table, plan } => {
            let plan = load_plan(&plan, cli.seed)?;
            let theta = checkpoint::load::<f32>(&ckpt).map_err(|e| e.to_string())?;
            let spec = ModelSpec { num_ways: plan.n_way };
            validate_params(&spec, &theta).map_err(|e| e.to_string())?;
            let table = match lr_table {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| format!("{}: {e}", path.display()))?;
                    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
                }
                None => InnerLrTable::new(theta.len(), plan.cfg.inner_steps, plan.cfg.alpha),
            };
            let (pools, _) = load_corpus(&plan.manifest).map_err(|e| e.to_string())?;
            let test_pools = pools
                .restrict_classes(&plan.meta_test_classes)
                .map_err(|e| e.to_string())?;
            let test = run_meta_test(&plan, &theta, &table, &test_pools, 0)
                .map_err(|e| e.to_string())?;
            let table = ResultTable {
                rows: vec![ResultRow {
                    setting: "eval".to_string(),
                    mean_acc: test.mean_acc,
                    std: test.std,
                    trials: 1,
                    seconds: 0.0,
                }],
            };
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
                table.write(out).map_err(|e| e.to_string())?;
            }
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Ablate { plan, optimizers, rates, train_sizes } => {
            let plan = load_plan(&plan, cli.seed)?;
            let grid = match train_sizes {
                Some(sizes) => AblationGrid::TrainSize { sizes },
                None => AblationGrid::OptimizerLr {
                    optimizers: optimizers
                        .iter()
                        .map(|s| parse_optimizer(s))
                        .collect::<Result<_, _>>()?,
                    rates,
                },
            };
            let table = run_ablation(&plan, &grid, cli.out.as_deref(), cli.threads)
                .map_err(|e| e.to_string())?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::A2r { plan, source, target, shots } => {
            let plan = load_plan(&plan, cli.seed)?;
            let source = source.unwrap_or_else(|| plan.meta_train_classes.clone());
            let target = target.unwrap_or_else(|| plan.meta_test_classes.clone());
            let table =
                run_artificial_to_real(&plan, &source, &target, &shots, cli.out.as_deref(), cli.threads)
                    .map_err(|e| e.to_string())?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Synth { classes, distributed, records_per_class, duration, stride, preprocess } => {
            let out = require_out(&cli.out)?;
            let preprocess = match preprocess.as_str() {
                "none" => Preprocess::None,
                "fft" => Preprocess::Fft,
                other => return Err(format!("unknown preprocess {other:?} (use none or fft)")),
            };
            let mut taxonomy = punctual_taxonomy(classes);
            taxonomy.extend(distributed_taxonomy(distributed));
            let opts = SynthCorpusOptions {
                records_per_class,
                duration,
                stride,
                preprocess,
                ..SynthCorpusOptions::default()
            };
            let manifest = write_synth_corpus(out, &taxonomy, &opts, cli.seed.unwrap_or(0))
                .map_err(|e| e.to_string())?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Gradcheck { seeds, model_samples } => {
            let mut report = gradcheck::check_primitives(seeds);
            report.merge(gradcheck::check_model(model_samples, cli.seed.unwrap_or(7)));
            report.merge(gradcheck::check_second_order(seeds));
            println!(
                "gradcheck: {} cases, {} comparisons, max rel err {:.3e}",
                report.cases, report.compared, report.max_rel_err
            );
            if report.passed() {
                Ok(())
            } else {
                for f in report.failures.iter().take(10) {
                    eprintln!("fail: {f}");
                }
                Err(format!("{} gradient comparisons out of tolerance", report.failures.len()))
            }
        }
    }
}

fn parse_optimizer(name: &str) -> Result<OuterOptimizer, String> {
    match name {
        "adam" => Ok(OuterOptimizer::Adam),
        "rmsprop" => Ok(OuterOptimizer::RmsProp),
        "sgd" => Ok(OuterOptimizer::Sgd),
        other => Err(format!("unknown optimizer {other:?} (use adam, rmsprop or sgd)")),
    }
}
