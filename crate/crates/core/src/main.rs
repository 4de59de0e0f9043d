use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smooth_clir::config::{parse_list, KeyValues};
use smooth_clir::corpus::{
    generate_synthetic, load_split, write_split, CorpusSplit, SplitName, SyntheticConfig, SYNTHETIC_KEYS,
};
use smooth_clir::encoder::Checkpoint;
use smooth_clir::gradcheck::{check_sosl_smoothness, run_suite, suite_summary};
use smooth_clir::loss::{curves_to_tsv, emit_loss_curves, LossKind, ThresholdVector};
use smooth_clir::metrics::{aggregate, per_query_jsonl};
use smooth_clir::optim::OptimizerSpec;
use smooth_clir::similarity::{field_to_tsv, sweep_gradient_field, GridSpec, SimilarityConfig};
use smooth_clir::trainer::{
    default_po, default_theta_grid, density_to_tsv, epsilon_sweep_tsv, experiment_epsilon_sweep,
    experiment_generalization_gap, experiment_loss_comparison, experiment_negative_sweep, export_score_density,
    generalization_gap_tsv, loss_comparison_tsv, loss_variants, negative_sweep_tsv, parse_theta_grid,
    per_query_from_samples, score_partition, summarize_density, train, TrainConfig, GAP_STEPS, GAP_STEP_CONSTANT,
    TRAIN_KEYS,
};
use smooth_clir::{Error, Result};

/// Keys used only by individual subcommands.
const EXTRA_KEYS: &[&str] = &[
    "losses",
    "epsilons",
    "theta_grid",
    "nr_counts",
    "sample_sizes",
    "seeds",
    "steps",
    "curve_step",
    "grid_lo",
    "grid_hi",
    "grid_steps",
    "fixed",
    "instances",
];

#[derive(Parser)]
#[command(
    name = "smooth-clir",
    version,
    about = "Cross-lingual retrieval with a smooth cosine and ordinal losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CorpusArg {
    /// Corpus directory; a synthetic corpus is generated from the config when absent
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic corpus
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-class score samples of a checkpoint
    Density {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train one model per loss on the same corpus
    CompareLoss {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Sweep epsilon with a threshold grid search per value
    SweepEps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Vary the number of NR documents per query
    SweepNeg {
        #[command(flatten)]
        common: Common,
    },
    /// Train/held-out loss gap against corpus size
    GenGap {
        #[command(flatten)]
        common: Common,
    },
    /// Loss value curves over the score range
    LossCurves {
        #[command(flatten)]
        common: Common,
    },
    /// Smooth-cosine partial derivative over a 2-d grid
    GradField {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference and smoothness checks; exits nonzero on failure
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_kv(common: &Common) -> Result<KeyValues> {
    let mut kv = match &common.config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::new(),
    };
    let allowed: Vec<&str> = TRAIN_KEYS
        .iter()
        .chain(SYNTHETIC_KEYS)
        .chain(EXTRA_KEYS)
        .copied()
        .collect();
    kv.ensure_known(&allowed)?;
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn synthetic_config(kv: &KeyValues) -> Result<SyntheticConfig> {
    SyntheticConfig::from_kv(&kv.subset(SYNTHETIC_KEYS))
}

fn train_config(kv: &KeyValues) -> Result<TrainConfig> {
    TrainConfig::from_kv(&kv.subset(TRAIN_KEYS))
}

fn corpus(kv: &KeyValues, arg: &CorpusArg) -> Result<CorpusSplit> {
    match &arg.corpus {
        Some(dir) => load_split(dir),
        None => {
            let cfg = synthetic_config(kv)?;
            generate_synthetic(&cfg, cfg.seed)
        }
    }
}

fn list_or<T>(kv: &KeyValues, key: &str, default: Vec<T>) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    kv.get(key).map_or(Ok(default), parse_list)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn check_vocab(ckpt: &Checkpoint, split: &CorpusSplit) -> Result<()> {
    let (a, b) = (ckpt.model.query.vocab_size(), ckpt.model.document.vocab_size());
    if a != split.vocab_a.size() || b != split.vocab_b.size() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint vocabularies {a}/{b} do not match corpus {}/{}",
            split.vocab_a.size(),
            split.vocab_b.size()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common } => {
            let kv = load_kv(&common)?;
            let cfg = synthetic_config(&kv)?;
            let split = generate_synthetic(&cfg, cfg.seed)?;
            write_split(&common.out, &split, Some(&cfg))?;
            println!(
                "generated {} queries, {} documents into {}",
                split.n_queries(),
                split.documents.len(),
                common.out.display()
            );
        }
        Command::Train { common, corpus: c } => {
            let kv = load_kv(&common)?;
            let cfg = train_config(&kv)?;
            let split = corpus(&kv, &c)?;
            let out = train(&cfg, &split)?;
            out.save(&common.out)?;
            let last = out.manifest.last_epoch();
            println!(
                "trained {} steps in {:.1}s; final train loss {:.6}",
                last.step,
                out.elapsed.as_secs_f64(),
                last.train_loss
            );
            if let Some(t) = &out.manifest.test {
                print!("{}", t.metrics.to_tsv());
            }
        }
        Command::Eval {
            common,
            corpus: c,
            checkpoint,
            split,
        } => {
            let kv = load_kv(&common)?;
            let cfg = train_config(&kv)?;
            let data = corpus(&kv, &c)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            check_vocab(&ckpt, &data)?;
            let name: SplitName = split.parse()?;
            let samples = score_partition(&ckpt.model, &data, name, &cfg.similarity()?)?;
            let per_query = per_query_from_samples(&samples);
            let report = aggregate(&per_query)?;
            write(&common.out, "metrics.tsv", &report.to_tsv())?;
            write(&common.out, "per_query.jsonl", &per_query_jsonl(&per_query))?;
            print!("{}", report.to_tsv());
        }
        Command::Density {
            common,
            corpus: c,
            checkpoint,
            split,
        } => {
            let kv = load_kv(&common)?;
            let cfg = train_config(&kv)?;
            let data = corpus(&kv, &c)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            check_vocab(&ckpt, &data)?;
            let samples = export_score_density(&ckpt.model, &data, split.parse()?, &cfg.similarity()?)?;
            write(&common.out, "density.tsv", &density_to_tsv(&samples))?;
            let summary = summarize_density(&samples, &cfg.thresholds)?;
            for c in &summary.per_class {
                println!("label {}: n = {}, mean score = {:.4}", c.label, c.count, c.mean);
            }
            println!("in segment: {:.4}", summary.in_segment);
        }
        Command::CompareLoss { common, corpus: c } => {
            let kv = load_kv(&common)?;
            let base = train_config(&kv)?;
            let losses = list_or(&kv, "losses", vec![LossKind::Sosl, LossKind::Mse, default_po()])?;
            let split = corpus(&kv, &c)?;
            let rows = experiment_loss_comparison(&loss_variants(&base, &losses), &split)?;
            for r in &rows {
                write(
                    &common.out,
                    &format!("density_{}.tsv", r.loss.name()),
                    &density_to_tsv(&r.train_density),
                )?;
            }
            let table = loss_comparison_tsv(&rows);
            write(&common.out, "loss_comparison.tsv", &table)?;
            print!("{table}");
        }
        Command::SweepEps { common, corpus: c } => {
            let kv = load_kv(&common)?;
            let base = train_config(
                &kv.subset(
                    &TRAIN_KEYS
                        .iter()
                        .copied()
                        .filter(|k| *k != "epsilon")
                        .collect::<Vec<_>>(),
                ),
            )?;
            let epsilons = list_or(&kv, "epsilons", vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0])?;
            let grid = match kv.get("theta_grid") {
                Some(raw) => parse_theta_grid(raw)?,
                None => default_theta_grid(),
            };
            let split = corpus(&kv, &c)?;
            let rows = experiment_epsilon_sweep(&base, &epsilons, &grid, &split)?;
            let table = epsilon_sweep_tsv(&rows);
            write(&common.out, "epsilon_sweep.tsv", &table)?;
            print!("{table}");
        }
        Command::SweepNeg { common } => {
            let kv = load_kv(&common)?;
            let base = train_config(&kv)?;
            let synthetic = synthetic_config(&kv)?;
            let counts = list_or(&kv, "nr_counts", vec![20, 40, 60, 80, 100])?;
            let rows = experiment_negative_sweep(&base, &synthetic, &counts)?;
            let table = negative_sweep_tsv(&rows);
            write(&common.out, "negative_sweep.tsv", &table)?;
            print!("{table}");
        }
        Command::GenGap { common } => {
            let mut kv = load_kv(&common)?;
            if kv.get("optimizer").is_none() {
                kv.set("optimizer", "sgd_ct");
            }
            // Sparse mean-pooled rows see small gradients; c/t needs a large c to move.
            if kv.get("c").is_none() {
                kv.set("c", GAP_STEP_CONSTANT);
            }
            let base = train_config(&kv)?;
            if !matches!(base.optimizer, OptimizerSpec::SgdCt { .. }) {
                return Err(Error::Config("gen-gap needs optimizer=sgd_ct".into()));
            }
            let synthetic = synthetic_config(&kv)?;
            let sizes = list_or(&kv, "sample_sizes", vec![250, 500, 1000, 2000])?;
            let seeds = list_or(&kv, "seeds", vec![0u64, 1, 2, 3, 4])?;
            let steps = kv.parse_opt("steps")?.unwrap_or(GAP_STEPS);
            let rows = experiment_generalization_gap(&base, &synthetic, &sizes, &seeds, steps)?;
            let table = generalization_gap_tsv(&rows);
            write(&common.out, "generalization_gap.tsv", &table)?;
            print!("{table}");
        }
        Command::LossCurves { common } => {
            let kv = load_kv(&common)?;
            let th: ThresholdVector = kv.parse_opt("thresholds")?.unwrap_or_default();
            let losses = list_or(&kv, "losses", vec![LossKind::Sosl, LossKind::Mse])?;
            let step = kv.parse_opt("curve_step")?.unwrap_or(1e-3);
            for loss in losses {
                let points = emit_loss_curves(loss, &th, step)?;
                write(
                    &common.out,
                    &format!("loss_curves_{}.tsv", loss.name()),
                    &curves_to_tsv(&points),
                )?;
            }
        }
        Command::GradField { common } => {
            let kv = load_kv(&common)?;
            let epsilon: f64 = kv.parse_opt("epsilon")?.unwrap_or(1.0);
            let cfg = SimilarityConfig::diagnostic(epsilon)?;
            let grid = GridSpec {
                lo: kv.parse_opt("grid_lo")?.unwrap_or(-1.0),
                hi: kv.parse_opt("grid_hi")?.unwrap_or(1.0),
                steps: kv.parse_opt("grid_steps")?.unwrap_or(41),
            };
            let fixed = list_or(&kv, "fixed", vec![1.0, 0.0])?;
            let field = sweep_gradient_field(&cfg, &grid, &fixed)?;
            write(&common.out, "grad_field.tsv", &field_to_tsv(&field))?;
        }
        Command::Gradcheck { common } => {
            let kv = load_kv(&common)?;
            let instances = kv.parse_opt("instances")?.unwrap_or(100usize);
            let seed = kv.parse_opt("seed")?.unwrap_or(0u64);
            let th: ThresholdVector = kv.parse_opt("thresholds")?.unwrap_or_default();
            let entries = run_suite(instances, seed)?;
            let smooth = check_sosl_smoothness(&th, 1e-4)?;
            let mut summary = suite_summary(&entries);
            summary.push_str(&format!(
                "sosl_smoothness\tmax|d|={:.6}\tmax_second_diff={:.6}\tbound=4\t{}\n",
                smooth.max_abs_derivative,
                smooth.max_second_difference,
                if smooth.passes { "ok" } else { "FAIL" }
            ));
            print!("{summary}");
            write(&common.out, "gradcheck.tsv", &summary)?;
            return Ok(smooth.passes && entries.iter().all(|e| e.passes()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
