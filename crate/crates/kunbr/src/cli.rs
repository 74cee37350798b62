//! Command-line entry point: data generation, memorization training,
//! unlearning, density reports, the fine-tuning attack, evaluation, and
//! the multi-method multi-seed comparison. All outputs are written
//! atomically and recorded in a hash-verified run manifest.

use crate::checkpoint::{self, Precision};
use crate::config::RunConfig;
use crate::corpus::{export_splits, generate_corpus, import_splits, split, DatasetSplits};
use crate::density::{
    density_csv, estimate_density, partition_blocks, score_blocks, select_blocks,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_reports, mcq_accuracy, prepare_seed, recovery, run_seed, rtt_attack, utility_eval,
    Aggregate, Algorithm, ExperimentReport,
};
use crate::manifest::RunManifest;
use crate::model::{init_model, ParameterStore};
use crate::pipeline::run_kunbr;
use crate::svg::{bar_chart, Series};
use crate::train::{memorize, train_csv};
use crate::unlearn::{run_unlearning, trace_csv, UnlearnConfig};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Writes a file atomically: temp file in the target directory, fsync,
/// then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "kunbr",
    version,
    about = "Desk-scale unlearning laboratory: density-guided block unlearning \
             vs. five baselines on a synthetic fact corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON run configuration (defaults used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the corpus/experiment seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to KUNBR_OUT_DIR, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint storage precision.
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact corpus and its retain/forget splits.
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a fresh model until it memorizes the corpus.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Apply one unlearning method to the memorized checkpoint.
    Unlearn {
        #[command(flatten)]
        common: CommonArgs,
        /// GA, GD, NPO, RIA, RMU, or KUnBR.
        #[arg(long)]
        method: String,
    },
    /// Per-layer density report for a checkpoint against the forget set.
    Density {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to analyze (default: the run's memorized model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune an unlearned checkpoint on the attacker subset.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Unlearned checkpoint to attack.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Proceed even if the checkpoint is not a registered unlearning
        /// output.
        #[arg(long)]
        force: bool,
    },
    /// Measure pre/post-attack accuracy and utility for one method's
    /// checkpoints.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        method: String,
    },
    /// Full multi-method, multi-seed comparison table and charts.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated method names (default: all six).
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    precision: Precision,
}

impl Ctx {
    fn new(common: &CommonArgs) -> Result<Ctx> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.corpus.seed = seed;
        }
        let out = common
            .out
            .clone()
            .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
            .or_else(|| std::env::var_os("KUNBR_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        config.validate()?;
        Ok(Ctx {
            config,
            out,
            precision: Precision::parse(&common.precision)?,
        })
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::load_or_new(&self.out, &self.config.hash())
    }

    fn splits_path(&self) -> PathBuf {
        self.out.join("splits.jsonl")
    }

    fn load_splits(&self) -> Result<DatasetSplits> {
        let path = self.splits_path();
        if !path.exists() {
            return Err(Error::Validation(format!(
                "{} not found; run generate-data first",
                path.display()
            )));
        }
        let reader = std::io::BufReader::new(std::fs::File::open(&path)?);
        import_splits(reader)
    }

    fn ensure_splits(&self) -> Result<DatasetSplits> {
        if self.splits_path().exists() {
            self.load_splits()
        } else {
            cmd_generate_data(self)
        }
    }

    fn load_stage_model(&self, stage: &str) -> Result<ParameterStore> {
        let manifest = RunManifest::load(&self.out).map_err(|_| {
            Error::Validation(format!(
                "no manifest in {}; earlier stages have not run",
                self.out.display()
            ))
        })?;
        let path = manifest.verify(&self.out, stage)?;
        checkpoint::load(&path)
    }
}

fn cmd_generate_data(ctx: &Ctx) -> Result<DatasetSplits> {
    let c = &ctx.config.corpus;
    let records = generate_corpus(c.n_facts, c.seed)?;
    let splits = split(
        &records,
        c.forget_fraction,
        c.t_fraction,
        c.seed.wrapping_add(1),
    )?;
    let mut buf = Vec::new();
    export_splits(&splits, &mut buf)?;
    write_atomic(&ctx.splits_path(), &buf)?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, "splits", "splits.jsonl")?;
    manifest.finalize(&ctx.out)?;
    println!(
        "wrote {} ({} retain, {} forget-T, {} forget-V)",
        ctx.splits_path().display(),
        splits.retain.len(),
        splits.forget_t.len(),
        splits.forget_v.len()
    );
    Ok(splits)
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let splits = ctx.ensure_splits()?;
    let c = &ctx.config;
    let mut model_cfg = c.model.clone();
    model_cfg.seed = model_cfg.seed.wrapping_add(c.corpus.seed);
    let mut model = init_model(&model_cfg)?;
    let trace = memorize(
        &mut model,
        &splits,
        c.train.lr,
        c.train.batch_size,
        c.train.max_steps,
        c.train.target_nll,
        c.corpus.seed.wrapping_add(2),
    )?;
    checkpoint::save(&model, ctx.precision, &ctx.out.join("memorized.kunbr"))?;
    write_atomic(&ctx.out.join("train_trace.csv"), train_csv(&trace).as_bytes())?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, "memorized", "memorized.kunbr")?;
    manifest.register(&ctx.out, "train_trace", "train_trace.csv")?;
    manifest.finalize(&ctx.out)?;
    let acc = mcq_accuracy(&model, &{
        let mut all = splits.retain.clone();
        all.extend(splits.forget_all());
        all
    })?;
    println!(
        "memorized in {} steps; corpus accuracy {:.1}%",
        trace.len(),
        100.0 * acc
    );
    Ok(())
}

fn cmd_unlearn(ctx: &Ctx, method: &str) -> Result<()> {
    let algorithm = Algorithm::parse(method)?;
    let splits = ctx.load_splits()?;
    let model = ctx.load_stage_model("memorized")?;
    let seed = ctx.config.corpus.seed;
    let stem = format!("unlearned_{}", algorithm.name().to_lowercase());
    let ckpt_name = format!("{stem}.kunbr");
    let trace_name = format!("{stem}_trace.csv");
    let mut manifest = ctx.manifest();
    match algorithm {
        Algorithm::Baseline(m) => {
            let cfg = UnlearnConfig {
                method: m,
                seed,
                ..ctx.config.unlearn.clone()
            };
            let mut out = model.clone();
            let mask = crate::model::FreezeMask::all(&out);
            let trace = run_unlearning(&mut out, &splits, &cfg, &mask)?;
            checkpoint::save(&out, ctx.precision, &ctx.out.join(&ckpt_name))?;
            write_atomic(&ctx.out.join(&trace_name), trace_csv(&trace).as_bytes())?;
        }
        Algorithm::BlockPipeline => {
            let mut cfg = ctx.config.kunbr.clone();
            cfg.seed = seed;
            let (out, report) = run_kunbr(&model, &splits, &cfg)?;
            checkpoint::save(&out, ctx.precision, &ctx.out.join(&ckpt_name))?;
            write_atomic(
                &ctx.out.join(&trace_name),
                trace_csv(&report.warmup_trace).as_bytes(),
            )?;
            let report_name = format!("{stem}_report.json");
            write_atomic(
                &ctx.out.join(&report_name),
                &serde_json::to_vec_pretty(&report)?,
            )?;
            manifest.register(&ctx.out, &format!("{stem}_report"), &report_name)?;
        }
    }
    manifest.register(&ctx.out, &stem, &ckpt_name)?;
    manifest.register(&ctx.out, &format!("{stem}_trace"), &trace_name)?;
    manifest.finalize(&ctx.out)?;
    println!("wrote {}", ctx.out.join(&ckpt_name).display());
    Ok(())
}

fn cmd_density(ctx: &Ctx, checkpoint_path: Option<&Path>) -> Result<()> {
    let splits = ctx.load_splits()?;
    let model = match checkpoint_path {
        Some(p) => checkpoint::load(p)?,
        None => ctx.load_stage_model("memorized")?,
    };
    let tok = crate::corpus::Tokenizer::default();
    let examples: Result<Vec<_>> = splits
        .forget_all()
        .iter()
        .map(|r| crate::corpus::to_example(&tok, r))
        .collect();
    let batches: Vec<Vec<_>> = examples?
        .chunks(ctx.config.unlearn.batch_size)
        .map(<[crate::loss::Example]>::to_vec)
        .collect();
    let density = estimate_density(&model, &batches)?;
    let cfg = &ctx.config.kunbr;
    let partition = partition_blocks(model.config.h_layers, cfg.m_blocks)?;
    let (scores, selected) = match &density.k_norm {
        Some(k_norm) => {
            let scores = score_blocks(&partition, k_norm)?;
            let selected =
                select_blocks(&scores, &partition, cfg.top_k, cfg.head_exclude_layers)?;
            (scores, selected)
        }
        None => (Vec::new(), Vec::new()),
    };
    let csv = density_csv(&density, &partition, None);
    write_atomic(&ctx.out.join("density.csv"), csv.as_bytes())?;
    let json = serde_json::json!({
        "density": density,
        "block_scores": scores,
        "selected_blocks": selected,
    });
    write_atomic(&ctx.out.join("density.json"), &serde_json::to_vec_pretty(&json)?)?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, "density_csv", "density.csv")?;
    manifest.register(&ctx.out, "density_json", "density.json")?;
    manifest.finalize(&ctx.out)?;
    println!("wrote {}", ctx.out.join("density.csv").display());
    Ok(())
}

/// A checkpoint qualifies as an attack target when some manifest stage in
/// its directory records it under an `unlearned_*` name with a matching
/// hash.
fn is_registered_unlearned(path: &Path) -> bool {
    let Some(dir) = path.parent() else {
        return false;
    };
    let Ok(manifest) = RunManifest::load(dir) else {
        return false;
    };
    let Some(file_name) = path.file_name().and_then(|n| n.to_str()) else {
        return false;
    };
    manifest.stages.iter().any(|(stage, entry)| {
        stage.starts_with("unlearned_")
            && !stage.ends_with("_trace")
            && entry.path == file_name
            && manifest.verify(dir, stage).is_ok()
    })
}

fn cmd_attack(ctx: &Ctx, checkpoint_path: &Path, force: bool) -> Result<()> {
    if !is_registered_unlearned(checkpoint_path) && !force {
        return Err(Error::Validation(format!(
            "{} is not a hash-verified unlearning output; \
             run unlearn first or pass --force",
            checkpoint_path.display()
        )));
    }
    let splits = ctx.load_splits()?;
    let mut model = checkpoint::load(checkpoint_path)?;
    let a = &ctx.config.attack;
    rtt_attack(
        &mut model,
        &splits.forget_t,
        a.lr,
        a.epochs,
        a.batch_size,
        a.target_acc,
        ctx.config.corpus.seed.wrapping_add(3),
    )?;
    let stem = checkpoint_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let name = format!("attacked_{stem}.kunbr");
    checkpoint::save(&model, ctx.precision, &ctx.out.join(&name))?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, &format!("attacked_{stem}"), &name)?;
    manifest.finalize(&ctx.out)?;
    println!(
        "wrote {} (T accuracy {:.1}%)",
        ctx.out.join(&name).display(),
        100.0 * mcq_accuracy(&model, &splits.forget_t)?
    );
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, method: &str) -> Result<()> {
    let algorithm = Algorithm::parse(method)?;
    let splits = ctx.load_splits()?;
    let stem = format!("unlearned_{}", algorithm.name().to_lowercase());
    let unlearned = ctx.load_stage_model(&stem)?;
    let attacked = ctx.load_stage_model(&format!("attacked_{stem}"))?;
    let a_unlearn = mcq_accuracy(&unlearned, &splits.forget_v)?;
    let a_rtt = mcq_accuracy(&attacked, &splits.forget_v)?;
    let attack_t_accuracy = mcq_accuracy(&attacked, &splits.forget_t)?;
    let (retain_accuracy, retain_perplexity) = utility_eval(&unlearned, &splits.retain)?;
    let report = ExperimentReport {
        method: algorithm.name().to_string(),
        seed: ctx.config.corpus.seed,
        a_unlearn,
        a_rtt,
        a_recover: recovery(a_unlearn, a_rtt),
        retain_accuracy,
        retain_perplexity,
        attack_t_accuracy,
        config_hash: ctx.config.hash(),
    };
    let name = format!("report_{}.json", algorithm.name().to_lowercase());
    write_atomic(&ctx.out.join(&name), &serde_json::to_vec_pretty(&report)?)?;
    let csv_name = format!("report_{}.csv", algorithm.name().to_lowercase());
    write_atomic(
        &ctx.out.join(&csv_name),
        crate::eval::report_csv(std::slice::from_ref(&report)).as_bytes(),
    )?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, &format!("report_{}", algorithm.name().to_lowercase()), &name)?;
    manifest.finalize(&ctx.out)?;
    println!(
        "{}: A_Unlearn {:.1}% A_RTT {:.1}% A_Recover {:.1}%",
        report.method,
        100.0 * report.a_unlearn,
        100.0 * report.a_rtt,
        100.0 * report.a_recover
    );
    Ok(())
}

fn aggregate_csv(aggregates: &[Aggregate]) -> String {
    let mut out = String::from(
        "method,n_seeds,a_unlearn_pct_mean,a_unlearn_pct_std,a_rtt_pct_mean,a_rtt_pct_std,\
         a_recover_pct_mean,a_recover_pct_std,retain_acc_pct_mean,retain_ppl_mean,failed_seeds\n",
    );
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.4},{}\n",
            a.method,
            a.n_seeds,
            100.0 * a.mean_a_unlearn,
            100.0 * a.std_a_unlearn,
            100.0 * a.mean_a_rtt,
            100.0 * a.std_a_rtt,
            100.0 * a.mean_a_recover,
            100.0 * a.std_a_recover,
            100.0 * a.mean_retain_accuracy,
            a.mean_retain_perplexity,
            a.failed_seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(";")
        ));
    }
    out
}

fn cmd_compare(ctx: &Ctx, methods: &[Algorithm], seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed required".into()));
    }
    let experiment = ctx.config.to_experiment();
    let mut reports: Vec<ExperimentReport> = Vec::new();
    let mut failures: Vec<(Algorithm, u64)> = Vec::new();
    for &seed in seeds {
        // One memorized model per seed, shared across every method.
        let prepared = prepare_seed(&experiment, seed);
        match prepared {
            Err(e) => {
                eprintln!("seed {seed}: preparation failed: {e}");
                for &m in methods {
                    failures.push((m, seed));
                }
            }
            Ok((model, splits)) => {
                for &algorithm in methods {
                    match run_seed(&model, &splits, algorithm, &experiment, seed) {
                        Ok(r) => reports.push(r),
                        Err(e) => {
                            eprintln!("seed {seed} {}: {e}", algorithm.name());
                            failures.push((algorithm, seed));
                        }
                    }
                }
            }
        }
    }
    let mut aggregates = Vec::new();
    for &algorithm in methods {
        let method_reports: Vec<ExperimentReport> = reports
            .iter()
            .filter(|r| r.method == algorithm.name())
            .cloned()
            .collect();
        let failed: Vec<u64> = failures
            .iter()
            .filter(|(m, _)| *m == algorithm)
            .map(|&(_, s)| s)
            .collect();
        if method_reports.is_empty() {
            return Err(Error::Validation(format!(
                "all seeds failed for {}",
                algorithm.name()
            )));
        }
        aggregates.push(aggregate_reports(algorithm.name(), &method_reports, failed));
    }
    write_atomic(
        &ctx.out.join("compare_per_seed.csv"),
        crate::eval::report_csv(&reports).as_bytes(),
    )?;
    write_atomic(
        &ctx.out.join("compare_aggregate.csv"),
        aggregate_csv(&aggregates).as_bytes(),
    )?;
    let categories: Vec<String> = aggregates.iter().map(|a| a.method.clone()).collect();
    let pct = |f: fn(&Aggregate) -> f64| -> Vec<f64> {
        aggregates.iter().map(|a| 100.0 * f(a)).collect()
    };
    let chart = bar_chart(
        "Forget-set accuracy before/after attack and recovery (%)",
        &categories,
        &[
            Series {
                name: "A_Unlearn".into(),
                values: pct(|a| a.mean_a_unlearn),
            },
            Series {
                name: "A_RTT".into(),
                values: pct(|a| a.mean_a_rtt),
            },
            Series {
                name: "A_Recover".into(),
                values: pct(|a| a.mean_a_recover),
            },
        ],
    );
    write_atomic(&ctx.out.join("compare.svg"), chart.as_bytes())?;
    let mut manifest = ctx.manifest();
    manifest.register(&ctx.out, "compare_per_seed", "compare_per_seed.csv")?;
    manifest.register(&ctx.out, "compare_aggregate", "compare_aggregate.csv")?;
    manifest.register(&ctx.out, "compare_chart", "compare.svg")?;
    manifest.finalize(&ctx.out)?;
    print!("{}", aggregate_csv(&aggregates));
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::Validation(format!("bad seed {t:?}")))
        })
        .collect()
}

fn parse_methods(s: Option<&str>) -> Result<Vec<Algorithm>> {
    match s {
        None => Ok(Algorithm::all().to_vec()),
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Algorithm::parse)
            .collect(),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common } => {
            cmd_generate_data(&Ctx::new(&common)?)?;
            Ok(())
        }
        Command::Train { common } => cmd_train(&Ctx::new(&common)?),
        Command::Unlearn { common, method } => cmd_unlearn(&Ctx::new(&common)?, &method),
        Command::Density { common, checkpoint } => {
            cmd_density(&Ctx::new(&common)?, checkpoint.as_deref())
        }
        Command::Attack {
            common,
            checkpoint,
            force,
        } => cmd_attack(&Ctx::new(&common)?, &checkpoint, force),
        Command::Evaluate { common, method } => cmd_evaluate(&Ctx::new(&common)?, &method),
        Command::Compare {
            common,
            methods,
            seeds,
        } => {
            let ctx = Ctx::new(&common)?;
            let methods = parse_methods(methods.as_deref())?;
            let seeds = parse_seeds(&seeds)?;
            cmd_compare(&ctx, &methods, &seeds)
        }
    }
}

/// Parses process arguments, runs the selected command, and returns the
/// process exit code (0 success, 2 validation, 3 numeric, 4 I/O).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_and_methods_parse() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
        assert_eq!(parse_methods(None).unwrap().len(), 6);
        let ms = parse_methods(Some("GD,kunbr")).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[1], Algorithm::BlockPipeline);
    }

    #[test]
    fn write_atomic_creates_parents_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/dir/file.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
    }
}
