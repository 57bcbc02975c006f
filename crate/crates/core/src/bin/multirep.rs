use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use multirep::corpus::{generate_synthetic, load_descriptions_json, load_fewrel_json, save_descriptions_json, save_fewrel_json, SplitRole};
use multirep::episodes::EpisodeSpec;
use multirep::harness::{
    ablate, evaluate, export_embeddings, run_gradcheck_suite, sweep_m, train, write_ablation_csv, write_sweep_csv,
    AblationArm, Checkpoint, Data, DataPaths, RunConfig, SweepSummary,
};
use multirep::multirep::write_embedding_csv;
use multirep::objectives::ScoreMode;
use multirep::{Error, Result};

#[derive(Parser)]
#[command(name = "multirep", version, about = "Few-shot relation classification with multiple representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and evaluate it on the held-out split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for checkpoints, logs and metrics.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Number of evaluation episodes (defaults to the config value).
        #[arg(long)]
        episodes: Option<usize>,
        /// Write metrics.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate ablation arms.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated arms (default: full plus the seven variants).
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Train and evaluate every representation subset of each size.
    SweepM {
        #[command(flatten)]
        run: RunArgs,
        /// Subset sizes (default 1..=5).
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Write support-set embeddings of a checkpoint to CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 120)]
        count: usize,
        /// Also write one row per individual representation.
        #[arg(long)]
        components: bool,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of every operation, the encoder and the loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus in FewRel format.
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// FewRel-format JSON. For training this is the train split; for eval and
    /// export it is the split to evaluate. Synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation split for checkpoint selection (train only).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Held-out split evaluated after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    no_descriptions: bool,
    #[arg(long, value_enum)]
    score_mode: Option<ScoreMode>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

fn override_spec(spec: &mut EpisodeSpec, a: &RunArgs) {
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(k) = a.k {
        spec.k = k;
    }
    if a.q.is_some() {
        spec.q = a.q;
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        override_spec(&mut c.train_episode, self);
        override_spec(&mut c.eval_episode, self);
        if self.no_descriptions {
            c.set_descriptions(false);
        }
        if let Some(m) = self.score_mode {
            c.loss.score_mode = m;
        }
        if let Some(t) = self.tau {
            c.loss.tau = t;
        }
        if let Some(i) = self.iterations {
            c.iterations = i;
        }
        c.validate()?;
        Ok(c)
    }

    fn training_data(&self, c: &RunConfig) -> Result<Data> {
        Data::load(
            &DataPaths {
                train: self.data.clone(),
                val: self.val.clone(),
                eval: self.eval_data.clone(),
                descriptions: self.descriptions.clone(),
            },
            c,
        )
    }

    /// The split to evaluate: `--data` if given, else the synthetic held-out split.
    fn target(&self, c: &RunConfig) -> Result<(multirep::corpus::DatasetSplit, multirep::corpus::Descriptions)> {
        match &self.data {
            Some(p) => {
                let split = load_fewrel_json(p, SplitRole::Test)?;
                let descs = match &self.descriptions {
                    Some(d) => load_descriptions_json(d)?,
                    None => Default::default(),
                };
                Ok((split, descs))
            }
            None => {
                let s = generate_synthetic(&c.synthetic, c.synthetic_seed)?;
                Ok((s.eval, s.descriptions))
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let c = run.config()?;
            let data = run.training_data(&c)?;
            let (_, metrics) = train(&c, &data, Some(&out))?;
            println!(
                "{}-way {}-shot accuracy {:.4} ± {:.4} over {} seed(s); outputs in {}",
                metrics.n_way,
                metrics.k_shot,
                metrics.accuracy_mean,
                metrics.accuracy_std,
                metrics.per_seed.len(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            run,
            episodes,
            out,
        } => {
            let c = run.config()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (split, descs) = run.target(&c)?;
            let mut spec = c.eval_episode.clone();
            spec.with_descriptions = ck.loss.use_descriptions;
            let m = evaluate(&ck, &split, &descs, &spec, episodes.unwrap_or(c.eval_episodes), &c.seeds)?;
            println!("{}-way {}-shot accuracy {:.4} ± {:.4}", m.n_way, m.k_shot, m.accuracy_mean, m.accuracy_std);
            if let Some(p) = out {
                write_json(&p, &m)?;
            }
        }
        Command::Ablate { run, arms, out } => {
            let c = run.config()?;
            let data = run.training_data(&c)?;
            let arms: Vec<AblationArm> = if arms.is_empty() {
                std::iter::once(AblationArm::Full).chain(AblationArm::TABLE).collect()
            } else {
                arms.iter().map(|a| a.parse()).collect::<Result<_>>()?
            };
            let rows = ablate(&c, &data, &arms)?;
            fs::create_dir_all(&out)?;
            write_ablation_csv(File::create(out.join("ablation.csv"))?, &rows)?;
            write_ablation_csv(std::io::stdout(), &rows)?;
        }
        Command::SweepM { run, m, out } => {
            let c = run.config()?;
            let data = run.training_data(&c)?;
            let ms = if m.is_empty() { (1..=5).collect() } else { m };
            let rows = sweep_m(&c, &data, &ms)?;
            fs::create_dir_all(&out)?;
            write_sweep_csv(File::create(out.join("sweep.csv"))?, &rows)?;
            let summary = SweepSummary::from_rows(&rows);
            let mut w = csv::Writer::from_writer(File::create(out.join("sweep_summary.csv"))?);
            w.write_record(["M", "mean", "subset_std"]).map_err(|e| Error::Validation(e.to_string()))?;
            for s in &summary {
                println!("M={} mean {:.4} subset std {:.4}", s.m, s.mean, s.subset_std);
                w.write_record([s.m.to_string(), format!("{:.6}", s.mean), format!("{:.6}", s.subset_std)])
                    .map_err(|e| Error::Validation(e.to_string()))?;
            }
            w.flush()?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            run,
            count,
            components,
            out,
        } => {
            let c = run.config()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (split, descs) = run.target(&c)?;
            let mut spec = c.eval_episode.clone();
            spec.with_descriptions = false;
            let seed = c.seeds[0];
            let rows = export_embeddings(&ck, &split, "eval", &descs, &spec, count, seed, components)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_embedding_csv(BufWriter::new(File::create(&out)?), &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Gradcheck { trials, seed, out } => {
            let summary = run_gradcheck_suite(trials, seed)?;
            let mut failed = Vec::new();
            for r in &summary.reports {
                if !r.passed() {
                    let f = &r.failures[0];
                    println!(
                        "FAIL {}: {} element {} analytic {:.6e} numeric {:.6e} rel err {:.3e}",
                        r.name, f.input, f.index, f.analytic, f.numeric, f.rel_err
                    );
                    failed.push(r.name.clone());
                }
            }
            println!(
                "{} checks, max relative error {:.3e}, {:.1} s",
                summary.reports.len(),
                summary.max_rel_err(),
                summary.seconds
            );
            if let Some(p) = out {
                write_json(&p, &summary)?;
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(format!("failing checks: {}", failed.join(", "))));
            }
        }
        Command::GenSynthetic { config, seed, out } => {
            let c = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let s = generate_synthetic(&c.synthetic, seed.unwrap_or(c.synthetic_seed))?;
            fs::create_dir_all(&out)?;
            save_fewrel_json(&s.train, out.join("train.json"))?;
            save_fewrel_json(&s.eval, out.join("eval.json"))?;
            save_descriptions_json(&s.descriptions, out.join("descriptions.json"))?;
            println!(
                "wrote {} train and {} eval relations to {}",
                s.train.num_relations(),
                s.eval.num_relations(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
