use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomgen::analysis::{bootstrap_stat, consistent_patterns, estimate_epsilon, BootstrapInterval, EpsilonFit, PatternFrequencies};
use anomgen::cpt::simulate_choices;
use anomgen::dataset::load_dataset;
use anomgen::lottery::sample_random_menu;
use anomgen::mlp::train_mlp;
use anomgen::pipeline::{
    self, atomic_write, categorize_records, cluster_records, generate, read_csv, read_records, stage_seed,
    verify_records, with_workers, write_category_table, write_csv, write_json, write_records, PipelineConfig, Procedure, Stage,
    FORMAT_VERSION,
};
use anomgen::predictor::{evaluate, fit_cpt_params};
use anomgen::{run_rng, Menu, PredictorHandle};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "anomgen", version, about = "Generate, verify and analyze expected-utility anomalies")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Defaults to the available parallelism.
    #[arg(long, global = true, env = "ANOMGEN_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate choices of the weighting model on random menus (CSV).
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of menus; overrides `simulate.menus`.
        #[arg(long)]
        menus: Option<usize>,
    },
    /// Train a network on a choice dataset.
    TrainMlp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit weighting parameters to a choice dataset.
    FitCpt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the adversarial generator.
    Adversarial {
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the morphing generator.
    Morph {
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify and categorize random menu pairs.
    Baseline {
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach parametrized and any-utility verdicts.
    Verify {
        /// Record streams; repeat to concatenate.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Categorize flagged records and attach clustering features.
    Categorize {
        /// Record streams; repeat to concatenate.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster categorized records; writes id, cluster, PC1, PC2.
    Cluster {
        /// Record streams; repeat to concatenate.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the records with cluster ids.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Estimate the choice-error rate from pattern counts on two menus.
    Epsilon {
        /// CSV with columns `pattern,count`; patterns are `00`, `01`, `10`, `11`.
        #[arg(long)]
        freqs: PathBuf,
        /// JSON array of the two menus.
        #[arg(long)]
        menus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Category counts and per-procedure verification rates.
    Report {
        /// Record streams; repeat to concatenate.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-procedure summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct FreqRow {
    pattern: String,
    count: u64,
}

#[derive(Serialize)]
struct SummaryRow {
    procedure: &'static str,
    runs: usize,
    parametrized: usize,
    any_utility: usize,
    flagged: usize,
    parametrized_rate: f64,
    any_utility_rate: f64,
}

#[derive(Serialize)]
struct EpsilonOutput {
    consistent_patterns: Vec<String>,
    fit: EpsilonFit,
    bootstrap: BootstrapInterval,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => pipeline::load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn pattern_index(s: &str) -> Result<usize> {
    match s {
        "00" => Ok(0),
        "01" => Ok(1),
        "10" => Ok(2),
        "11" => Ok(3),
        _ => bail!("unknown pattern `{s}`; expected 00, 01, 10 or 11"),
    }
}

fn pattern_name(p: [u8; 2]) -> String {
    format!("{}{}", p[0], p[1])
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<pipeline::AnomalyRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(out)
}

fn generate_to(cfg: &PipelineConfig, procedure: Procedure, runs: usize, out: &Path) -> Result<Vec<pipeline::AnomalyRecord>> {
    let predictor = cfg.predictor.load()?;
    let records = generate(cfg, &predictor, procedure, runs)?;
    write_records(out, &records)?;
    Ok(records)
}

fn run(command: &Command, cfg: &PipelineConfig) -> Result<Value> {
    let summary = match command {
        Command::Simulate { out, menus } => {
            let model = match cfg.predictor.load()? {
                PredictorHandle::Cpt(m) | PredictorHandle::CptFit(m) => m,
                PredictorHandle::Mlp(_) => bail!("simulate needs a weighting-model predictor"),
            };
            let n = menus.unwrap_or(cfg.simulate.menus);
            if n == 0 {
                bail!("--menus must be at least 1");
            }
            let (low, high) = cfg.theory.basis.domain();
            let mut rng = run_rng(stage_seed(cfg.seed, Stage::Simulate), 0);
            let menus = (0..n)
                .map(|_| sample_random_menu(&mut rng, cfg.theory.payoffs, low, high))
                .collect::<anomgen::Result<Vec<_>>>()?;
            let ds = simulate_choices(&mut rng, &menus, &model, cfg.simulate.kind)?;
            atomic_write(out, |w| {
                writeln!(w, "#version={FORMAT_VERSION}")?;
                ds.to_writer(w)
            })?;
            json!({"command": "simulate", "rows": ds.len(), "out": out})
        }
        Command::TrainMlp { input, out } => {
            let ds = load_dataset(input)?;
            let train_cfg = anomgen::mlp::TrainConfig {
                seed: stage_seed(cfg.seed, Stage::Train),
                ..cfg.train.clone()
            };
            let report = train_mlp(&ds, &train_cfg)?;
            let metrics = evaluate(&report.model, &ds)?;
            write_json(out, "anomgen-mlp", &report.model)?;
            json!({
                "command": "train-mlp",
                "epochs": report.loss_history.len() - 1,
                "final_loss": report.loss_history.last(),
                "mse": metrics.mse,
                "cross_entropy": metrics.cross_entropy,
                "out": out,
            })
        }
        Command::FitCpt { input, out } => {
            let fit = fit_cpt_params(&load_dataset(input)?)?;
            write_json(out, "anomgen-cpt-fit", &fit)?;
            json!({
                "command": "fit-cpt",
                "delta": fit.params.delta,
                "gamma": fit.params.gamma,
                "converged": fit.converged,
                "out": out,
            })
        }
        Command::Adversarial { inits, out } => {
            let records = generate_to(cfg, Procedure::Adversarial, inits.unwrap_or(cfg.runs.adversarial), out)?;
            let flags = records.iter().filter(|r| r.flag.is_some()).count();
            json!({"command": "adversarial", "records": records.len(), "flagged_runs": flags, "out": out})
        }
        Command::Morph { inits, out } => {
            let records = generate_to(cfg, Procedure::Morphing, inits.unwrap_or(cfg.runs.morph), out)?;
            let flags = records.iter().filter(|r| r.flag.is_some()).count();
            json!({"command": "morph", "records": records.len(), "flagged_runs": flags, "out": out})
        }
        Command::Baseline { inits, out } => {
            let predictor = cfg.predictor.load()?;
            let mut records = generate(cfg, &predictor, Procedure::Baseline, inits.unwrap_or(cfg.runs.baseline))?;
            verify_records(&mut records, &cfg.verification)?;
            categorize_records(&mut records, cfg.analysis.category_tol)?;
            write_records(out, &records)?;
            let r = pipeline::report(&records)?;
            json!({"command": "baseline", "summary": r.procedures, "out": out})
        }
        Command::Verify { input, out } => {
            let mut records = read_all(input)?;
            verify_records(&mut records, &cfg.verification)?;
            write_records(out, &records)?;
            let r = pipeline::report(&records)?;
            json!({"command": "verify", "summary": r.procedures, "out": out})
        }
        Command::Categorize { input, out } => {
            let mut records = read_all(input)?;
            categorize_records(&mut records, cfg.analysis.category_tol)?;
            write_records(out, &records)?;
            let r = pipeline::report(&records)?;
            let counts: serde_json::Map<String, Value> =
                r.categories.into_iter().map(|c| (c.category, c.total.into())).collect();
            json!({"command": "categorize", "categories": counts, "out": out})
        }
        Command::Cluster { input, out, k, records: records_out } => {
            let mut records = read_all(input)?;
            let k = k.unwrap_or(cfg.analysis.clusters);
            let rows = cluster_records(
                &mut records,
                k,
                cfg.analysis.kmeans_restarts,
                stage_seed(cfg.seed, Stage::Cluster),
            )?;
            write_csv(out, &rows)?;
            if let Some(p) = records_out {
                write_records(p, &records)?;
            }
            let mut sizes = vec![0usize; k];
            rows.iter().for_each(|r| sizes[r.cluster] += 1);
            json!({"command": "cluster", "anomalies": rows.len(), "k": k, "sizes": sizes, "out": out})
        }
        Command::Epsilon { freqs, menus, out } => {
            let mut counts = [0u64; 4];
            for row in read_csv::<FreqRow>(freqs)? {
                counts[pattern_index(&row.pattern)?] += row.count;
            }
            let text = std::fs::read_to_string(menus).with_context(|| format!("reading {}", menus.display()))?;
            let menus: Vec<Menu> = serde_json::from_str(&text)?;
            let menus: [Menu; 2] = menus
                .try_into()
                .map_err(|m: Vec<Menu>| anyhow!("expected 2 menus, got {}", m.len()))?;
            let consistent = consistent_patterns(&menus)?;
            let freqs = PatternFrequencies::new(counts);
            let fit = estimate_epsilon(&freqs, &consistent)?;
            let bootstrap = bootstrap_stat(
                &freqs,
                |f| estimate_epsilon(f, &consistent).map(|e| e.epsilon),
                cfg.analysis.bootstrap_reps,
                cfg.analysis.bootstrap_level,
                stage_seed(cfg.seed, Stage::Bootstrap),
            )?;
            let output = EpsilonOutput {
                consistent_patterns: consistent.iter().map(|&p| pattern_name(p)).collect(),
                fit,
                bootstrap,
            };
            if let Some(p) = out {
                write_json(p, "anomgen-epsilon", &output)?;
            }
            let mut v = serde_json::to_value(&output)?;
            v["command"] = "epsilon".into();
            v
        }
        Command::Report { input, out, summary } => {
            let records = read_all(input)?;
            let r = pipeline::report(&records)?;
            write_category_table(out, &r)?;
            if let Some(p) = summary {
                let rows: Vec<SummaryRow> = r
                    .procedures
                    .iter()
                    .map(|(proc_, s)| SummaryRow {
                        procedure: proc_.as_str(),
                        runs: s.runs,
                        parametrized: s.parametrized,
                        any_utility: s.any_utility,
                        flagged: s.flagged,
                        parametrized_rate: s.parametrized_rate,
                        any_utility_rate: s.any_utility_rate,
                    })
                    .collect();
                write_csv(p, &rows)?;
            }
            json!({"command": "report", "summary": r.procedures, "out": out})
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<Value> {
        let cfg = load_config(&cli)?;
        let workers = match cli.workers {
            Some(0) => bail!("--workers must be at least 1"),
            Some(w) => w,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        with_workers(workers, || run(&cli.command, &cfg))?
    })();
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
