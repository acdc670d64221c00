//! Command-line front end: demonstration collection, two-stage
//! training, the evaluation matrix, ablations, latency benchmarks, and
//! report regeneration. Every command is deterministic for a given
//! config and seed — rerunning reproduces byte-identical output files
//! (wall-clock latency numbers go to stdout only, never into files).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tracksim::config::Config;
use tracksim::controller::recompute_aggregates;
use tracksim::features::{Normalizer, D_FEAT};
use tracksim::harness::{
    ablate, check_artifacts_match, collect_demos, evaluate, latency_table, load_policy,
    load_selector, read_results_csv, read_trace, store_policy, store_selector, train_policy,
    train_selector, write_report_txt, write_results_csv, write_traces, AblateKind, Dataset,
    EvalArtifacts, Method, MethodRow,
};
use tracksim::io::Artifact;
use tracksim::rng::child_seed;

#[derive(Parser)]
#[command(
    name = "tracksim",
    about = "Deterministic multi-target tracking experiments: expert demonstrations, diffusion policies, Bayesian expert selection"
)]
struct Cli {
    /// Flat key-value config file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; all randomness derives from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Artifact directory (inputs and outputs)
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rule-based experts and log demonstration windows
    Collect,
    /// Train the expert-conditioned diffusion policy and the unconditioned variant
    TrainPolicy,
    /// Train the selector bank (Bayesian reward heads and baselines)
    TrainSelector,
    /// Run the method matrix and write results, traces, and the report
    Eval {
        /// Evaluate over 5 episodes instead of the configured count
        #[arg(long)]
        paper_episodes: bool,
    },
    /// Sweep selection strategies or the pessimism coefficient
    Ablate {
        #[arg(long, value_enum)]
        kind: AblateArg,
    },
    /// Benchmark replan latency (results printed, not written to files)
    Latency,
    /// Regenerate the report from stored results, verifying traces
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Strategy,
    Lambda,
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.tsim")
}
fn policy_path(out: &Path) -> PathBuf {
    out.join("policy.tsim")
}
fn policy_uncond_path(out: &Path) -> PathBuf {
    out.join("policy_uncond.tsim")
}
fn selector_path(out: &Path) -> PathBuf {
    out.join("selector.tsim")
}

fn load_dataset(out: &Path) -> Result<Dataset> {
    let p = dataset_path(out);
    let a = Artifact::read_kind(&p, "dataset")
        .with_context(|| format!("loading dataset {}", p.display()))?;
    Ok(Dataset::load(&a)?)
}

fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| child_seed(seed, &format!("eval/ep{i}")))
        .collect()
}

/// Loads whatever checkpoints exist under `out`. The feature
/// normalizer comes from the selector, else the policy, else the
/// dataset, else identity (rule-only runs never consult it).
struct LoadedArtifacts {
    policy: Option<(tracksim::policy::Denoiser, tracksim::policy::VarianceSchedule)>,
    policy_uncond: Option<(tracksim::policy::Denoiser, tracksim::policy::VarianceSchedule)>,
    selector: Option<tracksim::harness::SelectorBundle>,
    normalizer: Normalizer,
}

fn load_artifacts(out: &Path) -> Result<LoadedArtifacts> {
    let mut normalizer: Option<Normalizer> = None;
    let selector = if selector_path(out).exists() {
        let (bundle, norm) = load_selector(&selector_path(out))?;
        normalizer = Some(norm);
        Some(bundle)
    } else {
        None
    };
    let policy = if policy_path(out).exists() {
        let (den, norm, sched) = load_policy(&policy_path(out))?;
        if normalizer.is_none() {
            normalizer = Some(norm);
        }
        Some((den, sched))
    } else {
        None
    };
    let policy_uncond = if policy_uncond_path(out).exists() {
        let (den, _, sched) = load_policy(&policy_uncond_path(out))?;
        Some((den, sched))
    } else {
        None
    };
    if normalizer.is_none() && dataset_path(out).exists() {
        normalizer = Some(load_dataset(out)?.normalizer);
    }
    // checkpoints that will be used together must agree on features
    if policy.is_some() && selector.is_some() {
        check_artifacts_match(&policy_path(out), &selector_path(out))
            .context("policy and selector checkpoints disagree on the feature normalizer")?;
    }
    Ok(LoadedArtifacts {
        policy,
        policy_uncond,
        selector,
        normalizer: normalizer.unwrap_or_else(|| Normalizer::identity(D_FEAT)),
    })
}

impl LoadedArtifacts {
    fn view(&self) -> EvalArtifacts<'_> {
        EvalArtifacts {
            policy: self.policy.as_ref().map(|(d, s)| (d, s.clone())),
            policy_uncond: self.policy_uncond.as_ref().map(|(d, s)| (d, s.clone())),
            selector: self.selector.as_ref(),
            normalizer: &self.normalizer,
        }
    }
}

fn cmd_collect(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (ds, warnings) = collect_demos(cfg, seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut a = Artifact::new("dataset");
    ds.store(&mut a);
    let path = dataset_path(out);
    a.write(&path)?;
    let nk = ds.n_k();
    println!(
        "collected {} windows from {} episodes (per-expert counts {:?}) -> {}",
        ds.samples.len(),
        cfg.collect_episodes,
        nk,
        path.display()
    );
    Ok(())
}

fn cmd_train_policy(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(out)?;
    let (den, curve) = train_policy(&ds, cfg, true, seed)?;
    let p = policy_path(out);
    store_policy(&den, &ds.normalizer, cfg, &p)?;
    println!(
        "conditioned policy: {} epochs, loss {:.4} -> {:.4}, wrote {}",
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        p.display()
    );
    let (den_u, curve_u) = train_policy(&ds, cfg, false, seed)?;
    let pu = policy_uncond_path(out);
    store_policy(&den_u, &ds.normalizer, cfg, &pu)?;
    println!(
        "unconditioned policy: {} epochs, loss {:.4} -> {:.4}, wrote {}",
        curve_u.len(),
        curve_u.first().copied().unwrap_or(f64::NAN),
        curve_u.last().copied().unwrap_or(f64::NAN),
        pu.display()
    );
    Ok(())
}

fn cmd_train_selector(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(out)?;
    let bundle = train_selector(&ds, cfg, seed)?;
    let p = selector_path(out);
    store_selector(&bundle, &ds.normalizer, &p)?;
    println!(
        "selector bank trained on {} samples (per-expert counts {:?}), wrote {}",
        ds.samples.len(),
        ds.n_k(),
        p.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &Config, seed: u64, out: &Path, paper_episodes: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let arts = load_artifacts(out)?;
    let methods = Method::parse_list(&cfg.eval_methods)?;
    let n = if paper_episodes { 5 } else { cfg.eval_episodes };
    let seeds = eval_seeds(seed, n);
    let output = evaluate(cfg, &methods, &seeds, &arts.view())?;
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    if output.rows.is_empty() {
        bail!("no method could run (all checkpoints missing)");
    }
    let csv = out.join("results.csv");
    write_results_csv(&output.rows, &csv)?;
    let traces_dir = out.join("traces");
    let trace_files = write_traces(&output.traces, &traces_dir)?;
    let report = out.join("report.txt");
    write_report_txt(&output.rows, &cfg.to_text(), &report)?;
    println!(
        "evaluated {} methods x {} episodes -> {}, {} trace files, {}",
        output.rows.len(),
        n,
        csv.display(),
        trace_files.len(),
        report.display()
    );
    Ok(())
}

fn cmd_ablate(cfg: &Config, seed: u64, out: &Path, kind: AblateArg) -> Result<()> {
    let arts = load_artifacts(out)?;
    let (kind, name) = match kind {
        AblateArg::Strategy => (AblateKind::Strategy, "strategy"),
        AblateArg::Lambda => (AblateKind::Lambda, "lambda"),
    };
    let seeds = eval_seeds(seed, cfg.eval_episodes);
    let output = ablate(cfg, kind, &seeds, &arts.view())?;
    let csv = out.join(format!("ablate-{name}.csv"));
    write_results_csv(&output.rows, &csv)?;
    println!(
        "ablation over {name}: {} rows x {} episodes -> {}",
        output.rows.len(),
        seeds.len(),
        csv.display()
    );
    Ok(())
}

fn cmd_latency(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let arts = load_artifacts(out)?;
    let table = latency_table(cfg, &arts.view(), cfg.latency_trials, seed)?;
    println!(
        "replan latency over {} trials (wall-clock; not written to files):",
        cfg.latency_trials
    );
    println!(
        "{:<16} {:>10} {:>10} {:>12} {:>8}",
        "pipeline", "median_ms", "p95_ms", "per_step_ms", "cov"
    );
    for (name, s) in table {
        println!(
            "{:<16} {:>10.4} {:>10.4} {:>12.4} {:>8.3}",
            name, s.median_ms, s.p95_ms, s.per_step_ms, s.cov
        );
    }
    Ok(())
}

/// Recomputes a method row's aggregates from its trace files and
/// checks them against the stored CSV row.
fn verify_row_against_traces(row: &MethodRow, traces_dir: &Path, seeds: &[u64]) -> Result<bool> {
    let mut per_seed_nll = Vec::new();
    let mut all_present = true;
    for &seed in seeds {
        let p = traces_dir.join(format!("{}-seed{}.jsonl", row.label, seed));
        if !p.exists() {
            all_present = false;
            break;
        }
        let (_, steps) = read_trace(&p)?;
        let agg = recompute_aggregates(&steps);
        per_seed_nll.push(agg.mean_nll);
    }
    if !all_present || per_seed_nll.len() != row.episodes {
        return Ok(false); // nothing to verify against
    }
    let xs: Vec<f64> = per_seed_nll.iter().copied().flatten().collect();
    let recomputed = if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    };
    if recomputed != row.mean_nll {
        bail!(
            "trace replay mismatch for `{}`: stored mean NLL {:?}, recomputed {:?}",
            row.label,
            row.mean_nll,
            recomputed
        );
    }
    Ok(true)
}

fn cmd_report(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let csv = out.join("results.csv");
    let rows = read_results_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
    let seeds = eval_seeds(seed, cfg.eval_episodes);
    let traces_dir = out.join("traces");
    let mut verified = 0usize;
    if traces_dir.exists() {
        for row in &rows {
            if verify_row_against_traces(row, &traces_dir, &seeds)? {
                verified += 1;
            }
        }
    }
    let report = out.join("report.txt");
    write_report_txt(&rows, &cfg.to_text(), &report)?;
    println!(
        "report regenerated from {} rows ({} verified against traces) -> {}",
        rows.len(),
        verified,
        report.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Collect => cmd_collect(&cfg, cli.seed, &cli.out),
        Command::TrainPolicy => cmd_train_policy(&cfg, cli.seed, &cli.out),
        Command::TrainSelector => cmd_train_selector(&cfg, cli.seed, &cli.out),
        Command::Eval { paper_episodes } => cmd_eval(&cfg, cli.seed, &cli.out, paper_episodes),
        Command::Ablate { kind } => cmd_ablate(&cfg, cli.seed, &cli.out, kind),
        Command::Latency => cmd_latency(&cfg, cli.seed, &cli.out),
        Command::Report => cmd_report(&cfg, cli.seed, &cli.out),
    }
}
