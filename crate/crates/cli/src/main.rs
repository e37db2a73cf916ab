use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use clinfed::data::{self, SyntheticSpec};
use clinfed::experiment::{self, ExperimentConfig, ScoreTable};
use clinfed::metrics::{self, ScoredSet};

/// Cross-silo federated learning simulator with DP-SGD.
#[derive(Parser)]
#[command(name = "clinfed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-site cohort to `<out>/cohort.csv`.
    Generate {
        /// Read generator settings from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        sites: usize,
        #[arg(long, default_value_t = 2000)]
        admissions: usize,
        #[arg(long, default_value_t = 50)]
        width: usize,
        /// Use the 31 hospitals at their real admission counts.
        #[arg(long)]
        hospital_sites: bool,
    },
    /// Run one experimental condition and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Privacy cost of a DP-SGD run.
    Accountant {
        /// Sampling ratio.
        #[arg(long)]
        q: f64,
        /// Noise multiplier.
        #[arg(long)]
        z: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// DeLong AUC of `score_a`, or the paired difference A − B.
    ///
    /// With one file, `score_b` (if present) is the second model; with two
    /// files, `score_a` of the second file is.
    Compare {
        scores: PathBuf,
        other: Option<PathBuf>,
    },
}

fn generate(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    sites: usize,
    admissions: usize,
    width: usize,
    hospital_sites: bool,
) -> Result<()> {
    let spec = match config {
        Some(path) => {
            let mut c = ExperimentConfig::from_path(path)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if c.csv.is_some() {
                bail!("{} reads a CSV cohort; nothing to generate", path.display());
            }
            c.synthetic_spec()
        }
        None => {
            let seed = seed.unwrap_or(0);
            if hospital_sites {
                SyntheticSpec::hospital_cohort(width, seed)
            } else {
                SyntheticSpec::uniform(sites, admissions, width, seed)
            }
        }
    };
    let cohorts = data::generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("cohort.csv");
    data::write_csv(&path, &cohorts)?;
    let total: usize = cohorts.iter().map(|c| c.len()).sum();
    println!("wrote {} admissions at {} sites to {}", total, cohorts.len(), path.display());
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut c = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(o) = out {
        c.out = Some(o);
    }
    c.validate()?;
    let outdir = experiment::output_dir(&c);
    let (output, paths) = experiment::run_and_emit(&c, &outdir)?;
    print!("{}", experiment::summary_table(&sorted(output.rows), &output.notes));
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sorted(mut rows: Vec<experiment::ReportRow>) -> Vec<experiment::ReportRow> {
    experiment::sort_rows(&mut rows);
    rows
}

fn accountant(q: f64, z: f64, steps: u64, delta: f64) -> Result<()> {
    let ledger = experiment::accountant_query(q, z, steps, delta)?;
    println!("epsilon {:.6}", ledger.epsilon);
    println!("order {}", ledger.order);
    Ok(())
}

fn second_model(first: &ScoreTable, other: Option<&Path>) -> Result<Option<Vec<f64>>> {
    let Some(path) = other else {
        return Ok(first.score_b.clone());
    };
    let table = experiment::read_scores(path)?;
    if table.record_ids != first.record_ids || table.labels != first.labels {
        bail!("{} does not list the same records and labels in the same order", path.display());
    }
    Ok(Some(table.score_a))
}

fn compare(scores: &Path, other: Option<&Path>) -> Result<()> {
    let table = experiment::read_scores(scores)?;
    let a = ScoredSet::new(table.score_a.clone(), table.labels.clone())?;
    let est = metrics::delong_estimate(&a)?;
    println!(
        "auc_a {:.6} ({:.6}, {:.6}) variance {:.6e}",
        est.auc, est.ci_low, est.ci_high, est.variance
    );
    if let Some(b) = second_model(&table, other)? {
        let b = ScoredSet::new(b, table.labels.clone())?;
        let est_b = metrics::delong_estimate(&b)?;
        println!(
            "auc_b {:.6} ({:.6}, {:.6}) variance {:.6e}",
            est_b.auc, est_b.ci_low, est_b.ci_high, est_b.variance
        );
        let d = metrics::delong_diff(&a, &b)?;
        println!(
            "delta {:.6} ({:.6}, {:.6}) variance {:.6e} significant {}",
            d.delta, d.ci_low, d.ci_high, d.variance, d.significant
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out, sites, admissions, width, hospital_sites } => {
            generate(config.as_deref(), seed, &out, sites, admissions, width, hospital_sites)
        }
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Accountant { q, z, steps, delta } => accountant(q, z, steps, delta),
        Command::Compare { scores, other } => compare(&scores, other.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
