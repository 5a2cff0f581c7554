//! `fedsim` — run, sweep, validate, and report on federated-learning
//! robustness simulations described by TOML config files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::config::{self, ConfigFile, LoadedConfig};
use fedsim::engine::{self, ExperimentConfig};
use fedsim::report::{self, AccuracySeries, RunSummary};
use fedsim::{Result, SimError};

/// Name of the environment variable that re-roots relative output
/// directories.
const OUTPUT_ROOT_ENV: &str = "FEDSIM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Byzantine-robust federated learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment once per configured seed and write artifacts.
    Run(RunArgs),
    /// Run all seeds, then combine summaries and emit a multi-seed chart.
    Sweep(RunArgs),
    /// Dry-run precondition checks; no training.
    Validate {
        /// Experiment description (.toml) or effective-config echo (.json).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Combine existing per-seed summary JSON files from an output directory.
    Report {
        /// Directory holding summary_s<seed>.json files.
        #[arg(long)]
        dir: PathBuf,
        /// Where to write the combined JSON (defaults to <dir>/combined.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (.toml) or effective-config echo (.json).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; wins over the config file and the environment root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flag overrides; these win over config-file values.
#[derive(Args, Clone)]
struct Overrides {
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list replacing the configured one.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Aggregation rule: mean, trimmed_mean, median, krum, multi_krum,
    /// fed_greed.
    #[arg(long)]
    defense: Option<String>,
    /// Attack kind: none, label_flip, gaussian_noise.
    #[arg(long)]
    attack: Option<String>,
    /// Number of malicious clients (sampled per seed).
    #[arg(long)]
    malicious: Option<usize>,
    /// Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of communication rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

impl Overrides {
    fn apply(&self, file: &mut ConfigFile) {
        if let Some(seed) = self.seed {
            file.seeds = vec![seed];
        } else if !self.seeds.is_empty() {
            file.seeds = self.seeds.clone();
        }
        if let Some(defense) = &self.defense {
            file.defense.kind = defense.clone();
        }
        if let Some(attack) = &self.attack {
            file.attack.kind = attack.clone();
        }
        if let Some(malicious) = self.malicious {
            file.attack.malicious = malicious;
            file.attack.malicious_ids.clear();
        }
        if let Some(alpha) = self.alpha {
            file.alpha = alpha;
        }
        if let Some(rounds) = self.rounds {
            file.rounds = rounds;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args, false),
        Command::Sweep(args) => cmd_run(&args, true),
        Command::Validate { config, overrides } => cmd_validate(&config, &overrides),
        Command::Report { dir, out } => cmd_report(&dir, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Seeds and their materialized configs, plus the resolved output directory.
struct Plan {
    runs: Vec<(u64, ExperimentConfig)>,
    out_dir: PathBuf,
}

fn prepare(config_path: &Path, out_flag: Option<&Path>, overrides: &Overrides) -> Result<Plan> {
    let (runs, configured_dir) = match ConfigFile::load(config_path)? {
        LoadedConfig::File(mut file) => {
            overrides.apply(&mut file);
            let mut runs = Vec::new();
            for &seed in &file.seeds {
                runs.push((seed, file.materialize(seed)?));
            }
            (runs, PathBuf::from(file.output_dir.clone()))
        }
        LoadedConfig::Effective(effective) => {
            let seed = overrides.seed.unwrap_or(effective.seed);
            if seed != effective.seed {
                return Err(SimError::Config(format!(
                    "--seed {seed} conflicts with the effective config's pinned seed {}",
                    effective.seed
                )));
            }
            (vec![(seed, *effective)], PathBuf::from("out"))
        }
    };

    let seeds: Vec<u64> = runs.iter().map(|(s, _)| *s).collect();
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(SimError::Config(format!(
            "duplicate seeds in {seeds:?}; each run must use a distinct seed"
        )));
    }

    let out_dir = resolve_out_dir(out_flag, &configured_dir);
    Ok(Plan { runs, out_dir })
}

fn resolve_out_dir(flag: Option<&Path>, configured: &Path) -> PathBuf {
    let base = flag.map(Path::to_path_buf).unwrap_or_else(|| configured.to_path_buf());
    if base.is_relative() {
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                return PathBuf::from(root).join(base);
            }
        }
    }
    base
}

/// Executes one materialized config and writes its artifacts.
fn run_one(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let seed = config.seed;
    let hash = config::config_hash(config);

    let echo = serde_json::to_string_pretty(config)
        .map_err(|e| SimError::Config(format!("config echo serialization failed: {e}")))?;
    println!("{echo}");
    let echo_path = out_dir.join(format!("config_s{seed}.json"));
    std::fs::write(&echo_path, format!("{echo}\n")).map_err(|e| SimError::io(&echo_path, e))?;

    let mut experiment = engine::Experiment::new(config.clone())?;
    let partition_counts = experiment.partition_class_counts();
    let records = experiment.run()?;

    report::write_round_csv(&records, &out_dir.join(format!("round_s{seed}.csv")))?;

    let mut summary = report::summarize(&records, config.attack.activation_round)?;
    summary.config_hash = hash;
    summary.warnings.extend(experiment.warnings().iter().cloned());
    report::write_summary_json(&summary, &out_dir.join(format!("summary_s{seed}.json")))?;

    let series = vec![AccuracySeries::from_records(
        config.aggregator.name(),
        &records,
    )];
    report::render_accuracy_svg(
        &series,
        Some(config.attack.activation_round),
        &out_dir.join(format!("accuracy_s{seed}.svg")),
    )?;
    report::write_partition_svg(
        &partition_counts,
        &out_dir.join(format!("partition_s{seed}.svg")),
    )?;

    Ok(summary)
}

fn cmd_run(args: &RunArgs, sweep: bool) -> Result<ExitCode> {
    let plan = prepare(&args.config, args.out.as_deref(), &args.overrides)?;
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| SimError::io(&plan.out_dir, e))?;

    let mut completed: Vec<(u64, RunSummary)> = Vec::new();
    let mut failures: Vec<(u64, SimError)> = Vec::new();
    for (seed, config) in &plan.runs {
        match run_one(config, &plan.out_dir) {
            Ok(summary) => completed.push((*seed, summary)),
            Err(e) => failures.push((*seed, e)),
        }
    }

    if sweep && !completed.is_empty() {
        let combined = report::combine_summaries(&completed)?;
        report::write_combined_json(&combined, &plan.out_dir.join("combined.json"))?;

        let mut series = Vec::new();
        let mut activation = None;
        for (seed, config) in &plan.runs {
            if failures.iter().any(|(s, _)| s == seed) {
                continue;
            }
            let csv_path = plan.out_dir.join(format!("round_s{seed}.csv"));
            let points = read_accuracy_csv(&csv_path)?;
            series.push(AccuracySeries {
                name: format!("seed {seed}"),
                points,
            });
            activation = Some(config.attack.activation_round);
        }
        report::render_accuracy_svg(
            &series,
            activation,
            &plan.out_dir.join("combined_accuracy.svg"),
        )?;
    }

    for (seed, summary) in &completed {
        println!(
            "seed {seed}: ok (mean post-attack accuracy {:.4})",
            summary.mean_post_attack_accuracy
        );
    }
    for (seed, error) in &failures {
        eprintln!("seed {seed}: failed: {error}");
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Reads (round, accuracy) pairs back from a round CSV.
fn read_accuracy_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let round: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| SimError::Config(format!("{}: malformed round field", path.display())))?;
        let accuracy: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| {
                SimError::Config(format!("{}: malformed accuracy field", path.display()))
            })?;
        points.push((round, accuracy));
    }
    Ok(points)
}

fn cmd_validate(config_path: &Path, overrides: &Overrides) -> Result<ExitCode> {
    let plan = prepare(config_path, None, overrides)?;
    let mut all_ok = true;
    for (seed, config) in &plan.runs {
        let violations = config::validate_all(config);
        if violations.is_empty() {
            println!("seed {seed}: ok");
        } else {
            all_ok = false;
            for v in violations {
                println!("seed {seed}: FAIL {v}");
            }
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let entries = std::fs::read_dir(dir).map_err(|e| SimError::io(dir, e))?;
    let mut runs: Vec<(u64, RunSummary)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| SimError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(seed) = name
            .strip_prefix("summary_s")
            .and_then(|rest| rest.strip_suffix(".json"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let text =
            std::fs::read_to_string(entry.path()).map_err(|e| SimError::io(entry.path(), e))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", entry.path().display())))?;
        runs.push((seed, summary));
    }
    if runs.is_empty() {
        return Err(SimError::InvalidInput(format!(
            "no summary_s<seed>.json files found in {}",
            dir.display()
        )));
    }
    runs.sort_by_key(|(seed, _)| *seed);
    let combined = report::combine_summaries(&runs)?;
    let body = serde_json::to_string_pretty(&combined)
        .map_err(|e| SimError::Config(format!("combined serialization failed: {e}")))?;
    println!("{body}");
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("combined.json"));
    report::write_combined_json(&combined, &out_path)?;
    Ok(ExitCode::SUCCESS)
}
