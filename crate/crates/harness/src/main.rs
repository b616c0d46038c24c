use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use asgd_harness::config::ExperimentKind;
use asgd_harness::plotdata::{emit_plot_data, write_plot_data, METRICS};
use asgd_harness::{exit, replay, run_experiment, ExperimentConfig, HarnessError, RunReport};
use clap::{Args, Parser, Subcommand};

/// Delayed-gradient SGD stability experiments.
#[derive(Parser)]
#[command(name = "asgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by `kind`.
    Run(ConfigArgs),
    /// Run a delay or learning-rate sweep (delay-sweep unless `kind` says otherwise).
    Sweep(ConfigArgs),
    /// Evaluate the closed-form bounds over `tau_bars` x `cs` x `horizons`.
    Bounds(ConfigArgs),
    /// Run the acceptance battery; exits with status 3 if any check fails.
    Accept(ConfigArgs),
    /// Turn experiment curves into long-format `series,x,y,y_err` CSV.
    Plotdata(PlotArgs),
    /// Re-run an experiment from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct PlotArgs {
    /// Experiment directories or curves.csv files.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Metrics to emit (default: all).
    #[arg(long = "metric", value_parser = METRICS)]
    metrics: Vec<String>,
    /// Output file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the replayed outputs (default: the recorded one).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Flags mirror the configuration fields and override the config file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with ExperimentConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    loss_cap: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    d_in: Option<String>,
    #[arg(long)]
    feature_bound: Option<String>,
    #[arg(long)]
    class_separation: Option<String>,
    #[arg(long)]
    label_noise: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    panel_size: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    tau_bar: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    tau_bars: Option<String>,
    #[arg(long)]
    delay_kind: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    c: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    cs: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    early_until: Option<String>,
    #[arg(long)]
    master_seed: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let fields: [(&'static str, &Option<String>); 28] = [
            ("kind", &self.kind),
            ("model", &self.model),
            ("hidden", &self.hidden),
            ("clip", &self.clip),
            ("loss_cap", &self.loss_cap),
            ("task", &self.task),
            ("n", &self.n),
            ("d_in", &self.d_in),
            ("feature_bound", &self.feature_bound),
            ("class_separation", &self.class_separation),
            ("label_noise", &self.label_noise),
            ("test_size", &self.test_size),
            ("panel_size", &self.panel_size),
            ("p", &self.p),
            ("horizon", &self.horizon),
            ("tau_bar", &self.tau_bar),
            ("tau_bars", &self.tau_bars),
            ("delay_kind", &self.delay_kind),
            ("schedule", &self.schedule),
            ("c", &self.c),
            ("cs", &self.cs),
            ("horizons", &self.horizons),
            ("replicates", &self.replicates),
            ("batch", &self.batch),
            ("eval_every", &self.eval_every),
            ("early_until", &self.early_until),
            ("master_seed", &self.master_seed),
            ("output_dir", &self.output_dir),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }

    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for (key, value) in self.overrides() {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }
}

fn report(result: &RunReport) {
    if let Some(criteria) = &result.acceptance {
        for c in criteria {
            println!("{}", c.line());
        }
        let failed = result.failed_criteria();
        println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    }
    println!("wrote {} files to {}", result.files.len(), result.output_dir.display());
}

fn run_with(args: &ConfigArgs, force: Option<ExperimentKind>, sweep: bool) -> Result<i32, HarnessError> {
    let mut cfg = args.resolve()?;
    if let Some(kind) = force {
        cfg.kind = kind;
    }
    if sweep && !matches!(cfg.kind, ExperimentKind::DelaySweep | ExperimentKind::RateSweep) {
        if cfg.kind != ExperimentKind::TwinRun {
            return Err(HarnessError::Config {
                field: "kind".into(),
                reason: format!("`sweep` needs delay-sweep or rate-sweep, got {}", cfg.kind),
            });
        }
        cfg.kind = ExperimentKind::DelaySweep;
    }
    let result = run_experiment(&cfg)?;
    report(&result);
    Ok(if result.failed_criteria() > 0 {
        exit::ACCEPTANCE
    } else {
        exit::SUCCESS
    })
}

fn plot(args: &PlotArgs) -> anyhow::Result<()> {
    let metrics: Vec<String> = if args.metrics.is_empty() {
        METRICS.iter().map(|m| m.to_string()).collect()
    } else {
        args.metrics.clone()
    };
    let rows = emit_plot_data(&args.inputs, &metrics)?;
    match &args.output {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut out = BufWriter::new(file);
            write_plot_data(&rows, &mut out)?;
            out.flush()?;
        }
        None => write_plot_data(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => run_with(a, None, false),
        Command::Sweep(a) => run_with(a, None, true),
        Command::Bounds(a) => run_with(a, Some(ExperimentKind::BoundSweep), false),
        Command::Accept(a) => run_with(a, Some(ExperimentKind::AcceptanceSuite), false),
        Command::Replay(a) => replay(&a.manifest, a.output_dir.as_deref()).map(|r| {
            report(&r);
            exit::SUCCESS
        }),
        Command::Plotdata(a) => {
            return match plot(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(exit::RUNTIME as u8)
                }
            }
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
