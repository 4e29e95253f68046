//! `reflex-sim`: run scenarios, compare schemes against the baseline, and
//! sweep flexible-class parameters.
//!
//! Exit status: 0 on success, 1 when the command line or scenario is
//! invalid, 2 when a run or an output write fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use reflex_sim::engine::EventKind;
use reflex_sim::harness::{
    self, compare, render_run_summary, run_file, sweep, write_compare, write_run, write_sweep,
    write_text, HarnessError, Overrides, SweepParam,
};
use reflex_sim::scenario::{ScenarioFile, SchemeSection};

#[derive(Debug, Parser)]
#[command(
    name = "reflex-sim",
    version,
    about = "Flow-level simulator for flexible transport"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed of the first run (defaults to the scenario's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long, global = true, default_value_t = 1)]
    seeds: u64,
    /// Override the efficiency of every link.
    #[arg(long, global = true)]
    efficiency: Option<f64>,
    /// Override the transport convergence time constant, seconds.
    #[arg(long = "conv-tau", global = true)]
    conv_tau: Option<f64>,
    /// Override the simulation tick, seconds.
    #[arg(long, global = true)]
    tick: Option<f64>,
    /// Output directory.
    #[arg(
        short,
        long,
        global = true,
        env = "REFLEX_SIM_OUT",
        default_value = "out"
    )]
    output: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write flows.csv, timeseries.csv and summary.txt.
    Run { scenario: PathBuf },
    /// Run the same workload under the baseline and each listed scheme.
    Compare {
        scenario: PathBuf,
        /// Schemes: baseline, absolute, weighted, weighted-<h>-<l>, reflex.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        schemes: Vec<String>,
    },
    /// Run the scenario once per parameter value, paired with the baseline.
    Sweep {
        scenario: PathBuf,
        /// One of alpha, r, D_exploit, T_int.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            efficiency: self.efficiency,
            conv_tau: self.conv_tau,
            tick: self.tick,
        }
    }

    fn seed_list(&self, file: &ScenarioFile) -> Result<Vec<u64>, HarnessError> {
        if self.seeds == 0 {
            return Err(HarnessError::Usage("--seeds must be at least 1".into()));
        }
        let first = file.sim.seed;
        Ok((0..self.seeds).map(|i| first.wrapping_add(i)).collect())
    }
}

fn load(path: &Path, global: &Global) -> Result<ScenarioFile, HarnessError> {
    let mut file = ScenarioFile::load(path)?;
    global.overrides().apply(&mut file);
    Ok(file)
}

struct RunLog {
    text: String,
}

impl RunLog {
    fn new() -> Self {
        RunLog {
            text: String::new(),
        }
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        let _ = writeln!(
            self.text,
            "[{}.{:03}] {}",
            now.as_secs(),
            now.subsec_millis(),
            msg.as_ref()
        );
    }

    fn events(&mut self, label: &str, events: &[reflex_sim::engine::Event]) {
        for e in events {
            if matches!(e.kind, EventKind::NonConvergence { .. }) {
                warn!("{label}: {e}");
            }
            self.line(format!("{label}: {e}"));
        }
    }
}

fn cmd_run(path: &Path, global: &Global, log: &mut RunLog) -> Result<(), HarnessError> {
    let base = load(path, global)?;
    let seeds = global.seed_list(&base)?;
    let runs: Vec<ScenarioFile> = seeds
        .iter()
        .map(|&s| {
            let mut f = base.clone();
            f.sim.seed = s;
            f
        })
        .collect();
    // validate every seed before running any
    for f in &runs {
        f.build()?;
    }
    for f in &runs {
        let start = Instant::now();
        let result = run_file(f)?;
        let dir = if runs.len() == 1 {
            global.output.clone()
        } else {
            global.output.join(format!("seed-{}", f.sim.seed))
        };
        write_run(&dir, f, &result)?;
        log.events(&format!("seed {}", f.sim.seed), &result.output.events);
        log.line(format!(
            "seed {} finished in {:.3}s -> {}",
            f.sim.seed,
            start.elapsed().as_secs_f64(),
            dir.display()
        ));
        info!(
            "seed {}: {} flows, wrote {}",
            f.sim.seed,
            result.output.records.len(),
            dir.display()
        );
        if runs.len() == 1 {
            print!("{}", render_run_summary(&result));
        }
    }
    Ok(())
}

fn cmd_compare(
    path: &Path,
    schemes: &[String],
    global: &Global,
    log: &mut RunLog,
) -> Result<(), HarnessError> {
    let file = load(path, global)?;
    let parsed = schemes
        .iter()
        .map(|s| {
            SchemeSection::parse_name(s)
                .ok_or_else(|| HarnessError::Usage(format!("--schemes: unknown scheme `{s}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = global.seed_list(&file)?;
    let start = Instant::now();
    let result = compare(&file, &parsed, &seeds)?;
    for b in &result.baselines {
        log.events(&format!("baseline seed {}", b.seed), &b.output.events);
    }
    for p in result.runs.iter().flatten() {
        log.events(
            &format!("{} seed {}", p.run.scheme, p.run.seed),
            &p.run.output.events,
        );
    }
    write_compare(&global.output, &file, &result)?;
    log.line(format!(
        "compare finished in {:.3}s",
        start.elapsed().as_secs_f64()
    ));
    print!("{}", harness::render_compare(&result));
    Ok(())
}

fn cmd_sweep(
    path: &Path,
    param: &str,
    values: &[f64],
    global: &Global,
    log: &mut RunLog,
) -> Result<(), HarnessError> {
    let param: SweepParam = param.parse()?;
    if values.is_empty() {
        return Err(HarnessError::Usage(
            "--values: at least one value is required".into(),
        ));
    }
    let file = load(path, global)?;
    let seeds = global.seed_list(&file)?;
    let start = Instant::now();
    let result = sweep(&file, param, values, &seeds)?;
    write_sweep(&global.output, &result)?;
    log.line(format!(
        "sweep over {param} finished in {:.3}s",
        start.elapsed().as_secs_f64()
    ));
    println!("wrote {}", global.output.join("sweep.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let mut log = RunLog::new();
    log.line(format!(
        "reflex-sim {}",
        std::env::args().skip(1).collect::<Vec<_>>().join(" ")
    ));
    let result = match &cli.command {
        Command::Run { scenario } => cmd_run(scenario, &cli.global, &mut log),
        Command::Compare { scenario, schemes } => {
            cmd_compare(scenario, schemes, &cli.global, &mut log)
        }
        Command::Sweep {
            scenario,
            param,
            values,
        } => cmd_sweep(scenario, param, values, &cli.global, &mut log),
    };

    match result {
        Ok(()) => {
            log.line("done");
            if let Err(e) = write_text(&cli.global.output.join("run.log"), &log.text) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
