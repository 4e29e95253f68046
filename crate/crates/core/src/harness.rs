//! Experiment orchestration: single runs, paired comparisons against the
//! baseline, and parameter sweeps, each over one or more seeds.
//!
//! Independent runs execute on the rayon pool; results are gathered in job
//! order so every output file is identical between invocations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{self, write_links_csv, write_series_csv, EngineOptions, RunOutput};
use crate::metrics::{speedup_join, write_flows_csv, MetricsError, RunSummary, SpeedupJoin};
use crate::scenario::{ScenarioError, ScenarioFile, SchemeSection};
use crate::types::{Bound, FlowKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl HarnessError {
    /// Whether the error comes from the inputs rather than from running.
    pub fn is_input_error(&self) -> bool {
        matches!(self, HarnessError::Scenario(_) | HarnessError::Usage(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.display().to_string(),
        source: e.into(),
    }
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub efficiency: Option<f64>,
    pub conv_tau: Option<f64>,
    pub tick: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, file: &mut ScenarioFile) {
        if let Some(s) = self.seed {
            file.sim.seed = s;
        }
        if let Some(e) = self.efficiency {
            file.topology.set_efficiency(e);
        }
        if let Some(t) = self.conv_tau {
            file.sim.conv_tau = t;
        }
        if let Some(t) = self.tick {
            file.sim.tick = t;
        }
    }
}

/// One simulated run and its summary.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scheme: String,
    pub seed: u64,
    pub output: RunOutput,
    pub summary: RunSummary,
}

fn options(file: &ScenarioFile) -> EngineOptions {
    EngineOptions {
        sample_every: (file.outputs.sample_every > 0).then_some(file.outputs.sample_every),
        trace_intervals: false,
    }
}

/// Build and run a scenario file as is.
pub fn run_file(file: &ScenarioFile) -> Result<RunResult, HarnessError> {
    let scenario = file.build()?;
    let output = engine::run(&scenario, options(file));
    let scheme = scenario.scheme.name();
    let summary = RunSummary::new(&scheme, &output.records, file.window());
    Ok(RunResult {
        scheme,
        seed: file.sim.seed,
        output,
        summary,
    })
}

/// Write flows, time series and summary of one run into `dir`.
pub fn write_run(dir: &Path, file: &ScenarioFile, run: &RunResult) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let out = &file.outputs;

    let path = dir.join(&out.flows);
    let f = File::create(&path).map_err(io_err(&path))?;
    write_flows_csv(BufWriter::new(f), &run.output.records).map_err(csv_err(&path))?;

    if out.sample_every > 0 {
        let path = dir.join(&out.timeseries);
        let f = File::create(&path).map_err(io_err(&path))?;
        write_series_csv(BufWriter::new(f), &run.output.series).map_err(csv_err(&path))?;
        let path = dir.join(&out.links);
        let f = File::create(&path).map_err(io_err(&path))?;
        write_links_csv(BufWriter::new(f), &run.output.link_series).map_err(csv_err(&path))?;
    }

    let path = dir.join(&out.summary);
    fs::write(&path, render_run_summary(run)).map_err(io_err(&path))?;
    Ok(())
}

/// Summary text of one run, including the audit counters.
pub fn render_run_summary(run: &RunResult) -> String {
    let a = &run.output.audit;
    let mut s = format!("seed = {}\n", run.seed);
    s.push_str(&run.summary.render());
    s.push_str(&format!(
        "audit.ticks = {}\naudit.allocations = {}\naudit.non_converged = {}\n\
         audit.capacity_violations = {}\naudit.discard_bound_violations = {}\n\
         audit.low_decisions = {}\naudit.low_without_budget = {}\naudit.low_outside_exploit = {}\n\
         end_time_s = {}\n",
        a.ticks,
        a.allocations,
        a.non_converged,
        a.capacity_violations,
        a.discard_bound_violations,
        a.low_decisions,
        a.low_without_budget,
        a.low_outside_exploit,
        run.output.end_time,
    ));
    s
}

/// Numbers tracked per run in comparison and sweep tables.
pub fn run_metrics(summary: &RunSummary) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (kind, s) in &summary.kinds {
        out.push((format!("{kind}.flows"), s.flows as f64));
        out.push((format!("{kind}.unfinished"), s.unfinished as f64));
        if let Some(f) = &s.fct {
            out.push((format!("{kind}.fct.mean"), f.mean));
            out.push((format!("{kind}.fct.median"), f.median));
            out.push((format!("{kind}.fct.p90"), f.p90));
            out.push((format!("{kind}.fct.p99"), f.p99));
        }
        for (cat, f) in &s.fct_by_category {
            out.push((format!("{kind}.{}.fct.mean", cat.as_str()), f.mean));
            out.push((format!("{kind}.{}.fct.p99", cat.as_str()), f.p99));
        }
        if let Some(f) = &s.fraction_delivered {
            out.push((format!("{kind}.fraction_delivered.mean"), f.mean));
            out.push((format!("{kind}.fraction_delivered.min"), f.min));
        }
        if let Some(sp) = &s.speedup {
            out.push((format!("{kind}.speedup.mean"), sp.mean));
            out.push((format!("{kind}.speedup.median"), sp.median));
            out.push((format!("{kind}.speedup.min"), sp.min));
        }
        if let Some((_, v)) = s.violation {
            out.push((format!("{kind}.violation_fraction"), v));
        }
    }
    out
}

/// Speed-ups of the mean, 90th and 99th percentile FCT relative to a
/// baseline summary.
pub fn fct_speedups(baseline: &RunSummary, treated: &RunSummary) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (kind, b) in &baseline.kinds {
        if let (Some(fb), Some(ft)) = (&b.fct, treated.kinds.get(kind).and_then(|t| t.fct.as_ref()))
        {
            out.push((format!("{kind}.fct_speedup.mean"), fb.mean / ft.mean));
            out.push((format!("{kind}.fct_speedup.p90"), fb.p90 / ft.p90));
            out.push((format!("{kind}.fct_speedup.p99"), fb.p99 / ft.p99));
        }
    }
    out
}

/// Flexible-class alpha as a violation threshold.
pub fn violation_threshold(file: &ScenarioFile) -> f64 {
    match file.reflex.alpha {
        Bound::Finite(a) => a.min(1.0),
        Bound::Unbounded => 1.0,
    }
}

/// A treated run joined with the baseline run of the same seed.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub run: RunResult,
    pub join: SpeedupJoin,
    pub metrics: Vec<(String, f64)>,
}

fn pair(
    file: &ScenarioFile,
    baseline: &RunResult,
    mut run: RunResult,
) -> Result<PairedRun, HarnessError> {
    let join = speedup_join(&baseline.output.records, &run.output.records)?;
    run.summary
        .add_speedups(&run.output.records, &join, violation_threshold(file));
    let mut metrics = run_metrics(&run.summary);
    metrics.extend(fct_speedups(&baseline.summary, &run.summary));
    Ok(PairedRun { run, join, metrics })
}

/// Per-metric min, mean and max across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub n: usize,
}

pub fn spread(values: &[f64]) -> Spread {
    Spread {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n: values.len(),
    }
}

/// Aggregate `(key, metrics)` rows into per-key, per-metric spreads, keeping
/// keys and metrics in first-seen order.
fn aggregate<K: Clone + PartialEq>(rows: &[(K, &[(String, f64)])]) -> Vec<(K, String, Spread)> {
    let mut keys: Vec<K> = Vec::new();
    for (k, _) in rows {
        if !keys.contains(k) {
            keys.push(k.clone());
        }
    }
    let mut out = Vec::new();
    for k in keys {
        let mut names: Vec<&String> = Vec::new();
        let mut values: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
        for (_, metrics) in rows.iter().filter(|(key, _)| *key == k) {
            for (name, v) in metrics.iter() {
                if !values.contains_key(name) {
                    names.push(name);
                }
                values.entry(name).or_default().push(*v);
            }
        }
        for name in names {
            out.push((k.clone(), name.clone(), spread(&values[name])));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub seeds: Vec<u64>,
    pub baselines: Vec<RunResult>,
    /// Indexed by seed, then by scheme in request order.
    pub runs: Vec<Vec<PairedRun>>,
    pub schemes: Vec<String>,
}

impl CompareResult {
    /// Per scheme and metric, min/mean/max across seeds.
    pub fn table(&self) -> Vec<(String, String, Spread)> {
        let rows: Vec<(String, &[(String, f64)])> = self
            .runs
            .iter()
            .flat_map(|per_seed| {
                per_seed
                    .iter()
                    .map(|p| (p.run.scheme.clone(), p.metrics.as_slice()))
            })
            .collect();
        aggregate(&rows)
    }

    pub fn runs_of(&self, scheme: &str) -> impl Iterator<Item = &PairedRun> {
        let scheme = scheme.to_string();
        self.runs
            .iter()
            .flatten()
            .filter(move |p| p.run.scheme == scheme)
    }
}

fn seeded(file: &ScenarioFile, seed: u64) -> ScenarioFile {
    let mut f = file.clone();
    f.sim.seed = seed;
    f
}

fn with_scheme(file: &ScenarioFile, scheme: SchemeSection) -> ScenarioFile {
    let mut f = file.clone();
    f.scheme = scheme;
    f
}

/// Run the same workload under the baseline and every scheme, per seed.
pub fn compare(
    file: &ScenarioFile,
    schemes: &[SchemeSection],
    seeds: &[u64],
) -> Result<CompareResult, HarnessError> {
    if schemes.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Usage(
            "compare needs at least one scheme and one seed".into(),
        ));
    }
    let per_seed = 1 + schemes.len();
    let jobs: Vec<ScenarioFile> = seeds
        .iter()
        .flat_map(|&seed| {
            let f = seeded(file, seed);
            std::iter::once(SchemeSection::Baseline)
                .chain(schemes.iter().copied())
                .map(move |s| with_scheme(&f, s))
        })
        .collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(run_file)
        .collect::<Result<Vec<_>, _>>()?;

    let mut baselines = Vec::new();
    let mut runs = Vec::new();
    for chunk in results.chunks(per_seed) {
        let base = &chunk[0];
        let paired = chunk[1..]
            .iter()
            .map(|r| pair(file, base, r.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        baselines.push(base.clone());
        runs.push(paired);
    }
    let names = jobs[1..per_seed]
        .iter()
        .map(|f| f.scheme().name())
        .collect();
    Ok(CompareResult {
        seeds: seeds.to_vec(),
        baselines,
        runs,
        schemes: names,
    })
}

fn write_spread_table(
    path: &Path,
    key_header: &str,
    rows: &[(String, String, Spread)],
) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    (|| {
        w.write_record([key_header, "metric", "min", "mean", "max", "runs"])?;
        for (k, m, s) in rows {
            w.write_record([
                k.clone(),
                m.clone(),
                s.min.to_string(),
                s.mean.to_string(),
                s.max.to_string(),
                s.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })()
    .map_err(csv_err(path))
}

fn write_speedups(path: &Path, result: &CompareResult) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    (|| {
        w.write_record([
            "seed",
            "scheme",
            "flow_id",
            "kind",
            "size_F",
            "fct_baseline",
            "fct",
            "speedup",
        ])?;
        for (seed_runs, base) in result.runs.iter().zip(&result.baselines) {
            let base_fct: BTreeMap<_, _> = base
                .output
                .records
                .iter()
                .map(|r| (r.flow_id, r.fct))
                .collect();
            for p in seed_runs {
                for rec in &p.run.output.records {
                    let Some(s) = p.join.speedups.get(&rec.flow_id) else {
                        continue;
                    };
                    w.write_record([
                        p.run.seed.to_string(),
                        p.run.scheme.clone(),
                        rec.flow_id.0.to_string(),
                        rec.kind.to_string(),
                        rec.size.bytes().to_string(),
                        base_fct[&rec.flow_id]
                            .map(|x| x.to_string())
                            .unwrap_or_default(),
                        rec.fct.map(|x| x.to_string()).unwrap_or_default(),
                        s.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })()
    .map_err(csv_err(path))
}

/// Write per-run outputs under `dir/<scheme>/seed-<n>/` plus the joined
/// speed-up table and the per-scheme metric spread.
pub fn write_compare(
    dir: &Path,
    file: &ScenarioFile,
    result: &CompareResult,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (seed_runs, base) in result.runs.iter().zip(&result.baselines) {
        write_run(
            &dir.join("baseline").join(format!("seed-{}", base.seed)),
            file,
            base,
        )?;
        for p in seed_runs {
            let sub = dir.join(&p.run.scheme).join(format!("seed-{}", p.run.seed));
            write_run(&sub, file, &p.run)?;
        }
    }
    write_speedups(&dir.join("speedups.csv"), result)?;
    write_spread_table(&dir.join("compare.csv"), "scheme", &result.table())?;
    let path = dir.join("compare.txt");
    fs::write(&path, render_compare(result)).map_err(io_err(&path))?;
    Ok(())
}

/// Key-value view of the comparison table.
pub fn render_compare(result: &CompareResult) -> String {
    let mut s = format!(
        "seeds = {}\n",
        result
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    for (scheme, metric, sp) in result.table() {
        s.push_str(&format!(
            "{scheme}.{metric} = {} [{}, {}]\n",
            sp.mean, sp.min, sp.max
        ));
    }
    s
}

/// Parameters a sweep can vary; all apply to the flexible class or the
/// probing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    R,
    DExploit,
    TInt,
}

impl FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "r" => Ok(SweepParam::R),
            "D_exploit" | "d_exploit" => Ok(SweepParam::DExploit),
            "T_int" | "t_int" => Ok(SweepParam::TInt),
            other => Err(HarnessError::Usage(format!(
                "unknown sweep parameter `{other}` (expected alpha, r, D_exploit or T_int)"
            ))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Alpha => "alpha",
            SweepParam::R => "r",
            SweepParam::DExploit => "D_exploit",
            SweepParam::TInt => "T_int",
        })
    }
}

impl SweepParam {
    /// Copy of `file` with the parameter set to `value`.
    pub fn apply(self, file: &ScenarioFile, value: f64) -> Result<ScenarioFile, HarnessError> {
        let mut f = file.clone();
        let flexible = f
            .workloads
            .iter_mut()
            .filter(|w| w.class == FlowKind::Flexible);
        match self {
            SweepParam::Alpha => {
                f.reflex.alpha = Bound::Finite(value);
                flexible.for_each(|w| w.alpha = None);
            }
            SweepParam::R => {
                f.reflex.r = value;
                flexible.for_each(|w| w.r = None);
            }
            SweepParam::DExploit => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(HarnessError::Usage(format!(
                        "D_exploit must be a positive integer, got {value}"
                    )));
                }
                f.reflex.d_exploit = value as u32;
            }
            SweepParam::TInt => f.reflex.t_int = value,
        }
        Ok(f)
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub baselines: Vec<RunResult>,
    /// Indexed by value, then by seed.
    pub runs: Vec<Vec<PairedRun>>,
}

impl SweepResult {
    /// Long-format rows `(value, seed, metric, number)`.
    pub fn rows(&self) -> Vec<(f64, u64, String, f64)> {
        let mut out = Vec::new();
        for (value, per_seed) in self.values.iter().zip(&self.runs) {
            for p in per_seed {
                for (m, v) in &p.metrics {
                    out.push((*value, p.run.seed, m.clone(), *v));
                }
            }
        }
        out
    }

    pub fn metric(&self, value_index: usize, metric: &str) -> Vec<f64> {
        self.runs[value_index]
            .iter()
            .filter_map(|p| p.metrics.iter().find(|(m, _)| m == metric).map(|(_, v)| *v))
            .collect()
    }
}

/// One run per value and seed under the file's scheme, each joined with a
/// baseline run shared by all values of the same seed.
pub fn sweep(
    file: &ScenarioFile,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepResult, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one seed".into()));
    }
    let variants = values
        .iter()
        .map(|&v| param.apply(file, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut jobs: Vec<ScenarioFile> = seeds
        .iter()
        .map(|&s| with_scheme(&seeded(file, s), SchemeSection::Baseline))
        .collect();
    for v in &variants {
        jobs.extend(seeds.iter().map(|&s| seeded(v, s)));
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(run_file)
        .collect::<Result<Vec<_>, _>>()?;
    let (baselines, treated) = results.split_at(seeds.len());
    let runs = treated
        .chunks(seeds.len())
        .zip(&variants)
        .map(|(chunk, v)| {
            chunk
                .iter()
                .zip(baselines)
                .map(|(r, b)| pair(v, b, r.clone()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepResult {
        param,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        baselines: baselines.to_vec(),
        runs,
    })
}

/// Write `sweep.csv` (long format) and `sweep_summary.csv` (spread across
/// seeds per value and metric).
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("sweep.csv");
    let f = File::create(&path).map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let param = result.param.to_string();
    (|| {
        w.write_record([param.as_str(), "seed", "metric", "value"])?;
        for (v, seed, m, x) in result.rows() {
            w.write_record([v.to_string(), seed.to_string(), m, x.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })()
    .map_err(csv_err(&path))?;

    let rows: Vec<(String, &[(String, f64)])> = result
        .values
        .iter()
        .zip(&result.runs)
        .flat_map(|(v, per_seed)| {
            per_seed
                .iter()
                .map(move |p| (v.to_string(), p.metrics.as_slice()))
        })
        .collect();
    write_spread_table(&dir.join("sweep_summary.csv"), &param, &aggregate(&rows))
}

/// Write text to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}
