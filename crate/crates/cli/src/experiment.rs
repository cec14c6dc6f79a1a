use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use toot_core::metrics::{
    aggregate_runs, select_a_f, summarize, write_summary_json, write_trace_csv, AggregateTrace,
    MetricsTrace, StrategySummary,
};
use toot_core::nn::ArchConfig;
use toot_core::scenario::Scenario;
use toot_core::trainer::{
    run_session_prepared, PreparedScenario, SessionOutcome, Strategy, StrategyConfig,
};
use toot_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub batch_size: usize,
}

impl StrategySpec {
    pub fn new(strategy: Strategy, batch_size: usize) -> Self {
        Self {
            strategy,
            batch_size,
        }
    }

    pub fn label(&self) -> String {
        format!("{}_b{}", self.strategy, self.batch_size)
    }

    /// Parses `name` or `name:b`, using `default_b` for the former.
    pub fn parse(text: &str, default_b: usize) -> Result<Self> {
        let (name, b) = match text.split_once(':') {
            Some((name, b)) => (
                name,
                b.parse()
                    .map_err(|_| Error::Config(format!("bad batch size in {text:?}")))?,
            ),
            None => (text, default_b),
        };
        Ok(Self::new(name.parse()?, b))
    }
}

/// Offline, semi-online, and localized and assisted-localized at b = 2 and 8.
pub fn default_grid() -> Vec<StrategySpec> {
    vec![
        StrategySpec::new(Strategy::Offline, 8),
        StrategySpec::new(Strategy::SemiOnline, 8),
        StrategySpec::new(Strategy::Localized, 2),
        StrategySpec::new(Strategy::Localized, 8),
        StrategySpec::new(Strategy::OfLocalized, 2),
        StrategySpec::new(Strategy::OfLocalized, 8),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub strategies: Vec<StrategySpec>,
    pub runs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub arch: ArchConfig,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub jobs: usize,
    /// Also write each run's training events as JSON lines.
    #[serde(skip)]
    pub audit: bool,
}

impl ExperimentSpec {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            strategies: default_grid(),
            runs: 10,
            seed: 0,
            eval_every: 1,
            arch: ArchConfig::default(),
            out: out.into(),
            jobs: 1,
            audit: false,
        }
    }

    fn config(&self, s: &StrategySpec) -> StrategyConfig {
        let mut c = StrategyConfig::new(s.strategy, s.batch_size);
        c.runs = self.runs;
        c.seed = self.seed;
        c.eval_every = self.eval_every;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies requested".into()));
        }
        for s in &self.strategies {
            self.config(s).validate()?;
        }
        if self.jobs == 0 {
            return Err(Error::Config("job count must be at least 1".into()));
        }
        self.arch.validate()
    }
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub a_f: f64,
    pub aggregates: Vec<AggregateTrace>,
    pub summaries: Vec<StrategySummary>,
    /// Runs that stopped early, one line each.
    pub failures: Vec<String>,
}

impl ExperimentReport {
    pub fn summary(&self, strategy: Strategy, b: usize) -> Option<&StrategySummary> {
        self.summaries
            .iter()
            .find(|s| s.strategy == strategy.as_str() && s.b == b)
    }
}

pub fn trace_path(out: &Path, s: &StrategySpec, run: usize) -> PathBuf {
    out.join("traces")
        .join(format!("{}_run{run:02}.csv", s.label()))
}

fn write_trace(path: &Path, trace: &MetricsTrace) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_trace_csv(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_audit(path: &Path, outcome: &SessionOutcome) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in &outcome.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every strategy `spec.runs` times over `scenario` and writes traces,
/// per-strategy summaries and the comparison table under `spec.out`.
pub fn run_experiment(
    scenario: &Scenario,
    spec: &ExperimentSpec,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentReport> {
    spec.validate()?;
    let prepared = PreparedScenario::new(scenario, &spec.arch)?;
    for dir in ["traces", "summaries"] {
        fs::create_dir_all(spec.out.join(dir))?;
    }
    fs::write(
        spec.out.join("experiment.json"),
        serde_json::to_string_pretty(spec)? + "\n",
    )?;

    let jobs: Vec<(usize, usize)> = (0..spec.strategies.len())
        .flat_map(|s| (0..spec.runs).map(move |r| (s, r)))
        .collect();
    let results: Vec<Mutex<Option<Result<MetricsTrace>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(s, run)) = jobs.get(k) else {
            break;
        };
        let strategy = &spec.strategies[s];
        let started = Instant::now();
        let result = run_session_prepared(&prepared, &spec.config(strategy), &spec.arch, run)
            .and_then(|outcome| {
                write_trace(&trace_path(&spec.out, strategy, run), &outcome.trace)?;
                if spec.audit {
                    let path = spec
                        .out
                        .join("traces")
                        .join(format!("{}_run{run:02}.events.jsonl", strategy.label()));
                    write_audit(&path, &outcome)?;
                }
                match outcome.error {
                    Some(e) => Err(e),
                    None => Ok(outcome.trace),
                }
            });
        let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
        let line = match &result {
            Ok(t) => format!(
                "[{finished}/{}] {} run {run}: A_max {:.3}, {} interactions, {} assisted events ({:.1} s)",
                jobs.len(),
                strategy.label(),
                t.a_max().unwrap_or(f64::NAN),
                t.interaction_count(1, t.n()),
                t.of_events.iter().map(|v| *v as u64).sum::<u64>(),
                started.elapsed().as_secs_f64()
            ),
            Err(e) => format!("[{finished}/{}] {} run {run}: failed: {e}", jobs.len(), strategy.label()),
        };
        progress(&line);
        *results[k].lock().unwrap() = Some(result);
    };
    std::thread::scope(|scope| {
        for _ in 0..spec.jobs.min(jobs.len()).max(1) {
            scope.spawn(&worker);
        }
    });

    let mut failures = Vec::new();
    let mut per_strategy: Vec<Vec<MetricsTrace>> = vec![Vec::new(); spec.strategies.len()];
    for (k, slot) in results.into_iter().enumerate() {
        let (s, run) = jobs[k];
        match slot.into_inner().unwrap() {
            Some(Ok(trace)) => per_strategy[s].push(trace),
            Some(Err(e)) => failures.push(format!("{} run {run}: {e}", spec.strategies[s].label())),
            None => failures.push(format!(
                "{} run {run}: not executed",
                spec.strategies[s].label()
            )),
        }
    }

    let mut aggregates = Vec::new();
    let mut kept = Vec::new();
    for (s, traces) in per_strategy.iter().enumerate() {
        if traces.is_empty() {
            continue;
        }
        aggregates.push(aggregate_runs(traces)?);
        kept.push((s, traces));
    }
    let a_f = select_a_f(&aggregates)?;
    let mut summaries = Vec::new();
    for (s, traces) in kept {
        let summary = summarize(traces, a_f)?;
        write_summary_json(
            &summary,
            &spec
                .out
                .join("summaries")
                .join(format!("{}.json", spec.strategies[s].label())),
        )?;
        summaries.push(summary);
    }
    fs::write(spec.out.join("comparison.csv"), comparison_csv(&summaries))?;
    fs::write(
        spec.out.join("comparison.md"),
        comparison_table(a_f, &summaries),
    )?;
    Ok(ExperimentReport {
        a_f,
        aggregates,
        summaries,
        failures,
    })
}

fn fmt_itb(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

pub fn comparison_csv(summaries: &[StrategySummary]) -> String {
    let mut out =
        String::from("strategy,b,A_f,interactions_to_f,mean_itb,f,a_max,runs_reaching_f\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.strategy,
            s.b,
            s.a_f,
            s.interactions_to_f,
            fmt_itb(s.mean_itb),
            s.f,
            s.a_max,
            s.runs_reaching_f
        );
    }
    out
}

/// Markdown table: interactions and mean ITB up to the common accuracy.
pub fn comparison_table(a_f: f64, summaries: &[StrategySummary]) -> String {
    let mut out = format!("A_f = {a_f:.4}\n\n");
    out.push_str("| strategy | b | interactions to A_f | mean ITB | frames to A_f | A_max | runs reaching A_f |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for s in summaries {
        let itb = s
            .mean_itb
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.5}"));
        let _ = writeln!(
            out,
            "| {} | {} | {:.1} | {} | {:.1} | {:.4} | {} |",
            s.strategy, s.b, s.interactions_to_f, itb, s.f, s.a_max, s.runs_reaching_f
        );
    }
    out
}
