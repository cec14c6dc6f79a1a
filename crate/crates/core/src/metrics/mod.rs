//! Training-benefit metrics over per-frame accuracy traces.
//!
//! Frames are indexed from 1. `A_0` is the accuracy before any training and
//! `A_i` the accuracy after the training events of round `i`. For the last
//! interaction of a trace, the "next interaction" index is taken as `n + 1`.

mod output;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{predict_batch, InputImage, Label, ModelState};

pub use output::{write_summary_json, write_trace_csv, TRACE_HEADER};

/// Fraction of `test_set` predicted correctly without a mask. The set must
/// be nonempty and exactly balanced.
pub fn accuracy(model: &ModelState, test_set: &[(InputImage, Label)]) -> Result<f64> {
    let pos = test_set.iter().filter(|t| t.1 == Label::Positive).count();
    if test_set.is_empty() || 2 * pos != test_set.len() {
        return Err(Error::Validation(format!(
            "test set must be balanced and nonempty: {pos} positive of {}",
            test_set.len()
        )));
    }
    let images: Vec<InputImage> = test_set.iter().map(|t| t.0.clone()).collect();
    let correct = predict_batch(model, &images)?
        .iter()
        .zip(test_set)
        .filter(|(p, t)| p.0 == t.1)
        .count();
    Ok(correct as f64 / test_set.len() as f64)
}

/// Per-frame record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub strategy: String,
    pub batch_size: usize,
    pub run: usize,
    pub run_seed: u64,
    /// `u[i - 1]` is 1 when the user interacted on frame `i`.
    pub u: Vec<u8>,
    pub of_events: Vec<u32>,
    pub trained: Vec<bool>,
    /// `A_0 ..= A_n`.
    pub accuracy: Vec<f64>,
    pub complete: bool,
}

impl MetricsTrace {
    pub fn new(strategy: &str, batch_size: usize, run: usize, run_seed: u64, a0: f64) -> Self {
        Self {
            strategy: strategy.to_string(),
            batch_size,
            run,
            run_seed,
            u: Vec::new(),
            of_events: Vec::new(),
            trained: Vec::new(),
            accuracy: vec![a0],
            complete: false,
        }
    }

    pub fn push(&mut self, u: bool, of_events: u32, trained: bool, a: f64) {
        self.u.push(u as u8);
        self.of_events.push(of_events);
        self.trained.push(trained);
        self.accuracy.push(a);
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn a(&self, i: usize) -> f64 {
        self.accuracy[i]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.of_events.len() != n || self.trained.len() != n || self.accuracy.len() != n + 1 {
            return Err(Error::Validation(
                "trace vectors have inconsistent lengths".into(),
            ));
        }
        if self.u.iter().any(|u| *u > 1) {
            return Err(Error::Validation("u must be 0 or 1".into()));
        }
        if let Some(a) = self.accuracy.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Validation(format!("accuracy {a} outside [0, 1]")));
        }
        for i in 1..=n {
            if self.accuracy[i] != self.accuracy[i - 1] && !self.trained[i - 1] {
                return Err(Error::Validation(format!(
                    "accuracy changed at frame {i} without a training event"
                )));
            }
        }
        Ok(())
    }

    fn interaction(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n() || self.u[i - 1] == 0 {
            return Err(Error::Undefined(format!(
                "no user interaction at frame {i}"
            )));
        }
        Ok(())
    }

    /// Index of the first interaction after `i`, or `n + 1`.
    pub fn next_interaction(&self, i: usize) -> usize {
        (i + 1..=self.n())
            .find(|k| self.u[k - 1] == 1)
            .unwrap_or(self.n() + 1)
    }

    pub fn interaction_count(&self, i: usize, j: usize) -> usize {
        let j = j.min(self.n());
        if i > j || i == 0 {
            return 0;
        }
        self.u[i - 1..j].iter().map(|u| *u as usize).sum()
    }

    /// `A_i - A_0` for `1 <= i <= n`.
    pub fn ctb_frame(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.n() {
            return Err(Error::Undefined(format!(
                "CTB of frame {i} outside 1..={}",
                self.n()
            )));
        }
        Ok(self.a(i) - self.a(0))
    }

    /// `A_{k-1} - A_0` for an interaction at `i`.
    pub fn ctb_interaction(&self, i: usize) -> Result<f64> {
        self.interaction(i)?;
        Ok(self.a(self.next_interaction(i) - 1) - self.a(0))
    }

    /// `A_{k-1} - A_{i-1}` for an interaction at `i`.
    pub fn itb_interaction(&self, i: usize) -> Result<f64> {
        self.interaction(i)?;
        Ok(self.a(self.next_interaction(i) - 1) - self.a(i - 1))
    }

    /// Sum and count of interaction ITBs over frames `i..=j`.
    pub fn itb_total(&self, i: usize, j: usize) -> Result<(f64, usize)> {
        let j = j.min(self.n());
        let mut sum = 0.0;
        let mut count = 0usize;
        for x in i.max(1)..=j {
            if self.u[x - 1] == 1 {
                sum += self.itb_interaction(x)?;
                count += 1;
            }
        }
        Ok((sum, count))
    }

    /// Sum of interaction ITBs over frames `i..=j` divided by the number of
    /// interactions there.
    pub fn mean_itb(&self, i: usize, j: usize) -> Result<f64> {
        match self.itb_total(i, j)? {
            (_, 0) => Err(Error::Undefined(format!(
                "no interactions in frames {i}..={j}"
            ))),
            (sum, count) => Ok(sum / count as f64),
        }
    }

    /// Highest accuracy over `A_1 ..= A_n`.
    pub fn a_max(&self) -> Result<f64> {
        self.accuracy[1..]
            .iter()
            .copied()
            .reduce(f64::max)
            .ok_or_else(|| Error::Undefined("A_max of an empty trace".into()))
    }

    /// First frame `i >= 1` with `A_i >= a_f`.
    pub fn find_f(&self, a_f: f64) -> Option<usize> {
        (1..=self.n()).find(|i| self.a(*i) >= a_f)
    }

    /// The trace as if the run had stopped after frame `f`.
    pub fn truncated(&self, f: usize) -> MetricsTrace {
        let f = f.min(self.n());
        MetricsTrace {
            strategy: self.strategy.clone(),
            batch_size: self.batch_size,
            run: self.run,
            run_seed: self.run_seed,
            u: self.u[..f].to_vec(),
            of_events: self.of_events[..f].to_vec(),
            trained: self.trained[..f].to_vec(),
            accuracy: self.accuracy[..=f].to_vec(),
            complete: self.complete,
        }
    }
}

/// One closed interaction: its frame, `A_{i-1}` and `A_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionSpan {
    pub frame: usize,
    pub before: f64,
    pub until: f64,
}

impl InteractionSpan {
    pub fn itb(&self) -> f64 {
        self.until - self.before
    }
}

/// Incremental CTB / ITB bookkeeping, fed one frame at a time.
///
/// An interaction's ITB is only known once the next interaction arrives (or
/// the stream ends), so [`ItbStream::finish`] closes the last one.
#[derive(Debug, Clone)]
pub struct ItbStream {
    a0: f64,
    prev: f64,
    frame: usize,
    open: Option<(usize, f64)>,
    ctb: Vec<f64>,
    spans: Vec<InteractionSpan>,
}

impl ItbStream {
    pub fn new(a0: f64) -> Self {
        Self {
            a0,
            prev: a0,
            frame: 0,
            open: None,
            ctb: Vec::new(),
            spans: Vec::new(),
        }
    }

    fn close(&mut self) {
        if let Some((frame, before)) = self.open.take() {
            self.spans.push(InteractionSpan {
                frame,
                before,
                until: self.prev,
            });
        }
    }

    pub fn push(&mut self, u: bool, a: f64) {
        self.frame += 1;
        if u {
            self.close();
            self.open = Some((self.frame, self.prev));
        }
        self.ctb.push(a - self.a0);
        self.prev = a;
    }

    pub fn finish(mut self) -> ItbSummary {
        self.close();
        ItbSummary {
            a0: self.a0,
            ctb: self.ctb,
            spans: self.spans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItbSummary {
    pub a0: f64,
    /// `CTB_i` for frames `1..=n`.
    pub ctb: Vec<f64>,
    pub spans: Vec<InteractionSpan>,
}

impl ItbSummary {
    fn span(&self, i: usize) -> Option<&InteractionSpan> {
        self.spans.iter().find(|s| s.frame == i)
    }

    pub fn itb_interaction(&self, i: usize) -> Option<f64> {
        self.span(i).map(InteractionSpan::itb)
    }

    pub fn ctb_interaction(&self, i: usize) -> Option<f64> {
        self.span(i).map(|s| s.until - self.a0)
    }

    pub fn mean_itb(&self, i: usize, j: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in self.spans.iter().filter(|s| (i..=j).contains(&s.frame)) {
            sum += s.itb();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Undefined(format!(
                "no interactions in frames {i}..={j}"
            )));
        }
        Ok(sum / count as f64)
    }
}

/// Element-wise mean over runs of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTrace {
    pub strategy: String,
    pub batch_size: usize,
    pub runs: usize,
    pub accuracy: Vec<f64>,
    pub u: Vec<f64>,
    /// Mean of the per-run `A_max`.
    pub a_max: f64,
}

fn check_homogeneous(traces: &[MetricsTrace]) -> Result<&MetricsTrace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Validation("no traces to aggregate".into()))?;
    for t in traces {
        t.validate()?;
        if t.n() != first.n() || t.strategy != first.strategy || t.batch_size != first.batch_size {
            return Err(Error::Validation(format!(
                "cannot aggregate {} b={} (n={}) with {} b={} (n={})",
                t.strategy,
                t.batch_size,
                t.n(),
                first.strategy,
                first.batch_size,
                first.n()
            )));
        }
    }
    if first.n() == 0 {
        return Err(Error::Validation("traces have no frames".into()));
    }
    Ok(first)
}

pub fn aggregate_runs(traces: &[MetricsTrace]) -> Result<AggregateTrace> {
    let first = check_homogeneous(traces)?;
    let runs = traces.len() as f64;
    let mut accuracy = vec![0.0; first.n() + 1];
    let mut u = vec![0.0; first.n()];
    let mut a_max = 0.0;
    for t in traces {
        for (m, a) in accuracy.iter_mut().zip(&t.accuracy) {
            *m += a;
        }
        for (m, v) in u.iter_mut().zip(&t.u) {
            *m += *v as f64;
        }
        a_max += t.a_max()?;
    }
    accuracy.iter_mut().for_each(|v| *v /= runs);
    u.iter_mut().for_each(|v| *v /= runs);
    Ok(AggregateTrace {
        strategy: first.strategy.clone(),
        batch_size: first.batch_size,
        runs: traces.len(),
        accuracy,
        u,
        a_max: a_max / runs,
    })
}

/// The common stopping accuracy: the smallest mean `A_max` among strategies.
pub fn select_a_f(aggregates: &[AggregateTrace]) -> Result<f64> {
    aggregates
        .iter()
        .map(|a| a.a_max)
        .reduce(f64::min)
        .ok_or_else(|| Error::Validation("no strategies to compare".into()))
}

/// Per-strategy summary, each run truncated where it first reaches `A_f`
/// (runs that never do are kept whole).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub b: usize,
    #[serde(rename = "A_f")]
    pub a_f: f64,
    /// Mean over runs of the frame where `A_f` was reached.
    pub f: f64,
    /// Mean over runs of the interactions up to that frame.
    pub interactions_to_f: f64,
    /// Interaction ITBs pooled over all runs, each run truncated at its `f`;
    /// `None` when no run had an interaction.
    pub mean_itb: Option<f64>,
    /// Mean of the per-run `A_max`.
    pub a_max: f64,
    pub runs_reaching_f: usize,
}

pub fn summarize(traces: &[MetricsTrace], a_f: f64) -> Result<StrategySummary> {
    let first = check_homogeneous(traces)?;
    let runs = traces.len() as f64;
    let (mut f_sum, mut interactions, mut reached) = (0usize, 0usize, 0usize);
    let (mut itb_sum, mut itb_count) = (0.0, 0usize);
    let mut a_max = 0.0;
    for t in traces {
        let f = match t.find_f(a_f) {
            Some(f) => {
                reached += 1;
                f
            }
            None => t.n(),
        };
        let cut = t.truncated(f);
        f_sum += f;
        let (sum, count) = cut.itb_total(1, f)?;
        interactions += count;
        itb_sum += sum;
        itb_count += count;
        a_max += t.a_max()?;
    }
    Ok(StrategySummary {
        strategy: first.strategy.clone(),
        b: first.batch_size,
        a_f,
        f: f_sum as f64 / runs,
        interactions_to_f: interactions as f64 / runs,
        mean_itb: (itb_count > 0).then(|| itb_sum / itb_count as f64),
        a_max: a_max / runs,
        runs_reaching_f: reached,
    })
}
