//! The online training session: strategies, the history database, batch
//! construction, the simulated user and the optical-flow assisted loop.

mod history;
mod session;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Label;
use crate::scenario::Annotation;
use crate::tracker::TrackStatus;

pub use history::{
    build_batch_localized, build_batch_semi_online, masked_copies, HistoryDb, Source, StoredExample,
};
pub use session::{
    offline_train, run_offline, run_session, run_session_prepared, session_for_run, FrameCtx,
    PreparedScenario, Session, SessionConfig, SessionOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Offline,
    SemiOnline,
    Localized,
    OfLocalized,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Offline,
        Strategy::SemiOnline,
        Strategy::Localized,
        Strategy::OfLocalized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Offline => "offline",
            Strategy::SemiOnline => "semi_online",
            Strategy::Localized => "localized",
            Strategy::OfLocalized => "of_localized",
        }
    }

    pub fn uses_flow(self) -> bool {
        self == Strategy::OfLocalized
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected offline, semi_online, localized or of_localized)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    None,
    ReachAccuracy(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub runs: usize,
    pub seed: u64,
    pub stop: StopCondition,
    /// Evaluate after every `eval_every`-th training round; accuracy is
    /// carried forward in between.
    pub eval_every: usize,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, batch_size: usize) -> Self {
        Self {
            strategy,
            batch_size,
            runs: 10,
            seed: 0,
            stop: StopCondition::None,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.runs == 0 {
            return Err(Error::Config("run count must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config(
                "evaluation cadence must be at least 1".into(),
            ));
        }
        if let StopCondition::ReachAccuracy(a) = self.stop {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!(
                    "stop accuracy must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Seed of run `run`: model initialization and batch sampling both
    /// derive from it, so every strategy starts run `r` from the same model.
    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, run as u64)
    }
}

/// SplitMix64 finalizer over `base + k * golden`.
pub fn derive_seed(base: u64, k: u64) -> u64 {
    let mut z = base.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    TagPositive,
    TagNegative,
    Click { u: f64, v: f64 },
}

impl EventKind {
    pub fn tag(label: Label) -> Self {
        match label {
            Label::Positive => EventKind::TagPositive,
            Label::Negative => EventKind::TagNegative,
        }
    }
}

/// One training event, as written to the audit log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub frame: usize,
    #[serde(flatten)]
    pub kind: EventKind,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UserAction {
    None,
    Tag(Label),
    Click { u: f64, v: f64 },
}

/// What the replayed user does on a frame. Tagging users label every frame;
/// clicking users click the target center whenever it is visible, or, with
/// optical flow, only when it is visible and not already being tracked.
pub fn simulated_user_step(
    annotation: &Annotation,
    tracker_status: TrackStatus,
    strategy: Strategy,
    _frame_index: usize,
) -> UserAction {
    let click = || match annotation.center {
        Some((u, v)) if annotation.present => UserAction::Click { u, v },
        _ => UserAction::None,
    };
    match strategy {
        Strategy::Offline => UserAction::None,
        Strategy::SemiOnline => UserAction::Tag(annotation.label()),
        Strategy::Localized => click(),
        Strategy::OfLocalized if tracker_status == TrackStatus::Active => UserAction::None,
        Strategy::OfLocalized => click(),
    }
}
