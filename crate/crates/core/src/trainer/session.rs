use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::history::{
    build_batch_localized, build_batch_semi_online, masked_copies, HistoryDb, Source,
};
use super::{
    derive_seed, simulated_user_step, EventKind, InteractionRecord, StopCondition, Strategy,
    StrategyConfig, UserAction,
};
use crate::error::{Error, Result};
use crate::masking::{click_to_cell, default_radius};
use crate::metrics::{accuracy, MetricsTrace};
use crate::nn::{
    adadelta_step, backward, init_model, AdadeltaParams, ArchConfig, InputImage, Label, ModelState,
    TrainingExample,
};
use crate::scenario::{Annotation, Frame, Scenario};
use crate::tracker::{init_track, update_track_pyr, Point, Pyramid, TrackerParams, TrackerState};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub batch_size: usize,
    /// Mask radius in grid cells; defaults to the grid-scaled reference.
    pub radius: Option<f64>,
    /// Start a track on every user click and train on tracked frames.
    pub optical_flow: bool,
    pub adadelta: AdadeltaParams,
    pub tracker: TrackerParams,
}

impl SessionConfig {
    pub fn new(batch_size: usize, optical_flow: bool) -> Self {
        Self {
            batch_size,
            radius: None,
            optical_flow,
            adadelta: AdadeltaParams::default(),
            tracker: TrackerParams::default(),
        }
    }
}

/// A frame as the session sees it: the classifier input and, when optical
/// flow is on, the tracker pyramid.
#[derive(Debug, Clone)]
pub struct FrameCtx {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub input: InputImage,
    pub pyramid: Option<Arc<Pyramid>>,
}

/// Normalized `[0, 1)` coordinate to pixel center coordinate.
fn to_pixel(t: f64, size: usize) -> f32 {
    ((t * size as f64 - 0.5).clamp(0.0, size as f64 - 1.0)) as f32
}

fn to_normalized(p: f32, size: usize) -> f64 {
    ((p as f64 + 0.5) / size as f64).clamp(0.0, 1.0 - 1e-9)
}

pub struct Session {
    model: ModelState,
    history: HistoryDb,
    tracker: TrackerState,
    /// Pyramid of the frame the tracker last stood on.
    track_ref: Option<Arc<Pyramid>>,
    rng: ChaCha8Rng,
    seed: u64,
    config: SessionConfig,
    radius: f64,
    records: Vec<InteractionRecord>,
}

impl Session {
    pub fn new(model: ModelState, config: SessionConfig, seed: u64) -> Result<Self> {
        if config.batch_size < 2 || config.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {}",
                config.batch_size
            )));
        }
        config.adadelta.validate()?;
        let radius = config
            .radius
            .unwrap_or_else(|| default_radius(model.arch().grid_side));
        Ok(Self {
            model,
            history: HistoryDb::new(),
            tracker: TrackerState::idle(),
            track_ref: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            config,
            radius,
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn version(&self) -> u64 {
        self.model.version()
    }

    pub fn history(&self) -> &HistoryDb {
        &self.history
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.tracker
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Seed of the batch sampler.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn prepare(&self, frame: &Frame) -> Result<FrameCtx> {
        let input = frame.to_input(self.model.arch().input_side)?;
        Ok(self.prepare_with(frame, input))
    }

    /// Like [`Session::prepare`] with a precomputed classifier input.
    pub fn prepare_with(&self, frame: &Frame, input: InputImage) -> FrameCtx {
        let pyramid = self.config.optical_flow.then(|| {
            Arc::new(Pyramid::build(
                &frame.to_gray(),
                self.config.tracker.lk.levels,
            ))
        });
        FrameCtx {
            index: frame.index,
            width: frame.width,
            height: frame.height,
            input,
            pyramid,
        }
    }

    fn train(&mut self, batch: &[TrainingExample]) -> Result<()> {
        let grads = backward(&self.model, batch)?;
        adadelta_step(&mut self.model, &grads, self.config.adadelta)
    }

    /// Moves an active track onto `ctx` and, if it holds, trains on the
    /// tracked center. Returns the generated event.
    pub fn advance(&mut self, ctx: &FrameCtx) -> Result<Option<InteractionRecord>> {
        if !self.tracker.is_active() || ctx.index <= self.tracker.frame_index {
            return Ok(None);
        }
        let (Some(prev), Some(next)) = (self.track_ref.clone(), ctx.pyramid.clone()) else {
            return Ok(None);
        };
        self.tracker =
            update_track_pyr(&self.tracker, &prev, &next, ctx.index, &self.config.tracker)?;
        let Some(bbox) = self.tracker.active_bbox() else {
            self.track_ref = None;
            return Ok(None);
        };
        self.track_ref = Some(next);
        let u = to_normalized(bbox.cx, ctx.width);
        let v = to_normalized(bbox.cy, ctx.height);
        self.localized_round(ctx, u, v, Source::OpticalFlow)
            .map(Some)
    }

    pub fn tag(
        &mut self,
        ctx: &FrameCtx,
        label: Label,
        source: Source,
    ) -> Result<InteractionRecord> {
        let incoming = TrainingExample::new(ctx.input.clone(), label);
        let batch = build_batch_semi_online(
            &self.history,
            &incoming,
            self.config.batch_size,
            &mut self.rng,
        )?;
        self.train(&batch)?;
        self.history.insert(incoming, ctx.index, source);
        let record = InteractionRecord {
            frame: ctx.index,
            kind: EventKind::tag(label),
            source,
        };
        self.records.push(record);
        Ok(record)
    }

    /// A user click at normalized `(u, v)`: one localized round, then, with
    /// optical flow on, a new track started from the click.
    pub fn click(&mut self, ctx: &FrameCtx, u: f64, v: f64) -> Result<InteractionRecord> {
        let record = self.localized_round(ctx, u, v, Source::User)?;
        if let (true, Some(pyramid)) = (self.config.optical_flow, ctx.pyramid.clone()) {
            let center = Point::new(to_pixel(u, ctx.width), to_pixel(v, ctx.height));
            self.tracker = init_track(
                pyramid.base(),
                center,
                None,
                ctx.index,
                &self.config.tracker,
            )?;
            self.track_ref = Some(pyramid);
        }
        Ok(record)
    }

    fn localized_round(
        &mut self,
        ctx: &FrameCtx,
        u: f64,
        v: f64,
        source: Source,
    ) -> Result<InteractionRecord> {
        let side = self.model.arch().grid_side;
        let cell = click_to_cell(u, v, side)?;
        let copies = masked_copies(&ctx.input, cell, self.radius, side)?;
        let batch = build_batch_localized(
            &self.history,
            &copies,
            self.config.batch_size,
            &mut self.rng,
        )?;
        self.train(&batch)?;
        let [pos, neg] = copies;
        self.history.insert(pos, ctx.index, source);
        self.history.insert(neg, ctx.index, source);
        let record = InteractionRecord {
            frame: ctx.index,
            kind: EventKind::Click { u, v },
            source,
        };
        self.records.push(record);
        Ok(record)
    }

    /// Drops the track and its reference frame.
    pub fn reset_tracker(&mut self) {
        self.tracker = TrackerState::idle();
        self.track_ref = None;
    }
}

/// Classifier inputs computed once and shared by every run over a scenario.
#[derive(Debug, Clone)]
pub struct PreparedScenario<'a> {
    pub scenario: &'a Scenario,
    pub train_inputs: Vec<InputImage>,
    pub test_set: Vec<(InputImage, Label)>,
}

impl<'a> PreparedScenario<'a> {
    pub fn new(scenario: &'a Scenario, arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        scenario.validate()?;
        Ok(Self {
            scenario,
            train_inputs: scenario.train_inputs(arch.input_side)?,
            test_set: scenario.test_set(arch.input_side)?,
        })
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.scenario.train.iter().map(|(_, a)| a)
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub trace: MetricsTrace,
    pub records: Vec<InteractionRecord>,
    pub model: ModelState,
    /// Set when the run stopped early on an error; the trace is then
    /// partial and marked incomplete.
    pub error: Option<Error>,
}

/// Accuracy bookkeeping shared by the simulated runs.
struct Evaluator<'a> {
    test: &'a [(InputImage, Label)],
    every: usize,
    pending: usize,
    current: f64,
}

impl<'a> Evaluator<'a> {
    fn new(model: &ModelState, test: &'a [(InputImage, Label)], every: usize) -> Result<Self> {
        Ok(Self {
            test,
            every,
            pending: 0,
            current: accuracy(model, test)?,
        })
    }

    fn after_round(&mut self, model: &ModelState, trained: bool) -> Result<f64> {
        if trained {
            self.pending += 1;
            if self.pending >= self.every {
                self.current = accuracy(model, self.test)?;
                self.pending = 0;
            }
        }
        Ok(self.current)
    }
}

fn stop_reached(stop: StopCondition, a: f64) -> bool {
    matches!(stop, StopCondition::ReachAccuracy(t) if a >= t)
}

/// The session run `run` of `config` starts from, with its run seed.
pub fn session_for_run(
    config: &StrategyConfig,
    arch: &ArchConfig,
    run: usize,
) -> Result<(Session, u64)> {
    let seed = config.run_seed(run);
    let session = Session::new(
        init_model(arch, seed)?,
        SessionConfig::new(config.batch_size, config.strategy.uses_flow()),
        derive_seed(seed, 1),
    )?;
    Ok((session, seed))
}

/// Replays the simulated user over the training stream for run `run`.
pub fn run_session(
    scenario: &Scenario,
    config: &StrategyConfig,
    arch: &ArchConfig,
    run: usize,
) -> Result<SessionOutcome> {
    let prepared = PreparedScenario::new(scenario, arch)?;
    run_session_prepared(&prepared, config, arch, run)
}

pub fn run_session_prepared(
    prepared: &PreparedScenario,
    config: &StrategyConfig,
    arch: &ArchConfig,
    run: usize,
) -> Result<SessionOutcome> {
    config.validate()?;
    if config.strategy == Strategy::Offline {
        return run_offline(prepared, config, arch, run);
    }
    let (mut session, seed) = session_for_run(config, arch, run)?;
    let mut eval = Evaluator::new(session.model(), &prepared.test_set, config.eval_every)?;
    let mut trace = MetricsTrace::new(
        config.strategy.as_str(),
        config.batch_size,
        run,
        seed,
        eval.current,
    );

    let step = |session: &mut Session, i: usize| -> Result<(bool, u32)> {
        let (frame, annotation) = &prepared.scenario.train[i];
        let ctx = session.prepare_with(frame, prepared.train_inputs[i].clone());
        let of_events = session.advance(&ctx)?.is_some() as u32;
        let action = simulated_user_step(
            annotation,
            session.tracker().status,
            config.strategy,
            frame.index,
        );
        let user = match action {
            UserAction::None => false,
            UserAction::Tag(label) => {
                session.tag(&ctx, label, Source::User)?;
                true
            }
            UserAction::Click { u, v } => {
                session.click(&ctx, u, v)?;
                true
            }
        };
        Ok((user, of_events))
    };

    let mut error = None;
    for i in 0..prepared.train_inputs.len() {
        let (user, of_events) = match step(&mut session, i) {
            Ok(r) => r,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        let trained = user || of_events > 0;
        let a = match eval.after_round(session.model(), trained) {
            Ok(a) => a,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        trace.push(user, of_events, trained, a);
        if stop_reached(config.stop, a) {
            break;
        }
    }
    trace.complete = error.is_none();
    Ok(SessionOutcome {
        trace,
        records: session.records.clone(),
        model: session.into_model(),
        error,
    })
}

/// Cycles through per-label shuffled index lists, reshuffling each pass.
struct ShuffledPool {
    items: Vec<usize>,
    next: usize,
}

impl ShuffledPool {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut pool = Self { items, next: 0 };
        pool.items.shuffle(rng);
        pool
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        let k = k.min(self.items.len());
        while out.len() < k {
            if self.next == self.items.len() {
                self.items.shuffle(rng);
                self.next = 0;
            }
            out.push(self.items[self.next]);
            self.next += 1;
        }
        out
    }
}

/// Reference training with every tag known in advance: one balanced
/// mini-batch gradient update per frame of the stream, each counted as an
/// interaction.
pub fn run_offline(
    prepared: &PreparedScenario,
    config: &StrategyConfig,
    arch: &ArchConfig,
    run: usize,
) -> Result<SessionOutcome> {
    config.validate()?;
    let seed = config.run_seed(run);
    offline_rounds(
        prepared,
        config,
        arch,
        seed,
        run,
        prepared.train_inputs.len(),
    )
}

fn offline_rounds(
    prepared: &PreparedScenario,
    config: &StrategyConfig,
    arch: &ArchConfig,
    seed: u64,
    run: usize,
    rounds: usize,
) -> Result<SessionOutcome> {
    let mut model = init_model(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let labels: Vec<Label> = prepared.annotations().map(Annotation::label).collect();
    let by_label =
        |l: Label| -> Vec<usize> { (0..labels.len()).filter(|i| labels[*i] == l).collect() };
    let mut pos = ShuffledPool::new(by_label(Label::Positive), &mut rng);
    let mut neg = ShuffledPool::new(by_label(Label::Negative), &mut rng);
    let half = config.batch_size / 2;
    let mut eval = Evaluator::new(&model, &prepared.test_set, config.eval_every)?;
    let mut trace = MetricsTrace::new(
        Strategy::Offline.as_str(),
        config.batch_size,
        run,
        seed,
        eval.current,
    );
    let mut error = None;
    for _ in 0..rounds {
        let mut p = pos.take(half, &mut rng);
        let mut q = neg.take(half, &mut rng);
        p.truncate(q.len() + 1);
        q.truncate(p.len() + 1);
        let batch: Vec<TrainingExample> = p
            .iter()
            .chain(&q)
            .map(|i| TrainingExample::new(prepared.train_inputs[*i].clone(), labels[*i]))
            .collect();
        let result = backward(&model, &batch)
            .and_then(|g| adadelta_step(&mut model, &g, AdadeltaParams::default()))
            .and_then(|_| eval.after_round(&model, true));
        let a = match result {
            Ok(a) => a,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        trace.push(true, 0, true, a);
        if stop_reached(config.stop, a) {
            break;
        }
    }
    trace.complete = error.is_none();
    Ok(SessionOutcome {
        trace,
        records: Vec::new(),
        model,
        error,
    })
}

/// Offline reference training for `rounds` updates from a model seeded with
/// `seed`. Returns the final model and the best accuracy over the per-round
/// evaluations (`A_0` when `rounds` is zero).
pub fn offline_train(
    scenario: &Scenario,
    arch: &ArchConfig,
    b: usize,
    rounds: usize,
    seed: u64,
) -> Result<(ModelState, f64)> {
    let prepared = PreparedScenario::new(scenario, arch)?;
    let mut config = StrategyConfig::new(Strategy::Offline, b);
    config.runs = 1;
    config.validate()?;
    let outcome = offline_rounds(&prepared, &config, arch, seed, 0, rounds)?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    let best = outcome
        .trace
        .accuracy
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((outcome.model, best))
}
