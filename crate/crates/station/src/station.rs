use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::PathBuf;
use std::sync::mpsc::Receiver;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use toot_core::metrics::{accuracy, MetricsTrace};
use toot_core::nn::{cam_map, predict, InputImage, Label, ModelState};
use toot_core::scenario::{Frame, Scenario};
use toot_core::trainer::{FrameCtx, InteractionRecord, Session, SessionConfig, Source};
use toot_core::Error;

use crate::protocol::{
    DownMessage, EndMessage, ErrorMessage, FrameMessage, Scores, TrackBox, TrackerInfo, UpMessage,
};

pub trait FrameSource: Send {
    /// The next frame, or `None` once the stream has ended.
    fn next_frame(&mut self) -> Option<Frame>;
}

/// Replays a scenario's training stream.
pub struct ScenarioSource {
    frames: std::vec::IntoIter<Frame>,
}

impl ScenarioSource {
    pub fn new(scenario: &Scenario) -> Self {
        let frames: Vec<Frame> = scenario.train.iter().map(|(f, _)| f.clone()).collect();
        Self {
            frames: frames.into_iter(),
        }
    }
}

impl FrameSource for ScenarioSource {
    fn next_frame(&mut self) -> Option<Frame> {
        self.frames.next()
    }
}

/// Frames pushed from another thread; the stream ends when the sender is
/// dropped.
pub struct ChannelSource(pub Receiver<Frame>);

impl FrameSource for ChannelSource {
    fn next_frame(&mut self) -> Option<Frame> {
        self.0.recv().ok()
    }
}

#[derive(Debug, Clone)]
pub struct StationConfig {
    pub session: SessionConfig,
    /// Frames kept for seq-referenced tags and clicks.
    pub window: usize,
    pub display_side: usize,
    pub fps: f64,
    /// Stream frames as soon as an operator connects; otherwise wait for a
    /// `start` or `step` control.
    pub autostart: bool,
    pub audit_log: Option<PathBuf>,
    /// Strategy name, run and run seed written into the trace.
    pub trace_strategy: String,
    pub run: usize,
    pub run_seed: u64,
}

impl StationConfig {
    pub fn new(session: SessionConfig) -> Self {
        Self {
            session,
            window: 16,
            display_side: 224,
            fps: 5.0,
            autostart: true,
            audit_log: None,
            trace_strategy: "live".into(),
            run: 0,
            run_seed: 0,
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Row {
    user: bool,
    of_events: u32,
    trained: bool,
}

struct Scoring {
    test_set: Vec<(InputImage, Label)>,
    trace: MetricsTrace,
    current: f64,
}

/// Everything the service has produced so far.
#[derive(Debug)]
pub struct StationOutcome {
    /// Present when a test set was supplied.
    pub trace: Option<MetricsTrace>,
    pub records: Vec<InteractionRecord>,
    pub model: ModelState,
    pub frames: u64,
}

/// The training session behind the service, independent of the transport.
pub struct Station {
    session: Session,
    initial: ModelState,
    config: StationConfig,
    source: Box<dyn FrameSource>,
    window: VecDeque<(u64, FrameCtx)>,
    seq: u64,
    row: Option<Row>,
    scoring: Option<Scoring>,
    audit: Option<BufWriter<File>>,
    audited: usize,
    ended: bool,
}

fn training_error(e: Error, seq: Option<u64>) -> DownMessage {
    DownMessage::Error(ErrorMessage {
        code: "training_failed".into(),
        message: e.to_string(),
        seq,
    })
}

impl Station {
    /// `session` must be fresh; `reset` returns to its state. With a test
    /// set, accuracy is evaluated after every frame that trained and
    /// collected into a trace.
    pub fn new(
        session: Session,
        config: StationConfig,
        source: Box<dyn FrameSource>,
        test_set: Option<Vec<(InputImage, Label)>>,
    ) -> toot_core::Result<Self> {
        if config.window == 0 {
            return Err(Error::Config(
                "frame window must hold at least one frame".into(),
            ));
        }
        if !(config.fps > 0.0 && config.fps.is_finite()) {
            return Err(Error::Config(format!(
                "frame rate must be positive, got {}",
                config.fps
            )));
        }
        if config.display_side == 0 {
            return Err(Error::Config("display side must be positive".into()));
        }
        let scoring = match test_set {
            Some(test_set) => {
                let a0 = accuracy(session.model(), &test_set)?;
                let trace = MetricsTrace::new(
                    &config.trace_strategy,
                    config.session.batch_size,
                    config.run,
                    config.run_seed,
                    a0,
                );
                Some(Scoring {
                    test_set,
                    trace,
                    current: a0,
                })
            }
            None => None,
        };
        let audit = match &config.audit_log {
            Some(path) => Some(BufWriter::new(File::create(path)?)),
            None => None,
        };
        Ok(Self {
            initial: session.model().clone(),
            session,
            config,
            source,
            window: VecDeque::new(),
            seq: 0,
            row: None,
            scoring,
            audit,
            audited: 0,
            ended: false,
        })
    }

    pub fn config(&self) -> &StationConfig {
        &self.config
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn frames(&self) -> u64 {
        self.seq
    }

    fn write_audit(&mut self) -> toot_core::Result<()> {
        let records = self.session.records();
        if let Some(out) = &mut self.audit {
            for r in &records[self.audited..] {
                serde_json::to_writer(&mut *out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        self.audited = records.len();
        Ok(())
    }

    /// Closes the current frame's trace row.
    fn finish_row(&mut self) -> toot_core::Result<()> {
        let Some(row) = self.row.take() else {
            return Ok(());
        };
        if let Some(s) = &mut self.scoring {
            if row.trained {
                s.current = accuracy(self.session.model(), &s.test_set)?;
            }
            s.trace
                .push(row.user, row.of_events, row.trained, s.current);
        }
        Ok(())
    }

    fn fetch(&mut self) -> toot_core::Result<Option<Frame>> {
        if self.ended {
            return Ok(None);
        }
        self.finish_row()?;
        match self.source.next_frame() {
            Some(frame) => {
                self.seq += 1;
                self.row = Some(Row::default());
                Ok(Some(frame))
            }
            None => {
                self.ended = true;
                if let Some(s) = &mut self.scoring {
                    s.trace.complete = true;
                }
                Ok(None)
            }
        }
    }

    /// Skips a frame that arrived while the station was busy. Returns
    /// `false` once the stream has ended.
    pub fn drop_frame(&mut self) -> toot_core::Result<bool> {
        Ok(self.fetch()?.is_some())
    }

    /// Takes the next frame, lets the tracker train on it and renders it
    /// for the operator, preceded by an error message if the tracker's
    /// training round failed. Yields the end message once the stream is
    /// over.
    pub fn next_frame(&mut self) -> toot_core::Result<Vec<DownMessage>> {
        let Some(frame) = self.fetch()? else {
            return Ok(vec![self.end_message()]);
        };
        let seq = self.seq;
        let ctx = self.session.prepare(&frame)?;
        let mut notice = None;
        match self.session.advance(&ctx) {
            Ok(Some(_)) => {
                let row = self.row.as_mut().expect("row open");
                row.of_events += 1;
                row.trained = true;
            }
            Ok(None) => {}
            Err(e) => notice = Some(training_error(e, Some(seq))),
        }
        self.write_audit()?;
        let message = self.render(&frame, &ctx, seq)?;
        self.window.push_back((seq, ctx));
        while self.window.len() > self.config.window {
            self.window.pop_front();
        }
        Ok(notice.into_iter().chain([message]).collect())
    }

    pub fn end_message(&self) -> DownMessage {
        DownMessage::End(EndMessage {
            frames: self.seq,
            model_version: self.session.version(),
        })
    }

    fn render(&self, frame: &Frame, ctx: &FrameCtx, seq: u64) -> toot_core::Result<DownMessage> {
        let model = self.session.model();
        let (label, confidence) = predict(model, &ctx.input)?;
        let positive = if label == Label::Positive {
            confidence
        } else {
            1.0 - confidence
        };
        let side = model.arch().grid_side;
        let raw = cam_map(model, &ctx.input, Label::Positive.index())?;
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        let cam = raw
            .chunks(side)
            .map(|row| {
                row.iter()
                    .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                    .collect()
            })
            .collect();
        let tracker = self.session.tracker();
        let bbox = tracker.active_bbox().map(|b| TrackBox {
            cx: b.cx as f64 / frame.width as f64,
            cy: b.cy as f64 / frame.height as f64,
            width: b.width as f64 / frame.width as f64,
            height: b.height as f64 / frame.height as f64,
        });
        Ok(DownMessage::Frame(FrameMessage {
            seq,
            image: self.encode_display(frame)?,
            cam,
            scores: Scores {
                positive,
                negative: 1.0 - positive,
            },
            model_version: self.session.version(),
            tracker: TrackerInfo {
                status: tracker.status,
                bbox,
            },
        }))
    }

    fn encode_display(&self, frame: &Frame) -> toot_core::Result<String> {
        let img = RgbImage::from_raw(
            frame.width as u32,
            frame.height as u32,
            frame.pixels.clone(),
        )
        .ok_or_else(|| Error::Usage("frame buffer does not match its size".into()))?;
        let side = self.config.display_side as u32;
        let height = ((side as usize * frame.height) / frame.width.max(1)).max(1) as u32;
        let img = if (img.width(), img.height()) == (side, height) {
            img
        } else {
            image::imageops::resize(&img, side, height, FilterType::Triangle)
        };
        let mut png = Vec::new();
        img.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)?;
        Ok(STANDARD.encode(png))
    }

    fn held(&self, seq: u64) -> Option<FrameCtx> {
        self.window
            .iter()
            .find(|(s, _)| *s == seq)
            .map(|(_, c)| c.clone())
    }

    /// Applies a tag or click. Returns an error message for the operator
    /// when the message cannot be acted on; control messages belong to the
    /// transport and are ignored here.
    pub fn handle(&mut self, msg: UpMessage) -> toot_core::Result<Option<DownMessage>> {
        let (seq, result) = match msg {
            UpMessage::Control(_) => return Ok(None),
            UpMessage::Tag(t) => {
                let Some(ctx) = self.held(t.seq) else {
                    return Ok(Some(self.unknown_seq(t.seq)));
                };
                (t.seq, self.session.tag(&ctx, t.label, Source::User))
            }
            UpMessage::Click(c) => {
                if !((0.0..1.0).contains(&c.u) && (0.0..1.0).contains(&c.v)) {
                    return Ok(Some(DownMessage::Error(ErrorMessage {
                        code: "invalid_click".into(),
                        message: format!("click ({}, {}) outside [0, 1)", c.u, c.v),
                        seq: Some(c.seq),
                    })));
                }
                let Some(ctx) = self.held(c.seq) else {
                    return Ok(Some(self.unknown_seq(c.seq)));
                };
                (c.seq, self.session.click(&ctx, c.u, c.v))
            }
        };
        match result {
            Ok(_) => {
                if let Some(row) = &mut self.row {
                    row.user = true;
                    row.trained = true;
                }
                self.write_audit()?;
                Ok(None)
            }
            Err(e) => Ok(Some(training_error(e, Some(seq)))),
        }
    }

    fn unknown_seq(&self, seq: u64) -> DownMessage {
        DownMessage::Error(ErrorMessage {
            code: "unknown_seq".into(),
            message: format!(
                "frame {seq} is not held (window covers the last {} frames, latest {})",
                self.config.window, self.seq
            ),
            seq: Some(seq),
        })
    }

    /// Restores the initial model, empties the history and drops the
    /// track. The stream position is kept.
    pub fn reset(&mut self) -> toot_core::Result<()> {
        let seed = self.session.seed();
        self.session = Session::new(self.initial.clone(), self.config.session.clone(), seed)?;
        self.audited = 0;
        if let Some(row) = &mut self.row {
            row.trained = true;
        }
        Ok(())
    }

    pub fn finish(mut self) -> toot_core::Result<StationOutcome> {
        if !self.ended {
            self.finish_row()?;
        }
        Ok(StationOutcome {
            trace: self.scoring.map(|s| s.trace),
            records: self.session.records().to_vec(),
            model: self.session.into_model(),
            frames: self.seq,
        })
    }
}
