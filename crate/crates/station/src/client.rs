//! Scripted operator that replays the simulated user over the protocol.

use std::net::TcpStream;

use toot_core::scenario::Scenario;
use toot_core::trainer::{simulated_user_step, Strategy, UserAction};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use crate::protocol::{
    decode_down, encode_up, ClickMessage, ControlAction, ControlMessage, DownMessage, TagMessage,
    UpMessage,
};
use crate::StationError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub frames: u64,
    pub interactions: u64,
    pub final_version: u64,
    /// Error messages received from the service.
    pub errors: Vec<String>,
}

fn send(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>, msg: UpMessage) -> Result<(), StationError> {
    ws.send(Message::text(encode_up(&msg)))?;
    Ok(())
}

/// Connects to `url`, steps through the stream frame by frame and answers
/// each frame the way the simulated user of `strategy` would, using the
/// scenario's ground truth for frame `seq`.
pub fn replay_simulated_user(
    url: &str,
    scenario: &Scenario,
    strategy: Strategy,
) -> Result<ReplayReport, StationError> {
    let (mut ws, _) = tungstenite::connect(url)?;
    let mut report = ReplayReport::default();
    let step = UpMessage::Control(ControlMessage {
        action: ControlAction::Step,
    });
    send(&mut ws, step)?;
    loop {
        let text = match ws.read()? {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let msg = decode_down(&text).map_err(|e| StationError::Protocol(e.to_string()))?;
        match msg {
            DownMessage::Frame(f) => {
                report.frames += 1;
                report.final_version = f.model_version;
                let annotation = usize::try_from(f.seq)
                    .ok()
                    .and_then(|s| s.checked_sub(1))
                    .and_then(|i| scenario.train.get(i))
                    .map(|(_, a)| *a)
                    .ok_or_else(|| {
                        StationError::Protocol(format!("frame {} is not in the scenario", f.seq))
                    })?;
                match simulated_user_step(&annotation, f.tracker.status, strategy, f.seq as usize) {
                    UserAction::None => {}
                    UserAction::Tag(label) => {
                        report.interactions += 1;
                        send(&mut ws, UpMessage::Tag(TagMessage { seq: f.seq, label }))?;
                    }
                    UserAction::Click { u, v } => {
                        report.interactions += 1;
                        send(&mut ws, UpMessage::Click(ClickMessage { seq: f.seq, u, v }))?;
                    }
                }
                send(&mut ws, step)?;
            }
            DownMessage::Error(e) => report.errors.push(format!("{}: {}", e.code, e.message)),
            DownMessage::End(e) => {
                report.final_version = e.model_version;
                let _ = ws.close(None);
                while ws.read().is_ok() {}
                break;
            }
        }
    }
    Ok(report)
}
