//! Ground-station service.
//!
//! Streams frames to a single operator over a WebSocket, each with the
//! current scores, a class activation map and the tracker state, and turns
//! the operator's tags and clicks into training rounds on the live model.

pub mod client;
pub mod protocol;
mod server;
mod station;

pub use server::{bind, serve};
pub use station::{
    ChannelSource, FrameSource, ScenarioSource, Station, StationConfig, StationOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum StationError {
    #[error(transparent)]
    Core(#[from] toot_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("websocket: {0}")]
    WebSocket(#[from] tungstenite::Error),
    #[error("cannot bind {0}")]
    Bind(String),
    #[error("protocol: {0}")]
    Protocol(String),
}
