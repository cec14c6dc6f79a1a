use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::CloseFrame;
use tungstenite::{Message, WebSocket};

use crate::protocol::{decode_up, encode_down, ControlAction, DownMessage, UpMessage};
use crate::station::{Station, StationOutcome};
use crate::StationError;

const IDLE_POLL: Duration = Duration::from_millis(50);
const CLOSE_GRACE: Duration = Duration::from_secs(1);

/// Binds the service socket. Fails with a readable message when the address
/// is taken.
pub fn bind<A: ToSocketAddrs + std::fmt::Debug>(addr: A) -> Result<TcpListener, StationError> {
    TcpListener::bind(&addr).map_err(|e| StationError::Bind(format!("{addr:?}: {e}")))
}

enum Ending {
    /// The operator went away; the session waits for the next one.
    Disconnected,
    StreamEnded,
    Shutdown,
}

/// Serves operators one at a time until the frame stream ends or
/// `shutdown` is raised. A reconnecting operator resumes the same session.
pub fn serve(
    listener: TcpListener,
    mut station: Station,
    shutdown: Arc<AtomicBool>,
) -> Result<StationOutcome, StationError> {
    listener.set_nonblocking(true)?;
    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match listener.accept() {
            Ok((stream, _)) => stream,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(IDLE_POLL);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        let mut ws = match tungstenite::accept(stream) {
            Ok(ws) => ws,
            Err(_) => continue,
        };
        match run_connection(&mut ws, &mut station, &shutdown)? {
            Ending::Disconnected => continue,
            Ending::StreamEnded | Ending::Shutdown => break,
        }
    }
    Ok(station.finish()?)
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &DownMessage) -> Result<(), tungstenite::Error> {
    ws.send(Message::text(encode_down(msg)))
}

fn close(ws: &mut WebSocket<TcpStream>, code: CloseCode, reason: &str) {
    let mut reason = reason.to_string();
    // close reasons are limited to 123 bytes
    while reason.len() > 123 {
        reason.pop();
    }
    let _ = ws.close(Some(CloseFrame {
        code,
        reason: reason.into(),
    }));
    let deadline = Instant::now() + CLOSE_GRACE;
    let _ = ws
        .get_mut()
        .set_read_timeout(Some(Duration::from_millis(50)));
    while Instant::now() < deadline {
        match ws.read() {
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
}

/// Sends the next frame. Returns `true` when the stream has ended.
fn emit(ws: &mut WebSocket<TcpStream>, station: &mut Station) -> Result<bool, StationError> {
    for msg in station.next_frame()? {
        send(ws, &msg)?;
    }
    Ok(station.is_ended())
}

fn run_connection(
    ws: &mut WebSocket<TcpStream>,
    station: &mut Station,
    shutdown: &AtomicBool,
) -> Result<Ending, StationError> {
    if station.is_ended() {
        send(ws, &station.end_message())?;
        close(ws, CloseCode::Normal, "stream ended");
        return Ok(Ending::StreamEnded);
    }
    let period = Duration::from_secs_f64(1.0 / station.config().fps);
    let mut running = station.config().autostart;
    let mut next_due = Instant::now();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            close(ws, CloseCode::Away, "service shutting down");
            return Ok(Ending::Shutdown);
        }
        let now = Instant::now();
        if running && now >= next_due {
            // frames that came due while the station was busy are dropped
            let late = ((now - next_due).as_secs_f64() / period.as_secs_f64()).floor() as u32;
            for _ in 0..late {
                station.drop_frame()?;
            }
            next_due += period * (late + 1);
            if emit(ws, station)? {
                close(ws, CloseCode::Normal, "stream ended");
                return Ok(Ending::StreamEnded);
            }
        }
        let wait = if running {
            next_due
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1))
        } else {
            IDLE_POLL
        };
        ws.get_mut().set_read_timeout(Some(wait))?;
        let text = match ws.read() {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                close(
                    ws,
                    CloseCode::Protocol,
                    "binary messages are not part of the protocol",
                );
                return Ok(Ending::Disconnected);
            }
            Ok(_) => continue,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
            {
                continue
            }
            Err(_) => return Ok(Ending::Disconnected),
        };
        let msg = match decode_up(&text) {
            Ok(m) => m,
            Err(e) => {
                close(ws, CloseCode::Protocol, &e.to_string());
                return Ok(Ending::Disconnected);
            }
        };
        match msg {
            UpMessage::Control(c) => match c.action {
                ControlAction::Start => {
                    running = true;
                    next_due = Instant::now();
                }
                ControlAction::Pause => running = false,
                ControlAction::Reset => station.reset()?,
                ControlAction::Step => {
                    if emit(ws, station)? {
                        close(ws, CloseCode::Normal, "stream ended");
                        return Ok(Ending::StreamEnded);
                    }
                    next_due = Instant::now() + period;
                }
            },
            other => {
                if let Some(reply) = station.handle(other)? {
                    send(ws, &reply)?;
                }
            }
        }
    }
}
