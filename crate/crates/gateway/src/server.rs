//! Client-facing TCP server.
//!
//! Each connection gets a reader thread that queues incoming frames and a
//! worker that owns the connection's [`Gateway`]: it drains every queued
//! command, then runs one step of each running generation, and repeats.
//! Commands therefore always land on a step boundary.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread;

use pigment_core::session::BackendSet;
use tracing::{debug, info, warn};

use crate::gateway::Gateway;
use crate::project::ProjectStore;
use crate::wire::{frame_bytes, read_frame_body, Envelope};

#[derive(Clone)]
pub struct ServerConfig {
    pub backends: BackendSet,
    pub store: Option<Arc<ProjectStore>>,
}

enum Inbound {
    Frame(Vec<u8>),
    Closed,
}

fn reader_loop(stream: TcpStream, tx: mpsc::Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame_body(&mut reader) {
            Ok(Some(body)) => {
                if tx.send(Inbound::Frame(body)).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => {
                let _ = tx.send(Inbound::Closed);
                return;
            }
        }
    }
}

fn send_all<W: Write>(w: &mut W, envelopes: &[Envelope]) -> io::Result<()> {
    for e in envelopes {
        w.write_all(&frame_bytes(&e.to_bytes()))?;
    }
    w.flush()
}

/// Handles one frame body; `Ok(false)` means the connection must close.
fn handle_body<W: Write>(gateway: &mut Gateway, body: &[u8], out: &mut W) -> io::Result<bool> {
    let env = match Envelope::from_bytes(body) {
        Ok(env) => env,
        Err(e) => {
            let err = gateway.reject_malformed(&e.to_string());
            send_all(out, &[err])?;
            return Ok(true);
        }
    };
    match gateway.handle_message(env) {
        Ok(replies) => {
            send_all(out, &replies)?;
            Ok(true)
        }
        Err(fault) => {
            let err = gateway.fault_envelope(&fault);
            send_all(out, &[err])?;
            Ok(false)
        }
    }
}

/// Serves one client until it disconnects or violates the protocol.
pub fn serve_connection(stream: TcpStream, config: &ServerConfig) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let (tx, rx): (_, Receiver<Inbound>) = mpsc::channel();
    let read_half = stream.try_clone()?;
    let control = stream.try_clone()?;
    thread::spawn(move || reader_loop(read_half, tx));
    let result = run_worker(BufWriter::new(stream), &rx, config);
    // wakes the reader thread and tells the client we are gone
    let _ = control.shutdown(Shutdown::Both);
    result
}

fn run_worker(
    mut out: BufWriter<TcpStream>,
    rx: &Receiver<Inbound>,
    config: &ServerConfig,
) -> io::Result<()> {
    let mut gateway = Gateway::new(config.backends.clone(), config.store.clone());
    loop {
        let next = if gateway.is_busy() {
            match rx.try_recv() {
                Ok(m) => Some(m),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => Some(Inbound::Closed),
            }
        } else {
            Some(rx.recv().unwrap_or(Inbound::Closed))
        };
        match next {
            Some(Inbound::Frame(body)) => {
                if !handle_body(&mut gateway, &body, &mut out)? {
                    return Ok(());
                }
            }
            Some(Inbound::Closed) => return Ok(()),
            None => {
                let frames = gateway.pump();
                send_all(&mut out, &frames)?;
            }
        }
    }
}

/// Accepts clients forever, one worker per connection.
pub fn serve(listener: TcpListener, config: ServerConfig) {
    if let Ok(addr) = listener.local_addr() {
        info!(%addr, "listening");
    }
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let config = config.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            debug!(?peer, "client connected");
            if let Err(e) = serve_connection(stream, &config) {
                debug!(?peer, "client connection ended: {e}");
            }
        });
    }
}

/// Binds and serves in a background thread; returns the bound address.
pub fn spawn(addr: &str, config: ServerConfig) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || serve(listener, config));
    Ok(local)
}
