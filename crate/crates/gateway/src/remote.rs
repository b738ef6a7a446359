//! Model-server protocol over TCP: a [`Transport`] client for the engine and
//! a server that exposes any embedder/denoiser pair.
//!
//! Requests and replies are envelopes with types `info_req`/`info_rsp`,
//! `embed_req`/`embed_rsp` and `denoise_req`/`denoise_rsp`; failures come
//! back as `error`.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use pigment_core::backend::{serve_request, BackendReply, BackendRequest, Transport};
use pigment_core::session::BackendSet;
use pigment_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::wire::{read_frame, write_frame, Envelope, WireError, WireTensor};

#[derive(Serialize, Deserialize)]
struct EmbedReq {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct DenoiseReq {
    timestep: usize,
    latent: WireTensor,
    cond: WireTensor,
}

#[derive(Serialize, Deserialize)]
struct InfoRsp {
    backend_id: String,
    embed_shape: [usize; 2],
    latent_shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct TensorRsp {
    tensor: WireTensor,
}

fn request_envelope(seq: u64, request: &BackendRequest) -> Envelope {
    let (kind, payload) = match request {
        BackendRequest::Info => ("info_req", json!({})),
        BackendRequest::Embed { text } => ("embed_req", json!(EmbedReq { text: text.clone() })),
        BackendRequest::Denoise {
            timestep,
            latent,
            cond,
        } => (
            "denoise_req",
            json!(DenoiseReq {
                timestep: *timestep,
                latent: latent.into(),
                cond: cond.into(),
            }),
        ),
    };
    Envelope::new(kind, None, seq, payload)
}

fn contract(e: impl ToString) -> Error {
    Error::Contract(e.to_string())
}

fn parse_request(env: &Envelope) -> Result<BackendRequest> {
    match env.kind.as_str() {
        "info_req" => Ok(BackendRequest::Info),
        "embed_req" => {
            let r: EmbedReq = serde_json::from_value(env.payload.clone()).map_err(contract)?;
            Ok(BackendRequest::Embed { text: r.text })
        }
        "denoise_req" => {
            let r: DenoiseReq = serde_json::from_value(env.payload.clone()).map_err(contract)?;
            Ok(BackendRequest::Denoise {
                timestep: r.timestep,
                latent: r.latent.decode().map_err(contract)?,
                cond: r.cond.decode().map_err(contract)?,
            })
        }
        other => Err(contract(format!("unknown request type {other:?}"))),
    }
}

fn reply_envelope(seq: u64, reply: &Result<BackendReply>) -> Envelope {
    let (kind, payload) = match reply {
        Ok(BackendReply::Info {
            backend_id,
            embed_shape,
            latent_shape,
        }) => (
            "info_rsp",
            json!(InfoRsp {
                backend_id: backend_id.clone(),
                embed_shape: [embed_shape.0, embed_shape.1],
                latent_shape: [latent_shape.0, latent_shape.1, latent_shape.2],
            }),
        ),
        Ok(BackendReply::Embedding(t)) => ("embed_rsp", json!(TensorRsp { tensor: t.into() })),
        Ok(BackendReply::Eps(t)) => ("denoise_rsp", json!(TensorRsp { tensor: t.into() })),
        Err(e) => ("error", json!({ "message": e.to_string() })),
    };
    Envelope::new(kind, None, seq, payload)
}

fn parse_reply(request: &BackendRequest, env: Envelope) -> Result<BackendReply> {
    let expected = match request {
        BackendRequest::Info => "info_rsp",
        BackendRequest::Embed { .. } => "embed_rsp",
        BackendRequest::Denoise { .. } => "denoise_rsp",
    };
    if env.kind == "error" {
        let msg = env
            .payload
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("unspecified");
        return Err(Error::Transport(format!("backend error: {msg}")));
    }
    if env.kind != expected {
        return Err(contract(format!("expected {expected}, got {}", env.kind)));
    }
    match request {
        BackendRequest::Info => {
            let r: InfoRsp = serde_json::from_value(env.payload).map_err(contract)?;
            Ok(BackendReply::Info {
                backend_id: r.backend_id,
                embed_shape: (r.embed_shape[0], r.embed_shape[1]),
                latent_shape: (r.latent_shape[0], r.latent_shape[1], r.latent_shape[2]),
            })
        }
        BackendRequest::Embed { .. } | BackendRequest::Denoise { .. } => {
            let r: TensorRsp = serde_json::from_value(env.payload).map_err(contract)?;
            let t = r.tensor.decode().map_err(contract)?;
            Ok(if matches!(request, BackendRequest::Embed { .. }) {
                BackendReply::Embedding(t)
            } else {
                BackendReply::Eps(t)
            })
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_seq: u64,
}

/// Blocking TCP client for a model server. Reconnects lazily after any
/// failure; calls are serialized.
pub struct TcpTransport {
    addr: String,
    timeout: Duration,
    conn: Mutex<Option<Connection>>,
}

impl std::fmt::Debug for TcpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpTransport")
            .field("addr", &self.addr)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn io_error(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Error::Timeout,
        _ => Error::Transport(e.to_string()),
    }
}

fn wire_error(e: WireError) -> Error {
    match e {
        WireError::Io(io) => io_error(io),
        WireError::TooLarge(_) | WireError::Malformed(_) => contract(e),
    }
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            conn: Mutex::new(None),
        }
    }

    fn connect(&self) -> Result<Connection> {
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs().map_err(io_error)?.collect();
        let mut last = Error::Transport(format!("{} resolved to no address", self.addr));
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(self.timeout))
                        .map_err(io_error)?;
                    stream
                        .set_write_timeout(Some(self.timeout))
                        .map_err(io_error)?;
                    stream.set_nodelay(true).map_err(io_error)?;
                    let reader = BufReader::new(stream.try_clone().map_err(io_error)?);
                    return Ok(Connection {
                        reader,
                        writer: BufWriter::new(stream),
                        next_seq: 1,
                    });
                }
                Err(e) => last = io_error(e),
            }
        }
        Err(last)
    }

    fn exchange(conn: &mut Connection, request: &BackendRequest) -> Result<BackendReply> {
        let seq = conn.next_seq;
        conn.next_seq += 1;
        write_frame(&mut conn.writer, &request_envelope(seq, request)).map_err(wire_error)?;
        let reply = read_frame(&mut conn.reader)
            .map_err(wire_error)?
            .ok_or_else(|| Error::Transport("backend closed the connection".into()))?;
        if reply.seq != seq {
            return Err(contract(format!(
                "reply seq {} for request {seq}",
                reply.seq
            )));
        }
        parse_reply(request, reply)
    }
}

impl Transport for TcpTransport {
    fn call(&self, request: BackendRequest) -> Result<BackendReply> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let result = Self::exchange(guard.as_mut().expect("connected above"), &request);
        if matches!(
            result,
            Err(Error::Transport(_) | Error::Timeout | Error::Contract(_))
        ) {
            // the stream may hold a half-read reply; start fresh next time
            *guard = None;
        }
        result
    }
}

fn serve_backend_connection(
    stream: TcpStream,
    backends: &BackendSet,
) -> std::result::Result<(), WireError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut expected = 1u64;
    while let Some(env) = read_frame(&mut reader)? {
        if env.seq != expected {
            let err = Envelope::new(
                "error",
                None,
                env.seq,
                json!({ "message": format!("expected seq {expected}") }),
            );
            write_frame(&mut writer, &err)?;
            return Ok(());
        }
        expected += 1;
        let reply = parse_request(&env).and_then(|req| {
            serve_request(backends.embedder.as_ref(), backends.denoiser.as_ref(), req)
        });
        write_frame(&mut writer, &reply_envelope(env.seq, &reply))?;
    }
    Ok(())
}

/// Serves model requests on `listener` until it fails, one thread per
/// connection.
pub fn serve_backend(listener: TcpListener, backends: BackendSet) {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let backends = backends.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = serve_backend_connection(stream, &backends) {
                debug!(?peer, "backend connection ended: {e}");
            }
        });
    }
}

/// Binds and serves in a background thread; returns the bound address.
pub fn spawn_backend(addr: &str, backends: BackendSet) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || serve_backend(listener, backends));
    Ok(local)
}

/// Connects a remote backend set through a fresh [`TcpTransport`].
pub fn connect_remote(addr: &str, timeout: Duration) -> Result<BackendSet> {
    BackendSet::remote(Arc::new(TcpTransport::new(addr, timeout)))
}
