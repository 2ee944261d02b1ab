//! The edge server: one thread per connection, one inference per session.

use std::io::{self, BufReader, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use edgent_core::model::BranchyModel;
use edgent_core::predictor::{PredictorSet, Side};

use crate::engine::{classify, Engine};
use crate::shaper::ShapedWriter;
use crate::wire::{read_message, write_message, ErrorCode, Hello, Message, Mode, Timing, WireError};
use crate::NetError;

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub model: Arc<BranchyModel>,
    pub predictors: Arc<PredictorSet>,
    pub mode: Mode,
    /// Caps outgoing throughput per connection.
    pub shape_bps: Option<f64>,
}

struct Shared {
    config: EdgeConfig,
    engine: Engine,
}

/// Join handle of a server started with [`EdgeServer::spawn`].
pub type ServeHandle = JoinHandle<Result<(), NetError>>;

pub struct EdgeServer {
    listener: TcpListener,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
}

/// Stops a running [`EdgeServer::serve`] loop.
#[derive(Debug, Clone)]
pub struct ShutdownHandle {
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
    }
}

impl EdgeServer {
    pub fn bind(addr: impl ToSocketAddrs, config: EdgeConfig) -> Result<EdgeServer, NetError> {
        if let Some(bps) = config.shape_bps {
            if !(bps > 0.0 && bps.is_finite()) {
                return Err(NetError::Config(format!("shaping rate must be positive, got {bps}")));
            }
        }
        let engine = Engine::new(&config.model, &config.predictors, config.mode)?;
        let listener = TcpListener::bind(addr)?;
        Ok(EdgeServer {
            listener,
            shared: Arc::new(Shared { config, engine }),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn shutdown_handle(&self) -> io::Result<ShutdownHandle> {
        Ok(ShutdownHandle {
            stop: self.stop.clone(),
            addr: self.local_addr()?,
        })
    }

    /// Accepts connections until shut down.
    pub fn serve(self) -> Result<(), NetError> {
        log::info!(
            "edge serving `{}` in {} mode on {}",
            self.shared.config.model.name(),
            self.shared.config.mode,
            self.local_addr()?
        );
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let shared = self.shared.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &shared) {
                    log::warn!("session with {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> io::Result<(SocketAddr, ShutdownHandle, ServeHandle)> {
        let addr = self.local_addr()?;
        let handle = self.shutdown_handle()?;
        let join = thread::spawn(move || self.serve());
        Ok((addr, handle, join))
    }
}

fn validate_hello(h: &Hello, shared: &Shared) -> Result<(), (ErrorCode, String)> {
    let config = &shared.config;
    if h.model != config.model.name() {
        return Err((
            ErrorCode::ModelMismatch,
            format!("edge serves `{}`, not `{}`", config.model.name(), h.model),
        ));
    }
    if h.mode != config.mode {
        return Err((
            ErrorCode::ModeMismatch,
            format!("edge runs in {} mode, session asked for {}", config.mode, h.mode),
        ));
    }
    let exit = h.exit as usize;
    let Some(n) = shared.engine.chain_len(exit) else {
        return Err((
            ErrorCode::PlanMismatch,
            format!("exit {exit} not in 1..={}", config.model.num_exits()),
        ));
    };
    let p = h.partition as usize;
    if p == 0 || p > n {
        return Err((
            ErrorCode::PlanMismatch,
            format!("partition {p} must be in 1..={n} for exit {exit}; device-only plans need no edge"),
        ));
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> Result<(), NetError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = ShapedWriter::new(stream, shared.config.shape_bps);
    let mut pending: Option<(Hello, Instant)> = None;

    loop {
        let msg = match read_message(&mut reader) {
            Ok(m) => m,
            Err(WireError::Io(e)) if matches!(e.kind(), ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset) => {
                return Ok(());
            }
            Err(WireError::UnknownType(t)) => {
                write_message(
                    &mut writer,
                    &Message::error(ErrorCode::UnknownType, format!("unknown message type 0x{t:02x}")),
                )?;
                continue;
            }
            Err(e @ WireError::FrameTooLarge(_)) => {
                write_message(&mut writer, &Message::error(ErrorCode::FrameTooLarge, e.to_string()))?;
                return Ok(());
            }
            Err(e @ WireError::Malformed { .. }) => {
                write_message(&mut writer, &Message::error(ErrorCode::Malformed, e.to_string()))?;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };

        match (msg, pending.take()) {
            (Message::Probe(blob), None) => {
                write_message(&mut writer, &Message::Probe((blob.len() as u64).to_be_bytes().to_vec()))?;
            }
            (Message::Hello(h), None) => match validate_hello(&h, shared) {
                Ok(()) => pending = Some((h, Instant::now())),
                Err((code, text)) => {
                    write_message(&mut writer, &Message::error(code, text))?;
                    return Ok(());
                }
            },
            (Message::Input(input), Some((hello, started))) => {
                run_session(&hello, started, input, shared, &mut writer)?;
            }
            (other, state) => {
                let expected = if state.is_some() { "INPUT" } else { "HELLO or PROBE" };
                write_message(
                    &mut writer,
                    &Message::error(
                        ErrorCode::UnexpectedMessage,
                        format!("got {}, expected {expected}", other.name()),
                    ),
                )?;
                return Ok(());
            }
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn run_session(
    hello: &Hello,
    started: Instant,
    input: edgent_core::kernels::Tensor,
    shared: &Shared,
    writer: &mut ShapedWriter<TcpStream>,
) -> Result<(), NetError> {
    let input_receive_ms = ms_since(started);
    let exit = hello.exit as usize;
    let p = hello.partition as usize;
    let n = shared.engine.chain_len(exit).expect("validated");

    let input = match shared.engine.conform(exit, 0, input) {
        Ok(t) => t,
        Err(reason) => {
            write_message(writer, &Message::error(ErrorCode::Malformed, reason))?;
            return Err(NetError::Protocol("input tensor does not match the model".into()));
        }
    };

    let compute_start = Instant::now();
    let output = match shared.engine.run(exit, 0..p, input, Side::Edge) {
        Ok(t) => t,
        Err(e) => {
            write_message(writer, &Message::error(ErrorCode::Internal, e.to_string()))?;
            return Err(e);
        }
    };
    let edge_compute_ms = ms_since(compute_start);

    let send_start = Instant::now();
    let reply = if p == n {
        let (class, confidence) = classify(&output);
        Message::Result {
            class: class as u32,
            confidence,
        }
    } else {
        Message::Intermediate {
            layer: p as u32,
            tensor: output,
        }
    };
    write_message(writer, &reply)?;
    let output_send_ms = ms_since(send_start);

    write_message(
        writer,
        &Message::Timing(Timing {
            input_receive_ms,
            edge_compute_ms,
            output_send_ms,
        }),
    )?;
    log::debug!(
        "session exit {exit} p {p}: receive {input_receive_ms:.1} ms, compute {edge_compute_ms:.1} ms, send {output_send_ms:.1} ms"
    );
    Ok(())
}
