//! Coordinator/plant communication: framing, links and endpoints.
//!
//! An endpoint is either `host:port` (TCP) or `inproc:<name>` (channels inside
//! one process). Both carry the same encoded frames, so a federation behaves
//! identically on either backend.

mod inproc;
mod tcp;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

pub use inproc::InprocLink;
pub use tcp::TcpLink;
pub use wire::{decode, encode, FrameError, Message};

/// Default per-phase timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid endpoint {0:?}; expected host:port or inproc:<name>")]
    BadEndpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("connection closed by peer")]
    Closed,
    #[error("malformed frame: {0}")]
    Frame(#[from] FrameError),
    #[error("peer reported protocol error {code}: {text}")]
    Remote { code: u16, text: String },
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("received GlobalModel for round {received} after acknowledging round {acked}")]
    RoundRegression { received: u32, acked: u32 },
    #[error("endpoint inproc:{0} is already bound")]
    AddressInUse(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => TransportError::Timeout("frame".into()),
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::BrokenPipe => TransportError::Closed,
            _ => TransportError::Io(e.to_string()),
        }
    }
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

/// A bidirectional, ordered, message-oriented connection.
pub trait Link: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self, timeout: Duration) -> Result<Message>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Inproc(String),
}

impl FromStr for Endpoint {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("inproc:") {
            if name.is_empty() {
                return Err(TransportError::BadEndpoint(s.into()));
            }
            return Ok(Endpoint::Inproc(name.into()));
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(s.into())),
            _ => Err(TransportError::BadEndpoint(s.into())),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => f.write_str(addr),
            Endpoint::Inproc(name) => write!(f, "inproc:{name}"),
        }
    }
}

/// Server side of an endpoint, handing out one [`Link`] per client.
pub enum Listener {
    Tcp(tcp::TcpAcceptor),
    Inproc(inproc::InprocAcceptor),
}

impl Listener {
    pub fn bind(endpoint: &Endpoint) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => Ok(Listener::Tcp(tcp::TcpAcceptor::bind(addr)?)),
            Endpoint::Inproc(name) => Ok(Listener::Inproc(inproc::InprocAcceptor::bind(name)?)),
        }
    }

    /// The bound endpoint; for TCP this carries the actual port when bound
    /// to port 0.
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Listener::Tcp(a) => Endpoint::Tcp(a.local_addr()),
            Listener::Inproc(a) => Endpoint::Inproc(a.name().to_string()),
        }
    }

    pub fn accept(&self, timeout: Duration) -> Result<Box<dyn Link>> {
        match self {
            Listener::Tcp(a) => Ok(Box::new(a.accept(timeout)?)),
            Listener::Inproc(a) => Ok(Box::new(a.accept(timeout)?)),
        }
    }
}

/// Connects to `endpoint`, retrying until `timeout` if nothing listens yet.
pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Box<dyn Link>> {
    match endpoint {
        Endpoint::Tcp(addr) => Ok(Box::new(TcpLink::connect(addr, timeout)?)),
        Endpoint::Inproc(name) => Ok(Box::new(inproc::connect(name, timeout)?)),
    }
}
