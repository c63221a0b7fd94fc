use std::collections::HashMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;

use super::wire::{decode, encode};
use super::{Link, Message, Result, TransportError};

/// Bound inproc endpoints, by name.
static REGISTRY: Lazy<Mutex<HashMap<String, Sender<InprocLink>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Half of a channel pair. Frames travel encoded so this backend exercises
/// the same codec as TCP.
pub struct InprocLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl InprocLink {
    pub fn pair() -> (Self, Self) {
        let (a_tx, b_rx) = mpsc::channel();
        let (b_tx, a_rx) = mpsc::channel();
        (Self { tx: a_tx, rx: a_rx }, Self { tx: b_tx, rx: b_rx })
    }

    /// Sends raw bytes without framing checks; for exercising the decoder.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.tx.send(bytes).map_err(|_| TransportError::Closed)
    }
}

impl Link for InprocLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.send_raw(encode(msg))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => Ok(decode(&bytes)?),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout("message".into())),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

pub struct InprocAcceptor {
    name: String,
    incoming: Receiver<InprocLink>,
}

impl InprocAcceptor {
    pub fn bind(name: &str) -> Result<Self> {
        let mut registry = REGISTRY.lock().expect("registry poisoned");
        if registry.contains_key(name) {
            return Err(TransportError::AddressInUse(name.into()));
        }
        let (tx, rx) = mpsc::channel();
        registry.insert(name.to_string(), tx);
        Ok(Self {
            name: name.into(),
            incoming: rx,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn accept(&self, timeout: Duration) -> Result<InprocLink> {
        self.incoming.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout("client connection".into()),
            RecvTimeoutError::Disconnected => TransportError::Closed,
        })
    }
}

impl Drop for InprocAcceptor {
    fn drop(&mut self) {
        if let Ok(mut registry) = REGISTRY.lock() {
            registry.remove(&self.name);
        }
    }
}

pub fn connect(name: &str, timeout: Duration) -> Result<InprocLink> {
    let deadline = Instant::now() + timeout;
    loop {
        let server = REGISTRY.lock().expect("registry poisoned").get(name).cloned();
        if let Some(server) = server {
            let (client, server_side) = InprocLink::pair();
            if server.send(server_side).is_ok() {
                return Ok(client);
            }
        }
        if Instant::now() >= deadline {
            return Err(TransportError::Timeout(format!("inproc:{name}")));
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}
