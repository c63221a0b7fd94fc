use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::wire::{decode_header, decode_payload, encode, HEADER_LEN};
use super::{Link, Message, Result, TransportError};

/// One TCP connection carrying a whole session.
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        loop {
            let attempt = addr
                .to_socket_addrs()
                .map_err(|e| TransportError::BadEndpoint(format!("{addr}: {e}")))?
                .next()
                .ok_or_else(|| TransportError::BadEndpoint(addr.into()))
                .and_then(|sa| Ok(TcpStream::connect_timeout(&sa, Duration::from_secs(5))?));
            match attempt {
                Ok(stream) => return Self::new(stream),
                Err(TransportError::BadEndpoint(e)) => return Err(TransportError::BadEndpoint(e)),
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    /// Writes raw bytes; for exercising the peer's decoder.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        Ok(())
    }
}

impl Link for TcpLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.send_raw(&encode(msg))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message> {
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut header = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut header)?;
        let (ty, len) = decode_header(&header)?;
        let mut payload = vec![0u8; len];
        self.stream.read_exact(&mut payload)?;
        Ok(decode_payload(ty, &payload)?)
    }
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> String {
        self.listener
            .local_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unbound:0".into())
    }

    pub fn accept(&self, timeout: Duration) -> Result<TcpLink> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return TcpLink::new(stream);
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout("client connection".into()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}
