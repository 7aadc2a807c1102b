use std::collections::BTreeMap;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use crate::protocol::{self, Codec, Message, Payload, ProtocolError};

use super::config::NodeConfig;

/// A node's identity on the wire: id, codec, message counter and the
/// per-peer delays slept before each send.
#[derive(Debug)]
pub struct Endpoint {
    pub node_id: String,
    codec: Codec,
    next_id: AtomicU64,
    delays: BTreeMap<String, f64>,
}

impl Endpoint {
    pub fn new(cfg: &NodeConfig) -> Self {
        Endpoint {
            node_id: cfg.node_id.clone(),
            codec: Codec::new(&cfg.shared_secret),
            next_id: AtomicU64::new(1),
            delays: cfg.injected_hop_delay_ms.clone(),
        }
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn delay_to(&self, peer: &str) -> Duration {
        self.delays.get(peer).map_or(Duration::ZERO, |ms| Duration::from_secs_f64(ms / 1000.0))
    }

    pub fn message(&self, payload: Payload) -> Message {
        Message::new(self.next_id.fetch_add(1, Ordering::Relaxed), self.node_id.clone(), payload)
    }

    /// Sleeps the injected delay for `peer`, then writes one frame.
    /// Returns the bytes written.
    pub fn send(&self, stream: &mut TcpStream, peer: &str, payload: Payload) -> Result<usize, ProtocolError> {
        let msg = self.message(payload);
        let frame = self.codec.encode(&msg)?;
        let delay = self.delay_to(peer);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        io::Write::write_all(stream, &frame)?;
        Ok(frame.len())
    }

    pub fn recv(&self, stream: &mut TcpStream) -> Result<(Message, usize), ProtocolError> {
        protocol::read_message(stream, &self.codec)
    }
}

pub fn connect(address: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{address} did not resolve"));
    for addr in address.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}
