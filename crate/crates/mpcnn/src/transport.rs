//! Point-to-point FIFO transports: an in-process channel mesh for simulation
//! and a TCP mesh for networked runs. Both move the same encoded frames, so
//! counters and transcripts are identical across modes.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

pub trait Transport: Send {
    fn index(&self) -> usize;
    fn party_count(&self) -> usize;
    fn send(&mut self, to: usize, bytes: &[u8]) -> Result<()>;
    fn recv(&mut self, from: usize) -> Result<Vec<u8>>;
}

/// In-process mesh of unbounded FIFO channels.
pub struct LocalTransport {
    index: usize,
    senders: Vec<Option<Sender<Vec<u8>>>>,
    receivers: Vec<Option<Receiver<Vec<u8>>>>,
}

/// Build a fully connected mesh for `n` parties.
pub fn local_mesh(n: usize) -> Vec<LocalTransport> {
    let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> =
        (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> =
        (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            let (tx, rx) = channel();
            senders[from][to] = Some(tx);
            receivers[to][from] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(index, (s, r))| LocalTransport { index, senders: s, receivers: r })
        .collect()
}

impl Transport for LocalTransport {
    fn index(&self) -> usize {
        self.index
    }

    fn party_count(&self) -> usize {
        self.senders.len()
    }

    fn send(&mut self, to: usize, bytes: &[u8]) -> Result<()> {
        let tx = self.senders[to]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no channel to party {to}")))?;
        tx.send(bytes.to_vec())
            .map_err(|_| Error::Transport(format!("party {to} disconnected")))
    }

    fn recv(&mut self, from: usize) -> Result<Vec<u8>> {
        let rx = self.receivers[from]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no channel from party {from}")))?;
        rx.recv()
            .map_err(|_| Error::Transport(format!("party {from} disconnected")))
    }
}

/// TCP mesh. Party `i` listens on `endpoints[i]`; lower-indexed parties dial
/// higher-indexed ones and identify themselves with a one-byte hello.
pub struct TcpTransport {
    index: usize,
    streams: Vec<Option<TcpStream>>,
}

impl TcpTransport {
    pub fn connect(index: usize, endpoints: &[SocketAddr]) -> Result<Self> {
        let n = endpoints.len();
        let listener = TcpListener::bind(endpoints[index])
            .map_err(|e| Error::Transport(format!("bind {}: {e}", endpoints[index])))?;
        let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

        // dial every higher index, retrying while peers start up
        for (peer, addr) in endpoints.iter().enumerate().skip(index + 1) {
            let stream = retry_connect(*addr)?;
            stream.set_nodelay(true).ok();
            let mut s = stream;
            s.write_all(&[index as u8])
                .map_err(|e| Error::Transport(format!("hello to {peer}: {e}")))?;
            streams[peer] = Some(s);
        }
        // accept one connection per lower index
        for _ in 0..index {
            let (mut s, _) = listener
                .accept()
                .map_err(|e| Error::Transport(format!("accept: {e}")))?;
            s.set_nodelay(true).ok();
            let mut hello = [0u8; 1];
            s.read_exact(&mut hello)
                .map_err(|e| Error::Transport(format!("hello read: {e}")))?;
            let peer = hello[0] as usize;
            if peer >= n || streams[peer].is_some() {
                return Err(Error::Transport(format!("unexpected hello from {peer}")));
            }
            streams[peer] = Some(s);
        }
        Ok(TcpTransport { index, streams })
    }
}

fn retry_connect(addr: SocketAddr) -> Result<TcpStream> {
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if std::time::Instant::now() > deadline {
                    return Err(Error::Transport(format!("connect {addr}: {e}")));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

impl Transport for TcpTransport {
    fn index(&self) -> usize {
        self.index
    }

    fn party_count(&self) -> usize {
        self.streams.len()
    }

    fn send(&mut self, to: usize, bytes: &[u8]) -> Result<()> {
        let s = self.streams[to]
            .as_mut()
            .ok_or_else(|| Error::Transport(format!("no stream to party {to}")))?;
        s.write_all(bytes)
            .map_err(|e| Error::Transport(format!("send to {to}: {e}")))
    }

    fn recv(&mut self, from: usize) -> Result<Vec<u8>> {
        let s = self.streams[from]
            .as_mut()
            .ok_or_else(|| Error::Transport(format!("no stream from party {from}")))?;
        // frame = 4-byte payload length + 13 header bytes + payload
        let mut len_buf = [0u8; 4];
        s.read_exact(&mut len_buf)
            .map_err(|e| Error::Transport(format!("recv from {from}: {e}")))?;
        let payload_len = u32::from_be_bytes(len_buf) as usize;
        let mut rest = vec![0u8; 13 + payload_len];
        s.read_exact(&mut rest)
            .map_err(|e| Error::Transport(format!("recv from {from}: {e}")))?;
        let mut frame = Vec::with_capacity(4 + rest.len());
        frame.extend_from_slice(&len_buf);
        frame.extend_from_slice(&rest);
        Ok(frame)
    }
}
