//! Synchronous collectives over a ring of workers: presence OR, mean
//! allreduce on one concatenated buffer (reduce-scatter then allgather),
//! scalar mean and broadcast from rank 0.
//!
//! Every chunk of the buffer is reduced exactly once, by a fixed chain of
//! ranks, and then copied around the ring, so all ranks end with the same
//! bits.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum CollectiveError {
    #[error("collective aborted: {0}")]
    Aborted(String),
    #[error("parameter layout differs between ranks")]
    LayoutMismatch,
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
}

impl From<io::Error> for CollectiveError {
    fn from(e: io::Error) -> Self {
        CollectiveError::Aborted(e.to_string())
    }
}

/// Point-to-point links of one ring member: send to rank+1, receive from rank-1.
pub trait RingLink: Send {
    fn send_next(&mut self, payload: &[u8]) -> Result<(), CollectiveError>;
    fn recv_prev(&mut self) -> Result<Vec<u8>, CollectiveError>;
}

/// Group operations. Implementations must be called by every rank in the
/// same order.
pub trait Collective: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    /// Elementwise mean over ranks, in place.
    fn allreduce_mean(&mut self, buf: &mut [f64]) -> Result<(), CollectiveError>;
    /// Bitwise OR over ranks, in place.
    fn allreduce_or(&mut self, bits: &mut [u64]) -> Result<(), CollectiveError>;
    /// Bitwise AND over ranks, in place.
    fn allreduce_and(&mut self, bits: &mut [u64]) -> Result<(), CollectiveError>;
    /// Replaces `buf` on every rank with rank 0's contents.
    fn broadcast(&mut self, buf: &mut Vec<f64>) -> Result<(), CollectiveError>;
    /// Point-to-point messages sent by this rank so far.
    fn messages_sent(&self) -> u64;

    fn allreduce_scalar(&mut self, x: f64) -> Result<f64, CollectiveError> {
        let mut b = [x];
        self.allreduce_mean(&mut b)?;
        Ok(b[0])
    }

    /// Fails unless every rank passed the same hash.
    fn check_layout(&mut self, hash: u64) -> Result<(), CollectiveError> {
        let mut or = [hash];
        let mut and = [hash];
        self.allreduce_or(&mut or)?;
        self.allreduce_and(&mut and)?;
        if or[0] == hash && and[0] == hash {
            Ok(())
        } else {
            Err(CollectiveError::LayoutMismatch)
        }
    }

    /// Presence bitmap of `present` OR-ed over ranks.
    fn allreduce_presence(&mut self, present: &[bool]) -> Result<Vec<bool>, CollectiveError> {
        let mut bits = pack_bits(present);
        self.allreduce_or(&mut bits)?;
        Ok(unpack_bits(&bits, present.len()))
    }
}

pub fn pack_bits(flags: &[bool]) -> Vec<u64> {
    let mut bits = vec![0u64; flags.len().div_ceil(64)];
    for (i, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
        bits[i / 64] |= 1 << (i % 64);
    }
    bits
}

pub fn unpack_bits(bits: &[u64], n: usize) -> Vec<bool> {
    (0..n).map(|i| bits[i / 64] >> (i % 64) & 1 == 1).collect()
}

/// Group of one.
#[derive(Debug, Default)]
pub struct SingleProcess;

impl Collective for SingleProcess {
    fn rank(&self) -> usize {
        0
    }
    fn world_size(&self) -> usize {
        1
    }
    fn allreduce_mean(&mut self, _: &mut [f64]) -> Result<(), CollectiveError> {
        Ok(())
    }
    fn allreduce_or(&mut self, _: &mut [u64]) -> Result<(), CollectiveError> {
        Ok(())
    }
    fn allreduce_and(&mut self, _: &mut [u64]) -> Result<(), CollectiveError> {
        Ok(())
    }
    fn broadcast(&mut self, _: &mut Vec<f64>) -> Result<(), CollectiveError> {
        Ok(())
    }
    fn messages_sent(&self) -> u64 {
        0
    }
}

/// Ring collective over any [`RingLink`].
pub struct Ring<L> {
    rank: usize,
    world: usize,
    link: L,
    sent: u64,
}

fn chunk_bounds(len: usize, world: usize, c: usize) -> (usize, usize) {
    let base = len / world;
    let extra = len % world;
    let start = c * base + c.min(extra);
    (start, start + base + usize::from(c < extra))
}

fn encode(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn decode(bytes: &[u8], expect: usize) -> Result<Vec<u64>, CollectiveError> {
    if bytes.len() != expect * 8 {
        return Err(CollectiveError::Aborted(format!(
            "peer sent {} bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl<L: RingLink> Ring<L> {
    pub fn new(rank: usize, world: usize, link: L) -> Self {
        assert!(rank < world, "rank {rank} outside world of {world}");
        Self {
            rank,
            world,
            link,
            sent: 0,
        }
    }

    fn send(&mut self, words: &[u64]) -> Result<(), CollectiveError> {
        self.sent += 1;
        self.link.send_next(&encode(words))
    }

    /// Reduce-scatter then allgather over u64 words. `finish` runs once on
    /// each fully reduced chunk before it is shared.
    fn ring_reduce(
        &mut self,
        buf: &mut [u64],
        op: impl Fn(u64, u64) -> u64,
        finish: impl Fn(&mut [u64]),
    ) -> Result<(), CollectiveError> {
        let n = self.world;
        if n == 1 {
            finish(buf);
            return Ok(());
        }
        let r = self.rank;
        // Step s: send chunk (r - s), receive chunk (r - s - 1) and fold it in.
        for s in 0..n - 1 {
            let (a, b) = chunk_bounds(buf.len(), n, (r + n - s) % n);
            self.send(&buf[a..b])?;
            let (a, b) = chunk_bounds(buf.len(), n, (r + 2 * n - s - 1) % n);
            let incoming = decode(&self.link.recv_prev()?, b - a)?;
            for (x, y) in buf[a..b].iter_mut().zip(incoming) {
                // Incoming partial sums came from earlier ranks in the chain.
                *x = op(y, *x);
            }
        }
        // This rank now owns the complete chunk r + 1.
        let (a, b) = chunk_bounds(buf.len(), n, (r + 1) % n);
        finish(&mut buf[a..b]);
        for s in 0..n - 1 {
            let (a, b) = chunk_bounds(buf.len(), n, (r + 1 + n - s) % n);
            self.send(&buf[a..b])?;
            let (a, b) = chunk_bounds(buf.len(), n, (r + n - s) % n);
            let incoming = decode(&self.link.recv_prev()?, b - a)?;
            buf[a..b].copy_from_slice(&incoming);
        }
        Ok(())
    }
}

impl<L: RingLink> Collective for Ring<L> {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn allreduce_mean(&mut self, buf: &mut [f64]) -> Result<(), CollectiveError> {
        let mut words: Vec<u64> = buf.iter().map(|x| x.to_bits()).collect();
        let n = self.world as f64;
        self.ring_reduce(
            &mut words,
            |a, b| (f64::from_bits(a) + f64::from_bits(b)).to_bits(),
            |chunk| {
                chunk
                    .iter_mut()
                    .for_each(|w| *w = (f64::from_bits(*w) / n).to_bits())
            },
        )?;
        buf.iter_mut()
            .zip(words)
            .for_each(|(x, w)| *x = f64::from_bits(w));
        Ok(())
    }

    fn allreduce_or(&mut self, bits: &mut [u64]) -> Result<(), CollectiveError> {
        self.ring_reduce(bits, |a, b| a | b, |_| {})
    }

    fn allreduce_and(&mut self, bits: &mut [u64]) -> Result<(), CollectiveError> {
        self.ring_reduce(bits, |a, b| a & b, |_| {})
    }

    fn broadcast(&mut self, buf: &mut Vec<f64>) -> Result<(), CollectiveError> {
        if self.world == 1 {
            return Ok(());
        }
        if self.rank != 0 {
            let bytes = self.link.recv_prev()?;
            let words = decode(&bytes, bytes.len() / 8)?;
            *buf = words.into_iter().map(f64::from_bits).collect();
        }
        if self.rank + 1 < self.world {
            let words: Vec<u64> = buf.iter().map(|x| x.to_bits()).collect();
            self.send(&words)?;
        }
        Ok(())
    }

    fn messages_sent(&self) -> u64 {
        self.sent
    }
}

/// In-process link over channels, for worker threads.
pub struct ChannelLink {
    next: Sender<Vec<u8>>,
    prev: Receiver<Vec<u8>>,
}

impl RingLink for ChannelLink {
    fn send_next(&mut self, payload: &[u8]) -> Result<(), CollectiveError> {
        self.next
            .send(payload.to_vec())
            .map_err(|_| CollectiveError::Aborted("next rank hung up".into()))
    }

    fn recv_prev(&mut self) -> Result<Vec<u8>, CollectiveError> {
        self.prev
            .recv()
            .map_err(|_| CollectiveError::Aborted("previous rank hung up".into()))
    }
}

/// `world` connected ring members, one per worker thread.
pub fn channel_group(world: usize) -> Vec<Ring<ChannelLink>> {
    assert!(world >= 1);
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..world).map(|_| channel()).unzip();
    // Rank r receives on channel r; rank r-1 holds its sender.
    let mut senders: Vec<Option<Sender<Vec<u8>>>> = senders.into_iter().map(Some).collect();
    receivers
        .into_iter()
        .enumerate()
        .map(|(r, prev)| {
            let next = senders[(r + 1) % world]
                .take()
                .expect("each sender used once");
            Ring::new(r, world, ChannelLink { next, prev })
        })
        .collect()
}

/// TCP link: length-prefixed frames. Writes go through a sender thread so
/// that every rank can send a large chunk before reading its own.
pub struct TcpLink {
    next: Option<Sender<Vec<u8>>>,
    writer: Option<std::thread::JoinHandle<io::Result<()>>>,
    prev: TcpStream,
}

impl TcpLink {
    fn new(mut next: TcpStream, prev: TcpStream) -> Self {
        let (tx, rx) = channel::<Vec<u8>>();
        let writer = std::thread::spawn(move || {
            for payload in rx {
                next.write_all(&(payload.len() as u64).to_le_bytes())?;
                next.write_all(&payload)?;
            }
            Ok(())
        });
        Self {
            next: Some(tx),
            writer: Some(writer),
            prev,
        }
    }

    fn writer_error(&mut self) -> CollectiveError {
        self.next = None;
        match self.writer.take().map(|h| h.join()) {
            Some(Ok(Err(e))) => CollectiveError::Aborted(e.to_string()),
            _ => CollectiveError::Aborted("connection to next rank closed".into()),
        }
    }
}

impl RingLink for TcpLink {
    fn send_next(&mut self, payload: &[u8]) -> Result<(), CollectiveError> {
        match &self.next {
            Some(tx) if tx.send(payload.to_vec()).is_ok() => Ok(()),
            _ => Err(self.writer_error()),
        }
    }

    fn recv_prev(&mut self) -> Result<Vec<u8>, CollectiveError> {
        let mut len = [0u8; 8];
        self.prev.read_exact(&mut len)?;
        let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
        self.prev.read_exact(&mut buf)?;
        Ok(buf)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        self.next = None;
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
    }
}

const RENDEZVOUS_MAGIC: &[u8; 4] = b"SRNG";

fn connect_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, CollectiveError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(CollectiveError::Rendezvous(format!(
                    "cannot reach {addr}: {e}"
                )))
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn write_addr(s: &mut TcpStream, a: &SocketAddr) -> io::Result<()> {
    let text = a.to_string();
    s.write_all(&(text.len() as u16).to_le_bytes())?;
    s.write_all(text.as_bytes())
}

fn read_addr(s: &mut TcpStream) -> Result<SocketAddr, CollectiveError> {
    let mut len = [0u8; 2];
    s.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    s.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CollectiveError::Rendezvous("malformed peer address".into()))
}

/// Joins a TCP ring. Rank 0 listens on `rendezvous`; other ranks connect to
/// it, report their ring listener, and receive the full address table.
pub fn tcp_group(
    rank: usize,
    world: usize,
    rendezvous: &str,
    timeout: Duration,
) -> Result<Ring<TcpLink>, CollectiveError> {
    if rank >= world {
        return Err(CollectiveError::Rendezvous(format!(
            "rank {rank} outside world of {world}"
        )));
    }
    let deadline = Instant::now() + timeout;
    let rv: SocketAddr = rendezvous
        .to_socket_addrs()
        .map_err(|e| CollectiveError::Rendezvous(format!("{rendezvous}: {e}")))?
        .next()
        .ok_or_else(|| CollectiveError::Rendezvous(format!("{rendezvous}: no address")))?;
    let table: Vec<SocketAddr>;
    let ring_listener;
    if rank == 0 {
        let listener = TcpListener::bind(rv)
            .map_err(|e| CollectiveError::Rendezvous(format!("bind {rv}: {e}")))?;
        ring_listener = TcpListener::bind((rv.ip(), 0))?;
        let mut slots: Vec<Option<SocketAddr>> = vec![None; world];
        slots[0] = Some(ring_listener.local_addr()?);
        let mut peers = Vec::new();
        while peers.len() + 1 < world {
            let (mut s, _) = listener.accept()?;
            let mut hdr = [0u8; 12];
            s.read_exact(&mut hdr)?;
            let r = u32::from_le_bytes(hdr[4..8].try_into().expect("4 bytes")) as usize;
            let w = u32::from_le_bytes(hdr[8..12].try_into().expect("4 bytes")) as usize;
            if &hdr[..4] != RENDEZVOUS_MAGIC
                || w != world
                || r == 0
                || r >= world
                || slots[r].is_some()
            {
                return Err(CollectiveError::Rendezvous(format!(
                    "bad join request (rank {r}, world {w})"
                )));
            }
            slots[r] = Some(read_addr(&mut s)?);
            peers.push(s);
        }
        table = slots
            .into_iter()
            .map(|a| a.expect("all slots filled"))
            .collect();
        for s in &mut peers {
            for a in &table {
                write_addr(s, a)?;
            }
        }
    } else {
        let mut s = connect_retry(rv, deadline)?;
        ring_listener = TcpListener::bind((s.local_addr()?.ip(), 0))?;
        let mut hdr = RENDEZVOUS_MAGIC.to_vec();
        hdr.extend((rank as u32).to_le_bytes());
        hdr.extend((world as u32).to_le_bytes());
        s.write_all(&hdr)?;
        write_addr(&mut s, &ring_listener.local_addr()?)?;
        table = (0..world)
            .map(|_| read_addr(&mut s))
            .collect::<Result<_, _>>()?;
    }
    let next = connect_retry(table[(rank + 1) % world], deadline)?;
    next.set_nodelay(true)?;
    let (prev, _) = ring_listener.accept()?;
    prev.set_nodelay(true)?;
    Ok(Ring::new(rank, world, TcpLink::new(next, prev)))
}
