//! TCP backend.
//!
//! One duplex connection per rank pair. Every message is framed with a
//! 13-byte little-endian header:
//!
//! ```text
//! +---------+--------------+--------------+----------------+
//! | tag: u8 | source: u32  | length: u64  | body (length)  |
//! +---------+--------------+--------------+----------------+
//! ```
//!
//! Connection setup: each rank listens on its own address from the rank
//! table. Rank `i` dials every rank `j < i` and writes its rank as a `u32`
//! handshake; it accepts one connection from every `j > i`. Reader and writer
//! threads per peer move frames between the sockets and in-memory queues, so
//! the transport API itself never blocks on the network.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::{check_dest, check_size, Direction, MessageTag, Probe, Rank, TransferHandle, Transport};
use crate::error::{Error, Result};

pub const TCP_HEADER_LEN: usize = 13;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

/// Parses a rank table: one `rank host:port` entry per line. Blank lines and
/// `#` comments are ignored. Ranks must cover `0..n` exactly once.
pub fn parse_rank_table(text: &str) -> Result<Vec<SocketAddr>> {
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::InvalidArgument(format!("rank table line {}: {what}: {line:?}", lineno + 1))
        };
        let mut fields = line.split_whitespace();
        let rank: Rank = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("expected a rank number"))?;
        let addr = fields.next().ok_or_else(|| bad("missing host:port"))?;
        if fields.next().is_some() {
            return Err(bad("trailing fields"));
        }
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| bad(&e.to_string()))?
            .next()
            .ok_or_else(|| bad("address did not resolve"))?;
        if entries.insert(rank, addr).is_some() {
            return Err(bad("duplicate rank"));
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("rank table is empty".into()));
    }
    for (expected, &rank) in entries.keys().enumerate() {
        if rank != expected {
            return Err(Error::InvalidArgument(format!(
                "rank table is missing rank {expected}"
            )));
        }
    }
    Ok(entries.into_values().collect())
}

pub fn read_rank_table(path: impl AsRef<Path>) -> Result<Vec<SocketAddr>> {
    parse_rank_table(&fs::read_to_string(path)?)
}

#[derive(Default)]
struct Inbox {
    queues: BTreeMap<(Rank, MessageTag), VecDeque<(u64, Vec<u8>)>>,
    arrivals: u64,
    failure: Option<String>,
}

impl Inbox {
    fn push(&mut self, source: Rank, tag: MessageTag, body: Vec<u8>) {
        let seq = self.arrivals;
        self.arrivals += 1;
        self.queues
            .entry((source, tag))
            .or_default()
            .push_back((seq, body));
    }
}

struct Outgoing {
    tag: MessageTag,
    bytes: Bytes,
    done: Arc<AtomicBool>,
}

struct Peer {
    tx: Option<mpsc::Sender<Outgoing>>,
    writer: Option<JoinHandle<()>>,
    stream: TcpStream,
}

pub struct TcpTransport {
    rank: Rank,
    n_ranks: usize,
    peers: Vec<Option<Peer>>,
    inbox: Arc<Mutex<Inbox>>,
    sends: HashMap<u64, Arc<AtomicBool>>,
    recvs: HashMap<u64, Vec<u8>>,
    next_id: u64,
}

impl TcpTransport {
    /// Binds this rank's address from `table` and connects to all peers.
    pub fn connect(rank: Rank, table: &[SocketAddr]) -> Result<TcpTransport> {
        check_dest(rank, table.len())?;
        let listener = TcpListener::bind(table[rank])?;
        TcpTransport::with_listener(rank, listener, table)
    }

    /// Like [`TcpTransport::connect`] with an already bound listener, which
    /// lets tests bind port 0 first and then build the table.
    pub fn with_listener(
        rank: Rank,
        listener: TcpListener,
        table: &[SocketAddr],
    ) -> Result<TcpTransport> {
        let n_ranks = table.len();
        check_dest(rank, n_ranks)?;
        let mut streams: Vec<Option<TcpStream>> = (0..n_ranks).map(|_| None).collect();
        for (peer, addr) in table.iter().enumerate().take(rank) {
            let mut stream = dial(*addr)?;
            stream.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(stream);
        }
        for _ in rank + 1..n_ranks {
            let (mut stream, _) = listener.accept()?;
            let mut hello = [0u8; 4];
            stream.read_exact(&mut hello)?;
            let peer = u32::from_le_bytes(hello) as usize;
            if peer <= rank || peer >= n_ranks || streams[peer].is_some() {
                return Err(Error::Transport(format!(
                    "unexpected handshake from rank {peer}"
                )));
            }
            streams[peer] = Some(stream);
        }

        let inbox = Arc::new(Mutex::new(Inbox::default()));
        let mut peers = Vec::with_capacity(n_ranks);
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else {
                peers.push(None);
                continue;
            };
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            let writer = stream.try_clone()?;
            let inbox_r = Arc::clone(&inbox);
            thread::Builder::new()
                .name(format!("tcp-rx-{rank}<-{peer}"))
                .spawn(move || read_loop(reader, peer, inbox_r))?;
            let (tx, rx) = mpsc::channel::<Outgoing>();
            let inbox_w = Arc::clone(&inbox);
            let writer = thread::Builder::new()
                .name(format!("tcp-tx-{rank}->{peer}"))
                .spawn(move || write_loop(writer, rank, rx, inbox_w))?;
            peers.push(Some(Peer {
                tx: Some(tx),
                writer: Some(writer),
                stream,
            }));
        }
        Ok(TcpTransport {
            rank,
            n_ranks,
            peers,
            inbox,
            sends: HashMap::new(),
            recvs: HashMap::new(),
            next_id: 0,
        })
    }

    fn inbox(&self) -> Result<std::sync::MutexGuard<'_, Inbox>> {
        let inbox = self.inbox.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(err) = &inbox.failure {
            return Err(Error::Transport(err.clone()));
        }
        Ok(inbox)
    }

    fn next_handle(&mut self, direction: Direction) -> TransferHandle {
        let id = self.next_id;
        self.next_id += 1;
        TransferHandle { id, direction }
    }
}

fn dial(addr: SocketAddr) -> Result<TcpStream> {
    let deadline = Instant::now() + CONNECT_TIMEOUT;
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(stream),
            Err(err) if Instant::now() < deadline => {
                log::debug!("connect to {addr} failed ({err}), retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(err) => {
                return Err(Error::Transport(format!("peer {addr} unreachable: {err}")))
            }
        }
    }
}

fn read_loop(stream: TcpStream, peer: Rank, inbox: Arc<Mutex<Inbox>>) {
    let mut reader = BufReader::new(stream);
    loop {
        let mut header = [0u8; TCP_HEADER_LEN];
        match reader.read_exact(&mut header) {
            Ok(()) => {}
            // Orderly close between frames.
            Err(err) if err.kind() == std::io::ErrorKind::UnexpectedEof => return,
            Err(err) => {
                fail(&inbox, format!("read from rank {peer}: {err}"));
                return;
            }
        }
        let parsed = MessageTag::from_u8(header[0]).and_then(|tag| {
            let source = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(header[5..13].try_into().unwrap());
            if source != peer {
                return Err(Error::Transport(format!(
                    "frame claims source {source} on the link to {peer}"
                )));
            }
            Ok((tag, len as usize))
        });
        let (tag, len) = match parsed {
            Ok(v) => v,
            Err(err) => {
                fail(&inbox, err.to_string());
                return;
            }
        };
        let mut body = vec![0u8; len];
        if let Err(err) = reader.read_exact(&mut body) {
            fail(&inbox, format!("read body from rank {peer}: {err}"));
            return;
        }
        inbox
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(peer, tag, body);
    }
}

fn write_loop(stream: TcpStream, me: Rank, rx: mpsc::Receiver<Outgoing>, inbox: Arc<Mutex<Inbox>>) {
    let mut writer = BufWriter::new(stream);
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        batch.extend(rx.try_iter());
        let mut result = Ok(());
        for msg in &batch {
            result = result
                .and_then(|_| writer.write_all(&[msg.tag as u8]))
                .and_then(|_| writer.write_all(&(me as u32).to_le_bytes()))
                .and_then(|_| writer.write_all(&(msg.bytes.len() as u64).to_le_bytes()))
                .and_then(|_| writer.write_all(&msg.bytes));
        }
        if let Err(err) = result.and_then(|_| writer.flush()) {
            fail(&inbox, format!("write: {err}"));
            return;
        }
        for msg in batch {
            msg.done.store(true, Ordering::Release);
        }
    }
}

fn fail(inbox: &Mutex<Inbox>, msg: String) {
    log::error!("tcp transport: {msg}");
    inbox
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .failure
        .get_or_insert(msg);
}

impl Transport for TcpTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    fn isend(&mut self, dest: Rank, tag: MessageTag, bytes: Bytes) -> Result<TransferHandle> {
        check_dest(dest, self.n_ranks)?;
        check_size(bytes.len())?;
        let handle = self.next_handle(Direction::Send);
        let done = Arc::new(AtomicBool::new(false));
        if dest == self.rank {
            self.inbox()?.push(dest, tag, bytes.to_vec());
            done.store(true, Ordering::Release);
        } else {
            let peer = self.peers[dest]
                .as_ref()
                .and_then(|p| p.tx.as_ref())
                .ok_or_else(|| Error::Transport(format!("no link to rank {dest}")))?;
            peer.send(Outgoing {
                tag,
                bytes,
                done: Arc::clone(&done),
            })
            .map_err(|_| Error::Transport(format!("writer for rank {dest} has exited")))?;
        }
        self.sends.insert(handle.id, done);
        Ok(handle)
    }

    fn probe(&mut self, source: Option<Rank>, tag: Option<MessageTag>) -> Result<Option<Probe>> {
        let inbox = self.inbox()?;
        Ok(inbox
            .queues
            .iter()
            .filter(|((s, t), _)| source.is_none_or(|x| x == *s) && tag.is_none_or(|x| x == *t))
            .filter_map(|(&(s, t), q)| q.front().map(|(seq, body)| (*seq, s, t, body.len())))
            .min_by_key(|(seq, ..)| *seq)
            .map(|(_, source, tag, size)| Probe { source, tag, size }))
    }

    fn irecv(&mut self, source: Rank, tag: MessageTag, mut buf: Vec<u8>) -> Result<TransferHandle> {
        let body = {
            let mut inbox = self.inbox()?;
            let queue = inbox
                .queues
                .get_mut(&(source, tag))
                .filter(|q| !q.is_empty())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no pending {tag:?} message from {source}"))
                })?;
            let size = queue.front().map(|(_, b)| b.len()).unwrap_or(0);
            if size != buf.len() {
                return Err(Error::InvalidArgument(format!(
                    "receive buffer of {} bytes for a {size} byte message",
                    buf.len()
                )));
            }
            queue.pop_front().expect("checked non-empty").1
        };
        buf.copy_from_slice(&body);
        let handle = self.next_handle(Direction::Recv);
        self.recvs.insert(handle.id, buf);
        Ok(handle)
    }

    fn test(&mut self, handle: &TransferHandle) -> Result<bool> {
        match handle.direction {
            Direction::Send => {
                let done = self
                    .sends
                    .get(&handle.id)
                    .is_none_or(|d| d.load(Ordering::Acquire));
                if done {
                    self.sends.remove(&handle.id);
                } else {
                    // Surface writer failures instead of spinning forever.
                    drop(self.inbox()?);
                }
                Ok(done)
            }
            Direction::Recv => Ok(self.recvs.contains_key(&handle.id)),
        }
    }

    fn take_recv(&mut self, handle: TransferHandle) -> Result<Vec<u8>> {
        self.recvs
            .remove(&handle.id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown receive {}", handle.id)))
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for peer in self.peers.iter_mut().flatten() {
            // Closing the channel lets the writer flush and exit.
            peer.tx.take();
            if let Some(writer) = peer.writer.take() {
                let _ = writer.join();
            }
            // Half-close only: the reader drains until the peer closes too.
            let _ = peer.stream.shutdown(Shutdown::Write);
        }
    }
}
