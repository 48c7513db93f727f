//! Active messages and the communicator that moves them.
//!
//! An active message pairs a handler with a payload type. Handlers are
//! registered in the same order on every rank, which gives each one a dense
//! id shared by all ranks; a frame carries only that id and the encoded
//! payload. Sending is thread-safe and serializes immediately, so callers may
//! reuse their buffers as soon as `send` returns.
//!
//! The communicator keeps three stages for every message: serialized frames
//! ready to send, sends in flight (freed when the transport reports them
//! done), and receives in flight (dispatched when complete). One thread, the
//! communication thread, calls [`Communicator::progress`] repeatedly; each
//! pass drains the ready queue, reaps finished sends, probes and posts
//! receives, and runs the handlers of finished receives. It then takes one
//! step of the completion protocol.
//!
//! Handlers run on the communication thread, one at a time. They should only
//! store data, fulfill promises, or send further messages: a handler that
//! blocks also stalls completion detection for the whole job.
//!
//! Large active messages carry one bulk buffer besides their arguments. The
//! arguments go in a header frame; the buffer goes untouched as a separate
//! body message. The receiver allocates the destination from the header
//! (`alloc`), lands the body there, then runs `process`. The sender runs
//! `complete` once the transport no longer needs the buffer. Header and
//! body pair up by a per-`(source, dest)` sequence number under the
//! transport's FIFO guarantee.

use std::any::Any;
use std::collections::VecDeque;
use std::fmt;
use std::marker::PhantomData;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};
use std::thread;
use std::time::Duration;

use bytes::Bytes;

use crate::codec::{self, Payload, Reader};
use crate::completion::{
    is_protocol_id, CompletionCounters, Counts, ProtocolMsg, Rank0State, WorkerRankState,
    PROTOCOL_ID_BASE,
};
use crate::error::{Error, Result};
use crate::transport::{check_dest, MessageTag, Rank, TransferHandle, Transport};

/// Dense active-message id, identical on every rank.
pub type AmId = u32;

type RegularHandler = Arc<dyn Fn(&mut Reader<'_>) -> Result<()> + Send + Sync>;
type HeaderDecoder = Arc<dyn Fn(&mut Reader<'_>) -> Result<Box<dyn Any + Send>> + Send + Sync>;
type Allocator = Arc<dyn Fn(&(dyn Any + Send), usize) -> Vec<u8> + Send + Sync>;
type Processor = Arc<dyn Fn(Box<dyn Any + Send>, Vec<u8>) + Send + Sync>;
type OnComplete = Box<dyn FnOnce() + Send>;
type IdleProbe = Box<dyn Fn() -> bool + Send + Sync>;
type Observer = Arc<dyn Fn(CounterEvent) + Send + Sync>;

#[derive(Clone)]
enum Registered {
    Regular {
        sig_hash: u64,
        handler: RegularHandler,
    },
    Large {
        sig_hash: u64,
        decode: HeaderDecoder,
        alloc: Allocator,
        process: Processor,
    },
}

impl Registered {
    fn sig_hash(&self) -> u64 {
        match self {
            Registered::Regular { sig_hash, .. } | Registered::Large { sig_hash, .. } => *sig_hash,
        }
    }
}

/// A user-message counter transition, reported at the instant it happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CounterEvent {
    Queued { dest: Rank, am_id: AmId },
    Processed { source: Rank, am_id: AmId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One protocol message, as seen by one rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub rank: Rank,
    pub direction: Direction,
    pub peer: Rank,
    pub msg: ProtocolMsg,
    /// Transport event stamp when the backend has one.
    pub stamp: Option<u64>,
    /// Local counters when the event happened.
    pub counts: Counts,
}

impl fmt::Display for ProtocolEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (dir, arrow) = match self.direction {
            Direction::Sent => ("send", "->"),
            Direction::Received => ("recv", "<-"),
        };
        write!(
            f,
            "{dir} rank {} {arrow} {} {:?} local=({},{})",
            self.rank, self.peer, self.msg, self.counts.queued, self.counts.processed
        )?;
        if let Some(stamp) = self.stamp {
            write!(f, " stamp={stamp}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct CommConfig {
    /// Prefix every user frame with a hash of its signature and check it on
    /// receipt, catching ranks that registered handlers in different orders.
    pub signature_check: bool,
    /// Keep every protocol message in [`Communicator::protocol_log`].
    pub protocol_trace: bool,
}

struct Outgoing {
    dest: Rank,
    tag: MessageTag,
    bytes: Bytes,
    on_complete: Option<OnComplete>,
}

struct Outbox {
    ready: VecDeque<Outgoing>,
    large_seq: Vec<u64>,
}

struct AwaitingBody {
    am_id: AmId,
    args: Box<dyn Any + Send>,
    buffer: Vec<u8>,
    process: Processor,
}

enum PendingRecv {
    Regular { source: Rank },
    LargeHeader { source: Rank },
    LargeBody { source: Rank, body: AwaitingBody },
}

struct Engine {
    transport: Box<dyn Transport>,
    inflight_sends: Vec<(TransferHandle, Option<OnComplete>)>,
    inflight_recvs: VecDeque<(TransferHandle, PendingRecv)>,
    awaiting_body: Vec<VecDeque<AwaitingBody>>,
    expected_seq: Vec<u64>,
    worker: WorkerRankState,
    rank0: Option<Rank0State>,
    passes: u64,
}

/// Factory for active messages and the engine that sends, receives and runs
/// them. Shared as `Arc<Communicator>`.
pub struct Communicator {
    rank: Rank,
    n_ranks: usize,
    config: CommConfig,
    registry: RwLock<Vec<Registered>>,
    frozen: AtomicBool,
    outbox: Mutex<Outbox>,
    counters: CompletionCounters,
    engine: Mutex<Engine>,
    idle_probe: RwLock<Option<IdleProbe>>,
    observer: RwLock<Option<Observer>>,
    completion_enabled: AtomicBool,
    shutdown: AtomicBool,
    protocol_log: Mutex<Vec<ProtocolEvent>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".to_string())
}

impl Communicator {
    pub fn new(transport: Box<dyn Transport>) -> Arc<Communicator> {
        Communicator::with_config(transport, CommConfig::default())
    }

    pub fn with_config(transport: Box<dyn Transport>, config: CommConfig) -> Arc<Communicator> {
        let rank = transport.rank();
        let n_ranks = transport.n_ranks();
        Arc::new(Communicator {
            rank,
            n_ranks,
            config,
            registry: RwLock::new(Vec::new()),
            frozen: AtomicBool::new(false),
            outbox: Mutex::new(Outbox {
                ready: VecDeque::new(),
                large_seq: vec![0; n_ranks],
            }),
            counters: CompletionCounters::default(),
            engine: Mutex::new(Engine {
                transport,
                inflight_sends: Vec::new(),
                inflight_recvs: VecDeque::new(),
                awaiting_body: (0..n_ranks).map(|_| VecDeque::new()).collect(),
                expected_seq: vec![0; n_ranks],
                worker: WorkerRankState::new(),
                rank0: (rank == 0).then(|| Rank0State::new(n_ranks)),
                passes: 0,
            }),
            idle_probe: RwLock::new(None),
            observer: RwLock::new(None),
            completion_enabled: AtomicBool::new(false),
            shutdown: AtomicBool::new(false),
            protocol_log: Mutex::new(Vec::new()),
        })
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    /// Snapshot of this rank's user-message counters.
    pub fn counts(&self) -> Counts {
        self.counters.snapshot()
    }

    /// Number of progress passes run so far.
    pub fn passes(&self) -> u64 {
        lock(&self.engine).passes
    }

    fn register(&self, entry: Registered) -> Result<AmId> {
        if self.frozen.load(Ordering::Acquire) {
            return Err(Error::Protocol(
                "active messages must be registered before the first send".into(),
            ));
        }
        let mut registry = self.registry.write().unwrap_or_else(|e| e.into_inner());
        let id = registry.len() as AmId;
        if id >= PROTOCOL_ID_BASE {
            return Err(Error::Protocol("active message id space exhausted".into()));
        }
        registry.push(entry);
        Ok(id)
    }

    /// Registers `handler` under the next dense id. Every rank must register
    /// the same handlers in the same order, before any send.
    pub fn make_active_msg<T, F>(self: &Arc<Self>, handler: F) -> Result<ActiveMsg<T>>
    where
        T: Payload,
        F: Fn(T) + Send + Sync + 'static,
    {
        let sig_hash = codec::signature_hash(&T::signature());
        let handler: RegularHandler = Arc::new(move |reader: &mut Reader<'_>| {
            handler(T::decode(reader)?);
            Ok(())
        });
        let id = self.register(Registered::Regular { sig_hash, handler })?;
        Ok(ActiveMsg {
            id,
            sig_hash,
            comm: Arc::downgrade(self),
            _payload: PhantomData,
        })
    }

    /// Registers a large active message.
    ///
    /// - `alloc(args, len)` runs on the receiver when the header lands and
    ///   returns the `len`-byte buffer the body will be received into;
    /// - `process(args, buffer)` runs on the receiver once the body is in;
    /// - `complete(args)` runs on the sender once its body buffer is released.
    pub fn make_large_active_msg<T, A, P, C>(
        self: &Arc<Self>,
        alloc: A,
        process: P,
        complete: C,
    ) -> Result<LargeActiveMsg<T>>
    where
        T: Payload,
        A: Fn(&T, usize) -> Vec<u8> + Send + Sync + 'static,
        P: Fn(T, Vec<u8>) + Send + Sync + 'static,
        C: Fn(T) + Send + Sync + 'static,
    {
        let sig_hash = codec::signature_hash(&T::signature());
        let decode: HeaderDecoder = Arc::new(|reader: &mut Reader<'_>| {
            Ok(Box::new(T::decode(reader)?) as Box<dyn Any + Send>)
        });
        let alloc: Allocator = Arc::new(move |args: &(dyn Any + Send), len| {
            alloc(args.downcast_ref::<T>().expect("header type"), len)
        });
        let process: Processor = Arc::new(move |args: Box<dyn Any + Send>, buffer| {
            process(*args.downcast::<T>().expect("header type"), buffer)
        });
        let id = self.register(Registered::Large {
            sig_hash,
            decode,
            alloc,
            process,
        })?;
        Ok(LargeActiveMsg {
            id,
            sig_hash,
            comm: Arc::downgrade(self),
            complete: Arc::new(complete),
        })
    }

    fn enqueue(&self, items: impl IntoIterator<Item = Outgoing>, user: Option<AmId>) -> Result<()> {
        self.frozen.store(true, Ordering::Release);
        if user.is_some() && self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Protocol("send after shutdown".into()));
        }
        let observer = self.observer.read().unwrap_or_else(|e| e.into_inner()).clone();
        let mut outbox = lock(&self.outbox);
        let mut dest = None;
        for item in items {
            dest = Some(item.dest);
            outbox.ready.push_back(item);
        }
        // Counting under the outbox lock makes queue order equal send order.
        if let (Some(am_id), Some(dest)) = (user, dest) {
            self.counters.on_user_queued();
            if let Some(observer) = observer {
                observer(CounterEvent::Queued { dest, am_id });
            }
        }
        Ok(())
    }

    fn frame_prefix(&self, id: AmId, sig_hash: u64) -> Vec<u8> {
        let mut frame = Vec::with_capacity(32);
        frame.extend_from_slice(&id.to_le_bytes());
        if self.config.signature_check {
            frame.extend_from_slice(&sig_hash.to_le_bytes());
        }
        frame
    }

    /// Installs the function the completion protocol uses to ask whether the
    /// local workers are idle. Without one, the rank always counts as idle.
    pub fn set_idle_probe(&self, probe: IdleProbe) {
        *self.idle_probe.write().unwrap_or_else(|e| e.into_inner()) = Some(probe);
    }

    /// Installs a callback invoked at each user-message counter increment.
    pub fn set_counter_observer(&self, observer: impl Fn(CounterEvent) + Send + Sync + 'static) {
        *self.observer.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(observer));
    }

    /// Starts the completion protocol on this rank. Before this, messages
    /// flow but the rank never reports itself idle; the pool calls it from
    /// `join`, once the caller has stopped inserting work from outside.
    pub fn enable_completion(&self) {
        self.completion_enabled.store(true, Ordering::Release);
    }

    /// SHUTDOWN has been received.
    pub fn is_shutdown(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    /// Rank 0 only: SHUTDOWN has been broadcast.
    pub fn shutdown_sent(&self) -> bool {
        lock(&self.engine)
            .rank0
            .as_ref()
            .is_some_and(Rank0State::shutdown_sent)
    }

    /// Shut down and every outgoing frame handed off and released.
    pub fn is_finished(&self) -> bool {
        self.is_shutdown()
            && lock(&self.outbox).ready.is_empty()
            && lock(&self.engine).inflight_sends.is_empty()
    }

    /// User frames queued by `send` and not yet handed to the transport.
    pub fn ready_frames(&self) -> usize {
        lock(&self.outbox).ready.len()
    }

    pub fn protocol_log(&self) -> Vec<ProtocolEvent> {
        lock(&self.protocol_log).clone()
    }

    /// Drops all registered handlers. Called once the job is over; handlers
    /// usually capture taskflows that keep the pool alive.
    pub fn release_handlers(&self) {
        self.registry
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .clear();
    }

    fn handler(&self, id: AmId) -> Result<Registered> {
        self.registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id as usize)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("unknown active message id {id}")))
    }

    fn check_signature(&self, reader: &mut Reader<'_>, id: AmId, entry: &Registered) -> Result<()> {
        if self.config.signature_check {
            let hash: u64 = reader.read()?;
            if hash != entry.sig_hash() {
                return Err(Error::Protocol(format!(
                    "signature mismatch for active message {id}: were handlers registered in the same order on every rank?"
                )));
            }
        }
        Ok(())
    }

    fn note_processed(&self, source: Rank, am_id: AmId) {
        self.counters.on_user_processed();
        let observer = self.observer.read().unwrap_or_else(|e| e.into_inner()).clone();
        if let Some(observer) = observer {
            observer(CounterEvent::Processed { source, am_id });
        }
    }

    fn log_protocol(&self, engine: &Engine, direction: Direction, peer: Rank, msg: ProtocolMsg) {
        let event = ProtocolEvent {
            rank: self.rank,
            direction,
            peer,
            msg,
            stamp: engine.transport.event_stamp(),
            counts: self.counters.snapshot(),
        };
        log::trace!("{event}");
        if self.config.protocol_trace {
            lock(&self.protocol_log).push(event);
        }
    }

    fn send_protocol(&self, engine: &mut Engine, dest: Rank, msg: ProtocolMsg) -> Result<()> {
        self.log_protocol(engine, Direction::Sent, dest, msg);
        let handle = engine
            .transport
            .isend(dest, MessageTag::Regular, Bytes::from(msg.encode()))?;
        engine.inflight_sends.push((handle, None));
        Ok(())
    }

    fn on_protocol(&self, engine: &mut Engine, source: Rank, frame: &[u8]) -> Result<()> {
        let msg = ProtocolMsg::decode(frame)?;
        self.log_protocol(engine, Direction::Received, source, msg);
        match msg {
            ProtocolMsg::Count { rank, counts } => {
                let rank0 = engine
                    .rank0
                    .as_mut()
                    .ok_or_else(|| Error::Protocol(format!("COUNT sent to rank {}", self.rank)))?;
                if rank >= self.n_ranks {
                    return Err(Error::Protocol(format!("COUNT from unknown rank {rank}")));
                }
                rank0.on_count(rank, counts);
            }
            ProtocolMsg::Request { counts, round } => engine.worker.on_request(counts, round),
            ProtocolMsg::Confirmation { round } => {
                if let Some(rank0) = engine.rank0.as_mut() {
                    rank0.on_confirmation(source, round);
                }
            }
            ProtocolMsg::Shutdown => {
                engine.worker.on_shutdown();
                self.shutdown.store(true, Ordering::Release);
            }
        }
        Ok(())
    }

    fn dispatch_regular(&self, engine: &mut Engine, source: Rank, frame: &[u8]) -> Result<()> {
        let mut reader = Reader::new(frame);
        let id: AmId = reader.read()?;
        if is_protocol_id(id) {
            return self.on_protocol(engine, source, frame);
        }
        let entry = self.handler(id)?;
        self.check_signature(&mut reader, id, &entry)?;
        let Registered::Regular { handler, .. } = entry else {
            return Err(Error::Protocol(format!(
                "large active message {id} arrived as a regular frame"
            )));
        };
        panic::catch_unwind(AssertUnwindSafe(|| -> Result<()> {
            handler(&mut reader)?;
            reader.finish()
        }))
        .map_err(|p| Error::Protocol(format!("handler {id} panicked: {}", panic_message(p))))??;
        self.note_processed(source, id);
        Ok(())
    }

    fn dispatch_header(&self, engine: &mut Engine, source: Rank, frame: &[u8]) -> Result<()> {
        let mut reader = Reader::new(frame);
        let id: AmId = reader.read()?;
        let entry = self.handler(id)?;
        self.check_signature(&mut reader, id, &entry)?;
        let Registered::Large {
            decode,
            alloc,
            process,
            ..
        } = entry
        else {
            return Err(Error::Protocol(format!(
                "regular active message {id} arrived as a large header"
            )));
        };
        let seq: u64 = reader.read()?;
        let len: u64 = reader.read()?;
        let expected = &mut engine.expected_seq[source];
        if seq != *expected {
            return Err(Error::Protocol(format!(
                "large message from {source}: header {seq}, expected {expected}"
            )));
        }
        *expected += 1;
        let args = decode(&mut reader)?;
        reader.finish()?;
        let len = len as usize;
        let buffer = panic::catch_unwind(AssertUnwindSafe(|| alloc(args.as_ref(), len)))
            .map_err(|p| Error::Protocol(format!("alloc {id} panicked: {}", panic_message(p))))?;
        if buffer.len() != len {
            return Err(Error::Protocol(format!(
                "alloc for active message {id} returned {} bytes, body has {len}",
                buffer.len()
            )));
        }
        engine.awaiting_body[source].push_back(AwaitingBody {
            am_id: id,
            args,
            buffer,
            process,
        });
        Ok(())
    }

    /// One pass of the progress loop. Returns whether anything happened.
    ///
    /// Must be called from a single thread, and never from inside a handler.
    pub fn progress(&self) -> Result<bool> {
        let mut guard = lock(&self.engine);
        let engine = &mut *guard;
        engine.passes += 1;
        engine.transport.tick();
        let mut active = false;

        // Ready frames to the transport.
        let ready: Vec<Outgoing> = lock(&self.outbox).ready.drain(..).collect();
        for out in ready {
            active = true;
            let handle = engine.transport.isend(out.dest, out.tag, out.bytes)?;
            engine.inflight_sends.push((handle, out.on_complete));
        }

        // Finished sends: free frames, release large bodies.
        let mut i = 0;
        while i < engine.inflight_sends.len() {
            if engine.transport.test(&engine.inflight_sends[i].0)? {
                active = true;
                let (_, on_complete) = engine.inflight_sends.swap_remove(i);
                if let Some(on_complete) = on_complete {
                    panic::catch_unwind(AssertUnwindSafe(on_complete)).map_err(|p| {
                        Error::Protocol(format!("complete callback panicked: {}", panic_message(p)))
                    })?;
                }
            } else {
                i += 1;
            }
        }

        // Probe and post receives while anything is pending.
        loop {
            let probe = match engine.transport.probe(None, Some(MessageTag::Regular))? {
                Some(p) => Some(p),
                None => engine.transport.probe(None, Some(MessageTag::LargeHeader))?,
            };
            let Some(probe) = probe else { break };
            active = true;
            let handle =
                engine
                    .transport
                    .irecv(probe.source, probe.tag, vec![0; probe.size])?;
            let pending = match probe.tag {
                MessageTag::Regular => PendingRecv::Regular {
                    source: probe.source,
                },
                _ => PendingRecv::LargeHeader {
                    source: probe.source,
                },
            };
            engine.inflight_recvs.push_back((handle, pending));
        }
        for source in 0..self.n_ranks {
            while !engine.awaiting_body[source].is_empty() {
                let Some(probe) = engine
                    .transport
                    .probe(Some(source), Some(MessageTag::LargeBody))?
                else {
                    break;
                };
                active = true;
                let body = engine.awaiting_body[source].pop_front().expect("non-empty");
                if body.buffer.len() != probe.size {
                    return Err(Error::Protocol(format!(
                        "large body from {source} has {} bytes, header announced {}",
                        probe.size,
                        body.buffer.len()
                    )));
                }
                let AwaitingBody {
                    am_id,
                    args,
                    buffer,
                    process,
                } = body;
                let handle = engine
                    .transport
                    .irecv(source, MessageTag::LargeBody, buffer)?;
                engine.inflight_recvs.push_back((
                    handle,
                    PendingRecv::LargeBody {
                        source,
                        body: AwaitingBody {
                            am_id,
                            args,
                            buffer: Vec::new(),
                            process,
                        },
                    },
                ));
            }
        }

        // Finished receives, in posting order.
        while let Some((handle, _)) = engine.inflight_recvs.front() {
            if !engine.transport.test(handle)? {
                break;
            }
            active = true;
            let (handle, pending) = engine.inflight_recvs.pop_front().expect("non-empty");
            let data = engine.transport.take_recv(handle)?;
            match pending {
                PendingRecv::Regular { source } => self.dispatch_regular(engine, source, &data)?,
                PendingRecv::LargeHeader { source } => {
                    self.dispatch_header(engine, source, &data)?
                }
                PendingRecv::LargeBody { source, body } => {
                    let AwaitingBody {
                        am_id,
                        args,
                        process,
                        ..
                    } = body;
                    panic::catch_unwind(AssertUnwindSafe(|| process(args, data))).map_err(
                        |p| Error::Protocol(format!("process {am_id} panicked: {}", panic_message(p))),
                    )?;
                    self.note_processed(source, am_id);
                }
            }
        }

        if self.completion_enabled.load(Ordering::Acquire) && !engine.worker.is_shutdown() {
            active |= self.completion_step(engine)?;
        }
        Ok(active)
    }

    fn completion_step(&self, engine: &mut Engine) -> Result<bool> {
        let idle = self
            .idle_probe
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .is_none_or(|probe| probe());
        // Read after the idle check: an idle rank cannot change its counters
        // except through this thread.
        let counts = self.counters.snapshot();
        let mut out: Vec<(Rank, ProtocolMsg)> = engine
            .worker
            .step(self.rank, idle, counts)
            .into_iter()
            .map(|msg| (0, msg))
            .collect();
        if let Some(rank0) = engine.rank0.as_mut() {
            out.extend(rank0.step());
        }
        let active = !out.is_empty();
        for (dest, msg) in out {
            self.send_protocol(engine, dest, msg)?;
        }
        Ok(active)
    }

    /// Runs the progress loop on the calling thread until SHUTDOWN has been
    /// received and every outgoing frame has been flushed.
    pub fn run_until_shutdown(&self) -> Result<()> {
        let mut idle_passes = 0u32;
        while !self.is_finished() {
            if self.progress()? {
                idle_passes = 0;
            } else {
                idle_passes = idle_passes.saturating_add(1);
                if idle_passes < 64 {
                    thread::yield_now();
                } else {
                    let micros = (idle_passes as u64 - 63).min(10) * 20;
                    thread::sleep(Duration::from_micros(micros));
                }
            }
        }
        log::debug!(
            "rank {} done after {} passes, counts {:?}",
            self.rank,
            self.passes(),
            self.counts()
        );
        Ok(())
    }
}

/// Sender handle for a registered active message with payload `T`.
pub struct ActiveMsg<T> {
    id: AmId,
    sig_hash: u64,
    comm: Weak<Communicator>,
    _payload: PhantomData<fn(T)>,
}

impl<T> Clone for ActiveMsg<T> {
    fn clone(&self) -> Self {
        ActiveMsg {
            id: self.id,
            sig_hash: self.sig_hash,
            comm: self.comm.clone(),
            _payload: PhantomData,
        }
    }
}

fn upgrade(comm: &Weak<Communicator>) -> Result<Arc<Communicator>> {
    comm.upgrade()
        .ok_or_else(|| Error::Protocol("communicator has been dropped".into()))
}

impl<T: Payload> ActiveMsg<T> {
    pub fn id(&self) -> AmId {
        self.id
    }

    /// Serializes `payload` and queues it for `dest`. Thread-safe; the
    /// payload may be modified as soon as this returns.
    pub fn send(&self, dest: Rank, payload: &T) -> Result<()> {
        let comm = upgrade(&self.comm)?;
        check_dest(dest, comm.n_ranks)?;
        let mut frame = comm.frame_prefix(self.id, self.sig_hash);
        payload.encode(&mut frame);
        crate::transport::check_size(frame.len())?;
        comm.enqueue(
            [Outgoing {
                dest,
                tag: MessageTag::Regular,
                bytes: Bytes::from(frame),
                on_complete: None,
            }],
            Some(self.id),
        )
    }
}

/// Sender handle for a registered large active message with header `T`.
pub struct LargeActiveMsg<T> {
    id: AmId,
    sig_hash: u64,
    comm: Weak<Communicator>,
    complete: Arc<dyn Fn(T) + Send + Sync>,
}

impl<T> Clone for LargeActiveMsg<T> {
    fn clone(&self) -> Self {
        LargeActiveMsg {
            id: self.id,
            sig_hash: self.sig_hash,
            comm: self.comm.clone(),
            complete: Arc::clone(&self.complete),
        }
    }
}

impl<T: Payload> LargeActiveMsg<T> {
    pub fn id(&self) -> AmId {
        self.id
    }

    /// Sends `args` in a header frame and `body` as-is behind it. `body` is
    /// shared with the transport, not copied; `complete(args)` runs on this
    /// rank once the transport has released it.
    pub fn send(&self, dest: Rank, body: Bytes, args: T) -> Result<()> {
        let comm = upgrade(&self.comm)?;
        check_dest(dest, comm.n_ranks)?;
        crate::transport::check_size(body.len())?;
        let complete = Arc::clone(&self.complete);
        let mut encoded = Vec::new();
        args.encode(&mut encoded);
        let prefix = comm.frame_prefix(self.id, self.sig_hash);
        crate::transport::check_size(prefix.len() + 16 + encoded.len())?;
        comm.enqueue_large(dest, prefix, encoded, body, self.id, move || complete(args))
    }
}

impl Communicator {
    fn enqueue_large(
        &self,
        dest: Rank,
        prefix: Vec<u8>,
        encoded_args: Vec<u8>,
        body: Bytes,
        am_id: AmId,
        on_complete: impl FnOnce() + Send + 'static,
    ) -> Result<()> {
        self.frozen.store(true, Ordering::Release);
        if self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Protocol("send after shutdown".into()));
        }
        let observer = self.observer.read().unwrap_or_else(|e| e.into_inner()).clone();
        let mut outbox = lock(&self.outbox);
        // Sequence number and both frames under one lock, so the bodies to
        // one destination leave in header order.
        let seq = outbox.large_seq[dest];
        outbox.large_seq[dest] += 1;
        let mut header = prefix;
        header.extend_from_slice(&seq.to_le_bytes());
        header.extend_from_slice(&(body.len() as u64).to_le_bytes());
        header.extend_from_slice(&encoded_args);
        outbox.ready.push_back(Outgoing {
            dest,
            tag: MessageTag::LargeHeader,
            bytes: Bytes::from(header),
            on_complete: None,
        });
        outbox.ready.push_back(Outgoing {
            dest,
            tag: MessageTag::LargeBody,
            bytes: body,
            on_complete: Some(Box::new(on_complete)),
        });
        self.counters.on_user_queued();
        if let Some(observer) = observer {
            observer(CounterEvent::Queued { dest, am_id });
        }
        Ok(())
    }
}
