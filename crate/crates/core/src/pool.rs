//! Worker pool with per-thread dual priority queues and work stealing.
//!
//! Each worker owns two max-priority queues: tasks in the stealable queue may
//! be taken by idle workers, tasks in the bound queue only ever run on their
//! owner. Both pop in `(priority desc, insertion seq asc)` order. An idle
//! worker scans victims starting at `(self + 1) mod n` and takes the head of
//! the first non-empty stealable queue.
//!
//! Besides tasks, every worker has an intake mailbox of bookkeeping actions
//! that must run on that thread (see [`crate::taskflow`]).
//!
//! The pool is "idle" when no task or action is queued, stolen-in-flight, or
//! executing. This is tracked by a single pending counter that is raised
//! before anything is enqueued and lowered after it finishes, so a task that
//! spawns children never lets it touch zero.

use std::cell::Cell;
use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock, Weak};
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, Instant};

use crate::comm::Communicator;
use crate::error::{Error, Result};

type Body = Box<dyn FnOnce() + Send + 'static>;
pub(crate) type Action = Box<dyn FnOnce() + Send + 'static>;

/// A runnable unit of work.
pub struct Task {
    body: Body,
    priority: f64,
    stealable: bool,
    label: Option<String>,
}

impl Task {
    /// Stealable, priority 0, no label.
    pub fn new(body: impl FnOnce() + Send + 'static) -> Task {
        Task {
            body: Box::new(body),
            priority: 0.0,
            stealable: true,
            label: None,
        }
    }

    pub fn with_priority(mut self, priority: f64) -> Task {
        self.priority = priority;
        self
    }

    pub fn with_stealable(mut self, stealable: bool) -> Task {
        self.stealable = stealable;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Task {
        self.label = Some(label.into());
        self
    }

    pub fn priority(&self) -> f64 {
        self.priority
    }

    pub fn is_stealable(&self) -> bool {
        self.stealable
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }
}

impl fmt::Debug for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Task")
            .field("priority", &self.priority)
            .field("stealable", &self.stealable)
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

pub(crate) struct Entry {
    pub(crate) seq: u64,
    pub(crate) task: Task,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Entry) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Entry) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Entry) -> CmpOrdering {
        self.task
            .priority
            .total_cmp(&other.task.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Debug)]
pub struct PoolConfig {
    /// Empty polls (with a yield) before an idle worker parks.
    pub spin_rounds: u32,
    /// Upper bound on a single park, after which the worker rescans for work
    /// to steal.
    pub park_timeout: Duration,
    /// Record one [`TraceRecord`] per executed task.
    pub trace: bool,
}

impl Default for PoolConfig {
    fn default() -> PoolConfig {
        PoolConfig {
            spin_rounds: 32,
            park_timeout: Duration::from_micros(500),
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub label: String,
    pub thread: usize,
    pub start: Duration,
    pub stop: Duration,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.9} {:.9}",
            if self.label.is_empty() { "-" } else { &self.label },
            self.thread,
            self.start.as_secs_f64(),
            self.stop.as_secs_f64()
        )
    }
}

struct Worker {
    stealable: Mutex<BinaryHeap<Entry>>,
    bound: Mutex<BinaryHeap<Entry>>,
    intake: Mutex<Vec<Action>>,
    busy: AtomicBool,
    sleeping: AtomicBool,
}

impl Worker {
    fn new() -> Worker {
        Worker {
            stealable: Mutex::new(BinaryHeap::new()),
            bound: Mutex::new(BinaryHeap::new()),
            intake: Mutex::new(Vec::new()),
            busy: AtomicBool::new(false),
            sleeping: AtomicBool::new(false),
        }
    }
}

#[derive(Default)]
struct Lifecycle {
    started: bool,
    joined: bool,
    workers: Vec<JoinHandle<()>>,
    comm_thread: Option<JoinHandle<Result<()>>>,
}

pub(crate) struct PoolInner {
    id: u64,
    n_threads: usize,
    workers: Vec<Worker>,
    pending: AtomicUsize,
    seq: AtomicU64,
    started: AtomicBool,
    stopping: AtomicBool,
    lifecycle: Mutex<Lifecycle>,
    handles: OnceLock<Vec<Thread>>,
    idle_lock: Mutex<()>,
    idle_cv: Condvar,
    comm: Option<Arc<Communicator>>,
    failure: Mutex<Option<String>>,
    config: PoolConfig,
    trace: Mutex<Vec<TraceRecord>>,
    epoch: Instant,
}

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CURRENT: Cell<Option<(u64, usize)>> = const { Cell::new(None) };
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Fixed-size worker pool. Cloning yields another handle to the same pool.
#[derive(Clone)]
pub struct ThreadPool {
    inner: Arc<PoolInner>,
}

impl ThreadPool {
    /// Creates `n_threads` parked workers. With a communicator attached,
    /// [`ThreadPool::join`] also waits for global completion.
    pub fn new(n_threads: usize, comm: Option<Arc<Communicator>>) -> Result<ThreadPool> {
        ThreadPool::with_config(n_threads, comm, PoolConfig::default())
    }

    pub fn with_config(
        n_threads: usize,
        comm: Option<Arc<Communicator>>,
        config: PoolConfig,
    ) -> Result<ThreadPool> {
        if n_threads < 1 {
            return Err(Error::InvalidArgument("a pool needs at least one thread".into()));
        }
        let inner = Arc::new(PoolInner {
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
            n_threads,
            workers: (0..n_threads).map(|_| Worker::new()).collect(),
            pending: AtomicUsize::new(0),
            seq: AtomicU64::new(0),
            started: AtomicBool::new(false),
            stopping: AtomicBool::new(false),
            lifecycle: Mutex::new(Lifecycle::default()),
            handles: OnceLock::new(),
            idle_lock: Mutex::new(()),
            idle_cv: Condvar::new(),
            comm,
            failure: Mutex::new(None),
            config,
            trace: Mutex::new(Vec::new()),
            epoch: Instant::now(),
        });
        if let Some(comm) = &inner.comm {
            let weak: Weak<PoolInner> = Arc::downgrade(&inner);
            comm.set_idle_probe(Box::new(move || {
                weak.upgrade()
                    .is_none_or(|p| p.pending.load(Ordering::SeqCst) == 0)
            }));
        }
        Ok(ThreadPool { inner })
    }

    pub fn n_threads(&self) -> usize {
        self.inner.n_threads
    }

    pub fn communicator(&self) -> Option<&Arc<Communicator>> {
        self.inner.comm.as_ref()
    }

    pub fn is_started(&self) -> bool {
        self.inner.started.load(Ordering::Acquire)
    }

    /// True when nothing is queued, in an intake, or executing.
    pub fn is_idle(&self) -> bool {
        self.inner.pending.load(Ordering::SeqCst) == 0
    }

    /// Per-worker idle flag: both queues and the intake empty, nothing running.
    pub fn worker_idle(&self, thread: usize) -> bool {
        let w = &self.inner.workers[thread];
        !w.busy.load(Ordering::SeqCst)
            && lock(&w.intake).is_empty()
            && lock(&w.bound).is_empty()
            && lock(&w.stealable).is_empty()
    }

    /// The worker index of the calling thread, if it belongs to this pool.
    pub fn current_thread(&self) -> Option<usize> {
        CURRENT.with(|c| match c.get() {
            Some((pool, t)) if pool == self.inner.id => Some(t),
            _ => None,
        })
    }

    fn check_thread(&self, thread: usize) -> Result<()> {
        if thread >= self.inner.n_threads {
            return Err(Error::InvalidArgument(format!(
                "thread {thread} out of range (n_threads = {})",
                self.inner.n_threads
            )));
        }
        Ok(())
    }

    /// Queues `task` on `thread`: its stealable queue if the task is
    /// stealable, its bound queue otherwise. Callable from any thread, before
    /// or after [`ThreadPool::start`].
    pub fn insert(&self, task: Task, thread: usize) -> Result<()> {
        self.check_thread(thread)?;
        if self.inner.stopping.load(Ordering::Acquire) {
            return Err(Error::Protocol("insert into a joined pool".into()));
        }
        self.inner.pending.fetch_add(1, Ordering::SeqCst);
        let seq = self.inner.seq.fetch_add(1, Ordering::Relaxed);
        let stealable = task.stealable;
        let worker = &self.inner.workers[thread];
        let queue = if stealable {
            &worker.stealable
        } else {
            &worker.bound
        };
        lock(queue).push(Entry { seq, task });
        self.inner.wake(thread, stealable);
        Ok(())
    }

    /// Queues a bookkeeping action on `thread`'s intake. Actions run on that
    /// worker before it looks for tasks, and count towards pool activity.
    pub(crate) fn post(&self, thread: usize, action: Action) {
        self.inner.pending.fetch_add(1, Ordering::SeqCst);
        lock(&self.inner.workers[thread].intake).push(action);
        self.inner.wake(thread, false);
    }

    /// Pops the next task for `worker`: the better of its two local heads
    /// (bound wins ties), else the head of the first non-empty victim
    /// stealable queue scanning from `worker + 1`.
    #[cfg(test)]
    pub(crate) fn acquire_next(&self, worker: usize) -> Option<Entry> {
        self.inner.acquire_next(worker)
    }

    /// Spawns the workers, and the communication thread when a communicator
    /// is attached. Idempotent.
    pub fn start(&self) -> Result<()> {
        let mut life = lock(&self.inner.lifecycle);
        if life.started {
            return Ok(());
        }
        life.started = true;
        let mut handles = Vec::with_capacity(self.inner.n_threads);
        for idx in 0..self.inner.n_threads {
            let inner = Arc::clone(&self.inner);
            let handle = thread::Builder::new()
                .name(format!("worker-{idx}"))
                .spawn(move || inner.worker_loop(idx))?;
            handles.push(handle.thread().clone());
            life.workers.push(handle);
        }
        let _ = self.inner.handles.set(handles);
        if let Some(comm) = &self.inner.comm {
            let comm = Arc::clone(comm);
            life.comm_thread = Some(
                thread::Builder::new()
                    .name(format!("comm-{}", comm.rank()))
                    .spawn(move || comm.run_until_shutdown())?,
            );
        }
        self.inner.started.store(true, Ordering::Release);
        Ok(())
    }

    /// Blocks until the pool is idle and, with a communicator, until the
    /// completion protocol has delivered SHUTDOWN. Starts the pool if needed.
    ///
    /// Calling join is the signal that no more tasks will be inserted from
    /// outside the pool; only tasks and message handlers may add work after
    /// it. A second call returns immediately.
    pub fn join(&self) -> Result<()> {
        self.start()?;
        let mut life = lock(&self.inner.lifecycle);
        if life.joined {
            return Ok(());
        }
        let mut outcome = Ok(());
        if let Some(comm) = &self.inner.comm {
            comm.enable_completion();
            if let Some(handle) = life.comm_thread.take() {
                outcome = handle
                    .join()
                    .unwrap_or_else(|_| Err(Error::Protocol("communication thread panicked".into())));
            }
            // Handlers hold taskflows, which hold this pool; break the cycle.
            comm.release_handlers();
        }
        if outcome.is_ok() {
            self.wait_idle();
        }
        self.inner.stopping.store(true, Ordering::Release);
        if let Some(handles) = self.inner.handles.get() {
            handles.iter().for_each(Thread::unpark);
        }
        for handle in life.workers.drain(..) {
            let _ = handle.join();
        }
        life.joined = true;
        outcome?;
        match lock(&self.inner.failure).take() {
            Some(msg) => Err(Error::TaskPanicked(msg)),
            None => Ok(()),
        }
    }

    fn wait_idle(&self) {
        let mut guard = lock(&self.inner.idle_lock);
        while self.inner.pending.load(Ordering::SeqCst) != 0 {
            guard = self
                .inner
                .idle_cv
                .wait_timeout(guard, Duration::from_millis(50))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Executed-task records, when tracing is enabled.
    pub fn trace(&self) -> Vec<TraceRecord> {
        lock(&self.inner.trace).clone()
    }

    pub fn config(&self) -> &PoolConfig {
        &self.inner.config
    }
}

impl PoolInner {
    fn wake(&self, thread: usize, stealable: bool) {
        let Some(handles) = self.handles.get() else {
            return;
        };
        handles[thread].unpark();
        if stealable && self.workers[thread].busy.load(Ordering::Relaxed) {
            // The target is busy; let a sleeping neighbour come and steal.
            let n = self.n_threads;
            if let Some(v) = (1..n)
                .map(|off| (thread + off) % n)
                .find(|&v| self.workers[v].sleeping.load(Ordering::Relaxed))
            {
                handles[v].unpark();
            }
        }
    }

    fn acquire_next(&self, idx: usize) -> Option<Entry> {
        let me = &self.workers[idx];
        {
            let mut bound = lock(&me.bound);
            let mut steal = lock(&me.stealable);
            let take_bound = match (bound.peek(), steal.peek()) {
                (None, None) => None,
                (Some(_), None) => Some(true),
                (None, Some(_)) => Some(false),
                (Some(b), Some(s)) => {
                    Some(b.task.priority.total_cmp(&s.task.priority) != CmpOrdering::Less)
                }
            };
            match take_bound {
                Some(true) => return bound.pop(),
                Some(false) => return steal.pop(),
                None => {}
            }
        }
        let n = self.n_threads;
        (1..n)
            .map(|off| (idx + off) % n)
            .find_map(|victim| lock(&self.workers[victim].stealable).pop())
    }

    fn has_local_work(&self, idx: usize) -> bool {
        let w = &self.workers[idx];
        !lock(&w.intake).is_empty() || !lock(&w.bound).is_empty() || !lock(&w.stealable).is_empty()
    }

    fn finish_one(&self) {
        if self.pending.fetch_sub(1, Ordering::SeqCst) == 1 {
            let _guard = lock(&self.idle_lock);
            self.idle_cv.notify_all();
        }
    }

    fn record_panic(&self, payload: Box<dyn std::any::Any + Send>) {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "non-string panic payload".to_string());
        log::error!("task panicked: {msg}");
        lock(&self.failure).get_or_insert(msg);
    }

    fn run_intake(&self, idx: usize) -> bool {
        let actions = std::mem::take(&mut *lock(&self.workers[idx].intake));
        if actions.is_empty() {
            return false;
        }
        for action in actions {
            if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(action)) {
                self.record_panic(payload);
            }
            self.finish_one();
        }
        true
    }

    fn execute(&self, idx: usize, entry: Entry) {
        let me = &self.workers[idx];
        me.busy.store(true, Ordering::SeqCst);
        let Task { body, label, .. } = entry.task;
        let start = self.config.trace.then(|| self.epoch.elapsed());
        if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(body)) {
            self.record_panic(payload);
        }
        if let Some(start) = start {
            let stop = self.epoch.elapsed();
            lock(&self.trace).push(TraceRecord {
                label: label.unwrap_or_default(),
                thread: idx,
                start,
                stop,
            });
        }
        me.busy.store(false, Ordering::SeqCst);
        self.finish_one();
    }

    fn worker_loop(self: Arc<Self>, idx: usize) {
        CURRENT.with(|c| c.set(Some((self.id, idx))));
        let me = &self.workers[idx];
        let mut empty_polls = 0u32;
        loop {
            if self.run_intake(idx) {
                empty_polls = 0;
                continue;
            }
            if let Some(entry) = self.acquire_next(idx) {
                self.execute(idx, entry);
                empty_polls = 0;
                continue;
            }
            if self.stopping.load(Ordering::Acquire) {
                break;
            }
            empty_polls += 1;
            if empty_polls < self.config.spin_rounds {
                thread::yield_now();
                continue;
            }
            me.sleeping.store(true, Ordering::SeqCst);
            if !self.has_local_work(idx) && !self.stopping.load(Ordering::Acquire) {
                thread::park_timeout(self.config.park_timeout);
            }
            me.sleeping.store(false, Ordering::SeqCst);
        }
        CURRENT.with(|c| c.set(None));
    }
}
