//! Parametrized task graphs.
//!
//! A [`Taskflow`] describes a DAG through functions of a task key: how many
//! dependencies a task has, what it runs, which thread owns it, and
//! optionally its priority, whether it may be stolen, and a label. Nothing is
//! stored up front. A task becomes known the first time one of its
//! dependencies is fulfilled, is counted down in the dependency shard of its
//! owner thread, and is inserted into the pool when the count reaches zero.
//!
//! Each shard is only touched by its owner thread: a fulfill issued anywhere
//! else is posted to the owner's intake. Before the pool starts, fulfills
//! apply directly, so a graph can be seeded from the main thread.
//!
//! Contract violations (a mapping outside the pool, an indegree of zero, or,
//! with tombstones enabled, fulfilling a task that already ran) panic. Inside
//! a task or handler that panic is reported by [`ThreadPool::join`].
//!
//! Task bodies usually need the taskflow itself. Capture a [`WeakTaskflow`]
//! rather than a clone, or the taskflow keeps itself alive.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};

use crate::codec::Payload;
use crate::comm::{ActiveMsg, Communicator};
use crate::error::Result;
use crate::pool::{Task, ThreadPool};
use crate::transport::Rank;

type KeyFn<K, T> = Arc<dyn Fn(&K) -> T + Send + Sync>;

struct Functions<K> {
    indegree: KeyFn<K, usize>,
    run: Arc<dyn Fn(K) + Send + Sync>,
    mapping: KeyFn<K, usize>,
    priority: Option<KeyFn<K, f64>>,
    binding: Option<KeyFn<K, bool>>,
    label: Option<KeyFn<K, String>>,
}

impl<K> Clone for Functions<K> {
    fn clone(&self) -> Self {
        Functions {
            indegree: Arc::clone(&self.indegree),
            run: Arc::clone(&self.run),
            mapping: Arc::clone(&self.mapping),
            priority: self.priority.clone(),
            binding: self.binding.clone(),
            label: self.label.clone(),
        }
    }
}

struct Shard<K> {
    remaining: HashMap<K, usize>,
    fired: Option<HashSet<K>>,
}

struct Inner<K> {
    pool: ThreadPool,
    name: String,
    functions: RwLock<Arc<Functions<K>>>,
    shards: Vec<Mutex<Shard<K>>>,
}

/// Key-indexed task graph bound to one pool. Cloning shares it.
pub struct Taskflow<K> {
    inner: Arc<Inner<K>>,
}

impl<K> Clone for Taskflow<K> {
    fn clone(&self) -> Self {
        Taskflow {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<K> fmt::Debug for Taskflow<K> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Taskflow")
            .field("name", &self.inner.name)
            .finish_non_exhaustive()
    }
}

/// Non-owning handle, for task bodies and handlers that fulfill their own
/// taskflow.
pub struct WeakTaskflow<K> {
    inner: Weak<Inner<K>>,
}

impl<K> Clone for WeakTaskflow<K> {
    fn clone(&self) -> Self {
        WeakTaskflow {
            inner: Weak::clone(&self.inner),
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl<K> Taskflow<K>
where
    K: Hash + Eq + Clone + fmt::Debug + Send + Sync + 'static,
{
    /// A taskflow with indegree 1, an empty body and every task on thread 0.
    pub fn new(pool: &ThreadPool) -> Taskflow<K> {
        Taskflow::named(pool, "")
    }

    pub fn named(pool: &ThreadPool, name: &str) -> Taskflow<K> {
        Taskflow {
            inner: Arc::new(Inner {
                pool: pool.clone(),
                name: name.to_string(),
                functions: RwLock::new(Arc::new(Functions {
                    indegree: Arc::new(|_| 1),
                    run: Arc::new(|_| {}),
                    mapping: Arc::new(|_| 0),
                    priority: None,
                    binding: None,
                    label: None,
                })),
                shards: (0..pool.n_threads())
                    .map(|_| {
                        Mutex::new(Shard {
                            remaining: HashMap::new(),
                            fired: None,
                        })
                    })
                    .collect(),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.inner.pool
    }

    fn update(&self, f: impl FnOnce(&mut Functions<K>)) -> &Self {
        let mut guard = self
            .inner
            .functions
            .write()
            .unwrap_or_else(|e| e.into_inner());
        let mut functions = Functions::clone(&guard);
        f(&mut functions);
        *guard = Arc::new(functions);
        self
    }

    /// Number of dependencies of each task; must be at least 1. Evaluated
    /// once per task, at its first fulfill.
    pub fn set_indegree(&self, f: impl Fn(&K) -> usize + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.indegree = Arc::new(f))
    }

    /// The task body.
    pub fn set_task(&self, f: impl Fn(K) + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.run = Arc::new(f))
    }

    /// Owner thread of each task, in `[0, n_threads)`. Must be deterministic.
    pub fn set_mapping(&self, f: impl Fn(&K) -> usize + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.mapping = Arc::new(f))
    }

    /// Defaults to 0 for every task.
    pub fn set_priority(&self, f: impl Fn(&K) -> f64 + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.priority = Some(Arc::new(f)))
    }

    /// Whether each task may be stolen; defaults to true.
    pub fn set_binding(&self, f: impl Fn(&K) -> bool + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.binding = Some(Arc::new(f)))
    }

    /// Label used in execution traces.
    pub fn set_label(&self, f: impl Fn(&K) -> String + Send + Sync + 'static) -> &Self {
        self.update(|fns| fns.label = Some(Arc::new(f)))
    }

    /// Keeps the key of every fired task so that a later fulfill of it panics
    /// instead of silently starting a new instance. Costs memory per task.
    pub fn set_tombstones(&self, enabled: bool) -> &Self {
        for shard in &self.inner.shards {
            let mut shard = lock(shard);
            match (enabled, shard.fired.is_some()) {
                (true, false) => shard.fired = Some(HashSet::new()),
                (false, true) => shard.fired = None,
                _ => {}
            }
        }
        self
    }

    pub fn downgrade(&self) -> WeakTaskflow<K> {
        WeakTaskflow {
            inner: Arc::downgrade(&self.inner),
        }
    }

    fn functions(&self) -> Arc<Functions<K>> {
        Arc::clone(&self.inner.functions.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Satisfies one dependency of task `k`; the task is queued on its owner
    /// thread once all of them are satisfied. Callable from any thread.
    ///
    /// # Panics
    ///
    /// If `mapping(k)` is out of range. On the owner thread, if
    /// `indegree(k)` is 0 or, with tombstones on, if `k` already ran.
    pub fn fulfill_promise(&self, k: K) {
        let fns = self.functions();
        let owner = (fns.mapping)(&k);
        let n = self.inner.pool.n_threads();
        assert!(
            owner < n,
            "taskflow {:?}: mapping({k:?}) = {owner}, pool has {n} threads",
            self.inner.name
        );
        let pool = &self.inner.pool;
        if pool.current_thread() == Some(owner) || !pool.is_started() {
            self.apply(&fns, owner, k);
        } else {
            let tf = self.clone();
            pool.post(
                owner,
                Box::new(move || {
                    let fns = tf.functions();
                    tf.apply(&fns, owner, k);
                }),
            );
        }
    }

    fn apply(&self, fns: &Functions<K>, owner: usize, k: K) {
        let ready = {
            let mut shard = lock(&self.inner.shards[owner]);
            if let Some(fired) = &shard.fired {
                assert!(
                    !fired.contains(&k),
                    "taskflow {:?}: {k:?} fulfilled after it ran",
                    self.inner.name
                );
            }
            let ready = match shard.remaining.get_mut(&k) {
                Some(remaining) => {
                    *remaining -= 1;
                    *remaining == 0
                }
                None => {
                    let indegree = (fns.indegree)(&k);
                    assert!(
                        indegree >= 1,
                        "taskflow {:?}: indegree({k:?}) is 0",
                        self.inner.name
                    );
                    if indegree > 1 {
                        shard.remaining.insert(k.clone(), indegree - 1);
                    }
                    indegree == 1
                }
            };
            if ready {
                shard.remaining.remove(&k);
                if let Some(fired) = &mut shard.fired {
                    fired.insert(k.clone());
                }
            }
            ready
        };
        if ready {
            self.fire(fns, owner, k);
        }
    }

    fn fire(&self, fns: &Functions<K>, owner: usize, k: K) {
        let mut task = Task::new({
            let run = Arc::clone(&fns.run);
            let k = k.clone();
            move || run(k)
        });
        if let Some(priority) = &fns.priority {
            task = task.with_priority(priority(&k));
        }
        if let Some(binding) = &fns.binding {
            task = task.with_stealable(binding(&k));
        }
        if let Some(label) = &fns.label {
            task = task.with_label(label(&k));
        }
        self.inner
            .pool
            .insert(task, owner)
            .expect("owner thread checked at fulfill");
    }

    /// Tasks that have been discovered but not yet fired, over all shards.
    pub fn resident_keys(&self) -> usize {
        self.inner
            .shards
            .iter()
            .map(|s| lock(s).remaining.len())
            .sum()
    }

    /// Registers an active message whose handler fulfills a key of this
    /// taskflow on the receiving rank. Like every active message it must be
    /// created in the same order on all ranks.
    pub fn remote(&self, comm: &Arc<Communicator>) -> Result<RemoteFulfill<K>>
    where
        K: Payload,
    {
        let weak = self.downgrade();
        let am = comm.make_active_msg(move |k: K| weak.fulfill_promise(k))?;
        Ok(RemoteFulfill { am })
    }
}

impl<K> WeakTaskflow<K>
where
    K: Hash + Eq + Clone + fmt::Debug + Send + Sync + 'static,
{
    pub fn upgrade(&self) -> Option<Taskflow<K>> {
        self.inner.upgrade().map(|inner| Taskflow { inner })
    }

    /// See [`Taskflow::fulfill_promise`].
    ///
    /// # Panics
    ///
    /// Also if the taskflow has been dropped.
    pub fn fulfill_promise(&self, k: K) {
        self.upgrade()
            .expect("fulfill on a dropped taskflow")
            .fulfill_promise(k)
    }
}

/// Sends fulfills of a taskflow's keys to other ranks.
pub struct RemoteFulfill<K> {
    am: ActiveMsg<K>,
}

impl<K> Clone for RemoteFulfill<K> {
    fn clone(&self) -> Self {
        RemoteFulfill {
            am: self.am.clone(),
        }
    }
}

impl<K: Payload> RemoteFulfill<K> {
    /// Fulfills `k` on rank `dest`, which may be this rank.
    pub fn fulfill(&self, dest: Rank, k: &K) -> Result<()> {
        self.am.send(dest, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn single_fulfill_fires_indegree_one() {
        let pool = ThreadPool::new(2, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        let runs = Arc::new(AtomicUsize::new(0));
        let r = Arc::clone(&runs);
        tf.set_task(move |_| {
            r.fetch_add(1, Ordering::SeqCst);
        });
        tf.fulfill_promise(7);
        pool.join().unwrap();
        assert_eq!(runs.load(Ordering::SeqCst), 1);
        assert_eq!(tf.resident_keys(), 0);
    }

    #[test]
    fn indegree_three_fires_on_third_fulfill() {
        let pool = ThreadPool::new(1, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        let runs = Arc::new(AtomicUsize::new(0));
        let r = Arc::clone(&runs);
        tf.set_indegree(|_| 3).set_task(move |_| {
            r.fetch_add(1, Ordering::SeqCst);
        });
        // Not started: fulfills apply inline and fired tasks wait in the queue.
        tf.fulfill_promise(1);
        tf.fulfill_promise(1);
        assert_eq!(tf.resident_keys(), 1);
        assert!(pool.is_idle());
        tf.fulfill_promise(1);
        assert_eq!(tf.resident_keys(), 0);
        assert!(!pool.is_idle());
        pool.join().unwrap();
        assert_eq!(runs.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn diamond() {
        // a -> {c, d}, b -> {d, e}
        let pool = ThreadPool::new(3, None).unwrap();
        let tf = Taskflow::<char>::new(&pool);
        let log = Arc::new(Mutex::new(Vec::new()));
        let weak = tf.downgrade();
        let l = Arc::clone(&log);
        tf.set_indegree(|k| if *k == 'd' { 2 } else { 1 })
            .set_mapping(|k| (*k as usize) % 3)
            .set_task(move |k| {
                lock(&l).push(k);
                match k {
                    'a' => ['c', 'd'].into_iter().for_each(|s| weak.fulfill_promise(s)),
                    'b' => ['d', 'e'].into_iter().for_each(|s| weak.fulfill_promise(s)),
                    _ => {}
                }
            });
        tf.fulfill_promise('a');
        tf.fulfill_promise('b');
        pool.join().unwrap();
        let log = lock(&log).clone();
        let mut sorted = log.clone();
        sorted.sort();
        assert_eq!(sorted, vec!['a', 'b', 'c', 'd', 'e']);
        let pos = |c| log.iter().position(|&x| x == c).unwrap();
        assert!(pos('d') > pos('a') && pos('d') > pos('b'));
        assert!(pos('c') > pos('a') && pos('e') > pos('b'));
    }

    #[test]
    fn priority_binding_and_label_reach_the_task() {
        let pool = ThreadPool::with_config(
            1,
            None,
            crate::pool::PoolConfig {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        tf.set_priority(|k| *k as f64)
            .set_binding(|k| k % 2 == 0)
            .set_label(|k| format!("t{k}"));
        for k in 0..4 {
            tf.fulfill_promise(k);
        }
        pool.join().unwrap();
        let labels: Vec<String> = pool.trace().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["t3", "t2", "t1", "t0"]);
    }

    #[test]
    fn mapping_out_of_range_panics() {
        let pool = ThreadPool::new(2, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        tf.set_mapping(|_| 2);
        let err = std::panic::catch_unwind(AssertUnwindSafe(|| tf.fulfill_promise(0)));
        assert!(err.is_err());
        pool.join().unwrap();
    }

    #[test]
    fn zero_indegree_panics() {
        let pool = ThreadPool::new(1, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        tf.set_indegree(|_| 0);
        let err = std::panic::catch_unwind(AssertUnwindSafe(|| tf.fulfill_promise(0)));
        assert!(err.is_err());
        pool.join().unwrap();
    }

    #[test]
    fn tombstones_catch_over_fulfill_inside_tasks() {
        let pool = ThreadPool::new(2, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        let weak = tf.downgrade();
        tf.set_tombstones(true).set_task(move |k| {
            if k == 0 {
                weak.fulfill_promise(1);
                weak.fulfill_promise(1);
            }
        });
        tf.fulfill_promise(0);
        assert!(matches!(pool.join(), Err(crate::Error::TaskPanicked(_))));
    }

    #[test]
    fn cross_thread_counting_is_exact() {
        // Every key k in 0..200 has indegree 8, fulfilled once from each of
        // 8 source tasks spread over 4 threads.
        let pool = ThreadPool::new(4, None).unwrap();
        let sinks = Taskflow::<u32>::named(&pool, "sinks");
        let sources = Taskflow::<u32>::named(&pool, "sources");
        let runs: Arc<Vec<AtomicUsize>> = Arc::new((0..200).map(|_| AtomicUsize::new(0)).collect());
        let r = Arc::clone(&runs);
        sinks
            .set_indegree(|_| 8)
            .set_mapping(|k| (*k % 4) as usize)
            .set_task(move |k| {
                r[k as usize].fetch_add(1, Ordering::SeqCst);
            });
        let weak = sinks.downgrade();
        sources.set_mapping(|k| (*k % 4) as usize).set_task(move |_| {
            (0..200).for_each(|k| weak.fulfill_promise(k));
        });
        for s in 0..8 {
            sources.fulfill_promise(s);
        }
        pool.join().unwrap();
        assert!(runs.iter().all(|r| r.load(Ordering::SeqCst) == 1));
        assert_eq!(sinks.resident_keys(), 0);
    }

    use std::panic::AssertUnwindSafe;
}
