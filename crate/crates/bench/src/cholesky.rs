//! Blocked right-looking Cholesky as a task graph.
//!
//! Tasks over an `n × n` grid of blocks:
//!
//! - `potrf(k)` factors the diagonal block `(k, k)`;
//! - `trsm(i, k)`, `i > k`, solves block `(i, k)` against `L_kk`;
//! - `gemm(k, i, j)`, `k < j ≤ i`, subtracts `L_ik · L_jkᵀ` from block
//!   `(i, j)`; with `i == j` this is the symmetric rank-b update (syrk) and
//!   needs `L_ik` only.
//!
//! Updates to one block are chained in increasing `k`, so every block sees
//! the same sequence of floating point operations whatever the number of
//! ranks, threads, or the schedule.
//!
//! Blocks are distributed 2D block-cyclically and every task runs on the
//! owner of the block it writes. A finished `L` block is sent once to each
//! other rank with a task that reads it, as a large message whose arrival
//! fulfills that rank's dependent tasks, and once to rank 0, which assembles
//! the factor.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ptg_runtime::{Communicator, LargeActiveMsg, Rank, Taskflow, ThreadPool};

use crate::blocks::{self, Dense, RankGrid};
use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Potrf(usize),
    /// `(i, k)`
    Trsm(usize, usize),
    /// `(k, i, j)`
    Gemm(usize, usize, usize),
}

impl Op {
    /// Block written by this task.
    pub fn block(self) -> (usize, usize) {
        match self {
            Op::Potrf(k) => (k, k),
            Op::Trsm(i, k) => (i, k),
            Op::Gemm(_, i, j) => (i, j),
        }
    }

    pub fn indegree(self) -> usize {
        match self {
            Op::Potrf(_) => 1,
            Op::Trsm(_, k) => 1 + usize::from(k > 0),
            Op::Gemm(k, i, j) => (if i == j { 1 } else { 2 }) + usize::from(k > 0),
        }
    }

    /// Tasks that wait on this one, in a fixed order.
    pub fn successors(self, n: usize) -> Vec<Op> {
        match self {
            Op::Potrf(k) => (k + 1..n).map(|i| Op::Trsm(i, k)).collect(),
            Op::Trsm(i, k) => (k + 1..=i)
                .map(|j| Op::Gemm(k, i, j))
                .chain((i + 1..n).map(|l| Op::Gemm(k, l, i)))
                .collect(),
            Op::Gemm(k, i, j) if k + 1 < j => vec![Op::Gemm(k + 1, i, j)],
            Op::Gemm(_, i, j) if i == j => vec![Op::Potrf(j)],
            Op::Gemm(_, i, j) => vec![Op::Trsm(i, j)],
        }
    }

    /// Longest remaining path, in a form that decreases along every edge.
    pub fn priority(self, n: usize) -> f64 {
        let p = match self {
            Op::Potrf(k) => 3 * (n - k),
            Op::Trsm(_, k) => 3 * (n - k) - 1,
            Op::Gemm(k, _, j) => 3 * (n - j) + (j - k),
        };
        p as f64
    }

    pub fn label(self) -> String {
        match self {
            Op::Potrf(k) => format!("potrf_{k}"),
            Op::Trsm(i, k) => format!("trsm_{i}_{k}"),
            Op::Gemm(k, i, j) if i == j => format!("syrk_{k}_{i}"),
            Op::Gemm(k, i, j) => format!("gemm_{k}_{i}_{j}"),
        }
    }
}

/// The task whose output is the final `L` block `(i, k)`.
fn producer(i: usize, k: usize) -> Op {
    if i == k {
        Op::Potrf(k)
    } else {
        Op::Trsm(i, k)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskCounts {
    pub potrf: usize,
    pub trsm: usize,
    pub gemm: usize,
}

impl TaskCounts {
    /// `n`, `n(n-1)/2` and `n(n-1)(n+1)/6`.
    pub fn closed_form(n: usize) -> TaskCounts {
        TaskCounts {
            potrf: n,
            trsm: n * n.saturating_sub(1) / 2,
            gemm: n * n.saturating_sub(1) * (n + 1) / 6,
        }
    }

    pub fn total(&self) -> usize {
        self.potrf + self.trsm + self.gemm
    }
}

impl std::ops::Add for TaskCounts {
    type Output = TaskCounts;
    fn add(self, o: TaskCounts) -> TaskCounts {
        TaskCounts {
            potrf: self.potrf + o.potrf,
            trsm: self.trsm + o.trsm,
            gemm: self.gemm + o.gemm,
        }
    }
}

/// Walks the graph from `potrf(0)` through the successor function and checks
/// each reached task's in-edge count against its indegree. Returns the task
/// counts, or the first inconsistency.
pub fn enumerate_dag(n: usize) -> Result<TaskCounts> {
    if n == 0 {
        return Ok(TaskCounts::default());
    }
    let mut in_edges: HashMap<Op, usize> = HashMap::new();
    let mut seen = BTreeSet::from([Op::Potrf(0)]);
    let mut stack = vec![Op::Potrf(0)];
    while let Some(op) = stack.pop() {
        for s in op.successors(n) {
            *in_edges.entry(s).or_default() += 1;
            if seen.insert(s) {
                stack.push(s);
            }
        }
    }
    let mut counts = TaskCounts::default();
    for &op in &seen {
        let found = in_edges.get(&op).copied().unwrap_or(0);
        // potrf(0) is seeded by one external fulfill.
        let expected = op.indegree() - usize::from(op == Op::Potrf(0));
        if found != expected {
            return Err(BenchError::Failed(format!(
                "{op:?}: {found} in-edges, indegree {expected}"
            )));
        }
        match op {
            Op::Potrf(_) => counts.potrf += 1,
            Op::Trsm(..) => counts.trsm += 1,
            Op::Gemm(..) => counts.gemm += 1,
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug)]
pub struct CholeskyConfig {
    pub matrix_size: usize,
    pub block_size: usize,
    pub n_threads: usize,
    pub seed: u64,
    pub trace: bool,
}

impl CholeskyConfig {
    pub fn n_blocks(&self) -> Result<usize> {
        if self.block_size == 0 || !self.matrix_size.is_multiple_of(self.block_size) {
            return Err(BenchError::Config(format!(
                "N = {} is not a multiple of the block size {}",
                self.matrix_size, self.block_size
            )));
        }
        Ok(self.matrix_size / self.block_size)
    }
}

/// What one rank reports after the run.
#[derive(Clone, Debug)]
pub struct CholeskyRank {
    pub rank: Rank,
    pub run_time: Duration,
    pub counts: TaskCounts,
    /// The assembled factor, on rank 0.
    pub factor: Option<Dense>,
    pub trace: Vec<ptg_runtime::pool::TraceRecord>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

type BlockMsg = LargeActiveMsg<(u32, u32)>;

struct RankState {
    me: Rank,
    n: usize,
    b: usize,
    grid: RankGrid,
    owned: HashMap<(usize, usize), Mutex<Vec<f64>>>,
    finals: Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>,
    gathered: Mutex<HashMap<(usize, usize), Vec<f64>>>,
    counts: [AtomicUsize; 3],
    failure: Mutex<Option<String>>,
}

impl RankState {
    fn task_rank(&self, op: Op) -> Rank {
        let (i, j) = op.block();
        self.grid.owner(i, j)
    }

    fn final_block(&self, i: usize, k: usize) -> Arc<Vec<f64>> {
        Arc::clone(
            lock(&self.finals)
                .get(&(i, k))
                .unwrap_or_else(|| panic!("L block ({i},{k}) not available on rank {}", self.me)),
        )
    }

    fn fail(&self, msg: String) {
        log::error!("rank {}: {msg}", self.me);
        lock(&self.failure).get_or_insert(msg);
    }
}

/// Runs one rank of the factorization of the seeded SPD matrix.
pub fn run_rank(comm: Arc<Communicator>, config: &CholeskyConfig) -> Result<CholeskyRank> {
    let n = config.n_blocks()?;
    let b = config.block_size;
    let me = comm.rank();
    let grid = RankGrid::new(comm.n_ranks());
    let a = Dense::random_spd(config.matrix_size, config.seed);
    let owned = (0..n)
        .flat_map(|i| (0..=i).map(move |j| (i, j)))
        .filter(|&(i, j)| grid.owner(i, j) == me)
        .map(|(i, j)| ((i, j), Mutex::new(a.block(i, j, b))))
        .collect();
    drop(a);
    let state = Arc::new(RankState {
        me,
        n,
        b,
        grid,
        owned,
        finals: Mutex::new(HashMap::new()),
        gathered: Mutex::new(HashMap::new()),
        counts: Default::default(),
        failure: Mutex::new(None),
    });

    let pool_config = ptg_runtime::PoolConfig {
        trace: config.trace,
        ..Default::default()
    };
    let pool = ThreadPool::with_config(config.n_threads, Some(Arc::clone(&comm)), pool_config)?;
    let tf = Taskflow::<Op>::named(&pool, "cholesky");

    // Same registration order on every rank: block transfers, then gathers.
    let weak = tf.downgrade();
    let st = Arc::clone(&state);
    let to_compute: BlockMsg = comm.make_large_active_msg(
        |_: &(u32, u32), len| vec![0; len],
        move |(i, k): (u32, u32), body: Vec<u8>| {
            let (i, k) = (i as usize, k as usize);
            lock(&st.finals).insert((i, k), Arc::new(blocks::from_bytes(&body)));
            for s in producer(i, k).successors(st.n) {
                if st.task_rank(s) == st.me {
                    weak.fulfill_promise(s);
                }
            }
        },
        |_| {},
    )?;
    let st = Arc::clone(&state);
    let to_root: BlockMsg = comm.make_large_active_msg(
        |_: &(u32, u32), len| vec![0; len],
        move |(i, k): (u32, u32), body: Vec<u8>| {
            lock(&st.gathered).insert((i as usize, k as usize), blocks::from_bytes(&body));
        },
        |_| {},
    )?;

    let n_threads = config.n_threads;
    let weak = tf.downgrade();
    let st = Arc::clone(&state);
    tf.set_indegree(|op| op.indegree())
        .set_mapping(move |op| {
            let (i, j) = op.block();
            (i + j) % n_threads
        })
        .set_priority(move |op| op.priority(n))
        .set_label(|op| op.label())
        .set_task(move |op| {
            if let Err(msg) = run_task(&st, op, &weak, &to_compute, &to_root) {
                st.fail(msg);
            }
        });

    if grid.owner(0, 0) == me {
        tf.fulfill_promise(Op::Potrf(0));
    }
    let start = Instant::now();
    pool.join()?;
    let run_time = start.elapsed();

    if let Some(msg) = lock(&state.failure).take() {
        return Err(BenchError::Failed(msg));
    }
    let counts = TaskCounts {
        potrf: state.counts[0].load(Ordering::SeqCst),
        trsm: state.counts[1].load(Ordering::SeqCst),
        gemm: state.counts[2].load(Ordering::SeqCst),
    };
    let factor = (me == 0)
        .then(|| assemble(&lock(&state.gathered), n, b))
        .transpose()?;
    Ok(CholeskyRank {
        rank: me,
        run_time,
        counts,
        factor,
        trace: pool.trace(),
    })
}

fn run_task(
    st: &RankState,
    op: Op,
    tf: &ptg_runtime::WeakTaskflow<Op>,
    to_compute: &BlockMsg,
    to_root: &BlockMsg,
) -> std::result::Result<(), String> {
    let b = st.b;
    let (bi, bj) = op.block();
    let target = st
        .owned
        .get(&(bi, bj))
        .ok_or_else(|| format!("{op:?} scheduled on rank {} which lacks its block", st.me))?;
    match op {
        Op::Potrf(k) => {
            let mut blk = lock(target);
            blocks::potrf(&mut blk, b).map_err(|c| {
                format!("matrix is not positive definite: potrf({k}) failed at column {c}")
            })?;
            st.counts[0].fetch_add(1, Ordering::SeqCst);
        }
        Op::Trsm(_, k) => {
            let l = st.final_block(k, k);
            blocks::trsm(&mut lock(target), &l, b);
            st.counts[1].fetch_add(1, Ordering::SeqCst);
        }
        Op::Gemm(k, i, j) => {
            let li = st.final_block(i, k);
            if i == j {
                blocks::syrk_sub(&mut lock(target), &li, b);
            } else {
                let lj = st.final_block(j, k);
                blocks::gemm_nt_sub(&mut lock(target), &li, &lj, b);
            }
            st.counts[2].fetch_add(1, Ordering::SeqCst);
        }
    }

    let successors = op.successors(st.n);
    if matches!(op, Op::Gemm(..)) {
        // The next update of a block, or its final step, lives with the block.
        successors.into_iter().for_each(|s| tf.fulfill_promise(s));
        return Ok(());
    }

    let done = Arc::new(lock(target).clone());
    lock(&st.finals).insert((bi, bj), Arc::clone(&done));
    let args = (bi as u32, bj as u32);
    let bytes = blocks::to_bytes(&done);
    let send_err = |e: ptg_runtime::Error| e.to_string();
    if st.me == 0 {
        lock(&st.gathered).insert((bi, bj), done.to_vec());
    } else {
        to_root.send(0, bytes.clone(), args).map_err(send_err)?;
    }
    let remote: BTreeSet<Rank> = successors
        .iter()
        .map(|&s| st.task_rank(s))
        .filter(|&r| r != st.me)
        .collect();
    for r in remote {
        to_compute.send(r, bytes.clone(), args).map_err(send_err)?;
    }
    for s in successors {
        if st.task_rank(s) == st.me {
            tf.fulfill_promise(s);
        }
    }
    Ok(())
}

fn assemble(gathered: &HashMap<(usize, usize), Vec<f64>>, n: usize, b: usize) -> Result<Dense> {
    let mut l = Dense::zeros(n * b);
    for i in 0..n {
        for j in 0..=i {
            let block = gathered.get(&(i, j)).ok_or_else(|| {
                BenchError::Failed(format!("L block ({i},{j}) never reached rank 0"))
            })?;
            l.set_block(i, j, b, block);
        }
    }
    Ok(l)
}

/// `‖A − L·Lᵀ‖_max / ‖A‖_max`.
pub fn residual(a: &Dense, l: &Dense) -> f64 {
    l.matmul_transposed(l).max_abs_diff(a) / a.max_abs()
}

/// Largest entry difference between two factors, block by block.
pub fn max_block_diff(x: &Dense, y: &Dense) -> f64 {
    x.max_abs_diff(y)
}
