//! Blocked `C = A·B` on a 2D block-cyclic distribution.
//!
//! Task `gemm(i, k, j)` runs on the owner of `C_ij` and adds `A_ik · B_kj`;
//! the products for one `C_ij` are chained in increasing `k`. At the start
//! every rank sends each of its `A` and `B` blocks, as large messages, to the
//! ranks that multiply with them. The finished `C` blocks are collected on
//! rank 0.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ptg_runtime::{Communicator, LargeActiveMsg, Rank, Taskflow, ThreadPool};

use crate::blocks::{self, Dense, RankGrid};
use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemmInput {
    /// `A` and `B` random.
    Random,
    /// `A = I`, `B` random.
    IdentityA,
}

#[derive(Clone, Debug)]
pub struct GemmConfig {
    pub matrix_size: usize,
    pub block_size: usize,
    pub n_threads: usize,
    pub seed: u64,
    pub input: GemmInput,
}

impl GemmConfig {
    pub fn n_blocks(&self) -> Result<usize> {
        if self.block_size == 0 || !self.matrix_size.is_multiple_of(self.block_size) {
            return Err(BenchError::Config(format!(
                "N = {} is not a multiple of the block size {}",
                self.matrix_size, self.block_size
            )));
        }
        Ok(self.matrix_size / self.block_size)
    }

    pub fn inputs(&self) -> (Dense, Dense) {
        let a = match self.input {
            GemmInput::Random => Dense::random(self.matrix_size, self.seed),
            GemmInput::IdentityA => Dense::identity(self.matrix_size),
        };
        (a, Dense::random(self.matrix_size, self.seed.wrapping_add(1)))
    }
}

#[derive(Clone, Debug)]
pub struct GemmRank {
    pub rank: Rank,
    pub run_time: Duration,
    pub tasks: usize,
    /// The assembled product, on rank 0.
    pub product: Option<Dense>,
}

/// `(i, k, j)`
type Key = (u32, u32, u32);

const A: u8 = 0;
const B: u8 = 1;
const C: u8 = 2;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct RankState {
    me: Rank,
    n: usize,
    grid: RankGrid,
    /// Operand blocks available here, local or received, keyed by
    /// `(matrix, row, col)`.
    operands: Mutex<HashMap<(u8, usize, usize), Arc<Vec<f64>>>>,
    c: HashMap<(usize, usize), Mutex<Vec<f64>>>,
    gathered: Mutex<HashMap<(usize, usize), Vec<f64>>>,
    tasks: Mutex<usize>,
}

impl RankState {
    /// Products that read operand block `(m, r, c)`.
    fn readers(&self, m: u8, r: usize, c: usize) -> Vec<Key> {
        let n = self.n as u32;
        let (r, c) = (r as u32, c as u32);
        if m == A {
            (0..n).map(|j| (r, c, j)).collect()
        } else {
            (0..n).map(|i| (i, r, c)).collect()
        }
    }

    fn task_rank(&self, (i, _, j): Key) -> Rank {
        self.grid.owner(i as usize, j as usize)
    }

    fn operand(&self, m: u8, r: u32, c: u32) -> Arc<Vec<f64>> {
        Arc::clone(&lock(&self.operands)[&(m, r as usize, c as usize)])
    }
}

pub fn run_rank(comm: Arc<Communicator>, config: &GemmConfig) -> Result<GemmRank> {
    let n = config.n_blocks()?;
    let b = config.block_size;
    let me = comm.rank();
    let grid = RankGrid::new(comm.n_ranks());
    let (a, bm) = config.inputs();
    let mine: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| grid.owner(i, j) == me)
        .collect();
    let mut operands = HashMap::new();
    for &(i, j) in &mine {
        operands.insert((A, i, j), Arc::new(a.block(i, j, b)));
        operands.insert((B, i, j), Arc::new(bm.block(i, j, b)));
    }
    drop((a, bm));
    let state = Arc::new(RankState {
        me,
        n,
        grid,
        operands: Mutex::new(operands),
        c: mine
            .iter()
            .map(|&ij| (ij, Mutex::new(vec![0.0; b * b])))
            .collect(),
        gathered: Mutex::new(HashMap::new()),
        tasks: Mutex::new(0),
    });

    let pool = ThreadPool::new(config.n_threads, Some(Arc::clone(&comm)))?;
    let tf = Taskflow::<Key>::named(&pool, "gemm");
    let weak = tf.downgrade();
    let st = Arc::clone(&state);
    let blocks_msg: LargeActiveMsg<(u8, u32, u32)> = comm.make_large_active_msg(
        |_: &(u8, u32, u32), len| vec![0; len],
        move |(m, r, c): (u8, u32, u32), body: Vec<u8>| {
            let data = blocks::from_bytes(&body);
            let (r, c) = (r as usize, c as usize);
            if m == C {
                lock(&st.gathered).insert((r, c), data);
                return;
            }
            lock(&st.operands).insert((m, r, c), Arc::new(data));
            for key in st.readers(m, r, c) {
                if st.task_rank(key) == st.me {
                    weak.fulfill_promise(key);
                }
            }
        },
        |_| {},
    )?;

    let n_threads = config.n_threads;
    let weak = tf.downgrade();
    let st = Arc::clone(&state);
    let to_root = blocks_msg.clone();
    tf.set_indegree(|&(_, k, _)| 2 + usize::from(k > 0))
        .set_mapping(move |&(i, _, j)| (i + j) as usize % n_threads)
        .set_priority(move |&(_, k, _)| (n - k as usize) as f64)
        .set_task(move |(i, k, j)| {
            let lhs = st.operand(A, i, k);
            let rhs = st.operand(B, k, j);
            let cell = &st.c[&(i as usize, j as usize)];
            blocks::gemm_acc(&mut lock(cell), &lhs, &rhs, b);
            *lock(&st.tasks) += 1;
            if (k as usize) + 1 < st.n {
                weak.fulfill_promise((i, k + 1, j));
            } else if st.me == 0 {
                lock(&st.gathered).insert((i as usize, j as usize), lock(cell).clone());
            } else {
                let bytes = blocks::to_bytes(&lock(cell));
                to_root.send(0, bytes, (C, i, j)).expect("send C block");
            }
        });

    for &(r, c) in &mine {
        for m in [A, B] {
            let readers = state.readers(m, r, c);
            let remote: BTreeSet<Rank> = readers
                .iter()
                .map(|&key| state.task_rank(key))
                .filter(|&rank| rank != me)
                .collect();
            let bytes = blocks::to_bytes(&state.operand(m, r as u32, c as u32));
            for rank in remote {
                blocks_msg.send(rank, bytes.clone(), (m, r as u32, c as u32))?;
            }
            for key in readers {
                if state.task_rank(key) == me {
                    tf.fulfill_promise(key);
                }
            }
        }
    }
    let start = Instant::now();
    pool.join()?;
    let run_time = start.elapsed();

    let product = if me == 0 {
        let gathered = lock(&state.gathered);
        let mut c = Dense::zeros(config.matrix_size);
        for i in 0..n {
            for j in 0..n {
                let block = gathered.get(&(i, j)).ok_or_else(|| {
                    BenchError::Failed(format!("C block ({i},{j}) never reached rank 0"))
                })?;
                c.set_block(i, j, b, block);
            }
        }
        Some(c)
    } else {
        None
    };
    let tasks = *lock(&state.tasks);
    Ok(GemmRank {
        rank: me,
        run_time,
        tasks,
        product,
    })
}
