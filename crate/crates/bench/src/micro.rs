//! Scheduling overhead benchmarks on spin tasks.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ptg_runtime::{Taskflow, ThreadPool};

use crate::error::{BenchError, Result};
use crate::spin::spin_for;

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRecord {
    pub n_threads: usize,
    pub n_tasks: usize,
    pub spin: Duration,
    pub run_time: Duration,
    /// Whether seeding the tasks was inside the timed region.
    pub insertion_timed: bool,
}

impl EfficiencyRecord {
    /// Ideal time over measured time: `spin × n_tasks / n_threads / run_time`.
    pub fn efficiency(&self) -> f64 {
        let ideal = self.spin.as_secs_f64() * self.n_tasks as f64 / self.n_threads as f64;
        ideal / self.run_time.as_secs_f64()
    }
}

/// `n_tasks` independent tasks of `spin` each, assigned round-robin.
pub fn nodeps(
    n_threads: usize,
    n_tasks: usize,
    spin: Duration,
    insertion_timed: bool,
) -> Result<EfficiencyRecord> {
    let pool = ThreadPool::new(n_threads, None)?;
    let tf = Taskflow::<usize>::new(&pool);
    let done = Arc::new(AtomicU64::new(0));
    let d = Arc::clone(&done);
    tf.set_mapping(move |&k| k % n_threads).set_task(move |_| {
        spin_for(spin);
        d.fetch_add(1, Ordering::Relaxed);
    });
    let run_time = if insertion_timed {
        let start = Instant::now();
        pool.start()?;
        (0..n_tasks).for_each(|k| tf.fulfill_promise(k));
        pool.join()?;
        start.elapsed()
    } else {
        (0..n_tasks).for_each(|k| tf.fulfill_promise(k));
        let start = Instant::now();
        pool.join()?;
        start.elapsed()
    };
    let ran = done.load(Ordering::SeqCst) as usize;
    if ran != n_tasks {
        return Err(BenchError::Failed(format!("{ran} of {n_tasks} tasks ran")));
    }
    Ok(EfficiencyRecord {
        n_threads,
        n_tasks,
        spin,
        run_time,
        insertion_timed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub nrows: usize,
    pub ncols: usize,
    pub ndeps: usize,
}

impl GridShape {
    pub fn validate(&self) -> Result<()> {
        if self.nrows == 0 || self.ncols == 0 {
            return Err(BenchError::Config("the grid needs at least one row and column".into()));
        }
        if self.ndeps == 0 || self.ndeps > self.nrows {
            return Err(BenchError::Config(format!(
                "ndeps must be in 1..={}, got {}",
                self.nrows, self.ndeps
            )));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.nrows * self.ncols
    }

    /// Tasks of column `j - 1` that task `(i, j)` waits on.
    pub fn predecessors(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.nrows;
        (0..if j == 0 { 0 } else { self.ndeps }).map(move |k| ((i + n - k) % n, j - 1))
    }
}

/// Start and end stamps of each grid task on one logical clock.
#[derive(Clone, Debug, Default)]
pub struct GridTrace {
    pub start: Vec<u64>,
    pub end: Vec<u64>,
    pub runs: Vec<u32>,
}

/// `nrows × ncols` grid where task `(i, j)` fulfills `((i + k) mod nrows, j + 1)`
/// for `k < ndeps`. Checks that every task ran once and after all of its
/// predecessors.
pub fn deps(
    n_threads: usize,
    shape: GridShape,
    spin: Duration,
) -> Result<(EfficiencyRecord, GridTrace)> {
    shape.validate()?;
    let GridShape {
        nrows,
        ncols,
        ndeps,
    } = shape;
    let n_tasks = shape.n_tasks();
    let pool = ThreadPool::new(n_threads, None)?;
    let tf = Taskflow::<(u32, u32)>::new(&pool);
    let clock = Arc::new(AtomicU64::new(0));
    let stamps: Arc<Vec<(AtomicU64, AtomicU64, AtomicU32)>> = Arc::new(
        (0..n_tasks)
            .map(|_| (AtomicU64::new(0), AtomicU64::new(0), AtomicU32::new(0)))
            .collect(),
    );
    let weak = tf.downgrade();
    let (c, st) = (Arc::clone(&clock), Arc::clone(&stamps));
    tf.set_indegree(move |&(_, j)| if j == 0 { 1 } else { ndeps })
        .set_mapping(move |&(i, _)| i as usize % n_threads)
        .set_task(move |(i, j)| {
            let slot = &st[i as usize * ncols + j as usize];
            slot.0.store(c.fetch_add(1, Ordering::SeqCst) + 1, Ordering::SeqCst);
            spin_for(spin);
            slot.1.store(c.fetch_add(1, Ordering::SeqCst) + 1, Ordering::SeqCst);
            slot.2.fetch_add(1, Ordering::SeqCst);
            if (j as usize) + 1 < ncols {
                for k in 0..ndeps {
                    weak.fulfill_promise((((i as usize + k) % nrows) as u32, j + 1));
                }
            }
        });
    (0..nrows).for_each(|i| tf.fulfill_promise((i as u32, 0)));
    let start = Instant::now();
    pool.join()?;
    let run_time = start.elapsed();

    let trace = GridTrace {
        start: stamps.iter().map(|s| s.0.load(Ordering::SeqCst)).collect(),
        end: stamps.iter().map(|s| s.1.load(Ordering::SeqCst)).collect(),
        runs: stamps.iter().map(|s| s.2.load(Ordering::SeqCst)).collect(),
    };
    check_grid(&shape, &trace)?;
    Ok((
        EfficiencyRecord {
            n_threads,
            n_tasks,
            spin,
            run_time,
            insertion_timed: false,
        },
        trace,
    ))
}

pub fn check_grid(shape: &GridShape, trace: &GridTrace) -> Result<()> {
    let idx = |i: usize, j: usize| i * shape.ncols + j;
    for i in 0..shape.nrows {
        for j in 0..shape.ncols {
            let t = idx(i, j);
            if trace.runs[t] != 1 {
                return Err(BenchError::Failed(format!(
                    "task ({i},{j}) ran {} times",
                    trace.runs[t]
                )));
            }
            for (pi, pj) in shape.predecessors(i, j) {
                if trace.start[t] <= trace.end[idx(pi, pj)] {
                    return Err(BenchError::Failed(format!(
                        "task ({i},{j}) started before ({pi},{pj}) ended"
                    )));
                }
            }
        }
    }
    Ok(())
}
