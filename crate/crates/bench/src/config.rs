//! Command-line configuration and the dispatch to each benchmark.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};

use crate::blocks::Dense;
use crate::cholesky::{self, CholeskyConfig, TaskCounts};
use crate::error::{BenchError, Result};
use crate::gemm2d::{self, GemmConfig, GemmInput};
use crate::launch::Launch;
use crate::micro::{self, GridShape};
use crate::output::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Nodeps,
    Deps,
    Gemm2d,
    Cholesky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

#[derive(Clone, Debug, Parser)]
#[command(name = "ptg-bench", version, about = "Task runtime benchmarks")]
pub struct BenchConfig {
    #[arg(long, value_enum)]
    pub bench: BenchKind,
    /// Worker threads per rank.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Ranks, loopback transport only.
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,
    /// Spin time per task, in seconds.
    #[arg(long, default_value_t = 1e-4)]
    pub spin: f64,
    /// Task count for nodeps.
    #[arg(long, default_value_t = 1000)]
    pub tasks: usize,
    #[arg(long, default_value_t = 32)]
    pub nrows: usize,
    #[arg(long, default_value_t = 10)]
    pub ncols: usize,
    #[arg(long, default_value_t = 1)]
    pub ndeps: usize,
    /// Matrix size.
    #[arg(long = "N", default_value_t = 256)]
    pub matrix_size: usize,
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TransportKind::Loopback)]
    pub transport: TransportKind,
    /// Lines of `rank host:port`, TCP only.
    #[arg(long)]
    pub rank_table: Option<PathBuf>,
    /// This process's rank, TCP only.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Record one line per executed task (cholesky).
    #[arg(long)]
    pub trace: bool,
}

impl BenchConfig {
    pub fn spin_time(&self) -> Result<Duration> {
        Duration::try_from_secs_f64(self.spin)
            .map_err(|e| BenchError::Config(format!("spin time {}: {e}", self.spin)))
    }

    pub fn launch(&self) -> Result<Launch> {
        match self.transport {
            TransportKind::Loopback => Ok(Launch::loopback(self.ranks)),
            TransportKind::Tcp => {
                let path = self.rank_table.as_ref().ok_or_else(|| {
                    BenchError::Config("--transport tcp needs --rank-table".into())
                })?;
                let rank = self
                    .rank
                    .ok_or_else(|| BenchError::Config("--transport tcp needs --rank".into()))?;
                let table = ptg_runtime::transport::read_rank_table(path)?;
                Ok(Launch::Tcp { rank, table })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(BenchError::Config("--threads must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(BenchError::Config("--reps must be at least 1".into()));
        }
        let single_rank = matches!(self.bench, BenchKind::Nodeps | BenchKind::Deps);
        if single_rank && (self.ranks != 1 || self.transport != TransportKind::Loopback) {
            return Err(BenchError::Config(format!(
                "{:?} runs on a single rank",
                self.bench
            )));
        }
        Ok(())
    }
}

/// A table of results and, with tracing on, one line per executed task.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub table: Table,
    pub trace: Vec<String>,
}

fn secs(d: Duration) -> String {
    format!("{:.6}", d.as_secs_f64())
}

pub fn run(cfg: &BenchConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.bench {
        BenchKind::Nodeps => run_nodeps(cfg),
        BenchKind::Deps => run_deps(cfg),
        BenchKind::Gemm2d => run_gemm(cfg),
        BenchKind::Cholesky => run_cholesky(cfg),
    }
}

fn run_nodeps(cfg: &BenchConfig) -> Result<Report> {
    let spin = cfg.spin_time()?;
    let mut table = Table::new(&[
        "threads",
        "tasks",
        "spin_s",
        "insertion_timed",
        "rep",
        "run_s",
        "efficiency",
    ]);
    for rep in 0..cfg.reps {
        for timed in [false, true] {
            let r = micro::nodeps(cfg.threads, cfg.tasks, spin, timed)?;
            table.push(vec![
                r.n_threads.to_string(),
                r.n_tasks.to_string(),
                format!("{:e}", cfg.spin),
                u8::from(timed).to_string(),
                rep.to_string(),
                secs(r.run_time),
                format!("{:.4}", r.efficiency()),
            ]);
        }
    }
    Ok(Report {
        table,
        trace: Vec::new(),
    })
}

fn run_deps(cfg: &BenchConfig) -> Result<Report> {
    let spin = cfg.spin_time()?;
    let shape = GridShape {
        nrows: cfg.nrows,
        ncols: cfg.ncols,
        ndeps: cfg.ndeps,
    };
    let mut table = Table::new(&[
        "threads", "nrows", "ncols", "ndeps", "spin_s", "rep", "run_s", "efficiency",
    ]);
    for rep in 0..cfg.reps {
        let (r, _) = micro::deps(cfg.threads, shape, spin)?;
        table.push(vec![
            cfg.threads.to_string(),
            cfg.nrows.to_string(),
            cfg.ncols.to_string(),
            cfg.ndeps.to_string(),
            format!("{:e}", cfg.spin),
            rep.to_string(),
            secs(r.run_time),
            format!("{:.4}", r.efficiency()),
        ]);
    }
    Ok(Report {
        table,
        trace: Vec::new(),
    })
}

fn run_gemm(cfg: &BenchConfig) -> Result<Report> {
    let launch = cfg.launch()?;
    let config = GemmConfig {
        matrix_size: cfg.matrix_size,
        block_size: cfg.block_size,
        n_threads: cfg.threads,
        seed: cfg.seed,
        input: GemmInput::Random,
    };
    config.n_blocks()?;
    let tolerance = 1e-10 * cfg.matrix_size as f64;
    let mut table = Table::new(&[
        "rank", "ranks", "threads", "N", "b", "rep", "tasks", "run_s", "max_error",
    ]);
    for rep in 0..cfg.reps {
        for (rank, r) in launch.run(|comm| gemm2d::run_rank(comm, &config))? {
            let error = match &r.product {
                Some(c) => {
                    let (a, b) = config.inputs();
                    let error = c.max_abs_diff(&a.matmul(&b));
                    if error > tolerance {
                        return Err(BenchError::Failed(format!(
                            "product off by {error:e}, tolerance {tolerance:e}"
                        )));
                    }
                    format!("{error:e}")
                }
                None => "-".into(),
            };
            table.push(vec![
                rank.to_string(),
                launch.n_ranks().to_string(),
                cfg.threads.to_string(),
                cfg.matrix_size.to_string(),
                cfg.block_size.to_string(),
                rep.to_string(),
                r.tasks.to_string(),
                secs(r.run_time),
                error,
            ]);
        }
    }
    Ok(Report {
        table,
        trace: Vec::new(),
    })
}

fn run_cholesky(cfg: &BenchConfig) -> Result<Report> {
    let launch = cfg.launch()?;
    let config = CholeskyConfig {
        matrix_size: cfg.matrix_size,
        block_size: cfg.block_size,
        n_threads: cfg.threads,
        seed: cfg.seed,
        trace: cfg.trace,
    };
    let n = config.n_blocks()?;
    let mut table = Table::new(&[
        "rank", "ranks", "threads", "N", "b", "rep", "potrf", "trsm", "gemm", "run_s", "residual",
    ]);
    let mut trace = Vec::new();
    for rep in 0..cfg.reps {
        let out = launch.run(|comm| cholesky::run_rank(comm, &config))?;
        if matches!(launch, Launch::Loopback { .. }) {
            let total = out.iter().fold(TaskCounts::default(), |c, (_, r)| c + r.counts);
            if total != TaskCounts::closed_form(n) {
                return Err(BenchError::Failed(format!(
                    "task counts {total:?}, expected {:?}",
                    TaskCounts::closed_form(n)
                )));
            }
        }
        for (rank, r) in out {
            let residual = match &r.factor {
                Some(l) => {
                    let a = Dense::random_spd(cfg.matrix_size, cfg.seed);
                    format!("{:e}", cholesky::residual(&a, l))
                }
                None => "-".into(),
            };
            trace.extend(r.trace.iter().map(|t| format!("{rank} {rep} {t}")));
            table.push(vec![
                rank.to_string(),
                launch.n_ranks().to_string(),
                cfg.threads.to_string(),
                cfg.matrix_size.to_string(),
                cfg.block_size.to_string(),
                rep.to_string(),
                r.counts.potrf.to_string(),
                r.counts.trsm.to_string(),
                r.counts.gemm.to_string(),
                secs(r.run_time),
                residual,
            ]);
        }
    }
    Ok(Report { table, trace })
}
