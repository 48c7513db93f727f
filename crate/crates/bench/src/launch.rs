//! Starting one communicator per rank.
//!
//! Loopback runs every rank in this process, one thread each. TCP runs the
//! single rank named on the command line; the other ranks are separate
//! processes started with the same rank table.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use ptg_runtime::transport::{DelayModel, LoopbackFabric, TcpTransport};
use ptg_runtime::{Communicator, Rank};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug)]
pub enum Launch {
    Loopback { n_ranks: usize, delay: DelayModel, seed: u64 },
    Tcp { rank: Rank, table: Vec<SocketAddr> },
}

impl Launch {
    pub fn loopback(n_ranks: usize) -> Launch {
        Launch::Loopback {
            n_ranks,
            delay: DelayModel::Zero,
            seed: 0,
        }
    }

    pub fn n_ranks(&self) -> usize {
        match self {
            Launch::Loopback { n_ranks, .. } => *n_ranks,
            Launch::Tcp { table, .. } => table.len(),
        }
    }

    /// Runs `body` once per local rank and returns the results in rank order.
    pub fn run<T: Send>(
        &self,
        body: impl Fn(Arc<Communicator>) -> Result<T> + Sync,
    ) -> Result<Vec<(Rank, T)>> {
        match self {
            Launch::Loopback {
                n_ranks,
                delay,
                seed,
            } => {
                if *n_ranks == 0 {
                    return Err(BenchError::Config("at least one rank is needed".into()));
                }
                let fabric = LoopbackFabric::new(*n_ranks, *delay, *seed);
                thread::scope(|s| {
                    let handles: Vec<_> = (0..*n_ranks)
                        .map(|r| {
                            let comm = Communicator::new(Box::new(fabric.endpoint(r)));
                            let body = &body;
                            thread::Builder::new()
                                .name(format!("rank-{r}"))
                                .spawn_scoped(s, move || body(comm).map(|t| (r, t)))
                        })
                        .collect::<std::io::Result<_>>()?;
                    handles
                        .into_iter()
                        .map(|h| {
                            h.join()
                                .unwrap_or_else(|_| Err(BenchError::Failed("rank panicked".into())))
                        })
                        .collect()
                })
            }
            Launch::Tcp { rank, table } => {
                let transport = TcpTransport::connect(*rank, table)?;
                let comm = Communicator::new(Box::new(transport));
                Ok(vec![(*rank, body(comm)?)])
            }
        }
    }
}
