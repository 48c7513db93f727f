//! Deterministic simulation of a multi-rank job, for checking completion
//! detection.
//!
//! Every rank runs a real [`Communicator`] over a shared [`LoopbackFabric`]
//! with random per-message delays. The worker threads of a rank are replaced
//! by one simulated worker that runs tasks lasting a random number of steps;
//! a finished task sends a few user messages to random ranks, and each
//! received message queues a new task on its receiver. The whole job is
//! driven from the calling thread, so a run is a pure function of its seed.
//!
//! At the moment rank 0 broadcasts SHUTDOWN, an oracle that sees every rank
//! checks that the job really is over: all workers idle, no user message
//! queued, in flight or undelivered anywhere, and as many messages processed
//! as queued.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::peek_am_id;
use crate::comm::{ActiveMsg, CommConfig, Communicator, Direction, ProtocolEvent};
use crate::completion::{is_protocol_id, Counts, ProtocolMsg};
use crate::error::Result;
use crate::transport::{DelayModel, LoopbackFabric, Rank};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_ranks: usize,
    /// Total user messages the job may send.
    pub message_budget: usize,
    /// Per-message delay is uniform in `[0, max_delay]` fabric ticks.
    pub max_delay: u64,
    /// Task length is uniform in `[0, max_task_steps]` steps.
    pub max_task_steps: u32,
    /// Messages sent by one finished task, uniform in `[0, max_fanout]`.
    pub max_fanout: usize,
    /// Tasks queued before the job starts.
    pub seed_tasks: usize,
    /// Rounds (one progress pass per rank) before the run is declared stuck.
    pub pass_budget: u64,
}

impl SimConfig {
    /// Draws a configuration from `seed`: 1 to 8 ranks, up to 500 messages,
    /// delays up to 100 ticks.
    pub fn random(seed: u64) -> SimConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0f1);
        let n_ranks = rng.random_range(1..=8);
        SimConfig {
            seed,
            n_ranks,
            message_budget: rng.random_range(0..=500),
            max_delay: 100,
            max_task_steps: rng.random_range(0..=20),
            max_fanout: rng.random_range(1..=3),
            seed_tasks: rng.random_range(0..=n_ranks),
            pass_budget: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimOutcome {
    pub config: Option<SimConfig>,
    pub reached_shutdown: bool,
    /// Rounds until every rank had received SHUTDOWN and flushed.
    pub rounds: u64,
    pub user_messages: u64,
    pub request_rounds: u64,
    pub violations: Vec<String>,
}

impl SimOutcome {
    pub fn ok(&self) -> bool {
        self.reached_shutdown && self.violations.is_empty()
    }
}

impl fmt::Display for SimOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(c) = &self.config {
            write!(f, "seed={} ranks={} budget={} ", c.seed, c.n_ranks, c.message_budget)?;
        }
        write!(
            f,
            "shutdown={} rounds={} messages={} requests={} violations={}",
            self.reached_shutdown,
            self.rounds,
            self.user_messages,
            self.request_rounds,
            self.violations.len()
        )
    }
}

#[derive(Default)]
struct SimWorker {
    queue: VecDeque<u32>,
    current: Option<u32>,
}

impl SimWorker {
    fn idle(&self) -> bool {
        self.current.is_none() && self.queue.is_empty()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct SimRank {
    comm: Arc<Communicator>,
    am: ActiveMsg<u32>,
    worker: Arc<Mutex<SimWorker>>,
}

/// Runs one simulated job to completion or to the pass budget.
pub fn simulate(config: &SimConfig) -> Result<SimOutcome> {
    let n = config.n_ranks;
    let fabric = LoopbackFabric::new(
        n,
        DelayModel::Uniform {
            max: config.max_delay,
        },
        config.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ranks = Vec::with_capacity(n);
    for r in 0..n {
        let comm = Communicator::with_config(
            Box::new(fabric.endpoint(r)),
            CommConfig {
                signature_check: false,
                protocol_trace: true,
            },
        );
        let worker = Arc::new(Mutex::new(SimWorker::default()));
        let w = Arc::clone(&worker);
        let am = comm.make_active_msg(move |steps: u32| lock(&w).queue.push_back(steps))?;
        let w = Arc::clone(&worker);
        comm.set_idle_probe(Box::new(move || lock(&w).idle()));
        ranks.push(SimRank { comm, am, worker });
    }
    for _ in 0..config.seed_tasks {
        let r = rng.random_range(0..n);
        let steps = rng.random_range(0..=config.max_task_steps);
        lock(&ranks[r].worker).queue.push_back(steps);
    }
    for rank in &ranks {
        rank.comm.enable_completion();
    }

    let mut outcome = SimOutcome {
        config: Some(config.clone()),
        ..SimOutcome::default()
    };
    let mut budget = config.message_budget;
    let mut order: Vec<Rank> = (0..n).collect();
    let mut shutdown_round = None;
    let mut shutdown_counts: Option<Vec<Counts>> = None;

    while outcome.rounds < config.pass_budget {
        outcome.rounds += 1;
        order.shuffle(&mut rng);
        for &r in &order {
            let rank = &ranks[r];
            // One worker step, skipped at random to vary the interleaving.
            if !rank.comm.is_shutdown() && rng.random_bool(0.8) {
                let finished = {
                    let mut w = lock(&rank.worker);
                    match w.current.as_mut() {
                        Some(0) => {
                            w.current = None;
                            true
                        }
                        Some(left) => {
                            *left -= 1;
                            false
                        }
                        None => {
                            w.current = w.queue.pop_front();
                            false
                        }
                    }
                };
                if finished {
                    let fanout = rng.random_range(0..=config.max_fanout).min(budget);
                    budget -= fanout;
                    for _ in 0..fanout {
                        let dest = rng.random_range(0..n);
                        let steps = rng.random_range(0..=config.max_task_steps);
                        rank.am.send(dest, &steps)?;
                        outcome.user_messages += 1;
                    }
                }
            }

            let was_sent = r == 0 && rank.comm.shutdown_sent();
            rank.comm.progress()?;
            if r == 0 && !was_sent && rank.comm.shutdown_sent() {
                shutdown_round = Some(outcome.rounds);
                outcome
                    .violations
                    .extend(oracle(&fabric, &ranks));
                shutdown_counts = Some(ranks.iter().map(|k| k.comm.counts()).collect());
            }
        }
        if ranks.iter().all(|k| k.comm.is_finished()) {
            outcome.reached_shutdown = true;
            break;
        }
    }

    if outcome.reached_shutdown {
        let counts: Vec<Counts> = ranks.iter().map(|k| k.comm.counts()).collect();
        if shutdown_counts.as_ref() != Some(&counts) {
            outcome
                .violations
                .push("user message counters moved after SHUTDOWN".into());
        }
        if fabric.in_flight() != 0 {
            outcome
                .violations
                .push(format!("{} messages left in the fabric", fabric.in_flight()));
        }
        let logs: Vec<Vec<ProtocolEvent>> = ranks.iter().map(|k| k.comm.protocol_log()).collect();
        outcome.violations.extend(check_traces(&logs));
        outcome.request_rounds = logs[0]
            .iter()
            .filter_map(|e| match e.msg {
                ProtocolMsg::Request { round, .. } if e.direction == Direction::Sent => Some(round),
                _ => None,
            })
            .max()
            .unwrap_or(0);
    }
    log::debug!("{outcome} shutdown_round={shutdown_round:?}");
    for rank in &ranks {
        rank.comm.release_handlers();
    }
    Ok(outcome)
}

/// Omniscient check of global completion.
fn oracle(fabric: &LoopbackFabric, ranks: &[SimRank]) -> Vec<String> {
    let mut violations = Vec::new();
    for (r, rank) in ranks.iter().enumerate() {
        if !lock(&rank.worker).idle() {
            violations.push(format!("SHUTDOWN sent while rank {r} was busy"));
        }
        if rank.comm.ready_frames() != 0 {
            violations.push(format!("SHUTDOWN sent with user messages queued on rank {r}"));
        }
    }
    let user_in_fabric = fabric
        .pending()
        .iter()
        .filter(|(_, _, _, bytes)| peek_am_id(bytes).is_ok_and(|id| !is_protocol_id(id)))
        .count();
    if user_in_fabric != 0 {
        violations.push(format!(
            "SHUTDOWN sent with {user_in_fabric} user messages in flight"
        ));
    }
    let (q, p) = ranks.iter().fold((0, 0), |(q, p), rank| {
        let c = rank.comm.counts();
        (q + c.queued, p + c.processed)
    });
    if q != p {
        violations.push(format!("SHUTDOWN sent with {q} queued but {p} processed"));
    }
    violations
}

/// Checks the protocol logs of a finished run: for the round that ended the
/// job, every rank's counters when it confirmed equal the counts rank 0
/// requested it to confirm; and no rank sends anything after SHUTDOWN.
fn check_traces(logs: &[Vec<ProtocolEvent>]) -> Vec<String> {
    let mut violations = Vec::new();
    let final_round = logs[0]
        .iter()
        .filter_map(|e| match e.msg {
            ProtocolMsg::Request { round, .. } if e.direction == Direction::Sent => Some(round),
            _ => None,
        })
        .max();
    let Some(final_round) = final_round else {
        return vec!["SHUTDOWN without any REQUEST".into()];
    };
    for (r, log) in logs.iter().enumerate() {
        let requested = log.iter().find_map(|e| match e.msg {
            ProtocolMsg::Request { counts, round }
                if round == final_round && e.direction == Direction::Received =>
            {
                Some(counts)
            }
            _ => None,
        });
        let confirmed = log.iter().find_map(|e| match e.msg {
            ProtocolMsg::Confirmation { round }
                if round == final_round && e.direction == Direction::Sent =>
            {
                Some(e.counts)
            }
            _ => None,
        });
        match (requested, confirmed) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => violations.push(format!(
                "rank {r}: round {final_round} requested {a:?}, confirmed at {b:?}"
            )),
        }
        if let Some(pos) = log.iter().position(|e| {
            e.direction == Direction::Received && matches!(e.msg, ProtocolMsg::Shutdown)
        }) {
            if log[pos + 1..].iter().any(|e| e.direction == Direction::Sent) {
                violations.push(format!("rank {r} sent protocol messages after SHUTDOWN"));
            }
        } else {
            violations.push(format!("rank {r} never received SHUTDOWN"));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rank_empty_job_terminates() {
        let config = SimConfig {
            seed: 1,
            n_ranks: 1,
            message_budget: 0,
            max_delay: 0,
            max_task_steps: 0,
            max_fanout: 0,
            seed_tasks: 0,
            pass_budget: 1000,
        };
        let outcome = simulate(&config).unwrap();
        assert!(outcome.ok(), "{outcome} {:?}", outcome.violations);
        assert_eq!(outcome.request_rounds, 1);
    }

    #[test]
    fn two_ranks_one_message() {
        let config = SimConfig {
            seed: 2,
            n_ranks: 2,
            message_budget: 1,
            max_delay: 50,
            max_task_steps: 3,
            max_fanout: 1,
            seed_tasks: 1,
            pass_budget: 100_000,
        };
        let outcome = simulate(&config).unwrap();
        assert!(outcome.ok(), "{outcome} {:?}", outcome.violations);
    }

    #[test]
    fn runs_are_deterministic() {
        let config = SimConfig::random(99);
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(
            (a.rounds, a.user_messages, a.request_rounds),
            (b.rounds, b.user_messages, b.request_rounds)
        );
    }

    #[test]
    fn random_schedules_are_safe() {
        for seed in 0..40 {
            let outcome = simulate(&SimConfig::random(seed)).unwrap();
            assert!(outcome.ok(), "{outcome} {:?}", outcome.violations);
        }
    }
}
