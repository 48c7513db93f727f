//! Distributed completion detection by message counting.
//!
//! Every rank keeps two monotone counters of *user* active messages: how many
//! it has queued for sending and how many it has processed. Protocol messages
//! are never counted. The exchange is:
//!
//! 1. Whenever a rank is idle and its `(queued, processed)` pair differs from
//!    the last one it reported, it sends `COUNT(rank, queued, processed)` to
//!    rank 0.
//! 2. Rank 0 keeps the largest pair received from each rank. Once every rank
//!    has reported, if the sums of queued and processed agree and that sum
//!    differs from the one that triggered the previous round, it bumps the
//!    round number and sends each rank `REQUEST(queued_r, processed_r, round)`.
//! 3. A rank answers only the newest request it has seen: if its counters
//!    still equal the values in the request, it sends `CONFIRMATION(round)`;
//!    otherwise it stays silent and step 1 will report the new counts.
//! 4. When every rank has confirmed the current round, rank 0 sends
//!    `SHUTDOWN` to all ranks.
//! 5. A rank that receives `SHUTDOWN` stops.
//!
//! Why this is safe: each rank's counters are equal at its COUNT and at its
//! CONFIRMATION, and rank 0's REQUEST falls strictly between the two on every
//! rank. Counters are monotone, so at that instant all counters had exactly
//! the reported values and no rank could have become busy in between. With
//! processing always strictly after queueing, equal sums then mean no message
//! was in flight.
//!
//! The state machines here are transport-agnostic; [`crate::comm`] wires them
//! to frames.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::codec::{Payload, Reader};
use crate::error::{Error, Result};
use crate::transport::Rank;

/// First id of the reserved protocol range. User ids must stay below it.
pub const PROTOCOL_ID_BASE: u32 = u32::MAX - 3;
pub const COUNT_ID: u32 = PROTOCOL_ID_BASE;
pub const REQUEST_ID: u32 = PROTOCOL_ID_BASE + 1;
pub const CONFIRMATION_ID: u32 = PROTOCOL_ID_BASE + 2;
pub const SHUTDOWN_ID: u32 = PROTOCOL_ID_BASE + 3;

pub fn is_protocol_id(id: u32) -> bool {
    id >= PROTOCOL_ID_BASE
}

/// A `(queued, processed)` snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Counts {
    pub queued: u64,
    pub processed: u64,
}

impl Counts {
    pub fn new(queued: u64, processed: u64) -> Counts {
        Counts { queued, processed }
    }

    fn max(self, other: Counts) -> Counts {
        Counts {
            queued: self.queued.max(other.queued),
            processed: self.processed.max(other.processed),
        }
    }
}

/// Per-rank monotone user-message counters.
#[derive(Debug, Default)]
pub struct CompletionCounters {
    queued: AtomicU64,
    processed: AtomicU64,
}

impl CompletionCounters {
    pub fn on_user_queued(&self) {
        self.queued.fetch_add(1, Ordering::SeqCst);
    }

    pub fn on_user_processed(&self) {
        self.processed.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> Counts {
        Counts {
            queued: self.queued.load(Ordering::SeqCst),
            processed: self.processed.load(Ordering::SeqCst),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolMsg {
    Count { rank: Rank, counts: Counts },
    Request { counts: Counts, round: u64 },
    Confirmation { round: u64 },
    Shutdown,
}

impl ProtocolMsg {
    pub fn am_id(&self) -> u32 {
        match self {
            ProtocolMsg::Count { .. } => COUNT_ID,
            ProtocolMsg::Request { .. } => REQUEST_ID,
            ProtocolMsg::Confirmation { .. } => CONFIRMATION_ID,
            ProtocolMsg::Shutdown => SHUTDOWN_ID,
        }
    }

    /// Complete frame bytes, in the same layout as user frames.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.am_id().to_le_bytes().to_vec();
        match *self {
            ProtocolMsg::Count { rank, counts } => {
                (rank as u64, counts.queued, counts.processed).encode(&mut out)
            }
            ProtocolMsg::Request { counts, round } => {
                (counts.queued, counts.processed, round).encode(&mut out)
            }
            ProtocolMsg::Confirmation { round } => round.encode(&mut out),
            ProtocolMsg::Shutdown => {}
        }
        out
    }

    pub fn decode(frame: &[u8]) -> Result<ProtocolMsg> {
        let mut reader = Reader::new(frame);
        let id: u32 = reader.read()?;
        let msg = match id {
            COUNT_ID => {
                let (rank, queued, processed) = <(u64, u64, u64)>::decode(&mut reader)?;
                ProtocolMsg::Count {
                    rank: rank as Rank,
                    counts: Counts::new(queued, processed),
                }
            }
            REQUEST_ID => {
                let (queued, processed, round) = <(u64, u64, u64)>::decode(&mut reader)?;
                ProtocolMsg::Request {
                    counts: Counts::new(queued, processed),
                    round,
                }
            }
            CONFIRMATION_ID => ProtocolMsg::Confirmation {
                round: reader.read()?,
            },
            SHUTDOWN_ID => ProtocolMsg::Shutdown,
            other => {
                return Err(Error::Protocol(format!("{other} is not a protocol message id")))
            }
        };
        reader.finish()?;
        Ok(msg)
    }
}

/// The part of the protocol every rank runs (steps 1, 3 and 5).
#[derive(Debug, Default)]
pub struct WorkerRankState {
    last_sent: Option<Counts>,
    latest_request: Option<(Counts, u64)>,
    answered_round: u64,
    shutdown: bool,
}

impl WorkerRankState {
    pub fn new() -> WorkerRankState {
        WorkerRankState::default()
    }

    /// Keeps only the request with the largest round.
    pub fn on_request(&mut self, counts: Counts, round: u64) {
        if self.latest_request.is_none_or(|(_, r)| round > r) {
            self.latest_request = Some((counts, round));
        }
    }

    pub fn on_shutdown(&mut self) {
        self.shutdown = true;
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown
    }

    pub fn last_sent(&self) -> Option<Counts> {
        self.last_sent
    }

    /// One monitoring step. `counts` must be read after `idle` was observed,
    /// so that when `idle` holds they are the counters at an idle instant.
    /// Returns the messages to send to rank 0.
    pub fn step(&mut self, rank: Rank, idle: bool, counts: Counts) -> Vec<ProtocolMsg> {
        let mut out = Vec::new();
        if self.shutdown {
            return out;
        }
        if idle && self.last_sent != Some(counts) {
            self.last_sent = Some(counts);
            out.push(ProtocolMsg::Count { rank, counts });
        }
        if let Some((requested, round)) = self.latest_request {
            if idle && round > self.answered_round {
                // Each round is judged once, at an idle instant; a mismatch is
                // answered by the COUNT above instead.
                self.answered_round = round;
                if requested == counts {
                    out.push(ProtocolMsg::Confirmation { round });
                }
            }
        }
        out
    }
}

/// Rank 0's side of the protocol (steps 2 and 4).
#[derive(Debug)]
pub struct Rank0State {
    best: Vec<Option<Counts>>,
    round: u64,
    last_sum: Option<(u64, u64)>,
    confirmed: Vec<bool>,
    shutdown_sent: bool,
}

impl Rank0State {
    pub fn new(n_ranks: usize) -> Rank0State {
        Rank0State {
            best: vec![None; n_ranks],
            round: 0,
            last_sum: None,
            confirmed: vec![false; n_ranks],
            shutdown_sent: false,
        }
    }

    pub fn on_count(&mut self, rank: Rank, counts: Counts) {
        let slot = &mut self.best[rank];
        *slot = Some(slot.map_or(counts, |c| c.max(counts)));
    }

    /// Confirmations for any round but the current one are stale.
    pub fn on_confirmation(&mut self, rank: Rank, round: u64) {
        if round == self.round && round > 0 {
            self.confirmed[rank] = true;
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn best_counts(&self) -> &[Option<Counts>] {
        &self.best
    }

    pub fn shutdown_sent(&self) -> bool {
        self.shutdown_sent
    }

    /// One observation step. Returns `(dest, msg)` pairs.
    pub fn step(&mut self) -> Vec<(Rank, ProtocolMsg)> {
        let n = self.best.len();
        if self.shutdown_sent {
            return Vec::new();
        }
        if self.round > 0 && self.confirmed.iter().all(|&c| c) {
            self.shutdown_sent = true;
            return (0..n).map(|r| (r, ProtocolMsg::Shutdown)).collect();
        }
        // Until every rank has reported once, a zero default could stand in
        // for a rank that has not been idle yet.
        let Some(best) = self.best.iter().copied().collect::<Option<Vec<Counts>>>() else {
            return Vec::new();
        };
        let sum = best.iter().fold((0u64, 0u64), |(q, p), c| {
            (q + c.queued, p + c.processed)
        });
        if sum.0 != sum.1 || Some(sum) == self.last_sum {
            return Vec::new();
        }
        self.last_sum = Some(sum);
        self.round += 1;
        self.confirmed.iter_mut().for_each(|c| *c = false);
        best.into_iter()
            .enumerate()
            .map(|(r, counts)| {
                (
                    r,
                    ProtocolMsg::Request {
                        counts,
                        round: self.round,
                    },
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_start_at_zero_and_count() {
        let c = CompletionCounters::default();
        assert_eq!(c.snapshot(), Counts::new(0, 0));
        for _ in 0..3 {
            c.on_user_queued();
        }
        c.on_user_processed();
        c.on_user_processed();
        assert_eq!(c.snapshot(), Counts::new(3, 2));
    }

    #[test]
    fn protocol_frames_round_trip() {
        let msgs = [
            ProtocolMsg::Count {
                rank: 3,
                counts: Counts::new(5, 6),
            },
            ProtocolMsg::Request {
                counts: Counts::new(1, 2),
                round: 9,
            },
            ProtocolMsg::Confirmation { round: 4 },
            ProtocolMsg::Shutdown,
        ];
        for msg in msgs {
            assert_eq!(ProtocolMsg::decode(&msg.encode()).unwrap(), msg);
            assert!(is_protocol_id(msg.am_id()));
        }
        assert!(ProtocolMsg::decode(&0u32.to_le_bytes()).is_err());
    }

    #[test]
    fn worker_reports_only_changes_while_idle() {
        let mut w = WorkerRankState::new();
        assert_eq!(w.step(2, false, Counts::new(0, 0)), vec![]);
        // First idle observation always reports, even (0, 0).
        assert_eq!(
            w.step(2, true, Counts::new(0, 0)),
            vec![ProtocolMsg::Count {
                rank: 2,
                counts: Counts::new(0, 0)
            }]
        );
        assert_eq!(w.step(2, true, Counts::new(0, 0)), vec![]);
        assert_eq!(
            w.step(2, true, Counts::new(5, 5)),
            vec![ProtocolMsg::Count {
                rank: 2,
                counts: Counts::new(5, 5)
            }]
        );
    }

    #[test]
    fn confirmation_requires_unchanged_counts() {
        let mut w = WorkerRankState::new();
        w.step(1, true, Counts::new(2, 1));
        w.on_request(Counts::new(2, 1), 1);
        // A user message is processed before the check.
        let out = w.step(1, true, Counts::new(2, 2));
        assert_eq!(
            out,
            vec![ProtocolMsg::Count {
                rank: 1,
                counts: Counts::new(2, 2)
            }]
        );
        // Round 1 is not reconsidered later.
        assert_eq!(w.step(1, true, Counts::new(2, 2)), vec![]);
        w.on_request(Counts::new(2, 2), 2);
        assert_eq!(
            w.step(1, true, Counts::new(2, 2)),
            vec![ProtocolMsg::Confirmation { round: 2 }]
        );
    }

    #[test]
    fn only_newest_request_is_answered() {
        let mut w = WorkerRankState::new();
        w.step(0, true, Counts::new(1, 1));
        w.on_request(Counts::new(1, 1), 3);
        w.on_request(Counts::new(0, 0), 2);
        assert_eq!(
            w.step(0, true, Counts::new(1, 1)),
            vec![ProtocolMsg::Confirmation { round: 3 }]
        );
    }

    #[test]
    fn shutdown_silences_worker() {
        let mut w = WorkerRankState::new();
        w.on_shutdown();
        w.on_shutdown();
        assert!(w.is_shutdown());
        assert_eq!(w.step(0, true, Counts::new(1, 0)), vec![]);
    }

    #[test]
    fn single_rank_empty_program_terminates() {
        let mut w = WorkerRankState::new();
        let mut r0 = Rank0State::new(1);
        let counts = Counts::new(0, 0);
        for msg in w.step(0, true, counts) {
            if let ProtocolMsg::Count { rank, counts } = msg {
                r0.on_count(rank, counts);
            }
        }
        let out = r0.step();
        assert_eq!(out, vec![(0, ProtocolMsg::Request { counts, round: 1 })]);
        w.on_request(counts, 1);
        assert_eq!(w.step(0, true, counts), vec![ProtocolMsg::Confirmation { round: 1 }]);
        r0.on_confirmation(0, 1);
        assert_eq!(r0.step(), vec![(0, ProtocolMsg::Shutdown)]);
        assert!(r0.shutdown_sent());
        assert_eq!(r0.step(), vec![]);
    }

    #[test]
    fn rank0_waits_for_every_rank_and_balanced_sums() {
        let mut r0 = Rank0State::new(2);
        r0.on_count(0, Counts::new(1, 0));
        assert_eq!(r0.step(), vec![]);
        r0.on_count(1, Counts::new(0, 0));
        // Rank 1 has not processed rank 0's message yet.
        assert_eq!(r0.step(), vec![]);
        r0.on_count(1, Counts::new(0, 1));
        let out = r0.step();
        assert_eq!(out.len(), 2);
        assert_eq!(r0.round(), 1);
        // Same sum again: no second round.
        r0.on_count(1, Counts::new(0, 1));
        assert_eq!(r0.step(), vec![]);
    }

    #[test]
    fn best_counts_are_running_max() {
        let mut r0 = Rank0State::new(1);
        r0.on_count(0, Counts::new(4, 2));
        r0.on_count(0, Counts::new(3, 3));
        assert_eq!(r0.best_counts()[0], Some(Counts::new(4, 3)));
    }

    #[test]
    fn stale_confirmation_is_ignored() {
        let mut r0 = Rank0State::new(2);
        r0.on_count(0, Counts::new(1, 0));
        r0.on_count(1, Counts::new(0, 1));
        r0.step();
        assert_eq!(r0.round(), 1);
        r0.on_count(0, Counts::new(2, 0));
        r0.on_count(1, Counts::new(0, 2));
        r0.step();
        assert_eq!(r0.round(), 2);
        r0.on_confirmation(0, 1);
        r0.on_confirmation(1, 1);
        assert_eq!(r0.step(), vec![]);
        r0.on_confirmation(0, 2);
        r0.on_confirmation(1, 2);
        assert_eq!(r0.step().len(), 2);
    }
}
