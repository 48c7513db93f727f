use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_dest, check_size, Direction, MessageTag, Probe, Rank, TransferHandle, Transport};
use crate::error::{Error, Result};

/// Per-message delivery delay, in fabric ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayModel {
    Zero,
    Fixed(u64),
    /// Uniform in `[0, max]`.
    Uniform { max: u64 },
}

/// One line of the fabric's delivery schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub source: Rank,
    pub dest: Rank,
    pub tag: MessageTag,
    pub len: usize,
    pub sent_at: u64,
    pub deliver_at: u64,
}

struct Packet {
    bytes: Bytes,
    deliver_at: u64,
    send_id: u64,
}

struct Fabric {
    clock: u64,
    stamp: u64,
    rng: ChaCha8Rng,
    delay: DelayModel,
    inbox: Vec<BTreeMap<(Rank, MessageTag), VecDeque<Packet>>>,
    channel_tail: HashMap<(Rank, Rank, MessageTag), u64>,
    sends: HashMap<u64, u64>,
    recvs: HashMap<u64, Vec<u8>>,
    next_id: u64,
    log: Vec<DeliveryRecord>,
}

impl Fabric {
    fn draw_delay(&mut self) -> u64 {
        match self.delay {
            DelayModel::Zero => 0,
            DelayModel::Fixed(d) => d,
            DelayModel::Uniform { max } => self.rng.random_range(0..=max),
        }
    }

    fn head(&self, dest: Rank, source: Option<Rank>, tag: Option<MessageTag>) -> Option<Probe> {
        self.inbox[dest]
            .iter()
            .filter(|((s, t), _)| source.is_none_or(|x| x == *s) && tag.is_none_or(|x| x == *t))
            .filter_map(|(&(s, t), queue)| queue.front().map(|p| (s, t, p)))
            .filter(|(_, _, p)| p.deliver_at <= self.clock)
            .min_by_key(|(_, _, p)| (p.deliver_at, p.send_id))
            .map(|(s, t, p)| Probe {
                source: s,
                tag: t,
                size: p.bytes.len(),
            })
    }
}

/// In-process multi-rank network with seeded random delays.
///
/// Time is a global tick counter advanced by [`Transport::tick`] (each
/// communicator progress pass ticks once) or by [`LoopbackFabric::advance`].
/// A message sent at tick `t` with drawn delay `d` becomes deliverable at
/// `max(t + d, tail)` where `tail` is the delivery tick of the previous
/// message on the same channel, so per-channel FIFO holds whatever the draw.
#[derive(Clone)]
pub struct LoopbackFabric {
    shared: Arc<Mutex<Fabric>>,
    n_ranks: usize,
}

impl LoopbackFabric {
    pub fn new(n_ranks: usize, delay: DelayModel, seed: u64) -> LoopbackFabric {
        assert!(n_ranks >= 1, "loopback fabric needs at least one rank");
        let fabric = Fabric {
            clock: 0,
            stamp: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            delay,
            inbox: (0..n_ranks).map(|_| BTreeMap::new()).collect(),
            channel_tail: HashMap::new(),
            sends: HashMap::new(),
            recvs: HashMap::new(),
            next_id: 0,
            log: Vec::new(),
        };
        LoopbackFabric {
            shared: Arc::new(Mutex::new(fabric)),
            n_ranks,
        }
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn endpoint(&self, rank: Rank) -> LoopbackTransport {
        assert!(rank < self.n_ranks, "rank {rank} out of range");
        LoopbackTransport {
            fabric: self.clone(),
            rank,
        }
    }

    pub fn endpoints(&self) -> Vec<LoopbackTransport> {
        (0..self.n_ranks).map(|r| self.endpoint(r)).collect()
    }

    fn lock(&self) -> MutexGuard<'_, Fabric> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn now(&self) -> u64 {
        self.lock().clock
    }

    pub fn advance(&self, ticks: u64) {
        self.lock().clock += ticks;
    }

    /// Next value of the global event counter.
    pub fn stamp(&self) -> u64 {
        let mut fabric = self.lock();
        fabric.stamp += 1;
        fabric.stamp
    }

    /// Messages sent but not yet received, deliverable or not.
    pub fn in_flight(&self) -> usize {
        self.lock()
            .inbox
            .iter()
            .flat_map(|m| m.values())
            .map(VecDeque::len)
            .sum()
    }

    /// Snapshot of every undelivered message as `(source, dest, tag, bytes)`.
    pub fn pending(&self) -> Vec<(Rank, Rank, MessageTag, Bytes)> {
        let fabric = self.lock();
        let mut out = Vec::new();
        for (dest, inbox) in fabric.inbox.iter().enumerate() {
            for (&(source, tag), queue) in inbox {
                out.extend(queue.iter().map(|p| (source, dest, tag, p.bytes.clone())));
            }
        }
        out
    }

    pub fn delivery_log(&self) -> Vec<DeliveryRecord> {
        self.lock().log.clone()
    }
}

/// One rank's view of a [`LoopbackFabric`].
pub struct LoopbackTransport {
    fabric: LoopbackFabric,
    rank: Rank,
}

impl LoopbackTransport {
    pub fn fabric(&self) -> &LoopbackFabric {
        &self.fabric
    }
}

impl Transport for LoopbackTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.fabric.n_ranks
    }

    fn isend(&mut self, dest: Rank, tag: MessageTag, bytes: Bytes) -> Result<TransferHandle> {
        check_dest(dest, self.fabric.n_ranks)?;
        check_size(bytes.len())?;
        let mut fabric = self.fabric.lock();
        let delay = fabric.draw_delay();
        let key = (self.rank, dest, tag);
        let earliest = fabric.clock + delay;
        let deliver_at = earliest.max(fabric.channel_tail.get(&key).copied().unwrap_or(0));
        fabric.channel_tail.insert(key, deliver_at);
        let id = fabric.next_id;
        fabric.next_id += 1;
        let record = DeliveryRecord {
            source: self.rank,
            dest,
            tag,
            len: bytes.len(),
            sent_at: fabric.clock,
            deliver_at,
        };
        fabric.log.push(record);
        fabric.sends.insert(id, deliver_at);
        fabric.inbox[dest]
            .entry((self.rank, tag))
            .or_default()
            .push_back(Packet {
                bytes,
                deliver_at,
                send_id: id,
            });
        Ok(TransferHandle {
            id,
            direction: Direction::Send,
        })
    }

    fn probe(&mut self, source: Option<Rank>, tag: Option<MessageTag>) -> Result<Option<Probe>> {
        Ok(self.fabric.lock().head(self.rank, source, tag))
    }

    fn irecv(&mut self, source: Rank, tag: MessageTag, mut buf: Vec<u8>) -> Result<TransferHandle> {
        check_dest(source, self.fabric.n_ranks)?;
        let mut fabric = self.fabric.lock();
        let now = fabric.clock;
        let queue = fabric.inbox[self.rank]
            .get_mut(&(source, tag))
            .filter(|q| q.front().is_some_and(|p| p.deliver_at <= now))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no deliverable {tag:?} message from {source}"))
            })?;
        let size = queue.front().map(|p| p.bytes.len()).unwrap_or(0);
        if size != buf.len() {
            return Err(Error::InvalidArgument(format!(
                "receive buffer of {} bytes for a {size} byte message",
                buf.len()
            )));
        }
        let packet = queue.pop_front().expect("checked non-empty");
        buf.copy_from_slice(&packet.bytes);
        let id = fabric.next_id;
        fabric.next_id += 1;
        fabric.recvs.insert(id, buf);
        Ok(TransferHandle {
            id,
            direction: Direction::Recv,
        })
    }

    fn test(&mut self, handle: &TransferHandle) -> Result<bool> {
        let fabric = self.fabric.lock();
        match handle.direction {
            Direction::Send => Ok(fabric
                .sends
                .get(&handle.id)
                .is_none_or(|&at| at <= fabric.clock)),
            Direction::Recv => Ok(fabric.recvs.contains_key(&handle.id)),
        }
    }

    fn take_recv(&mut self, handle: TransferHandle) -> Result<Vec<u8>> {
        let mut fabric = self.fabric.lock();
        fabric
            .recvs
            .remove(&handle.id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown receive {}", handle.id)))
    }

    fn tick(&mut self) {
        let mut fabric = self.fabric.lock();
        fabric.clock += 1;
        // Finished sends are never tested again once the communicator retires
        // them, but handles tested early stay until done.
        let clock = fabric.clock;
        if fabric.sends.len() > 4096 {
            fabric.sends.retain(|_, at| *at > clock);
        }
    }

    fn event_stamp(&self) -> Option<u64> {
        Some(self.fabric.stamp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(t: &mut LoopbackTransport) -> Vec<(Rank, MessageTag, Vec<u8>)> {
        let mut out = Vec::new();
        while let Some(p) = t.probe(None, None).unwrap() {
            let h = t.irecv(p.source, p.tag, vec![0; p.size]).unwrap();
            assert!(t.test(&h).unwrap());
            out.push((p.source, p.tag, t.take_recv(h).unwrap()));
        }
        out
    }

    #[test]
    fn idle_network_probes_none() {
        let fabric = LoopbackFabric::new(2, DelayModel::Zero, 0);
        let mut t = fabric.endpoint(1);
        assert_eq!(t.probe(None, None).unwrap(), None);
    }

    #[test]
    fn zero_byte_self_message() {
        let fabric = LoopbackFabric::new(1, DelayModel::Zero, 0);
        let mut t = fabric.endpoint(0);
        let h = t.isend(0, MessageTag::Regular, Bytes::new()).unwrap();
        assert!(t.test(&h).unwrap());
        let probe = t.probe(None, None).unwrap().unwrap();
        assert_eq!(
            probe,
            Probe {
                source: 0,
                tag: MessageTag::Regular,
                size: 0
            }
        );
        assert_eq!(drain(&mut t), vec![(0, MessageTag::Regular, vec![])]);
    }

    #[test]
    fn probe_reports_source_tag_size_and_is_idempotent() {
        let fabric = LoopbackFabric::new(3, DelayModel::Zero, 0);
        let mut from = fabric.endpoint(2);
        let mut to = fabric.endpoint(0);
        from.isend(0, MessageTag::Regular, Bytes::from(vec![7u8; 24]))
            .unwrap();
        let expect = Some(Probe {
            source: 2,
            tag: MessageTag::Regular,
            size: 24,
        });
        assert_eq!(to.probe(None, None).unwrap(), expect);
        assert_eq!(to.probe(None, None).unwrap(), expect);
        assert_eq!(to.probe(Some(1), None).unwrap(), None);
        assert_eq!(to.probe(None, Some(MessageTag::LargeBody)).unwrap(), None);
    }

    #[test]
    fn fixed_delay_holds_message_back() {
        let fabric = LoopbackFabric::new(2, DelayModel::Fixed(3), 0);
        let mut a = fabric.endpoint(0);
        let mut b = fabric.endpoint(1);
        let h = a.isend(1, MessageTag::Regular, Bytes::from_static(b"hi")).unwrap();
        for _ in 0..3 {
            assert!(!a.test(&h).unwrap());
            assert_eq!(b.probe(None, None).unwrap(), None);
            a.tick();
        }
        assert!(a.test(&h).unwrap());
        assert_eq!(drain(&mut b), vec![(0, MessageTag::Regular, b"hi".to_vec())]);
    }

    #[test]
    fn fifo_per_channel() {
        let fabric = LoopbackFabric::new(2, DelayModel::Zero, 0);
        let mut a = fabric.endpoint(0);
        let mut b = fabric.endpoint(1);
        a.isend(1, MessageTag::Regular, Bytes::from_static(b"one")).unwrap();
        a.isend(1, MessageTag::Regular, Bytes::from_static(b"two")).unwrap();
        let got: Vec<_> = drain(&mut b).into_iter().map(|m| m.2).collect();
        assert_eq!(got, vec![b"one".to_vec(), b"two".to_vec()]);
    }

    #[test]
    fn size_mismatch_is_invalid() {
        let fabric = LoopbackFabric::new(1, DelayModel::Zero, 0);
        let mut t = fabric.endpoint(0);
        t.isend(0, MessageTag::Regular, Bytes::from_static(b"abc")).unwrap();
        assert!(matches!(
            t.irecv(0, MessageTag::Regular, vec![0; 2]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            t.isend(1, MessageTag::Regular, Bytes::new()),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn schedule(seed: u64) -> Vec<DeliveryRecord> {
        let fabric = LoopbackFabric::new(3, DelayModel::Uniform { max: 50 }, seed);
        let mut eps = fabric.endpoints();
        for i in 0..60usize {
            let src = i % 3;
            eps[src]
                .isend((i * 7) % 3, MessageTag::Regular, Bytes::from(vec![i as u8]))
                .unwrap();
            eps[src].tick();
        }
        fabric.delivery_log()
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        assert_eq!(schedule(42), schedule(42));
        assert_ne!(schedule(42), schedule(43));
    }

    #[test]
    fn random_delays_deliver_everything_in_channel_order() {
        let n = 4;
        let fabric = LoopbackFabric::new(n, DelayModel::Uniform { max: 100 }, 7);
        let mut eps = fabric.endpoints();
        let tags = [MessageTag::Regular, MessageTag::LargeHeader, MessageTag::LargeBody];
        let mut sent: HashMap<(Rank, Rank, MessageTag), Vec<u32>> = HashMap::new();
        for i in 0..1000u32 {
            let src = (i as usize * 31) % n;
            let dst = (i as usize * 17 + 3) % n;
            let tag = tags[(i % 3) as usize];
            eps[src]
                .isend(dst, tag, Bytes::from(i.to_le_bytes().to_vec()))
                .unwrap();
            sent.entry((src, dst, tag)).or_default().push(i);
            if i % 5 == 0 {
                eps[0].tick();
            }
        }
        let mut got: HashMap<(Rank, Rank, MessageTag), Vec<u32>> = HashMap::new();
        let mut total = 0;
        for _ in 0..500 {
            for (dst, ep) in eps.iter_mut().enumerate() {
                for (src, tag, bytes) in drain(ep) {
                    let v = u32::from_le_bytes(bytes.try_into().unwrap());
                    got.entry((src, dst, tag)).or_default().push(v);
                    total += 1;
                }
            }
            eps[0].tick();
        }
        assert_eq!(total, 1000);
        assert_eq!(got, sent);
        assert_eq!(fabric.in_flight(), 0);
    }
}
