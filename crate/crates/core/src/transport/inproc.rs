//! In-process broadcast bus with injectable latency, drops and worker kills.
//!
//! Messages travel through the wire encoding so the simulator exercises the
//! same frames as the TCP transport. Delivery times are measured against the
//! bus clock, which is either wall time or a manual clock advanced by the
//! simulator. Each directed link delivers in send order.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode, encode, Endpoint};
use crate::error::{Error, Result};
use crate::protocol::ModelMessage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Latency {
    Fixed(f64),
    /// Uniform over `[lo, hi]` milliseconds.
    Range([f64; 2]),
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Fixed(0.0)
    }
}

/// Fault settings for one directed link; `None` endpoints match any worker.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkFault {
    #[serde(default)]
    pub from: Option<usize>,
    #[serde(default)]
    pub to: Option<usize>,
    #[serde(default)]
    pub latency_ms: Latency,
    #[serde(default)]
    pub drop_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kill {
    pub worker: usize,
    pub after_events: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    #[serde(default)]
    pub links: Vec<LinkFault>,
    #[serde(default)]
    pub kills: Vec<Kill>,
}

impl FaultPlan {
    pub fn reliable() -> Self {
        FaultPlan::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: FaultPlan = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for link in &self.links {
            if !(0.0..=1.0).contains(&link.drop_p) {
                return Err(Error::domain(format!("drop probability {} outside [0, 1]", link.drop_p)));
            }
            let ok = match link.latency_ms {
                Latency::Fixed(ms) => ms >= 0.0,
                Latency::Range([lo, hi]) => lo >= 0.0 && hi >= lo,
            };
            if !ok {
                return Err(Error::domain(format!("invalid latency {:?}", link.latency_ms)));
            }
        }
        Ok(())
    }

    /// The last matching link entry wins.
    fn link(&self, from: usize, to: usize) -> Option<&LinkFault> {
        self.links
            .iter()
            .rev()
            .find(|l| l.from.is_none_or(|f| f == from) && l.to.is_none_or(|t| t == to))
    }

    fn kill_after(&self, worker: usize) -> Option<u64> {
        self.kills
            .iter()
            .filter(|k| k.worker == worker)
            .map(|k| k.after_events)
            .min()
    }
}

enum Clock {
    Wall(Instant),
    Manual(f64),
}

struct Pending {
    deliver_at: f64,
    frame: Vec<u8>,
}

struct BusInner {
    plan: FaultPlan,
    rng: ChaCha8Rng,
    clock: Clock,
    loopback: bool,
    // queues[to][from]
    queues: Vec<Vec<VecDeque<Pending>>>,
    last_delivery: Vec<Vec<f64>>,
    alive: Vec<bool>,
    closed: Vec<bool>,
    events: Vec<u64>,
    min_broadcast: Option<f64>,
    sent: u64,
}

impl BusInner {
    fn now(&self) -> f64 {
        match self.clock {
            Clock::Wall(start) => start.elapsed().as_secs_f64() * 1e3,
            Clock::Manual(t) => t,
        }
    }
}

/// Shared in-process broadcast channel for `n` workers.
pub struct InProcBus {
    inner: Mutex<BusInner>,
}

impl InProcBus {
    fn build(n: usize, plan: FaultPlan, seed: u64, clock: Clock) -> Result<Arc<Self>> {
        plan.validate()?;
        Ok(Arc::new(InProcBus {
            inner: Mutex::new(BusInner {
                plan,
                rng: ChaCha8Rng::seed_from_u64(seed),
                clock,
                loopback: false,
                queues: (0..n).map(|_| (0..n).map(|_| VecDeque::new()).collect()).collect(),
                last_delivery: vec![vec![0.0; n]; n],
                alive: vec![true; n],
                closed: vec![false; n],
                events: vec![0; n],
                min_broadcast: None,
                sent: 0,
            }),
        }))
    }

    /// Bus on wall-clock time, for worker threads.
    pub fn new(n: usize, plan: FaultPlan, seed: u64) -> Result<Arc<Self>> {
        InProcBus::build(n, plan, seed, Clock::Wall(Instant::now()))
    }

    /// Bus whose clock only moves through [`InProcBus::set_time_ms`].
    pub fn simulated(n: usize, plan: FaultPlan, seed: u64) -> Result<Arc<Self>> {
        InProcBus::build(n, plan, seed, Clock::Manual(0.0))
    }

    /// Also deliver each broadcast back to its sender.
    pub fn set_loopback(&self, on: bool) {
        self.lock().loopback = on;
    }

    pub fn set_time_ms(&self, t: f64) {
        let mut inner = self.lock();
        if let Clock::Manual(now) = &mut inner.clock {
            *now = t;
        }
    }

    pub fn endpoint(self: &Arc<Self>, worker_id: usize) -> Result<InProcEndpoint> {
        if worker_id >= self.lock().alive.len() {
            return Err(Error::Transport(format!("no slot for worker {worker_id}")));
        }
        Ok(InProcEndpoint {
            bus: Arc::clone(self),
            worker_id,
        })
    }

    /// Messages queued toward live workers and not yet polled.
    pub fn in_flight(&self) -> usize {
        let inner = self.lock();
        inner
            .queues
            .iter()
            .enumerate()
            .filter(|(to, _)| inner.alive[*to])
            .map(|(_, q)| q.iter().map(VecDeque::len).sum::<usize>())
            .sum()
    }

    pub fn in_flight_to(&self, worker: usize) -> usize {
        self.lock().queues[worker].iter().map(VecDeque::len).sum()
    }

    /// Smallest bound carried by any broadcast so far.
    pub fn min_broadcast_bound(&self) -> Option<f64> {
        self.lock().min_broadcast
    }

    pub fn messages_sent(&self) -> u64 {
        self.lock().sent
    }

    pub fn is_alive(&self, worker: usize) -> bool {
        self.lock().alive[worker]
    }

    fn lock(&self) -> MutexGuard<'_, BusInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct InProcEndpoint {
    bus: Arc<InProcBus>,
    worker_id: usize,
}

impl Endpoint for InProcEndpoint {
    fn worker_id(&self) -> usize {
        self.worker_id
    }

    fn broadcast(&self, msg: &ModelMessage) -> Result<()> {
        let frame = encode(msg)?;
        let mut guard = self.bus.lock();
        let inner = &mut *guard;
        let from = self.worker_id;
        if inner.closed[from] {
            return Err(Error::Transport(format!("endpoint {from} is closed")));
        }
        if !inner.alive[from] {
            return Ok(());
        }
        inner.sent += 1;
        inner.min_broadcast = Some(inner.min_broadcast.map_or(msg.bound, |b| b.min(msg.bound)));
        let now = inner.now();
        for to in 0..inner.queues.len() {
            if (to == from && !inner.loopback) || !inner.alive[to] {
                continue;
            }
            let (latency, drop_p) = match inner.plan.link(from, to) {
                Some(link) => (link.latency_ms, link.drop_p),
                None => (Latency::Fixed(0.0), 0.0),
            };
            if drop_p > 0.0 && inner.rng.random::<f64>() < drop_p {
                log::trace!("dropped message {}:{} toward {to}", from, msg.seq);
                continue;
            }
            let delay = match latency {
                Latency::Fixed(ms) => ms,
                Latency::Range([lo, hi]) if hi > lo => inner.rng.random_range(lo..=hi),
                Latency::Range([lo, _]) => lo,
            };
            // per-link FIFO: never deliver before an earlier message
            let at = (now + delay).max(inner.last_delivery[from][to]);
            inner.last_delivery[from][to] = at;
            inner.queues[to][from].push_back(Pending {
                deliver_at: at,
                frame: frame.clone(),
            });
        }
        Ok(())
    }

    fn poll(&self) -> Result<Vec<ModelMessage>> {
        let mut inner = self.bus.lock();
        let me = self.worker_id;
        if inner.closed[me] {
            return Err(Error::Transport(format!("endpoint {me} is closed")));
        }
        if !inner.alive[me] {
            return Ok(Vec::new());
        }
        let now = inner.now();
        let mut out = Vec::new();
        for queue in inner.queues[me].iter_mut() {
            while queue.front().is_some_and(|p| p.deliver_at <= now) {
                let p = queue.pop_front().expect("front checked");
                match decode(&p.frame) {
                    Ok(msg) => out.push(msg),
                    Err(e) => log::warn!("worker {me}: skipping undecodable frame: {e}"),
                }
            }
        }
        Ok(out)
    }

    fn note_event(&self) {
        let mut guard = self.bus.lock();
        let inner = &mut *guard;
        let me = self.worker_id;
        inner.events[me] += 1;
        if let Some(limit) = inner.plan.kill_after(me) {
            if inner.alive[me] && inner.events[me] >= limit {
                log::info!("fault plan: worker {me} halts after {} events", inner.events[me]);
                inner.alive[me] = false;
                for q in inner.queues[me].iter_mut() {
                    q.clear();
                }
            }
        }
    }

    fn is_alive(&self) -> bool {
        self.bus.is_alive(self.worker_id)
    }

    fn close(&self) {
        self.bus.lock().closed[self.worker_id] = true;
    }
}
