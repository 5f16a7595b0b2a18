//! Deterministic single-threaded simulation of several workers on an
//! in-process bus.
//!
//! Time advances in rounds. In each round the bus clock moves forward one
//! millisecond and every worker, in id order, polls its endpoint and then
//! scans at most `quantum` examples. A worker's scanned count is the
//! simulation's logical clock, so runs are reproducible and comparable
//! across worker counts.

use std::sync::Arc;

use crate::dataio::RecordSource;
use crate::error::{Error, Result};
use crate::transport::{Endpoint, FaultPlan, InProcBus};
use crate::worker::{Worker, WorkerConfig, WorkerEvent, WorkerState, WorkerStatus};

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub workers: usize,
    /// Template for every worker; id and seed are filled in per worker.
    pub worker: WorkerConfig,
    /// Examples each worker may scan per round.
    pub quantum: u64,
    /// Stop once the logical clock passes this.
    pub max_clock: u64,
    pub fault_plan: FaultPlan,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(workers: usize, worker: WorkerConfig) -> Self {
        SimConfig {
            workers,
            seed: worker.seed,
            worker,
            quantum: 100,
            max_clock: 10_000_000,
            fault_plan: FaultPlan::reliable(),
        }
    }
}

/// Final state of one simulated run.
#[derive(Debug)]
pub struct SimReport {
    pub states: Vec<WorkerState>,
    pub statuses: Vec<WorkerStatus>,
    /// Rounds times quantum when the run ended.
    pub clock: u64,
    pub rounds: u64,
    pub min_broadcast: Option<f64>,
    pub messages_sent: u64,
    /// The run hit `max_clock` before every worker went idle.
    pub timed_out: bool,
}

impl SimReport {
    /// State of the surviving worker holding the lowest bound.
    pub fn best(&self) -> Option<&WorkerState> {
        self.states
            .iter()
            .zip(&self.statuses)
            .filter(|(_, s)| **s != WorkerStatus::Dead)
            .map(|(st, _)| st)
            .min_by(|a, b| a.bound.value().total_cmp(&b.bound.value()))
    }

    pub fn survivors(&self) -> impl Iterator<Item = &WorkerState> {
        self.states
            .iter()
            .zip(&self.statuses)
            .filter(|(_, s)| **s != WorkerStatus::Dead)
            .map(|(st, _)| st)
    }
}

/// Per-worker seed derived from the run seed.
fn worker_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64 + 1)
}

/// Runs the simulation until every live worker is idle and nothing is in
/// flight, or the clock limit is hit. Events are passed to `on_event` in the
/// order they happen.
pub fn simulate(
    cfg: &SimConfig,
    source: Arc<dyn RecordSource + Send + Sync>,
    mut on_event: impl FnMut(&WorkerEvent),
) -> Result<SimReport> {
    if cfg.workers == 0 {
        return Err(Error::domain("simulation needs at least one worker"));
    }
    if cfg.quantum == 0 {
        return Err(Error::domain("quantum must be positive"));
    }
    let bus = InProcBus::simulated(cfg.workers, cfg.fault_plan.clone(), cfg.seed)?;
    let mut workers = Vec::with_capacity(cfg.workers);
    for id in 0..cfg.workers {
        let wc = WorkerConfig {
            worker_id: id,
            num_workers: cfg.workers,
            seed: worker_seed(cfg.seed, id),
            ..cfg.worker.clone()
        };
        let ep: Arc<dyn Endpoint> = Arc::new(bus.endpoint(id)?);
        workers.push(Worker::new(wc, Arc::clone(&source), ep)?);
    }
    for w in &mut workers {
        for ev in w.drain_events() {
            on_event(&ev);
        }
    }

    let mut rounds = 0u64;
    let mut timed_out = false;
    loop {
        let live: Vec<usize> = (0..cfg.workers).filter(|&i| bus.is_alive(i)).collect();
        let settled = live.iter().all(|&i| workers[i].is_idle())
            && live.iter().all(|&i| bus.in_flight_to(i) == 0);
        if settled {
            break;
        }
        if rounds * cfg.quantum >= cfg.max_clock {
            timed_out = true;
            break;
        }
        rounds += 1;
        bus.set_time_ms(rounds as f64);
        for w in &mut workers {
            if w.status() == WorkerStatus::Dead {
                continue;
            }
            w.listen()?;
            w.step(cfg.quantum)?;
            for ev in w.drain_events() {
                on_event(&ev);
            }
        }
    }

    let statuses = workers.iter().map(Worker::status).collect();
    let states = workers.into_iter().map(Worker::into_state).collect();
    Ok(SimReport {
        states,
        statuses,
        clock: rounds * cfg.quantum,
        rounds,
        min_broadcast: bus.min_broadcast_bound(),
        messages_sent: bus.messages_sent(),
        timed_out,
    })
}
