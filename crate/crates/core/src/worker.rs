//! One boosting worker: alternates sampling and scanning, appends certified
//! rules, broadcasts improvements and adopts better models from peers.
//!
//! A worker has two roles. The *listener* polls the endpoint and stages any
//! incoming model whose bound beats the local one, raising the interrupt
//! flag. The *compute* role ([`Worker::step`]) adopts the staged model at its
//! next check point (between examples inside a scan, or between phases).
//! [`run_worker`] runs the two roles on separate threads; the simulator calls
//! them alternately from one thread.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::RecordSource;
use crate::error::{Error, Result};
use crate::model::{Lineage, LossBound, StrongModel, Stump};
use crate::protocol::{should_accept, Decision, ModelMessage};
use crate::sampler::{build_sample, Sample};
use crate::scanner::{generate_candidates, update_weight, ScanOutcome, Scanner};
use crate::stats::{effective_sample_size, StoppingConfig};
use crate::transport::Endpoint;

#[derive(Clone, Debug)]
pub struct WorkerConfig {
    pub worker_id: usize,
    pub num_workers: usize,
    pub sample_size: usize,
    /// Resample when `n_eff / |sample|` drops below this.
    pub neff_threshold: f64,
    pub gamma0: f64,
    /// Global stopping-rule settings; delta is split across candidates.
    pub stopping: StoppingConfig,
    pub bins: usize,
    /// Stop after the model holds this many rules.
    pub max_rules: usize,
    pub epsilon_rel: f64,
    /// Examples per target halving; `None` means one pass over the sample.
    pub shrink_period: Option<usize>,
    pub seed: u64,
    pub max_scanned: Option<u64>,
    pub time_budget: Option<Duration>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            worker_id: 0,
            num_workers: 1,
            sample_size: 2000,
            neff_threshold: 0.25,
            gamma0: 0.25,
            stopping: StoppingConfig::default(),
            bins: 16,
            max_rules: 100,
            epsilon_rel: 0.0,
            shrink_period: None,
            seed: 0,
            max_scanned: None,
            time_budget: None,
        }
    }
}

impl WorkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_workers == 0 || self.worker_id >= self.num_workers {
            return Err(Error::domain(format!(
                "worker id {} invalid for {} workers",
                self.worker_id, self.num_workers
            )));
        }
        if self.sample_size == 0 {
            return Err(Error::domain("sample size must be positive"));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 < 0.5) {
            return Err(Error::domain(format!("gamma0 must lie in (0, 1/2), got {}", self.gamma0)));
        }
        if !(0.0..=1.0).contains(&self.neff_threshold) {
            return Err(Error::domain("n_eff threshold must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.epsilon_rel) {
            return Err(Error::domain("epsilon_rel must lie in [0, 1)"));
        }
        if self.bins < 2 {
            return Err(Error::domain("need at least 2 bins"));
        }
        Ok(())
    }

    /// Features `j` with `j mod num_workers == worker_id`.
    pub fn owned_features(&self, dim: usize) -> Vec<usize> {
        (self.worker_id..dim).step_by(self.num_workers).collect()
    }
}

#[derive(Clone, Debug)]
pub struct WorkerState {
    pub worker_id: usize,
    pub model: StrongModel,
    pub bound: LossBound,
    pub sample: Sample,
    pub resume_index: usize,
    pub target_gamma: f64,
    pub seq: u64,
    pub owned_features: Vec<usize>,
    pub dim: usize,
    pub gamma0: f64,
    pub epsilon_rel: f64,
}

impl WorkerState {
    /// Accepts `msg` if it comes from a peer, is well formed and its bound
    /// is lower than ours by the configured margin. An accepted model gets a
    /// fresh local lineage so every cached weight is recomputed.
    pub fn handle_message(&mut self, msg: ModelMessage, lineage: Lineage) -> Decision {
        if msg.worker_id == self.worker_id {
            return Decision::Discard;
        }
        if let Err(e) = msg.validate(Some(self.dim)) {
            log::warn!(
                "worker {}: discarding malformed message {}:{}: {e}",
                self.worker_id,
                msg.worker_id,
                msg.seq
            );
            return Decision::Discard;
        }
        let decision = should_accept(
            self.worker_id,
            self.bound.value(),
            msg.worker_id,
            msg.bound,
            self.epsilon_rel,
        );
        if decision == Decision::Accept {
            self.model = msg.model.with_lineage(lineage);
            self.bound = LossBound::new(msg.bound).expect("validated above");
            self.target_gamma = self.gamma0;
        }
        decision
    }
}

/// Listener-side hand-off: the best staged message and the interrupt flag.
pub struct Inbox {
    worker_id: usize,
    epsilon_rel: f64,
    interrupt: AtomicBool,
    staged: Mutex<Option<ModelMessage>>,
    bound_bits: AtomicU64,
}

impl Inbox {
    fn new(worker_id: usize, epsilon_rel: f64) -> Self {
        Inbox {
            worker_id,
            epsilon_rel,
            interrupt: AtomicBool::new(false),
            staged: Mutex::new(None),
            bound_bits: AtomicU64::new(1.0f64.to_bits()),
        }
    }

    fn current_bound(&self) -> f64 {
        f64::from_bits(self.bound_bits.load(Ordering::Acquire))
    }

    fn publish_bound(&self, b: f64) {
        self.bound_bits.store(b.to_bits(), Ordering::Release);
    }

    /// Stages `msg` if it beats both the local bound and anything already
    /// staged. Returns whether it was staged.
    pub fn offer(&self, msg: ModelMessage) -> bool {
        let accept = should_accept(
            self.worker_id,
            self.current_bound(),
            msg.worker_id,
            msg.bound,
            self.epsilon_rel,
        );
        if accept == Decision::Discard {
            return false;
        }
        let mut staged = self.staged.lock().unwrap_or_else(|e| e.into_inner());
        if staged.as_ref().is_some_and(|s| s.bound <= msg.bound) {
            return false;
        }
        *staged = Some(msg);
        self.interrupt.store(true, Ordering::Release);
        true
    }

    pub fn has_staged(&self) -> bool {
        self.staged.lock().unwrap_or_else(|e| e.into_inner()).is_some()
    }

    fn take(&self) -> Option<ModelMessage> {
        self.interrupt.store(false, Ordering::Release);
        self.staged.lock().unwrap_or_else(|e| e.into_inner()).take()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Init,
    Add,
    Adopt,
    Resample,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Init => "init",
            EventKind::Add => "add",
            EventKind::Adopt => "adopt",
            EventKind::Resample => "resample",
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorkerEvent {
    pub kind: EventKind,
    pub worker_id: usize,
    /// Examples scanned by this worker so far.
    pub scanned: u64,
    pub rules: usize,
    pub bound: f64,
    /// Full-dataset loss estimated from the in-memory sample.
    pub train_loss: f64,
    pub model: StrongModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkerStatus {
    Running,
    /// Reached its rule or time budget; still adopts better models.
    Done,
    /// Halted by the fault plan.
    Dead,
}

enum Phase {
    NeedSample,
    Ready,
    Scanning(Scanner),
}

pub struct Worker {
    config: WorkerConfig,
    state: WorkerState,
    source: Arc<dyn RecordSource + Send + Sync>,
    endpoint: Arc<dyn Endpoint>,
    inbox: Arc<Inbox>,
    rng: ChaCha8Rng,
    candidates: Vec<Stump>,
    phase: Phase,
    status: WorkerStatus,
    scanned: u64,
    events: Vec<WorkerEvent>,
    started: Instant,
}

impl Worker {
    pub fn new(
        config: WorkerConfig,
        source: Arc<dyn RecordSource + Send + Sync>,
        endpoint: Arc<dyn Endpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if source.is_empty() {
            return Err(Error::domain("dataset is empty"));
        }
        let dim = source.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = StrongModel::empty(Lineage::random(&mut rng));
        let state = WorkerState {
            worker_id: config.worker_id,
            model,
            bound: LossBound::INITIAL,
            sample: Sample {
                records: Vec::new(),
                total_weight: source.len() as f64,
                dataset_len: source.len(),
                offset: 0.0,
            },
            resume_index: 0,
            target_gamma: config.gamma0,
            seq: 0,
            owned_features: config.owned_features(dim),
            dim,
            gamma0: config.gamma0,
            epsilon_rel: config.epsilon_rel,
        };
        let inbox = Arc::new(Inbox::new(config.worker_id, config.epsilon_rel));
        let mut worker = Worker {
            config,
            state,
            source,
            endpoint,
            inbox,
            rng,
            candidates: Vec::new(),
            phase: Phase::NeedSample,
            status: WorkerStatus::Running,
            scanned: 0,
            events: Vec::new(),
            started: Instant::now(),
        };
        worker.events.push(WorkerEvent {
            kind: EventKind::Init,
            worker_id: worker.config.worker_id,
            scanned: 0,
            rules: 0,
            bound: 1.0,
            train_loss: 1.0,
            model: worker.state.model.clone(),
        });
        worker.check_done();
        Ok(worker)
    }

    pub fn state(&self) -> &WorkerState {
        &self.state
    }

    pub fn into_state(self) -> WorkerState {
        self.state
    }

    pub fn status(&self) -> WorkerStatus {
        self.status
    }

    pub fn scanned(&self) -> u64 {
        self.scanned
    }

    pub fn inbox(&self) -> Arc<Inbox> {
        Arc::clone(&self.inbox)
    }

    pub fn drain_events(&mut self) -> Vec<WorkerEvent> {
        std::mem::take(&mut self.events)
    }

    /// Listener role: poll the endpoint once and stage improvements.
    pub fn listen(&self) -> Result<usize> {
        if !self.endpoint.is_alive() {
            return Ok(0);
        }
        let mut staged = 0;
        for msg in self.endpoint.poll()? {
            if self.inbox.offer(msg) {
                staged += 1;
            }
        }
        Ok(staged)
    }

    /// Idle: no more local work and nothing waiting to be adopted.
    pub fn is_idle(&self) -> bool {
        self.status != WorkerStatus::Running && !self.inbox.has_staged()
    }

    /// Compute role: run for at most `budget` scanned examples.
    pub fn step(&mut self, budget: u64) -> Result<WorkerStatus> {
        let mut used = 0u64;
        loop {
            if self.status == WorkerStatus::Dead {
                return Ok(self.status);
            }
            if !self.endpoint.is_alive() {
                self.status = WorkerStatus::Dead;
                return Ok(self.status);
            }
            if let Some(msg) = self.inbox.take() {
                self.adopt(msg)?;
                continue;
            }
            self.check_done();
            if self.status != WorkerStatus::Running || used >= budget {
                return Ok(self.status);
            }
            match std::mem::replace(&mut self.phase, Phase::Ready) {
                Phase::NeedSample => self.resample()?,
                Phase::Ready => self.prepare_scan()?,
                Phase::Scanning(mut scanner) => {
                    let before = scanner.scanned();
                    let out = scanner.resume(
                        &mut self.state.sample.records,
                        &self.state.model,
                        &self.candidates,
                        &self.inbox.interrupt,
                        Some(budget - used),
                    )?;
                    let delta = scanner.scanned() - before;
                    used += delta;
                    self.scanned += delta;
                    self.state.target_gamma = scanner.gamma();
                    match out {
                        None => self.phase = Phase::Scanning(scanner),
                        Some(ScanOutcome::Found {
                            resume_index,
                            stump,
                            gamma,
                        }) => self.add_rule(stump, gamma, resume_index)?,
                        Some(ScanOutcome::Exhausted) => self.phase = Phase::NeedSample,
                        // the staged model is picked up at the top of the loop
                        Some(ScanOutcome::Interrupted) => self.phase = Phase::Scanning(scanner),
                    }
                }
            }
        }
    }

    fn check_done(&mut self) {
        if self.status != WorkerStatus::Running {
            return;
        }
        let rules_done = self.state.model.len() >= self.config.max_rules;
        let scan_done = self.config.max_scanned.is_some_and(|m| self.scanned >= m);
        let time_done = self
            .config
            .time_budget
            .is_some_and(|t| self.started.elapsed() >= t);
        if rules_done || scan_done || time_done {
            self.status = WorkerStatus::Done;
            self.phase = Phase::Ready;
        }
    }

    fn adopt(&mut self, msg: ModelMessage) -> Result<()> {
        let lineage = Lineage::random(&mut self.rng);
        if self.state.handle_message(msg, lineage) == Decision::Accept {
            self.inbox.publish_bound(self.state.bound.value());
            if !matches!(self.phase, Phase::NeedSample) {
                self.phase = Phase::Ready;
            }
            self.emit(EventKind::Adopt)?;
        }
        Ok(())
    }

    fn resample(&mut self) -> Result<()> {
        let initial = self.state.sample.is_empty();
        self.state.sample = build_sample(
            self.source.as_ref(),
            &self.state.model,
            self.config.sample_size,
            &mut self.rng,
        )?;
        if self.state.sample.is_empty() {
            return Err(Error::Numeric("weighted sampling selected no examples".into()));
        }
        self.state.resume_index = 0;
        self.candidates = generate_candidates(
            &self.state.sample.records,
            &self.state.owned_features,
            self.config.bins,
        );
        self.phase = Phase::Ready;
        if !initial {
            self.emit(EventKind::Resample)?;
        }
        Ok(())
    }

    /// Brings every cached weight up to date and returns the relative weights.
    fn refresh_weights(&mut self) -> Result<Vec<f64>> {
        let model = &self.state.model;
        self.state
            .sample
            .records
            .iter_mut()
            .map(|r| update_weight(r, model))
            .collect()
    }

    fn prepare_scan(&mut self) -> Result<()> {
        let relative = self.refresh_weights()?;
        let n_eff = effective_sample_size(&relative)?;
        if n_eff < self.config.neff_threshold * relative.len() as f64 {
            log::debug!(
                "worker {}: n_eff {n_eff:.1} of {} below threshold, resampling",
                self.config.worker_id,
                relative.len()
            );
            self.phase = Phase::NeedSample;
            return Ok(());
        }
        if self.candidates.is_empty() {
            log::info!("worker {} has no candidate rules; idling", self.config.worker_id);
            self.status = WorkerStatus::Done;
            return Ok(());
        }
        let cfg = self.config.stopping.per_candidate(self.candidates.len());
        let period = self
            .config
            .shrink_period
            .unwrap_or(self.state.sample.len());
        let start = self.state.resume_index % self.state.sample.len();
        let scanner = Scanner::new(
            &self.state.sample.records,
            &self.candidates,
            self.config.gamma0,
            period,
            start,
            cfg,
        )?;
        self.state.target_gamma = self.config.gamma0;
        self.phase = Phase::Scanning(scanner);
        Ok(())
    }

    fn add_rule(&mut self, stump: Stump, gamma: f64, resume_index: usize) -> Result<()> {
        self.state.model = self.state.model.add_rule(stump, gamma)?;
        self.state.bound = self.state.bound.update(gamma)?;
        self.state.resume_index = resume_index;
        self.inbox.publish_bound(self.state.bound.value());
        self.phase = Phase::Ready;
        self.broadcast_update()?;
        self.emit(EventKind::Add)
    }

    /// Sends the current model and bound to every peer with the next
    /// sequence number, retrying transient transport failures.
    pub fn broadcast_update(&mut self) -> Result<()> {
        self.state.seq += 1;
        let msg = ModelMessage {
            worker_id: self.state.worker_id,
            seq: self.state.seq,
            bound: self.state.bound.value(),
            model: self.state.model.clone(),
        };
        let mut backoff = Duration::from_millis(10);
        let mut attempt = 0;
        loop {
            match self.endpoint.broadcast(&msg) {
                Ok(()) => return Ok(()),
                Err(e) if attempt < 3 => {
                    log::warn!("worker {}: broadcast failed ({e}), retrying", self.state.worker_id);
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => {
                    return Err(Error::Transport(format!(
                        "worker {} giving up on broadcast seq {}: {e}",
                        self.state.worker_id, msg.seq
                    )))
                }
            }
        }
    }

    fn emit(&mut self, kind: EventKind) -> Result<()> {
        self.refresh_weights()?;
        self.events.push(WorkerEvent {
            kind,
            worker_id: self.config.worker_id,
            scanned: self.scanned,
            rules: self.state.model.len(),
            bound: self.state.bound.value(),
            train_loss: self.state.sample.loss_estimate(),
            model: self.state.model.clone(),
        });
        self.endpoint.note_event();
        if !self.endpoint.is_alive() {
            self.status = WorkerStatus::Dead;
        }
        Ok(())
    }
}

/// Runs one worker on the current thread with a listener thread beside it,
/// until it reaches its rule or time budget or is halted. Every event is
/// passed to `on_event` as it happens.
pub fn run_worker(
    config: WorkerConfig,
    source: Arc<dyn RecordSource + Send + Sync>,
    endpoint: Arc<dyn Endpoint>,
    mut on_event: impl FnMut(&WorkerEvent),
) -> Result<WorkerState> {
    const CHUNK: u64 = 1000;
    let mut worker = Worker::new(config, source, Arc::clone(&endpoint))?;
    let stop = Arc::new(AtomicBool::new(false));
    let listener = {
        let stop = Arc::clone(&stop);
        let inbox = worker.inbox();
        let endpoint = Arc::clone(&endpoint);
        thread::spawn(move || {
            while !stop.load(Ordering::Acquire) && endpoint.is_alive() {
                match endpoint.poll() {
                    Ok(msgs) => {
                        for m in msgs {
                            inbox.offer(m);
                        }
                    }
                    Err(e) => {
                        log::warn!("listener stopped: {e}");
                        break;
                    }
                }
                thread::sleep(Duration::from_millis(1));
            }
        })
    };
    let result = (|| {
        loop {
            let status = worker.step(CHUNK)?;
            for ev in worker.drain_events() {
                on_event(&ev);
            }
            if status != WorkerStatus::Running {
                return Ok(());
            }
        }
    })();
    stop.store(true, Ordering::Release);
    let _ = listener.join();
    result.map(|()| worker.into_state())
}
