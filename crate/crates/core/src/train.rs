//! End-to-end training runs: one threaded worker, an in-process simulation
//! of several workers, or one worker of a TCP cluster.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use crate::dataio::{Dataset, MemoryDataset, RecordSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics, MetricsLog};
use crate::model::StrongModel;
use crate::sim::{simulate, SimConfig};
use crate::stats::StoppingConfig;
use crate::transport::tcp::TcpOptions;
use crate::transport::{Endpoint, FaultPlan, InProcBus, TcpEndpoint};
use crate::worker::{run_worker, WorkerConfig, WorkerEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub test: Option<PathBuf>,
    pub workers: usize,
    pub sample_size: usize,
    pub neff_threshold: f64,
    pub gamma0: f64,
    pub delta: f64,
    pub stop_const: f64,
    pub bins: usize,
    pub rules: usize,
    pub seed: u64,
    pub epsilon_rel: f64,
    pub transport: TransportKind,
    pub peers: Vec<SocketAddr>,
    pub worker_id: usize,
    pub fault_plan: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub eval_every: usize,
    pub model_out: Option<PathBuf>,
    /// Examples per worker per simulation round.
    pub quantum: u64,
    /// Per-worker cap on scanned examples.
    pub max_scanned: Option<u64>,
    /// Use the deterministic simulator even for a single worker.
    pub simulate: bool,
}

impl TrainOptions {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        let w = WorkerConfig::default();
        TrainOptions {
            data: data.into(),
            test: None,
            workers: 1,
            sample_size: w.sample_size,
            neff_threshold: w.neff_threshold,
            gamma0: w.gamma0,
            delta: w.stopping.delta(),
            stop_const: w.stopping.c(),
            bins: w.bins,
            rules: w.max_rules,
            seed: 0,
            epsilon_rel: 0.0,
            transport: TransportKind::InProc,
            peers: Vec::new(),
            worker_id: 0,
            fault_plan: None,
            metrics: None,
            eval_every: 1,
            model_out: None,
            quantum: 100,
            max_scanned: None,
            simulate: false,
        }
    }

    /// Rejects flag combinations that cannot be run.
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::domain("--eval-every must be at least 1"));
        }
        match self.transport {
            TransportKind::InProc => {
                if self.workers == 0 {
                    return Err(Error::domain("--workers must be at least 1"));
                }
                if !self.peers.is_empty() {
                    return Err(Error::domain("--peers needs --transport tcp"));
                }
            }
            TransportKind::Tcp => {
                if self.peers.is_empty() {
                    return Err(Error::domain("--transport tcp needs --peers"));
                }
                if self.worker_id >= self.peers.len() {
                    return Err(Error::domain(format!(
                        "--worker-id {} out of range for {} peers",
                        self.worker_id,
                        self.peers.len()
                    )));
                }
                if self.fault_plan.is_some() {
                    return Err(Error::domain("--fault-plan applies to the in-process transport only"));
                }
            }
        }
        Ok(())
    }

    fn worker_config(&self, num_workers: usize) -> Result<WorkerConfig> {
        let cfg = WorkerConfig {
            worker_id: 0,
            num_workers,
            sample_size: self.sample_size,
            neff_threshold: self.neff_threshold,
            gamma0: self.gamma0,
            stopping: StoppingConfig::new(self.stop_const, self.delta)?,
            bins: self.bins,
            max_rules: self.rules,
            epsilon_rel: self.epsilon_rel,
            shrink_period: None,
            seed: self.seed,
            max_scanned: self.max_scanned,
            time_budget: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: StrongModel,
    pub bound: f64,
    /// Largest per-worker scanned count (the simulator's logical clock).
    pub scanned: u64,
    pub events: usize,
    pub test: Option<Metrics>,
}

pub fn train(opts: &TrainOptions) -> Result<TrainSummary> {
    opts.validate()?;
    let source: Arc<dyn RecordSource + Send + Sync> = Arc::new(Dataset::open(&opts.data)?);
    let test: Option<MemoryDataset> = opts.test.as_ref().map(|p| Dataset::open(p)?.load()).transpose()?;
    let test_ref = test.as_ref().map(|t| t as &dyn RecordSource);
    let mut log = match &opts.metrics {
        Some(p) => Some(MetricsLog::create(p, test_ref, opts.eval_every)?),
        None => None,
    };
    let mut events = 0usize;
    let mut scanned = 0u64;
    let mut log_err = None;
    let mut on_event = |e: &WorkerEvent| {
        events += 1;
        scanned = scanned.max(e.scanned);
        if let (Some(l), None) = (log.as_mut(), &log_err) {
            if let Err(err) = l.record(e) {
                log_err = Some(err);
            }
        }
    };

    let (model, bound) = match opts.transport {
        TransportKind::Tcp => {
            let cfg = WorkerConfig {
                worker_id: opts.worker_id,
                ..opts.worker_config(opts.peers.len())?
            };
            let ep: Arc<dyn Endpoint> =
                Arc::new(TcpEndpoint::new(opts.worker_id, &opts.peers, TcpOptions::default())?);
            let st = run_worker(cfg, source, Arc::clone(&ep), &mut on_event)?;
            ep.close();
            (st.model, st.bound.value())
        }
        TransportKind::InProc if opts.workers == 1 && opts.fault_plan.is_none() && !opts.simulate => {
            let bus = InProcBus::new(1, FaultPlan::reliable(), opts.seed)?;
            let ep: Arc<dyn Endpoint> = Arc::new(bus.endpoint(0)?);
            let st = run_worker(opts.worker_config(1)?, source, ep, &mut on_event)?;
            (st.model, st.bound.value())
        }
        TransportKind::InProc => {
            let plan = match &opts.fault_plan {
                Some(p) => FaultPlan::load(p)?,
                None => FaultPlan::reliable(),
            };
            let mut sim = SimConfig::new(opts.workers, opts.worker_config(opts.workers)?);
            sim.quantum = opts.quantum;
            sim.fault_plan = plan;
            let report = simulate(&sim, source, &mut on_event)?;
            if report.timed_out {
                log::warn!("simulation stopped at clock {} before settling", report.clock);
            }
            let best = report
                .best()
                .ok_or_else(|| Error::domain("every worker was halted"))?;
            (best.model.clone(), best.bound.value())
        }
    };
    if let Some(err) = log_err {
        return Err(err);
    }
    if let Some(l) = log {
        l.finish()?;
    }
    if let Some(p) = &opts.model_out {
        model.save(p)?;
    }
    let test_metrics = test.as_ref().map(|t| evaluate(&model, t)).transpose()?;
    Ok(TrainSummary {
        model,
        bound,
        scanned,
        events,
        test: test_metrics,
    })
}
