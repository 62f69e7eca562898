//! Batching, look-ahead planning and the plan-then-simulate loop.
//!
//! Planning for iteration `i` runs on its own thread and lands in an
//! in-process plan store. Before iteration `i` is simulated the plans for
//! `i..=i+κ` must be complete; with `κ >= 1` the plan for `i+κ+1` starts
//! while `i` simulates.

mod compare;
mod datagen;
mod sweep;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::blockgen::{generate_blocks, BlockGraph};
use crate::mask::MaskError;
use crate::model::{
    AttentionShape, Batch, DeviceTopology, ModelError, SequenceSpec, SequenceStream,
};
use crate::placement::{
    communication_volume, place_relaxed, PlacementConfig, PlacementError, PlacementResult,
};
use crate::plan::{compile, verify_plans, CompileOptions, ExecutionPlan, PlanError};
use crate::scheduler::{schedule, DivisionSchedule, ScheduleError};
use crate::simexec::{run, Payload, SimError, SimReport};

pub use compare::{compare_batch, compare_csv, simulate_baseline, CompareError, CompareRow};
pub use datagen::{generate_lengths, generate_stream, LengthDist, MaskChoice};
pub use sweep::{
    spearman, sweep_block_size, sweep_csv, sweep_epsilon, sweep_sparsity, SweepParam, SweepRow,
    SPARSITY_WINDOWS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub block_size: usize,
    pub divisions: usize,
    pub eps_inter: f64,
    pub eps_intra: f64,
    pub eps_data: f64,
    pub lookahead: usize,
    pub seed: u64,
    pub topology: DeviceTopology,
    pub token_budget: usize,
    /// Run simulations with real payloads and check them against the dense reference.
    pub numeric: bool,
    pub max_buffers: Option<u32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            block_size: 1024,
            divisions: 4,
            eps_inter: 0.4,
            eps_intra: 0.1,
            eps_data: 0.05,
            lookahead: 2,
            seed: 0,
            topology: DeviceTopology::new(2, 4).expect("valid default topology"),
            token_budget: 131072,
            numeric: false,
            max_buffers: None,
        }
    }
}

impl PipelineConfig {
    /// Block sizes searched by default.
    pub const BLOCK_SIZES: [usize; 4] = [512, 1024, 2048, 4096];

    pub fn placement(&self) -> PlacementConfig {
        PlacementConfig {
            eps_inter: self.eps_inter,
            eps_intra: self.eps_intra,
            eps_data: self.eps_data,
            seed: self.seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("sequence {seq_id} has {length} tokens, above the batch budget of {budget}")]
    OversizedSequence {
        seq_id: String,
        length: usize,
        budget: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Failure of one iteration; the pipeline records it and moves on.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IterationError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Fill batches in stream order; a sequence that would overflow the budget
/// starts the next batch.
pub fn make_batches(
    sequences: Vec<SequenceSpec>,
    token_budget: usize,
    shape: AttentionShape,
) -> Result<Vec<Batch>, PipelineError> {
    let mut batches = Vec::new();
    let mut current: Vec<SequenceSpec> = Vec::new();
    let mut tokens = 0;
    for s in sequences {
        if s.length > token_budget {
            return Err(PipelineError::OversizedSequence {
                seq_id: s.seq_id,
                length: s.length,
                budget: token_budget,
            });
        }
        if tokens + s.length > token_budget {
            batches.push(Batch::new(
                std::mem::take(&mut current),
                token_budget,
                shape,
            )?);
            tokens = 0;
        }
        tokens += s.length;
        current.push(s);
    }
    if !current.is_empty() {
        batches.push(Batch::new(current, token_budget, shape)?);
    }
    Ok(batches)
}

#[derive(Clone, Debug)]
pub struct PlannedIteration {
    pub iteration: u64,
    /// Data tolerance the placement was found at; above the configured one
    /// only when that was unreachable.
    pub eps_data: f64,
    pub graph: BlockGraph,
    pub placement: PlacementResult,
    pub schedule: DivisionSchedule,
    pub plans: Vec<ExecutionPlan>,
}

/// Blocks, placement, schedule and verified plans for one batch.
pub fn plan_batch(
    batch: &Batch,
    cfg: &PipelineConfig,
    iteration: u64,
    hint: Option<&[u32]>,
) -> Result<PlannedIteration, IterationError> {
    let graph = generate_blocks(batch, cfg.block_size)?;
    let (placement, eps_data) = place_relaxed(&graph, &cfg.topology, &cfg.placement(), hint)?;
    let schedule = schedule(&graph, &placement, cfg.divisions)?;
    let opts = CompileOptions {
        iteration,
        max_buffers: cfg.max_buffers,
    };
    let plans = compile(&schedule, &graph, &placement, &opts)?;
    verify_plans(&plans)?;
    Ok(PlannedIteration {
        iteration,
        eps_data,
        graph,
        placement,
        schedule,
        plans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    pub sequences: usize,
    pub tokens: usize,
    pub block_size: usize,
    pub comp_blocks: usize,
    pub comm_bytes: u64,
    pub inter_machine_bytes: u64,
    pub intra_machine_bytes: u64,
    pub compute_imbalance: f64,
    pub eps_data: f64,
    pub buffer_slots: u32,
    pub modeled_makespan: f64,
    pub max_abs_error: Option<f64>,
    pub sim: Option<SimReport>,
    pub error: Option<String>,
}

impl IterationReport {
    fn failed(iteration: u64, batch: &Batch, block_size: usize, e: &IterationError) -> Self {
        IterationReport {
            iteration,
            sequences: batch.sequences.len(),
            tokens: batch.total_tokens(),
            block_size,
            comp_blocks: 0,
            comm_bytes: 0,
            inter_machine_bytes: 0,
            intra_machine_bytes: 0,
            compute_imbalance: 0.0,
            eps_data: 0.0,
            buffer_slots: 0,
            modeled_makespan: 0.0,
            max_abs_error: None,
            sim: None,
            error: Some(e.to_string()),
        }
    }
}

/// Simulate a planned iteration.
pub fn simulate_iteration(
    batch: &Batch,
    planned: &PlannedIteration,
    cfg: &PipelineConfig,
) -> Result<IterationReport, IterationError> {
    let payload = cfg.numeric.then(|| {
        Payload::random(
            batch,
            cfg.seed ^ planned.iteration.wrapping_mul(0x9E37_79B9),
        )
    });
    let outcome = run(&planned.plans, payload.as_ref(), &cfg.topology)?;
    let vol = communication_volume(&planned.graph, &planned.placement);
    let sim = outcome.report;
    Ok(IterationReport {
        iteration: planned.iteration,
        sequences: batch.sequences.len(),
        tokens: batch.total_tokens(),
        block_size: cfg.block_size,
        comp_blocks: planned.graph.comp_blocks.len(),
        comm_bytes: sim.total_bytes,
        inter_machine_bytes: vol.inter_machine,
        intra_machine_bytes: vol.total - vol.inter_machine,
        compute_imbalance: planned.placement.compute_imbalance(),
        eps_data: planned.eps_data,
        buffer_slots: planned
            .plans
            .iter()
            .map(|p| p.buffers.capacity.max())
            .max()
            .unwrap_or(0),
        modeled_makespan: sim.modeled_makespan,
        max_abs_error: sim.max_abs_error,
        sim: Some(sim),
        error: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PlanStart,
    PlanEnd,
    SimStart,
    SimEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub iteration: u64,
    pub kind: EventKind,
    /// Planning tasks running when the event was logged.
    pub planning_in_flight: usize,
}

#[derive(Default)]
struct EventLog {
    events: Mutex<Vec<Event>>,
    in_flight: AtomicUsize,
}

impl EventLog {
    fn record(&self, iteration: u64, kind: EventKind) {
        let mut events = self.events.lock().expect("event log poisoned");
        let seq = events.len();
        events.push(Event {
            seq,
            iteration,
            kind,
            planning_in_flight: self.in_flight.load(Ordering::SeqCst),
        });
    }

    fn plan_started(&self, iteration: u64) {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        self.record(iteration, EventKind::PlanStart);
    }

    fn plan_finished(&self, iteration: u64) {
        self.record(iteration, EventKind::PlanEnd);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

type PlanSlot = Result<Arc<PlannedIteration>, IterationError>;

/// Plans keyed by iteration; many producers, one consumer.
#[derive(Default)]
pub struct PlanStore {
    plans: Mutex<BTreeMap<u64, PlanSlot>>,
    ready: Condvar,
}

impl PlanStore {
    pub fn insert(&self, iteration: u64, plan: PlanSlot) {
        self.plans
            .lock()
            .expect("plan store poisoned")
            .insert(iteration, plan);
        self.ready.notify_all();
    }

    /// Block until the plan for `iteration` is stored.
    pub fn wait_for(&self, iteration: u64) {
        let mut plans = self.plans.lock().expect("plan store poisoned");
        while !plans.contains_key(&iteration) {
            plans = self.ready.wait(plans).expect("plan store poisoned");
        }
    }

    /// Remove and return the plan for `iteration`, waiting for it if needed.
    pub fn take(&self, iteration: u64) -> PlanSlot {
        let mut plans = self.plans.lock().expect("plan store poisoned");
        loop {
            if let Some(p) = plans.remove(&iteration) {
                return p;
            }
            plans = self.ready.wait(plans).expect("plan store poisoned");
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub reports: Vec<IterationReport>,
    pub events: Vec<Event>,
}

/// Plan and simulate every batch in order with `cfg.lookahead` iterations of
/// planning ahead of simulation.
pub fn pipeline_run(cfg: &PipelineConfig, batches: &[Batch]) -> PipelineOutput {
    let n = batches.len();
    let kappa = cfg.lookahead;
    let store = PlanStore::default();
    let log = EventLog::default();
    let mut reports = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let mut launched = 0usize;
        let launch = |i: usize| {
            let (store, log, batch) = (&store, &log, &batches[i]);
            log.plan_started(i as u64);
            scope.spawn(move || {
                let r = plan_batch(batch, cfg, i as u64, None).map(Arc::new);
                log.plan_finished(i as u64);
                store.insert(i as u64, r);
            });
        };
        for i in 0..n {
            let horizon = (i + kappa).min(n - 1);
            while launched <= horizon {
                launch(launched);
                launched += 1;
            }
            for j in i..=horizon {
                store.wait_for(j as u64);
            }
            let planned = store.take(i as u64);
            if kappa >= 1 && launched < n {
                launch(launched);
                launched += 1;
            }
            log.record(i as u64, EventKind::SimStart);
            let report = planned
                .and_then(|p| simulate_iteration(&batches[i], &p, cfg))
                .unwrap_or_else(|e| {
                    IterationReport::failed(i as u64, &batches[i], cfg.block_size, &e)
                });
            log.record(i as u64, EventKind::SimEnd);
            if let Some(e) = &report.error {
                log::warn!("iteration {i} failed: {e}");
            }
            reports.push(report);
        }
    });
    PipelineOutput {
        reports,
        events: log.events.into_inner().expect("event log poisoned"),
    }
}

/// Read a JSONL sequence stream and cut it into batches of the header's budget.
pub fn load_batches(path: &std::path::Path) -> Result<Vec<Batch>, PipelineError> {
    let file = std::fs::File::open(path).map_err(ModelError::Io)?;
    let stream = SequenceStream::read_jsonl(std::io::BufReader::new(file))?;
    let shape = stream.header.shape();
    make_batches(stream.sequences, stream.header.token_budget, shape)
}

/// [`pipeline_run`] over the batches of a JSONL stream.
pub fn pipeline_run_path(
    cfg: &PipelineConfig,
    path: &std::path::Path,
) -> Result<PipelineOutput, PipelineError> {
    Ok(pipeline_run(cfg, &load_batches(path)?))
}

/// Check that each simulation started after its plan finished and that no
/// more than `lookahead + 1` planning tasks ever ran at once.
pub fn check_event_log(events: &[Event], lookahead: usize) -> Result<(), String> {
    let mut planned = std::collections::BTreeSet::new();
    for e in events {
        if e.planning_in_flight > lookahead + 1 {
            return Err(format!(
                "{} planning tasks in flight at event {}",
                e.planning_in_flight, e.seq
            ));
        }
        match e.kind {
            EventKind::PlanEnd => {
                planned.insert(e.iteration);
            }
            EventKind::SimStart if !planned.contains(&e.iteration) => {
                return Err(format!(
                    "iteration {} simulated before its plan finished",
                    e.iteration
                ));
            }
            _ => {}
        }
    }
    Ok(())
}

/// One CSV row per iteration.
pub fn summary_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from(
        "iteration,sequences,tokens,block_size,comp_blocks,comm_bytes,inter_machine_bytes,\
         intra_machine_bytes,compute_imbalance,eps_data,buffer_slots,modeled_makespan,max_abs_error,error\n",
    );
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6},{},{},{:e},{},{}",
            r.iteration,
            r.sequences,
            r.tokens,
            r.block_size,
            r.comp_blocks,
            r.comm_bytes,
            r.inter_machine_bytes,
            r.intra_machine_bytes,
            r.compute_imbalance,
            r.eps_data,
            r.buffer_slots,
            r.modeled_makespan,
            r.max_abs_error
                .map(|e| format!("{e:e}"))
                .unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskDescriptor;

    fn seqs(lengths: &[usize]) -> Vec<SequenceSpec> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SequenceSpec::new(format!("s{i}"), l, MaskDescriptor::Causal))
            .collect()
    }

    #[test]
    fn batches_fill_greedily() {
        let shape = AttentionShape::GQA_DEFAULT;
        let b = make_batches(seqs(&[4, 4, 4]), 10, shape).unwrap();
        let lens: Vec<Vec<usize>> = b
            .iter()
            .map(|b| b.sequences.iter().map(|s| s.length).collect())
            .collect();
        assert_eq!(lens, vec![vec![4, 4], vec![4]]);
        assert!(make_batches(Vec::new(), 10, shape).unwrap().is_empty());
        assert!(matches!(
            make_batches(seqs(&[11]), 10, shape),
            Err(PipelineError::OversizedSequence { .. })
        ));
    }

    #[test]
    fn serial_pipeline_alternates() {
        let shape = AttentionShape {
            heads: 1,
            kv_groups: 1,
            head_dim: 4,
            bytes_per_element: 2,
        };
        let batches = make_batches(seqs(&[16, 8, 8, 16, 4, 12]), 16, shape).unwrap();
        let cfg = PipelineConfig {
            block_size: 4,
            lookahead: 0,
            eps_data: 0.5,
            topology: DeviceTopology::flat(2).unwrap(),
            token_budget: 16,
            numeric: true,
            ..Default::default()
        };
        let out = pipeline_run(&cfg, &batches);
        check_event_log(&out.events, 0).unwrap();
        let kinds: Vec<EventKind> = out.events.iter().map(|e| e.kind).collect();
        for chunk in kinds.chunks(4) {
            assert_eq!(
                chunk,
                [
                    EventKind::PlanStart,
                    EventKind::PlanEnd,
                    EventKind::SimStart,
                    EventKind::SimEnd
                ]
            );
        }
        for r in &out.reports {
            assert_eq!(r.error, None);
            assert!(r.max_abs_error.unwrap() <= 1e-10);
        }
    }
}
