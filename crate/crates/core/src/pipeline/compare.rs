//! Side-by-side runs of the planner and a baseline on the same batch.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{plan_batch, IterationError, PipelineConfig};
use crate::baselines::{baseline_plan, Baseline, BaselineError};
use crate::blockgen::generate_blocks;
use crate::model::Batch;
use crate::plan::{compile, CompileOptions};
use crate::simexec::{run, SimReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompareError {
    #[error(transparent)]
    Planner(#[from] IterationError),
    #[error("baseline: {0}")]
    Baseline(#[from] BaselineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub iteration: u64,
    pub baseline: Baseline,
    pub tokens: usize,
    pub dcp_bytes: u64,
    pub baseline_bytes: u64,
    pub dcp_inter_machine_bytes: u64,
    pub baseline_inter_machine_bytes: u64,
    pub dcp_makespan: f64,
    pub baseline_makespan: f64,
}

impl CompareRow {
    /// Baseline makespan over planner makespan.
    pub fn speedup(&self) -> f64 {
        if self.dcp_makespan > 0.0 {
            self.baseline_makespan / self.dcp_makespan
        } else {
            1.0
        }
    }
}

/// Simulated cost of the baseline's own plan for `batch`.
pub fn simulate_baseline(
    batch: &Batch,
    cfg: &PipelineConfig,
    kind: Baseline,
    iteration: u64,
) -> Result<SimReport, CompareError> {
    let g = generate_blocks(batch, cfg.block_size).map_err(IterationError::from)?;
    let (pl, s) = baseline_plan(
        kind,
        &g,
        &cfg.topology,
        cfg.token_budget,
        cfg.eps_data,
        cfg.divisions,
    )?;
    let opts = CompileOptions {
        iteration,
        max_buffers: cfg.max_buffers,
    };
    let plans = compile(&s, &g, &pl, &opts).map_err(IterationError::from)?;
    Ok(run(&plans, None, &cfg.topology)
        .map_err(IterationError::from)?
        .report)
}

pub fn compare_batch(
    batch: &Batch,
    cfg: &PipelineConfig,
    kind: Baseline,
    iteration: u64,
) -> Result<CompareRow, CompareError> {
    let planned = plan_batch(batch, cfg, iteration, None)?;
    let dcp = run(&planned.plans, None, &cfg.topology)
        .map_err(IterationError::from)?
        .report;
    let base = simulate_baseline(batch, cfg, kind, iteration)?;
    Ok(CompareRow {
        iteration,
        baseline: kind,
        tokens: batch.total_tokens(),
        dcp_bytes: dcp.total_bytes,
        baseline_bytes: base.total_bytes,
        dcp_inter_machine_bytes: dcp.inter_machine_bytes,
        baseline_inter_machine_bytes: base.inter_machine_bytes,
        dcp_makespan: dcp.modeled_makespan,
        baseline_makespan: base.modeled_makespan,
    })
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "iteration,baseline,tokens,dcp_bytes,baseline_bytes,dcp_inter_machine_bytes,\
         baseline_inter_machine_bytes,dcp_makespan,baseline_makespan,speedup\n",
    );
    for r in rows {
        let name = serde_json::to_value(r.baseline).expect("baseline serializes");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:e},{:e},{:.4}",
            r.iteration,
            name.as_str().unwrap_or_default(),
            r.tokens,
            r.dcp_bytes,
            r.baseline_bytes,
            r.dcp_inter_machine_bytes,
            r.baseline_inter_machine_bytes,
            r.dcp_makespan,
            r.baseline_makespan,
            r.speedup(),
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskDescriptor;
    use crate::model::{AttentionShape, DeviceTopology, SequenceSpec};

    #[test]
    fn planner_moves_less_than_ring_on_short_sequences() {
        let shape = AttentionShape {
            heads: 1,
            kv_groups: 1,
            head_dim: 4,
            bytes_per_element: 2,
        };
        let seqs = (0..8)
            .map(|i| SequenceSpec::new(format!("s{i}"), 16, MaskDescriptor::Causal))
            .collect();
        let batch = Batch::new(seqs, 128, shape).unwrap();
        let cfg = PipelineConfig {
            block_size: 4,
            topology: DeviceTopology::flat(4).unwrap(),
            token_budget: 128,
            ..Default::default()
        };
        let row = compare_batch(&batch, &cfg, Baseline::Ring, 0).unwrap();
        assert!(row.dcp_bytes < row.baseline_bytes, "{row:?}");
        let dp = compare_batch(&batch, &cfg, Baseline::Dp, 0).unwrap();
        assert_eq!(dp.baseline_bytes, 0);
    }
}
