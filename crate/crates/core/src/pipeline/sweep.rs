//! Parameter sweeps over one batch: block size, imbalance tolerance and mask
//! sparsity.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{IterationError, PipelineConfig};
use crate::blockgen::{generate_blocks, BlockGraph};
use crate::hypergraph::build_hypergraph;
use crate::mask::{mask_sparsity, MaskDescriptor};
use crate::model::Batch;
use crate::placement::{
    communication_volume, place_relaxed, project_placement, within_caps, PlacementConfig,
    PlacementResult, PlacementStrategy,
};
use crate::scheduler::{schedule, schedule_cost};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    BlockSize,
    Epsilon,
    Sparsity,
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "block_size" => Ok(SweepParam::BlockSize),
            "epsilon" => Ok(SweepParam::Epsilon),
            "sparsity" => Ok(SweepParam::Sparsity),
            other => Err(format!("unknown sweep parameter {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub block_size: usize,
    pub eps_inter: f64,
    pub eps_intra: f64,
    /// Data tolerance the placement was found at.
    pub eps_data: f64,
    /// Attended pairs over causal pairs.
    pub sparsity: f64,
    pub comp_blocks: usize,
    pub comm_bytes: u64,
    pub inter_machine_bytes: u64,
    pub compute_imbalance: f64,
    pub modeled_makespan: f64,
    pub plan_seconds: f64,
}

#[allow(clippy::too_many_arguments)]
fn row(
    param: SweepParam,
    value: f64,
    cfg: &PipelineConfig,
    eps_data: f64,
    sparsity: f64,
    g: &BlockGraph,
    pl: &PlacementResult,
    plan_seconds: f64,
) -> Result<SweepRow, IterationError> {
    let vol = communication_volume(g, pl);
    let s = schedule(g, pl, cfg.divisions)?;
    Ok(SweepRow {
        param,
        value,
        block_size: cfg.block_size,
        eps_inter: cfg.eps_inter,
        eps_intra: cfg.eps_intra,
        eps_data,
        sparsity,
        comp_blocks: g.comp_blocks.len(),
        comm_bytes: vol.total,
        inter_machine_bytes: vol.inter_machine,
        compute_imbalance: pl.compute_imbalance(),
        modeled_makespan: schedule_cost(&s, &cfg.topology).modeled_makespan,
        plan_seconds,
    })
}

/// Placement from a per-vertex device vector (groups first, then computations).
fn from_vertices(g: &BlockGraph, cfg: &PipelineConfig, v: &[u32]) -> PlacementResult {
    let ng = g.groups.len();
    PlacementResult::from_assignment(
        g,
        &cfg.topology,
        PlacementStrategy::Hierarchical,
        v[..ng].to_vec(),
        v[ng..].to_vec(),
    )
}

/// Place at each block size from coarsest to finest. Each finer placement
/// starts from the projection of the previous one and is never worse than it.
/// Rows come back smallest block size first.
pub fn sweep_block_size(
    batch: &Batch,
    cfg: &PipelineConfig,
    sizes: &[usize],
) -> Result<Vec<SweepRow>, IterationError> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    let sparsity = mask_sparsity(batch)?;
    let mut prev: Option<(BlockGraph, PlacementResult)> = None;
    let mut rows = Vec::with_capacity(sizes.len());
    // the tolerance only ever widens, so a projected coarser placement
    // always satisfies the current one
    let mut eps_data = cfg.eps_data;
    for b in sizes {
        let c = PipelineConfig {
            block_size: b,
            eps_data,
            ..cfg.clone()
        };
        let start = Instant::now();
        let g = generate_blocks(batch, b)?;
        let hint = prev
            .as_ref()
            .and_then(|(pg, ppl)| project_placement(pg, ppl, &g));
        let (mut pl, eps) = place_relaxed(&g, &c.topology, &c.placement(), hint.as_deref())?;
        eps_data = eps;
        if let Some(h) = &hint {
            let projected = from_vertices(&g, &c, h);
            if communication_volume(&g, &projected).total < communication_volume(&g, &pl).total {
                pl = projected;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        rows.push(row(
            SweepParam::BlockSize,
            b as f64,
            &c,
            eps_data,
            sparsity,
            &g,
            &pl,
            secs,
        )?);
        prev = Some((g, pl));
    }
    rows.reverse();
    Ok(rows)
}

/// Place with increasing tolerance (applied at both levels). Each run starts
/// from the previous solution, which stays feasible as the caps widen.
pub fn sweep_epsilon(
    batch: &Batch,
    cfg: &PipelineConfig,
    epsilons: &[f64],
) -> Result<Vec<SweepRow>, IterationError> {
    let mut eps = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    let sparsity = mask_sparsity(batch)?;
    let g = generate_blocks(batch, cfg.block_size)?;
    let bh = build_hypergraph(&g);
    let mut prev: Option<PlacementResult> = None;
    let mut rows = Vec::with_capacity(eps.len());
    let mut eps_data = cfg.eps_data;
    for e in eps {
        let c = PipelineConfig {
            eps_inter: e,
            eps_intra: e,
            eps_data,
            ..cfg.clone()
        };
        let start = Instant::now();
        let hint = prev.as_ref().map(|p| p.vertex_assignment(&bh));
        let (mut pl, eps) = place_relaxed(&g, &c.topology, &c.placement(), hint.as_deref())?;
        eps_data = eps;
        if let Some(p) = prev.take() {
            if communication_volume(&g, &p).total < communication_volume(&g, &pl).total {
                pl = p;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        rows.push(row(
            SweepParam::Epsilon,
            e,
            &c,
            eps_data,
            sparsity,
            &g,
            &pl,
            secs,
        )?);
        prev = Some(pl);
    }
    Ok(rows)
}

/// Window fractions used by [`sweep_sparsity`].
pub const SPARSITY_WINDOWS: [f64; 7] = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0];

/// Replace every mask with a sink-plus-window mask whose window is a
/// fraction of the sequence length and place the result. All points share
/// one data tolerance: the widest any of them needed.
pub fn sweep_sparsity(
    batch: &Batch,
    cfg: &PipelineConfig,
    windows: &[f64],
) -> Result<Vec<SweepRow>, IterationError> {
    let mut c = cfg.clone();
    loop {
        let rows = sparsity_pass(batch, &c, windows)?;
        let widest = rows.iter().map(|r| r.eps_data).fold(c.eps_data, f64::max);
        if widest == c.eps_data {
            return Ok(rows);
        }
        c.eps_data = widest;
    }
}

fn sparsity_pass(
    batch: &Batch,
    cfg: &PipelineConfig,
    windows: &[f64],
) -> Result<Vec<SweepRow>, IterationError> {
    // widest first: a narrower window attends a subset of the pairs, so the
    // previous placement projects onto it
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| windows[b].total_cmp(&windows[a]));
    let mut rows: Vec<Option<SweepRow>> = vec![None; windows.len()];
    let mut prev: Option<(BlockGraph, PlacementResult)> = None;
    for i in order {
        let f = windows[i];
        let mut b = batch.clone();
        for s in &mut b.sequences {
            s.mask = MaskDescriptor::Lambda {
                sink_tokens: (s.length / 64).min(64),
                window: ((s.length as f64 * f).ceil() as usize).max(1),
            };
        }
        let sparsity = mask_sparsity(&b)?;
        let start = Instant::now();
        let g = generate_blocks(&b, cfg.block_size)?;
        let hint = prev
            .as_ref()
            .and_then(|(pg, ppl)| project_placement(pg, ppl, &g));
        let (mut pl, eps_data) =
            place_relaxed(&g, &cfg.topology, &cfg.placement(), hint.as_deref())?;
        if let Some(h) = &hint {
            let projected = from_vertices(&g, cfg, h);
            let caps = PlacementConfig {
                eps_data,
                ..cfg.placement()
            };
            if within_caps(&projected, &cfg.topology, &caps)
                && communication_volume(&g, &projected).total < communication_volume(&g, &pl).total
            {
                pl = projected;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        rows[i] = Some(row(
            SweepParam::Sparsity,
            f,
            cfg,
            eps_data,
            sparsity,
            &g,
            &pl,
            secs,
        )?);
        prev = Some((g, pl));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // ties share the mean rank
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "param,value,block_size,eps_inter,eps_intra,eps_data,sparsity,comp_blocks,comm_bytes,\
         inter_machine_bytes,compute_imbalance,modeled_makespan,plan_seconds\n",
    );
    for r in rows {
        let param = serde_json::to_value(r.param).expect("param serializes");
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{},{},{:.6},{:e},{:.6}",
            param.as_str().unwrap_or_default(),
            r.value,
            r.block_size,
            r.eps_inter,
            r.eps_intra,
            r.eps_data,
            r.sparsity,
            r.comp_blocks,
            r.comm_bytes,
            r.inter_machine_bytes,
            r.compute_imbalance,
            r.modeled_makespan,
            r.plan_seconds,
        )
        .expect("write to string");
    }
    out
}
