use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcp_core::baselines::Baseline;
use dcp_core::model::{AttentionShape, Batch, DeviceTopology};
use dcp_core::pipeline::{
    check_event_log, compare_batch, compare_csv, generate_stream, load_batches, pipeline_run,
    plan_batch, summary_csv, sweep_block_size, sweep_csv, sweep_epsilon, sweep_sparsity,
    LengthDist, MaskChoice, PipelineConfig, SweepParam, SPARSITY_WINDOWS,
};

#[derive(Parser)]
#[command(
    name = "dcp",
    version,
    about = "Dynamic context parallelism planner and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan every batch of a sequence stream and write the per-device plans.
    Plan(RunArgs),
    /// Plan and simulate a sequence stream through the look-ahead pipeline.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Feed random tensors through the plans and check them against dense
        /// attention. Costs a dense attention per sequence; meant for small inputs.
        #[arg(long)]
        numeric: bool,
    },
    /// Compare the planner against a fixed baseline.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        baseline: Baseline,
    },
    /// Sweep one planning parameter over the first batch.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: SweepParam,
        /// Values to sweep; defaults depend on the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Write a synthetic sequence stream.
    GenData {
        #[arg(long)]
        dist: LengthDist,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value = "causal")]
        mask: MaskChoice,
        #[arg(long, default_value_t = 131072)]
        token_budget: usize,
        #[arg(long, default_value_t = AttentionShape::GQA_DEFAULT.heads)]
        heads: usize,
        #[arg(long, default_value_t = AttentionShape::GQA_DEFAULT.kv_groups)]
        kv_groups: usize,
        #[arg(long, default_value_t = AttentionShape::GQA_DEFAULT.head_dim)]
        head_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Sequence stream in JSONL (header line, then one sequence per line).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1024)]
    block_size: usize,
    #[arg(long, default_value_t = 4)]
    divisions: usize,
    #[arg(long, default_value_t = 0.4)]
    eps_inter: f64,
    #[arg(long, default_value_t = 0.1)]
    eps_intra: f64,
    #[arg(long, default_value_t = 0.05)]
    eps_data: f64,
    #[arg(long, default_value_t = 2)]
    lookahead: usize,
    #[arg(long, default_value_t = 2)]
    machines: usize,
    #[arg(long, default_value_t = 4)]
    devices_per_machine: usize,
    /// Overrides the budget in the stream header.
    #[arg(long)]
    token_budget: Option<usize>,
    /// Inter-machine bandwidth per device, bytes/s.
    #[arg(long)]
    inter_bw: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self, batches: &[Batch]) -> Result<PipelineConfig> {
        let mut topology = DeviceTopology::new(self.machines, self.devices_per_machine)?;
        if let Some(bw) = self.inter_bw {
            topology.inter_bw = bw;
            topology.validate()?;
        }
        let token_budget = self
            .token_budget
            .or_else(|| batches.first().map(|b| b.token_budget))
            .unwrap_or(131072);
        Ok(PipelineConfig {
            block_size: self.block_size,
            divisions: self.divisions,
            eps_inter: self.eps_inter,
            eps_intra: self.eps_intra,
            eps_data: self.eps_data,
            lookahead: self.lookahead,
            seed: self.seed,
            topology,
            token_budget,
            numeric: false,
            max_buffers: None,
        })
    }

    /// Batches of the input stream and the matching config.
    fn load(&self) -> Result<(Vec<Batch>, PipelineConfig)> {
        let mut batches = load_batches(&self.input)
            .with_context(|| format!("reading {}", self.input.display()))?;
        if let Some(budget) = self.token_budget {
            let shape = batches
                .first()
                .map(|b| b.shape)
                .unwrap_or(AttentionShape::GQA_DEFAULT);
            let seqs = batches.into_iter().flat_map(|b| b.sequences).collect();
            batches = dcp_core::pipeline::make_batches(seqs, budget, shape)?;
        }
        let cfg = self.config(&batches)?;
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok((batches, cfg))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_plan(args: &RunArgs) -> Result<()> {
    let (batches, cfg) = args.load()?;
    let mut failures = 0;
    for (i, batch) in batches.iter().enumerate() {
        let dir = args.out.join(format!("iter{i:04}"));
        fs::create_dir_all(&dir)?;
        match plan_batch(batch, &cfg, i as u64, None) {
            Ok(p) => {
                write(&dir.join("placement.json"), p.placement.to_json())?;
                write(&dir.join("schedule.json"), p.schedule.to_json())?;
                for plan in &p.plans {
                    write(
                        &dir.join(format!("device{:03}.json", plan.device)),
                        plan.to_json(),
                    )?;
                }
                log::info!("iteration {i}: {} plans", p.plans.len());
            }
            Err(e) => {
                failures += 1;
                log::error!("iteration {i}: {e}");
                write(&dir.join("error.txt"), e.to_string())?;
            }
        }
    }
    println!(
        "planned {} batches into {} ({failures} failed)",
        batches.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_simulate(args: &RunArgs, numeric: bool) -> Result<()> {
    let (batches, mut cfg) = args.load()?;
    cfg.numeric = numeric;
    let out = pipeline_run(&cfg, &batches);
    if let Err(e) = check_event_log(&out.events, cfg.lookahead) {
        bail!("pipeline contract violated: {e}");
    }
    write(
        &args.out.join("reports.json"),
        serde_json::to_string_pretty(&out.reports)?,
    )?;
    write(&args.out.join("summary.csv"), summary_csv(&out.reports))?;
    write(
        &args.out.join("events.json"),
        serde_json::to_string_pretty(&out.events)?,
    )?;
    let failed = out.reports.iter().filter(|r| r.error.is_some()).count();
    println!(
        "simulated {} iterations ({failed} failed); reports in {}",
        out.reports.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: &RunArgs, baseline: Baseline) -> Result<()> {
    let (batches, cfg) = args.load()?;
    let mut rows = Vec::new();
    let mut failed = 0;
    for (i, batch) in batches.iter().enumerate() {
        match compare_batch(batch, &cfg, baseline, i as u64) {
            Ok(r) => rows.push(r),
            Err(e) => {
                failed += 1;
                log::error!("iteration {i}: {e}");
            }
        }
    }
    write(
        &args.out.join("compare.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    write(&args.out.join("compare.csv"), compare_csv(&rows))?;
    let wins = rows
        .iter()
        .filter(|r| r.dcp_makespan <= r.baseline_makespan)
        .count();
    println!(
        "{} of {} batches no slower than the baseline ({failed} failed); table in {}",
        wins,
        rows.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: &RunArgs, param: SweepParam, values: &[f64]) -> Result<()> {
    let (batches, cfg) = args.load()?;
    let Some(batch) = batches.first() else {
        bail!("input stream is empty");
    };
    let rows = match param {
        SweepParam::BlockSize => {
            let sizes: Vec<usize> = if values.is_empty() {
                PipelineConfig::BLOCK_SIZES.to_vec()
            } else {
                values.iter().map(|&v| v as usize).collect()
            };
            sweep_block_size(batch, &cfg, &sizes)?
        }
        SweepParam::Epsilon => {
            let eps = if values.is_empty() {
                vec![0.05, 0.1, 0.2, 0.4, 0.8]
            } else {
                values.to_vec()
            };
            sweep_epsilon(batch, &cfg, &eps)?
        }
        SweepParam::Sparsity => {
            let w = if values.is_empty() {
                SPARSITY_WINDOWS.to_vec()
            } else {
                values.to_vec()
            };
            sweep_sparsity(batch, &cfg, &w)?
        }
    };
    write(
        &args.out.join("sweep.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    write(&args.out.join("sweep.csv"), sweep_csv(&rows))?;
    println!("{} sweep rows in {}", rows.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Plan(run) => cmd_plan(&run),
        Command::Simulate { run, numeric } => cmd_simulate(&run, numeric),
        Command::Compare { run, baseline } => cmd_compare(&run, baseline),
        Command::Sweep { run, param, values } => cmd_sweep(&run, param, &values),
        Command::GenData {
            dist,
            scale,
            count,
            mask,
            token_budget,
            heads,
            kv_groups,
            head_dim,
            seed,
            out,
        } => {
            let shape = AttentionShape {
                heads,
                kv_groups,
                head_dim,
                ..AttentionShape::GQA_DEFAULT
            };
            shape.validate()?;
            let stream = generate_stream(dist, count, scale, mask, shape, token_budget, seed);
            fs::create_dir_all(&out)?;
            let path = out.join("sequences.jsonl");
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            stream.write_jsonl(std::io::BufWriter::new(file))?;
            println!(
                "wrote {} sequences to {}",
                stream.sequences.len(),
                path.display()
            );
            Ok(())
        }
    }
}
