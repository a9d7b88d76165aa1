//! Command-line surface: estimate, optimize, simulate, evaluate, pipeline.
//!
//! Structured artifacts are JSON, bulk series are CSV. Every command writes a
//! manifest with input digests and seeds so a run can be replayed exactly.
//! Diagnostics go to stderr; stdout carries the result document. Exit codes:
//! 1 I/O, 2 estimation, 3 optimization, 4 simulation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfd::{phase_performance, write_curve_csv, PhaseTiming};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{parse_trajectories, write_trajectories, Trajectory};
use crate::optimizer::{
    build_phase_models, optimize, ObjectiveValue, OptimizeOptions, TracePoint,
};
use crate::pipeline::{estimate_from_trajectories, snapshots, IntersectionEstimate};
use crate::profile::{build_histogram, expected_cycle_arrival_time};
use crate::ring::DualRingPlan;
use crate::sim::{
    generate_arrivals, improvement, mape, run_simulation, sample_cvs, GroundTruth, Scenario,
};

#[derive(Parser, Debug)]
#[command(name = "cfdopt", version, about = "CV-trajectory-driven fixed-time signal timing")]
pub struct Cli {
    /// Worker threads for the optimizer (also CFDOPT_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate per-phase demand from CV trajectories.
    Estimate(EstimateArgs),
    /// Search cycle length, splits and optionally the reference point.
    Optimize(OptimizeArgs),
    /// Run the ground-truth simulator under a plan.
    Simulate(SimulateArgs),
    /// Score estimates against truth and optimized against initial runs.
    Evaluate(EvaluateArgs),
    /// Closed loop: simulate initial, sample CVs, estimate, optimize,
    /// simulate optimized, report improvements.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dump per-phase cycle-arrival histograms (CSV) into this directory.
    #[arg(long)]
    pub hist_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub trajectories: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Also optimize the reference point.
    #[arg(long)]
    pub ref_point: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate trace CSV (default: <out>.trace.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Export S_a/S_d curves of the chosen plan per phase into this directory.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Plan JSON (an optimize result); defaults to the config's initial plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix: writes <prefix>.trajectories.csv, <prefix>.truth.json,
    /// <prefix>.manifest.json.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Estimate JSON to score against truth.
    #[arg(long, requires = "truth")]
    pub estimates: Option<PathBuf>,
    /// Ground truth JSON for the estimate comparison.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Initial-plan truth JSON for the improvement comparison.
    #[arg(long, requires = "optimized")]
    pub initial: Option<PathBuf>,
    /// Optimized-plan truth JSON.
    #[arg(long)]
    pub optimized: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CV penetration rate for sampling (overrides the config value).
    #[arg(long)]
    pub penetration: Option<f64>,
    #[arg(long)]
    pub ref_point: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl Cli {
    pub fn run(self) -> Result<()> {
        let threads = self
            .threads
            .or_else(|| std::env::var("CFDOPT_THREADS").ok().and_then(|s| s.parse().ok()));
        match threads {
            Some(n) if n > 0 => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
                pool.install(|| dispatch(self.command))
            }
            _ => dispatch(self.command),
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: Option<u64>,
    penetration: Option<f64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(InputDigest { path: path.display().to_string(), sha256: hex::encode(hasher.finalize()) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    path: &Path,
    command: &str,
    seed: Option<u64>,
    penetration: Option<f64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        penetration,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(path, &manifest)
}

fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path)?;
    let outcome = parse_trajectories(std::io::BufReader::new(file))?;
    if outcome.malformed_rows > 0 || outcome.dropped_vehicles > 0 {
        log::warn!(
            "{}: {} malformed rows, {} vehicles dropped",
            path.display(),
            outcome.malformed_rows,
            outcome.dropped_vehicles
        );
    }
    Ok(outcome.trajectories)
}

fn print_stdout<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let trajectories = load_trajectories(&args.trajectories)?;
    let (estimate, observations) = estimate_from_trajectories(&trajectories, &cfg)?;
    write_json(&args.out, &estimate)?;
    if let Some(dir) = &args.hist_dir {
        fs::create_dir_all(dir)?;
        let initial = cfg.initial_dual_ring()?;
        for obs in &observations {
            if obs.expected_arrivals.is_empty() {
                continue;
            }
            let t_ec: Vec<f64> = obs
                .expected_arrivals
                .iter()
                .map(|&t| expected_cycle_arrival_time(t, initial.c, initial.dphi))
                .collect::<Result<_>>()?;
            let hist = build_histogram(&t_ec, initial.c, cfg.profile.bin)?;
            let file = fs::File::create(dir.join(format!("phase_{}.csv", obs.phase_id)))?;
            hist.write_csv(std::io::BufWriter::new(file))?;
        }
    }
    write_manifest(
        &args.out.with_extension("manifest.json"),
        "estimate",
        None,
        cfg.penetration,
        &[&args.trajectories, &args.config],
        &[&args.out],
    )?;
    print_stdout(&estimate)
}

/// The optimize result document.
#[derive(Debug, Serialize, Deserialize)]
pub struct OptimizeArtifact {
    #[serde(rename = "C")]
    pub c: f64,
    pub dphi: f64,
    pub phases: Vec<PlanPhase>,
    pub f_green: f64,
    pub f_delay: f64,
    pub f_hybrid: f64,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanPhase {
    pub k: u8,
    pub g_s: f64,
    pub g_e: f64,
}

impl OptimizeArtifact {
    fn new(plan: &DualRingPlan<f64>, objective: &ObjectiveValue<f64>, trace: Vec<TracePoint>) -> Self {
        OptimizeArtifact {
            c: plan.c,
            dphi: plan.dphi,
            phases: plan
                .greens
                .iter()
                .enumerate()
                .map(|(i, &(g_s, g_e))| PlanPhase { k: i as u8 + 1, g_s, g_e })
                .collect(),
            f_green: objective.f_green,
            f_delay: objective.f_delay,
            f_hybrid: objective.f_hybrid,
            trace,
        }
    }

    pub fn to_plan(&self, cfg: &RunConfig) -> Result<DualRingPlan<f64>> {
        let mut greens = [(0.0, 0.0); 8];
        if self.phases.len() != 8 {
            return Err(Error::Config("plan must list 8 phases".into()));
        }
        for p in &self.phases {
            if !(1..=8).contains(&p.k) {
                return Err(Error::Config("phase index outside 1..8".into()));
            }
            greens[(p.k - 1) as usize] = (p.g_s, p.g_e);
        }
        let plan =
            DualRingPlan { c: self.c, dphi: self.dphi, greens, yellow: cfg.y, all_red: cfg.r_a };
        plan.validate(cfg.g_min)?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut out = String::from("C,dphi,f\n");
    for t in trace {
        match t.f {
            Some(f) => out.push_str(&format!("{},{},{}\n", t.c, t.dphi, f)),
            None => out.push_str(&format!("{},{},inf\n", t.c, t.dphi)),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn export_curves(
    dir: &Path,
    plan: &DualRingPlan<f64>,
    cfg: &RunConfig,
    models: &[crate::optimizer::PhaseModel<f64>],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, model) in models.iter().enumerate() {
        let (g_s, g_e) = plan.greens[k];
        let timing =
            PhaseTiming::new(g_s, g_e, plan.yellow, plan.all_red, cfg.g_min, model.lanes, cfg.lost_time)?;
        let perf =
            phase_performance(&model.wave, &model.curve, &timing, &model.fit, cfg.a3_variant)?;
        let file = fs::File::create(dir.join(format!("phase_{}.csv", k + 1)))?;
        write_curve_csv(
            &model.curve,
            &timing,
            &model.fit,
            perf.t_a,
            0.1,
            std::io::BufWriter::new(file),
        )?;
    }
    Ok(())
}

fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let estimates = IntersectionEstimate::load(&args.estimates)?;
    let trajectories = load_trajectories(&args.trajectories)?;
    let snaps = snapshots(&estimates, &trajectories, &cfg)?;
    let outcome =
        optimize(&snaps, &cfg, &OptimizeOptions { ref_point: args.ref_point, seed: args.seed })?;
    let artifact = OptimizeArtifact::new(&outcome.plan, &outcome.objective, outcome.trace);
    write_json(&args.out, &artifact)?;
    let trace_path =
        args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_trace_csv(&trace_path, &artifact.trace)?;
    if let Some(dir) = &args.curves_dir {
        let models = build_phase_models(&snaps, &cfg, outcome.plan.c, outcome.plan.dphi)?;
        export_curves(dir, &outcome.plan, &cfg, &models)?;
    }
    write_manifest(
        &args.out.with_extension("manifest.json"),
        "optimize",
        Some(args.seed),
        cfg.penetration,
        &[&args.estimates, &args.trajectories, &args.config],
        &[&args.out, &trace_path],
    )?;
    print_stdout(&artifact)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let scenario = Scenario::load(&args.scenario)?;
    let plan = match &args.plan {
        Some(path) => OptimizeArtifact::load(path)?.to_plan(&cfg)?,
        None => cfg.initial_dual_ring()?,
    };
    let arrivals = generate_arrivals(&scenario.demand, &cfg.lanes, args.seed);
    let out = run_simulation(
        &plan,
        &arrivals,
        &cfg.lanes,
        &scenario.geometry,
        cfg.lost_time,
        &scenario.demand,
        scenario.tick,
    )?;
    let prefix = args.out_prefix.display().to_string();
    let traj_path = PathBuf::from(format!("{prefix}.trajectories.csv"));
    let truth_path = PathBuf::from(format!("{prefix}.truth.json"));
    if let Some(dir) = args.out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file = fs::File::create(&traj_path)?;
    write_trajectories(std::io::BufWriter::new(file), &out.trajectories)?;
    write_json(&truth_path, &out.truth)?;
    let mut inputs: Vec<&Path> = vec![args.scenario.as_path(), args.config.as_path()];
    if let Some(p) = &args.plan {
        inputs.push(p.as_path());
    }
    write_manifest(
        &PathBuf::from(format!("{prefix}.manifest.json")),
        "simulate",
        Some(args.seed),
        cfg.penetration,
        &inputs,
        &[&traj_path, &truth_path],
    )?;
    print_stdout(&out.truth)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub delay: f64,
    pub queue: f64,
    pub stops: f64,
    pub throughput: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape_lambda0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imp: Option<ImprovementReport>,
}

fn load_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn score_estimates(estimates: &IntersectionEstimate, truth: &GroundTruth) -> Result<(f64, usize)> {
    let pairs: Vec<(f64, f64)> = estimates
        .phases
        .iter()
        .zip(&truth.phases)
        .map(|(e, t)| (e.lambda0, t.rate))
        .collect();
    mape(&pairs)
}

fn score_improvement(initial: &GroundTruth, optimized: &GroundTruth) -> Result<ImprovementReport> {
    Ok(ImprovementReport {
        delay: improvement(initial.avg_stopped_delay_s, optimized.avg_stopped_delay_s)?,
        queue: improvement(initial.avg_queue_m, optimized.avg_queue_m)?,
        stops: improvement(initial.stops_per_veh, optimized.stops_per_veh)?,
        throughput: improvement(initial.throughput, optimized.throughput)?,
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut report =
        EvaluationReport { mape_lambda0: None, phases_used: None, imp: None };
    if let (Some(est_path), Some(truth_path)) = (&args.estimates, &args.truth) {
        let estimates = IntersectionEstimate::load(est_path)?;
        let truth = load_truth(truth_path)?;
        let (m, used) = score_estimates(&estimates, &truth)?;
        report.mape_lambda0 = Some(m);
        report.phases_used = Some(used);
    }
    if let (Some(ini_path), Some(opt_path)) = (&args.initial, &args.optimized) {
        let initial = load_truth(ini_path)?;
        let optimized = load_truth(opt_path)?;
        report.imp = Some(score_improvement(&initial, &optimized)?);
    }
    if report.mape_lambda0.is_none() && report.imp.is_none() {
        return Err(Error::Config(
            "nothing to evaluate: pass --estimates/--truth and/or --initial/--optimized".into(),
        ));
    }
    write_json(&args.out, &report)?;
    print_stdout(&report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub penetration: f64,
    pub seed: u64,
    pub mape_lambda0: f64,
    pub imp: ImprovementReport,
    pub initial: GroundTruth,
    pub optimized: GroundTruth,
    pub plan_c: f64,
    pub plan_dphi: f64,
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    let scenario = Scenario::load(&args.scenario)?;
    let penetration = args
        .penetration
        .or(cfg.penetration)
        .ok_or_else(|| Error::Config("set --penetration or config.penetration".into()))?;
    if !(0.0..=1.0).contains(&penetration) || penetration == 0.0 {
        return Err(Error::Config("penetration must be in (0, 1]".into()));
    }
    cfg.penetration = Some(penetration);
    fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);

    let initial_plan = cfg.initial_dual_ring()?;
    let arrivals = generate_arrivals(&scenario.demand, &cfg.lanes, args.seed);
    let initial_out = run_simulation(
        &initial_plan,
        &arrivals,
        &cfg.lanes,
        &scenario.geometry,
        cfg.lost_time,
        &scenario.demand,
        scenario.tick,
    )?;
    write_json(&path("initial.truth.json"), &initial_out.truth)?;

    let cvs = sample_cvs(&initial_out.trajectories, penetration, args.seed ^ 0xC5A1_5EED);
    let cvs_path = path("cvs.csv");
    let file = fs::File::create(&cvs_path)?;
    write_trajectories(std::io::BufWriter::new(file), &cvs)?;

    let (estimate, _) = estimate_from_trajectories(&cvs, &cfg)?;
    write_json(&path("estimate.json"), &estimate)?;

    let snaps = snapshots(&estimate, &cvs, &cfg)?;
    let outcome =
        optimize(&snaps, &cfg, &OptimizeOptions { ref_point: args.ref_point, seed: args.seed })?;
    let artifact = OptimizeArtifact::new(&outcome.plan, &outcome.objective, outcome.trace);
    write_json(&path("plan.json"), &artifact)?;
    write_trace_csv(&path("trace.csv"), &artifact.trace)?;

    let optimized_out = run_simulation(
        &outcome.plan,
        &arrivals,
        &cfg.lanes,
        &scenario.geometry,
        cfg.lost_time,
        &scenario.demand,
        scenario.tick,
    )?;
    write_json(&path("optimized.truth.json"), &optimized_out.truth)?;

    let (mape_lambda0, _) = score_estimates(&estimate, &initial_out.truth)?;
    let imp = score_improvement(&initial_out.truth, &optimized_out.truth)?;
    let report = PipelineReport {
        penetration,
        seed: args.seed,
        mape_lambda0,
        imp,
        initial: initial_out.truth,
        optimized: optimized_out.truth,
        plan_c: outcome.plan.c,
        plan_dphi: outcome.plan.dphi,
    };
    write_json(&path("report.json"), &report)?;
    write_manifest(
        &path("manifest.json"),
        "pipeline",
        Some(args.seed),
        Some(penetration),
        &[&args.scenario, &args.config],
        &[
            &path("initial.truth.json"),
            &cvs_path,
            &path("estimate.json"),
            &path("plan.json"),
            &path("optimized.truth.json"),
            &path("report.json"),
        ],
    )?;
    print_stdout(&report)
}
