//! The four subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hjb_adp::ocp::{Plant, Policy};
use hjb_adp::oracle::PolicyErrorReport;
use hjb_adp::sim::{
    bench_lq_horizon_sweep, bench_policy_inference, closed_loop_sim, tracking_metrics, LqMpc, Metrics, PlantKind,
    SimTrace, TimingReport,
};
use hjb_adp::trainer::{sample_batch, train, PolicyEvaluator, TrainedPolicy, TrainingLog};
use hjb_adp::{ocp::OcpInstance, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ControllerKind, FieldError, Problem, RunConfig};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_)
            | Error::IntegrationBlowup { .. }
            | Error::Conditioning(_)
            | Error::SingularModel(_)
            | Error::DegenerateNormalization => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Shared command-line options.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

/// Loads, overrides, validates and echoes the configuration.
pub fn prepare(opts: &Options) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = opts.seed_override {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    let cfg = cfg.resolved();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("effective_config.json"), cfg.to_json() + "\n")?;
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_policy(cfg: &RunConfig, opts: &Options) -> CliResult<(TrainedPolicy, u64)> {
    let path = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("--checkpoint is required for this command".into()))?;
    let (policy, seed) = TrainedPolicy::load(path)
        .map_err(|e| CliError::Config(format!("cannot load {}: {e}", path.display())))?;
    cfg.check_architecture(&policy)?;
    Ok((policy, seed))
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    iterations: usize,
    final_policy_error: Option<f64>,
    final_hamiltonian_residual: Option<f64>,
    stopped_on_plateau: bool,
    checkpoint: String,
}

fn train_seed<P: Plant>(
    cfg: &RunConfig,
    ocp: &OcpInstance<P>,
    seed: u64,
    evaluator: Option<&mut PolicyEvaluator>,
) -> CliResult<(TrainedPolicy, TrainingLog)> {
    Ok(train(ocp, &cfg.train_config(seed), evaluator)?)
}

pub fn cmd_train(opts: &Options) -> CliResult<()> {
    let cfg = prepare(opts)?;
    let hash = cfg.hash();
    let problem = cfg.problem()?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let (policy, log) = match &problem {
            Problem::Linear(ocp) => {
                let mut ev = cfg.evaluator()?;
                train_seed(&cfg, ocp, seed, Some(&mut ev))?
            }
            Problem::Kinematic(ocp) => train_seed(&cfg, ocp, seed, None)?,
        };
        let ckpt = cfg.output_dir.join(format!("policy_seed{seed}_{hash}.ckpt"));
        policy.save(&ckpt, seed)?;
        log.write_csv(create(&cfg.output_dir.join(format!("training_seed{seed}_{hash}.csv")))?)?;
        let last = log.last();
        let s = SeedSummary {
            seed,
            iterations: last.map_or(0, |r| r.iteration),
            final_policy_error: last.and_then(|r| r.policy_error),
            final_hamiltonian_residual: last.map(|r| r.hamiltonian_residual),
            stopped_on_plateau: log.stopped_on_plateau,
            checkpoint: ckpt.display().to_string(),
        };
        match s.final_policy_error {
            Some(pe) => println!(
                "seed {seed}: {} iterations, final policy error {:.3}%",
                s.iterations,
                100.0 * pe
            ),
            None => println!("seed {seed}: {} iterations", s.iterations),
        }
        summaries.push(s);
    }
    let mut w = create(&cfg.output_dir.join(format!("train_summary_{hash}.csv")))?;
    writeln!(w, "seed,iterations,final_policy_error,final_hamiltonian_residual,stopped_on_plateau,checkpoint")?;
    for s in &summaries {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.seed,
            s.iterations,
            s.final_policy_error.map(|v| format!("{v:e}")).unwrap_or_default(),
            s.final_hamiltonian_residual.map(|v| format!("{v:e}")).unwrap_or_default(),
            s.stopped_on_plateau,
            s.checkpoint
        )?;
    }
    w.flush()?;
    let errs: Vec<f64> = summaries.iter().filter_map(|s| s.final_policy_error).collect();
    if !errs.is_empty() {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("mean final policy error over {} seed(s): {:.3}%", errs.len(), 100.0 * mean);
    }
    Ok(())
}

fn write_eval_csv<W: Write>(mut w: W, report: &PolicyErrorReport) -> CliResult<()> {
    writeln!(w, "d_m,phi_rad,r_rad_s,vy_m_s,t_s,u_star_rad,u_policy_rad")?;
    for row in &report.rows {
        for v in &row.state {
            write!(w, "{v:e},")?;
        }
        writeln!(w, "{:e},{:e},{:e}", row.t, row.u_star, row.u_policy)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(opts: &Options) -> CliResult<()> {
    let cfg = prepare(opts)?;
    if cfg.plant != PlantKind::Linear {
        return Err(CliError::Config("plant: eval needs the linear plant, which has an LQ oracle".into()));
    }
    let (policy, seed) = load_policy(&cfg, opts)?;
    let mut ev = cfg.evaluator()?;
    let report = ev.evaluate(&policy)?;
    let path = cfg.output_dir.join(format!("eval_seed{seed}_{}.csv", cfg.hash()));
    write_eval_csv(create(&path)?, &report)?;
    println!(
        "policy error {:.4}% (signed {:+.4}%) over {} test states; oracle range [{:.5}, {:.5}] rad",
        100.0 * report.mean_abs,
        100.0 * report.mean_signed,
        report.rows.len(),
        report.oracle_min,
        report.oracle_max
    );
    if report.saturated > 0 {
        println!("warning: {} test states have an oracle control beyond the steering bound", report.saturated);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsRecord {
    controller: String,
    metrics: Metrics,
    settling_time_s: Option<f64>,
}

pub fn cmd_simulate(opts: &Options) -> CliResult<()> {
    let cfg = prepare(opts)?;
    let hash = cfg.hash();
    let sim = &cfg.simulation;
    let mut traces: Vec<SimTrace> = Vec::new();
    for &kind in &sim.controllers {
        let trace = match kind {
            ControllerKind::Adp => {
                let (policy, seed) = load_policy(&cfg, opts)?;
                let label = format!("adp_seed{seed}");
                closed_loop_sim(&cfg.vehicle, cfg.plant, &policy, &sim.sim, &label)?
            }
            ControllerKind::LqMpc => {
                let mpc = LqMpc::new(&cfg.lq_problem()?)?;
                closed_loop_sim(&cfg.vehicle, cfg.plant, &mpc, &sim.sim, kind.label())?
            }
        };
        let path = cfg.output_dir.join(format!("trace_{}_{hash}.csv", trace.label));
        trace.write_csv(create(&path)?)?;
        if !trace.valid {
            return Err(CliError::Numerical(format!(
                "{} run flagged invalid ({}); partial trace in {}",
                trace.label,
                trace.failure.clone().unwrap_or_default(),
                path.display()
            )));
        }
        traces.push(trace);
    }
    let mut records = Vec::new();
    let mut text = create(&cfg.output_dir.join(format!("metrics_{hash}.txt")))?;
    println!("{:<14} {:>10} {:>10} {:>12} {:>12} {:>12} {:>10}", "controller", "I_yerr", "I_ymax", "I_theta_err", "I_theta_max", "I_ycomf", "settle_s");
    for tr in &traces {
        let m = tracking_metrics(tr)?;
        let settle = tr.settling_time(0.1);
        writeln!(text, "[{}]", tr.label)?;
        m.write_text(&mut text)?;
        writeln!(text, "settling_time_s = {}", settle.map(|s| format!("{s:.3}")).unwrap_or_else(|| "none".into()))?;
        writeln!(text)?;
        println!(
            "{:<14} {:>10.5} {:>10.5} {:>12.5} {:>12.5} {:>12.5} {:>10}",
            tr.label,
            m.i_yerr,
            m.i_ymax,
            m.i_theta_err,
            m.i_theta_max,
            m.i_ycomf,
            settle.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into())
        );
        records.push(MetricsRecord {
            controller: tr.label.clone(),
            metrics: m,
            settling_time_s: settle,
        });
    }
    text.flush()?;
    let json = serde_json::to_string_pretty(&records).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(cfg.output_dir.join(format!("metrics_{hash}.json")), json + "\n")?;
    Ok(())
}

pub fn cmd_bench(opts: &Options) -> CliResult<()> {
    let cfg = prepare(opts)?;
    let (policy, label) = match &opts.checkpoint {
        Some(_) => {
            let (p, seed) = load_policy(&cfg, opts)?;
            (p, format!("policy_seed{seed}"))
        }
        None => {
            let seed = cfg.seeds[0];
            let p = cfg
                .train_config(seed)
                .initial_policy(cfg.state_dim(), cfg.ocp.control_bound)?;
            (p, format!("policy_init_seed{seed}"))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.oracle.test_seed);
    let policy_states = sample_batch(&cfg.sampling_box(), 64, &mut rng).pairs();
    let lq_box = hjb_adp::trainer::SamplingBox::default();
    let lq_states: Vec<Vec<f64>> = sample_batch(&lq_box, 64, &mut rng).pairs().into_iter().map(|(x, _)| x).collect();
    let reps = cfg.benchmark.reps;
    let inference = bench_policy_inference(&label, &policy as &dyn Policy, &policy_states, reps)?;
    let sweep = bench_lq_horizon_sweep(&cfg.lq_problem()?, &cfg.benchmark.horizons, &lq_states, reps)?;
    let mut report = TimingReport {
        entries: vec![inference.clone()],
    };
    report.entries.extend(sweep.entries);
    report.write_csv(create(&cfg.output_dir.join(format!("timing_{}.csv", cfg.hash())))?)?;
    println!("{:<20} {:>8} {:>12} {:>12} {:>12}", "label", "horizon", "mean_ms", "median_ms", "p99_ms");
    for e in &report.entries {
        println!(
            "{:<20} {:>8} {:>12.5} {:>12.5} {:>12.5}",
            e.label,
            e.horizon.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            e.mean_ms,
            e.median_ms,
            e.p99_ms
        );
    }
    let headline = report.horizon(100).or_else(|| report.entries.iter().rev().find(|e| e.horizon.is_some()));
    if let Some(e) = headline {
        println!(
            "LQ solve / policy inference at N = {}: {:.1}x",
            e.horizon.unwrap_or(0),
            e.mean_ms / inference.mean_ms
        );
    }
    Ok(())
}
