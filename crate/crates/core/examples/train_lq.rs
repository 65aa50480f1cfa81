//! Trains the linear tracking policy and prints the training log.
//!
//! `cargo run --release --example train_lq -- [seed] [iterations] [batch]`

use hjb_adp::ocp::{Horizon, OcpInstance, UtilityWeights};
use hjb_adp::oracle::{discretize, BatchLqProblem, Discretization, LqOracle};
use hjb_adp::trainer::{train, PolicyEvaluator, TrainConfig};
use hjb_adp::vehicle::{LinearDynamics, VehicleParams};

fn main() -> hjb_adp::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let iters = args.get(1).copied().unwrap_or(10_000) as usize;
    let batch = args.get(2).copied().unwrap_or(256) as usize;
    let dynm = LinearDynamics::new(&VehicleParams::default())?;
    let ocp = OcpInstance::new(dynm, UtilityWeights::default(), Horizon::default(), 0.35)?;
    let sys = discretize(&dynm, 0.005, Discretization::Zoh)?;
    let oracle = LqOracle::new(BatchLqProblem::tracking(&sys, 0.4, 280.0, 100)?, 0.5, 0.005)?;
    let cfg = TrainConfig {
        seed,
        max_iterations: iters,
        batch_size: batch,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let mut ev = PolicyEvaluator::sampled(oracle, &cfg.sampling_box, 500, seed ^ 0x5eed, 0.35);
    let (_, log) = train(&ocp, &cfg, Some(&mut ev))?;
    log.write_csv(std::io::stdout())?;
    Ok(())
}
