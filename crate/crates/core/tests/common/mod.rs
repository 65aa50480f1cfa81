//! Finite-difference gradient checks shared by the integration suites.
#![allow(dead_code)]

use hjb_adp::nn::{Activation, LayerSpec, MlpParams};
use hjb_adp::ocp::{Horizon, KinematicErrorPlant, OcpInstance, Plant, UtilityWeights};
use hjb_adp::parallel::ExecMode;
use hjb_adp::trainer::{
    actor_step, critic_step_with_targets, rollout_batch, sample_batch, InputNormalizer, SamplingBox, TrainedPolicy,
};
use hjb_adp::vehicle::{LinearDynamics, VehicleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const CONTROL_BOUND: f64 = 0.35;

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Central differences of `f` over every coordinate of `p`.
pub fn fd_gradient(p: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = q[i];
            q[i] = orig + FD_STEP;
            let plus = f(&q);
            q[i] = orig - FD_STEP;
            let minus = f(&q);
            q[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Activation {
    match rng.random_range(0..3) {
        0 => Activation::Elu,
        1 => Activation::Tanh,
        _ => Activation::Softplus,
    }
}

/// Small random network: one to three hidden layers of two to six units.
pub fn random_mlp(rng: &mut ChaCha8Rng, input: usize, output: usize, output_act: Activation) -> MlpParams {
    let depth = rng.random_range(1..=3);
    let mut specs = Vec::new();
    let mut width = input;
    for _ in 0..depth {
        let next = rng.random_range(2..=6);
        specs.push(LayerSpec::new(width, next, random_hidden(rng)));
        width = next;
    }
    specs.push(LayerSpec::new(width, output, output_act));
    MlpParams::init(&specs, rng.random()).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn with_data(net: &MlpParams, data: &[f64]) -> MlpParams {
    MlpParams::from_flat(net.specs(), data.to_vec(), net.seed()).unwrap()
}

pub fn check_param_grad(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=5);
    let output = rng.random_range(1..=3);
    let net = random_mlp(&mut rng, input, output, Activation::Linear);
    let x = random_vec(&mut rng, input);
    let up = random_vec(&mut rng, output);
    let (_, cache) = net.forward(&x).unwrap();
    let g = net.param_grad(&cache, &up).unwrap();
    let fd = fd_gradient(net.as_flat(), |p| {
        let y = with_data(&net, p).predict(&x).unwrap();
        y.iter().zip(&up).map(|(a, b)| a * b).sum()
    });
    rel_err(g.as_flat(), &fd)
}

pub fn check_input_grad(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=5);
    let net = random_mlp(&mut rng, input, 1, Activation::Softplus);
    let x = random_vec(&mut rng, input);
    let (_, cache) = net.forward(&x).unwrap();
    let g = net.input_grad(&cache).unwrap();
    let fd = fd_gradient(&x, |z| net.predict_scalar(z).unwrap());
    rel_err(&g, &fd)
}

pub fn check_mixed_param_grad(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=5);
    let net = random_mlp(&mut rng, input, 1, Activation::Softplus);
    let x = random_vec(&mut rng, input);
    let dir = random_vec(&mut rng, input);
    let g = net.mixed_param_grad(&x, &dir).unwrap();
    let fd = fd_gradient(net.as_flat(), |p| with_data(&net, p).directional_derivative(&x, &dir).unwrap());
    rel_err(g.as_flat(), &fd)
}

pub fn linear_ocp() -> OcpInstance<LinearDynamics> {
    let dynm = LinearDynamics::new(&VehicleParams::default()).unwrap();
    OcpInstance::new(dynm, UtilityWeights::default(), Horizon::default(), CONTROL_BOUND).unwrap()
}

pub fn kinematic_ocp() -> OcpInstance<KinematicErrorPlant> {
    let plant = KinematicErrorPlant::new(VehicleParams::default()).unwrap();
    OcpInstance::new(plant, UtilityWeights::default(), Horizon::default(), CONTROL_BOUND).unwrap()
}

/// Random small actor/critic pair on `bx`'s state dimension.
pub fn random_policy(rng: &mut ChaCha8Rng, bx: &SamplingBox) -> TrainedPolicy {
    let width = bx.state_dim() + 1;
    let actor = random_mlp(rng, width, 1, Activation::ScaledTanh(CONTROL_BOUND));
    let critic = random_mlp(rng, width, 1, Activation::Softplus);
    let norm = if rng.random_bool(0.5) {
        InputNormalizer::from_box(bx)
    } else {
        InputNormalizer::identity(width)
    };
    TrainedPolicy::from_parts(actor, critic, norm).unwrap()
}

pub fn check_critic_step<P: Plant>(ocp: &OcpInstance<P>, bx: &SamplingBox, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(&mut rng, bx);
    let batch = sample_batch(bx, 6, &mut rng);
    let c = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.05..1.0) };
    let exec = ExecMode::Sequential;
    let terminals = rollout_batch(&batch, &policy, ocp, exec).unwrap();
    let step = critic_step_with_targets(&batch, &terminals, &policy, ocp, c, exec).unwrap();
    let fd = fd_gradient(policy.critic.as_flat(), |p| {
        let mut q = policy.clone();
        q.critic = with_data(&policy.critic, p);
        critic_step_with_targets(&batch, &terminals, &q, ocp, c, exec).unwrap().loss
    });
    rel_err(step.grad.as_flat(), &fd)
}

pub fn check_actor_step<P: Plant>(ocp: &OcpInstance<P>, bx: &SamplingBox, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(&mut rng, bx);
    let batch = sample_batch(bx, 6, &mut rng);
    let exec = ExecMode::Sequential;
    let step = actor_step(&batch, &policy, ocp, exec).unwrap();
    let fd = fd_gradient(policy.actor.as_flat(), |p| {
        let mut q = policy.clone();
        q.actor = with_data(&policy.actor, p);
        actor_step(&batch, &q, ocp, exec).unwrap().loss
    });
    rel_err(step.grad.as_flat(), &fd)
}

/// Largest error of `check` over `count` consecutive seeds.
pub fn worst(count: u64, base: u64, check: impl Fn(u64) -> f64) -> f64 {
    (0..count).map(|i| check(base + i)).fold(0.0, f64::max)
}
