//! Actor-critic policy iteration on the finite-horizon HJB equation.
//!
//! Each iteration draws a fresh batch of `(x, t)` pairs, rolls the current
//! policy out to the final time, fits the critic so that the Hamiltonian
//! matches the terminal utility, and then moves the actor downhill on the
//! Hamiltonian under the updated critic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{
    adam_step_in_place, read_checkpoint, write_checkpoint, Activation, AdamState, BatchForward,
    LayerSpec, MlpParams, ParamGradient,
};
use crate::ocp::{rollout_terminal_batch_with, BatchPolicy, OcpInstance, Plant, Policy, RolloutWorkspace};
use crate::oracle::{policy_error, LqOracle, PolicyErrorReport};
use crate::parallel::{map_chunks, ExecMode};
use crate::vehicle::Control;

/// Samples per rollout chunk; each chunk is integrated in lock step.
pub const ROLLOUT_CHUNK: usize = 64;
/// Samples per gradient-accumulation chunk.
pub const GRAD_CHUNK: usize = 32;

/// Uniform sampling domain for states and start times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for SamplingBox {
    fn default() -> Self {
        Self {
            lower: vec![-3.0, -0.3, -1.0, -2.0],
            upper: vec![3.0, 0.3, 1.0, 2.0],
            t_min: 0.0,
            t_max: 0.5,
        }
    }
}

impl SamplingBox {
    /// Lateral and heading error only, for the kinematic plant.
    pub fn kinematic() -> Self {
        Self {
            lower: vec![-3.0, -0.3],
            upper: vec![3.0, 0.3],
            t_min: 0.0,
            t_max: 0.5,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config(
                "sampling box bounds must be nonempty and of equal length".into(),
            ));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!(
                    "sampling box dimension {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        if !(self.t_min < self.t_max) || self.t_min < 0.0 {
            return Err(Error::Config(format!(
                "sampling time range must satisfy 0 <= t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Row-major batch of states with their start times.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub state_dim: usize,
    pub states: Vec<f64>,
    pub times: Vec<f64>,
}

impl Batch {
    pub fn new(state_dim: usize, states: Vec<f64>, times: Vec<f64>) -> Result<Self> {
        check_len("batch states", times.len() * state_dim, states.len())?;
        Ok(Self {
            state_dim,
            states,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn pairs(&self) -> Vec<(Vec<f64>, f64)> {
        (0..self.len()).map(|i| (self.state(i).to_vec(), self.times[i])).collect()
    }
}

/// `n` i.i.d. uniform draws from the box; per sample the state coordinates
/// are drawn first, then the time.
pub fn sample_batch<R: Rng + ?Sized>(bx: &SamplingBox, n: usize, rng: &mut R) -> Batch {
    let dim = bx.state_dim();
    let mut states = Vec::with_capacity(n * dim);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        for (lo, hi) in bx.lower.iter().zip(&bx.upper) {
            states.push(lo + (hi - lo) * rng.random::<f64>());
        }
        times.push(bx.t_min + (bx.t_max - bx.t_min) * rng.random::<f64>());
    }
    Batch {
        state_dim: dim,
        states,
        times,
    }
}

/// Fixed affine map `z = (input - shift) / scale` applied to `[x; t]` before
/// both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNormalizer {
    pub fn identity(input_width: usize) -> Self {
        Self {
            shift: vec![0.0; input_width],
            scale: vec![1.0; input_width],
        }
    }

    /// Maps the box (and its time range) onto `[-1, 1]`.
    pub fn from_box(bx: &SamplingBox) -> Self {
        let mut shift: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let mut scale: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| 0.5 * (u - l)).collect();
        shift.push(0.5 * (bx.t_min + bx.t_max));
        scale.push(0.5 * (bx.t_max - bx.t_min));
        Self { shift, scale }
    }

    pub fn width(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift.len() != self.scale.len() {
            return Err(Error::Config("normalizer shift and scale lengths differ".into()));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("normalizer entries must be finite with positive scale".into()));
        }
        Ok(())
    }

    /// Writes the normalized `[x; t]` into `out`.
    #[inline]
    pub fn apply(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            out[i] = (x[i] - self.shift[i]) / self.scale[i];
        }
        out[n] = (t - self.shift[n]) / self.scale[n];
    }

    pub fn normalized(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut z = vec![0.0; x.len() + 1];
        self.apply(x, t, &mut z);
        z
    }
}

/// Hidden-layer layout shared by actor and critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32, 32, 32],
            hidden_activation: Activation::Elu,
        }
    }
}

impl NetworkConfig {
    pub fn specs(&self, input_width: usize, output: Activation) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut w = input_width;
        for &h in &self.hidden_widths {
            specs.push(LayerSpec::new(w, h, self.hidden_activation));
            w = h;
        }
        specs.push(LayerSpec::new(w, 1, output));
        specs
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        self.hidden_activation.validate()
    }
}

/// Actor `π(x, t; θ)` with bounded output and critic `V(x, t; w) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPolicy {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub normalizer: InputNormalizer,
}

impl TrainedPolicy {
    pub fn init(
        net: &NetworkConfig,
        state_dim: usize,
        control_bound: f64,
        normalizer: InputNormalizer,
        actor_seed: u64,
        critic_seed: u64,
    ) -> Result<Self> {
        net.validate()?;
        normalizer.validate()?;
        check_len("normalizer width", state_dim + 1, normalizer.width())?;
        let actor = MlpParams::init(&net.specs(state_dim + 1, Activation::ScaledTanh(control_bound)), actor_seed)?;
        let critic = MlpParams::init(&net.specs(state_dim + 1, Activation::Softplus), critic_seed)?;
        Self::from_parts(actor, critic, normalizer)
    }

    pub fn from_parts(actor: MlpParams, critic: MlpParams, normalizer: InputNormalizer) -> Result<Self> {
        normalizer.validate()?;
        let width = normalizer.width();
        check_len("actor input", width, actor.input_width())?;
        check_len("critic input", width, critic.input_width())?;
        check_len("actor output", 1, actor.output_width())?;
        check_len("critic output", 1, critic.output_width())?;
        let bounded = matches!(actor.specs().last().map(|s| s.activation), Some(Activation::ScaledTanh(_)));
        if !bounded {
            return Err(Error::Contract("actor output layer must be scaled_tanh".into()));
        }
        if critic.specs().last().map(|s| s.activation) != Some(Activation::Softplus) {
            return Err(Error::Contract("critic output layer must be softplus".into()));
        }
        Ok(Self {
            actor,
            critic,
            normalizer,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.normalizer.width() - 1
    }

    /// Steering bound enforced by the actor's output layer.
    pub fn control_bound(&self) -> f64 {
        match self.actor.specs().last().map(|s| s.activation) {
            Some(Activation::ScaledTanh(b)) => b,
            _ => f64::INFINITY,
        }
    }

    pub fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        check_len("state", self.state_dim(), x.len())?;
        self.critic.predict_scalar(&self.normalizer.normalized(x, t))
    }

    /// `∂V/∂x` in original state units.
    pub fn value_grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("state", self.state_dim(), x.len())?;
        let (_, cache) = self.critic.forward(&self.normalizer.normalized(x, t))?;
        let gz = self.critic.input_grad(&cache)?;
        Ok((0..x.len()).map(|i| gz[i] / self.normalizer.scale[i]).collect())
    }

    pub fn try_control(&self, x: &[f64], t: f64) -> Result<f64> {
        check_len("state", self.state_dim(), x.len())?;
        self.actor.predict_scalar(&self.normalizer.normalized(x, t))
    }

    pub fn write<W: Write>(&self, w: W, seed: u64) -> Result<()> {
        write_checkpoint(
            w,
            seed,
            &[("actor", &self.actor), ("critic", &self.critic)],
            &[
                ("input_shift", &self.normalizer.shift),
                ("input_scale", &self.normalizer.scale),
            ],
        )
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?), seed)
    }

    /// Loads a checkpoint; a missing normalizer means identity.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
        let actor = ck
            .network("actor")
            .ok_or_else(|| Error::Checkpoint("missing network `actor`".into()))?
            .clone();
        let critic = ck
            .network("critic")
            .ok_or_else(|| Error::Checkpoint("missing network `critic`".into()))?
            .clone();
        let normalizer = match (ck.vector("input_shift"), ck.vector("input_scale")) {
            (Some(shift), Some(scale)) => InputNormalizer {
                shift: shift.to_vec(),
                scale: scale.to_vec(),
            },
            (None, None) => InputNormalizer::identity(actor.input_width()),
            _ => return Err(Error::Checkpoint("incomplete input normalizer".into())),
        };
        Ok((Self::from_parts(actor, critic, normalizer)?, ck.seed))
    }
}

impl Policy for TrainedPolicy {
    fn control(&self, x: &[f64], t: f64) -> f64 {
        let mut z = [0.0; 16];
        let w = self.normalizer.width();
        if w <= z.len() && x.len() + 1 == w {
            self.normalizer.apply(x, t, &mut z[..w]);
            self.actor.predict_scalar(&z[..w]).unwrap_or(f64::NAN)
        } else {
            self.try_control(x, t).unwrap_or(f64::NAN)
        }
    }
}

/// Single actor forward pass. The output is bounded by construction.
pub fn policy_eval(policy: &TrainedPolicy, x: &[f64], t: f64) -> Control {
    Control::new(policy.control(x, t))
}

/// Batched actor evaluation through [`BatchForward`].
#[derive(Debug, Clone)]
pub struct PolicyBatch<'a> {
    policy: &'a TrainedPolicy,
    fwd: BatchForward,
    inputs: Vec<f64>,
}

impl<'a> PolicyBatch<'a> {
    pub fn new(policy: &'a TrainedPolicy) -> Self {
        Self {
            policy,
            fwd: BatchForward::new(),
            inputs: Vec::new(),
        }
    }
}

impl BatchPolicy for PolicyBatch<'_> {
    fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    fn controls(&mut self, states: &[f64], times: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.policy.state_dim();
        let w = n + 1;
        let rows = times.len();
        check_len("batch states", rows * n, states.len())?;
        self.inputs.clear();
        self.inputs.resize(rows * w, 0.0);
        for (r, &t) in times.iter().enumerate() {
            self.policy
                .normalizer
                .apply(&states[r * n..(r + 1) * n], t, &mut self.inputs[r * w..(r + 1) * w]);
        }
        let y = self.fwd.run(&self.policy.actor, &self.inputs, rows)?;
        out[..rows].copy_from_slice(y);
        Ok(())
    }
}

/// Terminal states and utilities of the whole batch under the current actor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTerminals {
    pub states: Vec<f64>,
    pub utilities: Vec<f64>,
}

/// Rolls every sample out to the final time, chunk by chunk.
pub fn rollout_batch<P: Plant>(
    batch: &Batch,
    policy: &TrainedPolicy,
    ocp: &OcpInstance<P>,
    exec: ExecMode,
) -> Result<BatchTerminals> {
    let n = batch.state_dim;
    let parts = map_chunks(exec, batch.len(), ROLLOUT_CHUNK, |r| {
        let mut bp = PolicyBatch::new(policy);
        let mut ws = RolloutWorkspace::default();
        rollout_terminal_batch_with(
            &mut bp,
            ocp,
            &batch.states[r.start * n..r.end * n],
            &batch.times[r.clone()],
            &mut ws,
        )
    });
    let mut out = BatchTerminals {
        states: Vec::with_capacity(batch.len() * n),
        utilities: Vec::with_capacity(batch.len()),
    };
    for part in parts {
        for term in part? {
            out.states.extend_from_slice(&term.state);
            out.utilities.push(term.utility);
        }
    }
    Ok(out)
}

/// Loss, gradient and residual statistics of one critic evaluation.
#[derive(Debug, Clone)]
pub struct CriticStep {
    pub loss: f64,
    pub grad: ParamGradient,
    /// Mean Hamiltonian over the batch.
    pub mean_hamiltonian: f64,
    /// Mean `|H - l_T|` over the batch.
    pub mean_abs_residual: f64,
}

/// Policy evaluation: `J = mean ½(H - l_T)² [+ ½ c·mean V(x_T, T)²]`.
///
/// The gradient flows only through `∂V/∂x · f`; the rollout target `l_T` is
/// a constant.
pub fn critic_step<P: Plant>(
    batch: &Batch,
    policy: &TrainedPolicy,
    ocp: &OcpInstance<P>,
    terminal_value_weight: f64,
    exec: ExecMode,
) -> Result<CriticStep> {
    if batch.is_empty() {
        return Err(Error::Contract("critic step needs a nonempty batch".into()));
    }
    check_len("batch state dimension", ocp.state_dim(), batch.state_dim)?;
    let terminals = rollout_batch(batch, policy, ocp, exec)?;
    critic_step_with_targets(batch, &terminals, policy, ocp, terminal_value_weight, exec)
}

/// [`critic_step`] against precomputed rollout terminals.
pub fn critic_step_with_targets<P: Plant>(
    batch: &Batch,
    terminals: &BatchTerminals,
    policy: &TrainedPolicy,
    ocp: &OcpInstance<P>,
    terminal_value_weight: f64,
    exec: ExecMode,
) -> Result<CriticStep> {
    let n = batch.state_dim;
    check_len("terminal states", batch.len() * n, terminals.states.len())?;
    let critic = &policy.critic;
    let norm = &policy.normalizer;
    let t_final = ocp.horizon.t_final;
    let parts = map_chunks(exec, batch.len(), GRAD_CHUNK, |r| -> Result<(ParamGradient, [f64; 3])> {
        let mut g = ParamGradient::zeros_like(critic);
        let mut sums = [0.0; 3];
        let mut f = vec![0.0; n];
        let mut z = vec![0.0; n + 1];
        let mut dir = vec![0.0; n + 1];
        for i in r {
            let x = batch.state(i);
            let t = batch.times[i];
            norm.apply(x, t, &mut z);
            let u = policy.actor.predict_scalar(&z)?;
            ocp.plant.eval(x, u, &mut f);
            for j in 0..n {
                dir[j] = f[j] / norm.scale[j];
            }
            dir[n] = 0.0;
            let tc = critic.tangent_forward(&z, &dir)?;
            let h = ocp.weights.utility(x, u) + tc.derivative();
            let res = h - terminals.utilities[i];
            critic.mixed_param_grad_from(&tc, res, &mut g)?;
            sums[0] += 0.5 * res * res;
            sums[1] += h;
            sums[2] += res.abs();
            if terminal_value_weight > 0.0 {
                norm.apply(&terminals.states[i * n..(i + 1) * n], t_final, &mut z);
                let (v, cache) = critic.forward(&z)?;
                g.add_scaled(&critic.param_grad(&cache, &[v[0]])?, terminal_value_weight);
                sums[0] += 0.5 * terminal_value_weight * v[0] * v[0];
            }
        }
        Ok((g, sums))
    });
    let mut grad = ParamGradient::zeros_like(critic);
    let mut sums = [0.0; 3];
    for part in parts {
        let (g, s) = part?;
        grad.add_scaled(&g, 1.0);
        for k in 0..3 {
            sums[k] += s[k];
        }
    }
    let m = batch.len() as f64;
    grad.scale(1.0 / m);
    let loss = sums[0] / m;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence(format!("critic loss is {loss}")));
    }
    Ok(CriticStep {
        loss,
        grad,
        mean_hamiltonian: sums[1] / m,
        mean_abs_residual: sums[2] / m,
    })
}

/// Loss and gradient of one actor evaluation.
#[derive(Debug, Clone)]
pub struct ActorStep {
    pub loss: f64,
    pub grad: ParamGradient,
}

/// Policy improvement: `J = mean H(x, π(x, t), ∂V/∂x)` with the critic held
/// fixed; `∂H/∂u = 2Rδ + (∂f/∂u)ᵀ ∂V/∂x`.
pub fn actor_step<P: Plant>(
    batch: &Batch,
    policy: &TrainedPolicy,
    ocp: &OcpInstance<P>,
    exec: ExecMode,
) -> Result<ActorStep> {
    if batch.is_empty() {
        return Err(Error::Contract("actor step needs a nonempty batch".into()));
    }
    let n = batch.state_dim;
    check_len("batch state dimension", ocp.state_dim(), n)?;
    let actor = &policy.actor;
    let norm = &policy.normalizer;
    let parts = map_chunks(exec, batch.len(), GRAD_CHUNK, |r| -> Result<(ParamGradient, f64)> {
        let mut g = ParamGradient::zeros_like(actor);
        let mut sum = 0.0;
        let mut f = vec![0.0; n];
        let mut fu = vec![0.0; n];
        let mut z = vec![0.0; n + 1];
        for i in r {
            let x = batch.state(i);
            norm.apply(x, batch.times[i], &mut z);
            let (_, ccache) = policy.critic.forward(&z)?;
            let gz = policy.critic.input_grad(&ccache)?;
            let (out, acache) = actor.forward(&z)?;
            let u = out[0];
            ocp.plant.eval(x, u, &mut f);
            ocp.plant.control_jacobian(x, u, &mut fu);
            let mut adv = 0.0;
            let mut dadv = 0.0;
            for j in 0..n {
                let vx = gz[j] / norm.scale[j];
                adv += vx * f[j];
                dadv += vx * fu[j];
            }
            sum += ocp.weights.utility(x, u) + adv;
            let dh_du = ocp.weights.utility_du(u) + dadv;
            g.add_scaled(&actor.param_grad(&acache, &[dh_du])?, 1.0);
        }
        Ok((g, sum))
    });
    let mut grad = ParamGradient::zeros_like(actor);
    let mut sum = 0.0;
    for part in parts {
        let (g, s) = part?;
        grad.add_scaled(&g, 1.0);
        sum += s;
    }
    let m = batch.len() as f64;
    grad.scale(1.0 / m);
    let loss = sum / m;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence(format!("actor loss is {loss}")));
    }
    Ok(ActorStep { loss, grad })
}

/// Scores a policy against the LQ oracle on a fixed test set.
#[derive(Debug, Clone)]
pub struct PolicyEvaluator {
    pub oracle: LqOracle,
    pub test_states: Vec<(Vec<f64>, f64)>,
    pub control_bound: f64,
}

impl PolicyEvaluator {
    /// `n` uniform test states from the box, drawn with their own seed.
    pub fn sampled(oracle: LqOracle, bx: &SamplingBox, n: usize, seed: u64, control_bound: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let test_states = sample_batch(bx, n, &mut rng).pairs();
        Self {
            oracle,
            test_states,
            control_bound,
        }
    }

    pub fn evaluate<C: Policy + ?Sized>(&mut self, policy: &C) -> Result<PolicyErrorReport> {
        policy_error(policy, &mut self.oracle, &self.test_states, self.control_bound)
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(rename = "box")]
    pub sampling_box: SamplingBox,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub terminal_value_weight: f64,
    pub network: NetworkConfig,
    /// Normalize network inputs onto the sampling box.
    pub normalize_inputs: bool,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Size of the fixed state set on which logged residuals are measured;
    /// 0 logs the current training batch instead.
    pub diagnostic_batch: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampling_box: SamplingBox::default(),
            batch_size: 256,
            lr_critic: 1e-3,
            lr_actor: 1e-3,
            max_iterations: 10_000,
            seed: 0,
            eval_every: 1000,
            terminal_value_weight: 0.0,
            network: NetworkConfig::default(),
            normalize_inputs: true,
            plateau_window: 1000,
            plateau_tolerance: 1e-6,
            diagnostic_batch: 1024,
            checkpoint_every: None,
            checkpoint_dir: None,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling_box.validate()?;
        self.network.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("lr_critic", self.lr_critic), ("lr_actor", self.lr_actor)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.terminal_value_weight >= 0.0) {
            return Err(Error::Config("terminal_value_weight must be nonnegative".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Initial networks for this configuration.
    pub fn initial_policy(&self, state_dim: usize, control_bound: f64) -> Result<TrainedPolicy> {
        let normalizer = if self.normalize_inputs {
            InputNormalizer::from_box(&self.sampling_box)
        } else {
            InputNormalizer::identity(state_dim + 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let actor_seed = rng.next_u64();
        let critic_seed = rng.next_u64();
        TrainedPolicy::init(&self.network, state_dim, control_bound, normalizer, actor_seed, critic_seed)
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub j_critic: f64,
    pub j_actor: f64,
    pub mean_hamiltonian: f64,
    /// Mean `|H - l_T|` on the diagnostic set.
    pub hamiltonian_residual: f64,
    /// Mean `|H - l_T|` on this iteration's training batch.
    pub batch_residual: f64,
    pub policy_error: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
    /// Set when the loss plateau rule ended the run early.
    pub stopped_on_plateau: bool,
}

pub const TRAINING_LOG_HEADER: &str = "iteration,j_critic,j_actor,hamiltonian_residual,policy_error,elapsed_s";

impl TrainingLog {
    pub fn last(&self) -> Option<&TrainingRecord> {
        self.records.last()
    }

    pub fn at(&self, iteration: usize) -> Option<&TrainingRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }

    /// CSV with an empty `policy_error` cell where no oracle applies.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRAINING_LOG_HEADER}")?;
        for r in &self.records {
            let pe = r.policy_error.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:e},{:e},{:e},{},{:.3}",
                r.iteration, r.j_critic, r.j_actor, r.hamiltonian_residual, pe, r.elapsed_s
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Moving-average plateau detector over two loss streams.
#[derive(Debug, Clone)]
struct Plateau {
    window: usize,
    tol: f64,
    prefix: [Vec<f64>; 2],
}

impl Plateau {
    fn new(window: usize, tol: f64) -> Self {
        Self {
            window,
            tol,
            prefix: [vec![0.0], vec![0.0]],
        }
    }

    fn push(&mut self, a: f64, b: f64) -> bool {
        for (p, v) in self.prefix.iter_mut().zip([a, b]) {
            let last = *p.last().unwrap_or(&0.0);
            p.push(last + v);
        }
        let k = self.prefix[0].len() - 1;
        let w = self.window;
        if k < 2 * w {
            return false;
        }
        self.prefix.iter().all(|p| {
            let now = (p[k] - p[k - w]) / w as f64;
            let before = (p[k - w] - p[k - 2 * w]) / w as f64;
            (now - before).abs() < self.tol
        })
    }
}

/// Seed of the diagnostic state set, shared by every training seed.
pub const DIAGNOSTIC_SEED: u64 = 0x5eed_d1a6;

fn checkpoint_path(dir: &Path, seed: u64, tag: &str) -> PathBuf {
    dir.join(format!("seed{seed}_{tag}.ckpt"))
}

/// Runs policy iteration from the configuration's initial networks.
pub fn train<P: Plant>(
    ocp: &OcpInstance<P>,
    cfg: &TrainConfig,
    evaluator: Option<&mut PolicyEvaluator>,
) -> Result<(TrainedPolicy, TrainingLog)> {
    cfg.validate()?;
    let policy = cfg.initial_policy(ocp.state_dim(), ocp.control_bound)?;
    train_from(ocp, cfg, policy, evaluator)
}

/// Runs policy iteration from the given networks.
pub fn train_from<P: Plant>(
    ocp: &OcpInstance<P>,
    cfg: &TrainConfig,
    mut policy: TrainedPolicy,
    mut evaluator: Option<&mut PolicyEvaluator>,
) -> Result<(TrainedPolicy, TrainingLog)> {
    cfg.validate()?;
    check_len("sampling box dimension", ocp.state_dim(), cfg.sampling_box.state_dim())?;
    check_len("policy state dimension", ocp.state_dim(), policy.state_dim())?;
    if cfg.sampling_box.t_max > ocp.horizon.t_final + 1e-12 {
        return Err(Error::Config(format!(
            "sampling time range ends at {} past the final time {}",
            cfg.sampling_box.t_max, ocp.horizon.t_final
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // the first two draws seeded the networks
    rng.next_u64();
    rng.next_u64();
    let mut adam_c = AdamState::new(&policy.critic);
    let mut adam_a = AdamState::new(&policy.actor);
    let mut log = TrainingLog::default();
    let mut plateau = Plateau::new(cfg.plateau_window, cfg.plateau_tolerance);
    let diagnostic = (cfg.diagnostic_batch > 0).then(|| {
        sample_batch(
            &cfg.sampling_box,
            cfg.diagnostic_batch,
            &mut ChaCha8Rng::seed_from_u64(DIAGNOSTIC_SEED),
        )
    });
    let start = Instant::now();
    for it in 1..=cfg.max_iterations {
        let last_good = policy.clone();
        let step = (|| -> Result<(CriticStep, ActorStep)> {
            let batch = sample_batch(&cfg.sampling_box, cfg.batch_size, &mut rng);
            let cs = critic_step(&batch, &policy, ocp, cfg.terminal_value_weight, cfg.exec)?;
            adam_step_in_place(&mut policy.critic, &cs.grad, &mut adam_c, cfg.lr_critic)?;
            let acts = actor_step(&batch, &policy, ocp, cfg.exec)?;
            adam_step_in_place(&mut policy.actor, &acts.grad, &mut adam_a, cfg.lr_actor)?;
            Ok((cs, acts))
        })();
        let (cs, acts) = match step {
            Ok(v) => v,
            Err(e @ (Error::Divergence(_) | Error::IntegrationBlowup { .. })) => {
                let saved = match &cfg.checkpoint_dir {
                    Some(dir) => {
                        let path = checkpoint_path(dir, cfg.seed, "last_good");
                        last_good.save(&path, cfg.seed)?;
                        path.display().to_string()
                    }
                    None => "none (no checkpoint directory)".into(),
                };
                return Err(Error::Divergence(format!(
                    "iteration {it}: {e}; last good checkpoint: {saved}"
                )));
            }
            Err(e) => return Err(e),
        };
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if it % every == 0 {
                policy.save(&checkpoint_path(dir, cfg.seed, &format!("iter{it}")), cfg.seed)?;
            }
        }
        let stop = plateau.push(cs.loss, acts.loss);
        if it % cfg.eval_every == 0 || it == cfg.max_iterations || stop {
            let policy_error = match evaluator.as_deref_mut() {
                Some(ev) => Some(ev.evaluate(&policy)?.mean_abs),
                None => None,
            };
            let hamiltonian_residual = match &diagnostic {
                Some(b) => critic_step(b, &policy, ocp, 0.0, cfg.exec)?.mean_abs_residual,
                None => cs.mean_abs_residual,
            };
            log.records.push(TrainingRecord {
                iteration: it,
                j_critic: cs.loss,
                j_actor: acts.loss,
                mean_hamiltonian: cs.mean_hamiltonian,
                hamiltonian_residual,
                batch_residual: cs.mean_abs_residual,
                policy_error,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
        if stop {
            log.stopped_on_plateau = true;
            break;
        }
    }
    Ok((policy, log))
}
