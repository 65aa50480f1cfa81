//! Finite-horizon tracking problem: plants, utility, Hamiltonian and
//! terminal rollouts under a time-varying feedback policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{sideslip, LinearDynamics, VehicleParams};

/// Step used for finite-difference control Jacobians.
pub const CONTROL_FD_STEP: f64 = 1e-6;

/// Continuous-time plant `ẋ = f(x, δ)` with a scalar steering input.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;

    /// Writes `f(x, u)` into `out`.
    fn eval(&self, x: &[f64], u: f64, out: &mut [f64]);

    /// `∂f/∂u` at `(x, u)`. Central difference unless overridden.
    fn control_jacobian(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let n = self.state_dim();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        self.eval(x, u + CONTROL_FD_STEP, &mut plus);
        self.eval(x, u - CONTROL_FD_STEP, &mut minus);
        for i in 0..n {
            out[i] = (plus[i] - minus[i]) / (2.0 * CONTROL_FD_STEP);
        }
    }
}

impl Plant for LinearDynamics {
    fn state_dim(&self) -> usize {
        4
    }

    #[inline]
    fn eval(&self, x: &[f64], u: f64, out: &mut [f64]) {
        LinearDynamics::eval(self, x, u, out)
    }

    fn control_jacobian(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
        out[..4].copy_from_slice(&self.b);
    }
}

/// Kinematic bicycle expressed in errors against a straight tangent-line
/// reference: state `[d, phi]`,
/// `ḋ = vx·sin(phi + β)`, `φ̇ = (vx/b)·sin β`, `β = atan(b·tan δ / (a+b))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicErrorPlant {
    pub params: VehicleParams,
}

impl KinematicErrorPlant {
    pub fn new(params: VehicleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Plant for KinematicErrorPlant {
    fn state_dim(&self) -> usize {
        2
    }

    #[inline]
    fn eval(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let p = &self.params;
        let beta = sideslip(p, u);
        out[0] = p.vx * (x[1] + beta).sin();
        out[1] = p.vx / p.b * beta.sin();
    }
}

/// Utility `Q·d² + R·δ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityWeights {
    pub q: f64,
    pub r: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self { q: 0.4, r: 280.0 }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::Config(format!("weights.q must be positive, got {}", self.q)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("weights.r must be positive, got {}", self.r)));
        }
        Ok(())
    }

    /// `l(x, u)`; only the lateral error `x[0]` is penalized.
    #[inline]
    pub fn utility(&self, x: &[f64], u: f64) -> f64 {
        self.q * x[0] * x[0] + self.r * u * u
    }

    /// `∂l/∂u`.
    #[inline]
    pub fn utility_du(&self, u: f64) -> f64 {
        2.0 * self.r * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// Final time (s).
    pub t_final: f64,
    /// Integration step (s).
    pub dt: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            t_final: 0.5,
            dt: 0.005,
        }
    }
}

impl Horizon {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("horizon.t_final must be positive, got {}", self.t_final)));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_final) {
            return Err(Error::Config(format!(
                "horizon.dt must lie in (0, t_final], got {}",
                self.dt
            )));
        }
        Ok(())
    }

    /// Step sizes for integrating from `t` to the final time: whole steps of
    /// `dt`, then the remainder.
    pub fn schedule(&self, t: f64) -> StepSchedule {
        let rem = (self.t_final - t).max(0.0);
        let tol = 1e-9 * self.dt;
        let full = ((rem + tol) / self.dt).floor() as usize;
        let partial = rem - full as f64 * self.dt;
        StepSchedule {
            start: t,
            dt: self.dt,
            full,
            partial: if partial > tol { partial } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub start: f64,
    pub dt: f64,
    pub full: usize,
    pub partial: f64,
}

impl StepSchedule {
    pub fn len(&self) -> usize {
        self.full + usize::from(self.partial > 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(start time, step size)` of step `k`.
    #[inline]
    pub fn step(&self, k: usize) -> (f64, f64) {
        let h = if k < self.full { self.dt } else { self.partial };
        (self.start + k as f64 * self.dt, h)
    }
}

/// A plant together with cost, horizon and actuator bound.
#[derive(Debug, Clone)]
pub struct OcpInstance<P> {
    pub plant: P,
    pub weights: UtilityWeights,
    pub horizon: Horizon,
    pub control_bound: f64,
}

impl<P: Plant> OcpInstance<P> {
    pub fn new(plant: P, weights: UtilityWeights, horizon: Horizon, control_bound: f64) -> Result<Self> {
        weights.validate()?;
        horizon.validate()?;
        if !(control_bound > 0.0) {
            return Err(Error::Config(format!("control bound must be positive, got {control_bound}")));
        }
        Ok(Self {
            plant,
            weights,
            horizon,
            control_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }
}

/// `l(x,u) + <∂V/∂x, f(x,u)>`.
pub fn hamiltonian<P: Plant + ?Sized>(
    plant: &P,
    weights: &UtilityWeights,
    x: &[f64],
    u: f64,
    value_grad_x: &[f64],
) -> f64 {
    let mut f = vec![0.0; plant.state_dim()];
    plant.eval(x, u, &mut f);
    weights.utility(x, u) + value_grad_x.iter().zip(&f).map(|(g, fi)| g * fi).sum::<f64>()
}

/// A state-feedback law `δ = π(x, t)`.
pub trait Policy: Sync {
    fn control(&self, x: &[f64], t: f64) -> f64;
}

impl<F: Fn(&[f64], f64) -> f64 + Sync> Policy for F {
    fn control(&self, x: &[f64], t: f64) -> f64 {
        self(x, t)
    }
}

/// Evaluates a policy on many `(state, time)` rows at once.
pub trait BatchPolicy {
    fn state_dim(&self) -> usize;

    /// `states` is row-major `rows × state_dim`; writes one control per row.
    fn controls(&mut self, states: &[f64], times: &[f64], out: &mut [f64]) -> Result<()>;
}

/// One classical RK4 step; the controller is re-evaluated at every stage.
pub fn rk4_step<P: Plant + ?Sized, C: Policy + ?Sized>(
    plant: &P,
    x: &[f64],
    controller: &C,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("rk4 step must be positive, got {dt}")));
    }
    let n = x.len();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    plant.eval(x, controller.control(x, t), &mut k[0]);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k[0][i];
    }
    plant.eval(&tmp, controller.control(&tmp, t + 0.5 * dt), &mut k[1]);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k[1][i];
    }
    plant.eval(&tmp, controller.control(&tmp, t + 0.5 * dt), &mut k[2]);
    for i in 0..n {
        tmp[i] = x[i] + dt * k[2][i];
    }
    plant.eval(&tmp, controller.control(&tmp, t + dt), &mut k[3]);
    let next: Vec<f64> = (0..n)
        .map(|i| x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationBlowup { time: t + dt });
    }
    Ok(next)
}

/// Terminal state, terminal control and terminal utility of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub state: Vec<f64>,
    pub control: f64,
    pub utility: f64,
}

/// Integrates the closed loop from `(x, t)` to the final time and evaluates
/// `u_T = π(x_T, T)` and `l(x_T, u_T)`.
pub fn rollout_terminal<P: Plant, C: Policy + ?Sized>(
    policy: &C,
    ocp: &OcpInstance<P>,
    x: &[f64],
    t: f64,
) -> Result<Terminal> {
    let t_final = ocp.horizon.t_final;
    if t > t_final + 1e-12 {
        return Err(Error::Config(format!("rollout start {t} is past the final time {t_final}")));
    }
    if t < 0.0 {
        return Err(Error::Config(format!("rollout start {t} is negative")));
    }
    let sched = ocp.horizon.schedule(t);
    let mut state = x.to_vec();
    for k in 0..sched.len() {
        let (tk, h) = sched.step(k);
        state = rk4_step(&ocp.plant, &state, policy, tk, h)?;
    }
    let control = policy.control(&state, t_final);
    let utility = ocp.weights.utility(&state, control);
    Ok(Terminal {
        state,
        control,
        utility,
    })
}

/// Scratch buffers for [`rollout_terminal_batch`].
#[derive(Debug, Default, Clone)]
pub struct RolloutWorkspace {
    order: Vec<usize>,
    x: Vec<f64>,
    stage: Vec<f64>,
    acc: Vec<f64>,
    k: Vec<f64>,
    times: Vec<f64>,
    u: Vec<f64>,
    f: Vec<f64>,
}

/// Lock-step RK4 rollouts of many samples at once.
///
/// Each sample follows exactly the step schedule of [`rollout_terminal`];
/// samples are ordered by step count so the ones still integrating always
/// form a prefix and the policy sees one contiguous batch per stage.
pub fn rollout_terminal_batch<P: Plant, B: BatchPolicy + ?Sized>(
    policy: &mut B,
    ocp: &OcpInstance<P>,
    states: &[f64],
    times: &[f64],
) -> Result<Vec<Terminal>> {
    let mut ws = RolloutWorkspace::default();
    rollout_terminal_batch_with(policy, ocp, states, times, &mut ws)
}

pub fn rollout_terminal_batch_with<P: Plant, B: BatchPolicy + ?Sized>(
    policy: &mut B,
    ocp: &OcpInstance<P>,
    states: &[f64],
    times: &[f64],
    ws: &mut RolloutWorkspace,
) -> Result<Vec<Terminal>> {
    let n = ocp.state_dim();
    let rows = times.len();
    crate::error::check_len("batch rollout states", rows * n, states.len())?;
    let t_final = ocp.horizon.t_final;
    if let Some(&bad) = times.iter().find(|&&t| !(0.0..=t_final + 1e-12).contains(&t)) {
        return Err(Error::Config(format!("rollout start {bad} outside [0, {t_final}]")));
    }
    let scheds: Vec<StepSchedule> = times.iter().map(|&t| ocp.horizon.schedule(t)).collect();
    ws.order.clear();
    ws.order.extend(0..rows);
    ws.order.sort_by_key(|&i| std::cmp::Reverse(scheds[i].len()));
    let resize = |v: &mut Vec<f64>, len: usize| {
        v.clear();
        v.resize(len, 0.0);
    };
    resize(&mut ws.x, rows * n);
    resize(&mut ws.stage, rows * n);
    resize(&mut ws.acc, rows * n);
    resize(&mut ws.k, rows * n);
    resize(&mut ws.times, rows);
    resize(&mut ws.u, rows);
    resize(&mut ws.f, n);
    for (slot, &i) in ws.order.iter().enumerate() {
        ws.x[slot * n..(slot + 1) * n].copy_from_slice(&states[i * n..(i + 1) * n]);
    }
    let max_steps = ws.order.first().map_or(0, |&i| scheds[i].len());
    let mut active = rows;
    for step in 0..max_steps {
        while active > 0 && scheds[ws.order[active - 1]].len() <= step {
            active -= 1;
        }
        let m = active * n;
        // stage weights and time offsets of classical RK4
        const C: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
        const W: [f64; 4] = [1.0, 2.0, 2.0, 1.0];
        ws.acc[..m].fill(0.0);
        for s in 0..4 {
            for slot in 0..active {
                let (tk, h) = scheds[ws.order[slot]].step(step);
                ws.times[slot] = tk + C[s] * h;
                let row = slot * n..(slot + 1) * n;
                if s == 0 {
                    ws.stage[row.clone()].copy_from_slice(&ws.x[row]);
                } else {
                    for j in row {
                        ws.stage[j] = ws.x[j] + C[s] * h * ws.k[j];
                    }
                }
            }
            policy.controls(&ws.stage[..m], &ws.times[..active], &mut ws.u[..active])?;
            for slot in 0..active {
                let row = slot * n..(slot + 1) * n;
                ocp.plant.eval(&ws.stage[row.clone()], ws.u[slot], &mut ws.f);
                for (j, fj) in row.zip(&ws.f) {
                    ws.k[j] = *fj;
                    ws.acc[j] += W[s] * fj;
                }
            }
        }
        for slot in 0..active {
            let (tk, h) = scheds[ws.order[slot]].step(step);
            for j in slot * n..(slot + 1) * n {
                ws.x[j] += h / 6.0 * ws.acc[j];
                if !ws.x[j].is_finite() {
                    return Err(Error::IntegrationBlowup { time: tk + h });
                }
            }
        }
    }
    ws.times[..rows].fill(t_final);
    policy.controls(&ws.x[..rows * n], &ws.times[..rows], &mut ws.u[..rows])?;
    let mut out = vec![
        Terminal {
            state: Vec::new(),
            control: 0.0,
            utility: 0.0,
        };
        rows
    ];
    for (slot, &i) in ws.order.iter().enumerate() {
        let state = ws.x[slot * n..(slot + 1) * n].to_vec();
        let control = ws.u[slot];
        let utility = ocp.weights.utility(&state, control);
        out[i] = Terminal {
            state,
            control,
            utility,
        };
    }
    Ok(out)
}

/// Adapts a per-sample [`Policy`] to the batch interface.
pub struct PerSample<'a, C: ?Sized> {
    pub policy: &'a C,
    pub state_dim: usize,
}

impl<C: Policy + ?Sized> BatchPolicy for PerSample<'_, C> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn controls(&mut self, states: &[f64], times: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, (&t, u)) in times.iter().zip(out.iter_mut()).enumerate() {
            *u = self.policy.control(&states[i * self.state_dim..(i + 1) * self.state_dim], t);
        }
        Ok(())
    }
}
