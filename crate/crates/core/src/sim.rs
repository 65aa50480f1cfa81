//! Closed-loop tracking simulation, tracking metrics and timing benchmarks.
//!
//! The vehicle is simulated in global coordinates `(X, Y, ψ, …)`. At every
//! sample the error state is measured against the tangent line of the
//! reference at the vehicle's current `X`, the controller output is
//! saturated and held for one RK4 step.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{rk4_step, Plant, Policy};
use crate::oracle::{batch_lq_solve, BatchLqProblem, BatchLqSolver};
use crate::vehicle::{error_state, kinematic_bicycle_derivative, sideslip, Control, LinearDynamics, Pose, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Sine,
    Straight,
    DoubleLaneChange,
}

/// Reference path `y_r(x)`.
///
/// For the double lane change `amplitude` is the lateral gate offset and
/// `wavelength` is ignored; the section lengths are
/// [`DLC_ENTRY`], [`DLC_CHANGE`], [`DLC_HOLD`] and [`DLC_RETURN`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    pub amplitude: f64,
    pub wavelength: f64,
    pub duration: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::Sine,
            amplitude: 1.5,
            wavelength: 150.0,
            duration: 20.0,
        }
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("reference amplitude must be >= 0, got {}", self.amplitude)));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::Config(format!("reference wavelength must be > 0, got {}", self.wavelength)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!("reference duration must be > 0, got {}", self.duration)));
        }
        Ok(())
    }
}

/// Straight run before the first lane change (m).
pub const DLC_ENTRY: f64 = 15.0;
/// Length of each lateral transition (m).
pub const DLC_CHANGE: f64 = 30.0;
/// Length held in the offset lane (m).
pub const DLC_HOLD: f64 = 25.0;
/// Length of the transition back (m).
pub const DLC_RETURN: f64 = 30.0;

/// Quintic smoothstep and its slope on `[0, 1]`, clamped outside.
fn smoothstep(xi: f64) -> (f64, f64) {
    if xi <= 0.0 {
        (0.0, 0.0)
    } else if xi >= 1.0 {
        (1.0, 0.0)
    } else {
        let x2 = xi * xi;
        (x2 * xi * (10.0 - 15.0 * xi + 6.0 * x2), 30.0 * x2 * (1.0 - xi) * (1.0 - xi))
    }
}

/// Evaluable reference path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub spec: ReferenceSpec,
}

impl Reference {
    /// `(y_r, dy_r/dx)` at longitudinal position `x`.
    pub fn y_and_slope(&self, x: f64) -> (f64, f64) {
        let s = &self.spec;
        match s.kind {
            ReferenceKind::Straight => (0.0, 0.0),
            ReferenceKind::Sine => {
                let k = 2.0 * PI / s.wavelength;
                (s.amplitude * (k * x).sin(), s.amplitude * k * (k * x).cos())
            }
            ReferenceKind::DoubleLaneChange => {
                let up_start = DLC_ENTRY;
                let down_start = DLC_ENTRY + DLC_CHANGE + DLC_HOLD;
                let (a, da) = smoothstep((x - up_start) / DLC_CHANGE);
                let (b, db) = smoothstep((x - down_start) / DLC_RETURN);
                (
                    s.amplitude * (a - b),
                    s.amplitude * (da / DLC_CHANGE - db / DLC_RETURN),
                )
            }
        }
    }

    pub fn y(&self, x: f64) -> f64 {
        self.y_and_slope(x).0
    }

    pub fn theta(&self, x: f64) -> f64 {
        self.y_and_slope(x).1.atan()
    }
}

pub fn make_reference(spec: &ReferenceSpec) -> Result<Reference> {
    spec.validate()?;
    Ok(Reference { spec: *spec })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// Linear lateral dynamics `(r, v_y)` with exact planar kinematics;
    /// global state `[X, Y, ψ, r, v_y]`, controller state `[d, φ, r, v_y]`.
    Linear,
    /// Kinematic bicycle; global state `[X, Y, ψ]`, controller state `[d, φ]`.
    Kinematic,
}

impl PlantKind {
    pub fn controller_dim(self) -> usize {
        match self {
            PlantKind::Linear => 4,
            PlantKind::Kinematic => 2,
        }
    }

    fn global_dim(self) -> usize {
        match self {
            PlantKind::Linear => 5,
            PlantKind::Kinematic => 3,
        }
    }
}

/// Vehicle in global coordinates.
#[derive(Debug, Clone, Copy)]
struct GlobalPlant {
    kind: PlantKind,
    params: VehicleParams,
    lateral: LinearDynamics,
}

impl Plant for GlobalPlant {
    fn state_dim(&self) -> usize {
        self.kind.global_dim()
    }

    fn eval(&self, s: &[f64], u: f64, out: &mut [f64]) {
        let vx = self.params.vx;
        match self.kind {
            PlantKind::Linear => {
                let (psi, r, vy) = (s[2], s[3], s[4]);
                let (sin, cos) = psi.sin_cos();
                out[0] = vx * cos - vy * sin;
                out[1] = vx * sin + vy * cos;
                out[2] = r;
                let a = &self.lateral.a;
                let b = &self.lateral.b;
                out[3] = a[2][2] * r + a[2][3] * vy + b[2] * u;
                out[4] = a[3][2] * r + a[3][3] * vy + b[3] * u;
            }
            PlantKind::Kinematic => {
                let d = kinematic_bicycle_derivative(&self.params, &Pose::new(s[0], s[1], s[2]), Control::new(u));
                out[..3].copy_from_slice(&d);
            }
        }
    }
}

impl GlobalPlant {
    fn yaw_rate(&self, s: &[f64], u: f64) -> f64 {
        match self.kind {
            PlantKind::Linear => s[3],
            PlantKind::Kinematic => self.params.vx / self.params.b * sideslip(&self.params, u).sin(),
        }
    }
}

/// Any plant state beyond this magnitude ends a run as a blowup.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Settings of one closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub reference: ReferenceSpec,
    pub dt: f64,
    /// Initial `Y - y_r(0)` (m).
    pub initial_lateral_offset: f64,
    /// Initial `ψ - θ_r(0)` (rad).
    pub initial_heading_offset: f64,
    pub control_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceSpec::default(),
            dt: 0.005,
            initial_lateral_offset: 1.0,
            initial_heading_offset: 0.0,
            control_bound: 0.35,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.reference.validate()?;
        if !(self.dt > 0.0 && self.dt <= self.reference.duration) {
            return Err(Error::Config(format!("simulation dt must be in (0, duration], got {}", self.dt)));
        }
        if !(self.control_bound > 0.0) {
            return Err(Error::Config("control bound must be positive".into()));
        }
        if !self.initial_lateral_offset.is_finite() || !self.initial_heading_offset.is_finite() {
            return Err(Error::Config("initial offsets must be finite".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.reference.duration / self.dt).round() as usize
    }
}

/// Per-sample record of a closed-loop run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    pub label: String,
    pub times: Vec<f64>,
    /// Global plant state per sample.
    pub states: Vec<Vec<f64>>,
    /// Controller input `[d, φ, …]` per sample.
    pub error_states: Vec<Vec<f64>>,
    pub controls: Vec<f64>,
    pub x_position: Vec<f64>,
    pub y_actual: Vec<f64>,
    pub y_desired: Vec<f64>,
    pub heading_actual: Vec<f64>,
    pub heading_desired: Vec<f64>,
    pub yaw_rate: Vec<f64>,
    /// False when the integration blew up; the trace then stops early.
    pub valid: bool,
    pub failure: Option<String>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn lateral_error(&self) -> impl Iterator<Item = f64> + '_ {
        self.y_actual.iter().zip(&self.y_desired).map(|(y, yd)| y - yd)
    }

    /// Earliest time after which `|y - y_des| < tol` holds for the rest of
    /// the trace.
    pub fn settling_time(&self, tol: f64) -> Option<f64> {
        let errs: Vec<f64> = self.lateral_error().collect();
        let last_bad = errs.iter().rposition(|e| !(e.abs() < tol));
        match last_bad {
            None => self.times.first().copied(),
            Some(k) if k + 1 < errs.len() => Some(self.times[k + 1]),
            Some(_) => None,
        }
    }

    pub const CSV_HEADER: &'static str =
        "time_s,x_m,y_m,y_ref_m,heading_rad,heading_ref_rad,yaw_rate_rad_s,d_m,phi_rad,delta_rad";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for k in 0..self.len() {
            let e = &self.error_states[k];
            writeln!(
                w,
                "{:.6},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                self.times[k],
                self.x_position[k],
                self.y_actual[k],
                self.y_desired[k],
                self.heading_actual[k],
                self.heading_desired[k],
                self.yaw_rate[k],
                e[0],
                e[1],
                self.controls[k]
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Receding-horizon LQ controller: the first move of the condensed batch
/// solution, recomputed from the measured state at every sample.
#[derive(Debug, Clone)]
pub struct LqMpc {
    solver: BatchLqSolver,
}

impl LqMpc {
    pub fn new(problem: &BatchLqProblem) -> Result<Self> {
        problem.validate()?;
        Ok(Self {
            solver: BatchLqSolver::new(problem)?,
        })
    }
}

impl Policy for LqMpc {
    fn control(&self, x: &[f64], _t: f64) -> f64 {
        self.solver.solve(x).map(|u| u[0]).unwrap_or(f64::NAN)
    }
}

/// Simulates `controller` on the configured maneuver. The controller is
/// queried with `t = 0`, as in receding-horizon execution.
pub fn closed_loop_sim<C: Policy + ?Sized>(
    params: &VehicleParams,
    kind: PlantKind,
    controller: &C,
    cfg: &SimConfig,
    label: &str,
) -> Result<SimTrace> {
    cfg.validate()?;
    let reference = make_reference(&cfg.reference)?;
    let plant = GlobalPlant {
        kind,
        params: *params,
        lateral: LinearDynamics::new(params)?,
    };
    let mut s = vec![0.0; kind.global_dim()];
    s[1] = reference.y(0.0) + cfg.initial_lateral_offset;
    s[2] = reference.theta(0.0) + cfg.initial_heading_offset;
    let steps = cfg.steps();
    let mut tr = SimTrace {
        label: label.to_owned(),
        valid: true,
        ..SimTrace::default()
    };
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let (y_r, slope) = reference.y_and_slope(s[0]);
        let theta_r = slope.atan();
        let (d, phi) = error_state(&Pose::new(s[0], s[1], s[2]), y_r, theta_r)?;
        let mut e = vec![d, phi];
        if kind == PlantKind::Linear {
            e.extend_from_slice(&s[3..5]);
        }
        let raw = controller.control(&e, 0.0);
        if !raw.is_finite() {
            tr.valid = false;
            tr.failure = Some(format!("controller returned {raw} at t = {t}"));
            break;
        }
        let u = Control::new(raw).saturate(cfg.control_bound).delta;
        tr.times.push(t);
        tr.x_position.push(s[0]);
        tr.y_actual.push(s[1]);
        tr.y_desired.push(y_r);
        tr.heading_actual.push(s[2]);
        tr.heading_desired.push(theta_r);
        tr.yaw_rate.push(plant.yaw_rate(&s, u));
        tr.controls.push(u);
        tr.states.push(s.clone());
        tr.error_states.push(e);
        match rk4_step(&plant, &s, &|_: &[f64], _: f64| u, t, cfg.dt) {
            Ok(next) if next.iter().any(|v| v.abs() > BLOWUP_LIMIT) => {
                tr.valid = false;
                tr.failure = Some(Error::IntegrationBlowup { time: t + cfg.dt }.to_string());
                break;
            }
            Ok(next) => s = next,
            Err(err) => {
                tr.valid = false;
                tr.failure = Some(err.to_string());
                break;
            }
        }
    }
    Ok(tr)
}

/// Tracking and comfort indices of one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// RMS lateral error (m).
    pub i_yerr: f64,
    /// Peak lateral error (m).
    pub i_ymax: f64,
    /// RMS heading error (rad).
    pub i_theta_err: f64,
    /// Peak heading error (rad).
    pub i_theta_max: f64,
    /// RMS yaw rate (rad/s).
    pub i_ycomf: f64,
}

impl Metrics {
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "I_yerr_m = {:e}", self.i_yerr)?;
        writeln!(w, "I_ymax_m = {:e}", self.i_ymax)?;
        writeln!(w, "I_theta_err_rad = {:e}", self.i_theta_err)?;
        writeln!(w, "I_theta_max_rad = {:e}", self.i_theta_max)?;
        writeln!(w, "I_ycomf_rad_s = {:e}", self.i_ycomf)?;
        Ok(())
    }
}

fn rms_and_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sq, mut mx, mut n) = (0.0, 0.0f64, 0usize);
    for v in values {
        sq += v * v;
        mx = mx.max(v.abs());
        n += 1;
    }
    ((sq / n as f64).sqrt(), mx)
}

pub fn tracking_metrics(trace: &SimTrace) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(Error::Contract("metrics need a nonempty trace".into()));
    }
    if !trace.valid {
        return Err(Error::Contract("metrics need a trace that completed without blowup".into()));
    }
    let (i_yerr, i_ymax) = rms_and_max(trace.lateral_error());
    let (i_theta_err, i_theta_max) = rms_and_max(
        trace
            .heading_actual
            .iter()
            .zip(&trace.heading_desired)
            .map(|(a, d)| a - d),
    );
    let (i_ycomf, _) = rms_and_max(trace.yaw_rate.iter().copied());
    Ok(Metrics {
        i_yerr,
        i_ymax,
        i_theta_err,
        i_theta_max,
        i_ycomf,
    })
}

/// Number of untimed calls before measurement starts.
pub const WARMUP_CALLS: usize = 50;
/// Smallest accepted measured sample count.
pub const MIN_TIMING_SAMPLES: usize = 100;

/// Wall-clock statistics of one benchmarked configuration (milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingEntry {
    pub label: String,
    pub horizon: Option<usize>,
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p99_ms: f64,
}

impl TimingEntry {
    fn from_samples(label: &str, horizon: Option<usize>, mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let pick = |q: f64| ms[((q * (n - 1) as f64).round() as usize).min(n - 1)];
        Self {
            label: label.to_owned(),
            horizon,
            samples: n,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            median_ms: pick(0.5),
            min_ms: ms[0],
            max_ms: ms[n - 1],
            p99_ms: pick(0.99),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
}

impl TimingReport {
    pub const CSV_HEADER: &'static str = "label,horizon,samples,mean_ms,median_ms,min_ms,max_ms,p99_ms";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for e in &self.entries {
            let h = e.horizon.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                e.label, h, e.samples, e.mean_ms, e.median_ms, e.min_ms, e.max_ms, e.p99_ms
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn policy(&self) -> Option<&TimingEntry> {
        self.entries.iter().find(|e| e.horizon.is_none())
    }

    pub fn horizon(&self, n: usize) -> Option<&TimingEntry> {
        self.entries.iter().find(|e| e.horizon == Some(n))
    }
}

fn time_calls<F: FnMut(usize) -> f64>(reps: usize, mut call: F) -> Result<Vec<f64>> {
    if reps < MIN_TIMING_SAMPLES {
        return Err(Error::Config(format!(
            "benchmarks need at least {MIN_TIMING_SAMPLES} repetitions, got {reps}"
        )));
    }
    let mut sink = 0.0;
    for i in 0..WARMUP_CALLS {
        sink += call(i);
    }
    let mut ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let start = Instant::now();
        sink += call(i);
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    Ok(ms)
}

/// Times single policy evaluations cycling through `states`.
pub fn bench_policy_inference<C: Policy + ?Sized>(
    label: &str,
    policy: &C,
    states: &[(Vec<f64>, f64)],
    reps: usize,
) -> Result<TimingEntry> {
    if states.is_empty() {
        return Err(Error::Config("benchmark needs at least one state".into()));
    }
    let ms = time_calls(reps, |i| {
        let (x, t) = &states[i % states.len()];
        policy.control(std::hint::black_box(x), *t)
    })?;
    Ok(TimingEntry::from_samples(label, None, ms))
}

/// Times the full condensed LQ solve (matrix build, factorization, solve)
/// for each horizon.
pub fn bench_lq_horizon_sweep(
    base: &BatchLqProblem,
    horizons: &[usize],
    states: &[Vec<f64>],
    reps: usize,
) -> Result<TimingReport> {
    if horizons.is_empty() || states.is_empty() {
        return Err(Error::Config("horizon sweep needs horizons and states".into()));
    }
    let mut report = TimingReport::default();
    for &n in horizons {
        let p = base.with_horizon(n);
        p.validate()?;
        let mut failure = None;
        let ms = time_calls(reps, |i| match batch_lq_solve(&p, &states[i % states.len()]) {
            Ok(u) => u[0],
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        report.entries.push(TimingEntry::from_samples("lq_batch", Some(n), ms));
    }
    Ok(report)
}
