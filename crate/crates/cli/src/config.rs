//! Run configuration: one JSON document covering every subcommand.

use std::path::{Path, PathBuf};

use hjb_adp::nn::Activation;
use hjb_adp::ocp::{Horizon, KinematicErrorPlant, OcpInstance, UtilityWeights};
use hjb_adp::oracle::{discretize, BatchLqProblem, Discretization, LqOracle};
use hjb_adp::parallel::ExecMode;
use hjb_adp::sim::{PlantKind, SimConfig};
use hjb_adp::trainer::{NetworkConfig, PolicyEvaluator, SamplingBox, TrainConfig, TrainedPolicy};
use hjb_adp::vehicle::{LinearDynamics, VehicleParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem tied to a dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn field_err(path: &str, message: impl std::fmt::Display) -> FieldError {
    FieldError {
        path: path.to_owned(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    pub q: f64,
    pub r: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_bound")]
    pub control_bound: f64,
}

fn default_t_final() -> f64 {
    0.5
}

fn default_dt() -> f64 {
    0.005
}

fn default_bound() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    #[serde(rename = "box")]
    pub sampling_box: Option<SamplingBox>,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub terminal_value_weight: f64,
    pub normalize_inputs: bool,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub diagnostic_batch: usize,
    pub checkpoint_every: Option<usize>,
    pub exec: ExecMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            sampling_box: None,
            batch_size: t.batch_size,
            lr_critic: t.lr_critic,
            lr_actor: t.lr_actor,
            max_iterations: t.max_iterations,
            eval_every: t.eval_every,
            terminal_value_weight: t.terminal_value_weight,
            normalize_inputs: t.normalize_inputs,
            plateau_window: t.plateau_window,
            plateau_tolerance: t.plateau_tolerance,
            diagnostic_batch: t.diagnostic_batch,
            checkpoint_every: None,
            exec: t.exec,
        }
    }
}

/// Terminal weight of the oracle problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalWeight {
    /// Same as the stage weight `diag(Q, 0, 0, 0)`.
    StateCost,
    Zero,
    /// Diagonal entries of `P`.
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub method: Discretization,
    /// Discretization step; defaults to `ocp.dt`.
    pub h: Option<f64>,
    /// Horizon steps; defaults to `round(t_final / h)`.
    pub n: Option<usize>,
    pub terminal: TerminalWeight,
    pub test_states: usize,
    pub test_seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            method: Discretization::Zoh,
            h: None,
            n: None,
            terminal: TerminalWeight::StateCost,
            test_states: 500,
            test_seed: 20_240_601,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Adp,
    LqMpc,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Adp => "adp",
            ControllerKind::LqMpc => "lq_mpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub controllers: Vec<ControllerKind>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            controllers: vec![ControllerKind::Adp, ControllerKind::LqMpc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub horizons: Vec<usize>,
    pub reps: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            horizons: vec![10, 30, 60, 100],
            reps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default = "default_plant")]
    pub plant: PlantKind,
    pub ocp: OcpConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_plant() -> PlantKind {
    PlantKind::Linear
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either a linear or a kinematic problem instance.
pub enum Problem {
    Linear(OcpInstance<LinearDynamics>),
    Kinematic(OcpInstance<KinematicErrorPlant>),
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            // a missing field is reported against its parent; name it fully
            let msg = inner.to_string();
            let path = match missing_field(&msg) {
                Some(name) if path == "." => name.to_owned(),
                Some(name) => format!("{path}.{name}"),
                None => path,
            };
            field_err(&path, msg)
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| field_err("<config>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn state_dim(&self) -> usize {
        self.plant.controller_dim()
    }

    pub fn horizon(&self) -> Horizon {
        Horizon {
            t_final: self.ocp.t_final,
            dt: self.ocp.dt,
        }
    }

    pub fn weights(&self) -> UtilityWeights {
        UtilityWeights {
            q: self.ocp.q,
            r: self.ocp.r,
        }
    }

    pub fn sampling_box(&self) -> SamplingBox {
        self.training.sampling_box.clone().unwrap_or_else(|| {
            let mut b = match self.plant {
                PlantKind::Linear => SamplingBox::default(),
                PlantKind::Kinematic => SamplingBox::kinematic(),
            };
            b.t_max = self.ocp.t_final;
            b
        })
    }

    pub fn oracle_h(&self) -> f64 {
        self.oracle.h.unwrap_or(self.ocp.dt)
    }

    pub fn oracle_n(&self) -> usize {
        self.oracle
            .n
            .unwrap_or_else(|| (self.ocp.t_final / self.oracle_h()).round().max(1.0) as usize)
    }

    /// Fills every optional field with the value actually used.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.training.sampling_box = Some(self.sampling_box());
        c.oracle.h = Some(self.oracle_h());
        c.oracle.n = Some(self.oracle_n());
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved().to_json().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        self.vehicle.validate().map_err(|e| field_err("vehicle", e))?;
        for (path, v) in [("ocp.q", self.ocp.q), ("ocp.r", self.ocp.r)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field_err(path, format!("must be positive, got {v}")));
            }
        }
        self.horizon().validate().map_err(|e| field_err("ocp.t_final", e))?;
        if !(self.ocp.control_bound > 0.0) {
            return Err(field_err("ocp.control_bound", "must be positive"));
        }
        self.network.validate().map_err(|e| field_err("network", e))?;
        self.train_config(0).validate().map_err(|e| field_err("training", e))?;
        let bx = self.sampling_box();
        if bx.state_dim() != self.state_dim() {
            return Err(field_err(
                "training.box",
                format!("needs {} state bounds for this plant, got {}", self.state_dim(), bx.state_dim()),
            ));
        }
        if bx.t_max > self.ocp.t_final {
            return Err(field_err("training.box.t_max", "must not exceed ocp.t_final"));
        }
        if !(self.oracle_h() > 0.0) {
            return Err(field_err("oracle.h", "must be positive"));
        }
        if self.oracle_n() == 0 {
            return Err(field_err("oracle.n", "must be at least 1"));
        }
        if let TerminalWeight::Diagonal(d) = &self.oracle.terminal {
            if d.len() != 4 || d.iter().any(|v| !(*v >= 0.0)) {
                return Err(field_err("oracle.terminal.diagonal", "needs 4 nonnegative entries"));
            }
        }
        if self.oracle.test_states == 0 {
            return Err(field_err("oracle.test_states", "must be at least 1"));
        }
        self.simulation.sim.validate().map_err(|e| field_err("simulation", e))?;
        if self.simulation.controllers.is_empty() {
            return Err(field_err("simulation.controllers", "must name at least one controller"));
        }
        if self.plant == PlantKind::Kinematic && self.simulation.controllers.contains(&ControllerKind::LqMpc) {
            return Err(field_err(
                "simulation.controllers",
                "lq_mpc is only available for the linear plant",
            ));
        }
        if self.benchmark.horizons.is_empty() || self.benchmark.horizons.contains(&0) {
            return Err(field_err("benchmark.horizons", "must be a nonempty list of positive step counts"));
        }
        if self.benchmark.reps < hjb_adp::sim::MIN_TIMING_SAMPLES {
            return Err(field_err(
                "benchmark.reps",
                format!("must be at least {}", hjb_adp::sim::MIN_TIMING_SAMPLES),
            ));
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "must contain at least one seed"));
        }
        Ok(())
    }

    pub fn problem(&self) -> hjb_adp::Result<Problem> {
        Ok(match self.plant {
            PlantKind::Linear => Problem::Linear(OcpInstance::new(
                LinearDynamics::new(&self.vehicle)?,
                self.weights(),
                self.horizon(),
                self.ocp.control_bound,
            )?),
            PlantKind::Kinematic => Problem::Kinematic(OcpInstance::new(
                KinematicErrorPlant::new(self.vehicle)?,
                self.weights(),
                self.horizon(),
                self.ocp.control_bound,
            )?),
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            sampling_box: self.sampling_box(),
            batch_size: t.batch_size,
            lr_critic: t.lr_critic,
            lr_actor: t.lr_actor,
            max_iterations: t.max_iterations,
            seed,
            eval_every: t.eval_every,
            terminal_value_weight: t.terminal_value_weight,
            network: self.network.clone(),
            normalize_inputs: t.normalize_inputs,
            plateau_window: t.plateau_window,
            plateau_tolerance: t.plateau_tolerance,
            diagnostic_batch: t.diagnostic_batch,
            checkpoint_every: t.checkpoint_every,
            checkpoint_dir: Some(self.output_dir.join("checkpoints")),
            exec: t.exec,
        }
    }

    /// Oracle problem on the linear model, regardless of the training plant.
    pub fn lq_problem(&self) -> hjb_adp::Result<BatchLqProblem> {
        let dynm = LinearDynamics::new(&self.vehicle)?;
        let sys = discretize(&dynm, self.oracle_h(), self.oracle.method)?;
        let mut qm = DMatrix::zeros(4, 4);
        qm[(0, 0)] = self.ocp.q;
        let p = match &self.oracle.terminal {
            TerminalWeight::StateCost => qm.clone(),
            TerminalWeight::Zero => DMatrix::zeros(4, 4),
            TerminalWeight::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
        };
        BatchLqProblem::new(&sys, qm, self.ocp.r, p, self.oracle_n())
    }

    pub fn evaluator(&self) -> hjb_adp::Result<PolicyEvaluator> {
        let oracle = LqOracle::new(self.lq_problem()?, self.ocp.t_final, self.oracle_h())?;
        Ok(PolicyEvaluator::sampled(
            oracle,
            &self.sampling_box(),
            self.oracle.test_states,
            self.oracle.test_seed,
            self.ocp.control_bound,
        ))
    }

    /// Checks that a loaded policy has the configured layout.
    pub fn check_architecture(&self, policy: &TrainedPolicy) -> Result<(), FieldError> {
        let width = self.state_dim() + 1;
        let actor = self.network.specs(width, Activation::ScaledTanh(self.ocp.control_bound));
        let critic = self.network.specs(width, Activation::Softplus);
        if policy.actor.specs() != actor.as_slice() || policy.critic.specs() != critic.as_slice() {
            return Err(field_err(
                "network",
                "checkpoint architecture does not match the configured network, plant or control bound",
            ));
        }
        Ok(())
    }
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}
