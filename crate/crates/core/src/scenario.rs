//! Disturbance scenarios: load steps, load noise and line failures.
//!
//! Scenario files are TOML. Nodes and lines are numbered from 1.
//!
//! ```toml
//! name = "load_steps"
//! duration = 60.0
//! seed = 7
//! setpoint_period = 30.0
//!
//! [[load_step]]
//! time = 10.0
//! nodes = [2]
//! factor = 1.8
//! known = false
//!
//! [noise]
//! nodes = [1]
//! amplitude = 0.3
//! hold = 0.5
//!
//! [line_failure]
//! line = 12
//! time = 20.0
//! ```
//!
//! Load steps multiply the nominal admittances from `time` on. Noise
//! multiplies the loads of the listed nodes by `1 + a`, `a` uniform in
//! `[−amplitude, amplitude]`, drawn independently for every `hold` interval.
//! Only disturbances marked `known` enter the setpoint computation.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::grid::{GridTopology, LineId};
use crate::{Error, Result};

const BUILTIN: [(&str, &str); 4] = [
    ("nominal", include_str!("../../../data/scenarios/nominal.toml")),
    ("load_steps", include_str!("../../../data/scenarios/load_steps.toml")),
    ("noise", include_str!("../../../data/scenarios/noise.toml")),
    ("line_failure", include_str!("../../../data/scenarios/line_failure.toml")),
];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_period")]
    setpoint_period: f64,
    #[serde(default)]
    initial: Option<InitialSpec>,
    #[serde(default)]
    load_step: Vec<StepSpec>,
    noise: Option<NoiseSpec>,
    line_failure: Option<FailureSpec>,
}

fn default_period() -> f64 {
    30.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, untagged)]
enum InitialSpec {
    Named(String),
    Flat { flat: f64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeSpec {
    All(String),
    List(Vec<usize>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepSpec {
    time: f64,
    nodes: NodeSpec,
    factor: f64,
    #[serde(default)]
    known: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSpec {
    nodes: NodeSpec,
    amplitude: f64,
    hold: Option<f64>,
    #[serde(default)]
    known: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FailureSpec {
    line: usize,
    time: f64,
}

/// Which nodes an event applies to, 0-based; `None` means all nodes.
pub type NodeSet = Option<Vec<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadStep {
    pub time: f64,
    pub nodes: NodeSet,
    pub factor: f64,
    pub known: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadNoise {
    pub nodes: NodeSet,
    /// Relative amplitude of the uniform perturbation.
    pub amplitude: f64,
    /// Length of the intervals over which one draw is held; `None` draws a
    /// new value at every controller step.
    pub hold: Option<f64>,
    pub known: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFailure {
    pub line: LineId,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialState {
    /// Equilibrium at the optimal setpoint of the initial loads.
    Setpoint,
    /// Equilibrium at a uniform voltage.
    Flat(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub seed: u64,
    pub setpoint_period: f64,
    pub initial: InitialState,
    pub load_steps: Vec<LoadStep>,
    pub noise: Option<LoadNoise>,
    pub line_failure: Option<LineFailure>,
    hash: String,
}

fn nodes_from(spec: NodeSpec, what: &str) -> Result<NodeSet> {
    match spec {
        NodeSpec::All(s) if s == "all" => Ok(None),
        NodeSpec::All(s) => Err(Error::Config(format!("{what}: nodes must be a list or \"all\", got \"{s}\""))),
        NodeSpec::List(list) => {
            if list.contains(&0) {
                return Err(Error::Config(format!("{what}: nodes are numbered from 1")));
            }
            Ok(Some(list.into_iter().map(|i| i - 1).collect()))
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Scenario {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    /// A shipped scenario. Dashes and underscores are interchangeable.
    pub fn builtin(name: &str) -> Option<Self> {
        let key = name.replace('-', "_");
        BUILTIN.iter().find(|(n, _)| *n == key).map(|(n, text)| {
            Self::from_toml_str(text, &format!("data/scenarios/{n}.toml")).expect("shipped scenario is valid")
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario file {}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string().trim_end().replace('\n', " "),
        })?;
        if !(file.duration > 0.0 && file.duration.is_finite()) {
            return Err(Error::Config("scenario duration must be positive".into()));
        }
        if !(file.setpoint_period > 0.0) {
            return Err(Error::Config("setpoint_period must be positive".into()));
        }
        let initial = match file.initial {
            None => InitialState::Setpoint,
            Some(InitialSpec::Named(s)) if s == "setpoint" => InitialState::Setpoint,
            Some(InitialSpec::Named(s)) => return Err(Error::Config(format!("unknown initial state \"{s}\""))),
            Some(InitialSpec::Flat { flat }) if flat > 0.0 => InitialState::Flat(flat),
            Some(InitialSpec::Flat { flat }) => {
                return Err(Error::Config(format!("flat initial voltage must be positive, got {flat}")))
            }
        };
        let in_range = |t: f64| (0.0..=file.duration).contains(&t);
        let mut load_steps = Vec::new();
        for (i, s) in file.load_step.into_iter().enumerate() {
            if !in_range(s.time) {
                return Err(Error::Config(format!(
                    "load step {} at t = {} s lies outside the scenario",
                    i + 1,
                    s.time
                )));
            }
            if !(s.factor > 0.0) {
                return Err(Error::Config(format!("load step {} has a non-positive factor", i + 1)));
            }
            load_steps.push(LoadStep {
                time: s.time,
                nodes: nodes_from(s.nodes, "load step")?,
                factor: s.factor,
                known: s.known,
            });
        }
        let noise = match file.noise {
            None => None,
            Some(n) => {
                if !(0.0..1.0).contains(&n.amplitude) {
                    return Err(Error::Config("noise amplitude must lie in [0, 1)".into()));
                }
                if n.hold.is_some_and(|h| !(h > 0.0)) {
                    return Err(Error::Config("noise hold must be positive".into()));
                }
                Some(LoadNoise {
                    nodes: nodes_from(n.nodes, "noise")?,
                    amplitude: n.amplitude,
                    hold: n.hold,
                    known: n.known,
                })
            }
        };
        let line_failure = match file.line_failure {
            None => None,
            Some(f) => {
                if !in_range(f.time) {
                    return Err(Error::Config(format!("line failure at t = {} s lies outside the scenario", f.time)));
                }
                Some(LineFailure { line: LineId(f.line), time: f.time })
            }
        };
        Ok(Self {
            name: file.name,
            duration: file.duration,
            seed: file.seed,
            setpoint_period: file.setpoint_period,
            initial,
            load_steps,
            noise,
            line_failure,
            hash: hex(&Sha256::digest(text.as_bytes())),
        })
    }

    /// SHA-256 of the scenario source text.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Checks node and line references against a network.
    pub fn validate(&self, topology: &GridTopology) -> Result<()> {
        let n = topology.node_count();
        let check = |set: &NodeSet| -> Result<()> {
            match set {
                Some(list) if list.iter().any(|&i| i >= n) => {
                    Err(Error::Config(format!("scenario `{}` refers to a node beyond {n}", self.name)))
                }
                _ => Ok(()),
            }
        };
        for s in &self.load_steps {
            check(&s.nodes)?;
        }
        if let Some(noise) = &self.noise {
            check(&noise.nodes)?;
        }
        if let Some(f) = &self.line_failure {
            topology.remove_line(f.line)?;
        }
        Ok(())
    }

    /// Precomputes the load profile for controller step `h`.
    pub fn schedule(&self, nominal: &DVector<f64>, h: f64) -> LoadSchedule {
        let n = nominal.len();
        let mut noise_table = Vec::new();
        let mut noise_hold = h;
        if let Some(noise) = &self.noise {
            noise_hold = noise.hold.unwrap_or(h);
            let intervals = (self.duration / noise_hold).ceil() as usize + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            noise_table = (0..intervals)
                .map(|_| {
                    DVector::from_fn(n, |i, _| {
                        let draw = rng.random_range(-noise.amplitude..=noise.amplitude);
                        if applies(&noise.nodes, i) {
                            1.0 + draw
                        } else {
                            1.0
                        }
                    })
                })
                .collect();
        }
        LoadSchedule {
            nominal: nominal.clone(),
            steps: self.load_steps.clone(),
            noise_known: self.noise.as_ref().is_some_and(|n| n.known),
            noise_table,
            noise_hold,
        }
    }
}

fn applies(set: &NodeSet, i: usize) -> bool {
    set.as_ref().is_none_or(|list| list.contains(&i))
}

/// Load admittances over time, either as they occur or as far as they are
/// known in advance.
#[derive(Clone, Debug)]
pub struct LoadSchedule {
    nominal: DVector<f64>,
    steps: Vec<LoadStep>,
    noise_known: bool,
    noise_table: Vec<DVector<f64>>,
    noise_hold: f64,
}

impl LoadSchedule {
    fn evaluate(&self, t: f64, known_only: bool) -> DVector<f64> {
        let mut y = self.nominal.clone();
        for s in &self.steps {
            if t >= s.time && (s.known || !known_only) {
                for i in 0..y.len() {
                    if applies(&s.nodes, i) {
                        y[i] *= s.factor;
                    }
                }
            }
        }
        if !self.noise_table.is_empty() && (self.noise_known || !known_only) {
            // The small offset keeps t = k·hold in interval k despite rounding.
            let idx = ((t / self.noise_hold) + 1e-9).floor().max(0.0) as usize;
            y.component_mul_assign(&self.noise_table[idx.min(self.noise_table.len() - 1)]);
        }
        y
    }

    /// Loads the plant sees at time `t`.
    pub fn actual(&self, t: f64) -> DVector<f64> {
        self.evaluate(t, false)
    }

    /// Loads the setpoint computation may use at time `t`.
    pub fn known(&self, t: f64) -> DVector<f64> {
        self.evaluate(t, true)
    }
}
