//! Network description files and the [`Microgrid`] aggregate.
//!
//! A network file is TOML. Nodes and lines are numbered from 1 in the file
//! and from 0 in memory. Every `[[bus]]` entry may omit fields that are given
//! in `[bus_defaults]`.
//!
//! ```toml
//! format = 1
//! name = "example"
//! base_voltage = 400.0
//!
//! [control]
//! step = 0.01
//! horizon = 50
//! eta = 0.01
//!
//! [bus_defaults]
//! filter_resistance = 0.1
//! filter_inductance = 0.01
//! filter_capacitance = 0.2
//! gains = { k1 = -3.0, k2 = -0.5, k3 = 72.0 }
//! voltage = [380.0, 420.0]
//! power = [-13000.0, 0.0]
//! filter_current = [-10.0, 30.0]
//! reference = [360.0, 440.0]
//!
//! [[bus]]
//! id = 1
//! load = 0.03
//!
//! [[line]]
//! id = 1
//! from = 1
//! to = 2
//! resistance = 0.6
//! inductance = 4.2e-5
//! ```

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{assemble_full, assemble_reduced, ContinuousModel};
use crate::grid::{BusParams, GridTopology, Line, LineId, LineParams, NetworkMatrices};
use crate::primary::{
    derive_gains, storage_matrix, validate_passivity, ControllerGains, DerivedGains, PassivityReport, StorageMatrix,
};
use crate::setpoint::{Bounds, OperatingLimits};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const DEFAULT_NETWORK: &str = include_str!("../../../data/cigre11.toml");

/// Sampling and horizon settings of the secondary controllers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSettings {
    /// Controller sampling step, seconds.
    pub step: f64,
    pub horizon: usize,
    /// Input weight of the tracking controller.
    pub eta: f64,
    /// Weight on input moves of the economic controller.
    #[serde(default = "default_move_weight")]
    pub move_weight: f64,
}

fn default_move_weight() -> f64 {
    0.03
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self { step: 0.01, horizon: 50, eta: 0.01, move_weight: default_move_weight() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter_resistance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter_inductance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter_capacitance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    load: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gains: Option<ControllerGains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    voltage: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    power: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter_current: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<[f64; 2]>,
}

impl BusSpec {
    fn or(self, d: &BusSpec) -> BusSpec {
        BusSpec {
            id: self.id,
            name: self.name,
            filter_resistance: self.filter_resistance.or(d.filter_resistance),
            filter_inductance: self.filter_inductance.or(d.filter_inductance),
            filter_capacitance: self.filter_capacitance.or(d.filter_capacitance),
            load: self.load.or(d.load),
            gains: self.gains.or(d.gains),
            omega: self.omega.or(d.omega),
            voltage: self.voltage.or(d.voltage),
            power: self.power.or(d.power),
            filter_current: self.filter_current.or(d.filter_current),
            reference: self.reference.or(d.reference),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineSpec {
    id: usize,
    from: usize,
    to: usize,
    resistance: f64,
    inductance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    format: u32,
    name: String,
    base_voltage: f64,
    #[serde(default)]
    control: ControlSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bus_defaults: Option<BusSpec>,
    bus: Vec<BusSpec>,
    #[serde(default)]
    line: Vec<LineSpec>,
}

/// A fully specified microgrid: topology, physical parameters, primary
/// controller gains, nominal loads, operating limits and controller timing.
#[derive(Clone, Debug, PartialEq)]
pub struct Microgrid {
    pub name: String,
    pub base_voltage: f64,
    pub topology: GridTopology,
    pub bus_names: Vec<String>,
    pub buses: Vec<BusParams>,
    pub lines: Vec<LineParams>,
    pub gains: Vec<ControllerGains>,
    /// Storage normalization per bus; `None` selects
    /// [`DerivedGains::dissipative_omega`].
    pub omegas: Vec<Option<f64>>,
    pub nominal_loads: DVector<f64>,
    pub limits: OperatingLimits,
    pub control: ControlSettings,
}

fn missing(bus: usize, field: &str) -> Error {
    Error::Config(format!("bus {bus} has no `{field}` and no default is given"))
}

impl Microgrid {
    /// The shipped 11-bus, 12-line network.
    pub fn default_network() -> Self {
        Self::from_toml_str(DEFAULT_NETWORK, "data/cigre11.toml").expect("shipped network file is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read network file {}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string().trim_end().replace('\n', " "),
        })?;
        Self::from_file(file)
    }

    fn from_file(file: NetworkFile) -> Result<Self> {
        if file.format != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network format {}, expected {FORMAT_VERSION}",
                file.format
            )));
        }
        if !(file.base_voltage > 0.0) {
            return Err(Error::Config("base_voltage must be positive".into()));
        }
        let c = file.control;
        if !(c.step > 0.0) || c.horizon < 2 || !(c.eta > 0.0) {
            return Err(Error::Config("control needs step > 0, horizon >= 2 and eta > 0".into()));
        }
        let n = file.bus.len();
        let defaults = file.bus_defaults.unwrap_or_default();
        let mut specs: Vec<Option<BusSpec>> = vec![None; n];
        for (pos, spec) in file.bus.into_iter().enumerate() {
            let id = spec.id.unwrap_or(pos + 1);
            if id == 0 || id > n {
                return Err(Error::Config(format!("bus id {id} outside 1..={n}")));
            }
            if specs[id - 1].is_some() {
                return Err(Error::Config(format!("bus id {id} appears twice")));
            }
            specs[id - 1] = Some(spec.or(&defaults));
        }
        let mut bus_names = Vec::with_capacity(n);
        let mut buses = Vec::with_capacity(n);
        let mut gains = Vec::with_capacity(n);
        let mut omegas = Vec::with_capacity(n);
        let mut loads = DVector::zeros(n);
        let mut bounds = [(); 4].map(|_| (DVector::zeros(n), DVector::zeros(n)));
        for (i, spec) in specs.into_iter().enumerate() {
            let id = i + 1;
            let s = spec.expect("every id in 1..=n is present once");
            bus_names.push(s.name.unwrap_or_else(|| format!("B{id}")));
            buses.push(BusParams::new(
                s.filter_resistance.ok_or_else(|| missing(id, "filter_resistance"))?,
                s.filter_inductance.ok_or_else(|| missing(id, "filter_inductance"))?,
                s.filter_capacitance.ok_or_else(|| missing(id, "filter_capacitance"))?,
            )?);
            gains.push(s.gains.ok_or_else(|| missing(id, "gains"))?);
            omegas.push(s.omega);
            loads[i] = s.load.ok_or_else(|| missing(id, "load"))?;
            let boxes = [
                (s.voltage, "voltage"),
                (s.power, "power"),
                (s.filter_current, "filter_current"),
                (s.reference, "reference"),
            ];
            for (k, (b, field)) in boxes.into_iter().enumerate() {
                let [lo, hi] = b.ok_or_else(|| missing(id, field))?;
                bounds[k].0[i] = lo;
                bounds[k].1[i] = hi;
            }
        }
        let [voltage, power, filter_current, reference] = bounds.map(|(lo, hi)| Bounds::new(lo, hi));
        let limits = OperatingLimits { voltage, power, filter_current, reference };
        limits.validate(n)?;
        let mut topo_lines = Vec::with_capacity(file.line.len());
        let mut line_params = Vec::with_capacity(file.line.len());
        for l in &file.line {
            if l.from == 0 || l.to == 0 {
                return Err(Error::Config(format!("line {} uses node 0; nodes are numbered from 1", l.id)));
            }
            topo_lines.push(Line { id: LineId(l.id), from: l.from - 1, to: l.to - 1 });
            line_params.push(LineParams::new(l.resistance, l.inductance)?);
        }
        let topology = GridTopology::new(n, topo_lines)?;
        crate::grid::check_loads(n, &loads)?;
        Ok(Self {
            name: file.name,
            base_voltage: file.base_voltage,
            topology,
            bus_names,
            buses,
            lines: line_params,
            gains,
            omegas,
            nominal_loads: loads,
            limits,
            control: c,
        })
    }

    /// Fully explicit TOML; parses back to an equal value.
    pub fn to_toml_string(&self) -> String {
        let n = self.node_count();
        let pair = |b: &Bounds, i: usize| Some([b.lower[i], b.upper[i]]);
        let bus = (0..n)
            .map(|i| BusSpec {
                id: Some(i + 1),
                name: Some(self.bus_names[i].clone()),
                filter_resistance: Some(self.buses[i].filter_resistance),
                filter_inductance: Some(self.buses[i].filter_inductance),
                filter_capacitance: Some(self.buses[i].filter_capacitance),
                load: Some(self.nominal_loads[i]),
                gains: Some(self.gains[i]),
                omega: self.omegas[i],
                voltage: pair(&self.limits.voltage, i),
                power: pair(&self.limits.power, i),
                filter_current: pair(&self.limits.filter_current, i),
                reference: pair(&self.limits.reference, i),
            })
            .collect();
        let line = self
            .topology
            .lines()
            .iter()
            .zip(&self.lines)
            .map(|(l, p)| LineSpec {
                id: l.id.0,
                from: l.from + 1,
                to: l.to + 1,
                resistance: p.resistance,
                inductance: p.inductance,
            })
            .collect();
        let file = NetworkFile {
            format: FORMAT_VERSION,
            name: self.name.clone(),
            base_voltage: self.base_voltage,
            control: self.control,
            bus_defaults: None,
            bus,
            line,
        };
        toml::to_string(&file).expect("network serializes")
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    pub fn derived_gains(&self) -> Vec<DerivedGains> {
        self.gains.iter().zip(&self.buses).map(|(g, b)| derive_gains(g, b)).collect()
    }

    pub fn omega(&self, bus: usize) -> f64 {
        self.omegas[bus].unwrap_or_else(|| derive_gains(&self.gains[bus], &self.buses[bus]).dissipative_omega())
    }

    pub fn passivity_reports(&self) -> Vec<PassivityReport> {
        self.gains.iter().zip(&self.buses).map(|(g, b)| validate_passivity(g, b)).collect()
    }

    pub fn storage_matrices(&self) -> Result<Vec<StorageMatrix>> {
        let derived = self.derived_gains();
        (0..self.node_count()).map(|i| storage_matrix(&derived[i], &self.buses[i], self.omega(i))).collect()
    }

    pub fn matrices(&self, topology: &GridTopology, loads: &DVector<f64>) -> Result<NetworkMatrices> {
        NetworkMatrices::assemble(topology, &self.lines, loads)
    }

    pub fn reduced_model(&self, topology: &GridTopology, loads: &DVector<f64>) -> Result<ContinuousModel> {
        let matrices = self.matrices(topology, loads)?;
        assemble_reduced(topology, &matrices, &self.buses, &self.derived_gains(), loads)
    }

    pub fn full_model(&self, topology: &GridTopology, loads: &DVector<f64>) -> Result<ContinuousModel> {
        assemble_full(topology, &self.buses, &self.lines, &self.derived_gains(), loads)
    }

    /// Per-unit conversion of a voltage difference.
    pub fn per_unit(&self, volts: f64) -> f64 {
        volts / self.base_voltage
    }
}
