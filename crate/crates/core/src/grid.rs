//! Network graph, physical parameters and the derived network matrices.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LineId(pub usize);

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A line oriented from `from` to `to` (node indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Line {
    pub id: LineId,
    pub from: usize,
    pub to: usize,
}

/// Directed graph of buses and lines.
///
/// Lines are never deleted: a failed line is marked inactive so that node
/// and line indices stay stable. Every constructor and mutation checks that
/// the active subgraph is connected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridTopology {
    node_count: usize,
    lines: Vec<Line>,
    active: Vec<bool>,
}

/// Builds a topology from `(line_id, from, to)` triples. Incidence columns
/// follow the order of `lines`.
pub fn build_topology(node_count: usize, lines: &[(usize, usize, usize)]) -> Result<GridTopology> {
    GridTopology::new(node_count, lines.iter().map(|&(id, from, to)| Line { id: LineId(id), from, to }).collect())
}

impl GridTopology {
    pub fn new(node_count: usize, lines: Vec<Line>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Topology("a grid needs at least one node".into()));
        }
        let mut seen = HashSet::new();
        for line in &lines {
            if !seen.insert(line.id) {
                return Err(Error::DuplicateLine(line.id));
            }
            if line.from >= node_count || line.to >= node_count {
                return Err(Error::Topology(format!(
                    "line {} connects {}->{} but the grid has {node_count} nodes",
                    line.id, line.from, line.to
                )));
            }
            if line.from == line.to {
                return Err(Error::Topology(format!("line {} is a self-loop at node {}", line.id, line.from)));
            }
        }
        let active = vec![true; lines.len()];
        let topology = Self { node_count, lines, active };
        topology.check_connected()?;
        Ok(topology)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Number of lines, active or not.
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn active_line_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.active[index]
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn line_index(&self, id: LineId) -> Option<usize> {
        self.lines.iter().position(|l| l.id == id)
    }

    /// Returns a copy with `id` marked inactive. Rejects removals that would
    /// disconnect the network.
    pub fn remove_line(&self, id: LineId) -> Result<Self> {
        let index = self.line_index(id).ok_or(Error::UnknownLine(id))?;
        if !self.active[index] {
            return Err(Error::LineInactive(id));
        }
        let mut next = self.clone();
        next.active[index] = false;
        next.check_connected()?;
        Ok(next)
    }

    /// Node-by-line incidence matrix: -1 where a line leaves a node, +1 where
    /// it enters. Inactive lines get a zero column.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.node_count, self.lines.len());
        for (j, line) in self.lines.iter().enumerate() {
            if self.active[j] {
                m[(line.from, j)] = -1.0;
                m[(line.to, j)] = 1.0;
            }
        }
        m
    }

    fn check_connected(&self) -> Result<()> {
        let mut adjacency = vec![Vec::new(); self.node_count];
        for (j, line) in self.lines.iter().enumerate() {
            if self.active[j] {
                adjacency[line.from].push(line.to);
                adjacency[line.to].push(line.from);
            }
        }
        let mut visited = vec![false; self.node_count];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(node) = queue.pop_front() {
            for &next in &adjacency[node] {
                if !visited[next] {
                    visited[next] = true;
                    queue.push_back(next);
                }
            }
        }
        let unreachable: Vec<usize> = (0..self.node_count).filter(|&i| !visited[i]).collect();
        if unreachable.is_empty() {
            Ok(())
        } else {
            Err(Error::Disconnected(format!("nodes {unreachable:?} are not reachable from node 0")))
        }
    }
}

/// Series parameters of a line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Ohm.
    pub resistance: f64,
    /// Henry.
    pub inductance: f64,
}

impl LineParams {
    pub fn new(resistance: f64, inductance: f64) -> Result<Self> {
        let params = Self { resistance, inductance };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resistance > 0.0 && self.resistance.is_finite()) {
            return Err(Error::InvalidParameter(format!("line resistance must be positive, got {}", self.resistance)));
        }
        if !(self.inductance > 0.0 && self.inductance.is_finite()) {
            return Err(Error::InvalidParameter(format!("line inductance must be positive, got {}", self.inductance)));
        }
        Ok(())
    }

    pub fn time_constant(&self) -> f64 {
        self.inductance / self.resistance
    }
}

/// RLC output filter of a converter-interfaced bus. The load admittance is
/// time-varying and supplied separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusParams {
    pub filter_resistance: f64,
    pub filter_inductance: f64,
    pub filter_capacitance: f64,
}

impl BusParams {
    pub fn new(filter_resistance: f64, filter_inductance: f64, filter_capacitance: f64) -> Result<Self> {
        let params = Self { filter_resistance, filter_inductance, filter_capacitance };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("filter resistance", self.filter_resistance),
            ("filter inductance", self.filter_inductance),
            ("filter capacitance", self.filter_capacitance),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// `M R⁻¹ Mᵀ` over the active lines: a weighted graph Laplacian whose
/// quadratic form is the ohmic line loss.
pub fn loss_matrix(topology: &GridTopology, lines: &[LineParams]) -> Result<DMatrix<f64>> {
    if lines.len() != topology.line_count() {
        return Err(Error::Dimension(format!(
            "{} line parameter sets for {} lines",
            lines.len(),
            topology.line_count()
        )));
    }
    let n = topology.node_count();
    let mut q = DMatrix::zeros(n, n);
    for (j, line) in topology.lines().iter().enumerate() {
        if !topology.is_active(j) {
            continue;
        }
        let g = 1.0 / lines[j].resistance;
        q[(line.from, line.from)] += g;
        q[(line.to, line.to)] += g;
        q[(line.from, line.to)] -= g;
        q[(line.to, line.from)] -= g;
    }
    Ok(q)
}

/// Nodal admittance matrix `Q_loss + diag(loads)`.
pub fn admittance_matrix(topology: &GridTopology, lines: &[LineParams], loads: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_loads(topology.node_count(), loads)?;
    let mut y = loss_matrix(topology, lines)?;
    for i in 0..topology.node_count() {
        y[(i, i)] += loads[i];
    }
    Ok(y)
}

pub(crate) fn check_loads(n: usize, loads: &DVector<f64>) -> Result<()> {
    if loads.len() != n {
        return Err(Error::Dimension(format!("{} loads for {n} nodes", loads.len())));
    }
    if let Some(bad) = loads.iter().find(|y| !(**y >= 0.0 && y.is_finite())) {
        return Err(Error::InvalidParameter(format!("load admittance must be >= 0, got {bad}")));
    }
    Ok(())
}

/// Incidence, loss and admittance matrices for one topology and load snapshot.
#[derive(Clone, Debug)]
pub struct NetworkMatrices {
    pub incidence: DMatrix<f64>,
    pub loss: DMatrix<f64>,
    pub admittance: DMatrix<f64>,
}

impl NetworkMatrices {
    pub fn assemble(topology: &GridTopology, lines: &[LineParams], loads: &DVector<f64>) -> Result<Self> {
        let loss = loss_matrix(topology, lines)?;
        check_loads(topology.node_count(), loads)?;
        let admittance = &loss + DMatrix::from_diagonal(loads);
        Ok(Self { incidence: topology.incidence(), loss, admittance })
    }
}
