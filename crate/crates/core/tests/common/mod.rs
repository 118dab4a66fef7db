#![allow(dead_code)]

use std::fmt::Write as _;

use dcmpc_core::Microgrid;
use proptest::prelude::*;

/// Parameters of a small random grid; rendered to a network file so that
/// tests go through the same loader as users do.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub buses: Vec<BusSpec>,
    /// `(from, to, resistance)` with 0-based nodes; the first `n − 1` lines
    /// form a spanning tree.
    pub lines: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct BusSpec {
    pub r_f: f64,
    pub l_f: f64,
    pub c_f: f64,
    pub k1: f64,
    pub k2: f64,
    /// Fraction of the largest admissible `k3`.
    pub k3_share: f64,
    pub load: f64,
}

impl BusSpec {
    pub fn k3(&self) -> f64 {
        self.k3_share * (self.k1 - 1.0) * (self.k2 - self.r_f) / self.l_f
    }
}

pub fn bus_strategy() -> impl Strategy<Value = BusSpec> {
    (0.05f64..0.5, 0.002f64..0.02, 0.05f64..0.5, -5.0f64..0.5, 0.05f64..2.0, 0.05f64..0.95, 0.001f64..0.1).prop_map(
        |(r_f, l_f, c_f, k1, k2_gap, k3_share, load)| BusSpec { r_f, l_f, c_f, k1, k2: r_f - k2_gap, k3_share, load },
    )
}

pub fn grid_strategy(nodes: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = GridSpec> {
    nodes.prop_flat_map(|n| {
        (
            prop::collection::vec(bus_strategy(), n),
            prop::collection::vec((any::<prop::sample::Index>(), 0.1f64..1.0), n.saturating_sub(1)),
            prop::option::of((any::<prop::sample::Index>(), any::<prop::sample::Index>(), 0.1f64..1.0)),
        )
            .prop_map(move |(buses, tree, extra)| {
                let mut lines: Vec<(usize, usize, f64)> =
                    tree.iter().enumerate().map(|(k, (parent, r))| (parent.index(k + 1), k + 1, *r)).collect();
                if let Some((a, b, r)) = extra {
                    let (a, b) = (a.index(n), b.index(n));
                    if a != b {
                        lines.push((a, b, r));
                    }
                }
                GridSpec { buses, lines }
            })
    })
}

impl GridSpec {
    pub fn to_toml(&self, voltage: (f64, f64), power: (f64, f64)) -> String {
        let mut t = String::new();
        writeln!(t, "format = 1\nname = \"random\"\nbase_voltage = 400.0").unwrap();
        writeln!(t, "[control]\nstep = 0.001\nhorizon = 10\neta = 0.01").unwrap();
        writeln!(t, "[bus_defaults]").unwrap();
        writeln!(t, "voltage = [{}, {}]\npower = [{}, {}]", voltage.0, voltage.1, power.0, power.1).unwrap();
        writeln!(t, "filter_current = [-100.0, 100.0]\nreference = [0.0, 1000.0]").unwrap();
        for b in &self.buses {
            writeln!(t, "[[bus]]").unwrap();
            writeln!(
                t,
                "filter_resistance = {:e}\nfilter_inductance = {:e}\nfilter_capacitance = {:e}",
                b.r_f, b.l_f, b.c_f
            )
            .unwrap();
            writeln!(t, "load = {:e}", b.load).unwrap();
            writeln!(t, "gains = {{ k1 = {:e}, k2 = {:e}, k3 = {:e} }}", b.k1, b.k2, b.k3()).unwrap();
        }
        for (j, (from, to, r)) in self.lines.iter().enumerate() {
            writeln!(
                t,
                "[[line]]\nid = {}\nfrom = {}\nto = {}\nresistance = {r:e}\ninductance = {:e}",
                j + 1,
                from + 1,
                to + 1,
                r * 7e-5
            )
            .unwrap();
        }
        t
    }

    pub fn grid(&self) -> Microgrid {
        self.grid_with(self.default_voltage(), (-1e6, 1e6))
    }

    pub fn grid_with(&self, voltage: (f64, f64), power: (f64, f64)) -> Microgrid {
        Microgrid::from_toml_str(&self.to_toml(voltage, power), "random").expect("generated grids are valid")
    }

    fn default_voltage(&self) -> (f64, f64) {
        (380.0, 420.0)
    }
}
