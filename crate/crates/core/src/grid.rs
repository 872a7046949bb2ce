//! Radial distribution feeders and the linearized branch-flow model.
//!
//! Buses are numbered `0..=n` with bus 0 the substation. Vectors indexed by
//! bus (injections, voltages, matrix rows) skip the substation, so entry `k`
//! refers to bus `k + 1`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub const DEFAULT_BASE_KV: f64 = 12.0;
pub const DEFAULT_V0: f64 = 1.0;
pub const DEFAULT_V_LOWER: f64 = 0.95;
pub const DEFAULT_V_UPPER: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network has no non-substation buses")]
    Empty,
    #[error("bus ids must be exactly 0..={expected_max}; bus {bus} is {problem}")]
    BusIds {
        bus: usize,
        expected_max: usize,
        problem: &'static str,
    },
    #[error("expected {expected} lines for {expected} non-substation buses, found {found}")]
    LineCount { expected: usize, found: usize },
    #[error("line {line} references unknown bus {bus}")]
    UnknownBus { line: usize, bus: usize },
    #[error("line {line} is a self-loop on bus {bus}")]
    SelfLoop { line: usize, bus: usize },
    #[error("line {line} feeds the substation (bus 0)")]
    SubstationHasParent { line: usize },
    #[error("bus {bus} has more than one parent (lines {first} and {second})")]
    DuplicateParent {
        bus: usize,
        first: usize,
        second: usize,
    },
    #[error("bus {bus} is not reachable from the substation (cycle or disconnected component)")]
    Unreachable { bus: usize },
    #[error("line {line} has non-positive or non-finite impedance (r = {r}, x = {x})")]
    Impedance { line: usize, r: f64, x: f64 },
    #[error("bus {bus} violates v_lower < v0 < v_upper ({lower} < {v0} < {upper})")]
    Bounds {
        bus: usize,
        lower: f64,
        v0: f64,
        upper: f64,
    },
    #[error("vector length {got} does not match bus count {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid impedance range: {0}")]
    ImpedanceRange(String),
    #[error("network file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub v_lower: f64,
    pub v_upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Per-bus acceptable voltage band, indexed without the substation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl VoltageBand {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; n],
            upper: vec![upper; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&vi, (&lo, &hi))| vi >= lo && vi <= hi)
    }
}

/// A validated radial feeder. Construction checks the tree structure once and
/// caches the parent map so later passes are linear in the bus count.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialNetwork {
    base_kv: f64,
    v0: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    /// `parent_line[b]` is the index of the line feeding bus `b` (unused for 0).
    parent_line: Vec<usize>,
    parent: Vec<usize>,
    /// Buses in breadth-first order from the substation.
    order: Vec<usize>,
}

impl RadialNetwork {
    pub fn new(base_kv: f64, v0: f64, buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self, GridError> {
        let mut buses = buses;
        buses.sort_by_key(|b| b.id);
        if buses.len() < 2 {
            return Err(GridError::Empty);
        }
        let max_id = buses.len() - 1;
        for (k, b) in buses.iter().enumerate() {
            if b.id != k {
                let problem = if k > 0 && buses[k - 1].id == b.id {
                    "duplicated"
                } else {
                    "out of range or missing a predecessor"
                };
                return Err(GridError::BusIds {
                    bus: b.id,
                    expected_max: max_id,
                    problem,
                });
            }
        }
        let n = max_id;
        if lines.len() != n {
            return Err(GridError::LineCount {
                expected: n,
                found: lines.len(),
            });
        }

        let mut parent_line = vec![usize::MAX; n + 1];
        for (li, line) in lines.iter().enumerate() {
            for bus in [line.from, line.to] {
                if bus > n {
                    return Err(GridError::UnknownBus { line: li, bus });
                }
            }
            if line.from == line.to {
                return Err(GridError::SelfLoop {
                    line: li,
                    bus: line.to,
                });
            }
            if line.to == 0 {
                return Err(GridError::SubstationHasParent { line: li });
            }
            if !(line.r.is_finite() && line.x.is_finite() && line.r > 0.0 && line.x > 0.0) {
                return Err(GridError::Impedance {
                    line: li,
                    r: line.r,
                    x: line.x,
                });
            }
            if parent_line[line.to] != usize::MAX {
                return Err(GridError::DuplicateParent {
                    bus: line.to,
                    first: parent_line[line.to],
                    second: li,
                });
            }
            parent_line[line.to] = li;
        }

        // n lines, each non-root bus has exactly one parent: the only way to
        // fail now is a cycle detached from the root.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        let mut parent = vec![0usize; n + 1];
        for b in 1..=n {
            let p = lines[parent_line[b]].from;
            parent[b] = p;
            children[p].push(b);
        }
        let mut order = Vec::with_capacity(n + 1);
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let b = order[head];
            head += 1;
            order.extend(children[b].iter().copied());
        }
        if order.len() != n + 1 {
            let seen: BTreeSet<usize> = order.iter().copied().collect();
            let bus = (1..=n).find(|b| !seen.contains(b)).unwrap_or(0);
            return Err(GridError::Unreachable { bus });
        }

        for b in &buses[1..] {
            if !(b.v_lower < v0 && v0 < b.v_upper) {
                return Err(GridError::Bounds {
                    bus: b.id,
                    lower: b.v_lower,
                    v0,
                    upper: b.v_upper,
                });
            }
        }

        Ok(Self {
            base_kv,
            v0,
            buses,
            lines,
            parent_line,
            parent,
            order,
        })
    }

    /// The five-bus feeder used throughout the tests: chain 0-1-2 with two
    /// laterals 2-3 and 2-4. Impedances are synthetic (r = 0.02, x = 0.05 p.u.).
    pub fn five_bus() -> Self {
        let buses = (0..5)
            .map(|id| Bus {
                id,
                v_lower: DEFAULT_V_LOWER,
                v_upper: DEFAULT_V_UPPER,
            })
            .collect();
        let lines = [(0, 1), (1, 2), (2, 3), (2, 4)]
            .into_iter()
            .map(|(from, to)| Line {
                from,
                to,
                r: 0.02,
                x: 0.05,
            })
            .collect();
        Self::new(DEFAULT_BASE_KV, DEFAULT_V0, buses, lines).expect("fixture is a valid tree")
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Parent bus of `bus` (bus ids, not vector indices). Panics for bus 0.
    pub fn parent(&self, bus: usize) -> usize {
        assert!(bus != 0, "substation has no parent");
        self.parent[bus]
    }

    pub fn parent_line(&self, bus: usize) -> &Line {
        &self.lines[self.parent_line[bus]]
    }

    pub fn band(&self) -> VoltageBand {
        VoltageBand {
            lower: self.buses[1..].iter().map(|b| b.v_lower).collect(),
            upper: self.buses[1..].iter().map(|b| b.v_upper).collect(),
        }
    }

    /// Converts a per-unit voltage to kV for display.
    pub fn to_kv(&self, v_pu: f64) -> f64 {
        v_pu * self.base_kv
    }

    /// Builds the X and R sensitivity matrices.
    ///
    /// Entry `(i, j)` is twice the summed impedance of lines shared by the
    /// substation paths of buses `i` and `j`, which is twice the cumulative
    /// impedance from the root down to their lowest common ancestor.
    pub fn sensitivity(&self) -> SensitivityMatrices {
        let n = self.n();
        let mut depth = vec![0usize; n + 1];
        let mut cum_r = vec![0.0; n + 1];
        let mut cum_x = vec![0.0; n + 1];
        for &b in &self.order[1..] {
            let p = self.parent[b];
            let line = self.parent_line(b);
            depth[b] = depth[p] + 1;
            cum_r[b] = cum_r[p] + line.r;
            cum_x[b] = cum_x[p] + line.x;
        }
        let lca = |mut a: usize, mut b: usize| {
            while depth[a] > depth[b] {
                a = self.parent[a];
            }
            while depth[b] > depth[a] {
                b = self.parent[b];
            }
            while a != b {
                a = self.parent[a];
                b = self.parent[b];
            }
            a
        };
        let mut x = Matrix::zeros(n, n);
        let mut r = Matrix::zeros(n, n);
        for i in 1..=n {
            for j in i..=n {
                let c = lca(i, j);
                x[(i - 1, j - 1)] = 2.0 * cum_x[c];
                x[(j - 1, i - 1)] = 2.0 * cum_x[c];
                r[(i - 1, j - 1)] = 2.0 * cum_r[c];
                r[(j - 1, i - 1)] = 2.0 * cum_r[c];
            }
        }
        SensitivityMatrices { x, r }
    }

    /// Solves the linearized branch-flow equations for injections `p`, `q`.
    ///
    /// Flows accumulate leaf-to-root (a line carries minus the net injection of
    /// the subtree below it), then voltages drop root-to-leaf.
    pub fn solve_distflow(&self, p: &[f64], q: &[f64]) -> Result<(BranchFlows, Vec<f64>), GridError> {
        let n = self.n();
        for len in [p.len(), q.len()] {
            if len != n {
                return Err(GridError::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        let mut sub_p = vec![0.0; n + 1];
        let mut sub_q = vec![0.0; n + 1];
        sub_p[1..].copy_from_slice(p);
        sub_q[1..].copy_from_slice(q);
        let mut flows = BranchFlows {
            p: vec![0.0; n],
            q: vec![0.0; n],
        };
        for &b in self.order[1..].iter().rev() {
            let li = self.parent_line[b];
            flows.p[li] = -sub_p[b];
            flows.q[li] = -sub_q[b];
            let parent = self.parent[b];
            sub_p[parent] += sub_p[b];
            sub_q[parent] += sub_q[b];
        }
        let mut v = vec![0.0; n + 1];
        v[0] = self.v0;
        for &b in &self.order[1..] {
            let li = self.parent_line[b];
            let line = &self.lines[li];
            v[b] = v[self.parent[b]] - 2.0 * (line.r * flows.p[li] + line.x * flows.q[li]);
        }
        v.remove(0);
        Ok((flows, v))
    }

    /// Net injection balance at each bus: inflow minus outflow plus injection.
    /// Zero (to rounding) for flows produced by [`Self::solve_distflow`].
    pub fn conservation_residual(&self, flows: &BranchFlows, p: &[f64], q: &[f64]) -> Vec<(f64, f64)> {
        let n = self.n();
        let mut res: Vec<(f64, f64)> = (0..n).map(|k| (p[k], q[k])).collect();
        for (li, line) in self.lines.iter().enumerate() {
            res[line.to - 1].0 += flows.p[li];
            res[line.to - 1].1 += flows.q[li];
            if line.from != 0 {
                res[line.from - 1].0 -= flows.p[li];
                res[line.from - 1].1 -= flows.q[li];
            }
        }
        res
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            base_kv: self.base_kv,
            v0: self.v0,
            buses: self.buses.clone(),
            lines: self.lines.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("network serializes")
    }

    /// Parses a network file. Unknown keys are tolerated and reported back as
    /// warnings rather than rejected.
    pub fn from_json(text: &str) -> Result<Loaded<Self>, GridError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GridError::File(e.to_string()))?;
        let mut warnings = Vec::new();
        collect_unknown_keys(&value, &mut warnings);
        let file: NetworkFile =
            serde_json::from_value(value).map_err(|e| GridError::File(e.to_string()))?;
        let net = Self::new(file.base_kv, file.v0, file.buses, file.lines)?;
        Ok(Loaded {
            value: net,
            warnings,
        })
    }

    pub fn load(path: &Path) -> Result<Loaded<Self>, GridError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GridError::File(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn collect_unknown_keys(value: &serde_json::Value, warnings: &mut Vec<String>) {
    const TOP: [&str; 4] = ["base_kv", "v0", "buses", "lines"];
    const BUS: [&str; 3] = ["id", "v_lower", "v_upper"];
    const LINE: [&str; 4] = ["from", "to", "r", "x"];
    let Some(obj) = value.as_object() else { return };
    for key in obj.keys().filter(|k| !TOP.contains(&k.as_str())) {
        warnings.push(format!("unknown key `{key}`"));
    }
    for (section, allowed) in [("buses", &BUS[..]), ("lines", &LINE[..])] {
        if let Some(items) = obj.get(section).and_then(|v| v.as_array()) {
            for (i, item) in items.iter().enumerate() {
                if let Some(o) = item.as_object() {
                    for key in o.keys().filter(|k| !allowed.contains(&k.as_str())) {
                        warnings.push(format!("unknown key `{section}[{i}].{key}`"));
                    }
                }
            }
        }
    }
}

/// A parsed value together with non-fatal loader warnings.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default = "default_base_kv")]
    pub base_kv: f64,
    #[serde(default = "default_v0")]
    pub v0: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
}

fn default_base_kv() -> f64 {
    DEFAULT_BASE_KV
}

fn default_v0() -> f64 {
    DEFAULT_V0
}

/// Reactance and resistance sensitivities: `v = R p + X q + v0·1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub x: Matrix,
    pub r: Matrix,
}

/// Active and reactive line flows, indexed like the network's line list and
/// oriented parent to child.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlows {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceRange {
    pub r_min: f64,
    pub r_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for ImpedanceRange {
    fn default() -> Self {
        Self {
            r_min: 0.005,
            r_max: 0.05,
            x_min: 0.01,
            x_max: 0.08,
        }
    }
}

impl ImpedanceRange {
    fn validate(&self) -> Result<(), GridError> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !ok(self.r_min, self.r_max) {
            return Err(GridError::ImpedanceRange(format!(
                "r range [{}, {}] must be positive and non-empty",
                self.r_min, self.r_max
            )));
        }
        if !ok(self.x_min, self.x_max) {
            return Err(GridError::ImpedanceRange(format!(
                "x range [{}, {}] must be positive and non-empty",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }
}

/// Random radial feeder with `n` non-substation buses. Bus `k` attaches to a
/// uniformly chosen earlier bus, so the result is always a tree rooted at 0.
pub fn generate_random_feeder(n: usize, seed: u64, range: ImpedanceRange) -> Result<RadialNetwork, GridError> {
    if n == 0 {
        return Err(GridError::Empty);
    }
    range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let buses = (0..=n)
        .map(|id| Bus {
            id,
            v_lower: DEFAULT_V_LOWER,
            v_upper: DEFAULT_V_UPPER,
        })
        .collect();
    let lines = (1..=n)
        .map(|to| Line {
            from: rng.random_range(0..to),
            to,
            r: sample(&mut rng, range.r_min, range.r_max),
            x: sample(&mut rng, range.x_min, range.x_max),
        })
        .collect();
    RadialNetwork::new(DEFAULT_BASE_KV, DEFAULT_V0, buses, lines)
}
