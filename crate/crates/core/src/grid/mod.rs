//! Electrical network model: buses, lines, generators and per-slot profiles.
//!
//! All electrical quantities are stored in per-unit on the case MVA base.
//! Generator cost polynomials stay in their native units (`$/h` against MW).

mod case;
mod profile;

pub use case::{parse_case, serialize_case, CaseError};
pub use profile::{parse_profile_csv, to_csv as profile_to_csv, Profile, ProfileError};

use num_complex::Complex64;
use thiserror::Error;

/// One transmission line with series admittance `y = 1/(r + jx)` in per-unit.
#[derive(Debug, Clone)]
pub struct Line {
    /// 1-based bus id of the sending end.
    pub from: usize,
    /// 1-based bus id of the receiving end.
    pub to: usize,
    /// Series admittance, per-unit.
    pub y: Complex64,
    /// Voltage-angle difference limit across the line, radians.
    pub theta_max: f64,
}

/// A bus with its base load and voltage magnitude limits.
#[derive(Debug, Clone)]
pub struct Bus {
    /// 1-based bus id; ids are contiguous `1..=N`.
    pub id: usize,
    /// Base real demand, MW (before profile scaling).
    pub p_load_base: f64,
    /// Base reactive demand, MVAr.
    pub q_load_base: f64,
    /// Lower voltage magnitude limit, per-unit.
    pub v_min: f64,
    /// Upper voltage magnitude limit, per-unit.
    pub v_max: f64,
}

/// A dispatchable generator with box limits and a quadratic cost polynomial
/// `f(P) = c2 P^2 + c1 P + c0` (`P` in MW, `f` in `$/h`).
#[derive(Debug, Clone)]
pub struct Generator {
    /// 1-based id of the bus the generator is connected to.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// `(c2, c1, c0)` with `c2 >= 0`.
    pub cost: (f64, f64, f64),
}

impl Generator {
    /// Evaluate the cost polynomial at `p_mw`.
    pub fn cost_at(&self, p_mw: f64) -> f64 {
        let (c2, c1, c0) = self.cost;
        c2 * p_mw * p_mw + c1 * p_mw + c0
    }
}

/// An immutable, validated network.
#[derive(Debug, Clone)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    /// 0-based adjacency: `neighbors[k]` lists buses connected to bus `k+1`.
    neighbors: Vec<Vec<usize>>,
}

/// A single validation finding; `message` names the offending element.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("profile sums to zero; cannot scale load")]
    ZeroSumProfile,
    #[error("profile length {got} does not match horizon {expected}")]
    ProfileLength { expected: usize, got: usize },
}

impl Network {
    /// Assemble a network from parts without validating. Callers that want a
    /// guaranteed-consistent network should run [`validate`] afterwards (or
    /// go through [`parse_case`], which does).
    pub fn from_parts(
        base_mva: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        generators: Vec<Generator>,
    ) -> Network {
        let n = buses.len();
        let mut neighbors = vec![Vec::new(); n];
        for line in &lines {
            if line.from >= 1 && line.from <= n && line.to >= 1 && line.to <= n {
                neighbors[line.from - 1].push(line.to - 1);
                neighbors[line.to - 1].push(line.from - 1);
            }
        }
        for adj in &mut neighbors {
            adj.sort_unstable();
        }
        Network {
            base_mva,
            buses,
            lines,
            generators,
            neighbors,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Neighbors of 0-based bus index `k`.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    /// 0-based indices of generator buses, ascending and deduplicated.
    pub fn generator_buses(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.generators.iter().map(|g| g.bus - 1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Whether 1-based bus id `bus` hosts a generator (i.e. is a charging
    /// station).
    pub fn is_generator_bus(&self, bus: usize) -> bool {
        self.generators.iter().any(|g| g.bus == bus)
    }

    /// Series admittance of the line joining 0-based buses `k` and `m`, if
    /// one exists.
    pub fn line_admittance(&self, k: usize, m: usize) -> Option<Complex64> {
        self.lines
            .iter()
            .find(|l| (l.from - 1 == k && l.to - 1 == m) || (l.from - 1 == m && l.to - 1 == k))
            .map(|l| l.y)
    }
}

/// Check every structural invariant and return the violations found. An
/// empty list means the network is consistent.
pub fn validate(network: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = network.buses.len();
    let push = |out: &mut Vec<Violation>, message: String| out.push(Violation { message });

    if network.base_mva <= 0.0 || !network.base_mva.is_finite() {
        push(&mut out, format!("baseMVA must be positive, got {}", network.base_mva));
    }
    for (i, bus) in network.buses.iter().enumerate() {
        if bus.id != i + 1 {
            push(&mut out, format!("bus ids must be contiguous 1..N; position {} has id {}", i + 1, bus.id));
        }
        if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
            push(&mut out, format!("voltage limits out of order on bus {}: v_min={} v_max={}", bus.id, bus.v_min, bus.v_max));
        }
        if !bus.p_load_base.is_finite() || !bus.q_load_base.is_finite() {
            push(&mut out, format!("non-finite load on bus {}", bus.id));
        }
    }
    for line in &network.lines {
        if line.from == line.to {
            push(&mut out, format!("line {}-{} is a self-loop", line.from, line.to));
        }
        if line.from < 1 || line.from > n || line.to < 1 || line.to > n {
            push(&mut out, format!("line {}-{} references a nonexistent bus", line.from, line.to));
        }
        if line.y.norm() == 0.0 || !line.y.re.is_finite() || !line.y.im.is_finite() {
            push(&mut out, format!("line {}-{} has zero or non-finite admittance", line.from, line.to));
        }
        if !(line.theta_max > 0.0 && line.theta_max < std::f64::consts::FRAC_PI_2) {
            push(&mut out, format!("line {}-{} angle limit {} outside (0, pi/2)", line.from, line.to, line.theta_max));
        }
    }
    for (a, line) in network.lines.iter().enumerate() {
        for other in &network.lines[a + 1..] {
            let same = (line.from == other.from && line.to == other.to)
                || (line.from == other.to && line.to == other.from);
            if same {
                push(&mut out, format!("duplicate line between buses {} and {}", line.from, line.to));
            }
        }
    }
    for gen in &network.generators {
        if gen.bus < 1 || gen.bus > n {
            push(&mut out, format!("generator on nonexistent bus {}", gen.bus));
        }
        if gen.p_min > gen.p_max {
            push(&mut out, format!("generator on bus {}: p_min {} > p_max {}", gen.bus, gen.p_min, gen.p_max));
        }
        if gen.q_min > gen.q_max {
            push(&mut out, format!("generator on bus {}: q_min {} > q_max {}", gen.bus, gen.q_min, gen.q_max));
        }
        if gen.cost.0 < 0.0 {
            push(&mut out, format!("generator on bus {}: quadratic cost coefficient {} is negative", gen.bus, gen.cost.0));
        }
    }
    if n > 0 && !is_connected(network) {
        push(&mut out, "network graph is disconnected".to_string());
    }
    out
}

fn is_connected(network: &Network) -> bool {
    let n = network.buses.len();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(k) = stack.pop() {
        for &m in network.neighbors(k) {
            if m < n && !seen[m] {
                seen[m] = true;
                stack.push(m);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Spread a base demand over `t_slots` slots following the shape of
/// `profile`:
///
/// `P(t) = l(t) * base * T / sum(l)`
///
/// so the series totals `base * T` regardless of the profile shape.
pub fn scale_load(base_mw: f64, profile: &Profile, t_slots: usize) -> Result<Vec<f64>, GridError> {
    if profile.values.len() != t_slots {
        return Err(GridError::ProfileLength {
            expected: t_slots,
            got: profile.values.len(),
        });
    }
    let sum: f64 = profile.values.iter().sum();
    if base_mw == 0.0 {
        return Ok(vec![0.0; t_slots]);
    }
    if sum <= 0.0 {
        return Err(GridError::ZeroSumProfile);
    }
    let scale = base_mw * t_slots as f64 / sum;
    Ok(profile.values.iter().map(|l| l * scale).collect())
}
