//! Plain-text case files.
//!
//! The format is line-oriented. `#` starts a comment; blank lines are
//! skipped. A `baseMVA <value>` line sets the MVA base. Section headers
//! `bus`, `gen`, `branch`, `gencost` introduce whitespace-separated rows:
//!
//! ```text
//! bus      id  Pd(MW)  Qd(MVAr)  Vmin(pu)  Vmax(pu)
//! gen      bus Pmin    Pmax      Qmin      Qmax        (MW / MVAr)
//! branch   from to     r         x         angle_limit_deg
//! gencost  bus c2      c1        c0
//! ```
//!
//! Branch rows may carry extra trailing columns (shunt susceptance, taps);
//! they are read and ignored since the flow model uses series admittances
//! only. An `angle_limit_deg` of `0` means "unspecified" and defaults to 30
//! degrees. Every generator bus must have exactly one `gencost` row.

use super::{validate, Bus, Generator, Line, Network, Violation};
use num_complex::Complex64;
use thiserror::Error;

const DEFAULT_THETA_MAX_RAD: f64 = std::f64::consts::PI / 6.0;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("case is invalid: {}", summarize(.violations))]
    Invalid { violations: Vec<Violation> },
    #[error("missing baseMVA directive")]
    MissingBase,
    #[error("line {line}: gencost row for bus {bus} has no matching generator")]
    OrphanCost { line: usize, bus: usize },
    #[error("generator on bus {bus} has no gencost row")]
    MissingCost { bus: usize },
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.message.clone())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Bus,
    Gen,
    Branch,
    Gencost,
}

/// Parse a case file into a validated [`Network`].
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let mut base_mva: Option<f64> = None;
    let mut buses: Vec<Bus> = Vec::new();
    let mut gens: Vec<Generator> = Vec::new();
    let mut raw_branches: Vec<(usize, usize, f64, f64, f64, usize)> = Vec::new();
    let mut costs: Vec<(usize, f64, f64, f64, usize)> = Vec::new();
    let mut section = Section::None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "baseMVA" => {
                let v = parse_f64(fields.get(1).copied(), line_no, "baseMVA value")?;
                base_mva = Some(v);
                continue;
            }
            "bus" if fields.len() == 1 => {
                section = Section::Bus;
                continue;
            }
            "gen" if fields.len() == 1 => {
                section = Section::Gen;
                continue;
            }
            "branch" if fields.len() == 1 => {
                section = Section::Branch;
                continue;
            }
            "gencost" if fields.len() == 1 => {
                section = Section::Gencost;
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => {
                return Err(CaseError::Malformed {
                    line: line_no,
                    message: format!("data row before any section header: {line:?}"),
                });
            }
            Section::Bus => {
                require_fields(&fields, 5, line_no, "bus row needs id Pd Qd Vmin Vmax")?;
                buses.push(Bus {
                    id: parse_usize(fields[0], line_no, "bus id")?,
                    p_load_base: parse_f64(Some(fields[1]), line_no, "Pd")?,
                    q_load_base: parse_f64(Some(fields[2]), line_no, "Qd")?,
                    v_min: parse_f64(Some(fields[3]), line_no, "Vmin")?,
                    v_max: parse_f64(Some(fields[4]), line_no, "Vmax")?,
                });
            }
            Section::Gen => {
                require_fields(&fields, 5, line_no, "gen row needs bus Pmin Pmax Qmin Qmax")?;
                gens.push(Generator {
                    bus: parse_usize(fields[0], line_no, "gen bus")?,
                    p_min: parse_f64(Some(fields[1]), line_no, "Pmin")?,
                    p_max: parse_f64(Some(fields[2]), line_no, "Pmax")?,
                    q_min: parse_f64(Some(fields[3]), line_no, "Qmin")?,
                    q_max: parse_f64(Some(fields[4]), line_no, "Qmax")?,
                    cost: (0.0, 0.0, 0.0),
                });
            }
            Section::Branch => {
                require_fields(&fields, 5, line_no, "branch row needs from to r x angle_limit_deg")?;
                raw_branches.push((
                    parse_usize(fields[0], line_no, "from bus")?,
                    parse_usize(fields[1], line_no, "to bus")?,
                    parse_f64(Some(fields[2]), line_no, "r")?,
                    parse_f64(Some(fields[3]), line_no, "x")?,
                    parse_f64(Some(fields[4]), line_no, "angle_limit_deg")?,
                    line_no,
                ));
            }
            Section::Gencost => {
                require_fields(&fields, 4, line_no, "gencost row needs bus c2 c1 c0")?;
                costs.push((
                    parse_usize(fields[0], line_no, "gencost bus")?,
                    parse_f64(Some(fields[1]), line_no, "c2")?,
                    parse_f64(Some(fields[2]), line_no, "c1")?,
                    parse_f64(Some(fields[3]), line_no, "c0")?,
                    line_no,
                ));
            }
        }
    }

    let base_mva = base_mva.ok_or(CaseError::MissingBase)?;

    let mut lines = Vec::with_capacity(raw_branches.len());
    for (from, to, r, x, angle_deg, line_no) in raw_branches {
        let z = Complex64::new(r, x);
        if z.norm() == 0.0 {
            return Err(CaseError::Malformed {
                line: line_no,
                message: format!("branch {from}-{to} has zero impedance"),
            });
        }
        let theta_max = if angle_deg == 0.0 {
            DEFAULT_THETA_MAX_RAD
        } else {
            angle_deg.to_radians()
        };
        lines.push(Line {
            from,
            to,
            y: Complex64::new(1.0, 0.0) / z,
            theta_max,
        });
    }

    for (bus, c2, c1, c0, line_no) in costs {
        let gen = gens
            .iter_mut()
            .find(|g| g.bus == bus)
            .ok_or(CaseError::OrphanCost { line: line_no, bus })?;
        gen.cost = (c2, c1, c0);
    }
    // gencost rows with all-zero coefficients are indistinguishable from
    // "missing", so require one row per generator bus explicitly.
    for gen in &gens {
        let covered = text
            .lines()
            .skip_while(|l| l.trim() != "gencost")
            .any(|l| l.split_whitespace().next() == Some(&gen.bus.to_string()));
        if !covered {
            return Err(CaseError::MissingCost { bus: gen.bus });
        }
    }

    let network = Network::from_parts(base_mva, buses, lines, gens);
    let violations = validate(&network);
    if violations.is_empty() {
        Ok(network)
    } else {
        Err(CaseError::Invalid { violations })
    }
}

/// Emit the documented field subset so that `parse_case(serialize_case(n))`
/// reproduces `n`.
pub fn serialize_case(network: &Network) -> String {
    let mut out = String::new();
    out.push_str(&format!("baseMVA {}\n", fmt(network.base_mva)));
    out.push_str("bus\n");
    for b in &network.buses {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            b.id,
            fmt(b.p_load_base),
            fmt(b.q_load_base),
            fmt(b.v_min),
            fmt(b.v_max)
        ));
    }
    out.push_str("gen\n");
    for g in &network.generators {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            g.bus,
            fmt(g.p_min),
            fmt(g.p_max),
            fmt(g.q_min),
            fmt(g.q_max)
        ));
    }
    out.push_str("branch\n");
    for l in &network.lines {
        let z = Complex64::new(1.0, 0.0) / l.y;
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            l.from,
            l.to,
            fmt(z.re),
            fmt(z.im),
            fmt(l.theta_max.to_degrees())
        ));
    }
    out.push_str("gencost\n");
    for g in &network.generators {
        out.push_str(&format!(
            "{} {} {} {}\n",
            g.bus,
            fmt(g.cost.0),
            fmt(g.cost.1),
            fmt(g.cost.2)
        ));
    }
    out
}

fn fmt(x: f64) -> String {
    // Round-trippable decimal form.
    let s = format!("{x:.12}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn require_fields(fields: &[&str], n: usize, line: usize, message: &str) -> Result<(), CaseError> {
    if fields.len() < n {
        Err(CaseError::Malformed {
            line,
            message: message.to_string(),
        })
    } else {
        Ok(())
    }
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize, CaseError> {
    s.parse().map_err(|_| CaseError::Malformed {
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })
}

fn parse_f64(s: Option<&str>, line: usize, what: &str) -> Result<f64, CaseError> {
    let s = s.ok_or_else(|| CaseError::Malformed {
        line,
        message: format!("missing {what}"),
    })?;
    let v: f64 = s.parse().map_err(|_| CaseError::Malformed {
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CaseError::Malformed {
            line,
            message: format!("{what} is not finite"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    const TWO_BUS: &str = "\
baseMVA 100
bus
1 0 0 0.9 1.1
2 40 5 0.9 1.1
gen
1 0 100 -80 80
branch
1 2 0 0.5 0
gencost
1 0 10 0
";

    #[test]
    fn reactance_only_branch_gives_pure_imaginary_admittance() {
        let net = parse_case(TWO_BUS).unwrap();
        let y = net.lines[0].y;
        assert!((y.re - 0.0).abs() < 1e-12);
        assert!((y.im + 2.0).abs() < 1e-12);
        assert!((net.lines[0].theta_max - std::f64::consts::PI / 6.0).abs() < 1e-12);
    }

    #[test]
    fn three_bus_ring_counts() {
        let net = parse_case(bundled::CASE3_RING).unwrap();
        assert_eq!(net.n_buses(), 3);
        assert_eq!(net.generators.len(), 1);
        assert_eq!(net.lines.len(), 3);
    }

    #[test]
    fn bundled_nine_bus_counts() {
        let net = parse_case(bundled::CASE9).unwrap();
        assert_eq!(net.n_buses(), 9);
        assert_eq!(net.generators.len(), 3);
        assert_eq!(net.lines.len(), 9);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let bad = TWO_BUS.replace("2 40 5 0.9 1.1", "2 forty 5 0.9 1.1");
        match parse_case(&bad) {
            Err(CaseError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_branch_is_rejected() {
        let bad = TWO_BUS.replace("1 2 0 0.5 0", "1 2 0 0.5 0\n2 1 0 0.4 0");
        match parse_case(&bad) {
            Err(CaseError::Invalid { violations }) => {
                assert!(violations.iter().any(|v| v.message.contains("duplicate")));
            }
            other => panic!("expected invalid case, got {other:?}"),
        }
    }

    #[test]
    fn inverted_voltage_limits_are_rejected() {
        let bad = TWO_BUS.replace("2 40 5 0.9 1.1", "2 40 5 1.2 1.1");
        assert!(matches!(parse_case(&bad), Err(CaseError::Invalid { .. })));
    }

    #[test]
    fn missing_gencost_is_rejected() {
        let bad = TWO_BUS.replace("gencost\n1 0 10 0\n", "");
        assert!(matches!(parse_case(&bad), Err(CaseError::MissingCost { bus: 1 })));
    }

    #[test]
    fn serialize_then_parse_is_identity_on_documented_fields() {
        let net = parse_case(bundled::CASE9).unwrap();
        let round = parse_case(&serialize_case(&net)).unwrap();
        assert_eq!(net.base_mva, round.base_mva);
        assert_eq!(net.buses.len(), round.buses.len());
        for (a, b) in net.buses.iter().zip(&round.buses) {
            assert_eq!(a.id, b.id);
            assert!((a.p_load_base - b.p_load_base).abs() < 1e-9);
            assert!((a.v_min - b.v_min).abs() < 1e-12);
        }
        for (a, b) in net.lines.iter().zip(&round.lines) {
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert!((a.y - b.y).norm() < 1e-9);
            assert!((a.theta_max - b.theta_max).abs() < 1e-12);
        }
        for (a, b) in net.generators.iter().zip(&round.generators) {
            assert_eq!(a.bus, b.bus);
            assert!((a.p_max - b.p_max).abs() < 1e-9);
            assert!((a.cost.0 - b.cost.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ignores_extra_branch_columns() {
        let with_shunt = TWO_BUS.replace("1 2 0 0.5 0", "1 2 0 0.5 0 0.15 1.02");
        let net = parse_case(&with_shunt).unwrap();
        assert!((net.lines[0].y.im + 2.0).abs() < 1e-12);
    }
}
