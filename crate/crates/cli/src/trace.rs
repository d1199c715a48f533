//! Schema-stable CSV emission.
//!
//! Every file has a fixed column order and one row per slot; identical
//! inputs reproduce byte-identical files. Wall-clock timings and timestamps
//! live in `run_meta.csv` / `offline_meta.csv`, which are excluded from
//! determinism guarantees. Writes go through a temp file and rename.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use pevgrid::grid::Network;
use pevgrid::scenario::{OfflineResult, Scenario};
use pevgrid::MpcResult;

pub const ONLINE_TRACE: &str = "online_trace.csv";
pub const OFFLINE_TRACE: &str = "offline_trace.csv";
pub const SUMMARY: &str = "summary.csv";
pub const OFFLINE_SUMMARY: &str = "offline_summary.csv";
pub const VOLTAGES: &str = "voltages.csv";
pub const OFFLINE_VOLTAGES: &str = "offline_voltages.csv";
pub const GENERATION: &str = "generation.csv";
pub const OFFLINE_GENERATION: &str = "offline_generation.csv";
pub const RUN_META: &str = "run_meta.csv";
pub const OFFLINE_META: &str = "offline_meta.csv";
pub const COMPARE: &str = "compare.csv";
pub const COMPARE_SUMMARY: &str = "compare_summary.csv";

/// Fixed-point with six decimals; `-0.000000` is normalized away.
pub fn fmt_f(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// Scientific notation for small diagnostics like rank gaps.
pub fn fmt_e(x: f64) -> String {
    format!("{x:.3e}")
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn write_online(
    dir: &Path,
    scenario: &Scenario,
    result: &MpcResult,
    network: &Network,
) -> io::Result<()> {
    let mut trace = String::from(
        "slot,gen_cost,charge_cost,total_cost,aggregate_charge_kw,min_v_pu,max_v_pu,sdr_rank,noa_iters,rank_gap\n",
    );
    for r in &result.records {
        let agg: f64 = r.charges_kw.iter().map(|(_, kw)| kw).sum();
        let (min_v, max_v) = match &r.voltage {
            Some(v) => {
                let mags: Vec<f64> = v.iter().map(|c| c.norm()).collect();
                (
                    mags.iter().cloned().fold(f64::INFINITY, f64::min),
                    mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        trace.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.slot,
            fmt_f(r.gen_cost),
            fmt_f(r.charge_cost),
            fmt_f(r.gen_cost + r.charge_cost),
            fmt_f(agg),
            if min_v.is_nan() { String::new() } else { fmt_f(min_v) },
            if max_v.is_nan() { String::new() } else { fmt_f(max_v) },
            r.sdr_rank,
            r.noa_iterations,
            fmt_e(r.rank_gap),
        ));
    }
    write_atomic(&dir.join(ONLINE_TRACE), &trace)?;

    let n = network.n_buses();
    let mut volts = String::from("slot");
    for k in 1..=n {
        volts.push_str(&format!(",v{k}"));
    }
    volts.push('\n');
    for r in &result.records {
        volts.push_str(&r.slot.to_string());
        match &r.voltage {
            Some(v) => {
                for c in v {
                    volts.push_str(&format!(",{}", fmt_f(c.norm())));
                }
            }
            None => {
                for _ in 0..n {
                    volts.push(',');
                }
            }
        }
        volts.push('\n');
    }
    write_atomic(&dir.join(VOLTAGES), &volts)?;

    let mut gen_csv = String::from("slot");
    for (g, generator) in network.generators.iter().enumerate() {
        gen_csv.push_str(&format!(",pg{}_bus{}_mw", g + 1, generator.bus));
    }
    gen_csv.push_str(",pg_total_mw\n");
    for r in &result.records {
        gen_csv.push_str(&r.slot.to_string());
        for p in &r.pg_mw {
            gen_csv.push_str(&format!(",{}", fmt_f(*p)));
        }
        gen_csv.push_str(&format!(",{}\n", fmt_f(r.pg_mw.iter().sum())));
    }
    write_atomic(&dir.join(GENERATION), &gen_csv)?;

    let delivered_total: f64 = result.delivered_kwh.iter().map(|(_, kwh)| kwh).sum();
    let mut summary = String::from("key,value\n");
    summary.push_str(&format!("fingerprint,{}\n", result.fingerprint));
    summary.push_str(&format!("seed,{}\n", scenario.seed));
    summary.push_str(&format!("slots,{}\n", scenario.t_slots));
    summary.push_str(&format!("dt_hours,{}\n", scenario.dt_hours));
    summary.push_str(&format!("pevs,{}\n", scenario.fleet.len()));
    summary.push_str(&format!("gen_cost,{}\n", fmt_f(result.gen_cost)));
    summary.push_str(&format!("charge_cost,{}\n", fmt_f(result.charge_cost)));
    summary.push_str(&format!("total_cost,{}\n", fmt_f(result.total_cost)));
    summary.push_str(&format!("delivered_kwh,{}\n", fmt_f(delivered_total)));
    summary.push_str(&format!("rejected,{}\n", result.rejected.len()));
    summary.push_str(&format!("evicted,{}\n", result.evicted.len()));
    summary.push_str(&format!(
        "slots_completed,{}\n",
        result.records.len()
    ));
    write_atomic(&dir.join(SUMMARY), &summary)?;

    let mut meta = String::from("slot,solve_ms\n");
    for r in &result.records {
        meta.push_str(&format!("{},{:.1}\n", r.slot, r.solve_ms));
    }
    meta.push_str(&format!(
        "written_unix_s,{}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    ));
    write_atomic(&dir.join(RUN_META), &meta)
}

pub fn write_offline(dir: &Path, scenario: &Scenario, result: &OfflineResult) -> io::Result<()> {
    let mut trace = String::from(
        "slot,gen_cost,charge_cost,total_cost,aggregate_charge_kw,min_v_pu,max_v_pu,sdr_rank,noa_iters,rank_gap\n",
    );
    for s in &result.per_slot {
        let (min_v, max_v) = match &s.voltage {
            Some(v) => {
                let mags: Vec<f64> = v.iter().map(|c| c.norm()).collect();
                (
                    mags.iter().cloned().fold(f64::INFINITY, f64::min),
                    mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        trace.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.slot,
            fmt_f(s.gen_cost),
            fmt_f(s.charge_cost),
            fmt_f(s.gen_cost + s.charge_cost),
            fmt_f(s.charge_kw_total),
            if min_v.is_nan() { String::new() } else { fmt_f(min_v) },
            if max_v.is_nan() { String::new() } else { fmt_f(max_v) },
            s.sdr_rank,
            s.noa_iterations,
            fmt_e(s.rank_gap),
        ));
    }
    trace.push_str(&format!("lower_bound,,,{},,,,,,\n", fmt_f(result.lower_bound)));
    write_atomic(&dir.join(OFFLINE_TRACE), &trace)?;

    let n = scenario.network.n_buses();
    let mut volts = String::from("slot");
    for k in 1..=n {
        volts.push_str(&format!(",v{k}"));
    }
    volts.push('\n');
    for s in &result.per_slot {
        volts.push_str(&s.slot.to_string());
        match &s.voltage {
            Some(v) => {
                for c in v {
                    volts.push_str(&format!(",{}", fmt_f(c.norm())));
                }
            }
            None => {
                for _ in 0..n {
                    volts.push(',');
                }
            }
        }
        volts.push('\n');
    }
    write_atomic(&dir.join(OFFLINE_VOLTAGES), &volts)?;

    let mut gen_csv = String::from("slot");
    for (g, generator) in scenario.network.generators.iter().enumerate() {
        gen_csv.push_str(&format!(",pg{}_bus{}_mw", g + 1, generator.bus));
    }
    gen_csv.push_str(",pg_total_mw\n");
    for s in &result.per_slot {
        gen_csv.push_str(&s.slot.to_string());
        for p in &s.pg_mw {
            gen_csv.push_str(&format!(",{}", fmt_f(*p)));
        }
        gen_csv.push_str(&format!(",{}\n", fmt_f(s.pg_mw.iter().sum())));
    }
    write_atomic(&dir.join(OFFLINE_GENERATION), &gen_csv)?;

    let mut summary = String::from("key,value\n");
    summary.push_str(&format!("fingerprint,{}\n", result.fingerprint));
    summary.push_str(&format!("seed,{}\n", scenario.seed));
    summary.push_str(&format!("method,{}\n", result.method));
    summary.push_str(&format!("lower_bound,{}\n", fmt_f(result.lower_bound)));
    summary.push_str(&format!("objective,{}\n", fmt_f(result.objective)));
    summary.push_str(&format!("gen_cost,{}\n", fmt_f(result.gen_cost)));
    summary.push_str(&format!("charge_cost,{}\n", fmt_f(result.charge_cost)));
    summary.push_str(&format!("iterations,{}\n", result.iterations));
    summary.push_str(&format!("converged,{}\n", result.converged));
    summary.push_str(&format!("rejected,{}\n", result.rejected.len()));
    write_atomic(&dir.join(OFFLINE_SUMMARY), &summary)?;

    let meta = format!(
        "key,value\nwritten_unix_s,{}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    );
    write_atomic(&dir.join(OFFLINE_META), &meta)
}

/// Minimal CSV reading for trace-driven plotting and comparison: returns
/// `(header, rows)` with empty cells as empty strings.
pub fn read_csv(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}
