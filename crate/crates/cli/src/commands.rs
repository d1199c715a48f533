//! Subcommand implementations. Exit codes: 0 success, 1 usage/config
//! problems, 2 solver failures or infeasible instances.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};

use pevgrid::bundled;
use pevgrid::grid::{parse_case, parse_profile_csv, Profile};
use pevgrid::mpc::MpcOptions;
use pevgrid::noa::{self, MuMode, PenaltyConfig};
use pevgrid::scenario::{
    self, build_fleet, compare, parse_scenario_file_with_seed, run_offline, run_online,
    ArrivalConfig, OfflineMethod, OfflineOptions, PevDefaults, Scenario, ScenarioError,
};
use pevgrid::sdp::{solve, SolveStatus, SolverOptions};
use pevgrid::sdr::{self, build_window_sdr, SlotGrid, RANK_RATIO_TOL};

use crate::plot;
use crate::trace::{self, fmt_f, write_atomic};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;

#[derive(Args, Debug, Clone)]
pub struct SolverFlags {
    /// Rank-repair penalty weight; omit for the network-size default,
    /// 0 for the auto-doubling schedule.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Spectral-gap tolerance for rank-one acceptance.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Interior-point iteration cap.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Interior-point duality-gap / feasibility tolerance.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
}

impl SolverFlags {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            gap_tol: self.tol,
            feas_tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }

    pub fn penalty(&self, n_bus: usize) -> PenaltyConfig {
        let mut cfg = PenaltyConfig::for_network(n_bus);
        cfg.epsilon = self.eps;
        if let Some(v) = self.mu {
            cfg.mu = if v == 0.0 { MuMode::Auto } else { MuMode::Fixed(v) };
        }
        cfg
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario description file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory for traces (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario's fleet seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also emit SVG plots derived from the traces.
    #[arg(long)]
    pub plots: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum MethodArg {
    Joint,
    Dnoa,
}

impl From<MethodArg> for OfflineMethod {
    fn from(m: MethodArg) -> OfflineMethod {
        match m {
            MethodArg::Joint => OfflineMethod::Joint,
            MethodArg::Dnoa => OfflineMethod::Dnoa,
        }
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, u8> {
    match parse_scenario_file_with_seed(path, seed) {
        Ok(s) => Ok(s),
        Err(e) => {
            eprintln!("error: cannot load scenario {}: {e}", path.display());
            Err(EXIT_CONFIG)
        }
    }
}

fn prepare_out(dir: &Path) -> Result<(), u8> {
    if let Err(e) = std::fs::create_dir_all(dir) {
        eprintln!("error: cannot create output directory {}: {e}", dir.display());
        return Err(EXIT_CONFIG);
    }
    Ok(())
}

fn exit_for(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Mpc(_)
        | ScenarioError::SdrNotOptimal { .. }
        | ScenarioError::SlotRepairFailed { .. }
        | ScenarioError::Noa(_)
        | ScenarioError::Sdp(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

pub fn cmd_simulate_online(args: &SimulateArgs) -> u8 {
    let scenario = match load_scenario(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Err(code) = prepare_out(&args.out) {
        return code;
    }
    let options = MpcOptions {
        solver: args.solver.solver_options(),
        penalty: args.solver.penalty(scenario.network.n_buses()),
        epsilon: args.solver.eps,
        ..Default::default()
    };
    match run_online(&scenario, &options) {
        Ok(result) => {
            if let Err(e) = trace::write_online(&args.out, &scenario, &result, &scenario.network) {
                eprintln!("error: writing traces: {e}");
                return EXIT_CONFIG;
            }
            if args.plots {
                if let Err(e) = online_plots(&args.out) {
                    eprintln!("error: writing plots: {e}");
                    return EXIT_CONFIG;
                }
            }
            println!(
                "online total {} (generation {}, charging {}), {} slots",
                fmt_f(result.total_cost),
                fmt_f(result.gen_cost),
                fmt_f(result.charge_cost),
                result.records.len()
            );
            EXIT_OK
        }
        Err(ScenarioError::Mpc(run_err)) => {
            // Partial trace still goes out before reporting failure.
            let _ = trace::write_online(&args.out, &scenario, &run_err.partial, &scenario.network);
            eprintln!("error: {run_err}");
            EXIT_SOLVER
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn online_plots(dir: &Path) -> std::io::Result<()> {
    plot::power_plot(dir, trace::GENERATION, "power.svg")?;
    plot::voltage_plot(dir, trace::VOLTAGES, "voltage.svg")?;
    plot::charging_plot(dir, trace::ONLINE_TRACE, "charging_load.svg")
}

pub fn cmd_simulate_offline(args: &SimulateArgs, method: MethodArg) -> u8 {
    let scenario = match load_scenario(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Err(code) = prepare_out(&args.out) {
        return code;
    }
    let options = OfflineOptions {
        solver: args.solver.solver_options(),
        penalty: Some(args.solver.penalty(scenario.network.n_buses())),
    };
    match run_offline(&scenario, method.into(), &options) {
        Ok(result) => {
            if let Err(e) = trace::write_offline(&args.out, &scenario, &result) {
                eprintln!("error: writing traces: {e}");
                return EXIT_CONFIG;
            }
            if args.plots {
                let r = plot::power_plot(&args.out, trace::OFFLINE_GENERATION, "offline_power.svg")
                    .and_then(|_| {
                        plot::voltage_plot(&args.out, trace::OFFLINE_VOLTAGES, "offline_voltage.svg")
                    })
                    .and_then(|_| {
                        plot::charging_plot(&args.out, trace::OFFLINE_TRACE, "offline_charging_load.svg")
                    });
                if let Err(e) = r {
                    eprintln!("error: writing plots: {e}");
                    return EXIT_CONFIG;
                }
            }
            println!(
                "offline bound {} value {} ({} method, {} iterations)",
                fmt_f(result.lower_bound),
                fmt_f(result.objective),
                result.method,
                result.iterations
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Offline method for the fresh-run mode.
    #[arg(long, value_enum, default_value_t = MethodArg::Joint)]
    pub method: MethodArg,
    /// Compare traces already present in the output directory instead of
    /// re-running both simulations.
    #[arg(long)]
    pub from_traces: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

pub fn cmd_compare(args: &CompareArgs) -> u8 {
    let scenario = match load_scenario(&args.scenario, args.seed) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Err(code) = prepare_out(&args.out) {
        return code;
    }
    if args.from_traces {
        return compare_from_traces(&args.out, &scenario);
    }
    let mpc_options = MpcOptions {
        solver: args.solver.solver_options(),
        penalty: args.solver.penalty(scenario.network.n_buses()),
        epsilon: args.solver.eps,
        ..Default::default()
    };
    let offline_options = OfflineOptions {
        solver: args.solver.solver_options(),
        penalty: Some(args.solver.penalty(scenario.network.n_buses())),
    };
    let online = match run_online(&scenario, &mpc_options) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: online run failed: {e}");
            return exit_for(&e);
        }
    };
    let offline = match run_offline(&scenario, args.method.into(), &offline_options) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: offline run failed: {e}");
            return exit_for(&e);
        }
    };
    let report = match compare(&scenario, &online, &offline) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let _ = trace::write_online(&args.out, &scenario, &online, &scenario.network);
    let _ = trace::write_offline(&args.out, &scenario, &offline);
    if let Err(e) = write_compare(&args.out, scenario.t_slots, &report) {
        eprintln!("error: writing comparison: {e}");
        return EXIT_CONFIG;
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    println!("ratio {:.6}", report.ratio);
    EXIT_OK
}

fn write_compare(
    dir: &Path,
    t_slots: usize,
    report: &pevgrid::scenario::CompareReport,
) -> std::io::Result<()> {
    let mut csv = String::from("slot,online_charge_kw,offline_charge_kw\n");
    for t in 0..t_slots {
        csv.push_str(&format!(
            "{},{},{}\n",
            t + 1,
            fmt_f(report.online_charge_kw[t]),
            fmt_f(report.offline_charge_kw[t])
        ));
    }
    write_atomic(&dir.join(trace::COMPARE), &csv)?;
    let mut summary = String::from("key,value\n");
    summary.push_str(&format!("online_total,{}\n", fmt_f(report.online_total)));
    summary.push_str(&format!("offline_total,{}\n", fmt_f(report.offline_total)));
    summary.push_str(&format!("ratio,{:.6}\n", report.ratio));
    write_atomic(&dir.join(trace::COMPARE_SUMMARY), &summary)
}

fn compare_from_traces(dir: &Path, scenario: &Scenario) -> u8 {
    let required = [
        trace::ONLINE_TRACE,
        trace::SUMMARY,
        trace::OFFLINE_TRACE,
        trace::OFFLINE_SUMMARY,
    ];
    for name in required {
        if !dir.join(name).exists() {
            eprintln!("error: missing {} in {}", name, dir.display());
            return EXIT_CONFIG;
        }
    }
    let read = |name: &str| trace::read_csv(&dir.join(name));
    let summary_value = |rows: &[Vec<String>], key: &str| -> Option<String> {
        rows.iter().find(|r| r.first().map(String::as_str) == Some(key)).map(|r| r[1].clone())
    };
    let result: anyhow::Result<(f64, f64, Vec<f64>, Vec<f64>)> = (|| {
        let (_, online_summary) = read(trace::SUMMARY)?;
        let (_, offline_summary) = read(trace::OFFLINE_SUMMARY)?;
        let fp = scenario.fingerprint().to_string();
        let online_fp = summary_value(&online_summary, "fingerprint")
            .ok_or_else(|| anyhow!("summary.csv lacks fingerprint"))?;
        let offline_fp = summary_value(&offline_summary, "fingerprint")
            .ok_or_else(|| anyhow!("offline_summary.csv lacks fingerprint"))?;
        if online_fp != fp || offline_fp != fp {
            return Err(anyhow!(
                "traces come from a different scenario (fingerprints {online_fp}/{offline_fp}, scenario {fp})"
            ));
        }
        let online_total: f64 = summary_value(&online_summary, "total_cost")
            .ok_or_else(|| anyhow!("summary.csv lacks total_cost"))?
            .parse()?;
        let offline_total: f64 = summary_value(&offline_summary, "objective")
            .ok_or_else(|| anyhow!("offline_summary.csv lacks objective"))?
            .parse()?;
        let charge_series = |name: &str| -> anyhow::Result<Vec<f64>> {
            let (header, rows) = read(name)?;
            let col = header
                .iter()
                .position(|h| h == "aggregate_charge_kw")
                .ok_or_else(|| anyhow!("{name} lacks aggregate_charge_kw"))?;
            Ok(rows
                .iter()
                .filter(|r| r.first().map(|s| s.parse::<usize>().is_ok()).unwrap_or(false))
                .map(|r| r[col].parse().unwrap_or(0.0))
                .collect())
        };
        Ok((
            online_total,
            offline_total,
            charge_series(trace::ONLINE_TRACE)?,
            charge_series(trace::OFFLINE_TRACE)?,
        ))
    })();
    match result {
        Ok((online_total, offline_total, online_series, offline_series)) => {
            let report = pevgrid::scenario::CompareReport {
                online_total,
                offline_total,
                ratio: offline_total / online_total,
                online_charge_kw: online_series,
                offline_charge_kw: offline_series,
                warnings: Vec::new(),
            };
            if write_compare(dir, report.online_charge_kw.len().min(report.offline_charge_kw.len()), &report)
                .is_err()
            {
                return EXIT_CONFIG;
            }
            println!("ratio {:.6}", report.ratio);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

#[derive(Args, Debug)]
pub struct SolveOpfArgs {
    /// Case file to solve.
    #[arg(long)]
    pub case: PathBuf,
    /// Scale factor applied to the case's base loads.
    #[arg(long, default_value_t = 1.0)]
    pub load_mult: f64,
    /// Emit a JSON object instead of key=value lines.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
}

pub fn cmd_solve_opf(args: &SolveOpfArgs) -> u8 {
    let text = match std::fs::read_to_string(&args.case) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.case.display());
            return EXIT_CONFIG;
        }
    };
    let network = match parse_case(&text) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let base = network.base_mva;
    let slot = SlotGrid {
        slot: 1,
        p_load_pu: network.buses.iter().map(|b| args.load_mult * b.p_load_base / base).collect(),
        q_load_pu: network.buses.iter().map(|b| args.load_mult * b.q_load_base / base).collect(),
        price_per_kwh: 0.0,
    };
    let solver = args.solver.solver_options();
    let (problem, model) = match build_window_sdr(&network, std::slice::from_ref(&slot), &[], 1.0) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let sol = match solve(&problem, &solver) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if sol.status != SolveStatus::Optimal {
        let total_load: f64 = network.buses.iter().map(|b| args.load_mult * b.p_load_base).sum();
        let capacity: f64 = network.generators.iter().map(|g| g.p_max).sum();
        let class = if total_load > capacity {
            "generation capacity"
        } else {
            "voltage/angle limits"
        };
        eprintln!(
            "error: instance is infeasible or unsolved (status {:?}); suspected binding class: {class}",
            sol.status
        );
        return EXIT_SOLVER;
    }

    let w_hat = model.w_at(&sol, 1).expect("slot 1");
    let gap_sdr = sdr::rank_gap(&w_hat).unwrap_or(f64::NAN);
    let (pg_hat, qg_hat) = model.dispatch_at(&network, &sol, 1).expect("slot 1");

    let (w_final, pg, qg, iters, converged) = if sdr::rank_ratio(&w_hat) > RANK_RATIO_TOL {
        let penalty = args.solver.penalty(network.n_buses());
        match noa::repair_slot(
            &network,
            &slot,
            &vec![0.0; network.n_buses()],
            &w_hat,
            &pg_hat,
            &qg_hat,
            1.0,
            &penalty,
            &solver,
        ) {
            Ok(r) => {
                let conv = r.trace.converged;
                (r.w, r.pg_mw, r.qg_mvar, r.trace.iterations(), conv)
            }
            Err(e) => {
                eprintln!("error: rank repair failed: {e}");
                return EXIT_SOLVER;
            }
        }
    } else {
        (w_hat, pg_hat, qg_hat, 0, true)
    };
    let gap_final = sdr::rank_gap(&w_final).unwrap_or(f64::NAN);
    let objective: f64 = network
        .generators
        .iter()
        .enumerate()
        .map(|(g, gen)| gen.cost_at(pg[g]))
        .sum();
    let voltage = sdr::recover_voltage(&w_final, sdr::reference_bus(&network)).ok();

    if args.json {
        let mags: Vec<String> = voltage
            .iter()
            .flatten()
            .map(|c| format!("{:.6}", c.norm()))
            .collect();
        let angles: Vec<String> = voltage
            .iter()
            .flatten()
            .map(|c| format!("{:.6}", c.arg()))
            .collect();
        println!(
            "{{\"objective\":{:.6},\"rank_gap_sdr\":{:.3e},\"rank_gap_final\":{:.3e},\"noa_iterations\":{},\"noa_converged\":{},\"pg_mw\":[{}],\"qg_mvar\":[{}],\"v_mag\":[{}],\"v_angle_rad\":[{}]}}",
            objective,
            gap_sdr,
            gap_final,
            iters,
            converged,
            pg.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(","),
            qg.iter().map(|q| format!("{q:.6}")).collect::<Vec<_>>().join(","),
            mags.join(","),
            angles.join(","),
        );
    } else {
        println!("objective={objective:.6}");
        println!("rank_gap_sdr={gap_sdr:.3e}");
        println!("rank_gap_final={gap_final:.3e}");
        println!("noa_iterations={iters}");
        println!("noa_converged={converged}");
        for (g, p) in pg.iter().enumerate() {
            println!("pg{}_mw={p:.6}", g + 1);
        }
        for (g, q) in qg.iter().enumerate() {
            println!("qg{}_mvar={q:.6}", g + 1);
        }
        if let Some(v) = &voltage {
            for (k, c) in v.iter().enumerate() {
                println!("v{}_pu={:.6} v{}_angle_rad={:.6}", k + 1, c.norm(), k + 1, c.arg());
            }
        }
    }
    EXIT_OK
}

#[derive(Args, Debug)]
pub struct GenScenarioArgs {
    /// Directory to populate.
    #[arg(long)]
    pub out: PathBuf,
    /// Case file to copy in; bundled 9-bus system when omitted.
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub count_per_station: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub t_slots: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dt_hours: f64,
    #[arg(long, default_value_t = 100.0)]
    pub capacity_kwh: f64,
    #[arg(long, default_value_t = 0.2)]
    pub soc0: f64,
    #[arg(long, default_value_t = 20.0)]
    pub pmax_kw: f64,
    #[arg(long, default_value_t = 0.9)]
    pub uh: f64,
    /// Cap each vehicle's stay at this many slots (default: depart at T).
    #[arg(long)]
    pub stay_slots: Option<usize>,
}

pub fn cmd_gen_scenario(args: &GenScenarioArgs) -> u8 {
    match gen_scenario_inner(args) {
        Ok(path) => {
            println!("wrote {}", path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_CONFIG
        }
    }
}

fn gen_scenario_inner(args: &GenScenarioArgs) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let case_text = match &args.case {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => bundled::CASE9.to_string(),
    };
    let network = parse_case(&case_text)?;

    if args.t_slots > 24 {
        return Err(anyhow!("bundled day profiles cover 24 slots; T = {} is too long", args.t_slots));
    }
    let full_load = parse_profile_csv(bundled::LOAD_PROFILE_CSV)?;
    let full_price = parse_profile_csv(bundled::PRICE_PROFILE_CSV)?;
    let load = Profile { values: full_load.values[..args.t_slots].to_vec() };
    let price = Profile { values: full_price.values[..args.t_slots].to_vec() };

    let defaults = PevDefaults {
        capacity_kwh: args.capacity_kwh,
        soc0: args.soc0,
        p_max_kw: args.pmax_kw,
        u_h: args.uh,
    };
    let arrivals = ArrivalConfig { dt_hours: args.dt_hours, t_max: args.t_slots, ..Default::default() };
    let counts: Vec<(usize, usize)> = network
        .generator_buses()
        .iter()
        .map(|&k| (k + 1, args.count_per_station))
        .collect();
    let mut roster = build_fleet(args.seed, &counts, &defaults, &arrivals, args.t_slots)?;
    if let Some(stay) = args.stay_slots {
        for pev in &mut roster {
            pev.t_depart = (pev.t_arrive + stay.saturating_sub(1)).min(args.t_slots);
        }
    }

    std::fs::write(args.out.join("case.case"), &case_text)?;
    std::fs::write(args.out.join("load.csv"), pevgrid::grid::profile_to_csv(&load))?;
    std::fs::write(args.out.join("price.csv"), pevgrid::grid::profile_to_csv(&price))?;
    std::fs::write(args.out.join("roster.csv"), pevgrid::fleet::roster_to_csv(&roster))?;
    let scn = format!(
        "[network]\ncase = case.case\n\n[fleet]\nroster = roster.csv\nseed = {}\n\n[profiles]\nload = load.csv\nprice = price.csv\n\n[horizon]\nT = {}\ndt_hours = {}\n",
        args.seed, args.t_slots, args.dt_hours
    );
    let path = args.out.join("scenario.scn");
    std::fs::write(&path, scn)?;

    // Sanity: the files we just wrote parse back into a valid scenario.
    scenario::parse_scenario_file(&path)?;
    Ok(path)
}
