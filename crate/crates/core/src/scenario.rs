//! Reproducible scenarios: seeded arrivals, fleet rosters, profile-driven
//! loads, the offline full-horizon optimizer and online/offline comparison.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fleet::{parse_roster_csv, FleetError, Pev};
use crate::grid::{
    parse_case, parse_profile_csv, scale_load, CaseError, GridError, Network, Profile,
    ProfileError,
};
use crate::mpc::{self, MpcOptions, MpcResult, MpcRunError};
use crate::noa::{self, NoaError, PenaltyConfig};
use crate::sdp::{solve, SdpError, SdpSolution, SolveStatus, SolverOptions};
use crate::sdr::{
    self, build_window_sdr, PevWindowEntry, SdrError, SlotGrid, WindowModel, RANK_EPS,
    RANK_RATIO_TOL,
};

/// Arrival-time distribution: a normal truncated to an evening window,
/// sampled by inverse CDF for per-seed determinism.
#[derive(Debug, Clone)]
pub struct ArrivalConfig {
    pub mean_h: f64,
    pub sd_h: f64,
    /// Half-open window `[start, end)` in hours of day.
    pub window: (f64, f64),
    pub dt_hours: f64,
    pub t_max: usize,
}

impl Default for ArrivalConfig {
    fn default() -> Self {
        ArrivalConfig { mean_h: 20.0, sd_h: 1.5, window: (18.0, 24.0), dt_hours: 0.5, t_max: 24 }
    }
}

/// Fleet-wide vehicle parameters.
#[derive(Debug, Clone)]
pub struct PevDefaults {
    pub capacity_kwh: f64,
    pub soc0: f64,
    pub p_max_kw: f64,
    pub u_h: f64,
}

impl Default for PevDefaults {
    fn default() -> Self {
        PevDefaults { capacity_kwh: 100.0, soc0: 0.2, p_max_kw: 20.0, u_h: 0.9 }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Sdr(#[from] SdrError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Noa(#[from] NoaError),
    #[error("MPC run failed: {0}")]
    Mpc(#[from] MpcRunError),
    #[error("arrival window is empty: [{0}, {1})")]
    EmptyWindow(f64, f64),
    #[error("PEV {id} stationed at bus {bus}, which hosts no generator")]
    StationNotGenerator { id: u32, bus: usize },
    #[error("defaults are inadmissible: {demand_kwh} kWh cannot be delivered in {t_slots} slots at {p_max_kw} kW")]
    InadmissibleDefaults { demand_kwh: f64, t_slots: usize, p_max_kw: f64 },
    #[error("full-horizon relaxation ended with status {status:?}")]
    SdrNotOptimal { status: SolveStatus },
    #[error("offline repair did not produce a usable schedule at slot {slot}")]
    SlotRepairFailed { slot: usize },
    #[error("comparison inputs come from different scenarios: {what}")]
    Mismatch { what: String },
    #[error("{file}: line {line}: {message}")]
    ScenarioFile { file: String, line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Standard normal CDF via a rational `erfc` approximation (absolute error
/// below 1.2e-7, plenty for slot-resolution sampling).
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Inverse standard normal CDF: Acklam's rational approximation plus one
/// Halley refinement step against [`std_normal_cdf`].
pub fn std_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Mean of the normal truncated to `[a, b]`; the oracle for sampling tests.
pub fn truncated_normal_mean(mean: f64, sd: f64, a: f64, b: f64) -> f64 {
    let alpha = (a - mean) / sd;
    let beta = (b - mean) / sd;
    let phi = |z: f64| (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z = std_normal_cdf(beta) - std_normal_cdf(alpha);
    mean + sd * (phi(alpha) - phi(beta)) / z
}

/// Hour-of-day samples from the truncated normal, deterministic per seed.
pub fn sample_arrival_hours(
    seed: u64,
    count: usize,
    cfg: &ArrivalConfig,
) -> Result<Vec<f64>, ScenarioError> {
    if cfg.window.1 <= cfg.window.0 {
        return Err(ScenarioError::EmptyWindow(cfg.window.0, cfg.window.1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = (cfg.window.0 - cfg.mean_h) / cfg.sd_h;
    let beta = (cfg.window.1 - cfg.mean_h) / cfg.sd_h;
    let lo = std_normal_cdf(alpha);
    let hi = std_normal_cdf(beta);
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            let p = (lo + u * (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
            cfg.mean_h + cfg.sd_h * std_normal_quantile(p)
        })
        .collect())
}

/// Arrival slots: hours map as `ceil((h - window.0) / dt)`, clamped to
/// `[1, t_max]`.
pub fn sample_arrivals(
    seed: u64,
    count: usize,
    cfg: &ArrivalConfig,
) -> Result<Vec<usize>, ScenarioError> {
    Ok(sample_arrival_hours(seed, count, cfg)?
        .into_iter()
        .map(|hour| {
            let slot = ((hour - cfg.window.0) / cfg.dt_hours).ceil() as isize;
            slot.clamp(1, cfg.t_max as isize) as usize
        })
        .collect())
}

/// Build a roster with sampled arrivals: `per_station_counts` pairs
/// `(station bus, vehicle count)`; departures default to the last slot.
pub fn build_fleet(
    seed: u64,
    per_station_counts: &[(usize, usize)],
    defaults: &PevDefaults,
    arrivals: &ArrivalConfig,
    t_slots: usize,
) -> Result<Vec<Pev>, ScenarioError> {
    let demand = defaults.capacity_kwh * (1.0 - defaults.soc0);
    let deliverable = defaults.u_h * defaults.p_max_kw * arrivals.dt_hours * t_slots as f64;
    if deliverable < demand {
        return Err(ScenarioError::InadmissibleDefaults {
            demand_kwh: demand,
            t_slots,
            p_max_kw: defaults.p_max_kw,
        });
    }
    let total: usize = per_station_counts.iter().map(|(_, c)| c).sum();
    let slots = sample_arrivals(seed, total, arrivals)?;
    let mut roster = Vec::with_capacity(total);
    let mut k = 0;
    for &(station, count) in per_station_counts {
        for _ in 0..count {
            roster.push(Pev {
                id: (k + 1) as u32,
                station,
                t_arrive: slots[k].min(t_slots),
                t_depart: t_slots,
                capacity_kwh: defaults.capacity_kwh,
                soc0: defaults.soc0,
                p_max_kw: defaults.p_max_kw,
                u_h: defaults.u_h,
                max_stay: None,
            });
            k += 1;
        }
    }
    Ok(roster)
}

/// A complete, reproducible experiment definition.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Network,
    pub fleet: Vec<Pev>,
    pub load_profile: Profile,
    pub price_profile: Profile,
    pub t_slots: usize,
    pub dt_hours: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.load_profile.check(self.t_slots)?;
        self.price_profile.check(self.t_slots)?;
        for pev in &self.fleet {
            pev.validate(self.t_slots)?;
            if !self.network.is_generator_bus(pev.station) {
                return Err(ScenarioError::StationNotGenerator { id: pev.id, bus: pev.station });
            }
        }
        Ok(())
    }

    /// Per-slot load/price snapshots; real and reactive base demands follow
    /// the same multiplier shape.
    pub fn slot_grids(&self) -> Result<Vec<SlotGrid>, ScenarioError> {
        let base = self.network.base_mva;
        let n = self.network.n_buses();
        let mut p_series = Vec::with_capacity(n);
        let mut q_series = Vec::with_capacity(n);
        for bus in &self.network.buses {
            p_series.push(scale_load(bus.p_load_base, &self.load_profile, self.t_slots)?);
            q_series.push(scale_load(bus.q_load_base, &self.load_profile, self.t_slots)?);
        }
        Ok((1..=self.t_slots)
            .map(|t| SlotGrid {
                slot: t,
                p_load_pu: (0..n).map(|k| p_series[k][t - 1] / base).collect(),
                q_load_pu: (0..n).map(|k| q_series[k][t - 1] / base).collect(),
                price_per_kwh: self.price_profile.values[t - 1],
            })
            .collect())
    }

    /// Roster entries that pass the admission test, as full-stay horizon
    /// entries, together with the rejected ids.
    pub fn admitted_entries(&self) -> (Vec<PevWindowEntry>, Vec<u32>) {
        let mut entries = Vec::new();
        let mut rejected = Vec::new();
        for (i, pev) in self.fleet.iter().enumerate() {
            if pev.check_admissible(self.dt_hours) {
                entries.push(PevWindowEntry {
                    pev_idx: i,
                    id: pev.id,
                    station: pev.station,
                    first_slot: pev.t_arrive,
                    last_slot: pev.t_depart,
                    target_kwh: pev.initial_demand_kwh(),
                    p_max_kw: pev.p_max_kw,
                    u_h: pev.u_h,
                });
            } else {
                rejected.push(pev.id);
            }
        }
        (entries, rejected)
    }

    /// Order-sensitive digest of everything that defines the experiment.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.seed);
        h.write_u64(self.t_slots as u64);
        h.write_u64(self.dt_hours.to_bits());
        h.write_u64(self.network.n_buses() as u64);
        h.write_u64(self.network.lines.len() as u64);
        h.write_u64(self.network.generators.len() as u64);
        for v in &self.load_profile.values {
            h.write_u64(v.to_bits());
        }
        for v in &self.price_profile.values {
            h.write_u64(v.to_bits());
        }
        for p in &self.fleet {
            h.write_u64(p.id as u64);
            h.write_u64(p.station as u64);
            h.write_u64(p.t_arrive as u64);
            h.write_u64(p.t_depart as u64);
            h.write_u64(p.capacity_kwh.to_bits());
            h.write_u64(p.soc0.to_bits());
        }
        h.finish()
    }

    /// Penalty weight default for this network's size.
    pub fn penalty_default(&self) -> PenaltyConfig {
        PenaltyConfig::for_network(self.network.n_buses())
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Fnv {
        Fnv(0xcbf29ce484222325)
    }
    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfflineMethod {
    Joint,
    Dnoa,
}

impl std::fmt::Display for OfflineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OfflineMethod::Joint => f.write_str("joint"),
            OfflineMethod::Dnoa => f.write_str("dnoa"),
        }
    }
}

/// Per-slot view of the offline solution.
#[derive(Debug, Clone)]
pub struct OfflineSlot {
    pub slot: usize,
    pub pg_mw: Vec<f64>,
    pub qg_mvar: Vec<f64>,
    pub voltage: Option<Vec<Complex64>>,
    pub rank_gap: f64,
    pub sdr_rank: usize,
    pub flow_residual: Option<f64>,
    pub charge_kw_total: f64,
    pub noa_iterations: usize,
    pub gen_cost: f64,
    pub charge_cost: f64,
}

/// Full-horizon optimization output: the relaxation lower bound plus a
/// rank-one (repaired) schedule.
#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub method: OfflineMethod,
    pub lower_bound: f64,
    pub objective: f64,
    pub gen_cost: f64,
    pub charge_cost: f64,
    pub dt_hours: f64,
    pub schedule: Vec<(u32, usize, f64)>,
    pub per_slot: Vec<OfflineSlot>,
    /// Penalty iterations: total for the joint method, worst slot for the
    /// distributed one.
    pub iterations: usize,
    pub converged: bool,
    pub rejected: Vec<u32>,
    pub fingerprint: u64,
}

impl OfflineResult {
    /// Aggregate charging draw per slot, kW.
    pub fn charge_series_kw(&self, t_slots: usize) -> Vec<f64> {
        let mut out = vec![0.0; t_slots];
        for &(_, slot, kw) in &self.schedule {
            out[slot - 1] += kw;
        }
        out
    }

    /// Delivered energy per PEV `(id, kWh)` under the offline schedule.
    pub fn delivered_kwh(&self, fleet: &[Pev]) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = fleet.iter().map(|p| (p.id, 0.0)).collect();
        for &(id, _, kw) in &self.schedule {
            let u_h = fleet.iter().find(|p| p.id == id).map(|p| p.u_h).unwrap_or(0.0);
            if let Some(e) = out.iter_mut().find(|(pid, _)| *pid == id) {
                e.1 += u_h * kw * self.dt_hours;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct OfflineOptions {
    pub solver: SolverOptions,
    /// Penalty override; network-size default when absent.
    pub penalty: Option<PenaltyConfig>,
}

struct SlotView {
    w: DMatrix<Complex64>,
    pg_mw: Vec<f64>,
    qg_mvar: Vec<f64>,
    noa_iterations: usize,
}

/// Solve the full-horizon relaxation for the certified lower bound, then
/// repair rank with the chosen method. When every slot of the relaxation
/// is already (numerically) rank-one the bound itself is the objective.
pub fn run_offline(
    scenario: &Scenario,
    method: OfflineMethod,
    options: &OfflineOptions,
) -> Result<OfflineResult, ScenarioError> {
    scenario.validate()?;
    let slots = scenario.slot_grids()?;
    let (entries, rejected) = scenario.admitted_entries();
    let penalty = options.penalty.clone().unwrap_or_else(|| scenario.penalty_default());

    let (problem, model) = build_window_sdr(&scenario.network, &slots, &entries, scenario.dt_hours)?;
    let relaxed = solve(&problem, &options.solver)?;
    if relaxed.status != SolveStatus::Optimal {
        return Err(ScenarioError::SdrNotOptimal { status: relaxed.status });
    }
    let lower_bound = relaxed.primal_objective;

    let mut all_rank_one = true;
    for s in &slots {
        if sdr::rank_ratio(&model.w_at(&relaxed, s.slot)?) > RANK_RATIO_TOL {
            all_rank_one = false;
            break;
        }
    }

    let sdr_views = |solution: &SdpSolution, model: &WindowModel| -> Result<Vec<SlotView>, ScenarioError> {
        slots
            .iter()
            .map(|s| {
                let w = model.w_at(solution, s.slot)?;
                let (pg_mw, qg_mvar) = model.dispatch_at(&scenario.network, solution, s.slot)?;
                Ok(SlotView { w, pg_mw, qg_mvar, noa_iterations: 0 })
            })
            .collect()
    };

    let fingerprint = scenario.fingerprint();

    if all_rank_one {
        let schedule = model.full_schedule(&relaxed);
        let (gen_cost, charge_cost) = model.objective_breakdown(&scenario.network, &relaxed);
        let views = sdr_views(&relaxed, &model)?;
        let charge_series = series_from_schedule(&schedule, scenario.t_slots);
        let per_slot =
            offline_slots(scenario, &slots, views, &charge_series, &schedule)?;
        return Ok(OfflineResult {
            method,
            lower_bound,
            objective: lower_bound,
            gen_cost,
            charge_cost,
            dt_hours: scenario.dt_hours,
            schedule,
            per_slot,
            iterations: 0,
            converged: true,
            rejected,
            fingerprint,
        });
    }

    match method {
        OfflineMethod::Joint => {
            let repair = noa::joint_offline(
                &scenario.network,
                &slots,
                &entries,
                &relaxed,
                &model,
                scenario.dt_hours,
                &penalty,
                &options.solver,
            )?;
            let charge_series = series_from_schedule(&repair.schedule, scenario.t_slots);
            let views: Vec<SlotView> = (0..slots.len())
                .map(|off| SlotView {
                    w: repair.w[off].clone(),
                    pg_mw: repair.pg_mw[off].clone(),
                    qg_mvar: repair.qg_mvar[off].clone(),
                    noa_iterations: repair.trace.iterations(),
                })
                .collect();
            let per_slot =
                offline_slots(scenario, &slots, views, &charge_series, &repair.schedule)?;
            let gen_cost: f64 = per_slot.iter().map(|s| s.gen_cost).sum();
            let charge_cost: f64 = per_slot.iter().map(|s| s.charge_cost).sum();
            Ok(OfflineResult {
                method,
                lower_bound,
                objective: repair.objective,
                gen_cost,
                charge_cost,
                dt_hours: scenario.dt_hours,
                schedule: repair.schedule,
                per_slot,
                iterations: repair.trace.iterations(),
                converged: repair.trace.converged,
                rejected,
                fingerprint,
            })
        }
        OfflineMethod::Dnoa => {
            let schedule = model.full_schedule(&relaxed);
            let result = noa::dnoa_offline(
                &scenario.network,
                &slots,
                &relaxed,
                &model,
                scenario.dt_hours,
                &penalty,
                &options.solver,
            )?;
            let mut views = Vec::with_capacity(slots.len());
            let mut converged = true;
            let mut iterations = 0;
            for slot_outcome in &result.slots {
                match &slot_outcome.outcome {
                    Ok(repair) => {
                        converged &= repair.trace.converged;
                        iterations = iterations.max(repair.trace.iterations());
                        views.push(SlotView {
                            w: repair.w.clone(),
                            pg_mw: repair.pg_mw.clone(),
                            qg_mvar: repair.qg_mvar.clone(),
                            noa_iterations: repair.trace.iterations(),
                        });
                    }
                    Err(_) => {
                        return Err(ScenarioError::SlotRepairFailed { slot: slot_outcome.slot })
                    }
                }
            }
            let objective = result
                .objective
                .ok_or(ScenarioError::SlotRepairFailed { slot: slots[0].slot })?;
            let charge_series = series_from_schedule(&schedule, scenario.t_slots);
            let per_slot = offline_slots(scenario, &slots, views, &charge_series, &schedule)?;
            let gen_cost: f64 = per_slot.iter().map(|s| s.gen_cost).sum();
            let charge_cost = result.charge_cost;
            Ok(OfflineResult {
                method,
                lower_bound,
                objective,
                gen_cost,
                charge_cost,
                dt_hours: scenario.dt_hours,
                schedule,
                per_slot,
                iterations,
                converged,
                rejected,
                fingerprint,
            })
        }
    }
}

fn series_from_schedule(schedule: &[(u32, usize, f64)], t_slots: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_slots];
    for &(_, slot, kw) in schedule {
        out[slot - 1] += kw;
    }
    out
}

fn offline_slots(
    scenario: &Scenario,
    slots: &[SlotGrid],
    views: Vec<SlotView>,
    charge_series: &[f64],
    schedule: &[(u32, usize, f64)],
) -> Result<Vec<OfflineSlot>, ScenarioError> {
    let network = &scenario.network;
    let station_of = |id: u32| scenario.fleet.iter().find(|p| p.id == id).map(|p| p.station);
    let mut out = Vec::with_capacity(slots.len());
    for (off, s) in slots.iter().enumerate() {
        let view = &views[off];
        let gap = sdr::rank_gap(&view.w)?;
        let rank = sdr::numerical_rank(&view.w)?;
        let (voltage, flow) = if gap <= RANK_EPS {
            let v = sdr::recover_voltage(&view.w, sdr::reference_bus(network))?;
            let mut charges_bus = vec![0.0; network.n_buses()];
            for &(id, slot_no, kw) in schedule {
                if slot_no == s.slot {
                    if let Some(station) = station_of(id) {
                        charges_bus[station - 1] += kw;
                    }
                }
            }
            let residual = sdr::flow_residual(
                network,
                &v,
                &view.pg_mw,
                &view.qg_mvar,
                &s.p_load_pu,
                &s.q_load_pu,
                &charges_bus,
            );
            (Some(v), Some(residual))
        } else {
            (None, None)
        };
        let gen_cost: f64 = network
            .generators
            .iter()
            .enumerate()
            .map(|(g, gen)| scenario.dt_hours * gen.cost_at(view.pg_mw[g]))
            .sum();
        out.push(OfflineSlot {
            slot: s.slot,
            pg_mw: view.pg_mw.clone(),
            qg_mvar: view.qg_mvar.clone(),
            voltage,
            rank_gap: gap,
            sdr_rank: rank,
            flow_residual: flow,
            charge_kw_total: charge_series[off],
            noa_iterations: view.noa_iterations,
            gen_cost,
            charge_cost: scenario.dt_hours * s.price_per_kwh * charge_series[off],
        });
    }
    Ok(out)
}

/// Run the receding-horizon controller on a scenario.
pub fn run_online(scenario: &Scenario, options: &MpcOptions) -> Result<MpcResult, ScenarioError> {
    scenario.validate()?;
    let slots = scenario.slot_grids()?;
    let ctx = mpc::MpcContext {
        network: &scenario.network,
        slots: &slots,
        dt_hours: scenario.dt_hours,
        options,
    };
    let mut result = mpc::run(&ctx, &scenario.fleet)?;
    result.fingerprint = scenario.fingerprint();
    Ok(result)
}

/// Online-versus-offline comparison.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub online_total: f64,
    pub offline_total: f64,
    /// `offline / online`; at most 1 up to solver tolerance since the
    /// offline optimizer sees the whole horizon.
    pub ratio: f64,
    pub online_charge_kw: Vec<f64>,
    pub offline_charge_kw: Vec<f64>,
    /// Sandwich violations beyond tolerance are flagged, not fatal.
    pub warnings: Vec<String>,
}

pub fn compare(
    scenario: &Scenario,
    online: &MpcResult,
    offline: &OfflineResult,
) -> Result<CompareReport, ScenarioError> {
    let fp = scenario.fingerprint();
    if offline.fingerprint != fp {
        return Err(ScenarioError::Mismatch {
            what: "offline result was produced from a different scenario".to_string(),
        });
    }
    if online.fingerprint != fp {
        return Err(ScenarioError::Mismatch {
            what: "online result was produced from a different scenario".to_string(),
        });
    }
    if online.records.len() != scenario.t_slots {
        return Err(ScenarioError::Mismatch {
            what: format!(
                "online trace has {} slots, scenario has {}",
                online.records.len(),
                scenario.t_slots
            ),
        });
    }
    let mut warnings = Vec::new();
    let tol = 1e-6 * (1.0 + online.total_cost.abs());
    if offline.lower_bound > offline.objective + tol {
        warnings.push(format!(
            "offline bound {} exceeds repaired value {}",
            offline.lower_bound, offline.objective
        ));
    }
    if offline.objective > online.total_cost + tol {
        warnings.push(format!(
            "offline value {} exceeds online value {}; information advantage violated",
            offline.objective, online.total_cost
        ));
    }
    let mut online_charge = vec![0.0; scenario.t_slots];
    for record in &online.records {
        online_charge[record.slot - 1] =
            record.charges_kw.iter().map(|(_, kw)| kw).sum::<f64>();
    }
    Ok(CompareReport {
        online_total: online.total_cost,
        offline_total: offline.objective,
        ratio: offline.objective / online.total_cost,
        online_charge_kw: online_charge,
        offline_charge_kw: offline.charge_series_kw(scenario.t_slots),
        warnings,
    })
}

/// Parse a scenario description file.
///
/// Key-value lines grouped under `[network]`, `[fleet]`, `[profiles]` and
/// `[horizon]`; `#` comments. Paths resolve relative to the file's
/// directory. The fleet comes either from `roster = <csv>` or from
/// `counts = bus:count,...` / `count_per_station = n` sampled with `seed`.
pub fn parse_scenario_file(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario_file_with_seed(path, None)
}

/// [`parse_scenario_file`] with the seed replaced before the fleet is
/// sampled; no effect on explicit rosters.
pub fn parse_scenario_file_with_seed(
    path: &Path,
    seed_override: Option<u64>,
) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_scenario_text_with_seed(&text, dir, &path.display().to_string(), seed_override)
}

/// Parse scenario text with `dir` as the base for relative paths.
pub fn parse_scenario_text(
    text: &str,
    dir: &Path,
    file_label: &str,
) -> Result<Scenario, ScenarioError> {
    parse_scenario_text_with_seed(text, dir, file_label, None)
}

/// [`parse_scenario_text`] with an optional seed override.
pub fn parse_scenario_text_with_seed(
    text: &str,
    dir: &Path,
    file_label: &str,
    seed_override: Option<u64>,
) -> Result<Scenario, ScenarioError> {
    let mut section = String::new();
    let mut case_path: Option<PathBuf> = None;
    let mut roster_path: Option<PathBuf> = None;
    let mut counts: Vec<(usize, usize)> = Vec::new();
    let mut count_per_station: Option<usize> = None;
    let mut seed = 0u64;
    let mut defaults = PevDefaults::default();
    let mut load_path: Option<PathBuf> = None;
    let mut price_path: Option<PathBuf> = None;
    let mut t_slots = 24usize;
    let mut dt_hours = 0.5f64;

    let err = |line: usize, message: String| ScenarioError::ScenarioFile {
        file: file_label.to_string(),
        line,
        message,
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(line_no, format!("expected key = value, got {line:?}")))?;
        match (section.as_str(), key) {
            ("network", "case") => case_path = Some(dir.join(value)),
            ("fleet", "roster") => roster_path = Some(dir.join(value)),
            ("fleet", "counts") => {
                for piece in value.split(',') {
                    let (bus, count) = piece
                        .split_once(':')
                        .ok_or_else(|| err(line_no, format!("counts entry {piece:?} is not bus:count")))?;
                    counts.push((
                        bus.trim().parse().map_err(|_| err(line_no, format!("bad bus in {piece:?}")))?,
                        count.trim().parse().map_err(|_| err(line_no, format!("bad count in {piece:?}")))?,
                    ));
                }
            }
            ("fleet", "count_per_station") => {
                count_per_station =
                    Some(value.parse().map_err(|_| err(line_no, "bad count_per_station".into()))?)
            }
            ("fleet", "seed") => {
                seed = value.parse().map_err(|_| err(line_no, "bad seed".into()))?
            }
            ("fleet", "capacity_kwh") => {
                defaults.capacity_kwh =
                    value.parse().map_err(|_| err(line_no, "bad capacity_kwh".into()))?
            }
            ("fleet", "soc0") => {
                defaults.soc0 = value.parse().map_err(|_| err(line_no, "bad soc0".into()))?
            }
            ("fleet", "pmax_kw") => {
                defaults.p_max_kw = value.parse().map_err(|_| err(line_no, "bad pmax_kw".into()))?
            }
            ("fleet", "uh") => {
                defaults.u_h = value.parse().map_err(|_| err(line_no, "bad uh".into()))?
            }
            ("profiles", "load") => load_path = Some(dir.join(value)),
            ("profiles", "price") => price_path = Some(dir.join(value)),
            ("horizon", "T") => {
                t_slots = value.parse().map_err(|_| err(line_no, "bad T".into()))?
            }
            ("horizon", "dt_hours") => {
                dt_hours = value.parse().map_err(|_| err(line_no, "bad dt_hours".into()))?
            }
            _ => return Err(err(line_no, format!("unknown key {key:?} in section [{section}]"))),
        }
    }

    let read = |p: &PathBuf| -> Result<String, ScenarioError> {
        std::fs::read_to_string(p).map_err(|source| ScenarioError::Io {
            path: p.display().to_string(),
            source,
        })
    };

    let case_path =
        case_path.ok_or_else(|| err(0, "missing case = <path> in [network]".into()))?;
    let network = parse_case(&read(&case_path)?)?;
    let load_path =
        load_path.ok_or_else(|| err(0, "missing load = <path> in [profiles]".into()))?;
    let price_path =
        price_path.ok_or_else(|| err(0, "missing price = <path> in [profiles]".into()))?;
    let load_profile = parse_profile_csv(&read(&load_path)?)?;
    let price_profile = parse_profile_csv(&read(&price_path)?)?;

    if let Some(s) = seed_override {
        seed = s;
    }
    let fleet = if let Some(roster_path) = roster_path {
        parse_roster_csv(&read(&roster_path)?)?
    } else {
        let station_counts: Vec<(usize, usize)> = if !counts.is_empty() {
            counts
        } else if let Some(c) = count_per_station {
            network.generator_buses().iter().map(|&k| (k + 1, c)).collect()
        } else {
            Vec::new()
        };
        let arrivals = ArrivalConfig { dt_hours, t_max: t_slots, ..Default::default() };
        build_fleet(seed, &station_counts, &defaults, &arrivals, t_slots)?
    };

    let scenario = Scenario {
        network,
        fleet,
        load_profile,
        price_profile,
        t_slots,
        dt_hours,
        seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    #[test]
    fn arrival_slots_stay_in_the_evening_window() {
        let cfg = ArrivalConfig::default();
        let slots = sample_arrivals(7, 500, &cfg).unwrap();
        assert!(slots.iter().all(|&s| (1..=12).contains(&s)), "slots within [1, 12] for dt = 0.5");
    }

    #[test]
    fn large_sample_mean_matches_truncated_normal_oracle() {
        // Truncating (20, 1.5^2) to [18, 24) cuts 1.33 sigma below but 2.67
        // sigma above the mean, pulling the truncated mean up to 20.2530
        // (analytic formula, cross-checked by rejection sampling).
        let cfg = ArrivalConfig::default();
        let hours = sample_arrival_hours(42, 100_000, &cfg).unwrap();
        let mean: f64 = hours.iter().sum::<f64>() / hours.len() as f64;
        let oracle = truncated_normal_mean(20.0, 1.5, 18.0, 24.0);
        assert!((oracle - 20.25296).abs() < 1e-3, "oracle sanity: {oracle}");
        assert!((mean - oracle).abs() < 0.02, "sample mean {mean} vs oracle {oracle}");
        assert!(hours.iter().all(|&h| (18.0..24.0).contains(&h)));
    }

    #[test]
    fn zero_count_gives_empty_list() {
        let cfg = ArrivalConfig::default();
        assert!(sample_arrivals(1, 0, &cfg).unwrap().is_empty());
    }

    #[test]
    fn empty_window_is_rejected() {
        let cfg = ArrivalConfig { window: (24.0, 18.0), ..Default::default() };
        assert!(matches!(sample_arrivals(1, 3, &cfg), Err(ScenarioError::EmptyWindow(_, _))));
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [0.001, 0.01, 0.2, 0.5, 0.8, 0.99, 0.999] {
            let z = std_normal_quantile(p);
            assert!((std_normal_cdf(z) - p).abs() < 1e-7, "p {p}");
        }
    }

    #[test]
    fn default_fleet_demands_eighty_kwh() {
        let roster = build_fleet(
            3,
            &[(1, 2), (2, 2)],
            &PevDefaults::default(),
            &ArrivalConfig::default(),
            24,
        )
        .unwrap();
        assert_eq!(roster.len(), 4);
        for pev in &roster {
            assert!((pev.initial_demand_kwh() - 80.0).abs() < 1e-12);
            assert_eq!(pev.t_depart, 24);
        }
    }

    #[test]
    fn full_scale_station_counts() {
        let roster = build_fleet(
            11,
            &[(1, 97), (2, 97), (3, 97)],
            &PevDefaults::default(),
            &ArrivalConfig::default(),
            24,
        )
        .unwrap();
        assert_eq!(roster.len(), 291);
    }

    #[test]
    fn desk_fleet_spreads_over_generator_buses() {
        let net = parse_case(bundled::CASE9).unwrap();
        let gens = net.generator_buses();
        let per_station = [7usize, 7, 6];
        let counts: Vec<(usize, usize)> =
            gens.iter().zip(per_station).map(|(&k, c)| (k + 1, c)).collect();
        let roster =
            build_fleet(5, &counts, &PevDefaults::default(), &ArrivalConfig::default(), 24).unwrap();
        assert_eq!(roster.len(), 20);
        for pev in &roster {
            assert!(net.is_generator_bus(pev.station));
        }
    }

    #[test]
    fn inadmissible_defaults_are_rejected() {
        let defaults = PevDefaults { p_max_kw: 5.0, ..Default::default() };
        // 80 kWh at 0.9 * 5 kW * 0.5 h * 24 slots = 54 kWh max.
        assert!(matches!(
            build_fleet(1, &[(1, 1)], &defaults, &ArrivalConfig::default(), 24),
            Err(ScenarioError::InadmissibleDefaults { .. })
        ));
    }

    #[test]
    fn same_seed_reproduces_roster() {
        let a = build_fleet(9, &[(1, 10)], &PevDefaults::default(), &ArrivalConfig::default(), 24)
            .unwrap();
        let b = build_fleet(9, &[(1, 10)], &PevDefaults::default(), &ArrivalConfig::default(), 24)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t_arrive, y.t_arrive);
        }
    }

    #[test]
    fn scenario_file_round_trip() {
        let dir = std::env::temp_dir().join("pevgrid_scn_test");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("case.case"), bundled::CASE9).unwrap();
        std::fs::write(dir.join("load.csv"), bundled::LOAD_PROFILE_CSV).unwrap();
        std::fs::write(dir.join("price.csv"), bundled::PRICE_PROFILE_CSV).unwrap();
        let text = "\
[network]
case = case.case
[fleet]
count_per_station = 2
seed = 12
capacity_kwh = 20
soc0 = 0.2
pmax_kw = 20
uh = 0.9
[profiles]
load = load.csv
price = price.csv
[horizon]
T = 24
dt_hours = 0.5
";
        let scenario = parse_scenario_text(text, &dir, "test.scn").unwrap();
        assert_eq!(scenario.t_slots, 24);
        assert_eq!(scenario.fleet.len(), 6);
        assert_eq!(scenario.network.n_buses(), 9);
        assert_eq!(scenario.seed, 12);
        // Determinism of the digest.
        let again = parse_scenario_text(text, &dir, "test.scn").unwrap();
        assert_eq!(scenario.fingerprint(), again.fingerprint());
    }

    #[test]
    fn unknown_key_is_reported_with_line() {
        let dir = std::env::temp_dir();
        let text = "[network]\nnonsense = 3\n";
        match parse_scenario_text(text, &dir, "bad.scn") {
            Err(ScenarioError::ScenarioFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected file error, got {other:?}"),
        }
    }
}
