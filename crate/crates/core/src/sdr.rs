//! Semidefinite relaxation of the joint OPF + charging problem.
//!
//! For each slot the complex voltage vector is lifted into a Hermitian
//! matrix `W = V V^H` (rank-one in the exact problem, dropped to `W >= 0` in
//! the relaxation) and embedded as a real symmetric block. Per-slot
//! constraints are bus power balance, voltage magnitude boxes, line angle
//! limits and generation boxes; charging couples slots through per-vehicle
//! energy-completion equalities.
//!
//! Unit conventions: network quantities are per-unit on the case MVA base,
//! charge rates are kW, completion targets are kWh, objectives are `$`.
//! Generator dispatch variables are shifted nonnegative (`P = Pmin + p~`),
//! and quadratic cost enters through an epigraph scalar `s` pinned to a
//! `2x2` PSD block `[[s, a], [a, 1]]` with `a = sqrt(c2) P_MW / baseMVA`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::Network;
use crate::sdp::hermitian::hermitian_max_eigpair;
use crate::sdp::{
    BlockId, HermitianEmbedding, LinExpr, ScalarId, ScalarKind, SdpProblem, SdpSolution, Sense,
};

/// Rank tolerance used throughout: `Trace(W) - lambda_max(W) <= eps` counts
/// as rank-one.
pub const RANK_EPS: f64 = 1e-4;

/// Eigenvalue ratio below which a relaxation solution is treated as already
/// rank-one (no repair needed).
pub const RANK_RATIO_TOL: f64 = 1e-6;

/// Load snapshot and price for one slot.
#[derive(Debug, Clone)]
pub struct SlotGrid {
    /// Absolute 1-based slot number.
    pub slot: usize,
    /// Real demand per bus, per-unit.
    pub p_load_pu: Vec<f64>,
    /// Reactive demand per bus, per-unit.
    pub q_load_pu: Vec<f64>,
    /// Charging price for this slot, $/kWh.
    pub price_per_kwh: f64,
}

/// One PEV's slice of a horizon problem.
#[derive(Debug, Clone)]
pub struct PevWindowEntry {
    /// Roster index, carried through for reporting.
    pub pev_idx: usize,
    pub id: u32,
    /// Charging-station bus, 1-based; must host a generator.
    pub station: usize,
    /// First slot with a charge variable (`max(t, t_arrive)` online).
    pub first_slot: usize,
    /// Departure slot, inclusive.
    pub last_slot: usize,
    /// Energy still owed over `[first_slot, last_slot]`, kWh.
    pub target_kwh: f64,
    pub p_max_kw: f64,
    pub u_h: f64,
}

#[derive(Debug, Error)]
pub enum SdrError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("slots must be contiguous and ascending; got {prev} then {next}")]
    NonContiguous { prev: usize, next: usize },
    #[error("slot {slot}: load vector has {got} buses, network has {expected}")]
    LoadLength { slot: usize, got: usize, expected: usize },
    #[error("PEV {id} stationed at bus {bus}, which hosts no generator")]
    NotAStation { id: u32, bus: usize },
    #[error("PEV {id}: slots {first}..{last} fall outside the window {w0}..{w1}")]
    OutsideWindow { id: u32, first: usize, last: usize, w0: usize, w1: usize },
    #[error("slot {slot} is not part of this window")]
    SlotNotInWindow { slot: usize },
    #[error("matrix is not PSD within tolerance: min eigenvalue {min_eig}")]
    NotPsd { min_eig: f64 },
    #[error("largest eigenvalue {lambda} is not positive")]
    NonPositiveEigenvalue { lambda: f64 },
    #[error(transparent)]
    Eig(#[from] crate::sdp::eig::EigError),
}

/// Index map from grid/PEV quantities to SDP variables over a slot window.
#[derive(Debug, Clone)]
pub struct WindowModel {
    pub window: (usize, usize),
    pub n_bus: usize,
    pub dt_hours: f64,
    pub base_mva: f64,
    emb: HermitianEmbedding,
    w_blocks: Vec<BlockId>,
    /// `[slot_offset][gen_idx]` shifted dispatch variables.
    pg: Vec<Vec<ScalarId>>,
    qg: Vec<Vec<ScalarId>>,
    /// Epigraph scalar per `[slot_offset][gen_idx]` for quadratic costs.
    pub cost_epi: Vec<Vec<Option<ScalarId>>>,
    /// Charge variable per entry and absolute slot.
    charge_vars: Vec<Vec<(usize, ScalarId)>>,
    entries: Vec<PevWindowEntry>,
    prices: Vec<f64>,
    slot_loads: Vec<(Vec<f64>, Vec<f64>)>,
    pub families: ConstraintFamilies,
}

/// Constraint indices grouped by the physical family they implement.
#[derive(Debug, Clone, Default)]
pub struct ConstraintFamilies {
    pub balance: Vec<usize>,
    pub voltage_box: Vec<usize>,
    pub angle: Vec<usize>,
    pub generation_box: Vec<usize>,
    pub rate: Vec<usize>,
    pub completion: Vec<usize>,
    pub epigraph: Vec<usize>,
}

/// Everything recovered for one committed slot.
#[derive(Debug, Clone)]
pub struct RecoveredSlot {
    pub slot: usize,
    /// Complex bus voltages, rotated so the reference bus has phase zero;
    /// `None` when the slot's rank gap exceeds the tolerance.
    pub voltage: Option<Vec<Complex64>>,
    /// Dispatch per generator, MW / MVAr, in network generator order.
    pub pg_mw: Vec<f64>,
    pub qg_mvar: Vec<f64>,
    /// Committed charge per PEV `(id, kW)`.
    pub charges_kw: Vec<(u32, f64)>,
    pub rank_gap: f64,
    /// Numerical rank of `W` (eigenvalues above `1e-6 * lambda_max`).
    pub rank: usize,
    pub flow_residual: Option<f64>,
}

fn kw_to_pu(base_mva: f64) -> f64 {
    1.0 / (1000.0 * base_mva)
}

impl WindowModel {
    pub fn slot_offset(&self, slot: usize) -> Result<usize, SdrError> {
        if slot < self.window.0 || slot > self.window.1 {
            return Err(SdrError::SlotNotInWindow { slot });
        }
        Ok(slot - self.window.0)
    }

    pub fn n_slots(&self) -> usize {
        self.window.1 - self.window.0 + 1
    }

    pub fn w_block(&self, slot: usize) -> Result<BlockId, SdrError> {
        Ok(self.w_blocks[self.slot_offset(slot)?])
    }

    pub fn embedding(&self) -> &HermitianEmbedding {
        &self.emb
    }

    pub fn entries(&self) -> &[PevWindowEntry] {
        &self.entries
    }

    /// Extract the Hermitian `W` matrix for a slot.
    pub fn w_at(&self, solution: &SdpSolution, slot: usize) -> Result<DMatrix<Complex64>, SdrError> {
        let block = self.w_block(slot)?;
        Ok(self.emb.extract(&solution.blocks[block.0]))
    }

    /// Dispatch (MW, MVAr) per generator at a slot.
    pub fn dispatch_at(
        &self,
        network: &Network,
        solution: &SdpSolution,
        slot: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), SdrError> {
        let off = self.slot_offset(slot)?;
        let mut pg = Vec::with_capacity(network.generators.len());
        let mut qg = Vec::with_capacity(network.generators.len());
        for (g, gen) in network.generators.iter().enumerate() {
            pg.push(gen.p_min + solution.scalars[self.pg[off][g].0] * self.base_mva);
            qg.push(gen.q_min + solution.scalars[self.qg[off][g].0] * self.base_mva);
        }
        Ok((pg, qg))
    }

    /// Committed charge rates `(pev id, kW)` at a slot, in entry order.
    pub fn charges_at(&self, solution: &SdpSolution, slot: usize) -> Result<Vec<(u32, f64)>, SdrError> {
        self.slot_offset(slot)?;
        let mut out = Vec::new();
        for (e, entry) in self.entries.iter().enumerate() {
            for &(s, var) in &self.charge_vars[e] {
                if s == slot {
                    out.push((entry.id, solution.scalars[var.0].max(0.0)));
                }
            }
        }
        Ok(out)
    }

    /// Full charging schedule `(pev id, slot, kW)` over the window.
    pub fn full_schedule(&self, solution: &SdpSolution) -> Vec<(u32, usize, f64)> {
        let mut out = Vec::new();
        for (e, entry) in self.entries.iter().enumerate() {
            for &(s, var) in &self.charge_vars[e] {
                out.push((entry.id, s, solution.scalars[var.0].max(0.0)));
            }
        }
        out
    }

    /// Recompute the objective split `(generation $, charging $)` from the
    /// solution values; the cost polynomial is evaluated directly rather
    /// than read off the epigraph scalars.
    pub fn objective_breakdown(&self, network: &Network, solution: &SdpSolution) -> (f64, f64) {
        let mut gen_cost = 0.0;
        let mut charge_cost = 0.0;
        for off in 0..self.n_slots() {
            let slot = self.window.0 + off;
            let (pg, _) = self.dispatch_at(network, solution, slot).expect("slot in window");
            for (g, _) in network.generators.iter().enumerate() {
                gen_cost += self.dt_hours * network.generators[g].cost_at(pg[g]);
            }
            for (_, kw) in self.charges_at(solution, slot).expect("slot in window") {
                charge_cost += self.dt_hours * self.prices[off] * kw;
            }
        }
        (gen_cost, charge_cost)
    }

    /// Per-bus fixed-plus-variable charging draw at a slot, kW.
    pub fn charges_by_bus_kw(&self, solution: &SdpSolution, slot: usize) -> Result<Vec<f64>, SdrError> {
        self.slot_offset(slot)?;
        let mut out = vec![0.0; self.n_bus];
        for (e, entry) in self.entries.iter().enumerate() {
            for &(s, var) in &self.charge_vars[e] {
                if s == slot {
                    out[entry.station - 1] += solution.scalars[var.0].max(0.0);
                }
            }
        }
        Ok(out)
    }

    /// Full per-slot recovery: rank diagnostics plus, when the gap passes
    /// `eps`, voltages and the power-flow mismatch.
    pub fn extract_slot(
        &self,
        network: &Network,
        solution: &SdpSolution,
        slot: usize,
        eps: f64,
    ) -> Result<RecoveredSlot, SdrError> {
        let w = self.w_at(solution, slot)?;
        let gap = rank_gap(&w)?;
        let rank = numerical_rank(&w)?;
        let (pg_mw, qg_mvar) = self.dispatch_at(network, solution, slot)?;
        let charges_kw = self.charges_at(solution, slot)?;
        let off = self.slot_offset(slot)?;
        let (voltage, flow) = if gap <= eps {
            let v = recover_voltage(&w, reference_bus(network))?;
            let charges_bus_kw = self.charges_by_bus_kw(solution, slot)?;
            let residual = flow_residual(
                network,
                &v,
                &pg_mw,
                &qg_mvar,
                &self.slot_loads[off].0,
                &self.slot_loads[off].1,
                &charges_bus_kw,
            );
            (Some(v), Some(residual))
        } else {
            (None, None)
        };
        Ok(RecoveredSlot {
            slot,
            voltage,
            pg_mw,
            qg_mvar,
            charges_kw,
            rank_gap: gap,
            rank,
            flow_residual: flow,
        })
    }
}

/// Lowest-indexed generator bus, 0-based; the global phase reference.
pub fn reference_bus(network: &Network) -> usize {
    network.generator_buses().first().copied().unwrap_or(0)
}

/// `Trace(W) - lambda_max(W)`, clamped to zero at round-off magnitudes.
/// Zero iff the PSD matrix is rank-one.
pub fn rank_gap(w: &DMatrix<Complex64>) -> Result<f64, SdrError> {
    let emb = HermitianEmbedding::new(w.nrows());
    let eigs = crate::sdp::eig::symmetric_eigenvalues(&emb.embed(w));
    let lambda_max = *eigs.last().expect("nonempty");
    let min_eig = eigs[0];
    if min_eig < -1e-6 * lambda_max.abs().max(1.0) {
        return Err(SdrError::NotPsd { min_eig });
    }
    let trace: f64 = w.diagonal().iter().map(|c| c.re).sum();
    let gap = trace - lambda_max;
    Ok(if gap.abs() <= 1e-12 { 0.0 } else { gap.max(0.0) })
}

/// Number of distinct Hermitian eigenvalues above `RANK_RATIO_TOL * lambda_max`.
pub fn numerical_rank(w: &DMatrix<Complex64>) -> Result<usize, SdrError> {
    let emb = HermitianEmbedding::new(w.nrows());
    let eigs = crate::sdp::eig::symmetric_eigenvalues(&emb.embed(w));
    let lambda_max = *eigs.last().expect("nonempty");
    if lambda_max <= 0.0 {
        return Ok(0);
    }
    // Embedded eigenvalues come in pairs.
    let count = eigs.iter().filter(|&&e| e > RANK_RATIO_TOL * lambda_max).count();
    Ok(count.div_ceil(2))
}

/// Ratio of the second to the largest Hermitian eigenvalue.
pub fn rank_ratio(w: &DMatrix<Complex64>) -> f64 {
    let emb = HermitianEmbedding::new(w.nrows());
    let eigs = crate::sdp::eig::symmetric_eigenvalues(&emb.embed(w));
    let k = eigs.len();
    if k < 3 {
        return 0.0;
    }
    let lambda_max = eigs[k - 1];
    if lambda_max <= 0.0 {
        return 1.0;
    }
    // Skip the duplicate of lambda_max introduced by the embedding.
    (eigs[k - 3].max(0.0)) / lambda_max
}

/// `V = sqrt(lambda_max) w_max`, rotated so `arg(V[reference]) = 0`.
pub fn recover_voltage(w: &DMatrix<Complex64>, reference: usize) -> Result<Vec<Complex64>, SdrError> {
    let (lambda, v) = hermitian_max_eigpair(w)?;
    if lambda <= 0.0 {
        return Err(SdrError::NonPositiveEigenvalue { lambda });
    }
    let scale = lambda.sqrt();
    let mut out: Vec<Complex64> = v.iter().map(|c| c * scale).collect();
    let r = out[reference];
    if r.norm() > 1e-12 {
        let phase = r / r.norm();
        for v in &mut out {
            *v /= phase;
        }
    }
    Ok(out)
}

/// Worst-bus power-flow mismatch in per-unit:
/// `max_k | V_k (sum_m y_km (V_k - V_m))^* - injection_k |`.
pub fn flow_residual(
    network: &Network,
    v: &[Complex64],
    pg_mw: &[f64],
    qg_mvar: &[f64],
    p_load_pu: &[f64],
    q_load_pu: &[f64],
    charges_bus_kw: &[f64],
) -> f64 {
    let n = network.n_buses();
    let base = network.base_mva;
    let mut injection = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        injection[k] -= Complex64::new(p_load_pu[k], q_load_pu[k]);
        injection[k] -= Complex64::new(charges_bus_kw[k] * kw_to_pu(base), 0.0);
    }
    for (g, gen) in network.generators.iter().enumerate() {
        injection[gen.bus - 1] += Complex64::new(pg_mw[g] / base, qg_mvar[g] / base);
    }
    let mut worst = 0.0f64;
    for k in 0..n {
        let mut current = Complex64::new(0.0, 0.0);
        for &m in network.neighbors(k) {
            let y = network.line_admittance(k, m).expect("neighbor map consistent");
            current += y * (v[k] - v[m]);
        }
        let flow = v[k] * current.conj();
        worst = worst.max((flow - injection[k]).norm());
    }
    worst
}

/// Build the relaxation over a contiguous slot window.
///
/// `slots` carries one load/price snapshot per slot; `pevs` lists the active
/// vehicles with their remaining energy targets. Charge completion is
/// enforced per vehicle over `[first_slot, last_slot]` in kWh.
pub fn build_window_sdr(
    network: &Network,
    slots: &[SlotGrid],
    pevs: &[PevWindowEntry],
    dt_hours: f64,
) -> Result<(SdpProblem, WindowModel), SdrError> {
    if slots.is_empty() {
        return Err(SdrError::EmptyWindow);
    }
    for pair in slots.windows(2) {
        if pair[1].slot != pair[0].slot + 1 {
            return Err(SdrError::NonContiguous { prev: pair[0].slot, next: pair[1].slot });
        }
    }
    let n = network.n_buses();
    for s in slots {
        if s.p_load_pu.len() != n || s.q_load_pu.len() != n {
            return Err(SdrError::LoadLength {
                slot: s.slot,
                got: s.p_load_pu.len().min(s.q_load_pu.len()),
                expected: n,
            });
        }
    }
    let window = (slots[0].slot, slots[slots.len() - 1].slot);
    for e in pevs {
        if !network.is_generator_bus(e.station) {
            return Err(SdrError::NotAStation { id: e.id, bus: e.station });
        }
        if e.first_slot < window.0 || e.last_slot > window.1 || e.first_slot > e.last_slot {
            return Err(SdrError::OutsideWindow {
                id: e.id,
                first: e.first_slot,
                last: e.last_slot,
                w0: window.0,
                w1: window.1,
            });
        }
    }

    let emb = HermitianEmbedding::new(n);
    let mut problem = SdpProblem::new();
    let mut families = ConstraintFamilies::default();
    let n_slots = slots.len();

    let w_blocks: Vec<BlockId> = (0..n_slots).map(|_| problem.add_block(emb.dim())).collect();
    let mut pg = Vec::with_capacity(n_slots);
    let mut qg = Vec::with_capacity(n_slots);
    let mut cost_epi = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let pg_t: Vec<ScalarId> = network
            .generators
            .iter()
            .map(|_| problem.add_scalar(ScalarKind::Nonneg))
            .collect();
        let qg_t: Vec<ScalarId> = network
            .generators
            .iter()
            .map(|_| problem.add_scalar(ScalarKind::Nonneg))
            .collect();
        let epi_t: Vec<Option<ScalarId>> = network
            .generators
            .iter()
            .map(|g| (g.cost.0 > 0.0).then(|| problem.add_scalar(ScalarKind::Nonneg)))
            .collect();
        pg.push(pg_t);
        qg.push(qg_t);
        cost_epi.push(epi_t);
    }
    let mut charge_vars: Vec<Vec<(usize, ScalarId)>> = Vec::with_capacity(pevs.len());
    for e in pevs {
        let vars = (e.first_slot..=e.last_slot)
            .map(|s| (s, problem.add_scalar(ScalarKind::Nonneg)))
            .collect();
        charge_vars.push(vars);
    }

    let mut objective = LinExpr::new();
    let base = network.base_mva;
    let kw2pu = kw_to_pu(base);

    for (off, slot) in slots.iter().enumerate() {
        let wb = w_blocks[off];

        // Power balance, real and imaginary rows per bus.
        for k in 0..n {
            let mut g_mat = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
            for &m in network.neighbors(k) {
                let y_conj = network.line_admittance(k, m).expect("adjacency").conj();
                g_mat[(k, k)] += y_conj;
                g_mat[(m, k)] -= y_conj; // Trace(E_mk W) = W_km
            }
            let phi = (&g_mat + g_mat.adjoint()) * Complex64::new(0.5, 0.0);
            let psi = (&g_mat - g_mat.adjoint()) * Complex64::new(0.0, -0.5);

            let gens_here: Vec<usize> = network
                .generators
                .iter()
                .enumerate()
                .filter(|(_, g)| g.bus == k + 1)
                .map(|(i, _)| i)
                .collect();

            let mut re_row = LinExpr::new();
            for (r, c, w) in emb.functional_terms(&phi) {
                re_row.add_block(wb, r, c, w);
            }
            let mut re_rhs = -slot.p_load_pu[k];
            for &g in &gens_here {
                re_row.add_scalar(pg[off][g], -1.0);
                re_rhs += network.generators[g].p_min / base;
            }
            for (e, entry) in pevs.iter().enumerate() {
                if entry.station == k + 1 {
                    for &(s, var) in &charge_vars[e] {
                        if s == slot.slot {
                            re_row.add_scalar(var, kw2pu);
                        }
                    }
                }
            }
            families.balance.push(problem.add_constraint(re_row, Sense::Eq, re_rhs));

            let mut im_row = LinExpr::new();
            for (r, c, w) in emb.functional_terms(&psi) {
                im_row.add_block(wb, r, c, w);
            }
            let mut im_rhs = -slot.q_load_pu[k];
            for &g in &gens_here {
                im_row.add_scalar(qg[off][g], -1.0);
                im_rhs += network.generators[g].q_min / base;
            }
            families.balance.push(problem.add_constraint(im_row, Sense::Eq, im_rhs));
        }

        // Voltage magnitude box on the diagonal of W.
        for (k, bus) in network.buses.iter().enumerate() {
            let mut upper = LinExpr::new();
            let mut lower = LinExpr::new();
            for (r, c, w) in emb.re_terms(k, k) {
                upper.add_block(wb, r, c, w);
                lower.add_block(wb, r, c, -w);
            }
            families
                .voltage_box
                .push(problem.add_constraint(upper, Sense::Le, bus.v_max * bus.v_max));
            families
                .voltage_box
                .push(problem.add_constraint(lower, Sense::Le, -(bus.v_min * bus.v_min)));
        }

        // Two-sided angle constraint |Im W_km| <= Re W_km tan(theta_max).
        for line in &network.lines {
            let (k, m) = (line.from - 1, line.to - 1);
            let tan = line.theta_max.tan();
            for sign in [1.0, -1.0] {
                let mut row = LinExpr::new();
                for (r, c, w) in emb.im_terms(k, m) {
                    row.add_block(wb, r, c, sign * w);
                }
                for (r, c, w) in emb.re_terms(k, m) {
                    row.add_block(wb, r, c, -tan * w);
                }
                families.angle.push(problem.add_constraint(row, Sense::Le, 0.0));
            }
        }

        // Generation boxes on the shifted variables.
        for (g, gen) in network.generators.iter().enumerate() {
            families.generation_box.push(problem.add_constraint(
                LinExpr::new().scalar(pg[off][g], 1.0),
                Sense::Le,
                (gen.p_max - gen.p_min) / base,
            ));
            families.generation_box.push(problem.add_constraint(
                LinExpr::new().scalar(qg[off][g], 1.0),
                Sense::Le,
                (gen.q_max - gen.q_min) / base,
            ));
        }

        // Cost: quadratic through the epigraph block, linear directly.
        for (g, gen) in network.generators.iter().enumerate() {
            let (c2, c1, c0) = gen.cost;
            if let Some(s_var) = cost_epi[off][g] {
                let eb = problem.add_block(2);
                let sq = c2.sqrt();
                families.epigraph.push(problem.add_constraint(
                    LinExpr::new().block(eb, 0, 0, 1.0).scalar(s_var, -1.0),
                    Sense::Eq,
                    0.0,
                ));
                families.epigraph.push(problem.add_constraint(
                    LinExpr::new().block(eb, 1, 1, 1.0),
                    Sense::Eq,
                    1.0,
                ));
                families.epigraph.push(problem.add_constraint(
                    LinExpr::new().block(eb, 0, 1, 1.0).scalar(pg[off][g], -sq),
                    Sense::Eq,
                    sq * gen.p_min / base,
                ));
                objective.add_scalar(s_var, dt_hours * base * base);
            }
            objective.add_scalar(pg[off][g], dt_hours * c1 * base);
            objective.add_constant(dt_hours * (c1 * gen.p_min + c0));
        }

        // Charging cost and rate limits.
        for (e, entry) in pevs.iter().enumerate() {
            for &(s, var) in &charge_vars[e] {
                if s == slot.slot {
                    objective.add_scalar(var, dt_hours * slot.price_per_kwh);
                    families.rate.push(problem.add_constraint(
                        LinExpr::new().scalar(var, 1.0),
                        Sense::Le,
                        entry.p_max_kw,
                    ));
                }
            }
        }
    }

    // Energy completion per vehicle, in kWh.
    for (e, entry) in pevs.iter().enumerate() {
        let mut row = LinExpr::new();
        for &(_, var) in &charge_vars[e] {
            row.add_scalar(var, entry.u_h * dt_hours);
        }
        families.completion.push(problem.add_constraint(row, Sense::Eq, entry.target_kwh));
    }

    problem.set_objective(objective);

    let model = WindowModel {
        window,
        n_bus: n,
        dt_hours,
        base_mva: base,
        emb,
        w_blocks,
        pg,
        qg,
        cost_epi,
        charge_vars,
        entries: pevs.to_vec(),
        prices: slots.iter().map(|s| s.price_per_kwh).collect(),
        slot_loads: slots
            .iter()
            .map(|s| (s.p_load_pu.clone(), s.q_load_pu.clone()))
            .collect(),
        families,
    };
    Ok((problem, model))
}

/// Build the single-slot dispatch problem with charging fixed: the slot's
/// rank-repair subproblem. Fixed charges enter the balance rows exactly
/// like price-inelastic load, so they are folded into the load snapshot;
/// the objective is the slot's generation cost alone.
pub fn build_repair_slot(
    network: &Network,
    slot: &SlotGrid,
    fixed_charges_bus_kw: &[f64],
    dt_hours: f64,
) -> Result<(SdpProblem, WindowModel), SdrError> {
    let mut patched = slot.clone();
    let kw2pu = kw_to_pu(network.base_mva);
    for (k, kw) in fixed_charges_bus_kw.iter().enumerate() {
        patched.p_load_pu[k] += kw * kw2pu;
    }
    build_window_sdr(network, &[patched], &[], dt_hours)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grid::parse_case;
    use crate::sdp::{solve, SolveStatus, SolverOptions};

    fn flat_slot(network: &Network, slot: usize, price: f64) -> SlotGrid {
        let base = network.base_mva;
        SlotGrid {
            slot,
            p_load_pu: network.buses.iter().map(|b| b.p_load_base / base).collect(),
            q_load_pu: network.buses.iter().map(|b| b.q_load_base / base).collect(),
            price_per_kwh: price,
        }
    }

    fn two_bus() -> Network {
        parse_case(bundled::CASE2).unwrap()
    }

    #[test]
    fn audits_two_bus_two_slot_model_counts() {
        let net = two_bus();
        let pevs = vec![PevWindowEntry {
            pev_idx: 0,
            id: 1,
            station: 1,
            first_slot: 1,
            last_slot: 2,
            target_kwh: 10.0,
            p_max_kw: 20.0,
            u_h: 0.9,
        }];
        let slots = vec![flat_slot(&net, 1, 0.3), flat_slot(&net, 2, 0.2)];
        let (problem, model) = build_window_sdr(&net, &slots, &pevs, 0.5).unwrap();
        // 2 embedded W blocks (4x4) + 2 epigraph blocks (c2 > 0).
        assert_eq!(problem.n_blocks(), 4);
        assert_eq!(problem.block_dim(model.w_block(1).unwrap()), 4);
        // Scalars: per slot Pg, Qg, epigraph = 3, plus 2 charge rates.
        assert_eq!(problem.n_scalars(), 8);
        // Families: 2 buses x 2 parts x 2 slots balances, 2x2x2 voltage
        // rows, 1 line x 2 sides x 2 slots angles, 4 rate bounds come from
        // 2 charge slots... one per charge variable.
        assert_eq!(model.families.balance.len(), 8);
        assert_eq!(model.families.voltage_box.len(), 8);
        assert_eq!(model.families.angle.len(), 4);
        assert_eq!(model.families.generation_box.len(), 4);
        assert_eq!(model.families.rate.len(), 2);
        assert_eq!(model.families.completion.len(), 1);
        assert_eq!(model.families.epigraph.len(), 6);
    }

    #[test]
    fn balance_row_coefficients_expand_admittance() {
        // Line y = 1 - 3j: the bus-1 real balance reads
        // Re[(W11 - W12)(1 + 3j)] = W11 - Re W12 + 3 Im W12.
        let net = Network::from_parts(
            100.0,
            vec![
                crate::grid::Bus { id: 1, p_load_base: 0.0, q_load_base: 0.0, v_min: 0.9, v_max: 1.1 },
                crate::grid::Bus { id: 2, p_load_base: 10.0, q_load_base: 0.0, v_min: 0.9, v_max: 1.1 },
            ],
            vec![crate::grid::Line {
                from: 1,
                to: 2,
                y: num_complex::Complex64::new(1.0, -3.0),
                theta_max: 0.5,
            }],
            vec![crate::grid::Generator {
                bus: 1,
                p_min: 0.0,
                p_max: 100.0,
                q_min: -50.0,
                q_max: 50.0,
                cost: (0.0, 1.0, 0.0),
            }],
        );
        let slots = vec![flat_slot(&net, 1, 0.0)];
        let (problem, model) = build_window_sdr(&net, &slots, &[], 1.0).unwrap();
        let row_idx = model.families.balance[0];
        let (expr, _, _) = &problem.constraints[row_idx];
        // Evaluate the row's W-part against an arbitrary Hermitian matrix.
        let emb = model.embedding();
        let mut h = nalgebra::DMatrix::from_element(2, 2, num_complex::Complex64::new(0.0, 0.0));
        h[(0, 0)] = num_complex::Complex64::new(1.21, 0.0);
        h[(1, 1)] = num_complex::Complex64::new(0.95, 0.0);
        h[(0, 1)] = num_complex::Complex64::new(0.87, -0.21);
        h[(1, 0)] = h[(0, 1)].conj();
        let x = emb.embed(&h);
        let mut via_row = 0.0;
        for &(b, r, c, v) in &expr.block_terms {
            assert_eq!(b, model.w_block(1).unwrap());
            via_row += v * x[(r, c)];
        }
        let expected = h[(0, 0)].re - h[(0, 1)].re + 3.0 * h[(0, 1)].im;
        assert!((via_row - expected).abs() < 1e-12, "{via_row} vs {expected}");
    }

    #[test]
    fn no_pevs_single_slot_is_plain_opf() {
        let net = two_bus();
        let (problem, model) = build_window_sdr(&net, &[flat_slot(&net, 1, 0.3)], &[], 0.5).unwrap();
        assert!(model.families.completion.is_empty());
        assert!(model.families.rate.is_empty());
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let slot = model.extract_slot(&net, &sol, 1, RANK_EPS).unwrap();
        assert!(slot.rank_gap <= RANK_EPS, "gap {}", slot.rank_gap);
        assert!(slot.voltage.is_some());
        assert!(slot.flow_residual.unwrap() <= 1e-6, "residual {:?}", slot.flow_residual);
        // Dispatch must cover the 20 MW load plus line losses.
        assert!(slot.pg_mw[0] > 20.0 && slot.pg_mw[0] < 24.0, "pg {}", slot.pg_mw[0]);
    }

    #[test]
    fn rank_gap_examples() {
        let v = nalgebra::DVector::from_vec(vec![
            num_complex::Complex64::new(1.0, 0.2),
            num_complex::Complex64::new(0.8, -0.4),
        ]);
        let rank_one = nalgebra::DMatrix::from_fn(2, 2, |r, c| v[r] * v[c].conj());
        assert_eq!(rank_gap(&rank_one).unwrap(), 0.0);
        let eye = nalgebra::DMatrix::from_diagonal_element(2, 2, num_complex::Complex64::new(1.0, 0.0));
        assert!((rank_gap(&eye).unwrap() - 1.0).abs() < 1e-12);
        let mut indef = eye.clone();
        indef[(1, 1)] = num_complex::Complex64::new(-1.0, 0.0);
        assert!(matches!(rank_gap(&indef), Err(SdrError::NotPsd { .. })));
    }

    #[test]
    fn recover_voltage_examples() {
        let ones = nalgebra::DMatrix::from_element(2, 2, num_complex::Complex64::new(1.0, 0.0));
        let v = recover_voltage(&ones, 0).unwrap();
        assert!((v[0] - num_complex::Complex64::new(1.0, 0.0)).norm() < 1e-10);
        assert!((v[1] - num_complex::Complex64::new(1.0, 0.0)).norm() < 1e-10);

        let single = nalgebra::DMatrix::from_element(1, 1, num_complex::Complex64::new(4.0, 0.0));
        let v = recover_voltage(&single, 0).unwrap();
        assert!((v[0].re - 2.0).abs() < 1e-12);

        // Construct-and-recover round trip up to global phase.
        let target = vec![
            num_complex::Complex64::new(1.0, 0.0),
            num_complex::Complex64::from_polar(0.9, -0.1),
        ];
        let w = nalgebra::DMatrix::from_fn(2, 2, |r, c| target[r] * target[c].conj());
        let rec = recover_voltage(&w, 0).unwrap();
        for (a, b) in rec.iter().zip(&target) {
            assert!((a.norm() - b.norm()).abs() < 1e-10);
        }
        let angle = (rec[1] / rec[0]).arg();
        assert!((angle + 0.1).abs() < 1e-10, "angle {angle}");

        let zero = nalgebra::DMatrix::from_element(1, 1, num_complex::Complex64::new(0.0, 0.0));
        assert!(matches!(recover_voltage(&zero, 0), Err(SdrError::NonPositiveEigenvalue { .. })));
    }

    #[test]
    fn flow_residual_zero_voltage_equals_load() {
        let net = two_bus();
        let v = vec![num_complex::Complex64::new(0.0, 0.0); 2];
        let p_load = vec![0.0, 0.20];
        let q_load = vec![0.0, 0.05];
        let r = flow_residual(&net, &v, &[0.0], &[0.0], &p_load, &q_load, &[0.0, 0.0]);
        let expected = num_complex::Complex64::new(0.20, 0.05).norm();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn flow_residual_grows_with_perturbation() {
        let net = two_bus();
        let (problem, model) = build_window_sdr(&net, &[flat_slot(&net, 1, 0.3)], &[], 0.5).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        let slot = model.extract_slot(&net, &sol, 1, RANK_EPS).unwrap();
        let v = slot.voltage.clone().unwrap();
        let base_residual = slot.flow_residual.unwrap();
        let mut residuals = Vec::new();
        for mag in [1e-3, 3e-3, 1e-2] {
            let mut pert = v.clone();
            pert[1] += num_complex::Complex64::new(mag, 0.0);
            residuals.push(flow_residual(
                &net,
                &pert,
                &slot.pg_mw,
                &slot.qg_mvar,
                &model.slot_loads[0].0,
                &model.slot_loads[0].1,
                &[0.0, 0.0],
            ));
        }
        assert!(residuals[0] > base_residual);
        assert!(residuals[1] > residuals[0]);
        assert!(residuals[2] > residuals[1]);
    }

    #[test]
    fn extract_slot_errors_outside_window() {
        let net = two_bus();
        let (problem, model) = build_window_sdr(&net, &[flat_slot(&net, 3, 0.3)], &[], 0.5).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert!(matches!(
            model.extract_slot(&net, &sol, 4, RANK_EPS),
            Err(SdrError::SlotNotInWindow { slot: 4 })
        ));
    }

    #[test]
    fn load_vector_length_mismatch_is_rejected() {
        let net = two_bus();
        let bad = SlotGrid {
            slot: 1,
            p_load_pu: vec![0.0; 3],
            q_load_pu: vec![0.0; 3],
            price_per_kwh: 0.1,
        };
        assert!(matches!(
            build_window_sdr(&net, &[bad], &[], 0.5),
            Err(SdrError::LoadLength { slot: 1, .. })
        ));
    }

    #[test]
    fn extract_slot_withholds_voltage_above_tolerance() {
        let net = two_bus();
        let (problem, model) = build_window_sdr(&net, &[flat_slot(&net, 1, 0.3)], &[], 0.5).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        // Interior-point solutions keep a tiny spectral tail, so a zero
        // tolerance forces the unavailable-voltage contract path.
        let slot = model.extract_slot(&net, &sol, 1, 0.0).unwrap();
        assert!(slot.voltage.is_none());
        assert!(slot.flow_residual.is_none());
        assert!(slot.rank_gap > 0.0);
    }

    #[test]
    fn pev_at_non_generator_bus_is_rejected() {
        let net = two_bus();
        let pevs = vec![PevWindowEntry {
            pev_idx: 0,
            id: 9,
            station: 2,
            first_slot: 1,
            last_slot: 1,
            target_kwh: 5.0,
            p_max_kw: 20.0,
            u_h: 0.9,
        }];
        let slots = vec![flat_slot(&net, 1, 0.3)];
        assert!(matches!(
            build_window_sdr(&net, &slots, &pevs, 0.5),
            Err(SdrError::NotAStation { id: 9, bus: 2 })
        ));
    }

    #[test]
    fn solved_window_satisfies_every_built_constraint() {
        let net = parse_case(bundled::CASE9).unwrap();
        let pevs = vec![PevWindowEntry {
            pev_idx: 0,
            id: 1,
            station: 2,
            first_slot: 1,
            last_slot: 2,
            target_kwh: 12.0,
            p_max_kw: 20.0,
            u_h: 0.9,
        }];
        let slots = vec![flat_slot(&net, 1, 0.3), flat_slot(&net, 2, 0.2)];
        let (problem, _model) = build_window_sdr(&net, &slots, &pevs, 0.5).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let b_scale = 1.0
            + problem
                .constraints
                .iter()
                .map(|(_, _, rhs)| rhs.abs())
                .fold(0.0f64, f64::max);
        for (i, (expr, sense, rhs)) in problem.constraints.iter().enumerate() {
            let value = expr.eval(&sol.blocks, &sol.scalars);
            match sense {
                crate::sdp::Sense::Eq => assert!(
                    (value - rhs).abs() <= 1e-6 * b_scale,
                    "equality {i}: {value} vs {rhs}"
                ),
                crate::sdp::Sense::Le => assert!(
                    value <= rhs + 1e-6 * b_scale,
                    "inequality {i}: {value} > {rhs}"
                ),
            }
        }
        // The two-sided angle rows imply Re W_km >= 0 on every line.
        for t in 1..=2 {
            let w = _model.w_at(&sol, t).unwrap();
            for line in &net.lines {
                let re = w[(line.from - 1, line.to - 1)].re;
                assert!(re >= -1e-8, "slot {t} line {}-{}: Re W = {re}", line.from, line.to);
            }
        }
    }

    #[test]
    fn objective_decomposition_matches_reported_total() {
        let net = two_bus();
        let pevs = vec![PevWindowEntry {
            pev_idx: 0,
            id: 1,
            station: 1,
            first_slot: 1,
            last_slot: 2,
            target_kwh: 10.0,
            p_max_kw: 20.0,
            u_h: 0.9,
        }];
        let slots = vec![flat_slot(&net, 1, 0.3), flat_slot(&net, 2, 0.2)];
        let (problem, model) = build_window_sdr(&net, &slots, &pevs, 0.5).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let (gen_cost, charge_cost) = model.objective_breakdown(&net, &sol);
        // The epigraph scalar may sit above c2 P^2 by the solver gap only.
        assert!(
            (gen_cost + charge_cost - sol.primal_objective).abs() <= 1e-6 * (1.0 + sol.primal_objective.abs()),
            "decomposition {} + {} vs reported {}",
            gen_cost,
            charge_cost,
            sol.primal_objective
        );
    }

    #[test]
    fn relaxation_lower_bounds_feasible_points() {
        // Any feasible (V, R) of the nonconvex problem gives W = V V^H
        // feasible for the SDP with equal objective, so the SDP optimum is
        // a lower bound. Probe a grid of feasible voltage pairs.
        let net = two_bus();
        let (problem, _model) = build_window_sdr(&net, &[flat_slot(&net, 1, 0.0)], &[], 1.0).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let y = net.lines[0].y;
        let base = net.base_mva;
        let gen = &net.generators[0];
        let load2 = Complex64::new(
            net.buses[1].p_load_base / base,
            net.buses[1].q_load_base / base,
        );
        // For a chosen |V1|, solve the 2 bus-2 balance equations for
        // (|V2|, theta) by Newton with numeric Jacobian.
        let balance2 = |v1_mag: f64, v2_mag: f64, theta: f64| -> (f64, f64) {
            let v1 = Complex64::new(v1_mag, 0.0);
            let v2 = Complex64::from_polar(v2_mag, theta);
            let s2 = v2 * (y * (v2 - v1)).conj();
            (s2.re + load2.re, s2.im + load2.im)
        };
        let mut checked = 0;
        for v1_mag in [0.96, 1.0, 1.04, 1.08] {
            let (mut v2_mag, mut theta) = (v1_mag - 0.03, -0.1f64);
            for _ in 0..50 {
                let (f1, f2) = balance2(v1_mag, v2_mag, theta);
                if f1.hypot(f2) < 1e-12 {
                    break;
                }
                let h = 1e-7;
                let (g1, g2) = balance2(v1_mag, v2_mag + h, theta);
                let (k1, k2) = balance2(v1_mag, v2_mag, theta + h);
                let (a, b) = ((g1 - f1) / h, (k1 - f1) / h);
                let (c, d) = ((g2 - f2) / h, (k2 - f2) / h);
                let det = a * d - b * c;
                v2_mag -= (f1 * d - b * f2) / det;
                theta -= (a * f2 - f1 * c) / det;
            }
            let (f1, f2) = balance2(v1_mag, v2_mag, theta);
            assert!(f1.hypot(f2) < 1e-10, "Newton failed at |V1| = {v1_mag}");
            if !(0.9..=1.1).contains(&v2_mag) || theta.abs() > net.lines[0].theta_max {
                continue;
            }
            let v1 = Complex64::new(v1_mag, 0.0);
            let v2 = Complex64::from_polar(v2_mag, theta);
            let s1 = v1 * (y * (v1 - v2)).conj();
            let (pg, qg) = (s1.re * base, s1.im * base);
            if pg < gen.p_min || pg > gen.p_max || qg < gen.q_min || qg > gen.q_max {
                continue;
            }
            checked += 1;
            let objective = gen.cost_at(pg);
            assert!(
                sol.primal_objective <= objective + 1e-6 * (1.0 + objective.abs()),
                "SDR {} above feasible point {}",
                sol.primal_objective,
                objective
            );
        }
        assert!(checked > 0, "no feasible probe points inside the boxes");
    }
}
